#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "deformer/config.hpp"
#include "deformer/model.hpp"
#include "deformer/optim.hpp"
#include "deformer/rng.hpp"

namespace deformer {

inline constexpr int kCheckpointFormatVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const StoredTensor&) const = default;
};

struct StoredBatchNorm {
  std::string name;
  std::vector<double> running_mean, running_var;

  bool operator==(const StoredBatchNorm&) const = default;
};

/// Snapshot of a model (and optionally its optimizer) in 64-bit storage.
struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  std::vector<StoredTensor> params;
  std::vector<StoredBatchNorm> batchnorms;
  std::size_t adam_steps = 0;
  std::vector<StoredTensor> adam_m, adam_v;  // empty when no optimizer was captured
  std::size_t epoch = 0;
  double best_val_acc = 0.0;
  RngState rng;

  bool operator==(const Checkpoint&) const = default;
};

template <typename T>
Checkpoint capture_checkpoint(Deformer<T>& model, const TrainConfig& train, const Adam<T>* optimizer);

/// Copies parameters and normalisation statistics into `model`. Throws
/// CheckpointError naming the first missing, extra or mis-shaped tensor.
template <typename T>
void restore_checkpoint(Deformer<T>& model, const Checkpoint& ckpt);

/// Restores optimizer moments; same diagnostics as restore_checkpoint.
template <typename T>
void restore_optimizer(Adam<T>& optimizer, const Deformer<T>& model, const Checkpoint& ckpt);

/// Writes `dir`/manifest.json and `dir`/tensors.bin (creating `dir`).
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
/// Throws CheckpointError when the manifest and blob disagree.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace deformer
