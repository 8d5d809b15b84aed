#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "deformer/checkpoint.hpp"
#include "deformer/data.hpp"
#include "deformer/metrics.hpp"
#include "deformer/model.hpp"

namespace deformer {

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double val_acc = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

struct FitResult {
  Checkpoint best;
  std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains with cross-entropy, Adam and a per-epoch cosine schedule. Keeps the
/// epoch with the highest validation accuracy (earliest on ties) and leaves
/// `model` holding those weights.
template <typename T>
FitResult fit(Deformer<T>& model, const EEGDataset& data, const std::vector<SegmentRef>& train,
              const std::vector<SegmentRef>& val, const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Arg-max predictions in eval mode; leaves parameters and statistics untouched.
template <typename T>
std::vector<int> predict(Deformer<T>& model, const EEGDataset& data, const std::vector<SegmentRef>& refs,
                         std::size_t batch_size = 64);

template <typename T>
MetricsReport evaluate(Deformer<T>& model, const EEGDataset& data, const std::vector<SegmentRef>& refs,
                       std::size_t batch_size = 64);

/// Restores `ckpt` into `model` (checking compatibility) and evaluates.
template <typename T>
MetricsReport evaluate(Deformer<T>& model, const Checkpoint& ckpt, const EEGDataset& data,
                       const std::vector<SegmentRef>& refs, std::size_t batch_size = 64);

struct LosoFold {
  std::string subject_id;
  std::uint64_t seed = 0;
  MetricsReport report;
  std::vector<EpochRecord> history;
  Checkpoint best;
};

struct LosoResult {
  std::vector<LosoFold> folds;
  MeanStd accuracy, macro_f1;
};

struct LosoOptions {
  /// Restrict to these held-out subjects (all when empty).
  std::vector<std::string> subjects;
  std::function<void(const std::string& subject, const EpochRecord&)> on_epoch;
  std::function<void(const LosoFold&)> on_fold;
};

/// Seed of the fold holding out `subject_id`.
std::uint64_t fold_seed(std::uint64_t seed, const std::string& subject_id);

/// One fit + evaluate per held-out subject, then mean/std across folds.
LosoResult run_loso(const EEGDataset& data, const ModelConfig& model_config, const TrainConfig& train_config,
                    const LosoOptions& options = {});

/// epoch,lr,train_loss,val_acc
void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path);
/// subject,acc,f1_macro per fold, then mean and std rows.
void write_loso_summary_csv(const LosoResult& result, const std::filesystem::path& path);

}  // namespace deformer
