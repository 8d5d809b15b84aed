#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace deformer {

enum class IpMode { kPower, kMean, kStd, kNone };
/// Which per-block feature map feeds the purification unit.
enum class IpSource { kFine, kCoarse, kFused };

std::string to_string(IpMode m);
std::string to_string(IpSource s);
IpMode parse_ip_mode(const std::string& s);
IpSource parse_ip_source(const std::string& s);

/// Temporal kernel length rule: floor(0.1 * fs), bumped to the next odd value.
std::size_t odd_kernel_length(double sampling_rate);

struct ModelConfig {
  std::size_t channels = 8;
  std::size_t segment_len = 256;
  double sampling_rate = 128.0;
  std::size_t kernels = 64;
  std::size_t heads = 16;
  std::size_t head_dim = 16;
  std::size_t depth = 4;
  double ffn_expansion = 2.0;
  double dropout_p = 0.5;
  std::size_t n_classes = 2;
  bool ftl_enabled = true;
  bool dense_enabled = true;
  IpMode ip_mode = IpMode::kPower;
  IpSource ip_source = IpSource::kFine;
  /// Blocks (0-based) whose IP vector is dropped from the embedding.
  std::vector<std::size_t> ip_removed;
  double ip_eps = 1e-8;

  /// Throws ConfigError listing every violated constraint.
  void validate() const;
  std::size_t kernel_length() const { return odd_kernel_length(sampling_rate); }
  /// ip_source after resolving "fine" when the fine branch is disabled.
  IpSource effective_ip_source() const;

  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  double lr0 = 1e-3;
  double lr_min = 0.0;
  double weight_decay = 1e-5;
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;
  /// Split 80/20 inside each training subject instead of over the pooled set.
  bool per_subject_split = false;
  /// Sample (n-1) instead of population std in LOSO summaries.
  bool sample_std = false;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
/// Strict: unknown keys and wrong types are reported with their JSON path.
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Named geometries: "dataset1", "dataset2", "dataset3", "toy", "desk".
ModelConfig model_preset(const std::string& name);
TrainConfig train_preset(const std::string& name);

/// Applies "section.key=value" (value parsed as JSON, falling back to a
/// string) to a {"model":..., "train":...} document.
void apply_override(nlohmann::json& doc, const std::string& assignment);

}  // namespace deformer
