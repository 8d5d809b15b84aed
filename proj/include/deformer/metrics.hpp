#pragma once

#include <span>
#include <vector>

#include "json.hpp"

namespace deformer {

/// confusion[true][pred] counts.
using ConfusionMatrix = std::vector<std::vector<std::size_t>>;

struct MetricsReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> per_class_f1;
  ConfusionMatrix confusion;

  std::size_t sample_count() const;
  bool operator==(const MetricsReport&) const = default;
};

/// Throws DomainError on empty input or labels outside [0, n_classes),
/// DimensionError on length mismatch.
ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> labels, std::size_t n_classes);

/// Fraction of exact matches.
double accuracy(std::span<const int> preds, std::span<const int> labels);

/// 2TP / (2TP + FP + FN) per class; a class never seen nor predicted scores 0.
std::vector<double> per_class_f1(std::span<const int> preds, std::span<const int> labels, std::size_t n_classes);

/// Unweighted mean of per_class_f1.
double macro_f1(std::span<const int> preds, std::span<const int> labels, std::size_t n_classes);

MetricsReport make_report(std::span<const int> preds, std::span<const int> labels, std::size_t n_classes);

nlohmann::json to_json(const MetricsReport& r);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Population std by default, (n - 1) denominator when `sample`.
MeanStd mean_std(std::span<const double> values, bool sample = false);

}  // namespace deformer
