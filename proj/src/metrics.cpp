#include "deformer/metrics.hpp"

#include <cmath>

#include "deformer/errors.hpp"

namespace deformer {

namespace {

void check_pair(std::span<const int> preds, std::span<const int> labels, const char* fn) {
  if (preds.size() != labels.size()) {
    throw DimensionError(std::string(fn) + ": " + std::to_string(preds.size()) + " predictions for " +
                         std::to_string(labels.size()) + " labels");
  }
  if (preds.empty()) throw DomainError(std::string(fn) + ": empty input");
}

}  // namespace

std::size_t MetricsReport::sample_count() const {
  std::size_t n = 0;
  for (const auto& row : confusion)
    for (auto v : row) n += v;
  return n;
}

ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> labels, std::size_t n_classes) {
  check_pair(preds, labels, "confusion_matrix");
  ConfusionMatrix cm(n_classes, std::vector<std::size_t>(n_classes, 0));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (int v : {preds[i], labels[i]}) {
      if (v < 0 || static_cast<std::size_t>(v) >= n_classes) {
        throw DomainError("confusion_matrix: class " + std::to_string(v) + " outside [0, " +
                          std::to_string(n_classes) + ")");
      }
    }
    ++cm[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(preds[i])];
  }
  return cm;
}

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  check_pair(preds, labels, "accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

std::vector<double> per_class_f1(std::span<const int> preds, std::span<const int> labels, std::size_t n_classes) {
  const auto cm = confusion_matrix(preds, labels, n_classes);
  std::vector<double> f1(n_classes, 0.0);
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::size_t tp = cm[c][c], fp = 0, fn = 0;
    for (std::size_t o = 0; o < n_classes; ++o) {
      if (o == c) continue;
      fp += cm[o][c];
      fn += cm[c][o];
    }
    const std::size_t denom = 2 * tp + fp + fn;
    f1[c] = denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  return f1;
}

double macro_f1(std::span<const int> preds, std::span<const int> labels, std::size_t n_classes) {
  const auto f1 = per_class_f1(preds, labels, n_classes);
  double s = 0.0;
  for (double v : f1) s += v;
  return s / static_cast<double>(n_classes);
}

MetricsReport make_report(std::span<const int> preds, std::span<const int> labels, std::size_t n_classes) {
  MetricsReport r;
  r.confusion = confusion_matrix(preds, labels, n_classes);
  r.accuracy = accuracy(preds, labels);
  r.per_class_f1 = per_class_f1(preds, labels, n_classes);
  r.macro_f1 = macro_f1(preds, labels, n_classes);
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  return {{"accuracy", r.accuracy},
          {"macro_f1", r.macro_f1},
          {"per_class_f1", r.per_class_f1},
          {"confusion", r.confusion},
          {"samples", r.sample_count()}};
}

MeanStd mean_std(std::span<const double> values, bool sample) {
  if (values.empty()) throw DomainError("mean_std: empty input");
  if (sample && values.size() < 2) throw DomainError("mean_std: sample std needs at least two values");
  MeanStd out;
  for (double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(values.size() - (sample ? 1 : 0)));
  return out;
}

}  // namespace deformer
