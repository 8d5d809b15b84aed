#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "deformer/model.hpp"

namespace deformer {

/// Input-gradient map of one class logit, min-max normalised to [0, 1].
struct SaliencyMap {
  std::size_t channels = 0;
  std::size_t length = 0;
  std::vector<double> values;          // [channels * length], channel-major
  std::vector<double> channel_scores;  // [channels]
  int class_index = 0;
  std::string subject_id;
  std::vector<std::string> channel_names;

  double at(std::size_t ch, std::size_t t) const { return values[ch * length + t]; }
};

/// Affine map of v onto [0, 1]; a constant input becomes all zeros.
void normalize_minmax(std::span<double> v);

/// Fills channel_scores from values: time-mean per channel, then min-max.
void compute_channel_scores(SaliencyMap& map);

/// |d logit[class_idx] / dX| for one segment x [c, l] in eval mode.
/// Parameters, their gradients and normalisation statistics are left as found.
template <typename T>
SaliencyMap saliency(Deformer<T>& model, const Tensor<T>& x, int class_idx);

/// One map per segment of x [B, c, l].
template <typename T>
std::vector<SaliencyMap> saliency_batch(Deformer<T>& model, const Tensor<T>& x, int class_idx);

/// Elementwise mean of the maps followed by renormalisation.
SaliencyMap average_saliency(const std::vector<SaliencyMap>& maps);

/// CSV: "channel,score" rows, a blank line, then "channel,t0,..." matrix rows.
void export_saliency_csv(const SaliencyMap& map, const std::filesystem::path& path);
SaliencyMap read_saliency_csv(const std::filesystem::path& path);
/// Binary 8-bit PGM, width = length, height = channels.
void export_saliency_pgm(const SaliencyMap& map, const std::filesystem::path& path);

}  // namespace deformer
