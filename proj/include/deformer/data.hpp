#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "deformer/rng.hpp"
#include "deformer/tensor.hpp"
#include "json.hpp"

namespace deformer {

/// One EEG window, channel-major: samples[ch * segment_len + t].
struct Segment {
  std::vector<float> samples;
  int label = 0;

  bool operator==(const Segment&) const = default;
};

struct SubjectData {
  std::string subject_id;
  std::vector<Segment> segments;

  bool operator==(const SubjectData&) const = default;
};

struct EEGDataset {
  std::vector<SubjectData> subjects;
  double sampling_rate = 0.0;
  std::size_t n_classes = 0;
  std::size_t channels = 0;
  std::size_t segment_len = 0;
  std::vector<std::string> channel_names;

  /// Throws if segments disagree on geometry or labels leave [0, n_classes).
  void validate() const;
  std::size_t segment_count() const;
  /// Index of the subject with this id; throws LookupError.
  std::size_t subject_index(const std::string& id) const;

  bool operator==(const EEGDataset&) const = default;
};

/// Position of one segment inside a dataset.
struct SegmentRef {
  std::size_t subject = 0;
  std::size_t index = 0;

  bool operator==(const SegmentRef&) const = default;
  auto operator<=>(const SegmentRef&) const = default;
};

// ---------------------------------------------------------------------------
// Synthetic EEG
// ---------------------------------------------------------------------------

/// Narrow-band oscillation added to a set of channels for one class.
struct ClassSignature {
  std::vector<std::size_t> channels;
  double center_hz = 10.0;
  double width_hz = 2.0;
  double amplitude = 1.0;
};

struct SyntheticSpec {
  std::size_t n_subjects = 10;
  std::size_t trials_per_class = 40;
  std::size_t channels = 8;
  std::size_t segment_len = 256;
  double sampling_rate = 128.0;
  /// class_signatures[c] lists the oscillations present in class c.
  std::vector<std::vector<ClassSignature>> class_signatures;
  double noise_exponent = 1.0;   // 1/f^alpha background
  double noise_amplitude = 1.0;  // background std per channel
  double subject_jitter = 0.2;   // per-subject gain drawn from 1 +- jitter

  std::size_t n_classes() const { return class_signatures.size(); }
  /// Channels that carry any signature.
  std::vector<std::size_t> signature_channels() const;
  void validate() const;
};

/// 10 subjects, 8 channels, 256 samples at 128 Hz, 40 segments per class;
/// class 1 carries a 10 Hz alpha burst on channels 2 and 5, class 0 is
/// background only.
SyntheticSpec default_synthetic_spec();

nlohmann::json to_json(const SyntheticSpec& s);
/// Strict parse; every schema violation is reported with its field path.
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);

/// Pure function of (spec, seed).
EEGDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Segmentation and labelling
// ---------------------------------------------------------------------------

/// Sliding windows over a [c, L] trial. stride = round(window * (1 - overlap)).
std::vector<Tensor<float>> segment_trial(const Tensor<float>& trial, std::size_t window, double overlap);

enum class FatigueLabel { kFatigue = 0, kAlert = 1, kExcluded = 2 };

/// Reaction-time rule: fatigue when both local and global RT exceed 2.5x the
/// alert RT, alert when both are below 1.5x, excluded otherwise. Both
/// comparisons are strict, so boundary ratios are excluded.
FatigueLabel label_fatigue(double rt_local, double rt_global, double rt_alert);

// ---------------------------------------------------------------------------
// Leave-one-subject-out split
// ---------------------------------------------------------------------------

struct Split {
  std::vector<SegmentRef> train, val, test;
};

/// Holds out every segment of `test_subject`; the rest is shuffled by `seed`
/// and split (1 - val_fraction) / val_fraction, pooled or per subject.
Split loso_split(const EEGDataset& dataset, const std::string& test_subject, double val_fraction,
                 std::uint64_t seed, bool per_subject = false);

/// 80/20-style split of every segment with an empty test set.
Split pooled_split(const EEGDataset& dataset, double val_fraction, std::uint64_t seed);

/// Fisher-Yates shuffle driven by `rng`.
void shuffle_refs(std::vector<SegmentRef>& refs, RngState& rng);

/// Stacks segments into x [B, c, l] and their labels.
template <typename T>
Tensor<T> make_batch(const EEGDataset& dataset, std::span<const SegmentRef> refs, std::vector<int>* labels);

std::vector<SegmentRef> all_segments(const EEGDataset& dataset);
std::vector<SegmentRef> subject_segments(const EEGDataset& dataset, std::size_t subject);

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

/// Little-endian "EEGD" container; see dataset_io.cpp for the layout.
void write_dataset(const EEGDataset& dataset, const std::filesystem::path& path);
EEGDataset read_dataset(const std::filesystem::path& path);
/// subject_id,index,label per segment.
void write_segment_csv(const EEGDataset& dataset, const std::filesystem::path& path);

}  // namespace deformer
