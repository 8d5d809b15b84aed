#include "deformer/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "deformer/errors.hpp"
#include "deformer/rng.hpp"

namespace deformer {

using nlohmann::json;

void EEGDataset::validate() const {
  if (subjects.empty()) throw ConfigError("dataset: subject list is empty");
  if (channels == 0 || segment_len == 0) throw ConfigError("dataset: zero channels or segment length");
  if (!(sampling_rate > 0.0)) throw ConfigError("dataset: sampling rate must be positive");
  if (n_classes < 1) throw ConfigError("dataset: n_classes must be >= 1");
  if (!channel_names.empty() && channel_names.size() != channels) {
    throw ConfigError("dataset: " + std::to_string(channel_names.size()) + " channel names for " +
                      std::to_string(channels) + " channels");
  }
  std::set<std::string> ids;
  for (const auto& s : subjects) {
    if (!ids.insert(s.subject_id).second) throw ConfigError("dataset: duplicate subject id '" + s.subject_id + "'");
    if (s.segments.empty()) throw ConfigError("dataset: subject '" + s.subject_id + "' has no segments");
    for (std::size_t i = 0; i < s.segments.size(); ++i) {
      const auto& seg = s.segments[i];
      if (seg.samples.size() != channels * segment_len) {
        throw DimensionError("dataset: subject '" + s.subject_id + "' segment " + std::to_string(i) + " has " +
                             std::to_string(seg.samples.size()) + " samples, expected " +
                             std::to_string(channels * segment_len));
      }
      if (seg.label < 0 || static_cast<std::size_t>(seg.label) >= n_classes) {
        throw DomainError("dataset: subject '" + s.subject_id + "' segment " + std::to_string(i) + " label " +
                          std::to_string(seg.label) + " outside [0, " + std::to_string(n_classes) + ")");
      }
    }
  }
}

std::size_t EEGDataset::segment_count() const {
  std::size_t n = 0;
  for (const auto& s : subjects) n += s.segments.size();
  return n;
}

std::size_t EEGDataset::subject_index(const std::string& id) const {
  for (std::size_t i = 0; i < subjects.size(); ++i)
    if (subjects[i].subject_id == id) return i;
  throw LookupError("dataset: unknown subject '" + id + "'");
}

// ---------------------------------------------------------------------------
// Synthetic EEG
// ---------------------------------------------------------------------------

std::vector<std::size_t> SyntheticSpec::signature_channels() const {
  std::set<std::size_t> out;
  for (const auto& cls : class_signatures)
    for (const auto& sig : cls) out.insert(sig.channels.begin(), sig.channels.end());
  return {out.begin(), out.end()};
}

void SyntheticSpec::validate() const {
  std::vector<std::string> errors;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) errors.push_back(msg);
  };
  need(n_subjects >= 1, "n_subjects: must be >= 1");
  need(trials_per_class >= 1, "trials_per_class: must be >= 1");
  need(channels >= 1, "channels: must be >= 1");
  need(segment_len >= 2, "segment_len: must be >= 2");
  need(sampling_rate > 0.0, "sampling_rate: must be positive");
  need(class_signatures.size() >= 2, "class_signatures: need at least two classes");
  need(noise_amplitude >= 0.0, "noise_amplitude: must be >= 0");
  need(subject_jitter >= 0.0 && subject_jitter < 1.0, "subject_jitter: must lie in [0, 1)");
  const double nyquist = sampling_rate / 2.0;
  for (std::size_t c = 0; c < class_signatures.size(); ++c) {
    for (std::size_t s = 0; s < class_signatures[c].size(); ++s) {
      const auto& sig = class_signatures[c][s];
      const std::string p = "class_signatures[" + std::to_string(c) + "][" + std::to_string(s) + "]";
      need(sig.center_hz > 0.0 && sig.center_hz < nyquist,
           p + ".center_hz: " + std::to_string(sig.center_hz) + " must lie in (0, Nyquist " +
               std::to_string(nyquist) + ")");
      need(sig.width_hz >= 0.0, p + ".width_hz: must be >= 0");
      need(sig.center_hz + sig.width_hz / 2.0 < nyquist,
           p + ".width_hz: band edge " + std::to_string(sig.center_hz + sig.width_hz / 2.0) +
               " reaches Nyquist " + std::to_string(nyquist));
      need(sig.amplitude >= 0.0, p + ".amplitude: must be >= 0");
      for (auto ch : sig.channels) need(ch < channels, p + ".channels: channel " + std::to_string(ch) + " out of range");
    }
  }
  if (!errors.empty()) {
    std::ostringstream os;
    os << "invalid synthetic spec:";
    for (const auto& e : errors) os << "\n  " << e;
    throw ConfigError(os.str());
  }
}

SyntheticSpec default_synthetic_spec() {
  SyntheticSpec s;
  s.class_signatures = {{}, {ClassSignature{{2, 5}, 10.0, 2.0, 1.0}}};
  return s;
}

json to_json(const SyntheticSpec& s) {
  json classes = json::array();
  for (const auto& cls : s.class_signatures) {
    json sigs = json::array();
    for (const auto& sig : cls) {
      sigs.push_back({{"channels", sig.channels},
                      {"center_hz", sig.center_hz},
                      {"width_hz", sig.width_hz},
                      {"amplitude", sig.amplitude}});
    }
    classes.push_back(sigs);
  }
  return json{{"n_subjects", s.n_subjects},
              {"trials_per_class", s.trials_per_class},
              {"channels", s.channels},
              {"segment_len", s.segment_len},
              {"sampling_rate", s.sampling_rate},
              {"class_signatures", classes},
              {"noise_exponent", s.noise_exponent},
              {"noise_amplitude", s.noise_amplitude},
              {"subject_jitter", s.subject_jitter}};
}

SyntheticSpec synthetic_spec_from_json(const json& j) {
  SyntheticSpec s;
  std::vector<std::string> errors;
  if (!j.is_object()) throw ConfigError("synthetic spec: expected a JSON object");
  static const std::set<std::string> known{"n_subjects",     "trials_per_class", "channels",
                                           "segment_len",    "sampling_rate",    "class_signatures",
                                           "noise_exponent", "noise_amplitude",  "subject_jitter"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) errors.push_back(key + ": unknown field");
  auto count = [&](const char* key, std::size_t& out) {
    if (!j.contains(key)) return;
    if (!j[key].is_number_unsigned()) return errors.push_back(std::string(key) + ": expected a non-negative integer");
    out = j[key].get<std::size_t>();
  };
  auto number = [&](const json& obj, const std::string& path, const char* key, double& out) {
    if (!obj.contains(key)) return;
    if (!obj[key].is_number()) return errors.push_back(path + key + ": expected a number");
    out = obj[key].get<double>();
  };
  count("n_subjects", s.n_subjects);
  count("trials_per_class", s.trials_per_class);
  count("channels", s.channels);
  count("segment_len", s.segment_len);
  number(j, "", "sampling_rate", s.sampling_rate);
  number(j, "", "noise_exponent", s.noise_exponent);
  number(j, "", "noise_amplitude", s.noise_amplitude);
  number(j, "", "subject_jitter", s.subject_jitter);
  if (j.contains("class_signatures")) {
    const json& classes = j["class_signatures"];
    if (!classes.is_array()) {
      errors.push_back("class_signatures: expected an array (one entry per class)");
    } else {
      for (std::size_t c = 0; c < classes.size(); ++c) {
        const std::string cp = "class_signatures[" + std::to_string(c) + "]";
        std::vector<ClassSignature> sigs;
        if (!classes[c].is_array()) {
          errors.push_back(cp + ": expected an array of signatures");
          s.class_signatures.push_back(sigs);
          continue;
        }
        for (std::size_t k = 0; k < classes[c].size(); ++k) {
          const json& o = classes[c][k];
          const std::string p = cp + "[" + std::to_string(k) + "].";
          ClassSignature sig;
          if (!o.is_object()) {
            errors.push_back(p.substr(0, p.size() - 1) + ": expected an object");
            continue;
          }
          for (const auto& [key, _] : o.items())
            if (key != "channels" && key != "center_hz" && key != "width_hz" && key != "amplitude")
              errors.push_back(p + key + ": unknown field");
          if (o.contains("channels")) {
            if (!o["channels"].is_array()) {
              errors.push_back(p + "channels: expected an array of channel indices");
            } else {
              for (const auto& ch : o["channels"]) {
                if (!ch.is_number_unsigned()) errors.push_back(p + "channels: expected non-negative integers");
                else sig.channels.push_back(ch.get<std::size_t>());
              }
            }
          }
          number(o, p, "center_hz", sig.center_hz);
          number(o, p, "width_hz", sig.width_hz);
          number(o, p, "amplitude", sig.amplitude);
          sigs.push_back(sig);
        }
        s.class_signatures.push_back(sigs);
      }
    }
  } else {
    s.class_signatures = default_synthetic_spec().class_signatures;
  }
  if (!errors.empty()) {
    std::ostringstream os;
    os << "synthetic spec schema violations:";
    for (const auto& e : errors) os << "\n  " << e;
    throw ConfigError(os.str());
  }
  s.validate();
  return s;
}

namespace {

// 1/f^alpha background with unit variance: random Fourier coefficients with
// variance f^-alpha per bin, summed directly (exact integer twiddle indexing).
void add_pink_noise(std::span<float> out, double alpha, double amplitude, RngState& rng,
                    const std::vector<double>& cos_table, const std::vector<double>& sin_table) {
  const std::size_t n = out.size();
  const std::size_t bins = n / 2;
  std::vector<double> acc(n, 0.0);
  double total_var = 0.0;
  for (std::size_t f = 1; f <= bins; ++f) {
    const double sd = std::pow(static_cast<double>(f), -alpha / 2.0);
    const double a = sd * rng.normal();
    const double b = sd * rng.normal();
    total_var += sd * sd;
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t idx = (f * t) % n;
      acc[t] += a * cos_table[idx] + b * sin_table[idx];
    }
  }
  const double norm = total_var > 0.0 ? amplitude / std::sqrt(total_var) : 0.0;
  for (std::size_t t = 0; t < n; ++t) out[t] += static_cast<float>(acc[t] * norm);
}

}  // namespace

EEGDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t c = spec.channels, l = spec.segment_len;
  EEGDataset ds;
  ds.sampling_rate = spec.sampling_rate;
  ds.n_classes = spec.n_classes();
  ds.channels = c;
  ds.segment_len = l;
  for (std::size_t ch = 0; ch < c; ++ch) ds.channel_names.push_back("ch" + std::to_string(ch));

  std::vector<double> cos_table(l), sin_table(l);
  for (std::size_t i = 0; i < l; ++i) {
    const double w = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(l);
    cos_table[i] = std::cos(w);
    sin_table[i] = std::sin(w);
  }

  const RngState root = RngState::from_seed(seed).split("synthetic");
  for (std::size_t s = 0; s < spec.n_subjects; ++s) {
    SubjectData subject;
    char id[16];
    std::snprintf(id, sizeof id, "S%02zu", s + 1);
    subject.subject_id = id;
    RngState subject_rng = root.split(s);
    RngState gain_rng = subject_rng.split("gain");
    const double gain = 1.0 + spec.subject_jitter * (2.0 * gain_rng.uniform() - 1.0);
    // Classes interleaved: trial 0 of every class, then trial 1, ...
    for (std::size_t trial = 0; trial < spec.trials_per_class; ++trial) {
      for (std::size_t cls = 0; cls < spec.n_classes(); ++cls) {
        const std::size_t index = subject.segments.size();
        RngState rng = subject_rng.split(1000 + index);
        Segment seg;
        seg.label = static_cast<int>(cls);
        seg.samples.assign(c * l, 0.0f);
        for (std::size_t ch = 0; ch < c; ++ch) {
          add_pink_noise(std::span<float>(seg.samples).subspan(ch * l, l), spec.noise_exponent,
                         spec.noise_amplitude, rng, cos_table, sin_table);
        }
        for (const auto& sig : spec.class_signatures[cls]) {
          const double freq = sig.center_hz + sig.width_hz * (rng.uniform() - 0.5);
          const double phase = 2.0 * std::numbers::pi * rng.uniform();
          const double amp = sig.amplitude * gain;
          for (auto ch : sig.channels) {
            for (std::size_t t = 0; t < l; ++t) {
              const double time = static_cast<double>(t) / spec.sampling_rate;
              seg.samples[ch * l + t] +=
                  static_cast<float>(amp * std::sin(2.0 * std::numbers::pi * freq * time + phase));
            }
          }
        }
        subject.segments.push_back(std::move(seg));
      }
    }
    ds.subjects.push_back(std::move(subject));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Segmentation and labelling
// ---------------------------------------------------------------------------

std::vector<Tensor<float>> segment_trial(const Tensor<float>& trial, std::size_t window, double overlap) {
  if (trial.dim() != 2) throw DimensionError("segment_trial: trial must be [c, L], got " + shape_str(trial.shape()));
  if (!(overlap >= 0.0 && overlap < 1.0)) {
    throw ConfigError("segment_trial: overlap " + std::to_string(overlap) + " must lie in [0, 1)");
  }
  const std::size_t c = trial.size(0), len = trial.size(1);
  if (window == 0 || window > len) {
    throw DomainError("segment_trial: window " + std::to_string(window) + " does not fit a trial of " +
                      std::to_string(len) + " samples; no segments");
  }
  const auto stride = static_cast<std::size_t>(std::llround(static_cast<double>(window) * (1.0 - overlap)));
  if (stride == 0) throw ConfigError("segment_trial: overlap leaves a zero stride");
  const std::size_t count = (len - window) / stride + 1;
  std::vector<Tensor<float>> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    Tensor<float> seg(Shape{c, window});
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy_n(trial.data().begin() + ch * len + s * stride, window, seg.data().begin() + ch * window);
    out.push_back(std::move(seg));
  }
  return out;
}

FatigueLabel label_fatigue(double rt_local, double rt_global, double rt_alert) {
  if (!(rt_local > 0.0 && rt_global > 0.0 && rt_alert > 0.0)) {
    throw DomainError("label_fatigue: reaction times must be positive");
  }
  if (rt_local > 2.5 * rt_alert && rt_global > 2.5 * rt_alert) return FatigueLabel::kFatigue;
  if (rt_local < 1.5 * rt_alert && rt_global < 1.5 * rt_alert) return FatigueLabel::kAlert;
  return FatigueLabel::kExcluded;
}

// ---------------------------------------------------------------------------
// Splits and batches
// ---------------------------------------------------------------------------

namespace {

std::size_t val_count(std::size_t n, double fraction) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction));
}

}  // namespace

void shuffle_refs(std::vector<SegmentRef>& refs, RngState& rng) {
  for (std::size_t i = refs.size(); i > 1; --i) std::swap(refs[i - 1], refs[rng.below(i)]);
}

std::vector<SegmentRef> all_segments(const EEGDataset& dataset) {
  std::vector<SegmentRef> out;
  for (std::size_t s = 0; s < dataset.subjects.size(); ++s)
    for (std::size_t i = 0; i < dataset.subjects[s].segments.size(); ++i) out.push_back({s, i});
  return out;
}

std::vector<SegmentRef> subject_segments(const EEGDataset& dataset, std::size_t subject) {
  std::vector<SegmentRef> out;
  for (std::size_t i = 0; i < dataset.subjects.at(subject).segments.size(); ++i) out.push_back({subject, i});
  return out;
}

Split loso_split(const EEGDataset& dataset, const std::string& test_subject, double val_fraction,
                 std::uint64_t seed, bool per_subject) {
  if (dataset.subjects.size() < 2) throw ConfigError("loso_split: need at least two subjects");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("loso_split: val_fraction must lie in (0, 1)");
  const std::size_t held = dataset.subject_index(test_subject);
  Split split;
  split.test = subject_segments(dataset, held);
  RngState rng = RngState::from_seed(seed).split("loso_split");
  auto take = [&](std::vector<SegmentRef> pool) {
    shuffle_refs(pool, rng);
    const std::size_t n_val = val_count(pool.size(), val_fraction);
    split.val.insert(split.val.end(), pool.begin(), pool.begin() + n_val);
    split.train.insert(split.train.end(), pool.begin() + n_val, pool.end());
  };
  if (per_subject) {
    for (std::size_t s = 0; s < dataset.subjects.size(); ++s)
      if (s != held) take(subject_segments(dataset, s));
  } else {
    std::vector<SegmentRef> pool;
    for (std::size_t s = 0; s < dataset.subjects.size(); ++s) {
      if (s == held) continue;
      auto refs = subject_segments(dataset, s);
      pool.insert(pool.end(), refs.begin(), refs.end());
    }
    take(std::move(pool));
  }
  return split;
}

Split pooled_split(const EEGDataset& dataset, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("pooled_split: val_fraction must lie in (0, 1)");
  auto pool = all_segments(dataset);
  RngState rng = RngState::from_seed(seed).split("pooled_split");
  shuffle_refs(pool, rng);
  const std::size_t n_val = val_count(pool.size(), val_fraction);
  Split split;
  split.val.assign(pool.begin(), pool.begin() + n_val);
  split.train.assign(pool.begin() + n_val, pool.end());
  return split;
}

template <typename T>
Tensor<T> make_batch(const EEGDataset& dataset, std::span<const SegmentRef> refs, std::vector<int>* labels) {
  const std::size_t per = dataset.channels * dataset.segment_len;
  Tensor<T> x(Shape{refs.size(), dataset.channels, dataset.segment_len});
  if (labels) labels->clear();
  for (std::size_t b = 0; b < refs.size(); ++b) {
    const Segment& seg = dataset.subjects.at(refs[b].subject).segments.at(refs[b].index);
    std::copy(seg.samples.begin(), seg.samples.end(), x.data().begin() + b * per);
    if (labels) labels->push_back(seg.label);
  }
  return x;
}

template Tensor<float> make_batch<float>(const EEGDataset&, std::span<const SegmentRef>, std::vector<int>*);
template Tensor<double> make_batch<double>(const EEGDataset&, std::span<const SegmentRef>, std::vector<int>*);

}  // namespace deformer
