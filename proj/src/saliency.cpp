#include "deformer/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "deformer/errors.hpp"
#include "deformer/ops.hpp"

namespace deformer {

void normalize_minmax(std::span<double> v) {
  if (v.empty()) return;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double mn = *lo, range = *hi - *lo;
  if (!(range > 0.0)) {
    std::fill(v.begin(), v.end(), 0.0);
    return;
  }
  for (auto& x : v) x = std::clamp((x - mn) / range, 0.0, 1.0);
}

void compute_channel_scores(SaliencyMap& map) {
  map.channel_scores.assign(map.channels, 0.0);
  for (std::size_t ch = 0; ch < map.channels; ++ch) {
    double s = 0.0;
    for (std::size_t t = 0; t < map.length; ++t) s += map.at(ch, t);
    map.channel_scores[ch] = s / static_cast<double>(map.length);
  }
  normalize_minmax(map.channel_scores);
}

namespace {

// Stops parameters from recording gradients without touching their buffers.
template <typename T>
class FrozenParams {
 public:
  explicit FrozenParams(const Deformer<T>& model) {
    for (const auto& p : model.parameters()) {
      if (p.tensor.requires_grad()) {
        frozen_.push_back(p.tensor);
        p.tensor.impl()->requires_grad = false;
      }
    }
  }
  ~FrozenParams() {
    for (auto& t : frozen_) t.impl()->requires_grad = true;
  }
  FrozenParams(const FrozenParams&) = delete;
  FrozenParams& operator=(const FrozenParams&) = delete;

 private:
  std::vector<Tensor<T>> frozen_;
};

}  // namespace

template <typename T>
std::vector<SaliencyMap> saliency_batch(Deformer<T>& model, const Tensor<T>& x, int class_idx) {
  const auto& cfg = model.config();
  if (class_idx < 0 || static_cast<std::size_t>(class_idx) >= cfg.n_classes) {
    throw DomainError("saliency: class index " + std::to_string(class_idx) + " outside [0, " +
                      std::to_string(cfg.n_classes) + ")");
  }
  if (x.dim() != 3 || x.size(1) != cfg.channels || x.size(2) != cfg.segment_len) {
    throw DimensionError("saliency: expected [B, " + std::to_string(cfg.channels) + ", " +
                         std::to_string(cfg.segment_len) + "], got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.size(0), c = cfg.channels, l = cfg.segment_len;
  FrozenParams<T> frozen(model);
  Tensor<T> input = x.detach();
  input.set_requires_grad(true);
  RngState unused = RngState::from_seed(0);
  const auto logits = model.forward(input, Mode::kEval, unused);
  // Samples do not interact in eval mode, so one backward of the summed logit
  // yields every per-sample gradient.
  ops::sum(ops::slice(logits, 1, static_cast<std::size_t>(class_idx), 1)).backward();

  std::vector<SaliencyMap> maps(batch);
  const auto g = input.grad();
  for (std::size_t b = 0; b < batch; ++b) {
    auto& m = maps[b];
    m.channels = c;
    m.length = l;
    m.class_index = class_idx;
    m.values.resize(c * l);
    for (std::size_t i = 0; i < c * l; ++i) m.values[i] = std::abs(static_cast<double>(g[b * c * l + i]));
    normalize_minmax(m.values);
    compute_channel_scores(m);
  }
  return maps;
}

template <typename T>
SaliencyMap saliency(Deformer<T>& model, const Tensor<T>& x, int class_idx) {
  if (x.dim() != 2) throw DimensionError("saliency: expected one segment [c, l], got " + shape_str(x.shape()));
  return saliency_batch(model, ops::reshape(x.detach(), Shape{1, x.size(0), x.size(1)}), class_idx).front();
}

SaliencyMap average_saliency(const std::vector<SaliencyMap>& maps) {
  if (maps.empty()) throw DomainError("average_saliency: no maps");
  SaliencyMap out = maps.front();
  std::fill(out.values.begin(), out.values.end(), 0.0);
  for (const auto& m : maps) {
    if (m.channels != out.channels || m.length != out.length || m.values.size() != out.values.size()) {
      throw DimensionError("average_saliency: maps differ in geometry");
    }
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += m.values[i];
  }
  for (auto& v : out.values) v /= static_cast<double>(maps.size());
  normalize_minmax(out.values);
  compute_channel_scores(out);
  return out;
}

namespace {

void check_unit_range(const SaliencyMap& map) {
  auto bad = [](double v) { return !(v >= 0.0 && v <= 1.0); };
  if (std::any_of(map.values.begin(), map.values.end(), bad) ||
      std::any_of(map.channel_scores.begin(), map.channel_scores.end(), bad)) {
    throw DomainError("saliency export: values outside [0, 1]");
  }
  if (map.values.size() != map.channels * map.length || map.channel_scores.size() != map.channels) {
    throw DimensionError("saliency export: map geometry is inconsistent");
  }
}

std::string channel_label(const SaliencyMap& map, std::size_t ch) {
  return ch < map.channel_names.size() ? map.channel_names[ch] : "ch" + std::to_string(ch);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void export_saliency_csv(const SaliencyMap& map, const std::filesystem::path& path) {
  check_unit_range(map);
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "channel,score\n";
  for (std::size_t ch = 0; ch < map.channels; ++ch) out << channel_label(map, ch) << ',' << fmt(map.channel_scores[ch]) << '\n';
  out << '\n' << "channel";
  for (std::size_t t = 0; t < map.length; ++t) out << ",t" << t;
  out << '\n';
  for (std::size_t ch = 0; ch < map.channels; ++ch) {
    out << channel_label(map, ch);
    for (std::size_t t = 0; t < map.length; ++t) out << ',' << fmt(map.at(ch, t));
    out << '\n';
  }
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

SaliencyMap read_saliency_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  auto fail = [&](const std::string& msg) -> void { throw FormatError("saliency CSV '" + path.string() + "': " + msg); };
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
  };
  auto number = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) fail("bad number '" + s + "'");
      return v;
    } catch (const std::logic_error&) {
      fail("bad number '" + s + "'");
    }
    return 0.0;
  };
  SaliencyMap map;
  std::string line;
  if (!std::getline(in, line) || line != "channel,score") fail("missing 'channel,score' header");
  while (std::getline(in, line) && !line.empty()) {
    const auto cells = split(line);
    if (cells.size() != 2) fail("score row '" + line + "' needs two cells");
    map.channel_names.push_back(cells[0]);
    map.channel_scores.push_back(number(cells[1]));
  }
  map.channels = map.channel_names.size();
  if (!std::getline(in, line)) fail("missing matrix block");
  map.length = split(line).size() - 1;
  for (std::size_t ch = 0; ch < map.channels; ++ch) {
    if (!std::getline(in, line)) fail("matrix block has fewer rows than channels");
    const auto cells = split(line);
    if (cells.size() != map.length + 1 || cells[0] != map.channel_names[ch]) fail("malformed matrix row " + std::to_string(ch));
    for (std::size_t t = 0; t < map.length; ++t) map.values.push_back(number(cells[t + 1]));
  }
  return map;
}

void export_saliency_pgm(const SaliencyMap& map, const std::filesystem::path& path) {
  check_unit_range(map);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "P5\n" << map.length << ' ' << map.channels << "\n255\n";
  for (double v : map.values) out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

template SaliencyMap saliency<float>(Deformer<float>&, const Tensor<float>&, int);
template SaliencyMap saliency<double>(Deformer<double>&, const Tensor<double>&, int);
template std::vector<SaliencyMap> saliency_batch<float>(Deformer<float>&, const Tensor<float>&, int);
template std::vector<SaliencyMap> saliency_batch<double>(Deformer<double>&, const Tensor<double>&, int);

}  // namespace deformer
