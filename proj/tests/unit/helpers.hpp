#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "deformer/data.hpp"
#include "deformer/gradcheck.hpp"
#include "deformer/ops.hpp"
#include "deformer/tensor.hpp"

namespace testing {

using deformer::Shape;
using deformer::Tensor;

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist(0.0, scale);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = dist(gen);
  return t;
}

inline Tensor<float> random_tensor_f(Shape shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist(0.0, scale);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(dist(gen));
  return t;
}

/// Compares backprop through `f` (scalar-valued) with central differences
/// for every tensor in `inputs`. Returns the worst relative error.
inline double op_grad_error(const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& f,
                            std::vector<Tensor<double>> inputs, double h = 1e-6, double floor = 1e-7) {
  for (auto& t : inputs) {
    t.set_requires_grad(false);
    t.set_requires_grad(true);
  }
  f(inputs).backward();
  double worst = 0.0;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto numeric = deformer::finite_diff_grad<double>(
        [&](Tensor<double>&) {
          deformer::NoGradGuard g;
          return f(inputs).item();
        },
        t, h);
    worst = std::max(worst, deformer::max_relative_error<double>(analytic, numeric.data(), floor));
  }
  return worst;
}

/// Weighted sum with fixed pseudo-random weights: a generic scalar probe.
inline Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
  return deformer::ops::sum(deformer::ops::mul(y, random_tensor(y.shape(), seed)));
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("deformer_test_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

/// Small learnable dataset matching the "toy" model geometry.
inline deformer::SyntheticSpec toy_spec(std::size_t subjects = 3, std::size_t trials = 12, double amplitude = 1.5) {
  deformer::SyntheticSpec s;
  s.n_subjects = subjects;
  s.trials_per_class = trials;
  s.channels = 4;
  s.segment_len = 64;
  s.sampling_rate = 64.0;
  s.class_signatures = {{}, {deformer::ClassSignature{{1}, 8.0, 1.0, amplitude}}};
  return s;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace testing
