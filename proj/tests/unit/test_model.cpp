#include <cmath>
#include <cstring>

#include "doctest.h"
#include "deformer/errors.hpp"
#include "deformer/kernels.hpp"
#include "deformer/model.hpp"
#include "deformer/model_check.hpp"
#include "helpers.hpp"

using namespace deformer;
using testing::random_tensor;
using testing::random_tensor_f;

TEST_CASE("kernel length rule") {
  CHECK(odd_kernel_length(200) == 21);
  CHECK(odd_kernel_length(128) == 13);
  CHECK(odd_kernel_length(500) == 51);
  CHECK(odd_kernel_length(64) == 7);
  CHECK(odd_kernel_length(100) == 11);
  CHECK(odd_kernel_length(5) == 1);
  CHECK_THROWS_AS(odd_kernel_length(0), ConfigError);
}

TEST_CASE("config validation lists problems") {
  ModelConfig c = model_preset("toy");
  c.kernels = 0;
  c.dropout_p = 1.5;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("kernels") != std::string::npos);
    CHECK(msg.find("dropout_p") != std::string::npos);
  }
  ModelConfig shallow = model_preset("toy");
  shallow.segment_len = 6;  // 6 -> 3 -> 1 -> too short for the second block
  CHECK_THROWS_AS(shallow.validate(), ConfigError);
}

TEST_CASE("config JSON round trip and strict parsing") {
  ModelConfig c = model_preset("dataset3");
  c.ip_removed = {1, 2};
  c.ip_mode = IpMode::kStd;
  CHECK(model_config_from_json(to_json(c)) == c);
  TrainConfig t = train_preset("desk");
  t.seed = 123456789012345ULL;
  CHECK(train_config_from_json(to_json(t)) == t);
  t.seed = 0xF3A1'0000'0000'0001ULL;  // above the signed 64-bit range
  CHECK(train_config_from_json(nlohmann::json::parse(to_json(t).dump())) == t);
  auto neg = to_json(t);
  neg["seed"] = -1;
  CHECK_THROWS_AS(train_config_from_json(neg), ConfigError);
  auto j = to_json(c);
  j["kernelz"] = 3;
  j["heads"] = "four";
  try {
    model_config_from_json(j);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("kernelz") != std::string::npos);
    CHECK(msg.find("heads") != std::string::npos);
  }
  nlohmann::json doc = {{"model", to_json(c)}, {"train", to_json(t)}};
  apply_override(doc, "model.ftl_enabled=false");
  apply_override(doc, "train.epochs=7");
  CHECK(doc["model"]["ftl_enabled"] == false);
  CHECK(doc["train"]["epochs"] == 7);
  CHECK_THROWS_AS(apply_override(doc, "epochs=7"), ConfigError);
}

TEST_CASE("shape audit of the three reference geometries") {
  struct G {
    const char* preset;
    std::size_t K;
    std::vector<std::size_t> chain;
    std::size_t embedding;
  };
  for (const G& g : {G{"dataset1", 21, {800, 400, 200, 100, 50, 25}, 1856},
                     G{"dataset2", 13, {384, 192, 96, 48, 24, 12}, 1024},
                     G{"dataset3", 51, {2000, 1000, 500, 250, 125, 62}, 4224}}) {
    const auto c = model_preset(g.preset);
    const auto a = shape_audit(c);
    CHECK(a.kernel_length == g.K);
    CHECK(a.length_chain == g.chain);
    // Four IP vectors of k plus the flattened final map.
    CHECK(a.embedding_len == 64 * 4 + 64 * g.chain.back());
    CHECK(a.embedding_len == g.embedding);
    CHECK(a.at("tokens") == Shape{64, c.segment_len / 2});
    CHECK(a.at("block1.q") == Shape{c.heads, 64, c.head_dim});
  }
}

TEST_CASE("live forward trace agrees with the audit") {
  for (const char* preset : {"toy", "desk"}) {
    const auto cfg = model_preset(preset);
    Deformer<float> model(cfg, 3);
    ForwardTrace<float> trace;
    auto rng = RngState::from_seed(0);
    auto x = random_tensor_f({2, cfg.channels, cfg.segment_len}, 1);
    auto logits = model.forward(x, Mode::kTrain, rng, &trace);
    CHECK(logits.shape() == Shape{2, cfg.n_classes});
    CHECK_NOTHROW(model.check_trace(trace));
  }
}

TEST_CASE("parameter count formula equals the live registry") {
  std::vector<ModelConfig> variants;
  const auto base = model_preset("toy");
  variants.push_back(base);
  for (auto f : {&ModelConfig::ftl_enabled, &ModelConfig::dense_enabled}) {
    auto v = base;
    v.*f = false;
    variants.push_back(v);
  }
  for (auto m : {IpMode::kMean, IpMode::kStd, IpMode::kNone}) {
    auto v = base;
    v.ip_mode = m;
    variants.push_back(v);
  }
  for (auto s : {IpSource::kCoarse, IpSource::kFused}) {
    auto v = base;
    v.ip_source = s;
    variants.push_back(v);
  }
  auto removed = base;
  removed.ip_removed = {0};
  variants.push_back(removed);
  variants.push_back(model_preset("desk"));
  variants.push_back(model_preset("dataset2"));
  for (const auto& v : variants) {
    Deformer<float> m(v, 0);
    CHECK(m.parameter_count() == param_count(v));
    std::size_t live = 0;
    for (const auto& p : m.parameters()) live += p.tensor.numel();
    CHECK(live == param_count(v));
  }
  auto no_ftl = base;
  no_ftl.ftl_enabled = false;
  CHECK(param_count(no_ftl) < param_count(base));
  auto mean = base, stdv = base;
  mean.ip_mode = IpMode::kMean;
  stdv.ip_mode = IpMode::kStd;
  CHECK(param_count(mean) == param_count(base));
  CHECK(param_count(stdv) == param_count(base));
  auto no_dense = base;
  no_dense.dense_enabled = false;
  CHECK(param_count(no_dense) < param_count(base));
}

TEST_CASE("MAC estimate follows its documented formula") {
  const auto c = model_preset("toy");
  const auto a = shape_audit(c);
  const std::size_t k = 8, K = 7, l = 64, ch = 4, h = 4, d = 4, hd = 16;
  std::size_t want = k * ch * l * K + k * k * ch * l;
  for (std::size_t i = 0; i < 2; ++i) {
    const std::size_t len = a.length_chain[i + 1], p = len / 2;
    want += k * p * 3 * hd + 2 * h * k * k * d + k * hd * p + 2 * k * p * (2 * p) + k * k * K * len;
  }
  want += a.embedding_len * 2;
  CHECK(macs_estimate(c) == want);
  auto no_ftl = c;
  no_ftl.ftl_enabled = false;
  CHECK(macs_estimate(no_ftl) < macs_estimate(c));
}

TEST_CASE("ip_unit against brute force") {
  auto x = random_tensor({5, 7}, 2);
  auto power = ip_unit(x, IpMode::kPower, 1e-8);
  auto mean = ip_unit(x, IpMode::kMean, 1e-8);
  auto stdv = ip_unit(x, IpMode::kStd, 1e-8);
  for (std::size_t r = 0; r < 5; ++r) {
    double ss = 0, s = 0;
    for (std::size_t t = 0; t < 7; ++t) {
      ss += x[r * 7 + t] * x[r * 7 + t];
      s += x[r * 7 + t];
    }
    const double mu = s / 7;
    double var = 0;
    for (std::size_t t = 0; t < 7; ++t) var += (x[r * 7 + t] - mu) * (x[r * 7 + t] - mu);
    CHECK(power[r] == doctest::Approx(std::log(ss / 7 + 1e-8)).epsilon(1e-12));
    CHECK(mean[r] == doctest::Approx(mu).epsilon(1e-12));
    CHECK(stdv[r] == doctest::Approx(std::sqrt(var / 7 + 1e-8)).epsilon(1e-12));
  }
  // Worked rows.
  Tensor<double> row(Shape{1, 2}, std::vector<double>{3.0, 4.0});
  CHECK(ip_unit(row, IpMode::kPower, 0.0)[0] == doctest::Approx(std::log(12.5)));
  CHECK(ip_unit(Tensor<double>(Shape{1, 4}, 0.0), IpMode::kPower, 1e-8)[0] == doctest::Approx(std::log(1e-8)));
  CHECK(ip_unit(Tensor<float>(Shape{1, 9}, 1.0f), IpMode::kPower, 1e-8)[0] == 0.0f);
  CHECK(ip_unit(Tensor<double>(Shape{1, 9}, 1.0), IpMode::kPower, 0.0)[0] == 0.0);
  CHECK_THROWS_AS(ip_unit(row, IpMode::kNone, 1e-8), ConfigError);
}

TEST_CASE("attention rows are convex combinations of values") {
  auto q = random_tensor({2, 3, 4}, 3), k = random_tensor({2, 3, 4}, 4);
  Tensor<double> v(Shape{2, 3, 4}, 1.0);
  auto out = attention(q, k, v);
  for (double o : out.data()) CHECK(o == doctest::Approx(1.0));
  // Identical keys -> uniform weights -> mean of the value rows.
  Tensor<double> same_k(Shape{1, 3, 2}, 0.5);
  Tensor<double> vals(Shape{1, 3, 2}, std::vector<double>{0, 3, 6, 0, 3, 9});
  auto avg = attention(random_tensor({1, 3, 2}, 5), same_k, vals);
  CHECK(avg[0] == doctest::Approx(3.0));
  CHECK(avg[1] == doctest::Approx(4.0));
}

TEST_CASE("stages compose into the forward pass") {
  const auto cfg = model_preset("toy");
  Deformer<double> model(cfg, 11);
  auto x = random_tensor({3, cfg.channels, cfg.segment_len}, 6);
  auto rng = RngState::from_seed(0);
  auto f = model.shallow_encode(x, Mode::kEval);
  CHECK(f.shape() == Shape{3, 8, 32});
  auto qkv = model.project_qkv(0, f);
  CHECK(qkv.size() == 3);
  CHECK(qkv[0].shape() == Shape{3, 4, 8, 4});
  CHECK(model.msa(0, f).shape() == Shape{3, 8, 16});
  auto out = model.hct_forward(0, f, Mode::kEval, rng);
  CHECK(out.next.shape() == Shape{3, 8, 16});
  // sum fusion
  for (std::size_t i = 0; i < out.next.numel(); ++i) CHECK(out.next[i] == doctest::Approx(out.coarse[i] + out.fine[i]));
}

TEST_CASE("ablation switches change the embedding as documented") {
  auto base = model_preset("toy");  // k=8, depth 2, chain 64 32 16 8
  CHECK(shape_audit(base).embedding_len == 8 * 2 + 8 * 8);
  auto no_dense = base;
  no_dense.dense_enabled = false;
  CHECK(shape_audit(no_dense).embedding_len == 8 + 8 * 8);
  auto none = base;
  none.ip_mode = IpMode::kNone;
  CHECK(shape_audit(none).embedding_len == 8 * 16 + 8 * 8 + 8 * 8);
  none.dense_enabled = false;
  CHECK(shape_audit(none).embedding_len == 8 * 8);
  auto removed = base;
  removed.ip_removed = {1};
  CHECK(shape_audit(removed).embedding_len == 8 + 8 * 8);
  auto no_ftl = base;
  no_ftl.ftl_enabled = false;
  CHECK(no_ftl.effective_ip_source() == IpSource::kFused);
  Deformer<float> m(no_ftl, 0);
  auto rng = RngState::from_seed(0);
  CHECK_THROWS_AS(m.fine_branch(0, Tensor<float>(Shape{1, 8, 32}), Mode::kEval, rng), ConfigError);
}

TEST_CASE("initialisation is a pure function of the seed") {
  const auto cfg = model_preset("toy");
  Deformer<float> a(cfg, 5), b(cfg, 5), c(cfg, 6);
  bool all_same = true, any_diff = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto& pa = a.parameters()[i].tensor;
    const auto& pb = b.parameters()[i].tensor;
    const auto& pc = c.parameters()[i].tensor;
    all_same &= std::memcmp(pa.data().data(), pb.data().data(), pa.numel() * sizeof(float)) == 0;
    any_diff |= std::memcmp(pa.data().data(), pc.data().data(), pa.numel() * sizeof(float)) != 0;
  }
  CHECK(all_same);
  CHECK(any_diff);
}

TEST_CASE("serial and parallel backends give bitwise-equal training steps") {
  const auto cfg = model_preset("desk");
  auto x = random_tensor_f({8, cfg.channels, cfg.segment_len}, 7);
  const std::vector<int> labels{0, 1, 0, 1, 1, 0, 0, 1};
  std::vector<std::vector<float>> grads[2];
  std::vector<float> logits[2];
  for (int run = 0; run < 2; ++run) {
    kernels::ScopedBackend scope(run == 0 ? kernels::Backend::kSerial : kernels::Backend::kParallel);
    Deformer<float> model(cfg, 9);
    auto rng = RngState::from_seed(3);
    auto z = model.forward(x, Mode::kTrain, rng);
    logits[run].assign(z.data().begin(), z.data().end());
    ops::cross_entropy(z, labels).backward();
    for (const auto& p : model.parameters()) grads[run].emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
  }
  CHECK(logits[0] == logits[1]);
  CHECK(grads[0] == grads[1]);
}

TEST_CASE("model gradcheck on the toy geometry and its ablations") {
  std::vector<ModelConfig> variants{model_preset("toy")};
  auto v = variants[0];
  v.ftl_enabled = false;
  variants.push_back(v);
  v = variants[0];
  v.ip_mode = IpMode::kStd;
  variants.push_back(v);
  v = variants[0];
  v.ip_mode = IpMode::kNone;
  variants.push_back(v);
  for (const auto& cfg : variants) {
    for (const auto& g : gradcheck_model(cfg)) {
      INFO(g.name);
      CHECK(g.max_rel_error < 1e-4);
    }
  }
}
