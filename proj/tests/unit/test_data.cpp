#include <algorithm>
#include <fstream>
#include <set>

#include "doctest.h"
#include "deformer/data.hpp"
#include "deformer/errors.hpp"
#include "helpers.hpp"

using namespace deformer;

namespace {

EEGDataset tiny_dataset(std::size_t subjects, std::size_t per_subject) {
  EEGDataset ds;
  ds.channels = 2;
  ds.segment_len = 3;
  ds.sampling_rate = 100.5;
  ds.n_classes = 2;
  ds.channel_names = {"Fz", "Cz"};
  for (std::size_t s = 0; s < subjects; ++s) {
    SubjectData sd{"sub" + std::to_string(s), {}};
    for (std::size_t i = 0; i < per_subject; ++i)
      sd.segments.push_back({std::vector<float>(6, static_cast<float>(s * 100 + i) + 0.25f), static_cast<int>(i % 2)});
    ds.subjects.push_back(sd);
  }
  return ds;
}

}  // namespace

TEST_CASE("segment_trial counts") {
  auto count = [](std::size_t len, std::size_t window, double overlap) {
    return segment_trial(Tensor<float>(Shape{2, len}), window, overlap).size();
  };
  CHECK(count(20 * 200, 4 * 200, 0.5) == 9);
  CHECK(count(200, 100, 0.0) == 2);
  CHECK(count(60 * 128, 4 * 128, 0.5) == 29);
  CHECK_THROWS_AS(count(100, 101, 0.5), DomainError);
  CHECK_THROWS_AS(count(100, 10, 1.0), ConfigError);
  // Property sweep of the count formula.
  for (std::size_t len = 10; len < 60; len += 7)
    for (std::size_t window = 1; window <= len; window += 3)
      for (double overlap : {0.0, 0.25, 0.5, 0.75}) {
        const auto stride = static_cast<std::size_t>(std::llround(window * (1.0 - overlap)));
        if (stride == 0) continue;
        CHECK(count(len, window, overlap) == (len - window) / stride + 1);
      }
  // Content: second window starts at the stride.
  Tensor<float> trial(Shape{1, 6}, std::vector<float>{0, 1, 2, 3, 4, 5});
  auto segs = segment_trial(trial, 4, 0.5);
  REQUIRE(segs.size() == 2);
  CHECK(segs[1][0] == 2.0f);
  CHECK(segs[1][3] == 5.0f);
}

TEST_CASE("fatigue labelling truth table") {
  CHECK(label_fatigue(3.0, 2.6, 1.0) == FatigueLabel::kFatigue);
  CHECK(label_fatigue(1.2, 1.4, 1.0) == FatigueLabel::kAlert);
  CHECK(label_fatigue(2.0, 2.0, 1.0) == FatigueLabel::kExcluded);
  CHECK(label_fatigue(2.5, 3.0, 1.0) == FatigueLabel::kExcluded);
  CHECK(label_fatigue(1.5, 1.0, 1.0) == FatigueLabel::kExcluded);
  CHECK_THROWS_AS(label_fatigue(0.0, 1.0, 1.0), DomainError);
  CHECK_THROWS_AS(label_fatigue(1.0, 1.0, -1.0), DomainError);
}

TEST_CASE("loso split") {
  const auto ds = tiny_dataset(3, 10);
  const auto split = loso_split(ds, "sub1", 0.2, 7);
  CHECK(split.test.size() == 10);
  CHECK(split.train.size() == 16);
  CHECK(split.val.size() == 4);
  std::set<SegmentRef> train(split.train.begin(), split.train.end()), val(split.val.begin(), split.val.end());
  for (const auto& r : split.test) {
    CHECK(r.subject == 1);
    CHECK_FALSE(train.count(r));
    CHECK_FALSE(val.count(r));
  }
  for (const auto& r : split.val) CHECK_FALSE(train.count(r));
  CHECK(train.size() + val.size() == 20);
  const auto again = loso_split(ds, "sub1", 0.2, 7);
  CHECK(again.train == split.train);
  CHECK(again.val == split.val);
  CHECK(loso_split(ds, "sub1", 0.2, 8).val != split.val);
  CHECK_THROWS_AS(loso_split(ds, "nobody", 0.2, 7), LookupError);
  CHECK_THROWS_AS(loso_split(tiny_dataset(1, 4), "sub0", 0.2, 7), ConfigError);

  const auto per = loso_split(ds, "sub0", 0.2, 7, true);
  std::size_t from1 = 0;
  for (const auto& r : per.val) from1 += r.subject == 1;
  CHECK(from1 == 2);
  CHECK(per.val.size() == 4);
}

TEST_CASE("make_batch stacks segments channel-major") {
  const auto ds = tiny_dataset(2, 3);
  std::vector<int> labels;
  const std::vector<SegmentRef> refs{{1, 2}, {0, 1}};
  auto x = make_batch<double>(ds, refs, &labels);
  CHECK(x.shape() == Shape{2, 2, 3});
  CHECK(x[0] == doctest::Approx(102.25));
  CHECK(x[6] == doctest::Approx(1.25));
  CHECK(labels == std::vector<int>{0, 1});
}

TEST_CASE("dataset files round trip bitwise") {
  testing::TempDir tmp("data");
  const auto ds = generate_synthetic(testing::toy_spec(2, 3), 5);
  write_dataset(ds, tmp / "d.eegd");
  const auto back = read_dataset(tmp / "d.eegd");
  CHECK(back == ds);
  write_dataset(back, tmp / "e.eegd");
  CHECK(testing::read_text(tmp / "d.eegd") == testing::read_text(tmp / "e.eegd"));
  write_segment_csv(ds, tmp / "s.csv");
  const auto csv = testing::read_text(tmp / "s.csv");
  CHECK(csv.rfind("subject_id,index,label\nS01,0,0\nS01,1,1\n", 0) == 0);

  EEGDataset empty = ds;
  empty.subjects.clear();
  CHECK_THROWS_AS(write_dataset(empty, tmp / "x.eegd"), ConfigError);
}

TEST_CASE("corrupted dataset files are rejected with the offset") {
  testing::TempDir tmp("corrupt");
  const auto ds = tiny_dataset(2, 2);
  write_dataset(ds, tmp / "d.eegd");
  auto bytes = testing::read_text(tmp / "d.eegd");
  auto write = [&](const std::string& b) {
    std::ofstream(tmp / "c.eegd", std::ios::binary) << b;
    return tmp / "c.eegd";
  };
  auto message = [&](const std::string& b) {
    try {
      read_dataset(write(b));
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK(message(bad_magic).find("offset 0") != std::string::npos);
  auto bad_version = bytes;
  bad_version[4] = 9;
  CHECK(message(bad_version).find("version") != std::string::npos);
  CHECK(message(bytes.substr(0, bytes.size() - 30)).find("offset") != std::string::npos);
  CHECK(message(bytes.substr(0, 10)).find("truncated") != std::string::npos);
  CHECK(message(bytes + "zz").find("trailing") != std::string::npos);
  auto bad_label = bytes;
  // first label of the first subject follows the 32-byte header, u32 id length, 4 id bytes, u32 count
  bad_label[32 + 4 + 4 + 4] = 7;
  CHECK(message(bad_label).find("label 7") != std::string::npos);
}

TEST_CASE("synthetic generation") {
  const auto spec = testing::toy_spec(2, 4);
  const auto a = generate_synthetic(spec, 1), b = generate_synthetic(spec, 1), c = generate_synthetic(spec, 2);
  CHECK(a == b);
  CHECK_FALSE(a == c);
  CHECK(a.subjects.size() == 2);
  CHECK(a.subjects[0].subject_id == "S01");
  CHECK(a.segment_count() == 16);
  CHECK_NOTHROW(a.validate());
  std::size_t ones = 0;
  for (const auto& s : a.subjects[0].segments) ones += s.label == 1;
  CHECK(ones == 4);

  // Background has roughly the requested std; the signature adds power.
  double noise_ss = 0, sig_ss = 0;
  std::size_t n = 0;
  for (const auto& s : generate_synthetic(testing::toy_spec(3, 20), 3).subjects)
    for (const auto& seg : s.segments) {
      for (std::size_t t = 0; t < 64; ++t) {
        const double v = seg.samples[1 * 64 + t];
        (seg.label == 0 ? noise_ss : sig_ss) += v * v;
      }
      n += seg.label == 0;
    }
  const double noise_var = noise_ss / (n * 64.0);
  CHECK(noise_var == doctest::Approx(1.0).epsilon(0.25));
  CHECK(sig_ss / (n * 64.0) > noise_var + 0.5);
}

TEST_CASE("synthetic spec validation and JSON") {
  auto spec = default_synthetic_spec();
  CHECK(spec.signature_channels() == std::vector<std::size_t>{2, 5});
  CHECK(synthetic_spec_from_json(to_json(spec)).class_signatures.size() == 2);
  auto bad = to_json(spec);
  bad["class_signatures"][1][0]["center_hz"] = 64.0;
  try {
    synthetic_spec_from_json(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("class_signatures[1][0].center_hz") != std::string::npos);
  }
  auto typo = to_json(spec);
  typo["n_subjcts"] = 3;
  typo["channels"] = -1;
  try {
    synthetic_spec_from_json(typo);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("n_subjcts") != std::string::npos);
    CHECK(std::string(e.what()).find("channels") != std::string::npos);
  }
  spec.class_signatures[1][0].channels = {8};
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("dataset validation") {
  auto ds = tiny_dataset(2, 2);
  CHECK_NOTHROW(ds.validate());
  ds.subjects[1].segments[0].label = 5;
  CHECK_THROWS_AS(ds.validate(), DomainError);
  ds = tiny_dataset(2, 2);
  ds.subjects[0].segments[1].samples.pop_back();
  CHECK_THROWS_AS(ds.validate(), DimensionError);
  ds = tiny_dataset(2, 2);
  ds.subjects[1].subject_id = "sub0";
  CHECK_THROWS_AS(ds.validate(), ConfigError);
}
