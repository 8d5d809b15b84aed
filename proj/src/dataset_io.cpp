// EEGD layout (little-endian):
//   "EEGD" u32 version u32 c u32 l u64 fs_millihertz u32 n_classes u32 n_subjects
//   per subject: u32 id_len, id bytes, u32 count, i32 labels[count], f32 samples[count * c * l]
//   "CHNM" u32 n_names, then per name: u32 len, bytes

#include <cmath>
#include <fstream>

#include "binio.hpp"
#include "deformer/data.hpp"
#include "deformer/errors.hpp"

namespace deformer {

namespace {

constexpr char kMagic[] = "EEGD";
constexpr char kNamesMagic[] = "CHNM";

std::uint32_t narrow32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw ConfigError(std::string("write_dataset: ") + what + " exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

void write_dataset(const EEGDataset& dataset, const std::filesystem::path& path) {
  if (dataset.subjects.empty()) throw ConfigError("write_dataset: refusing to write an empty subject list");
  dataset.validate();
  const double mhz = std::round(dataset.sampling_rate * 1000.0);
  if (std::abs(mhz - dataset.sampling_rate * 1000.0) > 1e-6 * mhz) {
    throw ConfigError("write_dataset: sampling rate " + std::to_string(dataset.sampling_rate) +
                      " Hz is not a whole number of millihertz");
  }

  binio::Writer w;
  w.put_bytes(std::string_view(kMagic, 4));
  w.put<std::uint32_t>(kDatasetFormatVersion);
  w.put<std::uint32_t>(narrow32(dataset.channels, "channels"));
  w.put<std::uint32_t>(narrow32(dataset.segment_len, "segment_len"));
  w.put<std::uint64_t>(static_cast<std::uint64_t>(mhz));
  w.put<std::uint32_t>(narrow32(dataset.n_classes, "n_classes"));
  w.put<std::uint32_t>(narrow32(dataset.subjects.size(), "n_subjects"));
  for (const auto& s : dataset.subjects) {
    w.put<std::uint32_t>(narrow32(s.subject_id.size(), "subject id length"));
    w.put_bytes(s.subject_id);
    w.put<std::uint32_t>(narrow32(s.segments.size(), "segment count"));
    for (const auto& seg : s.segments) w.put<std::int32_t>(seg.label);
    for (const auto& seg : s.segments) w.put_array(seg.samples.data(), seg.samples.size());
  }
  w.put_bytes(std::string_view(kNamesMagic, 4));
  w.put<std::uint32_t>(narrow32(dataset.channel_names.size(), "channel name count"));
  for (const auto& name : dataset.channel_names) {
    w.put<std::uint32_t>(narrow32(name.size(), "channel name length"));
    w.put_bytes(name);
  }
  binio::write_file(path, w.bytes().data(), w.bytes().size());
}

EEGDataset read_dataset(const std::filesystem::path& path) {
  binio::Reader r(binio::read_file(path), "dataset '" + path.string() + "'");
  if (r.get_bytes(4) != std::string_view(kMagic, 4)) {
    throw FormatError("dataset '" + path.string() + "': bad magic at byte offset 0 (expected \"EEGD\")");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kDatasetFormatVersion) {
    throw FormatError("dataset '" + path.string() + "': unsupported format version " + std::to_string(version) +
                      " at byte offset 4 (expected " + std::to_string(kDatasetFormatVersion) + ")");
  }
  EEGDataset ds;
  ds.channels = r.get<std::uint32_t>();
  ds.segment_len = r.get<std::uint32_t>();
  ds.sampling_rate = static_cast<double>(r.get<std::uint64_t>()) / 1000.0;
  ds.n_classes = r.get<std::uint32_t>();
  const auto n_subjects = r.get<std::uint32_t>();
  if (ds.channels == 0 || ds.segment_len == 0) r.fail("zero channels or segment length in header");
  if (n_subjects == 0) r.fail("empty subject list");
  const std::size_t per = ds.channels * ds.segment_len;
  for (std::uint32_t s = 0; s < n_subjects; ++s) {
    SubjectData subject;
    subject.subject_id = r.get_bytes(r.get<std::uint32_t>());
    const auto count = r.get<std::uint32_t>();
    if (count == 0) r.fail("subject '" + subject.subject_id + "' has no segments");
    subject.segments.resize(count);
    for (auto& seg : subject.segments) {
      seg.label = r.get<std::int32_t>();
      if (seg.label < 0 || static_cast<std::size_t>(seg.label) >= ds.n_classes) {
        r.fail("label " + std::to_string(seg.label) + " outside [0, " + std::to_string(ds.n_classes) + ")");
      }
    }
    if (per != 0 && count > r.remaining() / (per * sizeof(float))) {
      r.fail("truncated sample block for subject '" + subject.subject_id + "'");
    }
    for (auto& seg : subject.segments) {
      seg.samples.resize(per);
      r.get_array(seg.samples.data(), per);
    }
    ds.subjects.push_back(std::move(subject));
  }
  if (r.get_bytes(4) != std::string_view(kNamesMagic, 4)) r.fail("missing channel-name block");
  const auto n_names = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_names; ++i) ds.channel_names.push_back(r.get_bytes(r.get<std::uint32_t>()));
  if (!r.at_end()) r.fail("trailing bytes after channel-name block");
  try {
    ds.validate();
  } catch (const Error& e) {
    throw FormatError("dataset '" + path.string() + "': " + e.what());
  }
  return ds;
}

void write_segment_csv(const EEGDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "subject_id,index,label\n";
  for (const auto& s : dataset.subjects)
    for (std::size_t i = 0; i < s.segments.size(); ++i) out << s.subject_id << ',' << i << ',' << s.segments[i].label << '\n';
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

}  // namespace deformer
