#include "deformer/checkpoint.hpp"

#include <cstdio>
#include <map>
#include <set>

#include "binio.hpp"
#include "deformer/errors.hpp"

namespace deformer {

using nlohmann::json;

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr const char* kBlob = "tensors.bin";

template <typename T>
StoredTensor store(const std::string& name, const Shape& shape, std::span<const T> values) {
  return StoredTensor{name, shape, std::vector<double>(values.begin(), values.end())};
}

template <typename T>
void copy_into(std::span<T> dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Matches a stored list against expected (name, shape) pairs in order.
void check_tensors(const std::vector<StoredTensor>& stored, const std::vector<std::pair<std::string, Shape>>& expected,
                   const char* what) {
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& s : stored) {
    if (!by_name.emplace(s.name, &s).second) {
      throw CheckpointError(std::string(what) + ": tensor '" + s.name + "' appears more than once");
    }
  }
  std::set<std::string> wanted;
  for (const auto& [name, shape] : expected) {
    wanted.insert(name);
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError(std::string(what) + ": missing tensor '" + name + "'");
    if (it->second->shape != shape) {
      throw CheckpointError(std::string(what) + ": tensor '" + name + "' has shape " +
                            shape_str(it->second->shape) + ", model expects " + shape_str(shape));
    }
    if (it->second->values.size() != shape_numel(shape)) {
      throw CheckpointError(std::string(what) + ": tensor '" + name + "' holds " +
                            std::to_string(it->second->values.size()) + " values for shape " + shape_str(shape));
    }
  }
  for (const auto& s : stored) {
    if (!wanted.count(s.name)) throw CheckpointError(std::string(what) + ": unexpected tensor '" + s.name + "'");
  }
}

template <typename T>
std::vector<std::pair<std::string, Shape>> expected_params(const Deformer<T>& model) {
  std::vector<std::pair<std::string, Shape>> out;
  for (const auto& p : model.parameters()) out.emplace_back(p.name, p.tensor.shape());
  return out;
}

const StoredTensor& find(const std::vector<StoredTensor>& list, const std::string& name) {
  for (const auto& s : list)
    if (s.name == name) return s;
  throw CheckpointError("missing tensor '" + name + "'");
}

}  // namespace

template <typename T>
Checkpoint capture_checkpoint(Deformer<T>& model, const TrainConfig& train, const Adam<T>* optimizer) {
  Checkpoint c;
  c.model = model.config();
  c.train = train;
  for (const auto& p : model.parameters()) c.params.push_back(store<T>(p.name, p.tensor.shape(), p.tensor.data()));
  for (const auto& bn : model.batchnorms()) {
    const auto& mean = bn.state->running_mean;
    const auto& var = bn.state->running_var;
    c.batchnorms.push_back({bn.name, {mean.begin(), mean.end()}, {var.begin(), var.end()}});
  }
  if (optimizer) {
    c.adam_steps = optimizer->steps;
    const auto& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      c.adam_m.push_back(store<T>(params[i].name, params[i].tensor.shape(), std::span<const T>(optimizer->m[i])));
      c.adam_v.push_back(store<T>(params[i].name, params[i].tensor.shape(), std::span<const T>(optimizer->v[i])));
    }
  }
  return c;
}

template <typename T>
void restore_checkpoint(Deformer<T>& model, const Checkpoint& ckpt) {
  check_tensors(ckpt.params, expected_params(model), "checkpoint");
  auto bns = model.batchnorms();
  if (ckpt.batchnorms.size() != bns.size()) {
    throw CheckpointError("checkpoint: " + std::to_string(ckpt.batchnorms.size()) +
                          " normalisation layers stored, model has " + std::to_string(bns.size()));
  }
  for (std::size_t i = 0; i < bns.size(); ++i) {
    const auto& s = ckpt.batchnorms[i];
    if (s.name != bns[i].name) {
      throw CheckpointError("checkpoint: normalisation layer '" + s.name + "' where model expects '" + bns[i].name + "'");
    }
    if (s.running_mean.size() != bns[i].state->running_mean.size() ||
        s.running_var.size() != bns[i].state->running_var.size()) {
      throw CheckpointError("checkpoint: normalisation layer '" + s.name + "' has " +
                            std::to_string(s.running_mean.size()) + " features, model expects " +
                            std::to_string(bns[i].state->running_mean.size()));
    }
  }
  for (auto& p : model.parameters()) {
    auto t = p.tensor;
    copy_into<T>(t.data(), find(ckpt.params, p.name).values);
  }
  for (std::size_t i = 0; i < bns.size(); ++i) {
    copy_into<T>(std::span<T>(bns[i].state->running_mean), ckpt.batchnorms[i].running_mean);
    copy_into<T>(std::span<T>(bns[i].state->running_var), ckpt.batchnorms[i].running_var);
  }
}

template <typename T>
void restore_optimizer(Adam<T>& optimizer, const Deformer<T>& model, const Checkpoint& ckpt) {
  const auto expected = expected_params(model);
  check_tensors(ckpt.adam_m, expected, "checkpoint optimizer (first moments)");
  check_tensors(ckpt.adam_v, expected, "checkpoint optimizer (second moments)");
  optimizer.steps = ckpt.adam_steps;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    copy_into<T>(std::span<T>(optimizer.m[i]), find(ckpt.adam_m, expected[i].first).values);
    copy_into<T>(std::span<T>(optimizer.v[i]), find(ckpt.adam_v, expected[i].first).values);
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  binio::Writer blob;
  json entries = json::array();
  auto add = [&](const std::string& group, const std::string& name, const Shape& shape,
                 const std::vector<double>& values) {
    entries.push_back({{"group", group},
                       {"name", name},
                       {"shape", shape},
                       {"offset", blob.bytes().size()},
                       {"count", values.size()}});
    blob.put_array(values.data(), values.size());
  };
  for (const auto& p : ckpt.params) add("param", p.name, p.shape, p.values);
  for (const auto& bn : ckpt.batchnorms) {
    add("bn_mean", bn.name, {bn.running_mean.size()}, bn.running_mean);
    add("bn_var", bn.name, {bn.running_var.size()}, bn.running_var);
  }
  for (const auto& m : ckpt.adam_m) add("adam_m", m.name, m.shape, m.values);
  for (const auto& v : ckpt.adam_v) add("adam_v", v.name, v.shape, v.values);

  const auto& bytes = blob.bytes();
  json manifest = {{"format_version", kCheckpointFormatVersion},
                   {"dtype", "f64"},
                   {"blob", kBlob},
                   {"blob_bytes", bytes.size()},
                   {"blob_fnv1a", hex64(binio::fnv1a(bytes.data(), bytes.size()))},
                   {"model", to_json(ckpt.model)},
                   {"train", to_json(ckpt.train)},
                   {"epoch", ckpt.epoch},
                   {"best_val_acc", ckpt.best_val_acc},
                   {"rng", {{"seed", ckpt.rng.seed}, {"counter", ckpt.rng.counter}}},
                   {"adam_steps", ckpt.adam_steps},
                   {"tensors", entries}};
  binio::write_file(dir / kBlob, bytes.data(), bytes.size());
  binio::write_file(dir / kManifest, manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_path = dir / kManifest;
  json m;
  try {
    const auto raw = binio::read_file(manifest_path);
    m = json::parse(raw.begin(), raw.end());
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint manifest '" + manifest_path.string() + "' is not valid JSON: " + e.what());
  } catch (const Error& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  const auto blob_path = dir / kBlob;
  std::vector<char> bytes;
  try {
    bytes = binio::read_file(blob_path);
  } catch (const Error& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }

  Checkpoint c;
  try {
    const int version = m.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version));
    }
    if (m.at("dtype").get<std::string>() != "f64") throw CheckpointError("checkpoint: unsupported dtype");
    if (m.at("blob_bytes").get<std::size_t>() != bytes.size()) {
      throw CheckpointError("checkpoint integrity: blob holds " + std::to_string(bytes.size()) +
                            " bytes, manifest declares " + std::to_string(m.at("blob_bytes").get<std::size_t>()));
    }
    const std::string sum = hex64(binio::fnv1a(bytes.data(), bytes.size()));
    if (m.at("blob_fnv1a").get<std::string>() != sum) {
      throw CheckpointError("checkpoint integrity: blob checksum " + sum + " does not match manifest " +
                            m.at("blob_fnv1a").get<std::string>());
    }
    c.model = model_config_from_json(m.at("model"));
    c.train = train_config_from_json(m.at("train"));
    c.epoch = m.at("epoch").get<std::size_t>();
    c.best_val_acc = m.at("best_val_acc").get<double>();
    c.rng = RngState{m.at("rng").at("seed").get<std::uint64_t>(), m.at("rng").at("counter").get<std::uint64_t>()};
    c.adam_steps = m.at("adam_steps").get<std::size_t>();

    std::size_t expected_offset = 0;
    for (const auto& e : m.at("tensors")) {
      const auto group = e.at("group").get<std::string>();
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto count = e.at("count").get<std::size_t>();
      if (offset != expected_offset || count != shape_numel(shape) ||
          count > (bytes.size() - offset) / sizeof(double)) {
        throw CheckpointError("checkpoint integrity: tensor '" + name + "' (" + group + ") at offset " +
                              std::to_string(offset) + " with " + std::to_string(count) +
                              " values does not fit the blob layout");
      }
      std::vector<double> values(count);
      std::memcpy(values.data(), bytes.data() + offset, count * sizeof(double));
      expected_offset = offset + count * sizeof(double);
      if (group == "param") {
        c.params.push_back({name, shape, std::move(values)});
      } else if (group == "bn_mean") {
        c.batchnorms.push_back({name, std::move(values), {}});
      } else if (group == "bn_var") {
        if (c.batchnorms.empty() || c.batchnorms.back().name != name) {
          throw CheckpointError("checkpoint integrity: running variance of '" + name + "' without its mean");
        }
        c.batchnorms.back().running_var = std::move(values);
      } else if (group == "adam_m") {
        c.adam_m.push_back({name, shape, std::move(values)});
      } else if (group == "adam_v") {
        c.adam_v.push_back({name, shape, std::move(values)});
      } else {
        throw CheckpointError("checkpoint integrity: unknown tensor group '" + group + "'");
      }
    }
    if (expected_offset != bytes.size()) {
      throw CheckpointError("checkpoint integrity: " + std::to_string(bytes.size() - expected_offset) +
                            " unreferenced bytes at the end of the blob");
    }
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint manifest '" + manifest_path.string() + "': " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError("checkpoint manifest '" + manifest_path.string() + "': " + e.what());
  }
  return c;
}

template Checkpoint capture_checkpoint<float>(Deformer<float>&, const TrainConfig&, const Adam<float>*);
template Checkpoint capture_checkpoint<double>(Deformer<double>&, const TrainConfig&, const Adam<double>*);
template void restore_checkpoint<float>(Deformer<float>&, const Checkpoint&);
template void restore_checkpoint<double>(Deformer<double>&, const Checkpoint&);
template void restore_optimizer<float>(Adam<float>&, const Deformer<float>&, const Checkpoint&);
template void restore_optimizer<double>(Adam<double>&, const Deformer<double>&, const Checkpoint&);

}  // namespace deformer
