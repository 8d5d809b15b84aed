#include "deformer/config.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "deformer/errors.hpp"

namespace deformer {

using nlohmann::json;

std::string to_string(IpMode m) {
  switch (m) {
    case IpMode::kPower: return "power";
    case IpMode::kMean: return "mean";
    case IpMode::kStd: return "std";
    case IpMode::kNone: return "none";
  }
  return "?";
}

std::string to_string(IpSource s) {
  switch (s) {
    case IpSource::kFine: return "fine";
    case IpSource::kCoarse: return "coarse";
    case IpSource::kFused: return "fused";
  }
  return "?";
}

IpMode parse_ip_mode(const std::string& s) {
  if (s == "power") return IpMode::kPower;
  if (s == "mean") return IpMode::kMean;
  if (s == "std") return IpMode::kStd;
  if (s == "none") return IpMode::kNone;
  throw ConfigError("ip_mode: expected power|mean|std|none, got '" + s + "'");
}

IpSource parse_ip_source(const std::string& s) {
  if (s == "fine") return IpSource::kFine;
  if (s == "coarse") return IpSource::kCoarse;
  if (s == "fused") return IpSource::kFused;
  throw ConfigError("ip_source: expected fine|coarse|fused, got '" + s + "'");
}

std::size_t odd_kernel_length(double sampling_rate) {
  if (!(sampling_rate > 0.0)) {
    throw ConfigError("sampling_rate: must be positive, got " + std::to_string(sampling_rate));
  }
  // The small offset keeps e.g. 0.1 * 130 = 12.999... from flooring to 12.
  auto len = static_cast<std::size_t>(std::floor(0.1 * sampling_rate + 1e-9));
  if (len % 2 == 0) ++len;
  return len;
}

IpSource ModelConfig::effective_ip_source() const {
  if (!ftl_enabled && ip_source == IpSource::kFine) return IpSource::kFused;
  return ip_source;
}

void ModelConfig::validate() const {
  std::vector<std::string> errors;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) errors.push_back(msg);
  };
  need(channels >= 1, "model.channels: must be >= 1");
  need(sampling_rate > 0.0, "model.sampling_rate: must be positive");
  need(kernels >= 1, "model.kernels: must be >= 1");
  need(heads >= 1, "model.heads: must be >= 1");
  need(head_dim >= 1, "model.head_dim: must be >= 1");
  need(depth >= 1, "model.depth: must be >= 1");
  need(ffn_expansion > 0.0, "model.ffn_expansion: must be positive");
  need(dropout_p >= 0.0 && dropout_p < 1.0, "model.dropout_p: must lie in [0, 1)");
  need(n_classes >= 2, "model.n_classes: must be >= 2");
  need(ip_eps > 0.0, "model.ip_eps: must be positive");
  std::set<std::size_t> seen;
  for (auto b : ip_removed) {
    need(b < depth, "model.ip_removed: block " + std::to_string(b) + " >= depth " + std::to_string(depth));
    need(seen.insert(b).second, "model.ip_removed: block " + std::to_string(b) + " listed twice");
  }
  // Every max-pool halves with floor; each pooled axis needs at least 2 samples.
  std::size_t len = segment_len;
  need(len >= 2, "model.segment_len: encoder pooling needs length >= 2, got " + std::to_string(len));
  len /= 2;
  for (std::size_t i = 0; i < depth && errors.empty(); ++i) {
    need(len >= 2, "model.segment_len: HCT block " + std::to_string(i + 1) + " receives length " +
                       std::to_string(len) + " (segment_len " + std::to_string(segment_len) +
                       " halved " + std::to_string(i + 1) + " times); pooling needs >= 2");
    len /= 2;
  }
  if (!errors.empty()) {
    std::ostringstream os;
    os << "invalid model config:";
    for (const auto& e : errors) os << "\n  " << e;
    throw ConfigError(os.str());
  }
}

void TrainConfig::validate() const {
  std::vector<std::string> errors;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) errors.push_back(msg);
  };
  need(lr0 >= 0.0, "train.lr0: must be >= 0");
  need(lr_min >= 0.0 && lr_min <= lr0, "train.lr_min: must lie in [0, lr0]");
  need(weight_decay >= 0.0, "train.weight_decay: must be >= 0");
  need(epochs >= 1, "train.epochs: must be >= 1");
  need(batch_size >= 1, "train.batch_size: must be >= 1");
  need(beta1 >= 0.0 && beta1 < 1.0, "train.beta1: must lie in [0, 1)");
  need(beta2 >= 0.0 && beta2 < 1.0, "train.beta2: must lie in [0, 1)");
  need(adam_eps > 0.0, "train.adam_eps: must be positive");
  need(val_fraction > 0.0 && val_fraction < 1.0, "train.val_fraction: must lie in (0, 1)");
  if (!errors.empty()) {
    std::ostringstream os;
    os << "invalid train config:";
    for (const auto& e : errors) os << "\n  " << e;
    throw ConfigError(os.str());
  }
}

json to_json(const ModelConfig& c) {
  return json{{"channels", c.channels},
              {"segment_len", c.segment_len},
              {"sampling_rate", c.sampling_rate},
              {"kernels", c.kernels},
              {"heads", c.heads},
              {"head_dim", c.head_dim},
              {"depth", c.depth},
              {"ffn_expansion", c.ffn_expansion},
              {"dropout_p", c.dropout_p},
              {"n_classes", c.n_classes},
              {"ftl_enabled", c.ftl_enabled},
              {"dense_enabled", c.dense_enabled},
              {"ip_mode", to_string(c.ip_mode)},
              {"ip_source", to_string(c.ip_source)},
              {"ip_removed", c.ip_removed},
              {"ip_eps", c.ip_eps}};
}

json to_json(const TrainConfig& c) {
  return json{{"lr0", c.lr0},
              {"lr_min", c.lr_min},
              {"weight_decay", c.weight_decay},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"seed", c.seed},
              {"val_fraction", c.val_fraction},
              {"per_subject_split", c.per_subject_split},
              {"sample_std", c.sample_std}};
}

namespace {

// Collects schema violations so one run reports all of them.
class Reader {
 public:
  Reader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) errors_.push_back(section_ + ": expected an object");
  }

  template <typename V>
  void read(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    const json& v = j_.at(key);
    const std::string path = section_ + "." + key;
    if constexpr (std::is_same_v<V, bool>) {
      if (!v.is_boolean()) return fail(path, "expected a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<V>) {
      if (std::is_unsigned_v<V> ? !v.is_number_unsigned() : !v.is_number_integer())
        return fail(path, "expected a non-negative integer");
      out = v.get<V>();
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!v.is_number()) return fail(path, "expected a number");
      out = v.get<V>();
    } else if constexpr (std::is_same_v<V, std::string>) {
      if (!v.is_string()) return fail(path, "expected a string");
      out = v.get<std::string>();
    } else {
      if (!v.is_array()) return fail(path, "expected an array of integers");
      out.clear();
      for (const auto& e : v) {
        if (!e.is_number_unsigned()) return fail(path, "expected an array of non-negative integers");
        out.push_back(e.get<typename V::value_type>());
      }
    }
  }

  void fail(const std::string& path, const std::string& msg) { errors_.push_back(path + ": " + msg); }

  void finish() {
    if (j_.is_object()) {
      for (const auto& [key, _] : j_.items()) {
        if (!seen_.count(key)) errors_.push_back(section_ + "." + key + ": unknown field");
      }
    }
    if (!errors_.empty()) {
      std::ostringstream os;
      os << "config schema violations:";
      for (const auto& e : errors_) os << "\n  " << e;
      throw ConfigError(os.str());
    }
  }

 private:
  const json& j_;
  std::string section_;
  std::set<std::string> seen_;
  std::vector<std::string> errors_;
};

}  // namespace

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  Reader r(j, "model");
  std::string ip_mode = to_string(c.ip_mode), ip_source = to_string(c.ip_source);
  r.read("channels", c.channels);
  r.read("segment_len", c.segment_len);
  r.read("sampling_rate", c.sampling_rate);
  r.read("kernels", c.kernels);
  r.read("heads", c.heads);
  r.read("head_dim", c.head_dim);
  r.read("depth", c.depth);
  r.read("ffn_expansion", c.ffn_expansion);
  r.read("dropout_p", c.dropout_p);
  r.read("n_classes", c.n_classes);
  r.read("ftl_enabled", c.ftl_enabled);
  r.read("dense_enabled", c.dense_enabled);
  r.read("ip_mode", ip_mode);
  r.read("ip_source", ip_source);
  r.read("ip_removed", c.ip_removed);
  r.read("ip_eps", c.ip_eps);
  try {
    c.ip_mode = parse_ip_mode(ip_mode);
  } catch (const ConfigError& e) {
    r.fail("model.ip_mode", e.what());
  }
  try {
    c.ip_source = parse_ip_source(ip_source);
  } catch (const ConfigError& e) {
    r.fail("model.ip_source", e.what());
  }
  r.finish();
  c.validate();
  return c;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  Reader r(j, "train");
  r.read("lr0", c.lr0);
  r.read("lr_min", c.lr_min);
  r.read("weight_decay", c.weight_decay);
  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  r.read("beta1", c.beta1);
  r.read("beta2", c.beta2);
  r.read("adam_eps", c.adam_eps);
  r.read("seed", c.seed);
  r.read("val_fraction", c.val_fraction);
  r.read("per_subject_split", c.per_subject_split);
  r.read("sample_std", c.sample_std);
  r.finish();
  c.validate();
  return c;
}

ModelConfig model_preset(const std::string& name) {
  ModelConfig c;
  if (name == "dataset1") {
    c.channels = 28, c.segment_len = 800, c.sampling_rate = 200, c.heads = c.head_dim = 32;
  } else if (name == "dataset2") {
    c.channels = 32, c.segment_len = 384, c.sampling_rate = 128, c.heads = c.head_dim = 16;
  } else if (name == "dataset3") {
    c.channels = 19, c.segment_len = 2000, c.sampling_rate = 500, c.heads = c.head_dim = 16;
    c.dropout_p = 0.25;
  } else if (name == "toy") {
    c.channels = 4, c.segment_len = 64, c.sampling_rate = 64, c.kernels = 8;
    c.heads = c.head_dim = 4, c.depth = 2;
  } else if (name == "desk") {
    c.channels = 8, c.segment_len = 256, c.sampling_rate = 128, c.kernels = 16;
    c.heads = c.head_dim = 4, c.depth = 3;
  } else {
    throw ConfigError("unknown preset '" + name + "' (dataset1|dataset2|dataset3|toy|desk)");
  }
  c.validate();
  return c;
}

TrainConfig train_preset(const std::string& name) {
  TrainConfig t;
  if (name == "desk" || name == "toy") {
    t.epochs = 30;
  } else if (name != "dataset1" && name != "dataset2" && name != "dataset3") {
    throw ConfigError("unknown preset '" + name + "'");
  }
  return t;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + assignment + "': expected section.key=value");
  }
  const std::string section = assignment.substr(0, dot);
  const std::string key = assignment.substr(dot + 1, eq - dot - 1);
  const std::string raw = assignment.substr(eq + 1);
  if (section != "model" && section != "train") {
    throw ConfigError("override '" + assignment + "': section must be model or train");
  }
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  doc[section][key] = value;
}

}  // namespace deformer
