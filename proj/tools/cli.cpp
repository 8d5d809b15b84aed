#include "cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>

#include "CLI11.hpp"
#include "deformer/checkpoint.hpp"
#include "deformer/config.hpp"
#include "deformer/data.hpp"
#include "deformer/errors.hpp"
#include "deformer/model.hpp"
#include "deformer/model_check.hpp"
#include "deformer/saliency.hpp"
#include "deformer/train.hpp"

namespace deformer::cli {

using nlohmann::json;

namespace {

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::istreambuf_iterator<char> it(in), end; it != end; ++it) {
    h ^= static_cast<unsigned char>(*it);
    h *= 0x100000001b3ULL;
  }
  return hex64(h);
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << '\n';
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("DEFORMER_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (errno != 0 || *end != '\0' || *s == '-') throw ConfigError(std::string("DEFORMER_SEED='") + s + "' is not an unsigned integer");
  return static_cast<std::uint64_t>(v);
}

struct ConfigArgs {
  std::string preset;
  std::string file;
  std::vector<std::string> sets;

  void add_to(CLI::App* app, const std::string& default_preset) {
    preset = default_preset;
    app->add_option("--preset", preset, "Named geometry: dataset1|dataset2|dataset3|toy|desk")->capture_default_str();
    app->add_option("--config", file, "JSON file with \"model\" and/or \"train\" sections")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "Override, e.g. model.ftl_enabled=false or train.epochs=10");
  }

  bool given() const { return !file.empty() || !sets.empty(); }
};

struct Resolved {
  json doc;
  ModelConfig model;
  TrainConfig train;
};

/// preset, then the config file, then --set, then DEFORMER_SEED.
Resolved resolve(const ConfigArgs& args) {
  json doc = {{"model", to_json(model_preset(args.preset))}, {"train", to_json(train_preset(args.preset))}};
  if (!args.file.empty()) {
    json patch = read_json_file(args.file);
    if (!patch.is_object()) throw ConfigError("'" + args.file + "': expected a JSON object");
    for (const auto& [key, _] : patch.items())
      if (key != "model" && key != "train") throw ConfigError("'" + args.file + "': unknown section '" + key + "'");
    doc.merge_patch(patch);
  }
  for (const auto& s : args.sets) apply_override(doc, s);
  if (auto seed = env_seed()) doc["train"]["seed"] = *seed;
  Resolved r;
  r.model = model_config_from_json(doc["model"]);
  r.train = train_config_from_json(doc["train"]);
  r.model.validate();
  r.train.validate();
  r.doc = {{"model", to_json(r.model)}, {"train", to_json(r.train)}};
  return r;
}

json manifest_base(const std::vector<std::string>& argv, const std::string& command) {
  return {{"command", command},
          {"argv", argv},
          {"started_at", now_utc()},
          {"format_versions", {{"dataset", kDatasetFormatVersion}, {"checkpoint", kCheckpointFormatVersion}}}};
}

void finish_manifest(json& m, const std::filesystem::path& path) {
  m["finished_at"] = now_utc();
  write_json_file(path, m);
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void print_report(std::ostream& out, const MetricsReport& r) {
  out << "accuracy  " << fixed(r.accuracy) << "\nmacro_f1  " << fixed(r.macro_f1) << "\nper-class F1:";
  for (double f : r.per_class_f1) out << ' ' << fixed(f);
  out << "\nconfusion (rows = true class):\n";
  for (const auto& row : r.confusion) {
    out << ' ';
    for (auto v : row) out << ' ' << std::setw(6) << v;
    out << '\n';
  }
}

std::vector<SegmentRef> select_segments(const EEGDataset& data, const std::string& subject) {
  if (subject.empty()) return all_segments(data);
  return subject_segments(data, data.subject_index(subject));
}

// ---------------------------------------------------------------------------

int cmd_generate(const std::string& spec_path, const std::string& out_path, std::uint64_t seed,
                 const std::vector<std::string>& argv, std::ostream& out) {
  if (auto s = env_seed()) seed = *s;
  SyntheticSpec spec = spec_path.empty() ? default_synthetic_spec() : synthetic_spec_from_json(read_json_file(spec_path));
  const EEGDataset ds = generate_synthetic(spec, seed);
  const std::filesystem::path path(out_path);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_dataset(ds, path);
  write_segment_csv(ds, path.string() + ".segments.csv");
  json m = manifest_base(argv, "generate-data");
  m["spec"] = to_json(spec);
  m["seeds"] = {{"data", seed}};
  m["outputs"] = {{"dataset", path.string()}, {"dataset_fnv1a", file_hash(path)}};
  finish_manifest(m, path.string() + ".manifest.json");
  out << "wrote " << ds.subjects.size() << " subjects, " << ds.segment_count() << " segments to " << path.string()
      << '\n';
  return 0;
}

int cmd_train(const ConfigArgs& cfg, const std::string& data_path, const std::string& out_dir,
              const std::string& test_subject, bool quiet, const std::vector<std::string>& argv, std::ostream& out) {
  const Resolved r = resolve(cfg);
  const EEGDataset data = read_dataset(data_path);
  const Split split = test_subject.empty()
                          ? pooled_split(data, r.train.val_fraction, r.train.seed)
                          : loso_split(data, test_subject, r.train.val_fraction, r.train.seed, r.train.per_subject_split);
  Deformer<float> model(r.model, r.train.seed);
  const std::filesystem::path dir(out_dir);
  std::filesystem::create_directories(dir);
  json m = manifest_base(argv, "train");
  m["config"] = r.doc;
  m["seeds"] = {{"train", r.train.seed}, {"model_init", r.train.seed}, {"split", r.train.seed}};
  m["inputs"] = {{"dataset", data_path}, {"dataset_fnv1a", file_hash(data_path)}, {"test_subject", test_subject}};
  write_json_file(dir / "config.json", r.doc);

  auto result = fit(model, data, split.train, split.val, r.train, [&](const EpochRecord& e) {
    if (!quiet)
      out << "epoch " << std::setw(3) << e.epoch << "  lr " << std::scientific << std::setprecision(3) << e.lr
          << std::defaultfloat << "  loss " << fixed(e.train_loss) << "  val_acc " << fixed(e.val_acc) << std::endl;
  });
  save_checkpoint(result.best, dir / "checkpoint");
  write_history_csv(result.history, dir / "history.csv");
  json metrics = {{"best_epoch", result.best.epoch}, {"val", to_json(evaluate(model, data, split.val, r.train.batch_size))}};
  out << "best epoch " << result.best.epoch << " (val_acc " << fixed(result.best.best_val_acc) << ")\n";
  if (!split.test.empty()) {
    const auto test = evaluate(model, data, split.test, r.train.batch_size);
    metrics["test"] = to_json(test);
    out << "held-out subject " << test_subject << ":\n";
    print_report(out, test);
  }
  write_json_file(dir / "metrics.json", metrics);
  finish_manifest(m, dir / "manifest.json");
  return 0;
}

int cmd_loso(const ConfigArgs& cfg, const std::string& data_path, const std::string& out_dir,
             const std::vector<std::string>& subjects, bool quiet, const std::vector<std::string>& argv,
             std::ostream& out) {
  const Resolved r = resolve(cfg);
  const EEGDataset data = read_dataset(data_path);
  const std::filesystem::path dir(out_dir);
  std::filesystem::create_directories(dir);
  json m = manifest_base(argv, "loso");
  m["config"] = r.doc;
  m["inputs"] = {{"dataset", data_path}, {"dataset_fnv1a", file_hash(data_path)}};
  write_json_file(dir / "config.json", r.doc);

  LosoOptions opts;
  opts.subjects = subjects;
  if (!quiet) {
    opts.on_epoch = [&](const std::string& id, const EpochRecord& e) {
      out << id << " epoch " << std::setw(3) << e.epoch << "  loss " << fixed(e.train_loss) << "  val_acc "
          << fixed(e.val_acc) << std::endl;
    };
  }
  json fold_seeds = json::object();
  opts.on_fold = [&](const LosoFold& f) {
    const auto sub = dir / f.subject_id;
    std::filesystem::create_directories(sub);
    save_checkpoint(f.best, sub / "checkpoint");
    write_history_csv(f.history, sub / "history.csv");
    write_json_file(sub / "metrics.json", {{"best_epoch", f.best.epoch}, {"test", to_json(f.report)}});
    fold_seeds[f.subject_id] = f.seed;
    out << f.subject_id << ": acc " << fixed(f.report.accuracy) << "  f1_macro " << fixed(f.report.macro_f1)
        << std::endl;
  };
  const LosoResult result = run_loso(data, r.model, r.train, opts);
  write_loso_summary_csv(result, dir / "summary.csv");
  json folds = json::array();
  for (const auto& f : result.folds) folds.push_back({{"subject", f.subject_id}, {"report", to_json(f.report)}});
  write_json_file(dir / "metrics.json", {{"folds", folds},
                                         {"acc_mean", result.accuracy.mean},
                                         {"acc_std", result.accuracy.std},
                                         {"f1_mean", result.macro_f1.mean},
                                         {"f1_std", result.macro_f1.std},
                                         {"std", r.train.sample_std ? "sample" : "population"}});
  m["seeds"] = {{"train", r.train.seed}, {"folds", fold_seeds}};
  finish_manifest(m, dir / "manifest.json");
  out << "LOSO mean acc " << fixed(result.accuracy.mean) << " (std " << fixed(result.accuracy.std)
      << ")  mean f1_macro " << fixed(result.macro_f1.mean) << " (std " << fixed(result.macro_f1.std) << ")\n";
  return 0;
}

/// Model built from the checkpoint's own config unless the user forces one.
Deformer<float> load_model(const ConfigArgs& cfg, const Checkpoint& ckpt) {
  const ModelConfig mc = cfg.given() ? resolve(cfg).model : ckpt.model;
  Deformer<float> model(mc, 0);
  restore_checkpoint(model, ckpt);
  return model;
}

int cmd_eval(const ConfigArgs& cfg, const std::string& ckpt_dir, const std::string& data_path,
             const std::string& subject, const std::string& out_path, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_dir);
  Deformer<float> model = load_model(cfg, ckpt);
  const EEGDataset data = read_dataset(data_path);
  const auto report = evaluate(model, data, select_segments(data, subject), ckpt.train.batch_size);
  print_report(out, report);
  if (!out_path.empty()) write_json_file(out_path, to_json(report));
  return 0;
}

int cmd_saliency(const ConfigArgs& cfg, const std::string& ckpt_dir, const std::string& data_path, int class_idx,
                 const std::string& subject, const std::string& out_prefix, const std::string& format,
                 std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_dir);
  Deformer<float> model = load_model(cfg, ckpt);
  if (class_idx < 0 || static_cast<std::size_t>(class_idx) >= model.config().n_classes) {
    throw ConfigError("--class " + std::to_string(class_idx) + " is not a class index of this model (0.." +
                      std::to_string(model.config().n_classes - 1) + ")");
  }
  const EEGDataset data = read_dataset(data_path);
  const auto refs = select_segments(data, subject);
  std::vector<SaliencyMap> maps;
  for (std::size_t start = 0; start < refs.size(); start += 64) {
    const std::size_t n = std::min<std::size_t>(64, refs.size() - start);
    const auto x = make_batch<float>(data, std::span<const SegmentRef>(refs).subspan(start, n), nullptr);
    auto batch = saliency_batch(model, x, class_idx);
    maps.insert(maps.end(), batch.begin(), batch.end());
  }
  SaliencyMap avg = average_saliency(maps);
  avg.subject_id = subject.empty() ? "all" : subject;
  avg.channel_names = data.channel_names;
  const std::filesystem::path prefix(out_prefix);
  if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
  if (format == "csv" || format == "both") export_saliency_csv(avg, out_prefix + ".csv");
  if (format == "pgm" || format == "both") export_saliency_pgm(avg, out_prefix + ".pgm");
  out << "saliency over " << maps.size() << " segments, class " << class_idx << "\nchannel scores:\n";
  for (std::size_t ch = 0; ch < avg.channels; ++ch) {
    const std::string name = ch < avg.channel_names.size() ? avg.channel_names[ch] : "ch" + std::to_string(ch);
    out << "  " << std::setw(8) << std::left << name << std::right << ' ' << fixed(avg.channel_scores[ch]) << '\n';
  }
  return 0;
}

int cmd_gradcheck(const ConfigArgs& cfg, double tolerance, std::ostream& out, std::ostream& err) {
  const Resolved r = resolve(cfg);
  GradcheckOptions opts;
  opts.seed = r.train.seed;
  const auto t0 = std::chrono::steady_clock::now();
  const auto groups = gradcheck_model(r.model, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::vector<std::string> failed;
  double worst = 0.0;
  out << std::left << std::setw(32) << "group" << std::right << std::setw(8) << "numel" << std::setw(14)
      << "max_rel_err" << std::setw(14) << "max_abs_err" << '\n';
  for (const auto& g : groups) {
    out << std::left << std::setw(32) << g.name << std::right << std::setw(8) << g.numel << std::scientific
        << std::setprecision(3) << std::setw(14) << g.max_rel_error << std::setw(14) << g.max_abs_error
        << std::defaultfloat << '\n';
    worst = std::max(worst, g.max_rel_error);
    if (!(g.max_rel_error < tolerance)) failed.push_back(g.name);
  }
  out << "max relative error " << std::scientific << std::setprecision(3) << worst << std::defaultfloat
      << " (tolerance " << tolerance << ", " << fixed(secs, 1) << " s)\n";
  if (!failed.empty()) {
    err << "gradcheck failed for:";
    for (const auto& n : failed) err << ' ' << n;
    err << '\n';
    return 1;
  }
  out << "gradcheck passed\n";
  return 0;
}

int cmd_info(const ConfigArgs& cfg, std::ostream& out) {
  const Resolved r = resolve(cfg);
  const ModelConfig& mc = r.model;
  const ShapeAudit audit = shape_audit(mc);
  out << "geometry        c=" << mc.channels << " l=" << mc.segment_len << " fs=" << mc.sampling_rate << " Hz\n";
  out << "kernel length   " << audit.kernel_length << '\n';
  out << "length chain   ";
  for (auto v : audit.length_chain) out << ' ' << v;
  out << '\n';
  out << "embedding len   " << audit.embedding_len << '\n';
  out << "parameters      " << param_count(mc) << '\n';
  out << "MACs / sample   " << macs_estimate(mc) << '\n';
  out << "switches        ftl=" << (mc.ftl_enabled ? "on" : "off") << " dense=" << (mc.dense_enabled ? "on" : "off")
      << " ip_mode=" << to_string(mc.ip_mode) << " ip_source=" << to_string(mc.ip_source);
  if (mc.ip_source != mc.effective_ip_source()) out << " (resolved " << to_string(mc.effective_ip_source()) << ")";
  if (!mc.ip_removed.empty()) {
    out << " ip_removed=";
    for (std::size_t i = 0; i < mc.ip_removed.size(); ++i) out << (i ? "," : "") << mc.ip_removed[i];
  }
  out << "\nshapes (per sample):\n";
  for (const auto& [name, shape] : audit.rows) out << "  " << std::left << std::setw(22) << name << std::right << shape_str(shape) << '\n';
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"EEG decoding with a coarse-to-fine convolutional transformer"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  std::vector<std::string> argv_echo(argv, argv + argc);

  ConfigArgs cfg;
  std::string data_path, out_path, ckpt_dir, subject, spec_path, format = "both";
  std::vector<std::string> subjects;
  std::uint64_t seed = 0;
  int class_idx = 0;
  double tolerance = 1e-4;
  bool quiet = false;

  auto* gen = app.add_subcommand("generate-data", "Write a synthetic EEG dataset");
  gen->add_option("--spec", spec_path, "Synthetic spec JSON (bundled default when omitted)")->check(CLI::ExistingFile);
  gen->add_option("--out", out_path, "Output dataset path")->required();
  gen->add_option("--seed", seed, "Generator seed (DEFORMER_SEED overrides)");

  auto* train = app.add_subcommand("train", "Train one model and keep the best validation epoch");
  cfg.add_to(train, "desk");
  train->add_option("--data", data_path, "Dataset file")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out_path, "Output directory")->required();
  train->add_option("--test-subject", subject, "Hold this subject out and report on it");
  train->add_flag("--quiet", quiet, "No per-epoch output");

  auto* loso = app.add_subcommand("loso", "Leave-one-subject-out evaluation");
  ConfigArgs loso_cfg;
  loso_cfg.add_to(loso, "desk");
  loso->add_option("--data", data_path, "Dataset file")->required()->check(CLI::ExistingFile);
  loso->add_option("--out", out_path, "Output directory")->required();
  loso->add_option("--subjects", subjects, "Only hold out these subjects")->delimiter(',');
  loso->add_flag("--quiet", quiet, "No per-epoch output");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  ConfigArgs eval_cfg;
  eval_cfg.add_to(eval, "desk");
  eval->add_option("--checkpoint", ckpt_dir, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--data", data_path, "Dataset file")->required()->check(CLI::ExistingFile);
  eval->add_option("--subject", subject, "Only this subject's segments");
  eval->add_option("--out", out_path, "Also write the report as JSON");

  auto* sal = app.add_subcommand("saliency", "Input-gradient saliency of one class");
  ConfigArgs sal_cfg;
  sal_cfg.add_to(sal, "desk");
  sal->add_option("--checkpoint", ckpt_dir, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  sal->add_option("--data", data_path, "Dataset file")->required()->check(CLI::ExistingFile);
  sal->add_option("--class", class_idx, "Class index")->required();
  sal->add_option("--subject", subject, "Only this subject's segments (all when omitted)");
  sal->add_option("--out", out_path, "Output prefix (.csv / .pgm appended)")->required();
  sal->add_option("--format", format, "csv|pgm|both")->check(CLI::IsMember({"csv", "pgm", "both"}))->capture_default_str();

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every parameter gradient (64-bit)");
  ConfigArgs grad_cfg;
  grad_cfg.add_to(grad, "toy");
  grad->add_option("--tolerance", tolerance, "Maximum relative error")->capture_default_str();

  auto* info = app.add_subcommand("info", "Shapes, parameter count and MAC estimate");
  ConfigArgs info_cfg;
  info_cfg.add_to(info, "desk");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_generate(spec_path, out_path, seed, argv_echo, out);
    if (*train) return cmd_train(cfg, data_path, out_path, subject, quiet, argv_echo, out);
    if (*loso) return cmd_loso(loso_cfg, data_path, out_path, subjects, quiet, argv_echo, out);
    if (*eval) return cmd_eval(eval_cfg, ckpt_dir, data_path, subject, out_path, out);
    if (*sal) return cmd_saliency(sal_cfg, ckpt_dir, data_path, class_idx, subject, out_path, format, out);
    if (*grad) return cmd_gradcheck(grad_cfg, tolerance, out, err);
    if (*info) return cmd_info(info_cfg, out);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"deformer"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace deformer::cli
