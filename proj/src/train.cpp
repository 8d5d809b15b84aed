#include "deformer/train.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "deformer/errors.hpp"
#include "deformer/ops.hpp"
#include "deformer/optim.hpp"

namespace deformer {

namespace {

void check_geometry(const ModelConfig& mc, const EEGDataset& data) {
  std::vector<std::string> errors;
  if (mc.channels != data.channels)
    errors.push_back("channels: model " + std::to_string(mc.channels) + ", dataset " + std::to_string(data.channels));
  if (mc.segment_len != data.segment_len)
    errors.push_back("segment_len: model " + std::to_string(mc.segment_len) + ", dataset " +
                     std::to_string(data.segment_len));
  if (mc.n_classes != data.n_classes)
    errors.push_back("n_classes: model " + std::to_string(mc.n_classes) + ", dataset " +
                     std::to_string(data.n_classes));
  if (errors.empty()) return;
  std::string msg = "model config does not fit the dataset:";
  for (const auto& e : errors) msg += "\n  " + e;
  throw ConfigError(msg);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

template <typename T>
FitResult fit(Deformer<T>& model, const EEGDataset& data, const std::vector<SegmentRef>& train,
              const std::vector<SegmentRef>& val, const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  check_geometry(model.config(), data);
  if (train.empty()) throw ConfigError("fit: empty training set");
  if (val.empty()) throw ConfigError("fit: empty validation set");

  std::vector<Tensor<T>> params;
  for (const auto& p : model.parameters()) params.push_back(p.tensor);
  Adam<T> optimizer(params, AdamHyper{config.beta1, config.beta2, config.adam_eps, config.weight_decay});

  const RngState root = RngState::from_seed(config.seed).split("fit");
  FitResult result;
  bool have_best = false;
  std::vector<int> labels;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    const double lr = cosine_lr(e, config.epochs, config.lr0, config.lr_min);
    std::vector<SegmentRef> order = train;
    RngState shuffle_rng = root.split("shuffle").split(e);
    shuffle_refs(order, shuffle_rng);
    RngState dropout_rng = root.split("dropout").split(e);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      const auto x = make_batch<T>(data, std::span<const SegmentRef>(order).subspan(start, n), &labels);
      model.zero_grad();
      const auto logits = model.forward(x, Mode::kTrain, dropout_rng);
      const auto loss = ops::cross_entropy(logits, labels);
      loss.backward();
      optimizer.step(lr);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(n);
    }
    model.zero_grad();

    EpochRecord rec{e + 1, lr, loss_sum / static_cast<double>(order.size()), 0.0};
    rec.val_acc = evaluate(model, data, val, config.batch_size).accuracy;
    result.history.push_back(rec);
    if (!have_best || rec.val_acc > result.best.best_val_acc) {
      result.best = capture_checkpoint(model, config, &optimizer);
      result.best.epoch = rec.epoch;
      result.best.best_val_acc = rec.val_acc;
      result.best.rng = root;
      have_best = true;
    }
    if (on_epoch) on_epoch(rec);
  }
  restore_checkpoint(model, result.best);
  return result;
}

template <typename T>
std::vector<int> predict(Deformer<T>& model, const EEGDataset& data, const std::vector<SegmentRef>& refs,
                         std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("predict: batch_size must be >= 1");
  NoGradGuard no_grad;
  RngState unused = RngState::from_seed(0);
  std::vector<int> preds;
  preds.reserve(refs.size());
  for (std::size_t start = 0; start < refs.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, refs.size() - start);
    const auto x = make_batch<T>(data, std::span<const SegmentRef>(refs).subspan(start, n), nullptr);
    const auto logits = model.forward(x, Mode::kEval, unused);
    const std::size_t classes = logits.size(1);
    for (std::size_t b = 0; b < n; ++b) {
      const auto row = logits.data().subspan(b * classes, classes);
      preds.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return preds;
}

template <typename T>
MetricsReport evaluate(Deformer<T>& model, const EEGDataset& data, const std::vector<SegmentRef>& refs,
                       std::size_t batch_size) {
  check_geometry(model.config(), data);
  const auto preds = predict(model, data, refs, batch_size);
  std::vector<int> labels;
  labels.reserve(refs.size());
  for (const auto& r : refs) labels.push_back(data.subjects.at(r.subject).segments.at(r.index).label);
  return make_report(preds, labels, model.config().n_classes);
}

template <typename T>
MetricsReport evaluate(Deformer<T>& model, const Checkpoint& ckpt, const EEGDataset& data,
                       const std::vector<SegmentRef>& refs, std::size_t batch_size) {
  restore_checkpoint(model, ckpt);
  return evaluate(model, data, refs, batch_size);
}

std::uint64_t fold_seed(std::uint64_t seed, const std::string& subject_id) {
  return RngState::from_seed(seed).split("loso").split(subject_id).next_u64();
}

LosoResult run_loso(const EEGDataset& data, const ModelConfig& model_config, const TrainConfig& train_config,
                    const LosoOptions& options) {
  data.validate();
  model_config.validate();
  train_config.validate();
  check_geometry(model_config, data);
  if (data.subjects.size() < 2) throw ConfigError("run_loso: need at least two subjects");
  std::vector<std::string> subjects = options.subjects;
  if (subjects.empty()) {
    for (const auto& s : data.subjects) subjects.push_back(s.subject_id);
  }
  for (const auto& id : subjects) data.subject_index(id);

  LosoResult result;
  for (const auto& id : subjects) {
    LosoFold fold;
    fold.subject_id = id;
    fold.seed = fold_seed(train_config.seed, id);
    try {
      TrainConfig tc = train_config;
      tc.seed = fold.seed;
      const Split split = loso_split(data, id, tc.val_fraction, fold.seed, tc.per_subject_split);
      Deformer<float> model(model_config, fold.seed);
      EpochCallback cb;
      if (options.on_epoch) cb = [&](const EpochRecord& r) { options.on_epoch(id, r); };
      auto fitted = fit(model, data, split.train, split.val, tc, cb);
      fold.report = evaluate(model, data, split.test, tc.batch_size);
      fold.history = std::move(fitted.history);
      fold.best = std::move(fitted.best);
    } catch (const ConfigError& e) {
      throw ConfigError("fold '" + id + "': " + e.what());
    } catch (const Error& e) {
      throw Error("fold '" + id + "': " + e.what());
    }
    if (options.on_fold) options.on_fold(fold);
    result.folds.push_back(std::move(fold));
  }
  std::vector<double> acc, f1;
  for (const auto& f : result.folds) {
    acc.push_back(f.report.accuracy);
    f1.push_back(f.report.macro_f1);
  }
  const bool sample = train_config.sample_std && acc.size() > 1;
  result.accuracy = mean_std(acc, sample);
  result.macro_f1 = mean_std(f1, sample);
  return result;
}

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "epoch,lr,train_loss,val_acc\n";
  for (const auto& r : history) out << r.epoch << ',' << fmt(r.lr) << ',' << fmt(r.train_loss) << ',' << fmt(r.val_acc) << '\n';
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

void write_loso_summary_csv(const LosoResult& result, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "subject,acc,f1_macro\n";
  for (const auto& f : result.folds) out << f.subject_id << ',' << fmt(f.report.accuracy) << ',' << fmt(f.report.macro_f1) << '\n';
  out << "mean," << fmt(result.accuracy.mean) << ',' << fmt(result.macro_f1.mean) << '\n';
  out << "std," << fmt(result.accuracy.std) << ',' << fmt(result.macro_f1.std) << '\n';
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

#define DEFORMER_TRAIN_INSTANTIATE(T)                                                                           \
  template FitResult fit<T>(Deformer<T>&, const EEGDataset&, const std::vector<SegmentRef>&,                    \
                            const std::vector<SegmentRef>&, const TrainConfig&, const EpochCallback&);          \
  template std::vector<int> predict<T>(Deformer<T>&, const EEGDataset&, const std::vector<SegmentRef>&,         \
                                       std::size_t);                                                            \
  template MetricsReport evaluate<T>(Deformer<T>&, const EEGDataset&, const std::vector<SegmentRef>&,           \
                                     std::size_t);                                                              \
  template MetricsReport evaluate<T>(Deformer<T>&, const Checkpoint&, const EEGDataset&,                        \
                                     const std::vector<SegmentRef>&, std::size_t);

DEFORMER_TRAIN_INSTANTIATE(float)
DEFORMER_TRAIN_INSTANTIATE(double)

}  // namespace deformer
