#include "deformer/model_check.hpp"

#include <cmath>

#include "deformer/gradcheck.hpp"
#include "deformer/model.hpp"
#include "deformer/ops.hpp"

namespace deformer {

std::vector<GroupGradcheck> gradcheck_model(const ModelConfig& config, const GradcheckOptions& options) {
  Deformer<double> model(config, options.seed);
  RngState rng = RngState::from_seed(options.seed).split("gradcheck");
  for (auto& bn : model.batchnorms()) {
    for (auto& m : bn.state->running_mean) m = 0.1 * rng.normal();
    for (auto& v : bn.state->running_var) v = 0.5 + rng.uniform();
  }
  Tensor<double> x(Shape{options.batch, config.channels, config.segment_len});
  for (auto& v : x.data()) v = rng.normal();
  Tensor<double> readout(Shape{options.batch, config.n_classes});
  for (auto& v : readout.data()) v = rng.normal();

  RngState unused = RngState::from_seed(0);
  auto probe = [&](const Tensor<double>& input) {
    return ops::sum(ops::mul(model.forward(input, Mode::kEval, unused), readout));
  };

  x.set_requires_grad(true);
  model.zero_grad();
  probe(x).backward();

  auto numeric_loss = [&](Tensor<double>&) {
    NoGradGuard no_grad;
    return probe(x).item();
  };

  std::vector<GroupGradcheck> out;
  auto check = [&](const std::string& name, Tensor<double> t) {
    const Tensor<double> numeric = finite_diff_grad<double>(numeric_loss, t, options.step);
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    GroupGradcheck g{name, t.numel(), 0.0, 0.0};
    g.max_rel_error = max_relative_error<double>(analytic, numeric.data(), options.floor);
    for (std::size_t i = 0; i < analytic.size(); ++i)
      g.max_abs_error = std::max(g.max_abs_error, std::abs(analytic[i] - numeric[i]));
    out.push_back(g);
  };
  if (options.include_input) check("input", x);
  for (const auto& p : model.parameters()) check(p.name, p.tensor);
  return out;
}

}  // namespace deformer
