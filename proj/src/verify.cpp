#include "clora/verify.hpp"

#include <algorithm>

#include "clora/random.hpp"
#include "clora/train.hpp"

namespace clora {

MergeReport verify_merge(const VitConfig& vit, const Placement& placement, Variant variant,
                         std::size_t r, std::size_t p, std::uint64_t seed, std::size_t inputs) {
  vit.validate();
  std::mt19937_64 rng = make_rng(seed, kStreamBackbone);
  const VitWeights model = VitWeights::random(vit, rng);
  std::mt19937_64 arng = make_rng(seed, kStreamAdapters);
  const AdapterBank bank =
      AdapterBank::randomize({vit.d, r, placement.modules(vit.layers), p, variant}, arng);
  const VitWeights merged = merge_adapters(model, bank, placement);

  MergeReport rep;
  rep.inputs = inputs;
  std::mt19937_64 prng = make_rng(seed, kStreamProbe);
  for (std::size_t i = 0; i < inputs; ++i) {
    const Matrix x = Matrix::gaussian(vit.tokens, vit.patch_dim, 1.0, prng);
    FlopMeter plain, folded;
    const Matrix want = forward(x, model, &bank, placement);
    const Matrix got = forward(x, merged, nullptr, {}, &folded);
    forward(x, model, nullptr, {}, &plain);
    rep.max_rel_err = std::max(rep.max_rel_err, relative_error(got, want));
    rep.cost_matches = rep.cost_matches && plain.matmul_flops == folded.matmul_flops &&
                       plain.other_flops == folded.other_flops;
  }
  return rep;
}

GradientReport objective_gradient_check(const VitConfig& vit, std::size_t r, std::size_t p,
                                        double alpha, std::size_t samples, std::uint64_t seed,
                                        double h) {
  vit.validate();
  const Placement placement{AttachMode::pre_block, true, true};
  std::mt19937_64 rng = make_rng(seed, kStreamBackbone);
  const VitWeights model = VitWeights::random(vit, rng);
  std::mt19937_64 arng = make_rng(seed, kStreamAdapters);
  AdapterBank bank = AdapterBank::randomize(
      {vit.d, r, placement.modules(vit.layers), p, Variant::clora}, arng, 0.4);

  std::mt19937_64 prng = make_rng(seed, kStreamProbe);
  std::vector<Matrix> xs;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < samples; ++i) {
    xs.push_back(Matrix::gaussian(vit.tokens, vit.patch_dim, 1.0, prng));
    labels.push_back(i % vit.classes);
  }

  auto value = [&]() {
    Matrix logits(xs.size(), vit.classes);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const Matrix l = forward(xs[i], model, &bank, placement);
      for (std::size_t k = 0; k < vit.classes; ++k) logits(i, k) = l(0, k);
    }
    std::vector<ExpertSet> experts;
    for (std::size_t j = 1; j <= bank.modules(); ++j) experts.push_back(bank.experts(j));
    return objective(logits, labels, experts, alpha, vit.d);
  };

  Tape tape;
  BoundVit bound_vit(tape, model);
  BoundAdapters bound(tape, bank);
  std::vector<Var> logits;
  for (const Matrix& x : xs) logits.push_back(forward(bound_vit, tape.constant(x), &bound, placement));
  std::vector<std::vector<Var>> experts;
  for (std::size_t j = 1; j <= bank.modules(); ++j) experts.push_back(bound.experts(j));
  const Var loss = objective(concat_rows(logits), labels, experts, alpha, vit.d);
  const auto grads = tape.gradients(loss, bound.leaves());

  GradientReport rep;
  rep.loss = loss.value()(0, 0);
  const auto names = bank.tensors();
  const auto params = bank.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix fd(params[k]->rows(), params[k]->cols());
    for (std::size_t e = 0; e < params[k]->size(); ++e) {
      double& slot = params[k]->data()[e];
      const double keep = slot;
      slot = keep + h;
      const double up = value();
      slot = keep - h;
      const double down = value();
      slot = keep;
      fd.data()[e] = (up - down) / (2 * h);
    }
    const double err = relative_error(grads[k], fd);
    rep.tensors.push_back({names[k].name, err});
    rep.max_rel_err = std::max(rep.max_rel_err, err);
  }
  return rep;
}

}  // namespace clora
