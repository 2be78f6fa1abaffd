#include "clora/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "clora/errors.hpp"
#include "clora/random.hpp"

namespace clora {
namespace {

RunConfig tiny_run(std::uint64_t seed = 0) {
  RunConfig c = default_run_config();
  c.vit.d = 8;
  c.vit.layers = 2;
  c.vit.heads = 2;
  c.vit.tokens = 4;
  c.vit.patch_dim = 6;
  c.vit.ffn_hidden = 16;
  c.task.tokens = 4;
  c.task.patch_dim = 6;
  c.task.train_size = 48;
  c.task.val_size = 24;
  c.task.test_size = 8;
  c.train.batch = 16;
  c.train.epochs = 3;
  c.train.warmup_epochs = 1;
  c.train.p = 2;
  c.train.r = 2;
  c.train.seed = seed;
  return c;
}

TEST(Objective, UniformLogitsGiveLogK) {
  const Matrix logits(4, 5, 0.7);
  const std::vector<std::size_t> labels = {0, 1, 4, 2};
  EXPECT_NEAR(objective(logits, labels, {}, 3.0, 8), std::log(5.0), 1e-14);
}

TEST(Objective, AlphaZeroIsCrossEntropyAlone) {
  std::mt19937_64 rng(1);
  const Matrix logits = Matrix::gaussian(3, 4, 2, rng);
  const std::vector<std::size_t> labels = {3, 0, 1};
  const AdapterBank bank = AdapterBank::randomize({8, 2, 3, 2, Variant::clora}, rng);
  std::vector<ExpertSet> experts = {bank.experts(1), bank.experts(2)};
  EXPECT_EQ(objective(logits, labels, experts, 0.0, 8), objective(logits, labels, {}, 1.0, 8));
}

TEST(Objective, MatchesTwoTermOracle) {
  std::mt19937_64 rng(2);
  const std::size_t d = 8;
  const Matrix logits = Matrix::gaussian(2, 3, 1, rng);
  const std::vector<std::size_t> labels = {2, 1};
  const AdapterBank bank = AdapterBank::randomize({d, 2, 3, 2, Variant::clora}, rng);
  std::vector<ExpertSet> experts = {bank.experts(1), bank.experts(3)};

  double ce = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    double z = 0;
    for (std::size_t k = 0; k < 3; ++k) z += std::exp(logits(i, k));
    ce += -std::log(std::exp(logits(i, labels[i])) / z);
  }
  ce /= 2;
  double reg = 0;
  for (const ExpertSet& e : experts)
    reg += frobenius_sq(matmul(e[0], transpose(e[1])));
  const double alpha = 0.75;
  EXPECT_NEAR(objective(logits, labels, experts, alpha, d), ce + alpha / double(d * d) * reg,
              1e-12 * (ce + reg));
}

TEST(Objective, RejectsBadLabels) {
  const Matrix logits(2, 3);
  const std::vector<std::size_t> bad = {0, 3};
  EXPECT_THROW(objective(logits, bad, {}, 1, 4), IndexError);
  const std::vector<std::size_t> short_list = {0};
  EXPECT_THROW(objective(logits, short_list, {}, 1, 4), ShapeError);
}

TEST(CosineLr, EndpointsAndShape) {
  const double peak = 0.3;
  EXPECT_EQ(cosine_lr(0, 100, 10, peak), 0.0);
  EXPECT_NEAR(cosine_lr(5, 100, 10, peak), 0.15, 1e-15);
  EXPECT_NEAR(cosine_lr(10, 100, 10, peak), peak, 1e-15);
  EXPECT_NEAR(cosine_lr(55, 100, 10, peak), 0.15, 1e-12);
  EXPECT_NEAR(cosine_lr(100, 100, 10, peak), 0.0, 1e-15);
  double prev = peak;
  for (std::size_t s = 11; s <= 100; ++s) {
    const double lr = cosine_lr(s, 100, 10, peak);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
  EXPECT_EQ(cosine_lr(0, 10, 0, peak), peak);
  EXPECT_EQ(cosine_lr(7, 7, 7, peak), peak);
  EXPECT_THROW(cosine_lr(101, 100, 10, peak), ContractError);
}

TEST(AdamW, ConvergesOnQuadratic) {
  std::mt19937_64 rng(3);
  const Matrix target = Matrix::gaussian(3, 2, 1, rng);
  Matrix x(3, 2);
  AdamW opt;
  Matrix* params[] = {&x};
  for (int i = 0; i < 4000; ++i) {
    const double lr = 0.05 * (1.0 - double(i) / 4000.0);
    const Matrix g = scale(sub(x, target), 2.0);
    opt.step(params, std::span<const Matrix>(&g, 1), lr);
  }
  EXPECT_LT(max_abs_diff(x, target), 1e-6);
  EXPECT_EQ(opt.steps(), 4000u);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  Matrix x{{1.0, -2.0}};
  const Matrix g{{0.5, -3.0}};
  AdamW opt;
  Matrix* params[] = {&x};
  opt.step(params, std::span<const Matrix>(&g, 1), 0.1);
  EXPECT_NEAR(x(0, 0), 0.9, 1e-8);
  EXPECT_NEAR(x(0, 1), -1.9, 1e-8);
}

TEST(AdamW, DecayIsDecoupled) {
  Matrix x{{2.0}};
  const Matrix g{{0.0}};
  AdamW opt(0.5);
  Matrix* params[] = {&x};
  opt.step(params, std::span<const Matrix>(&g, 1), 0.1);
  EXPECT_NEAR(x(0, 0), 2.0 - 0.1 * 0.5 * 2.0, 1e-15);
}

TEST(AdamW, RejectsChangingParameterList) {
  Matrix a(1, 1), b(1, 1);
  const Matrix g[] = {Matrix(1, 1), Matrix(1, 1)};
  AdamW opt;
  Matrix* one[] = {&a};
  Matrix* two[] = {&a, &b};
  opt.step(one, std::span<const Matrix>(g, 1), 0.1);
  EXPECT_THROW(opt.step(two, g, 0.1), ContractError);
}

// Gradient of the full training objective (cross-entropy through the
// adapted encoder plus the weighted regularizer) against central
// differences of the matrix-level objective.
TEST(Objective, FullGradientMatchesFiniteDifferences) {
  VitConfig vc;
  vc.d = 8;
  vc.layers = 2;
  vc.heads = 2;
  vc.tokens = 3;
  vc.patch_dim = 4;
  vc.ffn_hidden = 16;
  vc.classes = 3;
  std::mt19937_64 rng(4);
  const VitWeights w = VitWeights::random(vc, rng);
  const Placement pl{AttachMode::pre_block, true, true};
  AdapterBank bank = AdapterBank::randomize({8, 2, 4, 2, Variant::clora}, rng, 0.4);
  std::vector<Matrix> xs;
  for (int i = 0; i < 2; ++i) xs.push_back(Matrix::gaussian(vc.tokens, vc.patch_dim, 1, rng));
  const std::vector<std::size_t> labels = {0, 2};
  const double alpha = 5.0;

  auto value = [&](const AdapterBank& b) {
    Matrix logits(xs.size(), vc.classes);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const Matrix l = forward(xs[i], w, &b, pl);
      for (std::size_t k = 0; k < vc.classes; ++k) logits(i, k) = l(0, k);
    }
    std::vector<ExpertSet> experts;
    for (std::size_t j = 1; j <= b.modules(); ++j) experts.push_back(b.experts(j));
    return objective(logits, labels, experts, alpha, vc.d);
  };

  Tape tape;
  BoundVit vit(tape, w);
  BoundAdapters ad(tape, bank);
  std::vector<Var> logits;
  for (const Matrix& x : xs) logits.push_back(forward(vit, tape.constant(x), &ad, pl));
  std::vector<std::vector<Var>> experts;
  for (std::size_t j = 1; j <= 4; ++j) experts.push_back(ad.experts(j));
  const Var loss = objective(concat_rows(logits), labels, experts, alpha, vc.d);
  EXPECT_NEAR(loss.value()(0, 0), value(bank), 1e-12);
  const auto grads = tape.gradients(loss, ad.leaves());

  const auto params = bank.parameters();
  ASSERT_EQ(params.size(), grads.size());
  const double h = 1e-6;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix fd(params[k]->rows(), params[k]->cols());
    for (std::size_t e = 0; e < params[k]->size(); ++e) {
      double& slot = params[k]->data()[e];
      const double keep = slot;
      slot = keep + h;
      const double up = value(bank);
      slot = keep - h;
      const double down = value(bank);
      slot = keep;
      fd.data()[e] = (up - down) / (2 * h);
    }
    EXPECT_LT(relative_error(grads[k], fd), 1e-5) << "tensor " << k;
  }
}

TEST(Task, DeterministicPerSeedAndShaped) {
  const RunConfig c = tiny_run();
  const SyntheticTask a = SyntheticTask::generate(c.task, 9);
  const SyntheticTask b = SyntheticTask::generate(c.task, 9);
  const SyntheticTask other = SyntheticTask::generate(c.task, 10);
  ASSERT_EQ(a.train.size(), c.task.train_size);
  ASSERT_EQ(a.val.size(), c.task.val_size);
  ASSERT_EQ(a.test.size(), c.task.test_size);
  EXPECT_TRUE(a.train[5].patches.identical(b.train[5].patches));
  EXPECT_FALSE(a.train[5].patches.identical(other.train[5].patches));
  for (const Sample& s : a.train) {
    EXPECT_EQ(s.patches.rows(), c.task.tokens);
    EXPECT_LT(s.label, c.task.classes);
  }
}

TEST(Task, TwoClassPatternsAreAntipodal) {
  TaskConfig tc = tiny_run().task;
  tc.separation = 3;
  const SyntheticTask t = SyntheticTask::generate(tc, 1);
  ASSERT_EQ(t.patterns.size(), 2u);
  EXPECT_LT(max_abs_diff(t.patterns[0], scale(t.patterns[1], -1)), 1e-15);
  EXPECT_NEAR(frobenius(t.patterns[0]), 3.0, 1e-12);
  for (std::size_t k = 0; k < tc.patch_dim; ++k) EXPECT_EQ(t.patterns[0](1, k), 0.0);
}

TEST(Task, RejectsBadConfig) {
  TaskConfig tc = tiny_run().task;
  tc.signal_tokens = tc.tokens + 1;
  EXPECT_THROW(tc.validate(), ContractError);
  tc = tiny_run().task;
  tc.classes = 1;
  EXPECT_THROW(tc.validate(), ContractError);
}

TEST(Train, ZeroLearningRateLeavesEverythingUnchanged) {
  RunConfig c = tiny_run(3);
  c.train.lr = 0;
  const VitWeights model = c.make_backbone();
  const SyntheticTask task = c.make_task();
  const AdapterBank start = make_adapters(c.train, c.vit);
  const TrainedResult res = train(task, model, start, c.train);
  const auto a = start.tensors(), b = res.adapters.tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i].tensor->identical(*b[i].tensor));
  EXPECT_TRUE(res.model.head_w.identical(model.head_w));
  EXPECT_EQ(res.final_val_acc, accuracy(model, nullptr, {}, task.val));
}

TEST(Train, DeterministicForOneSeed) {
  const RunConfig c = tiny_run(5);
  const VitWeights model = c.make_backbone();
  const SyntheticTask task = c.make_task();
  const TrainedResult a = train(task, model, c.train);
  const TrainedResult b = train(task, model, c.train);
  ASSERT_EQ(a.history.size(), c.train.epochs);
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
    EXPECT_EQ(a.history[i].val_acc, b.history[i].val_acc);
  }
  const auto ta = a.adapters.tensors(), tb = b.adapters.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_TRUE(ta[i].tensor->identical(*tb[i].tensor));
}

TEST(Train, BackboneStaysFrozenAndAdaptersMove) {
  const RunConfig c = tiny_run(6);
  const VitWeights model = c.make_backbone();
  const TrainedResult res = train(c.make_task(), model, c.train);
  EXPECT_EQ(res.digest_before, res.digest_after);
  EXPECT_EQ(res.digest_before, backbone_digest(model));
  EXPECT_EQ(backbone_digest(res.model), backbone_digest(model));
  EXPECT_FALSE(res.model.head_w.identical(model.head_w));
  EXPECT_GT(max_abs(res.adapters.delta_w(1)), 0.0);
  EXPECT_EQ(res.steps, c.train.epochs * 3);
  EXPECT_GT(res.regularizer_flops.total(), 0u);
}

TEST(Train, LayerNormTrainingMovesOnlyNorms) {
  RunConfig c = tiny_run(7);
  c.train.train_layer_norm = true;
  const VitWeights model = c.make_backbone();
  const TrainedResult res = train(c.make_task(), model, c.train);
  EXPECT_EQ(backbone_digest(res.model, true), backbone_digest(model, true));
  EXPECT_NE(backbone_digest(res.model), backbone_digest(model));
}

TEST(Train, HeadOnlyUsesNoAdapters) {
  RunConfig c = tiny_run(8);
  c.train.head_only = true;
  const VitWeights model = c.make_backbone();
  const TrainedResult res = train(c.make_task(), model, c.train);
  EXPECT_EQ(res.adapters.modules(), 0u);
  EXPECT_EQ(res.regularizer_flops.total(), 0u);
  EXPECT_FALSE(res.model.head_w.identical(model.head_w));
}

TEST(Train, RejectsNonZeroStartAndMismatchedLayout) {
  const RunConfig c = tiny_run();
  const VitWeights model = c.make_backbone();
  const SyntheticTask task = c.make_task();
  std::mt19937_64 rng(1);
  EXPECT_THROW(train(task, model, AdapterBank::randomize(c.train.adapter_config(c.vit), rng),
                     c.train),
               ContractError);
  AdapterConfig wrong = c.train.adapter_config(c.vit);
  wrong.r = 3;
  EXPECT_THROW(train(task, model, AdapterBank::initialize(wrong, rng), c.train), ContractError);
}

TEST(Train, DivergenceSurfacesNumericError) {
  RunConfig c = tiny_run(2);
  c.train.lr = 1e300;
  c.train.warmup_epochs = 0;
  const VitWeights model = c.make_backbone();
  EXPECT_THROW(train(c.make_task(), model, c.train), NumericError);
}

TEST(Train, RegularizerLowersExpertSimilarity) {
  RunConfig c = tiny_run(11);
  c.train.epochs = 6;
  c.train.lr = 0.02;
  const VitWeights model = c.make_backbone();
  const SyntheticTask task = c.make_task();
  RunConfig off = c;
  off.train.alpha = 0;
  RunConfig on = c;
  on.train.alpha = 200;
  const TrainedResult a = train(task, model, off.train);
  const TrainedResult b = train(task, model, on.train);
  const Placement pl = c.train.placement();
  EXPECT_LT(mean_expert_similarity(model, b.adapters, pl, task.val),
            mean_expert_similarity(model, a.adapters, pl, task.val));
  EXPECT_LT(b.history.back().rsr_sum, a.history.back().rsr_sum);
}

TEST(Train, AccuracyMergesAdapters) {
  std::mt19937_64 rng(12);
  const RunConfig c = tiny_run();
  const VitWeights model = c.make_backbone();
  const SyntheticTask task = c.make_task();
  const AdapterBank bank = AdapterBank::randomize(c.train.adapter_config(c.vit), rng, 0.3);
  const Placement pl = c.train.placement();
  std::size_t correct = 0;
  for (const Sample& s : task.val) {
    const Matrix l = forward(s.patches, model, &bank, pl);
    correct += (l(0, 1) > l(0, 0) ? 1u : 0u) == s.label;
  }
  EXPECT_DOUBLE_EQ(accuracy(model, &bank, pl, task.val), double(correct) / task.val.size());
}

TEST(Train, HistoryCsvHasOneRowPerEpoch) {
  const std::vector<EpochRecord> h = {{1, 0.5, 0.75, 0.01, 0.001}, {2, 0.25, 0.875, 0.02, 0.0}};
  const std::string csv = history_csv(h);
  EXPECT_EQ(csv.rfind("epoch,train_loss,val_acc,rsr_sum,lr\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_NE(csv.find("\n2,0.25,0.875000,"), std::string::npos);
}

TEST(TrainConfig, ValidationAndPlacement) {
  TrainConfig t;
  EXPECT_NO_THROW(t.validate());
  EXPECT_EQ(t.placement().mode, AttachMode::pre_block);
  t.qv_mode = true;
  EXPECT_EQ(t.placement().mode, AttachMode::qv_update);
  t.insert_ffn = false;
  EXPECT_THROW(t.validate(), ContractError);
  t = TrainConfig{};
  t.insert_mha = t.insert_ffn = false;
  EXPECT_THROW(t.validate(), ContractError);
  t = TrainConfig{};
  t.warmup_epochs = t.epochs + 1;
  EXPECT_THROW(t.validate(), ContractError);
  t = TrainConfig{};
  t.sample_dependent_sr = true;
  t.sade_on = false;
  EXPECT_THROW(t.validate(), ContractError);
  t = TrainConfig{};
  t.head_only = true;
  EXPECT_EQ(t.placement().mode, AttachMode::none);
  EXPECT_FALSE(t.regularized());
  t = TrainConfig{};
  t.naive_sum_mode = true;
  EXPECT_FALSE(t.regularized());
  EXPECT_EQ(t.adapter_config(VitConfig{}).variant, Variant::naive_sum);
}

TEST(RunConfig, ParsesKeyValueLines) {
  RunConfig c = default_run_config();
  std::istringstream in("# comment\n d = 16 \nL=3\nalpha=0.5\nqv_mode=true\nseed=42 # trailing\n\n");
  apply_config(c, in);
  EXPECT_EQ(c.vit.d, 16u);
  EXPECT_EQ(c.vit.layers, 3u);
  EXPECT_EQ(c.train.alpha, 0.5);
  EXPECT_TRUE(c.train.qv_mode);
  EXPECT_EQ(c.train.seed, 42u);

  std::istringstream unknown("bogus=1\n");
  EXPECT_THROW(apply_config(c, unknown), ContractError);
  std::istringstream malformed("d=abc\n");
  EXPECT_THROW(apply_config(c, malformed), ContractError);
  std::istringstream no_eq("d 16\n");
  EXPECT_THROW(apply_config(c, no_eq), ContractError);
  EXPECT_THROW(load_run_config("/nonexistent/clora.cfg"), FormatError);
}

TEST(RunConfig, RenderRoundTrips) {
  RunConfig c = tiny_run(77);
  c.train.alpha = 0.1;
  c.task.noise = 1.0 / 3.0;
  c.train.sample_dependent_sr = true;
  const auto path = std::filesystem::temp_directory_path() / "clora_train_test.cfg";
  std::ofstream(path) << render_run_config(c);
  const RunConfig back = load_run_config(path);
  std::filesystem::remove(path);
  EXPECT_EQ(render_run_config(back), render_run_config(c));
  EXPECT_EQ(back.task.noise, c.task.noise);
}

TEST(RunConfig, DefaultsValidateAndSeedDrivesEverything) {
  const RunConfig c = default_run_config();
  EXPECT_NO_THROW(c.validate());
  RunConfig other = c;
  other.train.seed = 1;
  EXPECT_NE(backbone_digest(c.make_backbone()), backbone_digest(other.make_backbone()));
  EXPECT_EQ(backbone_digest(c.make_backbone()), backbone_digest(c.make_backbone()));
  RunConfig bad = c;
  bad.task.tokens = 3;
  EXPECT_THROW(bad.validate(), ContractError);
}

TEST(Ablation, VariantsWiredAsListed) {
  const auto& v = ablation_variants();
  ASSERT_EQ(v.size(), 7u);
  const TrainConfig base;
  const TrainConfig mf = apply_variant(base, v[1]);
  EXPECT_FALSE(mf.regularized());
  const TrainConfig ms = apply_variant(base, v[2]);
  EXPECT_TRUE(ms.insert_mha);
  EXPECT_FALSE(ms.insert_ffn);
  const TrainConfig fs = apply_variant(base, v[3]);
  EXPECT_FALSE(fs.insert_mha);
  EXPECT_TRUE(fs.insert_ffn);
  EXPECT_TRUE(apply_variant(base, v[4]).qv_mode);
  EXPECT_EQ(apply_variant(base, v[5]).adapter_config(VitConfig{}).variant, Variant::naive_sum);
  EXPECT_TRUE(apply_variant(base, v[6]).sample_dependent_sr);
}

TEST(Ablation, RowsReportLayoutCostAndAccuracy) {
  RunConfig c = tiny_run();
  c.vit.layers = 3;
  c.train.epochs = 1;
  c.train.warmup_epochs = 0;
  c.task.train_size = 16;
  const std::uint64_t seeds[] = {1, 2};
  const auto rows = ablate(c, seeds);
  ASSERT_EQ(rows.size(), 7u);
  const std::size_t head = c.vit.d * c.vit.classes + c.vit.classes;
  for (const AblationRow& r : rows) {
    EXPECT_EQ(r.val_acc.size(), 2u);
    EXPECT_EQ(r.census, r.param_count) << r.variant;
    EXPECT_GE(r.mean_val_acc, 0.0);
    EXPECT_EQ(r.regularizer == "none", r.regularizer_flops_per_step == 0.0) << r.variant;
  }
  EXPECT_EQ(rows[0].modules, 6u);
  EXPECT_EQ(rows[0].param_count, (2 * 8 * 2 + 6 * 4) * 2 + head);
  EXPECT_EQ(rows[2].modules, 3u);
  EXPECT_EQ(rows[3].modules, 3u);
  EXPECT_EQ(rows[4].attach, "qv_update");
  EXPECT_EQ(rows[5].parameterization, "naive_sum");
  EXPECT_EQ(rows[5].param_count, 2 * 8 * 2 * 6 + head);
  EXPECT_EQ(rows[0].regularizer, "rsr");
  EXPECT_EQ(rows[1].regularizer, "none");
  EXPECT_EQ(rows[6].regularizer, "sr");

  const std::string csv = ablation_csv(rows);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 8);
  EXPECT_NE(csv.find("val_acc_2,regularizer_flops_per_step"), std::string::npos);
}

}  // namespace
}  // namespace clora
