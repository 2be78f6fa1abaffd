// Acceptance run: one PASS/FAIL line per criterion with its measured
// quantities and wall time. Exit status is non-zero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "clora/adapters.hpp"
#include "clora/checkpoint.hpp"
#include "clora/cli.hpp"
#include "clora/random.hpp"
#include "clora/sade.hpp"
#include "clora/svd.hpp"
#include "clora/train.hpp"
#include "clora/verify.hpp"

using namespace clora;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// 1. Cost-reduction table against the published percentages.
Outcome complexity_table() {
  struct Row {
    const char* name;
    double threshold;
    double cells[6];  // b = 2..64; NaN where no reduction applies
  };
  const double na = std::nan("");
  const Row reference[] = {
      {"vit-base", 1.95, {2.5, 51.3, 75.6, 87.8, 93.9, 97.0}},
      {"vit-large", 2.60, {na, 35.0, 67.5, 83.8, 91.9, 95.9}},
      {"vit-huge", 3.25, {na, 18.8, 59.4, 79.7, 89.9, 94.9}},
  };
  std::size_t cells = 0, ok = 0;
  double worst = 0;
  bool thresholds = true;
  for (const Row& row : reference) {
    const Backbone& bb = find_backbone(row.name);
    thresholds = thresholds && fmt("%.2f", complexity_profile(bb.d, bb.n, 1, 1).threshold) ==
                                   fmt("%.2f", row.threshold);
    for (std::size_t i = 0; i < 6; ++i) {
      const auto prof = complexity_profile(bb.d, bb.n, kReportBatches[i], 1);
      if (std::isnan(row.cells[i])) {
        ok += !prof.applicable();
        ++cells;
        continue;
      }
      const double diff = std::abs(100.0 * prof.reduction - row.cells[i]);
      worst = std::max(worst, diff);
      ok += prof.applicable() && diff <= 0.1 + 1e-9;
      ++cells;
    }
  }
  // The CLI must render the same cells.
  std::ostringstream out, err;
  const int code = cli::run({"complexity-report", "--backbone", "vit-base", "--b", "4"}, out, err);
  const bool cli_ok = code == 0 && out.str().find("51.3%") != std::string::npos;
  return {ok == cells && thresholds && cli_ok,
          std::to_string(ok) + "/" + std::to_string(cells) + " cells within 0.1 pp (worst " +
              fmt("%.3f", worst) + " pp), thresholds " + (thresholds ? "exact" : "WRONG") +
              ", cli " + (cli_ok ? "ok" : "WRONG")};
}

// 2. Parameter formulas against an allocated-scalar census.
Outcome parameter_counts() {
  std::size_t configs = 0, ok = 0;
  const std::size_t c = 100;
  for (std::size_t d : {16u, 64u, 768u})
    for (std::size_t r : {2u, 4u, 8u})
      for (std::size_t m : {4u, 6u, 24u}) {
        const std::size_t p = 2 + m / 12;
        const std::size_t clora_want = (2 * d * r + m * r * r) * p + c;
        const std::size_t lora_want = 2 * d * r * m + c;
        const std::size_t lambda_want = 2 * d * r * m + (m * m - m) * r * r * p + c;
        const AdapterConfig cc{d, r, m, p, Variant::clora};
        const AdapterConfig lc{d, r, m, p, Variant::lora};
        const AdapterConfig nc{d, r, m, p, Variant::naive_sum};
        const AdapterConfig xc{d, r, m, p, Variant::lambda_sum};
        ok += param_count(cc, c) == clora_want && AdapterBank::allocate(cc).census() + c == clora_want;
        ok += param_count(lc, c) == lora_want && AdapterBank::allocate(lc).census() + c == lora_want;
        ok += param_count(nc, c) == lora_want && AdapterBank::allocate(nc).census() + c == lora_want;
        ok += param_count(xc, c) == lambda_want && allocate_lambda_sum(xc).census() + c == lambda_want;
        configs += 4;
      }
  const AdapterConfig base{768, 8, 24, 4, Variant::clora};
  const std::size_t vit_base = AdapterBank::allocate(base).census();
  return {ok == configs && vit_base == 55296 && param_count(base, 0) == 55296,
          std::to_string(ok) + "/" + std::to_string(configs) +
              " configs exact; ViT-Base r=8 m=24 p=4 census " + std::to_string(vit_base)};
}

// 3. Merged weights reproduce the adapted model at backbone cost.
Outcome merge_equivalence() {
  double worst = 0;
  bool cost = true;
  std::size_t models = 0, inputs = 0;
  for (std::size_t d : {16u, 32u, 64u})
    for (std::size_t layers : {2u, 4u})
      for (AttachMode mode : {AttachMode::pre_block, AttachMode::qv_update}) {
        VitConfig vc;
        vc.d = d;
        vc.layers = layers;
        vc.heads = d == 16 ? 2 : 4;
        vc.ffn_hidden = 2 * d;
        const MergeReport rep =
            verify_merge(vc, {mode, true, true}, Variant::clora, 4, 2, 300 + models, 20);
        worst = std::max(worst, rep.max_rel_err);
        cost = cost && rep.cost_matches;
        inputs += rep.inputs;
        ++models;
      }
  return {worst < 1e-8 && cost && models == 12,
          std::to_string(models) + " models x 20 inputs, max rel err " + fmt("%.2e", worst) +
              ", merged FLOPs " + (cost ? "equal" : "DIFFER")};
}

// 4. Transformed sum versus its base-space collapse.
Outcome lambda_collapse() {
  double worst = 0;
  for (int seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(9000 + seed);
    const std::size_t m = 3 + seed % 3, p = 1 + seed % 2;
    const AdapterConfig ac{12, 3, m, p, Variant::lambda_sum};
    const BaseSpace base = make_base_space(ac, &rng);
    const LambdaComponents comp = make_lambda_components(ac, rng);
    const LrmBank lrm = collapse_lambda(comp, base);
    for (std::size_t j = 1; j <= m; ++j)
      worst = std::max(worst, max_abs_diff(delta_w_lambda(comp, base, j), delta_w_clora(lrm, j)));
  }
  return {worst < 1e-10, "50 instances, max abs diff " + fmt("%.2e", worst)};
}

// 5. Rank of every update matrix against its bound.
Outcome rank_bounds() {
  struct Case {
    AdapterConfig config;
    std::size_t bound;
  };
  const Case cases[] = {
      {{32, 4, 4, 2, Variant::lora}, 4},
      {{32, 4, 6, 3, Variant::clora}, 12},
      {{32, 4, 6, 2, Variant::naive_sum}, 24},
  };
  bool ok = true;
  std::string detail;
  for (const Case& cs : cases) {
    std::mt19937_64 rng(77);
    std::size_t at_bound = 0, total = 0, worst = 0;
    for (int b = 0; b < 100; ++b) {
      const AdapterBank bank = AdapterBank::randomize(cs.config, rng);
      const RankReport rep = rank_audit(bank, 1 + b % cs.config.m);
      ok = ok && rep.ok && rep.bound == cs.bound;
      worst = std::max(worst, rep.rank);
      at_bound += rep.rank == cs.bound;
      ++total;
    }
    if (!detail.empty()) detail += "; ";
    detail += std::string(to_string(cs.config.variant)) + " max rank " + std::to_string(worst) +
              " <= " + std::to_string(cs.bound) + ", at bound " + std::to_string(at_bound) + "/" +
              std::to_string(total);
  }
  return {ok, detail};
}

// 6. Finite differences of the full objective and the closed-form rsr gradient.
Outcome gradient_fidelity() {
  VitConfig vc;
  vc.d = 8;
  vc.layers = 2;
  vc.heads = 2;
  vc.tokens = 3;
  vc.patch_dim = 4;
  vc.ffn_hidden = 16;
  vc.classes = 3;
  const GradientReport rep = objective_gradient_check(vc, 2, 2, 5.0, 1, 11);

  double closed = 0;
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(500 + seed);
    const std::size_t p = 2 + seed % 4, d = 16;
    ExpertSet e;
    for (std::size_t h = 0; h < p; ++h) e.push_back(Matrix::gaussian(d, d, 0.3, rng));
    const auto g = rsr_gradient(e);
    for (std::size_t h = 0; h < p; ++h) {
      Matrix want(d, d);
      for (std::size_t r = 0; r < p; ++r)
        if (r != h) want = add(want, scale(matmul(matmul(e[h], transpose(e[r])), e[r]), 2.0));
      closed = std::max(closed, relative_error(g[h], want));
    }
  }
  return {rep.max_rel_err < 1e-4 && closed < 1e-10 && rep.tensors.size() == 4 + 8,
          std::to_string(rep.tensors.size()) + " adapter tensors, max FD rel err " +
              fmt("%.2e", rep.max_rel_err) + "; rsr closed-form rel err " + fmt("%.2e", closed)};
}

// 7. Descent on the rsr term alone decorrelates the experts.
Outcome sade_descent() {
  const std::size_t p = 4, d = 32;
  std::mt19937_64 rng(21);
  ExpertSet e;
  for (std::size_t h = 0; h < p; ++h) e.push_back(Matrix::gaussian(d, d, 1.0 / std::sqrt(d), rng));
  std::vector<Matrix> probes;
  for (int i = 0; i < 1000; ++i) {
    const Matrix x = Matrix::gaussian(1, d, 1, rng);
    probes.push_back(scale(x, 1.0 / frobenius(x)));
  }
  auto similarity = [&] {
    double s = 0;
    std::size_t n = 0;
    for (const Matrix& x : probes)
      for (std::size_t h = 1; h <= p; ++h)
        for (std::size_t r = h + 1; r <= p; ++r, ++n) s += std::abs(token_similarity(x, e, h, r));
    return s / double(n);
  };
  const double rsr0 = rsr_term(e), sim0 = similarity();
  for (int step = 0; step < 200; ++step) {
    const auto g = rsr_gradient(e);
    for (std::size_t h = 0; h < p; ++h) e[h] = sub(e[h], scale(g[h], 1e-2));
  }
  const double cut = 1.0 - rsr_term(e) / rsr0, sim = similarity();
  return {cut >= 0.99 && sim < 0.05, "rsr cut " + fmt("%.4f", 100 * cut) +
                                         "%, mean |similarity| " + fmt("%.4f", sim0) + " -> " +
                                         fmt("%.4f", sim)};
}

// 8. Measured regularizer cost of sample-agnostic vs sample-dependent training.
Outcome regularizer_cost() {
  bool ok = true;
  std::string detail;
  for (std::size_t b : {8u, 32u}) {
    RunConfig rc = default_run_config();
    rc.vit.d = 64;
    rc.vit.tokens = rc.task.tokens = 16;
    rc.vit.ffn_hidden = 128;
    rc.task.train_size = b;
    rc.task.val_size = 4;
    rc.task.test_size = 4;
    rc.train.batch = b;
    rc.train.epochs = 1;
    rc.train.warmup_epochs = 0;
    rc.train.seed = 8;
    rc.validate();
    const VitWeights model = rc.make_backbone();
    const SyntheticTask task = rc.make_task();
    const auto& variants = ablation_variants();
    const TrainedResult agnostic = train(task, model, apply_variant(rc.train, variants[0]));
    const TrainedResult dependent = train(task, model, apply_variant(rc.train, variants[6]));
    const double measured = double(agnostic.regularizer_flops.total()) /
                            double(dependent.regularizer_flops.total());
    const double predicted = double(rc.vit.d) / (2.0 * double(rc.vit.tokens + 1) * double(b));
    const double dev = measured / predicted - 1.0;
    ok = ok && std::abs(dev) <= 0.20;
    if (!detail.empty()) detail += "; ";
    detail += "b=" + std::to_string(b) + " measured " + fmt("%.4f", measured) + " vs " +
              fmt("%.4f", predicted) + " (" + fmt("%+.1f", 100 * dev) + "%)";
  }
  return {ok, "CLoRA/CLoRA* regularizer FLOPs at d=64 n=16: " + detail};
}

// 9. Desk-scale learning on the separable synthetic task.
Outcome desk_learning() {
  const RunConfig rc = default_run_config();
  rc.validate();
  const VitWeights model = rc.make_backbone();
  const SyntheticTask task = rc.make_task();
  const TrainedResult adapted = train(task, model, rc.train);
  TrainConfig head = rc.train;
  head.head_only = true;
  const TrainedResult probe = train(task, model, head);
  const bool frozen = adapted.digest_before == adapted.digest_after &&
                      probe.digest_before == probe.digest_after &&
                      adapted.digest_before == backbone_digest(model);
  return {adapted.final_val_acc >= 0.95 && adapted.final_val_acc > probe.final_val_acc && frozen,
          "CLoRA val acc " + fmt("%.4f", adapted.final_val_acc) + ", head-only " +
              fmt("%.4f", probe.final_val_acc) + ", digests " + (frozen ? "unchanged" : "CHANGED")};
}

// 10. Ablation rows and flag isolation.
Outcome ablation_wiring() {
  RunConfig rc = default_run_config();
  rc.vit.layers = 3;
  const std::uint64_t seeds[] = {1, 2, 3};
  const auto rows = ablate(rc, seeds);
  struct Want {
    const char* name;
    bool mha, ffn, sade;
    const char* attach;
    const char* param;
    const char* reg;
    std::size_t modules;
  };
  const std::size_t L = rc.vit.layers;
  const Want want[] = {
      {"CLoRA", true, true, true, "pre_block", "clora", "rsr", 2 * L},
      {"CLoRAMF", true, true, false, "pre_block", "clora", "none", 2 * L},
      {"CLoRAMS", true, false, true, "pre_block", "clora", "rsr", L},
      {"CLoRAFS", false, true, true, "pre_block", "clora", "rsr", L},
      {"CLoRA(QV)", false, false, true, "qv_update", "clora", "rsr", 2 * L},
      {"CLoRA#", true, true, false, "pre_block", "naive_sum", "none", 2 * L},
      {"CLoRA*", true, true, true, "pre_block", "clora", "sr", 2 * L},
  };
  const std::size_t d = rc.vit.d, r = rc.train.r, p = rc.train.p;
  const std::size_t c = d * rc.vit.classes + rc.vit.classes;
  bool ok = rows.size() == 7;
  std::string detail;
  for (std::size_t i = 0; ok && i < 7; ++i) {
    const AblationRow& row = rows[i];
    const Want& w = want[i];
    const std::size_t params = std::string(w.param) == "naive_sum"
                                   ? 2 * d * r * w.modules + c
                                   : (2 * d * r + w.modules * r * r) * p + c;
    const bool row_ok = row.variant == w.name && row.before_mha == w.mha &&
                        row.before_ffn == w.ffn && row.sade == w.sade && row.attach == w.attach &&
                        row.parameterization == w.param && row.regularizer == w.reg &&
                        row.modules == w.modules && row.param_count == params &&
                        row.census == params && row.val_acc.size() == 3 &&
                        (row.regularizer_flops_per_step > 0) == (std::string(w.reg) != "none");
    ok = ok && row_ok;
    detail += std::string(i ? ", " : "") + row.variant + " " + fmt("%.3f", row.mean_val_acc);
  }
  ok = ok && rows[0].param_count == rows[1].param_count;
  return {ok, "7 rows, flags/params/modules verified; mean val acc: " + detail};
}

// 11. Bit-exact checkpoint round trip for every bank layout.
Outcome checkpoint_roundtrip() {
  const auto dir = std::filesystem::temp_directory_path() / "clora_acceptance_ckpt";
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(31);
  std::size_t files = 0, exact = 0, tensors = 0;
  auto check = [&](const std::vector<NamedTensor>& t, const std::string& name) {
    const auto path = dir / (name + ".clora");
    save_checkpoint(path, t);
    const auto back = load_checkpoint(path);
    bool same = back.size() == t.size();
    for (std::size_t i = 0; same && i < t.size(); ++i)
      same = back[i].name == t[i].name && back[i].value.identical(*t[i].tensor);
    ++files;
    exact += same;
    tensors += t.size();
  };
  for (Variant v : {Variant::lora, Variant::naive_sum, Variant::clora}) {
    const AdapterBank bank = AdapterBank::randomize({24, 4, 6, 2, v}, rng);
    check(bank.tensors(), std::string(to_string(v)));
    AdapterBank restored = AdapterBank::allocate(bank.config());
    restore_bank(restored, load_checkpoint(dir / (std::string(to_string(v)) + ".clora")));
    const auto a = bank.tensors(), b = restored.tensors();
    bool same = true;
    for (std::size_t i = 0; i < a.size(); ++i) same = same && a[i].tensor->identical(*b[i].tensor);
    ++files;
    exact += same;
  }
  const AdapterConfig lc{16, 2, 4, 2, Variant::lambda_sum};
  const BaseSpace base = make_base_space(lc, &rng);
  const LambdaComponents comp = make_lambda_components(lc, rng);
  std::vector<NamedTensor> lt;
  for (std::size_t h = 0; h < base.count(); ++h) {
    lt.push_back({"lambda/D/" + std::to_string(h + 1), &base.D[h]});
    lt.push_back({"lambda/U/" + std::to_string(h + 1), &base.U[h]});
  }
  for (std::size_t i = 0; i < comp.modules(); ++i)
    for (std::size_t h = 0; h < comp.T[i].size(); ++h) {
      const std::string s = std::to_string(i + 1) + "/" + std::to_string(h + 1);
      lt.push_back({"lambda/T/" + s, &comp.T[i][h]});
      lt.push_back({"lambda/R/" + s, &comp.R[i][h]});
      for (std::size_t j = 0; j < comp.modules(); ++j)
        lt.push_back({"lambda/L/" + s + "/" + std::to_string(j + 1), &comp.Lambda[i][j][h]});
    }
  check(lt, "lambda_sum");
  VitConfig vc;
  const VitWeights model = VitWeights::random(vc, rng);
  std::vector<NamedTensor> all = model.backbone_tensors();
  for (const NamedTensor& t : model.head_tensors()) all.push_back(t);
  check(all, "backbone");
  std::filesystem::remove_all(dir);
  return {exact == files, std::to_string(exact) + "/" + std::to_string(files) +
                              " saves bit-exact (" + std::to_string(tensors) + " tensors)"};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
    double budget_s;  // 0: no limit
  };
  const Criterion criteria[] = {
      {"cost-reduction table", complexity_table, 1},
      {"parameter-count exactness", parameter_counts, 1},
      {"merge equivalence", merge_equivalence, 30},
      {"transformed-sum collapse", lambda_collapse, 10},
      {"rank bounds", rank_bounds, 30},
      {"gradient fidelity", gradient_fidelity, 60},
      {"rsr descent", sade_descent, 30},
      {"sr vs rsr cost", regularizer_cost, 60},
      {"desk-scale learning", desk_learning, 300},
      {"ablation wiring", ablation_wiring, 600},
      {"checkpoint round trip", checkpoint_roundtrip, 0},
  };
  int failed = 0, index = 0;
  for (const Criterion& c : criteria) {
    ++index;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = c.budget_s == 0 || secs < c.budget_s;
    o.pass = o.pass && in_time;
    std::printf("%s %2d %s: %s (%.2f s%s)\n", o.pass ? "PASS" : "FAIL", index, c.name,
                o.detail.c_str(), secs,
                c.budget_s == 0 ? "" : (in_time ? ", within budget" : ", OVER BUDGET"));
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%d/%d criteria passed\n", index - failed, index);
  return failed ? 1 : 0;
}
