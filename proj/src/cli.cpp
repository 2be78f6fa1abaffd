#include "clora/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "clora/adapters.hpp"
#include "clora/checkpoint.hpp"
#include "clora/errors.hpp"
#include "clora/random.hpp"
#include "clora/sade.hpp"
#include "clora/svd.hpp"
#include "clora/train.hpp"
#include "clora/verify.hpp"

namespace clora::cli {
namespace {

namespace fs = std::filesystem;

class VerificationFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out;
}

void error_line(std::ostream& err, const std::string& kind, const std::string& message) {
  err << "error: kind=" << kind << " message=\"" << escape(message) << "\"\n";
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path resolve_out(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("CLORA_OUT"); env && *env) return env;
  return "clora_out";
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  f << text;
  if (!f) throw FormatError("write failed for " + path.string());
}

Variant variant_flag(const std::string& name) {
  try {
    return parse_variant(name);
  } catch (const Error&) {
    throw CLI::ValidationError("--variant", "unknown variant '" + name + "'");
  }
}

// Run-configuration flags shared by train and ablate. Values go through
// apply_setting, so config files and flags accept the same syntax.
struct RunFlags {
  std::string config;
  std::vector<std::string> sets;
  std::map<std::string, std::string> values;
  bool head_only = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "key=value run configuration file");
    app->add_option("--set", sets, "extra key=value setting (repeatable)");
    const std::pair<const char*, const char*> keys[] = {
        {"--seed", "seed"},   {"--d", "d"},         {"--L", "layers"},
        {"--heads", "heads"}, {"--p", "p"},         {"--r", "r"},
        {"--alpha", "alpha"}, {"--b", "batch"},     {"--epochs", "epochs"},
        {"--warmup", "warmup_epochs"}, {"--lr", "lr"}, {"--weight-decay", "weight_decay"},
    };
    for (const auto& [flag, key] : keys) app->add_option(flag, values[key]);
    app->add_flag("--head-only", head_only, "train the prediction head alone");
  }

  RunConfig build(RunConfig base) const {
    if (!config.empty()) {
      std::ifstream in(config);
      if (!in) throw FormatError("config: cannot read " + config);
      apply_config(base, in);
    }
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ContractError("--set expects key=value, got '" + s + "'");
      apply_setting(base, s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [key, value] : values)
      if (!value.empty()) apply_setting(base, key, value);
    if (head_only) base.train.head_only = true;
    return base;
  }
};

const AblationVariant& find_variant(const std::string& name) {
  for (const AblationVariant& v : ablation_variants())
    if (v.name == name) return v;
  throw ContractError("unknown ablation variant '" + name + "'");
}

void cmd_train(const RunFlags& flags, const std::string& variant, const std::string& out_flag,
               std::ostream& out) {
  RunConfig rc = flags.build(default_run_config());
  if (!variant.empty()) rc.train = apply_variant(rc.train, find_variant(variant));
  rc.validate();
  const VitWeights model = rc.make_backbone();
  const SyntheticTask task = rc.make_task();
  const TrainedResult res = train(task, model, rc.train);
  const Placement pl = rc.train.placement();
  const AdapterBank* bank = rc.train.head_only ? nullptr : &res.adapters;
  const double test_acc = accuracy(res.model, bank, pl, task.test);

  const fs::path dir = resolve_out(out_flag);
  write_text(dir / "history.csv", history_csv(res.history));
  write_text(dir / "config.txt", render_run_config(rc));
  std::vector<NamedTensor> tensors = res.model.backbone_tensors();
  for (const NamedTensor& t : res.model.head_tensors()) tensors.push_back(t);
  if (bank)
    for (const NamedTensor& t : bank->tensors()) tensors.push_back(t);
  save_checkpoint(dir / "model.clora", tensors);

  const std::size_t head = rc.vit.d * rc.vit.classes + rc.vit.classes;
  out << "variant " << (variant.empty() ? (rc.train.head_only ? "head-only" : "CLoRA") : variant)
      << "\n";
  if (bank) {
    out << "modules " << bank->modules() << "\n";
    out << "trainable_params " << param_count(bank->config(), head) << "\n";
  } else {
    out << "trainable_params " << head << "\n";
  }
  out << "steps " << res.steps << "\n";
  out << "final_val_acc " << fmt("%.4f", res.final_val_acc) << "\n";
  out << "test_acc " << fmt("%.4f", test_acc) << "\n";
  out << "regularizer_flops " << res.regularizer_flops.total() << "\n";
  out << "backbone_sha256 " << res.digest_after
      << (res.digest_before == res.digest_after ? " unchanged" : " CHANGED") << "\n";
  out << "wrote " << (dir / "history.csv").string() << " " << (dir / "config.txt").string() << " "
      << (dir / "model.clora").string() << "\n";
}

void cmd_ablate(const RunFlags& flags, const std::vector<std::uint64_t>& seeds,
                const std::string& out_flag, std::ostream& out) {
  RunConfig base = default_run_config();
  base.vit.layers = 3;
  base = flags.build(base);
  base.validate();
  const auto rows = ablate(base, seeds);
  const fs::path dir = resolve_out(out_flag);
  write_text(dir / "ablation.csv", ablation_csv(rows));
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %-9s %-10s %3s %3s %4s %4s %7s %8s %14s\n", "variant",
                "attach", "param", "mha", "ffn", "sade", "reg", "modules", "mean_acc",
                "reg_flops/step");
  out << buf;
  for (const AblationRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%-10s %-9s %-10s %3d %3d %4d %4s %7zu %8.4f %14.0f\n",
                  r.variant.c_str(), r.attach.c_str(), r.parameterization.c_str(), r.before_mha,
                  r.before_ffn, r.sade, r.regularizer.c_str(), r.modules, r.mean_val_acc,
                  r.regularizer_flops_per_step);
    out << buf;
  }
  out << "wrote " << (dir / "ablation.csv").string() << "\n";
}

struct MergeFlags {
  std::uint64_t seed = 0;
  std::size_t d = 32, layers = 2, heads = 4, r = 4, p = 2, inputs = 20;
  std::string mode = "both";
  std::string variant = "clora";
  double tol = 1e-8;
};

void cmd_verify_merge(const MergeFlags& f, std::ostream& out) {
  VitConfig vc;
  vc.d = f.d;
  vc.layers = f.layers;
  vc.heads = f.heads;
  vc.ffn_hidden = 2 * f.d;
  std::vector<std::pair<std::string, Placement>> modes;
  if (f.mode == "both" || f.mode == "pre_block")
    modes.push_back({"pre_block", {AttachMode::pre_block, true, true}});
  if (f.mode == "both" || f.mode == "qv_update")
    modes.push_back({"qv_update", {AttachMode::qv_update, true, true}});
  const Variant v = variant_flag(f.variant);
  double worst = 0;
  bool cost = true;
  for (const auto& [name, pl] : modes) {
    const MergeReport rep = verify_merge(vc, pl, v, f.r, f.p, f.seed, f.inputs);
    out << name << " inputs " << rep.inputs << " max_rel_err " << fmt("%.3e", rep.max_rel_err)
        << " merged_cost_equals_backbone " << (rep.cost_matches ? "yes" : "no") << "\n";
    worst = std::max(worst, rep.max_rel_err);
    cost = cost && rep.cost_matches;
  }
  out << "max rel err " << fmt("%.3e", worst) << "\n";
  if (!(worst < f.tol)) {
    throw VerificationFailed("merge relative error " + fmt("%.3e", worst) + " exceeds " +
                             fmt("%.1e", f.tol));
  }
  if (!cost) throw VerificationFailed("merged model cost differs from the backbone");
}

struct GradFlags {
  std::uint64_t seed = 0;
  std::size_t d = 8, layers = 2, r = 2, p = 2, samples = 2;
  double alpha = 5.0;
  double tol = 1e-4;
};

void cmd_grad_check(const GradFlags& f, std::ostream& out) {
  VitConfig vc;
  vc.d = f.d;
  vc.layers = f.layers;
  vc.heads = 2;
  vc.tokens = 3;
  vc.patch_dim = 4;
  vc.ffn_hidden = 2 * f.d;
  vc.classes = 3;
  const GradientReport rep = objective_gradient_check(vc, f.r, f.p, f.alpha, f.samples, f.seed);
  for (const GradientEntry& e : rep.tensors)
    out << e.name << " rel_err " << fmt("%.3e", e.rel_err) << "\n";
  out << "loss " << fmt("%.12g", rep.loss) << "\n";
  out << "max rel err " << fmt("%.3e", rep.max_rel_err) << "\n";
  if (!(rep.max_rel_err < f.tol)) {
    throw VerificationFailed("gradient relative error " + fmt("%.3e", rep.max_rel_err) +
                             " exceeds " + fmt("%.1e", f.tol));
  }
}

struct BankFlags {
  std::size_t d = 64, r = 4, m = 6, p = 2, banks = 1, c = 0;
  std::uint64_t seed = 0;
  std::string variant = "clora";
  double tol = kDefaultRankTol;
};

void cmd_rank_audit(const BankFlags& f, std::ostream& out) {
  const AdapterConfig ac{f.d, f.r, f.m, f.p, variant_flag(f.variant)};
  ac.validate();
  std::mt19937_64 rng = make_rng(f.seed, kStreamAdapters);
  std::size_t checked = 0, at_bound = 0, max_rank = 0, violations = 0, bound = 0;
  for (std::size_t b = 0; b < f.banks; ++b) {
    const AdapterBank bank = AdapterBank::randomize(ac, rng);
    for (std::size_t j = 1; j <= bank.modules(); ++j) {
      const RankReport rep = rank_audit(bank, j, f.tol);
      if (f.banks == 1) out << "module " << j << " rank " << rep.rank << " bound " << rep.bound << "\n";
      ++checked;
      at_bound += rep.rank == rep.bound;
      max_rank = std::max(max_rank, rep.rank);
      violations += !rep.ok;
      bound = rep.bound;
    }
  }
  out << "variant " << f.variant << " checked " << checked << " max_rank " << max_rank
      << " bound " << bound << " at_bound " << at_bound << "/" << checked << "\n";
  if (violations) {
    throw VerificationFailed(std::to_string(violations) + " update matrices exceed rank bound " +
                             std::to_string(bound));
  }
}

void cmd_count_params(const BankFlags& f, std::ostream& out) {
  const AdapterConfig ac{f.d, f.r, f.m, f.p, variant_flag(f.variant)};
  out << param_count(ac, f.c) << "\n";
}

struct ReportFlags {
  std::string backbone = "all";
  std::vector<std::size_t> batches;
  std::size_t p = 1;
  std::string format = "text";
  std::string out;
};

void cmd_complexity_report(const ReportFlags& f, std::ostream& out) {
  std::vector<Backbone> backbones;
  if (f.backbone == "all") {
    backbones = standard_backbones();
  } else {
    backbones.push_back(find_backbone(f.backbone));
  }
  std::vector<std::size_t> batches = f.batches;
  if (batches.empty()) batches.assign(std::begin(kReportBatches), std::end(kReportBatches));
  const TableFormat format = f.format == "csv" ? TableFormat::csv : TableFormat::text;
  out << render_complexity_table(backbones, batches, format, f.p);
  const char* env = std::getenv("CLORA_OUT");
  if (!f.out.empty() || (env && *env)) {
    const fs::path path = resolve_out(f.out) / "complexity.csv";
    write_text(path, render_complexity_table(backbones, batches, TableFormat::csv, f.p));
  }
}

void cmd_checkpoint_inspect(const std::string& file, std::ostream& out) {
  const auto stored = load_checkpoint(file);
  std::size_t scalars = 0;
  for (const StoredTensor& t : stored) {
    out << t.name << "\t" << t.value.rows() << "x" << t.value.cols() << "\n";
    scalars += t.value.size();
  }
  out << "tensors " << stored.size() << " scalars " << scalars << "\n";
}

void cmd_checkpoint_roundtrip(const std::string& file, const BankFlags& f,
                              const std::string& out_flag, std::ostream& out) {
  if (!file.empty()) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw FormatError("cannot read " + file);
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                          std::istreambuf_iterator<char>());
    const auto stored = decode_checkpoint(bytes);
    std::vector<NamedTensor> refs;
    for (const StoredTensor& t : stored) refs.push_back({t.name, &t.value});
    const bool same = encode_checkpoint(refs) == bytes;
    out << file << " tensors " << stored.size() << " bit-exact " << (same ? "yes" : "no") << "\n";
    if (!same) throw VerificationFailed("re-encoded checkpoint differs from " + file);
    return;
  }
  const fs::path dir = resolve_out(out_flag);
  fs::create_directories(dir);
  std::mt19937_64 rng = make_rng(f.seed, kStreamAdapters);
  bool all = true;
  for (Variant v : {Variant::lora, Variant::naive_sum, Variant::clora}) {
    const AdapterBank bank = AdapterBank::randomize({f.d, f.r, f.m, f.p, v}, rng);
    const fs::path path = dir / ("roundtrip_" + std::string(to_string(v)) + ".clora");
    save_checkpoint(path, bank.tensors());
    AdapterBank back = AdapterBank::allocate(bank.config());
    restore_bank(back, load_checkpoint(path));
    const auto a = bank.tensors(), b = back.tensors();
    bool same = a.size() == b.size();
    for (std::size_t i = 0; same && i < a.size(); ++i)
      same = a[i].name == b[i].name && a[i].tensor->identical(*b[i].tensor);
    out << to_string(v) << " tensors " << a.size() << " bit-exact " << (same ? "yes" : "no")
        << " " << path.string() << "\n";
    all = all && same;
  }
  if (!all) throw VerificationFailed("checkpoint round trip was not bit-exact");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"CLoRA adapters: training, verification and reports", "clora"};
  app.require_subcommand(1);
  std::function<void()> action;
  std::string out_dir;

  RunFlags train_flags;
  std::string train_variant;
  auto* train_cmd = app.add_subcommand("train", "fine-tune adapters on the synthetic task");
  train_flags.attach(train_cmd);
  train_cmd->add_option("--variant", train_variant, "ablation variant, e.g. CLoRA* or CLoRA#");
  train_cmd->add_option("--out", out_dir, "output directory (default $CLORA_OUT or clora_out)");
  train_cmd->callback([&] { action = [&] { cmd_train(train_flags, train_variant, out_dir, out); }; });

  RunFlags ablate_flags;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  auto* ablate_cmd = app.add_subcommand("ablate", "train every ablation variant over seeds");
  ablate_flags.attach(ablate_cmd);
  ablate_cmd->add_option("--seeds", seeds, "comma-separated seeds")->delimiter(',');
  ablate_cmd->add_option("--out", out_dir, "output directory");
  ablate_cmd->callback([&] { action = [&] { cmd_ablate(ablate_flags, seeds, out_dir, out); }; });

  MergeFlags mf;
  auto* merge_cmd = app.add_subcommand("verify-merge", "adapted vs merged forward");
  merge_cmd->add_option("--seed", mf.seed);
  merge_cmd->add_option("--d", mf.d);
  merge_cmd->add_option("--L", mf.layers);
  merge_cmd->add_option("--heads", mf.heads);
  merge_cmd->add_option("--r", mf.r);
  merge_cmd->add_option("--p", mf.p);
  merge_cmd->add_option("--inputs", mf.inputs);
  merge_cmd->add_option("--mode", mf.mode)
      ->check(CLI::IsMember({"both", "pre_block", "qv_update"}));
  merge_cmd->add_option("--variant", mf.variant);
  merge_cmd->add_option("--tol", mf.tol);
  merge_cmd->callback([&] { action = [&] { cmd_verify_merge(mf, out); }; });

  GradFlags gf;
  auto* grad_cmd = app.add_subcommand("grad-check", "full-objective finite-difference check");
  grad_cmd->add_option("--seed", gf.seed);
  grad_cmd->add_option("--d", gf.d);
  grad_cmd->add_option("--L", gf.layers);
  grad_cmd->add_option("--r", gf.r);
  grad_cmd->add_option("--p", gf.p);
  grad_cmd->add_option("--alpha", gf.alpha);
  grad_cmd->add_option("--samples", gf.samples);
  grad_cmd->add_option("--tol", gf.tol);
  grad_cmd->callback([&] { action = [&] { cmd_grad_check(gf, out); }; });

  BankFlags rf;
  auto* rank_cmd = app.add_subcommand("rank-audit", "numerical rank of every update matrix");
  rank_cmd->add_option("--d", rf.d);
  rank_cmd->add_option("--r", rf.r);
  rank_cmd->add_option("--m", rf.m);
  rank_cmd->add_option("--p", rf.p);
  rank_cmd->add_option("--variant", rf.variant);
  rank_cmd->add_option("--seed", rf.seed);
  rank_cmd->add_option("--banks", rf.banks);
  rank_cmd->add_option("--tol", rf.tol);
  rank_cmd->callback([&] { action = [&] { cmd_rank_audit(rf, out); }; });

  BankFlags cf;
  cf.p = 1;
  auto* count_cmd = app.add_subcommand("count-params", "trainable scalars of an adapter layout");
  count_cmd->add_option("--d", cf.d)->required();
  count_cmd->add_option("--r", cf.r)->required();
  count_cmd->add_option("--m", cf.m)->required();
  count_cmd->add_option("--p", cf.p);
  count_cmd->add_option("--variant", cf.variant);
  count_cmd->add_option("--c", cf.c, "prediction-head parameters");
  count_cmd->callback([&] { action = [&] { cmd_count_params(cf, out); }; });

  ReportFlags pf;
  auto* report_cmd = app.add_subcommand("complexity-report", "regularizer cost reduction table");
  report_cmd->add_option("--backbone", pf.backbone)
      ->check(CLI::IsMember({"all", "vit-base", "vit-large", "vit-huge"}));
  report_cmd->add_option("--b", pf.batches, "batch sizes")->delimiter(',');
  report_cmd->add_option("--p", pf.p);
  report_cmd->add_option("--format", pf.format)->check(CLI::IsMember({"text", "csv"}));
  report_cmd->add_option("--out", pf.out, "also write complexity.csv here");
  report_cmd->callback([&] { action = [&] { cmd_complexity_report(pf, out); }; });

  auto* ckpt_cmd = app.add_subcommand("checkpoint", "CLORA1 checkpoint tools");
  ckpt_cmd->require_subcommand(1);
  std::string inspect_file;
  auto* inspect_cmd = ckpt_cmd->add_subcommand("inspect", "list tensors of a checkpoint");
  inspect_cmd->add_option("file", inspect_file)->required();
  inspect_cmd->callback([&] { action = [&] { cmd_checkpoint_inspect(inspect_file, out); }; });
  std::string rt_file;
  BankFlags kf;
  kf.d = 16;
  kf.m = 4;
  auto* rt_cmd = ckpt_cmd->add_subcommand("roundtrip", "save, load and compare bit-exactly");
  rt_cmd->add_option("file", rt_file, "existing checkpoint to re-encode");
  rt_cmd->add_option("--seed", kf.seed);
  rt_cmd->add_option("--d", kf.d);
  rt_cmd->add_option("--r", kf.r);
  rt_cmd->add_option("--m", kf.m);
  rt_cmd->add_option("--p", kf.p);
  rt_cmd->add_option("--out", out_dir, "output directory");
  rt_cmd->callback([&] { action = [&] { cmd_checkpoint_roundtrip(rt_file, kf, out_dir, out); }; });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::Success& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::ParseError& e) {
    error_line(err, "usage", e.what());
    return kUsage;
  }

  try {
    if (action) action();
    return kOk;
  } catch (const VerificationFailed& e) {
    error_line(err, "verification", e.what());
    return kVerifyFailed;
  } catch (const CLI::ValidationError& e) {
    error_line(err, "usage", e.what());
    return kUsage;
  } catch (const NumericError& e) {
    error_line(err, e.kind(), e.what());
    return kNumeric;
  } catch (const Error& e) {
    error_line(err, e.kind(), e.what());
    return kConfig;
  } catch (const fs::filesystem_error& e) {
    error_line(err, "io", e.what());
    return kConfig;
  } catch (const std::exception& e) {
    error_line(err, "internal", e.what());
    return kInternal;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace clora::cli
