#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "adderkit/gradients.hpp"
#include "adderkit/necks.hpp"
#include "adderkit/parallel.hpp"
#include "adderkit/profiler.hpp"
#include "adderkit/trainer.hpp"

namespace {

using namespace adderkit;

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  return out;
}

// ---- gradcheck ------------------------------------------------------------

int run_gradcheck(std::uint64_t seed, const std::string& csv_path,
                  bool include_divergence) {
  const std::vector<GradCheckRow> rows = gradcheck_battery(seed);
  std::printf("%-12s %-18s %12s  %s\n", "op", "parameter", "max_rel_err",
              "status");
  bool all_pass = true;
  for (const GradCheckRow& r : rows) {
    std::printf("%-12s %-18s %12.3e  %s\n", r.op.c_str(), r.param.c_str(),
                r.max_rel_err, r.pass ? "pass" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  if (include_divergence) {
    const GradCheckRow div = adder_weight_rule_vs_true_forward(seed);
    std::printf("%-12s %-18s %12.3e  %s\n", div.op.c_str(), div.param.c_str(),
                div.max_rel_err, "diverges (surrogate, expected)");
  }
  std::printf("%s\n", all_pass ? "gradient check passed at tolerance 1e-3"
                               : "gradient check FAILED");
  if (!csv_path.empty()) {
    std::ofstream out = open_out(csv_path);
    write_gradcheck_csv(out, rows);
  }
  return all_pass ? 0 : 1;
}

// ---- energy ----------------------------------------------------------------

int run_energy(const std::string& spec_path, const std::string& precision,
               const std::string& convert_mask, bool force_first,
               const std::string& csv_path) {
  ModelSpec spec = load_model_spec(spec_path);
  if (!convert_mask.empty()) {
    spec = convert_to_adder(spec, split_csv(convert_mask), force_first);
  }
  const EnergyModel model = energy_model_from_string(precision);

  std::size_t name_w = 5;
  for (const LayerSpec& l : spec.layers) name_w = std::max(name_w, l.name.size());

  std::printf("model: %s", spec.name.c_str());
  if (!spec.input_size.empty()) std::printf("  (input %s)", spec.input_size.c_str());
  std::printf("\nprecision: %s  (mul %.2f pJ, add %.2f pJ)\n\n",
              model.precision.c_str(), model.e_mul_pj, model.e_add_pj);
  std::printf("%-*s %6s %9s %9s %12s\n", static_cast<int>(name_w), "layer",
              "kind", "muls(G)", "adds(G)", "energy(mJ)");
  OpCount total;
  for (const LayerSpec& l : spec.layers) {
    const OpCount c = count_layer(l);
    total += c;
    std::printf("%-*s %6s %9.1f %9.1f %12.2f\n", static_cast<int>(name_w),
                l.name.c_str(), to_string(l.kind), c.muls / 1e9, c.adds / 1e9,
                energy_mj(c, model));
  }
  std::printf("%-*s %6s %9.1f %9.1f %12.2f\n", static_cast<int>(name_w),
              "total", "", total.muls / 1e9, total.adds / 1e9,
              energy_mj(total, model));

  if (!csv_path.empty()) {
    std::ofstream out = open_out(csv_path);
    out << "layer,kind,muls,adds,energy_mj\n";
    char buf[64];
    for (const LayerSpec& l : spec.layers) {
      const OpCount c = count_layer(l);
      out << l.name << "," << to_string(l.kind) << "," << c.muls << ","
          << c.adds << ",";
      std::snprintf(buf, sizeof(buf), "%.10g", energy_mj(c, model));
      out << buf << "\n";
    }
  }
  return 0;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string task = "classify";
  std::string arch = "adder";
  std::string neck = "fpn";
  std::string bn_policy = "unfrozen";
  std::string checkpoint;
  std::string out_path;
  std::string record_path;
  std::string config_path;
  std::string batch_sizes = "2,8,32";
  bool no_stale = false;
  int batch_size = -1;
  int steps = -1;
  double lr = -1.0;
  std::uint64_t seed = 1;
};

OptimConfig task_optim(const TrainArgs& a, int def_steps, double def_lr,
                       int def_bs) {
  OptimConfig cfg;
  cfg.steps = a.steps > 0 ? a.steps : def_steps;
  cfg.base_lr = a.lr > 0 ? a.lr : def_lr;
  cfg.batch_size = a.batch_size > 0 ? a.batch_size : def_bs;
  if (!a.config_path.empty()) {
    apply_config(cfg, parse_config_file(a.config_path));
  }
  cfg.validate();
  return cfg;
}

void maybe_write_record(const std::string& path, const TrainRecord& rec) {
  if (path.empty()) return;
  std::ofstream out = open_out(path);
  write_train_record_csv(out, rec);
}

int run_train(const TrainArgs& a) {
  if (a.task == "classify") {
    ClassifierExperimentConfig cfg;
    cfg.arch = filter_kind_from_string(a.arch);
    cfg.frozen_bn = a.bn_policy == "frozen";
    cfg.checkpoint = a.checkpoint.empty()
                         ? "assets/classifier_" + a.arch + ".ckpt"
                         : a.checkpoint;
    cfg.inject_stale_stats = !a.no_stale;
    cfg.optim = task_optim(a, 40, 0.02, 32);
    cfg.seed = a.seed;
    const ClassifierExperimentResult res = train_toy_classifier(cfg);
    std::printf("task classify  arch %s  bn %s  seed %llu\n", a.arch.c_str(),
                a.bn_policy.c_str(), static_cast<unsigned long long>(a.seed));
    std::printf("eval loss %.4f -> %.4f  accuracy %.4f\n",
                res.initial_eval_loss, res.final_eval_loss, res.final_accuracy);
    maybe_write_record(a.record_path, res.record);
    if (!a.out_path.empty()) res.net.save(a.out_path);
    return 0;
  }
  if (a.task == "pretrain") {
    const std::string out = a.out_path.empty()
                                ? "assets/classifier_" + a.arch + ".ckpt"
                                : a.out_path;
    const OptimConfig optim = task_optim(a, 240, 0.05, 32);
    const ClassifierExperimentResult res = pretrain_toy_classifier(
        filter_kind_from_string(a.arch), optim, a.seed, out);
    std::printf("task pretrain  arch %s  seed %llu\n", a.arch.c_str(),
                static_cast<unsigned long long>(a.seed));
    std::printf("eval loss %.4f -> %.4f  accuracy %.4f\n",
                res.initial_eval_loss, res.final_eval_loss, res.final_accuracy);
    std::printf("checkpoint written to %s\n", out.c_str());
    maybe_write_record(a.record_path, res.record);
    return 0;
  }
  if (a.task == "detect") {
    DetectorExperimentConfig cfg;
    cfg.arch = filter_kind_from_string(a.arch);
    cfg.neck = neck_kind_from_string(a.neck);
    cfg.optim = task_optim(a, 300, 0.02, 8);
    cfg.seed = a.seed;
    const DetectorExperimentResult res = train_toy_detector(cfg);
    std::printf("task detect  arch %s  neck %s  seed %llu\n", a.arch.c_str(),
                a.neck.c_str(), static_cast<unsigned long long>(a.seed));
    std::printf("final train loss %.4f  eval f1 %.4f\n", res.final_train_loss,
                res.f1);
    maybe_write_record(a.record_path, res.record);
    return 0;
  }
  if (a.task == "bn-stats") {
    std::vector<int> sizes;
    for (const std::string& tok : split_csv(a.batch_sizes)) {
      sizes.push_back(std::stoi(tok));
    }
    const BnStatVarianceResult res = bn_stat_variance_experiment(sizes, a.seed);
    std::printf("%10s %12s %12s\n", "batch", "mean_std", "var_std");
    for (std::size_t i = 0; i < res.batch_sizes.size(); ++i) {
      std::printf("%10d %12.6f %12.6f\n", res.batch_sizes[i], res.mean_std[i],
                  res.var_std[i]);
    }
    if (!a.record_path.empty()) {
      std::ofstream out = open_out(a.record_path);
      write_bn_stat_csv(out, res);
    }
    return 0;
  }
  throw CLI::ValidationError("--task", "unknown task " + a.task);
}

// ---- sparsity ----------------------------------------------------------------

int run_sparsity(const std::string& checkpoint, std::uint64_t seed) {
  ClassifierNet net = ClassifierNet::load_file(checkpoint);
  const ClusterDataset probe(kClusterClasses, 64, kClusterTemplateSeed,
                             3000 + seed, kClusterNoise, true);
  const ClassifierBatch batch = probe.make_batch(0, probe.size());
  const Tensor4 acts = net.last_block_activations(batch.x);
  std::printf("checkpoint: %s  (arch %s)\n", checkpoint.c_str(),
              to_string(net.block_kind()));
  std::printf("last block post-relu sparsity: %.4f\n", sparsity(acts));
  return 0;
}

// ---- export-graph ---------------------------------------------------------

int run_export_graph(const std::string& neck, const std::string& filters,
                     int levels, int width, int extra) {
  NeckConfig cfg;
  cfg.kind = neck_kind_from_string(neck);
  cfg.filter_kind = filter_kind_from_string(filters);
  cfg.width = width;
  cfg.extra_levels = extra;
  std::vector<int> in_channels;
  for (int i = 0; i < levels; ++i) in_channels.push_back(8 << i);
  Rng rng(0);
  const FusionGraph g = build_neck(cfg, in_channels, rng);
  std::cout << export_graph(g);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adder network kernels, toy training and an energy profiler"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads,
                 "worker threads (default: ADDERKIT_THREADS or 1)");

  // gradcheck
  CLI::App* gc = app.add_subcommand(
      "gradcheck", "finite-difference check of every backward rule");
  std::uint64_t gc_seed = 1;
  std::string gc_csv;
  bool gc_div = false;
  gc->add_option("--seed", gc_seed, "battery seed");
  gc->add_option("--csv", gc_csv, "write the rows as csv");
  gc->add_flag("--include-divergence", gc_div,
               "also show the surrogate weight rule against the true forward");

  // energy
  CLI::App* en = app.add_subcommand(
      "energy", "operation counts and energy for a model description");
  std::string en_spec, en_precision = "fp32", en_convert, en_csv;
  bool en_force_first = false;
  en->add_option("--spec", en_spec, "model description file")->required();
  en->add_option("--precision", en_precision, "fp32 or int8")
      ->check(CLI::IsMember({"fp32", "int8"}));
  en->add_option("--convert", en_convert,
                 "comma list of components to flip to adder");
  en->add_flag("--force-first", en_force_first,
               "allow converting the first layer too");
  en->add_option("--csv", en_csv, "write per-layer counts as csv");

  // train
  CLI::App* tr = app.add_subcommand("train", "toy training tasks");
  TrainArgs ta;
  tr->add_option("--task", ta.task, "classify, pretrain, detect or bn-stats")
      ->check(CLI::IsMember({"classify", "pretrain", "detect", "bn-stats"}));
  tr->add_option("--arch", ta.arch, "conv or adder")
      ->check(CLI::IsMember({"conv", "adder"}));
  tr->add_option("--neck", ta.neck, "fpn, pafpn, pafpn-shortcut or rpafpn");
  tr->add_option("--bn-policy", ta.bn_policy, "frozen or unfrozen")
      ->check(CLI::IsMember({"frozen", "unfrozen"}));
  tr->add_option("--batch-size", ta.batch_size, "minibatch size");
  tr->add_option("--seed", ta.seed, "experiment seed");
  tr->add_option("--steps", ta.steps, "optimizer steps");
  tr->add_option("--lr", ta.lr, "peak learning rate");
  tr->add_option("--checkpoint", ta.checkpoint,
                 "pretrained checkpoint (classify; default assets/classifier_<arch>.ckpt)");
  tr->add_option("--out", ta.out_path, "write the trained net here");
  tr->add_option("--record", ta.record_path, "write the training record csv");
  tr->add_option("--config", ta.config_path, "key=value optimizer overrides");
  tr->add_option("--batch-sizes", ta.batch_sizes, "bn-stats batch sizes");
  tr->add_flag("--no-stale", ta.no_stale,
               "classify: start from the checkpoint statistics unperturbed");

  // sparsity
  CLI::App* sp = app.add_subcommand(
      "sparsity", "post-relu sparsity of a trained classifier's last block");
  std::string sp_ckpt;
  std::uint64_t sp_seed = 1;
  sp->add_option("--checkpoint", sp_ckpt, "classifier checkpoint")->required();
  sp->add_option("--seed", sp_seed, "probe batch seed");

  // export-graph
  CLI::App* eg = app.add_subcommand(
      "export-graph", "print a fusion graph as text");
  std::string eg_neck = "fpn", eg_filters = "conv";
  int eg_levels = 3, eg_width = 16, eg_extra = 0;
  eg->add_option("--neck", eg_neck, "fpn, pafpn, pafpn-shortcut or rpafpn");
  eg->add_option("--filters", eg_filters, "conv or adder");
  eg->add_option("--levels", eg_levels, "pyramid levels")->check(CLI::Range(2, 5));
  eg->add_option("--width", eg_width, "channel width");
  eg->add_option("--extra", eg_extra, "extra stride-2 output levels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (threads > 0) set_num_threads(threads);
    if (gc->parsed()) return run_gradcheck(gc_seed, gc_csv, gc_div);
    if (en->parsed()) {
      return run_energy(en_spec, en_precision, en_convert, en_force_first,
                        en_csv);
    }
    if (tr->parsed()) return run_train(ta);
    if (sp->parsed()) return run_sparsity(sp_ckpt, sp_seed);
    if (eg->parsed()) {
      return run_export_graph(eg_neck, eg_filters, eg_levels, eg_width,
                              eg_extra);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
