// Command-line front end: synthetic data generation, DG/DA training,
// open-set evaluation, ablation/openness sweeps, and the gradient check.
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmosdg/harness.hpp"

namespace fs = std::filesystem;
using namespace mmosdg;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string seeds_csv;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_out) {
  cmd->add_option("--config", args.config_path, "experiment config (JSON)")
      ->required();
  auto* out = cmd->add_option("--out", args.out_dir, "output directory");
  if (needs_out) out->required();
  cmd->add_option_function<std::uint64_t>(
         "--seed",
         [&args](std::uint64_t v) {
           args.seed = v;
           args.seed_set = true;
         },
         "single seed (overrides the config seed list)");
  cmd->add_option("--seeds", args.seeds_csv,
                  "comma-separated seed list (overrides the config)");
}

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
  std::vector<std::uint64_t> seeds;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    std::size_t next = csv.find(',', pos);
    if (next == std::string::npos) next = csv.size();
    std::string tok = csv.substr(pos, next - pos);
    require(!tok.empty(), "--seeds: empty entry in '" + csv + "'");
    try {
      seeds.push_back(std::stoull(tok));
    } catch (const std::exception&) {
      throw validation_error("--seeds: cannot parse '" + tok + "'");
    }
    pos = next + 1;
  }
  return seeds;
}

ExperimentSpec load_spec(const CommonArgs& args) {
  ExperimentSpec spec = load_experiment_spec(args.config_path);
  if (args.seed_set) spec.seeds = {args.seed};
  if (!args.seeds_csv.empty()) spec.seeds = parse_seed_list(args.seeds_csv);
  spec.validate();
  return spec;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw io_error("cannot create directory '" + dir + "': " + ec.message());
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
  if (!out) throw io_error("failed while writing '" + path + "'");
}

void print_row(const ResultRow& r) {
  std::cout << "task=" << r.task << " seed=" << r.seed << " variant="
            << r.method_variant << " os_star=" << format_double(r.os_star)
            << " unk=" << format_double(r.unk)
            << " hos=" << format_double(r.hos) << '\n';
}

// pooled over tasks and seeds; NaN rows (no unknown samples) are skipped
struct HosSummary {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double median = std::numeric_limits<double>::quiet_NaN();
};

HosSummary summarize_hos(const std::vector<ResultRow>& rows,
                         const std::string& variant) {
  std::vector<double> vals;
  for (const ResultRow& r : rows)
    if (r.method_variant == variant && !std::isnan(r.hos))
      vals.push_back(r.hos);
  if (vals.empty()) return {};
  HosSummary out;
  out.mean = 0.0;
  for (double v : vals) out.mean += v;
  out.mean /= static_cast<double>(vals.size());
  std::sort(vals.begin(), vals.end());
  std::size_t n = vals.size();
  out.median = n % 2 == 1 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
  return out;
}

int cmd_gen_data(const CommonArgs& args) {
  ExperimentSpec spec = load_spec(args);
  require(!spec.from_manifests,
          "gen-data: the config already points at manifests");
  ensure_dir(args.out_dir);
  BenchmarkData bench = generate_benchmark(spec.data);
  for (std::size_t i = 0; i < bench.sources.size(); ++i) {
    std::string dir = args.out_dir + "/source_" + std::to_string(i);
    ensure_dir(dir);
    write_manifest(bench.sources[i], dir);
    std::cout << "wrote " << dir << "/manifest.json ("
              << bench.sources[i].samples.size() << " samples)\n";
  }
  std::string tdir = args.out_dir + "/target";
  ensure_dir(tdir);
  write_manifest(bench.target, tdir);
  std::cout << "wrote " << tdir << "/manifest.json ("
            << bench.target.samples.size() << " samples)\n";
  return 0;
}

int run_training(const CommonArgs& args, bool da) {
  ExperimentSpec spec = load_spec(args);
  ensure_dir(args.out_dir);
  std::uint64_t seed = spec.seeds.front();
  std::size_t task = spec.task_list().front();
  CellOutput cell = run_cell(spec, task, seed, spec.train, da);

  write_train_log(args.out_dir + "/train_log.csv", cell.train.history,
                  cell.data.train.meta.modality_dims.size());
  nlohmann::json extra = {{"seed", seed},
                          {"task", cell.data.name},
                          {"variant", cell.row.method_variant},
                          {"score_method", score_method_name(spec.score)},
                          {"threshold", spec.threshold},
                          {"selected_epoch", cell.train.history.selected_epoch}};
  save_checkpoint(cell.train.net, args.out_dir + "/checkpoint.mmck", extra);
  write_json(args.out_dir + "/report.json", eval_report_to_json(cell.report));
  if (!cell.report.hist_edges.empty())
    write_histogram_csv(args.out_dir + "/histogram.csv", cell.report);
  write_results_csv(args.out_dir + "/results.csv", {cell.row});
  print_row(cell.row);
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint,
             const std::string& grid_csv) {
  ExperimentSpec spec = load_spec(args);
  ensure_dir(args.out_dir);
  nlohmann::json extra;
  MultimodalNet net = load_checkpoint(checkpoint, &extra);
  std::uint64_t seed = spec.seeds.front();
  std::size_t task = spec.task_list().front();
  PreparedTask data = prepare_task(spec, task, seed);
  EvalReport rep = evaluate_target(net, data.train, data.target, spec.score,
                                   spec.threshold);
  write_json(args.out_dir + "/report.json", eval_report_to_json(rep));
  if (!rep.hist_edges.empty())
    write_histogram_csv(args.out_dir + "/histogram.csv", rep);

  ResultRow row;
  row.task = data.name;
  row.seed = seed;
  row.method_variant =
      extra.is_object() && extra.contains("variant")
          ? extra.at("variant").get<std::string>() + "_eval"
          : "eval";
  row.os_star = rep.os_star;
  if (rep.unk_present) {
    row.unk = rep.unk;
    row.hos = rep.hos;
  }
  row.threshold = spec.threshold;
  row.score_method = spec.score;
  write_results_csv(args.out_dir + "/results.csv", {row});
  print_row(row);

  if (!grid_csv.empty()) {
    std::vector<double> grid;
    std::size_t pos = 0;
    while (pos <= grid_csv.size()) {
      std::size_t next = grid_csv.find(',', pos);
      if (next == std::string::npos) next = grid_csv.size();
      std::string tok = grid_csv.substr(pos, next - pos);
      require(!tok.empty(), "--grid: empty entry in '" + grid_csv + "'");
      try {
        grid.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw validation_error("--grid: cannot parse '" + tok + "'");
      }
      pos = next + 1;
    }
    Graph g;
    std::vector<Matrix> mods = detail::dataset_matrices(data.target);
    std::vector<Tensor> embeds = net.encode_all(g, mods);
    Matrix logits = net.joint_logits(g, embeds).value;
    Matrix probs = net.predict_joint(g, embeds).value;
    Matrix emb = concat_cols(embeds).value;
    MahalanobisState maha;
    if (spec.score == ScoreMethod::kMahalanobis) {
      Graph gf;
      Matrix fit = concat_cols(net.encode_all(gf, detail::dataset_matrices(
                                                      data.train)))
                       .value;
      maha = fit_mahalanobis(fit, label_vector(data.train));
    }
    std::vector<double> scores = score_samples(logits, spec.score, &maha, &emb);
    ThresholdSweep sweep =
        threshold_sweep(probs, scores, label_vector(data.target),
                        static_cast<int>(net.config().n_classes), grid);
    std::ofstream out(args.out_dir + "/sweep.csv", std::ios::binary);
    if (!out) throw io_error("cannot open sweep.csv for writing");
    out << "threshold,os_star,unk,hos,best\n";
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const EvalReport& r = sweep.reports[i];
      out << format_double(sweep.thresholds[i]) << ','
          << format_double(r.os_star) << ','
          << format_double(r.unk_present
                               ? r.unk
                               : std::numeric_limits<double>::quiet_NaN())
          << ','
          << format_double(r.unk_present
                               ? r.hos
                               : std::numeric_limits<double>::quiet_NaN())
          << ',' << (i == sweep.best_index ? 1 : 0) << '\n';
    }
    std::cout << "best threshold "
              << format_double(sweep.thresholds[sweep.best_index]) << '\n';
  }
  return 0;
}

int cmd_sweep_ablation(const CommonArgs& args, bool da) {
  ExperimentSpec spec = load_spec(args);
  ensure_dir(args.out_dir);
  std::vector<ResultRow> rows = run_ablation(spec, da);
  write_results_csv(args.out_dir + "/results.csv", rows);
  for (const AblationRow& ab : ablation_ladder(spec.train)) {
    std::string name = ab.name + (da ? "_da" : "");
    HosSummary s = summarize_hos(rows, name);
    std::cout << "variant=" << name << " mean_hos=" << format_double(s.mean)
              << " median_hos=" << format_double(s.median) << '\n';
  }
  std::cout << "wrote " << args.out_dir << "/results.csv (" << rows.size()
            << " rows)\n";
  return 0;
}

int cmd_sweep_openness(const CommonArgs& args, bool da) {
  ExperimentSpec spec = load_spec(args);
  require(!spec.openness.empty(),
          "sweep-openness: config carries no 'openness' ratios");
  ensure_dir(args.out_dir);
  std::vector<ResultRow> rows = run_openness(spec, da);
  write_results_csv(args.out_dir + "/results.csv", rows);
  for (const ResultRow& r : rows) print_row(r);
  std::cout << "wrote " << args.out_dir << "/results.csv (" << rows.size()
            << " rows)\n";
  return 0;
}

int cmd_grad_check(std::uint64_t seed, std::size_t draws, double h,
                   double corruption) {
  GradCheckOptions opts;
  opts.seed = seed;
  opts.draws = draws;
  opts.h = h;
  opts.corruption = corruption;
  GradCheckReport rep =
      grad_check(grad_check_net_config(), grad_check_train_config(), opts);
  for (const auto& [group, err] : rep.per_group)
    std::cout << "group " << group << " max_rel_err " << format_double(err)
              << '\n';
  std::cout << "accepted " << rep.accepted << "/" << rep.attempts
            << " draws, max_rel_err " << format_double(rep.max_rel_err);
  if (!rep.worst_param.empty()) std::cout << " at " << rep.worst_param;
  std::cout << (rep.pass ? " PASS" : " FAIL") << '\n';
  if (!rep.pass)
    throw numeric_error("gradient check failed: max_rel_err " +
                        format_double(rep.max_rel_err) + " exceeds " +
                        format_double(opts.tolerance));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal open-set domain generalization/adaptation lab"};
  app.require_subcommand(1);

  CommonArgs gen_args, dg_args, da_args, eval_args, abl_args, open_args;
  std::string checkpoint, grid_csv;
  std::uint64_t gc_seed = 1;
  std::size_t gc_draws = 3;
  double gc_h = 1e-5, gc_corrupt = 0.0;
  bool abl_da = false, open_da = false;

  CLI::App* gen = app.add_subcommand("gen-data", "write synthetic benchmark manifests");
  add_common(gen, gen_args, /*needs_out=*/true);

  CLI::App* dg = app.add_subcommand("train-dg", "train for domain generalization");
  add_common(dg, dg_args, true);

  CLI::App* da = app.add_subcommand("train-da", "train with unlabeled target data");
  add_common(da, da_args, true);

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on the target");
  add_common(ev, eval_args, true);
  ev->add_option("--checkpoint", checkpoint, "checkpoint file (.mmck)")
      ->required();
  ev->add_option("--grid", grid_csv,
                 "comma-separated thresholds for a sweep (writes sweep.csv)");

  CLI::App* abl = app.add_subcommand("sweep-ablation", "run the 6-row toggle ladder");
  add_common(abl, abl_args, true);
  abl->add_flag("--da", abl_da, "use unlabeled target data (adaptation)");

  CLI::App* open = app.add_subcommand("sweep-openness", "sweep known:unknown ratios");
  add_common(open, open_args, true);
  open->add_flag("--da", open_da, "use unlabeled target data (adaptation)");

  CLI::App* gc = app.add_subcommand("grad-check",
                                    "finite-difference check of the objective");
  gc->add_option("--seed", gc_seed, "draw seed");
  gc->add_option("--draws", gc_draws, "accepted draws required");
  gc->add_option("--step", gc_h, "central-difference step");
  gc->add_option("--corrupt", gc_corrupt,
                 "offset one analytic gradient (negative control)");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen_data(gen_args);
    if (dg->parsed()) return run_training(dg_args, false);
    if (da->parsed()) return run_training(da_args, true);
    if (ev->parsed()) return cmd_eval(eval_args, checkpoint, grid_csv);
    if (abl->parsed()) return cmd_sweep_ablation(abl_args, abl_da);
    if (open->parsed()) return cmd_sweep_openness(open_args, open_da);
    if (gc->parsed()) return cmd_grad_check(gc_seed, gc_draws, gc_h, gc_corrupt);
    return 1;
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const validation_error& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return 1;
  } catch (const numeric_error& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 2;
  } catch (const io_error& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
