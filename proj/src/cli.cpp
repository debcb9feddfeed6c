#include "ms2d/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ms2d/data_pipeline.hpp"
#include "ms2d/scan_catalog.hpp"
#include "ms2d/segnet.hpp"
#include "ms2d/stats_bench.hpp"
#include "ms2d/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ms2d {

namespace {

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// Run manifest: written into the output directory before any long computation.
void write_manifest(const std::string& out_dir, const std::string& command, const json& config, std::uint64_t seed,
                    const std::vector<std::string>& outputs) {
  fs::create_directories(out_dir);
  json m;
  m["command"] = command;
  m["version"] = kVersion;
  m["seed"] = seed;
  m["timestamp"] = iso_timestamp();
  m["config"] = config;
  m["outputs"] = outputs;
  std::ofstream f(fs::path(out_dir) / "manifest.json");
  if (!f) throw std::runtime_error("cannot write manifest in " + out_dir);
  f << m.dump(2) << "\n";
}

struct TrainFlags {
  std::string data_dir, out_dir, config_file;
  int experiment = 1;
  int epochs = 30;
  int batch = 8;
  double lr0 = 1e-3;
  double lr_min = 1e-6;
  double weight_decay = 1e-2;
  std::uint64_t seed = 0;
  std::int64_t embed_dim = 16;
  int stages = 4;
  std::int64_t state_dim = 8;
  std::int64_t classes = 1;
  std::string loss = "bce_dice";
};

void add_train_flags(CLI::App* cmd, TrainFlags& f, bool with_experiment) {
  cmd->add_option("--data", f.data_dir, "dataset directory (gen-data layout)")->required();
  cmd->add_option("--out", f.out_dir, "output directory")->required();
  if (with_experiment) cmd->add_option("--experiment", f.experiment, "experiment id 1..21")->check(CLI::Range(1, 21));
  cmd->add_option("--epochs", f.epochs, "training epochs");
  cmd->add_option("--batch", f.batch, "batch size");
  cmd->add_option("--lr", f.lr0, "initial learning rate");
  cmd->add_option("--lr-min", f.lr_min, "final learning rate");
  cmd->add_option("--weight-decay", f.weight_decay, "decoupled weight decay");
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--embed-dim", f.embed_dim, "stage-1 channel width");
  cmd->add_option("--stages", f.stages, "number of resolution stages")->check(CLI::Range(1, 6));
  cmd->add_option("--state-dim", f.state_dim, "SSM state dimension N");
  cmd->add_option("--classes", f.classes, "output classes (1 = binary)");
  cmd->add_option("--loss", f.loss, "loss kind")->check(CLI::IsMember({"bce_dice", "ce_mdice"}));
  cmd->set_config("--config", "", "flat key=value config file (flags win)");
}

json train_flags_json(const TrainFlags& f) {
  json j;
  j["data"] = f.data_dir;
  j["experiment"] = f.experiment;
  j["epochs"] = f.epochs;
  j["batch"] = f.batch;
  j["lr"] = f.lr0;
  j["lr_min"] = f.lr_min;
  j["weight_decay"] = f.weight_decay;
  j["embed_dim"] = f.embed_dim;
  j["stages"] = f.stages;
  j["state_dim"] = f.state_dim;
  j["classes"] = f.classes;
  j["loss"] = f.loss;
  return j;
}

struct SplitDatasets {
  Dataset train, val, test;
  std::int64_t img_size = 0;
  std::int64_t in_channels = 0;
};

SplitDatasets load_split_datasets(const std::string& dir) {
  const LoadedDataset ds = load_dataset(dir);
  if (ds.cases.empty()) throw std::runtime_error("dataset is empty: " + dir);
  std::map<std::string, const PhantomCase*> by_id;
  for (const auto& c : ds.cases) by_id[c.case_id] = &c;
  auto to_set = [&](const std::vector<std::string>& ids) {
    Dataset out;
    for (const auto& id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw std::runtime_error("split references missing case " + id);
      out.push_back({it->second->image, it->second->mask});
    }
    return out;
  };
  SplitDatasets s;
  s.train = to_set(ds.split.train);
  s.val = to_set(ds.split.val);
  s.test = to_set(ds.split.test);
  s.in_channels = ds.cases.front().image.dim(0);
  s.img_size = ds.cases.front().image.dim(1);
  return s;
}

ModelConfig model_config_from_flags(const TrainFlags& f, const SplitDatasets& data) {
  ModelConfig cfg;
  cfg.img_size = data.img_size;
  cfg.in_channels = data.in_channels;
  cfg.encoder_depths.assign(static_cast<std::size_t>(f.stages), 2);
  cfg.decoder_depths.assign(static_cast<std::size_t>(f.stages), 2);
  cfg.decoder_depths.back() = 1;
  cfg.stage_channels.clear();
  for (int s = 0; s < f.stages; ++s) cfg.stage_channels.push_back(f.embed_dim << s);
  cfg.state_dim = f.state_dim;
  cfg.out_classes = f.classes;
  cfg.experiment_id = f.experiment;
  cfg.validate();
  return cfg;
}

TrainConfig train_config_from_flags(const TrainFlags& f) {
  TrainConfig tc;
  tc.lr0 = f.lr0;
  tc.lr_min = f.lr_min;
  tc.weight_decay = f.weight_decay;
  tc.batch_size = f.batch;
  tc.epochs = f.epochs;
  tc.loss_kind = f.loss == "ce_mdice" ? LossKind::CeMdice : LossKind::BceDice;
  tc.seed = f.seed;
  tc.validate();
  return tc;
}

std::vector<int> parse_experiment_list(const std::string& spec) {
  std::vector<int> ids;
  if (spec == "all") {
    for (int i = 1; i <= kNumExperiments; ++i) ids.push_back(i);
    return ids;
  }
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const int id = std::stoi(item);
    if (id < 1 || id > kNumExperiments) throw std::runtime_error("experiment id out of range: " + item);
    ids.push_back(id);
  }
  if (ids.empty()) throw std::runtime_error("no experiment ids in: " + spec);
  return ids;
}

// scores.csv rows: dataset,experiment,dice,miou
void read_scores_csv(const std::string& path, std::map<std::string, std::map<std::string, std::pair<double, double>>>& acc) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open scores file " + path);
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string dataset, experiment, dice_s, miou_s;
    std::getline(ss, dataset, ',');
    std::getline(ss, experiment, ',');
    std::getline(ss, dice_s, ',');
    std::getline(ss, miou_s, ',');
    if (dataset.empty() || experiment.empty() || dice_s.empty()) {
      throw std::runtime_error("malformed scores row: " + line);
    }
    acc[dataset][experiment] = {std::stod(dice_s), miou_s.empty() ? std::nan("") : std::stod(miou_s)};
  }
}

int cmd_gen_data(const PhantomSpec& spec, const std::string& out_dir) {
  json cfg;
  cfg["cases"] = spec.n_cases;
  cfg["size"] = spec.grid;
  cfg["min_lesions"] = spec.min_lesions;
  cfg["max_lesions"] = spec.max_lesions;
  cfg["eccentricity"] = spec.eccentricity;
  cfg["theta"] = spec.theta;
  cfg["texture"] = spec.texture_strength;
  cfg["noise"] = spec.noise_sigma;
  cfg["contrast"] = spec.contrast;
  write_manifest(out_dir, "gen-data", cfg, spec.seed, {"cases/", "split.csv"});

  const auto cases = generate_phantom(spec);
  std::vector<std::string> ids;
  for (const auto& c : cases) ids.push_back(c.case_id);
  const SplitAssignment split = subject_split(ids, spec.seed);
  write_dataset(out_dir, cases, split);
  std::cout << "wrote " << cases.size() << " cases to " << out_dir << " (train " << split.train.size() << ", val "
            << split.val.size() << ", test " << split.test.size() << ")\n";
  return 0;
}

int cmd_train(const TrainFlags& f) {
  const SplitDatasets data = load_split_datasets(f.data_dir);
  if (data.train.empty() || data.val.empty()) throw std::runtime_error("dataset has empty train or val split");
  write_manifest(f.out_dir, "train", train_flags_json(f), f.seed, {"checkpoint.mstn", "curve.csv"});

  const ModelConfig mc = model_config_from_flags(f, data);
  const TrainConfig tc = train_config_from_flags(f);
  ModelParams model = build_model(mc, tc.seed);
  std::cout << "experiment " << mc.experiment_id << ": " << count_params(model) << " params, " << count_flops(mc)
            << " flops/forward\n";
  TrainResult tr = train(model, data.train, data.val, tc);
  restore_values(model, tr.best_values);
  save_checkpoint(model, (fs::path(f.out_dir) / "checkpoint.mstn").string());
  write_curve_csv((fs::path(f.out_dir) / "curve.csv").string(), tr.curve);

  std::cout << std::fixed << std::setprecision(4);
  std::cout << "best epoch " << tr.best_epoch << ": val_loss " << tr.best_val_loss << "\n";
  if (!data.test.empty()) {
    const EvalResult ev = evaluate(model, data.test, tc.loss_kind);
    std::cout << "test: dice " << ev.dice << ", miou " << ev.miou << "\n";
  }
  return 0;
}

int cmd_matrix(const TrainFlags& f, const std::string& experiments, int jobs) {
  const SplitDatasets data = load_split_datasets(f.data_dir);
  json cfg = train_flags_json(f);
  cfg["experiments"] = experiments;
  cfg["jobs"] = jobs;
  write_manifest(f.out_dir, "matrix", cfg, f.seed, {"scores.csv"});

  MatrixRunConfig mrc;
  mrc.base = model_config_from_flags(f, data);
  mrc.train = train_config_from_flags(f);
  mrc.experiments = parse_experiment_list(experiments);
  mrc.out_dir = f.out_dir;
  if (const char* env = std::getenv("MS2D_THREADS")) {
    jobs = std::max(1, std::atoi(env));  // env var overrides the flag
  }
  mrc.jobs = jobs;

  const MatrixRunResult r = run_matrix(mrc, data.train, data.val, data.test, "phantom");
  write_scores_csv((fs::path(f.out_dir) / "scores.csv").string(), r.dice, r.miou);
  std::cout << std::fixed << std::setprecision(4);
  for (std::int64_t j = 0; j < r.dice.treatments(); ++j) {
    std::cout << r.dice.experiments[static_cast<std::size_t>(j)] << ": dice " << r.dice.scores(0, j) << ", miou "
              << r.miou.scores(0, j) << "\n";
  }
  return 0;
}

int cmd_analyze(const std::vector<std::string>& score_files, const std::string& fixture, const std::string& out_dir) {
  ScoreMatrix dice;
  std::optional<ScoreMatrix> miou;
  if (!fixture.empty()) {
    if (fixture != "table2") throw std::runtime_error("unknown fixture: " + fixture);
    dice = table2_dice();
    miou = table2_miou();
  } else {
    if (score_files.empty()) throw std::runtime_error("analyze needs --scores or --fixture");
    std::map<std::string, std::map<std::string, std::pair<double, double>>> acc;
    for (const auto& p : score_files) read_scores_csv(p, acc);
    std::vector<std::string> experiments;
    for (const auto& [ds, row] : acc) {
      if (experiments.empty()) {
        for (const auto& [e, v] : row) experiments.push_back(e);
      } else {
        std::vector<std::string> exps;
        for (const auto& [e, v] : row) exps.push_back(e);
        if (exps != experiments) throw std::runtime_error("datasets disagree on experiment sets");
      }
    }
    dice.experiments = experiments;
    bool have_miou = true;
    std::vector<std::vector<double>> dice_rows, miou_rows;
    for (const auto& [ds, row] : acc) {
      dice.datasets.push_back(ds);
      std::vector<double> dr, mr;
      for (const auto& e : experiments) {
        dr.push_back(row.at(e).first);
        mr.push_back(row.at(e).second);
        if (std::isnan(row.at(e).second)) have_miou = false;
      }
      dice_rows.push_back(dr);
      miou_rows.push_back(mr);
    }
    dice.scores = Tensor({static_cast<std::int64_t>(dice_rows.size()), static_cast<std::int64_t>(experiments.size())});
    for (std::size_t b = 0; b < dice_rows.size(); ++b)
      for (std::size_t j = 0; j < experiments.size(); ++j)
        dice.scores(static_cast<std::int64_t>(b), static_cast<std::int64_t>(j)) = dice_rows[b][j];
    if (have_miou) {
      ScoreMatrix mi = dice;
      for (std::size_t b = 0; b < miou_rows.size(); ++b)
        for (std::size_t j = 0; j < experiments.size(); ++j)
          mi.scores(static_cast<std::int64_t>(b), static_cast<std::int64_t>(j)) = miou_rows[b][j];
      miou = mi;
    }
  }

  json cfg;
  cfg["fixture"] = fixture;
  cfg["scores"] = score_files;
  write_manifest(out_dir, "analyze", cfg, 0,
                 {"scores.csv", "friedman.json", "leaderboard.md", "dice_by_experiment.csv"});

  const SummaryReport rep = summarize(dice, miou);
  write_scores_csv((fs::path(out_dir) / "scores.csv").string(), dice, miou);
  write_leaderboard_md((fs::path(out_dir) / "leaderboard.md").string(), rep);
  write_dice_by_experiment_csv((fs::path(out_dir) / "dice_by_experiment.csv").string(), dice);

  std::cout << std::fixed;
  if (rep.friedman.has_value()) {
    write_friedman_json((fs::path(out_dir) / "friedman.json").string(), *rep.friedman);
    std::cout << "friedman: chi2 " << std::setprecision(2) << rep.friedman->chi2 << ", df " << rep.friedman->df
              << ", p " << std::setprecision(4) << rep.friedman->p << "\n";
    std::cout << "mean ranks (best first):";
    for (std::size_t i = 0; i < std::min<std::size_t>(4, rep.leaderboard.size()); ++i) {
      std::cout << (i ? "," : "") << " " << rep.leaderboard[i] << " = " << std::setprecision(2)
                << rep.leaderboard_ranks[i];
    }
    std::cout << "\n";
  } else {
    std::cout << "friedman: skipped (needs >= 2 datasets)\n";
  }
  std::cout << std::setprecision(3);
  for (const auto& d : rep.per_dataset) {
    std::cout << d.dataset << ": best " << d.best_experiment << " " << d.best_score << ", worst " << d.worst_experiment
              << " " << d.worst_score << ", delta " << d.delta << "\n";
  }
  return 0;
}

int cmd_scan_dump(const std::string& grid, const std::string& out_file) {
  const auto x = grid.find('x');
  if (x == std::string::npos) throw std::runtime_error("--grid expects HxW, got " + grid);
  GridShape g;
  g.rows = std::stoll(grid.substr(0, x));
  g.cols = std::stoll(grid.substr(x + 1));
  const std::string csv = scan_dump_csv(g);
  if (out_file.empty()) {
    std::cout << csv;
  } else {
    std::ofstream f(out_file);
    if (!f) throw std::runtime_error("cannot open " + out_file);
    f << csv;
  }
  return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"multi-scan state-space segmentation workbench"};
  app.require_subcommand(1);

  // gen-data
  PhantomSpec spec;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic phantom dataset");
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--cases", spec.n_cases, "number of cases");
  gen->add_option("--size", spec.grid, "image size in pixels");
  gen->add_option("--min-lesions", spec.min_lesions, "minimum lesions per case");
  gen->add_option("--max-lesions", spec.max_lesions, "maximum lesions per case");
  gen->add_option("--eccentricity", spec.eccentricity, "lesion eccentricity in [0,1)");
  gen->add_option("--theta", spec.theta, "principal-axis angle in [0,pi)");
  gen->add_option("--texture", spec.texture_strength, "background texture strength");
  gen->add_option("--noise", spec.noise_sigma, "noise sigma");
  gen->add_option("--contrast", spec.contrast, "minimum lesion/background contrast");
  gen->add_option("--seed", spec.seed, "generator seed");

  // train
  TrainFlags tf;
  auto* trn = app.add_subcommand("train", "train one experiment");
  add_train_flags(trn, tf, true);

  // matrix
  TrainFlags mf;
  std::string experiments = "all";
  int jobs = 1;
  auto* mtx = app.add_subcommand("matrix", "run a set of experiments and collect scores");
  add_train_flags(mtx, mf, false);
  mtx->add_option("--experiments", experiments, "comma list of ids, or 'all'");
  mtx->add_option("--jobs", jobs, "concurrent experiments (MS2D_THREADS overrides)");

  // analyze
  std::vector<std::string> score_files;
  std::string fixture, analyze_out = ".";
  auto* ana = app.add_subcommand("analyze", "rank statistics and reports from score tables");
  ana->add_option("--scores", score_files, "scores.csv files (dataset,experiment,dice,miou)");
  ana->add_option("--fixture", fixture, "embedded fixture name (table2)");
  ana->add_option("--out", analyze_out, "report output directory");

  // scan-dump
  std::string grid, dump_out;
  auto* dmp = app.add_subcommand("scan-dump", "emit the scan catalogue for a grid as CSV");
  dmp->add_option("--grid", grid, "grid as HxW, e.g. 3x3")->required();
  dmp->add_option("--out", dump_out, "write CSV here instead of stdout");

  std::vector<const char*> argv;
  argv.push_back("ms2d");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) return cmd_gen_data(spec, gen_out);
    if (trn->parsed()) return cmd_train(tf);
    if (mtx->parsed()) return cmd_matrix(mf, experiments, jobs);
    if (ana->parsed()) return cmd_analyze(score_files, fixture, analyze_out);
    if (dmp->parsed()) return cmd_scan_dump(grid, dump_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace ms2d
