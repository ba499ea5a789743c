// Command-line driver for the compression pipeline.
//
// Every subcommand works inside a run directory. Stage outputs are plain
// files there, so stages can be run one by one or all at once:
//   data_*.bin      dataset split cache
//   teacher.ckpt    pretrained generator + discriminator
//   search.ckpt     searched weights and mask inputs
//   plan.txt        kept filters per layer
//   student.ckpt    compact generator (+ its discriminator)
//   metrics.csv     per-iteration losses of every stage run so far
//
// Exit codes: 0 success, 1 usage or input error, 2 divergence, 3 target_missed.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dmad/checkpoint.hpp"
#include "dmad/log.hpp"
#include "dmad/pipeline.hpp"

namespace fs = std::filesystem;
using namespace dmad;

namespace {

constexpr int kExitError = 1;
constexpr int kExitDivergence = 2;
constexpr int kExitTargetMissed = 3;

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string run_dir = "run";
  bool quiet = false;
  bool verbose = false;
};

TrainConfig make_config(const Options& o) {
  TrainConfig cfg;
  if (!o.config_path.empty()) cfg = load_config(o.config_path);
  std::string extra;
  for (const auto& kv : o.overrides) extra += kv + "\n";
  return parse_config(extra, cfg);
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("missing " + p.string() + " (run the previous stage first)");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text, bool append = false) {
  std::ofstream out(p, append ? std::ios::app : std::ios::trunc);
  if (!out) throw FormatError("cannot write " + p.string());
  out << text;
}

Dataset dataset_for(const TrainConfig& cfg, const fs::path& dir) {
  const std::string tag = std::to_string(cfg.data_seed) + "_" + std::to_string(cfg.n_train) + "_" +
                          std::to_string(cfg.n_test);
  const fs::path train = dir / ("data_" + tag + "_train.bin");
  const fs::path test = dir / ("data_" + tag + "_test.bin");
  if (fs::exists(train) && fs::exists(test)) return {load_split(train), load_split(test)};
  auto data = generate_dataset(cfg.data_seed, cfg.n_train, cfg.n_test);
  save_split(data.train, train);
  save_split(data.test, test);
  return data;
}

void append_metrics(const fs::path& dir, const RunMetrics& m, bool fresh) {
  write_text(dir / "metrics.csv", metrics_csv(m.rows, fresh), !fresh);
}

void print_timings(const RunMetrics& m) {
  for (const auto& t : m.timings) {
    log_info("stage " + t.stage + ": " + std::to_string(t.iterations) + " iterations in " +
             std::to_string(t.seconds) + " s");
  }
}

std::string eval_line(const char* who, const Evaluation& e) {
  std::ostringstream os;
  os << who << ": toy_frechet=" << e.frechet << " l1=" << e.l1;
  return os.str();
}

int cmd_pretrain(const Options& o) {
  const auto cfg = make_config(o);
  const fs::path dir = o.run_dir;
  const auto data = dataset_for(cfg, dir);
  RunMetrics m;
  const auto teacher = pretrain_teacher(cfg, data, m);
  save_teacher(teacher, dir / "teacher.ckpt");
  write_text(dir / "config.txt", config_to_text(cfg));
  append_metrics(dir, m, true);
  print_timings(m);
  std::cout << eval_line("teacher", evaluate(teacher.g_spec, teacher.g, data.test)) << '\n';
  return 0;
}

int cmd_search(const Options& o) {
  const auto cfg = make_config(o);
  const fs::path dir = o.run_dir;
  const auto data = dataset_for(cfg, dir);
  const auto teacher = load_teacher(cfg, dir / "teacher.ckpt");
  RunMetrics m;
  const auto result = search_architecture(teacher, cfg, data, m);
  save_search(result, dir / "search.ckpt");
  write_text(dir / "plan.txt", plan_to_text(result.plan));
  append_metrics(dir, m, false);
  print_timings(m);
  std::cout << "search: " << result.iterations_run << " iterations, MACs reduction " << result.compression
            << "x (target " << cfg.target_compression << "x)" << (result.early_stopped ? ", stopped early" : "")
            << '\n';
  if (result.target_missed) {
    std::cout << "target_missed\n";
    return kExitTargetMissed;
  }
  return 0;
}

int cmd_prune(const Options& o) {
  const auto cfg = make_config(o);
  const fs::path dir = o.run_dir;
  const auto teacher = load_teacher(cfg, dir / "teacher.ckpt");
  const auto search = load_search(cfg, dir / "search.ckpt");
  const auto student = prune_student(teacher, search, cfg);
  save_student(student, dir / "student.ckpt");
  write_text(dir / "plan.txt", plan_to_text(search.plan));
  const auto arch = architecture_report(student.spec, &teacher.g_spec);
  write_text(dir / "architecture.txt", arch);
  const auto report = compression_report(teacher.g_spec, student.spec);
  std::cout << "MACs " << report.original.macs << " -> " << report.compact.macs << " (" << report.macs_ratio
            << "x), params " << report.original.params << " -> " << report.compact.params << " ("
            << report.params_ratio << "x)\n";
  return 0;
}

int cmd_distill(const Options& o) {
  const auto cfg = make_config(o);
  const fs::path dir = o.run_dir;
  const auto data = dataset_for(cfg, dir);
  const auto teacher = load_teacher(cfg, dir / "teacher.ckpt");
  const auto plan = plan_from_text(read_text(dir / "plan.txt"));
  auto student = load_student(cfg, plan, dir / "student.ckpt");
  {
    // A fresh discriminator for the student, as at the start of finetuning.
    Rng rd = Rng(cfg.seed).split("student.d");
    student.d = init_params<float>(discriminator_spec(cfg), rd);
  }
  RunMetrics m;
  finetune_student(teacher, student, cfg, data, m);
  save_student(student, dir / "student.ckpt");
  append_metrics(dir, m, false);
  print_timings(m);
  std::cout << eval_line("student", evaluate(student.spec, student.g, data.test)) << '\n';
  return 0;
}

int cmd_eval(const Options& o) {
  const auto cfg = make_config(o);
  const fs::path dir = o.run_dir;
  const auto data = dataset_for(cfg, dir);
  const auto teacher = load_teacher(cfg, dir / "teacher.ckpt");
  const auto te = evaluate(teacher.g_spec, teacher.g, data.test);
  std::cout << eval_line("teacher", te) << '\n';
  if (fs::exists(dir / "student.ckpt") && fs::exists(dir / "plan.txt")) {
    const auto plan = plan_from_text(read_text(dir / "plan.txt"));
    const auto student = load_student(cfg, plan, dir / "student.ckpt");
    std::cout << eval_line("student", evaluate(student.spec, student.g, data.test)) << '\n';
  }
  return 0;
}

int cmd_report(const Options& o, int grid_samples) {
  const auto cfg = make_config(o);
  const fs::path dir = o.run_dir;
  const fs::path out = dir / "report";
  fs::create_directories(out);
  const auto data = dataset_for(cfg, dir);
  const auto teacher = load_teacher(cfg, dir / "teacher.ckpt");
  const auto plan = plan_from_text(read_text(dir / "plan.txt"));
  const auto student = load_student(cfg, plan, dir / "student.ckpt");

  write_text(out / "metrics.csv", read_text(dir / "metrics.csv"));
  write_text(out / "architecture.txt", architecture_report(student.spec, &teacher.g_spec));

  const int n = std::min<int>(grid_samples, static_cast<int>(data.test.size()));
  const std::vector<SamplePair> subset(data.test.begin(), data.test.begin() + n);
  const auto t_out = translate(teacher.g_spec, teacher.g, subset);
  const auto s_out = translate(student.spec, student.g, subset);
  std::vector<Image> cells;
  for (int i = 0; i < n; ++i) {
    cells.push_back(subset[i].x);
    cells.push_back(t_out[i]);
    cells.push_back(s_out[i]);
    cells.push_back(subset[i].y);
  }
  write_ppm(image_grid(cells, n, 4), out / "grid.ppm");

  const auto te = evaluate(teacher.g_spec, teacher.g, data.test);
  const auto se = evaluate(student.spec, student.g, data.test);
  const auto cr = compression_report(teacher.g_spec, student.spec);
  std::ostringstream os;
  os << eval_line("teacher", te) << '\n'
     << eval_line("student", se) << '\n'
     << "macs " << cr.original.macs << " -> " << cr.compact.macs << " (" << cr.macs_ratio << "x)\n"
     << "params " << cr.original.params << " -> " << cr.compact.params << " (" << cr.params_ratio << "x)\n"
     << "residual stream pruning rate " << residual_prune_rate(teacher.g_spec, plan) << '\n';
  write_text(out / "summary.txt", os.str());
  std::cout << os.str() << "report written to " << out.string() << '\n';
  return 0;
}

int cmd_run_all(const Options& o) {
  const auto cfg = make_config(o);
  const fs::path dir = o.run_dir;
  const auto data = dataset_for(cfg, dir);
  write_text(dir / "config.txt", config_to_text(cfg));
  auto r = run_all(cfg, data);
  save_teacher(r.teacher, dir / "teacher.ckpt");
  save_search(r.search, dir / "search.ckpt");
  write_text(dir / "plan.txt", plan_to_text(r.search.plan));
  save_student(r.student, dir / "student.ckpt");
  write_text(dir / "architecture.txt", architecture_report(r.student.spec, &r.teacher.g_spec));
  append_metrics(dir, r.metrics, true);
  write_text(dir / "summary.json", summary_json(r.metrics));
  print_timings(r.metrics);
  const auto& m = r.metrics;
  std::cout << "teacher: toy_frechet=" << m.teacher_frechet << " l1=" << m.teacher_l1 << '\n'
            << "student: toy_frechet=" << m.student_frechet << " l1=" << m.student_l1 << '\n'
            << "MACs reduction " << m.macs_ratio << "x, params reduction " << m.params_ratio << "x\n";
  if (m.target_missed) {
    std::cout << "target_missed\n";
    return kExitTargetMissed;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable-mask GAN compression with co-attention distillation"};
  app.require_subcommand(1);
  Options o;
  app.add_option("-c,--config", o.config_path, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("-s,--set", o.overrides, "override one config key, e.g. --set seed=3");
  app.add_option("-d,--run-dir", o.run_dir, "directory holding stage outputs");
  app.add_flag("-q,--quiet", o.quiet, "suppress warnings");
  app.add_flag("-v,--verbose", o.verbose, "print stage timings");
  int grid_samples = 8;

  auto* pretrain = app.add_subcommand("pretrain", "train the teacher GAN");
  auto* search = app.add_subcommand("search", "mask search on a copy of the teacher");
  auto* prune = app.add_subcommand("prune", "derive the compact student from the search");
  auto* distill = app.add_subcommand("distill", "finetune the student with distillation");
  auto* eval = app.add_subcommand("eval", "toy Frechet and L1 on the held-out split");
  auto* report = app.add_subcommand("report", "metrics CSV, qualitative grid and architecture report");
  report->add_option("--samples", grid_samples, "rows in the qualitative grid")->check(CLI::PositiveNumber);
  auto* run_all_cmd = app.add_subcommand("run-all", "every stage in order");
  for (auto* sub : {pretrain, search, prune, distill, eval, report, run_all_cmd}) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);
  log_level() = o.quiet ? LogLevel::Quiet : (o.verbose ? LogLevel::Info : LogLevel::Warn);

  try {
    fs::create_directories(o.run_dir);
    if (*pretrain) return cmd_pretrain(o);
    if (*search) return cmd_search(o);
    if (*prune) return cmd_prune(o);
    if (*distill) return cmd_distill(o);
    if (*eval) return cmd_eval(o);
    if (*report) return cmd_report(o, grid_samples);
    if (*run_all_cmd) return cmd_run_all(o);
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}
