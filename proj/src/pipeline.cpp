#include "dmad/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "dmad/adam.hpp"
#include "dmad/checkpoint.hpp"
#include "dmad/log.hpp"
#include "json.hpp"

namespace dmad {

// ---- config -------------------------------------------------------------------

std::int64_t TrainConfig::stage_iterations(const std::string& stage) const {
  std::int64_t v = -1;
  if (stage == "pretrain") v = pretrain_iterations;
  else if (stage == "search") v = search_iterations;
  else if (stage == "finetune") v = finetune_iterations;
  else throw ConfigError("unknown stage '" + stage + "'");
  return v >= 0 ? v : iterations;
}

void validate(const TrainConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(c.iterations >= 0, "iterations must be >= 0");
  require(c.batch_size >= 1, "batch_size must be >= 1");
  require(c.learning_rate > 0 && c.mask_learning_rate > 0, "learning rates must be > 0");
  require(c.lambda_spe >= 0 && c.lambda_spa >= 0 && c.lambda_coatt >= 0 && c.lambda_fea >= 0,
          "all lambda coefficients must be >= 0");
  require(c.target_compression > 1.0, "target_compression must be > 1");
  require(c.discriminator_width >= 4 && c.discriminator_width <= 128, "discriminator_width must be in [4, 128]");
  require(c.generator_width >= 4, "generator_width must be >= 4");
  require(c.residual_blocks >= 1, "residual_blocks must be >= 1");
  require(c.n_train >= 1 && c.n_test >= 1, "n_train and n_test must be >= 1");
  require(c.d_tap_count >= 0 && c.d_tap_count <= 4, "d_tap_count must be in [0, 4]");
  require(c.log_every >= 1, "log_every must be >= 1");
  require(std::isfinite(c.p_init), "p_init must be finite");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out{};
  in >> out;
  if (!in || !in.eof()) throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + value + "'");
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

TrainConfig parse_config(const std::string& text, TrainConfig c) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (key == "iterations") c.iterations = parse_number<std::int64_t>(key, v);
    else if (key == "pretrain_iterations") c.pretrain_iterations = parse_number<std::int64_t>(key, v);
    else if (key == "search_iterations") c.search_iterations = parse_number<std::int64_t>(key, v);
    else if (key == "finetune_iterations") c.finetune_iterations = parse_number<std::int64_t>(key, v);
    else if (key == "batch_size") c.batch_size = parse_number<int>(key, v);
    else if (key == "learning_rate") c.learning_rate = parse_number<double>(key, v);
    else if (key == "mask_learning_rate") c.mask_learning_rate = parse_number<double>(key, v);
    else if (key == "mask_optimizer") {
      if (v == "sgd") c.mask_optimizer = MaskOptimizer::Sgd;
      else if (v == "adam") c.mask_optimizer = MaskOptimizer::Adam;
      else throw ConfigError("mask_optimizer must be sgd or adam, got '" + v + "'");
    } else if (key == "lambda_spe") c.lambda_spe = parse_number<double>(key, v);
    else if (key == "lambda_spa") c.lambda_spa = parse_number<double>(key, v);
    else if (key == "lambda_coatt") c.lambda_coatt = parse_number<double>(key, v);
    else if (key == "lambda_fea") c.lambda_fea = parse_number<double>(key, v);
    else if (key == "target_compression") c.target_compression = parse_number<double>(key, v);
    else if (key == "gan_loss_kind") c.gan_loss_kind = parse_gan_loss_kind(v);
    else if (key == "task_kind") c.task_kind = parse_task_kind(v);
    else if (key == "discriminator_width") c.discriminator_width = parse_number<int>(key, v);
    else if (key == "generator_width") c.generator_width = parse_number<int>(key, v);
    else if (key == "residual_blocks") c.residual_blocks = parse_number<int>(key, v);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "data_seed") c.data_seed = parse_number<std::uint64_t>(key, v);
    else if (key == "n_train") c.n_train = parse_number<int>(key, v);
    else if (key == "n_test") c.n_test = parse_number<int>(key, v);
    else if (key == "group_sparsity") c.group_sparsity = parse_bool(key, v);
    else if (key == "mask_kind") c.mask_kind = parse_mask_kind(v);
    else if (key == "p_init") c.p_init = parse_number<double>(key, v);
    else if (key == "d_tap_count") c.d_tap_count = parse_number<int>(key, v);
    else if (key == "student_init") {
      if (v == "inherit") c.student_init = StudentInit::Inherit;
      else if (v == "scratch") c.student_init = StudentInit::Scratch;
      else throw ConfigError("student_init must be inherit or scratch, got '" + v + "'");
    } else if (key == "early_stop") c.early_stop = parse_bool(key, v);
    else if (key == "log_every") c.log_every = parse_number<int>(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  validate(c);
  return c;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), base);
}

std::string config_to_text(const TrainConfig& c) {
  std::ostringstream os;
  os << "iterations = " << c.iterations << '\n'
     << "pretrain_iterations = " << c.pretrain_iterations << '\n'
     << "search_iterations = " << c.search_iterations << '\n'
     << "finetune_iterations = " << c.finetune_iterations << '\n'
     << "batch_size = " << c.batch_size << '\n'
     << "learning_rate = " << fmt(c.learning_rate) << '\n'
     << "mask_learning_rate = " << fmt(c.mask_learning_rate) << '\n'
     << "mask_optimizer = " << (c.mask_optimizer == MaskOptimizer::Adam ? "adam" : "sgd") << '\n'
     << "lambda_spe = " << fmt(c.lambda_spe) << '\n'
     << "lambda_spa = " << fmt(c.lambda_spa) << '\n'
     << "lambda_coatt = " << fmt(c.lambda_coatt) << '\n'
     << "lambda_fea = " << fmt(c.lambda_fea) << '\n'
     << "target_compression = " << fmt(c.target_compression) << '\n'
     << "gan_loss_kind = " << to_string(c.gan_loss_kind) << '\n'
     << "task_kind = " << to_string(c.task_kind) << '\n'
     << "discriminator_width = " << c.discriminator_width << '\n'
     << "generator_width = " << c.generator_width << '\n'
     << "residual_blocks = " << c.residual_blocks << '\n'
     << "seed = " << c.seed << '\n'
     << "data_seed = " << c.data_seed << '\n'
     << "n_train = " << c.n_train << '\n'
     << "n_test = " << c.n_test << '\n'
     << "group_sparsity = " << (c.group_sparsity ? "true" : "false") << '\n'
     << "mask_kind = " << to_string(c.mask_kind) << '\n'
     << "p_init = " << fmt(c.p_init) << '\n'
     << "d_tap_count = " << c.d_tap_count << '\n'
     << "student_init = " << (c.student_init == StudentInit::Scratch ? "scratch" : "inherit") << '\n'
     << "early_stop = " << (c.early_stop ? "true" : "false") << '\n'
     << "log_every = " << c.log_every << '\n';
  return os.str();
}

double learning_rate_at(double base, std::int64_t e, std::int64_t total) {
  if (total <= 0) return base;
  const double frac = std::clamp(double(e) / double(total), 0.0, 1.0);
  return base * (1.0 - frac);
}

// ---- metrics ------------------------------------------------------------------

std::string format_row(const MetricsRow& r) {
  std::string s = std::to_string(r.iter) + "," + r.stage;
  for (double v : {r.l_gan, r.l_spe, r.l_spa, r.l_coatt, r.l_fea, r.total, r.sparsity, r.boundary}) s += "," + fmt(v);
  return s;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows, bool header) {
  std::string out;
  if (header) out += std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) out += format_row(r) + "\n";
  return out;
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<MetricsRow> rows;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first && line == kMetricsHeader) {
      first = false;
      continue;
    }
    first = false;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 10) throw FormatError("metrics row has " + std::to_string(f.size()) + " fields: " + line);
    MetricsRow r;
    r.iter = std::stoll(f[0]);
    r.stage = f[1];
    double* dst[] = {&r.l_gan, &r.l_spe, &r.l_spa, &r.l_coatt, &r.l_fea, &r.total, &r.sparsity, &r.boundary};
    for (int i = 0; i < 8; ++i) *dst[i] = std::stod(f[2 + i]);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string summary_json(const RunMetrics& m) {
  nlohmann::ordered_json j;
  for (const auto& t : m.timings) j["stage_seconds"][t.stage] = t.seconds;
  for (const auto& t : m.timings) j["stage_iterations"][t.stage] = t.iterations;
  j["original_macs"] = m.original_macs;
  j["compact_macs"] = m.compact_macs;
  j["original_params"] = m.original_params;
  j["compact_params"] = m.compact_params;
  j["macs_ratio"] = m.macs_ratio;
  j["params_ratio"] = m.params_ratio;
  j["teacher_frechet"] = m.teacher_frechet;
  j["teacher_l1"] = m.teacher_l1;
  j["student_frechet"] = m.student_frechet;
  j["student_l1"] = m.student_l1;
  j["residual_prune_rate"] = m.residual_prune_rate;
  j["final_sparsity"] = m.final_sparsity;
  j["early_stopped"] = m.early_stopped;
  j["target_missed"] = m.target_missed;
  j["search_iterations_run"] = m.search_iterations_run;
  return j.dump(2) + "\n";
}

// ---- models -------------------------------------------------------------------

ModelSpec generator_spec(const TrainConfig& cfg) {
  return build_generator(cfg.generator_width, cfg.residual_blocks, kImageSize, kImageChannels);
}

ModelSpec discriminator_spec(const TrainConfig& cfg) {
  const int in = cfg.task_kind == TaskKind::PairedL1 ? 2 * kImageChannels : kImageChannels;
  return build_discriminator(cfg.discriminator_width, 4, in, kImageSize);
}

GanPair init_teacher(const TrainConfig& cfg) {
  GanPair t;
  t.g_spec = generator_spec(cfg);
  t.d_spec = discriminator_spec(cfg);
  Rng root(cfg.seed);
  Rng rg = root.split("teacher.g"), rd = root.split("teacher.d");
  t.g = init_params<float>(t.g_spec, rg);
  t.d = init_params<float>(t.d_spec, rd);
  if (cfg.task_kind == TaskKind::Cycle) {
    Rng rg2 = root.split("teacher.g2"), rd2 = root.split("teacher.d2");
    t.g2 = init_params<float>(t.g_spec, rg2);
    t.d2 = init_params<float>(t.d_spec, rd2);
  }
  return t;
}

Tensor<float> discriminator_input(const TrainConfig& cfg, const Tensor<float>& x, const Tensor<float>& image) {
  return cfg.task_kind == TaskKind::PairedL1 ? concat_channels(x, image) : image;
}

BatchFeed::BatchFeed(const std::vector<SamplePair>& split, int batch_size, Rng rng)
    : split_(&split), batch_(batch_size), rng_x_(rng.split("x")), rng_y_(rng.split("y")) {
  if (split.empty()) throw DataError("cannot draw batches from an empty split");
}

std::vector<std::size_t> BatchFeed::order(std::vector<std::size_t>& perm, std::size_t& pos, Rng& rng) {
  std::vector<std::size_t> out;
  while (out.size() < std::size_t(batch_)) {
    if (pos == perm.size()) {
      perm.resize(split_->size());
      std::iota(perm.begin(), perm.end(), std::size_t(0));
      for (std::size_t i = perm.size(); i > 1; --i) {
        std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(0, std::int64_t(i) - 1))]);
      }
      pos = 0;
    }
    out.push_back(perm[pos++]);
  }
  return out;
}

void BatchFeed::next(Tensor<float>& x, Tensor<float>& y, bool unpaired) {
  const auto ix = order(perm_x_, pos_x_, rng_x_);
  const auto iy = unpaired ? order(perm_y_, pos_y_, rng_y_) : ix;
  std::vector<const Image*> xs, ys;
  for (auto i : ix) xs.push_back(&(*split_)[i].x);
  for (auto i : iy) ys.push_back(&(*split_)[i].y);
  x = stack_images(xs);
  y = stack_images(ys);
}

// ---- stage helpers ------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;
constexpr const MaskBank<float>* kNoMasks = nullptr;

void clear_grads(ParamStore<float>& p) {
  for (auto& [name, t] : p.entries()) t.clear_grad();
}

ParamStore<float> frozen_copy(const ParamStore<float>& p) {
  auto out = p.clone();
  for (auto& [name, t] : out.entries()) t.set_requires_grad(false);
  return out;
}

void check_finite(double v, const std::string& stage, std::int64_t iter, const char* what) {
  if (!std::isfinite(v)) {
    throw DivergenceError(stage + " diverged at iteration " + std::to_string(iter) + ": " + what + " = " +
                          std::to_string(v));
  }
}

void step_or_diverge(Adam<float>& opt, ParamStore<float>& params, const std::string& stage, std::int64_t iter) {
  try {
    opt.step(params);
  } catch (const StateError& e) {
    throw DivergenceError(stage + " diverged at iteration " + std::to_string(iter) + ": " + e.what());
  }
}

/// One discriminator update on real vs detached fake.
double discriminator_step(const TrainConfig& cfg, const ModelSpec& d_spec, ParamStore<float>& d, Adam<float>& opt,
                          const Tensor<float>& real_in, const Tensor<float>& fake_in, const std::string& stage,
                          std::int64_t iter) {
  clear_grads(d);
  const auto loss = discriminator_gan_loss(forward(d_spec, d, real_in), forward(d_spec, d, fake_in.detach()),
                                           cfg.gan_loss_kind);
  check_finite(loss.item(), stage, iter, "discriminator loss");
  backward(loss);
  step_or_diverge(opt, d, stage, iter);
  return loss.item();
}

struct StageClock {
  RunMetrics& m;
  std::string stage;
  std::int64_t iterations = 0;
  Clock::time_point start = Clock::now();
  ~StageClock() {
    m.timings.push_back({stage, std::chrono::duration<double>(Clock::now() - start).count(), iterations});
  }
};

bool should_log(const TrainConfig& cfg, std::int64_t e, std::int64_t total) {
  return e % cfg.log_every == 0 || e + 1 == total;
}

void sgd_step(Tensor<float>& p, double lr, const std::vector<std::uint8_t>& frozen) {
  auto v = p.data();
  const auto g = p.grad();
  for (std::size_t j = 0; j < v.size(); ++j)
    if (!frozen[j]) v[j] = static_cast<float>(v[j] - lr * g[j]);
  p.clear_grad();
}

double plan_ratio(const ModelSpec& spec, const PruningPlan& plan) {
  const auto compact = compact_spec(spec, plan);
  const auto orig = macs_params(spec).macs, small = macs_params(compact).macs;
  return small ? double(orig) / double(small) : 0.0;
}

}  // namespace

LayerMasks floored_binary_masks(const MaskBank<float>& bank) {
  LayerMasks out;
  for (std::size_t i = 0; i < bank.entries().size(); ++i) {
    const auto& e = bank.entries()[i];
    auto m = bank.binary_masks(i);
    if (std::all_of(m.begin(), m.end(), [](double v) { return v == 0.0; })) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < m.size(); ++j)
        if (e.p[j] > e.p[best]) best = j;
      m[best] = 1.0;
    }
    out[e.layer] = std::move(m);
  }
  return out;
}

// ---- stages -------------------------------------------------------------------

GanPair pretrain_teacher(const TrainConfig& cfg, const Dataset& data, RunMetrics& metrics) {
  validate(cfg);
  const std::string stage = "pretrain";
  const auto total = cfg.stage_iterations(stage);
  StageClock clock{metrics, stage, total};
  GanPair t = init_teacher(cfg);
  const bool cycle = cfg.task_kind == TaskKind::Cycle;
  BatchFeed feed(data.train, cfg.batch_size, Rng(cfg.seed).split("order.pretrain"));
  Adam<float> g_opt(cfg.learning_rate), d_opt(cfg.learning_rate), g2_opt(cfg.learning_rate),
      d2_opt(cfg.learning_rate);
  Tensor<float> x, y;
  for (std::int64_t e = 0; e < total; ++e) {
    const double lr = learning_rate_at(cfg.learning_rate, e, total);
    for (auto* o : {&g_opt, &d_opt, &g2_opt, &d2_opt}) o->set_lr(lr);
    feed.next(x, y, cycle);
    clear_grads(t.g);
    const auto fake = forward(t.g_spec, t.g, x);
    discriminator_step(cfg, t.d_spec, t.d, d_opt, discriminator_input(cfg, x, y), discriminator_input(cfg, x, fake),
                       stage, e);
    Tensor<float> l_gan, l_spe;
    if (!cycle) {
      l_gan = generator_gan_loss(forward(t.d_spec, t.d, discriminator_input(cfg, x, fake)), cfg.gan_loss_kind);
      l_spe = paired_l1_loss(fake, y, cfg.lambda_spe);
    } else {
      clear_grads(t.g2);
      const auto fake_x = forward(t.g_spec, t.g2, y);
      discriminator_step(cfg, t.d_spec, t.d2, d2_opt, x, fake_x, stage, e);
      l_gan = add(generator_gan_loss(forward(t.d_spec, t.d, fake), cfg.gan_loss_kind),
                  generator_gan_loss(forward(t.d_spec, t.d2, fake_x), cfg.gan_loss_kind));
      l_spe = add(cycle_loss(forward(t.g_spec, t.g2, fake), x, cfg.lambda_spe),
                  cycle_loss(forward(t.g_spec, t.g, fake_x), y, cfg.lambda_spe));
    }
    const auto loss = add(l_gan, l_spe);
    check_finite(loss.item(), stage, e, "generator loss");
    backward(loss);
    step_or_diverge(g_opt, t.g, stage, e);
    if (cycle) step_or_diverge(g2_opt, t.g2, stage, e);
    clear_grads(t.d);
    clear_grads(t.d2);
    if (should_log(cfg, e, total)) {
      MetricsRow r;
      r.iter = e;
      r.stage = stage;
      r.l_gan = l_gan.item();
      r.l_spe = l_spe.item();
      r.total = r.l_gan + r.l_spe;
      r.sparsity = 0.0;
      r.boundary = 1.0;
      metrics.rows.push_back(r);
    }
  }
  return t;
}

SearchResult search_architecture(const GanPair& teacher, const TrainConfig& cfg, const Dataset& data,
                                 RunMetrics& metrics, const SearchObserver& observe) {
  validate(cfg);
  const std::string stage = "search";
  const auto total = cfg.stage_iterations(stage);
  StageClock clock{metrics, stage, total};
  const bool cycle = cfg.task_kind == TaskKind::Cycle;
  const ModelSpec& spec = teacher.g_spec;

  SearchResult r;
  r.g = teacher.g.clone();
  r.d = teacher.d.clone();
  r.bank = MaskBank<float>(cfg.mask_kind);
  for (int conv : spec.masked_conv_ids()) {
    r.bank.add_layer(conv, spec.layers[conv].name, spec.layers[conv].filters, cfg.p_init);
  }
  const MaskGroupSet groups = cfg.group_sparsity ? make_groups(spec, r.bank) : MaskGroupSet{};
  const MaskGroupSet* group_ptr = groups.groups.empty() ? nullptr : &groups;
  const auto reverse = cycle ? frozen_copy(teacher.g2) : ParamStore<float>{};

  BatchFeed feed(data.train, cfg.batch_size, Rng(cfg.seed).split("order.search"));
  Adam<float> g_opt(cfg.learning_rate), d_opt(cfg.learning_rate), m_opt(cfg.mask_learning_rate);
  Tensor<float> x, y;
  std::int64_t e = 0;
  for (; e < total; ++e) {
    const double lr = learning_rate_at(cfg.learning_rate, e, total);
    g_opt.set_lr(lr);
    d_opt.set_lr(lr);
    r.bank.set_boundary(boundary_at(e, total));
    r.bank.enforce_alive();
    feed.next(x, y, cycle);
    clear_grads(r.g);
    const auto fake = forward(spec, r.g, x, &r.bank);
    discriminator_step(cfg, teacher.d_spec, r.d, d_opt, discriminator_input(cfg, x, y),
                       discriminator_input(cfg, x, fake), stage, e);
    const auto l_gan =
        generator_gan_loss(forward(teacher.d_spec, r.d, discriminator_input(cfg, x, fake)), cfg.gan_loss_kind);
    const auto l_spe = cycle ? cycle_loss(forward(spec, reverse, fake), x, cfg.lambda_spe)
                             : paired_l1_loss(fake, y, cfg.lambda_spe);
    const auto l_spa = sparse_loss(r.bank, cfg.lambda_spa, group_ptr);
    const auto loss = add(add(l_gan, l_spe), l_spa);
    check_finite(loss.item(), stage, e, "generator loss");
    backward(loss);
    step_or_diverge(g_opt, r.g, stage, e);
    for (std::size_t i = 0; i < r.bank.entries().size(); ++i) {
      auto& entry = r.bank.entries()[i];
      if (!entry.p.has_grad()) continue;
      const auto frozen = r.bank.frozen_flags(i);
      if (!all_finite<float>(entry.p.grad())) {
        throw DivergenceError(stage + " diverged at iteration " + std::to_string(e) + ": non-finite mask gradient");
      }
      if (cfg.mask_optimizer == MaskOptimizer::Adam) {
        m_opt.step(entry.name, entry.p, frozen);
      } else {
        sgd_step(entry.p, cfg.mask_learning_rate, frozen);
      }
    }
    clear_grads(r.d);
    r.bank.enforce_alive();
    if (observe) observe(e, r.bank);
    if (should_log(cfg, e, total)) {
      MetricsRow row;
      row.iter = e;
      row.stage = stage;
      row.l_gan = l_gan.item();
      row.l_spe = l_spe.item();
      row.l_spa = l_spa.item();
      row.total = row.l_gan + row.l_spe + row.l_spa;
      row.sparsity = r.bank.sparsity_fraction();
      row.boundary = r.bank.boundary();
      metrics.rows.push_back(row);
    }
    if (cfg.early_stop) {
      const auto plan = derive_plan(spec, floored_binary_masks(r.bank), group_ptr);
      if (plan_ratio(spec, plan) >= cfg.target_compression) {
        r.early_stopped = true;
        ++e;
        break;
      }
    }
  }
  r.iterations_run = e;
  clock.iterations = e;
  r.bank.set_boundary(0.0);
  r.bank.enforce_alive();
  r.plan = derive_plan(spec, r.bank, group_ptr);
  r.compression = plan_ratio(spec, r.plan);
  r.target_missed = r.compression < cfg.target_compression;
  metrics.early_stopped = r.early_stopped;
  metrics.target_missed = r.target_missed;
  metrics.search_iterations_run = r.iterations_run;
  metrics.final_sparsity = r.bank.sparsity_fraction();
  metrics.residual_prune_rate = residual_prune_rate(spec, r.plan);
  if (r.target_missed) {
    log_warning("target_missed: search reached " + fmt(r.compression) + "x MACs reduction, target " +
                fmt(cfg.target_compression) + "x");
  }
  return r;
}

Student prune_student(const GanPair& teacher, const SearchResult& search, const TrainConfig& cfg) {
  Student s;
  s.spec = compact_spec(teacher.g_spec, search.plan);
  if (cfg.student_init == StudentInit::Inherit) {
    s.g = prune_params(teacher.g_spec, search.g, search.plan);
  } else {
    Rng rng = Rng(cfg.seed).split("student.scratch");
    s.g = init_params<float>(s.spec, rng);
  }
  Rng rd = Rng(cfg.seed).split("student.d");
  s.d = init_params<float>(discriminator_spec(cfg), rd);
  return s;
}

void finetune_student(const GanPair& teacher, Student& s, const TrainConfig& cfg, const Dataset& data,
                      RunMetrics& metrics) {
  validate(cfg);
  const std::string stage = "finetune";
  const auto total = cfg.stage_iterations(stage);
  StageClock clock{metrics, stage, total};
  const bool cycle = cfg.task_kind == TaskKind::Cycle;
  const ModelSpec d_spec = discriminator_spec(cfg);
  if (s.d.size() == 0) {
    Rng rd = Rng(cfg.seed).split("student.d");
    s.d = init_params<float>(d_spec, rd);
  }
  const auto t_g = frozen_copy(teacher.g);
  const auto t_d = frozen_copy(teacher.d);
  const auto reverse = cycle ? frozen_copy(teacher.g2) : ParamStore<float>{};

  const TapPlan taps = make_tap_plan(teacher.g_spec, teacher.d_spec, cfg.d_tap_count);
  std::vector<int> d_taps;
  {
    std::set<int> u;
    for (const auto& list : taps.discriminator_taps) u.insert(list.begin(), list.end());
    d_taps.assign(u.begin(), u.end());
  }
  const bool distill_att = cfg.lambda_coatt > 0;
  const bool distill_fea = cfg.lambda_fea > 0;

  BatchFeed feed(data.train, cfg.batch_size, Rng(cfg.seed).split("order.finetune"));
  Adam<float> g_opt(cfg.learning_rate), d_opt(cfg.learning_rate);
  Tensor<float> x, y;
  for (std::int64_t e = 0; e < total; ++e) {
    const double lr = learning_rate_at(cfg.learning_rate, e, total);
    g_opt.set_lr(lr);
    d_opt.set_lr(lr);
    feed.next(x, y, cycle);

    std::vector<Tensor<float>> targets;
    Tensor<float> teacher_logits;
    if (distill_att || distill_fea) {
      NoGradGuard guard;
      std::vector<Tensor<float>> g_feat, d_feat;
      const auto t_fake = forward(teacher.g_spec, t_g, x, kNoMasks, taps.generator_taps, &g_feat);
      teacher_logits = forward(teacher.d_spec, t_d, discriminator_input(cfg, x, t_fake), kNoMasks, d_taps, &d_feat);
      if (distill_att) {
        for (std::size_t i = 0; i < g_feat.size(); ++i) {
          std::vector<Tensor<float>> chosen;
          for (int layer : taps.discriminator_taps[i]) {
            const auto pos = std::lower_bound(d_taps.begin(), d_taps.end(), layer) - d_taps.begin();
            chosen.push_back(d_feat[pos]);
          }
          targets.push_back(co_attention_target(g_feat[i], chosen));
        }
      }
    }

    clear_grads(s.g);
    std::vector<Tensor<float>> s_feat;
    const auto fake = forward(s.spec, s.g, x, kNoMasks, taps.generator_taps, &s_feat);
    discriminator_step(cfg, d_spec, s.d, d_opt, discriminator_input(cfg, x, y), discriminator_input(cfg, x, fake),
                       stage, e);
    const auto l_gan = generator_gan_loss(forward(d_spec, s.d, discriminator_input(cfg, x, fake)), cfg.gan_loss_kind);
    const auto l_spe = cycle ? cycle_loss(forward(teacher.g_spec, reverse, fake), x, cfg.lambda_spe)
                             : paired_l1_loss(fake, y, cfg.lambda_spe);
    auto loss = add(l_gan, l_spe);
    double coatt = 0.0, fea = 0.0;
    if (distill_att) {
      const auto l = co_attention_loss(targets, s_feat, cfg.lambda_coatt);
      coatt = l.item();
      loss = add(loss, l);
    }
    if (distill_fea) {
      const auto l =
          feature_loss(teacher_logits, forward(teacher.d_spec, t_d, discriminator_input(cfg, x, fake)), cfg.lambda_fea);
      fea = l.item();
      loss = add(loss, l);
    }
    check_finite(loss.item(), stage, e, "generator loss");
    backward(loss);
    step_or_diverge(g_opt, s.g, stage, e);
    clear_grads(s.d);
    if (should_log(cfg, e, total)) {
      MetricsRow row;
      row.iter = e;
      row.stage = stage;
      row.l_gan = l_gan.item();
      row.l_spe = l_spe.item();
      row.l_coatt = coatt;
      row.l_fea = fea;
      row.total = row.l_gan + row.l_spe + row.l_coatt + row.l_fea;
      row.sparsity = metrics.final_sparsity;
      row.boundary = 0.0;
      metrics.rows.push_back(row);
    }
  }
}

std::vector<Image> translate(const ModelSpec& spec, const ParamStore<float>& params,
                             const std::vector<SamplePair>& samples) {
  NoGradGuard guard;
  constexpr std::size_t kChunk = 32;
  std::vector<Image> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); i += kChunk) {
    std::vector<const Image*> xs;
    for (std::size_t j = i; j < std::min(samples.size(), i + kChunk); ++j) xs.push_back(&samples[j].x);
    for (auto& img : unstack_images(forward(spec, params, stack_images(xs)))) out.push_back(std::move(img));
  }
  return out;
}

Evaluation evaluate(const ModelSpec& spec, const ParamStore<float>& params, const std::vector<SamplePair>& samples) {
  const auto generated = translate(spec, params, samples);
  std::vector<Image> targets;
  targets.reserve(samples.size());
  for (const auto& s : samples) targets.push_back(s.y);
  return {toy_frechet(generated, targets), mean_abs_error(generated, targets)};
}

RunAllResult run_all(const TrainConfig& cfg, const Dataset& data) {
  RunAllResult r;
  r.teacher = pretrain_teacher(cfg, data, r.metrics);
  const auto te = evaluate(r.teacher.g_spec, r.teacher.g, data.test);
  r.metrics.teacher_frechet = te.frechet;
  r.metrics.teacher_l1 = te.l1;
  r.search = search_architecture(r.teacher, cfg, data, r.metrics);
  r.student = prune_student(r.teacher, r.search, cfg);
  finetune_student(r.teacher, r.student, cfg, data, r.metrics);
  const auto se = evaluate(r.student.spec, r.student.g, data.test);
  r.metrics.student_frechet = se.frechet;
  r.metrics.student_l1 = se.l1;
  const auto report = compression_report(r.teacher.g_spec, r.student.spec);
  r.metrics.original_macs = report.original.macs;
  r.metrics.compact_macs = report.compact.macs;
  r.metrics.original_params = report.original.params;
  r.metrics.compact_params = report.compact.params;
  r.metrics.macs_ratio = report.macs_ratio;
  r.metrics.params_ratio = report.params_ratio;
  return r;
}

// ---- persistence --------------------------------------------------------------

void save_teacher(const GanPair& t, const std::filesystem::path& path) {
  Checkpoint c;
  put_params(c, t.g, "G/");
  put_params(c, t.d, "D/");
  put_params(c, t.g2, "G2/");
  put_params(c, t.d2, "D2/");
  c.save(path);
}

GanPair load_teacher(const TrainConfig& cfg, const std::filesystem::path& path) {
  const auto c = Checkpoint::load(path);
  GanPair t = init_teacher(cfg);
  load_params(c, t.g, "G/");
  load_params(c, t.d, "D/");
  load_params(c, t.g2, "G2/");
  load_params(c, t.d2, "D2/");
  return t;
}

void save_search(const SearchResult& s, const std::filesystem::path& path) {
  Checkpoint c;
  put_params(c, s.g, "G/");
  put_params(c, s.d, "D/");
  for (const auto& e : s.bank.entries()) {
    c.put("mask.p." + std::to_string(e.layer), e.p);
    c.put("mask.pinned." + std::to_string(e.layer), {static_cast<std::uint32_t>(e.pinned.size())},
          std::vector<float>(e.pinned.begin(), e.pinned.end()));
  }
  c.put("meta/search", {3},
        {float(s.early_stopped), float(s.target_missed), static_cast<float>(s.iterations_run)});
  c.save(path);
}

SearchResult load_search(const TrainConfig& cfg, const std::filesystem::path& path) {
  const auto c = Checkpoint::load(path);
  const GanPair shape = init_teacher(cfg);
  SearchResult s;
  s.g = shape.g.clone();
  s.d = shape.d.clone();
  load_params(c, s.g, "G/");
  load_params(c, s.d, "D/");
  s.bank = MaskBank<float>(cfg.mask_kind);
  for (int conv : shape.g_spec.masked_conv_ids()) {
    const auto& l = shape.g_spec.layers[conv];
    s.bank.add_layer(conv, l.name, l.filters, 0.0);
    auto& e = s.bank.entries().back();
    const auto& p = c.at("mask.p." + std::to_string(conv)).values;
    const auto& pinned = c.at("mask.pinned." + std::to_string(conv)).values;
    if (p.size() != std::size_t(l.filters) || pinned.size() != p.size()) {
      throw FormatError("mask entry for " + l.name + " has the wrong length");
    }
    std::copy(p.begin(), p.end(), e.p.data().begin());
    for (std::size_t j = 0; j < pinned.size(); ++j) e.pinned[j] = pinned[j] != 0.0f;
  }
  s.bank.set_boundary(0.0);
  const auto& meta = c.at("meta/search").values;
  s.early_stopped = meta.at(0) != 0.0f;
  s.target_missed = meta.at(1) != 0.0f;
  s.iterations_run = static_cast<std::int64_t>(meta.at(2));
  const MaskGroupSet groups = cfg.group_sparsity ? make_groups(shape.g_spec, s.bank) : MaskGroupSet{};
  s.plan = derive_plan(shape.g_spec, s.bank, groups.groups.empty() ? nullptr : &groups);
  s.compression = plan_ratio(shape.g_spec, s.plan);
  return s;
}

void save_student(const Student& s, const std::filesystem::path& path) {
  Checkpoint c;
  put_params(c, s.g, "G/");
  put_params(c, s.d, "D/");
  c.save(path);
}

Student load_student(const TrainConfig& cfg, const PruningPlan& plan, const std::filesystem::path& path) {
  const auto c = Checkpoint::load(path);
  Student s;
  s.spec = compact_spec(generator_spec(cfg), plan);
  Rng rng(0);
  s.g = init_params<float>(s.spec, rng);
  s.d = init_params<float>(discriminator_spec(cfg), rng);
  load_params(c, s.g, "G/");
  load_params(c, s.d, "D/");
  return s;
}

std::uint64_t checksum(const ParamStore<float>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : params.entries()) {
    feed(reinterpret_cast<const unsigned char*>(name.data()), name.size());
    feed(reinterpret_cast<const unsigned char*>(t.data().data()), t.numel() * sizeof(float));
  }
  return h;
}

}  // namespace dmad
