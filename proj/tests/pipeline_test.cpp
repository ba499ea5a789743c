#include <gtest/gtest.h>

#include <algorithm>

#include "dmad/pipeline.hpp"
#include "support.hpp"

using namespace dmad;
using dmad::testing::check_gradients;
using dmad::testing::random_away_from_zero;
using dmad::testing::random_tensor;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.iterations = 60;
  c.batch_size = 2;
  c.generator_width = 8;
  c.residual_blocks = 2;
  c.discriminator_width = 8;
  c.n_train = 32;
  c.n_test = 16;
  c.lambda_spa = 0.01;
  c.lambda_coatt = 1.0;
  c.p_init = 0.5;
  c.mask_learning_rate = 0.1;
  return c;
}

const Dataset& tiny_data() {
  static const Dataset d = [] {
    const auto c = tiny_config();
    return generate_dataset(c.data_seed, c.n_train, c.n_test);
  }();
  return d;
}

/// Teacher shared by the stage tests; pretraining is the slow part.
const GanPair& tiny_teacher() {
  static const GanPair t = [] {
    auto c = tiny_config();
    c.pretrain_iterations = 300;
    RunMetrics m;
    return pretrain_teacher(c, tiny_data(), m);
  }();
  return t;
}

void expect_rows_consistent(const RunMetrics& m) {
  for (const auto& r : m.rows) {
    for (double v : {r.l_gan, r.l_spe, r.l_spa, r.l_coatt, r.l_fea, r.total, r.sparsity, r.boundary})
      ASSERT_TRUE(std::isfinite(v)) << r.stage << " " << r.iter;
    EXPECT_NEAR(r.total, r.l_gan + r.l_spe + r.l_spa + r.l_coatt + r.l_fea, 1e-5) << r.stage << " " << r.iter;
  }
}

}  // namespace

// ---- losses ----------------------------------------------------------------------

TEST(GanLoss, HalfConfidentValue) {
  const Tensor<double> zeros({2, 1, 2, 2}, 0.0);
  EXPECT_NEAR(gan_value(zeros, zeros).item(), 2 * std::log(0.5), 1e-7);
  EXPECT_NEAR(discriminator_gan_loss(zeros, zeros, GanLossKind::Vanilla).item(), -2 * std::log(0.5), 1e-7);
}

TEST(GanLoss, PerfectDiscriminator) {
  const Tensor<double> real({2, 1, 2, 2}, 40.0), fake({2, 1, 2, 2}, -40.0);
  EXPECT_NEAR(discriminator_gan_loss(real, fake, GanLossKind::Vanilla).item(), 0.0, 1e-6);
  const Tensor<double> ones({2, 1, 2, 2}, 1.0), zeros({2, 1, 2, 2}, 0.0);
  EXPECT_EQ(discriminator_gan_loss(ones, zeros, GanLossKind::LeastSquares).item(), 0.0);
}

TEST(GanLoss, SaturatedLogitsStayFinite) {
  const Tensor<double> real({1, 1, 1, 1}, -800.0), fake({1, 1, 1, 1}, 800.0);
  EXPECT_TRUE(std::isfinite(discriminator_gan_loss(real, fake, GanLossKind::Vanilla).item()));
  EXPECT_TRUE(std::isfinite(generator_gan_loss(real, GanLossKind::Vanilla).item()));
}

TEST(GanLoss, LeastSquaresGeneratorAtOne) {
  const Tensor<double> ones({3, 1, 2, 2}, 1.0);
  EXPECT_EQ(generator_gan_loss(ones, GanLossKind::LeastSquares).item(), 0.0);
  const Tensor<double> zeros({3, 1, 2, 2}, 0.0);
  EXPECT_DOUBLE_EQ(generator_gan_loss(zeros, GanLossKind::LeastSquares).item(), 1.0);
  EXPECT_DOUBLE_EQ(discriminator_gan_loss(zeros, zeros, GanLossKind::LeastSquares).item(), 0.5);
}

TEST(GanLoss, KindNamesRoundTrip) {
  for (auto k : {GanLossKind::Vanilla, GanLossKind::LeastSquares}) EXPECT_EQ(parse_gan_loss_kind(to_string(k)), k);
  for (auto k : {TaskKind::PairedL1, TaskKind::Cycle}) EXPECT_EQ(parse_task_kind(to_string(k)), k);
  EXPECT_THROW(parse_gan_loss_kind("hinge"), ConfigError);
}

class LossGradients : public ::testing::TestWithParam<int> {};

TEST_P(LossGradients, MatchFiniteDifferences) {
  Rng rng(GetParam());
  auto real = random_tensor(rng, {2, 1, 3, 3}, -2, 2), fake = random_tensor(rng, {2, 1, 3, 3}, -2, 2);
  for (auto kind : {GanLossKind::Vanilla, GanLossKind::LeastSquares}) {
    auto res = check_gradients([&] { return discriminator_gan_loss(real, fake, kind); }, {real, fake});
    EXPECT_TRUE(res.ok()) << to_string(kind) << " D " << res.worst_excess;
    res = check_gradients([&] { return generator_gan_loss(fake, kind); }, {fake});
    EXPECT_TRUE(res.ok()) << to_string(kind) << " G " << res.worst_excess;
  }
  auto target = random_tensor(rng, {2, 3, 4, 4});
  auto offset = random_away_from_zero(rng, {2, 3, 4, 4});
  auto pred = add(target, offset);
  pred = Tensor<double>(pred.shape(), std::vector<double>(pred.data().begin(), pred.data().end()));
  auto res = check_gradients([&] { return paired_l1_loss(pred, target, 10.0); }, {pred, target});
  EXPECT_TRUE(res.ok()) << "paired " << res.worst_excess;
  auto recon = random_tensor(rng, {3, 2, 3, 3}), source = random_tensor(rng, {3, 2, 3, 3});
  res = check_gradients([&] { return cycle_loss(recon, source, 10.0); }, {recon, source});
  EXPECT_TRUE(res.ok()) << "cycle " << res.worst_excess;
}

INSTANTIATE_TEST_SUITE_P(Seeds, LossGradients, ::testing::Range(0, 5));

TEST(TaskLoss, PairedExamples) {
  Rng rng(1);
  const auto y = random_tensor(rng, {2, 3, 4, 4});
  EXPECT_EQ(paired_l1_loss(y, y, 10.0).item(), 0.0);
  EXPECT_NEAR(paired_l1_loss(add_scalar(y, 0.1), y, 10.0).item(), 1.0, 1e-12);
  EXPECT_THROW(paired_l1_loss(y, Tensor<double>({2, 3, 4, 2}, 0.0), 10.0), ConfigError);
}

TEST(TaskLoss, CycleIdentityIsZero) {
  Rng rng(2);
  const auto x = random_tensor(rng, {2, 3, 4, 4});
  EXPECT_EQ(cycle_loss(x, x, 10.0).item(), 0.0);
  // One sample off by a unit vector: mean norm = 1/2.
  auto shifted = Tensor<double>(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
  shifted.data()[0] += 1.0;
  EXPECT_NEAR(cycle_loss(shifted, x, 1.0).item(), 0.5, 1e-12);
  EXPECT_THROW(cycle_loss(x, Tensor<double>({2, 3, 4, 2}, 0.0), 1.0), ConfigError);
}

// ---- config ----------------------------------------------------------------------

TEST(Config, TextRoundTrip) {
  auto c = tiny_config();
  c.gan_loss_kind = GanLossKind::Vanilla;
  c.task_kind = TaskKind::Cycle;
  c.mask_kind = MaskKind::Linear;
  c.student_init = StudentInit::Scratch;
  c.mask_optimizer = MaskOptimizer::Adam;
  c.lambda_fea = 1.25e-4;
  c.seed = 123456789012345ull;
  const auto text = config_to_text(c);
  EXPECT_EQ(config_to_text(parse_config(text)), text);
}

TEST(Config, ParserRules) {
  const auto c = parse_config("# comment\n\nseed = 4\n  lambda_spa=0.5  \nearly_stop = false\n");
  EXPECT_EQ(c.seed, 4u);
  EXPECT_EQ(c.lambda_spa, 0.5);
  EXPECT_FALSE(c.early_stop);
  EXPECT_THROW(parse_config("sed = 4\n"), ConfigError);
  EXPECT_THROW(parse_config("seed 4\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = four\n"), ConfigError);
  EXPECT_THROW(parse_config("gan_loss_kind = hinge\n"), ConfigError);
}

TEST(Config, Validation) {
  EXPECT_NO_THROW(validate(TrainConfig{}));
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(validate(bad([](TrainConfig& c) { c.lambda_spa = -1; })), ConfigError);
  EXPECT_THROW(validate(bad([](TrainConfig& c) { c.lambda_coatt = -0.1; })), ConfigError);
  EXPECT_THROW(validate(bad([](TrainConfig& c) { c.target_compression = 1.0; })), ConfigError);
  EXPECT_THROW(validate(bad([](TrainConfig& c) { c.batch_size = 0; })), ConfigError);
  EXPECT_THROW(validate(bad([](TrainConfig& c) { c.generator_width = 2; })), ConfigError);
}

TEST(Config, StageIterationOverrides) {
  TrainConfig c;
  c.iterations = 50;
  c.search_iterations = 7;
  EXPECT_EQ(c.stage_iterations("pretrain"), 50);
  EXPECT_EQ(c.stage_iterations("search"), 7);
  EXPECT_EQ(c.stage_iterations("finetune"), 50);
}

TEST(Schedule, LinearDecay) {
  const double base = 2e-4;
  const std::int64_t total = 1000;
  EXPECT_DOUBLE_EQ(learning_rate_at(base, 0, total), 2e-4);
  EXPECT_DOUBLE_EQ(learning_rate_at(base, 250, total), 1.5e-4);
  EXPECT_DOUBLE_EQ(learning_rate_at(base, 500, total), 1e-4);
  EXPECT_DOUBLE_EQ(learning_rate_at(base, 750, total), 5e-5);
  EXPECT_DOUBLE_EQ(learning_rate_at(base, total, total), 0.0);
  EXPECT_DOUBLE_EQ(learning_rate_at(base, 0, 0), base);
}

// ---- metrics ---------------------------------------------------------------------

TEST(Metrics, CsvRoundTrip) {
  std::vector<MetricsRow> rows(2);
  rows[0] = {0, "search", 0.25, 1.5, 0.125, 0, 0, 1.875, 0.0, 1.0};
  rows[1] = {1, "finetune", 0.3, 1.2, 0, 0.01, 3e-5, 1.51003, 0.5, 0.0};
  const auto text = metrics_csv(rows);
  EXPECT_EQ(text.substr(0, text.find('\n')), kMetricsHeader);
  const auto back = parse_metrics_csv(text);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(metrics_csv(back), text);
  EXPECT_THROW(parse_metrics_csv("iter,stage\n1,x\n"), FormatError);
}

// ---- stages on the tiny config ---------------------------------------------------

TEST(Pretrain, DeterministicOverHundredIterations) {
  auto c = tiny_config();
  c.pretrain_iterations = 100;
  RunMetrics a, b;
  const auto ta = pretrain_teacher(c, tiny_data(), a);
  const auto tb = pretrain_teacher(c, tiny_data(), b);
  EXPECT_EQ(metrics_csv(a.rows), metrics_csv(b.rows));
  EXPECT_EQ(checksum(ta.g), checksum(tb.g));
  EXPECT_EQ(checksum(ta.d), checksum(tb.d));
  EXPECT_EQ(a.rows.size(), 100u);
  expect_rows_consistent(a);
  c.seed = 1;
  RunMetrics other;
  EXPECT_NE(checksum(pretrain_teacher(c, tiny_data(), other).g), checksum(ta.g));
}

TEST(Pretrain, ZeroIterationsKeepsInitialWeights) {
  auto c = tiny_config();
  c.pretrain_iterations = 0;
  RunMetrics m;
  const auto t = pretrain_teacher(c, tiny_data(), m);
  const auto init = init_teacher(c);
  EXPECT_EQ(checksum(t.g), checksum(init.g));
  EXPECT_EQ(checksum(t.d), checksum(init.d));
  EXPECT_TRUE(m.rows.empty());
}

TEST(Pretrain, TeacherBeatsUntrainedGenerator) {
  const auto c = tiny_config();
  const auto init = init_teacher(c);
  const auto before = evaluate(init.g_spec, init.g, tiny_data().test);
  const auto& t = tiny_teacher();
  const auto after = evaluate(t.g_spec, t.g, tiny_data().test);
  EXPECT_LT(after.l1, before.l1);
  EXPECT_LT(after.frechet, before.frechet);
}

TEST(Pretrain, CycleModeTrainsBothDirections) {
  auto c = tiny_config();
  c.task_kind = TaskKind::Cycle;
  c.pretrain_iterations = 5;
  RunMetrics m;
  const auto t = pretrain_teacher(c, tiny_data(), m);
  EXPECT_GT(t.g2.size(), 0u);
  EXPECT_GT(t.d2.size(), 0u);
  expect_rows_consistent(m);
}

TEST(Evaluate, TargetsAgainstThemselves) {
  std::vector<Image> y;
  for (const auto& s : tiny_data().test) y.push_back(s.y);
  EXPECT_NEAR(toy_frechet(y, y), 0.0, 1e-9);
  EXPECT_EQ(mean_abs_error(y, y), 0.0);
}

TEST(Search, NoSparsityPressureKeepsEveryFilter) {
  auto c = tiny_config();
  c.lambda_spa = 0.0;
  c.p_init = 1.0;
  c.search_iterations = 60;
  c.early_stop = false;
  RunMetrics m;
  const auto r = search_architecture(tiny_teacher(), c, tiny_data(), m);
  for (const auto& [layer, keep] : r.plan.keep) EXPECT_EQ(int(keep.size()), tiny_teacher().g_spec.layers[layer].filters);
  EXPECT_DOUBLE_EQ(r.compression, 1.0);
  EXPECT_TRUE(r.target_missed);
  expect_rows_consistent(m);
}

TEST(Search, StrongSparsityPrunesAlmostEverything) {
  auto c = tiny_config();
  c.lambda_spa = 0.1;
  c.search_iterations = 100;
  c.early_stop = false;
  RunMetrics m;
  const auto r = search_architecture(tiny_teacher(), c, tiny_data(), m);
  EXPECT_GE(m.final_sparsity, 0.9);
  for (const auto& [layer, keep] : r.plan.keep) EXPECT_GE(keep.size(), 1u);
  expect_rows_consistent(m);
  // Sparsity only grows once the boundary has closed.
  double last = -1;
  for (const auto& row : m.rows) {
    if (row.boundary != 0.0) continue;
    EXPECT_GE(row.sparsity, last);
    last = row.sparsity;
  }
}

TEST(Search, EarlyStopAtTwoTimes) {
  auto c = tiny_config();
  c.target_compression = 2.0;
  c.search_iterations = 400;
  c.mask_learning_rate = 0.5;
  RunMetrics m;
  const auto r = search_architecture(tiny_teacher(), c, tiny_data(), m);
  EXPECT_TRUE(r.early_stopped);
  EXPECT_FALSE(r.target_missed);
  EXPECT_LT(r.iterations_run, 400);
  EXPECT_GE(r.compression, 2.0);
  EXPECT_EQ(m.rows.back().iter + 1, r.iterations_run);
}

TEST(Search, ObserverSeesEveryIteration) {
  auto c = tiny_config();
  c.search_iterations = 30;
  c.early_stop = false;
  RunMetrics m;
  std::vector<std::int64_t> seen;
  double last_boundary = 2.0;
  const auto r = search_architecture(tiny_teacher(), c, tiny_data(), m,
                                     [&](std::int64_t e, const MaskBank<float>& bank) {
                                       seen.push_back(e);
                                       EXPECT_LT(bank.boundary(), last_boundary);
                                       last_boundary = bank.boundary();
                                     });
  ASSERT_EQ(std::int64_t(seen.size()), r.iterations_run);
  for (std::size_t i = 0; i < seen.size(); ++i) EXPECT_EQ(seen[i], std::int64_t(i));
}

TEST(Search, DoesNotTouchTeacher) {
  const auto& t = tiny_teacher();
  const auto before = checksum(t.g);
  auto c = tiny_config();
  c.search_iterations = 5;
  RunMetrics m;
  search_architecture(t, c, tiny_data(), m);
  EXPECT_EQ(checksum(t.g), before);
}

TEST(Finetune, IdentityPlanStartsWithZeroFeatureLoss) {
  auto c = tiny_config();
  c.search_iterations = 0;
  c.finetune_iterations = 3;
  c.lambda_fea = 1.0;
  RunMetrics m;
  const auto& t = tiny_teacher();
  const auto r = search_architecture(t, c, tiny_data(), m);
  ASSERT_DOUBLE_EQ(r.compression, 1.0);
  auto s = prune_student(t, r, c);
  RunMetrics fm;
  finetune_student(t, s, c, tiny_data(), fm);
  ASSERT_FALSE(fm.rows.empty());
  EXPECT_LT(fm.rows.front().l_fea, 1e-10);
}

TEST(Finetune, ZeroLambdasLogZeroDistillation) {
  auto c = tiny_config();
  c.lambda_coatt = 0;
  c.lambda_fea = 0;
  c.search_iterations = 40;
  c.finetune_iterations = 20;
  RunMetrics m;
  const auto& t = tiny_teacher();
  const auto r = search_architecture(t, c, tiny_data(), m);
  auto s = prune_student(t, r, c);
  finetune_student(t, s, c, tiny_data(), m);
  int rows = 0;
  for (const auto& row : m.rows) {
    if (row.stage != "finetune") continue;
    ++rows;
    EXPECT_EQ(row.l_coatt, 0.0);
    EXPECT_EQ(row.l_fea, 0.0);
    EXPECT_EQ(row.l_spa, 0.0);
  }
  EXPECT_EQ(rows, 20);
  expect_rows_consistent(m);
}

TEST(Finetune, CoAttentionTrendsDownAndTeacherIsUntouched) {
  auto c = tiny_config();
  c.lambda_spa = 0.1;
  c.search_iterations = 60;
  c.finetune_iterations = 150;
  c.early_stop = false;
  c.student_init = StudentInit::Scratch;
  RunMetrics m;
  const auto& t = tiny_teacher();
  const auto g_before = checksum(t.g), d_before = checksum(t.d);
  const auto r = search_architecture(t, c, tiny_data(), m);
  auto s = prune_student(t, r, c);
  RunMetrics fm;
  finetune_student(t, s, c, tiny_data(), fm);
  EXPECT_EQ(checksum(t.g), g_before);
  EXPECT_EQ(checksum(t.d), d_before);
  ASSERT_EQ(fm.rows.size(), 150u);
  EXPECT_GT(fm.rows.front().l_coatt, 0.0);
  // Median of a 5-point window at the start vs the end.
  auto median5 = [&](std::size_t start) {
    std::vector<double> w;
    for (std::size_t i = start; i < start + 5; ++i) w.push_back(fm.rows[i].l_coatt);
    std::nth_element(w.begin(), w.begin() + 2, w.end());
    return w[2];
  };
  EXPECT_LT(median5(fm.rows.size() - 5), median5(0));
  expect_rows_consistent(fm);
}

TEST(Persistence, StagesRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / ("dmad_pipeline_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  auto c = tiny_config();
  c.lambda_spa = 0.1;
  c.search_iterations = 30;
  c.early_stop = false;
  const auto& t = tiny_teacher();
  save_teacher(t, dir / "teacher.ckpt");
  const auto t2 = load_teacher(c, dir / "teacher.ckpt");
  EXPECT_EQ(checksum(t2.g), checksum(t.g));
  EXPECT_EQ(checksum(t2.d), checksum(t.d));
  RunMetrics m;
  const auto r = search_architecture(t, c, tiny_data(), m);
  save_search(r, dir / "search.ckpt");
  const auto r2 = load_search(c, dir / "search.ckpt");
  EXPECT_EQ(plan_to_text(r2.plan), plan_to_text(r.plan));
  EXPECT_EQ(checksum(r2.g), checksum(r.g));
  EXPECT_EQ(r2.iterations_run, r.iterations_run);
  const auto s = prune_student(t, r, c);
  save_student(s, dir / "student.ckpt");
  const auto s2 = load_student(c, r.plan, dir / "student.ckpt");
  EXPECT_EQ(checksum(s2.g), checksum(s.g));
  const auto e1 = evaluate(s.spec, s.g, tiny_data().test), e2 = evaluate(s2.spec, s2.g, tiny_data().test);
  EXPECT_EQ(e1.frechet, e2.frechet);
  EXPECT_EQ(e1.l1, e2.l1);
  std::filesystem::remove_all(dir);
}
