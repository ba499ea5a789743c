#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dmad/data.hpp"
#include "dmad/distill.hpp"
#include "dmad/losses.hpp"
#include "dmad/pruner.hpp"

namespace dmad {

enum class StudentInit { Inherit, Scratch };
enum class MaskOptimizer { Sgd, Adam };

/// Every knob of a compression run. The text form is one `key = value` per
/// line using exactly these field names.
struct TrainConfig {
  std::int64_t iterations = 2000;  // per stage, unless overridden below
  std::int64_t pretrain_iterations = -1;
  std::int64_t search_iterations = -1;
  std::int64_t finetune_iterations = -1;
  int batch_size = 4;
  double learning_rate = 2e-4;       // generator and discriminator, decayed linearly to 0
  double mask_learning_rate = 0.03;  // mask inputs, held constant
  MaskOptimizer mask_optimizer = MaskOptimizer::Sgd;
  double lambda_spe = 10.0;
  double lambda_spa = 1e-3;
  double lambda_coatt = 100.0;
  double lambda_fea = 1e-4;
  double target_compression = 4.0;  // MACs ratio at which the search stops
  GanLossKind gan_loss_kind = GanLossKind::LeastSquares;
  TaskKind task_kind = TaskKind::PairedL1;
  int discriminator_width = 16;
  int generator_width = 16;
  int residual_blocks = 4;
  std::uint64_t seed = 0;       // weights, batch order
  std::uint64_t data_seed = 0;  // dataset contents
  int n_train = 512;
  int n_test = 128;
  bool group_sparsity = true;
  MaskKind mask_kind = MaskKind::Quadratic;
  double p_init = 0.5;
  int d_tap_count = 1;
  StudentInit student_init = StudentInit::Inherit;
  bool early_stop = true;
  int log_every = 1;

  std::int64_t stage_iterations(const std::string& stage) const;
};

/// Throws ConfigError on negative lambdas, target <= 1, empty batches and the like.
void validate(const TrainConfig& cfg);
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});
std::string config_to_text(const TrainConfig& cfg);

/// eta(e) = base * (1 - e / E); eta(E) = 0. With E = 0 the base rate is returned.
double learning_rate_at(double base, std::int64_t e, std::int64_t total);

// ---- metrics ----------------------------------------------------------------

struct MetricsRow {
  std::int64_t iter = 0;
  std::string stage;
  double l_gan = 0, l_spe = 0, l_spa = 0, l_coatt = 0, l_fea = 0;
  double total = 0;
  double sparsity = 0;
  double boundary = 0;
};

inline constexpr const char* kMetricsHeader = "iter,stage,l_gan,l_spe,l_spa,l_coatt,l_fea,total,sparsity,boundary";

struct StageTiming {
  std::string stage;
  double seconds = 0;
  std::int64_t iterations = 0;
};

/// Everything a run reports. Only `rows` goes into the CSV; timings and the
/// summary figures are kept apart so the CSV is reproducible byte for byte.
struct RunMetrics {
  std::vector<MetricsRow> rows;
  std::vector<StageTiming> timings;
  std::uint64_t original_macs = 0, compact_macs = 0;
  std::uint64_t original_params = 0, compact_params = 0;
  double macs_ratio = 1.0, params_ratio = 1.0;
  double teacher_frechet = 0, teacher_l1 = 0;
  double student_frechet = 0, student_l1 = 0;
  double residual_prune_rate = 0;
  double final_sparsity = 0;
  bool early_stopped = false;
  bool target_missed = false;
  std::int64_t search_iterations_run = 0;
};

std::string format_row(const MetricsRow& row);
std::string metrics_csv(const std::vector<MetricsRow>& rows, bool header = true);
std::vector<MetricsRow> parse_metrics_csv(const std::string& text);
/// JSON summary with the non-CSV parts of RunMetrics.
std::string summary_json(const RunMetrics& m);

// ---- models and stage results ----------------------------------------------

/// Teacher GAN. In cycle mode g2/d2 are the reverse generator and the
/// discriminator on the source domain; otherwise they are empty.
struct GanPair {
  ModelSpec g_spec, d_spec;
  ParamStore<float> g, d, g2, d2;
};

ModelSpec generator_spec(const TrainConfig& cfg);
ModelSpec discriminator_spec(const TrainConfig& cfg);
GanPair init_teacher(const TrainConfig& cfg);

/// Discriminator input: (x, image) stacked along channels for the paired
/// task, the image alone for the cycle task.
Tensor<float> discriminator_input(const TrainConfig& cfg, const Tensor<float>& x, const Tensor<float>& image);

struct SearchResult {
  MaskBank<float> bank;
  PruningPlan plan;
  ParamStore<float> g;  // generator weights trained alongside the masks
  ParamStore<float> d;
  double compression = 1.0;  // MACs ratio of the derived plan
  bool early_stopped = false;
  bool target_missed = false;
  std::int64_t iterations_run = 0;
};

struct Student {
  ModelSpec spec;
  ParamStore<float> g;
  ParamStore<float> d;  // student discriminator (fresh at finetune start)
};

/// Seeded mini-batch order over one split, reshuffled every epoch.
class BatchFeed {
 public:
  BatchFeed(const std::vector<SamplePair>& split, int batch_size, Rng rng);
  /// Paired batch; in `unpaired` mode y follows an independent order.
  void next(Tensor<float>& x, Tensor<float>& y, bool unpaired = false);

 private:
  std::vector<std::size_t> order(std::vector<std::size_t>& perm, std::size_t& pos, Rng& rng);
  const std::vector<SamplePair>* split_;
  int batch_;
  Rng rng_x_, rng_y_;
  std::vector<std::size_t> perm_x_, perm_y_;
  std::size_t pos_x_ = 0, pos_y_ = 0;
};

// ---- stages -------------------------------------------------------------------

GanPair pretrain_teacher(const TrainConfig& cfg, const Dataset& data, RunMetrics& metrics);

/// Mask search on a copy of the teacher. Stops as soon as the plan derived
/// with b forced to 0 reaches the target MACs ratio (when early_stop is on);
/// otherwise runs to E and flags target_missed if the final plan falls short.
/// `observe`, if set, sees the bank after every mask update.
using SearchObserver = std::function<void(std::int64_t iter, const MaskBank<float>& bank)>;
SearchResult search_architecture(const GanPair& teacher, const TrainConfig& cfg, const Dataset& data,
                                 RunMetrics& metrics, const SearchObserver& observe = {});

/// Compact student from a finished search: sliced weights or a fresh init.
Student prune_student(const GanPair& teacher, const SearchResult& search, const TrainConfig& cfg);

/// Adversarial finetuning of the student against a fresh discriminator, with
/// co-attention and discriminator-feature distillation from the frozen teacher.
void finetune_student(const GanPair& teacher, Student& student, const TrainConfig& cfg, const Dataset& data,
                      RunMetrics& metrics);

struct Evaluation {
  double frechet = 0;
  double l1 = 0;
};

std::vector<Image> translate(const ModelSpec& spec, const ParamStore<float>& params,
                             const std::vector<SamplePair>& samples);
Evaluation evaluate(const ModelSpec& spec, const ParamStore<float>& params, const std::vector<SamplePair>& samples);

/// Mask inputs binarised with b = 0 and the keep-alive floor applied.
LayerMasks floored_binary_masks(const MaskBank<float>& bank);

/// Runs every stage in order and fills compression and quality figures.
struct RunAllResult {
  GanPair teacher;
  SearchResult search;
  Student student;
  RunMetrics metrics;
};
RunAllResult run_all(const TrainConfig& cfg, const Dataset& data);

// ---- persistence ------------------------------------------------------------

void save_teacher(const GanPair& t, const std::filesystem::path& path);
GanPair load_teacher(const TrainConfig& cfg, const std::filesystem::path& path);
void save_search(const SearchResult& s, const std::filesystem::path& path);
SearchResult load_search(const TrainConfig& cfg, const std::filesystem::path& path);
void save_student(const Student& s, const std::filesystem::path& path);
Student load_student(const TrainConfig& cfg, const PruningPlan& plan, const std::filesystem::path& path);

/// Weights checksum (FNV-1a over names and raw float bytes).
std::uint64_t checksum(const ParamStore<float>& params);

}  // namespace dmad
