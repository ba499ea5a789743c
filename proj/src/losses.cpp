#include "dmad/losses.hpp"

namespace dmad {

GanLossKind parse_gan_loss_kind(const std::string& s) {
  if (s == "vanilla") return GanLossKind::Vanilla;
  if (s == "least-squares" || s == "lsgan") return GanLossKind::LeastSquares;
  throw ConfigError("unknown gan_loss_kind '" + s + "' (expected vanilla or least-squares)");
}

std::string to_string(GanLossKind kind) { return kind == GanLossKind::Vanilla ? "vanilla" : "least-squares"; }

TaskKind parse_task_kind(const std::string& s) {
  if (s == "paired-l1") return TaskKind::PairedL1;
  if (s == "cycle") return TaskKind::Cycle;
  throw ConfigError("unknown task_kind '" + s + "' (expected paired-l1 or cycle)");
}

std::string to_string(TaskKind kind) { return kind == TaskKind::Cycle ? "cycle" : "paired-l1"; }

}  // namespace dmad
