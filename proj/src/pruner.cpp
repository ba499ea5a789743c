#include "dmad/pruner.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace dmad {

namespace {

int find_root(std::vector<int>& parent, int x) {
  while (parent[x] != x) {
    parent[x] = parent[parent[x]];
    x = parent[x];
  }
  return x;
}

std::vector<double> masks_or_ones(const ModelSpec& spec, const LayerMasks& masks, int conv) {
  const auto& l = spec.layers[conv];
  auto it = masks.find(conv);
  if (!l.masked || it == masks.end()) return std::vector<double>(l.filters, 1.0);
  if (it->second.size() != std::size_t(l.filters)) {
    throw ShapeError("mask length for layer " + l.name + " is " + std::to_string(it->second.size()) +
                     ", expected " + std::to_string(l.filters));
  }
  return it->second;
}

}  // namespace

const std::vector<int>& PruningPlan::keep_of(int conv) const {
  auto it = keep.find(conv);
  if (it == keep.end()) throw ShapeError("plan has no keep set for layer " + std::to_string(conv));
  return it->second;
}

ChannelSpaces channel_spaces(const ModelSpec& spec) {
  const int count = static_cast<int>(spec.layers.size());
  std::vector<int> raw(count, -1);
  std::vector<int> parent;
  for (int k = 0; k < count; ++k) {
    const auto& l = spec.layers[k];
    switch (l.kind) {
      case LayerKind::Conv:
        raw[k] = static_cast<int>(parent.size());
        parent.push_back(raw[k]);
        break;
      case LayerKind::ResidualAdd: {
        const int a = l.input < 0 ? -1 : raw[l.input];
        const int b = l.skip < 0 ? -1 : raw[l.skip];
        if (a < 0 || b < 0) throw ConfigError("residual add on the raw network input is not prunable");
        const int ra = find_root(parent, a), rb = find_root(parent, b);
        parent[rb] = ra;
        raw[k] = ra;
        break;
      }
      case LayerKind::Norm:
        if (l.input < 0 || spec.layers[l.input].kind != LayerKind::Conv) {
          throw ConfigError("norm layer " + l.name + " must directly follow a conv");
        }
        raw[k] = raw[l.input];
        break;
      default:
        raw[k] = l.input < 0 ? -1 : raw[l.input];
        break;
    }
  }
  // Compact the union-find roots into dense space ids.
  ChannelSpaces cs;
  cs.space_of.assign(count, -1);
  std::map<int, int> dense;
  for (int k = 0; k < count; ++k) {
    if (raw[k] < 0) continue;
    const int root = find_root(parent, raw[k]);
    auto [it, inserted] = dense.emplace(root, static_cast<int>(dense.size()));
    cs.space_of[k] = it->second;
  }
  cs.producers.resize(dense.size());
  for (int k = 0; k < count; ++k)
    if (spec.layers[k].kind == LayerKind::Conv) cs.producers[cs.space_of[k]].push_back(k);
  return cs;
}

PruningPlan derive_plan(const ModelSpec& spec, const LayerMasks& masks, const MaskGroupSet* groups) {
  if (!spec.resolved) throw ShapeError("derive_plan on unresolved spec");
  for (const auto& [layer, m] : masks) {
    for (double v : m) {
      if (v != 0.0 && v != 1.0) {
        throw StateError("derive_plan: mask of layer " + std::to_string(layer) + " is not binary (" +
                         std::to_string(v) + ")");
      }
    }
  }
  const auto cs = channel_spaces(spec);
  PruningPlan plan;
  for (const auto& producers : cs.producers) {
    const int n = spec.layers[producers.front()].filters;
    std::vector<std::vector<double>> pm;
    for (int conv : producers) {
      if (spec.layers[conv].filters != n) throw ShapeError("producers of one channel space differ in width");
      pm.push_back(masks_or_ones(spec, masks, conv));
    }
    std::vector<int> keep;
    for (int t = 0; t < n; ++t) {
      bool any = false;
      for (const auto& m : pm) any = any || m[t] == 1.0;
      if (any) keep.push_back(t);
    }
    if (keep.empty()) {
      throw StateError("derive_plan: every filter of layer " + spec.layers[producers.front()].name +
                       " is masked out");
    }
    for (std::size_t i = 0; i < producers.size(); ++i) {
      plan.keep[producers[i]] = keep;
      std::vector<int> silent;
      for (int t : keep)
        if (pm[i][t] == 0.0) silent.push_back(t);
      if (!silent.empty()) plan.silenced[producers[i]] = std::move(silent);
    }
  }
  if (groups && !groups->groups.empty()) {
    // Group t is filter t of every block's last conv.
    const auto& last = spec.block_last_convs;
    if (!last.empty()) {
      const int n = spec.layers[last.front()].filters;
      plan.group_dropped.assign(n, false);
      for (int t = 0; t < n; ++t) {
        bool all_zero = true;
        for (int conv : last) all_zero = all_zero && masks_or_ones(spec, masks, conv)[t] == 0.0;
        plan.group_dropped[t] = all_zero;
      }
    }
  }
  return plan;
}

std::vector<int> output_keep(const ModelSpec& spec, const PruningPlan& plan, int layer) {
  while (layer >= 0) {
    const auto& l = spec.layers.at(layer);
    if (l.kind == LayerKind::Conv) return plan.keep_of(layer);
    layer = l.input;
  }
  std::vector<int> all(spec.input_channels);
  std::iota(all.begin(), all.end(), 0);
  return all;
}

ModelSpec compact_spec(const ModelSpec& spec, const PruningPlan& plan) {
  ModelSpec out = spec;
  for (std::size_t k = 0; k < out.layers.size(); ++k) {
    auto& l = out.layers[k];
    if (l.kind != LayerKind::Conv) continue;
    const auto& keep = plan.keep_of(static_cast<int>(k));
    if (keep.empty()) throw ShapeError("empty keep set for layer " + l.name);
    for (std::size_t i = 0; i < keep.size(); ++i) {
      if (keep[i] < 0 || keep[i] >= spec.layers[k].filters || (i > 0 && keep[i] <= keep[i - 1])) {
        throw ShapeError("keep set of layer " + l.name + " is not a sorted subset of its filters");
      }
    }
    l.filters = static_cast<int>(keep.size());
    if (l.input >= 0) l.channels = static_cast<int>(output_keep(spec, plan, l.input).size());
    l.masked = false;
  }
  resolve_shapes(out);
  return out;
}

double residual_prune_rate(const ModelSpec& spec, const PruningPlan& plan) {
  if (spec.block_last_convs.empty()) return 0.0;
  const int conv = spec.block_last_convs.front();
  return 1.0 - double(plan.keep_of(conv).size()) / double(spec.layers[conv].filters);
}

double residual_prune_rate(const ModelSpec& spec, const LayerMasks& masks) {
  if (spec.block_last_convs.empty()) return 0.0;
  const auto cs = channel_spaces(spec);
  const int space = cs.space_of[spec.block_last_convs.front()];
  const int n = spec.layers[spec.block_last_convs.front()].filters;
  int removed = 0;
  for (int t = 0; t < n; ++t) {
    bool all_zero = true;
    for (int conv : cs.producers[space]) all_zero = all_zero && masks_or_ones(spec, masks, conv)[t] == 0.0;
    removed += all_zero;
  }
  return double(removed) / double(n);
}

CompressionReport compression_report(const ModelSpec& original, const ModelSpec& compact) {
  CompressionReport r;
  r.original = macs_params(original);
  r.compact = macs_params(compact);
  r.macs_ratio = r.compact.macs ? double(r.original.macs) / double(r.compact.macs) : 0.0;
  r.params_ratio = r.compact.params ? double(r.original.params) / double(r.compact.params) : 0.0;
  for (int conv : original.conv_ids()) {
    LayerPruneRate lr;
    lr.layer = conv;
    lr.name = original.layers[conv].name;
    lr.original_filters = original.layers[conv].filters;
    lr.kept_filters = compact.layers.at(conv).filters;
    lr.rate = 1.0 - double(lr.kept_filters) / double(lr.original_filters);
    r.layers.push_back(lr);
  }
  return r;
}

std::string plan_to_text(const PruningPlan& plan) {
  std::ostringstream os;
  for (const auto& [layer, keep] : plan.keep) {
    os << "layer " << layer << " keep ";
    for (std::size_t i = 0; i < keep.size(); ++i) os << (i ? "," : "") << keep[i];
    os << '\n';
  }
  return os.str();
}

PruningPlan plan_from_text(const std::string& text) {
  PruningPlan plan;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string word, key, list;
    int layer = -1;
    if (!(ls >> word >> layer >> key >> list) || word != "layer" || key != "keep") {
      throw FormatError("plan line " + std::to_string(line_no) + ": expected 'layer <id> keep <indices>'");
    }
    std::vector<int> keep;
    std::istringstream items(list);
    std::string item;
    while (std::getline(items, item, ',')) {
      try {
        keep.push_back(std::stoi(item));
      } catch (const std::exception&) {
        throw FormatError("plan line " + std::to_string(line_no) + ": bad index '" + item + "'");
      }
    }
    plan.keep[layer] = std::move(keep);
  }
  return plan;
}

}  // namespace dmad
