#include "sentwhite/ablation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <ostream>
#include <set>

#include <fmt/format.h>

#include "sentwhite/errors.hpp"
#include "sentwhite/parallel.hpp"

namespace sentwhite {

namespace {

using LayerSet = std::vector<std::uint32_t>;

void check_range(const LayerRange& range) {
  if (range.last < range.first) {
    throw ConfigError(fmt::format("empty layer range {}..{}", range.first, range.last));
  }
}

// All k-subsets of `pool` in lexicographic order.
void subsets_of_size(const LayerSet& pool, std::size_t k, std::vector<LayerSet>& out) {
  if (k == 0 || k > pool.size()) return;
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = i;
  while (true) {
    LayerSet s;
    s.reserve(k);
    for (auto i : idx) s.push_back(pool[i]);
    out.push_back(std::move(s));
    std::size_t pos = k;
    while (pos > 0 && idx[pos - 1] == pool.size() - k + pos - 1) --pos;
    if (pos == 0) return;
    ++idx[pos - 1];
    for (std::size_t i = pos; i < k; ++i) idx[i] = idx[i - 1] + 1;
  }
}

template <typename E>
[[noreturn]] void rethrow_named(const PipelineConfig& config, const E& e) {
  throw E(fmt::format("config [{}]: {}", config.describe(), e.what()));
}

std::string round_x100(double v) { return format_x100(v); }

// Orders by average descending, then layer set ascending.
bool better(const GridResult& a, const GridResult& b) {
  if (a.average != b.average) return a.average > b.average;
  return a.config.layers < b.config.layers;
}

}  // namespace

std::vector<std::uint32_t> LayerRange::layers() const {
  std::vector<std::uint32_t> out;
  for (std::uint32_t l = first; l <= last && last >= first; ++l) out.push_back(l);
  return out;
}

std::vector<std::vector<std::uint32_t>> expand_layer_sets(const GridSpec& spec) {
  std::set<LayerSet> sets;
  for (auto s : spec.layer_sets) {
    if (s.empty()) throw ConfigError("empty layer set in grid spec");
    std::sort(s.begin(), s.end());
    if (std::adjacent_find(s.begin(), s.end()) != s.end()) {
      throw ConfigError(fmt::format("duplicate layer in set {}", format_layers(s)));
    }
    sets.insert(std::move(s));
  }
  for (const auto& gen : spec.generators) {
    check_range(gen.range);
    const auto pool = gen.range.layers();
    std::vector<LayerSet> generated;
    if (gen.kind == LayerSetGenerator::Kind::AllPairs) {
      subsets_of_size(pool, 1, generated);
      subsets_of_size(pool, 2, generated);
    } else {
      if (gen.size < 1 || gen.size > pool.size()) {
        throw ConfigError(fmt::format("subset size {} invalid for {} layers", gen.size,
                                      pool.size()));
      }
      subsets_of_size(pool, gen.size, generated);
    }
    sets.insert(generated.begin(), generated.end());
  }
  return {sets.begin(), sets.end()};
}

std::vector<PipelineConfig> expand_configs(const GridSpec& spec) {
  const std::set<Pooling> poolings(spec.pooling_modes.begin(), spec.pooling_modes.end());
  const std::set<bool> flags(spec.whitening_flags.begin(), spec.whitening_flags.end());
  const auto sets = expand_layer_sets(spec);
  std::vector<PipelineConfig> out;
  for (auto p : poolings) {
    for (const auto& s : sets) {
      for (bool w : flags) out.push_back({p, s, w});
    }
  }
  if (out.empty()) {
    throw ConfigError(fmt::format(
        "grid product is empty ({} pooling modes x {} layer sets x {} whitening flags)",
        poolings.size(), sets.size(), flags.size()));
  }
  return out;
}

std::string to_string(FitScope scope) {
  switch (scope) {
    case FitScope::PerDataset:
      return "per_dataset";
    case FitScope::Pooled:
      return "pooled";
    case FitScope::External:
      return "external";
  }
  return "unknown";
}

FitScope parse_fit_scope(const std::string& s) {
  if (s == "per_dataset") return FitScope::PerDataset;
  if (s == "pooled") return FitScope::Pooled;
  if (s == "external") return FitScope::External;
  throw ConfigError(fmt::format("unknown fit scope '{}' (per_dataset, pooled, external)", s));
}

GridEvaluator::GridEvaluator(std::vector<DatasetInput> datasets,
                             std::vector<std::uint32_t> layers, std::vector<Pooling> modes,
                             EvaluationOptions options)
    : options_(std::move(options)) {
  if (datasets.empty()) throw ConfigError("no datasets to evaluate");
  std::sort(datasets.begin(), datasets.end(),
            [](const DatasetInput& a, const DatasetInput& b) { return a.name < b.name; });
  for (std::size_t i = 1; i < datasets.size(); ++i) {
    if (datasets[i].name == datasets[i - 1].name) {
      throw ConfigError(fmt::format("dataset '{}' listed twice", datasets[i].name));
    }
  }
  for (auto& ds : datasets) {
    try {
      corpora_.push_back(PooledCorpus::from_file(ds.hidden_states_path, layers, modes));
    } catch (const ConfigError& e) {
      throw ConfigError(fmt::format("{}: {}", ds.name, e.what()));
    } catch (const DataError& e) {
      throw DataError(fmt::format("{}: {}", ds.name, e.what()));
    }
    names_.push_back(std::move(ds.name));
    pairs_.push_back(std::move(ds.pairs));
  }
  if (options_.fit_scope == FitScope::External) {
    if (options_.fit_corpus_path.empty()) {
      throw ConfigError("external fit scope requires a fit corpus path");
    }
    external_ = PooledCorpus::from_file(options_.fit_corpus_path, layers, modes);
  }
}

std::uint32_t GridEvaluator::num_layers() const {
  std::uint32_t n = corpora_.front().header().num_layers;
  for (const auto& c : corpora_) n = std::min(n, c.header().num_layers);
  return n;
}

GridResult GridEvaluator::evaluate(PipelineConfig config) const {
  try {
    for (const auto& c : corpora_) config.normalize(c.header().num_layers);
    std::vector<EmbeddingMatrix> embedded;
    embedded.reserve(corpora_.size());
    for (const auto& c : corpora_) embedded.push_back(c.combine(config));

    if (config.whitening) {
      if (options_.fit_scope == FitScope::PerDataset) {
        for (auto& e : embedded) e = apply_whitening(e, fit_whitening(e, options_.whitening));
      } else {
        EmbeddingMatrix basis;
        if (options_.fit_scope == FitScope::External) {
          basis = external_.combine(config);
        } else {
          Eigen::Index total = 0;
          for (const auto& e : embedded) total += e.rows();
          basis.data.resize(total, embedded.front().dim());
          Eigen::Index row = 0;
          for (const auto& e : embedded) {
            basis.data.middleRows(row, e.rows()) = e.data;
            basis.sentence_ids.insert(basis.sentence_ids.end(), e.sentence_ids.begin(),
                                      e.sentence_ids.end());
            row += e.rows();
          }
        }
        const auto transform = fit_whitening(basis, options_.whitening);
        for (auto& e : embedded) e = apply_whitening(e, transform);
      }
    }

    GridResult result;
    for (std::size_t i = 0; i < corpora_.size(); ++i) {
      result.per_dataset.push_back(evaluate_sts(embedded[i], pairs_[i], names_[i]));
    }
    result.average = average_rho(result.per_dataset);
    result.config = std::move(config);
    return result;
  } catch (const ConfigError& e) {
    rethrow_named(config, e);
  } catch (const DataError& e) {
    rethrow_named(config, e);
  }
}

std::vector<GridResult> GridEvaluator::evaluate_all(std::span<const PipelineConfig> configs) const {
  std::vector<GridResult> out(configs.size());
  parallel_for(configs.size(), options_.threads,
               [&](std::size_t i) { out[i] = evaluate(configs[i]); });
  return out;
}

std::vector<GridResult> run_grid(const GridSpec& spec,
                                 const std::map<std::string, std::string>& hidden_state_files,
                                 const std::map<std::string, std::vector<SentencePairExample>>& pairs,
                                 const EvaluationOptions& options) {
  const auto configs = expand_configs(spec);
  if (spec.datasets.empty()) throw ConfigError("grid spec names no datasets");
  std::vector<DatasetInput> inputs;
  for (const auto& name : spec.datasets) {
    auto file = hidden_state_files.find(name);
    auto p = pairs.find(name);
    if (file == hidden_state_files.end()) {
      throw ConfigError(fmt::format("dataset '{}' has no hidden-state file", name));
    }
    if (p == pairs.end()) throw ConfigError(fmt::format("dataset '{}' has no pairs", name));
    inputs.push_back({name, file->second, p->second});
  }
  std::set<std::uint32_t> layers;
  std::set<Pooling> modes;
  for (const auto& c : configs) {
    layers.insert(c.layers.begin(), c.layers.end());
    modes.insert(c.pooling);
  }
  GridEvaluator evaluator(std::move(inputs), {layers.begin(), layers.end()},
                          {modes.begin(), modes.end()}, options);
  return evaluator.evaluate_all(configs);
}

Heatmap two_layer_heatmap(std::span<const GridResult> results, LayerRange range,
                          Pooling pooling, bool whitening) {
  check_range(range);
  Heatmap h;
  h.layers = range.layers();
  const auto n = static_cast<Eigen::Index>(h.layers.size());
  h.values = Eigen::MatrixXd::Constant(n, n, std::nan(""));
  std::map<LayerSet, double> by_set;
  for (const auto& r : results) {
    if (r.config.pooling == pooling && r.config.whitening == whitening) {
      by_set.emplace(r.config.layers, r.average);
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) {
      LayerSet key = i == j ? LayerSet{h.layers[i]} : LayerSet{h.layers[i], h.layers[j]};
      auto it = by_set.find(key);
      if (it == by_set.end()) {
        throw DataError(fmt::format("heatmap: no result for token={}, layer={}, whitening={}",
                                    to_string(pooling), format_layers(key),
                                    whitening ? "T" : "F"));
      }
      h.values(i, j) = h.values(j, i) = it->second;
    }
  }
  return h;
}

std::vector<SweepEntry> layer_count_sweep(std::span<const GridResult> results) {
  std::map<std::size_t, const GridResult*> best;
  for (const auto& r : results) {
    const auto k = r.config.layers.size();
    auto [it, inserted] = best.emplace(k, &r);
    if (!inserted && better(r, *it->second)) it->second = &r;
  }
  if (best.empty()) throw DataError("layer-count sweep: no results");
  const std::size_t max_k = best.rbegin()->first;
  std::vector<SweepEntry> out;
  for (std::size_t k = 1; k <= max_k; ++k) {
    auto it = best.find(k);
    if (it == best.end()) {
      throw DataError(fmt::format("layer-count sweep: no results with {} layers", k));
    }
    out.push_back({k, it->second->average, it->second->config.layers, "given"});
  }
  return out;
}

std::vector<SweepEntry> search_layer_count_sweep(const GridEvaluator& evaluator,
                                                 LayerRange range, Pooling pooling,
                                                 bool whitening, const SweepOptions& options) {
  check_range(range);
  const auto pool = range.layers();
  if (options.max_k < 1 || options.max_k > pool.size()) {
    throw ConfigError(fmt::format("sweep size {} invalid for {} layers", options.max_k,
                                  pool.size()));
  }
  if (options.beam_width < 1) throw ConfigError("beam width must be >= 1");

  std::vector<SweepEntry> out;
  std::vector<GridResult> previous;
  for (std::uint32_t k = 1; k <= options.max_k; ++k) {
    std::vector<LayerSet> candidates;
    std::string strategy;
    if (k <= options.exhaustive_max_k || previous.empty()) {
      subsets_of_size(pool, k, candidates);
      strategy = "exhaustive";
    } else {
      std::sort(previous.begin(), previous.end(), better);
      const auto width = std::min(options.beam_width, previous.size());
      std::set<LayerSet> extended;
      for (std::size_t b = 0; b < width; ++b) {
        for (auto l : pool) {
          const auto& base = previous[b].config.layers;
          if (std::binary_search(base.begin(), base.end(), l)) continue;
          LayerSet s = base;
          s.insert(std::upper_bound(s.begin(), s.end(), l), l);
          extended.insert(std::move(s));
        }
      }
      candidates.assign(extended.begin(), extended.end());
      strategy = fmt::format("beam{}", options.beam_width);
    }
    std::vector<PipelineConfig> configs;
    configs.reserve(candidates.size());
    for (auto& s : candidates) configs.push_back({pooling, std::move(s), whitening});
    previous = evaluator.evaluate_all(configs);
    const auto& top = *std::min_element(previous.begin(), previous.end(), better);
    out.push_back({k, top.average, top.config.layers, strategy});
  }
  return out;
}

std::vector<DeltaRow> whitening_delta_report(std::span<const GridResult> results) {
  std::map<std::pair<Pooling, LayerSet>, std::pair<const GridResult*, const GridResult*>> paired;
  for (const auto& r : results) {
    auto& slot = paired[{r.config.pooling, r.config.layers}];
    (r.config.whitening ? slot.second : slot.first) = &r;
  }
  std::vector<DeltaRow> out;
  for (const auto& [key, slot] : paired) {
    if (!slot.first || !slot.second) {
      throw DataError(fmt::format("token={}, layer={} has no {} counterpart",
                                  to_string(key.first), format_layers(key.second),
                                  slot.first ? "whitened" : "unwhitened"));
    }
    out.push_back({{key.first, key.second, false}, slot.first->average, slot.second->average});
  }
  if (out.empty()) throw DataError("whitening delta report: no results");
  return out;
}

std::string format_delta_x100(double before, double after) {
  const double b = std::round(before * 10000.0);
  const double a = std::round(after * 10000.0);
  const double delta = (a - b) / 100.0;
  auto s = fmt::format("{:+.2f}", delta);
  if (s == "-0.00") s = "+0.00";
  return s;
}

std::string format_delta_row(double before, double after) {
  return fmt::format("{} → {} ({})", round_x100(before), round_x100(after),
                     format_delta_x100(before, after));
}

void write_grid_csv(std::ostream& out, std::span<const GridResult> results) {
  out << "pooling,layers,whitening";
  if (!results.empty()) {
    for (const auto& d : results.front().per_dataset) out << ',' << d.dataset_name;
  }
  out << ",avg\n";
  for (const auto& r : results) {
    out << to_string(r.config.pooling) << ',' << format_layers(r.config.layers) << ','
        << (r.config.whitening ? 'T' : 'F');
    for (const auto& d : r.per_dataset) out << ',' << format_x100(d.spearman_rho);
    out << ',' << format_x100(r.average) << '\n';
  }
}

void write_heatmap_csv(std::ostream& out, const Heatmap& heatmap) {
  out << "layer";
  for (auto l : heatmap.layers) out << ",L" << l;
  out << '\n';
  for (std::size_t i = 0; i < heatmap.layers.size(); ++i) {
    out << 'L' << heatmap.layers[i];
    for (std::size_t j = 0; j < heatmap.layers.size(); ++j) {
      out << ','
          << format_x100(heatmap.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    }
    out << '\n';
  }
}

void write_sweep_csv(std::ostream& out, std::span<const SweepEntry> entries) {
  out << "k,best_avg,best_set,strategy\n";
  for (const auto& e : entries) {
    out << e.k << ',' << format_x100(e.best_average) << ',' << format_layers(e.best_set) << ','
        << e.strategy << '\n';
  }
}

void write_delta_csv(std::ostream& out, std::span<const DeltaRow> rows) {
  out << "pooling,layers,before,after,delta,report\n";
  for (const auto& r : rows) {
    out << to_string(r.config.pooling) << ',' << format_layers(r.config.layers) << ','
        << format_x100(r.before) << ',' << format_x100(r.after) << ','
        << format_delta_x100(r.before, r.after) << ',' << format_delta_row(r.before, r.after)
        << '\n';
  }
}

}  // namespace sentwhite
