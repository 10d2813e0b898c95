#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sentwhite/evaluation.hpp"
#include "sentwhite/pipeline.hpp"

namespace sentwhite {

// Inclusive range of layer indices.
struct LayerRange {
  std::uint32_t first = 1;
  std::uint32_t last = 12;

  std::size_t size() const { return last >= first ? last - first + 1 : 0; }
  std::vector<std::uint32_t> layers() const;
};

struct LayerSetGenerator {
  enum class Kind {
    AllPairs,          // every {i} and {i, j}, i < j, within the range
    AllSubsetsOfSize,  // every subset of exactly `size` layers
  };
  Kind kind = Kind::AllPairs;
  LayerRange range;
  std::uint32_t size = 2;
};

struct GridSpec {
  std::vector<Pooling> pooling_modes;
  std::vector<std::vector<std::uint32_t>> layer_sets;
  std::vector<LayerSetGenerator> generators;
  std::vector<bool> whitening_flags;
  std::vector<std::string> datasets;
};

// Explicit sets plus generated sets, each sorted, deduplicated, in
// lexicographic order. Throws ConfigError on an invalid generator.
std::vector<std::vector<std::uint32_t>> expand_layer_sets(const GridSpec& spec);

// Cartesian product ordered by pooling (CLS, AVG), layer set, whitening (F, T).
// Throws ConfigError when the product is empty.
std::vector<PipelineConfig> expand_configs(const GridSpec& spec);

struct GridResult {
  PipelineConfig config;
  std::vector<DatasetEvalResult> per_dataset;  // sorted by dataset name
  double average = 0.0;
};

enum class FitScope {
  PerDataset,  // each dataset whitened with its own fit
  Pooled,      // one fit on all datasets' embeddings together
  External,    // fit on a separate hidden-state file
};

std::string to_string(FitScope scope);
FitScope parse_fit_scope(const std::string& s);

struct EvaluationOptions {
  WhiteningOptions whitening;
  FitScope fit_scope = FitScope::PerDataset;
  std::string fit_corpus_path;  // FitScope::External only
  unsigned threads = 1;
};

struct DatasetInput {
  std::string name;
  std::string hidden_states_path;
  std::vector<SentencePairExample> pairs;
};

// Holds the pooled corpora of a set of datasets and evaluates configurations
// against them. Every configuration goes through the same code path, so a
// result computed in a grid equals the result of that config alone.
class GridEvaluator {
 public:
  // Loads only the listed layers and pooling modes of each file.
  GridEvaluator(std::vector<DatasetInput> datasets, std::vector<std::uint32_t> layers,
                std::vector<Pooling> modes, EvaluationOptions options = {});

  GridResult evaluate(PipelineConfig config) const;

  // Evaluates in parallel (options.threads workers); results follow the input
  // order. A failing config is rethrown with its description prepended.
  std::vector<GridResult> evaluate_all(std::span<const PipelineConfig> configs) const;

  const std::vector<std::string>& dataset_names() const { return names_; }
  std::uint32_t num_layers() const;
  const EvaluationOptions& options() const { return options_; }

 private:
  EvaluationOptions options_;
  std::vector<std::string> names_;
  std::vector<PooledCorpus> corpora_;
  std::vector<std::vector<SentencePairExample>> pairs_;
  PooledCorpus external_;
};

// Loads the needed layers/modes for the spec and runs every config.
std::vector<GridResult> run_grid(const GridSpec& spec,
                                 const std::map<std::string, std::string>& hidden_state_files,
                                 const std::map<std::string, std::vector<SentencePairExample>>& pairs,
                                 const EvaluationOptions& options = {});

struct Heatmap {
  std::vector<std::uint32_t> layers;
  Eigen::MatrixXd values;  // symmetric; values(i, j) = average rho of {layers[i], layers[j]}
};

// Assembles the two-layer heatmap from results matching (pooling, whitening).
// Throws DataError when a cell is missing.
Heatmap two_layer_heatmap(std::span<const GridResult> results, LayerRange range,
                          Pooling pooling, bool whitening);

struct SweepEntry {
  std::size_t k = 0;
  double best_average = 0.0;
  std::vector<std::uint32_t> best_set;
  std::string strategy;
};

// Groups results by |layers| and reports, for k = 1..K, the best average and
// the lexicographically smallest arg-max set. Throws DataError on an empty
// group.
std::vector<SweepEntry> layer_count_sweep(std::span<const GridResult> results);

struct SweepOptions {
  std::uint32_t max_k = 4;
  std::uint32_t exhaustive_max_k = 3;
  std::size_t beam_width = 20;
};

// Searches layer subsets of growing size over `range`: exhaustive up to
// exhaustive_max_k, beam search above it.
std::vector<SweepEntry> search_layer_count_sweep(const GridEvaluator& evaluator,
                                                 LayerRange range, Pooling pooling,
                                                 bool whitening, const SweepOptions& options = {});

struct DeltaRow {
  PipelineConfig config;  // whitening flag cleared
  double before = 0.0;
  double after = 0.0;
};

// Pairs every config with its whitened counterpart. Throws DataError on an
// unpaired config.
std::vector<DeltaRow> whitening_delta_report(std::span<const GridResult> results);

// "+4.80" from two correlations (0.6297, 0.6777). The delta is taken between
// the two-decimal values that are displayed.
std::string format_delta_x100(double before, double after);
// "62.97 → 67.77 (+4.80)"
std::string format_delta_row(double before, double after);

void write_grid_csv(std::ostream& out, std::span<const GridResult> results);
void write_heatmap_csv(std::ostream& out, const Heatmap& heatmap);
void write_sweep_csv(std::ostream& out, std::span<const SweepEntry> entries);
void write_delta_csv(std::ostream& out, std::span<const DeltaRow> rows);

}  // namespace sentwhite
