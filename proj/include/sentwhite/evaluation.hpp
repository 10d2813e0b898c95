#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sentwhite/embedding_matrix.hpp"

namespace sentwhite {

struct SentencePairExample {
  std::uint64_t id_a = 0;
  std::uint64_t id_b = 0;
  double gold_score = 0.0;

  bool operator==(const SentencePairExample&) const = default;
};

enum class PairFormat { Tsv };

// Accepted gold-score domain.
enum class ScoreRange {
  Sts,     // [0, 5]
  Binary,  // {0, 1}
};

// Pairs plus the deduplicated sentence table; sentence id i is sentences[i],
// ids are assigned in order of first appearance.
struct PairDataset {
  std::vector<SentencePairExample> pairs;
  std::vector<std::string> sentences;
};

// Parses `gold<TAB>sentence_a<TAB>sentence_b` rows. Blank lines are skipped.
// Throws DataError with the 1-based line number on malformed rows or
// out-of-range scores.
PairDataset load_pairs(std::istream& source, PairFormat format = PairFormat::Tsv,
                       ScoreRange range = ScoreRange::Sts);
PairDataset load_pairs_file(const std::string& path, ScoreRange range = ScoreRange::Sts);

// Throws DataError on a zero vector or a dimension mismatch.
double cosine_similarity(const Eigen::Ref<const Eigen::VectorXd>& u,
                         const Eigen::Ref<const Eigen::VectorXd>& v);

// 1-based ranks; tied values share the mean of the ranks they span.
std::vector<double> fractional_ranks(std::span<const double> values);

// Pearson correlation of the fractional ranks. Throws DataError on length
// mismatch, n < 2, non-finite input or a constant sequence.
double spearman_rho(std::span<const double> predicted, std::span<const double> gold);

struct DatasetEvalResult {
  std::string dataset_name;
  double spearman_rho = 0.0;
  std::size_t n_pairs = 0;

  bool operator==(const DatasetEvalResult&) const = default;
};

// Cosine similarity of each pair's two rows. Throws DataError on unknown ids.
std::vector<double> pair_cosines(const EmbeddingMatrix& embeddings,
                                 std::span<const SentencePairExample> pairs);

DatasetEvalResult evaluate_sts(const EmbeddingMatrix& embeddings,
                               std::span<const SentencePairExample> pairs,
                               const std::string& dataset_name);

// Unweighted mean of the per-dataset correlations.
double average_rho(std::span<const DatasetEvalResult> results);

// Fraction of pairs whose prediction (cosine >= threshold) matches the binary
// gold label.
double threshold_accuracy(const EmbeddingMatrix& embeddings,
                          std::span<const SentencePairExample> pairs, double threshold);

// value * 100 with two decimals ("67.76"); never prints "-0.00".
std::string format_x100(double value);

// CSV with columns dataset,n_pairs,rho_x100.
void write_results_csv(std::ostream& out, std::span<const DatasetEvalResult> results);

}  // namespace sentwhite
