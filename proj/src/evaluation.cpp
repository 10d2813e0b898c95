#include "sentwhite/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <unordered_map>

#include <fmt/format.h>

#include "sentwhite/errors.hpp"

namespace sentwhite {

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> cols;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      cols.push_back(line.substr(start));
      break;
    }
    cols.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return cols;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::unordered_map<std::uint64_t, Eigen::Index> row_index(const EmbeddingMatrix& e) {
  std::unordered_map<std::uint64_t, Eigen::Index> index;
  index.reserve(e.sentence_ids.size());
  for (std::size_t i = 0; i < e.sentence_ids.size(); ++i) {
    index.emplace(e.sentence_ids[i], static_cast<Eigen::Index>(i));
  }
  return index;
}

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

PairDataset load_pairs(std::istream& source, PairFormat format, ScoreRange range) {
  if (format != PairFormat::Tsv) throw ConfigError("unsupported pair format");
  PairDataset out;
  std::unordered_map<std::string, std::uint64_t> ids;
  auto intern = [&](std::string_view text) {
    auto [it, inserted] = ids.emplace(std::string(text), out.sentences.size());
    if (inserted) out.sentences.emplace_back(text);
    return it->second;
  };

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(source, line)) {
    ++line_no;
    std::string_view view(line);
    if (!view.empty() && view.back() == '\r') view.remove_suffix(1);
    if (trim(view).empty()) continue;
    const auto cols = split_tabs(view);
    if (cols.size() != 3) {
      throw DataError(
          fmt::format("line {}: expected 3 tab-separated columns, got {}", line_no, cols.size()));
    }
    const auto score_text = trim(cols[0]);
    double score = 0.0;
    const auto [ptr, ec] =
        std::from_chars(score_text.data(), score_text.data() + score_text.size(), score);
    if (ec != std::errc() || ptr != score_text.data() + score_text.size() ||
        !std::isfinite(score)) {
      throw DataError(fmt::format("line {}: cannot parse score '{}'", line_no, score_text));
    }
    if (range == ScoreRange::Sts && (score < 0.0 || score > 5.0)) {
      throw DataError(fmt::format("line {}: score {} outside [0, 5]", line_no, score));
    }
    if (range == ScoreRange::Binary && score != 0.0 && score != 1.0) {
      throw DataError(fmt::format("line {}: binary label must be 0 or 1, got {}", line_no, score));
    }
    const auto a = intern(cols[1]);
    const auto b = intern(cols[2]);
    out.pairs.push_back({a, b, score});
  }
  return out;
}

PairDataset load_pairs_file(const std::string& path, ScoreRange range) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open '{}'", path));
  try {
    return load_pairs(in, PairFormat::Tsv, range);
  } catch (const DataError& e) {
    throw DataError(fmt::format("{}: {}", path, e.what()));
  }
}

double cosine_similarity(const Eigen::Ref<const Eigen::VectorXd>& u,
                         const Eigen::Ref<const Eigen::VectorXd>& v) {
  if (u.size() != v.size()) {
    throw DataError(fmt::format("cosine: dimension mismatch {} vs {}", u.size(), v.size()));
  }
  const double nu = u.norm();
  const double nv = v.norm();
  if (nu == 0.0 || nv == 0.0) throw DataError("cosine similarity of a zero vector");
  return std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
}

std::vector<double> fractional_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    // Positions i..j-1 hold ranks i+1..j; their mean is (i+1+j)/2.
    const double rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = rank;
    i = j;
  }
  return ranks;
}

double spearman_rho(std::span<const double> predicted, std::span<const double> gold) {
  if (predicted.size() != gold.size()) {
    throw DataError(fmt::format("spearman: length mismatch {} vs {}", predicted.size(),
                                gold.size()));
  }
  if (predicted.size() < 2) throw DataError("spearman: need at least 2 observations");
  auto finite = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  if (!finite(predicted) || !finite(gold)) throw DataError("spearman: non-finite input");

  const auto rx = fractional_ranks(predicted);
  const auto ry = fractional_ranks(gold);
  const double mx = mean_of(rx);
  const double my = mean_of(ry);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mx;
    const double dy = ry[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw DataError("spearman: correlation undefined for a constant sequence");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> pair_cosines(const EmbeddingMatrix& embeddings,
                                 std::span<const SentencePairExample> pairs) {
  const auto index = row_index(embeddings);
  std::vector<double> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    const auto a = index.find(p.id_a);
    const auto b = index.find(p.id_b);
    if (a == index.end() || b == index.end()) {
      throw DataError(fmt::format("sentence id {} not present in the embeddings",
                                  a == index.end() ? p.id_a : p.id_b));
    }
    out.push_back(cosine_similarity(embeddings.data.row(a->second).transpose(),
                                    embeddings.data.row(b->second).transpose()));
  }
  return out;
}

DatasetEvalResult evaluate_sts(const EmbeddingMatrix& embeddings,
                               std::span<const SentencePairExample> pairs,
                               const std::string& dataset_name) {
  const auto predicted = pair_cosines(embeddings, pairs);
  std::vector<double> gold;
  gold.reserve(pairs.size());
  for (const auto& p : pairs) gold.push_back(p.gold_score);
  try {
    return {dataset_name, spearman_rho(predicted, gold), pairs.size()};
  } catch (const DataError& e) {
    throw DataError(fmt::format("{}: {}", dataset_name, e.what()));
  }
}

double average_rho(std::span<const DatasetEvalResult> results) {
  if (results.empty()) throw DataError("average_rho: no results");
  double sum = 0.0;
  for (const auto& r : results) sum += r.spearman_rho;
  return sum / static_cast<double>(results.size());
}

double threshold_accuracy(const EmbeddingMatrix& embeddings,
                          std::span<const SentencePairExample> pairs, double threshold) {
  if (pairs.empty()) throw DataError("threshold_accuracy: no pairs");
  for (const auto& p : pairs) {
    if (p.gold_score != 0.0 && p.gold_score != 1.0) {
      throw DataError(fmt::format("threshold_accuracy: non-binary gold label {}", p.gold_score));
    }
  }
  const auto cosines = pair_cosines(embeddings, pairs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const bool predicted = cosines[i] >= threshold;
    if (predicted == (pairs[i].gold_score == 1.0)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

std::string format_x100(double value) {
  auto s = fmt::format("{:.2f}", value * 100.0);
  if (s == "-0.00") s = "0.00";
  return s;
}

void write_results_csv(std::ostream& out, std::span<const DatasetEvalResult> results) {
  out << "dataset,n_pairs,rho_x100\n";
  for (const auto& r : results) {
    out << r.dataset_name << ',' << r.n_pairs << ',' << format_x100(r.spearman_rho) << '\n';
  }
}

}  // namespace sentwhite
