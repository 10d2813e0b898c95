#include "sentwhite/synthetic.hpp"

#include <random>
#include <sstream>

#include <fmt/format.h>

#include "sentwhite/errors.hpp"

namespace sentwhite {

SyntheticFixture make_synthetic_fixture(const SyntheticOptions& options) {
  if (options.num_sentences < 2 || options.num_pairs < 2) {
    throw ConfigError("synthetic fixture needs at least 2 sentences and 2 pairs");
  }
  if (options.gold_layer >= options.num_layers) {
    throw ConfigError(fmt::format("layer out of range: gold layer {}", options.gold_layer));
  }
  if (options.max_tokens < 1) throw ConfigError("max_tokens must be >= 1");

  std::mt19937_64 rng(options.seed);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  std::uniform_int_distribution<std::uint32_t> token_count(1, options.max_tokens);
  std::uniform_int_distribution<std::uint32_t> pick(0, options.num_sentences - 1);

  // Pairs first, so sentence ids can follow first-appearance order the way
  // load_pairs assigns them.
  std::vector<std::pair<std::uint32_t, std::uint32_t>> raw_pairs;
  for (std::uint32_t i = 0; i < options.num_pairs; ++i) {
    const auto a = pick(rng);
    auto b = pick(rng);
    while (b == a) b = pick(rng);
    raw_pairs.emplace_back(a, b);
  }
  std::vector<std::int64_t> label(options.num_sentences, -1);
  std::uint32_t next_label = 0;
  for (auto [a, b] : raw_pairs) {
    if (label[a] < 0) label[a] = next_label++;
    if (label[b] < 0) label[b] = next_label++;
  }
  for (auto& l : label) {
    if (l < 0) l = next_label++;
  }

  std::vector<std::vector<float>> offsets(options.num_layers,
                                          std::vector<float>(options.hidden_dim));
  for (auto& layer : offsets) {
    for (auto& v : layer) v = 4.0f + noise(rng);
  }

  SyntheticFixture fx;
  fx.header = {kFormatVersion, options.num_layers, options.hidden_dim, RecordKind::Tokens,
               options.num_sentences};
  fx.records.resize(options.num_sentences);
  for (std::uint32_t s = 0; s < options.num_sentences; ++s) {
    const auto n = token_count(rng);
    std::vector<std::vector<std::vector<float>>> tokens(options.num_layers);
    for (std::uint32_t l = 0; l < options.num_layers; ++l) {
      tokens[l].resize(n);
      for (auto& tok : tokens[l]) {
        tok.resize(options.hidden_dim);
        for (std::uint32_t j = 0; j < options.hidden_dim; ++j) tok[j] = offsets[l][j] + noise(rng);
      }
    }
    const auto id = static_cast<std::uint64_t>(label[s]);
    fx.records[id] = make_tokens_record(id, tokens);
  }
  if (options.kind == RecordKind::Pooled) {
    fx.header.record_kind = RecordKind::Pooled;
    for (auto& r : fx.records) r = to_pooled(r);
  }

  std::ostringstream tsv;
  for (auto [a, b] : raw_pairs) {
    const auto ia = static_cast<std::uint64_t>(label[a]);
    const auto ib = static_cast<std::uint64_t>(label[b]);
    const double c = cosine_similarity(
        pool_sentence(fx.records[ia], options.gold_layer, options.gold_pooling),
        pool_sentence(fx.records[ib], options.gold_layer, options.gold_pooling));
    const double gold = 2.5 * (1.0 + c);
    tsv << fmt::format("{:.17g}\tsentence {}\tsentence {}\n", gold, ia, ib);
  }
  fx.tsv = tsv.str();
  std::istringstream in(fx.tsv);
  fx.pairs = load_pairs(in);
  return fx;
}

}  // namespace sentwhite
