#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sentwhite/evaluation.hpp"
#include "sentwhite/hidden_states.hpp"
#include "sentwhite/pipeline.hpp"

namespace sentwhite {

// Seeded generator of hidden-state files with matching STS pairs whose gold
// score is a monotone function (2.5 * (1 + cos)) of the cosine under one
// chosen pooling/layer. Layers are independent and share a large common
// offset so that the raw vectors are anisotropic.
struct SyntheticOptions {
  std::uint64_t seed = 7;
  std::uint32_t num_sentences = 40;
  std::uint32_t num_pairs = 80;
  std::uint32_t num_layers = 13;
  std::uint32_t hidden_dim = 8;
  std::uint32_t max_tokens = 6;
  RecordKind kind = RecordKind::Tokens;
  Pooling gold_pooling = Pooling::Avg;
  std::uint32_t gold_layer = 1;
};

struct SyntheticFixture {
  HiddenStateFileHeader header;
  std::vector<HiddenStateRecord> records;
  PairDataset pairs;  // ids match records' sentence_id
  std::string tsv;    // the pairs as TSV text
};

SyntheticFixture make_synthetic_fixture(const SyntheticOptions& options);

}  // namespace sentwhite
