#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

namespace sentwhite {

// N x d sentence embeddings, one row per sentence, rows aligned with
// sentence_ids.
struct EmbeddingMatrix {
  Eigen::MatrixXd data;
  std::vector<std::uint64_t> sentence_ids;

  Eigen::Index rows() const { return data.rows(); }
  Eigen::Index dim() const { return data.cols(); }

  // Throws DataError when the shape is empty, ids are misaligned or an entry
  // is not finite.
  void validate() const;
};

}  // namespace sentwhite
