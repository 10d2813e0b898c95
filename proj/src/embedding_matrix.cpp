#include "sentwhite/embedding_matrix.hpp"

#include <fmt/format.h>

#include "sentwhite/errors.hpp"

namespace sentwhite {

void EmbeddingMatrix::validate() const {
  if (data.rows() < 1 || data.cols() < 1) {
    throw DataError(fmt::format("empty embedding matrix ({}x{})", data.rows(), data.cols()));
  }
  if (static_cast<Eigen::Index>(sentence_ids.size()) != data.rows()) {
    throw DataError(fmt::format("{} sentence ids for {} rows", sentence_ids.size(), data.rows()));
  }
  if (!data.allFinite()) throw DataError("embedding matrix contains non-finite values");
}

}  // namespace sentwhite
