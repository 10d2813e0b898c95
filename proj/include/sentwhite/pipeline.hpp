#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sentwhite/embedding_matrix.hpp"
#include "sentwhite/hidden_states.hpp"

namespace sentwhite {

enum class Pooling { Cls, Avg };

std::string to_string(Pooling pooling);     // "CLS" / "AVG"
Pooling parse_pooling(const std::string& s);  // case-insensitive; throws ConfigError

// One row of the ablation: token pooling, which layers to average, whether to
// whiten.
struct PipelineConfig {
  Pooling pooling = Pooling::Avg;
  std::vector<std::uint32_t> layers;  // ascending, unique, non-empty
  bool whitening = false;

  auto operator<=>(const PipelineConfig&) const = default;

  // Throws ConfigError on empty/duplicate layers or a layer >= num_layers.
  // Layers are sorted in place.
  void normalize(std::uint32_t num_layers);

  // "token=AVG, layer=L1+L12, whitening=T"
  std::string describe() const;
};

// "L1+L12"
std::string format_layers(std::span<const std::uint32_t> layers);
// Parses "1,12" or "L1+L12"; throws ConfigError.
std::vector<std::uint32_t> parse_layers(const std::string& s);

// Pooled vector of one sentence at one layer: the first token for CLS, the
// mean over all tokens (first token included) for AVG.
Eigen::VectorXd pool_sentence(const HiddenStateRecord& record, std::uint32_t layer,
                              Pooling mode);

// Arithmetic mean of the per-layer vectors over `layers`.
Eigen::VectorXd combine_layers(const std::map<std::uint32_t, Eigen::VectorXd>& per_layer,
                               std::span<const std::uint32_t> layers);

enum class CovarianceScale {
  Unnormalized,  // (E - m)^T (E - m)
  PerSample,     // (1/N) (E - m)^T (E - m)
};

struct WhiteningOptions {
  // Eigenvalues below ratio * lambda_max are dropped.
  double eigen_floor_ratio = 1e-10;
  CovarianceScale scale = CovarianceScale::Unnormalized;
};

// Fitted whitening map x -> (x - mean) * rotation * diag(inv_sqrt_eigenvalues).
struct WhiteningTransform {
  Eigen::VectorXd mean;                  // d
  Eigen::MatrixXd rotation;              // d x k, descending eigenvalue order
  Eigen::VectorXd eigenvalues;           // k, descending
  Eigen::VectorXd inv_sqrt_eigenvalues;  // k

  Eigen::Index input_dim() const { return mean.size(); }
  Eigen::Index retained_dim() const { return rotation.cols(); }

  bool operator==(const WhiteningTransform& other) const;
};

WhiteningTransform fit_whitening(const EmbeddingMatrix& embeddings,
                                 const WhiteningOptions& options = {});

EmbeddingMatrix apply_whitening(const EmbeddingMatrix& embeddings,
                                const WhiteningTransform& transform);

// Binary sidecar "WHT1", little-endian, float64 values.
void write_whitening(const WhiteningTransform& transform, std::ostream& sink);
WhiteningTransform read_whitening(std::istream& source);

// Per-sentence pooled vectors for a chosen set of layers, kept in 64-bit so
// that many configurations can be embedded without re-reading the file.
class PooledCorpus {
 public:
  PooledCorpus() = default;

  // `layers` empty means every layer in the file; `modes` empty means both
  // pooling modes.
  static PooledCorpus from_records(std::span<const HiddenStateRecord> records,
                                   const HiddenStateFileHeader& header,
                                   std::vector<std::uint32_t> layers = {},
                                   std::vector<Pooling> modes = {});
  // Streams the file; only one record is resident at a time.
  static PooledCorpus from_file(const std::string& path, std::vector<std::uint32_t> layers = {},
                                std::vector<Pooling> modes = {});

  const HiddenStateFileHeader& header() const { return header_; }
  const std::vector<std::uint64_t>& sentence_ids() const { return ids_; }
  Eigen::Index size() const { return static_cast<Eigen::Index>(ids_.size()); }
  bool has_layer(std::uint32_t layer) const;
  const std::vector<std::uint32_t>& layers() const { return layers_; }

  // N x d matrix of pooled vectors at one layer.
  const Eigen::MatrixXd& pooled(std::uint32_t layer, Pooling mode) const;

  // Rows = mean over config.layers of the pooled matrices, no whitening.
  EmbeddingMatrix combine(const PipelineConfig& config) const;

 private:
  void add(const HiddenStateRecord& record, std::size_t row);

  void allocate(Eigen::Index n);

  HiddenStateFileHeader header_;
  std::vector<std::uint32_t> layers_;
  bool keep_cls_ = true;
  bool keep_avg_ = true;
  std::vector<std::uint64_t> ids_;
  std::map<std::uint32_t, Eigen::MatrixXd> cls_;
  std::map<std::uint32_t, Eigen::MatrixXd> avg_;
};

// Where the whitening transform is fitted.
struct FitCorpus {
  // nullptr: fit on the embeddings being produced (transductive).
  const EmbeddingMatrix* external = nullptr;
  WhiteningOptions options;
};

// Pools, combines and (optionally) whitens. Whitening is fitted on
// fit.external when given, otherwise on the combined matrix itself.
EmbeddingMatrix embed_pooled(const PooledCorpus& corpus, const PipelineConfig& config,
                             const FitCorpus& fit = {});

EmbeddingMatrix embed_sentences(std::span<const HiddenStateRecord> records,
                                const HiddenStateFileHeader& header, PipelineConfig config,
                                const FitCorpus& fit = {});

}  // namespace sentwhite
