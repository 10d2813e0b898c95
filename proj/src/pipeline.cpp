#include "sentwhite/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <fmt/format.h>

#include "byte_io.hpp"
#include "sentwhite/errors.hpp"

namespace sentwhite {

namespace {

constexpr char kWhiteningMagic[4] = {'W', 'H', 'T', '1'};
constexpr std::uint32_t kWhiteningVersion = 1;

// Writes the pooled vector of `record` at `layer` into `out` (length d).
template <typename Out>
void pool_into(const HiddenStateRecord& record, std::uint32_t layer, Pooling mode, Out&& out) {
  if (layer >= record.num_layers) {
    throw ConfigError(fmt::format("layer {} out of range (file has {} layers)", layer,
                                  record.num_layers));
  }
  if (record.token_count == 0) {
    throw DataError(fmt::format("sentence {}: token_count is 0", record.sentence_id));
  }
  const auto d = static_cast<Eigen::Index>(record.hidden_dim);
  if (mode == Pooling::Cls) {
    auto first = record.first_token(layer);
    for (Eigen::Index j = 0; j < d; ++j) out(j) = first[j];
    return;
  }
  if (record.kind == RecordKind::Pooled) {
    auto mean = record.stored_mean(layer);
    for (Eigen::Index j = 0; j < d; ++j) out(j) = mean[j];
    return;
  }
  for (Eigen::Index j = 0; j < d; ++j) out(j) = 0.0;
  for (std::uint32_t t = 0; t < record.token_count; ++t) {
    auto tok = record.token(layer, t);
    for (Eigen::Index j = 0; j < d; ++j) out(j) += tok[j];
  }
  const double n = record.token_count;
  for (Eigen::Index j = 0; j < d; ++j) out(j) /= n;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

void check_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw DataError(fmt::format("{} contains non-finite values", what));
}

}  // namespace

std::string to_string(Pooling pooling) { return pooling == Pooling::Cls ? "CLS" : "AVG"; }

Pooling parse_pooling(const std::string& s) {
  const auto v = lower(s);
  if (v == "cls") return Pooling::Cls;
  if (v == "avg") return Pooling::Avg;
  throw ConfigError(fmt::format("unknown pooling '{}' (expected cls or avg)", s));
}

void PipelineConfig::normalize(std::uint32_t num_layers) {
  if (layers.empty()) throw ConfigError("layer set is empty");
  std::sort(layers.begin(), layers.end());
  if (std::adjacent_find(layers.begin(), layers.end()) != layers.end()) {
    throw ConfigError(fmt::format("duplicate layer in {}", format_layers(layers)));
  }
  if (layers.back() >= num_layers) {
    throw ConfigError(fmt::format("layer out of range: {} (file has layers 0..{})",
                                  layers.back(), num_layers - 1));
  }
}

std::string PipelineConfig::describe() const {
  return fmt::format("token={}, layer={}, whitening={}", to_string(pooling),
                     format_layers(layers), whitening ? "T" : "F");
}

std::string format_layers(std::span<const std::uint32_t> layers) {
  std::string out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) out += '+';
    out += fmt::format("L{}", layers[i]);
  }
  return out;
}

std::vector<std::uint32_t> parse_layers(const std::string& s) {
  std::vector<std::uint32_t> out;
  std::string token;
  auto flush = [&] {
    std::string t;
    for (char c : token) {
      if (!std::isspace(static_cast<unsigned char>(c))) t += c;
    }
    token.clear();
    if (t.empty()) throw ConfigError(fmt::format("empty layer index in '{}'", s));
    if (t.front() == 'L' || t.front() == 'l') t.erase(0, 1);
    if (t.empty() || !std::all_of(t.begin(), t.end(),
                                  [](unsigned char c) { return std::isdigit(c); })) {
      throw ConfigError(fmt::format("invalid layer index '{}' in '{}'", t, s));
    }
    const auto v = std::stoull(t);
    if (v > std::numeric_limits<std::uint32_t>::max()) {
      throw ConfigError(fmt::format("layer out of range: {}", t));
    }
    out.push_back(static_cast<std::uint32_t>(v));
  };
  for (char c : s) {
    if (c == ',' || c == '+') {
      flush();
    } else {
      token += c;
    }
  }
  flush();
  return out;
}

Eigen::VectorXd pool_sentence(const HiddenStateRecord& record, std::uint32_t layer,
                              Pooling mode) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(record.hidden_dim));
  pool_into(record, layer, mode, v);
  return v;
}

Eigen::VectorXd combine_layers(const std::map<std::uint32_t, Eigen::VectorXd>& per_layer,
                               std::span<const std::uint32_t> layers) {
  if (layers.empty()) throw ConfigError("layer set is empty");
  Eigen::VectorXd sum;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto it = per_layer.find(layers[i]);
    if (it == per_layer.end()) {
      throw ConfigError(fmt::format("missing pooled vector for layer {}", layers[i]));
    }
    if (i == 0) {
      sum = it->second;
    } else {
      if (it->second.size() != sum.size()) {
        throw DataError(fmt::format("dimension mismatch at layer {}: {} vs {}", layers[i],
                                    it->second.size(), sum.size()));
      }
      sum += it->second;
    }
  }
  return sum / static_cast<double>(layers.size());
}

bool WhiteningTransform::operator==(const WhiteningTransform& other) const {
  return mean.size() == other.mean.size() && rotation.rows() == other.rotation.rows() &&
         rotation.cols() == other.rotation.cols() &&
         eigenvalues.size() == other.eigenvalues.size() && mean == other.mean &&
         rotation == other.rotation && eigenvalues == other.eigenvalues &&
         inv_sqrt_eigenvalues == other.inv_sqrt_eigenvalues;
}

WhiteningTransform fit_whitening(const EmbeddingMatrix& embeddings,
                                 const WhiteningOptions& options) {
  const Eigen::Index n = embeddings.rows();
  const Eigen::Index d = embeddings.dim();
  if (n < 2) throw DataError(fmt::format("whitening needs at least 2 embeddings, got {}", n));
  if (d < 1) throw DataError("whitening needs dimension >= 1");
  if (!(options.eigen_floor_ratio > 0.0) || !std::isfinite(options.eigen_floor_ratio)) {
    throw ConfigError("eigen_floor_ratio must be a positive finite number");
  }
  check_finite(embeddings.data, "embedding matrix");

  WhiteningTransform t;
  t.mean = embeddings.data.colwise().mean().transpose();
  const Eigen::MatrixXd centered = embeddings.data.rowwise() - t.mean.transpose();
  Eigen::MatrixXd cov = centered.transpose() * centered;
  if (options.scale == CovarianceScale::PerSample) cov /= static_cast<double>(n);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw DataError("covariance eigendecomposition failed");
  const Eigen::VectorXd& ascending = solver.eigenvalues();
  const Eigen::MatrixXd& vectors = solver.eigenvectors();

  const double lambda_max = ascending(d - 1);
  // Centering identical rows leaves only rounding residue of order N*eps*|x|.
  const double eps = std::numeric_limits<double>::epsilon();
  const double residue = static_cast<double>(n) * eps * embeddings.data.cwiseAbs().maxCoeff();
  double noise_level = static_cast<double>(n) * static_cast<double>(d) * residue * residue;
  if (options.scale == CovarianceScale::PerSample) noise_level /= static_cast<double>(n);
  if (!(lambda_max > noise_level)) {
    throw DataError("degenerate input: all covariance eigenvalues are below the floor");
  }
  const double floor = options.eigen_floor_ratio * lambda_max;

  Eigen::Index k = 0;
  while (k < d && ascending(d - 1 - k) >= floor) ++k;

  t.rotation.resize(d, k);
  t.eigenvalues.resize(k);
  t.inv_sqrt_eigenvalues.resize(k);
  for (Eigen::Index c = 0; c < k; ++c) {
    const Eigen::Index src = d - 1 - c;
    Eigen::VectorXd v = vectors.col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    t.rotation.col(c) = v;
    t.eigenvalues(c) = ascending(src);
    t.inv_sqrt_eigenvalues(c) = 1.0 / std::sqrt(ascending(src));
  }
  return t;
}

EmbeddingMatrix apply_whitening(const EmbeddingMatrix& embeddings,
                                const WhiteningTransform& transform) {
  if (embeddings.dim() != transform.input_dim()) {
    throw DataError(fmt::format("dimension mismatch: embeddings have d={}, transform expects {}",
                                embeddings.dim(), transform.input_dim()));
  }
  EmbeddingMatrix out;
  out.sentence_ids = embeddings.sentence_ids;
  const Eigen::MatrixXd centered = embeddings.data.rowwise() - transform.mean.transpose();
  out.data = centered * transform.rotation;
  out.data.array().rowwise() *= transform.inv_sqrt_eigenvalues.transpose().array();
  return out;
}

void write_whitening(const WhiteningTransform& transform, std::ostream& sink) {
  const auto d = static_cast<std::uint32_t>(transform.input_dim());
  const auto k = static_cast<std::uint32_t>(transform.retained_dim());
  sink.write(kWhiteningMagic, sizeof(kWhiteningMagic));
  detail::put_le(sink, kWhiteningVersion);
  detail::put_le(sink, d);
  detail::put_le(sink, k);
  for (Eigen::Index i = 0; i < transform.mean.size(); ++i) detail::put_f64(sink, transform.mean(i));
  for (Eigen::Index c = 0; c < transform.rotation.cols(); ++c) {
    for (Eigen::Index r = 0; r < transform.rotation.rows(); ++r) {
      detail::put_f64(sink, transform.rotation(r, c));
    }
  }
  for (Eigen::Index i = 0; i < k; ++i) detail::put_f64(sink, transform.eigenvalues(i));
  for (Eigen::Index i = 0; i < k; ++i) detail::put_f64(sink, transform.inv_sqrt_eigenvalues(i));
  if (!sink) throw DataError("write failed on whitening transform");
}

WhiteningTransform read_whitening(std::istream& source) {
  char magic[4] = {};
  source.read(magic, sizeof(magic));
  if (source.gcount() != sizeof(magic) ||
      !std::equal(std::begin(magic), std::end(magic), std::begin(kWhiteningMagic))) {
    throw DataError("bad magic: not a WHT1 whitening file");
  }
  std::uint32_t version = 0, d = 0, k = 0;
  if (!detail::get_le(source, version) || !detail::get_le(source, d) ||
      !detail::get_le(source, k)) {
    throw DataError("truncated WHT1 header");
  }
  if (version != kWhiteningVersion) {
    throw DataError(fmt::format("unsupported WHT1 version {}", version));
  }
  if (d == 0 || k == 0 || k > d) throw DataError(fmt::format("invalid WHT1 shape d={} k={}", d, k));
  WhiteningTransform t;
  t.mean.resize(d);
  t.rotation.resize(d, k);
  t.eigenvalues.resize(k);
  t.inv_sqrt_eigenvalues.resize(k);
  auto get = [&](double& v) {
    if (!detail::get_f64(source, v)) throw DataError("truncated WHT1 payload");
  };
  for (std::uint32_t i = 0; i < d; ++i) get(t.mean(i));
  for (std::uint32_t c = 0; c < k; ++c) {
    for (std::uint32_t r = 0; r < d; ++r) get(t.rotation(r, c));
  }
  for (std::uint32_t i = 0; i < k; ++i) get(t.eigenvalues(i));
  for (std::uint32_t i = 0; i < k; ++i) get(t.inv_sqrt_eigenvalues(i));
  if (!t.mean.allFinite() || !t.rotation.allFinite() || !t.inv_sqrt_eigenvalues.allFinite() ||
      (t.inv_sqrt_eigenvalues.array() <= 0).any()) {
    throw DataError("WHT1 payload contains invalid values");
  }
  return t;
}

PooledCorpus PooledCorpus::from_records(std::span<const HiddenStateRecord> records,
                                        const HiddenStateFileHeader& header,
                                        std::vector<std::uint32_t> layers,
                                        std::vector<Pooling> modes) {
  PooledCorpus c;
  if (!modes.empty()) {
    c.keep_cls_ = std::find(modes.begin(), modes.end(), Pooling::Cls) != modes.end();
    c.keep_avg_ = std::find(modes.begin(), modes.end(), Pooling::Avg) != modes.end();
  }
  c.header_ = header;
  c.header_.validate();
  if (layers.empty()) {
    for (std::uint32_t l = 0; l < header.num_layers; ++l) layers.push_back(l);
  }
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  if (layers.back() >= header.num_layers) {
    throw ConfigError(fmt::format("layer out of range: {} (file has layers 0..{})",
                                  layers.back(), header.num_layers - 1));
  }
  c.layers_ = std::move(layers);
  c.allocate(static_cast<Eigen::Index>(records.size()));
  for (std::size_t i = 0; i < records.size(); ++i) c.add(records[i], i);
  return c;
}

PooledCorpus PooledCorpus::from_file(const std::string& path, std::vector<std::uint32_t> layers,
                                     std::vector<Pooling> modes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open '{}'", path));
  HiddenStateReader reader(in);
  const auto& header = reader.header();
  PooledCorpus c = from_records({}, header, std::move(layers), std::move(modes));
  c.allocate(static_cast<Eigen::Index>(header.num_sentences));
  std::size_t row = 0;
  while (auto rec = reader.next()) c.add(*rec, row++);
  return c;
}

void PooledCorpus::allocate(Eigen::Index n) {
  const auto d = static_cast<Eigen::Index>(header_.hidden_dim);
  for (auto l : layers_) {
    if (keep_cls_) cls_[l].resize(n, d);
    if (keep_avg_) avg_[l].resize(n, d);
  }
  ids_.clear();
  ids_.reserve(static_cast<std::size_t>(n));
}

void PooledCorpus::add(const HiddenStateRecord& record, std::size_t row) {
  if (record.kind != header_.record_kind || record.num_layers != header_.num_layers ||
      record.hidden_dim != header_.hidden_dim) {
    throw DataError(fmt::format("sentence {}: record does not match header", record.sentence_id));
  }
  const auto r = static_cast<Eigen::Index>(row);
  for (auto l : layers_) {
    if (keep_cls_) pool_into(record, l, Pooling::Cls, cls_[l].row(r));
    if (keep_avg_) pool_into(record, l, Pooling::Avg, avg_[l].row(r));
  }
  ids_.push_back(record.sentence_id);
}

bool PooledCorpus::has_layer(std::uint32_t layer) const {
  return std::binary_search(layers_.begin(), layers_.end(), layer);
}

const Eigen::MatrixXd& PooledCorpus::pooled(std::uint32_t layer, Pooling mode) const {
  const auto& table = mode == Pooling::Cls ? cls_ : avg_;
  auto it = table.find(layer);
  if (it == table.end()) {
    throw ConfigError(fmt::format("layer {} ({}) was not loaded into the pooled corpus", layer,
                                  to_string(mode)));
  }
  return it->second;
}

EmbeddingMatrix PooledCorpus::combine(const PipelineConfig& config) const {
  if (config.layers.empty()) throw ConfigError("layer set is empty");
  if (ids_.empty()) throw DataError("no sentences to embed");
  EmbeddingMatrix out;
  out.sentence_ids = ids_;
  out.data = pooled(config.layers.front(), config.pooling);
  for (std::size_t i = 1; i < config.layers.size(); ++i) {
    out.data += pooled(config.layers[i], config.pooling);
  }
  out.data /= static_cast<double>(config.layers.size());
  return out;
}

EmbeddingMatrix embed_pooled(const PooledCorpus& corpus, const PipelineConfig& config,
                             const FitCorpus& fit) {
  EmbeddingMatrix e = corpus.combine(config);
  if (!config.whitening) return e;
  const EmbeddingMatrix& basis = fit.external ? *fit.external : e;
  return apply_whitening(e, fit_whitening(basis, fit.options));
}

EmbeddingMatrix embed_sentences(std::span<const HiddenStateRecord> records,
                                const HiddenStateFileHeader& header, PipelineConfig config,
                                const FitCorpus& fit) {
  config.normalize(header.num_layers);
  const auto corpus = PooledCorpus::from_records(records, header, config.layers);
  return embed_pooled(corpus, config, fit);
}

}  // namespace sentwhite
