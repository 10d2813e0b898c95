#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "sentwhite/errors.hpp"
#include "sentwhite/evaluation.hpp"
#include "sentwhite/pipeline.hpp"
#include "sentwhite/synthetic.hpp"

using namespace sentwhite;

namespace {

EmbeddingMatrix make_matrix(const std::vector<std::vector<double>>& rows) {
  EmbeddingMatrix e;
  e.data.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      e.data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
    e.sentence_ids.push_back(i);
  }
  return e;
}

EmbeddingMatrix random_matrix(std::mt19937_64& rng, Eigen::Index n, Eigen::Index d) {
  std::normal_distribution<double> g;
  EmbeddingMatrix e;
  e.data.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) e.data(i, j) = g(rng);
  for (Eigen::Index i = 0; i < n; ++i) e.sentence_ids.push_back(static_cast<std::uint64_t>(i));
  return e;
}

double gram_identity_error(const Eigen::MatrixXd& w) {
  const Eigen::MatrixXd gram = w.transpose() * w;
  return (gram - Eigen::MatrixXd::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff();
}

HiddenStateRecord two_token_record() {
  // layer 0 and layer 1 both hold tokens [1,2] and [3,4]
  return make_tokens_record(0, {{{1, 2}, {3, 4}}, {{1, 2}, {3, 4}}});
}

}  // namespace

TEST_CASE("pool_sentence") {
  const auto r = two_token_record();
  CHECK(pool_sentence(r, 1, Pooling::Avg) == Eigen::Vector2d(2, 3));
  CHECK(pool_sentence(r, 1, Pooling::Cls) == Eigen::Vector2d(1, 2));
  CHECK_THROWS_WITH_AS(pool_sentence(r, 2, Pooling::Avg), doctest::Contains("out of range"),
                       ConfigError);

  SUBCASE("single token: CLS equals AVG") {
    std::mt19937_64 rng(3);
    std::normal_distribution<float> g;
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<std::vector<std::vector<float>>> t(3, std::vector<std::vector<float>>(1));
      for (auto& layer : t) {
        layer[0].resize(5);
        for (auto& v : layer[0]) v = g(rng);
      }
      const auto rec = make_tokens_record(1, t);
      for (std::uint32_t l = 0; l < 3; ++l) {
        CHECK(pool_sentence(rec, l, Pooling::Cls) == pool_sentence(rec, l, Pooling::Avg));
      }
    }
  }
  SUBCASE("POOLED records serve both modes") {
    const auto p = to_pooled(r);
    CHECK(pool_sentence(p, 0, Pooling::Avg) == Eigen::Vector2d(2, 3));
    CHECK(pool_sentence(p, 0, Pooling::Cls) == Eigen::Vector2d(1, 2));
  }
}

TEST_CASE("combine_layers") {
  const std::vector<std::uint32_t> l1_12{1, 12};
  CHECK(combine_layers({{1, Eigen::Vector2d(2, 0)}, {12, Eigen::Vector2d(0, 2)}}, l1_12) ==
        Eigen::Vector2d(1, 1));
  const std::vector<std::uint32_t> l12{12};
  const Eigen::Vector3d v(0.5, -1, 7);
  CHECK(combine_layers({{12, v}}, l12) == v);
  const std::vector<std::uint32_t> l1_2_12{1, 2, 12};
  CHECK(combine_layers({{1, Eigen::Vector2d(3, 3)}, {2, Eigen::Vector2d(0, 0)},
                        {12, Eigen::Vector2d(3, 3)}},
                       l1_2_12) == Eigen::Vector2d(2, 2));

  SUBCASE("permutation invariant") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g;
    std::map<std::uint32_t, Eigen::VectorXd> per_layer;
    for (std::uint32_t l = 0; l < 6; ++l) {
      Eigen::VectorXd x(4);
      for (auto& c : x) c = g(rng);
      per_layer[l] = x;
    }
    std::vector<std::uint32_t> order{0, 2, 3, 5};
    const auto base = combine_layers(per_layer, order);
    do {
      CHECK((combine_layers(per_layer, order) - base).cwiseAbs().maxCoeff() <= 1e-15);
    } while (std::next_permutation(order.begin(), order.end()));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(combine_layers({{1, Eigen::Vector2d(1, 1)}}, l1_12), ConfigError);
    CHECK_THROWS_AS(
        combine_layers({{1, Eigen::Vector2d(1, 1)}, {12, Eigen::Vector3d(1, 1, 1)}}, l1_12),
        DataError);
  }
}

TEST_CASE("PipelineConfig::normalize and layer parsing") {
  PipelineConfig c{Pooling::Avg, {12, 1}, true};
  c.normalize(13);
  CHECK(c.layers == std::vector<std::uint32_t>{1, 12});
  CHECK(c.describe() == "token=AVG, layer=L1+L12, whitening=T");

  PipelineConfig dup{Pooling::Avg, {1, 1}, false};
  CHECK_THROWS_WITH_AS(dup.normalize(13), doctest::Contains("duplicate"), ConfigError);
  PipelineConfig out{Pooling::Cls, {99}, false};
  CHECK_THROWS_WITH_AS(out.normalize(13), doctest::Contains("layer out of range"), ConfigError);
  PipelineConfig empty{Pooling::Cls, {}, false};
  CHECK_THROWS_AS(empty.normalize(13), ConfigError);

  CHECK(parse_layers("1,12") == std::vector<std::uint32_t>{1, 12});
  CHECK(parse_layers("L1+L2+L12") == std::vector<std::uint32_t>{1, 2, 12});
  CHECK_THROWS_AS(parse_layers("1,,2"), ConfigError);
  CHECK_THROWS_AS(parse_layers("x"), ConfigError);
  CHECK(parse_pooling("CLS") == Pooling::Cls);
  CHECK_THROWS_AS(parse_pooling("max"), ConfigError);
}

TEST_CASE("fit_whitening on a 1-d example") {
  const auto e = make_matrix({{1}, {3}});
  const auto t = fit_whitening(e);
  CHECK(t.mean(0) == 2.0);
  CHECK(t.retained_dim() == 1);
  CHECK(t.rotation(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(t.eigenvalues(0) == doctest::Approx(2.0).epsilon(1e-15));
  const auto w = apply_whitening(e, t);
  CHECK(w.data(0, 0) == doctest::Approx(-1.0 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK(w.data(1, 0) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));

  // (2 - 2) / sqrt(2) = 0 and (4 - 2) / sqrt(2) = sqrt(2).
  const auto applied = apply_whitening(make_matrix({{2}, {4}}), t);
  CHECK(applied.data(0, 0) == doctest::Approx(0.0));
  CHECK(applied.data(1, 0) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
}

TEST_CASE("fit_whitening rejects degenerate input") {
  CHECK_THROWS_WITH_AS(fit_whitening(make_matrix({{1, 2, 3}, {1, 2, 3}, {1, 2, 3}})),
                       doctest::Contains("degenerate"), DataError);
  // 0.1 + 0.1 + 0.1 != 0.3: centering leaves rounding residue that must not be whitened.
  CHECK_THROWS_WITH_AS(fit_whitening(make_matrix({{0.1, 0.7}, {0.1, 0.7}, {0.1, 0.7}})),
                       doctest::Contains("degenerate"), DataError);
  CHECK_THROWS_AS(fit_whitening(make_matrix({{1, 2}})), DataError);
  WhiteningOptions bad;
  bad.eigen_floor_ratio = 0.0;
  CHECK_THROWS_AS(fit_whitening(make_matrix({{1}, {3}}), bad), ConfigError);
}

TEST_CASE("whitened fit set has identity Gram matrix and zero mean") {
  std::mt19937_64 rng(17);
  const auto e = random_matrix(rng, 500, 8);
  const auto t = fit_whitening(e);
  CHECK(t.retained_dim() == 8);
  const auto w = apply_whitening(e, t);
  CHECK(gram_identity_error(w.data) <= 1e-6);
  CHECK(w.data.colwise().mean().cwiseAbs().maxCoeff() <= 1e-9);
  CHECK(w.sentence_ids == e.sentence_ids);

  SUBCASE("rotation orthonormal, scales ordered") {
    CHECK(gram_identity_error(t.rotation) <= 1e-8);
    for (Eigen::Index i = 1; i < t.retained_dim(); ++i) {
      CHECK(t.eigenvalues(i - 1) >= t.eigenvalues(i));
      CHECK(t.inv_sqrt_eigenvalues(i - 1) <= t.inv_sqrt_eigenvalues(i));
    }
    CHECK((t.inv_sqrt_eigenvalues.array() > 0).all());
  }
  SUBCASE("a row equal to the mean maps to zero") {
    EmbeddingMatrix m;
    m.data = t.mean.transpose();
    m.sentence_ids = {0};
    CHECK(apply_whitening(m, t).data.cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("dimension mismatch") {
    CHECK_THROWS_AS(apply_whitening(random_matrix(rng, 3, 7), t), DataError);
  }
}

TEST_CASE("eigendecomposition agrees with an independent Jacobi solver") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 5; ++trial) {
    const auto e = random_matrix(rng, 60, 6);
    const auto t = fit_whitening(e);
    const Eigen::MatrixXd c = e.data.rowwise() - e.data.colwise().mean();
    const Eigen::MatrixXd cov = c.transpose() * c;
    oracle::Matrix a(6, std::vector<double>(6));
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j) a[i][j] = cov(i, j);
    auto [values, vectors] = oracle::jacobi_eigen(a);
    std::vector<int> order(6);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int x, int y) { return values[x] > values[y]; });
    for (int k = 0; k < 6; ++k) {
      const int src = order[k];
      CHECK(t.eigenvalues(k) == doctest::Approx(values[src]).epsilon(1e-10));
      // Canonical sign: largest-magnitude entry positive.
      int arg = 0;
      for (int i = 1; i < 6; ++i)
        if (std::abs(vectors[i][src]) > std::abs(vectors[arg][src])) arg = i;
      const double sign = vectors[arg][src] < 0 ? -1.0 : 1.0;
      for (int i = 0; i < 6; ++i) CHECK(std::abs(t.rotation(i, k) - sign * vectors[i][src]) <= 1e-8);
    }
  }
}

TEST_CASE("rank-deficient input drops floored eigenvalues") {
  std::mt19937_64 rng(29);
  const auto e = random_matrix(rng, 5, 8);  // centered rank <= 4
  const auto t = fit_whitening(e);
  CHECK(t.retained_dim() == 4);
  const auto w = apply_whitening(e, t);
  CHECK(w.dim() == 4);
  CHECK(gram_identity_error(w.data) <= 1e-6);
}

TEST_CASE("covariance normalization only rescales the output by sqrt(N)") {
  std::mt19937_64 rng(31);
  const auto e = random_matrix(rng, 200, 10);
  WhiteningOptions per_sample;
  per_sample.scale = CovarianceScale::PerSample;
  const auto a = apply_whitening(e, fit_whitening(e));
  const auto b = apply_whitening(e, fit_whitening(e, per_sample));
  CHECK((b.data - std::sqrt(200.0) * a.data).cwiseAbs().maxCoeff() <= 1e-9);
  for (Eigen::Index i = 0; i < 20; ++i) {
    for (Eigen::Index j = i + 1; j < 20; ++j) {
      const double ca = cosine_similarity(a.data.row(i).transpose(), a.data.row(j).transpose());
      const double cb = cosine_similarity(b.data.row(i).transpose(), b.data.row(j).transpose());
      CHECK(std::abs(ca - cb) <= 1e-9);
    }
  }
}

TEST_CASE("apply_whitening is affine") {
  std::mt19937_64 rng(37);
  const auto t = fit_whitening(random_matrix(rng, 100, 5));
  const auto xy = random_matrix(rng, 2, 5);
  for (double alpha : {-1.5, 0.0, 0.3, 1.0, 2.0}) {
    EmbeddingMatrix mix;
    mix.data = alpha * xy.data.row(0) + (1 - alpha) * xy.data.row(1);
    mix.sentence_ids = {0};
    const auto w = apply_whitening(xy, t);
    const Eigen::RowVectorXd expected = alpha * w.data.row(0) + (1 - alpha) * w.data.row(1);
    CHECK((apply_whitening(mix, t).data.row(0) - expected).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("whitening fit is deterministic") {
  std::mt19937_64 rng(41);
  const auto e = random_matrix(rng, 300, 16);
  const auto t1 = fit_whitening(e);
  const auto t2 = fit_whitening(e);
  CHECK(t1 == t2);
  CHECK(apply_whitening(e, t1).data == apply_whitening(e, t2).data);
}

TEST_CASE("WHT1 transform sidecar round-trips bit-exactly") {
  std::mt19937_64 rng(43);
  const auto t = fit_whitening(random_matrix(rng, 50, 6));
  std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
  write_whitening(t, buf);
  CHECK(read_whitening(buf) == t);

  std::stringstream bad("XXXX");
  CHECK_THROWS_AS(read_whitening(bad), DataError);
  std::stringstream partial;
  write_whitening(t, partial);
  std::stringstream cut(partial.str().substr(0, 40));
  CHECK_THROWS_WITH_AS(read_whitening(cut), doctest::Contains("truncated"), DataError);
}

TEST_CASE("embed_sentences composes pooling, combination and whitening") {
  SyntheticOptions opt;
  opt.num_sentences = 30;
  opt.num_pairs = 20;
  const auto fx = make_synthetic_fixture(opt);

  SUBCASE("single sentence, single layer") {
    const HiddenStateFileHeader h{kFormatVersion, fx.header.num_layers, fx.header.hidden_dim,
                                  RecordKind::Tokens, 1};
    const auto e =
        embed_sentences(std::span(fx.records).first(1), h, {Pooling::Avg, {5}, false});
    CHECK(e.rows() == 1);
    CHECK(e.sentence_ids[0] == fx.records[0].sentence_id);
    CHECK(e.data.row(0).transpose() == pool_sentence(fx.records[0], 5, Pooling::Avg));
  }
  SUBCASE("rows equal combine_layers of per-layer pools") {
    const auto e = embed_sentences(fx.records, fx.header, {Pooling::Avg, {1, 12}, false});
    const std::vector<std::uint32_t> layers{1, 12};
    for (std::size_t i = 0; i < fx.records.size(); ++i) {
      const auto expected = combine_layers(
          {{1, pool_sentence(fx.records[i], 1, Pooling::Avg)},
           {12, pool_sentence(fx.records[i], 12, Pooling::Avg)}},
          layers);
      CHECK(e.data.row(static_cast<Eigen::Index>(i)).transpose() == expected);
    }
  }
  SUBCASE("whitened output satisfies the identity property") {
    const auto e = embed_sentences(fx.records, fx.header, {Pooling::Avg, {1, 12}, true});
    CHECK(e.dim() == fx.header.hidden_dim);
    CHECK(gram_identity_error(e.data) <= 1e-6);
    CHECK(e.data.colwise().mean().cwiseAbs().maxCoeff() <= 1e-9);
  }
  SUBCASE("external fit corpus") {
    const auto basis = embed_sentences(std::span(fx.records).first(20), fx.header,
                                       {Pooling::Avg, {3}, false});
    FitCorpus fit;
    fit.external = &basis;
    const auto e = embed_sentences(fx.records, fx.header, {Pooling::Avg, {3}, true}, fit);
    const auto raw = embed_sentences(fx.records, fx.header, {Pooling::Avg, {3}, false});
    const auto expected = apply_whitening(raw, fit_whitening(basis));
    CHECK(e.data == expected.data);
  }
  SUBCASE("config errors propagate") {
    CHECK_THROWS_AS(embed_sentences(fx.records, fx.header, {Pooling::Avg, {13}, false}),
                    ConfigError);
  }
  SUBCASE("global positive scaling leaves cosines unchanged") {
    const auto e = embed_sentences(fx.records, fx.header, {Pooling::Cls, {2, 7}, false});
    const auto a = pair_cosines(e, fx.pairs.pairs);
    auto scaled = e;
    scaled.data *= 37.5;
    const auto b = pair_cosines(scaled, fx.pairs.pairs);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-12);
  }
  SUBCASE("streamed corpus equals in-memory corpus") {
    const auto path = (std::filesystem::temp_directory_path() / "sentwhite_pipeline.whb1").string();
    write_hidden_state_file(path, fx.header, fx.records);
    const auto streamed = PooledCorpus::from_file(path);
    const auto memory = PooledCorpus::from_records(fx.records, fx.header);
    const PipelineConfig c{Pooling::Avg, {0, 4, 12}, false};
    CHECK(streamed.combine(c).data == memory.combine(c).data);
    const auto cls_only = PooledCorpus::from_file(path, {4}, {Pooling::Cls});
    CHECK_THROWS_AS(cls_only.pooled(4, Pooling::Avg), ConfigError);
    CHECK_THROWS_AS(cls_only.pooled(5, Pooling::Cls), ConfigError);
    std::filesystem::remove(path);
  }
}

TEST_CASE("embedding is bit-identical across runs") {
  const auto fx = make_synthetic_fixture({});
  const PipelineConfig c{Pooling::Avg, {1, 12}, true};
  CHECK(embed_sentences(fx.records, fx.header, c).data ==
        embed_sentences(fx.records, fx.header, c).data);
}
