#include "support.hpp"
#include "units/pretrain.hpp"
#include "units/synthetic.hpp"

#include <set>

using namespace units;
using units::test::random_matrix;

namespace {

// Slow vs fast sines: the first two classes of the frequency/warp generator.
// a bump or a dip at a random position, buried in noise
synthetic::LabeledSeries two_regimes(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> pos(4, 27);
  std::normal_distribution<double> eps(0.0, 1.2);
  std::vector<Matrix> xs;
  synthetic::LabeledSeries out;
  for (int i = 0; i < n; ++i) {
    const int p = pos(rng);
    const double sign = i % 2 ? 1.5 : -1.5;
    Matrix x(1, 32);
    for (int t = 0; t < 32; ++t) x(0, t) = sign * std::exp(-0.25 * (t - p) * (t - p)) + eps(rng);
    xs.push_back(std::move(x));
    out.labels.push_back(i % 2);
  }
  out.data = TimeSeriesDataset(std::move(xs));
  out.num_classes = 2;
  return out;
}

double one_nn_accuracy(const Matrix& z, const std::vector<int>& y) {
  int hit = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    Eigen::Index arg = -1;
    for (Eigen::Index j = 0; j < z.rows(); ++j) {
      if (j == i) continue;
      const double d = (z.row(i) - z.row(j)).squaredNorm();
      if (d < best) best = d, arg = j;
    }
    hit += y[static_cast<std::size_t>(arg)] == y[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(hit) / static_cast<double>(z.rows());
}

PretrainTemplateConfig small(TemplateFamily f, int epochs) {
  PretrainTemplateConfig c = PretrainTemplateConfig::defaults(f, 1);
  c.encoder.hidden_width = 16;
  c.encoder.repr_dim = 16;
  c.epochs = epochs;
  return c;
}

}  // namespace

TEST_CASE("family names") {
  for (TemplateFamily f : all_template_families()) CHECK(parse_template_family(to_string(f)) == f);
  CHECK_THROWS_AS(parse_template_family("transformer"), ParameterError);
}

TEST_CASE("template config validation") {
  for (TemplateFamily f : all_template_families()) CHECK_NOTHROW(PretrainTemplateConfig::defaults(f).validate());
  PretrainTemplateConfig c = PretrainTemplateConfig::defaults(TemplateFamily::contrastive_series);
  c.temperature = 0.0;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = PretrainTemplateConfig::defaults(TemplateFamily::contrastive_series);
  c.hybrid_weight = 0.5;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = PretrainTemplateConfig::defaults(TemplateFamily::hybrid);
  CHECK(*c.hybrid_weight == 0.5);
  c.hybrid_weight.reset();
  CHECK_THROWS_AS(c.validate(), ParameterError);
}

TEST_CASE("augmentations") {
  const Matrix x = random_matrix(2, 40, 1);
  Rng rng(1);
  CHECK(augment(x, {{Augmentation::Kind::jitter, 0.0}}, rng) == x);
  CHECK(augment(x, {{Augmentation::Kind::scale, 0.0}}, rng) == x);
  for (const char* spec : {"jitter:0.1", "scale:0.2", "crop_resize:0.8", "permute_segments:4"}) {
    const Augmentation a = parse_augmentation(spec);
    CHECK(to_string(a) == spec);
    Rng r1(5), r2(5);
    const Matrix y = augment(x, {a}, r1);
    CHECK(y.rows() == 2);
    CHECK(y.cols() == 40);
    CHECK(y == augment(x, {a}, r2));
  }
  CHECK_THROWS_AS(parse_augmentation("warp:0.1"), ParameterError);
  CHECK_THROWS_AS(parse_augmentation("jitter"), ParameterError);

  const Matrix noise = augment(Matrix::Zero(1, 1000), {{Augmentation::Kind::jitter, 0.1}}, rng);
  const double mean = noise.mean();
  const double sd = std::sqrt((noise.array() - mean).square().sum() / 999.0);
  CHECK(sd >= 0.05);
  CHECK(sd <= 0.15);
}

TEST_CASE("make_batches covers every index once") {
  Rng rng(3);
  const auto batches = make_batches(33, 16, rng);
  std::multiset<int> seen;
  for (const auto& b : batches) {
    CHECK(b.size() >= 2);
    seen.insert(b.begin(), b.end());
  }
  CHECK(seen.size() == 33);
  CHECK(std::set<int>(seen.begin(), seen.end()).size() == 33);
}

TEST_CASE("fit and transform contracts") {
  const TimeSeriesDataset data = synthetic::sinusoids(24, 2, 24, 3);

  SUBCASE("zero epochs") {
    PretrainTemplateConfig c = small(TemplateFamily::contrastive_series, 0);
    c.encoder.input_dims = 2;
    const PretrainedInstance inst = fit(c, data);
    CHECK(inst.fitted());
    CHECK(inst.loss_curve().empty());
    CHECK(inst.encoder().parameters() == Encoder(c.encoder).parameters());
  }
  SUBCASE("unfitted transform is a state error") {
    PretrainTemplateConfig c = small(TemplateFamily::contrastive_series, 1);
    c.encoder.input_dims = 2;
    CHECK_THROWS_AS(make_instance(c).transform(data), StateError);
  }
  SUBCASE("every family: determinism and per-sample transform") {
    for (TemplateFamily f : all_template_families()) {
      CAPTURE(to_string(f));
      PretrainTemplateConfig c = small(f, 2);
      c.encoder.input_dims = 2;
      std::vector<std::pair<int, double>> steps;
      const PretrainedInstance a = fit(c, data, [&](int e, int s, double l) { steps.push_back({e * 1000 + s, l}); });
      const PretrainedInstance b = fit(c, data);
      REQUIRE(a.loss_curve().size() == 2);
      CHECK(a.loss_curve() == b.loss_curve());
      CHECK_FALSE(steps.empty());

      const Matrix z = a.transform(data);
      CHECK(z.rows() == 24);
      CHECK(z.cols() == 16);
      CHECK(z.allFinite());
      CHECK(z == a.transform(data));
      CHECK((z.row(5).transpose() - a.encoder().encode(data.sample(5))).norm() < 1e-9);

      const std::vector<int> dup{3, 3, 0};
      const Matrix zd = a.transform(data.subset(dup));
      CHECK(zd.row(0) == zd.row(1));
      CHECK((zd.row(2) - z.row(0)).norm() < 1e-9);
    }
  }
  SUBCASE("channel mismatch") {
    PretrainTemplateConfig c = small(TemplateFamily::contrastive_series, 1);
    CHECK_THROWS_AS(fit(c, data), ShapeError);
  }
}

TEST_CASE("transform_all aligns instances by sample") {
  const TimeSeriesDataset data = synthetic::sinusoids(10, 1, 16, 4);
  std::vector<PretrainedInstance> insts;
  PretrainTemplateConfig a = small(TemplateFamily::contrastive_series, 0);
  PretrainTemplateConfig b = small(TemplateFamily::autoregressive_mask, 0);
  b.encoder.repr_dim = 8;
  insts.push_back(fit(a, data));
  insts.push_back(fit(b, data));
  const RepresentationSet rs = transform_all(insts, data);
  CHECK(rs.size() == 10);
  CHECK(rs.matrices[0].cols() == 16);
  CHECK(rs.matrices[1].cols() == 8);
}

TEST_CASE("pre-training lowers the loss and separates regimes") {
  double raw = 0.0, learned = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    const synthetic::LabeledSeries ds = two_regimes(60, seed);
    PretrainTemplateConfig c = PretrainTemplateConfig::defaults(TemplateFamily::contrastive_series, 1);
    c.seed = seed;
    c.encoder.seed = seed;
    c.epochs = 50;
    c.encoder.hidden_width = 32;
    c.encoder.repr_dim = 32;
    const PretrainedInstance inst = fit(c, ds.data);
    CAPTURE(seed);
    CHECK(inst.loss_curve().back() < inst.loss_curve().front());
    raw += one_nn_accuracy(ds.data.flattened(), ds.labels);
    learned += one_nn_accuracy(inst.transform(ds.data), ds.labels);
  }
  MESSAGE("1-NN raw " << raw / 3 << " learned " << learned / 3);
  CHECK(learned > raw);
}
