#include "support.hpp"
#include "units/autograd.hpp"
#include "units/model.hpp"

#include <array>

using namespace units;
using units::test::random_matrix;

namespace {

// Analytic gradient of f(params) on the tape vs central differences.
using Build = std::function<ad::Var(ad::Tape&, ad::Var)>;

double op_gradient_error(const Build& f, const Matrix& p0) {
  ad::Tape tape;
  const ad::Var p = tape.parameter(p0);
  tape.backward(f(tape, p));
  const Matrix g = p.grad();
  const Vector analytic = Eigen::Map<const Vector>(g.data(), g.size());
  auto loss = [&](const Vector& flat) {
    ad::Tape t;
    return f(t, t.parameter(Eigen::Map<const Matrix>(flat.data(), p0.rows(), p0.cols()))).scalar();
  };
  const Vector numeric = finite_difference_gradient(loss, Eigen::Map<const Vector>(p0.data(), p0.size()));
  return relative_error(analytic, numeric);
}

// Sum of elementwise product with a fixed random matrix, reducing any shape to a scalar.
ad::Var probe(ad::Var v, std::uint64_t seed = 99) {
  return ad::sum(ad::mul_const(v, random_matrix(v.rows(), v.cols(), seed)));
}

}  // namespace

TEST_CASE("finite differences on closed forms") {
  auto quad = [](const Vector& p) { return p.squaredNorm(); };
  const Vector g = finite_difference_gradient(quad, Vector::Map(std::array<double, 2>{1, 2}.data(), 2));
  CHECK(std::abs(g[0] - 2) < 1e-6);
  CHECK(std::abs(g[1] - 4) < 1e-6);
  const Vector z = finite_difference_gradient([](const Vector&) { return 7.0; }, Vector::Ones(3));
  CHECK(z.isZero());
  const Vector prod = finite_difference_gradient([](const Vector& p) { return p[0] * p[1]; },
                                                 Vector::Map(std::array<double, 2>{3, 5}.data(), 2));
  CHECK(std::abs(prod[0] - 5) < 1e-6);
  CHECK(std::abs(prod[1] - 3) < 1e-6);
}

TEST_CASE("tape operations match finite differences") {
  const Matrix a = random_matrix(6, 4, 1);
  const Matrix other = random_matrix(4, 3, 2);
  const Matrix same = random_matrix(6, 4, 3);
  const Matrix row = random_matrix(1, 4, 4);
  const Matrix pos = (random_matrix(6, 4, 5).array().abs() + 0.5).matrix();
  const int targets[] = {1, 3, 0, 2, 2, 0};

  struct Case {
    const char* name;
    Build f;
    Matrix at;
  };
  const std::vector<Case> cases{
      {"matmul", [&](ad::Tape& t, ad::Var p) { return probe(ad::matmul(p, t.constant(other))); }, a},
      {"matmul rhs", [&](ad::Tape& t, ad::Var p) { return probe(ad::matmul(t.constant(a), p)); }, other},
      {"matmul_nt", [&](ad::Tape& t, ad::Var p) { return probe(ad::matmul_nt(p, t.constant(same))); }, a},
      {"add/sub/mul",
       [&](ad::Tape& t, ad::Var p) {
         const ad::Var c = t.constant(same);
         return probe(ad::mul(ad::sub(ad::add(p, c), ad::scale(c, 0.3)), p));
       },
       a},
      {"add_row", [&](ad::Tape& t, ad::Var p) { return probe(ad::add_row(t.constant(a), p)); }, row},
      {"transpose", [](ad::Tape&, ad::Var p) { return probe(ad::transpose(p)); }, a},
      {"relu", [](ad::Tape&, ad::Var p) { return probe(ad::relu(p)); }, a},
      {"square/abs", [](ad::Tape&, ad::Var p) { return probe(ad::add(ad::square(p), ad::abs(p))); }, a},
      {"exp/log", [](ad::Tape&, ad::Var p) { return probe(ad::log(ad::exp(ad::scale(p, 0.5)))); }, a},
      {"log", [](ad::Tape&, ad::Var p) { return probe(ad::log(p)); }, pos},
      {"log_sigmoid", [](ad::Tape&, ad::Var p) { return probe(ad::log_sigmoid(ad::scale(p, 3.0))); }, a},
      {"mean", [](ad::Tape&, ad::Var p) { return ad::mean(ad::square(p)); }, a},
      {"row_norms", [](ad::Tape&, ad::Var p) { return probe(ad::row_norms(p)); }, a},
      {"normalize_rows", [](ad::Tape&, ad::Var p) { return probe(ad::normalize_rows(p)); }, a},
      {"hstack/vstack",
       [](ad::Tape&, ad::Var p) {
         const std::array<ad::Var, 2> h{p, ad::square(p)};
         const std::array<ad::Var, 2> v{ad::hstack(h), ad::hstack(h)};
         return probe(ad::vstack(v));
       },
       a},
      {"slices",
       [](ad::Tape&, ad::Var p) { return probe(ad::slice_cols(ad::slice_rows(p, 1, 4), 1, 2)); }, a},
      {"reshape", [](ad::Tape&, ad::Var p) { return probe(ad::reshape(p, 3, 8)); }, a},
      {"shift_within_blocks", [](ad::Tape&, ad::Var p) { return probe(ad::shift_within_blocks(p, 3, 2)); }, a},
      {"max_pool_blocks", [](ad::Tape&, ad::Var p) { return probe(ad::max_pool_blocks(p, 3)); }, a},
      {"mean_pool_blocks", [](ad::Tape&, ad::Var p) { return probe(ad::mean_pool_blocks(p, 2)); }, a},
      {"blocks_to_rows", [](ad::Tape&, ad::Var p) { return probe(ad::blocks_to_rows(p, 3)); }, a},
      {"softmax_cross_entropy", [&](ad::Tape&, ad::Var p) { return ad::softmax_cross_entropy(p, targets); }, a},
      {"softmax_cross_entropy excluding diagonal",
       [&](ad::Tape&, ad::Var p) {
         return ad::softmax_cross_entropy(ad::slice_rows(p, 0, 4), std::span<const int>(targets, 4), true);
       },
       a},
  };
  for (const Case& c : cases) {
    CAPTURE(c.name);
    CHECK(op_gradient_error(c.f, c.at) < 1e-6);
  }
}

TEST_CASE("cross-entropy with uniform logits is ln C") {
  ad::Tape t;
  const int y[] = {0, 2};
  CHECK(ad::softmax_cross_entropy(t.constant(Matrix::Zero(2, 3)), y).scalar() == doctest::Approx(std::log(3.0)));
  CHECK_THROWS(t.backward(t.constant(Matrix::Zero(2, 2))));
}

TEST_CASE("blocks_to_rows layout is channel-major") {
  ad::Tape t;
  // two samples, three timesteps, two channels; value = 100*b + 10*c + t
  Matrix tm(6, 2);
  for (int b = 0; b < 2; ++b)
    for (int s = 0; s < 3; ++s)
      for (int c = 0; c < 2; ++c) tm(b * 3 + s, c) = 100 * b + 10 * c + s;
  const Matrix rows = ad::blocks_to_rows(t.constant(tm), 3).value();
  REQUIRE(rows.rows() == 2);
  REQUIRE(rows.cols() == 6);
  CHECK(rows(1, 0) == 100);
  CHECK(rows(1, 4) == 111);
  CHECK(rows(0, 5) == 12);
}

TEST_CASE("encoder contracts") {
  EncoderConfig cfg;
  cfg.input_dims = 2;
  cfg.hidden_width = 8;
  cfg.repr_dim = 5;
  cfg.seed = 3;
  const Encoder enc(cfg);
  const Matrix x = random_matrix(2, 12, 7);

  CHECK(enc.encode(x) == enc.encode(x));
  const Matrix seq = enc.encode_sequence(x);
  CHECK(seq.rows() == 12);
  CHECK(seq.cols() == 5);
  CHECK((enc.encode(x) - seq.colwise().maxCoeff().transpose()).norm() == 0.0);

  const Matrix reversed = x.rowwise().reverse();
  CHECK((enc.encode(x) - enc.encode(reversed)).norm() > 1e-6);

  const Matrix one = random_matrix(2, 1, 8);
  CHECK((enc.encode_sequence(one).transpose() - enc.encode(one)).norm() == 0.0);

  CHECK_THROWS_AS(enc.encode(random_matrix(3, 12, 1)), ShapeError);

  SUBCASE("no leakage across the batch") {
    std::vector<Matrix> batch;
    for (int i = 0; i < 5; ++i) batch.push_back(random_matrix(2, 12, 20 + static_cast<std::uint64_t>(i)));
    const Matrix z = enc.encode_batch(batch);
    for (int i = 0; i < 5; ++i) CHECK((z.row(i).transpose() - enc.encode(batch[static_cast<std::size_t>(i)])).norm() < 1e-6);
  }

  SUBCASE("causal: the future never reaches earlier timesteps") {
    Matrix y = x;
    y.rightCols(3).setRandom();
    const Matrix a = enc.encode_sequence(x), b = enc.encode_sequence(y);
    CHECK((a.topRows(9) - b.topRows(9)).norm() < 1e-12);
  }
}

TEST_CASE("zero-parameter mlp encodes to zero") {
  EncoderConfig cfg;
  cfg.architecture = Architecture::mlp;
  cfg.input_dims = 1;
  cfg.hidden_width = 6;
  cfg.repr_dim = 4;
  Encoder enc(cfg);
  for (auto& e : enc.parameters().entries()) e.value.setZero();
  const Matrix x = random_matrix(1, 9, 2);
  CHECK(enc.encode(x).isZero());
  CHECK(enc.encode_sequence(x).isZero());
}

TEST_CASE("encoder parameter shapes follow the config") {
  EncoderConfig cfg;
  cfg.depth = 2;
  const Encoder a(cfg), b(cfg);
  CHECK(a.parameters() == b.parameters());
  ParameterStore wrong = a.parameters();
  wrong.entries().front().value = Matrix::Zero(1, 1);
  CHECK_THROWS_AS(Encoder(cfg, wrong), ShapeError);
  cfg.depth = 0;
  CHECK_THROWS_AS(Encoder{cfg}, ParameterError);
}

TEST_CASE("gradient_step") {
  ParameterStore p;
  p.add("w", (Matrix(1, 3) << 1, 2, 3).finished());
  const Matrix g = (Matrix(1, 3) << 0.5, -1, 0).finished();

  SUBCASE("sgd") {
    OptimizerState sgd;
    sgd.algorithm = Algorithm::sgd;
    sgd.learning_rate = 0.1;
    ParameterStore q = p;
    gradient_step(q, {Matrix::Zero(1, 3)}, sgd);
    CHECK(q == p);
    gradient_step(q, {g}, sgd);
    CHECK((q["w"] - (p["w"] - 0.1 * g)).norm() < 1e-15);
    CHECK(sgd.step == 2);
  }
  SUBCASE("adam first step moves each active coordinate by lr") {
    OptimizerState adam;
    adam.learning_rate = 0.01;
    ParameterStore q = p;
    gradient_step(q, {g}, adam);
    const Matrix delta = q["w"] - p["w"];
    CHECK(delta(0, 0) == doctest::Approx(-0.01).epsilon(1e-6));
    CHECK(delta(0, 1) == doctest::Approx(0.01).epsilon(1e-6));
    CHECK(delta(0, 2) == 0.0);
    CHECK(adam.step == 1);
    CHECK(adam.first_moment.front().rows() == 1);
    CHECK(adam.second_moment.front().cols() == 3);
  }
  SUBCASE("non-finite gradient names the tensor and leaves state alone") {
    OptimizerState adam;
    ParameterStore q = p;
    Matrix bad = g;
    bad(0, 1) = std::numeric_limits<double>::infinity();
    try {
      gradient_step(q, {bad}, adam);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("'w'") != std::string::npos);
    }
    CHECK(q == p);
    CHECK(adam.step == 0);
  }
}

TEST_CASE("parameter store") {
  ParameterStore p;
  p.add("a", random_matrix(2, 3, 1));
  p.add("b", random_matrix(1, 2, 2));
  CHECK(p.total_size() == 8);
  CHECK_THROWS(p.add("a", Matrix::Zero(1, 1)));
  ParameterStore q = p;
  q.unflatten(p.flatten() * 2);
  CHECK((q["a"] - 2 * p["a"]).norm() < 1e-15);
  CHECK_THROWS_AS(q.unflatten(Vector::Zero(3)), ShapeError);
  CHECK(p.checksum() == ParameterStore(p).checksum());
  q = p;
  q["b"](0, 1) += 1e-3;
  CHECK(p.checksum() != q.checksum());
  q.round_to_float();
  CHECK(q["a"](0, 0) == static_cast<double>(static_cast<float>(p["a"](0, 0))));
}
