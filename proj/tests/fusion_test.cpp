#include "support.hpp"
#include "units/fusion.hpp"
#include "units/synthetic.hpp"
#include "units/tasks.hpp"

using namespace units;
using units::test::random_matrix;

TEST_CASE("concat_fuse") {
  const std::vector<Vector> one{Vector::LinSpaced(3, 1, 3)};
  CHECK(concat_fuse(one) == one[0]);
  const std::vector<Vector> two{(Vector(2) << 1, 2).finished(), (Vector(1) << 3).finished()};
  CHECK(concat_fuse(two) == Vector::LinSpaced(3, 1, 3));
  const std::vector<Vector> three{Vector::Zero(4), Vector::Zero(8), Vector::Zero(4)};
  CHECK(concat_fuse(three).size() == 16);
  CHECK_THROWS_AS(concat_fuse(std::vector<Vector>{}), ParameterError);
}

TEST_CASE("concatenation offsets and identity projection") {
  const int dims[] = {4, 8, 16};
  for (int m = 1; m <= 3; ++m) {
    std::vector<int> ks(dims, dims + m);
    std::vector<Vector> z;
    for (int i = 0; i < m; ++i) z.push_back(random_matrix(ks[static_cast<std::size_t>(i)], 1, 10 + static_cast<std::uint64_t>(i)));
    const Vector f = concat_fuse(z);
    int total = 0;
    for (int k : ks) total += k;
    CHECK(f.size() == total);
    int off = 0;
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < ks[static_cast<std::size_t>(i)]; ++j) CHECK(f[off + j] == z[static_cast<std::size_t>(i)][j]);
      off += ks[static_cast<std::size_t>(i)];
    }
    FusionConfig pc;
    pc.kind = FusionKind::projection;
    pc.output_dim = total;
    const FusionModel proj(pc, ks);
    CHECK((projection_fuse(proj, z) - f).norm() < 1e-6);

    FusionModel concat({}, ks);
    CHECK(concat.output_dim() == total);
    CHECK(concat.parameters().size() == 0);
    CHECK_FALSE(concat.learnable());
  }
}

TEST_CASE("projection arithmetic and errors") {
  FusionConfig pc;
  pc.kind = FusionKind::projection;
  pc.output_dim = 2;
  FusionModel fm(pc, {1, 1});
  fm.parameters().entries()[0].value = (Matrix(2, 2) << 1, 1, 0, 2).finished();
  fm.parameters().entries()[1].value.setZero();
  const std::vector<Vector> in{(Vector(1) << 3).finished(), (Vector(1) << 5).finished()};
  CHECK(projection_fuse(fm, in) == (Vector(2) << 8, 10).finished());

  for (auto& e : fm.parameters().entries()) e.value.setZero();
  CHECK(projection_fuse(fm, in).isZero());
  CHECK_THROWS_AS(projection_fuse(fm, {Vector::Ones(3)}), ShapeError);
  CHECK_THROWS_AS(projection_fuse(FusionModel({}, {1, 1}), in), ParameterError);

  pc.output_dim = 0;
  CHECK_THROWS_AS(FusionModel(pc, {2}), ParameterError);

  FusionConfig truncated = pc;
  truncated.output_dim = 3;
  const FusionModel t(truncated, {4, 2});
  const Vector z = random_matrix(6, 1, 1);
  CHECK((projection_fuse(t, {z.head(4), z.tail(2)}) - z.head(3)).norm() < 1e-12);
}

TEST_CASE("fusing a batch equals fusing each row") {
  FusionConfig pc;
  pc.kind = FusionKind::projection;
  pc.output_dim = 5;
  FusionModel fm(pc, {3, 4});
  for (auto& e : fm.parameters().entries()) e.value = random_matrix(e.value.rows(), e.value.cols(), 4);
  const std::vector<Matrix> reprs{random_matrix(6, 3, 1), random_matrix(6, 4, 2)};
  const Matrix all = fm.fuse(reprs);
  for (int i = 0; i < 6; ++i) {
    const Vector row = projection_fuse(fm, {reprs[0].row(i).transpose(), reprs[1].row(i).transpose()});
    CHECK((all.row(i).transpose() - row).norm() < 1e-12);
  }
  const std::vector<Matrix> mats{random_matrix(4, 2, 1), random_matrix(4, 3, 2)};
  const Matrix c = concat_fuse_rows(std::span<const Matrix>(mats));
  CHECK(c.leftCols(2) == mats[0]);
  CHECK(c.rightCols(3) == mats[1]);
}

TEST_CASE("projection weights move during fine-tuning") {
  const synthetic::LabeledSeries ds = synthetic::frequency_warp_classes(12, 16, 1);
  PretrainTemplateConfig c = PretrainTemplateConfig::defaults(TemplateFamily::contrastive_series, 1);
  c.encoder.hidden_width = 8;
  c.encoder.repr_dim = 8;
  c.epochs = 0;
  FusionConfig pc;
  pc.kind = FusionKind::projection;
  pc.output_dim = 6;
  TaskSpec spec = TaskSpec::classification(3);
  spec.epochs = 1;
  spec.batch_size = 12;
  const TaskModel before = make_task_model({fit(c, ds.data)}, pc, spec, 1, 16);
  const TaskModel after = fine_tune(before, ds.data, LabelSet::classes(ds.labels, 3));
  CHECK_FALSE(after.fusion.parameters() == before.fusion.parameters());

  pc.learnable = false;
  const TaskModel frozen = fine_tune(make_task_model({fit(c, ds.data)}, pc, spec, 1, 16), ds.data,
                                     LabelSet::classes(ds.labels, 3));
  CHECK(frozen.fusion.parameters() == make_task_model({fit(c, ds.data)}, pc, spec, 1, 16).fusion.parameters());
}
