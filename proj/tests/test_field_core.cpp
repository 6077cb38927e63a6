#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "groupwarp/affine.hpp"
#include "groupwarp/interp.hpp"
#include "groupwarp/softmax.hpp"
#include "groupwarp/volume.hpp"
#include "support.hpp"

using namespace gw;

TEST_CASE("identity deformation reproduces the volume exactly") {
  auto g = gwtest::rng(1);
  Dims d{5, 4, 3};
  ArrayXX<double> src = gwtest::random_array(nvox(d), 2, g);
  auto id = identity_deformation(d);
  ArrayXX<double> out = pull(src, d, id.map, Boundary::Clamp);
  CHECK((out - src).abs().maxCoeff() == 0.0);
}

TEST_CASE("pull is exact on linear fields at fractional coordinates") {
  Dims d{8, 8, 8};
  ArrayXX<double> src(nvox(d), 1);
  Index i = 0;
  for (Index z = 0; z < 8; ++z)
    for (Index y = 0; y < 8; ++y)
      for (Index x = 0; x < 8; ++x, ++i) src(i, 0) = 2.0 * x - 0.5 * y + 3.0 * z + 1.0;

  ArrayX3<double> map(2, 3);
  map.row(0) << 3.5, 2.25, 0.75;
  map.row(1) << 0.0, 6.9, 5.1;
  ArrayXX<double> out = pull(src, d, map, Boundary::Clamp);
  CHECK(out(0, 0) == doctest::Approx(2.0 * 3.5 - 0.5 * 2.25 + 3.0 * 0.75 + 1.0).epsilon(1e-12));
  CHECK(out(1, 0) == doctest::Approx(2.0 * 0.0 - 0.5 * 6.9 + 3.0 * 5.1 + 1.0).epsilon(1e-12));
}

TEST_CASE("out-of-range sampling: Zero gives 0, Clamp gives the edge value") {
  Dims d{4, 4, 4};
  ArrayXX<double> src = ArrayXX<double>::Constant(nvox(d), 1, 7.0);
  ArrayX3<double> map(3, 3);
  map.row(0) << -2.0, 1.0, 1.0;
  map.row(1) << 1.0, 9.5, 1.0;
  map.row(2) << 1.0, 1.0, 3.4;  // partially outside cell at the top face
  CHECK(pull(src, d, map, Boundary::Zero)(0, 0) == 0.0);
  CHECK(pull(src, d, map, Boundary::Zero)(1, 0) == 0.0);
  CHECK(pull(src, d, map, Boundary::Zero)(2, 0) == doctest::Approx(7.0 * 0.6).epsilon(1e-12));
  CHECK(pull(src, d, map, Boundary::Clamp)(0, 0) == 7.0);
  CHECK(pull(src, d, map, Boundary::Clamp)(1, 0) == 7.0);
  CHECK(pull(src, d, map, Boundary::Clamp)(2, 0) == 7.0);
}

TEST_CASE("NaN propagates from source data, never from geometry") {
  Dims d{4, 4, 4};
  ArrayXX<double> src = ArrayXX<double>::Constant(nvox(d), 1, 1.0);
  src(flat(d, 2, 2, 2), 0) = std::numeric_limits<double>::quiet_NaN();
  ArrayX3<double> map(3, 3);
  map.row(0) << 1.7, 2.0, 2.0;   // cell touches the NaN voxel with weight .7
  map.row(1) << 0.25, 0.25, 0.25;  // far from it
  map.row(2) << -3.0, 0.0, 0.0;  // outside, Zero boundary
  ArrayXX<double> out = pull(src, d, map, Boundary::Clamp);
  CHECK(std::isnan(out(0, 0)));
  CHECK(out(1, 0) == 1.0);
  CHECK_FALSE(std::isnan(pull(src, d, map, Boundary::Zero)(2, 0)));

  ArrayX3<double> bad(1, 3);
  bad.row(0) << 1.0, std::numeric_limits<double>::quiet_NaN(), 1.0;
  CHECK_THROWS(pull(src, d, bad, Boundary::Clamp));
}

TEST_CASE("push is the exact adjoint of pull for both boundary rules") {
  auto g = gwtest::rng(17);
  Dims d{8, 8, 8};
  Dims grid{6, 7, 5};
  ArrayXX<double> a = gwtest::random_array(nvox(d), 3, g);
  ArrayXX<double> b = gwtest::random_array(nvox(grid), 3, g);
  ArrayX3<double> map(nvox(grid), 3);
  {
    std::uniform_real_distribution<double> u(-2.0, 9.0);  // includes out-of-range
    for (Index i = 0; i < map.rows(); ++i) map.row(i) << u(g), u(g), u(g);
  }
  for (Boundary bc : {Boundary::Clamp, Boundary::Zero}) {
    double lhs = (pull(a, d, map, bc) * b).sum();
    double rhs = (a * push(b, d, map, bc)).sum();
    CHECK(std::abs(lhs - rhs) < 1e-10);
  }
}

TEST_CASE("push with an interior map preserves total mass under Zero") {
  auto g = gwtest::rng(3);
  Dims d{9, 9, 9};
  Dims grid{5, 5, 5};
  ArrayXX<double> b = gwtest::random_array(nvox(grid), 1, g, 0.0, 2.0);
  ArrayX3<double> map(nvox(grid), 3);
  std::uniform_real_distribution<double> u(1.0, 7.0);
  for (Index i = 0; i < map.rows(); ++i) map.row(i) << u(g), u(g), u(g);
  ArrayXX<double> out = push(b, d, map, Boundary::Zero);
  CHECK(out.sum() == doctest::Approx(b.sum()).epsilon(1e-12));
}

TEST_CASE("pull_with_grad matches central differences away from cell faces") {
  auto g = gwtest::rng(23);
  Dims d{8, 8, 8};
  ArrayXX<double> src = gwtest::random_array(nvox(d), 2, g);
  std::uniform_real_distribution<double> u(0.3, 6.7);
  ArrayX3<double> map(40, 3);
  for (Index i = 0; i < map.rows(); ++i) {
    for (int a = 0; a < 3; ++a) {
      double c = u(g);
      double fr = c - std::floor(c);
      if (fr < 0.05) c += 0.1;
      if (fr > 0.95) c -= 0.1;
      map(i, a) = c;
    }
  }
  ArrayXX<double> val, grad;
  pull_with_grad(src, d, map, Boundary::Clamp, val, grad);
  const double eps = 1e-6;
  for (Index i = 0; i < map.rows(); ++i)
    for (int a = 0; a < 3; ++a) {
      ArrayX3<double> mp = map.row(i);
      ArrayX3<double> mm = map.row(i);
      mp(0, a) += eps;
      mm(0, a) -= eps;
      ArrayXX<double> vp = pull(src, d, mp, Boundary::Clamp);
      ArrayXX<double> vm = pull(src, d, mm, Boundary::Clamp);
      for (Index ch = 0; ch < 2; ++ch) {
        double fd = (vp(0, ch) - vm(0, ch)) / (2 * eps);
        CHECK(grad(i, 3 * ch + a) == doctest::Approx(fd).epsilon(1e-5));
      }
    }
}

TEST_CASE("pull_with_grad is zero along clamped axes") {
  auto g = gwtest::rng(29);
  Dims d{6, 6, 6};
  ArrayXX<double> src = gwtest::random_array(nvox(d), 1, g);
  ArrayX3<double> map(1, 3);
  map.row(0) << -0.5, 2.5, 8.0;
  ArrayXX<double> val, grad;
  pull_with_grad(src, d, map, Boundary::Clamp, val, grad);
  CHECK(grad(0, 0) == 0.0);
  CHECK(grad(0, 1) != 0.0);
  CHECK(grad(0, 2) == 0.0);
}

TEST_CASE("softmax with implicit class") {
  ArrayXX<double> logits(1, 2);
  logits << std::log(2.0), 0.0;
  ArrayXX<double> p = softmax_implicit(logits);
  CHECK(p(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(p(0, 1) == doctest::Approx(0.25).epsilon(1e-12));

  ArrayXX<double> eq = ArrayXX<double>::Zero(1, 3);
  ArrayXX<double> pe = softmax_implicit(eq);
  for (int k = 0; k < 3; ++k) CHECK(pe(0, k) == doctest::Approx(0.25).epsilon(1e-12));

  // extreme logits stay finite and sum (with the implicit class) to 1
  auto g = gwtest::rng(5);
  ArrayXX<double> big = gwtest::random_array(64, 4, g, -800.0, 800.0);
  ArrayXX<double> pb = softmax_implicit(big);
  CHECK(pb.allFinite());
  for (Index i = 0; i < pb.rows(); ++i) {
    double bg = 1.0 - pb.row(i).sum();
    CHECK(bg >= -1e-12);
    Index amax_logit, amax_prob;
    big.row(i).maxCoeff(&amax_logit);
    pb.row(i).maxCoeff(&amax_prob);
    if (big.row(i).maxCoeff() > 0) CHECK(amax_logit == amax_prob);
  }

  ArrayXX<double> lp = log_softmax_implicit(big);
  CHECK(lp.allFinite());
  for (Index i = 0; i < lp.rows(); ++i)
    CHECK(lp.row(i).exp().sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("affine_chain validates and multiplies") {
  Eigen::Matrix4d id = Eigen::Matrix4d::Identity();
  CHECK((affine_chain(id, id, id) - id).norm() == 0.0);

  Eigen::Matrix4d t1 = id, t2 = id;
  t1(0, 3) = 2.0;
  t2(1, 3) = -3.0;
  Eigen::Matrix4d got = affine_chain(t1, t2, id);
  CHECK(got(0, 3) == 2.0);
  CHECK(got(1, 3) == -3.0);

  auto g = gwtest::rng(11);
  Eigen::Matrix4d r = Eigen::Matrix4d::Identity();
  r.topLeftCorner<3, 3>() = Eigen::AngleAxisd(0.3, Eigen::Vector3d(1, 2, 2).normalized()).toRotationMatrix() * 1.7;
  r.topRightCorner<3, 1>() << 4.0, -1.0, 0.5;
  CHECK((affine_chain(r, r.inverse(), id) - id).norm() < 1e-10);

  Eigen::Matrix4d sing = Eigen::Matrix4d::Identity();
  sing(2, 2) = 0.0;
  CHECK_THROWS(affine_chain(sing, id, id));
  Eigen::Matrix4d badrow = id;
  badrow(3, 0) = 1.0;
  CHECK_THROWS(affine_chain(badrow, id, id));
}

TEST_CASE("affine_deformation maps voxels through the matrix") {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m(0, 0) = 2.0;
  m(1, 3) = 1.5;
  Dims grid{3, 3, 2};
  auto d = affine_deformation(m, grid);
  Index i = flat(grid, 2, 1, 1);
  CHECK(d.map(i, 0) == doctest::Approx(4.0));
  CHECK(d.map(i, 1) == doctest::Approx(2.5));
  CHECK(d.map(i, 2) == doctest::Approx(1.0));
}

TEST_CASE("finite_mask flags voxels with any non-finite channel") {
  Dims d{2, 2, 1};
  Volume<double> v(d, 2, 1.0);
  v.at(0, 0, 0, 1) = std::numeric_limits<double>::quiet_NaN();
  v.at(1, 1, 0, 0) = std::numeric_limits<double>::infinity();
  Mask m = finite_mask(v);
  CHECK_FALSE(m(flat(d, 0, 0, 0)));
  CHECK(m(flat(d, 1, 0, 0)));
  CHECK(m(flat(d, 0, 1, 0)));
  CHECK_FALSE(m(flat(d, 1, 1, 0)));
}
