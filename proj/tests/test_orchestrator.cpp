#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "groupwarp/fit.hpp"
#include "groupwarp/synth.hpp"
#include "support.hpp"

using namespace gw;

namespace {

double hand_digamma(double x) {
  double r = 0;
  while (x < 12) {
    r -= 1.0 / x;
    x += 1;
  }
  double ix = 1.0 / x, ix2 = ix * ix;
  return r + std::log(x) - 0.5 * ix -
         ix2 * (1.0 / 12 - ix2 * (1.0 / 120 - ix2 * (1.0 / 252 - ix2 / 240)));
}

// Scalar (C = 1) expected log-density, KL and categorical pieces written out
// from first principles so the library assembly can be checked end to end.
double hand_eln(double x, double m, double beta, double w, double nu) {
  double eldet = hand_digamma(nu / 2) + std::log(2.0) + std::log(w);
  return 0.5 * (eldet - std::log(2 * M_PI)) -
         0.5 * (nu * w * (x - m) * (x - m) + 1.0 / beta);
}

// Scalar Wishart(w, nu) is Gamma(nu/2, scale 2w); the Gaussian part
// conditions on the sampled precision.
double hand_kl(double m1, double b1, double w1, double n1, double m0, double b0,
               double w0, double n0) {
  double kl_n = 0.5 * (std::log(b1 / b0) + b0 / b1 - 1 +
                       b0 * n1 * w1 * (m1 - m0) * (m1 - m0));
  const double a1 = n1 / 2, t1 = 2 * w1, a0 = n0 / 2, t0 = 2 * w0;
  double kl_w = (a1 - a0) * hand_digamma(a1) - std::lgamma(a1) + std::lgamma(a0) +
                a0 * std::log(t0 / t1) + a1 * (t1 - t0) / t0;
  return kl_n + kl_w;
}

GaussWishart scalar_gw(std::vector<double> m, std::vector<double> beta,
                       std::vector<double> w, std::vector<double> nu) {
  GaussWishart g;
  const Index k = Index(m.size());
  g.m.resize(1, k);
  g.beta.resize(k);
  g.nu.resize(k);
  g.W.assign(size_t(k), Eigen::MatrixXd::Zero(1, 1));
  for (Index i = 0; i < k; ++i) {
    g.m(0, i) = m[size_t(i)];
    g.beta[i] = beta[size_t(i)];
    g.nu[i] = nu[size_t(i)];
    g.W[size_t(i)](0, 0) = w[size_t(i)];
  }
  return g;
}

TemplateState blob_template(Index n, double h, Index k, double amp) {
  TemplateState t;
  t.dims = {n, n, n};
  t.vox2world = centered_affine(t.dims, Eigen::Vector3d::Constant(h),
                                Eigen::Vector3d::Zero());
  t.logits = ArrayXX<double>::Zero(nvox(t.dims), k);
  const double c = 0.5 * double(n - 1);
  for (Index z = 0; z < n; ++z)
    for (Index y = 0; y < n; ++y)
      for (Index x = 0; x < n; ++x) {
        const Index i = flat(t.dims, x, y, z);
        for (Index j = 0; j < k; ++j) {
          const double cx = c + (j % 2 ? -0.18 : 0.22) * double(n);
          const double cy = c + (j % 3 ? 0.15 : -0.2) * double(n);
          const double r2 = (double(x) - cx) * (double(x) - cx) +
                            (double(y) - cy) * (double(y) - cy) +
                            (double(z) - c) * (double(z) - c);
          t.logits(i, j) = amp * std::exp(-r2 / (0.08 * double(n * n))) - 0.5 * amp;
        }
      }
  return t;
}

FitConfig small_config(Index k) {
  FitConfig cfg;
  cfg.classes = k;
  cfg.lambda_v = {1e-3, 0.0, 0.2, 0.05, 0.2};
  cfg.lambda_t = {1e-2, 0.5, 0.0};
  cfg.shoot_steps = 2;
  cfg.schedule = {{1, 3}};
  cfg.cg.max_iter = 16;
  return cfg;
}

}  // namespace

TEST_CASE("configuration validation") {
  FitConfig cfg;
  CHECK_NOTHROW(cfg.check());
  FitConfig bad = cfg;
  bad.schedule.clear();
  CHECK_THROWS_AS(bad.check(), std::invalid_argument);
  bad = cfg;
  bad.schedule = {{4, 4}, {4, 4}};
  CHECK_THROWS_AS(bad.check(), std::invalid_argument);
  bad = cfg;
  bad.schedule = {{4, 0}};
  CHECK_THROWS_AS(bad.check(), std::invalid_argument);
  bad = cfg;
  bad.w = 1.5;
  CHECK_THROWS_AS(bad.check(), std::invalid_argument);
  bad = cfg;
  bad.bound_classes = 3;
  CHECK_THROWS_AS(bad.check(), std::invalid_argument);
  bad = cfg;
  bad.bound_classes = cfg.classes + 1;
  CHECK_NOTHROW(bad.check());
  CHECK(bad.bound_denom() == cfg.classes + 1);
  CHECK(cfg.bound_denom() == cfg.classes);
  CHECK(config_digest(cfg).size() == 8);
  CHECK(config_digest(cfg) != config_digest(bad));
}

TEST_CASE("single-voxel single-class objective matches the scalar closed form") {
  const double t0 = 0.7, x = 1.9, h = 1.5;
  TemplateState tmpl;
  tmpl.dims = {1, 1, 1};
  tmpl.vox2world = centered_affine(tmpl.dims, Eigen::Vector3d::Constant(h),
                                   Eigen::Vector3d::Zero());
  tmpl.logits = ArrayXX<double>::Constant(1, 1, t0);

  SubjectInput in;
  in.image.dims = {1, 1, 1};
  in.image.vox2world = tmpl.vox2world;
  in.image.data = ArrayXX<double>::Constant(1, 1, x);
  in.mask = Mask::Constant(1, true);
  in.name = "one";

  GaussWishart post = scalar_gw({1.7, 0.2}, {3.0, 2.0}, {0.8, 1.1}, {4.0, 5.0});
  GaussWishart shared = scalar_gw({1.0, 0.0}, {1.0, 1.0}, {1.0, 1.0}, {3.0, 3.0});

  FitConfig cfg = small_config(1);
  cfg.lambda_t = {0.3, 0.7, 0.2};
  cfg.bias_cutoff_mm = 0;

  // the responsibility row: exact posterior over the two classes
  const double lse = std::log(std::exp(t0) + 1.0);
  const double lp0 = t0 - lse, lp1 = -lse;
  const double s0 = lp0 + hand_eln(x, 1.7, 3.0, 0.8, 4.0);
  const double s1 = lp1 + hand_eln(x, 0.2, 2.0, 1.1, 5.0);
  const double mx = std::max(s0, s1);
  const double z = std::exp(s0 - mx) + std::exp(s1 - mx);
  const double r0 = std::exp(s0 - mx) / z, r1 = std::exp(s1 - mx) / z;

  std::vector<SubjectInput> inputs;
  inputs.push_back(in);
  std::vector<SubjectAux> aux{make_subject_aux(inputs[0], cfg.bias_cutoff_mm)};
  std::vector<SubjectState> subs(1);
  SubjectState& st = subs[0];
  st.post = post;
  st.bias = BiasField::zeros(0, 1);
  st.v.grid = tmpl.dims;
  st.v.vox_mm = tmpl.vox_mm();
  st.v.metric = cfg.velocity_metric();
  st.v.v = ArrayX3<double>::Zero(1, 3);
  st.shot = identity_shot(tmpl.dims);
  st.resp = ArrayXX<double>(1, 2);
  st.resp << r0, r1;

  double hand = r0 * hand_eln(x, 1.7, 3.0, 0.8, 4.0) + r1 * hand_eln(x, 0.2, 2.0, 1.1, 5.0);
  hand += r0 * (lp0 - std::log(r0)) + r1 * (lp1 - std::log(r1));
  hand -= hand_kl(1.7, 3.0, 0.8, 4.0, 1.0, 1.0, 1.0, 3.0);
  hand -= hand_kl(0.2, 2.0, 1.1, 5.0, 0.0, 1.0, 1.0, 3.0);
  hand -= 0.5 * 0.3 * t0 * t0 * (h * h * h);

  ElboTerms terms = elbo_terms(inputs, aux, tmpl, shared, subs, cfg);
  CHECK(gwtest::rel_err(terms.total(), hand) < 1e-8);

  SUBCASE("a stiffer template penalty strictly lowers the objective") {
    FitConfig stiff = cfg;
    stiff.lambda_t[0] = 0.9;
    const double lo = elbo(inputs, aux, tmpl, shared, subs, stiff);
    CHECK(lo < terms.total());
    CHECK(terms.total() - lo ==
          doctest::Approx(0.5 * 0.6 * t0 * t0 * h * h * h).epsilon(1e-10));
  }

  SUBCASE("non-finite state is reported by term") {
    subs[0].post.m(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(elbo(inputs, aux, tmpl, shared, subs, cfg),
                         doctest::Contains("appearance"), std::runtime_error);
  }
}

TEST_CASE("objective is exactly invariant to subject order") {
  auto g = gwtest::rng(40);
  TemplateState tmpl = blob_template(6, 1.0, 2, 2.0);
  GaussWishart gwp = scalar_gw({0.5, 2.0, 4.0}, {5, 5, 5}, {2, 2, 2}, {9, 9, 9});
  EnergySpec metric;
  metric.absolute = 1e-3;
  metric.bending = 0.2;

  std::vector<SubjectInput> inputs;
  std::vector<SubjectState> subs;
  FitConfig cfg = small_config(2);
  for (int s = 0; s < 3; ++s) {
    SynthConfig sc;
    sc.max_disp_vox = 0.8;
    sc.shoot_steps = 2;
    sc.noise_scale = 1.0;
    SynthResult sr = synth_generate(tmpl, gwp, metric, sc, 100 + std::uint64_t(s));
    inputs.push_back(make_subject_input(sr.image, "s" + std::to_string(s)));
    SubjectState st;
    st.post = gwp;
    st.post.m(0, 1) += 0.1 * double(s);
    st.bias = BiasField::zeros(0, 1);
    st.v = sr.v;
    st.v.metric = cfg.velocity_metric();
    st.shot = sr.shot;
    st.q = RigidParams::Zero();
    st.resp = ArrayXX<double>(inputs.back().image.data.rows(), 3);
    for (Index i = 0; i < st.resp.rows(); ++i) {
      double a = 0.2 + 0.6 * gwtest::random_array(1, 1, g, 0.0, 1.0)(0, 0);
      double b = 0.7 * (1 - a);
      st.resp.row(i) << a, b, 1 - a - b;
    }
    subs.push_back(std::move(st));
  }
  std::vector<SubjectAux> aux;
  for (const auto& in : inputs) aux.push_back(make_subject_aux(in, 0));

  const double base = elbo(inputs, aux, tmpl, gwp, subs, cfg);
  std::vector<size_t> perm{2, 0, 1};
  std::vector<SubjectInput> in2;
  std::vector<SubjectAux> aux2;
  std::vector<SubjectState> subs2;
  for (size_t p : perm) {
    in2.push_back(inputs[p]);
    aux2.push_back(aux[p]);
    subs2.push_back(subs[p]);
  }
  CHECK(elbo(in2, aux2, tmpl, gwp, subs2, cfg) == base);
}

TEST_CASE("template carried across lattice spacings") {
  SUBCASE("constant field stays constant") {
    TemplateState coarse;
    coarse.dims = {6, 5, 4};
    coarse.vox2world = centered_affine(coarse.dims, Eigen::Vector3d::Constant(2.0),
                                       Eigen::Vector3d::Zero());
    coarse.logits = ArrayXX<double>::Constant(nvox(coarse.dims), 2, 0.7);
    TemplateState fine = resample_template(coarse, 1.0);
    CHECK(fine.dims[0] == 11);
    CHECK((fine.logits - 0.7).abs().maxCoeff() < 1e-12);
    CHECK(voxel_sizes(fine.vox2world).isApprox(Eigen::Vector3d::Constant(1.0), 1e-12));
  }

  SUBCASE("smooth field keeps its energy and survives a round trip") {
    auto g = gwtest::rng(41);
    TemplateState coarse;
    coarse.dims = {12, 12, 12};
    coarse.vox2world = centered_affine(coarse.dims, Eigen::Vector3d::Constant(2.0),
                                       Eigen::Vector3d::Ones());
    EnergySpec sm;
    sm.absolute = 1.0;
    sm.bending = 25.0;
    GreensSolver smooth(coarse.dims, 1, sm, voxel_sizes(coarse.vox2world));
    ArrayXX<double> w = gwtest::random_array(nvox(coarse.dims), 1, g, -1.0, 1.0);
    coarse.logits = smooth.solve(w);
    coarse.logits *= 2.0 / coarse.logits.abs().maxCoeff();

    EnergySpec tspec;
    tspec.absolute = 1e-2;
    tspec.membrane = 0.5;
    const double e_c = energy(coarse.logits, coarse.dims, tspec,
                              voxel_sizes(coarse.vox2world));
    TemplateState fine = resample_template(coarse, 1.0);
    const double e_f =
        energy(fine.logits, fine.dims, tspec, voxel_sizes(fine.vox2world));
    CHECK(gwtest::rel_err(e_f, e_c) < 0.05);

    ArrayXX<double> back = resample_to(fine.logits, fine.dims, fine.vox2world,
                                       coarse.dims, coarse.vox2world);
    const double num = std::sqrt((back - coarse.logits).square().sum());
    const double den = std::sqrt(coarse.logits.square().sum());
    CHECK(num / den < 0.02);
  }

  SUBCASE("constant velocity rescales exactly with the voxel size") {
    TemplateState coarse;
    coarse.dims = {6, 6, 6};
    coarse.vox2world = centered_affine(coarse.dims, Eigen::Vector3d::Constant(2.0),
                                       Eigen::Vector3d::Zero());
    TemplateState fine = lattice_from_box(world_box(coarse.dims, coarse.vox2world), 1.0, 1);
    VelocityField v;
    v.grid = coarse.dims;
    v.vox_mm = Eigen::Vector3d::Constant(2.0);
    v.metric.absolute = 1;
    v.v = ArrayX3<double>::Zero(nvox(coarse.dims), 3);
    v.v.col(0) = 0.5;
    v.v.col(1) = -0.25;
    v.v.col(2) = 0.3;
    VelocityField vf = prolong_velocity(v, coarse.vox2world, fine);
    CHECK(vf.grid[0] == fine.dims[0]);
    CHECK((vf.v.col(0) - 1.0).abs().maxCoeff() < 1e-12);
    CHECK((vf.v.col(1) + 0.5).abs().maxCoeff() < 1e-12);
    CHECK((vf.v.col(2) - 0.6).abs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("pooled starting prior") {
  SubjectInput a, b;
  a.image.dims = {4, 4, 4};
  a.image.vox2world = Eigen::Matrix4d::Identity();
  a.image.data = ArrayXX<double>::Zero(64, 1);
  for (Index i = 0; i < 64; ++i) a.image.data(i, 0) = double(i);
  a.image.data(10, 0) = std::numeric_limits<double>::quiet_NaN();
  a = make_subject_input(a.image, "a");
  b.image.dims = {4, 4, 4};
  b.image.vox2world = Eigen::Matrix4d::Identity();
  b.image.data = ArrayXX<double>::Constant(64, 1, 31.5);
  b = make_subject_input(b.image, "b");

  GaussWishart g = init_shared_prior({a, b}, 4);
  CHECK(g.classes() == 4);
  CHECK(g.beta[0] == doctest::Approx(0.01));
  CHECK(g.nu[0] == doctest::Approx(1.0));
  for (Index k = 1; k < 4; ++k) CHECK(g.m(0, k) >= g.m(0, k - 1));
  CHECK(g.m(0, 0) >= 0.0);
  CHECK(g.m(0, 3) <= 63.0);
  CHECK(g.W[0](0, 0) > 0);
  CHECK(std::isfinite(kl_gauss_wishart(g, g)));
}

TEST_CASE("groupwise fit: trace, monotonicity, invariances") {
  TemplateState truth = blob_template(8, 1.0, 2, 3.0);
  GaussWishart gwp = scalar_gw({1.0, 3.0, 5.0}, {50, 50, 50}, {8, 8, 8}, {30, 30, 30});
  EnergySpec metric;
  metric.absolute = 1e-3;
  metric.bending = 0.2;

  std::vector<SubjectInput> inputs;
  for (int s = 0; s < 2; ++s) {
    SynthConfig sc;
    sc.max_disp_vox = 1.0;
    sc.shoot_steps = 2;
    sc.noise_scale = 0.6;
    SynthResult sr = synth_generate(truth, gwp, metric, sc, 7 + std::uint64_t(s));
    inputs.push_back(make_subject_input(sr.image, "s" + std::to_string(s)));
  }

  FitConfig cfg = small_config(2);
  cfg.w = 0;
  cfg.schedule = {{2, 2}, {1, 2}};

  FitResult fit = fit_groupwise(inputs, cfg);

  // one row per phase: init/prolong plus 8 per iteration
  CHECK(fit.trace.size() == 2 + 8 * 4);
  for (size_t i = 0; i < fit.trace.size(); ++i)
    CHECK(fit.trace[i].step == Index(i));

  SUBCASE("within-level steps never lose more than rounding") {
    for (size_t i = 1; i < fit.trace.size(); ++i) {
      if (fit.trace[i].level != fit.trace[i - 1].level) continue;
      CHECK(fit.trace[i].elbo >=
            fit.trace[i - 1].elbo - 1e-6 * std::abs(fit.trace[i - 1].elbo));
    }
  }

  SUBCASE("group means are removed exactly") {
    ArrayX3<double> vsum = ArrayX3<double>::Zero(nvox(fit.tmpl.dims), 3);
    RigidParams qsum = RigidParams::Zero();
    for (const auto& st : fit.subjects) {
      vsum += st.v.v;
      qsum += st.q;
    }
    CHECK(vsum.abs().maxCoeff() == 0.0);
    CHECK(qsum.cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("identical runs produce identical traces") {
    FitResult again = fit_groupwise(inputs, cfg);
    REQUIRE(again.trace.size() == fit.trace.size());
    for (size_t i = 0; i < fit.trace.size(); ++i) {
      CHECK(again.trace[i].elbo == fit.trace[i].elbo);
      CHECK(again.trace[i].phase == fit.trace[i].phase);
    }
  }

  SUBCASE("threaded runs match the serial reduction") {
    FitConfig par = cfg;
    par.threads = 3;
    FitResult again = fit_groupwise(inputs, par);
    REQUIRE(again.trace.size() == fit.trace.size());
    for (size_t i = 0; i < fit.trace.size(); ++i)
      CHECK(again.trace[i].elbo == fit.trace[i].elbo);
  }

  SUBCASE("single subject is rejected") {
    CHECK_THROWS_AS(fit_groupwise({inputs[0]}, cfg), std::invalid_argument);
  }
}

TEST_CASE("fixed-template fit") {
  TemplateState truth = blob_template(10, 1.0, 2, 3.0);
  GaussWishart gwp = scalar_gw({1.0, 3.0, 5.0}, {50, 50, 50}, {8, 8, 8}, {30, 30, 30});
  EnergySpec metric;
  metric.absolute = 1e-3;
  metric.bending = 0.2;
  FitConfig cfg = small_config(2);
  cfg.schedule = {{1, 4}};

  SUBCASE("a subject sampled at identity stays near identity") {
    SynthConfig sc;
    sc.max_disp_vox = 0;
    sc.shoot_steps = 2;
    sc.noise_scale = 0.5;
    SynthResult sr = synth_generate(truth, gwp, metric, sc, 11);
    auto in = make_subject_input(sr.image, "id");
    FitResult fit = fit_to_template({in}, truth, gwp, cfg);
    CHECK(fit.subjects[0].v.v.abs().rowwise().sum().mean() < 0.1);
    CHECK(fit.subjects[0].q.cwiseAbs().maxCoeff() < 1e-2);
    CHECK(fit.trace.back().elbo >= fit.trace.front().elbo);
  }

  SUBCASE("a known warp is recovered to subvoxel endpoint error") {
    SynthConfig sc;
    sc.max_disp_vox = 1.5;
    sc.shoot_steps = 4;
    sc.noise_scale = 0.4;
    SynthResult sr = synth_generate(truth, gwp, metric, sc, 12);
    auto in = make_subject_input(sr.image, "warp");
    FitConfig rec = cfg;
    rec.shoot_steps = 4;
    rec.schedule = {{2, 4}, {1, 6}};
    FitResult fit = fit_to_template({in}, truth, gwp, rec);

    SubjectState truth_state;
    truth_state.q = sr.q;
    truth_state.shot = sr.shot;
    Deformation<double> psi_true = subject_warp(in, truth_state, truth);
    Deformation<double> psi_fit = subject_warp(in, fit.subjects[0], fit.tmpl);
    REQUIRE(same_dims(fit.tmpl.dims, truth.dims));
    const double mean_err =
        (psi_fit.map - psi_true.map).abs().rowwise().sum().mean();
    CHECK(mean_err < 1.0);
  }

  SUBCASE("cropped field of view stays finite") {
    SynthConfig sc;
    sc.max_disp_vox = 0.8;
    sc.shoot_steps = 2;
    sc.noise_scale = 0.5;
    SynthResult sr = synth_generate(truth, gwp, metric, sc, 13);
    Volume<double> img = sr.image;
    for (Index z = 0; z < truth.dims[2]; ++z)
      for (Index y = 0; y < truth.dims[1]; ++y)
        for (Index x = 0; x < 2; ++x)
          img.data(flat(truth.dims, x, y, z), 0) =
              std::numeric_limits<double>::quiet_NaN();
    auto in = make_subject_input(img, "crop");
    CHECK(in.mask.count() == nvox(truth.dims) - 2 * 10 * 10);
    FitResult fit = fit_to_template({in}, truth, gwp, cfg);
    CHECK(std::isfinite(fit.trace.back().elbo));
    CHECK(fit.subjects[0].v.v.allFinite());
  }

  SUBCASE("prior shape mismatches are rejected") {
    SynthConfig sc;
    sc.shoot_steps = 2;
    SynthResult sr = synth_generate(truth, gwp, metric, sc, 14);
    auto in = make_subject_input(sr.image, "bad");
    GaussWishart wrong = scalar_gw({1.0, 3.0}, {50, 50}, {8, 8}, {30, 30});
    CHECK_THROWS_AS(fit_to_template({in}, truth, wrong, cfg), std::invalid_argument);
    CHECK_THROWS_AS(fit_to_template({}, truth, gwp, cfg), std::invalid_argument);
  }
}

TEST_CASE("synthetic draws follow the model") {
  TemplateState truth = blob_template(8, 1.0, 2, 1.5);
  GaussWishart gwp = scalar_gw({0.0, 3.0, 6.0}, {50, 50, 50}, {20, 20, 20}, {40, 40, 40});
  EnergySpec metric;
  metric.absolute = 1e-3;
  metric.bending = 0.2;

  SUBCASE("degenerate class probabilities give the template argmax") {
    TemplateState hard = truth;
    hard.logits = (truth.logits > 0).select(ArrayXX<double>::Constant(truth.logits.rows(), 2, 60.0), -60.0);
    SynthConfig sc;
    sc.max_disp_vox = 0;
    sc.noise_scale = 0;
    sc.shoot_steps = 1;
    SynthResult sr = synth_generate(hard, gwp, metric, sc, 5);
    for (Index i = 0; i < sr.labels.size(); ++i) {
      Index best = 2;
      double bv = 0;
      for (Index k = 0; k < 2; ++k)
        if (hard.logits(i, k) > bv) {
          bv = hard.logits(i, k);
          best = k;
        }
      const int expect = best == 2 ? 0 : int(best + 1);
      REQUIRE(sr.labels[i] == expect);
      REQUIRE(sr.image.data(i, 0) == gwp.m(0, best));
    }
  }

  SUBCASE("label frequencies follow the prior probabilities") {
    TemplateState flat = truth;
    flat.logits.setZero();
    flat.logits.col(0) = 0.4;  // fixed simplex (p0, p1, p2)
    SynthConfig sc;
    sc.max_disp_vox = 0;
    sc.noise_scale = 1.0;
    sc.shoot_steps = 1;
    SynthResult sr = synth_generate(flat, gwp, metric, sc, 6);
    const double n = double(sr.labels.size());
    const double p0 = std::exp(0.4) / (std::exp(0.4) + 2.0);
    const double p1 = 1.0 / (std::exp(0.4) + 2.0);
    double c0 = 0, c1 = 0;
    for (Index i = 0; i < sr.labels.size(); ++i) {
      c0 += sr.labels[i] == 1;
      c1 += sr.labels[i] == 2;
    }
    CHECK(std::abs(c0 / n - p0) < 4 * std::sqrt(p0 * (1 - p0) / n));
    CHECK(std::abs(c1 / n - p1) < 4 * std::sqrt(p1 * (1 - p1) / n));
  }

  SUBCASE("identical seeds reproduce the draw, different seeds do not") {
    SynthConfig sc;
    sc.max_disp_vox = 1.0;
    sc.noise_scale = 1.0;
    sc.shoot_steps = 2;
    sc.q_sigma_t = 0.5;
    SynthResult a = synth_generate(truth, gwp, metric, sc, 21);
    SynthResult b = synth_generate(truth, gwp, metric, sc, 21);
    SynthResult c = synth_generate(truth, gwp, metric, sc, 22);
    CHECK((a.image.data == b.image.data).all());
    CHECK((a.labels == b.labels).all());
    CHECK((a.v.v == b.v.v).all());
    CHECK((a.q.array() == b.q.array()).all());
    CHECK(!(a.image.data == c.image.data).all());
  }

  SUBCASE("velocity draw respects the requested peak") {
    SynthConfig sc;
    sc.max_disp_vox = 1.25;
    sc.noise_scale = 0;
    sc.shoot_steps = 2;
    SynthResult sr = synth_generate(truth, gwp, metric, sc, 23);
    CHECK(sr.v.v.abs().maxCoeff() == doctest::Approx(1.25).epsilon(1e-12));
  }
}
