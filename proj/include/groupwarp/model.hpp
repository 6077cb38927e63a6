#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "groupwarp/appearance.hpp"
#include "groupwarp/bias.hpp"
#include "groupwarp/diffeo.hpp"
#include "groupwarp/shape.hpp"
#include "groupwarp/volume.hpp"

namespace gw {

struct ScheduleLevel {
  double vox_mm = 1;
  int iters = 8;
};

struct FitConfig {
  Index classes = 11;  // stored template channels; one implicit class on top
  double w = 0.8;
  Index bound_classes = 0;  // curvature-bound denominator; 0 = stored count
  std::array<double, 5> lambda_v{2e-4, 0.0, 0.4, 0.1, 0.4};
  std::array<double, 3> lambda_t{1e-2, 0.5, 0.0};
  double lambda_bias = 1e5;
  double bias_cutoff_mm = 60.0;
  int shoot_steps = 8;
  std::vector<ScheduleLevel> schedule{{8, 8}, {4, 8}, {2, 8}, {1, 16}};
  std::uint64_t seed = 1;
  int threads = 1;
  CgOpts cg;

  Index bound_denom() const { return bound_classes > 0 ? bound_classes : classes; }

  EnergySpec velocity_metric() const {
    EnergySpec s;
    s.absolute = lambda_v[0];
    s.membrane = lambda_v[1];
    s.bending = lambda_v[2];
    s.elastic_div = lambda_v[3];
    s.elastic_sym = lambda_v[4];
    return s;
  }
  EnergySpec template_spec() const {
    EnergySpec s;
    s.absolute = lambda_t[0];
    s.membrane = lambda_t[1];
    s.bending = lambda_t[2];
    return s;
  }

  void check() const {
    if (classes < 1) throw std::invalid_argument("FitConfig: classes must be >= 1");
    if (!(w >= 0 && w <= 1)) throw std::invalid_argument("FitConfig: w must be in [0,1]");
    if (bound_classes != 0 && bound_classes < classes)
      throw std::invalid_argument("FitConfig: bound_classes below the class count");
    if (!(lambda_bias >= 0) || !std::isfinite(lambda_bias))
      throw std::invalid_argument("FitConfig: lambda_bias must be finite and >= 0");
    if (shoot_steps < 1) throw std::invalid_argument("FitConfig: shoot_steps must be >= 1");
    if (threads < 1) throw std::invalid_argument("FitConfig: threads must be >= 1");
    if (schedule.empty()) throw std::invalid_argument("FitConfig: empty schedule");
    for (size_t i = 0; i < schedule.size(); ++i) {
      if (!(schedule[i].vox_mm > 0) || schedule[i].iters < 1)
        throw std::invalid_argument("FitConfig: bad schedule level");
      if (i > 0 && !(schedule[i].vox_mm < schedule[i - 1].vox_mm))
        throw std::invalid_argument("FitConfig: schedule voxel sizes must decrease");
    }
    velocity_metric().check();
    template_spec().check();
  }
};

/// Short stable digest of a configuration, stamped into output provenance.
inline std::string config_digest(const FitConfig& c) {
  std::string s;
  char buf[64];
  auto add = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g;", v);
    s += buf;
  };
  add(double(c.classes));
  add(c.w);
  add(double(c.bound_classes));
  for (double v : c.lambda_v) add(v);
  for (double v : c.lambda_t) add(v);
  add(c.lambda_bias);
  add(c.bias_cutoff_mm);
  add(double(c.shoot_steps));
  for (const auto& l : c.schedule) {
    add(l.vox_mm);
    add(double(l.iters));
  }
  add(double(c.cg.max_iter));
  add(c.cg.rtol);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::snprintf(buf, sizeof buf, "%08x", unsigned(h ^ (h >> 32)));
  return buf;
}

struct SubjectInput {
  Volume<double> image;
  Mask mask;
  std::string name;
};

inline SubjectInput make_subject_input(Volume<double> image, std::string name) {
  image.check();
  SubjectInput in;
  in.mask = finite_mask(image);
  in.image = std::move(image);
  in.name = std::move(name);
  return in;
}

/// Per-subject fixed quantities: the bias basis on its native lattice.
struct SubjectAux {
  BiasBasis basis;
  Eigen::MatrixXd phi;
  Eigen::MatrixXd gram;
};

inline SubjectAux make_subject_aux(const SubjectInput& in, double cutoff_mm) {
  SubjectAux aux;
  const Eigen::Vector3d vox = voxel_sizes(in.image.vox2world);
  aux.basis = make_bias_basis(in.image.dims, vox, cutoff_mm > 0 ? cutoff_mm : 1e300);
  aux.phi = bias_design(aux.basis);
  aux.gram = aux.basis.count() > 0 ? bias_bending_gram(aux.basis, aux.phi, vox)
                                   : Eigen::MatrixXd::Zero(0, 0);
  return aux;
}

struct TemplateState {
  Dims dims{0, 0, 0};
  Eigen::Matrix4d vox2world = Eigen::Matrix4d::Identity();
  ArrayXX<double> logits;

  Eigen::Vector3d vox_mm() const { return voxel_sizes(vox2world); }
  void check() const {
    check_affine(vox2world, "TemplateState");
    if (logits.rows() != nvox(dims))
      throw std::invalid_argument("TemplateState: logits rows mismatch lattice " +
                                  dims_str(dims));
    if (logits.cols() < 1) throw std::invalid_argument("TemplateState: no classes");
  }
};

struct SubjectState {
  RigidParams q = RigidParams::Zero();
  VelocityField v;
  ShootResult shot;
  BiasField bias;
  GaussWishart post;
  ArrayXX<double> resp;
};

inline ShootResult identity_shot(const Dims& d) {
  ShootResult s;
  s.phi = identity_deformation<double>(d);
  s.phi_inv = identity_deformation<double>(d);
  s.v_end = ArrayX3<double>::Zero(nvox(d), 3);
  return s;
}

inline Deformation<double> subject_affine_def(const SubjectInput& in, const SubjectState& st,
                                              const TemplateState& t) {
  return affine_deformation<double>(
      rigid_voxel_affine(st.q, in.image.vox2world, t.vox2world), in.image.dims);
}

/// Subject grid -> template voxel coordinates (affine then inverse warp).
inline Deformation<double> subject_warp(const SubjectInput& in, const SubjectState& st,
                                        const TemplateState& t) {
  return compose(st.shot.phi_inv, subject_affine_def(in, st, t));
}

/// Template grid -> subject voxel coordinates: the forward warp followed by
/// the inverted affine, applied pointwise (no resampling).
inline Deformation<double> subject_warp_inverse(const SubjectInput& in,
                                                const SubjectState& st,
                                                const TemplateState& t) {
  Eigen::Matrix4d a_inv =
      rigid_voxel_affine(st.q, in.image.vox2world, t.vox2world).inverse();
  Deformation<double> out{t.dims, st.shot.phi.map};
  Eigen::Matrix3d lin = a_inv.topLeftCorner<3, 3>();
  Eigen::Vector3d off = a_inv.topRightCorner<3, 1>();
  out.map.matrix() =
      (st.shot.phi.map.matrix() * lin.transpose()).rowwise() + off.transpose();
  return out;
}

inline ArrayXX<double> subject_log_field(const SubjectAux& aux, const SubjectState& st,
                                         Index channels) {
  if (aux.basis.count() == 0)
    return ArrayXX<double>::Zero(nvox(aux.basis.dims), channels);
  return bias_log_field(aux.phi, st.bias);
}

/// Bias-corrected intensities x .* exp(log_field).
inline ArrayXX<double> subject_corrected(const SubjectInput& in, const ArrayXX<double>& lf) {
  return in.image.data * lf.exp();
}

struct ElboTerms {
  double appearance = 0;      // expected Gaussian term plus bias log-Jacobian
  double categorical = 0;     // class prior vs posterior, including entropy
  double gw_kl = 0;           // Gauss-Wishart divergences from the shared prior
  double bias_prior = 0;      // quadratic bias penalty
  double velocity_prior = 0;  // velocity metric energies
  double template_prior = 0;  // template field energy
  double total() const {
    return appearance + categorical - gw_kl - bias_prior - velocity_prior - template_prior;
  }
};

/// Full objective over the population. Per-subject contributions are summed
/// in a value-canonical order, so reordering the subject list leaves every
/// term bitwise unchanged. Throws naming the offending term if any
/// contribution is non-finite.
inline ElboTerms elbo_terms(const std::vector<SubjectInput>& inputs,
                            const std::vector<SubjectAux>& auxs,
                            const TemplateState& tmpl, const GaussWishart& shared,
                            const std::vector<SubjectState>& subs, const FitConfig& cfg) {
  if (inputs.size() != subs.size() || inputs.size() != auxs.size())
    throw std::invalid_argument("elbo_terms: subject list mismatch");
  const EnergySpec metric = cfg.velocity_metric();
  const EnergySpec tspec = cfg.template_spec();
  const Eigen::Vector3d hv = tmpl.vox_mm();
  const size_t ns = inputs.size();
  std::vector<double> app(ns), cat(ns), kl(ns), bias(ns), vel(ns);
  for (size_t n = 0; n < ns; ++n) {
    const SubjectInput& in = inputs[n];
    const SubjectState& st = subs[n];
    const Mask& mask = in.mask;
    const Index k1 = st.post.classes();
    ArrayXX<double> lf = subject_log_field(auxs[n], st, in.image.data.cols());
    ArrayXX<double> xb = subject_corrected(in, lf);
    for (Index k = 0; k < k1; ++k) {
      ArrayX<double> eg = expected_log_gauss(xb, st.post, k);
      app[n] += mask.select(ArrayX<double>(st.resp.col(k) * eg), 0.0).sum();
    }
    app[n] += mask.select(ArrayX<double>(lf.rowwise().sum()), 0.0).sum();

    Deformation<double> psi = subject_warp(in, st, tmpl);
    ArrayXX<double> lp =
        log_softmax_implicit(pull(tmpl.logits, tmpl.dims, psi.map, Boundary::Clamp));
    ArrayXX<double> ent = (st.resp > 0).select(st.resp * (lp - st.resp.log()), 0.0);
    cat[n] = mask.select(ArrayX<double>(ent.rowwise().sum()), 0.0).sum();

    kl[n] = kl_gauss_wishart(st.post, shared);
    for (Index c = 0; c < st.bias.coef.cols(); ++c)
      bias[n] += 0.5 * cfg.lambda_bias *
                 (st.bias.coef.col(c).transpose() * auxs[n].gram *
                  st.bias.coef.col(c))(0, 0);
    vel[n] = energy(ArrayXX<double>(st.v.v), tmpl.dims, metric, hv);
  }

  auto reduce = [](std::vector<double>& v, const char* name) {
    for (double x : v)
      if (!std::isfinite(x))
        throw std::runtime_error(std::string("elbo: non-finite ") + name + " term");
    std::sort(v.begin(), v.end());
    double s = 0;
    for (double x : v) s += x;
    return s;
  };
  ElboTerms e;
  e.appearance = reduce(app, "appearance");
  e.categorical = reduce(cat, "categorical");
  e.gw_kl = reduce(kl, "posterior divergence");
  e.bias_prior = reduce(bias, "bias prior");
  e.velocity_prior = reduce(vel, "velocity prior");
  e.template_prior = energy(tmpl.logits, tmpl.dims, tspec, hv);
  if (!std::isfinite(e.template_prior))
    throw std::runtime_error("elbo: non-finite template prior term");
  return e;
}

inline double elbo(const std::vector<SubjectInput>& inputs,
                   const std::vector<SubjectAux>& auxs, const TemplateState& tmpl,
                   const GaussWishart& shared, const std::vector<SubjectState>& subs,
                   const FitConfig& cfg) {
  return elbo_terms(inputs, auxs, tmpl, shared, subs, cfg).total();
}

struct TraceRow {
  Index step = 0;
  int level = 0;
  int iter = 0;
  std::string phase;
  double elbo = 0;
};
using Trace = std::vector<TraceRow>;

}  // namespace gw
