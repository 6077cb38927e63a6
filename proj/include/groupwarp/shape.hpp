#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "groupwarp/affine.hpp"
#include "groupwarp/cg.hpp"
#include "groupwarp/diffeo.hpp"
#include "groupwarp/energy.hpp"
#include "groupwarp/interp.hpp"
#include "groupwarp/rigid.hpp"
#include "groupwarp/softmax.hpp"
#include "groupwarp/volume.hpp"

namespace gw {

inline Index packed_size(Index k) { return k * (k + 1) / 2; }

/// Column-major lower-triangle index of entry (r, c) with r >= c.
inline Index packed_index(Index r, Index c, Index k) {
  return r + c * (2 * k - c - 1) / 2;
}

/// The blended curvature of the stored-class log-partition, applied to p
/// row-wise: w [diag(pi) - pi pi^T] + (1 - w) (I - 11^T / denom) / 2.
/// w = 1 and w = 0 reproduce either branch bitwise; masked rows give zero.
inline ArrayXX<double> blend_apply(const ArrayXX<double>& pi, const Mask& mask,
                                   double w, Index denom, const ArrayXX<double>& p) {
  if (!(w >= 0 && w <= 1)) throw std::invalid_argument("blend_apply: w must be in [0,1]");
  if (denom < pi.cols()) throw std::invalid_argument("blend_apply: denom below class count");
  if (pi.rows() != p.rows() || pi.cols() != p.cols() || mask.size() != pi.rows())
    throw std::invalid_argument("blend_apply: shape mismatch");
  const Index n = pi.rows(), k = pi.cols();
  ArrayXX<double> out = ArrayXX<double>::Zero(n, k);
  if (w > 0) {
    ArrayX<double> dot = (pi * p).rowwise().sum();
    out += w * (pi * p - (pi.colwise() * dot));
  }
  if (w < 1) {
    ArrayX<double> tot = p.rowwise().sum() / double(denom);
    out += (1 - w) * 0.5 * (p.colwise() - tot);
  }
  for (Index j = 0; j < k; ++j) out.col(j) = mask.select(out.col(j), 0.0);
  return out;
}

/// s(a) = sum_k jt(3k+a) d(k) per row: a per-class residual steered through
/// the sampled-field gradient into a spatial force.
inline ArrayXX<double> steer(const ArrayXX<double>& jt, const ArrayXX<double>& d) {
  const Index n = d.rows(), k = d.cols();
  if (jt.rows() != n || jt.cols() != 3 * k)
    throw std::invalid_argument("steer: gradient shape mismatch");
  ArrayXX<double> s = ArrayXX<double>::Zero(n, 3);
  for (Index kk = 0; kk < k; ++kk)
    for (int a = 0; a < 3; ++a) s.col(a) += jt.col(3 * kk + a) * d.col(kk);
  return s;
}

/// Per-voxel 3x3 curvature of the categorical term with respect to the
/// sampling point: J^T H J with H the blended bound. Packed lower-triangle
/// columns (00, 10, 20, 11, 21, 22); masked rows are zero.
inline ArrayXX<double> fisher3(const ArrayXX<double>& jt, const ArrayXX<double>& pi,
                               const Mask& mask, double w, Index denom) {
  if (!(w >= 0 && w <= 1)) throw std::invalid_argument("fisher3: w must be in [0,1]");
  if (denom < pi.cols()) throw std::invalid_argument("fisher3: denom below class count");
  const Index n = pi.rows(), k = pi.cols();
  if (jt.rows() != n || jt.cols() != 3 * k)
    throw std::invalid_argument("fisher3: gradient shape mismatch");
  ArrayXX<double> mw = ArrayXX<double>::Zero(n, 3), ms = ArrayXX<double>::Zero(n, 3);
  ArrayXX<double> sw = ArrayXX<double>::Zero(n, 6), ss = ArrayXX<double>::Zero(n, 6);
  for (Index kk = 0; kk < k; ++kk)
    for (int a = 0; a < 3; ++a) {
      if (w > 0) mw.col(a) += pi.col(kk) * jt.col(3 * kk + a);
      if (w < 1) ms.col(a) += jt.col(3 * kk + a);
      for (int b = 0; b <= a; ++b) {
        const Index pc = packed_index(a, b, 3);
        if (w > 0) sw.col(pc) += pi.col(kk) * jt.col(3 * kk + a) * jt.col(3 * kk + b);
        if (w < 1) ss.col(pc) += jt.col(3 * kk + a) * jt.col(3 * kk + b);
      }
    }
  ArrayXX<double> f = ArrayXX<double>::Zero(n, 6);
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b <= a; ++b) {
      const Index pc = packed_index(a, b, 3);
      ArrayX<double> acc = ArrayX<double>::Zero(n);
      if (w > 0) acc += w * (sw.col(pc) - mw.col(a) * mw.col(b));
      if (w < 1)
        acc += (1 - w) * 0.5 * (ss.col(pc) - ms.col(a) * ms.col(b) / double(denom));
      f.col(pc) = mask.select(acc, 0.0);
    }
  return f;
}

/// y = F x with F the packed symmetric 3x3 per row.
inline ArrayXX<double> sym3_apply(const ArrayXX<double>& f, const ArrayXX<double>& x) {
  if (f.cols() != 6 || x.cols() != 3 || f.rows() != x.rows())
    throw std::invalid_argument("sym3_apply: shape mismatch");
  ArrayXX<double> y(x.rows(), 3);
  y.col(0) = f.col(0) * x.col(0) + f.col(1) * x.col(1) + f.col(2) * x.col(2);
  y.col(1) = f.col(1) * x.col(0) + f.col(3) * x.col(1) + f.col(4) * x.col(2);
  y.col(2) = f.col(2) * x.col(0) + f.col(4) * x.col(1) + f.col(5) * x.col(2);
  return y;
}

/// Sum over in-mask voxels of sum_k r_k ln pi_k over all K+1 classes, with
/// the class probabilities given by the stored logits. Out-of-mask voxels
/// carry no categorical evidence and contribute exactly zero.
inline double categorical_term(const ArrayXX<double>& logits, const ArrayXX<double>& resp,
                               const Mask& mask) {
  ArrayXX<double> ls = log_softmax_implicit(logits);
  if (resp.rows() != ls.rows() || resp.cols() != ls.cols() || mask.size() != ls.rows())
    throw std::invalid_argument("categorical_term: shape mismatch");
  ArrayX<double> row = (resp * ls).rowwise().sum();
  return mask.select(row, 0.0).sum();
}

/// One subject's view of the shape problem: full responsibilities (K+1
/// columns), the finite-data mask, and the map of its grid into template
/// voxel coordinates.
struct SubjectShapeView {
  const ArrayXX<double>* resp = nullptr;
  const Mask* mask = nullptr;
  const Deformation<double>* psi = nullptr;
};

inline double template_objective(const std::vector<SubjectShapeView>& subs,
                                 const ArrayXX<double>& t, const Dims& dims,
                                 const EnergySpec& prior, const Eigen::Vector3d& vox_mm) {
  double obj = 0;
  for (const auto& s : subs)
    obj += categorical_term(pull(t, dims, s.psi->map, Boundary::Clamp), *s.resp, *s.mask);
  if (prior.any()) obj -= energy(t, dims, prior, vox_mm);
  return obj;
}

/// Ascent gradient of template_objective with respect to the logits.
inline ArrayXX<double> template_gradient(const std::vector<SubjectShapeView>& subs,
                                         const ArrayXX<double>& t, const Dims& dims,
                                         const EnergySpec& prior,
                                         const Eigen::Vector3d& vox_mm) {
  const Index n = t.rows(), k = t.cols();
  if (n != nvox(dims)) throw std::invalid_argument("template_gradient: lattice mismatch");
  ArrayXX<double> g = ArrayXX<double>::Zero(n, k);
  for (const auto& sub : subs) {
    if (sub.resp->cols() != k + 1)
      throw std::invalid_argument("template_gradient: responsibility columns mismatch");
    ArrayXX<double> pi = softmax_implicit(pull(t, dims, sub.psi->map, Boundary::Clamp));
    ArrayXX<double> d = sub.resp->leftCols(k) - pi;
    for (Index j = 0; j < k; ++j) d.col(j) = sub.mask->select(d.col(j), 0.0);
    g += push(d, dims, sub.psi->map, Boundary::Clamp);
  }
  if (prior.any()) g -= operator_apply(t, dims, prior, vox_mm);
  return g;
}

struct TemplateUpdateResult {
  ArrayXX<double> logits;
  double objective = 0;
  int halvings = 0;  // -1: no improving step was found, previous kept
  CgResult cg;
};

/// One bound-Newton ascent step on the template logits: the per-voxel
/// curvature is the blended bound at each subject voxel, sandwiched between
/// the pull into subject space and its adjoint, plus the field prior. The
/// Newton system is solved by preconditioned CG and the step is halved until
/// the exact objective does not decrease.
inline TemplateUpdateResult update_template(const std::vector<SubjectShapeView>& subs,
                                            const ArrayXX<double>& t, const Dims& dims,
                                            const Eigen::Vector3d& vox_mm,
                                            const EnergySpec& prior, double w, Index denom,
                                            const CgOpts& cg_opts = {}) {
  const Index n = t.rows(), k = t.cols();
  if (n != nvox(dims)) throw std::invalid_argument("update_template: lattice mismatch");
  std::vector<ArrayXX<double>> pis(subs.size());
  double diag_sum = 0;
  for (size_t s = 0; s < subs.size(); ++s) {
    const auto& sub = subs[s];
    pis[s] = softmax_implicit(pull(t, dims, sub.psi->map, Boundary::Clamp));
    for (Index j = 0; j < k; ++j) {
      ArrayX<double> d = w * (pis[s].col(j) - pis[s].col(j).square()) +
                         (1 - w) * 0.5 * (1.0 - 1.0 / double(denom));
      diag_sum += sub.mask->select(d, 0.0).sum();
    }
  }

  EnergySpec pspec = prior;
  pspec.absolute += diag_sum / double(n * k) / vox_mm.prod();
  std::optional<GreensSolver> prec;
  if (pspec.any()) prec.emplace(dims, 1, pspec, vox_mm);

  auto apply_a = [&](const ArrayXX<double>& x) {
    ArrayXX<double> out = prior.any() ? operator_apply(x, dims, prior, vox_mm)
                                      : ArrayXX<double>(ArrayXX<double>::Zero(n, k));
    for (size_t s = 0; s < subs.size(); ++s) {
      ArrayXX<double> p = pull(x, dims, subs[s].psi->map, Boundary::Clamp);
      out += push(blend_apply(pis[s], *subs[s].mask, w, denom, p), dims,
                  subs[s].psi->map, Boundary::Clamp);
    }
    return out;
  };
  auto apply_m = [&](const ArrayXX<double>& r) {
    if (!prec) return ArrayXX<double>(r);
    ArrayXX<double> out(n, k);
    for (Index j = 0; j < k; ++j) {
      ArrayXX<double> col = r.col(j);
      out.col(j) = prec->solve(col).col(0);
    }
    return out;
  };

  ArrayXX<double> b = template_gradient(subs, t, dims, prior, vox_mm);
  ArrayXX<double> delta = ArrayXX<double>::Zero(n, k);
  TemplateUpdateResult res;
  res.cg = pcg(apply_a, apply_m, b, delta, cg_opts);

  const double base = template_objective(subs, t, dims, prior, vox_mm);
  double alpha = 1;
  for (int h = 0; h <= 8; ++h, alpha *= 0.5) {
    ArrayXX<double> cand = t + alpha * delta;
    const double obj = template_objective(subs, cand, dims, prior, vox_mm);
    if (std::isfinite(obj) && obj >= base) {
      res.logits = std::move(cand);
      res.objective = obj;
      res.halvings = h;
      return res;
    }
  }
  res.logits = t;
  res.objective = base;
  res.halvings = -1;
  return res;
}

/// The per-subject shape objective a velocity update must not decrease:
/// categorical term under the composed warp minus the velocity prior energy.
inline double velocity_objective(const ArrayXX<double>& resp, const Mask& mask,
                                 const Deformation<double>& a_def, const ArrayXX<double>& t,
                                 const Dims& dims_t, const Eigen::Vector3d& vox_mm_t,
                                 const VelocityField& v, const ShootResult& shot) {
  Deformation<double> psi = compose(shot.phi_inv, a_def);
  return categorical_term(pull(t, dims_t, psi.map, Boundary::Clamp), resp, mask) -
         energy(ArrayXX<double>(v.v), dims_t, v.metric, vox_mm_t);
}

/// Ascent gradient of velocity_objective with respect to the initial
/// velocity, linearised at the current warp: the steered class residual is
/// carried back to the template grid by the adjoint of the affine pull.
/// Exact at a single integration step.
inline ArrayX3<double> velocity_gradient(const ArrayXX<double>& resp, const Mask& mask,
                                         const Deformation<double>& a_def,
                                         const ArrayXX<double>& t, const Dims& dims_t,
                                         const Eigen::Vector3d& vox_mm_t,
                                         const VelocityField& v, const ShootResult& shot) {
  const Index k = t.cols();
  if (resp.cols() != k + 1)
    throw std::invalid_argument("velocity_gradient: responsibility columns mismatch");
  Deformation<double> psi = compose(shot.phi_inv, a_def);
  ArrayXX<double> lt, jt;
  pull_with_grad(t, dims_t, psi.map, Boundary::Clamp, lt, jt);
  ArrayXX<double> dr = softmax_implicit(lt) - resp.leftCols(k);
  for (Index j = 0; j < k; ++j) dr.col(j) = mask.select(dr.col(j), 0.0);
  ArrayXX<double> s = steer(jt, dr);
  return push(s, dims_t, a_def.map, Boundary::Clamp) -
         operator_apply(ArrayXX<double>(v.v), dims_t, v.metric, vox_mm_t);
}

struct VelocityDirection {
  ArrayX3<double> delta;
  CgResult cg;
};

/// The Gauss-Newton ascent direction on a subject's initial velocity. The
/// blended bound gives the per-voxel 3x3 curvature of the data term, carried
/// between grids by the affine pull and its adjoint; the prior operator
/// completes the normal matrix, solved by preconditioned conjugate gradients.
inline VelocityDirection velocity_direction(
    const ArrayXX<double>& resp, const Mask& mask, const Deformation<double>& a_def,
    const ArrayXX<double>& t, const Dims& dims_t, const Eigen::Vector3d& vox_mm_t,
    const VelocityField& v, const ShootResult& shot, double w, Index denom,
    const CgOpts& cg_opts = {}) {
  const Index nt = t.rows();
  if (nt != nvox(dims_t)) throw std::invalid_argument("update_velocity: lattice mismatch");
  if (!same_dims(v.grid, dims_t))
    throw std::invalid_argument("update_velocity: velocity grid must match the template");

  ArrayXX<double> b = velocity_gradient(resp, mask, a_def, t, dims_t, vox_mm_t, v, shot);

  Deformation<double> psi = compose(shot.phi_inv, a_def);
  ArrayXX<double> lt, jt;
  pull_with_grad(t, dims_t, psi.map, Boundary::Clamp, lt, jt);
  ArrayXX<double> f6 = fisher3(jt, softmax_implicit(lt), mask, w, denom);

  EnergySpec pspec = v.metric;
  pspec.absolute +=
      (f6.col(0) + f6.col(3) + f6.col(5)).sum() / double(3 * nt) / vox_mm_t.prod();
  GreensSolver prec(dims_t, 3, pspec, vox_mm_t);

  auto apply_a = [&](const ArrayXX<double>& x) {
    ArrayXX<double> out = operator_apply(x, dims_t, v.metric, vox_mm_t);
    ArrayXX<double> xp = pull(x, dims_t, a_def.map, Boundary::Clamp);
    out += push(sym3_apply(f6, xp), dims_t, a_def.map, Boundary::Clamp);
    return out;
  };
  auto apply_m = [&](const ArrayXX<double>& r) { return prec.solve(r); };

  ArrayXX<double> delta = ArrayXX<double>::Zero(nt, 3);
  VelocityDirection res;
  res.cg = pcg(apply_a, apply_m, b, delta, cg_opts);
  res.delta = delta;
  return res;
}

struct VelocityUpdateResult {
  VelocityField v;
  ShootResult shot;
  double objective = 0;
  int halvings = 0;  // -1: no improving step was found, previous kept
  CgResult cg;
};

/// One Gauss-Newton step on a subject's initial velocity. Every trial step
/// is re-shot and kept only if the exact objective does not decrease.
inline VelocityUpdateResult update_velocity(
    const ArrayXX<double>& resp, const Mask& mask, const Deformation<double>& a_def,
    const ArrayXX<double>& t, const Dims& dims_t, const Eigen::Vector3d& vox_mm_t,
    const VelocityField& v, const ShootResult& shot, int steps, const GreensSolver& greens,
    double w, Index denom, const CgOpts& cg_opts = {}) {
  VelocityDirection dir =
      velocity_direction(resp, mask, a_def, t, dims_t, vox_mm_t, v, shot, w, denom, cg_opts);
  const ArrayX3<double>& delta = dir.delta;
  VelocityUpdateResult res;
  res.cg = dir.cg;

  const double base = velocity_objective(resp, mask, a_def, t, dims_t, vox_mm_t, v, shot);
  double alpha = 1;
  for (int h = 0; h <= 8; ++h, alpha *= 0.5) {
    VelocityField cand = v;
    cand.v = v.v + alpha * delta;
    ShootResult sr;
    try {
      sr = shoot(cand, steps, &greens);
    } catch (const std::runtime_error&) {
      continue;  // folded; halve
    }
    const double obj =
        velocity_objective(resp, mask, a_def, t, dims_t, vox_mm_t, cand, sr);
    if (std::isfinite(obj) && obj >= base) {
      res.v = std::move(cand);
      res.shot = std::move(sr);
      res.objective = obj;
      res.halvings = h;
      return res;
    }
  }
  res.v = v;
  res.shot = shot;
  res.objective = base;
  res.halvings = -1;
  return res;
}

/// Subject-voxel to template-voxel affine for rigid parameters q.
inline Eigen::Matrix4d rigid_voxel_affine(const RigidParams& q,
                                          const Eigen::Matrix4d& vox2world_subject,
                                          const Eigen::Matrix4d& vox2world_template) {
  return affine_chain(vox2world_template.inverse(), exp_rigid(q), vox2world_subject);
}

/// Subject-grid sampling map into template voxels for pose q: the affine
/// followed by the frozen inverse warp's displacement.
inline ArrayX3<double> rigid_warp_map(const RigidParams& q,
                                      const Eigen::Matrix4d& vox2world_subject,
                                      const Eigen::Matrix4d& vox2world_template,
                                      const Dims& dims_subject,
                                      const Deformation<double>& phi_inv) {
  Eigen::Matrix4d a = rigid_voxel_affine(q, vox2world_subject, vox2world_template);
  ArrayX3<double> am = affine_deformation<double>(a, dims_subject).map;
  ArrayXX<double> disp = phi_inv.map - identity_map<double>(phi_inv.grid);
  return am + pull(disp, phi_inv.grid, am, Boundary::Clamp);
}

namespace detail {

struct RigidLin {
  ArrayX3<double> psi;
  Eigen::Matrix<double, 6, 1> grad = Eigen::Matrix<double, 6, 1>::Zero();
  Eigen::Matrix<double, 6, 6> hess = Eigen::Matrix<double, 6, 6>::Zero();
};

inline RigidLin rigid_linearise(const ArrayXX<double>& resp, const Mask& mask,
                                const RigidParams& q,
                                const Eigen::Matrix4d& vox2world_subject,
                                const Eigen::Matrix4d& vox2world_template,
                                const Dims& dims_subject,
                                const Deformation<double>& phi_inv,
                                const ArrayXX<double>& t, const Dims& dims_t, double w,
                                Index denom) {
  const Index k = t.cols();
  if (resp.cols() != k + 1)
    throw std::invalid_argument("update_rigid: responsibility columns mismatch");
  if (!same_dims(phi_inv.grid, dims_t))
    throw std::invalid_argument("update_rigid: inverse warp must live on the template grid");
  const ArrayX3<double> id_sub = identity_map<double>(dims_subject);
  const ArrayXX<double> disp = phi_inv.map - identity_map<double>(dims_t);

  Eigen::Matrix4d a = rigid_voxel_affine(q, vox2world_subject, vox2world_template);
  ArrayX3<double> am = affine_deformation<double>(a, dims_subject).map;
  ArrayXX<double> dval, dgrad;
  pull_with_grad(disp, dims_t, ArrayX3<double>(am), Boundary::Clamp, dval, dgrad);

  RigidLin lin;
  lin.psi = am + dval;
  ArrayXX<double> lt, jt;
  pull_with_grad(t, dims_t, ArrayX3<double>(lin.psi), Boundary::Clamp, lt, jt);
  ArrayXX<double> pi = softmax_implicit(lt);
  ArrayXX<double> dr = pi - resp.leftCols(k);
  for (Index j = 0; j < k; ++j) dr.col(j) = mask.select(dr.col(j), 0.0);
  ArrayXX<double> s = steer(jt, dr);
  ArrayXX<double> f6 = fisher3(jt, pi, mask, w, denom);

  const Eigen::Matrix4d mt_inv = vox2world_template.inverse();
  const auto dexp = dexp_rigid(q);
  std::vector<ArrayXX<double>> u(6);
  for (int j = 0; j < 6; ++j) {
    Eigen::Matrix4d cj = mt_inv * dexp[size_t(j)] * vox2world_subject;
    Eigen::Matrix3d clin = cj.topLeftCorner<3, 3>();
    Eigen::Vector3d coff = cj.topRightCorner<3, 1>();
    ArrayX3<double> mj = id_sub;
    mj.matrix() = (id_sub.matrix() * clin.transpose()).rowwise() + coff.transpose();
    // carry through the frozen warp: u = (I + D disp) m
    ArrayXX<double> uj = mj;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) uj.col(r) += dgrad.col(3 * r + c) * mj.col(c);
    lin.grad[j] = -(s * uj).sum();
    u[size_t(j)] = std::move(uj);
  }
  for (int j = 0; j < 6; ++j) {
    ArrayXX<double> fu = sym3_apply(f6, u[size_t(j)]);
    for (int l = 0; l <= j; ++l) {
      lin.hess(j, l) = (fu * u[size_t(l)]).sum();
      lin.hess(l, j) = lin.hess(j, l);
    }
  }
  return lin;
}

}  // namespace detail

/// Ascent gradient of the categorical term with respect to the six pose
/// parameters, with the inverse warp frozen.
inline Eigen::Matrix<double, 6, 1> rigid_gradient(
    const ArrayXX<double>& resp, const Mask& mask, const RigidParams& q,
    const Eigen::Matrix4d& vox2world_subject, const Eigen::Matrix4d& vox2world_template,
    const Dims& dims_subject, const Deformation<double>& phi_inv, const ArrayXX<double>& t,
    const Dims& dims_t) {
  return detail::rigid_linearise(resp, mask, q, vox2world_subject, vox2world_template,
                                 dims_subject, phi_inv, t, dims_t, 1.0, t.cols() + 1)
      .grad;
}

struct RigidDirection {
  RigidParams dq = RigidParams::Zero();
  bool damped = false;
  ArrayX3<double> psi;  // sampling map at the linearisation point
};

/// The damped Gauss-Newton ascent direction on a subject's rigid pose. The
/// sampling point's sensitivity to each pose parameter is the exact
/// exponential-map derivative carried through the frozen inverse warp's
/// Jacobian; the 6x6 system uses the same blended curvature as the other
/// shape updates.
inline RigidDirection rigid_direction(const ArrayXX<double>& resp, const Mask& mask,
                                      const RigidParams& q,
                                      const Eigen::Matrix4d& vox2world_subject,
                                      const Eigen::Matrix4d& vox2world_template,
                                      const Dims& dims_subject,
                                      const Deformation<double>& phi_inv,
                                      const ArrayXX<double>& t, const Dims& dims_t,
                                      double w, Index denom) {
  detail::RigidLin lin =
      detail::rigid_linearise(resp, mask, q, vox2world_subject, vox2world_template,
                              dims_subject, phi_inv, t, dims_t, w, denom);
  RigidDirection dir;
  Eigen::Matrix<double, 6, 6> h66 = lin.hess;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 6, 6>> es(h66);
  const double emax = es.eigenvalues().cwiseAbs().maxCoeff();
  if (!(es.eigenvalues().minCoeff() > 1e-9 * std::max(emax, 1e-12))) {
    h66 += (1e-6 * h66.trace() / 6 + 1e-12) * Eigen::Matrix<double, 6, 6>::Identity();
    dir.damped = true;
  }
  dir.dq = h66.ldlt().solve(lin.grad);
  dir.psi = std::move(lin.psi);
  return dir;
}

struct RigidUpdateResult {
  RigidParams q;
  double objective = 0;  // categorical term; the pose carries no prior
  int halvings = 0;      // -1: no improving step was found, previous kept
  bool damped = false;
};

/// One damped Gauss-Newton step on a subject's rigid pose, halved until the
/// categorical term does not decrease.
inline RigidUpdateResult update_rigid(const ArrayXX<double>& resp, const Mask& mask,
                                      const RigidParams& q,
                                      const Eigen::Matrix4d& vox2world_subject,
                                      const Eigen::Matrix4d& vox2world_template,
                                      const Dims& dims_subject,
                                      const Deformation<double>& phi_inv,
                                      const ArrayXX<double>& t, const Dims& dims_t,
                                      double w, Index denom) {
  RigidDirection dir = rigid_direction(resp, mask, q, vox2world_subject, vox2world_template,
                                       dims_subject, phi_inv, t, dims_t, w, denom);
  RigidUpdateResult res;
  res.q = q;
  res.damped = dir.damped;
  const RigidParams& dq = dir.dq;

  auto data_term = [&](const ArrayX3<double>& m) {
    return categorical_term(pull(t, dims_t, m, Boundary::Clamp), resp, mask);
  };
  const double base = data_term(dir.psi);
  double alpha = 1;
  for (int h = 0; h <= 8; ++h, alpha *= 0.5) {
    RigidParams qc = q + alpha * dq;
    const double obj = data_term(
        rigid_warp_map(qc, vox2world_subject, vox2world_template, dims_subject, phi_inv));
    if (std::isfinite(obj) && obj >= base) {
      res.q = qc;
      res.objective = obj;
      res.halvings = h;
      return res;
    }
  }
  res.objective = base;
  res.halvings = -1;
  return res;
}

/// Remove the population mean of the initial velocities. The first N-1
/// subjects are centred and the last is set to minus their sum, so the
/// field-wise total is exactly zero.
inline void enforce_zero_mean(std::vector<VelocityField>& vs) {
  if (vs.empty()) return;
  const Index n = vs[0].v.rows();
  ArrayX3<double> mean = ArrayX3<double>::Zero(n, 3);
  for (const auto& v : vs) {
    if (v.v.rows() != n) throw std::invalid_argument("enforce_zero_mean: grid mismatch");
    mean += v.v;
  }
  mean /= double(vs.size());
  ArrayX3<double> sum = ArrayX3<double>::Zero(n, 3);
  for (size_t i = 0; i + 1 < vs.size(); ++i) {
    vs[i].v -= mean;
    sum += vs[i].v;
  }
  vs.back().v = -sum;
}

/// Same centring for the rigid parameters, component-wise.
inline void enforce_zero_mean(std::vector<RigidParams>& qs) {
  if (qs.empty()) return;
  RigidParams mean = RigidParams::Zero();
  for (const auto& q : qs) mean += q;
  mean /= double(qs.size());
  RigidParams sum = RigidParams::Zero();
  for (size_t i = 0; i + 1 < qs.size(); ++i) {
    qs[i] -= mean;
    sum += qs[i];
  }
  qs.back() = -sum;
}

}  // namespace gw
