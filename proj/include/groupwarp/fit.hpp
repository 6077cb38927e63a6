#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <memory>
#include <thread>
#include <vector>

#include "groupwarp/model.hpp"

namespace gw {

struct WorldBox {
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
  Eigen::Vector3d hi = Eigen::Vector3d::Constant(-std::numeric_limits<double>::infinity());
};

inline WorldBox world_box(const Dims& d, const Eigen::Matrix4d& m, WorldBox b = {}) {
  for (int cx = 0; cx < 2; ++cx)
    for (int cy = 0; cy < 2; ++cy)
      for (int cz = 0; cz < 2; ++cz) {
        Eigen::Vector3d v(cx ? double(d[0] - 1) : 0.0, cy ? double(d[1] - 1) : 0.0,
                          cz ? double(d[2] - 1) : 0.0);
        Eigen::Vector3d w = apply_affine(m, v);
        b.lo = b.lo.cwiseMin(w);
        b.hi = b.hi.cwiseMax(w);
      }
  return b;
}

inline WorldBox subjects_world_box(const std::vector<SubjectInput>& inputs) {
  WorldBox b;
  for (const auto& in : inputs) b = world_box(in.image.dims, in.image.vox2world, b);
  return b;
}

/// Axis-aligned lattice covering the box at spacing h, centred on it.
inline TemplateState lattice_from_box(const WorldBox& b, double h, Index classes) {
  if (!(h > 0)) throw std::invalid_argument("lattice_from_box: spacing must be positive");
  TemplateState t;
  Eigen::Vector3d ext = b.hi - b.lo;
  if (!ext.allFinite() || (ext.array() < 0).any())
    throw std::invalid_argument("lattice_from_box: empty world box");
  for (int a = 0; a < 3; ++a)
    t.dims[a] = std::max<Index>(1, Index(std::ceil(ext[a] / h - 1e-9)) + 1);
  t.vox2world =
      centered_affine(t.dims, Eigen::Vector3d::Constant(h), (b.lo + b.hi) / 2);
  t.logits = ArrayXX<double>::Zero(nvox(t.dims), classes);
  return t;
}

/// Trilinear resample of a lattice field between two oriented lattices.
inline ArrayXX<double> resample_to(const ArrayXX<double>& src, const Dims& src_dims,
                                   const Eigen::Matrix4d& src_m, const Dims& dst_dims,
                                   const Eigen::Matrix4d& dst_m) {
  Deformation<double> map = affine_deformation<double>(
      affine_chain(src_m.inverse(), dst_m, Eigen::Matrix4d::Identity()), dst_dims);
  return pull(src, src_dims, map.map, Boundary::Clamp);
}

/// The template carried to a new spacing over its own world extent.
inline TemplateState resample_template(const TemplateState& src, double h) {
  src.check();
  TemplateState dst = lattice_from_box(world_box(src.dims, src.vox2world), h,
                                       src.logits.cols());
  dst.logits = resample_to(src.logits, src.dims, src.vox2world, dst.dims, dst.vox2world);
  return dst;
}

/// Velocity carried to a finer template lattice: trilinear interpolation of
/// the components plus the linear change of voxel units.
inline VelocityField prolong_velocity(const VelocityField& vc, const Eigen::Matrix4d& mc,
                                      const TemplateState& fine) {
  vc.check();
  ArrayXX<double> vi =
      resample_to(ArrayXX<double>(vc.v), vc.grid, mc, fine.dims, fine.vox2world);
  Eigen::Matrix3d lin = (fine.vox2world.inverse() * mc).topLeftCorner<3, 3>();
  VelocityField vf;
  vf.grid = fine.dims;
  vf.vox_mm = fine.vox_mm();
  vf.metric = vc.metric;
  vf.v = (vi.matrix() * lin.transpose()).array();
  return vf;
}

/// Pooled-intensity starting prior: class means spread over the pooled
/// quantiles, precisions from the pooled per-channel variance, weak counts.
inline GaussWishart init_shared_prior(const std::vector<SubjectInput>& inputs,
                                      Index classes) {
  if (inputs.empty()) throw std::invalid_argument("init_shared_prior: no subjects");
  const Index c = inputs[0].image.data.cols();
  std::vector<std::vector<double>> vals(c);
  for (const auto& in : inputs) {
    if (in.image.data.cols() != c)
      throw std::invalid_argument("init_shared_prior: channel count mismatch across subjects");
    for (Index i = 0; i < in.image.data.rows(); ++i)
      if (in.mask[i])
        for (Index ch = 0; ch < c; ++ch) vals[ch].push_back(in.image.data(i, ch));
  }
  if (vals[0].empty())
    throw std::invalid_argument("init_shared_prior: no finite voxels in any subject");

  Eigen::VectorXd var(c);
  for (Index ch = 0; ch < c; ++ch) {
    std::sort(vals[ch].begin(), vals[ch].end());
    const double n = double(vals[ch].size());
    double mu = 0, m2 = 0;
    for (double v : vals[ch]) mu += v;
    mu /= n;
    for (double v : vals[ch]) m2 += (v - mu) * (v - mu);
    var[ch] = m2 / n;
    if (!(var[ch] > 0)) var[ch] = 1;
  }

  GaussWishart g;
  g.m.resize(c, classes);
  g.beta = Eigen::VectorXd::Constant(classes, 0.01);
  g.nu = Eigen::VectorXd::Constant(classes, double(c));
  g.W.assign(classes, Eigen::MatrixXd::Zero(c, c));
  for (Index k = 0; k < classes; ++k) {
    const double q = double(k + 1) / double(classes + 1);
    for (Index ch = 0; ch < c; ++ch) {
      const size_t sz = vals[ch].size();
      const size_t idx = std::min(sz - 1, size_t(q * double(sz)));
      g.m(ch, k) = vals[ch][idx];
      g.W[k](ch, ch) = 1.0 / (var[ch] * double(c));
    }
  }
  g.check();
  return g;
}

struct FitResult {
  TemplateState tmpl;
  GaussWishart shared;
  std::vector<SubjectState> subjects;
  Trace trace;
  std::vector<std::string> warnings;
  ElboTerms terms;  // breakdown at the final state
};

namespace detail {

template <class F>
void parallel_subjects(int threads, size_t n, F&& f) {
  const int tn = int(std::min<size_t>(size_t(std::max(threads, 1)), n));
  if (tn <= 1) {
    for (size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::exception_ptr> errs(n);
  std::vector<std::thread> pool;
  pool.reserve(tn);
  for (int t = 0; t < tn; ++t)
    pool.emplace_back([&, t] {
      for (size_t i = size_t(t); i < n; i += size_t(tn)) {
        try {
          f(i);
        } catch (...) {
          errs[i] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

struct FitDriver {
  const std::vector<SubjectInput>& inputs;
  FitConfig cfg;
  bool groupwise = true;
  const TemplateState* fixed = nullptr;

  std::vector<SubjectAux> aux;
  WorldBox box;
  TemplateState tmpl;
  GaussWishart shared;
  std::vector<SubjectState> subs;
  std::unique_ptr<GreensSolver> greens3;
  Trace trace;
  std::vector<std::string> warnings;
  Index step = 0;
  int level = 0;

  FitDriver(const std::vector<SubjectInput>& ins, const FitConfig& c) : inputs(ins), cfg(c) {}

  Index klass() const { return tmpl.logits.cols(); }
  Index denom() const { return cfg.bound_classes > 0 ? cfg.bound_classes : klass(); }

  void record(int iter, const char* phase) {
    TraceRow row;
    row.step = step++;
    row.level = level;
    row.iter = iter;
    row.phase = phase;
    row.elbo = elbo(inputs, aux, tmpl, shared, subs, cfg);
    if (!trace.empty()) {
      const TraceRow& prev = trace.back();
      if (prev.level == row.level && row.elbo < prev.elbo - 1e-3 * std::abs(prev.elbo)) {
        char buf[160];
        std::snprintf(buf, sizeof buf,
                      "elbo decreased by %.3e (relative) at level %d iter %d phase %s",
                      (prev.elbo - row.elbo) / std::max(1.0, std::abs(prev.elbo)),
                      row.level, row.iter, phase);
        warnings.emplace_back(buf);
      }
    }
    trace.push_back(std::move(row));
  }

  template <class F>
  void phase_subjects(const char* phase, int iter, F&& f) {
    parallel_subjects(cfg.threads, inputs.size(), [&](size_t i) {
      try {
        f(i);
      } catch (const std::exception& e) {
        throw std::runtime_error("fit: subject '" + inputs[i].name + "' level " +
                                 std::to_string(level) + " iter " + std::to_string(iter) +
                                 " phase " + phase + ": " + e.what());
      }
    });
  }

  ArrayXX<double> log_prior(size_t i) const {
    Deformation<double> psi = subject_warp(inputs[i], subs[i], tmpl);
    return log_softmax_implicit(
        pull(tmpl.logits, tmpl.dims, psi.map, Boundary::Clamp));
  }

  void start_level(int li) {
    level = li;
    const double h = cfg.schedule[li].vox_mm;
    const EnergySpec metric = cfg.velocity_metric();

    TemplateState next;
    if (groupwise) {
      next = (li == 0) ? lattice_from_box(box, h, cfg.classes)
                       : lattice_from_box(box, h, klass());
      if (li > 0)
        next.logits =
            resample_to(tmpl.logits, tmpl.dims, tmpl.vox2world, next.dims, next.vox2world);
    } else {
      next = resample_template(*fixed, h);
    }

    if (li == 0) {
      subs.assign(inputs.size(), SubjectState{});
      tmpl = std::move(next);
      greens3 = std::make_unique<GreensSolver>(tmpl.dims, 3, metric, tmpl.vox_mm());
      phase_subjects("init", 0, [&](size_t i) {
        SubjectState& st = subs[i];
        st.post = shared;
        st.bias = BiasField::zeros(aux[i].basis.count(), inputs[i].image.data.cols());
        st.v.grid = tmpl.dims;
        st.v.vox_mm = tmpl.vox_mm();
        st.v.metric = metric;
        st.v.v = ArrayX3<double>::Zero(nvox(tmpl.dims), 3);
        st.shot = identity_shot(tmpl.dims);
        st.resp = log_prior(i).exp();
      });
      record(0, "init");
    } else {
      const Eigen::Matrix4d mc = tmpl.vox2world;
      const Dims coarse = tmpl.dims;
      (void)coarse;
      tmpl = std::move(next);
      greens3 = std::make_unique<GreensSolver>(tmpl.dims, 3, metric, tmpl.vox_mm());
      phase_subjects("prolong", 0, [&](size_t i) {
        SubjectState& st = subs[i];
        st.v = prolong_velocity(st.v, mc, tmpl);
        st.shot = shoot(st.v, cfg.shoot_steps, greens3.get());
      });
      record(0, "prolong");
    }
  }

  void iterate(int iter) {
    const double w = cfg.w;
    const Index dn = denom();
    const Eigen::Vector3d hv = tmpl.vox_mm();

    phase_subjects("responsibilities", iter, [&](size_t i) {
      ArrayXX<double> lf = subject_log_field(aux[i], subs[i], inputs[i].image.data.cols());
      ArrayXX<double> xb = subject_corrected(inputs[i], lf);
      subs[i].resp = responsibilities(xb, inputs[i].mask, subs[i].post, log_prior(i)).r;
    });
    record(iter, "responsibilities");

    phase_subjects("appearance", iter, [&](size_t i) {
      ArrayXX<double> lf = subject_log_field(aux[i], subs[i], inputs[i].image.data.cols());
      ArrayXX<double> xb = subject_corrected(inputs[i], lf);
      subs[i].post =
          update_gauss_wishart(moment_stats(xb, inputs[i].mask, subs[i].resp), shared);
    });
    record(iter, "appearance");

    phase_subjects("bias", iter, [&](size_t i) {
      subs[i].bias = update_bias(inputs[i].image.data, inputs[i].mask, subs[i].post,
                                 subs[i].resp, aux[i].phi, aux[i].gram, cfg.lambda_bias,
                                 subs[i].bias)
                         .field;
    });
    record(iter, "bias");

    if (groupwise) {
      rigid_phase(iter, w, dn);
    } else {
      phase_subjects("rigid", iter, [&](size_t i) {
        subs[i].q = update_rigid(subs[i].resp, inputs[i].mask, subs[i].q,
                                 inputs[i].image.vox2world, tmpl.vox2world,
                                 inputs[i].image.dims, subs[i].shot.phi_inv, tmpl.logits,
                                 tmpl.dims, w, dn)
                        .q;
      });
    }
    record(iter, "rigid");

    if (groupwise) {
      velocity_phase(iter, w, dn, hv);
    } else {
      phase_subjects("velocity", iter, [&](size_t i) {
        Deformation<double> a_def = subject_affine_def(inputs[i], subs[i], tmpl);
        VelocityUpdateResult r =
            update_velocity(subs[i].resp, inputs[i].mask, a_def, tmpl.logits, tmpl.dims,
                            hv, subs[i].v, subs[i].shot, cfg.shoot_steps, *greens3, w, dn,
                            cfg.cg);
        subs[i].v = std::move(r.v);
        subs[i].shot = std::move(r.shot);
      });
    }
    record(iter, "velocity");

    if (!groupwise) return;

    {
      std::vector<Deformation<double>> psis(inputs.size());
      std::vector<SubjectShapeView> views(inputs.size());
      for (size_t i = 0; i < inputs.size(); ++i) {
        psis[i] = subject_warp(inputs[i], subs[i], tmpl);
        views[i] = {&subs[i].resp, &inputs[i].mask, &psis[i]};
      }
      tmpl.logits = update_template(views, tmpl.logits, tmpl.dims, hv,
                                    cfg.template_spec(), w, dn, cfg.cg)
                        .logits;
    }
    record(iter, "template");

    {
      std::vector<GaussWishart> posts(subs.size());
      for (size_t i = 0; i < subs.size(); ++i) posts[i] = subs[i].post;
      shared = update_shared_prior(posts);
    }
    record(iter, "shared_prior");
  }

  // Joint constrained pose step: per-subject Gauss-Newton directions with
  // the group mean removed, one shared step length backtracked on the summed
  // categorical term. The last pose is pinned to minus the others' sum, so
  // the parameter total stays bitwise zero at every accepted state.
  void rigid_phase(int iter, double w, Index dn) {
    const size_t ns = subs.size();
    std::vector<RigidDirection> dirs(ns);
    phase_subjects("rigid", iter, [&](size_t i) {
      dirs[i] = rigid_direction(subs[i].resp, inputs[i].mask, subs[i].q,
                                inputs[i].image.vox2world, tmpl.vox2world,
                                inputs[i].image.dims, subs[i].shot.phi_inv, tmpl.logits,
                                tmpl.dims, w, dn);
    });
    RigidParams mean = RigidParams::Zero();
    for (const auto& d : dirs) mean += d.dq;
    mean /= double(ns);
    for (auto& d : dirs) d.dq -= mean;

    std::vector<double> vals(ns);
    phase_subjects("rigid", iter, [&](size_t i) {
      vals[i] = categorical_term(pull(tmpl.logits, tmpl.dims, dirs[i].psi, Boundary::Clamp),
                                 subs[i].resp, inputs[i].mask);
    });
    double base = 0;
    for (double v : vals) base += v;

    double alpha = 1;
    for (int h = 0; h <= 8; ++h, alpha *= 0.5) {
      std::vector<RigidParams> qc(ns, RigidParams::Zero());
      for (size_t i = 0; i + 1 < ns; ++i) {
        qc[i] = subs[i].q + alpha * dirs[i].dq;
        qc[ns - 1] -= qc[i];
      }
      phase_subjects("rigid", iter, [&](size_t i) {
        vals[i] = categorical_term(
            pull(tmpl.logits, tmpl.dims,
                 rigid_warp_map(qc[i], inputs[i].image.vox2world, tmpl.vox2world,
                                inputs[i].image.dims, subs[i].shot.phi_inv),
                 Boundary::Clamp),
            subs[i].resp, inputs[i].mask);
      });
      double obj = 0;
      for (double v : vals) obj += v;
      if (std::isfinite(obj) && obj >= base) {
        for (size_t i = 0; i < ns; ++i) subs[i].q = qc[i];
        return;
      }
    }
  }

  // Joint constrained velocity step, mirroring the pose phase: centred CG
  // directions, one shared backtracked step length on the summed exact
  // objective, the last field pinned to minus the others' sum, and a fold
  // anywhere halving the whole trial.
  void velocity_phase(int iter, double w, Index dn, const Eigen::Vector3d& hv) {
    const size_t ns = subs.size();
    const Index nt = nvox(tmpl.dims);
    std::vector<Deformation<double>> adefs(ns);
    std::vector<ArrayX3<double>> deltas(ns);
    std::vector<double> vals(ns);
    phase_subjects("velocity", iter, [&](size_t i) {
      adefs[i] = subject_affine_def(inputs[i], subs[i], tmpl);
      deltas[i] = velocity_direction(subs[i].resp, inputs[i].mask, adefs[i], tmpl.logits,
                                     tmpl.dims, hv, subs[i].v, subs[i].shot, w, dn, cfg.cg)
                      .delta;
      vals[i] = velocity_objective(subs[i].resp, inputs[i].mask, adefs[i], tmpl.logits,
                                   tmpl.dims, hv, subs[i].v, subs[i].shot);
    });
    ArrayX3<double> mean = ArrayX3<double>::Zero(nt, 3);
    for (const auto& d : deltas) mean += d;
    mean /= double(ns);
    for (auto& d : deltas) d -= mean;
    double base = 0;
    for (double v : vals) base += v;

    double alpha = 1;
    for (int h = 0; h <= 8; ++h, alpha *= 0.5) {
      std::vector<VelocityField> cand(ns);
      std::vector<ShootResult> shots(ns);
      std::vector<char> folded(ns, 0);
      ArrayX3<double> last = ArrayX3<double>::Zero(nt, 3);
      for (size_t i = 0; i + 1 < ns; ++i) {
        cand[i] = subs[i].v;
        cand[i].v = subs[i].v.v + alpha * deltas[i];
        last -= cand[i].v;
      }
      cand[ns - 1] = subs[ns - 1].v;
      cand[ns - 1].v = std::move(last);
      phase_subjects("velocity", iter, [&](size_t i) {
        try {
          shots[i] = shoot(cand[i], cfg.shoot_steps, greens3.get());
        } catch (const std::runtime_error&) {
          folded[i] = 1;
          return;
        }
        vals[i] = velocity_objective(subs[i].resp, inputs[i].mask, adefs[i], tmpl.logits,
                                     tmpl.dims, hv, cand[i], shots[i]);
      });
      bool any_fold = false;
      for (char f : folded) any_fold |= f != 0;
      if (any_fold) continue;
      double obj = 0;
      for (double v : vals) obj += v;
      if (std::isfinite(obj) && obj >= base) {
        for (size_t i = 0; i < ns; ++i) {
          subs[i].v = std::move(cand[i]);
          subs[i].shot = std::move(shots[i]);
        }
        return;
      }
    }
  }

  FitResult run() {
    aux.reserve(inputs.size());
    for (const auto& in : inputs) aux.push_back(make_subject_aux(in, cfg.bias_cutoff_mm));
    for (int li = 0; li < int(cfg.schedule.size()); ++li) {
      start_level(li);
      for (int it = 1; it <= cfg.schedule[li].iters; ++it) iterate(it);
    }
    FitResult res;
    res.terms = elbo_terms(inputs, aux, tmpl, shared, subs, cfg);
    res.tmpl = std::move(tmpl);
    res.shared = std::move(shared);
    res.subjects = std::move(subs);
    res.trace = std::move(trace);
    res.warnings = std::move(warnings);
    return res;
  }
};

inline void check_inputs(const std::vector<SubjectInput>& inputs) {
  for (const auto& in : inputs) {
    in.image.check();
    if (in.mask.size() != in.image.data.rows())
      throw std::invalid_argument("fit: mask size mismatch for subject '" + in.name + "'");
    if (in.image.data.cols() != inputs[0].image.data.cols())
      throw std::invalid_argument("fit: channel count mismatch for subject '" + in.name +
                                  "'");
  }
}

}  // namespace detail

/// Joint fit of template, poses, warps, bias and appearance over a group.
inline FitResult fit_groupwise(const std::vector<SubjectInput>& inputs,
                               const FitConfig& cfg) {
  cfg.check();
  if (inputs.size() < 2)
    throw std::invalid_argument("fit_groupwise: needs at least two subjects");
  detail::check_inputs(inputs);
  detail::FitDriver d(inputs, cfg);
  d.groupwise = true;
  d.box = subjects_world_box(inputs);
  d.shared = init_shared_prior(inputs, cfg.classes + 1);
  return d.run();
}

/// Fit subjects against a fixed template and shared appearance prior; the
/// template, the prior and the group constraints stay untouched.
inline FitResult fit_to_template(const std::vector<SubjectInput>& inputs,
                                 const TemplateState& tmpl, const GaussWishart& shared,
                                 const FitConfig& cfg) {
  cfg.check();
  if (inputs.empty()) throw std::invalid_argument("fit_to_template: no subjects");
  detail::check_inputs(inputs);
  tmpl.check();
  shared.check();
  if (shared.classes() != tmpl.logits.cols() + 1)
    throw std::invalid_argument("fit_to_template: prior classes must be template classes + 1");
  if (shared.channels() != inputs[0].image.data.cols())
    throw std::invalid_argument("fit_to_template: prior channel count mismatch");
  detail::FitDriver d(inputs, cfg);
  d.groupwise = false;
  d.fixed = &tmpl;
  d.box = world_box(tmpl.dims, tmpl.vox2world);
  d.shared = shared;
  return d.run();
}

}  // namespace gw
