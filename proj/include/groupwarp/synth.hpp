#pragma once

#include <cmath>
#include <random>
#include <stdexcept>

#include "groupwarp/bias.hpp"
#include "groupwarp/model.hpp"

namespace gw {

struct SynthConfig {
  double max_disp_vox = 2.0;  // peak |v|; <= 0 keeps the natural draw scale
  double q_sigma_t = 0;       // translation jitter, mm
  double q_sigma_r = 0;       // rotation jitter, rad
  int shoot_steps = 8;
  double noise_scale = 1.0;   // 0 gives the expected intensity per class
  double bias_amp = 0;        // peak |log field|; 0 disables the bias draw
  double bias_cutoff_mm = 0;
  bool window = true;         // taper the velocity draw away from the faces
};

struct SynthResult {
  Volume<double> image;        // on the template lattice
  Eigen::ArrayXi labels;       // stored classes 1..K, implicit class 0
  VelocityField v;
  RigidParams q = RigidParams::Zero();
  ShootResult shot;
  ArrayXX<double> log_bias;    // true log field on the lattice
};

/// One subject drawn from the generative model: a spectral velocity draw,
/// a small pose, class labels from the warped prior, intensities from the
/// expected appearance, and an optional smooth multiplicative field.
inline SynthResult synth_generate(const TemplateState& tmpl, const GaussWishart& gw,
                                  const EnergySpec& metric, const SynthConfig& cfg,
                                  std::uint64_t seed) {
  tmpl.check();
  gw.check();
  if (gw.classes() != tmpl.logits.cols() + 1)
    throw std::invalid_argument("synth_generate: prior classes must be template classes + 1");
  if (cfg.shoot_steps < 1) throw std::invalid_argument("synth_generate: steps must be >= 1");
  const Dims& d = tmpl.dims;
  const Index n = nvox(d);
  const Index c = gw.channels();
  const Index kk = gw.classes();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  SynthResult out;
  out.v.grid = d;
  out.v.vox_mm = tmpl.vox_mm();
  out.v.metric = metric;
  out.v.v = ArrayX3<double>::Zero(n, 3);
  GreensSolver greens(d, 3, metric, tmpl.vox_mm());
  if (cfg.max_disp_vox != 0) {
    ArrayXX<double> white(n, 3);
    for (Index i = 0; i < n; ++i)
      for (Index a = 0; a < 3; ++a) white(i, a) = gauss(rng);
    out.v.v = greens.half_inverse(white);
    if (cfg.window) {
      for (Index z = 0; z < d[2]; ++z)
        for (Index y = 0; y < d[1]; ++y)
          for (Index x = 0; x < d[0]; ++x) {
            auto taper = [](Index i, Index m) {
              double s = std::sin(M_PI * (double(i) + 0.5) / double(m));
              return s * s;
            };
            out.v.v.row(flat(d, x, y, z)) *=
                taper(x, d[0]) * taper(y, d[1]) * taper(z, d[2]);
          }
    }
    if (cfg.max_disp_vox > 0) {
      const double peak = out.v.v.abs().maxCoeff();
      if (peak > 0) out.v.v *= cfg.max_disp_vox / peak;
    }
  }
  out.shot = shoot(out.v, cfg.shoot_steps, &greens);

  for (int a = 0; a < 3; ++a) {
    if (cfg.q_sigma_t > 0) out.q[a] = cfg.q_sigma_t * gauss(rng);
    if (cfg.q_sigma_r > 0) out.q[3 + a] = cfg.q_sigma_r * gauss(rng);
  }

  SubjectState st;
  st.q = out.q;
  st.shot = out.shot;
  SubjectInput self;
  self.image.dims = d;
  self.image.vox2world = tmpl.vox2world;
  Deformation<double> psi = subject_warp(self, st, tmpl);
  ArrayXX<double> prob =
      log_softmax_implicit(pull(tmpl.logits, tmpl.dims, psi.map, Boundary::Clamp)).exp();

  out.log_bias = ArrayXX<double>::Zero(n, c);
  if (cfg.bias_amp > 0 && cfg.bias_cutoff_mm > 0) {
    BiasBasis basis = make_bias_basis(d, tmpl.vox_mm(), cfg.bias_cutoff_mm);
    if (basis.count() > 0) {
      Eigen::MatrixXd phi = bias_design(basis);
      BiasField f;
      f.coef.resize(basis.count(), c);
      for (Index j = 0; j < basis.count(); ++j)
        for (Index ch = 0; ch < c; ++ch) f.coef(j, ch) = gauss(rng);
      out.log_bias = bias_log_field(phi, f);
      const double peak = out.log_bias.abs().maxCoeff();
      if (peak > 0) out.log_bias *= cfg.bias_amp / peak;
    }
  }

  std::vector<Eigen::MatrixXd> chol(kk);
  for (Index k = 0; k < kk; ++k) {
    Eigen::MatrixXd cov = (gw.nu[k] * gw.W[k]).inverse();
    chol[k] = Eigen::LLT<Eigen::MatrixXd>(cov).matrixL();
  }

  out.labels.resize(n);
  ArrayXX<double> data(n, c);
  for (Index i = 0; i < n; ++i) {
    const double u = unif(rng);
    Index z = kk - 1;
    double acc = 0;
    for (Index k = 0; k < kk; ++k) {
      acc += prob(i, k);
      if (u < acc) {
        z = k;
        break;
      }
    }
    out.labels[i] = (z == kk - 1) ? 0 : int(z + 1);
    Eigen::VectorXd y = gw.m.col(z);
    if (cfg.noise_scale > 0) {
      Eigen::VectorXd xi(c);
      for (Index ch = 0; ch < c; ++ch) xi[ch] = gauss(rng);
      y += cfg.noise_scale * (chol[z] * xi);
    }
    for (Index ch = 0; ch < c; ++ch) data(i, ch) = y[ch] * std::exp(-out.log_bias(i, ch));
  }

  out.image.dims = d;
  out.image.vox2world = tmpl.vox2world;
  out.image.data = std::move(data);
  return out;
}

}  // namespace gw
