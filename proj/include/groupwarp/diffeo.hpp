#pragma once

#include <memory>
#include <stdexcept>
#include <string>

#include "groupwarp/energy.hpp"
#include "groupwarp/interp.hpp"

namespace gw {

/// Initial velocity of a geodesic, on the template lattice in voxel units.
/// metric is the prior precision that also defines the kinetic energy.
struct VelocityField {
  Dims grid{0, 0, 0};
  Eigen::Vector3d vox_mm = Eigen::Vector3d::Ones();
  EnergySpec metric;
  ArrayX3<double> v;

  void check() const {
    if (v.rows() != nvox(grid))
      throw std::invalid_argument("VelocityField: rows mismatch grid " + dims_str(grid));
    if (!v.allFinite()) throw std::invalid_argument("VelocityField: non-finite values");
  }
};

/// (a o b)(x) = a(b(x)), sampling a's displacement at b's coordinates so that
/// composition with the identity is exact on either side.
inline Deformation<> compose(const Deformation<>& a, const Deformation<>& b) {
  a.check();
  b.check();
  ArrayX3<double> disp = a.map - identity_map<double>(a.grid);
  Deformation<> out{b.grid, ArrayX3<double>(b.map)};
  out.map += pull<double>(disp, a.grid, b.map, Boundary::Clamp);
  return out;
}

/// Spatial derivative of the map, nvox x 9 with column 3*c + r = d map_r / d x_c.
/// Central differences inside, one-sided on the faces.
inline ArrayXX<double> jacobian(const Deformation<>& d) {
  d.check();
  const Dims& n = d.grid;
  ArrayXX<double> J(nvox(n), 9);
  Index i = 0;
  for (Index z = 0; z < n[2]; ++z)
    for (Index y = 0; y < n[1]; ++y)
      for (Index x = 0; x < n[0]; ++x, ++i) {
        const Index p[3] = {x, y, z};
        for (int c = 0; c < 3; ++c) {
          Index lo = p[c] > 0 ? p[c] - 1 : 0;
          Index hi = p[c] < n[c] - 1 ? p[c] + 1 : n[c] - 1;
          double scale = hi > lo ? 1.0 / double(hi - lo) : 1.0;
          Index ilo = i + (lo - p[c]) * (c == 0 ? 1 : c == 1 ? n[0] : n[0] * n[1]);
          Index ihi = i + (hi - p[c]) * (c == 0 ? 1 : c == 1 ? n[0] : n[0] * n[1]);
          for (int r = 0; r < 3; ++r) J(i, 3 * c + r) = scale * (d.map(ihi, r) - d.map(ilo, r));
        }
      }
  return J;
}

inline ArrayX<double> jacobian_det(const ArrayXX<double>& J) {
  if (J.cols() != 9) throw std::invalid_argument("jacobian_det: expected nvox x 9");
  // det of [ J(:,3c+r) ]_rc
  return J.col(0) * (J.col(4) * J.col(8) - J.col(7) * J.col(5)) -
         J.col(3) * (J.col(1) * J.col(8) - J.col(7) * J.col(2)) +
         J.col(6) * (J.col(1) * J.col(5) - J.col(4) * J.col(2));
}

inline ArrayX<double> jacobian_det(const Deformation<>& d) { return jacobian_det(jacobian(d)); }

struct ShootResult {
  Deformation<> phi;      // forward endpoint, carries template content outward
  Deformation<> phi_inv;  // its inverse, samples the template
  ArrayX3<double> v_end;  // endpoint velocity (diagnostic: energy conservation)
};

/// Geodesic shooting by momentum conservation: u0 = L v0 is advected through
/// the running inverse transform, v_t = L^-1 u_t, and both endpoint maps are
/// accumulated from small Euler steps. With steps=1, phi = id + v0 exactly.
inline ShootResult shoot(const VelocityField& v0, int steps, const GreensSolver* greens = nullptr) {
  v0.check();
  if (steps < 1) throw std::invalid_argument("shoot: steps must be >= 1");
  if (!v0.metric.any()) throw std::invalid_argument("shoot: velocity metric is null");

  std::unique_ptr<GreensSolver> own;
  if (!greens) {
    own = std::make_unique<GreensSolver>(v0.grid, 3, v0.metric, v0.vox_mm);
    greens = own.get();
  }
  if (!same_dims(greens->dims(), v0.grid) || greens->channels() != 3)
    throw std::invalid_argument("shoot: Green's solver does not match the velocity lattice");
  if (greens->has_null_space())
    throw std::invalid_argument("shoot: velocity metric is not invertible");

  const Dims& n = v0.grid;
  const ArrayX3<double> id = identity_map<double>(n);
  const double dt = 1.0 / steps;

  ShootResult r;
  r.phi = Deformation<>{n, id};
  r.phi_inv = Deformation<>{n, id};
  ArrayXX<double> u0 = operator_apply<double>(v0.v, n, v0.metric, v0.vox_mm);
  ArrayX3<double> vt = v0.v;

  for (int s = 0; s < steps; ++s) {
    Deformation<> fwd{n, id + dt * vt};
    Deformation<> bwd{n, id - dt * vt};
    r.phi = compose(fwd, r.phi);
    r.phi_inv = compose(r.phi_inv, bwd);

    ArrayXX<double> J = jacobian(r.phi_inv);
    ArrayX<double> det = jacobian_det(J);
    if (!det.allFinite() || (det <= 0.0).any())
      throw std::runtime_error("shoot: non-positive Jacobian at step " + std::to_string(s + 1) +
                               " of " + std::to_string(steps) + "; velocity too large for the step count");

    ArrayXX<double> up = pull<double>(u0, n, r.phi_inv.map, Boundary::Clamp);
    ArrayXX<double> ut(up.rows(), 3);
    for (int a = 0; a < 3; ++a)
      ut.col(a) = det * (J.col(3 * a + 0) * up.col(0) + J.col(3 * a + 1) * up.col(1) +
                         J.col(3 * a + 2) * up.col(2));
    if (!ut.allFinite()) throw std::runtime_error("shoot: non-finite momentum");
    vt = greens->solve(ut);
  }
  r.v_end = vt;
  return r;
}

}  // namespace gw
