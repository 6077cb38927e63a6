#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <stdexcept>

#include "groupwarp/fft.hpp"
#include "groupwarp/volume.hpp"

namespace gw {

/// Coefficients of the quadratic field energy
///   E(f) = 1/2 <f, L f>,
/// a weighted sum of absolute displacement, membrane, bending and (for
/// 3-vector fields) linear-elastic divergence / symmetrised-Jacobian terms,
/// discretised with periodic boundaries and scaled by the voxel volume.
struct EnergySpec {
  double absolute = 0;
  double membrane = 0;
  double bending = 0;
  double elastic_div = 0;
  double elastic_sym = 0;

  bool any() const {
    return absolute != 0 || membrane != 0 || bending != 0 || coupled();
  }
  bool coupled() const { return elastic_div != 0 || elastic_sym != 0; }

  void check() const {
    for (double c : {absolute, membrane, bending, elastic_div, elastic_sym})
      if (!(c >= 0) || !std::isfinite(c))
        throw std::invalid_argument("EnergySpec: coefficients must be finite and >= 0");
  }
};

/// 7-point negated Laplacian, periodic: sum_d (2 f_i - f_i+e - f_i-e) / h_d^2.
template <typename Scalar>
ArrayX<Scalar> laplacian7(const ArrayX<Scalar>& f, const Dims& d, const Eigen::Vector3d& h) {
  ArrayX<Scalar> out(f.size());
  const Index nx = d[0], ny = d[1], nz = d[2];
  const Scalar ix2 = Scalar(1.0 / (h[0] * h[0]));
  const Scalar iy2 = Scalar(1.0 / (h[1] * h[1]));
  const Scalar iz2 = Scalar(1.0 / (h[2] * h[2]));
  Index i = 0;
  for (Index z = 0; z < nz; ++z) {
    const Index zm = (z == 0 ? nz - 1 : z - 1) * nx * ny, zp = (z == nz - 1 ? 0 : z + 1) * nx * ny;
    const Index z0 = z * nx * ny;
    for (Index y = 0; y < ny; ++y) {
      const Index ym = (y == 0 ? ny - 1 : y - 1) * nx, yp = (y == ny - 1 ? 0 : y + 1) * nx;
      const Index y0 = y * nx;
      for (Index x = 0; x < nx; ++x, ++i) {
        const Index xm = x == 0 ? nx - 1 : x - 1, xp = x == nx - 1 ? 0 : x + 1;
        out[i] = ix2 * (2 * f[i] - f[xm + y0 + z0] - f[xp + y0 + z0]) +
                 iy2 * (2 * f[i] - f[x + ym + z0] - f[x + yp + z0]) +
                 iz2 * (2 * f[i] - f[x + y0 + zm] - f[x + y0 + zp]);
      }
    }
  }
  return out;
}

/// Central first difference along `axis`, periodic: (f_+1 - f_-1) / (2 h).
template <typename Scalar>
ArrayX<Scalar> central_diff(const ArrayX<Scalar>& f, const Dims& d, int axis, double h) {
  ArrayX<Scalar> out(f.size());
  const Index nx = d[0], ny = d[1], nz = d[2];
  const Scalar s = Scalar(1.0 / (2.0 * h));
  Index i = 0;
  for (Index z = 0; z < nz; ++z)
    for (Index y = 0; y < ny; ++y)
      for (Index x = 0; x < nx; ++x, ++i) {
        Index xp = x, xm = x, yp = y, ym = y, zp = z, zm = z;
        if (axis == 0) { xp = x == nx - 1 ? 0 : x + 1; xm = x == 0 ? nx - 1 : x - 1; }
        else if (axis == 1) { yp = y == ny - 1 ? 0 : y + 1; ym = y == 0 ? ny - 1 : y - 1; }
        else { zp = z == nz - 1 ? 0 : z + 1; zm = z == 0 ? nz - 1 : z - 1; }
        out[i] = s * (f[flat(d, xp, yp, zp)] - f[flat(d, xm, ym, zm)]);
      }
  return out;
}

/// L f for the energy above. Multi-channel input is treated channel-wise for
/// the decoupled terms; elastic terms require exactly 3 channels.
template <typename Scalar>
ArrayXX<Scalar> operator_apply(const ArrayXX<Scalar>& f, const Dims& d, const EnergySpec& s,
                               const Eigen::Vector3d& vox_mm) {
  s.check();
  if (f.rows() != nvox(d))
    throw std::invalid_argument("operator_apply: field rows mismatch lattice " + dims_str(d));
  if (s.coupled() && f.cols() != 3)
    throw std::invalid_argument("operator_apply: elastic terms need a 3-channel field");
  if ((vox_mm.array() <= 0).any())
    throw std::invalid_argument("operator_apply: voxel sizes must be positive");
  const Scalar dx = Scalar(vox_mm.prod());
  ArrayXX<Scalar> out = ArrayXX<Scalar>::Zero(f.rows(), f.cols());
  for (Index c = 0; c < f.cols(); ++c) {
    ArrayX<Scalar> col = f.col(c);
    ArrayX<Scalar> acc = ArrayX<Scalar>::Zero(f.rows());
    if (s.absolute != 0) acc += Scalar(s.absolute) * col;
    if (s.membrane != 0 || s.bending != 0) {
      ArrayX<Scalar> lap = laplacian7(col, d, vox_mm);
      if (s.membrane != 0) acc += Scalar(s.membrane) * lap;
      if (s.bending != 0) acc += Scalar(s.bending) * laplacian7(lap, d, vox_mm);
    }
    out.col(c) = acc;
  }
  if (s.coupled()) {
    ArrayX<Scalar> div = ArrayX<Scalar>::Zero(f.rows());
    for (int a = 0; a < 3; ++a) div += central_diff<Scalar>(f.col(a), d, a, vox_mm[a]);
    const Scalar cdiv = Scalar(s.elastic_div + 0.5 * s.elastic_sym);
    const Scalar csym = Scalar(0.5 * s.elastic_sym);
    for (int a = 0; a < 3; ++a) {
      out.col(a) -= cdiv * central_diff(div, d, a, vox_mm[a]);
      if (csym != Scalar(0)) {
        ArrayX<Scalar> col = f.col(a);
        for (int b = 0; b < 3; ++b)
          out.col(a) -= csym * central_diff(central_diff(col, d, b, vox_mm[b]), d, b, vox_mm[b]);
      }
    }
  }
  return out * dx;
}

template <typename Scalar>
Scalar energy(const ArrayXX<Scalar>& f, const Dims& d, const EnergySpec& s,
              const Eigen::Vector3d& vox_mm) {
  return Scalar(0.5) * (f * operator_apply(f, d, s, vox_mm)).sum();
}

/// Spectral inverse of operator_apply on a periodic lattice. The operator is
/// circulant, so its symbol comes from the DFT of impulse responses; each
/// frequency is a real symmetric channels x channels matrix, inverted once at
/// construction. Frequencies the operator annihilates are projected out on
/// solve; a right-hand side with mass there is rejected.
class GreensSolver {
 public:
  GreensSolver(const Dims& d, Index channels, const EnergySpec& s, const Eigen::Vector3d& vox_mm)
      : dims_(d), ch_(channels), fft_(d) {
    s.check();
    if (channels != 1 && channels != 3)
      throw std::invalid_argument("GreensSolver: channels must be 1 or 3");
    if (!s.any())
      throw std::invalid_argument("GreensSolver: null operator has no inverse");
    const Index n = nvox(d);
    const Index pk = packed_size();
    ArrayXX<double> sym(n, pk);
    for (Index b = 0; b < ch_; ++b) {
      ArrayXX<double> e = ArrayXX<double>::Zero(n, ch_);
      e(0, b) = 1.0;
      ArrayXX<double> k = operator_apply(e, d, s, vox_mm);
      for (Index a = b; a < ch_; ++a) {
        Fft3<double>::Buf buf(n);
        for (Index i = 0; i < n; ++i) buf[i] = k(i, a);
        fft_.forward(buf);
        for (Index i = 0; i < n; ++i) sym(i, packed(a, b)) = buf[i].real();
      }
    }
    sym_ = sym;
    inv_.resize(n, pk);
    null_ = Mask::Constant(n, false);
    double scale = sym.abs().maxCoeff();
    const double tol = 1e-9 * (scale > 0 ? scale : 1.0);
    if (ch_ == 1) {
      for (Index i = 0; i < n; ++i) {
        if (std::abs(sym(i, 0)) <= tol) {
          null_[i] = true;
          inv_(i, 0) = 0;
        } else {
          inv_(i, 0) = 1.0 / sym(i, 0);
        }
      }
    } else {
      for (Index i = 0; i < n; ++i) {
        Eigen::Matrix3d m = unpack(sym, i);
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(m);
        if (es.eigenvalues().minCoeff() <= tol) {
          null_[i] = true;
          for (Index j = 0; j < pk; ++j) inv_(i, j) = 0;
        } else {
          pack(inv_, i, m.inverse());
        }
      }
    }
  }

  const Dims& dims() const { return dims_; }
  Index channels() const { return ch_; }
  bool has_null_space() const { return null_.any(); }

  /// L^-1 g. Throws if g has spectral mass on an annihilated frequency.
  ArrayXX<double> solve(const ArrayXX<double>& g) const {
    auto spectra = transform(g);
    const Index n = nvox(dims_);
    double gmax = 0;
    for (const auto& s : spectra) gmax = std::max(gmax, s.cwiseAbs().maxCoeff());
    const double tol = 1e-8 * (gmax > 0 ? gmax : 1.0);
    if (null_.any())
      for (Index i = 0; i < n; ++i)
        if (null_[i])
          for (Index c = 0; c < ch_; ++c)
            if (std::abs(spectra[c][i]) > tol)
              throw std::domain_error("GreensSolver: right-hand side has mass in the operator null space");
    apply_packed(spectra, inv_);
    return back_transform(spectra, g.rows());
  }

  /// L^-1/2 w, used to draw from the Gaussian the energy defines. Null-space
  /// frequencies are projected out instead of diverging.
  ArrayXX<double> half_inverse(const ArrayXX<double>& w) const {
    auto spectra = transform(w);
    const Index n = nvox(dims_);
    ArrayXX<double> half(n, packed_size());
    if (ch_ == 1) {
      for (Index i = 0; i < n; ++i) half(i, 0) = null_[i] ? 0.0 : 1.0 / std::sqrt(sym_(i, 0));
    } else {
      for (Index i = 0; i < n; ++i) {
        if (null_[i]) {
          for (Index j = 0; j < packed_size(); ++j) half(i, j) = 0;
          continue;
        }
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(unpack(sym_, i));
        Eigen::Matrix3d m = es.eigenvectors() *
                            es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                            es.eigenvectors().transpose();
        pack(half, i, m);
      }
    }
    apply_packed(spectra, half);
    return back_transform(spectra, w.rows());
  }

 private:
  Index packed_size() const { return ch_ == 1 ? 1 : 6; }
  Index packed(Index r, Index c) const {  // lower triangle, column-major
    if (r < c) std::swap(r, c);
    return r + c * (5 - c) / 2;  // (0,0),(1,0),(2,0),(1,1),(2,1),(2,2)
  }
  Eigen::Matrix3d unpack(const ArrayXX<double>& p, Index i) const {
    Eigen::Matrix3d m;
    for (Index r = 0; r < 3; ++r)
      for (Index c = 0; c < 3; ++c) m(r, c) = p(i, packed(r, c));
    return m;
  }
  void pack(ArrayXX<double>& p, Index i, const Eigen::Matrix3d& m) const {
    for (Index r = 0; r < 3; ++r)
      for (Index c = 0; c <= r; ++c) p(i, packed(r, c)) = m(r, c);
  }

  std::vector<Fft3<double>::Buf> transform(const ArrayXX<double>& g) const {
    if (g.rows() != nvox(dims_) || g.cols() != ch_)
      throw std::invalid_argument("GreensSolver: field shape mismatch");
    std::vector<Fft3<double>::Buf> spectra(ch_);
    for (Index c = 0; c < ch_; ++c) {
      spectra[c].resize(g.rows());
      for (Index i = 0; i < g.rows(); ++i) spectra[c][i] = g(i, c);
      fft_.forward(spectra[c]);
    }
    return spectra;
  }

  void apply_packed(std::vector<Fft3<double>::Buf>& spectra, const ArrayXX<double>& p) const {
    const Index n = nvox(dims_);
    if (ch_ == 1) {
      for (Index i = 0; i < n; ++i) spectra[0][i] *= p(i, 0);
    } else {
      for (Index i = 0; i < n; ++i) {
        Eigen::Vector3cd v(spectra[0][i], spectra[1][i], spectra[2][i]);
        Eigen::Vector3cd r = unpack(p, i) * v;
        spectra[0][i] = r[0];
        spectra[1][i] = r[1];
        spectra[2][i] = r[2];
      }
    }
  }

  ArrayXX<double> back_transform(std::vector<Fft3<double>::Buf>& spectra, Index rows) const {
    ArrayXX<double> out(rows, ch_);
    for (Index c = 0; c < ch_; ++c) {
      fft_.inverse(spectra[c]);
      for (Index i = 0; i < rows; ++i) out(i, c) = spectra[c][i].real();
    }
    return out;
  }

  Dims dims_;
  Index ch_;
  Fft3<double> fft_;
  ArrayXX<double> sym_, inv_;
  Mask null_;
};

}  // namespace gw
