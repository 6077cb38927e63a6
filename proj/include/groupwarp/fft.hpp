#pragma once

#include <unsupported/Eigen/FFT>

#include <complex>
#include <vector>

#include "groupwarp/volume.hpp"

namespace gw {

/// In-place 3D complex DFT over the voxel layout x + nx*(y + ny*z),
/// one 1D pass per axis. inverse() applies the full 1/nvox scaling.
template <typename Real>
class Fft3 {
 public:
  using Cplx = std::complex<Real>;
  using Buf = Eigen::Matrix<Cplx, Eigen::Dynamic, 1>;

  explicit Fft3(const Dims& d) : dims_(d) {}

  void forward(Buf& buf) const { run(buf, false); }
  void inverse(Buf& buf) const { run(buf, true); }

 private:
  void run(Buf& buf, bool inv) const {
    const Index nx = dims_[0], ny = dims_[1], nz = dims_[2];
    if (buf.size() != nvox(dims_))
      throw std::invalid_argument("Fft3: buffer size mismatch");
    std::vector<Cplx> line, spec;
    const Index len[3] = {nx, ny, nz};
    const Index stride[3] = {1, nx, nx * ny};
    for (int axis = 0; axis < 3; ++axis) {
      const Index n = len[axis];
      if (n == 1) continue;
      line.assign(n, Cplx(0));
      spec.assign(n, Cplx(0));
      for (Index outer = 0; outer < nvox(dims_) / n; ++outer) {
        Index start = line_start(axis, outer);
        for (Index j = 0; j < n; ++j) line[j] = buf[start + j * stride[axis]];
        if (inv)
          fft_.inv(spec.data(), line.data(), n);
        else
          fft_.fwd(spec.data(), line.data(), n);
        for (Index j = 0; j < n; ++j) buf[start + j * stride[axis]] = spec[j];
      }
    }
  }

  Index line_start(int axis, Index outer) const {
    const Index nx = dims_[0], ny = dims_[1];
    switch (axis) {
      case 0: return outer * nx;                          // outer = y + ny*z
      case 1: return outer % nx + (outer / nx) * nx * ny; // outer = x + nx*z
      default: return outer;                              // outer = x + nx*y
    }
  }

  Dims dims_;
  mutable Eigen::FFT<Real> fft_;
};

}  // namespace gw
