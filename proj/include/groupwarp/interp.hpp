#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

#include "groupwarp/volume.hpp"

namespace gw {

enum class Boundary { Clamp, Zero };

namespace detail {

// One trilinear cell: corner indices, weights and weight derivatives along
// each axis. Clamp saturates coordinates (derivative 0 outside the lattice),
// Zero keeps fractional weights and marks out-of-range corners invalid.
template <typename Scalar>
struct Cell {
  Index lo[3], hi[3];
  Scalar w_lo[3], w_hi[3];
  Scalar d_lo[3], d_hi[3];
  bool lo_ok[3], hi_ok[3];
};

template <typename Scalar>
inline void make_cell(const Dims& n, const Scalar* c, Boundary b, Cell<Scalar>& cell) {
  for (int a = 0; a < 3; ++a) {
    const Scalar top = Scalar(n[a] - 1);
    if (b == Boundary::Clamp) {
      Scalar cc = c[a] < Scalar(0) ? Scalar(0) : (c[a] > top ? top : c[a]);
      Scalar fl = std::floor(cc);
      Index i0 = Index(fl);
      cell.lo[a] = i0;
      cell.hi[a] = i0 + 1 > n[a] - 1 ? n[a] - 1 : i0 + 1;
      Scalar f = cc - fl;
      cell.w_lo[a] = Scalar(1) - f;
      cell.w_hi[a] = f;
      bool interior = c[a] > Scalar(0) && c[a] < top;
      cell.d_lo[a] = interior ? Scalar(-1) : Scalar(0);
      cell.d_hi[a] = interior ? Scalar(1) : Scalar(0);
      cell.lo_ok[a] = cell.hi_ok[a] = true;
    } else {
      Scalar fl = std::floor(c[a]);
      Scalar f = c[a] - fl;
      cell.lo_ok[a] = fl >= Scalar(0) && fl <= top;
      cell.hi_ok[a] = fl >= Scalar(-1) && fl <= top - Scalar(1);
      cell.lo[a] = cell.lo_ok[a] ? Index(fl) : 0;
      cell.hi[a] = cell.hi_ok[a] ? Index(fl) + 1 : 0;
      cell.w_lo[a] = Scalar(1) - f;
      cell.w_hi[a] = f;
      cell.d_lo[a] = Scalar(-1);
      cell.d_hi[a] = Scalar(1);
    }
  }
}

template <typename Scalar>
struct Corner {
  Index idx;
  Scalar w, dx, dy, dz;
};

// Expands a cell into its valid corners; weight derivatives use the product
// rule so pull_with_grad is the exact derivative of pull.
template <typename Scalar>
inline int corners(const Dims& n, const Cell<Scalar>& cell, Corner<Scalar>* out) {
  int m = 0;
  for (int bz = 0; bz < 2; ++bz) {
    if (!(bz ? cell.hi_ok[2] : cell.lo_ok[2])) continue;
    const Index z = bz ? cell.hi[2] : cell.lo[2];
    const Scalar wz = bz ? cell.w_hi[2] : cell.w_lo[2];
    const Scalar dz = bz ? cell.d_hi[2] : cell.d_lo[2];
    for (int by = 0; by < 2; ++by) {
      if (!(by ? cell.hi_ok[1] : cell.lo_ok[1])) continue;
      const Index y = by ? cell.hi[1] : cell.lo[1];
      const Scalar wy = by ? cell.w_hi[1] : cell.w_lo[1];
      const Scalar dy = by ? cell.d_hi[1] : cell.d_lo[1];
      for (int bx = 0; bx < 2; ++bx) {
        if (!(bx ? cell.hi_ok[0] : cell.lo_ok[0])) continue;
        const Index x = bx ? cell.hi[0] : cell.lo[0];
        const Scalar wx = bx ? cell.w_hi[0] : cell.w_lo[0];
        const Scalar dx = bx ? cell.d_hi[0] : cell.d_lo[0];
        out[m++] = Corner<Scalar>{flat(n, x, y, z), wx * wy * wz, dx * wy * wz,
                                  wx * dy * wz, wx * wy * dz};
      }
    }
  }
  return m;
}

template <typename Scalar>
inline void check_map(const ArrayX3<Scalar>& map) {
  if (!map.allFinite())
    throw std::invalid_argument("deformation map has non-finite coordinates");
}

}  // namespace detail

/// Trilinear sampling of `src` (on lattice `src_dims`) at the coordinates in
/// `map`. NaN in source data propagates through any corner that carries
/// weight; geometry alone never produces NaN.
template <typename Scalar>
ArrayXX<Scalar> pull(const ArrayXX<Scalar>& src, const Dims& src_dims,
                     const ArrayX3<Scalar>& map, Boundary b) {
  detail::check_map(map);
  if (src.rows() != nvox(src_dims))
    throw std::invalid_argument("pull: source rows mismatch lattice " + dims_str(src_dims));
  const Index n = map.rows(), C = src.cols();
  ArrayXX<Scalar> out = ArrayXX<Scalar>::Zero(n, C);
  detail::Cell<Scalar> cell;
  detail::Corner<Scalar> cs[8];
  for (Index i = 0; i < n; ++i) {
    const Scalar c[3] = {map(i, 0), map(i, 1), map(i, 2)};
    detail::make_cell(src_dims, c, b, cell);
    const int m = detail::corners(src_dims, cell, cs);
    for (Index ch = 0; ch < C; ++ch) {
      const Scalar* col = src.col(ch).data();
      Scalar v = 0;
      for (int j = 0; j < m; ++j)
        if (cs[j].w != Scalar(0)) v += cs[j].w * col[cs[j].idx];
      out(i, ch) = v;
    }
  }
  return out;
}

/// Exact adjoint of pull with the same boundary rule: splats `src` (living on
/// the map's grid) onto a lattice of size `out_dims`.
/// <pull(a, d), b> == <a, push(b, d)> for every a, b.
template <typename Scalar>
ArrayXX<Scalar> push(const ArrayXX<Scalar>& src, const Dims& out_dims,
                     const ArrayX3<Scalar>& map, Boundary b) {
  detail::check_map(map);
  if (src.rows() != map.rows())
    throw std::invalid_argument("push: source rows mismatch map rows");
  const Index n = map.rows(), C = src.cols();
  ArrayXX<Scalar> out = ArrayXX<Scalar>::Zero(nvox(out_dims), C);
  detail::Cell<Scalar> cell;
  detail::Corner<Scalar> cs[8];
  for (Index i = 0; i < n; ++i) {
    const Scalar c[3] = {map(i, 0), map(i, 1), map(i, 2)};
    detail::make_cell(out_dims, c, b, cell);
    const int m = detail::corners(out_dims, cell, cs);
    for (Index ch = 0; ch < C; ++ch) {
      Scalar* col = out.col(ch).data();
      const Scalar v = src(i, ch);
      for (int j = 0; j < m; ++j)
        if (cs[j].w != Scalar(0)) col[cs[j].idx] += cs[j].w * v;
    }
  }
  return out;
}

/// Sampled values plus the interpolant's own derivative with respect to the
/// sampling coordinates; grad column 3*ch + axis holds d val_ch / d coord_axis.
/// Along a clamped axis the derivative is zero, matching the saturation.
template <typename Scalar>
void pull_with_grad(const ArrayXX<Scalar>& src, const Dims& src_dims,
                    const ArrayX3<Scalar>& map, Boundary b, ArrayXX<Scalar>& val,
                    ArrayXX<Scalar>& grad) {
  detail::check_map(map);
  if (src.rows() != nvox(src_dims))
    throw std::invalid_argument("pull_with_grad: source rows mismatch lattice " + dims_str(src_dims));
  const Index n = map.rows(), C = src.cols();
  val.setZero(n, C);
  grad.setZero(n, 3 * C);
  detail::Cell<Scalar> cell;
  detail::Corner<Scalar> cs[8];
  for (Index i = 0; i < n; ++i) {
    const Scalar c[3] = {map(i, 0), map(i, 1), map(i, 2)};
    detail::make_cell(src_dims, c, b, cell);
    const int m = detail::corners(src_dims, cell, cs);
    for (Index ch = 0; ch < C; ++ch) {
      const Scalar* col = src.col(ch).data();
      Scalar v = 0, gx = 0, gy = 0, gz = 0;
      for (int j = 0; j < m; ++j) {
        const Scalar s = col[cs[j].idx];
        if (cs[j].w != Scalar(0)) v += cs[j].w * s;
        if (cs[j].dx != Scalar(0)) gx += cs[j].dx * s;
        if (cs[j].dy != Scalar(0)) gy += cs[j].dy * s;
        if (cs[j].dz != Scalar(0)) gz += cs[j].dz * s;
      }
      val(i, ch) = v;
      grad(i, 3 * ch + 0) = gx;
      grad(i, 3 * ch + 1) = gy;
      grad(i, 3 * ch + 2) = gz;
    }
  }
}

template <typename Scalar>
Volume<Scalar> pull(const Volume<Scalar>& src, const Deformation<Scalar>& d, Boundary b) {
  src.check();
  d.check();
  Volume<Scalar> out;
  out.dims = d.grid;
  out.data = pull(src.data, src.dims, d.map, b);
  return out;
}

template <typename Scalar>
Volume<Scalar> push(const Volume<Scalar>& src, const Deformation<Scalar>& d,
                    const Dims& out_dims, Boundary b) {
  src.check();
  d.check();
  if (!same_dims(src.dims, d.grid))
    throw std::invalid_argument("push: source lives on " + dims_str(src.dims) +
                                ", map on " + dims_str(d.grid));
  Volume<Scalar> out;
  out.dims = out_dims;
  out.data = push(src.data, out_dims, d.map, b);
  return out;
}

}  // namespace gw
