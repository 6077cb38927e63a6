#pragma once

#include <Eigen/Dense>

#include <stdexcept>

#include "groupwarp/volume.hpp"

namespace gw {

inline void check_affine(const Eigen::Matrix4d& m, const char* name) {
  if (!m.allFinite())
    throw std::invalid_argument(std::string(name) + ": non-finite affine");
  if ((m.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).norm() > 1e-9)
    throw std::invalid_argument(std::string(name) + ": last row is not (0,0,0,1)");
  if (std::abs(m.topLeftCorner<3, 3>().determinant()) < 1e-12)
    throw std::invalid_argument(std::string(name) + ": singular linear part");
}

/// Composite voxel-to-voxel affine out of three homogeneous factors,
/// validated so a silently degenerate chain cannot propagate.
inline Eigen::Matrix4d affine_chain(const Eigen::Matrix4d& a, const Eigen::Matrix4d& b,
                                    const Eigen::Matrix4d& c) {
  check_affine(a, "affine_chain a");
  check_affine(b, "affine_chain b");
  check_affine(c, "affine_chain c");
  return a * b * c;
}

inline Eigen::Vector3d apply_affine(const Eigen::Matrix4d& m, const Eigen::Vector3d& p) {
  return m.topLeftCorner<3, 3>() * p + m.topRightCorner<3, 1>();
}

/// Voxel sizes in mm, column norms of the linear part.
inline Eigen::Vector3d voxel_sizes(const Eigen::Matrix4d& vox2world) {
  Eigen::Vector3d h;
  for (int a = 0; a < 3; ++a) h[a] = vox2world.block<3, 1>(0, a).norm();
  return h;
}

/// Axis-aligned voxel-to-world affine whose lattice is centred on `centre`.
inline Eigen::Matrix4d centered_affine(const Dims& dims, const Eigen::Vector3d& vox_mm,
                                       const Eigen::Vector3d& centre) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  for (int a = 0; a < 3; ++a) {
    m(a, a) = vox_mm[a];
    m(a, 3) = centre[a] - vox_mm[a] * 0.5 * double(dims[a] - 1);
  }
  return m;
}

/// Deformation whose map is an affine applied to every voxel of `grid`.
template <typename Scalar = double>
Deformation<Scalar> affine_deformation(const Eigen::Matrix4d& m, const Dims& grid) {
  check_affine(m, "affine_deformation");
  Deformation<Scalar> d{grid, identity_map<Scalar>(grid)};
  Eigen::Matrix<Scalar, 3, 3> lin = m.topLeftCorner<3, 3>().template cast<Scalar>();
  Eigen::Matrix<Scalar, 3, 1> off = m.topRightCorner<3, 1>().template cast<Scalar>();
  d.map.matrix() = (d.map.matrix() * lin.transpose()).rowwise() + off.transpose();
  return d;
}

}  // namespace gw
