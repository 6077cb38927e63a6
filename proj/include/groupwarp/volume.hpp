#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace gw {

using Index = Eigen::Index;

/// Lattice extents, voxel index = x + nx*(y + ny*z) with x fastest.
using Dims = std::array<Index, 3>;

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using ArrayXX = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using ArrayX3 = Eigen::Array<Scalar, Eigen::Dynamic, 3>;
using Mask = Eigen::Array<bool, Eigen::Dynamic, 1>;

inline Index nvox(const Dims& d) { return d[0] * d[1] * d[2]; }

inline Index flat(const Dims& d, Index x, Index y, Index z) {
  return x + d[0] * (y + d[1] * z);
}

inline bool same_dims(const Dims& a, const Dims& b) {
  return a[0] == b[0] && a[1] == b[1] && a[2] == b[2];
}

inline std::string dims_str(const Dims& d) {
  return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]);
}

/// Voxel lattice with a voxel-to-world affine and per-voxel channel data.
/// data is nvox x channels; non-finite entries mark missing samples.
template <typename Scalar>
struct Volume {
  Dims dims{0, 0, 0};
  Eigen::Matrix4d vox2world = Eigen::Matrix4d::Identity();
  ArrayXX<Scalar> data;

  Volume() = default;
  Volume(const Dims& d, Index channels, Scalar fill = Scalar(0),
         const Eigen::Matrix4d& m = Eigen::Matrix4d::Identity())
      : dims(d), vox2world(m),
        data(ArrayXX<Scalar>::Constant(nvox(d), channels, fill)) {}

  Index channels() const { return data.cols(); }
  Index size() const { return data.rows(); }

  Scalar& at(Index x, Index y, Index z, Index c = 0) {
    return data(flat(dims, x, y, z), c);
  }
  Scalar at(Index x, Index y, Index z, Index c = 0) const {
    return data(flat(dims, x, y, z), c);
  }

  void check() const {
    if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
      throw std::invalid_argument("Volume: non-positive dims " + dims_str(dims));
    if (data.rows() != nvox(dims))
      throw std::invalid_argument("Volume: data rows " + std::to_string(data.rows()) +
                                  " != voxel count " + std::to_string(nvox(dims)));
    if (std::abs(vox2world.topLeftCorner<3, 3>().determinant()) < 1e-12)
      throw std::invalid_argument("Volume: vox2world is singular");
  }
};

/// Per-voxel mask of usable samples: finite in every channel.
template <typename Scalar>
Mask finite_mask(const Volume<Scalar>& v) {
  return v.data.isFinite().rowwise().all();
}

/// Dense map from a lattice to absolute coordinates (voxel units) of a
/// target lattice. Stored as target coordinates, not displacements, so maps
/// compose across lattices of different size without ambiguity.
template <typename Scalar = double>
struct Deformation {
  Dims grid{0, 0, 0};
  ArrayX3<Scalar> map;

  Index size() const { return map.rows(); }

  void check() const {
    if (map.rows() != nvox(grid))
      throw std::invalid_argument("Deformation: map rows " + std::to_string(map.rows()) +
                                  " != voxel count of grid " + dims_str(grid));
  }
};

template <typename Scalar = double>
ArrayX3<Scalar> identity_map(const Dims& d) {
  ArrayX3<Scalar> m(nvox(d), 3);
  Index i = 0;
  for (Index z = 0; z < d[2]; ++z)
    for (Index y = 0; y < d[1]; ++y)
      for (Index x = 0; x < d[0]; ++x, ++i) {
        m(i, 0) = Scalar(x);
        m(i, 1) = Scalar(y);
        m(i, 2) = Scalar(z);
      }
  return m;
}

template <typename Scalar = double>
Deformation<Scalar> identity_deformation(const Dims& d) {
  return Deformation<Scalar>{d, identity_map<Scalar>(d)};
}

/// K stored tissue probabilities per voxel; one further implicit class
/// carries the remaining mass 1 - rowsum.
template <typename Scalar>
struct ProbVolume {
  Dims dims{0, 0, 0};
  ArrayXX<Scalar> probs;  // nvox x K

  Index stored_classes() const { return probs.cols(); }
  ArrayX<Scalar> background() const { return Scalar(1) - probs.rowwise().sum(); }
};

}  // namespace gw
