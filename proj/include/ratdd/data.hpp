// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

// Dataset loading (IDX, CSV), synthetic desk-scale tasks, ZCA whitening and
// PPM image grids.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ratdd/errors.hpp"
#include "ratdd/rng.hpp"
#include "ratdd/tensor.hpp"

namespace ratdd {

enum class SplitTag { train, test };

/// Inputs with integer class labels. Image inputs are [n, H, W, C].
struct DatasetSplit {
  Tensor inputs;
  std::vector<int> labels;
  std::size_t classes = 0;
  SplitTag split = SplitTag::train;

  std::size_t size() const { return labels.size(); }
  Shape input_shape() const {
    return Shape(inputs.shape().begin() + 1, inputs.shape().end());
  }

  void validate() const {
    if (inputs.rank() < 2 || inputs.dim(0) != labels.size())
      throw ContractError("dataset: " + std::to_string(labels.size()) +
                          " labels for inputs " + shape_str(inputs.shape()));
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= classes)
        throw ContractError("dataset: label " + std::to_string(y) +
                            " outside [0, " + std::to_string(classes) + ")");
    if (!inputs.all_finite()) throw ContractError("dataset: non-finite input");
  }
};

/// Rows `index` of a split.
inline DatasetSplit subset(const DatasetSplit& d,
                           const std::vector<std::size_t>& index) {
  DatasetSplit out;
  out.classes = d.classes;
  out.split = d.split;
  Shape s = d.inputs.shape();
  s[0] = index.size();
  const std::size_t stride = d.inputs.row_stride();
  std::vector<double> data;
  data.reserve(index.size() * stride);
  for (auto i : index) {
    if (i >= d.size()) throw ContractError("subset: index out of range");
    auto b = d.inputs.storage().begin() + static_cast<std::ptrdiff_t>(i * stride);
    data.insert(data.end(), b, b + static_cast<std::ptrdiff_t>(stride));
    out.labels.push_back(d.labels[i]);
  }
  out.inputs = Tensor(std::move(s), std::move(data));
  return out;
}

/// Indices of each class, in order of appearance.
inline std::vector<std::vector<std::size_t>> class_indices(
    const std::vector<int>& labels, std::size_t classes) {
  std::vector<std::vector<std::size_t>> idx(classes);
  for (std::size_t i = 0; i < labels.size(); ++i)
    idx.at(static_cast<std::size_t>(labels[i])).push_back(i);
  return idx;
}

/// A random class-balanced subset with `per_class` rows of each class.
inline std::vector<std::size_t> balanced_sample(const std::vector<int>& labels,
                                                std::size_t classes,
                                                std::size_t per_class,
                                                Rng& rng) {
  auto by_class = class_indices(labels, classes);
  std::vector<std::size_t> out;
  for (auto& rows : by_class) {
    if (rows.size() < per_class)
      throw ContractError("balanced_sample: class has only " +
                          std::to_string(rows.size()) + " rows, need " +
                          std::to_string(per_class));
    std::shuffle(rows.begin(), rows.end(), rng);
    out.insert(out.end(), rows.begin(),
               rows.begin() + static_cast<std::ptrdiff_t>(per_class));
  }
  return out;
}

// ---------------------------------------------------------------------------
// IDX

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b,
                               std::size_t off, const std::string& path) {
  if (off + 4 > b.size())
    throw FormatError(path + ": truncated header at byte " + std::to_string(off));
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<unsigned char> bytes;
};

inline IdxArray read_idx(const std::string& path, std::uint32_t magic) {
  auto b = read_file(path);
  const std::uint32_t m = read_be32(b, 0, path);
  if (m != magic) {
    std::ostringstream os;
    os << path << ": bad IDX magic 0x" << std::hex << m << " at byte 0";
    throw FormatError(os.str());
  }
  IdxArray a;
  const std::size_t rank = magic & 0xff;
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    a.dims.push_back(read_be32(b, 4 + 4 * i, path));
    count *= a.dims.back();
  }
  const std::size_t off = 4 + 4 * rank;
  if (b.size() != off + count)
    throw FormatError(path + ": expected " + std::to_string(off + count) +
                      " bytes, found " + std::to_string(b.size()) +
                      " (payload starts at byte " + std::to_string(off) + ")");
  a.bytes.assign(b.begin() + static_cast<std::ptrdiff_t>(off), b.end());
  return a;
}

inline void write_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Loads IDX u8 images (n, H, W) and labels (n). Pixels are scaled to [0, 1]
/// and returned as [n, H, W, 1].
inline DatasetSplit load_idx(const std::string& images_path,
                             const std::string& labels_path,
                             std::size_t classes = 0,
                             SplitTag tag = SplitTag::train) {
  auto img = detail::read_idx(images_path, kIdxImageMagic);
  auto lab = detail::read_idx(labels_path, kIdxLabelMagic);
  if (lab.dims[0] != img.dims[0])
    throw FormatError(labels_path + ": " + std::to_string(lab.dims[0]) +
                      " labels for " + std::to_string(img.dims[0]) + " images");
  DatasetSplit d;
  d.split = tag;
  std::vector<double> px(img.bytes.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = img.bytes[i] / 255.0;
  d.inputs = Tensor(Shape{img.dims[0], img.dims[1], img.dims[2], 1}, std::move(px));
  int max_label = 0;
  for (unsigned char c : lab.bytes) {
    d.labels.push_back(c);
    max_label = std::max(max_label, static_cast<int>(c));
  }
  d.classes = classes ? classes : static_cast<std::size_t>(max_label) + 1;
  d.validate();
  return d;
}

/// Writes [n, H, W, 1] inputs in [0, 1] as IDX u8 (rounded) plus labels.
inline void write_idx(const DatasetSplit& d, const std::string& images_path,
                      const std::string& labels_path) {
  if (d.inputs.rank() != 4 || d.inputs.dim(3) != 1)
    throw ContractError("write_idx: need [n, H, W, 1] inputs");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw IoError("write_idx: cannot open output files");
  detail::write_be32(img, kIdxImageMagic);
  for (std::size_t i = 0; i < 3; ++i)
    detail::write_be32(img, static_cast<std::uint32_t>(d.inputs.dim(i)));
  for (double v : d.inputs.data()) {
    const double c = std::clamp(std::round(v * 255.0), 0.0, 255.0);
    img.put(static_cast<char>(static_cast<unsigned char>(c)));
  }
  detail::write_be32(lab, kIdxLabelMagic);
  detail::write_be32(lab, static_cast<std::uint32_t>(d.size()));
  for (int y : d.labels) lab.put(static_cast<char>(y));
}

// ---------------------------------------------------------------------------
// CSV: header "label,f0,f1,...", one row per example.

inline DatasetSplit load_csv(const std::string& path, std::size_t classes = 0,
                             SplitTag tag = SplitTag::train) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ":1: missing header");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 2 || header[0] != "label")
    throw FormatError(path + ":1: header must be label,f0,f1,...");
  for (std::size_t j = 1; j < header.size(); ++j)
    if (header[j] != "f" + std::to_string(j - 1))
      throw FormatError(path + ":1: unexpected column '" + header[j] + "'");
  const std::size_t features = header.size() - 1;
  DatasetSplit d;
  d.split = tag;
  std::vector<double> data;
  std::size_t lineno = 1;
  int max_label = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != header.size())
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(header.size()) + " fields, found " +
                        std::to_string(cells.size()));
    try {
      std::size_t used = 0;
      const int y = std::stoi(cells[0], &used);
      if (used != cells[0].size() || y < 0) throw std::invalid_argument("label");
      d.labels.push_back(y);
      max_label = std::max(max_label, y);
      for (std::size_t j = 1; j < cells.size(); ++j) {
        const double v = std::stod(cells[j], &used);
        if (used != cells[j].size()) throw std::invalid_argument("value");
        data.push_back(v);
      }
    } catch (const std::logic_error&) {
      throw FormatError(path + ":" + std::to_string(lineno) +
                        ": malformed number");
    }
  }
  d.inputs = Tensor(Shape{d.labels.size(), features}, std::move(data));
  d.classes = classes ? classes : static_cast<std::size_t>(max_label) + 1;
  d.validate();
  return d;
}

inline void write_csv(const DatasetSplit& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path);
  const std::size_t f = d.inputs.row_stride();
  out << "label";
  for (std::size_t j = 0; j < f; ++j) out << ",f" << j;
  out << '\n';
  out.precision(17);
  for (std::size_t i = 0; i < d.size(); ++i) {
    out << d.labels[i];
    for (std::size_t j = 0; j < f; ++j) out << ',' << d.inputs[i * f + j];
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic tasks

enum class SyntheticKind { gaussian_blobs, two_rings, xor_grid };

struct SyntheticParams {
  std::size_t classes = 3;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 500;
  std::size_t dim = 2;
  double sigma = 0.5;
  double radius = 2.0;

  friend bool operator==(const SyntheticParams&, const SyntheticParams&) = default;
};

namespace detail {

inline DatasetSplit synth_draw(SyntheticKind kind, const SyntheticParams& p,
                               std::size_t per_class, Rng& rng, SplitTag tag) {
  const std::size_t n = per_class * p.classes;
  DatasetSplit d;
  d.classes = p.classes;
  d.split = tag;
  d.inputs = Tensor(Shape{n, p.dim});
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;
  // Classes interleaved: row i has class i % classes.
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % p.classes;
    d.labels.push_back(static_cast<int>(c));
    double* row = d.inputs.data().data() + i * p.dim;
    switch (kind) {
      case SyntheticKind::gaussian_blobs: {
        const double a = two_pi * static_cast<double>(c) / static_cast<double>(p.classes);
        for (std::size_t j = 0; j < p.dim; ++j) row[j] = p.sigma * normal(rng);
        row[0] += p.radius * std::cos(a);
        row[1] += p.radius * std::sin(a);
        break;
      }
      case SyntheticKind::two_rings: {
        const double r = p.radius * static_cast<double>(c + 1) /
                         static_cast<double>(p.classes);
        const double a = two_pi * unif(rng);
        for (std::size_t j = 0; j < p.dim; ++j) row[j] = p.sigma * normal(rng);
        row[0] += r * std::cos(a);
        row[1] += r * std::sin(a);
        break;
      }
      case SyntheticKind::xor_grid: {
        // classes x classes cells over [-radius, radius]^2, cell (i, j) has
        // class (i + j) mod classes. Rejection-sample a cell of class c.
        const std::size_t k = p.classes;
        const double cell = 2.0 * p.radius / static_cast<double>(k);
        std::uniform_int_distribution<std::size_t> pick(0, k - 1);
        const std::size_t ci = pick(rng);
        const std::size_t cj = (c + k - ci % k) % k;
        for (std::size_t j = 0; j < p.dim; ++j) row[j] = p.sigma * normal(rng);
        row[0] = -p.radius + cell * (static_cast<double>(ci) + unif(rng));
        row[1] = -p.radius + cell * (static_cast<double>(cj) + unif(rng));
        break;
      }
    }
  }
  return d;
}

}  // namespace detail

/// Deterministic (train, test) draws. Gaussian blobs place class means on a
/// circle of `radius` in the first two coordinates with isotropic `sigma`.
inline std::pair<DatasetSplit, DatasetSplit> make_synthetic(
    SyntheticKind kind, const SyntheticParams& p, std::uint64_t seed) {
  if (p.classes < 2) throw ContractError("make_synthetic: classes must be >= 2");
  if (p.train_per_class < 1 || p.test_per_class < 1)
    throw ContractError("make_synthetic: need >= 1 example per class");
  if (p.dim < 2) throw ContractError("make_synthetic: dim must be >= 2");
  Rng train_rng = make_rng(seed, "synthetic/train");
  Rng test_rng = make_rng(seed, "synthetic/test");
  return {detail::synth_draw(kind, p, p.train_per_class, train_rng, SplitTag::train),
          detail::synth_draw(kind, p, p.test_per_class, test_rng, SplitTag::test)};
}

// ---------------------------------------------------------------------------
// ZCA whitening

/// x -> W (x - mean), with W = E diag((s + lambda * mean(s))^(-1/2)) E^T
/// where cov = E diag(s) E^T.
struct ZcaTransform {
  Tensor mean;     // [d]
  Tensor W;        // [d, d]
  Tensor W_inv;    // [d, d]
  double lambda = 0.0;
};

inline ZcaTransform zca_fit(const Tensor& inputs, double lambda) {
  if (inputs.rank() < 2 || inputs.dim(0) < 2)
    throw ContractError("zca_fit: need at least 2 samples");
  if (!(lambda >= 0.0)) throw ContractError("zca_fit: lambda must be >= 0");
  const std::size_t n = inputs.dim(0), d = inputs.row_stride();
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                 Eigen::RowMajor>>
      X(inputs.data().data(), static_cast<Eigen::Index>(n),
        static_cast<Eigen::Index>(d));
  const Eigen::RowVectorXd mu = X.colwise().mean();
  const Eigen::MatrixXd Xc = X.rowwise() - mu;
  const Eigen::MatrixXd cov = (Xc.transpose() * Xc) / static_cast<double>(n);
  if (!cov.allFinite()) throw DomainError("zca_fit: non-finite covariance");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success)
    throw DomainError("zca_fit: eigendecomposition failed");
  Eigen::VectorXd s = eig.eigenvalues().cwiseMax(0.0);
  const double shift = lambda * s.mean();
  Eigen::VectorXd t = s.array() + shift;
  if (t.minCoeff() <= 0.0)
    throw DomainError("zca_fit: singular covariance with lambda = 0");
  const Eigen::MatrixXd& E = eig.eigenvectors();
  Eigen::MatrixXd W = E * t.array().rsqrt().matrix().asDiagonal() * E.transpose();
  Eigen::MatrixXd Wi = E * t.array().sqrt().matrix().asDiagonal() * E.transpose();
  // Exact symmetry.
  W = 0.5 * (W + W.transpose()).eval();
  Wi = 0.5 * (Wi + Wi.transpose()).eval();

  ZcaTransform z;
  z.lambda = lambda;
  z.mean = Tensor(Shape{d});
  z.W = Tensor(Shape{d, d});
  z.W_inv = Tensor(Shape{d, d});
  for (std::size_t j = 0; j < d; ++j) z.mean[j] = mu(static_cast<Eigen::Index>(j));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      z.W.at(i, j) = W(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      z.W_inv.at(i, j) = Wi(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
  return z;
}

namespace detail {

inline Tensor zca_rows(const Tensor& x, const Tensor& M, const Tensor& pre,
                       const Tensor& post) {
  const std::size_t d = M.dim(0);
  if (x.rank() < 2 || x.row_stride() != d)
    throw DimensionError("zca: inputs " + shape_str(x.shape()) +
                         " do not match transform of size " + std::to_string(d));
  Tensor out(x.shape());
  const std::size_t n = x.dim(0);
  std::vector<double> v(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) v[j] = x[i * d + j] - (pre.size() == d ? pre[j] : 0.0);
    for (std::size_t r = 0; r < d; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += M.at(r, j) * v[j];
      out[i * d + r] = s + (post.size() == d ? post[r] : 0.0);
    }
  }
  return out;
}

}  // namespace detail

/// W (x - mean), row by row.
inline Tensor zca_apply(const ZcaTransform& t, const Tensor& x) {
  return detail::zca_rows(x, t.W, t.mean, Tensor(Shape{0}));
}

/// W^-1 x + mean, row by row.
inline Tensor zca_invert(const ZcaTransform& t, const Tensor& x) {
  return detail::zca_rows(x, t.W_inv, Tensor(Shape{0}), t.mean);
}

/// Mirror [n, H, W, C] images left-right.
inline Tensor flip_horizontal(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("flip_horizontal: need [n, H, W, C]");
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        for (std::size_t ch = 0; ch < c; ++ch)
          out[((i * h + y) * w + xx) * c + ch] =
              x[((i * h + y) * w + (w - 1 - xx)) * c + ch];
  return out;
}

// ---------------------------------------------------------------------------
// PPM grid

/// Binary PPM (P6) holding `rows` of images laid out left to right, each
/// min-max normalized on its own and upscaled by `scale`. Image inputs are
/// [n, H, W, C] with C in {1, 3}; vector inputs [n, d] render as 1 x d gray.
inline std::string ppm_grid(const Tensor& images, std::size_t cols,
                            std::size_t scale = 1) {
  if (images.rank() < 2 || images.dim(0) == 0)
    throw ContractError("ppm_grid: no images");
  if (cols == 0 || scale == 0) throw ContractError("ppm_grid: cols and scale must be >= 1");
  std::size_t h = 1, w = images.row_stride(), c = 1;
  if (images.rank() == 4) {
    h = images.dim(1);
    w = images.dim(2);
    c = images.dim(3);
    if (c != 1 && c != 3) throw ContractError("ppm_grid: channels must be 1 or 3");
  }
  const std::size_t n = images.dim(0);
  const std::size_t grid_rows = (n + cols - 1) / cols;
  const std::size_t pw = w * scale, ph = h * scale;
  const std::size_t W = cols * pw, H = grid_rows * ph;
  std::vector<unsigned char> px(W * H * 3, 0);
  const std::size_t stride = h * w * c;
  for (std::size_t i = 0; i < n; ++i) {
    const double* img = images.data().data() + i * stride;
    const auto [lo_it, hi_it] = std::minmax_element(img, img + stride);
    const double lo = *lo_it, range = *hi_it - *lo_it;
    const std::size_t gx = (i % cols) * pw, gy = (i / cols) * ph;
    for (std::size_t y = 0; y < ph; ++y)
      for (std::size_t x = 0; x < pw; ++x)
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const double v = img[((y / scale) * w + x / scale) * c + (c == 3 ? ch : 0)];
          const double t = range > 0.0 ? (v - lo) / range : 0.0;
          px[((gy + y) * W + gx + x) * 3 + ch] =
              static_cast<unsigned char>(std::lround(255.0 * t));
        }
  }
  std::string out = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  out.append(reinterpret_cast<const char*>(px.data()), px.size());
  return out;
}

}  // namespace ratdd
