// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ratdd/data.hpp"
#include "test_util.hpp"

using namespace ratdd;
namespace fs = std::filesystem;

namespace {

const std::string kFixtures = RATDD_FIXTURE_DIR;

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  fs::path d = fs::temp_directory_path() / "ratdd_test_data";
  fs::create_directories(d);
  return d / name;
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

}  // namespace

TEST(Idx, LoadsFixture) {
  DatasetSplit d = load_idx(kFixtures + "/tiny-images.idx3-ubyte",
                            kFixtures + "/tiny-labels.idx1-ubyte");
  EXPECT_EQ(d.inputs.shape(), (Shape{3, 2, 3, 1}));
  EXPECT_EQ(d.labels, (std::vector<int>{2, 0, 1}));
  EXPECT_EQ(d.classes, 3u);
  EXPECT_DOUBLE_EQ(d.inputs[1], 1.0);
  EXPECT_DOUBLE_EQ(d.inputs[2], 128.0 / 255.0);
  EXPECT_DOUBLE_EQ(d.inputs[17], 1.0);
}

TEST(Idx, RoundTrip) {
  DatasetSplit d = load_idx(kFixtures + "/tiny-images.idx3-ubyte",
                            kFixtures + "/tiny-labels.idx1-ubyte");
  const auto img = scratch("rt-images"), lab = scratch("rt-labels");
  write_idx(d, img.string(), lab.string());
  EXPECT_EQ(slurp(img.string()), slurp(kFixtures + "/tiny-images.idx3-ubyte"));
  EXPECT_EQ(slurp(lab.string()), slurp(kFixtures + "/tiny-labels.idx1-ubyte"));
}

TEST(Idx, Errors) {
  const std::string labels = kFixtures + "/tiny-labels.idx1-ubyte";
  EXPECT_THROW((void)load_idx(scratch("missing").string(), labels), IoError);
  std::string bytes = slurp(kFixtures + "/tiny-images.idx3-ubyte");
  std::string bad_magic = bytes;
  bad_magic[3] = 0x01;
  write_bytes(scratch("bad-magic"), bad_magic);
  EXPECT_THROW((void)load_idx(scratch("bad-magic").string(), labels), FormatError);
  write_bytes(scratch("truncated"), bytes.substr(0, bytes.size() - 1));
  EXPECT_THROW((void)load_idx(scratch("truncated").string(), labels), FormatError);
  // Label count disagreeing with the image count.
  std::string lab = slurp(labels);
  lab[7] = 2;
  lab.pop_back();
  write_bytes(scratch("short-labels"), lab);
  EXPECT_THROW((void)load_idx(kFixtures + "/tiny-images.idx3-ubyte",
                              scratch("short-labels").string()),
               FormatError);
}

TEST(Csv, RoundTripExact) {
  DatasetSplit d;
  d.inputs = tu::random_tensor({5, 3}, 1);
  d.labels = {0, 1, 2, 1, 0};
  d.classes = 3;
  const auto p = scratch("rt.csv");
  write_csv(d, p.string());
  DatasetSplit e = load_csv(p.string());
  EXPECT_TRUE(bit_identical(d.inputs, e.inputs));
  EXPECT_EQ(d.labels, e.labels);
  EXPECT_EQ(e.classes, 3u);
}

TEST(Csv, ErrorsNameFileAndLine) {
  const auto p = scratch("bad.csv");
  write_bytes(p, "label,f0,f1\n0,1.0,2.0\n1,abc,2.0\n");
  try {
    (void)load_csv(p.string());
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.csv:3"), std::string::npos) << e.what();
  }
  write_bytes(p, "label,f0,f1\n0,1.0\n");
  EXPECT_THROW((void)load_csv(p.string()), FormatError);
  write_bytes(p, "y,f0\n0,1.0\n");
  EXPECT_THROW((void)load_csv(p.string()), FormatError);
  write_bytes(p, "label,f0\n-1,1.0\n");
  EXPECT_THROW((void)load_csv(p.string()), FormatError);
}

TEST(Synthetic, DeterministicAndBalanced) {
  SyntheticParams p;
  auto [tr, te] = make_synthetic(SyntheticKind::gaussian_blobs, p, 3);
  auto [tr2, te2] = make_synthetic(SyntheticKind::gaussian_blobs, p, 3);
  EXPECT_TRUE(bit_identical(tr.inputs, tr2.inputs));
  EXPECT_TRUE(bit_identical(te.inputs, te2.inputs));
  EXPECT_FALSE(bit_identical(tr.inputs, te.inputs));
  EXPECT_EQ(tr.size(), 1500u);
  for (const auto& c : class_indices(tr.labels, 3)) EXPECT_EQ(c.size(), 500u);
  // Blob means sit on a circle of radius 2.
  for (std::size_t k = 0; k < 3; ++k) {
    double mx = 0, my = 0;
    for (std::size_t i = k; i < tr.size(); i += 3) {
      mx += tr.inputs.at(i, 0);
      my += tr.inputs.at(i, 1);
    }
    EXPECT_NEAR(std::hypot(mx / 500, my / 500), 2.0, 0.1);
  }
  for (auto kind : {SyntheticKind::two_rings, SyntheticKind::xor_grid}) {
    auto [a, b] = make_synthetic(kind, p, 1);
    EXPECT_NO_THROW(a.validate());
    EXPECT_EQ(a.classes, 3u);
  }
}

TEST(Subsets, BalancedSampleAndSubset) {
  std::vector<int> labels{0, 1, 0, 1, 0, 1, 2, 2};
  Rng rng(5);
  auto idx = balanced_sample(labels, 3, 2, rng);
  ASSERT_EQ(idx.size(), 6u);
  std::vector<int> per(3);
  for (auto i : idx) ++per[labels[i]];
  EXPECT_EQ(per, (std::vector<int>{2, 2, 2}));
  EXPECT_THROW((void)balanced_sample(labels, 3, 3, rng), ContractError);
}

// ZCA on data with identity covariance: W = (1 + lambda)^(-1/2) I.
TEST(Zca, IdentityCovariance) {
  const double a = std::sqrt(2.0);
  Tensor x = Tensor::matrix(4, 2, {a, 0, -a, 0, 0, a, 0, -a});
  ZcaTransform t = zca_fit(x, 0.1);
  const double w = 1.0 / std::sqrt(1.1);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      EXPECT_NEAR(t.W.at(i, j), i == j ? w : 0.0, 1e-10);
}

TEST(Zca, InvertAfterApply) {
  Tensor x = tu::random_tensor({50, 6}, 7);
  for (std::size_t i = 0; i < 50; ++i) x.at(i, 1) += 2.0 * x.at(i, 0);  // correlated
  ZcaTransform t = zca_fit(x, 0.1);
  Tensor back = zca_invert(t, zca_apply(t, x));
  double diff = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) diff = std::max(diff, std::abs(back[i] - x[i]));
  EXPECT_LE(diff, 1e-8);
}

TEST(Zca, WhitensWithoutRegularization) {
  Tensor x = tu::random_tensor({400, 3}, 8);
  for (std::size_t i = 0; i < 400; ++i) x.at(i, 2) += x.at(i, 1);
  ZcaTransform t = zca_fit(x, 0.0);
  Tensor y = zca_apply(t, x);
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t q = 0; q < 3; ++q) {
      double s = 0.0;
      for (std::size_t i = 0; i < 400; ++i) s += y.at(i, p) * y.at(i, q);
      EXPECT_NEAR(s / 400.0, p == q ? 1.0 : 0.0, 1e-9);
    }
}

TEST(Zca, ImageShapedInputs) {
  Tensor x = tu::random_tensor({30, 2, 2, 1}, 9);
  ZcaTransform t = zca_fit(x, 0.1);
  Tensor y = zca_apply(t, x);
  EXPECT_EQ(y.shape(), x.shape());
  Tensor back = zca_invert(t, y);
  EXPECT_LE(relative_error(back, x), 1e-10);
}

TEST(Flip, MirrorsWidth) {
  Tensor x(Shape{1, 1, 3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(flip_horizontal(x).storage(), (std::vector<double>{5, 6, 3, 4, 1, 2}));
  EXPECT_TRUE(bit_identical(flip_horizontal(flip_horizontal(x)), x));
}

TEST(Ppm, MatchesGoldenFile) {
  Tensor imgs(Shape{3, 2, 2, 3});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 12; ++k)
      imgs[i * 12 + k] = static_cast<double>((i * 7 + k * 3) % 11) / 10.0;
  EXPECT_EQ(ppm_grid(imgs, 2, 2), slurp(kFixtures + "/grid_golden.ppm"));
}

TEST(Ppm, VectorInputsAndErrors) {
  Tensor v = Tensor::matrix(2, 3, {0, 1, 2, 5, 5, 5});
  const std::string p = ppm_grid(v, 1);
  const std::string header = "P6\n3 2\n255\n";
  ASSERT_EQ(p.substr(0, header.size()), header);
  EXPECT_EQ(static_cast<unsigned char>(p[header.size() + 3]), 128);  // middle of row 0
  EXPECT_EQ(static_cast<unsigned char>(p[header.size() + 9]), 0);     // constant row
  EXPECT_THROW((void)ppm_grid(v, 0), ContractError);
}
