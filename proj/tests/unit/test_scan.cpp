#include <gtest/gtest.h>
#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "skinmamba/errors.hpp"
#include "skinmamba/scan.hpp"
#include "skinmamba/ss2d.hpp"

using namespace skinmamba;
using namespace skinmamba::scan;
namespace st = skinmamba::testing;

namespace {

torch::Tensor scalar(double v, torch::Dtype dt = torch::kFloat64) {
  return torch::full({1, 1}, v, torch::TensorOptions().dtype(dt));
}

ScanInputs random_inputs(int64_t batch, int64_t len, int64_t ch, int64_t n, torch::Dtype dt) {
  const auto o = torch::TensorOptions().dtype(dt);
  return {torch::randn({batch, len, ch}, o),
          torch::rand({batch, len, ch}, o) * 0.5 + 0.01,
          -torch::exp(torch::randn({ch, n}, o) * 0.5),
          torch::randn({batch, len, n}, o),
          torch::randn({batch, len, n}, o),
          torch::randn({ch}, o)};
}

}  // namespace

TEST(Discretize, ZeroStepGivesIdentityTransition) {
  const auto d = discretize(scalar(0), scalar(-3.0), scalar(5.0), StepCheck::AllowZero);
  EXPECT_EQ(d.a_bar.item<double>(), 1.0);
  EXPECT_EQ(d.b_bar.item<double>(), 0.0);
}

TEST(Discretize, ScalarExamples) {
  auto d = discretize(scalar(1), scalar(-1), scalar(1));
  EXPECT_NEAR(d.a_bar.item<double>(), 0.36787944117144233, 1e-12);
  EXPECT_NEAR(d.b_bar.item<double>(), 1.0, 1e-12);

  d = discretize(scalar(std::log(2.0)), scalar(-1), scalar(2));
  EXPECT_NEAR(d.a_bar.item<double>(), 0.5, 1e-12);
  EXPECT_NEAR(d.b_bar.item<double>(), 2 * std::log(2.0), 1e-12);
}

TEST(Discretize, BroadcastShape) {
  const auto d = discretize(torch::rand({2, 5, 3}) + 0.1, -torch::rand({3, 4}), torch::randn({2, 5, 4}));
  EXPECT_EQ(d.a_bar.sizes(), (torch::IntArrayRef{2, 5, 3, 4}));
  EXPECT_EQ(d.b_bar.sizes(), (torch::IntArrayRef{2, 5, 3, 4}));
}

TEST(Discretize, RejectsNonPositiveStep) {
  EXPECT_THROW(discretize(scalar(0), scalar(-1), scalar(1)), ContractError);
  EXPECT_THROW(discretize(scalar(-0.1), scalar(-1), scalar(1), StepCheck::AllowZero), ContractError);
}

TEST(Discretize, RejectsNaN) {
  EXPECT_THROW(discretize(scalar(1), scalar(NAN), scalar(1)), NumericError);
  EXPECT_THROW(discretize(scalar(1), scalar(-1), scalar(INFINITY)), NumericError);
}

TEST(ScanReference, HandUnrolledScalarCase) {
  // A_bar = 0.5 via delta = ln 2, A = -1; B_bar = 1 via B = 1 / ln 2.
  const double ln2 = std::log(2.0);
  const auto o = torch::kFloat64;
  ScanInputs in{torch::tensor({1.0, 0.0}, o).view({1, 2, 1}),
                torch::full({1, 2, 1}, ln2, o),
                torch::full({1, 1}, -1.0, o),
                torch::full({1, 2, 1}, 1.0 / ln2, o),
                torch::ones({1, 2, 1}, o),
                torch::zeros({1}, o)};
  const auto y = scan_reference(in);
  EXPECT_NEAR(y[0][0][0].item<double>(), 1.0, 1e-12);
  EXPECT_NEAR(y[0][1][0].item<double>(), 0.5, 1e-12);
  const auto yf = scan_fused(in);
  EXPECT_NEAR(yf[0][1][0].item<double>(), 0.5, 1e-12);
}

TEST(ScanReference, MatchesNaiveLoops) {
  torch::manual_seed(3);
  for (int rep = 0; rep < 10; ++rep) {
    const int64_t L = 1 + rep * 3, C = 1 + rep % 4, N = 1 + rep % 5;
    const auto in = random_inputs(1, L, C, N, torch::kFloat64);
    const auto y = st::to_vector(scan_reference(in));
    const auto oracle = st::naive_scan(st::to_vector(in.u), st::to_vector(in.delta), st::to_vector(in.A),
                                       st::to_vector(in.B), st::to_vector(in.C), st::to_vector(in.D), L, C, N);
    ASSERT_EQ(y.size(), oracle.size());
    for (size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], oracle[i], 1e-12);
  }
}

TEST(ScanReference, ZeroInputGivesZeroOutput) {
  auto in = random_inputs(2, 9, 3, 4, torch::kFloat64);
  in.u.zero_();
  EXPECT_TRUE(torch::equal(scan_reference(in), torch::zeros({2, 9, 3}, torch::kFloat64)));
  EXPECT_TRUE(torch::equal(scan_fused(in), torch::zeros({2, 9, 3}, torch::kFloat64)));
}

TEST(ScanReference, SingleStepClosedForm) {
  const auto in = random_inputs(1, 1, 3, 5, torch::kFloat64);
  // y = sum_n C_n delta B_n u + D u
  const auto expected = (in.C[0][0] * in.B[0][0]).sum() * in.delta[0][0] * in.u[0][0] + in.D * in.u[0][0];
  EXPECT_TRUE(torch::allclose(scan_reference(in)[0][0], expected, 0, 1e-12));
  EXPECT_TRUE(torch::allclose(scan_fused(in)[0][0], expected, 0, 1e-12));
}

TEST(ScanReference, NamesStepOfNonFiniteValue) {
  auto in = random_inputs(1, 6, 2, 3, torch::kFloat64);
  in.A.fill_(-1e-3);
  in.B[0][4].fill_(1e308);
  in.u[0][4].fill_(1e10);
  try {
    scan_reference(in);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 4"), std::string::npos) << e.what();
  }
}

TEST(ScanFused, MatchesReferenceAcrossChunkBoundaries) {
  torch::manual_seed(11);
  // C * N = 512 gives 512-step chunks, so L = 1500 spans three chunks.
  const auto in = random_inputs(2, 1500, 16, 32, torch::kFloat64);
  EXPECT_TRUE(torch::allclose(scan_fused(in), scan_reference(in), 0, 1e-10));
}

TEST(ScanFused, FloatMatchesReference) {
  torch::manual_seed(12);
  const auto in = random_inputs(2, 64, 8, 16, torch::kFloat32);
  const auto ref = scan_reference(in);
  EXPECT_LT((scan_fused(in).to(torch::kFloat64) - ref).abs().max().item<double>(), 1e-4);
}

TEST(ScanFused, RejectsBadOperands) {
  auto in = random_inputs(1, 4, 2, 3, torch::kFloat32);
  auto bad = in;
  bad.delta = -bad.delta;
  EXPECT_THROW(scan_fused(bad), ContractError);
  bad = in;
  bad.u = torch::full_like(in.u, NAN);
  EXPECT_THROW(scan_fused(bad), NumericError);
  bad = in;
  bad.B = torch::randn({1, 4, 2});
  EXPECT_THROW(scan_fused(bad), ShapeError);
}

TEST(ScanFused, AnalyticGradientOfAllOperands) {
  torch::manual_seed(13);
  auto in = random_inputs(2, 8, 3, 4, torch::kFloat64);
  for (auto* t : {&in.u, &in.delta, &in.A, &in.B, &in.C, &in.D}) t->requires_grad_(true);
  const auto w = torch::randn({2, 8, 3}, torch::kFloat64);
  const auto report = st::gradcheck([&] { return (scan_fused(in) * w).sum(); },
                                    {{"u", in.u}, {"delta", in.delta}, {"A", in.A}, {"B", in.B},
                                     {"C", in.C}, {"D", in.D}},
                                    1000, 1e-6, 1);
  EXPECT_EQ(report.within_tight, report.checked) << report.summary();
}

TEST(SelectiveScan, ParameterInitialization) {
  SelectiveScan s(3, 4);
  const auto A = s->state_matrix();
  EXPECT_TRUE((A < 0).all().item<bool>());
  EXPECT_TRUE(torch::allclose(A[1], -torch::arange(1, 5, torch::kFloat32)));
  EXPECT_TRUE(torch::equal(s->D, torch::ones({3})));
  const auto dt = torch::softplus(s->delta_proj->bias);
  EXPECT_TRUE((dt >= 1e-3 - 1e-7).all().item<bool>());
  EXPECT_TRUE((dt <= 1e-1 + 1e-7).all().item<bool>());
}

TEST(SelectiveScan, ProductionMatchesSequentialOracle) {
  torch::manual_seed(21);
  for (int rep = 0; rep < 20; ++rep) {
    const int64_t L = 1 + (rep * 7) % 64, C = 1 + rep % 8, N = 1 + (rep * 5) % 16;
    SelectiveScan s(C, N);
    const auto x = torch::randn({2, L, C});
    torch::NoGradGuard no_grad;
    const auto err = (selective_scan(x, *s).to(torch::kFloat64) - selective_scan_sequential(x, *s)).abs().max();
    EXPECT_LT(err.item<double>(), 1e-4) << "L=" << L << " C=" << C << " N=" << N;
  }
}

TEST(SelectiveScan, GradientWrtInputAndParameters) {
  torch::manual_seed(22);
  SelectiveScan s(3, 4);
  s->to(torch::kFloat64);
  const auto x = torch::randn({1, 8, 3}, torch::kFloat64).requires_grad_(true);
  const auto w = torch::randn({1, 8, 3}, torch::kFloat64);
  auto inputs = st::parameters_of(*s);
  inputs.emplace_back("x", x);
  const auto report = st::gradcheck([&] { return (selective_scan(x, *s) * w).sum(); }, inputs, 1000, 1e-3, 2);
  EXPECT_TRUE(report.passes(1.0, 1e-3)) << report.summary();
}

TEST(SelectiveScan, StableOverLongSequence) {
  torch::manual_seed(23);
  SelectiveScan s(4, 16);
  const auto x = torch::rand({1, 1024, 4}) * 2 - 1;
  torch::NoGradGuard no_grad;
  const auto in = s->project(x);
  const auto d = discretize(in.delta, in.A, in.B);
  EXPECT_TRUE((d.a_bar.abs() < 1).all().item<bool>());
  const auto y = selective_scan(x, *s);
  EXPECT_TRUE(torch::isfinite(y).all().item<bool>());
  EXPECT_LT(y.abs().max().item<double>(), 1e3);
}

TEST(SS2D, DirectionOrdersAreBijections) {
  for (const auto [h, w] : {std::pair<int64_t, int64_t>{1, 1}, {3, 5}, {4, 4}, {7, 2}}) {
    for (const auto dir : kScanDirections) {
      auto order = direction_order(dir, h, w);
      ASSERT_EQ(static_cast<int64_t>(order.size()), h * w);
      std::sort(order.begin(), order.end());
      for (int64_t i = 0; i < h * w; ++i) EXPECT_EQ(order[static_cast<size_t>(i)], i);
    }
  }
}

TEST(SS2D, DirectionOrderValues) {
  EXPECT_EQ(direction_order(ScanDirection::RowForward, 2, 3), (std::vector<int64_t>{0, 1, 2, 3, 4, 5}));
  EXPECT_EQ(direction_order(ScanDirection::RowReverse, 2, 3), (std::vector<int64_t>{5, 4, 3, 2, 1, 0}));
  EXPECT_EQ(direction_order(ScanDirection::ColumnForward, 2, 3), (std::vector<int64_t>{0, 3, 1, 4, 2, 5}));
  EXPECT_EQ(direction_order(ScanDirection::ColumnReverse, 2, 3), (std::vector<int64_t>{5, 2, 4, 1, 3, 0}));
}

TEST(SS2D, ZeroInputGivesZeroOutput) {
  SS2D p(4, 8);
  torch::NoGradGuard no_grad;
  EXPECT_TRUE(torch::equal(ss2d(torch::zeros({2, 4, 5, 3}), *p), torch::zeros({2, 4, 5, 3})));
}

TEST(SS2D, SinglePixelIsSumOfFourClosedForms) {
  torch::manual_seed(31);
  SS2D p(3, 4);
  p->to(torch::kFloat64);
  const auto f = torch::randn({1, 3, 1, 1}, torch::kFloat64);
  torch::NoGradGuard no_grad;
  const auto token = f.view({1, 1, 3});
  auto expected = torch::zeros({3}, torch::kFloat64);
  for (const auto dir : kScanDirections) {
    const auto in = p->scan(dir)->project(token);
    expected += (in.C[0][0] * in.B[0][0]).sum() * in.delta[0][0] * in.u[0][0] + in.D * in.u[0][0];
  }
  EXPECT_TRUE(torch::allclose(ss2d(f, *p).view({3}), expected, 0, 1e-12));
}

TEST(SS2D, ShapePreservedAndEmptyRejected) {
  SS2D p(4, 4);
  torch::NoGradGuard no_grad;
  EXPECT_EQ(p->forward(torch::randn({2, 4, 3, 5})).sizes(), (torch::IntArrayRef{2, 4, 3, 5}));
  EXPECT_THROW(ss2d(torch::randn({1, 4, 0, 5}), *p), EmptyInputError);
  EXPECT_THROW(ss2d(torch::randn({1, 3, 2, 2}), *p), ShapeError);
}

namespace {

void swap_scans(SS2DImpl& p, ScanDirection a, ScanDirection b) {
  torch::NoGradGuard no_grad;
  auto pa = p.scan(a)->parameters();
  auto pb = p.scan(b)->parameters();
  for (size_t i = 0; i < pa.size(); ++i) {
    const auto tmp = pa[i].clone();
    pa[i].copy_(pb[i]);
    pb[i].copy_(tmp);
  }
}

}  // namespace

// Rotating the map by 180 degrees reverses both flattened orders, so it
// commutes with SS2D once forward and reverse parameters trade places.
TEST(SS2D, HalfTurnSymmetryWithSwappedDirections) {
  torch::manual_seed(32);
  SS2D p(3, 4);
  p->to(torch::kFloat64);
  const auto f = torch::randn({1, 3, 4, 5}, torch::kFloat64);
  torch::NoGradGuard no_grad;
  const auto base = ss2d(f, *p);
  swap_scans(*p, ScanDirection::RowForward, ScanDirection::RowReverse);
  swap_scans(*p, ScanDirection::ColumnForward, ScanDirection::ColumnReverse);
  const auto rotated = ss2d(torch::flip(f, {2, 3}), *p);
  EXPECT_TRUE(torch::allclose(rotated, torch::flip(base, {2, 3}), 0, 1e-10));
}

// Transposing a square map exchanges row-major and column-major orders.
TEST(SS2D, TransposeSymmetryWithSwappedAxes) {
  torch::manual_seed(33);
  SS2D p(3, 4);
  p->to(torch::kFloat64);
  const auto f = torch::randn({1, 3, 5, 5}, torch::kFloat64);
  torch::NoGradGuard no_grad;
  const auto base = ss2d(f, *p);
  swap_scans(*p, ScanDirection::RowForward, ScanDirection::ColumnForward);
  swap_scans(*p, ScanDirection::RowReverse, ScanDirection::ColumnReverse);
  const auto transposed = ss2d(f.transpose(2, 3), *p);
  EXPECT_TRUE(torch::allclose(transposed, base.transpose(2, 3), 0, 1e-10));
}

// A horizontal flip alone does not commute with a flattened row-major scan:
// reversing each row is not the reverse of the whole sequence.
TEST(SS2D, HorizontalFlipIsNotASymmetryOfFlattenedScans) {
  torch::manual_seed(34);
  SS2D p(3, 4);
  p->to(torch::kFloat64);
  const auto f = torch::randn({1, 3, 4, 4}, torch::kFloat64);
  torch::NoGradGuard no_grad;
  const auto base = ss2d(f, *p);
  swap_scans(*p, ScanDirection::RowForward, ScanDirection::RowReverse);
  const auto flipped = ss2d(torch::flip(f, {3}), *p);
  EXPECT_FALSE(torch::allclose(flipped, torch::flip(base, {3}), 0, 1e-5));
}
