#include "xmreid/encoder.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace xmreid;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.width = 16;
  c.depth = 1;
  c.heads = 2;
  c.classes = 3;
  return c;
}

ImageD random_image(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageD img(64, 32, 3);
  for (auto& p : img.planes)
    for (Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
  return img;
}

EncoderParams<double> random_params(const EncoderConfig& c, std::uint64_t seed) {
  EncoderParams<double> p = init_encoder<double>(c, seed);
  // Non-zero position rows so the position path is exercised.
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> nd(0.0, 0.1);
  for (Index i = 0; i < p.pos.size(); ++i) p.pos.data()[i] = nd(rng);
  return p;
}

}  // namespace

TEST(Encoder, TokenizeCountsPatches) {
  const EncoderConfig c = small_config();
  Tape<double> t;
  const auto v = bind(t, init_encoder<double>(c, 1), nullptr);
  const auto seq = tokenize(t, {random_image(1), random_image(2)}, v);
  EXPECT_EQ(c.num_patches(), 32);
  EXPECT_EQ(seq.seq_len, 33);
  EXPECT_EQ(seq.tokens.rows(), 66);
  EXPECT_EQ(seq.tokens.cols(), 16);
}

TEST(Encoder, ZeroImageTokensEqualProjectionBias) {
  EncoderConfig c = small_config();
  c.pixel_mean = 0.0;
  c.pixel_std = 1.0;
  EncoderParams<double> p = init_encoder<double>(c, 2);
  p.patch_b = Eigen::RowVectorXd::LinSpaced(16, -1.0, 1.0);
  Tape<double> t;
  const auto seq = tokenize(t, {ImageD(64, 32, 3)}, bind(t, p, nullptr));
  for (Index i = 1; i < 33; ++i) EXPECT_EQ(Matrix<double>(seq.tokens.value().row(i)), p.patch_b);
}

TEST(Encoder, PositionShiftIsAdditive) {
  const EncoderConfig c = small_config();
  EncoderParams<double> p = random_params(c, 3);
  const ImageD img = random_image(3);
  Tape<double> t;
  const Matrix<double> before = tokenize(t, {img}, bind(t, p, nullptr)).tokens.value();
  const Matrix<double> delta = Matrix<double>::Constant(p.pos.rows(), p.pos.cols(), 0.25);
  p.pos += delta;
  const Matrix<double> after = tokenize(t, {img}, bind(t, p, nullptr)).tokens.value();
  EXPECT_LT((after - before - delta).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Encoder, NonDivisibleImageRejected) {
  const EncoderConfig c = small_config();
  Tape<double> t;
  const auto v = bind(t, init_encoder<double>(c, 4), nullptr);
  EXPECT_THROW(tokenize(t, {ImageD(60, 32, 3)}, v), ShapeError);
  EncoderConfig bad = c;
  bad.patch = 7;
  EXPECT_THROW(bad.validate(), ShapeError);
  bad = c;
  bad.parts = 5;
  EXPECT_THROW(bad.validate(), ShapeError);
}

TEST(Encoder, PartsShapeAndDeterminism) {
  const EncoderConfig c = small_config();
  const auto p = random_params(c, 5);
  const std::vector<ImageD> imgs{random_image(5), random_image(6), random_image(7)};
  auto run = [&] {
    Tape<double> t;
    const auto out = encode_parts(tokenize(t, imgs, bind(t, p, nullptr)), bind(t, p, nullptr));
    std::vector<Matrix<double>> v{out.global.value()};
    for (const auto& f : out.parts) v.push_back(f.value());
    return v;
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.size(), 5u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].rows(), 3);
    EXPECT_EQ(a[i].cols(), 16);
    EXPECT_EQ(a[i], b[i]);
  }
}

TEST(Encoder, PartsRejectUnevenSplit) {
  const EncoderConfig c = small_config();
  Tape<double> t;
  const auto v = bind(t, init_encoder<double>(c, 6), nullptr);
  const auto seq = subsequence(tokenize(t, {random_image(8)}, v), {{0, 1, 2}});
  EXPECT_THROW(encode_parts(seq, v), ShapeError);
}

TEST(Encoder, ClassPathAgreesWithGlobalOutput) {
  for (bool norm : {false, true}) {
    EncoderConfig c = small_config();
    c.final_norm = norm;
    const auto p = random_params(c, 7);
    Tape<double> t;
    const auto v = bind(t, p, nullptr);
    const auto seq = tokenize(t, {random_image(9), random_image(10)}, v);
    EXPECT_EQ(encode_class(seq, v).value(), encode_parts(seq, v).global.value());
  }
}

TEST(Encoder, SinglePatchSubsequence) {
  const EncoderConfig c = small_config();
  Tape<double> t;
  const auto v = bind(t, random_params(c, 8), nullptr);
  const auto seq = tokenize(t, {random_image(11)}, v);
  const auto sub = subsequence(seq, {{17}});
  EXPECT_EQ(sub.seq_len, 2);
  EXPECT_EQ(sub.patch_indices[0], std::vector<Index>{17});
  // The kept row carries its original position embedding.
  EXPECT_EQ(Matrix<double>(sub.tokens.value().row(1)), Matrix<double>(seq.tokens.value().row(18)));
  const Matrix<double> z = encode_class(sub, v).value();
  EXPECT_TRUE(z.allFinite());
  EXPECT_THROW(subsequence(seq, {{}}), ShapeError);
  EXPECT_THROW(subsequence(seq, {{32}}), ShapeError);
}

TEST(Encoder, PartOutputIgnoresTokenOrderWithoutPositions) {
  const EncoderConfig c = small_config();
  EncoderParams<double> p = init_encoder<double>(c, 9);
  p.pos.setZero();
  ImageD img = random_image(12);
  Tape<double> t;
  const auto v = bind(t, p, nullptr);
  const auto base = encode_parts(tokenize(t, {img}, v), v);
  // Part 0 covers patches 0..7 (grid rows 0-1). Swap patches 1 and 6 in pixel space.
  ImageD swapped = img;
  for (Index ch = 0; ch < 3; ++ch) {
    auto& pl = swapped.planes[static_cast<std::size_t>(ch)];
    const Matrix<double> a = img.planes[static_cast<std::size_t>(ch)].block(0, 8, 8, 8);
    const Matrix<double> b = img.planes[static_cast<std::size_t>(ch)].block(8, 16, 8, 8);
    pl.block(0, 8, 8, 8) = b;
    pl.block(8, 16, 8, 8) = a;
  }
  const auto moved = encode_parts(tokenize(t, {swapped}, v), v);
  EXPECT_LT((moved.parts[0].value() - base.parts[0].value()).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Encoder, EmaEndpoints) {
  const EncoderConfig c = small_config();
  const auto live = init_encoder<double>(c, 10);
  const auto start = init_encoder<double>(c, 11);
  ShadowParams<double> s{start, 1.0};
  ema_update(s, live);
  bool same = true;
  detail::zip_params(s.params, start, [&](const std::string&, const Matrix<double>& a, const Matrix<double>& b) { same = same && a == b; });
  EXPECT_TRUE(same);
  s.momentum = 0.0;
  ema_update(s, live);
  detail::zip_params(s.params, live, [&](const std::string&, const Matrix<double>& a, const Matrix<double>& b) { same = same && a == b; });
  EXPECT_TRUE(same);
}

TEST(Encoder, EmaArithmetic) {
  const EncoderConfig c = small_config();
  ShadowParams<double> s{init_encoder<double>(c, 12), 0.9999};
  s.params.for_each([](const std::string&, Matrix<double>& m) { m.setOnes(); });
  ema_update(s, zeros_like(s.params));
  s.params.for_each([](const std::string&, const Matrix<double>& m) { EXPECT_DOUBLE_EQ(m(0, 0), 0.9999); });
  ShadowParams<double> bad{s.params, 1.5};
  EXPECT_THROW(ema_update(bad, s.params), std::invalid_argument);
}

TEST(Encoder, EmaRejectsStructureMismatch) {
  const EncoderConfig c = small_config();
  EncoderConfig deeper = c;
  deeper.depth = 2;
  ShadowParams<double> s{init_encoder<double>(c, 13), 0.5};
  EXPECT_THROW(ema_update(s, init_encoder<double>(deeper, 13)), ShapeError);
}

TEST(Encoder, NoGradientReachesShadowParameters) {
  const EncoderConfig c = small_config();
  const auto live = random_params(c, 14);
  const auto shadow = random_params(c, 15);
  EncoderParams<double> grads = zeros_like(live);
  Tape<double> t;
  const auto lv = bind(t, live, &grads);
  const auto sv = bind(t, shadow, nullptr);
  const std::vector<ImageD> imgs{random_image(16)};
  const Var<double> loss = add(sum(encode_class(tokenize(t, imgs, lv), lv)), sum(encode_class(tokenize(t, imgs, sv), sv)));
  t.backward(loss);
  sv.for_each([&](const std::string& name, const Var<double>& v) {
    EXPECT_FALSE(v.requires_grad()) << name;
    EXPECT_TRUE(t.grad(v).isZero(0.0)) << name;
  });
  double live_norm = 0;
  grads.for_each([&](const std::string&, const Matrix<double>& g) { live_norm += g.squaredNorm(); });
  EXPECT_GT(live_norm, 0.0);
}

TEST(Encoder, EncoderGradientMatchesFiniteDifferences) {
  EncoderConfig c = small_config();
  c.width = 8;
  c.final_norm = true;
  const auto p = random_params(c, 17);
  const std::vector<ImageD> imgs{random_image(18)};
  // Probe a few small tensors through the full class path.
  ParamMap probe{{"cls", p.cls}, {"patch_b", p.patch_b}, {"norm_g", p.norm_g}};
  const LossFn fn = [&](Tape<double>& t, const std::map<std::string, Var<double>>& v) {
    auto vars = bind(t, p, nullptr);
    vars.cls = v.at("cls");
    vars.patch_b = v.at("patch_b");
    vars.norm_g = v.at("norm_g");
    return sum(exp(encode_class(tokenize(t, imgs, vars), vars)));
  };
  EXPECT_LT(grad_check(fn, probe).max_rel_error, 1e-4);
}
