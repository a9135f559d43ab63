#include <gtest/gtest.h>

#include <fstream>
#include <thread>

#include "support.hpp"
#include "unihoi/foundation_bridge.hpp"

using namespace unihoi;
using namespace unihoi::testing;
using M = Matrix<double>;

namespace {

// Independent recomputation of one patch's channel mean and deviation.
std::array<double, 6> oracle_patch_stats(const Image& img, int y0, int x0, int extent) {
  std::array<double, 6> out{};
  for (int c = 0; c < 3; ++c) {
    std::vector<double> v;
    for (int y = y0; y < y0 + extent; ++y)
      for (int x = x0; x < x0 + extent; ++x) v.push_back(img.at(y, x, c));
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double var = 0;
    for (double e : v) var += (e - m) * (e - m);
    out[c] = m;
    out[3 + c] = std::sqrt(var / v.size());
  }
  return out;
}

class CountingProvider final : public FoundationProvider {
 public:
  explicit CountingProvider(int n = 4, int d = 8, int rows_override = -1) : n_(n), d_(d), rows_(rows_override) {}
  std::string id() const override { return "counting"; }
  int num_tokens() const override { return n_; }
  int dim() const override { return d_; }
  int input_size() const override { return 16; }
  FoundationTokens encode(const Image& img, const std::string&) const override {
    ++calls;
    FoundationTokens t;
    t.tokens = FloatMatrix::Constant(rows_ >= 0 ? rows_ : n_, d_, img.data.empty() ? 0.f : img.data[0]);
    t.global = global_embedding(t.tokens);
    t.provider_id = id();
    return t;
  }
  mutable std::atomic<int> calls{0};

 private:
  int n_, d_, rows_;
};

struct Head {
  ModelConfig cfg;
  nn::ParamRegistry<double> reg;
  FoundationProjection<double> proj;
  HoPromptDecoder<double> hopd;
  explicit Head(ModelConfig c, int in_dim = 768)
      : cfg(c), reg(5), proj(reg, "fp", in_dim, c.d_v), hopd(reg, "hopd", c) {}
};

FoundationTokens random_tokens(int n, int d, std::uint64_t seed) {
  FoundationTokens t;
  SplitMix rng(seed);
  t.tokens.resize(n, d);
  for (Eigen::Index i = 0; i < t.tokens.size(); ++i) t.tokens.data()[i] = static_cast<float>(rng.uniform(-1, 1));
  t.global = global_embedding(t.tokens);
  t.provider_id = "rand";
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Providers

TEST(MockProvider, Blip2Shapes) {
  const MockFoundationProvider p;
  const Image img = resize_bilinear(random_image(40, 60, 1), 224, 224);
  EXPECT_EQ(p.image_tokens(img).rows(), 257);
  EXPECT_EQ(p.image_tokens(img).cols(), 1408);
  const auto t = provide_features(random_image(40, 60, 1), p, "x");
  EXPECT_EQ(t.tokens.rows(), 32);
  EXPECT_EQ(t.tokens.cols(), 768);
  EXPECT_EQ(t.global.size(), 768);
}

TEST(MockProvider, Deterministic) {
  const MockFoundationProvider a(3), b(3), c(4);
  const Image img = random_image(32, 32, 2);
  EXPECT_TRUE(provide_features(img, a) == provide_features(img, a));
  EXPECT_TRUE(provide_features(img, a) == provide_features(img, b));
  EXPECT_FALSE(provide_features(img, a).tokens == provide_features(img, c).tokens);
  EXPECT_EQ(a.state_checksum(), b.state_checksum());
  EXPECT_NE(a.state_checksum(), c.state_checksum());
}

TEST(MockProvider, PatchStatisticsMatchOracle) {
  const Image img = resize_bilinear(random_image(50, 70, 3), 224, 224);
  const FloatMatrix s = MockFoundationProvider::patch_statistics(img);
  ASSERT_EQ(s.rows(), 257);
  for (auto [row, y, x, e] : {std::tuple{0, 0, 0, 224}, std::tuple{1, 0, 0, 14}, std::tuple{1 + 16 * 3 + 5, 42, 70, 14},
                              std::tuple{256, 210, 210, 14}}) {
    const auto want = oracle_patch_stats(img, y, x, e);
    for (int k = 0; k < 6; ++k) EXPECT_NEAR(s(row, k), want[k], 1e-5) << row << " " << k;
    EXPECT_EQ(s(row, 6), 1.0f);
  }
}

TEST(MockProvider, ChangingOneBlockChangesTokens) {
  const MockFoundationProvider p;
  Image img = resize_bilinear(random_image(32, 32, 4), 224, 224);
  const auto before = p.encode(img, "");
  for (int y = 28; y < 42; ++y)
    for (int x = 56; x < 70; ++x) img.at(y, x, 0) += 0.5f;
  const auto after = p.encode(img, "");
  EXPECT_GT((after.tokens - before.tokens).norm(), 1e-4);
}

TEST(MockProvider, GlobalIsTokenMean) {
  const auto t = provide_features(random_image(32, 32, 5), MockFoundationProvider());
  const FloatRow mean = t.tokens.colwise().mean();
  EXPECT_TRUE(t.global.isApprox(mean, 1e-6f));
}

TEST(ProvideFeatures, Errors) {
  EXPECT_THROW(provide_features(Image(), MockFoundationProvider()), InvalidInput);
  EXPECT_THROW(provide_features(random_image(8, 8, 1), CountingProvider(4, 8, 3)), ProviderError);
}

TEST(TokenCache, RoundTrip) {
  const auto dir = temp_dir("tc");
  TokenCache cache("prov", 3, 5);
  cache.put("a", random_tokens(3, 5, 1));
  cache.put("b", random_tokens(3, 5, 2));
  cache.save((dir / "c.bin").string());
  const auto back = TokenCache::load((dir / "c.bin").string());
  EXPECT_EQ(back.size(), 2u);
  EXPECT_EQ(back.provider_id(), "prov");
  ASSERT_NE(back.find("a"), nullptr);
  EXPECT_EQ(back.find("a")->tokens, random_tokens(3, 5, 1).tokens);
  EXPECT_EQ(back.find("zz"), nullptr);
  EXPECT_THROW(cache.put("c", random_tokens(2, 5, 3)), ShapeError);
}

TEST(TokenCache, CorruptionIsDetected) {
  const auto dir = temp_dir("tc");
  TokenCache cache("prov", 2, 2);
  cache.put("a", random_tokens(2, 2, 1));
  const auto path = (dir / "c.bin").string();
  cache.save(path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  bytes[bytes.size() - 3] ^= 0x5a;
  std::ofstream(path, std::ios::binary) << bytes;
  EXPECT_THROW(TokenCache::load(path), ChecksumError);
  std::ofstream(path, std::ios::binary) << "UHFC";
  EXPECT_THROW(TokenCache::load(path), DataError);
  EXPECT_THROW(TokenCache::load((dir / "none.bin").string()), DataError);
}

TEST(CachedProvider, HitsMissesAndFallback) {
  auto fallback = std::make_shared<CountingProvider>();
  CachedFoundationProvider cached(TokenCache("counting", 4, 8), fallback);
  const Image img = random_image(8, 8, 1);
  const auto a = provide_features(img, cached, "img-1");
  const auto b = provide_features(img, cached, "img-1");
  EXPECT_TRUE(a == b);
  EXPECT_EQ(fallback->calls, 1);
  EXPECT_EQ(cached.size(), 1u);
  CachedFoundationProvider strict(TokenCache("counting", 4, 8));
  EXPECT_THROW(provide_features(img, strict, "img-1"), ProviderError);
  EXPECT_THROW(CachedFoundationProvider(TokenCache("x", 3, 8), fallback), ConfigError);
}

TEST(CachedProvider, ConcurrentReadersSeeOneValue) {
  auto fallback = std::make_shared<CountingProvider>();
  CachedFoundationProvider cached(TokenCache("counting", 4, 8), fallback);
  const Image img = random_image(8, 8, 1);
  std::vector<std::thread> pool;
  std::vector<FoundationTokens> got(16);
  for (int i = 0; i < 16; ++i) {
    pool.emplace_back([&, i] { got[i] = provide_features(img, cached, "k" + std::to_string(i % 4)); });
  }
  for (auto& t : pool) t.join();
  EXPECT_EQ(cached.size(), 4u);
  for (const auto& g : got) EXPECT_TRUE(g == got[0]);
}

// ---------------------------------------------------------------------------
// Projection and HOPD

TEST(Projection, ShapesAndAffinity) {
  ModelConfig c = tiny_config();
  c.d_v = 256;
  c.heads = 8;
  Head h(c);
  EXPECT_EQ(h.proj(random_tokens(32, 768, 1)).tokens.cols(), 256);
  FoundationTokens zero = random_tokens(32, 768, 1);
  zero.tokens.setZero();
  const M out = h.proj(zero).tokens.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i) EXPECT_EQ(out.row(i), h.reg.find("fp.bias").value().row(0));
  EXPECT_THROW(h.proj(random_tokens(32, 700, 1)), ShapeError);
}

TEST(Projection, RowPermutationCommutes) {
  Head h(tiny_config());
  const auto t = random_tokens(6, 768, 2);
  FoundationTokens p = t;
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(6);
  perm.indices() << 5, 3, 1, 0, 2, 4;
  p.tokens = perm * t.tokens;
  EXPECT_TRUE(h.proj(p).tokens.value().isApprox(perm * h.proj(t).tokens.value(), 1e-12));
}

TEST(Hopd, ShapeAndEvenLayerCrossAttention) {
  ModelConfig c = tiny_config();
  c.n_q = 64;
  c.hopd_layers = 5;
  Head h(c);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(h.hopd.layer_has_cross_attention(i), i % 2 == 0);
  HOSpatialTokens<double> prompts{Tensor<double>(M::Random(64, 32)), Tensor<double>(M::Random(64, 32))};
  const auto v = h.hopd(prompts, h.proj(random_tokens(32, 768, 3)));
  EXPECT_EQ(v.tokens.rows(), 64);
  EXPECT_EQ(v.tokens.cols(), 32);
}

TEST(Hopd, InvariantToFoundationRowOrder) {
  ModelConfig c = tiny_config();
  c.hopd_layers = 3;
  Head h(c);
  HOSpatialTokens<double> prompts{Tensor<double>(M::Random(4, 32)), Tensor<double>(M::Random(4, 32))};
  const auto t = random_tokens(10, 768, 4);
  const M base = h.hopd(prompts, h.proj(t)).tokens.value();
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(10);
    perm.setIdentity();
    std::shuffle(perm.indices().data(), perm.indices().data() + 10, rng);
    FoundationTokens p = t;
    p.tokens = perm * t.tokens;
    EXPECT_LE((h.hopd(prompts, h.proj(p)).tokens.value() - base).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Hopd, EqualPromptsAreTheQueryInput) {
  ModelConfig c = tiny_config();
  c.hopd_layers = 0;
  Head h(c);
  const M p = M::Random(4, 32);
  HOSpatialTokens<double> prompts{Tensor<double>(p), Tensor<double>(p)};
  EXPECT_EQ(prompts.pair_prompts().value(), p);
  EXPECT_EQ(h.hopd(prompts, h.proj(random_tokens(3, 768, 5))).tokens.value(), p);
}

TEST(Hopd, ZeroFoundationTokensIsInvalidInput) {
  Head h(tiny_config());
  HOSpatialTokens<double> prompts{Tensor<double>(M::Random(4, 32)), Tensor<double>(M::Random(4, 32))};
  EXPECT_THROW(h.hopd(prompts, {Tensor<double>(M(0, 32))}), InvalidInput);
}

TEST(Hopd, GradientsReachPromptsAndProjectionButNotTokens) {
  Head h(tiny_config());
  Tensor<double> ph(M::Random(4, 32), true), po(M::Random(4, 32), true);
  const auto projected = h.proj(random_tokens(5, 768, 6));
  const auto v = h.hopd({ph, po}, projected);
  ag::sum(v.tokens * v.tokens).backward();
  EXPECT_GT(ph.grad().norm(), 0);
  EXPECT_GT(h.reg.find("fp.weight").grad().norm(), 0);
  // The raw tokens enter as a constant leaf.
  const auto leaf = constant_tensor<double>(random_tokens(5, 768, 6).tokens);
  EXPECT_FALSE(leaf.requires_grad());
}

TEST(Hopd, ConcurrentForwardsAgree) {
  Head h(tiny_config());
  HOSpatialTokens<double> prompts{Tensor<double>(M::Random(4, 32)), Tensor<double>(M::Random(4, 32))};
  const auto projected = h.proj(random_tokens(5, 768, 7));
  const M want = h.hopd(prompts, projected).tokens.value();
  std::vector<M> got(8);
  std::vector<std::thread> pool;
  for (int i = 0; i < 8; ++i) pool.emplace_back([&, i] { got[i] = h.hopd(prompts, projected).tokens.value(); });
  for (auto& t : pool) t.join();
  for (const auto& g : got) EXPECT_EQ(g, want);
}
