#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "mlmjepa/encoder.hpp"
#include "mlmjepa/error.hpp"

using namespace mlmjepa;
using namespace mlmjepa::enc;
using mlmjepa::seq::TokenBatch;
using mlmjepa::seq::TokenId;

namespace {

std::vector<TokenId> random_ids(std::mt19937_64& rng, std::size_t n, bool framed) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += seq::Vocabulary::kCanonical[rng() % 20];
  return seq::tokenize(s, {framed, 512});
}

std::vector<std::vector<TokenId>> one(std::vector<TokenId> row) { return {std::move(row)}; }

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("config validation") {
  auto c = EncoderConfig::esm2_like(2, 30, 4);
  CHECK_THROWS_AS(c.validate(), ConfigError);
  auto p = EncoderConfig::proteinbert2_like(2, 32, 4, 0);
  CHECK_THROWS_AS(p.validate(), ConfigError);
  CHECK_NOTHROW(EncoderConfig::proteinbert2_like(2, 32, 4).validate());
}

TEST_CASE("config round-trips through JSON") {
  const auto c = EncoderConfig::proteinbert2_like(3, 48, 4, 16);
  nlohmann::json j = c;
  const auto back = j.get<EncoderConfig>();
  CHECK(nlohmann::json(back) == j);

  const auto preset = nlohmann::json{{"preset", "proteinbert2"}, {"hidden_size", 32}}.get<EncoderConfig>();
  CHECK(preset.ffn == FfnKind::kSwiGlu);
  CHECK(preset.conv_stem_layers == 3);
  CHECK(preset.hidden_size == 32);
}

TEST_CASE("parameter count is a function of config and init is seeded") {
  const auto c = EncoderConfig::esm2_like(2, 32, 4);
  const auto a = EncoderParams::init(c, 1);
  const auto b = EncoderParams::init(c, 2);
  const auto a2 = EncoderParams::init(c, 1);
  CHECK(a.parameter_count() == b.parameter_count());
  const auto na = a.named();
  const auto na2 = a2.named();
  const auto nb = b.named();
  REQUIRE(na.size() == nb.size());
  bool differs = false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    CHECK(na[i].name == nb[i].name);
    CHECK(max_abs_diff(na[i].tensor.values(), na2[i].tensor.values()) == 0.0);
    differs = differs || max_abs_diff(na[i].tensor.values(), nb[i].tensor.values()) > 0.0;
  }
  CHECK(differs);

  const auto H = c.hidden_size, V = c.vocab_size, F = c.ffn_width();
  const std::size_t per_layer = 2 * 2 * H + 4 * (H * H + H) + (H * F + F) + (F * H + H);
  CHECK(a.parameter_count() == V * H + c.max_len * H + 2 * per_layer + 2 * H + H * V + V);
}

TEST_CASE("clone has independent storage") {
  auto p = EncoderParams::init(EncoderConfig::esm2_like(1, 16, 2), 3);
  auto q = p.clone();
  q.token_embedding.mutable_values()[0] += 1.0;
  CHECK(p.token_embedding.at(0) != q.token_embedding.at(0));
}

TEST_CASE("forward is batch-equivariant") {
  std::mt19937_64 rng(4);
  const auto params = EncoderParams::init(EncoderConfig::esm2_like(2, 32, 4), 5);
  std::vector<std::vector<TokenId>> rows{random_ids(rng, 9, true), random_ids(rng, 5, true),
                                         random_ids(rng, 12, true)};
  const auto b1 = seq::make_batch(rows);
  std::vector<std::vector<TokenId>> swapped{rows[2], rows[0], rows[1]};
  const auto b2 = seq::make_batch(swapped);
  grad::NoGradGuard ng;
  const auto h1 = forward(params, b1);
  const auto h2 = forward(params, b2);
  const std::size_t H = 32, L = b1.length;
  const std::size_t perm[3] = {1, 2, 0};  // row r of b1 is row perm[r] of b2
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t i = 0; i < rows[r].size(); ++i) {
      for (std::size_t j = 0; j < H; ++j) {
        CHECK(h1.states.at((r * L + i) * H + j) ==
              doctest::Approx(h2.states.at((perm[r] * L + i) * H + j)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("padding tail does not change real positions") {
  std::mt19937_64 rng(6);
  for (const auto& cfg :
       {EncoderConfig::esm2_like(2, 32, 4), EncoderConfig::proteinbert2_like(2, 32, 4, 3)}) {
    const auto params = EncoderParams::init(cfg, 7);
    const auto short_row = random_ids(rng, 10, cfg.add_cls_eos);
    const auto long_row = random_ids(rng, 25, cfg.add_cls_eos);
    grad::NoGradGuard ng;
    const auto alone = forward(params, seq::make_batch(one(short_row)));
    const auto padded = forward(params, seq::make_batch(std::vector{short_row, long_row}));
    const std::size_t H = cfg.hidden_size;
    for (std::size_t i = 0; i < short_row.size(); ++i) {
      for (std::size_t j = 0; j < H; ++j) {
        CHECK(std::abs(alone.states.at(i * H + j) - padded.states.at(i * H + j)) < 1e-10);
      }
    }
  }
}

TEST_CASE("ProteinBERT2-style encoder with window 256 runs") {
  const auto cfg = EncoderConfig::proteinbert2_like(2, 16, 2, 256);
  CHECK(cfg.layer_window(0) == 256);
  CHECK(cfg.layer_window(1) == 0);
  const auto params = EncoderParams::init(cfg, 8);
  CHECK(params.stem.size() == 3);
  std::mt19937_64 rng(9);
  const auto batch = seq::make_batch(std::vector{random_ids(rng, 300, false), random_ids(rng, 40, false)});
  grad::NoGradGuard ng;
  const auto h = forward(params, batch);
  CHECK(h.states.shape() == grad::Shape{2 * 300, 16});
  for (double v : h.states.values()) CHECK(std::isfinite(v));
}

TEST_CASE("local attention ignores tokens beyond the window") {
  auto cfg = EncoderConfig::proteinbert2_like(1, 16, 2, 3);
  cfg.conv_stem_layers = 0;
  const auto params = EncoderParams::init(cfg, 10);
  std::mt19937_64 rng(11);
  auto row = random_ids(rng, 20, false);
  const std::size_t p = 5;
  auto far = row;
  far[15] = far[15] == 5 ? 6 : 5;  // distance 10 > 3
  auto near = row;
  near[7] = near[7] == 5 ? 6 : 5;  // distance 2 <= 3
  grad::NoGradGuard ng;
  const auto h0 = forward(params, seq::make_batch(one(row)));
  const auto hf = forward(params, seq::make_batch(one(far)));
  const auto hn = forward(params, seq::make_batch(one(near)));
  double far_diff = 0.0, near_diff = 0.0;
  for (std::size_t j = 0; j < 16; ++j) {
    far_diff = std::max(far_diff, std::abs(h0.states.at(p * 16 + j) - hf.states.at(p * 16 + j)));
    near_diff = std::max(near_diff, std::abs(h0.states.at(p * 16 + j) - hn.states.at(p * 16 + j)));
  }
  CHECK(far_diff == 0.0);
  CHECK(near_diff > 1e-6);
}

TEST_CASE("rope attention logits depend only on relative offset") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> nd;
  const std::size_t H = 8, L = 32;
  std::vector<double> qv(H), kv(H);
  for (auto& v : qv) v = nd(rng);
  for (auto& v : kv) v = nd(rng);
  auto logit = [&](std::size_t pq, std::size_t pk) {
    std::vector<double> xq(L * H, 0.0), xk(L * H, 0.0);
    std::copy(qv.begin(), qv.end(), xq.begin() + static_cast<std::ptrdiff_t>(pq * H));
    std::copy(kv.begin(), kv.end(), xk.begin() + static_cast<std::ptrdiff_t>(pk * H));
    const auto rq = grad::rope(grad::Tensor::constant({L, H}, xq), 1, L, 1);
    const auto rk = grad::rope(grad::Tensor::constant({L, H}, xk), 1, L, 1);
    double s = 0.0;
    for (std::size_t j = 0; j < H; ++j) s += rq.at(pq * H + j) * rk.at(pk * H + j);
    return s;
  };
  const double base = logit(2, 5);
  for (std::size_t shift : {1, 7, 20}) CHECK(logit(2 + shift, 5 + shift) == doctest::Approx(base).epsilon(1e-12));
  CHECK(std::abs(logit(2, 6) - base) > 1e-6);
}

TEST_CASE("mean_pool hand cases") {
  // 3 real tokens + PAD, hidden width 2
  seq::TokenBatch b = seq::make_batch(std::vector<std::vector<TokenId>>{{5, 6, 7}, {5, 6, 7, 8}});
  std::vector<double> v{1, 2, 3, 4, 5, 9, 100, 100, /* row 1 */ 0, 0, 0, 0, 0, 0, 0, 0};
  Hidden h{grad::Tensor::constant({8, 2}, v), 2, 4};
  const auto m = mean_pool(h, b, 0);
  CHECK(m[0] == doctest::Approx(3.0));
  CHECK(m[1] == doctest::Approx(5.0));

  const auto l2 = mean_pool(h, b, 0, {true, false});
  CHECK(std::abs(std::hypot(l2[0], l2[1]) - 1.0) < 1e-9);

  seq::TokenBatch single = seq::make_batch(std::vector<std::vector<TokenId>>{{9}});
  Hidden hs{grad::Tensor::constant({1, 2}, {0.25, -4}), 1, 1};
  CHECK(mean_pool(hs, single, 0) == std::vector<double>{0.25, -4});

  seq::TokenBatch specials = seq::make_batch(std::vector<std::vector<TokenId>>{{2, 3}});
  Hidden hsp{grad::Tensor::constant({2, 2}, {1, 1, 1, 1}), 1, 2};
  CHECK_THROWS_AS(mean_pool(hsp, specials, 0), std::invalid_argument);
  CHECK(mean_pool(hsp, specials, 0, {false, true}) == std::vector<double>{1, 1});
}

TEST_CASE("non-finite activation names the layer") {
  auto params = EncoderParams::init(EncoderConfig::esm2_like(2, 16, 2), 13);
  params.layers[1].q.weight.mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
  std::mt19937_64 rng(14);
  const auto batch = seq::make_batch(one(random_ids(rng, 6, true)));
  try {
    forward(params, batch);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(e.where() == "layer 1");
  }
}

TEST_CASE("out-of-vocabulary ids are rejected") {
  const auto params = EncoderParams::init(EncoderConfig::esm2_like(1, 16, 2), 15);
  const auto batch = seq::make_batch(std::vector<std::vector<TokenId>>{{5, 99}});
  CHECK_THROWS_AS(forward(params, batch), std::invalid_argument);
}
