#include "mlmjepa/encoder.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "mlmjepa/error.hpp"

namespace mlmjepa::enc {

namespace {

using grad::Shape;

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor normal(Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(grad::element_count(shape));
    for (auto& x : v) x = dist(rng_);
    return Tensor::parameter(std::move(shape), std::move(v));
  }

  Tensor filled(Shape shape, double value) {
    return Tensor::parameter(shape, std::vector<double>(grad::element_count(shape), value));
  }

  Linear linear(std::size_t in, std::size_t out, bool bias, double gain = 1.0) {
    Linear l;
    l.weight = normal({in, out}, gain / std::sqrt(static_cast<double>(in)));
    if (bias) l.bias = filled({out}, 0.0);
    return l;
  }

  Norm norm(const EncoderConfig& c) {
    Norm n;
    n.kind = c.norm;
    n.eps = c.norm_eps;
    n.gain = filled({c.hidden_size}, 1.0);
    if (c.norm == NormKind::kLayerNorm) n.bias = filled({c.hidden_size}, 0.0);
    return n;
  }

 private:
  std::mt19937_64 rng_;
};

// Visits every tensor slot in a fixed order.
template <class Params, class Fn>
void visit(Params& p, Fn&& fn) {
  auto lin = [&](const std::string& prefix, auto& l) {
    fn(prefix + ".weight", l.weight);
    if (l.bias.defined()) fn(prefix + ".bias", l.bias);
  };
  auto nrm = [&](const std::string& prefix, auto& n) {
    fn(prefix + ".gain", n.gain);
    if (n.bias.defined()) fn(prefix + ".bias", n.bias);
  };
  fn("embedding.token", p.token_embedding);
  if (p.position_embedding.defined()) fn("embedding.position", p.position_embedding);
  for (std::size_t i = 0; i < p.stem.size(); ++i) {
    const std::string prefix = "stem." + std::to_string(i);
    fn(prefix + ".depthwise", p.stem[i].depthwise);
    lin(prefix + ".pointwise", p.stem[i].pointwise);
  }
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const std::string prefix = "layers." + std::to_string(i);
    auto& l = p.layers[i];
    nrm(prefix + ".attn_norm", l.attn_norm);
    lin(prefix + ".attn.q", l.q);
    lin(prefix + ".attn.k", l.k);
    lin(prefix + ".attn.v", l.v);
    lin(prefix + ".attn.o", l.o);
    nrm(prefix + ".ffn_norm", l.ffn_norm);
    lin(prefix + ".ffn.up", l.up);
    if (l.gate.weight.defined()) lin(prefix + ".ffn.gate", l.gate);
    lin(prefix + ".ffn.down", l.down);
  }
  nrm("final_norm", p.final_norm);
  lin("lm_head", p.lm_head);
}

const char* name_of(FfnKind k) { return k == FfnKind::kSwiGlu ? "swiglu" : "gelu_mlp"; }
const char* name_of(NormKind k) { return k == NormKind::kRmsNorm ? "rms_norm" : "layer_norm"; }
const char* name_of(PositionKind k) { return k == PositionKind::kRope ? "rope" : "learned"; }
const char* name_of(AttentionPattern k) {
  return k == AttentionPattern::kAlternatingLocalGlobal ? "alternating_local_global" : "global";
}

template <class E>
E parse_enum(const std::string& s, std::initializer_list<E> options, const char* field) {
  for (E e : options) {
    if (s == name_of(e)) return e;
  }
  throw ConfigError(std::string("encoder.") + field + ": unknown value '" + s + "'");
}

}  // namespace

// --- config ----------------------------------------------------------------

EncoderConfig EncoderConfig::esm2_like(std::size_t layers, std::size_t hidden, std::size_t heads) {
  EncoderConfig c;
  c.n_layers = layers;
  c.hidden_size = hidden;
  c.n_heads = heads;
  return c;
}

EncoderConfig EncoderConfig::proteinbert2_like(std::size_t layers, std::size_t hidden,
                                               std::size_t heads, std::size_t window) {
  EncoderConfig c;
  c.n_layers = layers;
  c.hidden_size = hidden;
  c.n_heads = heads;
  c.ffn = FfnKind::kSwiGlu;
  c.norm = NormKind::kRmsNorm;
  c.position = PositionKind::kRope;
  c.attention = AttentionPattern::kAlternatingLocalGlobal;
  c.window = window;
  c.conv_stem_layers = 3;
  c.add_cls_eos = false;
  return c;
}

std::size_t EncoderConfig::ffn_width() const {
  if (ffn == FfnKind::kSwiGlu) {
    return static_cast<std::size_t>(std::ceil(static_cast<double>(hidden_size) * 8.0 / 3.0));
  }
  return 4 * hidden_size;
}

std::size_t EncoderConfig::layer_window(std::size_t l) const {
  if (attention == AttentionPattern::kAlternatingLocalGlobal && l % 2 == 0) return window;
  return 0;
}

void EncoderConfig::validate() const {
  if (n_layers == 0 || hidden_size == 0 || n_heads == 0) {
    throw ConfigError("encoder: n_layers, hidden_size and n_heads must be positive");
  }
  if (hidden_size % n_heads != 0) {
    throw ConfigError("encoder: hidden_size " + std::to_string(hidden_size) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (position == PositionKind::kRope && head_dim() % 2 != 0) {
    throw ConfigError("encoder: rope needs an even head dimension");
  }
  if (attention == AttentionPattern::kAlternatingLocalGlobal && window == 0) {
    throw ConfigError("encoder: local attention window must be > 0");
  }
  if (conv_stem_layers > 0 && conv_kernel % 2 == 0) {
    throw ConfigError("encoder: conv_kernel must be odd");
  }
  if (vocab_size < seq::Vocabulary::size()) throw ConfigError("encoder: vocab_size too small");
  if (max_len < 3) throw ConfigError("encoder: max_len too small");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},
                     {"hidden_size", c.hidden_size},
                     {"n_heads", c.n_heads},
                     {"ffn", name_of(c.ffn)},
                     {"norm", name_of(c.norm)},
                     {"position", name_of(c.position)},
                     {"attention", name_of(c.attention)},
                     {"window", c.window},
                     {"conv_stem_layers", c.conv_stem_layers},
                     {"conv_kernel", c.conv_kernel},
                     {"max_len", c.max_len},
                     {"vocab_size", c.vocab_size},
                     {"add_cls_eos", c.add_cls_eos},
                     {"pool_include_specials", c.pool_include_specials},
                     {"norm_eps", c.norm_eps}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d;
  if (j.contains("preset")) {
    const auto preset = j.at("preset").get<std::string>();
    const auto layers = j.value("n_layers", d.n_layers);
    const auto hidden = j.value("hidden_size", d.hidden_size);
    const auto heads = j.value("n_heads", d.n_heads);
    if (preset == "esm2") {
      d = EncoderConfig::esm2_like(layers, hidden, heads);
    } else if (preset == "proteinbert2") {
      d = EncoderConfig::proteinbert2_like(layers, hidden, heads);
    } else {
      throw ConfigError("encoder.preset: unknown value '" + preset + "'");
    }
  }
  c = d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.hidden_size = j.value("hidden_size", d.hidden_size);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.ffn = parse_enum(j.value("ffn", std::string(name_of(d.ffn))),
                     {FfnKind::kGeluMlp, FfnKind::kSwiGlu}, "ffn");
  c.norm = parse_enum(j.value("norm", std::string(name_of(d.norm))),
                      {NormKind::kLayerNorm, NormKind::kRmsNorm}, "norm");
  c.position = parse_enum(j.value("position", std::string(name_of(d.position))),
                          {PositionKind::kLearned, PositionKind::kRope}, "position");
  c.attention = parse_enum(j.value("attention", std::string(name_of(d.attention))),
                           {AttentionPattern::kGlobal, AttentionPattern::kAlternatingLocalGlobal},
                           "attention");
  c.window = j.value("window", d.window);
  c.conv_stem_layers = j.value("conv_stem_layers", d.conv_stem_layers);
  c.conv_kernel = j.value("conv_kernel", d.conv_kernel);
  c.max_len = j.value("max_len", d.max_len);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.add_cls_eos = j.value("add_cls_eos", d.add_cls_eos);
  c.pool_include_specials = j.value("pool_include_specials", d.pool_include_specials);
  c.norm_eps = j.value("norm_eps", d.norm_eps);
}

// --- modules ---------------------------------------------------------------

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = grad::matmul(x, weight);
  return bias.defined() ? grad::add(y, bias) : y;
}

Tensor Norm::operator()(const Tensor& x) const {
  if (kind == NormKind::kRmsNorm) return grad::rms_norm(x, gain, eps);
  Tensor y = grad::mul(grad::layer_norm(x, eps), gain);
  return bias.defined() ? grad::add(y, bias) : y;
}

EncoderParams EncoderParams::init(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  Initializer init(seed);
  const std::size_t H = config.hidden_size;
  const bool bias = config.has_bias();
  // Residual branches are scaled down with depth.
  const double out_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));

  EncoderParams p;
  p.config = config;
  p.token_embedding = init.normal({config.vocab_size, H}, 1.0);
  if (config.position == PositionKind::kLearned) {
    p.position_embedding = init.normal({config.max_len, H}, 0.1);
  }
  for (std::size_t i = 0; i < config.conv_stem_layers; ++i) {
    ConvBlock b;
    b.depthwise = init.normal({config.conv_kernel, H},
                              1.0 / std::sqrt(static_cast<double>(config.conv_kernel)));
    b.pointwise = init.linear(H, H, bias, 0.5);
    p.stem.push_back(std::move(b));
  }
  const std::size_t F = config.ffn_width();
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    EncoderLayer l;
    l.attn_norm = init.norm(config);
    l.q = init.linear(H, H, bias);
    l.k = init.linear(H, H, bias);
    l.v = init.linear(H, H, bias);
    l.o = init.linear(H, H, bias, out_gain);
    l.ffn_norm = init.norm(config);
    l.up = init.linear(H, F, bias);
    if (config.ffn == FfnKind::kSwiGlu) l.gate = init.linear(H, F, bias);
    l.down = init.linear(F, H, bias, out_gain);
    p.layers.push_back(std::move(l));
  }
  p.final_norm = init.norm(config);
  p.lm_head = init.linear(H, config.vocab_size, true);
  return p;
}

std::vector<NamedTensor> EncoderParams::named() const {
  std::vector<NamedTensor> out;
  visit(*this, [&](const std::string& name, const Tensor& t) { out.push_back({name, t}); });
  return out;
}

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& nt : named()) n += nt.tensor.size();
  return n;
}

EncoderParams EncoderParams::clone() const {
  EncoderParams copy = *this;
  visit(copy, [](const std::string&, Tensor& t) {
    t = Tensor::parameter(t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
  });
  return copy;
}

std::string parameter_group(const std::string& name) {
  if (name.rfind("layers.", 0) == 0) return name.substr(0, name.find('.', 7));
  return name.substr(0, name.find('.'));
}

// --- forward ---------------------------------------------------------------

Hidden forward(const EncoderParams& params, const seq::TokenBatch& batch) {
  const EncoderConfig& c = params.config;
  const std::size_t B = batch.batch;
  const std::size_t L = batch.length;
  if (L > c.max_len) {
    throw std::invalid_argument("forward: batch length " + std::to_string(L) + " exceeds max_len");
  }
  std::vector<std::size_t> ids(batch.ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (batch.ids[i] < 0 || static_cast<std::size_t>(batch.ids[i]) >= c.vocab_size) {
      throw std::invalid_argument("forward: token id " + std::to_string(batch.ids[i]) +
                                  " outside vocabulary");
    }
    ids[i] = static_cast<std::size_t>(batch.ids[i]);
  }

  auto stage = [](const std::string& where, auto&& fn) {
    try {
      return fn();
    } catch (const NumericalError& e) {
      throw NumericalError(where, "non-finite activation in " + where + " (" + e.what() + ")");
    }
  };

  Tensor x = stage("embedding", [&] {
    Tensor e = grad::gather_rows(params.token_embedding, ids);
    if (params.position_embedding.defined()) {
      std::vector<std::size_t> pos(B * L);
      for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % L;
      e = grad::add(e, grad::gather_rows(params.position_embedding, pos));
    }
    return e;
  });

  std::vector<double> mask_values(batch.attention.begin(), batch.attention.end());
  const Tensor mask = Tensor::constant({B * L, 1}, std::move(mask_values));

  for (std::size_t i = 0; i < params.stem.size(); ++i) {
    x = stage("stem " + std::to_string(i), [&] {
      const auto& blk = params.stem[i];
      Tensor h = grad::depthwise_conv1d(grad::mul(x, mask), blk.depthwise, B, L);
      h = blk.pointwise(grad::gelu(h));
      return grad::add(x, h);
    });
  }

  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    const auto& layer = params.layers[li];
    x = stage("layer " + std::to_string(li), [&] {
      Tensor h = layer.attn_norm(x);
      Tensor q = layer.q(h);
      Tensor k = layer.k(h);
      Tensor v = layer.v(h);
      if (c.position == PositionKind::kRope) {
        q = grad::rope(q, B, L, c.n_heads);
        k = grad::rope(k, B, L, c.n_heads);
      }
      grad::AttentionLayout layout{B, L, c.n_heads, batch.attention, c.layer_window(li)};
      Tensor y = grad::add(x, layer.o(grad::attention(q, k, v, layout)));

      h = layer.ffn_norm(y);
      Tensor f = c.ffn == FfnKind::kSwiGlu
                     ? grad::mul(grad::silu(layer.gate(h)), layer.up(h))
                     : grad::gelu(layer.up(h));
      return grad::add(y, layer.down(f));
    });
  }

  x = stage("final_norm", [&] { return params.final_norm(x); });
  return Hidden{x, B, L};
}

Tensor mlm_logits(const EncoderParams& params, const Tensor& rows) { return params.lm_head(rows); }

std::vector<double> mean_pool(const Hidden& hidden, const seq::TokenBatch& batch, std::size_t b,
                              const PoolOptions& options) {
  if (b >= hidden.batch) throw std::out_of_range("mean_pool: row out of range");
  const std::size_t H = hidden.states.cols();
  const auto hv = hidden.states.values();
  std::vector<double> out(H, 0.0);
  std::size_t n = 0;
  for (std::size_t i = 0; i < hidden.length; ++i) {
    const std::size_t p = b * hidden.length + i;
    if (!batch.attention[p]) continue;
    const auto id = batch.ids[p];
    if (!options.include_specials &&
        (id == seq::Vocabulary::kCls || id == seq::Vocabulary::kEos)) {
      continue;
    }
    for (std::size_t j = 0; j < H; ++j) out[j] += hv[p * H + j];
    ++n;
  }
  if (n == 0) throw std::invalid_argument("mean_pool: row has no poolable tokens");
  for (auto& v : out) v /= static_cast<double>(n);
  if (options.l2_normalize) {
    double norm = 0.0;
    for (double v : out) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw NumericalError("mean_pool", "zero-norm embedding cannot be normalized");
    for (auto& v : out) v /= norm;
  }
  return out;
}

}  // namespace mlmjepa::enc
