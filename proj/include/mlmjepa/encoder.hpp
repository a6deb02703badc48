#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlmjepa/gradcore.hpp"
#include "mlmjepa/seqdata.hpp"

namespace mlmjepa::enc {

using grad::Tensor;

enum class FfnKind { kGeluMlp, kSwiGlu };
enum class NormKind { kLayerNorm, kRmsNorm };
enum class PositionKind { kLearned, kRope };
enum class AttentionPattern { kGlobal, kAlternatingLocalGlobal };

struct EncoderConfig {
  std::size_t n_layers = 2;
  std::size_t hidden_size = 64;
  std::size_t n_heads = 4;
  FfnKind ffn = FfnKind::kGeluMlp;
  NormKind norm = NormKind::kLayerNorm;
  PositionKind position = PositionKind::kLearned;
  AttentionPattern attention = AttentionPattern::kGlobal;
  std::size_t window = 256;          // local layers only
  std::size_t conv_stem_layers = 0;  // depthwise-separable, kernel 5
  std::size_t conv_kernel = 5;
  std::size_t max_len = 512;
  std::size_t vocab_size = seq::Vocabulary::size();
  bool add_cls_eos = true;
  bool pool_include_specials = false;
  double norm_eps = 1e-5;

  /// ESM2-style: learned positions, LayerNorm, GELU MLP, global attention.
  static EncoderConfig esm2_like(std::size_t layers, std::size_t hidden, std::size_t heads);
  /// ProteinBERT2-style: RoPE, RMSNorm, SwiGLU, alternating local/global
  /// attention with a 3-layer convolutional stem and no CLS/EOS framing.
  static EncoderConfig proteinbert2_like(std::size_t layers, std::size_t hidden,
                                         std::size_t heads, std::size_t window = 256);

  std::size_t head_dim() const { return hidden_size / n_heads; }
  std::size_t ffn_width() const;
  bool has_bias() const { return norm == NormKind::kLayerNorm; }
  /// Window used by layer `l`; 0 means global.
  std::size_t layer_window(std::size_t l) const;
  seq::TokenizerConfig tokenizer() const { return {add_cls_eos, max_len}; }

  /// Throws ConfigError on violated invariants.
  void validate() const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out] or undefined
  Tensor operator()(const Tensor& x) const;
};

struct Norm {
  Tensor gain;
  Tensor bias;  // LayerNorm only
  NormKind kind = NormKind::kLayerNorm;
  double eps = 1e-5;
  Tensor operator()(const Tensor& x) const;
};

struct ConvBlock {
  Tensor depthwise;  // [kernel, hidden]
  Linear pointwise;
};

struct EncoderLayer {
  Norm attn_norm;
  Linear q, k, v, o;
  Norm ffn_norm;
  Linear up;
  Linear gate;  // SwiGLU only
  Linear down;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct EncoderParams {
  EncoderConfig config;
  Tensor token_embedding;     // [vocab, hidden]
  Tensor position_embedding;  // [max_len, hidden], learned positions only
  std::vector<ConvBlock> stem;
  std::vector<EncoderLayer> layers;
  Norm final_norm;
  Linear lm_head;  // hidden -> vocab

  /// Deterministic initialization from `seed`.
  static EncoderParams init(const EncoderConfig& config, std::uint64_t seed);

  /// Every trainable tensor in a fixed order with stable names.
  std::vector<NamedTensor> named() const;
  std::size_t parameter_count() const;
  /// Deep copy with independent storage (used for EMA teachers).
  EncoderParams clone() const;
};

/// Hidden states laid out as [batch*length, hidden].
struct Hidden {
  Tensor states;
  std::size_t batch = 0;
  std::size_t length = 0;
};

/// Runs the encoder; PAD positions neither attend nor are attended to.
/// A non-finite activation raises NumericalError naming the layer.
Hidden forward(const EncoderParams& params, const seq::TokenBatch& batch);

/// MLM logits for selected rows of the hidden states.
Tensor mlm_logits(const EncoderParams& params, const Tensor& rows);

struct PoolOptions {
  bool l2_normalize = false;
  bool include_specials = false;
};

/// Mean over the real (non-PAD, and by default non-special) positions of
/// row `b`. Throws std::invalid_argument when nothing is left to pool.
std::vector<double> mean_pool(const Hidden& hidden, const seq::TokenBatch& batch, std::size_t b,
                              const PoolOptions& options = {});

/// Group a parameter name belongs to: "embedding", "stem", "layers.N",
/// "final_norm" or "lm_head".
std::string parameter_group(const std::string& name);

}  // namespace mlmjepa::enc
