#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlmjepa/encoder.hpp"
#include "mlmjepa/seqdata.hpp"

namespace mlmjepa::obj {

using grad::Tensor;

enum class ObjectiveKind {
  kMlm,
  kMlmJepaMasked,
  kMlmJepaAllpos,
  kJepaOnly,
  kVicreg,  // reserved name; rejected by validate()
};
enum class LatentLoss { kCosine, kMse };
enum class TargetMode { kDetached, kEma };
enum class PositionSet { kMasked, kAllNonPad };

const char* name_of(ObjectiveKind k);
const char* name_of(LatentLoss k);
const char* name_of(TargetMode k);
ObjectiveKind parse_kind(const std::string& s);

struct SigregConfig {
  std::size_t n_projections = 256;
  std::uint64_t projection_seed = 0;
  bool resample_each_step = true;
  double eps = 1e-6;  // added to the per-projection variance
};

struct ObjectiveConfig {
  ObjectiveKind kind = ObjectiveKind::kMlmJepaMasked;
  double lambda = 0.45;
  double alpha = 1.0;
  std::optional<LatentLoss> latent_loss;  // unset: cosine for masked, mse otherwise
  TargetMode target_mode = TargetMode::kDetached;
  std::optional<double> ema_decay;  // required in ema mode
  SigregConfig sigreg;
  double mask_rate = 0.20;
  /// Adds CLS/EOS positions to the masked-position JEPA set.
  bool jepa_include_specials = false;

  LatentLoss resolved_latent_loss() const;
  double mlm_weight() const { return kind == ObjectiveKind::kJepaOnly ? 0.0 : 1.0; }
  bool uses_jepa() const { return kind != ObjectiveKind::kMlm; }
  PositionSet position_set() const;

  /// Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const ObjectiveConfig& c);
void from_json(const nlohmann::json& j, ObjectiveConfig& c);

/// down(silu(x·gate) ⊙ x·up), no biases.
struct PredictorParams {
  Tensor w_gate;  // [H, F]
  Tensor w_up;    // [H, F]
  Tensor w_down;  // [F, H]

  static PredictorParams init(std::size_t hidden, std::uint64_t seed);
  static std::size_t width(std::size_t hidden);

  Tensor operator()(const Tensor& x) const;
  std::vector<enc::NamedTensor> named() const;
  std::size_t parameter_count() const;
  PredictorParams clone() const;
};

struct LossBreakdown {
  Tensor total_tensor;  // differentiable
  double mlm_ce = 0.0;
  double jepa_latent = 0.0;
  double sigreg = 0.0;
  double total = 0.0;
  std::size_t n_masked_positions = 0;
  std::size_t n_target_positions = 0;
  bool mlm_skipped = false;
  bool jepa_skipped = false;
  bool sigreg_skipped = false;
  bool target_forward_ran = false;
};

/// Mean cross-entropy of `logits` rows against `targets`. Zero rows give a
/// constant 0.
Tensor mlm_cross_entropy(const Tensor& logits, std::span<const seq::TokenId> targets);

/// Encoder states of the clean batch with no gradient path. Pass the
/// student's own params for detached targets or the EMA copy for a teacher.
Tensor jepa_targets(const enc::EncoderParams& teacher, const seq::TokenBatch& clean);

/// ema ← decay·ema + (1−decay)·params, tensor by tensor.
void ema_update(enc::EncoderParams& ema, const enc::EncoderParams& params, double decay);

/// Flat batch positions the latent loss is taken over, ascending. The
/// all-position set already covers CLS/EOS; `include_specials` adds them to
/// the masked set.
std::vector<std::size_t> jepa_positions(PositionSet set, const seq::TokenBatch& batch,
                                        const seq::MaskPlan& plan, bool include_specials = false);

/// Both operands are layer-normalized (no gain) row by row before comparison.
/// Cosine form: mean(1 − cos); mse form: mean squared difference.
Tensor latent_loss(const Tensor& predictions, const Tensor& targets, LatentLoss form);

/// Unit-norm projection directions as columns of an [hidden, n] constant.
Tensor sigreg_directions(std::size_t hidden, std::size_t n, std::uint64_t seed);

/// Mean over directions of μ² + (σ−1)² + skew²/6 + (kurt−3)²/24, with the
/// moments of each projection taken over the N samples (rows).
/// Throws std::invalid_argument for fewer than two samples.
Tensor sigreg(const Tensor& samples, const Tensor& directions, double eps = 1e-6);

/// Mean over directions of the population std of the projected samples.
double mean_projection_std(const Tensor& samples, const Tensor& directions);

/// Seed of the directions used at `step`.
std::uint64_t sigreg_seed(const SigregConfig& c, std::uint64_t step);

struct StepContext {
  std::uint64_t step = 0;
  const enc::EncoderParams* ema_teacher = nullptr;  // ema mode only
};

LossBreakdown combined_loss(const ObjectiveConfig& config, const seq::TokenBatch& masked,
                            const seq::TokenBatch& clean, const seq::MaskPlan& plan,
                            const enc::EncoderParams& params, const PredictorParams& predictor,
                            const StepContext& context = {});

}  // namespace mlmjepa::obj
