#include "mlmjepa/objectives.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "mlmjepa/error.hpp"

namespace mlmjepa::obj {

namespace g = mlmjepa::grad;

const char* name_of(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::kMlm: return "mlm";
    case ObjectiveKind::kMlmJepaMasked: return "mlm_jepa_masked";
    case ObjectiveKind::kMlmJepaAllpos: return "mlm_jepa_allpos";
    case ObjectiveKind::kJepaOnly: return "jepa_only";
    case ObjectiveKind::kVicreg: return "vicreg";
  }
  return "?";
}

const char* name_of(LatentLoss k) { return k == LatentLoss::kCosine ? "cosine" : "mse"; }
const char* name_of(TargetMode k) { return k == TargetMode::kDetached ? "detached" : "ema"; }

ObjectiveKind parse_kind(const std::string& s) {
  for (auto k : {ObjectiveKind::kMlm, ObjectiveKind::kMlmJepaMasked, ObjectiveKind::kMlmJepaAllpos,
                 ObjectiveKind::kJepaOnly, ObjectiveKind::kVicreg}) {
    if (s == name_of(k)) return k;
  }
  throw ConfigError("objective.kind: unknown value '" + s + "'");
}

LatentLoss ObjectiveConfig::resolved_latent_loss() const {
  if (latent_loss) return *latent_loss;
  return kind == ObjectiveKind::kMlmJepaMasked ? LatentLoss::kCosine : LatentLoss::kMse;
}

PositionSet ObjectiveConfig::position_set() const {
  return kind == ObjectiveKind::kMlmJepaMasked ? PositionSet::kMasked : PositionSet::kAllNonPad;
}

void ObjectiveConfig::validate() const {
  if (kind == ObjectiveKind::kVicreg) {
    throw ConfigError("objective.kind: vicreg is reserved and not implemented");
  }
  if (!(lambda >= 0.0) || !(alpha >= 0.0)) throw ConfigError("objective: lambda and alpha must be >= 0");
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ConfigError("objective.mask_rate must be in (0, 1)");
  if (sigreg.n_projections == 0) throw ConfigError("objective.sigreg.n_projections must be >= 1");
  if (!(sigreg.eps > 0.0)) throw ConfigError("objective.sigreg.eps must be > 0");
  if (target_mode == TargetMode::kEma) {
    if (!ema_decay) throw ConfigError("objective: ema target mode needs ema_decay");
    if (!(*ema_decay >= 0.0 && *ema_decay <= 1.0)) throw ConfigError("objective.ema_decay must be in [0, 1]");
  }
}

void to_json(nlohmann::json& j, const ObjectiveConfig& c) {
  j = nlohmann::json{{"kind", name_of(c.kind)},
                     {"lambda", c.lambda},
                     {"alpha", c.alpha},
                     {"latent_loss", name_of(c.resolved_latent_loss())},
                     {"target_mode", name_of(c.target_mode)},
                     {"mask_rate", c.mask_rate},
                     {"jepa_include_specials", c.jepa_include_specials},
                     {"sigreg",
                      {{"n_projections", c.sigreg.n_projections},
                       {"projection_seed", c.sigreg.projection_seed},
                       {"resample_each_step", c.sigreg.resample_each_step},
                       {"eps", c.sigreg.eps}}}};
  if (c.ema_decay) j["ema_decay"] = *c.ema_decay;
}

void from_json(const nlohmann::json& j, ObjectiveConfig& c) {
  ObjectiveConfig d;
  c = d;
  if (j.contains("kind")) c.kind = parse_kind(j.at("kind").get<std::string>());
  c.lambda = j.value("lambda", d.lambda);
  c.alpha = j.value("alpha", d.alpha);
  if (j.contains("latent_loss")) {
    const auto s = j.at("latent_loss").get<std::string>();
    if (s == "cosine") {
      c.latent_loss = LatentLoss::kCosine;
    } else if (s == "mse") {
      c.latent_loss = LatentLoss::kMse;
    } else {
      throw ConfigError("objective.latent_loss: unknown value '" + s + "'");
    }
  }
  if (j.contains("target_mode")) {
    const auto s = j.at("target_mode").get<std::string>();
    if (s == "detached") {
      c.target_mode = TargetMode::kDetached;
    } else if (s == "ema") {
      c.target_mode = TargetMode::kEma;
    } else {
      throw ConfigError("objective.target_mode: unknown value '" + s + "'");
    }
  }
  if (j.contains("ema_decay")) c.ema_decay = j.at("ema_decay").get<double>();
  c.mask_rate = j.value("mask_rate", d.mask_rate);
  c.jepa_include_specials = j.value("jepa_include_specials", d.jepa_include_specials);
  if (j.contains("sigreg")) {
    const auto& s = j.at("sigreg");
    c.sigreg.n_projections = s.value("n_projections", d.sigreg.n_projections);
    c.sigreg.projection_seed = s.value("projection_seed", d.sigreg.projection_seed);
    c.sigreg.resample_each_step = s.value("resample_each_step", d.sigreg.resample_each_step);
    c.sigreg.eps = s.value("eps", d.sigreg.eps);
  }
}

// --- predictor -------------------------------------------------------------

std::size_t PredictorParams::width(std::size_t hidden) {
  return static_cast<std::size_t>(std::ceil(static_cast<double>(hidden) * 8.0 / 3.0));
}

PredictorParams PredictorParams::init(std::size_t hidden, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto normal = [&](g::Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(g::element_count(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor::parameter(std::move(shape), std::move(v));
  };
  const std::size_t F = width(hidden);
  PredictorParams p;
  p.w_gate = normal({hidden, F}, 1.0 / std::sqrt(static_cast<double>(hidden)));
  p.w_up = normal({hidden, F}, 1.0 / std::sqrt(static_cast<double>(hidden)));
  p.w_down = normal({F, hidden}, 1.0 / std::sqrt(static_cast<double>(F)));
  return p;
}

Tensor PredictorParams::operator()(const Tensor& x) const {
  return g::matmul(g::mul(g::silu(g::matmul(x, w_gate)), g::matmul(x, w_up)), w_down);
}

std::vector<enc::NamedTensor> PredictorParams::named() const {
  return {{"predictor.gate", w_gate}, {"predictor.up", w_up}, {"predictor.down", w_down}};
}

std::size_t PredictorParams::parameter_count() const {
  return w_gate.size() + w_up.size() + w_down.size();
}

PredictorParams PredictorParams::clone() const {
  auto copy = [](const Tensor& t) {
    return Tensor::parameter(t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
  };
  return {copy(w_gate), copy(w_up), copy(w_down)};
}

// --- components ------------------------------------------------------------

Tensor mlm_cross_entropy(const Tensor& logits, std::span<const seq::TokenId> targets) {
  if (targets.empty()) return Tensor::scalar(0.0);
  if (logits.rows() != targets.size()) {
    throw ShapeError("mlm_cross_entropy: " + std::to_string(logits.rows()) + " logit rows for " +
                     std::to_string(targets.size()) + " targets");
  }
  std::vector<std::size_t> t(targets.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= logits.cols()) {
      throw std::invalid_argument("mlm_cross_entropy: target id outside vocabulary");
    }
    t[i] = static_cast<std::size_t>(targets[i]);
  }
  return g::softmax_cross_entropy(logits, t);
}

Tensor jepa_targets(const enc::EncoderParams& teacher, const seq::TokenBatch& clean) {
  g::NoGradGuard ng;
  return g::detach(enc::forward(teacher, clean).states);
}

void ema_update(enc::EncoderParams& ema, const enc::EncoderParams& params, double decay) {
  const auto dst = ema.named();
  const auto src = params.named();
  if (dst.size() != src.size()) throw ShapeError("ema_update: parameter lists differ");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    Tensor t = dst[i].tensor;
    auto out = t.mutable_values();
    const auto in = src[i].tensor.values();
    if (out.size() != in.size()) throw ShapeError("ema_update: size mismatch at " + dst[i].name);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = decay * out[k] + (1.0 - decay) * in[k];
  }
}

std::vector<std::size_t> jepa_positions(PositionSet set, const seq::TokenBatch& batch,
                                        const seq::MaskPlan& plan, bool include_specials) {
  if (set == PositionSet::kMasked) {
    if (!include_specials) return plan.positions;
    std::vector<std::size_t> out = plan.positions;
    for (std::size_t p = 0; p < batch.ids.size(); ++p) {
      const auto id = batch.ids[p];
      if (batch.attention[p] && (id == seq::Vocabulary::kCls || id == seq::Vocabulary::kEos)) out.push_back(p);
    }
    std::sort(out.begin(), out.end());
    return out;
  }
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p < batch.attention.size(); ++p) {
    if (batch.attention[p]) out.push_back(p);
  }
  return out;
}

Tensor latent_loss(const Tensor& predictions, const Tensor& targets, LatentLoss form) {
  if (predictions.shape() != targets.shape()) {
    throw ShapeError("latent_loss: " + g::shape_string(predictions.shape()) + " vs " +
                     g::shape_string(targets.shape()));
  }
  const Tensor p = g::layer_norm(predictions);
  const Tensor t = g::layer_norm(targets);
  if (form == LatentLoss::kMse) return g::mean(g::square(g::sub(p, t)));
  const Tensor dot = g::sum(g::mul(p, t), 1);
  const Tensor np = g::sqrt(g::add_scalar(g::sum(g::square(p), 1), 1e-12));
  const Tensor nt = g::sqrt(g::add_scalar(g::sum(g::square(t), 1), 1e-12));
  const Tensor cos = g::div(dot, g::mul(np, nt));
  return g::mean(g::add_scalar(g::neg(cos), 1.0));
}

Tensor sigreg_directions(std::size_t hidden, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  std::vector<double> u(hidden * n);
  for (std::size_t k = 0; k < n; ++k) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (std::size_t j = 0; j < hidden; ++j) {
        const double v = dist(rng);
        u[j * n + k] = v;
        norm += v * v;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < hidden; ++j) u[j * n + k] /= norm;
  }
  return Tensor::constant({hidden, n}, std::move(u));
}

Tensor sigreg(const Tensor& samples, const Tensor& directions, double eps) {
  if (samples.rows() < 2) {
    throw std::invalid_argument("sigreg: need at least 2 samples, got " +
                                std::to_string(samples.rows()));
  }
  const Tensor z = g::matmul(samples, directions);  // [N, K]
  const Tensor mu = g::mean(z, 0);
  const Tensor sd = g::sqrt(g::add_scalar(g::variance(z, 0), eps));
  const Tensor s = g::div(g::sub(z, mu), sd);
  const Tensor s2 = g::square(s);
  const Tensor skew = g::mean(g::mul(s2, s), 0);
  const Tensor kurt = g::add_scalar(g::mean(g::square(s2), 0), -3.0);
  Tensor penalty = g::add(g::square(mu), g::square(g::add_scalar(sd, -1.0)));
  penalty = g::add(penalty, g::scale(g::square(skew), 1.0 / 6.0));
  penalty = g::add(penalty, g::scale(g::square(kurt), 1.0 / 24.0));
  return g::mean(penalty);
}

double mean_projection_std(const Tensor& samples, const Tensor& directions) {
  g::NoGradGuard ng;
  const Tensor sd = g::sqrt(g::variance(g::matmul(samples, directions), 0));
  return g::mean(sd).item();
}

std::uint64_t sigreg_seed(const SigregConfig& c, std::uint64_t step) {
  return c.resample_each_step ? seq::mix_seed(c.projection_seed, step) : c.projection_seed;
}

// --- combined --------------------------------------------------------------

LossBreakdown combined_loss(const ObjectiveConfig& config, const seq::TokenBatch& masked,
                            const seq::TokenBatch& clean, const seq::MaskPlan& plan,
                            const enc::EncoderParams& params, const PredictorParams& predictor,
                            const StepContext& context) {
  config.validate();
  if (masked.batch != clean.batch || masked.length != clean.length ||
      masked.attention != clean.attention || plan.corrupted != masked.ids) {
    throw std::invalid_argument("combined_loss: masked batch is not the plan applied to clean");
  }

  LossBreakdown out;
  out.n_masked_positions = plan.positions.size();
  const enc::Hidden student = enc::forward(params, masked);

  Tensor total = Tensor::scalar(0.0);
  if (config.mlm_weight() > 0.0) {
    if (plan.positions.empty()) {
      out.mlm_skipped = true;
    } else {
      const Tensor rows = g::gather_rows(student.states, plan.positions);
      const Tensor ce = mlm_cross_entropy(enc::mlm_logits(params, rows), plan.originals);
      out.mlm_ce = ce.item();
      total = g::add(total, g::scale(ce, config.mlm_weight()));
    }
  }

  if (config.uses_jepa()) {
    const auto positions = jepa_positions(config.position_set(), clean, plan, config.jepa_include_specials);
    out.n_target_positions = positions.size();
    if (positions.empty()) {
      out.jepa_skipped = true;
      out.sigreg_skipped = true;
    } else {
      const enc::EncoderParams* teacher = &params;
      if (config.target_mode == TargetMode::kEma) {
        if (!context.ema_teacher) throw ConfigError("combined_loss: ema mode without a teacher");
        teacher = context.ema_teacher;
      }
      const Tensor targets = jepa_targets(*teacher, clean);
      out.target_forward_ran = true;
      const Tensor pred = predictor(g::gather_rows(student.states, positions));
      const Tensor tgt = g::gather_rows(targets, positions);
      const Tensor jl = latent_loss(pred, tgt, config.resolved_latent_loss());
      out.jepa_latent = jl.item();
      total = g::add(total, g::scale(jl, config.lambda));

      if (positions.size() < 2) {
        out.sigreg_skipped = true;
      } else {
        const Tensor dirs = sigreg_directions(pred.cols(), config.sigreg.n_projections,
                                              sigreg_seed(config.sigreg, context.step));
        const Tensor sr = sigreg(g::layer_norm(pred), dirs, config.sigreg.eps);
        out.sigreg = sr.item();
        total = g::add(total, g::scale(sr, config.alpha));
      }
    }
  }

  out.total_tensor = total;
  out.total = total.item();
  if (!std::isfinite(out.total)) throw NumericalError("combined_loss", "non-finite total loss");
  return out;
}

}  // namespace mlmjepa::obj
