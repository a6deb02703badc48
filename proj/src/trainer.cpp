#include "mlmjepa/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "mlmjepa/error.hpp"

namespace mlmjepa::train {

namespace fs = std::filesystem;

// --- optimizer -------------------------------------------------------------

AdamState AdamState::zeros_like(std::span<const Tensor> params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.size(), 0.0);
    s.v.emplace_back(p.size(), 0.0);
  }
  return s;
}

bool adamw_step(std::span<Tensor> params, AdamState& state, double lr, const AdamConfig& config) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adamw_step: optimizer state does not match parameter list");
  }
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].size() || state.v[i].size() != params[i].size()) {
      throw ShapeError("adamw_step: moment size mismatch at parameter " + std::to_string(i));
    }
    grads.push_back(params[i].grad());
    for (double g : grads.back()) {
      if (!std::isfinite(g)) return false;
    }
  }

  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      p[k] -= lr * config.weight_decay * p[k];
      m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
      v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config.eps);
    }
  }
  return true;
}

double lr_schedule(std::uint64_t step, std::uint64_t warmup_steps, double base_lr) {
  if (warmup_steps == 0 || step >= warmup_steps) return base_lr;
  return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

// --- configuration ---------------------------------------------------------

AdamConfig TrainConfig::adam() const {
  AdamConfig a;
  a.weight_decay = weight_decay;
  return a;
}

void TrainConfig::validate() const {
  encoder.validate();
  objective.validate();
  if (name.empty() || name.find('/') != std::string::npos || name == "." || name == "..") {
    throw ConfigError("train.name must be a plain directory name");
  }
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (budget.checkpoints.empty()) throw ConfigError("train.budget.checkpoints is empty");
  for (std::size_t i = 0; i < budget.checkpoints.size(); ++i) {
    const double c = budget.checkpoints[i];
    if (!(c > 0.0)) throw ConfigError("train.budget.checkpoints must be positive");
    if (i > 0 && !(c > budget.checkpoints[i - 1])) {
      throw ConfigError("train.budget.checkpoints must be strictly increasing");
    }
    if (budget.kind == BudgetKind::kSteps && c != std::floor(c)) {
      throw ConfigError("train.budget.checkpoints must be whole steps");
    }
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{
      {"name", c.name},
      {"encoder", c.encoder},
      {"objective", c.objective},
      {"learning_rate", c.learning_rate},
      {"warmup_steps", c.warmup_steps},
      {"weight_decay", c.weight_decay},
      {"batch_size", c.batch_size},
      {"budget",
       {{"kind", c.budget.kind == BudgetKind::kSteps ? "steps" : "wall_seconds"},
        {"checkpoints", c.budget.checkpoints}}},
      {"seeds",
       {{"init", c.seeds.init},
        {"data", c.seeds.data},
        {"mask", c.seeds.mask},
        {"projection", c.seeds.projection}}},
      {"checkpoint_dtype", store::to_string(c.checkpoint_dtype)}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c = d;
  c.name = j.value("name", d.name);
  if (j.contains("encoder")) c.encoder = j.at("encoder").get<enc::EncoderConfig>();
  if (j.contains("objective")) c.objective = j.at("objective").get<obj::ObjectiveConfig>();
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.batch_size = j.value("batch_size", d.batch_size);
  if (j.contains("budget")) {
    const auto& b = j.at("budget");
    const auto kind = b.value("kind", std::string("steps"));
    if (kind == "steps") {
      c.budget.kind = BudgetKind::kSteps;
    } else if (kind == "wall_seconds") {
      c.budget.kind = BudgetKind::kWallSeconds;
    } else {
      throw ConfigError("train.budget.kind: unknown value '" + kind + "'");
    }
    if (b.contains("checkpoints")) c.budget.checkpoints = b.at("checkpoints").get<std::vector<double>>();
  }
  if (j.contains("seeds")) {
    const auto& s = j.at("seeds");
    c.seeds.init = s.value("init", d.seeds.init);
    c.seeds.data = s.value("data", d.seeds.data);
    c.seeds.mask = s.value("mask", d.seeds.mask);
    c.seeds.projection = s.value("projection", d.seeds.projection);
  }
  c.checkpoint_dtype =
      store::parse_dtype(j.value("checkpoint_dtype", store::to_string(d.checkpoint_dtype)));
}

// --- state -----------------------------------------------------------------

namespace {

std::vector<enc::NamedTensor> named_trainable(const TrainConfig& config, const TrainState& state) {
  std::vector<enc::NamedTensor> out;
  for (auto& nt : state.params.named()) out.push_back({"encoder." + nt.name, nt.tensor});
  if (config.objective.uses_jepa()) {
    for (auto& nt : state.predictor.named()) out.push_back(nt);
  }
  return out;
}

obj::ObjectiveConfig effective_objective(const TrainConfig& config) {
  obj::ObjectiveConfig o = config.objective;
  o.sigreg.projection_seed = config.seeds.projection;
  return o;
}

}  // namespace

TrainState TrainState::init(const TrainConfig& config) {
  config.validate();
  TrainState s;
  s.params = enc::EncoderParams::init(config.encoder, config.seeds.init);
  s.predictor = obj::PredictorParams::init(config.encoder.hidden_size,
                                           seq::mix_seed(config.seeds.init, 0x707265646963ULL));
  if (config.objective.target_mode == obj::TargetMode::kEma) s.ema = s.params.clone();
  const auto t = s.trainable(config);
  s.adam = AdamState::zeros_like(t);
  return s;
}

std::vector<Tensor> TrainState::trainable(const TrainConfig& config) const {
  std::vector<Tensor> out;
  for (auto& nt : named_trainable(config, *this)) out.push_back(nt.tensor);
  return out;
}

std::size_t TrainState::parameter_count() const {
  std::size_t n = params.parameter_count() + predictor.parameter_count();
  if (ema) n += ema->parameter_count();
  return n;
}

void to_json(nlohmann::json& j, const RunLedger& l) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : l.rows) {
    rows.push_back({{"checkpoint_step", r.checkpoint_step},
                    {"optimizer_steps", r.optimizer_steps},
                    {"samples_seen", r.samples_seen},
                    {"tokens_seen", r.tokens_seen},
                    {"skipped_steps", r.skipped_steps},
                    {"wall_seconds", r.wall_seconds}});
  }
  j = nlohmann::json{{"run", l.run}, {"batch_size", l.batch_size}, {"checkpoints", rows}};
}

void from_json(const nlohmann::json& j, RunLedger& l) {
  l.run = j.at("run").get<std::string>();
  l.batch_size = j.at("batch_size").get<std::size_t>();
  l.rows.clear();
  for (const auto& r : j.at("checkpoints")) {
    LedgerRow row;
    row.checkpoint_step = r.at("checkpoint_step").get<std::uint64_t>();
    row.optimizer_steps = r.at("optimizer_steps").get<std::uint64_t>();
    row.samples_seen = r.at("samples_seen").get<std::uint64_t>();
    row.tokens_seen = r.at("tokens_seen").get<std::uint64_t>();
    row.skipped_steps = r.value("skipped_steps", std::uint64_t{0});
    row.wall_seconds = r.at("wall_seconds").get<double>();
    l.rows.push_back(row);
  }
}

nlohmann::json to_json_row(const StepLog& s) {
  return {{"step", s.step},
          {"wall_ms", s.wall_ms},
          {"mlm_ce", s.loss.mlm_ce},
          {"jepa_latent", s.loss.jepa_latent},
          {"sigreg", s.loss.sigreg},
          {"total", s.loss.total},
          {"lr", s.lr},
          {"skipped", s.skipped}};
}

// --- training --------------------------------------------------------------

StepBatch make_step_batch(const TrainConfig& config, std::span<const std::vector<seq::TokenId>> corpus,
                          std::uint64_t step) {
  if (corpus.empty()) throw DataError("training corpus is empty");
  const seq::BatchSchedule schedule(corpus.size(), config.batch_size, config.seeds.data);
  std::vector<std::vector<seq::TokenId>> rows;
  for (std::size_t i : schedule.indices(step)) rows.push_back(corpus[i]);
  StepBatch b;
  b.clean = seq::make_batch(rows, config.encoder.max_len);
  b.plan = seq::make_mask_plan(b.clean, config.objective.mask_rate, seq::mix_seed(config.seeds.mask, step));
  b.masked = b.plan.apply(b.clean);
  return b;
}

StepLog train_step(const TrainConfig& config, TrainState& state, const StepBatch& batch) {
  const auto start = std::chrono::steady_clock::now();
  auto params = state.trainable(config);
  for (auto& p : params) p.zero_grad();

  StepLog log;
  log.step = state.step + 1;
  const obj::StepContext ctx{state.step, state.ema ? &*state.ema : nullptr};
  log.loss = obj::combined_loss(effective_objective(config), batch.masked, batch.clean, batch.plan,
                                state.params, state.predictor, ctx);
  if (log.loss.total_tensor.requires_grad()) log.loss.total_tensor.backward();

  log.lr = lr_schedule(log.step, config.warmup_steps, config.learning_rate);
  const bool applied = adamw_step(params, state.adam, log.lr, config.adam());
  log.skipped = !applied;
  if (applied && state.ema) obj::ema_update(*state.ema, state.params, *config.objective.ema_decay);
  if (!applied) ++state.skipped_steps;

  // Release the graph before the next step builds its own.
  log.loss.total_tensor = Tensor();
  for (auto& p : params) p.zero_grad();

  state.step += 1;
  state.samples_seen += batch.clean.batch;
  state.tokens_seen += batch.clean.real_tokens();
  log.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  state.wall_seconds += log.wall_ms / 1000.0;
  return log;
}

void save_checkpoint(const fs::path& dir, const TrainConfig& config, const TrainState& state) {
  std::vector<store::Array> arrays;
  auto add = [&](const std::string& name, const Tensor& t) {
    arrays.push_back({name, t.shape(), std::vector<double>(t.values().begin(), t.values().end())});
  };
  for (const auto& nt : state.params.named()) add("encoder." + nt.name, nt.tensor);
  for (const auto& nt : state.predictor.named()) add(nt.name, nt.tensor);
  const auto trainable = named_trainable(config, state);
  for (std::size_t i = 0; i < trainable.size(); ++i) {
    const auto& shape = trainable[i].tensor.shape();
    arrays.push_back({"adam.m." + trainable[i].name, shape, state.adam.m[i]});
    arrays.push_back({"adam.v." + trainable[i].name, shape, state.adam.v[i]});
  }
  if (state.ema) {
    for (const auto& nt : state.ema->named()) add("ema." + nt.name, nt.tensor);
  }

  nlohmann::json manifest{{"format", "mlmjepa-checkpoint"},
                          {"step", state.step},
                          {"samples_seen", state.samples_seen},
                          {"tokens_seen", state.tokens_seen},
                          {"skipped_steps", state.skipped_steps},
                          {"adam_step", state.adam.t},
                          {"objective_kind", obj::name_of(config.objective.kind)},
                          {"mlm_weight", config.objective.mlm_weight()},
                          {"parameter_count", state.parameter_count()},
                          {"config", config}};
  store::write(dir, std::move(manifest), arrays, config.checkpoint_dtype);
}

TrainState load_checkpoint(const fs::path& dir, TrainConfig* config_out) {
  const auto contents = store::read(dir);
  const auto& m = contents.manifest;
  TrainConfig config;
  try {
    config = m.at("config").get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(dir.string() + ": bad checkpoint config: " + e.what());
  }
  TrainState s = TrainState::init(config);
  auto fill = [&](const std::string& name, std::span<double> dst) {
    const auto& a = contents.at(name);
    if (a.values.size() != dst.size()) {
      throw DataError(dir.string() + ": tensor '" + name + "' has the wrong size");
    }
    std::copy(a.values.begin(), a.values.end(), dst.begin());
  };
  for (const auto& nt : s.params.named()) {
    Tensor t = nt.tensor;
    fill("encoder." + nt.name, t.mutable_values());
  }
  for (const auto& nt : s.predictor.named()) {
    Tensor t = nt.tensor;
    fill(nt.name, t.mutable_values());
  }
  const auto trainable = named_trainable(config, s);
  for (std::size_t i = 0; i < trainable.size(); ++i) {
    fill("adam.m." + trainable[i].name, s.adam.m[i]);
    fill("adam.v." + trainable[i].name, s.adam.v[i]);
  }
  if (s.ema) {
    for (const auto& nt : s.ema->named()) {
      Tensor t = nt.tensor;
      fill("ema." + nt.name, t.mutable_values());
    }
  }
  try {
    s.step = m.at("step").get<std::uint64_t>();
    s.samples_seen = m.at("samples_seen").get<std::uint64_t>();
    s.tokens_seen = m.at("tokens_seen").get<std::uint64_t>();
    s.skipped_steps = m.at("skipped_steps").get<std::uint64_t>();
    s.adam.t = m.at("adam_step").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(dir.string() + ": bad checkpoint manifest: " + e.what());
  }
  if (config_out) *config_out = config;
  return s;
}

namespace {

// Keeps lines of a JSON-lines file whose "step" is at most `max_step`.
std::string kept_log_lines(const fs::path& path, std::uint64_t max_step) {
  std::ifstream is(path);
  std::string line, out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      if (nlohmann::json::parse(line).at("step").get<std::uint64_t>() <= max_step) out += line + "\n";
    } catch (const nlohmann::json::exception&) {
      // a torn final line from an interrupted run
    }
  }
  return out;
}

nlohmann::json comparable(const TrainConfig& c) {
  nlohmann::json j = c;
  j.erase("budget");
  return j;
}

}  // namespace

RunResult run(const TrainConfig& config, std::span<const std::vector<seq::TokenId>> corpus,
              const fs::path& root, const RunOptions& options) {
  config.validate();
  if (corpus.empty()) throw DataError("training corpus is empty");
  const fs::path dir = root / config.name;
  fs::create_directories(dir);

  RunResult result;
  result.ledger.run = config.name;
  result.ledger.batch_size = config.batch_size;
  std::string log_prefix;

  if (options.resume_from) {
    TrainConfig stored;
    result.state = load_checkpoint(*options.resume_from, &stored);
    if (comparable(stored) != comparable(config)) {
      throw ConfigError("resume: checkpoint was written with a different configuration");
    }
    const fs::path ledger_path = dir / "ledger.json";
    if (fs::exists(ledger_path)) {
      std::ifstream is(ledger_path);
      const RunLedger old = nlohmann::json::parse(is).get<RunLedger>();
      for (const auto& r : old.rows) {
        if (r.checkpoint_step > result.state.step) continue;
        result.ledger.rows.push_back(r);
        if (r.checkpoint_step == result.state.step) result.state.wall_seconds = r.wall_seconds;
      }
    }
    log_prefix = kept_log_lines(dir / "train_log.jsonl", result.state.step);
  } else {
    for (const auto& entry : fs::directory_iterator(dir)) {
      const auto name = entry.path().filename().string();
      if (name.rfind("ckpt_", 0) == 0) fs::remove_all(entry.path());
    }
    fs::remove(dir / "ledger.json");
    result.state = TrainState::init(config);
  }
  TrainState& state = result.state;

  store::atomic_write_text(dir / "train_log.jsonl", log_prefix);
  std::ofstream log(dir / "train_log.jsonl", std::ios::app);

  auto write_ledger = [&] {
    store::atomic_write_text(dir / "ledger.json", nlohmann::json(result.ledger).dump(2) + "\n");
  };
  auto checkpoint = [&] {
    const fs::path ckpt = dir / ("ckpt_" + std::to_string(state.step));
    try {
      save_checkpoint(ckpt, config, state);
    } catch (const fs::filesystem_error& e) {
      write_ledger();
      throw DataError("checkpoint write failed: " + std::string(e.what()));
    } catch (const DataError&) {
      write_ledger();
      throw;
    }
    result.checkpoints.push_back(ckpt);
    result.ledger.rows.push_back({state.step, state.step, state.samples_seen, state.tokens_seen,
                                  state.skipped_steps, state.wall_seconds});
    write_ledger();
  };

  const auto& points = config.budget.checkpoints;
  std::size_t next = 0;
  auto reached = [&](double point) {
    return config.budget.kind == BudgetKind::kSteps ? static_cast<double>(state.step) >= point
                                                    : state.wall_seconds >= point;
  };
  while (next < points.size() && reached(points[next])) ++next;

  while (next < points.size()) {
    const StepBatch batch = make_step_batch(config, corpus, state.step);
    const StepLog entry = train_step(config, state, batch);
    log << to_json_row(entry).dump() << '\n';
    if (options.on_step) options.on_step(entry);
    if (reached(points[next])) {
      log.flush();
      checkpoint();
      while (next < points.size() && reached(points[next])) ++next;
    }
  }
  log.flush();
  if (result.ledger.rows.empty() || !fs::exists(dir / "ledger.json")) write_ledger();
  return result;
}

// --- synthetic corpus ------------------------------------------------------

namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t below(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
}

}  // namespace

std::vector<SynthRecord> make_motif_corpus(const SynthConfig& c) {
  if (c.n_sequences == 0 || c.n_families == 0) throw ConfigError("synth: empty corpus requested");
  if (c.min_len == 0 || c.min_len > c.max_len) throw ConfigError("synth: bad length range");
  if (c.motif.empty()) throw ConfigError("synth: motif is empty");
  if (c.max_motifs * c.motif.size() > c.min_len) {
    throw ConfigError("synth: min_len too short for max_motifs motif copies");
  }
  for (char ch : c.motif) {
    if (seq::Vocabulary::kCanonical.find(ch) == std::string_view::npos) {
      throw ConfigError("synth: motif must use canonical residues");
    }
  }

  std::mt19937_64 rng(c.seed);
  const auto& aa = seq::Vocabulary::kCanonical;
  // Per-family composition: a few favoured residues, motif residues rare.
  std::vector<std::vector<double>> cdf(c.n_families);
  for (auto& f : cdf) {
    std::vector<double> w(aa.size(), 1.0);
    for (int k = 0; k < 4; ++k) w[below(rng, aa.size())] += 6.0;
    for (char ch : c.motif) w[aa.find(ch)] = 0.15;
    double total = 0.0;
    for (double x : w) {
      total += x;
      f.push_back(total);
    }
    for (auto& x : f) x /= total;
  }

  // Same residues as the motif in reverse order.
  std::string decoy(c.motif.rbegin(), c.motif.rend());
  if (decoy == c.motif) std::rotate(decoy.begin(), decoy.begin() + 1, decoy.end());

  std::vector<SynthRecord> out;
  out.reserve(c.n_sequences);
  for (std::size_t i = 0; i < c.n_sequences; ++i) {
    SynthRecord r;
    r.id = "syn" + std::to_string(i);
    r.family = below(rng, c.n_families);
    r.motif_count = below(rng, c.max_motifs + 1);
    const std::size_t len = c.min_len + below(rng, c.max_len - c.min_len + 1);
    const auto& f = cdf[r.family];
    for (std::size_t p = 0; p < len; ++p) {
      const double u = uniform01(rng);
      std::size_t k = 0;
      while (k + 1 < f.size() && u >= f[k]) ++k;
      r.sequence += aa[k];
    }
    const std::size_t blocks = c.decoys ? c.max_motifs : r.motif_count;
    if (blocks > 0) {
      // Which blocks carry the real motif; the others get the decoy.
      std::vector<bool> real(blocks, false);
      for (std::size_t m = 0; m < r.motif_count; ++m) real[m] = true;
      std::shuffle(real.begin(), real.end(), rng);
      const std::size_t seg = len / blocks;
      for (std::size_t m = 0; m < blocks; ++m) {
        const std::size_t start = m * seg + below(rng, seg - c.motif.size() + 1);
        r.sequence.replace(start, c.motif.size(), real[m] ? c.motif : decoy);
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace mlmjepa::train
