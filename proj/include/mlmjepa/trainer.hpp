#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlmjepa/encoder.hpp"
#include "mlmjepa/objectives.hpp"
#include "mlmjepa/seqdata.hpp"
#include "mlmjepa/tensor_store.hpp"

namespace mlmjepa::train {

using grad::Tensor;

// --- optimizer -------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;  // applied updates

  /// Zero moments matching `params`.
  static AdamState zeros_like(std::span<const Tensor> params);
};

/// One AdamW update from the gradients stored on `params`. Returns false and
/// leaves everything untouched when any gradient entry is non-finite.
bool adamw_step(std::span<Tensor> params, AdamState& state, double lr, const AdamConfig& config);

/// base · min(1, step / warmup); warmup 0 means no ramp.
double lr_schedule(std::uint64_t step, std::uint64_t warmup_steps, double base_lr);

// --- configuration ---------------------------------------------------------

enum class BudgetKind { kSteps, kWallSeconds };

struct Budget {
  BudgetKind kind = BudgetKind::kSteps;
  std::vector<double> checkpoints{100};  // steps or seconds, strictly increasing
};

struct Seeds {
  std::uint64_t init = 0;
  std::uint64_t data = 1;
  std::uint64_t mask = 2;
  std::uint64_t projection = 3;
};

struct TrainConfig {
  std::string name = "run";
  enc::EncoderConfig encoder;
  obj::ObjectiveConfig objective;
  double learning_rate = 3e-4;
  std::uint64_t warmup_steps = 1000;
  double weight_decay = 0.01;
  std::size_t batch_size = 128;
  Budget budget;
  Seeds seeds;
  store::Dtype checkpoint_dtype = store::Dtype::kF64;

  AdamConfig adam() const;
  /// Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// --- state and ledger ------------------------------------------------------

struct TrainState {
  enc::EncoderParams params;
  obj::PredictorParams predictor;
  std::optional<enc::EncoderParams> ema;  // ema target mode only
  AdamState adam;
  std::uint64_t step = 0;  // optimizer steps taken, skipped ones included
  std::uint64_t samples_seen = 0;
  std::uint64_t tokens_seen = 0;
  std::uint64_t skipped_steps = 0;
  double wall_seconds = 0.0;

  static TrainState init(const TrainConfig& config);
  /// Tensors the optimizer updates: the encoder, plus the predictor when the
  /// objective uses it.
  std::vector<Tensor> trainable(const TrainConfig& config) const;
  /// Parameters held in memory, teacher copy included.
  std::size_t parameter_count() const;
};

struct LedgerRow {
  std::uint64_t checkpoint_step = 0;
  std::uint64_t optimizer_steps = 0;
  std::uint64_t samples_seen = 0;
  std::uint64_t tokens_seen = 0;
  std::uint64_t skipped_steps = 0;
  double wall_seconds = 0.0;
};

struct RunLedger {
  std::string run;
  std::size_t batch_size = 0;
  std::vector<LedgerRow> rows;
};

void to_json(nlohmann::json& j, const RunLedger& l);
void from_json(const nlohmann::json& j, RunLedger& l);

struct StepLog {
  std::uint64_t step = 0;
  double wall_ms = 0.0;
  double lr = 0.0;
  bool skipped = false;
  obj::LossBreakdown loss;
};

nlohmann::json to_json_row(const StepLog& s);

// --- training --------------------------------------------------------------

/// Batch for step `step` (0-based) together with its mask plan.
struct StepBatch {
  seq::TokenBatch clean;
  seq::TokenBatch masked;
  seq::MaskPlan plan;
};

StepBatch make_step_batch(const TrainConfig& config, std::span<const std::vector<seq::TokenId>> corpus,
                          std::uint64_t step);

/// Forward, backward and optimizer update for the next step of `state`.
StepLog train_step(const TrainConfig& config, TrainState& state, const StepBatch& batch);

void save_checkpoint(const std::filesystem::path& dir, const TrainConfig& config,
                     const TrainState& state);
/// Restores params, optimizer moments, teacher and counters. The config
/// stored in the checkpoint is returned through `config` when non-null.
TrainState load_checkpoint(const std::filesystem::path& dir, TrainConfig* config = nullptr);

struct RunOptions {
  std::optional<std::filesystem::path> resume_from;
  std::function<void(const StepLog&)> on_step;
};

struct RunResult {
  RunLedger ledger;
  std::vector<std::filesystem::path> checkpoints;
  TrainState state;
};

/// Trains under `root/<config.name>` writing ckpt_<step>/, train_log.jsonl and
/// ledger.json. A fresh run replaces earlier outputs of the same name.
RunResult run(const TrainConfig& config, std::span<const std::vector<seq::TokenId>> corpus,
              const std::filesystem::path& root, const RunOptions& options = {});

// --- synthetic corpus ------------------------------------------------------

struct SynthConfig {
  std::size_t n_sequences = 400;
  std::size_t n_families = 4;
  std::size_t min_len = 40;
  std::size_t max_len = 80;
  std::string motif = "WCHWM";
  std::size_t max_motifs = 3;
  /// Fill the blocks without a motif with a reversed copy, so that residue
  /// composition does not reveal motif_count.
  bool decoys = true;
  std::uint64_t seed = 0;
};

struct SynthRecord {
  std::string id;
  std::string sequence;
  std::size_t family = 0;
  std::size_t motif_count = 0;
};

/// Sequences from a mixture of family position-weight matrices with 0 to
/// max_motifs non-overlapping copies of the motif planted in each.
std::vector<SynthRecord> make_motif_corpus(const SynthConfig& config);

}  // namespace mlmjepa::train
