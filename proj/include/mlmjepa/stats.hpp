#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlmjepa/evalsuite.hpp"

namespace mlmjepa::stats {

/// |Δ| strictly below this is a tie.
inline constexpr double kTieThreshold = 0.002;

struct TaskDelta {
  std::string task;
  double a = 0.0;
  double b = 0.0;
  double delta = 0.0;  // a - b
};

/// Task name -> score.
using TaskScores = std::map<std::string, double>;

/// Aligns two score sets by task. Throws DataError listing the symmetric
/// difference when the task sets differ, or on a non-finite score.
std::vector<TaskDelta> paired_deltas(const TaskScores& a, const TaskScores& b);

struct SignTest {
  std::size_t wins = 0;
  std::size_t losses = 0;
  std::size_t ties = 0;
  std::optional<double> p;  // one-sided, P(X >= wins); unset when every delta is a tie
};

/// P(X >= k) for X ~ Binomial(n, 1/2). Integer-exact for n <= 64.
double binomial_upper_tail(std::size_t n, std::size_t k);

/// Wins are Δ >= τ, losses Δ <= -τ, the rest ties.
SignTest sign_test(std::span<const double> deltas, double tau = kTieThreshold);

struct Wilcoxon {
  double statistic = 0.0;  // min(W+, W-)
  std::optional<double> p;  // two-sided; unset for fewer than two nonzero deltas
  std::size_t n = 0;        // nonzero deltas
  bool exact = false;
};

/// Zeros are dropped and |Δ| average-ranked. Exact null for n <= 20, normal
/// approximation with tie-corrected variance and continuity correction above.
Wilcoxon wilcoxon_signed_rank(std::span<const double> deltas);

/// Step-down adjusted p-values in input order. Throws std::invalid_argument for
/// p outside (0, 1].
std::vector<double> holm_bonferroni(std::span<const double> p);

struct Scoreboard {
  std::string run;
  std::string baseline;
  std::vector<TaskDelta> tasks;
  std::size_t wins = 0;
  std::size_t losses = 0;
  std::size_t ties = 0;
  double macro_mean_delta = 0.0;
  std::optional<double> sign_p;
  std::optional<double> wilcoxon_p;
  std::optional<double> holm_p;
};

Scoreboard scoreboard(const std::string& run, const TaskScores& scores, const std::string& baseline,
                      const TaskScores& baseline_scores, double tau = kTieThreshold);

/// macro(A vs base) - macro(B vs base). Both boards must share a task set.
double delta_delta(const Scoreboard& a, const Scoreboard& b);

/// Scores of one run at one checkpoint, keyed "task/metric" and averaged over
/// probe seeds. Prefers the test split. The latest checkpoint is used when
/// `step` is unset. Throws DataError when the run has no rows.
TaskScores collect_scores(std::span<const eval::TaskResult> rows, const std::string& run,
                          std::optional<std::uint64_t> step = std::nullopt);

void to_json(nlohmann::json& j, const TaskDelta& d);
void to_json(nlohmann::json& j, const Scoreboard& s);

/// run,baseline,W,L,T,macro_delta,p_sign,p_wilcoxon,p_holm with a header row.
std::string to_csv(std::span<const Scoreboard> boards);

}  // namespace mlmjepa::stats
