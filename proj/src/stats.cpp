#include "mlmjepa/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mlmjepa/error.hpp"

namespace mlmjepa::stats {

std::vector<TaskDelta> paired_deltas(const TaskScores& a, const TaskScores& b) {
  std::vector<std::string> only_a, only_b;
  for (const auto& [task, v] : a) {
    if (!b.count(task)) only_a.push_back(task);
  }
  for (const auto& [task, v] : b) {
    if (!a.count(task)) only_b.push_back(task);
  }
  if (!only_a.empty() || !only_b.empty()) {
    std::string msg = "task sets differ;";
    if (!only_a.empty()) {
      msg += " only in first:";
      for (const auto& t : only_a) msg += " " + t;
    }
    if (!only_b.empty()) {
      msg += (only_a.empty() ? "" : ";") + std::string(" only in second:");
      for (const auto& t : only_b) msg += " " + t;
    }
    throw DataError(msg);
  }
  std::vector<TaskDelta> out;
  for (const auto& [task, va] : a) {
    const double vb = b.at(task);
    if (!std::isfinite(va) || !std::isfinite(vb)) throw DataError("non-finite score for task " + task);
    out.push_back({task, va, vb, va - vb});
  }
  return out;
}

double binomial_upper_tail(std::size_t n, std::size_t k) {
  if (k == 0) return 1.0;
  if (k > n) return 0.0;
  if (n <= 64) {
    using u128 = unsigned __int128;
    u128 c = 1;  // C(n, 0)
    u128 tail = 0;
    for (std::size_t i = 0; i <= n; ++i) {
      if (i >= k) tail += c;
      c = c * (n - i) / (i + 1);
    }
    // 2^n is exact in a double for n <= 64, and so is the division up to rounding.
    return static_cast<double>(tail) / std::ldexp(1.0, static_cast<int>(n));
  }
  const double ln2 = std::log(2.0);
  const double dn = static_cast<double>(n);
  double max_term = -INFINITY;
  std::vector<double> logs;
  for (std::size_t i = k; i <= n; ++i) {
    const double di = static_cast<double>(i);
    const double l = std::lgamma(dn + 1) - std::lgamma(di + 1) - std::lgamma(dn - di + 1) - dn * ln2;
    logs.push_back(l);
    max_term = std::max(max_term, l);
  }
  double s = 0;
  for (double l : logs) s += std::exp(l - max_term);
  return std::min(1.0, std::exp(max_term) * s);
}

SignTest sign_test(std::span<const double> deltas, double tau) {
  SignTest r;
  for (double d : deltas) {
    if (d >= tau) {
      ++r.wins;
    } else if (d <= -tau) {
      ++r.losses;
    } else {
      ++r.ties;
    }
  }
  const std::size_t n = r.wins + r.losses;
  if (n > 0) r.p = binomial_upper_tail(n, r.wins);
  return r;
}

namespace {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

Wilcoxon wilcoxon_signed_rank(std::span<const double> deltas) {
  std::vector<double> nz;
  for (double d : deltas) {
    if (!std::isfinite(d)) throw std::invalid_argument("wilcoxon_signed_rank: non-finite delta");
    if (d != 0.0) nz.push_back(d);
  }
  Wilcoxon r;
  r.n = nz.size();
  std::vector<double> mag(nz.size());
  std::transform(nz.begin(), nz.end(), mag.begin(), [](double d) { return std::abs(d); });
  const auto ranks = eval::average_ranks(mag);
  double w_plus = 0, w_minus = 0;
  for (std::size_t i = 0; i < nz.size(); ++i) (nz[i] > 0 ? w_plus : w_minus) += ranks[i];
  r.statistic = std::min(w_plus, w_minus);
  if (r.n < 2) return r;

  const std::size_t n = r.n;
  if (n <= 20) {
    r.exact = true;
    // Average ranks are multiples of 1/2, so doubled ranks are integers.
    std::vector<std::size_t> twice(n);
    std::size_t total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      twice[i] = static_cast<std::size_t>(std::llround(2 * ranks[i]));
      total += twice[i];
    }
    std::vector<std::uint64_t> count(total + 1, 0);
    count[0] = 1;
    for (std::size_t t : twice) {
      for (std::size_t s = total; s + 1 > t; --s) count[s] += count[s - t];
    }
    const auto w = static_cast<std::size_t>(std::llround(2 * r.statistic));
    // P(min(W+, W-) <= w) = P(W+ <= w) + P(W+ >= total - w) when the tails are disjoint.
    if (2 * w >= total) {
      r.p = 1.0;
      return r;
    }
    std::uint64_t hits = 0;
    for (std::size_t s = 0; s <= total; ++s) {
      if (s <= w || s >= total - w) hits += count[s];
    }
    r.p = static_cast<double>(hits) / std::ldexp(1.0, static_cast<int>(n));
    return r;
  }

  const double dn = static_cast<double>(n);
  const double mean = dn * (dn + 1) / 4;
  double var = dn * (dn + 1) * (2 * dn + 1) / 24;
  std::vector<double> sorted = mag;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    var -= (t * t * t - t) / 48;
    i = j;
  }
  if (var <= 0) {
    r.p = 1.0;
    return r;
  }
  const double z = std::min(0.0, r.statistic - mean + 0.5) / std::sqrt(var);
  r.p = std::min(1.0, 2 * normal_cdf(z));
  return r;
}

std::vector<double> holm_bonferroni(std::span<const double> p) {
  for (double v : p) {
    if (!(v > 0.0 && v <= 1.0)) throw std::invalid_argument("holm_bonferroni: p-values must lie in (0, 1]");
  }
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::vector<double> out(m);
  double running = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    running = std::max(running, std::min(1.0, static_cast<double>(m - j) * p[order[j]]));
    out[order[j]] = running;
  }
  return out;
}

Scoreboard scoreboard(const std::string& run, const TaskScores& scores, const std::string& baseline,
                      const TaskScores& baseline_scores, double tau) {
  Scoreboard s;
  s.run = run;
  s.baseline = baseline;
  s.tasks = paired_deltas(scores, baseline_scores);
  if (s.tasks.empty()) throw DataError("scoreboard: no tasks for run " + run);
  std::vector<double> d;
  for (const auto& t : s.tasks) d.push_back(t.delta);
  const auto st = sign_test(d, tau);
  s.wins = st.wins;
  s.losses = st.losses;
  s.ties = st.ties;
  s.sign_p = st.p;
  s.macro_mean_delta = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
  return s;
}

double delta_delta(const Scoreboard& a, const Scoreboard& b) {
  TaskScores ta, tb;
  for (const auto& t : a.tasks) ta[t.task] = t.delta;
  for (const auto& t : b.tasks) tb[t.task] = t.delta;
  paired_deltas(ta, tb);
  return a.macro_mean_delta - b.macro_mean_delta;
}

TaskScores collect_scores(std::span<const eval::TaskResult> rows, const std::string& run,
                          std::optional<std::uint64_t> step) {
  std::vector<const eval::TaskResult*> mine;
  std::uint64_t latest = 0;
  for (const auto& r : rows) {
    if (r.run != run) continue;
    mine.push_back(&r);
    latest = std::max(latest, r.checkpoint_step);
  }
  if (mine.empty()) throw DataError("no results for run " + run);
  const std::uint64_t at = step.value_or(latest);

  // key -> split -> (sum, count)
  std::map<std::string, std::map<std::string, std::pair<double, int>>> acc;
  for (const auto* r : mine) {
    if (r->checkpoint_step != at) continue;
    auto& cell = acc[r->task + "/" + r->metric][r->split];
    cell.first += r->value;
    cell.second += 1;
  }
  if (acc.empty()) throw DataError("no results for run " + run + " at step " + std::to_string(at));
  TaskScores out;
  for (const auto& [key, splits] : acc) {
    auto it = splits.find("test");
    if (it == splits.end()) it = splits.begin();
    out[key] = it->second.first / it->second.second;
  }
  return out;
}

void to_json(nlohmann::json& j, const TaskDelta& d) {
  j = {{"task", d.task}, {"a", d.a}, {"b", d.b}, {"delta", d.delta}};
}

void to_json(nlohmann::json& j, const Scoreboard& s) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  j = {{"run", s.run},
       {"baseline", s.baseline},
       {"wins", s.wins},
       {"losses", s.losses},
       {"ties", s.ties},
       {"macro_mean_delta", s.macro_mean_delta},
       {"sign_p", opt(s.sign_p)},
       {"wilcoxon_p", opt(s.wilcoxon_p)},
       {"holm_p", opt(s.holm_p)},
       {"tasks", s.tasks}};
}

std::string to_csv(std::span<const Scoreboard> boards) {
  std::ostringstream out;
  out.precision(6);
  auto opt = [&](const std::optional<double>& v) {
    if (v) out << *v;
  };
  out << "run,baseline,W,L,T,macro_delta,p_sign,p_wilcoxon,p_holm\n";
  for (const auto& b : boards) {
    out << b.run << ',' << b.baseline << ',' << b.wins << ',' << b.losses << ',' << b.ties << ','
        << b.macro_mean_delta << ',';
    opt(b.sign_p);
    out << ',';
    opt(b.wilcoxon_p);
    out << ',';
    opt(b.holm_p);
    out << '\n';
  }
  return out.str();
}

}  // namespace mlmjepa::stats
