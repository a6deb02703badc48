// Acceptance gate: one PASS/FAIL line per primary criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gradcheck.hpp"
#include "mlmjepa/cli.hpp"
#include "mlmjepa/evalsuite.hpp"
#include "mlmjepa/objectives.hpp"
#include "mlmjepa/stats.hpp"
#include "mlmjepa/trainer.hpp"

using namespace mlmjepa;
using grad::Tensor;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Gate {
  int passed = 0;
  int failed = 0;
  std::string only;

  void run(const std::string& name, const std::function<bool(std::ostringstream&)>& body) {
    if (!only.empty() && name != only) return;
    std::ostringstream detail;
    const auto t0 = Clock::now();
    bool ok = false;
    try {
      ok = body(detail);
    } catch (const std::exception& e) {
      detail << "exception: " << e.what();
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    (ok ? passed : failed) += 1;
    std::printf("%s  %-28s %s [%.1fs]\n", ok ? "PASS" : "FAIL", name.c_str(), detail.str().c_str(), secs);
    std::fflush(stdout);
  }
};

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mlmjepa_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::vector<std::vector<seq::TokenId>> tokens_of(const std::vector<train::SynthRecord>& corpus) {
  std::vector<std::vector<seq::TokenId>> out;
  for (const auto& r : corpus) out.push_back(seq::tokenize(r.sequence));
  return out;
}

seq::TokenBatch random_batch(std::mt19937_64& rng, std::size_t rows, std::size_t min_len, std::size_t max_len) {
  std::vector<std::vector<seq::TokenId>> ids;
  for (std::size_t r = 0; r < rows; ++r) {
    std::string s;
    const std::size_t n = min_len + rng() % (max_len - min_len + 1);
    for (std::size_t i = 0; i < n; ++i) s += seq::Vocabulary::kCanonical[rng() % 20];
    ids.push_back(seq::tokenize(s));
  }
  return seq::make_batch(ids);
}

// --- brute-force oracles ----------------------------------------------------

std::vector<double> brute_ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0, equal = 0;
    for (double v : x) {
      less += v < x[i];
      equal += v == x[i];
    }
    r[i] = less + (equal + 1) / 2;
  }
  return r;
}

double brute_pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

double brute_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double pairs = 0, wins = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
    }
  }
  return wins / pairs;
}

double brute_f1(const std::vector<int>& pred, const std::vector<int>& truth) {
  std::set<int> classes(truth.begin(), truth.end());
  double total = 0;
  for (int c : classes) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      tp += pred[i] == c && truth[i] == c;
      fp += pred[i] == c && truth[i] != c;
      fn += pred[i] != c && truth[i] == c;
    }
    total += tp == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
  }
  return total / static_cast<double>(classes.size());
}

double brute_wilcoxon(const std::vector<double>& deltas) {
  std::vector<double> nz, mag;
  for (double d : deltas) {
    if (d != 0) {
      nz.push_back(d);
      mag.push_back(std::abs(d));
    }
  }
  const auto rk = brute_ranks(mag);
  double wp = 0, wm = 0;
  for (std::size_t i = 0; i < nz.size(); ++i) (nz[i] > 0 ? wp : wm) += rk[i];
  const double obs = std::min(wp, wm);
  const std::size_t n = nz.size();
  std::size_t hits = 0;
  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    double p = 0, m = 0;
    for (std::size_t i = 0; i < n; ++i) (mask >> i & 1 ? p : m) += rk[i];
    hits += std::min(p, m) <= obs + 1e-9;
  }
  return static_cast<double>(hits) / static_cast<double>(std::size_t{1} << n);
}

// --- criteria ---------------------------------------------------------------

bool statistics_reproduction(std::ostringstream& d) {
  struct Case {
    std::size_t w, l, t;
    double published;
    int decimals;
  };
  const std::vector<Case> cases{{10, 3, 3, 0.046, 3}, {11, 2, 3, 0.011, 3}, {6, 8, 2, 0.79, 2}, {11, 4, 1, 0.059, 3}};
  bool ok = true;
  for (const auto& c : cases) {
    std::vector<double> deltas;
    deltas.insert(deltas.end(), c.w, 0.01);
    deltas.insert(deltas.end(), c.l, -0.01);
    deltas.insert(deltas.end(), c.t, 0.001);
    const auto r = stats::sign_test(deltas);
    const double scale = std::pow(10.0, c.decimals);
    const bool match = r.p && r.wins == c.w && r.losses == c.l && r.ties == c.t &&
                       std::round(*r.p * scale) == std::round(c.published * scale);
    ok = ok && match;
    d << c.w << "/" << c.l << "/" << c.t << "->" << (r.p ? *r.p : -1.0) << " ";
  }
  std::vector<double> sixty(60, 0.01);
  sixty.insert(sixty.end(), 10, -0.01);
  const auto big = stats::sign_test(sixty);
  d << "60/70->" << *big.p;
  return ok && big.p && *big.p < 1e-6;
}

bool gradient_suite(std::ostringstream& d) {
  using namespace grad;
  using testing::check_gradients;
  using testing::random_tensor;
  using testing::weighted_sum;
  std::mt19937_64 rng(7);
  double worst = 0;
  std::string worst_name;
  std::size_t n_checks = 0;
  auto note = [&](const std::string& name, const testing::GradCheck& r) {
    ++n_checks;
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_name = name;
    }
  };
  auto unary = [&](const std::string& name, const std::function<Tensor(const Tensor&)>& op, double lo = -1,
                   double hi = 1) {
    Tensor x = random_tensor({5, 7}, rng, true, lo, hi);
    note(name, check_gradients({x}, [&] { return weighted_sum(op(x)); }));
  };
  unary("scale", [](const Tensor& x) { return scale(x, -1.7); });
  unary("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.3); });
  unary("neg", [](const Tensor& x) { return neg(x); });
  unary("exp", [](const Tensor& x) { return exp(x); });
  unary("log", [](const Tensor& x) { return log(x); }, 0.5, 2.0);
  unary("tanh", [](const Tensor& x) { return tanh(x); });
  unary("sigmoid", [](const Tensor& x) { return sigmoid(x); });
  unary("silu", [](const Tensor& x) { return silu(x); });
  unary("gelu", [](const Tensor& x) { return gelu(x); });
  unary("sqrt", [](const Tensor& x) { return sqrt(x); }, 0.5, 2.0);
  unary("square", [](const Tensor& x) { return square(x); });
  unary("pow", [](const Tensor& x) { return pow(x, 3.0); });
  unary("sum", [](const Tensor& x) { return sum(x); });
  unary("mean", [](const Tensor& x) { return mean(x); });
  unary("sum_axis0", [](const Tensor& x) { return sum(x, 0); });
  unary("sum_axis1", [](const Tensor& x) { return sum(x, 1); });
  unary("mean_axis0", [](const Tensor& x) { return mean(x, 0); });
  unary("mean_axis1", [](const Tensor& x) { return mean(x, 1); });
  unary("variance0", [](const Tensor& x) { return variance(x, 0); });
  unary("variance1", [](const Tensor& x) { return variance(x, 1); });
  unary("softmax0", [](const Tensor& x) { return softmax(x, 0); });
  unary("softmax1", [](const Tensor& x) { return softmax(x, 1); });
  unary("log_softmax", [](const Tensor& x) { return log_softmax(x, 1); });
  unary("layer_norm", [](const Tensor& x) { return layer_norm(x); });
  unary("rms_norm", [](const Tensor& x) { return rms_norm(x); });
  unary("reshape", [](const Tensor& x) { return reshape(x, {7, 5}); });

  Tensor a = random_tensor({5, 7}, rng, true, 0.5, 1.5);
  for (const Shape& s : std::vector<Shape>{{5, 7}, {7}, {1, 7}, {5, 1}, {}}) {
    Tensor b = random_tensor(s, rng, true, 0.5, 1.5);
    note("add", check_gradients({a, b}, [&] { return weighted_sum(add(a, b)); }));
    note("sub", check_gradients({a, b}, [&] { return weighted_sum(sub(a, b)); }));
    note("mul", check_gradients({a, b}, [&] { return weighted_sum(mul(a, b)); }));
    note("div", check_gradients({a, b}, [&] { return weighted_sum(div(a, b)); }));
  }
  Tensor m1 = random_tensor({4, 6}, rng), m2 = random_tensor({6, 3}, rng);
  note("matmul", check_gradients({m1, m2}, [&] { return weighted_sum(matmul(m1, m2)); }));
  Tensor g = random_tensor({7}, rng);
  note("rms_norm_gain", check_gradients({a, g}, [&] { return weighted_sum(rms_norm(a, g)); }));
  const std::vector<std::size_t> idx{4, 0, 4, 2};
  note("gather_rows", check_gradients({a}, [&] { return weighted_sum(gather_rows(a, idx)); }));
  const std::vector<std::size_t> tgt{1, 6, 0, 3, 3};
  note("cross_entropy", check_gradients({a}, [&] { return softmax_cross_entropy(a, tgt); }));

  Tensor q = random_tensor({10, 4}, rng), k = random_tensor({10, 4}, rng), v = random_tensor({10, 4}, rng);
  const std::vector<std::uint8_t> valid{1, 1, 1, 1, 0, 1, 1, 1, 0, 0};
  for (std::size_t window : {std::size_t{0}, std::size_t{1}}) {
    AttentionLayout layout{2, 5, 2, valid, window};
    note("attention", check_gradients({q, k, v}, [&] { return weighted_sum(attention(q, k, v, layout)); }));
  }
  Tensor x = random_tensor({10, 8}, rng);
  note("rope", check_gradients({x}, [&] { return weighted_sum(rope(x, 2, 5, 2)); }));
  Tensor kernel = random_tensor({5, 8}, rng);
  note("depthwise_conv1d",
       check_gradients({x, kernel}, [&] { return weighted_sum(depthwise_conv1d(x, kernel, 2, 5)); }));

  // Composite losses on the 2-layer, 32-wide toy encoder.
  auto config = enc::EncoderConfig::esm2_like(2, 32, 4);
  config.max_len = 16;
  const auto params = enc::EncoderParams::init(config, 21);
  const auto pred = obj::PredictorParams::init(32, 22);
  const auto teacher = params.clone();
  std::mt19937_64 brng(23);
  const auto clean = random_batch(brng, 2, 6, 12);
  const auto plan = seq::make_mask_plan(clean, 0.4, 24);
  const auto masked = plan.apply(clean);
  std::vector<Tensor> leaves;
  for (const auto& nt : params.named()) leaves.push_back(nt.tensor);
  for (const auto& nt : pred.named()) leaves.push_back(nt.tensor);
  for (auto kind : {obj::ObjectiveKind::kMlm, obj::ObjectiveKind::kMlmJepaMasked, obj::ObjectiveKind::kMlmJepaAllpos,
                    obj::ObjectiveKind::kJepaOnly}) {
    obj::ObjectiveConfig c;
    c.kind = kind;
    c.sigreg.n_projections = 32;
    // Frozen teacher copy: targets stay fixed while the student is perturbed.
    c.target_mode = obj::TargetMode::kEma;
    c.ema_decay = 1.0;
    const obj::StepContext ctx{1, &teacher};
    note(std::string("combined_loss:") + obj::name_of(kind),
         check_gradients(
             leaves, [&] { return obj::combined_loss(c, masked, clean, plan, params, pred, ctx).total_tensor; },
             1e-5, 4));
  }
  d << n_checks << " checks, worst rel err " << worst << " (" << worst_name << "), tol 1e-3";
  return worst < 1e-3;
}

bool masking_statistics(std::ostringstream& d) {
  std::mt19937_64 rng(101);
  std::size_t eligible = 0, selected = 0;
  std::map<seq::MaskAction, std::size_t> actions;
  std::uint64_t seed = 0;
  while (eligible < 1'000'000) {
    const auto batch = random_batch(rng, 32, 50, 300);
    const auto plan = seq::make_mask_plan(batch, 0.20, seed++);
    for (std::size_t i = 0; i < batch.ids.size(); ++i) {
      if (batch.attention[i] && seq::maskable(batch.ids[i])) ++eligible;
    }
    selected += plan.positions.size();
    for (std::size_t p : plan.positions) ++actions[plan.actions[p]];
  }
  const double rate = static_cast<double>(selected) / static_cast<double>(eligible);
  const double fm = static_cast<double>(actions[seq::MaskAction::kMask]) / static_cast<double>(selected);
  const double fr = static_cast<double>(actions[seq::MaskAction::kRandom]) / static_cast<double>(selected);
  const double fk = static_cast<double>(actions[seq::MaskAction::kKeep]) / static_cast<double>(selected);
  d << eligible << " eligible, rate " << rate << ", split " << fm << "/" << fr << "/" << fk;
  return std::abs(rate - 0.20) <= 0.002 && std::abs(fm - 0.8) <= 0.005 && std::abs(fr - 0.1) <= 0.005 &&
         std::abs(fk - 0.1) <= 0.005;
}

// Trains one toy run and returns the state after `steps`.
train::TrainState train_toy(const train::TrainConfig& c, const std::vector<std::vector<seq::TokenId>>& corpus,
                            std::size_t steps) {
  auto st = train::TrainState::init(c);
  for (std::size_t s = 0; s < steps; ++s) train::train_step(c, st, train::make_step_batch(c, corpus, s));
  return st;
}

bool collapse_property(std::ostringstream& d) {
  train::SynthConfig sc;
  sc.n_sequences = 256;
  sc.min_len = 30;
  sc.max_len = 50;
  sc.seed = 5;
  const auto corpus_records = train::make_motif_corpus(sc);
  const auto corpus = tokens_of(corpus_records);

  train::TrainConfig c;
  c.encoder = enc::EncoderConfig::proteinbert2_like(2, 32, 4, 16);
  c.encoder.max_len = 64;
  c.objective.kind = obj::ObjectiveKind::kJepaOnly;
  c.learning_rate = 1e-2;
  c.warmup_steps = 20;
  c.batch_size = 8;
  constexpr std::size_t kSteps = 500;

  const auto held_out = train::make_step_batch(c, corpus, 100000);
  const auto dirs = obj::sigreg_directions(32, 256, 77);
  auto projection_std = [&](const train::TrainState& st) {
    grad::NoGradGuard no_grad;
    const auto h = enc::forward(st.params, held_out.masked).states;
    const auto pos = obj::jepa_positions(obj::PositionSet::kAllNonPad, held_out.clean, held_out.plan);
    return obj::mean_projection_std(grad::layer_norm(st.predictor(grad::gather_rows(h, pos))), dirs);
  };

  // Probe task: motif count, every fifth sequence held out.
  std::vector<seq::SequenceRecord> recs;
  std::vector<seq::LabeledRecord> task;
  for (std::size_t i = 0; i < corpus_records.size(); ++i) {
    recs.push_back({corpus_records[i].id, corpus_records[i].sequence});
    seq::LabeledRecord r;
    r.id = corpus_records[i].id;
    r.sequence = corpus_records[i].sequence;
    r.label = std::to_string(corpus_records[i].motif_count);
    r.numeric_label = static_cast<double>(corpus_records[i].motif_count);
    r.split = i % 5 == 0 ? "test" : "train";
    task.push_back(r);
  }
  eval::ProbeSpec spec;
  spec.task = "motif_count";
  spec.metric = eval::MetricKind::kSpearman;
  auto probe = [&](const train::TrainState& st) { return eval::run_probe(eval::embed(st.params, recs, false), task, spec).value; };

  auto c0 = c;
  c0.objective.alpha = 0.0;
  const auto s0 = train_toy(c0, corpus, kSteps);
  auto c1 = c;
  c1.objective.alpha = 1.0;
  const auto s1 = train_toy(c1, corpus, kSteps);
  auto cm = c;
  cm.objective.kind = obj::ObjectiveKind::kMlm;
  const auto sm = train_toy(cm, corpus, kSteps);

  const double std0 = projection_std(s0), std1 = projection_std(s1);
  const double p0 = probe(s0), pm = probe(sm);
  d << "std alpha=0 " << std0 << " (<0.1), alpha=1 " << std1 << " (>0.5); motif spearman jepa_only " << p0
    << " < mlm " << pm;
  return std0 < 0.1 && std1 > 0.5 && p0 < pm;
}

bool masked_coincidence(std::ostringstream& d) {
  auto ec = enc::EncoderConfig::esm2_like(1, 16, 2);
  ec.max_len = 40;
  const auto params = enc::EncoderParams::init(ec, 1);
  const auto pred = obj::PredictorParams::init(16, 2);
  obj::ObjectiveConfig c;
  c.kind = obj::ObjectiveKind::kMlmJepaMasked;
  c.sigreg.n_projections = 8;
  std::mt19937_64 rng(9);
  std::size_t mismatches = 0, nonempty = 0;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const auto clean = random_batch(rng, 4, 3, 30);
    const auto plan = seq::make_mask_plan(clean, 0.2, i);
    const auto jepa = obj::jepa_positions(c.position_set(), clean, plan);
    if (jepa != plan.positions) ++mismatches;
    const auto out = obj::combined_loss(c, plan.apply(clean), clean, plan, params, pred);
    if (out.n_masked_positions != out.n_target_positions || out.n_masked_positions != plan.positions.size()) ++mismatches;
    nonempty += !plan.positions.empty();
  }
  d << "1000 batches (" << nonempty << " non-empty), " << mismatches << " mismatches";
  return mismatches == 0;
}

bool oracle_equivalence(std::ostringstream& d) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  bool ok = true;

  double wil_err = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng() % 11;
    std::vector<double> deltas(n);
    for (auto& v : deltas) v = static_cast<double>(static_cast<int>(rng() % 9) - 4) * 0.25;
    deltas[0] = 1.0;
    deltas[1] = -0.5;
    const auto r = stats::wilcoxon_signed_rank(deltas);
    wil_err = std::max(wil_err, std::abs(*r.p - brute_wilcoxon(deltas)));
  }
  ok = ok && wil_err <= 1e-12;
  d << "wilcoxon err " << wil_err;

  std::size_t knn_mismatch = 0;
  for (int trial = 0; trial < 5; ++trial) {
    Eigen::MatrixXd train(30, 3), test(10, 3);
    for (int i = 0; i < 30; ++i) {
      for (int j = 0; j < 3; ++j) train(i, j) = nd(rng);
    }
    for (int i = 0; i < 10; ++i) {
      for (int j = 0; j < 3; ++j) test(i, j) = nd(rng);
    }
    train.row(9) = train.row(2);
    test.row(0) = train.row(2);
    std::vector<int> lab;
    std::vector<double> yv;
    for (int i = 0; i < 30; ++i) {
      lab.push_back(static_cast<int>(rng() % 3));
      yv.push_back(static_cast<double>(rng() % 50));
    }
    for (std::size_t k : {1u, 5u, 20u, 30u}) {
      const auto got = eval::knn_classify(train, lab, test, k);
      const auto got_r = eval::knn_regress(train, yv, test, k);
      for (int q = 0; q < 10; ++q) {
        std::vector<std::pair<double, int>> all;
        for (int i = 0; i < 30; ++i) all.push_back({(train.row(i) - test.row(q)).squaredNorm(), i});
        std::sort(all.begin(), all.end());
        int votes[3] = {0, 0, 0};
        double mean = 0;
        for (std::size_t r = 0; r < k; ++r) {
          ++votes[lab[all[r].second]];
          mean += yv[all[r].second];
        }
        const int best = static_cast<int>(std::max_element(votes, votes + 3) - votes);
        knn_mismatch += got[q] != best || got_r[q] != mean / static_cast<double>(k);
      }
    }
  }
  ok = ok && knn_mismatch == 0;
  d << "; knn mismatches " << knn_mismatch;

  double metric_err = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 10 + rng() % 40;
    std::vector<double> x(n), y(n);
    std::vector<int> bin(n), truth(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = trial % 2 ? static_cast<double>(rng() % 5) : nd(rng);
      y[i] = x[i] + nd(rng);
      bin[i] = static_cast<int>(rng() % 2);
      truth[i] = static_cast<int>(rng() % 4);
      pred[i] = static_cast<int>(rng() % 5);
    }
    bin[0] = 0;
    bin[1] = 1;
    metric_err = std::max(metric_err, std::abs(eval::spearman(x, y) - brute_pearson(brute_ranks(x), brute_ranks(y))));
    metric_err = std::max(metric_err, std::abs(eval::auc(x, bin) - brute_auc(x, bin)));
    metric_err = std::max(metric_err, std::abs(eval::f1_macro(pred, truth) - brute_f1(pred, truth)));
  }
  ok = ok && metric_err <= 1e-9;
  d << "; metric err " << metric_err;

  Eigen::MatrixXd e(6, 2);
  e << 1.0, 0.0, 0.9, 0.3, 0.0, 1.0, 0.2, 0.95, -1.0, 0.1, 0.7, 0.7;
  const std::vector<std::string> lab{"a", "a", "b", "b", "c", "c"};
  bool recall_ok = eval::recall_at_k(e, lab, 1) == 4.0 / 6.0;
  for (std::size_t k = 1; k < 6; ++k) {
    std::size_t hits = 0;
    for (int q = 0; q < 6; ++q) {
      std::vector<std::pair<double, int>> ranked;
      for (int j = 0; j < 6; ++j) {
        if (j != q) ranked.push_back({-e.row(q).dot(e.row(j)) / (e.row(q).norm() * e.row(j).norm()), j});
      }
      std::sort(ranked.begin(), ranked.end());
      for (std::size_t r = 0; r < k; ++r) {
        if (lab[ranked[r].second] == lab[q]) {
          ++hits;
          break;
        }
      }
    }
    recall_ok = recall_ok && eval::recall_at_k(e, lab, k) == static_cast<double>(hits) / 6.0;
  }
  Eigen::MatrixXd big(60, 8);
  std::vector<std::string> big_lab;
  for (int i = 0; i < 60; ++i) {
    for (int j = 0; j < 8; ++j) big(i, j) = nd(rng);
    big_lab.push_back("f" + std::to_string(rng() % 6));
  }
  const double r1 = eval::recall_at_k(big, big_lab, 1), r10 = eval::recall_at_k(big, big_lab, 10),
               r30 = eval::recall_at_k(big, big_lab, 30);
  recall_ok = recall_ok && r1 <= r10 && r10 <= r30;
  d << "; recall 6-item " << (recall_ok ? "ok" : "mismatch") << ", R@1/10/30 " << r1 << "/" << r10 << "/" << r30;
  return ok && recall_ok;
}

bool determinism(std::ostringstream& d) {
  train::SynthConfig sc;
  sc.n_sequences = 64;
  sc.min_len = 20;
  sc.max_len = 40;
  const auto corpus = tokens_of(train::make_motif_corpus(sc));
  train::TrainConfig c;
  c.encoder = enc::EncoderConfig::esm2_like(2, 16, 2);
  c.encoder.max_len = 48;
  c.learning_rate = 3e-3;
  c.warmup_steps = 5;
  c.batch_size = 4;
  c.budget.checkpoints = {6, 12};
  const auto a = scratch("det_a"), b = scratch("det_b"), r = scratch("det_resume");
  train::run(c, corpus, a);
  train::run(c, corpus, b);
  bool identical = true;
  for (const char* ck : {"ckpt_6", "ckpt_12"}) {
    identical = identical && slurp(a / "run" / ck / "params.bin") == slurp(b / "run" / ck / "params.bin") &&
                !slurp(a / "run" / ck / "params.bin").empty();
  }
  // Resume in a fresh root from a copy of the first checkpoint.
  fs::create_directories(r / "run");
  fs::copy(a / "run" / "ckpt_6", r / "run" / "ckpt_6", fs::copy_options::recursive);
  train::RunOptions opt;
  opt.resume_from = r / "run" / "ckpt_6";
  train::run(c, corpus, r, opt);
  const bool resumed = slurp(a / "run" / "ckpt_12" / "params.bin") == slurp(r / "run" / "ckpt_12" / "params.bin");
  d << "repeat runs " << (identical ? "byte-identical" : "differ") << ", resume " << (resumed ? "matches" : "differs");
  return identical && resumed;
}

bool cost_ordering(std::ostringstream& d) {
  train::SynthConfig sc;
  sc.n_sequences = 128;
  sc.min_len = 40;
  sc.max_len = 60;
  const auto corpus = tokens_of(train::make_motif_corpus(sc));
  train::TrainConfig c;
  c.encoder = enc::EncoderConfig::esm2_like(2, 32, 4);
  c.encoder.max_len = 64;
  c.batch_size = 8;
  c.warmup_steps = 10;
  std::vector<train::StepBatch> batches;
  for (std::size_t s = 0; s < 23; ++s) batches.push_back(train::make_step_batch(c, corpus, s));

  auto mean_ms = [&](obj::ObjectiveKind kind) {
    auto cc = c;
    cc.objective.kind = kind;
    auto st = train::TrainState::init(cc);
    double total = 0;
    for (std::size_t s = 0; s < batches.size(); ++s) {
      const auto t0 = Clock::now();
      train::train_step(cc, st, batches[s]);
      if (s >= 3) total += std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    }
    return total / static_cast<double>(batches.size() - 3);
  };
  const double mlm = mean_ms(obj::ObjectiveKind::kMlm);
  const double jepa = mean_ms(obj::ObjectiveKind::kMlmJepaMasked);
  d << "mlm " << mlm << " ms/step, mlm_jepa_masked " << jepa << " ms/step, ratio " << jepa / mlm << " (>1.2)";
  return jepa / mlm > 1.2;
}

bool sigreg_calibration(std::ostringstream& d) {
  constexpr std::size_t kN = 4096, kH = 32, kK = 256, kDraws = 200;
  auto normal_samples = [&](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<double> v(kN * kH);
    for (auto& x : v) x = nd(rng);
    return Tensor::constant({kN, kH}, std::move(v));
  };
  std::vector<double> null;
  for (std::size_t i = 0; i < kDraws; ++i) {
    null.push_back(obj::sigreg(normal_samples(1000 + i), obj::sigreg_directions(kH, kK, 5000 + i)).item());
  }
  std::sort(null.begin(), null.end());
  const double q99 = null[static_cast<std::size_t>(std::ceil(0.99 * kDraws)) - 1];
  const double observed = obj::sigreg(normal_samples(424242), obj::sigreg_directions(kH, kK, 77)).item();
  std::vector<double> row(kH);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  for (auto& x : row) x = nd(rng);
  std::vector<double> constant;
  for (std::size_t i = 0; i < 64; ++i) constant.insert(constant.end(), row.begin(), row.end());
  const double collapsed =
      obj::sigreg(Tensor::constant({64, kH}, std::move(constant)), obj::sigreg_directions(kH, kK, 77)).item();
  d << "normal " << observed << " < q99 " << q99 << " of " << kDraws << " null draws; collapsed " << collapsed << " (>1)";
  return observed < q99 && collapsed > 1.0;
}

bool end_to_end(std::ostringstream& d) {
  const fs::path dir = scratch("e2e");
  std::ostringstream out, err;
  auto cli = [&](std::vector<std::string> args) {
    const int code = cli::run_cli(args, out, err);
    if (code != 0) throw std::runtime_error("command failed (" + std::to_string(code) + "): " + args[0] + ": " + err.str());
  };
  const auto data = dir / "data", runs = dir / "runs";
  cli({"synth", "--out", data.string(), "--n", "160", "--min-len", "30", "--max-len", "50", "--seed", "2"});
  std::ofstream(dir / "toy.json") << R"({"corpus": "data/corpus.fasta",
    "encoder": {"preset": "esm2", "n_layers": 2, "hidden_size": 16, "n_heads": 2, "max_len": 64},
    "learning_rate": 0.003, "warmup_steps": 10, "batch_size": 8,
    "budget": {"kind": "steps", "checkpoints": [60]}})";
  const std::vector<std::string> objectives{"mlm", "mlm_jepa_masked", "mlm_jepa_allpos", "jepa_only"};
  const std::vector<std::pair<std::string, std::string>> tasks{
      {"motif_count", "spearman"}, {"family", "f1_macro"}, {"has_motif", "auc"}};
  for (const auto& o : objectives) {
    cli({"pretrain", "--config", (dir / "toy.json").string(), "--out", runs.string(), "--name", o, "--objective", o,
         "--quiet"});
    const auto emb = runs / o / "emb_60";
    cli({"embed", "--ckpt", (runs / o / "ckpt_60").string(), "--fasta", (data / "corpus.fasta").string(), "--out",
         emb.string()});
    for (const auto& [t, m] : tasks) {
      cli({"probe", "--root", runs.string(), "--embeddings", emb.string(), "--task",
           (data / "tasks" / (t + ".csv")).string(), "--metric", m});
    }
  }
  cli({"report", "--root", runs.string(), "--runs", "mlm_jepa_masked,mlm_jepa_allpos,jepa_only", "--baseline", "mlm",
       "--wilcoxon"});

  std::ifstream is(runs / "scoreboard.json");
  const auto j = nlohmann::json::parse(is);
  bool ok = j.at("boards").size() == 3 && j.contains("delta_delta") && j["delta_delta"]["value"].is_number();
  for (const auto& b : j.at("boards")) {
    const std::size_t n = b.at("tasks").size();
    ok = ok && n == tasks.size();
    ok = ok && b.at("wins").get<std::size_t>() + b.at("losses").get<std::size_t>() + b.at("ties").get<std::size_t>() == n;
    ok = ok && b.at("macro_mean_delta").is_number() && std::isfinite(b["macro_mean_delta"].get<double>());
    for (const auto& t : b.at("tasks")) ok = ok && t.at("a").is_number() && t.at("b").is_number();
    // A board with at least one non-tie must carry a sign-test p in (0, 1].
    if (b["wins"].get<std::size_t>() + b["losses"].get<std::size_t>() > 0) {
      ok = ok && b.at("sign_p").is_number() && b["sign_p"].get<double>() > 0 && b["sign_p"].get<double>() <= 1;
    }
    d << b["run"].get<std::string>() << " " << b["wins"] << "/" << b["losses"] << "/" << b["ties"] << " macro "
      << b["macro_mean_delta"].get<double>() << "; ";
  }
  d << "delta_delta " << j["delta_delta"]["value"].get<double>();
  return ok && fs::exists(runs / "scoreboard.csv");
}

}  // namespace

int main(int argc, char** argv) {
  Gate gate;
  if (argc > 1) gate.only = argv[1];
  gate.run("statistics_reproduction", statistics_reproduction);
  gate.run("gradient_suite", gradient_suite);
  gate.run("masking_statistics", masking_statistics);
  gate.run("collapse_property", collapse_property);
  gate.run("masked_position_coincidence", masked_coincidence);
  gate.run("oracle_equivalence", oracle_equivalence);
  gate.run("determinism", determinism);
  gate.run("cost_ordering", cost_ordering);
  gate.run("sigreg_calibration", sigreg_calibration);
  gate.run("end_to_end", end_to_end);
  std::printf("%d passed, %d failed\n", gate.passed, gate.failed);
  return gate.failed == 0 ? 0 : 1;
}
