#include "mlmjepa/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <tuple>

#include "mlmjepa/error.hpp"
#include "mlmjepa/tensor_store.hpp"
#include "mlmjepa/trainer.hpp"

namespace mlmjepa::eval {

namespace fs = std::filesystem;

// --- embeddings ------------------------------------------------------------

std::size_t EmbeddingMatrix::index_of(const std::string& id) const {
  const auto it = std::find(ids.begin(), ids.end(), id);
  if (it == ids.end()) throw DataError("no embedding for id '" + id + "'");
  return static_cast<std::size_t>(it - ids.begin());
}

void EmbeddingMatrix::validate() const {
  if (ids.size() != rows()) throw ShapeError("embeddings: id count does not match rows");
  if (!values.allFinite()) throw NumericalError("embeddings", "non-finite embedding entry");
  std::set<std::string> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) throw DataError("embeddings: duplicate id '" + id + "'");
  }
}

void l2_normalize_rows(Eigen::MatrixXd& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n == 0.0) throw NumericalError("l2_normalize", "zero-norm embedding cannot be normalized");
    m.row(i) /= n;
  }
}

EmbeddingMatrix embed(const enc::EncoderParams& params, std::span<const seq::SequenceRecord> records,
                      bool l2_normalize, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("embed: batch_size must be >= 1");
  const auto tok = params.config.tokenizer();
  EmbeddingMatrix out;
  out.values.resize(static_cast<Eigen::Index>(records.size()),
                    static_cast<Eigen::Index>(params.config.hidden_size));
  grad::NoGradGuard ng;
  for (std::size_t start = 0; start < records.size(); start += batch_size) {
    const std::size_t end = std::min(records.size(), start + batch_size);
    std::vector<std::vector<seq::TokenId>> rows;
    for (std::size_t i = start; i < end; ++i) rows.push_back(seq::tokenize(records[i].sequence, tok));
    const auto batch = seq::make_batch(rows, params.config.max_len);
    const auto hidden = enc::forward(params, batch);
    for (std::size_t b = 0; b < rows.size(); ++b) {
      const auto v = enc::mean_pool(hidden, batch, b, {false, params.config.pool_include_specials});
      for (std::size_t j = 0; j < v.size(); ++j) {
        out.values(static_cast<Eigen::Index>(start + b), static_cast<Eigen::Index>(j)) = v[j];
      }
    }
  }
  for (const auto& r : records) out.ids.push_back(r.id);
  if (l2_normalize) l2_normalize_rows(out.values);
  out.l2_normalized = l2_normalize;
  out.validate();
  return out;
}

EmbeddingMatrix embed_checkpoint(const fs::path& checkpoint,
                                 std::span<const seq::SequenceRecord> records, bool l2_normalize) {
  train::TrainConfig config;
  const auto state = train::load_checkpoint(checkpoint, &config);
  auto e = embed(state.params, records, l2_normalize);
  e.run = config.name;
  e.checkpoint_step = state.step;
  return e;
}

void save_embeddings(const fs::path& dir, const EmbeddingMatrix& e) {
  e.validate();
  const std::size_t n = e.rows(), d = static_cast<std::size_t>(e.values.cols());
  store::Array a{"embeddings", {n, d}, std::vector<double>(n * d)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      a.values[i * d + j] = e.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
  }
  nlohmann::json manifest{{"format", "mlmjepa-embeddings"},
                          {"ids", e.ids},
                          {"l2_normalized", e.l2_normalized},
                          {"run", e.run},
                          {"checkpoint_step", e.checkpoint_step}};
  store::write(dir, std::move(manifest), std::span<const store::Array>(&a, 1), store::Dtype::kF32,
               "embeddings.bin");
}

EmbeddingMatrix load_embeddings(const fs::path& dir) {
  const auto c = store::read(dir);
  EmbeddingMatrix e;
  try {
    e.ids = c.manifest.at("ids").get<std::vector<std::string>>();
    e.l2_normalized = c.manifest.at("l2_normalized").get<bool>();
    e.run = c.manifest.value("run", std::string());
    e.checkpoint_step = c.manifest.value("checkpoint_step", std::uint64_t{0});
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(dir.string() + ": bad embedding manifest: " + ex.what());
  }
  const auto& a = c.at("embeddings");
  if (a.shape.size() != 2 || a.shape[0] != e.ids.size()) {
    throw DataError(dir.string() + ": embedding shape does not match id list");
  }
  const std::size_t n = a.shape[0], d = a.shape[1];
  e.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      e.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a.values[i * d + j];
    }
  }
  e.validate();
  return e;
}

// --- metrics ---------------------------------------------------------------

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double f1_macro(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size() || truth.empty()) {
    throw std::invalid_argument("f1_macro: need equal-length non-empty inputs");
  }
  const std::set<int> classes(truth.begin(), truth.end());
  double total = 0.0;
  for (int c : classes) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const bool p = predicted[i] == c, t = truth[i] == c;
      tp += p && t;
      fp += p && !t;
      fn += !p && t;
    }
    total += 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
  }
  return total / static_cast<double>(classes.size());
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: length mismatch");
  const auto ranks = average_ranks(scores);
  double pos = 0.0, neg = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      pos += 1.0;
      rank_sum += ranks[i];
    } else if (labels[i] == 0) {
      neg += 1.0;
    } else {
      throw std::invalid_argument("auc: labels must be 0 or 1");
    }
  }
  if (pos == 0.0 || neg == 0.0) throw std::invalid_argument("auc: labels contain a single class");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("spearman: need two equal-length inputs of size >= 2");
  }
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// --- probes ----------------------------------------------------------------

Standardizer Standardizer::fit(const Eigen::MatrixXd& x) {
  Standardizer s;
  s.mean = x.colwise().mean();
  s.scale.resize(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double var = (x.col(j).array() - s.mean(j)).square().mean();
    s.scale(j) = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  return s;
}

Eigen::MatrixXd Standardizer::apply(const Eigen::MatrixXd& x) const {
  return (x.rowwise() - mean).array().rowwise() / scale.array();
}

namespace {

Eigen::MatrixXd with_bias(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd out(x.rows(), x.cols() + 1);
  out << x, Eigen::VectorXd::Ones(x.rows());
  return out;
}

Eigen::MatrixXd row_softmax(Eigen::MatrixXd z) {
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    z.row(i).array() -= z.row(i).maxCoeff();
    z.row(i) = z.row(i).array().exp();
    z.row(i) /= z.row(i).sum();
  }
  return z;
}

}  // namespace

void LinearClassifier::fit(const Eigen::MatrixXd& x, std::span<const int> y, int n_classes,
                           const LogisticOptions& options) {
  if (static_cast<std::size_t>(x.rows()) != y.size() || y.empty()) {
    throw std::invalid_argument("LinearClassifier: rows and labels differ");
  }
  if (n_classes < 2) throw std::invalid_argument("LinearClassifier: need at least 2 classes");
  const Eigen::MatrixXd xb = with_bias(x);
  const double n = static_cast<double>(x.rows());
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(x.rows(), n_classes);
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 0 || y[i] >= n_classes) throw std::invalid_argument("LinearClassifier: label out of range");
    onehot(static_cast<Eigen::Index>(i), y[i]) = 1.0;
  }
  // Softmax cross-entropy has Hessian bounded by 0.5 · XᵀX / n.
  const Eigen::MatrixXd gram = xb.transpose() * xb / n;
  const double lmax = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gram, Eigen::EigenvaluesOnly)
                          .eigenvalues()
                          .maxCoeff();
  const double step = 1.0 / (0.5 * lmax + options.l2);

  w_ = Eigen::MatrixXd::Zero(xb.cols(), n_classes);
  Eigen::MatrixXd reg_mask = Eigen::MatrixXd::Ones(xb.cols(), n_classes);
  reg_mask.row(xb.cols() - 1).setZero();
  iterations_ = 0;
  while (iterations_ < options.max_iter) {
    const Eigen::MatrixXd p = row_softmax(xb * w_);
    const Eigen::MatrixXd g =
        xb.transpose() * (p - onehot) / n + options.l2 * w_.cwiseProduct(reg_mask);
    ++iterations_;
    if (g.cwiseAbs().maxCoeff() < options.tol) break;
    w_ -= step * g;
  }
}

Eigen::MatrixXd LinearClassifier::predict_proba(const Eigen::MatrixXd& x) const {
  return row_softmax(with_bias(x) * w_);
}

std::vector<int> LinearClassifier::predict(const Eigen::MatrixXd& x) const {
  const Eigen::MatrixXd p = predict_proba(x);
  std::vector<int> out(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < p.cols(); ++c) {
      if (p(i, c) > p(i, best)) best = c;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

void RidgeRegressor::fit(const Eigen::MatrixXd& x, std::span<const double> y, double lambda) {
  if (static_cast<std::size_t>(x.rows()) != y.size()) throw std::invalid_argument("ridge: rows and labels differ");
  if (y.size() < 3) throw std::invalid_argument("ridge: need at least 3 training points");
  const double n = static_cast<double>(x.rows());
  const Eigen::Map<const Eigen::VectorXd> yv(y.data(), static_cast<Eigen::Index>(y.size()));
  const Eigen::RowVectorXd xm = x.colwise().mean();
  const double ym = yv.mean();
  const Eigen::MatrixXd xc = x.rowwise() - xm;
  Eigen::MatrixXd a = xc.transpose() * xc / n;
  a.diagonal().array() += lambda;
  w_ = a.ldlt().solve(xc.transpose() * (yv.array() - ym).matrix() / n);
  b_ = ym - xm.dot(w_);
}

std::vector<double> RidgeRegressor::predict(const Eigen::MatrixXd& x) const {
  const Eigen::VectorXd p = (x * w_).array() + b_;
  return {p.data(), p.data() + p.size()};
}

std::vector<std::size_t> nearest(const Eigen::MatrixXd& train, const Eigen::RowVectorXd& query,
                                 std::size_t k) {
  const std::size_t n = static_cast<std::size_t>(train.rows());
  if (n == 0) throw std::invalid_argument("knn: empty training set");
  k = std::min(k, n);
  std::vector<std::pair<double, std::size_t>> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = {(train.row(static_cast<Eigen::Index>(i)) - query).squaredNorm(), i};
  }
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = d[i].second;
  return out;
}

std::vector<int> knn_classify(const Eigen::MatrixXd& train, std::span<const int> labels,
                              const Eigen::MatrixXd& test, std::size_t k) {
  std::vector<int> out;
  for (Eigen::Index q = 0; q < test.rows(); ++q) {
    std::map<int, std::size_t> votes;
    for (std::size_t i : nearest(train, test.row(q), k)) ++votes[labels[i]];
    int best = votes.begin()->first;
    for (const auto& [c, v] : votes) {
      if (v > votes[best]) best = c;
    }
    out.push_back(best);
  }
  return out;
}

std::vector<double> knn_positive_fraction(const Eigen::MatrixXd& train, std::span<const int> labels,
                                          const Eigen::MatrixXd& test, std::size_t k) {
  std::vector<double> out;
  for (Eigen::Index q = 0; q < test.rows(); ++q) {
    const auto nn = nearest(train, test.row(q), k);
    double pos = 0.0;
    for (std::size_t i : nn) pos += labels[i] == 1;
    out.push_back(pos / static_cast<double>(nn.size()));
  }
  return out;
}

std::vector<double> knn_regress(const Eigen::MatrixXd& train, std::span<const double> labels,
                                const Eigen::MatrixXd& test, std::size_t k) {
  std::vector<double> out;
  for (Eigen::Index q = 0; q < test.rows(); ++q) {
    const auto nn = nearest(train, test.row(q), k);
    double s = 0.0;
    for (std::size_t i : nn) s += labels[i];
    out.push_back(s / static_cast<double>(nn.size()));
  }
  return out;
}

// --- retrieval -------------------------------------------------------------

double recall_at_k(const Eigen::MatrixXd& embeddings, std::span<const std::string> labels,
                   std::size_t k) {
  const std::size_t n = static_cast<std::size_t>(embeddings.rows());
  if (labels.size() != n) throw std::invalid_argument("recall_at_k: labels do not match rows");
  if (n < 2) throw std::invalid_argument("recall_at_k: need at least 2 items");
  if (k == 0 || k >= n) {
    throw std::invalid_argument("recall_at_k: k=" + std::to_string(k) + " must be in [1, n)");
  }
  Eigen::MatrixXd unit = embeddings;
  for (Eigen::Index i = 0; i < unit.rows(); ++i) {
    const double norm = unit.row(i).norm();
    if (norm > 0.0) unit.row(i) /= norm;
  }
  const Eigen::MatrixXd sim = unit * unit.transpose();
  std::size_t hits = 0;
  std::vector<std::size_t> order;
  for (std::size_t q = 0; q < n; ++q) {
    order.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != q) order.push_back(j);
    }
    const auto qi = static_cast<Eigen::Index>(q);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double sa = sim(qi, static_cast<Eigen::Index>(a));
                        const double sb = sim(qi, static_cast<Eigen::Index>(b));
                        return sa != sb ? sa > sb : a < b;
                      });
    for (std::size_t r = 0; r < k; ++r) {
      if (labels[order[r]] == labels[q]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

// --- tasks and results -----------------------------------------------------

const char* name_of(MetricKind m) {
  switch (m) {
    case MetricKind::kF1Macro: return "f1_macro";
    case MetricKind::kAuc: return "auc";
    case MetricKind::kSpearman: return "spearman";
    case MetricKind::kRecallAtK: return "recall_at_k";
  }
  return "?";
}

MetricKind parse_metric(const std::string& s) {
  for (auto m : {MetricKind::kF1Macro, MetricKind::kAuc, MetricKind::kSpearman, MetricKind::kRecallAtK}) {
    if (s == name_of(m)) return m;
  }
  throw ConfigError("unknown metric '" + s + "' (expected f1_macro, auc, spearman or recall_at_k)");
}

void to_json(nlohmann::json& j, const TaskResult& r) {
  j = nlohmann::json{{"run", r.run},     {"checkpoint_step", r.checkpoint_step},
                     {"task", r.task},   {"metric", r.metric},
                     {"split", r.split}, {"probe_seed", r.probe_seed},
                     {"value", r.value}};
}

void from_json(const nlohmann::json& j, TaskResult& r) {
  r.run = j.at("run").get<std::string>();
  r.checkpoint_step = j.at("checkpoint_step").get<std::uint64_t>();
  r.task = j.at("task").get<std::string>();
  r.metric = j.at("metric").get<std::string>();
  r.split = j.at("split").get<std::string>();
  r.probe_seed = j.at("probe_seed").get<std::uint64_t>();
  r.value = j.at("value").get<double>();
}

namespace {

// Sorted class names; numerically when every label parses as a number.
std::vector<std::string> class_names(std::span<const seq::LabeledRecord> records) {
  std::vector<std::string> names;
  bool numeric = true;
  for (const auto& r : records) {
    names.push_back(r.label);
    numeric = numeric && r.numeric_label.has_value();
  }
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  if (numeric) {
    std::stable_sort(names.begin(), names.end(),
                     [](const std::string& a, const std::string& b) { return std::stod(a) < std::stod(b); });
  }
  return names;
}

struct Split {
  std::vector<std::size_t> train, eval;
  std::string eval_name;
};

Split split_rows(std::span<const seq::LabeledRecord> records, const std::string& task) {
  Split s;
  bool has_test = false;
  for (const auto& r : records) has_test = has_test || r.split == "test";
  s.eval_name = has_test ? "test" : "valid";
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == "train") {
      s.train.push_back(i);
    } else if (records[i].split == s.eval_name) {
      s.eval.push_back(i);
    }
  }
  if (s.train.empty() || s.eval.empty()) {
    throw DataError("task '" + task + "': needs a split column with train and test (or valid) rows");
  }
  return s;
}

Eigen::MatrixXd gather(const EmbeddingMatrix& e, std::span<const seq::LabeledRecord> records,
                       std::span<const std::size_t> rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), e.values.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = e.values.row(static_cast<Eigen::Index>(e.index_of(records[rows[i]].id)));
  }
  return out;
}

}  // namespace

TaskResult run_probe(const EmbeddingMatrix& embeddings, std::span<const seq::LabeledRecord> records,
                     const ProbeSpec& spec) {
  if (spec.metric == MetricKind::kRecallAtK) {
    throw ConfigError("recall_at_k is a retrieval metric; use run_retrieval");
  }
  const Split split = split_rows(records, spec.task);
  Eigen::MatrixXd xtr = gather(embeddings, records, split.train);
  Eigen::MatrixXd xte = gather(embeddings, records, split.eval);

  TaskResult result;
  result.run = embeddings.run;
  result.checkpoint_step = embeddings.checkpoint_step;
  result.task = spec.task;
  result.metric = name_of(spec.metric);
  result.split = split.eval_name;
  result.probe_seed = spec.seed;

  if (!spec.knn) {
    const auto z = Standardizer::fit(xtr);
    xtr = z.apply(xtr);
    xte = z.apply(xte);
  }

  if (spec.metric == MetricKind::kSpearman) {
    std::vector<double> ytr, yte;
    for (std::size_t i : split.train) {
      if (!records[i].numeric_label) throw DataError("task '" + spec.task + "': spearman needs numeric labels");
      ytr.push_back(*records[i].numeric_label);
    }
    for (std::size_t i : split.eval) {
      if (!records[i].numeric_label) throw DataError("task '" + spec.task + "': spearman needs numeric labels");
      yte.push_back(*records[i].numeric_label);
    }
    if (ytr.size() < 3) throw DataError("task '" + spec.task + "': need at least 3 training rows");
    std::vector<double> pred;
    if (spec.knn) {
      pred = knn_regress(xtr, ytr, xte, spec.k);
    } else {
      RidgeRegressor r;
      r.fit(xtr, ytr, spec.ridge_lambda);
      pred = r.predict(xte);
    }
    result.value = spearman(pred, yte);
    return result;
  }

  const auto names = class_names(records);
  auto class_of = [&](std::size_t i) {
    return static_cast<int>(std::find(names.begin(), names.end(), records[i].label) - names.begin());
  };
  std::vector<int> ytr, yte;
  for (std::size_t i : split.train) ytr.push_back(class_of(i));
  for (std::size_t i : split.eval) yte.push_back(class_of(i));
  if (std::set<int>(ytr.begin(), ytr.end()).size() < 2) {
    throw DataError("task '" + spec.task + "': training split has a single class");
  }
  const int n_classes = static_cast<int>(names.size());

  if (spec.metric == MetricKind::kAuc) {
    if (n_classes != 2) throw DataError("task '" + spec.task + "': auc needs exactly two classes");
    std::vector<double> scores;
    if (spec.knn) {
      scores = knn_positive_fraction(xtr, ytr, xte, spec.k);
    } else {
      LinearClassifier c;
      c.fit(xtr, ytr, n_classes, spec.logistic);
      const Eigen::MatrixXd p = c.predict_proba(xte);
      for (Eigen::Index i = 0; i < p.rows(); ++i) scores.push_back(p(i, 1));
    }
    result.value = auc(scores, yte);
    return result;
  }

  std::vector<int> pred;
  if (spec.knn) {
    pred = knn_classify(xtr, ytr, xte, spec.k);
  } else {
    LinearClassifier c;
    c.fit(xtr, ytr, n_classes, spec.logistic);
    pred = c.predict(xte);
  }
  result.value = f1_macro(pred, yte);
  return result;
}

std::vector<TaskResult> run_retrieval(const EmbeddingMatrix& embeddings,
                                      std::span<const seq::LabeledRecord> records,
                                      const std::string& task, std::span<const std::size_t> ks) {
  std::vector<std::size_t> rows;
  bool has_test = false;
  for (const auto& r : records) has_test = has_test || r.split == "test";
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!has_test || records[i].split == "test") rows.push_back(i);
  }
  const Eigen::MatrixXd x = gather(embeddings, records, rows);
  std::vector<std::string> labels;
  for (std::size_t i : rows) labels.push_back(records[i].label);
  std::vector<TaskResult> out;
  for (std::size_t k : ks) {
    TaskResult r;
    r.run = embeddings.run;
    r.checkpoint_step = embeddings.checkpoint_step;
    r.task = task;
    r.metric = "recall_at_" + std::to_string(k);
    r.split = has_test ? "test" : "all";
    r.value = recall_at_k(x, labels, k);
    out.push_back(r);
  }
  return out;
}

std::vector<TaskResult> read_results(const fs::path& path) {
  std::vector<TaskResult> out;
  std::ifstream is(path);
  if (!is) return out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<TaskResult>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void append_results(const fs::path& path, std::span<const TaskResult> rows) {
  auto all = read_results(path);
  auto key = [](const TaskResult& r) {
    return std::tie(r.run, r.checkpoint_step, r.task, r.metric, r.split, r.probe_seed);
  };
  for (const auto& r : rows) {
    if (!std::isfinite(r.value)) throw NumericalError("results", "non-finite metric value for " + r.task);
    auto it = std::find_if(all.begin(), all.end(), [&](const TaskResult& o) { return key(o) == key(r); });
    if (it != all.end()) {
      *it = r;
    } else {
      all.push_back(r);
    }
  }
  std::string text;
  for (const auto& r : all) text += nlohmann::json(r).dump() + "\n";
  store::atomic_write_text(path, text);
}

}  // namespace mlmjepa::eval
