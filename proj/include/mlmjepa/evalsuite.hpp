#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "mlmjepa/encoder.hpp"
#include "mlmjepa/seqdata.hpp"

namespace mlmjepa::eval {

// --- embeddings ------------------------------------------------------------

struct EmbeddingMatrix {
  std::vector<std::string> ids;
  Eigen::MatrixXd values;  // n x hidden
  bool l2_normalized = false;
  std::string run;
  std::uint64_t checkpoint_step = 0;

  std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
  /// Row index of `id`; throws DataError when absent.
  std::size_t index_of(const std::string& id) const;
  /// Throws on non-finite entries or duplicate ids.
  void validate() const;
};

/// Row i is the mean-pooled final hidden state of sequence i.
EmbeddingMatrix embed(const enc::EncoderParams& params, std::span<const seq::SequenceRecord> records,
                      bool l2_normalize, std::size_t batch_size = 16);

/// Loads a trainer checkpoint and embeds with its encoder.
EmbeddingMatrix embed_checkpoint(const std::filesystem::path& checkpoint,
                                 std::span<const seq::SequenceRecord> records, bool l2_normalize);

void l2_normalize_rows(Eigen::MatrixXd& m);

/// Manifest + 32-bit float blob.
void save_embeddings(const std::filesystem::path& dir, const EmbeddingMatrix& e);
EmbeddingMatrix load_embeddings(const std::filesystem::path& dir);

// --- metrics ---------------------------------------------------------------

/// 1-based average ranks; ties share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> x);

/// Unweighted mean of per-class F1 over the classes present in `truth`.
double f1_macro(std::span<const int> predicted, std::span<const int> truth);

/// Mann-Whitney U / (n+ · n−) with ties counted 0.5. Labels are 0/1.
double auc(std::span<const double> scores, std::span<const int> labels);

/// Pearson correlation of average ranks. A constant argument gives 0.
double spearman(std::span<const double> x, std::span<const double> y);

// --- probes ----------------------------------------------------------------

/// Per-dimension z-score fitted on training rows; constant columns pass
/// through centred.
struct Standardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;

  static Standardizer fit(const Eigen::MatrixXd& x);
  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const;
};

struct LogisticOptions {
  double l2 = 1e-4;
  double tol = 1e-7;
  std::size_t max_iter = 5000;
};

/// Multinomial logistic regression by full-batch gradient descent from zero
/// weights. Bias is not regularized.
class LinearClassifier {
 public:
  void fit(const Eigen::MatrixXd& x, std::span<const int> y, int n_classes,
           const LogisticOptions& options = {});
  /// Class probabilities, n x n_classes.
  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& x) const;
  std::vector<int> predict(const Eigen::MatrixXd& x) const;
  std::size_t iterations() const { return iterations_; }
  const Eigen::MatrixXd& weights() const { return w_; }  // (d+1) x C, bias last

 private:
  Eigen::MatrixXd w_;
  std::size_t iterations_ = 0;
};

/// Ridge regression, min (1/n)||y − Xw − b||² + λ||w||², closed form.
class RidgeRegressor {
 public:
  void fit(const Eigen::MatrixXd& x, std::span<const double> y, double lambda = 1e-3);
  std::vector<double> predict(const Eigen::MatrixXd& x) const;
  const Eigen::VectorXd& weights() const { return w_; }
  double bias() const { return b_; }

 private:
  Eigen::VectorXd w_;
  double b_ = 0.0;
};

/// Indices of the k nearest training rows by Euclidean distance, closest
/// first, ties to the lower index. k is capped at the training size.
std::vector<std::size_t> nearest(const Eigen::MatrixXd& train, const Eigen::RowVectorXd& query,
                                 std::size_t k);

/// Majority vote, ties to the smaller class id.
std::vector<int> knn_classify(const Eigen::MatrixXd& train, std::span<const int> labels,
                              const Eigen::MatrixXd& test, std::size_t k = 20);
/// Fraction of neighbours with label 1, for AUC.
std::vector<double> knn_positive_fraction(const Eigen::MatrixXd& train, std::span<const int> labels,
                                          const Eigen::MatrixXd& test, std::size_t k = 20);
std::vector<double> knn_regress(const Eigen::MatrixXd& train, std::span<const double> labels,
                                const Eigen::MatrixXd& test, std::size_t k = 20);

// --- retrieval -------------------------------------------------------------

/// Every row is a query against all others by cosine similarity; a hit is a
/// same-label item in the top k. Queries with a unique label always miss.
/// Throws std::invalid_argument when k >= n.
double recall_at_k(const Eigen::MatrixXd& embeddings, std::span<const std::string> labels,
                   std::size_t k);

// --- tasks and results -----------------------------------------------------

enum class MetricKind { kF1Macro, kAuc, kSpearman, kRecallAtK };
enum class ProbeKind { kLinearClassifier, kLinearRegressor, kKnn };

const char* name_of(MetricKind m);
MetricKind parse_metric(const std::string& s);

struct TaskResult {
  std::string run;
  std::uint64_t checkpoint_step = 0;
  std::string task;
  std::string metric;  // "f1_macro", "auc", "spearman", "recall_at_<k>"
  std::string split;
  std::uint64_t probe_seed = 0;
  double value = 0.0;
};

void to_json(nlohmann::json& j, const TaskResult& r);
void from_json(const nlohmann::json& j, TaskResult& r);

struct ProbeSpec {
  std::string task;
  MetricKind metric = MetricKind::kSpearman;
  bool knn = false;
  std::size_t k = 20;
  std::uint64_t seed = 42;
  double ridge_lambda = 1e-3;
  LogisticOptions logistic;
};

/// Fits on rows with split "train" and scores the "test" rows ("valid" when
/// there is no test split). Records are matched to embeddings by id.
/// Throws DataError naming the task for a single-class training split.
TaskResult run_probe(const EmbeddingMatrix& embeddings, std::span<const seq::LabeledRecord> records,
                     const ProbeSpec& spec);

/// One result per k, labels matched by id.
std::vector<TaskResult> run_retrieval(const EmbeddingMatrix& embeddings,
                                      std::span<const seq::LabeledRecord> records,
                                      const std::string& task, std::span<const std::size_t> ks);

/// Merges rows into a JSON-lines file keyed by (run, checkpoint_step, task,
/// metric, split, probe_seed); a new row replaces an old one with the same key.
void append_results(const std::filesystem::path& path, std::span<const TaskResult> rows);
std::vector<TaskResult> read_results(const std::filesystem::path& path);

}  // namespace mlmjepa::eval
