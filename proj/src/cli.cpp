#include "mlmjepa/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mlmjepa/error.hpp"
#include "mlmjepa/evalsuite.hpp"
#include "mlmjepa/stats.hpp"
#include "mlmjepa/tensor_store.hpp"
#include "mlmjepa/trainer.hpp"

namespace mlmjepa::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path out_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kOutRootEnv); env && *env) return env;
  return "runs";
}

json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

template <class T>
std::vector<T> parse_list(const std::string& text, const std::string& what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::istringstream is(item);
    T v;
    if (!(is >> v) || !is.eof()) throw ConfigError(what + ": cannot parse '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(what + ": empty list");
  return out;
}

std::vector<std::string> split_names(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void write_task_csv(const fs::path& path, const std::vector<train::SynthRecord>& corpus,
                    const std::function<std::string(const train::SynthRecord&)>& label, bool all_test = false) {
  std::ostringstream os;
  os << "id,sequence,label,split\n";
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    os << corpus[i].id << ',' << corpus[i].sequence << ',' << label(corpus[i]) << ','
       << (all_test || i % 5 == 0 ? "test" : "train") << '\n';
  }
  store::atomic_write_text(path, os.str());
}

std::string task_name(const std::string& flag, const fs::path& csv) {
  return flag.empty() ? csv.stem().string() : flag;
}

void print_p(std::ostream& out, const std::optional<double>& p) {
  if (p) {
    out << std::fixed << std::setprecision(3) << *p;
  } else {
    out << "n/a";
  }
}

// --- subcommands -----------------------------------------------------------

struct SynthArgs {
  std::string out;
  train::SynthConfig config;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  const fs::path dir = out_root(a.out);
  fs::create_directories(dir / "tasks");
  const auto corpus = train::make_motif_corpus(a.config);
  std::vector<seq::SequenceRecord> recs;
  for (const auto& r : corpus) recs.push_back({r.id, r.sequence});
  seq::write_fasta(dir / "corpus.fasta", recs);
  write_task_csv(dir / "tasks" / "motif_count.csv", corpus,
                 [](const auto& r) { return std::to_string(r.motif_count); });
  write_task_csv(dir / "tasks" / "family.csv", corpus,
                 [](const auto& r) { return "fam" + std::to_string(r.family); });
  write_task_csv(dir / "tasks" / "has_motif.csv", corpus,
                 [](const auto& r) { return r.motif_count > 0 ? "1" : "0"; });
  // Retrieval gallery: every sequence, labelled by family.
  write_task_csv(dir / "tasks" / "fold.csv", corpus,
                 [](const auto& r) { return "fam" + std::to_string(r.family); }, true);
  out << "wrote " << corpus.size() << " sequences to " << (dir / "corpus.fasta").string() << "\n";
  return kOk;
}

struct PretrainArgs {
  std::string config;
  std::string corpus;
  std::string out;
  std::string name;
  std::string objective;
  std::string steps;
  std::string resume;
  std::optional<std::uint64_t> seed, data_seed, mask_seed, projection_seed;
  bool dump = false;
  bool quiet = false;
};

int cmd_pretrain(const PretrainArgs& a, std::ostream& out) {
  const fs::path config_path = a.config;
  const json j = read_json_file(config_path);
  train::TrainConfig c;
  try {
    c = j.get<train::TrainConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(config_path.string() + ": " + e.what());
  }
  if (!a.name.empty()) c.name = a.name;
  if (!a.objective.empty()) c.objective.kind = obj::parse_kind(a.objective);
  if (!a.steps.empty()) c.budget.checkpoints = parse_list<double>(a.steps, "--steps");
  if (a.seed) c.seeds.init = *a.seed;
  if (a.data_seed) c.seeds.data = *a.data_seed;
  if (a.mask_seed) c.seeds.mask = *a.mask_seed;
  if (a.projection_seed) c.seeds.projection = *a.projection_seed;
  c.validate();
  if (a.dump) {
    out << json(c).dump(2) << "\n";
    return kOk;
  }

  fs::path corpus_path = a.corpus;
  if (corpus_path.empty()) {
    if (!j.contains("corpus")) throw ConfigError("no corpus: pass --corpus or set \"corpus\" in the config");
    corpus_path = j.at("corpus").get<std::string>();
    if (corpus_path.is_relative()) corpus_path = config_path.parent_path() / corpus_path;
  }
  const auto records = seq::read_fasta(corpus_path);
  if (records.empty()) throw DataError(corpus_path.string() + ": no sequences");
  std::vector<std::vector<seq::TokenId>> tokens;
  tokens.reserve(records.size());
  for (const auto& r : records) tokens.push_back(seq::tokenize(r.sequence, c.encoder.tokenizer()));

  train::RunOptions options;
  if (!a.resume.empty()) options.resume_from = fs::path(a.resume);
  const fs::path root = out_root(a.out);
  const auto result = train::run(c, tokens, root, options);
  if (!a.quiet) {
    for (const auto& row : result.ledger.rows) {
      out << c.name << " ckpt_" << row.checkpoint_step << " steps=" << row.optimizer_steps
          << " samples=" << row.samples_seen << " skipped=" << row.skipped_steps << "\n";
    }
  }
  return kOk;
}

struct EmbedArgs {
  std::string ckpt;
  std::string fasta;
  std::string out;
  bool l2 = false;
};

int cmd_embed(const EmbedArgs& a, std::ostream& out) {
  if (!fs::exists(a.ckpt)) throw DataError("checkpoint not found: " + a.ckpt);
  const auto records = seq::read_fasta(a.fasta);
  const auto e = eval::embed_checkpoint(a.ckpt, records, a.l2);
  fs::path dir = a.out;
  if (dir.empty()) dir = fs::path(a.ckpt).parent_path() / ("emb_" + std::to_string(e.checkpoint_step) + (a.l2 ? "_l2" : ""));
  eval::save_embeddings(dir, e);
  out << "embedded " << e.rows() << " sequences to " << dir.string() << "\n";
  return kOk;
}

struct ProbeArgs {
  std::string embeddings;
  std::string task;
  std::string task_name;
  std::string metric;
  std::string results;
  std::string root;
  bool knn = false;
  std::size_t k = 20;
  std::uint64_t seed = 42;
};

fs::path results_path(const std::string& flag, const std::string& root) {
  return flag.empty() ? out_root(root) / "results.jsonl" : fs::path(flag);
}

int cmd_probe(const ProbeArgs& a, std::ostream& out) {
  eval::ProbeSpec spec;
  spec.metric = eval::parse_metric(a.metric);
  if (spec.metric == eval::MetricKind::kRecallAtK) throw ConfigError("probe: use the retrieve command for recall_at_k");
  if (!fs::exists(a.task)) throw DataError("task file not found: " + a.task);
  spec.task = task_name(a.task_name, a.task);
  spec.knn = a.knn;
  spec.k = a.k;
  spec.seed = a.seed;
  const auto emb = eval::load_embeddings(a.embeddings);
  const auto records = seq::read_labeled_csv(a.task);
  const auto r = eval::run_probe(emb, records, spec);
  const auto path = results_path(a.results, a.root);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  eval::append_results(path, std::vector{r});
  out << r.run << " step " << r.checkpoint_step << " " << r.task << " " << r.metric << " (" << r.split
      << ") = " << std::setprecision(6) << r.value << "\n";
  return kOk;
}

struct RetrieveArgs {
  std::string embeddings;
  std::string labels;
  std::string task_name;
  std::string ks = "1,10,30";
  std::string results;
  std::string root;
};

int cmd_retrieve(const RetrieveArgs& a, std::ostream& out) {
  if (!fs::exists(a.labels)) throw DataError("label file not found: " + a.labels);
  const auto ks = parse_list<std::size_t>(a.ks, "--k");
  const auto emb = eval::load_embeddings(a.embeddings);
  const auto records = seq::read_labeled_csv(a.labels);
  const auto rows = eval::run_retrieval(emb, records, task_name(a.task_name, a.labels), ks);
  const auto path = results_path(a.results, a.root);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  eval::append_results(path, rows);
  for (const auto& r : rows) out << r.run << " " << r.task << " " << r.metric << " = " << std::setprecision(6) << r.value << "\n";
  return kOk;
}

struct ReportArgs {
  std::string results;
  std::string root;
  std::string runs;
  std::string baseline;
  std::string out;
  std::string csv;
  std::optional<std::uint64_t> step;
  bool wilcoxon = false;
  std::string holm;
  std::string holm_extra;
  double tau = stats::kTieThreshold;
};

std::size_t parse_family_size(const std::string& s) {
  std::string v = s;
  if (v.rfind("m=", 0) == 0) v = v.substr(2);
  const auto parsed = parse_list<std::size_t>(v, "--holm");
  if (parsed.size() != 1 || parsed[0] == 0) throw ConfigError("--holm expects a family size such as m=15");
  return parsed[0];
}

int cmd_report(const ReportArgs& a, std::ostream& out) {
  const auto path = results_path(a.results, a.root);
  if (!fs::exists(path)) throw DataError("results file not found: " + path.string());
  const auto rows = eval::read_results(path);
  const auto runs = split_names(a.runs);
  if (runs.empty()) throw ConfigError("--runs is empty");
  const auto base = stats::collect_scores(rows, a.baseline, a.step);

  std::vector<stats::Scoreboard> boards;
  for (const auto& run : runs) {
    auto b = stats::scoreboard(run, stats::collect_scores(rows, run, a.step), a.baseline, base, a.tau);
    if (a.wilcoxon) {
      std::vector<double> d;
      for (const auto& t : b.tasks) d.push_back(t.delta);
      b.wilcoxon_p = stats::wilcoxon_signed_rank(d).p;
    }
    boards.push_back(std::move(b));
  }

  if (!a.holm.empty()) {
    // Cells of the family that are not in this report enter through
    // --holm-extra; any still missing count as p = 1.
    const std::size_t m = parse_family_size(a.holm);
    std::vector<double> family;
    for (const auto& b : boards) {
      const auto& p = a.wilcoxon ? b.wilcoxon_p : b.sign_p;
      family.push_back(p.value_or(1.0));
    }
    if (!a.holm_extra.empty()) {
      const auto extra = parse_list<double>(a.holm_extra, "--holm-extra");
      family.insert(family.end(), extra.begin(), extra.end());
    }
    if (family.size() > m) throw ConfigError("--holm family size is smaller than the number of p-values");
    family.resize(m, 1.0);
    const auto adjusted = stats::holm_bonferroni(family);
    for (std::size_t i = 0; i < boards.size(); ++i) boards[i].holm_p = adjusted[i];
  }

  json report{{"baseline", a.baseline}, {"tie_threshold", a.tau}, {"boards", boards}};
  if (boards.size() >= 2) {
    report["delta_delta"] = {{"a", boards[0].run}, {"b", boards[1].run}, {"value", stats::delta_delta(boards[0], boards[1])}};
  }
  fs::path out_path = a.out.empty() ? out_root(a.root) / "scoreboard.json" : fs::path(a.out);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  store::atomic_write_text(out_path, report.dump(2) + "\n");
  fs::path csv_path = a.csv.empty() ? fs::path(out_path).replace_extension(".csv") : fs::path(a.csv);
  store::atomic_write_text(csv_path, stats::to_csv(boards));

  out << "baseline " << a.baseline << ", " << base.size() << " tasks\n";
  for (const auto& b : boards) {
    out << b.run << "  W/L/T " << b.wins << "/" << b.losses << "/" << b.ties << "  macro_delta " << std::showpos
        << std::fixed << std::setprecision(4) << b.macro_mean_delta << std::noshowpos << "  p ";
    print_p(out, b.sign_p);
    if (a.wilcoxon) {
      out << "  p_wilcoxon ";
      print_p(out, b.wilcoxon_p);
    }
    if (b.holm_p) {
      out << "  p_holm ";
      print_p(out, b.holm_p);
    }
    out << "\n";
  }
  if (report.contains("delta_delta")) {
    out << "delta_delta " << boards[0].run << " - " << boards[1].run << " = " << std::showpos << std::fixed
        << std::setprecision(4) << report["delta_delta"]["value"].get<double>() << std::noshowpos << "\n";
  }
  return kOk;
}

int cmd_holm(const std::string& p_text, std::size_t m, std::ostream& out) {
  auto p = parse_list<double>(p_text, "--p");
  const std::size_t given = p.size();
  if (m != 0) {
    if (m < given) throw ConfigError("--m is smaller than the number of p-values");
    p.resize(m, 1.0);
  }
  std::vector<double> adjusted;
  try {
    adjusted = stats::holm_bonferroni(p);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  out << std::setprecision(6);
  for (std::size_t i = 0; i < given; ++i) out << p[i] << " " << adjusted[i] << "\n";
  return kOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Masked-LM and latent-prediction pretraining for protein sequence encoders"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every command");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write a synthetic motif corpus and probe task CSVs");
  s->add_option("--out", synth.out, "Output directory (default: $MLMJEPA_OUT_ROOT or ./runs)");
  s->add_option("--n", synth.config.n_sequences, "Number of sequences")->capture_default_str();
  s->add_option("--families", synth.config.n_families, "Number of composition families")->capture_default_str();
  s->add_option("--min-len", synth.config.min_len, "Minimum length")->capture_default_str();
  s->add_option("--max-len", synth.config.max_len, "Maximum length")->capture_default_str();
  s->add_option("--seed", synth.config.seed, "Generator seed")->capture_default_str();

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "Train an encoder and write checkpoints");
  p->add_option("--config", pre.config, "JSON training config")->required();
  p->add_option("--corpus", pre.corpus, "FASTA corpus (overrides the config's \"corpus\")");
  p->add_option("--out", pre.out, "Output root (default: $MLMJEPA_OUT_ROOT or ./runs)");
  p->add_option("--name", pre.name, "Run name");
  p->add_option("--objective", pre.objective, "mlm | mlm_jepa_masked | mlm_jepa_allpos | jepa_only");
  p->add_option("--steps", pre.steps, "Comma-separated checkpoint budget points");
  p->add_option("--seed", pre.seed, "Init seed");
  p->add_option("--data-seed", pre.data_seed, "Batch order seed");
  p->add_option("--mask-seed", pre.mask_seed, "Masking seed");
  p->add_option("--projection-seed", pre.projection_seed, "SIGReg projection seed");
  p->add_option("--resume", pre.resume, "Checkpoint directory to resume from");
  p->add_flag("--dump-config", pre.dump, "Print the resolved config and exit");
  p->add_flag("--quiet", pre.quiet, "No per-checkpoint output");

  EmbedArgs emb;
  auto* e = app.add_subcommand("embed", "Mean-pooled embeddings from a checkpoint");
  e->add_option("--ckpt", emb.ckpt, "Checkpoint directory")->required();
  e->add_option("--fasta", emb.fasta, "Sequences to embed")->required();
  e->add_option("--out", emb.out, "Output directory (default: <run>/emb_<step>[_l2])");
  e->add_flag("--l2", emb.l2, "L2-normalize each embedding");

  ProbeArgs probe;
  auto* pr = app.add_subcommand("probe", "Fit a probe on the train split and score the test split");
  pr->add_option("--embeddings", probe.embeddings, "Embedding directory")->required();
  pr->add_option("--task", probe.task, "Task CSV (id,sequence,label,split)")->required();
  pr->add_option("--metric", probe.metric, "f1_macro | auc | spearman")->required();
  pr->add_option("--name", probe.task_name, "Task name (default: CSV file stem)");
  pr->add_flag("--knn", probe.knn, "K-nearest-neighbour probe instead of a linear one");
  pr->add_option("--k", probe.k, "Neighbours for --knn")->capture_default_str();
  pr->add_option("--seed", probe.seed, "Probe seed")->capture_default_str();
  pr->add_option("--results", probe.results, "Results file (default: <root>/results.jsonl)");
  pr->add_option("--root", probe.root, "Output root (default: $MLMJEPA_OUT_ROOT or ./runs)");

  RetrieveArgs ret;
  auto* r = app.add_subcommand("retrieve", "Recall@k by cosine similarity, self excluded");
  r->add_option("--embeddings", ret.embeddings, "Embedding directory")->required();
  r->add_option("--labels", ret.labels, "Label CSV (id,sequence,label[,split])")->required();
  r->add_option("--k", ret.ks, "Comma-separated k values")->capture_default_str();
  r->add_option("--name", ret.task_name, "Task name (default: CSV file stem)");
  r->add_option("--results", ret.results, "Results file (default: <root>/results.jsonl)");
  r->add_option("--root", ret.root, "Output root (default: $MLMJEPA_OUT_ROOT or ./runs)");

  ReportArgs rep;
  auto* rp = app.add_subcommand("report", "Scoreboards of runs against a baseline");
  rp->add_option("--runs", rep.runs, "Comma-separated run names")->required();
  rp->add_option("--baseline", rep.baseline, "Baseline run name")->required();
  rp->add_option("--results", rep.results, "Results file (default: <root>/results.jsonl)");
  rp->add_option("--root", rep.root, "Output root (default: $MLMJEPA_OUT_ROOT or ./runs)");
  rp->add_option("--out", rep.out, "Scoreboard JSON (default: <root>/scoreboard.json)");
  rp->add_option("--csv", rep.csv, "Table CSV (default: scoreboard path with .csv)");
  rp->add_option("--step", rep.step, "Checkpoint step (default: latest per run)");
  rp->add_option("--tau", rep.tau, "Tie threshold on |delta|")->capture_default_str();
  rp->add_flag("--wilcoxon", rep.wilcoxon, "Add two-sided Wilcoxon signed-rank p-values");
  rp->add_option("--holm", rep.holm, "Holm-adjust over a family of this size, e.g. m=15");
  rp->add_option("--holm-extra", rep.holm_extra, "Comma-separated p-values of the family's other cells");

  std::string holm_p;
  std::size_t holm_m = 0;
  auto* h = app.add_subcommand("holm", "Holm-Bonferroni adjustment of a list of p-values");
  h->add_option("--p", holm_p, "Comma-separated p-values")->required();
  h->add_option("--m", holm_m, "Family size; missing cells count as p = 1");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex, out, err);
    return kConfig;
  }

  try {
    if (s->parsed()) return cmd_synth(synth, out);
    if (p->parsed()) return cmd_pretrain(pre, out);
    if (e->parsed()) return cmd_embed(emb, out);
    if (pr->parsed()) return cmd_probe(probe, out);
    if (r->parsed()) return cmd_retrieve(ret, out);
    if (rp->parsed()) return cmd_report(rep, out);
    if (h->parsed()) return cmd_holm(holm_p, holm_m, out);
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << "\n";
    return kConfig;
  } catch (const DataError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kData;
  } catch (const NumericalError& ex) {
    err << "numerical error in " << ex.where() << ": " << ex.what() << "\n";
    return kNumerical;
  } catch (const std::invalid_argument& ex) {
    err << "invalid argument: " << ex.what() << "\n";
    return kConfig;
  } catch (const fs::filesystem_error& ex) {
    err << "data error: " << ex.what() << "\n";
    return kData;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kFailure;
  }
  return kFailure;
}

}  // namespace mlmjepa::cli
