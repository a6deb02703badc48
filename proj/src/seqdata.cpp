#include "mlmjepa/seqdata.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <fstream>
#include <random>
#include <stdexcept>

#include "mlmjepa/error.hpp"

namespace mlmjepa::seq {

namespace {

constexpr std::array<std::string_view, 5> kSpecialNames{"<pad>", "<mask>", "<cls>", "<eos>",
                                                         "<unk>"};

double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool plausible_residues(std::string_view s) {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(),
                     [](char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; });
}

void check_malformed_fraction(const IngestStats& stats, const std::filesystem::path& path) {
  const std::size_t total = stats.accepted + stats.malformed;
  if (total > 0 &&
      static_cast<double>(stats.malformed) > kMaxMalformedFraction * static_cast<double>(total)) {
    throw DataError(path.string() + ": " + std::to_string(stats.malformed) + " of " +
                    std::to_string(total) + " records malformed");
  }
}

// Line reader over plain or gzip input; zlib reads uncompressed files
// transparently.
class GzLines {
 public:
  explicit GzLines(const std::filesystem::path& path) : path_(path) {
    file_ = gzopen(path.string().c_str(), "rb");
    if (!file_) throw DataError("cannot open " + path.string());
  }
  ~GzLines() {
    if (file_) gzclose(file_);
  }
  GzLines(const GzLines&) = delete;
  GzLines& operator=(const GzLines&) = delete;

  bool getline(std::string& line) {
    line.clear();
    std::array<char, 4096> buf{};
    while (gzgets(file_, buf.data(), static_cast<int>(buf.size())) != nullptr) {
      line += buf.data();
      if (!line.empty() && line.back() == '\n') {
        line.pop_back();
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return true;
      }
    }
    int err = 0;
    gzerror(file_, &err);
    if (err != Z_OK && err != Z_STREAM_END) throw DataError("read error in " + path_.string());
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return !line.empty();
  }

 private:
  std::filesystem::path path_;
  gzFile file_ = nullptr;
};

}  // namespace

// ---------------------------------------------------------------------------

TokenId Vocabulary::id(char residue) {
  const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(residue)));
  if (auto p = kCanonical.find(up); p != std::string_view::npos) {
    return kFirstCanonical + static_cast<TokenId>(p);
  }
  if (auto p = kAmbiguous.find(up); p != std::string_view::npos) {
    return kFirstCanonical + static_cast<TokenId>(kCanonical.size() + p);
  }
  return kUnk;
}

std::string Vocabulary::symbol(TokenId id) {
  if (id < 0 || static_cast<std::size_t>(id) >= size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  if (is_special(id)) return std::string(kSpecialNames[static_cast<std::size_t>(id)]);
  const auto off = static_cast<std::size_t>(id - kFirstCanonical);
  if (off < kCanonical.size()) return std::string(1, kCanonical[off]);
  return std::string(1, kAmbiguous[off - kCanonical.size()]);
}

std::vector<TokenId> tokenize(std::string_view sequence, const TokenizerConfig& config) {
  if (sequence.empty()) throw std::invalid_argument("tokenize: empty sequence");
  const std::size_t frame = config.add_cls_eos ? 2 : 0;
  if (config.max_len <= frame) throw std::invalid_argument("tokenize: max_len too small");
  const std::size_t keep = std::min(sequence.size(), config.max_len - frame);
  std::vector<TokenId> ids;
  ids.reserve(keep + frame);
  if (config.add_cls_eos) ids.push_back(Vocabulary::kCls);
  for (std::size_t i = 0; i < keep; ++i) ids.push_back(Vocabulary::id(sequence[i]));
  if (config.add_cls_eos) ids.push_back(Vocabulary::kEos);
  return ids;
}

std::string decode(std::span<const TokenId> ids) {
  std::string out;
  for (TokenId id : ids) {
    if (!Vocabulary::is_special(id)) out += Vocabulary::symbol(id);
  }
  return out;
}

std::size_t TokenBatch::real_tokens() const {
  return static_cast<std::size_t>(std::count(attention.begin(), attention.end(), 1));
}

TokenBatch make_batch(std::span<const std::vector<TokenId>> rows, std::size_t max_len) {
  TokenBatch b;
  b.batch = rows.size();
  for (const auto& r : rows) {
    if (r.size() > max_len) {
      throw std::invalid_argument("make_batch: row of " + std::to_string(r.size()) +
                                  " tokens exceeds max_len " + std::to_string(max_len));
    }
    if (r.empty()) throw std::invalid_argument("make_batch: empty row");
    b.length = std::max(b.length, r.size());
  }
  b.ids.assign(b.batch * b.length, Vocabulary::kPad);
  b.attention.assign(b.batch * b.length, 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i].begin(), rows[i].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.length));
    std::fill_n(b.attention.begin() + static_cast<std::ptrdiff_t>(i * b.length), rows[i].size(), 1);
    b.lengths.push_back(rows[i].size());
  }
  return b;
}

bool maskable(TokenId id) { return !Vocabulary::is_special(id); }

TokenBatch MaskPlan::apply(const TokenBatch& clean) const {
  if (corrupted.size() != clean.ids.size()) {
    throw std::invalid_argument("MaskPlan::apply: plan does not match batch");
  }
  TokenBatch out = clean;
  out.ids = corrupted;
  return out;
}

MaskPlan make_mask_plan(const TokenBatch& batch, double mask_rate, std::uint64_t seed,
                        const MaskSplit& split) {
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) {
    throw std::invalid_argument("make_mask_plan: mask_rate must be in (0, 1)");
  }
  std::mt19937_64 rng(seed);
  MaskPlan plan;
  plan.actions.assign(batch.ids.size(), MaskAction::kNone);
  plan.corrupted = batch.ids;
  bool any_eligible = false;
  for (std::size_t p = 0; p < batch.ids.size(); ++p) {
    const TokenId id = batch.ids[p];
    if (!batch.attention[p] || !maskable(id)) continue;
    any_eligible = true;
    if (unit_uniform(rng) >= mask_rate) continue;
    const double u = unit_uniform(rng);
    MaskAction action = MaskAction::kKeep;
    if (u < split.mask) {
      action = MaskAction::kMask;
      plan.corrupted[p] = Vocabulary::kMask;
    } else if (u < split.mask + split.random) {
      action = MaskAction::kRandom;
      const auto r = static_cast<TokenId>(unit_uniform(rng) * Vocabulary::kCanonicalCount);
      plan.corrupted[p] = Vocabulary::kFirstCanonical + r;
    }
    plan.actions[p] = action;
    plan.positions.push_back(p);
    plan.originals.push_back(id);
  }
  plan.no_eligible_positions = !any_eligible;
  return plan;
}

// --- ingestion -------------------------------------------------------------

class FastaReader::LineSource : public GzLines {
 public:
  using GzLines::GzLines;
};

FastaReader::FastaReader(const std::filesystem::path& path)
    : source_(std::make_unique<LineSource>(path)) {
  // Text before the first header is one malformed record.
  std::string line;
  bool stray = false;
  while (source_->getline(line)) {
    if (!line.empty() && line[0] == '>') {
      pending_header_ = line.substr(1);
      break;
    }
    if (!trim(line).empty()) stray = true;
  }
  if (stray) ++stats_.malformed;
}

FastaReader::~FastaReader() = default;
FastaReader::FastaReader(FastaReader&&) noexcept = default;
FastaReader& FastaReader::operator=(FastaReader&&) noexcept = default;

std::optional<SequenceRecord> FastaReader::next() {
  while (pending_header_) {
    const std::string_view header = trim(*pending_header_);
    SequenceRecord rec;
    rec.id = std::string(header.substr(0, header.find_first_of(" \t")));
    pending_header_.reset();
    std::string line;
    while (source_->getline(line)) {
      if (!line.empty() && line[0] == '>') {
        pending_header_ = line.substr(1);
        break;
      }
      rec.sequence += trim(line);
    }
    if (!rec.sequence.empty() && rec.sequence.back() == '*') rec.sequence.pop_back();
    if (rec.id.empty() || !plausible_residues(rec.sequence)) {
      ++stats_.malformed;
      continue;
    }
    ++stats_.accepted;
    return rec;
  }
  return std::nullopt;
}

std::vector<SequenceRecord> read_fasta(const std::filesystem::path& path) {
  FastaReader reader(path);
  std::vector<SequenceRecord> out;
  while (auto rec = reader.next()) out.push_back(std::move(*rec));
  check_malformed_fraction(reader.stats(), path);
  return out;
}

void write_fasta(const std::filesystem::path& path, std::span<const SequenceRecord> records) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto& r : records) {
    os << '>' << r.id << '\n';
    for (std::size_t i = 0; i < r.sequence.size(); i += 60) os << r.sequence.substr(i, 60) << '\n';
  }
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw DataError("unterminated quoted field");
  fields.push_back(std::move(cur));
  return fields;
}

std::vector<LabeledRecord> read_labeled_csv(const std::filesystem::path& path, IngestStats* stats) {
  GzLines lines(path);
  auto next_line = [&](std::string& line) { return lines.getline(line); };

  std::string line;
  if (!next_line(line)) throw DataError(path.string() + ": empty CSV");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // BOM
  const auto header = split_csv_line(line);
  auto column = [&](std::string_view name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (trim(header[i]) == name) return i;
    }
    return std::nullopt;
  };
  const auto seq_col = column("sequence");
  const auto label_col = column("label");
  if (!seq_col || !label_col) {
    throw DataError(path.string() + ": header must name 'sequence' and 'label' columns");
  }
  const auto id_col = column("id");
  const auto split_col = column("split");

  IngestStats local;
  std::vector<LabeledRecord> out;
  std::size_t row = 0;
  while (next_line(line)) {
    if (trim(line).empty()) continue;
    ++row;
    std::vector<std::string> fields;
    try {
      fields = split_csv_line(line);
    } catch (const DataError&) {
      ++local.malformed;
      continue;
    }
    if (fields.size() != header.size()) {
      ++local.malformed;
      continue;
    }
    LabeledRecord rec;
    rec.sequence = std::string(trim(fields[*seq_col]));
    rec.label = std::string(trim(fields[*label_col]));
    if (!plausible_residues(rec.sequence) || rec.label.empty()) {
      ++local.malformed;
      continue;
    }
    rec.id = id_col ? std::string(trim(fields[*id_col])) : "row" + std::to_string(row);
    if (split_col) rec.split = std::string(trim(fields[*split_col]));
    double v = 0.0;
    const char* b = rec.label.data();
    const char* e = b + rec.label.size();
    if (auto [p, ec] = std::from_chars(b, e, v); ec == std::errc() && p == e) rec.numeric_label = v;
    out.push_back(std::move(rec));
    ++local.accepted;
  }
  check_malformed_fraction(local, path);
  if (stats) *stats = local;
  return out;
}

// --- batching --------------------------------------------------------------

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

BatchSchedule::BatchSchedule(std::size_t corpus_size, std::size_t batch_size, std::uint64_t seed)
    : corpus_size_(corpus_size), batch_size_(batch_size), seed_(seed) {
  if (corpus_size == 0) throw std::invalid_argument("BatchSchedule: empty corpus");
  if (batch_size == 0) throw std::invalid_argument("BatchSchedule: batch_size must be >= 1");
}

std::vector<std::size_t> BatchSchedule::permutation(std::uint64_t epoch) const {
  std::vector<std::size_t> perm(corpus_size_);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::mt19937_64 rng(mix_seed(seed_, epoch));
  for (std::size_t i = perm.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

std::vector<std::size_t> BatchSchedule::indices(std::uint64_t step) const {
  std::vector<std::size_t> out;
  out.reserve(batch_size_);
  const std::uint64_t start = step * batch_size_;
  std::uint64_t cached_epoch = ~0ULL;
  std::vector<std::size_t> perm;
  for (std::size_t j = 0; j < batch_size_; ++j) {
    const std::uint64_t pos = start + j;
    const std::uint64_t epoch = pos / corpus_size_;
    if (epoch != cached_epoch) {
      perm = permutation(epoch);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % corpus_size_]);
  }
  return out;
}

}  // namespace mlmjepa::seq
