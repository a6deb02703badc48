#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mlmjepa::seq {

using TokenId = std::int32_t;

/// Single-character amino-acid vocabulary.
///
/// Layout: PAD, MASK, CLS, EOS, UNK, then the 20 canonical residues
/// "ACDEFGHIKLMNPQRSTVWY", then the ambiguity codes "XBZUO".
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kMask = 1;
  static constexpr TokenId kCls = 2;
  static constexpr TokenId kEos = 3;
  static constexpr TokenId kUnk = 4;
  static constexpr TokenId kFirstCanonical = 5;
  static constexpr std::size_t kCanonicalCount = 20;
  static constexpr std::string_view kCanonical = "ACDEFGHIKLMNPQRSTVWY";
  static constexpr std::string_view kAmbiguous = "XBZUO";

  static constexpr std::size_t size() { return 5 + kCanonical.size() + kAmbiguous.size(); }

  /// Upper- or lower-case residue letter to id; anything else maps to UNK.
  static TokenId id(char residue);
  /// Inverse of id(); specials render as '<pad>', '<mask>', ...
  static std::string symbol(TokenId id);
  static bool is_special(TokenId id) { return id >= 0 && id <= kUnk; }
  static bool is_canonical(TokenId id) {
    return id >= kFirstCanonical && id < kFirstCanonical + static_cast<TokenId>(kCanonicalCount);
  }
};

struct TokenizerConfig {
  bool add_cls_eos = true;
  std::size_t max_len = 512;
};

/// Encodes a residue string, keeping the N-terminal prefix when it does not
/// fit. With framing the result is CLS + residues + EOS (EOS kept on
/// truncation). Throws std::invalid_argument on an empty string.
std::vector<TokenId> tokenize(std::string_view sequence, const TokenizerConfig& config = {});

/// Residue letters only; specials are dropped.
std::string decode(std::span<const TokenId> ids);

struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<TokenId> ids;              // batch * length, PAD-filled
  std::vector<std::uint8_t> attention;   // 1 for real tokens
  std::vector<std::size_t> lengths;

  TokenId at(std::size_t b, std::size_t i) const { return ids[b * length + i]; }
  std::size_t real_tokens() const;
};

/// Right-pads to the longest row; rows longer than `max_len` are rejected.
TokenBatch make_batch(std::span<const std::vector<TokenId>> rows, std::size_t max_len = 512);

enum class MaskAction : std::uint8_t { kNone = 0, kMask, kRandom, kKeep };

struct MaskPlan {
  std::vector<MaskAction> actions;  // per batch position
  std::vector<TokenId> corrupted;   // student input ids
  std::vector<std::size_t> positions;  // flat indices of selected positions, ascending
  std::vector<TokenId> originals;      // ids at `positions` before corruption
  bool no_eligible_positions = false;

  TokenBatch apply(const TokenBatch& clean) const;
};

struct MaskSplit {
  double mask = 0.8;
  double random = 0.1;
  double keep = 0.1;
};

/// True for positions an MLM plan may select: real tokens that are not
/// specials (PAD, MASK, CLS, EOS, UNK).
bool maskable(TokenId id);

/// Independent Bernoulli(mask_rate) selection of maskable positions, then an
/// 80/10/10 MASK/RANDOM/KEEP assignment. RANDOM draws uniformly from the 20
/// canonical residues. Deterministic in (batch, seed).
MaskPlan make_mask_plan(const TokenBatch& batch, double mask_rate, std::uint64_t seed,
                        const MaskSplit& split = {});

// --- ingestion -------------------------------------------------------------

struct SequenceRecord {
  std::string id;
  std::string sequence;
};

struct LabeledRecord {
  std::string id;
  std::string sequence;
  std::string label;
  std::optional<double> numeric_label;
  std::string split;  // empty when the file has no split column
};

struct IngestStats {
  std::size_t accepted = 0;
  std::size_t malformed = 0;
};

/// Fraction of malformed records above which ingestion aborts.
inline constexpr double kMaxMalformedFraction = 0.10;

/// Streaming FASTA reader; wrapped lines are concatenated, `>` header text
/// up to the first whitespace becomes the id. Files ending in ".gz" are
/// decompressed on the fly.
class FastaReader {
 public:
  explicit FastaReader(const std::filesystem::path& path);
  ~FastaReader();
  FastaReader(FastaReader&&) noexcept;
  FastaReader& operator=(FastaReader&&) noexcept;

  /// Next well-formed record; malformed ones are counted and skipped.
  std::optional<SequenceRecord> next();
  const IngestStats& stats() const { return stats_; }

 private:
  class LineSource;
  std::unique_ptr<LineSource> source_;
  std::optional<std::string> pending_header_;
  IngestStats stats_;
};

std::vector<SequenceRecord> read_fasta(const std::filesystem::path& path);
void write_fasta(const std::filesystem::path& path, std::span<const SequenceRecord> records);

/// CSV with a header naming at least `sequence` and `label` columns;
/// optional `id` and `split` columns are picked up when present.
std::vector<LabeledRecord> read_labeled_csv(const std::filesystem::path& path,
                                            IngestStats* stats = nullptr);

/// Splits one CSV line honoring double-quoted fields ("" escapes a quote).
std::vector<std::string> split_csv_line(std::string_view line);

/// Deterministic shuffled batching: step s draws the s-th block of
/// `batch_size` indices from concatenated per-epoch permutations.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t corpus_size, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> indices(std::uint64_t step) const;

 private:
  std::vector<std::size_t> permutation(std::uint64_t epoch) const;
  std::size_t corpus_size_;
  std::size_t batch_size_;
  std::uint64_t seed_;
};

/// SplitMix64 mixing of a base seed with a stream index.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace mlmjepa::seq
