#include <zlib.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "doctest.h"
#include "mlmjepa/error.hpp"
#include "mlmjepa/seqdata.hpp"

using namespace mlmjepa;
using namespace mlmjepa::seq;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  fs::path dir = fs::temp_directory_path() / "mlmjepa_test_seqdata";
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

std::string random_protein(std::mt19937_64& rng, std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += Vocabulary::kCanonical[rng() % 20];
  return s;
}

}  // namespace

TEST_CASE("tokenize frames with CLS/EOS") {
  const auto ids = tokenize("ACD");
  REQUIRE(ids.size() == 5);
  CHECK(ids[0] == Vocabulary::kCls);
  CHECK(ids[1] == Vocabulary::id('A'));
  CHECK(ids[2] == Vocabulary::id('C'));
  CHECK(ids[3] == Vocabulary::id('D'));
  CHECK(ids[4] == Vocabulary::kEos);
}

TEST_CASE("decode inverts tokenize on canonical symbols") {
  CHECK(decode(tokenize("MKV")) == "MKV");
  std::string all(Vocabulary::kCanonical);
  all += Vocabulary::kAmbiguous;
  CHECK(decode(tokenize(all, {false, 512})) == all);
}

TEST_CASE("vocabulary ids are dense and PAD is unique") {
  std::set<TokenId> seen;
  for (char c : Vocabulary::kCanonical) seen.insert(Vocabulary::id(c));
  for (char c : Vocabulary::kAmbiguous) seen.insert(Vocabulary::id(c));
  CHECK(seen.size() == 25);
  CHECK(*seen.begin() == 5);
  CHECK(*seen.rbegin() == static_cast<TokenId>(Vocabulary::size()) - 1);
  CHECK(seen.count(Vocabulary::kPad) == 0);
  CHECK(Vocabulary::id('#') == Vocabulary::kUnk);
  CHECK(Vocabulary::id('a') == Vocabulary::id('A'));
}

TEST_CASE("tokenize truncates from the right") {
  std::mt19937_64 rng(1);
  const std::string s = random_protein(rng, 600);
  const auto plain = tokenize(s, {false, 512});
  REQUIRE(plain.size() == 512);
  CHECK(decode(plain) == s.substr(0, 512));

  const auto framed = tokenize(s, {true, 512});
  REQUIRE(framed.size() == 512);
  CHECK(framed.front() == Vocabulary::kCls);
  CHECK(framed.back() == Vocabulary::kEos);
  CHECK(decode(framed) == s.substr(0, 510));
}

TEST_CASE("tokenize rejects empty input") { CHECK_THROWS_AS(tokenize(""), std::invalid_argument); }

TEST_CASE("make_batch pads to the longest row") {
  const std::vector<std::vector<TokenId>> rows{tokenize("AC"), tokenize("ACDEF")};
  const auto b = make_batch(rows);
  CHECK(b.batch == 2);
  CHECK(b.length == 7);
  CHECK(b.lengths == std::vector<std::size_t>{4, 7});
  for (std::size_t i = 4; i < 7; ++i) {
    CHECK(b.at(0, i) == Vocabulary::kPad);
    CHECK(b.attention[i] == 0);
  }
  CHECK(b.real_tokens() == 11);
  CHECK_THROWS(make_batch(rows, 5));
}

TEST_CASE("mask plan is deterministic in seed") {
  std::mt19937_64 rng(2);
  std::vector<std::vector<TokenId>> rows;
  for (int i = 0; i < 8; ++i) rows.push_back(tokenize(random_protein(rng, 20 + i)));
  const auto b = make_batch(rows);
  const auto p1 = make_mask_plan(b, 0.2, 42);
  const auto p2 = make_mask_plan(b, 0.2, 42);
  CHECK(p1.positions == p2.positions);
  CHECK(p1.corrupted == p2.corrupted);
  CHECK(p1.actions == p2.actions);
  const auto p3 = make_mask_plan(b, 0.2, 43);
  CHECK(p3.corrupted != p1.corrupted);
}

TEST_CASE("mask plan never selects specials or padding and keeps KEEP ids") {
  std::mt19937_64 rng(3);
  std::vector<std::vector<TokenId>> rows;
  for (int i = 0; i < 32; ++i) {
    auto ids = tokenize(random_protein(rng, 5 + rng() % 40));
    ids[1 + rng() % (ids.size() - 2)] = Vocabulary::kUnk;
    rows.push_back(ids);
  }
  const auto b = make_batch(rows);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto plan = make_mask_plan(b, 0.5, seed);
    for (std::size_t p = 0; p < b.ids.size(); ++p) {
      const auto a = plan.actions[p];
      if (!b.attention[p] || Vocabulary::is_special(b.ids[p])) {
        CHECK(a == MaskAction::kNone);
        CHECK(plan.corrupted[p] == b.ids[p]);
      }
      if (a == MaskAction::kKeep || a == MaskAction::kNone) CHECK(plan.corrupted[p] == b.ids[p]);
      if (a == MaskAction::kMask) CHECK(plan.corrupted[p] == Vocabulary::kMask);
      if (a == MaskAction::kRandom) CHECK(Vocabulary::is_canonical(plan.corrupted[p]));
    }
    for (std::size_t i = 0; i < plan.positions.size(); ++i) {
      CHECK(plan.originals[i] == b.ids[plan.positions[i]]);
    }
  }
}

TEST_CASE("mask plan with nothing eligible is flagged") {
  TokenBatch b = make_batch(std::vector<std::vector<TokenId>>{{Vocabulary::kCls, Vocabulary::kEos}});
  const auto plan = make_mask_plan(b, 0.2, 1);
  CHECK(plan.no_eligible_positions);
  CHECK(plan.positions.empty());
  CHECK_THROWS(make_mask_plan(b, 0.0, 1));
  CHECK_THROWS(make_mask_plan(b, 1.0, 1));
}

TEST_CASE("mask plan frequencies over many positions") {
  std::mt19937_64 rng(4);
  std::vector<std::vector<TokenId>> rows;
  for (int i = 0; i < 2000; ++i) rows.push_back(tokenize(random_protein(rng, 500), {false, 512}));
  const auto b = make_batch(rows);
  const auto plan = make_mask_plan(b, 0.2, 7);
  std::size_t counts[4] = {0, 0, 0, 0};
  for (auto a : plan.actions) ++counts[static_cast<int>(a)];
  const double eligible = 1e6;
  const double selected = static_cast<double>(plan.positions.size());
  CHECK(std::abs(selected / eligible - 0.2) < 0.002);
  CHECK(std::abs(counts[1] / selected - 0.8) < 0.005);
  CHECK(std::abs(counts[2] / selected - 0.1) < 0.005);
  CHECK(std::abs(counts[3] / selected - 0.1) < 0.005);
}

TEST_CASE("FASTA reader handles two records and wrapped lines") {
  const auto dir = scratch_dir();
  write_text(dir / "two.fa", ">sp|P1 first protein\nMKV\n>P2\nACDEF\n");
  const auto recs = read_fasta(dir / "two.fa");
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].id == "sp|P1");
  CHECK(recs[0].sequence == "MKV");
  CHECK(recs[1].id == "P2");
  CHECK(recs[1].sequence == "ACDEF");

  std::mt19937_64 rng(5);
  const std::string long_seq = random_protein(rng, 333);
  std::string text = ">wrapped\n";
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < long_seq.size(); i += 80) lines.push_back(long_seq.substr(i, 80));
  for (const auto& l : lines) text += l + "\n";
  write_text(dir / "wrapped.fa", text);
  std::string joined;  // naive line-joining oracle
  for (const auto& l : lines) joined += l;
  const auto w = read_fasta(dir / "wrapped.fa");
  REQUIRE(w.size() == 1);
  CHECK(w[0].sequence == joined);
}

TEST_CASE("FASTA reader accepts gzip input") {
  const auto dir = scratch_dir();
  const auto path = dir / "x.fa.gz";
  gzFile f = gzopen(path.string().c_str(), "wb");
  const std::string text = ">a\nMKV\nLL\n>b\nWW\n";
  gzwrite(f, text.data(), static_cast<unsigned>(text.size()));
  gzclose(f);
  const auto recs = read_fasta(path);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].sequence == "MKVLL");
}

TEST_CASE("FASTA malformed records are skipped, and too many abort") {
  const auto dir = scratch_dir();
  std::string ok;
  for (int i = 0; i < 20; ++i) ok += ">r" + std::to_string(i) + "\nACDE\n";
  write_text(dir / "one_bad.fa", ok + ">empty\n");
  FastaReader reader(dir / "one_bad.fa");
  std::size_t n = 0;
  while (reader.next()) ++n;
  CHECK(n == 20);
  CHECK(reader.stats().malformed == 1);

  write_text(dir / "many_bad.fa", ">a\nAC\n>b\n12\n>c\n\n>d\nAC\n");
  CHECK_THROWS_AS(read_fasta(dir / "many_bad.fa"), DataError);
  CHECK_THROWS_AS(read_fasta(dir / "does_not_exist.fa"), DataError);
}

TEST_CASE("labeled CSV parsing") {
  const auto dir = scratch_dir();
  write_text(dir / "t.csv", "sequence,label\nACDEF,0.73\n\"MKV\",x\n");
  IngestStats stats;
  const auto recs = read_labeled_csv(dir / "t.csv", &stats);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].sequence == "ACDEF");
  CHECK(recs[1].sequence == "MKV");
  CHECK_FALSE(recs[1].numeric_label.has_value());
  REQUIRE(recs[0].numeric_label.has_value());
  CHECK(*recs[0].numeric_label == 0.73);

  std::string many = "id,sequence,label,split\n";
  for (int i = 0; i < 20; ++i) many += "s" + std::to_string(i) + ",\"ACD\",cls" + std::to_string(i % 2) + ",train\n";
  many += "bad,row\n";
  write_text(dir / "m.csv", many);
  const auto m = read_labeled_csv(dir / "m.csv", &stats);
  CHECK(m.size() == 20);
  CHECK(stats.malformed == 1);
  CHECK(m[3].id == "s3");
  CHECK(m[3].label == "cls1");
  CHECK_FALSE(m[3].numeric_label.has_value());
  CHECK(m[3].split == "train");

  write_text(dir / "nohdr.csv", "seq,y\nAC,1\n");
  CHECK_THROWS_AS(read_labeled_csv(dir / "nohdr.csv"), DataError);
}

TEST_CASE("split_csv_line honours quotes") {
  const auto f = split_csv_line("a,\"b,c\",\"say \"\"hi\"\"\",");
  REQUIRE(f.size() == 4);
  CHECK(f[1] == "b,c");
  CHECK(f[2] == "say \"hi\"");
  CHECK(f[3].empty());
}

TEST_CASE("batch schedule is order-stable and covers each epoch") {
  BatchSchedule a(10, 4, 99), b(10, 4, 99);
  std::multiset<std::size_t> epoch0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto ia = a.indices(s);
    CHECK(ia == b.indices(s));
    for (auto i : ia) epoch0.insert(i);
  }
  // 20 draws = two full epochs
  for (std::size_t i = 0; i < 10; ++i) CHECK(epoch0.count(i) == 2);
  CHECK(BatchSchedule(10, 4, 100).indices(0) != a.indices(0));
}
