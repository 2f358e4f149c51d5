#include "kvs/taskgen.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <stdexcept>

#include "kvs/serial.hpp"

namespace kvs {

namespace {

constexpr std::uint32_t kCorpusMagic = 0x43535643U;  // "CVSC"
constexpr std::uint32_t kCorpusVersion = 1;

}  // namespace

int ask_marker(int vocab) { return vocab - 1; }
int copy_marker(int vocab) { return vocab - 2; }

SyntheticCorpus gen_corpus(std::uint64_t seed, int n, int fact_count, int vocab) {
  if (n < 1) throw std::invalid_argument("gen_corpus: n must be >= 1");
  if (vocab <= kMarkerReserve + 2) throw std::invalid_argument("gen_corpus: vocab too small for markers");
  if (fact_count < 1) throw std::invalid_argument("gen_corpus: fact_count must be >= 1");
  if (fact_count * kFactSpan > n) {
    std::ostringstream msg;
    msg << "gen_corpus: overcrowded facts (" << fact_count << " x " << kFactSpan << " tokens > n=" << n << ")";
    throw std::invalid_argument(msg.str());
  }

  SyntheticCorpus c;
  c.seed = seed;
  c.n = n;
  c.vocab = vocab;
  const int filler_limit = vocab - kMarkerReserve;

  Prng g = Prng(seed).split(0x636f7270ULL);  // "corp" stream
  c.tokens.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) c.tokens[static_cast<std::size_t>(i)] = static_cast<int>(g.next_below(filler_limit));

  std::set<std::vector<int>> seen_keys;
  std::vector<char> occupied(static_cast<std::size_t>(n), 0);
  for (int f = 0; f < fact_count; ++f) {
    Fact fact;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000 * fact_count)
        throw std::runtime_error("gen_corpus: could not place facts without overlap (overcrowded)");
      fact.key.clear();
      for (int i = 0; i < kKeySpan; ++i) fact.key.push_back(static_cast<int>(g.next_below(filler_limit)));
      if (seen_keys.count(fact.key)) continue;
      break;
    }
    seen_keys.insert(fact.key);
    fact.value.clear();
    for (int i = 0; i < kValueSpan; ++i) fact.value.push_back(static_cast<int>(g.next_below(filler_limit)));
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000 * fact_count)
        throw std::runtime_error("gen_corpus: could not place facts without overlap (overcrowded)");
      const int pos = static_cast<int>(g.next_below(static_cast<std::uint64_t>(n - kFactSpan + 1)));
      bool clash = false;
      for (int i = 0; i < kFactSpan && !clash; ++i) clash = occupied[static_cast<std::size_t>(pos + i)] != 0;
      if (clash) continue;
      fact.pos = pos;
      break;
    }
    for (int i = 0; i < kFactSpan; ++i) occupied[static_cast<std::size_t>(fact.pos + i)] = 1;
    for (int i = 0; i < kKeySpan; ++i) c.tokens[static_cast<std::size_t>(fact.pos + i)] = fact.key[static_cast<std::size_t>(i)];
    for (int i = 0; i < kValueSpan; ++i)
      c.tokens[static_cast<std::size_t>(fact.pos + kKeySpan + i)] = fact.value[static_cast<std::size_t>(i)];
    c.facts.push_back(std::move(fact));
  }
  return c;
}

std::vector<TaskPair> gen_pairs(const SyntheticCorpus& corpus, int per_fact, int copy_len,
                                std::uint64_t seed, int response_cap) {
  if (per_fact < 1) throw std::invalid_argument("gen_pairs: per_fact must be >= 1");
  if (copy_len < 1) throw std::invalid_argument("gen_pairs: copy_len must be >= 1");
  if (response_cap < 1) throw std::invalid_argument("gen_pairs: response_cap must be >= 1");
  if (corpus.facts.empty()) throw std::invalid_argument("gen_pairs: corpus has no facts");

  const int filler_limit = corpus.vocab - kMarkerReserve;
  Prng g = Prng(seed).split(0x70616972ULL);  // "pair" stream
  std::vector<TaskPair> pairs;

  for (const Fact& fact : corpus.facts) {
    std::set<int> used_nonces;
    for (int i = 0; i < per_fact; ++i) {
      TaskPair p;
      p.id = static_cast<int>(pairs.size());
      if (i == 5) {
        p.task = Task::copy_span;
        p.instruction = {copy_marker(corpus.vocab)};
        p.instruction.insert(p.instruction.end(), fact.key.begin(), fact.key.end());
        const int span = std::min({copy_len, corpus.n - fact.pos, response_cap});
        for (int k = 0; k < span; ++k)
          p.response.push_back(corpus.tokens[static_cast<std::size_t>(fact.pos + k)]);
      } else {
        p.task = Task::recall;
        p.instruction = {ask_marker(corpus.vocab)};
        p.instruction.insert(p.instruction.end(), fact.key.begin(), fact.key.end());
        int nonce;
        do {
          nonce = static_cast<int>(g.next_below(filler_limit));
        } while (used_nonces.count(nonce));
        used_nonces.insert(nonce);
        p.instruction.push_back(nonce);
        p.response = fact.value;
        if (static_cast<int>(p.response.size()) > response_cap) p.response.resize(static_cast<std::size_t>(response_cap));
      }
      pairs.push_back(std::move(p));
    }
  }

  // Deterministic 80/20 split over a seeded shuffle; ~20% of pairs are test.
  std::vector<int> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(g.next_below(i));
    std::swap(order[i - 1], order[j]);
  }
  const std::size_t test_count = pairs.size() / 5;
  for (std::size_t i = 0; i < test_count; ++i) pairs[static_cast<std::size_t>(order[i])].test_split = true;

  // No test pair may duplicate a train pair (instruction and response both).
  std::set<std::pair<std::vector<int>, std::vector<int>>> train_set;
  for (const TaskPair& p : pairs)
    if (!p.test_split) train_set.insert({p.instruction, p.response});
  for (const TaskPair& p : pairs) {
    if (p.test_split && train_set.count({p.instruction, p.response}))
      throw std::runtime_error("gen_pairs: test pair duplicates a train pair");
  }
  return pairs;
}

SyntheticCorpus gen_corpus_with_pairs(std::uint64_t seed, int n, int fact_count, int vocab,
                                      int per_fact, int copy_len) {
  SyntheticCorpus c = gen_corpus(seed, n, fact_count, vocab);
  c.pairs = gen_pairs(c, per_fact, copy_len, seed);
  return c;
}

std::uint64_t corpus_hash(const SyntheticCorpus& c) {
  Fnv1a h;
  h.u64(c.seed);
  h.u32(static_cast<std::uint32_t>(c.n));
  h.u32(static_cast<std::uint32_t>(c.vocab));
  for (int t : c.tokens) h.u32(static_cast<std::uint32_t>(t));
  h.u32(static_cast<std::uint32_t>(c.facts.size()));
  for (const Fact& f : c.facts) {
    h.u32(static_cast<std::uint32_t>(f.pos));
    for (int t : f.key) h.u32(static_cast<std::uint32_t>(t));
    for (int t : f.value) h.u32(static_cast<std::uint32_t>(t));
  }
  h.u32(static_cast<std::uint32_t>(c.pairs.size()));
  for (const TaskPair& p : c.pairs) {
    h.u32(static_cast<std::uint32_t>(p.id));
    h.u32(p.task == Task::recall ? 0U : 1U);
    h.u32(p.test_split ? 1U : 0U);
    h.u32(static_cast<std::uint32_t>(p.instruction.size()));
    for (int t : p.instruction) h.u32(static_cast<std::uint32_t>(t));
    h.u32(static_cast<std::uint32_t>(p.response.size()));
    for (int t : p.response) h.u32(static_cast<std::uint32_t>(t));
  }
  return h.h;
}

void save_corpus(const SyntheticCorpus& c, const std::string& path) {
  BinWriter bw;
  bw.u32(kCorpusMagic);
  bw.u32(kCorpusVersion);
  bw.u64(c.seed);
  bw.u32(static_cast<std::uint32_t>(c.n));
  bw.u32(static_cast<std::uint32_t>(c.vocab));
  for (int t : c.tokens) bw.u32(static_cast<std::uint32_t>(t));
  bw.u32(static_cast<std::uint32_t>(c.facts.size()));
  for (const Fact& f : c.facts) {
    bw.u32(static_cast<std::uint32_t>(f.pos));
    bw.u32(static_cast<std::uint32_t>(f.key.size()));
    for (int t : f.key) bw.u32(static_cast<std::uint32_t>(t));
    bw.u32(static_cast<std::uint32_t>(f.value.size()));
    for (int t : f.value) bw.u32(static_cast<std::uint32_t>(t));
  }
  bw.u32(static_cast<std::uint32_t>(c.pairs.size()));
  for (const TaskPair& p : c.pairs) {
    bw.u32(static_cast<std::uint32_t>(p.id));
    bw.u8(p.task == Task::recall ? 0 : 1);
    bw.u8(p.test_split ? 1 : 0);
    bw.u32(static_cast<std::uint32_t>(p.instruction.size()));
    for (int t : p.instruction) bw.u32(static_cast<std::uint32_t>(t));
    bw.u32(static_cast<std::uint32_t>(p.response.size()));
    for (int t : p.response) bw.u32(static_cast<std::uint32_t>(t));
  }
  bw.save(path);
}

SyntheticCorpus load_corpus(const std::string& path) {
  BinReader br = BinReader::from_file(path);
  expect_magic(br, kCorpusMagic, "corpus file", path);
  const std::uint32_t version = br.u32();
  if (version != kCorpusVersion) throw std::runtime_error("corpus file: unsupported version in " + path);
  SyntheticCorpus c;
  c.seed = br.u64();
  c.n = static_cast<int>(br.u32());
  c.vocab = static_cast<int>(br.u32());
  c.tokens.resize(static_cast<std::size_t>(c.n));
  for (int i = 0; i < c.n; ++i) c.tokens[static_cast<std::size_t>(i)] = static_cast<int>(br.u32());
  const std::uint32_t nfacts = br.u32();
  for (std::uint32_t i = 0; i < nfacts; ++i) {
    Fact f;
    f.pos = static_cast<int>(br.u32());
    const std::uint32_t nk = br.u32();
    for (std::uint32_t k = 0; k < nk; ++k) f.key.push_back(static_cast<int>(br.u32()));
    const std::uint32_t nv = br.u32();
    for (std::uint32_t k = 0; k < nv; ++k) f.value.push_back(static_cast<int>(br.u32()));
    c.facts.push_back(std::move(f));
  }
  const std::uint32_t npairs = br.u32();
  for (std::uint32_t i = 0; i < npairs; ++i) {
    TaskPair p;
    p.id = static_cast<int>(br.u32());
    p.task = br.u8() == 0 ? Task::recall : Task::copy_span;
    p.test_split = br.u8() != 0;
    const std::uint32_t ni = br.u32();
    for (std::uint32_t k = 0; k < ni; ++k) p.instruction.push_back(static_cast<int>(br.u32()));
    const std::uint32_t nr = br.u32();
    for (std::uint32_t k = 0; k < nr; ++k) p.response.push_back(static_cast<int>(br.u32()));
    c.pairs.push_back(std::move(p));
  }
  if (!br.exhausted()) throw std::runtime_error("corpus file: trailing bytes in " + path);
  return c;
}

std::vector<QuerySample> query_samples_from_pairs(const std::vector<TaskPair>& pairs) {
  std::vector<QuerySample> out;
  out.reserve(pairs.size());
  for (const TaskPair& p : pairs) {
    QuerySample s;
    s.pair_id = p.id;
    s.test_split = p.test_split;
    s.response_start = static_cast<int>(p.instruction.size());
    s.tokens = p.instruction;
    s.tokens.insert(s.tokens.end(), p.response.begin(), p.response.end());
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace kvs
