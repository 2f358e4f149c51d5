#include "kvs/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "kvs/serial.hpp"

namespace kvs {

namespace {

constexpr std::uint32_t kTargetMagic = 0x54535643U;  // "CVST" bytes C,V,S,T
constexpr std::uint32_t kTargetVersion = 1;

}  // namespace

double score_alpha_rows(const Vector& q, const Matrix& k, int rows) {
  if (rows < 1 || rows > k.rows) throw std::invalid_argument("score_alpha_rows: bad row count");
  if (q.dim() != k.cols) throw std::invalid_argument("score_alpha_rows: query dim mismatch");
  const double scale = 1.0 / std::sqrt(static_cast<double>(k.cols));
  Vector logits(rows);
  for (int j = 0; j < rows; ++j) {
    const double* row = k.row(j);
    double s = 0.0;
    for (int c = 0; c < k.cols; ++c) s += q[c] * row[c];
    logits[j] = s * scale;
  }
  return log_sum_exp(logits);
}

double score_alpha(const Vector& q, const Matrix& k) {
  if (k.rows == 0) throw std::invalid_argument("score_alpha: empty key matrix");
  return score_alpha_rows(q, k, k.rows);
}

Vector target_A(const Vector& q, const Matrix& k, const Matrix& v) { return attend_full(q, k, v); }

TargetRecordView TargetCache::record(int row, int layer, int query_head) const {
  const int hq = cfg.query_heads();
  const std::size_t cell = (static_cast<std::size_t>(row) * cfg.layers + layer) * hq + query_head;
  TargetRecordView view;
  view.q = q.data() + cell * cfg.head_dim;
  view.alpha = alpha[cell];
  view.target = target.data() + cell * cfg.head_dim;
  return view;
}

const double* TargetCache::teacher_logits(int row) const {
  return teacher.data() + static_cast<std::size_t>(row) * cfg.vocab;
}

int TargetCache::sample_of_row(int row) const {
  for (std::size_t s = 0; s < samples.size(); ++s) {
    if (row >= samples[s].first_row && row < samples[s].first_row + samples[s].count)
      return static_cast<int>(s);
  }
  throw std::out_of_range("TargetCache::sample_of_row: bad row");
}

int TargetCache::position(int row) const {
  const Sample& s = samples[static_cast<std::size_t>(sample_of_row(row))];
  return n + (row - s.first_row) + 1;
}

std::vector<int> TargetCache::rows_for_split(bool test_split) const {
  std::vector<int> out;
  for (const Sample& s : samples) {
    if (s.test_split != test_split) continue;
    for (int r = s.first_row; r < s.first_row + s.count; ++r) out.push_back(r);
  }
  return out;
}

namespace {

// Captures q / alpha / A for every (layer, query head) at the position being
// decoded. The working cache holds context rows plus appended query rows; the
// stored quantities are restricted to the first n (context) rows.
struct TargetGrabber : StepObserver {
  TargetCache* out;
  const KVCache* cache;
  int row = 0;

  void on_query(int layer, int query_head, const Vector& qv) override {
    const ModelConfig& cfg = out->cfg;
    const int kvh = query_head / cfg.group_size;
    const std::size_t cell =
        (static_cast<std::size_t>(row) * cfg.layers + layer) * cfg.query_heads() + query_head;
    for (int c = 0; c < cfg.head_dim; ++c) out->q[cell * cfg.head_dim + c] = qv[c];
    const Matrix& k = cache->key(layer, kvh);
    const Matrix& v = cache->value(layer, kvh);
    out->alpha[cell] = score_alpha_rows(qv, k, out->n);
    Vector a = attend_rows(qv, k, v, out->n);
    for (int c = 0; c < cfg.head_dim; ++c) out->target[cell * cfg.head_dim + c] = a[c];
  }
};

}  // namespace

std::uint64_t target_cache_key(const ModelWeights& w, const std::vector<int>& context,
                               const std::vector<QuerySample>& samples) {
  Fnv1a h;
  h.u64(model_weights_hash(w));
  h.u32(static_cast<std::uint32_t>(context.size()));
  for (int t : context) h.u32(static_cast<std::uint32_t>(t));
  h.u32(static_cast<std::uint32_t>(samples.size()));
  for (const QuerySample& s : samples) {
    h.u32(static_cast<std::uint32_t>(s.pair_id));
    h.u32(s.test_split ? 1U : 0U);
    h.u32(static_cast<std::uint32_t>(s.response_start));
    h.u32(static_cast<std::uint32_t>(s.tokens.size()));
    for (int t : s.tokens) h.u32(static_cast<std::uint32_t>(t));
  }
  return h.h;
}

TargetCache cache_targets(const ModelWeights& w, const std::vector<int>& context,
                          const std::vector<QuerySample>& samples) {
  if (context.empty()) throw std::invalid_argument("cache_targets: empty context");
  if (samples.empty()) throw std::invalid_argument("cache_targets: no query samples");
  for (const QuerySample& s : samples) {
    if (s.tokens.empty()) throw std::invalid_argument("cache_targets: empty query sample");
    if (s.response_start < 1 || s.response_start >= static_cast<int>(s.tokens.size()))
      throw std::invalid_argument("cache_targets: response_start outside (0, token count)");
  }

  const ModelConfig& cfg = w.cfg;
  TargetCache out;
  out.cfg = cfg;
  out.n = static_cast<int>(context.size());
  out.key_hash = target_cache_key(w, context, samples);

  int total_rows = 0;
  for (const QuerySample& s : samples) total_rows += static_cast<int>(s.tokens.size());
  out.rows = total_rows;
  const std::size_t cells =
      static_cast<std::size_t>(total_rows) * cfg.layers * cfg.query_heads();
  out.q.assign(cells * cfg.head_dim, 0.0);
  out.alpha.assign(cells, 0.0);
  out.target.assign(cells * cfg.head_dim, 0.0);
  out.teacher.assign(static_cast<std::size_t>(total_rows) * cfg.vocab, 0.0);

  PrefillResult pre = prefill(w, context);
  KVCache cache = std::move(pre.cache);

  TargetGrabber grab;
  grab.out = &out;
  grab.cache = &cache;

  int row = 0;
  for (const QuerySample& s : samples) {
    TargetCache::Sample meta;
    meta.pair_id = s.pair_id;
    meta.test_split = s.test_split;
    meta.response_start = s.response_start;
    meta.first_row = row;
    meta.count = static_cast<int>(s.tokens.size());
    meta.tokens = s.tokens;
    out.samples.push_back(std::move(meta));
    for (std::size_t k = 0; k < s.tokens.size(); ++k) {
      grab.row = row;
      const int pos = out.n + static_cast<int>(k) + 1;
      Vector logits = decode_step_full(w, cache, s.tokens[k], pos, &grab);
      for (int vtok = 0; vtok < cfg.vocab; ++vtok)
        out.teacher[static_cast<std::size_t>(row) * cfg.vocab + vtok] = logits[vtok];
      ++row;
    }
    cache.truncate(out.n);
  }
  return out;
}

void save_target_cache(const TargetCache& c, const std::string& path) {
  BinWriter bw;
  bw.u32(kTargetMagic);
  bw.u32(kTargetVersion);
  bw.u64(c.key_hash);
  bw.u32(static_cast<std::uint32_t>(c.cfg.layers));
  bw.u32(static_cast<std::uint32_t>(c.cfg.kv_heads));
  bw.u32(static_cast<std::uint32_t>(c.cfg.group_size));
  bw.u32(static_cast<std::uint32_t>(c.cfg.head_dim));
  bw.u32(static_cast<std::uint32_t>(c.cfg.d_model));
  bw.u32(static_cast<std::uint32_t>(c.cfg.vocab));
  bw.f64(c.cfg.rope_base);
  bw.u64(c.cfg.seed);
  bw.u32(static_cast<std::uint32_t>(c.n));
  bw.u32(static_cast<std::uint32_t>(c.samples.size()));
  for (const TargetCache::Sample& s : c.samples) {
    bw.u32(static_cast<std::uint32_t>(s.pair_id));
    bw.u8(s.test_split ? 1 : 0);
    bw.u32(static_cast<std::uint32_t>(s.response_start));
    bw.u32(static_cast<std::uint32_t>(s.first_row));
    bw.u32(static_cast<std::uint32_t>(s.count));
    bw.u32(static_cast<std::uint32_t>(s.tokens.size()));
    for (int t : s.tokens) bw.u32(static_cast<std::uint32_t>(t));
  }
  bw.u32(static_cast<std::uint32_t>(c.rows));
  bw.f64_span(c.q.data(), c.q.size());
  bw.f64_span(c.alpha.data(), c.alpha.size());
  bw.f64_span(c.target.data(), c.target.size());
  bw.f64_span(c.teacher.data(), c.teacher.size());
  bw.save(path);
}

TargetCache load_target_cache(const std::string& path) {
  BinReader br = BinReader::from_file(path);
  expect_magic(br, kTargetMagic, "target cache", path);
  const std::uint32_t version = br.u32();
  if (version != kTargetVersion) throw std::runtime_error("target cache: unsupported version in " + path);
  TargetCache c;
  c.key_hash = br.u64();
  c.cfg.layers = static_cast<int>(br.u32());
  c.cfg.kv_heads = static_cast<int>(br.u32());
  c.cfg.group_size = static_cast<int>(br.u32());
  c.cfg.head_dim = static_cast<int>(br.u32());
  c.cfg.d_model = static_cast<int>(br.u32());
  c.cfg.vocab = static_cast<int>(br.u32());
  c.cfg.rope_base = br.f64();
  c.cfg.seed = br.u64();
  c.n = static_cast<int>(br.u32());
  const std::uint32_t sample_count = br.u32();
  c.samples.reserve(sample_count);
  for (std::uint32_t i = 0; i < sample_count; ++i) {
    TargetCache::Sample s;
    s.pair_id = static_cast<int>(br.u32());
    s.test_split = br.u8() != 0;
    s.response_start = static_cast<int>(br.u32());
    s.first_row = static_cast<int>(br.u32());
    s.count = static_cast<int>(br.u32());
    const std::uint32_t ntok = br.u32();
    s.tokens.resize(ntok);
    for (std::uint32_t k = 0; k < ntok; ++k) s.tokens[k] = static_cast<int>(br.u32());
    c.samples.push_back(std::move(s));
  }
  c.rows = static_cast<int>(br.u32());
  const std::size_t cells = static_cast<std::size_t>(c.rows) * c.cfg.layers * c.cfg.query_heads();
  c.q.resize(cells * c.cfg.head_dim);
  c.alpha.resize(cells);
  c.target.resize(cells * c.cfg.head_dim);
  c.teacher.resize(static_cast<std::size_t>(c.rows) * c.cfg.vocab);
  br.f64_span(c.q.data(), c.q.size());
  br.f64_span(c.alpha.data(), c.alpha.size());
  br.f64_span(c.target.data(), c.target.size());
  br.f64_span(c.teacher.data(), c.teacher.size());
  if (!br.exhausted()) throw std::runtime_error("target cache: trailing bytes in " + path);
  return c;
}

TargetCache load_target_cache(const std::string& path, std::uint64_t expected_key) {
  TargetCache c = load_target_cache(path);
  if (c.key_hash != expected_key) {
    std::ostringstream msg;
    msg << "target cache: key hash mismatch for " << path << " (file 0x" << std::hex << c.key_hash
        << ", expected 0x" << expected_key << "); the cache was built for different weights or data";
    throw std::runtime_error(msg.str());
  }
  return c;
}

double verify_target_cache(const TargetCache& c, const ModelWeights& w,
                           const std::vector<int>& context, int sample_count, std::uint64_t seed) {
  if (c.samples.empty()) throw std::invalid_argument("verify_target_cache: empty cache");
  Prng g(seed);
  std::vector<int> chosen;
  const int limit = std::min<int>(sample_count, static_cast<int>(c.samples.size()));
  while (static_cast<int>(chosen.size()) < limit) {
    const int pick = static_cast<int>(g.next_below(c.samples.size()));
    if (std::find(chosen.begin(), chosen.end(), pick) == chosen.end()) chosen.push_back(pick);
  }
  std::sort(chosen.begin(), chosen.end());

  std::vector<QuerySample> subset;
  for (int idx : chosen) {
    const TargetCache::Sample& s = c.samples[static_cast<std::size_t>(idx)];
    subset.push_back(QuerySample{s.pair_id, s.test_split, s.response_start, s.tokens});
  }
  TargetCache redo = cache_targets(w, context, subset);

  double max_dev = 0.0;
  const int hq = c.cfg.query_heads();
  for (std::size_t si = 0; si < chosen.size(); ++si) {
    const TargetCache::Sample& orig = c.samples[static_cast<std::size_t>(chosen[si])];
    const TargetCache::Sample& fresh = redo.samples[si];
    for (int k = 0; k < orig.count; ++k) {
      const int r_orig = orig.first_row + k;
      const int r_new = fresh.first_row + k;
      for (int l = 0; l < c.cfg.layers; ++l) {
        for (int h = 0; h < hq; ++h) {
          const TargetRecordView a = c.record(r_orig, l, h);
          const TargetRecordView b = redo.record(r_new, l, h);
          max_dev = std::max(max_dev, std::abs(a.alpha - b.alpha));
          for (int d = 0; d < c.cfg.head_dim; ++d) {
            max_dev = std::max(max_dev, std::abs(a.q[d] - b.q[d]));
            max_dev = std::max(max_dev, std::abs(a.target[d] - b.target[d]));
          }
        }
      }
      const double* ta = c.teacher_logits(r_orig);
      const double* tb = redo.teacher_logits(r_new);
      for (int vtok = 0; vtok < c.cfg.vocab; ++vtok)
        max_dev = std::max(max_dev, std::abs(ta[vtok] - tb[vtok]));
    }
  }
  return max_dev;
}

}  // namespace kvs
