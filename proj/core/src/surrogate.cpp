#include "kvs/surrogate.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "kvs/oracle.hpp"
#include "kvs/serial.hpp"

namespace kvs {

namespace {

constexpr std::uint32_t kStackMagic = 0x53535643U;  // "CVSS"
constexpr std::uint32_t kStackVersion = 1;
constexpr double kChainRmsEps = 1e-6;

}  // namespace

std::string family_name(Family f) {
  return f == Family::quadrature ? "quadrature" : "mlp";
}

Family family_from_name(const std::string& name) {
  if (name == "quadrature") return Family::quadrature;
  if (name == "mlp") return Family::mlp;
  throw std::invalid_argument("unknown surrogate family: " + name);
}

std::int64_t CapacityPlan::planned_total() const {
  std::int64_t t = 0;
  for (std::int64_t b : per_layer_budget) t += b;
  return t * kv_heads;
}

CapacityPlan plan_capacity(double rho, std::int64_t n, int head_dim, int layers, int kv_heads,
                           const std::vector<CapacityGroup>& groups) {
  if (rho <= 0.0 || rho > 1.0) throw std::invalid_argument("plan_capacity: rho must be in (0, 1]");
  if (n < 1 || head_dim < 1 || layers < 1 || kv_heads < 1)
    throw std::invalid_argument("plan_capacity: bad dimensions");

  CapacityPlan plan;
  plan.rho = rho;
  plan.n = n;
  plan.head_dim = head_dim;
  plan.layers = layers;
  plan.kv_heads = kv_heads;
  plan.groups = groups.empty() ? std::vector<CapacityGroup>{{0, layers, 1.0}} : groups;

  // Groups must cover [0, layers) disjointly and carry positive multipliers.
  std::vector<double> mult(static_cast<std::size_t>(layers), 0.0);
  for (const CapacityGroup& g : plan.groups) {
    if (g.begin < 0 || g.end > layers || g.begin >= g.end)
      throw std::invalid_argument("plan_capacity: group bounds outside [0, layers)");
    if (g.mult <= 0.0) throw std::invalid_argument("plan_capacity: non-positive group multiplier");
    for (int l = g.begin; l < g.end; ++l) {
      if (mult[static_cast<std::size_t>(l)] != 0.0)
        throw std::invalid_argument("plan_capacity: overlapping groups");
      mult[static_cast<std::size_t>(l)] = g.mult;
    }
  }
  for (int l = 0; l < layers; ++l)
    if (mult[static_cast<std::size_t>(l)] == 0.0)
      throw std::invalid_argument("plan_capacity: groups do not cover every layer");

  double mult_sum = 0.0;
  for (double m : mult) mult_sum += m;
  const double per_head_cache = rho * 2.0 * static_cast<double>(n) * head_dim;
  plan.per_layer_budget.resize(static_cast<std::size_t>(layers));
  for (int l = 0; l < layers; ++l) {
    // Multipliers are normalised so a uniform plan and a tilted plan spend
    // the same total: mult(l) * layers / sum(mult).
    const double share = mult[static_cast<std::size_t>(l)] * layers / mult_sum;
    plan.per_layer_budget[static_cast<std::size_t>(l)] =
        static_cast<std::int64_t>(std::floor(per_head_cache * share));
  }
  return plan;
}

std::int64_t quad_param_count(int p, int d) { return 2LL * p * d; }

int size_quadrature_to_budget(std::int64_t budget, int d) {
  if (d < 1) throw std::invalid_argument("size_quadrature_to_budget: bad head dim");
  const std::int64_t p = budget / (2LL * d);
  if (p < 1) {
    std::ostringstream msg;
    msg << "size_quadrature_to_budget: budget " << budget << " below one (key, value) pair (" << 2 * d << ")";
    throw std::invalid_argument(msg.str());
  }
  return static_cast<int>(p);
}

QuadratureModule quad_init_from_cache(const Matrix& k, const Matrix& v, int p) {
  if (p < 1) throw std::invalid_argument("quad_init_from_cache: p must be >= 1");
  if (p > k.rows) {
    std::ostringstream msg;
    msg << "quad_init_from_cache: p=" << p << " exceeds cached rows " << k.rows;
    throw std::invalid_argument(msg.str());
  }
  if (k.rows != v.rows || k.cols != v.cols) throw std::invalid_argument("quad_init_from_cache: K/V mismatch");
  QuadratureModule m;
  m.p = p;
  m.d = k.cols;
  m.w = Matrix(p, k.cols);
  m.z = Matrix(p, k.cols);
  for (int r = 0; r < p; ++r) {
    for (int c = 0; c < k.cols; ++c) {
      m.w.at(r, c) = k.at(r, c);
      m.z.at(r, c) = v.at(r, c);
    }
  }
  return m;
}

// quad_score/quad_target are the exact attention forms over (W, Z); they call
// straight into the shared oracle/model kernels so the p = n init is
// degenerate by construction.
double quad_score(const QuadratureModule& m, const Vector& q) { return score_alpha(q, m.w); }

Vector quad_target(const QuadratureModule& m, const Vector& q) { return attend_full(q, m.w, m.z); }

namespace {

std::int64_t chain_param_count(int depth, int width, int in) {
  if (depth == 0) return 0;
  std::int64_t t = static_cast<std::int64_t>(width) * in + width;  // U0, b0
  for (int k = 1; k < depth; ++k)
    t += static_cast<std::int64_t>(width) * in + static_cast<std::int64_t>(width) * width + width;
  return t;
}

std::int64_t head_param_count(int depth, int width, int in, int out) {
  const int h_dim = depth >= 1 ? width : in;
  return chain_param_count(depth, width, in) + static_cast<std::int64_t>(out) * h_dim + out;
}

std::vector<ChainLayer> build_chain(std::int64_t& off, int depth, int width, int in) {
  std::vector<ChainLayer> layers;
  for (int k = 0; k < depth; ++k) {
    ChainLayer cl;
    cl.in = in;
    cl.width = width;
    if (k == 0) {
      cl.off_u = off;
      off += static_cast<std::int64_t>(width) * in;
    } else {
      cl.off_v = off;
      off += static_cast<std::int64_t>(width) * in;
      cl.off_u = off;
      off += static_cast<std::int64_t>(width) * width;
    }
    cl.off_b = off;
    off += width;
    layers.push_back(cl);
  }
  return layers;
}

HeadLayout build_head(std::int64_t& off, int depth, int width, int in, int out) {
  HeadLayout head;
  head.layers = build_chain(off, depth, width, in);
  head.in_final = depth >= 1 ? width : in;
  head.out = out;
  head.off_w = off;
  off += static_cast<std::int64_t>(out) * head.in_final;
  head.off_b = off;
  off += out;
  return head;
}

int largest_width(std::int64_t budget, int lo_ok_probe, auto count_fn) {
  // Exact integer search: counts grow monotonically in width.
  (void)lo_ok_probe;
  if (count_fn(1) > budget) return 0;
  int lo = 1, hi = 2;
  while (count_fn(hi) <= budget) {
    lo = hi;
    if (hi > (1 << 24)) break;
    hi *= 2;
  }
  while (lo + 1 < hi) {
    const int mid = lo + (hi - lo) / 2;
    if (count_fn(mid) <= budget)
      lo = mid;
    else
      hi = mid;
  }
  return lo;
}

void chain_eval(const std::vector<ChainLayer>& layers, const std::vector<double>& params,
                const MlpShape& shape, const Vector& input, Vector& h) {
  h = input;
  Vector prev;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const ChainLayer& cl = layers[k];
    Vector z(cl.width);
    if (k == 0) {
      const double* u = params.data() + cl.off_u;
      for (int r = 0; r < cl.width; ++r) {
        double s = 0.0;
        for (int c = 0; c < cl.in; ++c) s += u[static_cast<std::size_t>(r) * cl.in + c] * input[c];
        z[r] = s;
      }
    } else {
      const double* v = params.data() + cl.off_v;
      const double* u = params.data() + cl.off_u;
      for (int r = 0; r < cl.width; ++r) {
        double s = 0.0;
        for (int c = 0; c < cl.in; ++c) s += v[static_cast<std::size_t>(r) * cl.in + c] * input[c];
        for (int c = 0; c < cl.width; ++c) s += u[static_cast<std::size_t>(r) * cl.width + c] * h[c];
        z[r] = s;
      }
    }
    const double* b = params.data() + cl.off_b;
    for (int r = 0; r < cl.width; ++r) z[r] += b[r];
    if (shape.layer_norm) {
      double ms = 0.0;
      for (int r = 0; r < cl.width; ++r) ms += z[r] * z[r];
      const double rms = std::sqrt(ms / cl.width + kChainRmsEps);
      for (int r = 0; r < cl.width; ++r) z[r] /= rms;
    }
    prev = h;
    Vector next(cl.width);
    for (int r = 0; r < cl.width; ++r) next[r] = silu(z[r]);
    if (shape.residual && k >= 1) {
      for (int r = 0; r < cl.width; ++r) next[r] += prev[r];
    }
    h = std::move(next);
  }
}

Vector head_eval(const HeadLayout& head, const std::vector<double>& params, const MlpShape& shape,
                 const Vector& input) {
  Vector h;
  chain_eval(head.layers, params, shape, input, h);
  const Vector& feed = head.layers.empty() ? input : h;
  Vector out(head.out);
  const double* w = params.data() + head.off_w;
  const double* b = params.data() + head.off_b;
  for (int r = 0; r < head.out; ++r) {
    double s = 0.0;
    for (int c = 0; c < head.in_final; ++c) s += w[static_cast<std::size_t>(r) * head.in_final + c] * feed[c];
    out[r] = s + b[r];
  }
  return out;
}

}  // namespace

MlpLayout mlp_layout(const MlpShape& shape, const MlpDims& dims, int d) {
  MlpLayout layout;
  std::int64_t off = 0;
  layout.backbone = build_chain(off, shape.depth_backbone, dims.w_backbone, d);
  const int head_in = shape.depth_backbone >= 1 ? dims.w_backbone : d;
  layout.score = build_head(off, shape.depth_score, dims.w_score, head_in, 1);
  layout.target = build_head(off, shape.depth_target, dims.w_target, head_in, d);
  layout.total = off;
  return layout;
}

std::int64_t mlp_param_count(const MlpShape& shape, const MlpDims& dims, int d) {
  const int head_in = shape.depth_backbone >= 1 ? dims.w_backbone : d;
  return chain_param_count(shape.depth_backbone, dims.w_backbone, d) +
         head_param_count(shape.depth_score, dims.w_score, head_in, 1) +
         head_param_count(shape.depth_target, dims.w_target, head_in, d);
}

MlpDims size_mlp_to_budget(std::int64_t budget, int d, const MlpShape& shape) {
  if (shape.depth_score < 0 || shape.depth_target < 0 || shape.depth_backbone < 0)
    throw std::invalid_argument("size_mlp_to_budget: negative depth");
  if (shape.score_frac < 0.0 || shape.score_frac >= 1.0)
    throw std::invalid_argument("size_mlp_to_budget: score_frac outside [0, 1)");

  const std::int64_t budget_score = static_cast<std::int64_t>(std::floor(shape.score_frac * static_cast<double>(budget)));
  const std::int64_t budget_rest = budget - budget_score;
  MlpDims dims;

  if (shape.depth_backbone == 0) {
    dims.w_target = largest_width(budget_rest, 1, [&](int w) { return head_param_count(shape.depth_target, w, d, d); });
    if (dims.w_target == 0 && shape.depth_target > 0)
      throw std::invalid_argument("size_mlp_to_budget: target budget below a width-1 head");
    dims.w_score = largest_width(budget_score, 1, [&](int w) { return head_param_count(shape.depth_score, w, d, 1); });
    if (dims.w_score == 0 && shape.depth_score > 0)
      throw std::invalid_argument("size_mlp_to_budget: score budget below a width-1 head");
  } else {
    // Backbone and target head share one width from the non-score budget.
    dims.w_target = largest_width(budget_rest, 1, [&](int w) {
      return chain_param_count(shape.depth_backbone, w, d) + head_param_count(shape.depth_target, w, w, d);
    });
    if (dims.w_target == 0)
      throw std::invalid_argument("size_mlp_to_budget: budget below a width-1 backbone+target");
    dims.w_backbone = dims.w_target;
    dims.w_score = largest_width(budget_score, 1, [&](int w) {
      return head_param_count(shape.depth_score, w, dims.w_backbone, 1);
    });
    if (dims.w_score == 0 && shape.depth_score > 0)
      throw std::invalid_argument("size_mlp_to_budget: score budget below a width-1 head");
  }

  // depth 0 heads have no width; normalise so layouts are canonical.
  if (shape.depth_score == 0) dims.w_score = 0;
  if (shape.depth_target == 0 && shape.depth_backbone == 0) dims.w_target = 0;
  if (mlp_param_count(shape, dims, d) > budget)
    throw std::invalid_argument("size_mlp_to_budget: budget too small for the requested shape");
  return dims;
}

MlpModule mlp_init(const MlpShape& shape, const MlpDims& dims, int d, Prng& g) {
  MlpModule m;
  m.d = d;
  m.shape = shape;
  m.dims = dims;
  m.layout = mlp_layout(shape, dims, d);
  m.params.assign(static_cast<std::size_t>(m.layout.total), 0.0);

  auto fill_chain = [&](const std::vector<ChainLayer>& layers) {
    for (const ChainLayer& cl : layers) {
      const double sd_in = 1.0 / std::sqrt(static_cast<double>(cl.in));
      const double sd_w = 1.0 / std::sqrt(static_cast<double>(cl.width));
      if (cl.off_v >= 0) {
        for (int i = 0; i < cl.width * cl.in; ++i)
          m.params[static_cast<std::size_t>(cl.off_v) + i] = sd_in * g.next_gaussian();
      }
      const int u_count = cl.off_v >= 0 ? cl.width * cl.width : cl.width * cl.in;
      const double sd_u = cl.off_v >= 0 ? sd_w : sd_in;
      for (int i = 0; i < u_count; ++i)
        m.params[static_cast<std::size_t>(cl.off_u) + i] = sd_u * g.next_gaussian();
      // biases stay zero
    }
  };
  fill_chain(m.layout.backbone);
  fill_chain(m.layout.score.layers);
  fill_chain(m.layout.target.layers);
  // Final linears stay zero so an untrained module emits (0, 0-vector).
  return m;
}

std::pair<double, Vector> mlp_forward(const MlpModule& m, const Vector& q) {
  if (q.dim() != m.d) throw std::invalid_argument("mlp_forward: query dim mismatch");
  Vector h;
  const Vector* head_in = &q;
  if (!m.layout.backbone.empty()) {
    chain_eval(m.layout.backbone, m.params, m.shape, q, h);
    head_in = &h;
  }
  Vector score = head_eval(m.layout.score, m.params, m.shape, *head_in);
  Vector target = head_eval(m.layout.target, m.params, m.shape, *head_in);
  return {score[0], std::move(target)};
}

std::pair<double, Vector> SurrogateStack::forward(int module_idx, const Vector& q) const {
  if (family == Family::quadrature) {
    const QuadratureModule& m = quad[static_cast<std::size_t>(module_idx)];
    return {quad_score(m, q), quad_target(m, q)};
  }
  return mlp_forward(mlp[static_cast<std::size_t>(module_idx)], q);
}

std::int64_t SurrogateStack::total_params() const {
  std::int64_t t = 0;
  if (family == Family::quadrature) {
    for (const QuadratureModule& m : quad) t += quad_param_count(m.p, m.d);
  } else {
    for (const MlpModule& m : mlp) t += static_cast<std::int64_t>(m.params.size());
  }
  return t;
}

std::vector<std::span<double>> SurrogateStack::param_chunks() {
  std::vector<std::span<double>> chunks;
  if (family == Family::quadrature) {
    for (QuadratureModule& m : quad) {
      chunks.emplace_back(m.w.data.data(), m.w.data.size());
      chunks.emplace_back(m.z.data.data(), m.z.data.size());
    }
  } else {
    for (MlpModule& m : mlp) chunks.emplace_back(m.params.data(), m.params.size());
  }
  return chunks;
}

SurrogateStack init_surrogate_stack(Family family, const CapacityPlan& plan, int group_size,
                                    const MlpShape& shape, const KVCache* cache,
                                    std::uint64_t seed, std::uint64_t base_hash) {
  if (group_size < 1) throw std::invalid_argument("init_surrogate_stack: bad group size");
  SurrogateStack s;
  s.family = family;
  s.layers = plan.layers;
  s.kv_heads = plan.kv_heads;
  s.group_size = group_size;
  s.head_dim = plan.head_dim;
  s.plan = plan;
  s.mlp_shape = shape;
  s.base_hash = base_hash;

  Prng root = Prng(seed).split(0x737572ULL);  // "sur" stream
  for (int l = 0; l < plan.layers; ++l) {
    const std::int64_t budget = plan.per_layer_budget[static_cast<std::size_t>(l)];
    for (int h = 0; h < plan.kv_heads; ++h) {
      if (family == Family::quadrature) {
        if (cache == nullptr)
          throw std::invalid_argument("init_surrogate_stack: quadrature family needs a KV cache");
        const int p = size_quadrature_to_budget(budget, plan.head_dim);
        s.quad.push_back(quad_init_from_cache(cache->key(l, h), cache->value(l, h), p));
      } else {
        const MlpDims dims = size_mlp_to_budget(budget, plan.head_dim, shape);
        Prng g = root.split(static_cast<std::uint64_t>(l) * plan.kv_heads + h);
        s.mlp.push_back(mlp_init(shape, dims, plan.head_dim, g));
      }
    }
  }
  return s;
}

namespace {

void write_plan(BinWriter& bw, const CapacityPlan& plan) {
  bw.f64(plan.rho);
  bw.i64(plan.n);
  bw.u32(static_cast<std::uint32_t>(plan.head_dim));
  bw.u32(static_cast<std::uint32_t>(plan.layers));
  bw.u32(static_cast<std::uint32_t>(plan.kv_heads));
  bw.u32(static_cast<std::uint32_t>(plan.groups.size()));
  for (const CapacityGroup& g : plan.groups) {
    bw.u32(static_cast<std::uint32_t>(g.begin));
    bw.u32(static_cast<std::uint32_t>(g.end));
    bw.f64(g.mult);
  }
  bw.u32(static_cast<std::uint32_t>(plan.per_layer_budget.size()));
  for (std::int64_t b : plan.per_layer_budget) bw.i64(b);
}

CapacityPlan read_plan(BinReader& br) {
  CapacityPlan plan;
  plan.rho = br.f64();
  plan.n = br.i64();
  plan.head_dim = static_cast<int>(br.u32());
  plan.layers = static_cast<int>(br.u32());
  plan.kv_heads = static_cast<int>(br.u32());
  const std::uint32_t ngroups = br.u32();
  for (std::uint32_t i = 0; i < ngroups; ++i) {
    CapacityGroup g;
    g.begin = static_cast<int>(br.u32());
    g.end = static_cast<int>(br.u32());
    g.mult = br.f64();
    plan.groups.push_back(g);
  }
  const std::uint32_t nb = br.u32();
  plan.per_layer_budget.resize(nb);
  for (std::uint32_t i = 0; i < nb; ++i) plan.per_layer_budget[i] = br.i64();
  return plan;
}

}  // namespace

void save_stack(const SurrogateStack& s, const std::string& path) {
  BinWriter bw;
  bw.u32(kStackMagic);
  bw.u32(kStackVersion);
  bw.u8(s.family == Family::quadrature ? 0 : 1);
  bw.u32(static_cast<std::uint32_t>(s.layers));
  bw.u32(static_cast<std::uint32_t>(s.kv_heads));
  bw.u32(static_cast<std::uint32_t>(s.group_size));
  bw.u32(static_cast<std::uint32_t>(s.head_dim));
  bw.u64(s.base_hash);
  write_plan(bw, s.plan);
  bw.u32(static_cast<std::uint32_t>(s.mlp_shape.depth_backbone));
  bw.u32(static_cast<std::uint32_t>(s.mlp_shape.depth_score));
  bw.u32(static_cast<std::uint32_t>(s.mlp_shape.depth_target));
  bw.u8(s.mlp_shape.residual ? 1 : 0);
  bw.u8(s.mlp_shape.layer_norm ? 1 : 0);
  bw.f64(s.mlp_shape.score_frac);
  if (s.family == Family::quadrature) {
    bw.u32(static_cast<std::uint32_t>(s.quad.size()));
    for (const QuadratureModule& m : s.quad) {
      bw.u32(static_cast<std::uint32_t>(m.p));
      bw.u32(static_cast<std::uint32_t>(m.d));
      bw.mat(m.w);
      bw.mat(m.z);
    }
  } else {
    bw.u32(static_cast<std::uint32_t>(s.mlp.size()));
    for (const MlpModule& m : s.mlp) {
      bw.u32(static_cast<std::uint32_t>(m.dims.w_backbone));
      bw.u32(static_cast<std::uint32_t>(m.dims.w_score));
      bw.u32(static_cast<std::uint32_t>(m.dims.w_target));
      bw.u64(static_cast<std::uint64_t>(m.params.size()));
      bw.f64_span(m.params.data(), m.params.size());
    }
  }
  bw.save(path);
}

SurrogateStack load_stack(const std::string& path) {
  BinReader br = BinReader::from_file(path);
  expect_magic(br, kStackMagic, "surrogate checkpoint", path);
  const std::uint32_t version = br.u32();
  if (version != kStackVersion)
    throw std::runtime_error("surrogate checkpoint: unsupported version in " + path);
  SurrogateStack s;
  s.family = br.u8() == 0 ? Family::quadrature : Family::mlp;
  s.layers = static_cast<int>(br.u32());
  s.kv_heads = static_cast<int>(br.u32());
  s.group_size = static_cast<int>(br.u32());
  s.head_dim = static_cast<int>(br.u32());
  s.base_hash = br.u64();
  s.plan = read_plan(br);
  s.mlp_shape.depth_backbone = static_cast<int>(br.u32());
  s.mlp_shape.depth_score = static_cast<int>(br.u32());
  s.mlp_shape.depth_target = static_cast<int>(br.u32());
  s.mlp_shape.residual = br.u8() != 0;
  s.mlp_shape.layer_norm = br.u8() != 0;
  s.mlp_shape.score_frac = br.f64();
  const std::uint32_t count = br.u32();
  if (s.family == Family::quadrature) {
    for (std::uint32_t i = 0; i < count; ++i) {
      QuadratureModule m;
      m.p = static_cast<int>(br.u32());
      m.d = static_cast<int>(br.u32());
      m.w = br.mat();
      m.z = br.mat();
      s.quad.push_back(std::move(m));
    }
  } else {
    for (std::uint32_t i = 0; i < count; ++i) {
      MlpModule m;
      m.d = s.head_dim;
      m.shape = s.mlp_shape;
      m.dims.w_backbone = static_cast<int>(br.u32());
      m.dims.w_score = static_cast<int>(br.u32());
      m.dims.w_target = static_cast<int>(br.u32());
      m.layout = mlp_layout(m.shape, m.dims, m.d);
      const std::uint64_t nparams = br.u64();
      if (static_cast<std::int64_t>(nparams) != m.layout.total)
        throw std::runtime_error("surrogate checkpoint: parameter count does not match layout in " + path);
      m.params.resize(nparams);
      br.f64_span(m.params.data(), m.params.size());
      s.mlp.push_back(std::move(m));
    }
  }
  if (!br.exhausted()) throw std::runtime_error("surrogate checkpoint: trailing bytes in " + path);
  return s;
}

SurrogateStack load_stack(const std::string& path, std::uint64_t expected_base_hash) {
  SurrogateStack s = load_stack(path);
  if (s.base_hash != expected_base_hash) {
    std::ostringstream msg;
    msg << "surrogate checkpoint: base model hash mismatch for " << path << " (file 0x" << std::hex
        << s.base_hash << ", expected 0x" << expected_base_hash << ")";
    throw std::runtime_error(msg.str());
  }
  return s;
}

}  // namespace kvs
