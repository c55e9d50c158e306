#include "qlab/toymodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "qlab/metrics.hpp"
#include "qlab/rng.hpp"

namespace qlab {
namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

void validate_config(const ToyConfig& c) {
  if (c.vocab != 256) throw std::invalid_argument("vocab must be 256 (bytes)");
  if (c.d_model <= 0 || c.n_layers <= 0 || c.n_heads <= 0 || c.ctx_len <= 0 ||
      c.mlp_ratio <= 0)
    throw std::invalid_argument("config sizes must be positive");
  if (c.d_model % c.n_heads != 0)
    throw std::invalid_argument("d_model must be divisible by n_heads");
}

// Double-precision working copy of all parameters. Promotion from float32 is
// exact, so evaluation semantics do not depend on when the copy happens.
struct LayerD {
  MatD ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w_in, w_out;
};

struct ParamsD {
  ToyConfig cfg;
  MatD tok_emb, pos_emb;
  std::vector<LayerD> layers;
  MatD lnf_g, lnf_b, unemb;
};

std::vector<MatD*> all_tensors(ParamsD& p) {
  std::vector<MatD*> v = {&p.tok_emb, &p.pos_emb};
  for (auto& l : p.layers)
    for (MatD* m : {&l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_g,
                    &l.ln2_b, &l.w_in, &l.w_out})
      v.push_back(m);
  v.push_back(&p.lnf_g);
  v.push_back(&p.lnf_b);
  v.push_back(&p.unemb);
  return v;
}

std::vector<MatD*> quantizable_of(ParamsD& p) {
  std::vector<MatD*> v;
  for (auto& l : p.layers)
    for (MatD* m : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w_in, &l.w_out})
      v.push_back(m);
  return v;
}

ParamsD zero_like(const ToyConfig& cfg) {
  ParamsD p;
  p.cfg = cfg;
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t dm = d * static_cast<std::size_t>(cfg.mlp_ratio);
  p.tok_emb = MatD(static_cast<std::size_t>(cfg.vocab), d);
  p.pos_emb = MatD(static_cast<std::size_t>(cfg.ctx_len), d);
  p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& l : p.layers) {
    l.ln1_g = MatD(1, d);
    l.ln1_b = MatD(1, d);
    l.wq = MatD(d, d);
    l.wk = MatD(d, d);
    l.wv = MatD(d, d);
    l.wo = MatD(d, d);
    l.ln2_g = MatD(1, d);
    l.ln2_b = MatD(1, d);
    l.w_in = MatD(dm, d);
    l.w_out = MatD(d, dm);
  }
  p.lnf_g = MatD(1, d);
  p.lnf_b = MatD(1, d);
  p.unemb = MatD(static_cast<std::size_t>(cfg.vocab), d);
  return p;
}

ParamsD from_checkpoint(const ToyCheckpoint& c) {
  ParamsD p = zero_like(c.config);
  p.tok_emb = to_double(c.tok_emb);
  p.pos_emb = to_double(c.pos_emb);
  for (std::size_t i = 0; i < c.layers.size(); ++i) {
    const LayerWeights& s = c.layers[i];
    LayerD& d = p.layers[i];
    d.ln1_g = to_double(s.ln1_g);
    d.ln1_b = to_double(s.ln1_b);
    d.wq = to_double(s.wq);
    d.wk = to_double(s.wk);
    d.wv = to_double(s.wv);
    d.wo = to_double(s.wo);
    d.ln2_g = to_double(s.ln2_g);
    d.ln2_b = to_double(s.ln2_b);
    d.w_in = to_double(s.w_in);
    d.w_out = to_double(s.w_out);
  }
  p.lnf_g = to_double(c.lnf_g);
  p.lnf_b = to_double(c.lnf_b);
  p.unemb = to_double(c.unemb);
  return p;
}

ParamsD from_view(const ModelView& view) {
  if (view.quantizable.size() != quantizable_count(view.base->config))
    throw std::invalid_argument("replacement weight length mismatch");
  ParamsD p = from_checkpoint(*view.base);
  std::size_t off = 0;
  for (MatD* m : quantizable_of(p)) {
    std::copy(view.quantizable.begin() + static_cast<std::ptrdiff_t>(off),
              view.quantizable.begin() + static_cast<std::ptrdiff_t>(off + m->size()),
              m->a.begin());
    off += m->size();
  }
  return p;
}

struct LnCache {
  MatD normed;               // (x - mu) * rstd
  std::vector<double> rstd;  // per row
};

void layer_norm(const MatD& x, const MatD& g, const MatD& b, MatD& y,
                LnCache* c) {
  const std::size_t d = x.cols;
  y = MatD(x.rows, d);
  if (c) {
    c->normed = MatD(x.rows, d);
    c->rstd.assign(x.rows, 0.0);
  }
  for (std::size_t t = 0; t < x.rows; ++t) {
    const double* xr = x.row(t);
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    double* yr = y.row(t);
    for (std::size_t j = 0; j < d; ++j) {
      const double n = (xr[j] - mu) * rstd;
      if (c) c->normed.at(t, j) = n;
      yr[j] = n * g.a[j] + b.a[j];
    }
    if (c) c->rstd[t] = rstd;
  }
}

// dx += backward of layer_norm; accumulates the gain/bias gradients.
void layer_norm_backward(const MatD& dy, const MatD& g, const LnCache& c,
                         MatD& dx, MatD& dg, MatD& db) {
  const std::size_t d = dy.cols;
  for (std::size_t t = 0; t < dy.rows; ++t) {
    const double* dyr = dy.row(t);
    const double* nr = c.normed.row(t);
    double mean_dn = 0.0, mean_dnn = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double dn = dyr[j] * g.a[j];
      mean_dn += dn;
      mean_dnn += dn * nr[j];
      dg.a[j] += dyr[j] * nr[j];
      db.a[j] += dyr[j];
    }
    mean_dn /= static_cast<double>(d);
    mean_dnn /= static_cast<double>(d);
    double* dxr = dx.row(t);
    for (std::size_t j = 0; j < d; ++j) {
      const double dn = dyr[j] * g.a[j];
      dxr[j] += c.rstd[t] * (dn - mean_dn - nr[j] * mean_dnn);
    }
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

struct LayerCache {
  MatD x_in;  // residual stream entering the block
  LnCache ln1;
  MatD h1;             // ln1 output, the q/k/v/o input
  MatD q, k, v;        // T x d
  std::vector<MatD> p;  // per head, T x T causal softmax rows
  MatD attn;           // concatenated head outputs
  MatD x_mid;          // after the attention residual
  LnCache ln2;
  MatD h2;    // ln2 output, the MLP input
  MatD m, gm;  // pre- and post-GELU activations
};

struct SeqCache {
  std::vector<LayerCache> layers;
  MatD x_final;  // residual stream before the final norm
  LnCache lnf;
  MatD hf;     // final norm output, the unembedding input
  MatD probs;  // T x vocab softmax
};

// Returns the summed next-token NLL over the sequence; fills the cache when
// one is supplied (training/gradient path).
double forward_seq(const ParamsD& p, const std::uint8_t* seq, SeqCache* cache) {
  const ToyConfig& cfg = p.cfg;
  const std::size_t T = static_cast<std::size_t>(cfg.ctx_len);
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t dh = d / static_cast<std::size_t>(cfg.n_heads);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  MatD x(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    const double* te = p.tok_emb.row(seq[t]);
    const double* pe = p.pos_emb.row(t);
    double* xr = x.row(t);
    for (std::size_t j = 0; j < d; ++j) xr[j] = te[j] + pe[j];
  }
  if (cache) cache->layers.resize(p.layers.size());

  std::vector<double> scores(T);
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const LayerD& L = p.layers[li];
    LayerCache* lc = cache ? &cache->layers[li] : nullptr;
    if (lc) lc->x_in = x;

    MatD h1;
    LnCache ln1_local;
    layer_norm(x, L.ln1_g, L.ln1_b, h1, lc ? &lc->ln1 : &ln1_local);
    MatD q = matmul_nt(h1, L.wq);
    MatD k = matmul_nt(h1, L.wk);
    MatD v = matmul_nt(h1, L.wv);

    MatD attn(T, d);
    if (lc) lc->p.assign(static_cast<std::size_t>(cfg.n_heads), MatD());
    for (int h = 0; h < cfg.n_heads; ++h) {
      const std::size_t o = static_cast<std::size_t>(h) * dh;
      MatD* ph = lc ? &lc->p[static_cast<std::size_t>(h)] : nullptr;
      if (ph) *ph = MatD(T, T);
      for (std::size_t t = 0; t < T; ++t) {
        double smax = -1e300;
        for (std::size_t u = 0; u <= t; ++u) {
          scores[u] = dot_d(q.row(t) + o, k.row(u) + o, dh) * inv_sqrt_dh;
          smax = std::max(smax, scores[u]);
        }
        double z = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          scores[u] = std::exp(scores[u] - smax);
          z += scores[u];
        }
        double* ar = attn.row(t) + o;
        for (std::size_t u = 0; u <= t; ++u) {
          const double pw = scores[u] / z;
          if (ph) ph->at(t, u) = pw;
          axpy_d(pw, v.row(u) + o, ar, dh);
        }
      }
    }
    MatD xo = matmul_nt(attn, L.wo);
    for (std::size_t i = 0; i < x.size(); ++i) x.a[i] += xo.a[i];
    if (lc) {
      lc->h1 = std::move(h1);
      lc->q = std::move(q);
      lc->k = std::move(k);
      lc->v = std::move(v);
      lc->attn = std::move(attn);
      lc->x_mid = x;
    }

    MatD h2;
    LnCache ln2_local;
    layer_norm(x, L.ln2_g, L.ln2_b, h2, lc ? &lc->ln2 : &ln2_local);
    MatD m = matmul_nt(h2, L.w_in);
    MatD gm(m.rows, m.cols);
    for (std::size_t i = 0; i < m.size(); ++i) gm.a[i] = gelu(m.a[i]);
    MatD xm = matmul_nt(gm, L.w_out);
    for (std::size_t i = 0; i < x.size(); ++i) x.a[i] += xm.a[i];
    if (lc) {
      lc->h2 = std::move(h2);
      lc->m = std::move(m);
      lc->gm = std::move(gm);
    }
  }

  if (cache) cache->x_final = x;
  MatD hf;
  LnCache lnf_local;
  layer_norm(x, p.lnf_g, p.lnf_b, hf, cache ? &cache->lnf : &lnf_local);
  MatD logits = matmul_nt(hf, p.unemb);
  if (cache) {
    cache->hf = std::move(hf);
    cache->probs = MatD(T, static_cast<std::size_t>(cfg.vocab));
  }

  double nll = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    const double* lr = logits.row(t);
    double lmax = lr[0];
    for (int j = 1; j < cfg.vocab; ++j) lmax = std::max(lmax, lr[j]);
    double z = 0.0;
    for (int j = 0; j < cfg.vocab; ++j) z += std::exp(lr[j] - lmax);
    const double lse = lmax + std::log(z);
    nll += lse - lr[seq[t + 1]];
    if (cache) {
      double* pr = cache->probs.row(t);
      for (int j = 0; j < cfg.vocab; ++j) pr[j] = std::exp(lr[j] - lse);
    }
  }
  return nll;
}

// Accumulates scale * d(sum nll)/d(params) into g.
void backward_seq(const ParamsD& p, const std::uint8_t* seq, const SeqCache& c,
                  double scale, ParamsD& g) {
  const ToyConfig& cfg = p.cfg;
  const std::size_t T = static_cast<std::size_t>(cfg.ctx_len);
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t dh = d / static_cast<std::size_t>(cfg.n_heads);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  MatD dlogits = c.probs;
  for (std::size_t t = 0; t < T; ++t) {
    dlogits.at(t, seq[t + 1]) -= 1.0;
    for (int j = 0; j < cfg.vocab; ++j) dlogits.at(t, static_cast<std::size_t>(j)) *= scale;
  }
  addmul_tn(g.unemb, dlogits, c.hf);
  MatD dhf(T, d);
  addmul_nn(dhf, dlogits, p.unemb);

  MatD dx(T, d);
  layer_norm_backward(dhf, p.lnf_g, c.lnf, dx, g.lnf_g, g.lnf_b);

  std::vector<double> dp(T), ds(T);
  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const LayerD& L = p.layers[li];
    const LayerCache& lc = c.layers[li];
    LayerD& gl = g.layers[li];

    // MLP branch: x_out = x_mid + gelu(ln2(x_mid) W_in^T) W_out^T
    MatD dgm(T, lc.gm.cols);
    addmul_nn(dgm, dx, L.w_out);
    addmul_tn(gl.w_out, dx, lc.gm);
    MatD dm(T, lc.m.cols);
    for (std::size_t i = 0; i < dm.size(); ++i)
      dm.a[i] = dgm.a[i] * gelu_grad(lc.m.a[i]);
    MatD dh2(T, d);
    addmul_nn(dh2, dm, L.w_in);
    addmul_tn(gl.w_in, dm, lc.h2);
    layer_norm_backward(dh2, L.ln2_g, lc.ln2, dx, gl.ln2_g, gl.ln2_b);

    // Attention branch: x_mid = x_in + attn(ln1(x_in)) Wo^T
    MatD dattn(T, d);
    addmul_nn(dattn, dx, L.wo);
    addmul_tn(gl.wo, dx, lc.attn);

    MatD dq(T, d), dk(T, d), dv(T, d);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const std::size_t o = static_cast<std::size_t>(h) * dh;
      const MatD& ph = lc.p[static_cast<std::size_t>(h)];
      for (std::size_t t = 0; t < T; ++t) {
        const double* dar = dattn.row(t) + o;
        double sum_dp = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          dp[u] = dot_d(dar, lc.v.row(u) + o, dh);
          axpy_d(ph.at(t, u), dar, dv.row(u) + o, dh);
          sum_dp += ph.at(t, u) * dp[u];
        }
        for (std::size_t u = 0; u <= t; ++u) {
          ds[u] = ph.at(t, u) * (dp[u] - sum_dp) * inv_sqrt_dh;
          axpy_d(ds[u], lc.k.row(u) + o, dq.row(t) + o, dh);
          axpy_d(ds[u], lc.q.row(t) + o, dk.row(u) + o, dh);
        }
      }
    }
    addmul_tn(gl.wq, dq, lc.h1);
    addmul_tn(gl.wk, dk, lc.h1);
    addmul_tn(gl.wv, dv, lc.h1);
    MatD dh1(T, d);
    addmul_nn(dh1, dq, L.wq);
    addmul_nn(dh1, dk, L.wk);
    addmul_nn(dh1, dv, L.wv);
    layer_norm_backward(dh1, L.ln1_g, lc.ln1, dx, gl.ln1_g, gl.ln1_b);
  }

  for (std::size_t t = 0; t < T; ++t) {
    axpy_d(1.0, dx.row(t), g.tok_emb.row(seq[t]), d);
    axpy_d(1.0, dx.row(t), g.pos_emb.row(t), d);
  }
}

double split_nll(const ParamsD& p, const TokenDataset& ds, Split split) {
  const auto& idx = ds.split_indices(split);
  if (idx.empty()) throw std::invalid_argument("empty dataset split");
  double sum = 0.0;
  for (std::uint32_t i : idx) sum += forward_seq(p, ds.seq(i), nullptr);
  return sum / (static_cast<double>(idx.size()) * p.cfg.ctx_len);
}

ParamsD split_grad(const ParamsD& p, const TokenDataset& ds, Split split) {
  const auto& idx = ds.split_indices(split);
  if (idx.empty()) throw std::invalid_argument("empty dataset split");
  ParamsD g = zero_like(p.cfg);
  const double scale = 1.0 / (static_cast<double>(idx.size()) * p.cfg.ctx_len);
  SeqCache cache;
  for (std::uint32_t i : idx) {
    forward_seq(p, ds.seq(i), &cache);
    backward_seq(p, ds.seq(i), cache, scale, g);
  }
  return g;
}

std::vector<double> flatten_ptrs(const std::vector<MatD*>& ms) {
  std::vector<double> out;
  std::size_t n = 0;
  for (MatD* m : ms) n += m->size();
  out.reserve(n);
  for (MatD* m : ms) out.insert(out.end(), m->a.begin(), m->a.end());
  return out;
}

void fill_gaussian(MatD& m, Rng& rng, double std_dev) {
  for (auto& v : m.a) v = std_dev * rng.gaussian();
}

ToyCheckpoint to_checkpoint(const ParamsD& p) {
  ToyCheckpoint c;
  c.config = p.cfg;
  c.tok_emb = to_float(p.tok_emb);
  c.pos_emb = to_float(p.pos_emb);
  c.layers.resize(p.layers.size());
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const LayerD& s = p.layers[i];
    LayerWeights& d = c.layers[i];
    d.ln1_g = to_float(s.ln1_g);
    d.ln1_b = to_float(s.ln1_b);
    d.wq = to_float(s.wq);
    d.wk = to_float(s.wk);
    d.wv = to_float(s.wv);
    d.wo = to_float(s.wo);
    d.ln2_g = to_float(s.ln2_g);
    d.ln2_b = to_float(s.ln2_b);
    d.w_in = to_float(s.w_in);
    d.w_out = to_float(s.w_out);
  }
  c.lnf_g = to_float(p.lnf_g);
  c.lnf_b = to_float(p.lnf_b);
  c.unemb = to_float(p.unemb);
  return c;
}

std::vector<std::pair<std::string, MatF*>> tensor_table(ToyCheckpoint& c) {
  std::vector<std::pair<std::string, MatF*>> t;
  t.emplace_back("tok_emb", &c.tok_emb);
  t.emplace_back("pos_emb", &c.pos_emb);
  for (std::size_t i = 0; i < c.layers.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i) + ".";
    LayerWeights& l = c.layers[i];
    t.emplace_back(prefix + "ln1_g", &l.ln1_g);
    t.emplace_back(prefix + "ln1_b", &l.ln1_b);
    t.emplace_back(prefix + "wq", &l.wq);
    t.emplace_back(prefix + "wk", &l.wk);
    t.emplace_back(prefix + "wv", &l.wv);
    t.emplace_back(prefix + "wo", &l.wo);
    t.emplace_back(prefix + "ln2_g", &l.ln2_g);
    t.emplace_back(prefix + "ln2_b", &l.ln2_b);
    t.emplace_back(prefix + "w_in", &l.w_in);
    t.emplace_back(prefix + "w_out", &l.w_out);
  }
  t.emplace_back("lnf_g", &c.lnf_g);
  t.emplace_back("lnf_b", &c.lnf_b);
  t.emplace_back("unemb", &c.unemb);
  return t;
}

void expected_shape(const ToyConfig& cfg, const std::string& name,
                    std::size_t* rows, std::size_t* cols) {
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t dm = d * static_cast<std::size_t>(cfg.mlp_ratio);
  const auto tail = name.substr(name.find('.') + 1);
  if (name == "tok_emb" || name == "unemb") {
    *rows = static_cast<std::size_t>(cfg.vocab);
    *cols = d;
  } else if (name == "pos_emb") {
    *rows = static_cast<std::size_t>(cfg.ctx_len);
    *cols = d;
  } else if (tail == "w_in") {
    *rows = dm;
    *cols = d;
  } else if (tail == "w_out") {
    *rows = d;
    *cols = dm;
  } else if (tail.rfind("ln", 0) == 0 || name.rfind("lnf", 0) == 0) {
    *rows = 1;
    *cols = d;
  } else {
    *rows = d;
    *cols = d;
  }
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* b = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

ToyConfig preset_config(const std::string& name) {
  ToyConfig c;
  if (name == "s1") {
    c.d_model = 32;
    c.n_layers = 1;
    c.n_heads = 2;
  } else if (name == "s2") {
    c.d_model = 48;
    c.n_layers = 2;
    c.n_heads = 2;
  } else if (name == "s3") {
    c.d_model = 64;
    c.n_layers = 2;
    c.n_heads = 2;
  } else if (name == "s4") {
    c.d_model = 96;
    c.n_layers = 3;
    c.n_heads = 3;
  } else {
    throw std::invalid_argument("unknown size preset: " + name);
  }
  return c;
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"s1", "s2", "s3", "s4"};
  return names;
}

TokenDataset make_dataset(std::span<const std::uint8_t> corpus, int ctx_len,
                          std::uint64_t seed) {
  if (ctx_len <= 0) throw std::invalid_argument("ctx_len must be positive");
  const std::size_t seq_len = static_cast<std::size_t>(ctx_len) + 1;
  const std::size_t n = corpus.size() / seq_len;
  if (n < 2)
    throw std::invalid_argument("corpus provides fewer than two sequences");
  TokenDataset ds;
  ds.seq_len = static_cast<int>(seq_len);
  ds.data.assign(corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(n * seq_len));
  std::vector<std::uint32_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t n_valid = std::max<std::size_t>(1, n / 10);
  ds.valid_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_valid));
  ds.train_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_valid), order.end());
  std::sort(ds.valid_idx.begin(), ds.valid_idx.end());
  std::sort(ds.train_idx.begin(), ds.train_idx.end());
  return ds;
}

TokenDataset dataset_for(const ToyCheckpoint& ckpt,
                         std::span<const std::uint8_t> corpus) {
  return make_dataset(corpus, ckpt.config.ctx_len, mix_seed(ckpt.seed, 2));
}

std::size_t quantizable_count(const ToyConfig& cfg) {
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t dm = d * static_cast<std::size_t>(cfg.mlp_ratio);
  return static_cast<std::size_t>(cfg.n_layers) * (4 * d * d + 2 * d * dm);
}

std::vector<std::pair<std::string, const MatF*>> quantizable_tensors(
    const ToyCheckpoint& ckpt) {
  std::vector<std::pair<std::string, const MatF*>> t;
  for (std::size_t i = 0; i < ckpt.layers.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i) + ".";
    const LayerWeights& l = ckpt.layers[i];
    t.emplace_back(prefix + "wq", &l.wq);
    t.emplace_back(prefix + "wk", &l.wk);
    t.emplace_back(prefix + "wv", &l.wv);
    t.emplace_back(prefix + "wo", &l.wo);
    t.emplace_back(prefix + "w_in", &l.w_in);
    t.emplace_back(prefix + "w_out", &l.w_out);
  }
  return t;
}

std::vector<double> flatten_quantizable(const ToyCheckpoint& ckpt) {
  std::vector<double> w;
  w.reserve(quantizable_count(ckpt.config));
  for (const auto& [name, m] : quantizable_tensors(ckpt))
    for (float v : m->a) w.push_back(v);
  return w;
}

ModelView make_view(const ToyCheckpoint& ckpt) {
  return ModelView{&ckpt, flatten_quantizable(ckpt)};
}

ModelView apply_weights(const ToyCheckpoint& ckpt, std::span<const double> w) {
  if (w.size() != quantizable_count(ckpt.config))
    throw std::invalid_argument("replacement weight length mismatch");
  return ModelView{&ckpt, std::vector<double>(w.begin(), w.end())};
}

ToyCheckpoint materialize(const ModelView& view) {
  ParamsD p = from_view(view);
  ToyCheckpoint c = to_checkpoint(p);
  c.seed = view.base->seed;
  c.steps = view.base->steps;
  c.train_nll = view.base->train_nll;
  c.valid_nll = view.base->valid_nll;
  return c;
}

double eval_nll(const ModelView& view, const TokenDataset& ds, Split split) {
  return split_nll(from_view(view), ds, split);
}

double eval_nll(const ToyCheckpoint& ckpt, const TokenDataset& ds, Split split) {
  return split_nll(from_checkpoint(ckpt), ds, split);
}

std::vector<double> grad_nll(const ModelView& view, const TokenDataset& ds,
                             Split split) {
  ParamsD p = from_view(view);
  ParamsD g = split_grad(p, ds, split);
  return flatten_ptrs(quantizable_of(g));
}

std::vector<double> hvp_fd(
    const std::function<std::vector<double>(std::span<const double>)>& grad_fn,
    std::span<const double> w, std::span<const double> v) {
  const double vn = l2_norm(v);
  if (!(vn > 1e-18)) throw std::invalid_argument("hvp direction is near zero");
  double wn = 0.0;
  for (double x : w) wn += x * x;
  wn = std::sqrt(wn);
  const double eps = (wn > 0.0 ? 1e-4 * wn : 1e-4);
  std::vector<double> wp(w.begin(), w.end()), wm(w.begin(), w.end());
  const double step = eps / vn;
  for (std::size_t i = 0; i < w.size(); ++i) {
    wp[i] += step * v[i];
    wm[i] -= step * v[i];
  }
  const std::vector<double> gp = grad_fn(wp);
  const std::vector<double> gm = grad_fn(wm);
  std::vector<double> out(w.size());
  const double coef = vn / (2.0 * eps);
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = (gp[i] - gm[i]) * coef;
  return out;
}

std::vector<double> hvp(const ModelView& view, std::span<const double> v,
                        const TokenDataset& ds, Split split) {
  const ToyCheckpoint* base = view.base;
  auto grad_fn = [&](std::span<const double> w) {
    return grad_nll(apply_weights(*base, w), ds, split);
  };
  return hvp_fd(grad_fn, view.quantizable, v);
}

ToyCheckpoint train(std::span<const std::uint8_t> corpus, const ToyConfig& cfg,
                    const TrainOptions& opt, std::uint64_t seed) {
  validate_config(cfg);
  if (corpus.size() < 100000)
    throw std::invalid_argument("corpus must be at least 1e5 bytes");
  if (opt.steps < 0 || opt.batch_size <= 0 || !(opt.lr > 0.0))
    throw std::invalid_argument("bad training options");

  const TokenDataset ds = make_dataset(corpus, cfg.ctx_len, mix_seed(seed, 2));
  if (ds.train_idx.empty()) throw std::invalid_argument("empty train split");

  Rng init_rng(mix_seed(seed, 0));
  ParamsD p = zero_like(cfg);
  fill_gaussian(p.tok_emb, init_rng, 0.02);
  fill_gaussian(p.pos_emb, init_rng, 0.02);
  const double out_std = 0.02 / std::sqrt(2.0 * cfg.n_layers);
  for (auto& l : p.layers) {
    l.ln1_g.fill(1.0);
    l.ln2_g.fill(1.0);
    fill_gaussian(l.wq, init_rng, 0.02);
    fill_gaussian(l.wk, init_rng, 0.02);
    fill_gaussian(l.wv, init_rng, 0.02);
    fill_gaussian(l.wo, init_rng, out_std);
    fill_gaussian(l.w_in, init_rng, 0.02);
    fill_gaussian(l.w_out, init_rng, out_std);
  }
  p.lnf_g.fill(1.0);
  fill_gaussian(p.unemb, init_rng, 0.02);

  ParamsD m = zero_like(cfg), v = zero_like(cfg);
  const std::vector<MatD*> params = all_tensors(p);
  std::vector<MatD*> ms = all_tensors(m), vs = all_tensors(v);

  Rng batch_rng(mix_seed(seed, 1));
  const double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;
  SeqCache cache;
  for (int step = 0; step < opt.steps; ++step) {
    ParamsD g = zero_like(cfg);
    const double scale =
        1.0 / (static_cast<double>(opt.batch_size) * cfg.ctx_len);
    double loss = 0.0;
    for (int b = 0; b < opt.batch_size; ++b) {
      const std::uint32_t si = ds.train_idx[static_cast<std::size_t>(
          batch_rng.uniform_index(ds.train_idx.size()))];
      const double nll = forward_seq(p, ds.seq(si), &cache);
      loss += nll * scale;
      backward_seq(p, ds.seq(si), cache, scale, g);
    }
    if (!std::isfinite(loss))
      throw std::runtime_error("training diverged at step " +
                               std::to_string(step));
    const std::vector<MatD*> gs = all_tensors(g);
    const double bc1 = 1.0 - std::pow(b1, step + 1);
    const double bc2 = 1.0 - std::pow(b2, step + 1);
    for (std::size_t ti = 0; ti < params.size(); ++ti) {
      MatD& w = *params[ti];
      MatD& mm = *ms[ti];
      MatD& vv = *vs[ti];
      const MatD& gg = *gs[ti];
      for (std::size_t i = 0; i < w.size(); ++i) {
        mm.a[i] = b1 * mm.a[i] + (1.0 - b1) * gg.a[i];
        vv.a[i] = b2 * vv.a[i] + (1.0 - b2) * gg.a[i] * gg.a[i];
        w.a[i] -= opt.lr * (mm.a[i] / bc1) /
                  (std::sqrt(vv.a[i] / bc2) + adam_eps);
      }
    }
  }

  ToyCheckpoint c = to_checkpoint(p);
  c.seed = seed;
  c.steps = opt.steps;
  const ParamsD final_p = from_checkpoint(c);
  c.train_nll = split_nll(final_p, ds, Split::train);
  c.valid_nll = split_nll(final_p, ds, Split::valid);
  if (!std::isfinite(c.valid_nll))
    throw std::runtime_error("training diverged at step " +
                             std::to_string(opt.steps));
  return c;
}

CalibCapture capture_second_moments(const ToyCheckpoint& ckpt,
                                    const TokenDataset& ds,
                                    std::size_t max_seqs) {
  if (ds.train_idx.empty()) throw std::invalid_argument("empty train split");
  if (max_seqs == 0) throw std::invalid_argument("max_seqs must be positive");
  const ParamsD p = from_checkpoint(ckpt);
  const ToyConfig& cfg = p.cfg;
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t dm = d * static_cast<std::size_t>(cfg.mlp_ratio);
  const std::size_t n_layers = p.layers.size();

  std::vector<MatD> attn_in(n_layers, MatD(d, d));
  std::vector<MatD> attn_out(n_layers, MatD(d, d));
  std::vector<MatD> mlp_in(n_layers, MatD(d, d));
  std::vector<MatD> mlp_out(n_layers, MatD(dm, dm));

  const std::size_t n_seqs =
      std::min<std::size_t>(max_seqs, ds.train_idx.size());
  SeqCache cache;
  for (std::size_t i = 0; i < n_seqs; ++i) {
    forward_seq(p, ds.seq(ds.train_idx[i]), &cache);
    for (std::size_t li = 0; li < n_layers; ++li) {
      const LayerCache& lc = cache.layers[li];
      addmul_tn(attn_in[li], lc.h1, lc.h1);
      addmul_tn(attn_out[li], lc.attn, lc.attn);
      addmul_tn(mlp_in[li], lc.h2, lc.h2);
      addmul_tn(mlp_out[li], lc.gm, lc.gm);
    }
  }

  CalibCapture cap;
  cap.n_samples = n_seqs * static_cast<std::size_t>(cfg.ctx_len);
  cap.second_moments.reserve(6 * n_layers);
  for (std::size_t li = 0; li < n_layers; ++li) {
    cap.second_moments.push_back(attn_in[li]);   // wq
    cap.second_moments.push_back(attn_in[li]);   // wk
    cap.second_moments.push_back(attn_in[li]);   // wv
    cap.second_moments.push_back(std::move(attn_out[li]));
    cap.second_moments.push_back(std::move(mlp_in[li]));
    cap.second_moments.push_back(std::move(mlp_out[li]));
  }
  return cap;
}

void save_checkpoint(const ToyCheckpoint& ckpt, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  ToyCheckpoint& c = const_cast<ToyCheckpoint&>(ckpt);
  const auto table = tensor_table(c);

  nlohmann::ordered_json manifest;
  manifest["config"] = {{"vocab", ckpt.config.vocab},
                        {"d_model", ckpt.config.d_model},
                        {"n_layers", ckpt.config.n_layers},
                        {"n_heads", ckpt.config.n_heads},
                        {"ctx_len", ckpt.config.ctx_len},
                        {"mlp_ratio", ckpt.config.mlp_ratio}};
  manifest["seed"] = ckpt.seed;
  manifest["steps"] = ckpt.steps;
  manifest["train_nll"] = ckpt.train_nll;
  manifest["valid_nll"] = ckpt.valid_nll;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& [name, mat] : table) {
    tensors.push_back({{"name", name},
                       {"rows", mat->rows},
                       {"cols", mat->cols},
                       {"offset", offset}});
    offset += mat->size() * sizeof(float);
  }
  manifest["tensors"] = std::move(tensors);

  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("cannot write manifest in " + dir);
  mf << manifest.dump(2) << "\n";

  std::ofstream bf(fs::path(dir) / "weights.bin", std::ios::binary);
  if (!bf) throw std::runtime_error("cannot write weights in " + dir);
  static_assert(std::endian::native == std::endian::little,
                "weight blobs are little-endian");
  for (const auto& [name, mat] : table)
    bf.write(reinterpret_cast<const char*>(mat->a.data()),
             static_cast<std::streamsize>(mat->size() * sizeof(float)));
  if (!bf) throw std::runtime_error("weight blob write failed in " + dir);
}

ToyCheckpoint load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("cannot open manifest in " + dir);
  nlohmann::json manifest = nlohmann::json::parse(mf);

  ToyCheckpoint c;
  const auto& jc = manifest.at("config");
  c.config.vocab = jc.at("vocab").get<int>();
  c.config.d_model = jc.at("d_model").get<int>();
  c.config.n_layers = jc.at("n_layers").get<int>();
  c.config.n_heads = jc.at("n_heads").get<int>();
  c.config.ctx_len = jc.at("ctx_len").get<int>();
  c.config.mlp_ratio = jc.at("mlp_ratio").get<int>();
  validate_config(c.config);
  c.seed = manifest.at("seed").get<std::uint64_t>();
  c.steps = manifest.at("steps").get<int>();
  c.train_nll = manifest.at("train_nll").get<double>();
  c.valid_nll = manifest.at("valid_nll").get<double>();

  c.layers.resize(static_cast<std::size_t>(c.config.n_layers));
  const auto table = tensor_table(c);
  const auto& jt = manifest.at("tensors");
  if (jt.size() != table.size())
    throw std::runtime_error("tensor table size mismatch in " + dir);

  std::ifstream bf(fs::path(dir) / "weights.bin", std::ios::binary);
  if (!bf) throw std::runtime_error("cannot open weights in " + dir);
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& [name, mat] = table[i];
    const auto& jrow = jt[i];
    if (jrow.at("name").get<std::string>() != name)
      throw std::runtime_error("unexpected tensor order in " + dir);
    std::size_t rows = 0, cols = 0;
    expected_shape(c.config, name, &rows, &cols);
    if (jrow.at("rows").get<std::size_t>() != rows ||
        jrow.at("cols").get<std::size_t>() != cols)
      throw std::runtime_error("tensor shape mismatch for " + name);
    *mat = MatF(rows, cols);
    bf.seekg(static_cast<std::streamoff>(jrow.at("offset").get<std::size_t>()));
    bf.read(reinterpret_cast<char*>(mat->a.data()),
            static_cast<std::streamsize>(mat->size() * sizeof(float)));
    if (bf.gcount() != static_cast<std::streamsize>(mat->size() * sizeof(float)))
      throw std::runtime_error("weight blob truncated in " + dir);
  }
  return c;
}

std::string checkpoint_hash(const ToyCheckpoint& ckpt) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const int header[6] = {ckpt.config.vocab,   ckpt.config.d_model,
                         ckpt.config.n_layers, ckpt.config.n_heads,
                         ckpt.config.ctx_len, ckpt.config.mlp_ratio};
  h = fnv1a(h, header, sizeof header);
  h = fnv1a(h, &ckpt.seed, sizeof ckpt.seed);
  h = fnv1a(h, &ckpt.steps, sizeof ckpt.steps);
  ToyCheckpoint& c = const_cast<ToyCheckpoint&>(ckpt);
  for (const auto& [name, mat] : tensor_table(c)) {
    h = fnv1a(h, name.data(), name.size());
    h = fnv1a(h, mat->a.data(), mat->size() * sizeof(float));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::uint8_t> synthetic_corpus(std::size_t n_bytes,
                                           std::uint64_t seed) {
  Rng rng(seed);
  const char* letters = "etaoinshrdlucmfwygpbvkxqjz";
  const std::size_t n_words = 220;
  std::vector<std::string> words(n_words);
  for (auto& w : words) {
    const std::size_t len = 2 + rng.uniform_index(7);
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t a = rng.uniform_index(26);
      const std::size_t b = rng.uniform_index(26);
      w.push_back(letters[std::min(a, b)]);
    }
  }

  std::vector<std::uint8_t> out;
  out.reserve(n_bytes + 16);
  bool sentence_start = true;
  std::size_t words_in_sentence = 0;
  std::size_t sentence_len = 5 + rng.uniform_index(10);
  while (out.size() < n_bytes) {
    // Rank r is log-uniform, approximating a Zipf word-frequency law.
    const double u = rng.uniform01();
    auto r = static_cast<std::size_t>(
        std::pow(static_cast<double>(n_words), u)) - 1;
    r = std::min(r, n_words - 1);
    std::string w = words[r];
    if (sentence_start) {
      w[0] = static_cast<char>(std::toupper(w[0]));
      sentence_start = false;
    }
    out.insert(out.end(), w.begin(), w.end());
    if (++words_in_sentence >= sentence_len) {
      out.push_back('.');
      out.push_back(rng.uniform_index(4) == 0 ? '\n' : ' ');
      sentence_start = true;
      words_in_sentence = 0;
      sentence_len = 5 + rng.uniform_index(10);
    } else {
      out.push_back(' ');
    }
  }
  out.resize(n_bytes);
  return out;
}

}  // namespace qlab
