#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cwm/io.hpp"
#include "cwm/rng.hpp"
#include "cwm/tensor.hpp"

namespace cwm::nn {

// ---------------------------------------------------------------------------
// Parameter store, initialization, serialization
// ---------------------------------------------------------------------------

template <class S>
struct ParamStoreT {
  struct Entry {
    std::string name;
    TensorT<S> tensor;
  };
  std::vector<Entry> entries;

  TensorT<S> add(const std::string& name, std::vector<int> shape,
                 const std::function<S()>& init) {
    auto t = TensorT<S>::zeros(std::move(shape), /*requires_grad=*/true);
    if (init)
      for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = init();
    entries.push_back({name, t});
    return t;
  }

  TensorT<S> add_const_init(const std::string& name, std::vector<int> shape, S value) {
    auto t = TensorT<S>::zeros(std::move(shape), /*requires_grad=*/true);
    std::fill_n(t.data(), t.numel(), value);
    entries.push_back({name, t});
    return t;
  }

  // Serialized with the model but excluded from optimization (e.g.
  // normalization statistics).
  TensorT<S> add_buffer(const std::string& name, std::vector<int> shape) {
    auto t = TensorT<S>::zeros(std::move(shape), /*requires_grad=*/false);
    entries.push_back({name, t});
    return t;
  }

  size_t count() const {
    size_t n = 0;
    for (const auto& e : entries) n += static_cast<size_t>(e.tensor.numel());
    return n;
  }

  void zero_grad() {
    for (auto& e : entries) e.tensor.zero_grad();
  }

  uint64_t value_hash() const {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& e : entries) {
      h = fnv1a64(e.name, h);
      h = fnv1a64(e.tensor.data(), static_cast<size_t>(e.tensor.numel()) * sizeof(S), h);
    }
    return h;
  }

  void save(const std::filesystem::path& path) const {
    io::BinWriter w(path);
    w.magic("CWMW");
    w.u32(static_cast<uint32_t>(entries.size()));
    for (const auto& e : entries) {
      w.u32(static_cast<uint32_t>(e.name.size()));
      w.u8s(reinterpret_cast<const uint8_t*>(e.name.data()), e.name.size());
      w.u32(static_cast<uint32_t>(e.tensor.ndim()));
      for (int i = 0; i < e.tensor.ndim(); ++i) w.u32(static_cast<uint32_t>(e.tensor.dim(i)));
      static_assert(sizeof(S) == 4 || sizeof(S) == 8);
      if constexpr (sizeof(S) == 4) {
        w.f32s(reinterpret_cast<const float*>(e.tensor.data()),
               static_cast<size_t>(e.tensor.numel()));
      } else {
        for (int64_t i = 0; i < e.tensor.numel(); ++i)
          w.f32(static_cast<float>(e.tensor.data()[i]));
      }
    }
    w.close();
  }

  // Shapes must already match (the model defines the architecture; the file
  // carries values).
  void load(const std::filesystem::path& path) {
    io::BinReader r(path);
    r.expect_magic("CWMW");
    const uint32_t count = r.u32();
    if (count != entries.size())
      throw IoError("weights file " + path.string() + " has " + std::to_string(count) +
                    " tensors, model expects " + std::to_string(entries.size()));
    for (auto& e : entries) {
      const uint32_t name_len = r.u32();
      std::string name(name_len, '\0');
      r.u8s(reinterpret_cast<uint8_t*>(name.data()), name_len);
      if (name != e.name) throw IoError("weights mismatch: expected " + e.name + ", found " + name);
      const uint32_t ndim = r.u32();
      if (static_cast<int>(ndim) != e.tensor.ndim()) throw IoError("rank mismatch for " + e.name);
      int64_t numel = 1;
      for (uint32_t i = 0; i < ndim; ++i) {
        const uint32_t d = r.u32();
        if (static_cast<int>(d) != e.tensor.dim(static_cast<int>(i)))
          throw IoError("shape mismatch for " + e.name);
        numel *= d;
      }
      if constexpr (sizeof(S) == 4) {
        r.f32s(reinterpret_cast<float*>(e.tensor.data()), static_cast<size_t>(numel));
      } else {
        for (int64_t i = 0; i < numel; ++i) e.tensor.data()[i] = static_cast<S>(r.f32());
      }
    }
  }
};

using ParamStore = ParamStoreT<float>;

template <class S>
std::function<S()> normal_init(Rng& rng, double stddev) {
  return [&rng, stddev]() { return static_cast<S>(rng.normal() * stddev); };
}

template <class S>
std::function<S()> xavier_init(Rng& rng, int fan_in, int fan_out) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  return normal_init<S>(rng, stddev);
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay
// ---------------------------------------------------------------------------

template <class S>
class AdamWT {
 public:
  AdamWT(ParamStoreT<S>& params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double weight_decay = 0.01, double eps = 1e-8)
      : params_(params), lr_(lr), beta1_(beta1), beta2_(beta2), wd_(weight_decay), eps_(eps) {
    states_.resize(params.entries.size());
    for (size_t i = 0; i < states_.size(); ++i) {
      const size_t n = static_cast<size_t>(params.entries[i].tensor.numel());
      states_[i].m.assign(n, S(0));
      states_[i].v.assign(n, S(0));
    }
  }

  double global_grad_norm() const {
    double sq = 0.0;
    for (auto& e : params_.entries) {
      const auto& g = e.tensor.grad_vec();
      for (S gi : g) sq += static_cast<double>(gi) * static_cast<double>(gi);
    }
    return std::sqrt(sq);
  }

  void clip_global_norm(double max_norm) {
    const double norm = global_grad_norm();
    if (norm <= max_norm || norm == 0.0) return;
    const S s = static_cast<S>(max_norm / norm);
    for (auto& e : params_.entries) {
      S* g = e.tensor.grad();
      for (int64_t i = 0; i < e.tensor.numel(); ++i) g[i] *= s;
    }
  }

  void step(double lr_scale = 1.0) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    const double lr = lr_ * lr_scale;
    for (size_t p = 0; p < params_.entries.size(); ++p) {
      auto& tensor = params_.entries[p].tensor;
      if (!tensor.requires_grad()) continue;  // buffers
      auto& st = states_[p];
      S* w = tensor.data();
      S* g = tensor.grad();
      const int64_t n = tensor.numel();
      for (int64_t i = 0; i < n; ++i) {
        const double gi = g[i];
        st.m[static_cast<size_t>(i)] =
            static_cast<S>(beta1_ * st.m[static_cast<size_t>(i)] + (1.0 - beta1_) * gi);
        st.v[static_cast<size_t>(i)] =
            static_cast<S>(beta2_ * st.v[static_cast<size_t>(i)] + (1.0 - beta2_) * gi * gi);
        const double mhat = st.m[static_cast<size_t>(i)] / bc1;
        const double vhat = st.v[static_cast<size_t>(i)] / bc2;
        w[i] -= static_cast<S>(lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w[i]));
      }
    }
  }

  void zero_grad() { params_.zero_grad(); }

 private:
  struct State {
    std::vector<S> m, v;
  };
  ParamStoreT<S>& params_;
  std::vector<State> states_;
  double lr_, beta1_, beta2_, wd_, eps_;
  int64_t t_ = 0;
};

using AdamW = AdamWT<float>;

// Linear warmup then cosine decay to zero; returns a multiplier for the base lr.
inline double lr_schedule(int step, int total_steps, int warmup_steps) {
  if (warmup_steps > 0 && step < warmup_steps)
    return static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  const double span = std::max(1, total_steps - warmup_steps);
  const double u = std::min(1.0, static_cast<double>(step - warmup_steps) / span);
  return 0.5 * (1.0 + std::cos(3.14159265358979323846 * u));
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <class S>
struct LinearLayerT {
  TensorT<S> w, b;

  static LinearLayerT make(ParamStoreT<S>& ps, const std::string& name, int in, int out, Rng& rng,
                           bool zero_init = false) {
    LinearLayerT l;
    l.w = zero_init ? ps.add_const_init(name + ".w", {in, out}, S(0))
                    : ps.add(name + ".w", {in, out}, xavier_init<S>(rng, in, out));
    l.b = ps.add_const_init(name + ".b", {out}, S(0));
    return l;
  }

  TensorT<S> fwd(const TensorT<S>& x) const { return linear(x, w, b); }
};

template <class S>
struct LayerNormLayerT {
  TensorT<S> g, b;

  static LayerNormLayerT make(ParamStoreT<S>& ps, const std::string& name, int dim) {
    LayerNormLayerT l;
    l.g = ps.add_const_init(name + ".g", {dim}, S(1));
    l.b = ps.add_const_init(name + ".b", {dim}, S(0));
    return l;
  }

  TensorT<S> fwd(const TensorT<S>& x) const { return layer_norm(x, g, b); }

  void reset_identity() {
    std::fill_n(g.data(), g.numel(), S(1));
    std::fill_n(b.data(), b.numel(), S(0));
  }
};

template <class S>
struct MhaLayerT {
  LinearLayerT<S> q, k, v, o;
  int heads = 1;

  static MhaLayerT make(ParamStoreT<S>& ps, const std::string& name, int dim, int heads,
                        Rng& rng) {
    MhaLayerT m;
    m.q = LinearLayerT<S>::make(ps, name + ".q", dim, dim, rng);
    m.k = LinearLayerT<S>::make(ps, name + ".k", dim, dim, rng);
    m.v = LinearLayerT<S>::make(ps, name + ".v", dim, dim, rng);
    m.o = LinearLayerT<S>::make(ps, name + ".o", dim, dim, rng);
    m.heads = heads;
    return m;
  }

  // qin: [B, Tq, D], kv: [B, Tk, D]
  TensorT<S> fwd(const TensorT<S>& qin, const TensorT<S>& kv, const AttnMask* mask = nullptr) const {
    auto qp = q.fwd(qin);
    auto kp = k.fwd(kv);
    auto vp = v.fwd(kv);
    return o.fwd(attention(qp, kp, vp, heads, mask));
  }

  // Split form used by rollout paths that cache projected history K/V.
  std::pair<TensorT<S>, TensorT<S>> project_kv(const TensorT<S>& kv) const {
    return {k.fwd(kv), v.fwd(kv)};
  }
  TensorT<S> fwd_cached(const TensorT<S>& qin, const TensorT<S>& kproj, const TensorT<S>& vproj,
                        const AttnMask* mask = nullptr) const {
    return o.fwd(attention(q.fwd(qin), kproj, vproj, heads, mask));
  }
};

template <class S>
struct MlpLayerT {
  LinearLayerT<S> fc1, fc2;

  static MlpLayerT make(ParamStoreT<S>& ps, const std::string& name, int dim, int hidden,
                        Rng& rng) {
    MlpLayerT m;
    m.fc1 = LinearLayerT<S>::make(ps, name + ".fc1", dim, hidden, rng);
    m.fc2 = LinearLayerT<S>::make(ps, name + ".fc2", hidden, dim, rng);
    return m;
  }

  TensorT<S> fwd(const TensorT<S>& x) const { return fc2.fwd(gelu(fc1.fwd(x))); }
};

// Pre-LN encoder block: x + attn(ln(x)), x + mlp(ln(x)).
template <class S>
struct EncoderBlockT {
  LayerNormLayerT<S> ln1, ln2;
  MhaLayerT<S> attn;
  MlpLayerT<S> mlp;

  static EncoderBlockT make(ParamStoreT<S>& ps, const std::string& name, int dim, int heads,
                            int mlp_hidden, Rng& rng) {
    EncoderBlockT b;
    b.ln1 = LayerNormLayerT<S>::make(ps, name + ".ln1", dim);
    b.ln2 = LayerNormLayerT<S>::make(ps, name + ".ln2", dim);
    b.attn = MhaLayerT<S>::make(ps, name + ".attn", dim, heads, rng);
    b.mlp = MlpLayerT<S>::make(ps, name + ".mlp", dim, mlp_hidden, rng);
    return b;
  }

  TensorT<S> fwd(const TensorT<S>& x, const AttnMask* mask = nullptr) const {
    auto xn = ln1.fwd(x);
    auto h = add(x, attn.fwd(xn, xn, mask));
    return add(h, mlp.fwd(ln2.fwd(h)));
  }
};

using LinearLayer = LinearLayerT<float>;
using LayerNormLayer = LayerNormLayerT<float>;
using MhaLayer = MhaLayerT<float>;
using MlpLayer = MlpLayerT<float>;
using EncoderBlock = EncoderBlockT<float>;

// Sinusoidal embedding of a scalar position/timestep into `dim` features.
template <class S>
void sinusoidal_embed(double t, int dim, S* out, double max_period = 10000.0) {
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(max_period) * static_cast<double>(i) / half);
    out[i] = static_cast<S>(std::cos(t * freq));
    out[half + i] = static_cast<S>(std::sin(t * freq));
  }
  for (int i = 2 * half; i < dim; ++i) out[i] = S(0);
}

}  // namespace cwm::nn
