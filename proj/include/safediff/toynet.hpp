#pragma once

#include <cmath>
#include <vector>

#include "safediff/backend.hpp"

namespace safediff {

// ---------------------------------------------------------------------------
// Small conditional denoiser: MLP over z with feature-wise modulation from
// the condition embedding and a sinusoidal timestep embedding. The condition
// trunk is softmax attention over a learned codebook, so any embedding can
// only produce a convex mixture of learned conditioning behaviors; scaling
// an embedding sharpens its attention (prompt weighting) and saturates. The
// null condition is the zero vector (uniform attention).
// ---------------------------------------------------------------------------

struct ToyNetConfig {
  int data_dim = 0;
  int embed_dim = 0;
  int hidden = 96;
  int layers = 3;
  int cond_hidden = 48;
  int cond_slots = 24;
  int time_freqs = 8;

  // The timestep enters the main trunk next to z; the FiLM modulation sees
  // only the condition embedding, so a condition steers the same way at
  // every noise level.
  int main_input_dim() const { return data_dim + 2 * time_freqs; }

  void validate() const {
    if (data_dim < 1 || embed_dim < 1) throw InputError("ToyNetConfig: dims unset");
    if (hidden < 1 || layers < 1 || cond_hidden < 1 || cond_slots < 2 ||
        time_freqs < 1)
      throw InputError("ToyNetConfig: invalid sizes");
  }
};

namespace detail {

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

inline Mat silu(const Mat& m) {
  return m.unaryExpr([](double x) { return silu(x); });
}

inline Mat silu_grad(const Mat& m) {
  return m.unaryExpr([](double x) { return silu_grad(x); });
}

}  // namespace detail

class ToyNet {
 public:
  struct Params {
    std::vector<Mat> w;        // main layers
    std::vector<Vec> b;
    Mat w_out;                 // data_dim x hidden
    Vec b_out;
    Mat cond_keys;             // embed_dim x cond_slots
    Mat cond_values;           // cond_hidden x cond_slots
    Vec b_cond;
    std::vector<Mat> w_scale;  // hidden x cond_hidden, per main layer
    std::vector<Vec> b_scale;
    std::vector<Mat> w_shift;
    std::vector<Vec> b_shift;

    template <typename F>
    void visit(F&& f) {
      for (auto& m : w) f(m);
      for (auto& v : b) f(v);
      f(w_out);
      f(b_out);
      f(cond_keys);
      f(cond_values);
      f(b_cond);
      for (auto& m : w_scale) f(m);
      for (auto& v : b_scale) f(v);
      for (auto& m : w_shift) f(m);
      for (auto& v : b_shift) f(v);
    }

    template <typename F>
    void visit(F&& f) const {
      const_cast<Params*>(this)->visit([&](auto& x) { f(x); });
    }
  };

  struct Trace {
    Mat u, attn, g;
    std::vector<Mat> h_in, a, s, m;
    Mat h_last;
    std::vector<int> ts;
  };

  ToyNet() = default;

  ToyNet(ToyNetConfig cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(init_seed, /*stream=*/7);
    p_.w.resize(cfg_.layers);
    p_.b.resize(cfg_.layers);
    p_.w_scale.resize(cfg_.layers);
    p_.b_scale.resize(cfg_.layers);
    p_.w_shift.resize(cfg_.layers);
    p_.b_shift.resize(cfg_.layers);
    for (int i = 0; i < cfg_.layers; ++i) {
      const int in = i == 0 ? cfg_.main_input_dim() : cfg_.hidden;
      p_.w[i] = rng.normal_mat(cfg_.hidden, in) * std::sqrt(2.0 / in);
      p_.b[i] = Vec::Zero(cfg_.hidden);
      // FiLM heads start at identity modulation (scale 0, shift 0)
      p_.w_scale[i] = Mat::Zero(cfg_.hidden, cfg_.cond_hidden);
      p_.b_scale[i] = Vec::Zero(cfg_.hidden);
      p_.w_shift[i] = Mat::Zero(cfg_.hidden, cfg_.cond_hidden);
      p_.b_shift[i] = Vec::Zero(cfg_.hidden);
    }
    p_.w_out = rng.normal_mat(cfg_.data_dim, cfg_.hidden) *
               (0.1 * std::sqrt(2.0 / cfg_.hidden));
    p_.b_out = Vec::Zero(cfg_.data_dim);
    p_.cond_keys = rng.normal_mat(cfg_.embed_dim, cfg_.cond_slots) *
                   std::sqrt(1.0 / cfg_.embed_dim);
    p_.cond_values = rng.normal_mat(cfg_.cond_hidden, cfg_.cond_slots) *
                     std::sqrt(1.0 / cfg_.cond_slots);
    p_.b_cond = Vec::Zero(cfg_.cond_hidden);
  }

  const ToyNetConfig& config() const { return cfg_; }
  Params& params() { return p_; }
  const Params& params() const { return p_; }

  Vec time_embedding(int t) const {
    Vec e(2 * cfg_.time_freqs);
    for (int i = 0; i < cfg_.time_freqs; ++i) {
      const double freq =
          std::exp(-std::log(10000.0) * i / std::max(1, cfg_.time_freqs - 1));
      const double angle = t * freq;
      e[i] = std::sin(angle);
      e[cfg_.time_freqs + i] = std::cos(angle);
    }
    return e;
  }

  // Batched forward. z: data_dim x B, cond: embed_dim x B (zero columns mean
  // unconditional), ts: one timestep per column.
  Mat forward(const Mat& z, const Mat& cond, const std::vector<int>& ts,
              Trace* trace = nullptr) const {
    const auto B = z.cols();
    if (cond.cols() != B || static_cast<Eigen::Index>(ts.size()) != B)
      throw InputError("ToyNet::forward: batch size mismatch");
    if (z.rows() != cfg_.data_dim || cond.rows() != cfg_.embed_dim)
      throw InputError("ToyNet::forward: input dimension mismatch");

    const Mat& u = cond;
    Mat logits = p_.cond_keys.transpose() * u;
    Mat attn(cfg_.cond_slots, B);
    for (Eigen::Index j = 0; j < B; ++j) {
      const double m = logits.col(j).maxCoeff();
      Vec e = (logits.col(j).array() - m).exp();
      attn.col(j) = e / e.sum();
    }
    Mat g = (p_.cond_values * attn).colwise() + p_.b_cond;

    Mat zin(cfg_.main_input_dim(), B);
    zin.topRows(cfg_.data_dim) = z;
    for (Eigen::Index j = 0; j < B; ++j)
      zin.col(j).tail(2 * cfg_.time_freqs) = time_embedding(ts[j]);

    if (trace) {
      trace->u = u;
      trace->attn = attn;
      trace->g = g;
      trace->ts = ts;
      trace->h_in.resize(cfg_.layers);
      trace->a.resize(cfg_.layers);
      trace->s.resize(cfg_.layers);
      trace->m.resize(cfg_.layers);
    }

    Mat h = zin;
    for (int i = 0; i < cfg_.layers; ++i) {
      Mat a = (p_.w[i] * h).colwise() + p_.b[i];
      Mat s = (p_.w_scale[i] * g).colwise() + p_.b_scale[i];
      Mat shift = (p_.w_shift[i] * g).colwise() + p_.b_shift[i];
      Mat m = a.cwiseProduct(Mat::Ones(a.rows(), a.cols()) + s) + shift;
      if (trace) {
        trace->h_in[i] = h;
        trace->a[i] = a;
        trace->s[i] = s;
        trace->m[i] = m;
      }
      h = detail::silu(m);
    }
    if (trace) trace->h_last = h;
    return (p_.w_out * h).colwise() + p_.b_out;
  }

  // Accumulates parameter gradients into `grads` (shapes must match); when
  // `dcond` is non-null, also returns the gradient w.r.t. the condition
  // columns (embedding rows only).
  void backward(const Trace& trace, const Mat& dout, Params* grads,
                Mat* dcond = nullptr) const {
    grads->w_out.noalias() += dout * trace.h_last.transpose();
    grads->b_out += dout.rowwise().sum();
    Mat dh = p_.w_out.transpose() * dout;

    Mat dg_total = Mat::Zero(cfg_.cond_hidden, dout.cols());
    for (int i = cfg_.layers - 1; i >= 0; --i) {
      const Mat dm = dh.cwiseProduct(detail::silu_grad(trace.m[i]));
      const Mat da = dm.cwiseProduct(
          Mat::Ones(dm.rows(), dm.cols()) + trace.s[i]);
      const Mat ds = dm.cwiseProduct(trace.a[i]);

      grads->w[i].noalias() += da * trace.h_in[i].transpose();
      grads->b[i] += da.rowwise().sum();
      grads->w_scale[i].noalias() += ds * trace.g.transpose();
      grads->b_scale[i] += ds.rowwise().sum();
      grads->w_shift[i].noalias() += dm * trace.g.transpose();
      grads->b_shift[i] += dm.rowwise().sum();
      dg_total.noalias() += p_.w_scale[i].transpose() * ds;
      dg_total.noalias() += p_.w_shift[i].transpose() * dm;

      dh = p_.w[i].transpose() * da;
    }

    grads->cond_values.noalias() += dg_total * trace.attn.transpose();
    grads->b_cond += dg_total.rowwise().sum();
    const Mat dattn = p_.cond_values.transpose() * dg_total;
    Mat dlogits(cfg_.cond_slots, dout.cols());
    for (Eigen::Index j = 0; j < dout.cols(); ++j) {
      const double dot = trace.attn.col(j).dot(dattn.col(j));
      dlogits.col(j) =
          trace.attn.col(j).cwiseProduct(dattn.col(j) - Vec::Constant(cfg_.cond_slots, dot));
    }
    grads->cond_keys.noalias() += trace.u * dlogits.transpose();
    if (dcond) {
      *dcond = p_.cond_keys * dlogits;
    }
  }

  Params zero_grads() const {
    Params g = p_;
    g.visit([](auto& x) { x.setZero(); });
    return g;
  }

  // ---- flat parameter vector (optimizers, digests, serialization) ----

  Eigen::Index param_count() const {
    Eigen::Index n = 0;
    p_.visit([&](const auto& x) { n += x.size(); });
    return n;
  }

  // 1/0 mask (in flatten order) selecting the tunable conditioning pathway:
  // codebook values and the FiLM scale/shift heads. The keys stay frozen
  // (they play the text encoder's role, shared across checkpoints), as does
  // the z trunk, when a fine-tune multiplies its gradients by this mask.
  Vec conditioning_mask() const {
    Params m = p_;
    m.visit([](auto& x) { x.setZero(); });
    auto ones = [](auto& x) { x.setOnes(); };
    ones(m.cond_values);
    ones(m.b_cond);
    for (int i = 0; i < cfg_.layers; ++i) {
      ones(m.w_scale[i]);
      ones(m.b_scale[i]);
      ones(m.w_shift[i]);
      ones(m.b_shift[i]);
    }
    return flatten_params(m);
  }

  Vec flatten() const { return flatten_params(p_); }

  static Vec flatten_params(const Params& p) {
    Eigen::Index n = 0;
    p.visit([&](const auto& x) { n += x.size(); });
    Vec out(n);
    Eigen::Index at = 0;
    p.visit([&](const auto& x) {
      out.segment(at, x.size()) =
          Eigen::Map<const Vec>(x.data(), x.size());
      at += x.size();
    });
    return out;
  }

  void unflatten(const Vec& flat) {
    Eigen::Index at = 0;
    p_.visit([&](auto& x) {
      if (at + x.size() > flat.size())
        throw InputError("ToyNet::unflatten: size mismatch");
      Eigen::Map<Vec>(x.data(), x.size()) = flat.segment(at, x.size());
      at += x.size();
    });
    if (at != flat.size()) throw InputError("ToyNet::unflatten: size mismatch");
  }

 private:
  ToyNetConfig cfg_;
  Params p_;
};

// DenoiserBackend adapter over a frozen ToyNet.
class ToyNetBackend final : public DenoiserBackend {
 public:
  ToyNetBackend(ToyNet net, NoiseSchedule schedule)
      : net_(std::move(net)), schedule_(std::move(schedule)) {}

  const ToyNet& net() const { return net_; }
  ToyNet& net() { return net_; }

  int data_dim() const override { return net_.config().data_dim; }
  int embed_dim() const override { return net_.config().embed_dim; }
  const NoiseSchedule& schedule() const override { return schedule_; }

  Vec predict(const Vec& z, const ConditionEmbedding* c, int t) const override {
    check_inputs(z, c);
    Mat cond = Mat::Zero(embed_dim(), 1);
    if (c) cond.col(0) = c->v;
    return net_.forward(z, cond, {t}).col(0);
  }

  Vec condition_vjp(const Vec& z, const ConditionEmbedding& c, int t,
                    const Vec& cotangent) const override {
    check_inputs(z, &c);
    if (cotangent.size() != data_dim())
      throw InputError("condition_vjp: cotangent dimension mismatch");
    Mat cond(embed_dim(), 1);
    cond.col(0) = c.v;
    ToyNet::Trace trace;
    net_.forward(z, cond, {t}, &trace);
    ToyNet::Params grads = net_.zero_grads();
    Mat dcond;
    net_.backward(trace, cotangent, &grads, &dcond);
    return dcond.col(0);
  }

 private:
  ToyNet net_;
  NoiseSchedule schedule_;
};

// ---------------------------------------------------------------------------
// Adam on a flat parameter vector.
// ---------------------------------------------------------------------------

class Adam {
 public:
  Adam(Eigen::Index n, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps),
        m_(Vec::Zero(n)), v_(Vec::Zero(n)) {}

  void step(Vec& params, const Vec& grad) {
    if (grad.size() != m_.size()) throw InputError("Adam: gradient size mismatch");
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    params -= (lr_ / bc1) * m_.cwiseQuotient(
                  ((v_ / bc2).cwiseSqrt().array() + eps_).matrix());
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  Vec m_, v_;
  long t_ = 0;
};

}  // namespace safediff
