// Reverse-mode autodiff over a flat tape of op records.
//
// A Graph owns one forward pass: ops append nodes in topological order and
// backward() walks them in reverse. Leaves reference tensors owned by the
// caller (parameters, input images); their gradients accumulate additively
// into Tensor::grad across backward() calls, so an explicit zero_grad()
// is required between optimizer steps. Internal node gradients are
// re-zeroed on every backward() call.
//
// Determinism contract: every reduction in forward and backward runs in a
// fixed order. Batch-level loops may be OpenMP-parallel only where each
// output element is produced by exactly one thread with a sequential
// reduction (per-image conv GEMMs, per-channel batchnorm stats, per-image
// kernel-gradient buffers reduced in image order).
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "fvlab/gemm.hpp"
#include "fvlab/tensor.hpp"

namespace fvlab {

enum class Mode { kTrain, kEval };

// Batchnorm running statistics; owned by the model, updated by train-mode
// forward passes with running <- (1-momentum)*running + momentum*batch.
struct BnState {
  Tensor running_mean;
  Tensor running_var;
};

class Graph {
 public:
  // Leaf whose gradient flows back into t.grad. The tensor must outlive the
  // graph and stay unmodified while the graph is alive.
  int leaf(Tensor& t) {
    Node n;
    n.external = &t;
    n.needs_grad = true;
    n.op = "leaf";
    return push(std::move(n));
  }

  // Input that never receives a gradient (frozen weights, batch images).
  int constant(Tensor t) {
    Node n;
    n.owned = std::move(t);
    n.op = "const";
    return push(std::move(n));
  }

  const Tensor& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.external ? *n.external : n.owned;
  }

  // Gradient buffer of a node after backward(); empty if untouched.
  const std::vector<float>& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  std::size_t size() const { return nodes_.size(); }

  int conv2d(int x, int k, int b, int stride, int padding) {
    const Tensor& xv = value(x);
    const Tensor& kv = value(k);
    const Tensor& bv = value(b);
    if (xv.shape.size() != 4) fail("conv2d: input must be [N,Cin,H,W], got ", shape_str(xv.shape));
    if (kv.shape.size() != 4)
      fail("conv2d: kernel must be [Cout,Cin,kh,kw], got ", shape_str(kv.shape));
    const int n = xv.shape[0], cin = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
    const int cout = kv.shape[0], kh = kv.shape[2], kw = kv.shape[3];
    if (kv.shape[1] != cin) fail("conv2d: kernel Cin=", kv.shape[1], " != input Cin=", cin);
    if (bv.shape.size() != 1 || bv.shape[0] != cout)
      fail("conv2d: bias must be [Cout=", cout, "], got ", shape_str(bv.shape));
    if (stride < 1) fail("conv2d: stride must be >= 1, got ", stride);
    if (padding < 0) fail("conv2d: padding must be >= 0, got ", padding);
    if (kh > h + 2 * padding) fail("conv2d: kh=", kh, " > padded H=", h + 2 * padding);
    if (kw > w + 2 * padding) fail("conv2d: kw=", kw, " > padded W=", w + 2 * padding);
    const int ho = (h + 2 * padding - kh) / stride + 1;
    const int wo = (w + 2 * padding - kw) / stride + 1;
    const int kdim = cin * kh * kw;
    const std::int64_t sp = static_cast<std::int64_t>(ho) * wo;

    Tensor out = Tensor::zeros({n, cout, ho, wo});
    {
      const float* xp = xv.data.data();
      const float* kp = kv.data.data();
      const float* bp = bv.data.data();
      float* op = out.data.data();
#pragma omp parallel for schedule(static)
      for (int img = 0; img < n; ++img) {
        std::vector<float> col(static_cast<std::size_t>(kdim) * sp);
        im2col(xp + static_cast<std::int64_t>(img) * cin * h * w, cin, h, w, kh, kw, stride,
               padding, ho, wo, col.data());
        float* dst = op + static_cast<std::int64_t>(img) * cout * sp;
        sgemm(cout, static_cast<int>(sp), kdim, kp, col.data(), dst);
        for (int c = 0; c < cout; ++c) {
          const float bias = bp[c];
          float* row = dst + c * sp;
          for (std::int64_t i = 0; i < sp; ++i) row[i] += bias;
        }
      }
    }

    Node node;
    node.owned = std::move(out);
    node.inputs = {x, k, b};
    node.op = "conv2d";
    node.needs_grad = needs(x) || needs(k) || needs(b);
    const int id = next_id();
    node.backprop = make_conv_backprop(id, x, k, b, n, cin, h, w, cout, kh, kw, stride, padding,
                                       ho, wo, kdim, sp);
    return push(std::move(node));
  }

  int relu(int x) {
    const Tensor& xv = value(x);
    Tensor out = xv;
    out.grad.clear();
    float* p = out.data.data();
    const std::int64_t m = out.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < m; ++i)
      if (p[i] < 0.0f) p[i] = 0.0f;

    Node node;
    node.owned = std::move(out);
    node.inputs = {x};
    node.op = "relu";
    node.needs_grad = needs(x);
    const int id = next_id();
    node.backprop = [this, id, x, m](Graph& g) {
      float* dx = g.grad_buf(x);
      if (!dx) return;
      const float* xp = g.value(x).data.data();
      const float* go = g.nodes_[static_cast<std::size_t>(id)].grad.data();
#pragma omp parallel for schedule(static)
      for (std::int64_t i = 0; i < m; ++i)
        if (xp[i] > 0.0f) dx[i] += go[i];  // subgradient at 0 is 0
    };
    return push(std::move(node));
  }

  int batchnorm2d(int x, int gamma, int beta, BnState* state, Mode mode, float eps,
                  float momentum) {
    const Tensor& xv = value(x);
    if (xv.shape.size() != 4)
      fail("batchnorm2d: input must be [N,C,H,W], got ", shape_str(xv.shape));
    const int n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
    const Tensor& gv = value(gamma);
    const Tensor& bv = value(beta);
    if (gv.shape != std::vector<int>{c}) fail("batchnorm2d: gamma must be [C=", c, "], got ",
                                              shape_str(gv.shape));
    if (bv.shape != std::vector<int>{c})
      fail("batchnorm2d: beta must be [C=", c, "], got ", shape_str(bv.shape));
    const std::int64_t m = static_cast<std::int64_t>(n) * h * w;
    if (mode == Mode::kTrain && m < 2)
      fail("batchnorm2d: train mode needs N*H*W >= 2, got ", m);

    std::vector<float> mean(static_cast<std::size_t>(c)), invstd(static_cast<std::size_t>(c));
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    const float* xp = xv.data.data();
    if (mode == Mode::kTrain) {
#pragma omp parallel for schedule(static)
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int img = 0; img < n; ++img) {
          const float* src = xp + (static_cast<std::int64_t>(img) * c + ch) * plane;
          for (std::int64_t i = 0; i < plane; ++i) acc += src[i];
        }
        const double mu = acc / static_cast<double>(m);
        double sq = 0.0;
        for (int img = 0; img < n; ++img) {
          const float* src = xp + (static_cast<std::int64_t>(img) * c + ch) * plane;
          for (std::int64_t i = 0; i < plane; ++i) {
            const double d = src[i] - mu;
            sq += d * d;
          }
        }
        const double var = sq / static_cast<double>(m);  // biased, used for normalization
        mean[static_cast<std::size_t>(ch)] = static_cast<float>(mu);
        invstd[static_cast<std::size_t>(ch)] =
            static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        if (state) {
          float& rm = state->running_mean.data[static_cast<std::size_t>(ch)];
          float& rv = state->running_var.data[static_cast<std::size_t>(ch)];
          rm = (1.0f - momentum) * rm + momentum * static_cast<float>(mu);
          rv = (1.0f - momentum) * rv + momentum * static_cast<float>(var);
        }
      }
    } else {
      if (!state) fail("batchnorm2d: eval mode requires running statistics");
      for (int ch = 0; ch < c; ++ch) {
        mean[static_cast<std::size_t>(ch)] = state->running_mean.data[static_cast<std::size_t>(ch)];
        invstd[static_cast<std::size_t>(ch)] = static_cast<float>(
            1.0 / std::sqrt(static_cast<double>(state->running_var.data[static_cast<std::size_t>(ch)]) +
                            static_cast<double>(eps)));
      }
    }

    Tensor out = Tensor::zeros(xv.shape);
    {
      float* op = out.data.data();
      const float* gp = gv.data.data();
      const float* bp = bv.data.data();
#pragma omp parallel for schedule(static)
      for (int ch = 0; ch < c; ++ch) {
        const float mu = mean[static_cast<std::size_t>(ch)];
        const float is = invstd[static_cast<std::size_t>(ch)];
        const float ga = gp[ch], be = bp[ch];
        for (int img = 0; img < n; ++img) {
          const std::int64_t off = (static_cast<std::int64_t>(img) * c + ch) * plane;
          for (std::int64_t i = 0; i < plane; ++i)
            op[off + i] = ga * (xp[off + i] - mu) * is + be;
        }
      }
    }

    Node node;
    node.owned = std::move(out);
    node.inputs = {x, gamma, beta};
    node.op = "batchnorm2d";
    node.needs_grad = needs(x) || needs(gamma) || needs(beta);
    const int id = next_id();
    const bool train = mode == Mode::kTrain;
    node.backprop = [this, id, x, gamma, beta, n, c, plane, m, mean, invstd, train](Graph& g) {
      const std::vector<float>& go = g.nodes_[static_cast<std::size_t>(id)].grad;
      const float* xp2 = g.value(x).data.data();
      const float* gp = g.value(gamma).data.data();
      float* dx = g.grad_buf(x);
      float* dg = g.grad_buf(gamma);
      float* db = g.grad_buf(beta);
#pragma omp parallel for schedule(static)
      for (int ch = 0; ch < c; ++ch) {
        const float mu = mean[static_cast<std::size_t>(ch)];
        const float is = invstd[static_cast<std::size_t>(ch)];
        double sum_go = 0.0, sum_go_xhat = 0.0;
        for (int img = 0; img < n; ++img) {
          const std::int64_t off = (static_cast<std::int64_t>(img) * c + ch) * plane;
          for (std::int64_t i = 0; i < plane; ++i) {
            const float xhat = (xp2[off + i] - mu) * is;
            sum_go += go[off + i];
            sum_go_xhat += static_cast<double>(go[off + i]) * xhat;
          }
        }
        if (dg) dg[ch] += static_cast<float>(sum_go_xhat);
        if (db) db[ch] += static_cast<float>(sum_go);
        if (dx) {
          const float ga = gp[ch];
          if (train) {
            const float k1 = static_cast<float>(sum_go / static_cast<double>(m));
            const float k2 = static_cast<float>(sum_go_xhat / static_cast<double>(m));
            for (int img = 0; img < n; ++img) {
              const std::int64_t off = (static_cast<std::int64_t>(img) * c + ch) * plane;
              for (std::int64_t i = 0; i < plane; ++i) {
                const float xhat = (xp2[off + i] - mu) * is;
                dx[off + i] += ga * is * (go[off + i] - k1 - xhat * k2);
              }
            }
          } else {
            for (int img = 0; img < n; ++img) {
              const std::int64_t off = (static_cast<std::int64_t>(img) * c + ch) * plane;
              for (std::int64_t i = 0; i < plane; ++i) dx[off + i] += ga * is * go[off + i];
            }
          }
        }
      }
    };
    return push(std::move(node));
  }

  int linear(int x, int weight, int bias) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(weight);
    const Tensor& bv = value(bias);
    if (xv.shape.size() != 2) fail("linear: input must be [N,F], got ", shape_str(xv.shape));
    if (wv.shape.size() != 2) fail("linear: weight must be [K,F], got ", shape_str(wv.shape));
    const int n = xv.shape[0], f = xv.shape[1], k = wv.shape[0];
    if (wv.shape[1] != f) fail("linear: weight F=", wv.shape[1], " != input F=", f);
    if (bv.shape.size() != 1 || bv.shape[0] != k)
      fail("linear: bias must be [K=", k, "], got ", shape_str(bv.shape));

    Tensor out = Tensor::zeros({n, k});
    sgemm(n, k, f, xv.data.data(), wv.data.data(), out.data.data(), /*trans_b=*/true);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) out.data[static_cast<std::size_t>(i) * k + j] += bv.data[static_cast<std::size_t>(j)];

    Node node;
    node.owned = std::move(out);
    node.inputs = {x, weight, bias};
    node.op = "linear";
    node.needs_grad = needs(x) || needs(weight) || needs(bias);
    const int id = next_id();
    node.backprop = [this, id, x, weight, bias, n, f, k](Graph& g) {
      const std::vector<float>& go = g.nodes_[static_cast<std::size_t>(id)].grad;
      float* dx = g.grad_buf(x);
      float* dw = g.grad_buf(weight);
      float* db = g.grad_buf(bias);
      if (dx)  // dX[N,F] += GO[N,K] * W[K,F]
        sgemm(n, f, k, go.data(), g.value(weight).data.data(), dx, false, true);
      if (dw) {  // dW[K,F] += GO^T[K,N] * X[N,F]; explicit loops keep the order fixed
        const float* xp = g.value(x).data.data();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < k; ++j) {
            const float gv = go[static_cast<std::size_t>(i) * k + j];
            const float* xrow = xp + static_cast<std::int64_t>(i) * f;
            float* wrow = dw + static_cast<std::int64_t>(j) * f;
            for (int t = 0; t < f; ++t) wrow[t] += gv * xrow[t];
          }
      }
      if (db)
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < k; ++j) db[j] += go[static_cast<std::size_t>(i) * k + j];
    };
    return push(std::move(node));
  }

  int global_avg_pool(int x) {
    const Tensor& xv = value(x);
    if (xv.shape.size() != 4)
      fail("global_avg_pool: input must be [N,C,H,W], got ", shape_str(xv.shape));
    const int n = xv.shape[0], c = xv.shape[1];
    const std::int64_t plane = static_cast<std::int64_t>(xv.shape[2]) * xv.shape[3];
    Tensor out = Tensor::zeros({n, c});
    for (int img = 0; img < n; ++img)
      for (int ch = 0; ch < c; ++ch) {
        const float* src = xv.data.data() + (static_cast<std::int64_t>(img) * c + ch) * plane;
        double acc = 0.0;
        for (std::int64_t i = 0; i < plane; ++i) acc += src[i];
        out.data[static_cast<std::size_t>(img) * c + ch] =
            static_cast<float>(acc / static_cast<double>(plane));
      }

    Node node;
    node.owned = std::move(out);
    node.inputs = {x};
    node.op = "global_avg_pool";
    node.needs_grad = needs(x);
    const int id = next_id();
    node.backprop = [this, id, x, n, c, plane](Graph& g) {
      float* dx = g.grad_buf(x);
      if (!dx) return;
      const std::vector<float>& go = g.nodes_[static_cast<std::size_t>(id)].grad;
      const float inv = 1.0f / static_cast<float>(plane);
      for (int img = 0; img < n; ++img)
        for (int ch = 0; ch < c; ++ch) {
          const float gv = go[static_cast<std::size_t>(img) * c + ch] * inv;
          float* dst = dx + (static_cast<std::int64_t>(img) * c + ch) * plane;
          for (std::int64_t i = 0; i < plane; ++i) dst[i] += gv;
        }
    };
    return push(std::move(node));
  }

  int add(int a, int b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (!av.same_shape(bv))
      fail("add: shape mismatch ", shape_str(av.shape), " vs ", shape_str(bv.shape));
    Tensor out = av;
    out.grad.clear();
    const std::int64_t m = out.numel();
    float* p = out.data.data();
    const float* q = bv.data.data();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < m; ++i) p[i] += q[i];

    Node node;
    node.owned = std::move(out);
    node.inputs = {a, b};
    node.op = "add";
    node.needs_grad = needs(a) || needs(b);
    const int id = next_id();
    node.backprop = [this, id, a, b, m](Graph& g) {
      const std::vector<float>& go = g.nodes_[static_cast<std::size_t>(id)].grad;
      for (int in : {a, b}) {
        float* d = g.grad_buf(in);
        if (!d) continue;
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < m; ++i) d[i] += go[i];
      }
    };
    return push(std::move(node));
  }

  // Mean over the batch of -log softmax(logits)[label], max-stabilised.
  int softmax_cross_entropy(int logits, const std::vector<int>& labels) {
    const Tensor& lv = value(logits);
    if (lv.shape.size() != 2)
      fail("softmax_cross_entropy: logits must be [N,K], got ", shape_str(lv.shape));
    const int n = lv.shape[0], k = lv.shape[1];
    if (static_cast<int>(labels.size()) != n)
      fail("softmax_cross_entropy: ", labels.size(), " labels for batch N=", n);
    for (int i = 0; i < n; ++i)
      if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= k)
        fail("softmax_cross_entropy: label ", labels[static_cast<std::size_t>(i)], " at row ", i,
             " outside [0,", k, ")");

    std::vector<float> probs(static_cast<std::size_t>(n) * k);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
      const float* row = lv.data.data() + static_cast<std::int64_t>(i) * k;
      float mx = row[0];
      for (int j = 1; j < k; ++j) mx = row[j] > mx ? row[j] : mx;
      double z = 0.0;
      for (int j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
      const double logz = std::log(z);
      for (int j = 0; j < k; ++j)
        probs[static_cast<std::size_t>(i) * k + j] =
            static_cast<float>(std::exp(static_cast<double>(row[j] - mx) - logz));
      loss -= static_cast<double>(row[labels[static_cast<std::size_t>(i)]] - mx) - logz;
    }
    loss /= static_cast<double>(n);

    Node node;
    node.owned = Tensor::from({1}, {static_cast<float>(loss)});
    node.inputs = {logits};
    node.op = "softmax_cross_entropy";
    node.needs_grad = needs(logits);
    const int id = next_id();
    node.backprop = [this, id, logits, labels, probs, n, k](Graph& g) {
      float* dl = g.grad_buf(logits);
      if (!dl) return;
      const float go = g.nodes_[static_cast<std::size_t>(id)].grad[0];
      const float invn = 1.0f / static_cast<float>(n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) {
          float v = probs[static_cast<std::size_t>(i) * k + j];
          if (j == labels[static_cast<std::size_t>(i)]) v -= 1.0f;
          dl[static_cast<std::size_t>(i) * k + j] += go * v * invn;
        }
    };
    return push(std::move(node));
  }

  // Scalar view of one logit, for activation-maximization objectives.
  int pick(int x, int row, int col) {
    const Tensor& xv = value(x);
    if (xv.shape.size() != 2) fail("pick: input must be [N,K], got ", shape_str(xv.shape));
    if (row < 0 || row >= xv.shape[0]) fail("pick: row ", row, " out of range N=", xv.shape[0]);
    if (col < 0 || col >= xv.shape[1]) fail("pick: col ", col, " out of range K=", xv.shape[1]);
    const int k = xv.shape[1];
    Node node;
    node.owned = Tensor::from({1}, {xv.data[static_cast<std::size_t>(row) * k + col]});
    node.inputs = {x};
    node.op = "pick";
    node.needs_grad = needs(x);
    const int id = next_id();
    node.backprop = [this, id, x, row, col, k](Graph& g) {
      float* dx = g.grad_buf(x);
      if (dx)
        dx[static_cast<std::size_t>(row) * k + col] += g.nodes_[static_cast<std::size_t>(id)].grad[0];
    };
    return push(std::move(node));
  }

  int sum(int x) {
    const Tensor& xv = value(x);
    double acc = 0.0;
    for (float v : xv.data) acc += v;
    Node node;
    node.owned = Tensor::from({1}, {static_cast<float>(acc)});
    node.inputs = {x};
    node.op = "sum";
    node.needs_grad = needs(x);
    const int id = next_id();
    const std::int64_t m = xv.numel();
    node.backprop = [this, id, x, m](Graph& g) {
      float* dx = g.grad_buf(x);
      if (!dx) return;
      const float go = g.nodes_[static_cast<std::size_t>(id)].grad[0];
      for (std::int64_t i = 0; i < m; ++i) dx[i] += go;
    };
    return push(std::move(node));
  }

  // Dot product with fixed coefficients: sum_i w_i * x_i. The workhorse
  // scalarization for gradient checks and linear objectives.
  int weighted_sum(int x, std::vector<float> weights) {
    const Tensor& xv = value(x);
    if (static_cast<std::int64_t>(weights.size()) != xv.numel())
      fail("weighted_sum: ", weights.size(), " weights for ", xv.numel(), " elements");
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i)
      acc += static_cast<double>(weights[i]) * xv.data[i];
    Node node;
    node.owned = Tensor::from({1}, {static_cast<float>(acc)});
    node.inputs = {x};
    node.op = "weighted_sum";
    node.needs_grad = needs(x);
    const int id = next_id();
    node.backprop = [this, id, x, w = std::move(weights)](Graph& g) {
      float* dx = g.grad_buf(x);
      if (!dx) return;
      const float go = g.nodes_[static_cast<std::size_t>(id)].grad[0];
      for (std::size_t i = 0; i < w.size(); ++i) dx[i] += w[i] * go;
    };
    return push(std::move(node));
  }

  int sum_squares(int x) {
    const Tensor& xv = value(x);
    double acc = 0.0;
    for (float v : xv.data) acc += static_cast<double>(v) * v;
    Node node;
    node.owned = Tensor::from({1}, {static_cast<float>(acc)});
    node.inputs = {x};
    node.op = "sum_squares";
    node.needs_grad = needs(x);
    const int id = next_id();
    const std::int64_t m = xv.numel();
    node.backprop = [this, id, x, m](Graph& g) {
      float* dx = g.grad_buf(x);
      if (!dx) return;
      const float go = g.nodes_[static_cast<std::size_t>(id)].grad[0];
      const float* xp = g.value(x).data.data();
      for (std::int64_t i = 0; i < m; ++i) dx[i] += 2.0f * xp[i] * go;
    };
    return push(std::move(node));
  }

  // Anisotropic total variation: sum of |horizontal diff| + |vertical diff|
  // over all channels. Subgradient at zero differences is 0.
  int tv_penalty(int x) {
    const Tensor& xv = value(x);
    if (xv.shape.size() != 4)
      fail("tv_penalty: input must be [N,C,H,W], got ", shape_str(xv.shape));
    const int n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3];
    const float* xp = xv.data.data();
    double acc = 0.0;
    for (int img = 0; img < n; ++img)
      for (int ch = 0; ch < c; ++ch) {
        const float* pl = xp + (static_cast<std::int64_t>(img) * c + ch) * h * w;
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            if (i + 1 < h) acc += std::fabs(pl[(i + 1) * w + j] - pl[i * w + j]);
            if (j + 1 < w) acc += std::fabs(pl[i * w + j + 1] - pl[i * w + j]);
          }
      }

    Node node;
    node.owned = Tensor::from({1}, {static_cast<float>(acc)});
    node.inputs = {x};
    node.op = "tv_penalty";
    node.needs_grad = needs(x);
    const int id = next_id();
    node.backprop = [this, id, x, n, c, h, w](Graph& g) {
      float* dx = g.grad_buf(x);
      if (!dx) return;
      const float go = g.nodes_[static_cast<std::size_t>(id)].grad[0];
      const float* xp2 = g.value(x).data.data();
      for (int img = 0; img < n; ++img)
        for (int ch = 0; ch < c; ++ch) {
          const std::int64_t off = (static_cast<std::int64_t>(img) * c + ch) * h * w;
          const float* pl = xp2 + off;
          float* dl = dx + off;
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
              if (i + 1 < h) {
                const float d = pl[(i + 1) * w + j] - pl[i * w + j];
                const float s = d > 0.0f ? go : (d < 0.0f ? -go : 0.0f);
                dl[(i + 1) * w + j] += s;
                dl[i * w + j] -= s;
              }
              if (j + 1 < w) {
                const float d = pl[i * w + j + 1] - pl[i * w + j];
                const float s = d > 0.0f ? go : (d < 0.0f ? -go : 0.0f);
                dl[i * w + j + 1] += s;
                dl[i * w + j] -= s;
              }
            }
        }
    };
    return push(std::move(node));
  }

  // Weighted sum of scalar nodes: sum_i coeff_i * value(node_i).
  int combine_scalars(const std::vector<std::pair<float, int>>& terms) {
    double acc = 0.0;
    bool any_grad = false;
    for (const auto& [w, nid] : terms) {
      const Tensor& v = value(nid);
      if (v.numel() != 1) fail("combine_scalars: node ", nid, " is not scalar, shape ",
                               shape_str(v.shape));
      acc += static_cast<double>(w) * v.data[0];
      any_grad = any_grad || needs(nid);
    }
    Node node;
    node.owned = Tensor::from({1}, {static_cast<float>(acc)});
    for (const auto& t : terms) node.inputs.push_back(t.second);
    node.op = "combine_scalars";
    node.needs_grad = any_grad;
    const int id = next_id();
    node.backprop = [this, id, terms](Graph& g) {
      const float go = g.nodes_[static_cast<std::size_t>(id)].grad[0];
      for (const auto& [w, nid] : terms) {
        float* d = g.grad_buf(nid);
        if (d) d[0] += w * go;
      }
    };
    return push(std::move(node));
  }

  // Reverse-mode accumulation from a scalar loss. Leaf tensors receive
  // their contributions additively; internal buffers are fresh per call.
  void backward(int loss) {
    const Tensor& lv = value(loss);
    if (lv.numel() != 1) fail("backward: loss must be scalar, got shape ", shape_str(lv.shape));

    std::vector<char> reachable(nodes_.size(), 0);
    reachable[static_cast<std::size_t>(loss)] = 1;
    for (int i = loss; i >= 0; --i) {
      if (!reachable[static_cast<std::size_t>(i)]) continue;
      for (int in : nodes_[static_cast<std::size_t>(i)].inputs)
        reachable[static_cast<std::size_t>(in)] = 1;
    }
    live_.assign(nodes_.size(), 0);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (!reachable[i] || !n.needs_grad) continue;
      live_[i] = 1;
      n.grad.assign(static_cast<std::size_t>(value(static_cast<int>(i)).numel()), 0.0f);
    }
    if (!live_[static_cast<std::size_t>(loss)]) return;  // loss depends on no leaf
    nodes_[static_cast<std::size_t>(loss)].grad[0] = 1.0f;

    for (int i = loss; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!live_[static_cast<std::size_t>(i)] || !n.backprop) continue;
      n.backprop(*this);
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (!live_[i] || !n.external) continue;
      n.external->ensure_grad();
      float* dst = n.external->grad.data();
      const float* src = n.grad.data();
      const std::size_t m = n.grad.size();
      for (std::size_t j = 0; j < m; ++j) dst[j] += src[j];
    }
  }

 private:
  struct Node {
    Tensor owned;
    Tensor* external = nullptr;
    std::vector<float> grad;
    std::vector<int> inputs;
    bool needs_grad = false;
    const char* op = "";
    std::function<void(Graph&)> backprop;
  };

  bool needs(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  // Gradient buffer of a node if it participates in the current backward
  // pass, else nullptr (the producer skips that branch entirely).
  float* grad_buf(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || live_.empty() || !live_[static_cast<std::size_t>(id)]) return nullptr;
    return n.grad.data();
  }

  int next_id() const { return static_cast<int>(nodes_.size()); }

  int push(Node&& n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::function<void(Graph&)> make_conv_backprop(int id, int x, int k, int b, int n, int cin,
                                                 int h, int w, int cout, int kh, int kw,
                                                 int stride, int padding, int ho, int wo,
                                                 int kdim, std::int64_t sp) {
    return [=](Graph& g) {
      const std::vector<float>& go = g.nodes_[static_cast<std::size_t>(id)].grad;
      float* dxp = g.grad_buf(x);
      float* dkp = g.grad_buf(k);
      float* dbp = g.grad_buf(b);
      const float* xp = g.value(x).data.data();
      const float* kp = g.value(k).data.data();
      // Per-image kernel-gradient buffers, reduced in image order afterwards:
      // deterministic for any thread count.
      std::vector<float> dk_img;
      if (dkp) dk_img.assign(static_cast<std::size_t>(n) * cout * kdim, 0.0f);
#pragma omp parallel for schedule(static)
      for (int img = 0; img < n; ++img) {
        const float* go_img = go.data() + static_cast<std::int64_t>(img) * cout * sp;
        std::vector<float> col(static_cast<std::size_t>(kdim) * sp);
        if (dxp || dkp)
          im2col(xp + static_cast<std::int64_t>(img) * cin * h * w, cin, h, w, kh, kw, stride,
                 padding, ho, wo, col.data());
        if (dkp)  // dW_img[Cout,kdim] = GO_img[Cout,sp] * col^T[sp,kdim]
          sgemm(cout, kdim, static_cast<int>(sp), go_img, col.data(),
                dk_img.data() + static_cast<std::int64_t>(img) * cout * kdim, /*trans_b=*/true);
        if (dxp) {  // dcol[kdim,sp] = W^T[kdim,Cout] * GO_img; reuse col as dcol
          std::vector<float> dcol(static_cast<std::size_t>(kdim) * sp);
          // W is [Cout,kdim] row-major; W^T product via A=GO^T is awkward, so
          // compute dcol row-block-wise: dcol = W^T * GO.
          sgemm_at(kdim, static_cast<int>(sp), cout, kp, go_img, dcol.data());
          col2im(dcol.data(), cin, h, w, kh, kw, stride, padding, ho, wo,
                 dxp + static_cast<std::int64_t>(img) * cin * h * w);
        }
      }
      if (dkp) {
        const std::int64_t sz = static_cast<std::int64_t>(cout) * kdim;
        for (int img = 0; img < n; ++img) {
          const float* src = dk_img.data() + static_cast<std::int64_t>(img) * sz;
          for (std::int64_t i = 0; i < sz; ++i) dkp[i] += src[i];
        }
      }
      if (dbp) {
        for (int img = 0; img < n; ++img)
          for (int c = 0; c < cout; ++c) {
            const float* row = go.data() + (static_cast<std::int64_t>(img) * cout + c) * sp;
            double acc = 0.0;
            for (std::int64_t i = 0; i < sp; ++i) acc += row[i];
            dbp[c] += static_cast<float>(acc);
          }
      }
    };
  }

  // C[M,N] = A^T * B where A is [K,M] row-major, B is [K,N] row-major.
  static void sgemm_at(int m, int n, int k, const float* a, const float* b, float* c) {
#ifdef FVLAB_USE_OPENBLAS
    blas_single_thread_once();
    cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, m, n, k, 1.0f, a, m, b, n, 0.0f, c, n);
#else
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(m) * n; ++i) c[i] = 0.0f;
    for (int kk = 0; kk < k; ++kk) {
      const float* arow = a + static_cast<std::int64_t>(kk) * m;
      const float* brow = b + static_cast<std::int64_t>(kk) * n;
      for (int i = 0; i < m; ++i) {
        const float av = arow[i];
        float* crow = c + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
#endif
  }

  std::vector<Node> nodes_;
  std::vector<char> live_;
};

}  // namespace fvlab
