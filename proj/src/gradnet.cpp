#include "fusenet/gradnet.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <unordered_set>

namespace fusenet::gradnet {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(d) + "," + std::to_string(h) +
         "," + std::to_string(w) + ")";
}

namespace {

using std::int64_t;

// Valid output range along one axis for i = o*stride + k_off - pad in [0, in).
struct AxisRange {
  int lo, hi;  // inclusive; empty when lo > hi
};

AxisRange valid_range(int in, int out, int stride, int k_off, int pad) {
  const int a = pad - k_off;  // need o*stride >= a
  int lo = a <= 0 ? 0 : (a + stride - 1) / stride;
  const int b = in - 1 + pad - k_off;  // need o*stride <= b
  int hi = b < 0 ? -1 : b / stride;
  if (hi > out - 1) hi = out - 1;
  return {lo, hi};
}

template <typename T>
std::shared_ptr<detail::TensorNode<T>> make_node(Shape s) {
  auto n = std::make_shared<detail::TensorNode<T>>();
  n->shape = s;
  n->values.assign(s.numel(), T(0));
  return n;
}

template <typename T>
void accumulate(std::vector<T>& dst, const std::vector<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape s, bool requires_grad) {
  auto n = make_node<T>(s);
  n->requires_grad = requires_grad;
  return wrap(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape s, T value, bool requires_grad) {
  auto n = make_node<T>(s);
  std::fill(n->values.begin(), n->values.end(), value);
  n->requires_grad = requires_grad;
  return wrap(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::from_values(Shape s, std::vector<T> values, bool requires_grad) {
  if (values.size() != s.numel()) raise(Errc::ShapeMismatch, "from_values: " + s.str() + " vs value count");
  auto n = std::make_shared<detail::TensorNode<T>>();
  n->shape = s;
  n->values = std::move(values);
  n->requires_grad = requires_grad;
  return wrap(std::move(n));
}

template <typename T>
void Tensor<T>::backward() const {
  auto root = node_;
  if (!root) raise(Errc::ShapeMismatch, "backward: undefined tensor");
  if (root->values.size() != 1) raise(Errc::ShapeMismatch, "backward: root must be scalar");
  if (!root->requires_grad) return;

  // Post-order DFS over grad-requiring ancestry; visitation order is fixed by
  // the graph construction order, so the whole sweep is deterministic.
  std::vector<detail::TensorNode<T>*> order;
  std::unordered_set<detail::TensorNode<T>*> seen;
  struct Frame {
    detail::TensorNode<T>* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      detail::TensorNode<T>* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorNode<T>* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// conv3d

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int padding) {
  const Shape xs = x.shape(), ws = weight.shape(), bs = bias.shape();
  if (ws.d != ws.h || ws.h != ws.w) raise(Errc::ShapeMismatch, "conv3d: kernel must be cubic, got " + ws.str());
  const int k = ws.d;
  if (xs.c != ws.c) raise(Errc::ShapeMismatch, "conv3d: input channels " + xs.str() + " vs weight " + ws.str());
  if (bs.n != ws.n || bs.numel() != static_cast<std::size_t>(ws.n))
    raise(Errc::ShapeMismatch, "conv3d: bias " + bs.str() + " vs weight " + ws.str());
  if (stride != 1 && stride != 2) raise(Errc::ShapeMismatch, "conv3d: stride must be 1 or 2");
  if (padding < 0) raise(Errc::ShapeMismatch, "conv3d: negative padding");

  const int N = xs.n, Ci = xs.c, D = xs.d, H = xs.h, W = xs.w, Co = ws.n;
  const int Do = (D + 2 * padding - k) / stride + 1;
  const int Ho = (H + 2 * padding - k) / stride + 1;
  const int Wo = (W + 2 * padding - k) / stride + 1;
  if (Do < 1 || Ho < 1 || Wo < 1) raise(Errc::ShapeMismatch, "conv3d: kernel larger than padded input");

  const Shape os{N, Co, Do, Ho, Wo};
  auto out = make_node<T>(os);

  const T* xv = x.values().data();
  const T* wv = weight.values().data();
  const T* bv = bias.values().data();
  T* ov = out->values.data();

  const std::size_t x_slab = static_cast<std::size_t>(D) * H * W;
  const std::size_t o_slab = static_cast<std::size_t>(Do) * Ho * Wo;

  std::vector<AxisRange> rd(k), rh(k), rw(k);
  for (int kk = 0; kk < k; ++kk) {
    rd[kk] = valid_range(D, Do, stride, kk, padding);
    rh[kk] = valid_range(H, Ho, stride, kk, padding);
    rw[kk] = valid_range(W, Wo, stride, kk, padding);
  }

#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < static_cast<int64_t>(N) * Co; ++nc) {
    const int n = static_cast<int>(nc / Co);
    const int co = static_cast<int>(nc % Co);
    T* oslab = ov + (static_cast<std::size_t>(n) * Co + co) * o_slab;
    std::fill(oslab, oslab + o_slab, bv[co]);
    for (int ci = 0; ci < Ci; ++ci) {
      const T* xslab = xv + (static_cast<std::size_t>(n) * Ci + ci) * x_slab;
      const T* wslab = wv + ((static_cast<std::size_t>(co) * Ci + ci) * k) * k * k;
      for (int kz = 0; kz < k; ++kz)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const T wgt = wslab[(kz * k + ky) * k + kx];
            for (int od = rd[kz].lo; od <= rd[kz].hi; ++od) {
              const int id = od * stride + kz - padding;
              for (int oh = rh[ky].lo; oh <= rh[ky].hi; ++oh) {
                const int ih = oh * stride + ky - padding;
                const T* xrow = xslab + (static_cast<std::size_t>(id) * H + ih) * W + kx - padding;
                T* orow = oslab + (static_cast<std::size_t>(od) * Ho + oh) * Wo;
                if (stride == 1) {
                  for (int ow = rw[kx].lo; ow <= rw[kx].hi; ++ow) orow[ow] += wgt * xrow[ow];
                } else {
                  for (int ow = rw[kx].lo; ow <= rw[kx].hi; ++ow) orow[ow] += wgt * xrow[2 * ow];
                }
              }
            }
          }
    }
  }

  const bool needs_grad = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
  out->requires_grad = needs_grad;
  if (needs_grad) {
    auto xn = x.node(), wn = weight.node(), bn = bias.node();
    out->parents = {xn, wn, bn};
    const int s = stride, p = padding;
    out->backprop = [xn, wn, bn, s, p, k, N, Ci, Co, D, H, W, Do, Ho, Wo, rd, rh, rw](detail::TensorNode<T>& o) {
      const T* gv = o.grad.data();
      const std::size_t x_slab2 = static_cast<std::size_t>(D) * H * W;
      const std::size_t o_slab2 = static_cast<std::size_t>(Do) * Ho * Wo;
      if (xn->requires_grad) {
        xn->ensure_grad();
        T* gx = xn->grad.data();
        const T* wv2 = wn->values.data();
#pragma omp parallel for schedule(static)
        for (int64_t nc = 0; nc < static_cast<int64_t>(N) * Ci; ++nc) {
          const int n = static_cast<int>(nc / Ci);
          const int ci = static_cast<int>(nc % Ci);
          T* gxs = gx + (static_cast<std::size_t>(n) * Ci + ci) * x_slab2;
          for (int co = 0; co < Co; ++co) {
            const T* gos = gv + (static_cast<std::size_t>(n) * Co + co) * o_slab2;
            const T* wslab = wv2 + ((static_cast<std::size_t>(co) * Ci + ci) * k) * k * k;
            for (int kz = 0; kz < k; ++kz)
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  const T wgt = wslab[(kz * k + ky) * k + kx];
                  for (int od = rd[kz].lo; od <= rd[kz].hi; ++od) {
                    const int id = od * s + kz - p;
                    for (int oh = rh[ky].lo; oh <= rh[ky].hi; ++oh) {
                      const int ih = oh * s + ky - p;
                      T* gxrow = gxs + (static_cast<std::size_t>(id) * H + ih) * W + kx - p;
                      const T* gorow = gos + (static_cast<std::size_t>(od) * Ho + oh) * Wo;
                      if (s == 1) {
                        for (int ow = rw[kx].lo; ow <= rw[kx].hi; ++ow) gxrow[ow] += wgt * gorow[ow];
                      } else {
                        for (int ow = rw[kx].lo; ow <= rw[kx].hi; ++ow) gxrow[2 * ow] += wgt * gorow[ow];
                      }
                    }
                  }
                }
          }
        }
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        T* gw = wn->grad.data();
        const T* xv2 = xn->values.data();
#pragma omp parallel for schedule(static)
        for (int64_t co = 0; co < Co; ++co) {
          for (int ci = 0; ci < Ci; ++ci)
            for (int kz = 0; kz < k; ++kz)
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  T acc = T(0);
                  for (int n = 0; n < N; ++n) {
                    const T* xslab = xv2 + (static_cast<std::size_t>(n) * Ci + ci) * x_slab2;
                    const T* gos = gv + (static_cast<std::size_t>(n) * Co + co) * o_slab2;
                    for (int od = rd[kz].lo; od <= rd[kz].hi; ++od) {
                      const int id = od * s + kz - p;
                      for (int oh = rh[ky].lo; oh <= rh[ky].hi; ++oh) {
                        const int ih = oh * s + ky - p;
                        const T* xrow = xslab + (static_cast<std::size_t>(id) * H + ih) * W + kx - p;
                        const T* gorow = gos + (static_cast<std::size_t>(od) * Ho + oh) * Wo;
                        if (s == 1) {
                          for (int ow = rw[kx].lo; ow <= rw[kx].hi; ++ow) acc += xrow[ow] * gorow[ow];
                        } else {
                          for (int ow = rw[kx].lo; ow <= rw[kx].hi; ++ow) acc += xrow[2 * ow] * gorow[ow];
                        }
                      }
                    }
                  }
                  gw[(((static_cast<std::size_t>(co) * Ci + ci) * k + kz) * k + ky) * k + kx] += acc;
                }
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        T* gb = bn->grad.data();
#pragma omp parallel for schedule(static)
        for (int64_t co = 0; co < Co; ++co) {
          T acc = T(0);
          for (int n = 0; n < N; ++n) {
            const T* gos = gv + (static_cast<std::size_t>(n) * Co + co) * o_slab2;
            for (std::size_t i = 0; i < o_slab2; ++i) acc += gos[i];
          }
          gb[co] += acc;
        }
      }
    };
  }
  return Tensor<T>::wrap(std::move(out));
}

template <typename T>
Tensor<T> conv1x1x1(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const Shape ws = weight.shape();
  if (ws.d != 1 || ws.h != 1 || ws.w != 1) raise(Errc::ShapeMismatch, "conv1x1x1: kernel must be 1, got " + ws.str());
  return conv3d(x, weight, bias, 1, 0);
}

// ---------------------------------------------------------------------------
// relu

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto out = make_node<T>(x.shape());
  const T* xv = x.values().data();
  T* ov = out->values.data();
  const std::size_t n = x.values().size();
  for (std::size_t i = 0; i < n; ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (x.requires_grad()) {
    auto xn = x.node();
    out->requires_grad = true;
    out->parents = {xn};
    out->backprop = [xn](detail::TensorNode<T>& o) {
      xn->ensure_grad();
      const T* xv2 = xn->values.data();
      const T* g = o.grad.data();
      T* gx = xn->grad.data();
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        if (xv2[i] > T(0)) gx[i] += g[i];
    };
  }
  return Tensor<T>::wrap(std::move(out));
}

// ---------------------------------------------------------------------------
// batch_norm

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift, BatchNormState<T>& stats,
                     bool training, T eps, T momentum) {
  const Shape xs = x.shape();
  const int C = xs.c;
  if (scale.shape().numel() != static_cast<std::size_t>(C) || shift.shape().numel() != static_cast<std::size_t>(C))
    raise(Errc::ShapeMismatch, "batch_norm: scale/shift must have one entry per channel");
  if (static_cast<int>(stats.running_mean.size()) != C || static_cast<int>(stats.running_var.size()) != C)
    raise(Errc::ShapeMismatch, "batch_norm: running stats sized for a different channel count");
  const std::size_t spatial = xs.spatial();
  const std::size_t M = static_cast<std::size_t>(xs.n) * spatial;
  if (training && M < 2) raise(Errc::ShapeMismatch, "batch_norm: train mode needs N*D*H*W >= 2 per channel");

  std::vector<T> mean(C), invstd(C);
  const T* xv = x.values().data();
  if (training) {
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c) {
      T sum = T(0);
      for (int n = 0; n < xs.n; ++n) {
        const T* p = xv + (static_cast<std::size_t>(n) * C + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) sum += p[i];
      }
      const T mu = sum / static_cast<T>(M);
      T ss = T(0);
      for (int n = 0; n < xs.n; ++n) {
        const T* p = xv + (static_cast<std::size_t>(n) * C + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) {
          const T d = p[i] - mu;
          ss += d * d;
        }
      }
      const T var = ss / static_cast<T>(M);
      mean[c] = mu;
      invstd[c] = T(1) / std::sqrt(var + eps);
      stats.running_mean[c] = momentum * stats.running_mean[c] + (T(1) - momentum) * mu;
      stats.running_var[c] = momentum * stats.running_var[c] + (T(1) - momentum) * var;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = stats.running_mean[c];
      invstd[c] = T(1) / std::sqrt(stats.running_var[c] + eps);
    }
  }

  auto out = make_node<T>(xs);
  T* ov = out->values.data();
  const T* sv = scale.values().data();
  const T* bv = shift.values().data();
#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < static_cast<int64_t>(xs.n) * C; ++nc) {
    const int c = static_cast<int>(nc % C);
    const T* p = xv + nc * spatial;
    T* q = ov + nc * spatial;
    const T a = sv[c] * invstd[c];
    const T b = bv[c] - a * mean[c];
    for (std::size_t i = 0; i < spatial; ++i) q[i] = a * p[i] + b;
  }

  const bool needs_grad = x.requires_grad() || scale.requires_grad() || shift.requires_grad();
  out->requires_grad = needs_grad;
  if (needs_grad) {
    auto xn = x.node(), sn = scale.node(), bn = shift.node();
    out->parents = {xn, sn, bn};
    const Shape xs2 = xs;
    out->backprop = [xn, sn, bn, mean, invstd, xs2, training, spatial, M](detail::TensorNode<T>& o) {
      const int C2 = xs2.c;
      const T* g = o.grad.data();
      const T* xv2 = xn->values.data();
      const T* sv2 = sn->values.data();
      std::vector<T> sum_g(C2, T(0)), sum_gx(C2, T(0));
#pragma omp parallel for schedule(static)
      for (int64_t c = 0; c < C2; ++c) {
        T sg = T(0), sgx = T(0);
        for (int n = 0; n < xs2.n; ++n) {
          const std::size_t off = (static_cast<std::size_t>(n) * C2 + c) * spatial;
          for (std::size_t i = 0; i < spatial; ++i) {
            sg += g[off + i];
            sgx += g[off + i] * (xv2[off + i] - mean[c]) * invstd[c];
          }
        }
        sum_g[c] = sg;
        sum_gx[c] = sgx;
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
        for (int c = 0; c < C2; ++c) sn->grad[c] += sum_gx[c];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int c = 0; c < C2; ++c) bn->grad[c] += sum_g[c];
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        T* gx = xn->grad.data();
#pragma omp parallel for schedule(static)
        for (int64_t nc = 0; nc < static_cast<int64_t>(xs2.n) * C2; ++nc) {
          const int c = static_cast<int>(nc % C2);
          const std::size_t off = nc * spatial;
          const T a = sv2[c] * invstd[c];
          if (training) {
            const T mg = sum_g[c] / static_cast<T>(M);
            const T mgx = sum_gx[c] / static_cast<T>(M);
            for (std::size_t i = 0; i < spatial; ++i) {
              const T xhat = (xv2[off + i] - mean[c]) * invstd[c];
              gx[off + i] += a * (g[off + i] - mg - xhat * mgx);
            }
          } else {
            for (std::size_t i = 0; i < spatial; ++i) gx[off + i] += a * g[off + i];
          }
        }
      }
    };
  }
  return Tensor<T>::wrap(std::move(out));
}

// ---------------------------------------------------------------------------
// global_avg_pool

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape xs = x.shape();
  const std::size_t spatial = xs.spatial();
  auto out = make_node<T>(Shape{xs.n, xs.c, 1, 1, 1});
  const T* xv = x.values().data();
  T* ov = out->values.data();
  for (int64_t nc = 0; nc < static_cast<int64_t>(xs.n) * xs.c; ++nc) {
    T sum = T(0);
    const T* p = xv + nc * spatial;
    for (std::size_t i = 0; i < spatial; ++i) sum += p[i];
    ov[nc] = sum / static_cast<T>(spatial);
  }
  if (x.requires_grad()) {
    auto xn = x.node();
    out->requires_grad = true;
    out->parents = {xn};
    out->backprop = [xn, spatial](detail::TensorNode<T>& o) {
      xn->ensure_grad();
      T* gx = xn->grad.data();
      for (std::size_t nc = 0; nc < o.grad.size(); ++nc) {
        const T g = o.grad[nc] / static_cast<T>(spatial);
        T* p = gx + nc * spatial;
        for (std::size_t i = 0; i < spatial; ++i) p[i] += g;
      }
    };
  }
  return Tensor<T>::wrap(std::move(out));
}

// ---------------------------------------------------------------------------
// fully_connected

template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const Shape xs = x.shape(), ws = weight.shape();
  const std::size_t in_features = static_cast<std::size_t>(xs.c) * xs.spatial();
  if (static_cast<std::size_t>(ws.c) != in_features)
    raise(Errc::ShapeMismatch, "fully_connected: weight " + ws.str() + " vs input features " +
                                   std::to_string(in_features));
  const int out_features = ws.n;
  if (bias.shape().numel() != static_cast<std::size_t>(out_features))
    raise(Errc::ShapeMismatch, "fully_connected: bias size mismatch");

  auto out = make_node<T>(Shape{xs.n, out_features, 1, 1, 1});
  const T* xv = x.values().data();
  const T* wv = weight.values().data();
  const T* bv = bias.values().data();
  T* ov = out->values.data();
  for (int n = 0; n < xs.n; ++n) {
    const T* xr = xv + n * in_features;
    for (int o = 0; o < out_features; ++o) {
      const T* wr = wv + static_cast<std::size_t>(o) * in_features;
      T acc = bv[o];
      for (std::size_t i = 0; i < in_features; ++i) acc += wr[i] * xr[i];
      ov[static_cast<std::size_t>(n) * out_features + o] = acc;
    }
  }

  const bool needs_grad = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
  out->requires_grad = needs_grad;
  if (needs_grad) {
    auto xn = x.node(), wn = weight.node(), bn = bias.node();
    out->parents = {xn, wn, bn};
    const int N = xs.n;
    out->backprop = [xn, wn, bn, N, out_features, in_features](detail::TensorNode<T>& o) {
      const T* g = o.grad.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        T* gx = xn->grad.data();
        const T* wv2 = wn->values.data();
        for (int n = 0; n < N; ++n)
          for (int of = 0; of < out_features; ++of) {
            const T gv = g[static_cast<std::size_t>(n) * out_features + of];
            const T* wr = wv2 + static_cast<std::size_t>(of) * in_features;
            T* gr = gx + static_cast<std::size_t>(n) * in_features;
            for (std::size_t i = 0; i < in_features; ++i) gr[i] += gv * wr[i];
          }
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        T* gw = wn->grad.data();
        const T* xv2 = xn->values.data();
        for (int n = 0; n < N; ++n)
          for (int of = 0; of < out_features; ++of) {
            const T gv = g[static_cast<std::size_t>(n) * out_features + of];
            const T* xr = xv2 + static_cast<std::size_t>(n) * in_features;
            T* wr = gw + static_cast<std::size_t>(of) * in_features;
            for (std::size_t i = 0; i < in_features; ++i) wr[i] += gv * xr[i];
          }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        T* gb = bn->grad.data();
        for (int n = 0; n < N; ++n)
          for (int of = 0; of < out_features; ++of) gb[of] += g[static_cast<std::size_t>(n) * out_features + of];
      }
    };
  }
  return Tensor<T>::wrap(std::move(out));
}

// ---------------------------------------------------------------------------
// trilinear resize

namespace {

template <typename T>
struct ResizeAxis {
  std::vector<int> i0, i1;
  std::vector<T> w1;  // weight of i1; i0 gets 1-w1
  // Reverse lists for the backward gather: per input index, the (out,
  // weight) pairs that read it.
  std::vector<std::vector<std::pair<int, T>>> contrib;
};

template <typename T>
ResizeAxis<T> resize_axis(int in, int out) {
  ResizeAxis<T> a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.w1.resize(out);
  a.contrib.assign(in, {});
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    const double u = (o + 0.5) * ratio - 0.5;
    const double fl = std::floor(u);
    double t = u - fl;
    int lo = static_cast<int>(fl);
    int hi = lo + 1;
    if (lo < 0) lo = 0;
    if (hi < 0) hi = 0;
    if (lo > in - 1) lo = in - 1;
    if (hi > in - 1) hi = in - 1;
    a.i0[o] = lo;
    a.i1[o] = hi;
    a.w1[o] = static_cast<T>(t);
    a.contrib[lo].push_back({o, static_cast<T>(1.0 - t)});
    a.contrib[hi].push_back({o, static_cast<T>(t)});
  }
  return a;
}

}  // namespace

template <typename T>
Tensor<T> resize_trilinear(const Tensor<T>& x, std::array<int, 3> out_dhw) {
  const Shape xs = x.shape();
  if (out_dhw[0] < 1 || out_dhw[1] < 1 || out_dhw[2] < 1)
    raise(Errc::ShapeMismatch, "resize_trilinear: output dims must be positive");
  const Shape os{xs.n, xs.c, out_dhw[0], out_dhw[1], out_dhw[2]};
  const auto az = resize_axis<T>(xs.d, os.d);
  const auto ay = resize_axis<T>(xs.h, os.h);
  const auto ax = resize_axis<T>(xs.w, os.w);

  auto out = make_node<T>(os);
  const T* xv = x.values().data();
  T* ov = out->values.data();
  const std::size_t in_slab = xs.spatial();
  const std::size_t out_slab = os.spatial();

#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < static_cast<int64_t>(xs.n) * xs.c; ++nc) {
    const T* src = xv + nc * in_slab;
    T* dst = ov + nc * out_slab;
    for (int z = 0; z < os.d; ++z) {
      const int z0 = az.i0[z], z1 = az.i1[z];
      const T tz = az.w1[z];
      for (int y = 0; y < os.h; ++y) {
        const int y0 = ay.i0[y], y1 = ay.i1[y];
        const T ty = ay.w1[y];
        const T* r00 = src + (static_cast<std::size_t>(z0) * xs.h + y0) * xs.w;
        const T* r01 = src + (static_cast<std::size_t>(z0) * xs.h + y1) * xs.w;
        const T* r10 = src + (static_cast<std::size_t>(z1) * xs.h + y0) * xs.w;
        const T* r11 = src + (static_cast<std::size_t>(z1) * xs.h + y1) * xs.w;
        T* orow = dst + (static_cast<std::size_t>(z) * os.h + y) * os.w;
        for (int xw = 0; xw < os.w; ++xw) {
          const int x0 = ax.i0[xw], x1 = ax.i1[xw];
          const T tx = ax.w1[xw];
          const T v00 = r00[x0] + tx * (r00[x1] - r00[x0]);
          const T v01 = r01[x0] + tx * (r01[x1] - r01[x0]);
          const T v10 = r10[x0] + tx * (r10[x1] - r10[x0]);
          const T v11 = r11[x0] + tx * (r11[x1] - r11[x0]);
          const T v0 = v00 + ty * (v01 - v00);
          const T v1 = v10 + ty * (v11 - v10);
          orow[xw] = v0 + tz * (v1 - v0);
        }
      }
    }
  }

  if (x.requires_grad()) {
    auto xn = x.node();
    out->requires_grad = true;
    out->parents = {xn};
    const Shape xs2 = xs, os2 = os;
    out->backprop = [xn, az, ay, ax, xs2, os2](detail::TensorNode<T>& o) {
      xn->ensure_grad();
      const T* g = o.grad.data();
      T* gx = xn->grad.data();
      const std::size_t in_slab2 = xs2.spatial();
      const std::size_t out_slab2 = os2.spatial();
#pragma omp parallel for schedule(static)
      for (int64_t nc = 0; nc < static_cast<int64_t>(xs2.n) * xs2.c; ++nc) {
        const T* gs = g + nc * out_slab2;
        T* gd = gx + nc * in_slab2;
        for (int z = 0; z < xs2.d; ++z)
          for (const auto& [oz, wz] : az.contrib[z])
            for (int y = 0; y < xs2.h; ++y)
              for (const auto& [oy, wy] : ay.contrib[y]) {
                const T wzy = wz * wy;
                const T* grow = gs + (static_cast<std::size_t>(oz) * os2.h + oy) * os2.w;
                T* drow = gd + (static_cast<std::size_t>(z) * xs2.h + y) * xs2.w;
                for (int xw = 0; xw < xs2.w; ++xw) {
                  T acc = T(0);
                  for (const auto& [ox, wx] : ax.contrib[xw]) acc += wx * grow[ox];
                  drow[xw] += wzy * acc;
                }
              }
      }
    };
  }
  return Tensor<T>::wrap(std::move(out));
}

template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x, int factor) {
  if (factor != 2 && factor != 4 && factor != 8)
    raise(Errc::ShapeMismatch, "upsample_trilinear: factor must be 2, 4 or 8");
  const Shape xs = x.shape();
  return resize_trilinear(x, {xs.d * factor, xs.h * factor, xs.w * factor});
}

// ---------------------------------------------------------------------------
// softmax cross-entropy

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  const Shape ls = logits.shape();
  const int C = ls.c;
  const std::size_t spatial = ls.spatial();
  const std::size_t P = static_cast<std::size_t>(ls.n) * spatial;
  if (labels.size() != P)
    raise(Errc::ShapeMismatch, "softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                   std::to_string(P) + " positions");
  for (int l : labels)
    if (l < 0 || l >= C) raise(Errc::BadLabel, "softmax_cross_entropy: label " + std::to_string(l));

  const T* lv = logits.values().data();
  double loss = 0.0;
  std::size_t pos = 0;
  for (int n = 0; n < ls.n; ++n) {
    const T* base = lv + static_cast<std::size_t>(n) * C * spatial;
    for (std::size_t sidx = 0; sidx < spatial; ++sidx, ++pos) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(base[c * spatial + sidx]));
      double se = 0.0;
      for (int c = 0; c < C; ++c) se += std::exp(static_cast<double>(base[c * spatial + sidx]) - mx);
      const double lse = mx + std::log(se);
      loss += lse - static_cast<double>(base[static_cast<std::size_t>(labels[pos]) * spatial + sidx]);
    }
  }
  loss /= static_cast<double>(P);

  auto out = make_node<T>(Shape{1, 1, 1, 1, 1});
  out->values[0] = static_cast<T>(loss);
  if (logits.requires_grad()) {
    auto lnode = logits.node();
    out->requires_grad = true;
    out->parents = {lnode};
    const Shape ls2 = ls;
    out->backprop = [lnode, labels, ls2, spatial, P](detail::TensorNode<T>& o) {
      lnode->ensure_grad();
      const T g = o.grad[0];
      const T* lv2 = lnode->values.data();
      T* gl = lnode->grad.data();
      const int C2 = ls2.c;
      std::size_t pos = 0;
      for (int n = 0; n < ls2.n; ++n) {
        const std::size_t nbase = static_cast<std::size_t>(n) * C2 * spatial;
        for (std::size_t sidx = 0; sidx < spatial; ++sidx, ++pos) {
          double mx = -std::numeric_limits<double>::infinity();
          for (int c = 0; c < C2; ++c) mx = std::max(mx, static_cast<double>(lv2[nbase + c * spatial + sidx]));
          double se = 0.0;
          for (int c = 0; c < C2; ++c) se += std::exp(static_cast<double>(lv2[nbase + c * spatial + sidx]) - mx);
          for (int c = 0; c < C2; ++c) {
            const double sm = std::exp(static_cast<double>(lv2[nbase + c * spatial + sidx]) - mx) / se;
            const double onehot = (c == labels[pos]) ? 1.0 : 0.0;
            gl[nbase + c * spatial + sidx] += g * static_cast<T>((sm - onehot) / static_cast<double>(P));
          }
        }
      }
    };
  }
  return Tensor<T>::wrap(std::move(out));
}

// ---------------------------------------------------------------------------
// structural ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) raise(Errc::ShapeMismatch, "add: " + a.shape().str() + " vs " + b.shape().str());
  auto out = make_node<T>(a.shape());
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = out->values.data();
  for (std::size_t i = 0; i < out->values.size(); ++i) ov[i] = av[i] + bv[i];
  const bool needs = a.requires_grad() || b.requires_grad();
  out->requires_grad = needs;
  if (needs) {
    auto an = a.node(), bn = b.node();
    out->parents = {an, bn};
    out->backprop = [an, bn](detail::TensorNode<T>& o) {
      if (an->requires_grad) {
        an->ensure_grad();
        accumulate(an->grad, o.grad);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        accumulate(bn->grad, o.grad);
      }
    };
  }
  return Tensor<T>::wrap(std::move(out));
}

template <typename T>
Tensor<T> concat_c(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) raise(Errc::ShapeMismatch, "concat_c: no inputs");
  const Shape s0 = parts.front().shape();
  int total_c = 0;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    if (s.n != s0.n || s.d != s0.d || s.h != s0.h || s.w != s0.w)
      raise(Errc::ShapeMismatch, "concat_c: incompatible " + s.str() + " vs " + s0.str());
    total_c += s.c;
  }
  Shape os{s0.n, total_c, s0.d, s0.h, s0.w};
  auto out = make_node<T>(os);
  const std::size_t spatial = s0.spatial();
  bool needs = false;
  int c_off = 0;
  for (const auto& p : parts) {
    const int pc = p.shape().c;
    const T* pv = p.values().data();
    for (int n = 0; n < s0.n; ++n)
      std::copy(pv + static_cast<std::size_t>(n) * pc * spatial, pv + static_cast<std::size_t>(n + 1) * pc * spatial,
                out->values.data() + (static_cast<std::size_t>(n) * total_c + c_off) * spatial);
    c_off += pc;
    needs = needs || p.requires_grad();
  }
  out->requires_grad = needs;
  if (needs) {
    std::vector<std::shared_ptr<detail::TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    out->parents = nodes;
    const Shape os2 = os;
    out->backprop = [nodes, os2, spatial](detail::TensorNode<T>& o) {
      int c_off2 = 0;
      for (auto& pn : nodes) {
        const int pc = pn->shape.c;
        if (pn->requires_grad) {
          pn->ensure_grad();
          for (int n = 0; n < os2.n; ++n) {
            const T* src = o.grad.data() + (static_cast<std::size_t>(n) * os2.c + c_off2) * spatial;
            T* dst = pn->grad.data() + static_cast<std::size_t>(n) * pc * spatial;
            for (std::size_t i = 0; i < static_cast<std::size_t>(pc) * spatial; ++i) dst[i] += src[i];
          }
        }
        c_off2 += pc;
      }
    };
  }
  return Tensor<T>::wrap(std::move(out));
}

template <typename T>
Tensor<T> stack_n(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) raise(Errc::ShapeMismatch, "stack_n: no inputs");
  const Shape s0 = parts.front().shape();
  int total_n = 0;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    if (s.c != s0.c || s.d != s0.d || s.h != s0.h || s.w != s0.w)
      raise(Errc::ShapeMismatch, "stack_n: incompatible " + s.str() + " vs " + s0.str());
    total_n += s.n;
  }
  Shape os{total_n, s0.c, s0.d, s0.h, s0.w};
  auto out = make_node<T>(os);
  const std::size_t sample = static_cast<std::size_t>(s0.c) * s0.spatial();
  bool needs = false;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out->values.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.values().size();
    needs = needs || p.requires_grad();
  }
  out->requires_grad = needs;
  if (needs) {
    std::vector<std::shared_ptr<detail::TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    out->parents = nodes;
    out->backprop = [nodes, sample](detail::TensorNode<T>& o) {
      std::size_t off2 = 0;
      for (auto& pn : nodes) {
        const std::size_t len = pn->values.size();
        if (pn->requires_grad) {
          pn->ensure_grad();
          for (std::size_t i = 0; i < len; ++i) pn->grad[i] += o.grad[off2 + i];
        }
        off2 += len;
      }
    };
  }
  return Tensor<T>::wrap(std::move(out));
}

template <typename T>
Tensor<T> slice_dhw(const Tensor<T>& x, std::array<int, 3> start, std::array<int, 3> out_dhw) {
  const Shape xs = x.shape();
  if (out_dhw[0] < 1 || out_dhw[1] < 1 || out_dhw[2] < 1) raise(Errc::ShapeMismatch, "slice_dhw: bad output dims");
  const Shape os{xs.n, xs.c, out_dhw[0], out_dhw[1], out_dhw[2]};
  auto out = make_node<T>(os);
  const T* xv = x.values().data();
  T* ov = out->values.data();
  const std::size_t in_slab = xs.spatial(), out_slab = os.spatial();
  for (int64_t nc = 0; nc < static_cast<int64_t>(xs.n) * xs.c; ++nc) {
    const T* src = xv + nc * in_slab;
    T* dst = ov + nc * out_slab;
    for (int z = 0; z < os.d; ++z) {
      const int iz = z + start[0];
      if (iz < 0 || iz >= xs.d) continue;  // stays zero
      for (int y = 0; y < os.h; ++y) {
        const int iy = y + start[1];
        if (iy < 0 || iy >= xs.h) continue;
        const int x_lo = std::max(0, -start[2]);
        const int x_hi = std::min(os.w, xs.w - start[2]);
        const T* srow = src + (static_cast<std::size_t>(iz) * xs.h + iy) * xs.w + start[2];
        T* drow = dst + (static_cast<std::size_t>(z) * os.h + y) * os.w;
        for (int xw = x_lo; xw < x_hi; ++xw) drow[xw] = srow[xw];
      }
    }
  }
  if (x.requires_grad()) {
    auto xn = x.node();
    out->requires_grad = true;
    out->parents = {xn};
    const Shape xs2 = xs, os2 = os;
    out->backprop = [xn, start, xs2, os2](detail::TensorNode<T>& o) {
      xn->ensure_grad();
      T* gx = xn->grad.data();
      const T* g = o.grad.data();
      const std::size_t in_slab2 = xs2.spatial(), out_slab2 = os2.spatial();
      for (int64_t nc = 0; nc < static_cast<int64_t>(xs2.n) * xs2.c; ++nc) {
        T* dst = gx + nc * in_slab2;
        const T* src = g + nc * out_slab2;
        for (int z = 0; z < os2.d; ++z) {
          const int iz = z + start[0];
          if (iz < 0 || iz >= xs2.d) continue;
          for (int y = 0; y < os2.h; ++y) {
            const int iy = y + start[1];
            if (iy < 0 || iy >= xs2.h) continue;
            const int x_lo = std::max(0, -start[2]);
            const int x_hi = std::min(os2.w, xs2.w - start[2]);
            T* drow = dst + (static_cast<std::size_t>(iz) * xs2.h + iy) * xs2.w + start[2];
            const T* srow = src + (static_cast<std::size_t>(z) * os2.h + y) * os2.w;
            for (int xw = x_lo; xw < x_hi; ++xw) drow[xw] += srow[xw];
          }
        }
      }
    };
  }
  return Tensor<T>::wrap(std::move(out));
}

template <typename T>
Tensor<T> inner_with(const Tensor<T>& x, const std::vector<T>& weights) {
  if (weights.size() != x.values().size()) raise(Errc::ShapeMismatch, "inner_with: weight count mismatch");
  auto out = make_node<T>(Shape{1, 1, 1, 1, 1});
  const T* xv = x.values().data();
  T acc = T(0);
  for (std::size_t i = 0; i < weights.size(); ++i) acc += xv[i] * weights[i];
  out->values[0] = acc;
  if (x.requires_grad()) {
    auto xn = x.node();
    out->requires_grad = true;
    out->parents = {xn};
    out->backprop = [xn, weights](detail::TensorNode<T>& o) {
      xn->ensure_grad();
      const T g = o.grad[0];
      for (std::size_t i = 0; i < weights.size(); ++i) xn->grad[i] += g * weights[i];
    };
  }
  return Tensor<T>::wrap(std::move(out));
}

// ---------------------------------------------------------------------------
// optimizer / schedule / init

template <typename T>
AdamState<T> AdamState<T>::init(const std::vector<Parameter<T>*>& params) {
  AdamState<T> st;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const auto* p : params) {
    st.m.emplace_back(p->tensor.values().size(), T(0));
    st.v.emplace_back(p->tensor.values().size(), T(0));
  }
  return st;
}

template <typename T>
void adam_step(const std::vector<Parameter<T>*>& params, AdamState<T>& state, T lr) {
  if (state.m.size() != params.size())
    raise(Errc::ShapeMismatch, "adam_step: state initialized for a different parameter list");
  if (!(lr > T(0))) raise(Errc::ShapeMismatch, "adam_step: lr must be positive");
  state.step += 1;
  const T bc1 = T(1) - std::pow(state.beta1, static_cast<T>(state.step));
  const T bc2 = T(1) - std::pow(state.beta2, static_cast<T>(state.step));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<T>& p = *params[pi];
    if (p.frozen) continue;
    if (!p.tensor.has_grad()) continue;
    auto& val = p.tensor.values();
    const auto& g = p.tensor.grad();
    if (g.size() != val.size()) raise(Errc::ShapeMismatch, "adam_step: grad shape mismatch for " + p.name);
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (std::size_t i = 0; i < val.size(); ++i) {
      m[i] = state.beta1 * m[i] + (T(1) - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (T(1) - state.beta2) * g[i] * g[i];
      const T mhat = m[i] / bc1;
      const T vhat = v[i] / bc2;
      val[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

template <typename T>
void zero_grads(const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) p->tensor.zero_grad();
}

double lr_at(const CyclicLrSchedule& s, long long step) {
  if (step < 0) raise(Errc::ShapeMismatch, "lr_at: negative step");
  const long long cycle = step / s.cycle_len_steps;
  const double p = static_cast<double>(step % s.cycle_len_steps) / static_cast<double>(s.cycle_len_steps);
  const double ceiling = s.lr_max * std::pow(1.0 - s.decay_per_cycle, static_cast<double>(cycle));
  return s.lr_min + (ceiling - s.lr_min) * std::abs(2.0 * p - 1.0);
}

template <typename T>
void he_normal_fill(std::vector<T>& values, std::size_t fan_in, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : values) v = static_cast<T>(dist(rng));
}

// ---------------------------------------------------------------------------
// explicit instantiations

#define FUSENET_INSTANTIATE(T)                                                                              \
  template class Tensor<T>;                                                                                 \
  template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);             \
  template Tensor<T> conv1x1x1<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                             \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormState<T>&, \
                                   bool, T, T);                                                             \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                                  \
  template Tensor<T> fully_connected<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> resize_trilinear<T>(const Tensor<T>&, std::array<int, 3>);                             \
  template Tensor<T> upsample_trilinear<T>(const Tensor<T>&, int);                                          \
  template Tensor<T> softmax_cross_entropy<T>(const Tensor<T>&, const std::vector<int>&);                   \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> concat_c<T>(const std::vector<Tensor<T>>&);                                            \
  template Tensor<T> stack_n<T>(const std::vector<Tensor<T>>&);                                             \
  template Tensor<T> slice_dhw<T>(const Tensor<T>&, std::array<int, 3>, std::array<int, 3>);                \
  template Tensor<T> inner_with<T>(const Tensor<T>&, const std::vector<T>&);                                \
  template struct AdamState<T>;                                                                             \
  template void adam_step<T>(const std::vector<Parameter<T>*>&, AdamState<T>&, T);                          \
  template void zero_grads<T>(const std::vector<Parameter<T>*>&);                                           \
  template void he_normal_fill<T>(std::vector<T>&, std::size_t, std::uint64_t);

FUSENET_INSTANTIATE(float)
FUSENET_INSTANTIATE(double)

#undef FUSENET_INSTANTIATE

}  // namespace fusenet::gradnet
