// SPDX-License-Identifier: Apache-2.0
#include "fpt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>

namespace fpt::ops {

namespace {

template <typename T>
using NodeT = detail::Node<T>;

void require(bool ok, const std::string& what) {
  if (!ok) {
    throw ShapeError(what);
  }
}

template <typename T>
bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) {
    return false;
  }
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(is_suffix<T>(a.shape(), b.shape()),
          "add: " + shape_str(b.shape()) + " does not broadcast onto " + shape_str(a.shape()));
  const std::size_t n = a.numel();
  const std::size_t inner = b.numel();
  std::vector<T> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < n; i += inner) {
    for (std::size_t j = 0; j < inner; ++j) {
      out[i + j] += bv[j];
    }
  }
  NodeT<T>* an = a.node();
  NodeT<T>* bn = b.node();
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [an, bn, n, inner](NodeT<T>& self) {
    if (wants_grad(*an)) {
      for (std::size_t i = 0; i < n; ++i) {
        an->grad[i] += self.grad[i];
      }
    }
    if (wants_grad(*bn)) {
      for (std::size_t i = 0; i < n; i += inner) {
        for (std::size_t j = 0; j < inner; ++j) {
          bn->grad[j] += self.grad[i + j];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(),
          "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = a[i] * b[i];
  }
  NodeT<T>* an = a.node();
  NodeT<T>* bn = b.node();
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [an, bn, n](NodeT<T>& self) {
    if (wants_grad(*an)) {
      for (std::size_t i = 0; i < n; ++i) {
        an->grad[i] += self.grad[i] * bn->value[i];
      }
    }
    if (wants_grad(*bn)) {
      for (std::size_t i = 0; i < n; ++i) {
        bn->grad[i] += self.grad[i] * an->value[i];
      }
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.values().begin(), x.values().end());
  for (auto& v : out) {
    v *= factor;
  }
  NodeT<T>* xn = x.node();
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [xn, factor](NodeT<T>& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      xn->grad[i] += factor * self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.values()) {
    total += v;
  }
  NodeT<T>* xn = x.node();
  return Tensor<T>::from_op(Shape{}, {total}, {x}, [xn](NodeT<T>& self) {
    const T g = self.grad[0];
    for (auto& v : xn->grad) {
      v += g;
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(x.values().begin(), x.values().end());
  NodeT<T>* xn = x.node();
  return Tensor<T>::from_op(std::move(shape), std::move(out), {x}, [xn](NodeT<T>& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      xn->grad[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require(x.rank() >= 1 && weight.rank() == 2, "linear: expects x (..., in) and weight (in, out)");
  const std::size_t in = weight.dim(0);
  const std::size_t out_dim = weight.dim(1);
  require(x.shape().back() == in, "linear: input width " + std::to_string(x.shape().back()) +
                                      " does not match weight " + shape_str(weight.shape()));
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.dim(0) == out_dim, "linear: bias shape mismatch");
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;

  std::vector<T> y(rows * out_dim, T(0));
  const T* xv = x.values().data();
  const T* wv = weight.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* yr = y.data() + r * out_dim;
    if (bias.defined()) {
      std::copy(bias.values().begin(), bias.values().end(), yr);
    }
    const T* xr = xv + r * in;
    for (std::size_t i = 0; i < in; ++i) {
      const T a = xr[i];
      const T* wr = wv + i * out_dim;
      for (std::size_t o = 0; o < out_dim; ++o) {
        yr[o] += a * wr[o];
      }
    }
  }

  NodeT<T>* xn = x.node();
  NodeT<T>* wn = weight.node();
  NodeT<T>* bn = bias.defined() ? bias.node() : nullptr;
  return Tensor<T>::from_op(
      std::move(out_shape), std::move(y), {x, weight, bias},
      [xn, wn, bn, rows, in, out_dim](NodeT<T>& self) {
        const T* dy = self.grad.data();
        if (wants_grad(*xn)) {
          const T* w = wn->value.data();
          for (std::size_t r = 0; r < rows; ++r) {
            const T* dyr = dy + r * out_dim;
            T* dxr = xn->grad.data() + r * in;
            for (std::size_t i = 0; i < in; ++i) {
              const T* wr = w + i * out_dim;
              T acc = 0;
              for (std::size_t o = 0; o < out_dim; ++o) {
                acc += dyr[o] * wr[o];
              }
              dxr[i] += acc;
            }
          }
        }
        if (wants_grad(*wn)) {
          const T* xv = xn->value.data();
          T* dw = wn->grad.data();
          for (std::size_t r = 0; r < rows; ++r) {
            const T* dyr = dy + r * out_dim;
            const T* xr = xv + r * in;
            for (std::size_t i = 0; i < in; ++i) {
              const T a = xr[i];
              T* dwr = dw + i * out_dim;
              for (std::size_t o = 0; o < out_dim; ++o) {
                dwr[o] += a * dyr[o];
              }
            }
          }
        }
        if (bn != nullptr && wants_grad(*bn)) {
          for (std::size_t r = 0; r < rows; ++r) {
            const T* dyr = dy + r * out_dim;
            for (std::size_t o = 0; o < out_dim; ++o) {
              bn->grad[o] += dyr[o];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  require(axis < x.rank(), "softmax: axis out of range for " + shape_str(x.shape()));
  for (T v : x.values()) {
    if (!std::isfinite(v)) {
      throw InvalidValueError("softmax: non-finite input");
    }
  }
  const auto& shape = x.shape();
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (std::size_t i = 0; i < axis; ++i) {
    outer *= shape[i];
  }
  for (std::size_t i = axis + 1; i < shape.size(); ++i) {
    inner *= shape[i];
  }
  const std::size_t n = shape[axis];
  std::vector<T> y(x.numel());
  const auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = xv[base];
      for (std::size_t j = 1; j < n; ++j) {
        mx = std::max(mx, xv[base + j * inner]);
      }
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        y[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) {
        y[base + j * inner] /= total;
      }
    }
  }
  NodeT<T>* xn = x.node();
  return Tensor<T>::from_op(shape, std::move(y), {x}, [xn, outer, inner, n](NodeT<T>& self) {
    const auto& yv = self.value;
    const auto& dy = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) {
          dot += dy[base + j * inner] * yv[base + j * inner];
        }
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t k = base + j * inner;
          xn->grad[k] += yv[k] * (dy[k] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require(x.rank() >= 1 && x.shape().back() >= 2, "layer_norm: last axis must have extent >= 2");
  const std::size_t d = x.shape().back();
  require(gain.numel() == d && bias.numel() == d, "layer_norm: gain/bias must have extent " +
                                                      std::to_string(d));
  const std::size_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> y(x.numel());
  const auto xv = x.values();
  const auto g = gain.values();
  const auto b = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    T mean = 0;
    for (std::size_t i = 0; i < d; ++i) {
      mean += xr[i];
    }
    mean /= T(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) {
      const T c = xr[i] - mean;
      var += c * c;
    }
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (xr[i] - mean) * rs;
      (*xhat)[r * d + i] = h;
      y[r * d + i] = h * g[i] + b[i];
    }
  }
  NodeT<T>* xn = x.node();
  NodeT<T>* gn = gain.node();
  NodeT<T>* bn = bias.node();
  return Tensor<T>::from_op(
      x.shape(), std::move(y), {x, gain, bias},
      [xn, gn, bn, xhat, rstd, rows, d](NodeT<T>& self) {
        const auto& dy = self.grad;
        const auto& h = *xhat;
        if (wants_grad(*gn) || wants_grad(*bn)) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < d; ++i) {
              const std::size_t k = r * d + i;
              if (wants_grad(*gn)) {
                gn->grad[i] += dy[k] * h[k];
              }
              if (wants_grad(*bn)) {
                bn->grad[i] += dy[k];
              }
            }
          }
        }
        if (wants_grad(*xn)) {
          const auto& g = gn->value;
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh = 0;
            T mean_dh_h = 0;
            for (std::size_t i = 0; i < d; ++i) {
              const std::size_t k = r * d + i;
              const T dh = dy[k] * g[i];
              mean_dh += dh;
              mean_dh_h += dh * h[k];
            }
            mean_dh /= T(d);
            mean_dh_h /= T(d);
            for (std::size_t i = 0; i < d; ++i) {
              const std::size_t k = r * d + i;
              const T dh = dy[k] * g[i];
              xn->grad[k] += (*rstd)[r] * (dh - mean_dh - h[k] * mean_dh_h);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  std::vector<T> y(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
  }
  NodeT<T>* xn = x.node();
  return Tensor<T>::from_op(x.shape(), std::move(y), {x}, [xn, inv_sqrt2](NodeT<T>& self) {
    const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T v = xn->value[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      xn->grad[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p <= 0.0) {
    return x;
  }
  if (p >= 1.0) {
    throw DomainError("dropout: probability must be < 1");
  }
  const T keep_scale = T(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) {
    (*mask)[i] = rng.bernoulli(p) ? T(0) : keep_scale;
    y[i] = x[i] * (*mask)[i];
  }
  NodeT<T>* xn = x.node();
  return Tensor<T>::from_op(x.shape(), std::move(y), {x}, [xn, mask](NodeT<T>& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      xn->grad[i] += self.grad[i] * (*mask)[i];
    }
  });
}

template <typename T>
AttentionResult<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k,
                                        const Tensor<T>& v) {
  require(q.rank() == 4 && k.rank() == 4 && v.rank() == 4,
          "attention: operands must be (B, h, n, d_h)");
  const std::size_t batch = q.dim(0);
  const std::size_t heads = q.dim(1);
  const std::size_t nq = q.dim(2);
  const std::size_t dh = q.dim(3);
  const std::size_t nk = k.dim(2);
  require(k.dim(0) == batch && v.dim(0) == batch, "attention: batch dimension mismatch");
  require(k.dim(1) == heads && v.dim(1) == heads, "attention: head dimension mismatch");
  require(k.dim(3) == dh && v.dim(3) == dh, "attention: head width mismatch");
  require(v.dim(2) == nk, "attention: key/value length mismatch");
  require(dh > 0, "attention: head width must be positive");

  const T scale_factor = T(1) / std::sqrt(T(dh));
  std::vector<T> probs(batch * heads * nq * nk);
  std::vector<T> out(batch * heads * nq * dh, T(0));
  const T* qv = q.values().data();
  const T* kv = k.values().data();
  const T* vv = v.values().data();
  for (std::size_t bh = 0; bh < batch * heads; ++bh) {
    const T* qb = qv + bh * nq * dh;
    const T* kb = kv + bh * nk * dh;
    const T* vb = vv + bh * nk * dh;
    T* pb = probs.data() + bh * nq * nk;
    T* ob = out.data() + bh * nq * dh;
    for (std::size_t i = 0; i < nq; ++i) {
      T* prow = pb + i * nk;
      const T* qi = qb + i * dh;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < nk; ++j) {
        const T* kj = kb + j * dh;
        T dot = 0;
        for (std::size_t c = 0; c < dh; ++c) {
          dot += qi[c] * kj[c];
        }
        prow[j] = dot * scale_factor;
        mx = std::max(mx, prow[j]);
      }
      T total = 0;
      for (std::size_t j = 0; j < nk; ++j) {
        prow[j] = std::exp(prow[j] - mx);
        total += prow[j];
      }
      const T inv = T(1) / total;
      T* oi = ob + i * dh;
      for (std::size_t j = 0; j < nk; ++j) {
        prow[j] *= inv;
        const T a = prow[j];
        const T* vj = vb + j * dh;
        for (std::size_t c = 0; c < dh; ++c) {
          oi[c] += a * vj[c];
        }
      }
    }
  }

  Tensor<T> map(Shape{batch, heads, nq, nk}, std::move(probs), false);
  NodeT<T>* qn = q.node();
  NodeT<T>* kn = k.node();
  NodeT<T>* vn = v.node();
  auto map_node = map.node_ptr();
  Tensor<T> output = Tensor<T>::from_op(
      q.shape(), std::move(out), {q, k, v},
      [qn, kn, vn, map_node, batch, heads, nq, nk, dh, scale_factor](NodeT<T>& self) {
        std::vector<T> dlogit(nk);
        for (std::size_t bh = 0; bh < batch * heads; ++bh) {
          const T* pb = map_node->value.data() + bh * nq * nk;
          const T* dob = self.grad.data() + bh * nq * dh;
          const T* qb = qn->value.data() + bh * nq * dh;
          const T* kb = kn->value.data() + bh * nk * dh;
          const T* vb = vn->value.data() + bh * nk * dh;
          for (std::size_t i = 0; i < nq; ++i) {
            const T* prow = pb + i * nk;
            const T* doi = dob + i * dh;
            T dot = 0;
            for (std::size_t j = 0; j < nk; ++j) {
              const T* vj = vb + j * dh;
              T da = 0;
              for (std::size_t c = 0; c < dh; ++c) {
                da += doi[c] * vj[c];
              }
              dlogit[j] = da;
              dot += da * prow[j];
            }
            for (std::size_t j = 0; j < nk; ++j) {
              dlogit[j] = prow[j] * (dlogit[j] - dot) * scale_factor;
            }
            if (wants_grad(*vn)) {
              T* dvb = vn->grad.data() + bh * nk * dh;
              for (std::size_t j = 0; j < nk; ++j) {
                const T a = prow[j];
                T* dvj = dvb + j * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                  dvj[c] += a * doi[c];
                }
              }
            }
            if (wants_grad(*qn)) {
              T* dqi = qn->grad.data() + bh * nq * dh + i * dh;
              for (std::size_t j = 0; j < nk; ++j) {
                const T g = dlogit[j];
                const T* kj = kb + j * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                  dqi[c] += g * kj[c];
                }
              }
            }
            if (wants_grad(*kn)) {
              T* dkb = kn->grad.data() + bh * nk * dh;
              const T* qi = qb + i * dh;
              for (std::size_t j = 0; j < nk; ++j) {
                const T g = dlogit[j];
                T* dkj = dkb + j * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                  dkj[c] += g * qi[c];
                }
              }
            }
          }
        }
      });
  return {std::move(output), std::move(map)};
}

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  require(x.rank() == 3, "split_heads: expects (B, N, D)");
  const std::size_t batch = x.dim(0);
  const std::size_t n = x.dim(1);
  const std::size_t width = x.dim(2);
  require(heads > 0 && width % heads == 0, "split_heads: width " + std::to_string(width) +
                                               " not divisible by " + std::to_string(heads));
  const std::size_t dh = width / heads;
  std::vector<T> y(x.numel());
  const auto xv = x.values();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t h = 0; h < heads; ++h) {
        const T* src = xv.data() + (b * n + t) * width + h * dh;
        T* dst = y.data() + ((b * heads + h) * n + t) * dh;
        std::copy(src, src + dh, dst);
      }
    }
  }
  NodeT<T>* xn = x.node();
  return Tensor<T>::from_op(Shape{batch, heads, n, dh}, std::move(y), {x},
                            [xn, batch, n, heads, dh, width](NodeT<T>& self) {
                              for (std::size_t b = 0; b < batch; ++b) {
                                for (std::size_t t = 0; t < n; ++t) {
                                  for (std::size_t h = 0; h < heads; ++h) {
                                    T* dst = xn->grad.data() + (b * n + t) * width + h * dh;
                                    const T* src =
                                        self.grad.data() + ((b * heads + h) * n + t) * dh;
                                    for (std::size_t c = 0; c < dh; ++c) {
                                      dst[c] += src[c];
                                    }
                                  }
                                }
                              }
                            });
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  require(x.rank() == 4, "merge_heads: expects (B, h, N, d_h)");
  const std::size_t batch = x.dim(0);
  const std::size_t heads = x.dim(1);
  const std::size_t n = x.dim(2);
  const std::size_t dh = x.dim(3);
  const std::size_t width = heads * dh;
  std::vector<T> y(x.numel());
  const auto xv = x.values();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < n; ++t) {
        const T* src = xv.data() + ((b * heads + h) * n + t) * dh;
        T* dst = y.data() + (b * n + t) * width + h * dh;
        std::copy(src, src + dh, dst);
      }
    }
  }
  NodeT<T>* xn = x.node();
  return Tensor<T>::from_op(Shape{batch, n, width}, std::move(y), {x},
                            [xn, batch, n, heads, dh, width](NodeT<T>& self) {
                              for (std::size_t b = 0; b < batch; ++b) {
                                for (std::size_t h = 0; h < heads; ++h) {
                                  for (std::size_t t = 0; t < n; ++t) {
                                    T* dst = xn->grad.data() + ((b * heads + h) * n + t) * dh;
                                    const T* src = self.grad.data() + (b * n + t) * width + h * dh;
                                    for (std::size_t c = 0; c < dh; ++c) {
                                      dst[c] += src[c];
                                    }
                                  }
                                }
                              }
                            });
}

template <typename T>
Tensor<T> concat_tokens(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 3 && b.rank() == 3, "concat_tokens: expects (B, N, d) operands");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
          "concat_tokens: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t batch = a.dim(0);
  const std::size_t na = a.dim(1);
  const std::size_t nb = b.dim(1);
  const std::size_t d = a.dim(2);
  std::vector<T> y(batch * (na + nb) * d);
  for (std::size_t s = 0; s < batch; ++s) {
    std::copy_n(a.values().data() + s * na * d, na * d, y.data() + s * (na + nb) * d);
    std::copy_n(b.values().data() + s * nb * d, nb * d, y.data() + (s * (na + nb) + na) * d);
  }
  NodeT<T>* an = a.node();
  NodeT<T>* bn = b.node();
  return Tensor<T>::from_op(Shape{batch, na + nb, d}, std::move(y), {a, b},
                            [an, bn, batch, na, nb, d](NodeT<T>& self) {
                              for (std::size_t s = 0; s < batch; ++s) {
                                const T* g = self.grad.data() + s * (na + nb) * d;
                                if (wants_grad(*an)) {
                                  T* dst = an->grad.data() + s * na * d;
                                  for (std::size_t i = 0; i < na * d; ++i) {
                                    dst[i] += g[i];
                                  }
                                }
                                if (wants_grad(*bn)) {
                                  T* dst = bn->grad.data() + s * nb * d;
                                  for (std::size_t i = 0; i < nb * d; ++i) {
                                    dst[i] += g[na * d + i];
                                  }
                                }
                              }
                            });
}

template <typename T>
Tensor<T> slice_tokens(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  require(x.rank() == 3, "slice_tokens: expects (B, N, d)");
  const std::size_t batch = x.dim(0);
  const std::size_t n = x.dim(1);
  const std::size_t d = x.dim(2);
  require(begin + count <= n, "slice_tokens: range exceeds sequence length " + std::to_string(n));
  std::vector<T> y(batch * count * d);
  for (std::size_t s = 0; s < batch; ++s) {
    std::copy_n(x.values().data() + (s * n + begin) * d, count * d, y.data() + s * count * d);
  }
  NodeT<T>* xn = x.node();
  return Tensor<T>::from_op(Shape{batch, count, d}, std::move(y), {x},
                            [xn, batch, n, d, begin, count](NodeT<T>& self) {
                              for (std::size_t s = 0; s < batch; ++s) {
                                T* dst = xn->grad.data() + (s * n + begin) * d;
                                const T* g = self.grad.data() + s * count * d;
                                for (std::size_t i = 0; i < count * d; ++i) {
                                  dst[i] += g[i];
                                }
                              }
                            });
}

template <typename T>
Tensor<T> expand_batch(const Tensor<T>& x, std::size_t batch) {
  const std::size_t n = x.numel();
  Shape shape{batch};
  shape.insert(shape.end(), x.shape().begin(), x.shape().end());
  std::vector<T> y(batch * n);
  for (std::size_t s = 0; s < batch; ++s) {
    std::copy_n(x.values().data(), n, y.data() + s * n);
  }
  NodeT<T>* xn = x.node();
  return Tensor<T>::from_op(std::move(shape), std::move(y), {x}, [xn, batch, n](NodeT<T>& self) {
    for (std::size_t s = 0; s < batch; ++s) {
      for (std::size_t i = 0; i < n; ++i) {
        xn->grad[i] += self.grad[s * n + i];
      }
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require(logits.rank() == 2, "cross_entropy: logits must be (B, C)");
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  require(labels.size() == batch, "cross_entropy: " + std::to_string(labels.size()) +
                                      " labels for batch of " + std::to_string(batch));
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw IndexError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<T>>(batch * classes);
  T total = 0;
  const auto lv = logits.values();
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = lv.data() + b * classes;
    T mx = row[0];
    for (std::size_t c = 1; c < classes; ++c) {
      mx = std::max(mx, row[c]);
    }
    T z = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      z += std::exp(row[c] - mx);
    }
    const T log_z = mx + std::log(z);
    for (std::size_t c = 0; c < classes; ++c) {
      (*probs)[b * classes + c] = std::exp(row[c] - log_z);
    }
    total += log_z - row[labels[b]];
  }
  const T mean = batch ? total / T(batch) : T(0);
  std::vector<int> kept(labels.begin(), labels.end());
  NodeT<T>* ln = logits.node();
  return Tensor<T>::from_op(Shape{}, {mean}, {logits},
                            [ln, probs, kept = std::move(kept), batch, classes](NodeT<T>& self) {
                              const T g = self.grad[0] / T(batch);
                              for (std::size_t b = 0; b < batch; ++b) {
                                for (std::size_t c = 0; c < classes; ++c) {
                                  T p = (*probs)[b * classes + c];
                                  if (static_cast<int>(c) == kept[b]) {
                                    p -= T(1);
                                  }
                                  ln->grad[b * classes + c] += g * p;
                                }
                              }
                            });
}

#define FPT_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                     \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> gelu(const Tensor<T>&);                                                     \
  template Tensor<T> dropout(const Tensor<T>&, double, Rng&);                                    \
  template AttentionResult<T> scaled_dot_attention(const Tensor<T>&, const Tensor<T>&,           \
                                                   const Tensor<T>&);                            \
  template Tensor<T> split_heads(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> merge_heads(const Tensor<T>&);                                              \
  template Tensor<T> concat_tokens(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> slice_tokens(const Tensor<T>&, std::size_t, std::size_t);                   \
  template Tensor<T> expand_batch(const Tensor<T>&, std::size_t);                                \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);

FPT_INSTANTIATE_OPS(float)
FPT_INSTANTIATE_OPS(double)

#undef FPT_INSTANTIATE_OPS

}  // namespace fpt::ops
