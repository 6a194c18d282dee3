#include "h2dilr/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "h2dilr/error.hpp"

namespace h2dilr {

const Tensor& Var::value() const { return graph_->value(id_); }
bool Var::requires_grad() const { return graph_->requires_grad(id_); }

Var Graph::constant(Tensor value) { return push("constant", {}, std::move(value), nullptr); }

Var Graph::input(Tensor value, bool requires_grad) {
  Var v = push("input", {}, std::move(value), nullptr);
  nodes_[v.id()].requires_grad = requires_grad;
  return v;
}

Var Graph::parameter(Parameter& p) {
  Var v = push("parameter:" + p.name, {}, p.value, nullptr);
  nodes_[v.id()].requires_grad = p.requires_grad;
  nodes_[v.id()].param = &p;
  return v;
}

Var Graph::push(std::string op, std::vector<Var> inputs, Tensor value, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError("non-finite value produced by '" + op + "' (node " + std::to_string(nodes_.size()) +
                       ", shape " + shape_str(value.shape()) + ")");
  }
  Node node;
  node.op = std::move(op);
  node.value = std::move(value);
  for (const auto& in : inputs) {
    if (in.graph() != this) throw Error("primitive '" + node.op + "' mixes nodes from different graphs");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Graph::backward(Var loss) {
  if (loss.graph() != this) throw Error("backward: loss belongs to another graph");
  const Tensor& lv = nodes_[loss.id()].value;
  if (lv.size() != 1) throw ShapeError("backward requires a scalar loss, got shape " + shape_str(lv.shape()));
  grads_.assign(nodes_.size(), std::nullopt);
  grads_[loss.id()] = Tensor(lv.shape(), 1.0);

  std::vector<Tensor*> grad_in;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!grads_[i] || !node.requires_grad || !node.backward) continue;
    grad_in.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      std::size_t in = node.inputs[k];
      if (!nodes_[in].requires_grad) continue;
      if (!grads_[in]) grads_[in] = Tensor(nodes_[in].value.shape());
      grad_in[k] = &*grads_[in];
    }
    node.backward(node.value, *grads_[i], grad_in);
  }

  Gradients out;
  for (std::size_t i = 0; i <= loss.id(); ++i) {
    Node& node = nodes_[i];
    if (node.param == nullptr || !node.requires_grad) continue;
    Tensor g = grads_[i] ? *grads_[i] : Tensor(node.value.shape());
    if (!g.all_finite()) {
      throw NumericError("non-finite gradient for parameter '" + node.param->name + "'");
    }
    auto it = out.find(node.param);
    if (it == out.end()) {
      out.emplace(node.param, std::move(g));
    } else {
      it->second.accumulate(g);
    }
  }
  return out;
}

Tensor Graph::grad(Var v) const {
  if (v.id() < grads_.size() && grads_[v.id()]) return *grads_[v.id()];
  return Tensor(nodes_.at(v.id()).value.shape());
}

std::size_t conv1d_out_len(std::size_t len, std::size_t kernel, const Conv1dOptions& opt) {
  std::size_t padded = len + opt.pad_left + opt.pad_right;
  if (opt.stride == 0 || kernel == 0 || padded < kernel) {
    throw ShapeError("conv1d: input length " + std::to_string(len) + " (padded " + std::to_string(padded) +
                     ") shorter than kernel " + std::to_string(kernel));
  }
  return (padded - kernel) / opt.stride + 1;
}

std::size_t conv_transpose1d_out_len(std::size_t len, std::size_t kernel, const ConvTranspose1dOptions& opt) {
  if (opt.stride == 0 || kernel == 0) throw ShapeError("conv_transpose1d: stride and kernel must be positive");
  if (opt.output_padding > 0 && opt.output_padding >= opt.stride) {
    throw ShapeError("conv_transpose1d: output_padding " + std::to_string(opt.output_padding) +
                     " must be smaller than stride " + std::to_string(opt.stride));
  }
  std::size_t full = (len - 1) * opt.stride + kernel + opt.output_padding;
  if (full <= opt.pad_left + opt.pad_right) throw ShapeError("conv_transpose1d: padding consumes the whole output");
  return full - opt.pad_left - opt.pad_right;
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

auto rows_of(const double* p, std::size_t r, std::size_t c) {
  return MapC(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
auto rows_of(double* p, std::size_t r, std::size_t c) {
  return MapM(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

// Row-major c[M,N] += a[M,K] * b[K,N]
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* a, const double* b, double* c) {
  rows_of(c, M, N).noalias() += rows_of(a, M, K) * rows_of(b, K, N);
}

// c[M,N] += a[M,K] * b[N,K]^T
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const double* a, const double* b, double* c) {
  rows_of(c, M, N).noalias() += rows_of(a, M, K) * rows_of(b, N, K).transpose();
}

// c[M,N] += a[K,M]^T * b[K,N]
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* a, const double* b, double* c) {
  rows_of(c, M, N).noalias() += rows_of(a, K, M).transpose() * rows_of(b, K, N);
}

}  // namespace

namespace ops {
namespace {

Graph& graph_of(Var v) {
  if (v.graph() == nullptr) throw Error("operation on an unbound Var");
  return *v.graph();
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const char* op, const char* what, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must be rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

std::vector<Var> with_optional(std::vector<Var> inputs, const std::optional<Var>& extra) {
  if (extra) inputs.push_back(*extra);
  return inputs;
}

}  // namespace

Var relu(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return graph_of(x).push("relu", {x}, std::move(out), [](const Tensor& y, const Tensor& go, std::vector<Tensor*>& gi) {
    Tensor& dx = *gi[0];
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] > 0.0) dx[i] += go[i];
    }
  });
}

Var gelu(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] / std::numbers::sqrt2));
  }
  Graph& g = graph_of(x);
  std::size_t xid = x.id();
  return g.push("gelu", {x}, std::move(out), [&g, xid](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
    const Tensor& xv = g.value(xid);
    Tensor& dx = *gi[0];
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      double v = xv[i];
      double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      dx[i] += go[i] * (cdf + v * pdf);
    }
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return graph_of(a).push("add", {a, b}, std::move(out), [](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
    for (Tensor* d : gi) {
      if (d) d->accumulate(go);
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  Graph& g = graph_of(a);
  std::size_t aid = a.id(), bid = b.id();
  return g.push("mul", {a, b}, std::move(out),
                [&g, aid, bid](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
                  const Tensor& av = g.value(aid);
                  const Tensor& bv = g.value(bid);
                  if (gi[0]) {
                    for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += go[i] * bv[i];
                  }
                  if (gi[1]) {
                    for (std::size_t i = 0; i < go.size(); ++i) (*gi[1])[i] += go[i] * av[i];
                  }
                });
}

Var scale(Var x, double c) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = c * xv[i];
  return graph_of(x).push("scale", {x}, std::move(out), [c](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
    for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += c * go[i];
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return graph_of(x).push("sum", {x}, Tensor::scalar(s), [](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
    for (auto& d : gi[0]->data()) d += go[0];
  });
}

Var mean(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  double n = static_cast<double>(x.value().size());
  return graph_of(x).push("mean", {x}, Tensor::scalar(s / n),
                          [n](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
                            double d = go[0] / n;
                            for (auto& v : gi[0]->data()) v += d;
                          });
}

Var mean_tokens(Var x) {
  const Tensor& xv = x.value();
  require_rank("mean_tokens", "input", xv, 3);
  std::size_t B = xv.dim(0), L = xv.dim(1), E = xv.dim(2);
  Tensor out({B, E});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t l = 0; l < L; ++l) {
      const double* row = xv.ptr() + (b * L + l) * E;
      for (std::size_t e = 0; e < E; ++e) out[b * E + e] += row[e];
    }
    for (std::size_t e = 0; e < E; ++e) out[b * E + e] /= static_cast<double>(L);
  }
  return graph_of(x).push("mean_tokens", {x}, std::move(out),
                          [B, L, E](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
                            Tensor& dx = *gi[0];
                            double inv = 1.0 / static_cast<double>(L);
                            for (std::size_t b = 0; b < B; ++b) {
                              for (std::size_t l = 0; l < L; ++l) {
                                double* row = dx.ptr() + (b * L + l) * E;
                                for (std::size_t e = 0; e < E; ++e) row[e] += go[b * E + e] * inv;
                              }
                            }
                          });
}

Var mse(Var a, Var b) {
  require_same_shape("mse", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    double d = av[i] - bv[i];
    s += d * d;
  }
  double n = static_cast<double>(av.size());
  Graph& g = graph_of(a);
  std::size_t aid = a.id(), bid = b.id();
  return g.push("mse", {a, b}, Tensor::scalar(s / n),
                [&g, aid, bid, n](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
                  const Tensor& av = g.value(aid);
                  const Tensor& bv = g.value(bid);
                  double c = 2.0 * go[0] / n;
                  for (std::size_t i = 0; i < av.size(); ++i) {
                    double d = c * (av[i] - bv[i]);
                    if (gi[0]) (*gi[0])[i] += d;
                    if (gi[1]) (*gi[1])[i] -= d;
                  }
                });
}

Var cross_entropy(Var logits, const std::vector<int>& labels) {
  const Tensor& lv = logits.value();
  require_rank("cross_entropy", "logits", lv, 2);
  std::size_t B = lv.dim(0), C = lv.dim(1);
  if (labels.size() != B) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(B) + " rows");
  }
  Tensor probs({B, C});
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= C) {
      throw ShapeError("cross_entropy: label " + std::to_string(labels[b]) + " outside [0, " + std::to_string(C) + ")");
    }
    const double* row = lv.ptr() + b * C;
    double mx = *std::max_element(row, row + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < C; ++c) probs[b * C + c] = std::exp(row[c] - mx) / z;
    loss -= row[labels[b]] - mx - std::log(z);
  }
  loss /= static_cast<double>(B);
  return graph_of(logits).push(
      "cross_entropy", {logits}, Tensor::scalar(loss),
      [probs = std::move(probs), labels, B, C](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
        Tensor& d = *gi[0];
        double c0 = go[0] / static_cast<double>(B);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t c = 0; c < C; ++c) {
            double onehot = static_cast<std::size_t>(labels[b]) == c ? 1.0 : 0.0;
            d[b * C + c] += c0 * (probs[b * C + c] - onehot);
          }
        }
      });
}

Var softmax(Var x) {
  const Tensor& xv = x.value();
  std::size_t N = xv.shape().back();
  std::size_t rows = xv.size() / N;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.ptr() + r * N;
    double* o = out.ptr() + r * N;
    double mx = *std::max_element(in, in + N);
    double z = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      o[i] = std::exp(in[i] - mx);
      z += o[i];
    }
    for (std::size_t i = 0; i < N; ++i) o[i] /= z;
  }
  return graph_of(x).push("softmax", {x}, std::move(out),
                          [N, rows](const Tensor& y, const Tensor& go, std::vector<Tensor*>& gi) {
                            Tensor& dx = *gi[0];
                            for (std::size_t r = 0; r < rows; ++r) {
                              const double* yr = y.ptr() + r * N;
                              const double* gr = go.ptr() + r * N;
                              double dot = 0.0;
                              for (std::size_t i = 0; i < N; ++i) dot += yr[i] * gr[i];
                              double* dr = dx.ptr() + r * N;
                              for (std::size_t i = 0; i < N; ++i) dr[i] += yr[i] * (gr[i] - dot);
                            }
                          });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  std::size_t E = xv.shape().back();
  if (gamma.value().size() != E || beta.value().size() != E) {
    throw ShapeError("layer_norm: gamma/beta length must equal last axis " + std::to_string(E));
  }
  std::size_t rows = xv.size() / E;
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(rows);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.ptr() + r * E;
    double mu = 0.0;
    for (std::size_t i = 0; i < E; ++i) mu += in[i];
    mu /= static_cast<double>(E);
    double var = 0.0;
    for (std::size_t i = 0; i < E; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<double>(E);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < E; ++i) {
      double h = (in[i] - mu) * is;
      xhat[r * E + i] = h;
      out[r * E + i] = h * gv[i] + bv[i];
    }
  }
  Graph& g = graph_of(x);
  std::size_t gid = gamma.id();
  return g.push("layer_norm", {x, gamma, beta}, std::move(out),
                [&g, gid, E, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                    const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
                  const Tensor& gv = g.value(gid);
                  std::vector<double> dxhat(E);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* gr = go.ptr() + r * E;
                    const double* hr = xhat.ptr() + r * E;
                    if (gi[1]) {
                      for (std::size_t i = 0; i < E; ++i) (*gi[1])[i] += gr[i] * hr[i];
                    }
                    if (gi[2]) {
                      for (std::size_t i = 0; i < E; ++i) (*gi[2])[i] += gr[i];
                    }
                    if (gi[0]) {
                      double m1 = 0.0, m2 = 0.0;
                      for (std::size_t i = 0; i < E; ++i) {
                        dxhat[i] = gr[i] * gv[i];
                        m1 += dxhat[i];
                        m2 += dxhat[i] * hr[i];
                      }
                      m1 /= static_cast<double>(E);
                      m2 /= static_cast<double>(E);
                      double* dr = gi[0]->ptr() + r * E;
                      for (std::size_t i = 0; i < E; ++i) dr[i] += inv_std[r] * (dxhat[i] - m1 - hr[i] * m2);
                    }
                  }
                });
}

Var linear(Var x, Var w, std::optional<Var> b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank("linear", "weight", wv, 2);
  std::size_t in = wv.dim(1), outd = wv.dim(0);
  if (xv.shape().back() != in) {
    throw ShapeError("linear: input last axis " + std::to_string(xv.shape().back()) + " vs weight " +
                     shape_str(wv.shape()));
  }
  if (b && b->value().size() != outd) {
    throw ShapeError("linear: bias length " + std::to_string(b->value().size()) + " vs out " + std::to_string(outd));
  }
  std::size_t rows = xv.size() / in;
  Shape oshape = xv.shape();
  oshape.back() = outd;
  Tensor out(oshape);
  if (b) {
    const Tensor& bv = b->value();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t o = 0; o < outd; ++o) out[r * outd + o] = bv[o];
    }
  }
  gemm_nt(rows, outd, in, xv.ptr(), wv.ptr(), out.ptr());
  Graph& g = graph_of(x);
  std::size_t xid = x.id(), wid = w.id();
  return g.push("linear", with_optional({x, w}, b), std::move(out),
                [&g, xid, wid, rows, in, outd](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
                  const Tensor& xv = g.value(xid);
                  const Tensor& wv = g.value(wid);
                  if (gi[0]) gemm_nn(rows, in, outd, go.ptr(), wv.ptr(), gi[0]->ptr());
                  if (gi[1]) gemm_tn(outd, in, rows, go.ptr(), xv.ptr(), gi[1]->ptr());
                  if (gi.size() > 2 && gi[2]) {
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t o = 0; o < outd; ++o) (*gi[2])[o] += go[r * outd + o];
                    }
                  }
                });
}

namespace {

// Range of output positions t with 0 <= t*stride + offset < len.
std::pair<std::size_t, std::size_t> valid_range(std::ptrdiff_t offset, std::size_t stride, std::size_t len,
                                                std::size_t out_len) {
  auto s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = offset >= 0 ? 0 : (-offset + s - 1) / s;
  std::ptrdiff_t hi_excl = static_cast<std::ptrdiff_t>(len) - offset;  // need t*s < hi_excl
  std::ptrdiff_t hi = hi_excl <= 0 ? 0 : (hi_excl + s - 1) / s;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out_len));
  if (hi < lo) hi = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace

namespace {

// cols[(c*K + k), t] = src[c, t*s + k - pl], zero outside [0, len).
void im2col(const double* src, std::size_t C, std::size_t len, std::size_t K, std::size_t s, std::ptrdiff_t pl,
            std::size_t out_len, double* cols) {
  std::fill(cols, cols + C * K * out_len, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    const double* row = src + c * len;
    for (std::size_t k = 0; k < K; ++k) {
      std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - pl;
      auto [lo, hi] = valid_range(off, s, len, out_len);
      double* dst = cols + (c * K + k) * out_len;
      for (std::size_t t = lo; t < hi; ++t) dst[t] = row[t * s + off];
    }
  }
}

// Adjoint of im2col: dst[c, t*s + k - pl] += cols[(c*K + k), t].
void col2im(const double* cols, std::size_t C, std::size_t len, std::size_t K, std::size_t s, std::ptrdiff_t pl,
            std::size_t out_len, double* dst) {
  for (std::size_t c = 0; c < C; ++c) {
    double* row = dst + c * len;
    for (std::size_t k = 0; k < K; ++k) {
      std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) - pl;
      auto [lo, hi] = valid_range(off, s, len, out_len);
      const double* src = cols + (c * K + k) * out_len;
      for (std::size_t t = lo; t < hi; ++t) row[t * s + off] += src[t];
    }
  }
}

}  // namespace

Var conv1d(Var x, Var w, std::optional<Var> b, const Conv1dOptions& opt) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank("conv1d", "input", xv, 3);
  require_rank("conv1d", "weight", wv, 3);
  std::size_t B = xv.dim(0), Ci = xv.dim(1), T = xv.dim(2);
  std::size_t Co = wv.dim(0), K = wv.dim(2);
  if (wv.dim(1) != Ci) {
    throw ShapeError("conv1d: input channels " + std::to_string(Ci) + " vs weight " + shape_str(wv.shape()));
  }
  if (b && b->value().size() != Co) throw ShapeError("conv1d: bias length must equal out channels");
  std::size_t To = conv1d_out_len(T, K, opt);
  std::size_t s = opt.stride;
  auto pl = static_cast<std::ptrdiff_t>(opt.pad_left);
  Tensor out({B, Co, To});
  std::vector<double> cols(Ci * K * To);
  for (std::size_t bi = 0; bi < B; ++bi) {
    double* ob = out.ptr() + bi * Co * To;
    if (b) {
      for (std::size_t co = 0; co < Co; ++co) std::fill(ob + co * To, ob + (co + 1) * To, b->value()[co]);
    }
    im2col(xv.ptr() + bi * Ci * T, Ci, T, K, s, pl, To, cols.data());
    gemm_nn(Co, To, Ci * K, wv.ptr(), cols.data(), ob);
  }
  Graph& g = graph_of(x);
  std::size_t xid = x.id(), wid = w.id();
  return g.push("conv1d", with_optional({x, w}, b), std::move(out),
                [&g, xid, wid, B, Ci, T, Co, K, To, s, pl](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
                  const Tensor& xv = g.value(xid);
                  const Tensor& wv = g.value(wid);
                  std::vector<double> cols(Ci * K * To);
                  for (std::size_t bi = 0; bi < B; ++bi) {
                    const double* gb = go.ptr() + bi * Co * To;
                    if (gi.size() > 2 && gi[2]) {
                      for (std::size_t co = 0; co < Co; ++co) {
                        double acc = 0.0;
                        for (std::size_t t = 0; t < To; ++t) acc += gb[co * To + t];
                        (*gi[2])[co] += acc;
                      }
                    }
                    if (gi[1]) {
                      im2col(xv.ptr() + bi * Ci * T, Ci, T, K, s, pl, To, cols.data());
                      gemm_nt(Co, Ci * K, To, gb, cols.data(), gi[1]->ptr());
                    }
                    if (gi[0]) {
                      std::fill(cols.begin(), cols.end(), 0.0);
                      gemm_tn(Ci * K, To, Co, wv.ptr(), gb, cols.data());
                      col2im(cols.data(), Ci, T, K, s, pl, To, gi[0]->ptr() + bi * Ci * T);
                    }
                  }
                });
}

Var conv_transpose1d(Var x, Var w, std::optional<Var> b, const ConvTranspose1dOptions& opt) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank("conv_transpose1d", "input", xv, 3);
  require_rank("conv_transpose1d", "weight", wv, 3);
  std::size_t B = xv.dim(0), Ci = xv.dim(1), Tin = xv.dim(2);
  std::size_t Co = wv.dim(1), K = wv.dim(2);
  if (wv.dim(0) != Ci) {
    throw ShapeError("conv_transpose1d: input channels " + std::to_string(Ci) + " vs weight " + shape_str(wv.shape()));
  }
  if (b && b->value().size() != Co) throw ShapeError("conv_transpose1d: bias length must equal out channels");
  std::size_t To = conv_transpose1d_out_len(Tin, K, opt);
  std::size_t s = opt.stride;
  auto pl = static_cast<std::ptrdiff_t>(opt.pad_left);
  // The adjoint of a strided conv: cols = w^T x, then out[t*s + k - pl] += cols[(co, k), t].
  Tensor out({B, Co, To});
  std::vector<double> cols(Co * K * Tin);
  for (std::size_t bi = 0; bi < B; ++bi) {
    double* ob = out.ptr() + bi * Co * To;
    if (b) {
      for (std::size_t co = 0; co < Co; ++co) std::fill(ob + co * To, ob + (co + 1) * To, b->value()[co]);
    }
    std::fill(cols.begin(), cols.end(), 0.0);
    gemm_tn(Co * K, Tin, Ci, wv.ptr(), xv.ptr() + bi * Ci * Tin, cols.data());
    col2im(cols.data(), Co, To, K, s, pl, Tin, ob);
  }
  Graph& g = graph_of(x);
  std::size_t xid = x.id(), wid = w.id();
  return g.push(
      "conv_transpose1d", with_optional({x, w}, b), std::move(out),
      [&g, xid, wid, B, Ci, Tin, Co, K, To, s, pl](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
        const Tensor& xv = g.value(xid);
        const Tensor& wv = g.value(wid);
        std::vector<double> cols(Co * K * Tin);
        for (std::size_t bi = 0; bi < B; ++bi) {
          const double* gb = go.ptr() + bi * Co * To;
          if (gi.size() > 2 && gi[2]) {
            for (std::size_t co = 0; co < Co; ++co) {
              double acc = 0.0;
              for (std::size_t t = 0; t < To; ++t) acc += gb[co * To + t];
              (*gi[2])[co] += acc;
            }
          }
          im2col(gb, Co, To, K, s, pl, Tin, cols.data());
          if (gi[0]) gemm_nn(Ci, Tin, Co * K, wv.ptr(), cols.data(), gi[0]->ptr() + bi * Ci * Tin);
          if (gi[1]) gemm_nt(Ci, Co * K, Tin, xv.ptr() + bi * Ci * Tin, cols.data(), gi[1]->ptr());
        }
      });
}

Var avg_pool1d(Var x) {
  const Tensor& xv = x.value();
  require_rank("avg_pool1d", "input", xv, 3);
  std::size_t B = xv.dim(0), C = xv.dim(1), T = xv.dim(2);
  if (T < 2) throw ShapeError("avg_pool1d: length " + std::to_string(T) + " shorter than kernel 2");
  std::size_t To = T / 2;
  Tensor out({B, C, To});
  for (std::size_t r = 0; r < B * C; ++r) {
    const double* in = xv.ptr() + r * T;
    double* o = out.ptr() + r * To;
    for (std::size_t t = 0; t < To; ++t) o[t] = 0.5 * (in[2 * t] + in[2 * t + 1]);
  }
  return graph_of(x).push("avg_pool1d", {x}, std::move(out),
                          [B, C, T, To](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
                            for (std::size_t r = 0; r < B * C; ++r) {
                              const double* gr = go.ptr() + r * To;
                              double* d = gi[0]->ptr() + r * T;
                              for (std::size_t t = 0; t < To; ++t) {
                                d[2 * t] += 0.5 * gr[t];
                                d[2 * t + 1] += 0.5 * gr[t];
                              }
                            }
                          });
}

namespace {

struct AttnDims {
  std::size_t B, L, E, H, dh;
};

AttnDims attention_dims(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("attention: q, k, v must share a [B, L, E] shape, got " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  std::size_t E = q.dim(2);
  if (heads == 0 || E % heads != 0) {
    throw ShapeError("attention: embed dim " + std::to_string(E) + " not divisible by " + std::to_string(heads) +
                     " heads");
  }
  return {q.dim(0), q.dim(1), E, heads, E / heads};
}

void check_bias(const AttnDims& d, const Tensor& bias) {
  if (bias.shape() != Shape{d.H, d.L, d.L}) {
    throw ShapeError("attention: logit bias must be " + shape_str({d.H, d.L, d.L}) + ", got " +
                     shape_str(bias.shape()));
  }
}

// Probabilities for one (b, h): p[L, L].
void attention_probs(const AttnDims& d, const double* q, const double* k, const double* bias, std::size_t b,
                     std::size_t h, double* p) {
  double sc = 1.0 / std::sqrt(static_cast<double>(d.dh));
  for (std::size_t i = 0; i < d.L; ++i) {
    const double* qi = q + (b * d.L + i) * d.E + h * d.dh;
    double* pr = p + i * d.L;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < d.L; ++j) {
      const double* kj = k + (b * d.L + j) * d.E + h * d.dh;
      double s = 0.0;
      for (std::size_t e = 0; e < d.dh; ++e) s += qi[e] * kj[e];
      s *= sc;
      if (bias) s += bias[(h * d.L + i) * d.L + j];
      pr[j] = s;
      mx = std::max(mx, s);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < d.L; ++j) {
      pr[j] = std::exp(pr[j] - mx);
      z += pr[j];
    }
    for (std::size_t j = 0; j < d.L; ++j) pr[j] /= z;
  }
}

}  // namespace

Var attention(Var q, Var k, Var v, std::size_t heads, std::optional<Var> logit_bias) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  AttnDims d = attention_dims(qv, kv, vv, heads);
  const double* bias = nullptr;
  if (logit_bias) {
    check_bias(d, logit_bias->value());
    bias = logit_bias->value().ptr();
  }
  Tensor probs({d.B, d.H, d.L, d.L});
  Tensor out({d.B, d.L, d.E});
  for (std::size_t b = 0; b < d.B; ++b) {
    for (std::size_t h = 0; h < d.H; ++h) {
      double* p = probs.ptr() + (b * d.H + h) * d.L * d.L;
      attention_probs(d, qv.ptr(), kv.ptr(), bias, b, h, p);
      for (std::size_t i = 0; i < d.L; ++i) {
        double* oi = out.ptr() + (b * d.L + i) * d.E + h * d.dh;
        for (std::size_t j = 0; j < d.L; ++j) {
          double pij = p[i * d.L + j];
          const double* vj = vv.ptr() + (b * d.L + j) * d.E + h * d.dh;
          for (std::size_t e = 0; e < d.dh; ++e) oi[e] += pij * vj[e];
        }
      }
    }
  }
  Graph& g = graph_of(q);
  std::size_t qid = q.id(), kid = k.id(), vid = v.id();
  return g.push(
      "attention", with_optional({q, k, v}, logit_bias), std::move(out),
      [&g, qid, kid, vid, d, probs = std::move(probs)](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
        const Tensor& qv = g.value(qid);
        const Tensor& kv = g.value(kid);
        const Tensor& vv = g.value(vid);
        double sc = 1.0 / std::sqrt(static_cast<double>(d.dh));
        std::vector<double> dp(d.L * d.L);
        for (std::size_t b = 0; b < d.B; ++b) {
          for (std::size_t h = 0; h < d.H; ++h) {
            const double* p = probs.ptr() + (b * d.H + h) * d.L * d.L;
            // dP = dO V^T, dV = P^T dO
            for (std::size_t i = 0; i < d.L; ++i) {
              const double* goi = go.ptr() + (b * d.L + i) * d.E + h * d.dh;
              for (std::size_t j = 0; j < d.L; ++j) {
                const double* vj = vv.ptr() + (b * d.L + j) * d.E + h * d.dh;
                double s = 0.0;
                for (std::size_t e = 0; e < d.dh; ++e) s += goi[e] * vj[e];
                dp[i * d.L + j] = s;
                if (gi[2]) {
                  double* dvj = gi[2]->ptr() + (b * d.L + j) * d.E + h * d.dh;
                  double pij = p[i * d.L + j];
                  for (std::size_t e = 0; e < d.dh; ++e) dvj[e] += pij * goi[e];
                }
              }
            }
            // dS = P * (dP - rowsum(dP * P))
            for (std::size_t i = 0; i < d.L; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < d.L; ++j) dot += dp[i * d.L + j] * p[i * d.L + j];
              for (std::size_t j = 0; j < d.L; ++j) dp[i * d.L + j] = p[i * d.L + j] * (dp[i * d.L + j] - dot);
            }
            if (gi.size() > 3 && gi[3]) {
              double* db = gi[3]->ptr() + h * d.L * d.L;
              for (std::size_t i = 0; i < d.L * d.L; ++i) db[i] += dp[i];
            }
            for (std::size_t i = 0; i < d.L; ++i) {
              const double* qi = qv.ptr() + (b * d.L + i) * d.E + h * d.dh;
              double* dqi = gi[0] ? gi[0]->ptr() + (b * d.L + i) * d.E + h * d.dh : nullptr;
              for (std::size_t j = 0; j < d.L; ++j) {
                double ds = dp[i * d.L + j] * sc;
                const double* kj = kv.ptr() + (b * d.L + j) * d.E + h * d.dh;
                if (dqi) {
                  for (std::size_t e = 0; e < d.dh; ++e) dqi[e] += ds * kj[e];
                }
                if (gi[1]) {
                  double* dkj = gi[1]->ptr() + (b * d.L + j) * d.E + h * d.dh;
                  for (std::size_t e = 0; e < d.dh; ++e) dkj[e] += ds * qi[e];
                }
              }
            }
          }
        }
      });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return graph_of(x).push("reshape", {x}, std::move(out), [](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
    for (std::size_t i = 0; i < go.size(); ++i) (*gi[0])[i] += go[i];
  });
}

Var transpose(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 && xv.rank() != 3) throw ShapeError("transpose: expects rank 2 or 3, got " + shape_str(xv.shape()));
  std::size_t B = xv.rank() == 3 ? xv.dim(0) : 1;
  std::size_t R = xv.dim(xv.rank() - 2), C = xv.dim(xv.rank() - 1);
  Shape oshape = xv.shape();
  std::swap(oshape[oshape.size() - 1], oshape[oshape.size() - 2]);
  Tensor out(oshape);
  for (std::size_t b = 0; b < B; ++b) {
    const double* in = xv.ptr() + b * R * C;
    double* o = out.ptr() + b * R * C;
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t c = 0; c < C; ++c) o[c * R + r] = in[r * C + c];
    }
  }
  return graph_of(x).push("transpose", {x}, std::move(out),
                          [B, R, C](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
                            for (std::size_t b = 0; b < B; ++b) {
                              const double* g = go.ptr() + b * R * C;
                              double* d = gi[0]->ptr() + b * R * C;
                              for (std::size_t r = 0; r < R; ++r) {
                                for (std::size_t c = 0; c < C; ++c) d[r * C + c] += g[c * R + r];
                              }
                            }
                          });
}

Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail) throw ShapeError("concat: trailing extents differ: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    rows += p.shape()[0];
    sizes.push_back(p.value().size());
  }
  Shape oshape = parts[0].shape();
  oshape[0] = rows;
  Tensor out(oshape);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.ptr() + off);
    off += p.value().size();
  }
  return graph_of(parts[0]).push("concat", parts, std::move(out),
                                 [sizes](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
                                   std::size_t off = 0;
                                   for (std::size_t k = 0; k < sizes.size(); ++k) {
                                     if (gi[k]) {
                                       for (std::size_t i = 0; i < sizes[k]; ++i) (*gi[k])[i] += go[off + i];
                                     }
                                     off += sizes[k];
                                   }
                                 });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0 || begin >= end || end > xv.dim(0)) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " +
                     shape_str(xv.shape()));
  }
  std::size_t row = xv.size() / xv.dim(0);
  Shape oshape = xv.shape();
  oshape[0] = end - begin;
  Tensor out(oshape, std::vector<double>(xv.ptr() + begin * row, xv.ptr() + end * row));
  return graph_of(x).push("slice_rows", {x}, std::move(out),
                          [begin, row](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
                            double* d = gi[0]->ptr() + begin * row;
                            for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i];
                          });
}

Var zero_mask(Var x, const std::vector<std::uint8_t>& keep) {
  const Tensor& xv = x.value();
  std::size_t D = xv.shape().back();
  std::size_t rows = xv.size() / D;
  if (keep.size() != rows) {
    throw ShapeError("zero_mask: " + std::to_string(keep.size()) + " flags for " + std::to_string(rows) + " rows of " +
                     shape_str(xv.shape()));
  }
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    if (keep[r]) std::copy(xv.ptr() + r * D, xv.ptr() + (r + 1) * D, out.ptr() + r * D);
  }
  return graph_of(x).push("zero_mask", {x}, std::move(out),
                          [keep, D, rows](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
                            for (std::size_t r = 0; r < rows; ++r) {
                              if (!keep[r]) continue;
                              for (std::size_t i = r * D; i < (r + 1) * D; ++i) (*gi[0])[i] += go[i];
                            }
                          });
}

Var gather_rows(Var table, const std::vector<std::size_t>& indices) {
  const Tensor& tv = table.value();
  require_rank("gather_rows", "table", tv, 2);
  if (indices.empty()) throw ShapeError("gather_rows: empty index list");
  std::size_t K = tv.dim(0), D = tv.dim(1);
  Tensor out({indices.size(), D});
  for (std::size_t n = 0; n < indices.size(); ++n) {
    if (indices[n] >= K) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[n]) + " outside table of " + std::to_string(K));
    }
    std::copy(tv.ptr() + indices[n] * D, tv.ptr() + (indices[n] + 1) * D, out.ptr() + n * D);
  }
  return graph_of(table).push("gather_rows", {table}, std::move(out),
                              [indices, D](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
                                for (std::size_t n = 0; n < indices.size(); ++n) {
                                  double* d = gi[0]->ptr() + indices[n] * D;
                                  for (std::size_t i = 0; i < D; ++i) d[i] += go[n * D + i];
                                }
                              });
}

Var stop_gradient(Var x) {
  return graph_of(x).push("stop_gradient", {x}, x.value(), [](const Tensor&, const Tensor&, std::vector<Tensor*>&) {});
}

Var straight_through(Var latent, Var quantized) {
  require_same_shape("straight_through", latent.value(), quantized.value());
  return graph_of(latent).push("straight_through", {latent, quantized}, quantized.value(),
                               [](const Tensor&, const Tensor& go, std::vector<Tensor*>& gi) {
                                 if (gi[0]) gi[0]->accumulate(go);
                               });
}

}  // namespace ops

Tensor attention_weights(const Tensor& q, const Tensor& k, std::size_t heads, const Tensor* logit_bias) {
  ops::AttnDims d = ops::attention_dims(q, k, k, heads);
  if (logit_bias) ops::check_bias(d, *logit_bias);
  Tensor probs({d.B, d.H, d.L, d.L});
  for (std::size_t b = 0; b < d.B; ++b) {
    for (std::size_t h = 0; h < d.H; ++h) {
      ops::attention_probs(d, q.ptr(), k.ptr(), logit_bias ? logit_bias->ptr() : nullptr, b, h,
                           probs.ptr() + (b * d.H + h) * d.L * d.L);
    }
  }
  return probs;
}

}  // namespace h2dilr
