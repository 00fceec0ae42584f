#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "rff/nn/tensor.hpp"

namespace rff::nn {

template <typename S>
void check_finite(const Tensor<S>& t, const char* where) {
  if (!t.flat().allFinite())
    throw NumericError(std::string("non-finite values in ") + where);
}

// ---------------------------------------------------------------------------
// elementwise / structural
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw UsageError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<S> y = make_op<S>(
      a.shape(), {a, b},
      [](Node<S>& self) {
        for (int i = 0; i < 2; ++i) {
          auto& p = self.parents[i];
          if (!p->requires_grad) continue;
          p->ensure_grad();
          p->grad += self.grad;
        }
      },
      "add");
  y.flat() = a.flat() + b.flat();
  return y;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  Tensor<S> y = make_op<S>(
      a.shape(), {a},
      [factor](Node<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        p->grad += factor * self.grad;
      },
      "scale");
  y.flat() = factor * a.flat();
  return y;
}

/// Scales each leading-axis row by its own factor (not differentiated
/// through the factors). Used for per-sample stochastic depth.
template <typename S>
Tensor<S> scale_rows(const Tensor<S>& a, std::vector<S> factors) {
  const int rows = a.dim(0);
  if (static_cast<int>(factors.size()) != rows)
    throw UsageError("scale_rows: factor count does not match leading dim");
  const long stride = a.size() / rows;
  Tensor<S> y = make_op<S>(
      a.shape(), {a},
      [factors, stride, rows](Node<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int r = 0; r < rows; ++r)
          p->grad.segment(r * stride, stride) +=
              factors[static_cast<size_t>(r)] * self.grad.segment(r * stride, stride);
      },
      "scale_rows");
  for (int r = 0; r < rows; ++r)
    y.flat().segment(r * stride, stride) =
        factors[static_cast<size_t>(r)] * a.flat().segment(r * stride, stride);
  return y;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw UsageError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor<S> y = make_op<S>(
      std::move(shape), {a},
      [](Node<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        p->grad += self.grad;
      },
      "reshape");
  y.flat() = a.flat();
  return y;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  Tensor<S> y = make_op<S>(
      a.shape(), {a},
      [](Node<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        p->grad.array() +=
            self.grad.array() * (self.value.array() > S(0)).template cast<S>();
      },
      "relu");
  y.flat() = a.flat().cwiseMax(S(0));
  return y;
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  // exact form: x * Phi(x)
  Tensor<S> y = make_op<S>(
      a.shape(), {a},
      [](Node<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        const S inv_sqrt2 = S(0.7071067811865475244);
        const S inv_sqrt2pi = S(0.3989422804014326779);
        for (long i = 0; i < p->grad.size(); ++i) {
          S x = p->value[i];
          S phi = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
          S pdf = inv_sqrt2pi * std::exp(S(-0.5) * x * x);
          p->grad[i] += self.grad[i] * (phi + x * pdf);
        }
      },
      "gelu");
  const S inv_sqrt2 = S(0.7071067811865475244);
  for (long i = 0; i < a.size(); ++i) {
    S x = a.data()[i];
    y.data()[i] = S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2));
  }
  return y;
}

template <typename S>
Tensor<S> dropout(const Tensor<S>& a, double rate, bool train, Rng* rng) {
  if (!train || rate <= 0.0) return a;  // exact identity in eval mode
  if (rng == nullptr) throw UsageError("dropout: rng required in train mode");
  auto mask = std::make_shared<std::vector<S>>(static_cast<size_t>(a.size()));
  const S keep_scale = S(1.0 / (1.0 - rate));
  for (auto& m : *mask) m = rng->uniform() < rate ? S(0) : keep_scale;
  Tensor<S> y = make_op<S>(
      a.shape(), {a},
      [mask](Node<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (long i = 0; i < p->grad.size(); ++i)
          p->grad[i] += self.grad[i] * (*mask)[static_cast<size_t>(i)];
      },
      "dropout");
  for (long i = 0; i < a.size(); ++i)
    y.data()[i] = a.data()[i] * (*mask)[static_cast<size_t>(i)];
  return y;
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  Tensor<S> y = make_op<S>(
      {1}, {a},
      [](Node<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        p->grad.array() += self.grad[0];
      },
      "sum");
  y.data()[0] = a.flat().sum();
  return y;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  const S inv_n = S(1) / S(a.size());
  Tensor<S> y = make_op<S>(
      {1}, {a},
      [inv_n](Node<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        p->grad.array() += self.grad[0] * inv_n;
      },
      "mean");
  y.data()[0] = a.flat().sum() * inv_n;
  return y;
}

/// Mean absolute error over all elements.
template <typename S>
Tensor<S> l1_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  if (pred.shape() != target.shape())
    throw UsageError("l1_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  const S inv_n = S(1) / S(pred.size());
  Tensor<S> y = make_op<S>(
      {1}, {pred, target},
      [inv_n](Node<S>& self) {
        auto& a = self.parents[0];
        auto& b = self.parents[1];
        const S g = self.grad[0] * inv_n;
        for (int side = 0; side < 2; ++side) {
          auto& p = self.parents[side];
          if (!p->requires_grad) continue;
          p->ensure_grad();
          const S sgn = side == 0 ? S(1) : S(-1);
          for (long i = 0; i < p->grad.size(); ++i) {
            S d = a->value[i] - b->value[i];
            p->grad[i] += sgn * g * (d > S(0) ? S(1) : (d < S(0) ? S(-1) : S(0)));
          }
        }
      },
      "l1_loss");
  y.data()[0] = (pred.flat() - target.flat()).array().abs().sum() * inv_n;
  return y;
}

/// Mean over the batch of -log softmax(logits)[label], stabilized by
/// max-subtraction.
template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2)
    throw UsageError("softmax_cross_entropy: logits must be [B,C], got " +
                     shape_str(logits.shape()));
  const int batch = logits.dim(0), classes = logits.dim(1);
  if (static_cast<int>(labels.size()) != batch)
    throw UsageError("softmax_cross_entropy: label count " + std::to_string(labels.size()) +
                     " vs batch " + std::to_string(batch));
  for (int b = 0; b < batch; ++b)
    if (labels[static_cast<size_t>(b)] < 0 || labels[static_cast<size_t>(b)] >= classes)
      throw UsageError("softmax_cross_entropy: label " +
                       std::to_string(labels[static_cast<size_t>(b)]) + " out of range [0," +
                       std::to_string(classes) + ")");
  auto probs = std::make_shared<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      batch, classes);
  auto lab = std::make_shared<std::vector<int>>(labels);
  Tensor<S> y = make_op<S>(
      {1}, {logits},
      [probs, lab, batch, classes](Node<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        const S g = self.grad[0] / S(batch);
        Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> dlogits(
            p->grad.data(), batch, classes);
        dlogits += g * (*probs);
        for (int b = 0; b < batch; ++b) dlogits(b, (*lab)[static_cast<size_t>(b)]) -= g;
      },
      "softmax_cross_entropy");
  auto x = logits.as_matrix(classes);
  S loss = S(0);
  for (int b = 0; b < batch; ++b) {
    S m = x.row(b).maxCoeff();
    Eigen::Array<S, Eigen::Dynamic, 1> e = (x.row(b).array() - m).exp().transpose();
    S z = e.sum();
    probs->row(b) = (e / z).transpose();
    loss += std::log(z) + m - x(b, labels[static_cast<size_t>(b)]);
  }
  y.data()[0] = loss / S(batch);
  return y;
}

// ---------------------------------------------------------------------------
// linear algebra layers
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw UsageError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> y = make_op<S>(
      {m, n}, {a, b},
      [m, k, n](Node<S>& self) {
        using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        Eigen::Map<const Mat> A(pa->value.data(), m, k), B(pb->value.data(), k, n),
            dY(self.grad.data(), m, n);
        if (pa->requires_grad) {
          pa->ensure_grad();
          Eigen::Map<Mat>(pa->grad.data(), m, k).noalias() += dY * B.transpose();
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          Eigen::Map<Mat>(pb->grad.data(), k, n).noalias() += A.transpose() * dY;
        }
      },
      "matmul");
  y.as_matrix(n).noalias() = a.as_matrix(k) * b.as_matrix(n);
  return y;
}

/// y = x W + b over the last axis. x: [..., D_in], W: [D_in, D_out],
/// b: [D_out] (pass an invalid tensor for no bias).
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b = {}) {
  if (w.rank() != 2)
    throw UsageError("linear: weight must be rank 2, got " + shape_str(w.shape()));
  const int d_in = w.dim(0), d_out = w.dim(1);
  if (x.rank() < 1 || x.dim(x.rank() - 1) != d_in)
    throw UsageError("linear: input " + shape_str(x.shape()) + " does not conform to weight " +
                     shape_str(w.shape()));
  if (b.valid() && (b.rank() != 1 || b.dim(0) != d_out))
    throw UsageError("linear: bias " + shape_str(b.shape()) + " does not conform to weight " +
                     shape_str(w.shape()));
  Shape out_shape = x.shape();
  out_shape.back() = d_out;
  const long rows = x.size() / d_in;
  const bool has_bias = b.valid();
  Tensor<S> y = make_op<S>(
      out_shape, has_bias ? std::vector<Tensor<S>>{x, w, b} : std::vector<Tensor<S>>{x, w},
      [rows, d_in, d_out, has_bias](Node<S>& self) {
        using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        Eigen::Map<const Mat> X(px->value.data(), rows, d_in), W(pw->value.data(), d_in, d_out),
            dY(self.grad.data(), rows, d_out);
        if (px->requires_grad) {
          px->ensure_grad();
          Eigen::Map<Mat>(px->grad.data(), rows, d_in).noalias() += dY * W.transpose();
        }
        if (pw->requires_grad) {
          pw->ensure_grad();
          Eigen::Map<Mat>(pw->grad.data(), d_in, d_out).noalias() += X.transpose() * dY;
        }
        if (has_bias && self.parents[2]->requires_grad) {
          auto& pb = self.parents[2];
          pb->ensure_grad();
          Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(pb->grad.data(), d_out) +=
              dY.colwise().sum().transpose();
        }
      },
      "linear");
  auto Y = y.as_matrix(d_out);
  Y.noalias() = x.as_matrix(d_in) * w.as_matrix(d_out);
  if (has_bias) Y.rowwise() += b.flat().transpose();
  return y;
}

// ---------------------------------------------------------------------------
// convolution family
// ---------------------------------------------------------------------------

namespace detail {

/// Gathers kxk patches of one [C,H,W] plane into columns. Row index is
/// (c*k+ki)*k+kj, column index is oy*out_w+ox. Out-of-bounds reads are 0.
template <typename S>
void im2col(const S* x, int channels, int h, int w, int k, int stride, int pad, int out_h,
            int out_w, Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& cols) {
  const int patch = channels * k * k;
  cols.resize(patch, out_h * out_w);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      S* col = cols.data() + static_cast<long>(oy * out_w + ox) * patch;
      int r = 0;
      for (int c = 0; c < channels; ++c) {
        const S* plane = x + static_cast<long>(c) * h * w;
        for (int ki = 0; ki < k; ++ki) {
          const int iy = oy * stride + ki - pad;
          for (int kj = 0; kj < k; ++kj, ++r) {
            const int ix = ox * stride + kj - pad;
            col[r] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                         ? plane[static_cast<long>(iy) * w + ix]
                         : S(0);
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-adds columns back into the [C,H,W] plane.
template <typename S>
void col2im_add(const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& cols, int channels, int h,
                int w, int k, int stride, int pad, int out_h, int out_w, S* dx) {
  const int patch = channels * k * k;
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const S* col = cols.data() + static_cast<long>(oy * out_w + ox) * patch;
      int r = 0;
      for (int c = 0; c < channels; ++c) {
        S* plane = dx + static_cast<long>(c) * h * w;
        for (int ki = 0; ki < k; ++ki) {
          const int iy = oy * stride + ki - pad;
          for (int kj = 0; kj < k; ++kj, ++r) {
            const int ix = ox * stride + kj - pad;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w)
              plane[static_cast<long>(iy) * w + ix] += col[r];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation of x [B,C_in,H,W] with kernel [C_out,C_in,k,k].
/// fuse_relu applies max(0, .) to the output, with the matching backward.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias = {},
                 int stride = 1, int padding = 0, bool fuse_relu = false) {
  if (x.rank() != 4 || kernel.rank() != 4)
    throw UsageError("conv2d: expected x [B,C,H,W] and kernel [Co,Ci,k,k], got " +
                     shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
  const int batch = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int c_out = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != c_in || kernel.dim(3) != k)
    throw UsageError("conv2d: kernel " + shape_str(kernel.shape()) + " does not match input " +
                     shape_str(x.shape()));
  if (k % 2 == 0) throw UsageError("conv2d: kernel size must be odd, got " + std::to_string(k));
  if (k > h + 2 * padding || k > w + 2 * padding)
    throw UsageError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(h + 2 * padding) + "x" + std::to_string(w + 2 * padding));
  const int out_h = (h + 2 * padding - k) / stride + 1;
  const int out_w = (w + 2 * padding - k) / stride + 1;
  const bool has_bias = bias.valid();
  const long in_plane = static_cast<long>(c_in) * h * w;
  const long out_plane = static_cast<long>(c_out) * out_h * out_w;
  const int patch = c_in * k * k;

  Tensor<S> y = make_op<S>(
      {batch, c_out, out_h, out_w},
      has_bias ? std::vector<Tensor<S>>{x, kernel, bias} : std::vector<Tensor<S>>{x, kernel},
      [=](Node<S>& self) {
        using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
        using MatR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        auto& px = self.parents[0];
        auto& pk = self.parents[1];
        Eigen::Map<const MatR> W(pk->value.data(), c_out, patch);
        const int np = out_h * out_w;
        Mat cols, dcols;
        MatR dY(c_out, np);
        if (px->requires_grad) px->ensure_grad();
        if (pk->requires_grad) pk->ensure_grad();
        if (has_bias && self.parents[2]->requires_grad) self.parents[2]->ensure_grad();
        for (int b = 0; b < batch; ++b) {
          Eigen::Map<const MatR> g(self.grad.data() + b * out_plane, c_out, np);
          if (fuse_relu) {
            Eigen::Map<const MatR> out(self.value.data() + b * out_plane, c_out, np);
            dY = g.array() * (out.array() > S(0)).template cast<S>();
          } else {
            dY = g;
          }
          if (has_bias && self.parents[2]->requires_grad) {
            Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(self.parents[2]->grad.data(),
                                                            c_out) += dY.rowwise().sum();
          }
          if (pk->requires_grad) {
            detail::im2col(px->value.data() + b * in_plane, c_in, h, w, k, stride, padding, out_h,
                           out_w, cols);
            Eigen::Map<MatR>(pk->grad.data(), c_out, patch).noalias() += dY * cols.transpose();
          }
          if (px->requires_grad) {
            dcols.noalias() = W.transpose() * dY;
            detail::col2im_add(dcols, c_in, h, w, k, stride, padding, out_h, out_w,
                               px->grad.data() + b * in_plane);
          }
        }
      },
      fuse_relu ? "conv2d_relu" : "conv2d");

  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  using MatR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const MatR> W(kernel.data(), c_out, patch);
  Mat cols;
  for (int b = 0; b < batch; ++b) {
    detail::im2col(x.data() + b * in_plane, c_in, h, w, k, stride, padding, out_h, out_w, cols);
    Eigen::Map<MatR> out(y.data() + b * out_plane, c_out, out_h * out_w);
    out.noalias() = W * cols;
    if (has_bias) out.colwise() += bias.flat();
    if (fuse_relu) out = out.cwiseMax(S(0));
  }
  return y;
}

/// Transposed convolution (stride-s upsampling), kernel [C_in,C_out,k,k],
/// no padding: H_out = (H_in-1)*stride + k.
template <typename S>
Tensor<S> conv_transpose2d(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias = {},
                           int stride = 1, bool fuse_relu = false) {
  if (x.rank() != 4 || kernel.rank() != 4)
    throw UsageError("conv_transpose2d: expected x [B,C,H,W] and kernel [Ci,Co,k,k]");
  const int batch = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int c_out = kernel.dim(1), k = kernel.dim(2);
  if (kernel.dim(0) != c_in || kernel.dim(3) != k)
    throw UsageError("conv_transpose2d: kernel " + shape_str(kernel.shape()) +
                     " does not match input " + shape_str(x.shape()));
  const int out_h = (h - 1) * stride + k;
  const int out_w = (w - 1) * stride + k;
  const bool has_bias = bias.valid();
  const long in_plane = static_cast<long>(c_in) * h * w;
  const long out_plane = static_cast<long>(c_out) * out_h * out_w;
  const int patch = c_out * k * k;

  // Forward is the adjoint of a stride-s conv over the *output* grid:
  // cols = W^T x, out = col2im(cols). Backward therefore uses im2col(dout).
  Tensor<S> y = make_op<S>(
      {batch, c_out, out_h, out_w},
      has_bias ? std::vector<Tensor<S>>{x, kernel, bias} : std::vector<Tensor<S>>{x, kernel},
      [=](Node<S>& self) {
        using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
        using MatR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        auto& px = self.parents[0];
        auto& pk = self.parents[1];
        Eigen::Map<const MatR> W(pk->value.data(), c_in, patch);
        const int np = h * w;
        Mat dcols;
        Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> dY_masked;
        if (px->requires_grad) px->ensure_grad();
        if (pk->requires_grad) pk->ensure_grad();
        if (has_bias && self.parents[2]->requires_grad) self.parents[2]->ensure_grad();
        for (int b = 0; b < batch; ++b) {
          const S* dy_raw = self.grad.data() + b * out_plane;
          const S* dy = dy_raw;
          if (fuse_relu) {
            Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> g(dy_raw, out_plane);
            Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> out(
                self.value.data() + b * out_plane, out_plane);
            dY_masked = (g.array() * (out.array() > S(0)).template cast<S>()).matrix();
            dy = dY_masked.data();
          }
          if (has_bias && self.parents[2]->requires_grad) {
            Eigen::Map<const MatR> dyp(dy, c_out, out_h * out_w);
            Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(self.parents[2]->grad.data(),
                                                            c_out) += dyp.rowwise().sum();
          }
          detail::im2col(dy, c_out, out_h, out_w, k, stride, 0, h, w, dcols);
          if (px->requires_grad) {
            Eigen::Map<MatR>(px->grad.data() + b * in_plane, c_in, np).noalias() += W * dcols;
          }
          if (pk->requires_grad) {
            Eigen::Map<const MatR> X(px->value.data() + b * in_plane, c_in, np);
            Eigen::Map<MatR>(pk->grad.data(), c_in, patch).noalias() += X * dcols.transpose();
          }
        }
      },
      fuse_relu ? "conv_transpose2d_relu" : "conv_transpose2d");

  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  using MatR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const MatR> W(kernel.data(), c_in, patch);
  Mat cols;
  for (int b = 0; b < batch; ++b) {
    Eigen::Map<const MatR> X(x.data() + b * in_plane, c_in, h * w);
    cols.noalias() = W.transpose() * X;
    S* out = y.data() + b * out_plane;
    std::fill(out, out + out_plane, S(0));
    detail::col2im_add(cols, c_out, out_h, out_w, k, stride, 0, h, w, out);
    Eigen::Map<MatR> om(out, c_out, out_h * out_w);
    if (has_bias) om.colwise() += bias.flat();
    if (fuse_relu) om = om.cwiseMax(S(0));
  }
  return y;
}

/// Non-overlapping max pooling; gradient routes to the first occurrence of
/// each window maximum.
template <typename S>
Tensor<S> max_pool2d(const Tensor<S>& x, int window = 2, int stride = 2) {
  if (x.rank() != 4)
    throw UsageError("max_pool2d: expected [B,C,H,W], got " + shape_str(x.shape()));
  if (window != stride)
    throw UsageError("max_pool2d: only window == stride supported");
  const int batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % stride != 0 || w % stride != 0)
    throw UsageError("max_pool2d: dims " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by stride " + std::to_string(stride));
  const int out_h = h / stride, out_w = w / stride;
  auto argmax = std::make_shared<std::vector<long>>(
      static_cast<size_t>(batch) * c * out_h * out_w);
  Tensor<S> y = make_op<S>(
      {batch, c, out_h, out_w}, {x},
      [argmax](Node<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (long o = 0; o < self.grad.size(); ++o)
          p->grad[(*argmax)[static_cast<size_t>(o)]] += self.grad[o];
      },
      "max_pool2d");
  long o = 0;
  for (int bc = 0; bc < batch * c; ++bc) {
    const S* plane = x.data() + static_cast<long>(bc) * h * w;
    const long base = static_cast<long>(bc) * h * w;
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox, ++o) {
        S best = plane[static_cast<long>(oy * stride) * w + ox * stride];
        long best_idx = base + static_cast<long>(oy * stride) * w + ox * stride;
        for (int ki = 0; ki < window; ++ki)
          for (int kj = 0; kj < window; ++kj) {
            long idx = base + static_cast<long>(oy * stride + ki) * w + ox * stride + kj;
            S v = plane[static_cast<long>(oy * stride + ki) * w + ox * stride + kj];
            if (v > best) {
              best = v;
              best_idx = idx;
            }
          }
        y.data()[o] = best;
        (*argmax)[static_cast<size_t>(o)] = best_idx;
      }
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

/// Normalizes the last axis to zero mean / unit variance (biased variance),
/// then applies the affine gain and bias.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     double eps = 1e-5) {
  if (gain.rank() != 1 || bias.rank() != 1)
    throw UsageError("layer_norm: gain/bias must be rank 1");
  const int d = gain.dim(0);
  if (bias.dim(0) != d || x.dim(x.rank() - 1) != d)
    throw UsageError("layer_norm: shapes " + shape_str(x.shape()) + ", " +
                     shape_str(gain.shape()) + ", " + shape_str(bias.shape()) +
                     " do not conform");
  const long rows = x.size() / d;
  auto mu = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
  auto rstd = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
  Tensor<S> y = make_op<S>(
      x.shape(), {x, gain, bias},
      [mu, rstd, rows, d](Node<S>& self) {
        using RowVec = Eigen::Array<S, 1, Eigen::Dynamic>;
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> X(
            px->value.data(), rows, d),
            dY(self.grad.data(), rows, d);
        Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> g(pg->value.data(), d);
        if (px->requires_grad) px->ensure_grad();
        if (pg->requires_grad) pg->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        for (long r = 0; r < rows; ++r) {
          RowVec xhat = (X.row(r).array() - (*mu)[static_cast<size_t>(r)]) *
                        (*rstd)[static_cast<size_t>(r)];
          RowVec dy = dY.row(r).array();
          if (pg->requires_grad)
            Eigen::Map<Eigen::Array<S, 1, Eigen::Dynamic>>(pg->grad.data(), d) += dy * xhat;
          if (pb->requires_grad)
            Eigen::Map<Eigen::Array<S, 1, Eigen::Dynamic>>(pb->grad.data(), d) += dy;
          if (px->requires_grad) {
            RowVec dxhat = dy * g.transpose().array();
            S m1 = dxhat.mean();
            S m2 = (dxhat * xhat).mean();
            Eigen::Map<Eigen::Array<S, 1, Eigen::Dynamic>>(px->grad.data() + r * d, d) +=
                (*rstd)[static_cast<size_t>(r)] * (dxhat - m1 - xhat * m2);
          }
        }
      },
      "layer_norm");
  auto X = x.as_matrix(d);
  auto Y = y.as_matrix(d);
  for (long r = 0; r < rows; ++r) {
    S m = X.row(r).mean();
    S var = (X.row(r).array() - m).square().mean();
    S rs = S(1) / std::sqrt(var + static_cast<S>(eps));
    (*mu)[static_cast<size_t>(r)] = m;
    (*rstd)[static_cast<size_t>(r)] = rs;
    Y.row(r).array() =
        ((X.row(r).array() - m) * rs) * gain.flat().transpose().array() +
        bias.flat().transpose().array();
  }
  return y;
}

// ---------------------------------------------------------------------------
// token utilities
// ---------------------------------------------------------------------------

/// Builds a [B,T,D] token tensor from per-slot inputs. Each slot is either
/// [B,D] (per-sample embedding) or [D] (shared token broadcast over the
/// batch, e.g. CLS or mask token). Positional embeddings [T,D] are added by
/// slot index when provided.
template <typename S>
Tensor<S> assemble_tokens(const std::vector<Tensor<S>>& slots, const Tensor<S>& pos,
                          int batch) {
  const int t_len = static_cast<int>(slots.size());
  if (t_len == 0) throw UsageError("assemble_tokens: no slots");
  int d = -1;
  for (auto& s : slots) {
    int sd = s.dim(s.rank() - 1);
    if (d < 0) d = sd;
    if (sd != d) throw UsageError("assemble_tokens: slot width mismatch");
    if (s.rank() == 2 && s.dim(0) != batch)
      throw UsageError("assemble_tokens: slot batch mismatch");
  }
  if (pos.valid() && (pos.rank() != 2 || pos.dim(0) != t_len || pos.dim(1) != d))
    throw UsageError("assemble_tokens: positional table " + shape_str(pos.shape()) +
                     " does not match " + std::to_string(t_len) + " slots of width " +
                     std::to_string(d));
  std::vector<Tensor<S>> parents = slots;
  const bool has_pos = pos.valid();
  if (has_pos) parents.push_back(pos);
  std::vector<char> broadcast(static_cast<size_t>(t_len));
  for (int t = 0; t < t_len; ++t) broadcast[static_cast<size_t>(t)] = slots[t].rank() == 1;

  Tensor<S> y = make_op<S>(
      {batch, t_len, d}, parents,
      [t_len, d, batch, has_pos, broadcast](Node<S>& self) {
        using MatR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        Eigen::Map<const MatR> dY(self.grad.data(), static_cast<long>(batch) * t_len, d);
        for (int t = 0; t < t_len; ++t) {
          auto& p = self.parents[static_cast<size_t>(t)];
          if (!p->requires_grad) continue;
          p->ensure_grad();
          if (broadcast[static_cast<size_t>(t)]) {
            Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> g(p->grad.data(), d);
            for (int b = 0; b < batch; ++b) g += dY.row(b * t_len + t).transpose();
          } else {
            Eigen::Map<MatR> g(p->grad.data(), batch, d);
            for (int b = 0; b < batch; ++b) g.row(b) += dY.row(b * t_len + t);
          }
        }
        if (has_pos) {
          auto& p = self.parents[static_cast<size_t>(t_len)];
          if (p->requires_grad) {
            p->ensure_grad();
            Eigen::Map<MatR> g(p->grad.data(), t_len, d);
            for (int b = 0; b < batch; ++b)
              for (int t = 0; t < t_len; ++t) g.row(t) += dY.row(b * t_len + t);
          }
        }
      },
      "assemble_tokens");
  auto Y = y.as_matrix(d);
  for (int b = 0; b < batch; ++b)
    for (int t = 0; t < t_len; ++t) {
      auto row = Y.row(static_cast<long>(b) * t_len + t);
      const auto& s = slots[static_cast<size_t>(t)];
      if (s.rank() == 1)
        row = s.flat().transpose();
      else
        row = s.as_matrix(d).row(b);
      if (pos.valid()) row += pos.as_matrix(d).row(t);
    }
  return y;
}

/// Extracts token t from [B,T,D] as [B,D].
template <typename S>
Tensor<S> select_token(const Tensor<S>& x, int t) {
  if (x.rank() != 3) throw UsageError("select_token: expected [B,T,D]");
  const int batch = x.dim(0), t_len = x.dim(1), d = x.dim(2);
  if (t < 0 || t >= t_len) throw UsageError("select_token: index out of range");
  Tensor<S> y = make_op<S>(
      {batch, d}, {x},
      [batch, t_len, d, t](Node<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int b = 0; b < batch; ++b)
          Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(
              p->grad.data() + (static_cast<long>(b) * t_len + t) * d, d) +=
              self.grad.segment(static_cast<long>(b) * d, d);
      },
      "select_token");
  for (int b = 0; b < batch; ++b)
    y.flat().segment(static_cast<long>(b) * d, d) =
        x.flat().segment((static_cast<long>(b) * t_len + t) * d, d);
  return y;
}

/// Slices [.., C] columns [start, start+len) of the last axis.
template <typename S>
Tensor<S> slice_last(const Tensor<S>& x, int start, int len) {
  const int c = x.dim(x.rank() - 1);
  if (start < 0 || start + len > c) throw UsageError("slice_last: range out of bounds");
  const long rows = x.size() / c;
  Shape out_shape = x.shape();
  out_shape.back() = len;
  Tensor<S> y = make_op<S>(
      out_shape, {x},
      [rows, c, start, len](Node<S>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        using MatR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        Eigen::Map<MatR> g(p->grad.data(), rows, c);
        Eigen::Map<const MatR> dY(self.grad.data(), rows, len);
        g.middleCols(start, len) += dY;
      },
      "slice_last");
  y.as_matrix(len) = x.as_matrix(c).middleCols(start, len);
  return y;
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

/// Scaled dot-product attention over heads packed in the last axis of
/// q,k,v [B,T,D]. Writes per-head pre-dropout attention rows to
/// `probs_out` (shape [B,heads,T,T]) when given.
template <typename S>
Tensor<S> attention_core(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, int heads,
                         double attn_dropout = 0.0, bool train = false, Rng* rng = nullptr,
                         Tensor<S>* probs_out = nullptr) {
  if (q.shape() != k.shape() || q.shape() != v.shape() || q.rank() != 3)
    throw UsageError("attention_core: q,k,v must share shape [B,T,D]");
  const int batch = q.dim(0), t_len = q.dim(1), d = q.dim(2);
  if (d % heads != 0)
    throw UsageError("attention_core: emb dim " + std::to_string(d) +
                     " not divisible by heads " + std::to_string(heads));
  const int dh = d / heads;
  const S scale = S(1) / std::sqrt(S(dh));
  const bool drop = train && attn_dropout > 0.0;
  if (drop && rng == nullptr) throw UsageError("attention_core: rng required for dropout");

  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  // kept for backward: softmax output and (when training) the dropout mask
  auto probs = std::make_shared<std::vector<Mat>>();
  auto masks = std::make_shared<std::vector<Mat>>();
  probs->reserve(static_cast<size_t>(batch) * heads);

  Tensor<S> y = make_op<S>(
      q.shape(), {q, k, v},
      [=](Node<S>& self) {
        auto& pq = self.parents[0];
        auto& pk = self.parents[1];
        auto& pv = self.parents[2];
        for (auto* p : {pq.get(), pk.get(), pv.get()})
          if (p->requires_grad) p->ensure_grad();
        for (int b = 0; b < batch; ++b) {
          for (int hh = 0; hh < heads; ++hh) {
            const long row0 = static_cast<long>(b) * t_len;
            auto blk = [&](Eigen::Matrix<S, Eigen::Dynamic, 1>& buf) {
              return Eigen::Map<Mat, 0, Eigen::OuterStride<>>(
                  buf.data() + row0 * d + hh * dh, t_len, dh, Eigen::OuterStride<>(d));
            };
            auto Q = blk(pq->value), K = blk(pk->value), V = blk(pv->value);
            auto dC = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>(
                self.grad.data() + row0 * d + hh * dh, t_len, dh, Eigen::OuterStride<>(d));
            const Mat& P = (*probs)[static_cast<size_t>(b) * heads + hh];
            Mat p_used = P;
            if (drop) p_used.array() *= (*masks)[static_cast<size_t>(b) * heads + hh].array();
            Mat dP_used = dC * V.transpose();
            if (pv->requires_grad) blk(pv->grad) += p_used.transpose() * dC;
            Mat dP = dP_used;
            if (drop) dP.array() *= (*masks)[static_cast<size_t>(b) * heads + hh].array();
            // softmax backward, row-wise
            Mat dS = P.array() * (dP.array().colwise() -
                                  (dP.array() * P.array()).rowwise().sum());
            if (pq->requires_grad) blk(pq->grad) += scale * (dS * K);
            if (pk->requires_grad) blk(pk->grad) += scale * (dS.transpose() * Q);
          }
        }
      },
      "attention");

  if (probs_out) *probs_out = Tensor<S>::zeros({batch, heads, t_len, t_len});
  for (int b = 0; b < batch; ++b) {
    for (int hh = 0; hh < heads; ++hh) {
      const long row0 = static_cast<long>(b) * t_len;
      auto blk = [&](const Tensor<S>& t) {
        return Eigen::Map<const Mat, 0, Eigen::OuterStride<>>(
            t.data() + row0 * d + hh * dh, t_len, dh, Eigen::OuterStride<>(d));
      };
      auto Q = blk(q), K = blk(k), V = blk(v);
      Mat logits = scale * (Q * K.transpose());
      Mat P(t_len, t_len);
      for (int r = 0; r < t_len; ++r) {
        S m = logits.row(r).maxCoeff();
        Eigen::Array<S, 1, Eigen::Dynamic> e = (logits.row(r).array() - m).exp();
        P.row(r) = e / e.sum();
      }
      if (probs_out)
        Eigen::Map<Mat>(probs_out->data() +
                            (static_cast<long>(b) * heads + hh) * t_len * t_len,
                        t_len, t_len) = P;
      Mat p_used = P;
      if (drop) {
        Mat mask(t_len, t_len);
        const S keep_scale = S(1.0 / (1.0 - attn_dropout));
        for (int r = 0; r < t_len; ++r)
          for (int c2 = 0; c2 < t_len; ++c2)
            mask(r, c2) = rng->uniform() < attn_dropout ? S(0) : keep_scale;
        masks->push_back(mask);
        p_used.array() *= mask.array();
      }
      probs->push_back(std::move(P));
      Eigen::Map<Mat, 0, Eigen::OuterStride<>>(y.data() + row0 * d + hh * dh, t_len, dh,
                                               Eigen::OuterStride<>(d)) = p_used * V;
    }
  }
  return y;
}

/// Standard multi-head self-attention block body: fused QKV projection,
/// per-head scaled dot-product attention, output projection.
template <typename S>
Tensor<S> multi_head_self_attention(const Tensor<S>& tokens, const Tensor<S>& w_qkv,
                                    const Tensor<S>& b_qkv, const Tensor<S>& w_out,
                                    const Tensor<S>& b_out, int heads,
                                    double attn_dropout = 0.0, bool train = false,
                                    Rng* rng = nullptr, Tensor<S>* probs_out = nullptr) {
  if (tokens.rank() != 3)
    throw UsageError("multi_head_self_attention: tokens must be [B,T,D], got " +
                     shape_str(tokens.shape()));
  const int d = tokens.dim(2);
  if (d % heads != 0)
    throw UsageError("multi_head_self_attention: emb dim " + std::to_string(d) +
                     " not divisible by heads " + std::to_string(heads));
  if (w_qkv.dim(0) != d || w_qkv.dim(1) != 3 * d)
    throw UsageError("multi_head_self_attention: qkv weight must be [D,3D]");
  Tensor<S> qkv = linear(tokens, w_qkv, b_qkv);
  Tensor<S> q = slice_last(qkv, 0, d);
  Tensor<S> k = slice_last(qkv, d, d);
  Tensor<S> v = slice_last(qkv, 2 * d, d);
  Tensor<S> ctx = attention_core(q, k, v, heads, attn_dropout, train, rng, probs_out);
  return linear(ctx, w_out, b_out);
}

}  // namespace rff::nn
