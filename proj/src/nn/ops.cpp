#include "levit_unet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "levit_unet/errors.hpp"
#include "levit_unet/simd/kernels.hpp"

namespace levit::ops {
namespace {

using NodePtr = std::shared_ptr<detail::Node>;

thread_local MacCounter* t_counter = nullptr;

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

void gemm(int m, int n, int k, const float* a, int lda, bool ta, const float* b, int ldb, bool tb,
          float* c, int ldc, bool accumulate) {
  simd::GemmProblem p;
  p.m = m;
  p.n = n;
  p.k = k;
  p.a = a;
  p.lda = lda;
  p.trans_a = ta;
  p.b = b;
  p.ldb = ldb;
  p.trans_b = tb;
  p.c = c;
  p.ldc = ldc;
  p.accumulate = accumulate;
  simd::gemm(p);
}

// cols [c_in*k*k, out_h*out_w] for one image.
// Output columns [lo, hi) whose tap kx lands inside the input row.
std::pair<int, int> valid_span(int out_w, int w, int stride, int pad, int kx) {
  // ix = ox*stride - pad + kx must satisfy 0 <= ix < w
  int lo = 0;
  while (lo < out_w && lo * stride - pad + kx < 0) ++lo;
  int hi = out_w;
  while (hi > lo && (hi - 1) * stride - pad + kx >= w) --hi;
  return {lo, hi};
}

void im2col(const float* x, int c_in, int h, int w, int k, int stride, int pad, int out_h,
            int out_w, float* cols) {
  const int hw = out_h * out_w;
  for (int c = 0; c < c_in; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * hw;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          float* dst = row + oy * out_w;
          if (iy < 0 || iy >= h) {
            std::fill_n(dst, out_w, 0.0f);
            continue;
          }
          const float* src = x + (static_cast<std::size_t>(c) * h + iy) * w;
          const auto [lo, hi] = valid_span(out_w, w, stride, pad, kx);
          std::fill(dst, dst + lo, 0.0f);
          if (stride == 1) {
            std::copy(src + lo - pad + kx, src + hi - pad + kx, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride - pad + kx];
          }
          std::fill(dst + hi, dst + out_w, 0.0f);
        }
      }
    }
  }
}

void col2im(const float* cols, int c_in, int h, int w, int k, int stride, int pad, int out_h,
            int out_w, float* dx) {
  const int hw = out_h * out_w;
  for (int c = 0; c < c_in; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * hw;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          float* dst = dx + (static_cast<std::size_t>(c) * h + iy) * w;
          const float* src = row + oy * out_w;
          const auto [lo, hi] = valid_span(out_w, w, stride, pad, kx);
          if (stride == 1) {
            float* d = dst - pad + kx;
            for (int ox = lo; ox < hi; ++ox) d[ox] += src[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox * stride - pad + kx] += src[ox];
          }
        }
      }
    }
  }
}

// outer x len x inner decomposition around `axis`.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit a;
  for (int i = 0; i < axis; ++i) a.outer *= static_cast<std::size_t>(s[i]);
  a.len = static_cast<std::size_t>(s[axis]);
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= static_cast<std::size_t>(s[i]);
  return a;
}

int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "axis out of range");
  return axis;
}

struct ResizeTap {
  int i0;
  int i1;
  float w0;
  float w1;
};

std::vector<ResizeTap> resize_taps(int in, int out) {
  std::vector<ResizeTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = i0 < in - 1 ? i0 + 1 : i0;
    const float l1 = static_cast<float>(src - i0);
    taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0f - l1, l1};
  }
  return taps;
}

}  // namespace

MacCounter::MacCounter() : outer_(t_counter) { t_counter = this; }

MacCounter::~MacCounter() { t_counter = outer_; }

void count_macs(std::uint64_t macs) {
  for (MacCounter* c = t_counter; c != nullptr; c = c->outer_) c->total_ += macs;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  require(x.rank() == 4, "conv2d expects [n,c,h,w], got " + shape_str(x.shape()));
  require(weight.rank() == 4 && weight.dim(2) == weight.dim(3), "conv2d weight must be [c_out,c_in,k,k]");
  const int n = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int c_out = weight.dim(0), k = weight.dim(2);
  require(weight.dim(1) == c_in, "conv2d channel mismatch: input has " + std::to_string(c_in) +
                                     " channels, weight expects " + std::to_string(weight.dim(1)));
  require(stride >= 1 && padding >= 0 && k >= 1, "conv2d needs stride >= 1, padding >= 0, k >= 1");
  require(h + 2 * padding >= k && w + 2 * padding >= k, "conv2d kernel larger than padded input");
  require(!bias.defined() || (bias.rank() == 1 && bias.dim(0) == c_out), "conv2d bias must be [c_out]");
  const int out_h = (h + 2 * padding - k) / stride + 1;
  const int out_w = (w + 2 * padding - k) / stride + 1;
  const int hw = out_h * out_w;
  const int ckk = c_in * k * k;
  const bool direct = (k == 1 && stride == 1 && padding == 0);
  count_macs(static_cast<std::uint64_t>(n) * hw * c_out * ckk);

  std::vector<float> out(static_cast<std::size_t>(n) * c_out * hw);
  std::vector<float> cols(direct ? 0 : static_cast<std::size_t>(ckk) * hw);
  const float* xd = x.data().data();
  const float* wd = weight.data().data();
  for (int b = 0; b < n; ++b) {
    const float* xb = xd + static_cast<std::size_t>(b) * c_in * h * w;
    const float* src = xb;
    if (!direct) {
      im2col(xb, c_in, h, w, k, stride, padding, out_h, out_w, cols.data());
      src = cols.data();
    }
    float* yb = out.data() + static_cast<std::size_t>(b) * c_out * hw;
    gemm(c_out, hw, ckk, wd, ckk, false, src, hw, false, yb, hw, false);
    if (bias.defined()) {
      for (int co = 0; co < c_out; ++co) {
        const float bv = bias.data()[static_cast<std::size_t>(co)];
        float* row = yb + static_cast<std::size_t>(co) * hw;
        for (int i = 0; i < hw; ++i) row[i] += bv;
      }
    }
  }

  NodePtr xn = x.node(), wn = weight.node(), bn = bias.defined() ? bias.node() : nullptr;
  return make_op_result(
      {n, c_out, out_h, out_w}, std::move(out), {x, weight, bias},
      [=](detail::Node& self) {
        const float* dy = self.grad.data();
        std::vector<float> cols_b(direct ? 0 : static_cast<std::size_t>(ckk) * hw);
        std::vector<float> dcols(direct ? 0 : static_cast<std::size_t>(ckk) * hw);
        for (int b = 0; b < n; ++b) {
          const float* dyb = dy + static_cast<std::size_t>(b) * c_out * hw;
          const float* xb = xn->data.data() + static_cast<std::size_t>(b) * c_in * h * w;
          if (wn->requires_grad) {
            const float* src = xb;
            if (!direct) {
              im2col(xb, c_in, h, w, k, stride, padding, out_h, out_w, cols_b.data());
              src = cols_b.data();
            }
            gemm(c_out, ckk, hw, dyb, hw, false, src, hw, true, wn->grad_buffer().data(), ckk, true);
          }
          if (xn->requires_grad) {
            float* dxb = xn->grad_buffer().data() + static_cast<std::size_t>(b) * c_in * h * w;
            if (direct) {
              gemm(ckk, hw, c_out, wn->data.data(), ckk, true, dyb, hw, false, dxb, hw, true);
            } else {
              gemm(ckk, hw, c_out, wn->data.data(), ckk, true, dyb, hw, false, dcols.data(), hw, false);
              col2im(dcols.data(), c_in, h, w, k, stride, padding, out_h, out_w, dxb);
            }
          }
          if (bn && bn->requires_grad) {
            auto& db = bn->grad_buffer();
            for (int co = 0; co < c_out; ++co) {
              const float* row = dyb + static_cast<std::size_t>(co) * hw;
              double s = 0.0;
              for (int i = 0; i < hw; ++i) s += row[i];
              db[static_cast<std::size_t>(co)] += static_cast<float>(s);
            }
          }
        }
      });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, float momentum, float eps) {
  require(x.rank() == 4 || x.rank() == 3, "batch_norm expects [n,c,h,w] or [n,t,c], got " + shape_str(x.shape()));
  const int axis = x.rank() == 4 ? 1 : 2;
  const AxisSplit sp = split_at(x.shape(), axis);
  const std::size_t c = sp.len;
  require(gamma.numel() == c && beta.numel() == c && running_mean.numel() == c && running_var.numel() == c,
          "batch_norm channel-count mismatch: input has " + std::to_string(c) + " channels, layer has " +
              std::to_string(gamma.numel()));
  const std::size_t count = sp.outer * sp.inner;
  require(count >= 1, "batch_norm on empty input");

  std::vector<float> mean(c), inv_std(c);
  const float* xd = x.data().data();
  if (training) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0, ss = 0.0;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const float* p = xd + (o * c + ch) * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const float* p = xd + (o * c + ch) * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const double d = p[i] - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(count);
      mean[ch] = static_cast<float>(mu);
      inv_std[ch] = static_cast<float>(1.0 / std::sqrt(var + eps));
      const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      rm[ch] = static_cast<float>((1.0 - momentum) * rm[ch] + momentum * mu);
      rv[ch] = static_cast<float>((1.0 - momentum) * rv[ch] + momentum * unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean.data()[ch];
      inv_std[ch] = static_cast<float>(1.0 / std::sqrt(static_cast<double>(running_var.data()[ch]) + eps));
    }
  }

  const simd::KernelSet& ks = simd::active_kernels();
  std::vector<float> out(x.numel());
  std::vector<float> ch_scale(c), ch_shift(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    ch_scale[ch] = gamma.data()[ch] * inv_std[ch];
    ch_shift[ch] = beta.data()[ch] - mean[ch] * ch_scale[ch];
  }
  if (sp.inner > 1) {
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t off = (o * c + ch) * sp.inner;
        ks.scale_shift(xd + off, out.data() + off, sp.inner, ch_scale[ch], ch_shift[ch]);
      }
    }
  } else {
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        out[o * c + ch] = xd[o * c + ch] * ch_scale[ch] + ch_shift[ch];
      }
    }
  }

  NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_op_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [=, mean = std::move(mean), inv_std = std::move(inv_std)](detail::Node& self) {
        const float* dy = self.grad.data();
        const float* xv = xn->data.data();
        const double n_d = static_cast<double>(count);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t o = 0; o < sp.outer; ++o) {
            const std::size_t off = (o * c + ch) * sp.inner;
            for (std::size_t i = 0; i < sp.inner; ++i) {
              const double xhat = (xv[off + i] - mean[ch]) * static_cast<double>(inv_std[ch]);
              sum_dy += dy[off + i];
              sum_dy_xhat += dy[off + i] * xhat;
            }
          }
          if (gn->requires_grad) gn->grad_buffer()[ch] += static_cast<float>(sum_dy_xhat);
          if (bn->requires_grad) bn->grad_buffer()[ch] += static_cast<float>(sum_dy);
          if (!xn->requires_grad) continue;
          auto& dx = xn->grad_buffer();
          const double g = gn->data[ch];
          const double is = inv_std[ch];
          for (std::size_t o = 0; o < sp.outer; ++o) {
            const std::size_t off = (o * c + ch) * sp.inner;
            for (std::size_t i = 0; i < sp.inner; ++i) {
              if (training) {
                const double xhat = (xv[off + i] - mean[ch]) * is;
                dx[off + i] += static_cast<float>(g * is / n_d * (n_d * dy[off + i] - sum_dy - xhat * sum_dy_xhat));
              } else {
                dx[off + i] += static_cast<float>(g * is * dy[off + i]);
              }
            }
          }
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(x.rank() >= 1 && weight.rank() == 2, "linear expects x [..., d_in] and weight [d_out, d_in]");
  const int d_in = x.dim(-1);
  const int d_out = weight.dim(0);
  require(weight.dim(1) == d_in, "linear width mismatch: input " + std::to_string(d_in) + ", weight " +
                                     shape_str(weight.shape()));
  require(!bias.defined() || bias.numel() == static_cast<std::size_t>(d_out), "linear bias must be [d_out]");
  const int rows = static_cast<int>(x.numel() / static_cast<std::size_t>(d_in));
  count_macs(static_cast<std::uint64_t>(rows) * d_in * d_out);
  std::vector<float> out(static_cast<std::size_t>(rows) * d_out);
  gemm(rows, d_out, d_in, x.data().data(), d_in, false, weight.data().data(), d_in, true, out.data(), d_out, false);
  if (bias.defined()) {
    const float* bd = bias.data().data();
    for (int r = 0; r < rows; ++r) {
      float* row = out.data() + static_cast<std::size_t>(r) * d_out;
      for (int j = 0; j < d_out; ++j) row[j] += bd[j];
    }
  }
  Shape shape = x.shape();
  shape.back() = d_out;
  NodePtr xn = x.node(), wn = weight.node(), bn = bias.defined() ? bias.node() : nullptr;
  return make_op_result(std::move(shape), std::move(out), {x, weight, bias}, [=](detail::Node& self) {
    const float* dy = self.grad.data();
    if (xn->requires_grad) {
      gemm(rows, d_in, d_out, dy, d_out, false, wn->data.data(), d_in, false, xn->grad_buffer().data(), d_in, true);
    }
    if (wn->requires_grad) {
      gemm(d_out, d_in, rows, dy, d_out, true, xn->data.data(), d_in, false, wn->grad_buffer().data(), d_in, true);
    }
    if (bn && bn->requires_grad) {
      auto& db = bn->grad_buffer();
      std::vector<double> acc(static_cast<std::size_t>(d_out), 0.0);
      for (int r = 0; r < rows; ++r) {
        for (int j = 0; j < d_out; ++j) acc[static_cast<std::size_t>(j)] += dy[static_cast<std::size_t>(r) * d_out + j];
      }
      for (int j = 0; j < d_out; ++j) db[static_cast<std::size_t>(j)] += static_cast<float>(acc[static_cast<std::size_t>(j)]);
    }
  });
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.numel());
  simd::active_kernels().relu(x.data().data(), out.data(), out.size());
  NodePtr xn = x.node();
  return make_op_result(x.shape(), std::move(out), {x}, [xn](detail::Node& self) {
    auto& dx = xn->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (xn->data[i] > 0.0f) dx[i] += self.grad[i];
    }
  });
}

Tensor hardswish(const Tensor& x) {
  std::vector<float> out(x.numel());
  simd::active_kernels().hardswish(x.data().data(), out.data(), out.size());
  NodePtr xn = x.node();
  return make_op_result(x.shape(), std::move(out), {x}, [xn](detail::Node& self) {
    auto& dx = xn->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const float v = xn->data[i];
      float d = 0.0f;
      if (v >= 3.0f) {
        d = 1.0f;
      } else if (v > -3.0f) {
        d = (2.0f * v + 3.0f) / 6.0f;
      }
      dx[i] += self.grad[i] * d;
    }
  });
}

Tensor softmax(const Tensor& x, int axis) {
  axis = normalize_axis(axis, x.rank());
  const AxisSplit sp = split_at(x.shape(), axis);
  std::vector<float> out(x.numel());
  const float* xd = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      float mx = xd[base];
      for (std::size_t l = 1; l < sp.len; ++l) mx = std::max(mx, xd[base + l * sp.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        const float e = std::exp(xd[base + l * sp.inner] - mx);
        out[base + l * sp.inner] = e;
        total += e;
      }
      const float inv = static_cast<float>(1.0 / total);
      for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] *= inv;
    }
  }
  NodePtr xn = x.node();
  return make_op_result(x.shape(), std::move(out), {x}, [xn, sp](detail::Node& self) {
    auto& dx = xn->grad_buffer();
    const float* y = self.data.data();
    const float* dy = self.grad.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.len * sp.inner + in;
        double dot = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) dot += static_cast<double>(dy[base + l * sp.inner]) * y[base + l * sp.inner];
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t i = base + l * sp.inner;
          dx[i] += static_cast<float>(y[i] * (dy[i] - dot));
        }
      }
    }
  });
}

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
  require(x.rank() == 4, "bilinear_resize expects [n,c,h,w], got " + shape_str(x.shape()));
  require(out_h >= 1 && out_w >= 1, "bilinear_resize output dims must be >= 1");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t planes = static_cast<std::size_t>(n) * c;
  NodePtr xn = x.node();
  if (out_h == h && out_w == w) {
    std::vector<float> copy(x.data().begin(), x.data().end());
    return make_op_result(x.shape(), std::move(copy), {x}, [xn](detail::Node& self) {
      simd::active_kernels().accumulate(self.grad.data(), xn->grad_buffer().data(), self.grad.size());
    });
  }
  auto ty = resize_taps(h, out_h);
  auto tx = resize_taps(w, out_w);
  std::vector<float> out(planes * out_h * out_w);
  const float* xd = x.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = xd + p * h * w;
    float* dst = out.data() + p * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const ResizeTap& a = ty[static_cast<std::size_t>(oy)];
      const float* r0 = src + static_cast<std::size_t>(a.i0) * w;
      const float* r1 = src + static_cast<std::size_t>(a.i1) * w;
      for (int ox = 0; ox < out_w; ++ox) {
        const ResizeTap& b = tx[static_cast<std::size_t>(ox)];
        dst[oy * out_w + ox] = a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1]) + a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
      }
    }
  }
  return make_op_result({n, c, out_h, out_w}, std::move(out), {x},
                        [=, ty = std::move(ty), tx = std::move(tx)](detail::Node& self) {
                          auto& dx = xn->grad_buffer();
                          for (std::size_t p = 0; p < planes; ++p) {
                            float* dsrc = dx.data() + p * h * w;
                            const float* g = self.grad.data() + p * out_h * out_w;
                            for (int oy = 0; oy < out_h; ++oy) {
                              const ResizeTap& a = ty[static_cast<std::size_t>(oy)];
                              float* r0 = dsrc + static_cast<std::size_t>(a.i0) * w;
                              float* r1 = dsrc + static_cast<std::size_t>(a.i1) * w;
                              for (int ox = 0; ox < out_w; ++ox) {
                                const ResizeTap& b = tx[static_cast<std::size_t>(ox)];
                                const float gv = g[oy * out_w + ox];
                                r0[b.i0] += a.w0 * b.w0 * gv;
                                r0[b.i1] += a.w0 * b.w1 * gv;
                                r1[b.i0] += a.w1 * b.w0 * gv;
                                r1[b.i1] += a.w1 * b.w1 * gv;
                              }
                            }
                          }
                        });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  require(!xs.empty(), "concat of zero tensors");
  const int rank = xs.front().rank();
  axis = normalize_axis(axis, rank);
  Shape shape = xs.front().shape();
  shape[static_cast<std::size_t>(axis)] = 0;
  for (const Tensor& t : xs) {
    require(t.rank() == rank, "concat rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis) {
        require(t.dim(d) == xs.front().dim(d), "concat shape mismatch: " + shape_str(t.shape()) + " vs " +
                                                   shape_str(xs.front().shape()));
      }
    }
    shape[static_cast<std::size_t>(axis)] += t.dim(axis);
  }
  const AxisSplit sp = split_at(shape, axis);
  std::vector<float> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& t : xs) {
    offsets.push_back(off);
    const std::size_t chunk = static_cast<std::size_t>(t.dim(axis)) * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(t.data().data() + o * chunk, chunk, out.data() + o * sp.len * sp.inner + off * sp.inner);
    }
    off += static_cast<std::size_t>(t.dim(axis));
  }
  std::vector<NodePtr> nodes;
  std::vector<std::size_t> lens;
  for (const Tensor& t : xs) {
    nodes.push_back(t.node());
    lens.push_back(static_cast<std::size_t>(t.dim(axis)));
  }
  return make_op_result(shape, std::move(out), xs, [nodes, lens, offsets, sp](detail::Node& self) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (!nodes[i]->requires_grad) continue;
      auto& dx = nodes[i]->grad_buffer();
      const std::size_t chunk = lens[i] * sp.inner;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const float* g = self.grad.data() + o * sp.len * sp.inner + offsets[i] * sp.inner;
        float* d = dx.data() + o * chunk;
        for (std::size_t j = 0; j < chunk; ++j) d[j] += g[j];
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<float> out(a.data().begin(), a.data().end());
  simd::active_kernels().accumulate(b.data().data(), out.data(), out.size());
  NodePtr an = a.node(), bn = b.node();
  return make_op_result(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& self) {
    const auto& ks = simd::active_kernels();
    if (an->requires_grad) ks.accumulate(self.grad.data(), an->grad_buffer().data(), self.grad.size());
    if (bn->requires_grad) ks.accumulate(self.grad.data(), bn->grad_buffer().data(), self.grad.size());
  });
}

Tensor scale(const Tensor& x, float factor) {
  std::vector<float> out(x.numel());
  simd::active_kernels().scale_shift(x.data().data(), out.data(), out.size(), factor, 0.0f);
  NodePtr xn = x.node();
  return make_op_result(x.shape(), std::move(out), {x}, [xn, factor](detail::Node& self) {
    auto& dx = xn->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i] * factor;
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<float> out(x.data().begin(), x.data().end());
  NodePtr xn = x.node();
  return make_op_result(std::move(shape), std::move(out), {x}, [xn](detail::Node& self) {
    simd::active_kernels().accumulate(self.grad.data(), xn->grad_buffer().data(), self.grad.size());
  });
}

Tensor batched_matmul(const Tensor& a, const Tensor& b, bool trans_b) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0), "batched_matmul expects [B,m,k] and [B,k,n]");
  const int batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const int n = trans_b ? b.dim(1) : b.dim(2);
  require((trans_b ? b.dim(2) : b.dim(1)) == k, "batched_matmul inner dimension mismatch: " + shape_str(a.shape()) +
                                                    " x " + shape_str(b.shape()));
  count_macs(static_cast<std::uint64_t>(batch) * m * n * k);
  std::vector<float> out(static_cast<std::size_t>(batch) * m * n);
  const std::size_t sa = static_cast<std::size_t>(m) * k, sb = static_cast<std::size_t>(k) * n,
                    sc = static_cast<std::size_t>(m) * n;
  const int ldb = trans_b ? k : n;
  for (int i = 0; i < batch; ++i) {
    gemm(m, n, k, a.data().data() + i * sa, k, false, b.data().data() + i * sb, ldb, trans_b, out.data() + i * sc, n,
         false);
  }
  NodePtr an = a.node(), bn = b.node();
  return make_op_result({batch, m, n}, std::move(out), {a, b}, [=](detail::Node& self) {
    for (int i = 0; i < batch; ++i) {
      const float* dc = self.grad.data() + i * sc;
      if (an->requires_grad) {
        // dA = dC op(B)^T
        gemm(m, k, n, dc, n, false, bn->data.data() + i * sb, ldb, !trans_b, an->grad_buffer().data() + i * sa, k,
             true);
      }
      if (bn->requires_grad) {
        float* db = bn->grad_buffer().data() + i * sb;
        if (trans_b) {
          gemm(n, k, m, dc, n, true, an->data.data() + i * sa, k, false, db, k, true);
        } else {
          gemm(k, n, m, an->data.data() + i * sa, k, true, dc, n, false, db, n, true);
        }
      }
    }
  });
}

namespace {

// Permutes [a, b, c, d] -> [a, c, b, d].
std::vector<float> swap_middle(const float* src, int a, int b, int c, int d) {
  std::vector<float> out(static_cast<std::size_t>(a) * b * c * d);
  for (int i = 0; i < a; ++i) {
    for (int j = 0; j < b; ++j) {
      for (int l = 0; l < c; ++l) {
        const float* s = src + ((static_cast<std::size_t>(i) * b + j) * c + l) * d;
        float* t = out.data() + ((static_cast<std::size_t>(i) * c + l) * b + j) * d;
        std::copy_n(s, d, t);
      }
    }
  }
  return out;
}

void swap_middle_accumulate(const float* g, float* dst, int a, int b, int c, int d) {
  // g is [a, c, b, d]; dst is [a, b, c, d].
  for (int i = 0; i < a; ++i) {
    for (int l = 0; l < c; ++l) {
      for (int j = 0; j < b; ++j) {
        const float* s = g + ((static_cast<std::size_t>(i) * c + l) * b + j) * d;
        float* t = dst + ((static_cast<std::size_t>(i) * b + j) * c + l) * d;
        for (int e = 0; e < d; ++e) t[e] += s[e];
      }
    }
  }
}

}  // namespace

Tensor split_heads(const Tensor& x, int heads) {
  require(x.rank() == 3 && heads >= 1 && x.dim(2) % heads == 0, "split_heads expects [n,t,h*d]");
  const int n = x.dim(0), t = x.dim(1), d = x.dim(2) / heads;
  auto out = swap_middle(x.data().data(), n, t, heads, d);
  NodePtr xn = x.node();
  return make_op_result({n * heads, t, d}, std::move(out), {x}, [=](detail::Node& self) {
    swap_middle_accumulate(self.grad.data(), xn->grad_buffer().data(), n, t, heads, d);
  });
}

Tensor merge_heads(const Tensor& x, int heads) {
  require(x.rank() == 3 && heads >= 1 && x.dim(0) % heads == 0, "merge_heads expects [n*h,t,d]");
  const int n = x.dim(0) / heads, t = x.dim(1), d = x.dim(2);
  auto out = swap_middle(x.data().data(), n, heads, t, d);
  NodePtr xn = x.node();
  return make_op_result({n, t, heads * d}, std::move(out), {x}, [=](detail::Node& self) {
    swap_middle_accumulate(self.grad.data(), xn->grad_buffer().data(), n, heads, t, d);
  });
}

Tensor add_attention_bias(const Tensor& scores, const Tensor& table, std::span<const int> index) {
  require(scores.rank() == 3 && table.rank() == 2, "add_attention_bias expects scores [n*h,tq,tk], table [h,slots]");
  const int heads = table.dim(0), slots = table.dim(1);
  const int tq = scores.dim(1), tk = scores.dim(2);
  require(scores.dim(0) % heads == 0, "attention scores batch not divisible by head count");
  require(index.size() == static_cast<std::size_t>(tq) * tk,
          "attention bias index covers " + std::to_string(index.size()) + " pairs, scores have " +
              std::to_string(tq) + "x" + std::to_string(tk));
  const int batch = scores.dim(0);
  const std::size_t pairs = index.size();
  std::vector<float> out(scores.data().begin(), scores.data().end());
  const float* tb = table.data().data();
  for (int b = 0; b < batch; ++b) {
    const float* row = tb + static_cast<std::size_t>(b % heads) * slots;
    float* o = out.data() + static_cast<std::size_t>(b) * pairs;
    for (std::size_t p = 0; p < pairs; ++p) o[p] += row[index[p]];
  }
  std::vector<int> idx(index.begin(), index.end());
  NodePtr sn = scores.node(), tn = table.node();
  return make_op_result(scores.shape(), std::move(out), {scores, table},
                        [=, idx = std::move(idx)](detail::Node& self) {
                          if (sn->requires_grad) {
                            simd::active_kernels().accumulate(self.grad.data(), sn->grad_buffer().data(),
                                                              self.grad.size());
                          }
                          if (tn->requires_grad) {
                            auto& dt = tn->grad_buffer();
                            for (int b = 0; b < batch; ++b) {
                              float* row = dt.data() + static_cast<std::size_t>(b % heads) * slots;
                              const float* g = self.grad.data() + static_cast<std::size_t>(b) * pairs;
                              for (std::size_t p = 0; p < pairs; ++p) row[idx[p]] += g[p];
                            }
                          }
                        });
}

Tensor subsample_tokens(const Tensor& x, int h, int w) {
  require(x.rank() == 3 && x.dim(1) == h * w, "subsample_tokens expects [n,h*w,c] matching the grid");
  const int n = x.dim(0), c = x.dim(2);
  const int hq = (h + 1) / 2, wq = (w + 1) / 2;
  std::vector<float> out(static_cast<std::size_t>(n) * hq * wq * c);
  const float* xd = x.data().data();
  for (int b = 0; b < n; ++b) {
    for (int i = 0; i < hq; ++i) {
      for (int j = 0; j < wq; ++j) {
        const float* s = xd + ((static_cast<std::size_t>(b) * h + 2 * i) * w + 2 * j) * c;
        std::copy_n(s, c, out.data() + ((static_cast<std::size_t>(b) * hq + i) * wq + j) * c);
      }
    }
  }
  NodePtr xn = x.node();
  return make_op_result({n, hq * wq, c}, std::move(out), {x}, [=](detail::Node& self) {
    auto& dx = xn->grad_buffer();
    for (int b = 0; b < n; ++b) {
      for (int i = 0; i < hq; ++i) {
        for (int j = 0; j < wq; ++j) {
          const float* g = self.grad.data() + ((static_cast<std::size_t>(b) * hq + i) * wq + j) * c;
          float* d = dx.data() + ((static_cast<std::size_t>(b) * h + 2 * i) * w + 2 * j) * c;
          for (int e = 0; e < c; ++e) d[e] += g[e];
        }
      }
    }
  });
}

Tensor map_to_tokens(const Tensor& x) {
  require(x.rank() == 4, "map_to_tokens expects [n,c,h,w]");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  auto out = swap_middle(x.data().data(), n, c, hw, 1);
  NodePtr xn = x.node();
  return make_op_result({n, hw, c}, std::move(out), {x}, [=](detail::Node& self) {
    swap_middle_accumulate(self.grad.data(), xn->grad_buffer().data(), n, c, hw, 1);
  });
}

Tensor tokens_to_map(const Tensor& x, int h, int w) {
  require(x.rank() == 3 && x.dim(1) == h * w, "tokens_to_map expects [n,h*w,c] matching the grid");
  const int n = x.dim(0), c = x.dim(2), hw = h * w;
  auto out = swap_middle(x.data().data(), n, hw, c, 1);
  NodePtr xn = x.node();
  return make_op_result({n, c, h, w}, std::move(out), {x}, [=](detail::Node& self) {
    swap_middle_accumulate(self.grad.data(), xn->grad_buffer().data(), n, hw, c, 1);
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (float v : x.data()) s += v;
  NodePtr xn = x.node();
  return make_op_result({1}, {static_cast<float>(s)}, {x}, [xn](detail::Node& self) {
    auto& dx = xn->grad_buffer();
    const float g = self.grad[0];
    for (float& d : dx) d += g;
  });
}

}  // namespace levit::ops
