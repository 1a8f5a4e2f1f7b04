#pragma once

#include <cmath>

#include "saor/diffcore/ops.hpp"

// Spatial operations on single images laid out channel-major as [c, h, w].

namespace saor::ad {

namespace detail {

template <typename T>
void im2col3x3(const T* in, std::size_t c, std::size_t h, std::size_t w, T* col) {
  const std::size_t hw = h * w;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* dst = col + ((ch * 9) + ky * 3 + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x) + kx - 1;
            dst[y * w + x] = (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w))
                                 ? T(0)
                                 : in[ch * hw + sy * w + sx];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im3x3(const T* col, std::size_t c, std::size_t h, std::size_t w, T* in) {
  const std::size_t hw = h * w;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* src = col + ((ch * 9) + ky * 3 + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x) + kx - 1;
            if (sx < 0 || sx >= static_cast<long>(w)) continue;
            in[ch * hw + sy * w + sx] += src[y * w + x];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 3x3, stride 1, zero "same" padding. kernels: [c_out, c_in, 3, 3]; bias: [c_out].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernels, const BasicTensor<T>* bias) {
  if (input.rank() != 3) throw ShapeError("conv2d input must be [c,h,w], got " + to_string(input.shape()));
  if (kernels.rank() != 4 || kernels.dim(2) != 3 || kernels.dim(3) != 3) {
    throw ShapeError("conv2d kernels must be [c_out,c_in,3,3], got " + to_string(kernels.shape()));
  }
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2), cout = kernels.dim(0);
  if (kernels.dim(1) != cin) {
    throw ShapeError("conv2d channel mismatch: input " + to_string(input.shape()) + " vs kernels " +
                     to_string(kernels.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout)) {
    throw ShapeError("conv2d bias must be [" + std::to_string(cout) + "]");
  }
  const std::size_t hw = h * w, kk = cin * 9;
  std::vector<T> col(kk * hw);
  detail::im2col3x3(input.values().data(), cin, h, w, col.data());
  std::vector<T> out(cout * hw);
  detail::gemm(out.data(), kernels.values().data(), false, col.data(), false, cout, kk, hw, false);
  if (bias) {
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t p = 0; p < hw; ++p) out[o * hw + p] += (*bias)[o];
  }
  std::vector<BasicTensor<T>> inputs{input, kernels};
  if (bias) inputs.push_back(*bias);
  return make_result<T>("conv2d", Shape{cout, h, w}, std::move(out), std::move(inputs),
      [cin, h, w, cout, hw, kk](Node<T>& self) {
        Node<T>& in = *self.parents[0];
        Node<T>& ker = *self.parents[1];
        const T* G = self.grad.data();
        if (ker.requires_grad) {
          std::vector<T> col(kk * hw);
          detail::im2col3x3(in.value.data(), cin, h, w, col.data());
          detail::gemm(ker.grad_buffer().data(), G, false, col.data(), true, cout, hw, kk, true);
        }
        if (in.requires_grad) {
          std::vector<T> gcol(kk * hw);
          detail::gemm(gcol.data(), ker.value.data(), true, G, false, kk, cout, hw, false);
          detail::col2im3x3(gcol.data(), cin, h, w, in.grad_buffer().data());
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->grad_buffer();
          for (std::size_t o = 0; o < cout; ++o) {
            T sum = 0;
            for (std::size_t p = 0; p < hw; ++p) sum += G[o * hw + p];
            gb[o] += sum;
          }
        }
      });
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernels) {
  return conv2d(input, kernels, static_cast<const BasicTensor<T>*>(nullptr));
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernels, const BasicTensor<T>& bias) {
  return conv2d(input, kernels, &bias);
}

/// Nearest-neighbour 2x upsampling: [c,h,w] -> [c,2h,2w].
template <typename T>
BasicTensor<T> upsample_nearest2(const BasicTensor<T>& input) {
  if (input.rank() != 3) throw ShapeError("upsample expects [c,h,w], got " + to_string(input.shape()));
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t H = 2 * h, W = 2 * w;
  std::vector<T> out(c * H * W);
  const auto iv = input.values();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out[(ch * H + y) * W + x] = iv[(ch * h + y / 2) * w + x / 2];
  return make_result<T>("upsample_nearest2", {c, H, W}, std::move(out), {input}, [c, h, w](Node<T>& self) {
    Node<T>& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    const std::size_t H = 2 * h, W = 2 * w;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) g[(ch * h + y / 2) * w + x / 2] += self.grad[(ch * H + y) * W + x];
  });
}

/// 2x2 average pooling with stride 2 (odd trailing rows/columns dropped).
template <typename T>
BasicTensor<T> avg_pool2(const BasicTensor<T>& input) {
  if (input.rank() != 3 || input.dim(1) < 2 || input.dim(2) < 2) {
    throw ShapeError("avg_pool2 expects [c,h>=2,w>=2], got " + to_string(input.shape()));
  }
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t H = h / 2, W = w / 2;
  std::vector<T> out(c * H * W);
  const auto iv = input.values();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const T* p = iv.data() + (ch * h + 2 * y) * w + 2 * x;
        out[(ch * H + y) * W + x] = T(0.25) * (p[0] + p[1] + p[w] + p[w + 1]);
      }
  return make_result<T>("avg_pool2", {c, H, W}, std::move(out), {input}, [c, h, w](Node<T>& self) {
    Node<T>& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    const std::size_t H = h / 2, W = w / 2;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const T go = T(0.25) * self.grad[(ch * H + y) * W + x];
          T* p = g.data() + (ch * h + 2 * y) * w + 2 * x;
          p[0] += go; p[1] += go; p[w] += go; p[w + 1] += go;
        }
  });
}

/// Mean over spatial positions: [c,h,w] -> [1,c].
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input) {
  if (input.rank() != 3) throw ShapeError("global_avg_pool expects [c,h,w]");
  const std::size_t c = input.dim(0);
  return reshape(reduce(Reduce::Mean, reshape(input, {c, input.dim(1) * input.dim(2)}), 1), {1, c});
}

/// Bilinear resampling [c,h,w] -> [c,oh,ow] with half-pixel centres and edge clamping.
template <typename T>
BasicTensor<T> resize_bilinear(const BasicTensor<T>& input, std::size_t oh, std::size_t ow) {
  if (input.rank() != 3) throw ShapeError("resize_bilinear expects [c,h,w]");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  struct Tap { std::size_t i0, i1; T f; };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double s = (static_cast<double>(o) + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(in - 1));
      const std::size_t i0 = static_cast<std::size_t>(std::floor(s));
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, static_cast<T>(s - static_cast<double>(i0))};
    }
    return t;
  };
  auto ty = std::make_shared<std::vector<Tap>>(taps(h, oh));
  auto tx = std::make_shared<std::vector<Tap>>(taps(w, ow));
  std::vector<T> out(c * oh * ow);
  const auto iv = input.values();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y) {
      const Tap& a = (*ty)[y];
      for (std::size_t x = 0; x < ow; ++x) {
        const Tap& b = (*tx)[x];
        const T* base = iv.data() + ch * h * w;
        const T top = base[a.i0 * w + b.i0] * (T(1) - b.f) + base[a.i0 * w + b.i1] * b.f;
        const T bot = base[a.i1 * w + b.i0] * (T(1) - b.f) + base[a.i1 * w + b.i1] * b.f;
        out[(ch * oh + y) * ow + x] = top * (T(1) - a.f) + bot * a.f;
      }
    }
  return make_result<T>("resize_bilinear", {c, oh, ow}, std::move(out), {input},
      [c, h, w, oh, ow, ty, tx](Node<T>& self) {
        Node<T>& in = *self.parents[0];
        if (!in.requires_grad) return;
        auto& g = in.grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < oh; ++y) {
            const Tap& a = (*ty)[y];
            for (std::size_t x = 0; x < ow; ++x) {
              const Tap& b = (*tx)[x];
              const T go = self.grad[(ch * oh + y) * ow + x];
              T* base = g.data() + ch * h * w;
              base[a.i0 * w + b.i0] += go * (T(1) - a.f) * (T(1) - b.f);
              base[a.i0 * w + b.i1] += go * (T(1) - a.f) * b.f;
              base[a.i1 * w + b.i0] += go * a.f * (T(1) - b.f);
              base[a.i1 * w + b.i1] += go * a.f * b.f;
            }
          }
      });
}

}  // namespace saor::ad
