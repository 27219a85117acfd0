#pragma once

#include <span>

#include "possl/tensor.hpp"

// Building blocks of MiniModel. Each backward routine is the exact adjoint of
// the corresponding forward map in its input, and accumulates into the
// parameter gradients it is handed (null pointers skip them).
namespace possl::layers {

// Output side length of a 3x3, stride 2, padding 1 convolution.
int conv_out(int n);

Tensor3 conv_forward(const Tensor3& in, std::span<const double> w, std::span<const double> b, int out_ch);
Tensor3 conv_backward(const Tensor3& in, std::span<const double> w, const Tensor3& dout, Vec* dw, Vec* db);

Tensor3 relu(const Tensor3& t);
// Passes `dout` where `pre` > 0.
Tensor3 relu_backward(const Tensor3& pre, const Tensor3& dout);

Vec global_avg_pool(const Tensor3& t);
Tensor3 global_avg_pool_backward(std::span<const double> dout, int channels, int height, int width);

// y = W x + b with W stored row-major (out x in).
Vec linear_forward(std::span<const double> w, std::span<const double> b, std::span<const double> x);
Vec linear_backward(std::span<const double> w, std::span<const double> x, std::span<const double> dy, Vec* dw,
                    Vec* db);

} // namespace possl::layers
