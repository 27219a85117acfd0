#include "possl/layers.hpp"

#include <algorithm>

namespace possl::layers {

int conv_out(int n) { return (n + 2 - 3) / 2 + 1; }

// 3x3 kernel, stride 2, zero padding 1.
Tensor3 conv_forward(const Tensor3& in, std::span<const double> w, std::span<const double> b, int out_ch) {
    Tensor3 out(out_ch, conv_out(in.height), conv_out(in.width));
    for (int co = 0; co < out_ch; ++co)
        for (int oy = 0; oy < out.height; ++oy)
            for (int ox = 0; ox < out.width; ++ox) {
                double s = b[co];
                for (int ci = 0; ci < in.channels; ++ci) {
                    const double* wk = &w[(static_cast<std::size_t>(co) * in.channels + ci) * 9];
                    for (int ky = 0; ky < 3; ++ky) {
                        const int iy = 2 * oy + ky - 1;
                        if (iy < 0 || iy >= in.height) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int ix = 2 * ox + kx - 1;
                            if (ix < 0 || ix >= in.width) continue;
                            s += wk[ky * 3 + kx] * in.at(ci, iy, ix);
                        }
                    }
                }
                out.at(co, oy, ox) = s;
            }
    return out;
}

// Accumulates dW, db (when requested) and returns d(input).
Tensor3 conv_backward(const Tensor3& in, std::span<const double> w, const Tensor3& dout, Vec* dw, Vec* db) {
    Tensor3 din(in.channels, in.height, in.width);
    for (int co = 0; co < dout.channels; ++co)
        for (int oy = 0; oy < dout.height; ++oy)
            for (int ox = 0; ox < dout.width; ++ox) {
                const double g = dout.at(co, oy, ox);
                if (g == 0.0) continue;
                if (db) (*db)[co] += g;
                for (int ci = 0; ci < in.channels; ++ci) {
                    const std::size_t base = (static_cast<std::size_t>(co) * in.channels + ci) * 9;
                    for (int ky = 0; ky < 3; ++ky) {
                        const int iy = 2 * oy + ky - 1;
                        if (iy < 0 || iy >= in.height) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int ix = 2 * ox + kx - 1;
                            if (ix < 0 || ix >= in.width) continue;
                            if (dw) (*dw)[base + ky * 3 + kx] += g * in.at(ci, iy, ix);
                            din.at(ci, iy, ix) += g * w[base + ky * 3 + kx];
                        }
                    }
                }
            }
    return din;
}

Tensor3 relu(const Tensor3& t) {
    Tensor3 out = t;
    for (auto& v : out.data) v = std::max(v, 0.0);
    return out;
}

Tensor3 relu_backward(const Tensor3& pre, const Tensor3& dout) {
    Tensor3 din = dout;
    for (std::size_t i = 0; i < din.size(); ++i)
        if (pre.data[i] <= 0.0) din.data[i] = 0.0;
    return din;
}

Vec global_avg_pool(const Tensor3& t) {
    const std::size_t plane = static_cast<std::size_t>(t.height) * t.width;
    Vec out(t.channels, 0.0);
    for (int c = 0; c < t.channels; ++c) {
        double sum = 0.0;
        for (std::size_t i = 0; i < plane; ++i) sum += t.data[c * plane + i];
        out[c] = sum / static_cast<double>(plane);
    }
    return out;
}

Tensor3 global_avg_pool_backward(std::span<const double> dout, int channels, int height, int width) {
    Tensor3 din(channels, height, width);
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    for (int c = 0; c < channels; ++c)
        for (std::size_t i = 0; i < plane; ++i) din.data[c * plane + i] = dout[c] / static_cast<double>(plane);
    return din;
}

Vec linear_forward(std::span<const double> w, std::span<const double> b, std::span<const double> x) {
    Vec y(b.begin(), b.end());
    for (std::size_t o = 0; o < y.size(); ++o) y[o] += dot(w.subspan(o * x.size(), x.size()), x);
    return y;
}

Vec linear_backward(std::span<const double> w, std::span<const double> x, std::span<const double> dy, Vec* dw,
                    Vec* db) {
    Vec dx(x.size(), 0.0);
    for (std::size_t o = 0; o < dy.size(); ++o) {
        const double g = dy[o];
        for (std::size_t i = 0; i < x.size(); ++i) {
            dx[i] += g * w[o * x.size() + i];
            if (dw) (*dw)[o * x.size() + i] += g * x[i];
        }
        if (db) (*db)[o] += g;
    }
    return dx;
}

} // namespace possl::layers
