#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "possl/error.hpp"

namespace possl {

// Dense C x H x W image tensor, channel-major then row-major.
struct Tensor3 {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;

    Tensor3() = default;
    Tensor3(int c, int h, int w, double fill = 0.0)
        : channels(c), height(h), width(w),
          data(static_cast<std::size_t>(c) * h * w, fill) {}

    std::size_t size() const { return data.size(); }
    std::size_t offset(int c, int y, int x) const {
        return (static_cast<std::size_t>(c) * height + y) * width + x;
    }
    double& at(int c, int y, int x) { return data[offset(c, y, x)]; }
    double at(int c, int y, int x) const { return data[offset(c, y, x)]; }

    bool same_shape(const Tensor3& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
    bool operator==(const Tensor3&) const = default;
};

using Vec = std::vector<double>;

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

inline Vec mean_of(const std::vector<Vec>& rows) {
    Vec m(rows.empty() ? 0 : rows.front().size(), 0.0);
    for (const auto& r : rows)
        for (std::size_t i = 0; i < m.size(); ++i) m[i] += r[i];
    for (auto& x : m) x /= static_cast<double>(rows.size());
    return m;
}

// Rounds every entry to the nearest float so that float32 serialization is lossless.
inline void round_to_float(std::span<double> v) {
    for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

} // namespace possl
