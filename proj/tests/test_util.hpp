#pragma once

// Independent oracles shared by the unit tests and the acceptance gate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "possl/eval.hpp"
#include "possl/layers.hpp"
#include "possl/nnet.hpp"
#include "possl/tensor.hpp"

namespace possl::testing {

inline Vec random_vec(std::size_t n, std::mt19937_64& rng, double sd = 1.0) {
    std::normal_distribution<double> g(0.0, sd);
    Vec v(n);
    for (auto& x : v) x = g(rng);
    return v;
}

inline Tensor3 random_tensor(int c, int h, int w, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor3 t(c, h, w);
    for (auto& x : t.data) x = u(rng);
    return t;
}

inline double rel_err(double a, double b) {
    const double scale = std::max({std::abs(a), std::abs(b), 1e-8});
    return std::abs(a - b) / scale;
}

// ||a - b|| / max(||a||, ||b||): relative error of a whole gradient vector.
inline double vec_rel_err(const Vec& a, const Vec& b) {
    return distance(a, b) / std::max({norm(a), norm(b), 1e-12});
}

// Central differences of `f` around `x`, one coordinate at a time.
inline Vec central_diff(const std::function<double(const Vec&)>& f, Vec x, double eps) {
    Vec g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + eps;
        const double up = f(x);
        x[i] = keep - eps;
        const double down = f(x);
        x[i] = keep;
        g[i] = (up - down) / (2.0 * eps);
    }
    return g;
}

// O(n^2) pairwise AUROC with OOD positive and half credit for ties.
inline double brute_auroc(const std::vector<ScoredSample>& s) {
    double wins = 0.0;
    std::size_t pairs = 0;
    for (const auto& o : s) {
        if (o.truth_tag != TruthTag::Ood) continue;
        for (const auto& i : s) {
            if (i.truth_tag != TruthTag::Id) continue;
            ++pairs;
            if (o.ood_score > i.ood_score) wins += 1.0;
            else if (o.ood_score == i.ood_score) wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

// n scored samples with both tags present; scores come from a small integer grid
// when `ties` is set so that tie handling is exercised.
inline std::vector<ScoredSample> random_scored(std::size_t n, std::mt19937_64& rng, bool ties) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> grid(0, 9);
    std::vector<ScoredSample> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i].truth_tag = i == 0 ? TruthTag::Id : (i == 1 ? TruthTag::Ood : (u(rng) < 0.4 ? TruthTag::Ood : TruthTag::Id));
        const double shift = out[i].truth_tag == TruthTag::Ood ? 0.3 : 0.0;
        out[i].ood_score = ties ? static_cast<double>(grid(rng)) + (shift > 0 ? grid(rng) % 3 : 0) : u(rng) + shift;
    }
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

// Random orthogonal matrix (row-major) by Gram-Schmidt on a Gaussian matrix.
inline std::vector<Vec> random_rotation(std::size_t d, std::mt19937_64& rng) {
    std::vector<Vec> q;
    while (q.size() < d) {
        Vec v = random_vec(d, rng);
        for (const auto& e : q) {
            const double t = dot(v, e);
            for (std::size_t i = 0; i < d; ++i) v[i] -= t * e[i];
        }
        const double n = norm(v);
        if (n < 1e-6) continue;
        for (auto& x : v) x /= n;
        q.push_back(std::move(v));
    }
    return q;
}

inline Vec rigid(const std::vector<Vec>& rot, const Vec& shift, const Vec& x) {
    Vec y(shift);
    for (std::size_t r = 0; r < rot.size(); ++r) y[r] += dot(rot[r], x);
    return y;
}

// Point on the ray k_ic + t*u where d(p, k_ic) / d(p, k_oc) = lambda, by bisection.
// The ID region is a disk around k_ic, so each ray leaves it exactly once.
inline Vec ratio_crossing(const Vec& k_ic, const Vec& k_oc, double lambda, const Vec& u) {
    auto at = [&](double t) {
        Vec p(k_ic);
        for (std::size_t i = 0; i < p.size(); ++i) p[i] += t * u[i];
        return p;
    };
    auto ratio = [&](double t) {
        const Vec p = at(t);
        return distance(p, k_ic) / distance(p, k_oc);
    };
    double lo = 0.0, hi = 1e-3;
    while (ratio(hi) <= lambda) lo = hi, hi *= 2.0;
    for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid == lo || mid == hi) break;
        (ratio(mid) <= lambda ? lo : hi) = mid;
    }
    return at(0.5 * (lo + hi));
}

struct LocusCheck {
    double max_radius_err = 0.0;  // against the supplied radius
    Vec center;                   // midpoint of the two crossings on the k_ic, k_oc line
};

// Samples n_rays planar directions through k_ic and measures how far each crossing
// sits from a circle of the given radius.
inline LocusCheck check_locus(const Vec& k_ic, const Vec& k_oc, double lambda, double radius, int n_rays) {
    Vec axis(k_oc);
    for (std::size_t i = 0; i < axis.size(); ++i) axis[i] -= k_ic[i];
    const double d = norm(axis);
    for (auto& a : axis) a /= d;
    Vec back(axis);
    for (auto& a : back) a = -a;
    const Vec p0 = ratio_crossing(k_ic, k_oc, lambda, axis), p1 = ratio_crossing(k_ic, k_oc, lambda, back);
    LocusCheck out;
    out.center.resize(k_ic.size());
    for (std::size_t i = 0; i < k_ic.size(); ++i) out.center[i] = 0.5 * (p0[i] + p1[i]);
    Vec perp(k_ic.size(), 0.0);  // any unit vector orthogonal to the axis spans the plane with it
    perp[std::abs(axis[0]) < 0.9 ? 0 : 1] = 1.0;
    const double t = dot(perp, axis);
    for (std::size_t i = 0; i < perp.size(); ++i) perp[i] -= t * axis[i];
    const double pn = norm(perp);
    for (auto& x : perp) x /= pn;
    for (int k = 0; k < n_rays; ++k) {
        const double a = 2.0 * M_PI * k / n_rays;
        Vec u(k_ic.size());
        for (std::size_t i = 0; i < u.size(); ++i) u[i] = std::cos(a) * axis[i] + std::sin(a) * perp[i];
        const Vec p = ratio_crossing(k_ic, k_oc, lambda, u);
        out.max_radius_err = std::max(out.max_radius_err, std::abs(distance(p, out.center) - radius));
    }
    return out;
}

// Smallest |pre-activation| over every ReLU unit of the batch.
inline double relu_margin(const MiniModel& m, const std::vector<Tensor3>& images) {
    double margin = INFINITY;
    for (const auto& x : images) {
        const Tensor3 a = layers::conv_forward(x, m.param(kConv1W).value, m.param(kConv1B).value,
                                               static_cast<int>(m.param(kConv1B).value.size()));
        const Tensor3 b = layers::conv_forward(layers::relu(a), m.param(kConv2W).value, m.param(kConv2B).value,
                                               static_cast<int>(m.param(kConv2B).value.size()));
        for (const auto* t : {&a, &b})
            for (double v : t->data) margin = std::min(margin, std::abs(v));
    }
    return margin;
}

} // namespace possl::testing
