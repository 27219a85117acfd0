#include "possl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "possl/error.hpp"
#include "possl/nnet.hpp"

namespace possl {

LossGrad cross_entropy(std::span<const double> logits, int label) {
    if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
        throw ConfigError("cross_entropy: label " + std::to_string(label) + " out of range");
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    const double log_z = std::log(z) + mx;
    LossGrad r;
    r.value = log_z - logits[label];
    r.grad.resize(logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) r.grad[k] = std::exp(logits[k] - log_z);
    r.grad[label] -= 1.0;
    return r;
}

PseudoLabelLoss pseudo_label_loss(const std::vector<Vec>& weak_logits, const std::vector<Vec>& strong_logits,
                                  double eta) {
    if (weak_logits.size() != strong_logits.size())
        throw GeometryError("pseudo_label_loss: weak and strong batches differ in size");
    PseudoLabelLoss r;
    r.grad_strong.resize(strong_logits.size());
    r.pseudo_labels.assign(strong_logits.size(), -1);
    std::vector<LossGrad> terms(strong_logits.size());
    for (std::size_t i = 0; i < weak_logits.size(); ++i) {
        r.grad_strong[i].assign(strong_logits[i].size(), 0.0);
        const Vec p = softmax(weak_logits[i]);
        const auto it = std::max_element(p.begin(), p.end());
        if (*it < eta) continue;
        r.pseudo_labels[i] = static_cast<int>(it - p.begin());
        terms[i] = cross_entropy(strong_logits[i], r.pseudo_labels[i]);
        ++r.n_confident;
    }
    if (r.n_confident == 0) return r;
    const double inv = 1.0 / static_cast<double>(r.n_confident);
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (r.pseudo_labels[i] < 0) continue;
        r.value += terms[i].value * inv;
        for (std::size_t k = 0; k < terms[i].grad.size(); ++k) r.grad_strong[i][k] = terms[i].grad[k] * inv;
    }
    return r;
}

ConsistencyMode parse_consistency_mode(const std::string& s) {
    if (s == "literal") return ConsistencyMode::Literal;
    if (s == "absolute") return ConsistencyMode::Absolute;
    throw ConfigError("consistency mode must be 'literal' or 'absolute', got '" + s + "'");
}

std::string to_string(ConsistencyMode m) { return m == ConsistencyMode::Literal ? "literal" : "absolute"; }

namespace {

// d|f - k| / df, zero at f = k.
Vec unit_from(std::span<const double> f, std::span<const double> k, double d) {
    Vec u(f.size(), 0.0);
    if (d > 0.0)
        for (std::size_t i = 0; i < f.size(); ++i) u[i] = (f[i] - k[i]) / d;
    return u;
}

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

} // namespace

LossGrad consistency_loss(std::span<const double> f_s, std::span<const double> f_t, std::span<const double> k_ic,
                          std::span<const double> k_oc, ConsistencyMode mode) {
    if (f_s.size() != f_t.size() || f_s.size() != k_ic.size() || f_s.size() != k_oc.size())
        throw GeometryError("consistency_loss: dimension mismatch");
    const double ds_ic = distance(f_s, k_ic), ds_oc = distance(f_s, k_oc);
    const double dt_ic = distance(f_t, k_ic), dt_oc = distance(f_t, k_oc);
    const Vec u_ic = unit_from(f_s, k_ic, ds_ic);
    const Vec u_oc = unit_from(f_s, k_oc, ds_oc);
    LossGrad r;
    r.grad.resize(f_s.size());
    double w_ic = 1.0, w_oc = 1.0;
    if (mode == ConsistencyMode::Literal) {
        r.value = ds_ic + ds_oc - dt_ic - dt_oc;
    } else {
        r.value = std::abs(ds_ic - dt_ic) + std::abs(ds_oc - dt_oc);
        w_ic = sign(ds_ic - dt_ic);
        w_oc = sign(ds_oc - dt_oc);
    }
    for (std::size_t i = 0; i < r.grad.size(); ++i) r.grad[i] = w_ic * u_ic[i] + w_oc * u_oc[i];
    return r;
}

ContrastiveLoss contrastive_prompt_loss(std::span<const double> v, std::span<const double> v_bar) {
    if (v.size() != v_bar.size()) throw GeometryError("contrastive_prompt_loss: prompt lengths differ");
    const double nv = norm(v), nb = norm(v_bar);
    if (nv == 0.0 || nb == 0.0) throw NumericError("contrastive_prompt_loss: zero-norm prompt vector");
    const double cosine = dot(v, v_bar) / (nv * nb);
    ContrastiveLoss r;
    r.value = 1.0 - cosine;
    r.grad_id.resize(v.size());
    r.grad_ood.resize(v.size());
    // d cos / dv = v_bar/(|v||v_bar|) - cos * v/|v|^2
    for (std::size_t i = 0; i < v.size(); ++i) {
        r.grad_id[i] = -(v_bar[i] / (nv * nb) - cosine * v[i] / (nv * nv));
        r.grad_ood[i] = -(v[i] / (nv * nb) - cosine * v_bar[i] / (nb * nb));
    }
    return r;
}

LossBreakdown total_unlabeled_loss(double l_s, double l_c, double l_cl, std::size_t n_confident,
                                   const LossWeights& w) {
    for (double x : {l_s, l_c, l_cl, w.s, w.c, w.cl})
        if (!std::isfinite(x)) throw NumericError("total_unlabeled_loss: non-finite loss part");
    LossBreakdown b;
    b.l_s = w.s * l_s;
    b.l_c = w.c * l_c;
    b.l_cl = w.cl * l_cl;
    b.total = b.l_s + b.l_c + b.l_cl;
    b.n_confident = n_confident;
    return b;
}

std::string loss_csv_header() { return "step,l_s,l_c,l_cl,total,n_confident\n"; }

std::string loss_csv_row(std::size_t step, const LossBreakdown& b) {
    std::ostringstream os;
    os.precision(17);
    os << step << ',' << b.l_s << ',' << b.l_c << ',' << b.l_cl << ',' << b.total << ',' << b.n_confident << '\n';
    return os.str();
}

} // namespace possl
