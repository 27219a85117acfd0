#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "possl/tensor.hpp"

namespace possl {

// A loss value together with its gradient w.r.t. the differentiable input.
struct LossGrad {
    double value = 0.0;
    Vec grad;
};

// -log softmax(logits)[label], max-subtracted.
LossGrad cross_entropy(std::span<const double> logits, int label);

struct PseudoLabelLoss {
    double value = 0.0;
    std::size_t n_confident = 0;
    std::vector<Vec> grad_strong;  // per sample; zero rows for unconfident samples
    std::vector<int> pseudo_labels;  // -1 where not confident
};

// Weak logits produce fixed targets (argmax when max prob >= eta); the loss is
// the mean CE of the strong logits over confident samples, 0 if none.
PseudoLabelLoss pseudo_label_loss(const std::vector<Vec>& weak_logits, const std::vector<Vec>& strong_logits,
                                  double eta);

enum class ConsistencyMode { Literal, Absolute };

ConsistencyMode parse_consistency_mode(const std::string& s);
std::string to_string(ConsistencyMode m);

// Distances of the student feature to both centers against those of the
// fixed teacher feature. Gradient is w.r.t. f_s.
LossGrad consistency_loss(std::span<const double> f_s, std::span<const double> f_t, std::span<const double> k_ic,
                          std::span<const double> k_oc, ConsistencyMode mode);

struct ContrastiveLoss {
    double value = 0.0;
    Vec grad_id;
    Vec grad_ood;
};

// 1 - cos(v, v_bar), in [0, 2].
ContrastiveLoss contrastive_prompt_loss(std::span<const double> v, std::span<const double> v_bar);

struct LossWeights {
    double s = 1.0;
    double c = 1.0;
    double cl = 1.0;
};

struct LossBreakdown {
    double l_s = 0.0;
    double l_c = 0.0;
    double l_cl = 0.0;
    double total = 0.0;
    std::size_t n_confident = 0;
};

// Weighted parts are stored in the breakdown so that total = l_s + l_c + l_cl.
LossBreakdown total_unlabeled_loss(double l_s, double l_c, double l_cl, std::size_t n_confident,
                                   const LossWeights& w = {});

std::string loss_csv_header();
std::string loss_csv_row(std::size_t step, const LossBreakdown& b);

} // namespace possl
