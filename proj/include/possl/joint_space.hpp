#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "possl/io.hpp"
#include "possl/tensor.hpp"

namespace possl {

// Per-dimension z-scoring fitted on labeled features. All joint-space
// geometry runs on standardized features.
struct FeatureStandardizer {
    Vec mean;
    Vec stddev;

    static constexpr double kStdFloor = 1e-8;
};

FeatureStandardizer fit_standardizer(const std::vector<Vec>& features);
Vec standardize(const FeatureStandardizer& s, std::span<const double> f);
// Pulls a gradient w.r.t. the standardized feature back to the raw feature.
Vec standardize_backward(const FeatureStandardizer& s, std::span<const double> grad);

struct IdCluster {
    Vec center;
    double radius = 0.0;
    std::size_t count = 0;

    bool degenerate() const { return radius == 0.0; }
};

// Center = mean, radius = distance to the furthest fitting feature.
IdCluster fit_id_cluster(const std::vector<Vec>& features);

// Tangent hyperplane to the cluster sphere at `anchor`.
struct CandidateClassifier {
    int index = 1;  // 1-based; candidate 1 sits on the furthest sample
    Vec anchor;
    Vec normal;  // outward unit normal
    double reference_mean = 0.0;

    // Signed distance to the hyperplane, positive outside.
    double evaluate(std::span<const double> f) const;
};

std::vector<CandidateClassifier> build_candidates(const IdCluster& cluster, const std::vector<Vec>& labeled, int n);

enum class Detection { Id, Ood };

inline constexpr double kDetectionTau = 0.1;

// ID iff |D_j(f) - mean D_j(F_l)| <= tau.
std::vector<Detection> detect_initial(const CandidateClassifier& c, const std::vector<Vec>& unlabeled,
                                      double tau = kDetectionTau);

struct CandidateSelection {
    std::size_t chosen = 0;  // position in the candidate list
    std::vector<double> rates;
};

// Highest OOD rate wins; ties go to the lowest index.
CandidateSelection select_candidate(const std::vector<CandidateClassifier>& candidates,
                                    const std::vector<Vec>& unlabeled, double tau = kDetectionTau);

struct ApolloniusClassifier {
    Vec k_ic;
    Vec k_oc;
    double lambda = 0.5;
    std::size_t id_count = 0;
    std::size_t ood_count = 0;

    // ID iff d(f, k_ic) / d(f, k_oc) <= lambda.
    Detection classify(std::span<const double> f) const;
    // d1 / (d2 + 1e-12); larger means more OOD.
    double ood_score(std::span<const double> f) const;
};

struct OodCenterInit {
    ApolloniusClassifier classifier;
    double tau_used = kDetectionTau;
    std::size_t n_detected = 0;
};

class NoOodEvidence : public Error {
public:
    using Error::Error;
};

// k_oc = mean of the features the chosen candidate marks OOD. If nothing is
// detected, retries once with tau halved (a larger tau only widens the ID band,
// so it could never find more); throws NoOodEvidence if still empty.
OodCenterInit init_ood_center(const CandidateClassifier& chosen, const IdCluster& cluster,
                              const std::vector<Vec>& unlabeled, double lambda, double tau = kDetectionTau);

// lambda / (1 - lambda^2) * |k_ic - k_oc|, for 0 < lambda < 1.
double apollonius_radius(std::span<const double> k_ic, std::span<const double> k_oc, double lambda);
// (k_ic - lambda^2 k_oc) / (1 - lambda^2).
Vec apollonius_center(std::span<const double> k_ic, std::span<const double> k_oc, double lambda);

// Cumulative running means; either list may be empty.
void update_centers(ApolloniusClassifier& clf, const std::vector<Vec>& new_id, const std::vector<Vec>& new_ood);

struct JointSpaceState {
    FeatureStandardizer standardizer;
    IdCluster cluster;
    std::vector<CandidateClassifier> candidates;
    std::optional<std::size_t> chosen;
    std::vector<double> rates;
    std::optional<ApolloniusClassifier> apollonius;
};

json to_json(const JointSpaceState& s);
JointSpaceState joint_space_from_json(const json& j);

} // namespace possl
