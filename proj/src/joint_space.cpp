#include "possl/joint_space.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "possl/error.hpp"

namespace possl {

FeatureStandardizer fit_standardizer(const std::vector<Vec>& features) {
    if (features.size() < 2) throw ConfigError("fit_standardizer needs at least 2 features");
    const std::size_t d = features.front().size();
    FeatureStandardizer s;
    s.mean = mean_of(features);
    s.stddev.assign(d, 0.0);
    for (const auto& f : features) {
        if (f.size() != d) throw GeometryError("fit_standardizer: ragged features");
        for (std::size_t i = 0; i < d; ++i) s.stddev[i] += (f[i] - s.mean[i]) * (f[i] - s.mean[i]);
    }
    for (auto& v : s.stddev) v = std::max(std::sqrt(v / static_cast<double>(features.size())), FeatureStandardizer::kStdFloor);
    return s;
}

Vec standardize(const FeatureStandardizer& s, std::span<const double> f) {
    if (f.size() != s.mean.size()) throw GeometryError("standardize: dimension mismatch");
    Vec out(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) out[i] = (f[i] - s.mean[i]) / s.stddev[i];
    return out;
}

Vec standardize_backward(const FeatureStandardizer& s, std::span<const double> grad) {
    Vec out(grad.size());
    for (std::size_t i = 0; i < grad.size(); ++i) out[i] = grad[i] / s.stddev[i];
    return out;
}

IdCluster fit_id_cluster(const std::vector<Vec>& features) {
    if (features.empty()) throw ConfigError("fit_id_cluster: empty feature set");
    IdCluster c;
    c.center = mean_of(features);
    c.count = features.size();
    for (const auto& f : features) c.radius = std::max(c.radius, distance(f, c.center));
    if (!std::isfinite(c.radius)) throw NumericError("fit_id_cluster: non-finite radius");
    return c;
}

double CandidateClassifier::evaluate(std::span<const double> f) const {
    double s = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) s += (f[i] - anchor[i]) * normal[i];
    return s;
}

std::vector<CandidateClassifier> build_candidates(const IdCluster& cluster, const std::vector<Vec>& labeled, int n) {
    if (cluster.degenerate()) throw NumericError("build_candidates: degenerate cluster (radius 0)");
    if (n < 1 || static_cast<std::size_t>(n) > labeled.size())
        throw ConfigError("build_candidates: need 1 <= N <= number of labeled features");

    std::vector<double> dist(labeled.size());
    for (std::size_t i = 0; i < labeled.size(); ++i) dist[i] = distance(labeled[i], cluster.center);
    std::vector<std::size_t> order(labeled.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });

    std::vector<CandidateClassifier> out;
    for (int j = 0; j < n; ++j) {
        const Vec& f = labeled[order[j]];
        const double d = dist[order[j]];
        if (d == 0.0) throw NumericError("build_candidates: selected feature coincides with the cluster center");
        CandidateClassifier c;
        c.index = j + 1;
        c.normal.resize(f.size());
        c.anchor.resize(f.size());
        // Push onto the sphere along the ray from the center.
        for (std::size_t i = 0; i < f.size(); ++i) {
            c.normal[i] = (f[i] - cluster.center[i]) / d;
            c.anchor[i] = cluster.center[i] + cluster.radius * c.normal[i];
        }
        double sum = 0.0;
        for (const auto& g : labeled) sum += c.evaluate(g);
        c.reference_mean = sum / static_cast<double>(labeled.size());
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<Detection> detect_initial(const CandidateClassifier& c, const std::vector<Vec>& unlabeled, double tau) {
    std::vector<Detection> out;
    out.reserve(unlabeled.size());
    for (const auto& f : unlabeled)
        out.push_back(std::abs(c.evaluate(f) - c.reference_mean) <= tau ? Detection::Id : Detection::Ood);
    return out;
}

CandidateSelection select_candidate(const std::vector<CandidateClassifier>& candidates,
                                    const std::vector<Vec>& unlabeled, double tau) {
    if (unlabeled.empty()) throw ConfigError("select_candidate: empty unlabeled set");
    if (candidates.empty()) throw ConfigError("select_candidate: no candidates");
    CandidateSelection sel;
    for (const auto& c : candidates) {
        const auto labels = detect_initial(c, unlabeled, tau);
        const auto n_ood = std::count(labels.begin(), labels.end(), Detection::Ood);
        sel.rates.push_back(static_cast<double>(n_ood) / static_cast<double>(unlabeled.size()));
    }
    for (std::size_t j = 1; j < sel.rates.size(); ++j)
        if (sel.rates[j] > sel.rates[sel.chosen]) sel.chosen = j;
    return sel;
}

Detection ApolloniusClassifier::classify(std::span<const double> f) const {
    const double d1 = distance(f, k_ic);
    const double d2 = distance(f, k_oc);
    if (d2 == 0.0) return d1 == 0.0 ? Detection::Id : Detection::Ood;
    return d1 / d2 <= lambda ? Detection::Id : Detection::Ood;
}

double ApolloniusClassifier::ood_score(std::span<const double> f) const {
    return distance(f, k_ic) / (distance(f, k_oc) + 1e-12);
}

OodCenterInit init_ood_center(const CandidateClassifier& chosen, const IdCluster& cluster,
                              const std::vector<Vec>& unlabeled, double lambda, double tau) {
    if (!(lambda > 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in (0, 1]");
    OodCenterInit init;
    std::vector<Vec> detected;
    for (int attempt = 0; attempt < 2 && detected.empty(); ++attempt) {
        init.tau_used = attempt == 0 ? tau : 0.5 * tau;
        const auto labels = detect_initial(chosen, unlabeled, init.tau_used);
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == Detection::Ood) detected.push_back(unlabeled[i]);
    }
    if (detected.empty()) throw NoOodEvidence("no OOD evidence: candidate detected no OOD samples even at tau=" +
                                              std::to_string(init.tau_used));
    ApolloniusClassifier& clf = init.classifier;
    clf.k_ic = cluster.center;
    clf.k_oc = mean_of(detected);
    clf.lambda = lambda;
    clf.id_count = cluster.count;
    clf.ood_count = detected.size();
    init.n_detected = detected.size();
    if (clf.k_oc == clf.k_ic) throw NumericError("init_ood_center: OOD center coincides with the ID center");
    return init;
}

double apollonius_radius(std::span<const double> k_ic, std::span<const double> k_oc, double lambda) {
    if (!(lambda > 0.0)) throw ConfigError("apollonius_radius: lambda must be > 0");
    if (lambda >= 1.0) throw ConfigError("apollonius_radius: lambda >= 1 has no bounded circle");
    return lambda / (1.0 - lambda * lambda) * distance(k_ic, k_oc);
}

Vec apollonius_center(std::span<const double> k_ic, std::span<const double> k_oc, double lambda) {
    if (!(lambda > 0.0) || lambda >= 1.0) throw ConfigError("apollonius_center: lambda must lie in (0, 1)");
    const double l2 = lambda * lambda;
    Vec c(k_ic.size());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = (k_ic[i] - l2 * k_oc[i]) / (1.0 - l2);
    return c;
}

namespace {

void fold_running_mean(Vec& center, std::size_t& count, const std::vector<Vec>& added) {
    if (added.empty()) return;
    const double n0 = static_cast<double>(count);
    const double n1 = n0 + static_cast<double>(added.size());
    Vec sum(center.size(), 0.0);
    for (const auto& f : added)
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += f[i];
    for (std::size_t i = 0; i < center.size(); ++i) center[i] = (center[i] * n0 + sum[i]) / n1;
    count += added.size();
}

} // namespace

void update_centers(ApolloniusClassifier& clf, const std::vector<Vec>& new_id, const std::vector<Vec>& new_ood) {
    fold_running_mean(clf.k_ic, clf.id_count, new_id);
    fold_running_mean(clf.k_oc, clf.ood_count, new_ood);
}

json to_json(const JointSpaceState& s) {
    json j;
    j["standardizer"] = {{"mean", s.standardizer.mean}, {"std", s.standardizer.stddev}};
    j["cluster"] = {{"center", s.cluster.center}, {"radius", s.cluster.radius}, {"count", s.cluster.count}};
    j["candidates"] = json::array();
    for (const auto& c : s.candidates)
        j["candidates"].push_back(
            {{"index", c.index}, {"anchor", c.anchor}, {"normal", c.normal}, {"reference_mean", c.reference_mean}});
    j["chosen"] = s.chosen ? json(*s.chosen) : json(nullptr);
    j["rates"] = s.rates;
    if (s.apollonius) {
        const auto& a = *s.apollonius;
        j["apollonius"] = {{"k_ic", a.k_ic},         {"k_oc", a.k_oc},          {"lambda", a.lambda},
                           {"id_count", a.id_count}, {"ood_count", a.ood_count}};
    } else {
        j["apollonius"] = nullptr;
    }
    return j;
}

JointSpaceState joint_space_from_json(const json& j) {
    try {
        JointSpaceState s;
        s.standardizer.mean = j.at("standardizer").at("mean").get<Vec>();
        s.standardizer.stddev = j.at("standardizer").at("std").get<Vec>();
        s.cluster.center = j.at("cluster").at("center").get<Vec>();
        s.cluster.radius = j.at("cluster").at("radius");
        s.cluster.count = j.at("cluster").at("count");
        for (const auto& c : j.at("candidates"))
            s.candidates.push_back({c.at("index"), c.at("anchor").get<Vec>(), c.at("normal").get<Vec>(),
                                    c.at("reference_mean")});
        if (!j.at("chosen").is_null()) s.chosen = j.at("chosen").get<std::size_t>();
        s.rates = j.at("rates").get<std::vector<double>>();
        if (!j.at("apollonius").is_null()) {
            const auto& a = j.at("apollonius");
            s.apollonius = ApolloniusClassifier{a.at("k_ic").get<Vec>(), a.at("k_oc").get<Vec>(), a.at("lambda"),
                                                a.at("id_count"), a.at("ood_count")};
        }
        return s;
    } catch (const json::exception& e) {
        throw ArtifactError(std::string("malformed joint space JSON: ") + e.what());
    }
}

} // namespace possl
