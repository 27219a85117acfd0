#include "possl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "possl/error.hpp"

namespace possl {

double auroc(const std::vector<ScoredSample>& scored) {
    std::vector<std::pair<double, bool>> s;  // (score, is_ood)
    s.reserve(scored.size());
    std::size_t n_ood = 0;
    for (const auto& x : scored) {
        if (!std::isfinite(x.ood_score)) throw NumericError("auroc: non-finite score");
        const bool ood = x.truth_tag == TruthTag::Ood;
        n_ood += ood;
        s.emplace_back(x.ood_score, ood);
    }
    const std::size_t n_id = s.size() - n_ood;
    if (n_ood == 0 || n_id == 0) throw ConfigError("auroc needs at least one ID and one OOD sample");
    std::sort(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

    // For each tie group: OOD members beat every ID sample below the group
    // and split credit with the ID members inside it.
    double wins = 0.0;
    std::size_t id_below = 0;
    for (std::size_t i = 0; i < s.size();) {
        std::size_t j = i, group_ood = 0, group_id = 0;
        while (j < s.size() && s[j].first == s[i].first) {
            (s[j].second ? group_ood : group_id)++;
            ++j;
        }
        wins += static_cast<double>(group_ood) * (static_cast<double>(id_below) + 0.5 * static_cast<double>(group_id));
        id_below += group_id;
        i = j;
    }
    return wins / (static_cast<double>(n_ood) * static_cast<double>(n_id));
}

double closed_set_accuracy(const std::vector<ScoredSample>& scored) {
    std::size_t n = 0, correct = 0;
    for (const auto& x : scored) {
        if (x.truth_tag != TruthTag::Id) continue;
        if (!x.predicted || !x.truth) throw ConfigError("closed_set_accuracy: ID sample lacks predicted/true class");
        ++n;
        correct += *x.predicted == *x.truth;
    }
    if (n == 0) throw ConfigError("closed_set_accuracy: no ID samples");
    return static_cast<double>(correct) / static_cast<double>(n);
}

json RunMetrics::to_json() const {
    return {{"auroc", auroc},     {"accuracy", accuracy},       {"n_id", n_id},
            {"n_ood", n_ood},     {"seed", seed},               {"config_hash", config_hash},
            {"split_checksum", split_checksum}};
}

RunMetrics RunMetrics::from_json(const json& j) {
    try {
        RunMetrics m;
        m.auroc = j.at("auroc");
        m.accuracy = j.at("accuracy");
        m.n_id = j.at("n_id");
        m.n_ood = j.at("n_ood");
        m.seed = j.at("seed");
        m.config_hash = j.at("config_hash");
        m.split_checksum = j.value("split_checksum", "");
        return m;
    } catch (const json::exception& e) {
        throw ArtifactError(std::string("malformed metrics JSON: ") + e.what());
    }
}

RunMetrics evaluate_scores(const std::vector<ScoredSample>& scored, std::uint64_t seed, std::string config_hash,
                           std::string split_checksum) {
    RunMetrics m;
    m.auroc = auroc(scored);
    m.accuracy = closed_set_accuracy(scored);
    for (const auto& x : scored) (x.truth_tag == TruthTag::Id ? m.n_id : m.n_ood)++;
    m.seed = seed;
    m.config_hash = std::move(config_hash);
    m.split_checksum = std::move(split_checksum);
    return m;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {0.0, 0.0};
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    if (v.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

VariantComparison compare_variants(const std::vector<RunMetrics>& a, const std::vector<RunMetrics>& b,
                                   std::string name_a, std::string name_b) {
    if (a.size() != b.size() || a.empty()) throw ConfigError("compare_variants: need the same non-zero number of runs");
    VariantComparison r;
    r.name_a = std::move(name_a);
    r.name_b = std::move(name_b);
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].seed != b[i].seed) throw ConfigError("compare_variants: runs are not paired by seed");
        if (a[i].split_checksum != b[i].split_checksum)
            throw ConfigError("compare_variants: split checksums differ for seed " + std::to_string(a[i].seed));
        r.seeds.push_back(a[i].seed);
        r.auroc_a.push_back(a[i].auroc);
        r.auroc_b.push_back(b[i].auroc);
        r.delta.push_back(a[i].auroc - b[i].auroc);
    }
    std::tie(r.mean_a, r.std_a) = mean_std(r.auroc_a);
    std::tie(r.mean_b, r.std_b) = mean_std(r.auroc_b);
    std::tie(r.mean_delta, r.std_delta) = mean_std(r.delta);
    return r;
}

std::string VariantComparison::to_csv() const {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "seed,auroc_" << name_a << ",auroc_" << name_b << ",delta\n";
    for (std::size_t i = 0; i < seeds.size(); ++i)
        os << seeds[i] << ',' << auroc_a[i] << ',' << auroc_b[i] << ',' << delta[i] << '\n';
    os << "mean," << mean_a << ',' << mean_b << ',' << mean_delta << '\n';
    os << "std," << std_a << ',' << std_b << ',' << std_delta << '\n';
    return os.str();
}

std::string VariantComparison::to_markdown() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1);
    os << "| Variant | AUROC (mean ± std, %) |\n|---|---|\n";
    os << "| " << name_a << " | " << 100 * mean_a << " ± " << 100 * std_a << " |\n";
    os << "| " << name_b << " | " << 100 * mean_b << " ± " << 100 * std_b << " |\n";
    os << "| delta | " << 100 * mean_delta << " ± " << 100 * std_delta << " |\n";
    return os.str();
}

} // namespace possl
