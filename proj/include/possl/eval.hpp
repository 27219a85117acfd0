#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "possl/data.hpp"
#include "possl/io.hpp"

namespace possl {

struct ScoredSample {
    double ood_score = 0.0;
    TruthTag truth_tag = TruthTag::Id;
    std::optional<int> predicted;
    std::optional<int> truth;
};

// Mann-Whitney statistic with OOD as the positive class: P(score_ood > score_id)
// plus half credit for ties.
double auroc(const std::vector<ScoredSample>& scored);

// Fraction of ID samples whose prediction matches; OOD samples are ignored.
double closed_set_accuracy(const std::vector<ScoredSample>& scored);

struct RunMetrics {
    double auroc = 0.0;
    double accuracy = 0.0;
    std::size_t n_id = 0;
    std::size_t n_ood = 0;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string split_checksum;  // identifies the evaluation split

    json to_json() const;
    static RunMetrics from_json(const json& j);
};

RunMetrics evaluate_scores(const std::vector<ScoredSample>& scored, std::uint64_t seed, std::string config_hash,
                           std::string split_checksum);

struct VariantComparison {
    std::string name_a;
    std::string name_b;
    std::vector<std::uint64_t> seeds;
    std::vector<double> auroc_a;
    std::vector<double> auroc_b;
    std::vector<double> delta;  // a - b per seed
    double mean_a = 0.0, std_a = 0.0;
    double mean_b = 0.0, std_b = 0.0;
    double mean_delta = 0.0, std_delta = 0.0;

    std::string to_csv() const;
    std::string to_markdown() const;
};

// Runs are paired by seed; every pair must share the split checksum.
VariantComparison compare_variants(const std::vector<RunMetrics>& a, const std::vector<RunMetrics>& b,
                                   std::string name_a = "a", std::string name_b = "b");

// Sample mean and standard deviation (n - 1 denominator, 0 for n < 2).
std::pair<double, double> mean_std(const std::vector<double>& v);

} // namespace possl
