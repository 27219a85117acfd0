#include "doctest.h"

#include <cmath>

#include "possl/eval.hpp"
#include "test_util.hpp"

using namespace possl;

namespace {

std::vector<ScoredSample> tagged(const std::vector<double>& scores, const std::vector<TruthTag>& tags) {
    std::vector<ScoredSample> out;
    for (std::size_t i = 0; i < scores.size(); ++i) out.push_back({scores[i], tags[i], std::nullopt, std::nullopt});
    return out;
}

RunMetrics metrics(std::uint64_t seed, double auroc, std::string split = "s") {
    RunMetrics m;
    m.seed = seed;
    m.auroc = auroc;
    m.split_checksum = std::move(split);
    return m;
}

constexpr TruthTag I = TruthTag::Id, O = TruthTag::Ood;

} // namespace

TEST_CASE("auroc examples") {
    CHECK(auroc(tagged({0.1, 0.2, 0.8, 0.9}, {I, I, O, O})) == 1.0);
    CHECK(auroc(tagged({0.5, 0.5, 0.5, 0.5, 0.5}, {I, O, I, O, O})) == 0.5);
    CHECK(auroc(tagged({0.9, 0.8, 0.3, 0.1}, {O, I, O, I})) == 0.75);
    CHECK(auroc(tagged({0.9, 0.1}, {I, O})) == 0.0);
    CHECK_THROWS_AS(auroc(tagged({0.1, 0.2}, {I, I})), ConfigError);
    CHECK_THROWS_AS(auroc(tagged({0.1, 0.2}, {O, O})), ConfigError);
    CHECK_THROWS(auroc(tagged({NAN, 0.2}, {I, O})));
}

TEST_CASE("auroc equals the pairwise brute force") {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<std::size_t> size(2, 500);
    for (int t = 0; t < 60; ++t) {
        const auto s = testing::random_scored(size(rng), rng, t % 2 == 0);
        CHECK(auroc(s) == testing::brute_auroc(s));
    }
}

TEST_CASE("auroc is rank based") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 20; ++t) {
        auto s = testing::random_scored(100, rng, false);
        const double a = auroc(s);
        auto mapped = s, negated = s;
        for (auto& x : mapped) x.ood_score = std::exp(3.0 * x.ood_score) - 7.0;
        for (auto& x : negated) x.ood_score = -x.ood_score;
        CHECK(auroc(mapped) == doctest::Approx(a).epsilon(1e-15));
        CHECK(a + auroc(negated) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("closed-set accuracy") {
    std::vector<ScoredSample> s{{0, I, 1, 1}, {0, I, 0, 0}, {0, O, 5, std::nullopt}};
    CHECK(closed_set_accuracy(s) == 1.0);

    // 20 hand-labeled rows: 13 correct of 16 ID rows, 4 OOD rows ignored
    const std::vector<int> pred{0, 1, 2, 0, 1, 1, 2, 0, 0, 1, 2, 2, 0, 1, 2, 0};
    const std::vector<int> truth{0, 1, 2, 0, 1, 2, 2, 0, 1, 1, 2, 0, 0, 1, 2, 0};
    std::vector<ScoredSample> rows;
    for (std::size_t i = 0; i < pred.size(); ++i) rows.push_back({0, I, pred[i], truth[i]});
    for (int i = 0; i < 4; ++i) rows.push_back({0, O, 0, std::nullopt});
    CHECK(closed_set_accuracy(rows) == doctest::Approx(13.0 / 16.0));

    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> k(0, 3);
    std::vector<ScoredSample> chance;
    for (int i = 0; i < 4000; ++i) chance.push_back({0, I, k(rng), i % 4});
    CHECK(closed_set_accuracy(chance) == doctest::Approx(0.25).epsilon(0.1));

    CHECK_THROWS_AS(closed_set_accuracy({{0, O, 1, std::nullopt}}), ConfigError);
    CHECK_THROWS_AS(closed_set_accuracy({{0, I, std::nullopt, 1}}), ConfigError);
}

TEST_CASE("metrics JSON round trip") {
    const auto s = tagged({0.9, 0.8, 0.3, 0.1}, {O, I, O, I});
    std::vector<ScoredSample> withpred = s;
    withpred[1].predicted = withpred[1].truth = 0;
    withpred[3].predicted = 1;
    withpred[3].truth = 0;
    const RunMetrics m = evaluate_scores(withpred, 5, "abc", "split");
    CHECK(m.auroc == 0.75);
    CHECK(m.accuracy == 0.5);
    CHECK(m.n_id == 2);
    CHECK(m.n_ood == 2);
    const RunMetrics back = RunMetrics::from_json(json::parse(m.to_json().dump()));
    CHECK(back.to_json() == m.to_json());
    for (const char* key : {"auroc", "accuracy", "n_id", "n_ood", "seed", "config_hash"})
        CHECK(m.to_json().contains(key));
    CHECK_THROWS_AS(RunMetrics::from_json(json{{"auroc", 1.0}}), ArtifactError);
}

TEST_CASE("variant comparison") {
    const std::vector<RunMetrics> a{metrics(0, 0.9), metrics(1, 0.8), metrics(2, 0.95)};
    const std::vector<RunMetrics> b{metrics(0, 0.85), metrics(1, 0.8), metrics(2, 0.7)};
    const auto same = compare_variants(a, a);
    for (double d : same.delta) CHECK(d == 0.0);
    CHECK(same.mean_delta == 0.0);

    const auto ab = compare_variants(a, b, "full", "ablated"), ba = compare_variants(b, a);
    for (std::size_t i = 0; i < 3; ++i) CHECK(ab.delta[i] == -ba.delta[i]);
    CHECK(ab.mean_delta == doctest::Approx(-ba.mean_delta));
    CHECK(ab.std_delta == doctest::Approx(ba.std_delta));
    CHECK(ab.seeds == std::vector<std::uint64_t>{0, 1, 2});

    const double m = (0.9 + 0.8 + 0.95) / 3;
    const double sd = std::sqrt(((0.9 - m) * (0.9 - m) + (0.8 - m) * (0.8 - m) + (0.95 - m) * (0.95 - m)) / 2);
    CHECK(ab.mean_a == doctest::Approx(m).epsilon(1e-14));
    CHECK(ab.std_a == doctest::Approx(sd).epsilon(1e-12));
    CHECK(ab.mean_delta == doctest::Approx((0.05 + 0.0 + 0.25) / 3).epsilon(1e-12));
    CHECK(mean_std({4.0}) == std::pair{4.0, 0.0});

    CHECK(ab.to_csv().find("full") != std::string::npos);
    CHECK(ab.to_markdown().find("|") != std::string::npos);

    const std::vector<RunMetrics> other{metrics(0, 0.9, "t"), metrics(1, 0.8), metrics(2, 0.95)};
    CHECK_THROWS(compare_variants(other, b));
    CHECK_THROWS(compare_variants(a, {metrics(0, 0.9)}));
}
