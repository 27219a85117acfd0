#include "doctest.h"

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "possl/pipeline.hpp"
#include "possl/runner.hpp"
#include "test_util.hpp"

using namespace possl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("possl_pipe_" + std::to_string(::getpid())) / name;
    fs::remove_all(p);
    fs::create_directories(p.parent_path());
    return p;
}

// Runs the CLI with stdout captured to `out_file`; returns the exit status.
int cli(const std::string& args, const fs::path& out_file = "/dev/null") {
    const std::string cmd = std::string(POSSL_CLI_PATH) + " " + args + " > " + out_file.string() + " 2>/dev/null";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

TrainConfig quick_config(std::uint64_t seed) {
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.epochs_pretrain = 10;
    cfg.epochs_finetune = 3;
    return cfg;
}

struct Fixture {
    OpenSetSplit data;
    TrainConfig cfg;
    PretrainedState pre;
    FinetunedState fine;
};

// Seed 0 keeps the per-step losses active on the default benchmark.
const Fixture& seed0() {
    static const Fixture f = [] {
        OpenSetSplit data = remap_id_labels(default_synthetic(0));
        const TrainConfig cfg = quick_config(0);
        PretrainedState pre = pretrain(data.labeled, static_cast<int>(data.id_classes.size()), cfg);
        FinetunedState fine = finetune(pre, data.unlabeled, cfg);
        return Fixture{std::move(data), cfg, std::move(pre), std::move(fine)};
    }();
    return f;
}

} // namespace

TEST_CASE("pre-training fits the labeled classes") {
    for (std::uint64_t seed : {0, 1, 2}) {
        const OpenSetSplit d = remap_id_labels(default_synthetic(seed));
        const PretrainedState s = pretrain(d.labeled, 2, quick_config(seed));
        INFO("seed " << seed);
        CHECK(s.train_accuracy >= 0.95);
        CHECK(s.joint.candidates.size() == 5);
        CHECK(s.model.frozen(ParamGroup::Encoder));
        CHECK(s.model.frozen(ParamGroup::Classifier));
        CHECK(s.id_prompt.params().size() == param_count(4, 3, 32, 32));
    }
}

TEST_CASE("pre-training is deterministic") {
    const OpenSetSplit d = remap_id_labels(default_synthetic(3));
    TrainConfig cfg = quick_config(3);
    cfg.epochs_pretrain = 2;
    const PretrainedState a = pretrain(d.labeled, 2, cfg), b = pretrain(d.labeled, 2, cfg);
    CHECK(a.model.checksum() == b.model.checksum());
    CHECK(a.id_prompt == b.id_prompt);
    CHECK(to_json(a.joint) == to_json(b.joint));
}

TEST_CASE("fine-tuning trains only the two prompts") {
    const Fixture& f = seed0();
    CHECK(f.fine.trainable_parameter_count() == 2 * param_count(f.cfg.p, 3, f.cfg.frame, f.cfg.frame));
    CHECK(f.fine.backbone_checksum == f.pre.model.checksum());
    CHECK(f.fine.ts.student.model.same_parameters(f.pre.model));
    CHECK(f.fine.ts.teacher.model.same_parameters(f.pre.model));
    CHECK(f.fine.ts.student.id_prompt.params() != f.pre.id_prompt.params());
    CHECK(norm(f.fine.ts.student.ood_prompt.params()) > 0.0);
    CHECK_THROWS_AS(finetune(PretrainedState{MiniModel({3, 32, 32, 8, 16, 32, 2}, 1), f.pre.id_prompt, f.pre.joint},
                             f.data.unlabeled, f.cfg),
                    ConfigError);
}

TEST_CASE("fine-tuning history keeps the loss breakdown consistent") {
    const Fixture& f = seed0();
    REQUIRE_FALSE(f.fine.history.empty());
    std::size_t active = 0;
    for (const auto& row : f.fine.history) {
        CHECK(row.total == doctest::Approx(row.l_s + row.l_c + row.l_cl).epsilon(1e-12));
        CHECK(std::isfinite(row.total));
        active += row.l_c > 0.0;
    }
    CHECK(active > 0);
}

TEST_CASE("predictions and OOD scores") {
    const Fixture& f = seed0();
    for (std::size_t i = 0; i < 20; ++i) {
        const Prediction p = predict(f.fine, f.data.test[i].pixels, f.cfg.frame);
        double sum = 0.0;
        for (double q : p.probabilities) sum += q;
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(p.ood_score >= 0.0);
    }
    const auto scored = score_samples(f.fine, f.data.test, f.cfg.frame);
    double id = 0.0, ood = 0.0;
    std::size_t nid = 0, nood = 0;
    for (const auto& s : scored) (s.truth_tag == TruthTag::Ood ? (ood += s.ood_score, ++nood) : (id += s.ood_score, ++nid));
    CHECK(ood / nood > id / nid);
    CHECK(auroc(scored) >= 0.9);
    CHECK(closed_set_accuracy(scored) >= 0.9);
}

TEST_CASE("teacher prompts converge to a fixed student under EMA") {
    TeacherStudent ts = seed0().fine.ts;
    double prev = distance(ts.teacher.id_prompt.params(), ts.student.id_prompt.params()) +
                  distance(ts.teacher.ood_prompt.params(), ts.student.ood_prompt.params());
    for (int k = 0; k < 2000; ++k) ema_update(ts);
    const double after = distance(ts.teacher.id_prompt.params(), ts.student.id_prompt.params()) +
                         distance(ts.teacher.ood_prompt.params(), ts.student.ood_prompt.params());
    CHECK(after <= prev * std::pow(ts.ema_decay, 2000) * 1.0001 + 1e-15);
    CHECK(ts.teacher.model.same_parameters(ts.student.model));
}

TEST_CASE("stage states round-trip through checkpoints") {
    const Fixture& f = seed0();
    const PretrainedState pre = PretrainedState::from_checkpoint(Checkpoint::decode(f.pre.to_checkpoint().encode()));
    CHECK(pre.model.same_parameters(f.pre.model));
    CHECK(pre.id_prompt == f.pre.id_prompt);
    const FinetunedState fine =
        FinetunedState::from_checkpoint(Checkpoint::decode(f.fine.to_checkpoint().encode()), to_json(f.fine.joint));
    CHECK(fine.ts.teacher.id_prompt == f.fine.ts.teacher.id_prompt);
    CHECK(fine.ts.student.ood_prompt == f.fine.ts.student.ood_prompt);
    for (std::size_t i = 0; i < 10; ++i)
        CHECK(predict(fine, f.data.test[i].pixels, f.cfg.frame).ood_score ==
              predict(f.fine, f.data.test[i].pixels, f.cfg.frame).ood_score);
}

TEST_CASE("train config validation and serialization") {
    TrainConfig cfg;
    cfg.lambda = 0.3;
    cfg.seed = 9;
    const TrainConfig back = TrainConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
    CHECK(back.hash() == cfg.hash());
    TrainConfig other = cfg;
    other.lambda = 0.5;
    CHECK(other.hash() != cfg.hash());
    CHECK_THROWS_AS(cfg.merge(json{{"no_such_key", 1}}), ConfigError);
    for (const json& bad : {json{{"lambda", 0.0}}, json{{"lambda", 1.5}}, json{{"cl_sign", 0}}, json{{"eta", 1.5}},
                            json{{"consistency_mode", "sideways"}}}) {
        TrainConfig c;
        INFO(bad.dump());
        CHECK_THROWS_AS((c.merge(bad), c.validate()), ConfigError);
    }
}

TEST_CASE("ablation axes") {
    const AblationAxis l = parse_ablation_axis("lambda=0.1,0.3,0.5");
    CHECK(l.key == "lambda");
    CHECK(l.values.size() == 3);
    CHECK(parse_ablation_axis("n=3,5").key == "n_candidates");
    CHECK_THROWS_AS(parse_ablation_axis("lambda"), ConfigError);
    CHECK_THROWS_AS(parse_ablation_axis("bogus=1,2"), ConfigError);
}

TEST_CASE("command line: data generation") {
    const fs::path a = scratch("gen_a"), b = scratch("gen_b") / "nested";
    const std::string args = "gen-data --synthetic --id-classes 2 --ood-classes 1 --seed 7 --out ";
    REQUIRE(cli(args + a.string(), a.string() + ".out") == 0);
    REQUIRE(cli(args + b.string(), a.string() + ".out2") == 0);
    CHECK(json::parse(slurp(a.string() + ".out")).at("checksum") == json::parse(slurp(a.string() + ".out2")).at("checksum"));
    CHECK(fs::exists(b / "manifest.json"));
    CHECK(cli("gen-data --ood-classes 0 --out " + scratch("gen_bad").string()) == 2);
}

TEST_CASE("command line: staging and corrupt artifacts") {
    const fs::path run = scratch("stages");
    CHECK(cli("finetune --out " + run.string()) == 3);
    const std::string quick = " --seed 0 --epochs-pretrain 3 --epochs-finetune 1 --quiet --out " + run.string();
    REQUIRE(cli("pretrain" + quick) == 0);
    REQUIRE(cli("finetune" + quick) == 0);
    REQUIRE(cli("eval" + quick, run / "eval.json") == 0);
    CHECK(json::parse(slurp(run / "eval.json")).contains("auroc"));

    auto bytes = read_file(run / "pretrained.ckpt");
    bytes[bytes.size() / 2] ^= 0x01;
    write_file(run / "pretrained.ckpt", bytes);
    CHECK(cli("finetune" + quick) == 3);
    CHECK(cli("run-all --lambda 2 --out " + scratch("badlam").string()) == 2);
}

TEST_CASE("command line: run-all artifacts and reproducibility") {
    const fs::path a = scratch("ra_a"), b = scratch("ra_b");
    const std::string quick = " --seed 0 --epochs-pretrain 3 --epochs-finetune 2 --lambda 0.3 --quiet";
    REQUIRE(cli("run-all" + quick + " --out " + a.string()) == 0);
    REQUIRE(cli("run-all" + quick + " --out " + b.string()) == 0);
    CHECK(slurp(a / "metrics.json") == slurp(b / "metrics.json"));
    CHECK(json::parse(slurp(a / "config.json")).at("lambda") == 0.3);
    CHECK(json::parse(slurp(a / "config.json")).at("epochs_finetune") == 2);

    std::istringstream csv(slurp(a / "losses.csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "step,l_s,l_c,l_cl,total,n_confident");
    std::size_t rows = 0;
    while (std::getline(csv, line)) {
        std::istringstream row(line);
        std::vector<double> cells;
        for (std::string cell; std::getline(row, cell, ',');) cells.push_back(std::stod(cell));
        REQUIRE(cells.size() == 6);
        CHECK(cells[4] == doctest::Approx(cells[1] + cells[2] + cells[3]).epsilon(1e-12));
        ++rows;
    }
    CHECK(rows > 0);
    const json manifest = json::parse(slurp(a / "run_manifest.json"));
    for (const auto& [name, sum] : manifest.at("artifacts").items()) CHECK(fs::exists(a / name));
}

TEST_CASE("command line: ablation grid") {
    const fs::path out = scratch("ablate");
    REQUIRE(cli("run-all --seed 1 --epochs-pretrain 2 --epochs-finetune 1 --quiet --parallel --out " + out.string() +
                " --ablate lambda=0.3,0.5 n=3,5") == 0);
    std::istringstream csv(slurp(out / "summary.csv"));
    std::string line;
    std::size_t rows = 0;
    std::getline(csv, line);
    CHECK(line == "run,lambda,n_candidates,auroc,accuracy");
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == 4);
    std::size_t dirs = 0;
    for (const auto& e : fs::directory_iterator(out)) dirs += e.is_directory() && fs::exists(e.path() / "metrics.json");
    CHECK(dirs == 4);
}
