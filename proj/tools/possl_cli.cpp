// possl: command-line driver for data generation, both training stages,
// evaluation, ablation sweeps and variant comparison.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 invalid flags or config,
// 3 missing/corrupt artifact, 4 training divergence.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "possl/data.hpp"
#include "possl/error.hpp"
#include "possl/eval.hpp"
#include "possl/io.hpp"
#include "possl/pipeline.hpp"
#include "possl/runner.hpp"

namespace fs = std::filesystem;
using namespace possl;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kBadConfig = 2, kBadArtifact = 3, kDiverged = 4 };

struct TrainFlags {
    std::string config_path;
    std::string out = "run";
    std::string data;
    std::optional<std::uint64_t> seed;
    std::optional<int> p, n_candidates, epochs_pretrain, epochs_finetune, batch_size, frame;
    std::optional<double> lambda, eta, lr, prompt_lr, momentum, ema;
    std::optional<std::string> consistency_mode, cl_sign;
    bool no_cl = false;
    bool replay_labeled = false;
    bool quiet = false;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
    cmd->add_option("--config", f.config_path, "JSON config file (flat keys)");
    cmd->add_option("--out", f.out, "run directory");
    cmd->add_option("--data", f.data, "dataset directory written by gen-data");
    cmd->add_option("--seed", f.seed, "random seed");
    cmd->add_option("--p", f.p, "prompt width in pixels");
    cmd->add_option("--n-candidates", f.n_candidates, "number of tangent candidates N");
    cmd->add_option("--lambda", f.lambda, "Apollonius ratio threshold");
    cmd->add_option("--eta", f.eta, "pseudo-label confidence threshold");
    cmd->add_option("--lr", f.lr, "pre-training learning rate");
    cmd->add_option("--prompt-lr", f.prompt_lr, "fine-tuning (prompt) learning rate");
    cmd->add_option("--momentum", f.momentum, "SGD momentum");
    cmd->add_option("--ema", f.ema, "teacher EMA decay");
    cmd->add_option("--epochs-pretrain", f.epochs_pretrain, "pre-training epochs");
    cmd->add_option("--epochs-finetune", f.epochs_finetune, "fine-tuning epochs");
    cmd->add_option("--batch-size", f.batch_size, "batch size");
    cmd->add_option("--frame", f.frame, "prompt frame side length");
    cmd->add_option("--consistency-mode", f.consistency_mode, "literal | absolute");
    cmd->add_option("--cl-sign", f.cl_sign, "+1 | -1");
    cmd->add_flag("--no-cl", f.no_cl, "disable the prompt-contrastive term");
    cmd->add_flag("--replay-labeled", f.replay_labeled, "replay labeled batches during fine-tuning");
    cmd->add_flag("--quiet", f.quiet, "suppress per-epoch progress lines");
}

// defaults < existing run config < --config file < flags
TrainConfig resolve_config(const TrainFlags& f, bool use_run_config) {
    TrainConfig cfg;
    const fs::path run_cfg = fs::path(f.out) / "config.json";
    if (use_run_config && fs::exists(run_cfg)) cfg.merge(read_json(run_cfg));
    if (!f.config_path.empty()) {
        if (!fs::exists(f.config_path)) throw ConfigError("config file not found: " + f.config_path);
        cfg.merge(read_json(f.config_path));
    }
    json o = json::object();
    if (f.seed) o["seed"] = *f.seed;
    if (f.p) o["p"] = *f.p;
    if (f.n_candidates) o["n_candidates"] = *f.n_candidates;
    if (f.lambda) o["lambda"] = *f.lambda;
    if (f.eta) o["eta"] = *f.eta;
    if (f.lr) o["lr"] = *f.lr;
    if (f.prompt_lr) o["prompt_lr"] = *f.prompt_lr;
    if (f.momentum) o["momentum"] = *f.momentum;
    if (f.ema) o["ema"] = *f.ema;
    if (f.epochs_pretrain) o["epochs_pretrain"] = *f.epochs_pretrain;
    if (f.epochs_finetune) o["epochs_finetune"] = *f.epochs_finetune;
    if (f.batch_size) o["batch_size"] = *f.batch_size;
    if (f.frame) o["frame"] = *f.frame;
    if (f.consistency_mode) o["consistency_mode"] = *f.consistency_mode;
    if (f.cl_sign) {
        const std::string& s = *f.cl_sign;
        if (s == "+1" || s == "1") o["cl_sign"] = 1;
        else if (s == "-1") o["cl_sign"] = -1;
        else throw ConfigError("--cl-sign must be +1 or -1");
    }
    if (f.no_cl) o["use_cl"] = false;
    if (f.replay_labeled) o["replay_labeled"] = true;
    cfg.merge(o);
    cfg.validate();
    return cfg;
}

OpenSetSplit load_data(const TrainFlags& f, const TrainConfig& cfg, bool allow_generate) {
    if (!f.data.empty()) return import_dataset(f.data);
    const fs::path local = fs::path(f.out) / "data";
    if (fs::exists(local / "manifest.json")) return import_dataset(local);
    if (!allow_generate) throw ArtifactError("no dataset: pass --data DIR (see gen-data)");
    OpenSetSplit split = default_synthetic(cfg.seed);
    export_dataset(split, local, cfg.seed, "synthetic");
    return split;
}

StageOptions stage_options(const TrainFlags& f) {
    StageOptions o;
    o.echo_progress = !f.quiet;
    o.hooks.log = [](const std::string& line) { std::cerr << line << '\n'; };
    return o;
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    for (std::string tok; std::getline(ss, tok, ',');) out.push_back(std::stoi(tok));
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prompt-driven open-set semi-supervised learning"};
    app.set_version_flag("--version", kToolVersion);
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset or split CIFAR-10 binaries");
    SyntheticConfig sc;
    std::string gen_out = "data";
    bool synthetic = false;
    std::vector<std::string> cifar_train;
    std::string cifar_test, id_class_list = "2,3,4,5,6,7";
    gen->add_flag("--synthetic", synthetic, "synthetic generator (default)");
    gen->add_option("--id-classes", sc.n_id_classes, "number of ID classes");
    gen->add_option("--ood-classes", sc.n_ood_classes, "number of OOD classes");
    gen->add_option("--side", sc.side, "image side length");
    gen->add_option("--labeled-per-class", sc.n_labeled_per_class, "labeled samples per ID class");
    gen->add_option("--unlabeled-per-class", sc.n_unlabeled_per_class, "unlabeled samples per class");
    gen->add_option("--test-per-class", sc.n_test_per_class, "test samples per class");
    gen->add_option("--noise", sc.noise, "pixel noise std");
    gen->add_option("--seed", sc.seed, "seed");
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--cifar-train", cifar_train, "CIFAR-10 binary batch files for labeled/unlabeled data");
    gen->add_option("--cifar-test", cifar_test, "CIFAR-10 binary test batch");
    gen->add_option("--id-class-list", id_class_list, "CIFAR-10 ID classes (default: the six animals)");

    TrainFlags pre_f, fine_f, eval_f, all_f;
    auto* pre = app.add_subcommand("pretrain", "pre-train encoder, classifier and ID prompt; build candidates");
    add_train_flags(pre, pre_f);
    auto* fine = app.add_subcommand("finetune", "prompt-only fine-tuning on unlabeled data");
    add_train_flags(fine, fine_f);
    auto* ev = app.add_subcommand("eval", "evaluate a fine-tuned run on the test split");
    add_train_flags(ev, eval_f);
    auto* all = app.add_subcommand("run-all", "pretrain + finetune + eval with one seed");
    add_train_flags(all, all_f);
    std::vector<std::string> ablate;
    bool parallel = false;
    all->add_option("--ablate", ablate, "Cartesian sweep axes, e.g. p=2,4,8 n=3,5 lambda=0.3,0.5")->expected(1, -1);
    all->add_flag("--parallel", parallel, "run sweep points concurrently");

    auto* cmp = app.add_subcommand("compare", "compare two variants run over the same seeds");
    std::vector<std::string> runs_a, runs_b;
    std::string name_a = "a", name_b = "b", cmp_out = "comparison";
    cmp->add_option("--a", runs_a, "run directories of variant A")->required()->expected(1, -1);
    cmp->add_option("--b", runs_b, "run directories of variant B")->required()->expected(1, -1);
    cmp->add_option("--name-a", name_a);
    cmp->add_option("--name-b", name_b);
    cmp->add_option("--out", cmp_out, "output directory for comparison.csv/.md");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kBadConfig;
    }

    try {
        if (*gen) {
            OpenSetSplit split;
            std::string source = "synthetic";
            if (!cifar_train.empty()) {
                std::vector<ImageSample> train, test;
                for (const auto& p : cifar_train) {
                    auto v = load_cifar10_binary(p);
                    train.insert(train.end(), v.begin(), v.end());
                }
                if (!cifar_test.empty()) test = load_cifar10_binary(cifar_test);
                split = make_open_set_split(train, parse_int_list(id_class_list), sc.n_labeled_per_class, sc.seed,
                                            std::move(test));
                source = "cifar10";
            } else {
                split = generate_synthetic(sc);
            }
            export_dataset(split, gen_out, sc.seed, source);
            std::cout << json{{"dataset", gen_out},
                              {"checksum", dataset_checksum(split)},
                              {"labeled", split.labeled.size()},
                              {"unlabeled", split.unlabeled.size()},
                              {"test", split.test.size()}}
                             .dump()
                      << std::endl;
        } else if (*pre) {
            const TrainConfig cfg = resolve_config(pre_f, false);
            const OpenSetSplit data = load_data(pre_f, cfg, true);
            stage_pretrain(data, cfg, pre_f.out, stage_options(pre_f));
        } else if (*fine) {
            const TrainConfig cfg = resolve_config(fine_f, true);
            if (!fs::exists(fs::path(fine_f.out) / "pretrained.ckpt"))
                throw ArtifactError("no pretrained checkpoint in " + fine_f.out + " (run pretrain first)");
            const OpenSetSplit data = load_data(fine_f, cfg, false);
            write_text(fs::path(fine_f.out) / "config.json", cfg.to_json().dump(2) + "\n");
            stage_finetune(data, cfg, fine_f.out, stage_options(fine_f));
        } else if (*ev) {
            const TrainConfig cfg = resolve_config(eval_f, true);
            const OpenSetSplit data = load_data(eval_f, cfg, false);
            const RunMetrics m = stage_eval(data, cfg, eval_f.out);
            std::cout << m.to_json().dump() << std::endl;
        } else if (*all) {
            const TrainConfig cfg = resolve_config(all_f, false);
            const OpenSetSplit data = load_data(all_f, cfg, true);
            if (!ablate.empty()) {
                std::vector<AblationAxis> axes;
                for (const auto& a : ablate) axes.push_back(parse_ablation_axis(a));
                const auto runs = run_ablation(data, cfg, axes, all_f.out, parallel, stage_options(all_f));
                for (const auto& r : runs)
                    std::cout << json{{"run", r.name}, {"auroc", r.metrics.auroc}, {"accuracy", r.metrics.accuracy}}.dump()
                              << std::endl;
            } else {
                const RunMetrics m = run_all(data, cfg, all_f.out, stage_options(all_f));
                std::cout << m.to_json().dump() << std::endl;
            }
        } else if (*cmp) {
            std::vector<RunMetrics> a, b;
            for (const auto& d : runs_a) a.push_back(RunMetrics::from_json(read_json(fs::path(d) / "metrics.json")));
            for (const auto& d : runs_b) b.push_back(RunMetrics::from_json(read_json(fs::path(d) / "metrics.json")));
            const VariantComparison c = compare_variants(a, b, name_a, name_b);
            write_text(fs::path(cmp_out) / "comparison.csv", c.to_csv());
            write_text(fs::path(cmp_out) / "comparison.md", c.to_markdown());
            std::cout << c.to_markdown();
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kBadConfig;
    } catch (const GeometryError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kBadConfig;
    } catch (const ArtifactError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kBadArtifact;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kBadArtifact;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kDiverged;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
    return kOk;
}
