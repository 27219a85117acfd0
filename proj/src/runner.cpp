#include "possl/runner.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <future>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "possl/error.hpp"
#include "possl/io.hpp"

namespace fs = std::filesystem;

namespace possl {

OpenSetSplit remap_id_labels(const OpenSetSplit& split) {
    OpenSetSplit out = split;
    auto pos = [&](int c) -> std::optional<int> {
        const auto it = std::find(split.id_classes.begin(), split.id_classes.end(), c);
        if (it == split.id_classes.end()) return std::nullopt;
        return static_cast<int>(it - split.id_classes.begin());
    };
    for (auto& s : out.labeled) {
        const auto p = pos(*s.label);
        if (!p) throw ConfigError("labeled sample with class " + std::to_string(*s.label) + " outside O_l");
        s.label = *p;
    }
    for (auto& s : out.test)
        if (s.label && s.truth_tag == TruthTag::Id) s.label = pos(*s.label);
    return out;
}

std::string dataset_checksum(const OpenSetSplit& split) {
    std::vector<std::uint8_t> bytes;
    auto part = [&](const std::vector<ImageSample>& v, char tag) {
        bytes.push_back(static_cast<std::uint8_t>(tag));
        for (const auto& s : v) {
            append_f32_le(bytes, s.pixels.data);
            const std::vector<double> meta{static_cast<double>(s.label.value_or(-1)),
                                           s.truth_tag == TruthTag::Id ? 0.0 : 1.0};
            append_f32_le(bytes, meta);
        }
    };
    part(split.labeled, 'L');
    part(split.unlabeled, 'U');
    part(split.test, 'T');
    return sha256_hex(bytes);
}

OpenSetSplit default_synthetic(std::uint64_t seed) {
    SyntheticConfig sc;
    sc.seed = seed;
    return generate_synthetic(sc);
}

namespace {

class RunLog {
public:
    RunLog(const fs::path& path, bool truncate)
        : out_(path, truncate ? std::ios::trunc : std::ios::app) {
        if (!out_) throw Error("cannot open " + path.string());
    }
    void operator()(const std::string& line) {
        std::lock_guard lock(mu_);
        out_ << line << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
    std::mutex mu_;
};

json load_manifest(const fs::path& run_dir) {
    const fs::path p = run_dir / "run_manifest.json";
    if (!fs::exists(p)) return json::object();
    return read_json(p);
}

void save_manifest(const fs::path& run_dir, const json& m) { write_text(run_dir / "run_manifest.json", m.dump(2) + "\n"); }

void record_artifact(json& manifest, const fs::path& run_dir, const std::string& name) {
    manifest["artifacts"][name] = sha256_file(run_dir / name);
}

void require_artifact(const json& manifest, const fs::path& run_dir, const std::string& name) {
    const fs::path p = run_dir / name;
    if (!fs::exists(p)) throw ArtifactError("missing artifact " + p.string() + " (run the upstream stage first)");
    if (!manifest.contains("artifacts") || !manifest["artifacts"].contains(name))
        throw ArtifactError("artifact " + name + " is not recorded in " + (run_dir / "run_manifest.json").string());
    if (sha256_file(p) != manifest["artifacts"][name].get<std::string>())
        throw ArtifactError("checksum mismatch for " + p.string());
}

Hooks wire_hooks(const StageOptions& opts, RunLog& log) {
    Hooks h = opts.hooks;
    auto user_log = opts.hooks.log;
    h.log = [&log, user_log](const std::string& line) {
        log(line);
        if (user_log) user_log(line);
    };
    auto user_epoch = opts.hooks.on_epoch;
    const bool echo = opts.echo_progress;
    h.on_epoch = [echo, user_epoch](const EpochProgress& p) {
        if (echo) std::cout << p.to_json().dump() << std::endl;
        if (user_epoch) user_epoch(p);
    };
    return h;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace

PretrainedState stage_pretrain(const OpenSetSplit& data, const TrainConfig& cfg, const fs::path& run_dir,
                               const StageOptions& opts) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(run_dir);
    RunLog log(run_dir / "events.log", true);
    const Hooks hooks = wire_hooks(opts, log);
    const OpenSetSplit split = remap_id_labels(data);

    write_text(run_dir / "config.json", cfg.to_json().dump(2) + "\n");
    hooks.log("pretrain: seed=" + std::to_string(cfg.seed) + " labeled=" + std::to_string(split.labeled.size()) +
              " config_hash=" + cfg.hash());
    PretrainedState st = pretrain(split.labeled, static_cast<int>(split.id_classes.size()), cfg, hooks);
    st.to_checkpoint().save(run_dir / "pretrained.ckpt");

    json m = json::object();
    m["tool_version"] = kToolVersion;
    m["config"] = cfg.to_json();
    m["dataset_checksum"] = dataset_checksum(data);
    m["artifacts"] = json::object();
    record_artifact(m, run_dir, "config.json");
    record_artifact(m, run_dir, "pretrained.ckpt");
    m["timings"]["pretrain_s"] = seconds_since(t0);
    save_manifest(run_dir, m);
    return st;
}

FinetunedState stage_finetune(const OpenSetSplit& data, const TrainConfig& cfg, const fs::path& run_dir,
                              const StageOptions& opts) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    json m = load_manifest(run_dir);
    require_artifact(m, run_dir, "pretrained.ckpt");
    if (m.value("dataset_checksum", "") != dataset_checksum(data))
        throw ArtifactError("dataset does not match the one used for pre-training");
    const PretrainedState pre = PretrainedState::from_checkpoint(Checkpoint::load(run_dir / "pretrained.ckpt"));

    RunLog log(run_dir / "events.log", false);
    StageOptions o = opts;
    const OpenSetSplit split = remap_id_labels(data);
    if (opts.echo_progress && !o.hooks.validate)
        o.hooks.validate = [&](const FinetunedState& s) -> std::optional<double> {
            return auroc(score_samples(s, split.test, cfg.frame));
        };
    const Hooks hooks = wire_hooks(o, log);

    FinetunedState ft = finetune(pre, split.unlabeled, cfg, hooks, &split.labeled);
    ft.to_checkpoint().save(run_dir / "finetuned.ckpt");
    write_text(run_dir / "jointspace.json", to_json(ft.joint).dump(2) + "\n");
    std::string csv = loss_csv_header();
    for (std::size_t i = 0; i < ft.history.size(); ++i) csv += loss_csv_row(i, ft.history[i]);
    write_text(run_dir / "losses.csv", csv);

    m["config"] = cfg.to_json();
    record_artifact(m, run_dir, "finetuned.ckpt");
    record_artifact(m, run_dir, "jointspace.json");
    record_artifact(m, run_dir, "losses.csv");
    m["timings"]["finetune_s"] = seconds_since(t0);
    save_manifest(run_dir, m);
    return ft;
}

RunMetrics stage_eval(const OpenSetSplit& data, const TrainConfig& cfg, const fs::path& run_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    json m = load_manifest(run_dir);
    require_artifact(m, run_dir, "finetuned.ckpt");
    require_artifact(m, run_dir, "jointspace.json");
    const FinetunedState ft =
        FinetunedState::from_checkpoint(Checkpoint::load(run_dir / "finetuned.ckpt"), read_json(run_dir / "jointspace.json"));
    const OpenSetSplit split = remap_id_labels(data);
    if (split.test.empty()) throw ConfigError("eval: dataset has no test split");
    const RunMetrics metrics =
        evaluate_scores(score_samples(ft, split.test, cfg.frame), cfg.seed, cfg.hash(), dataset_checksum(data));
    write_text(run_dir / "metrics.json", metrics.to_json().dump(2) + "\n");
    record_artifact(m, run_dir, "metrics.json");
    m["timings"]["eval_s"] = seconds_since(t0);
    save_manifest(run_dir, m);
    RunLog log(run_dir / "events.log", false);
    std::ostringstream os;
    os << "eval: auroc=" << metrics.auroc << " accuracy=" << metrics.accuracy;
    log(os.str());
    return metrics;
}

RunMetrics run_all(const OpenSetSplit& data, const TrainConfig& cfg, const fs::path& run_dir,
                   const StageOptions& opts) {
    stage_pretrain(data, cfg, run_dir, opts);
    stage_finetune(data, cfg, run_dir, opts);
    return stage_eval(data, cfg, run_dir);
}

AblationAxis parse_ablation_axis(const std::string& text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == text.size())
        throw ConfigError("ablation axis must look like key=v1,v2,...: '" + text + "'");
    AblationAxis axis;
    axis.key = text.substr(0, eq);
    if (axis.key == "n") axis.key = "n_candidates";
    if (axis.key == "lam") axis.key = "lambda";
    std::stringstream ss(text.substr(eq + 1));
    for (std::string tok; std::getline(ss, tok, ',');) {
        try {
            axis.values.push_back(json::parse(tok));
        } catch (const json::exception&) {
            axis.values.push_back(tok);
        }
    }
    TrainConfig probe;
    for (const auto& v : axis.values) probe.merge(json{{axis.key, v}});
    return axis;
}

std::vector<AblationRun> run_ablation(const OpenSetSplit& data, const TrainConfig& base,
                                      const std::vector<AblationAxis>& axes, const fs::path& out_dir, bool parallel,
                                      const StageOptions& opts) {
    std::vector<AblationRun> runs{{"", base, {}}};
    for (const auto& axis : axes) {
        std::vector<AblationRun> next;
        for (const auto& r : runs)
            for (const auto& v : axis.values) {
                AblationRun n = r;
                n.cfg.merge(json{{axis.key, v}});
                n.cfg.validate();
                n.name += (n.name.empty() ? "" : "_") + axis.key + "=" + (v.is_string() ? v.get<std::string>() : v.dump());
                next.push_back(std::move(n));
            }
        runs = std::move(next);
    }
    if (axes.empty()) runs.front().name = "base";

    fs::create_directories(out_dir);
    if (parallel) {
        StageOptions quiet = opts;
        quiet.echo_progress = false;
        const unsigned workers = std::max(1u, std::thread::hardware_concurrency());
        for (std::size_t b0 = 0; b0 < runs.size(); b0 += workers) {
            std::vector<std::future<RunMetrics>> futs;
            for (std::size_t i = b0; i < std::min(runs.size(), b0 + workers); ++i)
                futs.push_back(std::async(std::launch::async, [&, i] {
                    return run_all(data, runs[i].cfg, out_dir / runs[i].name, quiet);
                }));
            for (std::size_t i = b0; i < std::min(runs.size(), b0 + workers); ++i) runs[i].metrics = futs[i - b0].get();
        }
    } else {
        for (auto& r : runs) r.metrics = run_all(data, r.cfg, out_dir / r.name, opts);
    }

    std::ostringstream csv;
    csv.precision(10);
    csv << "run";
    for (const auto& a : axes) csv << ',' << a.key;
    csv << ",auroc,accuracy\n";
    for (const auto& r : runs) {
        csv << r.name;
        const json cj = r.cfg.to_json();
        for (const auto& a : axes) csv << ',' << cj.at(a.key).dump();
        csv << ',' << r.metrics.auroc << ',' << r.metrics.accuracy << '\n';
    }
    write_text(out_dir / "summary.csv", csv.str());
    return runs;
}

} // namespace possl
