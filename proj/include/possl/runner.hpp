#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "possl/data.hpp"
#include "possl/eval.hpp"
#include "possl/pipeline.hpp"

namespace possl {

inline constexpr const char* kToolVersion = "0.3.0";

// Maps class ids onto contiguous classifier indices (positions in O_l).
OpenSetSplit remap_id_labels(const OpenSetSplit& split);

std::string dataset_checksum(const OpenSetSplit& split);

struct StageOptions {
    Hooks hooks;
    bool echo_progress = false;  // one JSON object per epoch on stdout
};

// Each stage reads its inputs from `run_dir` and records the artifacts it
// writes, with checksums, in run_dir/run_manifest.json.
PretrainedState stage_pretrain(const OpenSetSplit& data, const TrainConfig& cfg, const std::filesystem::path& run_dir,
                               const StageOptions& opts = {});
FinetunedState stage_finetune(const OpenSetSplit& data, const TrainConfig& cfg, const std::filesystem::path& run_dir,
                              const StageOptions& opts = {});
RunMetrics stage_eval(const OpenSetSplit& data, const TrainConfig& cfg, const std::filesystem::path& run_dir);

RunMetrics run_all(const OpenSetSplit& data, const TrainConfig& cfg, const std::filesystem::path& run_dir,
                   const StageOptions& opts = {});

// Synthetic benchmark data for a given seed, with the default generator settings.
OpenSetSplit default_synthetic(std::uint64_t seed);

struct AblationAxis {
    std::string key;  // TrainConfig key: p, n_candidates, lambda, ...
    std::vector<json> values;
};

// Parses "p=2,4,8" style axes; short names n and lambda are accepted.
AblationAxis parse_ablation_axis(const std::string& text);

struct AblationRun {
    std::string name;
    TrainConfig cfg;
    RunMetrics metrics;
};

// Cartesian sweep, one run directory per grid point, plus summary.csv.
std::vector<AblationRun> run_ablation(const OpenSetSplit& data, const TrainConfig& base,
                                      const std::vector<AblationAxis>& axes, const std::filesystem::path& out_dir,
                                      bool parallel = false, const StageOptions& opts = {});

} // namespace possl
