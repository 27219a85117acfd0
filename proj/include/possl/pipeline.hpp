#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "possl/data.hpp"
#include "possl/eval.hpp"
#include "possl/io.hpp"
#include "possl/joint_space.hpp"
#include "possl/losses.hpp"
#include "possl/nnet.hpp"
#include "possl/prompt.hpp"

namespace possl {

struct TrainConfig {
    int p = 4;
    int n_candidates = 5;
    double lambda = 0.5;
    double eta = 0.7;
    double tau = kDetectionTau;
    double lr = 0.01;
    double prompt_lr = 0.03;
    double momentum = 0.9;
    double ema_decay = 0.99;
    int epochs_pretrain = 15;
    int epochs_finetune = 8;
    int lr_decay_epoch = 0;  // 0 disables the single step decay
    double lr_decay_factor = 0.1;
    int batch_size = 16;
    int frame = 32;
    int feature_dim = 32;
    int conv1 = 8;
    int conv2 = 16;
    ConsistencyMode consistency_mode = ConsistencyMode::Absolute;
    int cl_sign = -1;
    bool use_cl = true;
    bool pretrain_augment = true;
    bool replay_labeled = false;
    std::uint64_t seed = 0;

    void validate() const;
    // Flat key namespace; unknown keys are rejected.
    json to_json() const;
    static TrainConfig from_json(const json& j);
    void merge(const json& overrides);
    std::string hash() const;
};

struct EpochProgress {
    std::string stage;
    int epoch = 0;
    double l_s = 0.0;
    double l_c = 0.0;
    double l_cl = 0.0;
    std::optional<double> auroc_val;

    json to_json() const;
};

struct FinetunedState;

struct Hooks {
    std::function<void(const std::string&)> log;           // events.log lines
    std::function<void(const EpochProgress&)> on_epoch;     // progress lines
    // Optional validation AUROC computed by the caller after each fine-tuning epoch.
    std::function<std::optional<double>(const FinetunedState&)> validate;
};

struct PretrainedState {
    MiniModel model;
    VisualPrompt id_prompt;
    JointSpaceState joint;  // standardizer, cluster and candidates
    double train_accuracy = 0.0;

    Checkpoint to_checkpoint() const;
    static PretrainedState from_checkpoint(const Checkpoint& ck);
};

struct FinetunedState {
    TeacherStudent ts;
    JointSpaceState joint;  // with the chosen candidate and Apollonius classifier
    std::vector<LossBreakdown> history;
    bool cl_enabled = true;
    std::string backbone_checksum;

    Checkpoint to_checkpoint() const;
    static FinetunedState from_checkpoint(const Checkpoint& ck, const json& joint_space);
    // Parameters owned by the fine-tuning optimizer (both student prompts).
    std::size_t trainable_parameter_count() const;
};

// Images are brought to the prompt frame by nearest-neighbour resizing.
Tensor3 to_frame(const Tensor3& img, int frame);

PretrainedState pretrain(const std::vector<ImageSample>& labeled, int num_classes, const TrainConfig& cfg,
                         const Hooks& hooks = {});

FinetunedState finetune(const PretrainedState& state, const std::vector<ImageSample>& unlabeled,
                        const TrainConfig& cfg, const Hooks& hooks = {},
                        const std::vector<ImageSample>* labeled = nullptr);

struct Prediction {
    Vec probabilities;
    double ood_score = 0.0;
    Vec feature;  // standardized teacher feature
};

Prediction predict(const FinetunedState& state, const Tensor3& image, int frame);

std::vector<ScoredSample> score_samples(const FinetunedState& state, const std::vector<ImageSample>& samples,
                                        int frame);

} // namespace possl
