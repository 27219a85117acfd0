#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "possl/io.hpp"
#include "possl/prompt.hpp"
#include "possl/tensor.hpp"

namespace possl {

// conv3x3/s2 -> ReLU -> conv3x3/s2 -> ReLU -> global average pool -> linear
// (the D-dim feature) -> linear classifier.
struct ModelShape {
    int channels = 3;
    int height = 32;
    int width = 32;
    int conv1 = 8;
    int conv2 = 16;
    int feature_dim = 32;
    int num_classes = 2;

    bool operator==(const ModelShape&) const = default;
};

enum class ParamGroup { Encoder, Classifier };

enum Slot : std::size_t { kConv1W, kConv1B, kConv2W, kConv2B, kFeatW, kFeatB, kClsW, kClsB, kNumSlots };

struct Parameter {
    std::string name;
    ParamGroup group;
    std::vector<double> value;
};

class MiniModel {
public:
    // He-normal weights; conv1 biases centre each filter on mid-grey input, other biases zero.
    MiniModel(const ModelShape& shape, std::uint64_t seed);
    static MiniModel zeros(const ModelShape& shape);

    const ModelShape& shape() const { return shape_; }
    const std::vector<Parameter>& params() const { return params_; }
    const Parameter& param(Slot s) const { return params_[s]; }
    // Any mutable access invalidates outstanding tapes.
    std::vector<Parameter>& mutable_params() {
        ++version_;
        return params_;
    }

    bool frozen(ParamGroup g) const { return frozen_[static_cast<std::size_t>(g)]; }
    void set_frozen(ParamGroup g, bool f) { frozen_[static_cast<std::size_t>(g)] = f; }
    std::uint64_t version() const { return version_; }

    std::size_t parameter_count() const;
    // sha256 over the float32 encoding of all parameter blocks.
    std::string checksum() const;
    void round_to_float();

    Checkpoint to_checkpoint() const;
    static MiniModel from_checkpoint(const Checkpoint& ck);

    bool same_parameters(const MiniModel& o) const;

private:
    explicit MiniModel(const ModelShape& shape);

    ModelShape shape_;
    std::vector<Parameter> params_;
    std::array<bool, 2> frozen_{false, false};
    std::uint64_t version_ = 0;
};

// Intermediates retained by forward() for one backward() call.
struct Tape {
    Tensor3 input;
    Tensor3 pre1, act1, pre2, act2;
    Vec pooled;
    Vec feature;
    const MiniModel* model = nullptr;
    std::uint64_t version = 0;
    bool consumed = false;
};

struct ForwardResult {
    Vec feature;
    Vec logits;
    Tape tape;
};

ForwardResult forward(const MiniModel& model, const Tensor3& image);

// Convenience forward without retaining a tape.
std::pair<Vec, Vec> infer(const MiniModel& model, const Tensor3& image);

struct Gradients {
    // One entry per slot; empty optional for frozen groups.
    std::array<std::optional<Vec>, kNumSlots> params;
    Tensor3 input;
};

// Reverse pass for the scalar loss whose gradients w.r.t. the feature and
// logits outputs are given. Consumes the tape.
Gradients backward(const MiniModel& model, Tape& tape, std::span<const double> grad_feature,
                   std::span<const double> grad_logits);

Vec softmax(std::span<const double> logits);

struct OptimizerState {
    double lr = 0.03;
    double momentum = 0.9;
    std::vector<Vec> velocity;

    void validate() const;
};

// v <- momentum*v + g; theta <- theta - lr*v.
void sgd_step(std::span<double> params, std::span<const double> grads, Vec& velocity, double lr, double momentum);
void sgd_step(MiniModel& model, const Gradients& grads, OptimizerState& opt);

// theta_t <- alpha*theta_t + (1 - alpha)*theta_s.
void ema_update(std::span<double> teacher, std::span<const double> student, double alpha);

struct PromptedModel {
    MiniModel model;
    VisualPrompt id_prompt;
    VisualPrompt ood_prompt;
};

struct TeacherStudent {
    PromptedModel student;
    PromptedModel teacher;
    double ema_decay = 0.99;
};

// EMA over every parameter group, prompts included.
void ema_update(TeacherStudent& ts);

} // namespace possl
