#include "possl/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "possl/error.hpp"
#include "possl/layers.hpp"

namespace possl {

namespace {

std::size_t conv_weights(int out, int in) { return static_cast<std::size_t>(out) * in * 9; }

void check_finite(std::span<const double> v, const char* layer) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite activation in layer ") + layer);
}


} // namespace

MiniModel::MiniModel(const ModelShape& s) : shape_(s) {
    if (s.channels <= 0 || s.height < 4 || s.width < 4 || s.conv1 <= 0 || s.conv2 <= 0 || s.feature_dim <= 0 ||
        s.num_classes < 2)
        throw ConfigError("invalid model shape");
    auto add = [&](std::string name, ParamGroup g, std::size_t n) {
        params_.push_back({std::move(name), g, Vec(n, 0.0)});
    };
    add("conv1.weight", ParamGroup::Encoder, conv_weights(s.conv1, s.channels));
    add("conv1.bias", ParamGroup::Encoder, s.conv1);
    add("conv2.weight", ParamGroup::Encoder, conv_weights(s.conv2, s.conv1));
    add("conv2.bias", ParamGroup::Encoder, s.conv2);
    add("feature.weight", ParamGroup::Encoder, static_cast<std::size_t>(s.feature_dim) * s.conv2);
    add("feature.bias", ParamGroup::Encoder, s.feature_dim);
    add("classifier.weight", ParamGroup::Classifier, static_cast<std::size_t>(s.num_classes) * s.feature_dim);
    add("classifier.bias", ParamGroup::Classifier, s.num_classes);
}

MiniModel MiniModel::zeros(const ModelShape& shape) { return MiniModel(shape); }

MiniModel::MiniModel(const ModelShape& shape, std::uint64_t seed) : MiniModel(shape) {
    std::mt19937_64 rng(seed);
    auto fill = [&](Slot slot, double fan_in, double gain) {
        std::normal_distribution<double> dist(0.0, std::sqrt(gain / fan_in));
        for (auto& v : params_[slot].value) v = dist(rng);
    };
    fill(kConv1W, 9.0 * shape.channels, 2.0);
    fill(kConv2W, 9.0 * shape.conv1, 2.0);
    fill(kFeatW, shape.conv2, 1.0);
    fill(kClsW, shape.feature_dim, 1.0);
    // Pixels live in [0,1]; start each conv1 filter centred on mid-grey input.
    const std::size_t k1 = 9 * static_cast<std::size_t>(shape.channels);
    for (int o = 0; o < shape.conv1; ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < k1; ++i) s += params_[kConv1W].value[o * k1 + i];
        params_[kConv1B].value[o] = -0.5 * s;
    }
}

std::size_t MiniModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

std::string MiniModel::checksum() const {
    std::vector<std::uint8_t> bytes;
    for (const auto& p : params_) append_f32_le(bytes, p.value);
    return sha256_hex(bytes);
}

void MiniModel::round_to_float() {
    for (auto& p : mutable_params()) possl::round_to_float(p.value);
}

bool MiniModel::same_parameters(const MiniModel& o) const {
    if (!(shape_ == o.shape_)) return false;
    for (std::size_t i = 0; i < params_.size(); ++i)
        if (params_[i].value != o.params_[i].value) return false;
    return true;
}

Checkpoint MiniModel::to_checkpoint() const {
    Checkpoint ck;
    ck.header["layer_sizes"] = {{"channels", shape_.channels}, {"height", shape_.height}, {"width", shape_.width},
                                {"conv1", shape_.conv1},       {"conv2", shape_.conv2}};
    ck.header["D"] = shape_.feature_dim;
    ck.header["num_classes"] = shape_.num_classes;
    ck.header["frozen"] = {{"encoder", frozen(ParamGroup::Encoder)}, {"classifier", frozen(ParamGroup::Classifier)}};
    for (const auto& p : params_) ck.add_block(p.name, p.value);
    return ck;
}

MiniModel MiniModel::from_checkpoint(const Checkpoint& ck) {
    try {
        const auto& ls = ck.header.at("layer_sizes");
        ModelShape s{ls.at("channels"), ls.at("height"), ls.at("width"), ls.at("conv1"),
                     ls.at("conv2"),    ck.header.at("D"), ck.header.at("num_classes")};
        MiniModel m(s);
        for (auto& p : m.params_) {
            const auto& v = ck.block(p.name);
            if (v.size() != p.value.size()) throw ArtifactError("checkpoint block '" + p.name + "' has wrong size");
            p.value = v;
        }
        m.set_frozen(ParamGroup::Encoder, ck.header.at("frozen").at("encoder"));
        m.set_frozen(ParamGroup::Classifier, ck.header.at("frozen").at("classifier"));
        return m;
    } catch (const json::exception& e) {
        throw ArtifactError(std::string("malformed model checkpoint header: ") + e.what());
    }
}

ForwardResult forward(const MiniModel& model, const Tensor3& image) {
    const ModelShape& s = model.shape();
    if (image.channels != s.channels || image.height != s.height || image.width != s.width)
        throw GeometryError("input image does not match model input geometry");
    ForwardResult r;
    Tape& t = r.tape;
    t.input = image;
    t.pre1 = layers::conv_forward(image, model.param(kConv1W).value, model.param(kConv1B).value, s.conv1);
    check_finite(t.pre1.data, "conv1");
    t.act1 = layers::relu(t.pre1);
    t.pre2 = layers::conv_forward(t.act1, model.param(kConv2W).value, model.param(kConv2B).value, s.conv2);
    check_finite(t.pre2.data, "conv2");
    t.act2 = layers::relu(t.pre2);
    t.pooled = layers::global_avg_pool(t.act2);
    r.feature = layers::linear_forward(model.param(kFeatW).value, model.param(kFeatB).value, t.pooled);
    check_finite(r.feature, "feature");
    r.logits = layers::linear_forward(model.param(kClsW).value, model.param(kClsB).value, r.feature);
    check_finite(r.logits, "classifier");

    t.feature = r.feature;
    t.model = &model;
    t.version = model.version();
    return r;
}

std::pair<Vec, Vec> infer(const MiniModel& model, const Tensor3& image) {
    auto r = forward(model, image);
    return {std::move(r.feature), std::move(r.logits)};
}

Gradients backward(const MiniModel& model, Tape& tape, std::span<const double> grad_feature,
                   std::span<const double> grad_logits) {
    if (tape.consumed) throw ArtifactError("tape already consumed by a previous backward pass");
    if (tape.model != &model || tape.version != model.version())
        throw ArtifactError("stale tape: model changed since the forward pass");
    const ModelShape& s = model.shape();
    if (grad_feature.size() != static_cast<std::size_t>(s.feature_dim) ||
        grad_logits.size() != static_cast<std::size_t>(s.num_classes))
        throw GeometryError("loss gradient does not match model outputs");
    tape.consumed = true;

    Gradients g;
    const bool enc = !model.frozen(ParamGroup::Encoder);
    const bool cls = !model.frozen(ParamGroup::Classifier);
    for (std::size_t i = 0; i < kNumSlots; ++i) {
        const bool trainable = model.params()[i].group == ParamGroup::Encoder ? enc : cls;
        if (trainable) g.params[i] = Vec(model.params()[i].value.size(), 0.0);
    }

    auto slot = [&](Slot k) { return g.params[k] ? &*g.params[k] : nullptr; };
    Vec dfeat = layers::linear_backward(model.param(kClsW).value, tape.feature, grad_logits, slot(kClsW), slot(kClsB));
    for (std::size_t d = 0; d < dfeat.size(); ++d) dfeat[d] += grad_feature[d];
    const Vec dpool =
        layers::linear_backward(model.param(kFeatW).value, tape.pooled, dfeat, slot(kFeatW), slot(kFeatB));
    const Tensor3 dact2 = layers::global_avg_pool_backward(dpool, tape.act2.channels, tape.act2.height, tape.act2.width);
    const Tensor3 dact1 = layers::conv_backward(tape.act1, model.param(kConv2W).value,
                                                layers::relu_backward(tape.pre2, dact2), slot(kConv2W), slot(kConv2B));
    g.input = layers::conv_backward(tape.input, model.param(kConv1W).value, layers::relu_backward(tape.pre1, dact1),
                                    slot(kConv1W), slot(kConv1B));
    return g;
}

Vec softmax(std::span<const double> logits) {
    Vec p(logits.begin(), logits.end());
    const double mx = *std::max_element(p.begin(), p.end());
    double z = 0.0;
    for (auto& v : p) z += (v = std::exp(v - mx));
    for (auto& v : p) v /= z;
    return p;
}

void OptimizerState::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
}

void sgd_step(std::span<double> params, std::span<const double> grads, Vec& velocity, double lr, double momentum) {
    if (params.size() != grads.size()) throw GeometryError("sgd_step: gradient shape mismatch");
    for (double g : grads)
        if (!std::isfinite(g)) throw NumericError("sgd_step: non-finite gradient");
    if (velocity.empty()) velocity.assign(params.size(), 0.0);
    if (velocity.size() != params.size()) throw GeometryError("sgd_step: velocity shape mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
}

void sgd_step(MiniModel& model, const Gradients& grads, OptimizerState& opt) {
    opt.validate();
    if (opt.velocity.size() != kNumSlots) opt.velocity.assign(kNumSlots, Vec{});
    auto& params = model.mutable_params();
    for (std::size_t i = 0; i < kNumSlots; ++i) {
        if (!grads.params[i]) continue;
        const bool frozen = model.frozen(params[i].group);
        if (frozen) continue;
        sgd_step(params[i].value, *grads.params[i], opt.velocity[i], opt.lr, opt.momentum);
    }
}

void ema_update(std::span<double> teacher, std::span<const double> student, double alpha) {
    if (teacher.size() != student.size()) throw GeometryError("ema_update: shape mismatch");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("ema decay must lie in [0, 1]");
    for (std::size_t i = 0; i < teacher.size(); ++i) teacher[i] = alpha * teacher[i] + (1.0 - alpha) * student[i];
}

void ema_update(TeacherStudent& ts) {
    if (!(ts.teacher.model.shape() == ts.student.model.shape()))
        throw GeometryError("ema_update: teacher and student shapes differ");
    // Frozen groups are skipped: alpha*x + (1-alpha)*x need not round back to x.
    auto& tp = ts.teacher.model.mutable_params();
    for (std::size_t i = 0; i < kNumSlots; ++i) {
        if (ts.student.model.frozen(tp[i].group)) continue;
        ema_update(tp[i].value, ts.student.model.params()[i].value, ts.ema_decay);
    }
    ema_update(ts.teacher.id_prompt.params(), ts.student.id_prompt.params(), ts.ema_decay);
    ema_update(ts.teacher.ood_prompt.params(), ts.student.ood_prompt.params(), ts.ema_decay);
}

} // namespace possl
