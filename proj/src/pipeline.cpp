#include "possl/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "possl/error.hpp"

namespace possl {

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
    if (p <= 0) fail("p must be positive");
    (void)param_count(p, 3, frame, frame);
    if (n_candidates < 1) fail("n_candidates must be >= 1");
    if (!(lambda > 0.0 && lambda <= 1.0)) fail("lambda must lie in (0, 1]");
    if (!(eta > 0.0 && eta <= 1.0)) fail("eta must lie in (0, 1]");
    if (!(tau > 0.0)) fail("tau must be positive");
    if (!(lr > 0.0) || !(prompt_lr > 0.0)) fail("learning rates must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) fail("ema must lie in [0, 1]");
    if (epochs_pretrain < 1 || epochs_finetune < 0) fail("epoch counts must be positive");
    if (lr_decay_epoch < 0 || !(lr_decay_factor > 0.0)) fail("invalid learning-rate decay");
    if (batch_size < 1) fail("batch_size must be positive");
    if (frame < 8) fail("frame must be >= 8");
    if (feature_dim < 1 || conv1 < 1 || conv2 < 1) fail("layer sizes must be positive");
    if (cl_sign != 1 && cl_sign != -1) fail("cl_sign must be +1 or -1");
}

json TrainConfig::to_json() const {
    return {{"p", p},
            {"n_candidates", n_candidates},
            {"lambda", lambda},
            {"eta", eta},
            {"tau", tau},
            {"lr", lr},
            {"prompt_lr", prompt_lr},
            {"momentum", momentum},
            {"ema", ema_decay},
            {"epochs_pretrain", epochs_pretrain},
            {"epochs_finetune", epochs_finetune},
            {"lr_decay_epoch", lr_decay_epoch},
            {"lr_decay_factor", lr_decay_factor},
            {"batch_size", batch_size},
            {"frame", frame},
            {"feature_dim", feature_dim},
            {"conv1", conv1},
            {"conv2", conv2},
            {"consistency_mode", to_string(consistency_mode)},
            {"cl_sign", cl_sign},
            {"use_cl", use_cl},
            {"pretrain_augment", pretrain_augment},
            {"replay_labeled", replay_labeled},
            {"seed", seed}};
}

void TrainConfig::merge(const json& o) {
    if (!o.is_object()) throw ConfigError("config must be a JSON object");
    try {
        for (const auto& [key, v] : o.items()) {
            if (key == "p") p = v;
            else if (key == "n_candidates") n_candidates = v;
            else if (key == "lambda") lambda = v;
            else if (key == "eta") eta = v;
            else if (key == "tau") tau = v;
            else if (key == "lr") lr = v;
            else if (key == "prompt_lr") prompt_lr = v;
            else if (key == "momentum") momentum = v;
            else if (key == "ema") ema_decay = v;
            else if (key == "epochs_pretrain") epochs_pretrain = v;
            else if (key == "epochs_finetune") epochs_finetune = v;
            else if (key == "lr_decay_epoch") lr_decay_epoch = v;
            else if (key == "lr_decay_factor") lr_decay_factor = v;
            else if (key == "batch_size") batch_size = v;
            else if (key == "frame") frame = v;
            else if (key == "feature_dim") feature_dim = v;
            else if (key == "conv1") conv1 = v;
            else if (key == "conv2") conv2 = v;
            else if (key == "consistency_mode") consistency_mode = parse_consistency_mode(v.get<std::string>());
            else if (key == "cl_sign") cl_sign = v;
            else if (key == "use_cl") use_cl = v;
            else if (key == "pretrain_augment") pretrain_augment = v;
            else if (key == "replay_labeled") replay_labeled = v;
            else if (key == "seed") seed = v;
            else throw ConfigError("config: unknown key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: wrong value type: ") + e.what());
    }
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    c.merge(j);
    c.validate();
    return c;
}

std::string TrainConfig::hash() const { return sha256_hex(to_json().dump()); }

json EpochProgress::to_json() const {
    return {{"stage", stage}, {"epoch", epoch}, {"l_s", l_s}, {"l_c", l_c}, {"l_cl", l_cl},
            {"auroc_val", auroc_val ? json(*auroc_val) : json(nullptr)}};
}

// ---------------------------------------------------------------------------
// Checkpoints

Checkpoint PretrainedState::to_checkpoint() const {
    Checkpoint ck = model.to_checkpoint();
    ck.header["kind"] = "pretrained";
    ck.header["id_prompt"] = id_prompt.header();
    ck.header["joint_space"] = to_json(joint);
    ck.header["train_accuracy"] = train_accuracy;
    ck.add_block("id_prompt", id_prompt.params());
    return ck;
}

PretrainedState PretrainedState::from_checkpoint(const Checkpoint& ck) {
    if (ck.header.value("kind", "") != "pretrained") throw ArtifactError("not a pretrained checkpoint");
    try {
        return {MiniModel::from_checkpoint(ck), VisualPrompt::from_header(ck.header.at("id_prompt"), ck.block("id_prompt")),
                joint_space_from_json(ck.header.at("joint_space")), ck.header.at("train_accuracy")};
    } catch (const json::exception& e) {
        throw ArtifactError(std::string("malformed pretrained checkpoint: ") + e.what());
    }
}

Checkpoint FinetunedState::to_checkpoint() const {
    Checkpoint ck = ts.student.model.to_checkpoint();
    ck.header["kind"] = "finetuned";
    ck.header["id_prompt"] = ts.student.id_prompt.header();
    ck.header["ood_prompt"] = ts.student.ood_prompt.header();
    ck.header["ema"] = ts.ema_decay;
    ck.header["cl_enabled"] = cl_enabled;
    ck.add_block("student.id_prompt", ts.student.id_prompt.params());
    ck.add_block("student.ood_prompt", ts.student.ood_prompt.params());
    ck.add_block("teacher.id_prompt", ts.teacher.id_prompt.params());
    ck.add_block("teacher.ood_prompt", ts.teacher.ood_prompt.params());
    return ck;
}

FinetunedState FinetunedState::from_checkpoint(const Checkpoint& ck, const json& joint_space) {
    if (ck.header.value("kind", "") != "finetuned") throw ArtifactError("not a finetuned checkpoint");
    try {
        const MiniModel model = MiniModel::from_checkpoint(ck);
        const auto& ih = ck.header.at("id_prompt");
        const auto& oh = ck.header.at("ood_prompt");
        PromptedModel student{model, VisualPrompt::from_header(ih, ck.block("student.id_prompt")),
                              VisualPrompt::from_header(oh, ck.block("student.ood_prompt"))};
        PromptedModel teacher{model, VisualPrompt::from_header(ih, ck.block("teacher.id_prompt")),
                              VisualPrompt::from_header(oh, ck.block("teacher.ood_prompt"))};
        FinetunedState s{TeacherStudent{std::move(student), std::move(teacher), ck.header.at("ema")},
                         joint_space_from_json(joint_space),
                         {},
                         ck.header.at("cl_enabled"),
                         model.checksum()};
        if (!s.joint.apollonius) throw ArtifactError("joint space has no Apollonius classifier");
        return s;
    } catch (const json::exception& e) {
        throw ArtifactError(std::string("malformed finetuned checkpoint: ") + e.what());
    }
}

std::size_t FinetunedState::trainable_parameter_count() const {
    return ts.student.id_prompt.params().size() + ts.student.ood_prompt.params().size();
}

// ---------------------------------------------------------------------------
// Training

Tensor3 to_frame(const Tensor3& img, int frame) { return resize_nearest(img, frame, frame); }

namespace {

void emit(const Hooks& h, const std::string& line) {
    if (h.log) h.log(line);
}

void add_to(Vec& acc, std::span<const double> g, double scale = 1.0) {
    if (acc.empty()) acc.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += scale * g[i];
}

Vec raw_features(const MiniModel& model, const VisualPrompt& prompt, const Tensor3& image) {
    return infer(model, apply_prompt(image, prompt)).first;
}

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    return idx;
}

void check_finite_loss(double v, const std::string& stage, int epoch, std::size_t step) {
    if (!std::isfinite(v)) {
        std::ostringstream os;
        os << stage << " diverged: non-finite loss at epoch " << epoch << ", step " << step;
        throw DivergenceError(os.str());
    }
}

std::string fmt_vec(const std::vector<double>& v) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
    os << ']';
    return os.str();
}

} // namespace

PretrainedState pretrain(const std::vector<ImageSample>& labeled, int num_classes, const TrainConfig& cfg,
                         const Hooks& hooks) {
    cfg.validate();
    if (labeled.empty()) throw ConfigError("pretrain: labeled set is empty");
    for (const auto& s : labeled)
        if (!s.label || *s.label < 0 || *s.label >= num_classes)
            throw ConfigError("pretrain: every labeled sample needs a label in O_l");

    const int channels = labeled.front().pixels.channels;
    const ModelShape shape{channels, cfg.frame, cfg.frame, cfg.conv1, cfg.conv2, cfg.feature_dim, num_classes};
    const PromptGeometry geom{cfg.p, channels, cfg.frame, cfg.frame};

    std::mt19937_64 rng(cfg.seed);
    MiniModel model(shape, rng());
    VisualPrompt prompt = init_prompt(geom, PromptRole::IdSpecific, rng);
    OptimizerState opt{cfg.lr, cfg.momentum, {}};
    Vec prompt_velocity;

    std::vector<Tensor3> frames;
    for (const auto& s : labeled) frames.push_back(to_frame(s.pixels, cfg.frame));

    std::size_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs_pretrain; ++epoch) {
        if (cfg.lr_decay_epoch > 0 && epoch == cfg.lr_decay_epoch) opt.lr *= cfg.lr_decay_factor;
        const auto order = shuffled(labeled.size(), rng);
        double epoch_loss = 0.0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size, ++step) {
            const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
            const double inv = 1.0 / static_cast<double>(b1 - b0);
            Gradients acc;
            Vec prompt_grad;
            double batch_loss = 0.0;
            for (std::size_t k = b0; k < b1; ++k) {
                const std::size_t i = order[k];
                ImageSample x{frames[i], labeled[i].label, labeled[i].truth_tag};
                if (cfg.pretrain_augment) x = augment(x, AugmentStrength::Weak, rng);
                auto fr = forward(model, apply_prompt(x.pixels, prompt));
                const LossGrad ce = cross_entropy(fr.logits, *x.label);
                batch_loss += ce.value * inv;
                Vec gl = ce.grad;
                for (auto& g : gl) g *= inv;
                const Vec zero_feat(shape.feature_dim, 0.0);
                Gradients g = backward(model, fr.tape, zero_feat, gl);
                for (std::size_t s = 0; s < kNumSlots; ++s)
                    if (g.params[s]) {
                        if (!acc.params[s]) acc.params[s] = Vec(g.params[s]->size(), 0.0);
                        add_to(*acc.params[s], *g.params[s]);
                    }
                add_to(prompt_grad, prompt_gradient(g.input, prompt));
            }
            check_finite_loss(batch_loss, "pretrain", epoch, step);
            sgd_step(model, acc, opt);
            sgd_step(prompt.params(), prompt_grad, prompt_velocity, opt.lr, opt.momentum);
            epoch_loss += batch_loss * static_cast<double>(b1 - b0);
        }
        EpochProgress prog{"pretrain", epoch, epoch_loss / static_cast<double>(labeled.size()), 0.0, 0.0, {}};
        if (hooks.on_epoch) hooks.on_epoch(prog);
    }

    // Checkpoints store float32; round now so the frozen backbone survives a round trip bit-for-bit.
    model.round_to_float();
    round_to_float(prompt.params());
    model.set_frozen(ParamGroup::Encoder, true);
    model.set_frozen(ParamGroup::Classifier, true);

    std::vector<Vec> feats;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        auto [f, logits] = infer(model, apply_prompt(frames[i], prompt));
        feats.push_back(std::move(f));
        correct += static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin()) == *labeled[i].label;
    }
    PretrainedState st{std::move(model), std::move(prompt), {}, static_cast<double>(correct) / frames.size()};
    st.joint.standardizer = fit_standardizer(feats);
    std::vector<Vec> z;
    for (const auto& f : feats) z.push_back(standardize(st.joint.standardizer, f));
    st.joint.cluster = fit_id_cluster(z);
    st.joint.candidates = build_candidates(st.joint.cluster, z, cfg.n_candidates);

    std::ostringstream os;
    os << "pretrain: train_accuracy=" << st.train_accuracy << " cluster_radius=" << st.joint.cluster.radius
       << " candidates=" << st.joint.candidates.size();
    emit(hooks, os.str());
    return st;
}

namespace {

struct PromptOptimizer {
    Vec id_velocity;
    Vec ood_velocity;
};

// Trains the OOD-specific prompt on the queued OOD samples: the student
// feature's distances to both centers are matched to those of k_oc.
double train_ood_prompt(TeacherStudent& ts, const std::vector<Tensor3>& frames, const std::vector<std::size_t>& queue,
                        const JointSpaceState& joint, const ApolloniusClassifier& clf, const TrainConfig& cfg,
                        double lr, PromptOptimizer& popt, std::mt19937_64& rng) {
    const MiniModel& model = ts.student.model;
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < queue.size(); b0 += cfg.batch_size) {
        const std::size_t b1 = std::min(queue.size(), b0 + cfg.batch_size);
        const double inv = 1.0 / static_cast<double>(b1 - b0);
        Vec grad;
        double loss = 0.0;
        for (std::size_t k = b0; k < b1; ++k) {
            ImageSample x{frames[queue[k]], std::nullopt, TruthTag::Id};
            x = augment(x, AugmentStrength::Strong, rng);
            auto fr = forward(model, apply_prompt(x.pixels, ts.student.ood_prompt));
            const Vec z = standardize(joint.standardizer, fr.feature);
            const LossGrad lc = consistency_loss(z, clf.k_oc, clf.k_ic, clf.k_oc, cfg.consistency_mode);
            loss += lc.value * inv;
            Vec gz = lc.grad;
            for (auto& g : gz) g *= inv;
            const Vec gf = standardize_backward(joint.standardizer, gz);
            const Vec zero_logits(model.shape().num_classes, 0.0);
            const Gradients g = backward(model, fr.tape, gf, zero_logits);
            add_to(grad, prompt_gradient(g.input, ts.student.ood_prompt));
        }
        sgd_step(ts.student.ood_prompt.params(), grad, popt.ood_velocity, lr, cfg.momentum);
        ema_update(ts.teacher.ood_prompt.params(), ts.student.ood_prompt.params(), ts.ema_decay);
        total += loss;
        ++batches;
    }
    return batches ? total / static_cast<double>(batches) : 0.0;
}

} // namespace

FinetunedState finetune(const PretrainedState& state, const std::vector<ImageSample>& unlabeled,
                        const TrainConfig& cfg, const Hooks& hooks, const std::vector<ImageSample>* labeled) {
    cfg.validate();
    if (unlabeled.empty()) throw ConfigError("finetune: unlabeled set is empty");
    if (state.joint.candidates.empty()) throw ConfigError("finetune: pretrained state has no candidates");
    if (!state.model.frozen(ParamGroup::Encoder) || !state.model.frozen(ParamGroup::Classifier))
        throw ConfigError("finetune: backbone must be frozen");

    std::mt19937_64 rng(cfg.seed ^ 0xF1E7F1E7F1E7ULL);
    const PromptGeometry geom = state.id_prompt.geometry();
    VisualPrompt ood_prompt = init_prompt(geom, PromptRole::OodSpecific, rng);

    FinetunedState out{TeacherStudent{PromptedModel{state.model, state.id_prompt, ood_prompt},
                                      PromptedModel{state.model, state.id_prompt, ood_prompt}, cfg.ema_decay},
                       state.joint,
                       {},
                       cfg.use_cl,
                       state.model.checksum()};
    TeacherStudent& ts = out.ts;
    JointSpaceState& joint = out.joint;
    const MiniModel& model = ts.student.model;
    const int num_classes = model.shape().num_classes;

    std::vector<Tensor3> frames;
    for (const auto& s : unlabeled) frames.push_back(to_frame(s.pixels, cfg.frame));
    std::vector<Tensor3> labeled_frames;
    if (cfg.replay_labeled && labeled)
        for (const auto& s : *labeled) labeled_frames.push_back(to_frame(s.pixels, cfg.frame));

    // Candidate selection, once, on teacher features of the clean unlabeled pool.
    std::vector<Vec> zu;
    for (const auto& f : frames)
        zu.push_back(standardize(joint.standardizer, raw_features(ts.teacher.model, ts.teacher.id_prompt, f)));
    const CandidateSelection sel = select_candidate(joint.candidates, zu, cfg.tau);
    joint.chosen = sel.chosen;
    joint.rates = sel.rates;
    emit(hooks, "candidate selection: rates=" + fmt_vec(sel.rates) + " chosen=" +
                    std::to_string(joint.candidates[sel.chosen].index));
    try {
        const OodCenterInit init = init_ood_center(joint.candidates[sel.chosen], joint.cluster, zu, cfg.lambda, cfg.tau);
        if (init.tau_used != cfg.tau)
            emit(hooks, "WARNING: no OOD detected at tau=" + std::to_string(cfg.tau) + "; relaxed to tau=" +
                            std::to_string(init.tau_used));
        joint.apollonius = init.classifier;
        emit(hooks, "ood center initialised from " + std::to_string(init.n_detected) + " detected samples");
    } catch (const NoOodEvidence& e) {
        // Fall back to the unlabeled feature furthest from k_ic and run without CL.
        std::size_t far = 0;
        for (std::size_t i = 1; i < zu.size(); ++i)
            if (distance(zu[i], joint.cluster.center) > distance(zu[far], joint.cluster.center)) far = i;
        joint.apollonius = ApolloniusClassifier{joint.cluster.center, zu[far], cfg.lambda, joint.cluster.count, 1};
        out.cl_enabled = false;
        emit(hooks, std::string("WARNING: ") + e.what() + "; contrastive term disabled");
    }
    ApolloniusClassifier& clf = *joint.apollonius;

    PromptOptimizer popt;
    double lr = cfg.prompt_lr;
    std::size_t step = 0;
    const Vec zero_feat(model.shape().feature_dim, 0.0);
    const Vec zero_logits(num_classes, 0.0);

    for (int epoch = 0; epoch < cfg.epochs_finetune; ++epoch) {
        if (cfg.lr_decay_epoch > 0 && epoch == cfg.lr_decay_epoch) lr *= cfg.lr_decay_factor;
        const auto order = shuffled(frames.size(), rng);
        std::set<std::size_t> ood_queue;
        double sum_s = 0.0, sum_c = 0.0, sum_cl = 0.0;
        std::size_t rows = 0;

        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size, ++step) {
            const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
            std::vector<Vec> weak_logits, strong_logits, z_t, z_s, id_feats, ood_feats;
            std::vector<Tape> tapes;
            for (std::size_t k = b0; k < b1; ++k) {
                const std::size_t i = order[k];
                const ImageSample base{frames[i], std::nullopt, TruthTag::Id};
                const ImageSample weak = augment(base, AugmentStrength::Weak, rng);
                const ImageSample strong = augment(base, AugmentStrength::Strong, rng);
                auto [ft, lt] = infer(ts.teacher.model, apply_prompt(weak.pixels, ts.teacher.id_prompt));
                Vec zt = standardize(joint.standardizer, ft);
                if (clf.classify(zt) == Detection::Ood) {
                    ood_queue.insert(i);
                    ood_feats.push_back(std::move(zt));
                    continue;
                }
                auto fr = forward(model, apply_prompt(strong.pixels, ts.student.id_prompt));
                z_s.push_back(standardize(joint.standardizer, fr.feature));
                strong_logits.push_back(std::move(fr.logits));
                tapes.push_back(std::move(fr.tape));
                weak_logits.push_back(std::move(lt));
                id_feats.push_back(zt);
                z_t.push_back(std::move(zt));
            }

            Vec prompt_grad(ts.student.id_prompt.params().size(), 0.0);
            double l_s = 0.0, l_c = 0.0;
            std::size_t n_conf = 0;
            if (!tapes.empty()) {
                const PseudoLabelLoss pl = pseudo_label_loss(weak_logits, strong_logits, cfg.eta);
                l_s = pl.value;
                n_conf = pl.n_confident;
                const double inv = 1.0 / static_cast<double>(tapes.size());
                for (std::size_t k = 0; k < tapes.size(); ++k) {
                    const LossGrad lc = consistency_loss(z_s[k], z_t[k], clf.k_ic, clf.k_oc, cfg.consistency_mode);
                    l_c += lc.value * inv;
                    Vec gz = lc.grad;
                    for (auto& g : gz) g *= inv;
                    const Vec gf = standardize_backward(joint.standardizer, gz);
                    const Gradients g = backward(model, tapes[k], gf, pl.grad_strong[k]);
                    add_to(prompt_grad, prompt_gradient(g.input, ts.student.id_prompt));
                }
            }
            if (!labeled_frames.empty()) {
                std::uniform_int_distribution<std::size_t> pick(0, labeled_frames.size() - 1);
                const std::size_t nb = std::min<std::size_t>(cfg.batch_size, labeled_frames.size());
                double replay = 0.0;
                for (std::size_t k = 0; k < nb; ++k) {
                    const std::size_t i = pick(rng);
                    const ImageSample x =
                        augment({labeled_frames[i], (*labeled)[i].label, TruthTag::Id}, AugmentStrength::Weak, rng);
                    auto fr = forward(model, apply_prompt(x.pixels, ts.student.id_prompt));
                    LossGrad ce = cross_entropy(fr.logits, *x.label);
                    replay += ce.value / static_cast<double>(nb);
                    for (auto& g : ce.grad) g /= static_cast<double>(nb);
                    const Gradients g = backward(model, fr.tape, zero_feat, ce.grad);
                    add_to(prompt_grad, prompt_gradient(g.input, ts.student.id_prompt));
                }
                l_s += replay;
            }

            const LossBreakdown row = total_unlabeled_loss(l_s, l_c, 0.0, n_conf);
            check_finite_loss(row.total, "finetune", epoch, step);
            out.history.push_back(row);
            sum_s += row.l_s;
            sum_c += row.l_c;
            ++rows;

            sgd_step(ts.student.id_prompt.params(), prompt_grad, popt.id_velocity, lr, cfg.momentum);
            ema_update(ts);
            update_centers(clf, id_feats, ood_feats);
        }

        // Epoch end: queued OOD samples train the OOD-specific prompt, then
        // the prompt-contrastive term couples the two prompts.
        const std::vector<std::size_t> queue(ood_queue.begin(), ood_queue.end());
        double l_c_ood = 0.0, l_cl = 0.0;
        if (!queue.empty()) {
            l_c_ood = train_ood_prompt(ts, frames, queue, joint, clf, cfg, lr, popt, rng);
            if (out.cl_enabled) {
                const ContrastiveLoss cl = contrastive_prompt_loss(ts.student.id_prompt.params(),
                                                                   ts.student.ood_prompt.params());
                const double w = static_cast<double>(cfg.cl_sign);
                l_cl = w * cl.value;
                // The cosine loss ignores prompt scale and its raw gradient grows as 1/|v|; scaling by
                // |v|^2 turns the update into a rotation of about lr radians.
                const double si = w * dot(ts.student.id_prompt.params(), ts.student.id_prompt.params());
                const double so = w * dot(ts.student.ood_prompt.params(), ts.student.ood_prompt.params());
                Vec gi = cl.grad_id, go = cl.grad_ood;
                for (auto& g : gi) g *= si;
                for (auto& g : go) g *= so;
                sgd_step(ts.student.id_prompt.params(), gi, popt.id_velocity, lr, cfg.momentum);
                sgd_step(ts.student.ood_prompt.params(), go, popt.ood_velocity, lr, cfg.momentum);
                ema_update(ts);
            }
        } else {
            emit(hooks, "epoch " + std::to_string(epoch) + ": no OOD samples queued");
        }
        const LossBreakdown end_row = total_unlabeled_loss(0.0, l_c_ood, l_cl, 0);
        check_finite_loss(end_row.total, "finetune", epoch, step);
        out.history.push_back(end_row);
        sum_c += end_row.l_c;
        sum_cl += end_row.l_cl;
        ++rows;

        emit(hooks, "epoch " + std::to_string(epoch) + ": queued_ood=" + std::to_string(queue.size()) +
                        " id_count=" + std::to_string(clf.id_count) + " ood_count=" + std::to_string(clf.ood_count));
        EpochProgress prog{"finetune", epoch, sum_s / rows, sum_c / rows, sum_cl / rows, {}};
        if (hooks.validate) prog.auroc_val = hooks.validate(out);
        if (hooks.on_epoch) hooks.on_epoch(prog);
    }

    for (PromptedModel* pm : {&ts.student, &ts.teacher}) {
        round_to_float(pm->id_prompt.params());
        round_to_float(pm->ood_prompt.params());
    }
    if (ts.student.model.checksum() != out.backbone_checksum || ts.teacher.model.checksum() != out.backbone_checksum)
        throw NumericError("finetune: frozen backbone was modified");
    return out;
}

Prediction predict(const FinetunedState& state, const Tensor3& image, int frame) {
    const PromptedModel& t = state.ts.teacher;
    auto [f, logits] = infer(t.model, apply_prompt(to_frame(image, frame), t.id_prompt));
    Prediction p;
    p.probabilities = softmax(logits);
    p.feature = standardize(state.joint.standardizer, f);
    if (!state.joint.apollonius) throw ConfigError("predict: joint space has no Apollonius classifier");
    p.ood_score = state.joint.apollonius->ood_score(p.feature);
    return p;
}

std::vector<ScoredSample> score_samples(const FinetunedState& state, const std::vector<ImageSample>& samples,
                                        int frame) {
    std::vector<ScoredSample> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        const Prediction p = predict(state, s.pixels, frame);
        const int cls = static_cast<int>(std::max_element(p.probabilities.begin(), p.probabilities.end()) -
                                         p.probabilities.begin());
        out.push_back({p.ood_score, s.truth_tag, cls, s.label});
    }
    return out;
}

} // namespace possl
