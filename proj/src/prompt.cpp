#include "possl/prompt.hpp"

#include <algorithm>
#include <cmath>

#include "possl/error.hpp"

namespace possl {

std::size_t param_count(int p, int channels, int height, int width) {
    if (p < 0 || channels <= 0 || height <= 0 || width <= 0)
        throw GeometryError("prompt geometry must be non-negative with a non-empty frame");
    if (2 * p > std::min(height, width))
        throw GeometryError("prompt width p=" + std::to_string(p) + " does not fit a " + std::to_string(height) +
                            "x" + std::to_string(width) + " frame (need 2p <= min(H, W))");
    return 2ULL * channels * p * static_cast<std::size_t>(height + width - 2 * p);
}

std::vector<PixelCoord> index_map(const PromptGeometry& g) {
    const std::size_t n = param_count(g);
    std::vector<PixelCoord> coords;
    coords.reserve(n);
    const int H = g.height, W = g.width, p = g.p;
    for (int c = 0; c < g.channels; ++c) {
        for (int y = 0; y < p; ++y)
            for (int x = 0; x < W; ++x) coords.push_back({c, y, x});
        for (int y = H - p; y < H; ++y)
            for (int x = 0; x < W; ++x) coords.push_back({c, y, x});
        for (int y = p; y < H - p; ++y) {
            for (int x = 0; x < p; ++x) coords.push_back({c, y, x});
            for (int x = W - p; x < W; ++x) coords.push_back({c, y, x});
        }
    }
    return coords;
}

namespace {

void check_prompt_geometry(const PromptGeometry& g) {
    if (g.p <= 0) throw GeometryError("visual prompt needs p > 0");
    (void)param_count(g);
}

} // namespace

VisualPrompt::VisualPrompt(PromptGeometry geometry, PromptRole role)
    : VisualPrompt(geometry, role, std::vector<double>(param_count(geometry), 0.0)) {}

VisualPrompt::VisualPrompt(PromptGeometry geometry, PromptRole role, std::vector<double> params)
    : geometry_(geometry), role_(role), params_(std::move(params)) {
    check_prompt_geometry(geometry_);
    if (params_.size() != param_count(geometry_))
        throw GeometryError("prompt parameter vector has length " + std::to_string(params_.size()) + ", expected " +
                            std::to_string(param_count(geometry_)));
    for (double v : params_)
        if (!std::isfinite(v)) throw NumericError("prompt parameters must be finite");
    const auto coords = index_map(geometry_);
    offsets_.reserve(coords.size());
    for (const auto& pc : coords)
        offsets_.push_back((static_cast<std::size_t>(pc.channel) * geometry_.height + pc.row) * geometry_.width + pc.col);
}

json VisualPrompt::header() const {
    return {{"p", geometry_.p},
            {"C", geometry_.channels},
            {"H", geometry_.height},
            {"W", geometry_.width},
            {"role", role_ == PromptRole::IdSpecific ? "id_specific" : "ood_specific"}};
}

VisualPrompt VisualPrompt::from_header(const json& h, std::vector<double> params) {
    try {
        PromptGeometry g{h.at("p"), h.at("C"), h.at("H"), h.at("W")};
        const std::string role = h.at("role");
        if (role != "id_specific" && role != "ood_specific") throw ArtifactError("unknown prompt role " + role);
        return {g, role == "id_specific" ? PromptRole::IdSpecific : PromptRole::OodSpecific, std::move(params)};
    } catch (const json::exception& e) {
        throw ArtifactError(std::string("malformed prompt header: ") + e.what());
    }
}

void VisualPrompt::save(const std::filesystem::path& path) const {
    Checkpoint ck;
    ck.header = header();
    ck.add_block("prompt", params_);
    ck.save(path);
}

VisualPrompt VisualPrompt::load(const std::filesystem::path& path) {
    const Checkpoint ck = Checkpoint::load(path);
    return from_header(ck.header, ck.block("prompt"));
}

namespace {

void check_image(const Tensor3& img, const PromptGeometry& g) {
    if (img.channels != g.channels || img.height != g.height || img.width != g.width)
        throw GeometryError("image " + std::to_string(img.channels) + "x" + std::to_string(img.height) + "x" +
                            std::to_string(img.width) + " does not match prompt frame " +
                            std::to_string(g.channels) + "x" + std::to_string(g.height) + "x" +
                            std::to_string(g.width));
}

} // namespace

Tensor3 apply_prompt(const Tensor3& image, const VisualPrompt& prompt) {
    check_image(image, prompt.geometry());
    Tensor3 out = image;
    const auto& off = prompt.offsets();
    const auto& v = prompt.params();
    for (std::size_t i = 0; i < off.size(); ++i) out.data[off[i]] += v[i];
    return out;
}

std::vector<double> prompt_gradient(const Tensor3& upstream_grad, const VisualPrompt& prompt) {
    check_image(upstream_grad, prompt.geometry());
    const auto& off = prompt.offsets();
    std::vector<double> g(off.size());
    for (std::size_t i = 0; i < off.size(); ++i) g[i] = upstream_grad.data[off[i]];
    return g;
}

VisualPrompt init_prompt(const PromptGeometry& g, PromptRole role, std::mt19937_64& rng) {
    VisualPrompt prompt(g, role);
    if (role == PromptRole::OodSpecific) {
        std::normal_distribution<double> dist(0.0, 0.01);
        for (auto& v : prompt.params()) v = dist(rng);
    }
    return prompt;
}

} // namespace possl
