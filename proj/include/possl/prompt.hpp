#pragma once

#include <cstddef>
#include <filesystem>
#include <random>
#include <vector>

#include "possl/io.hpp"
#include "possl/tensor.hpp"

namespace possl {

enum class PromptRole { IdSpecific, OodSpecific };

struct PromptGeometry {
    int p = 4;
    int channels = 3;
    int height = 32;
    int width = 32;

    bool operator==(const PromptGeometry&) const = default;
};

struct PixelCoord {
    int channel;
    int row;
    int col;

    auto operator<=>(const PixelCoord&) const = default;
};

// 2*C*p*(H + W - 2p); throws GeometryError when 2p > min(H, W).
std::size_t param_count(int p, int channels, int height, int width);
inline std::size_t param_count(const PromptGeometry& g) { return param_count(g.p, g.channels, g.height, g.width); }

// Parameter index -> border pixel. Per channel: top band rows, bottom band
// rows, then the left and right bands of each interior row.
std::vector<PixelCoord> index_map(const PromptGeometry& g);

// Padding-template prompt: one additive parameter per border pixel.
class VisualPrompt {
public:
    VisualPrompt(PromptGeometry geometry, PromptRole role);
    VisualPrompt(PromptGeometry geometry, PromptRole role, std::vector<double> params);

    const PromptGeometry& geometry() const { return geometry_; }
    PromptRole role() const { return role_; }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    // Flat tensor offsets matching index_map().
    const std::vector<std::size_t>& offsets() const { return offsets_; }

    json header() const;
    static VisualPrompt from_header(const json& header, std::vector<double> params);
    void save(const std::filesystem::path& path) const;
    static VisualPrompt load(const std::filesystem::path& path);

    bool operator==(const VisualPrompt& o) const {
        return geometry_ == o.geometry_ && role_ == o.role_ && params_ == o.params_;
    }

private:
    PromptGeometry geometry_;
    PromptRole role_;
    std::vector<double> params_;
    std::vector<std::size_t> offsets_;
};

// x + v on border pixels, interior untouched, no clamping.
Tensor3 apply_prompt(const Tensor3& image, const VisualPrompt& prompt);

// Adjoint of apply_prompt: gathers the upstream image gradient at the border.
std::vector<double> prompt_gradient(const Tensor3& upstream_grad, const VisualPrompt& prompt);

// IdSpecific starts at zero, OodSpecific at N(0, 0.01^2).
VisualPrompt init_prompt(const PromptGeometry& g, PromptRole role, std::mt19937_64& rng);

} // namespace possl
