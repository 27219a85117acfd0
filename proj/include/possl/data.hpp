#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "possl/tensor.hpp"

namespace possl {

enum class TruthTag { Id, Ood };

// One image with an optional class label. `truth_tag` is ground truth about
// ID/OOD membership; only the evaluation code is allowed to read it.
struct ImageSample {
    Tensor3 pixels;
    std::optional<int> label;
    TruthTag truth_tag = TruthTag::Id;

    bool operator==(const ImageSample&) const = default;
};

struct OpenSetSplit {
    std::vector<ImageSample> labeled;
    std::vector<ImageSample> unlabeled;
    std::vector<ImageSample> test;
    std::vector<int> id_classes;   // O_l, sorted
    std::vector<int> all_classes;  // O_u, sorted

    bool operator==(const OpenSetSplit&) const = default;
};

struct SyntheticConfig {
    int n_id_classes = 2;
    int n_ood_classes = 1;
    int channels = 3;
    int side = 32;
    int n_labeled_per_class = 50;
    int n_unlabeled_per_class = 100;
    int n_test_per_class = 100;
    double noise = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

// Classes [0, n_id) are ID, the rest OOD. Pure function of `cfg`.
OpenSetSplit generate_synthetic(const SyntheticConfig& cfg);

// The noiseless class template the generator draws around.
Tensor3 synthetic_template(const SyntheticConfig& cfg, int cls);

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr int kCifarSide = 32;

std::vector<ImageSample> parse_cifar10_binary(std::span<const std::uint8_t> bytes);
std::vector<ImageSample> load_cifar10_binary(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_cifar10_record(const ImageSample& sample);

// Draws n_labeled_per_class samples of each ID class into the labeled set;
// everything else becomes unlabeled with its label hidden. `test` samples
// are tagged by class membership and passed through.
OpenSetSplit make_open_set_split(const std::vector<ImageSample>& samples,
                                 const std::vector<int>& id_classes,
                                 int n_labeled_per_class, std::uint64_t seed,
                                 std::vector<ImageSample> test = {});

enum class AugmentStrength { Weak, Strong };

// Random choices for one augmentation, separated from their application so
// that specific draws can be replayed.
struct AugmentDraw {
    bool flip = false;
    int shift_x = 0;
    int shift_y = 0;
    bool photometric = false;
    std::vector<double> brightness;  // per channel multiplier
    std::vector<double> contrast;    // per channel multiplier around the channel mean
    int cutout_x = 0;
    int cutout_y = 0;
    int cutout_side = 0;
};

AugmentDraw draw_augmentation(AugmentStrength strength, const Tensor3& shape, std::mt19937_64& rng);
ImageSample apply_augmentation(const ImageSample& sample, const AugmentDraw& draw);
ImageSample augment(const ImageSample& sample, AugmentStrength strength, std::mt19937_64& rng);

// Nearest-neighbour resize into a height x width frame.
Tensor3 resize_nearest(const Tensor3& img, int height, int width);

// Flat float32 tensors + manifest.json.
void export_dataset(const OpenSetSplit& split, const std::filesystem::path& dir,
                    std::uint64_t seed, const std::string& source);
OpenSetSplit import_dataset(const std::filesystem::path& dir);

} // namespace possl
