#include "possl/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "possl/error.hpp"
#include "possl/io.hpp"

namespace possl {

void SyntheticConfig::validate() const {
    if (n_id_classes < 2) throw ConfigError("synthetic config: need at least 2 ID classes");
    if (n_ood_classes < 1)
        throw ConfigError("synthetic config: need at least 1 OOD class (O_l must differ from O_u)");
    if (side < 8) throw ConfigError("synthetic config: image side must be >= 8");
    if (channels < 1) throw ConfigError("synthetic config: channels must be positive");
    if (n_labeled_per_class < 1 || n_unlabeled_per_class < 0 || n_test_per_class < 0)
        throw ConfigError("synthetic config: invalid per-class sample counts");
    if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("synthetic config: noise must be >= 0");
}

Tensor3 synthetic_template(const SyntheticConfig& cfg, int cls) {
    if (cls < 0 || cls >= cfg.n_id_classes + cfg.n_ood_classes) throw ConfigError("synthetic_template: no such class");
    // ID classes share one colour family. Each class offsets the family colour
    // and adds its own low-frequency waves. The OOD family sits away from the ID
    // family along a colour direction the ID classes do not vary along.
    std::mt19937_64 family_rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 0xFA417ULL);
    std::uniform_real_distribution<double> family(0.35, 0.65);
    std::vector<double> id_family(cfg.channels);
    for (auto& v : id_family) v = family(family_rng);

    // Offsets within a family are drawn jointly so its classes stay apart;
    // rejection gives up after a bounded number of tries.
    constexpr double kJitter = 0.12, kMinSeparation = 0.15, kOodGap = 0.45;
    std::uniform_real_distribution<double> jitter(-kJitter, kJitter);
    auto draw_offsets = [&](int n) {
        std::vector<std::vector<double>> offsets;
        for (int k = 0; k < n; ++k) {
            std::vector<double> o(cfg.channels);
            for (int attempt = 0; attempt < 200; ++attempt) {
                for (auto& v : o) v = jitter(family_rng);
                bool far = true;
                for (const auto& prev : offsets) far = far && distance(o, prev) >= kMinSeparation;
                if (far) break;
            }
            offsets.push_back(std::move(o));
        }
        return offsets;
    };
    const auto id_offsets = draw_offsets(cfg.n_id_classes);

    // Gram-Schmidt a random direction against the ID offset differences; if
    // nothing is left (too few channels) keep the raw direction.
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> dir(cfg.channels);
    for (auto& v : dir) v = gauss(family_rng);
    std::vector<std::vector<double>> basis;
    for (int k = 1; k < cfg.n_id_classes; ++k) {
        std::vector<double> d(cfg.channels);
        for (int c = 0; c < cfg.channels; ++c) d[c] = id_offsets[k][c] - id_offsets[0][c];
        for (const auto& e : basis) {
            const double t = dot(d, e);
            for (int c = 0; c < cfg.channels; ++c) d[c] -= t * e[c];
        }
        const double n = norm(d);
        if (n < 1e-9) continue;
        for (auto& v : d) v /= n;
        basis.push_back(std::move(d));
    }
    std::vector<double> ortho = dir;
    for (const auto& e : basis) {
        const double t = dot(ortho, e);
        for (int c = 0; c < cfg.channels; ++c) ortho[c] -= t * e[c];
    }
    if (norm(ortho) > 1e-6 * norm(dir)) dir = ortho;
    const double dn = norm(dir);
    std::vector<double> ood_family(cfg.channels);
    for (int c = 0; c < cfg.channels; ++c) ood_family[c] = id_family[c] + kOodGap * dir[c] / dn;
    const auto ood_offsets = draw_offsets(cfg.n_ood_classes);

    const bool is_id = cls < cfg.n_id_classes;
    const auto& fam = is_id ? id_family : ood_family;
    const auto& offset = is_id ? id_offsets[cls] : ood_offsets[cls - cfg.n_id_classes];

    std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 0xC1A55ULL * static_cast<std::uint64_t>(cls + 1));
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    // OOD classes carry finer texture than anything the ID classes show.
    const int max_freq = is_id ? 3 : 8;
    std::uniform_int_distribution<int> freq(-max_freq, max_freq);
    constexpr int kWaves = 2;
    constexpr double kAmplitude = 0.12;

    Tensor3 t(cfg.channels, cfg.side, cfg.side);
    for (int c = 0; c < cfg.channels; ++c) {
        const double b = fam[c] + offset[c];
        double fx[kWaves], fy[kWaves], ph[kWaves];
        for (int k = 0; k < kWaves; ++k) {
            do {
                fx[k] = freq(rng);
                fy[k] = freq(rng);
            } while (std::max(std::abs(fx[k]), std::abs(fy[k])) < (is_id ? 1 : 5));
            ph[k] = phase(rng);
        }
        for (int y = 0; y < cfg.side; ++y)
            for (int x = 0; x < cfg.side; ++x) {
                double v = b;
                for (int k = 0; k < kWaves; ++k)
                    v += kAmplitude * std::cos(2.0 * std::numbers::pi * (fx[k] * x + fy[k] * y) / cfg.side + ph[k]);
                t.at(c, y, x) = v;
            }
    }
    return t;
}

OpenSetSplit generate_synthetic(const SyntheticConfig& cfg) {
    cfg.validate();
    const int n_classes = cfg.n_id_classes + cfg.n_ood_classes;
    OpenSetSplit split;
    for (int k = 0; k < n_classes; ++k) {
        split.all_classes.push_back(k);
        if (k < cfg.n_id_classes) split.id_classes.push_back(k);
    }

    std::mt19937_64 rng(cfg.seed ^ 0x5EEDDA7A5EEDDA7AULL);
    std::normal_distribution<double> noise(0.0, 1.0);
    auto draw = [&](const Tensor3& tmpl) {
        Tensor3 img = tmpl;
        for (auto& v : img.data) v = static_cast<float>(std::clamp(v + cfg.noise * noise(rng), 0.0, 1.0));
        return img;
    };

    for (int k = 0; k < n_classes; ++k) {
        const Tensor3 tmpl = synthetic_template(cfg, k);
        const bool is_id = k < cfg.n_id_classes;
        const TruthTag tag = is_id ? TruthTag::Id : TruthTag::Ood;
        if (is_id)
            for (int i = 0; i < cfg.n_labeled_per_class; ++i)
                split.labeled.push_back({draw(tmpl), k, TruthTag::Id});
        for (int i = 0; i < cfg.n_unlabeled_per_class; ++i)
            split.unlabeled.push_back({draw(tmpl), std::nullopt, tag});
        for (int i = 0; i < cfg.n_test_per_class; ++i)
            split.test.push_back({draw(tmpl), k, tag});
    }
    return split;
}

std::vector<ImageSample> parse_cifar10_binary(std::span<const std::uint8_t> bytes) {
    if (bytes.size() % kCifarRecordBytes != 0) {
        std::ostringstream os;
        os << "truncated record: file length " << bytes.size() << " is not a multiple of "
           << kCifarRecordBytes << " (partial record at byte offset "
           << bytes.size() / kCifarRecordBytes * kCifarRecordBytes << ")";
        throw ParseError(os.str());
    }
    std::vector<ImageSample> out;
    out.reserve(bytes.size() / kCifarRecordBytes);
    for (std::size_t off = 0; off < bytes.size(); off += kCifarRecordBytes) {
        const int label = bytes[off];
        if (label > 9) {
            std::ostringstream os;
            os << "label byte " << label << " out of range 0-9 at byte offset " << off;
            throw ParseError(os.str());
        }
        ImageSample s;
        s.pixels = Tensor3(3, kCifarSide, kCifarSide);
        for (std::size_t i = 0; i < s.pixels.size(); ++i)
            s.pixels.data[i] = static_cast<float>(bytes[off + 1 + i] / 255.0f);
        s.label = label;
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<ImageSample> load_cifar10_binary(const std::filesystem::path& path) {
    return parse_cifar10_binary(read_file(path));
}

std::vector<std::uint8_t> serialize_cifar10_record(const ImageSample& sample) {
    if (sample.pixels.channels != 3 || sample.pixels.height != kCifarSide || sample.pixels.width != kCifarSide)
        throw GeometryError("CIFAR-10 records are 3x32x32");
    if (!sample.label || *sample.label < 0 || *sample.label > 9)
        throw ParseError("CIFAR-10 record needs a label in 0-9");
    std::vector<std::uint8_t> rec(kCifarRecordBytes);
    rec[0] = static_cast<std::uint8_t>(*sample.label);
    for (std::size_t i = 0; i < sample.pixels.size(); ++i)
        rec[1 + i] = static_cast<std::uint8_t>(std::lround(std::clamp(sample.pixels.data[i], 0.0, 1.0) * 255.0));
    return rec;
}

OpenSetSplit make_open_set_split(const std::vector<ImageSample>& samples, const std::vector<int>& id_classes,
                                 int n_labeled_per_class, std::uint64_t seed, std::vector<ImageSample> test) {
    std::set<int> present;
    for (const auto& s : samples) {
        if (!s.label) throw ConfigError("make_open_set_split: every input sample needs a label");
        present.insert(*s.label);
    }
    const std::set<int> ids(id_classes.begin(), id_classes.end());
    if (ids.empty()) throw ConfigError("make_open_set_split: no ID classes given");
    for (int c : ids)
        if (!present.contains(c))
            throw ConfigError("make_open_set_split: ID class " + std::to_string(c) + " not present");
    if (ids.size() >= present.size())
        throw ConfigError("make_open_set_split: ID classes must be a strict subset of the classes present "
                          "(O_l must differ from O_u)");
    if (n_labeled_per_class < 0) throw ConfigError("make_open_set_split: negative labeled count");

    OpenSetSplit split;
    split.id_classes.assign(ids.begin(), ids.end());
    split.all_classes.assign(present.begin(), present.end());

    std::mt19937_64 rng(seed);
    std::vector<bool> take(samples.size(), false);
    for (int c : split.id_classes) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < samples.size(); ++i)
            if (*samples[i].label == c) idx.push_back(i);
        if (static_cast<int>(idx.size()) < n_labeled_per_class)
            throw ConfigError("make_open_set_split: class " + std::to_string(c) + " has only " +
                              std::to_string(idx.size()) + " samples, need " + std::to_string(n_labeled_per_class));
        std::shuffle(idx.begin(), idx.end(), rng);
        std::sort(idx.begin(), idx.begin() + n_labeled_per_class);
        for (int k = 0; k < n_labeled_per_class; ++k) take[idx[k]] = true;
    }
    for (std::size_t i = 0; i < samples.size(); ++i) {
        ImageSample s = samples[i];
        s.truth_tag = ids.contains(*s.label) ? TruthTag::Id : TruthTag::Ood;
        if (take[i]) {
            split.labeled.push_back(std::move(s));
        } else {
            s.label.reset();
            split.unlabeled.push_back(std::move(s));
        }
    }
    // Labeled set ordered by class for reproducible batching.
    std::stable_sort(split.labeled.begin(), split.labeled.end(),
                     [](const ImageSample& a, const ImageSample& b) { return *a.label < *b.label; });
    for (auto& s : test) {
        if (s.label) s.truth_tag = ids.contains(*s.label) ? TruthTag::Id : TruthTag::Ood;
        split.test.push_back(std::move(s));
    }
    return split;
}

AugmentDraw draw_augmentation(AugmentStrength strength, const Tensor3& shape, std::mt19937_64& rng) {
    AugmentDraw d;
    std::bernoulli_distribution coin(0.5);
    const int sx = static_cast<int>(std::lround(0.125 * shape.width));
    const int sy = static_cast<int>(std::lround(0.125 * shape.height));
    d.flip = coin(rng);
    d.shift_x = std::uniform_int_distribution<int>(-sx, sx)(rng);
    d.shift_y = std::uniform_int_distribution<int>(-sy, sy)(rng);
    if (strength == AugmentStrength::Strong) {
        d.photometric = true;
        std::uniform_real_distribution<double> jitter(-0.15, 0.15);
        for (int c = 0; c < shape.channels; ++c) {
            d.brightness.push_back(1.0 + jitter(rng));
            d.contrast.push_back(1.0 + jitter(rng));
        }
        d.cutout_side = std::max(1, std::min(shape.height, shape.width) / 4);
        d.cutout_x = std::uniform_int_distribution<int>(0, shape.width - d.cutout_side)(rng);
        d.cutout_y = std::uniform_int_distribution<int>(0, shape.height - d.cutout_side)(rng);
    }
    return d;
}

ImageSample apply_augmentation(const ImageSample& sample, const AugmentDraw& d) {
    const Tensor3& in = sample.pixels;
    ImageSample out = sample;
    Tensor3& px = out.pixels;
    for (int c = 0; c < in.channels; ++c)
        for (int y = 0; y < in.height; ++y)
            for (int x = 0; x < in.width; ++x) {
                const int sy = std::clamp(y - d.shift_y, 0, in.height - 1);
                int sx = std::clamp(x - d.shift_x, 0, in.width - 1);
                if (d.flip) sx = in.width - 1 - sx;
                px.at(c, y, x) = in.at(c, sy, sx);
            }
    if (d.photometric) {
        const std::size_t plane = static_cast<std::size_t>(in.height) * in.width;
        for (int c = 0; c < in.channels; ++c) {
            double mean = 0.0;
            for (std::size_t i = 0; i < plane; ++i) mean += px.data[c * plane + i];
            mean /= static_cast<double>(plane);
            for (std::size_t i = 0; i < plane; ++i) {
                double& v = px.data[c * plane + i];
                v = std::clamp(((v - mean) * d.contrast[c] + mean) * d.brightness[c], 0.0, 1.0);
            }
        }
        for (int c = 0; c < in.channels; ++c)
            for (int y = d.cutout_y; y < d.cutout_y + d.cutout_side; ++y)
                for (int x = d.cutout_x; x < d.cutout_x + d.cutout_side; ++x) px.at(c, y, x) = 0.5;
    }
    return out;
}

ImageSample augment(const ImageSample& sample, AugmentStrength strength, std::mt19937_64& rng) {
    return apply_augmentation(sample, draw_augmentation(strength, sample.pixels, rng));
}

Tensor3 resize_nearest(const Tensor3& img, int height, int width) {
    if (height <= 0 || width <= 0) throw GeometryError("resize_nearest: target must be positive");
    if (img.height == height && img.width == width) return img;
    Tensor3 out(img.channels, height, width);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x)
                out.at(c, y, x) = img.at(c, static_cast<int>(static_cast<long>(y) * img.height / height),
                                         static_cast<int>(static_cast<long>(x) * img.width / width));
    return out;
}

namespace {

const char* tag_name(TruthTag t) { return t == TruthTag::Id ? "id" : "ood"; }

json export_part(const std::vector<ImageSample>& part, const std::filesystem::path& dir, const std::string& name) {
    std::vector<std::uint8_t> bytes;
    json labels = json::array(), truth = json::array();
    for (const auto& s : part) {
        append_f32_le(bytes, s.pixels.data);
        labels.push_back(s.label ? json(*s.label) : json(nullptr));
        truth.push_back(tag_name(s.truth_tag));
    }
    const std::string file = name + ".f32";
    write_file(dir / file, bytes);
    return {{"file", file}, {"count", part.size()}, {"labels", labels}, {"truth", truth}, {"sha256", sha256_hex(bytes)}};
}

std::vector<ImageSample> import_part(const json& meta, const std::filesystem::path& dir, int c, int h, int w) {
    const auto bytes = read_file(dir / meta.at("file").get<std::string>());
    if (sha256_hex(bytes) != meta.at("sha256").get<std::string>())
        throw ArtifactError("checksum mismatch for " + (dir / meta.at("file").get<std::string>()).string());
    const std::size_t count = meta.at("count").get<std::size_t>();
    const std::size_t per = static_cast<std::size_t>(c) * h * w;
    if (bytes.size() != count * per * 4) throw ArtifactError("tensor file size does not match manifest");
    const auto values = decode_f32_le(bytes);
    std::vector<ImageSample> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        out[i].pixels = Tensor3(c, h, w);
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(i * per), per, out[i].pixels.data.begin());
        const auto& lab = meta.at("labels").at(i);
        if (!lab.is_null()) out[i].label = lab.get<int>();
        out[i].truth_tag = meta.at("truth").at(i).get<std::string>() == "id" ? TruthTag::Id : TruthTag::Ood;
    }
    return out;
}

} // namespace

void export_dataset(const OpenSetSplit& split, const std::filesystem::path& dir, std::uint64_t seed,
                    const std::string& source) {
    std::filesystem::create_directories(dir);
    const ImageSample& any = !split.labeled.empty() ? split.labeled.front() : split.unlabeled.at(0);
    json m;
    m["format"] = "possl-dataset";
    m["version"] = 1;
    m["source"] = source;
    m["seed"] = seed;
    m["geometry"] = {{"channels", any.pixels.channels}, {"height", any.pixels.height}, {"width", any.pixels.width}};
    m["id_classes"] = split.id_classes;
    m["all_classes"] = split.all_classes;
    m["splits"]["labeled"] = export_part(split.labeled, dir, "labeled");
    m["splits"]["unlabeled"] = export_part(split.unlabeled, dir, "unlabeled");
    m["splits"]["test"] = export_part(split.test, dir, "test");
    write_text(dir / "manifest.json", m.dump(2) + "\n");
}

OpenSetSplit import_dataset(const std::filesystem::path& dir) {
    const json m = read_json(dir / "manifest.json");
    try {
        const int c = m.at("geometry").at("channels"), h = m.at("geometry").at("height"),
                  w = m.at("geometry").at("width");
        OpenSetSplit s;
        s.id_classes = m.at("id_classes").get<std::vector<int>>();
        s.all_classes = m.at("all_classes").get<std::vector<int>>();
        s.labeled = import_part(m.at("splits").at("labeled"), dir, c, h, w);
        s.unlabeled = import_part(m.at("splits").at("unlabeled"), dir, c, h, w);
        s.test = import_part(m.at("splits").at("test"), dir, c, h, w);
        return s;
    } catch (const json::exception& e) {
        throw ArtifactError(std::string("malformed dataset manifest: ") + e.what());
    }
}

} // namespace possl
