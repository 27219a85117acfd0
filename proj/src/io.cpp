#include "possl/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "possl/error.hpp"

namespace possl {

static_assert(std::endian::native == std::endian::little,
              "float32 blocks are written in host order");

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256 failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i)
        os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    return os.str();
}

std::string sha256_hex(const std::string& text) {
    return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

json read_json(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    try {
        return json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw ArtifactError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void append_f32_le(std::vector<std::uint8_t>& out, std::span<const double> values) {
    const std::size_t base = out.size();
    out.resize(base + values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const float f = static_cast<float>(values[i]);
        std::memcpy(out.data() + base + 4 * i, &f, 4);
    }
}

std::vector<double> decode_f32_le(std::span<const std::uint8_t> bytes) {
    if (bytes.size() % 4 != 0) throw ParseError("float32 block length not a multiple of 4");
    std::vector<double> v(bytes.size() / 4);
    for (std::size_t i = 0; i < v.size(); ++i) {
        float f;
        std::memcpy(&f, bytes.data() + 4 * i, 4);
        v[i] = f;
    }
    return v;
}

void Checkpoint::add_block(std::string name, std::vector<double> values) {
    blocks.emplace_back(std::move(name), std::move(values));
}

const std::vector<double>& Checkpoint::block(const std::string& name) const {
    for (const auto& [n, v] : blocks)
        if (n == name) return v;
    throw ArtifactError("checkpoint has no block '" + name + "'");
}

std::vector<std::uint8_t> Checkpoint::encode() const {
    json h = header;
    h["blocks"] = json::array();
    for (const auto& [n, v] : blocks) h["blocks"].push_back({{"name", n}, {"count", v.size()}});
    const std::string line = h.dump() + "\n";
    std::vector<std::uint8_t> out(line.begin(), line.end());
    for (const auto& [n, v] : blocks) append_f32_le(out, v);
    return out;
}

Checkpoint Checkpoint::decode(std::span<const std::uint8_t> bytes) {
    const auto* nl = static_cast<const std::uint8_t*>(std::memchr(bytes.data(), '\n', bytes.size()));
    if (nl == nullptr) throw ArtifactError("checkpoint header not terminated");
    const std::size_t header_len = static_cast<std::size_t>(nl - bytes.data());
    Checkpoint ck;
    try {
        ck.header = json::parse(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(header_len));
    } catch (const json::exception& e) {
        throw ArtifactError(std::string("corrupt checkpoint header: ") + e.what());
    }
    std::size_t pos = header_len + 1;
    if (!ck.header.contains("blocks") || !ck.header["blocks"].is_array())
        throw ArtifactError("checkpoint header lacks block table");
    for (const auto& b : ck.header["blocks"]) {
        const std::size_t count = b.at("count").get<std::size_t>();
        if (pos + 4 * count > bytes.size())
            throw ArtifactError("checkpoint truncated in block '" + b.at("name").get<std::string>() + "'");
        ck.blocks.emplace_back(b.at("name").get<std::string>(), decode_f32_le(bytes.subspan(pos, 4 * count)));
        pos += 4 * count;
    }
    if (pos != bytes.size()) throw ArtifactError("checkpoint has trailing bytes");
    ck.header.erase("blocks");
    return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file(path, encode()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return decode(read_file(path)); }

} // namespace possl
