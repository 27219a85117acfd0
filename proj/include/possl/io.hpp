#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace possl {

using json = nlohmann::json;

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
json read_json(const std::filesystem::path& path);

// Little-endian float32 encoding of a double vector.
void append_f32_le(std::vector<std::uint8_t>& out, std::span<const double> values);
std::vector<double> decode_f32_le(std::span<const std::uint8_t> bytes);

// Checkpoint container: one line of compact JSON, then the named float32
// blocks in header order. The header gains a "blocks" array of
// {"name", "count"} entries.
struct Checkpoint {
    json header = json::object();
    std::vector<std::pair<std::string, std::vector<double>>> blocks;

    void add_block(std::string name, std::vector<double> values);
    const std::vector<double>& block(const std::string& name) const;

    std::vector<std::uint8_t> encode() const;
    static Checkpoint decode(std::span<const std::uint8_t> bytes);
    void save(const std::filesystem::path& path) const;
    static Checkpoint load(const std::filesystem::path& path);
};

} // namespace possl
