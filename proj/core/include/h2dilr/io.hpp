#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace h2dilr {

/// Little-endian 32-bit float encoding independent of host byte order.
void append_f32_le(std::string& out, std::span<const float> values);
std::vector<float> decode_f32_le(const std::string& bytes, std::size_t offset, std::size_t count);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& contents);

/// `key=value` lines; blank lines and `#` comments are skipped. Duplicate
/// keys are an error.
std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& source);

std::string trim(const std::string& s);
std::vector<std::string> split_list(const std::string& s, char sep = ',');

std::size_t parse_size(const std::string& s, const std::string& what);
double parse_double(const std::string& s, const std::string& what);
std::uint64_t parse_u64(const std::string& s, const std::string& what);
bool parse_bool(const std::string& s, const std::string& what);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace h2dilr
