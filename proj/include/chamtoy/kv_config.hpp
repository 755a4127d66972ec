#ifndef CHAMTOY_KV_CONFIG_HPP_
#define CHAMTOY_KV_CONFIG_HPP_

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "chamtoy/common.hpp"

// Flat `key=value` text files, used for configs and checkpoint metadata.
namespace chamtoy {

using KvMap = std::map<std::string, std::string>;

// Blank lines and lines starting with '#' are ignored. Duplicate keys are
// an error.
KvMap parse_kv(std::string_view text, std::string_view origin = "<string>");
KvMap read_kv_file(const std::filesystem::path& path);
std::string format_kv(const KvMap& kv);
void write_kv_file(const std::filesystem::path& path, const KvMap& kv);

// Round-trips exactly through parse_scalar.
std::string format_scalar(double value);

double parse_scalar(std::string_view key, std::string_view value);
std::size_t parse_size(std::string_view key, std::string_view value);
std::uint64_t parse_u64(std::string_view key, std::string_view value);
bool parse_bool(std::string_view key, std::string_view value);

}  // namespace chamtoy

#endif  // CHAMTOY_KV_CONFIG_HPP_
