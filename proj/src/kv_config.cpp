#include "chamtoy/kv_config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace chamtoy {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KvMap parse_kv(std::string_view text, std::string_view origin) {
  KvMap kv;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto line = trim(text.substr(pos, end - pos));
    ++line_no;
    pos = end + 1;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) +
                        ": expected key=value");
    }
    std::string key(trim(line.substr(0, eq)));
    std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) +
                        ": empty key");
    }
    if (!kv.emplace(key, value).second) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) +
                        ": duplicate key '" + key + "'");
    }
  }
  return kv;
}

KvMap read_kv_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_kv(os.str(), path.string());
}

std::string format_kv(const KvMap& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

void write_kv_file(const std::filesystem::path& path, const KvMap& kv) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << format_kv(kv);
}

std::string format_scalar(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

double parse_scalar(std::string_view key, std::string_view value) {
  const std::string s(value);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ConfigError("'" + std::string(key) + "': not a number: '" + s + "'");
  }
  return v;
}

std::uint64_t parse_u64(std::string_view key, std::string_view value) {
  std::uint64_t v = 0;
  const auto [ptr, ec] =
      std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("'" + std::string(key) +
                      "': not a non-negative integer: '" + std::string(value) +
                      "'");
  }
  return v;
}

std::size_t parse_size(std::string_view key, std::string_view value) {
  return static_cast<std::size_t>(parse_u64(key, value));
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1" || value == "on" || value == "yes") {
    return true;
  }
  if (value == "false" || value == "0" || value == "off" || value == "no") {
    return false;
  }
  throw ConfigError("'" + std::string(key) + "': not a boolean: '" +
                    std::string(value) + "'");
}

}  // namespace chamtoy
