#include "run_support.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "json.hpp"

#ifndef KVATLAS_VERSION
#define KVATLAS_VERSION "0.0.0"
#endif

namespace kvatlas::cli {

const char* tool_version() { return KVATLAS_VERSION; }

void write_atomically(const std::filesystem::path& path,
                      const std::function<void(const std::filesystem::path& tmp)>& writer) {
  auto tmp = path;
  tmp += ".tmp";
  try {
    writer(tmp);
    std::filesystem::rename(tmp, path);
  } catch (...) {
    std::error_code ignored;
    std::filesystem::remove(tmp, ignored);
    throw;
  }
}

void write_text_atomically(const std::filesystem::path& path, const std::string& text) {
  write_atomically(path, [&](const std::filesystem::path& tmp) {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out << text;
    out.close();
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  });
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string() + ": missing file");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 init failed");
  }
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["resolved_config"] = resolved_config;
  j["seed"] = seed;
  j["input_hashes"] = input_hashes;
  j["tool_version"] = tool_version;
  return j.dump(2) + "\n";
}

RunManifest make_manifest(std::string command, std::map<std::string, std::string> config,
                          std::uint64_t seed, const std::vector<std::filesystem::path>& inputs) {
  RunManifest m;
  m.command = std::move(command);
  m.resolved_config = std::move(config);
  m.seed = seed;
  for (const auto& p : inputs) m.input_hashes[p.string()] = "sha256:" + sha256_file(p);
  m.tool_version = tool_version();
  return m;
}

void write_manifest(const RunManifest& manifest, const std::filesystem::path& path) {
  write_text_atomically(path, manifest.to_json());
}

std::vector<std::pair<std::string, std::string>> read_config_file(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path.string() + ":" + std::to_string(line_no) + ": expected key=value");
    }
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

std::vector<std::string> expand_config_args(const std::vector<std::string>& args,
                                            const std::vector<std::string>& subcommands) {
  std::vector<std::string> rest;
  std::vector<std::string> from_file;
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string path;
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a file argument");
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
      continue;
    }
    for (auto [key, value] : read_config_file(path)) {
      std::replace(key.begin(), key.end(), '_', '-');
      if (value == "true") {
        from_file.push_back("--" + key);
      } else if (value != "false") {
        from_file.push_back("--" + key);
        from_file.push_back(value);
      }
    }
  }
  if (from_file.empty()) return rest;
  std::size_t at = std::min<std::size_t>(rest.size(), 1);
  for (std::size_t i = 1; i < rest.size(); ++i) {
    if (std::find(subcommands.begin(), subcommands.end(), rest[i]) != subcommands.end()) {
      at = i + 1;
      break;
    }
  }
  rest.insert(rest.begin() + static_cast<std::ptrdiff_t>(at), from_file.begin(), from_file.end());
  return rest;
}

std::vector<std::size_t> parse_budget_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &used);
    } catch (const std::logic_error&) {
      throw UsageError("bad budget '" + item + "'");
    }
    if (used != item.size() || v <= 0) throw UsageError("bad budget '" + item + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw UsageError("empty budget list");
  if (!std::is_sorted(out.begin(), out.end()) ||
      std::adjacent_find(out.begin(), out.end()) != out.end()) {
    throw UsageError("budgets must be strictly increasing");
  }
  return out;
}

}  // namespace kvatlas::cli
