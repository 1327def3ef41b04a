#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace kvatlas::cli {

/// Thrown for bad flags or flag combinations; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes through `writer` into a sibling temp file, then renames over `path`.
void write_atomically(const std::filesystem::path& path,
                      const std::function<void(const std::filesystem::path& tmp)>& writer);
void write_text_atomically(const std::filesystem::path& path, const std::string& text);

std::string sha256_file(const std::filesystem::path& path);

struct RunManifest {
  std::string command;
  std::map<std::string, std::string> resolved_config;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> input_hashes;  // path -> sha256
  std::string tool_version;

  std::string to_json() const;
};

RunManifest make_manifest(std::string command, std::map<std::string, std::string> config,
                          std::uint64_t seed, const std::vector<std::filesystem::path>& inputs);

void write_manifest(const RunManifest& manifest, const std::filesystem::path& path);

/// Reads `key=value` lines ('#' comments, blank lines ignored).
std::vector<std::pair<std::string, std::string>> read_config_file(
    const std::filesystem::path& path);

/// Expands `--config FILE` into flags placed right after the subcommand name,
/// so explicit flags (parsed later, last one wins) override file values.
std::vector<std::string> expand_config_args(const std::vector<std::string>& args,
                                            const std::vector<std::string>& subcommands);

std::vector<std::size_t> parse_budget_list(const std::string& text);

const char* tool_version();

}  // namespace kvatlas::cli
