#pragma once

// Subcommand runners behind the ndlab executable. Each runner reads a flat
// key=value configuration, writes its artifacts into an output directory and
// records a manifest from which the run can be replayed.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ndlab/config.hpp"

namespace ndlab::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitNumerical = 3,
  kExitCertification = 4,
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

const char* version();

/// theory, train, diversity, corrupt, cost.
const std::vector<std::string>& subcommands();

struct RunManifest {
  std::string subcommand;
  KvConfig config;  // fully resolved
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::filesystem::path>> artifacts;
  std::string started;
  std::string finished;
  std::string version;
  int exit_code = 0;

  /// Manifest keys live under "manifest."; the config snapshot keeps its own
  /// keys so the file can be fed back through --config.
  KvConfig to_config() const;
  static RunManifest from_config(const KvConfig& c);
  void save(const std::filesystem::path& path) const;
  static RunManifest load(const std::filesystem::path& path);
};

struct RunRequest {
  std::string subcommand;
  /// Merged file + --set overrides; missing keys take defaults.
  KvConfig config;
  /// Root seed; named sub-seeds are derived from it unless set explicitly.
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = ".";
  std::size_t threads = 1;
};

/// Default configuration for a subcommand with seeds derived from `seed`.
KvConfig default_config(const std::string& subcommand, std::uint64_t seed);

/// Fills in defaults, rejects unknown keys for the subcommand's sections.
KvConfig resolve_config(const RunRequest& request);

struct RunOutcome {
  int exit_code = kExitOk;
  RunManifest manifest;
};

/// Runs a subcommand and writes manifest.txt into the output directory.
/// Usage problems throw UsageError before any artifact is written.
RunOutcome run(const RunRequest& request, std::ostream& log);

/// Rebuilds the request recorded in a manifest, writing into `out_dir`.
RunRequest replay_request(const RunManifest& manifest, const std::filesystem::path& out_dir);

}  // namespace ndlab::cli
