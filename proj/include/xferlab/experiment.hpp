#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace xferlab::cli {

inline constexpr const char* kToolVersion = "xferlab 0.1.0";
inline constexpr const char* kOutputRootEnv = "XFERLAB_OUT_ROOT";

// Experiment kinds accepted in config "kind".
const std::vector<std::string>& experiment_kinds();

struct RunOverrides {
  std::optional<std::uint64_t> seed_override;
  std::optional<std::filesystem::path> out_dir;
  bool single_thread = false;  // execution is sequential either way
};

// Structured schema violations, e.g. "$.pair.n_source: must be a positive
// integer". Empty means the config is runnable.
std::vector<std::string> validate_config(const nlohmann::json& config);
std::vector<std::string> validate_config_file(
    const std::filesystem::path& config_path);

// Executes the experiment described by the config. Writes every artifact
// under the run directory and a manifest.json last (atomically).
// Exit status: 0 success, 2 a verification verdict failed, 1 execution error.
int run_experiment(const std::filesystem::path& config_path,
                   const RunOverrides& overrides);

// Prints the verdict table of a finished run and re-checks artifact hashes.
// Exit status: 0 intact, 1 missing/corrupt manifest or artifact mismatch,
// 2 the run recorded a failed verdict.
int report_run(const std::filesystem::path& run_dir, std::ostream& out);

// "path=hash" lines for every artifact in the manifest; reruns of the same
// config and seed must agree on this digest byte for byte.
std::string artifacts_digest(const nlohmann::json& manifest);

}  // namespace xferlab::cli
