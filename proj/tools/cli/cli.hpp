#pragma once

// The `ditflow` command line: subcommands, run directories and manifests.
//
// Every subcommand is a function of a JSON argument object. Flags are derived
// from the same parameter table, so a run's manifest.json holds everything
// needed to execute it again.

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ditflow/tensor.hpp"

namespace ditflow::cli {

/// Bad flags, bad values or a missing input. Maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ParamType { uint, real, boolean, text, path, real_list, uint_list };

struct Param {
  std::string name;  // JSON key; the flag is --name with '_' -> '-'
  ParamType type;
  nlohmann::json fallback;  // null: optional with no value
  std::string help;
  bool required = false;
};

struct Command {
  std::string name;
  std::string help;
  std::vector<Param> params;
};

/// All subcommands except `replay`, in help order.
const std::vector<Command>& commands();
const Command& command(const std::string& name);

/// Defaults for every parameter of a command.
nlohmann::json default_args(const std::string& name);

/// Fills defaults, rejects unknown keys, missing required values and values
/// of the wrong type. Paths are made absolute.
nlohmann::json resolve_args(const std::string& name, const nlohmann::json& given);

struct RunResult {
  std::filesystem::path dir;
  nlohmann::json manifest;
  int exit_code = 0;
};

/// Run directory used when --out is not given:
/// $DITFLOW_OUT_ROOT (or ./runs) / <command>-<hash of args>.
std::filesystem::path default_run_dir(const std::string& name, const nlohmann::json& args);

/// Executes one subcommand into `dir` and writes its manifest. `force`
/// replaces an existing run directory; otherwise one is an error.
RunResult execute(const std::string& name, const nlohmann::json& args, const std::filesystem::path& dir,
                  std::ostream& log, bool force = false);

/// Re-executes a manifest into `dir`. With `check`, every recorded output must
/// match the original byte for byte (exit code 1 otherwise).
RunResult replay(const std::filesystem::path& manifest, const std::filesystem::path& dir, bool check,
                 std::ostream& log, bool force = false);

/// 8-bit binary PGM of one channel of one frame; [-1, 1] maps to [0, 255].
std::string encode_pgm(const Tensor<float>& video, std::size_t frame, std::size_t channel);

/// Entry point: parses argv, runs, maps errors to exit codes.
int main_entry(int argc, char** argv);

}  // namespace ditflow::cli
