#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "spinlab/corpus.hpp"
#include "spinlab/selfplay.hpp"

namespace spinlab {

// Exit codes shared by every subcommand: 0 success, 1 numeric or
// verification failure, 2 configuration error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitNumericFailure = 1;
inline constexpr int kExitConfigError = 2;

struct OracleOptions {
  std::vector<double> alphas = {0.1, 0.5, 1.0};
  int tables = 20;
  double sigma = 0.5;       // confidence-table scale
  double tolerance = 1e-6;
  int prop1_max_steps = 40000;
  int sft_max_steps = 5000;
};

struct GradCheckOptions {
  int instances = 100;
  double step = 1e-5;
  double tolerance = 1e-6;
  int batch_size = 8;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  std::string task_path;  // empty = build from task_spec
  TaskSpec task_spec = default_task_spec();
  std::size_t annotated_count = 2048;
  SelfPlayConfig selfplay;
  OracleOptions oracle;
  GradCheckOptions gradcheck;
};

// Strict JSON config parsing: unknown keys are errors naming the key, all
// numeric ranges validated. Throws ConfigError.
RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config_json(const std::string& text, const std::string& origin);

ToyTask resolve_task(const RunConfig& config);

int cmd_train(const RunConfig& config);
int cmd_gradcheck(const RunConfig& config, bool inject_bug = false);
int cmd_oracle(const RunConfig& config);
int cmd_compare(const RunConfig& config);

// Subcommands: train | gradcheck | oracle | compare, with
// --config <path>, --out <dir>, --seed <u64> overrides.
int run_cli(int argc, const char* const* argv);

}  // namespace spinlab
