#pragma once

#include <iosfwd>
#include <string>

#include "chanopt/controller.hpp"
#include "chanopt/trainer.hpp"

namespace chanopt {

// Command implementations backing the CLI. Each throws on failure:
// FormatError / GraphError / ConstraintConflict / IncompatibilityError /
// std::invalid_argument for bad inputs, TrainerFailure / std::runtime_error
// for runtime failures. All file output is deterministic: reals carry 9
// significant digits and nothing embeds timestamps, so rerunning a command
// with the same inputs reproduces every byte.

// $CHANOPT_OUTPUT_ROOT, or "runs" when unset.
std::string default_output_root();

// Reads a snapshot archive, computes per-layer rank/condition histories
// against the graph, writes <out_dir>/metrics.csv (one row per epoch and
// layer) and <out_dir>/summary.csv (per layer: the highest output rank
// measure reached, the rank slope up to the plateau, and the plateau epoch).
struct ProbeParams {
  std::string archive_path;
  std::string graph_path;
  std::string out_dir;
};
void cmd_probe(const ProbeParams& p);

// Prints the channel-variable report for a graph: variable count, per-node
// depth expressions, per-edge output expressions, and layer groups.
struct AssignParams {
  std::string graph_path;
};
void cmd_assign(const AssignParams& p, std::ostream& out);

// Runs the full width search and writes the run directory:
//   config.json       echoed configuration (replayable via --config)
//   metrics.csv       rank/condition metrics per trial, epoch and layer
//   train_log.csv     loss and accuracy per trial and epoch
//   search_log.csv    per-variable decisions per trial
//   sizes_history.txt widths each trial trained with
//   final_sizes.txt   resulting widths, readable by count-params
struct SearchParams {
  std::string graph_path;
  std::string out_dir;
  SearchConfig search;
  TrainerConfig trainer;
};
void cmd_search(const SearchParams& p);

// Serialization of SearchParams for the config echo and --config loading.
std::string search_params_to_json(const SearchParams& p);
SearchParams search_params_from_json_file(const std::string& path);

// Applies the one-shot rank-informed reduction. Ranks come from a probe
// summary.csv; baseline widths come from a sizes file, or from the graph's
// baseline declarations when baseline_sizes_path is empty. Writes a sizes
// file.
struct ScaleStaticParams {
  std::string graph_path;
  std::string baseline_sizes_path;  // optional
  std::string ranks_csv_path;
  double scale_fraction = 1.0;
  std::string out_path;
};
void cmd_scale_static(const ScaleStaticParams& p);

// Multiplies every width by a constant factor and writes a sizes file.
// Baseline widths resolve as in cmd_scale_static.
struct ScaleCompoundParams {
  std::string graph_path;
  std::string sizes_path;  // optional
  double multiplier = 1.0;
  std::string out_path;
};
void cmd_scale_compound(const ScaleCompoundParams& p);

// Prints the total trainable parameter count and a per-variable breakdown.
// Widths: uniform_width if > 0, else the sizes file if given, else the
// graph's baseline declarations.
struct CountParamsParams {
  std::string graph_path;
  std::string sizes_path;  // optional
  int uniform_width = 0;   // optional
};
void cmd_count_params(const CountParamsParams& p, std::ostream& out);

}  // namespace chanopt
