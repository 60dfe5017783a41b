#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "chanopt/commands.hpp"
#include "chanopt/controller.hpp"
#include "chanopt/errors.hpp"

namespace {

// Exit codes: 0 success, 2 bad input (parse/format/graph/constraint/
// incompatibility), 3 runtime failure (training divergence, I/O).
constexpr int kOk = 0;
constexpr int kInputError = 2;
constexpr int kRuntimeError = 3;

struct SearchFlags {
  std::string config_path;
  chanopt::SearchParams params;  // bound targets for every flag
  int delta_preset_index = 3;
  long long max_params = 0;

  CLI::Option* o_graph = nullptr;
  CLI::Option* o_config = nullptr;
  CLI::Option* o_delta = nullptr;
  CLI::Option* o_preset = nullptr;
  CLI::Option* o_mu = nullptr;
  CLI::Option* o_gamma = nullptr;
  CLI::Option* o_phi = nullptr;
  CLI::Option* o_ept = nullptr;
  CLI::Option* o_trials = nullptr;
  CLI::Option* o_minc = nullptr;
  CLI::Option* o_maxc = nullptr;
  CLI::Option* o_init = nullptr;
  CLI::Option* o_pwin = nullptr;
  CLI::Option* o_peps = nullptr;
  CLI::Option* o_budget = nullptr;
  CLI::Option* o_seed = nullptr;
  CLI::Option* o_lr = nullptr;
  CLI::Option* o_mom = nullptr;
  CLI::Option* o_wd = nullptr;
  CLI::Option* o_batch = nullptr;
  CLI::Option* o_fp32 = nullptr;
  CLI::Option* o_imgsz = nullptr;
  CLI::Option* o_dch = nullptr;
  CLI::Option* o_classes = nullptr;
  CLI::Option* o_samples = nullptr;
  CLI::Option* o_noise = nullptr;
  CLI::Option* o_out = nullptr;
};

chanopt::SearchParams resolve_search_params(const SearchFlags& f) {
  using namespace chanopt;
  SearchParams p;
  if (f.o_config->count() > 0) {
    p = search_params_from_json_file(f.config_path);
  }
  if (f.o_graph->count() > 0) p.graph_path = f.params.graph_path;
  if (f.o_preset->count() > 0) {
    p.search.delta = delta_preset(f.delta_preset_index);
  }
  if (f.o_delta->count() > 0) p.search.delta = f.params.search.delta;
  if (f.o_mu->count() > 0) p.search.mu = f.params.search.mu;
  if (f.o_gamma->count() > 0) p.search.gamma = f.params.search.gamma;
  if (f.o_phi->count() > 0) p.search.phi_init = f.params.search.phi_init;
  if (f.o_ept->count() > 0) {
    p.search.epochs_per_trial = f.params.search.epochs_per_trial;
  }
  if (f.o_trials->count() > 0) {
    p.search.max_trials = f.params.search.max_trials;
  }
  if (f.o_minc->count() > 0) {
    p.search.min_channels = f.params.search.min_channels;
  }
  if (f.o_maxc->count() > 0) {
    p.search.max_channels = f.params.search.max_channels;
  }
  if (f.o_init->count() > 0) {
    p.search.initial_channel_size = f.params.search.initial_channel_size;
  }
  if (f.o_pwin->count() > 0) {
    p.search.plateau_window = f.params.search.plateau_window;
  }
  if (f.o_peps->count() > 0) {
    p.search.plateau_epsilon = f.params.search.plateau_epsilon;
  }
  if (f.o_budget->count() > 0) p.search.max_params = f.max_params;
  if (f.o_seed->count() > 0) p.trainer.seed = f.params.trainer.seed;
  if (f.o_lr->count() > 0) {
    p.trainer.learning_rate = f.params.trainer.learning_rate;
  }
  if (f.o_mom->count() > 0) p.trainer.momentum = f.params.trainer.momentum;
  if (f.o_wd->count() > 0) {
    p.trainer.weight_decay = f.params.trainer.weight_decay;
  }
  if (f.o_batch->count() > 0) {
    p.trainer.batch_size = f.params.trainer.batch_size;
  }
  if (f.o_fp32->count() > 0) p.trainer.single_precision = true;
  if (f.o_imgsz->count() > 0) {
    p.trainer.dataset.image_size = f.params.trainer.dataset.image_size;
  }
  if (f.o_dch->count() > 0) {
    p.trainer.dataset.channels = f.params.trainer.dataset.channels;
  }
  if (f.o_classes->count() > 0) {
    p.trainer.dataset.num_classes = f.params.trainer.dataset.num_classes;
  }
  if (f.o_samples->count() > 0) {
    p.trainer.dataset.samples = f.params.trainer.dataset.samples;
  }
  if (f.o_noise->count() > 0) {
    p.trainer.dataset.noise_std = f.params.trainer.dataset.noise_std;
  }
  p.out_dir = f.params.out_dir;
  if (p.out_dir.empty()) p.out_dir = default_output_root() + "/search";
  if (p.graph_path.empty()) {
    throw std::invalid_argument(
        "search: --graph is required (directly or via --config)");
  }
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace chanopt;

  CLI::App app{"Channel-size analysis and optimization for conv nets"};
  app.require_subcommand(1);

  ProbeParams probe_params;
  CLI::App* probe =
      app.add_subcommand("probe", "Rank/condition metrics from an archive");
  probe->add_option("--archive", probe_params.archive_path,
                    "snapshot archive path")
      ->required();
  probe->add_option("--graph", probe_params.graph_path, "graph file")
      ->required();
  probe->add_option("--out", probe_params.out_dir, "output directory");

  AssignParams assign_params;
  CLI::App* assign =
      app.add_subcommand("assign-channels", "Channel variable report");
  assign->add_option("--graph", assign_params.graph_path, "graph file")
      ->required();

  SearchFlags sf;
  CLI::App* search = app.add_subcommand("search", "Run the width search");
  sf.o_config = search->add_option("--config", sf.config_path,
                                   "config.json from an earlier run");
  sf.o_graph = search->add_option("--graph", sf.params.graph_path,
                                  "graph file");
  sf.o_delta = search->add_option("--delta", sf.params.search.delta,
                                  "rank-slope threshold");
  sf.o_preset = search
                    ->add_option("--delta-preset", sf.delta_preset_index,
                                 "threshold preset index 0..6")
                    ->check(CLI::Range(0, 6))
                    ->excludes(sf.o_delta);
  sf.o_mu = search->add_option("--mu", sf.params.search.mu,
                               "condition threshold");
  sf.o_gamma = search->add_option("--gamma", sf.params.search.gamma,
                                  "factor-scale stop");
  sf.o_phi = search->add_option("--phi-init", sf.params.search.phi_init,
                                "initial factor scale");
  sf.o_ept = search->add_option("--epochs-per-trial",
                                sf.params.search.epochs_per_trial,
                                "epochs trained per trial");
  sf.o_trials = search->add_option("--trials", sf.params.search.max_trials,
                                   "maximum number of trials");
  sf.o_minc = search->add_option("--min-channels",
                                 sf.params.search.min_channels,
                                 "lower width bound");
  sf.o_maxc = search->add_option("--max-channels",
                                 sf.params.search.max_channels,
                                 "upper width bound");
  sf.o_init = search->add_option("--initial-size",
                                 sf.params.search.initial_channel_size,
                                 "starting width for every variable");
  sf.o_pwin = search->add_option("--plateau-window",
                                 sf.params.search.plateau_window,
                                 "plateau detection window");
  sf.o_peps = search->add_option("--plateau-epsilon",
                                 sf.params.search.plateau_epsilon,
                                 "plateau detection tolerance");
  sf.o_budget = search->add_option("--max-params", sf.max_params,
                                   "optional parameter budget");
  sf.o_seed = search->add_option("--seed", sf.params.trainer.seed,
                                 "training seed");
  sf.o_lr = search->add_option("--lr", sf.params.trainer.learning_rate,
                               "learning rate");
  sf.o_mom = search->add_option("--momentum", sf.params.trainer.momentum,
                                "SGD momentum");
  sf.o_wd = search->add_option("--weight-decay",
                               sf.params.trainer.weight_decay,
                               "L2 coefficient");
  sf.o_batch = search->add_option("--batch-size",
                                  sf.params.trainer.batch_size,
                                  "minibatch size");
  sf.o_fp32 = search->add_flag("--single-precision", "train in float32");
  sf.o_imgsz = search->add_option("--image-size",
                                  sf.params.trainer.dataset.image_size,
                                  "synthetic image side length");
  sf.o_dch = search->add_option("--data-channels",
                                sf.params.trainer.dataset.channels,
                                "synthetic image channels");
  sf.o_classes = search->add_option("--classes",
                                    sf.params.trainer.dataset.num_classes,
                                    "synthetic class count");
  sf.o_samples = search->add_option("--samples",
                                    sf.params.trainer.dataset.samples,
                                    "synthetic sample count");
  sf.o_noise = search->add_option("--noise-std",
                                  sf.params.trainer.dataset.noise_std,
                                  "synthetic noise level");
  sf.o_out = search->add_option("--out", sf.params.out_dir, "run directory");

  ScaleStaticParams sstatic_params;
  CLI::App* sstatic =
      app.add_subcommand("scale-static", "One-shot rank-informed scaling");
  sstatic->add_option("--graph", sstatic_params.graph_path, "graph file")
      ->required();
  sstatic->add_option("--sizes", sstatic_params.baseline_sizes_path,
                      "baseline sizes file (default: graph declarations)");
  sstatic->add_option("--ranks", sstatic_params.ranks_csv_path,
                      "probe summary.csv with max output ranks")
      ->required();
  sstatic->add_option("--fraction", sstatic_params.scale_fraction,
                      "scale fraction in [0,1]")
      ->required();
  sstatic->add_option("--out", sstatic_params.out_path, "output sizes file")
      ->required();

  ScaleCompoundParams scompound_params;
  CLI::App* scompound =
      app.add_subcommand("scale-compound", "Uniform width multiplier");
  scompound->add_option("--graph", scompound_params.graph_path, "graph file")
      ->required();
  scompound->add_option("--sizes", scompound_params.sizes_path,
                        "baseline sizes file (default: graph declarations)");
  scompound->add_option("--multiplier", scompound_params.multiplier,
                        "width multiplier > 0")
      ->required();
  scompound->add_option("--out", scompound_params.out_path,
                        "output sizes file")
      ->required();

  CountParamsParams count_params;
  CLI::App* count =
      app.add_subcommand("count-params", "Trainable parameter count");
  count->add_option("--graph", count_params.graph_path, "graph file")
      ->required();
  count->add_option("--sizes", count_params.sizes_path,
                    "sizes file (default: graph declarations)");
  count->add_option("--uniform", count_params.uniform_width,
                    "uniform width overriding sizes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInputError;
  }

  try {
    if (probe->parsed()) {
      if (probe_params.out_dir.empty()) {
        probe_params.out_dir = default_output_root() + "/probe";
      }
      cmd_probe(probe_params);
      std::cout << "wrote " << probe_params.out_dir << "/metrics.csv and "
                << probe_params.out_dir << "/summary.csv\n";
    } else if (assign->parsed()) {
      cmd_assign(assign_params, std::cout);
    } else if (search->parsed()) {
      const SearchParams p = resolve_search_params(sf);
      cmd_search(p);
      std::cout << "wrote run directory " << p.out_dir << "\n";
    } else if (sstatic->parsed()) {
      cmd_scale_static(sstatic_params);
      std::cout << "wrote " << sstatic_params.out_path << "\n";
    } else if (scompound->parsed()) {
      cmd_scale_compound(scompound_params);
      std::cout << "wrote " << scompound_params.out_path << "\n";
    } else if (count->parsed()) {
      cmd_count_params(count_params, std::cout);
    }
    return kOk;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const GraphError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const ConstraintConflict& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const IncompatibilityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  } catch (const TrainerFailure& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return kRuntimeError;
  }
}
