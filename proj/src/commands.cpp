#include "chanopt/commands.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "chanopt/errors.hpp"
#include "chanopt/format.hpp"
#include "chanopt/metrics.hpp"
#include "chanopt/scaling.hpp"
#include "chanopt/snapshot.hpp"

namespace chanopt {

namespace {

using nlohmann::json;

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot open '" + path + "' for writing");
  }
  out << content;
  if (!out) {
    throw std::runtime_error("failed writing '" + path + "'");
  }
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("cannot open '" + path + "'");
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw std::runtime_error("cannot create directory '" + dir +
                             "': " + ec.message());
  }
}

// Widths for the scale/count commands: explicit file wins, then the graph's
// baseline declarations.
ConcreteSizes resolve_sizes(const NetGraph& g, const ChannelAssignment& a,
                            const std::string& sizes_path) {
  if (!sizes_path.empty()) return read_sizes_file(sizes_path);
  return baseline_sizes(g, a);
}

void require_valid(const NetGraph& g, const ChannelAssignment& a,
                   const ConcreteSizes& sizes, const std::string& what) {
  const auto issues = validate_assignment(g, a, sizes);
  if (!issues.empty()) {
    throw IncompatibilityError(what + ": widths do not validate: '" +
                               issues.front().subject + "': " +
                               issues.front().message);
  }
}

}  // namespace

std::string default_output_root() {
  if (const char* env = std::getenv("CHANOPT_OUTPUT_ROOT")) {
    if (*env != '\0') return env;
  }
  return "runs";
}

void cmd_probe(const ProbeParams& p) {
  const NetGraph g = load_graph_file(p.graph_path);
  const SnapshotArchive archive = read_snapshot_archive(p.archive_path);
  if (archive.epoch_count() == 0) {
    throw FormatError("probe: archive '" + p.archive_path + "' has no epochs");
  }
  const TrialMetrics metrics = metrics_from_archive(archive, g);
  ensure_dir(p.out_dir);

  std::ostringstream csv;
  csv << metrics_csv_header() << "\n";
  for (int epoch = 0; epoch < archive.epoch_count(); ++epoch) {
    for (const auto& [eid, history] : metrics.per_edge) {
      csv << metrics_csv_row(0, epoch, eid, history.epochs[epoch]) << "\n";
    }
  }
  write_text_file(p.out_dir + "/metrics.csv", csv.str());

  std::ostringstream summary;
  summary << "layer_name,max_rank_out,rank_slope,plateau_epoch\n";
  for (const auto& [eid, history] : metrics.per_edge) {
    double max_rank_out = 0.0;
    for (const auto& m : history.epochs) {
      max_rank_out = std::max(max_rank_out, m.rank_out);
    }
    const int plateau = plateau_epoch(history);
    const double slope =
        history.epochs.size() < 2 ? 0.0 : rank_slope(history, 0, plateau);
    summary << eid << ',' << format_g9(max_rank_out) << ','
            << format_g9(slope) << ',' << plateau << "\n";
  }
  write_text_file(p.out_dir + "/summary.csv", summary.str());
}

void cmd_assign(const AssignParams& p, std::ostream& out) {
  const NetGraph g = load_graph_file(p.graph_path);
  const ChannelAssignment a = assign_channels(g);
  out << "variables: " << a.variables.size();
  for (const auto& v : a.variables) out << ' ' << v;
  out << "\n";
  for (const auto& [node_id, expr] : a.node_depth) {
    out << "node " << node_id << " = " << expr.to_string() << "\n";
  }
  for (const auto& [eid, expr] : a.edge_out) {
    out << "edge " << eid << " -> " << expr.to_string() << "\n";
  }
  for (const auto& [v, edges] : layer_groups(g, a)) {
    out << "group " << v << ":";
    for (const auto& eid : edges) out << ' ' << eid;
    out << "\n";
  }
}

std::string search_params_to_json(const SearchParams& p) {
  json j;
  j["command"] = "search";
  j["graph"] = p.graph_path;
  json s;
  s["delta"] = p.search.delta;
  s["mu"] = p.search.mu;
  s["gamma"] = p.search.gamma;
  s["phi_init"] = p.search.phi_init;
  s["epochs_per_trial"] = p.search.epochs_per_trial;
  s["max_trials"] = p.search.max_trials;
  s["min_channels"] = p.search.min_channels;
  s["max_channels"] = p.search.max_channels;
  s["initial_channel_size"] = p.search.initial_channel_size;
  s["plateau_window"] = p.search.plateau_window;
  s["plateau_epsilon"] = p.search.plateau_epsilon;
  if (p.search.max_params) {
    s["max_params"] = *p.search.max_params;
  } else {
    s["max_params"] = nullptr;
  }
  j["search"] = s;
  json t;
  t["learning_rate"] = p.trainer.learning_rate;
  t["momentum"] = p.trainer.momentum;
  t["weight_decay"] = p.trainer.weight_decay;
  t["batch_size"] = p.trainer.batch_size;
  t["seed"] = p.trainer.seed;
  t["single_precision"] = p.trainer.single_precision;
  json d;
  d["image_size"] = p.trainer.dataset.image_size;
  d["channels"] = p.trainer.dataset.channels;
  d["num_classes"] = p.trainer.dataset.num_classes;
  d["samples"] = p.trainer.dataset.samples;
  d["noise_std"] = p.trainer.dataset.noise_std;
  t["dataset"] = d;
  t["layer_lr_scale"] = json::object();
  for (const auto& [layer, scale] : p.trainer.layer_lr_scale) {
    t["layer_lr_scale"][layer] = scale;
  }
  j["trainer"] = t;
  return j.dump(2) + "\n";
}

SearchParams search_params_from_json_file(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw FormatError("config '" + path + "': " + e.what());
  }
  SearchParams p;
  try {
    p.graph_path = j.at("graph").get<std::string>();
    const json& s = j.at("search");
    p.search.delta = s.at("delta").get<double>();
    p.search.mu = s.at("mu").get<double>();
    p.search.gamma = s.at("gamma").get<double>();
    p.search.phi_init = s.at("phi_init").get<double>();
    p.search.epochs_per_trial = s.at("epochs_per_trial").get<int>();
    p.search.max_trials = s.at("max_trials").get<int>();
    p.search.min_channels = s.at("min_channels").get<int>();
    p.search.max_channels = s.at("max_channels").get<int>();
    p.search.initial_channel_size = s.at("initial_channel_size").get<int>();
    p.search.plateau_window = s.at("plateau_window").get<int>();
    p.search.plateau_epsilon = s.at("plateau_epsilon").get<double>();
    if (!s.at("max_params").is_null()) {
      p.search.max_params = s.at("max_params").get<long long>();
    }
    const json& t = j.at("trainer");
    p.trainer.learning_rate = t.at("learning_rate").get<double>();
    p.trainer.momentum = t.at("momentum").get<double>();
    p.trainer.weight_decay = t.at("weight_decay").get<double>();
    p.trainer.batch_size = t.at("batch_size").get<int>();
    p.trainer.seed = t.at("seed").get<std::uint64_t>();
    p.trainer.single_precision = t.at("single_precision").get<bool>();
    const json& d = t.at("dataset");
    p.trainer.dataset.image_size = d.at("image_size").get<int>();
    p.trainer.dataset.channels = d.at("channels").get<int>();
    p.trainer.dataset.num_classes = d.at("num_classes").get<int>();
    p.trainer.dataset.samples = d.at("samples").get<int>();
    p.trainer.dataset.noise_std = d.at("noise_std").get<double>();
    for (const auto& [layer, scale] : t.at("layer_lr_scale").items()) {
      p.trainer.layer_lr_scale[layer] = scale.get<double>();
    }
  } catch (const json::exception& e) {
    throw FormatError("config '" + path + "': " + e.what());
  }
  return p;
}

void cmd_search(const SearchParams& p) {
  p.search.validate();
  const NetGraph g = load_graph_file(p.graph_path);
  const ChannelAssignment a = assign_channels(g);
  ensure_dir(p.out_dir);
  write_text_file(p.out_dir + "/config.json", search_params_to_json(p));

  SgdTrialRunner runner(g, a, p.trainer);
  std::ostringstream train_log;
  train_log << "trial,epoch,loss,accuracy\n";
  runner.set_archive_sink([&](int trial, const SnapshotArchive& archive,
                              const std::vector<double>& accuracy) {
    for (std::size_t e = 0; e < archive.train_loss.size(); ++e) {
      train_log << trial << ',' << e << ','
                << format_g9(archive.train_loss[e]) << ','
                << format_g9(e < accuracy.size() ? accuracy[e] : 0.0) << "\n";
    }
  });

  const SearchResult result = channel_search(g, a, runner, p.search);

  std::ostringstream metrics;
  metrics << metrics_csv_header() << "\n";
  for (const TrialRecord& rec : result.trials) {
    const int epochs = rec.metrics.per_edge.empty()
                           ? 0
                           : static_cast<int>(
                                 rec.metrics.per_edge.begin()->second.epochs
                                     .size());
    for (int epoch = 0; epoch < epochs; ++epoch) {
      for (const auto& [eid, history] : rec.metrics.per_edge) {
        metrics << metrics_csv_row(rec.trial, epoch, eid,
                                   history.epochs[epoch])
                << "\n";
      }
    }
  }
  write_text_file(p.out_dir + "/metrics.csv", metrics.str());
  write_text_file(p.out_dir + "/train_log.csv", train_log.str());

  std::ostringstream search_log;
  search_log << "trial,variable,old_size,new_size,slope,cond_avg,action,phi,"
                "frozen,budget_limited\n";
  for (const TrialRecord& rec : result.trials) {
    for (const VariableDecision& d : rec.decisions) {
      search_log << rec.trial << ',' << d.variable << ',' << d.old_size << ','
                 << d.new_size << ',' << format_g9(d.slope) << ','
                 << format_g9(d.cond_avg) << ',' << d.action << ','
                 << format_g9(d.phi) << ',' << (d.frozen ? 1 : 0) << ','
                 << (d.budget_limited ? 1 : 0) << "\n";
    }
  }
  write_text_file(p.out_dir + "/search_log.csv", search_log.str());

  std::ostringstream history;
  for (const TrialRecord& rec : result.trials) {
    history << "# trial " << rec.trial << "\n";
    for (const auto& [v, size] : rec.sizes_before) {
      history << v << ' ' << size << "\n";
    }
    history << "\n";
  }
  write_text_file(p.out_dir + "/sizes_history.txt", history.str());
  write_sizes_file(result.final_sizes, p.out_dir + "/final_sizes.txt");
}

namespace {

// A probe summary.csv: header, then "layer,max_rank_out,..." rows. Only the
// first two columns are consumed.
std::map<std::string, double> read_ranks_csv(const std::string& path) {
  const std::string text = read_text_file(path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) ||
      line.rfind("layer_name,max_rank_out", 0) != 0) {
    throw FormatError("ranks csv '" + path +
                      "': expected a header starting with "
                      "'layer_name,max_rank_out'");
  }
  std::map<std::string, double> ranks;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    if (c1 == std::string::npos) {
      throw FormatError("ranks csv '" + path + "' line " +
                        std::to_string(line_no) + ": missing columns");
    }
    auto c2 = line.find(',', c1 + 1);
    if (c2 == std::string::npos) c2 = line.size();
    const std::string name = line.substr(0, c1);
    const std::string value = line.substr(c1 + 1, c2 - c1 - 1);
    try {
      std::size_t used = 0;
      const double r = std::stod(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
      if (!ranks.emplace(name, r).second) {
        throw FormatError("ranks csv '" + path + "' line " +
                          std::to_string(line_no) + ": duplicate layer '" +
                          name + "'");
      }
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception&) {
      throw FormatError("ranks csv '" + path + "' line " +
                        std::to_string(line_no) + ": bad rank value '" +
                        value + "'");
    }
  }
  return ranks;
}

}  // namespace

void cmd_scale_static(const ScaleStaticParams& p) {
  const NetGraph g = load_graph_file(p.graph_path);
  const ChannelAssignment a = assign_channels(g);
  const ConcreteSizes baseline = resolve_sizes(g, a, p.baseline_sizes_path);
  require_valid(g, a, baseline, "scale-static");
  const auto ranks = read_ranks_csv(p.ranks_csv_path);
  const ConcreteSizes scaled =
      static_scale_network(g, a, baseline, ranks, p.scale_fraction);
  write_sizes_file(scaled, p.out_path);
}

void cmd_scale_compound(const ScaleCompoundParams& p) {
  const NetGraph g = load_graph_file(p.graph_path);
  const ChannelAssignment a = assign_channels(g);
  const ConcreteSizes baseline = resolve_sizes(g, a, p.sizes_path);
  require_valid(g, a, baseline, "scale-compound");
  write_sizes_file(compound_scale(baseline, p.multiplier), p.out_path);
}

void cmd_count_params(const CountParamsParams& p, std::ostream& out) {
  const NetGraph g = load_graph_file(p.graph_path);
  const ChannelAssignment a = assign_channels(g);
  const ConcreteSizes sizes = p.uniform_width > 0
                                  ? uniform_sizes(a, p.uniform_width)
                                  : resolve_sizes(g, a, p.sizes_path);
  require_valid(g, a, sizes, "count-params");

  // Per-edge parameter cost, grouped by the owning channel variable.
  const auto groups = layer_groups(g, a);
  std::map<std::string, long long> edge_params;
  long long head_params = 0;
  for (const auto& eid : g.edge_ids()) {
    const GraphEdge& e = g.edge(eid);
    if (!is_weight_bearing(e.kind)) continue;
    const long long c_in = evaluate_depth(a.node_depth.at(e.tail), sizes);
    long long c_out, kernel;
    if (e.kind == EdgeKind::kDepthwise) {
      c_out = c_in;
      kernel = static_cast<long long>(e.kh) * e.kw * c_in;
    } else {
      c_out = evaluate_depth(a.edge_out.at(eid), sizes);
      kernel = static_cast<long long>(e.kh) * e.kw * c_in * c_out;
    }
    long long total = kernel;
    if (e.has_bias) total += c_out;
    if (e.has_batchnorm) total += 2 * c_out;
    edge_params[eid] = total;
  }
  if (g.has_head()) {
    const long long c_last = evaluate_depth(a.node_depth.at(g.head_node()), sizes);
    head_params = c_last * g.num_classes() + g.num_classes();
  }

  out << "total " << param_count(g, a, sizes) << "\n";
  std::map<std::string, bool> grouped;
  for (const auto& [v, edges] : groups) {
    long long sum = 0;
    for (const auto& eid : edges) {
      auto it = edge_params.find(eid);
      if (it != edge_params.end()) {
        sum += it->second;
        grouped[eid] = true;
      }
    }
    out << "group " << v << " size " << sizes.at(v) << " params " << sum
        << "\n";
  }
  long long ungrouped = 0;
  for (const auto& [eid, count] : edge_params) {
    if (!grouped.count(eid)) ungrouped += count;
  }
  out << "ungrouped " << ungrouped << "\n";
  out << "head " << head_params << "\n";
}

}  // namespace chanopt
