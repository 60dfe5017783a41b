#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "chanopt/assignment.hpp"
#include "chanopt/graph.hpp"
#include "chanopt/snapshot.hpp"
#include "chanopt/trial.hpp"

namespace chanopt {

// Synthetic classification data: one Gaussian cluster per class in image
// space. Entirely determined by (config, seed).
struct DatasetConfig {
  int image_size = 8;   // square images
  int channels = 3;     // must match the graph's source depth
  int num_classes = 16;
  int samples = 512;
  double noise_std = 0.1;  // per-pixel spread around the class mean
};

struct Dataset {
  int image_size = 0;
  int channels = 0;
  int num_classes = 0;
  int samples = 0;
  std::vector<double> images;  // samples x H x W x C, row-major, C fastest
  std::vector<int> labels;     // balanced round-robin
};

Dataset make_dataset(const DatasetConfig& config, std::uint64_t seed);

struct TrainerConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  // Strong decay keeps the unused directions of each weight matrix shrinking
  // while the learned ones are sustained by their gradients, which is what
  // makes the per-epoch rank estimates move visibly within a short trial.
  double weight_decay = 0.02;
  int batch_size = 16;
  std::uint64_t seed = 1;
  // Accumulate in float32 instead of double (weights are stored as double
  // either way; snapshots are float32 always).
  bool single_precision = false;
  DatasetConfig dataset;
  // Optional per-layer multipliers on the base learning rate, keyed by edge
  // id; absent layers (and the head) train at the base rate.
  std::map<std::string, double> layer_lr_scale;
};

// A micro convolutional network instantiated from (graph, widths): one weight
// tensor per conv/pointwise/depthwise edge, a rectifier after each of those,
// identity skips, 2x2 mean pools, summation/concatenation at nodes, global
// average pooling plus a linear classifier head. Spatial shapes are resolved
// statically at build time. Batchnorm flags affect parameter accounting only;
// this trainer runs without normalization. Kernels must be odd (same
// padding).
class ConvNetModel {
 public:
  ConvNetModel(const NetGraph& g, const ChannelAssignment& a,
               const ConcreteSizes& sizes, std::uint64_t init_seed);
  ~ConvNetModel();
  ConvNetModel(ConvNetModel&&) noexcept;
  ConvNetModel& operator=(ConvNetModel&&) noexcept;

  const NetGraph& graph() const;
  int input_channels() const;
  int num_classes() const;
  int epochs_trained() const;

  // Flat parameter access (layer weights and biases in sorted-edge order,
  // then head weights and bias); used by the optimizer and gradient tests.
  std::size_t num_parameters() const;
  double& parameter(std::size_t i);

  // Mean cross-entropy of the selected samples, forward only.
  double batch_loss(const Dataset& data, const std::vector<int>& indices) const;
  // Analytic gradient of batch_loss for every parameter, double precision.
  std::vector<double> batch_gradients(const Dataset& data,
                                      const std::vector<int>& indices) const;

  // Current weight tensor of one weight-bearing edge (unquantized).
  ConvTensor layer_tensor(const std::string& edge_id) const;
  std::vector<std::string> layer_ids() const;  // sorted weight-bearing edges

  friend SnapshotArchive train_epochs(ConvNetModel&, const TrainerConfig&,
                                      int, std::vector<double>*);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Allocates and seed-initializes a model. Same inputs give bit-identical
// initial weights. Throws IncompatibilityError when sizes do not validate
// against the graph and GraphError/TrainerFailure for untrainable graphs
// (no single source, no head, even kernels, inconsistent spatial shapes).
ConvNetModel build_model(const NetGraph& g, const ChannelAssignment& a,
                         const ConcreteSizes& sizes, std::uint64_t init_seed);

// Runs `epochs` epochs of minibatch SGD with momentum on the seeded synthetic
// dataset and returns one float32-quantized snapshot per epoch plus the loss
// curve. Deterministic bit-for-bit in (graph, sizes, config, seed); epochs
// may be split across calls without changing the trajectory. Throws
// TrainerFailure if the loss stops being finite. When `train_accuracy` is
// non-null one training-accuracy value per epoch is appended to it.
SnapshotArchive train_epochs(ConvNetModel& model, const TrainerConfig& config,
                             int epochs,
                             std::vector<double>* train_accuracy = nullptr);

// Rank/condition histories of every depth-changing edge in the archive.
// Throws IncompatibilityError when an edge's tensor is missing or its dims
// disagree with the graph.
TrialMetrics metrics_from_archive(const SnapshotArchive& archive,
                                  const NetGraph& g);

// Live-training implementation of the search loop's trainer port: each trial
// builds a fresh model at the requested widths (init seed derived from the
// config seed and the trial index), trains, probes.
class SgdTrialRunner : public TrialRunner {
 public:
  SgdTrialRunner(const NetGraph& g, const ChannelAssignment& a,
                 TrainerConfig config);
  // Optional hook invoked with each trial's snapshot archive and per-epoch
  // training accuracy (run directory persistence, tests).
  void set_archive_sink(
      std::function<void(int trial_index, const SnapshotArchive&,
                         const std::vector<double>& train_accuracy)>
          sink);

  TrialMetrics run_trial(const ConcreteSizes& sizes, int epochs,
                         int trial_index) override;

 private:
  const NetGraph& g_;
  const ChannelAssignment& a_;
  TrainerConfig config_;
  std::function<void(int, const SnapshotArchive&, const std::vector<double>&)>
      sink_;
};

// Replays a stored archive as if it were training: trial t serves epochs
// [t*epochs, (t+1)*epochs). Refuses (IncompatibilityError) when the requested
// widths disagree with the stored dims, and fails (TrainerFailure) when the
// archive runs out of epochs — replay supports metric-only workflows on a
// fixed architecture.
class ReplayTrialRunner : public TrialRunner {
 public:
  ReplayTrialRunner(SnapshotArchive archive, const NetGraph& g,
                    const ChannelAssignment& a);

  TrialMetrics run_trial(const ConcreteSizes& sizes, int epochs,
                         int trial_index) override;

 private:
  SnapshotArchive archive_;
  const NetGraph& g_;
  const ChannelAssignment& a_;
  int cursor_ = 0;
};

}  // namespace chanopt
