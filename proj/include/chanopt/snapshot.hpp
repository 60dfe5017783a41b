#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "chanopt/tensor.hpp"

namespace chanopt {

// Per-epoch weight snapshots of one training run.
//
// File format ("chanopt-snapshot v1"): a one-line ASCII header recording the
// axis order and payload encoding, followed by little-endian binary sections:
//   u32 epoch_count, u32 layer_count,
//   per layer: u16 name length, name bytes, u32 dims[4],
//   f64 training loss per epoch,
//   per epoch, per layer: float32 payload (row-major, axis 4 fastest).
//
// Snapshot values are quantized to float32 at capture time, so the archive
// round-trips bit-exactly and metrics computed before and after a
// write/reload cycle agree exactly.
struct SnapshotArchive {
  std::vector<std::string> layer_names;  // manifest, fixed order
  std::map<std::string, std::array<int, 4>> layer_dims;
  std::vector<double> train_loss;        // one entry per epoch
  std::vector<std::map<std::string, ConvTensor>> epochs;

  int epoch_count() const { return static_cast<int>(epochs.size()); }
  // Throws IncompatibilityError if a layer is missing or dims mismatch.
  const ConvTensor& tensor(int epoch, const std::string& layer) const;
};

// Rounds every entry through float32. Applied at snapshot capture so the
// in-memory archive equals its on-disk representation exactly.
ConvTensor quantize_to_f32(const ConvTensor& t);

void write_snapshot_archive(const SnapshotArchive& a, const std::string& path);

// Throws FormatError (with byte offset) on truncated or malformed files.
SnapshotArchive read_snapshot_archive(const std::string& path);

}  // namespace chanopt
