#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "abnn/tensor.hpp"

namespace abnn {

/// One named tensor inside a checkpoint.
struct CheckpointEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

/// In-memory checkpoint: a model identifier plus named tensors in a fixed
/// order. The on-disk format is binary: an 8-byte magic ("ABNNCKPT"), a
/// little-endian format version, the model identifier, a shape table (entry
/// names and dimensions), then every tensor's values as little-endian 64-bit
/// floats, concatenated in entry order. Values round-trip bit-exactly.
struct Checkpoint {
  std::string model_id;
  std::vector<CheckpointEntry> entries;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Serialization. Unknown magic or version raises VersionError; implausible
/// shape-table fields raise FormatError; short files raise TruncationError
/// with expected vs actual byte counts.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Snapshot of live parameter tensors under the given names.
Checkpoint checkpoint_from_params(const std::string& model_id,
                                  const std::vector<std::string>& names,
                                  const std::vector<Tensor>& params);

/// Writes checkpoint values back into live tensors. Mismatched tensor counts
/// or shapes raise ShapeError naming the offending tensor; mismatched entry
/// names raise ContractError.
void restore_params(const Checkpoint& ckpt, const std::vector<std::string>& names,
                    std::vector<Tensor>& params);

/// One line per tensor (name, shape, value summary) plus a header; the
/// `inspect-checkpoint` command prints this.
std::string describe_checkpoint(const Checkpoint& ckpt);

}  // namespace abnn
