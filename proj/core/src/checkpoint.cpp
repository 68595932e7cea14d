#include "abnn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "abnn/errors.hpp"

namespace abnn {
namespace {

constexpr char kMagic[8] = {'A', 'B', 'N', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kMaxNameLen = 1u << 16;
constexpr std::uint32_t kMaxNdim = 8;
constexpr std::uint32_t kMaxEntries = 1u << 20;
constexpr std::uint64_t kMaxDim = 1ull << 32;

void append_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void append_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void append_f64(std::string& out, double v) {
  append_u64(out, std::bit_cast<std::uint64_t>(v));
}

/// Bounds-checked little-endian reader over the whole file.
class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> buf) : buf_(std::move(buf)) {}

  void need(std::size_t n) const {
    if (pos_ + n > buf_.size())
      throw TruncationError("load_checkpoint: expected at least " + std::to_string(pos_ + n) +
                            " bytes, file has " + std::to_string(buf_.size()));
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }

  double f64() { return std::bit_cast<double>(u64()); }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
};

std::string shape_string(const std::vector<std::size_t>& shape) {
  if (shape.empty()) return "scalar";
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  if (ckpt.model_id.size() >= kMaxNameLen)
    throw ContractError("save_checkpoint: model identifier too long");
  if (ckpt.entries.size() >= kMaxEntries)
    throw ContractError("save_checkpoint: too many tensors");
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  append_u32(out, kCheckpointVersion);
  append_u32(out, static_cast<std::uint32_t>(ckpt.model_id.size()));
  out += ckpt.model_id;
  append_u32(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const CheckpointEntry& e : ckpt.entries) {
    if (e.name.size() >= kMaxNameLen)
      throw ContractError("save_checkpoint: tensor name too long: " + e.name);
    if (e.shape.size() > kMaxNdim)
      throw ContractError("save_checkpoint: too many dimensions for " + e.name);
    std::size_t count = 1;
    for (std::size_t d : e.shape) count *= d;
    if (count != e.values.size())
      throw ShapeError("save_checkpoint: " + e.name + " declares " + std::to_string(count) +
                       " values but holds " + std::to_string(e.values.size()));
    append_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    append_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) append_u64(out, static_cast<std::uint64_t>(d));
  }
  for (const CheckpointEntry& e : ckpt.entries)
    for (double v : e.values) append_f64(out, v);

  std::ofstream file(path, std::ios::binary);
  if (!file) throw DataError("save_checkpoint: cannot open " + path);
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw DataError("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw DataError("load_checkpoint: cannot open " + path);
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(file)),
                                 std::istreambuf_iterator<char>());
  ByteReader in(std::move(raw));

  const std::string magic = in.bytes(sizeof(kMagic));
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0)
    throw VersionError("load_checkpoint: not a checkpoint file (bad magic)");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion)
    throw VersionError("load_checkpoint: format version " + std::to_string(version) +
                       " is not supported (expected " + std::to_string(kCheckpointVersion) +
                       ")");

  Checkpoint ckpt;
  const std::uint32_t id_len = in.u32();
  if (id_len >= kMaxNameLen)
    throw FormatError("load_checkpoint: implausible model identifier length " +
                      std::to_string(id_len));
  ckpt.model_id = in.bytes(id_len);

  const std::uint32_t count = in.u32();
  if (count >= kMaxEntries)
    throw FormatError("load_checkpoint: implausible tensor count " + std::to_string(count));
  ckpt.entries.resize(count);
  std::vector<std::size_t> counts(count);
  std::size_t total = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry& e = ckpt.entries[i];
    const std::uint32_t name_len = in.u32();
    if (name_len >= kMaxNameLen)
      throw FormatError("load_checkpoint: implausible tensor name length " +
                        std::to_string(name_len));
    e.name = in.bytes(name_len);
    const std::uint32_t ndim = in.u32();
    if (ndim > kMaxNdim)
      throw FormatError("load_checkpoint: implausible rank " + std::to_string(ndim) +
                        " for tensor " + e.name);
    e.shape.resize(ndim);
    std::size_t elems = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const std::uint64_t dim = in.u64();
      if (dim == 0 || dim >= kMaxDim)
        throw FormatError("load_checkpoint: implausible dimension " + std::to_string(dim) +
                          " for tensor " + e.name);
      if (elems > std::numeric_limits<std::size_t>::max() / dim)
        throw FormatError("load_checkpoint: tensor " + e.name + " overflows the size type");
      e.shape[d] = static_cast<std::size_t>(dim);
      elems *= static_cast<std::size_t>(dim);
    }
    counts[i] = elems;
    if (total > std::numeric_limits<std::size_t>::max() / 8 - elems)
      throw FormatError("load_checkpoint: declared payload overflows the size type");
    total += elems;
  }
  // Validate the full payload length before allocating value storage, so a
  // corrupted shape table cannot request an enormous buffer.
  in.need(8 * total);
  for (std::uint32_t i = 0; i < count; ++i) {
    ckpt.entries[i].values.resize(counts[i]);
    for (double& v : ckpt.entries[i].values) v = in.f64();
  }
  return ckpt;
}

Checkpoint checkpoint_from_params(const std::string& model_id,
                                  const std::vector<std::string>& names,
                                  const std::vector<Tensor>& params) {
  if (names.size() != params.size())
    throw ContractError("checkpoint_from_params: need one name per tensor");
  Checkpoint ckpt;
  ckpt.model_id = model_id;
  ckpt.entries.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    ckpt.entries.push_back({names[i], params[i].shape(), params[i].value()});
  return ckpt;
}

void restore_params(const Checkpoint& ckpt, const std::vector<std::string>& names,
                    std::vector<Tensor>& params) {
  if (names.size() != params.size())
    throw ContractError("restore_params: need one name per tensor");
  if (ckpt.entries.size() != params.size())
    throw ShapeError("restore_params: checkpoint holds " + std::to_string(ckpt.entries.size()) +
                     " tensors but the model has " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const CheckpointEntry& e = ckpt.entries[i];
    if (e.name != names[i])
      throw ContractError("restore_params: entry " + std::to_string(i) + " is '" + e.name +
                          "' but the model expects '" + names[i] + "'");
    if (e.shape != params[i].shape())
      throw ShapeError("restore_params: shape mismatch for tensor '" + e.name +
                       "': checkpoint " + shape_string(e.shape) + ", model " +
                       shape_string(params[i].shape()));
    params[i].mutable_value() = e.values;
  }
}

std::string describe_checkpoint(const Checkpoint& ckpt) {
  std::ostringstream out;
  out << "model: " << (ckpt.model_id.empty() ? "(unnamed)" : ckpt.model_id) << "\n";
  out << "tensors: " << ckpt.entries.size() << "\n";
  std::size_t total = 0;
  for (const CheckpointEntry& e : ckpt.entries) {
    total += e.values.size();
    double lo = 0.0, hi = 0.0;
    if (!e.values.empty()) {
      lo = hi = e.values.front();
      for (double v : e.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    out << "  " << e.name << "  [" << shape_string(e.shape) << "]  "
        << e.values.size() << " values in [" << lo << ", " << hi << "]\n";
  }
  out << "total parameters: " << total << "\n";
  return out.str();
}

}  // namespace abnn
