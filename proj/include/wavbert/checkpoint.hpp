#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "wavbert/error.hpp"
#include "wavbert/nn.hpp"
#include "wavbert/objectives.hpp"

// Binary layout, all integers and floats little-endian:
//   "WBRT" | u32 version | u64 config digest | u64 census
//   u32 n_params  { u32 name_len | name | u32 rank | u32 extent * rank | f64 * numel }
//   u32 n_optim   { same record layout, names "adam.m/<param>" and "adam.v/<param>" }
//   u64 adam_step | u64 adam_skipped | u64 train_step

namespace wavbert {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct CheckpointData {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t digest = 0;
  std::uint64_t census = 0;
  std::vector<TensorRecord> params;
  std::vector<TensorRecord> optimizer;
  std::uint64_t adam_step = 0;
  std::uint64_t adam_skipped = 0;
  std::uint64_t train_step = 0;
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void record(const TensorRecord& r) {
    u32(static_cast<std::uint32_t>(r.name.size()));
    bytes(r.name);
    u32(static_cast<std::uint32_t>(r.shape.size()));
    for (std::size_t e : r.shape) u32(static_cast<std::uint32_t>(e));
    for (double v : r.values) f64(v);
  }
  const std::string& buffer() const { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& buf) : buf_(buf) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  TensorRecord record() {
    TensorRecord r;
    r.name = bytes(u32());
    const std::uint32_t rank = u32();
    if (rank > 8) throw IoError("checkpoint: implausible rank in record '" + r.name + "'");
    for (std::uint32_t i = 0; i < rank; ++i) r.shape.push_back(u32());
    const std::size_t n = shape_numel(r.shape);
    need(n * 8);
    r.values.resize(n);
    for (double& v : r.values) v = f64();
    return r;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw IoError("checkpoint: truncated file");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const CheckpointData& c) {
  detail::ByteWriter w;
  w.bytes("WBRT");
  w.u32(c.version);
  w.u64(c.digest);
  w.u64(c.census);
  w.u32(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& r : c.params) w.record(r);
  w.u32(static_cast<std::uint32_t>(c.optimizer.size()));
  for (const auto& r : c.optimizer) w.record(r);
  w.u64(c.adam_step);
  w.u64(c.adam_skipped);
  w.u64(c.train_step);
  return w.buffer();
}

inline CheckpointData decode_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(4) != "WBRT") throw IoError("checkpoint: bad magic");
  CheckpointData c;
  c.version = r.u32();
  if (c.version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(c.version));
  }
  c.digest = r.u64();
  c.census = r.u64();
  const std::uint32_t n_params = r.u32();
  std::uint64_t counted = 0;
  for (std::uint32_t i = 0; i < n_params; ++i) {
    c.params.push_back(r.record());
    counted += c.params.back().values.size();
  }
  if (counted != c.census) {
    throw IoError("checkpoint: header census " + std::to_string(c.census) + " != record total " +
                  std::to_string(counted));
  }
  const std::uint32_t n_optim = r.u32();
  for (std::uint32_t i = 0; i < n_optim; ++i) c.optimizer.push_back(r.record());
  c.adam_step = r.u64();
  c.adam_skipped = r.u64();
  c.train_step = r.u64();
  if (!r.done()) throw IoError("checkpoint: trailing bytes");
  return c;
}

inline CheckpointData snapshot(const ParameterList& params, const OptimizerState* opt,
                               std::uint64_t digest, std::uint64_t train_step) {
  CheckpointData c;
  c.digest = digest;
  c.train_step = train_step;
  for (const auto& p : params) {
    c.params.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
    c.census += p.tensor.numel();
  }
  if (opt) {
    c.adam_step = opt->step;
    c.adam_skipped = opt->skipped;
    if (opt->first_moment.size() == params.size()) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        c.optimizer.push_back({"adam.m/" + params[i].name, params[i].tensor.shape(), opt->first_moment[i]});
      }
      for (std::size_t i = 0; i < params.size(); ++i) {
        c.optimizer.push_back({"adam.v/" + params[i].name, params[i].tensor.shape(), opt->second_moment[i]});
      }
    }
  }
  return c;
}

// Validates names, shapes and census against `params` before writing any
// value, so a mismatched architecture leaves the model untouched.
inline void restore(const CheckpointData& c, const ParameterList& params, OptimizerState* opt,
                    std::uint64_t expected_digest, bool allow_digest_mismatch = false) {
  if (c.digest != expected_digest && !allow_digest_mismatch) {
    throw ConfigError("checkpoint: config digest mismatch (checkpoint " + std::to_string(c.digest) +
                      ", config " + std::to_string(expected_digest) + ")");
  }
  if (c.census != params.census()) {
    throw ConfigError("checkpoint: census " + std::to_string(c.census) + " does not match model census " +
                      std::to_string(params.census()));
  }
  if (c.params.size() != params.size()) {
    throw ConfigError("checkpoint: " + std::to_string(c.params.size()) + " parameter records, model has " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (c.params[i].name != params[i].name || c.params[i].shape != params[i].tensor.shape()) {
      throw ConfigError("checkpoint: record " + std::to_string(i) + " is '" + c.params[i].name + "' " +
                        shape_str(c.params[i].shape) + ", model expects '" + params[i].name + "' " +
                        shape_str(params[i].tensor.shape()));
    }
  }
  const bool has_optim = !c.optimizer.empty();
  if (has_optim) {
    if (c.optimizer.size() != 2 * params.size()) throw ConfigError("checkpoint: incomplete optimizer state");
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& m = c.optimizer[i];
      const auto& v = c.optimizer[params.size() + i];
      if (m.name != "adam.m/" + params[i].name || v.name != "adam.v/" + params[i].name ||
          m.shape != params[i].tensor.shape() || v.shape != params[i].tensor.shape()) {
        throw ConfigError("checkpoint: optimizer record mismatch for '" + params[i].name + "'");
      }
    }
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    std::copy(c.params[i].values.begin(), c.params[i].values.end(), t.mutable_data().begin());
  }
  if (opt) {
    opt->step = c.adam_step;
    opt->skipped = c.adam_skipped;
    opt->first_moment.clear();
    opt->second_moment.clear();
    if (has_optim) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        opt->first_moment.push_back(c.optimizer[i].values);
        opt->second_moment.push_back(c.optimizer[params.size() + i].values);
      }
    }
  }
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Write to a sibling temp file, then rename over the target.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointData& c) {
  write_file_atomic(path, encode_checkpoint(c));
}

inline CheckpointData load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace wavbert
