#include "msfcn/param_store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <type_traits>
#include <variant>

#include "msfcn/checkpoint.hpp"

namespace msfcn {

Shape shape_for_dims(const std::vector<int>& dims) {
  if (dims.empty() || dims.size() > 4) {
    throw_invalid("parameter rank must be 1..4, got " + std::to_string(dims.size()));
  }
  int d[4] = {1, 1, 1, 1};
  for (std::size_t i = 0; i < dims.size(); ++i) d[i] = dims[i];
  return Shape{d[0], d[1], d[2], d[3]};
}

template <typename T>
Param<T>& ParamStore<T>::add(const std::string& name, std::vector<int> dims, ParamRole role) {
  if (name.empty()) throw_invalid("parameter name must not be empty");
  if (contains(name)) throw_invalid("duplicate parameter name '" + name + "'");
  auto p = std::make_unique<Param<T>>();
  p->name = name;
  p->value = Tensor<T>(shape_for_dims(dims));
  p->dims = std::move(dims);
  p->role = role;
  index_.emplace(name, entries_.size());
  entries_.push_back(std::move(p));
  return *entries_.back();
}

template <typename T>
Param<T>& ParamStore<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw_invalid("unknown parameter '" + name + "'");
  return *entries_[it->second];
}

template <typename T>
const Param<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw_invalid("unknown parameter '" + name + "'");
  return *entries_[it->second];
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : entries_) {
    if (p->trainable()) p->value.zero_grad();
  }
}

template <typename T>
std::size_t ParamStore<T>::trainable_scalars() const {
  std::size_t total = 0;
  for (const auto& p : entries_) {
    if (p->trainable()) total += p->value.size();
  }
  return total;
}

template class ParamStore<float>;
template class ParamStore<double>;

// ---------------------------------------------------------------------------
// Checkpoint encoding

static_assert(std::numeric_limits<float>::is_iec559 && std::numeric_limits<double>::is_iec559);

namespace {

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}

  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }

 private:
  std::vector<std::uint8_t>& out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  std::size_t pos() const noexcept { return pos_; }
  bool done() const noexcept { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) {
      throw Error(ErrorKind::kParse, "checkpoint truncated at byte offset " + std::to_string(pos_));
    }
  }
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::size_t CheckpointEntry::numel() const noexcept {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::vector<std::uint8_t> out;
  Writer w(out);
  w.bytes("MSFC", 4);
  w.uint<std::uint32_t>(kCheckpointVersion);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xFFFF) throw_invalid("checkpoint entry name too long: " + e.name);
    if (e.dims.size() > 0xFF) throw_invalid("checkpoint entry rank too large: " + e.name);
    w.uint<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.uint<std::uint8_t>(e.dtype());
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) w.uint<std::uint32_t>(d);
    std::visit(
        [&](const auto& values) {
          if (values.size() != e.numel()) {
            throw_invalid("checkpoint entry '" + e.name + "' has " + std::to_string(values.size()) +
                          " values for " + std::to_string(e.numel()) + " elements");
          }
          for (auto v : values) {
            if constexpr (std::is_same_v<std::decay_t<decltype(v)>, float>) {
              w.f32(v);
            } else {
              w.f64(v);
            }
          }
        },
        e.values);
  }
  return out;
}

std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(4) != "MSFC") throw Error(ErrorKind::kParse, "checkpoint magic mismatch at byte offset 0");
  const auto version = r.uint<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::kParse, "unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.uint<std::uint32_t>();
  std::vector<CheckpointEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto name_len = r.uint<std::uint16_t>();
    e.name = r.str(name_len);
    const std::size_t dtype_at = r.pos();
    const auto dtype = r.uint<std::uint8_t>();
    const auto rank = r.uint<std::uint8_t>();
    for (int d = 0; d < rank; ++d) e.dims.push_back(r.uint<std::uint32_t>());
    const std::size_t n = e.numel();
    if (dtype == 0) {
      std::vector<float> v(n);
      for (auto& x : v) x = r.f32();
      e.values = std::move(v);
    } else if (dtype == 1) {
      std::vector<double> v(n);
      for (auto& x : v) x = r.f64();
      e.values = std::move(v);
    } else {
      throw Error(ErrorKind::kParse, "unknown dtype " + std::to_string(dtype) + " at byte offset " +
                                         std::to_string(dtype_at));
    }
    entries.push_back(std::move(e));
  }
  if (!r.done()) {
    throw Error(ErrorKind::kParse, "trailing bytes after checkpoint at byte offset " + std::to_string(r.pos()));
  }
  return entries;
}

void write_checkpoint_file(const std::filesystem::path& path,
                           const std::vector<CheckpointEntry>& entries) {
  const auto bytes = encode_checkpoint(entries);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot open checkpoint for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::kIo, "failed writing checkpoint: " + path.string());
}

std::vector<CheckpointEntry> read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open checkpoint: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template <typename T>
std::vector<CheckpointEntry> to_checkpoint(const ParamStore<T>& store) {
  std::vector<CheckpointEntry> entries;
  entries.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Param<T>& p = store.at(i);
    CheckpointEntry e;
    e.name = p.name;
    for (int d : p.dims) e.dims.push_back(static_cast<std::uint32_t>(d));
    e.values = std::vector<T>(p.value.values().begin(), p.value.values().end());
    entries.push_back(std::move(e));
  }
  return entries;
}

template <typename T>
void load_into(const std::vector<CheckpointEntry>& entries, ParamStore<T>& store) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) {
    if (!by_name.emplace(e.name, &e).second) {
      throw Error(ErrorKind::kConfig, "checkpoint contains duplicate entry '" + e.name + "'");
    }
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    Param<T>& p = store.at(i);
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      throw Error(ErrorKind::kConfig, "checkpoint is missing parameter '" + p.name + "'");
    }
    const CheckpointEntry& e = *it->second;
    std::vector<std::uint32_t> want(p.dims.begin(), p.dims.end());
    if (e.dims != want) {
      throw Error(ErrorKind::kConfig, "checkpoint parameter '" + p.name + "' has mismatched dims");
    }
    std::visit(
        [&](const auto& values) {
          auto dst = p.value.values();
          for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(values[k]);
        },
        e.values);
    by_name.erase(it);
  }
  if (!by_name.empty()) {
    throw Error(ErrorKind::kConfig,
                "checkpoint has parameter '" + by_name.begin()->first + "' unknown to the model");
  }
}

template std::vector<CheckpointEntry> to_checkpoint<float>(const ParamStore<float>&);
template std::vector<CheckpointEntry> to_checkpoint<double>(const ParamStore<double>&);
template void load_into<float>(const std::vector<CheckpointEntry>&, ParamStore<float>&);
template void load_into<double>(const std::vector<CheckpointEntry>&, ParamStore<double>&);

}  // namespace msfcn
