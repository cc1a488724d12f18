#include "mfil/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <map>

namespace mfil {

namespace {

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

  template <typename U>
  U get(const std::string& what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::string bytes(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }
  void need(std::size_t n, const std::string& what) const {
    if (remaining() < n) {
      throw CheckpointError("truncated checkpoint: " + what + " needs " + std::to_string(n) + " bytes, " +
                            std::to_string(remaining()) + " left");
    }
  }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::vector<std::uint8_t> out{'M', 'F', 'I', 'L'};
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xffff) throw CheckpointError("parameter name too long: " + e.name.substr(0, 32));
    if (e.value.rank() > 0xff) throw CheckpointError("rank too large for " + e.name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) put<std::uint64_t>(out, d);
    for (float f : e.value.data()) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.bytes(4, "magic") != "MFIL") throw CheckpointError("bad magic: not an MFIL checkpoint");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("entry count");
  std::vector<CheckpointEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "entry " + std::to_string(i);
    const auto len = r.get<std::uint16_t>(where + " name length");
    std::string name = r.bytes(len, where + " name");
    const std::string label = where + " '" + name + "'";
    const auto rank = r.get<std::uint8_t>(label + " rank");
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint8_t a = 0; a < rank; ++a) {
      const auto d = r.get<std::uint64_t>(label + " extent");
      if (d == 0) throw CheckpointError(label + " has a zero extent");
      if (d > r.remaining() / 4 / numel) {
        throw CheckpointError("truncated checkpoint: " + label + " declares more values than the file holds");
      }
      numel *= d;
      shape.push_back(static_cast<std::size_t>(d));
    }
    r.need(numel * 4, label + " values");
    std::vector<float> data(numel);
    for (auto& f : data) f = std::bit_cast<float>(r.get<std::uint32_t>(label + " values"));
    entries.push_back({std::move(name), Tensor<float>(std::move(shape), std::move(data))});
  }
  if (r.remaining() != 0) throw CheckpointError(std::to_string(r.remaining()) + " trailing bytes after last entry");
  return entries;
}

void save_checkpoint(const std::string& path, const ParamList<float>& params) {
  std::vector<CheckpointEntry> entries;
  for (const Param<float>* p : params) entries.push_back({p->name, p->value});
  const auto bytes = encode_checkpoint(entries);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open " + tmp + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("cannot move " + tmp + " to " + path);
}

std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void apply_checkpoint(const std::vector<CheckpointEntry>& entries, const ParamList<float>& params) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  std::string diff;
  for (const Param<float>* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) {
      diff += "\n  missing " + p->name + " " + shape_str(p->value.shape());
    } else if (it->second->value.shape() != p->value.shape()) {
      diff += "\n  " + p->name + ": checkpoint " + shape_str(it->second->value.shape()) + " vs model " +
              shape_str(p->value.shape());
    }
  }
  std::map<std::string, bool> known;
  for (const Param<float>* p : params) known[p->name] = true;
  for (const auto& e : entries) {
    if (!known.count(e.name)) diff += "\n  unexpected " + e.name + " " + shape_str(e.value.shape());
  }
  if (!diff.empty()) throw CheckpointError("checkpoint does not match model:" + diff);
  for (Param<float>* p : params) p->value = by_name.at(p->name)->value;
}

}  // namespace mfil
