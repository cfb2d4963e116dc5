#include "aver/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "aver/errors.hpp"

namespace aver {

namespace {

constexpr char kMagic[4] = {'A', 'V', 'E', 'R'};
constexpr std::uint32_t kDtypeF32 = 0;

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

// Sequential reader with bounds checking; every short read is corruption.
class Cursor {
 public:
  Cursor(const std::string& bytes, const std::string& origin)
      : bytes_(bytes), origin_(origin) {}

  std::uint32_t u32() {
    need(4);
    const std::uint32_t v =
        static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[at_])) |
        (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[at_ + 1])) << 8) |
        (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[at_ + 2])) << 16) |
        (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[at_ + 3])) << 24);
    at_ += 4;
    return v;
  }

  float f32() {
    const std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(at_, n);
    at_ += n;
    return s;
  }

  bool exhausted() const { return at_ == bytes_.size(); }

 private:
  void need(std::size_t n) {
    if (at_ + n > bytes_.size()) {
      fail_io("checkpoint ", origin_, " is truncated at byte ", at_);
    }
  }

  const std::string& bytes_;
  std::string origin_;
  std::size_t at_ = 0;
};

}  // namespace

void Checkpoint::add(const std::string& name, Tensor t) {
  require(!name.empty(), "checkpoint: empty tensor name");
  require(!has(name), "checkpoint: duplicate tensor name '", name, "'");
  entries_.emplace_back(name, std::move(t));
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return true;
  }
  return false;
}

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  fail("checkpoint: no tensor named '", name, "'");
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(ckpt.size()));
  for (const auto& [name, tensor] : ckpt.entries()) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
    for (int d = 0; d < tensor.rank(); ++d) {
      put_u32(out, static_cast<std::uint32_t>(tensor.dim(d)));
    }
    put_u32(out, kDtypeF32);
    for (float v : tensor.data()) put_f32(out, v);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail_io("save_checkpoint: cannot open ", path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) fail_io("save_checkpoint: short write to ", path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail_io("load_checkpoint: cannot open ", path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Cursor cur(bytes, path.string());
  if (cur.str(4) != std::string(kMagic, 4)) {
    fail_io("load_checkpoint: ", path.string(), " has a bad magic header");
  }
  const std::uint32_t version = cur.u32();
  if (version != kCheckpointVersion) {
    fail_io("load_checkpoint: ", path.string(), " has version ", version, ", expected ",
            kCheckpointVersion);
  }
  const std::uint32_t count = cur.u32();
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = cur.u32();
    const std::string name = cur.str(name_len);
    const std::uint32_t rank = cur.u32();
    if (rank > 8) fail_io("load_checkpoint: tensor '", name, "' has absurd rank ", rank);
    std::vector<int> shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = cur.u32();
      if (dim == 0) fail_io("load_checkpoint: tensor '", name, "' has a zero dim");
      shape[d] = static_cast<int>(dim);
      numel *= dim;
    }
    const std::uint32_t dtype = cur.u32();
    if (dtype != kDtypeF32) {
      fail_io("load_checkpoint: tensor '", name, "' has unsupported dtype tag ", dtype);
    }
    std::vector<float> data(numel);
    for (std::size_t j = 0; j < numel; ++j) data[j] = cur.f32();
    if (ckpt.has(name)) fail_io("load_checkpoint: duplicate tensor '", name, "'");
    ckpt.add(name, Tensor(std::move(shape), std::move(data)));
  }
  if (!cur.exhausted()) {
    fail_io("load_checkpoint: ", path.string(), " has trailing bytes after the last tensor");
  }
  return ckpt;
}

}  // namespace aver
