#include "fewshot/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "fewshot/errors.hpp"
#include "fewshot/rng.hpp"

namespace fewshot::checkpoint {

namespace {

constexpr char kMagic[8] = {'F', 'S', 'S', 'C', 'K', 'P', 'T', '\n'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void i32(std::int32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::string origin) : buf_(buf), origin_(std::move(origin)) {}
  void bytes(void* p, std::size_t n) {
    if (n > buf_.size() - pos_) throw IoError(origin_ + ": truncated checkpoint");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <typename V>
  V scalar() {
    V v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = scalar<std::uint64_t>();
    if (n > buf_.size() - pos_) throw IoError(origin_ + ": truncated checkpoint");
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }

 private:
  const std::string& buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

std::uint64_t fnv(const char* p, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(p[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

std::string to_string(Kind k) {
  switch (k) {
    case Kind::objectness:
      return "objectness";
    case Kind::extractor:
      return "extractor";
    case Kind::comparison:
      return "comparison";
  }
  return "unknown";
}

std::uint64_t Checkpoint::parameter_digest() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : tensors) {
    h = fnv(t.name.data(), t.name.size(), h);
    h = fnv(reinterpret_cast<const char*>(t.shape.data()), t.shape.size() * sizeof(int), h);
    h = fnv(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(float), h);
  }
  return h;
}

void write(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(Checkpoint::kVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.kind));
  w.str(ckpt.preset);
  w.i32(ckpt.epoch);
  w.str(ckpt.rng_state);
  w.str(ckpt.meta.dump());
  w.u64(ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) {
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) w.i32(d);
    w.u64(t.values.size());
    w.bytes(t.values.data(), t.values.size() * sizeof(float));
  }
  w.u64(fnv(w.buffer().data(), w.buffer().size()));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read(const std::filesystem::path& path, std::optional<Kind> expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint not found: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();
  const std::string origin = path.string();
  if (buf.size() < sizeof kMagic + 8 || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
    throw IoError(origin + ": not a checkpoint file");
  std::uint64_t stored = 0;
  std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
  if (stored != fnv(buf.data(), buf.size() - 8)) throw IoError(origin + ": checksum mismatch");

  Reader r(buf, origin);
  char magic[sizeof kMagic];
  r.bytes(magic, sizeof magic);
  const auto version = r.scalar<std::uint32_t>();
  if (version != Checkpoint::kVersion)
    throw IoError(origin + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.kind = static_cast<Kind>(r.scalar<std::uint32_t>());
  if (expected && c.kind != *expected)
    throw ConfigError(origin + " holds a " + to_string(c.kind) + " checkpoint, expected " + to_string(*expected));
  c.preset = r.str();
  c.epoch = r.scalar<std::int32_t>();
  c.rng_state = r.str();
  try {
    c.meta = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(origin + ": corrupt metadata: " + e.what());
  }
  const auto n = r.scalar<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    NamedTensor t;
    t.name = r.str();
    const auto rank = r.scalar<std::uint32_t>();
    std::size_t expected_count = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.shape.push_back(r.scalar<std::int32_t>());
      expected_count *= static_cast<std::size_t>(t.shape.back());
    }
    const auto count = r.scalar<std::uint64_t>();
    if (count != expected_count) throw IoError(origin + ": tensor " + t.name + " has inconsistent shape");
    t.values.resize(count);
    r.bytes(t.values.data(), count * sizeof(float));
    c.tensors.push_back(std::move(t));
  }
  if (r.position() != buf.size() - 8) throw IoError(origin + ": trailing bytes in checkpoint");
  return c;
}

Checkpoint capture(Kind kind, const std::string& preset, const nn::ParamRefs<float>& params) {
  Checkpoint c;
  c.kind = kind;
  c.preset = preset;
  for (const auto* p : params) c.tensors.push_back({p->name, p->shape, p->value});
  return c;
}

void restore(const Checkpoint& ckpt, const nn::ParamRefs<float>& params) {
  if (ckpt.tensors.size() != params.size())
    throw ConfigError(to_string(ckpt.kind) + " checkpoint has " + std::to_string(ckpt.tensors.size()) +
                      " tensors, model expects " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = ckpt.tensors[i];
    auto* p = params[i];
    if (t.name != p->name || t.shape != p->shape)
      throw ConfigError("checkpoint tensor " + t.name + " does not match model parameter " + p->name +
                        " (preset '" + ckpt.preset + "')");
    p->value = t.values;
    std::fill(p->grad.begin(), p->grad.end(), 0.0f);
    std::fill(p->velocity.begin(), p->velocity.end(), 0.0f);
  }
}

std::string digest_hex(std::uint64_t digest) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(digest));
  return buf;
}

}  // namespace fewshot::checkpoint
