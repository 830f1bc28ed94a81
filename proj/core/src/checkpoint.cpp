#include "consert/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "consert/errors.hpp"

namespace consert {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'C', 'S', 'R', 'T'};
constexpr std::uint32_t kConfigFields = 7;

class Writer {
 public:
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void floats(std::span<const float> v) { raw(v.data(), v.size_bytes()); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  void raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, data_ + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == size_; }

 private:
  void need(std::size_t n) const {
    if (size_ - pos_ < n) throw IntegrityError("checkpoint: unexpected end of data");
  }
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::uint8_t* data, std::size_t size) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), data, static_cast<uInt>(size)));
}

std::uint32_t to_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw ConfigError(std::string("checkpoint: ") + what + " too large");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint) {
  const EncoderConfig& cfg = checkpoint.params.config;
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  w.u32(kConfigFields);
  w.u32(to_u32(cfg.vocab_size, "vocab_size"));
  w.u32(to_u32(cfg.max_len, "max_len"));
  w.u32(to_u32(cfg.d_model, "d_model"));
  w.u32(to_u32(cfg.n_layers, "n_layers"));
  w.u32(to_u32(cfg.n_heads, "n_heads"));
  w.u32(to_u32(cfg.d_ff, "d_ff"));
  w.u32(cfg.pooling == Pooling::kLastLayerMean ? 0u : 1u);

  const auto& tokens = checkpoint.vocab.tokens();
  w.u32(to_u32(tokens.size(), "vocab"));
  for (const std::string& t : tokens) w.str(t);

  const auto named = checkpoint.params.named();
  w.u32(to_u32(named.size(), "parameter count"));
  for (const auto& [name, tensor] : named) {
    w.str(name);
    w.u32(to_u32(tensor.rank(), "rank"));
    for (std::size_t d : tensor.shape()) w.u32(to_u32(d, "dimension"));
    w.floats(tensor.data());
  }
  const std::uint32_t crc = crc_of(w.bytes().data(), w.bytes().size());
  w.u32(crc);
  return w.take();
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof kMagic + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw IntegrityError("checkpoint: missing CSRT magic");
  }
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + body, 4);
  if (crc_of(bytes.data(), body) != stored_crc) {
    throw IntegrityError("checkpoint: CRC32 mismatch (truncated or corrupted file)");
  }

  Reader r(bytes.data() + sizeof kMagic, body - sizeof kMagic);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatVersionError("checkpoint: format version " + std::to_string(version) +
                             " is not supported (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  }
  if (r.u32() != kConfigFields) throw IntegrityError("checkpoint: unexpected config block size");
  EncoderConfig cfg;
  cfg.vocab_size = r.u32();
  cfg.max_len = r.u32();
  cfg.d_model = r.u32();
  cfg.n_layers = r.u32();
  cfg.n_heads = r.u32();
  cfg.d_ff = r.u32();
  const std::uint32_t pooling = r.u32();
  if (pooling > 1) throw IntegrityError("checkpoint: invalid pooling code");
  cfg.pooling = pooling == 0 ? Pooling::kLastLayerMean : Pooling::kLastTwoLayersMean;
  cfg.validate();

  std::vector<std::string> tokens(r.u32());
  for (std::string& t : tokens) t = r.str();
  Checkpoint out{.params = init_params(cfg, 0), .vocab = Vocab::from_tokens(tokens)};
  if (out.vocab.size() != cfg.vocab_size) {
    throw IntegrityError("checkpoint: vocab has " + std::to_string(out.vocab.size()) +
                         " tokens but config says " + std::to_string(cfg.vocab_size));
  }

  auto expected = out.params.named();
  const std::uint32_t count = r.u32();
  if (count != expected.size()) {
    throw IntegrityError("checkpoint: expected " + std::to_string(expected.size()) +
                         " parameter blocks, found " + std::to_string(count));
  }
  for (auto& [name, tensor] : expected) {
    const std::string stored = r.str();
    if (stored != name) {
      throw IntegrityError("checkpoint: expected block '" + name + "', found '" + stored + "'");
    }
    Shape shape(r.u32());
    for (std::size_t& d : shape) d = r.u32();
    if (shape != tensor.shape()) {
      throw IntegrityError("checkpoint: block '" + name + "' has shape " +
                           shape_to_string(shape) + ", expected " +
                           shape_to_string(tensor.shape()));
    }
    auto values = tensor.mutable_data();
    r.raw(values.data(), values.size_bytes());
  }
  if (!r.done()) throw IntegrityError("checkpoint: trailing bytes after parameter blocks");
  return out;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace consert
