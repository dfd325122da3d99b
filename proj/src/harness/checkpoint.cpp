#include "csmcir/harness/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "csmcir/error.hpp"

namespace csmcir::harness {

namespace {

constexpr char kMagic[8] = {'C', 'S', 'M', 'C', 'I', 'R', 'C', 'K'};

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) {
    u64(s.size());
    out_.append(s);
  }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  void matrix(std::string_view name, const Matrix& m) {
    bytes(name);
    u64(m.rows());
    u64(m.cols());
    for (double v : m.values()) f64(v);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_++])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes() {
    const std::uint64_t n = u64();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Matrix matrix(std::string_view expected_name) {
    const std::string name = bytes();
    if (name != expected_name) {
      throw SchemaError("checkpoint: expected tensor '" + std::string(expected_name) + "', found '" + name + "'");
    }
    const std::uint64_t rows = u64();
    const std::uint64_t cols = u64();
    if (cols != 0 && rows > (in_.size() - pos_) / 8 / cols) throw SchemaError("checkpoint: truncated tensor " + name);
    Matrix m(rows, cols);
    for (double& v : m.values()) v = f64();
    return m;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > in_.size() - pos_) throw SchemaError("checkpoint: truncated file");
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

std::size_t tensor_count(const Checkpoint& ck) {
  std::size_t n = 0;
  ck.params.for_each_tensor([&](std::string_view, const Matrix&) { ++n; });
  return 3 * n + 2;
}

}  // namespace

bool Checkpoint::operator==(const Checkpoint& o) const {
  return config == o.config && params == o.params && optimizer == o.optimizer && bank == o.bank &&
         step == o.step && rng.seed() == o.rng.seed() && rng.counter() == o.rng.counter();
}

std::string serialize_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  w.bytes(train_config_to_json(ck.config).dump());
  w.u64(ck.step);
  w.u64(ck.rng.seed());
  w.u64(ck.rng.counter());
  w.u64(ck.optimizer.step);

  w.u64(tensor_count(ck));
  auto emit = [&](std::string_view prefix, const EncoderParams& p) {
    p.for_each_tensor([&](std::string_view name, const Matrix& m) {
      w.matrix(std::string(prefix) + std::string(name), m);
    });
  };
  emit("params.", ck.params);
  emit("adam_m.", ck.optimizer.first_moment);
  emit("adam_v.", ck.optimizer.second_moment);

  const auto& entries = ck.bank.entries();
  const std::size_t width = entries.empty() ? 0 : entries.front().image_embedding.size();
  const std::size_t cwidth = entries.empty() ? 0 : entries.front().caption_embedding.size();
  Matrix images(entries.size(), width);
  Matrix captions(entries.size(), cwidth);
  for (std::size_t e = 0; e < entries.size(); ++e) {
    std::copy(entries[e].image_embedding.begin(), entries[e].image_embedding.end(), images.row(e).begin());
    std::copy(entries[e].caption_embedding.begin(), entries[e].caption_embedding.end(), captions.row(e).begin());
  }
  w.matrix("bank.image", images);
  w.matrix("bank.caption", captions);

  w.u64(ck.bank.next_sequence());
  w.u64(entries.size());
  for (const auto& e : entries) {
    w.u64(e.delta_t);
    w.u64(e.inserted_at);
    w.bytes(e.caption_id);
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.raw(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) {
    throw SchemaError("checkpoint: bad magic, not a csmcir checkpoint");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw SchemaError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  try {
    ck.config = train_config_from_json(nlohmann::json::parse(r.bytes()));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("checkpoint: bad config: ") + e.what());
  }
  ck.step = r.u64();
  const std::uint64_t seed = r.u64();
  const std::uint64_t counter = r.u64();
  ck.rng = Rng(seed, counter);
  ck.optimizer.step = r.u64();

  ck.params = EncoderParams::zeros(ck.config.dims);
  ck.optimizer.first_moment = EncoderParams::zeros(ck.config.dims);
  ck.optimizer.second_moment = EncoderParams::zeros(ck.config.dims);
  if (r.u64() != tensor_count(ck)) throw SchemaError("checkpoint: unexpected tensor count");
  auto absorb = [&](std::string_view prefix, EncoderParams& p) {
    p.for_each_tensor([&](std::string_view name, Matrix& m) {
      Matrix loaded = r.matrix(std::string(prefix) + std::string(name));
      if (loaded.rows() != m.rows() || loaded.cols() != m.cols()) {
        throw SchemaError("checkpoint: tensor " + std::string(prefix) + std::string(name) +
                          " does not match the configured shape");
      }
      m = std::move(loaded);
    });
  };
  absorb("params.", ck.params);
  absorb("adam_m.", ck.optimizer.first_moment);
  absorb("adam_v.", ck.optimizer.second_moment);

  const Matrix images = r.matrix("bank.image");
  const Matrix captions = r.matrix("bank.caption");
  const std::uint64_t next_sequence = r.u64();
  const std::uint64_t count = r.u64();
  if (count != images.rows() || count != captions.rows()) throw SchemaError("checkpoint: bank size mismatch");
  std::vector<MemoryEntry> entries(count);
  for (std::size_t e = 0; e < count; ++e) {
    entries[e].delta_t = r.u64();
    entries[e].inserted_at = r.u64();
    entries[e].caption_id = r.bytes();
    entries[e].image_embedding = images.row_copy(e);
    entries[e].caption_embedding = captions.row_copy(e);
  }
  if (!r.done()) throw SchemaError("checkpoint: trailing bytes");

  const BankOptions options{ck.config.memory_size, ck.config.n_max, ck.config.exclude_self_similarity};
  try {
    ck.bank = MemoryBank::restore(options, std::move(entries), next_sequence);
  } catch (const std::exception& e) {
    throw SchemaError(std::string("checkpoint: invalid bank: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write on checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace csmcir::harness
