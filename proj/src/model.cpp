#include "director/model.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include "director/rng.hpp"

namespace director {

void ModelConfig::validate() const {
  if (vocab_size <= 0) throw std::invalid_argument("ModelConfig: vocab_size must be positive");
  if (embed_dim <= 0) throw std::invalid_argument("ModelConfig: embed_dim must be positive");
  if (n_layers <= 0) throw std::invalid_argument("ModelConfig: n_layers must be positive");
  if (n_heads <= 0 || embed_dim % n_heads != 0)
    throw std::invalid_argument("ModelConfig: n_heads must be positive and divide embed_dim");
  if (max_seq_len < 2) throw std::invalid_argument("ModelConfig: max_seq_len must be >= 2");
}

namespace {

constexpr double kInitStd = 0.02;
constexpr double kMaskValue = -1e30;

Tensor gaussian_param(std::vector<int64_t> shape, Rng& rng, double std_dev) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> vals(static_cast<size_t>(n));
  for (double& v : vals) v = rng.gaussian() * std_dev;
  return Tensor(std::move(shape), std::move(vals), true);
}

Tensor ones_param(int64_t n) { return Tensor::full({n}, 1.0, true); }
Tensor zeros_param(std::vector<int64_t> shape) { return Tensor::zeros(std::move(shape), true); }

}  // namespace

DirectorModel DirectorModel::init(const ModelConfig& config) {
  config.validate();
  Rng rng(substream_seed(config.seed, "init"));
  const int64_t d = config.embed_dim;
  const int64_t v = config.vocab_size;

  DirectorModel m;
  m.config_ = config;
  m.tok_embed_ = gaussian_param({v, d}, rng, kInitStd);
  m.pos_embed_ = gaussian_param({config.max_seq_len, d}, rng, kInitStd);
  m.layers_.reserve(static_cast<size_t>(config.n_layers));
  for (int64_t l = 0; l < config.n_layers; ++l) {
    TransformerLayer layer;
    layer.ln1_gain = ones_param(d);
    layer.ln1_bias = zeros_param({d});
    layer.wq = gaussian_param({d, d}, rng, kInitStd);
    layer.bq = zeros_param({d});
    layer.wk = gaussian_param({d, d}, rng, kInitStd);
    layer.bk = zeros_param({d});
    layer.wv = gaussian_param({d, d}, rng, kInitStd);
    layer.bv = zeros_param({d});
    layer.wo = gaussian_param({d, d}, rng, kInitStd);
    layer.bo = zeros_param({d});
    layer.ln2_gain = ones_param(d);
    layer.ln2_bias = zeros_param({d});
    layer.w_ff1 = gaussian_param({d, 4 * d}, rng, kInitStd);
    layer.b_ff1 = zeros_param({4 * d});
    layer.w_ff2 = gaussian_param({4 * d, d}, rng, kInitStd);
    layer.b_ff2 = zeros_param({d});
    m.layers_.push_back(std::move(layer));
  }
  m.ln_f_gain_ = ones_param(d);
  m.ln_f_bias_ = zeros_param({d});
  m.w_lm_ = gaussian_param({d, v}, rng, kInitStd);
  m.b_lm_ = zeros_param({v});
  m.w_cls_ = gaussian_param({d, v}, rng, kInitStd);
  m.b_cls_ = zeros_param({v});
  return m;
}

DualHeadOutput DirectorModel::forward(std::span<const int> tokens) const {
  if (!tok_embed_.defined()) throw std::logic_error("forward: model not initialized");
  const int64_t t_len = static_cast<int64_t>(tokens.size());
  if (t_len < 1) throw std::invalid_argument("forward: empty token sequence");
  if (t_len > config_.max_seq_len)
    throw std::invalid_argument("forward: sequence length " + std::to_string(t_len) +
                                " exceeds max_seq_len " +
                                std::to_string(config_.max_seq_len));
  for (int id : tokens) {
    if (id < 0 || id >= config_.vocab_size)
      throw std::invalid_argument("forward: token id " + std::to_string(id) +
                                  " outside vocabulary of size " +
                                  std::to_string(config_.vocab_size));
  }

  const int64_t d = config_.embed_dim;
  const int64_t head_dim = d / config_.n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  // causal mask: entry (i, j) masked iff j > i
  std::vector<uint8_t> causal(static_cast<size_t>(t_len * t_len), 0);
  for (int64_t i = 0; i < t_len; ++i)
    for (int64_t j = i + 1; j < t_len; ++j) causal[static_cast<size_t>(i * t_len + j)] = 1;

  Tensor x = add(gather_rows(tok_embed_, tokens), slice(pos_embed_, 0, 0, t_len));

  for (const TransformerLayer& layer : layers_) {
    Tensor h = layer_norm(x, layer.ln1_gain, layer.ln1_bias);
    Tensor q = add_bias(matmul(h, layer.wq), layer.bq);
    Tensor k = add_bias(matmul(h, layer.wk), layer.bk);
    Tensor v = add_bias(matmul(h, layer.wv), layer.bv);

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(static_cast<size_t>(config_.n_heads));
    for (int64_t head = 0; head < config_.n_heads; ++head) {
      const int64_t c0 = head * head_dim;
      const int64_t c1 = c0 + head_dim;
      Tensor qh = slice(q, 1, c0, c1);
      Tensor kh = slice(k, 1, c0, c1);
      Tensor vh = slice(v, 1, c0, c1);
      Tensor scores = scale(matmul(qh, transpose(kh)), att_scale);
      Tensor attn = softmax(masked_fill(scores, causal, kMaskValue));
      head_outputs.push_back(matmul(attn, vh));
    }
    Tensor att = concat(head_outputs, 1);
    x = add(x, add_bias(matmul(att, layer.wo), layer.bo));

    Tensor h2 = layer_norm(x, layer.ln2_gain, layer.ln2_bias);
    Tensor inner = gelu(add_bias(matmul(h2, layer.w_ff1), layer.b_ff1));
    x = add(x, add_bias(matmul(inner, layer.w_ff2), layer.b_ff2));
  }

  Tensor final_h = layer_norm(x, ln_f_gain_, ln_f_bias_);
  DualHeadOutput out;
  out.lm_log_probs = log_softmax(add_bias(matmul(final_h, w_lm_), b_lm_));
  out.class_probs = sigmoid(add_bias(matmul(final_h, w_cls_), b_cls_));
  return out;
}

void DirectorModel::set_frozen_core(bool frozen) {
  frozen_core_ = frozen;
  for (Tensor& p : core_and_lm_parameters()) p.set_requires_grad(!frozen);
}

std::vector<Tensor> DirectorModel::parameters() const {
  std::vector<Tensor> out = core_and_lm_parameters();
  out.push_back(w_cls_);
  out.push_back(b_cls_);
  return out;
}

std::vector<Tensor> DirectorModel::core_and_lm_parameters() const {
  std::vector<Tensor> out = {tok_embed_, pos_embed_};
  for (const TransformerLayer& l : layers_) {
    out.insert(out.end(), {l.ln1_gain, l.ln1_bias, l.wq, l.bq, l.wk, l.bk, l.wv,
                           l.bv, l.wo, l.bo, l.ln2_gain, l.ln2_bias, l.w_ff1,
                           l.b_ff1, l.w_ff2, l.b_ff2});
  }
  out.insert(out.end(), {ln_f_gain_, ln_f_bias_, w_lm_, b_lm_});
  return out;
}

std::vector<Tensor> DirectorModel::class_head_parameters() const {
  return {w_cls_, b_cls_};
}

std::vector<Tensor> DirectorModel::trainable_parameters() const {
  if (frozen_core_) return class_head_parameters();
  return parameters();
}

// ---- checkpoint io -----------------------------------------------------------

namespace {

constexpr std::array<uint8_t, 4> kMagic = {'D', 'I', 'R', '1'};
constexpr uint32_t kVersion = 1;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f64(std::vector<uint8_t>& out, double d) {
  uint64_t bits;
  std::memcpy(&bits, &d, sizeof(bits));
  put_u64(out, bits);
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const uint8_t> bytes) : bytes_(bytes) {}

  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes_[pos_ + static_cast<size_t>(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }

  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes_[pos_ + static_cast<size_t>(i)]) << (8 * i);
    pos_ += 8;
    return v;
  }

  double f64() {
    const uint64_t bits = u64();
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    return d;
  }

  uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }

  size_t pos() const { return pos_; }
  size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(size_t n) {
    if (pos_ + n > bytes_.size())
      throw CheckpointError(CheckpointError::Kind::truncated,
                            "checkpoint truncated at byte " + std::to_string(pos_));
  }

  std::span<const uint8_t> bytes_;
  size_t pos_ = 0;
};

const std::array<uint32_t, 256>& crc_table() {
  static const std::array<uint32_t, 256> table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int bit = 0; bit < 8; ++bit) c = (c & 1u) ? (0xEDB88320u ^ (c >> 1)) : (c >> 1);
      t[i] = c;
    }
    return t;
  }();
  return table;
}

}  // namespace

uint32_t crc32(std::span<const uint8_t> data) {
  uint32_t c = 0xFFFFFFFFu;
  for (uint8_t b : data) c = crc_table()[(c ^ b) & 0xffu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

std::vector<uint8_t> save_checkpoint(const DirectorModel& model) {
  if (!model.tok_embed_.defined())
    throw std::logic_error("save_checkpoint: model not initialized");
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  put_u32(out, kVersion);
  const ModelConfig& c = model.config();
  put_u64(out, static_cast<uint64_t>(c.vocab_size));
  put_u64(out, static_cast<uint64_t>(c.embed_dim));
  put_u64(out, static_cast<uint64_t>(c.n_layers));
  put_u64(out, static_cast<uint64_t>(c.n_heads));
  put_u64(out, static_cast<uint64_t>(c.max_seq_len));
  put_u64(out, c.seed);
  out.push_back(model.frozen_core() ? 1 : 0);
  for (const Tensor& p : model.parameters()) {
    for (double v : p.values()) put_f64(out, v);
  }
  put_u32(out, crc32(out));
  return out;
}

DirectorModel load_checkpoint(std::span<const uint8_t> bytes, const ModelConfig* expected) {
  if (bytes.size() < 8)
    throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint shorter than header");
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
    throw CheckpointError(CheckpointError::Kind::bad_magic, "bad checkpoint magic");

  ByteReader r(bytes);
  r.u32();  // magic, already verified
  const uint32_t version = r.u32();
  if (version != kVersion)
    throw CheckpointError(CheckpointError::Kind::version_mismatch,
                          "unsupported checkpoint version " + std::to_string(version));

  ModelConfig config;
  config.vocab_size = static_cast<int64_t>(r.u64());
  config.embed_dim = static_cast<int64_t>(r.u64());
  config.n_layers = static_cast<int64_t>(r.u64());
  config.n_heads = static_cast<int64_t>(r.u64());
  config.max_seq_len = static_cast<int64_t>(r.u64());
  config.seed = r.u64();
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(CheckpointError::Kind::config_mismatch,
                          std::string("stored config invalid: ") + e.what());
  }
  if (expected != nullptr && !(config == *expected))
    throw CheckpointError(CheckpointError::Kind::config_mismatch,
                          "checkpoint config does not match the expected config");

  const bool frozen = r.u8() != 0;
  DirectorModel model = DirectorModel::init(config);

  // exact-length check before touching the checksum, so a cut file reports
  // truncation rather than a checksum failure
  int64_t param_doubles = 0;
  for (const Tensor& p : model.parameters()) param_doubles += p.numel();
  const size_t expected_size = r.pos() + static_cast<size_t>(param_doubles) * 8 + 4;
  if (bytes.size() != expected_size)
    throw CheckpointError(CheckpointError::Kind::truncated,
                          "checkpoint size " + std::to_string(bytes.size()) +
                              " does not match declared payload of " +
                              std::to_string(expected_size) + " bytes");

  const std::span<const uint8_t> body = bytes.subspan(0, bytes.size() - 4);
  ByteReader tail(bytes.subspan(bytes.size() - 4));
  if (crc32(body) != tail.u32())
    throw CheckpointError(CheckpointError::Kind::checksum, "checkpoint CRC-32 mismatch");

  for (Tensor& p : model.parameters()) {
    auto vals = p.values_mut();
    for (double& v : vals) v = r.f64();
  }
  model.set_frozen_core(frozen);
  return model;
}

void save_checkpoint_file(const DirectorModel& model, const std::string& path) {
  const std::vector<uint8_t> bytes = save_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint file for writing: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint file: " + path);
}

DirectorModel load_checkpoint_file(const std::string& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint file: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return load_checkpoint(bytes, expected);
}

}  // namespace director
