#include "ecgsl/model.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "ecgsl/random.hpp"

namespace ecgsl {

namespace {

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == v.size() && !v.empty() && v[0] != '-', ErrorCode::InvalidConfig,
          "'" + key + "' expects a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == v.size() && !v.empty(), ErrorCode::InvalidConfig,
          "'" + key + "' expects a number, got '" + v + "'");
  return x;
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(key, item));
  require(!out.empty(), ErrorCode::InvalidConfig, "'" + key + "' expects a comma-separated list");
  return out;
}

std::string real_text(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::size_t conv_out(std::size_t L, std::size_t K, std::size_t stride, std::size_t pad) {
  return (L + 2 * pad - K) / stride + 1;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configs

std::vector<std::size_t> EncoderConfig::lengths() const {
  std::vector<std::size_t> L{segment_length};
  for (std::size_t i = 0; i < channels.size(); ++i) {
    require(L.back() + 2 * padding() >= kernel_size, ErrorCode::InvalidConfig,
            "encoder kernel exceeds padded input length at layer " + std::to_string(i));
    L.push_back(conv_out(L.back(), kernel_size, stride, padding()));
  }
  return L;
}

void EncoderConfig::validate() const {
  require(channels.size() == 6, ErrorCode::InvalidConfig, "the structural encoder has exactly 6 conv layers");
  for (auto c : channels) require(c >= 1, ErrorCode::InvalidConfig, "encoder channels must be >= 1");
  require(kernel_size >= 1 && kernel_size % 2 == 1, ErrorCode::InvalidConfig,
          "encoder kernel size must be odd");
  require(stride >= 1, ErrorCode::InvalidConfig, "encoder stride must be >= 1");
  require(embed_dim >= 2 && embed_dim % 2 == 0, ErrorCode::InvalidConfig, "embed_dim must be even and >= 2");
  require(segment_length >= 8, ErrorCode::InvalidConfig, "segment length must be >= 8");
  const auto L = lengths();
  // The decoder reaches each mirrored length with output_padding < stride.
  for (std::size_t i = L.size() - 1; i >= 1; --i) {
    const long base = static_cast<long>((L[i] - 1) * stride + kernel_size) - 2 * static_cast<long>(padding());
    const long op = static_cast<long>(L[i - 1]) - base;
    require(op >= 0 && op < static_cast<long>(stride), ErrorCode::InvalidConfig,
            "decoder cannot mirror encoder length " + std::to_string(L[i - 1]));
  }
}

void ModelConfig::validate() const {
  require(num_classes >= 2, ErrorCode::InvalidConfig, "num_classes must be >= 2");
  if (arch == Architecture::BaselineCnn) {
    require(cnn_channels.size() == 6, ErrorCode::InvalidConfig, "the baseline CNN has exactly 6 conv layers");
    return;
  }
  encoder.validate();
  require(transformer.num_heads >= 1 && d() % transformer.num_heads == 0, ErrorCode::InvalidConfig,
          "embed_dim must be divisible by num_heads");
  require(transformer.ffn_dim >= 1 && classifier_hidden >= 1, ErrorCode::InvalidConfig,
          "ffn and classifier widths must be >= 1");
  require(transformer.dropout >= 0.0 && transformer.dropout < 1.0, ErrorCode::InvalidConfig,
          "dropout must be in [0, 1)");
}

std::string ModelConfig::to_text() const {
  std::ostringstream o;
  o << "model.arch=" << (arch == Architecture::BaselineCnn ? "cnn" : "segment-transformer") << "\n"
    << "model.channels=" << join(encoder.channels) << "\n"
    << "model.kernel=" << encoder.kernel_size << "\n"
    << "model.stride=" << encoder.stride << "\n"
    << "model.embed_dim=" << encoder.embed_dim << "\n"
    << "model.segment_length=" << encoder.segment_length << "\n"
    << "model.layers=" << transformer.num_layers << "\n"
    << "model.heads=" << transformer.num_heads << "\n"
    << "model.ffn_dim=" << transformer.ffn_dim << "\n"
    << "model.dropout=" << real_text(transformer.dropout) << "\n"
    << "model.classes=" << num_classes << "\n"
    << "model.classifier_hidden=" << classifier_hidden << "\n"
    << "model.cnn_channels=" << join(cnn_channels) << "\n";
  return o.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::InvalidConfig, "malformed config line '" + line + "'");
    const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "model.arch") {
      if (v == "cnn") c.arch = Architecture::BaselineCnn;
      else if (v == "segment-transformer") c.arch = Architecture::SegmentTransformer;
      else fail(ErrorCode::InvalidConfig, "unknown model.arch '" + v + "'");
    } else if (k == "model.channels") c.encoder.channels = parse_list(k, v);
    else if (k == "model.kernel") c.encoder.kernel_size = parse_size(k, v);
    else if (k == "model.stride") c.encoder.stride = parse_size(k, v);
    else if (k == "model.embed_dim") c.encoder.embed_dim = parse_size(k, v);
    else if (k == "model.segment_length") c.encoder.segment_length = parse_size(k, v);
    else if (k == "model.layers") c.transformer.num_layers = parse_size(k, v);
    else if (k == "model.heads") c.transformer.num_heads = parse_size(k, v);
    else if (k == "model.ffn_dim") c.transformer.ffn_dim = parse_size(k, v);
    else if (k == "model.dropout") c.transformer.dropout = parse_real(k, v);
    else if (k == "model.classes") c.num_classes = parse_size(k, v);
    else if (k == "model.classifier_hidden") c.classifier_hidden = parse_size(k, v);
    else if (k == "model.cnn_channels") c.cnn_channels = parse_list(k, v);
    else fail(ErrorCode::InvalidConfig, "unknown model key '" + k + "'");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

std::map<std::string, Shape> parameter_shapes(const ModelConfig& cfg) {
  cfg.validate();
  std::map<std::string, Shape> s;
  const std::size_t C = cfg.num_classes;
  if (cfg.arch == Architecture::BaselineCnn) {
    std::size_t in = 1;
    for (std::size_t i = 0; i < cfg.cnn_channels.size(); ++i) {
      const std::string p = "cnn.conv" + std::to_string(i);
      s[p + ".weight"] = {cfg.cnn_channels[i], in, 5};
      s[p + ".bias"] = {cfg.cnn_channels[i]};
      in = cfg.cnn_channels[i];
    }
    s["cnn.fc.weight"] = {in, C};
    s["cnn.fc.bias"] = {C};
    return s;
  }

  const auto& e = cfg.encoder;
  const std::size_t d = cfg.d(), K = e.kernel_size, flat = e.flat_size(), S = e.segment_length;
  const auto& ch = e.channels;
  std::size_t in = 1;
  for (std::size_t i = 0; i < ch.size(); ++i) {
    const std::string p = "enc.conv" + std::to_string(i);
    s[p + ".weight"] = {ch[i], in, K};
    s[p + ".bias"] = {ch[i]};
    in = ch[i];
  }
  s["enc.proj.weight"] = {flat, d};
  s["enc.proj.bias"] = {d};

  s["dec.proj.weight"] = {d, flat};
  s["dec.proj.bias"] = {flat};
  for (std::size_t i = 0; i < ch.size(); ++i) {
    const std::size_t cin = ch[ch.size() - 1 - i];
    const std::size_t cout = i + 1 < ch.size() ? ch[ch.size() - 2 - i] : 1;
    const std::string p = "dec.deconv" + std::to_string(i);
    s[p + ".weight"] = {cin, cout, K};
    s[p + ".bias"] = {cout};
  }

  const std::size_t F = cfg.transformer.ffn_dim;
  for (std::size_t l = 0; l < cfg.transformer.num_layers; ++l) {
    const std::string p = "tf.layer" + std::to_string(l);
    for (const char* ln : {".ln1", ".ln2"}) {
      s[p + ln + ".gamma"] = {d};
      s[p + ln + ".beta"] = {d};
    }
    // No key bias: it shifts every score in a row equally, so softmax
    // cancels it and its gradient is identically zero.
    for (const char* w : {"q", "k", "v", "o"}) s[p + ".attn.w" + w] = {d, d};
    for (const char* b : {"q", "v", "o"}) s[p + ".attn.b" + b] = {d};
    s[p + ".ffn1.weight"] = {d, F};
    s[p + ".ffn1.bias"] = {F};
    s[p + ".ffn2.weight"] = {F, d};
    s[p + ".ffn2.bias"] = {d};
  }
  s["tf.ln_final.gamma"] = {d};
  s["tf.ln_final.beta"] = {d};

  s["pool.w"] = {d, d};
  s["pool.b"] = {d};
  s["pool.v"] = {d, 1};

  s["cls.fc1.weight"] = {d, cfg.classifier_hidden};
  s["cls.fc1.bias"] = {cfg.classifier_hidden};
  s["cls.fc2.weight"] = {cfg.classifier_hidden, C};
  s["cls.fc2.bias"] = {C};

  s["recon.weight"] = {d, S};
  s["recon.bias"] = {S};
  return s;
}

ParameterSet<float> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x1417));
  ParameterSet<float> out;
  for (const auto& [name, shape] : parameter_shapes(cfg)) {
    Array<float> a(shape);
    const bool is_gain = name.ends_with(".gamma");
    const bool is_zero = name.ends_with(".bias") || name.ends_with(".beta") || name == "pool.b" ||
                         (name.find(".attn.b") != std::string::npos);
    if (is_gain) {
      std::fill(a.data.begin(), a.data.end(), 1.0f);
    } else if (!is_zero) {
      double fan_in, fan_out;
      if (shape.size() == 3) {
        // conv [Co, Ci, K]; transposed conv [Ci, Co, K]
        fan_in = static_cast<double>(shape[1] * shape[2]);
        fan_out = static_cast<double>(shape[0] * shape[2]);
      } else {
        fan_in = static_cast<double>(shape[0]);
        fan_out = static_cast<double>(shape[1]);
      }
      const double bound = std::sqrt(6.0 / (fan_in + fan_out));
      for (auto& v : a.data) v = static_cast<float>(uniform(rng, -bound, bound));
    }
    out.emplace(name, std::move(a));
  }
  return out;
}

template <class T>
Tensor<T> Bound<T>::operator()(const std::string& name) {
  if (auto it = leaves_.find(name); it != leaves_.end()) return it->second;
  auto p = params_.find(name);
  require(p != params_.end(), ErrorCode::InvalidState, "model has no parameter '" + name + "'");
  bool frozen = !trainable_;
  for (const auto& f : frozen_) frozen = frozen || name.starts_with(f);
  auto t = frozen ? tape_.constant(p->second) : tape_.variable(p->second);
  leaves_.emplace(name, t);
  return t;
}

template <class T>
ParameterSet<T> Bound<T>::gradients() const {
  ParameterSet<T> out;
  for (const auto& [name, t] : leaves_)
    if (t.requires_grad()) out.emplace(name, t.grad_array());
  return out;
}

// ---------------------------------------------------------------------------
// Forward pieces

template <class T>
Tensor<T> encode_segments(Bound<T>& p, const ModelConfig& cfg, const Tensor<T>& x) {
  const auto& e = cfg.encoder;
  require(x.rank() == 2 && x.dim(1) == e.segment_length, ErrorCode::Shape,
          "encode_segments: expected [N, " + std::to_string(e.segment_length) + "], got " +
              shape_string(x.shape()));
  const std::size_t N = x.dim(0);
  Tensor<T> h = reshape(x, {N, 1, e.segment_length});
  for (std::size_t i = 0; i < e.channels.size(); ++i) {
    const std::string n = "enc.conv" + std::to_string(i);
    auto bias = p(n + ".bias");
    h = relu(conv1d(h, p(n + ".weight"), e.stride, e.padding(), &bias));
  }
  h = reshape(h, {N, e.flat_size()});
  return dense(h, p("enc.proj.weight"), p("enc.proj.bias"));
}

template <class T>
Tensor<T> decode_embeddings(Bound<T>& p, const ModelConfig& cfg, const Tensor<T>& z) {
  const auto& e = cfg.encoder;
  require(z.rank() == 2 && z.dim(1) == cfg.d(), ErrorCode::Shape,
          "decode_embeddings: expected [N, " + std::to_string(cfg.d()) + "], got " +
              shape_string(z.shape()));
  const std::size_t N = z.dim(0);
  const auto L = e.lengths();
  const std::size_t layers = e.channels.size();
  Tensor<T> h = relu(dense(z, p("dec.proj.weight"), p("dec.proj.bias")));
  h = reshape(h, {N, e.channels.back(), L.back()});
  for (std::size_t i = 0; i < layers; ++i) {
    const std::size_t in_len = L[layers - i], target = L[layers - 1 - i];
    const std::size_t op = target + 2 * e.padding() - ((in_len - 1) * e.stride + e.kernel_size);
    const std::string n = "dec.deconv" + std::to_string(i);
    auto bias = p(n + ".bias");
    h = conv1d_transpose(h, p(n + ".weight"), e.stride, e.padding(), op, &bias);
    h = i + 1 < layers ? relu(h) : sigmoid(h);
  }
  return reshape(h, {N, e.segment_length});
}

template <class T>
Array<T> positional_encoding(std::size_t steps, std::size_t d) {
  require(steps >= 1, ErrorCode::InvalidConfig, "positional_encoding needs at least one step");
  require(d >= 2 && d % 2 == 0, ErrorCode::InvalidConfig, "positional_encoding needs an even dimension");
  Array<T> pe({steps, d});
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t k = 0; k < d / 2; ++k) {
      const double angle =
          static_cast<double>(t) / std::pow(10000.0, static_cast<double>(2 * k) / static_cast<double>(d));
      pe.at(t, 2 * k) = static_cast<T>(std::sin(angle));
      pe.at(t, 2 * k + 1) = static_cast<T>(std::cos(angle));
    }
  return pe;
}

template <class T>
Tensor<T> transformer_forward(Bound<T>& p, const ModelConfig& cfg, const Tensor<T>& h_in,
                              std::span<const std::uint8_t> mask, const ForwardOptions& opt) {
  const std::size_t Tn = h_in.dim(0), d = cfg.d();
  require(h_in.rank() == 2 && h_in.dim(1) == d, ErrorCode::Shape,
          "transformer_forward: expected [T, " + std::to_string(d) + "]");
  require(mask.size() == Tn, ErrorCode::Shape, "transformer_forward: mask length differs from T");
  bool any = false;
  for (auto m : mask) any = any || m;
  require(any, ErrorCode::InvalidConfig, "transformer_forward: attention mask has no real position");

  const auto& tc = cfg.transformer;
  const double drop = opt.training ? tc.dropout : 0.0;
  require(drop == 0.0 || opt.rng != nullptr, ErrorCode::InvalidConfig, "dropout in training needs an rng");
  std::vector<std::uint8_t> pair(Tn * Tn);
  for (std::size_t i = 0; i < Tn; ++i)
    for (std::size_t j = 0; j < Tn; ++j) pair[i * Tn + j] = (mask[i] && mask[j]) ? 1 : 0;

  const std::size_t H = tc.num_heads, dh = d / H;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  Tensor<T> h = h_in;
  for (std::size_t l = 0; l < tc.num_layers; ++l) {
    const std::string n = "tf.layer" + std::to_string(l);
    auto x = layer_norm(h, p(n + ".ln1.gamma"), p(n + ".ln1.beta"));
    auto q = dense(x, p(n + ".attn.wq"), p(n + ".attn.bq"));
    auto k = matmul(x, p(n + ".attn.wk"));
    auto v = dense(x, p(n + ".attn.wv"), p(n + ".attn.bv"));
    std::vector<Tensor<T>> heads;
    heads.reserve(H);
    for (std::size_t hd = 0; hd < H; ++hd) {
      auto qh = slice(q, 1, hd * dh, (hd + 1) * dh);
      auto kh = slice(k, 1, hd * dh, (hd + 1) * dh);
      auto vh = slice(v, 1, hd * dh, (hd + 1) * dh);
      auto a = masked_softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), pair);
      heads.push_back(matmul(a, vh));
    }
    auto att = H == 1 ? heads[0] : concat<T>(heads, 1);
    att = dense(att, p(n + ".attn.wo"), p(n + ".attn.bo"));
    h = add(h, dropout(att, drop, opt.training, opt.rng));

    auto y = layer_norm(h, p(n + ".ln2.gamma"), p(n + ".ln2.beta"));
    y = relu(dense(y, p(n + ".ffn1.weight"), p(n + ".ffn1.bias")));
    y = dense(y, p(n + ".ffn2.weight"), p(n + ".ffn2.bias"));
    h = add(h, dropout(y, drop, opt.training, opt.rng));
  }
  return layer_norm(h, p("tf.ln_final.gamma"), p("tf.ln_final.beta"));
}

template <class T>
PoolResult<T> attention_pool(Bound<T>& p, const Tensor<T>& h, std::span<const std::uint8_t> mask) {
  const std::size_t Tn = h.dim(0);
  require(mask.size() == Tn, ErrorCode::Shape, "attention_pool: mask length differs from T");
  bool any = false;
  for (auto m : mask) any = any || m;
  require(any, ErrorCode::InvalidConfig, "attention_pool: every position is masked");
  auto s = tanh(dense(h, p("pool.w"), p("pool.b")));
  auto score = reshape(matmul(s, p("pool.v")), {1, Tn});
  auto w = masked_softmax(score, mask);
  return {matmul(w, h), w};
}

template <class T>
Tensor<T> classify(Bound<T>& p, const Tensor<T>& pooled) {
  auto z = relu(dense(pooled, p("cls.fc1.weight"), p("cls.fc1.bias")));
  return dense(z, p("cls.fc2.weight"), p("cls.fc2.bias"));
}

template <class T>
Tensor<T> reconstruct(Bound<T>& p, const Tensor<T>& hidden) {
  return sigmoid(dense(hidden, p("recon.weight"), p("recon.bias")));
}

template <class T>
SequenceForward<T> forward_sequence(Bound<T>& p, const ModelConfig& cfg, const Tensor<T>& x,
                                    std::span<const std::uint8_t> mask, const ForwardOptions& opt,
                                    bool with_classifier) {
  require(cfg.arch == Architecture::SegmentTransformer, ErrorCode::InvalidState,
          "forward_sequence needs a segment-transformer model");
  const std::size_t Tn = x.dim(0);
  auto e = encode_segments(p, cfg, x);
  e = add(e, p.tape().constant(positional_encoding<T>(Tn, cfg.d())));
  SequenceForward<T> out;
  out.hidden = transformer_forward(p, cfg, e, mask, opt);
  if (with_classifier) {
    auto pooled = attention_pool(p, out.hidden, mask);
    out.pool_weights = pooled.weights;
    out.logits = classify(p, pooled.pooled);
  }
  return out;
}

template <class T>
Tensor<T> baseline_cnn_forward(Bound<T>& p, const ModelConfig& cfg, const Tensor<T>& signal) {
  require(cfg.arch == Architecture::BaselineCnn, ErrorCode::InvalidState,
          "baseline_cnn_forward needs a baseline CNN model");
  require(signal.rank() == 1, ErrorCode::Shape, "baseline_cnn_forward: expected a 1-D signal");
  const std::size_t L = signal.dim(0);
  require(L >= 64, ErrorCode::Shape, "baseline CNN needs at least 64 samples, got " + std::to_string(L));
  Tensor<T> h = reshape(signal, {1, 1, L});
  for (std::size_t i = 0; i < cfg.cnn_channels.size(); ++i) {
    const std::string n = "cnn.conv" + std::to_string(i);
    auto bias = p(n + ".bias");
    h = max_pool1d(relu(conv1d(h, p(n + ".weight"), 1, 2, &bias)), 2);
  }
  return dense(mean_last(h), p("cnn.fc.weight"), p("cnn.fc.bias"));
}

// ---------------------------------------------------------------------------
// State

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::None: return "none";
    case Stage::Autoencoder: return "ae";
    case Stage::Masked: return "masked";
    case Stage::Finetuned: return "finetuned";
  }
  return "none";
}

Stage parse_stage(const std::string& text) {
  if (text == "none") return Stage::None;
  if (text == "ae") return Stage::Autoencoder;
  if (text == "masked") return Stage::Masked;
  if (text == "finetuned") return Stage::Finetuned;
  fail(ErrorCode::InvalidConfig, "unknown stage '" + text + "'");
}

ModelState ModelState::initial(const ModelConfig& cfg, std::uint64_t seed) {
  ModelState s;
  s.config = cfg;
  s.params = init_parameters(cfg, seed);
  s.seed = seed;
  return s;
}

std::vector<float> predict_logits(const ModelState& state, const Array<float>& segments,
                                  std::span<const std::uint8_t> mask) {
  Tape<float> tape;
  Bound<float> p(tape, state.params, false);
  auto x = tape.constant(segments);
  auto out = forward_sequence(p, state.config, x, mask, {});
  auto d = out.logits.data();
  return {d.begin(), d.end()};
}

#define ECGSL_INSTANTIATE(T)                                                                       \
  template class Bound<T>;                                                                         \
  template Tensor<T> encode_segments(Bound<T>&, const ModelConfig&, const Tensor<T>&);             \
  template Tensor<T> decode_embeddings(Bound<T>&, const ModelConfig&, const Tensor<T>&);           \
  template Array<T> positional_encoding<T>(std::size_t, std::size_t);                              \
  template Tensor<T> transformer_forward(Bound<T>&, const ModelConfig&, const Tensor<T>&,          \
                                         std::span<const std::uint8_t>, const ForwardOptions&);    \
  template PoolResult<T> attention_pool(Bound<T>&, const Tensor<T>&, std::span<const std::uint8_t>); \
  template Tensor<T> classify(Bound<T>&, const Tensor<T>&);                                        \
  template Tensor<T> reconstruct(Bound<T>&, const Tensor<T>&);                                     \
  template SequenceForward<T> forward_sequence(Bound<T>&, const ModelConfig&, const Tensor<T>&,    \
                                               std::span<const std::uint8_t>, const ForwardOptions&, \
                                               bool);                                              \
  template Tensor<T> baseline_cnn_forward(Bound<T>&, const ModelConfig&, const Tensor<T>&);

ECGSL_INSTANTIATE(float)
ECGSL_INSTANTIATE(double)

}  // namespace ecgsl
