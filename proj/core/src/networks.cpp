#include "h2dilr/networks.hpp"

#include <algorithm>
#include <cmath>

#include "h2dilr/error.hpp"

namespace h2dilr {
namespace {

constexpr double kReluGain = 2.0;
constexpr double kLinearGain = 1.0;

Parameter make_param(const std::string& name, Shape shape, double fill = 0.0) {
  return Parameter{name, Tensor(std::move(shape), fill), true};
}

std::size_t pad_left_for(std::size_t kernel, std::size_t stride) { return (kernel - stride) / 2; }
std::size_t pad_right_for(std::size_t kernel, std::size_t stride) {
  return (kernel - stride) - pad_left_for(kernel, stride);
}

ConvLayer conv_layer(const std::string& name, std::size_t ci, std::size_t co, std::size_t k, std::size_t stride,
                     double gain, std::mt19937_64& rng) {
  ConvLayer l{make_param(name + ".w", {co, ci, k}), make_param(name + ".b", {co}), stride,
              pad_left_for(k, stride), pad_right_for(k, stride), false};
  init_normal_fan_in(l.weight, ci * k, gain, rng);
  return l;
}

ConvLayer conv_transpose_layer(const std::string& name, std::size_t ci, std::size_t co, std::size_t k,
                               std::size_t stride, double gain, std::mt19937_64& rng) {
  ConvLayer l{make_param(name + ".w", {ci, co, k}), make_param(name + ".b", {co}), stride,
              pad_left_for(k, stride), pad_right_for(k, stride), true};
  init_normal_fan_in(l.weight, std::max<std::size_t>(1, ci * k / stride), gain, rng);
  return l;
}

void validate(const EncoderConfig& cfg) {
  if (cfg.in_channels == 0) throw ValidationError("encoder: in_channels must be positive");
  if (cfg.stem_channels == 0 || cfg.latent_dim == 0) throw ValidationError("encoder: channel counts must be positive");
  for (std::size_t c : cfg.block_channels) {
    if (c == 0) throw ValidationError("encoder: block channel counts must be positive");
  }
  if (cfg.stride == 0 || cfg.kernel < cfg.stride) throw ValidationError("encoder: kernel must be >= stride >= 1");
}

Conv1dOptions conv_opts(const ConvLayer& l) { return {l.stride, l.pad_left, l.pad_right}; }

void collect(std::vector<ConvLayer>& layers, std::vector<Parameter*>& out) {
  for (auto& l : layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
}

}  // namespace

void init_normal_fan_in(Parameter& p, std::size_t fan_in, double gain, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
  for (auto& v : p.value.data()) v = n(rng);
}

std::size_t count_parameters(const std::vector<const Parameter*>& params) {
  std::size_t n = 0;
  for (const Parameter* p : params) n += p->value.size();
  return n;
}

std::vector<std::size_t> encoder_extents(const EncoderConfig& cfg, std::size_t T) {
  validate(cfg);
  std::vector<std::size_t> ext{T};
  auto conv = [&](std::size_t len, std::size_t stride) {
    Conv1dOptions o{stride, pad_left_for(cfg.kernel, stride), pad_right_for(cfg.kernel, stride)};
    if (len + o.pad_left + o.pad_right < cfg.kernel) return std::size_t{0};
    return conv1d_out_len(len, cfg.kernel, o);
  };
  std::size_t len = conv(T, cfg.stride);
  ext.push_back(len);
  for (std::size_t b = 0; b < cfg.block_channels.size(); ++b) {
    len = conv(len, 1) / 2;
    ext.push_back(len);
  }
  if (conv(len, 1) != len || len == 0) {
    throw ValidationError("encoder: segment length " + std::to_string(T) + " is too short for the receptive field");
  }
  return ext;
}

Encoder::Encoder(const EncoderConfig& cfg, const std::string& prefix, std::mt19937_64& rng) : cfg_(cfg) {
  validate(cfg);
  layers_.push_back(conv_layer(prefix + "/stem", cfg.in_channels, cfg.stem_channels, cfg.kernel, cfg.stride,
                               kReluGain, rng));
  std::size_t ci = cfg.stem_channels;
  for (std::size_t b = 0; b < cfg.block_channels.size(); ++b) {
    layers_.push_back(conv_layer(prefix + "/block" + std::to_string(b), ci, cfg.block_channels[b], cfg.kernel, 1,
                                 kReluGain, rng));
    ci = cfg.block_channels[b];
  }
  layers_.push_back(conv_layer(prefix + "/latent", ci, cfg.latent_dim, cfg.kernel, 1, kLinearGain, rng));
}

std::size_t Encoder::token_count(std::size_t T) const { return encoder_extents(cfg_, T).back(); }

Var Encoder::forward(Graph& g, Var x) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[2] != cfg_.in_channels) {
    throw ValidationError("encoder: expected input [B, T, " + std::to_string(cfg_.in_channels) + "], got " +
                          shape_str(s));
  }
  token_count(s[1]);
  Var h = ops::transpose(x);  // [B, C, T]
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    ConvLayer& l = layers_[i];
    h = ops::conv1d(h, g.parameter(l.weight), g.parameter(l.bias), conv_opts(l));
    if (i + 1 < layers_.size()) h = ops::relu(h);
    if (i >= 1 && i + 1 < layers_.size()) h = ops::avg_pool1d(h);
  }
  return ops::transpose(h);  // [B, L, D]
}

std::vector<Parameter*> Encoder::parameters() {
  std::vector<Parameter*> out;
  collect(layers_, out);
  return out;
}

std::vector<const Parameter*> Encoder::parameters() const {
  auto ps = const_cast<Encoder*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

std::size_t Encoder::parameter_count() const { return count_parameters(parameters()); }

Decoder::Decoder(const EncoderConfig& cfg, const std::string& prefix, std::mt19937_64& rng) : cfg_(cfg) {
  validate(cfg);
  const auto& bc = cfg.block_channels;
  std::size_t top = bc.empty() ? cfg.stem_channels : bc.back();
  layers_.push_back(conv_transpose_layer(prefix + "/latent", cfg.latent_dim, top, cfg.kernel, 1, kReluGain, rng));
  for (std::size_t b = bc.size(); b-- > 0;) {
    std::size_t co = b == 0 ? cfg.stem_channels : bc[b - 1];
    layers_.push_back(conv_transpose_layer(prefix + "/block" + std::to_string(b), bc[b], co, cfg.kernel, 2,
                                           kReluGain, rng));
  }
  layers_.push_back(conv_transpose_layer(prefix + "/stem", cfg.stem_channels, cfg.in_channels, cfg.kernel,
                                         cfg.stride, kLinearGain, rng));
}

Var Decoder::forward(Graph& g, Var z_hat, std::size_t T) {
  std::vector<std::size_t> ext = encoder_extents(cfg_, T);
  const Shape& s = z_hat.shape();
  if (s.size() != 3 || s[1] != ext.back() || s[2] != cfg_.latent_dim) {
    throw ShapeError("decoder: expected [B, " + std::to_string(ext.back()) + ", " + std::to_string(cfg_.latent_dim) +
                     "] for T=" + std::to_string(T) + ", got " + shape_str(s));
  }
  // Targets: L (latent mirror), then each block input extent, then T.
  std::vector<std::size_t> targets{ext.back()};
  for (std::size_t i = ext.size() - 1; i-- > 0;) targets.push_back(ext[i]);

  Var h = ops::transpose(z_hat);  // [B, D, L]
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    ConvLayer& l = layers_[i];
    std::size_t len = h.shape()[2];
    ConvTranspose1dOptions o{l.stride, l.pad_left, l.pad_right, 0};
    std::size_t natural = conv_transpose1d_out_len(len, cfg_.kernel, o);
    if (targets[i] < natural || targets[i] - natural >= l.stride) {
      throw ShapeError("decoder: cannot map extent " + std::to_string(len) + " to " + std::to_string(targets[i]));
    }
    o.output_padding = targets[i] - natural;
    h = ops::conv_transpose1d(h, g.parameter(l.weight), g.parameter(l.bias), o);
    if (i + 1 < layers_.size()) h = ops::relu(h);
  }
  return ops::transpose(h);  // [B, T, C]
}

std::vector<Parameter*> Decoder::parameters() {
  std::vector<Parameter*> out;
  collect(layers_, out);
  return out;
}

std::vector<const Parameter*> Decoder::parameters() const {
  auto ps = const_cast<Decoder*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

std::size_t Decoder::parameter_count() const { return count_parameters(parameters()); }

TransformerClassifier::TransformerClassifier(const TransformerConfig& cfg, const std::string& prefix,
                                             std::mt19937_64& rng)
    : cfg_(cfg) {
  if (cfg.patch == 0 || cfg.embed == 0 || cfg.ffn == 0 || cfg.classes == 0 || cfg.in_dim == 0) {
    throw ValidationError("transformer: sizes must be positive");
  }
  if (cfg.heads == 0 || cfg.embed % cfg.heads != 0) {
    throw ValidationError("transformer: embed dim " + std::to_string(cfg.embed) + " is not divisible by " +
                          std::to_string(cfg.heads) + " heads");
  }
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) throw ValidationError("transformer: dropout must lie in [0, 1)");
  const std::size_t E = cfg.embed, F = cfg.ffn;
  patch_w_ = make_param(prefix + "/patch.w", {E, cfg.in_dim, cfg.patch});
  patch_b_ = make_param(prefix + "/patch.b", {E});
  init_normal_fan_in(patch_w_, cfg.in_dim * cfg.patch, kLinearGain, rng);
  blocks_.reserve(cfg.blocks);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    std::string p = prefix + "/block" + std::to_string(b);
    Block blk{make_param(p + "/ln1.g", {E}, 1.0), make_param(p + "/ln1.b", {E}),
              make_param(p + "/q.w", {E, E}),     make_param(p + "/q.b", {E}),
              make_param(p + "/k.w", {E, E}),     make_param(p + "/k.b", {E}),
              make_param(p + "/v.w", {E, E}),     make_param(p + "/v.b", {E}),
              make_param(p + "/o.w", {E, E}),     make_param(p + "/o.b", {E}),
              make_param(p + "/ln2.g", {E}, 1.0), make_param(p + "/ln2.b", {E}),
              make_param(p + "/ffn1.w", {F, E}),  make_param(p + "/ffn1.b", {F}),
              make_param(p + "/ffn2.w", {E, F}),  make_param(p + "/ffn2.b", {E}),
              std::nullopt};
    for (Parameter* w : {&blk.wq, &blk.wk, &blk.wv, &blk.wo, &blk.w1}) init_normal_fan_in(*w, E, kLinearGain, rng);
    init_normal_fan_in(blk.w2, F, kLinearGain, rng);
    if (b == 0 || cfg.rel_pos_all_blocks) blk.rel_pos = make_param(p + "/rel_pos", {2 * cfg.max_distance + 1, cfg.heads});
    blocks_.push_back(std::move(blk));
  }
  head_w_ = make_param(prefix + "/head.w", {cfg.classes, E});
  head_b_ = make_param(prefix + "/head.b", {cfg.classes});
  init_normal_fan_in(head_w_, E, kLinearGain, rng);
}

std::size_t TransformerClassifier::patch_count(std::size_t L) const {
  if (L < cfg_.patch) {
    throw ValidationError("transformer: " + std::to_string(L) + " tokens cannot fill a patch of " +
                          std::to_string(cfg_.patch));
  }
  return L / cfg_.patch;
}

namespace {

std::vector<std::size_t> relative_buckets(std::size_t P, std::size_t max_distance) {
  std::vector<std::size_t> idx(P * P);
  long R = static_cast<long>(max_distance);
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t q = 0; q < P; ++q) {
      long off = std::clamp(static_cast<long>(q) - static_cast<long>(p), -R, R);
      idx[p * P + q] = static_cast<std::size_t>(off + R);
    }
  }
  return idx;
}

Var dropout(Graph& g, Var x, double rate, std::mt19937_64* rng) {
  if (!rng || rate <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  Tensor mask(x.shape());
  double scale = 1.0 / (1.0 - rate);
  for (auto& v : mask.data()) v = keep(*rng) ? scale : 0.0;
  return ops::mul(x, g.constant(std::move(mask)));
}

}  // namespace

Tensor TransformerClassifier::position_bias(std::size_t block, std::size_t P) const {
  const Block& blk = blocks_.at(block);
  Tensor out({cfg_.heads, P, P});
  if (!blk.rel_pos) return out;
  auto idx = relative_buckets(P, cfg_.max_distance);
  for (std::size_t h = 0; h < cfg_.heads; ++h) {
    for (std::size_t i = 0; i < P * P; ++i) out[h * P * P + i] = blk.rel_pos->value[idx[i] * cfg_.heads + h];
  }
  return out;
}

Var TransformerClassifier::forward(Graph& g, Var tokens, std::mt19937_64* dropout_rng) {
  const Shape& s = tokens.shape();
  if (s.size() != 3 || s[2] != cfg_.in_dim) {
    throw ShapeError("transformer: expected tokens [B, L, " + std::to_string(cfg_.in_dim) + "], got " + shape_str(s));
  }
  std::size_t P = patch_count(s[1]);
  auto param = [&](Parameter& p) { return g.parameter(p); };

  Var h = ops::conv1d(ops::transpose(tokens), param(patch_w_), param(patch_b_), {cfg_.patch, 0, 0});
  h = ops::transpose(h);  // [B, P, E]
  auto buckets = relative_buckets(P, cfg_.max_distance);
  for (Block& blk : blocks_) {
    std::optional<Var> bias;
    if (blk.rel_pos) {
      Var rows = ops::gather_rows(param(*blk.rel_pos), buckets);  // [P*P, H]
      bias = ops::reshape(ops::transpose(rows), {cfg_.heads, P, P});
    }
    Var a = ops::layer_norm(h, param(blk.ln1_g), param(blk.ln1_b));
    Var q = ops::linear(a, param(blk.wq), param(blk.bq));
    Var k = ops::linear(a, param(blk.wk), param(blk.bk));
    Var v = ops::linear(a, param(blk.wv), param(blk.bv));
    Var att = ops::linear(ops::attention(q, k, v, cfg_.heads, bias), param(blk.wo), param(blk.bo));
    h = ops::add(h, dropout(g, att, cfg_.dropout, dropout_rng));
    Var f = ops::layer_norm(h, param(blk.ln2_g), param(blk.ln2_b));
    f = ops::linear(ops::gelu(ops::linear(f, param(blk.w1), param(blk.b1))), param(blk.w2), param(blk.b2));
    h = ops::add(h, dropout(g, f, cfg_.dropout, dropout_rng));
  }
  Var pooled = ops::mean_tokens(h);  // [B, E]
  return ops::linear(pooled, param(head_w_), param(head_b_));
}

std::vector<Parameter*> TransformerClassifier::parameters() {
  std::vector<Parameter*> out{&patch_w_, &patch_b_};
  for (Block& b : blocks_) {
    for (Parameter* p : {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.ln2_g,
                         &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2}) {
      out.push_back(p);
    }
    if (b.rel_pos) out.push_back(&*b.rel_pos);
  }
  out.push_back(&head_w_);
  out.push_back(&head_b_);
  return out;
}

std::vector<const Parameter*> TransformerClassifier::parameters() const {
  auto ps = const_cast<TransformerClassifier*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

std::size_t TransformerClassifier::parameter_count() const { return count_parameters(parameters()); }

}  // namespace h2dilr
