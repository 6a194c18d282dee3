#include <algorithm>
#include <numeric>

#include "h2dilr/error.hpp"
#include "h2dilr/io.hpp"
#include "h2dilr/pipeline.hpp"

namespace h2dilr {
namespace {

constexpr const char* kFormat = "h2dilr-checkpoint/1";

std::string join(const std::vector<std::size_t>& v, const char* sep = ",") {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> parse_sizes(const std::string& s, char sep, const std::string& what) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(s, sep)) out.push_back(parse_size(item, what));
  return out;
}

void put_config(std::map<std::string, std::string>& kv, const Stage1Config& c) {
  kv["config.paradigm"] = to_string(c.paradigm);
  kv["config.T"] = std::to_string(c.T);
  kv["config.encoder.stem_channels"] = std::to_string(c.encoder.stem_channels);
  kv["config.encoder.block_channels"] = join(c.encoder.block_channels);
  kv["config.encoder.kernel"] = std::to_string(c.encoder.kernel);
  kv["config.encoder.stride"] = std::to_string(c.encoder.stride);
  kv["config.encoder.latent_dim"] = std::to_string(c.encoder.latent_dim);
  kv["config.h2d.nu"] = format_double(c.h2d.nu);
  kv["config.h2d.alpha"] = format_double(c.h2d.alpha);
  kv["config.h2d.beta"] = format_double(c.h2d.beta);
  kv["config.h2d.K_private"] = std::to_string(c.h2d.K_private);
  kv["config.h2d.epsilon"] = format_double(c.h2d.epsilon);
  kv["config.h2d.reseed_dead"] = c.h2d.reseed_dead ? "true" : "false";
}

const std::string& need(const std::map<std::string, std::string>& kv, const std::string& key,
                        const std::filesystem::path& file) {
  auto it = kv.find(key);
  if (it == kv.end()) throw IoError(file.string() + ": missing '" + key + "'");
  return it->second;
}

Stage1Config get_config(const std::map<std::string, std::string>& kv, const std::filesystem::path& f) {
  Stage1Config c;
  c.paradigm = parse_paradigm(need(kv, "config.paradigm", f));
  c.T = parse_size(need(kv, "config.T", f), "config.T");
  c.encoder.stem_channels = parse_size(need(kv, "config.encoder.stem_channels", f), "stem_channels");
  c.encoder.block_channels = parse_sizes(need(kv, "config.encoder.block_channels", f), ',', "block_channels");
  c.encoder.kernel = parse_size(need(kv, "config.encoder.kernel", f), "kernel");
  c.encoder.stride = parse_size(need(kv, "config.encoder.stride", f), "stride");
  c.encoder.latent_dim = parse_size(need(kv, "config.encoder.latent_dim", f), "latent_dim");
  c.h2d.nu = parse_double(need(kv, "config.h2d.nu", f), "nu");
  c.h2d.alpha = parse_double(need(kv, "config.h2d.alpha", f), "alpha");
  c.h2d.beta = parse_double(need(kv, "config.h2d.beta", f), "beta");
  c.h2d.K_private = parse_size(need(kv, "config.h2d.K_private", f), "K_private");
  c.h2d.epsilon = parse_double(need(kv, "config.h2d.epsilon", f), "epsilon");
  c.h2d.reseed_dead = parse_bool(need(kv, "config.h2d.reseed_dead", f), "reseed_dead");
  c.h2d.code_dim = c.encoder.latent_dim;
  return c;
}

std::string registry_text(const std::vector<std::size_t>& channels) {
  std::string s;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    s += (i ? ", " : "") + std::string("subject ") + std::to_string(i) + ": " + std::to_string(channels[i]) + " ch";
  }
  return "[" + s + "]";
}

}  // namespace

Checkpoint make_checkpoint(Stage1Model& model, std::uint64_t seed) {
  Checkpoint c;
  c.stage = "h2d";
  c.config = model.config();
  c.channels = model.channels();
  c.seed = seed;
  for (const auto& t : model.tensors()) c.tensors[t.name] = *t.value;
  const H2DState& st = model.codebooks();
  c.usage[st.shared().name()] = st.shared().usage();
  for (std::size_t i = 0; i < model.subjects(); ++i) c.usage[st.private_book(i).name()] = st.private_book(i).usage();
  return c;
}

void add_classifiers(Checkpoint& ckpt, std::vector<TransformerClassifier>& models, const DecoderConfig& cfg) {
  ckpt.stage = "decode";
  for (auto& m : models) {
    for (Parameter* p : m.parameters()) ckpt.tensors[p->name] = p->value;
  }
  const TransformerConfig& t = models.at(0).config();
  ckpt.extra["decode.label"] = to_string(cfg.label);
  ckpt.extra["decode.representation"] = to_string(cfg.representation);
  ckpt.extra["decode.per_subject"] = cfg.per_subject ? "true" : "false";
  ckpt.extra["decode.classifiers"] = std::to_string(models.size());
  ckpt.extra["decode.patch"] = std::to_string(t.patch);
  ckpt.extra["decode.embed"] = std::to_string(t.embed);
  ckpt.extra["decode.ffn"] = std::to_string(t.ffn);
  ckpt.extra["decode.blocks"] = std::to_string(t.blocks);
  ckpt.extra["decode.heads"] = std::to_string(t.heads);
  ckpt.extra["decode.classes"] = std::to_string(t.classes);
  ckpt.extra["decode.seed"] = std::to_string(cfg.train.seed);
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::map<std::string, std::string> kv;
  kv["format"] = kFormat;
  kv["stage"] = ckpt.stage;
  kv["seed"] = std::to_string(ckpt.seed);
  kv["subjects"] = std::to_string(ckpt.channels.size());
  kv["channels"] = join(ckpt.channels);
  put_config(kv, ckpt.config);
  for (const auto& [k, v] : ckpt.extra) kv["extra." + k] = v;
  for (const auto& [name, u] : ckpt.usage) {
    std::string s;
    for (std::size_t i = 0; i < u.size(); ++i) s += (i ? "," : "") + std::to_string(u[i]);
    kv["usage." + name] = s;
  }
  std::string blob;
  for (const auto& [name, t] : ckpt.tensors) {
    std::vector<float> f(t.data().begin(), t.data().end());
    kv["tensor." + name] = join(t.shape(), "x") + " " + std::to_string(blob.size()) + " " + std::to_string(t.size());
    append_f32_le(blob, f);
  }
  std::string manifest;
  for (const auto& [k, v] : kv) manifest += k + "=" + v + "\n";
  write_file(dir / "tensors.bin", blob);
  write_file(dir / "manifest", manifest);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  auto mf = dir / "manifest";
  if (!std::filesystem::exists(mf)) throw ValidationError("checkpoint manifest not found: " + mf.string());
  auto kv = parse_key_values(read_file(mf), mf.string());
  if (need(kv, "format", mf) != kFormat) throw IoError(mf.string() + ": unsupported format '" + kv["format"] + "'");
  Checkpoint c;
  c.stage = need(kv, "stage", mf);
  c.seed = parse_u64(need(kv, "seed", mf), "seed");
  c.channels = parse_sizes(need(kv, "channels", mf), ',', "channels");
  if (c.channels.size() != parse_size(need(kv, "subjects", mf), "subjects")) {
    throw IoError(mf.string() + ": subject count does not match the channel registry");
  }
  c.config = get_config(kv, mf);

  std::string blob = read_file(dir / "tensors.bin");
  std::size_t expected = 0;
  for (const auto& [key, value] : kv) {
    if (key.rfind("extra.", 0) == 0) {
      c.extra[key.substr(6)] = value;
    } else if (key.rfind("usage.", 0) == 0) {
      std::vector<std::uint64_t> u;
      for (const auto& item : split_list(value, ',')) u.push_back(parse_u64(item, key));
      c.usage[key.substr(6)] = std::move(u);
    } else if (key.rfind("tensor.", 0) == 0) {
      std::string name = key.substr(7);
      auto parts = split_list(value, ' ');
      if (parts.size() != 3) throw IoError(mf.string() + ": malformed entry for tensor '" + name + "'");
      Shape shape = parse_sizes(parts[0], 'x', name);
      std::size_t offset = parse_size(parts[1], name), count = parse_size(parts[2], name);
      std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
      if (n != count) throw IoError("tensor '" + name + "': shape does not match its element count");
      if (offset + count * 4 > blob.size()) {
        throw IoError("tensor '" + name + "': blob holds " + std::to_string(blob.size()) + " bytes, manifest needs " +
                      std::to_string(offset + count * 4));
      }
      auto f = decode_f32_le(blob, offset, count);
      c.tensors[name] = Tensor(shape, std::vector<double>(f.begin(), f.end()));
      expected += count * 4;
    }
  }
  if (expected != blob.size()) {
    throw IoError((dir / "tensors.bin").string() + ": " + std::to_string(blob.size()) + " bytes, manifest lists " +
                  std::to_string(expected));
  }
  return c;
}

Stage1Model restore_stage1(const Checkpoint& ckpt, std::optional<std::vector<std::size_t>> expected_channels,
                           bool keep_trainable) {
  if (expected_channels && *expected_channels != ckpt.channels) {
    throw ValidationError("channel registry mismatch: checkpoint " + registry_text(ckpt.channels) + " vs data " +
                          registry_text(*expected_channels));
  }
  Stage1Model model(ckpt.config, ckpt.channels, ckpt.seed);
  for (const auto& t : model.tensors()) {
    auto it = ckpt.tensors.find(t.name);
    if (it == ckpt.tensors.end()) throw IoError("checkpoint lacks tensor '" + t.name + "'");
    if (it->second.shape() != t.value->shape()) {
      throw IoError("tensor '" + t.name + "': checkpoint shape " + shape_str(it->second.shape()) + " vs model " +
                    shape_str(t.value->shape()));
    }
    *t.value = it->second;
  }
  H2DState& st = model.codebooks();
  auto restore_usage = [&](Codebook& cb) {
    cb.reset_usage();
    auto it = ckpt.usage.find(cb.name());
    if (it == ckpt.usage.end()) return;
    if (it->second.size() != cb.size()) throw IoError("usage counts for '" + cb.name() + "' have the wrong length");
    for (std::size_t k = 0; k < cb.size(); ++k) cb.record_usage(k, it->second[k]);
  };
  restore_usage(st.shared());
  for (std::size_t i = 0; i < model.subjects(); ++i) restore_usage(st.private_book(i));
  if (!keep_trainable) model.freeze();
  return model;
}

}  // namespace h2dilr
