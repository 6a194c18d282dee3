#include "h2dilr/run_config.hpp"

#include <functional>
#include <set>

#include "h2dilr/error.hpp"
#include "h2dilr/io.hpp"
#include "h2dilr/rng.hpp"

namespace h2dilr {
namespace {

struct Field {
  ConfigKey key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> sizes(const std::string& s, const std::string& what) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(s, ',')) out.push_back(parse_size(item, what));
  if (out.empty()) throw ValidationError(what + ": expected a comma-separated list");
  return out;
}

std::string b(bool v) { return v ? "true" : "false"; }

#define H2DILR_SIZE(KEY, HELP, EXPR)                                                                   \
  Field {                                                                                              \
    {KEY, HELP}, [](const RunConfig& c) { return std::to_string(c.EXPR); },                            \
        [](RunConfig& c, const std::string& v) { c.EXPR = parse_size(v, KEY); }                        \
  }
#define H2DILR_DOUBLE(KEY, HELP, EXPR)                                                                 \
  Field {                                                                                              \
    {KEY, HELP}, [](const RunConfig& c) { return format_double(c.EXPR); },                             \
        [](RunConfig& c, const std::string& v) { c.EXPR = parse_double(v, KEY); }                      \
  }
#define H2DILR_BOOL(KEY, HELP, EXPR)                                                                   \
  Field {                                                                                              \
    {KEY, HELP}, [](const RunConfig& c) { return b(c.EXPR); },                                         \
        [](RunConfig& c, const std::string& v) { c.EXPR = parse_bool(v, KEY); }                        \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {{"seed", "run seed; every random stream is derived from it"},
       [](const RunConfig& c) { return std::to_string(c.seed); },
       [](RunConfig& c, const std::string& v) { c.seed = parse_u64(v, "seed"); }},
      {{"seeds", "stage-2 repetitions, comma-separated"},
       [](const RunConfig& c) { return join(c.seeds); },
       [](RunConfig& c, const std::string& v) {
         c.seeds.clear();
         for (const auto& item : split_list(v, ',')) c.seeds.push_back(parse_u64(item, "seeds"));
       }},
      {{"out_dir", "directory for every artifact of the run"},
       [](const RunConfig& c) { return c.out_dir.string(); },
       [](RunConfig& c, const std::string& v) { c.out_dir = v; }},
      {{"data_dir", "dataset directory (empty: <out_dir>/data)"},
       [](const RunConfig& c) { return c.data_dir.string(); },
       [](RunConfig& c, const std::string& v) { c.data_dir = v; }},
      {{"checkpoint", "stage-1 checkpoint directory (empty: <out_dir>/pretrain)"},
       [](const RunConfig& c) { return c.checkpoint.string(); },
       [](RunConfig& c, const std::string& v) { c.checkpoint = v; }},

      H2DILR_SIZE("data.subjects", "number of subjects", data.subjects),
      {{"data.channels", "channel count per subject, comma-separated"},
       [](const RunConfig& c) { return join(c.data.channels); },
       [](RunConfig& c, const std::string& v) { c.data.channels = sizes(v, "data.channels"); }},
      H2DILR_SIZE("data.T", "samples per segment", data.T),
      H2DILR_SIZE("data.samples_per_tone", "trials per tone and subject", data.samples_per_tone),
      H2DILR_DOUBLE("data.snr_db", "signal-to-noise ratio of the shared component in dB", data.snr_db),
      H2DILR_DOUBLE("data.shared_gain", "gain of the tone-dependent sources", data.shared_gain),
      H2DILR_DOUBLE("data.signature_gain", "gain of the subject signature", data.signature_gain),
      H2DILR_BOOL("data.noise", "add sensor noise", data.noise),

      {{"model.paradigm", "h2d or unified"},
       [](const RunConfig& c) { return to_string(c.stage1.paradigm); },
       [](RunConfig& c, const std::string& v) { c.stage1.paradigm = parse_paradigm(v); }},
      H2DILR_SIZE("model.stem_channels", "encoder stem width", stage1.encoder.stem_channels),
      {{"model.block_channels", "encoder block widths, comma-separated"},
       [](const RunConfig& c) { return join(c.stage1.encoder.block_channels); },
       [](RunConfig& c, const std::string& v) { c.stage1.encoder.block_channels = sizes(v, "model.block_channels"); }},
      H2DILR_SIZE("model.kernel", "encoder convolution kernel", stage1.encoder.kernel),
      H2DILR_SIZE("model.stride", "encoder stem stride", stage1.encoder.stride),
      H2DILR_SIZE("model.latent_dim", "token dimension D", stage1.encoder.latent_dim),
      H2DILR_SIZE("model.patch", "classifier patch kernel and stride", decode.transformer.patch),
      H2DILR_SIZE("model.embed", "classifier embedding width", decode.transformer.embed),
      H2DILR_SIZE("model.ffn", "classifier feed-forward width", decode.transformer.ffn),
      H2DILR_SIZE("model.blocks", "classifier transformer blocks", decode.transformer.blocks),
      H2DILR_SIZE("model.heads", "classifier attention heads", decode.transformer.heads),
      H2DILR_DOUBLE("model.dropout", "classifier dropout", decode.transformer.dropout),
      H2DILR_BOOL("model.rel_pos_all_blocks", "relative position bias in every block, not just the first",
                  decode.transformer.rel_pos_all_blocks),
      H2DILR_SIZE("model.max_distance", "relative position clipping distance", decode.transformer.max_distance),

      H2DILR_DOUBLE("h2d.nu", "fraction of tokens routed to the shared book", stage1.h2d.nu),
      H2DILR_DOUBLE("h2d.alpha", "moving-average decay of the shared book", stage1.h2d.alpha),
      H2DILR_DOUBLE("h2d.beta", "commitment weight", stage1.h2d.beta),
      H2DILR_SIZE("h2d.K_private", "codes per private book; the shared book holds subjects * K_private",
                  stage1.h2d.K_private),
      H2DILR_SIZE("h2d.code_dim", "code dimension, must equal model.latent_dim", stage1.h2d.code_dim),
      H2DILR_DOUBLE("h2d.epsilon", "Laplace floor of the moving-average cluster sizes", stage1.h2d.epsilon),
      H2DILR_BOOL("h2d.reseed_dead", "re-seed unused shared codes", stage1.h2d.reseed_dead),

      H2DILR_SIZE("train.epochs", "stage-1 epochs", pretrain.epochs),
      H2DILR_SIZE("train.batch", "stage-1 batch size", pretrain.batch),
      H2DILR_DOUBLE("train.lr", "stage-1 base learning rate (cosine decay)", pretrain.lr),
      H2DILR_DOUBLE("train.beta1", "AdamW beta1", pretrain.adam.beta1),
      H2DILR_DOUBLE("train.beta2", "AdamW beta2", pretrain.adam.beta2),
      H2DILR_DOUBLE("train.eps", "AdamW epsilon", pretrain.adam.eps),
      H2DILR_DOUBLE("train.weight_decay", "AdamW decoupled weight decay", pretrain.adam.weight_decay),
      H2DILR_BOOL("train.include_val", "also pretrain on the validation split", pretrain.include_val),

      H2DILR_SIZE("decode.epochs", "stage-2 epochs", decode.train.epochs),
      H2DILR_SIZE("decode.batch", "stage-2 batch size", decode.train.batch),
      H2DILR_DOUBLE("decode.lr", "stage-2 base learning rate (cosine decay)", decode.train.lr),
      H2DILR_DOUBLE("decode.weight_decay", "stage-2 AdamW weight decay", decode.train.adam.weight_decay),
      {{"decode.label", "tone or subject"},
       [](const RunConfig& c) { return to_string(c.decode.label); },
       [](RunConfig& c, const std::string& v) { c.decode.label = parse_label_kind(v); }},
      {{"decode.representation", "full, homo_only or hetero_only"},
       [](const RunConfig& c) { return to_string(c.decode.representation); },
       [](RunConfig& c, const std::string& v) { c.decode.representation = parse_representation(v); }},
      H2DILR_BOOL("decode.per_subject", "one classifier per subject instead of a pooled one", decode.per_subject),
  };
  return table;
}

#undef H2DILR_SIZE
#undef H2DILR_DOUBLE
#undef H2DILR_BOOL

const Field& field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key.name == key) return f;
  }
  throw ValidationError("unknown config key '" + key + "'");
}

}  // namespace

RunConfig default_run_config() {
  RunConfig c;
  c.decode.train.epochs = 40;
  c.decode.train.lr = 3e-4;
  return c;
}

std::filesystem::path RunConfig::data_path() const { return data_dir.empty() ? out_dir / "data" : data_dir; }

std::filesystem::path RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? out_dir / "pretrain" : checkpoint;
}

GenSpec RunConfig::gen_spec() const {
  GenSpec s = data;
  s.seed = seed;
  return s;
}

std::uint64_t RunConfig::decoder_seed(std::uint64_t s) const { return derive_seed(seed, "probe/" + std::to_string(s)); }

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) { field(key).set(cfg, value); }

std::string get_key(const RunConfig& cfg, const std::string& key) { return field(key).get(cfg); }

void validate(const RunConfig& cfg) {
  cfg.data.validate();
  if (cfg.stage1.h2d.code_dim != cfg.stage1.encoder.latent_dim) {
    throw ValidationError("h2d.code_dim (" + std::to_string(cfg.stage1.h2d.code_dim) + ") must equal model.latent_dim (" +
                          std::to_string(cfg.stage1.encoder.latent_dim) + ")");
  }
  if (cfg.seeds.empty()) throw ValidationError("seeds: at least one stage-2 seed is required");
  if (std::set<std::uint64_t>(cfg.seeds.begin(), cfg.seeds.end()).size() != cfg.seeds.size()) {
    throw ValidationError("seeds: repeated entries");
  }
  if (cfg.out_dir.empty()) throw ValidationError("out_dir must not be empty");
  if (cfg.pretrain.epochs == 0 || cfg.pretrain.batch == 0) throw ValidationError("train.epochs and train.batch must be positive");
  if (cfg.decode.train.epochs == 0 || cfg.decode.train.batch == 0) {
    throw ValidationError("decode.epochs and decode.batch must be positive");
  }
  Stage1Config s = cfg.stage1;
  s.T = cfg.data.T;
  s.encoder.in_channels = cfg.data.channels.empty() ? 1 : cfg.data.channels[0];
  encoder_extents(s.encoder, s.T);  // throws when T cannot be tokenized
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key.name + "=" + f.get(cfg) + "\n";
  return out;
}

RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  if (!std::filesystem::is_regular_file(file)) throw ValidationError("config file not found: " + file.string());
  RunConfig cfg = default_run_config();
  for (const auto& [k, v] : parse_key_values(read_file(file), file.string())) set_key(cfg, k, v);

  std::map<std::string, std::string> merged;
  std::map<std::string, std::set<std::string>> seen;
  for (const auto& o : overrides) {
    auto eq = o.find('=');
    if (eq == std::string::npos) throw ValidationError("--set expects key=value, got '" + o + "'");
    std::string k = trim(o.substr(0, eq)), v = trim(o.substr(eq + 1));
    field(k);
    seen[k].insert(v);
    merged[k] = v;
  }
  std::string conflicts;
  for (const auto& [k, values] : seen) {
    if (values.size() < 2) continue;
    conflicts += "\n  " + k + ":";
    for (const auto& v : values) conflicts += " '" + v + "'";
  }
  if (!conflicts.empty()) throw ValidationError("conflicting overrides:" + conflicts);
  for (const auto& [k, v] : merged) set_key(cfg, k, v);
  cfg.stage1.T = cfg.data.T;
  validate(cfg);
  return cfg;
}

}  // namespace h2dilr
