#include "h2dilr/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "h2dilr/error.hpp"
#include "h2dilr/eval_probe.hpp"
#include "h2dilr/io.hpp"
#include "h2dilr/rng.hpp"

namespace h2dilr {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::size_t kEvalChunk = 64;

H2DOptions effective_h2d(const Stage1Config& cfg) {
  H2DOptions o = cfg.h2d;
  o.code_dim = cfg.encoder.latent_dim;
  if (cfg.paradigm == Paradigm::unified) o.nu = 1.0;
  return o;
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

std::string to_string(Paradigm p) { return p == Paradigm::h2d ? "h2d" : "unified"; }

Paradigm parse_paradigm(const std::string& s) {
  if (s == "h2d") return Paradigm::h2d;
  if (s == "unified") return Paradigm::unified;
  throw ValidationError("unknown paradigm '" + s + "' (expected h2d or unified)");
}

std::string to_string(LabelKind k) { return k == LabelKind::tone ? "tone" : "subject"; }

std::string to_string(Representation r) {
  switch (r) {
    case Representation::full: return "full";
    case Representation::homo_only: return "homo_only";
    default: return "hetero_only";
  }
}

LabelKind parse_label_kind(const std::string& s) {
  if (s == "tone") return LabelKind::tone;
  if (s == "subject") return LabelKind::subject;
  throw ValidationError("unknown label kind '" + s + "' (expected tone or subject)");
}

Representation parse_representation(const std::string& s) {
  if (s == "full") return Representation::full;
  if (s == "homo_only") return Representation::homo_only;
  if (s == "hetero_only") return Representation::hetero_only;
  throw ValidationError("unknown representation '" + s + "' (expected full, homo_only or hetero_only)");
}

Stage1Model::Stage1Model(const Stage1Config& cfg, std::vector<std::size_t> channels, std::uint64_t seed)
    : cfg_(cfg), channels_(std::move(channels)), state_(channels_.size(), effective_h2d(cfg), seed) {
  cfg_.h2d = effective_h2d(cfg);
  encoders_.reserve(channels_.size());
  decoders_.reserve(channels_.size());
  for (std::size_t i = 0; i < channels_.size(); ++i) {
    EncoderConfig ec = cfg_.encoder;
    ec.in_channels = channels_[i];
    auto erng = make_stream(seed, "init/encoder/" + std::to_string(i));
    encoders_.emplace_back(ec, "enc/" + std::to_string(i), erng);
    auto drng = make_stream(seed, "init/decoder/" + std::to_string(i));
    decoders_.emplace_back(ec, "dec/" + std::to_string(i), drng);
  }
  token_count();  // rejects a T the encoder cannot tokenize
}

std::size_t Stage1Model::token_count() const { return encoders_.at(0).token_count(cfg_.T); }

Encoder& Stage1Model::encoder(std::size_t subject) {
  if (subject >= encoders_.size()) throw ValidationError("unregistered subject " + std::to_string(subject));
  return encoders_[subject];
}

const Encoder& Stage1Model::encoder(std::size_t subject) const {
  return const_cast<Stage1Model*>(this)->encoder(subject);
}

Decoder& Stage1Model::decoder(std::size_t subject) {
  if (subject >= decoders_.size()) throw ValidationError("unregistered subject " + std::to_string(subject));
  return decoders_[subject];
}

void Stage1Model::check_subject(std::size_t subject, const Tensor& x) const {
  if (subject >= channels_.size()) {
    throw ValidationError("unregistered subject " + std::to_string(subject) + " (registry has " +
                          std::to_string(channels_.size()) + ")");
  }
  if (x.rank() != 3 || x.dim(1) != cfg_.T || x.dim(2) != channels_[subject]) {
    throw ShapeError("subject " + std::to_string(subject) + " expects [B, " + std::to_string(cfg_.T) + ", " +
                     std::to_string(channels_[subject]) + "], got " + shape_str(x.shape()));
  }
}

std::vector<Parameter*> Stage1Model::trainable(std::size_t subject) {
  std::vector<Parameter*> ps = encoder(subject).parameters();
  auto dp = decoder(subject).parameters();
  ps.insert(ps.end(), dp.begin(), dp.end());
  if (cfg_.paradigm == Paradigm::h2d) ps.push_back(&state_.private_book(subject).embeddings());
  return ps;
}

StepLosses Stage1Model::train_step(const Tensor& x, std::size_t subject, AdamW& opt, double lr) {
  if (frozen_) throw Error("train_step: model is frozen");
  check_subject(subject, x);
  Graph g;
  Var xv = g.constant(x);
  Var z = encoders_[subject].forward(g, xv);
  bool unified = cfg_.paradigm == Paradigm::unified;
  QuantizedTokens q = unified ? unified_quantize(g, z, state_.shared()) : h2d_quantize(g, z, state_, subject);
  Var x_hat = decoders_[subject].forward(g, q.z_hat, cfg_.T);
  H2DLossTerms loss = unified ? unified_loss(g, xv, x_hat, z, q.codes, state_.beta())
                              : h2d_loss(g, xv, x_hat, z, q.codes, q.routing, state_.beta());
  Gradients grads = g.backward(loss.total);
  opt.step(trainable(subject), grads, lr);

  const Tensor& zv = z.value();
  SharedRows rows = shared_rows(zv.reshaped({zv.dim(0) * zv.dim(1), zv.dim(2)}), q.routing);
  if (!rows.indices.empty()) ema_update(state_.shared(), rows.rows, rows.indices, state_.ema_options());

  return {subject, loss.total.value().item(), loss.rec.value().item(), loss.pri.value().item(),
          loss.commit.value().item()};
}

Stage1Model::Tokens Stage1Model::tokens(const Tensor& x, std::size_t subject) {
  check_subject(subject, x);
  Graph g;
  Var z = encoders_[subject].forward(g, g.constant(x));
  const Tensor& zv = z.value();
  std::size_t B = zv.dim(0), L = zv.dim(1), D = zv.dim(2);
  Tokens out;
  out.z_hat = Tensor({B, L, D});
  for (std::size_t b = 0; b < B; ++b) {
    Tensor zb({L, D}, std::vector<double>(zv.ptr() + b * L * D, zv.ptr() + (b + 1) * L * D));
    TokenRouting r = route_tokens(zb, state_, subject);
    Tensor codes = routed_codes(r, state_, subject);
    std::copy(codes.ptr(), codes.ptr() + L * D, out.z_hat.ptr() + b * L * D);
    out.routing.push_back(std::move(r));
  }
  return out;
}

StepLosses Stage1Model::evaluate(const Tensor& x, std::size_t subject) {
  check_subject(subject, x);
  Graph g;
  Var xv = g.constant(x);
  Var z = encoders_[subject].forward(g, xv);
  const Tensor& zv = z.value();
  std::size_t B = zv.dim(0), L = zv.dim(1), D = zv.dim(2);
  Tensor codes({B, L, D});
  std::vector<TokenRouting> routing;
  for (std::size_t b = 0; b < B; ++b) {
    Tensor zb({L, D}, std::vector<double>(zv.ptr() + b * L * D, zv.ptr() + (b + 1) * L * D));
    TokenRouting r = route_tokens(zb, state_, subject);
    Tensor c = routed_codes(r, state_, subject);
    std::copy(c.ptr(), c.ptr() + L * D, codes.ptr() + b * L * D);
    routing.push_back(std::move(r));
  }
  Var code_rows = g.constant(std::move(codes));
  Var x_hat = decoders_[subject].forward(g, code_rows, cfg_.T);
  H2DLossTerms loss = cfg_.paradigm == Paradigm::unified
                          ? unified_loss(g, xv, x_hat, z, code_rows, state_.beta())
                          : h2d_loss(g, xv, x_hat, z, code_rows, routing, state_.beta());
  return {subject, loss.total.value().item(), loss.rec.value().item(), loss.pri.value().item(),
          loss.commit.value().item()};
}

Tensor Stage1Model::reconstruct(const Tensor& x, std::size_t subject) {
  Tokens t = tokens(x, subject);
  Graph g;
  return decoders_[subject].forward(g, g.constant(std::move(t.z_hat)), cfg_.T).value();
}

std::vector<Stage1Model::NamedTensor> Stage1Model::tensors() {
  std::vector<NamedTensor> out;
  auto add = [&](const std::vector<Parameter*>& ps) {
    for (Parameter* p : ps) out.push_back({p->name, &p->value});
  };
  for (auto& e : encoders_) add(e.parameters());
  for (auto& d : decoders_) add(d.parameters());
  Codebook& shared = state_.shared();
  out.push_back({shared.name(), &shared.embeddings().value});
  out.push_back({shared.name() + ".ema_size", &shared.ema_cluster_size()});
  out.push_back({shared.name() + ".ema_sum", &shared.ema_embed_sum()});
  for (std::size_t i = 0; i < subjects(); ++i) {
    Codebook& p = state_.private_book(i);
    out.push_back({p.name(), &p.embeddings().value});
  }
  return out;
}

void Stage1Model::freeze() {
  for (std::size_t i = 0; i < subjects(); ++i) {
    for (Parameter* p : trainable(i)) p->requires_grad = false;
    state_.private_book(i).embeddings().requires_grad = false;
  }
  state_.shared().embeddings().requires_grad = false;
  frozen_ = true;
}

Corpus make_corpus(std::vector<SubjectDataset> data, std::uint64_t split_seed) {
  if (data.empty()) throw ValidationError("corpus: no subject datasets");
  Corpus c;
  for (const auto& d : data) c.splits.push_back(split(d, split_seed));
  c.subjects = std::move(data);
  return c;
}

std::vector<std::vector<std::vector<std::size_t>>> round_robin_schedule(const Corpus& corpus, std::size_t batch,
                                                                        bool include_val, std::uint64_t seed,
                                                                        std::size_t epoch) {
  if (batch == 0) throw ValidationError("batch size must be positive");
  std::vector<std::vector<std::vector<std::size_t>>> out(corpus.subjects.size());
  std::size_t longest = 0;
  for (std::size_t i = 0; i < corpus.subjects.size(); ++i) {
    std::vector<std::size_t> idx = corpus.splits[i].train;
    if (include_val) idx.insert(idx.end(), corpus.splits[i].val.begin(), corpus.splits[i].val.end());
    if (idx.empty()) throw ValidationError("subject " + std::to_string(i) + " has no training samples");
    auto rng = make_stream(seed, "shuffle/stage1/" + std::to_string(epoch) + "/" + std::to_string(i));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t b = 0; b < idx.size(); b += batch) {
      out[i].emplace_back(idx.begin() + b, idx.begin() + std::min(idx.size(), b + batch));
    }
    longest = std::max(longest, out[i].size());
  }
  for (auto& batches : out) {
    std::size_t own = batches.size();
    for (std::size_t r = own; r < longest; ++r) batches.push_back(batches[r % own]);
  }
  return out;
}

PretrainResult pretrain_h2d(Stage1Model& model, const Corpus& corpus, const TrainConfig& train,
                            const std::function<void(const EpochLog&)>& progress) {
  if (corpus.subjects.empty()) throw ValidationError("pretrain: empty dataset");
  if (corpus.subjects.size() != model.subjects()) {
    throw ValidationError("pretrain: corpus has " + std::to_string(corpus.subjects.size()) + " subjects, model has " +
                          std::to_string(model.subjects()));
  }
  if (train.epochs == 0) throw ValidationError("pretrain: epochs must be positive");
  const std::size_t m = model.subjects();
  AdamW opt(train.adam);
  std::size_t per_subject = round_robin_schedule(corpus, train.batch, train.include_val, train.seed, 0)[0].size();
  std::size_t total_steps = train.epochs * per_subject * m;
  std::size_t step = 0;
  PretrainResult result;

  auto usage_snapshot = [&] {
    std::vector<std::vector<std::uint64_t>> u{model.codebooks().shared().usage()};
    for (std::size_t i = 0; i < m; ++i) u.push_back(model.codebooks().private_book(i).usage());
    return u;
  };
  auto delta_perplexity = [](const std::vector<std::uint64_t>& now, const std::vector<std::uint64_t>& before) {
    std::vector<std::uint64_t> d(now.size());
    bool any = false;
    for (std::size_t k = 0; k < now.size(); ++k) {
      d[k] = now[k] - before[k];
      any = any || d[k] > 0;
    }
    return any ? perplexity(d) : kNaN;
  };

  for (std::size_t epoch = 1; epoch <= train.epochs; ++epoch) {
    auto schedule = round_robin_schedule(corpus, train.batch, train.include_val, train.seed, epoch - 1);
    auto before = usage_snapshot();
    EpochLog row;
    row.epoch = epoch;
    row.split = "train";
    row.acc = kNaN;
    std::size_t n_steps = 0;
    for (std::size_t r = 0; r < per_subject; ++r) {
      for (std::size_t i = 0; i < m; ++i) {
        Tensor x = corpus.subjects[i].batch(schedule[i][r]);
        row.lr = cosine_lr(step, total_steps, train.lr);
        StepLosses s = model.train_step(x, i, opt, row.lr);
        result.steps.push_back(s);
        row.loss_total += s.total;
        row.loss_rec += s.rec;
        row.loss_pri += s.pri;
        row.loss_commit += s.commit;
        ++n_steps;
        ++step;
      }
    }
    row.loss_total /= static_cast<double>(n_steps);
    row.loss_rec /= static_cast<double>(n_steps);
    row.loss_pri /= static_cast<double>(n_steps);
    row.loss_commit /= static_cast<double>(n_steps);
    auto after = usage_snapshot();
    row.perplexity_shared = delta_perplexity(after[0], before[0]);
    for (std::size_t i = 0; i < m; ++i) row.perplexity_private.push_back(delta_perplexity(after[i + 1], before[i + 1]));
    result.log.push_back(row);
    if (progress) progress(row);

    if (!train.include_val) {
      EpochLog val;
      val.epoch = epoch;
      val.split = "val";
      val.acc = kNaN;
      val.perplexity_shared = kNaN;
      val.perplexity_private.assign(m, kNaN);
      val.lr = row.lr;
      std::size_t count = 0;
      for (std::size_t i = 0; i < m; ++i) {
        const auto& idx = corpus.splits[i].val;
        for (std::size_t b = 0; b < idx.size(); b += kEvalChunk) {
          std::vector<std::size_t> chunk(idx.begin() + b, idx.begin() + std::min(idx.size(), b + kEvalChunk));
          StepLosses s = model.evaluate(corpus.subjects[i].batch(chunk), i);
          auto w = static_cast<double>(chunk.size());
          val.loss_total += w * s.total;
          val.loss_rec += w * s.rec;
          val.loss_pri += w * s.pri;
          val.loss_commit += w * s.commit;
          count += chunk.size();
        }
      }
      if (count > 0) {
        auto n = static_cast<double>(count);
        val.loss_total /= n;
        val.loss_rec /= n;
        val.loss_pri /= n;
        val.loss_commit /= n;
        result.log.push_back(val);
        if (progress) progress(val);
      }
    }
  }
  return result;
}

Features extract_features(Stage1Model& model, const Corpus& corpus) {
  if (corpus.subjects.size() != model.subjects()) {
    throw ValidationError("extract_features: corpus has " + std::to_string(corpus.subjects.size()) +
                          " subjects, model has " + std::to_string(model.subjects()));
  }
  Features f;
  std::size_t L = model.token_count(), D = model.config().encoder.latent_dim;
  for (std::size_t i = 0; i < model.subjects(); ++i) {
    const SubjectDataset& d = corpus.subjects[i];
    Tensor all({d.size(), L, D});
    std::vector<std::uint8_t> mask;
    std::vector<std::size_t> sidx, pidx;
    for (std::size_t b = 0; b < d.size(); b += kEvalChunk) {
      std::vector<std::size_t> chunk(std::min(kEvalChunk, d.size() - b));
      std::iota(chunk.begin(), chunk.end(), b);
      Stage1Model::Tokens t = model.tokens(d.batch(chunk), i);
      std::copy(t.z_hat.ptr(), t.z_hat.ptr() + t.z_hat.size(), all.ptr() + b * L * D);
      for (const auto& r : t.routing) {
        mask.insert(mask.end(), r.shared_mask.begin(), r.shared_mask.end());
        sidx.insert(sidx.end(), r.shared_index.begin(), r.shared_index.end());
        pidx.insert(pidx.end(), r.private_index.begin(), r.private_index.end());
      }
    }
    f.z_hat.push_back(std::move(all));
    f.shared_mask.push_back(std::move(mask));
    f.shared_index.push_back(std::move(sidx));
    f.private_index.push_back(std::move(pidx));
  }
  return f;
}

std::vector<std::uint8_t> representation_mask(const std::vector<std::uint8_t>& shared_mask, Representation r) {
  std::vector<std::uint8_t> keep(shared_mask.size(), 1);
  if (r == Representation::homo_only) keep = shared_mask;
  if (r == Representation::hetero_only) {
    for (std::size_t j = 0; j < keep.size(); ++j) keep[j] = shared_mask[j] ? 0 : 1;
  }
  return keep;
}

namespace {

struct SampleRef {
  std::size_t subject;
  std::size_t index;
};

struct ProbeData {
  const Features& features;
  const Corpus& corpus;
  LabelKind label;
  Representation representation;
  std::size_t L, D;

  int label_of(const SampleRef& s) const {
    return label == LabelKind::tone ? corpus.subjects[s.subject].tone[s.index] - 1 : static_cast<int>(s.subject);
  }

  // Masked inputs [B, L, D] for a batch.
  void fill(std::span<const SampleRef> refs, Tensor& x, std::vector<std::uint8_t>& keep, std::vector<int>& y) const {
    x = Tensor({refs.size(), L, D});
    keep.clear();
    y.clear();
    for (std::size_t b = 0; b < refs.size(); ++b) {
      const SampleRef& s = refs[b];
      const Tensor& f = features.z_hat[s.subject];
      std::copy_n(f.ptr() + s.index * L * D, L * D, x.ptr() + b * L * D);
      const auto& sm = features.shared_mask[s.subject];
      std::vector<std::uint8_t> part(sm.begin() + s.index * L, sm.begin() + (s.index + 1) * L);
      auto k = representation_mask(part, representation);
      keep.insert(keep.end(), k.begin(), k.end());
      y.push_back(label_of(s));
    }
  }
};

std::vector<SampleRef> refs_for(const Corpus& corpus, const std::vector<std::size_t>& subjects,
                                std::vector<std::size_t> Split::*part) {
  std::vector<SampleRef> out;
  for (std::size_t i : subjects) {
    for (std::size_t n : corpus.splits[i].*part) out.push_back({i, n});
  }
  return out;
}

// Number of correct top-1 predictions.
std::size_t count_correct(TransformerClassifier& model, const ProbeData& data, const std::vector<SampleRef>& refs) {
  std::size_t correct = 0;
  for (std::size_t b = 0; b < refs.size(); b += kEvalChunk) {
    std::span<const SampleRef> chunk(refs.data() + b, std::min(kEvalChunk, refs.size() - b));
    Tensor x;
    std::vector<std::uint8_t> keep;
    std::vector<int> y;
    data.fill(chunk, x, keep, y);
    Graph g;
    Var logits = model.forward(g, ops::zero_mask(g.constant(std::move(x)), keep));
    auto pred = argmax_rows(logits.value());
    for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == static_cast<std::size_t>(y[i]);
  }
  return correct;
}

}  // namespace

DecoderResult train_decoder(const Stage1Model& model, const Features& features, const Corpus& corpus,
                            const DecoderConfig& cfg) {
  const std::size_t m = model.subjects();
  if (cfg.label == LabelKind::subject && m < 2) {
    throw ValidationError("subject labels need at least 2 subjects, have " + std::to_string(m));
  }
  if (cfg.label == LabelKind::subject && cfg.per_subject) {
    throw ValidationError("subject labels cannot be decoded per subject");
  }
  if (features.z_hat.size() != m || corpus.subjects.size() != m) {
    throw ValidationError("train_decoder: features, corpus and model disagree on the subject count");
  }
  if (cfg.train.epochs == 0 || cfg.train.batch == 0) throw ValidationError("train_decoder: epochs and batch must be positive");

  ProbeData data{features, corpus, cfg.label, cfg.representation, model.token_count(),
                 model.config().encoder.latent_dim};
  TransformerConfig tc = cfg.transformer;
  tc.in_dim = data.D;
  tc.classes = cfg.label == LabelKind::tone ? kTones : m;

  std::vector<std::vector<std::size_t>> groups;
  if (cfg.per_subject) {
    for (std::size_t i = 0; i < m; ++i) groups.push_back({i});
  } else {
    groups.push_back(iota_indices(m));
  }

  DecoderResult result;
  std::size_t val_correct = 0, val_total = 0, test_correct = 0, test_total = 0;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    std::string tag = cfg.per_subject ? std::to_string(groups[gi][0]) : std::string("all");
    std::string prefix = cfg.per_subject ? "cls/" + tag : std::string("cls");
    auto init_rng = make_stream(cfg.train.seed, "init/classifier/" + tag);
    TransformerClassifier clf(tc, prefix, init_rng);
    auto dropout_rng = make_stream(cfg.train.seed, "dropout/" + tag);
    AdamW opt(cfg.train.adam);

    std::vector<SampleRef> train = refs_for(corpus, groups[gi], &Split::train);
    std::vector<SampleRef> val = refs_for(corpus, groups[gi], &Split::val);
    std::vector<SampleRef> test = refs_for(corpus, groups[gi], &Split::test);
    if (train.empty()) throw ValidationError("train_decoder: no training samples for group " + tag);
    std::size_t batches = (train.size() + cfg.train.batch - 1) / cfg.train.batch;
    std::size_t total_steps = cfg.train.epochs * batches, step = 0;

    std::optional<TransformerClassifier> best;
    std::size_t best_epoch = 0, best_correct = 0;
    for (std::size_t epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
      auto rng = make_stream(cfg.train.seed, "shuffle/decode/" + tag + "/" + std::to_string(epoch - 1));
      std::shuffle(train.begin(), train.end(), rng);
      EpochLog row;
      row.epoch = epoch;
      row.split = cfg.per_subject ? "train/" + tag : "train";
      row.loss_rec = row.loss_pri = row.loss_commit = row.perplexity_shared = kNaN;
      row.perplexity_private.assign(m, kNaN);
      std::size_t correct = 0;
      for (std::size_t b = 0; b < train.size(); b += cfg.train.batch) {
        std::span<const SampleRef> chunk(train.data() + b, std::min(cfg.train.batch, train.size() - b));
        Tensor x;
        std::vector<std::uint8_t> keep;
        std::vector<int> y;
        data.fill(chunk, x, keep, y);
        Graph g;
        Var logits = clf.forward(g, ops::zero_mask(g.constant(std::move(x)), keep), &dropout_rng);
        Var loss = ops::cross_entropy(logits, y);
        auto pred = argmax_rows(logits.value());
        for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == static_cast<std::size_t>(y[i]);
        row.lr = cosine_lr(step++, total_steps, cfg.train.lr);
        opt.step(clf.parameters(), g.backward(loss), row.lr);
        row.loss_total += loss.value().item() * static_cast<double>(y.size());
      }
      row.loss_total /= static_cast<double>(train.size());
      row.acc = static_cast<double>(correct) / static_cast<double>(train.size());
      result.log.push_back(row);

      std::size_t vc = val.empty() ? 0 : count_correct(clf, data, val);
      EpochLog vrow = row;
      vrow.split = cfg.per_subject ? "val/" + tag : "val";
      vrow.loss_total = kNaN;
      vrow.acc = val.empty() ? kNaN : static_cast<double>(vc) / static_cast<double>(val.size());
      result.log.push_back(vrow);
      if (!best || vc > best_correct) {
        best = clf;
        best_correct = vc;
        best_epoch = epoch;
      }
    }
    val_correct += best_correct;
    val_total += val.size();
    test_correct += count_correct(*best, data, test);
    test_total += test.size();
    result.best_epoch.push_back(best_epoch);
    result.models.push_back(std::move(*best));
  }
  result.val_acc = val_total ? static_cast<double>(val_correct) / static_cast<double>(val_total) : kNaN;
  result.test_acc = test_total ? static_cast<double>(test_correct) / static_cast<double>(test_total) : kNaN;
  return result;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log, std::size_t subjects) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::string out = "epoch,split,loss_rec,loss_pri,loss_commit,loss_total,acc,perplexity_shared";
  for (std::size_t i = 0; i < subjects; ++i) out += ",perplexity_private_" + std::to_string(i);
  out += ",lr\n";
  auto num = [](double v) { return std::isnan(v) ? std::string() : format_double(v); };
  for (const EpochLog& r : log) {
    out += std::to_string(r.epoch) + "," + r.split + "," + num(r.loss_rec) + "," + num(r.loss_pri) + "," +
           num(r.loss_commit) + "," + num(r.loss_total) + "," + num(r.acc) + "," + num(r.perplexity_shared);
    for (std::size_t i = 0; i < subjects; ++i) {
      out += "," + (i < r.perplexity_private.size() ? num(r.perplexity_private[i]) : std::string());
    }
    out += "," + num(r.lr) + "\n";
  }
  write_file(path, out);
}

}  // namespace h2dilr
