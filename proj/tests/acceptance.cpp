// Acceptance suite: one PASS/FAIL line per criterion. Run with criterion
// numbers as arguments to select a subset.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>

#include "gradcheck.hpp"
#include "h2dilr/eval_probe.hpp"
#include "h2dilr/run_config.hpp"
#include "loss_check.hpp"
#include "oracles.hpp"
#include "tiny.hpp"

namespace h2dilr {
namespace {

using testing::random_tensor;
using testing::slurp;
using testing::TempDir;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Verdict quantization_oracle() {
  auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::size_t> kd(1, 64), dd(1, 32);
  std::size_t mismatches = 0;
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    std::size_t K = kd(rng), D = dd(rng);
    Codebook cb("oracle", K, D, UpdateMode::loss);
    Tensor codes = random_tensor(rng, {K, D});
    // Duplicate a code now and then so exact ties are exercised.
    if (K > 1 && i % 10 == 0) std::copy_n(codes.ptr(), D, codes.ptr() + (K - 1) * D);
    cb.set_embeddings(codes);
    Tensor z = random_tensor(rng, {D});
    NearestCode got = nearest_code(z.data(), cb);
    testing::ScanResult want = testing::exhaustive_scan(z.data(), codes);
    mismatches += got.index != want.index;
    worst = std::max(worst, std::abs(got.distance - want.distance));
  }
  double t = seconds_since(t0);
  return {mismatches == 0 && worst <= 1e-12 && t < 10.0,
          fmt("10000 instances, %zu index mismatches, max |d - d_ref| %.1e, %.2f s", mismatches, worst, t)};
}

Verdict gradient_suite() {
  auto t0 = Clock::now();
  std::string worst_name;
  double worst = 0.0;
  std::size_t checked = 0;
  for (const auto& c : testing::primitive_cases()) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::mt19937_64 rng(seed);
      double err = testing::gradcheck(c.build, c.make_inputs(rng), seed + 1000);
      if (err > worst) worst = err, worst_name = c.name;
      ++checked;
    }
  }
  std::mt19937_64 rng(202);
  for (int i = 0; i < 100; ++i) {
    double a = testing::vq_loss_fd_error(rng), b = testing::h2d_loss_fd_error(rng);
    if (a > worst) worst = a, worst_name = "vq objective";
    if (b > worst) worst = b, worst_name = "h2d objective";
    checked += 2;
  }
  double t = seconds_since(t0);
  return {worst < 1e-4 && t < 120.0,
          fmt("%zu primitives + 2 objectives x 100 cases (%zu checks), worst rel err %.1e (%s), %.1f s",
              testing::primitive_cases().size(), checked, worst, worst_name.c_str(), t)};
}

Verdict ste_contract() {
  std::mt19937_64 rng(303);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<std::size_t> ext(1, 6);
    std::size_t B = ext(rng), L = ext(rng), D = ext(rng);
    H2DOptions opt;
    opt.nu = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    opt.K_private = ext(rng);
    opt.code_dim = D;
    H2DState state(3, opt, rng());
    Tensor z = random_tensor(rng, {B, L, D}, -0.3, 0.3), w = random_tensor(rng, {B, L, D});
    auto head = [&](Graph& g, Var v) { return ops::mean(ops::gelu(ops::mul(v, g.constant(w)))); };

    Graph g1;
    Var vz = g1.input(z);
    QuantizedTokens q = h2d_quantize(g1, vz, state, trial % 3);
    g1.backward(head(g1, q.z_hat));
    Graph g2;
    Var u = g2.input(q.z_hat.value());
    g2.backward(head(g2, u));
    Tensor a = g1.grad(vz), b = g2.grad(u);
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  return {worst <= 1e-10, fmt("200 random batches, max |grad_ste - grad_identity| %.1e", worst)};
}

Verdict ema_convergence() {
  testing::TwoClusterStream stream;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 init(seed);
    Codebook cb = Codebook::uniform("two", 2, 2, UpdateMode::ema, init);
    std::mt19937_64 rng(seed + 100);
    for (int step = 0; step < 500; ++step) {
      Tensor rows = stream.next(rng);
      ema_update(cb, rows, nearest_codes(rows, cb).indices, EmaOptions{.alpha = 0.99});
    }
    // Match each true mean to its nearest code; both codes must be claimed.
    std::set<std::size_t> claimed;
    for (const auto& mu : stream.means) {
      NearestCode n = nearest_code(mu, cb);
      claimed.insert(n.index);
      worst = std::max(worst, n.distance);
    }
    if (claimed.size() != 2) worst = INFINITY;
  }
  return {worst < 0.05, fmt("5 initializations, 500 updates, alpha 0.99: max code-to-mean distance %.4f", worst)};
}

RunConfig desk_config() {
  RunConfig cfg = load_run_config(H2DILR_DESK_CONFIG, {});
  validate(cfg);
  return cfg;
}

Verdict degeneration() {
  RunConfig cfg = desk_config();
  Corpus corpus = make_corpus(generate_dataset(cfg.gen_spec()), cfg.seed);
  TrainConfig t = cfg.pretrain;
  t.seed = cfg.seed;
  t.epochs = 2;

  Stage1Config h = cfg.stage1, u = cfg.stage1;
  h.h2d.nu = 1.0;
  u.paradigm = Paradigm::unified;
  Stage1Model a(h, cfg.data.channels, cfg.seed), b(u, cfg.data.channels, cfg.seed);
  auto sa = pretrain_h2d(a, corpus, t).steps, sb = pretrain_h2d(b, corpus, t).steps;
  std::size_t differing = sa.size() == sb.size() ? 0 : std::max(sa.size(), sb.size());
  for (std::size_t i = 0; i < std::min(sa.size(), sb.size()); ++i) {
    differing += sa[i].total != sb[i].total || sa[i].rec != sb[i].rec || sa[i].commit != sb[i].commit ||
                 sa[i].pri != sb[i].pri;
  }

  Stage1Config z = cfg.stage1;
  z.h2d.nu = 0.0;
  Stage1Model c(z, cfg.data.channels, cfg.seed);
  Tensor before = c.codebooks().shared().embeddings().value;
  pretrain_h2d(c, corpus, t);
  std::uint64_t used = 0;
  for (auto n : c.codebooks().shared().usage()) used += n;
  const Tensor& after = c.codebooks().shared().embeddings().value;
  bool untouched = std::equal(before.data().begin(), before.data().end(), after.data().begin());
  return {differing == 0 && used == 0 && untouched,
          fmt("desk profile, 2 epochs: nu=1 vs unified %zu/%zu steps differ; nu=0 shared usage %llu, embeddings %s",
              differing, sa.size(), static_cast<unsigned long long>(used), untouched ? "unchanged" : "changed")};
}

Verdict partition_exactness() {
  std::mt19937_64 rng(606);
  std::size_t cases = 0, failures = 0;
  for (int book = 0; book < 5; ++book) {
    std::size_t K = 1 + rng() % 16, D = 1 + rng() % 8;
    Codebook shared = Codebook::uniform("s", K, D, UpdateMode::ema, rng);
    for (double nu : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      for (std::size_t L = 1; L <= 64; ++L) {
        Tensor z = random_tensor(rng, {L, D});
        if (L % 7 == 0) std::copy_n(z.ptr(), D, z.ptr() + (L - 1) * D);  // a tied pair
        TokenRouting r = partition(z, shared, nu);
        std::size_t want = static_cast<std::size_t>(std::floor(nu * L + 0.5));
        std::vector<double> dist(L);
        for (std::size_t j = 0; j < L; ++j) {
          dist[j] = testing::exhaustive_scan({z.ptr() + j * D, D}, shared.embeddings().value).distance;
        }
        std::vector<std::size_t> chosen;
        for (std::size_t j = 0; j < L; ++j) {
          if (r.shared_mask[j]) chosen.push_back(j);
        }
        ++cases;
        failures += r.count_shared() != want || chosen != testing::smallest_n(dist, want);
      }
    }
  }
  return {failures == 0, fmt("%zu (codebook, nu, L) cases, %zu disagree with floor(nu L + 0.5) or the sort oracle",
                             cases, failures)};
}

int run_cli(const std::string& args, const std::filesystem::path& log) {
  std::string cmd = std::string(H2DILR_CLI) + " " + args + " >" + log.string() + " 2>&1";
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Verdict reproducibility() {
  TempDir tmp("acceptance_repro");
  Corpus corpus = make_corpus(generate_dataset(testing::tiny_spec()), 1);
  for (const char* name : {"a", "b"}) {
    Stage1Model model(testing::tiny_stage1(), {4, 7}, 9);
    pretrain_h2d(model, corpus, testing::tiny_train(2));
    save_checkpoint(make_checkpoint(model, 9), tmp.path() / name);
  }
  bool identical = slurp(tmp.path() / "a" / "manifest") == slurp(tmp.path() / "b" / "manifest") &&
                   slurp(tmp.path() / "a" / "tensors.bin") == slurp(tmp.path() / "b" / "tensors.bin");

  Checkpoint loaded = load_checkpoint(tmp.path() / "a");
  save_checkpoint(loaded, tmp.path() / "c");
  Stage1Model restored = restore_stage1(loaded, std::vector<std::size_t>{4, 7});
  Checkpoint again = make_checkpoint(restored, 9);
  bool round_trip = slurp(tmp.path() / "a" / "tensors.bin") == slurp(tmp.path() / "c" / "tensors.bin");
  for (const auto& [name, t] : loaded.tensors) {
    const Tensor& r = again.tensors.at(name);
    round_trip = round_trip && r.shape() == t.shape() && std::equal(t.data().begin(), t.data().end(), r.data().begin());
  }

  std::ofstream(tmp.path() / "tiny.cfg") << "seed=3\nseeds=1,2\ndata.subjects=2\ndata.channels=4,7\ndata.T=64\n"
                                            "data.samples_per_tone=10\nmodel.stem_channels=4\n"
                                            "model.block_channels=8,8,8\nmodel.latent_dim=8\nmodel.patch=2\n"
                                            "model.embed=8\nmodel.ffn=16\nmodel.blocks=1\nmodel.heads=2\n"
                                            "h2d.K_private=4\nh2d.code_dim=8\ntrain.epochs=2\ntrain.batch=8\n"
                                            "decode.epochs=2\ndecode.batch=8\nout_dir="
                                         << (tmp.path() / "run").string() << "\n";
  std::string failed;
  for (const char* c : {"gen-data", "pretrain", "train-decoder", "probe", "export-codes", "report"}) {
    int code = run_cli(std::string(c) + " --config " + (tmp.path() / "tiny.cfg").string(), tmp.path() / "log.txt");
    if (code != 0) failed += std::string(failed.empty() ? "" : ", ") + c + " -> " + std::to_string(code);
  }
  return {identical && round_trip && failed.empty(),
          fmt("checkpoints %s across runs; round trip %s; CLI pipeline %s", identical ? "byte-identical" : "DIFFER",
              round_trip ? "exact" : "NOT exact", failed.empty() ? "exit 0" : failed.c_str())};
}

// Desk-scale experiment shared by criteria 7 to 10. Each stage-1 variant is
// trained once; stage 2 is repeated over the configured seeds.
class Desk {
 public:
  Desk() : cfg_(desk_config()), corpus_(make_corpus(generate_dataset(cfg_.gen_spec()), cfg_.seed)) {
    for (std::uint64_t s : cfg_.seeds) seeds_.push_back(cfg_.decoder_seed(s));
  }

  const RunConfig& config() const { return cfg_; }
  const Corpus& corpus() const { return corpus_; }
  const std::vector<std::uint64_t>& seeds() const { return seeds_; }

  // nu < 0 selects the unified paradigm.
  Stage1Model& model(double nu) {
    auto it = models_.find(nu);
    if (it != models_.end()) return *it->second;
    Stage1Config c = cfg_.stage1;
    if (nu < 0) {
      c.paradigm = Paradigm::unified;
    } else {
      c.h2d.nu = nu;
    }
    auto m = std::make_unique<Stage1Model>(c, cfg_.data.channels, cfg_.seed);
    TrainConfig t = cfg_.pretrain;
    t.seed = cfg_.seed;
    auto t0 = Clock::now();
    pretrain_h2d(*m, corpus_, t);
    std::fprintf(stderr, "  stage 1 (%s) trained in %.0f s\n", nu < 0 ? "unified" : fmt("nu=%.2f", nu).c_str(),
                 seconds_since(t0));
    return *models_.emplace(nu, std::move(m)).first->second;
  }

  RunMetrics decode(double nu, bool per_subject) {
    Stage1Model& m = model(nu);
    Features f = extract_features(m, corpus_);
    std::vector<double> acc;
    for (std::uint64_t s : seeds_) {
      DecoderConfig d = cfg_.decode;
      d.label = LabelKind::tone;
      d.representation = Representation::full;
      d.per_subject = per_subject;
      d.train.seed = s;
      acc.push_back(train_decoder(m, f, corpus_, d).test_acc);
    }
    return summarize(acc);
  }

 private:
  RunConfig cfg_;
  Corpus corpus_;
  std::vector<std::uint64_t> seeds_;
  std::map<double, std::unique_ptr<Stage1Model>> models_;
};

Verdict desk_learning(Desk& desk) {
  auto t0 = Clock::now();
  Stage1Model& m = desk.model(desk.config().stage1.h2d.nu);
  double rec = reconstruction_mse(m, desk.corpus(), &Split::test);
  double base = mean_predictor_mse(desk.corpus(), &Split::test);
  RunMetrics tone = desk.decode(desk.config().stage1.h2d.nu, false);
  double t = seconds_since(t0);
  return {rec < 0.5 && tone.mean >= 0.60 && tone.n_seeds == 5 && t < 1800.0,
          fmt("%zu stage-1 epochs: test rec mse %.3f (channel-mean %.3f); tone top-1 %.3f +- %.3f over %zu seeds; "
              "%.0f s",
              desk.config().pretrain.epochs, rec, base, tone.mean, tone.stddev, tone.n_seeds, t)};
}

Verdict disentanglement(Desk& desk) {
  double nu = desk.config().stage1.h2d.nu;
  DisentanglementReport r = disentanglement_report(
      {{0.25, &desk.model(0.25)}, {nu, &desk.model(nu)}, {0.75, &desk.model(0.75)}}, desk.corpus(),
      desk.config().decode, desk.seeds());
  std::fprintf(stderr, "%s", format_report_text(r).c_str());
  auto mean = [&](std::size_t row, Representation rep, LabelKind k) { return r.rows[row].cell(rep, k).metrics.mean; };
  double subj_het = mean(1, Representation::hetero_only, LabelKind::subject);
  double subj_hom = mean(1, Representation::homo_only, LabelKind::subject);
  double tone_hom = mean(1, Representation::homo_only, LabelKind::tone);
  double tone_het = mean(1, Representation::hetero_only, LabelKind::tone);
  double het_lo = mean(0, Representation::hetero_only, LabelKind::subject);
  double het_hi = mean(2, Representation::hetero_only, LabelKind::subject);
  bool a = subj_het - subj_hom >= 0.05, b = tone_hom >= tone_het - 0.02, c = het_lo >= het_hi;
  return {a && b && c,
          fmt("subject hetero-homo %+.3f (need >= +0.05) %s; tone homo-hetero %+.3f (need >= -0.02) %s; "
              "hetero subject nu=0.25 %.3f vs nu=0.75 %.3f %s",
              subj_het - subj_hom, a ? "ok" : "FAILS", tone_hom - tone_het, b ? "ok" : "FAILS", het_lo, het_hi,
              c ? "ok" : "FAILS")};
}

Verdict paradigm_comparison(Desk& desk) {
  RunMetrics h = desk.decode(desk.config().stage1.h2d.nu, false);
  RunMetrics u = desk.decode(-1.0, false);
  RunMetrics p = desk.decode(0.0, true);
  return {h.mean >= u.mean && u.mean >= p.mean,
          fmt("tone top-1 over %zu seeds: h2d %.4f +- %.4f, unified %.4f +- %.4f, per-subject %.4f +- %.4f",
              h.n_seeds, h.mean, h.stddev, u.mean, u.stddev, p.mean, p.stddev)};
}

Verdict code_separation(Desk& desk) {
  Stage1Model& m = desk.model(desk.config().stage1.h2d.nu);
  Features f = extract_features(m, desk.corpus());
  CodeAssignment a = assign_codes(m, f, desk.corpus(), &Split::test);
  return {a.entropy_shared < a.entropy_private,
          fmt("test split: H(tone | shared code) %.3f bits, H(tone | private code) %.3f bits", a.entropy_shared,
              a.entropy_private)};
}

}  // namespace
}  // namespace h2dilr

int main(int argc, char** argv) {
  using namespace h2dilr;
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  std::unique_ptr<Desk> desk;
  auto with_desk = [&](Verdict (*f)(Desk&)) {
    return [&desk, f] {
      if (!desk) desk = std::make_unique<Desk>();
      return f(*desk);
    };
  };
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"quantization oracle", quantization_oracle},
      {"gradient suite", gradient_suite},
      {"straight-through contract", ste_contract},
      {"ema convergence", ema_convergence},
      {"degeneration", degeneration},
      {"partition exactness", partition_exactness},
      {"desk-scale learning", with_desk(desk_learning)},
      {"disentanglement direction", with_desk(disentanglement)},
      {"paradigm comparison", with_desk(paradigm_comparison)},
      {"code-assignment separation", with_desk(code_separation)},
      {"reproducibility and persistence", reproducibility},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    int n = static_cast<int>(i) + 1;
    if (!wanted.empty() && !wanted.count(n)) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("%s %2d %s: %s\n", v.pass ? "PASS" : "FAIL", n, criteria[i].first, v.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
