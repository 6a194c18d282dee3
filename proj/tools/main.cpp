#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "h2dilr/error.hpp"
#include "h2dilr/eval_probe.hpp"
#include "h2dilr/io.hpp"
#include "h2dilr/run_config.hpp"

namespace h2dilr {
namespace {

struct Loaded {
  Corpus corpus;
  std::vector<std::size_t> channels;
};

void echo_config(const RunConfig& cfg, const std::string& command) {
  std::filesystem::create_directories(cfg.out_dir);
  write_file(cfg.out_dir / (command + ".cfg"), "# effective configuration of `" + command + "`\n" + format_config(cfg));
}

Loaded load_corpus(const RunConfig& cfg) {
  LoadedDataset d = load_dataset(cfg.data_path());
  const GenSpec& want = cfg.data;
  if (d.spec.T != want.T || d.spec.channels != want.channels || d.spec.seed != cfg.seed) {
    throw ValidationError("dataset at " + cfg.data_path().string() + " was generated with T=" + std::to_string(d.spec.T) +
                          " seed=" + std::to_string(d.spec.seed) +
                          ", which does not match the configuration; rerun gen-data or point data_dir elsewhere");
  }
  Loaded out;
  for (const auto& s : d.subjects) out.channels.push_back(s.channels);
  out.corpus = make_corpus(std::move(d.subjects), cfg.seed);
  return out;
}

Stage1Model load_stage1(const RunConfig& cfg, const Loaded& data) {
  Checkpoint c = load_checkpoint(cfg.checkpoint_path());
  if (c.stage != "h2d") {
    throw ValidationError(cfg.checkpoint_path().string() + " is a '" + c.stage + "' checkpoint, expected a stage-1 one");
  }
  return restore_stage1(c, data.channels);
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

std::string num(double v) {
  if (std::isnan(v)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

int gen_data(const RunConfig& cfg) {
  GenSpec spec = cfg.gen_spec();
  auto data = generate_dataset(spec);
  save_dataset(cfg.data_path(), spec, data);
  std::size_t n = 0;
  for (const auto& d : data) n += d.size();
  std::printf("wrote %zu subjects, %zu trials to %s\n", data.size(), n, cfg.data_path().c_str());
  return 0;
}

int pretrain(const RunConfig& cfg) {
  Loaded data = load_corpus(cfg);
  Stage1Model model(cfg.stage1, data.channels, cfg.seed);
  TrainConfig t = cfg.pretrain;
  t.seed = cfg.seed;
  std::printf("stage 1: %zu subjects, %zu tokens of dim %zu, nu=%s, %zu epochs\n", model.subjects(),
              model.token_count(), cfg.stage1.encoder.latent_dim, format_double(cfg.stage1.h2d.nu).c_str(), t.epochs);
  PretrainResult r = pretrain_h2d(model, data.corpus, t, [](const EpochLog& row) {
    std::printf("epoch %4zu %-5s rec %s pri %s commit %s total %s\n", row.epoch, row.split.c_str(),
                num(row.loss_rec).c_str(), num(row.loss_pri).c_str(), num(row.loss_commit).c_str(),
                num(row.loss_total).c_str());
    std::fflush(stdout);
  });
  save_checkpoint(make_checkpoint(model, cfg.seed), cfg.checkpoint_path());
  write_metrics_csv(cfg.out_dir / "pretrain_metrics.csv", r.log, model.subjects());
  std::printf("test reconstruction mse %s (channel-mean baseline %s)\ncheckpoint: %s\n",
              num(reconstruction_mse(model, data.corpus, &Split::test)).c_str(),
              num(mean_predictor_mse(data.corpus, &Split::test)).c_str(), cfg.checkpoint_path().c_str());
  return 0;
}

int train_decoder_cmd(const RunConfig& cfg) {
  Loaded data = load_corpus(cfg);
  Stage1Model model = load_stage1(cfg, data);
  Features f = extract_features(model, data.corpus);
  std::string rows = "seed,label,representation,per_subject,best_epoch,val_acc,test_acc\n";
  std::vector<double> acc;
  for (std::uint64_t s : cfg.seeds) {
    DecoderConfig d = cfg.decode;
    d.train.seed = cfg.decoder_seed(s);
    DecoderResult r = train_decoder(model, f, data.corpus, d);
    auto dir = cfg.out_dir / "decode" / ("seed_" + std::to_string(s));
    write_metrics_csv(dir / "metrics.csv", r.log, model.subjects());
    Checkpoint c = make_checkpoint(model, cfg.seed);
    add_classifiers(c, r.models, d);
    save_checkpoint(c, dir / "checkpoint");
    std::string best;
    for (std::size_t i = 0; i < r.best_epoch.size(); ++i) best += (i ? ";" : "") + std::to_string(r.best_epoch[i]);
    rows += std::to_string(s) + "," + to_string(d.label) + "," + to_string(d.representation) + "," +
            (d.per_subject ? "true" : "false") + "," + best + "," + format_double(r.val_acc) + "," +
            format_double(r.test_acc) + "\n";
    acc.push_back(r.test_acc);
    std::printf("seed %llu: val %s%% test %s%% (best epoch %s)\n", static_cast<unsigned long long>(s),
                pct(r.val_acc).c_str(), pct(r.test_acc).c_str(), best.c_str());
    std::fflush(stdout);
  }
  write_file(cfg.out_dir / "decode_results.csv", rows);
  RunMetrics m = summarize(acc);
  std::printf("%s/%s test top-1: %s +- %s %% over %zu seeds\n", to_string(cfg.decode.label).c_str(),
              to_string(cfg.decode.representation).c_str(), pct(m.mean).c_str(), pct(m.stddev).c_str(), m.n_seeds);
  return 0;
}

std::vector<std::uint64_t> decoder_seeds(const RunConfig& cfg) {
  std::vector<std::uint64_t> out;
  for (std::uint64_t s : cfg.seeds) out.push_back(cfg.decoder_seed(s));
  return out;
}

int probe(const RunConfig& cfg) {
  Loaded data = load_corpus(cfg);
  Stage1Model model = load_stage1(cfg, data);
  auto seeds = decoder_seeds(cfg);
  DisentanglementReport report =
      disentanglement_report({{model.config().h2d.nu, &model}}, data.corpus, cfg.decode, seeds);
  std::string text = format_report_text(report);
  write_file(cfg.out_dir / "probe.txt", text);
  write_file(cfg.out_dir / "probe.csv", format_report_csv(report));
  std::cout << text;
  return 0;
}

std::string entropy_text(const CodeAssignment& a) {
  std::size_t used = 0;
  for (const auto& c : a.codes) used += c.assigned != kUnusedCode;
  return "H(tone | shared code) = " + num(a.entropy_shared) + " bits\nH(tone | private code) = " +
         num(a.entropy_private) + " bits\ncodes in use: " + std::to_string(used) + " of " +
         std::to_string(a.codes.size()) + "\n";
}

int export_codes(const RunConfig& cfg) {
  Loaded data = load_corpus(cfg);
  Stage1Model model = load_stage1(cfg, data);
  Features f = extract_features(model, data.corpus);
  auto dir = cfg.out_dir / "codes";
  export_embeddings(model, f, data.corpus, dir);
  std::string text = entropy_text(assign_codes(model, f, data.corpus, &Split::test));
  write_file(dir / "assignment.txt", text);
  std::cout << text << "wrote " << (dir / "codes.csv").string() << " and " << (dir / "samples.csv").string() << "\n";
  return 0;
}

int report(const RunConfig& cfg) {
  Loaded data = load_corpus(cfg);
  Stage1Model model = load_stage1(cfg, data);
  Features f = extract_features(model, data.corpus);
  std::string out = "run: " + cfg.out_dir.string() + "\nseed: " + std::to_string(cfg.seed) +
                    "\nparadigm: " + to_string(model.config().paradigm) +
                    "\nnu: " + format_double(model.config().h2d.nu) + "\n\n";
  out += "test reconstruction mse: " + num(reconstruction_mse(model, data.corpus, &Split::test)) +
         "\nchannel-mean baseline:   " + num(mean_predictor_mse(data.corpus, &Split::test)) + "\n\n";
  out += entropy_text(assign_codes(model, f, data.corpus, &Split::test)) + "\n";

  auto results = cfg.out_dir / "decode_results.csv";
  if (std::filesystem::exists(results)) {
    std::istringstream in(read_file(results));
    std::string line, label, rep;
    std::getline(in, line);
    std::vector<double> acc;
    while (std::getline(in, line)) {
      auto cells = split_list(line, ',');
      if (cells.size() != 7) throw IoError(results.string() + ": malformed row '" + line + "'");
      label = cells[1];
      rep = cells[2];
      acc.push_back(parse_double(cells[6], "test_acc"));
    }
    if (!acc.empty()) {
      RunMetrics m = summarize(acc);
      out += "decoding " + label + "/" + rep + ": " + pct(m.mean) + " +- " + pct(m.stddev) + " % over " +
             std::to_string(m.n_seeds) + " seeds\n\n";
    }
  } else {
    out += "decoding: no decode_results.csv (run train-decoder)\n\n";
  }
  auto probe_file = cfg.out_dir / "probe.txt";
  out += std::filesystem::exists(probe_file) ? "probes:\n" + read_file(probe_file) : "probes: none (run probe)\n";
  write_file(cfg.out_dir / "report.txt", out);
  std::cout << out;
  return 0;
}

}  // namespace
}  // namespace h2dilr

int main(int argc, char** argv) {
  using namespace h2dilr;
  CLI::App app{"Shared/private vector-quantized representation learning on synthetic multi-subject recordings"};
  app.require_subcommand(0, 1);
  bool list_keys = false;
  app.add_flag("--list-keys", list_keys, "print every config key with its default and exit");

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const RunConfig&);
  };
  const Command commands[] = {
      {"gen-data", "generate the synthetic dataset into data_dir", gen_data},
      {"pretrain", "stage 1: train encoders, decoders and codebooks", pretrain},
      {"train-decoder", "stage 2: train the classifier on frozen tokens, once per seed", train_decoder_cmd},
      {"probe", "tone and subject probes on homo-only, hetero-only and full tokens", probe},
      {"report", "summarize the run into out_dir/report.txt", report},
      {"export-codes", "write code embeddings, tone assignments and pooled sample vectors", export_codes},
  };
  std::string config;
  std::vector<std::string> sets;
  std::vector<CLI::App*> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", config, "key=value configuration file")->required();
    sub->add_option("--set", sets, "key=value override, repeatable");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* active = &app;
    for (auto* s : subs) {
      if (s->parsed()) active = s;
    }
    std::cerr << active->help();
    return 1;
  }

  if (list_keys) {
    RunConfig defaults = default_run_config();
    for (const auto& k : config_keys()) {
      std::cout << k.name << "=" << get_key(defaults, k.name) << "\n    " << k.help << "\n";
    }
    return 0;
  }
  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    try {
      RunConfig cfg = load_run_config(config, sets);
      echo_config(cfg, commands[i].name);
      return commands[i].run(cfg);
    } catch (const ValidationError& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    } catch (const std::exception& e) {
      std::cerr << "failure: " << e.what() << "\n";
      return 2;
    }
  }
  std::cerr << app.help();
  return 1;
}
