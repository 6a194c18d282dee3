#include "h2dilr/eval_probe.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>

#include "h2dilr/error.hpp"
#include "h2dilr/io.hpp"

namespace h2dilr {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::size_t kChunk = 64;

std::string format_float(float v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

double conditional_entropy(const std::map<std::pair<std::size_t, std::size_t>, std::array<std::uint64_t, kTones>>& hist) {
  double total = 0.0;
  for (const auto& [code, h] : hist) total += static_cast<double>(std::accumulate(h.begin(), h.end(), std::uint64_t{0}));
  if (total == 0.0) return kNaN;
  double H = 0.0;
  for (const auto& [code, h] : hist) {
    double n = static_cast<double>(std::accumulate(h.begin(), h.end(), std::uint64_t{0}));
    for (std::uint64_t c : h) {
      if (c == 0) continue;
      double p = static_cast<double>(c) / n;
      H -= (n / total) * p * std::log2(p);
    }
  }
  return H;
}

}  // namespace

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows: logits must be [N, C], got " + shape_str(logits.shape()));
  std::size_t N = logits.dim(0), C = logits.dim(1);
  std::vector<std::size_t> out(N, 0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 1; c < C; ++c) {
      if (logits[n * C + c] > logits[n * C + out[n]]) out[n] = c;
    }
  }
  return out;
}

double top1_accuracy(const Tensor& logits, std::span<const int> labels) {
  if (labels.empty()) throw ValidationError("top1_accuracy: empty input");
  auto pred = argmax_rows(logits);
  if (pred.size() != labels.size()) {
    throw ShapeError("top1_accuracy: " + std::to_string(pred.size()) + " rows vs " + std::to_string(labels.size()) +
                     " labels");
  }
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += labels[i] >= 0 && pred[i] == static_cast<std::size_t>(labels[i]);
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

double mean_squared_error(const Tensor& x, const Tensor& x_hat) {
  if (x.shape() != x_hat.shape()) {
    throw ShapeError("mean_squared_error: " + shape_str(x.shape()) + " vs " + shape_str(x_hat.shape()));
  }
  if (x.size() == 0) throw ValidationError("mean_squared_error: empty input");
  double sq = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) sq += (x[k] - x_hat[k]) * (x[k] - x_hat[k]);
  return sq / static_cast<double>(x.size());
}

double reconstruction_mse(Stage1Model& model, const Corpus& corpus, std::vector<std::size_t> Split::*part) {
  double sq = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < corpus.subjects.size(); ++i) {
    const auto& idx = corpus.splits[i].*part;
    for (std::size_t b = 0; b < idx.size(); b += kChunk) {
      std::vector<std::size_t> chunk(idx.begin() + b, idx.begin() + std::min(idx.size(), b + kChunk));
      Tensor x = corpus.subjects[i].batch(chunk);
      sq += mean_squared_error(x, model.reconstruct(x, i)) * static_cast<double>(x.size());
      count += x.size();
    }
  }
  if (count == 0) throw ValidationError("reconstruction_mse: no samples in the chosen split");
  return sq / static_cast<double>(count);
}

double mean_predictor_mse(const Corpus& corpus, std::vector<std::size_t> Split::*part) {
  double sq = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < corpus.subjects.size(); ++i) {
    const SubjectDataset& d = corpus.subjects[i];
    std::vector<double> mean(d.channels, 0.0);
    std::size_t rows = 0;
    for (std::size_t n : corpus.splits[i].train) {
      auto s = d.sample(n);
      for (std::size_t t = 0; t < d.T; ++t) {
        for (std::size_t c = 0; c < d.channels; ++c) mean[c] += s[t * d.channels + c];
      }
      rows += d.T;
    }
    for (double& v : mean) v /= static_cast<double>(std::max<std::size_t>(rows, 1));
    for (std::size_t n : corpus.splits[i].*part) {
      auto s = d.sample(n);
      for (std::size_t t = 0; t < d.T; ++t) {
        for (std::size_t c = 0; c < d.channels; ++c) {
          double e = s[t * d.channels + c] - mean[c];
          sq += e * e;
        }
      }
      count += d.T * d.channels;
    }
  }
  if (count == 0) throw ValidationError("mean_predictor_mse: no samples in the chosen split");
  return sq / static_cast<double>(count);
}

RunMetrics summarize(std::vector<double> per_seed) {
  if (per_seed.empty()) throw ValidationError("summarize: no seeds");
  RunMetrics r;
  r.n_seeds = per_seed.size();
  r.mean = std::accumulate(per_seed.begin(), per_seed.end(), 0.0) / static_cast<double>(r.n_seeds);
  if (r.n_seeds > 1) {
    double ss = 0.0;
    for (double v : per_seed) ss += (v - r.mean) * (v - r.mean);
    r.stddev = std::sqrt(ss / static_cast<double>(r.n_seeds - 1));
  }
  if (std::all_of(per_seed.begin(), per_seed.end(), [&](double v) { return v == per_seed[0]; })) r.stddev = 0.0;
  r.per_seed = std::move(per_seed);
  return r;
}

CodeAssignment assign_codes(const Stage1Model& model, const Features& features, const Corpus& corpus,
                            std::vector<std::size_t> Split::*part) {
  const H2DState& st = model.codebooks();
  const std::size_t m = model.subjects(), L = model.token_count();
  // key: (book, code) with book 0 = shared, 1 + i = private/i
  std::map<std::pair<std::size_t, std::size_t>, std::array<std::uint64_t, kTones>> shared_hist, private_hist;
  CodeAssignment out;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t n : corpus.splits[i].*part) {
      auto tone = static_cast<std::size_t>(corpus.subjects[i].tone[n] - 1);
      for (std::size_t j = 0; j < L; ++j) {
        std::size_t t = n * L + j;
        if (features.shared_mask[i][t]) {
          ++shared_hist[{0, features.shared_index[i][t]}][tone];
        } else {
          ++private_hist[{1 + i, features.private_index[i][t]}][tone];
        }
        ++out.tokens;
      }
    }
  }
  out.entropy_shared = conditional_entropy(shared_hist);
  out.entropy_private = conditional_entropy(private_hist);

  auto emit = [&](std::size_t book, const Codebook& cb, const auto& hist) {
    for (std::size_t k = 0; k < cb.size(); ++k) {
      CodeStats s;
      s.book = cb.name();
      s.index = k;
      auto it = hist.find({book, k});
      if (it != hist.end()) {
        s.histogram = it->second;
        std::size_t best = 0;
        for (std::size_t c = 1; c < kTones; ++c) {
          if (s.histogram[c] > s.histogram[best]) best = c;
        }
        s.assigned = s.histogram[best] > 0 ? static_cast<int>(best) + 1 : kUnusedCode;
      }
      out.codes.push_back(s);
    }
  };
  emit(0, st.shared(), shared_hist);
  for (std::size_t i = 0; i < m; ++i) emit(1 + i, st.private_book(i), private_hist);
  return out;
}

const ProbeCell& DisentanglementRow::cell(Representation r, LabelKind k) const {
  for (const auto& c : cells) {
    if (c.representation == r && c.label == k) return c;
  }
  throw Error("missing probe run: nu=" + format_double(nu) + " " + to_string(r) + "/" + to_string(k));
}

bool DisentanglementRow::has(Representation r, LabelKind k) const {
  return std::any_of(cells.begin(), cells.end(), [&](const ProbeCell& c) { return c.representation == r && c.label == k; });
}

DisentanglementReport disentanglement_report(const std::vector<ProbeModel>& models, const Corpus& corpus,
                                             const DecoderConfig& base, std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw ValidationError("disentanglement_report: no seeds");
  DisentanglementReport report;
  for (const ProbeModel& pm : models) {
    Features f = extract_features(*pm.model, corpus);
    std::size_t L = pm.model->token_count();
    std::size_t shared = n_shared(pm.model->codebooks().nu(), L);
    DisentanglementRow row;
    row.nu = pm.nu;
    for (LabelKind k : {LabelKind::tone, LabelKind::subject}) {
      for (Representation r : {Representation::homo_only, Representation::hetero_only, Representation::full}) {
        if (r == Representation::homo_only && shared == 0) continue;
        if (r == Representation::hetero_only && shared == L) continue;
        std::vector<double> acc;
        for (std::uint64_t seed : seeds) {
          DecoderConfig cfg = base;
          cfg.label = k;
          cfg.representation = r;
          cfg.per_subject = false;
          cfg.train.seed = seed;
          acc.push_back(train_decoder(*pm.model, f, corpus, cfg).test_acc);
        }
        row.cells.push_back({r, k, summarize(std::move(acc))});
      }
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

namespace {

struct Column {
  LabelKind label;
  Representation rep;
  const char* title;
};

constexpr Column kColumns[] = {
    {LabelKind::tone, Representation::homo_only, "tone/homo"},
    {LabelKind::tone, Representation::hetero_only, "tone/hetero"},
    {LabelKind::tone, Representation::full, "tone/full"},
    {LabelKind::subject, Representation::homo_only, "subject/homo"},
    {LabelKind::subject, Representation::hetero_only, "subject/hetero"},
    {LabelKind::subject, Representation::full, "subject/full*"},
};

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string format_report_text(const DisentanglementReport& report) {
  std::vector<std::vector<std::string>> table;
  std::vector<std::string> header{"nu"};
  for (const auto& c : kColumns) header.push_back(c.title);
  table.push_back(header);
  for (const auto& row : report.rows) {
    std::vector<std::string> line{fixed(row.nu, 2)};
    for (const auto& c : kColumns) {
      if (!row.has(c.rep, c.label)) {
        line.push_back("-");
        continue;
      }
      const RunMetrics& m = row.cell(c.rep, c.label).metrics;
      line.push_back(fixed(100.0 * m.mean, 2) + " +- " + fixed(100.0 * m.stddev, 2));
    }
    table.push_back(line);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : table) {
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  }
  std::string out;
  for (const auto& line : table) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      std::string cell = line[i];
      if (i == 0) {
        cell += std::string(width[i] - cell.size(), ' ');
      } else {
        cell = std::string(width[i] - cell.size() + 2, ' ') + cell;
      }
      out += cell;
    }
    out += "\n";
  }
  out += "accuracy in %, mean +- sample std over seeds; * subject/full is an extension column\n";
  return out;
}

std::string format_report_csv(const DisentanglementReport& report) {
  std::string out = "nu,label,representation,n_seeds,mean,std,per_seed\n";
  for (const auto& row : report.rows) {
    for (const auto& c : row.cells) {
      std::string seeds;
      for (std::size_t i = 0; i < c.metrics.per_seed.size(); ++i) {
        seeds += (i ? ";" : "") + format_double(c.metrics.per_seed[i]);
      }
      out += format_double(row.nu) + "," + to_string(c.label) + "," + to_string(c.representation) + "," +
             std::to_string(c.metrics.n_seeds) + "," + format_double(c.metrics.mean) + "," +
             format_double(c.metrics.stddev) + "," + seeds + "\n";
    }
  }
  return out;
}

void export_embeddings(const Stage1Model& model, const Features& features, const Corpus& corpus,
                       const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  CodeAssignment assignment = assign_codes(model, features, corpus, &Split::test);
  const H2DState& st = model.codebooks();
  const std::size_t D = st.shared().dim();

  std::string codes = "book,index,assigned_tone";
  for (std::size_t d = 0; d < D; ++d) codes += ",e" + std::to_string(d);
  codes += "\n";
  for (const CodeStats& s : assignment.codes) {
    const Codebook& cb = s.book == st.shared().name()
                             ? st.shared()
                             : st.private_book(parse_size(s.book.substr(s.book.find('/') + 1), "book"));
    codes += s.book + "," + std::to_string(s.index) + "," +
             (s.assigned == kUnusedCode ? std::string("unused") : std::to_string(s.assigned));
    for (double v : cb.code(s.index)) codes += "," + format_float(static_cast<float>(v));
    codes += "\n";
  }
  write_file(dir / "codes.csv", codes);

  std::string samples = "subject,trial,tone,split";
  for (std::size_t d = 0; d < D; ++d) samples += ",r" + std::to_string(d);
  samples += "\n";
  const std::size_t L = model.token_count();
  for (std::size_t i = 0; i < corpus.subjects.size(); ++i) {
    const SubjectDataset& data = corpus.subjects[i];
    std::vector<std::string> split_of(data.size(), "train");
    for (std::size_t n : corpus.splits[i].val) split_of[n] = "val";
    for (std::size_t n : corpus.splits[i].test) split_of[n] = "test";
    for (std::size_t n = 0; n < data.size(); ++n) {
      samples += std::to_string(i) + "," + std::to_string(data.trial[n]) + "," + std::to_string(data.tone[n]) + "," +
                 split_of[n];
      const double* z = features.z_hat[i].ptr() + n * L * D;
      for (std::size_t d = 0; d < D; ++d) {
        double acc = 0.0;
        for (std::size_t j = 0; j < L; ++j) acc += z[j * D + d];
        samples += "," + format_float(static_cast<float>(acc / static_cast<double>(L)));
      }
      samples += "\n";
    }
  }
  write_file(dir / "samples.csv", samples);
}

}  // namespace h2dilr
