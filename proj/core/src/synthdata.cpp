#include "h2dilr/synthdata.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "h2dilr/error.hpp"
#include "h2dilr/io.hpp"
#include "h2dilr/rng.hpp"

namespace h2dilr {
namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr double kTwoPi = 2.0 * std::numbers::pi;
// Carrier frequency in cycles per segment: kBaseCycles + kSpanCycles * contour.
constexpr double kBaseCycles = 2.0;
constexpr double kSpanCycles = 6.0;
constexpr double kMaxCondition = 20.0;
constexpr double kBurstWidth = 0.1;  // fraction of the segment
constexpr double kSourcePower = 0.5;  // mean power of a unit sinusoid

struct TrialJitter {
  double amplitude = 1.0;
  double freq_scale = 1.0;
  double shift = 0.0;  // fraction of the segment
  double phase = 0.0;
};

/// Shared sources [T, S] for one trial.
std::vector<double> shared_sources(int tone, std::size_t T, const TrialJitter& j) {
  std::vector<double> contour = tone_template(tone, T);
  std::vector<double> s(T * kSharedSources);
  double cycles = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    double u = T > 1 ? static_cast<double>(t) / static_cast<double>(T - 1) : 0.0;
    double us = std::clamp(u - j.shift, 0.0, 1.0);
    auto idx = static_cast<std::size_t>(std::lround(us * static_cast<double>(T - 1)));
    double c = contour[idx];
    double phi = kTwoPi * cycles + j.phase;
    s[t * kSharedSources + 0] = j.amplitude * std::sin(phi);
    s[t * kSharedSources + 1] = j.amplitude * std::cos(phi);
    s[t * kSharedSources + 2] = j.amplitude * 2.0 * (c - 0.5);
    cycles += j.freq_scale * (kBaseCycles + kSpanCycles * c) / static_cast<double>(T);
  }
  return s;
}

Matrix to_matrix(const Tensor& t) {
  Matrix m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    for (std::size_t k = 0; k < t.dim(1); ++k) m(i, k) = t[i * t.dim(1) + k];
  }
  return m;
}

/// Column-wise z-scoring of x [T, C] in place; flat channels become zero.
void zscore_channels(std::vector<double>& x, std::size_t T, std::size_t C) {
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0;
    for (std::size_t t = 0; t < T; ++t) mean += x[t * C + c];
    mean /= static_cast<double>(T);
    double var = 0.0;
    for (std::size_t t = 0; t < T; ++t) var += (x[t * C + c] - mean) * (x[t * C + c] - mean);
    double sd = std::sqrt(var / static_cast<double>(T));
    for (std::size_t t = 0; t < T; ++t) x[t * C + c] = sd > 1e-12 ? (x[t * C + c] - mean) / sd : 0.0;
  }
}

Tensor signature_mixing(const GenSpec& spec, std::size_t subject) {
  auto rng = make_stream(spec.seed, "data/signature_mixing/" + std::to_string(subject));
  std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(2.0));
  Tensor b({spec.channels[subject], 2});
  for (auto& v : b.data()) v = n(rng);
  return b;
}

std::vector<int> tone_sequence(const GenSpec& spec, std::size_t subject) {
  std::vector<int> tones;
  for (std::size_t n = 0; n < spec.samples_per_tone; ++n) {
    for (int k = 1; k <= static_cast<int>(kTones); ++k) tones.push_back(k);
  }
  auto rng = make_stream(spec.seed, "data/order/" + std::to_string(subject));
  std::shuffle(tones.begin(), tones.end(), rng);
  return tones;
}

std::vector<double> make_trial(const GenSpec& spec, std::size_t subject, std::size_t trial, int tone,
                               const Matrix& A, const Tensor& B) {
  const std::size_t T = spec.T, C = spec.channels[subject];
  auto rng = make_stream(spec.seed, "data/subject/" + std::to_string(subject) + "/trial/" + std::to_string(trial));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto between = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  TrialJitter j;
  j.amplitude = between(0.85, 1.15);
  j.freq_scale = between(0.99, 1.01);
  j.shift = between(-0.01, 0.01);
  j.phase = between(-0.2, 0.2);
  double burst_center = between(0.2, 0.8);
  double sig_freq = signature_frequency(subject) * between(0.97, 1.03);
  double sig_phase = between(0.0, kTwoPi);

  std::vector<double> s = shared_sources(tone, T, j);
  std::vector<double> x(T * C, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    double u = T > 1 ? static_cast<double>(t) / static_cast<double>(T - 1) : 0.0;
    double env = std::exp(-0.5 * std::pow((u - burst_center) / kBurstWidth, 2));
    double g0 = spec.signature_gain * env * std::sin(kTwoPi * sig_freq * u + sig_phase);
    double g1 = spec.signature_gain * env * std::cos(kTwoPi * sig_freq * u + sig_phase);
    for (std::size_t c = 0; c < C; ++c) {
      double v = 0.0;
      for (std::size_t k = 0; k < kSharedSources; ++k) v += A(c, k) * s[t * kSharedSources + k];
      x[t * C + c] = spec.shared_gain * v + B[c * 2] * g0 + B[c * 2 + 1] * g1;
    }
  }
  if (spec.noise) {
    std::normal_distribution<double> n(0.0, 1.0);
    double scale = std::pow(10.0, -spec.snr_db / 10.0);
    std::vector<double> sd(C);
    for (std::size_t c = 0; c < C; ++c) sd[c] = std::sqrt(A.row(c).squaredNorm() * kSourcePower * scale);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t c = 0; c < C; ++c) x[t * C + c] += sd[c] * n(rng);
    }
  }
  zscore_channels(x, T, C);
  return x;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(b.size());
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

std::vector<double> unmix(std::span<const double> x, const std::vector<double>& pinv, std::size_t T, std::size_t C) {
  std::vector<double> u(T * kSharedSources, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t k = 0; k < kSharedSources; ++k) {
      double v = 0.0;
      for (std::size_t c = 0; c < C; ++c) v += pinv[k * C + c] * x[t * C + c];
      u[t * kSharedSources + k] = v;
    }
  }
  return u;
}

}  // namespace

void GenSpec::validate() const {
  if (subjects < 2) throw ValidationError("gen spec: at least 2 subjects are required");
  if (channels.size() != subjects) {
    throw ValidationError("gen spec: " + std::to_string(channels.size()) + " channel counts for " +
                          std::to_string(subjects) + " subjects");
  }
  for (std::size_t c : channels) {
    if (c < kSharedSources) {
      throw ValidationError("gen spec: every subject needs at least " + std::to_string(kSharedSources) + " channels");
    }
  }
  if (std::set<std::size_t>(channels.begin(), channels.end()).size() < 2) {
    throw ValidationError("gen spec: channel counts must differ between at least two subjects");
  }
  if (T < 16) throw ValidationError("gen spec: T must be at least 16");
  if (samples_per_tone == 0) throw ValidationError("gen spec: samples_per_tone must be positive");
  if (shared_gain < 0.0 || signature_gain < 0.0) throw ValidationError("gen spec: gains must be non-negative");
}

std::vector<double> tone_template(int tone, std::size_t T) {
  if (tone < 1 || tone > static_cast<int>(kTones)) {
    throw ValidationError("tone_template: tone must be 1..4, got " + std::to_string(tone));
  }
  std::vector<double> c(T);
  for (std::size_t t = 0; t < T; ++t) {
    double u = T > 1 ? static_cast<double>(t) / static_cast<double>(T - 1) : 0.0;
    switch (tone) {
      case 1: c[t] = 0.85; break;
      case 2: c[t] = 0.2 + 0.65 * u; break;
      case 3: c[t] = 0.55 - 0.45 * std::sin(std::numbers::pi * u); break;
      default: c[t] = 0.85 - 0.65 * u; break;
    }
  }
  return c;
}

Tensor tone_sources(int tone, std::size_t T) {
  return Tensor({T, kSharedSources}, shared_sources(tone, T, TrialJitter{}));
}

double signature_frequency(std::size_t subject) { return 16.0 + 6.0 * static_cast<double>(subject); }

std::span<const float> SubjectDataset::sample(std::size_t n) const {
  if (n >= size()) throw ValidationError("dataset: sample " + std::to_string(n) + " out of range");
  return {signal.data() + n * T * channels, T * channels};
}

Tensor SubjectDataset::batch(std::span<const std::size_t> indices) const {
  Tensor out({indices.size(), T, channels});
  std::size_t stride = T * channels;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    auto s = sample(indices[b]);
    std::copy(s.begin(), s.end(), out.ptr() + b * stride);
  }
  return out;
}

Tensor mixing_matrix(const GenSpec& spec, std::size_t subject) {
  if (subject >= spec.channels.size()) throw ValidationError("mixing_matrix: unknown subject " + std::to_string(subject));
  std::size_t C = spec.channels[subject];
  auto rng = make_stream(spec.seed, "data/mixing/" + std::to_string(subject));
  std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(kSharedSources)));
  for (;;) {
    Tensor a({C, kSharedSources});
    for (auto& v : a.data()) v = n(rng);
    Eigen::JacobiSVD<Matrix> svd(to_matrix(a));
    const auto& sv = svd.singularValues();
    if (sv(sv.size() - 1) > 0.0 && sv(0) / sv(sv.size() - 1) <= kMaxCondition) return a;
  }
}

std::vector<SubjectDataset> generate_dataset(const GenSpec& spec) {
  spec.validate();
  std::vector<SubjectDataset> out;
  for (std::size_t i = 0; i < spec.subjects; ++i) {
    Matrix A = to_matrix(mixing_matrix(spec, i));
    Tensor B = signature_mixing(spec, i);
    SubjectDataset d;
    d.subject = i;
    d.channels = spec.channels[i];
    d.T = spec.T;
    d.tone = tone_sequence(spec, i);
    d.signal.reserve(d.tone.size() * spec.T * d.channels);
    for (std::size_t n = 0; n < d.tone.size(); ++n) {
      std::vector<double> x = make_trial(spec, i, n, d.tone[n], A, B);
      for (double v : x) d.signal.push_back(static_cast<float>(v));
      d.trial.push_back(n);
    }
    out.push_back(std::move(d));
  }
  return out;
}

Split split(const SubjectDataset& data, std::uint64_t seed) {
  if (data.size() == 0) throw ValidationError("split: dataset is empty");
  Split s;
  for (int tone = 1; tone <= static_cast<int>(kTones); ++tone) {
    std::vector<std::size_t> idx;
    for (std::size_t n = 0; n < data.size(); ++n) {
      if (data.tone[n] == tone) idx.push_back(n);
    }
    if (idx.empty()) continue;
    if (idx.size() < 5) {
      throw ValidationError("split: tone " + std::to_string(tone) + " of subject " + std::to_string(data.subject) +
                            " has only " + std::to_string(idx.size()) + " samples");
    }
    auto rng = make_stream(seed, "split/" + std::to_string(data.subject) + "/" + std::to_string(tone));
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n = static_cast<double>(idx.size());
    auto n_test = static_cast<std::size_t>(std::lround(0.2 * n));
    auto n_val = static_cast<std::size_t>(std::lround(0.16 * n));
    std::size_t n_train = idx.size() - n_test - n_val;
    s.train.insert(s.train.end(), idx.begin(), idx.begin() + n_train);
    s.val.insert(s.val.end(), idx.begin() + n_train, idx.begin() + n_train + n_val);
    s.test.insert(s.test.end(), idx.begin() + n_train + n_val, idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

ToneOracle::ToneOracle(const GenSpec& spec) : spec_(spec) {
  spec.validate();
  for (std::size_t i = 0; i < spec.subjects; ++i) {
    std::size_t C = spec.channels[i];
    Matrix A = to_matrix(mixing_matrix(spec, i));
    Matrix P = A.completeOrthogonalDecomposition().pseudoInverse();  // [S, C]
    SubjectTemplates st;
    st.channels = C;
    st.unmix.assign(P.data(), P.data() + P.size());
    for (int tone = 1; tone <= static_cast<int>(kTones); ++tone) {
      std::vector<double> s = shared_sources(tone, spec.T, TrialJitter{});
      std::vector<double> x(spec.T * C, 0.0);
      for (std::size_t t = 0; t < spec.T; ++t) {
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t k = 0; k < kSharedSources; ++k) x[t * C + c] += A(c, k) * s[t * kSharedSources + k];
        }
      }
      zscore_channels(x, spec.T, C);
      st.templates.push_back(unmix(x, st.unmix, spec.T, C));
    }
    subjects_.push_back(std::move(st));
  }
}

int ToneOracle::classify(std::span<const float> sample, std::size_t subject) const {
  if (subject >= subjects_.size()) throw ValidationError("oracle: subject " + std::to_string(subject) + " not in spec");
  const SubjectTemplates& st = subjects_[subject];
  if (sample.size() != spec_.T * st.channels) throw ShapeError("oracle: sample size does not match the spec");
  std::vector<double> x(sample.begin(), sample.end());
  std::vector<double> u = unmix(x, st.unmix, spec_.T, st.channels);
  int best = 1;
  double best_score = -INFINITY;
  for (int tone = 1; tone <= static_cast<int>(kTones); ++tone) {
    double score = pearson(u, st.templates[tone - 1]);
    if (score > best_score) {
      best_score = score;
      best = tone;
    }
  }
  return best;
}

int oracle_classify(std::span<const float> sample, std::size_t subject, const GenSpec& spec) {
  return ToneOracle(spec).classify(sample, subject);
}

std::size_t oracle_subject(std::span<const float> sample, std::size_t channels, const GenSpec& spec) {
  std::size_t T = spec.T;
  if (channels == 0 || sample.size() != T * channels) throw ShapeError("oracle_subject: sample size mismatch");
  std::vector<double> cos_t(T), sin_t(T);
  auto band_power = [&](double centre) {
    double total = 0.0;
    for (int df = -2; df <= 2; ++df) {
      double f = std::round(centre) + df;  // cycles per segment
      for (std::size_t t = 0; t < T; ++t) {
        double u = static_cast<double>(t) / static_cast<double>(T - 1);
        cos_t[t] = std::cos(kTwoPi * f * u);
        sin_t[t] = std::sin(kTwoPi * f * u);
      }
      for (std::size_t c = 0; c < channels; ++c) {
        double re = 0.0, im = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
          re += sample[t * channels + c] * cos_t[t];
          im += sample[t * channels + c] * sin_t[t];
        }
        total += re * re + im * im;
      }
    }
    return total / static_cast<double>(channels);
  };
  std::size_t best = 0;
  double best_power = -1.0;
  for (std::size_t i = 0; i < spec.subjects; ++i) {
    double p = band_power(signature_frequency(i));
    if (p > best_power) {
      best_power = p;
      best = i;
    }
  }
  return best;
}

namespace {

std::string spec_text(const GenSpec& spec) {
  std::string s;
  s += "subjects=" + std::to_string(spec.subjects) + "\n";
  s += "channels=";
  for (std::size_t i = 0; i < spec.channels.size(); ++i) s += (i ? "," : "") + std::to_string(spec.channels[i]);
  s += "\nT=" + std::to_string(spec.T) + "\n";
  s += "samples_per_tone=" + std::to_string(spec.samples_per_tone) + "\n";
  s += "snr_db=" + format_double(spec.snr_db) + "\n";
  s += "shared_gain=" + format_double(spec.shared_gain) + "\n";
  s += "signature_gain=" + format_double(spec.signature_gain) + "\n";
  s += std::string("noise=") + (spec.noise ? "true" : "false") + "\n";
  s += "seed=" + std::to_string(spec.seed) + "\n";
  return s;
}

const std::string& require(const std::map<std::string, std::string>& kv, const std::string& key,
                           const std::filesystem::path& file) {
  auto it = kv.find(key);
  if (it == kv.end()) throw IoError(file.string() + ": missing key '" + key + "'");
  return it->second;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const GenSpec& spec, const std::vector<SubjectDataset>& data) {
  std::filesystem::create_directories(dir);
  write_file(dir / "generator", spec_text(spec));
  for (const SubjectDataset& d : data) {
    auto sub = dir / ("subject_" + std::to_string(d.subject));
    std::filesystem::create_directories(sub);
    std::string meta;
    meta += "subject=" + std::to_string(d.subject) + "\n";
    meta += "channels=" + std::to_string(d.channels) + "\n";
    meta += "T=" + std::to_string(d.T) + "\n";
    meta += "samples=" + std::to_string(d.size()) + "\n";
    meta += "seed=" + std::to_string(spec.seed) + "\n";
    write_file(sub / "meta", meta);
    std::string blob;
    append_f32_le(blob, d.signal);
    write_file(sub / "signals.f32", blob);
    std::string labels = "trial,tone\n";
    for (std::size_t n = 0; n < d.size(); ++n) labels += std::to_string(d.trial[n]) + "," + std::to_string(d.tone[n]) + "\n";
    write_file(sub / "labels", labels);
  }
}

LoadedDataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ValidationError("dataset directory not found: " + dir.string());
  LoadedDataset out;
  auto gen_file = dir / "generator";
  auto kv = parse_key_values(read_file(gen_file), gen_file.string());
  GenSpec& spec = out.spec;
  spec.subjects = parse_size(require(kv, "subjects", gen_file), "subjects");
  spec.channels.clear();
  for (const auto& c : split_list(require(kv, "channels", gen_file))) spec.channels.push_back(parse_size(c, "channels"));
  spec.T = parse_size(require(kv, "T", gen_file), "T");
  spec.samples_per_tone = parse_size(require(kv, "samples_per_tone", gen_file), "samples_per_tone");
  spec.snr_db = parse_double(require(kv, "snr_db", gen_file), "snr_db");
  spec.shared_gain = parse_double(require(kv, "shared_gain", gen_file), "shared_gain");
  spec.signature_gain = parse_double(require(kv, "signature_gain", gen_file), "signature_gain");
  spec.noise = parse_bool(require(kv, "noise", gen_file), "noise");
  spec.seed = parse_u64(require(kv, "seed", gen_file), "seed");

  for (std::size_t i = 0; i < spec.subjects; ++i) {
    auto sub = dir / ("subject_" + std::to_string(i));
    auto meta_file = sub / "meta";
    auto meta = parse_key_values(read_file(meta_file), meta_file.string());
    SubjectDataset d;
    d.subject = parse_size(require(meta, "subject", meta_file), "subject");
    d.channels = parse_size(require(meta, "channels", meta_file), "channels");
    d.T = parse_size(require(meta, "T", meta_file), "T");
    std::size_t n = parse_size(require(meta, "samples", meta_file), "samples");
    if (d.subject != i || d.channels != spec.channels.at(i) || d.T != spec.T) {
      throw IoError(meta_file.string() + ": does not match the generator spec");
    }
    std::string blob = read_file(sub / "signals.f32");
    if (blob.size() != n * d.T * d.channels * 4) {
      throw IoError((sub / "signals.f32").string() + ": expected " + std::to_string(n * d.T * d.channels * 4) +
                    " bytes, found " + std::to_string(blob.size()));
    }
    d.signal = decode_f32_le(blob, 0, n * d.T * d.channels);
    auto lines = split_list(read_file(sub / "labels"), '\n');
    if (lines.empty() || lines[0] != "trial,tone" || lines.size() != n + 1) {
      throw IoError((sub / "labels").string() + ": malformed label file");
    }
    for (std::size_t k = 1; k < lines.size(); ++k) {
      auto cols = split_list(lines[k], ',');
      if (cols.size() != 2) throw IoError((sub / "labels").string() + ": malformed row " + std::to_string(k));
      d.trial.push_back(parse_size(cols[0], "trial"));
      d.tone.push_back(static_cast<int>(parse_size(cols[1], "tone")));
    }
    out.subjects.push_back(std::move(d));
  }
  return out;
}

}  // namespace h2dilr
