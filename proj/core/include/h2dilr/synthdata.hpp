#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "h2dilr/tensor.hpp"

namespace h2dilr {

inline constexpr std::size_t kTones = 4;
inline constexpr std::size_t kSharedSources = 3;

/// Generator settings for synthetic multi-subject recordings.
struct GenSpec {
  std::size_t subjects = 4;
  std::vector<std::size_t> channels{12, 19, 27, 33};
  std::size_t T = 1000;
  std::size_t samples_per_tone = 250;
  double snr_db = 6.0;
  double shared_gain = 1.0;     // 0 removes the tone-dependent component
  double signature_gain = 1.0;  // 0 removes the subject signature
  bool noise = true;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Pitch contour in [0, 1] for tone 1..4 (level, rising, dip, falling).
std::vector<double> tone_template(int tone, std::size_t T);

/// Noiseless, unjittered shared sources [T, kSharedSources] for one tone:
/// a sine/cosine carrier whose frequency follows the contour, and the
/// contour itself.
Tensor tone_sources(int tone, std::size_t T);

/// Recordings of one subject: signals [N, T, C] stored as 32-bit floats.
struct SubjectDataset {
  std::size_t subject = 0;
  std::size_t channels = 0;
  std::size_t T = 0;
  std::vector<float> signal;
  std::vector<int> tone;  // 1..4
  std::vector<std::size_t> trial;

  std::size_t size() const { return tone.size(); }
  std::span<const float> sample(std::size_t n) const;
  /// Stacks the selected samples into a [B, T, C] tensor.
  Tensor batch(std::span<const std::size_t> indices) const;
};

/// Deterministic from spec.seed; every (subject, trial) uses its own stream.
std::vector<SubjectDataset> generate_dataset(const GenSpec& spec);

/// Per-subject fixed mixing matrix [C_i, kSharedSources].
Tensor mixing_matrix(const GenSpec& spec, std::size_t subject);

/// Centre of subject i's signature band, in cycles per segment.
double signature_frequency(std::size_t subject);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Tone-stratified 64/16/20 split, deterministic per seed.
Split split(const SubjectDataset& data, std::uint64_t seed);

/// Matched-filter tone decoder that knows the generator: unmixes with the
/// pseudo-inverse of the subject's mixing matrix and correlates against the
/// four noiseless tone responses.
class ToneOracle {
 public:
  explicit ToneOracle(const GenSpec& spec);
  int classify(std::span<const float> sample, std::size_t subject) const;

 private:
  struct SubjectTemplates {
    std::size_t channels;
    std::vector<double> unmix;  // [S, C]
    std::vector<std::vector<double>> templates;  // per tone, [T, S]
  };
  GenSpec spec_;
  std::vector<SubjectTemplates> subjects_;
};

int oracle_classify(std::span<const float> sample, std::size_t subject, const GenSpec& spec);

/// Band-power subject decoder: picks the subject whose signature band holds
/// the most channel-averaged spectral power.
std::size_t oracle_subject(std::span<const float> sample, std::size_t channels, const GenSpec& spec);

/// One directory per subject (meta, signals.f32, labels) plus a root
/// `generator` file holding the spec.
void save_dataset(const std::filesystem::path& dir, const GenSpec& spec, const std::vector<SubjectDataset>& data);

struct LoadedDataset {
  GenSpec spec;
  std::vector<SubjectDataset> subjects;
};
LoadedDataset load_dataset(const std::filesystem::path& dir);

}  // namespace h2dilr
