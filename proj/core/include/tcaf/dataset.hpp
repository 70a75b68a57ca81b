#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tcaf/errors.hpp"
#include "tcaf/model.hpp"
#include "tcaf/rng.hpp"
#include "tcaf/tensor.hpp"

namespace tcaf {

inline constexpr std::uint32_t kBundleVersion = 1;

/// One clip: row-major float32 features with a start time per row.
struct AVSample {
  std::string id;
  int class_id = 0;
  std::vector<float> audio;  // [T_a x d_in_a]
  std::vector<double> audio_times;
  std::vector<float> visual;  // [T_v x d_in_v]
  std::vector<double> visual_times;

  std::size_t audio_len() const { return audio_times.size(); }
  std::size_t visual_len() const { return visual_times.size(); }
  ClipView view() const { return {audio, audio_times, visual, visual_times}; }

  friend bool operator==(const AVSample&, const AVSample&) = default;
};

enum class Split : std::uint8_t { train_seen, val_seen, val_unseen, test_seen, test_unseen };
inline constexpr std::array<Split, 5> kAllSplits = {Split::train_seen, Split::val_seen, Split::val_unseen,
                                                   Split::test_seen, Split::test_unseen};
std::string_view to_string(Split split);
Split parse_split(std::string_view name);

/// Which class partition a class belongs to.
enum class ClassRole : std::uint8_t { seen, val_unseen, test_unseen };
std::string_view to_string(ClassRole role);
ClassRole parse_class_role(std::string_view name);

struct DatasetBundle {
  std::size_t d_in_a = 0;
  std::size_t d_in_v = 0;
  std::size_t d_dim = 0;
  std::vector<std::string> class_names;  // indexed by class id, normalized
  std::vector<ClassRole> class_roles;
  std::vector<std::vector<float>> class_embeddings;  // w^j, indexed by class id
  std::vector<AVSample> samples;
  std::array<std::vector<std::size_t>, 5> splits;  // sample indices per Split

  std::size_t num_classes() const { return class_names.size(); }
  const std::vector<std::size_t>& split(Split s) const { return splits[static_cast<std::size_t>(s)]; }
  std::vector<std::size_t>& split(Split s) { return splits[static_cast<std::size_t>(s)]; }
  /// Classes with the given role, ascending.
  std::vector<int> classes_with_role(ClassRole role) const;
  /// Distinct classes present in the given splits, ascending.
  std::vector<int> classes_in(std::span<const Split> splits) const;
  /// Word embeddings of `classes` stacked as [k x d_dim].
  template <typename T>
  Tensor<T> embedding_matrix(std::span<const int> classes) const;

  /// Throws DataError on the first violated structural invariant.
  void validate() const;

  friend bool operator==(const DatasetBundle&, const DatasetBundle&) = default;
};

/// Distinct failure categories of load_bundle.
class BundleError : public DataError {
 public:
  enum class Kind { bad_magic, version_mismatch, truncated_blob, unknown_sample, missing_embedding, width_mismatch,
                    malformed_manifest, invalid_structure };
  BundleError(Kind kind, const std::string& message) : DataError(message), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Directory layout: manifest.json, features.avfb, class_embeddings.txt.
void write_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir);
DatasetBundle load_bundle(const std::filesystem::path& dir);

/// Lowercase with spaces replaced by underscores.
std::string normalize_class_name(std::string_view name);

using EmbeddingTable = std::map<std::string, std::vector<float>>;

/// One record per line: name followed by `expected_dim` floats.
EmbeddingTable load_word_embeddings(const std::filesystem::path& path, std::size_t expected_dim);
EmbeddingTable parse_word_embeddings(std::string_view text, std::size_t expected_dim);
/// Records in the given order; floats printed in shortest round-trip form.
std::string format_word_embeddings(const std::vector<std::pair<std::string, std::vector<float>>>& records);
void write_word_embeddings(const std::filesystem::path& path,
                           const std::vector<std::pair<std::string, std::vector<float>>>& records);

struct SynthConfig {
  std::size_t k_seen = 10;
  std::size_t k_val_unseen = 3;
  std::size_t k_test_unseen = 5;
  std::size_t samples_per_class = 30;
  std::size_t audio_len_min = 4;
  std::size_t audio_len_max = 8;
  std::size_t visual_len_min = 6;
  std::size_t visual_len_max = 12;
  double audio_step = 0.96;
  double visual_step = 0.64;
  std::size_t d_in_a = 128;
  std::size_t d_in_v = 512;
  std::size_t d_dim = 300;
  /// Prototypes are drawn in a latent space of this size and lifted to d_dim;
  /// latent_dim == d_dim draws them directly in R^d_dim.
  std::size_t latent_dim = 300;
  double sigma_sep = 1.0;
  double sigma_obs = 0.1;
  /// Amplitude of the slow per-class sinusoidal drift along the clip.
  double drift = 0.2;
  /// Fraction of each seen class's samples assigned to val_seen and test_seen.
  double val_seen_fraction = 0.2;
  double test_seen_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

DatasetBundle synth_generate(const SynthConfig& config);

/// Caps both modalities to a shared time window of at most `max_len` tokens of
/// the longer modality. Train mode draws the window start, eval mode centres it.
AVSample trim_sequence(const AVSample& sample, std::size_t max_len, Mode mode, RngStream& rng);

/// Replaces the first ceil(fraction * T_a) audio tokens with N(0, sigma^2) draws.
AVSample inject_audio_noise(const AVSample& sample, std::size_t d_in_a, double fraction, double sigma, RngStream& rng);

/// Population standard deviation of all audio feature values in the given samples.
double audio_feature_std(const DatasetBundle& bundle, std::span<const std::size_t> indices);

}  // namespace tcaf
