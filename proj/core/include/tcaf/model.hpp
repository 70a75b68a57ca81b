#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tcaf/arch_config.hpp"
#include "tcaf/ops.hpp"
#include "tcaf/rng.hpp"
#include "tcaf/tensor.hpp"

namespace tcaf {

enum class Modality { audio, visual };
enum class TokenKind : std::uint8_t { class_token, audio, visual };

/// One clip's pre-extracted features: row-major [T x d_in] float32 blocks
/// with a timestamp (seconds) per row.
struct ClipView {
  std::span<const float> audio;
  std::span<const double> audio_times;
  std::span<const float> visual;
  std::span<const double> visual_times;
};

/// Position-aware tokens of a batch, packed row-wise. Each sample occupies a
/// contiguous block [class token?, audio..., visual...].
template <typename T>
struct TokenSequence {
  struct Block {
    std::size_t offset = 0;
    std::size_t audio = 0;
    std::size_t visual = 0;
    bool has_class_token = false;
    std::size_t length() const { return (has_class_token ? 1 : 0) + audio + visual; }
  };

  Tensor<T> tokens;  // [rows x d_dim]
  std::vector<TokenKind> kinds;
  std::vector<double> timestamps;  // 0 for the class token
  std::vector<Block> blocks;

  std::size_t rows() const { return kinds.size(); }
};

/// Allowed (query, key) pairs for one sample laid out as [c?, audio, visual].
Mask attention_mask(const AttentionVariant& variant, bool has_class_token, std::size_t audio_len,
                    std::size_t visual_len);

/// d_pos/2 frequencies spaced geometrically over [min_hz, max_hz].
std::vector<double> fourier_frequencies(std::size_t d_pos, double min_hz, double max_hz);
/// [sin(2 pi f_k t), cos(2 pi f_k t)] pairs for each frequency.
std::vector<double> fourier_time_embedding(double t, std::size_t d_pos, double min_hz = 1.0 / 300.0,
                                           double max_hz = 2.0);

/// Nearest class prototype by Euclidean distance; ties go to the smallest id.
template <typename T>
int predict_class(std::span<const T> theta_o, const Tensor<T>& class_thetas, std::span<const int> class_ids);

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out]
  Tensor<T> operator()(const Tensor<T>& x) const { return add_bias(matmul(x, weight), bias); }
};

template <typename T>
struct Affine {
  Tensor<T> gain;
  Tensor<T> bias;
};

/// Linear map followed by batch norm, ReLU and dropout.
template <typename T>
struct DenseStage {
  std::string name;
  Linear<T> linear;
  Affine<T> norm;
};

template <typename T>
struct TransformerLayer {
  Affine<T> attn_norm;
  Linear<T> query, key, value, out;
  Affine<T> ff_norm;
  Linear<T> ff_in, ff_out;
};

enum class Decoder { output, word };

/// The full network: modality embedding blocks, position encoder,
/// classification token, transformer layers, projection heads and decoders.
template <typename T>
class TcafModel {
 public:
  using Params = std::vector<std::pair<std::string, Tensor<T>>>;

  TcafModel(ArchConfig config, std::uint64_t init_seed);
  TcafModel(const TcafModel&) = delete;
  TcafModel& operator=(const TcafModel&) = delete;
  TcafModel(TcafModel&&) noexcept = default;
  TcafModel& operator=(TcafModel&&) noexcept = default;

  const ArchConfig& config() const { return config_; }

  /// Named learnable tensors in registration order.
  const Params& parameters() const { return params_; }
  Tensor<T>& parameter(std::string_view name);
  const Tensor<T>& parameter(std::string_view name) const;
  std::size_t parameter_count() const;

  /// Parameters that receive gradients when the listed inputs and losses are in use.
  std::vector<std::pair<std::string, Tensor<T>>> trainable(bool audio, bool visual, bool decoders) const;

  std::map<std::string, BatchNormState<T>>& norm_states() { return norm_states_; }
  const std::map<std::string, BatchNormState<T>>& norm_states() const { return norm_states_; }

  /// Deep copy of parameters and running statistics.
  TcafModel clone() const;
  void zero_grad();

  // Pipeline stages, exposed individually for tests and ablations.
  Tensor<T> embed_modality(const Tensor<T>& features, Modality modality, Mode mode, RngStream& rng);
  Tensor<T> position_encode(const Tensor<T>& embedded, Modality modality, std::span<const double> timestamps,
                            Mode mode, RngStream& rng) const;
  TokenSequence<T> build_token_sequence(const Tensor<T>& audio_tokens, const Tensor<T>& visual_tokens,
                                        std::span<const std::pair<std::size_t, std::size_t>> lengths,
                                        std::span<const double> audio_times,
                                        std::span<const double> visual_times) const;
  Tensor<T> multi_head_attention(const Tensor<T>& x, std::span<const AttentionSegment> segments,
                                 std::size_t layer, Mode mode, RngStream& rng) const;
  Tensor<T> feed_forward(const Tensor<T>& x, std::size_t layer, Mode mode, RngStream& rng) const;
  /// Returns c_o per sample: [samples x d_dim].
  Tensor<T> transformer_forward(const TokenSequence<T>& seq, Mode mode, RngStream& rng) const;
  Tensor<T> project_output(const Tensor<T>& pooled, Mode mode, RngStream& rng);
  Tensor<T> project_word(const Tensor<T>& word_embeddings, Mode mode, RngStream& rng);
  Tensor<T> decode(const Tensor<T>& theta, Decoder which, Mode mode, RngStream& rng);

  /// Features -> packed token sequence.
  TokenSequence<T> tokenize(std::span<const ClipView> clips, Mode mode, RngStream& rng);
  /// Features -> theta_o: [samples x d_out].
  Tensor<T> encode(std::span<const ClipView> clips, Mode mode, RngStream& rng);

  std::vector<AttentionSegment> attention_segments(const TokenSequence<T>& seq) const;

 private:
  Tensor<T>& add_param(std::string name, Tensor<T> value);
  Linear<T> make_linear(const std::string& name, std::size_t in, std::size_t out, RngStream& rng);
  Affine<T> make_affine(const std::string& name, std::size_t width);
  DenseStage<T> make_stage(const std::string& name, std::size_t in, std::size_t out, RngStream& rng);
  Tensor<T> run_stages(std::vector<DenseStage<T>>& stages, const Tensor<T>& x, double rate, Mode mode,
                       RngStream& rng);

  ArchConfig config_;
  Params params_;
  std::map<std::string, BatchNormState<T>> norm_states_;

  // Handles sharing storage with params_.
  std::vector<DenseStage<T>> audio_enc_, visual_enc_, out_proj_, word_proj_, out_dec_, word_dec_;
  Tensor<T> pos_audio_, pos_visual_, class_token_;
  Linear<T> pos_map_audio_, pos_map_visual_;
  std::vector<TransformerLayer<T>> layers_;
};

extern template class TcafModel<float>;
extern template class TcafModel<double>;

}  // namespace tcaf
