#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "tcaf/ops.hpp"

namespace tcaf {

/// Which blocks of the token-pair attention matrix are active. The class block
/// covers every pair involving the classification token, the cross block
/// audio<->visual pairs, the self block audio<->audio and visual<->visual pairs.
struct AttentionVariant {
  bool class_block = true;
  bool cross_block = true;
  bool self_block = false;

  /// Accepts "cross", "self", "full", the same with a "-notoken" suffix, or
  /// block sums such as "c+x", "c+self+x", "self+x".
  static AttentionVariant parse(std::string_view name);
  std::string name() const;

  friend bool operator==(const AttentionVariant&, const AttentionVariant&) = default;
};

struct DropoutRates {
  double enc = 0.3;     // embedding blocks
  double pos = 0.2;     // position encoder
  double attn = 0.3;    // attention output and feed-forward
  double proj_w = 0.1;  // word projection and its decoder
  double proj_o = 0.1;  // output projection and its decoder

  friend bool operator==(const DropoutRates&, const DropoutRates&) = default;
};

struct ArchConfig {
  std::size_t d_in_a = 128;
  std::size_t d_in_v = 4096;
  std::size_t d_fhidd = 512;
  std::size_t d_dim = 300;
  std::size_t d_out = 64;
  std::size_t d_pos = 64;
  std::size_t d_ff = 128;
  std::size_t heads = 8;
  std::size_t d_head = 64;
  std::size_t layers = 6;
  AttentionVariant variant;
  bool use_temporal_embeddings = true;
  bool use_feed_forward = true;
  DropoutRates dropout;
  MaskSemantics mask_semantics = MaskSemantics::exclude;
  double fourier_min_hz = 1.0 / 300.0;
  double fourier_max_hz = 2.0;
  double layer_norm_eps = 1e-5;
  double batch_norm_eps = 1e-5;
  double batch_norm_momentum = 0.1;

  bool use_class_token() const { return variant.class_block; }
  std::size_t attention_width() const { return heads * d_head; }

  /// Throws ConfigError on the first violated constraint.
  void validate() const;

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

std::string_view to_string(MaskSemantics semantics);
MaskSemantics parse_mask_semantics(std::string_view name);

}  // namespace tcaf
