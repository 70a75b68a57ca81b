#include "tcaf/arch_config.hpp"

#include <string>

namespace tcaf {

AttentionVariant AttentionVariant::parse(std::string_view name) {
  if (name == "cross" || name == "c+x") return {true, true, false};
  if (name == "self" || name == "c+self") return {true, false, true};
  if (name == "full" || name == "c+self+x" || name == "c+x+self") return {true, true, true};
  if (name == "cross-notoken" || name == "x") return {false, true, false};
  if (name == "self-notoken") return {false, false, true};
  if (name == "full-notoken" || name == "self+x" || name == "x+self") return {false, true, true};
  throw ConfigError("unknown attention variant '" + std::string(name) + "'");
}

std::string AttentionVariant::name() const {
  std::string base;
  if (cross_block && self_block) base = "full";
  else if (cross_block) base = "cross";
  else if (self_block) base = "self";
  else base = "none";
  return class_block ? base : base + "-notoken";
}

void ArchConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw ConfigError(std::string("arch: ") + what + " must be positive");
  };
  positive(d_in_a, "d_in_a");
  positive(d_in_v, "d_in_v");
  positive(d_fhidd, "d_fhidd");
  positive(d_dim, "d_dim");
  positive(d_out, "d_out");
  positive(d_pos, "d_pos");
  positive(d_ff, "d_ff");
  positive(heads, "heads");
  positive(d_head, "d_head");
  positive(layers, "layers");
  if (d_pos % 2 != 0) throw ConfigError("arch: d_pos must be even, got " + std::to_string(d_pos));
  if (!variant.cross_block && !variant.self_block && !variant.class_block) {
    throw ConfigError("arch: attention variant enables no block");
  }
  for (double r : {dropout.enc, dropout.pos, dropout.attn, dropout.proj_w, dropout.proj_o}) {
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("arch: dropout rates must lie in [0, 1)");
  }
  if (!(fourier_min_hz > 0.0 && fourier_max_hz >= fourier_min_hz)) {
    throw ConfigError("arch: Fourier frequency range must satisfy 0 < min <= max");
  }
  if (!(batch_norm_momentum > 0.0 && batch_norm_momentum <= 1.0)) {
    throw ConfigError("arch: batch_norm_momentum must lie in (0, 1]");
  }
}

std::string_view to_string(MaskSemantics semantics) {
  return semantics == MaskSemantics::exclude ? "exclude" : "zero_logit";
}

MaskSemantics parse_mask_semantics(std::string_view name) {
  if (name == "exclude") return MaskSemantics::exclude;
  if (name == "zero_logit") return MaskSemantics::zero_logit;
  throw ConfigError("unknown mask semantics '" + std::string(name) + "'");
}

}  // namespace tcaf
