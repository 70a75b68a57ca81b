#include "tcaf/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace tcaf {

Mask attention_mask(const AttentionVariant& variant, bool has_class_token, std::size_t audio_len,
                    std::size_t visual_len) {
  if (variant.class_block && !has_class_token) {
    throw ConfigError("attention variant '" + variant.name() + "' needs a classification token");
  }
  if (!variant.class_block && has_class_token) {
    throw ConfigError("attention variant '" + variant.name() + "' leaves the classification token unattended");
  }
  const std::size_t lead = has_class_token ? 1 : 0;
  const std::size_t n = lead + audio_len + visual_len;
  if (n == 0) throw DimensionError("attention_mask: empty sequence");
  auto kind = [&](std::size_t i) {
    if (i < lead) return TokenKind::class_token;
    return i < lead + audio_len ? TokenKind::audio : TokenKind::visual;
  };
  Mask mask(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const TokenKind ki = kind(i), kj = kind(j);
      const bool involves_class = ki == TokenKind::class_token || kj == TokenKind::class_token;
      bool allowed = false;
      if (involves_class) allowed = variant.class_block;
      else if (ki != kj) allowed = variant.cross_block;
      else allowed = variant.self_block;
      mask.set(i, j, allowed);
    }
  }
  return mask;
}

std::vector<double> fourier_frequencies(std::size_t d_pos, double min_hz, double max_hz) {
  if (d_pos == 0 || d_pos % 2 != 0) throw ConfigError("Fourier embedding: d_pos must be even and positive, got " + std::to_string(d_pos));
  const std::size_t count = d_pos / 2;
  std::vector<double> freqs(count);
  for (std::size_t k = 0; k < count; ++k) {
    const double frac = count == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(count - 1);
    freqs[k] = min_hz * std::pow(max_hz / min_hz, frac);
  }
  return freqs;
}

std::vector<double> fourier_time_embedding(double t, std::size_t d_pos, double min_hz, double max_hz) {
  const auto freqs = fourier_frequencies(d_pos, min_hz, max_hz);
  std::vector<double> out(d_pos);
  for (std::size_t k = 0; k < freqs.size(); ++k) {
    const double phase = 2.0 * std::numbers::pi * freqs[k] * t;
    out[2 * k] = std::sin(phase);
    out[2 * k + 1] = std::cos(phase);
  }
  return out;
}

template <typename T>
int predict_class(std::span<const T> theta_o, const Tensor<T>& class_thetas, std::span<const int> class_ids) {
  if (class_ids.empty()) throw DataError("predict_class: empty class table");
  if (class_thetas.rank() != 2 || class_thetas.dim(0) != class_ids.size() || class_thetas.dim(1) != theta_o.size()) {
    throw DimensionError("predict_class: class table " + shape_str(class_thetas.shape()) + " vs " +
                         std::to_string(class_ids.size()) + " ids of width " + std::to_string(theta_o.size()));
  }
  const std::size_t d = theta_o.size();
  int best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < class_ids.size(); ++c) {
    double dist = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = static_cast<double>(class_thetas.at(c, j)) - static_cast<double>(theta_o[j]);
      dist += diff * diff;
    }
    dist = std::sqrt(dist);
    if (dist < best_dist || (dist == best_dist && class_ids[c] < best)) {
      best_dist = dist;
      best = class_ids[c];
    }
  }
  return best;
}

template <typename T>
TcafModel<T>::TcafModel(ArchConfig config, std::uint64_t init_seed) : config_(std::move(config)) {
  config_.validate();
  RngStream rng(init_seed, "init");
  const auto& c = config_;

  audio_enc_ = {make_stage("a_enc.0", c.d_in_a, c.d_fhidd, rng), make_stage("a_enc.1", c.d_fhidd, c.d_dim, rng)};
  visual_enc_ = {make_stage("v_enc.0", c.d_in_v, c.d_fhidd, rng), make_stage("v_enc.1", c.d_fhidd, c.d_dim, rng)};

  auto small_normal = [&](std::size_t n) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, 0.02));
    return v;
  };
  pos_audio_ = add_param("pos_a", Tensor<T>(Shape{c.d_pos}, small_normal(c.d_pos)));
  pos_visual_ = add_param("pos_v", Tensor<T>(Shape{c.d_pos}, small_normal(c.d_pos)));
  pos_map_audio_ = make_linear("g_a", c.d_dim + c.d_pos, c.d_dim, rng);
  pos_map_visual_ = make_linear("g_v", c.d_dim + c.d_pos, c.d_dim, rng);
  if (c.use_class_token()) {
    class_token_ = add_param("class_token", Tensor<T>(Shape{1, c.d_dim}, small_normal(c.d_dim)));
  }

  const std::size_t width = c.attention_width();
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    TransformerLayer<T> layer;
    layer.attn_norm = make_affine(p + "attn_norm", c.d_dim);
    layer.query = make_linear(p + "query", c.d_dim, width, rng);
    layer.key = make_linear(p + "key", c.d_dim, width, rng);
    layer.value = make_linear(p + "value", c.d_dim, width, rng);
    layer.out = make_linear(p + "out", width, c.d_dim, rng);
    if (c.use_feed_forward) {
      layer.ff_norm = make_affine(p + "ff_norm", c.d_dim);
      layer.ff_in = make_linear(p + "ff_in", c.d_dim, c.d_ff, rng);
      layer.ff_out = make_linear(p + "ff_out", c.d_ff, c.d_dim, rng);
    }
    layers_.push_back(std::move(layer));
  }

  out_proj_ = {make_stage("o_proj.0", c.d_dim, c.d_fhidd, rng), make_stage("o_proj.1", c.d_fhidd, c.d_out, rng)};
  word_proj_ = {make_stage("w_proj.0", c.d_dim, c.d_out, rng)};
  out_dec_ = {make_stage("d_o.0", c.d_out, c.d_fhidd, rng), make_stage("d_o.1", c.d_fhidd, c.d_dim, rng)};
  word_dec_ = {make_stage("d_w.0", c.d_out, c.d_dim, rng)};
}

template <typename T>
Tensor<T>& TcafModel<T>::add_param(std::string name, Tensor<T> value) {
  value.set_requires_grad(true);
  params_.emplace_back(std::move(name), std::move(value));
  return params_.back().second;
}

template <typename T>
Linear<T> TcafModel<T>::make_linear(const std::string& name, std::size_t in, std::size_t out, RngStream& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<T> w(in * out);
  for (auto& x : w) x = static_cast<T>(rng.uniform(-bound, bound));
  Linear<T> lin;
  lin.weight = add_param(name + ".weight", Tensor<T>(Shape{in, out}, std::move(w)));
  lin.bias = add_param(name + ".bias", Tensor<T>::zeros(Shape{out}));
  return lin;
}

template <typename T>
Affine<T> TcafModel<T>::make_affine(const std::string& name, std::size_t width) {
  Affine<T> a;
  a.gain = add_param(name + ".gain", Tensor<T>::full(Shape{width}, T(1)));
  a.bias = add_param(name + ".bias", Tensor<T>::zeros(Shape{width}));
  return a;
}

template <typename T>
DenseStage<T> TcafModel<T>::make_stage(const std::string& name, std::size_t in, std::size_t out, RngStream& rng) {
  DenseStage<T> s;
  s.name = name;
  s.linear = make_linear(name + ".linear", in, out, rng);
  s.norm = make_affine(name + ".bn", out);
  norm_states_.emplace(name + ".bn", BatchNormState<T>(out));
  return s;
}

template <typename T>
Tensor<T>& TcafModel<T>::parameter(std::string_view name) {
  for (auto& [n, t] : params_)
    if (n == name) return t;
  throw ConfigError("unknown parameter '" + std::string(name) + "'");
}

template <typename T>
const Tensor<T>& TcafModel<T>::parameter(std::string_view name) const {
  for (const auto& [n, t] : params_)
    if (n == name) return t;
  throw ConfigError("unknown parameter '" + std::string(name) + "'");
}

template <typename T>
std::size_t TcafModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> TcafModel<T>::trainable(bool audio, bool visual, bool decoders) const {
  auto starts = [](const std::string& s, std::string_view prefix) { return s.rfind(prefix, 0) == 0; };
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (const auto& [name, t] : params_) {
    if (!audio && (starts(name, "a_enc.") || starts(name, "g_a.") || name == "pos_a")) continue;
    if (!visual && (starts(name, "v_enc.") || starts(name, "g_v.") || name == "pos_v")) continue;
    if (!decoders && (starts(name, "d_o.") || starts(name, "d_w."))) continue;
    out.emplace_back(name, t);
  }
  return out;
}

template <typename T>
TcafModel<T> TcafModel<T>::clone() const {
  TcafModel copy(config_, 0);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto src = params_[i].second.data();
    auto dst = copy.params_[i].second.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  copy.norm_states_ = norm_states_;
  return copy;
}

template <typename T>
void TcafModel<T>::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

template <typename T>
Tensor<T> TcafModel<T>::run_stages(std::vector<DenseStage<T>>& stages, const Tensor<T>& x, double rate, Mode mode,
                                   RngStream& rng) {
  Tensor<T> h = x;
  for (auto& s : stages) {
    h = s.linear(h);
    h = batch_norm(h, s.norm.gain, s.norm.bias, norm_states_.at(s.name + ".bn"), mode, config_.batch_norm_momentum,
                   config_.batch_norm_eps);
    h = relu(h);
    h = dropout(h, rate, mode, rng);
  }
  return h;
}

template <typename T>
Tensor<T> TcafModel<T>::embed_modality(const Tensor<T>& features, Modality modality, Mode mode, RngStream& rng) {
  const std::size_t d_in = modality == Modality::audio ? config_.d_in_a : config_.d_in_v;
  if (features.rank() != 2 || features.dim(1) != d_in) {
    throw DimensionError(std::string(modality == Modality::audio ? "audio" : "visual") + " features " +
                         shape_str(features.shape()) + " do not have width " + std::to_string(d_in));
  }
  if (features.dim(0) == 0) return Tensor<T>::zeros(Shape{0, config_.d_dim});
  return run_stages(modality == Modality::audio ? audio_enc_ : visual_enc_, features, config_.dropout.enc, mode, rng);
}

template <typename T>
Tensor<T> TcafModel<T>::position_encode(const Tensor<T>& embedded, Modality modality,
                                        std::span<const double> timestamps, Mode mode, RngStream& rng) const {
  const std::size_t rows = embedded.dim(0);
  if (timestamps.size() != rows) {
    throw DimensionError("position_encode: " + std::to_string(timestamps.size()) + " timestamps for " +
                         std::to_string(rows) + " tokens");
  }
  if (rows == 0) return embedded;
  const std::size_t d_pos = config_.d_pos;
  std::vector<T> temporal(rows * d_pos, T(0));
  if (config_.use_temporal_embeddings) {
    for (std::size_t r = 0; r < rows; ++r) {
      const auto e = fourier_time_embedding(timestamps[r], d_pos, config_.fourier_min_hz, config_.fourier_max_hz);
      std::transform(e.begin(), e.end(), temporal.begin() + static_cast<std::ptrdiff_t>(r * d_pos),
                     [](double v) { return static_cast<T>(v); });
    }
  }
  const bool audio = modality == Modality::audio;
  const Tensor<T> pos = add_bias(Tensor<T>(Shape{rows, d_pos}, std::move(temporal)), audio ? pos_audio_ : pos_visual_);
  const Tensor<T> parts[] = {embedded, pos};
  const Tensor<T> mapped = (audio ? pos_map_audio_ : pos_map_visual_)(concat_cols<T>(parts));
  return dropout(mapped, config_.dropout.pos, mode, rng);
}

template <typename T>
TokenSequence<T> TcafModel<T>::build_token_sequence(const Tensor<T>& audio_tokens, const Tensor<T>& visual_tokens,
                                                    std::span<const std::pair<std::size_t, std::size_t>> lengths,
                                                    std::span<const double> audio_times,
                                                    std::span<const double> visual_times) const {
  const bool with_class = config_.use_class_token();
  std::size_t total_audio = 0, total_visual = 0;
  for (const auto& [a, v] : lengths) {
    if (a + v == 0) throw DataError("build_token_sequence: sample with neither audio nor visual tokens");
    total_audio += a;
    total_visual += v;
  }
  if (audio_tokens.dim(0) != total_audio || visual_tokens.dim(0) != total_visual ||
      audio_times.size() != total_audio || visual_times.size() != total_visual) {
    throw DimensionError("build_token_sequence: token counts do not match per-sample lengths");
  }

  std::vector<Tensor<T>> sources;
  if (with_class) sources.push_back(class_token_);
  sources.push_back(audio_tokens);
  sources.push_back(visual_tokens);
  const Tensor<T> source = concat_rows<T>(sources);
  const std::size_t audio_base = with_class ? 1 : 0;
  const std::size_t visual_base = audio_base + total_audio;

  TokenSequence<T> seq;
  std::vector<std::size_t> index;
  std::size_t a_off = 0, v_off = 0;
  for (const auto& [a, v] : lengths) {
    typename TokenSequence<T>::Block block{index.size(), a, v, with_class};
    if (with_class) {
      index.push_back(0);
      seq.kinds.push_back(TokenKind::class_token);
      seq.timestamps.push_back(0.0);
    }
    for (std::size_t t = 0; t < a; ++t) {
      index.push_back(audio_base + a_off + t);
      seq.kinds.push_back(TokenKind::audio);
      seq.timestamps.push_back(audio_times[a_off + t]);
    }
    for (std::size_t t = 0; t < v; ++t) {
      index.push_back(visual_base + v_off + t);
      seq.kinds.push_back(TokenKind::visual);
      seq.timestamps.push_back(visual_times[v_off + t]);
    }
    a_off += a;
    v_off += v;
    seq.blocks.push_back(block);
  }
  seq.tokens = gather_rows(source, index);
  return seq;
}

template <typename T>
std::vector<AttentionSegment> TcafModel<T>::attention_segments(const TokenSequence<T>& seq) const {
  std::vector<AttentionSegment> segments;
  segments.reserve(seq.blocks.size());
  for (const auto& b : seq.blocks) {
    segments.push_back({b.offset, b.length(), attention_mask(config_.variant, b.has_class_token, b.audio, b.visual)});
  }
  return segments;
}

template <typename T>
Tensor<T> TcafModel<T>::multi_head_attention(const Tensor<T>& x, std::span<const AttentionSegment> segments,
                                             std::size_t layer, Mode mode, RngStream& rng) const {
  const auto& p = layers_.at(layer);
  const Tensor<T> h = layer_norm(x, p.attn_norm.gain, p.attn_norm.bias, config_.layer_norm_eps);
  const Tensor<T> attended =
      masked_attention(p.query(h), p.key(h), p.value(h), segments, config_.heads, config_.mask_semantics);
  return dropout(p.out(attended), config_.dropout.attn, mode, rng);
}

template <typename T>
Tensor<T> TcafModel<T>::feed_forward(const Tensor<T>& x, std::size_t layer, Mode mode, RngStream& rng) const {
  const auto& p = layers_.at(layer);
  if (!config_.use_feed_forward) throw ConfigError("feed_forward: disabled in this configuration");
  Tensor<T> h = layer_norm(x, p.ff_norm.gain, p.ff_norm.bias, config_.layer_norm_eps);
  h = dropout(gelu(p.ff_in(h)), config_.dropout.attn, mode, rng);
  return dropout(p.ff_out(h), config_.dropout.attn, mode, rng);
}

template <typename T>
Tensor<T> TcafModel<T>::transformer_forward(const TokenSequence<T>& seq, Mode mode, RngStream& rng) const {
  const auto segments = attention_segments(seq);
  Tensor<T> x = seq.tokens;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    x = add(x, multi_head_attention(x, segments, l, mode, rng));
    if (config_.use_feed_forward) x = add(x, feed_forward(x, l, mode, rng));
  }
  if (config_.use_class_token()) {
    std::vector<std::size_t> heads;
    for (const auto& b : seq.blocks) heads.push_back(b.offset);
    return gather_rows(x, heads);
  }
  std::vector<std::size_t> lengths;
  for (const auto& b : seq.blocks) lengths.push_back(b.length());
  return segment_mean(x, lengths);
}

template <typename T>
Tensor<T> TcafModel<T>::project_output(const Tensor<T>& pooled, Mode mode, RngStream& rng) {
  if (pooled.rank() != 2 || pooled.dim(1) != config_.d_dim) {
    throw DimensionError("project_output: expected [n x " + std::to_string(config_.d_dim) + "], got " + shape_str(pooled.shape()));
  }
  return run_stages(out_proj_, pooled, config_.dropout.proj_o, mode, rng);
}

template <typename T>
Tensor<T> TcafModel<T>::project_word(const Tensor<T>& word_embeddings, Mode mode, RngStream& rng) {
  if (word_embeddings.rank() != 2 || word_embeddings.dim(1) != config_.d_dim) {
    throw DimensionError("project_word: expected [k x " + std::to_string(config_.d_dim) + "], got " +
                         shape_str(word_embeddings.shape()));
  }
  return run_stages(word_proj_, word_embeddings, config_.dropout.proj_w, mode, rng);
}

template <typename T>
Tensor<T> TcafModel<T>::decode(const Tensor<T>& theta, Decoder which, Mode mode, RngStream& rng) {
  if (theta.rank() != 2 || theta.dim(1) != config_.d_out) {
    throw DimensionError("decode: expected [n x " + std::to_string(config_.d_out) + "], got " + shape_str(theta.shape()));
  }
  if (which == Decoder::output) return run_stages(out_dec_, theta, config_.dropout.proj_o, mode, rng);
  return run_stages(word_dec_, theta, config_.dropout.proj_w, mode, rng);
}

template <typename T>
TokenSequence<T> TcafModel<T>::tokenize(std::span<const ClipView> clips, Mode mode, RngStream& rng) {
  std::vector<T> audio, visual;
  std::vector<double> audio_times, visual_times;
  std::vector<std::pair<std::size_t, std::size_t>> lengths;
  for (const auto& clip : clips) {
    const std::size_t ta = clip.audio_times.size(), tv = clip.visual_times.size();
    if (clip.audio.size() != ta * config_.d_in_a) {
      throw DimensionError("audio block of " + std::to_string(clip.audio.size()) + " values is not " + std::to_string(ta) +
                           " x " + std::to_string(config_.d_in_a));
    }
    if (clip.visual.size() != tv * config_.d_in_v) {
      throw DimensionError("visual block of " + std::to_string(clip.visual.size()) + " values is not " +
                           std::to_string(tv) + " x " + std::to_string(config_.d_in_v));
    }
    audio.insert(audio.end(), clip.audio.begin(), clip.audio.end());
    visual.insert(visual.end(), clip.visual.begin(), clip.visual.end());
    audio_times.insert(audio_times.end(), clip.audio_times.begin(), clip.audio_times.end());
    visual_times.insert(visual_times.end(), clip.visual_times.begin(), clip.visual_times.end());
    lengths.emplace_back(ta, tv);
  }
  const Tensor<T> a_feat(Shape{audio_times.size(), config_.d_in_a}, std::move(audio));
  const Tensor<T> v_feat(Shape{visual_times.size(), config_.d_in_v}, std::move(visual));
  const Tensor<T> phi_a = embed_modality(a_feat, Modality::audio, mode, rng);
  const Tensor<T> phi_v = embed_modality(v_feat, Modality::visual, mode, rng);
  const Tensor<T> a_p = position_encode(phi_a, Modality::audio, audio_times, mode, rng);
  const Tensor<T> v_p = position_encode(phi_v, Modality::visual, visual_times, mode, rng);
  return build_token_sequence(a_p, v_p, lengths, audio_times, visual_times);
}

template <typename T>
Tensor<T> TcafModel<T>::encode(std::span<const ClipView> clips, Mode mode, RngStream& rng) {
  const auto seq = tokenize(clips, mode, rng);
  return project_output(transformer_forward(seq, mode, rng), mode, rng);
}

template int predict_class(std::span<const float>, const Tensor<float>&, std::span<const int>);
template int predict_class(std::span<const double>, const Tensor<double>&, std::span<const int>);
template class TcafModel<float>;
template class TcafModel<double>;

}  // namespace tcaf
