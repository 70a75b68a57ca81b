#include "tcaf/config_json.hpp"

#include <set>
#include <string>

namespace tcaf {

using json = nlohmann::json;

namespace {

class FieldReader {
 public:
  FieldReader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError(section_ + ": expected an object");
  }

  template <typename V>
  void read(const char* key, V& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    const json& v = j_.at(key);
    if constexpr (std::is_same_v<V, bool>) {
      if (!v.is_boolean()) fail(key, "expected a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_unsigned_v<V>) {
      if (!v.is_number_unsigned()) fail(key, "expected a nonnegative integer");
      out = v.get<V>();
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!v.is_number()) fail(key, "expected a number");
      out = v.get<V>();
    } else {
      if (!v.is_string()) fail(key, "expected a string");
      out = v.get<V>();
    }
  }

  const json* object(const char* key) {
    if (!j_.contains(key)) return nullptr;
    used_.insert(key);
    return &j_.at(key);
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!used_.count(item.key())) throw ConfigError("unknown config key '" + section_ + "." + item.key() + "'");
    }
  }

 private:
  [[noreturn]] void fail(const char* key, const char* what) const {
    throw ConfigError("config key '" + section_ + "." + key + "': " + what);
  }

  const json& j_;
  std::string section_;
  std::set<std::string> used_;
};

}  // namespace

json to_json(const ArchConfig& a) {
  return {{"d_in_a", a.d_in_a},
          {"d_in_v", a.d_in_v},
          {"d_fhidd", a.d_fhidd},
          {"d_dim", a.d_dim},
          {"d_out", a.d_out},
          {"d_pos", a.d_pos},
          {"d_ff", a.d_ff},
          {"heads", a.heads},
          {"d_head", a.d_head},
          {"layers", a.layers},
          {"attention", a.variant.name()},
          {"use_temporal_embeddings", a.use_temporal_embeddings},
          {"use_feed_forward", a.use_feed_forward},
          {"dropout",
           {{"enc", a.dropout.enc},
            {"pos", a.dropout.pos},
            {"attn", a.dropout.attn},
            {"proj_w", a.dropout.proj_w},
            {"proj_o", a.dropout.proj_o}}},
          {"mask_semantics", to_string(a.mask_semantics)},
          {"fourier_min_hz", a.fourier_min_hz},
          {"fourier_max_hz", a.fourier_max_hz},
          {"layer_norm_eps", a.layer_norm_eps},
          {"batch_norm_eps", a.batch_norm_eps},
          {"batch_norm_momentum", a.batch_norm_momentum}};
}

ArchConfig arch_from_json(const json& j, ArchConfig a) {
  FieldReader r(j, "arch");
  r.read("d_in_a", a.d_in_a);
  r.read("d_in_v", a.d_in_v);
  r.read("d_fhidd", a.d_fhidd);
  r.read("d_dim", a.d_dim);
  r.read("d_out", a.d_out);
  r.read("d_pos", a.d_pos);
  r.read("d_ff", a.d_ff);
  r.read("heads", a.heads);
  r.read("d_head", a.d_head);
  r.read("layers", a.layers);
  std::string variant = a.variant.name();
  r.read("attention", variant);
  a.variant = AttentionVariant::parse(variant);
  bool class_token = a.variant.class_block;
  r.read("use_class_token", class_token);
  a.variant.class_block = class_token;
  r.read("use_temporal_embeddings", a.use_temporal_embeddings);
  r.read("use_feed_forward", a.use_feed_forward);
  if (const json* d = r.object("dropout")) {
    FieldReader dr(*d, "arch.dropout");
    dr.read("enc", a.dropout.enc);
    dr.read("pos", a.dropout.pos);
    dr.read("attn", a.dropout.attn);
    dr.read("proj_w", a.dropout.proj_w);
    dr.read("proj_o", a.dropout.proj_o);
    dr.finish();
  }
  std::string semantics(to_string(a.mask_semantics));
  r.read("mask_semantics", semantics);
  a.mask_semantics = parse_mask_semantics(semantics);
  r.read("fourier_min_hz", a.fourier_min_hz);
  r.read("fourier_max_hz", a.fourier_max_hz);
  r.read("layer_norm_eps", a.layer_norm_eps);
  r.read("batch_norm_eps", a.batch_norm_eps);
  r.read("batch_norm_momentum", a.batch_norm_momentum);
  r.finish();
  a.validate();
  return a;
}

json to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr", t.adam.lr},
          {"beta1", t.adam.beta1},
          {"beta2", t.adam.beta2},
          {"adam_eps", t.adam.eps},
          {"weight_decay", t.adam.weight_decay},
          {"lr_factor", t.lr_factor},
          {"patience", t.patience},
          {"train_max_len", t.train_max_len},
          {"eval_max_len", t.eval_max_len},
          {"seed", t.seed},
          {"loss", t.loss.name()},
          {"modality", to_string(t.modality)}};
}

TrainConfig train_from_json(const json& j, TrainConfig t) {
  FieldReader r(j, "train");
  r.read("epochs", t.epochs);
  r.read("batch_size", t.batch_size);
  r.read("lr", t.adam.lr);
  r.read("beta1", t.adam.beta1);
  r.read("beta2", t.adam.beta2);
  r.read("adam_eps", t.adam.eps);
  r.read("weight_decay", t.adam.weight_decay);
  r.read("lr_factor", t.lr_factor);
  r.read("patience", t.patience);
  r.read("train_max_len", t.train_max_len);
  r.read("eval_max_len", t.eval_max_len);
  r.read("seed", t.seed);
  std::string loss = t.loss.name();
  r.read("loss", loss);
  t.loss = LossConfig::parse(loss);
  std::string modality(to_string(t.modality));
  r.read("modality", modality);
  t.modality = parse_input_modality(modality);
  r.finish();
  t.validate();
  return t;
}

json to_json(const SynthConfig& s) {
  return {{"k_seen", s.k_seen},
          {"k_val_unseen", s.k_val_unseen},
          {"k_test_unseen", s.k_test_unseen},
          {"samples_per_class", s.samples_per_class},
          {"audio_len_min", s.audio_len_min},
          {"audio_len_max", s.audio_len_max},
          {"visual_len_min", s.visual_len_min},
          {"visual_len_max", s.visual_len_max},
          {"audio_step", s.audio_step},
          {"visual_step", s.visual_step},
          {"d_in_a", s.d_in_a},
          {"d_in_v", s.d_in_v},
          {"d_dim", s.d_dim},
          {"latent_dim", s.latent_dim},
          {"sigma_sep", s.sigma_sep},
          {"sigma_obs", s.sigma_obs},
          {"drift", s.drift},
          {"val_seen_fraction", s.val_seen_fraction},
          {"test_seen_fraction", s.test_seen_fraction},
          {"seed", s.seed}};
}

SynthConfig synth_from_json(const json& j, SynthConfig s) {
  FieldReader r(j, "synth");
  r.read("k_seen", s.k_seen);
  r.read("k_val_unseen", s.k_val_unseen);
  r.read("k_test_unseen", s.k_test_unseen);
  r.read("samples_per_class", s.samples_per_class);
  r.read("audio_len_min", s.audio_len_min);
  r.read("audio_len_max", s.audio_len_max);
  r.read("visual_len_min", s.visual_len_min);
  r.read("visual_len_max", s.visual_len_max);
  r.read("audio_step", s.audio_step);
  r.read("visual_step", s.visual_step);
  r.read("d_in_a", s.d_in_a);
  r.read("d_in_v", s.d_in_v);
  r.read("d_dim", s.d_dim);
  r.read("latent_dim", s.latent_dim);
  r.read("sigma_sep", s.sigma_sep);
  r.read("sigma_obs", s.sigma_obs);
  r.read("drift", s.drift);
  r.read("val_seen_fraction", s.val_seen_fraction);
  r.read("test_seen_fraction", s.test_seen_fraction);
  r.read("seed", s.seed);
  r.finish();
  s.validate();
  return s;
}

}  // namespace tcaf
