#include "tcaf/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"

namespace tcaf {

namespace {

using json = nlohmann::json;
using Kind = BundleError::Kind;

constexpr std::string_view kBlobMagic = "AVFB";
constexpr std::string_view kManifestName = "manifest.json";
constexpr std::string_view kBlobName = "features.avfb";
constexpr std::string_view kEmbeddingName = "class_embeddings.txt";

constexpr std::array<std::string_view, 5> kSplitNames = {"train_seen", "val_seen", "val_unseen", "test_seen",
                                                         "test_unseen"};
constexpr std::array<std::string_view, 3> kRoleNames = {"seen", "val_unseen", "test_unseen"};

ClassRole role_for_split(Split s) {
  switch (s) {
    case Split::val_unseen: return ClassRole::val_unseen;
    case Split::test_unseen: return ClassRole::test_unseen;
    default: return ClassRole::seen;
  }
}

void check_times(const std::vector<double>& times, const std::string& what) {
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!(times[i] >= 0.0) || (i > 0 && !(times[i] > times[i - 1]))) {
      throw BundleError(Kind::invalid_structure, what + ": timestamps must be nonnegative and strictly increasing");
    }
  }
}

std::string format_float(float v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

}  // namespace

std::string_view to_string(Split split) { return kSplitNames[static_cast<std::size_t>(split)]; }

Split parse_split(std::string_view name) {
  for (std::size_t i = 0; i < kSplitNames.size(); ++i)
    if (kSplitNames[i] == name) return static_cast<Split>(i);
  throw ConfigError("unknown split '" + std::string(name) + "'");
}

std::string_view to_string(ClassRole role) { return kRoleNames[static_cast<std::size_t>(role)]; }

ClassRole parse_class_role(std::string_view name) {
  for (std::size_t i = 0; i < kRoleNames.size(); ++i)
    if (kRoleNames[i] == name) return static_cast<ClassRole>(i);
  throw DataError("unknown class role '" + std::string(name) + "'");
}

std::string normalize_class_name(std::string_view name) {
  std::string out(name);
  for (char& c : out) {
    if (c == ' ') c = '_';
    else if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

std::vector<int> DatasetBundle::classes_with_role(ClassRole role) const {
  std::vector<int> out;
  for (std::size_t c = 0; c < class_roles.size(); ++c)
    if (class_roles[c] == role) out.push_back(static_cast<int>(c));
  return out;
}

std::vector<int> DatasetBundle::classes_in(std::span<const Split> which) const {
  std::set<int> ids;
  for (Split s : which)
    for (std::size_t i : split(s)) ids.insert(samples.at(i).class_id);
  return {ids.begin(), ids.end()};
}

template <typename T>
Tensor<T> DatasetBundle::embedding_matrix(std::span<const int> classes) const {
  std::vector<T> values;
  values.reserve(classes.size() * d_dim);
  for (int c : classes) {
    const auto& w = class_embeddings.at(static_cast<std::size_t>(c));
    for (float x : w) values.push_back(static_cast<T>(x));
  }
  return Tensor<T>(Shape{classes.size(), d_dim}, std::move(values));
}

template Tensor<float> DatasetBundle::embedding_matrix(std::span<const int>) const;
template Tensor<double> DatasetBundle::embedding_matrix(std::span<const int>) const;

void DatasetBundle::validate() const {
  if (d_in_a == 0 || d_in_v == 0 || d_dim == 0) throw BundleError(Kind::invalid_structure, "bundle: zero dimension");
  if (class_roles.size() != class_names.size()) {
    throw BundleError(Kind::invalid_structure, "bundle: class role count differs from class count");
  }
  if (class_embeddings.size() != class_names.size()) {
    throw BundleError(Kind::missing_embedding, "bundle: " + std::to_string(class_names.size()) + " classes but " +
                                                   std::to_string(class_embeddings.size()) + " embeddings");
  }
  std::set<std::string> names;
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    if (!names.insert(class_names[c]).second) {
      throw BundleError(Kind::invalid_structure, "bundle: duplicate class name '" + class_names[c] + "'");
    }
    if (class_embeddings[c].empty()) {
      throw BundleError(Kind::missing_embedding, "bundle: class '" + class_names[c] + "' has no embedding");
    }
    if (class_embeddings[c].size() != d_dim) {
      throw BundleError(Kind::width_mismatch, "bundle: embedding of '" + class_names[c] + "' has width " +
                                                  std::to_string(class_embeddings[c].size()) + ", expected " +
                                                  std::to_string(d_dim));
    }
  }
  std::set<std::string> ids;
  for (const auto& s : samples) {
    if (!ids.insert(s.id).second) throw BundleError(Kind::invalid_structure, "bundle: duplicate sample id '" + s.id + "'");
    if (s.class_id < 0 || static_cast<std::size_t>(s.class_id) >= class_names.size()) {
      throw BundleError(Kind::invalid_structure, "sample '" + s.id + "': class id " + std::to_string(s.class_id) +
                                                     " out of range");
    }
    if (s.audio_len() + s.visual_len() == 0) {
      throw BundleError(Kind::invalid_structure, "sample '" + s.id + "' has no tokens");
    }
    if (s.audio.size() != s.audio_len() * d_in_a || s.visual.size() != s.visual_len() * d_in_v) {
      throw BundleError(Kind::width_mismatch, "sample '" + s.id + "': feature block does not match widths " +
                                                  std::to_string(d_in_a) + "/" + std::to_string(d_in_v));
    }
    check_times(s.audio_times, "sample '" + s.id + "' audio");
    check_times(s.visual_times, "sample '" + s.id + "' visual");
  }
  std::vector<int> owner(samples.size(), -1);
  for (Split sp : kAllSplits) {
    for (std::size_t i : split(sp)) {
      if (i >= samples.size()) {
        throw BundleError(Kind::unknown_sample, std::string(to_string(sp)) + ": sample index " + std::to_string(i) +
                                                    " out of range");
      }
      if (owner[i] >= 0) {
        throw BundleError(Kind::invalid_structure, "sample '" + samples[i].id + "' appears in more than one split");
      }
      owner[i] = static_cast<int>(sp);
      const ClassRole role = class_roles[static_cast<std::size_t>(samples[i].class_id)];
      if (role != role_for_split(sp)) {
        throw BundleError(Kind::invalid_structure, "sample '" + samples[i].id + "' of " + std::string(to_string(role)) +
                                                       " class '" + class_names[samples[i].class_id] +
                                                       "' cannot be in split " + std::string(to_string(sp)));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Word embeddings

EmbeddingTable parse_word_embeddings(std::string_view text, std::size_t expected_dim) {
  EmbeddingTable table;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);

    std::vector<std::string_view> fields;
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
      const std::size_t start = i;
      while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
      if (i > start) fields.push_back(line.substr(start, i - start));
    }
    if (fields.empty()) {
      if (end == text.size()) break;
      continue;
    }
    if (fields.size() < expected_dim + 1) {
      throw DataError("word embeddings line " + std::to_string(line_no) + ": expected a name and " +
                      std::to_string(expected_dim) + " values, got " + std::to_string(fields.size() - 1) + " fields");
    }
    // Everything before the trailing values is the (possibly multi-word) name.
    const std::size_t name_fields = fields.size() - expected_dim;
    std::string name;
    for (std::size_t f = 0; f < name_fields; ++f) {
      if (f > 0) name += ' ';
      name += fields[f];
    }
    std::vector<float> values(expected_dim);
    for (std::size_t d = 0; d < expected_dim; ++d) {
      const auto field = fields[name_fields + d];
      auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), values[d]);
      if (ec != std::errc() || ptr != field.data() + field.size()) {
        throw DataError("word embeddings line " + std::to_string(line_no) + ": bad number '" + std::string(field) +
                        "' (wrong arity or malformed value)");
      }
    }
    std::string key = normalize_class_name(name);
    if (!table.emplace(key, std::move(values)).second) {
      throw DataError("word embeddings line " + std::to_string(line_no) + ": duplicate class '" + key + "'");
    }
    if (end == text.size()) break;
  }
  return table;
}

EmbeddingTable load_word_embeddings(const std::filesystem::path& path, std::size_t expected_dim) {
  const auto bytes = detail::read_file(path);
  return parse_word_embeddings(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()),
                               expected_dim);
}

std::string format_word_embeddings(const std::vector<std::pair<std::string, std::vector<float>>>& records) {
  std::string out;
  for (const auto& [name, values] : records) {
    out += name;
    for (float v : values) {
      out += ' ';
      out += format_float(v);
    }
    out += '\n';
  }
  return out;
}

void write_word_embeddings(const std::filesystem::path& path,
                           const std::vector<std::pair<std::string, std::vector<float>>>& records) {
  const std::string text = format_word_embeddings(records);
  detail::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------
// Bundle container

void write_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir) {
  bundle.validate();
  std::filesystem::create_directories(dir);

  detail::ByteWriter blob;
  blob.bytes(kBlobMagic);
  blob.u32(kBundleVersion);
  blob.u32(static_cast<std::uint32_t>(bundle.d_in_a));
  blob.u32(static_cast<std::uint32_t>(bundle.d_in_v));
  blob.u64(bundle.samples.size());

  json samples = json::array();
  for (const auto& s : bundle.samples) {
    const std::size_t audio_offset = blob.size();
    blob.f32_array<float>(s.audio);
    const std::size_t visual_offset = blob.size();
    blob.f32_array<float>(s.visual);
    samples.push_back({{"id", s.id},
                       {"class", s.class_id},
                       {"T_a", s.audio_len()},
                       {"T_v", s.visual_len()},
                       {"audio_times", s.audio_times},
                       {"visual_times", s.visual_times},
                       {"audio_offset", audio_offset},
                       {"visual_offset", visual_offset}});
  }

  json classes = json::array();
  std::vector<std::pair<std::string, std::vector<float>>> records;
  for (std::size_t c = 0; c < bundle.num_classes(); ++c) {
    classes.push_back({{"id", c}, {"name", bundle.class_names[c]}, {"role", to_string(bundle.class_roles[c])}});
    records.emplace_back(bundle.class_names[c], bundle.class_embeddings[c]);
  }

  json splits = json::object();
  for (Split sp : kAllSplits) {
    json ids = json::array();
    for (std::size_t i : bundle.split(sp)) ids.push_back(bundle.samples[i].id);
    splits[std::string(to_string(sp))] = std::move(ids);
  }

  const json manifest = {{"format", "avfb-bundle"},
                         {"version", kBundleVersion},
                         {"dims", {{"d_in_a", bundle.d_in_a}, {"d_in_v", bundle.d_in_v}, {"d_dim", bundle.d_dim}}},
                         {"blob", kBlobName},
                         {"embeddings", kEmbeddingName},
                         {"classes", std::move(classes)},
                         {"samples", std::move(samples)},
                         {"splits", std::move(splits)}};

  const std::string text = manifest.dump(1) + "\n";
  detail::write_file(dir / kManifestName, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  detail::write_file(dir / kBlobName, blob.buffer());
  write_word_embeddings(dir / kEmbeddingName, records);
}

DatasetBundle load_bundle(const std::filesystem::path& dir) {
  json manifest;
  {
    const auto bytes = detail::read_file(dir / kManifestName);
    try {
      manifest = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
      throw BundleError(Kind::malformed_manifest, "bundle manifest: " + std::string(e.what()));
    }
  }

  DatasetBundle b;
  std::string blob_name, embedding_name;
  try {
    if (manifest.at("format").get<std::string>() != "avfb-bundle") {
      throw BundleError(Kind::bad_magic, "bundle manifest: unexpected format tag");
    }
    const auto version = manifest.at("version").get<std::uint32_t>();
    if (version != kBundleVersion) {
      throw BundleError(Kind::version_mismatch, "bundle manifest: version " + std::to_string(version) +
                                                    ", expected " + std::to_string(kBundleVersion));
    }
    b.d_in_a = manifest.at("dims").at("d_in_a").get<std::size_t>();
    b.d_in_v = manifest.at("dims").at("d_in_v").get<std::size_t>();
    b.d_dim = manifest.at("dims").at("d_dim").get<std::size_t>();
    blob_name = manifest.at("blob").get<std::string>();
    embedding_name = manifest.at("embeddings").get<std::string>();
    for (const auto& c : manifest.at("classes")) {
      if (c.at("id").get<std::size_t>() != b.class_names.size()) {
        throw BundleError(Kind::malformed_manifest, "bundle manifest: class ids must be 0..K-1 in order");
      }
      b.class_names.push_back(c.at("name").get<std::string>());
      b.class_roles.push_back(parse_class_role(c.at("role").get<std::string>()));
    }
  } catch (const json::exception& e) {
    throw BundleError(Kind::malformed_manifest, "bundle manifest: " + std::string(e.what()));
  }

  const EmbeddingTable table = load_word_embeddings(dir / embedding_name, b.d_dim);
  for (const auto& name : b.class_names) {
    auto it = table.find(normalize_class_name(name));
    if (it == table.end()) throw BundleError(Kind::missing_embedding, "class '" + name + "' has no embedding");
    b.class_embeddings.push_back(it->second);
  }

  const auto blob_bytes = detail::read_file(dir / blob_name);
  detail::ByteReader blob(blob_bytes, "bundle blob");
  try {
    if (blob.bytes(4) != kBlobMagic) throw BundleError(Kind::bad_magic, "bundle blob: bad magic");
    const auto version = blob.u32();
    if (version != kBundleVersion) {
      throw BundleError(Kind::version_mismatch, "bundle blob: version " + std::to_string(version) + ", expected " +
                                                    std::to_string(kBundleVersion));
    }
    const auto width_a = blob.u32(), width_v = blob.u32();
    if (width_a != b.d_in_a || width_v != b.d_in_v) {
      throw BundleError(Kind::width_mismatch, "bundle blob: feature widths " + std::to_string(width_a) + "/" +
                                                  std::to_string(width_v) + " differ from manifest " +
                                                  std::to_string(b.d_in_a) + "/" + std::to_string(b.d_in_v));
    }
    const auto count = blob.u64();
    if (count != manifest.at("samples").size()) {
      throw BundleError(Kind::malformed_manifest, "bundle: blob holds " + std::to_string(count) +
                                                      " samples, manifest lists " +
                                                      std::to_string(manifest.at("samples").size()));
    }
  } catch (const IoError& e) {
    throw BundleError(Kind::truncated_blob, e.what());
  }

  auto read_block = [&](std::size_t offset, std::size_t n, const std::string& what) {
    if (offset > blob_bytes.size() || (blob_bytes.size() - offset) / 4 < n) {
      throw BundleError(Kind::truncated_blob, "bundle blob: " + what + " block at offset " + std::to_string(offset) +
                                                  " runs past the end of the file");
    }
    blob.seek(offset);
    std::vector<float> out(n);
    for (auto& v : out) v = blob.f32();
    return out;
  };

  std::map<std::string, std::size_t> index_of;
  try {
    for (const auto& rec : manifest.at("samples")) {
      AVSample s;
      s.id = rec.at("id").get<std::string>();
      s.class_id = rec.at("class").get<int>();
      s.audio_times = rec.at("audio_times").get<std::vector<double>>();
      s.visual_times = rec.at("visual_times").get<std::vector<double>>();
      const auto ta = rec.at("T_a").get<std::size_t>(), tv = rec.at("T_v").get<std::size_t>();
      if (ta != s.audio_times.size() || tv != s.visual_times.size()) {
        throw BundleError(Kind::malformed_manifest, "sample '" + s.id + "': token counts differ from timestamp counts");
      }
      s.audio = read_block(rec.at("audio_offset").get<std::size_t>(), ta * b.d_in_a, "audio of '" + s.id + "'");
      s.visual = read_block(rec.at("visual_offset").get<std::size_t>(), tv * b.d_in_v, "visual of '" + s.id + "'");
      index_of.emplace(s.id, b.samples.size());
      b.samples.push_back(std::move(s));
    }
    const auto& splits = manifest.at("splits");
    for (Split sp : kAllSplits) {
      const std::string key(to_string(sp));
      if (!splits.contains(key)) continue;
      for (const auto& id : splits.at(key)) {
        const auto name = id.get<std::string>();
        auto it = index_of.find(name);
        if (it == index_of.end()) {
          throw BundleError(Kind::unknown_sample, "split " + key + " references unknown sample '" + name + "'");
        }
        b.split(sp).push_back(it->second);
      }
    }
  } catch (const json::exception& e) {
    throw BundleError(Kind::malformed_manifest, "bundle manifest: " + std::string(e.what()));
  }
  b.validate();
  return b;
}

// ---------------------------------------------------------------------------
// Synthetic generator

void SynthConfig::validate() const {
  auto at_least = [](std::size_t v, std::size_t lo, const char* what) {
    if (v < lo) throw ConfigError(std::string("synth: ") + what + " must be at least " + std::to_string(lo));
  };
  at_least(k_seen, 1, "k_seen");
  at_least(k_val_unseen, 2, "k_val_unseen");
  at_least(k_test_unseen, 2, "k_test_unseen");
  at_least(samples_per_class, 1, "samples_per_class");
  at_least(d_in_a, 1, "d_in_a");
  at_least(d_in_v, 1, "d_in_v");
  at_least(d_dim, 1, "d_dim");
  at_least(latent_dim, 1, "latent_dim");
  if (latent_dim > d_dim) throw ConfigError("synth: latent_dim must not exceed d_dim");
  if (audio_len_min > audio_len_max || visual_len_min > visual_len_max) {
    throw ConfigError("synth: token length ranges must satisfy min <= max");
  }
  if (audio_len_max + visual_len_max == 0) throw ConfigError("synth: clips would have no tokens");
  if (!(audio_step > 0.0 && visual_step > 0.0)) throw ConfigError("synth: step sizes must be positive");
  if (!(sigma_sep >= 0.0 && sigma_obs >= 0.0 && drift >= 0.0)) throw ConfigError("synth: sigma values must be >= 0");
  if (!(val_seen_fraction >= 0.0 && test_seen_fraction >= 0.0 && val_seen_fraction + test_seen_fraction < 1.0)) {
    throw ConfigError("synth: seen-class holdout fractions must be >= 0 and sum below 1");
  }
}

DatasetBundle synth_generate(const SynthConfig& config) {
  config.validate();
  const RngStream root(config.seed, "synth");
  const std::size_t n_classes = config.k_seen + config.k_val_unseen + config.k_test_unseen;
  const std::size_t d = config.d_dim;

  DatasetBundle b;
  b.d_in_a = config.d_in_a;
  b.d_in_v = config.d_in_v;
  b.d_dim = d;

  // Prototypes z_j, optionally through a random lift of a lower-rank latent.
  RngStream proto_rng = root.fork("prototypes");
  std::vector<double> latent_lift;
  if (config.latent_dim < d) {
    latent_lift.resize(d * config.latent_dim);
    const double s = 1.0 / std::sqrt(static_cast<double>(config.latent_dim));
    for (auto& x : latent_lift) x = proto_rng.normal(0.0, s);
  }
  std::vector<std::vector<double>> protos(n_classes), drifts(n_classes);
  auto draw_vector = [&](RngStream& rng) {
    std::vector<double> u(config.latent_dim);
    for (auto& x : u) x = rng.normal(0.0, config.sigma_sep);
    if (latent_lift.empty()) return u;
    std::vector<double> z(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t k = 0; k < config.latent_dim; ++k) z[i] += latent_lift[i * config.latent_dim + k] * u[k];
    return z;
  };
  RngStream drift_rng = root.fork("drift");
  for (std::size_t c = 0; c < n_classes; ++c) {
    protos[c] = draw_vector(proto_rng);
    drifts[c] = draw_vector(drift_rng);
  }

  auto make_lift = [&](std::string_view name, std::size_t rows) {
    RngStream rng = root.fork(name);
    std::vector<double> p(rows * d);
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto& x : p) x = rng.normal(0.0, s);
    return p;
  };
  const auto lift_a = make_lift("lift_a", config.d_in_a);
  const auto lift_v = make_lift("lift_v", config.d_in_v);
  auto apply = [d](const std::vector<double>& lift, std::size_t rows, const std::vector<double>& x) {
    std::vector<double> y(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t i = 0; i < d; ++i) acc += lift[r * d + i] * x[i];
      y[r] = acc;
    }
    return y;
  };

  for (std::size_t c = 0; c < n_classes; ++c) {
    char name[32];
    std::snprintf(name, sizeof(name), "class_%03zu", c);
    b.class_names.emplace_back(name);
    b.class_roles.push_back(c < config.k_seen                          ? ClassRole::seen
                            : c < config.k_seen + config.k_val_unseen ? ClassRole::val_unseen
                                                                      : ClassRole::test_unseen);
    std::vector<float> w(d);
    std::transform(protos[c].begin(), protos[c].end(), w.begin(), [](double v) { return static_cast<float>(v); });
    b.class_embeddings.push_back(std::move(w));
  }

  constexpr double kDriftPeriod = 5.0;
  auto fill_modality = [&](std::size_t T, double step, const std::vector<double>& base, const std::vector<double>& dir,
                           std::size_t rows, double phase, RngStream& rng, std::vector<float>& feats,
                           std::vector<double>& times) {
    feats.resize(T * rows);
    times.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
      times[t] = static_cast<double>(t) * step;
      const double amp = config.drift * std::sin(2.0 * std::numbers::pi * times[t] / kDriftPeriod + phase);
      for (std::size_t r = 0; r < rows; ++r) {
        const double noise = rng.normal();
        feats[t * rows + r] = static_cast<float>(base[r] + amp * dir[r] + config.sigma_obs * noise);
      }
    }
  };

  std::vector<std::vector<double>> base_a(n_classes), base_v(n_classes), dir_a(n_classes), dir_v(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) {
    base_a[c] = apply(lift_a, config.d_in_a, protos[c]);
    base_v[c] = apply(lift_v, config.d_in_v, protos[c]);
    dir_a[c] = apply(lift_a, config.d_in_a, drifts[c]);
    dir_v[c] = apply(lift_v, config.d_in_v, drifts[c]);
  }

  RngStream split_rng = root.fork("split");
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t k = 0; k < config.samples_per_class; ++k) {
      const std::size_t index = b.samples.size();
      RngStream rng = root.fork("sample", index);
      AVSample s;
      char id[32];
      std::snprintf(id, sizeof(id), "s%05zu", index);
      s.id = id;
      s.class_id = static_cast<int>(c);
      const std::size_t ta = config.audio_len_min + rng.uniform_int(config.audio_len_max - config.audio_len_min + 1);
      const std::size_t tv =
          config.visual_len_min + rng.uniform_int(config.visual_len_max - config.visual_len_min + 1);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      RngStream noise_a = rng.fork("audio"), noise_v = rng.fork("visual");
      fill_modality(ta, config.audio_step, base_a[c], dir_a[c], config.d_in_a, phase, noise_a, s.audio,
                    s.audio_times);
      fill_modality(tv, config.visual_step, base_v[c], dir_v[c], config.d_in_v, phase, noise_v, s.visual,
                    s.visual_times);
      if (ta + tv == 0) {
        // Keep the no-empty-clip invariant when both ranges admit zero.
        fill_modality(1, config.audio_step, base_a[c], dir_a[c], config.d_in_a, phase, noise_a, s.audio,
                      s.audio_times);
      }
      members.push_back(index);
      b.samples.push_back(std::move(s));
    }
    switch (b.class_roles[c]) {
      case ClassRole::val_unseen:
        b.split(Split::val_unseen).insert(b.split(Split::val_unseen).end(), members.begin(), members.end());
        break;
      case ClassRole::test_unseen:
        b.split(Split::test_unseen).insert(b.split(Split::test_unseen).end(), members.begin(), members.end());
        break;
      case ClassRole::seen: {
        split_rng.shuffle(members);
        const auto n = static_cast<double>(members.size());
        const auto n_val = static_cast<std::size_t>(std::lround(config.val_seen_fraction * n));
        const auto n_test = static_cast<std::size_t>(std::lround(config.test_seen_fraction * n));
        for (std::size_t k = 0; k < members.size(); ++k) {
          const Split sp = k < n_val ? Split::val_seen : k < n_val + n_test ? Split::test_seen : Split::train_seen;
          b.split(sp).push_back(members[k]);
        }
        break;
      }
    }
  }
  for (auto& s : b.splits) std::sort(s.begin(), s.end());
  b.validate();
  return b;
}

// ---------------------------------------------------------------------------
// Perturbations

AVSample trim_sequence(const AVSample& sample, std::size_t max_len, Mode mode, RngStream& rng) {
  if (max_len == 0) throw ConfigError("trim_sequence: max_len must be at least 1");
  const std::size_t ta = sample.audio_len(), tv = sample.visual_len();
  if (ta <= max_len && tv <= max_len) return sample;

  const bool audio_anchor = ta >= tv;
  const auto& anchor_times = audio_anchor ? sample.audio_times : sample.visual_times;
  const std::size_t n = anchor_times.size();
  const std::size_t start = mode == Mode::train ? static_cast<std::size_t>(rng.uniform_int(n - max_len + 1))
                                                : (n - max_len) / 2;
  const double t0 = anchor_times[start];
  const double t1 = start + max_len < n ? anchor_times[start + max_len] : std::numeric_limits<double>::infinity();

  AVSample out;
  out.id = sample.id;
  out.class_id = sample.class_id;
  auto keep = [&](const std::vector<float>& feats, const std::vector<double>& times, std::vector<float>& out_feats,
                  std::vector<double>& out_times) {
    if (times.empty()) return;
    const std::size_t width = feats.size() / times.size();
    for (std::size_t i = 0; i < times.size() && out_times.size() < max_len; ++i) {
      if (times[i] < t0 || times[i] >= t1) continue;
      out_times.push_back(times[i] - t0);
      out_feats.insert(out_feats.end(), feats.begin() + static_cast<std::ptrdiff_t>(i * width),
                       feats.begin() + static_cast<std::ptrdiff_t>((i + 1) * width));
    }
  };
  keep(sample.audio, sample.audio_times, out.audio, out.audio_times);
  keep(sample.visual, sample.visual_times, out.visual, out.visual_times);
  return out;
}

AVSample inject_audio_noise(const AVSample& sample, std::size_t d_in_a, double fraction, double sigma, RngStream& rng) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("inject_audio_noise: fraction must lie in [0, 1]");
  if (sample.audio.size() != sample.audio_len() * d_in_a) {
    throw DimensionError("inject_audio_noise: audio block does not have width " + std::to_string(d_in_a));
  }
  AVSample out = sample;
  const auto count = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(sample.audio_len()) - 1e-9));
  for (std::size_t i = 0; i < count * d_in_a; ++i) out.audio[i] = static_cast<float>(rng.normal(0.0, sigma));
  return out;
}

double audio_feature_std(const DatasetBundle& bundle, std::span<const std::size_t> indices) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (std::size_t i : indices) {
    for (float v : bundle.samples.at(i).audio) {
      sum += v;
      sq += static_cast<double>(v) * v;
      ++n;
    }
  }
  if (n == 0) return 0.0;
  const double mean = sum / static_cast<double>(n);
  return std::sqrt(std::max(0.0, sq / static_cast<double>(n) - mean * mean));
}

}  // namespace tcaf
