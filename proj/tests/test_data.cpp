#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "support/helpers.hpp"
#include "tcaf/dataset.hpp"

using namespace tcaf;
namespace fs = std::filesystem;

namespace {

SynthConfig small_synth(std::uint64_t seed = 3) {
  SynthConfig c;
  c.k_seen = 4;
  c.k_val_unseen = 2;
  c.k_test_unseen = 2;
  c.samples_per_class = 6;
  c.d_in_a = 5;
  c.d_in_v = 7;
  c.d_dim = 6;
  c.latent_dim = 3;
  c.seed = seed;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("tcaf_test_" + name);
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << s;
}

BundleError::Kind load_error_kind(const fs::path& dir) {
  try {
    (void)load_bundle(dir);
  } catch (const BundleError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "load_bundle accepted a corrupted bundle";
  return BundleError::Kind::invalid_structure;
}

AVSample indexed_sample(std::size_t ta, std::size_t tv) {
  AVSample s;
  s.id = "s";
  for (std::size_t t = 0; t < ta; ++t) {
    s.audio.push_back(static_cast<float>(t));
    s.audio_times.push_back(0.96 * static_cast<double>(t));
  }
  for (std::size_t t = 0; t < tv; ++t) {
    s.visual.push_back(static_cast<float>(t));
    s.visual_times.push_back(0.64 * static_cast<double>(t));
  }
  return s;
}

}  // namespace

TEST(Bundle, RoundTrip) {
  for (std::uint64_t seed : {0u, 1u, 2u, 3u, 4u}) {
    SynthConfig c = small_synth(seed);
    RngStream r(seed, "shape");
    c.samples_per_class = 3 + r.uniform_int(5);
    c.d_in_a = 1 + r.uniform_int(9);
    const DatasetBundle b = synth_generate(c);
    const fs::path dir = fresh_dir("roundtrip");
    write_bundle(b, dir);
    EXPECT_EQ(load_bundle(dir), b);
    fs::remove_all(dir);
  }
}

TEST(Bundle, ManifestCountsMatchRecount) {
  const DatasetBundle b = synth_generate(small_synth());
  const fs::path dir = fresh_dir("recount");
  write_bundle(b, dir);
  const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  std::size_t total = 0;
  for (Split s : kAllSplits) {
    const auto& ids = manifest.at("splits").at(std::string(to_string(s)));
    EXPECT_EQ(ids.size(), b.split(s).size());
    total += ids.size();
  }
  EXPECT_EQ(total, manifest.at("samples").size());
  fs::remove_all(dir);
}

TEST(Bundle, CorruptionsAreCategorized) {
  const DatasetBundle b = synth_generate(small_synth());
  const fs::path dir = fresh_dir("corrupt");
  write_bundle(b, dir);
  const std::string blob = slurp(dir / "features.avfb"), manifest = slurp(dir / "manifest.json"),
                    emb = slurp(dir / "class_embeddings.txt");
  auto restore = [&] {
    spit(dir / "features.avfb", blob);
    spit(dir / "manifest.json", manifest);
    spit(dir / "class_embeddings.txt", emb);
  };
  using K = BundleError::Kind;

  std::string x = blob;
  x[0] = 'Z';
  spit(dir / "features.avfb", x);
  EXPECT_EQ(load_error_kind(dir), K::bad_magic);
  restore();

  x = blob;
  x[4] = 9;
  spit(dir / "features.avfb", x);
  EXPECT_EQ(load_error_kind(dir), K::version_mismatch);
  restore();

  x = blob;
  x[8] = static_cast<char>(b.d_in_a + 2);
  spit(dir / "features.avfb", x);
  EXPECT_EQ(load_error_kind(dir), K::width_mismatch);
  restore();

  spit(dir / "features.avfb", blob.substr(0, blob.size() - 10));
  EXPECT_EQ(load_error_kind(dir), K::truncated_blob);
  restore();

  auto j = nlohmann::json::parse(manifest);
  j["splits"]["train_seen"][0] = "nope";
  spit(dir / "manifest.json", j.dump());
  EXPECT_EQ(load_error_kind(dir), K::unknown_sample);
  restore();

  spit(dir / "manifest.json", "{\"format\": ");
  EXPECT_EQ(load_error_kind(dir), K::malformed_manifest);
  restore();

  spit(dir / "class_embeddings.txt", emb.substr(emb.find('\n') + 1));
  EXPECT_EQ(load_error_kind(dir), K::missing_embedding);
  restore();

  EXPECT_NO_THROW(load_bundle(dir));
  fs::remove_all(dir);
}

TEST(WordEmbeddings, ParseBasics) {
  const auto t = parse_word_embeddings("apple 1 2 3\nBlue Sky 4 5 6\n", 3);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t.at("blue_sky"), (std::vector<float>{4, 5, 6}));
}

TEST(WordEmbeddings, ArityAndDuplicateErrors) {
  std::string line = "x";
  for (int i = 0; i < 299; ++i) line += " 0.5";
  EXPECT_THROW(parse_word_embeddings(line, 300), DataError);
  EXPECT_THROW(parse_word_embeddings("a 1 2\nA 3 4\n", 2), DataError);
  EXPECT_THROW(parse_word_embeddings("a 1 x\n", 2), DataError);
}

TEST(WordEmbeddings, FormatParseRoundTrip) {
  RngStream rng(1, "fuzz");
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 1 + rng.uniform_int(8);
    std::vector<std::pair<std::string, std::vector<float>>> records;
    for (std::size_t r = 0; r < 1 + rng.uniform_int(10); ++r) {
      std::vector<float> v(d);
      for (auto& x : v) x = static_cast<float>(rng.normal() * std::pow(10.0, rng.uniform(-8, 8)));
      records.emplace_back("w" + std::to_string(r), v);
    }
    const auto table = parse_word_embeddings(format_word_embeddings(records), d);
    ASSERT_EQ(table.size(), records.size());
    for (const auto& [name, v] : records) EXPECT_EQ(table.at(name), v);
  }
}

TEST(Synth, Deterministic) {
  EXPECT_EQ(synth_generate(small_synth(5)), synth_generate(small_synth(5)));
  EXPECT_NE(synth_generate(small_synth(5)), synth_generate(small_synth(6)));
}

TEST(Synth, ZeroSeparationCollapsesEmbeddings) {
  SynthConfig c = small_synth();
  c.sigma_sep = 0.0;
  const DatasetBundle b = synth_generate(c);
  for (const auto& e : b.class_embeddings) EXPECT_EQ(e, b.class_embeddings[0]);
}

TEST(Synth, CountsMatchConfig) {
  const SynthConfig c = small_synth();
  const DatasetBundle b = synth_generate(c);
  EXPECT_EQ(b.num_classes(), c.k_seen + c.k_val_unseen + c.k_test_unseen);
  EXPECT_EQ(b.samples.size(), b.num_classes() * c.samples_per_class);
  EXPECT_EQ(b.classes_with_role(ClassRole::seen).size(), c.k_seen);
  EXPECT_EQ(b.classes_with_role(ClassRole::val_unseen).size(), c.k_val_unseen);
  EXPECT_EQ(b.classes_with_role(ClassRole::test_unseen).size(), c.k_test_unseen);
  EXPECT_EQ(b.split(Split::val_unseen).size(), c.k_val_unseen * c.samples_per_class);
  EXPECT_EQ(b.split(Split::test_unseen).size(), c.k_test_unseen * c.samples_per_class);
  for (const auto& s : b.samples) {
    EXPECT_GE(s.audio_len(), c.audio_len_min);
    EXPECT_LE(s.audio_len(), c.audio_len_max);
    EXPECT_GE(s.visual_len(), c.visual_len_min);
    EXPECT_LE(s.visual_len(), c.visual_len_max);
  }
}

TEST(Synth, SplitsDisjointAndCoverEverySample) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const DatasetBundle b = synth_generate(small_synth(seed));
    std::multiset<std::size_t> all;
    for (Split s : kAllSplits) all.insert(b.split(s).begin(), b.split(s).end());
    EXPECT_EQ(all.size(), b.samples.size());
    EXPECT_EQ(std::set<std::size_t>(all.begin(), all.end()).size(), b.samples.size());
    EXPECT_NO_THROW(b.validate());
  }
}

TEST(Synth, ObservationNoiseIncreasesWithinClassVariance) {
  double previous = -1.0;
  for (double sigma : {0.0, 0.05, 0.1, 0.2, 0.4}) {
    SynthConfig c = small_synth(7);
    c.samples_per_class = 30;
    c.sigma_obs = sigma;
    const DatasetBundle b = synth_generate(c);
    // mean over classes and dims of the variance of the first audio token
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < b.num_classes(); ++k) {
      for (std::size_t j = 0; j < c.d_in_a; ++j) {
        double m = 0.0, m2 = 0.0, n = 0.0;
        for (const auto& s : b.samples) {
          if (s.class_id != static_cast<int>(k)) continue;
          m += s.audio[j];
          m2 += static_cast<double>(s.audio[j]) * s.audio[j];
          n += 1.0;
        }
        total += m2 / n - (m / n) * (m / n);
        ++count;
      }
    }
    const double mean_var = total / static_cast<double>(count);
    EXPECT_GE(mean_var, previous * 0.99) << "sigma_obs " << sigma;
    previous = mean_var;
  }
}

TEST(Trim, ShortSequencesUnchanged) {
  RngStream rng(1, "trim");
  const AVSample s = indexed_sample(5, 8);
  EXPECT_EQ(trim_sequence(s, 8, Mode::train, rng), s);
  EXPECT_EQ(trim_sequence(s, 10, Mode::eval, rng), s);
}

TEST(Trim, EvalCentresWindow) {
  RngStream rng(1, "trim");
  const AVSample t = trim_sequence(indexed_sample(400, 0), 300, Mode::eval, rng);
  ASSERT_EQ(t.audio_len(), 300u);
  EXPECT_EQ(t.audio.front(), 50.0f);
  EXPECT_EQ(t.audio.back(), 349.0f);
  EXPECT_EQ(t.audio_times.front(), 0.0);
}

TEST(Trim, TrainWindowReproducibleAndAligned) {
  const AVSample s = indexed_sample(100, 150);
  RngStream r1(3, "trim"), r2(3, "trim");
  const AVSample a = trim_sequence(s, 60, Mode::train, r1), b = trim_sequence(s, 60, Mode::train, r2);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.visual_len(), 60u);
  EXPECT_LE(a.audio_len(), 60u);
  // audio tokens keep the shared wall-clock window of the anchor modality
  const double start = 0.64 * a.visual.front();
  for (std::size_t i = 0; i < a.audio_len(); ++i) {
    const double t = 0.96 * a.audio[i];
    EXPECT_GE(t, start - 1e-9);
    EXPECT_LT(t, start + 0.64 * 60 + 1e-9);
    EXPECT_NEAR(a.audio_times[i], t - start, 1e-9);
  }
}

TEST(Noise, FractionsReplaceCeilingCount) {
  RngStream rng(2, "noise");
  const AVSample s = tcaf::testing::random_sample(rng, 3, 2, 7, 2);
  auto replaced = [&](const AVSample& n) {
    std::size_t c = 0;
    for (std::size_t t = 0; t < 7; ++t)
      if (!std::equal(n.audio.begin() + t * 3, n.audio.begin() + t * 3 + 3, s.audio.begin() + t * 3)) ++c;
    return c;
  };
  EXPECT_EQ(inject_audio_noise(s, 3, 0.0, 1.0, rng), s);
  EXPECT_EQ(replaced(inject_audio_noise(s, 3, 1.0, 1.0, rng)), 7u);
  EXPECT_EQ(replaced(inject_audio_noise(s, 3, 0.5, 1.0, rng)), 4u);
  const AVSample n = inject_audio_noise(s, 3, 1.0, 1.0, rng);
  EXPECT_EQ(n.visual, s.visual);
  EXPECT_EQ(n.audio_times, s.audio_times);
}
