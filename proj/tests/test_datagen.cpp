#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "semattack/datagen.hpp"
#include "semattack/image_io.hpp"

using namespace semattack;

namespace {

const AttributeSchema kSchema = AttributeSchema::default_schema();

AttributeVector zeros() { return AttributeVector(kSchema.size(), 0); }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("semattack_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Schema, DefaultIsValidAndHashStable) {
  kSchema.validate();
  EXPECT_EQ(kSchema.size(), 8u);
  EXPECT_EQ(kSchema.hash(), AttributeSchema::default_schema().hash());
  AttributeSchema other = kSchema;
  std::swap(other.names[0], other.names[1]);
  EXPECT_NE(other.hash(), kSchema.hash());
}

TEST(Schema, RejectsDuplicatesAndTinySchemas) {
  AttributeSchema dup = kSchema;
  dup.names[1] = dup.names[0];
  EXPECT_THROW(dup.validate(), ConfigError);
  AttributeSchema tiny;
  tiny.names = {"glasses"};
  tiny.rules = {RenderRule::EyeBand};
  EXPECT_THROW(tiny.validate(), ConfigError);
  EXPECT_THROW(render_rule_from_string("tattoo"), ConfigError);
}

TEST(Identity, SameIdSameGeometryDistinctIdsDifferByALevel) {
  const auto a = IdentitySpec::from_id(3, 7);
  const auto b = IdentitySpec::from_id(3, 7);
  EXPECT_EQ(a.level, b.level);
  EXPECT_DOUBLE_EQ(a.face_ax, b.face_ax);
  for (int i = 0; i < 300; ++i) {
    for (int j = i + 1; j < 300; ++j) {
      ASSERT_NE(IdentitySpec::from_id(i, 7).level, IdentitySpec::from_id(j, 7).level)
          << i << " vs " << j;
    }
  }
}

TEST(RenderFace, BaseFaceIsDeterministic) {
  const auto id0 = IdentitySpec::from_id(0, 7);
  auto a = render_face(id0, zeros(), kSchema, 32);
  auto b = render_face(id0, zeros(), kSchema, 32);
  EXPECT_TRUE(torch::equal(a, b));
  EXPECT_EQ(a.sizes(), (std::vector<int64_t>{3, 32, 32}));
  EXPECT_GE(a.min().item<float>(), 0.0f);
  EXPECT_LE(a.max().item<float>(), 1.0f);
}

TEST(RenderFace, GlassesOnlyTouchEyeBandRows) {
  const auto id0 = IdentitySpec::from_id(0, 7);
  auto base = render_face(id0, zeros(), kSchema, 32);
  auto with = render_face(id0, flip(zeros(), kSchema.index_of("glasses")), kSchema, 32);
  auto changed_rows = (base != with).any(0).any(1);  // [H]
  ASSERT_TRUE(changed_rows.any().item<bool>());
  const double eye_y = id0.face_cy - 0.35 * id0.face_ay;
  for (int r = 0; r < 32; ++r) {
    if (changed_rows[r].item<bool>()) {
      EXPECT_LE(std::abs(r + 0.5 - eye_y), 2.0) << "row " << r;
    }
  }
}

TEST(RenderFace, DistinctIdentitiesDiffer) {
  auto a = render_face(IdentitySpec::from_id(0, 7), zeros(), kSchema, 32);
  auto b = render_face(IdentitySpec::from_id(1, 7), zeros(), kSchema, 32);
  EXPECT_GT((a - b).pow(2).mean().item<double>(), 0.0);
}

TEST(RenderFace, SizesAndErrors) {
  const auto id = IdentitySpec::from_id(5, 1);
  for (int s : {32, 48, 64}) {
    auto img = render_face(id, zeros(), kSchema, s);
    EXPECT_EQ(img.size(1), s);
  }
  EXPECT_THROW(render_face(id, zeros(), kSchema, 40), InputError);
  EXPECT_THROW(render_face(id, AttributeVector(3, 0), kSchema, 32), InputError);
}

// Property: every attribute flip changes the image, but only a bounded region.
TEST(RenderFace, AttributeLocality) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const auto id = IdentitySpec::from_id(static_cast<int>(rng() % 1000), 7);
    AttributeVector attrs(kSchema.size());
    for (auto& b : attrs) b = static_cast<int>(rng() & 1);
    auto base = render_face(id, attrs, kSchema, 32);
    for (int i = 0; i < static_cast<int>(kSchema.size()); ++i) {
      auto edited = render_face(id, flip(attrs, i), kSchema, 32);
      const double frac = (base != edited).any(0).to(torch::kFloat64).mean().item<double>();
      EXPECT_GT(frac, 0.0) << kSchema.names[i];
      EXPECT_LE(frac, 0.30) << kSchema.names[i];
    }
  }
}

// Pixel-space nearest-centroid classification over 10 identities, holding out
// half of each identity's images.
TEST(RenderFace, IdentitySeparability) {
  DatasetConfig cfg;
  cfg.n_identities = 10;
  cfg.images_per_identity = 20;
  cfg.test_fraction = 0.0;
  auto recs = generate_dataset(cfg, kSchema);
  std::vector<torch::Tensor> centroids;
  for (int id = 0; id < 10; ++id) {
    std::vector<torch::Tensor> imgs;
    for (const auto& r : recs) {
      if (r.identity_id == id && imgs.size() < 10) imgs.push_back(r.image);
    }
    centroids.push_back(torch::stack(imgs).mean(0));
  }
  int correct = 0, total = 0;
  std::vector<int> seen(10, 0);
  for (const auto& r : recs) {
    if (seen[r.identity_id]++ < 10) continue;
    double best = 1e9;
    int arg = -1;
    for (int c = 0; c < 10; ++c) {
      const double d = (r.image - centroids[c]).pow(2).sum().item<double>();
      if (d < best) { best = d; arg = c; }
    }
    correct += arg == r.identity_id;
    ++total;
  }
  EXPECT_GT(static_cast<double>(correct) / total, 0.5);
}

TEST(GenerateDataset, FrequenciesSplitsAndDeterminism) {
  DatasetConfig cfg;
  cfg.n_identities = 200;
  cfg.images_per_identity = 20;
  cfg.seed = 7;
  auto recs = generate_dataset(cfg, kSchema);
  ASSERT_EQ(recs.size(), 4000u);
  for (std::size_t a = 0; a < kSchema.size(); ++a) {
    int ones = 0;
    for (const auto& r : recs) ones += r.attributes[a];
    const double f = ones / 4000.0;
    EXPECT_GE(f, 0.4);
    EXPECT_LE(f, 0.6);
  }
  std::set<int> train_ids, test_ids;
  for (const auto& r : recs) {
    (r.split == Split::Test ? test_ids : train_ids).insert(r.identity_id);
  }
  for (int id : test_ids) EXPECT_EQ(train_ids.count(id), 0u);
  EXPECT_FALSE(test_ids.empty());
  EXPECT_FALSE(indices_of(recs, Split::Val).empty());
}

TEST(GenerateDataset, TwoIdentities) {
  DatasetConfig cfg;
  cfg.n_identities = 2;
  cfg.images_per_identity = 1;
  auto recs = generate_dataset(cfg, kSchema);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_NE(recs[0].identity_id, recs[1].identity_id);
  cfg.n_identities = 1;
  EXPECT_THROW(generate_dataset(cfg, kSchema), InputError);
}

TEST(GenerateDataset, PersistedManifestIsByteIdenticalAndLossless) {
  DatasetConfig cfg;
  cfg.n_identities = 6;
  cfg.images_per_identity = 3;
  cfg.seed = 3;
  auto dir_a = temp_dir("ds_a");
  auto dir_b = temp_dir("ds_b");
  auto recs_a = generate_dataset(cfg, kSchema);
  auto recs_b = generate_dataset(cfg, kSchema);
  save_dataset(dir_a, recs_a, kSchema, "test");
  save_dataset(dir_b, recs_b, kSchema, "test");
  EXPECT_EQ(slurp(dir_a / "manifest.txt"), slurp(dir_b / "manifest.txt"));
  EXPECT_EQ(slurp(dir_a / recs_a[4].image_path), slurp(dir_b / recs_b[4].image_path));

  auto loaded = load_dataset(dir_a, kSchema);
  ASSERT_EQ(loaded.size(), recs_a.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    EXPECT_TRUE(torch::equal(loaded[i].image, recs_a[i].image)) << i;
    EXPECT_EQ(loaded[i].attributes, recs_a[i].attributes);
    EXPECT_EQ(loaded[i].split, recs_a[i].split);
    // Re-rendering the stored (identity, attributes) pair reproduces the file.
    auto again = render_face(IdentitySpec::from_id(loaded[i].identity_id, cfg.seed),
                             loaded[i].attributes, kSchema, cfg.image_size);
    EXPECT_TRUE(torch::equal(again, loaded[i].image));
  }

  AttributeSchema other = kSchema;
  std::swap(other.names[0], other.names[1]);
  EXPECT_THROW(load_dataset(dir_a, other), ConfigError);
}
