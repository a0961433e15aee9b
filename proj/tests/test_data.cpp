#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <set>

#include "affnet/data.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace affnet;
using Catch::Matchers::ContainsSubstring;

namespace {

std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() /
             ("affnet_test_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.values() == b.values();
}

bool inside_box(int x, int y, const std::array<int, 4>& box) {
  return x >= box[0] && x < box[0] + box[2] && y >= box[1] &&
         y < box[1] + box[3];
}

}  // namespace

TEST_CASE("gaussian kernel size follows the diagonal rule, odd and at least 3") {
  CHECK(gaussian_kernel_size(224, 224) == 105);
  CHECK(gaussian_kernel_size(64, 64) == 29);   // 64√2/3 ≈ 30.17 → 29
  CHECK(gaussian_kernel_size(1, 1) == 3);      // clamped
  CHECK(gaussian_kernel_size(24, 16) == 9);    // √832/3 ≈ 9.61 → 9

  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const int h = 1 + static_cast<int>(rng.next_u64() % 300);
    const int w = 1 + static_cast<int>(rng.next_u64() % 300);
    const int ks = gaussian_kernel_size(h, w);
    CHECK(ks % 2 == 1);
    CHECK(ks >= 3);
    const double diag = std::sqrt(double(h) * h + double(w) * w);
    CHECK(ks <= std::max(3.0, diag / 3.0));
    CHECK(ks + 2 > diag / 3.0 - 1.0);
  }
}

TEST_CASE("point heatmaps: peak of one, symmetry, permutation invariance, empty input") {
  SECTION("single centered point peaks at exactly 1 and is symmetric") {
    Tensor h = points_to_heatmap({{16, 16}}, 33, 33);
    const auto& v = h.values();
    CHECK(v[16 * 33 + 16] == 1.0);
    double hi = 0.0;
    for (double x : v) {
      CHECK(x >= 0.0);
      CHECK(x <= 1.0);
      hi = std::max(hi, x);
    }
    CHECK(hi == 1.0);
    for (int d = 1; d <= 10; ++d) {
      const double right = v[16 * 33 + 16 + d], left = v[16 * 33 + 16 - d];
      const double down = v[(16 + d) * 33 + 16], up = v[(16 - d) * 33 + 16];
      CHECK(std::abs(right - left) < 1e-12);
      CHECK(std::abs(right - down) < 1e-12);
      CHECK(std::abs(right - up) < 1e-12);
    }
  }

  SECTION("no points yields an all-zero map") {
    Tensor h = points_to_heatmap({}, 8, 12);
    for (double x : h.values()) CHECK(x == 0.0);
  }

  SECTION("point order never changes the result") {
    PointList a = {{3, 4}, {10, 2}, {7, 7}, {0, 0}};
    PointList b = {{7, 7}, {0, 0}, {3, 4}, {10, 2}};
    CHECK(tensors_equal(points_to_heatmap(a, 12, 14),
                        points_to_heatmap(b, 12, 14)));
  }

  SECTION("nonempty point sets always span exactly [0, 1]") {
    Rng rng(32);
    for (int trial = 0; trial < 10; ++trial) {
      const int h = 9 + static_cast<int>(rng.next_u64() % 40);
      const int w = 9 + static_cast<int>(rng.next_u64() % 40);
      PointList pts;
      const int n = 1 + static_cast<int>(rng.next_u64() % 5);
      for (int i = 0; i < n; ++i)
        pts.push_back({static_cast<int>(rng.next_u64() % w),
                       static_cast<int>(rng.next_u64() % h)});
      const auto& v = points_to_heatmap(pts, h, w).values();
      CHECK(*std::max_element(v.begin(), v.end()) == 1.0);
      CHECK(*std::min_element(v.begin(), v.end()) == 0.0);
    }
  }

  SECTION("out-of-bounds points are data errors") {
    CHECK_THROWS_AS(points_to_heatmap({{12, 3}}, 8, 12), DataError);
    CHECK_THROWS_AS(points_to_heatmap({{3, -1}}, 8, 12), DataError);
    CHECK_THROWS_AS(points_to_heatmap({}, 0, 5), ShapeError);
  }

  SECTION("separable blur matches the direct 2-D oracle") {
    Rng rng(33);
    for (int trial = 0; trial < 6; ++trial) {
      const int h = 10 + static_cast<int>(rng.next_u64() % 22);
      const int w = 10 + static_cast<int>(rng.next_u64() % 22);
      PointList pts;
      for (int i = 0; i < 5; ++i)
        pts.push_back({static_cast<int>(rng.next_u64() % w),
                       static_cast<int>(rng.next_u64() % h)});
      std::vector<std::array<int, 2>> opts(pts.begin(), pts.end());
      auto want = oracle::gaussian_heatmap(opts, h, w,
                                           gaussian_kernel_size(h, w));
      const auto& got = points_to_heatmap(pts, h, w).values();
      REQUIRE(got.size() == want.size());
      for (size_t i = 0; i < got.size(); ++i)
        CHECK(std::abs(got[i] - want[i]) < 1e-9);
    }
  }

  SECTION("full-resolution map uses the 105-wide kernel") {
    Tensor h = points_to_heatmap({{112, 112}}, 224, 224);
    CHECK(h.values()[112 * 224 + 112] == 1.0);
    // 52 pixels out (within the kernel radius) mass is present; 53 out it
    // has fallen to zero-padding territory but stays nonnegative.
    CHECK(h.values()[112 * 224 + 112 + 52] > 0.0);
  }
}

TEST_CASE("record heatmaps stack all seven parts and name the record on errors") {
  AnnotationRecord rec;
  rec.image_id = "sample_0042_in";
  rec.affordance_label = "grasp";
  rec.object_label = "box";
  rec.width = 20;
  rec.height = 16;
  rec.points[0] = {{4, 5}, {6, 5}};
  rec.points[3] = {{10, 12}};

  Tensor maps = record_heatmaps(rec);
  REQUIRE(maps.shape() == Shape{kNumParts, 16, 20});
  for (int j = 0; j < kNumParts; ++j) {
    const double* v = maps.values().data() + static_cast<size_t>(j) * 16 * 20;
    const double hi = *std::max_element(v, v + 16 * 20);
    if (j == 0 || j == 3)
      CHECK(hi == 1.0);
    else
      CHECK(hi == 0.0);
  }

  rec.points[2] = {{25, 3}};
  CHECK_THROWS_WITH(record_heatmaps(rec), ContainsSubstring("sample_0042_in"));
}

TEST_CASE("ppm round trip is 8-bit exact and rejects malformed files") {
  auto dir = temp_dir("ppm");
  Rng rng(34);
  Tensor img = testutil::rand_tensor({3, 9, 7}, rng, 0.25);
  for (double& v : img.mutable_values()) v = std::min(1.0, std::max(0.0, v + 0.5));

  const auto path = dir / "img.ppm";
  write_ppm(img, path);
  Tensor back = read_ppm(path);
  REQUIRE(back.shape() == img.shape());
  for (size_t i = 0; i < back.values().size(); ++i)
    CHECK(std::abs(back.values()[i] - img.values()[i]) <= 0.5 / 255.0 + 1e-12);

  // A second trip through disk is bit-stable once quantized.
  write_ppm(back, dir / "img2.ppm");
  CHECK(tensors_equal(read_ppm(dir / "img2.ppm"), back));

  SECTION("malformed inputs raise data errors with a byte offset") {
    atomic_write_file(dir / "bad_magic.ppm", "P5\n2 2\n255\nxxxx");
    CHECK_THROWS_MATCHES(read_ppm(dir / "bad_magic.ppm"), DataError,
                         Catch::Matchers::MessageMatches(
                             ContainsSubstring("byte")));
    atomic_write_file(dir / "trunc.ppm", "P6\n4 4\n255\nabc");
    CHECK_THROWS_AS(read_ppm(dir / "trunc.ppm"), DataError);
    atomic_write_file(dir / "deep.ppm", "P6\n2 2\n65535\n");
    CHECK_THROWS_AS(read_ppm(dir / "deep.ppm"), DataError);
    CHECK_THROWS_AS(write_ppm(Tensor::zeros({1, 4, 4}), dir / "x.ppm"),
                    ShapeError);
  }

  std::filesystem::remove_all(dir);
}

TEST_CASE("annotation json round trips, validates parts, bounds, and vocabulary") {
  auto dir = temp_dir("ann");
  AnnotationRecord rec;
  rec.image_id = "pair_9_in";
  rec.affordance_label = "swing";
  rec.object_label = "bar";
  rec.width = 64;
  rec.height = 64;
  rec.object_box = {10, 12, 20, 18};
  rec.points[0] = {{20, 12}, {21, 13}};
  rec.points[6] = {{20, 2}};

  AnnotationRecord empty;
  empty.image_id = "pair_9_non";
  empty.affordance_label = "swing";
  empty.object_label = "bar";
  empty.width = 64;
  empty.height = 64;

  const auto path = dir / "annotations.json";
  save_annotations(path, {rec, empty});
  auto loaded = load_annotations(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].image_id == rec.image_id);
  CHECK(loaded[0].affordance_label == "swing");
  CHECK(loaded[0].object_label == "bar");
  CHECK(loaded[0].object_box == rec.object_box);
  CHECK(loaded[0].points[0] == rec.points[0]);
  CHECK(loaded[0].points[6] == rec.points[6]);
  for (int j = 0; j < kNumParts; ++j) {
    CHECK(loaded[1].points[j].empty());
    if (j != 0 && j != 6) CHECK(loaded[0].points[j].empty());
  }

  SECTION("parse errors carry the byte offset") {
    atomic_write_file(dir / "broken.json", "[{\"image_id\": }");
    CHECK_THROWS_MATCHES(load_annotations(dir / "broken.json"), DataError,
                         Catch::Matchers::MessageMatches(
                             ContainsSubstring("byte")));
  }

  SECTION("unknown part keys are rejected") {
    nlohmann::json j = record_to_json(rec);
    j["points"]["tail"] = {{1, 2}};
    CHECK_THROWS_MATCHES(record_from_json(j), DataError,
                         Catch::Matchers::MessageMatches(
                             ContainsSubstring("tail")));
  }

  SECTION("out-of-bounds points name the record") {
    nlohmann::json j = record_to_json(rec);
    j["points"]["hand"] = {{64, 0}};
    CHECK_THROWS_MATCHES(record_from_json(j), DataError,
                         Catch::Matchers::MessageMatches(
                             ContainsSubstring("pair_9_in")));
  }

  SECTION("unknown affordance labels are rejected") {
    nlohmann::json j = record_to_json(rec);
    j["affordance"] = "juggle";
    CHECK_THROWS_AS(record_from_json(j), DataError);
  }

  std::filesystem::remove_all(dir);
}

TEST_CASE("affordance vocabulary: at least 6 classes with distinct part subsets") {
  const auto& vocab = affordance_vocabulary();
  CHECK(vocab.size() >= 6);
  std::set<std::vector<int>> subsets;
  std::set<int> covered;
  for (const auto& cls : vocab) {
    CHECK_FALSE(cls.parts.empty());
    std::vector<int> sorted = cls.parts;
    std::sort(sorted.begin(), sorted.end());
    subsets.insert(sorted);
    for (int p : sorted) {
      CHECK(p >= 0);
      CHECK(p < kNumParts);
      covered.insert(p);
    }
  }
  CHECK(subsets.size() == vocab.size());        // all distinct
  CHECK(covered.size() == static_cast<size_t>(kNumParts));
  CHECK_THROWS_AS(affordance_class("juggle"), ConfigError);
}

TEST_CASE("synthetic pairs are deterministic, correctly labelled, and self-consistent") {
  const int size = 64;

  SECTION("same seed, bit-identical pair; different seed differs") {
    GeneratedPair a = generate_synthetic_pair(77, "sit", size);
    GeneratedPair b = generate_synthetic_pair(77, "sit", size);
    CHECK(tensors_equal(a.sample.image_in, b.sample.image_in));
    CHECK(tensors_equal(a.sample.image_non, b.sample.image_non));
    CHECK(tensors_equal(a.sample.pose, b.sample.pose));
    CHECK(tensors_equal(a.sample.gt_in, b.sample.gt_in));
    CHECK(tensors_equal(a.sample.gt_non, b.sample.gt_non));
    CHECK(a.record_in.object_box == b.record_in.object_box);
    CHECK(a.record_in.points[3] == b.record_in.points[3]);

    GeneratedPair c = generate_synthetic_pair(78, "sit", size);
    CHECK_FALSE(tensors_equal(a.sample.image_in, c.sample.image_in));
  }

  SECTION("active part channels peak at 1, inactive channels stay zero") {
    for (const auto& cls : affordance_vocabulary()) {
      GeneratedPair gp = generate_synthetic_pair(101, cls.name, size);
      std::set<int> active(cls.parts.begin(), cls.parts.end());
      for (int j = 0; j < kNumParts; ++j) {
        for (const Tensor* gt : {&gp.sample.gt_in, &gp.sample.gt_non}) {
          const double* v =
              gt->values().data() + static_cast<size_t>(j) * size * size;
          const double hi = *std::max_element(v, v + size * size);
          INFO(cls.name << " part " << j);
          if (active.count(j))
            CHECK(hi == 1.0);
          else
            CHECK(hi == 0.0);
        }
      }
    }
  }

  SECTION("non-interactive peaks land inside the object box, outside part off it") {
    for (const auto& cls : affordance_vocabulary()) {
      for (uint64_t seed : {5ULL, 6ULL, 7ULL}) {
        GeneratedPair gp = generate_synthetic_pair(seed, cls.name, size);
        for (int j : cls.parts) {
          const double* v = gp.sample.gt_non.values().data() +
                            static_cast<size_t>(j) * size * size;
          const size_t arg = std::max_element(v, v + size * size) - v;
          const int y = static_cast<int>(arg) / size;
          const int x = static_cast<int>(arg) % size;
          INFO(cls.name << " part " << j << " seed " << seed);
          if (j == 6)
            CHECK_FALSE(inside_box(x, y, gp.record_non.object_box));
          else
            CHECK(inside_box(x, y, gp.record_non.object_box));
        }
      }
    }
  }

  SECTION("images in unit range, pose joints normalized and on the figure") {
    GeneratedPair gp = generate_synthetic_pair(55, "kick", size);
    for (const Tensor* img : {&gp.sample.image_in, &gp.sample.image_non})
      for (double v : img->values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
    REQUIRE(gp.sample.pose.shape() == Shape{kPoseJoints, 3});
    for (int j = 0; j < kPoseJoints; ++j) {
      const double x = gp.sample.pose.values()[j * 3 + 0];
      const double y = gp.sample.pose.values()[j * 3 + 1];
      CHECK(x >= 0.0);
      CHECK(x <= 1.0);
      CHECK(y >= 0.0);
      CHECK(y <= 1.0);
      CHECK(gp.sample.pose.values()[j * 3 + 2] == 1.0);
    }
    // the interactive scene actually contains the figure
    CHECK_FALSE(tensors_equal(gp.sample.image_in, gp.sample.image_non));
  }

  SECTION("fixations mirror the annotation points") {
    GeneratedPair gp = generate_synthetic_pair(88, "swing", size);
    for (int j = 0; j < kNumParts; ++j) {
      CHECK(gp.sample.fixations_in[j] == gp.record_in.points[j]);
      CHECK(gp.sample.fixations_non[j] == gp.record_non.points[j]);
    }
    CHECK(gp.sample.fixations_in[0].size() == 3);
    CHECK(gp.sample.fixations_in[6].size() == 3);
  }

  CHECK_THROWS_AS(generate_synthetic_pair(1, "juggle", size), ConfigError);
  CHECK_THROWS_AS(generate_synthetic_pair(1, "sit", 16), ConfigError);
}

TEST_CASE("dataset directory round trip preserves samples") {
  auto dir = temp_dir("dataset");
  std::vector<GeneratedPair> pairs;
  const char* classes[] = {"grasp", "watch", "swing"};
  for (int i = 0; i < 3; ++i)
    pairs.push_back(generate_synthetic_pair(200 + i, classes[i], 64));
  write_dataset(dir, pairs);

  auto samples = load_dataset(dir);
  REQUIRE(samples.size() == 3);
  for (const auto& s : samples) {
    const GeneratedPair* src = nullptr;
    for (const auto& p : pairs)
      if (p.sample.id == s.id) src = &p;
    REQUIRE(src != nullptr);
    CHECK(s.affordance_label == src->sample.affordance_label);
    CHECK(s.object_label == src->sample.object_label);
    // heatmaps are recomputed from identical points: bit-identical
    CHECK(tensors_equal(s.gt_in, src->sample.gt_in));
    CHECK(tensors_equal(s.gt_non, src->sample.gt_non));
    // images pass through 8-bit quantization
    REQUIRE(s.image_in.shape() == src->sample.image_in.shape());
    for (size_t i = 0; i < s.image_in.values().size(); ++i)
      CHECK(std::abs(s.image_in.values()[i] -
                     src->sample.image_in.values()[i]) <= 0.5 / 255.0 + 1e-12);
    // pose passes through float32
    for (size_t i = 0; i < s.pose.values().size(); ++i)
      CHECK(std::abs(s.pose.values()[i] - src->sample.pose.values()[i]) <
            1e-6);
    for (int j = 0; j < kNumParts; ++j)
      CHECK(s.fixations_in[j] == src->record_in.points[j]);
  }

  SECTION("missing partner record is a data error") {
    auto records = load_annotations(dir / "annotations.json");
    records.erase(std::remove_if(records.begin(), records.end(),
                                 [&](const AnnotationRecord& r) {
                                   return r.image_id ==
                                          pairs[0].record_non.image_id;
                                 }),
                  records.end());
    save_annotations(dir / "annotations.json", records);
    CHECK_THROWS_AS(load_dataset(dir), DataError);
  }

  std::filesystem::remove_all(dir);
}

TEST_CASE("splits: ratios, label disjointness, determinism") {
  std::vector<RecordKey> records;
  Rng rng(35);
  const auto& vocab = affordance_vocabulary();
  const auto& objects = object_vocabulary();
  for (int i = 0; i < 100; ++i)
    records.push_back(
        {"pair_" + std::to_string(i),
         vocab[rng.next_u64() % vocab.size()].name,
         objects[rng.next_u64() % objects.size()]});

  SECTION("seen split is 70/10/20 with every id exactly once") {
    SplitManifest m = build_split(records, "seen", 9);
    CHECK(m.train.size() == 70);
    CHECK(m.val.size() == 10);
    CHECK(m.test.size() == 20);
    std::set<std::string> all(m.train.begin(), m.train.end());
    all.insert(m.val.begin(), m.val.end());
    all.insert(m.test.begin(), m.test.end());
    CHECK(all.size() == 100);
    CHECK(m.train_labels.empty());

    SplitManifest again = build_split(records, "seen", 9);
    CHECK(again.train == m.train);
    CHECK(again.val == m.val);
    CHECK(again.test == m.test);
    SplitManifest other = build_split(records, "seen", 10);
    CHECK(other.train != m.train);
  }

  SECTION("unseen splits hold out whole label groups") {
    for (const std::string kind : {"obj_unseen", "aff_unseen"}) {
      SplitManifest m = build_split(records, kind, 4);
      const bool by_object = kind == "obj_unseen";
      auto label_of = [&](const std::string& id) {
        for (const auto& r : records)
          if (r.id == id) return by_object ? r.object_label : r.affordance_label;
        return std::string();
      };
      std::set<std::string> train_seen, test_seen, val_seen;
      for (const auto& id : m.train) train_seen.insert(label_of(id));
      for (const auto& id : m.test) test_seen.insert(label_of(id));
      for (const auto& id : m.val) val_seen.insert(label_of(id));
      for (const auto& l : test_seen) CHECK(train_seen.count(l) == 0);
      for (const auto& l : val_seen) CHECK(train_seen.count(l) == 0);
      CHECK(m.test_labels.size() == 2 * m.val_labels.size());
      CHECK_FALSE(m.train.empty());
      CHECK_FALSE(m.test.empty());
      CHECK(m.train.size() + m.val.size() + m.test.size() == records.size());

      SplitManifest again = build_split(records, kind, 4);
      CHECK(again.train == m.train);
      CHECK(again.test == m.test);
    }
  }

  SECTION("too few labels make the partition impossible") {
    std::vector<RecordKey> narrow;
    for (int i = 0; i < 10; ++i)
      narrow.push_back({"r" + std::to_string(i), vocab[i % 3].name,
                        objects[i % 2]});
    CHECK_THROWS_AS(build_split(narrow, "obj_unseen", 1), DataError);
    CHECK_THROWS_AS(build_split(narrow, "aff_unseen", 1), DataError);
    CHECK_THROWS_AS(build_split(narrow, "bogus", 1), ConfigError);
  }

  SECTION("manifest json round trip") {
    auto dir = temp_dir("manifest");
    SplitManifest m = build_split(records, "aff_unseen", 12);
    save_manifest(dir / "m.json", m);
    SplitManifest back = load_manifest(dir / "m.json");
    CHECK(back.kind == m.kind);
    CHECK(back.seed == m.seed);
    CHECK(back.train == m.train);
    CHECK(back.val == m.val);
    CHECK(back.test == m.test);
    CHECK(back.test_labels == m.test_labels);
    atomic_write_file(dir / "bad.json", "{nope");
    CHECK_THROWS_AS(load_manifest(dir / "bad.json"), DataError);
    std::filesystem::remove_all(dir);
  }
}
