#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "metaof/error.hpp"
#include "metaof/rng.hpp"
#include "metaof/tasks.hpp"

using namespace metaof;
using namespace metaof::tasks;

namespace fs = std::filesystem;

TEST_CASE("derived seeds separate streams") {
  CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
  CHECK(derive_seed(1, "a", 0, 1) != derive_seed(1, "a", 1, 0));
  CHECK(derive_seed(1, "a", 2, 3) == derive_seed(1, "a", 2, 3));
  Rng r1(5, "x"), r2(5, "x");
  CHECK(r1.next() == r2.next());
}

TEST_CASE("sinusoid intervals") {
  const auto iv = SinusoidConfig{}.intervals();
  REQUIRE(iv.size() == 10);
  CHECK(iv.front().lo == -5.0);
  CHECK(iv.front().hi == -4.5);
  CHECK(iv.back().lo == doctest::Approx(4.0));
  CHECK(iv.back().hi == doctest::Approx(4.5));
  SinusoidConfig bad;
  bad.interval_count = 11;
  CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("sinusoid tasks are consistent with their family") {
  const SinusoidConfig cfg;
  const auto iv = cfg.intervals();
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto t = sample_sinusoid_task(cfg, s);
    const auto& f = std::get<SinusoidFamily>(t.family);
    CHECK(t.support.size() == 5);
    CHECK(t.query.size() == 10);
    for (const Split* sp : {&t.support, &t.query}) {
      for (Eigen::Index i = 0; i < sp->size(); ++i) {
        const double x = sp->inputs(i, 0);
        CHECK(x >= iv[f.interval].lo);
        CHECK(x <= iv[f.interval].hi);
        CHECK(std::abs(sp->targets(i, 0) - f.amplitude * std::sin(x - f.phase)) <= 1e-12);
      }
    }
    CHECK(f.amplitude >= 0.1);
    CHECK(f.amplitude <= 5.0);
  }
}

TEST_CASE("non-mutually-exclusive families: one per interval") {
  const SinusoidConfig cfg;
  const auto fams = make_sinusoid_families(cfg, 17);
  REQUIRE(fams.size() == 10);
  for (int i = 0; i < 10; ++i) CHECK(fams[i].interval == i);
  CHECK(make_sinusoid_families(cfg, 17)[3].amplitude == fams[3].amplitude);
  CHECK(make_sinusoid_families(cfg, 18)[3].amplitude != fams[3].amplitude);
  const auto t = sample_sinusoid_points(cfg, fams[4], 3);
  CHECK(std::get<SinusoidFamily>(t.family).phase == fams[4].phase);
}

TEST_CASE("meta-augmentation shifts every target by one offset") {
  const auto t = sample_sinusoid_task(SinusoidConfig{}, 4);
  const auto a = meta_augment_task(t, 9, 2.0);
  const double c = a.target_offset;
  CHECK(std::abs(c) <= 2.0);
  CHECK(((a.support.targets.array() - t.support.targets.array()) - c).abs().maxCoeff() < 1e-12);
  CHECK(((a.query.targets.array() - t.query.targets.array()) - c).abs().maxCoeff() < 1e-12);
  CHECK(a.support.inputs == t.support.inputs);
  CHECK(shift_targets(t, 0.0).support.targets == t.support.targets);

  auto pool = synth_class_pool(10, 2, 4, 1);
  const auto ct = sample_classification_task(pool, {LabelMode::Intershuffle, 2, 1, 1}, 1);
  CHECK_THROWS_AS(meta_augment_task(ct, 1), ContractError);
}

TEST_CASE("partitions are disjoint and cover the pool") {
  const auto pool = synth_class_pool(23, 3, 4, 2);
  const auto p = make_partitions(pool, 5, 7);
  CHECK(p.groups.size() == 4);
  CHECK(p.dropped.size() == 3);
  std::set<int> seen;
  for (const auto& g : p.groups) {
    CHECK(g.size() == 5);
    for (int c : g) CHECK(seen.insert(c).second);
  }
  for (int c : p.dropped) CHECK(seen.insert(c).second);
  CHECK(seen.size() == 23);
  CHECK_THROWS_AS(make_partitions(pool, 24, 1), ContractError);
}

TEST_CASE("ordered labels are a single-valued class map") {
  auto pool = synth_class_pool(20, 4, 6, 3);
  pool.partitions = make_partitions(pool, 5, 3);
  std::map<int, int> label_of;
  for (std::uint64_t s = 0; s < 500; ++s) {
    const auto t = sample_classification_task(pool, {LabelMode::Ordered, 5, 1, 5}, s);
    const auto& f = std::get<ClassFamily>(t.family);
    for (int l = 0; l < 5; ++l) {
      const auto [it, fresh] = label_of.emplace(f.class_ids[l], l);
      CHECK(it->second == l);
    }
    // Balanced, label-grouped rows.
    for (int l = 0; l < 5; ++l) {
      CHECK(t.support.labels[l] == l);
      for (int q = 0; q < 5; ++q) CHECK(t.query.labels[l * 5 + q] == l);
    }
  }
  CHECK(label_of.size() == 20);
}

TEST_CASE("ordered mode requires partitions; sample count is checked") {
  auto pool = synth_class_pool(10, 2, 3, 1);
  CHECK_THROWS_AS(sample_classification_task(pool, {LabelMode::Ordered, 5, 1, 1}, 1), ContractError);
  CHECK_THROWS_AS(sample_classification_task(pool, {LabelMode::Intershuffle, 5, 2, 2}, 1), ContractError);
}

TEST_CASE("synthetic pool spacing") {
  SynthPoolConfig cfg;
  const auto pool = synth_class_pool(cfg, 8);
  REQUIRE(pool.class_count() == 20);
  // Class means should sit near well-separated centers.
  std::vector<Vector> means;
  for (const auto& c : pool.classes) {
    Vector m = Vector::Zero(cfg.dim);
    for (const auto& s : c.samples) m += s;
    means.push_back(m / static_cast<double>(c.samples.size()));
  }
  for (std::size_t i = 0; i < means.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) CHECK((means[i] - means[j]).norm() > 3.0);
  }
}

TEST_CASE("area downsampling") {
  Matrix img(4, 4);
  img << 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1;
  const Matrix d = downsample_area(img, 2);
  Matrix expected(2, 2);
  expected << 1, 0, 0, 1;
  CHECK(d == expected);
  const Matrix c = Matrix::Constant(5, 7, 0.25);
  CHECK((downsample_area(c, 3).array() - 0.25).abs().maxCoeff() < 1e-12);
  // Non-integer ratios preserve the mean.
  Matrix r(3, 3);
  r << 0, 1, 2, 3, 4, 5, 6, 7, 8;
  CHECK(downsample_area(r, 2).mean() == doctest::Approx(r.mean()));
}

TEST_CASE("image pool ingestion") {
  const auto root = fs::temp_directory_path() / "metaof_test_images";
  fs::remove_all(root);
  fs::create_directories(root / "b_class");
  fs::create_directories(root / "a_class");
  fs::create_directories(root / "empty_class");
  {
    std::ofstream p2(root / "a_class" / "x.pgm");
    p2 << "P2\n# comment\n2 2\n255\n0 255\n255 0\n";
    std::ofstream p5(root / "a_class" / "y.pgm", std::ios::binary);
    p5 << "P5\n2 2\n255\n";
    const unsigned char px[4] = {255, 255, 255, 255};
    p5.write(reinterpret_cast<const char*>(px), 4);
    std::ofstream bad(root / "b_class" / "z.pgm");
    bad << "P2\n2 2\n255\n0 1\n";
    std::ofstream ok(root / "b_class" / "w.pgm");
    ok << "P2\n1 1\n15\n15\n";
    std::ofstream txt(root / "b_class" / "notes.txt");
    txt << "hello";
  }
  const auto pool = load_image_pool(root, 1);
  REQUIRE(pool.class_count() == 2);
  CHECK(pool.dim == 1);
  CHECK(pool.classes[0].name == "a_class");
  REQUIRE(pool.classes[0].samples.size() == 2);
  CHECK(pool.classes[0].samples[0](0) == doctest::Approx(0.5));
  CHECK(pool.classes[0].samples[1](0) == doctest::Approx(1.0));
  CHECK(pool.classes[1].samples.size() == 1);
  CHECK(pool.warnings.size() == 3);  // truncated file, unsupported file, empty class

  const auto stats = root / "stats.csv";
  write_pool_stats(pool, stats);
  std::ifstream in(stats);
  std::string header;
  std::getline(in, header);
  CHECK(header == "class,samples");
  CHECK_THROWS_AS(load_image_pool(root / "nope", 4), IoError);
}
