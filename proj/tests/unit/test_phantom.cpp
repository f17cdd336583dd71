#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "cascade/errors.hpp"
#include "cascade/phantom.hpp"
#include "cascade/threading.hpp"

using namespace cascade;

TEST_CASE("identical params produce bit-identical cases") {
  PhantomParams p;
  p.seed = 1;
  LabeledCase a = generate_phantom(p);
  LabeledCase b = generate_phantom(p);
  CHECK(a.image.data == b.image.data);
  CHECK(a.liver.data == b.liver.data);
  CHECK(a.lesion.data == b.lesion.data);

  p.seed = 2;
  LabeledCase c = generate_phantom(p);
  CHECK(a.image.data != c.image.data);
}

TEST_CASE("zero lesion count yields an all-zero lesion mask") {
  PhantomParams p;
  p.lesion_count_lo = 0;
  p.lesion_count_hi = 0;
  p.seed = 3;
  LabeledCase c = generate_phantom(p);
  for (float v : c.lesion.data) CHECK(v == 0.0f);
}

TEST_CASE("every lesion voxel lies inside the liver, exhaustively") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    PhantomParams p;
    p.seed = seed;
    LabeledCase c = generate_phantom(p);
    std::size_t lesion_count = 0;
    for (std::size_t i = 0; i < c.lesion.data.size(); ++i) {
      if (c.lesion.data[i] != 0.0f) {
        ++lesion_count;
        CHECK(c.liver.data[i] == 1.0f);
      }
    }
    CHECK(lesion_count > 0);  // default count range starts at 1
  }
}

TEST_CASE("generated intensities stay in the CT-like window") {
  PhantomParams p;
  p.seed = 5;
  p.noise_sigma = 80.0;  // exaggerate noise to exercise the clamp
  LabeledCase c = generate_phantom(p);
  for (float v : c.image.data) {
    CHECK(v >= -150.0f);
    CHECK(v <= 250.0f);
  }
}

TEST_CASE("parameter validation rejects bad configurations") {
  PhantomParams p;
  p.noise_sigma = -1.0;
  CHECK_THROWS_AS(validate_params(p), ParamError);
  p = PhantomParams{};
  p.intensity_lesion = p.intensity_liver;
  CHECK_THROWS_AS(validate_params(p), ParamError);
  p = PhantomParams{};
  p.lesion_radius_lo = 30.0;
  p.lesion_radius_hi = 40.0;  // larger than any liver radius for a 24-min-dim
  CHECK_THROWS_AS(validate_params(p), ParamError);
  p = PhantomParams{};
  p.lesion_count_lo = 3;
  p.lesion_count_hi = 1;
  CHECK_THROWS_AS(validate_params(p), ParamError);
}

TEST_CASE("dataset split has exact sizes and set-equal union") {
  PhantomParams base;
  base.seed = 77;
  base.shape = {8, 32, 32};
  base.lesion_count_lo = 0;
  base.lesion_count_hi = 1;
  base.lesion_radius_lo = 2.0;
  base.lesion_radius_hi = 3.0;
  auto params = make_param_list(base, 40);
  Dataset ds = generate_dataset(params, {0.5, 0.25});
  CHECK(ds.train_ids.size() == 20);
  CHECK(ds.val_ids.size() == 10);
  CHECK(ds.test_ids.size() == 10);

  std::set<std::string> all(ds.train_ids.begin(), ds.train_ids.end());
  all.insert(ds.val_ids.begin(), ds.val_ids.end());
  all.insert(ds.test_ids.begin(), ds.test_ids.end());
  CHECK(all.size() == 40);
  std::set<std::string> expected;
  for (const auto& c : ds.cases) expected.insert(c.case_id);
  CHECK(all == expected);

  Dataset ds2 = generate_dataset(params, {0.5, 0.25});
  CHECK(ds.train_ids == ds2.train_ids);
  CHECK(ds.val_ids == ds2.val_ids);
  CHECK(ds.test_ids == ds2.test_ids);
  for (std::size_t i = 0; i < ds.cases.size(); ++i)
    CHECK(ds.cases[i].image.data == ds2.cases[i].image.data);
}

TEST_CASE("dataset generation is thread-count invariant") {
  PhantomParams base;
  base.seed = 9;
  base.shape = {8, 32, 32};
  base.lesion_count_lo = 0;
  base.lesion_count_hi = 0;
  auto params = make_param_list(base, 6);
  set_workers(1);
  Dataset a = generate_dataset(params, {0.5, 0.25});
  set_workers(4);
  Dataset b = generate_dataset(params, {0.5, 0.25});
  set_workers(1);
  for (std::size_t i = 0; i < a.cases.size(); ++i)
    CHECK(a.cases[i].image.data == b.cases[i].image.data);
  CHECK(a.train_ids == b.train_ids);
}

TEST_CASE("dataset invalid split fractions raise ParamError") {
  PhantomParams base;
  auto params = make_param_list(base, 4);
  CHECK_THROWS_AS(generate_dataset(params, {0.7, 0.5}), ParamError);
  CHECK_THROWS_AS(generate_dataset(params, {0.0, 0.5}), ParamError);
  CHECK_THROWS_AS(generate_dataset(params, {1.0, 0.1}), ParamError);
}

TEST_CASE("dataset round trips through the on-disk layout") {
  auto dir = std::filesystem::temp_directory_path() / "cascade_phantom_ds";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  PhantomParams base;
  base.seed = 123;
  base.shape = {8, 32, 32};
  base.lesion_count_lo = 0;
  base.lesion_count_hi = 1;
  base.lesion_radius_lo = 2.0;
  base.lesion_radius_hi = 3.0;
  auto params = make_param_list(base, 8);
  Dataset ds = generate_dataset(params, {0.5, 0.25});
  write_dataset(ds, dir.string());
  Dataset rt = read_dataset(dir.string());
  CHECK(rt.train_ids == ds.train_ids);
  CHECK(rt.val_ids == ds.val_ids);
  CHECK(rt.test_ids == ds.test_ids);
  REQUIRE(rt.cases.size() == ds.cases.size());
  std::vector<std::string> sorted_ids;
  for (const auto& c : ds.cases) sorted_ids.push_back(c.case_id);
  std::sort(sorted_ids.begin(), sorted_ids.end());
  for (std::size_t i = 0; i < rt.cases.size(); ++i) {
    CHECK(rt.cases[i].case_id == sorted_ids[i]);
    const auto& orig = *std::find_if(
        ds.cases.begin(), ds.cases.end(),
        [&](const LabeledCase& c) { return c.case_id == sorted_ids[i]; });
    CHECK(rt.cases[i].image.data == orig.image.data);
    CHECK(rt.cases[i].liver.data == orig.liver.data);
    CHECK(rt.cases[i].lesion.data == orig.lesion.data);
  }
}
