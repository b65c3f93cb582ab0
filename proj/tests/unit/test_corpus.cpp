#include "doctest_torch.hpp"

#include <fstream>

#include "dermaug/corpus.hpp"
#include "dermaug/error.hpp"
#include "test_support.hpp"

using namespace dermaug;
namespace fs = std::filesystem;

namespace {

fs::path write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  return path;
}

std::size_t count_of(const DatasetManifest& m, SkinGroup g) { return m.count(g); }

}  // namespace

TEST_CASE("condition and fst vocabularies") {
  CHECK(kAllConditions.size() == 7);
  for (auto c : kAllConditions) {
    CHECK(parse_condition(condition_name(c)) == c);
    CHECK(parse_condition(condition_slug(c)) == c);
  }
  CHECK(parse_condition("Psoriasis") == Condition::Psoriasis);
  CHECK_FALSE(parse_condition("eczema"));
  CHECK(parse_fst("5") == Fst::V);
  CHECK(parse_fst("II") == Fst::II);
  CHECK_FALSE(parse_fst("III"));
  CHECK_FALSE(parse_fst("4"));
  CHECK(group_of(Fst::I) == SkinGroup::Light);
  CHECK(group_of(Fst::II) == SkinGroup::Light);
  CHECK(group_of(Fst::V) == SkinGroup::Dark);
  CHECK(group_of(Fst::VI) == SkinGroup::Dark);
}

TEST_CASE("load_manifest parses rows in order and resolves paths") {
  const auto dir = testing::scratch_dir("load");
  const auto path = write_file(dir / "m.csv",
                               "id,image_path,condition,fst\n"
                               "b,img/b.png,psoriasis,V\n"
                               "a,img/a.png,basal cell carcinoma,I\n");
  auto m = load_manifest(path);
  REQUIRE(m.size() == 2);
  CHECK(m.records[0].id == "b");
  CHECK(m.records[1].id == "a");
  CHECK(m.records[0].group() == SkinGroup::Dark);
  CHECK(m.records[1].condition == Condition::BasalCellCarcinoma);
  CHECK(m.records[0].image_path == (dir / "img/b.png").lexically_normal());

  SUBCASE("save and reload is stable") {
    save_manifest(m, dir / "again.csv");
    auto again = load_manifest(dir / "again.csv");
    CHECK(again.records == m.records);
  }
}

TEST_CASE("load_manifest rejects malformed input") {
  const auto dir = testing::scratch_dir("bad");
  SUBCASE("header only is an empty manifest") {
    CHECK(load_manifest(write_file(dir / "h.csv", "id,image_path,condition,fst\n")).empty());
  }
  SUBCASE("missing column") {
    CHECK_THROWS_AS(load_manifest(write_file(dir / "c.csv", "id,image_path,condition\nx,y,psoriasis\n")),
                    ValidationError);
  }
  SUBCASE("unknown condition names the row") {
    try {
      load_manifest(write_file(dir / "u.csv", "id,image_path,condition,fst\nx,y.png,eczema,I\n"));
      FAIL("expected an error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find(":2") != std::string::npos);
      CHECK(std::string(e.what()).find("eczema") != std::string::npos);
    }
  }
  SUBCASE("intermediate skin types") {
    try {
      load_manifest(write_file(dir / "f.csv", "id,image_path,condition,fst\nx,y.png,psoriasis,III\n"));
      FAIL("expected an error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("fst outside supported ends of spectrum") != std::string::npos);
    }
  }
  SUBCASE("duplicate id") {
    CHECK_THROWS_AS(load_manifest(write_file(dir / "d.csv",
                                             "id,image_path,condition,fst\nx,a.png,psoriasis,I\nx,b.png,psoriasis,V\n")),
                    ValidationError);
  }
}

TEST_CASE("fitzpatrick-shaped distribution") {
  auto m = manifest_from_counts(fitzpatrick_subset_counts(), "fz");
  CHECK(m.size() == 1631);
  auto counts = group_counts(m);
  CHECK(counts.at({Condition::BasalCellCarcinoma, Fst::II}) == 156);
  CHECK(counts.at({Condition::PrurigoNodularis, Fst::I}) == 7);
  std::size_t total = 0;
  for (const auto& [cell, n] : counts) total += n;
  CHECK(total == m.size());
  CHECK(count_of(m, SkinGroup::Light) == 1284);
  CHECK(count_of(m, SkinGroup::Dark) == 347);

  auto empty = group_counts(DatasetManifest{});
  CHECK(empty.size() == 28);
  for (const auto& [cell, n] : empty) CHECK(n == 0);
}

TEST_CASE("flexible subsets") {
  auto m = manifest_from_counts(fitzpatrick_subset_counts(), "fz");
  auto a = sample_flexible_subset(m, SkinGroup::Dark, 8, 3);
  CHECK(a.size() == 56);
  for (auto c : kAllConditions) CHECK(a.filter(c).size() == 8);
  for (const auto& r : a.records) CHECK(r.group() == SkinGroup::Dark);
  CHECK(sample_flexible_subset(m, SkinGroup::Dark, 8, 3).ids() == a.ids());
  CHECK(sample_flexible_subset(m, SkinGroup::Dark, 8, 4).ids() != a.ids());
  CHECK(sample_flexible_subset(m, SkinGroup::Light, 0, 3).empty());

  CountTable thin = fitzpatrick_subset_counts();
  thin[{Condition::Folliculitis, Fst::V}] = 3;
  thin[{Condition::Folliculitis, Fst::VI}] = 2;
  try {
    sample_flexible_subset(manifest_from_counts(thin, "thin"), SkinGroup::Dark, 8, 0);
    FAIL("expected an error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("folliculitis") != std::string::npos);
  }
}

TEST_CASE("scenario splits follow the table arithmetic") {
  auto m = manifest_from_counts(fitzpatrick_subset_counts(), "fz");
  for (std::uint64_t seed : {0u, 1u, 7u}) {
    auto i = build_scenario(m, Scenario::I, seed);
    CHECK(i.train.size() == 1519);
    CHECK(i.train.count(SkinGroup::Dark) == 291);
    CHECK(i.train.count(SkinGroup::Light) == 1228);
    CHECK(i.test.size() == 56);
    CHECK(i.test.ids() == i.flexible_dark.ids());

    auto ii = build_scenario(m, Scenario::II, seed);
    CHECK(ii.train.size() == 1284);
    CHECK(ii.train.count(SkinGroup::Dark) == 56);
    CHECK(ii.test.size() == 291);
    for (const auto& id : ii.flexible_dark.ids()) CHECK(ii.train.find(id) != nullptr);

    auto iii = build_scenario(m, Scenario::III, seed);
    CHECK(iii.train.size() == 1228);
    CHECK(iii.train.count(SkinGroup::Dark) == 0);
    CHECK(iii.test.size() == 291);

    for (const auto* s : {&i, &ii, &iii}) {
      for (const auto& id : s->test.ids()) CHECK(s->train.find(id) == nullptr);
      for (const auto& id : s->flexible_light.ids()) CHECK(s->train.find(id) == nullptr);
    }
  }
}

TEST_CASE("split files round trip") {
  auto m = manifest_from_counts(fitzpatrick_subset_counts(), "fz");
  auto s = build_scenario(m, Scenario::II, 11);
  const auto path = testing::scratch_dir("split") / "s.json";
  save_split(s, path);
  auto back = load_split(path, m);
  CHECK(back.scenario == Scenario::II);
  CHECK(back.seed == 11);
  CHECK(back.train.records == s.train.records);
  CHECK(back.test.records == s.test.records);
  CHECK(back.flexible_dark.records == s.flexible_dark.records);
  CHECK(back.flexible_light.records == s.flexible_light.records);
}

TEST_CASE("fitzpatrick import keeps the seven conditions and the spectrum ends") {
  const auto dir = testing::scratch_dir("import");
  const auto path = write_file(dir / "meta.csv",
                               "md5hash,fitzpatrick_scale,label,nine_partition_label\n"
                               "h1,1,psoriasis,x\n"
                               "h2,3,psoriasis,x\n"
                               "h3,6,folliculitis,x\n"
                               "h4,2,acne,x\n"
                               "h5,-1,psoriasis,x\n");
  auto m = import_fitzpatrick(path, dir / "images");
  REQUIRE(m.size() == 2);
  CHECK(m.records[0].id == "h1");
  CHECK(m.records[0].fst == Fst::I);
  CHECK(m.records[1].fst == Fst::VI);
  CHECK(m.records[1].image_path == dir / "images" / "h3.jpg");
}
