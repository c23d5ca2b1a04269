#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include "mimd/binary_io.hpp"
#include "mimd/data.hpp"
#include "mimd/error.hpp"
#include "mimd/synth.hpp"

using namespace mimd;

namespace {

SubjectRecord rec(const std::string& id, double cdr, const std::string& date = "2020-01-01",
                  const std::string& path = "v.miv") {
  SubjectRecord r;
  r.subject_id = id;
  r.visit_date = date;
  r.age = 70;
  r.mmse = 28;
  r.cdr = cdr;
  r.volume_path = path;
  return r;
}

std::vector<SubjectRecord> cohort(int cn, int ad) {
  std::vector<SubjectRecord> out;
  for (int i = 0; i < cn; ++i) out.push_back(rec("CN" + std::to_string(i), 0.0));
  for (int i = 0; i < ad; ++i) out.push_back(rec("AD" + std::to_string(i), 1.0 + i % 3));
  return out;
}

RoiMask mask_with_slice_counts(const std::vector<Index>& counts, Index h = 16, Index w = 16) {
  RoiMask m;
  m.dims = {static_cast<Index>(counts.size()), h, w};
  m.voxels = MaskArray::Zero(m.dims.size());
  for (Index z = 0; z < m.dims.depth; ++z) {
    for (Index k = 0; k < counts[z]; ++k) m.voxels(z * h * w + k) = 1;
  }
  return m;
}

Index brute_force_window(const std::vector<Index>& counts, Index window) {
  Index best = -1, start = 0;
  for (Index s = 0; s + window <= static_cast<Index>(counts.size()); ++s) {
    Index total = 0;
    for (Index k = s; k < s + window; ++k) total += counts[k];
    if (total > best) {
      best = total;
      start = s;
    }
  }
  return start;
}

Index brute_force_mode(const std::vector<Index>& v) {
  Index best = 0, best_count = -1;
  for (Index candidate : v) {
    Index c = std::count(v.begin(), v.end(), candidate);
    if (c > best_count || (c == best_count && candidate < best)) {
      best = candidate;
      best_count = c;
    }
  }
  return best;
}

/// Mask with one pixel per slice at the given (row, col) positions.
RoiMask mask_from_points(const std::vector<Centroid>& pts, Index h = 20, Index w = 20) {
  RoiMask m;
  m.dims = {static_cast<Index>(pts.size()), h, w};
  m.voxels = MaskArray::Zero(m.dims.size());
  for (Index z = 0; z < m.dims.depth; ++z) m.voxels((z * h + pts[z].cx) * w + pts[z].cy) = 1;
  return m;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mimd_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("select_latest_visit keeps the newest visit per subject") {
  std::vector<SubjectRecord> one{rec("a", 0, "2020-01-01"), rec("a", 0, "2022-05-11")};
  auto out = select_latest_visit(one);
  REQUIRE(out.size() == 1);
  CHECK(out[0].visit_date == "2022-05-11");

  std::vector<SubjectRecord> single{rec("a", 0)};
  CHECK(select_latest_visit(single).size() == 1);

  std::vector<SubjectRecord> two{rec("a", 0, "2019-01-01"), rec("b", 1, "2019-02-01"), rec("a", 0, "2021-01-01"),
                                 rec("b", 1, "2018-01-01")};
  auto out2 = select_latest_visit(two);
  REQUIRE(out2.size() == 2);
  CHECK(out2[0].visit_date == "2021-01-01");
  CHECK(out2[1].visit_date == "2019-02-01");

  std::vector<SubjectRecord> tie{rec("a", 0, "2020-01-01", "a.miv"), rec("a", 0, "2020-01-01", "b.miv")};
  CHECK(select_latest_visit(tie)[0].volume_path == "b.miv");
}

TEST_CASE("cdr_to_label and record validation") {
  CHECK(cdr_to_label(0) == ClassLabel::CN);
  CHECK(cdr_to_label(2) == ClassLabel::AD);
  CHECK(cdr_to_label(1) == ClassLabel::AD);
  CHECK_THROWS_AS(cdr_to_label(0.5), DataError);

  auto r = rec("x", 0);
  CHECK_NOTHROW(r.validate());
  r.mmse = 31;
  CHECK_THROWS_AS(r.validate(), DataError);
  r = rec("x", 1.5);
  CHECK_THROWS_AS(r.validate(), DataError);
  r = rec("x", 0);
  r.age = 0;
  CHECK_THROWS_AS(r.validate(), DataError);
}

TEST_CASE("undersample_balance") {
  Rng rng(3);
  auto out = undersample_balance(cohort(100, 70), rng);
  int cn = 0, ad = 0;
  for (const auto& r : out) (cdr_to_label(r.cdr) == ClassLabel::CN ? cn : ad)++;
  CHECK(cn == 70);
  CHECK(ad == 70);

  auto balanced = cohort(210, 210);
  auto same = undersample_balance(balanced, rng);
  REQUIRE(same.size() == 420);
  for (std::size_t i = 0; i < same.size(); ++i) CHECK(same[i].subject_id == balanced[i].subject_id);

  Rng a(9), b(9);
  auto x = undersample_balance(cohort(50, 20), a), y = undersample_balance(cohort(50, 20), b);
  REQUIRE(x.size() == y.size());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(x[i].subject_id == y[i].subject_id);

  CHECK_THROWS_AS(undersample_balance(cohort(5, 0), rng), DataError);
}

TEST_CASE("split_subjects sizes, partition and stratification") {
  Rng rng(11);
  auto split = split_subjects(cohort(210, 210), {0.70, 0.15, 0.15}, rng);
  CHECK(split.train.size() == 294);
  CHECK(split.validation.size() == 63);
  CHECK(split.test.size() == 63);

  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<int> n(2, 60);
    int cn = n(rng), ad = n(rng);
    auto all = cohort(cn, ad);
    auto s = split_subjects(all, {0.70, 0.15, 0.15}, rng);
    std::multiset<std::string> ids;
    for (const auto* set : {&s.train, &s.validation, &s.test})
      for (const auto& r : *set) ids.insert(r.subject_id);
    REQUIRE(ids.size() == all.size());
    CHECK(std::set<std::string>(ids.begin(), ids.end()).size() == all.size());

    const double ratios[3] = {0.70, 0.15, 0.15};
    const std::vector<SubjectRecord>* sets[3] = {&s.train, &s.validation, &s.test};
    for (int k = 1; k < 3; ++k) {
      int c_cn = 0, c_ad = 0;
      for (const auto& r : *sets[k]) (cdr_to_label(r.cdr) == ClassLabel::CN ? c_cn : c_ad)++;
      CHECK(std::abs(c_cn - ratios[k] * cn) <= 1.0 + 1e-9);
      CHECK(std::abs(c_ad - ratios[k] * ad) <= 1.0 + 1e-9);
      CHECK(static_cast<long>(sets[k]->size()) == std::lround((cn + ad) * ratios[k]));
    }
  }

  Rng a(5), b(5);
  auto s1 = split_subjects(cohort(30, 30), {0.70, 0.15, 0.15}, a);
  auto s2 = split_subjects(cohort(30, 30), {0.70, 0.15, 0.15}, b);
  for (std::size_t i = 0; i < s1.test.size(); ++i) CHECK(s1.test[i].subject_id == s2.test[i].subject_id);

  CHECK_THROWS_AS(split_subjects(cohort(1, 1), {0.70, 0.15, 0.15}, rng), DataError);
  CHECK_THROWS_AS(split_subjects(cohort(10, 10), {0.70, 0.20, 0.15}, rng), ConfigError);
}

TEST_CASE("minmax_scale and one_hot_gender") {
  std::vector<double> v{2, 4, 6};
  auto s = minmax_scale(v, 2, 6);
  CHECK(s == std::vector<double>{0.0, 0.5, 1.0});
  CHECK(minmax_scale(8.0, 2, 6) == 1.0);
  CHECK(minmax_scale(-1.0, 2, 6) == 0.0);
  CHECK_THROWS_AS(minmax_scale(3.0, 5, 5), DataError);

  CHECK(one_hot_gender("F") == std::array<double, 2>{1, 0});
  CHECK(one_hot_gender("M") == std::array<double, 2>{0, 1});
  CHECK_THROWS_AS(one_hot_gender("X"), DataError);
}

TEST_CASE("tabular scaler fitted on training rows maps every split into [0,1]") {
  Rng rng(2);
  std::normal_distribution<double> age(75, 8), mmse(25, 4);
  std::vector<TabularFeatures> train, other;
  for (int i = 0; i < 100; ++i) {
    train.push_back({age(rng), mmse(rng), i % 2 ? Gender::M : Gender::F});
    other.push_back({age(rng) + 10, mmse(rng) - 5, Gender::F});
  }
  auto scaler = TabularScaler::fit(train);
  for (const auto& f : other) {
    auto v = scaler.transform(f);
    CHECK(v.size() == 4);
    CHECK(v.minCoeff() >= 0.0);
    CHECK(v.maxCoeff() <= 1.0);
  }
  auto lo = *std::min_element(train.begin(), train.end(), [](auto& a, auto& b) { return a.age < b.age; });
  CHECK(scaler.transform(lo)(0) == 0.0);
}

TEST_CASE("slice_window_select") {
  std::vector<Index> counts;
  for (Index s = 0; s <= 60; ++s) counts.push_back(100 - std::abs(s - 30));
  CHECK(slice_window_select(mask_with_slice_counts(counts, 16, 8), 25) == 18);

  std::vector<Index> spike(10, 0);
  spike[6] = 4;
  CHECK(slice_window_select(mask_with_slice_counts(spike), 1) == 6);

  std::vector<Index> uniform(30, 5);
  CHECK(slice_window_select(mask_with_slice_counts(uniform), 25) == 0);

  CHECK_THROWS_AS(slice_window_select(mask_with_slice_counts(std::vector<Index>(30, 0)), 25), DataError);
  CHECK_THROWS_AS(slice_window_select(mask_with_slice_counts(std::vector<Index>(20, 1)), 25), DataError);

  Rng rng(17);
  std::uniform_int_distribution<Index> c(0, 6), depth(5, 40);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Index> counts_r(static_cast<std::size_t>(depth(rng)));
    for (auto& x : counts_r) x = c(rng);
    counts_r[0] += 1;
    Index window = std::uniform_int_distribution<Index>(1, static_cast<Index>(counts_r.size()))(rng);
    CHECK(slice_window_select(mask_with_slice_counts(counts_r), window) == brute_force_window(counts_r, window));
  }
}

TEST_CASE("modal_centroid") {
  std::vector<Centroid> same(5, Centroid{10, 12});
  CHECK(modal_centroid(mask_from_points(same), 0, 5) == Centroid{10, 12});

  std::vector<Centroid> three{{3, 4}, {3, 4}, {5, 6}};
  CHECK(modal_centroid(mask_from_points(three), 0, 3) == Centroid{3, 4});

  std::vector<Index> tie{3, 3, 5, 5};
  CHECK(statistical_mode(tie) == 3);
  std::vector<Index> tie_rev{5, 5, 3, 3};
  CHECK(statistical_mode(tie_rev) == 3);

  // Half-up rounding of the per-slice mean: pixels at rows 2 and 3 -> 2.5 -> 3.
  RoiMask m;
  m.dims = {1, 8, 8};
  m.voxels = MaskArray::Zero(64);
  m.voxels(2 * 8 + 1) = 1;
  m.voxels(3 * 8 + 2) = 1;
  auto cs = slice_centroids(m, 0, 1);
  REQUIRE(cs.size() == 1);
  CHECK(cs[0] == Centroid{3, 2});

  std::vector<Centroid> with_gap{{1, 1}, {2, 2}};
  RoiMask gap = mask_from_points(with_gap);
  gap.voxels.segment(0, 400).setZero();
  CHECK(modal_centroid(gap, 0, 2) == Centroid{2, 2});
  gap.voxels.setZero();
  CHECK_THROWS_AS(modal_centroid(gap, 0, 2), DataError);

  Rng rng(23);
  std::uniform_int_distribution<Index> coord(0, 4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Centroid> pts(static_cast<std::size_t>(std::uniform_int_distribution<int>(1, 12)(rng)));
    for (auto& p : pts) p = {coord(rng), coord(rng)};
    std::vector<Index> xs, ys;
    for (const auto& p : pts) {
      xs.push_back(p.cx);
      ys.push_back(p.cy);
    }
    Index n = static_cast<Index>(pts.size());
    Centroid got = modal_centroid(mask_from_points(pts), 0, n);
    CHECK(got == Centroid{brute_force_mode(xs), brute_force_mode(ys)});
    std::shuffle(pts.begin(), pts.end(), rng);
    CHECK(modal_centroid(mask_from_points(pts), 0, n) == got);
  }
}

TEST_CASE("crop_roi window placement") {
  Volume v;
  v.dims = {25, 64, 64};
  v.voxels.resize(v.dims.size());
  for (Index i = 0; i < v.voxels.size(); ++i) v.voxels(i) = static_cast<float>(i % 997) / 997.0f;

  InstanceRecord inst;
  inst.slice_start = 0;
  inst.slice_count = 25;
  inst.centroid = {16, 16};
  CHECK(crop_origin(v.dims, inst.centroid, {}) == std::pair<Index, Index>{0, 0});
  inst.centroid = {5, 5};
  CHECK(crop_origin(v.dims, inst.centroid, {}) == std::pair<Index, Index>{0, 0});
  inst.centroid = {63, 40};
  CHECK(crop_origin(v.dims, inst.centroid, {}) == std::pair<Index, Index>{32, 24});

  Tensor t = crop_roi(v, inst);
  CHECK(t.shape() == Shape{25, 32, 32, 3});
  // grey value replicated across channels and taken from the shifted window
  CHECK(t.values()(0) == doctest::Approx(v.at(0, 32, 24)));
  CHECK(t.values()(1) == t.values()(0));
  CHECK(t.values()(2) == t.values()(0));

  Rng rng(4);
  std::uniform_int_distribution<Index> any(-20, 90);
  for (int trial = 0; trial < 200; ++trial) {
    Centroid c{any(rng), any(rng)};
    auto [top, left] = crop_origin(v.dims, c, {});
    CHECK(top >= 0);
    CHECK(left >= 0);
    CHECK(top + 32 <= 64);
    CHECK(left + 32 <= 64);
  }

  Volume small;
  small.dims = {25, 20, 64};
  small.voxels = Eigen::ArrayXf::Zero(small.dims.size());
  CHECK_THROWS_AS(crop_roi(small, inst), DataError);
  inst.slice_start = 1;
  CHECK_THROWS_AS(crop_roi(v, inst), DataError);
}

TEST_CASE("batch plan and assembly") {
  Rng rng(1);
  auto plan = batch_plan(14, 6, rng);
  REQUIRE(plan.size() == 3);
  CHECK(plan[0].size() == 6);
  CHECK(plan[1].size() == 6);
  CHECK(plan[2].size() == 2);
  CHECK(batch_plan(14, 6, rng, true).size() == 2);

  Rng a(8), b(8);
  CHECK(batch_plan(30, 4, a) == batch_plan(30, 4, b));

  for (int trial = 0; trial < 100; ++trial) {
    auto n = static_cast<std::size_t>(std::uniform_int_distribution<int>(1, 50)(rng));
    auto p = batch_plan(n, std::uniform_int_distribution<Index>(1, 9)(rng), rng);
    std::vector<std::size_t> seen;
    for (const auto& batch : p) seen.insert(seen.end(), batch.begin(), batch.end());
    std::sort(seen.begin(), seen.end());
    for (std::size_t i = 0; i < n; ++i) REQUIRE(seen[i] == i);
    CHECK(seen.size() == n);
  }
  CHECK_THROWS_AS(batch_plan(0, 6, rng), DataError);
  CHECK_THROWS_AS(batch_plan(5, 0, rng), ConfigError);

  std::vector<Example> ex;
  for (int i = 0; i < 5; ++i) {
    Example e;
    e.subject_id = "s" + std::to_string(i);
    e.label = i % 2 ? ClassLabel::AD : ClassLabel::CN;
    e.features = {60.0 + i, 20.0 + i, i % 2 ? Gender::M : Gender::F};
    e.images.push_back(Tensor::filled({2, 2, 2, 1}, i));
    e.images.push_back(Tensor::filled({1, 2, 2, 3}, 10 * i));
    ex.push_back(e);
  }
  std::vector<TabularFeatures> feats;
  for (const auto& e : ex) feats.push_back(e.features);
  auto scaler = TabularScaler::fit(feats);
  auto batches = build_batches(ex, scaler, 2, rng);
  REQUIRE(batches.size() == 3);
  for (const auto& batch : batches) {
    CHECK(batch.tabular.rows() == batch.size());
    CHECK(batch.images[0].dim(0) == batch.size());
    CHECK(batch.images[1].shape() == Shape{batch.size(), 1, 2, 2, 3});
    CHECK(batch.tabular.minCoeff() >= 0.0);
    CHECK(batch.tabular.maxCoeff() <= 1.0);
    for (Index k = 0; k < batch.size(); ++k) {
      int i = std::stoi(batch.subject_ids[k].substr(1));
      auto sample = batch.sample(k);
      CHECK(sample.images[0].shape() == Shape{2, 2, 2, 1});
      CHECK(sample.images[0].values()(3) == i);
      CHECK(sample.images[1].values()(5) == 10 * i);
      CHECK(sample.tabular.values()(0) == doctest::Approx(i / 4.0));
    }
  }
}

TEST_CASE("volume container round trip and errors") {
  Volume v;
  v.dims = {3, 4, 5};
  v.voxels = Eigen::ArrayXf::Random(60);
  auto bytes = encode_volume(v);
  CHECK(bytes.size() == 4 + 4 + 4 + 12 + 4 + 240);
  Volume back = decode_volume(bytes);
  CHECK(back.dims == v.dims);
  CHECK((back.voxels == v.voxels).all());
  CHECK(encode_volume(back) == bytes);

  RoiMask m;
  m.dims = {2, 2, 2};
  m.voxels = MaskArray::Zero(8);
  m.voxels(3) = 1;
  auto mb = encode_mask(m);
  CHECK((decode_mask(mb).voxels == m.voxels).all());

  auto dir = temp_dir("io");
  save_volume(v, dir / "v.miv");
  CHECK(binary::read_file(dir / "v.miv") == bytes);
  CHECK((load_volume(dir / "v.miv").voxels == v.voxels).all());

  auto kind_of = [](auto&& fn) {
    try {
      fn();
    } catch (const FormatError& e) {
      return e.kind();
    }
    FAIL("no FormatError thrown");
    return FormatError::Kind::Io;
  };
  auto bad = bytes;
  bad[0] = 'X';
  CHECK(kind_of([&] { decode_volume(bad); }) == FormatError::Kind::BadMagic);
  auto shorter = bytes;
  shorter.pop_back();
  CHECK(kind_of([&] { decode_volume(shorter); }) == FormatError::Kind::Truncated);
  auto longer = bytes;
  longer.push_back(0);
  CHECK(kind_of([&] { decode_volume(longer); }) == FormatError::Kind::Truncated);
  auto huge = bytes;
  for (int k = 12; k < 24; ++k) huge[k] = static_cast<char>(0xff);
  CHECK(kind_of([&] { decode_volume(huge); }) == FormatError::Kind::DimOverflow);
  CHECK(kind_of([&] { decode_mask(bytes); }) == FormatError::Kind::BadDType);
  CHECK(kind_of([&] { load_volume(dir / "missing.miv"); }) == FormatError::Kind::Io);
}

TEST_CASE("manifest and instance table round trip") {
  auto dir = temp_dir("text");
  auto r = rec("S1", 2, "2021-03-04", "volumes/S1.miv");
  r.age = 77.25;
  r.gender = Gender::M;
  r.roi_masks["hippocampus_left"] = "masks/S1_hl.miv";
  std::vector<SubjectRecord> rs{r, rec("S2", 0)};
  write_manifest(rs, dir / "m.jsonl");
  auto back = read_manifest(dir / "m.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[0].subject_id == "S1");
  CHECK(back[0].age == 77.25);
  CHECK(back[0].gender == Gender::M);
  CHECK(back[0].cdr == 2);
  CHECK(back[0].roi_masks == r.roi_masks);

  InstanceRecord inst{"S1", ClassLabel::AD, "hippocampus_left", 7, 25, {30, 19}};
  std::vector<InstanceRecord> is{inst};
  write_instances(is, dir / "i.csv");
  auto ib = read_instances(dir / "i.csv");
  REQUIRE(ib.size() == 1);
  CHECK(ib[0].subject_id == "S1");
  CHECK(ib[0].class_label == ClassLabel::AD);
  CHECK(ib[0].slice_start == 7);
  CHECK(ib[0].centroid == Centroid{30, 19});
}

TEST_CASE("synthetic cohort") {
  SynthConfig cfg;
  cfg.subjects = 100;
  cfg.dims = {40, 48, 48};
  cfg.separability = 1.0;
  auto subjects = synth_generate(cfg, 42);
  REQUIRE(subjects.size() == 100);

  // single-feature threshold oracle on mean ROI intensity
  std::vector<std::pair<double, ClassLabel>> feature;
  for (const auto& s : subjects) {
    CHECK_NOTHROW(s.record.validate());
    double sum = 0;
    Index n = 0;
    for (Index k = 0; k < s.volume.voxels.size(); ++k) {
      if (s.masks[0].voxels(k)) {
        sum += s.volume.voxels(k);
        ++n;
      }
    }
    REQUIRE(n > 0);
    feature.emplace_back(sum / n, cdr_to_label(s.record.cdr));
    CHECK(s.volume.voxels.minCoeff() >= 0.0f);
    CHECK(s.volume.voxels.maxCoeff() <= 1.0f);
  }
  int best_correct = 0;
  for (const auto& [t, _] : feature) {
    int correct = 0;
    for (const auto& [f, label] : feature) correct += (f >= t) == (label == ClassLabel::CN);
    best_correct = std::max(best_correct, correct);
  }
  CHECK(best_correct == 100);

  cfg.separability = 0.0;
  auto flat = synth_generate(cfg, 42);
  double lo_cn = 9, hi_cn = -9, lo_ad = 9, hi_ad = -9;
  for (const auto& s : flat) {
    bool ad = cdr_to_label(s.record.cdr) == ClassLabel::AD;
    (ad ? lo_ad : lo_cn) = std::min(ad ? lo_ad : lo_cn, s.severity);
    (ad ? hi_ad : hi_cn) = std::max(ad ? hi_ad : hi_cn, s.severity);
    if (ad) CHECK(s.record.mmse <= 26);
    else CHECK(s.record.mmse >= 24);
  }
  CHECK(lo_cn >= -0.8);
  CHECK(hi_ad <= 0.8);
  CHECK(std::max(lo_cn, lo_ad) < std::min(hi_cn, hi_ad));

  SynthConfig tiny;
  tiny.subjects = 4;
  tiny.rois = {"hippocampus_left", "hippocampus_right"};
  auto d1 = temp_dir("synth1"), d2 = temp_dir("synth2");
  write_synth_dataset(synth_generate(tiny, 7), d1);
  write_synth_dataset(synth_generate(tiny, 7), d2);
  for (const auto& entry : std::filesystem::recursive_directory_iterator(d1)) {
    if (!entry.is_regular_file()) continue;
    auto rel = std::filesystem::relative(entry.path(), d1);
    CHECK(binary::read_file(entry.path()) == binary::read_file(d2 / rel));
  }
  auto manifest = read_manifest(d1 / "manifest.jsonl");
  CHECK(manifest.size() == 4);
  auto mask = load_mask(d1 / manifest[0].roi_masks.at("hippocampus_right"), "hippocampus_right");
  CHECK(mask.hemisphere == Hemisphere::Right);
  CHECK(mask.count() > 0);

  auto examples = synth_examples(synth_generate(tiny, 7), 25);
  REQUIRE(examples.size() == 4);
  CHECK(examples[0].images.size() == 2);
  CHECK(examples[0].images[0].shape() == Shape{25, 32, 32, 3});

  SynthConfig too_small;
  too_small.dims = {30, 64, 64};
  CHECK_THROWS_AS(synth_generate(too_small, 1), ConfigError);
}
