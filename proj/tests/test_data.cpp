#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "fedmeta/data.hpp"
#include "fedmeta/errors.hpp"
#include "fedmeta/rng.hpp"

using namespace fedmeta;
namespace fs = std::filesystem;

namespace {

const std::vector<std::size_t> kClassCounts{245, 50, 44, 25, 22, 15, 15, 13, 9};

fs::path temp_file(const std::string &name, const std::string &content) {
  auto p = fs::temp_directory_path() / name;
  std::ofstream(p) << content;
  return p;
}

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.n_classes = 5;
  s.dim = 6;
  s.samples_per_class = {30, 20, 20, 15, 12};
  s.seed = 3;
  return s;
}

} // namespace

TEST_SUITE("ingestion") {
  TEST_CASE("median imputation") {
    Matrix m(4, 2);
    m.data = {1.0, 10.0, NAN, 20.0, 5.0, NAN, 4.0, 40.0};
    impute_median(m);
    CHECK(m(1, 0) == 4.0);  // median of {1, 5, 4}
    CHECK(m(2, 1) == 20.0); // median of {10, 20, 40}
  }

  TEST_CASE("three-row fixture with one missing value") {
    auto p = temp_file("fedmeta_three.csv", "1,7,1\n?,8,2\n5,9,1\n");
    auto ds = load_csv(p.string(), {});
    // Column 0 is {1, 3, 5} after imputation, so its mean is 3 and the
    // imputed row standardizes to exactly 0.
    CHECK(ds.standardization.mean[0] == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(ds.features(1, 0) == doctest::Approx(0.0));
    CHECK(ds.labels == std::vector<int>{1, 2, 1});
    CHECK(ds.class_size(1) == 2);
    fs::remove(p);
  }

  TEST_CASE("standardized output has zero mean and unit or zero std") {
    Rng rng(1);
    std::string csv;
    for (int r = 0; r < 40; ++r) {
      csv += std::to_string(3.0 + 2.0 * rng.normal()) + ",";
      csv += (r % 7 == 0 ? std::string("?") : std::to_string(100.0 * rng.uniform())) + ",";
      csv += "4.5,"; // constant
      csv += std::to_string(1 + r % 3) + "\n";
    }
    auto p = temp_file("fedmeta_std.csv", csv);
    auto ds = load_csv(p.string(), {});
    for (std::size_t j = 0; j < ds.dim(); ++j) {
      double mean = 0.0, sq = 0.0;
      for (std::size_t r = 0; r < ds.rows(); ++r)
        mean += ds.features(r, j);
      mean /= ds.rows();
      for (std::size_t r = 0; r < ds.rows(); ++r)
        sq += (ds.features(r, j) - mean) * (ds.features(r, j) - mean);
      const double sd = std::sqrt(sq / ds.rows());
      CHECK(std::abs(mean) < 1e-9);
      if (j == 2)
        CHECK(sd == 0.0);
      else
        CHECK(sd == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK(ds.standardization.std[2] == 0.0);
    fs::remove(p);
  }

  TEST_CASE("impute then standardize is idempotent on clean standardized data") {
    Rng rng(2);
    Matrix m(30, 4);
    for (auto &v : m.data)
      v = 5.0 * rng.normal() + 2.0;
    apply_standardization(m, fit_standardization(m));
    Matrix again = m;
    impute_median(again);
    apply_standardization(again, fit_standardization(again));
    for (std::size_t i = 0; i < m.data.size(); ++i)
      CHECK(std::abs(again.data[i] - m.data[i]) < 1e-12);
  }

  TEST_CASE("malformed rows report the line number") {
    auto p = temp_file("fedmeta_bad.csv", "1,2,1\n3,x,2\n");
    try {
      load_csv(p.string(), {});
      FAIL("expected DataError");
    } catch (const DataError &e) {
      CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }
    auto q = temp_file("fedmeta_ragged.csv", "1,2,1\n3,2\n");
    CHECK_THROWS_AS(load_csv(q.string(), {}), DataError);
    fs::remove(p);
    fs::remove(q);
  }

  TEST_CASE("keep-list and relabelling") {
    auto p = temp_file("fedmeta_keep.csv", "0,1\n1,10\n2,10\n3,16\n4,1\n5,7\n");
    CsvOptions o;
    o.relabel = {{1, 1}, {10, 2}, {16, 5}};
    o.keep_classes = {1, 2, 5};
    auto ds = load_csv(p.string(), o);
    CHECK(ds.rows() == 5);
    CHECK(ds.class_size(1) == 2);
    CHECK(ds.class_size(2) == 2);
    CHECK(ds.class_size(5) == 1);
    CHECK(ds.class_size(7) == 0);

    o.keep_classes = {1, 2, 3};
    CHECK_THROWS_AS(load_csv(p.string(), o), DataError);
    fs::remove(p);
  }

  TEST_CASE("arrhythmia preset maps source codes onto size-ordered ids") {
    auto o = arrhythmia_options();
    CHECK(o.keep_classes == std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8, 9});
    CHECK(o.relabel.at(1) == 1);
    CHECK(o.relabel.at(10) == 2);
    CHECK(o.relabel.at(2) == 3);
    CHECK(o.relabel.at(6) == 4);
    CHECK(o.relabel.at(16) == 5);
    CHECK(o.label_column == -1);
    CHECK(o.missing_marker == "?");
  }

  TEST_CASE("write_csv round trips through load_csv") {
    auto spec = small_spec();
    auto ds = gen_synthetic(spec);
    auto p = fs::temp_directory_path() / "fedmeta_roundtrip.csv";
    write_csv(ds, p.string());
    auto back = load_csv(p.string(), {});
    CHECK(back.labels == ds.labels);
    for (int c : ds.classes())
      CHECK(back.class_size(c) == ds.class_size(c));
    fs::remove(p);
  }
}

TEST_SUITE("split") {
  TEST_CASE("table profile: common 1..5, rare 6..9") {
    SyntheticSpec s;
    auto ds = gen_synthetic(s);
    auto [train, test] = split(ds, {1, 2, 3, 4, 5}, {6, 7, 8, 9});
    CHECK(train.classes() == std::vector<int>{1, 2, 3, 4, 5});
    CHECK(test.classes() == std::vector<int>{6, 7, 8, 9});
    CHECK(train.rows() == 245 + 50 + 44 + 25 + 22);
    CHECK(test.rows() == 15 + 15 + 13 + 9);
    std::set<std::size_t> a(train.sample_ids.begin(), train.sample_ids.end());
    for (auto id : test.sample_ids)
      CHECK(a.count(id) == 0);
  }

  TEST_CASE("degenerate splits are rejected") {
    auto ds = gen_synthetic(small_spec());
    CHECK_THROWS_AS(split(ds, {1, 2, 3, 4, 5}, {}), DataError);
    CHECK_THROWS_AS(split(ds, {1, 2, 3}, {3, 4}), DataError);
    CHECK_THROWS_AS(split(ds, {1, 2}, {9}), DataError);
  }

  TEST_CASE("class order does not change the partition") {
    auto ds = gen_synthetic(small_spec());
    auto [a_train, a_test] = split(ds, {1, 2, 3}, {4, 5});
    auto [b_train, b_test] = split(ds, {3, 1, 2}, {5, 4});
    CHECK(a_train.sample_ids == b_train.sample_ids);
    CHECK(a_test.sample_ids == b_test.sample_ids);
  }
}

TEST_SUITE("sharding") {
  TEST_CASE("four hospitals, three of five classes each") {
    auto ds = gen_synthetic(small_spec());
    Rng rng(4);
    auto spec = shard_hospitals(ds, 4, 3, rng);
    REQUIRE(spec.hospital_shards.size() == 4);
    for (const auto &s : spec.hospital_shards) {
      CHECK(s.size() == 3);
      CHECK(std::set<int>(s.begin(), s.end()).size() == 3);
      for (int c : s)
        CHECK((c >= 1 && c <= 5));
    }
    spec.validate();
  }

  TEST_CASE("all classes per hospital gives identical shards") {
    auto ds = gen_synthetic(small_spec());
    Rng rng(5);
    auto spec = shard_hospitals(ds, 3, 5, rng);
    for (const auto &s : spec.hospital_shards)
      CHECK(s == spec.hospital_shards[0]);
  }

  TEST_CASE("three-subsets of five are uniform") {
    auto ds = gen_synthetic(small_spec());
    Rng rng(6);
    const int draws = 10000;
    std::map<std::vector<int>, int> counts;
    for (int i = 0; i < draws; ++i)
      ++counts[shard_hospitals(ds, 1, 3, rng).hospital_shards[0]];
    REQUIRE(counts.size() == 10);
    const double p = 0.1, expect = draws * p;
    const double sigma = std::sqrt(draws * p * (1 - p));
    double chi2 = 0.0;
    for (const auto &[k, n] : counts) {
      CHECK(std::abs(n - expect) <= 3 * sigma);
      chi2 += (n - expect) * (n - expect) / expect;
    }
    CHECK(chi2 < 27.88); // chi-square, 9 dof, p = 0.001
  }

  TEST_CASE("a sample's class determines its hospitals") {
    auto ds = gen_synthetic(small_spec());
    Rng rng(7);
    auto spec = shard_hospitals(ds, 4, 3, rng);
    for (std::size_t h = 0; h < 4; ++h) {
      auto hd = hospital_data(ds, spec, h, false);
      CHECK(hd.classes() == spec.hospital_shards[h]);
      for (int c : spec.hospital_shards[h])
        CHECK(hd.class_size(c) == ds.class_size(c));
    }
  }

  TEST_CASE("sample-split mode divides shared classes without overlap") {
    auto ds = gen_synthetic(small_spec());
    Rng rng(8);
    auto spec = shard_hospitals(ds, 4, 3, rng);
    std::map<int, std::set<std::size_t>> seen;
    std::map<int, std::size_t> total;
    for (std::size_t h = 0; h < 4; ++h) {
      auto hd = hospital_data(ds, spec, h, true);
      for (std::size_t r = 0; r < hd.rows(); ++r) {
        CHECK(seen[hd.labels[r]].insert(hd.sample_ids[r]).second);
        ++total[hd.labels[r]];
      }
    }
    for (auto &[c, n] : total)
      CHECK(n == ds.class_size(c));
  }
}

TEST_SUITE("synthetic") {
  TEST_CASE("class sizes mirror the requested profile") {
    SyntheticSpec s;
    CHECK(s.samples_per_class == kClassCounts);
    auto ds = gen_synthetic(s);
    for (std::size_t c = 0; c < 9; ++c)
      CHECK(ds.class_size(static_cast<int>(c + 1)) == kClassCounts[c]);
  }

  TEST_CASE("fixed seed is bit identical") {
    auto a = gen_synthetic(small_spec());
    auto b = gen_synthetic(small_spec());
    CHECK(a.features.data == b.features.data);
    CHECK(a.labels == b.labels);
    auto other = small_spec();
    other.seed = 99;
    CHECK(gen_synthetic(other).features.data != a.features.data);
  }

  TEST_CASE("well separated clusters: nearest centroid is at least 99% correct") {
    for (std::size_t latent : {0u, 3u}) {
      SyntheticSpec s;
      s.dim = 10;
      s.latent_dim = latent;
      s.class_separation = 20.0;
      s.cluster_spread = 1.0;
      auto ds = gen_synthetic(s);
      std::map<int, std::vector<double>> centroid;
      for (int c : ds.classes()) {
        std::vector<double> mu(ds.dim(), 0.0);
        for (auto r : ds.class_index.at(c))
          for (std::size_t j = 0; j < ds.dim(); ++j)
            mu[j] += ds.features(r, j);
        for (auto &v : mu)
          v /= ds.class_size(c);
        centroid[c] = mu;
      }
      std::size_t hits = 0;
      for (std::size_t r = 0; r < ds.rows(); ++r) {
        int best = -1;
        double best_d = INFINITY;
        for (auto &[c, mu] : centroid) {
          double d = 0.0;
          for (std::size_t j = 0; j < ds.dim(); ++j)
            d += (ds.features(r, j) - mu[j]) * (ds.features(r, j) - mu[j]);
          if (d < best_d) {
            best_d = d;
            best = c;
          }
        }
        hits += best == ds.labels[r];
      }
      CHECK(static_cast<double>(hits) / ds.rows() >= 0.99);
    }
  }

  TEST_CASE("centres respect the separation and latent subspace") {
    SyntheticSpec s;
    s.dim = 12;
    s.latent_dim = 3;
    s.cluster_spread = 1e-9;
    s.class_separation = 2.5;
    s.samples_per_class = std::vector<std::size_t>(9, 2);
    auto ds = gen_synthetic(s);
    std::vector<std::vector<double>> centres;
    for (int c : ds.classes()) {
      auto row = ds.features.row(ds.class_index.at(c)[0]);
      centres.emplace_back(row.begin(), row.end());
    }
    for (std::size_t a = 0; a < centres.size(); ++a)
      for (std::size_t b = a + 1; b < centres.size(); ++b) {
        double d = 0.0;
        for (std::size_t j = 0; j < 12; ++j)
          d += (centres[a][j] - centres[b][j]) * (centres[a][j] - centres[b][j]);
        CHECK(std::sqrt(d) >= 2.5 - 1e-6);
      }
    // Differences between centres span at most latent_dim directions: the
    // Gram determinant of any four difference vectors vanishes.
    auto diff = [&](std::size_t i) {
      std::vector<double> v(12);
      for (std::size_t j = 0; j < 12; ++j)
        v[j] = centres[i][j] - centres[0][j];
      return v;
    };
    std::vector<std::vector<double>> d{diff(1), diff(2), diff(3), diff(4)};
    // Gaussian elimination on the 4x12 matrix; rank must be <= 3.
    std::size_t rank = 0;
    for (std::size_t col = 0; col < 12 && rank < 4; ++col) {
      std::size_t piv = rank;
      for (std::size_t r = rank; r < 4; ++r)
        if (std::abs(d[r][col]) > std::abs(d[piv][col]))
          piv = r;
      if (std::abs(d[piv][col]) < 1e-6)
        continue;
      std::swap(d[piv], d[rank]);
      for (std::size_t r = 0; r < 4; ++r)
        if (r != rank) {
          const double f = d[r][col] / d[rank][col];
          for (std::size_t j = 0; j < 12; ++j)
            d[r][j] -= f * d[rank][j];
        }
      ++rank;
    }
    CHECK(rank <= 3);
  }

  TEST_CASE("spec validation") {
    SyntheticSpec s;
    s.samples_per_class = {1, 2};
    CHECK_THROWS_AS(s.validate(), ConfigError);
    SyntheticSpec t;
    t.cluster_spread = 0.0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    SyntheticSpec u;
    u.latent_dim = u.dim + 1;
    CHECK_THROWS_AS(u.validate(), ConfigError);
  }
}
