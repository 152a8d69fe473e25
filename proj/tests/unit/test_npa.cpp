#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "brnpa/autograd.hpp"
#include "brnpa/error.hpp"
#include "brnpa/npa.hpp"
#include "brnpa/rng.hpp"
#include "support/finite_difference.hpp"
#include "support/npa_oracle.hpp"

using namespace brnpa;

namespace {

std::vector<double> normal_values(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

NpaConfig make_config(std::size_t n, Selection sel, bool refine, std::uint64_t seed = 0) {
  NpaConfig c;
  c.n = n;
  c.selection = sel;
  c.refine = refine;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("feature volume indexing") {
  auto v = FeatureVolume::from(1, 2, 3, {0, 1, 2, 3, 4, 5});
  CHECK(v.positions() == 6);
  CHECK(v.coords(4) == std::pair<std::size_t, std::size_t>{1, 1});
  CHECK(v.coords(2) == std::pair<std::size_t, std::size_t>{0, 2});
  CHECK(v.flat_index(1, 2) == 5);
  CHECK(v.value(0, 4) == 4.0);
  CHECK_THROWS_AS(FeatureVolume(Tensor::zeros({2, 2})), ShapeError);
  CHECK_THROWS_AS(FeatureVolume(Tensor::zeros({2, 0, 2})), ShapeError);
}

TEST_CASE("activation scores") {
  auto zero = FeatureVolume(Tensor::zeros({3, 2, 2}));
  CHECK(activation_scores(zero).scores == std::vector<double>(4, 0.0));

  // C=2, vector (3,4) at position 0.
  auto v = FeatureVolume::from(2, 1, 2, {3, 0, 4, 0});
  CHECK(activation_scores(v).scores[0] == 25.0);

  Rng rng(1);
  auto data = normal_values(rng, 2 * 2 * 4);
  auto vol = FeatureVolume::from(2, 2, 4, data);
  const auto scores = activation_scores(vol).scores;
  for (std::size_t i = 0; i < 8; ++i) {
    double expected = 0.0;
    for (std::size_t c = 0; c < 2; ++c) expected += data[c * 8 + i] * data[c * 8 + i];
    CHECK(scores[i] == doctest::Approx(expected).epsilon(1e-15));
  }
}

TEST_CASE("similarity map") {
  // Same nonzero vector everywhere.
  auto same = FeatureVolume::from(2, 1, 3, {1, 1, 1, 2, 2, 2});
  const auto all_same = similarity_map(same, 1);
  for (double s : all_same.values()) CHECK(s == doctest::Approx(1.0));

  // Orthogonal and opposite.
  auto v = FeatureVolume::from(2, 1, 3, {1, 0, -1, 0, 1, 0});
  auto s = similarity_map(v, 0);
  CHECK(s[0] == doctest::Approx(1.0));
  CHECK(s[1] == 0.0);
  CHECK(s[2] == 0.0);
  CHECK(similarity_map(v, 0, -1.0)[2] == doctest::Approx(-1.0));

  // Zero vectors get similarity 0.
  auto z = FeatureVolume::from(1, 1, 2, {2, 0});
  CHECK(similarity_map(z, 0)[1] == 0.0);
  CHECK_THROWS_AS(similarity_map(v, 3), ValidationError);
}

TEST_CASE("single position") {
  auto v = FeatureVolume::from(4, 1, 1, {1, -2, 3, 0.5});
  auto r = extract_representatives(v, make_config(1, Selection::Active, true));
  CHECK(r.features.shape() == Shape{1, 4});
  CHECK(std::vector<double>(r.features.values().begin(), r.features.values().end()) ==
        std::vector<double>{1, -2, 3, 0.5});
  CHECK(std::vector<double>(r.attention.map(0).begin(), r.attention.map(0).end()) ==
        std::vector<double>{1.0});
}

TEST_CASE("two orthogonal positions: hand trace") {
  // Channel-major layout: position 0 holds u = (2, 0), position 1 holds v = (0, 1).
  auto vol = FeatureVolume::from(2, 1, 2, {2, 0, 0, 1});
  auto r = extract_representatives(vol, make_config(2, Selection::Active, true));
  // a = [4, 1] -> pick 0; s = [1, 0]; w = [1, 0]; f1 = u; a = [0, 1] -> pick 1; f2 = v.
  CHECK(r.attention.selected == std::vector<std::size_t>{0, 1});
  CHECK(r.score_trace[1] == std::vector<double>{0.0, 1.0});
  const auto f = r.features.values();
  CHECK(f[0] == 2.0);
  CHECK(f[1] == 0.0);
  CHECK(f[2] == 0.0);
  CHECK(f[3] == 1.0);
  CHECK(r.attention.map(0)[0] == 1.0);
  CHECK(r.attention.map(0)[1] == 0.0);
  CHECK(r.attention.map(1)[1] == 1.0);
  CHECK(r.fallback_count() == 0);
}

TEST_CASE("N larger than positions is rejected") {
  auto vol = FeatureVolume::from(1, 1, 2, {1, 2});
  CHECK_THROWS_WITH_AS(extract_representatives(vol, make_config(3, Selection::Active, true)),
                       doctest::Contains("N exceeds spatial positions"), ValidationError);
}

TEST_CASE("exhausted activation falls back to flagged one-hot picks") {
  // One nonzero position; everything else zero.
  auto vol = FeatureVolume::from(1, 2, 2, {0, 0, 5, 0});
  auto r = extract_representatives(vol, make_config(3, Selection::Active, true));
  CHECK(r.attention.selected == std::vector<std::size_t>{2, 0, 1});
  CHECK(r.attention.fallback == std::vector<bool>{false, true, true});
  CHECK(r.fallback_count() == 2);
  for (std::size_t k = 0; k < 3; ++k) {
    const auto m = r.attention.map(k);
    CHECK(std::accumulate(m.begin(), m.end(), 0.0) == doctest::Approx(1.0));
  }
}

TEST_CASE("random 4x4x8 volume matches the straight-line oracle") {
  Rng rng(2024);
  const auto data = normal_values(rng, 8 * 4 * 4);
  auto vol = FeatureVolume::from(8, 4, 4, data);
  auto r = extract_representatives(vol, make_config(3, Selection::Active, true));
  auto o = testing::npa_oracle(data, 8, 4, 4, 3, false, true, 0.0, 1e-12, 0);
  CHECK(r.attention.selected == o.selected);
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t c = 0; c < 8; ++c)
      CHECK(std::abs(r.features.values()[k * 8 + c] - o.features[k][c]) < 1e-9);
    for (std::size_t i = 0; i < 16; ++i)
      CHECK(std::abs(r.attention.map(k)[i] - o.maps[k][i]) < 1e-9);
  }
}

TEST_CASE("property: oracle equivalence over small volumes, all modes") {
  Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t c = 1 + rng.below(8);
    const std::size_t h = 1 + rng.below(4);
    const std::size_t w = 1 + rng.below(4);
    const std::size_t n = 1 + rng.below(std::min<std::size_t>(3, h * w));
    const bool random = rng.below(2) == 1;
    const bool refine = rng.below(2) == 1;
    const std::uint64_t seed = rng.next_u64();
    auto data = normal_values(rng, c * h * w);
    auto r = extract_representatives(FeatureVolume::from(c, h, w, data),
                                     make_config(n, random ? Selection::Random : Selection::Active,
                                                 refine, seed));
    auto o = testing::npa_oracle(data, c, h, w, n, random, refine, 0.0, 1e-12, seed);
    REQUIRE(r.attention.selected == o.selected);
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t ch = 0; ch < c; ++ch)
        CHECK(std::abs(r.features.values()[k * c + ch] - o.features[k][ch]) < 1e-9);
      for (std::size_t i = 0; i < h * w; ++i)
        CHECK(std::abs(r.attention.map(k)[i] - o.maps[k][i]) < 1e-9);
    }
  }
}

TEST_CASE("property: simplex, suppression, distinctness, rank consistency") {
  Rng rng(5150);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t c = 1 + rng.below(8);
    const std::size_t h = 1 + rng.below(5);
    const std::size_t w = 1 + rng.below(5);
    const std::size_t n = 1 + rng.below(std::min<std::size_t>(4, h * w));
    const auto sel = rng.below(2) ? Selection::Random : Selection::Active;
    const bool refine = rng.below(2) == 1;
    auto r = extract_representatives(FeatureVolume::from(c, h, w, normal_values(rng, c * h * w)),
                                     make_config(n, sel, refine, rng.next_u64()));
    for (std::size_t k = 0; k < n; ++k) {
      const auto m = r.attention.map(k);
      CHECK(std::all_of(m.begin(), m.end(), [](double x) { return x >= 0.0; }));
      CHECK(std::abs(std::accumulate(m.begin(), m.end(), 0.0) - 1.0) < 1e-9);
      const auto& before = r.score_trace[k];
      const auto& after = r.score_trace[k + 1];
      for (std::size_t i = 0; i < before.size(); ++i) CHECK(after[i] <= before[i]);
      const std::size_t pick = r.attention.selected[k];
      if (before[pick] > 0.0) CHECK(after[pick] < before[pick]);
    }
    auto sorted = r.attention.selected;
    std::sort(sorted.begin(), sorted.end());
    CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
    if (sel == Selection::Active)
      for (std::size_t k = 1; k < n; ++k)
        CHECK(r.scores_at_selection[k] <= r.scores_at_selection[k - 1]);
  }
}

TEST_CASE("property: scaling the volume leaves maps unchanged and scales features") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    auto data = normal_values(rng, 6 * 3 * 3);
    const double lambda = rng.uniform(0.1, 10.0);
    auto scaled = data;
    for (auto& x : scaled) x *= lambda;
    auto cfg = make_config(3, Selection::Active, true);
    auto a = extract_representatives(FeatureVolume::from(6, 3, 3, data), cfg);
    auto b = extract_representatives(FeatureVolume::from(6, 3, 3, scaled), cfg);
    REQUIRE(a.attention.selected == b.attention.selected);
    for (std::size_t i = 0; i < a.attention.weights.size(); ++i)
      CHECK(std::abs(a.attention.weights[i] - b.attention.weights[i]) < 1e-12);
    for (std::size_t i = 0; i < a.features.numel(); ++i)
      CHECK(std::abs(b.features.values()[i] - lambda * a.features.values()[i]) <
            1e-10 * (1.0 + lambda));
  }
}

TEST_CASE("property: permuting positions permutes maps and keeps features") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 5, h = 3, w = 4, p = h * w;
    auto data = normal_values(rng, c * p);
    std::vector<std::size_t> perm(p);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    // permuted[perm[i]] = original[i]
    std::vector<double> permuted(c * p);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < p; ++i) permuted[ch * p + perm[i]] = data[ch * p + i];
    auto cfg = make_config(3, Selection::Active, true);
    auto a = extract_representatives(FeatureVolume::from(c, h, w, data), cfg);
    auto b = extract_representatives(FeatureVolume::from(c, h, w, permuted), cfg);
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(b.attention.selected[k] == perm[a.attention.selected[k]]);
      for (std::size_t i = 0; i < p; ++i)
        CHECK(std::abs(b.attention.map(k)[perm[i]] - a.attention.map(k)[i]) < 1e-12);
      for (std::size_t ch = 0; ch < c; ++ch)
        CHECK(std::abs(b.features.values()[k * c + ch] - a.features.values()[k * c + ch]) < 1e-12);
    }
  }
}

TEST_CASE("random selection is reproducible from its seed") {
  Rng rng(4);
  auto data = normal_values(rng, 3 * 4 * 4);
  auto cfg = make_config(3, Selection::Random, true, 99);
  auto a = extract_representatives(FeatureVolume::from(3, 4, 4, data), cfg);
  auto b = extract_representatives(FeatureVolume::from(3, 4, 4, data), cfg);
  CHECK(a.attention.selected == b.attention.selected);
  CHECK(a.attention.weights == b.attention.weights);
}

TEST_CASE("concat representatives") {
  auto one = Tensor::from({1, 3}, {1, 2, 3});
  const auto single = concat_representatives(one);
  CHECK(std::vector<double>(single.values().begin(), single.values().end()) ==
        std::vector<double>{1, 2, 3});
  auto two = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto flat = concat_representatives(two);
  CHECK(flat.shape() == Shape{4});
  CHECK(std::vector<double>(flat.values().begin(), flat.values().end()) ==
        std::vector<double>{1, 2, 3, 4});

  // Gradient through the concatenation reaches the volume.
  Rng rng(12);
  const std::size_t c = 4, h = 3, w = 3;
  auto leaf = Tensor::parameter({c, h, w}, normal_values(rng, c * h * w));
  std::vector<double> probe_values(3 * c);
  for (auto& x : probe_values) x = rng.uniform(-1, 1);
  auto probe = Tensor::from({3 * c}, probe_values);
  auto cfg = make_config(3, Selection::Active, true);
  auto loss = [&] {
    auto rep = extract_representatives(FeatureVolume(leaf), cfg);
    return sum(mul(concat_representatives(rep.features), probe));
  };
  backward(loss());
  const auto numeric = testing::numeric_gradient(leaf, [&] {
    NoGradGuard g;
    return loss().item();
  });
  CHECK(testing::relative_error(leaf.grad(), numeric) < 1e-4);
}

TEST_CASE("gradcheck: selection-only pass-through") {
  Rng rng(6);
  const std::size_t c = 3, p = 4;
  auto leaf = Tensor::parameter({c, 2, 2}, normal_values(rng, c * p));
  auto rep = extract_representatives(FeatureVolume(leaf), make_config(1, Selection::Active, false));
  backward(sum(rep.features));
  const auto g = leaf.grad();
  const std::size_t pick = rep.attention.selected[0];
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < p; ++i) CHECK(g[ch * p + i] == (i == pick ? 1.0 : 0.0));
}

TEST_CASE("gradcheck harness") {
  auto cfg = make_config(3, Selection::Active, true);
  auto report = npa_gradcheck(6, 4, 4, cfg, 20);
  CHECK(report.requested == 20);
  CHECK(report.checked + report.excluded_near_tie + report.excluded_near_clamp == 20);
  CHECK(report.checked >= 10);
  CHECK(report.max_relative_error < 1e-4);

  // Exact tie: two identical highest-norm vectors.
  GradcheckOptions strict;
  strict.tie_margin = 2.0;  // every volume counts as near-tie
  auto excluded = npa_gradcheck(2, 2, 2, make_config(1, Selection::Active, true), 5, strict);
  CHECK(excluded.excluded_near_tie == 5);
  CHECK(excluded.checked == 0);
  CHECK_THROWS_AS(npa_gradcheck(17, 2, 2, cfg, 1), ValidationError);
}
