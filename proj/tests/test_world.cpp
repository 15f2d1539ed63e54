#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>

#include "gridloop/world.hpp"

using namespace gridloop;

namespace {

WorldConfig small_world() {
  WorldConfig w;
  w.h = 4;
  w.w = 4;
  w.colors = 3;
  w.k_max = 2;
  w.min_box_side = 1;
  return w;
}

Layout two_items() {
  Layout l;
  l.items.push_back({{0, Qualifier::kNone}, {0, 0, 2, 2}});
  l.items.push_back({{1, Qualifier::kNone}, {2, 2, 4, 4}});
  return l;
}

}  // namespace

TEST_CASE("render fills boxes and leaves background zero") {
  WorldConfig w = small_world();
  Layout l;
  l.items.push_back({{0, Qualifier::kNone}, {0, 0, 2, 2}});
  l.items.push_back({{1, Qualifier::kNone}, {3, 3, 4, 4}});
  GridImage img = render(l, w);
  int red = 0, zero = 0;
  for (int c : img.cells) {
    if (c == 1) ++red;
    if (c == 0) ++zero;
  }
  CHECK(red == 4);
  CHECK(zero == 11);  // 16 - 4 - 1
  CHECK(img.at(0, 0) == 1);
  CHECK(img.at(3, 3) == 2);
}

TEST_CASE("render rejects overlap and out-of-bounds") {
  WorldConfig w = small_world();
  Layout l;
  l.items.push_back({{0, Qualifier::kNone}, {0, 0, 2, 2}});
  l.items.push_back({{1, Qualifier::kNone}, {1, 1, 3, 3}});
  CHECK_THROWS_AS(render(l, w), OverlapError);
  Layout l2;
  l2.items.push_back({{0, Qualifier::kNone}, {2, 2, 5, 5}});
  CHECK_THROWS_AS(render(l2, w), OutOfBounds);
}

TEST_CASE("disjoint boxes cover the sum of their areas") {
  WorldConfig w = small_world();
  Layout l = two_items();
  GridImage img = render(l, w);
  int colored = 0;
  for (int c : img.cells)
    if (c != 0) ++colored;
  CHECK(colored == l.items[0].box.area() + l.items[1].box.area());
}

TEST_CASE("render is pure") {
  WorldConfig w = small_world();
  Layout l = two_items();
  CHECK(render(l, w) == render(l, w));
}

TEST_CASE("ground_oracle inverts render") {
  WorldConfig w = small_world();
  Layout l;
  l.items.push_back({{0, Qualifier::kNone}, {1, 1, 3, 3}});
  l.items.push_back({{1, Qualifier::kNone}, {0, 3, 1, 4}});
  GridImage img = render(l, w);
  CHECK(ground_oracle(img, {0, Qualifier::kNone}) == Box{1, 1, 3, 3});
}

TEST_CASE("qualifier selection and errors") {
  WorldConfig w;
  w.h = 8;
  w.w = 8;
  w.colors = 2;
  w.k_max = 3;
  w.min_box_side = 1;
  Layout l;
  l.items.push_back({{0, Qualifier::kLeftmost}, {0, 0, 2, 2}});
  l.items.push_back({{0, Qualifier::kRightmost}, {5, 4, 8, 8}});
  GridImage img = render(l, w);
  CHECK(ground_oracle(img, {0, Qualifier::kLeftmost}) == Box{0, 0, 2, 2});
  CHECK(ground_oracle(img, {0, Qualifier::kRightmost}) == Box{5, 4, 8, 8});
  CHECK(ground_oracle(img, {0, Qualifier::kLargest}) == Box{5, 4, 8, 8});
  CHECK(ground_oracle(img, {0, Qualifier::kSmallest}) == Box{0, 0, 2, 2});
  CHECK_THROWS_AS(ground_oracle(img, {1, Qualifier::kNone}), NotFound);
  CHECK_THROWS_AS(ground_oracle(img, {0, Qualifier::kNone}), Ambiguous);
}

TEST_CASE("non-rectangular blob grounds to its component bounding box") {
  GridImage img;
  img.h = 4;
  img.w = 4;
  img.cells.assign(16, 0);
  // L-shape of color 0 (id 1)
  img.at(0, 0) = 1;
  img.at(0, 1) = 1;
  img.at(1, 1) = 1;
  CHECK(ground_oracle(img, {0, Qualifier::kNone}) == Box{0, 0, 2, 2});
  auto dets = detect_components(img);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].score == doctest::Approx(0.75));
}

TEST_CASE("iou arithmetic") {
  CHECK(iou({0, 0, 2, 2}, {0, 0, 2, 2}) == 1.0);
  CHECK(iou({0, 0, 2, 2}, {2, 2, 4, 4}) == 0.0);
  CHECK(iou({0, 0, 2, 2}, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0));
}

TEST_CASE("iou symmetry and range on random boxes") {
  Rng rng(7);
  for (int i = 0; i < 2000; ++i) {
    auto draw = [&] {
      int x0 = rng.uniform_int(15), y0 = rng.uniform_int(15);
      return Box{x0, y0, x0 + 1 + rng.uniform_int(16 - x0 - 1 == 0 ? 1 : 16 - x0 - 1),
                 y0 + 1 + rng.uniform_int(16 - y0 - 1 == 0 ? 1 : 16 - y0 - 1)};
    };
    Box a = draw(), b = draw();
    double ab = iou(a, b);
    CHECK(ab == iou(b, a));
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
    CHECK(iou(a, a) == 1.0);
  }
}

TEST_CASE("sample_layout is deterministic per seed") {
  WorldConfig w;
  Rng a(42), b(42);
  CHECK(sample_layout(a, w) == sample_layout(b, w));
}

TEST_CASE("sample_layout invariants and oracle closure over many samples") {
  WorldConfig w;
  Rng rng(3);
  std::set<size_t> k_seen;
  for (int i = 0; i < 2000; ++i) {
    Layout l = sample_layout(rng, w);
    k_seen.insert(l.items.size());
    CHECK_NOTHROW(validate_layout(l, w));
    GridImage img = render(l, w);
    for (const auto& it : l.items) {
      CHECK(it.box.width() >= w.min_box_side);
      CHECK(it.box.height() >= w.min_box_side);
      CHECK(ground_oracle(img, it.expr) == it.box);
    }
  }
  // K covers [2, k_max]
  for (int k = 2; k <= w.k_max; ++k) CHECK(k_seen.count(k) == 1);
}

TEST_CASE("layout json round-trip") {
  WorldConfig w;
  Rng rng(11);
  Layout l = sample_layout(rng, w);
  GridImage img = render(l, w);
  std::string s = to_json(l, w, &img);
  WorldRecord rec = world_record_from_json(s);
  CHECK(rec.layout == l);
  REQUIRE(rec.image.has_value());
  CHECK(*rec.image == img);
}
