#include <doctest.h>

#include <algorithm>

#include "pnx/sparse.hpp"
#include "test_util.hpp"

using namespace pnx;
using pnxtest::thrown;

using MatD = Matrix<double>;

TEST_CASE("make_sparse builds a minimal validated tensor") {
  auto t = make_sparse2d<double>({{0, 0, 0, 0}}, MatD::from_rows({{1.0}}), 4, 4);
  CHECK(t.n() == 1);
  CHECK(t.channels() == 1);
  CHECK(t.rank() == 2);
  CHECK(lookup(t, {0, 0, 0, 0}) == 0);
}

TEST_CASE("make_sparse rejects malformed inputs") {
  MatD two = MatD::from_rows({{1.0}, {2.0}});
  CHECK(thrown([&] {
          make_sparse2d<double>({{0, 1, 1, 0}, {0, 1, 1, 0}}, two, 4, 4);
        }) == Err::DuplicateCoord);
  CHECK(thrown([&] {
          make_sparse2d<double>({{0, 5, 0, 0}}, MatD::from_rows({{1.0}}), 4, 4);
        }) == Err::OutOfBounds);
  CHECK(thrown([&] {
          make_sparse<double>({{0, 1, 1, 5}}, MatD::from_rows({{1.0}}), 3,
                              {4, 4, 4}, 1);
        }) == Err::OutOfBounds);
  MatD bad = MatD::from_rows({{std::nan("")}});
  CHECK(thrown([&] { make_sparse2d<double>({{0, 1, 1, 0}}, bad, 4, 4); }) ==
        Err::NonFinite);
  CHECK(thrown([&] { make_sparse2d<double>({{0, 1, 1, 0}}, two, 4, 4); }) ==
        Err::ShapeMismatch);
}

TEST_CASE("to_dense places features and zeros") {
  SUBCASE("empty tensor densifies to zeros") {
    auto t = make_sparse2d<double>({}, MatD(0, 2), 4, 4);
    auto d = to_dense(t);
    for (double v : d.data) CHECK(v == 0.0);
  }
  SUBCASE("single coord lands at its cell") {
    auto t = make_sparse2d<double>({{0, 2, 3, 0}}, MatD::from_rows({{7.0}}), 4, 4);
    auto d = to_dense(t);
    CHECK(d.at(0, 0, 2, 3) == 7.0);
    int nonzero = 0;
    for (double v : d.data) nonzero += v != 0.0;
    CHECK(nonzero == 1);
  }
}

static SparseTensor<double> random_tensor(int h, int w, int n, int c,
                                          uint64_t seed, int batch = 1) {
  Rng rng = Rng::stream(seed, "test_tensor");
  std::vector<int64_t> cells(size_t(batch) * h * w);
  for (size_t i = 0; i < cells.size(); ++i) cells[i] = int64_t(i);
  rng.shuffle(cells);
  std::vector<Coord> coords;
  for (int i = 0; i < n; ++i) {
    int64_t id = cells[size_t(i)];
    coords.push_back({int32_t(id / (h * w)), int32_t((id / w) % h),
                      int32_t(id % w), 0});
  }
  MatD feats(n, c);
  feats.fill_normal(rng);
  return make_sparse2d<double>(std::move(coords), std::move(feats), h, w, batch);
}

TEST_CASE("dense round trip reproduces the tensor") {
  auto t = random_tensor(16, 16, 40, 3, 11, 2);
  auto back = from_dense(to_dense(t), active_mask(t));
  CHECK(tensors_equal(back, t, 0.0));
}

TEST_CASE("from_dense with a full mask keeps every cell") {
  DenseGrid<double> d(2, 1, 2, {2, 2, 1});
  for (size_t i = 0; i < d.data.size(); ++i) d.data[i] = double(i) + 1.0;
  BoolGrid full(2, 2, {2, 2, 1});
  std::fill(full.data.begin(), full.data.end(), uint8_t(1));
  auto t = from_dense(d, full);
  CHECK(t.n() == 8);
  SUBCASE("all-false mask gives the empty tensor") {
    BoolGrid none(2, 2, {2, 2, 1});
    CHECK(from_dense(d, none).n() == 0);
  }
  SUBCASE("mask shape must match the grid") {
    BoolGrid wrong(2, 2, {3, 2, 1});
    CHECK(thrown([&] { from_dense(d, wrong); }) == Err::ShapeMismatch);
  }
}

TEST_CASE("lookup resolves actives, misses inactives, rejects out-of-shape") {
  auto t = make_sparse2d<double>({{0, 1, 2, 0}, {0, 3, 0, 0}},
                                 MatD::from_rows({{1.0}, {2.0}}), 4, 4);
  CHECK(lookup(t, {0, 1, 2, 0}) == 0);
  CHECK(lookup(t, {0, 3, 0, 0}) == 1);
  CHECK(lookup(t, {0, 0, 0, 0}) == -1);
  CHECK(thrown([&] { lookup(t, {0, 4, 0, 0}); }) == Err::OutOfBounds);
}

TEST_CASE("every one of 1000 random coords resolves to its insertion row") {
  auto t = random_tensor(64, 64, 1000, 2, 17);
  for (int i = 0; i < t.n(); ++i)
    CHECK(lookup(t, t.cm->coords[size_t(i)]) == i);
}

TEST_CASE("row permutation leaves the dense image unchanged") {
  auto t = random_tensor(16, 16, 30, 2, 23);
  std::vector<int> perm(size_t(t.n()));
  for (int i = 0; i < t.n(); ++i) perm[size_t(i)] = i;
  Rng rng = Rng::stream(23, "perm");
  std::vector<int64_t> tmp(perm.begin(), perm.end());
  rng.shuffle(tmp);
  std::vector<Coord> coords(size_t(t.n()));
  MatD feats(t.n(), t.channels());
  for (int i = 0; i < t.n(); ++i) {
    int src = int(tmp[size_t(i)]);
    coords[size_t(i)] = t.cm->coords[size_t(src)];
    for (int c = 0; c < t.channels(); ++c)
      feats.at(i, c) = t.feats.at(src, c);
  }
  auto p = make_sparse2d<double>(std::move(coords), std::move(feats), 16, 16);
  CHECK(tensors_equal(p, t, 0.0));
  auto da = to_dense(t), db = to_dense(p);
  CHECK(da.data == db.data);
}

TEST_CASE("grid config derives paper-scale cell counts") {
  GridConfig g;
  g.validate();
  CHECK(g.W() == 1504);
  CHECK(g.H() == 1504);
  CHECK(g.D() == 30);
  SUBCASE("misaligned extent is rejected") {
    GridConfig bad;
    bad.x_range = {0.0, 1.05};
    CHECK(thrown([&] { bad.validate(); }) == Err::InvalidConfig);
  }
  SUBCASE("inverted range is rejected") {
    GridConfig bad;
    bad.z_range = {4.0, -2.0};
    CHECK(thrown([&] { bad.validate(); }) == Err::InvalidConfig);
  }
}

TEST_CASE("coordinate packing survives paper-scale indices") {
  Coord big{3, 1503, 1502, 29};
  CHECK(unpack_coord(pack_coord(big)) == big);
  auto t = make_sparse<double>({{0, 1503, 1503, 29}, {0, 1503, 1502, 29}},
                               MatD::from_rows({{1.0}, {2.0}}), 3,
                               {1504, 1504, 30}, 1);
  CHECK(lookup(t, {0, 1503, 1503, 29}) == 0);
  CHECK(lookup(t, {0, 1503, 1502, 29}) == 1);
}
