#include <set>
#include <sstream>

#include "doctest.h"
#include "fedmox/synth.hpp"
#include "support.hpp"

using namespace fedmox;

namespace {

WorldConfig small_world() {
  WorldConfig c;
  c.server_samples = 10;
  c.client_samples = 8;
  c.test_samples_per_domain = 3;
  c.height = 8;
  c.width = 8;
  return c;
}

}  // namespace

TEST_CASE("splits are disjoint and sized") {
  World w = generate_world(small_world(), 1);
  std::set<std::uint64_t> ids;
  for (const auto& s : w.server) {
    CHECK(s.domain_id == 0);
    CHECK(ids.insert(s.sample_id).second);
  }
  REQUIRE(w.clients.size() == 3);
  for (std::size_t c = 0; c < w.clients.size(); ++c) {
    CHECK(w.clients[c].size() == 8);
    for (const auto& s : w.clients[c]) {
      CHECK(s.domain_id == w.config.client_domain(c));
      CHECK(s.resolution == Resolution::low);
      CHECK(s.image.dim(1) == 4);
      CHECK(ids.insert(s.sample_id).second);
    }
  }
  CHECK(w.test.size() == 4 * 3);
  for (const auto& s : w.test) CHECK(ids.insert(s.sample_id).second);
}

TEST_CASE("generation is seeded") {
  World a = generate_world(small_world(), 5), b = generate_world(small_world(), 5);
  World c = generate_world(small_world(), 6);
  auto same = [](const Tensor& x, const Tensor& y) {
    return std::equal(x.data().begin(), x.data().end(), y.data().begin());
  };
  CHECK(same(a.server[3].image, b.server[3].image));
  CHECK(a.server[3].label == b.server[3].label);
  CHECK(a.backbone.hash() == b.backbone.hash());
  CHECK_FALSE(same(a.server[3].image, c.server[3].image));
}

TEST_CASE("labels cover every class and stay in range") {
  World w = generate_world(small_world(), 2);
  std::set<int> seen;
  for (const auto& s : w.server) for (auto l : s.label) {
    CHECK(l < kNumClasses);
    seen.insert(l);
  }
  CHECK(seen.size() == kNumClasses);
}

TEST_CASE("average pooling and majority labels") {
  LabeledSample s;
  s.image = Tensor({1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  s.label = {0, 1, 2, 2, 1, 0, 2, 3};
  UnlabeledSample d = downsample(s);
  CHECK(d.image.shape() == Shape{1, 1, 2});
  CHECK(d.image.data()[0] == 3.5);
  CHECK(d.image.data()[1] == 5.5);
  LabeledSample dl = downsample_labeled(s);
  CHECK(dl.label == std::vector<std::uint8_t>{0, 2});  // {0,1,1,0} tie goes low
  CHECK(dl.resolution == Resolution::low);
  CHECK_THROWS(avg_pool2(Tensor({1, 3, 2}, std::vector<double>(6, 0.0))));
}

TEST_CASE("world save and load round-trips") {
  World w = generate_world(small_world(), 3);
  std::stringstream s;
  save_world(w, s);
  World r = load_world(s);
  CHECK(r.config == w.config);
  CHECK(r.backbone.hash() == w.backbone.hash());
  REQUIRE(r.test.size() == w.test.size());
  CHECK(r.test[5].label == w.test[5].label);
  CHECK(r.clients[2][1].sample_id == w.clients[2][1].sample_id);
  CHECK(test::max_abs_diff(r.clients[2][1].image.data(), w.clients[2][1].image.data()) == 0.0);
  std::stringstream bad("FMXX");
  CHECK_THROWS(load_world(bad));
}

TEST_CASE("calibrated features are standardized on server images") {
  World w = generate_world(small_world(), 4);
  auto f = featurize(w.backbone, w.server);
  const std::size_t c = w.backbone.feature_channels();
  const std::size_t px = 64;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0, sq = 0, n = 0;
    for (const auto& s : f) for (std::size_t p = 0; p < px; ++p) {
      const double v = s.features.data()[ch * px + p];
      sum += v;
      sq += v * v;
      n += 1;
    }
    const double mean = sum / n;
    CHECK(std::abs(mean) < 1e-9);
    const double var = sq / n - mean * mean;
    CHECK((std::abs(var - 1.0) < 1e-6 || var < 1e-12));
  }
}

TEST_CASE("domain shifts and validation") {
  auto d0 = default_domain_spec(0, 4);
  CHECK(d0.scale == std::vector<double>(4, 1.0));
  CHECK(d0.bias == std::vector<double>(4, 0.0));
  CHECK_FALSE(default_domain_spec(2, 4) == d0);
  WorldConfig c = small_world();
  c.num_domains = 1;
  CHECK_THROWS(c.validate());
  c = small_world();
  c.height = 7;
  CHECK_THROWS(c.validate());
}
