#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "coseg/segnet.hpp"
#include "oracles.hpp"

using coseg::ArchDescriptor;
using coseg::Rng;
using coseg::SegNetwork;
using coseg::Tensor;

namespace {

Tensor random_image(int n, int h, int w, uint64_t seed) {
  Rng rng(seed);
  return oracle::random_tensor<double>({n, 3, h, w}, rng, 0.0, 1.0);
}

}  // namespace

TEST_CASE("forward keeps resolution and emits one logit map per class") {
  SegNetwork net(ArchDescriptor{}, 1);
  Tensor x = random_image(2, 16, 24, 5);
  Tensor y = net.forward(x);
  CHECK(y.shape() == std::vector<int>{2, 4, 16, 24});
  CHECK(coseg::all_finite(y));
}

TEST_CASE("input resolution must be divisible by 8") {
  SegNetwork net(ArchDescriptor{}, 1);
  CHECK_THROWS_AS(net.forward(Tensor({1, 3, 12, 16})), coseg::ShapeError);
  CHECK_THROWS_AS(net.forward(Tensor({1, 3, 16, 20})), coseg::ShapeError);
  CHECK_THROWS_AS(net.forward(Tensor({3, 16, 16})), coseg::ShapeError);
}

TEST_CASE("parameter count of the default architecture") {
  SegNetwork net(ArchDescriptor{}, 1);
  CHECK(net.num_params() == 148148);
  CHECK(net.params().size() == 12 * 3 + 2);  // activated blocks: w,scale,shift; head: w,b
}

TEST_CASE("initialization is seed-deterministic") {
  SegNetwork a(ArchDescriptor{}, 7), b(ArchDescriptor{}, 7), c(ArchDescriptor{}, 8);
  auto pa = a.params(), pb = b.params(), pc = c.params();
  REQUIRE(pa.size() == pb.size());
  bool all_equal = true, any_diff_c = false;
  for (size_t i = 0; i < pa.size(); ++i) {
    all_equal = all_equal && (pa[i]->values() == pb[i]->values());
    any_diff_c = any_diff_c || (pa[i]->values() != pc[i]->values());
  }
  CHECK(all_equal);
  CHECK(any_diff_c);
}

TEST_CASE("weight statistics follow he initialization") {
  SegNetwork net(ArchDescriptor{}, 3);
  for (auto& [name, p] : net.named_params()) {
    if (name != "body3.w") continue;
    const auto& v = p->values();  // fan_in = 64*9
    double mean = 0;
    for (double x : v) mean += x;
    mean /= v.size();
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= v.size();
    const double want_std = std::sqrt(2.0 / (64 * 9));
    CHECK(std::abs(mean) < 0.05 * want_std * 10);
    CHECK(std::sqrt(var) == doctest::Approx(want_std).epsilon(0.05));
  }
}

TEST_CASE("clone is a deep copy") {
  SegNetwork a(ArchDescriptor{}, 4);
  SegNetwork b = a.clone();
  b.params()[0]->values()[0] += 1.0;
  CHECK(a.params()[0]->values()[0] != b.params()[0]->values()[0]);

  Tensor x = random_image(1, 8, 8, 9);
  b.copy_params_from(a);
  CHECK(a.forward(x).values() == b.forward(x).values());
}

TEST_CASE("forward is deterministic") {
  SegNetwork net(ArchDescriptor{}, 11);
  Tensor x = random_image(1, 16, 16, 12);
  CHECK(net.forward(x).values() == net.forward(x).values());
}

TEST_CASE("checkpoint round trip restores weights and architecture") {
  const ArchDescriptor small{3, 3, {4, 6, 8, 10}};
  SegNetwork net(small, 13);
  const std::string path =
      (std::filesystem::temp_directory_path() / "coseg_test_ckpt").string();
  net.save_checkpoint(path);

  SegNetwork back = SegNetwork::load_checkpoint(path);
  CHECK(back.arch().num_classes == 3);
  CHECK(back.arch().widths == std::vector<int>{4, 6, 8, 10});
  auto pa = net.params(), pb = back.params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->values() == pb[i]->values());

  Tensor x = random_image(1, 8, 8, 14);
  CHECK(net.forward(x).values() == back.forward(x).values());

  std::remove(path.c_str());
  std::remove((path + ".json").c_str());
  CHECK_THROWS_AS(SegNetwork::load_checkpoint(path), coseg::DataError);
}

TEST_CASE("loading a checkpoint with a doctored descriptor fails cleanly") {
  const std::string path =
      (std::filesystem::temp_directory_path() / "coseg_test_ckpt2").string();
  SegNetwork net(ArchDescriptor{3, 3, {4, 6, 8, 10}}, 15);
  net.save_checkpoint(path);
  {
    std::ofstream os(path + ".json");
    os << ArchDescriptor{}.to_json().dump() << "\n";  // widths no longer match the blobs
  }
  CHECK_THROWS_AS(SegNetwork::load_checkpoint(path), coseg::DataError);
  std::remove(path.c_str());
  std::remove((path + ".json").c_str());
}

TEST_CASE("gradients reach the ends of the network") {
  SegNetwork net(ArchDescriptor{3, 3, {4, 6, 8, 10}}, 16);
  net.set_requires_grad(true);
  Tensor x = random_image(1, 8, 8, 17);
  Tensor y = net.forward(x);
  coseg::backward(mean(mul(y, y)));

  double stem_norm = 0, head_norm = 0;
  for (auto& [name, p] : net.named_params()) {
    double norm = 0;
    for (double g : p->grad()) norm += g * g;
    if (name == "stem.w") stem_norm = norm;
    if (name == "head.w") head_norm = norm;
  }
  CHECK(stem_norm > 0);
  CHECK(head_norm > 0);

  net.zero_grad();
  for (auto* p : net.params())
    for (double g : p->grad()) CHECK(g == 0.0);
}

TEST_CASE("architecture descriptor round trips through json") {
  const ArchDescriptor a{3, 5, {8, 12, 20, 32}};
  const ArchDescriptor b = ArchDescriptor::from_json(a.to_json());
  CHECK(b.in_channels == 3);
  CHECK(b.num_classes == 5);
  CHECK(b.widths == a.widths);

  nlohmann::json bad = a.to_json();
  bad["format"] = "other";
  CHECK_THROWS_AS(ArchDescriptor::from_json(bad), coseg::DataError);
}
