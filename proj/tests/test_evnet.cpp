#include <doctest.h>

#include <cmath>
#include <fstream>

#include "evcseg/checkpoint.hpp"
#include "evcseg/nifti_io.hpp"
#include "evcseg/evnet.hpp"
#include "net_support.hpp"
#include "oracles.hpp"

using namespace evcseg;
using oracle::random_tensor;

namespace {

EvNetConfig tiny_config(bool multiscale, MultiscaleMode mode = MultiscaleMode::kConcat) {
  EvNetConfig c;
  c.levels = 2;
  c.base_channels = 2;
  c.convs_per_block = {1, 2};
  c.kernel_size = 3;
  c.multiscale_inputs = multiscale;
  c.multiscale_mode = mode;
  c.seed = 5;
  return c;
}

/// Loss = <w, net(x)> with a random w.
struct ProbeLoss {
  Tensor5 w;
  double operator()(const EvNet& net, const Tensor5& x) const { return oracle::dot(net.forward(x).values, w.values); }
};

void check_network_gradients(EvNet& net, const Tensor5& x, Rng& rng) {
  const ProbeLoss loss{random_tensor({x.shape.n, 2, x.shape.d, x.shape.h, x.shape.w}, rng)};
  EvNetActivations acts;
  net.forward(x, acts);
  net.zero_grad();
  const Tensor5 gx = net.backward_input(acts, loss.w);

  auto fx = [&](const std::vector<double>& v) { return loss(net, Tensor5(x.shape, v)); };
  CHECK(oracle::relative_error(gx.values, oracle::numeric_gradient(fx, x.values)) < 1e-4);

  for (NamedTensor& p : net.parameters()) {
    const std::vector<double> analytic = p.tensor->grad;
    const std::vector<double> keep = p.tensor->values;
    auto fp = [&](const std::vector<double>& v) {
      p.tensor->values = v;
      const double r = loss(net, x);
      p.tensor->values = keep;
      return r;
    };
    INFO(p.name);
    CHECK(oracle::relative_error(analytic, oracle::numeric_gradient(fp, keep)) < 1e-4);
  }
}

}  // namespace

TEST_SUITE("evnet") {

TEST_CASE("config validation") {
  EvNetConfig c;
  CHECK_NOTHROW(c.validate());
  c.levels = 6;
  c.convs_per_block.assign(6, 1);
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = EvNetConfig{};
  c.base_channels = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = EvNetConfig{};
  c.kernel_size = 4;
  CHECK_THROWS_AS(EvNet{c}, ConfigError);
}

TEST_CASE("forward gives a distribution per voxel") {
  Rng rng(41);
  for (bool ms : {false, true}) {
    EvNetConfig cfg = tiny_config(ms);
    cfg.levels = 3;
    cfg.convs_per_block = {1, 1, 2};
    const EvNet net(cfg);
    const Tensor5 x = random_tensor({2, 1, 8, 4, 8}, rng, 0.0, 1.0);
    const Tensor5 y = net.forward(x);
    REQUIRE(y.shape == Shape5{2, 2, 8, 4, 8});
    for (int n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < x.shape.spatial(); ++i) {
        const double a = y.values[y.offset(n, 0, 0, 0, 0) + i];
        const double b = y.values[y.offset(n, 1, 0, 0, 0) + i];
        CHECK((a >= 0.0 && a <= 1.0 && b >= 0.0 && b <= 1.0));
        CHECK(std::abs(a + b - 1.0) < 1e-6);
      }
    CHECK_THROWS_AS(net.forward(Tensor5({1, 1, 6, 4, 4})), ShapeError);
    CHECK_THROWS_AS(net.forward(Tensor5({1, 2, 8, 8, 8})), ShapeError);
  }
}

TEST_CASE("forward is deterministic for a seed") {
  Rng rng(42);
  const Tensor5 x = random_tensor({1, 1, 8, 8, 8}, rng);
  const EvNet a(tiny_config(true)), b(tiny_config(true));
  CHECK(a.forward(x).values == b.forward(x).values);
  EvNetConfig other = tiny_config(true);
  other.seed = 6;
  CHECK(EvNet(other).forward(x).values != a.forward(x).values);
}

TEST_CASE("whole-network finite-difference gradients") {
  Rng rng(43);
  SUBCASE("concat") {
    EvNet net(tiny_config(true));
    check_network_gradients(net, random_tensor({2, 1, 4, 4, 4}, rng), rng);
  }
  SUBCASE("add") {
    EvNet net(tiny_config(true, MultiscaleMode::kAdd));
    check_network_gradients(net, random_tensor({1, 1, 4, 4, 4}, rng), rng);
  }
  SUBCASE("plain") {
    EvNet net(tiny_config(false));
    check_network_gradients(net, random_tensor({1, 1, 4, 4, 4}, rng), rng);
  }
}

TEST_CASE("zeroed raw-input weights reduce to the plain network") {
  Rng rng(44);
  EvNetConfig pc = tiny_config(false);
  pc.levels = 3;
  pc.convs_per_block = {1, 2, 2};
  pc.kernel_size = 5;
  EvNetConfig mc = pc;
  mc.multiscale_inputs = true;
  mc.seed = 99;
  const EvNet plain(pc);
  EvNet multi(mc);
  support::share_weights(plain, multi);
  for (int i = 0; i < 2; ++i) {
    const Tensor5 x = random_tensor({1, 1, 8, 8, 8}, rng, 0.0, 1.0);
    const Tensor5 a = plain.forward(x), b = multi.forward(x);
    double worst = 0.0;
    for (std::size_t k = 0; k < a.numel(); ++k) worst = std::max(worst, std::abs(a.values[k] - b.values[k]));
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto dir = oracle::scratch_dir("checkpoint");
  Rng rng(45);
  const EvNet net(tiny_config(true));
  save_checkpoint(net, dir / "net.ckpt");

  std::ifstream in(dir / "net.ckpt", std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  CHECK(std::string(magic, 8) == "EVCNET01");

  const EvNet loaded = load_checkpoint(dir / "net.ckpt", net.config());
  const auto a = net.parameters();
  const auto b = loaded.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i]->numel(); ++k)
      CHECK(b[i]->values[k] == static_cast<double>(static_cast<float>(a[i]->values[k])));

  save_checkpoint(loaded, dir / "again.ckpt");
  CHECK(read_file_bytes(dir / "again.ckpt") == read_file_bytes(dir / "net.ckpt"));

  EvNetConfig other = net.config();
  other.base_channels = 3;
  CHECK_THROWS_AS(load_checkpoint(dir / "net.ckpt", other), ConfigError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), FormatError);
  CHECK(config_hash(net.config()).size() == 16);
  CHECK(config_from_json(config_to_json(net.config())) == net.config());
}

TEST_CASE("loss falls over the first twenty steps") {
  // Foreground is the bright half of a noisy volume.
  Rng rng(46);
  Tensor5 x({2, 1, 8, 8, 8});
  Tensor5 truth({2, 1, 8, 8, 8});
  for (int n = 0; n < 2; ++n)
    for (int z = 0; z < 8; ++z)
      for (int y = 0; y < 8; ++y)
        for (int xx = 0; xx < 8; ++xx) {
          const bool fg = (n == 0 ? xx : y) >= 4;
          truth.at(n, 0, z, y, xx) = fg;
          x.at(n, 0, z, y, xx) = (fg ? 0.8 : 0.2) + 0.05 * rng.normal();
        }
  EvNet net(tiny_config(true));
  SgdMomentum opt(0.05, 0.9);
  std::vector<double> losses;
  for (int it = 0; it < 20; ++it) {
    EvNetActivations acts;
    const Tensor5 p = net.forward(x, acts);
    Tensor5 g;
    losses.push_back(soft_dice_loss(p, truth, &g).value);
    net.zero_grad();
    net.backward(acts, g);
    opt.step(net);
  }
  std::vector<double> windows;
  for (int w = 0; w < 4; ++w) {
    double s = 0.0;
    for (int k = 0; k < 5; ++k) s += losses[5 * w + k];
    windows.push_back(s / 5.0);
  }
  for (int w = 1; w < 4; ++w) CHECK(windows[w] < windows[w - 1]);
}

}  // TEST_SUITE
