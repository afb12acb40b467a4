#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "test_util.hpp"
#include "zipmpc/costnet.hpp"

using namespace zipmpc;

namespace {

NetConfig schedule_config(int context_len = 40) {
  NetConfig c;
  c.horizon = 3;
  c.cost_dim = 8;
  c.context_len = context_len;
  c.fc_widths = {16, 12};
  c.output_scale.assign(16, 0.0);
  for (int j = 0; j < 16; ++j) c.output_scale[static_cast<std::size_t>(j)] = 0.5 + 0.25 * j;
  return c;
}

std::vector<double> random_context(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> k(-3.0, 3.0);
  std::vector<double> z(static_cast<std::size_t>(n));
  for (auto& v : z) v = k(rng);
  return z;
}

Eigen::Vector3d random_features(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> v(0.3, 1.8), d(-0.17, 0.17), phi(-0.4, 0.4);
  return {v(rng), d(rng), phi(rng)};
}

Eigen::VectorXd randomized_params(const CostNet& net, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> g(0.0, scale);
  return net.params().unaryExpr([&](double) { return g(rng); });
}

}  // namespace

TEST_CASE("zero head gives a zero correction") {
  const CostNet net(schedule_config(), 1);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 20; ++i) {
    const Eigen::VectorXd out = net.forward(random_features(rng), random_context(rng, 40), NetMode::eval);
    CHECK(out.size() == 2 * 8 * 4);
    CHECK(out.isZero(0.0));
  }
  const CostSchedule s = net.to_schedule(Eigen::VectorXd::Zero(net.config().output_size()));
  CHECK(s.stages() == 4);
  CHECK(s.dim() == 8);
}

TEST_CASE("eval mode is deterministic") {
  CostNet net(schedule_config(), 3);
  std::mt19937_64 rng(4);
  net.set_params(randomized_params(net, rng, 0.3));
  const Eigen::Vector3d f = random_features(rng);
  const auto z = random_context(rng, 40);
  const Eigen::VectorXd a = net.forward(f, z, NetMode::eval);
  const Eigen::VectorXd b = net.forward(f, z, NetMode::eval);
  CHECK(a == b);
  const CostNet again(schedule_config(), 3);
  const CostNet other(schedule_config(), 4);
  CHECK(again.params() == CostNet(schedule_config(), 3).params());
  CHECK(again.params() != other.params());
}

TEST_CASE("outputs stay within their bounds") {
  const NetConfig cfg = schedule_config();
  CostNet net(cfg, 5);
  std::mt19937_64 rng(6);
  for (int i = 0; i < 1000; ++i) {
    net.set_params(randomized_params(net, rng, 3.0));
    const Eigen::VectorXd out = net.forward(random_features(rng), random_context(rng, 40), NetMode::eval);
    const CostSchedule s = net.to_schedule(out);
    for (int st = 0; st < s.stages(); ++st) {
      for (int j = 0; j < 8; ++j) {
        CHECK(std::abs(s.q[st][j]) <= cfg.output_scale[j]);
        CHECK(std::abs(s.p[st][j]) <= cfg.output_scale[8 + j]);
      }
    }
  }
}

TEST_CASE("schedule layout round-trips") {
  CostNet net(schedule_config(), 7);
  std::mt19937_64 rng(8);
  net.set_params(randomized_params(net, rng, 0.5));
  const Eigen::VectorXd out = net.forward(random_features(rng), random_context(rng, 40), NetMode::eval);
  const CostSchedule s = net.to_schedule(out);
  // Stages differ through their modulation; all are finite and distinct from the global-only stage.
  CHECK((s.q[0] - s.q[3]).cwiseAbs().maxCoeff() > 0.0);
  const Eigen::VectorXd back = net.from_schedule(s);
  CHECK(back == out);
}

TEST_CASE("backward: zero upstream and stale tape") {
  CostNet net(schedule_config(), 9);
  std::mt19937_64 rng(10);
  NetTape tape;
  net.forward(random_features(rng), random_context(rng, 40), NetMode::train, &tape, &rng);
  CHECK(net.backward(tape, Eigen::VectorXd::Zero(net.config().output_size())).isZero(0.0));
  net.set_params(net.params());
  CHECK_THROWS_AS(net.backward(tape, Eigen::VectorXd::Zero(net.config().output_size())),
                  std::logic_error);
  CHECK_THROWS_AS(net.forward(random_features(rng), random_context(rng, 40), NetMode::train),
                  std::invalid_argument);
  CHECK_THROWS_AS(net.forward(random_features(rng), random_context(rng, 39), NetMode::eval),
                  std::invalid_argument);
}

TEST_CASE("single linear layer gradient matches the closed form") {
  NetConfig cfg;
  cfg.head = NetConfig::Head::direct;
  cfg.output_dim = 2;
  cfg.use_context = false;
  cfg.fc_widths = {};
  cfg.layer_norm = false;
  cfg.dropout = 0.0;
  cfg.output_scale = {0.7, 1.3};
  CostNet net(cfg, 11);
  std::mt19937_64 rng(12);
  net.set_params(randomized_params(net, rng, 0.5));
  REQUIRE(net.num_params() == 2 * 3 + 2);
  const Eigen::Vector3d f(1.1, 0.05, -0.2);
  NetTape tape;
  const Eigen::VectorXd out = net.forward(f, {}, NetMode::train, &tape, &rng);
  const Eigen::Vector2d target(0.3, -0.4);
  const Eigen::VectorXd g = out - target;  // d/dout of 0.5 |out - target|^2
  const Eigen::VectorXd grad = net.backward(tape, g);

  const Eigen::Vector3d a(f[0] * cfg.input_scale[0], f[1] * cfg.input_scale[1], f[2] * cfg.input_scale[2]);
  const Eigen::Map<const Eigen::MatrixXd> W(net.params().data(), 2, 3);
  const Eigen::Vector2d b = net.params().tail(2);
  const Eigen::Vector2d pre = W * a + b;
  Eigen::Vector2d delta;
  for (int r = 0; r < 2; ++r)
    delta[r] = g[r] * cfg.output_scale[static_cast<std::size_t>(r)] * (1 - std::tanh(pre[r]) * std::tanh(pre[r]));
  const Eigen::MatrixXd gW = delta * a.transpose();
  for (int c = 0; c < 3; ++c)
    for (int r = 0; r < 2; ++r) CHECK(grad[c * 2 + r] == doctest::Approx(gW(r, c)).epsilon(1e-12));
  CHECK(grad[6] == doctest::Approx(delta[0]).epsilon(1e-12));
  CHECK(grad[7] == doctest::Approx(delta[1]).epsilon(1e-12));
}

TEST_CASE("full network gradient matches central differences") {
  for (bool conv : {true, false}) {
    CAPTURE(conv);
    NetConfig cfg = schedule_config();
    cfg.use_conv = conv;
    CostNet net(cfg, 13);
    std::mt19937_64 rng(14);
    net.set_params(randomized_params(net, rng, 0.4));
    const Eigen::Vector3d f = random_features(rng);
    const auto z = random_context(rng, 40);
    std::normal_distribution<double> gn(0.0, 1.0);
    const Eigen::VectorXd w = Eigen::VectorXd::NullaryExpr(cfg.output_size(), [&] { return gn(rng); });
    // Dropout masks are reproduced by re-seeding the mask generator for every evaluation.
    auto loss = [&](const CostNet& n, NetTape* tape) {
      std::mt19937_64 mask_rng(99);
      return w.dot(n.forward(f, z, NetMode::train, tape, &mask_rng));
    };
    NetTape tape;
    loss(net, &tape);
    const Eigen::VectorXd grad = net.backward(tape, w);
    std::uniform_int_distribution<int> pick(0, net.num_params() - 1);
    const double h = 1e-5;
    double worst = 0.0;
    for (int k = 0; k < 50; ++k) {
      const int idx = pick(rng);
      Eigen::VectorXd th = net.params();
      CostNet probe = net;
      th[idx] += h;
      probe.set_params(th);
      const double lp = loss(probe, nullptr);
      th[idx] -= 2 * h;
      probe.set_params(th);
      const double lm = loss(probe, nullptr);
      const double num = (lp - lm) / (2 * h);
      // Coordinates with |grad| ~ 1e-5 are dominated by round-off in the differences.
      const double err = std::abs(num - grad[idx]) / std::max({std::abs(num), std::abs(grad[idx]), 1e-4});
      worst = std::max(worst, err);
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("Adam") {
  NetConfig cfg;
  cfg.head = NetConfig::Head::direct;
  cfg.output_dim = 1;
  cfg.use_context = false;
  cfg.fc_widths = {};
  cfg.layer_norm = false;
  cfg.output_scale = {1.0};
  SUBCASE("zero gradient at step 1 leaves the parameters") {
    CostNet net(cfg, 1);
    const Eigen::VectorXd before = net.params();
    CHECK(net.adam_step(Eigen::VectorXd::Zero(net.num_params()), 0.1));
    CHECK(net.params() == before);
    CHECK(net.adam_steps() == 1);
  }
  SUBCASE("first step moves by lr against the gradient sign") {
    CostNet net(cfg, 1);
    net.set_params(Eigen::VectorXd::Zero(net.num_params()));
    Eigen::VectorXd g = Eigen::VectorXd::Zero(net.num_params());
    g[0] = 1.0;
    net.adam_step(g, 0.1);
    // m_hat = 1, v_hat = 1: step = 0.1 * 1 / (1 + 1e-8)
    CHECK(net.params()[0] == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-15));
    CHECK(net.params()[1] == 0.0);
  }
  SUBCASE("recurrences over several steps") {
    CostNet net(cfg, 1);
    net.set_params(Eigen::VectorXd::Zero(net.num_params()));
    double th = 0.0, m = 0.0, v = 0.0;
    const double grads[] = {0.5, -1.0, 2.0, 0.25};
    for (int t = 1; t <= 4; ++t) {
      const double gr = grads[t - 1];
      Eigen::VectorXd g = Eigen::VectorXd::Zero(net.num_params());
      g[0] = gr;
      net.adam_step(g, 0.01);
      m = 0.9 * m + 0.1 * gr;
      v = 0.999 * v + 0.001 * gr * gr;
      th -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
      CHECK(net.params()[0] == doctest::Approx(th).epsilon(1e-12));
    }
  }
  SUBCASE("non-finite gradients are rejected") {
    CostNet net(cfg, 1);
    const Eigen::VectorXd before = net.params();
    Eigen::VectorXd g = Eigen::VectorXd::Ones(net.num_params());
    g[1] = std::nan("");
    CHECK_FALSE(net.adam_step(g, 0.1));
    CHECK(net.params() == before);
    CHECK(net.adam_steps() == 0);
  }
  SUBCASE("identical nets stay identical") {
    CostNet a(cfg, 5), b(cfg, 5);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> gn;
    for (int k = 0; k < 10; ++k) {
      const Eigen::VectorXd g = Eigen::VectorXd::NullaryExpr(a.num_params(), [&] { return gn(rng); });
      a.adam_step(g, 1e-2);
      b.adam_step(g, 1e-2);
    }
    CHECK(a.params() == b.params());
  }
}

TEST_CASE("checkpoints round-trip and detect damage") {
  testutil::TempDir dir;
  CostNet net(schedule_config(), 21);
  std::mt19937_64 rng(22);
  net.set_params(randomized_params(net, rng, 0.2));
  const auto path = dir.path / "net.ckpt";
  net.save(path);
  const CostNet back = CostNet::load(path);
  CHECK(back.params() == net.params());
  CHECK(back.config().to_json() == net.config().to_json());
  const Eigen::Vector3d f = random_features(rng);
  const auto z = random_context(rng, 40);
  CHECK(back.forward(f, z, NetMode::eval) == net.forward(f, z, NetMode::eval));

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  auto write = [&](const std::string& b) {
    std::ofstream out(dir.path / "bad.ckpt", std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  std::string flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  write(flipped);
  CHECK_THROWS_AS(CostNet::load(dir.path / "bad.ckpt"), CheckpointError);
  write(bytes.substr(0, bytes.size() - 9));
  CHECK_THROWS_AS(CostNet::load(dir.path / "bad.ckpt"), CheckpointError);
  std::string magic = bytes;
  magic[0] = 'X';
  write(magic);
  CHECK_THROWS_AS(CostNet::load(dir.path / "bad.ckpt"), CheckpointError);
  CHECK_THROWS_AS(CostNet::load(dir.path / "missing.ckpt"), CheckpointError);
}

TEST_CASE("config JSON and validation") {
  NetConfig c = schedule_config();
  c.fc_widths = {7, 5, 3};
  c.dropout = 0.25;
  const NetConfig back = NetConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.fc_widths == c.fc_widths);
  CHECK(c.conv_out_len() == (40 - 5) / 2 + 1);
  CHECK(c.feature_dim() == 3 + 8 * c.conv_out_len());
  c.use_context = false;
  CHECK(c.feature_dim() == 3);
  NetConfig bad = schedule_config();
  bad.output_scale.pop_back();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = schedule_config();
  bad.dropout = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = schedule_config(3);
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
