#include <doctest.h>

#include <cmath>
#include <random>

#include "zipmpc/dynamics.hpp"
#include "zipmpc/solver.hpp"

using namespace zipmpc;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

// Hand-written Euler update of the kinematic bicycle in Frenet coordinates.
Eigen::VectorXd kinematic_oracle(const Eigen::VectorXd& x, const Eigen::VectorXd& u, double kappa,
                                 double lr, double lf, double T) {
  const double beta = std::atan(lr / (lf + lr) * std::tan(u[1]));
  const double sdot = x[3] * std::cos(x[2] + beta) / (1.0 - kappa * x[1]);
  return vec({x[0] + T * sdot, x[1] + T * x[3] * std::sin(x[2] + beta),
              x[2] + T * (x[3] / lf * std::sin(beta) - kappa * sdot), x[3] + T * u[0]});
}

class AffineDynamics final : public Dynamics {
 public:
  AffineDynamics(Eigen::MatrixXd A, Eigen::MatrixXd B) : A_(std::move(A)), B_(std::move(B)) {}
  int state_dim() const override { return static_cast<int>(A_.rows()); }
  int input_dim() const override { return static_cast<int>(B_.cols()); }
  Eigen::VectorXd step(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const override {
    return A_ * x + B_ * u;
  }

 private:
  Eigen::MatrixXd A_, B_;
};

}  // namespace

TEST_CASE("kinematic step: coasting and pure acceleration on a straight") {
  const KinematicBicycle m;
  const Eigen::VectorXd x = vec({0, 0, 0, 1});
  const Eigen::VectorXd a = m.step(x, vec({0, 0}), 0.0);
  CHECK(a[0] == doctest::Approx(0.03));
  CHECK(a[1] == 0.0);
  CHECK(a[2] == 0.0);
  CHECK(a[3] == 1.0);
  CHECK(m.step(x, vec({1, 0}), 0.0)[3] == doctest::Approx(1.03));
}

TEST_CASE("kinematic step matches the hand-evaluated Euler formulas") {
  const KinematicBicycle m;
  const Eigen::VectorXd x = vec({0, 0.05, 0.1, 1.2}), u = vec({0.5, 0.2});
  const Eigen::VectorXd got = m.step(x, u, 1.0);
  const Eigen::VectorXd want = kinematic_oracle(x, u, 1.0, 0.05, 0.05, 0.03);
  for (int i = 0; i < 4; ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> d(-0.2, 0.2), phi(-0.5, 0.5), v(0.3, 1.8), a(-1, 1),
      del(-0.4, 0.4), k(-3, 3);
  for (int i = 0; i < 200; ++i) {
    const Eigen::VectorXd xs = vec({d(rng) * 10, d(rng), phi(rng), v(rng)});
    const Eigen::VectorXd us = vec({a(rng), del(rng)});
    const double kk = k(rng);
    const Eigen::VectorXd g = m.step(xs, us, kk);
    const Eigen::VectorXd w = kinematic_oracle(xs, us, kk, 0.05, 0.05, 0.03);
    CHECK((g - w).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("kinematic step rejects the Frenet singularity") {
  const KinematicBicycle m;
  CHECK_THROWS_AS(m.step(vec({0, 0.5, 0, 1}), vec({0, 0}), 2.0), DomainError);
  CHECK_THROWS_AS(m.step(vec({0, 0.6, 0, 1}), vec({0, 0}), 2.0), DomainError);
}

TEST_CASE("kinematic with zero steering on a straight keeps d and phi") {
  const KinematicBicycle m;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> d(-0.2, 0.2), v(0.3, 1.8), a(-1, 1);
  for (int i = 0; i < 50; ++i) {
    const Eigen::VectorXd x = vec({1.0, d(rng), 0.0, v(rng)});
    const Eigen::VectorXd xn = m.step(x, vec({a(rng), 0.0}), 0.0);
    CHECK(xn[1] == x[1]);
    CHECK(xn[2] == x[2]);
  }
}

TEST_CASE("Pacejka zero-slip straight running") {
  for (auto variant : {PacejkaModel::Variant::sim, PacejkaModel::Variant::hardware}) {
    const PacejkaModel m(variant, variant == PacejkaModel::Variant::sim
                                      ? ModelParams::pacejka_sim()
                                      : ModelParams::pacejka_hardware());
    const Eigen::VectorXd x = vec({0.0, 0.05, 0.0, 0.0, 1.0, 0.0});
    const Eigen::VectorXd u = vec({0.3, 0.0});
    const PacejkaForces f = m.forces(x, u);
    CHECK(f.alpha_f == 0.0);
    CHECK(f.alpha_r == 0.0);
    CHECK(f.F_f == 0.0);
    CHECK(f.F_r == 0.0);
    const Eigen::VectorXd xn = m.step(x, u, 0.0);
    CHECK(xn[1] == x[1]);
    CHECK(xn[2] == x[2]);
    CHECK(xn[3] == 0.0);
    CHECK(xn[5] == 0.0);
  }
}

TEST_CASE("Pacejka force formulas") {
  SUBCASE("simulation motor force") {
    const PacejkaModel m(PacejkaModel::Variant::sim);
    const PacejkaForces f = m.forces(vec({0, 0, 0, 0, 1.0, 0}), vec({0.5, 0}));
    CHECK(f.F_m == doctest::Approx((0.9803 - 0.0181 * 1) * 0.5 - 0.0275 * 1 * 1 - 0.085)
                       .epsilon(1e-14));
    CHECK(f.F_fr == 0.0);
  }
  SUBCASE("hardware friction") {
    const PacejkaModel m(PacejkaModel::Variant::hardware, ModelParams::pacejka_hardware());
    const PacejkaForces f = m.forces(vec({0, 0, 0, 0, 1.0, 0}), vec({0.5, 0}));
    CHECK(f.F_fr == doctest::Approx(-(0.085 + 0.01 + 0.0275)).epsilon(1e-14));
    CHECK(f.F_fx == doctest::Approx(f.F_m * (1.0 - 0.0)));
  }
  SUBCASE("low speed guard") {
    const PacejkaModel m(PacejkaModel::Variant::sim);
    CHECK_THROWS_AS(m.forces(vec({0, 0, 0, 0, 0.05, 0}), vec({0, 0})), DomainError);
    CHECK_THROWS_AS(m.step(vec({0, 0, 0, 0, -0.01, 0}), vec({0, 0}), 0.0), DomainError);
  }
}

TEST_CASE("Pacejka variants share the kinematic rows") {
  const PacejkaModel sim(PacejkaModel::Variant::sim);
  ModelParams hp = ModelParams::pacejka_hardware();
  hp.T = ModelParams::pacejka_sim().T;
  const PacejkaModel hw(PacejkaModel::Variant::hardware, hp);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> d(-0.15, 0.15), phi(-0.4, 0.4), r(-2, 2), vx(0.3, 1.8),
      vy(-0.2, 0.2), k(-2, 2), tau(-1, 1), del(-0.4, 0.4);
  for (int i = 0; i < 100; ++i) {
    const Eigen::VectorXd x = vec({3.0, d(rng), phi(rng), r(rng), vx(rng), vy(rng)});
    const Eigen::VectorXd u = vec({tau(rng), del(rng)});
    const double kk = k(rng);
    const Eigen::VectorXd a = sim.step(x, u, kk), b = hw.step(x, u, kk);
    for (int j = 0; j < 3; ++j) CHECK(a[j] == b[j]);
  }
}

TEST_CASE("Euler increment scales linearly with the step") {
  for (ModelKind kind : {ModelKind::kinematic, ModelKind::pacejka_sim}) {
    ModelParams p = ModelParams::defaults(kind);
    const Eigen::VectorXd x = kind == ModelKind::kinematic
                                  ? vec({1.0, 0.05, 0.1, 1.2})
                                  : vec({1.0, 0.05, 0.1, 0.5, 1.2, 0.05});
    const Eigen::VectorXd u = vec({0.5, 0.2});
    Eigen::VectorXd prev;
    for (double scale : {1.0, 0.5, 0.25}) {
      ModelParams q = p;
      q.T = p.T * scale;
      const auto m = make_vehicle_model(kind, q);
      const Eigen::VectorXd inc = m->step(x, u, 1.0) - x;
      if (prev.size()) {
        for (int j = 0; j < inc.size(); ++j) {
          if (std::abs(prev[j]) < 1e-12) continue;
          CHECK(inc[j] / prev[j] == doctest::Approx(0.5).epsilon(0.01));
        }
      }
      prev = inc;
    }
  }
}

TEST_CASE("linearize") {
  SUBCASE("linear test dynamics return their matrices") {
    Eigen::MatrixXd A0(2, 2), B0(2, 1);
    A0 << 1.0, 0.1, -0.2, 0.9;
    B0 << 0.0, 0.5;
    const LinearDynamics lin(A0, B0);
    Eigen::MatrixXd A, B;
    lin.linearize(vec({0.3, -1}), vec({2}), A, B);
    CHECK(A == A0);
    CHECK(B == B0);
    const AffineDynamics fd(A0, B0);
    fd.linearize(vec({0.3, -1}), vec({2}), A, B);
    CHECK((A - A0).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((B - B0).cwiseAbs().maxCoeff() < 1e-9);
  }
  SUBCASE("kinematic progress sensitivity to speed") {
    const KinematicBicycle m;
    Eigen::MatrixXd A, B;
    const CurvatureFn zero = [](double) { return 0.0; };
    linearize(m, vec({0, 0, 0, 1}), vec({0, 0}), zero, A, B);
    CHECK(A(0, 3) == doctest::Approx(0.03).epsilon(1e-9));
    linearize(m, vec({0, 0, 0, 1}), vec({0, 0}), zero, A, B, true);
    CHECK(A(0, 3) == doctest::Approx(0.03).epsilon(1e-14));
    CHECK(B(3, 0) == doctest::Approx(0.03).epsilon(1e-14));
  }
  SUBCASE("analytic and finite-difference kinematic Jacobians agree") {
    const KinematicBicycle m;
    // Smooth curvature profile, so the d(kappa)/d(sigma) column matters.
    const CurvatureFn kappa = [](double s) { return 1.5 * std::sin(2.0 * s); };
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> s(0, 10), d(-0.2, 0.2), phi(-0.5, 0.5), v(0.3, 1.8),
        a(-1, 1), del(-0.4, 0.4);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      const Eigen::VectorXd x = vec({s(rng), d(rng), phi(rng), v(rng)});
      const Eigen::VectorXd u = vec({a(rng), del(rng)});
      Eigen::MatrixXd Af, Bf, Aa, Ba;
      linearize(m, x, u, kappa, Af, Bf, false);
      linearize(m, x, u, kappa, Aa, Ba, true);
      worst = std::max({worst, (Af - Aa).cwiseAbs().maxCoeff(), (Bf - Ba).cwiseAbs().maxCoeff()});
    }
    CHECK(worst < 1e-6);
  }
  SUBCASE("failure at a perturbed point") {
    const KinematicBicycle m;
    const CurvatureFn k = [](double) { return 2.0; };
    Eigen::MatrixXd A, B;
    CHECK_THROWS_AS(linearize(m, vec({0, 0.5 - 1e-7, 0, 1}), vec({0, 0}), k, A, B), DomainError);
  }
}

TEST_CASE("model parameters") {
  CHECK(parse_model_kind("kinematic") == ModelKind::kinematic);
  CHECK(parse_model_kind(to_string(ModelKind::pacejka_hardware)) == ModelKind::pacejka_hardware);
  CHECK_THROWS(parse_model_kind("unicycle"));
  ModelParams p;
  p.T = 0.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  const KinematicBicycle m;
  CHECK(m.input_lower()[1] == -0.4);
  CHECK(m.input_upper()[0] == 1.0);
  const ModelParams s = ModelParams::pacejka_sim();
  CHECK(s.D_f == 0.43);
  CHECK(s.B_r == 0.5);
  CHECK(s.C_m1 == 0.9803);
}
