#include <doctest.h>

#include <cmath>

#include "gridse/estimation.hpp"
#include "gridse/rng.hpp"
#include "helpers.hpp"

using namespace gridse;

namespace {

StateVector random_operating_point(const GridCase& grid, Rng& rng) {
    // Stay below the voltage-collapse nose, which sits near scale 0.95 for
    // this all-PQ case.
    AcSolution sol = solve_ac_power_flow(
        grid, grid.p_load_vector() * rng.uniform(0.55, 0.9),
        grid.q_load_vector() * rng.uniform(0.55, 0.9));
    return sol.state;
}

}  // namespace

TEST_CASE("wls recovers the exact state from noise-free measurements") {
    const GridCase grid = testutil::load_fixture();
    Rng rng(11);
    const StateVector truth = random_operating_point(grid, rng);
    const Eigen::VectorXd z = h_measure(grid, truth);

    const EstimateResult est = wls_estimate(grid, z);
    CHECK(est.converged);
    CHECK(est.meter_count == 2 * grid.bus_count());
    CHECK((est.x_hat.theta - truth.theta).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((est.x_hat.v - truth.v).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(est.residual_norm < 1e-8);
    CHECK(est.objective < 1e-8);
}

TEST_CASE("wls tolerates gaussian noise at the meter sigma") {
    const GridCase grid = testutil::load_fixture();
    Rng rng(12);
    const StateVector truth = random_operating_point(grid, rng);
    Eigen::VectorXd z = h_measure(grid, truth);
    for (int i = 0; i < z.size(); ++i) z(i) += rng.gaussian(0.0, 0.01);

    const EstimateResult est = wls_estimate(grid, z);
    CHECK(est.converged);
    // Residual is on the order of the injected noise, far below tau = 0.5.
    CHECK(est.residual_norm < 0.2);
    CHECK((est.x_hat.theta - truth.theta).cwiseAbs().maxCoeff() < 0.05);
    CHECK(bdd_check(est, 0.5) == BddVerdict::clean);
}

TEST_CASE("bdd statistics relate as documented") {
    const GridCase grid = testutil::load_fixture();
    Rng rng(13);
    const StateVector truth = random_operating_point(grid, rng);
    Eigen::VectorXd z = h_measure(grid, truth);
    for (int i = 0; i < z.size(); ++i) z(i) += rng.gaussian(0.0, 0.01);
    const EstimateResult est = wls_estimate(grid, z);

    const double rn = bdd_statistic(est, BddStatistic::residual_norm);
    const double ssr = bdd_statistic(est, BddStatistic::weighted_ssr);
    const double ssr_m = bdd_statistic(est, BddStatistic::weighted_ssr_over_m);
    CHECK(rn == doctest::Approx(est.residual_norm));
    // With uniform sigma: ssr = rn^2 / sigma^2.
    CHECK(ssr == doctest::Approx(rn * rn / (0.01 * 0.01)).epsilon(1e-9));
    CHECK(ssr_m == doctest::Approx(ssr / est.meter_count).epsilon(1e-12));

    // Strict comparison: stat == tau is flagged, stat < tau is clean.
    EstimateResult fake = est;
    fake.residual_norm = 0.5;
    CHECK(bdd_check(fake, 0.5) == BddVerdict::bad_data);
    fake.residual_norm = 0.499999;
    CHECK(bdd_check(fake, 0.5) == BddVerdict::clean);
}

TEST_CASE("gross corruption of one meter trips the detector") {
    const GridCase grid = testutil::load_fixture();
    Rng rng(14);
    const StateVector truth = random_operating_point(grid, rng);
    Eigen::VectorXd z = h_measure(grid, truth);
    z(3) += 3.0;  // one wildly wrong P meter

    const EstimateResult est = wls_estimate(grid, z);
    CHECK(bdd_check(est, 0.5) == BddVerdict::bad_data);
}

TEST_CASE("evaluate_state reproduces the residual of a supplied state") {
    const GridCase grid = testutil::load_fixture();
    Rng rng(15);
    const StateVector truth = random_operating_point(grid, rng);
    const Eigen::VectorXd z = h_measure(grid, truth);

    const EstimateResult at_truth = evaluate_state(grid, z, truth);
    CHECK(at_truth.residual_norm < 1e-12);
    CHECK(at_truth.iterations == 0);

    StateVector off = truth;
    off.theta(2) += 0.05;
    const EstimateResult at_off = evaluate_state(grid, z, off);
    const double manual = (z - h_measure(grid, off)).norm();
    CHECK(at_off.residual_norm == doctest::Approx(manual));
}

TEST_CASE("wls sigma handling validates input") {
    const GridCase grid = testutil::load_fixture();
    Rng rng(16);
    const StateVector truth = random_operating_point(grid, rng);
    const Eigen::VectorXd z = h_measure(grid, truth);

    WlsConfig cfg;
    cfg.sigma = Eigen::VectorXd::Constant(1, 0.02);  // scalar broadcast
    CHECK(wls_estimate(grid, z, cfg).converged);

    cfg.sigma = Eigen::VectorXd::Constant(5, 0.02);  // wrong length
    CHECK_THROWS_AS(wls_estimate(grid, z, cfg), InputError);

    cfg.sigma = Eigen::VectorXd::Constant(z.size(), -0.01);  // non-positive
    CHECK_THROWS_AS(wls_estimate(grid, z, cfg), InputError);
}

TEST_CASE("dc estimate inverts noise-free dc injections exactly") {
    const GridCase grid = testutil::load_fixture();
    const MatrixBundle kit = build_matrices(grid);
    Rng rng(17);
    Eigen::VectorXd theta_red(grid.bus_count() - 1);
    for (int i = 0; i < theta_red.size(); ++i) theta_red(i) = rng.uniform(-0.3, 0.3);
    const Eigen::VectorXd p = kit.H_dc * theta_red;

    const Eigen::VectorXd theta_hat = dc_estimate(kit, p);
    REQUIRE(theta_hat.size() == grid.bus_count());
    CHECK(theta_hat(kit.ref) == 0.0);
    CHECK((kit.reduce_angles(theta_hat) - theta_red).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(dc_residual_norm(kit, p, theta_hat) < 1e-10);
}

TEST_CASE("dc estimate is the least-squares projection under noise") {
    const GridCase grid = testutil::make_triangle();
    const MatrixBundle kit = build_matrices(grid);
    Rng rng(18);
    Eigen::VectorXd p(3);
    for (int i = 0; i < 3; ++i) p(i) = rng.gaussian(0.0, 1.0);

    const Eigen::VectorXd theta_hat = dc_estimate(kit, p);
    // Normal equations by hand: H'(p - H theta_red) = 0.
    const Eigen::VectorXd grad =
        kit.H_dc.transpose() * (p - kit.H_dc * kit.reduce_angles(theta_hat));
    CHECK(grad.cwiseAbs().maxCoeff() < 1e-10);
}
