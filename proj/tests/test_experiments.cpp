#include "itrans/errors.h"
#include "itrans/experiments.h"
#include "itrans/transport_forward.h"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

using namespace itrans;
using nlohmann::json;

namespace {

json ballistic_json()
{
  return json::parse(R"({
    "n": 2,
    "medium1": {"sigma": {"type": "constant", "value": 0.35}, "k": {"type": "none"}},
    "medium2": {"sigma": {"type": "constant", "value": 0.0}, "k": {"type": "none"}},
    "probes": [{"through": [0.0, 0.2], "v0": [1.0, 0.3]}, {"through": [0.1, -0.3], "v0": [0.2, 1.0]}],
    "eta_blur": [0.01, 0.02, 0.04],
    "kappas": [4],
    "eta_min": 0.001,
    "seed": 5
  })");
}

json single_json(int order, std::size_t histories)
{
  json j = json::parse(R"({
    "n": 3,
    "medium1": {"sigma": {"type": "constant", "value": 0.0}, "k": {"type": "isotropic", "value": 0.01}, "cutoff_margin": 0.1},
    "medium2": {"sigma": {"type": "constant", "value": 0.0}, "k": {"type": "none"}},
    "probes": [{"through": [0.0, 0.1, 0.05], "v0": [1.0, 0.3, 0.2]}],
    "kappas": [4],
    "eta_min": 1e-5,
    "seed": 8
  })");
  j["expansion"] = {{"truncation_order", order}, {"histories", histories}, {"dir_first", 1e-4}};
  return j;
}

std::string csv_of(const std::vector<StabilityRecord>& r)
{
  std::ostringstream os;
  write_records_csv(os, r);
  return os.str();
}

} // namespace

TEST_CASE("fit_exponent examples")
{
  std::vector<std::pair<double, double>> half, lin, logc;
  for (double x : {1e-4, 1e-3, 1e-2, 1e-1, 0.5}) {
    half.push_back({x, 3 * std::sqrt(x)});
    lin.push_back({x, 0.2 * x});
    logc.push_back({x, std::sqrt(x) * (1 + std::sqrt(std::abs(std::log(x))))});
  }
  auto f = fit_exponent(half, false);
  CHECK(f.slope == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(f.intercept == doctest::Approx(std::log(3.0)).epsilon(1e-9));
  CHECK(f.residual < 1e-12);
  CHECK(f.points == 5);
  CHECK(fit_exponent(lin, false).slope == doctest::Approx(1).epsilon(1e-9));
  CHECK(fit_exponent(logc, true).slope == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(fit_exponent(logc, false).slope < 0.5);
  CHECK_THROWS_AS(fit_exponent({{1e-3, 1}, {1e-2, 2}, {1e-1, 3}}, false), NonPositiveData);
  auto bad = half;
  bad[2].second = 0;
  CHECK_THROWS_AS(fit_exponent(bad, false), NonPositiveData);
  CHECK_THROWS_AS(fit_exponent({{0.1, 1}, {0.1, 2}, {0.1, 3}, {0.1, 4}}, false), NonPositiveData);
}

TEST_CASE("a priori eta")
{
  CHECK(a_priori_eta(1e-4, 4, 1, 1, 1e-6, 1) == doctest::Approx(0.005).epsilon(1e-12));
  CHECK(a_priori_eta(8e-6, 4, 2, 1, 1e-6, 1) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(a_priori_eta(0, 4, 1, 1, 1e-3, 1) == 1e-3);
  CHECK(a_priori_eta(1e-30, 4, 1, 1, 1e-3, 1) == 1e-3);
  CHECK(a_priori_eta(10, 4, 1, 1, 1e-3, 0.5) == 0.5);
  // eta grows with the perturbation
  CHECK(a_priori_eta(1e-3, 4, 1, 1, 1e-6, 1) > a_priori_eta(1e-4, 4, 1, 1, 1e-6, 1));
  CHECK_THROWS_AS(a_priori_eta(1e-3, 0, 1, 1, 1e-6, 1), ConfigError);
}

TEST_CASE("experiment config round trip and validation")
{
  auto c = ExperimentConfig::from_json(ballistic_json());
  c.validate();
  auto back = ExperimentConfig::from_json(c.to_json());
  CHECK(back.n == 2);
  CHECK(back.probes.size() == 2);
  CHECK(back.eta_blur == c.eta_blur);
  CHECK(back.kappas == c.kappas);
  CHECK(back.seed == 5);
  CHECK(back.eta_min == 1e-3);
  CHECK(norm(back.probes[1].v0 - c.probes[1].v0) < 1e-15);
  CHECK(std::abs(norm(c.probes[0].v0) - 1) < 1e-15);
  CHECK(dot(c.probes[0].x0, c.probes[0].v0) < 0);
  // v0 is renormalized on load, so probes are compared above to rounding
  auto ja = back.to_json(), jb = c.to_json();
  ja.erase("probes");
  jb.erase("probes");
  CHECK(ja == jb);

  auto j = ballistic_json();
  j["kappas"] = {0.5};
  CHECK_THROWS_AS(ExperimentConfig::from_json(j).validate(), ConfigError);
  j = ballistic_json();
  j["probes"] = json::array();
  CHECK_THROWS_AS(ExperimentConfig::from_json(j).validate(), ConfigError);
  j = ballistic_json();
  j["eta_blur"] = {-0.1};
  CHECK_THROWS_AS(ExperimentConfig::from_json(j).validate(), ConfigError);
  j = ballistic_json();
  j["n"] = 4;
  CHECK_THROWS_AS(ExperimentConfig::from_json(j), InvalidDimension);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("ballistic sweep without scattering")
{
  auto c = ExperimentConfig::from_json(ballistic_json());
  auto r = run_ballistic_sweep(c);
  REQUIRE(r.size() == 2 * 4);
  for (const auto& x : r) {
    CHECK(std::isfinite(x.recon_error));
    CHECK(x.recon_error >= 0);
    CHECK(x.epsilon >= 0);
    CHECK(x.epsilon <= 2 + 1e-12); // at most 2 x total variation of unit-mass data
    CHECK(x.eta >= c.eta_min);
    CHECK(x.seed == 5);
    if (x.perturbation == "none") {
      CHECK(x.recon_error <= 1e-6);
      CHECK(x.epsilon == 0);
    }
  }
  for (std::size_t p = 0; p < 2; ++p) {
    std::vector<double> eps;
    for (const auto& x : r)
      if (x.probe == p && x.perturbation == "blur") eps.push_back(x.epsilon);
    REQUIRE(eps.size() == 3);
    CHECK(eps[1] / eps[0] >= 1.8);
    CHECK(eps[1] / eps[0] <= 2.2);
    CHECK(eps[0] < eps[1]);
    CHECK(eps[1] < eps[2]);
  }
}

TEST_CASE("sweep output is deterministic and survives a CSV round trip")
{
  auto j = ballistic_json();
  j["medium1"]["k"] = {{"type", "isotropic"}, {"value", 0.04}};
  j["medium1"]["cutoff_margin"] = 0.1;
  j["expansion"] = {{"truncation_order", 2}, {"histories", 2000}};
  j["shifts"] = {0.02};
  auto c = ExperimentConfig::from_json(j);
  auto a = run_ballistic_sweep(c), b = run_ballistic_sweep(c);
  CHECK(csv_of(a) == csv_of(b));
  auto path = (std::filesystem::temp_directory_path() / "itrans_records_test.csv").string();
  write_records_csv(path, a);
  auto back = read_records_csv(path);
  std::filesystem::remove(path);
  REQUIRE(back.size() == a.size());
  CHECK(csv_of(back) == csv_of(a));
  auto head = csv_of(a).substr(0, csv_of(a).find('\n'));
  CHECK(head ==
        "schema_version,sweep,perturbation,level,probe,kappa,epsilon,epsilon_method,delta,eta,estimate1,estimate2,"
        "truth,recon_error,corrected_error,mc_stderr,seed");
  auto pts = error_points(a, "blur");
  CHECK(pts.size() <= 6);
  for (auto [x, y] : pts) CHECK((x > 0 && y > 0));
}

TEST_CASE("detector binning preserves mass")
{
  Medium m(2, SigmaConstant{0.3}, KernelIsotropic{0.04}, 0.1);
  Vec3 v0 = normalized(Vec3{1, 0.3}), x0 = Vec3{-v0.y, v0.x} * 0.2 - v0 * std::sqrt(1 - 0.04);
  auto g = BoundaryMeasure::point(2, x0, v0);
  g.side = Side::incoming;
  ExpansionSettings s;
  s.truncation_order = 3;
  s.histories = 5000;
  auto data = expand_albedo(m, g, s).combined();
  auto binned = detector_bin(data, exit_point(x0, v0), v0, 0.01, 1.5);
  CHECK(binned.total_mass() == doctest::Approx(data.total_mass()).epsilon(1e-12));
  CHECK(binned.size() < data.size());
  for (const auto& a : binned.atoms) CHECK(dot(a.x, a.v) > 0);
}

TEST_CASE("eta scaling: zero without scattering, linear in k at first order")
{
  auto j = json::parse(R"({
    "n": 2,
    "medium1": {"sigma": {"type": "constant", "value": 0.2}, "k": {"type": "none"}},
    "medium2": {"sigma": {"type": "constant", "value": 0.2}, "k": {"type": "none"}},
    "probes": [{"through": [0.0, 0.1], "v0": [1.0, 0.3]}],
    "eta_grid": [0.004, 0.008, 0.016, 0.032],
    "expansion": {"histories": 2000, "dir_first": 1e-4},
    "seed": 3
  })");
  auto t0 = run_eta_scaling(ExperimentConfig::from_json(j));
  REQUIRE(!t0.rows.empty());
  for (const auto& r : t0.rows) CHECK(r.value == 0);
  j["medium1"]["k"] = {{"type", "henyey_greenstein"}, {"strength", 0.05}, {"g", 0.3}};
  j["medium1"]["cutoff_margin"] = 0.1;
  auto t1 = run_eta_scaling(ExperimentConfig::from_json(j));
  j["medium1"]["k"]["strength"] = 0.1;
  auto t2 = run_eta_scaling(ExperimentConfig::from_json(j));
  REQUIRE(t1.rows.size() == t2.rows.size());
  int checked = 0;
  for (std::size_t i = 0; i < t1.rows.size(); ++i) {
    if (t1.rows[i].order != 1) continue;
    CHECK(t1.rows[i].value > 0);
    CHECK(t2.rows[i].value == doctest::Approx(2 * t1.rows[i].value).epsilon(1e-9));
    ++checked;
  }
  CHECK(checked == 4);
  CHECK(t1.theory1 == 1);
  CHECK(t1.order1.points == 4);
}

TEST_CASE("single-scattering null test with two Monte Carlo seeds")
{
  auto c = ExperimentConfig::from_json(single_json(3, 5000));
  auto r = single_scatter_null(c, c.probes[0], 0.1, 4);
  CHECK(r.stderr_ > 0);
  CHECK(std::abs(r.estimate) <= 4 * r.stderr_);
}

TEST_CASE("unperturbed single-scattering error stays in the envelope and the tail shrinks with M")
{
  auto c3 = ExperimentConfig::from_json(single_json(3, 5000));
  auto c4 = ExperimentConfig::from_json(single_json(4, 5000));
  auto a = single_scatter_check(c3, c3.probes[0], 0.1, 4);
  auto b = single_scatter_check(c4, c4.probes[0], 0.1, 4);
  CHECK(b.tail_term < a.tail_term);
  for (const auto& s : {a, b}) {
    CHECK(s.truth > 0);
    CHECK(s.error <= s.envelope);
    CHECK(s.envelope == doctest::Approx(s.loss_term + s.multiple_term + s.tail_term + s.noise_term));
  }
  CHECK_THROWS_AS(run_singlescatter_sweep(ExperimentConfig::from_json(ballistic_json())), InvalidDimension);
}
