#pragma once

#include "itrans/inversion.h"
#include "itrans/measures.h"
#include "itrans/optics.h"
#include "itrans/transport_forward.h"

#include <json.hpp>

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace itrans {

inline constexpr int csv_schema_version = 1;

struct Probe {
  Vec3 x0, v0; // ray on Gamma_-
};

// Accepts {"x0": [...], "v0": [...]} or {"through": [...], "v0": [...]}.
Probe probe_from_json(const nlohmann::json& j, int n);
nlohmann::json probe_to_json(const Probe& p, int n);

struct ExperimentConfig {
  int n = 2;
  Medium medium1, medium2;
  std::vector<Probe> probes;
  std::vector<double> eta_blur;  // blur widths (0 = unperturbed level)
  std::vector<double> shifts;    // misalignments
  std::vector<double> mesh_h;    // source grid sizes
  std::vector<double> kappas{4.0};
  std::vector<double> eta_grid;  // test-function widths for eta scaling
  ExpansionSettings expansion;
  std::uint64_t seed = 1;
  std::string output_dir = ".";
  KernelShape blur_shape = KernelShape::tent;
  // a-priori width: argmin eps/(kappa eta) + bias_constant eta^p
  double bias_constant = 1.0;
  double eta_min = 1e-4;
  double psi_rho = 1e-3;
  // detector binning (n = 2): finest bin and growth ratio away from the exit ray
  double bin_first = 0.01;
  double bin_ratio = 1.5;

  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  // kappa >= 1, probes non-empty, media of dimension n and subcritical
  void validate() const;
};

ExperimentConfig load_config(const std::string& path);

struct StabilityRecord {
  std::string sweep;
  std::string perturbation; // none, blur, shift, mesh
  double level = 0;
  std::size_t probe = 0;
  double kappa = 0;
  double epsilon = 0;
  std::string epsilon_method; // lp, plan_cost
  double delta = 0;
  double eta = 0;
  double estimate1 = 0, estimate2 = 0;
  double truth = 0;
  double recon_error = 0;
  double mc_stderr = 0;
  std::uint64_t seed = 0;
};

// eta minimizing eps/(kappa eta) + c eta^p, clamped to [eta_min, eta_max]
double a_priori_eta(double eps, double kappa, double p, double c, double eta_min, double eta_max);

// Aggregates a 2D outgoing measure on bins graded around (y0, v0) in
// (boundary angle, direction angle); each bin becomes one atom at its
// mass centroid.
BoundaryMeasure detector_bin(const BoundaryMeasure& m, const Vec3& y0, const Vec3& v0, double first,
                             double ratio);

std::vector<StabilityRecord> run_ballistic_sweep(const ExperimentConfig& c);
std::vector<StabilityRecord> run_singlescatter_sweep(const ExperimentConfig& c);
std::vector<StabilityRecord> run_source_error_sweep(const ExperimentConfig& c);

// int_V int_0^tau |E~1 k1 - E~2 k2|(x0 + s v0, v0, v) ds dv
double single_scatter_functional(const Medium& m1, const Medium& m2, const Probe& p,
                                 int depth_nodes = 64, int direction_res = 48);

struct SingleScatterCheck {
  double estimate = 0;
  double truth = 0;
  double error = 0;
  double mc_stderr = 0;
  // bias envelope terms
  double loss_term = 0;  // (|k1| + |k2|) * measure where phi is not +-A
  double multiple_term = 0;
  double tail_term = 0;
  double noise_term = 0;
  double envelope = 0;
  double lip_g = 0;
};

// Unperturbed extraction at width eta with the bias envelope.
SingleScatterCheck single_scatter_check(const ExperimentConfig& c, const Probe& p, double eta,
                                        double kappa);

struct NullCheck {
  double estimate = 0;
  double stderr_ = 0;
};

// Both data sets from medium1 with different Monte Carlo seeds, test
// function built from the configured pair.
NullCheck single_scatter_null(const ExperimentConfig& c, const Probe& p, double eta, double kappa);

struct FitResult {
  double slope = 0;
  double intercept = 0;
  double residual = 0; // RMS of log residuals
  std::size_t points = 0;
};

// OLS on (ln x, ln y); with log_correction y is first divided by 1 + sqrt|ln x|.
FitResult fit_exponent(const std::vector<std::pair<double, double>>& pts, bool log_correction);

struct EtaScalingRow {
  int order = 0;
  std::string test; // bump or line
  std::size_t probe = 0;
  double eta = 0;
  double value = 0;
  double stderr_ = 0;
};

struct EtaScalingTable {
  int n = 2;
  std::vector<EtaScalingRow> rows;
  FitResult order1, order2;
  double theory1 = 0, theory2 = 0;
};

// <phi, order_m data>/|phi| for the bump (order 1) and the line test
// chi1(d~/(2 eta)) (order 2), over the eta grid.
EtaScalingTable run_eta_scaling(const ExperimentConfig& c);

void write_records_csv(std::ostream& os, const std::vector<StabilityRecord>& r);
void write_records_csv(const std::string& path, const std::vector<StabilityRecord>& r);
std::vector<StabilityRecord> read_records_csv(const std::string& path);
void write_eta_scaling_csv(std::ostream& os, const EtaScalingTable& t);

// (epsilon + delta)/kappa vs recon_error, one point per record with positive values
std::vector<std::pair<double, double>> error_points(const std::vector<StabilityRecord>& r,
                                                    const std::string& perturbation);

} // namespace itrans
