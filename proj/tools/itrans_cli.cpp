#include "itrans/errors.h"
#include "itrans/experiments.h"
#include "itrans/inversion.h"
#include "itrans/transport_forward.h"
#include "itrans/wasserstein.h"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

using namespace itrans;
using nlohmann::json;

namespace {

enum Exit { ok = 0, config_error = 2, not_subcritical = 3, numerical_failure = 4 };

json read_json(const std::string& path)
{
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string output_path(const ExperimentConfig& c, const std::string& given, const std::string& name)
{
  if (!given.empty()) return given;
  std::filesystem::create_directories(c.output_dir);
  return (std::filesystem::path(c.output_dir) / name).string();
}

int cmd_certify(const std::string& path)
{
  auto j = read_json(path);
  int n = j.value("n", 2);
  check_dimension(n);
  auto m = Medium::from_json(j.contains("medium") ? j.at("medium") : j, n);
  auto cert = certify(m);
  json out = cert.to_json();
  out["satisfies_cutoff_hypothesis"] = m.satisfies_hl();
  std::cout << out.dump(2) << "\n";
  return ok;
}

// {"n", "medium", "source": {x0|through, v0} or "source_jsonl", "expansion", "output"}
int cmd_forward(const std::string& path, const std::string& out_override)
{
  auto j = read_json(path);
  int n = j.value("n", 2);
  check_dimension(n);
  if (!j.contains("medium")) throw ConfigError("forward config needs a medium");
  auto m = Medium::from_json(j.at("medium"), n);
  BoundaryMeasure g;
  if (j.contains("source_jsonl")) {
    g = read_jsonl_file(j.at("source_jsonl").get<std::string>());
  } else if (j.contains("source")) {
    auto p = probe_from_json(j.at("source"), n);
    g = BoundaryMeasure::point(n, p.x0, p.v0, 1.0);
    g.side = Side::incoming;
  } else {
    throw ConfigError("forward config needs source or source_jsonl");
  }
  ExpansionSettings s;
  if (j.contains("expansion")) s = ExpansionSettings::from_json(j.at("expansion"));
  auto e = expand_albedo(m, g, s);
  std::string out = out_override.empty() ? j.value("output", std::string("albedo.jsonl")) : out_override;
  write_jsonl_file(out, e.combined());
  json info = e.to_json();
  info["output"] = out;
  std::cout << info.dump(2) << "\n";
  return ok;
}

int cmd_wdist(const std::string& a, const std::string& b, double kappa)
{
  if (!(kappa >= 1)) throw ConfigError("kappa must be >= 1");
  auto mu = read_jsonl_file(a), nu = read_jsonl_file(b);
  auto r = w1kappa_solve(mu, nu, kappa);
  std::cout << json{{"w1kappa", r.value}, {"kappa", kappa}, {"support", r.support}, {"arcs", r.arcs}}.dump(2)
            << "\n";
  return ok;
}

// {"n", "medium", "probes", "eta", "kappa", "expansion", "sinogram": {"angles","offsets","output"}}
int cmd_xray(const std::string& path)
{
  auto j = read_json(path);
  int n = j.value("n", 2);
  check_dimension(n);
  auto m = Medium::from_json(j.at("medium"), n);
  double eta = j.value("eta", 1e-3), kappa = j.value("kappa", 4.0);
  ExpansionSettings s;
  if (j.contains("expansion")) s = ExpansionSettings::from_json(j.at("expansion"));
  auto extract = [&](const Vec3& x0, const Vec3& v0) {
    auto g = BoundaryMeasure::point(n, x0, v0, 1.0);
    g.side = Side::incoming;
    auto data = m.has_scattering() ? expand_albedo(m, g, s).combined() : apply_ballistic(m, g);
    return extract_xray(data, x0, v0, eta, kappa, 1.0);
  };
  json out = json::array();
  if (j.contains("probes")) {
    for (const auto& pj : j.at("probes")) {
      auto p = probe_from_json(pj, n);
      auto x = extract(p.x0, p.v0);
      json r = x.to_json();
      r["exact"] = optical_depth(m, p.x0, p.v0, chord_length(p.x0, p.v0));
      out.push_back(r);
    }
  }
  if (j.contains("sinogram")) {
    if (n != 2) throw InvalidDimension("sinograms are two-dimensional");
    const auto& sj = j.at("sinogram");
    auto sino = make_sinogram(sj.value("angles", 180), sj.value("offsets", 128),
                              [&](const Vec3& x0, const Vec3& v0) { return extract(x0, v0).value; });
    std::string file = sj.value("output", std::string("sinogram.csv"));
    write_sinogram_csv(file, sino);
    out.push_back(json{{"sinogram", file}});
  }
  std::cout << out.dump(2) << "\n";
  return ok;
}

int cmd_fbp(const std::string& path, int size, double window, const std::string& out)
{
  auto s = read_sinogram_csv(path);
  auto img = fbp_invert(s, size, window);
  write_image(out, img);
  auto back = reproject(img, s.angles, s.offsets);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < s.values.size(); ++i) {
    num += (back.values[i] - s.values[i]) * (back.values[i] - s.values[i]);
    den += s.values[i] * s.values[i];
  }
  std::cout << json{{"image", out}, {"size", size}, {"reprojection_rel_l2", den > 0 ? std::sqrt(num / den) : 0.0}}
                   .dump(2)
            << "\n";
  return ok;
}

json fit_summary(const std::vector<StabilityRecord>& r)
{
  json out = json::object();
  std::vector<std::string> kinds;
  for (const auto& x : r)
    if (std::find(kinds.begin(), kinds.end(), x.perturbation) == kinds.end()) kinds.push_back(x.perturbation);
  for (const auto& k : kinds) {
    auto pts = error_points(r, k);
    if (pts.size() < 4) continue;
    auto f = fit_exponent(pts, false);
    auto g = fit_exponent(pts, true);
    out[k] = {{"slope", f.slope},
              {"intercept", f.intercept},
              {"residual", f.residual},
              {"points", f.points},
              {"slope_log_corrected", g.slope}};
  }
  return out;
}

int cmd_sweep(const std::string& which, const std::string& path, const std::string& out_override)
{
  auto c = load_config(path);
  std::vector<StabilityRecord> r;
  if (which == "ballistic") {
    r = run_ballistic_sweep(c);
    if (!c.mesh_h.empty()) {
      auto s = run_source_error_sweep(c);
      r.insert(r.end(), s.begin(), s.end());
    }
  } else {
    r = run_singlescatter_sweep(c);
  }
  auto file = output_path(c, out_override, "sweep_" + which + ".csv");
  write_records_csv(file, r);
  json summary{{"csv", file}, {"records", r.size()}, {"fits", fit_summary(r)}};
  std::cout << summary.dump(2) << "\n";
  return ok;
}

int cmd_eta_scaling(const std::string& path, const std::string& out_override)
{
  auto c = load_config(path);
  auto t = run_eta_scaling(c);
  auto file = output_path(c, out_override, "eta_scaling.csv");
  std::ofstream os(file);
  if (!os) throw ConfigError("cannot write " + file);
  write_eta_scaling_csv(os, t);
  std::cout << json{{"csv", file},
                    {"order1_slope", t.order1.slope},
                    {"order2_slope", t.order2.slope},
                    {"theory1", t.theory1},
                    {"theory2", t.theory2}}
                   .dump(2)
            << "\n";
  return ok;
}

int cmd_fit(const std::string& path, const std::string& perturbation, bool log_correction)
{
  auto r = read_records_csv(path);
  if (perturbation.empty()) {
    std::cout << fit_summary(r).dump(2) << "\n";
    return ok;
  }
  auto f = fit_exponent(error_points(r, perturbation), log_correction);
  std::cout << json{{"slope", f.slope}, {"intercept", f.intercept}, {"residual", f.residual}, {"points", f.points}}
                   .dump(2)
            << "\n";
  return ok;
}

} // namespace

int main(int argc, char** argv)
{
  CLI::App app{"Inverse transport: forward albedo, Wasserstein distances, stability sweeps"};
  app.require_subcommand(1);
  std::string a, b, out, image_out = "image.bin", perturbation;
  double kappa = 1, window = 2.0;
  int size = 128;
  bool logc = false;

  auto* certify_cmd = app.add_subcommand("certify", "check subcriticality of a medium");
  certify_cmd->add_option("medium", a, "medium JSON")->required();
  auto* forward_cmd = app.add_subcommand("forward", "collision expansion of the albedo map");
  forward_cmd->add_option("config", a)->required();
  forward_cmd->add_option("-o,--out", out, "JSON-lines output");
  auto* wdist_cmd = app.add_subcommand("wdist", "W_{1,kappa} between two JSON-lines measures");
  wdist_cmd->add_option("mu", a)->required();
  wdist_cmd->add_option("nu", b)->required();
  wdist_cmd->add_option("--kappa", kappa)->required();
  auto* xray_cmd = app.add_subcommand("xray", "extract chord integrals from simulated data");
  xray_cmd->add_option("config", a)->required();
  auto* fbp_cmd = app.add_subcommand("fbp", "filtered backprojection of a sinogram CSV");
  fbp_cmd->add_option("sinogram", a)->required();
  fbp_cmd->add_option("--size", size);
  fbp_cmd->add_option("--window", window, "cosine window cutoff in units of Nyquist");
  fbp_cmd->add_option("-o,--out", image_out, "binary image path (default image.bin)");
  auto* sb_cmd = app.add_subcommand("sweep-ballistic", "ballistic (and source-error) stability sweep");
  sb_cmd->add_option("config", a)->required();
  sb_cmd->add_option("-o,--out", out);
  auto* ss_cmd = app.add_subcommand("sweep-single", "single-scattering stability sweep (n = 3)");
  ss_cmd->add_option("config", a)->required();
  ss_cmd->add_option("-o,--out", out);
  auto* eta_cmd = app.add_subcommand("eta-scaling", "scattering contamination versus test-function width");
  eta_cmd->add_option("config", a)->required();
  eta_cmd->add_option("-o,--out", out);
  auto* fit_cmd = app.add_subcommand("fit", "log-log exponent fit of a sweep CSV");
  fit_cmd->add_option("csv", a)->required();
  fit_cmd->add_option("--perturbation", perturbation);
  fit_cmd->add_flag("--log-correction", logc);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  try {
    if (*certify_cmd) return cmd_certify(a);
    if (*forward_cmd) return cmd_forward(a, out);
    if (*wdist_cmd) return cmd_wdist(a, b, kappa);
    if (*xray_cmd) return cmd_xray(a);
    if (*fbp_cmd) return cmd_fbp(a, size, window, image_out);
    if (*sb_cmd) return cmd_sweep("ballistic", a, out);
    if (*ss_cmd) return cmd_sweep("single", a, out);
    if (*eta_cmd) return cmd_eta_scaling(a, out);
    if (*fit_cmd) return cmd_fit(a, perturbation, logc);
  } catch (const NotSubcritical& e) {
    std::cerr << e.what() << "\n";
    return not_subcritical;
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return config_error;
  } catch (const InvalidDimension& e) {
    std::cerr << e.what() << "\n";
    return config_error;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config: " << e.what() << "\n";
    return config_error;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return numerical_failure;
  }
  return ok;
}
