// qis: batch replay, property suites, the HTTP service and synthetic data.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "qis/image_io.hpp"
#include "qis/polygon.hpp"
#include "qis/service.hpp"
#include "qis/session.hpp"
#include "qis/synthetic.hpp"
#include "qis/verify.hpp"

namespace {

using namespace qis;
using nlohmann::json;

struct RunOptions {
  std::string image, templ, clicks, truth, out, deform_out, metrics, trace;
  double alpha1 = 0.001;
  double alpha2 = 100.0;
  int kmeans_k = 3;
  int levels = 4;
  std::uint64_t seed = 0;
};

json read_json_file(const std::string& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, path + ": " + e.what());
  }
}

// A template given as .json is a polygon; anything else is a mask image.
BinaryMask load_template(const std::string& path, int height, int width) {
  if (std::filesystem::path(path).extension() == ".json") {
    return rasterize_polygon(parse_polygon(read_json_file(path)), height, width);
  }
  return load_mask(path);
}

int run_script(const RunOptions& o) {
  for (const auto& [flag, value] : {std::pair{"--image", &o.image}, {"--template", &o.templ}, {"--out", &o.out}}) {
    if (value->empty()) {
      std::cerr << "error: missing required flag " << flag << "\n";
      return 1;
    }
  }
  const ScalarField image = load_image(o.image);
  const BinaryMask templ = load_template(o.templ, image.height(), image.width());
  std::vector<ClickStep> script;
  if (!o.clicks.empty()) script = parse_click_script(read_json_file(o.clicks), image.height(), image.width());
  std::optional<BinaryMask> truth;
  if (!o.truth.empty()) truth = load_mask(o.truth);

  SessionParams params;
  params.energy.alpha1 = o.alpha1;
  params.energy.alpha2 = o.alpha2;
  params.kmeans_k = o.kmeans_k;
  params.levels = o.levels;

  Session s = Session::init(image, templ, params);
  bool ineffective = false;
  for (const ClickStep& step : script) {
    const StepOutcome out = s.apply_clicks(step.clicks);
    for (const std::string& w : out.warnings) {
      std::cerr << "warning: step " << step.step << ": " << w << "\n";
      if (w == "ineffective_click") ineffective = true;
    }
  }

  write_file(o.out, export_artifact(s, "mask"));
  if (!o.deform_out.empty()) write_file(o.deform_out, export_artifact(s, "deformation_png"));
  if (!o.metrics.empty()) write_file(o.metrics, export_artifact(s, "metrics", truth ? &*truth : nullptr));
  if (!o.trace.empty()) write_file(o.trace, export_artifact(s, "trace"));
  return ineffective ? 2 : 0;
}

int run_verify(const std::string& suite, std::uint64_t seed, int trials) {
  if (!verify::is_suite(suite)) {
    std::cerr << "error: unknown suite \"" << suite << "\" (theorems, gradients, topology)\n";
    return 1;
  }
  bool ok = true;
  for (const verify::SuiteReport& rep : verify::run_suite(suite, seed, trials)) {
    std::cout << rep.summary() << "\n";
    for (const std::string& f : rep.failures) std::cout << "  " << f << "\n";
    ok = ok && rep.ok();
  }
  return ok ? 0 : 1;
}

int write_scenario(const std::string& name, int size, double noise, const std::string& dir) {
  synthetic::Scenario sc;
  if (name == "circle") {
    sc = synthetic::circle(size, noise);
  } else if (name == "taco_plate") {
    sc = synthetic::taco_plate(size);
  } else if (name == "knife_plate") {
    sc = synthetic::knife_plate(size);
  } else if (name == "disk_lobe") {
    sc = synthetic::disk_lobe(size);
  } else {
    std::cerr << "error: unknown scenario \"" << name << "\" (circle, taco_plate, knife_plate, disk_lobe)\n";
    return 1;
  }
  std::filesystem::create_directories(dir);
  const std::filesystem::path d(dir);
  write_file((d / "image.png").string(), encode_gray_png(sc.image));
  write_file((d / "template.png").string(), encode_mask_png(sc.templ));
  write_file((d / "truth.png").string(), encode_mask_png(sc.truth));
  json script = json::array();
  for (const ClickStep& st : sc.script) script.push_back(to_json(st));
  write_file((d / "clicks.json").string(), script.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Template-based segmentation refined by clicks"};
  app.require_subcommand(1);

  RunOptions ro;
  auto* run_cmd = app.add_subcommand("run", "replay a click script and write the mask");
  run_cmd->add_option("--image", ro.image, "image (PNG or binary PGM)");
  run_cmd->add_option("--template", ro.templ, "template mask PNG or polygon JSON");
  run_cmd->add_option("--clicks", ro.clicks, "click script JSON (array of steps)");
  run_cmd->add_option("--truth", ro.truth, "ground-truth mask for Dice in the metrics");
  run_cmd->add_option("--out", ro.out, "output mask PNG");
  run_cmd->add_option("--deform-out", ro.deform_out, "deformation grid overlay PNG");
  run_cmd->add_option("--metrics", ro.metrics, "per-step metrics JSON");
  run_cmd->add_option("--trace", ro.trace, "solver trace JSONL");
  run_cmd->add_option("--alpha1", ro.alpha1, "Laplacian weight")->capture_default_str();
  run_cmd->add_option("--alpha2", ro.alpha2, "Beltrami weight")->capture_default_str();
  run_cmd->add_option("--kmeans-k", ro.kmeans_k, "intensity clusters for click maps")->capture_default_str();
  run_cmd->add_option("--levels", ro.levels, "pyramid depth at step 0")->capture_default_str();
  run_cmd->add_option("--seed", ro.seed, "accepted for scripts; the engine draws no random numbers");

  std::string suite;
  std::uint64_t vseed = 1;
  int trials = 100;
  auto* verify_cmd = app.add_subcommand("verify", "run a property suite");
  verify_cmd->add_option("--suite", suite, "theorems, gradients or topology")->required();
  verify_cmd->add_option("--seed", vseed)->capture_default_str();
  verify_cmd->add_option("--trials", trials)->capture_default_str()->check(CLI::PositiveNumber);

  std::optional<int> port;
  auto* serve_cmd = app.add_subcommand("serve", "serve the /v1 HTTP API");
  serve_cmd->add_option("--port", port, "overrides QIS_PORT");

  std::string scenario = "circle", dir = ".";
  int size = 128;
  double noise = 0.0;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic scenario");
  synth_cmd->add_option("--scenario", scenario)->capture_default_str();
  synth_cmd->add_option("--size", size)->capture_default_str()->check(CLI::Range(16, 4096));
  synth_cmd->add_option("--noise", noise, "Gaussian sigma, circle only")->capture_default_str();
  synth_cmd->add_option("--dir", dir)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*run_cmd) return run_script(ro);
    if (*verify_cmd) return run_verify(suite, vseed, trials);
    if (*synth_cmd) return write_scenario(scenario, size, noise, dir);
    if (*serve_cmd) {
      service::Config cfg = service::Config::from_env();
      if (port) cfg.port = *port;
      std::cerr << "listening on 0.0.0.0:" << cfg.port << "\n";
      return service::serve(cfg);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.code()) << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
