#pragma once

#include <chrono>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "qis/clickmap.hpp"
#include "qis/error.hpp"
#include "qis/fidelity.hpp"
#include "qis/grid.hpp"
#include "qis/image_io.hpp"
#include "qis/qcmath.hpp"
#include "qis/render.hpp"
#include "qis/solver.hpp"

namespace qis {

struct SessionParams {
  EnergyParams energy;
  int kmeans_k = 3;
  int levels = 4;         // pyramid depth at step 0
  // Pyramid depth for warm-started steps. A strong click moves the optimum far
  // from the warm start, which the finest levels alone reach slowly.
  int refine_levels = 4;
  std::size_t max_steps = 64;

  void validate() const {
    energy.validate();
    if (kmeans_k < 2) throw Error(ErrorCode::invalid_argument, "kmeans-k must be >= 2");
    if (levels < 1 || refine_levels < 1) throw Error(ErrorCode::invalid_argument, "levels must be >= 1");
  }
};

struct StepRecord {
  int step = 0;
  Polarity polarity = Polarity::positive;
  std::vector<Click> clicks;
  BinaryMask click_map;  // empty at step 0
  RegionStats stats;
  ClickWeight weight;    // r = weight.r; unused at step 0
  ScalarField image;     // I^n, unclipped
  DeformationField phi;
  BinaryMask mask;
  Constants constants;
  double energy = 0.0;
  double min_det = 0.0;
  double time_ms = 0.0;
  std::vector<TraceRecord> trace;
  bool deadline_hit = false;

  double r() const noexcept { return weight.r; }
};

struct StepOutcome {
  std::vector<int> applied;  // step indices created by this call
  std::vector<std::string> warnings;
};

class Session {
 public:
  // Rescales the raw image to [0, 255] and registers the template from the
  // identity to obtain the step-0 mask.
  static Session init(const ScalarField& raw_image, const BinaryMask& templ, const SessionParams& params,
                      SolveContext ctx = {}) {
    params.validate();
    require_same_shape(raw_image, templ, "init_session");
    require_finite(raw_image);
    const std::size_t ones = count_ones(templ);
    if (ones == 0 || ones == templ.size()) {
      throw Error(ErrorCode::degenerate_template, "template must be neither empty nor the full image");
    }
    Session s;
    s.params_ = params;
    s.template_ = templ;
    s.template_topology_ = topology_of(templ);
    s.image0_ = rescale_intensity(raw_image);

    StepRecord rec;
    rec.image = s.image0_;
    s.solve_into(rec, identity_field(templ.height(), templ.width()), params.levels, std::move(ctx));
    s.steps_.push_back(std::move(rec));
    return s;
  }

  const SessionParams& params() const noexcept { return params_; }
  const BinaryMask& template_mask() const noexcept { return template_; }
  const Topology& template_topology() const noexcept { return template_topology_; }
  const ScalarField& image0() const noexcept { return image0_; }
  int height() const noexcept { return template_.height(); }
  int width() const noexcept { return template_.width(); }

  // All retained records; entries past current_index() survive an undo
  // until the next apply.
  const std::vector<StepRecord>& records() const noexcept { return steps_; }
  int current_index() const noexcept { return current_; }
  const StepRecord& current() const { return steps_[static_cast<std::size_t>(current_)]; }
  const StepRecord& record(int step) const {
    if (step < 0 || step > current_) {
      throw Error(ErrorCode::invalid_argument, "no step " + std::to_string(step) + " in the active history");
    }
    return steps_[static_cast<std::size_t>(step)];
  }

  // One uniform-polarity step computed against the current state without
  // modifying it. An ineffective click (some region of the three-region
  // split is empty) yields nullopt.
  std::optional<StepRecord> compute_step(const std::vector<Click>& clicks, SolveContext ctx = {}) const {
    if (clicks.empty()) throw Error(ErrorCode::invalid_argument, "a step needs at least one click");
    for (const Click& c : clicks) require_in_bounds(c.x, c.y, height(), width());
    if (static_cast<std::size_t>(current_) >= params_.max_steps) {
      throw Error(ErrorCode::history_full, "history holds at most " + std::to_string(params_.max_steps) + " steps");
    }
    const StepRecord& prev = current();

    const RegionLabeling clusters = kmeans_labels(prev.image, params_.kmeans_k);
    const RegionLabeling components = component_decomposition(clusters);
    ClickMap cm = build_click_map(clicks, components);

    StepRecord rec;
    try {
      rec.stats = estimate_region_stats(prev.image, prev.mask, cm);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::empty_region) return std::nullopt;
      throw;
    }
    rec.weight = choose_click_weight(rec.stats, cm.polarity);
    rec.step = current_ + 1;
    rec.polarity = cm.polarity;
    rec.clicks = clicks;
    for (Click& c : rec.clicks) c.step = rec.step;
    rec.image = prev.image;
    for (std::size_t i = 0; i < rec.image.size(); ++i) {
      if (cm.mask[i]) rec.image[i] += rec.weight.r;
    }
    rec.click_map = std::move(cm.mask);
    solve_into(rec, prev.phi, std::min(params_.refine_levels, params_.levels), std::move(ctx));
    return rec;
  }

  // Drops any undone records and appends `rec` as the new current step.
  void commit(StepRecord rec) {
    if (rec.step != current_ + 1) throw Error(ErrorCode::invalid_argument, "record was computed for another step");
    steps_.resize(static_cast<std::size_t>(current_) + 1);
    steps_.push_back(std::move(rec));
    ++current_;
  }

  bool apply_step(const std::vector<Click>& clicks, SolveContext ctx = {}) {
    std::optional<StepRecord> rec = compute_step(clicks, std::move(ctx));
    if (!rec) return false;
    commit(std::move(*rec));
    return true;
  }

  // Splits a mixed batch into a negative step followed by a positive one.
  // `commit_fn(session, record)` publishes each computed step.
  template <class CommitFn>
  StepOutcome apply_clicks_with(const std::vector<Click>& clicks, const SolveContext& ctx, CommitFn&& commit_fn) {
    StepOutcome out;
    std::vector<Click> neg, pos;
    for (const Click& c : clicks) (c.polarity == Polarity::negative ? neg : pos).push_back(c);
    for (const auto* group : {&neg, &pos}) {
      if (group->empty()) continue;
      std::optional<StepRecord> rec = compute_step(*group, ctx);
      if (!rec) {
        out.warnings.push_back("ineffective_click");
        continue;
      }
      const bool fallback = rec->weight.fallback;
      const bool late = rec->deadline_hit;
      commit_fn(*this, std::move(*rec));
      out.applied.push_back(current_);
      if (fallback) out.warnings.push_back("r_fallback");
      if (late) out.warnings.push_back("budget_exceeded");
    }
    return out;
  }

  StepOutcome apply_clicks(const std::vector<Click>& clicks, const SolveContext& ctx = {}) {
    return apply_clicks_with(clicks, ctx, [](Session& s, StepRecord&& r) { s.commit(std::move(r)); });
  }

  void undo() {
    if (current_ == 0) throw Error(ErrorCode::nothing_to_undo, "already at step 0");
    --current_;
  }

 private:
  void solve_into(StepRecord& rec, const DeformationField& warm, int levels, SolveContext ctx) const {
    const auto t0 = std::chrono::steady_clock::now();
    auto user_trace = ctx.trace;
    ctx.trace = [&rec, user_trace](const TraceRecord& t) {
      rec.trace.push_back(t);
      if (user_trace) user_trace(t);
    };
    const MultilevelResult res = multilevel_solve(rec.image, template_, warm, params_.energy, levels, ctx);
    rec.phi = res.psi;
    rec.constants = res.constants;
    rec.energy = res.energy;
    rec.min_det = min_det(res.psi);
    rec.mask = segmentation_mask(template_, res.psi);
    rec.deadline_hit = res.deadline_hit;
    rec.time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }

  SessionParams params_;
  BinaryMask template_;
  Topology template_topology_;
  ScalarField image0_;
  std::vector<StepRecord> steps_;
  int current_ = 0;
};

inline nlohmann::json step_metrics(const StepRecord& rec, const BinaryMask* truth) {
  nlohmann::json j = {{"step", rec.step},
                      {"dice", nullptr},
                      {"energy", rec.energy},
                      {"min_det", rec.min_det},
                      {"time_ms", rec.time_ms}};
  if (truth) j["dice"] = dice(rec.mask, *truth);
  return j;
}

inline nlohmann::json trace_json(const TraceRecord& t) {
  return {{"level", t.level}, {"ad", t.ad}, {"gn", t.gn}, {"F", t.F}, {"min_det", t.min_det}, {"max_mu", t.max_mu}};
}

// Artifacts of the active step: "mask" (PNG), "deformation" (QISMU grid),
// "deformation_png" (grid overlay), "trace" (JSONL of every active step),
// "metrics" (JSON array, Dice when truth is given).
inline std::string export_artifact(const Session& s, const std::string& what, const BinaryMask* truth = nullptr) {
  const StepRecord& cur = s.current();
  if (what == "mask") return encode_mask_png(cur.mask);
  if (what == "deformation") return encode_mu_dump(cur.phi);
  if (what == "deformation_png") return render_grid_overlay(cur.image, cur.phi, cur.mask);
  if (what == "trace") {
    std::string out;
    for (int n = 0; n <= s.current_index(); ++n) {
      for (const TraceRecord& t : s.record(n).trace) out += trace_json(t).dump() + "\n";
    }
    return out;
  }
  if (what == "metrics") {
    if (truth) require_same_shape(*truth, cur.mask, "metrics ground truth");
    nlohmann::json arr = nlohmann::json::array();
    for (int n = 0; n <= s.current_index(); ++n) arr.push_back(step_metrics(s.record(n), truth));
    return arr.dump(2) + "\n";
  }
  throw Error(ErrorCode::unknown_artifact, "unknown artifact \"" + what + "\"");
}

}  // namespace qis
