#pragma once
// Evaluation history and its exports. A run accumulates one EvalPoint per
// (step, split) evaluation; exports are deterministic byte for byte: fixed
// column order, 17-significant-digit floats, and sorted JSON keys, so
// re-exporting the same history reproduces identical files.

#include <cstdint>
#include <string>
#include <vector>

namespace taskdp::metrics {

struct EvalPoint {
  std::uint64_t step = 0;      // env steps consumed when evaluated
  std::string split;           // "seen", "unseen", or "transfer"
  double success_rate = 0.0;   // task resolutions / episodes
  double avg_success_steps = 0.0;  // mean completion step; horizon when none
  double estimator_loss = 0.0;     // mean since the previous eval point
  double critic_loss = 0.0;
  double cp_loss = 0.0;            // latest planner refit loss; 0 before one
  double reach_component = 0.0;    // mean dense-reward terms per eval step
  double articulation_component = 0.0;
  double mpr_component = 0.0;
};

struct History {
  std::vector<EvalPoint> points;
};

inline constexpr char kCsvHeader[] =
    "step,split,success_rate,avg_success_steps,estimator_loss,critic_loss,"
    "cp_loss,reach_component,articulation_component,mpr_component";

// One header line plus one row per point, in stored order. Throws
// std::invalid_argument on an empty history and std::runtime_error on an
// IO failure.
void write_csv(const History& history, const std::string& path);

// Inverse of write_csv; round-trips bitwise (floats are written with enough
// digits to reparse exactly). Throws std::runtime_error on a malformed file.
History read_csv(const std::string& path);

// Per-split digest: last/best success rate, last average success steps, and
// the point count, keyed by split name under "splits", plus "last_step".
void write_summary_json(const History& history, const std::string& path);

// Two stacked line charts: success rate per split on top, mean dense-reward
// components below, both against env steps.
void write_svg(const History& history, const std::string& path);

// CSV plus summary, plus the SVG when svg_path is nonempty.
void export_metrics(const History& history, const std::string& csv_path,
                    const std::string& summary_path,
                    const std::string& svg_path = "");

}  // namespace taskdp::metrics
