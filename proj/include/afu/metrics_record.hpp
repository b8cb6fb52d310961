#pragma once

#include <string>

namespace afu {

enum class Checkpoint { Instant, PostRecovery, Trajectory };

inline const char* to_string(Checkpoint c) {
  switch (c) {
    case Checkpoint::Instant:
      return "instant";
    case Checkpoint::PostRecovery:
      return "post_recovery";
    case Checkpoint::Trajectory:
      return "trajectory";
  }
  return "?";
}

// One evaluation snapshot. ba/ca are percentages; l2_to_oracle is NaN when no
// oracle model is available.
struct MetricsRecord {
  int round = 0;
  double sim_time = 0.0;
  double ba = 0.0;
  double ca = 0.0;
  double l2_to_oracle = 0.0;
  Checkpoint tag = Checkpoint::Trajectory;
};

}  // namespace afu
