// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_SCHEDULE_HPP_
#define DGTSE_SCHEDULE_HPP_

#include <cmath>
#include <limits>
#include <vector>

#include "dgtse/common.hpp"

namespace dgtse {

struct TrainConfig {
  double lr_init = 1e-3;
  int64_t warmup_steps = 10000;
  int plateau_patience_epochs = 3;
  double lr_halving_factor = 0.5;
  int max_epochs = 100;
  int batch_size = 1;
  int64_t steps_per_epoch = 100;
  double grad_clip = 5.0;
  uint64_t seed = 0;
};

inline void validate(const TrainConfig& cfg) {
  if (cfg.lr_init <= 0) throw ConfigError("train: lr_init must be positive");
  if (cfg.warmup_steps < 0) throw ConfigError("train: warmup_steps must be >= 0");
  if (cfg.plateau_patience_epochs < 1 || cfg.max_epochs < 1 ||
      cfg.batch_size < 1 || cfg.steps_per_epoch < 1)
    throw ConfigError("train: counts must be positive");
  if (cfg.lr_halving_factor <= 0 || cfg.lr_halving_factor >= 1)
    throw ConfigError("train: halving factor must lie in (0, 1)");
}

// Learning rate policy: linear ramp from 0 to lr_init over warmup_steps,
// scaled down by lr_halving_factor each time the validation loss fails to
// improve on its best for patience consecutive epochs. The patience counter
// restarts after each halving.
class PlateauSchedule {
 public:
  explicit PlateauSchedule(TrainConfig cfg) : cfg_(cfg) { validate(cfg); }

  void observe_epoch(double val_loss) {
    if (val_loss < best_) {
      best_ = val_loss;
      bad_epochs_ = 0;
      return;
    }
    if (++bad_epochs_ >= cfg_.plateau_patience_epochs) {
      ++halvings_;
      bad_epochs_ = 0;
    }
  }

  double lr_at(int64_t step) const {
    double ramp = cfg_.warmup_steps > 0
                      ? std::min(1.0, static_cast<double>(step) / cfg_.warmup_steps)
                      : 1.0;
    return cfg_.lr_init * ramp * std::pow(cfg_.lr_halving_factor, halvings_);
  }

  int halvings() const { return halvings_; }
  double best() const { return best_; }
  int bad_epochs() const { return bad_epochs_; }
  void restore(int halvings, double best, int bad_epochs) {
    halvings_ = halvings;
    best_ = best;
    bad_epochs_ = bad_epochs;
  }

 private:
  TrainConfig cfg_;
  int halvings_ = 0;
  int bad_epochs_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

// Pure-function form over a full epoch history, for callers that do not
// keep incremental state. Equivalent to replaying observe_epoch.
inline double lr_at(int64_t step, const std::vector<double>& epoch_val_losses,
                    const TrainConfig& cfg) {
  PlateauSchedule sched(cfg);
  for (double v : epoch_val_losses) sched.observe_epoch(v);
  return sched.lr_at(step);
}

}  // namespace dgtse

#endif  // DGTSE_SCHEDULE_HPP_
