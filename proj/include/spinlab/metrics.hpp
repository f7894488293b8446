#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "spinlab/corpus.hpp"
#include "spinlab/objectives.hpp"
#include "spinlab/policy.hpp"

namespace spinlab {

// One row of the training-dynamics trace. All fields come from the same
// parameter state. Means are batch means.
struct StepRecord {
  int t = 0;
  int step = 0;
  double loss = 0.0;
  double r_y = 0.0;       // mean objective-specific reward of annotated responses
  double r_yp = 0.0;      // mean reward of synthetic responses
  double logp_y = 0.0;
  double logp_yp = 0.0;
  double logp_y0 = 0.0;
  double u = 0.0;
  double v = 0.0;
  double grad_norm = 0.0;
  double kl_mean = 0.0;   // weighted-mean KL(pi_data || pi_theta)
};

// Quadrant counts over the (reward-gap, likelihood-gap) plane. A pair with
// gap exactly 0 counts as aligned. Misaligned = strictly higher reward but
// strictly lower log-likelihood.
struct MisalignmentStat {
  double fraction = 0.0;
  std::size_t count_pos_pos = 0;
  std::size_t count_pos_neg = 0;  // misaligned quadrant
  std::size_t count_neg_pos = 0;
  std::size_t count_neg_neg = 0;
  std::size_t batch_size = 0;
};

// Per-step log pi(y) - log pi(y') values.
struct GapTrace {
  std::vector<double> values;
};

struct KlToData {
  std::vector<double> per_prompt;
  double weighted_mean = 0.0;
};

// Per-item rewards under an objective's reward formulation:
//   Tspin:    r(z) = alpha * log pi(z|x)
//   Spin:     r(z) = lambda * (log pi(z|x) - log pi_ref(z|x))
//   TspinRef: r(z) = alpha  * (log pi(z|x) - log pi_ref(z|x))
//   Sft:      r(z) = log pi(z|x)
struct BatchRewards {
  std::vector<double> r_y, r_yp;
  std::vector<double> logp_y, logp_yp, logp_y0;
};

BatchRewards batch_rewards(const Policy& policy, const TripletBatch& batch,
                           const LossSpec& spec);

MisalignmentStat misalignment(std::span<const double> r_y, std::span<const double> r_yp,
                              std::span<const double> logp_y, std::span<const double> logp_yp);
MisalignmentStat misalignment(const BatchRewards& rewards);
MisalignmentStat misalignment(const Policy& policy, const TripletBatch& batch,
                              const LossSpec& spec);

// Exact KL(pi_data || pi_theta) per prompt plus the q-weighted mean.
KlToData kl_to_data(const Policy& policy, const ToyTask& task);

StepRecord make_step_record(int t, int step, const BatchRewards& rewards, double loss_value,
                            std::span<const double> gradient, double kl_mean);
StepRecord make_step_record(int t, int step, const Policy& policy, const ToyTask& task,
                            const TripletBatch& batch, const LossSpec& spec,
                            double loss_value, std::span<const double> gradient);
// Sft variant: no triplet banks; reward fields mirror the log-likelihood and
// the synthetic/proto fields are zero.
StepRecord make_step_record_sft(int t, int step, const Policy& policy, const ToyTask& task,
                                std::span<const AnnotatedRecord> batch, double loss_value,
                                std::span<const double> gradient);

// Append-only trace owned by the run loop. Step misalignment stats and
// per-item gap dumps ride alongside the fixed-column records.
struct MetricsTrace {
  std::vector<StepRecord> steps;
  std::vector<MisalignmentStat> step_misalignment;  // aligned with steps
  std::vector<GapTrace> item_gaps;                  // only when dump_items is on
};

// CSV columns, exact order:
//   t,step,loss,r_y,r_yp,logp_y,logp_yp,logp_y0,u,v,grad_norm,kl_mean
// Values are written with 17-significant-digit precision and round-trip
// through load_trace_csv without loss.
void export_trace_csv(const MetricsTrace& trace, const std::string& path);
void export_trace_json(const MetricsTrace& trace, const std::string& path);
MetricsTrace load_trace_csv(const std::string& path);

}  // namespace spinlab
