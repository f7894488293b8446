#include "spinlab/metrics.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "spinlab/oracle.hpp"
#include "spinlab/textio.hpp"

#include <json.hpp>

namespace spinlab {

namespace {

constexpr const char* kCsvHeader =
    "t,step,loss,r_y,r_yp,logp_y,logp_yp,logp_y0,u,v,grad_norm,kl_mean";

double mean_of(std::span<const double> xs) {
  double sum = 0.0;
  for (double x : xs) sum += x;
  return xs.empty() ? 0.0 : sum / static_cast<double>(xs.size());
}

double l2_norm(std::span<const double> xs) {
  double sum = 0.0;
  for (double x : xs) sum += x * x;
  return std::sqrt(sum);
}

}  // namespace

BatchRewards batch_rewards(const Policy& policy, const TripletBatch& batch,
                           const LossSpec& spec) {
  BatchRewards out;
  const std::size_t b = batch.items.size();
  out.r_y.reserve(b);
  out.r_yp.reserve(b);
  out.logp_y.reserve(b);
  out.logp_yp.reserve(b);
  out.logp_y0.reserve(b);

  std::vector<std::vector<double>> rows(policy.num_prompts());
  for (std::size_t p = 0; p < rows.size(); ++p) {
    rows[p].resize(policy.space().size());
    policy.prompt_log_probs(static_cast<PromptId>(p), rows[p]);
  }

  for (const auto& item : batch.items) {
    const auto& row = rows[static_cast<std::size_t>(item.prompt)];
    const double ly = row[item.y_index];
    const double lyp = row[item.y_prime_index];
    const double ly0 = row[item.y_zero_index];
    out.logp_y.push_back(ly);
    out.logp_yp.push_back(lyp);
    out.logp_y0.push_back(ly0);
    switch (spec.objective) {
      case Objective::Tspin:
        out.r_y.push_back(spec.alpha * ly);
        out.r_yp.push_back(spec.alpha * lyp);
        break;
      case Objective::Spin:
        if (!item.has_ref) throw UsageError("batch_rewards: reference log-probs missing");
        out.r_y.push_back(spec.lambda * (ly - item.ref_logp_y));
        out.r_yp.push_back(spec.lambda * (lyp - item.ref_logp_yp));
        break;
      case Objective::TspinRef:
        if (!item.has_ref) throw UsageError("batch_rewards: reference log-probs missing");
        out.r_y.push_back(spec.alpha * (ly - item.ref_logp_y));
        out.r_yp.push_back(spec.alpha * (lyp - item.ref_logp_yp));
        break;
      case Objective::Sft:
        out.r_y.push_back(ly);
        out.r_yp.push_back(0.0);
        break;
    }
  }
  return out;
}

MisalignmentStat misalignment(std::span<const double> r_y, std::span<const double> r_yp,
                              std::span<const double> logp_y, std::span<const double> logp_yp) {
  if (r_y.size() != r_yp.size() || r_y.size() != logp_y.size() ||
      r_y.size() != logp_yp.size()) {
    throw UsageError("misalignment: input arrays must align");
  }
  MisalignmentStat stat;
  stat.batch_size = r_y.size();
  for (std::size_t i = 0; i < r_y.size(); ++i) {
    const bool reward_up = r_y[i] - r_yp[i] > 0.0;       // ties count as aligned
    const bool likelihood_up = logp_y[i] - logp_yp[i] >= 0.0;
    if (reward_up && likelihood_up) ++stat.count_pos_pos;
    else if (reward_up && !likelihood_up) ++stat.count_pos_neg;
    else if (!reward_up && likelihood_up) ++stat.count_neg_pos;
    else ++stat.count_neg_neg;
  }
  stat.fraction = stat.batch_size == 0
                      ? 0.0
                      : static_cast<double>(stat.count_pos_neg) /
                            static_cast<double>(stat.batch_size);
  return stat;
}

MisalignmentStat misalignment(const BatchRewards& rewards) {
  return misalignment(rewards.r_y, rewards.r_yp, rewards.logp_y, rewards.logp_yp);
}

MisalignmentStat misalignment(const Policy& policy, const TripletBatch& batch,
                              const LossSpec& spec) {
  return misalignment(batch_rewards(policy, batch, spec));
}

KlToData kl_to_data(const Policy& policy, const ToyTask& task) {
  KlToData out;
  out.per_prompt.resize(task.num_prompts());
  for (std::size_t p = 0; p < task.num_prompts(); ++p) {
    out.per_prompt[p] = kl(task.data_dist[p], policy.distribution(static_cast<PromptId>(p)));
    out.weighted_mean += task.prompt_weights[p] * out.per_prompt[p];
  }
  return out;
}

StepRecord make_step_record(int t, int step, const BatchRewards& rewards, double loss_value,
                            std::span<const double> gradient, double kl_mean) {
  StepRecord record;
  record.t = t;
  record.step = step;
  record.loss = loss_value;
  record.r_y = mean_of(rewards.r_y);
  record.r_yp = mean_of(rewards.r_yp);
  record.logp_y = mean_of(rewards.logp_y);
  record.logp_yp = mean_of(rewards.logp_yp);
  record.logp_y0 = mean_of(rewards.logp_y0);
  record.u = record.logp_y - record.logp_yp;
  record.v = record.logp_yp - record.logp_y0;
  record.grad_norm = l2_norm(gradient);
  record.kl_mean = kl_mean;
  return record;
}

StepRecord make_step_record(int t, int step, const Policy& policy, const ToyTask& task,
                            const TripletBatch& batch, const LossSpec& spec,
                            double loss_value, std::span<const double> gradient) {
  return make_step_record(t, step, batch_rewards(policy, batch, spec), loss_value, gradient,
                          kl_to_data(policy, task).weighted_mean);
}

StepRecord make_step_record_sft(int t, int step, const Policy& policy, const ToyTask& task,
                                std::span<const AnnotatedRecord> batch, double loss_value,
                                std::span<const double> gradient) {
  StepRecord record;
  record.t = t;
  record.step = step;
  record.loss = loss_value;
  double sum = 0.0;
  for (const auto& rec : batch) sum += policy.log_prob(rec.prompt, rec.response);
  record.logp_y = batch.empty() ? 0.0 : sum / static_cast<double>(batch.size());
  record.r_y = record.logp_y;
  record.grad_norm = l2_norm(gradient);
  record.kl_mean = kl_to_data(policy, task).weighted_mean;
  return record;
}

void export_trace_csv(const MetricsTrace& trace, const std::string& path) {
  if (trace.steps.empty()) throw UsageError("export_trace_csv: empty trace");
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write file: " + path);
  out << kCsvHeader << "\n";
  for (const auto& r : trace.steps) {
    out << r.t << "," << r.step << "," << format_double(r.loss) << "," << format_double(r.r_y)
        << "," << format_double(r.r_yp) << "," << format_double(r.logp_y) << ","
        << format_double(r.logp_yp) << "," << format_double(r.logp_y0) << ","
        << format_double(r.u) << "," << format_double(r.v) << "," << format_double(r.grad_norm)
        << "," << format_double(r.kl_mean) << "\n";
  }
  if (!out) throw ConfigError("write failed: " + path);
}

void export_trace_json(const MetricsTrace& trace, const std::string& path) {
  if (trace.steps.empty()) throw UsageError("export_trace_json: empty trace");
  nlohmann::json j;
  j["steps"] = nlohmann::json::array();
  for (const auto& r : trace.steps) {
    j["steps"].push_back({{"t", r.t},
                          {"step", r.step},
                          {"loss", r.loss},
                          {"r_y", r.r_y},
                          {"r_yp", r.r_yp},
                          {"logp_y", r.logp_y},
                          {"logp_yp", r.logp_yp},
                          {"logp_y0", r.logp_y0},
                          {"u", r.u},
                          {"v", r.v},
                          {"grad_norm", r.grad_norm},
                          {"kl_mean", r.kl_mean}});
  }
  j["misalignment"] = nlohmann::json::array();
  for (const auto& m : trace.step_misalignment) {
    j["misalignment"].push_back({{"fraction", m.fraction},
                                 {"pos_pos", m.count_pos_pos},
                                 {"pos_neg", m.count_pos_neg},
                                 {"neg_pos", m.count_neg_pos},
                                 {"neg_neg", m.count_neg_neg},
                                 {"batch_size", m.batch_size}});
  }
  if (!trace.item_gaps.empty()) {
    j["item_gaps"] = nlohmann::json::array();
    for (const auto& g : trace.item_gaps) j["item_gaps"].push_back(g.values);
  }
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write file: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw ConfigError("write failed: " + path);
}

MetricsTrace load_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open file: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) {
    throw ConfigError(path + ": unexpected CSV header");
  }
  MetricsTrace trace;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 12) {
      throw ConfigError(path + ": line " + std::to_string(line_no) + ": expected 12 fields");
    }
    auto as_double = [&](const std::string& s) {
      double v = 0.0;
      const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw ConfigError(path + ": line " + std::to_string(line_no) + ": bad number \"" + s +
                          "\"");
      }
      return v;
    };
    StepRecord r;
    r.t = static_cast<int>(as_double(fields[0]));
    r.step = static_cast<int>(as_double(fields[1]));
    r.loss = as_double(fields[2]);
    r.r_y = as_double(fields[3]);
    r.r_yp = as_double(fields[4]);
    r.logp_y = as_double(fields[5]);
    r.logp_yp = as_double(fields[6]);
    r.logp_y0 = as_double(fields[7]);
    r.u = as_double(fields[8]);
    r.v = as_double(fields[9]);
    r.grad_norm = as_double(fields[10]);
    r.kl_mean = as_double(fields[11]);
    trace.steps.push_back(r);
  }
  return trace;
}

}  // namespace spinlab
