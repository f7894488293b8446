#include "spinlab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "spinlab/rng.hpp"
#include "spinlab/textio.hpp"

#include <json.hpp>

namespace spinlab {

namespace {

constexpr double kProbSumTolerance = 1e-12;

std::size_t space_size_for(int vocab_size, int lmax) {
  std::size_t total = 0;
  std::size_t level = 1;
  for (int len = 1; len <= lmax; ++len) {
    level *= static_cast<std::size_t>(vocab_size);
    total += level;
  }
  return total;
}

void check_distribution_row(std::span<const double> row, const std::string& what) {
  double sum = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (!(row[i] >= 0.0)) {
      throw ConfigError(what + ": entry " + std::to_string(i) + " is negative or non-finite");
    }
    sum += row[i];
  }
  if (std::abs(sum - 1.0) > kProbSumTolerance) {
    throw ConfigError(what + ": probabilities sum to " + format_double(sum) +
                      ", expected 1 within 1e-12");
  }
}

std::vector<double> softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    z += out[i];
  }
  for (double& p : out) p /= z;
  return out;
}

}  // namespace

Vocabulary Vocabulary::of_size(int size) {
  Vocabulary v;
  v.size = size;
  v.tokens.resize(size > 0 ? static_cast<std::size_t>(size) : 0);
  for (int i = 0; i < size; ++i) v.tokens[static_cast<std::size_t>(i)] = i;
  v.validate();
  return v;
}

void Vocabulary::validate() const {
  if (size < 2) throw ConfigError("vocab_size: must be >= 2, got " + std::to_string(size));
  if (tokens.size() != static_cast<std::size_t>(size)) {
    throw ConfigError("vocabulary tokens: expected " + std::to_string(size) + " entries");
  }
  for (int i = 0; i < size; ++i) {
    if (tokens[static_cast<std::size_t>(i)] != i) {
      throw ConfigError("vocabulary tokens: must be contiguous from 0");
    }
  }
}

ResponseSpace::ResponseSpace(int vocab_size, int lmax)
    : vocab_size_(vocab_size), lmax_(lmax) {
  if (vocab_size < 2) throw ConfigError("vocab_size: must be >= 2");
  if (lmax < 1) throw ConfigError("lmax: must be >= 1");
  responses_.reserve(space_size_for(vocab_size, lmax));
  length_offset_.assign(static_cast<std::size_t>(lmax) + 1, 0);
  for (int len = 1; len <= lmax; ++len) {
    length_offset_[static_cast<std::size_t>(len)] = responses_.size();
    // lexicographic enumeration: leftmost token most significant
    std::vector<int> tokens(static_cast<std::size_t>(len), 0);
    while (true) {
      responses_.push_back(Response{tokens});
      int pos = len - 1;
      while (pos >= 0 && tokens[static_cast<std::size_t>(pos)] == vocab_size - 1) {
        tokens[static_cast<std::size_t>(pos)] = 0;
        --pos;
      }
      if (pos < 0) break;
      ++tokens[static_cast<std::size_t>(pos)];
    }
  }
}

const Response& ResponseSpace::at(std::size_t index) const {
  if (index >= responses_.size()) {
    throw DomainError("response index " + std::to_string(index) + " out of range");
  }
  return responses_[index];
}

void ResponseSpace::check_valid(const Response& r) const {
  if (r.length() < 1 || r.length() > lmax_) {
    throw DomainError("response length " + std::to_string(r.length()) +
                      " outside [1, " + std::to_string(lmax_) + "]");
  }
  for (int tok : r.tokens) {
    if (tok < 0 || tok >= vocab_size_) {
      throw DomainError("token " + std::to_string(tok) + " outside vocabulary of size " +
                        std::to_string(vocab_size_));
    }
  }
}

std::size_t ResponseSpace::index_of(const Response& r) const {
  check_valid(r);
  std::size_t index = length_offset_[static_cast<std::size_t>(r.length())];
  std::size_t stride = 1;
  for (int pos = r.length() - 1; pos >= 0; --pos) {
    index += stride * static_cast<std::size_t>(r.tokens[static_cast<std::size_t>(pos)]);
    stride *= static_cast<std::size_t>(vocab_size_);
  }
  return index;
}

void ToyTask::validate() const {
  vocabulary.validate();
  if (lmax < 1) throw ConfigError("lmax: must be >= 1");
  if (prompts.empty()) throw ConfigError("prompts: must be nonempty");
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (prompts[i] != static_cast<PromptId>(i)) {
      throw ConfigError("prompts: identifiers must be contiguous from 0");
    }
  }
  if (!space || space->vocab_size() != vocabulary.size || space->lmax() != lmax) {
    throw ConfigError("response space does not match vocab_size/lmax");
  }
  if (prompt_weights.size() != prompts.size()) {
    throw ConfigError("prompt_weights: expected " + std::to_string(prompts.size()) + " entries");
  }
  check_distribution_row(prompt_weights, "prompt_weights");
  if (data_dist.size() != prompts.size()) {
    throw ConfigError("data_dist: expected one row per prompt");
  }
  for (std::size_t p = 0; p < data_dist.size(); ++p) {
    if (data_dist[p].size() != space->size()) {
      throw ConfigError("data_dist[" + std::to_string(p) + "]: expected " +
                        std::to_string(space->size()) + " entries, got " +
                        std::to_string(data_dist[p].size()));
    }
    check_distribution_row(data_dist[p], "data_dist[" + std::to_string(p) + "]");
  }
}

TaskSpec default_task_spec() { return TaskSpec{}; }

ToyTask build_task(const TaskSpec& spec) {
  if (spec.vocab_size < 2) {
    throw ConfigError("vocab_size: must be >= 2, got " + std::to_string(spec.vocab_size));
  }
  if (spec.lmax < 1) throw ConfigError("lmax: must be >= 1, got " + std::to_string(spec.lmax));
  if (spec.num_prompts < 1) throw ConfigError("num_prompts: must be >= 1");
  if (spec.recipe == DataRecipe::Peaked && !(spec.temperature > 0.0)) {
    throw ConfigError("temperature: must be > 0");
  }

  ToyTask task;
  task.vocabulary = Vocabulary::of_size(spec.vocab_size);
  task.lmax = spec.lmax;
  task.space = std::make_shared<ResponseSpace>(spec.vocab_size, spec.lmax);
  const std::size_t n = task.space->size();
  const std::size_t num_prompts = static_cast<std::size_t>(spec.num_prompts);

  task.prompts.resize(num_prompts);
  for (std::size_t p = 0; p < num_prompts; ++p) task.prompts[p] = static_cast<PromptId>(p);

  if (spec.prompt_weights.empty()) {
    task.prompt_weights.assign(num_prompts, 1.0 / static_cast<double>(num_prompts));
  } else {
    task.prompt_weights = spec.prompt_weights;
  }

  task.data_dist.resize(num_prompts);
  switch (spec.recipe) {
    case DataRecipe::Uniform:
      for (auto& row : task.data_dist) row.assign(n, 1.0 / static_cast<double>(n));
      break;
    case DataRecipe::Peaked:
      for (std::size_t p = 0; p < num_prompts; ++p) {
        Rng rng(derive_seed(spec.seed, "corpus.data_dist", p));
        std::vector<double> logits(n);
        for (double& g : logits) g = (2.0 * rng.next_double() - 1.0) / spec.temperature;
        task.data_dist[p] = softmax(logits);
      }
      break;
    case DataRecipe::Explicit:
      if (spec.explicit_dist.size() != num_prompts) {
        throw ConfigError("explicit_dist: expected one row per prompt");
      }
      task.data_dist = spec.explicit_dist;
      break;
  }

  task.validate();
  return task;
}

AnnotatedSet sample_annotated(const ToyTask& task, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw UsageError("sample_annotated: n must be >= 1");
  AnnotatedSet set;
  set.seed = seed;
  set.records.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, "corpus.annotated", i));
    const auto prompt = static_cast<PromptId>(rng.next_categorical(task.prompt_weights));
    const std::size_t idx = rng.next_categorical(task.data_dist[static_cast<std::size_t>(prompt)]);
    set.records.push_back(AnnotatedRecord{prompt, task.space->at(idx)});
  }
  return set;
}

// ---------------------------------------------------------------------------
// persistence

namespace {

// The numeric payload is emitted by hand so probabilities carry full
// 17-significant-digit precision regardless of the JSON library's defaults.
void write_task_json(std::ostream& os, const ToyTask& task) {
  os << "{\n";
  os << "  \"vocab_size\": " << task.vocabulary.size << ",\n";
  os << "  \"lmax\": " << task.lmax << ",\n";
  os << "  \"prompts\": [";
  for (std::size_t i = 0; i < task.prompts.size(); ++i) {
    if (i > 0) os << ", ";
    os << task.prompts[i];
  }
  os << "],\n";
  os << "  \"prompt_weights\": " << format_double_array(task.prompt_weights) << ",\n";
  os << "  \"data_dist\": [\n";
  for (std::size_t p = 0; p < task.data_dist.size(); ++p) {
    os << "    " << format_double_array(task.data_dist[p]);
    os << (p + 1 < task.data_dist.size() ? ",\n" : "\n");
  }
  os << "  ]\n";
  os << "}\n";
}

nlohmann::json parse_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

template <typename T>
T require_field(const nlohmann::json& j, const std::string& name, const std::string& origin) {
  if (!j.contains(name)) throw ConfigError(origin + ": missing field \"" + name + "\"");
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(origin + ": field \"" + name + "\" has the wrong type");
  }
}

}  // namespace

void save_task(const ToyTask& task, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write file: " + path);
  write_task_json(out, task);
  if (!out) throw ConfigError("write failed: " + path);
}

ToyTask load_task(const std::string& path) {
  const nlohmann::json j = parse_json_file(path);
  for (const auto& [key, _] : j.items()) {
    if (key != "vocab_size" && key != "lmax" && key != "prompts" &&
        key != "prompt_weights" && key != "data_dist") {
      throw ConfigError(path + ": unknown field \"" + key + "\"");
    }
  }
  const int vocab_size = require_field<int>(j, "vocab_size", path);
  if (vocab_size < 2) {
    throw ConfigError(path + ": vocab_size must be >= 2, got " + std::to_string(vocab_size));
  }
  const int lmax = require_field<int>(j, "lmax", path);
  if (lmax < 1) throw ConfigError(path + ": lmax must be >= 1");

  ToyTask task;
  task.vocabulary = Vocabulary::of_size(vocab_size);
  task.lmax = lmax;
  task.space = std::make_shared<ResponseSpace>(vocab_size, lmax);
  task.prompts = require_field<std::vector<PromptId>>(j, "prompts", path);
  task.prompt_weights = require_field<std::vector<double>>(j, "prompt_weights", path);
  task.data_dist = require_field<std::vector<std::vector<double>>>(j, "data_dist", path);
  try {
    task.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return task;
}

void save_annotated(const AnnotatedSet& set, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write file: " + path);
  out << "{\n  \"seed\": " << set.seed << ",\n  \"records\": [\n";
  for (std::size_t i = 0; i < set.records.size(); ++i) {
    const auto& rec = set.records[i];
    out << "    {\"prompt\": " << rec.prompt << ", \"tokens\": [";
    for (std::size_t k = 0; k < rec.response.tokens.size(); ++k) {
      if (k > 0) out << ", ";
      out << rec.response.tokens[k];
    }
    out << "]}" << (i + 1 < set.records.size() ? ",\n" : "\n");
  }
  out << "  ]\n}\n";
  if (!out) throw ConfigError("write failed: " + path);
}

AnnotatedSet load_annotated(const std::string& path, const ToyTask& task) {
  const nlohmann::json j = parse_json_file(path);
  AnnotatedSet set;
  set.seed = require_field<std::uint64_t>(j, "seed", path);
  const auto& records = j.at("records");
  if (!records.is_array()) throw ConfigError(path + ": field \"records\" must be an array");
  set.records.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto prompt = require_field<PromptId>(records[i], "prompt",
                                                path + ": records[" + std::to_string(i) + "]");
    if (prompt < 0 || static_cast<std::size_t>(prompt) >= task.num_prompts()) {
      throw ConfigError(path + ": records[" + std::to_string(i) + "]: prompt id " +
                        std::to_string(prompt) + " not in task");
    }
    Response r;
    r.tokens = require_field<std::vector<int>>(records[i], "tokens",
                                               path + ": records[" + std::to_string(i) + "]");
    try {
      task.space->check_valid(r);
    } catch (const DomainError& e) {
      throw ConfigError(path + ": records[" + std::to_string(i) + "]: vocabulary error: " +
                        e.what());
    }
    set.records.push_back(AnnotatedRecord{prompt, std::move(r)});
  }
  return set;
}

}  // namespace spinlab
