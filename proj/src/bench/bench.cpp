// Copyright 2026 The ditm Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "ditm/bench/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ditm/common/error.hpp"
#include "ditm/common/fileio.hpp"
#include "ditm/common/hash.hpp"
#include "ditm/common/parallel.hpp"
#include "ditm/common/rng.hpp"
#include "ditm/diffusion/schedule.hpp"
#include "ditm/scenegen/render.hpp"

namespace ditm::bench {

namespace {

using itm::TextInput;
using nlohmann::json;
using numerics::Tensor;
using scenegen::Direction;

constexpr double kZ95 = 1.959963984540054;

std::string bank_id(std::size_t n, std::uint64_t seed) {
  return "n=" + std::to_string(n) + ",seed=" + std::to_string(seed);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
  return buf;
}

bool shares_errors(Mode a, Mode b) {
  if (direction_of(a) != direction_of(b)) return false;
  return (a == Mode::kTextGraynorm) == (b == Mode::kTextGraynorm);
}

double key_of(Mode m, const ScoreRecord& r) {
  return m == Mode::kText || m == Mode::kImageNaive ? r.conditional : r.normalized;
}

double prefix_mean(const std::vector<double>& v, std::size_t n) {
  return itm::bank_mean(std::span<const double>(v.data(), n));
}

InstanceResult make_instance(const TaskInstance& task, Mode mode, std::vector<ScoreRecord> records) {
  InstanceResult r;
  r.id = task.id;
  r.subtask = task.subtask;
  r.gold = task.gold;
  std::vector<double> keys;
  for (const auto& rec : records) keys.push_back(key_of(mode, rec));
  r.ranking = itm::rank_ascending(keys);
  r.degenerate = std::all_of(keys.begin(), keys.end(), [&](double k) { return k == keys.front(); });
  r.gold_rank = static_cast<std::size_t>(std::find(r.ranking.begin(), r.ranking.end(), task.gold) - r.ranking.begin()) + 1;
  r.correct = r.gold_rank == 1;
  r.records = std::move(records);
  return r;
}

SuiteResult summarize(const TaskSuite& suite, Mode mode, std::vector<InstanceResult> instances) {
  SuiteResult s;
  s.mode = std::string(name_of(mode));
  s.suite_id = suite_fingerprint(suite);
  s.chance = 1.0 / static_cast<double>(suite.config.k);
  std::map<std::string, std::pair<std::size_t, std::size_t>> counts;
  std::size_t correct = 0;
  for (const auto& r : instances) {
    auto& c = counts[r.subtask];
    c.first += r.correct;
    c.second += 1;
    correct += r.correct;
    s.degenerate += r.degenerate;
  }
  for (const auto& [name, c] : counts) s.per_subtask[name] = make_accuracy(c.first, c.second);
  s.overall = make_accuracy(correct, instances.size());
  s.instances = std::move(instances);
  return s;
}

const TaskInstance& task_at(const TaskSuite& suite, std::size_t i) {
  if (i >= suite.tasks.size()) throw PreconditionError("task index out of range");
  return suite.tasks[i];
}

json accuracy_json(const Accuracy& a) {
  return {{"correct", a.correct}, {"total", a.total}, {"accuracy", a.accuracy}, {"ci_low", a.ci_low}, {"ci_high", a.ci_high}};
}

Accuracy accuracy_from(const json& j) {
  Accuracy a;
  a.correct = j.at("correct").get<std::size_t>();
  a.total = j.at("total").get<std::size_t>();
  a.accuracy = j.at("accuracy").get<double>();
  a.ci_low = j.at("ci_low").get<double>();
  a.ci_high = j.at("ci_high").get<double>();
  return a;
}

}  // namespace

std::string_view name_of(Mode m) {
  switch (m) {
    case Mode::kText: return "text";
    case Mode::kImageNaive: return "image-naive";
    case Mode::kImageNormalized: return "image-normalized";
    case Mode::kTextGraynorm: return "text-graynorm";
  }
  return "?";
}

Mode mode_from(std::string_view name) {
  for (Mode m : {Mode::kText, Mode::kImageNaive, Mode::kImageNormalized, Mode::kTextGraynorm})
    if (name_of(m) == name) return m;
  throw PreconditionError("unknown mode '" + std::string(name) +
                          "' (expected text, image-naive, image-normalized or text-graynorm)");
}

Direction direction_of(Mode m) {
  return m == Mode::kImageNaive || m == Mode::kImageNormalized ? Direction::kImageRetrieval
                                                               : Direction::kTextRetrieval;
}

std::vector<std::size_t> applicable_tasks(const TaskSuite& suite, Mode mode) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < suite.tasks.size(); ++i)
    if (suite.tasks[i].direction == direction_of(mode)) out.push_back(i);
  if (out.empty())
    throw PreconditionError("mode " + std::string(name_of(mode)) + " needs " +
                            std::string(scenegen::name_of(direction_of(mode))) +
                            " instances and the suite has none");
  return out;
}

std::string suite_fingerprint(const TaskSuite& suite) {
  Fnv1a h;
  h.update_value(suite.config.k);
  for (const auto& t : suite.tasks) {
    h.update_value(t.id);
    h.update(scenegen::name_of(t.direction));
    h.update(t.subtask);
    h.update(t.query_caption);
    h.update_value(t.query_scene);
    for (const auto& c : t.candidate_captions) h.update(c).update("\n");
    for (auto c : t.candidate_scenes) h.update_value(c);
    h.update_value(t.gold);
  }
  for (const auto& img : suite.images) h.update(std::as_bytes(std::span(img.bytes)));
  return h.hex();
}

std::vector<InstanceErrors> score_suite(const itm::NoisePredictor& model, const TaskSuite& suite, Mode mode,
                                        const itm::NoiseBank& bank, int threads) {
  const auto tasks = applicable_tasks(suite, mode);
  if (bank.size() == 0) throw PreconditionError("noise bank is empty");
  for (std::size_t i : tasks) {
    const auto& t = suite.tasks[i];
    if (t.k() == 0 || t.gold >= t.k()) throw PreconditionError("task " + std::to_string(t.id) + " has no valid gold");
    std::vector<std::size_t> scenes = t.candidate_scenes;
    if (t.direction == Direction::kTextRetrieval) scenes.push_back(t.query_scene);
    for (auto c : scenes)
      if (c >= suite.images.size()) throw PreconditionError("task " + std::to_string(t.id) + " references a missing scene");
  }

  // Gray-image errors are per caption, so compute each distinct caption once.
  std::map<std::string, std::vector<double>> gray;
  if (mode == Mode::kTextGraynorm) {
    std::set<std::string> captions;
    for (std::size_t i : tasks)
      for (const auto& c : suite.tasks[i].candidate_captions) captions.insert(c);
    const Tensor gray_image = scenegen::to_chw(scenegen::gray_image());
    std::vector<itm::ErrorRequest> requests;
    for (const auto& c : captions) requests.push_back({&gray_image, TextInput::of(c)});
    auto e = itm::sample_errors(model, requests, bank, threads);
    std::size_t r = 0;
    for (const auto& c : captions) gray[c] = std::move(e[r++]);
  }

  std::vector<InstanceErrors> out(tasks.size());
  parallel_for(tasks.size(), threads, [&](std::size_t n) {
    const TaskInstance& t = suite.tasks[tasks[n]];
    InstanceErrors& ie = out[n];
    ie.task = tasks[n];
    ie.mode = mode;
    std::vector<itm::ErrorRequest> requests;
    if (t.direction == Direction::kTextRetrieval) {
      const Tensor image = scenegen::to_chw(suite.images[t.query_scene]);
      for (const auto& c : t.candidate_captions) requests.push_back({&image, TextInput::of(c)});
      if (mode == Mode::kText) requests.push_back({&image, TextInput::none()});
      auto e = itm::sample_errors(model, requests, bank, 1);
      for (std::size_t c = 0; c < t.k(); ++c) {
        ie.conditional.push_back(std::move(e[c]));
        ie.reference.push_back(mode == Mode::kText ? e[t.k()] : gray.at(t.candidate_captions[c]));
      }
    } else {
      std::vector<Tensor> images;
      for (auto s : t.candidate_scenes) images.push_back(scenegen::to_chw(suite.images[s]));
      const TextInput caption = TextInput::of(t.query_caption);
      for (const auto& img : images) {
        requests.push_back({&img, caption});
        requests.push_back({&img, TextInput::none()});
      }
      auto e = itm::sample_errors(model, requests, bank, 1);
      for (std::size_t c = 0; c < t.k(); ++c) {
        ie.conditional.push_back(std::move(e[2 * c]));
        ie.reference.push_back(std::move(e[2 * c + 1]));
      }
    }
  });
  return out;
}

Accuracy make_accuracy(std::size_t correct, std::size_t total) {
  if (correct > total) throw PreconditionError("more correct than total");
  Accuracy a;
  a.correct = correct;
  a.total = total;
  if (total == 0) {
    a.ci_high = 1.0;
    return a;
  }
  const double n = static_cast<double>(total);
  const double p = static_cast<double>(correct) / n;
  const double z2 = kZ95 * kZ95;
  const double denom = 1.0 + z2 / n;
  const double center = (p + z2 / (2.0 * n)) / denom;
  const double half = kZ95 * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  a.accuracy = p;
  a.ci_low = std::max(0.0, center - half);
  a.ci_high = std::min(1.0, center + half);
  return a;
}

SuiteResult rank_suite(const TaskSuite& suite, Mode mode, const std::vector<InstanceErrors>& errors,
                       std::uint64_t bank_seed, std::size_t bank_size) {
  if (errors.empty()) throw PreconditionError("no scored instances");
  std::size_t scored = errors.front().conditional.empty() ? 0 : errors.front().conditional.front().size();
  const std::size_t n = bank_size == 0 ? scored : bank_size;
  if (n == 0 || n > scored)
    throw PreconditionError("bank size " + std::to_string(n) + " outside the scored bank of " + std::to_string(scored));
  const std::string id = bank_id(n, bank_seed);
  std::vector<InstanceResult> instances;
  for (const auto& ie : errors) {
    if (!shares_errors(ie.mode, mode))
      throw PreconditionError("errors scored for mode " + std::string(name_of(ie.mode)) + " cannot be ranked as " +
                              std::string(name_of(mode)));
    const TaskInstance& t = task_at(suite, ie.task);
    if (ie.conditional.size() != t.k() || ie.reference.size() != t.k())
      throw PreconditionError("scored errors do not match task " + std::to_string(t.id));
    std::vector<ScoreRecord> records;
    for (std::size_t c = 0; c < t.k(); ++c) {
      if (ie.conditional[c].size() != scored || ie.reference[c].size() != scored)
        throw PreconditionError("instances were scored with different banks");
      records.push_back(itm::make_record(prefix_mean(ie.conditional[c], n), prefix_mean(ie.reference[c], n), id));
    }
    instances.push_back(make_instance(t, mode, std::move(records)));
  }
  SuiteResult s = summarize(suite, mode, std::move(instances));
  s.bank_id = id;
  return s;
}

SuiteResult run_suite(const TaskSuite& suite, Mode mode, const CandidateScorer& scorer) {
  std::vector<InstanceResult> instances;
  for (std::size_t i : applicable_tasks(suite, mode)) {
    const TaskInstance& t = suite.tasks[i];
    const auto scores = scorer(t);
    if (scores.size() != t.k())
      throw PreconditionError("scorer returned " + std::to_string(scores.size()) + " scores for " +
                              std::to_string(t.k()) + " candidates");
    std::vector<ScoreRecord> records;
    for (double v : scores) {
      if (!std::isfinite(v)) throw NumericError("scorer returned a non-finite score");
      records.push_back({v, 0.0, v, ""});
    }
    // Records hold the score in both fields, so every mode ranks by it.
    instances.push_back(make_instance(t, mode, std::move(records)));
  }
  return summarize(suite, mode, std::move(instances));
}

SuiteResult evaluate(const itm::NoisePredictor& model, const TaskSuite& suite, const EvalConfig& config,
                     std::vector<InstanceErrors>* errors_out) {
  if (config.bank_size == 0) throw PreconditionError("bank size must be positive");
  applicable_tasks(suite, config.mode);  // mismatch fails before the bank is drawn
  const auto bank = itm::make_bank(config.bank_size, config.bank_seed, diffusion::make_schedule());
  auto errors = score_suite(model, suite, config.mode, bank, config.threads);
  SuiteResult r = rank_suite(suite, config.mode, errors, config.bank_seed);
  if (errors_out) *errors_out = std::move(errors);
  return r;
}

std::vector<SweepPoint> sweep_bank_size(const TaskSuite& suite, Mode mode, const std::vector<InstanceErrors>& errors,
                                        const std::vector<std::size_t>& sizes, std::uint64_t bank_seed) {
  if (sizes.empty()) throw PreconditionError("no bank sizes to sweep");
  if (!std::is_sorted(sizes.begin(), sizes.end())) throw PreconditionError("bank sizes must be ascending");
  std::vector<SweepPoint> out;
  for (std::size_t n : sizes) out.push_back({n, rank_suite(suite, mode, errors, bank_seed, n).overall});
  return out;
}

Comparison compare(const std::vector<SuiteResult>& results, const std::vector<std::string>& labels,
                   std::uint64_t seed, std::size_t resamples) {
  if (results.empty()) throw PreconditionError("nothing to compare");
  if (labels.size() != results.size()) throw PreconditionError("one label per result is required");
  if (resamples == 0) throw PreconditionError("bootstrap needs at least one resample");
  const SuiteResult& base = results.front();
  for (const auto& r : results) {
    bool same = r.suite_id == base.suite_id && r.instances.size() == base.instances.size();
    for (std::size_t i = 0; same && i < r.instances.size(); ++i) same = r.instances[i].id == base.instances[i].id;
    if (!same) throw PreconditionError("results cover different suites or instances; cannot compare");
  }

  Comparison c;
  c.labels = labels;
  std::vector<std::string> names;
  for (const auto& s : scenegen::all_subtasks())
    if (base.per_subtask.count(s)) names.push_back(s);
  for (const auto& [s, a] : base.per_subtask)
    if (std::find(names.begin(), names.end(), s) == names.end()) names.push_back(s);
  names.push_back("overall");

  for (const auto& name : names) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < base.instances.size(); ++i)
      if (name == "overall" || base.instances[i].subtask == name) idx.push_back(i);
    ComparisonRow row;
    row.subtask = name;
    const Accuracy& a0 = name == "overall" ? base.overall : base.per_subtask.at(name);
    for (std::size_t j = 0; j < results.size(); ++j) {
      const Accuracy& aj = name == "overall" ? results[j].overall : results[j].per_subtask.at(name);
      row.accuracy.push_back(aj.accuracy);
      row.delta.push_back(aj.accuracy - a0.accuracy);
      row.separated.push_back(j > 0 && (aj.ci_low > a0.ci_high || aj.ci_high < a0.ci_low));
      if (j == 0) {
        row.delta_low.push_back(0.0);
        row.delta_high.push_back(0.0);
        continue;
      }
      // Paired bootstrap: resample instances, keep both results' outcomes.
      Rng rng = make_rng(derive_seed(derive_seed(seed, name), j));
      std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
      std::vector<double> deltas(resamples);
      for (auto& d : deltas) {
        long diff = 0;
        for (std::size_t m = 0; m < idx.size(); ++m) {
          const std::size_t i = idx[pick(rng)];
          diff += static_cast<long>(results[j].instances[i].correct) - static_cast<long>(base.instances[i].correct);
        }
        d = static_cast<double>(diff) / static_cast<double>(idx.size());
      }
      std::sort(deltas.begin(), deltas.end());
      const auto q = [&](double p) {
        return deltas[static_cast<std::size_t>(std::floor(p * static_cast<double>(resamples - 1)))];
      };
      row.delta_low.push_back(q(0.025));
      row.delta_high.push_back(q(0.975));
    }
    c.rows.push_back(std::move(row));
  }

  ComparisonRow chance;
  chance.subtask = "chance";
  for (const auto& r : results) {
    chance.accuracy.push_back(r.chance);
    chance.delta.push_back(r.chance - base.chance);
    chance.delta_low.push_back(0.0);
    chance.delta_high.push_back(0.0);
    chance.separated.push_back(false);
  }
  c.rows.push_back(std::move(chance));
  return c;
}

std::string to_markdown(const Comparison& c) {
  std::ostringstream out;
  out << "| subtask |";
  for (const auto& l : c.labels) out << ' ' << l << " |";
  for (std::size_t j = 1; j < c.labels.size(); ++j) out << " delta " << c.labels[j] << " (95% CI) |";
  out << "\n|---|";
  for (std::size_t j = 0; j + 1 < 2 * c.labels.size(); ++j) out << "---|";
  out << '\n';
  for (const auto& r : c.rows) {
    out << "| " << r.subtask << " |";
    for (double a : r.accuracy) out << ' ' << pct(a) << " |";
    for (std::size_t j = 1; j < c.labels.size(); ++j) {
      out << ' ' << (r.delta[j] >= 0 ? "+" : "") << pct(r.delta[j]);
      if (r.subtask != "chance") out << " [" << pct(r.delta_low[j]) << ", " << pct(r.delta_high[j]) << "]";
      if (r.separated[j]) out << " *";
      out << " |";
    }
    out << '\n';
  }
  out << "\nAccuracies in percent. * marks Wilson 95% intervals that do not overlap the first column's.\n";
  return out.str();
}

std::string to_csv(const Comparison& c) {
  std::ostringstream out;
  out << "subtask,label,accuracy,delta,delta_low,delta_high,separated\n";
  for (const auto& r : c.rows)
    for (std::size_t j = 0; j < c.labels.size(); ++j)
      out << r.subtask << ',' << c.labels[j] << ',' << fmt(r.accuracy[j]) << ',' << fmt(r.delta[j]) << ','
          << fmt(r.delta_low[j]) << ',' << fmt(r.delta_high[j]) << ',' << (r.separated[j] ? 1 : 0) << '\n';
  return out.str();
}

void write_result(const SuiteResult& r, const std::filesystem::path& path) {
  json j;
  j["mode"] = r.mode;
  j["suite_id"] = r.suite_id;
  j["bank_id"] = r.bank_id;
  j["chance"] = r.chance;
  j["overall"] = accuracy_json(r.overall);
  j["per_subtask"] = json::object();
  for (const auto& [name, a] : r.per_subtask) j["per_subtask"][name] = accuracy_json(a);
  j["degenerate"] = r.degenerate;
  j["instances"] = json::array();
  for (const auto& i : r.instances) {
    json recs = json::array();
    for (const auto& rec : i.records)
      recs.push_back({{"conditional", rec.conditional}, {"unconditional", rec.unconditional},
                      {"normalized", rec.normalized}});
    j["instances"].push_back({{"id", i.id},
                              {"subtask", i.subtask},
                              {"gold", i.gold},
                              {"ranking", i.ranking},
                              {"gold_rank", i.gold_rank},
                              {"correct", i.correct},
                              {"degenerate", i.degenerate},
                              {"records", recs}});
  }
  write_text_atomic(path, j.dump(1) + "\n");
}

SuiteResult read_result(const std::filesystem::path& path) {
  try {
    const json j = json::parse(read_text(path));
    SuiteResult r;
    r.mode = j.at("mode").get<std::string>();
    r.suite_id = j.at("suite_id").get<std::string>();
    r.bank_id = j.at("bank_id").get<std::string>();
    r.chance = j.at("chance").get<double>();
    r.overall = accuracy_from(j.at("overall"));
    for (const auto& [name, a] : j.at("per_subtask").items()) r.per_subtask[name] = accuracy_from(a);
    r.degenerate = j.at("degenerate").get<std::size_t>();
    for (const auto& ji : j.at("instances")) {
      InstanceResult i;
      i.id = ji.at("id").get<std::size_t>();
      i.subtask = ji.at("subtask").get<std::string>();
      i.gold = ji.at("gold").get<std::size_t>();
      i.ranking = ji.at("ranking").get<std::vector<std::size_t>>();
      i.gold_rank = ji.at("gold_rank").get<std::size_t>();
      i.correct = ji.at("correct").get<bool>();
      i.degenerate = ji.at("degenerate").get<bool>();
      for (const auto& jr : ji.at("records"))
        i.records.push_back({jr.at("conditional").get<double>(), jr.at("unconditional").get<double>(),
                             jr.at("normalized").get<double>(), r.bank_id});
      r.instances.push_back(std::move(i));
    }
    return r;
  } catch (const json::exception& e) {
    throw IoError("malformed result " + path.string() + ": " + e.what());
  }
}

void write_score_dump(const SuiteResult& r, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "instance_id,subtask,candidate_id,is_gold,conditional,unconditional,normalized,rank,bank_id\n";
  for (const auto& i : r.instances) {
    std::vector<std::size_t> rank(i.records.size());
    for (std::size_t p = 0; p < i.ranking.size(); ++p) rank[i.ranking[p]] = p + 1;
    for (std::size_t c = 0; c < i.records.size(); ++c) {
      const auto& rec = i.records[c];
      out << i.id << ',' << i.subtask << ',' << c << ',' << (c == i.gold ? 1 : 0) << ',' << fmt(rec.conditional) << ','
          << fmt(rec.unconditional) << ',' << fmt(rec.normalized) << ',' << rank[c] << ",\"" << r.bank_id << "\"\n";
    }
  }
  write_text_atomic(path, out.str());
}

void write_sweep_csv(const std::vector<SweepPoint>& curve, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "bank_size,correct,total,accuracy,ci_low,ci_high\n";
  for (const auto& p : curve)
    out << p.bank_size << ',' << p.accuracy.correct << ',' << p.accuracy.total << ',' << fmt(p.accuracy.accuracy) << ','
        << fmt(p.accuracy.ci_low) << ',' << fmt(p.accuracy.ci_high) << '\n';
  write_text_atomic(path, out.str());
}

}  // namespace ditm::bench
