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

#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "ditm/bench/bench.hpp"
#include "ditm/bias/bias.hpp"
#include "ditm/common/error.hpp"
#include "ditm/common/fileio.hpp"
#include "ditm/common/hash.hpp"
#include "ditm/common/rng.hpp"
#include "ditm/diffusion/schedule.hpp"
#include "ditm/diffusion/train.hpp"
#include "ditm/hardneg/finetune.hpp"
#include "ditm/numerics/checkpoint.hpp"
#include "ditm/scenegen/dataset.hpp"
#include "ditm/scenegen/tasks.hpp"

namespace ditm::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kEnvPrefix = "DITM_";

std::string env_name(const std::string& key) {
  std::string s = kEnvPrefix;
  for (char c : key) s += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

template <typename T>
std::string to_text(const T& v) {
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, fs::path>) {
    return v.string();
  } else if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_floating_point_v<T>) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
  } else {
    return std::to_string(v);
  }
}

/// Everything a subcommand needs: its CLI11 app, the resolved settings in
/// declaration order (for printing and the manifest), and its action.
struct Command {
  CLI::App* app = nullptr;
  std::vector<std::pair<std::string, std::function<std::string()>>> settings;
  std::map<std::string, bool> is_flag;
  std::vector<std::string> input_keys;  // settings naming input files or directories
  std::function<void(std::ostream&)> action;

  template <typename T>
  CLI::Option* option(const std::string& key, T& var, const std::string& help) {
    auto* o = app->add_option("--" + key, var, help)->envname(env_name(key))->capture_default_str();
    settings.emplace_back(key, [&var] { return to_text(var); });
    is_flag[key] = false;
    return o;
  }
  CLI::Option* flag(const std::string& key, bool& var, const std::string& help) {
    auto* o = app->add_flag("--" + key, var, help)->envname(env_name(key));
    settings.emplace_back(key, [&var] { return to_text(var); });
    is_flag[key] = true;
    return o;
  }
  std::string value(const std::string& key) const {
    for (const auto& [k, get] : settings)
      if (k == key) return get();
    return "";
  }
};

struct Common {
  std::uint64_t seed = 0;
  fs::path out;
  int threads = 1;
  fs::path config;
};

void add_common(Command& c, Common& common, bool needs_out = true) {
  c.option("seed", common.seed, "root seed; every other seed derives from it");
  auto* o = c.option("out", common.out, "output directory");
  if (needs_out) o->required();
  c.option("threads", common.threads, "worker threads (1 = serial reference mode)")->check(CLI::PositiveNumber);
  c.app->add_option("--config", common.config, "flat key = value file of option defaults")
      ->check(CLI::ExistingFile);
}

std::map<std::string, std::string> read_flat_config(const fs::path& path) {
  std::map<std::string, std::string> kv;
  std::istringstream in(read_text(path));
  std::string line;
  std::size_t n = 0;
  const auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++n;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CLI::ValidationError(path.string() + ":" + std::to_string(n) + ": expected key = value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

bool given_on_command_line(const std::vector<std::string>& args, const std::string& key) {
  const std::string flag = "--" + key;
  return std::any_of(args.begin(), args.end(),
                     [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

/// Precedence: command line, then DITM_* environment, then the config file,
/// then built-in defaults.
std::vector<std::string> with_config(const Command& c, std::vector<std::string> args, const fs::path& path) {
  for (const auto& [key, value] : read_flat_config(path)) {
    if (key == "command") continue;
    if (!c.is_flag.count(key)) throw CLI::ValidationError("config key '" + key + "' is not an option of this command");
    if (given_on_command_line(args, key) || std::getenv(env_name(key).c_str())) continue;
    if (c.is_flag.at(key)) {
      if (value == "true") args.push_back("--" + key);
      else if (value != "false") throw CLI::ValidationError("config key '" + key + "' must be true or false");
    } else {
      args.push_back("--" + key);
      args.push_back(value);
    }
  }
  return args;
}

std::optional<fs::path> config_path(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return fs::path(args[i + 1]);
    if (args[i].rfind("--config=", 0) == 0) return fs::path(args[i].substr(9));
  }
  if (const char* e = std::getenv("DITM_CONFIG")) return fs::path(e);
  return std::nullopt;
}

std::map<std::string, std::string> hash_tree(const fs::path& root, const std::vector<std::string>& skip = {}) {
  std::map<std::string, std::string> out;
  if (fs::is_regular_file(root)) {
    out[root.string()] = hash_file(root);
    return out;
  }
  if (!fs::is_directory(root)) return out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), root).generic_string();
    if (std::find(skip.begin(), skip.end(), rel) != skip.end() || rel.ends_with(".tmp")) continue;
    out[rel] = hash_file(e.path());
  }
  return out;
}

/// Written when a run starts and rewritten when it ends.
class RunManifest {
 public:
  RunManifest(std::string command, const Command& c, fs::path out) : command_(std::move(command)), out_(std::move(out)) {
    for (const auto& [k, get] : c.settings) config_.emplace_back(k, get());
    for (const auto& k : c.input_keys)
      if (const std::string v = c.value(k); !v.empty()) inputs_[k] = v;
    start_ = std::chrono::steady_clock::now();
  }

  void begin() {
    fs::create_directories(out_);
    std::ostringstream cfg;
    cfg << "# ditm " << command_ << "; rerun with: ditm " << command_ << " --config <this file>\n";
    for (const auto& [k, v] : config_) cfg << k << " = " << v << '\n';
    write_text_atomic(out_ / "run.cfg", cfg.str());
    write("running", "");
  }
  void finish(const std::string& status, const std::string& error) { write(status, error); }

 private:
  void write(const std::string& status, const std::string& error) {
    json j;
    j["command"] = command_;
    j["status"] = status;
    if (!error.empty()) j["error"] = error;
    j["config"] = json::object();
    json seeds = json::object();
    for (const auto& [k, v] : config_) {
      j["config"][k] = v;
      if (k.find("seed") != std::string::npos) seeds[k] = v;
    }
    j["seeds"] = seeds;
    json inputs = json::object();
    for (const auto& [k, path] : inputs_) inputs[k] = {{"path", path}, {"hashes", hash_tree(path)}};
    j["inputs"] = inputs;
    j["outputs"] = status == "running" ? json::object() : json(hash_tree(out_, {"manifest.json", "run.cfg"}));
    j["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write_text_atomic(out_ / "manifest.json", j.dump(1) + "\n");
  }

  std::string command_;
  fs::path out_;
  std::vector<std::pair<std::string, std::string>> config_;
  std::map<std::string, std::string> inputs_;
  std::chrono::steady_clock::time_point start_;
};

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || v == 0) throw CLI::ValidationError("--sizes", "expected positive integers, got '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw CLI::ValidationError("--sizes", "no sizes given");
  return out;
}

void print_accuracy(std::ostream& out, const std::string& name, const bench::Accuracy& a) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "  %-20s %6.2f%%  (%zu/%zu, 95%% CI %.2f-%.2f)\n", name.c_str(), 100 * a.accuracy,
                a.correct, a.total, 100 * a.ci_low, 100 * a.ci_high);
  out << buf;
}

void print_result(std::ostream& out, const bench::SuiteResult& r) {
  out << "mode " << r.mode << ", bank " << r.bank_id << ", chance " << 100 * r.chance << "%\n";
  for (const auto& s : scenegen::all_subtasks())
    if (r.per_subtask.count(s)) print_accuracy(out, s, r.per_subtask.at(s));
  print_accuracy(out, "overall", r.overall);
  if (r.degenerate) out << "  " << r.degenerate << " instances tied on every candidate\n";
}

std::string group_label(const bench::SuiteResult& r) {
  return std::string(scenegen::name_of(bench::direction_of(bench::mode_from(r.mode)))) + " (suite " + r.suite_id + ")";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Diffusion image-text matching lab: data, training, scoring, finetuning and bias tests.", "ditm"};
  app.require_subcommand(1);
  app.footer(std::string("Every option can also be set through the environment as ") + kEnvPrefix +
             "<OPTION> (dashes become underscores), or in a --config file of 'key = value' lines.\n"
             "Exit codes: 0 success, 1 usage error, 2 runtime failure.");

  std::map<std::string, Command> commands;
  Common common;

  // generate
  scenegen::DatasetConfig data_cfg;
  scenegen::TaskConfig task_cfg;
  {
    Command& c = commands["generate"];
    c.app = app.add_subcommand("generate", "build the training dataset and the task suite");
    add_common(c, common);
    c.option("n-train", data_cfg.n_train, "training records")->check(CLI::PositiveNumber);
    c.option("n-val", data_cfg.n_val, "validation records")->check(CLI::PositiveNumber);
    c.option("n-per-subtask", task_cfg.n_per_subtask, "suite instances per subtask and direction")
        ->check(CLI::PositiveNumber);
    c.option("k", task_cfg.k, "candidates per instance")->check(CLI::Range(2, 16));
    c.option("nuisance-rate", task_cfg.nuisance_rate, "chance of a resize/move edit per image candidate")
        ->check(CLI::Range(0.0, 1.0));
    c.action = [&](std::ostream& o) {
      data_cfg.seed = derive_seed(common.seed, "data");
      task_cfg.seed = derive_seed(common.seed, "tasks");
      data_cfg.threads = task_cfg.threads = common.threads;
      const auto data = scenegen::build_dataset(data_cfg);
      scenegen::write_dataset(data, common.out / "dataset");
      const auto suite = scenegen::build_tasks(task_cfg);
      scenegen::write_suite(suite, common.out / "suite");
      o << "dataset: " << data.records.size() << " records -> " << (common.out / "dataset").string() << '\n'
        << "suite: " << suite.tasks.size() << " instances -> " << (common.out / "suite").string() << '\n';
    };
  }

  // train
  diffusion::TrainConfig train_cfg;
  fs::path dataset_dir;
  {
    Command& c = commands["train"];
    c.app = app.add_subcommand("train", "train the conditional denoiser from scratch");
    add_common(c, common);
    c.option("dataset", dataset_dir, "dataset directory (from generate)")->required()->check(CLI::ExistingDirectory);
    c.input_keys = {"dataset"};
    c.option("epochs", train_cfg.epochs, "training epochs")->check(CLI::PositiveNumber);
    c.option("lr", train_cfg.lr, "Adam learning rate")->check(CLI::PositiveNumber);
    c.option("batch-size", train_cfg.batch_size, "examples per step")->check(CLI::PositiveNumber);
    c.option("p-uncond", train_cfg.p_uncond, "probability of dropping the caption")->check(CLI::Range(0.0, 0.999999));
    c.option("width", train_cfg.model.width, "base channel width (multiple of 4)")->check(CLI::PositiveNumber);
    c.flag("resume", train_cfg.resume, "continue after the newest complete epoch in --out");
    c.action = [&](std::ostream& o) {
      const auto data = scenegen::read_dataset(dataset_dir);
      train_cfg.seed = common.seed;
      train_cfg.threads = common.threads;
      train_cfg.out_dir = common.out;
      train_cfg.on_epoch = [&o](std::size_t e, double tl, double vl) {
        o << "epoch " << e << " train_loss " << tl << " val_loss " << vl << std::endl;
      };
      const auto r = diffusion::train(train_cfg, data);
      o << "initial val_loss " << r.initial_val_loss << "; model -> " << (common.out / "model.ckpt").string() << '\n';
    };
  }

  // finetune
  hardneg::HardNegConfig ft_cfg;
  fs::path checkpoint;
  std::string lambda_text;
  bool no_neg = false, no_clip = false;
  {
    Command& c = commands["finetune"];
    c.app = app.add_subcommand("finetune", "hard-negative finetuning of the text/FiLM adapter");
    add_common(c, common);
    c.option("dataset", dataset_dir, "dataset directory (from generate)")->required()->check(CLI::ExistingDirectory);
    c.option("checkpoint", checkpoint, "base model checkpoint")->required()->check(CLI::ExistingFile);
    c.input_keys = {"dataset", "checkpoint"};
    c.option("lambda", lambda_text, "relative clip factor for the negative term (required unless --no-neg)");
    c.flag("no-neg", no_neg, "positives only (ablation)");
    c.flag("no-clip", no_clip, "unclipped negative term (ablation; unstable)");
    c.option("epochs", ft_cfg.epochs, "finetuning epochs")->check(CLI::PositiveNumber);
    c.option("lr", ft_cfg.lr, "Adam learning rate")->check(CLI::PositiveNumber);
    c.option("batch-size", ft_cfg.batch_size, "examples per step")->check(CLI::PositiveNumber);
    c.option("val-records", ft_cfg.val_records, "validation records for epoch selection")->check(CLI::PositiveNumber);
    c.option("bank-size", ft_cfg.val_bank_size, "noise samples per validation score")->check(CLI::PositiveNumber);
    c.option("bank-seed", ft_cfg.val_bank_seed, "validation noise bank seed");
    c.action = [&](std::ostream& o) {
      const auto base = numerics::load_checkpoint(checkpoint);
      const auto data = scenegen::read_dataset(dataset_dir);
      ft_cfg.seed = common.seed;
      ft_cfg.threads = common.threads;
      ft_cfg.out_dir = common.out;
      ft_cfg.on_epoch = [&o](std::size_t e, double acc) {
        o << "epoch " << e << " val_accuracy " << acc << std::endl;
      };
      const auto r = hardneg::finetune(ft_cfg, base, data);
      const auto sanity = hardneg::generative_sanity(base, r.params, data, common.seed, common.threads);
      json s = {{"loss_before", sanity.loss_before},
                {"loss_after", sanity.loss_after},
                {"ratio", sanity.ratio},
                {"flagged", sanity.flagged}};
      write_text_atomic(common.out / "sanity.json", s.dump(1) + "\n");
      o << "base val_accuracy " << r.report.base_val_accuracy << ", selected epoch " << r.report.selected_epoch
        << ", generative sanity ratio " << sanity.ratio << (sanity.flagged ? " (FLAGGED)" : "") << '\n';
    };
  }

  // eval / sweep share these
  fs::path suite_dir;
  std::string mode_name = "text";
  bench::EvalConfig eval_cfg;
  const auto add_eval = [&](Command& c) {
    add_common(c, common);
    c.option("suite", suite_dir, "task suite directory (from generate)")->required()->check(CLI::ExistingDirectory);
    c.option("checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
    c.input_keys = {"suite", "checkpoint"};
    c.option("mode", mode_name, "text | image-naive | image-normalized | text-graynorm")
        ->check(CLI::IsMember({"text", "image-naive", "image-normalized", "text-graynorm"}));
    c.option("bank-seed", eval_cfg.bank_seed, "noise bank seed");
  };
  {
    Command& c = commands["eval"];
    c.app = app.add_subcommand("eval", "score a task suite");
    add_eval(c);
    c.option("bank-size", eval_cfg.bank_size, "noise samples per score")->check(CLI::PositiveNumber);
    c.action = [&](std::ostream& o) {
      const auto suite = scenegen::read_suite(suite_dir);
      const auto params = numerics::load_checkpoint(checkpoint);
      itm::DenoiserPredictor model(params);
      eval_cfg.mode = bench::mode_from(mode_name);
      eval_cfg.threads = common.threads;
      const auto r = bench::evaluate(model, suite, eval_cfg);
      bench::write_result(r, common.out / "result.json");
      bench::write_score_dump(r, common.out / "scores.csv");
      print_result(o, r);
    };
  }
  std::string sizes_text = "1,5,10,25,50,100";
  {
    Command& c = commands["sweep"];
    c.app = app.add_subcommand("sweep", "accuracy against noise bank size (nested banks)");
    add_eval(c);
    c.option("sizes", sizes_text, "ascending bank sizes, comma separated");
    c.action = [&](std::ostream& o) {
      const auto sizes = parse_sizes(sizes_text);
      if (!std::is_sorted(sizes.begin(), sizes.end())) throw CLI::ValidationError("--sizes", "sizes must be ascending");
      const auto suite = scenegen::read_suite(suite_dir);
      const auto params = numerics::load_checkpoint(checkpoint);
      itm::DenoiserPredictor model(params);
      eval_cfg.mode = bench::mode_from(mode_name);
      eval_cfg.threads = common.threads;
      eval_cfg.bank_size = sizes.back();
      std::vector<bench::InstanceErrors> errors;
      const auto full = bench::evaluate(model, suite, eval_cfg, &errors);
      const auto curve = bench::sweep_bank_size(suite, eval_cfg.mode, errors, sizes, eval_cfg.bank_seed);
      bench::write_sweep_csv(curve, common.out / "sweep.csv");
      bench::write_result(full, common.out / "result.json");
      for (const auto& p : curve) print_accuracy(o, "bank " + std::to_string(p.bank_size), p.accuracy);
    };
  }

  // bias
  fs::path bias_config_path;
  std::size_t noise_samples = 0;
  {
    Command& c = commands["bias"];
    c.app = app.add_subcommand("bias", "association effect sizes with permutation tests");
    add_common(c, common);
    c.option("checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
    c.option("bias-config", bias_config_path, "bias suite JSON (default: built-in synthetic groups)")
        ->check(CLI::ExistingFile);
    c.input_keys = {"checkpoint", "bias-config"};
    c.option("noise-samples", noise_samples, "noise samples per score (0: the suite's value, 20 by default)");
    c.option("bank-seed", eval_cfg.bank_seed, "noise bank seed");
    c.action = [&](std::ostream& o) {
      bias::BiasSuiteConfig cfg =
          bias_config_path.empty() ? bias::default_bias_config() : bias::read_bias_config(bias_config_path);
      if (noise_samples > 0) cfg.noise_samples = noise_samples;
      cfg.bank_seed = eval_cfg.bank_seed;
      cfg.permutation.seed = derive_seed(common.seed, "permutation");
      bias::write_bias_config(cfg, common.out / "bias_config.json");
      const auto params = numerics::load_checkpoint(checkpoint);
      itm::DenoiserPredictor model(params);
      const auto bank = itm::make_bank(cfg.noise_samples, cfg.bank_seed, diffusion::make_schedule());
      const auto table = bias::bias_suite(cfg, bias::diffusion_scorer(model, bank), common.threads);
      write_text_atomic(common.out / "bias.csv", bias::to_csv(table));
      write_text_atomic(common.out / "bias.md", bias::to_markdown(table));
      o << bias::to_markdown(table);
    };
  }

  // report
  std::vector<fs::path> report_inputs;
  std::string labels_text;
  {
    Command& c = commands["report"];
    c.app = app.add_subcommand("report", "side-by-side tables from eval results");
    add_common(c, common);
    c.app->add_option("inputs", report_inputs, "result.json files or eval output directories");
    c.option("labels", labels_text, "comma-separated column labels (default: directory names)");
    c.action = [&](std::ostream& o) {
      std::vector<fs::path> files;
      for (const auto& p : report_inputs) {
        if (fs::is_directory(p) && fs::exists(p / "result.json")) files.push_back(p / "result.json");
        else if (fs::is_regular_file(p)) files.push_back(p);
        else throw IoError("no eval result at " + p.string());
      }
      if (files.empty()) throw PreconditionError("report needs at least one eval result; nothing to tabulate");
      std::vector<std::string> labels;
      if (!labels_text.empty()) {
        std::stringstream ss(labels_text);
        for (std::string l; std::getline(ss, l, ',');) labels.push_back(l);
        if (labels.size() != files.size()) throw PreconditionError("--labels needs one label per input");
      } else {
        for (const auto& f : files) labels.push_back(fs::absolute(f).parent_path().filename().string());
      }
      // One table per (direction, suite); results of different suites are not comparable.
      std::vector<std::string> order;
      std::map<std::string, std::pair<std::vector<bench::SuiteResult>, std::vector<std::string>>> groups;
      for (std::size_t i = 0; i < files.size(); ++i) {
        auto r = bench::read_result(files[i]);
        const std::string g = group_label(r);
        if (!groups.count(g)) order.push_back(g);
        groups[g].first.push_back(std::move(r));
        groups[g].second.push_back(labels[i]);
      }
      std::ostringstream md, csv;
      md << "# Retrieval accuracy\n";
      csv << "group,";
      bool header = false;
      for (const auto& g : order) {
        const auto& [results, ls] = groups[g];
        const auto cmp = bench::compare(results, ls, derive_seed(common.seed, "bootstrap"));
        md << "\n## " << g << "\n\n" << bench::to_markdown(cmp);
        std::istringstream rows(bench::to_csv(cmp));
        std::string line;
        std::getline(rows, line);
        if (!header) {
          csv << line << '\n';
          header = true;
        }
        while (std::getline(rows, line)) csv << '"' << g << "\"," << line << '\n';
      }
      write_text_atomic(common.out / "report.md", md.str());
      write_text_atomic(common.out / "report.csv", csv.str());
      o << md.str();
    };
  }

  for (auto& [name, c] : commands) c.app->usage("Usage: ditm " + name + (name == "report" ? " [OPTIONS] [inputs...]" : " [OPTIONS]"));

  // Resolve --config before parsing so its values act as defaults.
  std::vector<std::string> final_args = args;
  try {
    if (!args.empty() && commands.count(args[0]))
      if (auto path = config_path(args)) {
        if (!fs::is_regular_file(*path)) throw CLI::ValidationError("--config", "no such file " + path->string());
        final_args = with_config(commands[args[0]], args, *path);
      }
    std::vector<std::string> argv_store = {"ditm"};
    argv_store.insert(argv_store.end(), final_args.begin(), final_args.end());
    std::vector<const char*> argv;
    for (const auto& a : argv_store) argv.push_back(a.c_str());
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << (final_args.empty() || !commands.count(final_args[0]) ? app.help() : commands[final_args[0]].app->help());
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    err << (!args.empty() && commands.count(args[0]) ? commands[args[0]].app->help() : app.help());
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  Command& cmd = commands.at(name);
  if (name == "finetune") {
    if (no_neg) {
      ft_cfg.loss.use_negatives = false;
    } else if (lambda_text.empty()) {
      err << "error: finetune needs --lambda (e.g. --lambda -1.0) unless --no-neg is given\n";
      return kUsage;
    }
    if (!lambda_text.empty()) {
      try {
        std::size_t pos = 0;
        ft_cfg.loss.lambda = std::stod(lambda_text, &pos);
        if (pos != lambda_text.size()) throw std::invalid_argument("trailing text");
      } catch (const std::exception&) {
        err << "error: --lambda expects a number, got '" << lambda_text << "'\n";
        return kUsage;
      }
    }
    ft_cfg.loss.clip = !no_clip;
  }

  out << "ditm " << name << '\n';
  for (const auto& [k, get] : cmd.settings) out << "  " << k << " = " << get() << '\n';
  std::unique_ptr<RunManifest> manifest;
  try {
    manifest = std::make_unique<RunManifest>(name, cmd, common.out);
    manifest->begin();
    cmd.action(out);
    manifest->finish("ok", "");
    return kOk;
  } catch (const CLI::ValidationError& e) {
    if (manifest) manifest->finish("failed", e.what());
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    try {
      if (manifest) manifest->finish("failed", e.what());
    } catch (const std::exception&) {
    }
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace ditm::cli
