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

#include "ditm/bias/bias.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ditm/common/error.hpp"
#include "ditm/common/fileio.hpp"
#include "ditm/common/parallel.hpp"
#include "ditm/common/rng.hpp"
#include "ditm/scenegen/caption.hpp"
#include "ditm/scenegen/io.hpp"

namespace ditm::bias {

namespace {

using nlohmann::json;
using scenegen::SceneSpec;

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// psi from sigma values already laid out as A then B.
double psi_from(std::span<const double> sa, std::span<const double> sb) { return mean_of(sa) - mean_of(sb); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void require_sets(const BiasSpec& spec) {
  if (spec.X.empty() || spec.Y.empty()) throw PreconditionError("target groups X and Y must be nonempty");
  if (spec.A.empty() || spec.B.empty()) throw PreconditionError("attribute sets A and B must be nonempty");
  for (const auto& x : spec.X)
    for (const auto& y : spec.Y)
      if (x == y) throw PreconditionError("target groups X and Y share an image");
}

// sigma for every (image, caption) pair, computed once each.
std::vector<std::vector<double>> sigma_matrix(const std::vector<const Image*>& images,
                                              const std::vector<std::string>& captions, const PairScorer& sigma,
                                              int threads, const std::function<std::string(std::size_t)>& label) {
  std::vector<std::vector<double>> m(images.size(), std::vector<double>(captions.size()));
  parallel_for(images.size() * captions.size(), threads, [&](std::size_t k) {
    const std::size_t i = k / captions.size(), c = k % captions.size();
    double v = 0.0;
    try {
      v = sigma(*images[i], captions[c]);
    } catch (const std::exception& e) {
      throw Error("scoring " + label(i) + " against \"" + captions[c] + "\": " + e.what());
    }
    if (!std::isfinite(v)) throw NumericError("non-finite score for " + label(i) + " and \"" + captions[c] + "\"");
    m[i][c] = v;
  });
  return m;
}

std::vector<double> psi_rows(const std::vector<std::vector<double>>& m, std::size_t n_a) {
  std::vector<double> out;
  for (const auto& row : m)
    out.push_back(psi_from(std::span(row).subspan(0, n_a), std::span(row).subspan(n_a)));
  return out;
}

json item_json(const GroupItem& g) {
  return {{"scene", scenegen::scene_to_json(g.scene)}, {"render_seed", g.render_seed}};
}

}  // namespace

PairScorer diffusion_scorer(const itm::NoisePredictor& model, const itm::NoiseBank& bank) {
  return [&model, &bank](const Image& img, const std::string& caption) {
    const numerics::Tensor x = scenegen::to_chw(img);
    return -itm::score(model, x, itm::TextInput::of(caption), bank, 1).normalized;
  };
}

double psi(const Image& item, std::span<const std::string> A, std::span<const std::string> B,
           const PairScorer& sigma) {
  if (A.empty() || B.empty()) throw PreconditionError("attribute sets A and B must be nonempty");
  std::vector<double> sa, sb;
  for (const auto& a : A) sa.push_back(sigma(item, a));
  for (const auto& b : B) sb.push_back(sigma(item, b));
  return psi_from(sa, sb);
}

std::vector<double> psi_values(const BiasSpec& spec, const PairScorer& sigma, int threads) {
  require_sets(spec);
  std::vector<const Image*> images;
  for (const auto& x : spec.X) images.push_back(&x);
  for (const auto& y : spec.Y) images.push_back(&y);
  std::vector<std::string> captions = spec.A;
  captions.insert(captions.end(), spec.B.begin(), spec.B.end());
  const std::size_t nx = spec.X.size();
  const auto m = sigma_matrix(images, captions, sigma, threads, [nx](std::size_t i) {
    return i < nx ? "X[" + std::to_string(i) + "]" : "Y[" + std::to_string(i - nx) + "]";
  });
  return psi_rows(m, spec.A.size());
}

double effect_size(std::span<const double> psi_x, std::span<const double> psi_y) {
  if (psi_x.empty() || psi_y.empty()) throw PreconditionError("effect size needs both groups nonempty");
  std::vector<double> pooled(psi_x.begin(), psi_x.end());
  pooled.insert(pooled.end(), psi_y.begin(), psi_y.end());
  // Sorted so the pooled sums do not depend on which group came first; that
  // makes d(X,Y) = -d(Y,X) exact.
  std::sort(pooled.begin(), pooled.end());
  const double m = mean_of(pooled);
  double ss = 0.0;
  for (double v : pooled) ss += (v - m) * (v - m);
  const double sd = std::sqrt(ss / static_cast<double>(pooled.size() - 1));
  if (!(sd > 0.0) || !std::isfinite(sd))
    throw DegenerateError("pooled standard deviation of psi is zero; effect size undefined");
  return (mean_of(psi_x) - mean_of(psi_y)) / sd;
}

double effect_size(const BiasSpec& spec, const PairScorer& sigma, int threads) {
  const auto p = psi_values(spec, sigma, threads);
  const std::span<const double> all(p);
  return effect_size(all.subspan(0, spec.X.size()), all.subspan(spec.X.size()));
}

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::uint64_t r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    // r * (n - k + i) / i stays integral; check the multiplication.
    const std::uint64_t f = n - k + i;
    if (r > std::numeric_limits<std::uint64_t>::max() / f) return std::numeric_limits<std::uint64_t>::max();
    r = r * f / i;
  }
  return r;
}

PermutationResult permutation_test(std::span<const double> psi_x, std::span<const double> psi_y,
                                   const PermutationOptions& options) {
  if (psi_x.empty() || psi_y.empty()) throw PreconditionError("permutation test needs both groups nonempty");
  if (options.n_mc == 0) throw PreconditionError("Monte Carlo permutation count must be positive");
  std::vector<double> v(psi_x.begin(), psi_x.end());
  v.insert(v.end(), psi_y.begin(), psi_y.end());
  const std::size_t n = v.size(), nx = psi_x.size();
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  const auto stat = [&](double sum_x) {
    return sum_x / static_cast<double>(nx) - (total - sum_x) / static_cast<double>(n - nx);
  };
  double sum_x = 0.0;
  for (std::size_t i = 0; i < nx; ++i) sum_x += v[i];
  double scale = 0.0;
  for (double x : v) scale = std::max(scale, std::abs(x));
  const double threshold = stat(sum_x) - 1e-12 * scale;

  PermutationResult r;
  const std::uint64_t count = binomial(n, nx);
  if (count <= options.max_exact) {
    // Depth-first over index subsets; sums accumulate in index order, so the
    // identity subset reproduces the observed statistic exactly.
    std::uint64_t hits = 0;
    const std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t start, std::size_t left,
                                                                            double sum) {
      if (left == 0) {
        hits += stat(sum) >= threshold;
        return;
      }
      for (std::size_t i = start; i + left <= n; ++i) walk(i + 1, left - 1, sum + v[i]);
    };
    walk(0, nx, 0.0);
    r.exact = true;
    r.n_permutations = count;
    r.p_value = static_cast<double>(hits) / static_cast<double>(count);
    return r;
  }
  Rng rng = make_rng(options.seed);
  std::vector<std::size_t> idx(n);
  std::uint64_t hits = 1;  // the identity relabeling
  for (std::size_t m = 1; m < options.n_mc; ++m) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    double s = 0.0;
    for (std::size_t i = 0; i < nx; ++i) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(i, n - 1)(rng);
      std::swap(idx[i], idx[j]);
      s += v[idx[i]];
    }
    hits += stat(s) >= threshold;
  }
  r.exact = false;
  r.n_permutations = options.n_mc;
  r.p_value = static_cast<double>(hits) / static_cast<double>(options.n_mc);
  return r;
}

EffectSizeResult evaluate(const BiasSpec& spec, const PairScorer& sigma, const PermutationOptions& options,
                          int threads) {
  EffectSizeResult r;
  r.psi = psi_values(spec, sigma, threads);
  const std::span<const double> all(r.psi);
  const auto px = all.subspan(0, spec.X.size()), py = all.subspan(spec.X.size());
  r.d = effect_size(px, py);
  const auto p = permutation_test(px, py, options);
  r.p_value = p.p_value;
  r.n_permutations = p.n_permutations;
  r.exact = p.exact;
  return r;
}

SceneSpec scene_for(std::string_view caption, std::uint64_t seed) {
  const auto c = scenegen::parse(caption);
  const auto& s = c.structure;
  Rng rng = make_rng(seed);
  std::uniform_int_distribution<int> cell(0, scenegen::kGridCells * scenegen::kGridCells - 1);
  std::uniform_int_distribution<std::size_t> size(0, scenegen::kAllSizes.size() - 1);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    SceneSpec scene;
    for (const auto& phrase : s.objects) {
      scenegen::SceneObject o;
      o.shape = phrase.shape;
      o.color = phrase.color;
      o.size = phrase.size ? *phrase.size : scenegen::kAllSizes[size(rng)];
      const int k = cell(rng);
      o.cell = {k / scenegen::kGridCells, k % scenegen::kGridCells};
      scene.objects.push_back(o);
    }
    scene.relation = s.relation;
    if (scenegen::is_valid(scene) && scenegen::matches(s, scene)) return scene;
  }
  throw PreconditionError("no scene satisfies \"" + std::string(caption) + "\"");
}

BiasSuiteConfig default_bias_config() {
  BiasSuiteConfig c;
  const std::vector<std::string> colors = {"red", "green", "blue", "yellow"};
  const std::vector<std::string> items = {"small square", "large circle", "small triangle",
                                          "large square", "small circle", "large triangle"};
  for (const auto& color : colors) {
    auto& group = c.groups[color];
    for (std::size_t i = 0; i < 8; ++i) {
      const std::string& it = items[i % items.size()];
      const std::string caption = "a " + it.substr(0, it.find(' ')) + " " + color + it.substr(it.find(' '));
      const std::uint64_t seed = derive_seed(derive_seed(0, color), i);
      group.push_back({scene_for(caption, seed), seed});
    }
    auto& words = c.attributes[color + "-words"];
    for (const char* w : {"a small %s square", "a large %s circle", "a small %s triangle"}) {
      char buf[64];
      std::snprintf(buf, sizeof buf, w, color.c_str());
      words.push_back(buf);
    }
  }
  c.tests = {{"red", "blue", "red-words", "blue-words"},
             {"green", "yellow", "green-words", "yellow-words"},
             {"green", "yellow", "red-words", "blue-words"},
             {"red", "blue", "green-words", "yellow-words"}};
  return c;
}

BiasSuiteConfig read_bias_config(const std::filesystem::path& path) {
  BiasSuiteConfig c;
  try {
    const json j = json::parse(read_text(path));
    for (const auto& [name, items] : j.at("groups").items())
      for (const auto& it : items) {
        if (it.contains("caption")) {
          const auto seed = it.value("seed", std::uint64_t{0});
          c.groups[name].push_back({scene_for(it.at("caption").get<std::string>(), seed), seed});
        } else {
          c.groups[name].push_back(
              {scenegen::scene_from_json(it.at("scene")), it.value("render_seed", std::uint64_t{0})});
        }
      }
    for (const auto& [name, caps] : j.at("attributes").items())
      c.attributes[name] = caps.get<std::vector<std::string>>();
    for (const auto& t : j.at("tests"))
      c.tests.push_back({t.at("x").get<std::string>(), t.at("y").get<std::string>(), t.at("a").get<std::string>(),
                         t.at("b").get<std::string>()});
    c.noise_samples = j.value("noise_samples", c.noise_samples);
    c.bank_seed = j.value("bank_seed", c.bank_seed);
    c.alpha = j.value("alpha", c.alpha);
    if (j.contains("permutation")) {
      const auto& p = j.at("permutation");
      c.permutation.max_exact = p.value("max_exact", c.permutation.max_exact);
      c.permutation.n_mc = p.value("n_mc", c.permutation.n_mc);
      c.permutation.seed = p.value("seed", c.permutation.seed);
    }
  } catch (const json::exception& e) {
    throw IoError("malformed bias config " + path.string() + ": " + e.what());
  }
  return c;
}

void write_bias_config(const BiasSuiteConfig& c, const std::filesystem::path& path) {
  json j;
  j["groups"] = json::object();
  for (const auto& [name, items] : c.groups) {
    json arr = json::array();
    for (const auto& it : items) arr.push_back(item_json(it));
    j["groups"][name] = arr;
  }
  j["attributes"] = c.attributes;
  j["tests"] = json::array();
  for (const auto& t : c.tests) j["tests"].push_back({{"x", t.x}, {"y", t.y}, {"a", t.a}, {"b", t.b}});
  j["noise_samples"] = c.noise_samples;
  j["bank_seed"] = c.bank_seed;
  j["alpha"] = c.alpha;
  j["permutation"] = {{"max_exact", c.permutation.max_exact}, {"n_mc", c.permutation.n_mc},
                      {"seed", c.permutation.seed}};
  write_text_atomic(path, j.dump(1) + "\n");
}

BiasTable bias_suite(const BiasSuiteConfig& config, const PairScorer& sigma, int threads) {
  if (config.tests.empty()) throw PreconditionError("bias suite has no tests");
  const auto group = [&](const std::string& name) -> const std::vector<GroupItem>& {
    auto it = config.groups.find(name);
    if (it == config.groups.end()) throw PreconditionError("bias suite refers to missing group '" + name + "'");
    if (it->second.empty()) throw PreconditionError("bias group '" + name + "' is empty");
    return it->second;
  };
  const auto attribute = [&](const std::string& name) -> const std::vector<std::string>& {
    auto it = config.attributes.find(name);
    if (it == config.attributes.end())
      throw PreconditionError("bias suite refers to missing attribute set '" + name + "'");
    if (it->second.empty()) throw PreconditionError("attribute set '" + name + "' is empty");
    return it->second;
  };
  // Resolve everything before scoring, then score each (item, caption) once.
  std::set<std::string> used_groups;
  std::set<std::string> used_captions;
  for (const auto& t : config.tests) {
    for (const auto* g : {&t.x, &t.y}) {
      group(*g);
      used_groups.insert(*g);
    }
    for (const auto* a : {&t.a, &t.b})
      for (const auto& cap : attribute(*a)) used_captions.insert(cap);
  }
  std::vector<Image> images;
  std::vector<std::string> labels;
  std::map<std::string, std::size_t> first;
  for (const auto& g : used_groups) {
    first[g] = images.size();
    const auto& items = group(g);
    for (std::size_t i = 0; i < items.size(); ++i) {
      images.push_back(scenegen::render(items[i].scene, items[i].render_seed));
      labels.push_back(g + "[" + std::to_string(i) + "]");
    }
  }
  std::vector<const Image*> ptrs;
  for (const auto& im : images) ptrs.push_back(&im);
  const std::vector<std::string> captions(used_captions.begin(), used_captions.end());
  const auto m = sigma_matrix(ptrs, captions, sigma, threads, [&](std::size_t i) { return labels[i]; });
  const auto col = [&](const std::string& cap) {
    return static_cast<std::size_t>(std::lower_bound(captions.begin(), captions.end(), cap) - captions.begin());
  };

  BiasTable table;
  table.alpha = config.alpha;
  std::size_t counted = 0;
  double abs_sum = 0.0;
  for (std::size_t r = 0; r < config.tests.size(); ++r) {
    const BiasTest& t = config.tests[r];
    BiasSpec spec;
    for (std::size_t i = 0; i < group(t.x).size(); ++i) spec.X.push_back(images[first[t.x] + i]);
    for (std::size_t i = 0; i < group(t.y).size(); ++i) spec.Y.push_back(images[first[t.y] + i]);
    spec.A = attribute(t.a);
    spec.B = attribute(t.b);
    require_sets(spec);
    BiasRow row;
    row.test = t;
    const auto psi_of = [&](const std::string& g, std::size_t i) {
      std::vector<double> sa, sb;
      for (const auto& a : spec.A) sa.push_back(m[first[g] + i][col(a)]);
      for (const auto& b : spec.B) sb.push_back(m[first[g] + i][col(b)]);
      return psi_from(sa, sb);
    };
    for (std::size_t i = 0; i < spec.X.size(); ++i) row.result.psi.push_back(psi_of(t.x, i));
    for (std::size_t i = 0; i < spec.Y.size(); ++i) row.result.psi.push_back(psi_of(t.y, i));
    const std::span<const double> all(row.result.psi);
    const auto px = all.subspan(0, spec.X.size()), py = all.subspan(spec.X.size());
    try {
      row.result.d = effect_size(px, py);
    } catch (const DegenerateError&) {
      row.degenerate = true;
    }
    if (!row.degenerate) {
      PermutationOptions p = config.permutation;
      p.seed = derive_seed(config.permutation.seed, r);
      const auto perm = permutation_test(px, py, p);
      row.result.p_value = perm.p_value;
      row.result.n_permutations = perm.n_permutations;
      row.result.exact = perm.exact;
      row.significant = perm.p_value < config.alpha;
      abs_sum += std::abs(row.result.d);
      ++counted;
    }
    table.rows.push_back(std::move(row));
  }
  table.average_abs_effect = counted ? abs_sum / static_cast<double>(counted) : 0.0;
  return table;
}

std::string to_csv(const BiasTable& t) {
  std::ostringstream out;
  out << "x,y,a,b,d,p_value,n_permutations,exact,significant,degenerate\n";
  for (const auto& r : t.rows)
    out << r.test.x << ',' << r.test.y << ',' << r.test.a << ',' << r.test.b << ','
        << (r.degenerate ? "" : fmt(r.result.d)) << ',' << (r.degenerate ? "" : fmt(r.result.p_value)) << ','
        << r.result.n_permutations << ',' << (r.result.exact ? 1 : 0) << ',' << (r.significant ? 1 : 0) << ','
        << (r.degenerate ? 1 : 0) << '\n';
  out << "average_abs_effect,,,," << fmt(t.average_abs_effect) << ",,,,,\n";
  return out.str();
}

std::string to_markdown(const BiasTable& t) {
  std::ostringstream out;
  out << "| X | Y | A | B | d | p |\n|---|---|---|---|---|---|\n";
  for (const auto& r : t.rows) {
    out << "| " << r.test.x << " | " << r.test.y << " | " << r.test.a << " | " << r.test.b << " | ";
    if (r.degenerate)
      out << "degenerate | - |\n";
    else
      out << fixed(r.result.d, 2) << (r.significant ? "*" : "") << " | " << fixed(r.result.p_value, 4) << " |\n";
  }
  out << "| Average absolute effect size | | | | " << fixed(t.average_abs_effect, 2) << " | |\n";
  out << "\n* p < " << t.alpha << " (one-sided permutation test).\n";
  return out.str();
}

}  // namespace ditm::bias
