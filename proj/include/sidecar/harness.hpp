#pragma once

// Experiment orchestration: JSON configs and presets, runs over seeds and
// widths in the four modes, per-run metrics CSV files, a manifest, and seed
// aggregation with Student-t confidence intervals.

#include "sidecar/losses.hpp"
#include "sidecar/models.hpp"
#include "sidecar/problems.hpp"
#include "sidecar/reference.hpp"
#include "sidecar/training.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#ifndef SIDECAR_GIT_HASH
#define SIDECAR_GIT_HASH "unknown"
#endif

namespace sidecar::harness {

using nlohmann::json;
using problems::LawId;
using problems::ProblemId;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Keeps large temporaries on the heap instead of fresh mmap pages; training
/// allocates and frees the same few megabyte-sized buffers every epoch.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

// ---------------------------------------------------------------------------
// Experiment configuration

enum class Mode { Sidecar, Vanilla, NoStruct, FitOnly };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::Sidecar: return "sidecar";
    case Mode::Vanilla: return "vanilla";
    case Mode::NoStruct: return "no-struct";
    case Mode::FitOnly: return "fit-only";
  }
  return "sidecar";
}

inline Mode mode_from_string(const std::string& s) {
  if (s == "sidecar") return Mode::Sidecar;
  if (s == "vanilla") return Mode::Vanilla;
  if (s == "no-struct") return Mode::NoStruct;
  if (s == "fit-only") return Mode::FitOnly;
  throw ConfigError("invalid mode '" + s + "' (expected sidecar, vanilla, no-struct or fit-only)");
}

struct ArchConfig {
  std::vector<int> widths{50};
  int depth = 4;
  int copilot_width = 10;
  int copilot_depth = 2;
};

struct ReferenceConfig {
  int nx = 512;
  int nt = 10000;
  std::string cache_dir;
};

struct ExperimentConfig {
  std::string name = "experiment";
  ProblemId problem = ProblemId::Nls1d;
  std::optional<LawId> law = LawId::NlsMass;
  Mode mode = Mode::Sidecar;
  ArchConfig arch;
  losses::CollocationSizes colloc;
  training::TrainConfig train;  // seed and law are set per run
  int fit_points = 32000;
  ReferenceConfig reference;
  std::vector<std::uint64_t> seeds{0};
  std::string out_dir = "runs";

  problems::ProblemSpec problem_spec() const {
    return problem == ProblemId::Nls1d ? problems::ProblemSpec::nls1d() : problems::ProblemSpec::ac1d();
  }

  void validate() const {
    if (law && problems::problem_of(*law) != problem) {
      throw ConfigError("law '" + problems::to_string(*law) + "' does not belong to problem '" +
                        problems::to_string(problem) + "'");
    }
    if (arch.widths.empty()) throw ConfigError("model.widths must not be empty");
    for (int w : arch.widths) {
      if (w < 1) throw ConfigError("model.widths entries must be positive");
    }
    if (arch.depth < 1 || arch.copilot_width < 1 || arch.copilot_depth < 1) {
      throw ConfigError("network depths and copilot width must be positive");
    }
    if (colloc.n_x < 1 || colloc.n_t < 2 || colloc.n_ic < 2 || colloc.n_bc < 1) {
      throw ConfigError("collocation sizes too small");
    }
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
      throw ConfigError("seeds must be distinct");
    }
    if (fit_points < 1) throw ConfigError("fit_points must be positive");
    if (reference.nx < 8 || reference.nt < 1) throw ConfigError("reference resolution too small");
    if (mode == Mode::Sidecar && train.k2 > 0 && train.alpha > 0.0 && !law) {
      throw ConfigError("sidecar mode with a structure stage needs a law");
    }
    try {
      train.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("train: ") + e.what());
    }
  }
};

namespace detail {

/// Tracks which keys of a JSON object were consumed.
class Fields {
 public:
  Fields(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where() + "must be a JSON object");
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  template <class T>
  T required(const std::string& key) {
    if (!obj_.contains(key)) throw ConfigError("missing required field '" + qualified(key) + "'");
    return take<T>(key);
  }

  template <class T>
  T optional(const std::string& key, T fallback) {
    if (!obj_.contains(key)) return fallback;
    return take<T>(key);
  }

  std::optional<double> nullable_double(const std::string& key, std::optional<double> fallback) {
    if (!obj_.contains(key)) return fallback;
    used_.insert(key);
    if (obj_.at(key).is_null()) return std::nullopt;
    return take<double>(key);
  }

  Fields object(const std::string& key) {
    used_.insert(key);
    return Fields(obj_.at(key), qualified(key));
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      (void)value;
      if (!used_.count(key)) throw ConfigError("unknown field '" + qualified(key) + "'");
    }
  }

 private:
  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "config " : "'" + path_ + "' "; }

  template <class T>
  T take(const std::string& key) {
    used_.insert(key);
    try {
      return obj_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("field '" + qualified(key) + "' has the wrong type");
    }
  }

  const json& obj_;
  std::string path_;
  std::set<std::string> used_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Presets

/// Table 1 network sizes and budgets for the given problem.
inline ExperimentConfig preset_table1(ProblemId id) {
  ExperimentConfig c;
  c.problem = id;
  c.train = training::TrainConfig::table1(id);
  c.law = c.train.law;
  c.seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  c.arch.depth = 4;
  c.arch.copilot_depth = 2;
  if (id == ProblemId::Nls1d) {
    c.name = "nls1d-table1";
    c.arch.widths = {50, 100, 200, 400};
    c.arch.copilot_width = 10;
    c.colloc = {512, 128, 512, 128};
  } else {
    c.name = "ac1d-table1";
    c.arch.widths = {64, 128, 256};
    c.arch.copilot_width = 16;
    c.colloc = {128, 80, 512, 200};
  }
  c.out_dir = "runs/" + c.name;
  return c;
}

/// Reduced budgets and collocation sets for single-core desktop runs.
inline ExperimentConfig preset_desk(ProblemId id) {
  ExperimentConfig c = preset_table1(id);
  c.name = problems::to_string(id) + "-desk";
  c.arch.widths = {16, 32, 50};
  c.train.k1 = 20000;
  c.train.k2 = 4000;
  c.train.eval_every = 2000;
  c.seeds = {0, 1, 2};
  c.fit_points = 4096;
  c.train.quad_level = 8;
  c.colloc = {64, 17, 128, 32};
  c.out_dir = "runs/" + c.name;
  return c;
}

inline ExperimentConfig preset(const std::string& name) {
  if (name == "nls1d-table1") return preset_table1(ProblemId::Nls1d);
  if (name == "ac1d-table1") return preset_table1(ProblemId::Ac1d);
  if (name == "nls1d-desk") return preset_desk(ProblemId::Nls1d);
  if (name == "ac1d-desk") return preset_desk(ProblemId::Ac1d);
  throw ConfigError("unknown preset '" + name + "'");
}

inline std::vector<std::string> preset_names() {
  return {"nls1d-table1", "ac1d-table1", "nls1d-desk", "ac1d-desk"};
}

// ---------------------------------------------------------------------------
// JSON round trip

inline json to_json(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  j["problem"] = problems::to_string(c.problem);
  j["law"] = c.law ? problems::to_string(*c.law) : "none";
  j["mode"] = to_string(c.mode);
  j["model"] = {{"widths", c.arch.widths},
                {"depth", c.arch.depth},
                {"copilot_width", c.arch.copilot_width},
                {"copilot_depth", c.arch.copilot_depth}};
  j["collocation"] = {{"n_x", c.colloc.n_x}, {"n_t", c.colloc.n_t}, {"n_ic", c.colloc.n_ic}, {"n_bc", c.colloc.n_bc}};
  const auto& t = c.train;
  j["train"] = {{"k1", t.k1},
                {"k2", t.k2},
                {"alpha", t.alpha},
                {"lr", t.lr.initial},
                {"lr_decay", t.lr.decay},
                {"lr_decay_every", t.lr.decay_every},
                {"beta1", t.adam.beta1},
                {"beta2", t.adam.beta2},
                {"eps_adam", t.adam.eps},
                {"causal_pde", t.causal_pde ? json(*t.causal_pde) : json(nullptr)},
                {"causal_structure", t.causal_structure ? json(*t.causal_structure) : json(nullptr)},
                {"eval_every", t.eval_every},
                {"quad_level", t.quad_level}};
  j["fit_points"] = c.fit_points;
  j["reference"] = {{"nx", c.reference.nx}, {"nt", c.reference.nt}, {"cache_dir", c.reference.cache_dir}};
  j["seeds"] = c.seeds;
  j["out_dir"] = c.out_dir;
  return j;
}

/// Parses a config. Absent optional fields take the problem's Table 1
/// defaults; `problem`, `model.widths`, `train.k1`, `train.k2` and `seeds`
/// are required.
inline ExperimentConfig from_json(const json& j) {
  detail::Fields f(j, "");
  ExperimentConfig c;
  try {
    c.problem = problems::problem_from_string(f.required<std::string>("problem"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("problem: ") + e.what());
  }
  const ExperimentConfig base = preset_table1(c.problem);
  c = base;
  c.name = f.optional<std::string>("name", "experiment");
  const auto law = f.optional<std::string>("law", base.law ? problems::to_string(*base.law) : "none");
  if (law == "none") {
    c.law.reset();
  } else {
    try {
      c.law = problems::law_from_string(law);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("law: ") + e.what());
    }
  }
  c.mode = mode_from_string(f.optional<std::string>("mode", "sidecar"));

  if (!f.has("model")) throw ConfigError("missing required field 'model.widths'");
  {
    auto m = f.object("model");
    c.arch.widths = m.required<std::vector<int>>("widths");
    c.arch.depth = m.optional<int>("depth", base.arch.depth);
    c.arch.copilot_width = m.optional<int>("copilot_width", base.arch.copilot_width);
    c.arch.copilot_depth = m.optional<int>("copilot_depth", base.arch.copilot_depth);
    m.finish();
  }
  if (f.has("collocation")) {
    auto m = f.object("collocation");
    c.colloc.n_x = m.optional<int>("n_x", base.colloc.n_x);
    c.colloc.n_t = m.optional<int>("n_t", base.colloc.n_t);
    c.colloc.n_ic = m.optional<int>("n_ic", base.colloc.n_ic);
    c.colloc.n_bc = m.optional<int>("n_bc", base.colloc.n_bc);
    m.finish();
  }
  if (!f.has("train")) throw ConfigError("missing required field 'train.k1'");
  {
    auto m = f.object("train");
    auto& t = c.train;
    t.k1 = m.required<int>("k1");
    t.k2 = m.required<int>("k2");
    t.alpha = m.optional<double>("alpha", base.train.alpha);
    t.lr.initial = m.optional<double>("lr", base.train.lr.initial);
    t.lr.decay = m.optional<double>("lr_decay", base.train.lr.decay);
    t.lr.decay_every = m.optional<int>("lr_decay_every", base.train.lr.decay_every);
    t.adam.beta1 = m.optional<double>("beta1", base.train.adam.beta1);
    t.adam.beta2 = m.optional<double>("beta2", base.train.adam.beta2);
    t.adam.eps = m.optional<double>("eps_adam", base.train.adam.eps);
    t.causal_pde = m.nullable_double("causal_pde", base.train.causal_pde);
    t.causal_structure = m.nullable_double("causal_structure", base.train.causal_structure);
    t.eval_every = m.optional<int>("eval_every", base.train.eval_every);
    t.quad_level = m.optional<int>("quad_level", base.train.quad_level);
    m.finish();
  }
  c.fit_points = f.optional<int>("fit_points", base.fit_points);
  if (f.has("reference")) {
    auto m = f.object("reference");
    c.reference.nx = m.optional<int>("nx", base.reference.nx);
    c.reference.nt = m.optional<int>("nt", base.reference.nt);
    c.reference.cache_dir = m.optional<std::string>("cache_dir", base.reference.cache_dir);
    m.finish();
  }
  c.seeds = f.required<std::vector<std::uint64_t>>("seeds");
  c.out_dir = f.optional<std::string>("out_dir", "runs/" + c.name);
  f.finish();
  c.train.law = c.law;
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return from_json(j);
}

inline void save_config(const ExperimentConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_json(c).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Metrics CSV

inline constexpr int kMetricsSchemaVersion = 1;
inline constexpr char kMetricsHeader[] =
    "run_id,seed,width,epoch,stage,L_solver,L_PDE,L_IC,L_BC,L_R,rel_l2_error,structure_linf_error,R0,"
    "wall_clock_seconds";

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string to_csv_row(const training::MetricsRecord& r) {
  if (r.run_id.find_first_of(",\"\n") != std::string::npos) {
    throw std::invalid_argument("run id must not contain commas, quotes or newlines");
  }
  for (double v : {r.l_solver, r.l_pde, r.l_ic, r.l_bc, r.l_r, r.rel_l2_error, r.structure_linf_error, r.r0,
                   r.wall_clock_seconds}) {
    if (!std::isfinite(v)) throw std::invalid_argument("metrics row for " + r.run_id + " has a non-finite field");
  }
  std::ostringstream s;
  s << r.run_id << ',' << r.seed << ',' << r.width << ',' << r.epoch << ',' << r.stage << ','
    << format_double(r.l_solver) << ',' << format_double(r.l_pde) << ',' << format_double(r.l_ic) << ','
    << format_double(r.l_bc) << ',' << format_double(r.l_r) << ',' << format_double(r.rel_l2_error) << ','
    << format_double(r.structure_linf_error) << ',' << format_double(r.r0) << ','
    << format_double(r.wall_clock_seconds);
  return s.str();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream s(line);
  while (std::getline(s, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline training::MetricsRecord parse_csv_row(const std::string& line) {
  const auto c = split_csv_line(line);
  if (c.size() != 14) throw std::runtime_error("metrics row has " + std::to_string(c.size()) + " fields, expected 14");
  training::MetricsRecord r;
  try {
    std::size_t pos = 0;
    auto num = [&](const std::string& s) {
      const double v = std::stod(s, &pos);
      if (pos != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
      return v;
    };
    auto integer = [&](const std::string& s) {
      const long long v = std::stoll(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    };
    r.run_id = c[0];
    r.seed = static_cast<std::uint64_t>(std::stoull(c[1], &pos));
    if (pos != c[1].size()) throw std::invalid_argument(c[1]);
    r.width = static_cast<int>(integer(c[2]));
    r.epoch = static_cast<int>(integer(c[3]));
    r.stage = static_cast<int>(integer(c[4]));
    r.l_solver = num(c[5]);
    r.l_pde = num(c[6]);
    r.l_ic = num(c[7]);
    r.l_bc = num(c[8]);
    r.l_r = num(c[9]);
    r.rel_l2_error = num(c[10]);
    r.structure_linf_error = num(c[11]);
    r.r0 = num(c[12]);
    r.wall_clock_seconds = num(c[13]);
  } catch (const std::logic_error& e) {
    throw std::runtime_error("malformed metrics field: " + std::string(e.what()));
  }
  return r;
}

inline std::vector<training::MetricsRecord> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw std::runtime_error(path + ": unexpected metrics header");
  }
  std::vector<training::MetricsRecord> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      rows.push_back(parse_csv_row(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ": " + e.what());
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Runs

/// "<method>-W<nominal width>-s<seed>"
inline std::string make_run_id(const std::string& method, int nominal_width, std::uint64_t seed) {
  return method + "-W" + std::to_string(nominal_width) + "-s" + std::to_string(seed);
}

struct RunIdParts {
  std::string method;
  int nominal_width = 0;
  std::uint64_t seed = 0;
};

inline RunIdParts parse_run_id(const std::string& id) {
  const auto s = id.rfind("-s");
  const auto w = id.rfind("-W", s);
  if (s == std::string::npos || w == std::string::npos || w == 0) {
    throw std::runtime_error("run id '" + id + "' does not follow <method>-W<width>-s<seed>");
  }
  RunIdParts p;
  p.method = id.substr(0, w);
  try {
    p.nominal_width = std::stoi(id.substr(w + 2, s - w - 2));
    p.seed = std::stoull(id.substr(s + 2));
  } catch (const std::logic_error&) {
    throw std::runtime_error("run id '" + id + "' does not follow <method>-W<width>-s<seed>");
  }
  return p;
}

struct RunPlan {
  std::string run_id;
  std::string method;
  int nominal_width = 0;
  std::uint64_t seed = 0;
  models::ModelArch arch;
  training::TrainSetup setup;
  training::TrainConfig train;
};

/// Budget and architecture rules of each mode.
inline std::vector<RunPlan> plan_runs(const ExperimentConfig& c) {
  c.validate();
  const auto p = c.problem_spec();
  const int channels = p.channels();
  std::vector<RunPlan> plans;
  auto add = [&](const std::string& method, int nominal, std::uint64_t seed, bool copilot, int width,
                 training::Objective objective, int k1, int k2, double alpha) {
    RunPlan r;
    r.method = method;
    r.nominal_width = nominal;
    r.seed = seed;
    r.run_id = make_run_id(method, nominal, seed);
    r.arch.primary = {2, channels, width, c.arch.depth};
    if (copilot) r.arch.copilot = models::MlpArch{1, 1, c.arch.copilot_width, c.arch.copilot_depth};
    r.setup.problem = p;
    r.setup.sizes = c.colloc;
    r.setup.objective = objective;
    r.setup.fit_points = c.fit_points;
    r.setup.run_id = r.run_id;
    r.train = c.train;
    r.train.seed = seed;
    r.train.law = c.law;
    r.train.k1 = k1;
    r.train.k2 = k2;
    r.train.alpha = alpha;
    plans.push_back(std::move(r));
  };
  const int k0 = c.train.k1 + c.train.k2;
  for (int w : c.arch.widths) {
    const int eq = models::equivalent_width(w, c.arch.depth, c.arch.copilot_width, c.arch.copilot_depth);
    for (std::uint64_t seed : c.seeds) {
      switch (c.mode) {
        case Mode::Sidecar:
          add("sidecar", w, seed, true, w, training::Objective::Pinn, c.train.k1, c.train.k2, c.train.alpha);
          break;
        case Mode::NoStruct:
          add("no-struct", w, seed, true, w, training::Objective::Pinn, c.train.k1, c.train.k2, 0.0);
          break;
        case Mode::Vanilla:
          add("vanilla", w, seed, false, eq, training::Objective::Pinn, k0, 0, 0.0);
          break;
        case Mode::FitOnly:
          add("fit-sidecar", w, seed, true, w, training::Objective::Fit, k0, 0, 0.0);
          add("fit-vanilla", w, seed, false, eq, training::Objective::Fit, k0, 0, 0.0);
          break;
      }
    }
  }
  std::stable_sort(plans.begin(), plans.end(), [](const RunPlan& a, const RunPlan& b) {
    if (a.method != b.method) return a.method < b.method;
    if (a.nominal_width != b.nominal_width) return a.nominal_width < b.nominal_width;
    return a.seed < b.seed;
  });
  return plans;
}

inline std::shared_ptr<const reference::Reference> build_reference(const ExperimentConfig& c) {
  const auto p = c.problem_spec();
  if (p.id == ProblemId::Nls1d) return std::make_shared<reference::Reference>(reference::Reference::nls(p));
  return std::make_shared<reference::Reference>(
      reference::Reference::ac(p, reference::cached_ac_reference(p, c.reference.nx, c.reference.nt,
                                                                 c.reference.cache_dir)));
}

struct RunOutcome {
  RunPlan plan;
  bool ok = false;
  std::string error;
  std::string metrics_path;
  std::string checkpoint_path;
  std::optional<training::MetricsRecord> final_record;
  std::uint64_t quadrature_evaluations = 0;
  std::uint64_t residual_evaluations = 0;
  int epochs = 0;
};

/// One run: writes <out>/<run_id>.csv row by row and <out>/<run_id>.ckpt at the end.
inline RunOutcome execute_run(const RunPlan& plan, std::shared_ptr<const reference::Reference> ref,
                              const std::string& out_dir) {
  RunOutcome o;
  o.plan = plan;
  o.metrics_path = (std::filesystem::path(out_dir) / (plan.run_id + ".csv")).string();
  o.checkpoint_path = (std::filesystem::path(out_dir) / (plan.run_id + ".ckpt")).string();
  const auto q0 = quadrature::evaluation_count();
  const auto r0 = problems::residual_counter();
  try {
    std::ofstream csv(o.metrics_path, std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + o.metrics_path);
    csv << kMetricsHeader << "\n";
    training::Trainer t(models::init_model(plan.arch, plan.seed), plan.setup, plan.train, std::move(ref));
    t.run([&](const training::MetricsRecord& r) {
      csv << to_csv_row(r) << "\n";
      csv.flush();
      o.final_record = r;
    });
    t.save_checkpoint(o.checkpoint_path);
    o.epochs = t.epoch();
    o.ok = true;
  } catch (const std::exception& e) {
    o.error = e.what();
  }
  o.quadrature_evaluations = quadrature::evaluation_count() - q0;
  o.residual_evaluations = problems::residual_counter() - r0;
  return o;
}

struct ExperimentResult {
  std::vector<RunOutcome> runs;
  std::string manifest_path;
  bool all_ok() const {
    return std::all_of(runs.begin(), runs.end(), [](const RunOutcome& r) { return r.ok; });
  }
};

inline json manifest_json(const ExperimentConfig& c, const ExperimentResult& res, double seconds) {
  json runs = json::array();
  for (const auto& r : res.runs) {
    json e{{"run_id", r.plan.run_id},
           {"method", r.plan.method},
           {"nominal_width", r.plan.nominal_width},
           {"width", r.plan.arch.primary.width},
           {"seed", r.plan.seed},
           {"k1", r.plan.train.k1},
           {"k2", r.plan.train.k2},
           {"alpha", r.plan.train.alpha},
           {"epochs", r.epochs},
           {"status", r.ok ? "ok" : "failed"},
           {"metrics", std::filesystem::path(r.metrics_path).filename().string()},
           {"checkpoint", std::filesystem::path(r.checkpoint_path).filename().string()},
           {"quadrature_evaluations", r.quadrature_evaluations},
           {"residual_evaluations", r.residual_evaluations}};
    if (!r.ok) e["error"] = r.error;
    runs.push_back(std::move(e));
  }
  return json{{"metrics_schema_version", kMetricsSchemaVersion},
              {"metrics_columns", kMetricsHeader},
              {"git_hash", SIDECAR_GIT_HASH},
              {"wall_clock_seconds", seconds},
              {"config", to_json(c)},
              {"runs", std::move(runs)}};
}

/// Runs every planned run on `jobs` worker threads. Failures are recorded
/// per run; sibling runs continue.
inline ExperimentResult run_experiment(const ExperimentConfig& c, int jobs = 1) {
  const auto start = std::chrono::steady_clock::now();
  const auto plans = plan_runs(c);
  std::filesystem::create_directories(c.out_dir);
  save_config(c, (std::filesystem::path(c.out_dir) / "config.json").string());
  const auto ref = build_reference(c);

  ExperimentResult res;
  res.runs.resize(plans.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < plans.size(); i = next++) {
      res.runs[i] = execute_run(plans[i], ref, c.out_dir);
    }
  };
  const auto n = static_cast<std::size_t>(std::clamp(jobs, 1, static_cast<int>(std::max<std::size_t>(plans.size(), 1))));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  res.manifest_path = (std::filesystem::path(c.out_dir) / "manifest.json").string();
  std::ofstream(res.manifest_path) << manifest_json(c, res, seconds).dump(2) << "\n";
  return res;
}

// ---------------------------------------------------------------------------
// Aggregation

struct Interval {
  double mean = 0.0;
  double half_width = 0.0;
  double median = 0.0;
  std::size_t n = 0;
  bool insufficient = false;  // n < 2: half-width is 0 by convention
};

inline double t_quantile_975(std::size_t dof) {
  boost::math::students_t dist(static_cast<double>(dof));
  return boost::math::quantile(boost::math::complement(dist, 0.025));
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Mean and Student-t 95% half-width t_{0.975, n-1} * s / sqrt(n).
inline Interval aggregate_seeds(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("cannot aggregate an empty group");
  Interval r;
  r.n = values.size();
  double sum = 0.0;
  for (double v : values) sum += v;
  r.mean = sum / static_cast<double>(r.n);
  r.median = median(values);
  if (r.n < 2) {
    r.insufficient = true;
    return r;
  }
  double ss = 0.0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  const double sd = std::sqrt(ss / static_cast<double>(r.n - 1));
  r.half_width = t_quantile_975(r.n - 1) * sd / std::sqrt(static_cast<double>(r.n));
  return r;
}

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"L_solver", "L_PDE", "L_IC", "L_BC", "L_R", "rel_l2_error",
                                              "structure_linf_error", "R0", "wall_clock_seconds"};
  return names;
}

inline std::vector<double> metric_values(const training::MetricsRecord& r) {
  return {r.l_solver, r.l_pde, r.l_ic, r.l_bc, r.l_r, r.rel_l2_error, r.structure_linf_error, r.r0,
          r.wall_clock_seconds};
}

struct SummaryRow {
  std::string method;
  int nominal_width = 0;
  int width = 0;
  int epoch = 0;
  std::vector<Interval> metrics;  // in metric_names() order
};

/// Final-epoch rows grouped by (method, nominal width).
inline std::vector<SummaryRow> summarize(const std::vector<training::MetricsRecord>& finals) {
  std::map<std::pair<std::string, int>, std::vector<training::MetricsRecord>> groups;
  for (const auto& r : finals) {
    const auto id = parse_run_id(r.run_id);
    groups[{id.method, id.nominal_width}].push_back(r);
  }
  std::vector<SummaryRow> out;
  for (const auto& [key, rows] : groups) {
    SummaryRow s;
    s.method = key.first;
    s.nominal_width = key.second;
    s.width = rows.front().width;
    s.epoch = rows.front().epoch;
    for (std::size_t m = 0; m < metric_names().size(); ++m) {
      std::vector<double> v;
      for (const auto& r : rows) v.push_back(metric_values(r)[m]);
      s.metrics.push_back(aggregate_seeds(v));
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline std::string summary_header() {
  std::string h = "method,nominal_width,width,epoch,n_seeds,flag";
  for (const auto& m : metric_names()) h += "," + m + "_mean," + m + "_ci95," + m + "_median";
  return h;
}

inline void write_summary(const std::vector<SummaryRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << summary_header() << "\n";
  for (const auto& s : rows) {
    const auto& first = s.metrics.front();
    out << s.method << ',' << s.nominal_width << ',' << s.width << ',' << s.epoch << ',' << first.n << ','
        << (first.insufficient ? "insufficient-n" : "ok");
    for (const auto& m : s.metrics) {
      out << ',' << format_double(m.mean) << ',' << format_double(m.half_width) << ',' << format_double(m.median);
    }
    out << "\n";
  }
}

/// Last row of every metrics CSV in `dir`.
inline std::vector<training::MetricsRecord> final_records(const std::string& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".csv") {
      std::ifstream in(e.path());
      std::string first;
      std::getline(in, first);
      if (first == kMetricsHeader) files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<training::MetricsRecord> finals;
  for (const auto& f : files) {
    const auto rows = read_metrics_csv(f.string());
    if (rows.empty()) throw std::runtime_error(f.string() + ": no metrics rows");
    finals.push_back(rows.back());
  }
  if (finals.empty()) throw std::runtime_error("no metrics files in " + dir);
  return finals;
}

inline std::vector<SummaryRow> aggregate_directory(const std::string& in_dir, const std::string& out_csv) {
  auto rows = summarize(final_records(in_dir));
  write_summary(rows, out_csv);
  return rows;
}

}  // namespace sidecar::harness
