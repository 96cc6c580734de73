// lve_cli: every computation and check of the library as a subcommand,
// writing one JSON (or CSV) document per run.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lve/lve.hpp"

using namespace lve;
using json = nlohmann::ordered_json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Settings: defaults < config file < flags.

struct OptionDef {
  std::string name, help;
};

const std::vector<OptionDef>& option_defs() {
  static const std::vector<OptionDef> defs{
      {"model", "zero-d or lattice"},
      {"lambda", "coupling as re,im"},
      {"colors", "number of field components N"},
      {"M", "slice ratio M > 1"},
      {"j", "slice index"},
      {"mass", "mass m >= 0"},
      {"dim", "lattice dimension 1..4"},
      {"sites", "sites per axis"},
      {"spacing", "lattice spacing in units of M^-j"},
      {"nmax", "largest tree size"},
      {"seed", "master seed"},
      {"format", "json or csv"},
      {"output", "output path (default stdout)"},
      {"quad-points", "points per replica for randomized rules (0 = preset)"},
      {"replicas", "replicas for randomized rules (0 = preset)"},
      {"order", "highest Taylor coefficient"},
      {"r-max", "largest remainder order"},
      {"probes", "couplings for borel, re,im;re,im;..."},
      {"js", "slice indices, comma separated"},
      {"c-trial", "decay rate tried in the propagator bound"},
      {"k-max", "largest resolvent power in the loop bound"},
      {"samples", "sigma samples for the loop bound"},
      {"sigma-scale", "field scaling for the loop-bound stability check"},
      {"n", "tree size for verify trees"},
      {"ns", "replica counts for verify replica, comma separated"},
      {"draws", "random (tree, w) draws for verify covariance"},
      {"oracle-samples", "Monte Carlo samples for lattice oracles (0 = skip)"},
      {"tolerance-factor", "allowed max/min spread for uniformity checks"},
  };
  return defs;
}

class Settings {
 public:
  void set_default(const std::string& k, const std::string& v) { defaults_[k] = v; }
  void set_config(const std::string& k, const std::string& v) { config_[k] = v; }
  void set_flag(const std::string& k, const std::string& v) { flags_[k] = v; }

  std::string str(const std::string& k) const {
    if (auto it = flags_.find(k); it != flags_.end()) return it->second;
    if (auto it = config_.find(k); it != config_.end()) return it->second;
    if (auto it = defaults_.find(k); it != defaults_.end()) return it->second;
    throw UsageError("missing value for --" + k);
  }
  double num(const std::string& k) const {
    const std::string s = str(k);
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &pos);
    } catch (const std::exception&) {
      throw UsageError("--" + k + ": not a number: '" + s + "'");
    }
    if (pos != s.size()) throw UsageError("--" + k + ": not a number: '" + s + "'");
    return v;
  }
  long long integer(const std::string& k) const {
    const double v = num(k);
    if (v != std::floor(v) || std::abs(v) > 9.0e15) throw UsageError("--" + k + ": expected an integer");
    return static_cast<long long>(v);
  }
  /// Every resolved value except those that must not affect the document.
  json resolved() const {
    json j = json::object();
    for (const auto& d : option_defs()) {
      if (d.name == "output") continue;
      if (flags_.count(d.name) || config_.count(d.name) || defaults_.count(d.name)) j[d.name] = str(d.name);
    }
    return j;
  }

 private:
  std::map<std::string, std::string> defaults_, config_, flags_;
};

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

void read_config(const std::string& path, Settings& st) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    bool known = false;
    for (const auto& d : option_defs()) known = known || d.name == key;
    if (!known) throw UsageError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    st.set_config(key, value);
  }
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double parse_double(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw UsageError(what + ": not a number: '" + s + "'");
  }
  if (pos != s.size()) throw UsageError(what + ": not a number: '" + s + "'");
  return v;
}

cplx parse_complex(const std::string& s, const std::string& what) {
  const auto parts = split(s, ',');
  if (parts.empty() || parts.size() > 2) throw UsageError(what + ": expected re,im");
  return {parse_double(parts[0], what), parts.size() == 2 ? parse_double(parts[1], what) : 0.0};
}

std::vector<int> parse_ints(const std::string& s, const std::string& what) {
  std::vector<int> out;
  for (const auto& p : split(s, ',')) {
    const double v = parse_double(p, what);
    if (v != std::floor(v)) throw UsageError(what + ": expected integers");
    out.push_back(static_cast<int>(v));
  }
  if (out.empty()) throw UsageError(what + ": empty list");
  return out;
}

// ---------------------------------------------------------------------------
// Output helpers. Every number goes out with an error field.

json cnum(cplx v, double err) { return {{"re", v.real()}, {"im", v.imag()}, {"error", err}}; }
json cnum(const Estimate& e) { return cnum(e.value, e.error); }
json rnum(double v, double err) { return {{"value", v}, {"error", err}}; }
json exact(double v) { return rnum(v, 0.0); }

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<json>> rows;
};

std::string csv_cell(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_null()) return "";
  return v.dump();
}

std::string render_csv(const Table& t) {
  std::string out;
  for (std::size_t i = 0; i < t.header.size(); ++i) out += (i ? "," : "") + t.header[i];
  out += "\n";
  for (const auto& r : t.rows) {
    for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + csv_cell(r[i]);
    out += "\n";
  }
  return out;
}

struct Result {
  json body = json::object();
  Table table;
  std::optional<bool> pass;  // verify subcommands
};

// ---------------------------------------------------------------------------
// Model and engine options from settings.

model::ModelSpec build_model(const Settings& st) {
  const std::string kind = st.str("model");
  const cplx lambda = parse_complex(st.str("lambda"), "--lambda");
  const int colors = static_cast<int>(st.integer("colors"));
  model::ModelSpec m;
  if (kind == "zero-d") {
    m = model::ModelSpec::zero_dim(lambda, colors);
  } else if (kind == "lattice") {
    model::SliceSpec s;
    s.M = st.num("M");
    s.j = static_cast<int>(st.integer("j"));
    s.mass = st.num("mass");
    s.dim = static_cast<int>(st.integer("dim"));
    s.sites = static_cast<int>(st.integer("sites"));
    s.spacing = st.num("spacing");
    m = model::ModelSpec::lattice(s, lambda, colors);
  } else {
    throw UsageError("--model must be zero-d or lattice");
  }
  m.validate();
  return m;
}

engine::EngineOptions tune(engine::EngineOptions o, const Settings& st, int threads) {
  const long long pts = st.integer("quad-points"), reps = st.integer("replicas");
  if (pts < 0 || reps < 0) throw UsageError("--quad-points and --replicas must be >= 0");
  if (reps == 1) throw UsageError("--replicas must be >= 2");
  auto adjust = [&](engine::TermRule& r) {
    using K = engine::TermRule::Kind;
    if (r.kind == K::Deterministic) return;
    if (pts > 0) (r.kind == K::Nested ? r.w_nodes : r.sigma_nodes) = static_cast<int>(pts);
    if (reps > 0) r.replicas = static_cast<int>(reps);
  };
  for (auto& [n, r] : o.rules) adjust(r);
  adjust(o.fallback);
  o.seed = static_cast<std::uint64_t>(st.integer("seed"));
  o.threads = threads;
  return o;
}

json model_json(const model::ModelSpec& m) {
  json j;
  j["kind"] = m.is_lattice() ? "lattice" : "zero-d";
  j["lambda"] = cnum(m.lambda, 0.0);
  j["colors"] = m.colors;
  if (m.is_lattice()) {
    const auto& s = *m.slice;
    j["M"] = s.M;
    j["j"] = s.j;
    j["mass"] = s.mass;
    j["dim"] = s.dim;
    j["sites"] = s.sites;
    j["spacing"] = s.spacing;
    j["cell_weight"] = exact(s.cell_weight());
    j["coupling_g"] = cnum(model::CouplingMap::of(m).g, 0.0);
  }
  return j;
}

std::optional<oracle::OracleResult> lattice_oracle(const model::ModelSpec& m, const Settings& st, int threads) {
  const auto& s = *m.slice;
  oracle::LatticeOracleSpec spec;
  spec.threads = threads;
  spec.seed = static_cast<std::uint64_t>(st.integer("seed"));
  if (s.total_sites() <= 4) return oracle::lattice_logZ(s, m.lambda, spec);
  const long long samples = st.integer("oracle-samples");
  if (samples <= 0 || s.total_sites() > 16) return std::nullopt;
  spec.mode = oracle::LatticeOracleSpec::Mode::MonteCarlo;
  spec.samples = static_cast<std::size_t>(samples);
  return oracle::lattice_logZ(s, m.lambda, spec);
}

json series_json(const engine::SeriesAccumulator& s) {
  json terms = json::array();
  for (std::size_t i = 0; i < s.terms.size(); ++i) {
    json t = cnum(s.terms[i]);
    t["n"] = i + 1;
    t["rule"] = s.rules[i];
    terms.push_back(t);
  }
  json ratios = json::array();
  for (std::size_t i = 0; i < s.ratios.size(); ++i) {
    // propagate the term errors into the ratio
    const double a = std::abs(s.terms[i].value), b = std::abs(s.terms[i + 1].value);
    const double err = a > 0.0 ? s.ratios[i] * (s.terms[i + 1].error / std::max(b, 1e-300) + s.terms[i].error / a) : 0.0;
    json r = rnum(s.ratios[i], err);
    r["n"] = i + 1;
    ratios.push_back(r);
  }
  json j;
  j["logZ"] = cnum(s.total);
  j["per_n_terms"] = terms;
  j["term_ratios"] = ratios;
  j["tail_estimate"] = rnum(s.tail_estimate, s.tail_estimate);
  j["flagged_nonconvergent"] = s.flagged;
  j["trees_represented"] = exact(static_cast<double>(s.trees_represented));
  j["shapes_evaluated"] = exact(static_cast<double>(s.shapes_evaluated));
  j["evaluations"] = exact(static_cast<double>(s.evaluations));
  return j;
}

// ---------------------------------------------------------------------------
// Subcommands.

Result cmd_pressure(const Settings& st, int threads) {
  const auto m = build_model(st);
  m.require_analytic_domain();
  const auto opt = tune(engine::EngineOptions::for_model(m), st, threads);
  const int nmax = static_cast<int>(st.integer("nmax"));
  const auto s = engine::pressure_series(m, nmax, opt);
  Result r;
  r.body["model"] = model_json(m);
  r.body.update(series_json(s));
  std::optional<oracle::OracleResult> o;
  if (m.is_lattice())
    o = lattice_oracle(m, st, threads);
  else
    o = oracle::quadrature_logZ_0d(m.lambda, 1e-12, m.colors);
  if (o) {
    r.body["oracle_logZ"] = cnum(o->value, o->error);
    r.body["oracle_method"] = o->method;
    r.body["abs_diff"] = rnum(std::abs(s.total.value - o->value), s.total.error + o->error);
  } else {
    r.body["oracle_logZ"] = nullptr;
    r.body["abs_diff"] = nullptr;
  }
  r.table.header = {"n", "re", "im", "error"};
  for (std::size_t i = 0; i < s.terms.size(); ++i)
    r.table.rows.push_back({i + 1, s.terms[i].value.real(), s.terms[i].value.imag(), s.terms[i].error});
  r.table.rows.push_back({"total", s.total.value.real(), s.total.value.imag(), s.total.error + s.tail_estimate});
  if (o) r.table.rows.push_back({"oracle", o->value.real(), o->value.imag(), o->error});
  return r;
}

Result cmd_taylor(const Settings& st, int threads) {
  const auto m = build_model(st);
  const int order = static_cast<int>(st.integer("order"));
  const auto opt = tune(engine::taylor_options_for(m), st, threads);
  const auto t = engine::taylor_coefficients(m, order, opt);
  Result r;
  r.body["model"] = model_json(m);
  json coeffs = json::array();
  std::optional<oracle::WickSeries> wick;
  if (!m.is_lattice()) wick = oracle::wick_coefficients(order, m.colors);
  r.table.header = {"k", "re", "im", "error", "wick"};
  for (int k = 1; k <= order; ++k) {
    json c = cnum(t.coeffs[k - 1]);
    c["k"] = k;
    if (wick) c["wick"] = exact(wick->a_double(k));
    coeffs.push_back(c);
    r.table.rows.push_back({k, t.coeffs[k - 1].value.real(), t.coeffs[k - 1].value.imag(), t.coeffs[k - 1].error,
                            wick ? json(wick->a_double(k)) : json(nullptr)});
  }
  r.body["coefficients"] = coeffs;
  r.body["final_step"] = exact(t.final_step);
  r.body["levels"] = t.levels;
  r.body["converged"] = t.converged;
  r.body["achieved_relative_change"] = rnum(t.achieved_relative_change, 0.0);
  return r;
}

json borel_json(const engine::BorelDiagnostics& d, Table* table, int j) {
  json out;
  json coeffs = json::array();
  for (std::size_t k = 0; k < d.coeffs.size(); ++k) {
    json c = cnum(d.coeffs[k]);
    c["k"] = k + 1;
    coeffs.push_back(c);
  }
  json rem = json::array();
  for (const auto& p : d.remainders) {
    json e = cnum(p.remainder, p.error);
    e["r"] = p.r;
    e["lambda"] = cnum(p.lambda, 0.0);
    rem.push_back(e);
    if (table) table->rows.push_back({j, p.r, p.lambda.real(), p.lambda.imag(), p.remainder.real(), p.remainder.imag(), p.error});
  }
  out["coefficients"] = coeffs;
  out["remainders"] = rem;
  out["A"] = rnum(d.A, 0.0);
  out["rho"] = rnum(d.rho, d.rho * d.fit_residual);
  out["fit_log_A"] = rnum(d.fit_log_A, d.fit_residual);
  out["fit_residual"] = rnum(d.fit_residual, 0.0);
  out["envelope_holds"] = d.envelope_holds;
  return out;
}

Result cmd_borel(const Settings& st, int threads) {
  const auto m = build_model(st);
  std::vector<cplx> probes;
  for (const auto& p : split(st.str("probes"), ';')) probes.push_back(parse_complex(p, "--probes"));
  if (probes.empty()) throw UsageError("--probes: empty list");
  engine::BorelOptions bo;
  bo.r_max = static_cast<int>(st.integer("r-max"));
  bo.n_max = static_cast<int>(st.integer("nmax"));
  const auto sopt = tune(engine::EngineOptions::for_model(m), st, threads);
  const auto topt = tune(engine::taylor_options_for(m), st, threads);
  Result r;
  r.body["model"] = model_json(m);
  r.table.header = {"j", "r", "lambda_re", "lambda_im", "remainder_re", "remainder_im", "error"};
  if (!m.is_lattice()) {
    r.body["borel"] = borel_json(engine::borel_remainder_check(m, probes, bo, sopt, topt), &r.table, 0);
    return r;
  }
  const auto js = parse_ints(st.str("js"), "--js");
  const auto u = engine::borel_uniformity(m, js, probes, bo, sopt, topt);
  json slices = json::array();
  double spread_err = 0.0;
  for (const auto& s : u.slices) {
    json e = borel_json(s.diagnostics, &r.table, s.j);
    e["j"] = s.j;
    slices.push_back(e);
    spread_err += s.diagnostics.fit_residual;
  }
  r.body["slices"] = slices;
  r.body["rho_spread"] = rnum(u.rho_spread, u.rho_spread * spread_err);
  return r;
}

Result cmd_two_point(const Settings& st, int threads) {
  const auto m = build_model(st);
  if (!m.is_lattice()) throw UsageError("two-point needs --model lattice");
  const auto opt = tune(engine::EngineOptions::lattice(), st, threads);
  const int nmax = static_cast<int>(st.integer("nmax"));
  const auto tp = engine::two_point_function(m, nmax, opt);
  Result r;
  r.body["model"] = model_json(m);
  std::optional<oracle::TwoPointOracle> orc;
  const long long samples = st.integer("oracle-samples");
  if (samples > 0)
    orc = oracle::connected_2pt_profile(*m.slice, m.lambda, static_cast<std::size_t>(samples), static_cast<std::uint64_t>(st.integer("seed")),
                                        threads);
  r.table.header = {"separation", "re", "im", "error", "oracle", "oracle_error", "deviation", "combined_error"};
  json pts = json::array();
  bool all_match = true;
  for (std::size_t k = 0; k < tp.values.size(); ++k) {
    json p;
    p["offset"] = tp.offsets[k];
    p["separation"] = exact(tp.separations[k]);
    p["value"] = cnum(tp.values[k]);
    std::vector<json> row{tp.separations[k], tp.values[k].value.real(), tp.values[k].value.imag(), tp.values[k].error};
    if (orc) {
      const auto& o = orc->values[k];
      const double dev = std::abs(tp.values[k].value - o.value);
      const double comb = tp.values[k].error + o.error + tp.tail_estimate;
      p["oracle"] = cnum(o.value, o.error);
      p["deviation"] = rnum(dev, comb);
      p["within_error"] = dev <= comb;
      all_match = all_match && dev <= comb;
      row.insert(row.end(), {o.value.real(), o.error, dev, comb});
    } else {
      row.insert(row.end(), {nullptr, nullptr, nullptr, nullptr});
    }
    pts.push_back(p);
    r.table.rows.push_back(row);
  }
  r.body["points"] = pts;
  json ratios = json::array();
  for (double q : tp.ratios) ratios.push_back(rnum(q, 0.0));
  r.body["term_ratios"] = ratios;
  r.body["tail_estimate"] = rnum(tp.tail_estimate, tp.tail_estimate);
  r.body["matrix_error"] = rnum(tp.matrix_error, 0.0);
  if (orc) {
    r.body["oracle_effective_samples"] = exact(orc->effective_samples);
    r.body["oracle_all_within_error"] = all_match;
  }
  try {
    const auto f = engine::decay_rate_fit(tp);
    r.body["decay_fit"] = {{"c_hat", rnum(f.c_hat, f.c_hat * f.residual)},
                           {"K_hat", rnum(f.K_hat, f.K_hat * f.residual)},
                           {"residual_fraction", rnum(f.residual, 0.0)},
                           {"log_range", rnum(f.log_range, 0.0)},
                           {"points", f.points}};
  } catch (const Error& e) {
    r.body["decay_fit"] = {{"failure", e.what()}};
  }
  return r;
}

model::SliceSpec slice_for_j(const model::ModelSpec& m, int j) {
  model::SliceSpec s = *m.slice;
  s.j = j;
  return s;
}

Result cmd_verify_propagator_bound(const Settings& st, int) {
  const auto m = build_model(st);
  if (!m.is_lattice()) throw UsageError("verify propagator-bound needs --model lattice");
  const auto js = parse_ints(st.str("js"), "--js");
  const double c = st.num("c-trial"), factor = st.num("tolerance-factor");
  Result r;
  r.body["model"] = model_json(m);
  r.table.header = {"j", "norm_scaled", "norm_error", "sup_ratio", "argmax_separation", "failed"};
  json rows = json::array();
  double nlo = INFINITY, nhi = 0, slo = INFINITY, shi = 0;
  bool any_failed = false;
  for (int j : js) {
    const auto s = slice_for_j(m, j);
    const auto nr = model::operator_norm(s);
    const auto b = model::verify_propagator_bound(s, c);
    const double scaled = nr.norm * std::pow(s.M, 2.0 * j);
    nlo = std::min(nlo, scaled), nhi = std::max(nhi, scaled);
    slo = std::min(slo, b.sup_ratio), shi = std::max(shi, b.sup_ratio);
    any_failed = any_failed || b.failed;
    rows.push_back({{"j", j},
                    {"norm_scaled", rnum(scaled, scaled * nr.relative_change)},
                    {"sup_ratio", rnum(b.sup_ratio, 0.0)},
                    {"argmax_separation", exact(b.argmax_separation)},
                    {"failed", b.failed},
                    {"failure_separation", exact(b.failure_separation)},
                    {"samples", b.samples}});
    r.table.rows.push_back({j, scaled, scaled * nr.relative_change, b.sup_ratio, b.argmax_separation, b.failed});
  }
  r.body["c_trial"] = exact(c);
  r.body["slices"] = rows;
  r.body["norm_spread"] = rnum(nhi / nlo, 0.0);
  r.body["sup_spread"] = rnum(shi / slo, 0.0);
  r.pass = !any_failed && nhi / nlo <= factor && shi / slo <= factor;
  return r;
}

Result cmd_verify_loop_bound(const Settings& st, int) {
  const auto m = build_model(st);
  if (!m.is_lattice()) throw UsageError("verify loop-bound needs --model lattice");
  const auto js = parse_ints(st.str("js"), "--js");
  const int kmax = static_cast<int>(st.integer("k-max"));
  const int samples = static_cast<int>(st.integer("samples"));
  const double scale = st.num("sigma-scale"), factor = st.num("tolerance-factor");
  const auto seed = static_cast<std::uint64_t>(st.integer("seed"));
  if (kmax < 1) throw UsageError("--k-max must be >= 1");
  Result r;
  r.body["model"] = model_json(m);
  r.table.header = {"j", "k", "ratio", "ratio_scaled", "resolvent_norm"};
  std::vector<double> lo(kmax + 1, INFINITY), hi(kmax + 1, 0.0);
  double worst_stability = 1.0, worst_growth = 0.0;
  json rows = json::array();
  for (int j : js) {
    model::ModelSpec mj = m;
    mj.slice->j = j;
    const auto lv = loop::LatticeVertex::of(mj);
    for (int k = 1; k <= kmax; ++k) {
      const auto a = loop::resolvent_loop_bound_check(lv, k, samples, seed, 1.0);
      const auto b = loop::resolvent_loop_bound_check(lv, k, samples, seed, scale);
      lo[k] = std::min(lo[k], a.worst_ratio), hi[k] = std::max(hi[k], a.worst_ratio);
      const double stab = std::max(a.worst_ratio / b.worst_ratio, b.worst_ratio / a.worst_ratio);
      worst_stability = std::max(worst_stability, stab);
      worst_growth = std::max(worst_growth, b.worst_ratio / a.worst_ratio);
      rows.push_back({{"j", j},
                      {"k", k},
                      {"ratio", rnum(a.worst_ratio, 0.0)},
                      {"ratio_scaled_sigma", rnum(b.worst_ratio, 0.0)},
                      {"resolvent_inverse_norm", rnum(a.worst_resolvent_norm, 0.0)}});
      r.table.rows.push_back({j, k, a.worst_ratio, b.worst_ratio, a.worst_resolvent_norm});
    }
  }
  json spreads = json::array();
  double worst_spread = 1.0;
  for (int k = 1; k <= kmax; ++k) {
    spreads.push_back({{"k", k}, {"spread", rnum(hi[k] / lo[k], 0.0)}});
    worst_spread = std::max(worst_spread, hi[k] / lo[k]);
  }
  r.body["samples"] = samples;
  r.body["sigma_scale"] = exact(scale);
  r.body["entries"] = rows;
  r.body["j_spread"] = spreads;
  r.body["worst_j_spread"] = rnum(worst_spread, 0.0);
  r.body["worst_scaling_change"] = rnum(worst_stability, 0.0);
  // the bound must not grow with the field; shrinking is allowed
  r.body["worst_scaling_growth"] = rnum(worst_growth, 0.0);
  r.pass = worst_spread <= factor && worst_growth <= factor;
  return r;
}

Result cmd_verify_trees(const Settings& st, int) {
  const int n = static_cast<int>(st.integer("n"));
  if (n < 1 || n > trees::default_enumeration_cap) throw UsageError("--n must be in 1.." + std::to_string(trees::default_enumeration_cap));
  std::map<std::vector<int>, std::uint64_t> hist;
  std::uint64_t count = 0, invalid = 0;
  trees::for_each_tree(n, [&](const trees::LabeledTree& t) {
    ++count;
    if (!t.is_valid_tree()) ++invalid;
    ++hist[t.degrees()];
  });
  const std::uint64_t expected = trees::cayley_count(n);
  Result r;
  r.table.header = {"degrees", "count", "expected"};
  json classes = json::array();
  bool hist_ok = true;
  for (const auto& [deg, c] : hist) {
    const std::uint64_t e = trees::count_trees_with_degrees(n, deg);
    hist_ok = hist_ok && e == c;
    std::string label;
    for (std::size_t i = 0; i < deg.size(); ++i) label += (i ? " " : "") + std::to_string(deg[i]);
    classes.push_back({{"degrees", deg}, {"count", exact(static_cast<double>(c))}, {"expected", exact(static_cast<double>(e))}});
    r.table.rows.push_back({label, c, e});
  }
  r.body["n"] = n;
  r.body["trees"] = exact(static_cast<double>(count));
  r.body["cayley"] = exact(static_cast<double>(expected));
  r.body["invalid"] = exact(static_cast<double>(invalid));
  r.body["degree_classes"] = classes;
  r.pass = count == expected && invalid == 0 && hist_ok;
  return r;
}

Result cmd_verify_covariance(const Settings& st, int) {
  const long long draws = st.integer("draws");
  const int nmax = static_cast<int>(st.integer("nmax"));
  if (draws < 1) throw UsageError("--draws must be >= 1");
  if (nmax < 2 || nmax > 16) throw UsageError("--nmax must be in 2..16 for verify covariance");
  const quad::CounterRng rng(static_cast<std::uint64_t>(st.integer("seed")), 0xC0F);
  double worst = INFINITY;
  long long failures = 0;
  std::vector<double> w;
  for (long long i = 0; i < draws; ++i) {
    const std::uint64_t base = static_cast<std::uint64_t>(i) * 64;
    const int n = 2 + static_cast<int>(rng.uniform(base) * (nmax - 1));
    trees::PruferCode code(n - 2);
    for (int c = 0; c < n - 2; ++c) code[c] = std::min(n - 1, static_cast<int>(rng.uniform(base + 1 + c) * n));
    const auto t = trees::prufer_decode(n, code);
    w.resize(n - 1);
    for (int e = 0; e < n - 1; ++e) w[e] = rng.uniform(base + 32 + e);
    const double piv = interp::min_ldlt_pivot(interp::covariance_matrix(t, w));
    worst = std::min(worst, piv);
    if (piv < interp::pivot_tolerance) ++failures;
  }
  Result r;
  r.body["draws"] = draws;
  r.body["nmax"] = nmax;
  r.body["pivot_tolerance"] = exact(interp::pivot_tolerance);
  r.body["min_pivot"] = rnum(worst, 0.0);
  r.body["failures"] = exact(static_cast<double>(failures));
  bool pass = failures == 0;
  r.table.header = {"check", "value", "error"};
  r.table.rows.push_back({"tree_min_pivot", worst, 0.0});
  if (st.str("model") == "lattice") {
    const auto m = build_model(st);
    const auto c = model::build_lattice_covariance(*m.slice);
    const double tol = 1e-12 * std::max(std::abs(c.max_eigenvalue), std::abs(c.min_eigenvalue));
    r.body["lattice"] = {{"min_eigenvalue", rnum(c.min_eigenvalue, tol)},
                         {"max_eigenvalue", rnum(c.max_eigenvalue, tol)},
                         {"clipped_count", exact(c.clipped_count)},
                         {"clipped_magnitude", rnum(c.clipped_magnitude, 0.0)}};
    r.table.rows.push_back({"lattice_min_eigenvalue", c.min_eigenvalue, tol});
  }
  r.pass = pass;
  return r;
}

Result cmd_verify_replica(const Settings& st, int) {
  const auto ns = parse_ints(st.str("ns"), "--ns");
  const cplx g = model::CouplingMap::of(model::ModelSpec::zero_dim(parse_complex(st.str("lambda"), "--lambda"))).g;
  interp::QuadratureSpec q;
  q.mode = interp::QuadMode::TensorHermite;
  q.nodes = 32;
  Result r;
  r.table.header = {"family", "n", "single_re", "single_im", "replicated_re", "replicated_im", "deviation", "combined_error", "pass"};
  json rows = json::array();
  bool pass = true;
  for (const auto& fam : interp::replica_families())
    for (int n : ns) {
      if (n < 1 || n > 6) throw UsageError("--ns entries must be in 1..6");
      const auto rep = interp::replica_identity_check(interp::replica_family(fam, g), n, q);
      pass = pass && rep.pass;
      rows.push_back({{"family", fam},
                      {"n", n},
                      {"single", cnum(rep.single)},
                      {"replicated", cnum(rep.replicated)},
                      {"deviation", rnum(rep.deviation, rep.combined_error)},
                      {"pass", rep.pass}});
      r.table.rows.push_back({fam, n, rep.single.value.real(), rep.single.value.imag(), rep.replicated.value.real(),
                              rep.replicated.value.imag(), rep.deviation, rep.combined_error, rep.pass});
    }
  r.body["coupling_g"] = cnum(g, 0.0);
  r.body["hermite_nodes"] = q.nodes;
  r.body["checks"] = rows;
  r.pass = pass;
  return r;
}

Result cmd_oracle(const Settings& st, int threads) {
  const auto m = build_model(st);
  Result r;
  r.body["model"] = model_json(m);
  r.table.header = {"quantity", "re", "im", "error"};
  if (!m.is_lattice()) {
    const auto o = oracle::quadrature_logZ_0d(m.lambda, 1e-12, m.colors);
    const auto gl = oracle::quadrature_logZ_0d_gl(m.lambda, 400, m.colors);
    r.body["logZ"] = cnum(o.value, o.error);
    r.body["method"] = o.method;
    r.body["cross_check"] = cnum(gl.value, gl.error);
    r.body["cross_check_method"] = gl.method;
    r.table.rows.push_back({"logZ", o.value.real(), o.value.imag(), o.error});
    const int order = static_cast<int>(st.integer("order"));
    const auto w = oracle::wick_coefficients(order, m.colors);
    json coeffs = json::array();
    for (int k = 1; k <= order; ++k) {
      coeffs.push_back({{"k", k}, {"value", exact(w.a_double(k))}, {"exact", w.a[k].str()}});
      r.table.rows.push_back({"a" + std::to_string(k), w.a_double(k), 0.0, 0.0});
    }
    r.body["wick_coefficients"] = coeffs;
    return r;
  }
  const auto o = lattice_oracle(m, st, threads);
  if (!o) throw UsageError("lattice oracle needs <= 4 sites, or <= 16 sites with --oracle-samples > 0");
  r.body["logZ"] = cnum(o->value, o->error);
  r.body["method"] = o->method;
  r.table.rows.push_back({"logZ", o->value.real(), o->value.imag(), o->error});
  return r;
}

// Per-subcommand defaults, applied under the config file and the flags.
void apply_defaults(const std::string& cmd, Settings& st) {
  const bool lattice_cmd = cmd == "two-point" || cmd == "verify propagator-bound" || cmd == "verify loop-bound";
  st.set_default("model", lattice_cmd ? "lattice" : "zero-d");
  st.set_default("colors", "1");
  st.set_default("M", "2");
  st.set_default("j", cmd == "two-point" ? "2" : "0");
  st.set_default("mass", "0");
  st.set_default("dim", "1");
  st.set_default("sites", cmd == "borel" ? "4" : "16");
  st.set_default("spacing", cmd == "borel" ? "1" : "0.5");
  st.set_default("seed", "20240917");
  st.set_default("format", "json");
  st.set_default("output", "-");
  st.set_default("quad-points", "0");
  st.set_default("replicas", "0");
  st.set_default("order", "2");
  st.set_default("js", cmd == "borel" ? "0,1,2" : "0,1,2,3,4");
  st.set_default("c-trial", "0.25");
  st.set_default("k-max", "4");
  st.set_default("samples", "64");
  st.set_default("sigma-scale", "10");
  st.set_default("n", "6");
  st.set_default("ns", "2,3,4");
  st.set_default("draws", "100000");
  st.set_default("oracle-samples", cmd == "two-point" ? "8388608" : "1048576");
  st.set_default("tolerance-factor", "2");
  // model-dependent defaults depend on the resolved model kind
  const bool lattice = st.str("model") == "lattice";
  st.set_default("lambda", lattice ? "0.02,0" : "0.05,0");
  if (cmd == "borel") {
    st.set_default("r-max", lattice ? "4" : "6");
    st.set_default("nmax", lattice ? "5" : "7");
    st.set_default("probes", "0.01,0;0.02,0");
  } else if (cmd == "two-point") {
    st.set_default("nmax", "3");
  } else if (cmd == "verify covariance") {
    st.set_default("nmax", "8");
  } else {
    st.set_default("nmax", lattice ? "4" : "7");
  }
  st.set_default("r-max", "6");
  st.set_default("probes", "0.01,0;0.02,0");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Loop vertex expansion laboratory for phi^4: series, oracles and checks.", "lve_cli"};
  app.require_subcommand(1);
  std::map<std::string, std::string> raw;
  for (const auto& d : option_defs()) app.add_option("--" + d.name, raw[d.name], d.help);
  std::string config_path;
  app.add_option("--config", config_path, "flat key=value file; keys are long flag names");
  int threads_flag = 0;
  app.add_option("--threads", threads_flag, "worker threads (default: LVE_THREADS, then hardware)");

  std::map<std::string, CLI::App*> cmds;
  auto add = [&](CLI::App* parent, const std::string& name, const std::string& key, const std::string& help) {
    CLI::App* c = parent->add_subcommand(name, help);
    c->fallthrough();
    cmds[key] = c;
    return c;
  };
  add(&app, "pressure", "pressure", "log Z by the tree expansion, with oracle comparison");
  add(&app, "taylor", "taylor", "Taylor coefficients of log Z");
  add(&app, "borel", "borel", "Taylor remainders and Borel envelope fit");
  add(&app, "two-point", "two-point", "two-point function on a lattice slice, with decay fit");
  add(&app, "oracle", "oracle", "independent reference values");
  CLI::App* verify = app.add_subcommand("verify", "property checks (exit 1 on failure)");
  verify->fallthrough();
  verify->require_subcommand(1);
  add(verify, "propagator-bound", "verify propagator-bound", "operator norm and decay bound across slices");
  add(verify, "loop-bound", "verify loop-bound", "resolvent loop bound across slices and field scalings");
  add(verify, "trees", "verify trees", "tree counts and degree histogram");
  add(verify, "covariance", "verify covariance", "positivity of interpolated covariances");
  add(verify, "replica", "verify replica", "replica identity for test integrands");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  std::string cmd;
  for (const auto& [key, c] : cmds)
    if (c->parsed()) cmd = key;

  Settings st;
  int threads = 0;
  try {
    if (!config_path.empty()) read_config(config_path, st);
    for (const auto& d : option_defs())
      if (app.get_option("--" + d.name)->count() > 0) st.set_flag(d.name, raw[d.name]);
    apply_defaults(cmd, st);
    threads = resolve_threads(threads_flag);
    if (threads_flag < 0) throw UsageError("--threads must be >= 0");
    const std::string fmt = st.str("format");
    if (fmt != "json" && fmt != "csv") throw UsageError("--format must be json or csv");
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  using Fn = Result (*)(const Settings&, int);
  const std::map<std::string, Fn> table{{"pressure", cmd_pressure},
                                        {"taylor", cmd_taylor},
                                        {"borel", cmd_borel},
                                        {"two-point", cmd_two_point},
                                        {"oracle", cmd_oracle},
                                        {"verify propagator-bound", cmd_verify_propagator_bound},
                                        {"verify loop-bound", cmd_verify_loop_bound},
                                        {"verify trees", cmd_verify_trees},
                                        {"verify covariance", cmd_verify_covariance},
                                        {"verify replica", cmd_verify_replica}};
  Result res;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    res = table.at(cmd)(st, threads);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::cerr << cmd << ": " << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s on " << threads
            << " thread(s)\n";

  std::string doc;
  if (st.str("format") == "csv") {
    doc = render_csv(res.table);
  } else {
    json out;
    out["subcommand"] = cmd;
    out["config"] = st.resolved();
    out["results"] = res.body;
    if (res.pass) out["pass"] = *res.pass;
    doc = out.dump(2) + "\n";
  }
  const std::string path = st.str("output");
  if (path == "-") {
    std::cout << doc;
  } else {
    std::ofstream f(path);
    if (!f) {
      std::cerr << "error: cannot write " << path << "\n";
      return 2;
    }
    f << doc;
  }
  return res.pass.has_value() && !*res.pass ? 1 : 0;
}
