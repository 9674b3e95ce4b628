#pragma once

// Config-driven experiment runner behind the `wassoed` CLI: utility grids,
// the empirical-prior convergence study, and ad-hoc distance / transport runs.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "wassoed/models.hpp"
#include "wassoed/utilities.hpp"
#include "wassoed/wasserstein.hpp"

#ifndef WASSOED_VERSION
#define WASSOED_VERSION "dev"
#endif

namespace wassoed::cli {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kUsage = 2, kNumeric = 3, kThreshold = 4 };

// ---------------------------------------------------------------- config

inline const std::vector<std::string>& experiment_ids() {
    static const std::vector<std::string> ids{"linear1d-utility", "linear1d-convergence", "example1-grid",
                                              "example2-grid",    "distance",             "transport"};
    return ids;
}

/// Every accepted key with its default; a key missing here is rejected.
inline json defaults_for(const std::string& id) {
    json d{{"experiment", id}, {"out", "out/" + id}, {"seed", 0}, {"threads", 1}};
    const auto grid_common = [&](json extra) {
        d["criteria"] = json::array({"W2", "EIG"});
        d["estimator"] = "nested";
        d["thetas"] = json::array();
        d["mc_samples"] = 2000;
        d["svg"] = true;
        for (auto& [k, v] : extra.items()) d[k] = v;
    };
    if (id == "linear1d-utility") {
        grid_common({{"grid", {41}}, {"theta_lower", {-1.0}}, {"theta_upper", {1.0}}, {"noise_var", 0.0025},
                     {"prior_nodes", 33}, {"noise_nodes", 33}, {"inner_resolution", 513}, {"mc_inner_atoms", 512},
                     {"weight_matrix", {{1.0}}}});
        d["criteria"] = json::array({"W1", "W2", "EIG"});
    } else if (id == "example1-grid") {
        grid_common({{"grid", {11, 11}}, {"theta_lower", {0.0, 0.0}}, {"theta_upper", {1.0, 1.0}},
                     {"noise_var", 1e-4}, {"prior_nodes", 17}, {"noise_nodes", 143}, {"posterior_cells", 2048},
                     {"mc_inner_atoms", 512}});
    } else if (id == "example2-grid") {
        grid_common({{"grid", {9, 9}}, {"theta_lower", {0.0, 0.0}}, {"theta_upper", {1.0, 1.0}},
                     {"noise_var", 1e-4}, {"prior_nodes", 12}, {"prior_sparse_nodes", 0}, {"noise_nodes", 11},
                     {"atoms_per_dim", 16}, {"eig_atoms_per_dim", 48}, {"mc_inner_atoms", 16},
                     {"heat_grid", 64}, {"heat_dt", 0.004}, {"pce_degree", 8}, {"pce_training_points", 17},
                     {"cache_dir", ""}});
    } else if (id == "linear1d-convergence") {
        d["thetas"] = {0.3, 0.6, 1.0};
        d["m_values"] = json::array();
        d["m_min"] = 10;
        d["m_max"] = 10000;
        d["m_per_decade"] = 2;
        d["ensemble"] = 50;
        d["noise_var"] = 0.0025;
        d["svg"] = true;
    } else if (id == "distance") {
        d["measure_a"] = json::object();
        d["measure_b"] = json::object();
        d["p"] = 2.0;
        d["resolution"] = 513;
        d["write_plan"] = true;
    } else if (id == "transport") {
        d["source"] = json::object();
        d["target"] = json::object();
        d["probes"] = 17;
        d["interior_count"] = 144;
        d["boundary_count"] = 48;
    } else {
        throw ParseError("unknown experiment '" + id + "'");
    }
    return d;
}

inline bool same_kind(const json& a, const json& b) {
    if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
    return a.type() == b.type();
}

struct ExperimentConfig {
    json resolved;          ///< defaults merged with the user file and flag overrides
    fs::path base_dir = ".";  ///< for relative file references

    const std::string& experiment() const { return resolved["experiment"].get_ref<const std::string&>(); }
    template <class T>
    T get(const char* key) const { return resolved.at(key).get<T>(); }
    fs::path out() const { return resolved["out"].get<std::string>(); }
    std::uint64_t seed() const { return resolved["seed"].get<std::uint64_t>(); }
    int threads() const { return std::max(1, resolved["threads"].get<int>()); }
};

inline ExperimentConfig parse_config(const json& user, fs::path base_dir = ".") {
    if (!user.is_object()) throw ParseError("config must be a JSON object");
    if (!user.contains("experiment") || !user["experiment"].is_string()) throw ParseError("missing 'experiment'");
    json d = defaults_for(user["experiment"].get<std::string>());
    for (auto& [k, v] : user.items()) {
        if (!d.contains(k)) throw ParseError("unknown key '" + k + "'");
        if (!same_kind(d[k], v)) throw ParseError("key '" + k + "' has the wrong type");
        d[k] = v;
    }
    ExperimentConfig c{d, std::move(base_dir)};
    if (d["seed"].is_number_integer() && d["seed"].get<long long>() < 0 && !d["seed"].is_number_unsigned())
        throw ParseError("'seed' must be nonnegative");
    return c;
}

inline ExperimentConfig load_config(const fs::path& file) {
    std::ifstream is(file);
    if (!is) throw ParseError("cannot open config '" + file.string() + "'");
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("config is not valid JSON: ") + e.what());
    }
    return parse_config(j, file.parent_path().empty() ? fs::path(".") : file.parent_path());
}

// ---------------------------------------------------------------- formatting

inline std::string num(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string fnv_hex(const std::string& s) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a(s)));
    return buf;
}

inline void write_text(const fs::path& file, const std::string& text) {
    std::ofstream os(file, std::ios::binary);
    if (!os) throw Error("cannot write '" + file.string() + "'");
    os << text;
}

/// Runs f(i) for i in [0, n) on `threads` workers; results land by index.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& f) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) f(i);
        });
    for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------- SVG

namespace svg {

inline std::string color(double t) {
    // viridis endpoints, piecewise linear through five stops
    static const double stops[5][3] = {{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
    t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0) * 4.0;
    const int i = std::min(3, static_cast<int>(t));
    const double f = t - i;
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(stops[i][0] + f * (stops[i + 1][0] - stops[i][0])),
                  static_cast<int>(stops[i][1] + f * (stops[i + 1][1] - stops[i][1])),
                  static_cast<int>(stops[i][2] + f * (stops[i + 1][2] - stops[i][2])));
    return buf;
}

inline std::string heatmap(const std::string& title, int n1, int n2, const std::vector<double>& v, double lo1,
                           double hi1, double lo2, double hi2) {
    double mn = HUGE_VAL, mx = -HUGE_VAL;
    for (double x : v)
        if (std::isfinite(x)) mn = std::min(mn, x), mx = std::max(mx, x);
    if (!(mx > mn)) mx = mn + 1.0;
    const double cell = 360.0 / std::max(n1, n2);
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"520\" height=\"460\" font-family=\"sans-serif\" "
          "font-size=\"12\">\n<text x=\"40\" y=\"24\">"
       << title << "</text>\n";
    for (int i = 0; i < n1; ++i)
        for (int j = 0; j < n2; ++j) {
            const double x = v[static_cast<std::size_t>(i * n2 + j)];
            // theta1 to the right, theta2 up
            os << "<rect x=\"" << 40 + i * cell << "\" y=\"" << 40 + (n2 - 1 - j) * cell << "\" width=\"" << cell
               << "\" height=\"" << cell << "\" fill=\"" << color((x - mn) / (mx - mn)) << "\"/>\n";
        }
    os << "<text x=\"40\" y=\"" << 40 + n2 * cell + 16 << "\">theta1 " << lo1 << " .. " << hi1 << "</text>\n";
    os << "<text x=\"40\" y=\"" << 40 + n2 * cell + 32 << "\">theta2 " << lo2 << " .. " << hi2 << " (upwards)</text>\n";
    for (int k = 0; k < 32; ++k)
        os << "<rect x=\"430\" y=\"" << 40 + (31 - k) * 360.0 / 32 << "\" width=\"20\" height=\"" << 360.0 / 32
           << "\" fill=\"" << color(k / 31.0) << "\"/>\n";
    os << "<text x=\"455\" y=\"50\">" << num(mx) << "</text>\n<text x=\"455\" y=\"400\">" << num(mn) << "</text>\n";
    os << "</svg>\n";
    return os.str();
}

/// Polylines over a shared x axis; `logxy` plots log10 of both coordinates.
inline std::string lines(const std::string& title, const std::vector<std::string>& labels,
                         const std::vector<std::vector<std::pair<double, double>>>& series, bool logxy) {
    const auto tx = [&](double v) { return logxy ? std::log10(v) : v; };
    double x0 = HUGE_VAL, x1 = -HUGE_VAL, y0 = HUGE_VAL, y1 = -HUGE_VAL;
    for (const auto& s : series)
        for (auto [x, y] : s) {
            if (!std::isfinite(tx(x)) || !std::isfinite(tx(y))) continue;
            x0 = std::min(x0, tx(x)), x1 = std::max(x1, tx(x)), y0 = std::min(y0, tx(y)), y1 = std::max(y1, tx(y));
        }
    if (!(x1 > x0)) x1 = x0 + 1;
    if (!(y1 > y0)) y1 = y0 + 1;
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"560\" height=\"420\" font-family=\"sans-serif\" "
          "font-size=\"12\">\n<text x=\"50\" y=\"24\">"
       << title << "</text>\n<rect x=\"50\" y=\"40\" width=\"400\" height=\"320\" fill=\"none\" stroke=\"#888\"/>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        os << "<polyline fill=\"none\" stroke=\"" << palette[k % 5] << "\" points=\"";
        for (auto [x, y] : series[k]) {
            if (!std::isfinite(tx(x)) || !std::isfinite(tx(y))) continue;
            os << 50 + 400 * (tx(x) - x0) / (x1 - x0) << ',' << 360 - 320 * (tx(y) - y0) / (y1 - y0) << ' ';
        }
        os << "\"/>\n<text x=\"460\" y=\"" << 60 + 16 * k << "\" fill=\"" << palette[k % 5] << "\">" << labels[k]
           << "</text>\n";
    }
    os << "<text x=\"50\" y=\"380\">" << (logxy ? "log10 x: " : "x: ") << num(x0) << " .. " << num(x1) << "</text>\n";
    os << "<text x=\"50\" y=\"396\">" << (logxy ? "log10 y: " : "y: ") << num(y0) << " .. " << num(y1) << "</text>\n";
    os << "</svg>\n";
    return os.str();
}

}  // namespace svg

// ---------------------------------------------------------------- grids

struct GridCell {
    Vector theta;
    UtilityEstimate estimate;
    std::string error;  ///< empty on success
};

struct UtilityGrid {
    std::string criterion;
    std::vector<int> shape;  ///< per-axis counts; 1 entry for 1D designs
    std::vector<GridCell> cells;
    double wall_seconds = 0.0;

    std::size_t failures() const {
        return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const auto& c) { return !c.error.empty(); }));
    }
    const GridCell* argmax() const {
        const GridCell* best = nullptr;
        for (const auto& c : cells)
            if (c.error.empty() && !std::isnan(c.estimate.value) && (!best || c.estimate.value > best->estimate.value))
                best = &c;
        return best;
    }
};

/// Everything a grid run needs: the model, its prior, and a per-cell evaluator.
struct GridProblem {
    std::string model_name;
    std::shared_ptr<GaussianNoiseModel> model;
    Measure prior = UniformBoxMeasure::unit_cube(1);
    std::function<UtilityEstimate(const std::string& criterion, const Vector& theta, std::uint64_t seed)> evaluate;
    std::vector<std::string> assumptions;
};

inline std::vector<Vector> design_nodes(const ExperimentConfig& c, std::vector<int>& shape) {
    const auto lo = c.get<std::vector<double>>("theta_lower"), hi = c.get<std::vector<double>>("theta_upper");
    const auto explicit_thetas = c.resolved["thetas"];
    const std::size_t dd = lo.size();
    if (hi.size() != dd) throw ParseError("theta_lower and theta_upper differ in length");
    std::vector<Vector> out;
    if (!explicit_thetas.empty()) {
        for (const auto& t : explicit_thetas) {
            const auto v = t.is_array() ? t.get<std::vector<double>>() : std::vector<double>{t.get<double>()};
            if (v.size() != dd) throw ParseError("explicit theta has the wrong dimension");
            out.push_back(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(dd)));
        }
        shape = {static_cast<int>(out.size())};
        return out;
    }
    shape = c.get<std::vector<int>>("grid");
    if (shape.size() != dd) throw ParseError("'grid' must have one count per design dimension");
    for (int n : shape)
        if (n < 1) throw ParseError("grid counts must be positive");
    const auto axis = [&](std::size_t k, int i) {
        return shape[k] == 1 ? 0.5 * (lo[k] + hi[k]) : lo[k] + (hi[k] - lo[k]) * i / (shape[k] - 1);
    };
    if (dd == 1) {
        for (int i = 0; i < shape[0]; ++i) out.push_back(Vector::Constant(1, axis(0, i)));
    } else if (dd == 2) {
        for (int i = 0; i < shape[0]; ++i)
            for (int j = 0; j < shape[1]; ++j) {
                Vector t(2);
                t << axis(0, i), axis(1, j);
                out.push_back(t);
            }
    } else {
        throw ParseError("designs must be 1D or 2D");
    }
    return out;
}

inline const std::vector<std::string>& known_criteria() {
    static const std::vector<std::string> c{"W1", "W2", "EIG", "weightedA", "weightedW2"};
    return c;
}

inline GridProblem make_problem(const ExperimentConfig& c) {
    const std::string id = c.experiment();
    const std::string est = c.get<std::string>("estimator");
    if (est != "nested" && est != "monte_carlo") throw ParseError("estimator must be 'nested' or 'monte_carlo'");
    const bool mc = est == "monte_carlo";
    const int mc_n = c.get<int>("mc_samples"), mc_inner = c.get<int>("mc_inner_atoms");
    const double noise_var = c.get<double>("noise_var");
    if (!(noise_var > 0.0)) throw ParseError("noise_var must be positive");
    for (const auto& k : c.get<std::vector<std::string>>("criteria"))
        if (std::find(known_criteria().begin(), known_criteria().end(), k) == known_criteria().end())
            throw ParseError("unknown criterion '" + k + "'");

    GridProblem p;
    p.model_name = id;
    auto mc_eval = [](const Measure& prior, const GaussianNoiseModel& m, double pw, const Vector& t, int n, int inner,
                      std::uint64_t seed) { return u_monte_carlo(prior, m, t, pw, n, inner, seed); };

    if (id == "linear1d-utility") {
        p.model = std::make_shared<GaussianNoiseModel>(linear_1d_noise_model(std::sqrt(noise_var)));
        p.prior = linear_1d_prior();
        NestedOptions opt;
        opt.prior_nodes = prior_rule(p.prior, c.get<int>("prior_nodes"));
        if (c.get<int>("noise_nodes") != 33) opt.noise_nodes = gauss_hermite(c.get<int>("noise_nodes"));
        opt.inner_resolution = c.get<int>("inner_resolution");
        const auto bm = c.get<std::vector<std::vector<double>>>("weight_matrix");
        if (bm.size() != 1 || bm[0].size() != 1) throw ParseError("weight_matrix must be 1x1 for the scalar model");
        const Matrix b = Matrix::Constant(1, 1, bm[0][0]);
        auto model = p.model;
        const Measure prior = p.prior;
        p.evaluate = [=](const std::string& k, const Vector& t, std::uint64_t seed) -> UtilityEstimate {
            const LinearGaussianModel lg(model->forward().linear_operator(t), model->noise_cov(),
                                         std::get<GaussianMeasure>(prior));
            if (k == "W1") return mc ? mc_eval(prior, *model, 1.0, t, mc_n, mc_inner, seed) : u1_nested(prior, *model, t, opt);
            if (k == "W2") return mc ? mc_eval(prior, *model, 2.0, t, mc_n, mc_inner, seed) : u2_gaussian_closed_form(lg);
            if (k == "EIG") return eig_gaussian(lg);
            if (k == "weightedA") return detail::closed(weighted_a_optimality(lg, b));
            return detail::closed(weighted_u2(lg, b));
        };
        return p;
    }
    if (id == "example1-grid") {
        p.model = std::make_shared<GaussianNoiseModel>(example1_noise_model(noise_var));
        p.prior = example1_prior();
        NestedOptions opt;
        opt.prior_nodes = prior_rule(p.prior, c.get<int>("prior_nodes"));
        opt.noise_nodes = standard_normal_rule(2, c.get<int>("noise_nodes"));
        opt.posterior_cells = c.get<int>("posterior_cells");
        auto model = p.model;
        const Measure prior = p.prior;
        p.evaluate = [=](const std::string& k, const Vector& t, std::uint64_t seed) -> UtilityEstimate {
            if (k == "W1") return mc ? mc_eval(prior, *model, 1.0, t, mc_n, mc_inner, seed) : u1_nested(prior, *model, t, opt);
            if (k == "W2")
                return mc ? mc_eval(prior, *model, 2.0, t, mc_n, mc_inner, seed)
                          : u2_nested(prior, *model, t, InnerMethod::TransportMap, opt);
            if (k == "EIG") return eig_baseline(prior, *model, t, EigMethod::NestedQuadrature, opt);
            throw ArgumentError(k + " needs a linear-Gaussian model");
        };
        return p;
    }
    if (id == "example2-grid") {
        HeatSolverConfig heat;
        heat.grid = c.get<int>("heat_grid");
        heat.dt = c.get<double>("heat_dt");
        PCEOptions po;
        po.degree = c.get<int>("pce_degree");
        po.training_points = c.get<int>("pce_training_points");
        const auto dir = c.get<std::string>("cache_dir");
        auto surrogate = std::make_shared<PCESurrogate>(
            build_pce_surrogate(heat, po, dir.empty() ? surrogate_cache_dir() : fs::path(dir)));
        p.model = std::make_shared<GaussianNoiseModel>(example2_model(surrogate), noise_var * Matrix::Identity(5, 5));
        p.prior = example2_prior();
        p.assumptions.push_back("noise covariance " + num(noise_var) + " * I_5 is an assumed default (set noise_var to change it)");
        p.assumptions.push_back("surrogate " + surrogate->hash + " training relative RMS " + num(surrogate->train_rms));
        NestedOptions opt;
        if (const int sparse = c.get<int>("prior_sparse_nodes"); sparse > 0) {
            const auto fam = RuleFamily::clenshaw_curtis(0.0, 1.0);
            opt.prior_nodes = smolyak(2, smolyak_level_for_count(2, fam, sparse), fam);
        } else {
            opt.prior_nodes = prior_rule(p.prior, c.get<int>("prior_nodes"));
        }
        opt.noise_nodes = standard_normal_rule(5, c.get<int>("noise_nodes"));
        opt.atoms_per_dim = c.get<int>("atoms_per_dim");
        opt.eig_atoms_per_dim = c.get<int>("eig_atoms_per_dim");
        auto model = p.model;
        const Measure prior = p.prior;
        p.evaluate = [=](const std::string& k, const Vector& t, std::uint64_t seed) -> UtilityEstimate {
            if (k == "W1") {
                if (!mc) throw ArgumentError("W1 for the 2D unknown needs estimator 'monte_carlo'");
                return mc_eval(prior, *model, 1.0, t, mc_n, mc_inner, seed);
            }
            if (k == "W2")
                return mc ? mc_eval(prior, *model, 2.0, t, mc_n, mc_inner, seed)
                          : u2_nested(prior, *model, t, InnerMethod::DiscreteOT, opt);
            if (k == "EIG") return eig_baseline(prior, *model, t, EigMethod::NestedQuadrature, opt);
            throw ArgumentError(k + " needs a linear-Gaussian model");
        };
        return p;
    }
    throw ParseError("experiment '" + id + "' is not a grid experiment");
}

inline double criterion_power(const std::string& k) { return k == "W1" ? 1.0 : 2.0; }

inline UtilityGrid evaluate_grid(const GridProblem& p, const std::string& criterion, const std::vector<Vector>& nodes,
                                 std::vector<int> shape, std::uint64_t seed, int threads, std::size_t crit_index) {
    UtilityGrid g;
    g.criterion = criterion;
    g.shape = std::move(shape);
    g.cells.resize(nodes.size());
    const auto t0 = std::chrono::steady_clock::now();
    parallel_for(nodes.size(), threads, [&](std::size_t i) {
        auto& cell = g.cells[i];
        cell.theta = nodes[i];
        try {
            cell.estimate = p.evaluate(criterion, nodes[i], derive_seed(seed, {crit_index, i}));
            if (std::isnan(cell.estimate.value)) cell.error = "NaN estimate";
            if (criterion != "EIG" && std::isinf(cell.estimate.value)) cell.error = "infinite estimate";
        } catch (const std::exception& e) {
            cell.error = e.what();
            cell.estimate.value = std::nan("");
        }
    });
    g.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return g;
}

inline std::string grid_csv(const UtilityGrid& g) {
    std::ostringstream os;
    os << "theta1,theta2,value,stderr\n";
    for (const auto& c : g.cells) {
        os << num(c.theta(0)) << ',' << (c.theta.size() > 1 ? num(c.theta(1)) : "") << ',' << num(c.estimate.value)
           << ',' << (c.estimate.std_error ? num(*c.estimate.std_error) : "") << '\n';
    }
    return os.str();
}

struct GridRun {
    std::vector<UtilityGrid> grids;
    GridProblem problem;
    int exit_code = kOk;
};

inline void echo_config(const ExperimentConfig& c) {
    fs::create_directories(c.out());
    write_text(c.out() / "resolved_config.json", c.resolved.dump(2) + "\n");
}

inline GridRun run_utility_grid(const ExperimentConfig& c, std::ostream& log = std::cerr) {
    GridRun run;
    run.problem = make_problem(c);
    std::vector<int> shape;
    const auto nodes = design_nodes(c, shape);
    echo_config(c);
    const auto criteria = c.get<std::vector<std::string>>("criteria");
    std::ostringstream summary;
    summary << "kind,theta1,theta2,value\n";
    json meta{{"code_version", WASSOED_VERSION}, {"config_hash", fnv_hex(c.resolved.dump())},
              {"model", run.problem.model_name}, {"assumptions", run.problem.assumptions}, {"criteria", json::object()}};
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        log << "[grid] " << criteria[k] << " on " << nodes.size() << " designs\n";
        auto g = evaluate_grid(run.problem, criteria[k], nodes, shape, c.seed(), c.threads(), k);
        write_text(c.out() / ("grid_" + g.criterion + ".csv"), grid_csv(g));
        if (c.get<bool>("svg")) {
            std::vector<double> vals;
            for (const auto& cell : g.cells) vals.push_back(cell.estimate.value);
            const auto lo = c.get<std::vector<double>>("theta_lower"), hi = c.get<std::vector<double>>("theta_upper");
            std::string pic;
            if (g.shape.size() == 2 && c.resolved["thetas"].empty()) {
                pic = svg::heatmap(run.problem.model_name + " " + g.criterion, g.shape[0], g.shape[1], vals, lo[0], hi[0],
                                   lo[1], hi[1]);
            } else {
                std::vector<std::pair<double, double>> pts;
                for (const auto& cell : g.cells) pts.emplace_back(cell.theta(0), cell.estimate.value);
                pic = svg::lines(run.problem.model_name + " " + g.criterion, {g.criterion}, {pts}, false);
            }
            write_text(c.out() / ("grid_" + g.criterion + ".svg"), pic);
        }
        if (const auto* best = g.argmax())
            summary << "argmax_" << g.criterion << ',' << num(best->theta(0)) << ','
                    << (best->theta.size() > 1 ? num(best->theta(1)) : "") << ',' << num(best->estimate.value) << '\n';
        json cm{{"wall_seconds", g.wall_seconds}, {"failures", g.failures()}};
        if (!g.cells.empty() && g.cells[0].error.empty()) {
            cm["estimator"] = to_string(g.cells[0].estimate.estimator);
            cm["outer_count"] = g.cells[0].estimate.outer_count;
            cm["inner_count"] = g.cells[0].estimate.inner_count;
        }
        json errs = json::array();
        for (const auto& cell : g.cells)
            if (!cell.error.empty()) errs.push_back({{"theta", std::vector<double>(cell.theta.data(), cell.theta.data() + cell.theta.size())}, {"error", cell.error}});
        cm["errors"] = errs;
        meta["criteria"][g.criterion] = cm;
        if (g.failures() * 100 > g.cells.size()) run.exit_code = kNumeric;
        run.grids.push_back(std::move(g));
    }
    write_text(c.out() / "summary.csv", summary.str());
    write_text(c.out() / "metadata.json", meta.dump(2) + "\n");
    return run;
}

// ---------------------------------------------------------------- convergence

/// Least-squares slope of log(err) against log(M).
inline double fit_loglog_slope(const std::vector<double>& m, const std::vector<double>& err) {
    if (m.size() != err.size() || m.size() < 2) throw ArgumentError("fit_loglog_slope: need two or more points");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (!(m[i] > 0) || !(err[i] > 0)) throw ArgumentError("fit_loglog_slope: values must be positive");
        const double x = std::log(m[i]), y = std::log(err[i]);
        sx += x, sy += y, sxx += x * x, sxy += x * y;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

inline std::vector<int> m_values(const ExperimentConfig& c) {
    auto explicit_m = c.get<std::vector<int>>("m_values");
    if (!explicit_m.empty()) {
        for (int m : explicit_m)
            if (m < 1) throw ParseError("m_values must be positive");
        return explicit_m;
    }
    const int lo = c.get<int>("m_min"), hi = c.get<int>("m_max"), per = c.get<int>("m_per_decade");
    if (lo < 1 || hi < lo || per < 1) throw ParseError("need 1 <= m_min <= m_max and m_per_decade >= 1");
    std::vector<int> out;
    for (int k = 0;; ++k) {
        const double v = lo * std::pow(10.0, static_cast<double>(k) / per);
        if (v > hi * (1 + 1e-12)) break;
        const int m = static_cast<int>(std::lround(v));
        if (out.empty() || m != out.back()) out.push_back(m);
    }
    return out;
}

struct ConvergenceRow {
    double theta;
    int m;
    double mean_abs_err;
    double std_error;
};

struct ConvergenceRun {
    std::vector<ConvergenceRow> rows;
    std::vector<std::pair<double, double>> slopes;  ///< (theta, slope)
    std::vector<std::pair<double, double>> references;  ///< (theta, U1)
    std::vector<UtilityEstimate> estimates;  ///< every U1^M, for the bound check
    std::vector<double> prior_moments;       ///< M_1 of the atoms behind each estimate
};

inline ConvergenceRun run_convergence_study(const ExperimentConfig& c, std::ostream& log = std::cerr) {
    const auto thetas = c.get<std::vector<double>>("thetas");
    const auto ms = m_values(c);
    const int ensemble = c.get<int>("ensemble");
    if (thetas.empty() || ensemble < 1) throw ParseError("need at least one theta and ensemble >= 1");
    const double noise_var = c.get<double>("noise_var");
    if (!(noise_var > 0.0)) throw ParseError("noise_var must be positive");
    echo_config(c);
    const auto model = linear_1d_noise_model(std::sqrt(noise_var));
    const auto prior = linear_1d_prior();

    ConvergenceRun run;
    std::ostringstream csv, summary;
    csv << "theta,M,mean_abs_err,stderr\n";
    summary << "kind,theta1,theta2,value\n";
    std::vector<std::string> labels;
    std::vector<std::vector<std::pair<double, double>>> series;
    for (std::size_t ti = 0; ti < thetas.size(); ++ti) {
        const Vector th = Vector::Constant(1, thetas[ti]);
        const double ref = u1_nested(prior, model, th).value;
        run.references.emplace_back(thetas[ti], ref);
        log << "[converge] theta=" << thetas[ti] << " U1=" << ref << "\n";
        std::vector<double> mm, ee;
        for (std::size_t mi = 0; mi < ms.size(); ++mi) {
            std::vector<UtilityEstimate> est(static_cast<std::size_t>(ensemble));
            std::vector<double> mom(est.size());
            parallel_for(est.size(), c.threads(), [&](std::size_t r) {
                const auto atoms = sample(prior, ms[mi], derive_seed(c.seed(), {ti, mi, r}));
                est[r] = u1_empirical_evidence_grid(atoms, model, th);
                mom[r] = moment_p(atoms, 1.0);
            });
            double s = 0, s2 = 0;
            for (std::size_t r = 0; r < est.size(); ++r) {
                const double d = std::abs(ref - est[r].value);
                s += d, s2 += d * d;
                run.estimates.push_back(est[r]);
                run.prior_moments.push_back(mom[r]);
            }
            const double mean = s / ensemble;
            const double se = ensemble > 1 ? std::sqrt(std::max(0.0, s2 / ensemble - mean * mean) / (ensemble - 1)) : 0.0;
            run.rows.push_back({thetas[ti], ms[mi], mean, se});
            csv << num(thetas[ti]) << ',' << ms[mi] << ',' << num(mean) << ',' << num(se) << '\n';
            mm.push_back(ms[mi]);
            ee.push_back(mean);
        }
        double slope = std::nan("");
        if (mm.size() >= 2 && std::all_of(ee.begin(), ee.end(), [](double e) { return e > 0; }))
            slope = fit_loglog_slope(mm, ee);
        run.slopes.emplace_back(thetas[ti], slope);
        summary << "slope," << num(thetas[ti]) << ",," << num(slope) << '\n';
        labels.push_back("theta=" + num(thetas[ti]) + " slope " + num(std::round(slope * 1000) / 1000));
        std::vector<std::pair<double, double>> pts;
        for (std::size_t i = 0; i < mm.size(); ++i) pts.emplace_back(mm[i], ee[i]);
        series.push_back(std::move(pts));
    }
    write_text(c.out() / "convergence.csv", csv.str());
    write_text(c.out() / "summary.csv", summary.str());
    if (c.get<bool>("svg"))
        write_text(c.out() / "convergence.svg", svg::lines("mean |U1 - U1^M| vs M", labels, series, true));
    json meta{{"code_version", WASSOED_VERSION}, {"config_hash", fnv_hex(c.resolved.dump())}, {"references", json::array()}};
    for (auto [t, r] : run.references) meta["references"].push_back({{"theta", t}, {"U1", r}});
    write_text(c.out() / "metadata.json", meta.dump(2) + "\n");
    return run;
}

// ---------------------------------------------------------------- measures from config

inline Vector vec_of(const json& j, const char* what) {
    if (!j.is_array() || j.empty()) throw ParseError(std::string(what) + " must be a nonempty array");
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw ParseError(std::string(what) + " must hold numbers");
        v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    }
    return v;
}

inline Matrix mat_of(const json& j, const char* what) {
    if (!j.is_array() || j.empty() || !j[0].is_array()) throw ParseError(std::string(what) + " must be a nested array");
    Matrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j[0].size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        const Vector r = vec_of(j[i], what);
        if (r.size() != m.cols()) throw ParseError(std::string(what) + " is ragged");
        m.row(static_cast<Eigen::Index>(i)) = r.transpose();
    }
    return m;
}

inline void check_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
    for (auto& [k, v] : j.items())
        if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; }))
            throw ParseError("unknown key '" + k + "' in " + where);
}

/// {"type": "gaussian", "mean": [...], "cov": [[...]]} | {"type": "uniform", "lower", "upper"}
/// | {"type": "atoms", "file": "a.csv"} (w,x1,...,xn, relative to the config file).
inline Measure parse_measure(const json& j, const fs::path& base, const std::string& where) {
    if (!j.is_object() || !j.contains("type")) throw ParseError(where + ": measure needs a 'type'");
    const auto type = j["type"].get<std::string>();
    if (type == "gaussian") {
        check_keys(j, {"type", "mean", "cov", "box_lower", "box_upper"}, where);
        return GaussianMeasure(vec_of(j.at("mean"), "mean"), mat_of(j.at("cov"), "cov"));
    }
    if (type == "uniform") {
        check_keys(j, {"type", "lower", "upper"}, where);
        return UniformBoxMeasure(vec_of(j.at("lower"), "lower"), vec_of(j.at("upper"), "upper"));
    }
    if (type == "atoms") {
        check_keys(j, {"type", "file"}, where);
        const fs::path f = base / j.at("file").get<std::string>();
        std::ifstream is(f);
        if (!is) throw ParseError(where + ": cannot open '" + f.string() + "'");
        try {
            return read_empirical_csv(is);
        } catch (const ParseError& e) {
            throw ParseError(f.string() + ": " + e.what());  // what() already names the line
        }
    }
    throw ParseError(where + ": unknown measure type '" + type + "'");
}

inline double run_distance(const ExperimentConfig& c, std::ostream& out) {
    const auto a = parse_measure(c.resolved["measure_a"], c.base_dir, "measure_a");
    const auto b = parse_measure(c.resolved["measure_b"], c.base_dir, "measure_b");
    const double p = c.get<double>("p");
    if (!(p >= 1.0)) throw ParseError("p must be >= 1");
    echo_config(c);
    double dist;
    std::string plan;
    const auto* ea = std::get_if<EmpiricalMeasure>(&a);
    const auto* eb = std::get_if<EmpiricalMeasure>(&b);
    if (ea && eb) {
        const auto t = wp_discrete(*ea, *eb, p);
        dist = t.distance;
        std::ostringstream os;
        os << "i,j,mass\n";
        auto entries = t.plan.entries;
        std::sort(entries.begin(), entries.end(), [](const auto& x, const auto& y) {
            return x.row != y.row ? x.row < y.row : x.col < y.col;
        });
        for (const auto& e : entries)
            if (e.mass > 0) os << e.row << ',' << e.col << ',' << num(e.mass) << '\n';
        plan = os.str();
    } else {
        dist = std::pow(std::max(0.0, wpp(a, b, p, c.get<int>("resolution"))), 1.0 / p);
    }
    write_text(c.out() / "distance.csv", "p,distance\n" + num(p) + ',' + num(dist) + '\n');
    if (!plan.empty() && c.get<bool>("write_plan")) write_text(c.out() / "plan.csv", plan);
    out << num(dist) << '\n';
    return dist;
}

inline BoxDensity box_density(const json& j, const fs::path& base, const std::string& where) {
    const auto m = parse_measure(j, base, where);
    if (const auto* u = std::get_if<UniformBoxMeasure>(&m)) return BoxDensity::uniform(u->lower(), u->upper());
    if (const auto* g = std::get_if<GaussianMeasure>(&m)) {
        if (!j.contains("box_lower") || !j.contains("box_upper"))
            throw ParseError(where + ": a 2D Gaussian needs box_lower / box_upper");
        return BoxDensity::gaussian(*g, vec_of(j["box_lower"], "box_lower"), vec_of(j["box_upper"], "box_upper"));
    }
    throw ParseError(where + ": 2D transport needs a gaussian or uniform density");
}

inline void run_transport(const ExperimentConfig& c, std::ostream& out) {
    const json& js = c.resolved["source"];
    const json& jt = c.resolved["target"];
    const auto src = parse_measure(js, c.base_dir, "source");
    const auto tgt = parse_measure(jt, c.base_dir, "target");
    const int probes = c.get<int>("probes");
    if (probes < 2) throw ParseError("probes must be >= 2");
    echo_config(c);
    if (dim(src) == 1 && dim(tgt) == 1) {
        const auto map = transport_map_1d(src, tgt);
        const auto [lo, hi] = detail::support_bracket(src, 1e-3);
        std::ostringstream os;
        os << "x,T\n";
        for (int i = 0; i < probes; ++i) {
            const double x = lo + (hi - lo) * i / (probes - 1);
            os << num(x) << ',' << num(map(x)) << '\n';
        }
        write_text(c.out() / "map.csv", os.str());
        // standard rule for the source type, as transport_cost expects
        QuadratureRule r = gauss_hermite(65);
        if (const auto* u = std::get_if<UniformBoxMeasure>(&src)) r = gauss_legendre(65, u->lower()(0), u->upper()(0));
        const double cost = transport_cost(map, src, r);
        write_text(c.out() / "cost.csv", "cost\n" + num(cost) + '\n');
        out << num(cost) << '\n';
        return;
    }
    if (dim(src) != 2 || dim(tgt) != 2) throw ParseError("transport supports 1D-1D and 2D-2D pairs");
    MongeAmpereOptions opt;
    opt.interior_count = c.get<int>("interior_count");
    opt.boundary_count = c.get<int>("boundary_count");
    const auto b1 = box_density(js, c.base_dir, "source"), b2 = box_density(jt, c.base_dir, "target");
    const auto pot = solve_monge_ampere(b1, b2, opt);
    {
        std::ostringstream os;
        write_potential_csv(os, pot);
        write_text(c.out() / "potential.csv", os.str());
    }
    std::ostringstream os;
    os << "x1,x2,T1,T2\n";
    for (int i = 0; i < probes; ++i)
        for (int j = 0; j < probes; ++j) {
            Vector x(2);
            x << b1.lower(0) + b1.width()(0) * i / (probes - 1), b1.lower(1) + b1.width()(1) * j / (probes - 1);
            const Vector t = pot.map(x);
            os << num(x(0)) << ',' << num(x(1)) << ',' << num(t(0)) << ',' << num(t(1)) << '\n';
        }
    write_text(c.out() / "map.csv", os.str());
    const auto rule = tensor_product({gauss_legendre(32, b1.lower(0), b1.upper(0)), gauss_legendre(32, b1.lower(1), b1.upper(1))});
    const double cost = transport_cost(pot, b1, rule);
    write_text(c.out() / "cost.csv", "cost\n" + num(cost) + '\n');
    out << num(cost) << '\n';
}

// ---------------------------------------------------------------- checks

struct Check {
    std::string name;
    bool pass;
    std::string detail;
};

/// Max violation of a dihedral symmetry of the square grid, relative to the
/// allowed tolerance 2 * sqrt(se_a^2 + se_b^2), with a floor for deterministic estimates.
inline std::pair<bool, std::string> grid_symmetry(const UtilityGrid& g, const std::vector<std::string>& ops,
                                                  double floor_rel = 1e-6) {
    if (g.shape.size() != 2 || g.shape[0] != g.shape[1]) return {false, "not a square grid"};
    const int n = g.shape[0];
    double worst = 0.0;
    std::string where;
    double scale = 0.0;
    for (const auto& c : g.cells)
        if (std::isfinite(c.estimate.value)) scale = std::max(scale, std::abs(c.estimate.value));
    for (const auto& op : ops)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                int a = i, b = j;
                if (op == "swap") a = j, b = i;
                else if (op == "flip1") a = n - 1 - i;
                else if (op == "flip2") b = n - 1 - j;
                else if (op == "antiswap") a = n - 1 - j, b = n - 1 - i;
                const auto& u = g.cells[static_cast<std::size_t>(i * n + j)].estimate;
                const auto& v = g.cells[static_cast<std::size_t>(a * n + b)].estimate;
                const double se = std::hypot(u.std_error.value_or(0.0), v.std_error.value_or(0.0));
                const double tol = std::max(2.0 * se, floor_rel * scale);
                const double ratio = std::abs(u.value - v.value) / tol;
                if (!(ratio <= worst)) {
                    worst = ratio;
                    where = op + " at (" + std::to_string(i) + "," + std::to_string(j) + ")";
                }
            }
    std::ostringstream os;
    os << "worst |diff|/tol = " << worst << " (" << where << ")";
    return {worst <= 1.0, os.str()};
}

inline bool bound_holds(const UtilityEstimate& u, const Measure& prior, double p) {
    return within_moment_bound(u, prior, p);
}

/// Same bound with the prior moment M_p given directly (empirical priors).
inline bool bound_holds(const UtilityEstimate& u, double prior_moment, double p) {
    if (u.diverged) return false;
    return u.value <= std::pow(2.0, p) * prior_moment * (1.0 + 1e-6) + 3.0 * u.std_error.value_or(0.0);
}

/// Runs the experiment and asserts the thresholds that apply to it.
inline std::vector<Check> selfcheck(const ExperimentConfig& c, std::ostream& log = std::cerr) {
    std::vector<Check> out;
    const std::string id = c.experiment();
    if (id == "linear1d-convergence") {
        const auto run = run_convergence_study(c, log);
        for (auto [t, s] : run.slopes)
            out.push_back({"slope theta=" + num(t), s >= -0.65 && s <= -0.35, "slope " + num(s)});
        // each U1^M is a utility under its own empirical prior
        bool ok = true;
        for (std::size_t i = 0; i < run.estimates.size(); ++i) ok = ok && bound_holds(run.estimates[i], run.prior_moments[i], 1.0);
        out.push_back({"moment bound", ok, std::to_string(run.estimates.size()) + " estimates"});
        return out;
    }
    if (id == "distance" || id == "transport") {
        std::ostringstream sink;
        if (id == "distance") run_distance(c, sink);
        else run_transport(c, sink);
        out.push_back({id + " completes", true, sink.str()});
        return out;
    }
    const auto run = run_utility_grid(c, log);
    out.push_back({"completion", run.exit_code == kOk, "failed cells within 1%"});
    for (const auto& g : run.grids) {
        if (g.criterion != "EIG") {
            bool ok = true;
            for (const auto& cell : g.cells) ok = ok && cell.error.empty() && bound_holds(cell.estimate, run.problem.prior, criterion_power(g.criterion));
            out.push_back({"moment bound " + g.criterion, ok, ""});
        }
        if (id == "example1-grid" && c.resolved["thetas"].empty()) {
            const auto [ok, d] = grid_symmetry(g, {"swap"});
            out.push_back({"swap symmetry " + g.criterion, ok, d});
        }
        if (id == "example2-grid" && c.resolved["thetas"].empty()) {
            const auto [ok, d] = grid_symmetry(g, {"flip1", "flip2", "swap", "antiswap"});
            out.push_back({"square symmetries " + g.criterion, ok, d});
        }
    }
    return out;
}

}  // namespace wassoed::cli
