#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmp/mmp.hpp"

namespace mmp::cli {
namespace {

using nlohmann::json;

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Stream ids above every replicate index, reserved for data generation and splits.
constexpr std::uint64_t kDataStream = std::uint64_t{1} << 63;
constexpr std::uint64_t kSplitStream = kDataStream + (std::uint64_t{1} << 32);

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

enum class Kind { Unsigned, Number, String, Boolean, NumberOrString, NumberList, UnsignedList, StringList, Object };

using Schema = std::map<std::string, Kind>;

const char* kind_name(Kind k) {
    switch (k) {
    case Kind::Unsigned:
        return "a nonnegative integer";
    case Kind::Number:
        return "a number";
    case Kind::String:
        return "a string";
    case Kind::Boolean:
        return "a boolean";
    case Kind::NumberOrString:
        return "a number or a string";
    case Kind::NumberList:
        return "a list of numbers";
    case Kind::UnsignedList:
        return "a list of nonnegative integers";
    case Kind::StringList:
        return "a list of strings";
    case Kind::Object:
        return "an object";
    }
    return "?";
}

bool matches(const json& v, Kind k) {
    auto all_of = [&](auto pred) { return v.is_array() && std::all_of(v.begin(), v.end(), pred); };
    switch (k) {
    case Kind::Unsigned:
        return v.is_number_unsigned();
    case Kind::Number:
        return v.is_number();
    case Kind::String:
        return v.is_string();
    case Kind::Boolean:
        return v.is_boolean();
    case Kind::NumberOrString:
        return v.is_number() || v.is_string();
    case Kind::NumberList:
        return all_of([](const json& e) { return e.is_number(); });
    case Kind::UnsignedList:
        return all_of([](const json& e) { return e.is_number_unsigned(); });
    case Kind::StringList:
        return all_of([](const json& e) { return e.is_string(); });
    case Kind::Object:
        return v.is_object();
    }
    return false;
}

void check_schema(const json& cfg, const Schema& schema, const std::string& where) {
    if (!cfg.is_object()) {
        throw ConfigError(where + " must be a JSON object");
    }
    for (const auto& [key, value] : cfg.items()) {
        const auto it = schema.find(key);
        if (it == schema.end()) {
            throw ConfigError("unknown key '" + key + "' in " + where);
        }
        if (!matches(value, it->second)) {
            throw ConfigError("key '" + key + "' in " + where + " must be " + kind_name(it->second));
        }
    }
}

const Schema kCommon{{"seed", Kind::Unsigned},
                     {"replicates", Kind::Unsigned},
                     {"horizon", Kind::Unsigned},
                     {"out_dir", Kind::String},
                     {"threads", Kind::Unsigned}};

const Schema kUnivariateData{{"n", Kind::Unsigned},
                             {"dgp", Kind::Object},
                             {"data", Kind::String},
                             {"data_column", Kind::String}};

const Schema kDgp{{"family", Kind::String}, {"mean", Kind::Number},  {"variance", Kind::Number},
                  {"xi", Kind::Number},     {"omega", Kind::Number}, {"alpha", Kind::Number}};

Schema merged(std::initializer_list<const Schema*> parts, Schema extra) {
    for (const Schema* p : parts) {
        extra.insert(p->begin(), p->end());
    }
    return extra;
}

Schema schema_for(const std::string& sub) {
    if (sub == "simulate" || sub == "paths") {
        return merged({&kCommon, &kUnivariateData}, {{"method", Kind::String},
                                                     {"c", Kind::NumberOrString},
                                                     {"folds", Kind::Unsigned},
                                                     {"validation_fraction", Kind::Number},
                                                     {"quantiles", Kind::NumberList},
                                                     {"record_paths", Kind::Boolean},
                                                     {"path_stride", Kind::Unsigned}});
    }
    if (sub == "select-c") {
        return merged({&kCommon, &kUnivariateData}, {{"scheme", Kind::String},
                                                     {"folds", Kind::Unsigned},
                                                     {"validation_fraction", Kind::Number},
                                                     {"seeds", Kind::Unsigned}});
    }
    return merged({&kCommon}, {{"data", Kind::String},
                               {"target", Kind::String},
                               {"features", Kind::StringList},
                               {"synthetic", Kind::Object},
                               {"train_fraction", Kind::Number},
                               {"splits", Kind::Unsigned},
                               {"folds", Kind::Unsigned},
                               {"c", Kind::NumberOrString},
                               {"c_grid", Kind::NumberList},
                               {"update", Kind::String},
                               {"report_rows", Kind::UnsignedList},
                               {"compare_exact_online", Kind::Boolean},
                               {"compare_replicates", Kind::Unsigned}});
}

template <class T>
T get_or(const json& cfg, const std::string& key, T fallback) {
    return cfg.contains(key) ? cfg.at(key).get<T>() : fallback;
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

std::string fmt(double x) {
    if (std::isnan(x)) {
        return "nan";
    }
    if (std::isinf(x)) {
        return x > 0 ? "inf" : "-inf";
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

json json_number(double x) {
    if (std::isfinite(x)) {
        return x;
    }
    return fmt(x);
}

std::string csv_quote(const std::string& s) {
    std::string out = "\"";
    for (char ch : s) {
        out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    }
    return out + "\"";
}

struct Context {
    std::string subcommand;
    json config;
    std::uint64_t seed = 0;
    std::string hash;
    std::filesystem::path out_dir;
    std::ostream* out = nullptr;

    [[nodiscard]] std::string header(const std::vector<std::string>& extra = {}) const {
        std::string h = "# config_hash=" + hash + " seed=" + std::to_string(seed) + "\n";
        for (const auto& line : extra) {
            h += "# " + line + "\n";
        }
        return h;
    }

    void write(const std::string& name, const std::string& body) const {
        std::filesystem::create_directories(out_dir);
        std::ofstream f(out_dir / name, std::ios::binary);
        if (!f) {
            throw ConfigError("cannot write " + (out_dir / name).string());
        }
        f << body;
    }

    void write_metadata(json result) const {
        json meta{{"subcommand", subcommand}, {"config", config}, {"config_hash", hash}, {"seed", seed},
                  {"result", std::move(result)}};
        write("run.json", meta.dump(2) + "\n");
    }
};

// ---------------------------------------------------------------------------
// Data ingestion
// ---------------------------------------------------------------------------

struct Table {
    std::vector<std::string> names;
    std::vector<std::vector<double>> columns;

    [[nodiscard]] const std::vector<double>& column(const std::string& name) const {
        const auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) {
            throw DataError("column '" + name + "' not found");
        }
        return columns[static_cast<std::size_t>(it - names.begin())];
    }
};

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) {
        const auto b = cell.find_first_not_of(" \t\r\"");
        const auto e = cell.find_last_not_of(" \t\r\"");
        cells.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') {
        cells.emplace_back();
    }
    return cells;
}

/// Numeric CSV with a header row; lines starting with '#' are skipped.
Table read_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw DataError("cannot open data file '" + path + "'");
    }
    Table t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#' || line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        auto cells = split_line(line);
        if (t.names.empty()) {
            t.names = std::move(cells);
            t.columns.resize(t.names.size());
            continue;
        }
        if (cells.size() != t.names.size()) {
            throw DataError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.names.size()) +
                            " fields, got " + std::to_string(cells.size()));
        }
        for (std::size_t k = 0; k < cells.size(); ++k) {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(cells[k], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != cells[k].size() || cells[k].empty() || !std::isfinite(v)) {
                throw DataError(path + ":" + std::to_string(lineno) + ": field '" + cells[k] +
                                "' is not a finite number");
            }
            t.columns[k].push_back(v);
        }
    }
    if (t.names.empty() || t.columns.front().empty()) {
        throw DataError("data file '" + path + "' has no rows");
    }
    return t;
}

std::vector<double> generate_univariate(const json& dgp, std::size_t n, std::uint64_t seed) {
    check_schema(dgp, kDgp, "dgp");
    const auto family = get_or<std::string>(dgp, "family", "normal");
    RngStream rng(seed, kDataStream);
    std::vector<double> ys(n);
    if (family == "normal") {
        const double mean = get_or(dgp, "mean", 1.0);
        const double variance = get_or(dgp, "variance", 25.0);
        if (!(variance > 0.0)) {
            throw ConfigError("dgp variance must be positive");
        }
        const NormalFamily f;
        for (double& y : ys) {
            y = f.sample({mean, variance}, rng);
        }
    } else if (family == "skewnormal") {
        const SkewNormalParams p{get_or(dgp, "xi", 1.0), get_or(dgp, "omega", 5.0), get_or(dgp, "alpha", 1.0)};
        try {
            p.validate();
        } catch (const InvalidInput& e) {
            throw ConfigError(e.what());
        }
        for (double& y : ys) {
            y = skewnormal_sample(p, rng);
        }
    } else {
        throw ConfigError("dgp family must be 'normal' or 'skewnormal'");
    }
    return ys;
}

std::vector<double> load_univariate(const json& cfg, std::uint64_t seed) {
    if (cfg.contains("data")) {
        if (cfg.contains("dgp") || cfg.contains("n")) {
            throw ConfigError("'data' cannot be combined with 'dgp' or 'n'");
        }
        const Table t = read_csv(cfg.at("data").get<std::string>());
        return cfg.contains("data_column") ? t.column(cfg.at("data_column").get<std::string>()) : t.columns.front();
    }
    const std::size_t n = get_or<std::size_t>(cfg, "n", 100);
    if (n == 0) {
        throw ConfigError("n must be positive");
    }
    return generate_univariate(get_or(cfg, "dgp", json::object()), n, seed);
}

// ---------------------------------------------------------------------------
// Parsing helpers
// ---------------------------------------------------------------------------

SelectionScheme parse_scheme(const std::string& name, const json& cfg) {
    if (name == "loocv") {
        return LeaveOneOut{};
    }
    if (name == "kfold") {
        return KFold{get_or<std::size_t>(cfg, "folds", 5)};
    }
    if (name == "holdout") {
        const double frac = get_or(cfg, "validation_fraction", 0.5);
        if (!(frac > 0.0 && frac < 1.0)) {
            throw ConfigError("validation_fraction must lie in (0,1)");
        }
        return Holdout{frac};
    }
    throw ConfigError("scheme must be 'loocv', 'kfold' or 'holdout'");
}

Concentration parse_fixed_c(const json& v) {
    if (v.is_number()) {
        const double c = v.get<double>();
        if (!(c >= 0.0)) {
            throw ConfigError("c must be nonnegative");
        }
        return Concentration(c);
    }
    if (v.get<std::string>() == "inf") {
        return Concentration::infinite();
    }
    throw ConfigError("c must be a number, 'inf', or a selection scheme name");
}

std::size_t forward_steps(const json& cfg, std::size_t fallback) {
    const auto h = get_or<std::size_t>(cfg, "horizon", fallback);
    if (h == 0) {
        throw ConfigError("horizon (forward steps) must be positive");
    }
    return h;
}

std::size_t replicates_of(const json& cfg) {
    const auto b = get_or<std::size_t>(cfg, "replicates", 1000);
    if (b == 0) {
        throw ConfigError("replicates must be positive");
    }
    return b;
}

// ---------------------------------------------------------------------------
// simulate / paths
// ---------------------------------------------------------------------------

int cmd_simulate(const Context& ctx, bool force_paths) {
    const json& cfg = ctx.config;
    const Dataset data(load_univariate(cfg, ctx.seed));
    const std::size_t n = data.size();
    const auto method = get_or<std::string>(cfg, "method", "mixture");

    TrajectoryConfig tc;
    tc.horizon = n + forward_steps(cfg, 1500);
    tc.replicates = replicates_of(cfg);
    tc.threads = get_or<unsigned>(cfg, "threads", 0);
    tc.quantiles = get_or(cfg, "quantiles", std::vector<double>{0.5, 0.95});
    tc.record_paths = force_paths || get_or(cfg, "record_paths", false);
    tc.path_stride = get_or<std::size_t>(cfg, "path_stride", 10);
    try {
        tc.validate(n);
    } catch (const InvalidInput& e) {
        throw ConfigError(e.what());
    }

    json result{{"n", n}, {"method", method}};
    const NormalFamily family;
    PosteriorRun run;
    if (method == "mixture") {
        const json c = get_or(cfg, "c", json("loocv"));
        if (c.is_string() && c.get<std::string>() != "inf") {
            const auto sel = select_c(data, family, parse_scheme(c.get<std::string>(), cfg), ctx.seed);
            tc.concentration = sel.c_hat;
            result["lambda_hat"] = sel.lambda_hat;
        } else {
            tc.concentration = parse_fixed_c(c);
        }
        result["c"] = json_number(tc.concentration.value());
        run = run_moment_mp(data, family, tc, ctx.seed);
    } else if (method == "bb" || method == "bb-direct") {
        if (cfg.contains("c")) {
            throw ConfigError("'c' does not apply to the Bayesian bootstrap");
        }
        run = run_bb(data, tc, method == "bb" ? BootstrapMode::Sequential : BootstrapMode::Direct, ctx.seed);
    } else if (method == "parametric") {
        tc.concentration = Concentration::infinite();
        run = run_moment_mp(data, family, tc, ctx.seed);
    } else if (method == "parametric-score") {
        run = run_parametric_mp_score(data, family, tc, ctx.seed);
    } else {
        throw ConfigError("method must be 'mixture', 'bb', 'bb-direct', 'parametric' or 'parametric-score'");
    }
    if (run.samples.empty()) {
        throw NumericalDegeneracy("every trajectory aborted: " + run.aborted.front().reason);
    }

    std::string body = ctx.header({"method=" + method});
    body += "replicate,mean,variance,skewness,kurtosis";
    for (double q : tc.quantiles) {
        body += "," + Functionals::quantile_name(q);
    }
    body += "\n";
    for (const auto& s : run.samples) {
        const auto& f = s.functionals;
        body += std::to_string(s.replicate) + "," + fmt(f.mean) + "," + fmt(f.variance) + "," + fmt(f.skewness) +
                "," + fmt(f.kurtosis);
        for (double q : tc.quantiles) {
            body += "," + fmt(f.quantile(q));
        }
        body += "\n";
    }
    ctx.write("samples.csv", body);

    std::string aborted = ctx.header() + "replicate,step,reason\n";
    for (const auto& a : run.aborted) {
        aborted += std::to_string(a.replicate) + "," + std::to_string(a.step) + "," + csv_quote(a.reason) + "\n";
    }
    ctx.write("aborted.csv", aborted);

    if (tc.record_paths) {
        std::string paths = ctx.header() + "replicate,count";
        const std::size_t order = run.samples.front().final_moments.order();
        for (std::size_t k = 1; k <= order; ++k) {
            paths += ",m" + std::to_string(k);
        }
        paths += "\n";
        for (const auto& s : run.samples) {
            for (const auto& state : s.path) {
                paths += std::to_string(s.replicate) + "," + std::to_string(state.count());
                for (double m : state.moments()) {
                    paths += "," + fmt(m);
                }
                paths += "\n";
            }
        }
        ctx.write("paths.csv", paths);
    }

    result["horizon"] = tc.horizon;
    result["replicates"] = tc.replicates;
    result["completed"] = run.samples.size();
    result["aborted"] = run.aborted.size();
    ctx.write_metadata(result);
    *ctx.out << "wrote " << run.samples.size() << " posterior samples (" << run.aborted.size() << " aborted) to "
             << ctx.out_dir.string() << "\n";
    return kSuccess;
}

// ---------------------------------------------------------------------------
// select-c
// ---------------------------------------------------------------------------

int cmd_select_c(const Context& ctx) {
    const json& cfg = ctx.config;
    const auto scheme_name = get_or<std::string>(cfg, "scheme", "loocv");
    const SelectionScheme scheme = parse_scheme(scheme_name, cfg);
    const auto seeds = get_or<std::size_t>(cfg, "seeds", 1);
    if (seeds == 0) {
        throw ConfigError("seeds must be positive");
    }
    if (seeds > 1 && cfg.contains("data")) {
        throw ConfigError("'seeds' repeats simulated datasets and cannot be used with 'data'");
    }
    const NormalFamily family;
    const Dataset data(load_univariate(cfg, ctx.seed));
    const auto sel = select_c(data, family, scheme, ctx.seed);

    std::string body = ctx.header({"scheme=" + scheme_name, "lambda_hat=" + fmt(sel.lambda_hat),
                                   "c_hat=" + fmt(sel.c_hat.value())});
    body += "c,score\n";
    for (const auto& pt : sel.score_curve) {
        body += fmt(pt.c) + "," + fmt(pt.score) + "\n";
    }
    ctx.write("score_curve.csv", body);

    json result{{"n", data.size()},
                {"scheme", scheme_name},
                {"lambda_hat", sel.lambda_hat},
                {"c_hat", json_number(sel.c_hat.value())},
                {"psi",
                 {{"psi_av", sel.psi.psi_av},
                  {"psi_an", sel.psi.psi_an},
                  {"psi_bv", sel.psi.psi_bv},
                  {"psi_bn", sel.psi.psi_bn},
                  {"psi_cn", sel.psi.psi_cn}}}};

    if (seeds > 1) {
        std::size_t infinite = 0;
        std::size_t failed = 0;
        for (std::size_t s = 0; s < seeds; ++s) {
            const std::uint64_t dataset_seed = ctx.seed + s;
            try {
                const Dataset d(load_univariate(cfg, dataset_seed));
                infinite += select_c(d, family, scheme, dataset_seed).c_hat.is_infinite() ? 1 : 0;
            } catch (const NumericalDegeneracy&) {
                ++failed;
            } catch (const DegenerateMoments&) {
                ++failed;
            }
        }
        const json dgp = get_or(cfg, "dgp", json::object());
        const double fraction = static_cast<double>(infinite) / static_cast<double>(seeds - failed);
        std::string table = ctx.header({"scheme=" + scheme_name});
        table += "dgp,n,seeds,failed,infinite,fraction_infinite\n";
        table += csv_quote(get_or<std::string>(dgp, "family", "normal")) + "," + std::to_string(data.size()) + "," +
                 std::to_string(seeds) + "," + std::to_string(failed) + "," + std::to_string(infinite) + "," +
                 fmt(fraction) + "\n";
        ctx.write("infinity_fraction.csv", table);
        result["seeds"] = seeds;
        result["fraction_infinite"] = fraction;
    }
    ctx.write_metadata(result);
    *ctx.out << "lambda_hat=" << fmt(sel.lambda_hat) << " c_hat=" << fmt(sel.c_hat.value()) << "\n";
    return kSuccess;
}

// ---------------------------------------------------------------------------
// logistic
// ---------------------------------------------------------------------------

RegressionDataset load_regression(const json& cfg, std::uint64_t seed) {
    if (cfg.contains("data")) {
        if (cfg.contains("synthetic")) {
            throw ConfigError("'data' cannot be combined with 'synthetic'");
        }
        if (!cfg.contains("target")) {
            throw ConfigError("'target' column is required with 'data'");
        }
        const Table t = read_csv(cfg.at("data").get<std::string>());
        const auto target = cfg.at("target").get<std::string>();
        std::vector<std::string> features;
        if (cfg.contains("features")) {
            features = cfg.at("features").get<std::vector<std::string>>();
        } else {
            std::copy_if(t.names.begin(), t.names.end(), std::back_inserter(features),
                         [&](const std::string& s) { return s != target; });
        }
        if (features.empty()) {
            throw ConfigError("no feature columns selected");
        }
        const auto& y = t.column(target);
        Eigen::VectorXd yv(static_cast<Eigen::Index>(y.size()));
        for (std::size_t r = 0; r < y.size(); ++r) {
            if (y[r] != 0.0 && y[r] != 1.0) {
                throw DataError("target column '" + target + "' is not binary (row " + std::to_string(r + 1) + ")");
            }
            yv(static_cast<Eigen::Index>(r)) = y[r];
        }
        Eigen::MatrixXd x(yv.size(), static_cast<Eigen::Index>(features.size()));
        for (std::size_t k = 0; k < features.size(); ++k) {
            const auto& col = t.column(features[k]);
            for (std::size_t r = 0; r < col.size(); ++r) {
                x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = col[r];
            }
        }
        return RegressionDataset::with_intercept(x, std::move(yv));
    }
    const json syn = get_or(cfg, "synthetic", json::object());
    check_schema(syn, {{"n", Kind::Unsigned}, {"p", Kind::Unsigned}}, "synthetic");
    const auto n = get_or<std::size_t>(syn, "n", 1000);
    const auto p = get_or<std::size_t>(syn, "p", 5);
    if (n < 10 || p == 0) {
        throw ConfigError("synthetic data needs n >= 10 and p >= 1");
    }
    RngStream rng(seed, kDataStream);
    return simulate_logistic_data(n, default_logistic_coefficients(p), rng);
}

struct CChoice {
    bool cross_validate = true;
    Concentration fixed;
};

Concentration choose_c(const CChoice& choice, const RegressionDataset& train,
                       const RegressionSelectionOptions& opt, std::uint64_t seed) {
    return choice.cross_validate ? select_c_regression(train, opt, seed).c_hat : choice.fixed;
}

int cmd_logistic(const Context& ctx) {
    const json& cfg = ctx.config;
    const RegressionDataset raw = load_regression(cfg, ctx.seed);
    const std::size_t n = raw.size();

    CChoice choice;
    const json c = get_or(cfg, "c", json("cv"));
    if (!(c.is_string() && c.get<std::string>() == "cv")) {
        choice.cross_validate = false;
        choice.fixed = parse_fixed_c(c);
    }
    RegressionSelectionOptions opt;
    opt.folds = get_or<std::size_t>(cfg, "folds", 5);
    if (cfg.contains("c_grid")) {
        opt.c_grid = cfg.at("c_grid").get<std::vector<double>>();
    }
    if (opt.folds < 2 || opt.c_grid.empty() || opt.c_grid.front() != 0.0) {
        throw ConfigError("folds must be >= 2 and c_grid must start with 0");
    }
    const double train_fraction = get_or(cfg, "train_fraction", 0.5);
    const auto splits = get_or<std::size_t>(cfg, "splits", 5);
    const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n)));
    if (splits == 0 || n_train < 2 || n_train >= n) {
        throw ConfigError("splits must be positive and train_fraction must leave both parts nonempty");
    }
    const auto update_name = get_or<std::string>(cfg, "update", "online");
    if (update_name != "online" && update_name != "exact") {
        throw ConfigError("update must be 'online' or 'exact'");
    }

    // Hold-out evaluation over repeated random splits.
    std::string scores = ctx.header() + "split,c_hat,lambda,mixture,parametric\n";
    std::vector<double> mix;
    std::vector<double> par;
    for (std::size_t s = 0; s < splits; ++s) {
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        RngStream rng(ctx.seed, kSplitStream + s);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<std::size_t> train_rows(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
        std::vector<std::size_t> test_rows(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
        std::sort(train_rows.begin(), train_rows.end());
        std::sort(test_rows.begin(), test_rows.end());
        const RegressionDataset train_raw = raw.subset(train_rows);
        const Standardization z = fit_standardization(train_raw);
        const RegressionDataset train = z.apply(train_raw);
        const RegressionDataset test = z.apply(raw.subset(test_rows));
        const Concentration chosen = choose_c(choice, train, opt, ctx.seed + s);
        const JointScorer scorer(train, test, fit_mle_logistic(train), Link::Logit);
        const double lambda = chosen.weight(static_cast<double>(train.size()));
        const double base = scorer.score(0.0);
        mix.push_back(scorer.score(lambda) - base);
        par.push_back(scorer.score(1.0) - base);
        scores += std::to_string(s) + "," + fmt(chosen.value()) + "," + fmt(lambda) + "," + fmt(mix.back()) + "," +
                  fmt(par.back()) + "\n";
    }
    ctx.write("relative_scores.csv", scores);
    auto mean_se = [](const std::vector<double>& v) {
        const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v) {
            ss += (x - m) * (x - m);
        }
        const double se = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()))
                                       : 0.0;
        return std::pair{m, se};
    };
    const auto [mix_mean, mix_se] = mean_se(mix);
    const auto [par_mean, par_se] = mean_se(par);

    // Posterior on the full standardized dataset.
    const RegressionDataset data = standardize(raw);
    GlmConfig gc;
    gc.horizon = n + forward_steps(cfg, 4000);
    gc.replicates = replicates_of(cfg);
    gc.threads = get_or<unsigned>(cfg, "threads", 0);
    gc.update = update_name == "exact" ? BetaUpdate::Exact : BetaUpdate::Online;
    gc.link = Link::Logit;
    gc.report_rows = get_or(cfg, "report_rows", std::vector<std::size_t>{});
    for (std::size_t r : gc.report_rows) {
        if (r >= n) {
            throw ConfigError("report row " + std::to_string(r) + " is out of range");
        }
    }
    gc.concentration = choose_c(choice, data, opt, ctx.seed);
    const GlmRun run = run_glm_mp(data, gc, ctx.seed);
    if (run.samples.empty()) {
        throw NumericalDegeneracy("every trajectory aborted: " + run.aborted.front().reason);
    }

    std::string betas = ctx.header({"c=" + fmt(gc.concentration.value()), "update=" + update_name}) + "replicate";
    for (std::size_t k = 0; k < data.dim(); ++k) {
        betas += ",beta" + std::to_string(k);
    }
    betas += "\n";
    for (const auto& s : run.samples) {
        betas += std::to_string(s.replicate);
        for (Eigen::Index k = 0; k < s.beta.size(); ++k) {
            betas += "," + fmt(s.beta(k));
        }
        betas += "\n";
    }
    ctx.write("beta_samples.csv", betas);

    if (!gc.report_rows.empty()) {
        std::string cm = ctx.header() + "replicate";
        for (std::size_t r : gc.report_rows) {
            cm += ",mean_row" + std::to_string(r) + ",weight_row" + std::to_string(r);
        }
        cm += "\n";
        for (const auto& s : run.samples) {
            cm += std::to_string(s.replicate);
            for (std::size_t k = 0; k < gc.report_rows.size(); ++k) {
                cm += "," + fmt(s.conditional_means[k]) + "," + fmt(s.atom_weights[k]);
            }
            cm += "\n";
        }
        ctx.write("conditional_means.csv", cm);
    }

    if (get_or(cfg, "compare_exact_online", false)) {
        GlmConfig cc = gc;
        cc.replicates = get_or<std::size_t>(cfg, "compare_replicates", 10);
        if (cc.replicates == 0) {
            throw ConfigError("compare_replicates must be positive");
        }
        const auto steps = compare_exact_online(data, cc, ctx.seed);
        std::string diff = ctx.header() + "replicate,count,exact_norm,online_norm,difference_norm\n";
        for (std::size_t b = 0; b < steps.size(); ++b) {
            for (const auto& st : steps[b]) {
                diff += std::to_string(b) + "," + std::to_string(st.count) + "," + fmt(st.exact_norm) + "," +
                        fmt(st.online_norm) + "," + fmt(st.difference_norm) + "\n";
            }
        }
        ctx.write("beta_difference.csv", diff);
    }

    std::string aborted = ctx.header() + "replicate,step,reason\n";
    for (const auto& a : run.aborted) {
        aborted += std::to_string(a.replicate) + "," + std::to_string(a.step) + "," + csv_quote(a.reason) + "\n";
    }
    ctx.write("aborted.csv", aborted);

    const json result{{"n", n},
                      {"c", json_number(gc.concentration.value())},
                      {"update", update_name},
                      {"completed", run.samples.size()},
                      {"aborted", run.aborted.size()},
                      {"relative_score",
                       {{"splits", splits},
                        {"mixture_mean", mix_mean},
                        {"mixture_se", mix_se},
                        {"parametric_mean", par_mean},
                        {"parametric_se", par_se}}}};
    ctx.write_metadata(result);
    *ctx.out << "relative energy score: mixture " << fmt(mix_mean) << " (se " << fmt(mix_se) << "), parametric "
             << fmt(par_mean) << " (se " << fmt(par_se) << ")\n";
    return kSuccess;
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

struct Flags {
    std::string config_path;
    std::uint64_t seed = 0;
    std::size_t replicates = 0;
    std::size_t horizon = 0;
    std::string out_dir;
    unsigned threads = 0;
    std::vector<std::string> sets;
};

void add_common(CLI::App* sub, Flags& f) {
    sub->add_option("--config", f.config_path, "JSON config file");
    sub->add_option("--seed", f.seed, "master seed");
    sub->add_option("--replicates", f.replicates, "posterior replicates B");
    sub->add_option("--horizon", f.horizon, "forward resampling steps N - n");
    sub->add_option("--out-dir", f.out_dir, "output directory");
    sub->add_option("--threads", f.threads, "worker threads (0 = all cores)");
    sub->add_option("--set", f.sets, "override a config value, key=value (JSON value; dots for nesting)");
}

json load_config(const std::string& path) {
    if (path.empty()) {
        return json::object();
    }
    std::ifstream f(path);
    if (!f) {
        throw ConfigError("cannot open config file '" + path + "'");
    }
    try {
        return json::parse(f);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
}

void apply_set(json& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("--set expects key=value, got '" + assignment + "'");
    }
    std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::parse_error&) {
        value = text;
    }
    std::replace(key.begin(), key.end(), '.', '/');
    cfg[json::json_pointer("/" + key)] = value;
}

int dispatch(const std::string& sub, Context& ctx) {
    if (sub == "simulate") {
        return cmd_simulate(ctx, false);
    }
    if (sub == "paths") {
        return cmd_simulate(ctx, true);
    }
    if (sub == "select-c") {
        return cmd_select_c(ctx);
    }
    return cmd_logistic(ctx);
}

} // namespace

std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Moment martingale posterior: predictive resampling and concentration selection"};
    app.require_subcommand(1, 1);
    Flags flags;
    const std::vector<std::pair<std::string, std::string>> subs{
        {"simulate", "generate or load data and draw posterior samples of functionals"},
        {"paths", "like simulate, also writing moment trajectories"},
        {"select-c", "choose the concentration c by energy-score cross-validation"},
        {"logistic", "logistic regression posterior and hold-out relative energy scores"}};
    for (const auto& [name, help] : subs) {
        add_common(app.add_subcommand(name, help), flags);
    }
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    if (!reversed.empty()) {
        reversed.pop_back();
    }
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kConfigError;
    }
    const CLI::App* chosen = app.get_subcommands().front();
    const std::string sub = chosen->get_name();
    auto given = [&](const char* flag) { return chosen->get_option(flag)->count() > 0; };

    try {
        Context ctx;
        ctx.subcommand = sub;
        ctx.out = &out;
        json cfg = load_config(flags.config_path);
        if (given("--seed")) {
            cfg["seed"] = flags.seed;
        }
        if (given("--replicates")) {
            cfg["replicates"] = flags.replicates;
        }
        if (given("--horizon")) {
            cfg["horizon"] = flags.horizon;
        }
        if (given("--out-dir")) {
            cfg["out_dir"] = flags.out_dir;
        }
        if (given("--threads")) {
            cfg["threads"] = flags.threads;
        }
        for (const auto& s : flags.sets) {
            apply_set(cfg, s);
        }
        check_schema(cfg, schema_for(sub), sub + " config");
        ctx.seed = get_or<std::uint64_t>(cfg, "seed", 0);
        ctx.out_dir = get_or<std::string>(cfg, "out_dir", "mmp_out");
        // Worker count never changes results, so it is left out of the hash.
        json hashed = cfg;
        hashed.erase("threads");
        hashed.erase("out_dir");
        ctx.hash = fnv1a_hex(sub + "\n" + hashed.dump());
        ctx.config = std::move(cfg);
        return dispatch(sub, ctx);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const json::exception& e) {
        err << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return kDataError;
    } catch (const SeparationError& e) {
        err << "separation: " << e.what() << "\n";
        return kNumericalError;
    } catch (const RankDeficient& e) {
        err << "rank deficiency: " << e.what() << "\n";
        return kNumericalError;
    } catch (const NumericalDegeneracy& e) {
        err << "numerical degeneracy: " << e.what() << "\n";
        return kNumericalError;
    } catch (const DegenerateMoments& e) {
        err << "degenerate moments: " << e.what() << "\n";
        return kNumericalError;
    } catch (const UndefinedConditional& e) {
        err << "numerical degeneracy: " << e.what() << "\n";
        return kNumericalError;
    } catch (const InvalidInput& e) {
        err << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return kInternalError;
    }
}

} // namespace mmp::cli
