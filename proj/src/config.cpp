#include "nafi/config.hpp"

#include "nafi/model_io.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace nafi {
namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double to_real(const std::string& v) {
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        throw ConfigError("expected a number, got '" + v + "'");
    }
    if (used != v.size()) throw ConfigError("expected a number, got '" + v + "'");
    return out;
}

template <typename Int>
Int to_int(const std::string& v) {
    Int out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("expected an integer, got '" + v + "'");
    return out;
}

bool to_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("expected a boolean, got '" + v + "'");
}

std::vector<double> to_grid(const std::string& v) {
    std::vector<double> out;
    std::stringstream in(v);
    for (std::string tok; std::getline(in, tok, ',');) out.push_back(to_real(trim(tok)));
    return out;
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"algorithm", [](RunConfig& c, const std::string& v) {
             if (v == "pfnm") c.algorithm = Algorithm::pfnm;
             else if (v == "nafi") c.algorithm = Algorithm::nafi;
             else throw ConfigError("algorithm must be pfnm or nafi, got '" + v + "'");
         }},
        {"lambda", [](RunConfig& c, const std::string& v) { c.lambda = to_real(v); }},
        {"gamma0", [](RunConfig& c, const std::string& v) { c.gamma0 = to_real(v); }},
        {"sigma0_sq", [](RunConfig& c, const std::string& v) { c.sigma0_sq = to_real(v); }},
        {"sigma_s_sq", [](RunConfig& c, const std::string& v) { c.sigma_s_sq = to_real(v); }},
        {"max_passes", [](RunConfig& c, const std::string& v) { c.max_passes = to_int<int>(v); }},
        {"client_order", [](RunConfig& c, const std::string& v) {
             if (v == "fixed") c.client_order = ClientOrder::fixed;
             else if (v == "shuffle") c.client_order = ClientOrder::shuffled;
             else throw ConfigError("client_order must be fixed or shuffle, got '" + v + "'");
         }},
        {"log_clamp", [](RunConfig& c, const std::string& v) { c.log_clamp = to_real(v); }},
        {"clients", [](RunConfig& c, const std::string& v) { c.clients = to_int<int>(v); }},
        {"dim", [](RunConfig& c, const std::string& v) { c.dim = to_int<int>(v); }},
        {"selection", [](RunConfig& c, const std::string& v) {
             if (v != "ibp" && v != "bernoulli") throw ConfigError("selection must be ibp or bernoulli, got '" + v + "'");
             c.selection = v;
         }},
        {"select_p", [](RunConfig& c, const std::string& v) { c.select_p = to_real(v); }},
        {"num_atoms", [](RunConfig& c, const std::string& v) { c.num_atoms = to_int<int>(v); }},
        {"classes", [](RunConfig& c, const std::string& v) { c.classes = to_int<int>(v); }},
        {"features", [](RunConfig& c, const std::string& v) { c.features = to_int<int>(v); }},
        {"per_class", [](RunConfig& c, const std::string& v) { c.per_class = to_int<int>(v); }},
        {"test_per_class", [](RunConfig& c, const std::string& v) { c.test_per_class = to_int<int>(v); }},
        {"spread", [](RunConfig& c, const std::string& v) { c.spread = to_real(v); }},
        {"alpha", [](RunConfig& c, const std::string& v) { c.alpha = to_real(v); }},
        {"hidden", [](RunConfig& c, const std::string& v) { c.hidden = to_int<int>(v); }},
        {"activation", [](RunConfig& c, const std::string& v) {
             try {
                 c.activation = activation_from_string(v);
             } catch (const FormatError&) {
                 throw ConfigError("activation must be relu or tanh, got '" + v + "'");
             }
         }},
        {"lr", [](RunConfig& c, const std::string& v) { c.lr = to_real(v); }},
        {"batch", [](RunConfig& c, const std::string& v) { c.batch = to_int<int>(v); }},
        {"epochs", [](RunConfig& c, const std::string& v) { c.epochs = to_int<int>(v); }},
        {"shared_init", [](RunConfig& c, const std::string& v) { c.shared_init = to_bool(v); }},
        {"prox_mu", [](RunConfig& c, const std::string& v) { c.prox_mu = to_real(v); }},
        {"lambda_grid", [](RunConfig& c, const std::string& v) { c.lambda_grid = to_grid(v); }},
        {"seed", [](RunConfig& c, const std::string& v) { c.seed = to_int<std::uint64_t>(v); }},
        {"out", [](RunConfig& c, const std::string& v) { c.out = v; }},
    };
    return table;
}

void check(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

} // namespace

std::string to_string(Algorithm a) { return a == Algorithm::nafi ? "nafi" : "pfnm"; }
std::string to_string(ClientOrder o) { return o == ClientOrder::fixed ? "fixed" : "shuffle"; }

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
    const auto& table = setters();
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown key '" + key + "'");
    it->second(cfg, value);
}

RunConfig parse_config(std::istream& is, const std::string& source, RunConfig cfg) {
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string body = trim(line.substr(0, line.find('#')));
        if (body.empty()) continue;
        const auto where = source + ":" + std::to_string(lineno) + ": ";
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
        const std::string key = trim(body.substr(0, eq));
        const std::string value = trim(body.substr(eq + 1));
        if (value.empty()) throw ConfigError(where + "empty value for '" + key + "'");
        try {
            apply_setting(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(source + ": " + e.what());
    }
    return cfg;
}

RunConfig load_config(const std::string& path, RunConfig base) {
    std::ifstream is(path);
    if (!is) throw ConfigError(path + ": cannot open config file");
    return parse_config(is, path, std::move(base));
}

void RunConfig::validate() const {
    check(lambda >= 0.0, "lambda must be nonnegative");
    check(gamma0 > 0.0, "gamma0 must be positive");
    check(sigma0_sq > 0.0, "sigma0_sq must be positive");
    check(sigma_s_sq > 0.0, "sigma_s_sq must be positive");
    check(max_passes >= 1, "max_passes must be at least 1");
    check(log_clamp > 0.0, "log_clamp must be positive");
    check(clients >= 1, "clients must be at least 1");
    check(dim >= 1, "dim must be at least 1");
    check(select_p >= 0.0 && select_p <= 1.0, "select_p must lie in [0, 1]");
    check(num_atoms >= 1, "num_atoms must be at least 1");
    check(classes >= 2, "classes must be at least 2");
    check(features >= 1, "features must be at least 1");
    check(per_class >= 1 && test_per_class >= 1, "per_class and test_per_class must be positive");
    check(spread >= 0.0, "spread must be nonnegative");
    check(alpha > 0.0, "alpha must be positive");
    check(hidden >= 1, "hidden must be at least 1");
    check(lr > 0.0, "lr must be positive");
    check(batch >= 1, "batch must be at least 1");
    check(epochs >= 0, "epochs must be nonnegative");
    check(prox_mu >= 0.0, "prox_mu must be nonnegative");
    check(!lambda_grid.empty(), "lambda_grid must not be empty");
    for (double l : lambda_grid) check(l > 0.0, "lambda_grid values must be positive");
}

MatchConfig RunConfig::match_config() const {
    MatchConfig m;
    m.algorithm = algorithm;
    m.lambda = lambda;
    m.gamma0 = gamma0;
    m.sigma0_sq = sigma0_sq;
    m.max_passes = max_passes;
    m.client_order = client_order;
    m.seed = seed;
    m.log_clamp = log_clamp;
    return m;
}

FederationParams RunConfig::federation_params() const {
    FederationParams p;
    p.gamma0 = gamma0;
    p.num_clients = clients;
    p.dim = dim;
    p.sigma0_sq = sigma0_sq;
    p.sigma_s_sq = sigma_s_sq;
    p.seed = seed;
    p.selection = selection == "ibp" ? SelectionMode::ibp() : SelectionMode::bernoulli(select_p, num_atoms);
    return p;
}

TrainHyper RunConfig::train_hyper(std::uint64_t train_seed) const {
    TrainHyper h;
    h.lr = lr;
    h.batch = batch;
    h.epochs = epochs;
    h.seed = train_seed;
    return h;
}

std::string describe(const RunConfig& c) {
    std::ostringstream os;
    auto kv = [&](const char* k, const std::string& v) { os << k << " = " << v << '\n'; };
    auto r = [](double x) { return format_real(x); };
    kv("algorithm", to_string(c.algorithm));
    kv("lambda", r(c.lambda));
    kv("gamma0", r(c.gamma0));
    kv("sigma0_sq", r(c.sigma0_sq));
    kv("sigma_s_sq", r(c.sigma_s_sq));
    kv("max_passes", std::to_string(c.max_passes));
    kv("client_order", to_string(c.client_order));
    kv("log_clamp", r(c.log_clamp));
    kv("clients", std::to_string(c.clients));
    kv("dim", std::to_string(c.dim));
    kv("selection", c.selection);
    kv("select_p", r(c.select_p));
    kv("num_atoms", std::to_string(c.num_atoms));
    kv("classes", std::to_string(c.classes));
    kv("features", std::to_string(c.features));
    kv("per_class", std::to_string(c.per_class));
    kv("test_per_class", std::to_string(c.test_per_class));
    kv("spread", r(c.spread));
    kv("alpha", r(c.alpha));
    kv("hidden", std::to_string(c.hidden));
    kv("activation", to_string(c.activation));
    kv("lr", r(c.lr));
    kv("batch", std::to_string(c.batch));
    kv("epochs", std::to_string(c.epochs));
    kv("shared_init", c.shared_init ? "true" : "false");
    kv("prox_mu", r(c.prox_mu));
    std::string grid;
    for (std::size_t i = 0; i < c.lambda_grid.size(); ++i) grid += (i ? "," : "") + r(c.lambda_grid[i]);
    kv("lambda_grid", grid);
    kv("seed", std::to_string(c.seed));
    if (!c.out.empty()) kv("out", c.out);
    return os.str();
}

} // namespace nafi
