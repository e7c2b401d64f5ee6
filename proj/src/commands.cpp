#include "nafi/commands.hpp"

#include "nafi/layerwise.hpp"
#include "nafi/model_io.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

namespace nafi {

using json = nlohmann::ordered_json;

namespace {

// Seed offsets so every stage draws from its own stream.
constexpr std::uint64_t kBlobSeed = 0;
constexpr std::uint64_t kTrainDataSeed = 1;
constexpr std::uint64_t kTestDataSeed = 2;
constexpr std::uint64_t kPartitionSeed = 3;
constexpr std::uint64_t kInitSeed = 4;
constexpr std::uint64_t kLocalTrainSeed = 100;
constexpr std::uint64_t kOwnInitSeed = 1000;

std::vector<LocalModelNeurons> neuron_views(const std::vector<Fcnn>& nets, double sigma_sq) {
    std::vector<LocalModelNeurons> out;
    for (std::size_t s = 0; s < nets.size(); ++s)
        out.push_back(LocalModelNeurons{static_cast<ClientId>(s), neurons_of(nets[s]), sigma_sq});
    return out;
}

} // namespace

PipelineSetup prepare_pipeline(const RunConfig& cfg) {
    cfg.validate();
    PipelineSetup setup;
    const BlobModel blobs = make_blobs(cfg.classes, cfg.features, cfg.seed + kBlobSeed);
    const LabeledDataset train = sample_blobs(blobs, cfg.per_class, cfg.spread, cfg.seed + kTrainDataSeed);
    setup.test = sample_blobs(blobs, cfg.test_per_class, cfg.spread, cfg.seed + kTestDataSeed);
    const Partition part = dirichlet_partition(train, cfg.classes, cfg.alpha, cfg.clients, cfg.seed + kPartitionSeed);

    const Fcnn shared = init_fcnn(cfg.features, cfg.hidden, cfg.classes, cfg.seed + kInitSeed, cfg.activation);
    for (int s = 0; s < cfg.clients; ++s) {
        if (part.empty[s]) {
            ++setup.empty_shards;
            continue;
        }
        const auto train_seed = cfg.seed + kLocalTrainSeed + static_cast<std::uint64_t>(s);
        auto train_from = [&](const Fcnn& init) {
            TrainHyper hyper = cfg.train_hyper(train_seed);
            if (cfg.prox_mu > 0.0) hyper.prox = ProxTerm{cfg.prox_mu, init};
            return train_local(init, part.shards[s], hyper);
        };
        Fcnn trained_shared = train_from(shared);
        if (cfg.shared_init) {
            setup.locals.push_back(trained_shared);
        } else {
            const auto init_seed = cfg.seed + kOwnInitSeed + static_cast<std::uint64_t>(s);
            setup.locals.push_back(
                train_from(init_fcnn(cfg.features, cfg.hidden, cfg.classes, init_seed, cfg.activation)));
        }
        setup.fedavg_locals.push_back(std::move(trained_shared));
        setup.local_accuracy.push_back(evaluate(setup.locals.back(), setup.test));
        setup.proportions.push_back(part.proportions[s]);
        setup.data_weights.push_back(static_cast<double>(part.shards[s].size()) / train.size());
    }
    if (setup.locals.empty()) throw DegenerateInstance("every client shard is empty");
    const double total = std::accumulate(setup.data_weights.begin(), setup.data_weights.end(), 0.0);
    for (double& w : setup.data_weights) w /= total;
    return setup;
}

PipelineMetrics fuse_and_evaluate(const RunConfig& cfg, const PipelineSetup& setup, double lambda) {
    PipelineMetrics m;
    m.lambda = lambda;
    m.mean_local = std::accumulate(setup.local_accuracy.begin(), setup.local_accuracy.end(), 0.0) /
                   static_cast<double>(setup.local_accuracy.size());
    const auto locals = neuron_views(setup.locals, cfg.sigma_s_sq);
    for (const auto& l : locals) m.total_local += static_cast<int>(l.neurons.rows());

    MatchConfig mc = cfg.match_config();
    mc.lambda = lambda;

    mc.algorithm = Algorithm::nafi;
    const MatchResult nafi = run_matching(locals, mc);
    const Fcnn nafi_net = net_of(nafi.global, cfg.features, cfg.classes, cfg.activation);
    m.acc_nafi = evaluate(nafi_net, setup.test);
    m.global_nafi = nafi.state.num_atoms();
    m.passes_nafi = nafi.passes;
    m.log_size_ratio_nafi = log_size_ratio(m.global_nafi, m.total_local);

    mc.algorithm = Algorithm::pfnm;
    const MatchResult pfnm = run_matching(locals, mc);
    m.acc_pfnm = evaluate(net_of(pfnm.global, cfg.features, cfg.classes, cfg.activation), setup.test);
    m.global_pfnm = pfnm.state.num_atoms();
    m.passes_pfnm = pfnm.passes;
    m.log_size_ratio_pfnm = log_size_ratio(m.global_pfnm, m.total_local);

    m.acc_fedavg = evaluate(fedavg(setup.fedavg_locals, setup.data_weights), setup.test);

    std::vector<LayeredWeights> stacks;
    for (std::size_t s = 0; s < setup.locals.size(); ++s)
        stacks.push_back(layered_from_fcnn(setup.locals[s], static_cast<ClientId>(s), setup.proportions[s]));
    mc.algorithm = Algorithm::nafi;
    FusionOptions fo;
    fo.sigma_sq = cfg.sigma_s_sq;
    const FusionResult fused = fuse_layerwise(stacks, mc, no_op_hook(), fo);
    Fcnn layerwise_net;
    layerwise_net.w0 = fused.global.layers[0];
    layerwise_net.w1 = fused.global.layers[1];
    layerwise_net.activation = cfg.activation;
    m.acc_nafi_layerwise = evaluate(layerwise_net, setup.test);
    return m;
}

json metrics_json(const RunConfig& cfg, const PipelineSetup& setup, const PipelineMetrics& m) {
    json doc;
    doc["format"] = "nafi-pipeline-metrics";
    doc["version"] = 1;
    doc["seed"] = cfg.seed;
    doc["clients"] = cfg.clients;
    doc["trained_clients"] = setup.locals.size();
    doc["empty_shards"] = setup.empty_shards;
    doc["alpha"] = cfg.alpha;
    doc["lambda"] = m.lambda;
    doc["accuracy"] = {{"nafi", m.acc_nafi},
                       {"pfnm", m.acc_pfnm},
                       {"fedavg", m.acc_fedavg},
                       {"nafi_layerwise", m.acc_nafi_layerwise},
                       {"mean_local", m.mean_local}};
    doc["local_accuracy"] = setup.local_accuracy;
    doc["global_neurons"] = {{"nafi", m.global_nafi}, {"pfnm", m.global_pfnm}};
    doc["total_local_neurons"] = m.total_local;
    doc["log_size_ratio"] = {{"nafi", m.log_size_ratio_nafi}, {"pfnm", m.log_size_ratio_pfnm}};
    doc["passes"] = {{"nafi", m.passes_nafi}, {"pfnm", m.passes_pfnm}};
    return doc;
}

json cmd_pipeline(const RunConfig& cfg) {
    const PipelineSetup setup = prepare_pipeline(cfg);
    return metrics_json(cfg, setup, fuse_and_evaluate(cfg, setup, cfg.lambda));
}

SweepTable cmd_sweep_lambda(const RunConfig& cfg, const std::vector<double>& grid) {
    if (grid.empty()) throw ConfigError("lambda grid is empty");
    for (double l : grid)
        if (!(l > 0.0)) throw ConfigError("lambda grid values must be positive");
    const PipelineSetup setup = prepare_pipeline(cfg);
    SweepTable table;
    for (double l : grid) table.rows.push_back(fuse_and_evaluate(cfg, setup, l));
    return table;
}

std::string SweepTable::csv() const {
    std::ostringstream os;
    os << "lambda,acc_nafi,acc_pfnm,acc_fedavg,acc_nafi_layerwise,mean_local,global_nafi,total_local,log_size_ratio_nafi\n";
    for (const auto& r : rows)
        os << format_real(r.lambda) << ',' << format_real(r.acc_nafi) << ',' << format_real(r.acc_pfnm) << ','
           << format_real(r.acc_fedavg) << ',' << format_real(r.acc_nafi_layerwise) << ','
           << format_real(r.mean_local) << ',' << r.global_nafi << ',' << r.total_local << ','
           << format_real(r.log_size_ratio_nafi) << '\n';
    return os.str();
}

json SweepTable::json() const {
    nlohmann::ordered_json doc;
    doc["format"] = "nafi-lambda-sweep";
    doc["version"] = 1;
    auto& table = doc["rows"] = nlohmann::ordered_json::array();
    for (const auto& r : rows)
        table.push_back({{"lambda", r.lambda},
                         {"acc_nafi", r.acc_nafi},
                         {"acc_pfnm", r.acc_pfnm},
                         {"acc_fedavg", r.acc_fedavg},
                         {"acc_nafi_layerwise", r.acc_nafi_layerwise},
                         {"mean_local", r.mean_local},
                         {"global_nafi", r.global_nafi},
                         {"total_local", r.total_local},
                         {"log_size_ratio_nafi", r.log_size_ratio_nafi}});
    return doc;
}

SyntheticFederation cmd_simulate(const RunConfig& cfg, const std::string& out_path, std::ostream& log) {
    cfg.validate();
    SyntheticFederation fed = generate_federation(cfg.federation_params());
    save_document(out_path, to_document(fed));
    log << "J_true = " << fed.num_atoms() << "\nJ_s =";
    for (const auto& l : fed.locals) log << ' ' << l.neurons.rows();
    log << '\n';
    return fed;
}

MatchOutput match_federation(const SyntheticFederation& fed, const MatchConfig& config) {
    MatchOutput out;
    out.result = run_matching(fed.locals, config);
    const auto& state = out.result.state;

    json doc;
    doc["format"] = "nafi-assignment";
    doc["version"] = 1;
    json echo;
    echo["algorithm"] = to_string(config.algorithm);
    echo["lambda"] = config.lambda;
    echo["gamma0"] = config.gamma0;
    echo["sigma0_sq"] = config.sigma0_sq;
    json sig = json::object();
    for (const auto& l : fed.locals) {
        auto it = config.sigma_sq.find(l.client_id);
        sig[std::to_string(l.client_id)] = it == config.sigma_sq.end() ? l.sigma_sq : it->second;
    }
    echo["sigma_sq"] = sig;
    echo["max_passes"] = config.max_passes;
    echo["client_order"] = to_string(config.client_order);
    echo["seed"] = config.seed;
    doc["config"] = echo;

    doc["global_atoms"] = state.num_atoms();
    doc["passes"] = out.result.passes;
    doc["converged"] = out.result.converged;
    auto& clients = doc["clients"] = json::array();
    for (const auto& [id, labels] : state.per_client) clients.push_back({{"id", id}, {"assignment", labels}});

    json metrics;
    const int total = fed.total_local_neurons();
    metrics["J"] = state.num_atoms();
    metrics["total_local_neurons"] = total;
    metrics["log_size_ratio"] = log_size_ratio(state.num_atoms(), total);
    if (fed.atoms.size() != 0) {
        const RecoveryMetrics r = recovery_metrics(fed, state);
        metrics["ari"] = r.ari;
        metrics["exact_match"] = r.exact_match_rate;
        metrics["J_true"] = r.true_atoms;
        metrics["count_error"] = r.count_error;
        metrics["mean_atom_distance"] = r.mean_atom_distance;
    }
    doc["metrics"] = metrics;
    out.assignment = std::move(doc);
    return out;
}

namespace {

struct CommonFlags {
    std::string config_path;
    std::string algorithm, client_order;
    double lambda = 0, gamma0 = 0, sigma0_sq = 0, sigma_s_sq = 0;
    std::uint64_t seed = 0;
    int max_passes = 0;
    std::string out;
    std::vector<std::string> sets;

    CLI::Option* o_algorithm = nullptr;
    CLI::Option* o_lambda = nullptr;
    CLI::Option* o_gamma0 = nullptr;
    CLI::Option* o_sigma0 = nullptr;
    CLI::Option* o_sigmas = nullptr;
    CLI::Option* o_seed = nullptr;
    CLI::Option* o_passes = nullptr;
    CLI::Option* o_order = nullptr;
    CLI::Option* o_out = nullptr;

    void attach(CLI::App* app) {
        app->add_option("--config", config_path, "key = value configuration file");
        o_algorithm = app->add_option("--algorithm", algorithm, "pfnm or nafi");
        o_lambda = app->add_option("--lambda", lambda, "KL penalty weight");
        o_gamma0 = app->add_option("--gamma0", gamma0, "IBP mass");
        o_sigma0 = app->add_option("--sigma0-sq", sigma0_sq, "prior variance");
        o_sigmas = app->add_option("--sigma-s-sq", sigma_s_sq, "client noise variance");
        o_seed = app->add_option("--seed", seed, "master seed");
        o_passes = app->add_option("--max-passes", max_passes, "maximum passes over clients");
        o_order = app->add_option("--client-order", client_order, "fixed or shuffle");
        o_out = app->add_option("--out", out, "output path");
        app->add_option("--set", sets, "extra key=value setting (repeatable)");
    }

    RunConfig resolve() const {
        RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
        auto put = [&](CLI::Option* o, const std::string& key, const std::string& v) {
            if (o->count()) apply_setting(cfg, key, v);
        };
        put(o_algorithm, "algorithm", algorithm);
        put(o_lambda, "lambda", format_real(lambda));
        put(o_gamma0, "gamma0", format_real(gamma0));
        put(o_sigma0, "sigma0_sq", format_real(sigma0_sq));
        put(o_sigmas, "sigma_s_sq", format_real(sigma_s_sq));
        put(o_seed, "seed", std::to_string(seed));
        put(o_passes, "max_passes", std::to_string(max_passes));
        put(o_order, "client_order", client_order);
        put(o_out, "out", out);
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
            apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
        }
        cfg.validate();
        return cfg;
    }
};

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << text;
}

int run_match(const CommonFlags& flags, const std::vector<std::string>& inputs, const std::string& global_out,
              std::ostream& out) {
    RunConfig cfg = flags.resolve();
    if (inputs.empty()) throw ConfigError("match needs at least one input model file");

    std::vector<ModelDocument> docs;
    for (const auto& p : inputs) docs.push_back(load_document(p));

    SyntheticFederation fed;
    int input_dim = 0, output_dim = 0;
    Activation activation = Activation::relu;
    bool from_nets = false;
    if (docs.size() == 1 && docs.front().role == "federation") {
        fed = federation_from_document(docs.front());
        // The simulator's hyperparameters are the defaults unless overridden.
        if (!flags.o_gamma0->count()) cfg.gamma0 = fed.params.gamma0;
        if (!flags.o_sigma0->count()) cfg.sigma0_sq = fed.params.sigma0_sq;
    } else {
        from_nets = true;
        for (std::size_t i = 0; i < docs.size(); ++i) {
            ClientId id = 0;
            const Fcnn net = fcnn_from_document(docs[i], &id);
            if (i == 0) {
                input_dim = net.input_dim();
                output_dim = net.output_dim();
                activation = net.activation;
            } else if (net.input_dim() != input_dim || net.output_dim() != output_dim) {
                throw DimensionError(inputs[i] + ": dims " + std::to_string(net.input_dim()) + "x" +
                                     std::to_string(net.output_dim()) + " differ from " + inputs[0]);
            }
            fed.locals.push_back(LocalModelNeurons{id, neurons_of(net), cfg.sigma_s_sq});
        }
        fed.params.num_clients = static_cast<int>(fed.locals.size());
    }

    MatchConfig mc = cfg.match_config();
    if (flags.o_sigmas->count())
        for (const auto& l : fed.locals) mc.sigma_sq[l.client_id] = cfg.sigma_s_sq;

    MatchOutput result = match_federation(fed, mc);
    const std::string out_path = cfg.out.empty() ? "assignment.json" : cfg.out;
    write_text(out_path, result.assignment.dump(2) + "\n");
    const std::string model_path = global_out.empty() ? out_path + ".global.txt" : global_out;
    if (from_nets) {
        save_document(model_path, to_document(net_of(result.result.global, input_dim, output_dim, activation), -1));
    } else {
        save_document(model_path, global_document(result.result.global));
    }
    out << result.assignment["metrics"].dump() << '\n';
    return kExitOk;
}

int run_fold_bn(const std::string& input, const std::string& out_path, std::uint64_t seed, int samples,
                std::ostream& out, std::ostream& err) {
    const ModelDocument doc = load_document(input);
    LayeredWeights net;
    try {
        net = layered_from_document(doc);
    } catch (const std::invalid_argument& e) {
        throw DimensionError(input + ": " + e.what());
    }
    if (!net.has_bn()) {
        err << "warning: " << input << " has no bn blocks; writing it unchanged\n";
        save_document(out_path, doc);
        return kExitOk;
    }
    const LayeredWeights folded = fold_all_bn(net);
    save_document(out_path, to_document(folded));

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    double worst = 0.0;
    for (int i = 0; i < samples; ++i) {
        Eigen::VectorXd x(net.layers.front().cols());
        for (Eigen::Index d = 0; d < x.size(); ++d) x[d] = normal(rng);
        worst = std::max(worst, (forward(net, x) - forward(folded, x)).cwiseAbs().maxCoeff());
    }
    int blocks = 0;
    for (const auto& b : net.bn) blocks += b ? 1 : 0;
    out << "folded " << blocks << " bn block(s); max |folded - affine+bn| over " << samples
        << " inputs = " << format_real(worst) << '\n';
    return kExitOk;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Bayesian nonparametric neuron matching for federated model fusion", "nafi"};
    app.require_subcommand(1);

    CommonFlags sim_flags, match_flags, pipe_flags, sweep_flags;
    auto* sim = app.add_subcommand("simulate", "sample a synthetic federation with ground truth");
    sim_flags.attach(sim);

    auto* match = app.add_subcommand("match", "match neurons across clients (PFNM or NAFI)");
    match_flags.attach(match);
    std::vector<std::string> inputs;
    std::string global_out;
    match->add_option("inputs", inputs, "federation file, or one net file per client")->required();
    match->add_option("--global-out", global_out, "fused global model path (default <out>.global.txt)");

    auto* pipe = app.add_subcommand("pipeline", "synthetic data, local training, fusion and evaluation");
    pipe_flags.attach(pipe);

    auto* sweep = app.add_subcommand("sweep-lambda", "pipeline over a grid of KL weights");
    sweep_flags.attach(sweep);
    std::string grid_text;
    std::string csv_out;
    sweep->add_option("--grid", grid_text, "comma-separated lambda values");
    sweep->add_option("--csv", csv_out, "plot-ready CSV output path");

    auto* fold = app.add_subcommand("fold-bn", "fold batch-norm blocks into their layers");
    std::string fold_in, fold_out;
    std::uint64_t fold_seed = 0;
    int fold_samples = 100;
    fold->add_option("input", fold_in, "layered model file")->required();
    fold->add_option("--out", fold_out, "folded model path")->required();
    fold->add_option("--seed", fold_seed, "seed for the equivalence check inputs");
    fold->add_option("--samples", fold_samples, "number of equivalence check inputs");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (sim->parsed()) {
            RunConfig cfg = sim_flags.resolve();
            cmd_simulate(cfg, cfg.out.empty() ? "federation.txt" : cfg.out, out);
            return kExitOk;
        }
        if (match->parsed()) return run_match(match_flags, inputs, global_out, out);
        if (pipe->parsed()) {
            const RunConfig cfg = pipe_flags.resolve();
            const std::string doc = cmd_pipeline(cfg).dump(2) + "\n";
            if (cfg.out.empty()) out << doc;
            else write_text(cfg.out, doc);
            return kExitOk;
        }
        if (sweep->parsed()) {
            RunConfig cfg = sweep_flags.resolve();
            if (!grid_text.empty()) apply_setting(cfg, "lambda_grid", grid_text);
            cfg.validate();
            const SweepTable table = cmd_sweep_lambda(cfg, cfg.lambda_grid);
            const std::string doc = table.json().dump(2) + "\n";
            if (cfg.out.empty()) out << doc;
            else write_text(cfg.out, doc);
            if (!csv_out.empty()) write_text(csv_out, table.csv());
            return kExitOk;
        }
        if (fold->parsed()) return run_fold_bn(fold_in, fold_out, fold_seed, fold_samples, out, err);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const DegenerateInstance& e) {
        err << "degenerate instance: " << e.what() << '\n';
        return kExitDegenerate;
    } catch (const DimensionError& e) {
        err << "shape mismatch: " << e.what() << '\n';
        return kExitShape;
    } catch (const FormatError& e) {
        err << "shape mismatch: " << e.what() << '\n';
        return kExitShape;
    } catch (const InvariantError& e) {
        err << "internal invariant violated: " << e.what() << '\n';
        return kExitInvariant;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitFailure;
}

} // namespace nafi
