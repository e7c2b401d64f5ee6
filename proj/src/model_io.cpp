#include "nafi/model_io.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace nafi {
namespace {

std::vector<std::string> split_ws(const std::string& line) {
    std::istringstream in(line);
    std::vector<std::string> out;
    for (std::string tok; in >> tok;) out.push_back(tok);
    return out;
}

double parse_real(const std::string& tok, const std::string& where) {
    const char* begin = tok.c_str();
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin || *end != '\0') throw FormatError(where + ": not a number: '" + tok + "'");
    return v;
}

long parse_int(const std::string& tok, const std::string& where) {
    const char* begin = tok.c_str();
    char* end = nullptr;
    const long v = std::strtol(begin, &end, 10);
    if (end == begin || *end != '\0') throw FormatError(where + ": not an integer: '" + tok + "'");
    return v;
}

int meta_int(const ModelDocument& doc, const std::string& key) {
    return static_cast<int>(parse_int(doc.meta_at(key), "meta " + key));
}

double meta_real(const ModelDocument& doc, const std::string& key) {
    return parse_real(doc.meta_at(key), "meta " + key);
}

Eigen::MatrixXd row_of(const Eigen::VectorXd& v) { return v.transpose(); }

Eigen::MatrixXd ints_row(const std::vector<int>& v) {
    Eigen::MatrixXd m(1, static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = v[i];
    return m;
}

std::vector<int> ints_of(const Eigen::MatrixXd& m, const std::string& what) {
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        const double v = m.data()[i];
        if (v != static_cast<double>(static_cast<int>(v))) throw FormatError(what + ": expected integers");
        out.push_back(static_cast<int>(v));
    }
    return out;
}

void require_role(const ModelDocument& doc, const std::string& role) {
    if (doc.role != role) throw FormatError("expected a '" + role + "' model file, found '" + doc.role + "'");
}

} // namespace

const std::string* ModelDocument::find_meta(const std::string& key) const {
    for (const auto& [k, v] : meta)
        if (k == key) return &v;
    return nullptr;
}

const std::string& ModelDocument::meta_at(const std::string& key) const {
    if (const auto* v = find_meta(key)) return *v;
    throw FormatError("missing meta '" + key + "'");
}

const ModelBlock* ModelDocument::find_block(const std::string& name) const {
    for (const auto& b : blocks)
        if (b.name == name) return &b;
    return nullptr;
}

const Eigen::MatrixXd& ModelDocument::block_at(const std::string& name) const {
    if (const auto* b = find_block(name)) return b->data;
    throw FormatError("missing block '" + name + "'");
}

void ModelDocument::set_meta(const std::string& key, const std::string& value) {
    for (auto& [k, v] : meta)
        if (k == key) {
            v = value;
            return;
        }
    meta.emplace_back(key, value);
}

void ModelDocument::add_block(std::string name, Eigen::MatrixXd data) {
    blocks.push_back(ModelBlock{std::move(name), std::move(data)});
}

std::string format_real(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

void write_document(std::ostream& os, const ModelDocument& doc) {
    os << "nafi-model " << doc.version << '\n';
    os << "role " << doc.role << '\n';
    for (const auto& [k, v] : doc.meta) os << "meta " << k << ' ' << v << '\n';
    for (const auto& b : doc.blocks) {
        os << "block " << b.name << ' ' << b.data.rows() << ' ' << b.data.cols() << '\n';
        for (Eigen::Index r = 0; r < b.data.rows(); ++r) {
            for (Eigen::Index c = 0; c < b.data.cols(); ++c) {
                if (c) os << ' ';
                os << format_real(b.data(r, c));
            }
            os << '\n';
        }
    }
    os << "end\n";
}

ModelDocument read_document(std::istream& is, const std::string& source) {
    ModelDocument doc;
    std::string line;
    int lineno = 0;
    auto where = [&] { return source + ":" + std::to_string(lineno); };
    auto next = [&](std::vector<std::string>& toks) {
        while (std::getline(is, line)) {
            ++lineno;
            toks = split_ws(line);
            if (toks.empty() || toks.front().starts_with('#')) continue;
            return true;
        }
        return false;
    };

    std::vector<std::string> toks;
    if (!next(toks) || toks.size() != 2 || toks[0] != "nafi-model") throw FormatError(where() + ": missing 'nafi-model' header");
    doc.version = static_cast<int>(parse_int(toks[1], where()));
    if (doc.version != kModelFormatVersion)
        throw FormatError(where() + ": unsupported format version " + toks[1]);
    if (!next(toks) || toks.size() != 2 || toks[0] != "role") throw FormatError(where() + ": missing 'role' line");
    doc.role = toks[1];

    bool ended = false;
    while (next(toks)) {
        if (toks[0] == "end") {
            ended = true;
            break;
        }
        if (toks[0] == "meta") {
            if (toks.size() < 3) throw FormatError(where() + ": meta needs a key and a value");
            auto pos = line.find_first_not_of(" \t", line.find("meta") + 4);
            pos += toks[1].size();
            std::string value = line.substr(line.find_first_not_of(" \t", pos));
            value.erase(value.find_last_not_of(" \t\r") + 1);
            doc.meta.emplace_back(toks[1], value);
        } else if (toks[0] == "block") {
            if (toks.size() != 4) throw FormatError(where() + ": block needs a name, rows and cols");
            const long rows = parse_int(toks[2], where());
            const long cols = parse_int(toks[3], where());
            if (rows < 0 || cols < 0) throw FormatError(where() + ": negative block shape");
            ModelBlock b{toks[1], Eigen::MatrixXd(rows, cols)};
            for (long r = 0; r < rows; ++r) {
                std::vector<std::string> vals;
                if (!next(vals)) throw FormatError(where() + ": block '" + b.name + "' truncated");
                if (static_cast<long>(vals.size()) != cols)
                    throw FormatError(where() + ": block '" + b.name + "' row has " + std::to_string(vals.size()) +
                                      " values, declared " + std::to_string(cols));
                for (long c = 0; c < cols; ++c) b.data(r, c) = parse_real(vals[c], where());
            }
            doc.blocks.push_back(std::move(b));
        } else {
            throw FormatError(where() + ": unexpected '" + toks[0] + "'");
        }
    }
    if (!ended) throw FormatError(source + ": missing 'end'");
    return doc;
}

void save_document(const std::string& path, const ModelDocument& doc) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    write_document(os, doc);
    if (!os) throw std::runtime_error("write failed for " + path);
}

ModelDocument load_document(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    return read_document(is, path);
}

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    throw FormatError("unknown activation '" + s + "'");
}

ModelDocument to_document(const Fcnn& net, ClientId client) {
    net.validate();
    ModelDocument doc;
    doc.role = "net";
    doc.set_meta("dims", std::to_string(net.input_dim()) + " " + std::to_string(net.output_dim()) + " " +
                             std::to_string(net.hidden()));
    doc.set_meta("activation", to_string(net.activation));
    doc.set_meta("augmented_input", net.augmented_input ? "1" : "0");
    doc.set_meta("client", std::to_string(client));
    doc.add_block("w0", net.w0);
    doc.add_block("w1", net.w1);
    return doc;
}

Fcnn fcnn_from_document(const ModelDocument& doc, ClientId* client) {
    require_role(doc, "net");
    Fcnn net;
    net.w0 = doc.block_at("w0");
    net.w1 = doc.block_at("w1");
    net.activation = activation_from_string(doc.meta_at("activation"));
    if (const auto* aug = doc.find_meta("augmented_input")) net.augmented_input = *aug == "1";
    const auto dims = split_ws(doc.meta_at("dims"));
    if (dims.size() != 3 || parse_int(dims[0], "dims") != net.input_dim() ||
        parse_int(dims[1], "dims") != net.output_dim() || parse_int(dims[2], "dims") != net.hidden())
        throw FormatError("declared dims do not match the w0/w1 blocks");
    try {
        net.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(e.what());
    }
    if (client) *client = meta_int(doc, "client");
    return net;
}

ModelDocument to_document(const LayeredWeights& net) {
    net.validate();
    ModelDocument doc;
    doc.role = "layered";
    std::string dims = std::to_string(net.layers.front().cols());
    for (const auto& w : net.layers) dims += " " + std::to_string(w.rows());
    doc.set_meta("dims", dims);
    doc.set_meta("activation", to_string(net.activation));
    doc.set_meta("client", std::to_string(net.client_id));
    for (int n = 0; n < net.depth(); ++n) {
        doc.add_block("layer." + std::to_string(n), net.layers[n]);
        if (net.has_bias()) doc.add_block("bias." + std::to_string(n), row_of(net.biases[n]));
        if (!net.bn.empty() && net.bn[n]) {
            const auto& bn = *net.bn[n];
            Eigen::MatrixXd m(4, bn.size());
            m.row(0) = bn.gamma.transpose();
            m.row(1) = bn.beta.transpose();
            m.row(2) = bn.mean.transpose();
            m.row(3) = bn.var.transpose();
            doc.add_block("bn." + std::to_string(n), std::move(m));
            doc.set_meta("bn." + std::to_string(n) + ".eps", format_real(bn.eps));
        }
    }
    if (net.proportions.size() != 0) doc.add_block("proportions", row_of(net.proportions));
    return doc;
}

LayeredWeights layered_from_document(const ModelDocument& doc) {
    require_role(doc, "layered");
    LayeredWeights net;
    net.activation = activation_from_string(doc.meta_at("activation"));
    net.client_id = meta_int(doc, "client");
    const auto dims = split_ws(doc.meta_at("dims"));
    for (int n = 0;; ++n) {
        const auto* layer = doc.find_block("layer." + std::to_string(n));
        if (!layer) break;
        net.layers.push_back(layer->data);
    }
    if (net.layers.empty()) throw FormatError("layered model has no layer blocks");
    if (static_cast<int>(dims.size()) != net.depth() + 1)
        throw FormatError("declared dims list " + std::to_string(dims.size()) + " sizes for " +
                          std::to_string(net.depth()) + " layers");
    for (int n = 0; n < net.depth(); ++n) {
        if (parse_int(dims[n], "dims") != net.layers[n].cols() || parse_int(dims[n + 1], "dims") != net.layers[n].rows())
            throw FormatError("declared dims do not match block layer." + std::to_string(n));
    }
    bool any_bias = false, any_bn = false;
    for (int n = 0; n < net.depth(); ++n) {
        any_bias |= doc.find_block("bias." + std::to_string(n)) != nullptr;
        any_bn |= doc.find_block("bn." + std::to_string(n)) != nullptr;
    }
    if (any_bias)
        for (int n = 0; n < net.depth(); ++n) {
            const auto* b = doc.find_block("bias." + std::to_string(n));
            net.biases.push_back(b ? Eigen::VectorXd(b->data.transpose()) : Eigen::VectorXd::Zero(net.layers[n].rows()));
        }
    if (any_bn) {
        net.bn.resize(net.depth());
        for (int n = 0; n < net.depth(); ++n) {
            const auto* b = doc.find_block("bn." + std::to_string(n));
            if (!b) continue;
            if (b->data.rows() != 4) throw FormatError("bn block must have 4 rows (gamma, beta, mean, var)");
            BnParams bn;
            bn.gamma = b->data.row(0).transpose();
            bn.beta = b->data.row(1).transpose();
            bn.mean = b->data.row(2).transpose();
            bn.var = b->data.row(3).transpose();
            bn.eps = meta_real(doc, "bn." + std::to_string(n) + ".eps");
            net.bn[n] = std::move(bn);
        }
    }
    if (const auto* p = doc.find_block("proportions")) net.proportions = p->data.transpose();
    net.validate();
    return net;
}

ModelDocument to_document(const SyntheticFederation& fed) {
    ModelDocument doc;
    doc.role = "federation";
    const auto& p = fed.params;
    doc.set_meta("clients", std::to_string(fed.locals.size()));
    doc.set_meta("dim", std::to_string(p.dim));
    doc.set_meta("gamma0", format_real(p.gamma0));
    doc.set_meta("sigma0_sq", format_real(p.sigma0_sq));
    doc.set_meta("sigma_s_sq", format_real(p.sigma_s_sq));
    doc.set_meta("seed", std::to_string(p.seed));
    if (p.selection.kind == SelectionMode::Kind::ibp) {
        doc.set_meta("selection", "ibp");
    } else {
        doc.set_meta("selection", "bernoulli " + format_real(p.selection.p) + " " + std::to_string(p.selection.num_atoms));
    }
    for (std::size_t s = 0; s < fed.locals.size(); ++s) {
        const auto& l = fed.locals[s];
        const std::string pre = "client." + std::to_string(s);
        doc.set_meta(pre + ".id", std::to_string(l.client_id));
        doc.set_meta(pre + ".sigma_sq", format_real(l.sigma_sq));
        doc.add_block(pre + ".neurons", l.neurons);
    }
    if (fed.atoms.size() != 0) {
        doc.add_block("truth.atoms", fed.atoms);
        doc.add_block("truth.selection", fed.selection.cast<double>());
        for (std::size_t s = 0; s < fed.locals.size(); ++s) {
            doc.add_block("truth.assignment." + std::to_string(s), ints_row(fed.truth_assignment[s]));
            doc.add_block("truth.permutation." + std::to_string(s), ints_row(fed.permutations[s]));
        }
    }
    return doc;
}

SyntheticFederation federation_from_document(const ModelDocument& doc) {
    require_role(doc, "federation");
    SyntheticFederation fed;
    const int S = meta_int(doc, "clients");
    if (S < 1) throw FormatError("federation must have at least one client");
    auto& p = fed.params;
    p.num_clients = S;
    p.dim = meta_int(doc, "dim");
    p.gamma0 = meta_real(doc, "gamma0");
    p.sigma0_sq = meta_real(doc, "sigma0_sq");
    p.sigma_s_sq = meta_real(doc, "sigma_s_sq");
    p.seed = std::stoull(doc.meta_at("seed"));
    const auto sel = split_ws(doc.meta_at("selection"));
    if (sel.empty()) throw FormatError("empty selection meta");
    if (sel[0] == "bernoulli" && sel.size() == 3) {
        p.selection = SelectionMode::bernoulli(parse_real(sel[1], "selection"), static_cast<int>(parse_int(sel[2], "selection")));
    } else if (sel[0] != "ibp") {
        throw FormatError("unknown selection '" + doc.meta_at("selection") + "'");
    }
    for (int s = 0; s < S; ++s) {
        const std::string pre = "client." + std::to_string(s);
        LocalModelNeurons l;
        l.client_id = meta_int(doc, pre + ".id");
        l.sigma_sq = meta_real(doc, pre + ".sigma_sq");
        l.neurons = doc.block_at(pre + ".neurons");
        if (l.neurons.cols() != p.dim)
            throw FormatError("block " + pre + ".neurons has " + std::to_string(l.neurons.cols()) +
                              " columns, declared dim " + std::to_string(p.dim));
        fed.locals.push_back(std::move(l));
    }
    if (const auto* atoms = doc.find_block("truth.atoms")) {
        fed.atoms = atoms->data;
        const Eigen::MatrixXd& sel_block = doc.block_at("truth.selection");
        if (sel_block.rows() != S || sel_block.cols() != fed.atoms.rows())
            throw FormatError("truth.selection shape does not match clients x atoms");
        fed.selection = sel_block.cast<std::uint8_t>();
        for (int s = 0; s < S; ++s) {
            auto truth = ints_of(doc.block_at("truth.assignment." + std::to_string(s)), "truth.assignment");
            auto perm = ints_of(doc.block_at("truth.permutation." + std::to_string(s)), "truth.permutation");
            if (static_cast<Eigen::Index>(truth.size()) != fed.locals[s].neurons.rows() || perm.size() != truth.size())
                throw FormatError("truth blocks for client " + std::to_string(s) + " do not match its neuron count");
            for (int a : truth)
                if (a < 0 || a >= fed.atoms.rows()) throw FormatError("truth assignment index out of range");
            fed.truth_assignment.push_back(std::move(truth));
            fed.permutations.push_back(std::move(perm));
        }
    }
    return fed;
}

ModelDocument global_document(const Eigen::MatrixXd& atoms) {
    ModelDocument doc;
    doc.role = "global";
    doc.set_meta("atoms", std::to_string(atoms.rows()));
    doc.set_meta("dim", std::to_string(atoms.cols()));
    doc.add_block("atoms", atoms);
    return doc;
}

} // namespace nafi
