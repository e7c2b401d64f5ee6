#pragma once

// Self-describing text model files.
//
//   nafi-model 1
//   role <net|layered|federation|global>
//   meta <key> <value>
//   block <name> <rows> <cols>
//   <rows lines of cols numbers, 17 significant digits>
//   end
//
// Blank lines and lines starting with '#' are ignored.

#include "nafi/generative.hpp"
#include "nafi/layerwise.hpp"
#include "nafi/network.hpp"

#include <Eigen/Dense>

#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace nafi {

inline constexpr int kModelFormatVersion = 1;

/// Malformed or inconsistent model file; the message carries the line.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ModelBlock {
    std::string name;
    Eigen::MatrixXd data;
};

struct ModelDocument {
    int version = kModelFormatVersion;
    std::string role;
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<ModelBlock> blocks;

    [[nodiscard]] const std::string* find_meta(const std::string& key) const;
    [[nodiscard]] const std::string& meta_at(const std::string& key) const;
    [[nodiscard]] const ModelBlock* find_block(const std::string& name) const;
    [[nodiscard]] const Eigen::MatrixXd& block_at(const std::string& name) const;
    void set_meta(const std::string& key, const std::string& value);
    void add_block(std::string name, Eigen::MatrixXd data);
};

/// %.17g, which round-trips every finite double.
std::string format_real(double x);

void write_document(std::ostream& os, const ModelDocument& doc);
ModelDocument read_document(std::istream& is, const std::string& source = "<stream>");

void save_document(const std::string& path, const ModelDocument& doc);
ModelDocument load_document(const std::string& path);

ModelDocument to_document(const Fcnn& net, ClientId client = 0);
Fcnn fcnn_from_document(const ModelDocument& doc, ClientId* client = nullptr);

ModelDocument to_document(const LayeredWeights& net);
LayeredWeights layered_from_document(const ModelDocument& doc);

ModelDocument to_document(const SyntheticFederation& fed);
SyntheticFederation federation_from_document(const ModelDocument& doc);

ModelDocument global_document(const Eigen::MatrixXd& atoms);

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

} // namespace nafi
