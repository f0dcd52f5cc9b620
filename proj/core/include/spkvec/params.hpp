#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "spkvec/tensor.hpp"

namespace spkvec {

// Named parameter tensors plus the set of names excluded from optimizer
// updates. Reads may happen concurrently; updates require exclusive access.
class ParameterStore {
public:
    Tensor& create(const std::string& name, Tensor init);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const { return params_.count(name) > 0; }

    void freeze(const std::string& name);
    void freeze_prefix(const std::string& prefix);
    bool is_frozen(const std::string& name) const { return frozen_.count(name) > 0; }
    const std::set<std::string>& frozen_names() const { return frozen_; }

    std::vector<std::string> names() const;
    std::size_t size() const { return params_.size(); }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::map<std::string, Tensor> params_;
    std::set<std::string> frozen_;
};

// Weight-manifest directory format: a text index (name, dtype, shape, file)
// plus one little-endian raw array file per parameter. f64 is written; f32
// manifests (externally converted weights) are widened on read.
void save_manifest(const std::map<std::string, Tensor>& arrays, const std::filesystem::path& dir);
void save_manifest(const ParameterStore& store, const std::filesystem::path& dir);
std::map<std::string, Tensor> load_manifest(const std::filesystem::path& dir);

}  // namespace spkvec
