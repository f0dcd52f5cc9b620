#include "spkvec/params.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "manifest files are little-endian raw arrays");

namespace spkvec {

Tensor& ParameterStore::create(const std::string& name, Tensor init) {
    auto [it, inserted] = params_.emplace(name, std::move(init));
    if (!inserted) throw std::invalid_argument("parameter already exists: " + name);
    return it->second;
}

Tensor& ParameterStore::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no such parameter: " + name);
    return it->second;
}

const Tensor& ParameterStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no such parameter: " + name);
    return it->second;
}

void ParameterStore::freeze(const std::string& name) {
    if (!has(name)) throw std::out_of_range("cannot freeze unknown parameter: " + name);
    frozen_.insert(name);
}

void ParameterStore::freeze_prefix(const std::string& prefix) {
    for (const auto& [name, tensor] : params_) {
        if (name.rfind(prefix, 0) == 0) frozen_.insert(name);
    }
}

std::vector<std::string> ParameterStore::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [name, tensor] : params_) out.push_back(name);
    return out;
}

void save_manifest(const std::map<std::string, Tensor>& arrays, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream index(dir / "index.txt");
    if (!index) throw std::runtime_error("cannot write manifest index in " + dir.string());
    for (const auto& [name, tensor] : arrays) {
        const std::string file = name + ".bin";
        index << name << " f64 " << tensor.rank();
        for (Index d : tensor.shape) index << " " << d;
        index << " " << file << "\n";
        std::ofstream raw(dir / file, std::ios::binary);
        if (!raw) throw std::runtime_error("cannot write " + (dir / file).string());
        raw.write(reinterpret_cast<const char*>(tensor.ptr()),
                  static_cast<std::streamsize>(tensor.numel() * sizeof(double)));
        if (!raw) throw std::runtime_error("short write to " + (dir / file).string());
    }
}

void save_manifest(const ParameterStore& store, const std::filesystem::path& dir) {
    std::map<std::string, Tensor> arrays;
    for (const auto& [name, tensor] : store) arrays.emplace(name, tensor);
    save_manifest(arrays, dir);
}

std::map<std::string, Tensor> load_manifest(const std::filesystem::path& dir) {
    std::ifstream index(dir / "index.txt");
    if (!index) throw std::runtime_error("no manifest index at " + (dir / "index.txt").string());
    std::map<std::string, Tensor> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(index, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string name, dtype, file;
        std::size_t rank = 0;
        if (!(ss >> name >> dtype >> rank)) {
            throw std::runtime_error("malformed manifest index line " + std::to_string(line_no));
        }
        std::vector<Index> shape(rank);
        for (std::size_t i = 0; i < rank; ++i) {
            if (!(ss >> shape[i])) {
                throw std::runtime_error("malformed shape on manifest index line " +
                                         std::to_string(line_no));
            }
        }
        if (!(ss >> file)) {
            throw std::runtime_error("missing file name on manifest index line " +
                                     std::to_string(line_no));
        }
        if (dtype != "f64" && dtype != "f32") {
            throw std::runtime_error("unsupported dtype '" + dtype + "' for " + name);
        }
        Tensor tensor(shape);
        std::ifstream raw(dir / file, std::ios::binary);
        if (!raw) throw std::runtime_error("cannot open " + (dir / file).string());
        if (dtype == "f64") {
            raw.read(reinterpret_cast<char*>(tensor.ptr()),
                     static_cast<std::streamsize>(tensor.numel() * sizeof(double)));
        } else {
            std::vector<float> tmp(tensor.numel());
            raw.read(reinterpret_cast<char*>(tmp.data()),
                     static_cast<std::streamsize>(tmp.size() * sizeof(float)));
            for (Index i = 0; i < tensor.numel(); ++i) tensor.data[i] = tmp[i];
        }
        if (!raw) {
            throw std::runtime_error("array file " + file + " shorter than declared shape " +
                                     shape_str(shape));
        }
        if (!out.emplace(name, std::move(tensor)).second) {
            throw std::runtime_error("duplicate manifest entry: " + name);
        }
    }
    return out;
}

}  // namespace spkvec
