#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace spkvec {

using Index = std::size_t;

// Dense row-major tensor of doubles. All numerics in this library run in
// double precision so the same code path serves training and the
// finite-difference gradient harness.
struct Tensor {
    std::vector<Index> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<Index> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
    Tensor(std::vector<Index> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel_of(shape)) {
            throw std::invalid_argument("tensor: data size " + std::to_string(data.size()) +
                                        " does not match shape (numel " +
                                        std::to_string(numel_of(shape)) + ")");
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Index numel_of(const std::vector<Index>& s) {
        Index n = 1;
        for (Index d : s) n *= d;
        return n;
    }

    Index numel() const { return data.size(); }
    Index rank() const { return shape.size(); }
    Index dim(Index i) const { return shape.at(i); }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    // Reinterprets the buffer under a new shape with identical numel.
    Tensor reshaped(std::vector<Index> s) const {
        if (numel_of(s) != numel()) throw std::invalid_argument("reshape: numel mismatch");
        return Tensor(std::move(s), data);
    }
};

inline std::string shape_str(const std::vector<Index>& s) {
    std::string out = "[";
    for (Index i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
    }
}

}  // namespace spkvec
