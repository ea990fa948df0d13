#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace realign {

/// Shape/value errors raised by tensor ops and the graph.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// File, format, or dataset-content errors (CLI exit code 3).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Bad flags or configuration values (CLI exit code 2).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Fatal numeric degeneracy (CLI exit code 4). Non-fatal degeneracies are
/// flagged on results instead of thrown.
struct DegeneracyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

/// Dense n-dimensional array of doubles, row-major. Rank 0 is a scalar with
/// one element. This is the single value type everything else traffics in.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(Shape s, double fill = 0.0)
        : shape(std::move(s)), data(numel(shape), fill) {}

    static Tensor scalar(double v) {
        Tensor t;
        t.data.assign(1, v);
        return t;
    }

    static Tensor from(Shape s, std::vector<double> values) {
        if (numel(s) != values.size()) {
            throw ShapeError("tensor: shape " + shape_str(s) + " wants " +
                             std::to_string(numel(s)) + " values, got " +
                             std::to_string(values.size()));
        }
        Tensor t;
        t.shape = std::move(s);
        t.data = std::move(values);
        return t;
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    bool is_scalar() const { return shape.empty() && data.size() == 1; }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    std::size_t extent(std::size_t axis) const {
        if (axis >= shape.size())
            throw ShapeError("tensor: axis " + std::to_string(axis) +
                             " out of range for shape " + shape_str(shape));
        return shape[axis];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
}

// Flat index helpers for the common layouts.
inline std::size_t idx2(std::size_t r, std::size_t c, std::size_t cols) {
    return r * cols + c;
}

inline std::size_t idx4(std::size_t n, std::size_t c, std::size_t h, std::size_t w,
                        std::size_t C, std::size_t H, std::size_t W) {
    return ((n * C + c) * H + h) * W + w;
}

}  // namespace realign
