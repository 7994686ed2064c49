#include "fedtsa/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>

#include "fedtsa/error.hpp"

namespace fedtsa {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
    if (shape_size(shape_) != values_.size())
        throw DimensionError("tensor shape " + shape_to_string(shape_) + " holds " +
                             std::to_string(shape_size(shape_)) + " values, got " +
                             std::to_string(values_.size()));
}

bool Tensor::all_finite() const {
    for (double v : values_)
        if (!std::isfinite(v)) return false;
    return true;
}

template <class Tag>
BasicMatrix<Tag>::BasicMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_)
        throw DimensionError("matrix " + std::to_string(rows_) + "x" + std::to_string(cols_) +
                             " holds " + std::to_string(rows_ * cols_) + " values, got " +
                             std::to_string(values_.size()));
}

template class BasicMatrix<LogitTag>;
template class BasicMatrix<ProbTag>;

} // namespace fedtsa
