#include "punet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace punet {

std::string Shape::str() const {
    std::ostringstream os;
    os << '[' << n << ", " << c << ", " << h << ", " << w << ']';
    return os.str();
}

ShapeError::ShapeError(std::string op, std::string axis, Index expected, Index actual)
    : std::invalid_argument(op + ": axis " + axis + " expected " + std::to_string(expected) +
                            " but got " + std::to_string(actual)),
      op_(std::move(op)),
      axis_(std::move(axis)) {}

ShapeError::ShapeError(std::string op, std::string message)
    : std::invalid_argument(op + ": " + message), op_(std::move(op)) {}

NumericError::NumericError(std::string stage)
    : std::runtime_error("non-finite value produced by " + stage), stage_(std::move(stage)) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(shape) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
        throw ShapeError("tensor", "negative dimension in " + shape.str());
    }
    data_.assign(static_cast<std::size_t>(shape.numel()), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (static_cast<Index>(data_.size()) != shape.numel()) {
        throw ShapeError("tensor", "numel", shape.numel(), static_cast<Index>(data_.size()));
    }
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
    if (shape.numel() != numel()) {
        throw ShapeError("reshape", "numel", numel(), shape.numel());
    }
    return Tensor(shape, data_);
}

template <typename T>
bool Tensor<T>::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void Tensor<T>::fill(T v) {
    std::fill(data_.begin(), data_.end(), v);
}

namespace {
std::atomic<bool> g_finite_checks{true};
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(); }

template <typename T>
void check_finite(const char* stage, const Tensor<T>& t) {
    if (finite_checks_enabled() && !t.all_finite()) {
        throw NumericError(stage);
    }
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("max_abs_diff", "operands differ: " + a.shape().str() + " vs " +
                                             b.shape().str());
    }
    T m = 0;
    for (Index i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

template class Tensor<float>;
template class Tensor<double>;
template void check_finite(const char*, const Tensor<float>&);
template void check_finite(const char*, const Tensor<double>&);
template float max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);

}  // namespace punet
