#pragma once

// Dense rank-4 tensor (batch, channel, height, width) stored row-major with
// width innermost. Token matrices use the (batch, 1, rows, cols) layout and
// parameter vectors use (1, 1, 1, len).

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace punet {

using Index = std::int64_t;

struct Shape {
    Index n = 0;
    Index c = 0;
    Index h = 0;
    Index w = 0;

    Index numel() const { return n * c * h * w; }
    bool operator==(const Shape&) const = default;

    static Shape matrix(Index rows, Index cols) { return {1, 1, rows, cols}; }
    static Shape vector(Index len) { return {1, 1, 1, len}; }
    static Shape scalar() { return {1, 1, 1, 1}; }

    std::string str() const;
};

/// Raised when operand dimensions disagree. Carries the operation and the
/// axis that failed so callers can report a precise location.
class ShapeError : public std::invalid_argument {
  public:
    ShapeError(std::string op, std::string axis, Index expected, Index actual);
    ShapeError(std::string op, std::string message);

    const std::string& op() const { return op_; }
    const std::string& axis() const { return axis_; }

  private:
    std::string op_;
    std::string axis_;
};

/// Raised when a computation produces NaN or Inf. `stage()` names the
/// operation (or pipeline stage) whose output was non-finite.
class NumericError : public std::runtime_error {
  public:
    explicit NumericError(std::string stage);

    const std::string& stage() const { return stage_; }

  private:
    std::string stage_;
};

template <typename T>
class Tensor {
  public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0));
    Tensor(Shape shape, std::vector<T> data);

    static Tensor matrix(Index rows, Index cols, T fill = T(0)) {
        return Tensor(Shape::matrix(rows, cols), fill);
    }
    static Tensor vector(Index len, T fill = T(0)) { return Tensor(Shape::vector(len), fill); }
    static Tensor scalar(T v) { return Tensor(Shape::scalar(), v); }

    const Shape& shape() const { return shape_; }
    Index n() const { return shape_.n; }
    Index c() const { return shape_.c; }
    Index h() const { return shape_.h; }
    Index w() const { return shape_.w; }
    Index numel() const { return shape_.numel(); }
    bool empty() const { return data_.empty(); }

    /// Number of rows when viewed as a matrix over the last axis.
    Index rows() const { return shape_.n * shape_.c * shape_.h; }
    Index cols() const { return shape_.w; }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    T* ptr() { return data_.data(); }
    const T* ptr() const { return data_.data(); }

    T& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

    T& operator()(Index n, Index c, Index h, Index w) { return data_[offset(n, c, h, w)]; }
    const T& operator()(Index n, Index c, Index h, Index w) const {
        return data_[offset(n, c, h, w)];
    }

    /// Same data, new dims. Element count must match.
    Tensor reshaped(Shape shape) const;

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) {
            out[i] = static_cast<U>(data_[i]);
        }
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const;
    void fill(T v);

  private:
    std::size_t offset(Index n, Index c, Index h, Index w) const {
        return static_cast<std::size_t>(((n * shape_.c + c) * shape_.h + h) * shape_.w + w);
    }

    Shape shape_;
    std::vector<T> data_;
};

using Tensor4 = Tensor<float>;

/// Integer class labels laid out (n, h, w).
struct LabelMap {
    Index n = 0;
    Index h = 0;
    Index w = 0;
    std::vector<std::int32_t> data;

    LabelMap() = default;
    LabelMap(Index n_, Index h_, Index w_, std::int32_t fill = 0)
        : n(n_), h(h_), w(w_), data(static_cast<std::size_t>(n_ * h_ * w_), fill) {}

    std::int32_t& at(Index b, Index y, Index x) {
        return data[static_cast<std::size_t>((b * h + y) * w + x)];
    }
    std::int32_t at(Index b, Index y, Index x) const {
        return data[static_cast<std::size_t>((b * h + y) * w + x)];
    }
    bool operator==(const LabelMap&) const = default;
};

/// Enables or disables the NaN/Inf assertion applied to every op output.
/// Enabled by default.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

/// Throws NumericError(stage) if checks are enabled and `t` is not finite.
template <typename T>
void check_finite(const char* stage, const Tensor<T>& t);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace punet
