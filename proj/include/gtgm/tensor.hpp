#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace gtgm {

struct Dims3 {
    std::size_t z = 0;
    std::size_t y = 0;
    std::size_t x = 0;

    std::size_t count() const noexcept { return z * y * x; }
    std::size_t index(std::size_t iz, std::size_t iy, std::size_t ix) const noexcept { return (iz * y + iy) * x + ix; }
    bool operator==(const Dims3&) const = default;
    std::string str() const;
};

// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& values() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    Matrix transpose() const;
    double frobenius_norm() const;
    bool all_finite() const;

    Matrix& operator+=(const Matrix& other);
    Matrix& operator*=(double s);

    bool operator==(const Matrix& other) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator*(double s, Matrix a);

// a * b
Matrix matmul(const Matrix& a, const Matrix& b);
// transpose(a) * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// a * transpose(b)
Matrix matmul_nt(const Matrix& a, const Matrix& b);

double max_abs_diff(const Matrix& a, const Matrix& b);

// Multi-channel 3D activation, channel-major then z, y, x with x fastest.
struct FeatureMap {
    std::size_t channels = 0;
    Dims3 dims;
    std::vector<double> data;

    FeatureMap() = default;
    FeatureMap(std::size_t c, Dims3 d, double fill = 0.0) : channels(c), dims(d), data(c * d.count(), fill) {}

    std::size_t plane() const noexcept { return dims.count(); }
    std::span<double> channel(std::size_t c) noexcept { return {data.data() + c * plane(), plane()}; }
    std::span<const double> channel(std::size_t c) const noexcept { return {data.data() + c * plane(), plane()}; }
};

} // namespace gtgm
