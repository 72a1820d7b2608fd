#pragma once

#include <Eigen/Dense>
#include <initializer_list>
#include <string>
#include <vector>

namespace riemannformer {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ArrMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrMap = Eigen::Map<const Eigen::ArrayXd>;

/// Dense n-dimensional array of 64-bit floats in row-major order.
/// Immutable by convention once handed to the tape; shape extents are
/// positive and product(shape) == number of stored values.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<long> shape);
    Tensor(std::vector<long> shape, double fill);
    Tensor(std::vector<long> shape, std::vector<double> values);

    static Tensor scalar(double v);
    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }
    static Tensor from_matrix(const Matrix& m);
    static Tensor from_vector(const Vector& v);

    const std::vector<long>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    long size() const { return static_cast<long>(data_.size()); }
    bool empty() const { return data_.size() == 0; }

    /// Extent along axis i; negative i counts from the end.
    long dim(int i) const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](long i) { return data_[i]; }
    double operator[](long i) const { return data_[i]; }

    ArrMap array() { return ArrMap(data_.data(), data_.size()); }
    ConstArrMap array() const { return ConstArrMap(data_.data(), data_.size()); }

    /// View the flat buffer as a rows x cols row-major matrix.
    MatMap mat(long rows, long cols);
    ConstMatMap mat(long rows, long cols) const;

    /// View as [product(leading dims), last dim].
    MatMap rows_by_last();
    ConstMatMap rows_by_last() const;

    Matrix to_matrix() const;  // rank-2 only
    double scalar_value() const;

    bool all_finite() const { return array().isFinite().all(); }

    std::string shape_string() const;

    void release() {
        data_.resize(0);
        shape_.clear();
    }

private:
    std::vector<long> shape_;
    Eigen::ArrayXd data_;
};

long shape_product(const std::vector<long>& shape);

}  // namespace riemannformer
