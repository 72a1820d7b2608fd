#include "riemannformer/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace riemannformer {

long shape_product(const std::vector<long>& shape) {
    long n = 1;
    for (long d : shape) n *= d;
    return n;
}

static void validate_shape(const std::vector<long>& shape) {
    for (long d : shape) {
        if (d <= 0) {
            std::ostringstream os;
            os << "tensor shape extents must be positive, got " << d;
            throw std::invalid_argument(os.str());
        }
    }
}

Tensor::Tensor(std::vector<long> shape) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_ = Eigen::ArrayXd::Zero(shape_product(shape_));
}

Tensor::Tensor(std::vector<long> shape, double fill) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_ = Eigen::ArrayXd::Constant(shape_product(shape_), fill);
}

Tensor::Tensor(std::vector<long> shape, std::vector<double> values) : shape_(std::move(shape)) {
    validate_shape(shape_);
    const long n = shape_product(shape_);
    if (n != static_cast<long>(values.size())) {
        std::ostringstream os;
        os << "tensor data length " << values.size() << " does not match shape "
           << shape_string() << " (" << n << " values)";
        throw std::invalid_argument(os.str());
    }
    data_ = Eigen::Map<const Eigen::ArrayXd>(values.data(), n);
}

Tensor Tensor::scalar(double v) {
    Tensor t({1});
    t.data_[0] = v;
    return t;
}

Tensor Tensor::from_matrix(const Matrix& m) {
    Tensor t({m.rows(), m.cols()});
    t.mat(m.rows(), m.cols()) = m;
    return t;
}

Tensor Tensor::from_vector(const Vector& v) {
    Tensor t({v.size()});
    t.array() = v.array();
    return t;
}

long Tensor::dim(int i) const {
    const int r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw std::out_of_range("tensor axis out of range");
    return shape_[static_cast<std::size_t>(i)];
}

MatMap Tensor::mat(long rows, long cols) {
    if (rows * cols != size()) throw std::invalid_argument("matrix view does not cover tensor");
    return MatMap(data_.data(), rows, cols);
}

ConstMatMap Tensor::mat(long rows, long cols) const {
    if (rows * cols != size()) throw std::invalid_argument("matrix view does not cover tensor");
    return ConstMatMap(data_.data(), rows, cols);
}

MatMap Tensor::rows_by_last() {
    const long last = rank() == 0 ? 1 : dim(-1);
    return mat(size() / last, last);
}

ConstMatMap Tensor::rows_by_last() const {
    const long last = rank() == 0 ? 1 : dim(-1);
    return mat(size() / last, last);
}

Matrix Tensor::to_matrix() const {
    if (rank() != 2) throw std::invalid_argument("to_matrix requires a rank-2 tensor");
    return mat(dim(0), dim(1));
}

double Tensor::scalar_value() const {
    if (size() != 1) {
        throw std::invalid_argument("scalar_value on tensor of shape " + shape_string());
    }
    return data_[0];
}

std::string Tensor::shape_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << 'x';
        os << shape_[i];
    }
    os << ']';
    return os.str();
}

}  // namespace riemannformer
