#include "riemannformer/geometry.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace riemannformer {

double scale_value(double w, double alpha, ScaleParamMode mode) {
    switch (mode) {
        case ScaleParamMode::Bounded: {
            const double e = std::exp(w);
            return e / (e + alpha);
        }
        case ScaleParamMode::Free:
            return std::exp(w);
        case ScaleParamMode::Unit:
            return 1.0;
    }
    return 1.0;
}

double log_scale_value(double w, double alpha, ScaleParamMode mode) {
    switch (mode) {
        case ScaleParamMode::Bounded:
            // log(e^w / (e^w + alpha)) computed without overflow.
            return w - (w > 30.0 ? w + std::log1p(alpha * std::exp(-w))
                                 : std::log(std::exp(w) + alpha));
        case ScaleParamMode::Free:
            return w;
        case ScaleParamMode::Unit:
            return 0.0;
    }
    return 0.0;
}

double dlog_scale_dw(double w, double alpha, ScaleParamMode mode) {
    switch (mode) {
        case ScaleParamMode::Bounded:
            // d/dw log s = 1 - s = alpha / (e^w + alpha)
            return 1.0 - scale_value(w, alpha, mode);
        case ScaleParamMode::Free:
            return 1.0;
        case ScaleParamMode::Unit:
            return 0.0;
    }
    return 0.0;
}

double ScaleSchedule::exponent(long m) const {
    if (mode == Mode::Linear) return static_cast<double>(m);
    if (m <= 0) return 0.0;  // position 0 must carry the identity transform
    const double e = std::log(static_cast<double>(m)) / std::log(beta);
    // Snap to integer exponents where beta^r reproduces m, so that
    // exponent(beta^k) == k holds exactly.
    const double r = std::round(e);
    if (std::abs(std::pow(beta, r) - static_cast<double>(m)) <=
        1e-9 * static_cast<double>(m)) {
        return r;
    }
    return e;
}

long Metric::dim() const {
    switch (kind) {
        case Kind::Scalar:
            return 0;  // any dimension
        case Kind::Diagonal:
            return static_cast<long>(diagonal.size());
        case Kind::General2D:
            return 2 * static_cast<long>(blocks.size());
    }
    return 0;
}

Eigen::Matrix2d rotation_block(double theta) {
    const double c = std::cos(theta), s = std::sin(theta);
    Eigen::Matrix2d r;
    r << c, -s, s, c;
    return r;
}

Eigen::Matrix2d reflection_block(double theta) {
    const double c = std::cos(2.0 * theta), s = std::sin(2.0 * theta);
    Eigen::Matrix2d r;
    r << c, s, s, -c;
    return r;
}

Matrix skew_from_upper(long dim, const std::vector<double>& upper) {
    const long expected = dim * (dim - 1) / 2;
    if (static_cast<long>(upper.size()) != expected) {
        std::ostringstream os;
        os << "skew generator for dim " << dim << " needs " << expected
           << " strict-upper entries, got " << upper.size();
        throw std::invalid_argument(os.str());
    }
    Matrix x = Matrix::Zero(dim, dim);
    std::size_t k = 0;
    for (long i = 0; i < dim; ++i) {
        for (long j = i + 1; j < dim; ++j, ++k) {
            x(i, j) = upper[k];
            x(j, i) = -upper[k];
        }
    }
    return x;
}

Matrix skew_exp(const Matrix& skew) {
    if (skew.rows() != skew.cols()) throw std::invalid_argument("skew_exp requires a square matrix");
    const long n = skew.rows();
    const double norm = skew.cwiseAbs().rowwise().sum().maxCoeff();  // inf-norm
    int squarings = 0;
    double scale = 1.0;
    if (norm > 0.5) {
        squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
        scale = std::ldexp(1.0, -squarings);
    }
    const Matrix a = skew * scale;
    // Truncated series to machine precision on the scaled matrix.
    Matrix result = Matrix::Identity(n, n);
    Matrix term = Matrix::Identity(n, n);
    for (int i = 1; i <= 30; ++i) {
        term = (term * a) / static_cast<double>(i);
        result += term;
        if (term.norm() < 1e-17 * result.norm()) break;
    }
    for (int i = 0; i < squarings; ++i) result = result * result;
    return result;
}

Matrix metric_matrix(const Metric& metric, long m, long dim) {
    if (m < 0) throw std::invalid_argument("metric position index must be >= 0");
    const double e = metric.schedule.exponent(m);
    switch (metric.kind) {
        case Metric::Kind::Scalar: {
            if (dim <= 0)
                throw std::invalid_argument(
                    "scalar metric needs an explicit dimension for metric_matrix");
            return std::exp(e * metric.scalar.log_s()) * Matrix::Identity(dim, dim);
        }
        case Metric::Kind::Diagonal: {
            const long d = metric.dim();
            Matrix r = Matrix::Zero(d, d);
            for (long j = 0; j < d; ++j) {
                r(j, j) = std::exp(e * log_scale_value(metric.diagonal[j].w,
                                                       metric.diagonal[j].alpha,
                                                       metric.diagonal[j].mode));
            }
            return r;
        }
        case Metric::Kind::General2D: {
            const long d = metric.dim();
            Matrix r = Matrix::Zero(d, d);
            const double mth = static_cast<double>(m);
            for (std::size_t b = 0; b < metric.blocks.size(); ++b) {
                const auto& blk = metric.blocks[b];
                Eigen::Matrix2d s2 = Eigen::Matrix2d::Zero();
                s2(0, 0) = std::exp(e * log_scale_value(blk.w1, blk.alpha, blk.mode));
                s2(1, 1) = std::exp(e * log_scale_value(blk.w2, blk.alpha, blk.mode));
                const Eigen::Matrix2d rot = rotation_block(mth * blk.theta);
                r.block<2, 2>(2 * static_cast<long>(b), 2 * static_cast<long>(b)) =
                    rotation_block(-mth * blk.theta) * s2 * rot;
            }
            return r;
        }
    }
    return {};
}

double metric_inner(const Metric& metric, long m, const Vector& a, const Vector& b) {
    if (a.size() != b.size()) {
        std::ostringstream os;
        os << "metric_inner dimension mismatch: " << a.size() << " vs " << b.size();
        throw std::invalid_argument(os.str());
    }
    if (metric.kind == Metric::Kind::Scalar) {
        const double e = metric.schedule.exponent(m);
        return std::exp(e * metric.scalar.log_s()) * a.dot(b);
    }
    if (metric.dim() != a.size()) {
        std::ostringstream os;
        os << "metric_inner dimension mismatch: metric dim " << metric.dim() << " vs vector "
           << a.size();
        throw std::invalid_argument(os.str());
    }
    return a.dot(metric_matrix(metric, m) * b);
}

static void check_transform(const TangentTransform& t) {
    const long d = t.dim();
    if (d <= 0 || d % 2 != 0) throw std::invalid_argument("transform dimension must be even");
    switch (t.kind) {
        case TangentTransform::Kind::BlockRotation:
        case TangentTransform::Kind::BlockReflection:
            if (static_cast<long>(t.angles.size()) != d / 2)
                throw std::invalid_argument("expected one angle per 2x2 block");
            break;
        case TangentTransform::Kind::Mixed4x4:
            if (d % 4 != 0)
                throw std::invalid_argument("mixed 4x4 blocks need dimension divisible by 4");
            if (static_cast<long>(t.angles.size()) != d / 2)
                throw std::invalid_argument("expected a (rotation, reflection) angle pair per 4x4 block");
            break;
        case TangentTransform::Kind::DenseSkewExp:
            if (static_cast<long>(t.skew_upper.size()) != d * (d - 1) / 2)
                throw std::invalid_argument("skew generator upper triangle has wrong length");
            break;
        case TangentTransform::Kind::General2D:
            if (static_cast<long>(t.blocks.size()) != d / 2)
                throw std::invalid_argument("expected one general block per 2x2 subspace");
            break;
    }
}

/// Shared assembler: sign = -1 gives T_m, sign = +1 gives T_m^{-1}.
static Matrix transform_impl(const TangentTransform& t, long m, int sign) {
    check_transform(t);
    if (m < 0) throw std::invalid_argument("transform position index must be >= 0");
    const long d = t.dim();
    const double e = t.schedule.exponent(m);
    const double mth = static_cast<double>(m);
    Matrix r = Matrix::Zero(d, d);

    if (t.kind == TangentTransform::Kind::General2D) {
        for (long b = 0; b < d / 2; ++b) {
            const auto& blk = t.blocks[static_cast<std::size_t>(b)];
            Eigen::Matrix2d s2 = Eigen::Matrix2d::Zero();
            s2(0, 0) = std::exp(sign * e / 2.0 * log_scale_value(blk.w1, blk.alpha, blk.mode));
            s2(1, 1) = std::exp(sign * e / 2.0 * log_scale_value(blk.w2, blk.alpha, blk.mode));
            // T_m = R(-m theta) S^{-m/2}; its inverse is S^{m/2} R(m theta).
            r.block<2, 2>(2 * b, 2 * b) = (sign < 0)
                                              ? (rotation_block(-mth * blk.theta) * s2).eval()
                                              : (s2 * rotation_block(mth * blk.theta)).eval();
        }
        return r;
    }

    const double factor = std::exp(sign * e / 2.0 * t.scale.log_s());
    switch (t.kind) {
        case TangentTransform::Kind::BlockRotation:
            for (long b = 0; b < d / 2; ++b) {
                r.block<2, 2>(2 * b, 2 * b) = rotation_block(
                    (sign < 0 ? 1.0 : -1.0) * mth * t.angles[static_cast<std::size_t>(b)]);
            }
            break;
        case TangentTransform::Kind::BlockReflection:
            for (long b = 0; b < d / 2; ++b) {
                // reflection blocks are involutions; same block either way
                r.block<2, 2>(2 * b, 2 * b) =
                    reflection_block(mth * t.angles[static_cast<std::size_t>(b)]);
            }
            break;
        case TangentTransform::Kind::Mixed4x4:
            for (long b = 0; b < d / 4; ++b) {
                const double th_rot = t.angles[static_cast<std::size_t>(2 * b)];
                const double th_ref = t.angles[static_cast<std::size_t>(2 * b + 1)];
                r.block<2, 2>(4 * b, 4 * b) =
                    rotation_block((sign < 0 ? 1.0 : -1.0) * mth * th_rot);
                r.block<2, 2>(4 * b + 2, 4 * b + 2) = reflection_block(mth * th_ref);
            }
            break;
        case TangentTransform::Kind::DenseSkewExp: {
            const Matrix x = skew_from_upper(d, t.skew_upper);
            r = skew_exp(((sign < 0 ? 1.0 : -1.0) * mth) * x);
            break;
        }
        case TangentTransform::Kind::General2D:
            break;  // handled above
    }
    return factor * r;
}

Matrix transform_matrix(const TangentTransform& t, long m) { return transform_impl(t, m, -1); }

Matrix inverse_transform_matrix(const TangentTransform& t, long m) {
    return transform_impl(t, m, +1);
}

Matrix relative_transform(const TangentTransform& t, long m, long n) {
    check_transform(t);
    if (m < 0 || n < 0) throw std::invalid_argument("transform position index must be >= 0");
    const long d = t.dim();
    const double em = t.schedule.exponent(m);
    const double en = t.schedule.exponent(n);
    const double diff = static_cast<double>(m - n);
    Matrix r = Matrix::Zero(d, d);

    if (t.kind == TangentTransform::Kind::General2D) {
        // R(-m theta) S^{(e(n)-e(m))/2} R(n theta) per block; S and R only
        // commute when s1 == s2, so no further collapse exists.
        for (long b = 0; b < d / 2; ++b) {
            const auto& blk = t.blocks[static_cast<std::size_t>(b)];
            Eigen::Matrix2d s2 = Eigen::Matrix2d::Zero();
            s2(0, 0) = std::exp((en - em) / 2.0 * log_scale_value(blk.w1, blk.alpha, blk.mode));
            s2(1, 1) = std::exp((en - em) / 2.0 * log_scale_value(blk.w2, blk.alpha, blk.mode));
            r.block<2, 2>(2 * b, 2 * b) =
                rotation_block(-static_cast<double>(m) * blk.theta) * s2 *
                rotation_block(static_cast<double>(n) * blk.theta);
        }
        return r;
    }

    const double factor = std::exp((en - em) / 2.0 * t.scale.log_s());
    switch (t.kind) {
        case TangentTransform::Kind::BlockRotation:
            for (long b = 0; b < d / 2; ++b)
                r.block<2, 2>(2 * b, 2 * b) =
                    rotation_block(diff * t.angles[static_cast<std::size_t>(b)]);
            break;
        case TangentTransform::Kind::BlockReflection:
            // product of two reflections is a rotation through twice the
            // angle difference
            for (long b = 0; b < d / 2; ++b)
                r.block<2, 2>(2 * b, 2 * b) =
                    rotation_block(2.0 * diff * t.angles[static_cast<std::size_t>(b)]);
            break;
        case TangentTransform::Kind::Mixed4x4:
            for (long b = 0; b < d / 4; ++b) {
                const double th_rot = t.angles[static_cast<std::size_t>(2 * b)];
                const double th_ref = t.angles[static_cast<std::size_t>(2 * b + 1)];
                r.block<2, 2>(4 * b, 4 * b) = rotation_block(diff * th_rot);
                r.block<2, 2>(4 * b + 2, 4 * b + 2) = rotation_block(2.0 * diff * th_ref);
            }
            break;
        case TangentTransform::Kind::DenseSkewExp:
            r = skew_exp(diff * skew_from_upper(d, t.skew_upper));
            break;
        case TangentTransform::Kind::General2D:
            break;
    }
    return factor * r;
}

Vector parallel_transport(const TangentTransform& t, long n, long m, const Vector& v) {
    if (v.size() != t.dim()) {
        std::ostringstream os;
        os << "parallel_transport dimension mismatch: transform dim " << t.dim() << " vs vector "
           << v.size();
        throw std::invalid_argument(os.str());
    }
    return relative_transform(t, m, n) * v;
}

double compatibility_residual(const Metric& metric, const TangentTransform& t, long m, long n) {
    const long d = t.dim();
    const Matrix mm = metric_matrix(metric, m, d);
    const Matrix mn = metric_matrix(metric, n, d);
    const Matrix tm = transform_matrix(t, m);
    const Matrix tn = transform_matrix(t, n);
    return (tm.transpose() * mm * tm - tn.transpose() * mn * tn).norm();
}

GeometryPair make_scalar_pair(TangentTransform::Kind kind, long dim, std::vector<double> angles,
                              ScalarScale scale, ScaleSchedule schedule) {
    GeometryPair pair;
    pair.metric.kind = Metric::Kind::Scalar;
    pair.metric.scalar = scale;
    pair.metric.schedule = schedule;
    pair.transform.kind = kind;
    pair.transform.dim_value = dim;
    pair.transform.scale = scale;
    pair.transform.schedule = schedule;
    pair.transform.angles = std::move(angles);
    check_transform(pair.transform);
    return pair;
}

GeometryPair make_dense_skew_pair(long dim, std::vector<double> skew_upper, ScalarScale scale,
                                  ScaleSchedule schedule) {
    GeometryPair pair;
    pair.metric.kind = Metric::Kind::Scalar;
    pair.metric.scalar = scale;
    pair.metric.schedule = schedule;
    pair.transform.kind = TangentTransform::Kind::DenseSkewExp;
    pair.transform.dim_value = dim;
    pair.transform.scale = scale;
    pair.transform.schedule = schedule;
    pair.transform.skew_upper = std::move(skew_upper);
    check_transform(pair.transform);
    return pair;
}

GeometryPair make_general2d_pair(long dim, std::vector<General2DBlock> blocks,
                                 ScaleSchedule schedule) {
    GeometryPair pair;
    pair.metric.kind = Metric::Kind::General2D;
    pair.metric.blocks = blocks;
    pair.metric.schedule = schedule;
    pair.transform.kind = TangentTransform::Kind::General2D;
    pair.transform.dim_value = dim;
    pair.transform.schedule = schedule;
    pair.transform.blocks = std::move(blocks);
    check_transform(pair.transform);
    return pair;
}

}  // namespace riemannformer
