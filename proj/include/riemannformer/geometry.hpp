#pragma once

#include <Eigen/Dense>
#include <vector>

#include "riemannformer/tensor.hpp"

namespace riemannformer {

/// How the positive scale base s is realized from the raw parameter w.
/// Bounded keeps s < 1 for every finite w; Free allows s > 1.
enum class ScaleParamMode {
    Bounded,  // s = exp(w) / (exp(w) + alpha)
    Free,     // s = exp(w)
    Unit,     // s fixed at 1 (no raw parameter; the rotary special case)
};

double scale_value(double w, double alpha, ScaleParamMode mode);
double log_scale_value(double w, double alpha, ScaleParamMode mode);
/// d(log s)/dw for the given mode (0 for Unit).
double dlog_scale_dw(double w, double alpha, ScaleParamMode mode);

/// Maps a position index to the exponent applied to the scale base.
/// Linear uses m itself; LogDecelerated uses log_beta(m) for m >= 1 and
/// 0 at m = 0 so the first position always carries the identity.
struct ScaleSchedule {
    enum class Mode { Linear, LogDecelerated };
    Mode mode = Mode::Linear;
    double beta = 2.0;  // only read in LogDecelerated mode; must be > 1

    double exponent(long m) const;
};

/// Scalar conformal factor shared by a metric/transform pair.
struct ScalarScale {
    double w = 0.0;
    double alpha = 0.1;
    ScaleParamMode mode = ScaleParamMode::Bounded;

    double s() const { return scale_value(w, alpha, mode); }
    double log_s() const { return log_scale_value(w, alpha, mode); }
};

/// One 2x2 block of the general-form pairing: S = diag(s1, s2) conjugated
/// by a rotation through m*theta.
struct General2DBlock {
    double w1 = 0.0;
    double w2 = 0.0;
    double theta = 0.0;
    double alpha = 0.1;
    ScaleParamMode mode = ScaleParamMode::Bounded;

    double s1() const { return scale_value(w1, alpha, mode); }
    double s2() const { return scale_value(w2, alpha, mode); }
};

/// Per-position inner-product structure M_m.
struct Metric {
    enum class Kind { Scalar, Diagonal, General2D };

    Kind kind = Kind::Scalar;
    ScaleSchedule schedule;
    ScalarScale scalar;                    // Kind::Scalar
    std::vector<ScalarScale> diagonal;     // Kind::Diagonal, one per dimension
    std::vector<General2DBlock> blocks;    // Kind::General2D, one per 2x2 block

    long dim() const;
};

/// M_m as a dense matrix. `dim` is required for scalar metrics (which fit
/// any dimension) and ignored otherwise.
Matrix metric_matrix(const Metric& metric, long m, long dim = -1);
double metric_inner(const Metric& metric, long m, const Vector& a, const Vector& b);

/// Specification of the linear transformation T_m mapping the reference
/// space into the tangent space at position m. The inverse is always
/// available analytically.
struct TangentTransform {
    enum class Kind {
        BlockRotation,     // s^{-e(m)/2} blockdiag R(m*theta_j)
        BlockReflection,   // s^{-e(m)/2} blockdiag of reflection blocks
        Mixed4x4,          // rotation + reflection pairs on 4x4 blocks
        DenseSkewExp,      // s^{-e(m)/2} exp(m X), X skew-symmetric
        General2D,         // blockdiag R(-m*theta) S^{-e(m)/2} (appendix pairing)
    };

    Kind kind = Kind::BlockRotation;
    long dim_value = 0;
    ScalarScale scale;
    ScaleSchedule schedule;

    /// BlockRotation / BlockReflection: D/2 angles.
    /// Mixed4x4: D/2 angles as (rotation, reflection) pairs per 4x4 block.
    std::vector<double> angles;

    /// DenseSkewExp: strict upper triangle of X, row-major; X is
    /// reconstructed as skew so X + X^T = 0 holds structurally.
    std::vector<double> skew_upper;

    /// General2D pairing blocks (shared with the paired metric).
    std::vector<General2DBlock> blocks;

    long dim() const { return dim_value; }
};

Eigen::Matrix2d rotation_block(double theta);
Eigen::Matrix2d reflection_block(double theta);

/// exp(X) for skew-symmetric X via scaling-and-squaring with a truncated
/// series; the result is orthogonal.
Matrix skew_exp(const Matrix& skew);

Matrix skew_from_upper(long dim, const std::vector<double>& upper);

Matrix transform_matrix(const TangentTransform& t, long m);
Matrix inverse_transform_matrix(const TangentTransform& t, long m);

/// Closed form of T_m T_n^{-1} (never formed as an explicit product).
Matrix relative_transform(const TangentTransform& t, long m, long n);

/// Carry v from the tangent space at position n to the one at m.
Vector parallel_transport(const TangentTransform& t, long n, long m, const Vector& v);

/// Frobenius norm of T_m^T M_m T_m - T_n^T M_n T_n; zero for every
/// correctly paired preset.
double compatibility_residual(const Metric& metric, const TangentTransform& t, long m, long n);

/// Paired presets: metric and transform sharing the same scale structure,
/// so the compatibility identity holds by construction.
struct GeometryPair {
    Metric metric;
    TangentTransform transform;
};

GeometryPair make_scalar_pair(TangentTransform::Kind kind, long dim, std::vector<double> angles,
                              ScalarScale scale, ScaleSchedule schedule = {});
GeometryPair make_dense_skew_pair(long dim, std::vector<double> skew_upper, ScalarScale scale,
                                  ScaleSchedule schedule = {});
GeometryPair make_general2d_pair(long dim, std::vector<General2DBlock> blocks,
                                 ScaleSchedule schedule = {});

}  // namespace riemannformer
