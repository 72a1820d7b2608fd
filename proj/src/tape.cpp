#include "riemannformer/tape.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace riemannformer {

int ParamStore::add(std::string name, Tensor value, std::string group, bool decay) {
    if (find(name) >= 0) throw std::invalid_argument("duplicate parameter name: " + name);
    items_.emplace_back(std::move(name), std::move(value), std::move(group), decay);
    return static_cast<int>(items_.size()) - 1;
}

int ParamStore::find(const std::string& name) const {
    for (std::size_t i = 0; i < items_.size(); ++i) {
        if (items_[i].name == name) return static_cast<int>(i);
    }
    return -1;
}

long ParamStore::total_scalars() const {
    long n = 0;
    for (const auto& p : items_) n += p.value.size();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& p : items_) p.grad.array() = 0.0;
}

const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Constant: return "constant";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Neg: return "neg";
        case Op::Scale: return "scale";
        case Op::Exp: return "exp";
        case Op::Sqrt: return "sqrt";
        case Op::Pow: return "pow";
        case Op::AddBcast: return "add_bcast";
        case Op::MulBcast: return "mul_bcast";
        case Op::Matmul: return "matmul";
        case Op::Softmax: return "softmax_lastdim";
        case Op::LayerNorm: return "layer_norm";
        case Op::Gelu: return "gelu";
        case Op::MeanTokens: return "mean_tokens";
        case Op::SumAll: return "sum_all";
        case Op::SumLastKeep: return "sum_lastdim_keep";
        case Op::DivLast: return "div_lastdim";
        case Op::SliceLast: return "slice_lastdim";
        case Op::ConcatLast: return "concat_lastdim";
        case Op::SplitHeads: return "split_heads";
        case Op::MergeHeads: return "merge_heads";
        case Op::TangentAlign: return "tangent_align";
        case Op::Attenuation: return "attenuation";
        case Op::CrossEntropy: return "cross_entropy";
    }
    return "?";
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

namespace {

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
    throw std::invalid_argument(std::string(op) + ": " + detail);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        shape_error(op, "operand shapes differ: " + a.shape_string() + " vs " + b.shape_string());
    }
}

/// b must match a trailing suffix of a's shape; returns the repeat count.
long bcast_repeats(const char* op, const Tensor& a, const Tensor& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (bs.size() > as.size())
        shape_error(op, "broadcast operand rank exceeds target: " + a.shape_string() + " vs " +
                            b.shape_string());
    const std::size_t off = as.size() - bs.size();
    for (std::size_t i = 0; i < bs.size(); ++i) {
        if (as[off + i] != bs[i])
            shape_error(op, "broadcast shapes incompatible: " + a.shape_string() + " vs " +
                                b.shape_string());
    }
    return a.size() / b.size();
}

}  // namespace

const Tensor& Value::tensor() const { return tape->node(id).value; }
const std::vector<long>& Value::shape() const { return tensor().shape(); }

Value Tape::emplace(Op op, Tensor value, std::initializer_list<Value> parents, NodeAttr attrs) {
    if (validate_finite && !value.all_finite()) {
        throw std::runtime_error(std::string("non-finite values produced by ") + op_name(op));
    }
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.attrs = std::move(attrs);
    for (const Value& p : parents) {
        if (p.tape != this) throw std::invalid_argument("operands must live on the same tape");
        n.parents[static_cast<std::size_t>(n.n_parents++)] = p.id;
    }
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<std::int32_t>(nodes_.size()) - 1};
}

Value Tape::leaf(ParamStore& params, int param_index) {
    Value v = emplace(Op::Leaf, params[param_index].value, {});
    node(v.id).param_index = param_index;
    return v;
}

Value Tape::constant(Tensor v) { return emplace(Op::Constant, std::move(v), {}); }

// ---- elementwise ----------------------------------------------------------

Value add(Value a, Value b) {
    require_same_shape("add", a.tensor(), b.tensor());
    Tensor out(a.shape());
    out.array() = a.tensor().array() + b.tensor().array();
    return a.tape->emplace(Op::Add, std::move(out), {a, b});
}

Value sub(Value a, Value b) {
    require_same_shape("sub", a.tensor(), b.tensor());
    Tensor out(a.shape());
    out.array() = a.tensor().array() - b.tensor().array();
    return a.tape->emplace(Op::Sub, std::move(out), {a, b});
}

Value mul(Value a, Value b) {
    require_same_shape("mul", a.tensor(), b.tensor());
    Tensor out(a.shape());
    out.array() = a.tensor().array() * b.tensor().array();
    return a.tape->emplace(Op::Mul, std::move(out), {a, b});
}

Value neg(Value a) {
    Tensor out(a.shape());
    out.array() = -a.tensor().array();
    return a.tape->emplace(Op::Neg, std::move(out), {a});
}

Value scale(Value a, double factor) {
    Tensor out(a.shape());
    out.array() = factor * a.tensor().array();
    return a.tape->emplace(Op::Scale, std::move(out), {a}, ScaleAttr{factor});
}

Value vexp(Value a) {
    Tensor out(a.shape());
    out.array() = a.tensor().array().exp();
    return a.tape->emplace(Op::Exp, std::move(out), {a});
}

Value vsqrt(Value a) {
    Tensor out(a.shape());
    out.array() = a.tensor().array().sqrt();
    return a.tape->emplace(Op::Sqrt, std::move(out), {a});
}

Value vpow(Value a, double exponent) {
    const auto& x = a.tensor();
    if (exponent != std::floor(exponent)) {
        for (long i = 0; i < x.size(); ++i) {
            if (x[i] < 0.0) {
                throw std::domain_error("pow: negative base with non-integer exponent");
            }
        }
    }
    Tensor out(a.shape());
    out.array() = x.array().pow(exponent);
    return a.tape->emplace(Op::Pow, std::move(out), {a}, PowAttr{exponent});
}

Value add_bcast(Value a, Value b) {
    const long reps = bcast_repeats("add_bcast", a.tensor(), b.tensor());
    const long bn = b.tensor().size();
    Tensor out(a.shape());
    ConstArrMap bv = b.tensor().array();
    for (long r = 0; r < reps; ++r) {
        ArrMap(out.data() + r * bn, bn) = ConstArrMap(a.tensor().data() + r * bn, bn) + bv;
    }
    return a.tape->emplace(Op::AddBcast, std::move(out), {a, b});
}

Value mul_bcast(Value a, Value b) {
    const long reps = bcast_repeats("mul_bcast", a.tensor(), b.tensor());
    const long bn = b.tensor().size();
    Tensor out(a.shape());
    ConstArrMap bv = b.tensor().array();
    for (long r = 0; r < reps; ++r) {
        ArrMap(out.data() + r * bn, bn) = ConstArrMap(a.tensor().data() + r * bn, bn) * bv;
    }
    return a.tape->emplace(Op::MulBcast, std::move(out), {a, b});
}

// ---- matmul ---------------------------------------------------------------

namespace {

struct MatmulDims {
    long batch_a = 1, batch_b = 1;
    long ra = 0, ca = 0, rb = 0, cb = 0;  // stored slice extents
    long m = 0, k = 0, n = 0;             // logical extents after transposes
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    if (a.rank() < 2 || b.rank() < 2) {
        shape_error("matmul", "operands must be at least rank-2, got " + a.shape_string() +
                                  " and " + b.shape_string());
    }
    MatmulDims d;
    d.ra = a.dim(-2);
    d.ca = a.dim(-1);
    d.rb = b.dim(-2);
    d.cb = b.dim(-1);
    d.batch_a = a.size() / (d.ra * d.ca);
    d.batch_b = b.size() / (d.rb * d.cb);
    d.m = ta ? d.ca : d.ra;
    d.k = ta ? d.ra : d.ca;
    const long kb = tb ? d.cb : d.rb;
    d.n = tb ? d.rb : d.cb;
    if (d.k != kb) {
        std::ostringstream os;
        os << "inner extents " << d.k << " vs " << kb << " (shapes " << a.shape_string() << ", "
           << b.shape_string() << ", ta=" << ta << ", tb=" << tb << ")";
        shape_error("matmul", os.str());
    }
    if (d.batch_a != d.batch_b && d.batch_b != 1) {
        shape_error("matmul", "batch extents incompatible: " + a.shape_string() + " vs " +
                                  b.shape_string());
    }
    return d;
}

using StridedConst = ConstMatMap;

Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> apply_t(
    const ConstMatMap& m, bool t) {
    if (t) return m.transpose();
    return m;
}

}  // namespace

Value matmul(Value a, Value b, bool ta, bool tb) {
    const Tensor& at = a.tensor();
    const Tensor& bt = b.tensor();
    const MatmulDims d = matmul_dims(at, bt, ta, tb);

    std::vector<long> out_shape(at.shape().begin(), at.shape().end() - 2);
    out_shape.push_back(d.m);
    out_shape.push_back(d.n);
    Tensor out(std::move(out_shape));

    if (!ta && d.batch_b == 1) {
        // Shared right operand: one fused product over the flattened batch.
        ConstMatMap am(at.data(), d.batch_a * d.ra, d.ca);
        ConstMatMap bm(bt.data(), d.rb, d.cb);
        MatMap om(out.data(), d.batch_a * d.m, d.n);
        if (tb) {
            om.noalias() = am * bm.transpose();
        } else {
            om.noalias() = am * bm;
        }
    } else {
        for (long i = 0; i < d.batch_a; ++i) {
            ConstMatMap am(at.data() + i * d.ra * d.ca, d.ra, d.ca);
            ConstMatMap bm(bt.data() + (d.batch_b == 1 ? 0 : i) * d.rb * d.cb, d.rb, d.cb);
            MatMap om(out.data() + i * d.m * d.n, d.m, d.n);
            om.noalias() = apply_t(am, ta) * apply_t(bm, tb);
        }
    }
    return a.tape->emplace(Op::Matmul, std::move(out), {a, b}, MatmulAttr{ta, tb});
}

// ---- structured ops -------------------------------------------------------

Value softmax_lastdim(Value x) {
    const Tensor& xt = x.tensor();
    Tensor out(xt.shape());
    ConstMatMap xm = xt.rows_by_last();
    MatMap om = out.rows_by_last();
    for (long r = 0; r < xm.rows(); ++r) {
        const double mx = xm.row(r).maxCoeff();
        om.row(r) = (xm.row(r).array() - mx).exp();
        om.row(r) /= om.row(r).sum();
    }
    return x.tape->emplace(Op::Softmax, std::move(out), {x});
}

Value layer_norm(Value x, Value gain, Value bias, double eps) {
    const Tensor& xt = x.tensor();
    const long dlast = xt.dim(-1);
    if (gain.tensor().size() != dlast || bias.tensor().size() != dlast) {
        shape_error("layer_norm", "gain/bias must match the normalized extent " +
                                      std::to_string(dlast));
    }
    const long rows = xt.size() / dlast;
    LayerNormAttr attr;
    attr.eps = eps;
    attr.mean = Tensor({rows});
    attr.istd = Tensor({rows});
    Tensor out(xt.shape());
    ConstMatMap xm = xt.mat(rows, dlast);
    MatMap om = out.mat(rows, dlast);
    ConstArrMap g = gain.tensor().array();
    ConstArrMap b = bias.tensor().array();
    for (long r = 0; r < rows; ++r) {
        const double mean = xm.row(r).mean();
        const double var = (xm.row(r).array() - mean).square().mean();
        const double istd = 1.0 / std::sqrt(var + eps);
        attr.mean[r] = mean;
        attr.istd[r] = istd;
        om.row(r).array() = ((xm.row(r).array() - mean) * istd) * g.transpose() + b.transpose();
    }
    return x.tape->emplace(Op::LayerNorm, std::move(out), {x, gain, bias}, std::move(attr));
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Value gelu(Value x) {
    Tensor out(x.shape());
    const Tensor& xt = x.tensor();
    for (long i = 0; i < xt.size(); ++i) {
        const double v = xt[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
    return x.tape->emplace(Op::Gelu, std::move(out), {x});
}

Value mean_tokens(Value x) {
    const Tensor& xt = x.tensor();
    if (xt.rank() != 3) shape_error("mean_tokens", "expected [B, L, D], got " + xt.shape_string());
    const long B = xt.dim(0), L = xt.dim(1), D = xt.dim(2);
    Tensor out({B, D});
    for (long b = 0; b < B; ++b) {
        ConstMatMap rows(xt.data() + b * L * D, L, D);
        MatMap(out.data() + b * D, 1, D) = rows.colwise().mean();
    }
    return x.tape->emplace(Op::MeanTokens, std::move(out), {x});
}

Value sum_all(Value x) {
    Tensor out = Tensor::scalar(x.tensor().array().sum());
    return x.tape->emplace(Op::SumAll, std::move(out), {x});
}

Value sum_lastdim_keep(Value x) {
    const Tensor& xt = x.tensor();
    const long dlast = xt.dim(-1);
    const long rows = xt.size() / dlast;
    std::vector<long> shape = xt.shape();
    shape.back() = 1;
    Tensor out(std::move(shape));
    ConstMatMap xm = xt.mat(rows, dlast);
    for (long r = 0; r < rows; ++r) out[r] = xm.row(r).sum();
    return x.tape->emplace(Op::SumLastKeep, std::move(out), {x});
}

Value div_lastdim(Value a, Value b) {
    const Tensor& at = a.tensor();
    const Tensor& bt = b.tensor();
    if (bt.dim(-1) != 1 || bt.size() != at.size() / at.dim(-1)) {
        shape_error("div_lastdim", "divisor must be " + at.shape_string() + " with last extent 1, got " +
                                       bt.shape_string());
    }
    const long dlast = at.dim(-1);
    const long rows = bt.size();
    Tensor out(at.shape());
    ConstMatMap am = at.mat(rows, dlast);
    MatMap om = out.mat(rows, dlast);
    for (long r = 0; r < rows; ++r) om.row(r) = am.row(r) / bt[r];
    return a.tape->emplace(Op::DivLast, std::move(out), {a, b});
}

Value slice_lastdim(Value x, long offset, long extent) {
    const Tensor& xt = x.tensor();
    const long dlast = xt.dim(-1);
    if (offset < 0 || extent <= 0 || offset + extent > dlast) {
        shape_error("slice_lastdim", "slice [" + std::to_string(offset) + ", " +
                                         std::to_string(offset + extent) + ") out of extent " +
                                         std::to_string(dlast));
    }
    const long rows = xt.size() / dlast;
    std::vector<long> shape = xt.shape();
    shape.back() = extent;
    Tensor out(std::move(shape));
    ConstMatMap xm = xt.mat(rows, dlast);
    out.mat(rows, extent) = xm.middleCols(offset, extent);
    return x.tape->emplace(Op::SliceLast, std::move(out), {x}, SliceAttr{offset, extent});
}

Value concat_lastdim(Value a, Value b) {
    const Tensor& at = a.tensor();
    const Tensor& bt = b.tensor();
    if (at.rank() != bt.rank()) shape_error("concat_lastdim", "rank mismatch");
    for (int i = 0; i + 1 < at.rank(); ++i) {
        if (at.dim(i) != bt.dim(i))
            shape_error("concat_lastdim", "leading extents differ: " + at.shape_string() + " vs " +
                                              bt.shape_string());
    }
    const long da = at.dim(-1), db = bt.dim(-1);
    const long rows = at.size() / da;
    std::vector<long> shape = at.shape();
    shape.back() = da + db;
    Tensor out(std::move(shape));
    MatMap om = out.mat(rows, da + db);
    om.leftCols(da) = at.mat(rows, da);
    om.rightCols(db) = bt.mat(rows, db);
    return a.tape->emplace(Op::ConcatLast, std::move(out), {a, b});
}

Value split_heads(Value x, long heads) {
    const Tensor& xt = x.tensor();
    if (xt.rank() != 3) shape_error("split_heads", "expected [B, L, D], got " + xt.shape_string());
    const long B = xt.dim(0), L = xt.dim(1), D = xt.dim(2);
    if (D % heads != 0) shape_error("split_heads", "model width not divisible by head count");
    const long dk = D / heads;
    Tensor out({B, heads, L, dk});
    const double* src = xt.data();
    double* dst = out.data();
    for (long b = 0; b < B; ++b) {
        for (long h = 0; h < heads; ++h) {
            for (long l = 0; l < L; ++l) {
                std::copy_n(src + (b * L + l) * D + h * dk, dk, dst + ((b * heads + h) * L + l) * dk);
            }
        }
    }
    return x.tape->emplace(Op::SplitHeads, std::move(out), {x}, HeadsAttr{heads});
}

Value merge_heads(Value x) {
    const Tensor& xt = x.tensor();
    if (xt.rank() != 4) shape_error("merge_heads", "expected [B, H, L, dk], got " + xt.shape_string());
    const long B = xt.dim(0), H = xt.dim(1), L = xt.dim(2), dk = xt.dim(3);
    Tensor out({B, L, H * dk});
    const double* src = xt.data();
    double* dst = out.data();
    for (long b = 0; b < B; ++b) {
        for (long h = 0; h < H; ++h) {
            for (long l = 0; l < L; ++l) {
                std::copy_n(src + ((b * H + h) * L + l) * dk, dk, dst + (b * L + l) * (H * dk) + h * dk);
            }
        }
    }
    return x.tape->emplace(Op::MergeHeads, std::move(out), {x}, HeadsAttr{H});
}

// ---- tangent alignment ----------------------------------------------------

namespace {

struct AlignGeom {
    std::vector<double> exponents;  // e(p_l) per row
};

AlignGeom align_geometry(const AlignSpec& spec, long L) {
    if (!spec.positions || static_cast<long>(spec.positions->size()) != L) {
        shape_error("tangent_align", "positions must list one entry per row");
    }
    AlignGeom g;
    g.exponents.resize(static_cast<std::size_t>(L));
    for (long l = 0; l < L; ++l) {
        g.exponents[static_cast<std::size_t>(l)] =
            spec.schedule.exponent((*spec.positions)[static_cast<std::size_t>(l)]);
    }
    return g;
}

}  // namespace

Value tangent_align(Value x, Value theta, std::optional<Value> w, AlignSpec spec) {
    const Tensor& xt = x.tensor();
    if (xt.rank() != 4) shape_error("tangent_align", "expected [B, H, L, C], got " + xt.shape_string());
    const long B = xt.dim(0), H = xt.dim(1), L = xt.dim(2), C = xt.dim(3);
    if (C % 2 != 0) shape_error("tangent_align", "channel extent must be even");
    if (spec.kind == TangentTransform::Kind::Mixed4x4 && C % 4 != 0) {
        shape_error("tangent_align", "mixed 4x4 blocks need channels divisible by 4");
    }
    const Tensor& th = theta.tensor();
    if (spec.kind != TangentTransform::Kind::DenseSkewExp &&
        (th.rank() != 2 || th.dim(0) != H || th.dim(1) != C / 2)) {
        shape_error("tangent_align", "theta must be [heads, C/2], got " + th.shape_string());
    }
    if (spec.mode != ScaleParamMode::Unit) {
        if (!w || w->tensor().size() != H)
            shape_error("tangent_align", "scale parameter w must be [heads]");
    }

    const AlignGeom geom = align_geometry(spec, L);
    AlignAttr attr;
    attr.spec = spec;

    if (spec.kind == TangentTransform::Kind::DenseSkewExp) {
        if (!spec.skew || spec.skew->rows() != C || spec.skew->cols() != C) {
            shape_error("tangent_align", "dense kind needs a CxC skew generator");
        }
        auto cache = std::make_shared<std::vector<Matrix>>();
        cache->reserve(static_cast<std::size_t>(L));
        for (long l = 0; l < L; ++l) {
            const double p = static_cast<double>((*spec.positions)[static_cast<std::size_t>(l)]);
            cache->push_back(skew_exp(-p * (*spec.skew)));
        }
        attr.dense_inverse = cache;
    }

    Tensor out(xt.shape());
    const double* src = xt.data();
    double* dst = out.data();
    for (long h = 0; h < H; ++h) {
        const double lns = spec.mode == ScaleParamMode::Unit
                               ? 0.0
                               : log_scale_value(w->tensor()[h], spec.alpha, spec.mode);
        const double* th_h = spec.kind == TangentTransform::Kind::DenseSkewExp
                                 ? nullptr
                                 : th.data() + h * (C / 2);
        for (long l = 0; l < L; ++l) {
            const double p = static_cast<double>((*spec.positions)[static_cast<std::size_t>(l)]);
            const double f = std::exp(0.5 * geom.exponents[static_cast<std::size_t>(l)] * lns);
            for (long b = 0; b < B; ++b) {
                const double* xr = src + (((b * H + h) * L) + l) * C;
                double* yr = dst + (((b * H + h) * L) + l) * C;
                switch (spec.kind) {
                    case TangentTransform::Kind::BlockRotation:
                        for (long j = 0; j < C / 2; ++j) {
                            const double a = p * th_h[j];
                            const double c = std::cos(a), s = std::sin(a);
                            const double x0 = xr[2 * j], x1 = xr[2 * j + 1];
                            yr[2 * j] = f * (c * x0 + s * x1);
                            yr[2 * j + 1] = f * (-s * x0 + c * x1);
                        }
                        break;
                    case TangentTransform::Kind::BlockReflection:
                        for (long j = 0; j < C / 2; ++j) {
                            const double a = 2.0 * p * th_h[j];
                            const double c = std::cos(a), s = std::sin(a);
                            const double x0 = xr[2 * j], x1 = xr[2 * j + 1];
                            yr[2 * j] = f * (c * x0 + s * x1);
                            yr[2 * j + 1] = f * (s * x0 - c * x1);
                        }
                        break;
                    case TangentTransform::Kind::Mixed4x4:
                        for (long t = 0; t < C / 4; ++t) {
                            const double ar = p * th_h[2 * t];
                            const double cr = std::cos(ar), sr = std::sin(ar);
                            const double x0 = xr[4 * t], x1 = xr[4 * t + 1];
                            yr[4 * t] = f * (cr * x0 + sr * x1);
                            yr[4 * t + 1] = f * (-sr * x0 + cr * x1);
                            const double af = 2.0 * p * th_h[2 * t + 1];
                            const double cf = std::cos(af), sf = std::sin(af);
                            const double x2 = xr[4 * t + 2], x3 = xr[4 * t + 3];
                            yr[4 * t + 2] = f * (cf * x2 + sf * x3);
                            yr[4 * t + 3] = f * (sf * x2 - cf * x3);
                        }
                        break;
                    case TangentTransform::Kind::DenseSkewExp: {
                        const Matrix& e = (*attr.dense_inverse)[static_cast<std::size_t>(l)];
                        Eigen::Map<const Vector> xv(xr, C);
                        Eigen::Map<Vector> yv(yr, C);
                        yv.noalias() = f * (e * xv);
                        break;
                    }
                    case TangentTransform::Kind::General2D:
                        shape_error("tangent_align", "general2d pairing is not a tape op");
                }
            }
        }
    }

    if (w) {
        return x.tape->emplace(Op::TangentAlign, std::move(out), {x, theta, *w}, std::move(attr));
    }
    return x.tape->emplace(Op::TangentAlign, std::move(out), {x, theta}, std::move(attr));
}

// ---- attenuation ----------------------------------------------------------

Value attenuation_op(Value sigma_raw, std::optional<Value> a_factor, AttenuationSpec spec) {
    if (!spec.points || spec.points->empty()) {
        shape_error("attenuation", "token coordinates are required");
    }
    const long L = static_cast<long>(spec.points->size());
    const Tensor& sr = sigma_raw.tensor();
    long H = 0;
    if (spec.per_position_sigma) {
        if (sr.rank() != 2 || sr.dim(1) != L)
            shape_error("attenuation", "per-position sigma must be [heads, L], got " + sr.shape_string());
        H = sr.dim(0);
    } else {
        if (sr.rank() != 1) shape_error("attenuation", "shared sigma must be [heads], got " + sr.shape_string());
        H = sr.dim(0);
    }
    if (spec.learnable_a) {
        if (!a_factor || a_factor->tensor().rank() != 2 || a_factor->tensor().dim(0) != H ||
            a_factor->tensor().dim(1) != 3) {
            shape_error("attenuation", "learnable A needs a [heads, 3] lower-triangular factor");
        }
    }

    AttenuationAttr attr;
    attr.spec = spec;
    attr.quad = Tensor({H, L, L});
    Tensor out({H, L, L});
    const auto& pts = *spec.points;
    for (long h = 0; h < H; ++h) {
        double a00 = 1.0, a01 = 0.0, a11 = 1.0;
        if (spec.learnable_a) {
            const double* lf = a_factor->tensor().data() + h * 3;
            a00 = lf[0] * lf[0] + spec.spd_eps;
            a01 = lf[0] * lf[1];
            a11 = lf[1] * lf[1] + lf[2] * lf[2] + spec.spd_eps;
        }
        for (long m = 0; m < L; ++m) {
            const double sig =
                softplus(spec.per_position_sigma ? sr[h * L + m] : sr[h]);
            const double inv2s2 = 1.0 / (2.0 * sig * sig);
            for (long n = 0; n < L; ++n) {
                const double d0 = pts[static_cast<std::size_t>(m)][0] - pts[static_cast<std::size_t>(n)][0];
                const double d1 = pts[static_cast<std::size_t>(m)][1] - pts[static_cast<std::size_t>(n)][1];
                const double q = a00 * d0 * d0 + 2.0 * a01 * d0 * d1 + a11 * d1 * d1;
                attr.quad[(h * L + m) * L + n] = q;
                out[(h * L + m) * L + n] = std::exp(-q * inv2s2);
            }
        }
    }
    if (a_factor) {
        return sigma_raw.tape->emplace(Op::Attenuation, std::move(out), {sigma_raw, *a_factor},
                                       std::move(attr));
    }
    return sigma_raw.tape->emplace(Op::Attenuation, std::move(out), {sigma_raw}, std::move(attr));
}

// ---- loss -----------------------------------------------------------------

Value cross_entropy_mean(Value logits, std::shared_ptr<const std::vector<int>> labels) {
    const Tensor& z = logits.tensor();
    if (z.rank() != 2) shape_error("cross_entropy", "logits must be [B, C], got " + z.shape_string());
    const long B = z.dim(0), C = z.dim(1);
    if (!labels || static_cast<long>(labels->size()) != B) {
        shape_error("cross_entropy", "labels must list one class per row");
    }
    CrossEntropyAttr attr;
    attr.labels = labels;
    attr.softmax = Tensor({B, C});
    ConstMatMap zm = z.mat(B, C);
    MatMap sm = attr.softmax.mat(B, C);
    double loss = 0.0;
    for (long b = 0; b < B; ++b) {
        const int y = (*labels)[static_cast<std::size_t>(b)];
        if (y < 0 || y >= C) {
            throw std::invalid_argument("cross_entropy: label " + std::to_string(y) +
                                        " outside class count " + std::to_string(C));
        }
        const double mx = zm.row(b).maxCoeff();
        sm.row(b) = (zm.row(b).array() - mx).exp();
        const double denom = sm.row(b).sum();
        sm.row(b) /= denom;
        loss += std::log(denom) + mx - zm(b, y);
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(B));
    return logits.tape->emplace(Op::CrossEntropy, std::move(out), {logits}, std::move(attr));
}

// ---- backward -------------------------------------------------------------

namespace {

Tensor& grad_buffer(Tape& tape, std::int32_t id) {
    Node& n = tape.node(id);
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
}

void backward_matmul(Tape& tape, Node& n) {
    const MatmulAttr& at = std::get<MatmulAttr>(n.attrs);
    const Tensor& a = tape.node(n.parents[0]).value;
    const Tensor& b = tape.node(n.parents[1]).value;
    const MatmulDims d = matmul_dims(a, b, at.ta, at.tb);
    Tensor& da = grad_buffer(tape, n.parents[0]);
    Tensor& db = grad_buffer(tape, n.parents[1]);

    if (!at.ta && d.batch_b == 1) {
        ConstMatMap gm(n.grad.data(), d.batch_a * d.m, d.n);
        ConstMatMap am(a.data(), d.batch_a * d.ra, d.ca);
        ConstMatMap bm(b.data(), d.rb, d.cb);
        MatMap dam(da.data(), d.batch_a * d.ra, d.ca);
        MatMap dbm(db.data(), d.rb, d.cb);
        if (at.tb) {
            dam.noalias() += gm * bm;                  // G * (B^T)^T
            dbm.noalias() += gm.transpose() * am;      // (A^T G)^T
        } else {
            dam.noalias() += gm * bm.transpose();
            dbm.noalias() += am.transpose() * gm;
        }
        return;
    }
    for (long i = 0; i < d.batch_a; ++i) {
        ConstMatMap gm(n.grad.data() + i * d.m * d.n, d.m, d.n);
        ConstMatMap am(a.data() + i * d.ra * d.ca, d.ra, d.ca);
        ConstMatMap bm(b.data() + (d.batch_b == 1 ? 0 : i) * d.rb * d.cb, d.rb, d.cb);
        MatMap dam(da.data() + i * d.ra * d.ca, d.ra, d.ca);
        MatMap dbm(db.data() + (d.batch_b == 1 ? 0 : i) * d.rb * d.cb, d.rb, d.cb);
        const auto aop = apply_t(am, at.ta);
        const auto bop = apply_t(bm, at.tb);
        // dA' = G B'^T, dB' = A'^T G, undoing the logical transposes.
        if (at.ta) {
            dam.noalias() += (gm * bop.transpose()).transpose();
        } else {
            dam.noalias() += gm * bop.transpose();
        }
        if (at.tb) {
            dbm.noalias() += (aop.transpose() * gm).transpose();
        } else {
            dbm.noalias() += aop.transpose() * gm;
        }
    }
}

void backward_tangent_align(Tape& tape, Node& n) {
    const AlignAttr& attr = std::get<AlignAttr>(n.attrs);
    const AlignSpec& spec = attr.spec;
    const Tensor& x = tape.node(n.parents[0]).value;
    const Tensor& y = n.value;
    const Tensor& g = n.grad;
    const long B = x.dim(0), H = x.dim(1), L = x.dim(2), C = x.dim(3);

    Tensor& dx = grad_buffer(tape, n.parents[0]);
    const bool theta_const = tape.node(n.parents[1]).op == Op::Constant;
    Tensor* dth = theta_const ? nullptr : &grad_buffer(tape, n.parents[1]);
    const bool has_w = n.n_parents == 3;
    Tensor* dw = nullptr;
    const Tensor* wv = nullptr;
    if (has_w && tape.node(n.parents[2]).op != Op::Constant) {
        dw = &grad_buffer(tape, n.parents[2]);
    }
    if (has_w) wv = &tape.node(n.parents[2]).value;

    const Tensor& th = tape.node(n.parents[1]).value;
    for (long h = 0; h < H; ++h) {
        const double lns =
            has_w ? log_scale_value((*wv)[h], spec.alpha, spec.mode) : 0.0;
        const double dlns =
            (dw != nullptr) ? dlog_scale_dw((*wv)[h], spec.alpha, spec.mode) : 0.0;
        const double* th_h = spec.kind == TangentTransform::Kind::DenseSkewExp
                                 ? nullptr
                                 : th.data() + h * (C / 2);
        for (long l = 0; l < L; ++l) {
            const double p = static_cast<double>((*spec.positions)[static_cast<std::size_t>(l)]);
            const double ep = spec.schedule.exponent((*spec.positions)[static_cast<std::size_t>(l)]);
            const double f = std::exp(0.5 * ep * lns);
            for (long b = 0; b < B; ++b) {
                const long base = (((b * H + h) * L) + l) * C;
                const double* xr = x.data() + base;
                const double* yr = y.data() + base;
                const double* gr = g.data() + base;
                double* dxr = dx.data() + base;
                double row_dot = 0.0;
                switch (spec.kind) {
                    case TangentTransform::Kind::BlockRotation:
                        for (long j = 0; j < C / 2; ++j) {
                            const double a = p * th_h[j];
                            const double c = std::cos(a), s = std::sin(a);
                            const double x0 = xr[2 * j], x1 = xr[2 * j + 1];
                            const double g0 = gr[2 * j], g1 = gr[2 * j + 1];
                            dxr[2 * j] += f * (c * g0 - s * g1);
                            dxr[2 * j + 1] += f * (s * g0 + c * g1);
                            if (dth) {
                                (*dth)[h * (C / 2) + j] +=
                                    p * f *
                                    (g0 * (-s * x0 + c * x1) + g1 * (-c * x0 - s * x1));
                            }
                            if (dw) row_dot += g0 * yr[2 * j] + g1 * yr[2 * j + 1];
                        }
                        break;
                    case TangentTransform::Kind::BlockReflection:
                        for (long j = 0; j < C / 2; ++j) {
                            const double a = 2.0 * p * th_h[j];
                            const double c = std::cos(a), s = std::sin(a);
                            const double x0 = xr[2 * j], x1 = xr[2 * j + 1];
                            const double g0 = gr[2 * j], g1 = gr[2 * j + 1];
                            dxr[2 * j] += f * (c * g0 + s * g1);
                            dxr[2 * j + 1] += f * (s * g0 - c * g1);
                            if (dth) {
                                (*dth)[h * (C / 2) + j] +=
                                    2.0 * p * f *
                                    (g0 * (-s * x0 + c * x1) + g1 * (c * x0 + s * x1));
                            }
                            if (dw) row_dot += g0 * yr[2 * j] + g1 * yr[2 * j + 1];
                        }
                        break;
                    case TangentTransform::Kind::Mixed4x4:
                        for (long t = 0; t < C / 4; ++t) {
                            {
                                const double a = p * th_h[2 * t];
                                const double c = std::cos(a), s = std::sin(a);
                                const double x0 = xr[4 * t], x1 = xr[4 * t + 1];
                                const double g0 = gr[4 * t], g1 = gr[4 * t + 1];
                                dxr[4 * t] += f * (c * g0 - s * g1);
                                dxr[4 * t + 1] += f * (s * g0 + c * g1);
                                if (dth) {
                                    (*dth)[h * (C / 2) + 2 * t] +=
                                        p * f *
                                        (g0 * (-s * x0 + c * x1) + g1 * (-c * x0 - s * x1));
                                }
                                if (dw) row_dot += g0 * yr[4 * t] + g1 * yr[4 * t + 1];
                            }
                            {
                                const double a = 2.0 * p * th_h[2 * t + 1];
                                const double c = std::cos(a), s = std::sin(a);
                                const double x2 = xr[4 * t + 2], x3 = xr[4 * t + 3];
                                const double g2 = gr[4 * t + 2], g3 = gr[4 * t + 3];
                                dxr[4 * t + 2] += f * (c * g2 + s * g3);
                                dxr[4 * t + 3] += f * (s * g2 - c * g3);
                                if (dth) {
                                    (*dth)[h * (C / 2) + 2 * t + 1] +=
                                        2.0 * p * f *
                                        (g2 * (-s * x2 + c * x3) + g3 * (c * x2 + s * x3));
                                }
                                if (dw) row_dot += g2 * yr[4 * t + 2] + g3 * yr[4 * t + 3];
                            }
                        }
                        break;
                    case TangentTransform::Kind::DenseSkewExp: {
                        const Matrix& e = (*attr.dense_inverse)[static_cast<std::size_t>(l)];
                        Eigen::Map<const Vector> gv(gr, C);
                        Eigen::Map<Vector> dxv(dxr, C);
                        dxv.noalias() += f * (e.transpose() * gv);
                        if (dw) row_dot = Eigen::Map<const Vector>(yr, C).dot(gv);
                        break;
                    }
                    case TangentTransform::Kind::General2D:
                        break;  // rejected at construction
                }
                if (dw) (*dw)[h] += 0.5 * ep * dlns * row_dot;
            }
        }
    }
}

void backward_attenuation(Tape& tape, Node& n) {
    const AttenuationAttr& attr = std::get<AttenuationAttr>(n.attrs);
    const AttenuationSpec& spec = attr.spec;
    const Tensor& sr = tape.node(n.parents[0]).value;
    const Tensor& omega = n.value;
    const Tensor& g = n.grad;
    const long H = omega.dim(0), L = omega.dim(1);
    const auto& pts = *spec.points;

    Tensor& dsr = grad_buffer(tape, n.parents[0]);
    Tensor* daf = nullptr;
    const Tensor* af = nullptr;
    if (n.n_parents == 2) {
        af = &tape.node(n.parents[1]).value;
        if (tape.node(n.parents[1]).op != Op::Constant) daf = &grad_buffer(tape, n.parents[1]);
    }

    for (long h = 0; h < H; ++h) {
        double sxx = 0.0, sxy = 0.0, syy = 0.0;
        for (long m = 0; m < L; ++m) {
            const double raw = spec.per_position_sigma ? sr[h * L + m] : sr[h];
            const double sig = softplus(raw);
            const double inv2s2 = 1.0 / (2.0 * sig * sig);
            double dsig_acc = 0.0;
            for (long n2 = 0; n2 < L; ++n2) {
                const long idx = (h * L + m) * L + n2;
                const double go = g[idx];
                if (go == 0.0) continue;
                const double lam = omega[idx];
                const double q = attr.quad[idx];
                dsig_acc += go * lam * q / (sig * sig * sig);
                if (daf) {
                    const double d0 = pts[static_cast<std::size_t>(m)][0] - pts[static_cast<std::size_t>(n2)][0];
                    const double d1 = pts[static_cast<std::size_t>(m)][1] - pts[static_cast<std::size_t>(n2)][1];
                    const double coef = -go * lam * inv2s2;
                    sxx += coef * d0 * d0;
                    sxy += coef * d0 * d1;
                    syy += coef * d1 * d1;
                }
            }
            const double dval = dsig_acc * sigmoid(raw);
            if (spec.per_position_sigma) {
                dsr[h * L + m] += dval;
            } else {
                dsr[h] += dval;
            }
        }
        if (daf) {
            const double* lf = af->data() + h * 3;
            // A = F F^T + eps I with F lower-triangular; dF = 2 sym(dA) F.
            (*daf)[h * 3 + 0] += 2.0 * (sxx * lf[0] + sxy * lf[1]);
            (*daf)[h * 3 + 1] += 2.0 * (sxy * lf[0] + syy * lf[1]);
            (*daf)[h * 3 + 2] += 2.0 * (syy * lf[2]);
        }
    }
}

}  // namespace

void Tape::backward(Value loss, ParamStore& params) {
    if (!loss.valid() || loss.tape != this) throw std::invalid_argument("backward: loss not on this tape");
    if (node(loss.id).value.size() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar, got " +
                                    node(loss.id).value.shape_string());
    }
    grad_buffer(*this, loss.id)[0] = 1.0;

    for (std::int32_t i = loss.id; i >= 0; --i) {
        Node& n = node(i);
        if (n.grad.empty()) {
            if (free_buffers && n.op != Op::Leaf) n.value.release();
            continue;
        }
        switch (n.op) {
            case Op::Leaf:
                if (n.param_index >= 0) {
                    params[n.param_index].grad.array() += n.grad.array();
                }
                break;
            case Op::Constant:
                break;
            case Op::Add: {
                grad_buffer(*this, n.parents[0]).array() += n.grad.array();
                grad_buffer(*this, n.parents[1]).array() += n.grad.array();
                break;
            }
            case Op::Sub: {
                grad_buffer(*this, n.parents[0]).array() += n.grad.array();
                grad_buffer(*this, n.parents[1]).array() -= n.grad.array();
                break;
            }
            case Op::Mul: {
                const Tensor& a = node(n.parents[0]).value;
                const Tensor& b = node(n.parents[1]).value;
                grad_buffer(*this, n.parents[0]).array() += n.grad.array() * b.array();
                grad_buffer(*this, n.parents[1]).array() += n.grad.array() * a.array();
                break;
            }
            case Op::Neg:
                grad_buffer(*this, n.parents[0]).array() -= n.grad.array();
                break;
            case Op::Scale:
                grad_buffer(*this, n.parents[0]).array() +=
                    std::get<ScaleAttr>(n.attrs).factor * n.grad.array();
                break;
            case Op::Exp:
                grad_buffer(*this, n.parents[0]).array() += n.grad.array() * n.value.array();
                break;
            case Op::Sqrt:
                grad_buffer(*this, n.parents[0]).array() +=
                    n.grad.array() / (2.0 * n.value.array());
                break;
            case Op::Pow: {
                const double e = std::get<PowAttr>(n.attrs).exponent;
                const Tensor& x = node(n.parents[0]).value;
                grad_buffer(*this, n.parents[0]).array() +=
                    n.grad.array() * e * x.array().pow(e - 1.0);
                break;
            }
            case Op::AddBcast: {
                grad_buffer(*this, n.parents[0]).array() += n.grad.array();
                Tensor& db = grad_buffer(*this, n.parents[1]);
                const long bn = db.size();
                const long reps = n.grad.size() / bn;
                for (long r = 0; r < reps; ++r) {
                    db.array() += ConstArrMap(n.grad.data() + r * bn, bn);
                }
                break;
            }
            case Op::MulBcast: {
                const Tensor& a = node(n.parents[0]).value;
                const Tensor& b = node(n.parents[1]).value;
                Tensor& da = grad_buffer(*this, n.parents[0]);
                Tensor& db = grad_buffer(*this, n.parents[1]);
                const long bn = b.size();
                const long reps = a.size() / bn;
                ConstArrMap bv = b.array();
                for (long r = 0; r < reps; ++r) {
                    ArrMap(da.data() + r * bn, bn) +=
                        ConstArrMap(n.grad.data() + r * bn, bn) * bv;
                    db.array() += ConstArrMap(n.grad.data() + r * bn, bn) *
                                  ConstArrMap(a.data() + r * bn, bn);
                }
                break;
            }
            case Op::Matmul:
                backward_matmul(*this, n);
                break;
            case Op::Softmax: {
                ConstMatMap ym = n.value.rows_by_last();
                ConstMatMap gm = n.grad.rows_by_last();
                MatMap dxm = grad_buffer(*this, n.parents[0]).rows_by_last();
                for (long r = 0; r < ym.rows(); ++r) {
                    const double dot = ym.row(r).dot(gm.row(r));
                    dxm.row(r).array() +=
                        ym.row(r).array() * (gm.row(r).array() - dot);
                }
                break;
            }
            case Op::LayerNorm: {
                const LayerNormAttr& at = std::get<LayerNormAttr>(n.attrs);
                const Tensor& x = node(n.parents[0]).value;
                const Tensor& gain = node(n.parents[1]).value;
                const long dlast = x.dim(-1);
                const long rows = x.size() / dlast;
                ConstMatMap xm = x.mat(rows, dlast);
                ConstMatMap gm = n.grad.mat(rows, dlast);
                MatMap dxm = grad_buffer(*this, n.parents[0]).mat(rows, dlast);
                ArrMap dgain = grad_buffer(*this, n.parents[1]).array();
                ArrMap dbias = grad_buffer(*this, n.parents[2]).array();
                Eigen::ArrayXd xhat(dlast), gy(dlast);
                for (long r = 0; r < rows; ++r) {
                    const double istd = at.istd[r];
                    xhat = (xm.row(r).transpose().array() - at.mean[r]) * istd;
                    gy = gm.row(r).transpose().array() * gain.array();
                    dgain += gm.row(r).transpose().array() * xhat;
                    dbias += gm.row(r).transpose().array();
                    const double mean_gy = gy.mean();
                    const double mean_gyx = (gy * xhat).mean();
                    dxm.row(r).array() +=
                        (istd * (gy - mean_gy - xhat * mean_gyx)).transpose();
                }
                break;
            }
            case Op::Gelu: {
                const Tensor& x = node(n.parents[0]).value;
                Tensor& dx = grad_buffer(*this, n.parents[0]);
                for (long i2 = 0; i2 < x.size(); ++i2) {
                    const double v = x[i2];
                    const double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                    dx[i2] += n.grad[i2] * (phi + v * pdf);
                }
                break;
            }
            case Op::MeanTokens: {
                const Tensor& x = node(n.parents[0]).value;
                const long B = x.dim(0), L = x.dim(1), D = x.dim(2);
                Tensor& dx = grad_buffer(*this, n.parents[0]);
                for (long b = 0; b < B; ++b) {
                    for (long l = 0; l < L; ++l) {
                        ArrMap(dx.data() + (b * L + l) * D, D) +=
                            ConstArrMap(n.grad.data() + b * D, D) / static_cast<double>(L);
                    }
                }
                break;
            }
            case Op::SumAll:
                grad_buffer(*this, n.parents[0]).array() += n.grad[0];
                break;
            case Op::SumLastKeep: {
                const Tensor& x = node(n.parents[0]).value;
                const long dlast = x.dim(-1);
                const long rows = x.size() / dlast;
                MatMap dxm = grad_buffer(*this, n.parents[0]).mat(rows, dlast);
                for (long r = 0; r < rows; ++r) dxm.row(r).array() += n.grad[r];
                break;
            }
            case Op::DivLast: {
                const Tensor& b = node(n.parents[1]).value;
                const long rows = b.size();
                const long dlast = n.value.dim(-1);
                ConstMatMap ym = n.value.mat(rows, dlast);
                ConstMatMap gm = n.grad.mat(rows, dlast);
                MatMap dam = grad_buffer(*this, n.parents[0]).mat(rows, dlast);
                Tensor& db = grad_buffer(*this, n.parents[1]);
                for (long r = 0; r < rows; ++r) {
                    dam.row(r) += gm.row(r) / b[r];
                    db[r] -= gm.row(r).dot(ym.row(r)) / b[r];
                }
                break;
            }
            case Op::SliceLast: {
                const SliceAttr& at = std::get<SliceAttr>(n.attrs);
                const Tensor& x = node(n.parents[0]).value;
                const long dlast = x.dim(-1);
                const long rows = x.size() / dlast;
                MatMap dxm = grad_buffer(*this, n.parents[0]).mat(rows, dlast);
                dxm.middleCols(at.offset, at.extent) += n.grad.mat(rows, at.extent);
                break;
            }
            case Op::ConcatLast: {
                const Tensor& a = node(n.parents[0]).value;
                const Tensor& b = node(n.parents[1]).value;
                const long da = a.dim(-1), db_ = b.dim(-1);
                const long rows = a.size() / da;
                ConstMatMap gm = n.grad.mat(rows, da + db_);
                grad_buffer(*this, n.parents[0]).mat(rows, da) += gm.leftCols(da);
                grad_buffer(*this, n.parents[1]).mat(rows, db_) += gm.rightCols(db_);
                break;
            }
            case Op::SplitHeads: {
                const Tensor& x = node(n.parents[0]).value;
                const long B = x.dim(0), L = x.dim(1), D = x.dim(2);
                const long H = std::get<HeadsAttr>(n.attrs).heads;
                const long dk = D / H;
                Tensor& dx = grad_buffer(*this, n.parents[0]);
                for (long b = 0; b < B; ++b)
                    for (long h = 0; h < H; ++h)
                        for (long l = 0; l < L; ++l)
                            ArrMap(dx.data() + (b * L + l) * D + h * dk, dk) +=
                                ConstArrMap(n.grad.data() + ((b * H + h) * L + l) * dk, dk);
                break;
            }
            case Op::MergeHeads: {
                const Tensor& x = node(n.parents[0]).value;
                const long B = x.dim(0), H = x.dim(1), L = x.dim(2), dk = x.dim(3);
                Tensor& dx = grad_buffer(*this, n.parents[0]);
                for (long b = 0; b < B; ++b)
                    for (long h = 0; h < H; ++h)
                        for (long l = 0; l < L; ++l)
                            ArrMap(dx.data() + ((b * H + h) * L + l) * dk, dk) +=
                                ConstArrMap(n.grad.data() + (b * L + l) * (H * dk) + h * dk, dk);
                break;
            }
            case Op::TangentAlign:
                backward_tangent_align(*this, n);
                break;
            case Op::Attenuation:
                backward_attenuation(*this, n);
                break;
            case Op::CrossEntropy: {
                const CrossEntropyAttr& at = std::get<CrossEntropyAttr>(n.attrs);
                const long B = at.softmax.dim(0), C = at.softmax.dim(1);
                const double s = n.grad[0] / static_cast<double>(B);
                Tensor& dz = grad_buffer(*this, n.parents[0]);
                dz.array() += s * at.softmax.array();
                for (long b = 0; b < B; ++b) {
                    dz[b * C + (*at.labels)[static_cast<std::size_t>(b)]] -= s;
                }
                break;
            }
        }
        if (free_buffers) {
            n.grad.release();
            if (n.op != Op::Leaf) n.value.release();
        }
    }
}

// ---- grad check -----------------------------------------------------------

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    os << (passed ? "PASS" : "FAIL") << "  max relative error " << max_rel_err << " over "
       << entries_checked << " entries (eps=" << eps << ", tol=" << tol << ")";
    for (const auto& e : worst) {
        os << "\n  " << e.param << "[" << e.index << "]  analytic=" << e.analytic
           << "  numeric=" << e.numeric << "  rel_err=" << e.rel_err;
    }
    return os.str();
}

GradCheckReport grad_check(const std::function<double(ParamStore&, bool with_grad)>& eval,
                           ParamStore& params, double eps, double tol, std::size_t keep_worst) {
    GradCheckReport report;
    report.eps = eps;
    report.tol = tol;

    params.zero_grad();
    eval(params, true);
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params.items()) analytic.push_back(p.grad);

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter& p = params[static_cast<int>(pi)];
        for (long j = 0; j < p.value.size(); ++j) {
            const double saved = p.value[j];
            p.value[j] = saved + eps;
            const double lp = eval(params, false);
            p.value[j] = saved - eps;
            const double lm = eval(params, false);
            p.value[j] = saved;
            const double fd = (lp - lm) / (2.0 * eps);
            const double ad = analytic[pi][j];
            const double rel =
                std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
            ++report.entries_checked;
            if (rel > report.max_rel_err) report.max_rel_err = rel;
            if (rel > tol || report.worst.size() < keep_worst) {
                report.worst.push_back({p.name, j, ad, fd, rel});
            }
        }
    }
    std::sort(report.worst.begin(), report.worst.end(),
              [](const GradCheckEntry& a, const GradCheckEntry& b) { return a.rel_err > b.rel_err; });
    if (report.worst.size() > keep_worst) report.worst.resize(keep_worst);
    report.passed = report.max_rel_err <= tol;
    return report;
}

}  // namespace riemannformer
