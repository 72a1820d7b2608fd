#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "riemannformer/geometry.hpp"
#include "riemannformer/tensor.hpp"

namespace riemannformer {

/// A named learnable value with a gradient buffer of the same shape.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    std::string group = "weights";  // weights | theta | w | sigma | a_factor
    bool decay = true;

    Parameter(std::string n, Tensor v, std::string g, bool d)
        : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros_like(value)),
          group(std::move(g)), decay(d) {}
};

class ParamStore {
public:
    int add(std::string name, Tensor value, std::string group = "weights", bool decay = true);
    int find(const std::string& name) const;  // -1 when absent

    Parameter& operator[](int i) { return items_[static_cast<std::size_t>(i)]; }
    const Parameter& operator[](int i) const { return items_[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return items_.size(); }
    long total_scalars() const;
    void zero_grad();

    std::vector<Parameter>& items() { return items_; }
    const std::vector<Parameter>& items() const { return items_; }

private:
    std::vector<Parameter> items_;
};

enum class Op : std::uint8_t {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Neg,
    Scale,
    Exp,
    Sqrt,
    Pow,
    AddBcast,
    MulBcast,
    Matmul,
    Softmax,
    LayerNorm,
    Gelu,
    MeanTokens,
    SumAll,
    SumLastKeep,
    DivLast,
    SliceLast,
    ConcatLast,
    SplitHeads,
    MergeHeads,
    TangentAlign,
    Attenuation,
    CrossEntropy,
};

const char* op_name(Op op);

struct MatmulAttr {
    bool ta = false, tb = false;
};
struct PowAttr {
    double exponent = 1.0;
};
struct ScaleAttr {
    double factor = 1.0;
};
struct LayerNormAttr {
    double eps = 1e-5;
    Tensor mean;  // per row
    Tensor istd;  // per row
};
struct SliceAttr {
    long offset = 0, extent = 0;
};
struct HeadsAttr {
    long heads = 1;
};

/// Static description of a tangent-alignment op: which transform kind to
/// apply, the per-row position indices, and how the scale base is realized.
struct AlignSpec {
    TangentTransform::Kind kind = TangentTransform::Kind::BlockRotation;
    ScaleSchedule schedule;
    ScaleParamMode mode = ScaleParamMode::Unit;
    double alpha = 0.1;
    std::shared_ptr<const std::vector<long>> positions;
    /// DenseSkewExp only: the predefined skew generator.
    std::shared_ptr<const Matrix> skew;
};

struct AlignAttr {
    AlignSpec spec;
    /// DenseSkewExp: exp(-p_l X) per row, built once at op creation.
    std::shared_ptr<const std::vector<Matrix>> dense_inverse;
};

/// Static description of an attenuation op: token coordinates plus the
/// sigma sharing and A-matrix modes.
struct AttenuationSpec {
    std::shared_ptr<const std::vector<std::array<double, 2>>> points;
    bool per_position_sigma = false;
    bool learnable_a = false;
    double spd_eps = 1e-6;
};

struct AttenuationAttr {
    AttenuationSpec spec;
    Tensor quad;  // saved quadratic distances [H, L, L]
};

struct CrossEntropyAttr {
    std::shared_ptr<const std::vector<int>> labels;
    Tensor softmax;  // saved [B, C]
};

using NodeAttr = std::variant<std::monostate, MatmulAttr, PowAttr, ScaleAttr, LayerNormAttr,
                              SliceAttr, HeadsAttr, AlignAttr, AttenuationAttr, CrossEntropyAttr>;

struct Node {
    Op op = Op::Constant;
    std::array<std::int32_t, 3> parents{-1, -1, -1};
    std::int8_t n_parents = 0;
    std::int32_t param_index = -1;  // Leaf only
    Tensor value;
    Tensor grad;
    NodeAttr attrs;
};

class Tape;

/// Handle to a node on a tape; cheap to copy, supports operator sugar.
struct Value {
    Tape* tape = nullptr;
    std::int32_t id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& tensor() const;
    const std::vector<long>& shape() const;
};

class Tape {
public:
    /// Scan every op output for NaN/Inf and throw if found. On by default:
    /// non-finite values are an error state, not a propagating quantity.
    bool validate_finite = true;
    /// Release node buffers as the backward sweep retires them.
    bool free_buffers = true;

    Value leaf(ParamStore& params, int param_index);
    Value constant(Tensor v);

    Node& node(std::int32_t id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t num_nodes() const { return nodes_.size(); }

    /// Reverse sweep from a scalar loss, accumulating into Parameter::grad.
    void backward(Value loss, ParamStore& params);

    void clear() { nodes_.clear(); }

    Value emplace(Op op, Tensor value, std::initializer_list<Value> parents, NodeAttr attrs = {});

private:
    std::vector<Node> nodes_;
};

// ---- op builders ---------------------------------------------------------

Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value neg(Value a);
Value scale(Value a, double factor);
Value vexp(Value a);
Value vsqrt(Value a);
Value vpow(Value a, double exponent);

/// a + b with b's shape equal to a trailing suffix of a's shape.
Value add_bcast(Value a, Value b);
/// a * b with the same trailing-suffix broadcast rule.
Value mul_bcast(Value a, Value b);

/// Batched matrix product with optional operand transposes. Operands are
/// [*, M, K] and [*, K, N]; either the leading batch extents match, or b is
/// rank-2 and shared across the batch.
Value matmul(Value a, Value b, bool ta = false, bool tb = false);

Value softmax_lastdim(Value x);
Value layer_norm(Value x, Value gain, Value bias, double eps = 1e-5);
Value gelu(Value x);
Value mean_tokens(Value x);  // [B, L, D] -> [B, D]
Value sum_all(Value x);
Value sum_lastdim_keep(Value x);         // [..., L] -> [..., 1]
Value div_lastdim(Value a, Value b);     // a / b, b broadcast over last dim
Value slice_lastdim(Value x, long offset, long extent);
Value concat_lastdim(Value a, Value b);
Value split_heads(Value x, long heads);  // [B, L, H*dk] -> [B, H, L, dk]
Value merge_heads(Value x);              // inverse of split_heads

/// Row-wise application of T_{p}^{-1}. x is [B, H, L, C]; theta is
/// [H, C/2] block angles; w is the per-head raw scale parameter [H]
/// (absent in Unit mode).
Value tangent_align(Value x, Value theta, std::optional<Value> w, AlignSpec spec);

/// Locality-focusing attenuation matrix, [H, L, L]. sigma_raw is [H]
/// (shared) or [H, L] (per position); a_factor is [H, 3] packing the
/// lower-triangular factor of A.
Value attenuation_op(Value sigma_raw, std::optional<Value> a_factor, AttenuationSpec spec);

Value cross_entropy_mean(Value logits, std::shared_ptr<const std::vector<int>> labels);

inline Value operator+(Value a, Value b) { return add(a, b); }
inline Value operator-(Value a, Value b) { return sub(a, b); }
inline Value operator*(Value a, Value b) { return mul(a, b); }

double softplus(double x);
double sigmoid(double x);

// ---- gradient checking ----------------------------------------------------

struct GradCheckEntry {
    std::string param;
    long index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckReport {
    bool passed = false;
    double max_rel_err = 0.0;
    long entries_checked = 0;
    double eps = 0.0, tol = 0.0;
    std::vector<GradCheckEntry> worst;  // descending by rel_err, capped
    std::string summary() const;
};

/// Compare tape gradients of a scalar function against central finite
/// differences over every parameter entry. `eval` must rebuild its graph
/// from the current parameter values on each call and run backward only
/// when asked. Failures are reported, never thrown.
GradCheckReport grad_check(const std::function<double(ParamStore&, bool with_grad)>& eval,
                           ParamStore& params, double eps = 1e-5, double tol = 1e-4,
                           std::size_t keep_worst = 8);

}  // namespace riemannformer
