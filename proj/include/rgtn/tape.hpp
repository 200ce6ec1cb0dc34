#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <deque>
#include <memory>
#include <string>
#include <vector>

#include "rgtn/fastmath.hpp"
#include "rgtn/random.hpp"
#include "rgtn/tensor.hpp"

namespace rgtn {

// Reverse-mode automatic differentiation over dense 64-bit tensors.
//
// A Tape is an ordered record of operations. Forward ops append nodes in
// topological order; backward() replays the record once in reverse. Node
// storage is pooled: reset() rewinds the tape but keeps the buffers, so a
// training loop that builds the same graph every batch performs almost no
// allocation after the first batch.
//
// Tapes are single-threaded. Batch-level parallelism runs one tape per
// worker and sums the resulting gradients in a fixed order.

enum class Op : std::uint8_t {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    SubCol,
    MulCol,
    Scale,
    ConcatCols,
    ConcatRows,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    SumAll,
    MeanAll,
    SumAxis0,
    SumAxis1,
    Softmax0,
    Softmax1,
    Dropout,
    GatherRows,
    SegmentSum,
    SegmentMax,
    RowMax,
    TakePerRow,
    BlockMatConst,
    GruEncode,
    AttentionHead,
};

class Tape;

// Lightweight handle to a tape node.
struct Var {
    Tape* tape = nullptr;
    std::int32_t id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

using IndexVec = std::vector<std::int32_t>;
using IndexPtr = std::shared_ptr<const IndexVec>;

namespace kernels {

// C(+)= A[m x k] * B[k x n], row-major. Each output row accumulates in a
// stack buffer so the compiler can keep the inner loop in vector registers;
// accumulation runs in ascending p order, which pins the floating-point
// result regardless of the code path.
inline void mm_nn(double* __restrict c, const double* __restrict a,
                  const double* __restrict b, std::int64_t m, std::int64_t k,
                  std::int64_t n, bool accumulate) {
    constexpr std::int64_t kMaxCols = 256;
    if (n <= kMaxCols) {
        double acc[kMaxCols];
        double acc2[kMaxCols];
        std::int64_t i = 0;
        // two output rows per pass reuse each B row twice
        for (; i + 2 <= m; i += 2) {
            const double* arow = a + i * k;
            const double* arow2 = arow + k;
            double* crow = c + i * n;
            double* crow2 = crow + n;
            if (accumulate)
                for (std::int64_t j = 0; j < n; ++j) {
                    acc[j] = crow[j];
                    acc2[j] = crow2[j];
                }
            else
                for (std::int64_t j = 0; j < n; ++j) acc[j] = acc2[j] = 0.0;
            for (std::int64_t p = 0; p < k; ++p) {
                const double av = arow[p];
                const double av2 = arow2[p];
                const double* brow = b + p * n;
                for (std::int64_t j = 0; j < n; ++j) {
                    acc[j] += av * brow[j];
                    acc2[j] += av2 * brow[j];
                }
            }
            for (std::int64_t j = 0; j < n; ++j) {
                crow[j] = acc[j];
                crow2[j] = acc2[j];
            }
        }
        for (; i < m; ++i) {
            const double* arow = a + i * k;
            double* crow = c + i * n;
            if (accumulate)
                for (std::int64_t j = 0; j < n; ++j) acc[j] = crow[j];
            else
                for (std::int64_t j = 0; j < n; ++j) acc[j] = 0.0;
            for (std::int64_t p = 0; p < k; ++p) {
                const double av = arow[p];
                const double* brow = b + p * n;
                for (std::int64_t j = 0; j < n; ++j) acc[j] += av * brow[j];
            }
            for (std::int64_t j = 0; j < n; ++j) crow[j] = acc[j];
        }
        return;
    }
    if (!accumulate) std::memset(c, 0, static_cast<std::size_t>(m * n) * sizeof(double));
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A[m x n] * B^T where B is [k x n]  ->  C is [m x k]. Row-dot form.
inline void mm_nt_acc(double* __restrict c, const double* __restrict a,
                      const double* __restrict b, std::int64_t m, std::int64_t n,
                      std::int64_t k) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* crow = c + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            const double* brow = b + p * n;
            double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
            std::int64_t j = 0;
            for (; j + 4 <= n; j += 4) {
                s0 += arow[j] * brow[j];
                s1 += arow[j + 1] * brow[j + 1];
                s2 += arow[j + 2] * brow[j + 2];
                s3 += arow[j + 3] * brow[j + 3];
            }
            double s = (s0 + s1) + (s2 + s3);
            for (; j < n; ++j) s += arow[j] * brow[j];
            crow[p] += s;
        }
    }
}

// C += A^T * B where A is [m x k], B is [m x n]  ->  C is [k x n]. Axpy form.
inline void mm_tn_acc(double* __restrict c, const double* __restrict a,
                      const double* __restrict b, std::int64_t m, std::int64_t k,
                      std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            double* crow = c + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace kernels

class Tape {
public:
    struct Node {
        Op op = Op::Leaf;
        std::int32_t a = -1, b = -1;
        std::int64_t rows = 0, cols = 0;
        Shape shape;
        std::vector<double> val;
        std::vector<double> grad;
        std::uint32_t grad_stamp = 0;
        double scalar = 0.0;
        std::int32_t segments = 0;
        IndexPtr idx;
        std::shared_ptr<const Tensor> const_mat;
        std::vector<std::int32_t> cat_inputs;
        std::vector<double> aux;  // dropout mask
        bool needs_grad = false;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Rewind the tape, keeping node buffers for reuse.
    void reset() {
        size_ = 0;
        consumed_ = false;
    }

    std::size_t size() const { return size_; }
    bool consumed() const { return consumed_; }

    Var leaf(const Tensor& value, bool requires_grad = false) {
        std::int32_t id = alloc(Op::Leaf, value.shape(), value.rows(), value.cols());
        Node& n = node(id);
        std::memcpy(n.val.data(), value.data(),
                    static_cast<std::size_t>(value.numel()) * sizeof(double));
        n.needs_grad = requires_grad;
        return {this, id};
    }

    Var leaf_zeros(Shape shape, bool requires_grad = false) {
        Tensor t(std::move(shape));
        return leaf(t, requires_grad);
    }

    const Node& node(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)]; }
    Node& node(std::int32_t id) { return nodes_[static_cast<std::size_t>(id)]; }

    const std::vector<double>& val(Var v) const { return node(v.id).val; }
    const Shape& shape_of(Var v) const { return node(v.id).shape; }
    std::int64_t rows_of(Var v) const { return node(v.id).rows; }
    std::int64_t cols_of(Var v) const { return node(v.id).cols; }

    Tensor value_tensor(Var v) const {
        const Node& n = node(v.id);
        return Tensor(n.shape, n.val);
    }

    // Gradient of a node after backward(); zero tensor if the node did not
    // receive any gradient.
    Tensor grad_tensor(Var v) const {
        const Node& n = node(v.id);
        if (n.grad_stamp != pass_ || n.grad.empty()) return Tensor(n.shape, 0.0);
        return Tensor(n.shape, n.grad);
    }

    // dLoss/dNode for every recorded node that requires gradients. The loss
    // must be scalar, and the tape may be consumed only once per forward pass.
    void backward(Var loss) {
        check(loss.tape == this, "backward: loss lives on a different tape");
        const Node& ln = node(loss.id);
        if (ln.rows * ln.cols != 1)
            fail("backward: loss must be a scalar, got shape " + shape_str(ln.shape));
        check(!consumed_,
              "backward: tape already consumed; run a fresh forward pass first");
        consumed_ = true;
        ++pass_;
        double* g = grad_acc(loss.id);
        g[0] = 1.0;
        for (std::int32_t i = loss.id; i >= 0; --i) backward_node(i);
    }

    // ------------------------------------------------------------------
    // forward operations
    // ------------------------------------------------------------------

    Var matmul(Var a, Var b) {
        const Node& na = node(a.id);
        const Node& nb = node(b.id);
        if (na.shape.size() != 2 || nb.shape.size() != 2)
            fail("matmul: expects rank-2 tensors, got " + shape_str(na.shape) + " and " +
                 shape_str(nb.shape));
        if (na.cols != nb.rows)
            fail("matmul: inner dimensions differ: " + shape_str(na.shape) + " vs " +
                 shape_str(nb.shape));
        std::int32_t id = alloc(Op::MatMul, {na.rows, nb.cols}, na.rows, nb.cols);
        bind(id, a, b);
        Node& n = node(id);
        kernels::mm_nn(n.val.data(), node(a.id).val.data(), node(b.id).val.data(),
                       na.rows, na.cols, nb.cols, false);
        return {this, id};
    }

    Var transpose(Var a) {
        const Node& na = node(a.id);
        if (na.shape.size() != 2)
            fail("transpose: expects rank-2 tensor, got " + shape_str(na.shape));
        std::int32_t id = alloc(Op::Transpose, {na.cols, na.rows}, na.cols, na.rows);
        bind(id, a);
        Node& n = node(id);
        const Node& src = node(a.id);
        for (std::int64_t i = 0; i < src.rows; ++i)
            for (std::int64_t j = 0; j < src.cols; ++j)
                n.val[static_cast<std::size_t>(j * src.rows + i)] =
                    src.val[static_cast<std::size_t>(i * src.cols + j)];
        return {this, id};
    }

    Var add(Var a, Var b) { return binary_same(Op::Add, a, b, "add"); }
    Var sub(Var a, Var b) { return binary_same(Op::Sub, a, b, "sub"); }
    Var mul(Var a, Var b) { return binary_same(Op::Mul, a, b, "mul"); }
    Var div(Var a, Var b) { return binary_same(Op::Div, a, b, "div"); }

    // a[m x n] + row vector b[n]
    Var add_row(Var a, Var b) {
        const Node& na = node(a.id);
        const Node& nb = node(b.id);
        if (nb.rows != 1 || nb.cols != na.cols)
            fail("add_row: bias shape " + shape_str(nb.shape) + " incompatible with " +
                 shape_str(na.shape));
        std::int32_t id = alloc(Op::AddRow, na.shape, na.rows, na.cols);
        bind(id, a, b);
        Node& n = node(id);
        const double* pa = node(a.id).val.data();
        const double* pb = node(b.id).val.data();
        for (std::int64_t i = 0; i < na.rows; ++i)
            for (std::int64_t j = 0; j < na.cols; ++j)
                n.val[static_cast<std::size_t>(i * na.cols + j)] =
                    pa[i * na.cols + j] + pb[j];
        return {this, id};
    }

    // a[m x n] - column vector b[m x 1]
    Var sub_col(Var a, Var b) {
        const Node& na = node(a.id);
        const Node& nb = node(b.id);
        if (nb.cols != 1 || nb.rows != na.rows)
            fail("sub_col: column shape " + shape_str(nb.shape) + " incompatible with " +
                 shape_str(na.shape));
        std::int32_t id = alloc(Op::SubCol, na.shape, na.rows, na.cols);
        bind(id, a, b);
        Node& n = node(id);
        const double* pa = node(a.id).val.data();
        const double* pb = node(b.id).val.data();
        for (std::int64_t i = 0; i < na.rows; ++i) {
            const double c = pb[i];
            for (std::int64_t j = 0; j < na.cols; ++j)
                n.val[static_cast<std::size_t>(i * na.cols + j)] = pa[i * na.cols + j] - c;
        }
        return {this, id};
    }

    // a[m x n] * column vector b[m x 1], broadcast along columns
    Var mul_col(Var a, Var b) {
        const Node& na = node(a.id);
        const Node& nb = node(b.id);
        if (nb.cols != 1 || nb.rows != na.rows)
            fail("mul_col: column shape " + shape_str(nb.shape) + " incompatible with " +
                 shape_str(na.shape));
        std::int32_t id = alloc(Op::MulCol, na.shape, na.rows, na.cols);
        bind(id, a, b);
        Node& n = node(id);
        const double* pa = node(a.id).val.data();
        const double* pb = node(b.id).val.data();
        for (std::int64_t i = 0; i < na.rows; ++i) {
            const double c = pb[i];
            for (std::int64_t j = 0; j < na.cols; ++j)
                n.val[static_cast<std::size_t>(i * na.cols + j)] = pa[i * na.cols + j] * c;
        }
        return {this, id};
    }

    Var scale(Var a, double c) {
        const Node& na = node(a.id);
        std::int32_t id = alloc(Op::Scale, na.shape, na.rows, na.cols);
        bind(id, a);
        Node& n = node(id);
        n.scalar = c;
        const double* pa = node(a.id).val.data();
        for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = c * pa[i];
        return {this, id};
    }

    Var concat(const std::vector<Var>& parts, int axis) {
        check(!parts.empty(), "concat: needs at least one input");
        check(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
        const Node& first = node(parts[0].id);
        std::int64_t rows = first.rows, cols = first.cols;
        for (std::size_t i = 1; i < parts.size(); ++i) {
            const Node& p = node(parts[i].id);
            if (axis == 1) {
                if (p.rows != rows)
                    fail("concat: row mismatch " + shape_str(p.shape) + " vs " +
                         shape_str(first.shape));
                cols += p.cols;
            } else {
                if (p.cols != cols)
                    fail("concat: column mismatch " + shape_str(p.shape) + " vs " +
                         shape_str(first.shape));
                rows += p.rows;
            }
        }
        std::int32_t id = alloc(axis == 1 ? Op::ConcatCols : Op::ConcatRows,
                                {rows, cols}, rows, cols);
        Node& n = node(id);
        n.cat_inputs.clear();
        bool ng = false;
        for (const Var& v : parts) {
            check(v.tape == this, "concat: input on a different tape");
            n.cat_inputs.push_back(v.id);
            ng = ng || node(v.id).needs_grad;
        }
        n.needs_grad = ng;
        if (axis == 1) {
            std::int64_t off = 0;
            for (const Var& v : parts) {
                const Node& p = node(v.id);
                for (std::int64_t i = 0; i < p.rows; ++i)
                    std::memcpy(n.val.data() + i * cols + off, p.val.data() + i * p.cols,
                                static_cast<std::size_t>(p.cols) * sizeof(double));
                off += p.cols;
            }
        } else {
            std::int64_t off = 0;
            for (const Var& v : parts) {
                const Node& p = node(v.id);
                std::memcpy(n.val.data() + off * cols, p.val.data(),
                            static_cast<std::size_t>(p.rows * p.cols) * sizeof(double));
                off += p.rows;
            }
        }
        return {this, id};
    }

    Var sigmoid(Var a) {
        Var r = unary(Op::Sigmoid, a);
        Node& n = node(r.id);
        fastmath::sigmoid_array(n.val.data(), node(a.id).val.data(), n.val.size());
        return r;
    }

    Var tanh_(Var a) {
        Var r = unary(Op::Tanh, a);
        Node& n = node(r.id);
        fastmath::tanh_array(n.val.data(), node(a.id).val.data(), n.val.size());
        return r;
    }

    Var relu(Var a) {
        Var r = unary(Op::Relu, a);
        Node& n = node(r.id);
        const double* pa = node(a.id).val.data();
        for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = pa[i] > 0.0 ? pa[i] : 0.0;
        return r;
    }

    Var exp_(Var a) {
        Var r = unary(Op::Exp, a);
        Node& n = node(r.id);
        fastmath::exp_array(n.val.data(), node(a.id).val.data(), n.val.size());
        return r;
    }

    Var log_(Var a) {
        Var r = unary(Op::Log, a);
        Node& n = node(r.id);
        const double* pa = node(a.id).val.data();
        for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::log(pa[i]);
        return r;
    }

    Var sum_all(Var a) {
        std::int32_t id = alloc(Op::SumAll, {1}, 1, 1);
        bind(id, a);
        double s = 0.0;
        for (double v : node(a.id).val) s += v;
        node(id).val[0] = s;
        return {this, id};
    }

    Var mean_all(Var a) {
        std::int32_t id = alloc(Op::MeanAll, {1}, 1, 1);
        bind(id, a);
        double s = 0.0;
        const Node& na = node(a.id);
        for (double v : na.val) s += v;
        node(id).val[0] = s / static_cast<double>(na.val.size());
        return {this, id};
    }

    // sum over the given axis of a rank-2 tensor; axis 0 -> [1 x n], axis 1 -> [m x 1]
    Var sum_axis(Var a, int axis) {
        const Node& na = node(a.id);
        if (na.shape.size() != 2)
            fail("sum_axis: expects rank-2 tensor, got " + shape_str(na.shape));
        check(axis == 0 || axis == 1, "sum_axis: axis must be 0 or 1");
        std::int32_t id;
        if (axis == 0) {
            id = alloc(Op::SumAxis0, {1, na.cols}, 1, na.cols);
            bind(id, a);
            Node& n = node(id);
            std::memset(n.val.data(), 0, static_cast<std::size_t>(na.cols) * sizeof(double));
            const double* pa = node(a.id).val.data();
            for (std::int64_t i = 0; i < na.rows; ++i)
                for (std::int64_t j = 0; j < na.cols; ++j) n.val[static_cast<std::size_t>(j)] += pa[i * na.cols + j];
        } else {
            id = alloc(Op::SumAxis1, {na.rows, 1}, na.rows, 1);
            bind(id, a);
            Node& n = node(id);
            const double* pa = node(a.id).val.data();
            for (std::int64_t i = 0; i < na.rows; ++i) {
                double s = 0.0;
                for (std::int64_t j = 0; j < na.cols; ++j) s += pa[i * na.cols + j];
                n.val[static_cast<std::size_t>(i)] = s;
            }
        }
        return {this, id};
    }

    // Numerically stable softmax along the given axis (max subtraction; the
    // shift leaves the result and its gradient unchanged).
    Var softmax(Var a, int axis = 1) {
        const Node& na = node(a.id);
        check(axis == 0 || axis == 1, "softmax: axis must be 0 or 1");
        std::int32_t id = alloc(axis == 1 ? Op::Softmax1 : Op::Softmax0, na.shape,
                                na.rows, na.cols);
        bind(id, a);
        Node& n = node(id);
        const double* pa = node(a.id).val.data();
        const std::int64_t rows = na.rows, cols = na.cols;
        if (axis == 1) {
            for (std::int64_t i = 0; i < rows; ++i) {
                const double* row = pa + i * cols;
                double m = row[0];
                for (std::int64_t j = 1; j < cols; ++j) m = std::max(m, row[j]);
                double s = 0.0;
                for (std::int64_t j = 0; j < cols; ++j) {
                    double e = std::exp(row[j] - m);
                    n.val[static_cast<std::size_t>(i * cols + j)] = e;
                    s += e;
                }
                const double inv = 1.0 / s;
                for (std::int64_t j = 0; j < cols; ++j)
                    n.val[static_cast<std::size_t>(i * cols + j)] *= inv;
            }
        } else {
            for (std::int64_t j = 0; j < cols; ++j) {
                double m = pa[j];
                for (std::int64_t i = 1; i < rows; ++i) m = std::max(m, pa[i * cols + j]);
                double s = 0.0;
                for (std::int64_t i = 0; i < rows; ++i) {
                    double e = std::exp(pa[i * cols + j] - m);
                    n.val[static_cast<std::size_t>(i * cols + j)] = e;
                    s += e;
                }
                const double inv = 1.0 / s;
                for (std::int64_t i = 0; i < rows; ++i)
                    n.val[static_cast<std::size_t>(i * cols + j)] *= inv;
            }
        }
        return {this, id};
    }

    // Inverted dropout: kept activations are scaled by 1/keep at train time,
    // so evaluation is the identity (the input Var is returned unchanged).
    Var dropout(Var a, double rate, bool training, Rng& rng) {
        if (!(rate >= 0.0 && rate < 1.0))
            fail("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
        if (!training || rate == 0.0) return a;
        const Node& na = node(a.id);
        std::int32_t id = alloc(Op::Dropout, na.shape, na.rows, na.cols);
        bind(id, a);
        Node& n = node(id);
        const double keep = 1.0 - rate;
        const double inv_keep = 1.0 / keep;
        n.aux.resize(n.val.size());
        const double* pa = node(a.id).val.data();
        for (std::size_t i = 0; i < n.val.size(); ++i) {
            const double m = rng.uniform() < keep ? inv_keep : 0.0;
            n.aux[i] = m;
            n.val[i] = pa[i] * m;
        }
        return {this, id};
    }

    Var gather_rows(Var a, IndexPtr idx) {
        const Node& na = node(a.id);
        const std::int64_t out_rows = static_cast<std::int64_t>(idx->size());
        for (std::int32_t r : *idx)
            check(r >= 0 && r < na.rows, "gather_rows: row index out of range");
        std::int32_t id = alloc(Op::GatherRows, {out_rows, na.cols}, out_rows, na.cols);
        bind(id, a);
        Node& n = node(id);
        n.idx = std::move(idx);
        const double* pa = node(a.id).val.data();
        const std::int64_t cols = na.cols;
        for (std::int64_t e = 0; e < out_rows; ++e)
            std::memcpy(n.val.data() + e * cols, pa + (*n.idx)[static_cast<std::size_t>(e)] * cols,
                        static_cast<std::size_t>(cols) * sizeof(double));
        return {this, id};
    }

    // Sums rows of a into `segments` output rows keyed by seg[row].
    Var segment_sum(Var a, IndexPtr seg, std::int32_t segments) {
        const Node& na = node(a.id);
        check(static_cast<std::int64_t>(seg->size()) == na.rows,
              "segment_sum: segment map length does not match rows");
        for (std::int32_t s : *seg)
            check(s >= 0 && s < segments, "segment_sum: segment index out of range");
        std::int32_t id = alloc(Op::SegmentSum, {segments, na.cols}, segments, na.cols);
        bind(id, a);
        Node& n = node(id);
        n.idx = std::move(seg);
        n.segments = segments;
        std::memset(n.val.data(), 0, n.val.size() * sizeof(double));
        const double* pa = node(a.id).val.data();
        const std::int64_t cols = na.cols;
        for (std::int64_t e = 0; e < na.rows; ++e) {
            double* out = n.val.data() + (*n.idx)[static_cast<std::size_t>(e)] * cols;
            const double* src = pa + e * cols;
            for (std::int64_t j = 0; j < cols; ++j) out[j] += src[j];
        }
        return {this, id};
    }

    // Per-segment maximum, detached from the graph (used for the stable
    // softmax shift; subtracting a constant does not change the result).
    Var segment_max_detached(Var a, IndexPtr seg, std::int32_t segments) {
        const Node& na = node(a.id);
        check(static_cast<std::int64_t>(seg->size()) == na.rows,
              "segment_max: segment map length does not match rows");
        std::int32_t id = alloc(Op::SegmentMax, {segments, na.cols}, segments, na.cols);
        Node& n = node(id);
        n.a = a.id;
        n.needs_grad = false;
        n.idx = std::move(seg);
        n.segments = segments;
        for (auto& v : n.val) v = -1e300;
        const double* pa = node(a.id).val.data();
        const std::int64_t cols = na.cols;
        for (std::int64_t e = 0; e < na.rows; ++e) {
            double* out = n.val.data() + (*n.idx)[static_cast<std::size_t>(e)] * cols;
            const double* src = pa + e * cols;
            for (std::int64_t j = 0; j < cols; ++j)
                if (src[j] > out[j]) out[j] = src[j];
        }
        return {this, id};
    }

    // Row-wise maximum [m x n] -> [m x 1], detached from the graph.
    Var row_max_detached(Var a) {
        const Node& na = node(a.id);
        std::int32_t id = alloc(Op::RowMax, {na.rows, 1}, na.rows, 1);
        Node& n = node(id);
        n.a = a.id;
        n.needs_grad = false;
        const double* pa = node(a.id).val.data();
        for (std::int64_t i = 0; i < na.rows; ++i) {
            double m = pa[i * na.cols];
            for (std::int64_t j = 1; j < na.cols; ++j) m = std::max(m, pa[i * na.cols + j]);
            n.val[static_cast<std::size_t>(i)] = m;
        }
        return {this, id};
    }

    // Picks element idx[i] out of each row: [m x n] -> [m x 1].
    Var take_per_row(Var a, IndexPtr idx) {
        const Node& na = node(a.id);
        check(static_cast<std::int64_t>(idx->size()) == na.rows,
              "take_per_row: index length does not match rows");
        for (std::int32_t c : *idx)
            check(c >= 0 && c < na.cols, "take_per_row: column index out of range");
        std::int32_t id = alloc(Op::TakePerRow, {na.rows, 1}, na.rows, 1);
        bind(id, a);
        Node& n = node(id);
        n.idx = std::move(idx);
        const double* pa = node(a.id).val.data();
        for (std::int64_t i = 0; i < na.rows; ++i)
            n.val[static_cast<std::size_t>(i)] = pa[i * na.cols + (*n.idx)[static_cast<std::size_t>(i)]];
        return {this, id};
    }

    // Fused GRU window encoder: the full K-step recurrence over stacked node
    // rows as one node. x_all is [K*rows x F]; gate weights keep their
    // [H x (H+F)] layout and act on the concatenation [h, x]. Forward values
    // are bit-identical to folding gru_step (same kernels, same accumulation
    // order); backward replays the recurrence in reverse with hand-written
    // kernels, which is what makes 60-step windows affordable.
    Var gru_encode_fused(Var x_all, Var w_r, Var w_z, Var w_h, Var b_r, Var b_z, Var b_h,
                         std::int64_t rows) {
        const Node& nx = node(x_all.id);
        const Node& nwr = node(w_r.id);
        const std::int64_t hidden = nwr.rows;
        const std::int64_t hf = nwr.cols;
        const std::int64_t in_dim = hf - hidden;
        check(hidden > 0 && in_dim > 0, "gru_encode: bad gate weight shape");
        if (node(w_z.id).rows != hidden || node(w_z.id).cols != hf ||
            node(w_h.id).rows != hidden || node(w_h.id).cols != hf)
            fail("gru_encode: gate weight shapes disagree");
        if (node(b_r.id).val.size() != static_cast<std::size_t>(hidden) ||
            node(b_z.id).val.size() != static_cast<std::size_t>(hidden) ||
            node(b_h.id).val.size() != static_cast<std::size_t>(hidden))
            fail("gru_encode: bias shapes disagree");
        check(rows > 0, "gru_encode: rows must be positive");
        if (nx.cols != in_dim)
            fail("gru_encode: input width " + std::to_string(nx.cols) +
                 " does not match the gate weights (" + std::to_string(in_dim) + ")");
        if (nx.rows == 0 || nx.rows % rows != 0)
            fail("gru_encode: input rows " + std::to_string(nx.rows) +
                 " are not a positive multiple of " + std::to_string(rows));
        const std::int64_t steps = nx.rows / rows;

        std::int32_t id = alloc(Op::GruEncode, {rows, hidden}, rows, hidden);
        Node& n = node(id);
        n.cat_inputs = {x_all.id, w_r.id, w_z.id, w_h.id, b_r.id, b_z.id, b_h.id};
        bool ng = false;
        for (std::int32_t input : n.cat_inputs) ng = ng || node(input).needs_grad;
        n.needs_grad = ng;
        n.segments = static_cast<std::int32_t>(steps);

        // per-step saves: h_prev [rows x H], interleaved gates rz [rows x 2H],
        // candidate c [rows x H]; transposed gate blocks at the tail. The
        // concatenations [h, x] and [r*h, x] are rebuilt in scratch when
        // needed, which keeps the saved footprint at 4H doubles per row.
        const std::size_t stride = static_cast<std::size_t>(rows) *
                                   static_cast<std::size_t>(4 * hidden);
        n.aux.resize(static_cast<std::size_t>(steps) * stride +
                     static_cast<std::size_t>(hf) * static_cast<std::size_t>(3 * hidden));
        double* wrz_t = n.aux.data() + static_cast<std::size_t>(steps) * stride;
        double* wh_t = wrz_t + static_cast<std::size_t>(hf) * static_cast<std::size_t>(2 * hidden);
        const double* wr = node(w_r.id).val.data();
        const double* wz = node(w_z.id).val.data();
        const double* wh = node(w_h.id).val.data();
        for (std::int64_t p = 0; p < hf; ++p)
            for (std::int64_t j = 0; j < hidden; ++j) {
                wrz_t[p * 2 * hidden + j] = wr[j * hf + p];
                wrz_t[p * 2 * hidden + hidden + j] = wz[j * hf + p];
                wh_t[p * hidden + j] = wh[j * hf + p];
            }
        const double* x = node(x_all.id).val.data();
        const double* br = node(b_r.id).val.data();
        const double* bz = node(b_z.id).val.data();
        const double* bh = node(b_h.id).val.data();

        thread_local std::vector<double> cat_scratch;
        cat_scratch.resize(static_cast<std::size_t>(rows) * static_cast<std::size_t>(hf));
        double* cat = cat_scratch.data();

        for (std::int64_t t = 0; t < steps; ++t) {
            double* h_prev = n.aux.data() + static_cast<std::size_t>(t) * stride;
            double* rz = h_prev + rows * hidden;  // interleaved [r | z] rows
            double* c = rz + rows * 2 * hidden;
            const double* xt = x + t * rows * in_dim;
            if (t == 0) std::memset(h_prev, 0, static_cast<std::size_t>(rows * hidden) * sizeof(double));

            // cat = [h_prev | x]
            for (std::int64_t i = 0; i < rows; ++i) {
                std::memcpy(cat + i * hf, h_prev + i * hidden,
                            static_cast<std::size_t>(hidden) * sizeof(double));
                std::memcpy(cat + i * hf + hidden, xt + i * in_dim,
                            static_cast<std::size_t>(in_dim) * sizeof(double));
            }
            kernels::mm_nn(rz, cat, wrz_t, rows, hf, 2 * hidden, false);
            for (std::int64_t i = 0; i < rows; ++i) {
                double* row = rz + i * 2 * hidden;
                for (std::int64_t j = 0; j < hidden; ++j) {
                    row[j] += br[j];
                    row[hidden + j] += bz[j];
                }
            }
            fastmath::sigmoid_array(rz, rz, static_cast<std::size_t>(rows) * 2 *
                                                static_cast<std::size_t>(hidden));
            // cat <- [r*h_prev | x]
            for (std::int64_t i = 0; i < rows; ++i) {
                const double* hp = h_prev + i * hidden;
                const double* rrow = rz + i * 2 * hidden;
                double* dst = cat + i * hf;
                for (std::int64_t j = 0; j < hidden; ++j) dst[j] = rrow[j] * hp[j];
            }
            kernels::mm_nn(c, cat, wh_t, rows, hf, hidden, false);
            for (std::int64_t i = 0; i < rows; ++i) {
                double* crow = c + i * hidden;
                for (std::int64_t j = 0; j < hidden; ++j) crow[j] += bh[j];
            }
            fastmath::tanh_array(c, c, static_cast<std::size_t>(rows) *
                                           static_cast<std::size_t>(hidden));
            double* h_out = t + 1 < steps ? h_prev + static_cast<std::int64_t>(stride)
                                          : n.val.data();
            for (std::int64_t i = 0; i < rows; ++i) {
                const double* hp = h_prev + i * hidden;
                const double* zrow = rz + i * 2 * hidden + hidden;
                const double* crow = c + i * hidden;
                double* hrow = h_out + i * hidden;
                for (std::int64_t j = 0; j < hidden; ++j) {
                    const double delta = crow[j] - hp[j];
                    const double step = zrow[j] * delta;
                    hrow[j] = hp[j] + step;
                }
            }
        }
        return {this, id};
    }

    // One fused attention head over a batched pair list. `h` is [B*N x in];
    // `plan` packs [N+1 segment offsets | source node j per pair] for one
    // sample's pair list (pairs grouped by destination node i in order), and
    // `features` holds the per-pair edge feature rows. Per pair (i <- j):
    //   score = q_i . (k_j + e_ij) / sqrt(d), softmax over each i's pairs,
    //   out_i = sum alpha_ij (v_j + e_ij)
    //`edge_terms = false` drops e_ij from both sides. Saves q/k/v/e and the
    // attention weights for a hand-written backward pass.
    Var attention_head(Var h, Var w_q, Var w_k, Var w_v, Var b_q, Var b_k, Var b_v,
                       Var w_e, Var b_e, IndexPtr plan,
                       std::shared_ptr<const Tensor> features, std::int32_t batch,
                       bool edge_terms) {
        const Node& nh = node(h.id);
        const std::int64_t d = node(w_q.id).rows;
        const std::int64_t in = node(w_q.id).cols;
        const std::int64_t fe = node(w_e.id).cols;
        check(batch > 0, "attention: batch must be positive");
        if (nh.cols != in)
            fail("attention: input width " + std::to_string(nh.cols) +
                 " does not match the projections (" + std::to_string(in) + ")");
        check(nh.rows % batch == 0, "attention: rows not a multiple of the batch");
        const std::int64_t n_nodes = nh.rows / batch;
        const std::int64_t pairs =
            static_cast<std::int64_t>(plan->size()) - (n_nodes + 1);
        check(pairs > 0, "attention: empty pair list");
        check((*plan)[static_cast<std::size_t>(n_nodes)] == pairs,
              "attention: pair plan offsets are inconsistent");
        check(features->dim(0) == pairs && features->dim(1) == fe,
              "attention: edge feature shape mismatch");
        const std::int64_t rows = nh.rows;

        std::int32_t id = alloc(Op::AttentionHead, {rows, d}, rows, d);
        Node& n = node(id);
        n.cat_inputs = {h.id, w_q.id, w_k.id, w_v.id, b_q.id, b_k.id, b_v.id, w_e.id, b_e.id};
        bool ng = false;
        for (std::int32_t input : n.cat_inputs) ng = ng || node(input).needs_grad;
        n.needs_grad = ng;
        n.idx = std::move(plan);
        n.const_mat = std::move(features);
        n.segments = batch;
        n.scalar = edge_terms ? 1.0 : 0.0;

        // aux: Q | K | V [rows x d] each, E [pairs x d], alpha [batch*pairs]
        const std::size_t rd = static_cast<std::size_t>(rows) * static_cast<std::size_t>(d);
        const std::size_t pd = static_cast<std::size_t>(pairs) * static_cast<std::size_t>(d);
        const std::size_t bp = static_cast<std::size_t>(batch) * static_cast<std::size_t>(pairs);
        n.aux.resize(3 * rd + pd + bp);
        double* q = n.aux.data();
        double* k = q + rd;
        double* v = k + rd;
        double* e = v + rd;
        double* alpha = e + pd;

        thread_local std::vector<double> tsp;
        tsp.resize(static_cast<std::size_t>(in) * static_cast<std::size_t>(d) * 3 +
                   static_cast<std::size_t>(fe) * static_cast<std::size_t>(d));
        double* wq_t = tsp.data();
        double* wk_t = wq_t + in * d;
        double* wv_t = wk_t + in * d;
        double* we_t = wv_t + in * d;
        auto fill_t = [&](double* dst, const Node& w, std::int64_t wrows, std::int64_t wcols) {
            for (std::int64_t a = 0; a < wrows; ++a)
                for (std::int64_t b = 0; b < wcols; ++b)
                    dst[b * wrows + a] = w.val[static_cast<std::size_t>(a * wcols + b)];
        };
        fill_t(wq_t, node(w_q.id), d, in);
        fill_t(wk_t, node(w_k.id), d, in);
        fill_t(wv_t, node(w_v.id), d, in);
        fill_t(we_t, node(w_e.id), d, fe);

        const double* hv = node(h.id).val.data();
        kernels::mm_nn(q, hv, wq_t, rows, in, d, false);
        kernels::mm_nn(k, hv, wk_t, rows, in, d, false);
        kernels::mm_nn(v, hv, wv_t, rows, in, d, false);
        auto add_bias = [&](double* m, const Node& b, std::int64_t mrows) {
            const double* bv = b.val.data();
            for (std::int64_t i = 0; i < mrows; ++i)
                for (std::int64_t j = 0; j < d; ++j) m[i * d + j] += bv[j];
        };
        add_bias(q, node(b_q.id), rows);
        add_bias(k, node(b_k.id), rows);
        add_bias(v, node(b_v.id), rows);
        if (edge_terms) {
            kernels::mm_nn(e, n.const_mat->data(), we_t, pairs, fe, d, false);
            add_bias(e, node(b_e.id), pairs);
        } else {
            std::memset(e, 0, pd * sizeof(double));
        }

        const std::int32_t* off = n.idx->data();
        const std::int32_t* js = off + n_nodes + 1;
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
        // scores with per-destination max subtraction, then one exp sweep
        for (std::int64_t s = 0; s < batch; ++s)
            for (std::int64_t i = 0; i < n_nodes; ++i) {
                const double* qi = q + (s * n_nodes + i) * d;
                double peak = -1e300;
                for (std::int32_t p = off[i]; p < off[i + 1]; ++p) {
                    const double* kj = k + (s * n_nodes + js[p]) * d;
                    const double* ep = e + p * d;
                    double dot = 0.0;
                    for (std::int64_t t = 0; t < d; ++t) dot += qi[t] * (kj[t] + ep[t]);
                    dot *= inv_sqrt_d;
                    alpha[s * pairs + p] = dot;
                    peak = std::max(peak, dot);
                }
                for (std::int32_t p = off[i]; p < off[i + 1]; ++p)
                    alpha[s * pairs + p] -= peak;
            }
        fastmath::exp_array(alpha, alpha, bp);
        for (std::int64_t s = 0; s < batch; ++s)
            for (std::int64_t i = 0; i < n_nodes; ++i) {
                double denom = 0.0;
                for (std::int32_t p = off[i]; p < off[i + 1]; ++p) denom += alpha[s * pairs + p];
                const double inv = 1.0 / denom;
                double* out = n.val.data() + (s * n_nodes + i) * d;
                std::memset(out, 0, static_cast<std::size_t>(d) * sizeof(double));
                for (std::int32_t p = off[i]; p < off[i + 1]; ++p) {
                    const double a = alpha[s * pairs + p] * inv;
                    alpha[s * pairs + p] = a;
                    const double* vj = v + (s * n_nodes + js[p]) * d;
                    const double* ep = e + p * d;
                    for (std::int64_t t = 0; t < d; ++t) out[t] += a * (vj[t] + ep[t]);
                }
            }
        return {this, id};
    }

    // Attention weights of a fused head, [batch*pairs], normalized per
    // destination node. For inspection and tests.
    Tensor attention_alpha(Var head) const {
        const Node& n = node(head.id);
        check(n.op == Op::AttentionHead, "attention_alpha: not an attention node");
        const std::int64_t n_nodes = n.rows / n.segments;
        const std::int64_t pairs = static_cast<std::int64_t>(n.idx->size()) - (n_nodes + 1);
        const std::size_t bp = static_cast<std::size_t>(n.segments) * static_cast<std::size_t>(pairs);
        std::vector<double> a(n.aux.end() - static_cast<std::ptrdiff_t>(bp), n.aux.end());
        return Tensor({static_cast<std::int64_t>(bp), 1}, std::move(a));
    }

    // Left-multiplies each consecutive [n x c] block of `a` by the constant
    // matrix `m` [n x n]. Used for per-sample graph mixing of stacked batches.
    Var block_mat_const(Var a, std::shared_ptr<const Tensor> m) {
        const Node& na = node(a.id);
        const std::int64_t bn = m->dim(0);
        check(m->rank() == 2 && m->dim(1) == bn, "block_mat_const: matrix must be square");
        if (na.rows % bn != 0)
            fail("block_mat_const: rows " + std::to_string(na.rows) +
                 " not a multiple of block size " + std::to_string(bn));
        std::int32_t id = alloc(Op::BlockMatConst, na.shape, na.rows, na.cols);
        bind(id, a);
        Node& n = node(id);
        n.const_mat = std::move(m);
        const double* pa = node(a.id).val.data();
        const std::int64_t blocks = na.rows / bn;
        for (std::int64_t s = 0; s < blocks; ++s)
            kernels::mm_nn(n.val.data() + s * bn * na.cols, n.const_mat->data(),
                           pa + s * bn * na.cols, bn, bn, na.cols, false);
        return {this, id};
    }

private:
    // deque keeps node references stable while the tape grows
    std::deque<Node> nodes_;
    std::size_t size_ = 0;
    bool consumed_ = false;
    std::uint32_t pass_ = 0;

    std::int32_t alloc(Op op, Shape shape, std::int64_t rows, std::int64_t cols) {
        if (size_ == nodes_.size()) nodes_.emplace_back();
        Node& n = nodes_[size_];
        n.op = op;
        n.a = n.b = -1;
        n.rows = rows;
        n.cols = cols;
        n.shape = std::move(shape);
        n.val.resize(static_cast<std::size_t>(rows * cols));
        n.scalar = 0.0;
        n.segments = 0;
        n.idx.reset();
        n.const_mat.reset();
        n.needs_grad = false;
        return static_cast<std::int32_t>(size_++);
    }

    void bind(std::int32_t id, Var a) {
        check(a.tape == this, "op input lives on a different tape");
        Node& n = node(id);
        n.a = a.id;
        n.needs_grad = node(a.id).needs_grad;
    }

    void bind(std::int32_t id, Var a, Var b) {
        check(a.tape == this && b.tape == this, "op input lives on a different tape");
        Node& n = node(id);
        n.a = a.id;
        n.b = b.id;
        n.needs_grad = node(a.id).needs_grad || node(b.id).needs_grad;
    }

    Var unary(Op op, Var a) {
        const Node& na = node(a.id);
        std::int32_t id = alloc(op, na.shape, na.rows, na.cols);
        bind(id, a);
        return {this, id};
    }

    Var binary_same(Op op, Var a, Var b, const char* name) {
        const Node& na = node(a.id);
        const Node& nb = node(b.id);
        if (!(na.shape == nb.shape))
            fail(std::string(name) + ": shape mismatch " + shape_str(na.shape) + " vs " +
                 shape_str(nb.shape));
        std::int32_t id = alloc(op, na.shape, na.rows, na.cols);
        bind(id, a, b);
        Node& n = node(id);
        const double* pa = node(a.id).val.data();
        const double* pb = node(b.id).val.data();
        switch (op) {
            case Op::Add:
                for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = pa[i] + pb[i];
                break;
            case Op::Sub:
                for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = pa[i] - pb[i];
                break;
            case Op::Mul:
                for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = pa[i] * pb[i];
                break;
            case Op::Div:
                for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = pa[i] / pb[i];
                break;
            default:
                break;
        }
        return {this, id};
    }

    // Gradient accumulation buffer, zeroed on first touch per backward pass.
    double* grad_acc(std::int32_t id) {
        Node& n = node(id);
        if (n.grad_stamp != pass_) {
            n.grad.assign(n.val.size(), 0.0);
            n.grad_stamp = pass_;
        }
        return n.grad.data();
    }

    bool wants_grad(std::int32_t id) const { return id >= 0 && node(id).needs_grad; }

    void backward_node(std::int32_t id) {
        Node& n = node(id);
        if (!n.needs_grad || n.grad_stamp != pass_) return;
        const double* g = n.grad.data();
        const std::int64_t rows = n.rows, cols = n.cols;
        const std::size_t count = n.val.size();
        switch (n.op) {
            case Op::Leaf:
            case Op::SegmentMax:
            case Op::RowMax:
                break;
            case Op::MatMul: {
                const Node& na = node(n.a);
                const Node& nb = node(n.b);
                if (wants_grad(n.a))
                    kernels::mm_nt_acc(grad_acc(n.a), g, nb.val.data(), na.rows, nb.cols,
                                       na.cols);
                if (wants_grad(n.b))
                    kernels::mm_tn_acc(grad_acc(n.b), na.val.data(), g, na.rows, na.cols,
                                       nb.cols);
                break;
            }
            case Op::Transpose: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                for (std::int64_t i = 0; i < rows; ++i)
                    for (std::int64_t j = 0; j < cols; ++j)
                        da[j * rows + i] += g[i * cols + j];
                break;
            }
            case Op::Add: {
                if (wants_grad(n.a)) {
                    double* da = grad_acc(n.a);
                    for (std::size_t i = 0; i < count; ++i) da[i] += g[i];
                }
                if (wants_grad(n.b)) {
                    double* db = grad_acc(n.b);
                    for (std::size_t i = 0; i < count; ++i) db[i] += g[i];
                }
                break;
            }
            case Op::Sub: {
                if (wants_grad(n.a)) {
                    double* da = grad_acc(n.a);
                    for (std::size_t i = 0; i < count; ++i) da[i] += g[i];
                }
                if (wants_grad(n.b)) {
                    double* db = grad_acc(n.b);
                    for (std::size_t i = 0; i < count; ++i) db[i] -= g[i];
                }
                break;
            }
            case Op::Mul: {
                const Node& na = node(n.a);
                const Node& nb = node(n.b);
                if (wants_grad(n.a)) {
                    double* da = grad_acc(n.a);
                    const double* pb = nb.val.data();
                    for (std::size_t i = 0; i < count; ++i) da[i] += g[i] * pb[i];
                }
                if (wants_grad(n.b)) {
                    double* db = grad_acc(n.b);
                    const double* pa = na.val.data();
                    for (std::size_t i = 0; i < count; ++i) db[i] += g[i] * pa[i];
                }
                break;
            }
            case Op::Div: {
                const Node& na = node(n.a);
                const Node& nb = node(n.b);
                const double* pb = nb.val.data();
                if (wants_grad(n.a)) {
                    double* da = grad_acc(n.a);
                    for (std::size_t i = 0; i < count; ++i) da[i] += g[i] / pb[i];
                }
                if (wants_grad(n.b)) {
                    double* db = grad_acc(n.b);
                    const double* pc = n.val.data();
                    for (std::size_t i = 0; i < count; ++i) db[i] -= g[i] * pc[i] / pb[i];
                }
                break;
            }
            case Op::AddRow: {
                if (wants_grad(n.a)) {
                    double* da = grad_acc(n.a);
                    for (std::size_t i = 0; i < count; ++i) da[i] += g[i];
                }
                if (wants_grad(n.b)) {
                    double* db = grad_acc(n.b);
                    for (std::int64_t i = 0; i < rows; ++i)
                        for (std::int64_t j = 0; j < cols; ++j) db[j] += g[i * cols + j];
                }
                break;
            }
            case Op::SubCol: {
                if (wants_grad(n.a)) {
                    double* da = grad_acc(n.a);
                    for (std::size_t i = 0; i < count; ++i) da[i] += g[i];
                }
                if (wants_grad(n.b)) {
                    double* db = grad_acc(n.b);
                    for (std::int64_t i = 0; i < rows; ++i) {
                        double s = 0.0;
                        for (std::int64_t j = 0; j < cols; ++j) s += g[i * cols + j];
                        db[i] -= s;
                    }
                }
                break;
            }
            case Op::MulCol: {
                const Node& na = node(n.a);
                const Node& nb = node(n.b);
                if (wants_grad(n.a)) {
                    double* da = grad_acc(n.a);
                    const double* pb = nb.val.data();
                    for (std::int64_t i = 0; i < rows; ++i) {
                        const double c = pb[i];
                        for (std::int64_t j = 0; j < cols; ++j) da[i * cols + j] += g[i * cols + j] * c;
                    }
                }
                if (wants_grad(n.b)) {
                    double* db = grad_acc(n.b);
                    const double* pa = na.val.data();
                    for (std::int64_t i = 0; i < rows; ++i) {
                        double s = 0.0;
                        for (std::int64_t j = 0; j < cols; ++j) s += g[i * cols + j] * pa[i * cols + j];
                        db[i] += s;
                    }
                }
                break;
            }
            case Op::Scale: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                const double c = n.scalar;
                for (std::size_t i = 0; i < count; ++i) da[i] += c * g[i];
                break;
            }
            case Op::ConcatCols: {
                std::int64_t off = 0;
                for (std::int32_t pid : n.cat_inputs) {
                    const Node& p = node(pid);
                    if (node(pid).needs_grad) {
                        double* dp = grad_acc(pid);
                        for (std::int64_t i = 0; i < p.rows; ++i)
                            for (std::int64_t j = 0; j < p.cols; ++j)
                                dp[i * p.cols + j] += g[i * cols + off + j];
                    }
                    off += p.cols;
                }
                break;
            }
            case Op::ConcatRows: {
                std::int64_t off = 0;
                for (std::int32_t pid : n.cat_inputs) {
                    const Node& p = node(pid);
                    if (node(pid).needs_grad) {
                        double* dp = grad_acc(pid);
                        for (std::int64_t i = 0; i < p.rows * p.cols; ++i)
                            dp[i] += g[off * cols + i];
                    }
                    off += p.rows;
                }
                break;
            }
            case Op::Sigmoid: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                const double* y = n.val.data();
                for (std::size_t i = 0; i < count; ++i) da[i] += g[i] * y[i] * (1.0 - y[i]);
                break;
            }
            case Op::Tanh: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                const double* y = n.val.data();
                for (std::size_t i = 0; i < count; ++i) da[i] += g[i] * (1.0 - y[i] * y[i]);
                break;
            }
            case Op::Relu: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                const double* x = node(n.a).val.data();
                for (std::size_t i = 0; i < count; ++i)
                    if (x[i] > 0.0) da[i] += g[i];
                break;
            }
            case Op::Exp: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                const double* y = n.val.data();
                for (std::size_t i = 0; i < count; ++i) da[i] += g[i] * y[i];
                break;
            }
            case Op::Log: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                const double* x = node(n.a).val.data();
                for (std::size_t i = 0; i < count; ++i) da[i] += g[i] / x[i];
                break;
            }
            case Op::SumAll: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                const double gv = g[0];
                const std::size_t na_count = node(n.a).val.size();
                for (std::size_t i = 0; i < na_count; ++i) da[i] += gv;
                break;
            }
            case Op::MeanAll: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                const std::size_t na_count = node(n.a).val.size();
                const double gv = g[0] / static_cast<double>(na_count);
                for (std::size_t i = 0; i < na_count; ++i) da[i] += gv;
                break;
            }
            case Op::SumAxis0: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                const Node& na = node(n.a);
                for (std::int64_t i = 0; i < na.rows; ++i)
                    for (std::int64_t j = 0; j < na.cols; ++j) da[i * na.cols + j] += g[j];
                break;
            }
            case Op::SumAxis1: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                const Node& na = node(n.a);
                for (std::int64_t i = 0; i < na.rows; ++i) {
                    const double gv = g[i];
                    for (std::int64_t j = 0; j < na.cols; ++j) da[i * na.cols + j] += gv;
                }
                break;
            }
            case Op::Softmax1: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                const double* y = n.val.data();
                for (std::int64_t i = 0; i < rows; ++i) {
                    double dot = 0.0;
                    for (std::int64_t j = 0; j < cols; ++j) dot += g[i * cols + j] * y[i * cols + j];
                    for (std::int64_t j = 0; j < cols; ++j)
                        da[i * cols + j] += y[i * cols + j] * (g[i * cols + j] - dot);
                }
                break;
            }
            case Op::Softmax0: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                const double* y = n.val.data();
                for (std::int64_t j = 0; j < cols; ++j) {
                    double dot = 0.0;
                    for (std::int64_t i = 0; i < rows; ++i) dot += g[i * cols + j] * y[i * cols + j];
                    for (std::int64_t i = 0; i < rows; ++i)
                        da[i * cols + j] += y[i * cols + j] * (g[i * cols + j] - dot);
                }
                break;
            }
            case Op::Dropout: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                for (std::size_t i = 0; i < count; ++i) da[i] += g[i] * n.aux[i];
                break;
            }
            case Op::GatherRows: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                const IndexVec& idx = *n.idx;
                for (std::int64_t e = 0; e < rows; ++e) {
                    double* dst = da + idx[static_cast<std::size_t>(e)] * cols;
                    const double* src = g + e * cols;
                    for (std::int64_t j = 0; j < cols; ++j) dst[j] += src[j];
                }
                break;
            }
            case Op::SegmentSum: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                const Node& na = node(n.a);
                const IndexVec& seg = *n.idx;
                for (std::int64_t e = 0; e < na.rows; ++e) {
                    const double* src = g + seg[static_cast<std::size_t>(e)] * cols;
                    double* dst = da + e * cols;
                    for (std::int64_t j = 0; j < cols; ++j) dst[j] += src[j];
                }
                break;
            }
            case Op::TakePerRow: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                const Node& na = node(n.a);
                const IndexVec& idx = *n.idx;
                for (std::int64_t i = 0; i < rows; ++i)
                    da[i * na.cols + idx[static_cast<std::size_t>(i)]] += g[i];
                break;
            }
            case Op::GruEncode: {
                const std::int32_t x_id = n.cat_inputs[0];
                const std::int32_t wr_id = n.cat_inputs[1], wz_id = n.cat_inputs[2],
                                   wh_id = n.cat_inputs[3];
                const std::int32_t br_id = n.cat_inputs[4], bz_id = n.cat_inputs[5],
                                   bh_id = n.cat_inputs[6];
                const std::int64_t hidden = cols;
                const std::int64_t hf = node(wr_id).cols;
                const std::int64_t in_dim = hf - hidden;
                const std::int64_t steps = n.segments;
                const std::size_t stride = static_cast<std::size_t>(rows) *
                                           static_cast<std::size_t>(4 * hidden);
                const double* x = node(x_id).val.data();
                const double* wr = node(wr_id).val.data();
                const double* wz = node(wz_id).val.data();
                const double* wh = node(wh_id).val.data();
                double* dx = wants_grad(x_id) ? grad_acc(x_id) : nullptr;
                double* dwr = wants_grad(wr_id) ? grad_acc(wr_id) : nullptr;
                double* dwz = wants_grad(wz_id) ? grad_acc(wz_id) : nullptr;
                double* dwh = wants_grad(wh_id) ? grad_acc(wh_id) : nullptr;
                double* dbr = wants_grad(br_id) ? grad_acc(br_id) : nullptr;
                double* dbz = wants_grad(bz_id) ? grad_acc(bz_id) : nullptr;
                double* dbh = wants_grad(bh_id) ? grad_acc(bh_id) : nullptr;

                const std::size_t rh = static_cast<std::size_t>(rows) * static_cast<std::size_t>(hidden);
                const std::size_t rhf = static_cast<std::size_t>(rows) * static_cast<std::size_t>(hf);
                const std::size_t whf = static_cast<std::size_t>(hidden) * static_cast<std::size_t>(hf);
                thread_local std::vector<double> scratch;
                scratch.resize(rh /*dh*/ + rhf /*cat*/ + rhf /*dcat*/ + rhf /*dcat2*/ +
                               rh /*da_c*/ + 2 * rh /*da_rz*/ + 2 * whf /*wrz stack*/ +
                               2 * whf /*dwrz*/);
                double* dh = scratch.data();
                double* cat = dh + rh;
                double* dcat = cat + rhf;
                double* dcat2 = dcat + rhf;
                double* da_c = dcat2 + rhf;
                double* da_rz = da_c + rh;
                double* wrz_stack = da_rz + 2 * rh;  // [2H x hf] = [Wr; Wz]
                double* dwrz = wrz_stack + 2 * whf;  // accumulated across steps
                std::memcpy(wrz_stack, wr, whf * sizeof(double));
                std::memcpy(wrz_stack + whf, wz, whf * sizeof(double));
                std::memset(dwrz, 0, 2 * whf * sizeof(double));
                std::memcpy(dh, g, rh * sizeof(double));

                for (std::int64_t t = steps - 1; t >= 0; --t) {
                    const double* h_prev = n.aux.data() + static_cast<std::size_t>(t) * stride;
                    const double* rz = h_prev + rows * hidden;
                    const double* c = rz + rows * 2 * hidden;
                    const double* xt = x + t * rows * in_dim;
                    for (std::int64_t i = 0; i < rows; ++i) {
                        const double* hp = h_prev + i * hidden;
                        const double* zr = rz + i * 2 * hidden + hidden;
                        const double* cr = c + i * hidden;
                        double* dhr = dh + i * hidden;
                        double* dacr = da_c + i * hidden;
                        double* darz = da_rz + i * 2 * hidden;
                        for (std::int64_t j = 0; j < hidden; ++j) {
                            const double dz = dhr[j] * (cr[j] - hp[j]);
                            const double dc = dhr[j] * zr[j];
                            dacr[j] = dc * (1.0 - cr[j] * cr[j]);
                            darz[hidden + j] = dz * zr[j] * (1.0 - zr[j]);
                            dhr[j] *= 1.0 - zr[j];  // h_prev contribution, more added below
                        }
                    }
                    // rebuild cat2 = [r*h_prev | x] for the candidate weight grads
                    for (std::int64_t i = 0; i < rows; ++i) {
                        const double* hp = h_prev + i * hidden;
                        const double* rr = rz + i * 2 * hidden;
                        double* dst = cat + i * hf;
                        for (std::int64_t j = 0; j < hidden; ++j) dst[j] = rr[j] * hp[j];
                        std::memcpy(dst + hidden, xt + i * in_dim,
                                    static_cast<std::size_t>(in_dim) * sizeof(double));
                    }
                    if (dwh) kernels::mm_tn_acc(dwh, da_c, cat, rows, hidden, hf);
                    if (dbh)
                        for (std::int64_t i = 0; i < rows; ++i)
                            for (std::int64_t j = 0; j < hidden; ++j) dbh[j] += da_c[i * hidden + j];
                    kernels::mm_nn(dcat2, da_c, wh, rows, hidden, hf, false);
                    for (std::int64_t i = 0; i < rows; ++i) {
                        const double* hp = h_prev + i * hidden;
                        const double* rr = rz + i * 2 * hidden;
                        const double* drhr = dcat2 + i * hf;
                        double* dhr = dh + i * hidden;
                        double* darz = da_rz + i * 2 * hidden;
                        for (std::int64_t j = 0; j < hidden; ++j) {
                            const double drh = drhr[j];
                            dhr[j] += drh * rr[j];
                            const double dr = drh * hp[j];
                            darz[j] = dr * rr[j] * (1.0 - rr[j]);
                        }
                    }
                    // rebuild cat = [h_prev | x] for the gate weight grads
                    for (std::int64_t i = 0; i < rows; ++i)
                        std::memcpy(cat + i * hf, h_prev + i * hidden,
                                    static_cast<std::size_t>(hidden) * sizeof(double));
                    if (dwr || dwz)
                        kernels::mm_tn_acc(dwrz, da_rz, cat, rows, 2 * hidden, hf);
                    if (dbr || dbz)
                        for (std::int64_t i = 0; i < rows; ++i) {
                            const double* darz = da_rz + i * 2 * hidden;
                            for (std::int64_t j = 0; j < hidden; ++j) {
                                if (dbr) dbr[j] += darz[j];
                                if (dbz) dbz[j] += darz[hidden + j];
                            }
                        }
                    kernels::mm_nn(dcat, da_rz, wrz_stack, rows, 2 * hidden, hf, false);
                    for (std::int64_t i = 0; i < rows; ++i) {
                        const double* dcr = dcat + i * hf;
                        const double* dc2r = dcat2 + i * hf;
                        double* dhr = dh + i * hidden;
                        for (std::int64_t j = 0; j < hidden; ++j) dhr[j] += dcr[j];
                        if (dx) {
                            double* dxr = dx + (t * rows + i) * in_dim;
                            for (std::int64_t f = 0; f < in_dim; ++f)
                                dxr[f] += dcr[hidden + f] + dc2r[hidden + f];
                        }
                    }
                }
                if (dwr)
                    for (std::size_t i = 0; i < whf; ++i) dwr[i] += dwrz[i];
                if (dwz)
                    for (std::size_t i = 0; i < whf; ++i) dwz[i] += dwrz[whf + i];
                break;
            }
            case Op::AttentionHead: {
                const std::int32_t h_id = n.cat_inputs[0];
                const std::int32_t wq_id = n.cat_inputs[1], wk_id = n.cat_inputs[2],
                                   wv_id = n.cat_inputs[3];
                const std::int32_t bq_id = n.cat_inputs[4], bk_id = n.cat_inputs[5],
                                   bv_id = n.cat_inputs[6];
                const std::int32_t we_id = n.cat_inputs[7], be_id = n.cat_inputs[8];
                const std::int64_t d = cols;
                const std::int64_t in = node(wq_id).cols;
                const std::int64_t fe = node(we_id).cols;
                const std::int64_t batch = n.segments;
                const std::int64_t n_nodes = rows / batch;
                const std::int64_t pairs =
                    static_cast<std::int64_t>(n.idx->size()) - (n_nodes + 1);
                const bool edge_terms = n.scalar != 0.0;
                const std::size_t rd = static_cast<std::size_t>(rows) * static_cast<std::size_t>(d);
                const std::size_t pd = static_cast<std::size_t>(pairs) * static_cast<std::size_t>(d);
                const double* q = n.aux.data();
                const double* k = q + rd;
                const double* v = k + rd;
                const double* e = v + rd;
                const double* alpha = e + pd;
                const std::int32_t* off = n.idx->data();
                const std::int32_t* js = off + n_nodes + 1;
                const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

                thread_local std::vector<double> scratch;
                scratch.resize(3 * rd + pd);
                double* dq = scratch.data();
                double* dk = dq + rd;
                double* dv = dk + rd;
                double* de = dv + rd;
                std::memset(dq, 0, (3 * rd + pd) * sizeof(double));

                for (std::int64_t s = 0; s < batch; ++s)
                    for (std::int64_t i = 0; i < n_nodes; ++i) {
                        const std::int64_t row = s * n_nodes + i;
                        const double* go = g + row * d;
                        const double* qi = q + row * d;
                        // dalpha and its alpha-weighted mean over the segment
                        double mean = 0.0;
                        for (std::int32_t p = off[i]; p < off[i + 1]; ++p) {
                            const std::int64_t jr = s * n_nodes + js[p];
                            const double* vj = v + jr * d;
                            const double* ep = e + p * d;
                            double da = 0.0;
                            for (std::int64_t t = 0; t < d; ++t) da += go[t] * (vj[t] + ep[t]);
                            // stash dalpha in dq's row? no: reuse local loop below
                            mean += da * alpha[s * pairs + p];
                            // second pass needs da again; recompute below
                        }
                        for (std::int32_t p = off[i]; p < off[i + 1]; ++p) {
                            const std::int64_t jr = s * n_nodes + js[p];
                            const double* vj = v + jr * d;
                            const double* kj = k + jr * d;
                            const double* ep = e + p * d;
                            const double a = alpha[s * pairs + p];
                            double da = 0.0;
                            for (std::int64_t t = 0; t < d; ++t) da += go[t] * (vj[t] + ep[t]);
                            const double ds = a * (da - mean) * inv_sqrt_d;
                            double* dqi = dq + row * d;
                            double* dkj = dk + jr * d;
                            double* dvj = dv + jr * d;
                            for (std::int64_t t = 0; t < d; ++t) {
                                dqi[t] += ds * (kj[t] + ep[t]);
                                dkj[t] += ds * qi[t];
                                dvj[t] += a * go[t];
                            }
                            if (edge_terms) {
                                double* dep = de + p * d;
                                for (std::int64_t t = 0; t < d; ++t)
                                    dep[t] += ds * qi[t] + a * go[t];
                            }
                        }
                    }

                const double* hv = node(h_id).val.data();
                if (wants_grad(h_id)) {
                    double* dh = grad_acc(h_id);
                    kernels::mm_nn(dh, dq, node(wq_id).val.data(), rows, d, in, true);
                    kernels::mm_nn(dh, dk, node(wk_id).val.data(), rows, d, in, true);
                    kernels::mm_nn(dh, dv, node(wv_id).val.data(), rows, d, in, true);
                }
                if (wants_grad(wq_id))
                    kernels::mm_tn_acc(grad_acc(wq_id), dq, hv, rows, d, in);
                if (wants_grad(wk_id))
                    kernels::mm_tn_acc(grad_acc(wk_id), dk, hv, rows, d, in);
                if (wants_grad(wv_id))
                    kernels::mm_tn_acc(grad_acc(wv_id), dv, hv, rows, d, in);
                auto col_sums = [&](std::int32_t target, const double* m, std::int64_t mrows) {
                    if (!wants_grad(target)) return;
                    double* dst = grad_acc(target);
                    for (std::int64_t i = 0; i < mrows; ++i)
                        for (std::int64_t t = 0; t < d; ++t) dst[t] += m[i * d + t];
                };
                col_sums(bq_id, dq, rows);
                col_sums(bk_id, dk, rows);
                col_sums(bv_id, dv, rows);
                if (edge_terms) {
                    if (wants_grad(we_id))
                        kernels::mm_tn_acc(grad_acc(we_id), de, n.const_mat->data(), pairs, d,
                                           fe);
                    col_sums(be_id, de, pairs);
                }
                break;
            }
            case Op::BlockMatConst: {
                if (!wants_grad(n.a)) break;
                double* da = grad_acc(n.a);
                const std::int64_t bn = n.const_mat->dim(0);
                const std::int64_t blocks = rows / bn;
                // dA_block += M^T * g_block
                for (std::int64_t s = 0; s < blocks; ++s)
                    kernels::mm_tn_acc(da + s * bn * cols, n.const_mat->data(),
                                       g + s * bn * cols, bn, bn, cols);
                break;
            }
        }
    }
};

}  // namespace rgtn
