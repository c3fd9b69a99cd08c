#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle: copies alias the same storage. Operations are
// free functions taking the Tape that records their backward closures; with a
// non-recording tape no closures are stored and outputs never require grad.
// Only the trailing-axis broadcasts needed by the models are supported.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace plm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor filled(Shape shape, T value, bool requires_grad = false);
    static Tensor scalar(T value);

    bool defined() const { return storage_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;
    std::size_t rows() const;  // leading extent of a rank-2 tensor
    std::size_t cols() const;  // trailing extent of a rank-2 tensor

    std::span<T> values();
    std::span<const T> values() const;
    T* data();
    const T* data() const;
    T item() const;
    T at(std::size_t row, std::size_t col) const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    // Gradient buffer; empty unless requires_grad. Writable through a const
    // handle since copies share storage.
    std::span<T> grad() const;
    void zero_grad();

    // Deep copy of the values, detached from any graph.
    Tensor clone() const;
    bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }

private:
    struct Storage {
        Shape shape;
        std::vector<T> values;
        std::vector<T> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Storage> storage_;
};

// Ordered record of executed ops. backward() runs the recorded closures in
// exact reverse execution order; gradients accumulate additively.
template <class T>
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    std::size_t size() const { return entries_.size(); }
    const std::string& op_name(std::size_t i) const { return entries_.at(i).op; }

    void record(std::string op, std::function<void()> backward);

    // Seeds d(root)/d(root) = 1 for a scalar root and back-propagates.
    void backward(Tensor<T>& root);
    void clear() { entries_.clear(); }

private:
    struct Entry {
        std::string op;
        std::function<void()> backward;
    };
    std::vector<Entry> entries_;
    bool recording_;
};

// (begin, end) half-open row range.
using RowSpan = std::pair<std::size_t, std::size_t>;

// a[M,K] x b[K,N] -> [M,N]
template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

// Elementwise, identical shapes.
template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor);

// a[M,N] + bias[N] broadcast over rows.
template <class T>
Tensor<T> add_row(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& bias);

// tanh approximation of GELU.
template <class T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x);

// Normalises each row of x[M,N], then applies gain[N] and bias[N].
template <class T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5));

// Rows of table[V,D] selected by indices -> [n,D]. Also used as a row gather.
template <class T>
Tensor<T> embedding_lookup(Tape<T>& tape, const Tensor<T>& table, std::span<const std::int32_t> indices);

// Mean over rows of logits[N,V] of -log softmax(logits)[target]. Scalar result.
template <class T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::int32_t> targets);

// Row-wise softmax over the last axis, max-shifted.
template <class T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& s);

// Row-wise onehot(argmax(s)); ties go to the lowest index. Never requires grad.
template <class T>
Tensor<T> hard_select(const Tensor<T>& s);

// Forward: hard_select(s). Backward: the softmax Jacobian at s applied to the
// upstream gradient.
template <class T>
Tensor<T> straight_through(Tape<T>& tape, const Tensor<T>& s);

// Mean of x rows over each span -> [spans, D]. Spans must be non-empty.
template <class T>
Tensor<T> segment_mean(Tape<T>& tape, const Tensor<T>& x, std::span<const RowSpan> spans);

template <class T>
Tensor<T> concat_rows(Tape<T>& tape, std::span<const Tensor<T>> parts);

template <class T>
Tensor<T> slice_rows(Tape<T>& tape, const Tensor<T>& x, std::size_t begin, std::size_t end);

// Multi-head causal self-attention aggregate (attention weights times values,
// heads concatenated, no output projection). qkv is [N, 3D] holding the packed
// query, key and value projections of several sequences stacked row-wise;
// seq_lens partitions the N rows. Positions attend within their own sequence.
template <class T>
Tensor<T> causal_attention(Tape<T>& tape, const Tensor<T>& qkv, std::span<const std::size_t> seq_lens,
                           std::size_t heads);

// Index of the largest entry in each row; ties go to the lowest index.
template <class T>
std::vector<std::int32_t> row_argmax(const Tensor<T>& s);

// Per-row -log softmax(logits)[target], computed in double without a tape.
template <class T>
std::vector<double> row_nll(const Tensor<T>& logits, std::span<const std::int32_t> targets);

}  // namespace plm
