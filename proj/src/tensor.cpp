#include "plm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "plm/error.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace plm {

namespace {

#ifdef __GLIBC__
// Training allocates and frees many same-sized buffers per step. Keeping them
// on the heap instead of mmap'ing each large one avoids a page-fault storm.
[[maybe_unused]] const bool kAllocatorTuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
}();
#endif

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    }
    storage_ = std::make_shared<Storage>();
    storage_->shape = std::move(shape);
    storage_->values = std::move(values);
    set_requires_grad(requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::filled(Shape shape, T value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value) {
    return Tensor(Shape{1}, std::vector<T>{value});
}

template <class T>
const Shape& Tensor<T>::shape() const {
    if (!storage_) {
        throw UsageError("tensor: use of undefined tensor");
    }
    return storage_->shape;
}

template <class T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
    return shape().at(axis);
}

template <class T>
std::size_t Tensor<T>::numel() const {
    return shape_numel(shape());
}

template <class T>
std::size_t Tensor<T>::rows() const {
    const Shape& s = shape();
    if (s.size() != 2) {
        throw ShapeError("tensor: rows() needs rank 2, got " + shape_str(s));
    }
    return s[0];
}

template <class T>
std::size_t Tensor<T>::cols() const {
    const Shape& s = shape();
    if (s.size() != 2) {
        throw ShapeError("tensor: cols() needs rank 2, got " + shape_str(s));
    }
    return s[1];
}

template <class T>
std::span<T> Tensor<T>::values() {
    shape();
    return storage_->values;
}

template <class T>
std::span<const T> Tensor<T>::values() const {
    shape();
    return storage_->values;
}

template <class T>
T* Tensor<T>::data() {
    return values().data();
}

template <class T>
const T* Tensor<T>::data() const {
    return values().data();
}

template <class T>
T Tensor<T>::item() const {
    if (numel() != 1) {
        throw ShapeError("tensor: item() on " + shape_str(shape()));
    }
    return storage_->values[0];
}

template <class T>
T Tensor<T>::at(std::size_t row, std::size_t col) const {
    return values()[row * cols() + col];
}

template <class T>
bool Tensor<T>::requires_grad() const {
    return storage_ && storage_->requires_grad;
}

template <class T>
void Tensor<T>::set_requires_grad(bool on) {
    shape();
    storage_->requires_grad = on;
    if (on) {
        storage_->grad.assign(storage_->values.size(), T(0));
    } else {
        storage_->grad.clear();
        storage_->grad.shrink_to_fit();
    }
}

template <class T>
std::span<T> Tensor<T>::grad() const {
    shape();
    return storage_->grad;
}

template <class T>
void Tensor<T>::zero_grad() {
    if (requires_grad()) {
        std::fill(storage_->grad.begin(), storage_->grad.end(), T(0));
    }
}

template <class T>
Tensor<T> Tensor<T>::clone() const {
    return Tensor(shape(), storage_->values, false);
}

// ---------------------------------------------------------------------------
// Tape

template <class T>
void Tape<T>::record(std::string op, std::function<void()> backward) {
    if (recording_) {
        entries_.push_back(Entry{std::move(op), std::move(backward)});
    }
}

template <class T>
void Tape<T>::backward(Tensor<T>& root) {
    if (root.numel() != 1) {
        throw ShapeError("backward: root must be a scalar, got " + shape_str(root.shape()));
    }
    if (!root.requires_grad()) {
        entries_.clear();
        return;
    }
    root.grad()[0] = T(1);
    for (std::size_t i = entries_.size(); i-- > 0;) {
        entries_[i].backward();
    }
    entries_.clear();
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

// Register tile: R rows of C by J columns, accumulated over the full k range
// in increasing order. Every C entry therefore sees the same summation order
// whatever tile it falls in.
template <class T, std::size_t R, std::size_t J>
inline void gemm_tile(std::size_t N, std::size_t K, const T* __restrict A, const T* __restrict B, T* __restrict C,
                      std::size_t j0, std::size_t width) {
    T acc[R][J];
    for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t j = 0; j < J; ++j) {
            acc[r][j] = j < width ? C[r * N + j0 + j] : T(0);
        }
    }
    for (std::size_t k = 0; k < K; ++k) {
        const T* __restrict b = B + k * N + j0;
        T bk[J];
        for (std::size_t j = 0; j < J; ++j) {
            bk[j] = j < width ? b[j] : T(0);
        }
        for (std::size_t r = 0; r < R; ++r) {
            const T a = A[r * K + k];
            for (std::size_t j = 0; j < J; ++j) {
                acc[r][j] += a * bk[j];
            }
        }
    }
    for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t j = 0; j < width; ++j) {
            C[r * N + j0 + j] = acc[r][j];
        }
    }
}

// Full-width variant without bounds checks in the k loop.
template <class T, std::size_t R, std::size_t J>
inline void gemm_tile_full(std::size_t N, std::size_t K, const T* __restrict A, const T* __restrict B,
                           T* __restrict C, std::size_t j0) {
    T acc[R][J];
    for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t j = 0; j < J; ++j) {
            acc[r][j] = C[r * N + j0 + j];
        }
    }
    for (std::size_t k = 0; k < K; ++k) {
        const T* __restrict b = B + k * N + j0;
        for (std::size_t r = 0; r < R; ++r) {
            const T a = A[r * K + k];
            for (std::size_t j = 0; j < J; ++j) {
                acc[r][j] += a * b[j];
            }
        }
    }
    for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t j = 0; j < J; ++j) {
            C[r * N + j0 + j] = acc[r][j];
        }
    }
}

template <class T, std::size_t R>
inline void gemm_rows(std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
    constexpr std::size_t J = 64 / sizeof(T) * 2;  // two cache lines of C per row
    std::size_t j0 = 0;
    for (; j0 + J <= N; j0 += J) {
        gemm_tile_full<T, R, J>(N, K, A, B, C, j0);
    }
    if (j0 < N) {
        gemm_tile<T, R, J>(N, K, A, B, C, j0, N - j0);
    }
}

// C[M,N] (+)= A[M,K] * B[K,N].
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A, const T* __restrict B,
             T* __restrict C, bool accumulate) {
    if (!accumulate) {
        std::fill(C, C + M * N, T(0));
    }
    std::size_t i = 0;
    for (; i + 4 <= M; i += 4) {
        gemm_rows<T, 4>(N, K, A + i * K, B, C + i * N);
    }
    for (; i < M; ++i) {
        gemm_rows<T, 1>(N, K, A + i * K, B, C + i * N);
    }
}

template <class T>
std::vector<T> transpose(const T* src, std::size_t rows, std::size_t cols) {
    std::vector<T> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    return out;
}

template <class T>
bool any_grad(const Tape<T>& tape, std::initializer_list<const Tensor<T>*> inputs) {
    if (!tape.recording()) {
        return false;
    }
    for (const Tensor<T>* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

template <class T>
void require_rank2(const char* op, const Tensor<T>& t) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
    }
}

template <class T>
void require_same(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

template <class T>
void softmax_row(const T* in, T* out, std::size_t n) {
    T mx = in[0];
    for (std::size_t j = 1; j < n; ++j) {
        mx = std::max(mx, in[j]);
    }
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
        out[j] = std::exp(in[j] - mx);
        sum += out[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < n; ++j) {
        out[j] *= inv;
    }
}

// dx += y * (g - <g, y>) for one softmax row.
template <class T>
void softmax_row_backward(const T* y, const T* g, T* dx, std::size_t n) {
    T dot = 0;
    for (std::size_t j = 0; j < n; ++j) {
        dot += g[j] * y[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
        dx[j] += y[j] * (g[j] - dot);
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Ops

template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    require_rank2("matmul", a);
    require_rank2("matmul", b);
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t M = a.rows(), K = a.cols(), N = b.cols();
    const bool rg = any_grad(tape, {&a, &b});
    Tensor<T> out = Tensor<T>::zeros({M, N}, rg);
    gemm_nn(M, N, K, a.data(), b.data(), out.data(), false);
    if (rg) {
        tape.record("matmul", [a, b, out, M, N, K]() mutable {
            const T* g = out.grad().data();
            if (a.requires_grad()) {
                const std::vector<T> bt = transpose(b.data(), K, N);
                gemm_nn(M, K, N, g, bt.data(), a.grad().data(), true);
            }
            if (b.requires_grad()) {
                const std::vector<T> at = transpose(a.data(), M, K);
                gemm_nn(K, N, M, at.data(), g, b.grad().data(), true);
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    require_same("add", a, b);
    const bool rg = any_grad(tape, {&a, &b});
    Tensor<T> out = Tensor<T>::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    const T* x = a.data();
    const T* y = b.data();
    T* o = out.data();
    for (std::size_t i = 0; i < n; ++i) {
        o[i] = x[i] + y[i];
    }
    if (rg) {
        tape.record("add", [a, b, out, n]() mutable {
            const T* g = out.grad().data();
            for (const Tensor<T>* t : {&a, &b}) {
                if (t->requires_grad()) {
                    T* d = t->grad().data();
                    for (std::size_t i = 0; i < n; ++i) {
                        d[i] += g[i];
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    require_same("mul", a, b);
    const bool rg = any_grad(tape, {&a, &b});
    Tensor<T> out = Tensor<T>::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    {
        const T* x = a.data();
        const T* y = b.data();
        T* o = out.data();
        for (std::size_t i = 0; i < n; ++i) {
            o[i] = x[i] * y[i];
        }
    }
    if (rg) {
        tape.record("mul", [a, b, out, n]() mutable {
            const T* g = out.grad().data();
            if (a.requires_grad()) {
                T* d = a.grad().data();
                const T* y = b.data();
                for (std::size_t i = 0; i < n; ++i) {
                    d[i] += g[i] * y[i];
                }
            }
            if (b.requires_grad()) {
                T* d = b.grad().data();
                const T* x = a.data();
                for (std::size_t i = 0; i < n; ++i) {
                    d[i] += g[i] * x[i];
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor) {
    const bool rg = any_grad(tape, {&a});
    Tensor<T> out = Tensor<T>::zeros(a.shape(), rg);
    const std::size_t n = a.numel();
    {
        const T* x = a.data();
        T* o = out.data();
        for (std::size_t i = 0; i < n; ++i) {
            o[i] = x[i] * factor;
        }
    }
    if (rg) {
        tape.record("scale", [a, out, n, factor]() mutable {
            const T* g = out.grad().data();
            T* d = a.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                d[i] += g[i] * factor;
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> add_row(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& bias) {
    require_rank2("add_row", a);
    if (bias.rank() != 1 || bias.dim(0) != a.cols()) {
        throw ShapeError("add_row: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(bias.shape()));
    }
    const std::size_t M = a.rows(), N = a.cols();
    const bool rg = any_grad(tape, {&a, &bias});
    Tensor<T> out = Tensor<T>::zeros(a.shape(), rg);
    const T* b = bias.data();
    for (std::size_t i = 0; i < M; ++i) {
        const T* x = a.data() + i * N;
        T* o = out.data() + i * N;
        for (std::size_t j = 0; j < N; ++j) {
            o[j] = x[j] + b[j];
        }
    }
    if (rg) {
        tape.record("add_row", [a, bias, out, M, N]() mutable {
            const T* g = out.grad().data();
            if (a.requires_grad()) {
                T* d = a.grad().data();
                for (std::size_t i = 0; i < M * N; ++i) {
                    d[i] += g[i];
                }
            }
            if (bias.requires_grad()) {
                T* d = bias.grad().data();
                for (std::size_t i = 0; i < M; ++i) {
                    for (std::size_t j = 0; j < N; ++j) {
                        d[j] += g[i * N + j];
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T k = T(0.044715);
    const bool rg = any_grad(tape, {&x});
    Tensor<T> out = Tensor<T>::zeros(x.shape(), rg);
    const std::size_t n = x.numel();
    std::vector<T> th(n);
    {
        const T* xv = x.data();
        T* o = out.data();
        for (std::size_t i = 0; i < n; ++i) {
            const T v = xv[i];
            th[i] = std::tanh(c * (v + k * v * v * v));
            o[i] = T(0.5) * v * (T(1) + th[i]);
        }
    }
    if (rg) {
        tape.record("gelu", [x, out, n, th = std::move(th)]() mutable {
            const T* g = out.grad().data();
            const T* xv = x.data();
            T* d = x.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                const T v = xv[i];
                const T t = th[i];
                const T dv = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * k * v * v);
                d[i] += g[i] * dv;
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    require_rank2("layer_norm", x);
    const std::size_t M = x.rows(), N = x.cols();
    if (gain.shape() != Shape{N} || bias.shape() != Shape{N}) {
        throw ShapeError("layer_norm: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(gain.shape()) +
                         "/" + shape_str(bias.shape()));
    }
    const bool rg = any_grad(tape, {&x, &gain, &bias});
    Tensor<T> out = Tensor<T>::zeros(x.shape(), rg);
    std::vector<T> xhat(rg ? M * N : 0);
    std::vector<T> rstd(M);
    const T* gp = gain.data();
    const T* bp = bias.data();
    const T* xd = x.data();
    for (std::size_t i = 0; i < M; ++i) {
        const T* xi = xd + i * N;
        T mean = 0;
        for (std::size_t j = 0; j < N; ++j) {
            mean += xi[j];
        }
        mean /= T(N);
        T var = 0;
        for (std::size_t j = 0; j < N; ++j) {
            const T d = xi[j] - mean;
            var += d * d;
        }
        var /= T(N);
        rstd[i] = T(1) / std::sqrt(var + eps);
        T* o = out.data() + i * N;
        for (std::size_t j = 0; j < N; ++j) {
            const T h = (xi[j] - mean) * rstd[i];
            if (rg) {
                xhat[i * N + j] = h;
            }
            o[j] = h * gp[j] + bp[j];
        }
    }
    if (rg) {
        tape.record("layer_norm", [x, gain, bias, out, M, N, xhat = std::move(xhat), rstd = std::move(rstd)]() mutable {
            const T* g = out.grad().data();
            const T* gp = gain.data();
            std::vector<T> dxhat(N);
            for (std::size_t i = 0; i < M; ++i) {
                const T* gi = g + i * N;
                const T* hi = xhat.data() + i * N;
                if (gain.requires_grad()) {
                    T* dg = gain.grad().data();
                    for (std::size_t j = 0; j < N; ++j) {
                        dg[j] += gi[j] * hi[j];
                    }
                }
                if (bias.requires_grad()) {
                    T* db = bias.grad().data();
                    for (std::size_t j = 0; j < N; ++j) {
                        db[j] += gi[j];
                    }
                }
                if (x.requires_grad()) {
                    T mean_d = 0, mean_dh = 0;
                    for (std::size_t j = 0; j < N; ++j) {
                        dxhat[j] = gi[j] * gp[j];
                        mean_d += dxhat[j];
                        mean_dh += dxhat[j] * hi[j];
                    }
                    mean_d /= T(N);
                    mean_dh /= T(N);
                    T* dx = x.grad().data() + i * N;
                    for (std::size_t j = 0; j < N; ++j) {
                        dx[j] += rstd[i] * (dxhat[j] - mean_d - hi[j] * mean_dh);
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> embedding_lookup(Tape<T>& tape, const Tensor<T>& table, std::span<const std::int32_t> indices) {
    require_rank2("embedding_lookup", table);
    const std::size_t V = table.rows(), D = table.cols(), n = indices.size();
    for (std::int32_t idx : indices) {
        if (idx < 0 || static_cast<std::size_t>(idx) >= V) {
            throw ShapeError("embedding_lookup: index " + std::to_string(idx) + " out of range for table " +
                             shape_str(table.shape()));
        }
    }
    const bool rg = any_grad(tape, {&table});
    Tensor<T> out = Tensor<T>::zeros({n, D}, rg);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(table.data() + static_cast<std::size_t>(indices[i]) * D, D, out.data() + i * D);
    }
    if (rg) {
        std::vector<std::int32_t> idx(indices.begin(), indices.end());
        tape.record("embedding_lookup", [table, out, idx = std::move(idx), D]() mutable {
            const T* g = out.grad().data();
            T* d = table.grad().data();
            for (std::size_t i = 0; i < idx.size(); ++i) {
                T* row = d + static_cast<std::size_t>(idx[i]) * D;
                const T* gi = g + i * D;
                for (std::size_t j = 0; j < D; ++j) {
                    row[j] += gi[j];
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::int32_t> targets) {
    require_rank2("cross_entropy", logits);
    const std::size_t N = logits.rows(), V = logits.cols();
    if (targets.size() != N || N == 0) {
        throw ShapeError("cross_entropy: shape mismatch " + shape_str(logits.shape()) + " vs [" +
                         std::to_string(targets.size()) + "]");
    }
    for (std::int32_t t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= V) {
            throw ShapeError("cross_entropy: target " + std::to_string(t) + " out of range for " +
                             shape_str(logits.shape()));
        }
    }
    const bool rg = any_grad(tape, {&logits});
    std::vector<T> probs(rg ? N * V : 0);
    T total = 0;
    for (std::size_t i = 0; i < N; ++i) {
        const T* x = logits.data() + i * V;
        T mx = x[0];
        for (std::size_t j = 1; j < V; ++j) {
            mx = std::max(mx, x[j]);
        }
        T sum = 0;
        for (std::size_t j = 0; j < V; ++j) {
            const T e = std::exp(x[j] - mx);
            sum += e;
            if (rg) {
                probs[i * V + j] = e;
            }
        }
        if (rg) {
            for (std::size_t j = 0; j < V; ++j) {
                probs[i * V + j] /= sum;
            }
        }
        total += mx + std::log(sum) - x[targets[i]];
    }
    Tensor<T> out = Tensor<T>::zeros({1}, rg);
    out.data()[0] = total / T(N);
    if (rg) {
        std::vector<std::int32_t> tg(targets.begin(), targets.end());
        tape.record("cross_entropy", [logits, out, probs = std::move(probs), tg = std::move(tg), N, V]() mutable {
            const T g = out.grad()[0] / T(N);
            T* d = logits.grad().data();
            for (std::size_t i = 0; i < N; ++i) {
                for (std::size_t j = 0; j < V; ++j) {
                    d[i * V + j] += g * probs[i * V + j];
                }
                d[i * V + static_cast<std::size_t>(tg[i])] -= g;
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& s) {
    require_rank2("softmax", s);
    const std::size_t M = s.rows(), N = s.cols();
    const bool rg = any_grad(tape, {&s});
    Tensor<T> out = Tensor<T>::zeros(s.shape(), rg);
    for (std::size_t i = 0; i < M; ++i) {
        softmax_row(s.data() + i * N, out.data() + i * N, N);
    }
    if (rg) {
        tape.record("softmax", [s, out, M, N]() mutable {
            for (std::size_t i = 0; i < M; ++i) {
                softmax_row_backward(out.data() + i * N, out.grad().data() + i * N, s.grad().data() + i * N, N);
            }
        });
    }
    return out;
}

template <class T>
std::vector<std::int32_t> row_argmax(const Tensor<T>& s) {
    require_rank2("row_argmax", s);
    const std::size_t M = s.rows(), N = s.cols();
    std::vector<std::int32_t> out(M, 0);
    for (std::size_t i = 0; i < M; ++i) {
        const T* x = s.data() + i * N;
        std::size_t best = 0;
        for (std::size_t j = 1; j < N; ++j) {
            if (x[j] > x[best]) {
                best = j;
            }
        }
        out[i] = static_cast<std::int32_t>(best);
    }
    return out;
}

template <class T>
Tensor<T> hard_select(const Tensor<T>& s) {
    const std::vector<std::int32_t> idx = row_argmax(s);
    Tensor<T> out = Tensor<T>::zeros(s.shape());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        out.data()[i * s.cols() + static_cast<std::size_t>(idx[i])] = T(1);
    }
    return out;
}

template <class T>
Tensor<T> straight_through(Tape<T>& tape, const Tensor<T>& s) {
    Tensor<T> hard = hard_select(s);
    if (!any_grad(tape, {&s})) {
        return hard;
    }
    const std::size_t M = s.rows(), N = s.cols();
    Tensor<T> out(s.shape(), std::vector<T>(hard.values().begin(), hard.values().end()), true);
    std::vector<T> soft(M * N);
    for (std::size_t i = 0; i < M; ++i) {
        softmax_row(s.data() + i * N, soft.data() + i * N, N);
    }
    tape.record("straight_through", [s, out, soft = std::move(soft), M, N]() mutable {
        for (std::size_t i = 0; i < M; ++i) {
            softmax_row_backward(soft.data() + i * N, out.grad().data() + i * N, s.grad().data() + i * N, N);
        }
    });
    return out;
}

template <class T>
Tensor<T> segment_mean(Tape<T>& tape, const Tensor<T>& x, std::span<const RowSpan> spans) {
    require_rank2("segment_mean", x);
    const std::size_t R = x.rows(), D = x.cols(), S = spans.size();
    for (const RowSpan& sp : spans) {
        if (sp.first >= sp.second || sp.second > R) {
            throw ShapeError("segment_mean: span [" + std::to_string(sp.first) + "," + std::to_string(sp.second) +
                             ") invalid for " + shape_str(x.shape()));
        }
    }
    const bool rg = any_grad(tape, {&x});
    Tensor<T> out = Tensor<T>::zeros({S, D}, rg);
    for (std::size_t s = 0; s < S; ++s) {
        T* o = out.data() + s * D;
        for (std::size_t r = spans[s].first; r < spans[s].second; ++r) {
            const T* xr = x.data() + r * D;
            for (std::size_t j = 0; j < D; ++j) {
                o[j] += xr[j];
            }
        }
        const T inv = T(1) / T(spans[s].second - spans[s].first);
        for (std::size_t j = 0; j < D; ++j) {
            o[j] *= inv;
        }
    }
    if (rg) {
        std::vector<RowSpan> sp(spans.begin(), spans.end());
        tape.record("segment_mean", [x, out, sp = std::move(sp), D]() mutable {
            for (std::size_t s = 0; s < sp.size(); ++s) {
                const T inv = T(1) / T(sp[s].second - sp[s].first);
                const T* g = out.grad().data() + s * D;
                for (std::size_t r = sp[s].first; r < sp[s].second; ++r) {
                    T* d = x.grad().data() + r * D;
                    for (std::size_t j = 0; j < D; ++j) {
                        d[j] += g[j] * inv;
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> concat_rows(Tape<T>& tape, std::span<const Tensor<T>> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no inputs");
    }
    const std::size_t D = parts[0].cols();
    std::size_t R = 0;
    bool rg = false;
    for (const Tensor<T>& p : parts) {
        if (p.rank() != 2 || p.cols() != D) {
            throw ShapeError("concat_rows: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        }
        R += p.rows();
        rg = rg || (tape.recording() && p.requires_grad());
    }
    Tensor<T> out = Tensor<T>::zeros({R, D}, rg);
    std::size_t off = 0;
    for (const Tensor<T>& p : parts) {
        std::copy_n(p.data(), p.numel(), out.data() + off * D);
        off += p.rows();
    }
    if (rg) {
        std::vector<Tensor<T>> ps(parts.begin(), parts.end());
        tape.record("concat_rows", [ps = std::move(ps), out, D]() mutable {
            std::size_t off = 0;
            for (Tensor<T>& p : ps) {
                if (p.requires_grad()) {
                    const T* g = out.grad().data() + off * D;
                    T* d = p.grad().data();
                    for (std::size_t i = 0; i < p.numel(); ++i) {
                        d[i] += g[i];
                    }
                }
                off += p.rows();
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> slice_rows(Tape<T>& tape, const Tensor<T>& x, std::size_t begin, std::size_t end) {
    require_rank2("slice_rows", x);
    if (begin > end || end > x.rows()) {
        throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_str(x.shape()));
    }
    const std::size_t D = x.cols();
    const bool rg = any_grad(tape, {&x});
    Tensor<T> out = Tensor<T>::zeros({end - begin, D}, rg);
    std::copy_n(x.data() + begin * D, (end - begin) * D, out.data());
    if (rg) {
        tape.record("slice_rows", [x, out, begin, D]() mutable {
            const T* g = out.grad().data();
            T* d = x.grad().data() + begin * D;
            for (std::size_t i = 0; i < out.numel(); ++i) {
                d[i] += g[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> causal_attention(Tape<T>& tape, const Tensor<T>& qkv, std::span<const std::size_t> seq_lens,
                           std::size_t heads) {
    require_rank2("causal_attention", qkv);
    const std::size_t N = qkv.rows(), W = qkv.cols();
    std::size_t total = 0;
    for (std::size_t L : seq_lens) {
        total += L;
    }
    if (W % 3 != 0 || heads == 0 || (W / 3) % heads != 0 || total != N) {
        throw ShapeError("causal_attention: shape mismatch " + shape_str(qkv.shape()) + " vs " +
                         std::to_string(heads) + " heads over " + std::to_string(total) + " rows");
    }
    const std::size_t D = W / 3, dh = D / heads;
    const T inv_sqrt = T(1) / std::sqrt(T(dh));
    const bool rg = any_grad(tape, {&qkv});
    Tensor<T> out = Tensor<T>::zeros({N, D}, rg);

    // Attention probabilities per (sequence, head), lower triangle of LxL.
    std::vector<std::size_t> prob_offset;
    std::size_t prob_size = 0;
    for (std::size_t L : seq_lens) {
        prob_offset.push_back(prob_size);
        prob_size += heads * L * L;
    }
    std::vector<T> probs(prob_size);

    const T* x = qkv.data();
    std::size_t row0 = 0;
    for (std::size_t s = 0; s < seq_lens.size(); ++s) {
        const std::size_t L = seq_lens[s];
        for (std::size_t h = 0; h < heads; ++h) {
            T* P = probs.data() + prob_offset[s] + h * L * L;
            for (std::size_t i = 0; i < L; ++i) {
                const T* q = x + (row0 + i) * W + h * dh;
                T* p = P + i * L;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j <= i; ++j) {
                    const T* k = x + (row0 + j) * W + D + h * dh;
                    T dot = 0;
                    for (std::size_t e = 0; e < dh; ++e) {
                        dot += q[e] * k[e];
                    }
                    p[j] = dot * inv_sqrt;
                    mx = std::max(mx, p[j]);
                }
                T sum = 0;
                for (std::size_t j = 0; j <= i; ++j) {
                    p[j] = std::exp(p[j] - mx);
                    sum += p[j];
                }
                const T inv = T(1) / sum;
                T* o = out.data() + (row0 + i) * D + h * dh;
                for (std::size_t j = 0; j <= i; ++j) {
                    p[j] *= inv;
                    const T* v = x + (row0 + j) * W + 2 * D + h * dh;
                    for (std::size_t e = 0; e < dh; ++e) {
                        o[e] += p[j] * v[e];
                    }
                }
            }
        }
        row0 += L;
    }

    if (rg) {
        std::vector<std::size_t> lens(seq_lens.begin(), seq_lens.end());
        tape.record("causal_attention", [qkv, out, lens = std::move(lens), prob_offset = std::move(prob_offset),
                                         probs = std::move(probs), heads, D, dh, W, inv_sqrt]() mutable {
            const T* x = qkv.data();
            T* dx = qkv.grad().data();
            const T* g = out.grad().data();
            std::vector<T> dp;
            std::size_t row0 = 0;
            for (std::size_t s = 0; s < lens.size(); ++s) {
                const std::size_t L = lens[s];
                dp.resize(L);
                for (std::size_t h = 0; h < heads; ++h) {
                    const T* P = probs.data() + prob_offset[s] + h * L * L;
                    for (std::size_t i = 0; i < L; ++i) {
                        const T* gi = g + (row0 + i) * D + h * dh;
                        const T* p = P + i * L;
                        T weighted = 0;
                        for (std::size_t j = 0; j <= i; ++j) {
                            const T* v = x + (row0 + j) * W + 2 * D + h * dh;
                            T* dv = dx + (row0 + j) * W + 2 * D + h * dh;
                            T dot = 0;
                            for (std::size_t e = 0; e < dh; ++e) {
                                dot += gi[e] * v[e];
                                dv[e] += p[j] * gi[e];
                            }
                            dp[j] = dot;
                            weighted += p[j] * dot;
                        }
                        const T* q = x + (row0 + i) * W + h * dh;
                        T* dq = dx + (row0 + i) * W + h * dh;
                        for (std::size_t j = 0; j <= i; ++j) {
                            const T ds = p[j] * (dp[j] - weighted) * inv_sqrt;
                            const T* k = x + (row0 + j) * W + D + h * dh;
                            T* dk = dx + (row0 + j) * W + D + h * dh;
                            for (std::size_t e = 0; e < dh; ++e) {
                                dq[e] += ds * k[e];
                                dk[e] += ds * q[e];
                            }
                        }
                    }
                }
                row0 += L;
            }
        });
    }
    return out;
}

template <class T>
std::vector<double> row_nll(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
    require_rank2("row_nll", logits);
    const std::size_t N = logits.rows(), V = logits.cols();
    if (targets.size() != N) {
        throw ShapeError("row_nll: shape mismatch " + shape_str(logits.shape()) + " vs [" +
                         std::to_string(targets.size()) + "]");
    }
    std::vector<double> out(N);
    for (std::size_t i = 0; i < N; ++i) {
        const T* x = logits.data() + i * V;
        double mx = x[0];
        for (std::size_t j = 1; j < V; ++j) {
            mx = std::max(mx, static_cast<double>(x[j]));
        }
        double sum = 0;
        for (std::size_t j = 0; j < V; ++j) {
            sum += std::exp(static_cast<double>(x[j]) - mx);
        }
        const std::int32_t t = targets[i];
        if (t < 0 || static_cast<std::size_t>(t) >= V) {
            throw ShapeError("row_nll: target out of range");
        }
        out[i] = mx + std::log(sum) - static_cast<double>(x[t]);
    }
    return out;
}

#define PLM_INSTANTIATE(T)                                                                                        \
    template class Tensor<T>;                                                                                     \
    template class Tape<T>;                                                                                       \
    template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                      \
    template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                         \
    template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                         \
    template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                                      \
    template Tensor<T> add_row(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> gelu(Tape<T>&, const Tensor<T>&);                                                          \
    template Tensor<T> layer_norm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);             \
    template Tensor<T> embedding_lookup(Tape<T>&, const Tensor<T>&, std::span<const std::int32_t>);               \
    template Tensor<T> cross_entropy(Tape<T>&, const Tensor<T>&, std::span<const std::int32_t>);                  \
    template Tensor<T> softmax(Tape<T>&, const Tensor<T>&);                                                       \
    template Tensor<T> hard_select(const Tensor<T>&);                                                             \
    template Tensor<T> straight_through(Tape<T>&, const Tensor<T>&);                                              \
    template Tensor<T> segment_mean(Tape<T>&, const Tensor<T>&, std::span<const RowSpan>);                        \
    template Tensor<T> concat_rows(Tape<T>&, std::span<const Tensor<T>>);                                         \
    template Tensor<T> slice_rows(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t);                          \
    template Tensor<T> causal_attention(Tape<T>&, const Tensor<T>&, std::span<const std::size_t>, std::size_t);  \
    template std::vector<std::int32_t> row_argmax(const Tensor<T>&);                                              \
    template std::vector<double> row_nll(const Tensor<T>&, std::span<const std::int32_t>);

PLM_INSTANTIATE(float)
PLM_INSTANTIATE(double)

}  // namespace plm
