#pragma once

// Transformer building blocks shared by the planner and the language model.

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "plm/rng.hpp"
#include "plm/tensor.hpp"

namespace plm {

template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
std::vector<Tensor<T>> tensors_of(const NamedParams<T>& named) {
    std::vector<Tensor<T>> out;
    for (const auto& [name, t] : named) {
        out.push_back(t);
    }
    return out;
}

// Gaussian init; every parameter is created with requires_grad.
template <class T>
Tensor<T> normal_param(Shape shape, double stddev, Rng& rng);

template <class T>
struct Linear {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]; undefined for bias-free maps

    Linear() = default;
    Linear(std::size_t in, std::size_t out, bool with_bias, double stddev, Rng& rng);

    Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const;
    void collect(const std::string& prefix, NamedParams<T>& out) const;
};

template <class T>
struct LayerNorm {
    Tensor<T> gain;
    Tensor<T> bias;

    LayerNorm() = default;
    explicit LayerNorm(std::size_t dim);

    Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const;
    void collect(const std::string& prefix, NamedParams<T>& out) const;
};

// Pre-LN decoder block: x + proj(attn(ln1 x) [+ inject]), then x + mlp(ln2 x).
template <class T>
struct TransformerBlock {
    LayerNorm<T> ln1;
    Linear<T> qkv;
    Linear<T> proj;
    LayerNorm<T> ln2;
    Linear<T> fc;
    Linear<T> out;
    std::size_t heads = 1;

    TransformerBlock() = default;
    TransformerBlock(std::size_t dim, std::size_t heads, std::size_t ff, std::size_t depth, Rng& rng);

    // x is [N, D] holding stacked sequences of seq_lens. When inject is given
    // ([N, D]) it is added to the attention aggregate before the output
    // projection; the sum is written to *merged if requested.
    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, std::span<const std::size_t> seq_lens,
                      const Tensor<T>* inject = nullptr, Tensor<T>* merged = nullptr) const;
    void collect(const std::string& prefix, NamedParams<T>& out) const;
};

}  // namespace plm
