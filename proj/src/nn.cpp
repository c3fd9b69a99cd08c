#include "plm/nn.hpp"

#include <cmath>

#include "plm/error.hpp"

namespace plm {

template <class T>
Tensor<T> normal_param(Shape shape, double stddev, Rng& rng) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
    if (stddev > 0) {
        for (T& v : t.values()) {
            v = static_cast<T>(rng.normal() * stddev);
        }
    }
    return t;
}

template <class T>
Linear<T>::Linear(std::size_t in, std::size_t out, bool with_bias, double stddev, Rng& rng)
    : weight(normal_param<T>({in, out}, stddev, rng)) {
    if (with_bias) {
        bias = Tensor<T>::zeros({out}, true);
    }
}

template <class T>
Tensor<T> Linear<T>::operator()(Tape<T>& tape, const Tensor<T>& x) const {
    Tensor<T> y = matmul(tape, x, weight);
    return bias.defined() ? add_row(tape, y, bias) : y;
}

template <class T>
void Linear<T>::collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    if (bias.defined()) {
        out.emplace_back(prefix + ".bias", bias);
    }
}

template <class T>
LayerNorm<T>::LayerNorm(std::size_t dim)
    : gain(Tensor<T>::filled({dim}, T(1), true)), bias(Tensor<T>::zeros({dim}, true)) {}

template <class T>
Tensor<T> LayerNorm<T>::operator()(Tape<T>& tape, const Tensor<T>& x) const {
    return layer_norm(tape, x, gain, bias);
}

template <class T>
void LayerNorm<T>::collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".gain", gain);
    out.emplace_back(prefix + ".bias", bias);
}

template <class T>
TransformerBlock<T>::TransformerBlock(std::size_t dim, std::size_t heads_, std::size_t ff, std::size_t depth,
                                      Rng& rng)
    : ln1(dim), ln2(dim), heads(heads_) {
    if (heads == 0 || dim % heads != 0) {
        throw ConfigError("model width " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) +
                          " heads");
    }
    const double std_in = 0.02;
    const double std_res = 0.02 / std::sqrt(2.0 * static_cast<double>(depth));
    qkv = Linear<T>(dim, 3 * dim, true, std_in, rng);
    proj = Linear<T>(dim, dim, true, std_res, rng);
    fc = Linear<T>(dim, ff, true, std_in, rng);
    out = Linear<T>(ff, dim, true, std_res, rng);
}

template <class T>
Tensor<T> TransformerBlock<T>::forward(Tape<T>& tape, const Tensor<T>& x, std::span<const std::size_t> seq_lens,
                                       const Tensor<T>* inject, Tensor<T>* merged) const {
    Tensor<T> agg = causal_attention(tape, qkv(tape, ln1(tape, x)), seq_lens, heads);
    if (inject != nullptr) {
        agg = add(tape, agg, *inject);
    }
    if (merged != nullptr) {
        *merged = agg;
    }
    Tensor<T> h = add(tape, x, proj(tape, agg));
    return add(tape, h, out(tape, gelu(tape, fc(tape, ln2(tape, h)))));
}

template <class T>
void TransformerBlock<T>::collect(const std::string& prefix, NamedParams<T>& out_params) const {
    ln1.collect(prefix + ".ln1", out_params);
    qkv.collect(prefix + ".attn.qkv", out_params);
    proj.collect(prefix + ".attn.proj", out_params);
    ln2.collect(prefix + ".ln2", out_params);
    fc.collect(prefix + ".mlp.fc", out_params);
    out.collect(prefix + ".mlp.out", out_params);
}

template Tensor<float> normal_param<float>(Shape, double, Rng&);
template Tensor<double> normal_param<double>(Shape, double, Rng&);
template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct TransformerBlock<float>;
template struct TransformerBlock<double>;

}  // namespace plm
