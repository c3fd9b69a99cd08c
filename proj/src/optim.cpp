#include "plm/optim.hpp"

#include <cmath>

#include "plm/error.hpp"

namespace plm {

std::size_t Adam::add_group(std::string name, std::vector<Tensor<float>> params) {
    Group g;
    g.name = std::move(name);
    for (const Tensor<float>& p : params) {
        g.m.emplace_back(p.numel(), 0.0f);
        g.v.emplace_back(p.numel(), 0.0f);
    }
    g.params = std::move(params);
    groups_.push_back(std::move(g));
    return groups_.size() - 1;
}

std::size_t Adam::group_index(const std::string& name) const {
    for (std::size_t i = 0; i < groups_.size(); ++i) {
        if (groups_[i].name == name) {
            return i;
        }
    }
    throw UsageError("optimizer has no parameter group '" + name + "'");
}

void Adam::step(std::size_t i, double lr) {
    Group& g = groups_.at(i);
    ++g.step;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(g.step));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(g.step));
    const float b1 = static_cast<float>(config_.beta1), b2 = static_cast<float>(config_.beta2);
    const float step_size = static_cast<float>(lr / c1);
    const float inv_c2 = static_cast<float>(1.0 / c2);
    const float eps = static_cast<float>(config_.eps);
    for (std::size_t p = 0; p < g.params.size(); ++p) {
        Tensor<float>& param = g.params[p];
        if (!param.requires_grad()) {
            continue;
        }
        float* w = param.data();
        const float* grad = param.grad().data();
        float* m = g.m[p].data();
        float* v = g.v[p].data();
        const std::size_t n = param.numel();
        for (std::size_t k = 0; k < n; ++k) {
            m[k] = b1 * m[k] + (1.0f - b1) * grad[k];
            v[k] = b2 * v[k] + (1.0f - b2) * grad[k] * grad[k];
            w[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_c2) + eps);
        }
    }
}

void Adam::zero_grad() {
    for (Group& g : groups_) {
        for (Tensor<float>& p : g.params) {
            p.zero_grad();
        }
    }
}

void check_finite(double value, const std::string& what, std::uint64_t step) {
    if (!std::isfinite(value)) {
        throw NumericError(what + " diverged at step " + std::to_string(step) + " (loss " + std::to_string(value) +
                           ")");
    }
}

}  // namespace plm
