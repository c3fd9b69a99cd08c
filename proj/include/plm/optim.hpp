#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "plm/tensor.hpp"

namespace plm {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with independent parameter groups. Each group keeps its own step count
// so a group that is skipped (e.g. a frozen planner) keeps its moments and
// bias correction untouched.
class Adam {
public:
    struct Group {
        std::string name;
        std::vector<Tensor<float>> params;
        std::vector<std::vector<float>> m;
        std::vector<std::vector<float>> v;
        std::uint64_t step = 0;
    };

    explicit Adam(AdamConfig config = {}) : config_(config) {}

    std::size_t add_group(std::string name, std::vector<Tensor<float>> params);
    std::size_t group_index(const std::string& name) const;
    Group& group(std::size_t i) { return groups_.at(i); }
    const Group& group(std::size_t i) const { return groups_.at(i); }
    std::size_t group_count() const { return groups_.size(); }

    // Applies one update to every parameter of group i from its gradient.
    void step(std::size_t i, double lr);
    void zero_grad();

    const AdamConfig& config() const { return config_; }

private:
    AdamConfig config_;
    std::vector<Group> groups_;
};

// Throws NumericError naming the stage and step if value is not finite.
void check_finite(double value, const std::string& what, std::uint64_t step);

}  // namespace plm
