#pragma once

// AdamW with decoupled weight decay and bias-corrected moments.

#include "gtgm/params.hpp"

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace gtgm::optim {

struct AdamWConfig {
    double lr = 1e-3;
    double weight_decay = 5e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const;
    nlohmann::json to_json() const;
    static AdamWConfig from_json(const nlohmann::json& j);
};

class AdamW {
public:
    AdamW(AdamWConfig cfg, const ParamRefs& params);

    // p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps). Throws a numeric
    // error naming the parameter if any gradient is non-finite, before touching state.
    void step(const ParamRefs& params);

    std::uint64_t step_count() const noexcept { return t_; }
    const AdamWConfig& config() const noexcept { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }

    const std::vector<ParamBlock>& first_moments() const noexcept { return m_; }
    const std::vector<ParamBlock>& second_moments() const noexcept { return v_; }

    // Blocks "adamw.m.<name>" / "adamw.v.<name>" plus metadata key "adamw_step".
    void save(Checkpoint& c) const;
    void load(const Checkpoint& c);

private:
    void check_alignment(const ParamRefs& params) const;

    AdamWConfig cfg_;
    std::vector<ParamBlock> m_;
    std::vector<ParamBlock> v_;
    std::uint64_t t_ = 0;
};

} // namespace gtgm::optim
