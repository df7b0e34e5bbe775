#include "gtgm/optim.hpp"

#include "gtgm/error.hpp"

#include <cmath>

namespace gtgm::optim {

void AdamWConfig::validate() const {
    require(lr > 0.0 && std::isfinite(lr), ErrorKind::config, "learning rate must be positive");
    require(weight_decay >= 0.0, ErrorKind::config, "weight decay must be non-negative");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorKind::config, "betas must lie in [0,1)");
    require(eps > 0.0, ErrorKind::config, "epsilon must be positive");
}

nlohmann::json AdamWConfig::to_json() const {
    return {{"lr", lr}, {"weight_decay", weight_decay}, {"beta1", beta1}, {"beta2", beta2}, {"eps", eps}};
}

AdamWConfig AdamWConfig::from_json(const nlohmann::json& j) {
    AdamWConfig c;
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.validate();
    return c;
}

AdamW::AdamW(AdamWConfig cfg, const ParamRefs& params) : cfg_(cfg) {
    cfg_.validate();
    for (const auto* p : params) {
        ParamBlock m("adamw.m." + p->name, p->shape);
        ParamBlock v("adamw.v." + p->name, p->shape);
        m.grad.clear();
        v.grad.clear();
        m_.push_back(std::move(m));
        v_.push_back(std::move(v));
    }
}

void AdamW::check_alignment(const ParamRefs& params) const {
    require(params.size() == m_.size(), ErrorKind::dimension,
            "optimizer tracks " + std::to_string(m_.size()) + " blocks, got " + std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        require(m_[i].name == "adamw.m." + params[i]->name && m_[i].shape == params[i]->shape, ErrorKind::dimension,
                "optimizer state does not match parameter '" + params[i]->name + "'");
    }
}

void AdamW::step(const ParamRefs& params) {
    check_alignment(params);
    for (const auto* p : params)
        for (double g : p->grad)
            require(std::isfinite(g), ErrorKind::numeric, "non-finite gradient in parameter '" + p->name + "'");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
    for (std::size_t b = 0; b < params.size(); ++b) {
        auto& p = *params[b];
        auto& m = m_[b].value;
        auto& v = v_[b].value;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            p.value[i] = p.value[i] * decay - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

void AdamW::save(Checkpoint& c) const {
    for (const auto& m : m_) c.blocks.push_back(m);
    for (const auto& v : v_) c.blocks.push_back(v);
    c.metadata["adamw_step"] = t_;
    c.metadata["adamw"] = cfg_.to_json();
}

void AdamW::load(const Checkpoint& c) {
    for (auto& m : m_) {
        const auto& b = c.at(m.name);
        require(b.shape == m.shape, ErrorKind::dimension, "optimizer block '" + m.name + "' has a different shape");
        m.value = b.value;
    }
    for (auto& v : v_) {
        const auto& b = c.at(v.name);
        require(b.shape == v.shape, ErrorKind::dimension, "optimizer block '" + v.name + "' has a different shape");
        v.value = b.value;
    }
    t_ = c.metadata.at("adamw_step").get<std::uint64_t>();
}

} // namespace gtgm::optim
