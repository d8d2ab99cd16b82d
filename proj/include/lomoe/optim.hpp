#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "lomoe/errors.hpp"
#include "lomoe/model.hpp"
#include "lomoe/tensor.hpp"

namespace lomoe {

// Decoupled weight decay Adam. Moment buffers exist only for parameters the
// optimizer has been given; frozen parameters must never be registered.
class AdamW {
public:
    struct Hyper {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 1e-6;
    };

    AdamW() = default;
    explicit AdamW(Hyper hp) : hp_(hp) {}

    Hyper& hyper() { return hp_; }
    const Hyper& hyper() const { return hp_; }
    void set_lr(double lr) { hp_.lr = lr; }
    std::size_t step_count() const { return step_; }

    void register_param(const std::string& name, Tensor tensor) {
        if (!tensor.requires_grad())
            throw ContractError("optimizer: parameter " + name + " does not require grad");
        if (state_.count(name)) throw StateError("optimizer: duplicate parameter " + name);
        State st;
        st.tensor = tensor;
        st.m.assign(tensor.numel(), 0.0f);
        st.v.assign(tensor.numel(), 0.0f);
        state_.emplace(name, std::move(st));
        order_.push_back(name);
    }

    void register_model_trainables(const SegModel& model) {
        model.for_each_param([&](const ParamRef& p) {
            if (!p.frozen && p.tensor.requires_grad()) register_param(p.name, p.tensor);
        });
    }

    bool has_param(const std::string& name) const { return state_.count(name) != 0; }
    std::size_t param_count() const { return state_.size(); }

    void zero_grad() {
        for (auto& [name, st] : state_) st.tensor.zero_grad();
    }

    // p <- p - lr * mhat / (sqrt(vhat) + eps) - lr * wd * p. Parameters with
    // no gradient this step still decay (their gradient is zero).
    void step() {
        ++step_;
        const double bc1 = 1.0 - std::pow(hp_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(hp_.beta2, static_cast<double>(step_));
        for (const std::string& name : order_) {
            State& st = state_.at(name);
            auto& data = st.tensor.mutable_data();
            const bool has_grad = st.tensor.has_grad();
            const std::vector<float>* grad = has_grad ? &st.tensor.grad() : nullptr;
            for (std::size_t i = 0; i < data.size(); ++i) {
                const double g = grad ? static_cast<double>((*grad)[i]) : 0.0;
                if (!std::isfinite(g))
                    throw NumericError("NaN gradient in parameter " + name + " at index " +
                                       std::to_string(i));
                const double m = hp_.beta1 * st.m[i] + (1.0 - hp_.beta1) * g;
                const double v = hp_.beta2 * st.v[i] + (1.0 - hp_.beta2) * g * g;
                st.m[i] = static_cast<float>(m);
                st.v[i] = static_cast<float>(v);
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                double p = data[i];
                p -= hp_.lr * (mhat / (std::sqrt(vhat) + hp_.eps));
                p -= hp_.lr * hp_.weight_decay * data[i];
                data[i] = static_cast<float>(p);
                if (!std::isfinite(data[i]))
                    throw NumericError("non-finite parameter after update: " + name);
            }
        }
    }

private:
    struct State {
        Tensor tensor;
        std::vector<float> m, v;
    };

    Hyper hp_{};
    std::size_t step_ = 0;
    std::map<std::string, State> state_;
    std::vector<std::string> order_;
};

// Cosine schedule with a linear warmup ramp. lr is a function of the epoch.
struct Schedule {
    double base_lr = 1e-3;
    double min_lr = 0.0;
    std::size_t warmup_epochs = 10;
    std::size_t total_epochs = 30;

    double lr_at(std::size_t epoch) const {
        if (epoch >= total_epochs)
            throw ContractError("lr_at: epoch " + std::to_string(epoch) + " outside schedule");
        if (epoch < warmup_epochs)
            return base_lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs);
        if (total_epochs <= warmup_epochs) return base_lr;
        const double t = static_cast<double>(epoch - warmup_epochs) /
                         static_cast<double>(total_epochs - warmup_epochs);
        return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(M_PI * t));
    }
};

} // namespace lomoe
