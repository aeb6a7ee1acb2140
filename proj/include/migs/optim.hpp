#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "migs/autograd.hpp"
#include "migs/errors.hpp"
#include "migs/tensor.hpp"

namespace migs {

// Inner-loop optimizer: Adam with standard constants, or plain gradient
// descent for analytically checkable toy runs. Moment buffers are keyed by
// parameter position, so one instance must always see the same group.
template <typename S>
class InnerOptimizer {
 public:
  InnerOptimizer(std::string kind, double lr) : kind_(std::move(kind)), lr_(lr) {
    if (kind_ != "adam" && kind_ != "sgd")
      throw ConfigError("unknown optimizer '" + kind_ + "'");
    if (!(lr_ > 0)) throw ConfigError("learning rate must be positive");
  }

  const std::string& kind() const { return kind_; }
  double lr() const { return lr_; }
  std::int64_t steps_taken() const { return t_; }

  void reset() {
    m_.clear();
    v_.clear();
    t_ = 0;
  }

  // Applies one update to `params` from the gradients `tape` holds for the
  // aligned `vars`. Vars without gradients (never touched by backward)
  // contribute a zero gradient.
  void step(Tape<S>& tape, const std::vector<Tensor<S>*>& params,
            const std::vector<Var>& vars) {
    if (params.size() != vars.size())
      throw ContractError("optimizer: params and vars misaligned");
    if (m_.empty() && kind_ == "adam") {
      m_.reserve(params.size());
      v_.reserve(params.size());
      for (const Tensor<S>* p : params) {
        m_.push_back(Tensor<S>(p->shape(), S(0)));
        v_.push_back(Tensor<S>(p->shape(), S(0)));
      }
    }
    if (kind_ == "adam" && m_.size() != params.size())
      throw ContractError("optimizer: group size changed between steps");
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<S>& p = *params[i];
      const Tensor<S>& g = tape.grad(vars[i]);
      if (!p.same_shape(g))
        throw ContractError("optimizer: gradient shape mismatch");
      if (kind_ == "sgd") {
        for (std::int64_t j = 0; j < p.numel(); ++j)
          p[j] = static_cast<S>(static_cast<double>(p[j]) -
                                lr_ * static_cast<double>(g[j]));
        continue;
      }
      Tensor<S>& m = m_[i];
      Tensor<S>& v = v_[i];
      for (std::int64_t j = 0; j < p.numel(); ++j) {
        const double gj = static_cast<double>(g[j]);
        const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
        const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
        m[j] = static_cast<S>(mj);
        v[j] = static_cast<S>(vj);
        p[j] = static_cast<S>(static_cast<double>(p[j]) -
                              lr_ * (mj / bc1) /
                                  (std::sqrt(vj / bc2) + eps));
      }
    }
  }

 private:
  std::string kind_;
  double lr_;
  std::vector<Tensor<S>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace migs
