#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "hybridst/error.hpp"
#include "hybridst/tensor.hpp"

namespace hybridst::diff {

struct AdamState {
  Tensor m;
  Tensor v;
  std::uint64_t step = 0;
};

/// Named parameter tensors with per-parameter Adam state. Declaration
/// order is stable and defines the tensor order in checkpoints.
class ParamStore {
 public:
  std::size_t add(const std::string& name, Tensor init) {
    if (index_.count(name))
      fail(ErrorKind::validation, "duplicate parameter name: " + name);
    AdamState state;
    state.m = Tensor(init.shape());
    state.v = Tensor(init.shape());
    names_.push_back(name);
    values_.push_back(std::move(init));
    states_.push_back(std::move(state));
    index_[name] = names_.size() - 1;
    return names_.size() - 1;
  }

  std::size_t count() const { return names_.size(); }

  const std::string& name(std::size_t i) const { return names_[i]; }

  Tensor& value(std::size_t i) { return values_[i]; }
  const Tensor& value(std::size_t i) const { return values_[i]; }

  Tensor& value(const std::string& name) { return values_[index_of(name)]; }
  const Tensor& value(const std::string& name) const {
    return values_[index_of(name)];
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      fail(ErrorKind::validation, "unknown parameter: " + name);
    return it->second;
  }

  AdamState& state(std::size_t i) { return states_[i]; }
  const AdamState& state(std::size_t i) const { return states_[i]; }

  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const Tensor& t : values_) n += t.size();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::vector<AdamState> states_;
  std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

/// Decoupled weight decay followed by the bias-corrected Adam update.
inline void adam_step(ParamStore& params, const std::vector<Tensor>& grads,
                      const AdamConfig& cfg = {}) {
  if (grads.size() != params.count())
    fail(ErrorKind::dimension, "adam_step: gradient count mismatch");
  for (std::size_t p = 0; p < params.count(); ++p) {
    Tensor& theta = params.value(p);
    const Tensor& g = grads[p];
    if (!theta.same_shape(g))
      fail(ErrorKind::dimension,
           "adam_step: gradient shape mismatch for " + params.name(p));
    AdamState& st = params.state(p);
    st.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      if (cfg.weight_decay != 0.0)
        theta[i] -= cfg.lr * cfg.weight_decay * theta[i];
      st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g[i];
      st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = st.m[i] / bc1;
      const double v_hat = st.v[i] / bc2;
      theta[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

/// Scalar function of the parameters that also reports its analytic
/// gradients (one tensor per parameter, in ParamStore order).
using GradFn =
    std::function<std::pair<double, std::vector<Tensor>>(const ParamStore&)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
};

/// Central-difference gradient verification. The step is scaled by
/// max(1, |theta|) per coordinate; the relative error is
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline GradCheckReport gradcheck_report(ParamStore& params, const GradFn& fn,
                                        double h = 1e-5) {
  auto [value, analytic] = fn(params);
  if (!std::isfinite(value))
    fail(ErrorKind::computation, "gradcheck: non-finite objective");
  GradCheckReport report;
  for (std::size_t p = 0; p < params.count(); ++p) {
    Tensor& theta = params.value(p);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double orig = theta[i];
      const double step = h * std::max(1.0, std::abs(orig));
      theta[i] = orig + step;
      const double f_plus = fn(params).first;
      theta[i] = orig - step;
      const double f_minus = fn(params).first;
      theta[i] = orig;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
        fail(ErrorKind::computation, "gradcheck: non-finite objective");
      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double a = analytic[p][i];
      const double rel =
          std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = params.name(p);
        report.worst_index = i;
      }
    }
  }
  return report;
}

inline double gradcheck(ParamStore& params, const GradFn& fn, double h = 1e-5) {
  return gradcheck_report(params, fn, h).max_rel_err;
}

}  // namespace hybridst::diff
