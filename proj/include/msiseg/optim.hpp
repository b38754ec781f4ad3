#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "msiseg/graph.hpp"

namespace msiseg {

// NAdam with decoupled weight decay. Per step t (1-based), per element:
//   m <- b1*m + (1-b1)*g              v <- b2*v + (1-b2)*g^2
//   mhat = m/(1-b1^t)                 vhat = v/(1-b2^t)
//   mbar = b1*mhat + (1-b1)*g/(1-b1^t)
//   theta <- theta - lr*mbar/(sqrt(vhat)+eps) - lr*wd*theta
// Each element update is evaluated in double; moments are stored at the
// parameter precision so checkpointed state restores bit-exactly.
template <typename T>
class Nadam {
 public:
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void step(ParamStore<T>& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (const std::string& name : params.names()) {
      Param<T>& p = params.get(name);
      if (!p.trainable || p.frozen) continue;
      Slot& s = slots_[name];
      if (s.m.empty()) {
        s.m.assign(p.tensor.numel(), T(0));
        s.v.assign(p.tensor.numel(), T(0));
      }
      if (s.m.size() != p.tensor.numel()) throw StateError("optimizer slot shape drift: " + name);
      for (size_t i = 0; i < p.tensor.numel(); ++i) {
        const double g = static_cast<double>(p.tensor.grad[i]);
        if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + name);
        const double m = beta1 * static_cast<double>(s.m[i]) + (1.0 - beta1) * g;
        const double v = beta2 * static_cast<double>(s.v[i]) + (1.0 - beta2) * g * g;
        s.m[i] = static_cast<T>(m);
        s.v[i] = static_cast<T>(v);
        const double mhat = static_cast<double>(s.m[i]) / bc1;
        const double vhat = static_cast<double>(s.v[i]) / bc2;
        const double mbar = beta1 * mhat + (1.0 - beta1) * g / bc1;
        const double theta = static_cast<double>(p.tensor.values[i]);
        p.tensor.values[i] =
            static_cast<T>(theta - lr * mbar / (std::sqrt(vhat) + eps) - lr * weight_decay * theta);
      }
    }
  }

  int64_t step_count() const { return t_; }

  // Serializes moments and the step counter as checkpoint records
  // (opt.step, opt.m.<param>, opt.v.<param>), so training can resume exactly.
  std::vector<CheckpointRecord> to_records() const {
    std::vector<CheckpointRecord> records;
    CheckpointRecord step;
    step.name = "opt.step";
    step.trainable = false;
    step.shape = {1};
    step.values = {static_cast<float>(t_)};
    records.push_back(std::move(step));
    for (const auto& [name, slot] : slots_) {
      for (const char* kind : {"m", "v"}) {
        CheckpointRecord r;
        r.name = std::string("opt.") + kind + "." + name;
        r.trainable = false;
        const std::vector<T>& src = kind[0] == 'm' ? slot.m : slot.v;
        r.shape = {static_cast<int>(src.size())};
        r.values.resize(src.size());
        for (size_t i = 0; i < src.size(); ++i) r.values[i] = static_cast<float>(src[i]);
        records.push_back(std::move(r));
      }
    }
    return records;
  }

  void from_records(const std::vector<CheckpointRecord>& records) {
    slots_.clear();
    t_ = -1;
    for (const CheckpointRecord& r : records) {
      if (r.name == "opt.step") {
        t_ = static_cast<int64_t>(r.values.at(0));
      } else if (r.name.rfind("opt.m.", 0) == 0 || r.name.rfind("opt.v.", 0) == 0) {
        const bool is_m = r.name[4] == 'm';
        const std::string pname = r.name.substr(6);
        std::vector<T>& dst = is_m ? slots_[pname].m : slots_[pname].v;
        dst.resize(r.values.size());
        for (size_t i = 0; i < r.values.size(); ++i) dst[i] = static_cast<T>(r.values[i]);
      }
    }
    if (t_ < 0) throw FormatError("optimizer state is missing opt.step");
  }

 private:
  struct Slot {
    std::vector<T> m, v;
  };
  std::map<std::string, Slot> slots_;
  int64_t t_ = 0;
};

}  // namespace msiseg
