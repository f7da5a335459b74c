#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "reldist/rng.hpp"
#include "reldist/tape.hpp"
#include "reldist/tensor.hpp"

namespace reldist {

template <typename T>
Tensor<T> randn_tensor(std::vector<int64_t> shape, Rng& rng, double stddev, double mean = 0.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.normal(mean, stddev));
  return t;
}

/// 2D convolution layer; kernel 1x1 with stride 1 doubles as a linear
/// channel map (the adapter shape used throughout distillation).
template <typename T>
struct Conv2d {
  int weight = -1;
  int bias = -1;
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  Conv2d(ParamStore<T>& store, const std::string& name, int64_t c_in, int64_t c_out, int64_t k,
         int stride_, Rng& rng, double init_gain = 1.0, double bias_init = 0.0) {
    stride = stride_;
    pad = static_cast<int>(k / 2);
    double stddev = init_gain * std::sqrt(2.0 / (static_cast<double>(c_in) * k * k));
    weight = store.add(name + ".weight", randn_tensor<T>({c_out, c_in, k, k}, rng, stddev));
    bias = store.add(name + ".bias", Tensor<T>::full({c_out}, static_cast<T>(bias_init)), true,
                     /*decay=*/false);
  }

  VarId forward(Tape<T>& tape, ParamStore<T>& store, VarId x) const {
    return tape.conv2d(x, tape.param(store, weight), tape.param(store, bias), stride, pad);
  }
};

/// Dense layer on row-major (n, in) inputs: y = x W^T + b.
template <typename T>
struct Linear {
  int weight = -1;  // (out, in)
  int bias = -1;    // (out)

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, int64_t in, int64_t out, Rng& rng,
         double init_gain = 1.0) {
    double stddev = init_gain / std::sqrt(static_cast<double>(in));
    weight = store.add(name + ".weight", randn_tensor<T>({out, in}, rng, stddev));
    bias = store.add(name + ".bias", Tensor<T>::zeros({out}), true, /*decay=*/false);
  }

  VarId forward(Tape<T>& tape, ParamStore<T>& store, VarId x) const {
    VarId y = tape.matmul(x, tape.param(store, weight), false, true);
    return tape.add_rowvec(y, tape.param(store, bias));
  }
};

/// SGD with momentum and decoupled-from-bias weight decay.
template <typename T>
struct Sgd {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;

  void step(ParamStore<T>& store) const {
    for (int i = 0; i < store.size(); ++i) {
      Param<T>& p = store.at(i);
      if (!p.trainable) continue;
      const T wd = static_cast<T>(p.decay ? weight_decay : 0.0);
      const T mu = static_cast<T>(momentum);
      const T eta = static_cast<T>(lr);
      for (int64_t j = 0; j < p.value.numel(); ++j) {
        T g = p.grad[j] + wd * p.value[j];
        p.momentum[j] = mu * p.momentum[j] + g;
        p.value[j] -= eta * p.momentum[j];
      }
    }
  }
};

}  // namespace reldist
