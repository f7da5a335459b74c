#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "reldist/errors.hpp"
#include "reldist/rng.hpp"
#include "reldist/tensor.hpp"

namespace reldist {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

/// A named trainable (or frozen) tensor with its accumulated gradient and
/// SGD momentum buffer.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> momentum;
  bool trainable = true;
  bool decay = true;  // exclude biases/gains from weight decay
};

/// Owns parameters in registration order. Registration order is the
/// serialization order, so runs are reproducible and checkpoints stable.
template <typename T>
class ParamStore {
 public:
  int add(std::string name, Tensor<T> value, bool trainable = true, bool decay = true) {
    Param<T> p;
    p.name = std::move(name);
    p.grad = Tensor<T>::zeros(value.shape);
    p.momentum = Tensor<T>::zeros(value.shape);
    p.value = std::move(value);
    p.trainable = trainable;
    p.decay = decay;
    params_.push_back(std::move(p));
    return static_cast<int>(params_.size()) - 1;
  }

  Param<T>& at(int i) { return params_[static_cast<size_t>(i)]; }
  const Param<T>& at(int i) const { return params_[static_cast<size_t>(i)]; }
  int size() const { return static_cast<int>(params_.size()); }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), T(0));
  }

  void set_trainable(bool on) {
    for (auto& p : params_) p.trainable = on;
  }

  int64_t trainable_count() const {
    int64_t n = 0;
    for (const auto& p : params_)
      if (p.trainable) n += p.value.numel();
    return n;
  }

  bool all_finite() const {
    for (const auto& p : params_)
      if (!p.value.all_finite()) return false;
    return true;
  }

 private:
  std::vector<Param<T>> params_;
};

struct VarId {
  int32_t i = -1;
  bool valid() const { return i >= 0; }
};

/// Reverse-mode autodiff tape. Forward calls append nodes; backward() walks
/// the tape in reverse and accumulates gradients into node buffers and,
/// for leased parameters, back into their ParamStore.
///
/// A tape is rebuilt each step; with grad disabled it acts as a plain
/// evaluator and skips closure construction.
template <typename T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  const Tensor<T>& val(VarId v) const { return nodes_[static_cast<size_t>(v.i)].value; }
  const Tensor<T>& grad(VarId v) const { return nodes_[static_cast<size_t>(v.i)].grad; }
  bool needs_grad(VarId v) const { return nodes_[static_cast<size_t>(v.i)].needs_grad; }

  VarId leaf(Tensor<T> value, bool needs = false) {
    return push(std::move(value), needs && grad_enabled_, {});
  }

  VarId constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Lease a parameter onto the tape. Repeated leases of the same parameter
  /// return the same node, so gradients from all uses accumulate once.
  VarId param(ParamStore<T>& store, int index) {
    auto key = std::make_pair(static_cast<const void*>(&store), index);
    auto it = leases_.find(key);
    if (it != leases_.end()) return it->second;
    Param<T>& p = store.at(index);
    VarId v = push(p.value, grad_enabled_ && p.trainable, {});
    nodes_[static_cast<size_t>(v.i)].store = &store;
    nodes_[static_cast<size_t>(v.i)].param_index = index;
    leases_.emplace(key, v);
    return v;
  }

  // ---- elementwise ----

  VarId add(VarId a, VarId b) {
    check_same_shape(val(a), val(b), "add");
    Tensor<T> out = val(a);
    const Tensor<T>& bv = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    return unary_or_binary(std::move(out), a, b, [](Tape& t, Node& n, VarId a2, VarId b2) {
      t.accumulate(a2, n.grad);
      t.accumulate(b2, n.grad);
    });
  }

  VarId sub(VarId a, VarId b) {
    check_same_shape(val(a), val(b), "sub");
    Tensor<T> out = val(a);
    const Tensor<T>& bv = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    return unary_or_binary(std::move(out), a, b, [](Tape& t, Node& n, VarId a2, VarId b2) {
      t.accumulate(a2, n.grad);
      t.accumulate_scaled(b2, n.grad, T(-1));
    });
  }

  VarId mul(VarId a, VarId b) {
    check_same_shape(val(a), val(b), "mul");
    Tensor<T> out = val(a);
    const Tensor<T>& bv = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    return unary_or_binary(std::move(out), a, b, [](Tape& t, Node& n, VarId a2, VarId b2) {
      const Tensor<T>& av = t.val(a2);
      const Tensor<T>& bv2 = t.val(b2);
      if (t.needs_grad(a2)) {
        Tensor<T>& ga = t.grad_buf(a2);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += n.grad[i] * bv2[i];
      }
      if (t.needs_grad(b2)) {
        Tensor<T>& gb = t.grad_buf(b2);
        for (int64_t i = 0; i < gb.numel(); ++i) gb[i] += n.grad[i] * av[i];
      }
    });
  }

  VarId div(VarId a, VarId b) {
    check_same_shape(val(a), val(b), "div");
    Tensor<T> out = val(a);
    const Tensor<T>& bv = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] /= bv[i];
    return unary_or_binary(std::move(out), a, b, [](Tape& t, Node& n, VarId a2, VarId b2) {
      const Tensor<T>& av = t.val(a2);
      const Tensor<T>& bv2 = t.val(b2);
      if (t.needs_grad(a2)) {
        Tensor<T>& ga = t.grad_buf(a2);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += n.grad[i] / bv2[i];
      }
      if (t.needs_grad(b2)) {
        Tensor<T>& gb = t.grad_buf(b2);
        for (int64_t i = 0; i < gb.numel(); ++i) gb[i] -= n.grad[i] * av[i] / (bv2[i] * bv2[i]);
      }
    });
  }

  VarId scale(VarId a, T c) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v *= c;
    return unary(std::move(out), a, [c](Tape& t, Node& n, VarId a2) {
      t.accumulate_scaled(a2, n.grad, c);
    });
  }

  VarId neg(VarId a) { return scale(a, T(-1)); }

  VarId add_const(VarId a, const Tensor<T>& c) {
    check_same_shape(val(a), c, "add_const");
    Tensor<T> out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += c[i];
    return unary(std::move(out), a,
                 [](Tape& t, Node& n, VarId a2) { t.accumulate(a2, n.grad); });
  }

  VarId mul_const(VarId a, Tensor<T> c) {
    check_same_shape(val(a), c, "mul_const");
    Tensor<T> out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c[i];
    auto cp = std::make_shared<Tensor<T>>(std::move(c));
    return unary(std::move(out), a, [cp](Tape& t, Node& n, VarId a2) {
      Tensor<T>& ga = t.grad_buf(a2);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += n.grad[i] * (*cp)[i];
    });
  }

  VarId min_const(VarId a, Tensor<T> c) {
    check_same_shape(val(a), c, "min_const");
    Tensor<T> out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(out[i], c[i]);
    auto cp = std::make_shared<Tensor<T>>(std::move(c));
    return unary(std::move(out), a, [cp](Tape& t, Node& n, VarId a2) {
      const Tensor<T>& av = t.val(a2);
      Tensor<T>& ga = t.grad_buf(a2);
      for (int64_t i = 0; i < ga.numel(); ++i)
        if (av[i] <= (*cp)[i]) ga[i] += n.grad[i];
    });
  }

  VarId max_const(VarId a, Tensor<T> c) {
    check_same_shape(val(a), c, "max_const");
    Tensor<T> out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], c[i]);
    auto cp = std::make_shared<Tensor<T>>(std::move(c));
    return unary(std::move(out), a, [cp](Tape& t, Node& n, VarId a2) {
      const Tensor<T>& av = t.val(a2);
      Tensor<T>& ga = t.grad_buf(a2);
      for (int64_t i = 0; i < ga.numel(); ++i)
        if (av[i] >= (*cp)[i]) ga[i] += n.grad[i];
    });
  }

  VarId relu(VarId a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    return unary(std::move(out), a, [](Tape& t, Node& n, VarId a2) {
      const Tensor<T>& av = t.val(a2);
      Tensor<T>& ga = t.grad_buf(a2);
      for (int64_t i = 0; i < ga.numel(); ++i)
        if (av[i] > T(0)) ga[i] += n.grad[i];
    });
  }

  VarId leaky_relu(VarId a, T slope) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = v > T(0) ? v : slope * v;
    return unary(std::move(out), a, [slope](Tape& t, Node& n, VarId a2) {
      const Tensor<T>& av = t.val(a2);
      Tensor<T>& ga = t.grad_buf(a2);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += n.grad[i] * (av[i] > T(0) ? T(1) : slope);
    });
  }

  VarId absval(VarId a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = std::abs(v);
    return unary(std::move(out), a, [](Tape& t, Node& n, VarId a2) {
      const Tensor<T>& av = t.val(a2);
      Tensor<T>& ga = t.grad_buf(a2);
      for (int64_t i = 0; i < ga.numel(); ++i)
        ga[i] += n.grad[i] * (av[i] > T(0) ? T(1) : (av[i] < T(0) ? T(-1) : T(0)));
    });
  }

  VarId square(VarId a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = v * v;
    return unary(std::move(out), a, [](Tape& t, Node& n, VarId a2) {
      const Tensor<T>& av = t.val(a2);
      Tensor<T>& ga = t.grad_buf(a2);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += n.grad[i] * T(2) * av[i];
    });
  }

  VarId expv(VarId a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = std::exp(v);
    return unary(std::move(out), a, [](Tape& t, Node& n, VarId a2) {
      Tensor<T>& ga = t.grad_buf(a2);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += n.grad[i] * n.value[i];
    });
  }

  /// sqrt(x + eps); callers pass eps > 0 when x can be exactly zero.
  VarId sqrtv(VarId a, T eps = T(0)) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = std::sqrt(v + eps);
    return unary(std::move(out), a, [](Tape& t, Node& n, VarId a2) {
      Tensor<T>& ga = t.grad_buf(a2);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += n.grad[i] * T(0.5) / n.value[i];
    });
  }

  VarId sigmoid(VarId a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = stable_sigmoid(v);
    return unary(std::move(out), a, [](Tape& t, Node& n, VarId a2) {
      Tensor<T>& ga = t.grad_buf(a2);
      for (int64_t i = 0; i < ga.numel(); ++i)
        ga[i] += n.grad[i] * n.value[i] * (T(1) - n.value[i]);
    });
  }

  /// log(sigmoid(x)), computed as -softplus(-x).
  VarId logsigmoid(VarId a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = -softplus(-v);
    return unary(std::move(out), a, [](Tape& t, Node& n, VarId a2) {
      const Tensor<T>& av = t.val(a2);
      Tensor<T>& ga = t.grad_buf(a2);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += n.grad[i] * stable_sigmoid(-av[i]);
    });
  }

  // ---- shape ----

  VarId reshape(VarId a, std::vector<int64_t> shape) {
    if (Tensor<T>::count(shape) != val(a).numel())
      throw DimensionError("reshape: cannot view " + val(a).shape_str() + " as " +
                           Tensor<T>(shape).shape_str());
    Tensor<T> out(std::move(shape), val(a).data);
    return unary(std::move(out), a, [](Tape& t, Node& n, VarId a2) {
      Tensor<T>& ga = t.grad_buf(a2);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += n.grad[i];
    });
  }

  /// Contiguous slice along the first axis: rows [begin, begin+count).
  VarId slice0(VarId a, int64_t begin, int64_t count) {
    const Tensor<T>& av = val(a);
    int64_t stride = av.numel() / av.shape[0];
    std::vector<int64_t> shape = av.shape;
    shape[0] = count;
    Tensor<T> out(shape);
    std::copy(av.data.begin() + begin * stride, av.data.begin() + (begin + count) * stride,
              out.data.begin());
    return unary(std::move(out), a, [begin, stride](Tape& t, Node& n, VarId a2) {
      Tensor<T>& ga = t.grad_buf(a2);
      for (int64_t i = 0; i < n.grad.numel(); ++i) ga[begin * stride + i] += n.grad[i];
    });
  }

  /// Gather arbitrary flat elements; out[i] = a[idx[i]].
  VarId gather(VarId a, std::vector<int64_t> idx) {
    const Tensor<T>& av = val(a);
    Tensor<T> out({static_cast<int64_t>(idx.size())});
    for (size_t i = 0; i < idx.size(); ++i) out[static_cast<int64_t>(i)] = av[idx[i]];
    auto ip = std::make_shared<std::vector<int64_t>>(std::move(idx));
    return unary(std::move(out), a, [ip](Tape& t, Node& n, VarId a2) {
      Tensor<T>& ga = t.grad_buf(a2);
      for (size_t i = 0; i < ip->size(); ++i) ga[(*ip)[i]] += n.grad[static_cast<int64_t>(i)];
    });
  }

  // ---- reductions ----

  VarId sum_all(VarId a) {
    T s = T(0);
    for (const T& v : val(a).data) s += v;
    return unary(Tensor<T>::scalar(s), a, [](Tape& t, Node& n, VarId a2) {
      Tensor<T>& ga = t.grad_buf(a2);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += n.grad[0];
    });
  }

  VarId mean_all(VarId a) {
    int64_t n = val(a).numel();
    return scale(sum_all(a), T(1) / static_cast<T>(n));
  }

  /// Row sums of a 2D tensor: (n,m) -> (n).
  VarId rowsum(VarId a) {
    const Tensor<T>& av = val(a);
    if (av.rank() != 2) throw DimensionError("rowsum expects rank-2, got " + av.shape_str());
    int64_t n = av.shape[0], m = av.shape[1];
    Tensor<T> out({n});
    for (int64_t i = 0; i < n; ++i) {
      T s = T(0);
      for (int64_t j = 0; j < m; ++j) s += av.at2(i, j);
      out[i] = s;
    }
    return unary(std::move(out), a, [n, m](Tape& t, Node& n2, VarId a2) {
      Tensor<T>& ga = t.grad_buf(a2);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) ga[i * m + j] += n2.grad[i];
    });
  }

  // ---- linear algebra ----

  /// 2D matmul with transpose flags: out = op(a) * op(b).
  VarId matmul(VarId a, VarId b, bool ta = false, bool tb = false) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    if (av.rank() != 2 || bv.rank() != 2)
      throw DimensionError("matmul expects rank-2 operands, got " + av.shape_str() + " and " +
                           bv.shape_str());
    int64_t m = ta ? av.shape[1] : av.shape[0];
    int64_t k = ta ? av.shape[0] : av.shape[1];
    int64_t k2 = tb ? bv.shape[1] : bv.shape[0];
    int64_t n = tb ? bv.shape[0] : bv.shape[1];
    if (k != k2)
      throw DimensionError("matmul: inner dims " + av.shape_str() + " x " + bv.shape_str());
    Tensor<T> out({m, n});
    gemm(av, bv, out, ta, tb, T(0));
    return unary_or_binary(std::move(out), a, b, [ta, tb](Tape& t, Node& nn, VarId a2, VarId b2) {
      // dA = op(dC * op(B)^T), dB = op(op(A)^T * dC), adjusted for flags.
      const Tensor<T>& av2 = t.val(a2);
      const Tensor<T>& bv2 = t.val(b2);
      if (t.needs_grad(a2)) {
        Tensor<T>& ga = t.grad_buf(a2);
        if (!ta)
          gemm(nn.grad, bv2, ga, false, !tb, T(1));
        else
          gemm(bv2, nn.grad, ga, tb, true, T(1));
      }
      if (t.needs_grad(b2)) {
        Tensor<T>& gb = t.grad_buf(b2);
        if (!tb)
          gemm(av2, nn.grad, gb, !ta, false, T(1));
        else
          gemm(nn.grad, av2, gb, true, ta, T(1));
      }
    });
  }

  /// Batched matmul over the leading axis. A 2D operand is broadcast across
  /// the batch and receives accumulated gradients.
  VarId bmm(VarId a, VarId b, bool ta = false, bool tb = false) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    bool a3 = av.rank() == 3, b3 = bv.rank() == 3;
    if (!a3 && !b3) return matmul(a, b, ta, tb);
    int64_t batch = a3 ? av.shape[0] : bv.shape[0];
    if (a3 && b3 && av.shape[0] != bv.shape[0])
      throw DimensionError("bmm: batch dims " + av.shape_str() + " vs " + bv.shape_str());
    auto dims2 = [](const Tensor<T>& x, bool is3) {
      return is3 ? std::pair<int64_t, int64_t>{x.shape[1], x.shape[2]}
                 : std::pair<int64_t, int64_t>{x.shape[0], x.shape[1]};
    };
    auto [ar, ac] = dims2(av, a3);
    auto [br, bc] = dims2(bv, b3);
    int64_t m = ta ? ac : ar, k = ta ? ar : ac;
    int64_t k2 = tb ? bc : br, n = tb ? br : bc;
    if (k != k2) throw DimensionError("bmm: inner dims " + av.shape_str() + " x " + bv.shape_str());
    Tensor<T> out({batch, m, n});
    for (int64_t i = 0; i < batch; ++i) {
      ConstMatMap<T> A(av.data.data() + (a3 ? i * ar * ac : 0), ar, ac);
      ConstMatMap<T> B(bv.data.data() + (b3 ? i * br * bc : 0), br, bc);
      MatMap<T> C(out.data.data() + i * m * n, m, n);
      gemm_maps(A, B, C, ta, tb, T(0));
    }
    return unary_or_binary(
        std::move(out), a, b,
        [ta, tb, a3, b3, batch, ar, ac, br, bc, m, n](Tape& t, Node& nn, VarId a2, VarId b2) {
          const Tensor<T>& av2 = t.val(a2);
          const Tensor<T>& bv2 = t.val(b2);
          for (int64_t i = 0; i < batch; ++i) {
            ConstMatMap<T> A(av2.data.data() + (a3 ? i * ar * ac : 0), ar, ac);
            ConstMatMap<T> B(bv2.data.data() + (b3 ? i * br * bc : 0), br, bc);
            ConstMatMap<T> G(nn.grad.data.data() + i * m * n, m, n);
            if (t.needs_grad(a2)) {
              MatMap<T> GA(t.grad_buf(a2).data.data() + (a3 ? i * ar * ac : 0), ar, ac);
              if (!ta)
                gemm_maps(G, B, GA, false, !tb, T(1));
              else
                gemm_maps(B, G, GA, tb, true, T(1));
            }
            if (t.needs_grad(b2)) {
              MatMap<T> GB(t.grad_buf(b2).data.data() + (b3 ? i * br * bc : 0), br, bc);
              if (!tb)
                gemm_maps(A, G, GB, !ta, false, T(1));
              else
                gemm_maps(G, A, GB, true, ta, T(1));
            }
          }
        });
  }

  /// Bias add over rows: (n,m) + (m).
  VarId add_rowvec(VarId a, VarId v) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& vv = val(v);
    if (av.rank() != 2 || vv.rank() != 1 || av.shape[1] != vv.shape[0])
      throw DimensionError("add_rowvec: " + av.shape_str() + " + " + vv.shape_str());
    Tensor<T> out = av;
    int64_t n = av.shape[0], m = av.shape[1];
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < m; ++j) out.at2(i, j) += vv[j];
    return unary_or_binary(std::move(out), a, v, [n, m](Tape& t, Node& nn, VarId a2, VarId v2) {
      if (t.needs_grad(a2)) t.accumulate(a2, nn.grad);
      if (t.needs_grad(v2)) {
        Tensor<T>& gv = t.grad_buf(v2);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < m; ++j) gv[j] += nn.grad[i * m + j];
      }
    });
  }

  /// out[i][j] = p[i] + q[j], both rank-1 of length n.
  VarId pairwise_outer_sum(VarId p, VarId q) {
    const Tensor<T>& pv = val(p);
    const Tensor<T>& qv = val(q);
    if (pv.rank() != 1 || qv.rank() != 1 || pv.shape[0] != qv.shape[0])
      throw DimensionError("pairwise_outer_sum: " + pv.shape_str() + " vs " + qv.shape_str());
    int64_t n = pv.shape[0];
    Tensor<T> out({n, n});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j) out.at2(i, j) = pv[i] + qv[j];
    return unary_or_binary(std::move(out), p, q, [n](Tape& t, Node& nn, VarId p2, VarId q2) {
      if (t.needs_grad(p2)) {
        Tensor<T>& gp = t.grad_buf(p2);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < n; ++j) gp[i] += nn.grad[i * n + j];
      }
      if (t.needs_grad(q2)) {
        Tensor<T>& gq = t.grad_buf(q2);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < n; ++j) gq[j] += nn.grad[i * n + j];
      }
    });
  }

  /// Softmax over axis 0 (columns) or axis 1 (rows) of a 2D tensor,
  /// stabilized by subtracting the per-slice max.
  VarId softmax2d(VarId a, int axis) {
    const Tensor<T>& av = val(a);
    if (av.rank() != 2) throw DimensionError("softmax2d expects rank-2, got " + av.shape_str());
    int64_t n = av.shape[0], m = av.shape[1];
    Tensor<T> out({n, m});
    if (axis == 0) {
      for (int64_t j = 0; j < m; ++j) {
        T mx = av.at2(0, j);
        for (int64_t i = 1; i < n; ++i) mx = std::max(mx, av.at2(i, j));
        T s = T(0);
        for (int64_t i = 0; i < n; ++i) {
          T e = std::exp(av.at2(i, j) - mx);
          out.at2(i, j) = e;
          s += e;
        }
        for (int64_t i = 0; i < n; ++i) out.at2(i, j) /= s;
      }
    } else {
      for (int64_t i = 0; i < n; ++i) {
        T mx = av.at2(i, 0);
        for (int64_t j = 1; j < m; ++j) mx = std::max(mx, av.at2(i, j));
        T s = T(0);
        for (int64_t j = 0; j < m; ++j) {
          T e = std::exp(av.at2(i, j) - mx);
          out.at2(i, j) = e;
          s += e;
        }
        for (int64_t j = 0; j < m; ++j) out.at2(i, j) /= s;
      }
    }
    return unary(std::move(out), a, [n, m, axis](Tape& t, Node& nn, VarId a2) {
      Tensor<T>& ga = t.grad_buf(a2);
      if (axis == 0) {
        for (int64_t j = 0; j < m; ++j) {
          T dot = T(0);
          for (int64_t i = 0; i < n; ++i) dot += nn.grad[i * m + j] * nn.value[i * m + j];
          for (int64_t i = 0; i < n; ++i)
            ga[i * m + j] += nn.value[i * m + j] * (nn.grad[i * m + j] - dot);
        }
      } else {
        for (int64_t i = 0; i < n; ++i) {
          T dot = T(0);
          for (int64_t j = 0; j < m; ++j) dot += nn.grad[i * m + j] * nn.value[i * m + j];
          for (int64_t j = 0; j < m; ++j)
            ga[i * m + j] += nn.value[i * m + j] * (nn.grad[i * m + j] - dot);
        }
      }
    });
  }

  /// Elementwise y = a*x + b with scalar variables a, b.
  VarId affine_scalar(VarId x, VarId a, VarId b) {
    const Tensor<T>& xv = val(x);
    T av = val(a)[0], bv = val(b)[0];
    Tensor<T> out = xv;
    for (auto& v : out.data) v = av * v + bv;
    VarId ids[3] = {x, a, b};
    return nary(std::move(out), ids, 3, [av](Tape& t, Node& nn, const VarId* in) {
      const Tensor<T>& xv2 = t.val(in[0]);
      if (t.needs_grad(in[0])) {
        Tensor<T>& gx = t.grad_buf(in[0]);
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += nn.grad[i] * av;
      }
      if (t.needs_grad(in[1])) {
        T s = T(0);
        for (int64_t i = 0; i < xv2.numel(); ++i) s += nn.grad[i] * xv2[i];
        t.grad_buf(in[1])[0] += s;
      }
      if (t.needs_grad(in[2])) {
        T s = T(0);
        for (int64_t i = 0; i < xv2.numel(); ++i) s += nn.grad[i];
        t.grad_buf(in[2])[0] += s;
      }
    });
  }

  // ---- conv / spatial ----

  /// conv2d: x (B,Cin,H,W), w (Cout,Cin,kh,kw), optional bias (Cout).
  VarId conv2d(VarId x, VarId w, VarId bias, int stride, int pad) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& wv = val(w);
    if (xv.rank() != 4 || wv.rank() != 4)
      throw DimensionError("conv2d expects 4D x,w; got " + xv.shape_str() + " and " +
                           wv.shape_str());
    if (xv.shape[1] != wv.shape[1])
      throw DimensionError("conv2d channel mismatch: x " + xv.shape_str() + " vs w " +
                           wv.shape_str());
    int64_t B = xv.shape[0], Cin = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    int64_t Cout = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3];
    int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    int64_t K = Cin * kh * kw, P = Ho * Wo;
    Tensor<T> out({B, Cout, Ho, Wo});
    std::vector<T> col(static_cast<size_t>(K * P));
    const bool has_bias = bias.valid();
    const T* bp = has_bias ? val(bias).data.data() : nullptr;
    for (int64_t b = 0; b < B; ++b) {
      im2col(xv.data.data() + b * Cin * H * W, Cin, H, W, kh, kw, stride, pad, col.data());
      ConstMatMap<T> Wm(wv.data.data(), Cout, K);
      ConstMatMap<T> Cm(col.data(), K, P);
      MatMap<T> Om(out.data.data() + b * Cout * P, Cout, P);
      Om.noalias() = Wm * Cm;
      if (has_bias)
        for (int64_t c = 0; c < Cout; ++c) Om.row(c).array() += bp[c];
    }
    VarId ids[3] = {x, w, bias.valid() ? bias : x};
    int n_in = bias.valid() ? 3 : 2;
    auto meta = std::make_shared<ConvMeta>(
        ConvMeta{B, Cin, H, W, Cout, kh, kw, Ho, Wo, stride, pad, has_bias});
    return nary(std::move(out), ids, n_in, [meta](Tape& t, Node& nn, const VarId* in) {
      const auto& m = *meta;
      int64_t K = m.Cin * m.kh * m.kw, P = m.Ho * m.Wo;
      const Tensor<T>& xv2 = t.val(in[0]);
      const Tensor<T>& wv2 = t.val(in[1]);
      std::vector<T> col(static_cast<size_t>(K * P));
      std::vector<T> dcol(static_cast<size_t>(K * P));
      for (int64_t b = 0; b < m.B; ++b) {
        ConstMatMap<T> G(nn.grad.data.data() + b * m.Cout * P, m.Cout, P);
        if (t.needs_grad(in[1])) {
          im2col(xv2.data.data() + b * m.Cin * m.H * m.W, m.Cin, m.H, m.W, m.kh, m.kw, m.stride,
                 m.pad, col.data());
          ConstMatMap<T> Cm(col.data(), K, P);
          MatMap<T> GW(t.grad_buf(in[1]).data.data(), m.Cout, K);
          GW.noalias() += G * Cm.transpose();
        }
        if (t.needs_grad(in[0])) {
          ConstMatMap<T> Wm(wv2.data.data(), m.Cout, K);
          MatMap<T> DC(dcol.data(), K, P);
          DC.noalias() = Wm.transpose() * G;
          col2im(dcol.data(), m.Cin, m.H, m.W, m.kh, m.kw, m.stride, m.pad,
                 t.grad_buf(in[0]).data.data() + b * m.Cin * m.H * m.W);
        }
        if (m.has_bias && t.needs_grad(in[2])) {
          Tensor<T>& gb = t.grad_buf(in[2]);
          for (int64_t c = 0; c < m.Cout; ++c) gb[c] += G.row(c).sum();
        }
      }
    });
  }

  /// Nearest-neighbour 2x upsample of (B,C,H,W).
  VarId upsample2(VarId x) {
    const Tensor<T>& xv = val(x);
    if (xv.rank() != 4) throw DimensionError("upsample2 expects 4D, got " + xv.shape_str());
    int64_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    Tensor<T> out({B, C, 2 * H, 2 * W});
    for (int64_t bc = 0; bc < B * C; ++bc) {
      const T* src = xv.data.data() + bc * H * W;
      T* dst = out.data.data() + bc * 4 * H * W;
      for (int64_t y = 0; y < 2 * H; ++y)
        for (int64_t x2 = 0; x2 < 2 * W; ++x2) dst[y * 2 * W + x2] = src[(y / 2) * W + (x2 / 2)];
    }
    return unary(std::move(out), x, [B, C, H, W](Tape& t, Node& nn, VarId a2) {
      Tensor<T>& ga = t.grad_buf(a2);
      for (int64_t bc = 0; bc < B * C; ++bc) {
        T* gs = ga.data.data() + bc * H * W;
        const T* gd = nn.grad.data.data() + bc * 4 * H * W;
        for (int64_t y = 0; y < 2 * H; ++y)
          for (int64_t x2 = 0; x2 < 2 * W; ++x2) gs[(y / 2) * W + (x2 / 2)] += gd[y * 2 * W + x2];
      }
    });
  }

  // ---- extension hook ----

  /// Append a node with a caller-supplied backward. The closure receives the
  /// output gradient and accumulates into the inputs via grad_buf().
  VarId custom(Tensor<T> out, std::vector<VarId> inputs,
               std::function<void(Tape&, const Tensor<T>& gout, const std::vector<VarId>&)> bw) {
    bool needs = false;
    for (VarId v : inputs) needs = needs || needs_grad(v);
    needs = needs && grad_enabled_;
    if (!needs) return push(std::move(out), false, {});
    return push(std::move(out), true,
                [inputs = std::move(inputs), bw = std::move(bw)](Tape& t, Node& n) {
                  bw(t, n.grad, inputs);
                });
  }

  Tensor<T>& grad_buf(VarId v) {
    ensure_grad(v);
    return nodes_[static_cast<size_t>(v.i)].grad;
  }

  // ---- graph plumbing ----

  /// Back-propagate from a scalar root. Parameter gradients are accumulated
  /// into their stores.
  void backward(VarId root) {
    if (!grad_enabled_) throw NumericalError("backward called on a no-grad tape");
    Node& r = nodes_[static_cast<size_t>(root.i)];
    if (r.value.numel() != 1) throw DimensionError("backward root must be scalar");
    ensure_grad(root);
    grad_buf(root)[0] = T(1);
    for (int32_t i = root.i; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.needs_grad && n.backward && n.grad.numel() > 0) n.backward(*this, n);
    }
    for (auto& n : nodes_) {
      if (n.store && n.needs_grad && n.grad.numel() > 0) {
        Param<T>& p = n.store->at(n.param_index);
        for (int64_t i = 0; i < p.grad.numel(); ++i) p.grad[i] += n.grad[i];
      }
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    std::function<void(Tape&, Node&)> backward;
    ParamStore<T>* store = nullptr;
    int param_index = -1;
  };

  struct ConvMeta {
    int64_t B, Cin, H, W, Cout, kh, kw, Ho, Wo;
    int stride, pad;
    bool has_bias;
  };

  std::vector<Node> nodes_;
  std::unordered_map<std::pair<const void*, int>, VarId,
                     decltype([](const std::pair<const void*, int>& k) {
                       return std::hash<const void*>()(k.first) * 1000003u ^
                              std::hash<int>()(k.second);
                     })>
      leases_;
  bool grad_enabled_;

  int32_t next_index() const { return static_cast<int32_t>(nodes_.size()); }

  VarId push(Tensor<T> value, bool needs, std::function<void(Tape&, Node&)> bw) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs;
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return VarId{static_cast<int32_t>(nodes_.size() - 1)};
  }

  void ensure_grad(VarId v) {
    Node& n = nodes_[static_cast<size_t>(v.i)];
    if (n.grad.numel() == 0) n.grad = Tensor<T>::zeros(n.value.shape);
  }

  void accumulate(VarId v, const Tensor<T>& g) {
    if (!needs_grad(v)) return;
    Tensor<T>& gv = grad_buf(v);
    for (int64_t i = 0; i < gv.numel(); ++i) gv[i] += g[i];
  }

  void accumulate_scaled(VarId v, const Tensor<T>& g, T c) {
    if (!needs_grad(v)) return;
    Tensor<T>& gv = grad_buf(v);
    for (int64_t i = 0; i < gv.numel(); ++i) gv[i] += c * g[i];
  }

  template <typename F>
  VarId unary(Tensor<T> out, VarId a, F&& f) {
    bool needs = grad_enabled_ && needs_grad(a);
    if (!needs) return push(std::move(out), false, {});
    return push(std::move(out), true,
                [a, f = std::forward<F>(f)](Tape& t, Node& n) { f(t, n, a); });
  }

  template <typename F>
  VarId unary_or_binary(Tensor<T> out, VarId a, VarId b, F&& f) {
    bool needs = grad_enabled_ && (needs_grad(a) || needs_grad(b));
    if (!needs) return push(std::move(out), false, {});
    return push(std::move(out), true,
                [a, b, f = std::forward<F>(f)](Tape& t, Node& n) { f(t, n, a, b); });
  }

  template <typename F>
  VarId nary(Tensor<T> out, const VarId* ids, int n_in, F&& f) {
    bool needs = false;
    for (int i = 0; i < n_in; ++i) needs = needs || needs_grad(ids[i]);
    needs = needs && grad_enabled_;
    if (!needs) return push(std::move(out), false, {});
    std::vector<VarId> in(ids, ids + n_in);
    return push(std::move(out), true,
                [in = std::move(in), f = std::forward<F>(f)](Tape& t, Node& n) {
                  f(t, n, in.data());
                });
  }

  static T stable_sigmoid(T x) {
    if (x >= T(0)) {
      T e = std::exp(-x);
      return T(1) / (T(1) + e);
    }
    T e = std::exp(x);
    return e / (T(1) + e);
  }

  static T softplus(T x) {
    if (x > T(30)) return x;
    if (x < T(-30)) return std::exp(x);
    return std::log1p(std::exp(x));
  }

  static void gemm(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c, bool ta, bool tb,
                   T beta) {
    ConstMatMap<T> A(a.data.data(), a.shape[0], a.shape[1]);
    ConstMatMap<T> B(b.data.data(), b.shape[0], b.shape[1]);
    MatMap<T> C(c.data.data(), c.shape[0], c.shape[1]);
    gemm_maps(A, B, C, ta, tb, beta);
  }

  template <typename MA, typename MB, typename MC>
  static void gemm_maps(const MA& A, const MB& B, MC& C, bool ta, bool tb, T beta) {
    if (beta == T(0)) {
      if (!ta && !tb)
        C.noalias() = A * B;
      else if (ta && !tb)
        C.noalias() = A.transpose() * B;
      else if (!ta && tb)
        C.noalias() = A * B.transpose();
      else
        C.noalias() = A.transpose() * B.transpose();
    } else {
      if (!ta && !tb)
        C.noalias() += A * B;
      else if (ta && !tb)
        C.noalias() += A.transpose() * B;
      else if (!ta && tb)
        C.noalias() += A * B.transpose();
      else
        C.noalias() += A.transpose() * B.transpose();
    }
  }

  static void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                     int stride, int pad, T* col) {
    int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    int64_t P = Ho * Wo;
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < kh; ++i)
        for (int64_t j = 0; j < kw; ++j) {
          T* dst = col + ((c * kh + i) * kw + j) * P;
          for (int64_t oy = 0; oy < Ho; ++oy) {
            int64_t y = oy * stride - pad + i;
            for (int64_t ox = 0; ox < Wo; ++ox) {
              int64_t xx = ox * stride - pad + j;
              dst[oy * Wo + ox] =
                  (y >= 0 && y < H && xx >= 0 && xx < W) ? x[(c * H + y) * W + xx] : T(0);
            }
          }
        }
  }

  static void col2im(const T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                     int stride, int pad, T* dx) {
    int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    int64_t P = Ho * Wo;
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < kh; ++i)
        for (int64_t j = 0; j < kw; ++j) {
          const T* src = col + ((c * kh + i) * kw + j) * P;
          for (int64_t oy = 0; oy < Ho; ++oy) {
            int64_t y = oy * stride - pad + i;
            if (y < 0 || y >= H) continue;
            for (int64_t ox = 0; ox < Wo; ++ox) {
              int64_t xx = ox * stride - pad + j;
              if (xx >= 0 && xx < W) dx[(c * H + y) * W + xx] += src[oy * Wo + ox];
            }
          }
        }
  }
};

}  // namespace reldist
