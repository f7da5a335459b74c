#pragma once

#include "reldist/tape.hpp"

namespace reldist {

/// Distance between paired teacher/student tensors. Applied per item along
/// the first axis and averaged over it:
///   kMse   - mean of elementwise squared differences
///   kSumSq - per-item sum of squared differences
///   kL2    - per-item Euclidean (Frobenius) norm of the difference
enum class Discrepancy { kMse, kSumSq, kL2 };

inline const char* discrepancy_name(Discrepancy d) {
  switch (d) {
    case Discrepancy::kMse: return "mse";
    case Discrepancy::kSumSq: return "sum_sq";
    case Discrepancy::kL2: return "l2";
  }
  return "?";
}

/// Batched map/crop discrepancy: inputs (B, ...) reduced per item, then
/// averaged over the first axis.
template <typename T>
VarId map_discrepancy(Tape<T>& tape, VarId a, VarId b, Discrepancy mode) {
  check_same_shape(tape.val(a), tape.val(b), "map_discrepancy");
  const auto& shape = tape.val(a).shape;
  int64_t items = shape[0];
  int64_t per_item = tape.val(a).numel() / items;
  VarId diff = tape.sub(a, b);
  VarId sq = tape.square(diff);
  switch (mode) {
    case Discrepancy::kMse:
      return tape.mean_all(sq);
    case Discrepancy::kSumSq:
      return tape.scale(tape.sum_all(sq), T(1) / static_cast<T>(items));
    case Discrepancy::kL2: {
      VarId rows = tape.reshape(sq, {items, per_item});
      VarId per = tape.rowsum(rows);
      // eps keeps the gradient finite when teacher == student exactly.
      VarId norms = tape.sqrtv(per, T(1e-30));
      return tape.scale(tape.sum_all(norms), T(1) / static_cast<T>(items));
    }
  }
  throw ValidationError("unknown discrepancy");
}

/// Pairwise (relation-matrix) discrepancy: sum over all (i,j) entries of the
/// per-entry scalar distance.
template <typename T>
VarId pair_discrepancy(Tape<T>& tape, VarId a, VarId b, Discrepancy mode) {
  check_same_shape(tape.val(a), tape.val(b), "pair_discrepancy");
  VarId diff = tape.sub(a, b);
  if (mode == Discrepancy::kL2) return tape.sum_all(tape.absval(diff));
  return tape.sum_all(tape.square(diff));
}

}  // namespace reldist
