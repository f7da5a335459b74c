#pragma once

#include <string>
#include <vector>

#include "reldist/discrepancy.hpp"
#include "reldist/nn.hpp"
#include "reldist/tape.hpp"

namespace reldist {

struct GloReConfig {
  int64_t c_in = 0;
  int64_t c_state = 0;   // C1, graph feature channels
  int64_t n_nodes = 16;  // C2, graph node count
  bool residual = true;

  static int64_t default_state_channels(int64_t c_in) {
    int64_t c1 = (c_in + 3) / 4;
    if (c1 < 4) c1 = 4;
    if (c1 > c_in) c1 = c_in;
    return c1;
  }

  static GloReConfig defaults(int64_t c_in, int64_t n_nodes = 16, bool residual = true) {
    return GloReConfig{c_in, default_state_channels(c_in), n_nodes, residual};
  }
};

/// Graph-convolution unit over a feature map: embed coordinate features into
/// a small fully connected graph, reason over it, and project back.
/// The unit preserves the input shape.
template <typename T>
struct GloRe {
  GloReConfig cfg;
  Conv2d<T> reducer;        // 1x1, C -> C1
  Conv2d<T> projector_gen;  // 1x1, C -> C2; output flattened to the projector
  int adjacency = -1;       // (C1, C1)
  int state_update = -1;    // (C2, C2)
  Conv2d<T> expander;       // 1x1, C1 -> C

  GloRe() = default;
  GloRe(ParamStore<T>& store, const std::string& name, GloReConfig config, Rng& rng)
      : cfg(config) {
    if (cfg.c_state > cfg.c_in || cfg.c_state < 1 || cfg.n_nodes < 1)
      throw ValidationError("glore config: need 1 <= c_state <= c_in and n_nodes >= 1, got c_in=" +
                            std::to_string(cfg.c_in) + " c_state=" + std::to_string(cfg.c_state) +
                            " n_nodes=" + std::to_string(cfg.n_nodes));
    reducer = Conv2d<T>(store, name + ".reducer", cfg.c_in, cfg.c_state, 1, 1, rng);
    projector_gen = Conv2d<T>(store, name + ".projector_gen", cfg.c_in, cfg.n_nodes, 1, 1, rng);
    adjacency = store.add(name + ".adjacency",
                          randn_tensor<T>({cfg.c_state, cfg.c_state}, rng, 0.01));
    Tensor<T> w({cfg.n_nodes, cfg.n_nodes});
    for (int64_t i = 0; i < cfg.n_nodes; ++i)
      for (int64_t j = 0; j < cfg.n_nodes; ++j)
        w.at2(i, j) = static_cast<T>((i == j ? 1.0 : 0.0) + rng.normal(0.0, 0.01));
    state_update = store.add(name + ".state_update", std::move(w));
    expander = Conv2d<T>(store, name + ".expander", cfg.c_state, cfg.c_in, 1, 1, rng);
  }
};

/// V = X_bar B^T per batch item. x_reduced: (B, C1, H, W); projector:
/// (B, C2, H*W). Returns graph node features (B, C1, C2).
template <typename T>
VarId graph_project(Tape<T>& tape, VarId x_reduced, VarId projector) {
  const auto& xs = tape.val(x_reduced).shape;
  const auto& ps = tape.val(projector).shape;
  if (xs.size() != 4 || ps.size() != 3 || ps[0] != xs[0] || ps[2] != xs[2] * xs[3])
    throw DimensionError("graph_project: x " + tape.val(x_reduced).shape_str() + " vs projector " +
                         tape.val(projector).shape_str());
  VarId flat = tape.reshape(x_reduced, {xs[0], xs[1], xs[2] * xs[3]});
  return tape.bmm(flat, projector, false, true);
}

/// Z = ((I - A) V) W per batch item. nodes: (B, C1, C2).
template <typename T>
VarId graph_reason(Tape<T>& tape, VarId nodes, VarId adjacency, VarId state_update) {
  const auto& ns = tape.val(nodes).shape;
  const auto& as = tape.val(adjacency).shape;
  const auto& ws = tape.val(state_update).shape;
  if (as.size() != 2 || as[0] != as[1])
    throw DimensionError("graph_reason: adjacency must be square, got " +
                         tape.val(adjacency).shape_str());
  if (ws.size() != 2 || ws[0] != ws[1])
    throw DimensionError("graph_reason: state_update must be square, got " +
                         tape.val(state_update).shape_str());
  if (ns.size() != 3 || ns[1] != as[0] || ns[2] != ws[0])
    throw DimensionError("graph_reason: nodes " + tape.val(nodes).shape_str() + " vs A " +
                         tape.val(adjacency).shape_str() + ", W " +
                         tape.val(state_update).shape_str());
  int64_t c1 = as[0];
  Tensor<T> eye({c1, c1});
  for (int64_t i = 0; i < c1; ++i) eye.at2(i, i) = T(1);
  VarId i_minus_a = tape.sub(tape.constant(std::move(eye)), adjacency);
  VarId z = tape.bmm(i_minus_a, nodes);
  return tape.bmm(z, state_update);
}

/// F = Z B per batch item: (B, C1, C2) x (B, C2, HW) -> (B, C1, HW).
template <typename T>
VarId graph_reproject(Tape<T>& tape, VarId z, VarId projector) {
  const auto& zs = tape.val(z).shape;
  const auto& ps = tape.val(projector).shape;
  if (zs.size() != 3 || ps.size() != 3 || zs[0] != ps[0] || zs[2] != ps[1])
    throw DimensionError("graph_reproject: z " + tape.val(z).shape_str() + " vs projector " +
                         tape.val(projector).shape_str());
  return tape.bmm(z, projector);
}

/// Full unit: reduce, embed, reason, reproject, expand, optional residual.
template <typename T>
VarId glore_forward(Tape<T>& tape, ParamStore<T>& store, const GloRe<T>& g, VarId x) {
  const auto& xs = tape.val(x).shape;
  if (xs.size() != 4 || xs[1] != g.cfg.c_in)
    throw DimensionError("glore_forward: input " + tape.val(x).shape_str() + " vs c_in " +
                         std::to_string(g.cfg.c_in));
  int64_t B = xs[0], H = xs[2], W = xs[3];
  VarId reduced = g.reducer.forward(tape, store, x);
  VarId proj_map = g.projector_gen.forward(tape, store, x);
  VarId projector = tape.reshape(proj_map, {B, g.cfg.n_nodes, H * W});
  VarId nodes = graph_project(tape, reduced, projector);
  VarId z = graph_reason(tape, nodes, tape.param(store, g.adjacency),
                         tape.param(store, g.state_update));
  VarId flat = graph_reproject(tape, z, projector);
  VarId spatial = tape.reshape(flat, {B, g.cfg.c_state, H, W});
  VarId expanded = g.expander.forward(tape, store, spatial);
  return g.cfg.residual ? tape.add(x, expanded) : expanded;
}

/// Per-level relation distillation: mean over levels of
/// d(glore_t(t_i), adapter(glore_s(s_i))). All GloRe units and adapters
/// live in aux_store; the feature maps are already on the tape.
template <typename T>
VarId pixel_relation_loss(Tape<T>& tape, ParamStore<T>& aux_store,
                          const std::vector<VarId>& teacher_maps,
                          const std::vector<VarId>& student_maps,
                          const std::vector<GloRe<T>>& teacher_glores,
                          const std::vector<GloRe<T>>& student_glores,
                          const std::vector<Conv2d<T>>& adapters, Discrepancy mode) {
  size_t k = teacher_maps.size();
  if (k == 0) throw ValidationError("pixel_relation_loss: empty feature list");
  if (student_maps.size() != k || teacher_glores.size() != k || student_glores.size() != k ||
      adapters.size() != k)
    throw DimensionError("pixel_relation_loss: list lengths t=" + std::to_string(k) + " s=" +
                         std::to_string(student_maps.size()) + " gt=" +
                         std::to_string(teacher_glores.size()) + " gs=" +
                         std::to_string(student_glores.size()) + " a=" +
                         std::to_string(adapters.size()));
  VarId total;
  for (size_t i = 0; i < k; ++i) {
    const auto& ts = tape.val(teacher_maps[i]).shape;
    const auto& ss = tape.val(student_maps[i]).shape;
    if (ts[0] != ss[0] || ts[2] != ss[2] || ts[3] != ss[3])
      throw DimensionError("pixel_relation_loss: level " + std::to_string(i) + " teacher " +
                           tape.val(teacher_maps[i]).shape_str() + " vs student " +
                           tape.val(student_maps[i]).shape_str());
    VarId pt = glore_forward(tape, aux_store, teacher_glores[i], teacher_maps[i]);
    VarId ps = glore_forward(tape, aux_store, student_glores[i], student_maps[i]);
    VarId adapted = adapters[i].forward(tape, aux_store, ps);
    VarId term = map_discrepancy(tape, pt, adapted, mode);
    total = total.valid() ? tape.add(total, term) : term;
  }
  return tape.scale(total, T(1) / static_cast<T>(k));
}

}  // namespace reldist
