#pragma once

#include <cmath>
#include <cstdint>

#include "aggre/errors.hpp"
#include "aggre/model.hpp"

namespace aggre {

template <class Scalar>
struct AdamState {
  EmbeddingTable<Scalar> m_entities, v_entities;
  EmbeddingTable<Scalar> m_relations, v_relations;
  std::int64_t step = 0;

  static AdamState like(const EmbeddingState<Scalar>& params) {
    AdamState s;
    s.m_entities = EmbeddingTable<Scalar>(params.entities.rows, params.entities.dim);
    s.v_entities = EmbeddingTable<Scalar>(params.entities.rows, params.entities.dim);
    s.m_relations = EmbeddingTable<Scalar>(params.relations.rows, params.relations.dim);
    s.v_relations = EmbeddingTable<Scalar>(params.relations.rows, params.relations.dim);
    return s;
  }
};

struct AdamConfig {
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Lazy rows: rows with all-zero gradient are skipped entirely, so their
  // moments are not decayed. Dense mode decays every row each step.
  bool sparse = true;
};

namespace detail {

template <class Scalar>
void adam_rows(std::span<const std::int32_t> rows, const EmbeddingTable<Scalar>& grad,
               EmbeddingTable<Scalar>& m, EmbeddingTable<Scalar>& v,
               EmbeddingTable<Scalar>& param, const AdamConfig& cfg, double corr1,
               double corr2) {
  const std::int64_t dim = param.dim;
  const Scalar b1 = static_cast<Scalar>(cfg.beta1);
  const Scalar b2 = static_cast<Scalar>(cfg.beta2);
#pragma omp parallel for schedule(static)
  for (std::int64_t idx = 0; idx < static_cast<std::int64_t>(rows.size()); ++idx) {
    const std::int64_t r = rows[idx];
    const Scalar* g = grad.row(r).data();
    Scalar* mr = m.row(r).data();
    Scalar* vr = v.row(r).data();
    Scalar* pr = param.row(r).data();
    for (std::int64_t k = 0; k < dim; ++k) {
      mr[k] = b1 * mr[k] + (Scalar(1) - b1) * g[k];
      vr[k] = b2 * vr[k] + (Scalar(1) - b2) * g[k] * g[k];
      const double mhat = static_cast<double>(mr[k]) / corr1;
      const double vhat = static_cast<double>(vr[k]) / corr2;
      pr[k] = static_cast<Scalar>(static_cast<double>(pr[k]) -
                                  cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
      if (!std::isfinite(static_cast<double>(pr[k])))
        throw NumericError("non-finite parameter after adam update, row " + std::to_string(r));
    }
  }
}

inline std::vector<std::int32_t> all_rows(std::int64_t n) {
  std::vector<std::int32_t> rows(n);
  for (std::int64_t i = 0; i < n; ++i) rows[i] = static_cast<std::int32_t>(i);
  return rows;
}

}  // namespace detail

// One optimization step with bias correction. The step counter advances once
// per call regardless of how many rows move.
template <class Scalar>
void adam_step(EmbeddingState<Scalar>& params, const Gradients<Scalar>& grads,
               AdamState<Scalar>& state, const AdamConfig& cfg) {
  contract(params.entities.rows == grads.entities.rows &&
               params.relations.rows == grads.relations.rows &&
               params.entities.dim == grads.entities.dim &&
               params.relations.dim == grads.relations.dim,
           "adam_step: shape mismatch");
  state.step += 1;
  const double corr1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double corr2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  if (cfg.sparse) {
    detail::adam_rows<Scalar>(grads.touched_entities, grads.entities, state.m_entities,
                              state.v_entities, params.entities, cfg, corr1, corr2);
    detail::adam_rows<Scalar>(grads.touched_relations, grads.relations, state.m_relations,
                              state.v_relations, params.relations, cfg, corr1, corr2);
  } else {
    const auto ent_rows = detail::all_rows(params.entities.rows);
    const auto rel_rows = detail::all_rows(params.relations.rows);
    detail::adam_rows<Scalar>(ent_rows, grads.entities, state.m_entities, state.v_entities,
                              params.entities, cfg, corr1, corr2);
    detail::adam_rows<Scalar>(rel_rows, grads.relations, state.m_relations, state.v_relations,
                              params.relations, cfg, corr1, corr2);
  }
}

}  // namespace aggre
