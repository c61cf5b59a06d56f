#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "aggre/errors.hpp"
#include "aggre/kernels.hpp"
#include "aggre/kg.hpp"
#include "aggre/rng.hpp"

namespace aggre {

template <class Scalar>
struct EmbeddingTable {
  std::int64_t rows = 0;
  std::int64_t dim = 0;
  std::vector<Scalar> data;

  EmbeddingTable() = default;
  EmbeddingTable(std::int64_t rows_, std::int64_t dim_)
      : rows(rows_), dim(dim_), data(static_cast<std::size_t>(rows_ * dim_), Scalar(0)) {}

  std::span<Scalar> row(std::int64_t i) {
    return std::span<Scalar>(data).subspan(i * dim, dim);
  }
  std::span<const Scalar> row(std::int64_t i) const {
    return std::span<const Scalar>(data).subspan(i * dim, dim);
  }
  void zero() { std::fill(data.begin(), data.end(), Scalar(0)); }
};

template <class Scalar>
struct EmbeddingState {
  EmbeddingTable<Scalar> entities;
  EmbeddingTable<Scalar> relations;
  std::int64_t dim() const { return entities.dim; }
};

// Uniform in [-sqrt(6/d), +sqrt(6/d)] so initial triple scores are O(1).
// Entity rows are filled first, then relation rows; the consumption order is
// part of the reproducibility contract.
template <class Scalar>
EmbeddingState<Scalar> init_state(std::int64_t num_entities, std::int64_t num_relations,
                                  std::int64_t dim, Rng& rng) {
  contract(dim > 0 && num_entities > 0 && num_relations > 0, "init_state: bad sizes");
  EmbeddingState<Scalar> state;
  state.entities = EmbeddingTable<Scalar>(num_entities, dim);
  state.relations = EmbeddingTable<Scalar>(num_relations, dim);
  const double bound = std::sqrt(6.0 / static_cast<double>(dim));
  for (auto& v : state.entities.data) v = static_cast<Scalar>(rng.uniform(-bound, bound));
  for (auto& v : state.relations.data) v = static_cast<Scalar>(rng.uniform(-bound, bound));
  return state;
}

// Activations and attention weights of every aggregation layer, kept for the
// backward pass. alpha/beta hold one weight per context pair (zero for pairs
// masked out of the call); scores hold the per-context-triple logits shared
// by that triple's pairs.
template <class Scalar>
struct LayerTrace {
  std::int32_t num_layers = 0;
  std::vector<EmbeddingTable<Scalar>> entity_act;    // num_layers + 1
  std::vector<EmbeddingTable<Scalar>> relation_act;  // num_layers + 1
  std::vector<std::vector<Scalar>> alpha;            // per layer, per entity pair
  std::vector<std::vector<Scalar>> beta;             // per layer, per relation pair
  std::vector<std::vector<Scalar>> scores;           // per layer, per ctx triple

  const EmbeddingTable<Scalar>& final_entities() const { return entity_act[num_layers]; }
  const EmbeddingTable<Scalar>& final_relations() const { return relation_act[num_layers]; }
};

struct AggregateOptions {
  // Global triple ids whose context pairs are dropped before the softmax.
  std::span<const std::int32_t> exclude_triples;
  // When > 0, at most this many live pairs per segment (uniform subsample).
  std::int64_t neighbor_cap = 0;
  Rng* rng = nullptr;  // required when neighbor_cap > 0
};

namespace detail {

inline void cap_segments(const std::vector<std::int64_t>& offsets, std::int64_t cap,
                         Rng& rng, std::vector<std::uint8_t>& live) {
  std::vector<std::int64_t> pool;
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    pool.clear();
    for (std::int64_t p = offsets[s]; p < offsets[s + 1]; ++p)
      if (live[p]) pool.push_back(p);
    const std::int64_t n = static_cast<std::int64_t>(pool.size());
    if (n <= cap) continue;
    // partial Fisher-Yates; the first `cap` survive
    for (std::int64_t i = 0; i < cap; ++i) {
      std::int64_t j = i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n - i)));
      std::swap(pool[i], pool[j]);
    }
    for (std::int64_t i = cap; i < n; ++i) live[pool[i]] = 0;
  }
}

}  // namespace detail

// Runs num_layers rounds of context aggregation:
//   e[l+1][i] = e[l][i] + sum_{(r_j,e_k) in C_i} alpha_p * (r[l][j] . e[l][k])
//   r[l+1][i] = r[l][i] + sum_{(e_j,e_k) in C_i} beta_q  * (e[l][j] . e[l][k])
// where alpha/beta are per-segment softmaxes of the layer-l triple scores.
// The two mirrored pairs of one triple share the same score (the score is
// symmetric in its entity arguments), so scores are computed once per
// context triple and gathered into segments.
//
// Every output row is reduced left-to-right by a single owner, so results do
// not depend on the number of threads.
template <class Scalar>
LayerTrace<Scalar> aggregate(const EmbeddingState<Scalar>& state, const ContextIndex& ctx,
                             std::int32_t num_layers, const AggregateOptions& opts = {}) {
  const std::int64_t num_entities = state.entities.rows;
  const std::int64_t num_relations = state.relations.rows;
  const std::int64_t dim = state.entities.dim;
  contract(num_layers >= 0, "aggregate: negative layer count");
  contract(state.relations.dim == dim, "aggregate: table dim mismatch");
  contract(static_cast<std::int64_t>(ctx.ent_offsets.size()) == num_entities + 1 &&
               static_cast<std::int64_t>(ctx.rel_offsets.size()) == num_relations + 1,
           "aggregate: context index does not match state shape");
  contract(opts.neighbor_cap == 0 || opts.rng != nullptr,
           "aggregate: neighbor_cap requires an rng");

  const std::int64_t num_ent_pairs = ctx.num_entity_pairs();
  const std::int64_t num_rel_pairs = ctx.num_relation_pairs();
  const std::int64_t num_ctx = ctx.num_ctx_triples();

  // Per-pair live masks; empty vectors mean everything live.
  std::vector<std::uint8_t> ent_live, rel_live;
  if (!opts.exclude_triples.empty() || opts.neighbor_cap > 0) {
    ent_live.assign(num_ent_pairs, 1);
    rel_live.assign(num_rel_pairs, 1);
    for (std::int32_t gid : opts.exclude_triples) {
      contract(gid >= 0 && gid < static_cast<std::int32_t>(ctx.triple_to_ctx.size()),
               "aggregate: excluded triple id out of range");
      std::int32_t c = ctx.triple_to_ctx[gid];
      if (c < 0) continue;  // not a context triple
      ent_live[ctx.head_pair[c]] = 0;
      ent_live[ctx.tail_pair[c]] = 0;
      rel_live[ctx.rel_pair[c]] = 0;
    }
    if (opts.neighbor_cap > 0) {
      detail::cap_segments(ctx.ent_offsets, opts.neighbor_cap, *opts.rng, ent_live);
      detail::cap_segments(ctx.rel_offsets, opts.neighbor_cap, *opts.rng, rel_live);
    }
  }

  LayerTrace<Scalar> trace;
  trace.num_layers = num_layers;
  trace.entity_act.reserve(num_layers + 1);
  trace.relation_act.reserve(num_layers + 1);
  trace.entity_act.push_back(state.entities);
  trace.relation_act.push_back(state.relations);

  for (std::int32_t l = 0; l < num_layers; ++l) {
    const EmbeddingTable<Scalar>& ent = trace.entity_act[l];
    const EmbeddingTable<Scalar>& rel = trace.relation_act[l];

    // Shared per-triple logits over layer-l activations.
    std::vector<Scalar>& scores = trace.scores.emplace_back(num_ctx);
#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < num_ctx; ++c) {
      scores[c] = distmult_score(ent.row(ctx.ctx_head[c]), rel.row(ctx.ctx_rel[c]),
                                 ent.row(ctx.ctx_tail[c]));
    }

    std::vector<Scalar>& alpha = trace.alpha.emplace_back(num_ent_pairs, Scalar(0));
    std::vector<Scalar>& beta = trace.beta.emplace_back(num_rel_pairs, Scalar(0));
    EmbeddingTable<Scalar> ent_next = ent;
    EmbeddingTable<Scalar> rel_next = rel;

    // Entity side.
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < num_entities; ++i) {
      const std::int64_t b = ctx.ent_offsets[i], e = ctx.ent_offsets[i + 1];
      if (b == e) continue;
      Scalar* a = alpha.data() + b;
      for (std::int64_t p = b; p < e; ++p) a[p - b] = scores[ctx.ent_src[p]];
      softmax_span(std::span<const Scalar>(a, e - b), std::span<Scalar>(a, e - b),
                   ent_live.empty() ? nullptr : ent_live.data() + b);
      Scalar* out = ent_next.row(i).data();
      for (std::int64_t p = b; p < e; ++p) {
        const Scalar w = a[p - b];
        if (w == Scalar(0)) continue;
        const Scalar* rj = rel.row(ctx.ent_rel[p]).data();
        const Scalar* ek = ent.row(ctx.ent_nbr[p]).data();
        for (std::int64_t m = 0; m < dim; ++m) out[m] += w * rj[m] * ek[m];
      }
    }

    // Relation side (reads layer-l entity activations, not the updated ones).
#pragma omp parallel for schedule(static)
    for (std::int64_t j = 0; j < num_relations; ++j) {
      const std::int64_t b = ctx.rel_offsets[j], e = ctx.rel_offsets[j + 1];
      if (b == e) continue;
      Scalar* w = beta.data() + b;
      for (std::int64_t q = b; q < e; ++q) w[q - b] = scores[ctx.rel_src[q]];
      softmax_span(std::span<const Scalar>(w, e - b), std::span<Scalar>(w, e - b),
                   rel_live.empty() ? nullptr : rel_live.data() + b);
      Scalar* out = rel_next.row(j).data();
      for (std::int64_t q = b; q < e; ++q) {
        const Scalar bw = w[q - b];
        if (bw == Scalar(0)) continue;
        const Scalar* eh = ent.row(ctx.rel_head[q]).data();
        const Scalar* et = ent.row(ctx.rel_tail[q]).data();
        for (std::int64_t m = 0; m < dim; ++m) out[m] += bw * eh[m] * et[m];
      }
    }

    trace.entity_act.push_back(std::move(ent_next));
    trace.relation_act.push_back(std::move(rel_next));
  }

  return trace;
}

// Scores of every relation for the pair (head, tail), from the final layer.
template <class Scalar>
void score_all_relations(const LayerTrace<Scalar>& trace, std::int32_t head,
                         std::int32_t tail, std::span<Scalar> out) {
  const EmbeddingTable<Scalar>& ent = trace.final_entities();
  const EmbeddingTable<Scalar>& rel = trace.final_relations();
  contract(head >= 0 && head < ent.rows && tail >= 0 && tail < ent.rows,
           "score_all_relations: entity id out of range");
  contract(static_cast<std::int64_t>(out.size()) == rel.rows,
           "score_all_relations: output size mismatch");
  const std::int64_t dim = ent.dim;
  const Scalar* eh = ent.row(head).data();
  const Scalar* et = ent.row(tail).data();
  for (std::int64_t j = 0; j < rel.rows; ++j) {
    const Scalar* rj = rel.row(j).data();
    Scalar s = 0;
    for (std::int64_t m = 0; m < dim; ++m) s += eh[m] * rj[m] * et[m];
    out[j] = s;
  }
}

// |queries| x |R| score matrix, row-major.
template <class Scalar>
std::vector<Scalar> relation_logits(
    const LayerTrace<Scalar>& trace,
    std::span<const std::pair<std::int32_t, std::int32_t>> queries) {
  const std::int64_t num_relations = trace.final_relations().rows;
  std::vector<Scalar> out(queries.size() * num_relations);
#pragma omp parallel for schedule(static)
  for (std::int64_t q = 0; q < static_cast<std::int64_t>(queries.size()); ++q) {
    score_all_relations(trace, queries[q].first, queries[q].second,
                        std::span<Scalar>(out).subspan(q * num_relations, num_relations));
  }
  return out;
}

template <class Scalar>
struct Gradients {
  EmbeddingTable<Scalar> entities;
  EmbeddingTable<Scalar> relations;
  // Rows holding at least one nonzero entry, ascending.
  std::vector<std::int32_t> touched_entities;
  std::vector<std::int32_t> touched_relations;
};

struct LossOptions {
  std::int32_t num_layers = 0;
  double l2_lambda = 0.0;
  // Drop each batch triple's own context pairs before aggregating, removing
  // the pairs that literally encode the answer relation.
  bool exclude_self = false;
  std::int64_t neighbor_cap = 0;
  Rng* rng = nullptr;
};

template <class Scalar>
struct LossResult {
  Scalar loss = 0;  // ce + l2
  Scalar ce = 0;    // batch-mean cross-entropy over relations
  Scalar l2 = 0;    // lambda * sum of squared entries of touched rows
  Gradients<Scalar> grads;
};

namespace detail {

template <class Scalar>
bool row_nonzero(std::span<const Scalar> r) {
  for (Scalar v : r)
    if (v != Scalar(0)) return true;
  return false;
}

// One aggregation layer backward, gather form. Reads gradients w.r.t. the
// layer-(l+1) activations plus the cached trace; writes gradients w.r.t. the
// layer-l activations. Each output row is owned by one loop iteration, so the
// pass is race-free and thread-count independent.
template <class Scalar>
void layer_backward(const ContextIndex& ctx, const LayerTrace<Scalar>& trace, std::int32_t l,
                    const EmbeddingTable<Scalar>& up_e, const EmbeddingTable<Scalar>& up_r,
                    EmbeddingTable<Scalar>& out_e, EmbeddingTable<Scalar>& out_r,
                    std::vector<Scalar>& dx, std::vector<Scalar>& dy,
                    std::vector<Scalar>& dscore) {
  const EmbeddingTable<Scalar>& ent = trace.entity_act[l];
  const EmbeddingTable<Scalar>& rel = trace.relation_act[l];
  const std::vector<Scalar>& alpha = trace.alpha[l];
  const std::vector<Scalar>& beta = trace.beta[l];
  const std::int64_t num_entities = ent.rows;
  const std::int64_t num_relations = rel.rows;
  const std::int64_t dim = ent.dim;

  dx.assign(ctx.num_entity_pairs(), Scalar(0));
  dy.assign(ctx.num_relation_pairs(), Scalar(0));
  dscore.assign(ctx.num_ctx_triples(), Scalar(0));

  // Softmax backward per entity segment: dx_p = alpha_p * (dalpha_p - S)
  // with dalpha_p = <up_e[i], message_p>. Masked pairs have alpha == 0 and
  // come out as exact zeros.
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < num_entities; ++i) {
    const std::int64_t b = ctx.ent_offsets[i], e = ctx.ent_offsets[i + 1];
    if (b == e) continue;
    const Scalar* up = up_e.row(i).data();
    if (!row_nonzero(up_e.row(i))) continue;
    Scalar s_dot = 0;
    for (std::int64_t p = b; p < e; ++p) {
      if (alpha[p] == Scalar(0)) continue;
      const Scalar* rj = rel.row(ctx.ent_rel[p]).data();
      const Scalar* ek = ent.row(ctx.ent_nbr[p]).data();
      Scalar dalpha = 0;
      for (std::int64_t m = 0; m < dim; ++m) dalpha += up[m] * rj[m] * ek[m];
      dx[p] = dalpha;  // temporarily holds dalpha
      s_dot += alpha[p] * dalpha;
    }
    for (std::int64_t p = b; p < e; ++p) dx[p] = alpha[p] * (dx[p] - s_dot);
  }

  // Same for relation segments.
#pragma omp parallel for schedule(static)
  for (std::int64_t j = 0; j < num_relations; ++j) {
    const std::int64_t b = ctx.rel_offsets[j], e = ctx.rel_offsets[j + 1];
    if (b == e) continue;
    const Scalar* up = up_r.row(j).data();
    if (!row_nonzero(up_r.row(j))) continue;
    Scalar s_dot = 0;
    for (std::int64_t q = b; q < e; ++q) {
      if (beta[q] == Scalar(0)) continue;
      const Scalar* eh = ent.row(ctx.rel_head[q]).data();
      const Scalar* et = ent.row(ctx.rel_tail[q]).data();
      Scalar dbeta = 0;
      for (std::int64_t m = 0; m < dim; ++m) dbeta += up[m] * eh[m] * et[m];
      dy[q] = dbeta;
      s_dot += beta[q] * dbeta;
    }
    for (std::int64_t q = b; q < e; ++q) dy[q] = beta[q] * (dy[q] - s_dot);
  }

  // Each context triple's score is used by its (one or two) entity pairs and
  // its relation pair; fold those logit gradients into one per-triple factor.
#pragma omp parallel for schedule(static)
  for (std::int64_t c = 0; c < ctx.num_ctx_triples(); ++c) {
    Scalar g = dx[ctx.head_pair[c]] + dy[ctx.rel_pair[c]];
    if (ctx.tail_pair[c] != ctx.head_pair[c]) g += dx[ctx.tail_pair[c]];
    dscore[c] = g;
  }

  // Entity rows: residual + (as neighbor in the twin pair's segment) + (as
  // endpoint of the relation-side messages) + (score uses). Self-loop pairs
  // double the last two, matching d(e.e)/de = 2e.
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < num_entities; ++i) {
    Scalar* out = out_e.row(i).data();
    const Scalar* up = up_e.row(i).data();
    for (std::int64_t m = 0; m < dim; ++m) out[m] = up[m];
    for (std::int64_t p = ctx.ent_offsets[i]; p < ctx.ent_offsets[i + 1]; ++p) {
      const std::int32_t c = ctx.ent_src[p];
      const std::int32_t j = ctx.ent_rel[p];
      const std::int32_t k = ctx.ent_nbr[p];
      const std::int32_t twin = ctx.ent_twin[p];
      const Scalar a_twin = alpha[twin];
      const Scalar b_rel = beta[ctx.rel_pair[c]];
      const Scalar ds = dscore[c];
      const Scalar self_coef = (k == static_cast<std::int32_t>(i)) ? Scalar(2) : Scalar(1);
      const Scalar* up_k = up_e.row(k).data();
      const Scalar* up_rj = up_r.row(j).data();
      const Scalar* rj = rel.row(j).data();
      const Scalar* ek = ent.row(k).data();
      if (a_twin == Scalar(0) && b_rel == Scalar(0) && ds == Scalar(0)) continue;
      for (std::int64_t m = 0; m < dim; ++m) {
        out[m] += a_twin * up_k[m] * rj[m] +
                  self_coef * (b_rel * up_rj[m] * ek[m] + ds * rj[m] * ek[m]);
      }
    }
  }

  // Relation rows: residual + (as factor of entity-side messages, one term
  // per live mirrored pair) + (score uses).
#pragma omp parallel for schedule(static)
  for (std::int64_t j = 0; j < num_relations; ++j) {
    Scalar* out = out_r.row(j).data();
    const Scalar* up = up_r.row(j).data();
    for (std::int64_t m = 0; m < dim; ++m) out[m] = up[m];
    for (std::int64_t q = ctx.rel_offsets[j]; q < ctx.rel_offsets[j + 1]; ++q) {
      const std::int32_t c = ctx.rel_src[q];
      const std::int32_t h = ctx.rel_head[q];
      const std::int32_t t = ctx.rel_tail[q];
      const std::int32_t hp = ctx.head_pair[c];
      const std::int32_t tp = ctx.tail_pair[c];
      const Scalar ds = dscore[c];
      const Scalar a_h = alpha[hp];
      const Scalar a_t = (tp != hp) ? alpha[tp] : Scalar(0);
      if (ds == Scalar(0) && a_h == Scalar(0) && a_t == Scalar(0)) continue;
      const Scalar* eh = ent.row(h).data();
      const Scalar* et = ent.row(t).data();
      const Scalar* up_h = up_e.row(h).data();
      const Scalar* up_t = up_e.row(t).data();
      for (std::int64_t m = 0; m < dim; ++m) {
        Scalar g = ds * eh[m] * et[m] + a_h * up_h[m] * et[m];
        if (tp != hp) g += a_t * up_t[m] * eh[m];
        out[m] += g;
      }
    }
  }
}

}  // namespace detail

// Batch-mean softmax cross-entropy over relations (the final-layer scores),
// plus an L2 penalty over the rows the batch actually reaches, with exact
// reverse-mode gradients for both embedding tables.
template <class Scalar>
LossResult<Scalar> loss_and_grad(const EmbeddingState<Scalar>& state, const ContextIndex& ctx,
                                 const KnowledgeGraph& kg,
                                 std::span<const std::int32_t> batch,
                                 const LossOptions& opts) {
  contract(!batch.empty(), "loss_and_grad: empty batch");
  for (std::int32_t id : batch) {
    contract(id >= 0 && id < static_cast<std::int32_t>(kg.triples.size()),
             "loss_and_grad: batch triple id out of range");
    contract(kg.splits[id] == Split::train, "loss_and_grad: batch triple not in train split");
  }

  const std::int64_t num_relations = state.relations.rows;
  const std::int64_t dim = state.dim();
  const std::int64_t batch_size = static_cast<std::int64_t>(batch.size());

  AggregateOptions agg;
  if (opts.exclude_self) agg.exclude_triples = batch;
  agg.neighbor_cap = opts.neighbor_cap;
  agg.rng = opts.rng;
  LayerTrace<Scalar> trace = aggregate(state, ctx, opts.num_layers, agg);

  const EmbeddingTable<Scalar>& ent_L = trace.final_entities();
  const EmbeddingTable<Scalar>& rel_L = trace.final_relations();

  // Head: z[b][j] = score(e_h, r_j, e_t); dz = (softmax(z) - onehot) / B.
  std::vector<Scalar> dz(batch_size * num_relations);
  std::vector<Scalar> pair_prod(batch_size * dim);  // e_h . e_t per batch item
  std::vector<double> item_ce(batch_size);
#pragma omp parallel for schedule(static)
  for (std::int64_t b = 0; b < batch_size; ++b) {
    const Triple& t = kg.triples[batch[b]];
    Scalar* w = pair_prod.data() + b * dim;
    const Scalar* eh = ent_L.row(t.head).data();
    const Scalar* et = ent_L.row(t.tail).data();
    for (std::int64_t m = 0; m < dim; ++m) w[m] = eh[m] * et[m];

    Scalar* z = dz.data() + b * num_relations;
    for (std::int64_t j = 0; j < num_relations; ++j) {
      const Scalar* rj = rel_L.row(j).data();
      Scalar s = 0;
      for (std::int64_t m = 0; m < dim; ++m) s += w[m] * rj[m];
      z[j] = s;
    }
    Scalar hi = z[0];
    for (std::int64_t j = 1; j < num_relations; ++j) hi = std::max(hi, z[j]);
    Scalar sum = 0;
    for (std::int64_t j = 0; j < num_relations; ++j) sum += std::exp(z[j] - hi);
    const Scalar lse = hi + std::log(sum);
    item_ce[b] = static_cast<double>(lse - z[t.rel]);
    for (std::int64_t j = 0; j < num_relations; ++j) {
      Scalar p = std::exp(z[j] - lse);
      if (j == t.rel) p -= Scalar(1);
      z[j] = p / static_cast<Scalar>(batch_size);  // dz now
    }
  }
  double ce = 0;
  for (std::int64_t b = 0; b < batch_size; ++b) ce += item_ce[b];
  ce /= static_cast<double>(batch_size);
  if (!std::isfinite(ce))
    throw NumericError("non-finite cross-entropy; first batch triple id " +
                       std::to_string(batch[0]));

  const std::int64_t num_entities = state.entities.rows;
  EmbeddingTable<Scalar> ge_a(num_entities, dim), ge_b(num_entities, dim);
  EmbeddingTable<Scalar> gr_a(num_relations, dim), gr_b(num_relations, dim);
  EmbeddingTable<Scalar>* up_e = &ge_a;
  EmbeddingTable<Scalar>* up_r = &gr_a;
  EmbeddingTable<Scalar>* out_e = &ge_b;
  EmbeddingTable<Scalar>* out_r = &gr_b;

  // dL/dr_j = sum_b dz[b][j] * (e_h . e_t)
#pragma omp parallel for schedule(static)
  for (std::int64_t j = 0; j < num_relations; ++j) {
    Scalar* g = up_r->row(j).data();
    for (std::int64_t b = 0; b < batch_size; ++b) {
      const Scalar d = dz[b * num_relations + j];
      const Scalar* w = pair_prod.data() + b * dim;
      for (std::int64_t m = 0; m < dim; ++m) g[m] += d * w[m];
    }
  }
  // dL/de_h = u . e_t and dL/de_t = u . e_h with u = sum_j dz_j r_j;
  // sequential because batch items may share entities.
  {
    std::vector<Scalar> u(dim);
    for (std::int64_t b = 0; b < batch_size; ++b) {
      const Triple& t = kg.triples[batch[b]];
      std::fill(u.begin(), u.end(), Scalar(0));
      const Scalar* z = dz.data() + b * num_relations;
      for (std::int64_t j = 0; j < num_relations; ++j) {
        const Scalar* rj = rel_L.row(j).data();
        for (std::int64_t m = 0; m < dim; ++m) u[m] += z[j] * rj[m];
      }
      Scalar* gh = up_e->row(t.head).data();
      Scalar* gt = up_e->row(t.tail).data();
      const Scalar* eh = ent_L.row(t.head).data();
      const Scalar* et = ent_L.row(t.tail).data();
      for (std::int64_t m = 0; m < dim; ++m) {
        gh[m] += u[m] * et[m];
        gt[m] += u[m] * eh[m];
      }
    }
  }

  // Walk the layers back down to the raw tables.
  std::vector<Scalar> dx, dy, dscore;
  for (std::int32_t l = trace.num_layers - 1; l >= 0; --l) {
    detail::layer_backward(ctx, trace, l, *up_e, *up_r, *out_e, *out_r, dx, dy, dscore);
    std::swap(up_e, out_e);
    std::swap(up_r, out_r);
  }

  LossResult<Scalar> result;
  result.grads.entities = std::move(*up_e);
  result.grads.relations = std::move(*up_r);

  // L2 over touched rows only; untouched rows keep exactly zero gradient.
  const Scalar lambda = static_cast<Scalar>(opts.l2_lambda);
  double l2 = 0;
  for (std::int64_t i = 0; i < num_entities; ++i) {
    auto g = result.grads.entities.row(i);
    if (!detail::row_nonzero(std::span<const Scalar>(g))) continue;
    result.grads.touched_entities.push_back(static_cast<std::int32_t>(i));
    auto theta = state.entities.row(i);
    double sq = 0;
    for (std::int64_t m = 0; m < dim; ++m) {
      sq += static_cast<double>(theta[m]) * static_cast<double>(theta[m]);
      g[m] += Scalar(2) * lambda * theta[m];
    }
    l2 += sq;
  }
  for (std::int64_t j = 0; j < num_relations; ++j) {
    auto g = result.grads.relations.row(j);
    if (!detail::row_nonzero(std::span<const Scalar>(g))) continue;
    result.grads.touched_relations.push_back(static_cast<std::int32_t>(j));
    auto theta = state.relations.row(j);
    double sq = 0;
    for (std::int64_t m = 0; m < dim; ++m) {
      sq += static_cast<double>(theta[m]) * static_cast<double>(theta[m]);
      g[m] += Scalar(2) * lambda * theta[m];
    }
    l2 += sq;
  }

  result.ce = static_cast<Scalar>(ce);
  result.l2 = lambda * static_cast<Scalar>(l2);
  result.loss = result.ce + result.l2;
  if (!std::isfinite(static_cast<double>(result.loss)))
    throw NumericError("non-finite loss; first batch triple id " + std::to_string(batch[0]));
  return result;
}

}  // namespace aggre
