#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "aggre/errors.hpp"

namespace aggre {

// Scalars laid out per CSR segment: values[offsets[s] .. offsets[s+1]).
template <class Scalar>
struct SegmentedScalars {
  std::span<const std::int64_t> offsets;  // num_segments + 1 boundaries
  std::vector<Scalar> values;

  std::int64_t num_segments() const {
    return static_cast<std::int64_t>(offsets.size()) - 1;
  }
};

// One dim-length vector per CSR element, row-major.
template <class Scalar>
struct SegmentedVectors {
  std::span<const std::int64_t> offsets;
  std::int64_t dim = 0;
  std::vector<Scalar> values;  // num_elements * dim

  std::span<const Scalar> vec(std::int64_t i) const {
    return std::span<const Scalar>(values).subspan(i * dim, dim);
  }
};

// out[m] = a[m] * b[m]
template <class Scalar>
void hadamard(std::span<const Scalar> a, std::span<const Scalar> b,
              std::span<Scalar> out) {
  contract(a.size() == b.size() && a.size() == out.size(), "hadamard: length mismatch");
  for (std::size_t m = 0; m < a.size(); ++m) out[m] = a[m] * b[m];
}

// product rule: (da, db) = (g . b, g . a)
template <class Scalar>
void hadamard_backward(std::span<const Scalar> grad, std::span<const Scalar> a,
                       std::span<const Scalar> b, std::span<Scalar> da,
                       std::span<Scalar> db) {
  contract(grad.size() == a.size() && a.size() == b.size() &&
               da.size() == a.size() && db.size() == a.size(),
           "hadamard_backward: length mismatch");
  for (std::size_t m = 0; m < a.size(); ++m) {
    da[m] = grad[m] * b[m];
    db[m] = grad[m] * a[m];
  }
}

// sum_m a[m] * r[m] * b[m]; symmetric in a and b
template <class Scalar>
Scalar distmult_score(std::span<const Scalar> a, std::span<const Scalar> r,
                      std::span<const Scalar> b) {
  contract(a.size() == r.size() && a.size() == b.size(),
           "distmult_score: length mismatch");
  Scalar s = 0;
  for (std::size_t m = 0; m < a.size(); ++m) s += a[m] * r[m] * b[m];
  return s;
}

template <class Scalar>
void distmult_backward(Scalar grad, std::span<const Scalar> a,
                       std::span<const Scalar> r, std::span<const Scalar> b,
                       std::span<Scalar> da, std::span<Scalar> dr,
                       std::span<Scalar> db) {
  contract(a.size() == r.size() && a.size() == b.size() && da.size() == a.size() &&
               dr.size() == a.size() && db.size() == a.size(),
           "distmult_backward: length mismatch");
  for (std::size_t m = 0; m < a.size(); ++m) {
    da[m] = grad * r[m] * b[m];
    dr[m] = grad * a[m] * b[m];
    db[m] = grad * a[m] * r[m];
  }
}

// Softmax of one segment with max-subtraction. `live`, when given, marks the
// entries that participate; the rest get weight 0. A segment with no live
// entries yields all zeros.
template <class Scalar>
void softmax_span(std::span<const Scalar> x, std::span<Scalar> y,
                  const std::uint8_t* live = nullptr) {
  contract(x.size() == y.size(), "softmax_span: length mismatch");
  const std::size_t n = x.size();
  Scalar hi = -std::numeric_limits<Scalar>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    if (!live || live[i]) hi = x[i] > hi ? x[i] : hi;
  if (hi == -std::numeric_limits<Scalar>::infinity()) {
    for (std::size_t i = 0; i < n; ++i) y[i] = 0;
    return;
  }
  Scalar denom = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!live || live[i]) {
      y[i] = std::exp(x[i] - hi);
      denom += y[i];
    } else {
      y[i] = 0;
    }
  }
  for (std::size_t i = 0; i < n; ++i) y[i] /= denom;
}

// dx_i = y_i * (g_i - sum_j y_j g_j); entries with y_i == 0 get dx_i == 0,
// which also covers masked-out positions.
template <class Scalar>
void softmax_span_backward(std::span<const Scalar> y, std::span<const Scalar> grad,
                           std::span<Scalar> dx) {
  contract(y.size() == grad.size() && y.size() == dx.size(),
           "softmax_span_backward: length mismatch");
  Scalar dot = 0;
  for (std::size_t i = 0; i < y.size(); ++i) dot += y[i] * grad[i];
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = y[i] * (grad[i] - dot);
}

template <class Scalar>
SegmentedScalars<Scalar> segment_softmax(const SegmentedScalars<Scalar>& logits) {
  contract(!logits.offsets.empty() &&
               logits.offsets.back() == static_cast<std::int64_t>(logits.values.size()),
           "segment_softmax: offsets inconsistent with values");
  SegmentedScalars<Scalar> out{logits.offsets, std::vector<Scalar>(logits.values.size())};
  for (std::int64_t s = 0; s < logits.num_segments(); ++s) {
    std::int64_t b = logits.offsets[s], e = logits.offsets[s + 1];
    softmax_span(std::span<const Scalar>(logits.values).subspan(b, e - b),
                 std::span<Scalar>(out.values).subspan(b, e - b));
  }
  return out;
}

template <class Scalar>
SegmentedScalars<Scalar> segment_softmax_backward(const SegmentedScalars<Scalar>& y,
                                                  const SegmentedScalars<Scalar>& grad) {
  contract(y.values.size() == grad.values.size() && y.offsets.data() == grad.offsets.data(),
           "segment_softmax_backward: structure mismatch");
  SegmentedScalars<Scalar> dx{y.offsets, std::vector<Scalar>(y.values.size())};
  for (std::int64_t s = 0; s < y.num_segments(); ++s) {
    std::int64_t b = y.offsets[s], e = y.offsets[s + 1];
    softmax_span_backward(std::span<const Scalar>(y.values).subspan(b, e - b),
                          std::span<const Scalar>(grad.values).subspan(b, e - b),
                          std::span<Scalar>(dx.values).subspan(b, e - b));
  }
  return dx;
}

// out[s] = sum_{p in segment s} weights[p] * messages[p]; empty segment ->
// zero vector. Sequential left-to-right accumulation within each segment.
template <class Scalar>
std::vector<Scalar> segment_weighted_sum(const SegmentedScalars<Scalar>& weights,
                                         const SegmentedVectors<Scalar>& messages) {
  contract(weights.offsets.data() == messages.offsets.data() &&
               weights.values.size() * messages.dim == messages.values.size(),
           "segment_weighted_sum: structure mismatch");
  const std::int64_t dim = messages.dim;
  const std::int64_t num_segments = weights.num_segments();
  std::vector<Scalar> out(num_segments * dim, Scalar(0));
  for (std::int64_t s = 0; s < num_segments; ++s) {
    Scalar* acc = out.data() + s * dim;
    for (std::int64_t p = weights.offsets[s]; p < weights.offsets[s + 1]; ++p) {
      const Scalar w = weights.values[p];
      const Scalar* msg = messages.values.data() + p * dim;
      for (std::int64_t m = 0; m < dim; ++m) acc[m] += w * msg[m];
    }
  }
  return out;
}

// upstream: one dim-length gradient per segment.
// dweights[p] = <upstream[seg(p)], messages[p]>, dmessages[p] = weights[p] * upstream[seg(p)]
template <class Scalar>
void segment_weighted_sum_backward(const SegmentedScalars<Scalar>& weights,
                                   const SegmentedVectors<Scalar>& messages,
                                   std::span<const Scalar> upstream,
                                   std::span<Scalar> dweights,
                                   std::span<Scalar> dmessages) {
  const std::int64_t dim = messages.dim;
  const std::int64_t num_segments = weights.num_segments();
  contract(static_cast<std::int64_t>(upstream.size()) == num_segments * dim &&
               dweights.size() == weights.values.size() &&
               dmessages.size() == messages.values.size(),
           "segment_weighted_sum_backward: structure mismatch");
  for (std::int64_t s = 0; s < num_segments; ++s) {
    const Scalar* up = upstream.data() + s * dim;
    for (std::int64_t p = weights.offsets[s]; p < weights.offsets[s + 1]; ++p) {
      const Scalar* msg = messages.values.data() + p * dim;
      Scalar* dmsg = dmessages.data() + p * dim;
      Scalar acc = 0;
      for (std::int64_t m = 0; m < dim; ++m) {
        acc += up[m] * msg[m];
        dmsg[m] = weights.values[p] * up[m];
      }
      dweights[p] = acc;
    }
  }
}

template <class Scalar>
bool all_finite(std::span<const Scalar> x) {
  for (Scalar v : x)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace aggre
