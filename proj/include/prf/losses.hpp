#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "prf/common.hpp"
#include "prf/ndiff.hpp"

namespace prf {

// Mixing weights of the auxiliary objectives; the photometric term always
// carries weight 1.
template <typename T>
struct LossWeights {
  T ptrgb = T(0.01);
  T bg = T(0.001);
  T tvf = T(0.01);
  T tvm = T(0.01);
};

// Mean over rays of the squared color error.
template <typename T>
typename nd::Graph<T>::Ref photometricLoss(nd::Graph<T>& g, typename nd::Graph<T>::Ref rendered,
                                           const std::vector<T>& target) {
  const int64_t r = g.rows(rendered);
  if (g.cols(rendered) != 3 || static_cast<int64_t>(target.size()) != r * 3)
    throw err("photometricLoss: [R,3] expected");
  auto d = g.sub(rendered, g.constant(r, 3, target));
  return g.mulScalar(g.sum(g.mul(d, d)), T(1) / T(r));
}

// Mean over rays of the weight-sum of per-sample color errors against the
// ray's target. The compositing weights enter as constants, so this term
// pulls on the colors only. Empty rays contribute zero.
template <typename T>
typename nd::Graph<T>::Ref perPointRgbLoss(nd::Graph<T>& g, typename nd::Graph<T>::Ref rgb,
                                           const std::shared_ptr<std::vector<T>>& weights,
                                           nd::IdxBuf offsets, const std::vector<T>& target) {
  const int64_t q = g.rows(rgb);
  const int64_t r = static_cast<int64_t>(offsets->size()) - 1;
  if (g.cols(rgb) != 3 || static_cast<int64_t>(weights->size()) != q)
    throw err("perPointRgbLoss: shape mismatch");
  if (static_cast<int64_t>(target.size()) != r * 3) throw err("perPointRgbLoss: target shape");
  if ((*offsets)[r] != q) throw err("perPointRgbLoss: offsets do not cover samples");
  std::vector<T> perSample(q * 3);
  for (int64_t ray = 0; ray < r; ++ray)
    for (int64_t i = (*offsets)[ray]; i < (*offsets)[ray + 1]; ++i)
      for (int a = 0; a < 3; ++a) perSample[i * 3 + a] = target[ray * 3 + a];
  auto d = g.sub(rgb, g.constant(q, 3, perSample));
  auto weighted = g.mulColBroadcast(g.rowsum(g.mul(d, d)), g.constant(q, 1, *weights));
  return g.mulScalar(g.sum(weighted), T(1) / T(r));
}

// Mean binary entropy of the residual transmittance, pushing rays to commit
// to foreground or background. Clamping keeps the logs finite; outside the
// clamp the gradient is zero.
template <typename T>
typename nd::Graph<T>::Ref bgEntropyLoss(nd::Graph<T>& g, typename nd::Graph<T>::Ref tfar) {
  const int64_t r = g.rows(tfar);
  if (g.cols(tfar) != 1) throw err("bgEntropyLoss: [R,1] expected");
  auto p = g.clamp(tfar, T(1e-6), T(1) - T(1e-6));
  auto onemp = g.sub(g.fill(r, 1, T(1)), p);
  auto ent = g.add(g.mul(p, g.logOp(p)), g.mul(onemp, g.logOp(onemp)));
  return g.mulScalar(g.mean(ent), T(-1));
}

template <typename T>
struct LossTerms {
  typename nd::Graph<T>::Ref photo, ptrgb, bg, tvf, tvm;
};

// L = photo + w1 ptrgb + w2 bg + w3 tvf + w4 tvm, summed in that order. An
// invalid ref contributes nothing (terms can be absent, e.g. tvm with no
// particles). Non-finite terms abort with the term named.
template <typename T>
typename nd::Graph<T>::Ref totalLoss(nd::Graph<T>& g, const LossTerms<T>& t,
                                     const LossWeights<T>& w) {
  struct Item {
    typename nd::Graph<T>::Ref ref;
    T weight;
    const char* name;
  };
  const Item items[] = {{t.photo, T(1), "photo"},
                        {t.ptrgb, w.ptrgb, "ptrgb"},
                        {t.bg, w.bg, "bg"},
                        {t.tvf, w.tvf, "tvf"},
                        {t.tvm, w.tvm, "tvm"}};
  typename nd::Graph<T>::Ref total;
  for (const auto& it : items) {
    if (!it.ref.valid()) continue;
    if (!std::isfinite(static_cast<double>(g.val(it.ref)[0])))
      throw err(std::string("totalLoss: non-finite term ") + it.name);
    auto scaled = it.weight == T(1) ? it.ref : g.mulScalar(it.ref, it.weight);
    total = total.valid() ? g.add(total, scaled) : scaled;
  }
  if (!total.valid()) throw err("totalLoss: no terms");
  return total;
}

}  // namespace prf
