#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "prf/common.hpp"
#include "prf/kernels.hpp"
#include "prf/mathfast.hpp"
#include "prf/threading.hpp"

namespace prf::nd {

using IdxBuf = std::shared_ptr<const std::vector<int64_t>>;

// Eager reverse-mode tape over 2-D tensors [rows, cols]. Every op computes
// its value immediately (so downstream graph construction can inspect values,
// e.g. to bin points into grid cells) and records a closure for the pullback.
// Scalars are [1,1]; 3-D grids are stored flattened [X*Y*Z, C] with extents
// carried by the ops that need them, node index n = (ix*Ey + iy)*Ez + iz.
template <typename T>
class Graph {
 public:
  struct Ref {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
  };

  struct Node {
    int64_t rows = 0, cols = 0;
    std::vector<T> val;
    std::vector<T> grad;
    bool needsGrad = false;
    std::function<void()> back;
    const char* op = "";
  };

  // ---- introspection ----

  int64_t rows(Ref r) const { return at(r).rows; }
  int64_t cols(Ref r) const { return at(r).cols; }
  int64_t size(Ref r) const { return at(r).rows * at(r).cols; }
  const std::vector<T>& val(Ref r) const { return at(r).val; }
  const std::vector<T>& grad(Ref r) const { return at(r).grad; }
  bool needsGrad(Ref r) const { return at(r).needsGrad; }
  size_t nodeCount() const { return nodes_.size(); }

  // ---- leaves ----

  Ref leaf(int64_t r, int64_t c, const T* data, bool requiresGrad = true) {
    Node& n = make(r, c, requiresGrad, "leaf");
    std::copy(data, data + r * c, n.val.begin());
    return last();
  }

  Ref constant(int64_t r, int64_t c, const T* data) { return leaf(r, c, data, false); }

  Ref constant(int64_t r, int64_t c, const std::vector<T>& data) {
    if (static_cast<int64_t>(data.size()) != r * c) throw err("constant: size mismatch");
    return leaf(r, c, data.data(), false);
  }

  Ref scalarConst(T v) { return leaf(1, 1, &v, false); }

  Ref fill(int64_t r, int64_t c, T v, bool requiresGrad = false) {
    Node& n = make(r, c, requiresGrad, "fill");
    std::fill(n.val.begin(), n.val.end(), v);
    return last();
  }

  // ---- elementwise ----

  Ref add(Ref a, Ref b) { return binary(a, b, "add",
      [](T x, T y) { return x + y; },
      [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); }); }

  Ref sub(Ref a, Ref b) { return binary(a, b, "sub",
      [](T x, T y) { return x - y; },
      [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); }); }

  Ref mul(Ref a, Ref b) { return binary(a, b, "mul",
      [](T x, T y) { return x * y; },
      [](T, T y, T) { return y; },
      [](T x, T, T) { return x; }); }

  Ref addScalar(Ref a, T s) { return unary(a, "addScalar",
      [s](T x) { return x + s; }, [](T, T) { return T(1); }); }

  Ref mulScalar(Ref a, T s) { return unary(a, "mulScalar",
      [s](T x) { return x * s; }, [s](T, T) { return s; }); }

  Ref relu(Ref a) { return unary(a, "relu",
      [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); }); }

  Ref sigmoid(Ref a) { return unary(a, "sigmoid",
      [](T x) { return T(1) / (T(1) + tExp(-x)); },
      [](T, T y) { return y * (T(1) - y); }); }

  // softplus(x + shift); linearized outside [-30, 30] where it is exact to
  // float precision.
  Ref softplusShifted(Ref a, T shift) { return unary(a, "softplusShifted",
      [shift](T x) {
        T z = x + shift;
        if (z > T(30)) return z;
        if (z < T(-30)) return tExp(z);
        return std::log1p(tExp(z));
      },
      [shift](T x, T) {
        T z = x + shift;
        return T(1) / (T(1) + tExp(-z));
      }); }

  Ref expOp(Ref a) { return unary(a, "exp",
      [](T x) { return tExp(x); }, [](T, T y) { return y; }); }

  Ref logOp(Ref a) { return unary(a, "log",
      [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; }); }

  // Subgradient 0 where the output is 0.
  Ref sqrtOp(Ref a) { return unary(a, "sqrt",
      [](T x) { return std::sqrt(x); },
      [](T, T y) { return y > T(0) ? T(1) / (T(2) * y) : T(0); }); }

  Ref sinOp(Ref a) { return unary(a, "sin",
      [](T x) { return tSin(x); }, [](T x, T) { return tCos(x); }); }

  Ref cosOp(Ref a) { return unary(a, "cos",
      [](T x) { return tCos(x); }, [](T x, T) { return -tSin(x); }); }

  // Subgradient 0 at and outside the boundaries.
  Ref clamp(Ref a, T lo, T hi) { return unary(a, "clamp",
      [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); }); }

  // Per-column clamp (e.g. boxing positions into a non-cubic volume).
  Ref clampCols(Ref a, const std::vector<T>& lo, const std::vector<T>& hi) {
    Node& na = at(a);
    const int64_t r = na.rows, c = na.cols;
    if (static_cast<int64_t>(lo.size()) != c || static_cast<int64_t>(hi.size()) != c)
      throw err("clampCols: bounds size");
    Node& o = make(r, c, na.needsGrad, "clampCols");
    parallelFor(r, 8192, [&](size_t i0, size_t i1, size_t) {
      for (size_t i = i0; i < i1; ++i)
        for (int64_t j = 0; j < c; ++j)
          o.val[i * c + j] = clampv(na.val[i * c + j], lo[j], hi[j]);
    });
    if (o.needsGrad) {
      Node* pa = &na; Node* po = &o;
      auto lov = std::make_shared<std::vector<T>>(lo);
      auto hiv = std::make_shared<std::vector<T>>(hi);
      o.back = [pa, po, lov, hiv, r, c] {
        parallelFor(r, 8192, [&](size_t i0, size_t i1, size_t) {
          for (size_t i = i0; i < i1; ++i)
            for (int64_t j = 0; j < c; ++j) {
              T x = pa->val[i * c + j];
              if (x > (*lov)[j] && x < (*hiv)[j])
                pa->grad[i * c + j] += po->grad[i * c + j];
            }
        });
      };
    }
    return last();
  }

  // ---- broadcast / structure ----

  // a[r,c] + b[1,c]
  Ref addBias(Ref a, Ref b) {
    Node& na = at(a);
    Node& nb = at(b);
    if (nb.rows != 1 || nb.cols != na.cols) throw err("addBias: shape");
    Node& o = make(na.rows, na.cols, na.needsGrad || nb.needsGrad, "addBias");
    const int64_t r = na.rows, c = na.cols;
    parallelFor(r, 4096, [&](size_t i0, size_t i1, size_t) {
      for (size_t i = i0; i < i1; ++i)
        for (int64_t j = 0; j < c; ++j) o.val[i * c + j] = na.val[i * c + j] + nb.val[j];
    });
    if (o.needsGrad) {
      Node* pa = &na; Node* pb = &nb; Node* po = &o;
      o.back = [pa, pb, po, r, c] {
        if (pa->needsGrad)
          parallelFor(r, 4096, [&](size_t i0, size_t i1, size_t) {
            for (size_t i = i0; i < i1; ++i)
              for (int64_t j = 0; j < c; ++j) pa->grad[i * c + j] += po->grad[i * c + j];
          });
        if (pb->needsGrad)
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) pb->grad[j] += po->grad[i * c + j];
      };
    }
    return last();
  }

  // a[r,c] * b[r,1], column-broadcast
  Ref mulColBroadcast(Ref a, Ref b) {
    Node& na = at(a);
    Node& nb = at(b);
    if (nb.cols != 1 || nb.rows != na.rows) throw err("mulColBroadcast: shape");
    Node& o = make(na.rows, na.cols, na.needsGrad || nb.needsGrad, "mulColBroadcast");
    const int64_t r = na.rows, c = na.cols;
    parallelFor(r, 4096, [&](size_t i0, size_t i1, size_t) {
      for (size_t i = i0; i < i1; ++i) {
        T s = nb.val[i];
        for (int64_t j = 0; j < c; ++j) o.val[i * c + j] = na.val[i * c + j] * s;
      }
    });
    if (o.needsGrad) {
      Node* pa = &na; Node* pb = &nb; Node* po = &o;
      o.back = [pa, pb, po, r, c] {
        parallelFor(r, 4096, [&](size_t i0, size_t i1, size_t) {
          for (size_t i = i0; i < i1; ++i) {
            if (pa->needsGrad) {
              T s = pb->val[i];
              for (int64_t j = 0; j < c; ++j) pa->grad[i * c + j] += po->grad[i * c + j] * s;
            }
            if (pb->needsGrad) {
              T acc = T(0);
              for (int64_t j = 0; j < c; ++j) acc += po->grad[i * c + j] * pa->val[i * c + j];
              pb->grad[i] += acc;
            }
          }
        });
      };
    }
    return last();
  }

  Ref repeatRow(Ref a, int64_t r) {
    Node& na = at(a);
    if (na.rows != 1) throw err("repeatRow: input must be a single row");
    Node& o = make(r, na.cols, na.needsGrad, "repeatRow");
    const int64_t c = na.cols;
    for (int64_t i = 0; i < r; ++i)
      std::copy(na.val.begin(), na.val.end(), o.val.begin() + i * c);
    if (o.needsGrad) {
      Node* pa = &na; Node* po = &o;
      o.back = [pa, po, r, c] {
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) pa->grad[j] += po->grad[i * c + j];
      };
    }
    return last();
  }

  // out = a * scale + offset, broadcast along rows (scale/offset have c entries)
  Ref affineCols(Ref a, const std::vector<T>& scale, const std::vector<T>& offset) {
    Node& na = at(a);
    const int64_t c = na.cols;
    if (static_cast<int64_t>(scale.size()) != c || static_cast<int64_t>(offset.size()) != c)
      throw err("affineCols: scale/offset size");
    Node& o = make(na.rows, c, na.needsGrad, "affineCols");
    const int64_t r = na.rows;
    parallelFor(r, 4096, [&](size_t i0, size_t i1, size_t) {
      for (size_t i = i0; i < i1; ++i)
        for (int64_t j = 0; j < c; ++j)
          o.val[i * c + j] = na.val[i * c + j] * scale[j] + offset[j];
    });
    if (o.needsGrad) {
      Node* pa = &na; Node* po = &o;
      auto sc = std::make_shared<std::vector<T>>(scale);
      o.back = [pa, po, sc, r, c] {
        parallelFor(r, 4096, [&](size_t i0, size_t i1, size_t) {
          for (size_t i = i0; i < i1; ++i)
            for (int64_t j = 0; j < c; ++j)
              pa->grad[i * c + j] += po->grad[i * c + j] * (*sc)[j];
        });
      };
    }
    return last();
  }

  Ref matmul(Ref a, Ref b) {
    Node& na = at(a);
    Node& nb = at(b);
    if (na.cols != nb.rows) throw err("matmul: inner dims");
    const int64_t m = na.rows, k = na.cols, n = nb.cols;
    Node& o = make(m, n, na.needsGrad || nb.needsGrad, "matmul");
    gemm(na.val.data(), nb.val.data(), o.val.data(), m, k, n);
    if (o.needsGrad) {
      Node* pa = &na; Node* pb = &nb; Node* po = &o;
      o.back = [pa, pb, po, m, k, n] {
        if (pa->needsGrad) {
          std::vector<T> bt(k * n);
          transpose(pb->val.data(), bt.data(), k, n);
          gemm(po->grad.data(), bt.data(), pa->grad.data(), m, n, k, true);
        }
        if (pb->needsGrad)
          gemmAtB(pa->val.data(), po->grad.data(), pb->grad.data(), m, k, n, true);
      };
    }
    return last();
  }

  // ---- reductions ----

  Ref sum(Ref a) {
    Node& na = at(a);
    Node& o = make(1, 1, na.needsGrad, "sum");
    o.val[0] = blockSum(na.val.data(), na.rows * na.cols);
    if (o.needsGrad) {
      Node* pa = &na; Node* po = &o;
      o.back = [pa, po] {
        T g = po->grad[0];
        for (auto& v : pa->grad) v += g;
      };
    }
    return last();
  }

  Ref mean(Ref a) {
    Node& na = at(a);
    const int64_t n = na.rows * na.cols;
    Node& o = make(1, 1, na.needsGrad, "mean");
    o.val[0] = blockSum(na.val.data(), n) / static_cast<T>(n);
    if (o.needsGrad) {
      Node* pa = &na; Node* po = &o;
      o.back = [pa, po, n] {
        T g = po->grad[0] / static_cast<T>(n);
        for (auto& v : pa->grad) v += g;
      };
    }
    return last();
  }

  Ref rowsum(Ref a) {
    Node& na = at(a);
    const int64_t r = na.rows, c = na.cols;
    Node& o = make(r, 1, na.needsGrad, "rowsum");
    parallelFor(r, 8192, [&](size_t i0, size_t i1, size_t) {
      for (size_t i = i0; i < i1; ++i) {
        T s = T(0);
        for (int64_t j = 0; j < c; ++j) s += na.val[i * c + j];
        o.val[i] = s;
      }
    });
    if (o.needsGrad) {
      Node* pa = &na; Node* po = &o;
      o.back = [pa, po, r, c] {
        parallelFor(r, 8192, [&](size_t i0, size_t i1, size_t) {
          for (size_t i = i0; i < i1; ++i) {
            T g = po->grad[i];
            for (int64_t j = 0; j < c; ++j) pa->grad[i * c + j] += g;
          }
        });
      };
    }
    return last();
  }

  // ---- shuffles ----

  Ref concatCols(const std::vector<Ref>& parts) {
    if (parts.empty()) throw err("concatCols: empty");
    const int64_t r = at(parts[0]).rows;
    int64_t c = 0;
    bool ng = false;
    for (Ref p : parts) {
      if (at(p).rows != r) throw err("concatCols: row mismatch");
      c += at(p).cols;
      ng = ng || at(p).needsGrad;
    }
    Node& o = make(r, c, ng, "concatCols");
    std::vector<Node*> ps;
    for (Ref p : parts) ps.push_back(&at(p));
    parallelFor(r, 2048, [&](size_t i0, size_t i1, size_t) {
      for (size_t i = i0; i < i1; ++i) {
        int64_t off = 0;
        for (Node* p : ps) {
          std::copy(p->val.begin() + i * p->cols, p->val.begin() + (i + 1) * p->cols,
                    o.val.begin() + i * c + off);
          off += p->cols;
        }
      }
    });
    if (ng) {
      Node* po = &o;
      o.back = [ps, po, r, c] {
        parallelFor(r, 2048, [&](size_t i0, size_t i1, size_t) {
          for (size_t i = i0; i < i1; ++i) {
            int64_t off = 0;
            for (Node* p : ps) {
              if (p->needsGrad)
                for (int64_t j = 0; j < p->cols; ++j)
                  p->grad[i * p->cols + j] += po->grad[i * c + off + j];
              off += p->cols;
            }
          }
        });
      };
    }
    return last();
  }

  Ref sliceCols(Ref a, int64_t c0, int64_t c1) {
    Node& na = at(a);
    if (c0 < 0 || c1 > na.cols || c0 >= c1) throw err("sliceCols: range");
    const int64_t r = na.rows, c = na.cols, w = c1 - c0;
    Node& o = make(r, w, na.needsGrad, "sliceCols");
    parallelFor(r, 8192, [&](size_t i0, size_t i1, size_t) {
      for (size_t i = i0; i < i1; ++i)
        std::copy(na.val.begin() + i * c + c0, na.val.begin() + i * c + c1,
                  o.val.begin() + i * w);
    });
    if (o.needsGrad) {
      Node* pa = &na; Node* po = &o;
      o.back = [pa, po, r, c, c0, w] {
        parallelFor(r, 8192, [&](size_t i0, size_t i1, size_t) {
          for (size_t i = i0; i < i1; ++i)
            for (int64_t j = 0; j < w; ++j)
              pa->grad[i * c + c0 + j] += po->grad[i * w + j];
        });
      };
    }
    return last();
  }

  // out[i,:] = a[idx[i],:]; duplicate indices accumulate serially in backward.
  Ref gatherRows(Ref a, IdxBuf idx) {
    Node& na = at(a);
    const int64_t m = static_cast<int64_t>(idx->size());
    const int64_t c = na.cols;
    for (int64_t i : *idx)
      if (i < 0 || i >= na.rows) throw err("gatherRows: index out of range");
    Node& o = make(m, c, na.needsGrad, "gatherRows");
    parallelFor(m, 8192, [&](size_t i0, size_t i1, size_t) {
      for (size_t i = i0; i < i1; ++i)
        std::copy(na.val.begin() + (*idx)[i] * c, na.val.begin() + ((*idx)[i] + 1) * c,
                  o.val.begin() + i * c);
    });
    if (o.needsGrad) {
      Node* pa = &na; Node* po = &o;
      o.back = [pa, po, idx, m, c] {
        for (int64_t i = 0; i < m; ++i) {
          T* dst = pa->grad.data() + (*idx)[i] * c;
          const T* src = po->grad.data() + i * c;
          for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
        }
      };
    }
    return last();
  }

  // out[numRows, C]; out[idx[p*K+k],:] += weights[p,k] * values[p,:].
  // Gradient flows to both values and weights. idx entries < 0 are skipped.
  // Forward scatter is serial in ascending particle order: deterministic for
  // any thread count.
  Ref scatterAddWeighted(Ref values, Ref weights, IdxBuf idx, int64_t numRows) {
    Node& nv = at(values);
    Node& nw = at(weights);
    const int64_t P = nv.rows, C = nv.cols, K = nw.cols;
    if (nw.rows != P) throw err("scatterAddWeighted: row mismatch");
    if (static_cast<int64_t>(idx->size()) != P * K) throw err("scatterAddWeighted: idx size");
    for (int64_t i : *idx)
      if (i >= numRows) throw err("scatterAddWeighted: index out of range");
    Node& o = make(numRows, C, nv.needsGrad || nw.needsGrad, "scatterAddWeighted");
    std::fill(o.val.begin(), o.val.end(), T(0));
    for (int64_t p = 0; p < P; ++p) {
      const T* vrow = nv.val.data() + p * C;
      for (int64_t k = 0; k < K; ++k) {
        int64_t n = (*idx)[p * K + k];
        if (n < 0) continue;
        T w = nw.val[p * K + k];
        T* orow = o.val.data() + n * C;
        for (int64_t j = 0; j < C; ++j) orow[j] += w * vrow[j];
      }
    }
    if (o.needsGrad) {
      Node* pv = &nv; Node* pw = &nw; Node* po = &o;
      o.back = [pv, pw, po, idx, P, C, K] {
        parallelFor(P, 4096, [&](size_t p0, size_t p1, size_t) {
          for (size_t p = p0; p < p1; ++p) {
            const T* vrow = pv->val.data() + p * C;
            T* dvrow = pv->needsGrad ? pv->grad.data() + p * C : nullptr;
            for (int64_t k = 0; k < K; ++k) {
              int64_t n = (*idx)[p * K + k];
              if (n < 0) continue;
              const T* grow = po->grad.data() + n * C;
              T w = pw->val[p * K + k];
              if (dvrow)
                for (int64_t j = 0; j < C; ++j) dvrow[j] += w * grow[j];
              if (pw->needsGrad) {
                T acc = T(0);
                for (int64_t j = 0; j < C; ++j) acc += vrow[j] * grow[j];
                pw->grad[p * K + k] += acc;
              }
            }
          }
        });
      };
    }
    return last();
  }

  // row := den > 0 ? num/den : 0 (strict positivity gate, matching the node
  // mask convention).
  Ref normalizeRowsMasked(Ref num, Ref den) {
    Node& nn = at(num);
    Node& nd = at(den);
    if (nd.rows != nn.rows || nd.cols != 1) throw err("normalizeRowsMasked: shape");
    const int64_t r = nn.rows, c = nn.cols;
    Node& o = make(r, c, nn.needsGrad || nd.needsGrad, "normalizeRowsMasked");
    parallelFor(r, 8192, [&](size_t i0, size_t i1, size_t) {
      for (size_t i = i0; i < i1; ++i) {
        T d = nd.val[i];
        if (d > T(0))
          for (int64_t j = 0; j < c; ++j) o.val[i * c + j] = nn.val[i * c + j] / d;
        else
          for (int64_t j = 0; j < c; ++j) o.val[i * c + j] = T(0);
      }
    });
    if (o.needsGrad) {
      Node* pn = &nn; Node* pd = &nd; Node* po = &o;
      o.back = [pn, pd, po, r, c] {
        parallelFor(r, 8192, [&](size_t i0, size_t i1, size_t) {
          for (size_t i = i0; i < i1; ++i) {
            T d = pd->val[i];
            if (d <= T(0)) continue;
            if (pn->needsGrad)
              for (int64_t j = 0; j < c; ++j)
                pn->grad[i * c + j] += po->grad[i * c + j] / d;
            if (pd->needsGrad) {
              T acc = T(0);
              for (int64_t j = 0; j < c; ++j)
                acc += po->grad[i * c + j] * po->val[i * c + j];
              pd->grad[i] -= acc / d;
            }
          }
        });
      };
    }
    return last();
  }

  // Trilinear sample of grid [X*Y*Z, C] at points given in continuous grid
  // index coordinates (flattened [R,3], clamped to the grid). Points are not
  // differentiated through; the grid is.
  Ref gridSample(Ref grid, const std::shared_ptr<const std::vector<T>>& pts, Vec3i extents) {
    Node& ng = at(grid);
    const int64_t C = ng.cols;
    const int64_t R = static_cast<int64_t>(pts->size()) / 3;
    const int64_t X = extents.x, Y = extents.y, Z = extents.z;
    if (ng.rows != X * Y * Z) throw err("gridSample: grid size vs extents");
    if (X < 2 || Y < 2 || Z < 2) throw err("gridSample: extents must be >= 2");
    Node& o = make(R, C, ng.needsGrad, "gridSample");
    auto corners = std::make_shared<std::vector<int64_t>>(R);
    auto fracs = std::make_shared<std::vector<T>>(R * 3);
    const int64_t sx = Y * Z, sy = Z;
    parallelFor(R, 4096, [&](size_t i0, size_t i1, size_t) {
      for (size_t i = i0; i < i1; ++i) {
        int64_t c0[3];
        T f[3];
        const int64_t E[3] = {X, Y, Z};
        for (int a = 0; a < 3; ++a) {
          T p = (*pts)[i * 3 + a];
          p = clampv(p, T(0), static_cast<T>(E[a] - 1));
          int64_t ci = std::min<int64_t>(static_cast<int64_t>(p), E[a] - 2);
          c0[a] = ci;
          f[a] = p - static_cast<T>(ci);
          (*fracs)[i * 3 + a] = f[a];
        }
        int64_t base = c0[0] * sx + c0[1] * sy + c0[2];
        (*corners)[i] = base;
        T wx[2] = {T(1) - f[0], f[0]};
        T wy[2] = {T(1) - f[1], f[1]};
        T wz[2] = {T(1) - f[2], f[2]};
        T* orow = o.val.data() + i * C;
        for (int64_t j = 0; j < C; ++j) orow[j] = T(0);
        for (int dx = 0; dx < 2; ++dx)
          for (int dy = 0; dy < 2; ++dy)
            for (int dz = 0; dz < 2; ++dz) {
              T w = wx[dx] * wy[dy] * wz[dz];
              const T* grow = ng.val.data() + (base + dx * sx + dy * sy + dz) * C;
              for (int64_t j = 0; j < C; ++j) orow[j] += w * grow[j];
            }
      }
    });
    if (o.needsGrad) {
      Node* pg = &ng; Node* po = &o;
      o.back = [pg, po, corners, fracs, R, C, sx, sy] {
        for (int64_t i = 0; i < R; ++i) {
          const T* grow = po->grad.data() + i * C;
          int64_t base = (*corners)[i];
          T f0 = (*fracs)[i * 3], f1 = (*fracs)[i * 3 + 1], f2 = (*fracs)[i * 3 + 2];
          T wx[2] = {T(1) - f0, f0};
          T wy[2] = {T(1) - f1, f1};
          T wz[2] = {T(1) - f2, f2};
          for (int dx = 0; dx < 2; ++dx)
            for (int dy = 0; dy < 2; ++dy)
              for (int dz = 0; dz < 2; ++dz) {
                T w = wx[dx] * wy[dy] * wz[dz];
                T* dst = pg->grad.data() + (base + dx * sx + dy * sy + dz) * C;
                for (int64_t j = 0; j < C; ++j) dst[j] += w * grow[j];
              }
        }
      };
    }
    return last();
  }

  // Trilinear sample where the query points [R,3] are themselves a graph
  // node (continuous grid index coordinates). Backward reaches both the grid
  // and the points; an axis that got clamped to the boundary contributes zero
  // gradient to its point coordinate.
  Ref gridSampleDiff(Ref grid, Ref points, Vec3i extents) {
    Node& ng = at(grid);
    Node& np = at(points);
    const int64_t C = ng.cols;
    const int64_t R = np.rows;
    const int64_t X = extents.x, Y = extents.y, Z = extents.z;
    if (np.cols != 3) throw err("gridSampleDiff: points must be [R,3]");
    if (ng.rows != X * Y * Z) throw err("gridSampleDiff: grid size vs extents");
    if (X < 2 || Y < 2 || Z < 2) throw err("gridSampleDiff: extents must be >= 2");
    Node& o = make(R, C, ng.needsGrad || np.needsGrad, "gridSampleDiff");
    auto corners = std::make_shared<std::vector<int64_t>>(R);
    auto fracs = std::make_shared<std::vector<T>>(R * 3);
    auto clamped = std::make_shared<std::vector<uint8_t>>(R);
    const int64_t sx = Y * Z, sy = Z;
    parallelFor(R, 4096, [&](size_t i0, size_t i1, size_t) {
      for (size_t i = i0; i < i1; ++i) {
        int64_t c0[3];
        T f[3];
        uint8_t cl = 0;
        const int64_t E[3] = {X, Y, Z};
        for (int a = 0; a < 3; ++a) {
          T p = np.val[i * 3 + a];
          if (p <= T(0) || p >= static_cast<T>(E[a] - 1)) cl |= uint8_t(1 << a);
          p = clampv(p, T(0), static_cast<T>(E[a] - 1));
          int64_t ci = std::min<int64_t>(static_cast<int64_t>(p), E[a] - 2);
          c0[a] = ci;
          f[a] = p - static_cast<T>(ci);
          (*fracs)[i * 3 + a] = f[a];
        }
        (*clamped)[i] = cl;
        int64_t base = c0[0] * sx + c0[1] * sy + c0[2];
        (*corners)[i] = base;
        T wx[2] = {T(1) - f[0], f[0]};
        T wy[2] = {T(1) - f[1], f[1]};
        T wz[2] = {T(1) - f[2], f[2]};
        T* orow = o.val.data() + i * C;
        for (int64_t j = 0; j < C; ++j) orow[j] = T(0);
        for (int dx = 0; dx < 2; ++dx)
          for (int dy = 0; dy < 2; ++dy)
            for (int dz = 0; dz < 2; ++dz) {
              T w = wx[dx] * wy[dy] * wz[dz];
              const T* grow = ng.val.data() + (base + dx * sx + dy * sy + dz) * C;
              for (int64_t j = 0; j < C; ++j) orow[j] += w * grow[j];
            }
      }
    });
    if (o.needsGrad) {
      Node* pg = &ng; Node* pp = &np; Node* po = &o;
      o.back = [pg, pp, po, corners, fracs, clamped, R, C, sx, sy] {
        if (pg->needsGrad) {
          for (int64_t i = 0; i < R; ++i) {
            const T* grow = po->grad.data() + i * C;
            int64_t base = (*corners)[i];
            T f0 = (*fracs)[i * 3], f1 = (*fracs)[i * 3 + 1], f2 = (*fracs)[i * 3 + 2];
            T wx[2] = {T(1) - f0, f0};
            T wy[2] = {T(1) - f1, f1};
            T wz[2] = {T(1) - f2, f2};
            for (int dx = 0; dx < 2; ++dx)
              for (int dy = 0; dy < 2; ++dy)
                for (int dz = 0; dz < 2; ++dz) {
                  T w = wx[dx] * wy[dy] * wz[dz];
                  T* dst = pg->grad.data() + (base + dx * sx + dy * sy + dz) * C;
                  for (int64_t j = 0; j < C; ++j) dst[j] += w * grow[j];
                }
          }
        }
        if (pp->needsGrad) {
          parallelFor(R, 2048, [&](size_t i0, size_t i1, size_t) {
            for (size_t i = i0; i < i1; ++i) {
              const T* og = po->grad.data() + i * C;
              int64_t base = (*corners)[i];
              T f0 = (*fracs)[i * 3], f1 = (*fracs)[i * 3 + 1], f2 = (*fracs)[i * 3 + 2];
              T wx[2] = {T(1) - f0, f0};
              T wy[2] = {T(1) - f1, f1};
              T wz[2] = {T(1) - f2, f2};
              T s[8];
              for (int dx = 0; dx < 2; ++dx)
                for (int dy = 0; dy < 2; ++dy)
                  for (int dz = 0; dz < 2; ++dz) {
                    const T* grow = pg->val.data() + (base + dx * sx + dy * sy + dz) * C;
                    T acc = T(0);
                    for (int64_t j = 0; j < C; ++j) acc += grow[j] * og[j];
                    s[dx * 4 + dy * 2 + dz] = acc;
                  }
              uint8_t cl = (*clamped)[i];
              if (!(cl & 1))
                pp->grad[i * 3] += wy[0] * (wz[0] * (s[4] - s[0]) + wz[1] * (s[5] - s[1])) +
                                   wy[1] * (wz[0] * (s[6] - s[2]) + wz[1] * (s[7] - s[3]));
              if (!(cl & 2))
                pp->grad[i * 3 + 1] += wx[0] * (wz[0] * (s[2] - s[0]) + wz[1] * (s[3] - s[1])) +
                                       wx[1] * (wz[0] * (s[6] - s[4]) + wz[1] * (s[7] - s[5]));
              if (!(cl & 4))
                pp->grad[i * 3 + 2] += wx[0] * (wy[0] * (s[1] - s[0]) + wy[1] * (s[3] - s[2])) +
                                       wx[1] * (wy[0] * (s[5] - s[4]) + wy[1] * (s[7] - s[6]));
            }
          });
        }
      };
    }
    return last();
  }

  // [x, sin(pi*x), cos(pi*x), sin(2pi*x), cos(2pi*x), ...] frequency-major;
  // each block repeats the input's columns.
  Ref posenc(Ref a, int levels, bool includeInput = true) {
    Node& na = at(a);
    const int64_t r = na.rows, c = na.cols;
    const int inc = includeInput ? 1 : 0;
    const int64_t oc = c * (inc + 2 * levels);
    Node& o = make(r, oc, na.needsGrad, "posenc");
    constexpr T kPi = T(3.14159265358979323846L);
    parallelFor(r, 1024, [&](size_t i0, size_t i1, size_t) {
      for (size_t i = i0; i < i1; ++i) {
        const T* x = na.val.data() + i * c;
        T* out = o.val.data() + i * oc;
        if (inc) std::copy(x, x + c, out);
        for (int l = 0; l < levels; ++l) {
          T freq = kPi * static_cast<T>(int64_t(1) << l);
          T* so = out + (inc + 2 * l) * c;
          T* co = so + c;
          for (int64_t j = 0; j < c; ++j) tSinCos(freq * x[j], so[j], co[j]);
        }
      }
    });
    if (o.needsGrad) {
      Node* pa = &na; Node* po = &o;
      o.back = [pa, po, r, c, oc, levels, inc] {
        parallelFor(r, 1024, [&](size_t i0, size_t i1, size_t) {
          for (size_t i = i0; i < i1; ++i) {
            const T* oval = po->val.data() + i * oc;
            const T* og = po->grad.data() + i * oc;
            T* ag = pa->grad.data() + i * c;
            if (inc)
              for (int64_t j = 0; j < c; ++j) ag[j] += og[j];
            for (int l = 0; l < levels; ++l) {
              T freq = kPi * static_cast<T>(int64_t(1) << l);
              const T* sv = oval + (inc + 2 * l) * c;
              const T* cv = sv + c;
              const T* sg = og + (inc + 2 * l) * c;
              const T* cg = sg + c;
              for (int64_t j = 0; j < c; ++j)
                ag[j] += freq * (cv[j] * sg[j] - sv[j] * cg[j]);
            }
          }
        });
      };
    }
    return last();
  }

  // Front-to-back compositing over ragged per-ray sample lists.
  //   sigma [Q,1] (>=0), rgb [Q,3], deltas [Q] const bin widths, offsets
  //   [R+1] ascending with offsets[0]=0 and offsets[R]=Q, bg [3] const.
  // Ray r owns samples [offsets[r], offsets[r+1]); an empty ray composites to
  // bg with T_far = 1. Output [R,4]: columns 0..2 color, column 3 residual
  // transmittance T_far. If weightsOut is non-null the per-sample weights are
  // copied there (detached).
  Ref renderComposite(Ref sigma, Ref rgb, const std::shared_ptr<const std::vector<T>>& deltas,
                      IdxBuf offsets, const std::array<T, 3>& bg,
                      std::vector<T>* weightsOut = nullptr) {
    Node& ns = at(sigma);
    Node& nc = at(rgb);
    const int64_t Q = ns.rows;
    const int64_t R = static_cast<int64_t>(offsets->size()) - 1;
    if (ns.cols != 1) throw err("renderComposite: sigma must be [Q,1]");
    if (nc.rows != Q || nc.cols != 3) throw err("renderComposite: rgb shape");
    if (static_cast<int64_t>(deltas->size()) != Q) throw err("renderComposite: deltas size");
    if (R < 1 || (*offsets)[0] != 0 || (*offsets)[R] != Q)
      throw err("renderComposite: bad offsets");
    Node& o = make(R, 4, ns.needsGrad || nc.needsGrad, "renderComposite");
    auto weights = std::make_shared<std::vector<T>>(Q);
    auto tnext = std::make_shared<std::vector<T>>(Q);
    parallelFor(R, 512, [&](size_t r0, size_t r1, size_t) {
      for (size_t r = r0; r < r1; ++r) {
        T tAcc = T(1);
        T c0 = T(0), c1 = T(0), c2 = T(0);
        for (int64_t i = (*offsets)[r]; i < (*offsets)[r + 1]; ++i) {
          T trans = tExp(-ns.val[i] * (*deltas)[i]);
          T w = tAcc * (T(1) - trans);
          (*weights)[i] = w;
          c0 += w * nc.val[i * 3];
          c1 += w * nc.val[i * 3 + 1];
          c2 += w * nc.val[i * 3 + 2];
          tAcc *= trans;
          (*tnext)[i] = tAcc;
        }
        o.val[r * 4] = c0 + tAcc * bg[0];
        o.val[r * 4 + 1] = c1 + tAcc * bg[1];
        o.val[r * 4 + 2] = c2 + tAcc * bg[2];
        o.val[r * 4 + 3] = tAcc;
      }
    });
    if (weightsOut) *weightsOut = *weights;
    if (o.needsGrad) {
      Node* ps = &ns; Node* pc = &nc; Node* po = &o;
      auto bgv = bg;
      o.back = [ps, pc, po, weights, tnext, deltas, offsets, bgv, R] {
        parallelFor(R, 512, [&](size_t r0, size_t r1, size_t) {
          for (size_t r = r0; r < r1; ++r) {
            const int64_t b = (*offsets)[r], e = (*offsets)[r + 1];
            if (b == e) continue;
            const T g0 = po->grad[r * 4], g1 = po->grad[r * 4 + 1], g2 = po->grad[r * 4 + 2];
            const T gt = po->grad[r * 4 + 3];
            const T tfar = (*tnext)[e - 1];
            if (pc->needsGrad) {
              for (int64_t i = b; i < e; ++i) {
                T w = (*weights)[i];
                pc->grad[i * 3] += w * g0;
                pc->grad[i * 3 + 1] += w * g1;
                pc->grad[i * 3 + 2] += w * g2;
              }
            }
            if (ps->needsGrad) {
              // Suffix sum of w_m * (c_m . gC) accumulated back-to-front.
              T suffix = T(0);
              T tail = tfar * (bgv[0] * g0 + bgv[1] * g1 + bgv[2] * g2) + tfar * gt;
              for (int64_t i = e - 1; i >= b; --i) {
                T cd = pc->val[i * 3] * g0 + pc->val[i * 3 + 1] * g1 + pc->val[i * 3 + 2] * g2;
                ps->grad[i] += (*deltas)[i] * ((*tnext)[i] * cd - suffix - tail);
                suffix += (*weights)[i] * cd;
              }
            }
          }
        });
      };
    }
    return last();
  }

  // Mean of the L2 norms of feature differences across axial neighbor pairs.
  // Unmasked the divisor is the total node count; with a mask, pairs need both
  // endpoints set and the divisor becomes the count of set nodes (0 set nodes
  // gives 0).
  Ref tv3d(Ref vals, Vec3i extents,
           std::shared_ptr<const std::vector<uint8_t>> mask = nullptr) {
    Node& nv = at(vals);
    const int64_t X = extents.x, Y = extents.y, Z = extents.z, C = nv.cols;
    const int64_t Nn = X * Y * Z;
    if (nv.rows != Nn) throw err("tv3d: grid size vs extents");
    if (mask && static_cast<int64_t>(mask->size()) != Nn) throw err("tv3d: mask size");
    int64_t denom = Nn;
    if (mask) {
      denom = 0;
      for (uint8_t m : *mask) denom += m ? 1 : 0;
    }
    Node& o = make(1, 1, nv.needsGrad, "tv3d");
    if (denom == 0) {
      o.val[0] = T(0);
      return last();
    }
    const int64_t stride[3] = {Y * Z, Z, 1};
    const int64_t ext[3] = {X, Y, Z};
    auto pairNorm = [&](int64_t n, int64_t nb) {
      T s = T(0);
      for (int64_t j = 0; j < C; ++j) {
        T d = nv.val[nb * C + j] - nv.val[n * C + j];
        s += d * d;
      }
      return std::sqrt(s);
    };
    T total = T(0);
    {
      // Deterministic two-level accumulation, x-slab partials in order.
      std::vector<T> partials(X, T(0));
      parallelFor(X, 4, [&](size_t x0, size_t x1, size_t) {
        for (size_t x = x0; x < x1; ++x) {
          T acc = T(0);
          for (int64_t y = 0; y < Y; ++y)
            for (int64_t z = 0; z < Z; ++z) {
              int64_t n = (static_cast<int64_t>(x) * Y + y) * Z + z;
              if (mask && !(*mask)[n]) continue;
              int64_t coord[3] = {static_cast<int64_t>(x), y, z};
              for (int a = 0; a < 3; ++a) {
                if (coord[a] + 1 >= ext[a]) continue;
                int64_t nb = n + stride[a];
                if (mask && !(*mask)[nb]) continue;
                acc += pairNorm(n, nb);
              }
            }
          partials[x] = acc;
        }
      });
      for (T p : partials) total += p;
    }
    o.val[0] = total / static_cast<T>(denom);
    if (o.needsGrad) {
      Node* pv = &nv; Node* po = &o;
      o.back = [pv, po, mask, X, Y, Z, C, denom] {
        const T gscale = po->grad[0] / static_cast<T>(denom);
        const int64_t stride2[3] = {Y * Z, Z, 1};
        const int64_t ext2[3] = {X, Y, Z};
        for (int64_t x = 0; x < X; ++x)
          for (int64_t y = 0; y < Y; ++y)
            for (int64_t z = 0; z < Z; ++z) {
              int64_t n = (x * Y + y) * Z + z;
              if (mask && !(*mask)[n]) continue;
              int64_t coord[3] = {x, y, z};
              for (int a = 0; a < 3; ++a) {
                if (coord[a] + 1 >= ext2[a]) continue;
                int64_t nb = n + stride2[a];
                if (mask && !(*mask)[nb]) continue;
                T s = T(0);
                for (int64_t j = 0; j < C; ++j) {
                  T d = pv->val[nb * C + j] - pv->val[n * C + j];
                  s += d * d;
                }
                s = std::sqrt(s);
                if (s <= T(0)) continue;
                T inv = gscale / s;
                for (int64_t j = 0; j < C; ++j) {
                  T d = pv->val[nb * C + j] - pv->val[n * C + j];
                  pv->grad[nb * C + j] += d * inv;
                  pv->grad[n * C + j] -= d * inv;
                }
              }
            }
      };
    }
    return last();
  }

  // ---- backward ----

  void backward(Ref root) {
    Node& rt = at(root);
    if (rt.rows != 1 || rt.cols != 1) throw err("backward: root must be scalar");
    if (!rt.needsGrad) throw err("backward: root does not require grad");
    for (auto& n : nodes_)
      if (n->needsGrad) n->grad.assign(n->val.size(), T(0));
    rt.grad[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node& n = **it;
      if (n.needsGrad && n.back) n.back();
    }
  }

 private:
  Node& at(Ref r) {
    if (r.id < 0 || r.id >= static_cast<int32_t>(nodes_.size())) throw err("bad node ref");
    return *nodes_[r.id];
  }
  const Node& at(Ref r) const {
    if (r.id < 0 || r.id >= static_cast<int32_t>(nodes_.size())) throw err("bad node ref");
    return *nodes_[r.id];
  }

  Node& make(int64_t r, int64_t c, bool needsGrad, const char* op) {
    if (r <= 0 || c <= 0) throw err(std::string("empty tensor in ") + op);
    auto n = std::make_unique<Node>();
    n->rows = r;
    n->cols = c;
    n->val.resize(r * c);
    n->needsGrad = needsGrad;
    n->op = op;
    nodes_.push_back(std::move(n));
    return *nodes_.back();
  }

  Ref last() { return Ref{static_cast<int32_t>(nodes_.size()) - 1}; }

  template <typename FwdF, typename DxF>
  Ref unary(Ref a, const char* op, FwdF fwd, DxF dfdx) {
    Node& na = at(a);
    Node& o = make(na.rows, na.cols, na.needsGrad, op);
    const int64_t n = na.rows * na.cols;
    parallelFor(n, 65536, [&](size_t i0, size_t i1, size_t) {
      for (size_t i = i0; i < i1; ++i) o.val[i] = fwd(na.val[i]);
    });
    if (o.needsGrad) {
      Node* pa = &na; Node* po = &o;
      o.back = [pa, po, n, dfdx] {
        parallelFor(n, 65536, [&](size_t i0, size_t i1, size_t) {
          for (size_t i = i0; i < i1; ++i)
            pa->grad[i] += po->grad[i] * dfdx(pa->val[i], po->val[i]);
        });
      };
    }
    return last();
  }

  // dfda/dfdb take (a, b, out).
  template <typename FwdF, typename DaF, typename DbF>
  Ref binary(Ref a, Ref b, const char* op, FwdF fwd, DaF dfda, DbF dfdb) {
    Node& na = at(a);
    Node& nb = at(b);
    if (na.rows != nb.rows || na.cols != nb.cols)
      throw err(std::string("shape mismatch in ") + op);
    Node& o = make(na.rows, na.cols, na.needsGrad || nb.needsGrad, op);
    const int64_t n = na.rows * na.cols;
    parallelFor(n, 65536, [&](size_t i0, size_t i1, size_t) {
      for (size_t i = i0; i < i1; ++i) o.val[i] = fwd(na.val[i], nb.val[i]);
    });
    if (o.needsGrad) {
      Node* pa = &na; Node* pb = &nb; Node* po = &o;
      o.back = [pa, pb, po, n, dfda, dfdb] {
        parallelFor(n, 65536, [&](size_t i0, size_t i1, size_t) {
          for (size_t i = i0; i < i1; ++i) {
            if (pa->needsGrad)
              pa->grad[i] += po->grad[i] * dfda(pa->val[i], pb->val[i], po->val[i]);
            if (pb->needsGrad)
              pb->grad[i] += po->grad[i] * dfdb(pa->val[i], pb->val[i], po->val[i]);
          }
        });
      };
    }
    return last();
  }

  std::vector<std::unique_ptr<Node>> nodes_;
};

// Central-difference gradient of f at x; the reference for gradient tests.
template <typename F>
inline std::vector<double> finiteDifferenceGradient(F&& f, std::vector<double> x,
                                                    double h = 1e-5) {
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    double x0 = x[i];
    x[i] = x0 + h;
    double fp = f(x);
    x[i] = x0 - h;
    double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

}  // namespace prf::nd
