#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "prf/ndiff.hpp"
#include "prf/rng.hpp"

namespace prf {

// Learnable dense tensor. Networks own the storage; callers bind leaves onto
// a tape per step and write optimizer updates back into `data`.
template <typename T>
struct Tensor {
  std::string name;
  int64_t rows = 0, cols = 0;
  std::vector<T> data;

  int64_t size() const { return rows * cols; }

  static Tensor zeros(std::string name, int64_t r, int64_t c) {
    return {std::move(name), r, c, std::vector<T>(r * c, T(0))};
  }

  // He-normal weights for relu layers: sigma = sqrt(2 / fan_in).
  static Tensor he(std::string name, int64_t in, int64_t out, Rng& rng) {
    Tensor t{std::move(name), in, out, std::vector<T>(in * out)};
    const double sigma = std::sqrt(2.0 / static_cast<double>(in));
    for (auto& w : t.data) w = T(rng.normal() * sigma);
    return t;
  }
};

template <typename T>
std::vector<typename nd::Graph<T>::Ref> bindTensors(nd::Graph<T>& g,
                                                    const std::vector<Tensor<T>>& params) {
  std::vector<typename nd::Graph<T>::Ref> refs;
  refs.reserve(params.size());
  for (auto& t : params) refs.push_back(g.leaf(t.rows, t.cols, t.data.data()));
  return refs;
}

// x @ W + b with refs[i] = W and refs[i+1] = b.
template <typename T>
typename nd::Graph<T>::Ref denseLayer(nd::Graph<T>& g, typename nd::Graph<T>::Ref x,
                                      const std::vector<typename nd::Graph<T>::Ref>& refs,
                                      size_t i) {
  return g.addBias(g.matmul(x, refs[i]), refs[i + 1]);
}

}  // namespace prf
