#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mimic/common.hpp"
#include "mimic/rng.hpp"

namespace mimic {

/// Finite Markov chain X -> H_0 -> ... -> H_{n-1} -> Z given by an initial
/// distribution over X and n+1 row-stochastic transition matrices.
/// transitions[0] maps X to H_0; transitions.back() maps H_{n-1} to Z.
struct MarkovChainSpec {
  VecD px;
  std::vector<MatD> transitions;

  int num_hidden() const { return int(transitions.size()) - 1; }

  void validate() const {
    if (transitions.size() < 2)
      throw ContractError("chain needs at least one hidden layer (2 transition matrices)");
    if (px.size() < 1) throw ContractError("empty initial distribution");
    double s = px.sum();
    if (std::abs(s - 1.0) > 1e-9 || (px.array() < -1e-15).any())
      throw ParameterError("initial distribution must be a probability vector");
    int prev = int(px.size());
    for (size_t t = 0; t < transitions.size(); ++t) {
      const MatD& m = transitions[t];
      if (int(m.rows()) != prev)
        throw ContractError("transition " + std::to_string(t) + " row count mismatch");
      for (int r = 0; r < m.rows(); ++r) {
        if (std::abs(m.row(r).sum() - 1.0) > 1e-9 || (m.row(r).array() < -1e-15).any())
          throw ParameterError("transition " + std::to_string(t) + " row " + std::to_string(r) +
                               " is not a probability distribution");
      }
      prev = int(m.cols());
    }
  }
};

namespace detail {

inline double discrete_mi(const MatD& joint) {
  VecD pa = joint.rowwise().sum();
  VecD pb = joint.colwise().sum();
  double mi = 0;
  for (int i = 0; i < joint.rows(); ++i)
    for (int j = 0; j < joint.cols(); ++j) {
      double p = joint(i, j);
      if (p > 0) mi += p * std::log(p / (pa(i) * pb(j)));
    }
  return mi;
}

}  // namespace detail

/// Exact I(H_l; Z) for every hidden layer, by brute-force joint-distribution
/// marginalization. The oracle behind the data-processing-inequality checks.
inline std::vector<double> exact_chain_mi(const MarkovChainSpec& chain) {
  chain.validate();
  const int n = chain.num_hidden();
  std::vector<double> out;
  out.reserve(n);

  VecD dist = chain.transitions[0].transpose() * chain.px;  // p(H_0)
  for (int l = 0; l < n; ++l) {
    // channel H_l -> Z via suffix product of transitions l+1 .. n
    MatD channel = chain.transitions[l + 1];
    for (int t = l + 2; t <= n; ++t) channel = channel * chain.transitions[t];
    MatD joint = dist.asDiagonal() * channel;  // p(h_l, z)
    out.push_back(detail::discrete_mi(joint));
    if (l + 1 < n) dist = chain.transitions[l + 1].transpose() * dist;
  }
  return out;
}

/// Random chain generator for property tests: alphabets <= max_alphabet,
/// length <= max_hidden hidden layers, Dirichlet-ish rows via normalized
/// exponentials.
inline MarkovChainSpec random_chain(uint64_t seed, int max_alphabet = 6, int max_hidden = 5) {
  Rng rng(seed);
  const int n_hidden = 1 + rng.uniform_int(max_hidden);
  std::vector<int> sizes;
  sizes.push_back(2 + rng.uniform_int(max_alphabet - 1));  // |X|
  for (int l = 0; l < n_hidden; ++l) sizes.push_back(2 + rng.uniform_int(max_alphabet - 1));
  sizes.push_back(2 + rng.uniform_int(max_alphabet - 1));  // |Z|

  MarkovChainSpec chain;
  chain.px.resize(sizes[0]);
  for (int i = 0; i < sizes[0]; ++i) chain.px(i) = -std::log(rng.uniform() + 1e-12);
  chain.px /= chain.px.sum();
  for (size_t t = 0; t + 1 < sizes.size(); ++t) {
    MatD m(sizes[t], sizes[t + 1]);
    for (int r = 0; r < m.rows(); ++r) {
      for (int c = 0; c < m.cols(); ++c) m(r, c) = -std::log(rng.uniform() + 1e-12);
      m.row(r) /= m.row(r).sum();
    }
    chain.transitions.push_back(std::move(m));
  }
  return chain;
}

/// Samples (h_l, z) pairs from the chain as one-hot vectors; feeds the
/// MINE-vs-oracle comparisons.
inline std::pair<MatF, MatF> sample_chain_pairs(const MarkovChainSpec& chain, int layer, int n,
                                                uint64_t seed) {
  chain.validate();
  Rng rng(seed);
  auto draw = [&](const VecD& p) {
    double u = rng.uniform(), acc = 0;
    for (int i = 0; i < p.size(); ++i) {
      acc += p(i);
      if (u < acc) return i;
    }
    return int(p.size()) - 1;
  };

  const int hl_size = int(chain.transitions[layer].cols());
  const int z_size = int(chain.transitions.back().cols());
  MatF u = MatF::Zero(hl_size, n), v = MatF::Zero(z_size, n);
  for (int i = 0; i < n; ++i) {
    int state = draw(chain.px);
    for (size_t t = 0; t < chain.transitions.size(); ++t) {
      state = draw(chain.transitions[t].row(state).transpose());
      if (int(t) == layer) u(state, i) = 1.0f;
    }
    v(state, i) = 1.0f;
  }
  return {u, v};
}

}  // namespace mimic
