#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "repirl/mdp.hpp"
#include "repirl/models.hpp"
#include "repirl/rng.hpp"

namespace testing {

using namespace repirl;

inline TokenMdp parity_mdp(std::vector<std::vector<Token>> prompts, int horizon = 8) {
  std::vector<Prompt> ps;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    ps.push_back(Prompt{static_cast<int>(i), prompts[i]});
  }
  return TokenMdp(6, horizon, Token{0}, std::move(ps), TaskKind::parity_chain);
}

inline Trajectory traj(int prompt_id, std::vector<Token> actions) {
  Trajectory t;
  t.prompt_id = prompt_id;
  t.actions = std::move(actions);
  return t;
}

inline void randomize(std::vector<double>& xs, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  for (auto& x : xs) x = scale * (2.0 * rng.uniform() - 1.0);
}

// Central finite differences of f around x, coordinate by coordinate.
inline std::vector<double> finite_difference(const std::function<double()>& f,
                                             std::vector<double>& x, double h = 1e-5) {
  std::vector<double> out(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double v = x[k];
    x[k] = v + h;
    const double up = f();
    x[k] = v - h;
    const double down = f();
    x[k] = v;
    out[k] = (up - down) / (2.0 * h);
  }
  return out;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testing
