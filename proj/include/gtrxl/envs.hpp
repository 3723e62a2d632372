#pragma once

// Memory tasks: a grid Numpad and a supervised copy/recall task.

#include <algorithm>
#include <array>
#include <cstdlib>
#include <random>
#include <vector>

#include "gtrxl/optim.hpp"

namespace gtrxl {

// ---------------------------------------------------------------------------
// Numpad
//
// Every cell of an n x n grid is a pad. A hidden sequence of K pads is a
// self-avoiding path in the Moore (king-move) neighborhood. Landing on the
// next pad of the sequence pays +1; landing on any other unactivated pad
// clears all progress. After the last pad pays out, progress resets and the
// same sequence can be repeated.

struct NumpadConfig {
  std::size_t n = 2;
  std::size_t length = 0;  // 0 means n * n
  std::size_t episode_limit = 500;
  bool repress_clears = false;  // pressing an activated pad clears instead of no-op

  std::size_t sequence_length() const { return length == 0 ? n * n : length; }
};

/// 8 one-cell king moves, then 4 two-cell orthogonal jumps.
inline constexpr std::size_t kNumpadActions = 12;

struct GridMove {
  int dr;
  int dc;
};

inline constexpr std::array<GridMove, kNumpadActions> kNumpadMoves = {{
    {-1, 0}, {-1, 1}, {0, 1}, {1, 1}, {1, 0}, {1, -1}, {0, -1}, {-1, -1},
    {-2, 0}, {0, 2}, {2, 0}, {0, -2},
}};

inline bool moore_adjacent(std::size_t n, std::size_t a, std::size_t b) {
  const long dr = std::labs(static_cast<long>(a / n) - static_cast<long>(b / n));
  const long dc = std::labs(static_cast<long>(a % n) - static_cast<long>(b % n));
  return a != b && dr <= 1 && dc <= 1;
}

/// True iff seq is a non-empty, in-range, self-avoiding king-move path.
inline bool valid_numpad_sequence(std::size_t n, const std::vector<std::size_t>& seq) {
  if (seq.empty()) return false;
  std::vector<bool> used(n * n, false);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq[i] >= n * n || used[seq[i]]) return false;
    used[seq[i]] = true;
    if (i > 0 && !moore_adjacent(n, seq[i - 1], seq[i])) return false;
  }
  return true;
}

/// Random self-avoiding king path of `length` pads by backtracking DFS with
/// shuffled neighbor order from a random start.
inline std::vector<std::size_t> numpad_generate_sequence(std::size_t n, std::size_t length,
                                                         Rng& rng) {
  const std::size_t cells = n * n;
  if (length < 1 || length > cells) {
    throw ContractError("numpad_generate_sequence: length " + std::to_string(length) +
                        " outside [1, " + std::to_string(cells) + "]");
  }
  std::vector<std::size_t> path;
  std::vector<bool> used(cells, false);
  auto neighbors = [&](std::size_t p) {
    std::vector<std::size_t> out;
    for (std::size_t q = 0; q < cells; ++q) {
      if (!used[q] && moore_adjacent(n, p, q)) out.push_back(q);
    }
    std::shuffle(out.begin(), out.end(), rng);
    return out;
  };
  auto extend = [&](auto&& self, std::size_t p) -> bool {
    path.push_back(p);
    used[p] = true;
    if (path.size() == length) return true;
    for (std::size_t q : neighbors(p)) {
      if (self(self, q)) return true;
    }
    used[p] = false;
    path.pop_back();
    return false;
  };
  std::vector<std::size_t> starts(cells);
  for (std::size_t i = 0; i < cells; ++i) starts[i] = i;
  std::shuffle(starts.begin(), starts.end(), rng);
  for (std::size_t s : starts) {
    if (extend(extend, s)) return path;
  }
  throw ContractError("numpad_generate_sequence: no path found");  // unreachable for king graphs
}

struct NumpadState {
  NumpadConfig config;
  std::vector<std::size_t> sequence;
  std::size_t progress = 0;
  std::vector<bool> activated;
  std::size_t row = 0, col = 0;
  std::size_t step = 0;
  int previous_action = -1;
  double previous_reward = 0.0;
  std::size_t completed_passes = 0;

  std::size_t n() const { return config.n; }
  std::size_t agent_pad() const { return row * config.n + col; }
  bool done() const { return step >= config.episode_limit; }
};

inline std::size_t numpad_observation_size(std::size_t n) {
  return 2 * n * n + kNumpadActions + 1;
}

/// agent one-hot (n^2) ++ activated mask (n^2) ++ previous action one-hot ++
/// previous reward.
inline std::vector<double> numpad_observation(const NumpadState& s) {
  const std::size_t cells = s.n() * s.n();
  std::vector<double> obs(numpad_observation_size(s.n()), 0.0);
  obs[s.agent_pad()] = 1.0;
  for (std::size_t i = 0; i < cells; ++i) obs[cells + i] = s.activated[i] ? 1.0 : 0.0;
  if (s.previous_action >= 0) obs[2 * cells + static_cast<std::size_t>(s.previous_action)] = 1.0;
  obs.back() = s.previous_reward;
  return obs;
}

inline NumpadState numpad_reset(const NumpadConfig& config, Rng& rng) {
  NumpadState s;
  s.config = config;
  s.sequence = numpad_generate_sequence(config.n, config.sequence_length(), rng);
  s.activated.assign(config.n * config.n, false);
  std::uniform_int_distribution<std::size_t> cell(0, config.n * config.n - 1);
  const std::size_t start = cell(rng);
  s.row = start / config.n;
  s.col = start % config.n;
  return s;
}

struct NumpadStep {
  double reward = 0.0;
  bool done = false;
};

inline void numpad_clear(NumpadState& s) {
  std::fill(s.activated.begin(), s.activated.end(), false);
  s.progress = 0;
}

/// Applies one action in place. Off-grid moves/jumps leave the agent where it
/// is and press nothing.
inline NumpadStep numpad_step(NumpadState& s, std::size_t action) {
  if (s.done()) throw ContractError("numpad_step: episode already finished");
  if (action >= kNumpadActions) throw ContractError("numpad_step: invalid action");
  const long n = static_cast<long>(s.n());
  const long r = static_cast<long>(s.row) + kNumpadMoves[action].dr;
  const long c = static_cast<long>(s.col) + kNumpadMoves[action].dc;
  double reward = 0.0;
  if (r >= 0 && r < n && c >= 0 && c < n) {
    s.row = static_cast<std::size_t>(r);
    s.col = static_cast<std::size_t>(c);
    const std::size_t pad = s.agent_pad();
    if (pad == s.sequence[s.progress]) {
      reward = 1.0;
      s.activated[pad] = true;
      if (++s.progress == s.sequence.size()) {
        ++s.completed_passes;
        numpad_clear(s);
      }
    } else if (!s.activated[pad] || s.config.repress_clears) {
      numpad_clear(s);
    }
  }
  ++s.step;
  s.previous_action = static_cast<int>(action);
  s.previous_reward = reward;
  return {reward, s.done()};
}

/// Shortest action from `from` toward pad `to` that lands on `to` in one
/// move if adjacent; used by scripted policies. Returns kNumpadActions when
/// `to` is not one king move away.
inline std::size_t numpad_action_towards(std::size_t n, std::size_t from, std::size_t to) {
  for (std::size_t a = 0; a < 8; ++a) {
    const long r = static_cast<long>(from / n) + kNumpadMoves[a].dr;
    const long c = static_cast<long>(from % n) + kNumpadMoves[a].dc;
    if (r >= 0 && c >= 0 && r < static_cast<long>(n) && c < static_cast<long>(n) &&
        static_cast<std::size_t>(r) * n + static_cast<std::size_t>(c) == to) {
      return a;
    }
  }
  return kNumpadActions;
}

// ---------------------------------------------------------------------------
// Copy task
//
// input : s_0 .. s_{B-1}  DELIM  BLANK x B
// target: BLANK x B       DELIM  s_0 .. s_{B-1}
// Only the last B target positions are scored.

struct CopySample {
  std::vector<std::size_t> input;
  std::vector<std::size_t> target;
};

struct CopyTaskSpec {
  std::size_t payload = 10;  // B
  std::size_t vocab = 8;     // V symbols; tokens V and V+1 are delimiter and blank

  std::size_t delimiter() const { return vocab; }
  std::size_t blank() const { return vocab + 1; }
  std::size_t token_count() const { return vocab + 2; }
  std::size_t length() const { return 2 * payload + 1; }
  std::size_t first_scored() const { return payload + 1; }
};

inline CopySample copy_sample(const CopyTaskSpec& spec, Rng& rng) {
  if (spec.payload < 1 || spec.vocab < 2) {
    throw ContractError("copy_sample: need payload >= 1 and vocab >= 2");
  }
  std::uniform_int_distribution<std::size_t> symbol(0, spec.vocab - 1);
  CopySample s;
  s.input.assign(spec.length(), spec.blank());
  s.target.assign(spec.length(), spec.blank());
  s.input[spec.payload] = spec.delimiter();
  s.target[spec.payload] = spec.delimiter();
  for (std::size_t i = 0; i < spec.payload; ++i) {
    s.input[i] = symbol(rng);
    s.target[spec.first_scored() + i] = s.input[i];
  }
  return s;
}

}  // namespace gtrxl
