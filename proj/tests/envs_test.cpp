#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "gtrxl/envs.hpp"

namespace gtrxl {
namespace {

// Independent step-by-step simulator. Tracks the activated pads as an
// ordered set and derives the expected pad from its size.
struct SimulatorOracle {
  std::size_t n;
  std::vector<std::size_t> sequence;
  std::set<std::size_t> pressed;
  long r, c;
  double total = 0;

  double step(std::size_t action) {
    static const int dr[] = {-1, -1, 0, 1, 1, 1, 0, -1, -2, 0, 2, 0};
    static const int dc[] = {0, 1, 1, 1, 0, -1, -1, -1, 0, 2, 0, -2};
    const long nr = r + dr[action], nc = c + dc[action];
    if (nr < 0 || nc < 0 || nr >= static_cast<long>(n) || nc >= static_cast<long>(n)) return 0;
    r = nr;
    c = nc;
    const std::size_t pad = static_cast<std::size_t>(r) * n + static_cast<std::size_t>(c);
    double reward = 0;
    if (sequence[pressed.size()] == pad) {
      reward = 1;
      pressed.insert(pad);
      if (pressed.size() == sequence.size()) pressed.clear();
    } else if (!pressed.count(pad)) {
      pressed.clear();
    }
    total += reward;
    return reward;
  }
};

NumpadState fixed_state(std::size_t n, std::vector<std::size_t> sequence, std::size_t start) {
  Rng rng(0);
  NumpadConfig config;
  config.n = n;
  config.length = sequence.size();
  NumpadState s = numpad_reset(config, rng);
  s.sequence = std::move(sequence);
  s.row = start / n;
  s.col = start % n;
  return s;
}

std::size_t press(NumpadState& s, std::size_t pad, double* reward = nullptr) {
  const std::size_t a = numpad_action_towards(s.n(), s.agent_pad(), pad);
  EXPECT_LT(a, kNumpadActions) << "pad " << pad << " not adjacent to " << s.agent_pad();
  const NumpadStep st = numpad_step(s, a);
  if (reward) *reward = st.reward;
  return a;
}

/// Full-knowledge policy: head for the next sequence pad by king moves.
std::size_t scripted_action(const NumpadState& s) {
  const std::size_t n = s.n(), target = s.sequence[s.progress];
  const long tr = static_cast<long>(target / n), tc = static_cast<long>(target % n);
  std::size_t best = 0;
  long best_dist = 1 << 30;
  for (std::size_t a = 0; a < 8; ++a) {
    const long r = static_cast<long>(s.row) + kNumpadMoves[a].dr;
    const long c = static_cast<long>(s.col) + kNumpadMoves[a].dc;
    if (r < 0 || c < 0 || r >= static_cast<long>(n) || c >= static_cast<long>(n)) continue;
    // Standing on the target, every move steps off it and the next comes back.
    const long dist = std::max(std::labs(r - tr), std::labs(c - tc));
    if (dist < best_dist) {
      best_dist = dist;
      best = a;
    }
  }
  return best;
}

TEST(NumpadSequence, AlwaysValid) {
  Rng rng(50);
  for (std::size_t n : {2u, 3u, 4u})
    for (int i = 0; i < 1000; ++i) {
      const std::size_t K = 1 + static_cast<std::size_t>(i) % (n * n);
      auto seq = numpad_generate_sequence(n, K, rng);
      ASSERT_EQ(seq.size(), K);
      ASSERT_TRUE(valid_numpad_sequence(n, seq));
    }
}

TEST(NumpadSequence, FullLengthPathOnThreeByThree) {
  Rng rng(51);
  std::set<std::vector<std::size_t>> distinct;
  for (int i = 0; i < 200; ++i) {
    auto seq = numpad_generate_sequence(3, 9, rng);
    ASSERT_TRUE(valid_numpad_sequence(3, seq));
    EXPECT_EQ(std::set<std::size_t>(seq.begin(), seq.end()).size(), 9u);
    distinct.insert(seq);
  }
  EXPECT_GT(distinct.size(), 50u);
  EXPECT_THROW(numpad_generate_sequence(2, 5, rng), ContractError);
  EXPECT_THROW(numpad_generate_sequence(2, 0, rng), ContractError);
}

TEST(NumpadSequence, Validator) {
  EXPECT_TRUE(valid_numpad_sequence(2, {0, 3, 1, 2}));  // diagonals are adjacent
  EXPECT_FALSE(valid_numpad_sequence(3, {0, 2}));       // not adjacent
  EXPECT_FALSE(valid_numpad_sequence(2, {0, 1, 0}));    // repeat
  EXPECT_FALSE(valid_numpad_sequence(2, {0, 4}));       // off grid
  EXPECT_FALSE(valid_numpad_sequence(2, {}));
}

TEST(NumpadReset, FreshState) {
  Rng rng(52);
  NumpadConfig config;
  for (int i = 0; i < 1000; ++i) {
    NumpadState s = numpad_reset(config, rng);
    ASSERT_TRUE(valid_numpad_sequence(2, s.sequence));
    ASSERT_EQ(s.sequence.size(), 4u);
    EXPECT_EQ(s.progress, 0u);
    EXPECT_EQ(s.step, 0u);
    auto obs = numpad_observation(s);
    ASSERT_EQ(obs.size(), 2 * 4 + 12 + 1u);
    double total = 0;
    for (double v : obs) total += v;
    EXPECT_EQ(total, 1.0);  // only the agent one-hot
    EXPECT_EQ(obs[s.agent_pad()], 1.0);
  }
}

TEST(NumpadStep, PressRules) {
  NumpadState s = fixed_state(2, {0, 1, 3, 2}, 3);
  double reward = -1;
  press(s, 0, &reward);
  EXPECT_EQ(reward, 1.0);
  EXPECT_EQ(s.activated, (std::vector<bool>{true, false, false, false}));

  press(s, 2, &reward);  // wrong pad
  EXPECT_EQ(reward, 0.0);
  EXPECT_EQ(s.progress, 0u);
  EXPECT_EQ(s.activated, std::vector<bool>(4, false));

  press(s, 0, &reward);
  press(s, 1, &reward);
  EXPECT_EQ(s.progress, 2u);
  press(s, 0, &reward);  // already activated
  EXPECT_EQ(reward, 0.0);
  EXPECT_EQ(s.progress, 2u);
  EXPECT_EQ(s.activated, (std::vector<bool>{true, true, false, false}));

  auto obs = numpad_observation(s);
  EXPECT_EQ(obs[4 + 0], 1.0);
  EXPECT_EQ(obs[4 + 1], 1.0);
  EXPECT_EQ(obs[8 + numpad_action_towards(2, 1, 0)], 1.0);
  EXPECT_EQ(obs.back(), 0.0);
}

TEST(NumpadStep, RepressClearsWhenConfigured) {
  NumpadState s = fixed_state(2, {0, 1, 3, 2}, 3);
  s.config.repress_clears = true;
  press(s, 0);
  press(s, 1);
  press(s, 0);
  EXPECT_EQ(s.progress, 0u);
}

TEST(NumpadStep, OffGridIsNoPress) {
  NumpadState s = fixed_state(2, {0, 1, 3, 2}, 0);
  const std::size_t up = 0, jump_right = 9;
  EXPECT_EQ(numpad_step(s, up).reward, 0.0);
  EXPECT_EQ(s.agent_pad(), 0u);
  EXPECT_EQ(s.progress, 0u);
  EXPECT_EQ(numpad_step(s, jump_right).reward, 0.0);  // 2 cells right leaves a 2x2 grid
  EXPECT_EQ(s.step, 2u);
}

TEST(NumpadStep, JumpLandsTwoCellsAndPressesOnlyLanding) {
  NumpadState s = fixed_state(3, {2, 1, 0}, 0);
  const std::size_t jump_right = 9;
  EXPECT_EQ(numpad_step(s, jump_right).reward, 1.0);
  EXPECT_EQ(s.agent_pad(), 2u);
  EXPECT_EQ(s.progress, 1u);  // pad 1 was jumped over, not pressed
}

TEST(NumpadStep, CompletingTwiceEarnsTwoK) {
  NumpadState s = fixed_state(2, {0, 1, 3, 2}, 3);
  double total = 0;
  while (s.completed_passes < 2) total += numpad_step(s, scripted_action(s)).reward;
  EXPECT_EQ(total, 8.0);
  EXPECT_EQ(s.progress, 0u);
  EXPECT_EQ(s.activated, std::vector<bool>(4, false));
}

TEST(NumpadStep, EpisodeEndsAtLimitAndRejectsFurtherSteps) {
  Rng rng(53);
  NumpadState s = numpad_reset({}, rng);
  NumpadStep last;
  for (std::size_t t = 0; t < 500; ++t) {
    ASSERT_FALSE(s.done());
    last = numpad_step(s, t % kNumpadActions);
  }
  EXPECT_TRUE(last.done);
  EXPECT_THROW(numpad_step(s, 0), ContractError);
  NumpadState fresh = numpad_reset({}, rng);
  EXPECT_THROW(numpad_step(fresh, 12), ContractError);
}

TEST(NumpadInvariants, MatchesSimulatorAndAccountsEveryReward) {
  Rng rng(54);
  std::uniform_int_distribution<std::size_t> random_action(0, kNumpadActions - 1);
  for (std::size_t n : {2u, 3u}) {
    NumpadConfig config;
    config.n = n;
    for (int episode = 0; episode < 200; ++episode) {
      NumpadState s = numpad_reset(config, rng);
      SimulatorOracle oracle{n, s.sequence, {}, static_cast<long>(s.row), static_cast<long>(s.col)};
      double total = 0, forfeited = 0;
      while (!s.done()) {
        // Mix scripted and random steps so that passes, clears and no-ops all occur.
        const std::size_t a = episode % 2 && random_action(rng) < 9 ? scripted_action(s) : random_action(rng);
        const std::size_t before = s.progress;
        const double r = numpad_step(s, a).reward;
        ASSERT_EQ(r, oracle.step(a));
        total += r;
        if (r == 0 && s.progress == 0 && before > 0) forfeited += static_cast<double>(before);
        // Activated set is exactly the sequence prefix of length progress.
        std::vector<bool> prefix(n * n, false);
        for (std::size_t i = 0; i < s.progress; ++i) prefix[s.sequence[i]] = true;
        ASSERT_EQ(s.activated, prefix);
      }
      const double K = static_cast<double>(s.sequence.size());
      EXPECT_EQ(total, oracle.total);
      // Rewards for progress later lost to a clear are kept.
      EXPECT_EQ(total, static_cast<double>(s.completed_passes) * K + static_cast<double>(s.progress) + forfeited);
    }
  }
}

TEST(NumpadInvariants, ScriptedBeatsRandom) {
  Rng rng(55);
  NumpadConfig config;
  std::uniform_int_distribution<std::size_t> random_action(0, kNumpadActions - 1);
  double scripted_total = 0, random_total = 0;
  const int episodes = 1000;
  for (int e = 0; e < episodes; ++e) {
    NumpadState a = numpad_reset(config, rng);
    NumpadState b = a;
    double ra = 0, rb = 0;
    while (!a.done()) ra += numpad_step(a, scripted_action(a)).reward;
    while (!b.done()) rb += numpad_step(b, random_action(rng)).reward;
    if (e < 20) {
      EXPECT_GE(ra, 4.0);
    }
    scripted_total += ra;
    random_total += rb;
  }
  EXPECT_LT(random_total / episodes, scripted_total / episodes);
}

TEST(CopySample, LayoutAndEnumeration) {
  Rng rng(56);
  CopyTaskSpec spec{1, 2};
  std::set<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> seen;
  for (int i = 0; i < 200; ++i) {
    CopySample s = copy_sample(spec, rng);
    seen.insert({s.input, s.target});
  }
  // delimiter 2, blank 3
  decltype(seen) expected{{{0, 2, 3}, {3, 2, 0}}, {{1, 2, 3}, {3, 2, 1}}};
  EXPECT_EQ(seen, expected);

  CopyTaskSpec two{2, 2};
  std::set<std::vector<std::size_t>> inputs;
  for (int i = 0; i < 400; ++i) inputs.insert(copy_sample(two, rng).input);
  EXPECT_EQ(inputs.size(), 4u);

  CopyTaskSpec big{10, 8};
  CopySample s = copy_sample(big, rng);
  ASSERT_EQ(s.input.size(), 21u);
  ASSERT_EQ(s.target.size(), 21u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(s.target[big.first_scored() + i], s.input[i]);
  EXPECT_THROW(copy_sample(CopyTaskSpec{0, 8}, rng), ContractError);
  EXPECT_THROW(copy_sample(CopyTaskSpec{3, 1}, rng), ContractError);
}

TEST(CopySample, SymbolsUniformWithinThreeSigma) {
  Rng rng(57);
  CopyTaskSpec spec{10, 8};
  std::map<std::size_t, double> counts;
  const int samples = 10000;
  for (int i = 0; i < samples; ++i) {
    CopySample s = copy_sample(spec, rng);
    for (std::size_t j = 0; j < spec.payload; ++j) counts[s.input[j]] += 1;
  }
  const double total = samples * 10.0, p = 1.0 / 8.0;
  const double sigma = std::sqrt(total * p * (1 - p));
  ASSERT_EQ(counts.size(), 8u);
  for (auto [symbol, count] : counts) EXPECT_LT(std::abs(count - total * p), 3 * sigma) << symbol;
}

}  // namespace
}  // namespace gtrxl
