import tempfile
import unittest
from pathlib import Path

import numpy as np

from config import TrainConfig
from errors import EmptyBuffer
from features import HashFeaturizer
from policy import ModeVector, PolicyParams, critic_value, gcn_forward
from reasoning_graph import Label, add_children, apply_label, new_graph
from trainer import (
    BanditEnvironment,
    TrainingLog,
    TrajectoryBuffer,
    Transition,
    gae,
    optimize,
    prepare_batch,
    td_errors,
    train,
    update,
)


def snapshot(d=8):
    g = new_graph("task")
    apply_label(g, g.root, Label.CONTINUE)
    add_children(g, g.root, ["a", "b"])
    featurizer = HashFeaturizer(d)
    for node_id in g.nodes:
        g.set_feature(node_id, featurizer.featurize(g.node(node_id).text))
    return g.to_dict()


class TestAdvantages(unittest.TestCase):
    def test_td_errors_reset_at_done(self):
        """The value after a terminal step is not bootstrapped."""
        deltas = td_errors([1.0, 2.0, 3.0], [0.5, 1.0, 2.0], [False, True, True], gamma=0.9)
        np.testing.assert_allclose(deltas, [1.0 + 0.9 * 1.0 - 0.5, 2.0 - 1.0, 3.0 - 2.0])

    def test_gae_single_episode(self):
        deltas = np.array([1.0, 1.0, 1.0])
        adv = gae(deltas, gamma=1.0, lam=0.5, dones=[False, False, True])
        np.testing.assert_allclose(adv, [1.75, 1.5, 1.0])

    def test_gae_does_not_cross_episodes(self):
        """An advantage never mixes in deltas from the next episode."""
        adv = gae([1.0, 5.0], gamma=0.9, lam=0.9, dones=[True, True])
        np.testing.assert_allclose(adv, [1.0, 5.0])

    def test_length_mismatch(self):
        with self.assertRaises(ValueError):
            td_errors([1.0], [1.0, 2.0], [True], 0.9)

    def test_gae_matches_explicit_sum(self):
        """The backward recursion equals the direct discounted sum up to each episode end."""
        rng = np.random.default_rng(21)
        for _ in range(50):
            n = int(rng.integers(1, 30))
            deltas = rng.normal(size=n)
            dones = rng.random(n) < 0.25
            dones[-1] = True
            gamma, lam = rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0)
            expected = np.zeros(n)
            for t in range(n):
                for k in range(t, n):
                    expected[t] += (gamma * lam) ** (k - t) * deltas[k]
                    if dones[k]:
                        break
            np.testing.assert_allclose(gae(deltas, gamma, lam, dones), expected, rtol=0, atol=1e-10)

    def test_gae_lambda_zero_is_td_error(self):
        dones = [False, True, False, True]
        deltas = td_errors([1.0, 0.0, 3.0, 2.0], [0.2, 0.4, 0.1, 0.7], dones, gamma=0.95)
        np.testing.assert_array_equal(gae(deltas, 0.95, 0.0, dones), deltas)

    def test_single_terminal_step(self):
        """One terminal step with reward 1 and value 0.5 has advantage 0.5."""
        deltas = td_errors([1.0], [0.5], [True], gamma=0.9)
        np.testing.assert_allclose(deltas, [0.5])
        np.testing.assert_allclose(gae(deltas, 0.9, 0.95, [True]), [0.5])


class TestBuffer(unittest.TestCase):
    def test_validate_requires_done(self):
        buffer = TrajectoryBuffer()
        mode = ModeVector(2, 0.7, 0.9, False)
        buffer.append(Transition(snapshot(), "n1", mode, -1.0, episode=0))
        buffer.append(Transition(snapshot(), "n2", mode, -1.0, episode=1))
        with self.assertRaises(ValueError):
            buffer.validate()
        buffer.transitions[0].done = True
        buffer.mark_done()
        buffer.validate()

    def test_non_finite_log_prob_rejected(self):
        with self.assertRaises(ValueError):
            TrajectoryBuffer().append(Transition(snapshot(), "n1", ModeVector(1, 0.7, 0.9, False), float("nan")))

    def test_empty_update(self):
        params = PolicyParams.init(d=8, h=8)
        with self.assertRaises(EmptyBuffer):
            update(params, TrajectoryBuffer(), TrainConfig())
        with self.assertRaises(EmptyBuffer):
            prepare_batch(TrajectoryBuffer(), TrainConfig())


class TestBatch(unittest.TestCase):
    def test_prepare_batch(self):
        """Returns are advantages plus values; advantages are normalized."""
        snap = snapshot()
        buffer = TrajectoryBuffer()
        buffer.append(Transition(snap, "n1", ModeVector(3, 0.7, 0.9, True), -2.0, reward=5.0, value_old=1.0))
        buffer.append(Transition(snap, "n2", ModeVector(1, 0.5, 0.5, False), -2.5, reward=0.0, value_old=0.5))
        buffer.mark_done()
        cfg = TrainConfig(gamma=1.0, lam=1.0)
        batch = prepare_batch(buffer, cfg)
        # deltas: 5 + 0.5 - 1 = 4.5, 0 - 0.5 = -0.5; advantages 4.0, -0.5
        np.testing.assert_allclose(batch.returns, [5.0, 0.0])
        self.assertAlmostEqual(batch.advantages.mean(), 0.0)
        self.assertAlmostEqual(batch.advantages.std(), 1.0, places=6)
        np.testing.assert_array_equal(batch.branch, [2, 0])
        np.testing.assert_array_equal(batch.dependency, [1.0, 0.0])
        self.assertEqual(batch.inputs.shape, (2, 8))

    def test_aggregation_switch(self):
        """The per-node variant feeds raw features instead of neighbourhood averages."""
        snap = snapshot()
        buffer = TrajectoryBuffer([Transition(snap, "n1", ModeVector(1, 0.7, 0.9, False), -1.0, done=True)])
        raw = prepare_batch(buffer, TrainConfig(), aggregate=False).inputs[0]
        mixed = prepare_batch(buffer, TrainConfig(), aggregate=True).inputs[0]
        np.testing.assert_allclose(raw, snap["nodes"][1]["feature"])
        self.assertFalse(np.allclose(raw, mixed))


class TestOptimize(unittest.TestCase):
    def setUp(self):
        self.env = BanditEnvironment(targets=(2, 4), dimension=8)
        self.params = PolicyParams.init(d=8, h=16, max_branches=5, seed=0)

    def test_first_epoch_ratio_is_one(self):
        """Before any step the new policy equals the old one."""
        buffer = self.env.collect(self.params, np.random.default_rng(0), 16)
        _, stats = update(self.params, buffer, TrainConfig(epochs=3))
        self.assertAlmostEqual(stats.first_ratio_mean, 1.0, places=8)
        self.assertEqual(stats.steps, 3)
        self.assertEqual(stats.transitions, 16)

    def test_grad_norm_clipped(self):
        buffer = self.env.collect(self.params, np.random.default_rng(1), 16)
        cfg = TrainConfig(epochs=4, max_grad_norm=0.05)
        _, stats = update(self.params, buffer, cfg)
        self.assertLessEqual(stats.grad_norm, 0.05 + 1e-9)

    def test_minibatches(self):
        buffer = self.env.collect(self.params, np.random.default_rng(2), 12)
        batch = prepare_batch(buffer, TrainConfig())
        _, stats = optimize(self.params, batch, TrainConfig(epochs=2, minibatch_size=5))
        self.assertEqual(stats.steps, 6)

    def test_update_leaves_input_untouched(self):
        buffer = self.env.collect(self.params, np.random.default_rng(3), 8)
        before = self.params.copy()
        update(self.params, buffer, TrainConfig(epochs=2))
        np.testing.assert_array_equal(before.branch_w, self.params.branch_w)

    def test_null_update_keeps_parameters(self):
        """Zero advantages, exact value targets and no entropy bonus give a zero step."""
        buffer = self.env.collect(self.params, np.random.default_rng(4), 16)
        batch = prepare_batch(buffer, TrainConfig(normalize_advantages=False))
        reps = gcn_forward(self.params, batch.inputs, [], aggregate=False)
        batch.advantages = np.zeros(len(batch))
        batch.returns = np.array([critic_value(self.params, rep) for rep in reps])
        updated, _ = optimize(self.params, batch, TrainConfig(entropy_coef=0.0, epochs=5))
        for name, value in self.params.arrays().items():
            np.testing.assert_allclose(getattr(updated, name), value, rtol=0, atol=1e-12, err_msg=name)


class TestTraining(unittest.TestCase):
    def test_bandit_improves(self):
        """PPO raises the expected reward of a contextual branch-count bandit."""
        gains = []
        for seed in range(5):
            env = BanditEnvironment(targets=(2, 4), dimension=8)
            params = PolicyParams.init(d=8, h=16, max_branches=5, seed=seed)
            cfg = TrainConfig(lr=2e-2, epochs=20, seed=seed)
            rng = np.random.default_rng(seed)
            before = env.expected_reward(params)
            trained, stats = train(params, lambda p, r: env.collect(p, rng, 32), cfg, rounds=20)
            after = env.expected_reward(trained)
            gains.append(after - before)
            self.assertEqual(len(stats), 20)
            self.assertGreaterEqual((after - before) / before, 0.3, msg=f"seed {seed}")
        self.assertGreater(np.mean(gains), 1.0)

    def test_log_and_callback(self):
        env = BanditEnvironment(targets=(3,), dimension=8)
        params = PolicyParams.init(d=8, h=8, seed=1)
        rng = np.random.default_rng(0)
        seen = []
        with tempfile.TemporaryDirectory() as tmp:
            log = TrainingLog(Path(tmp) / "train_log.jsonl")
            train(params, lambda p, r: env.collect(p, rng, 8), TrainConfig(epochs=2), rounds=3, start_round=2,
                  log=log, on_round=lambda idx, p, s: seen.append(idx))
            records = log.read()
        self.assertEqual(seen, [3, 4, 5])
        self.assertEqual([r["update_idx"] for r in records], [2, 3, 4])
        self.assertEqual(set(records[0]), {"update_idx", "mean_reward", "clip_fraction", "value_loss",
                                           "entropy", "grad_norm"})

    def test_empty_round_skipped(self):
        params = PolicyParams.init(d=8, h=8)
        trained, stats = train(params, lambda p, r: TrajectoryBuffer(), TrainConfig(), rounds=2)
        self.assertEqual(stats, [])
        np.testing.assert_array_equal(trained.branch_w, params.branch_w)


if __name__ == '__main__':
    unittest.main()
