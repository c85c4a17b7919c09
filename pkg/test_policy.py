import tempfile
import unittest
from pathlib import Path

import numpy as np

from errors import NumericalError, ShapeError
from features import HashFeaturizer
from policy import (
    TEMPERATURE_BOUNDS,
    TOP_P_BOUNDS,
    FixedSelector,
    GraphSelector,
    LossSpec,
    ModeVector,
    PolicyBatch,
    PolicyParams,
    actor_dist,
    apply_gradients,
    backward,
    batch_loss,
    critic_value,
    entropy,
    gcn_forward,
    global_norm,
    load_checkpoint,
    log_prob,
    make_selector,
    normalized_adjacency,
    sample_action,
    save_checkpoint,
    squash,
    unsquash,
)
from reasoning_graph import Label, add_children, apply_label, new_graph


def featurized_graph(d=8):
    g = new_graph("task")
    apply_label(g, g.root, Label.CONTINUE)
    add_children(g, g.root, ["a", "b"])
    featurizer = HashFeaturizer(d)
    for node_id in g.nodes:
        g.set_feature(node_id, featurizer.featurize(g.node(node_id).text))
    return g


def random_batch(params, n=6, seed=1, offsets=None, spec=None):
    rng = np.random.default_rng(seed)
    batch = PolicyBatch(
        inputs=rng.normal(size=(n, params.d)),
        branch=rng.integers(0, params.max_branches, n),
        temperature_raw=rng.normal(size=n),
        top_p_raw=rng.normal(size=n),
        dependency=rng.integers(0, 2, n).astype(float),
        log_prob_old=np.zeros(n),
        advantages=rng.normal(size=n),
        returns=rng.normal(size=n),
    )
    # Place old log-probs so ratios sit clearly inside or outside the clip range.
    current = np.log(batch_loss(params, batch, spec or LossSpec()).ratios)
    offsets = np.zeros(n) if offsets is None else np.asarray(offsets, dtype=float)
    batch.log_prob_old = current + offsets
    return batch


class TestAdjacency(unittest.TestCase):
    def test_single_edge(self):
        """A two-node edge normalizes to 1/2 everywhere."""
        a_hat = normalized_adjacency(2, [(0, 1)])
        np.testing.assert_allclose(a_hat, np.full((2, 2), 0.5))

    def test_no_aggregation_is_identity(self):
        np.testing.assert_allclose(normalized_adjacency(3, [(0, 1), (0, 2)], aggregate=False), np.eye(3))

    def test_symmetric(self):
        a_hat = normalized_adjacency(4, [(0, 1), (0, 2), (2, 3)])
        np.testing.assert_allclose(a_hat, a_hat.T)
        self.assertAlmostEqual(a_hat[0, 0], 1.0 / 3.0)

    def test_bad_edge(self):
        with self.assertRaises(ShapeError):
            normalized_adjacency(2, [(0, 5)])


class TestForward(unittest.TestCase):
    def setUp(self):
        self.params = PolicyParams.init(d=8, h=16, max_branches=5, seed=0)

    def test_init_is_seeded(self):
        again = PolicyParams.init(d=8, h=16, max_branches=5, seed=0)
        for name, value in self.params.arrays().items():
            np.testing.assert_array_equal(value, getattr(again, name))
        self.params.validate()

    def test_representation_shape(self):
        g = featurized_graph()
        features = np.vstack([g.node(v).feature for v in g.nodes])
        reps = gcn_forward(self.params, features, [(0, 1), (0, 2)])
        self.assertEqual(reps.shape, (3, 16))
        self.assertTrue(np.all(reps >= 0))

    def test_aggregation_mixes_neighbours(self):
        """Changing a child's features moves the root's representation only when aggregating."""
        features = np.random.default_rng(0).normal(size=(2, 8))
        changed = features.copy()
        changed[1] += 1.0
        edges = [(0, 1)]
        self.assertFalse(np.allclose(gcn_forward(self.params, features, edges)[0],
                                     gcn_forward(self.params, changed, edges)[0]))
        np.testing.assert_allclose(gcn_forward(self.params, features, edges, aggregate=False)[0],
                                   gcn_forward(self.params, changed, edges, aggregate=False)[0])

    def test_feature_width_checked(self):
        with self.assertRaises(ShapeError):
            gcn_forward(self.params, np.zeros((2, 3)), [])

    def test_non_finite_features(self):
        features = np.zeros((1, 8))
        features[0, 0] = np.nan
        with self.assertRaises(NumericalError):
            gcn_forward(self.params, features, [])

    def test_initial_branch_distribution_near_uniform(self):
        rep = gcn_forward(self.params, np.ones((1, 8)), [])[0]
        probs = actor_dist(self.params, rep).branch_probs
        self.assertAlmostEqual(probs.sum(), 1.0)
        np.testing.assert_allclose(probs, np.full(5, 0.2), atol=0.05)


def random_edges(rng, n):
    return [(u, w) for u in range(n) for w in range(u + 1, n) if rng.random() < 0.4]


def dense_forward(params, features, edges):
    """D̃^-1/2 (A + I) D̃^-1/2 X W through the ReLU trunk, built from a dense adjacency."""
    n = features.shape[0]
    adjacency = np.zeros((n, n))
    for u, w in edges:
        adjacency[u, w] = adjacency[w, u] = 1.0
    a_tilde = adjacency + np.eye(n)
    d_inv_sqrt = np.diag(1.0 / np.sqrt(a_tilde.sum(axis=1)))
    h = np.maximum(d_inv_sqrt @ a_tilde @ d_inv_sqrt @ features @ params.gcn_weight, 0.0)
    h = np.maximum(h @ params.mlp1_w + params.mlp1_b, 0.0)
    return np.maximum(h @ params.mlp2_w + params.mlp2_b, 0.0)


class TestForwardOracles(unittest.TestCase):
    def setUp(self):
        self.params = PolicyParams.init(d=6, h=10, max_branches=5, seed=12)

    def test_matches_dense_formula(self):
        rng = np.random.default_rng(40)
        for _ in range(200):
            n = int(rng.integers(1, 9))
            features = rng.normal(size=(n, 6))
            edges = random_edges(rng, n)
            np.testing.assert_allclose(gcn_forward(self.params, features, edges),
                                       dense_forward(self.params, features, edges), rtol=0, atol=1e-9)

    def test_permutation_equivariance(self):
        """Relabeling nodes permutes the representations the same way."""
        rng = np.random.default_rng(41)
        for _ in range(50):
            n = int(rng.integers(2, 9))
            features = rng.normal(size=(n, 6))
            edges = random_edges(rng, n)
            perm = rng.permutation(n)
            new_index = np.argsort(perm)
            moved = [(int(new_index[u]), int(new_index[w])) for u, w in edges]
            np.testing.assert_allclose(gcn_forward(self.params, features[perm], moved),
                                       gcn_forward(self.params, features, edges)[perm], rtol=0, atol=1e-12)

    def test_representation_is_local(self):
        """A node's representation ignores features of nodes it is not adjacent to."""
        rng = np.random.default_rng(42)
        for _ in range(50):
            n = int(rng.integers(3, 9))
            features = rng.normal(size=(n, 6))
            edges = random_edges(rng, n)
            neighbours = {0} | {w for u, w in edges if u == 0} | {u for u, w in edges if w == 0}
            far = [v for v in range(n) if v not in neighbours]
            if not far:
                continue
            changed = features.copy()
            changed[far] += rng.normal(size=(len(far), 6))
            np.testing.assert_allclose(gcn_forward(self.params, changed, edges)[0],
                                       gcn_forward(self.params, features, edges)[0], rtol=0, atol=1e-12)

    def test_critic_is_dot_product(self):
        rng = np.random.default_rng(43)
        self.params.critic_b = np.array(0.3)
        for _ in range(100):
            rep = rng.normal(size=10)
            expected = sum(rep[i] * self.params.critic_w[i] for i in range(10)) + 0.3
            self.assertAlmostEqual(critic_value(self.params, rep), expected, delta=1e-12)

    def test_branch_sample_frequencies(self):
        """Sampled branch counts and dependency flags follow the actor's probabilities."""
        self.params.branch_b = np.array([1.0, 0.0, -1.0, 0.5, 2.0])
        self.params.dep_b = np.array(0.8)
        dist = actor_dist(self.params, gcn_forward(self.params, np.ones((1, 6)), [])[0])
        rng = np.random.default_rng(44)
        draws = 20000
        counts = np.zeros(5)
        dependency = 0
        for _ in range(draws):
            mode, _ = sample_action(dist, rng)
            counts[mode.branch_count - 1] += 1
            dependency += mode.use_dependency
        np.testing.assert_allclose(counts / draws, dist.branch_probs, atol=0.015)
        self.assertAlmostEqual(dependency / draws, dist.dep_prob, delta=0.015)


class TestActions(unittest.TestCase):
    def setUp(self):
        self.params = PolicyParams.init(d=8, h=16, max_branches=5, seed=3)
        self.dist = actor_dist(self.params, gcn_forward(self.params, np.ones((1, 8)), [])[0])

    def test_sample_respects_bounds(self):
        """Sampled settings always land inside their ranges."""
        rng = np.random.default_rng(0)
        for _ in range(200):
            mode, lp = sample_action(self.dist, rng)
            self.assertTrue(1 <= mode.branch_count <= 5)
            self.assertTrue(TEMPERATURE_BOUNDS[0] <= mode.temperature <= TEMPERATURE_BOUNDS[1])
            self.assertTrue(TOP_P_BOUNDS[0] <= mode.top_p <= TOP_P_BOUNDS[1])
            self.assertTrue(np.isfinite(lp))

    def test_log_prob_matches_sample(self):
        mode, lp = sample_action(self.dist, np.random.default_rng(5))
        self.assertAlmostEqual(log_prob(self.dist, mode), lp)

    def test_log_prob_without_raw_values(self):
        """A mode given only squashed values is scored through the inverse squash."""
        mode, lp = sample_action(self.dist, np.random.default_rng(9))
        plain = ModeVector(mode.branch_count, mode.temperature, mode.top_p, mode.use_dependency)
        self.assertAlmostEqual(log_prob(self.dist, plain), lp, places=6)

    def test_squash_inverse(self):
        for raw in (-2.0, 0.0, 1.3):
            self.assertAlmostEqual(unsquash(squash(raw, TEMPERATURE_BOUNDS), TEMPERATURE_BOUNDS), raw)

    def test_branch_out_of_range(self):
        with self.assertRaises(ValueError):
            log_prob(self.dist, ModeVector(6, 0.7, 0.9, False))

    def test_mode_vector_validation(self):
        with self.assertRaises(ValueError):
            ModeVector(0, 0.7, 0.9, False)
        with self.assertRaises(ValueError):
            ModeVector(2, 3.0, 0.9, False)
        with self.assertRaises(ValueError):
            ModeVector(2, 0.7, 0.05, False)

    def test_entropy_positive_at_init(self):
        self.assertGreater(entropy(self.dist), 0.0)


class TestGradients(unittest.TestCase):
    def check(self, activation, offsets, names=None, seed=0):
        params = PolicyParams.init(d=5, h=6, max_branches=4, seed=seed)
        spec = LossSpec(clip_eps=0.2, value_coef=0.5, entropy_coef=0.05, activation=activation)
        batch = random_batch(params, n=len(offsets), seed=seed + 1, offsets=offsets)
        grads, _ = backward(params, batch, spec)
        eps = 1e-6
        for name in names or params.arrays():
            value = getattr(params, name)
            flat_grad = np.asarray(grads[name]).reshape(-1)
            for k in range(value.size):
                plus, minus = params.copy(), params.copy()
                getattr(plus, name).reshape(-1)[k] += eps
                getattr(minus, name).reshape(-1)[k] -= eps
                numeric = (batch_loss(plus, batch, spec).loss - batch_loss(minus, batch, spec).loss) / (2 * eps)
                self.assertAlmostEqual(flat_grad[k], numeric, delta=1e-5 + 1e-4 * abs(numeric),
                                       msg=f"{name}[{k}]")

    def test_linear_trunk_inside_clip(self):
        """Analytic gradients match central differences with ratios near 1."""
        self.check("linear", np.zeros(6))

    def test_linear_trunk_clipped(self):
        """Ratios pushed beyond the clip range only keep the unclipped side's gradient."""
        self.check("linear", [0.5, -0.5, 0.0, 0.5, -0.5, 0.0])

    def test_relu_trunk(self):
        self.check("relu", [0.0, 0.5, -0.5, 0.0, 0.0, 0.5], seed=4)

    def test_random_instances(self):
        """Central differences agree with the analytic gradient across random parameters and batches."""
        rng = np.random.default_rng(31)
        eps = 1e-5
        for seed in range(50):
            params = PolicyParams.init(d=4, h=5, max_branches=3, seed=100 + seed)
            params.critic_b = np.array(rng.normal())
            offsets = rng.uniform(-0.5, 0.5, size=int(rng.integers(2, 7)))
            spec = LossSpec(clip_eps=0.2, value_coef=rng.uniform(0.1, 1.0),
                            entropy_coef=rng.uniform(0.0, 0.1), activation="linear")
            batch = random_batch(params, n=len(offsets), seed=200 + seed, offsets=offsets, spec=spec)
            grads, _ = backward(params, batch, spec)
            for name, value in params.arrays().items():
                flat_grad = np.asarray(grads[name]).reshape(-1)
                for k in range(value.size):
                    plus, minus = params.copy(), params.copy()
                    getattr(plus, name).reshape(-1)[k] += eps
                    getattr(minus, name).reshape(-1)[k] -= eps
                    numeric = (batch_loss(plus, batch, spec).loss - batch_loss(minus, batch, spec).loss) / (2 * eps)
                    rel = abs(flat_grad[k] - numeric) / max(abs(flat_grad[k]), abs(numeric), 1e-4)
                    self.assertLessEqual(rel, 1e-4, msg=f"instance {seed} {name}[{k}]")

    def test_global_norm_and_step(self):
        params = PolicyParams.init(d=5, h=6, max_branches=4, seed=2)
        batch = random_batch(params)
        spec = LossSpec()
        grads, before = backward(params, batch, spec)
        self.assertGreater(global_norm(grads), 0.0)
        after = batch_loss(apply_gradients(params, grads, 1e-3), batch, spec)
        self.assertLess(after.loss, before.loss)


class TestCheckpoint(unittest.TestCase):
    def test_save_and_load(self):
        params = PolicyParams.init(d=4, h=8, max_branches=3, seed=7)
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(params, Path(tmp) / "ckpt" / "latest.json", seed=7, round_index=2)
            loaded, meta = load_checkpoint(path)
        self.assertEqual(meta, {"d": 4, "h": 8, "B_max": 3, "seed": 7, "round": 2})
        for name, value in params.arrays().items():
            np.testing.assert_allclose(getattr(loaded, name), value)

    def test_shape_mismatch(self):
        params = PolicyParams.init(d=4, h=8, max_branches=3)
        arrays = {name: value.tolist() for name, value in params.arrays().items()}
        arrays["mlp1_w"] = np.zeros((8, 7)).tolist()
        with self.assertRaises(ShapeError):
            PolicyParams.from_arrays(arrays)

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            load_checkpoint("/nonexistent/ckpt.json")


class TestSelectors(unittest.TestCase):
    def test_graph_selector(self):
        """The learned selector needs a prepared graph and returns a bounded mode."""
        params = PolicyParams.init(d=8, h=16, max_branches=5)
        selector = GraphSelector(params)
        g = featurized_graph()
        with self.assertRaises(ShapeError):
            selector.select("n1", np.random.default_rng(0))
        selector.prepare(g)
        decision = selector.select("n1", np.random.default_rng(0))
        self.assertTrue(1 <= decision.mode.branch_count <= 5)
        self.assertTrue(np.isfinite(decision.log_prob))
        self.assertEqual(selector.name, "gcn")

    def test_fixed_selector(self):
        selector = make_selector("fixed", fixed_mode={"branch_count": 2, "temperature": 0.5})
        self.assertIsInstance(selector, FixedSelector)
        self.assertFalse(selector.records_transitions)
        decision = selector.select("n0", np.random.default_rng(0))
        self.assertEqual(decision.mode.branch_count, 2)
        self.assertEqual(decision.mode.temperature, 0.5)

    def test_factory(self):
        params = PolicyParams.init(d=4, h=4)
        self.assertEqual(make_selector("mlp", params).name, "mlp")
        with self.assertRaises(ValueError):
            make_selector("gcn")
        with self.assertRaises(ValueError):
            make_selector("transformer", params)


if __name__ == '__main__':
    unittest.main()
