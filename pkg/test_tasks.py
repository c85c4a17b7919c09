import json
import random
import tempfile
import unittest
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

from errors import InvalidTask
from tasks import (
    FAMILIES,
    And,
    Implies,
    IsKnave,
    IsKnight,
    Not,
    Or,
    Statement,
    check_creative,
    final_answer,
    game24_solvable,
    generate_instances,
    load_manifest,
    load_task,
    make_task,
    rules_for,
    solve_24,
    solve_kk,
    solve_latin,
    task_solvable,
    verify_24,
    verify_episode,
    verify_kk,
    verify_latin,
    write_manifest,
)

INSTANCES = Path(__file__).resolve().parent / "instances"


@lru_cache(maxsize=None)
def reachable_values(values):
    """Every value of a full binary expression over ``values`` with + - * /."""
    if len(values) == 1:
        return frozenset(values)
    results = set()
    n = len(values)
    for mask in range(1, 2 ** n - 1):
        left = tuple(sorted(values[i] for i in range(n) if mask >> i & 1))
        right = tuple(sorted(values[i] for i in range(n) if not mask >> i & 1))
        for a in reachable_values(left):
            for b in reachable_values(right):
                results.update((a + b, a - b, a * b))
                if b != 0:
                    results.add(a / b)
    return frozenset(results)


def random_latin(rng, n):
    rows, cols, symbols = list(range(n)), list(range(n)), list(range(1, n + 1))
    for order in (rows, cols, symbols):
        rng.shuffle(order)
    return [[symbols[(rows[r] + cols[c]) % n] for c in range(n)] for r in range(n)]


def is_latin(n, grid):
    target = list(range(1, n + 1))
    return (all(sorted(row) == target for row in grid)
            and all(sorted(grid[r][c] for r in range(n)) == target for c in range(n)))


def random_claim(rng, n, depth):
    if depth == 0 or rng.random() < 0.4:
        return (IsKnight if rng.random() < 0.5 else IsKnave)(rng.randrange(n))
    kind = rng.choice((Not, And, Or, Implies))
    if kind is Not:
        return Not(random_claim(rng, n, depth - 1))
    return kind(random_claim(rng, n, depth - 1), random_claim(rng, n, depth - 1))


class TestGame24(unittest.TestCase):
    def test_solver(self):
        """The exhaustive solver finds a trace that the verifier accepts."""
        for numbers in ([10, 9, 2, 3], [4, 9, 10, 13], [3, 3, 8, 8], [1, 5, 5, 5]):
            trace = solve_24(numbers)
            self.assertIsNotNone(trace, numbers)
            self.assertTrue(verify_24(numbers, trace).accepted, trace)

    def test_unsolvable(self):
        self.assertIsNone(solve_24([1, 1, 1, 1]))
        self.assertFalse(game24_solvable([Fraction(1)] * 4))

    def test_verifier_rejections(self):
        """Wrong arithmetic, unavailable operands and leftovers are all rejected."""
        numbers = [10, 9, 2, 3]
        self.assertFalse(verify_24(numbers, ["10 + 9 = 20", "20 + 2 = 22", "22 + 3 = 25"]).accepted)
        self.assertFalse(verify_24(numbers, ["10 + 10 = 20"]).accepted)
        self.assertFalse(verify_24(numbers, ["10 + 9 = 19", "19 + 2 = 21"]).accepted)
        self.assertFalse(verify_24(numbers, []).accepted)
        verdict = verify_24(numbers, ["10 + 9 = 19", "nonsense"])
        self.assertEqual(verdict.line_index, 1)

    def test_verifier_accepts_thought_lines(self):
        trace = [
            "Input:[10,9,2,3] Plan:10 + 9 = 19 Output:[2,3,19]",
            "Input:[2,3,19] Plan:2 + 3 = 5 Output:[19,5]",
            "Input:[19,5] Plan:19 + 5 = 24 Output:[24]",
        ]
        self.assertTrue(verify_24([10, 9, 2, 3], trace).accepted)

    def test_exact_fractions(self):
        """8 / (3 - 8/3) needs exact rational arithmetic."""
        trace = ["8 / 3 = 8/3", "3 - 8/3 = 1/3", "8 / 1/3 = 24"]
        self.assertTrue(verify_24([3, 3, 8, 8], trace).accepted)

    def test_solver_agrees_with_expression_search(self):
        """Over random tuples the solver finds a verified trace exactly when some expression reaches 24."""
        rng = random.Random(8)
        for _ in range(500):
            numbers = [rng.randint(1, 13) for _ in range(4)]
            trace = solve_24(numbers)
            reachable = 24 in reachable_values(tuple(sorted(Fraction(n) for n in numbers)))
            self.assertEqual(trace is not None, reachable, numbers)
            if trace is not None:
                self.assertTrue(verify_24(numbers, trace).accepted, (numbers, trace))

    def test_four_sixes(self):
        trace = solve_24([6, 6, 6, 6])
        self.assertIsNotNone(trace)
        self.assertTrue(verify_24([6, 6, 6, 6], trace).accepted)
        self.assertTrue(verify_24([6, 6, 6, 6], ["6 + 6 = 12", "12 + 6 = 18", "18 + 6 = 24"]).accepted)

    def test_exact_division_by_seven(self):
        """3 / 7 stays exact so that multiplying by 56 gives exactly 24."""
        self.assertTrue(verify_24([3, 7, 56, 1], ["3 / 7 = 3/7", "3/7 * 56 = 24", "24 * 1 = 24"]).accepted)
        self.assertFalse(verify_24([3, 7, 56, 1], ["3 / 7 = 0.42857142857142855", "0.42857142857142855 * 56 = 24",
                                                   "24 * 1 = 24"]).accepted)


class TestLatin(unittest.TestCase):
    def test_solver_respects_givens(self):
        grid = solve_latin(3, [[0, 0, 1], [1, 1, 3]])
        self.assertTrue(verify_latin(3, grid, [[0, 0, 1], [1, 1, 3]]).accepted)

    def test_unsolvable(self):
        self.assertIsNone(solve_latin(2, [[0, 0, 1], [0, 1, 1]]))

    def test_verifier(self):
        self.assertTrue(verify_latin(2, [[1, 2], [2, 1]]).accepted)
        self.assertFalse(verify_latin(2, [[1, 2], [1, 2]]).accepted)
        self.assertFalse(verify_latin(2, [[1, 2], [2, 1]], [[0, 0, 2]]).accepted)
        self.assertFalse(verify_latin(2, [[1, 3], [3, 1]]).accepted)

    def test_verifier_matches_row_and_column_check(self):
        """On random grids, valid or lightly corrupted, the verifier agrees with a direct check."""
        rng = random.Random(9)
        accepted = 0
        for _ in range(1000):
            n = rng.randint(1, 5)
            grid = random_latin(rng, n)
            for _ in range(rng.choice((0, 0, 1, 2))):
                grid[rng.randrange(n)][rng.randrange(n)] = rng.randint(1, n)
            verdict = verify_latin(n, grid)
            self.assertEqual(verdict.accepted, is_latin(n, grid), grid)
            transposed = [list(column) for column in zip(*grid)]
            self.assertEqual(verify_latin(n, transposed).accepted, verdict.accepted, grid)
            accepted += verdict.accepted
        self.assertTrue(0 < accepted < 1000)


class TestKnights(unittest.TestCase):
    def test_unique_solution(self):
        task = load_task(str(INSTANCES / "knights" / "trio.json"))
        statements = [Statement.from_dict(s) for s in task.instance["statements"]]
        self.assertEqual(solve_kk(statements, 3), [(True, False, True)])
        self.assertTrue(verify_kk(statements, 3, (True, False, True)).accepted)
        self.assertFalse(verify_kk(statements, 3, (False, True, False)).accepted)
        self.assertFalse(verify_kk(statements, 3, (True, None, True)).accepted)

    def test_description(self):
        task = load_task(str(INSTANCES / "knights" / "trio.json"))
        self.assertIn('A says: "B is a knave."', task.description)
        self.assertIn('B says: "A is a knave and B is a knave."', task.description)

    def test_out_of_range_speaker(self):
        with self.assertRaises(InvalidTask):
            solve_kk([Statement(2, IsKnight(0))], 2)

    def test_liar_paradox_has_no_solution(self):
        self.assertEqual(solve_kk([Statement(0, IsKnave(0))], 1), [])

    def test_statement_order_does_not_matter(self):
        """Shuffling the statements never changes the consistent assignments."""
        rng = random.Random(10)
        for _ in range(200):
            n = rng.randint(1, 4)
            statements = [Statement(rng.randrange(n), random_claim(rng, n, 2)) for _ in range(rng.randint(1, 5))]
            expected = solve_kk(statements, n)
            shuffled = list(statements)
            rng.shuffle(shuffled)
            self.assertEqual(solve_kk(shuffled, n), expected)


class TestCreative(unittest.TestCase):
    def test_words(self):
        verdict = check_creative(["Solar", "Harbor"], "The solar panels lit the harbor.")
        self.assertTrue(verdict.accepted)
        verdict = check_creative(["Solar", "Harbor"], "The solar panels were bright.")
        self.assertEqual(verdict.missing, ["Harbor"])

    def test_sentences(self):
        items = ["It rained.", "The sun came out."]
        text = "It rained. All day long.\n\nThe sun came out. Finally."
        self.assertTrue(check_creative(items, text, "sentences").accepted)
        self.assertFalse(check_creative(items, "It rained. The sun came out.", "sentences").accepted)


class TestTaskFiles(unittest.TestCase):
    def test_manifest(self):
        """The shipped manifest covers every family with solvable instances."""
        tasks = load_manifest(str(INSTANCES / "manifest.json"))
        self.assertEqual({t.family for t in tasks}, set(FAMILIES))
        for task in tasks:
            self.assertTrue(task_solvable(task), task.name)
        self.assertEqual(tasks[0].instance, {"numbers": [10, 9, 2, 3]})
        self.assertEqual(tasks[0].name, "easy1")

    def test_write_and_reload(self):
        tasks = generate_instances("latin", 2, seed=1, n=3) + generate_instances("game24", 2, seed=1)
        with tempfile.TemporaryDirectory() as tmp:
            manifest = write_manifest(tasks, Path(tmp))
            entries = json.loads(manifest.read_text())["instances"]
            self.assertEqual(entries[0], "latin/latin_0.json")
            reloaded = load_manifest(str(manifest))
        self.assertEqual([t.description for t in reloaded], [t.description for t in tasks])

    def test_invalid_instances(self):
        with self.assertRaises(InvalidTask):
            make_task("game24", {"numbers": [1, 2, 3]})
        with self.assertRaises(InvalidTask):
            make_task("latin", {"n": 3, "givens": [[0, 0, 4]]})
        with self.assertRaises(InvalidTask):
            make_task("creative", {"variant": "words", "words": []})
        with self.assertRaises(InvalidTask):
            make_task("chess", {})

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            load_task("/nonexistent/task.json")


class TestGenerators(unittest.TestCase):
    def test_seeded(self):
        a = generate_instances("game24", 3, seed=5)
        b = generate_instances("game24", 3, seed=5)
        self.assertEqual([t.instance for t in a], [t.instance for t in b])
        for task in a:
            self.assertIsNotNone(solve_24(task.instance["numbers"]))

    def test_knights_unique(self):
        for task in generate_instances("knights", 2, seed=0, n=3):
            statements = [Statement.from_dict(s) for s in task.instance["statements"]]
            self.assertEqual(len(solve_kk(statements, 3)), 1)

    def test_latin_generated_solvable(self):
        for task in generate_instances("latin", 3, seed=2, n=4, density=0.4):
            self.assertTrue(task_solvable(task))

    def test_creative_sentences(self):
        task = generate_instances("creative", 1, seed=0, variant="sentences")[0]
        self.assertEqual(len(task.instance["sentences"]), 4)


class TestStepRules(unittest.TestCase):
    def test_knights_walkthrough(self):
        """Following solvable moves reaches a verified assignment."""
        task = load_task(str(INSTANCES / "knights" / "trio.json"))
        rules = rules_for(task)
        state, path = rules.initial_state(task), []
        while not rules.is_solved(task, state):
            move = next(m for m in rules.moves(task, state) if rules.is_solvable(task, m.state))
            path.append(move.text)
            state = rules.state_of(task, move.text)
        self.assertTrue(verify_episode(task, path).accepted)
        self.assertEqual(final_answer(task, path[-1]), "[A=Knight,B=Knave,C=Knight]")

    def test_creative_walkthrough(self):
        task = load_task(str(INSTANCES / "creative" / "words4.json"))
        rules = rules_for(task)
        state, path = rules.initial_state(task), []
        while len(state) > 1:
            move = rules.moves(task, state)[0]
            path.append(move.text)
            state = rules.state_of(task, move.text)
        self.assertTrue(rules.is_solved(task, state))
        self.assertTrue(verify_episode(task, path).accepted)
        self.assertEqual(rules.score(task, state), 10)

    def test_latin_walkthrough(self):
        task = load_task(str(INSTANCES / "latin" / "square3.json"))
        rules = rules_for(task)
        state, path = rules.initial_state(task), []
        while not rules.is_solved(task, state):
            move = next(m for m in rules.moves(task, state) if rules.is_solvable(task, m.state))
            path.append(move.text)
            state = rules.state_of(task, move.text)
        self.assertTrue(verify_episode(task, path).accepted)
        self.assertEqual(json.loads(final_answer(task, path[-1]))[0][0], 1)

    def test_verify_episode_empty(self):
        task = make_task("game24", {"numbers": [10, 9, 2, 3]})
        self.assertFalse(verify_episode(task, []).accepted)


if __name__ == '__main__':
    unittest.main()
