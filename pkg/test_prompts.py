import random
import tempfile
import unittest
from pathlib import Path

from errors import EmptyGeneration, MissingPlaceholder, Unparseable
from prompts import (
    PromptTemplate,
    TemplateKind,
    TemplateSet,
    braced,
    parse_braced_group,
    parse_label,
    parse_score,
    parse_tau,
    parse_thoughts,
    tau,
    tau_single,
)
from reasoning_graph import Label, add_children, ancestor_subgraph, apply_label, new_graph


class TestTemplates(unittest.TestCase):
    def setUp(self):
        self.templates = TemplateSet()

    def test_render_generate(self):
        """Generate prompts carry the task, context, format and branch count."""
        text = self.templates.render_generate("T", "CTX", "FMT", 3, use_dependency=False)
        self.assertIn("To address the task: T,", text)
        self.assertIn("CTX", text)
        self.assertIn("FMT", text)
        self.assertTrue(text.endswith("Generate 3 different thoughts."))

    def test_dependency_sentence_appended(self):
        """use_dependency appends the dependency sentence after the template body."""
        plain = self.templates.render_generate("T", "CTX", "FMT", 2, use_dependency=False)
        with_dep = self.templates.render_generate("T", "CTX", "FMT", 2, use_dependency=True)
        self.assertTrue(with_dep.startswith(plain))
        self.assertTrue(with_dep.endswith(self.templates.dependency_sentence))

    def test_bound_values_are_not_reexpanded(self):
        """A bound value containing a placeholder name is inserted literally."""
        text = self.templates.render(TemplateKind.FORMAT, task="solve {subgraph}")
        self.assertIn("solve {subgraph}", text)

    def test_missing_binding(self):
        with self.assertRaises(MissingPlaceholder):
            self.templates.render(TemplateKind.EVALUATE, task="T", results="{r}")

    def test_template_without_placeholder_rejected(self):
        """A template body must contain every placeholder its kind requires."""
        with self.assertRaises(MissingPlaceholder):
            PromptTemplate(TemplateKind.NODE_CLASS, "Task: {task}. Answer 1 to 4.")

    def test_override_directory(self):
        """Files in the override directory replace the bundled ones."""
        with tempfile.TemporaryDirectory() as tmp:
            Path(tmp, "format.txt").write_text("Describe the format of {task}.", encoding="utf-8")
            templates = TemplateSet(tmp)
            self.assertEqual(templates.render(TemplateKind.FORMAT, task="X"), "Describe the format of X.")
            self.assertIn("Generate 2 different thoughts",
                          templates.render_generate("T", "S", "F", 2, use_dependency=False))

    def test_override_with_unbound_optional_placeholder(self):
        """An override may use a known placeholder its kind does not require, but it must be bound."""
        with tempfile.TemporaryDirectory() as tmp:
            Path(tmp, "node_class.txt").write_text("{task} | {subgraph} | {results}", encoding="utf-8")
            templates = TemplateSet(tmp)
            with self.assertRaises(MissingPlaceholder) as ctx:
                templates.render(TemplateKind.NODE_CLASS, task="T", subgraph="S")
            self.assertIn("results", str(ctx.exception))
            text = templates.render(TemplateKind.NODE_CLASS, task="T", subgraph="S", results="R")
        self.assertEqual(text, "T | S | R")

    def test_missing_override_directory(self):
        with self.assertRaises(FileNotFoundError):
            TemplateSet("/nonexistent/templates")


class TestTau(unittest.TestCase):
    def test_single_node(self):
        """A one-node subgraph has no relation sentence."""
        g = new_graph("task")
        text = tau(ancestor_subgraph(g, g.root), g)
        self.assertEqual(text, "The former generated thoughts are: {task}")

    def test_parent_and_child(self):
        """Two thoughts are listed root-ward first with one relation sentence."""
        g = new_graph("task")
        apply_label(g, g.root, Label.CONTINUE)
        kid = add_children(g, g.root, ["step one"])[0]
        text = tau(ancestor_subgraph(g, kid, beta=2), g)
        self.assertEqual(
            text,
            "The former generated thoughts are: {task}, {step one}. "
            "Thought 1 is the former thought of Thought 2.",
        )
        self.assertEqual(parse_tau(text), ["task", "step one"])

    def test_braces_are_escaped(self):
        """Thoughts containing braces parse back to the original text."""
        thought = 'Output: {"a": {"b": 1}}, done'
        text = tau_single(thought)
        self.assertEqual(parse_tau(text), [thought])

    def test_parse_tau_inside_prompt(self):
        """The serialized thoughts can be located inside a larger prompt."""
        g = new_graph("Numbers: [1, 2]")
        apply_label(g, g.root, Label.CONTINUE)
        kid = add_children(g, g.root, ["1+2=3"])[0]
        prompt = f"Task. {tau(ancestor_subgraph(g, kid), g)}, to generate the current thought"
        self.assertEqual(parse_tau(prompt), ["Numbers: [1, 2]", "1+2=3"])

    def test_parse_braced_group_errors(self):
        with self.assertRaises(Unparseable):
            parse_braced_group("abc", 0)
        with self.assertRaises(Unparseable):
            parse_braced_group("{open", 0)

    def test_braced(self):
        self.assertEqual(braced("a{b}"), "{a{{b}}}")

    def test_random_chains_parse_back(self):
        """Chains of random texts full of braces and separators serialize and parse back unchanged."""
        rng = random.Random(11)
        alphabet = "ab {}{}}{, .:\"[]1"
        for _ in range(300):
            depth = rng.randint(1, 5)
            texts = ["".join(rng.choice(alphabet) for _ in range(rng.randint(1, 12))) for _ in range(depth)]
            texts[0] = "t" + texts[0]
            g = new_graph(texts[0])
            node = g.root
            for text in texts[1:]:
                apply_label(g, node, Label.CONTINUE)
                node = add_children(g, node, [text])[0]
            self.assertEqual(parse_tau(tau(ancestor_subgraph(g, node, beta=depth), g)), texts)
            self.assertEqual(parse_tau(tau_single(texts[-1])), [texts[-1]])


class TestReplyParsing(unittest.TestCase):
    def test_label(self):
        """The first standalone digit 1-4 is the label."""
        self.assertEqual(parse_label("The answer is 3.").label, 3)
        self.assertEqual(parse_label("(2) Continue").label, 2)

    def test_label_ignores_longer_numbers(self):
        self.assertEqual(parse_label("After 24 steps: 4").label, 4)

    def test_label_unparseable(self):
        with self.assertRaises(Unparseable):
            parse_label("no idea")
        with self.assertRaises(Unparseable):
            parse_label("")

    def test_score_is_clamped(self):
        """Scores are clamped into [0, 10]."""
        self.assertEqual(parse_score("7"), 7)
        self.assertEqual(parse_score("Score: 15"), 10)
        self.assertEqual(parse_score("-3"), 0)
        with self.assertRaises(Unparseable):
            parse_score("great")

    def test_numbered_thoughts(self):
        """Numbered items become separate thoughts, truncated to the request."""
        reply = "1. first\n2) second\nstill second\n3. third"
        self.assertEqual(parse_thoughts(reply, 2), ["first", "second\nstill second"])

    def test_blank_line_blocks(self):
        self.assertEqual(parse_thoughts("alpha\n\nbeta\n", 5), ["alpha", "beta"])

    def test_empty_generation(self):
        with self.assertRaises(EmptyGeneration):
            parse_thoughts("   \n\n", 3)

    def test_expected_must_be_positive(self):
        with self.assertRaises(ValueError):
            parse_thoughts("1. x", 0)


if __name__ == '__main__':
    unittest.main()
