"""Seeded synthetic tasks and the pretraining corpus mixture.

Every generator is a pure function of ``(spec, seed, index)``: each item gets
its own ``numpy`` generator seeded with ``[seed, index]``.
"""

from __future__ import annotations

import ast
import json
import keyword
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import ClassVar, Iterable

import numpy as np

LETTERS = string.ascii_lowercase


def _rng(seed: int, index: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([salt, seed, index])


def _random_word(rng: np.random.Generator, min_len: int, max_len: int) -> str:
    n = int(rng.integers(min_len, max_len + 1))
    return "".join(LETTERS[i] for i in rng.integers(0, 26, size=n))


@dataclass(frozen=True)
class TaskSpec:
    """Base class; subclasses implement :meth:`pair`."""

    kind: ClassVar[str] = ""
    target_window: int = 16

    def pair(self, seed: int, index: int) -> tuple[str, str]:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}

    @property
    def max_source_len(self) -> int:
        raise NotImplementedError


@dataclass(frozen=True)
class CopyTask(TaskSpec):
    kind: ClassVar[str] = "copy"
    min_len: int = 1
    max_len: int = 16

    def pair(self, seed, index):
        s = _random_word(_rng(seed, index, 1), self.min_len, self.max_len)
        return s, s

    @property
    def max_source_len(self):
        return self.max_len


@dataclass(frozen=True)
class ReverseTask(TaskSpec):
    kind: ClassVar[str] = "reverse"
    min_len: int = 1
    max_len: int = 16

    def pair(self, seed, index):
        s = _random_word(_rng(seed, index, 2), self.min_len, self.max_len)
        return s, s[::-1]

    @property
    def max_source_len(self):
        return self.max_len


def default_permutation(key_seed: int = 1234) -> str:
    order = np.random.default_rng(key_seed).permutation(26)
    return "".join(LETTERS[i] for i in order)


@dataclass(frozen=True)
class SubstitutionCipherTask(TaskSpec):
    """Letter-wise substitution: target[i] = permutation[source[i]]."""

    kind: ClassVar[str] = "cipher"
    min_len: int = 1
    max_len: int = 16
    permutation: str = field(default_factory=default_permutation)

    def __post_init__(self):
        if sorted(self.permutation) != list(LETTERS):
            raise ValueError("permutation must be a rearrangement of a-z")

    def encode(self, text: str) -> str:
        return text.translate(str.maketrans(LETTERS, self.permutation))

    def decode(self, text: str) -> str:
        return text.translate(str.maketrans(self.permutation, LETTERS))

    def pair(self, seed, index):
        s = _random_word(_rng(seed, index, 3), self.min_len, self.max_len)
        return s, self.encode(s)

    @property
    def max_source_len(self):
        return self.max_len


# (source template, target template); {a}, {b} are identifiers, {n} a digit.
CODE_TEMPLATES: tuple[tuple[str, str], ...] = (
    ("add {a} {b}", "def f({a},{b}):return {a}+{b}"),
    ("sub {a} {b}", "def f({a},{b}):return {a}-{b}"),
    ("mul {a} {b}", "def f({a},{b}):return {a}*{b}"),
    ("max {a} {b}", "def f({a},{b}):return max({a},{b})"),
    ("neg {a}", "def f({a}):return -{a}"),
    ("square {a}", "def f({a}):return {a}*{a}"),
    ("len {a}", "def f({a}):return len({a})"),
    ("abs {a}", "def f({a}):return {a} if {a}>0 else -{a}"),
    ("scale {a} {n}", "def f({a}):return {a}*{n}"),
    ("first {a}", "def f({a}):return {a}[0]"),
)


@dataclass(frozen=True)
class PythonLikeTemplateTask(TaskSpec):
    """Short instruction -> one-line python function, from a fixed template set."""

    kind: ClassVar[str] = "code"
    target_window: int = 40
    max_name_len: int = 2
    templates: tuple[tuple[str, str], ...] = CODE_TEMPLATES

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(tuple(t) for t in self.templates))

    def pair(self, seed, index):
        rng = _rng(seed, index, 4)
        src, tgt = self.templates[int(rng.integers(len(self.templates)))]
        a = self._name(rng)
        b = a
        while b == a:
            b = self._name(rng)
        n = str(int(rng.integers(2, 10)))
        return src.format(a=a, b=b, n=n), tgt.format(a=a, b=b, n=n)

    def _name(self, rng: np.random.Generator) -> str:
        while True:
            name = _random_word(rng, 1, self.max_name_len)
            if not keyword.iskeyword(name):
                return name

    @property
    def max_source_len(self):
        return max(len(s.format(a="x" * self.max_name_len, b="y" * self.max_name_len, n="9"))
                   for s, _ in self.templates)

    def conforms(self, candidate: str, reference: str) -> bool:
        """Structural check: the candidate parses to the same syntax tree as the reference."""
        try:
            return ast.dump(ast.parse(candidate)) == ast.dump(ast.parse(reference))
        except (SyntaxError, ValueError):
            return False


TASK_KINDS = {cls.kind: cls for cls in (CopyTask, ReverseTask, SubstitutionCipherTask, PythonLikeTemplateTask)}


def task_from_dict(d: dict) -> TaskSpec:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {sorted(TASK_KINDS)}")
    return TASK_KINDS[kind](**d)


def generate_task_pairs(spec: TaskSpec, seed: int, n: int, start: int = 0) -> list[tuple[str, str]]:
    """``n`` deterministic (source, target) pairs for indices ``start..start+n-1``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [spec.pair(seed, i) for i in range(start, start + n)]


def train_test_split(spec: TaskSpec, seed: int, n_train: int, n_test: int):
    """Disjoint train and test pair lists; test sources never occur in train."""
    train = generate_task_pairs(spec, seed, n_train)
    seen = {s for s, _ in train}
    test: list[tuple[str, str]] = []
    i = n_train
    while len(test) < n_test:
        s, t = spec.pair(seed, i)
        if s not in seen:
            test.append((s, t))
            seen.add(s)
        i += 1
        if i > n_train + 100 * n_test:
            raise ValueError("task too small for a disjoint test split")
    return train, test


def write_pairs_jsonl(path: str | Path, pairs: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s, t in pairs:
            fh.write(json.dumps({"source": s, "target": t}, ensure_ascii=False) + "\n")


def read_pairs_jsonl(path: str | Path) -> list[tuple[str, str]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if set(obj) != {"source", "target"}:
                raise ValueError(f"{path}:{lineno}: expected keys source/target, got {sorted(obj)}")
            pairs.append((obj["source"], obj["target"]))
    return pairs


# Pretraining corpus stand-in: template-grammar prose and python-like code.
_NOUNS = "cat dog river city tree house bird king child road stone ship song letter garden".split()
_ADJS = "old small red quiet bright dark happy cold green long".split()
_VERBS = "sees finds follows builds carries paints hears keeps opens answers".split()
_ADVS = "slowly often never quickly again softly".split()


def _prose(rng: np.random.Generator) -> str:
    def pick(words):
        return words[int(rng.integers(len(words)))]

    sentences = []
    for _ in range(int(rng.integers(1, 3))):
        s = f"the {pick(_ADJS)} {pick(_NOUNS)} {pick(_VERBS)} the {pick(_NOUNS)}"
        if rng.random() < 0.5:
            s += f" {pick(_ADVS)}"
        sentences.append(s + ".")
    return " ".join(sentences)


def corpus_document(seed: int, index: int, code_fraction: float = 0.2) -> str:
    """One pretraining document: prose with probability 1 - code_fraction, else code."""
    rng = _rng(seed, index, 5)
    if rng.random() < code_fraction:
        src, tgt = PythonLikeTemplateTask().pair(seed, index)
        return f"# {src}\n{tgt}"
    return _prose(rng)
