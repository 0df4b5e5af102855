"""Deterministic synthetic scenes and referring language.

A scene is a ``g × g`` grid holding a handful of objects, each with a
colour, a shape and a size.  For every scene the generator produces a
referring expression of one of three kinds:

``phrase``
    attribute words only, e.g. ``large red circle``.
``sentence``
    a phrase followed by spatial clauses, e.g.
    ``red circle left of blue square``.
``dialog``
    question/answer rounds, e.g. ``is it red ? yes`` then
    ``is it a circle ? no``, built by greedy attribute elimination.

Every emitted instance is checked by :func:`oracle_resolve`, a
brute-force symbolic resolver, so that the expression designates exactly
the target object.  All randomness flows through the ``numpy`` generator
passed in by the caller.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .constants import (
    ANSWER_WORDS,
    COLORS,
    DEFAULT_KINDS,
    GRID_SIDE,
    KINDS,
    MAX_EXPRESSION_RETRIES,
    MAX_OBJECTS,
    MAX_SCENE_RETRIES,
    MIN_OBJECTS,
    NOUN_WORD,
    SHAPES,
    SIZES,
    VOCABULARY,
)
from .exceptions import (
    CapacityError,
    ConfigError,
    ExpressionParseError,
    NoDistinguishingExpressionError,
    VocabularyError,
)

logger = logging.getLogger(__name__)

ATTRIBUTES: dict[str, tuple[str, ...]] = {"color": COLORS, "shape": SHAPES, "size": SIZES}
_WORD_ATTRIBUTE: dict[str, str] = {
    word: name for name, values in ATTRIBUTES.items() for word in values
}
_RELATIONS: tuple[str, ...] = ("left", "right", "above", "below")


# ─── Vocabulary ──────────────────────────────────────────────────────────────


class Vocabulary:
    """Closed token inventory mapping words to integer ids."""

    def __init__(self, tokens: Sequence[str] = VOCABULARY) -> None:
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("vocabulary tokens must be unique")
        self._tokens: tuple[str, ...] = tuple(tokens)
        self._ids: dict[str, int] = {tok: i for i, tok in enumerate(self._tokens)}

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    @property
    def size(self) -> int:
        return len(self._tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and other._tokens == self._tokens

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._tokens):
            raise VocabularyError(f"token id {token_id} outside vocabulary of {len(self)}")
        return self._tokens[token_id]

    def encode(self, words: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id(w) for w in words)

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.token(i) for i in ids)


DEFAULT_VOCABULARY = Vocabulary()


# ─── Expressions ─────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Word:
    """A single-token expression unit."""

    token: int

    @property
    def tokens(self) -> tuple[int, ...]:
        return (self.token,)


@dataclass(frozen=True)
class QAPair:
    """A dialog round: question tokens followed by the answer token."""

    tokens: tuple[int, ...]


Unit = Union[Word, QAPair]


@dataclass(frozen=True)
class ExpressionSeq:
    """Ordered expression units ``d_1 .. d_L`` over a fixed vocabulary.

    A sequence is homogeneous: all units are words or all are QA pairs.
    """

    units: tuple[Unit, ...]
    vocabulary_size: int = DEFAULT_VOCABULARY.size

    def __post_init__(self) -> None:
        if not self.units:
            raise ExpressionParseError("an expression needs at least one unit")
        kinds = {type(u) for u in self.units}
        if len(kinds) != 1:
            raise ExpressionParseError("expression mixes words and QA pairs")
        for unit in self.units:
            if not unit.tokens:
                raise ExpressionParseError("empty QA pair")
            for tok in unit.tokens:
                if not 0 <= tok < self.vocabulary_size:
                    raise VocabularyError(
                        f"token id {tok} outside vocabulary of {self.vocabulary_size}"
                    )

    def __len__(self) -> int:
        return len(self.units)

    @property
    def is_dialog(self) -> bool:
        return isinstance(self.units[0], QAPair)

    @classmethod
    def from_words(cls, words: Sequence[str], vocabulary: Vocabulary = DEFAULT_VOCABULARY) -> "ExpressionSeq":
        return cls(tuple(Word(i) for i in vocabulary.encode(words)), vocabulary.size)

    @classmethod
    def from_rounds(
        cls, rounds: Sequence[Sequence[str]], vocabulary: Vocabulary = DEFAULT_VOCABULARY
    ) -> "ExpressionSeq":
        return cls(tuple(QAPair(vocabulary.encode(r)) for r in rounds), vocabulary.size)

    def render(self, vocabulary: Vocabulary = DEFAULT_VOCABULARY) -> list[str]:
        """Human-readable text of each unit."""
        return [" ".join(vocabulary.decode(u.tokens)) for u in self.units]


# ─── Scenes ──────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class SceneObject:
    color: str
    shape: str
    size: str
    row: int
    col: int

    def __post_init__(self) -> None:
        for name, values in ATTRIBUTES.items():
            if getattr(self, name) not in values:
                raise ConfigError(f"unknown {name} {getattr(self, name)!r}")

    @property
    def cell(self) -> tuple[int, int]:
        return (self.row, self.col)

    @property
    def attributes(self) -> dict[str, str]:
        return {"color": self.color, "shape": self.shape, "size": self.size}


Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class Scene:
    """A synthetic image: objects on distinct cells of a ``g × g`` grid.

    The image frame is ``g`` units wide and high; the proposal box of an
    object is its cell, ``(col, row, col + 1, row + 1)`` as
    ``(x_min, y_min, x_max, y_max)``.
    """

    grid_side: int
    objects: tuple[SceneObject, ...]
    target_index: int = 0

    def __post_init__(self) -> None:
        g = self.grid_side
        n = len(self.objects)
        if g < 1:
            raise ConfigError("grid side must be positive")
        if not 2 <= n <= g * g:
            raise CapacityError(f"a {g}x{g} scene holds 2..{g * g} objects, got {n}")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != n:
            raise ConfigError("two objects share a cell")
        if any(not (0 <= r < g and 0 <= c < g) for r, c in cells):
            raise ConfigError("object placed outside the grid")
        if not 0 <= self.target_index < n:
            raise ConfigError(f"target index {self.target_index} out of range for {n} objects")

    @property
    def num_proposals(self) -> int:
        return len(self.objects)

    @property
    def image_dims(self) -> tuple[float, float]:
        return (float(self.grid_side), float(self.grid_side))

    @property
    def proposals(self) -> tuple[Box, ...]:
        return tuple(
            (float(o.col), float(o.row), float(o.col + 1), float(o.row + 1)) for o in self.objects
        )

    def object_at(self, row: int, col: int) -> Optional[SceneObject]:
        for obj in self.objects:
            if obj.cell == (row, col):
                return obj
        return None


@dataclass(frozen=True)
class SceneConfig:
    grid_side: int = GRID_SIDE
    min_objects: int = MIN_OBJECTS
    max_objects: int = MAX_OBJECTS

    def __post_init__(self) -> None:
        if self.min_objects < 2 or self.min_objects > self.max_objects:
            raise ConfigError(
                f"object range [{self.min_objects}, {self.max_objects}] is invalid (minimum 2)"
            )
        if self.max_objects > self.grid_side**2:
            raise CapacityError(
                f"{self.max_objects} objects do not fit on a {self.grid_side}x{self.grid_side} grid"
            )


@dataclass(frozen=True)
class GenerationConfig:
    """Knobs for instance generation.

    Args:
        scene: Scene layout.
        kinds: Expression kinds drawn uniformly per instance.
        location_words: Allow the absolute ``in the middle`` clause and
            position questions.  Relations between objects stay allowed.
        dialog_rounds: When set, every dialog has exactly this many rounds.
    """

    scene: SceneConfig = field(default_factory=SceneConfig)
    kinds: tuple[str, ...] = DEFAULT_KINDS
    location_words: bool = True
    dialog_rounds: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.kinds or any(k not in KINDS for k in self.kinds):
            raise ConfigError(f"kinds must be a non-empty subset of {KINDS}, got {self.kinds}")
        if self.dialog_rounds is not None and self.dialog_rounds < 1:
            raise ConfigError("dialog_rounds must be at least 1")


def generate_scene(rng: np.random.Generator, config: SceneConfig = SceneConfig()) -> Scene:
    """Place a random number of objects on distinct cells with uniform attributes."""
    g = config.grid_side
    if config.max_objects > g * g:
        raise CapacityError(f"{config.max_objects} objects do not fit on a {g}x{g} grid")
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    cells = rng.choice(g * g, size=n, replace=False)
    objects = tuple(
        SceneObject(
            color=COLORS[int(rng.integers(len(COLORS)))],
            shape=SHAPES[int(rng.integers(len(SHAPES)))],
            size=SIZES[int(rng.integers(len(SIZES)))],
            row=int(cell) // g,
            col=int(cell) % g,
        )
        for cell in cells
    )
    return Scene(grid_side=g, objects=objects, target_index=int(rng.integers(n)))


# ─── Grammar ─────────────────────────────────────────────────────────────────


def _middle_band(grid_side: int) -> range:
    return range((grid_side - 1) // 2, grid_side // 2 + 1)


def _in_middle(obj: SceneObject, grid_side: int) -> bool:
    band = _middle_band(grid_side)
    return obj.row in band and obj.col in band


def _relation_holds(relation: str, obj: SceneObject, landmark: SceneObject) -> bool:
    if relation == "left":
        return obj.col < landmark.col
    if relation == "right":
        return obj.col > landmark.col
    if relation == "above":
        return obj.row < landmark.row
    return obj.row > landmark.row


@dataclass(frozen=True)
class Question:
    """A yes/no question about one attribute or about position."""

    kind: str  # "color" | "shape" | "size" | "left" | "top" | "middle"
    value: str = ""

    def holds(self, obj: SceneObject, grid_side: int) -> bool:
        if self.kind in ATTRIBUTES:
            return getattr(obj, self.kind) == self.value
        if self.kind == "left":
            return obj.col < grid_side / 2
        if self.kind == "top":
            return obj.row < grid_side / 2
        return _in_middle(obj, grid_side)

    def words(self) -> list[str]:
        if self.kind == "shape":
            return ["is", "it", "a", self.value, "?"]
        if self.kind in ATTRIBUTES:
            return ["is", "it", self.value, "?"]
        if self.kind == "middle":
            return ["is", "it", "in", "the", "middle", "?"]
        return ["is", "it", "on", "the", self.kind, "?"]


def _parse_phrase(words: Sequence[str], start: int) -> tuple[dict[str, str], int]:
    """Consume attribute words (and an optional trailing noun) from ``start``."""
    constraints: dict[str, str] = {}
    i = start
    while i < len(words) and (words[i] in _WORD_ATTRIBUTE or words[i] == NOUN_WORD):
        word = words[i]
        i += 1
        if word == NOUN_WORD:
            break
        name = _WORD_ATTRIBUTE[word]
        if name in constraints:
            raise ExpressionParseError(f"attribute {name} given twice in phrase")
        constraints[name] = word
    if i == start:
        raise ExpressionParseError(f"expected a phrase at position {start}, got {words[start:]!r}")
    return constraints, i


def _matches(obj: SceneObject, constraints: dict[str, str]) -> bool:
    return all(getattr(obj, name) == value for name, value in constraints.items())


def _parse_question(words: Sequence[str]) -> tuple[Question, bool]:
    if len(words) < 2 or words[-1] not in ANSWER_WORDS:
        raise ExpressionParseError(f"QA pair must end with yes/no: {' '.join(words)!r}")
    answer = words[-1] == "yes"
    q = list(words[:-1])
    if q[:2] != ["is", "it"] or q[-1] != "?":
        raise ExpressionParseError(f"malformed question {' '.join(q)!r}")
    body = q[2:-1]
    if len(body) == 1 and body[0] in _WORD_ATTRIBUTE and _WORD_ATTRIBUTE[body[0]] != "shape":
        return Question(_WORD_ATTRIBUTE[body[0]], body[0]), answer
    if len(body) == 2 and body[0] == "a" and body[1] in SHAPES:
        return Question("shape", body[1]), answer
    if body in (["on", "the", "left"], ["on", "the", "top"]):
        return Question(body[2]), answer
    if body == ["in", "the", "middle"]:
        return Question("middle"), answer
    raise ExpressionParseError(f"unknown question {' '.join(q)!r}")


def _resolve_words(scene: Scene, words: Sequence[str]) -> set[int]:
    head, i = _parse_phrase(words, 0)
    checks = [lambda idx, c=head: _matches(scene.objects[idx], c)]
    while i < len(words):
        word = words[i]
        if word in ("left", "right"):
            if i + 1 >= len(words) or words[i + 1] != "of":
                raise ExpressionParseError(f"expected 'of' after {word!r}")
            landmark, i = _parse_phrase(words, i + 2)
        elif word in ("above", "below"):
            landmark, i = _parse_phrase(words, i + 1)
        elif word == "in":
            if list(words[i : i + 3]) != ["in", "the", "middle"]:
                raise ExpressionParseError("expected 'in the middle'")
            checks.append(lambda idx: _in_middle(scene.objects[idx], scene.grid_side))
            i += 3
            continue
        else:
            raise ExpressionParseError(f"unexpected word {word!r} at position {i}")

        def related(idx: int, rel: str = word, lm: dict[str, str] = landmark) -> bool:
            obj = scene.objects[idx]
            return any(
                j != idx and _matches(other, lm) and _relation_holds(rel, obj, other)
                for j, other in enumerate(scene.objects)
            )

        checks.append(related)
    return {idx for idx in range(scene.num_proposals) if all(c(idx) for c in checks)}


def oracle_resolve(
    scene: Scene,
    expression: Union[ExpressionSeq, Sequence[Unit]],
    vocabulary: Vocabulary = DEFAULT_VOCABULARY,
) -> set[int]:
    """Return the indices of every object satisfying all constraints.

    Word units are read together as one phrase/sentence; each QA pair is an
    independent constraint.  An empty constraint list selects every object.
    """
    units = expression.units if isinstance(expression, ExpressionSeq) else tuple(expression)
    candidates = set(range(scene.num_proposals))
    words = [vocabulary.token(u.token) for u in units if isinstance(u, Word)]
    if words:
        candidates &= _resolve_words(scene, words)
    for unit in units:
        if isinstance(unit, QAPair):
            question, answer = _parse_question(vocabulary.decode(unit.tokens))
            candidates = {
                idx
                for idx in candidates
                if question.holds(scene.objects[idx], scene.grid_side) == answer
            }
    return candidates


# ─── Generation ──────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class GroundingInstance:
    """A scene, an expression that resolves to exactly the target, and its kind."""

    scene: Scene
    expression: ExpressionSeq
    kind: str
    target_index: int

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown expression kind {self.kind!r}")
        if self.target_index != self.scene.target_index:
            raise ConfigError("instance and scene disagree on the target")
        resolved = oracle_resolve(self.scene, self.expression)
        if resolved != {self.target_index}:
            raise NoDistinguishingExpressionError(
                f"expression resolves to {sorted(resolved)}, not {{{self.target_index}}}"
            )


_ATTRIBUTE_SUBSETS: tuple[tuple[str, ...], ...] = tuple(
    combo for r in (1, 2, 3) for combo in itertools.combinations(("size", "color", "shape"), r)
)


def _render_phrase(obj: SceneObject, subset: Sequence[str], rng: np.random.Generator) -> list[str]:
    words = [getattr(obj, name) for name in ("size", "color") if name in subset]
    if "shape" in subset:
        words.append(obj.shape)
    elif rng.random() < 0.5:
        words.append(NOUN_WORD)
    return words


def _words_resolve_to(scene: Scene, words: list[str], target: int) -> bool:
    return _resolve_words(scene, words) == {target}


def _phrase_for(scene: Scene, target: int, rng: np.random.Generator) -> Optional[list[str]]:
    obj = scene.objects[target]
    for k in rng.permutation(len(_ATTRIBUTE_SUBSETS)):
        words = _render_phrase(obj, _ATTRIBUTE_SUBSETS[int(k)], rng)
        if _words_resolve_to(scene, words, target):
            return words
    return None


def _sentence_for(
    scene: Scene, target: int, rng: np.random.Generator, location_words: bool
) -> Optional[list[str]]:
    obj = scene.objects[target]
    others = [j for j in range(scene.num_proposals) if j != target]
    for _ in range(MAX_EXPRESSION_RETRIES):
        head = _ATTRIBUTE_SUBSETS[int(rng.integers(len(_ATTRIBUTE_SUBSETS)))]
        words = _render_phrase(obj, head, rng)
        for _clause in range(2):
            use_middle = (
                location_words
                and _in_middle(obj, scene.grid_side)
                and "middle" not in words
                and rng.random() < 0.25
            )
            if use_middle:
                words += ["in", "the", "middle"]
            else:
                j = others[int(rng.integers(len(others)))]
                landmark = scene.objects[j]
                holding = [r for r in _RELATIONS if _relation_holds(r, obj, landmark)]
                if not holding:
                    continue
                relation = holding[int(rng.integers(len(holding)))]
                subset = _ATTRIBUTE_SUBSETS[int(rng.integers(len(_ATTRIBUTE_SUBSETS)))]
                words += [relation, "of"] if relation in ("left", "right") else [relation]
                words += _render_phrase(landmark, subset, rng)
            if _words_resolve_to(scene, words, target):
                return words
    return None


def _question_pool(location_words: bool) -> list[Question]:
    pool = [Question(name, value) for name, values in ATTRIBUTES.items() for value in values]
    if location_words:
        pool += [Question("left"), Question("top"), Question("middle")]
    return pool


_ELIMINATION_ORDER: tuple[tuple[str, ...], ...] = (
    ("color",),
    ("shape",),
    ("size",),
    ("left", "top", "middle"),
)


def _dialog_for(
    scene: Scene,
    target: int,
    rng: np.random.Generator,
    location_words: bool,
    rounds: Optional[int],
) -> Optional[list[list[str]]]:
    """Greedy attribute elimination: colour, then shape, size and position."""
    g = scene.grid_side
    obj = scene.objects[target]
    pool = _question_pool(location_words)
    candidates = set(range(scene.num_proposals))
    asked: list[Question] = []
    for kinds in _ELIMINATION_ORDER:
        while len(candidates) > 1:
            options = [q for q in pool if q.kind in kinds and q not in asked]
            if not options:
                break
            gains = []
            for q in options:
                truth = q.holds(obj, g)
                gains.append(sum(q.holds(scene.objects[i], g) != truth for i in candidates))
            best = max(gains)
            if best == 0:
                break
            ties = [q for q, gain in zip(options, gains) if gain == best]
            question = ties[int(rng.integers(len(ties)))]
            truth = question.holds(obj, g)
            candidates = {i for i in candidates if question.holds(scene.objects[i], g) == truth}
            asked.append(question)
    if len(candidates) != 1:
        return None
    if rounds is not None:
        if len(asked) > rounds:
            return None
        spare = [q for q in pool if q not in asked]
        extra = rounds - len(asked)
        if extra > len(spare):
            return None
        for k in rng.permutation(len(spare))[:extra]:
            asked.insert(int(rng.integers(len(asked) + 1)), spare[int(k)])
    return [q.words() + ["yes" if q.holds(obj, g) else "no"] for q in asked]


def generate_expression(
    scene: Scene,
    rng: np.random.Generator,
    kind: str,
    config: GenerationConfig = GenerationConfig(),
    vocabulary: Vocabulary = DEFAULT_VOCABULARY,
) -> GroundingInstance:
    """Build an expression of ``kind`` that singles out the scene's target.

    Raises:
        NoDistinguishingExpressionError: No expression of ``kind`` resolves
            to exactly the target; the caller should draw a new scene.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown expression kind {kind!r}")
    target = scene.target_index
    if kind == "phrase":
        words = _phrase_for(scene, target, rng)
        expression = ExpressionSeq.from_words(words, vocabulary) if words else None
    elif kind == "sentence":
        words = _sentence_for(scene, target, rng, config.location_words)
        expression = ExpressionSeq.from_words(words, vocabulary) if words else None
    else:
        dialog = _dialog_for(scene, target, rng, config.location_words, config.dialog_rounds)
        expression = ExpressionSeq.from_rounds(dialog, vocabulary) if dialog else None
    if expression is None:
        raise NoDistinguishingExpressionError(f"no {kind} singles out object {target}")
    return GroundingInstance(scene=scene, expression=expression, kind=kind, target_index=target)


def generate_instance(
    rng: np.random.Generator,
    config: GenerationConfig = GenerationConfig(),
    vocabulary: Vocabulary = DEFAULT_VOCABULARY,
) -> GroundingInstance:
    """Draw a kind and a scene, regenerating the scene until an expression exists."""
    kind = config.kinds[int(rng.integers(len(config.kinds)))]
    for _ in range(MAX_SCENE_RETRIES):
        scene = generate_scene(rng, config.scene)
        try:
            return generate_expression(scene, rng, kind, config, vocabulary)
        except NoDistinguishingExpressionError:
            logger.debug("regenerating scene for a %s instance", kind)
    raise NoDistinguishingExpressionError(
        f"gave up after {MAX_SCENE_RETRIES} scenes without a distinguishing {kind}"
    )


__all__ = [
    "ATTRIBUTES",
    "Vocabulary",
    "DEFAULT_VOCABULARY",
    "Word",
    "QAPair",
    "Unit",
    "ExpressionSeq",
    "SceneObject",
    "Box",
    "Scene",
    "SceneConfig",
    "GenerationConfig",
    "Question",
    "GroundingInstance",
    "generate_scene",
    "generate_expression",
    "generate_instance",
    "oracle_resolve",
]
