"""The neural modules and the recursive layout executor.

Attentions are plain float64 vectors over the entities of a world; on a tape
they are node ids whose values are those vectors.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ShapeError, Tape
from .layout import Layout, LayoutTypeError, typecheck

YES_NO = ("yes", "no")


class UnknownEntityLexeme(KeyError):
    """``lookup`` was asked for a word the world does not index."""


class ConfigurationError(ValueError):
    pass


@dataclass
class World:
    entity_ids: List[str]
    views: Dict[str, np.ndarray]
    lookup_index: Dict[str, int] = field(default_factory=dict)
    env_id: str = ""

    def __post_init__(self):
        n = len(self.entity_ids)
        if len(set(self.entity_ids)) != n:
            raise ValueError("duplicate entity id")
        for name, mat in list(self.views.items()):
            mat = np.asarray(mat, dtype=np.float64)
            if mat.ndim != 2 or mat.shape[1] != n:
                raise ValueError(f"view {name!r} has shape {mat.shape}, expected (d, {n})")
            self.views[name] = mat
        for lex, pos in self.lookup_index.items():
            if not 0 <= pos < n:
                raise ValueError(f"lookup index for {lex!r} out of range: {pos}")

    @property
    def n(self) -> int:
        return len(self.entity_ids)


@dataclass
class LabelDist:
    probs: np.ndarray
    vocab: Tuple[str, ...]
    node: Optional[int] = None

    def argmax(self) -> str:
        return self.vocab[int(np.argmax(self.probs))]

    def prob(self, answer: str) -> float:
        try:
            return float(self.probs[self.vocab.index(answer)])
        except ValueError:
            return 0.0


@dataclass
class ModuleConfig:
    hidden: int = 32
    views: Dict[str, str] = field(default_factory=lambda: {
        "find": "category", "relate": "relation", "describe": "attribute"})
    fusion: bool = False


def glorot(rng: np.random.Generator, shape) -> np.ndarray:
    fan_out = shape[0]
    fan_in = shape[1] if len(shape) > 1 else 1
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


class ParamStore(dict):
    """Named float64 arrays: every trainable weight of the model.

    Names are namespaced by owner, e.g. ``find/B`` or ``find/v/city``.
    Per-lexeme vectors are created on first request with a generator seeded
    by the store seed and the parameter name, so creation order never
    changes the initial values.
    """

    def __init__(self, seed: int = 0, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.seed = seed

    def rng_for(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode("utf-8"))])

    def get_or_create(self, name: str, shape, init: str = "glorot", value: float = 0.0) -> np.ndarray:
        arr = self.get(name)
        if arr is None:
            if init == "glorot":
                arr = glorot(self.rng_for(name), tuple(shape))
            else:
                arr = np.full(tuple(shape), float(value))
            self[name] = arr
        elif arr.shape != tuple(shape):
            raise ShapeError(name, arr.shape, tuple(shape))
        return arr

    def copy(self) -> "ParamStore":
        return ParamStore(self.seed, {k: v.copy() for k, v in self.items()})


class NeuralModules:
    """Owns the execution-model weights and evaluates layouts against worlds."""

    def __init__(self, params: ParamStore, answer_vocab: Sequence[str], world_dims: Mapping[str, int],
                 config: Optional[ModuleConfig] = None, question_dim: Optional[int] = None):
        self.params = params
        self.config = config or ModuleConfig()
        self.answer_vocab = tuple(answer_vocab)
        self.answer_index = {a: i for i, a in enumerate(self.answer_vocab)}
        self.world_dims = dict(world_dims)
        self.question_dim = question_dim
        if self.config.fusion and question_dim is None:
            raise ConfigurationError("fusion needs a question encoder dimension")
        self._init_globals()

    def _init_globals(self):
        H = self.config.hidden
        p = self.params
        dims = self.world_dims
        d_find = dims[self.config.views["find"]]
        d_rel = dims[self.config.views["relate"]]
        d_desc = dims[self.config.views["describe"]]
        p.get_or_create("find/a", (H,))
        p.get_or_create("find/B", (H, H))
        p.get_or_create("find/C", (H, d_find))
        p.get_or_create("find/d", (H,), "const")
        p.get_or_create("relate/a", (H,))
        p.get_or_create("relate/B", (H, H))
        p.get_or_create("relate/C", (H, d_rel))
        p.get_or_create("relate/D", (H, d_rel))
        p.get_or_create("relate/e", (H,), "const")
        p.get_or_create("describe/A", (len(self.answer_vocab), H))
        p.get_or_create("describe/B", (H, d_desc))
        p.get_or_create("exists/a", (2,))
        p.get_or_create("exists/b", (2,), "const")
        if self.config.fusion:
            V = len(self.answer_vocab)
            p.get_or_create("fusion/A", (V, self.question_dim))
            p.get_or_create("fusion/B", (V, V))

    def lexeme_vector(self, kind: str, lexeme: str) -> np.ndarray:
        return self.params.get_or_create(f"{kind}/v/{lexeme}", (self.config.hidden,))

    def _param(self, tape: Tape, name: str) -> int:
        return tape.param(name, self.params[name])

    def _lex(self, tape: Tape, kind: str, lexeme: str) -> int:
        self.lexeme_vector(kind, lexeme)
        return self._param(tape, f"{kind}/v/{lexeme}")

    def _view(self, tape: Tape, world: World, kind: str, cache: Dict) -> int:
        name = self.config.views[kind]
        if name not in world.views:
            raise ShapeError(f"{kind} needs view {name!r}", ())
        if name not in cache:
            cache[name] = tape.const(world.views[name])
        return cache[name]

    # -- modules -----------------------------------------------------------

    def lookup(self, tape: Tape, lexeme: str, world: World) -> int:
        if lexeme not in world.lookup_index:
            raise UnknownEntityLexeme(lexeme)
        h = np.zeros(world.n)
        h[world.lookup_index[lexeme]] = 1.0
        return tape.const(h)

    def find(self, tape: Tape, lexeme: str, world: World, views: Optional[Dict] = None) -> int:
        W = self._view(tape, world, "find", {} if views is None else views)
        pre = tape.add(tape.add(tape.matmul(self._param(tape, "find/B"), self._lex(tape, "find", lexeme)),
                                tape.matmul(self._param(tape, "find/C"), W)),
                       self._param(tape, "find/d"))
        scores = tape.matmul(self._param(tape, "find/a"), tape.relu(pre))
        return tape.softmax(scores)

    def relate(self, tape: Tape, lexeme: str, h: int, world: World, views: Optional[Dict] = None) -> int:
        W = self._view(tape, world, "relate", {} if views is None else views)
        if tape.value(h).shape != (world.n,):
            raise ShapeError("relate", tape.value(h).shape, (world.n,))
        wbar = tape.weighted_sum(W, h)
        pre = tape.add(tape.matmul(self._param(tape, "relate/B"), self._lex(tape, "relate", lexeme)),
                       tape.matmul(self._param(tape, "relate/C"), W))
        pre = tape.add(pre, tape.matmul(self._param(tape, "relate/D"), wbar))
        pre = tape.add(pre, self._param(tape, "relate/e"))
        scores = tape.matmul(self._param(tape, "relate/a"), tape.relu(pre))
        return tape.softmax(scores)

    def and_(self, tape: Tape, hs: Sequence[int]) -> int:
        if not hs:
            raise ValueError("and needs at least one input")
        out = hs[0]
        for h in hs[1:]:
            if tape.value(h).shape != tape.value(out).shape:
                raise ShapeError("and", tape.value(out).shape, tape.value(h).shape)
            out = tape.mul(out, h)
        return out

    def describe_logits(self, tape: Tape, lexeme: str, h: int, world: World,
                        views: Optional[Dict] = None) -> int:
        W = self._view(tape, world, "describe", {} if views is None else views)
        wbar = tape.weighted_sum(W, h)
        hidden = tape.relu(tape.add(tape.matmul(self._param(tape, "describe/B"), wbar),
                                    self._lex(tape, "describe", lexeme)))
        return tape.matmul(self._param(tape, "describe/A"), hidden)

    def describe(self, tape: Tape, lexeme: str, h: int, world: World, views: Optional[Dict] = None) -> int:
        return tape.softmax(self.describe_logits(tape, lexeme, h, world, views))

    def exists_logits(self, tape: Tape, h: int) -> int:
        if tape.value(h).size == 0:
            raise ShapeError("exists", tape.value(h).shape)
        return tape.add(tape.mul(tape.max(h), self._param(tape, "exists/a")),
                        self._param(tape, "exists/b"))

    def exists(self, tape: Tape, h: int) -> int:
        return tape.softmax(self.exists_logits(tape, h))

    def fuse(self, tape: Tape, h_q: int, embedding: int) -> int:
        """softmax(A h_q + B e): the answer embedding mixed with the question."""
        if not self.config.fusion:
            raise ConfigurationError("fusion head is disabled")
        logits = tape.add(tape.matmul(self._param(tape, "fusion/A"), h_q),
                          tape.matmul(self._param(tape, "fusion/B"), embedding))
        return tape.softmax(logits)

    # -- execution ---------------------------------------------------------

    def _attention(self, tape, node: Layout, world, views, path, attentions) -> int:
        kind = node.kind
        if kind == "lookup":
            out = self.lookup(tape, node.arg, world)
        elif kind == "find":
            out = self.find(tape, node.arg, world, views)
        elif kind == "relate":
            h = self._attention(tape, node.children[0], world, views, path + (0,), attentions)
            out = self.relate(tape, node.arg, h, world, views)
        elif kind == "and":
            hs = [self._attention(tape, c, world, views, path + (i,), attentions)
                  for i, c in enumerate(node.children)]
            out = self.and_(tape, hs)
        else:
            raise LayoutTypeError(node, f"{kind} does not produce Attention")
        attentions[path] = tape.value(out)
        return out

    def execute(self, layout: Layout, world: World, tape: Optional[Tape] = None,
                h_q: Optional[np.ndarray] = None) -> "Execution":
        """Run ``layout`` on ``world``; the root distribution sits on the tape."""
        typecheck(layout)
        tape = Tape() if tape is None else tape
        views: Dict = {}
        attentions: Dict[Tuple[int, ...], np.ndarray] = {}
        h = self._attention(tape, layout.children[0], world, views, (0,), attentions)
        if layout.kind == "describe":
            logits = self.describe_logits(tape, layout.arg, h, world, views)
            vocab = self.answer_vocab
        else:
            logits = self.exists_logits(tape, h)
            vocab = YES_NO
        if self.config.fusion:
            if h_q is None:
                raise ConfigurationError("fusion is enabled but no question encoding was given")
            if vocab is YES_NO:
                # embed the yes/no logits into the answer vocabulary
                V = len(self.answer_vocab)
                embed = np.zeros((V, 2))
                for j, a in enumerate(YES_NO):
                    if a in self.answer_index:
                        embed[self.answer_index[a], j] = 1.0
                logits = tape.matmul(tape.const(embed), logits)
            probs = self.fuse(tape, tape.const(h_q), logits)
            vocab = self.answer_vocab
        else:
            probs = tape.softmax(logits)
        dist = LabelDist(tape.value(probs), tuple(vocab), probs)
        return Execution(dist, tape, attentions)

    def log_prob(self, execution: "Execution", answer: str) -> Optional[int]:
        """Tape node holding log p(answer), or None when the head cannot emit it."""
        dist = execution.dist
        if answer not in dist.vocab:
            return None
        tape = execution.tape
        return tape.log(tape.index(dist.node, dist.vocab.index(answer)))


@dataclass
class Execution:
    dist: LabelDist
    tape: Tape
    attentions: Dict[Tuple[int, ...], np.ndarray]
