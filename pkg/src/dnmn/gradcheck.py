"""Central finite-difference checks of every backward rule and model piece.

Each check draws random small configurations, evaluates the scalar output on
a fresh tape, and compares the tape gradients of every differentiable input
with central differences.  The error for one configuration is

    max over inputs of  max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)

The floor keeps gradients that are zero up to roundoff (a fully inactive
relu layer, say) from turning finite-difference noise into a large ratio.

Configurations that land within ``margin`` of a relu kink or a max tie are
redrawn, since the one-sided derivatives disagree there.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from .autodiff import Tape, backward, param_grads
from .encoder import UNK, LayoutScorer, QuestionEncoder
from .modules import ModuleConfig, NeuralModules, ParamStore, World

Values = Dict[str, np.ndarray]
Builder = Callable[[Tape, Values], int]
Sampler = Callable[[np.random.Generator], Tuple[Values, Builder]]


@dataclass
class CheckResult:
    name: str
    configs: int
    max_rel_error: float
    worst_input: str
    seconds: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _evaluate(build: Builder, values: Values) -> float:
    tape = Tape()
    return float(tape.value(build(tape, values)))


def _near_kink(tape: Tape, margin: float) -> bool:
    for op, ins in zip(tape.ops, tape.inputs):
        if op == "relu" and np.min(np.abs(tape.value(ins[0]))) < margin:
            return True
        if op == "max":
            x = np.sort(np.ravel(tape.value(ins[0])))
            if x.size > 1 and x[-1] - x[-2] < margin:
                return True
    return False


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def check_config(values: Values, build: Builder, step: float = 1e-5) -> Tuple[float, str]:
    """Worst relative error over all tape parameters for one configuration."""
    tape = Tape()
    root = build(tape, values)
    grads = param_grads(tape, backward(tape, root), values)
    worst, worst_name = 0.0, ""
    for name, analytic in grads.items():
        arr = values[name]
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            up = _evaluate(build, values)
            arr[idx] = orig - step
            down = _evaluate(build, values)
            arr[idx] = orig
            numeric[idx] = (up - down) / (2.0 * step)
        err = relative_error(analytic, numeric)
        if err >= worst:
            worst, worst_name = err, name
    return worst, worst_name


def run_check(name: str, sampler: Sampler, configs: int = 100, seed: int = 0,
              tolerance: float = 1e-4, margin: float = 1e-3, step: float = 1e-5,
              max_redraws: int = 100) -> CheckResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst, worst_name = 0.0, ""
    for _ in range(configs):
        for _ in range(max_redraws):
            values, build = sampler(rng)
            tape = Tape()
            build(tape, values)
            if not _near_kink(tape, margin):
                break
        else:
            raise RuntimeError(f"{name}: could not draw a configuration away from kinks")
        err, which = check_config(values, build, step)
        if err >= worst:
            worst, worst_name = err, which
    return CheckResult(name, configs, worst, worst_name, time.perf_counter() - start, tolerance)


# -- scalarization ---------------------------------------------------------

def _with_projection(build_out: Callable[[Tape, Values], int], rng) -> Builder:
    """Reduce the output to a scalar through a fixed random weighting."""
    weights = {}

    def build(tape, values):
        out = build_out(tape, values)
        shape = tape.value(out).shape
        if shape not in weights:
            weights[shape] = rng.normal(size=shape)
        return tape.sum(tape.mul(out, tape.const(weights[shape])))
    return build


# -- op samplers -----------------------------------------------------------

def _dims(rng):
    return int(rng.integers(2, 5)), int(rng.integers(2, 5))


def _unary(kind: str, positive: bool = False) -> Sampler:
    def sample(rng):
        d, n = _dims(rng)
        shape = (d,) if rng.integers(2) else (d, n)
        x = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
        return {"x": x}, _with_projection(
            lambda t, v: t.op(kind, t.param("x", v["x"])), rng)
    return sample


def _binary(kind: str) -> Sampler:
    def sample(rng):
        d, n = _dims(rng)
        case = int(rng.integers(3))
        a_shape, b_shape = [((d,), (d, n)), ((d, n), (d,)), ((d, n), (d, n))][case]
        values = {"a": rng.normal(size=a_shape), "b": rng.normal(size=b_shape)}
        return values, _with_projection(
            lambda t, v: t.op(kind, t.param("a", v["a"]), t.param("b", v["b"])), rng)
    return sample


def _matmul(rng):
    d, n = _dims(rng)
    m = int(rng.integers(2, 5))
    a_shape, b_shape = [((d, n), (n,)), ((d, n), (n, m)), ((d,), (d, n)), ((d,), (d,))][int(rng.integers(4))]
    values = {"a": rng.normal(size=a_shape), "b": rng.normal(size=b_shape)}
    return values, _with_projection(
        lambda t, v: t.matmul(t.param("a", v["a"]), t.param("b", v["b"])), rng)


def _scale(rng):
    d, _ = _dims(rng)
    f = float(rng.normal())
    return {"x": rng.normal(size=d)}, _with_projection(lambda t, v: t.scale(t.param("x", v["x"]), f), rng)


def _weighted_sum(rng):
    d, n = _dims(rng)
    values = {"W": rng.normal(size=(d, n)), "h": rng.uniform(0.0, 1.0, size=n)}
    return values, _with_projection(
        lambda t, v: t.weighted_sum(t.param("W", v["W"]), t.param("h", v["h"])), rng)


def _vector_op(fn) -> Sampler:
    """``fn(d, rng)`` returns the op; static arguments are drawn there, once."""
    def sample(rng):
        d = int(rng.integers(2, 7))
        op = fn(d, rng)
        return {"x": rng.normal(size=d)}, _with_projection(lambda t, v: op(t, t.param("x", v["x"])), rng)
    return sample


def _concat(rng):
    values = {f"x{i}": rng.normal(size=int(rng.integers(1, 4))) for i in range(int(rng.integers(2, 4)))}
    return values, _with_projection(
        lambda t, v: t.concat(*[t.param(k, v[k]) for k in sorted(v)]), rng)


def _log_softmax_index(rng):
    d = int(rng.integers(2, 7))
    i = int(rng.integers(d))
    return {"x": rng.normal(size=d)}, lambda t, v: t.log(t.index(t.softmax(t.param("x", v["x"])), i))


def op_samplers() -> Dict[str, Sampler]:
    def _slice(d, rng):
        lo = int(rng.integers(d))
        hi = int(rng.integers(lo + 1, d + 1))
        return lambda t, x: t.slice(x, (lo, hi))

    def _index(d, rng):
        i = int(rng.integers(d))
        return lambda t, x: t.index(x, i)
    return {
        "add": _binary("add"),
        "sub": _binary("sub"),
        "mul": _binary("mul"),
        "scale": _scale,
        "relu": _unary("relu"),
        "sigmoid": _unary("sigmoid"),
        "tanh": _unary("tanh"),
        "log": _unary("log", positive=True),
        "matmul": _matmul,
        "weighted_sum": _weighted_sum,
        "softmax": _vector_op(lambda d, rng: Tape.softmax),
        "max": _vector_op(lambda d, rng: Tape.max),
        "sum": _unary("sum"),
        "concat": _concat,
        "index": _vector_op(_index),
        "slice": _vector_op(_slice),
        "log_softmax_index": _log_softmax_index,
    }


# -- module samplers -------------------------------------------------------

def _random_store(rng) -> ParamStore:
    return ParamStore(int(rng.integers(2**31)))


def _random_modules(rng, fusion: bool = False):
    H = int(rng.integers(2, 5))
    n = int(rng.integers(2, 6))
    dims = {"category": int(rng.integers(2, 5)), "relation": int(rng.integers(2, 5)),
            "attribute": int(rng.integers(2, 5))}
    vocab = tuple(f"a{i}" for i in range(int(rng.integers(2, 5))))
    q = int(rng.integers(2, 5))
    store = _random_store(rng)
    modules = NeuralModules(store, vocab, dims, ModuleConfig(hidden=H, fusion=fusion),
                            question_dim=q if fusion else None)
    for kind in ("find", "relate", "describe"):
        modules.lexeme_vector(kind, "w")
    for name in list(store):
        # nonzero biases so every term of each equation is exercised
        store[name] = rng.normal(size=store[name].shape)
    world = World([f"e{k}" for k in range(n)],
                  {view: rng.normal(size=(d, n)) for view, d in dims.items()},
                  {f"e{k}": k for k in range(n)})
    return modules, store, world, q


def _attention(rng, n):
    return rng.dirichlet(np.ones(n))


def _module_sampler(kind: str) -> Sampler:
    def sample(rng):
        modules, values, world, q = _random_modules(rng, fusion=(kind == "fusion"))
        n = world.n
        if kind in ("relate", "describe", "exists"):
            values["h"] = _attention(rng, n)
        if kind == "and":
            for i in range(int(rng.integers(1, 4))):
                values[f"h{i}"] = _attention(rng, n)
            # a lookup operand exercises the constant one-hot path
            with_lookup = bool(rng.integers(2))
            target = f"e{int(rng.integers(n))}"
        if kind == "fusion":
            values["h_q"] = rng.normal(size=q)
            values["e"] = rng.normal(size=len(modules.answer_vocab))
        answer = int(rng.integers(len(modules.answer_vocab)))

        def build_out(t, v):
            if kind == "find":
                return modules.find(t, "w", world)
            if kind == "relate":
                return modules.relate(t, "w", t.param("h", v["h"]), world)
            if kind == "describe":
                return modules.describe(t, "w", t.param("h", v["h"]), world)
            if kind == "exists":
                return modules.exists(t, t.param("h", v["h"]))
            if kind == "and":
                hs = [t.param(k, v[k]) for k in sorted(v) if k.startswith("h") and k[1:].isdigit()]
                if with_lookup:
                    hs.append(modules.lookup(t, target, world))
                return modules.and_(t, hs)
            probs = modules.fuse(t, t.param("h_q", v["h_q"]), t.param("e", v["e"]))
            return probs

        if kind in ("describe", "fusion"):
            return values, lambda t, v: t.log(t.index(build_out(t, v), answer))
        return values, _with_projection(build_out, rng)
    return sample


def _scorer(rng):
    q, f, hidden = (int(rng.integers(2, 5)) for _ in range(3))
    k = int(rng.integers(1, 5))
    store = _random_store(rng)
    scorer = LayoutScorer(store, q, f, hidden)
    for name in list(store):
        store[name] = rng.normal(size=store[name].shape)
    store["h_q"] = rng.normal(size=q)
    feats = rng.integers(0, 3, size=(k, f)).astype(float)
    idx = int(rng.integers(k))

    def build(t, v):
        scores = scorer.scores(t, t.param("h_q", v["h_q"]), feats)
        return t.log(t.index(t.softmax(scores), idx))
    return store, build


def _lstm(rng):
    words = [UNK] + [f"w{i}" for i in range(int(rng.integers(2, 5)))]
    vocab = {w: i for i, w in enumerate(words)}
    store = _random_store(rng)
    enc = QuestionEncoder(store, vocab, emb_dim=int(rng.integers(2, 4)), hidden=int(rng.integers(2, 4)))
    for name in list(store):
        store[name] = rng.normal(scale=0.7, size=store[name].shape)
    tokens = [words[int(i)] for i in rng.integers(len(words), size=int(rng.integers(1, 5)))]
    return store, _with_projection(lambda t, v: enc.encode(t, tokens), rng)


def model_samplers() -> Dict[str, Sampler]:
    out = {kind: _module_sampler(kind) for kind in ("find", "relate", "and", "describe", "exists", "fusion")}
    out["scorer"] = _scorer
    out["lstm"] = _lstm
    return out


def all_samplers() -> Dict[str, Sampler]:
    out = {f"op:{k}": v for k, v in op_samplers().items()}
    out.update(model_samplers())
    return out


def run_suite(configs: int = 100, seed: int = 0, tolerance: float = 1e-4,
              names: Optional[Iterable[str]] = None) -> List[CheckResult]:
    samplers = all_samplers()
    chosen = list(samplers) if names is None else list(names)
    results = []
    for i, name in enumerate(chosen):
        if name not in samplers:
            raise KeyError(f"unknown gradient check {name!r}")
        results.append(run_check(name, samplers[name], configs, seed + i, tolerance))
    return results
