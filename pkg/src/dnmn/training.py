"""Joint training of module weights and the layout policy, plus evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (AdadeltaState, Tape, adadelta_step, backward, clip_by_global_norm,
                       param_grads)
from .data import SCHEMA_VERSION, Example, _validate
from .encoder import UNK, LayoutScorer, QuestionEncoder, layout_distribution, sample_layout
from .layout import Layout, full_conjunction, generate_candidates, layout_features, print_layout
from .modules import ModuleConfig, NeuralModules, ParamStore, World

log = logging.getLogger(__name__)

# log-probability reported when the root head cannot emit the gold answer at all
# (an exists root asked for a size label)
MIN_LOG_PROB = math.log(1e-6)

LAYOUT_PREFIXES = ("encoder/", "scorer/")
# attention vectors are only recorded for worlds up to this size
MAX_ATTENTION_ENTITIES = 1000


@dataclass
class TrainConfig:
    epochs: int = 50
    seed: int = 0
    rho: float = 0.95
    epsilon: float = 1e-6
    clip_norm: float = 10.0
    fusion: bool = False
    eval_mode: str = "greedy"
    reward_sign: float = 1.0
    baseline: bool = False
    baseline_decay: float = 0.9
    policy: str = "dynamic"
    module_hidden: int = 32
    emb_dim: int = 32
    lstm_hidden: int = 64
    scorer_hidden: int = 32

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.eval_mode not in ("greedy", "sample"):
            raise ValueError(f"eval_mode must be greedy or sample, got {self.eval_mode!r}")
        if self.policy not in ("dynamic", "fixed"):
            raise ValueError(f"policy must be dynamic or fixed, got {self.policy!r}")
        if self.reward_sign not in (1.0, -1.0):
            raise ValueError("reward_sign must be +1 or -1")


def is_layout_param(name: str) -> bool:
    return name.startswith(LAYOUT_PREFIXES)


class Model:
    """Layout model (encoder + scorer) and execution model (modules) sharing one store."""

    def __init__(self, word_vocab: Sequence[str], answer_vocab: Sequence[str],
                 world_dims: Mapping[str, int], config: Optional[TrainConfig] = None,
                 params: Optional[ParamStore] = None):
        self.config = config or TrainConfig()
        c = self.config
        self.word_vocab = list(word_vocab)
        self.answer_vocab = list(answer_vocab)
        self.world_dims = dict(world_dims)
        self.lexicon = {w: i for i, w in enumerate(self.word_vocab)}
        self.params = params if params is not None else ParamStore(c.seed)
        self.encoder = QuestionEncoder(self.params, self.lexicon, c.emb_dim, c.lstm_hidden)
        self.feature_dim = 6 + len(self.lexicon)
        self.scorer = LayoutScorer(self.params, c.lstm_hidden, self.feature_dim, c.scorer_hidden)
        self.modules = NeuralModules(self.params, self.answer_vocab, self.world_dims,
                                     ModuleConfig(hidden=c.module_hidden, fusion=c.fusion),
                                     question_dim=c.lstm_hidden)
        self._cand_cache: Dict[str, Tuple[List[Layout], np.ndarray]] = {}

    def candidates(self, example: Example) -> Tuple[List[Layout], np.ndarray]:
        """Candidate layouts and their stacked feature rows (cached per example)."""
        key = example.id
        hit = self._cand_cache.get(key)
        if hit is None:
            if self.config.policy == "fixed":
                fixed = full_conjunction(example.parse)
                cands = [] if fixed is None else [fixed]
            else:
                cands = generate_candidates(example.parse)
            feats = np.array([layout_features(z).vector(self.lexicon, UNK) for z in cands]) \
                if cands else np.zeros((0, self.feature_dim))
            hit = self._cand_cache[key] = (cands, feats)
        return hit

    def layout_scores(self, tape: Tape, example: Example, feats: np.ndarray) -> Tuple[int, int]:
        h_q = self.encoder.encode(tape, example.tokens)
        return h_q, self.scorer.scores(tape, h_q, feats)

    def choose(self, example: Example, mode: str = "greedy", rng=None):
        """Pick a layout; returns (layout, probabilities, h_q value) or None."""
        cands, feats = self.candidates(example)
        if not cands:
            return None
        tape = Tape()
        h_q, scores = self.layout_scores(tape, example, feats)
        probs = layout_distribution(tape.value(scores))
        if mode == "sample":
            idx, _ = sample_layout(probs, rng)
        else:
            idx = int(np.argmax(probs))
        return cands[idx], probs, tape.value(h_q)

    def execute(self, layout: Layout, world: World, h_q=None, tape=None):
        return self.modules.execute(layout, world, tape=tape, h_q=h_q)

    def predict(self, example: Example, world: World, mode: str = "greedy", rng=None):
        chosen = self.choose(example, mode, rng)
        if chosen is None:
            return None
        layout, probs, h_q = chosen
        ex = self.execute(layout, world, h_q)
        return layout, ex


@dataclass
class StepResult:
    skipped: bool
    layout: Optional[Layout] = None
    log_prob_answer: float = 0.0
    log_prob_layout: float = 0.0
    correct: bool = False
    grads_execution: Dict[str, np.ndarray] = field(default_factory=dict)
    grads_layout: Dict[str, np.ndarray] = field(default_factory=dict)


class Trainer:
    def __init__(self, model: Model):
        self.model = model
        c = model.config
        self.state_execution = AdadeltaState(c.rho, c.epsilon, c.clip_norm)
        self.state_layout = AdadeltaState(c.rho, c.epsilon, c.clip_norm)
        self.baseline = 0.0

    def policy_gradient(self, example: Example, world: World, rng,
                        update: bool = True) -> StepResult:
        """One single-rollout step.

        The execution loss is -log p(y|z,w).  The layout update ascends
        (grad log p(z|x)) * r with r = reward_sign * log p(y|z,w) held
        constant, i.e. it descends -r * log p(z|x).
        """
        model = self.model
        cands, feats = model.candidates(example)
        if not cands:
            return StepResult(skipped=True)
        c = model.config

        ltape = Tape()
        h_q, scores = model.layout_scores(ltape, example, feats)
        probs = ltape.softmax(scores)
        if c.policy == "fixed":
            idx = 0
        else:
            idx, _ = sample_layout(ltape.value(probs), rng)
        logp_z = ltape.log(ltape.index(probs, idx))
        layout = cands[idx]

        etape = Tape()
        execution = model.execute(layout, world, ltape.value(h_q), etape)
        node = model.modules.log_prob(execution, example.answer)
        if node is None:
            logp_y = MIN_LOG_PROB
            g_exec = {}
        else:
            logp_y = max(float(etape.value(node)), MIN_LOG_PROB)
            grads = backward(etape, node, seed=-1.0)
            g_exec = param_grads(etape, grads, model.params)

        g_layout = {}
        if c.policy == "dynamic":
            reward = c.reward_sign * logp_y
            if c.baseline:
                advantage = reward - self.baseline
                self.baseline = c.baseline_decay * self.baseline + (1 - c.baseline_decay) * reward
                reward = advantage
            if reward != 0.0:
                grads = backward(ltape, logp_z, seed=-reward)
                g_layout = param_grads(ltape, grads, model.params)

        if update:
            if g_exec:
                adadelta_step(self.state_execution, model.params,
                              clip_by_global_norm(g_exec, c.clip_norm))
            if g_layout:
                adadelta_step(self.state_layout, model.params,
                              clip_by_global_norm(g_layout, c.clip_norm))
        return StepResult(False, layout, logp_y, float(ltape.value(logp_z)),
                          execution.dist.argmax() == example.answer, g_exec, g_layout)


def train_step(trainer: Trainer, example: Example, world: World, rng) -> StepResult:
    return trainer.policy_gradient(example, world, rng, update=True)


@dataclass
class EvalRecord:
    id: str
    layout: Optional[str]
    answer: Optional[str]
    gold: str
    correct: bool
    attentions: Dict[str, List[float]] = field(default_factory=dict)


def evaluate(model: Model, examples: Sequence[Example], worlds: Mapping[str, World],
             mode: Optional[str] = None, seed: int = 0,
             keep_attentions: bool = False) -> Tuple[float, List[EvalRecord]]:
    """Accuracy of the argmax answer under the chosen layout."""
    mode = mode or model.config.eval_mode
    rng = np.random.default_rng(seed)
    records = []
    for ex in examples:
        world = worlds[ex.env_id]
        out = model.predict(ex, world, mode, rng)
        if out is None:
            records.append(EvalRecord(ex.id, None, None, ex.answer, False))
            continue
        layout, execution = out
        answer = execution.dist.argmax()
        atts = {}
        if keep_attentions and world.n <= MAX_ATTENTION_ENTITIES:
            atts = {"/".join(map(str, k)): v.tolist() for k, v in execution.attentions.items()}
        records.append(EvalRecord(ex.id, print_layout(layout), answer, ex.answer,
                                  answer == ex.answer, atts))
    acc = sum(r.correct for r in records) / len(records) if records else 0.0
    return acc, records


def train(examples: Sequence[Example], worlds: Mapping[str, World], config: TrainConfig,
          word_vocab: Sequence[str], answer_vocab: Sequence[str],
          dev: Optional[Sequence[Example]] = None) -> Tuple[Model, dict]:
    if not examples:
        raise ValueError("cannot train on an empty dataset")
    dims = _world_dims(worlds)
    model = Model(word_vocab, answer_vocab, dims, config)
    trainer = Trainer(model)
    rng = np.random.default_rng(config.seed)
    metrics = {"schema_version": SCHEMA_VERSION, "seed": config.seed, "epochs": [], "skipped": []}
    skipped = set()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(examples))
        losses, correct, depths, n = [], 0, [], 0
        for i in order:
            ex = examples[int(i)]
            res = train_step(trainer, ex, worlds[ex.env_id], rng)
            if res.skipped:
                if ex.id not in skipped:
                    log.warning("no candidate layouts for %s; skipping", ex.id)
                    skipped.add(ex.id)
                continue
            n += 1
            losses.append(-res.log_prob_answer)
            correct += res.correct
            depths.append(res.layout.depth())
        row = {"epoch": epoch,
               "train_loss": float(np.mean(losses)) if losses else 0.0,
               "train_accuracy": correct / n if n else 0.0,
               "dev_accuracy": None,
               "mean_layout_depth": float(np.mean(depths)) if depths else 0.0}
        if dev:
            row["dev_accuracy"] = evaluate(model, dev, worlds)[0]
        log.info("epoch %d: %s", epoch, row)
        metrics["epochs"].append(row)
    metrics["skipped"] = sorted(skipped)
    return model, metrics


def _world_dims(worlds: Mapping[str, World]) -> Dict[str, int]:
    dims: Dict[str, int] = {}
    for w in worlds.values():
        for name, mat in w.views.items():
            if dims.setdefault(name, mat.shape[0]) != mat.shape[0]:
                raise ValueError(f"view {name!r} has inconsistent dimension across worlds")
    return dims


def cross_validate_loeo(examples: Sequence[Example], worlds: Mapping[str, World], config: TrainConfig,
                        word_vocab: Sequence[str], answer_vocab: Sequence[str]) -> dict:
    """Leave-one-environment-out: train on the rest, test on the held-out world."""
    envs = sorted({ex.env_id for ex in examples})
    if len(envs) < 2:
        raise ValueError("leave-one-environment-out needs at least two environments")
    folds = []
    for env in envs:
        train_set = [ex for ex in examples if ex.env_id != env]
        test_set = [ex for ex in examples if ex.env_id == env]
        model, _ = train(train_set, worlds, config, word_vocab, answer_vocab)
        acc, records = evaluate(model, test_set, worlds)
        folds.append({"environment": env, "accuracy": acc, "n": len(test_set),
                      "ids": [r.id for r in records]})
        log.info("fold %s: %.3f", env, acc)
    total = sum(f["n"] for f in folds)
    mean = sum(f["accuracy"] * f["n"] for f in folds) / total
    return {"mean_accuracy": mean, "folds": folds}


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(model: Model, path):
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": asdict(model.config),
        "seed": model.config.seed,
        "word_vocab": model.word_vocab,
        "answer_vocab": model.answer_vocab,
        "world_dims": model.world_dims,
        "tensors": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                    for k, v in sorted(model.params.items())},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> Model:
    with open(path) as fh:
        doc = json.load(fh)
    _validate(doc, "checkpoint", str(path))
    config = TrainConfig(**doc["config"])
    params = ParamStore(doc["seed"])
    for k, t in doc["tensors"].items():
        params[k] = np.asarray(t["values"], dtype=np.float64).reshape(t["shape"])
    return Model(doc["word_vocab"], doc["answer_vocab"], doc["world_dims"], config, params)
