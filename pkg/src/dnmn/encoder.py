"""Question encoder and layout scorer (the layout model)."""

from __future__ import annotations

from typing import Dict, Sequence, Tuple

import numpy as np

from .autodiff import ShapeError, Tape, softmax
from .modules import ParamStore

UNK = "<unk>"


class QuestionEncoder:
    """Word-by-word LSTM; the encoding is the last hidden state.

    Gate pre-activations are one stacked matrix over [x; h] laid out as
    input, forget, output, candidate.  No peepholes.
    """

    def __init__(self, params: ParamStore, vocab: Dict[str, int], emb_dim: int = 32, hidden: int = 64):
        if UNK not in vocab:
            raise ValueError("encoder vocabulary needs an UNK entry")
        self.params = params
        self.vocab = vocab
        self.emb_dim = emb_dim
        self.hidden = hidden
        H = hidden
        params.get_or_create("encoder/embed", (len(vocab), emb_dim))
        params.get_or_create("encoder/W", (4 * H, emb_dim + H))
        if "encoder/b" not in params:
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0
            params["encoder/b"] = b

    def token_ids(self, tokens: Sequence[str]):
        unk = self.vocab[UNK]
        return [self.vocab.get(t.lower(), unk) for t in tokens]

    def encode(self, tape: Tape, tokens: Sequence[str]) -> int:
        if not tokens:
            raise ValueError("cannot encode an empty question")
        H = self.hidden
        p = self.params
        E = tape.param("encoder/embed", p["encoder/embed"])
        W = tape.param("encoder/W", p["encoder/W"])
        b = tape.param("encoder/b", p["encoder/b"])
        h = tape.const(np.zeros(H))
        c = tape.const(np.zeros(H))
        for tok in self.token_ids(tokens):
            x = tape.index(E, tok)
            gates = tape.add(tape.matmul(W, tape.concat(x, h)), b)
            i = tape.sigmoid(tape.slice(gates, (0, H)))
            f = tape.sigmoid(tape.slice(gates, (H, 2 * H)))
            o = tape.sigmoid(tape.slice(gates, (2 * H, 3 * H)))
            g = tape.tanh(tape.slice(gates, (3 * H, 4 * H)))
            c = tape.add(tape.mul(f, c), tape.mul(i, g))
            h = tape.mul(o, tape.tanh(c))
        return h


class LayoutScorer:
    """s(z|x) = a . relu(B h_q + C f(z) + d), one score per candidate column."""

    def __init__(self, params: ParamStore, question_dim: int, feature_dim: int, hidden: int = 32):
        self.params = params
        self.question_dim = question_dim
        self.feature_dim = feature_dim
        params.get_or_create("scorer/a", (hidden,))
        params.get_or_create("scorer/B", (hidden, question_dim))
        params.get_or_create("scorer/C", (hidden, feature_dim))
        params.get_or_create("scorer/d", (hidden,), "const")

    def scores(self, tape: Tape, h_q: int, features: np.ndarray) -> int:
        """``features`` is (num_candidates, feature_dim); returns a score vector."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise ShapeError("score_layout", features.shape, (None, self.feature_dim))
        p = self.params
        hidden = tape.add(tape.matmul(tape.param("scorer/B", p["scorer/B"]), h_q),
                          tape.matmul(tape.param("scorer/C", p["scorer/C"]), tape.const(features.T)))
        hidden = tape.relu(tape.add(hidden, tape.param("scorer/d", p["scorer/d"])))
        return tape.matmul(tape.param("scorer/a", p["scorer/a"]), hidden)

    def score(self, tape: Tape, h_q: int, features: np.ndarray) -> int:
        return tape.index(self.scores(tape, h_q, np.atleast_2d(features)), 0)


def layout_distribution(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no candidate layouts to normalize")
    return softmax(scores)


def sample_layout(distribution, rng: np.random.Generator) -> Tuple[int, float]:
    p = np.asarray(distribution, dtype=np.float64)
    idx = int(rng.choice(len(p), p=p / p.sum()))
    return idx, float(np.log(p[idx]))
