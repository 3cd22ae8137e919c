"""Layout trees, their type system, s-expression I/O and candidate generation."""

from __future__ import annotations

import itertools
import logging
import re
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("lookup", "find", "relate", "and", "describe", "exists")
ATTENTION_KINDS = frozenset({"lookup", "find", "relate", "and"})
LABEL_KINDS = frozenset({"describe", "exists"})
ARG_KINDS = frozenset({"lookup", "find", "relate", "describe"})

WH_WORDS = frozenset({"what", "which", "who", "whom", "whose", "where", "when", "how"})
COPULA_LEMMAS = frozenset({"be"})
MAX_FRAGMENTS = 6


@dataclass(frozen=True)
class Layout:
    kind: str
    arg: Optional[str] = None
    children: Tuple["Layout", ...] = ()

    def __str__(self):
        return print_layout(self)

    @property
    def output_type(self) -> str:
        return "Labels" if self.kind in LABEL_KINDS else "Attention"

    def depth(self) -> int:
        return 1 + max((c.depth() for c in self.children), default=0)

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()


class LayoutTypeError(TypeError):
    def __init__(self, node: Layout, rule: str):
        self.node = node
        self.rule = rule
        super().__init__(f"{print_layout(node)}: {rule}")


class LayoutParseError(ValueError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} at position {position}")


def _check_node(node: Layout):
    if node.kind not in KINDS:
        raise LayoutTypeError(node, f"unknown module kind {node.kind!r}")
    if node.kind in ARG_KINDS and not node.arg:
        raise LayoutTypeError(node, f"{node.kind} needs a parameter argument")
    if node.kind not in ARG_KINDS and node.arg is not None:
        raise LayoutTypeError(node, f"{node.kind} takes no parameter argument")
    n = len(node.children)
    if node.kind in ("lookup", "find") and n:
        raise LayoutTypeError(node, f"{node.kind} must be a leaf")
    if node.kind in ("relate", "describe", "exists") and n != 1:
        raise LayoutTypeError(node, f"{node.kind} takes exactly one input, got {n}")
    if node.kind == "and" and n < 1:
        raise LayoutTypeError(node, "and takes at least one input")
    for child in node.children:
        if child.kind not in ATTENTION_KINDS:
            raise LayoutTypeError(child, f"input to {node.kind} must produce Attention")
        _check_node(child)


def typecheck(layout: Layout) -> None:
    """Raise :class:`LayoutTypeError` on the first node breaking a rule."""
    _check_node(layout)
    if layout.kind not in LABEL_KINDS:
        raise LayoutTypeError(layout, "root must produce Labels")


def is_well_typed(layout: Layout) -> bool:
    try:
        typecheck(layout)
    except LayoutTypeError:
        return False
    return True


# -- s-expressions ---------------------------------------------------------

def print_layout(layout: Layout) -> str:
    head = layout.kind if layout.arg is None else f"{layout.kind}[{layout.arg}]"
    if not layout.children:
        return head
    return "(" + " ".join([head] + [print_layout(c) for c in layout.children]) + ")"


_TOKEN = re.compile(r"\s*(?:(\()|(\))|([A-Za-z_]+)(?:\[([^\[\]\s()]+)\])?)")


def parse_layout_string(text: str) -> Layout:
    """Parse ``(and find[city] (relate[in] lookup[georgia]))`` style text.

    A parenthesized leaf such as ``(lookup[x])`` is accepted and means the
    same as the bare leaf.
    """
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise LayoutParseError(f"unexpected character {text[pos:].lstrip()[:1]!r}",
                                   len(text) - len(text[pos:].lstrip()))
        start = m.start() + len(m.group(0)) - len(m.group(0).lstrip())
        if m.group(1):
            tokens.append(("(", None, start))
        elif m.group(2):
            tokens.append((")", None, start))
        else:
            tokens.append(("atom", (m.group(3), m.group(4)), start))
        pos = m.end()
    end = len(text)

    def parse_at(i):
        if i >= len(tokens):
            raise LayoutParseError("unexpected end of input", end)
        tok, val, where = tokens[i]
        if tok == "atom":
            return Layout(val[0], val[1]), i + 1
        if tok == ")":
            raise LayoutParseError("unexpected ')'", where)
        i += 1
        if i >= len(tokens):
            raise LayoutParseError("unexpected end of input", end)
        tok, val, where = tokens[i]
        if tok != "atom":
            raise LayoutParseError("expected a module name", where)
        kind, arg = val
        i += 1
        children = []
        while True:
            if i >= len(tokens):
                raise LayoutParseError("unexpected end of input", end)
            if tokens[i][0] == ")":
                return Layout(kind, arg, tuple(children)), i + 1
            child, i = parse_at(i)
            children.append(child)

    if not tokens:
        raise LayoutParseError("empty layout", 0)
    layout, i = parse_at(0)
    if i != len(tokens):
        raise LayoutParseError("trailing input", tokens[i][2])
    return layout


# -- dependency trees ------------------------------------------------------

@dataclass
class DepTree:
    """A dependency parse; heads are 1-based with 0 marking the root."""

    forms: List[str]
    lemmas: List[str]
    upos: List[str]
    heads: List[int]
    deprels: List[str]

    def __post_init__(self):
        n = len(self.forms)
        if not (len(self.lemmas) == len(self.upos) == len(self.heads) == len(self.deprels) == n):
            raise ValueError("dependency columns have different lengths")
        for h in self.heads:
            if not 0 <= h <= n:
                raise ValueError(f"head index {h} out of range for {n} tokens")
        roots = [i for i, h in enumerate(self.heads) if h == 0]
        if n and len(roots) != 1:
            raise ValueError(f"expected a single root, found {len(roots)}")
        for i in range(n):
            seen = set()
            j = i
            while self.heads[j] != 0:
                if j in seen:
                    raise ValueError("dependency parse contains a cycle")
                seen.add(j)
                j = self.heads[j] - 1

    def __len__(self):
        return len(self.forms)

    @property
    def edges(self) -> List[Tuple[int, int, str]]:
        return [(h, i + 1, r) for i, (h, r) in enumerate(zip(self.heads, self.deprels))]

    def children(self, i: int) -> List[int]:
        return [j for j, h in enumerate(self.heads) if h == i + 1]

    def is_wh(self, i: int) -> bool:
        return self.lemmas[i].lower() in WH_WORDS

    def is_copula(self, i: int) -> bool:
        return self.lemmas[i].lower() in COPULA_LEMMAS

    @classmethod
    def from_conllu(cls, text: str) -> "DepTree":
        """Read the ID FORM LEMMA UPOS HEAD DEPREL columns of a CoNLL-U block.

        Full ten-column CoNLL-U rows are also accepted; multiword ranges,
        empty nodes and comments are skipped.
        """
        forms, lemmas, upos, heads, rels = [], [], [], [], []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if "-" in cols[0] or "." in cols[0]:
                continue
            if len(cols) >= 10:
                cols = [cols[0], cols[1], cols[2], cols[3], cols[6], cols[7]]
            if len(cols) != 6:
                raise ValueError(f"expected 6 columns, got {len(cols)}: {line!r}")
            if int(cols[0]) != len(forms) + 1:
                raise ValueError(f"token ids out of sequence at {cols[0]}")
            forms.append(cols[1])
            lemmas.append(cols[2])
            upos.append(cols[3])
            heads.append(int(cols[4]))
            rels.append(cols[5])
        return cls(forms, lemmas, upos, heads, rels)

    def to_conllu(self) -> str:
        rows = [f"{i + 1}\t{f}\t{l}\t{u}\t{h}\t{r}" for i, (f, l, u, h, r)
                in enumerate(zip(self.forms, self.lemmas, self.upos, self.heads, self.deprels))]
        return "\n".join(rows)


def _lexeme(tree: DepTree, i: int) -> str:
    return tree.lemmas[i].lower()


def _nominal_fragment(tree: DepTree, i: int) -> Layout:
    kind = "lookup" if tree.upos[i] == "PROPN" else "find"
    return Layout(kind, _lexeme(tree, i))


def _pp_object(tree: DepTree, prep: int) -> Optional[int]:
    for j in tree.children(prep):
        if tree.upos[j] in ("NOUN", "PROPN"):
            return j
    return None


def extract_fragments(tree: DepTree) -> List[Layout]:
    """Map constituents attached to a wh-word or copula onto layout fragments.

    Common nouns and verbs become ``find``, proper nouns ``lookup``, and a
    prepositional phrase becomes ``relate[prep]`` over its object's fragment.
    Both prep-headed (prep/pobj) and case-marked (noun with an ADP child)
    attachment styles are recognized.
    """
    anchors = [i for i in range(len(tree)) if tree.is_wh(i) or tree.is_copula(i)]
    attached: List[int] = []
    for a in anchors:
        neighbors = tree.children(a)
        if tree.heads[a]:
            neighbors.append(tree.heads[a] - 1)
        for j in sorted(neighbors):
            if j not in attached and j not in anchors:
                attached.append(j)
    attached.sort()

    fragments: List[Layout] = []
    for j in attached:
        pos = tree.upos[j]
        frag = None
        if pos == "ADP":
            obj = _pp_object(tree, j)
            if obj is not None:
                frag = Layout("relate", _lexeme(tree, j), (_nominal_fragment(tree, obj),))
        elif pos in ("NOUN", "PROPN", "VERB"):
            case = [c for c in tree.children(j) if tree.upos[c] == "ADP"]
            if case and pos != "VERB":
                frag = Layout("relate", _lexeme(tree, case[0]), (_nominal_fragment(tree, j),))
            else:
                frag = _nominal_fragment(tree, j)
        if frag is not None and frag not in fragments:
            fragments.append(frag)
    return fragments


def describe_lexeme(tree: DepTree) -> str:
    """The wh-word of the question, or the copula lemma when there is none."""
    for i in range(len(tree)):
        if tree.is_wh(i):
            return _lexeme(tree, i)
    for i in range(len(tree)):
        if tree.is_copula(i):
            return _lexeme(tree, i)
    return "what"


def join_fragments(fragments: Sequence[Layout]) -> Layout:
    if len(fragments) == 1:
        return fragments[0]
    return Layout("and", None, tuple(fragments))


def candidates_from_fragments(fragments: Sequence[Layout], root_lexeme: str) -> List[Layout]:
    if len(fragments) > MAX_FRAGMENTS:
        log.warning("truncating %d fragments to %d", len(fragments), MAX_FRAGMENTS)
        fragments = fragments[:MAX_FRAGMENTS]
    out = []
    idx = range(len(fragments))
    for size in range(1, len(fragments) + 1):
        for subset in itertools.combinations(idx, size):
            body = join_fragments([fragments[i] for i in subset])
            out.append(Layout("exists", None, (body,)))
            out.append(Layout("describe", root_lexeme, (body,)))
    return out


def generate_candidates(tree: DepTree) -> List[Layout]:
    """Every nonempty fragment subset, topped once by exists and once by describe."""
    return candidates_from_fragments(extract_fragments(tree), describe_lexeme(tree))


def full_conjunction(tree: DepTree) -> Optional[Layout]:
    """The fixed-structure layout: describe over the conjunction of all fragments."""
    fragments = extract_fragments(tree)[:MAX_FRAGMENTS]
    if not fragments:
        return None
    return Layout("describe", describe_lexeme(tree), (join_fragments(fragments),))


# -- features --------------------------------------------------------------

@dataclass(frozen=True)
class LayoutFeatures:
    counts: Tuple[int, ...]
    args: FrozenSet[str] = field(default_factory=frozenset)

    def count(self, kind: str) -> int:
        return self.counts[KINDS.index(kind)]

    def vector(self, lexicon: Dict[str, int], unk: str = "<unk>") -> np.ndarray:
        """Module counts followed by an indicator per lexicon entry."""
        vec = np.zeros(len(KINDS) + len(lexicon))
        vec[:len(KINDS)] = self.counts
        for a in self.args:
            vec[len(KINDS) + lexicon.get(a, lexicon[unk])] = 1.0
        return vec


def layout_features(layout: Layout) -> LayoutFeatures:
    counts = [0] * len(KINDS)
    args = set()
    for node in layout.walk():
        counts[KINDS.index(node.kind)] += 1
        if node.arg is not None:
            args.add(node.arg)
    return LayoutFeatures(tuple(counts), frozenset(args))
