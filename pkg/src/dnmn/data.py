"""World and question files, vocabularies, and the synthetic geography generator."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, Iterable, List, Optional, Tuple

import jsonschema
import numpy as np

from .encoder import UNK
from .layout import DepTree, Layout, parse_layout_string, print_layout
from .modules import YES_NO, World

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    pass


def load_schema(name: str) -> dict:
    text = resources.files("dnmn").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def _validate(doc, schema_name: str, where: str):
    try:
        jsonschema.validate(doc, load_schema(schema_name))
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{where}: field {path}: {exc.message}") from None


@dataclass
class Example:
    id: str
    env_id: str
    tokens: List[str]
    parse: DepTree
    answer: str
    split: str = "train"


# -- worlds ----------------------------------------------------------------

def world_to_dict(world: World) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "environment": world.env_id,
        "entities": list(world.entity_ids),
        "views": {k: v.tolist() for k, v in world.views.items()},
        "lookup_index": dict(world.lookup_index),
    }


def world_from_dict(doc: dict, where: str = "world") -> World:
    _validate(doc, "world", where)
    try:
        return World(list(doc["entities"]), {k: np.asarray(v, dtype=np.float64) for k, v in doc["views"].items()},
                     dict(doc.get("lookup_index", {})), doc["environment"])
    except ValueError as exc:
        raise SchemaError(f"{where} ({doc.get('environment')}): {exc}") from None


def save_world(world: World, path):
    with open(path, "w") as fh:
        json.dump(world_to_dict(world), fh)


def load_world(path) -> World:
    with open(path) as fh:
        return world_from_dict(json.load(fh), str(path))


def save_worlds(worlds: Dict[str, World], path):
    with open(path, "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION,
                   "worlds": [world_to_dict(w) for w in worlds.values()]}, fh)


def load_worlds(path) -> Dict[str, World]:
    """Read a bundle file, a single world file, or a directory of world files."""
    if os.path.isdir(path):
        worlds = [load_world(os.path.join(path, f)) for f in sorted(os.listdir(path)) if f.endswith(".json")]
    else:
        with open(path) as fh:
            doc = json.load(fh)
        if "worlds" in doc:
            worlds = [world_from_dict(d, f"{path}[{i}]") for i, d in enumerate(doc["worlds"])]
        else:
            worlds = [world_from_dict(doc, str(path))]
    out = {}
    for w in worlds:
        if w.env_id in out:
            raise SchemaError(f"{path}: duplicate environment {w.env_id!r}")
        out[w.env_id] = w
    return out


# -- questions -------------------------------------------------------------

def example_to_dict(ex: Example) -> dict:
    return {"schema_version": SCHEMA_VERSION, "id": ex.id, "environment": ex.env_id,
            "tokens": list(ex.tokens), "parse": ex.parse.to_conllu(), "answer": ex.answer,
            "split": ex.split}


def example_from_dict(doc: dict, where: str) -> Example:
    _validate(doc, "question", where)
    try:
        tree = DepTree.from_conllu(doc["parse"])
    except ValueError as exc:
        raise SchemaError(f"{where} (id {doc['id']}): {exc}") from None
    if len(tree) != len(doc["tokens"]):
        raise SchemaError(f"{where} (id {doc['id']}): parse has {len(tree)} tokens, "
                          f"question has {len(doc['tokens'])}")
    return Example(doc["id"], doc["environment"], list(doc["tokens"]), tree, doc["answer"],
                   doc.get("split", "train"))


def save_questions(examples: Iterable[Example], path):
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_dict(ex)) + "\n")


def load_questions(path) -> List[Example]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            out.append(example_from_dict(json.loads(line), f"{path}:{lineno}"))
    return out


def save_gold_layouts(layouts: Dict[str, Layout], path):
    with open(path, "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION,
                   "layouts": {k: print_layout(v) for k, v in layouts.items()}}, fh, indent=1)


def load_gold_layouts(path) -> Dict[str, Layout]:
    with open(path) as fh:
        doc = json.load(fh)
    _validate(doc, "gold_layouts", str(path))
    return {k: parse_layout_string(v) for k, v in doc["layouts"].items()}


# -- vocabularies ----------------------------------------------------------

def build_vocab(questions: Iterable[Example],
                attribute_labels: Iterable[str] = ()) -> Tuple[List[str], List[str]]:
    """Sorted word vocabulary (with UNK) and answer vocabulary.

    Answers are every attribute label, every gold answer seen, and always
    ``yes``/``no``.
    """
    words = {UNK}
    answers = set(YES_NO) | set(attribute_labels)
    for ex in questions:
        words.update(t.lower() for t in ex.tokens)
        words.update(l.lower() for l in ex.parse.lemmas)
        answers.add(ex.answer)
    return sorted(words), sorted(answers)


# -- synthetic generator ---------------------------------------------------

NAME_POOL = (
    "alder", "aspen", "bayou", "birch", "briar", "cedar", "clove", "cobalt", "coral", "delta",
    "dune", "elm", "ember", "fern", "fjord", "flint", "garnet", "glen", "harbor", "hazel",
    "heath", "indigo", "iris", "juniper", "kestrel", "laurel", "linden", "maple", "marsh", "mesa",
    "nutmeg", "oak", "olive", "onyx", "pine", "quarry", "raven", "ridge", "sage", "willow",
)

PLURALS = {"city": "cities", "park": "parks", "lake": "lakes", "river": "rivers",
           "island": "islands", "mountain": "mountains", "forest": "forests", "desert": "deserts",
           "state": "states"}

TEMPLATES = ("attribute", "category", "relation", "conjunction", "existential", "presence")


@dataclass
class SynthSpec:
    n_environments: int = 10
    entities_per_environment: int = 20
    n_containers: int = 4
    container_category: str = "state"
    categories: Tuple[str, ...] = ("city", "park", "lake", "river", "island")
    relations: Tuple[str, ...] = ("in",)
    sizes: Tuple[str, ...] = ("small", "medium", "large")
    questions_per_environment: int = 50
    template_weights: Dict[str, float] = field(default_factory=lambda: {
        "attribute": 0.1, "category": 0.15, "relation": 0.15, "conjunction": 0.35, "existential": 0.25})
    name_pool_size: int = 24
    feature_dim: int = 64
    noise: float = 0.0
    seed: int = 0
    max_attempts: int = 1000

    def __post_init__(self):
        if not self.entities_per_environment <= self.name_pool_size <= len(NAME_POOL):
            raise ValueError("not enough entity names for that many entities")
        if self.n_containers >= self.entities_per_environment:
            raise ValueError("need at least one non-container entity")
        for t in self.template_weights:
            if t not in TEMPLATES:
                raise ValueError(f"unknown template {t!r}")
        if self.relations != ("in",):
            raise ValueError("only the containment relation 'in' is generated")

    @property
    def name_pool(self) -> Tuple[str, ...]:
        return NAME_POOL[:self.name_pool_size]

    @property
    def all_categories(self) -> Tuple[str, ...]:
        return (self.container_category,) + tuple(self.categories)


QUANTIFIER_WEIGHTS = {"attribute": 0.1, "category": 0.1, "relation": 0.2,
                      "conjunction": 0.25, "existential": 0.35}


def quantifier_spec(**overrides) -> SynthSpec:
    """The quantified-question mix: boolean existentials alongside size questions."""
    overrides.setdefault("template_weights", dict(QUANTIFIER_WEIGHTS))
    return SynthSpec(**overrides)


@dataclass
class Facts:
    """The symbolic world a synthetic environment was generated from."""

    names: List[str]
    category: Dict[str, str]
    container: Dict[str, Optional[str]]
    size: Dict[str, str] = field(default_factory=dict)

    def members(self, cat: str) -> List[str]:
        return [n for n in self.names if self.category[n] == cat]

    def inside(self, names) -> List[str]:
        names = set(names)
        return [n for n in self.names if self.container[n] in names]


def symbolic_execute(layout: Layout, facts: Facts):
    """Gold semantics: attentions are entity sets; describe reports the size of the unique member."""
    kind = layout.kind
    if kind == "lookup":
        return {layout.arg} if layout.arg in facts.category else set()
    if kind == "find":
        return set(facts.members(layout.arg))
    if kind == "relate":
        if layout.arg != "in":
            raise ValueError(f"no symbolic relation {layout.arg!r}")
        return set(facts.inside(symbolic_execute(layout.children[0], facts)))
    if kind == "and":
        out = symbolic_execute(layout.children[0], facts)
        for c in layout.children[1:]:
            out = out & symbolic_execute(c, facts)
        return out
    inner = symbolic_execute(layout.children[0], facts)
    if kind == "exists":
        return "yes" if inner else "no"
    if len(inner) != 1:
        raise ValueError(f"describe over {len(inner)} entities has no single answer")
    return facts.size[next(iter(inner))]


def _projection(rng, dim, width):
    P = rng.normal(size=(dim, width)) / np.sqrt(dim)
    if np.linalg.matrix_rank(P) < width:
        raise ValueError("feature projection is rank deficient")
    return P


class _ParseBuilder:
    def __init__(self):
        self.rows = []

    def add(self, form, lemma, upos, head, rel):
        self.rows.append((form, lemma, upos, head, rel))
        return len(self.rows)

    def tree(self) -> DepTree:
        f, l, u, h, r = zip(*self.rows)
        return DepTree(list(f), list(l), list(u), list(h), list(r))


def _q_attribute(name):
    # how big is X ?
    t = _ParseBuilder()
    t.add("how", "how", "ADV", 2, "advmod")
    t.add("big", "big", "ADJ", 3, "acomp")
    t.add("is", "be", "AUX", 0, "root")
    t.add(name, name, "PROPN", 3, "nsubj")
    t.add("?", "?", "PUNCT", 3, "punct")
    return t.tree(), Layout("describe", "how", (Layout("lookup", name),))


def _q_category(cat):
    # how big is the lake ?
    t = _ParseBuilder()
    t.add("how", "how", "ADV", 2, "advmod")
    t.add("big", "big", "ADJ", 3, "acomp")
    t.add("is", "be", "AUX", 0, "root")
    t.add("the", "the", "DET", 5, "det")
    t.add(cat, cat, "NOUN", 3, "nsubj")
    t.add("?", "?", "PUNCT", 3, "punct")
    return t.tree(), Layout("describe", "how", (Layout("find", cat),))


def _q_relation(cat, place):
    # how big is the city in X ?
    t = _ParseBuilder()
    t.add("how", "how", "ADV", 2, "advmod")
    t.add("big", "big", "ADJ", 3, "acomp")
    t.add("is", "be", "AUX", 0, "root")
    t.add("the", "the", "DET", 5, "det")
    t.add(cat, cat, "NOUN", 3, "nsubj")
    t.add("in", "in", "ADP", 3, "prep")
    t.add(place, place, "PROPN", 6, "pobj")
    t.add("?", "?", "PUNCT", 3, "punct")
    body = Layout("and", None, (Layout("find", cat), Layout("relate", "in", (Layout("lookup", place),))))
    return t.tree(), Layout("describe", "how", (body,))


def _q_conjunction(name, cat):
    # is X a city ?
    t = _ParseBuilder()
    t.add("is", "be", "AUX", 0, "root")
    t.add(name, name, "PROPN", 1, "nsubj")
    t.add("an" if cat[0] in "aeiou" else "a", "a", "DET", 4, "det")
    t.add(cat, cat, "NOUN", 1, "attr")
    t.add("?", "?", "PUNCT", 1, "punct")
    body = Layout("and", None, (Layout("lookup", name), Layout("find", cat)))
    return t.tree(), Layout("exists", None, (body,))


def _q_located(name, place):
    # is X in Y ?
    t = _ParseBuilder()
    t.add("is", "be", "AUX", 0, "root")
    t.add(name, name, "PROPN", 1, "nsubj")
    t.add("in", "in", "ADP", 1, "prep")
    t.add(place, place, "PROPN", 3, "pobj")
    t.add("?", "?", "PUNCT", 1, "punct")
    body = Layout("and", None, (Layout("lookup", name), Layout("relate", "in", (Layout("lookup", place),))))
    return t.tree(), Layout("exists", None, (body,))


def _q_existential(cat, place, plural):
    # are there any cities in X ? / is there a city in X ?
    t = _ParseBuilder()
    t.add("are" if plural else "is", "be", "AUX", 0, "root")
    t.add("there", "there", "PRON", 1, "expl")
    if plural:
        t.add("any", "any", "DET", 4, "det")
    else:
        t.add("an" if cat[0] in "aeiou" else "a", "a", "DET", 4, "det")
    t.add(PLURALS[cat] if plural else cat, cat, "NOUN", 1, "nsubj")
    t.add("in", "in", "ADP", 1, "prep")
    t.add(place, place, "PROPN", 5, "pobj")
    t.add("?", "?", "PUNCT", 1, "punct")
    body = Layout("and", None, (Layout("find", cat), Layout("relate", "in", (Layout("lookup", place),))))
    return t.tree(), Layout("exists", None, (body,))


def _q_presence(cat, plural):
    # are there any lakes ? / is there a lake ?
    t = _ParseBuilder()
    t.add("are" if plural else "is", "be", "AUX", 0, "root")
    t.add("there", "there", "PRON", 1, "expl")
    if plural:
        t.add("any", "any", "DET", 4, "det")
    else:
        t.add("an" if cat[0] in "aeiou" else "a", "a", "DET", 4, "det")
    t.add(PLURALS[cat] if plural else cat, cat, "NOUN", 1, "nsubj")
    t.add("?", "?", "PUNCT", 1, "punct")
    return t.tree(), Layout("exists", None, (Layout("find", cat),))


def _generate_facts(spec: SynthSpec, rng) -> Facts:
    n = spec.entities_per_environment
    pool = spec.name_pool
    names = [pool[i] for i in sorted(rng.choice(len(pool), size=n, replace=False))]
    order = rng.permutation(n)
    category, container = {}, {}
    containers = [names[i] for i in order[:spec.n_containers]]
    for name in containers:
        category[name] = spec.container_category
        container[name] = None
    for i in order[spec.n_containers:]:
        name = names[i]
        category[name] = spec.categories[int(rng.integers(len(spec.categories)))]
        container[name] = containers[int(rng.integers(len(containers)))]
    size = {name: spec.sizes[int(rng.integers(len(spec.sizes)))] for name in names}
    return Facts(names, category, container, size)


def _facts_to_world(spec: SynthSpec, env_id: str, facts: Facts, projections, rng) -> World:
    n = len(facts.names)
    cats = spec.all_categories
    containers = facts.members(spec.container_category)
    # slots follow entity-list order; slot j means the same thing in every view
    slot = {c: i for i, c in enumerate(containers)}
    # category and relation facts are signed indicators: +1 where the fact
    # holds, -1 elsewhere
    sym = {
        "category": -np.ones((len(cats), n)),
        "relation": -np.ones((2 * spec.n_containers, n)),
        "attribute": -np.ones((len(spec.sizes), n)),
    }
    for k, name in enumerate(facts.names):
        sym["category"][cats.index(facts.category[name]), k] = 1.0
        sym["attribute"][spec.sizes.index(facts.size[name]), k] = 1.0
        if facts.container[name] is None:
            sym["relation"][slot[name], k] = 1.0
        else:
            sym["relation"][spec.n_containers + slot[facts.container[name]], k] = 1.0
    views = {}
    for view, code in sym.items():
        views[view] = projections[view] @ code + spec.noise * rng.normal(size=(spec.feature_dim, n))
    return World(list(facts.names), views, {name: k for k, name in enumerate(facts.names)}, env_id)


@dataclass
class SynthDataset:
    worlds: Dict[str, World]
    examples: List[Example]
    gold_layouts: Dict[str, Layout]
    facts: Dict[str, Facts]
    attribute_labels: Tuple[str, ...]
    template_of: Dict[str, str] = field(default_factory=dict)


def _satisfiable(spec: SynthSpec, facts: Facts) -> bool:
    cats = spec.categories
    containers = facts.members(spec.container_category)
    if "category" in spec.template_weights and not any(len(facts.members(c)) == 1 for c in cats):
        return False
    if "presence" in spec.template_weights and all(facts.members(c) for c in cats):
        return False
    if "relation" in spec.template_weights:
        return any(len(set(facts.members(c)) & set(facts.inside([p]))) == 1
                   for c in cats for p in containers)
    return True


def _draw_question(spec: SynthSpec, template: str, facts: Facts, rng, want_yes: bool):
    cats = list(spec.categories)
    containers = facts.members(spec.container_category)
    plural = bool(rng.integers(2))
    if template == "attribute":
        return _q_attribute(facts.names[int(rng.integers(len(facts.names)))])
    if template == "category":
        unique = [c for c in cats if len(facts.members(c)) == 1]
        if not unique:
            return None
        return _q_category(unique[int(rng.integers(len(unique)))])
    if template == "relation":
        pairs = [(c, p) for c in cats for p in containers
                 if len(set(facts.members(c)) & set(facts.inside([p]))) == 1]
        if not pairs:
            return None
        c, p = pairs[int(rng.integers(len(pairs)))]
        return _q_relation(c, p)
    if template == "conjunction" and rng.integers(2):
        name = facts.names[int(rng.integers(len(facts.names)))]
        if facts.container[name] is None:
            return None
        place = facts.container[name] if want_yes else containers[int(rng.integers(len(containers)))]
        if (place == facts.container[name]) != want_yes:
            return None
        return _q_located(name, place)
    if template == "conjunction":
        name = facts.names[int(rng.integers(len(facts.names)))]
        cat = facts.category[name] if want_yes else cats[int(rng.integers(len(cats)))]
        if cat == facts.category[name] and not want_yes:
            return None
        return _q_conjunction(name, cat)
    if template == "presence":
        c = cats[int(rng.integers(len(cats)))]
        if bool(facts.members(c)) != want_yes:
            return None
        return _q_presence(c, plural)
    c = cats[int(rng.integers(len(cats)))]
    p = containers[int(rng.integers(len(containers)))]
    has = bool(set(facts.members(c)) & set(facts.inside([p])))
    if has != want_yes:
        return None
    return _q_existential(c, p, plural)


def synth_generate(spec: Optional[SynthSpec] = None) -> SynthDataset:
    """Generate worlds, parsed questions, gold answers and gold layouts.

    Gold answers come from :func:`symbolic_execute` over the generating
    facts.  Features are fixed random projections of signed symbolic codes
    (category for the category view, container identity and membership
    slots for the relation view, size for the attribute view) plus
    Gaussian noise.
    """
    spec = spec or SynthSpec()
    rng = np.random.default_rng(spec.seed)
    cats = spec.all_categories
    projections = {
        "category": _projection(rng, spec.feature_dim, len(cats)),
        "relation": _projection(rng, spec.feature_dim, 2 * spec.n_containers),
        "attribute": _projection(rng, spec.feature_dim, len(spec.sizes)),
    }
    templates = list(spec.template_weights)
    weights = np.array([spec.template_weights[t] for t in templates], dtype=float)
    weights /= weights.sum()

    worlds, facts_by_env, examples, gold, template_of = {}, {}, [], {}, {}
    for e in range(spec.n_environments):
        env_id = f"env{e:02d}"
        for _ in range(spec.max_attempts):
            facts = _generate_facts(spec, rng)
            if _satisfiable(spec, facts):
                break
        else:
            raise RuntimeError(f"could not generate a usable world for {env_id}")
        worlds[env_id] = _facts_to_world(spec, env_id, facts, projections, rng)
        facts_by_env[env_id] = facts
        for q in range(spec.questions_per_environment):
            template = templates[int(rng.choice(len(templates), p=weights))]
            want_yes = bool(q % 2)
            for _ in range(spec.max_attempts):
                drawn = _draw_question(spec, template, facts, rng, want_yes)
                if drawn is not None:
                    break
            else:
                raise RuntimeError(f"template {template!r} unsatisfiable in {env_id}")
            tree, layout = drawn
            qid = f"{env_id}-q{q:03d}"
            answer = symbolic_execute(layout, facts)
            examples.append(Example(qid, env_id, list(tree.forms), tree, answer))
            gold[qid] = layout
            template_of[qid] = template
    return SynthDataset(worlds, examples, gold, facts_by_env, tuple(spec.sizes), template_of)
