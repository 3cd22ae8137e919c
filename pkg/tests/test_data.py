import json

import numpy as np
import pytest

from dnmn.data import (Facts, SchemaError, SynthSpec, build_vocab, load_gold_layouts, load_questions,
                       load_world, load_worlds, quantifier_spec, save_gold_layouts, save_questions, save_world,
                       save_worlds, symbolic_execute, synth_generate)
from dnmn.encoder import UNK
from dnmn.layout import DepTree, generate_candidates, parse_layout_string, print_layout
from dnmn.modules import World
from dnmn.training import Model

from conftest import BIRD, STATES


def write_jsonl(path, docs):
    path.write_text("".join(json.dumps(d) + "\n" for d in docs))


def question_doc(qid, conllu, answer="yes", env="env00"):
    tree = DepTree.from_conllu(conllu)
    return {"schema_version": 1, "id": qid, "environment": env, "tokens": tree.forms,
            "parse": conllu, "answer": answer, "split": "train"}


class TestWorldFiles:
    def test_minimal_round_trip(self, tmp_path):
        w = World(["x"], {"category": np.array([[0.5]]), "relation": np.array([[-1.0]])}, {"x": 0}, "env00")
        save_world(w, tmp_path / "w.json")
        back = load_world(tmp_path / "w.json")
        assert back.entity_ids == ["x"] and back.env_id == "env00" and back.lookup_index == {"x": 0}
        for k in w.views:
            np.testing.assert_array_equal(back.views[k], w.views[k])

    def _doc(self, **over):
        doc = {"schema_version": 1, "environment": "e", "entities": ["a", "b"],
               "views": {"category": [[1.0, 2.0]]}, "lookup_index": {"a": 0}}
        doc.update(over)
        return doc

    def test_width_mismatch(self, tmp_path):
        (tmp_path / "w.json").write_text(json.dumps(self._doc(views={"category": [[1.0, 2.0, 3.0]]})))
        with pytest.raises(SchemaError, match="category"):
            load_world(tmp_path / "w.json")

    def test_duplicate_entity(self, tmp_path):
        (tmp_path / "w.json").write_text(json.dumps(self._doc(entities=["a", "a"])))
        with pytest.raises(SchemaError, match="duplicate"):
            load_world(tmp_path / "w.json")

    def test_missing_field_named(self, tmp_path):
        doc = self._doc()
        del doc["entities"]
        (tmp_path / "w.json").write_text(json.dumps(doc))
        with pytest.raises(SchemaError, match="entities"):
            load_world(tmp_path / "w.json")

    def test_bundle_and_directory(self, tmp_path, small_synth):
        save_worlds(small_synth.worlds, tmp_path / "bundle.json")
        bundle = load_worlds(tmp_path / "bundle.json")
        d = tmp_path / "dir"
        d.mkdir()
        for env, w in small_synth.worlds.items():
            save_world(w, d / f"{env}.json")
        assert sorted(load_worlds(d)) == sorted(bundle) == sorted(small_synth.worlds)
        for env, w in small_synth.worlds.items():
            for k in w.views:
                assert bundle[env].views[k].tobytes() == w.views[k].tobytes()


class TestQuestionFiles:
    def test_two_question_fixture(self, tmp_path):
        write_jsonl(tmp_path / "q.jsonl", [question_doc("bird", BIRD, "white"), question_doc("states", STATES)])
        qs = load_questions(tmp_path / "q.jsonl")
        assert [len(q.tokens) for q in qs] == [6, 5]
        assert qs[1].tokens == ["Are", "there", "any", "states", "?"]

    def test_head_out_of_range(self, tmp_path):
        bad = STATES.replace("4\tstates\tstate\tNOUN\t1", "4\tstates\tstate\tNOUN\t9")
        write_jsonl(tmp_path / "q.jsonl", [question_doc("s", STATES) | {"parse": bad}])
        with pytest.raises(SchemaError, match="id s"):
            load_questions(tmp_path / "q.jsonl")

    def test_cyclic_parse(self, tmp_path):
        bad = STATES.replace("1\tAre\tbe\tAUX\t0", "1\tAre\tbe\tAUX\t4").replace("4\tstates\tstate\tNOUN\t1",
                                                                                 "4\tstates\tstate\tNOUN\t0")
        bad = bad.replace("5\t?\t?\tPUNCT\t1", "5\t?\t?\tPUNCT\t4")
        bad = bad.replace("2\tthere\tthere\tPRON\t1", "2\tthere\tthere\tPRON\t3").replace(
            "3\tany\tany\tDET\t4", "3\tany\tany\tDET\t2")
        write_jsonl(tmp_path / "q.jsonl", [question_doc("cyc", STATES) | {"parse": bad}])
        with pytest.raises(SchemaError, match="cyc"):
            load_questions(tmp_path / "q.jsonl")

    def test_token_count_mismatch(self, tmp_path):
        write_jsonl(tmp_path / "q.jsonl", [question_doc("s", STATES) | {"tokens": ["are"]}])
        with pytest.raises(SchemaError):
            load_questions(tmp_path / "q.jsonl")

    def test_empty_answer(self, tmp_path):
        write_jsonl(tmp_path / "q.jsonl", [question_doc("s", STATES, answer="")])
        with pytest.raises(SchemaError, match="answer"):
            load_questions(tmp_path / "q.jsonl")

    def test_empty_file(self, tmp_path):
        (tmp_path / "q.jsonl").write_text("")
        assert load_questions(tmp_path / "q.jsonl") == []

    def test_round_trip(self, tmp_path, small_synth):
        save_questions(small_synth.examples, tmp_path / "q.jsonl")
        assert load_questions(tmp_path / "q.jsonl") == small_synth.examples

    def test_gold_layout_round_trip(self, tmp_path, small_synth):
        save_gold_layouts(small_synth.gold_layouts, tmp_path / "g.json")
        assert load_gold_layouts(tmp_path / "g.json") == small_synth.gold_layouts


class TestVocab:
    def test_order_independent(self, small_synth):
        a = build_vocab(small_synth.examples, small_synth.attribute_labels)
        b = build_vocab(list(reversed(small_synth.examples)), small_synth.attribute_labels)
        assert a == b
        assert a[0] == sorted(a[0]) and a[1] == sorted(a[1])

    def test_always_has_unk_yes_no(self):
        words, answers = build_vocab([], ())
        assert words == [UNK]
        assert answers == ["no", "yes"]

    def test_attribute_labels_and_answers(self, small_synth):
        _, answers = build_vocab(small_synth.examples, ("tiny",))
        assert {"tiny", "small", "medium", "large", "yes", "no"} <= set(answers)

    def test_unseen_word_is_unk_but_gets_fresh_module_vector(self, small_synth):
        words, answers = build_vocab(small_synth.examples, small_synth.attribute_labels)
        dims = {k: v.shape[0] for k, v in next(iter(small_synth.worlds.values())).views.items()}
        model = Model(words, answers, dims)
        assert model.encoder.token_ids(["okapi"]) == [words.index(UNK)]
        assert "find/v/okapi" not in model.params
        w = next(iter(small_synth.worlds.values()))
        model.execute(parse_layout_string("(exists find[okapi])"), w)
        assert model.params["find/v/okapi"].shape == (model.config.module_hidden,)


class TestSynth:
    def test_defaults(self):
        ds = synth_generate()
        assert len(ds.worlds) == 10
        assert all(w.n == 20 for w in ds.worlds.values())
        assert len(ds.examples) >= 500

    def test_deterministic_files(self, tmp_path):
        spec = SynthSpec(n_environments=2, questions_per_environment=8, seed=11)
        for tag in ("a", "b"):
            ds = synth_generate(spec)
            save_worlds(ds.worlds, tmp_path / f"w_{tag}.json")
            save_questions(ds.examples, tmp_path / f"q_{tag}.jsonl")
        assert (tmp_path / "w_a.json").read_bytes() == (tmp_path / "w_b.json").read_bytes()
        assert (tmp_path / "q_a.jsonl").read_bytes() == (tmp_path / "q_b.jsonl").read_bytes()

    def test_symbolic_consistency(self):
        for seed in range(3):
            ds = synth_generate(quantifier_spec(seed=seed, questions_per_environment=30))
            for ex in ds.examples:
                assert symbolic_execute(ds.gold_layouts[ex.id], ds.facts[ex.env_id]) == ex.answer

    def test_gold_layout_is_a_candidate(self, small_synth):
        for ex in small_synth.examples:
            assert small_synth.gold_layouts[ex.id] in generate_candidates(ex.parse)

    def test_empty_category_existential_is_no(self):
        facts = Facts(["ga", "atl"], {"ga": "state", "atl": "city"}, {"ga": None, "atl": "ga"})
        z = parse_layout_string("(exists (and find[lake] (relate[in] lookup[ga])))")
        assert symbolic_execute(z, facts) == "no"
        z = parse_layout_string("(exists (and find[city] (relate[in] lookup[ga])))")
        assert symbolic_execute(z, facts) == "yes"

    def test_relation_template(self):
        spec = SynthSpec(n_environments=2, questions_per_environment=40, seed=5,
                         template_weights={"relation": 1.0})
        ds = synth_generate(spec)
        for ex in ds.examples:
            z = ds.gold_layouts[ex.id]
            cat, place = ex.parse.lemmas[4], ex.parse.lemmas[6]
            assert print_layout(z) == f"(describe[how] (and find[{cat}] (relate[in] lookup[{place}])))"
            facts = ds.facts[ex.env_id]
            match = set(facts.members(cat)) & set(facts.inside([place]))
            assert len(match) == 1
            assert ex.answer == facts.size[match.pop()]

    def test_quantifier_mix_has_both_answer_kinds(self):
        ds = synth_generate(quantifier_spec(n_environments=2, questions_per_environment=40))
        answers = {ex.answer for ex in ds.examples}
        assert {"yes", "no"} <= answers and answers & {"small", "medium", "large"}

    def test_presence_template(self):
        spec = SynthSpec(n_environments=2, questions_per_environment=20, seed=2,
                         template_weights={"presence": 1.0})
        ds = synth_generate(spec)
        for ex in ds.examples:
            assert print_layout(ds.gold_layouts[ex.id]).startswith("(exists find[")
        assert {ex.answer for ex in ds.examples} == {"yes", "no"}

    @pytest.mark.parametrize("kw", [dict(template_weights={"bogus": 1.0}), dict(entities_per_environment=30),
                                    dict(relations=("near",)), dict(n_containers=20)])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            SynthSpec(**kw)

    def test_category_view_linearly_separable(self):
        ds = synth_generate(SynthSpec(n_environments=3, questions_per_environment=4, noise=0.0, seed=1))
        X = np.concatenate([w.views["category"].T for w in ds.worlds.values()])
        labels = [ds.facts[env].category[name] for env, w in ds.worlds.items() for name in w.entity_ids]
        X = np.hstack([X, np.ones((len(X), 1))])
        for cat in sorted(set(labels)):
            y = np.array([1.0 if l == cat else -1.0 for l in labels])
            w = np.zeros(X.shape[1])
            for _ in range(1000):
                wrong = np.flatnonzero(y * (X @ w) <= 0)
                if wrong.size == 0:
                    break
                w += y[wrong[0]] * X[wrong[0]]
            assert np.all(y * (X @ w) > 0), cat
