"""Acceptance criteria, one class per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary ends
with one PASS/FAIL line per criterion.  The two training criteria are
marked ``slow``.
"""

import json
import time

import numpy as np
import pytest

from dnmn import gradcheck
from dnmn.autodiff import AdadeltaState, Tape, adadelta_step, clip_by_global_norm, global_norm
from dnmn.data import (SynthSpec, build_vocab, load_gold_layouts, load_questions, load_worlds,
                       quantifier_spec, save_gold_layouts, save_questions, save_worlds, synth_generate)
from dnmn.layout import (DepTree, Layout, candidates_from_fragments, generate_candidates, parse_layout_string,
                         print_layout, typecheck)
from dnmn.training import (TrainConfig, cross_validate_loeo, evaluate, load_checkpoint, save_checkpoint,
                           train)

import oracles
from conftest import GEORGIA, random_world
from test_modules import make_modules
from toys import exact_policy_gradient, layout_param_names, rollout_statistics, toy_problem

THREE = ["(exists (and lookup[x] find[city]))", "(describe[be] find[city])", "(exists find[city])"]


def value(fn):
    t = Tape()
    return t.value(fn(t))


@pytest.mark.criterion(1, "gradient suite")
class TestGradientSuite:
    def test_hundred_configurations_under_a_minute(self):
        start = time.perf_counter()
        results = gradcheck.run_suite(configs=100, seed=0, tolerance=1e-4)
        elapsed = time.perf_counter() - start
        names = {r.name for r in results}
        assert {"find", "relate", "and", "describe", "exists", "fusion", "scorer", "lstm"} <= names
        failed = [(r.name, r.max_rel_error) for r in results if not r.passed]
        assert not failed, failed
        assert all(r.configs == 100 for r in results)
        print(f"gradient suite: {len(results)} checks, worst {max(r.max_rel_error for r in results):.2e}, "
              f"{elapsed:.1f}s")
        assert elapsed < 60.0


@pytest.mark.criterion(2, "formula oracles")
class TestFormulaOracles:
    N = 1000

    def _instances(self, seed):
        rng = np.random.default_rng(seed)
        for _ in range(self.N):
            n = int(rng.integers(1, 8))
            dims = tuple(int(d) for d in rng.integers(1, 6, size=3))
            w = random_world(rng, n=n, dims=dims)
            m = make_modules(w, hidden=int(rng.integers(1, 6)), seed=int(rng.integers(1 << 30)))
            yield rng, w, m

    def test_find(self):
        for rng, w, m in self._instances(0):
            p = m.params
            want = oracles.find(p["find/a"], p["find/B"], p["find/C"], p["find/d"],
                                m.lexeme_vector("find", "city"), w.views["category"])
            np.testing.assert_allclose(value(lambda t: m.find(t, "city", w)), want, atol=1e-9, rtol=0)

    def test_relate(self):
        for rng, w, m in self._instances(1):
            p = m.params
            h = rng.dirichlet(np.ones(w.n))
            want = oracles.relate(p["relate/a"], p["relate/B"], p["relate/C"], p["relate/D"], p["relate/e"],
                                  m.lexeme_vector("relate", "in"), w.views["relation"], h)
            got = value(lambda t: m.relate(t, "in", t.const(h), w))
            np.testing.assert_allclose(got, want, atol=1e-9, rtol=0)

    def test_describe(self):
        for rng, w, m in self._instances(2):
            p = m.params
            h = rng.uniform(size=w.n)
            want = oracles.describe(p["describe/A"], p["describe/B"], m.lexeme_vector("describe", "how"),
                                    w.views["attribute"], h)
            got = value(lambda t: m.describe(t, "how", t.const(h), w))
            np.testing.assert_allclose(got, want, atol=1e-9, rtol=0)

    def test_exists(self):
        for rng, w, m in self._instances(3):
            h = rng.uniform(size=w.n)
            want = oracles.exists(m.params["exists/a"], m.params["exists/b"], h)
            np.testing.assert_allclose(value(lambda t: m.exists(t, t.const(h))), want, atol=1e-9, rtol=0)


@pytest.mark.criterion(3, "candidate enumeration")
class TestCandidateEnumeration:
    @pytest.mark.parametrize("k", range(7))
    def test_counts_match_subset_oracle(self, k):
        frags = [Layout("find", f"w{i}") if i % 2 else Layout("lookup", f"e{i}") for i in range(k)]
        cands = candidates_from_fragments(frags, "what")
        assert len(cands) == oracles.subset_count(k) == 2 * (2 ** k - 1)
        assert len({print_layout(z) for z in cands}) == len(cands)
        for z in cands:
            typecheck(z)

    def test_georgia_fixture(self):
        cands = generate_candidates(DepTree.from_conllu(GEORGIA))
        target = parse_layout_string("(and find[city] (relate[in] lookup[georgia]))")
        assert any(z.kind == "describe" and z.children[0] == target for z in cands)


@pytest.mark.criterion(4, "policy-gradient unbiasedness")
class TestPolicyGradientUnbiased:
    def test_three_candidate_toy(self):
        start = time.perf_counter()
        model, ex, world = toy_problem(THREE, seed=0)
        names = layout_param_names(model)
        exact, probs = exact_policy_gradient(model, ex, world, names)
        assert len(probs) == 3
        mean, se = rollout_statistics(model, ex, world, names, 100_000, seed=0)
        elapsed = time.perf_counter() - start
        # Coordinates whose exact value is pure float roundoff get a floor
        # ten orders of magnitude below the largest coordinate.
        roundoff = 1e-10 * np.max(np.abs(exact))
        z = np.abs(mean - exact) / np.maximum(se, roundoff)
        print(f"policy gradient: {exact.size} coordinates, max |z| {z.max():.2f}, {elapsed:.1f}s")
        assert np.all(np.abs(mean - exact) <= 3 * se + roundoff)
        assert elapsed < 120.0


@pytest.mark.criterion(5, "adadelta")
class TestAdadelta:
    def test_first_step(self):
        params = {"x": np.zeros(1)}
        deltas = adadelta_step(AdadeltaState(rho=0.95, epsilon=1e-6), params, {"x": np.ones(1)})
        assert abs(deltas["x"][0] - (-4.47209e-3)) < 1e-8

    def test_clipping_at_norm_ten(self):
        big = {"a": np.array([30.0, 40.0]), "b": np.array([0.0])}
        clipped = clip_by_global_norm(big, 10.0)
        assert global_norm(clipped) == pytest.approx(10.0, abs=1e-12)
        np.testing.assert_allclose(clipped["a"], [6.0, 8.0], atol=1e-12)
        small = {"a": np.array([3.0, 4.0])}
        assert clip_by_global_norm(small, 10.0)["a"] is small["a"]
        edge = {"a": np.array([6.0, 8.0])}
        np.testing.assert_array_equal(clip_by_global_norm(edge, 10.0)["a"], [6.0, 8.0])


@pytest.mark.slow
@pytest.mark.criterion(6, "end-to-end synthetic learning")
class TestEndToEnd:
    def test_held_out_accuracy(self):
        start = time.perf_counter()
        ds = synth_generate(SynthSpec(seed=0))
        assert len(ds.worlds) == 10 and len(ds.examples) >= 500
        held_out = {"env08", "env09"}
        train_set = [ex for ex in ds.examples if ex.env_id not in held_out]
        test_set = [ex for ex in ds.examples if ex.env_id in held_out]
        words, answers = build_vocab(train_set, ds.attribute_labels)
        model, _ = train(train_set, ds.worlds, TrainConfig(epochs=50, seed=0), words, answers)
        acc, _ = evaluate(model, test_set, ds.worlds)
        elapsed = time.perf_counter() - start
        print(f"held-out accuracy {acc:.3f} on {len(test_set)} questions, {elapsed:.0f}s")
        assert acc >= 0.9
        assert elapsed < 600.0


@pytest.mark.slow
@pytest.mark.criterion(7, "directional ablation")
class TestDirectionalAblation:
    def test_dynamic_beats_fixed_on_quantifier_split(self):
        means = {"dynamic": [], "fixed": []}
        for seed in range(3):
            ds = synth_generate(quantifier_spec(seed=seed))
            words, answers = build_vocab(ds.examples, ds.attribute_labels)
            for policy in means:
                config = TrainConfig(epochs=50, seed=seed, policy=policy)
                result = cross_validate_loeo(ds.examples, ds.worlds, config, words, answers)
                means[policy].append(result["mean_accuracy"])
                print(f"seed {seed} {policy}: {result['mean_accuracy']:.3f} "
                      f"{[round(f['accuracy'], 2) for f in result['folds']]}")
        dynamic, fixed = np.mean(means["dynamic"]), np.mean(means["fixed"])
        print(f"dynamic {dynamic:.3f} fixed {fixed:.3f} relative gain {(dynamic - fixed) / fixed:+.1%}")
        assert dynamic > fixed
        assert dynamic >= 1.05 * fixed


@pytest.fixture(scope="module")
def data():
    ds = synth_generate(SynthSpec(n_environments=3, questions_per_environment=16, seed=8))
    return ds, *build_vocab(ds.examples, ds.attribute_labels)


@pytest.fixture(scope="module")
def module_pool():
    rng = np.random.default_rng(99)
    return [make_modules(random_world(rng), hidden=3, seed=s) for s in range(16)]


@pytest.mark.criterion(8, "determinism and round-trips")
class TestDeterminism:
    def test_training_is_bitwise_reproducible(self, data):
        ds, words, answers = data
        runs = [train(ds.examples, ds.worlds, TrainConfig(epochs=2, seed=3), words, answers) for _ in range(2)]
        assert json.dumps(runs[0][1], sort_keys=True) == json.dumps(runs[1][1], sort_keys=True)
        for name, arr in runs[0][0].params.items():
            assert arr.tobytes() == runs[1][0].params[name].tobytes(), name

    def test_checkpoint_reload_is_bitwise(self, data, tmp_path):
        ds, words, answers = data
        model, _ = train(ds.examples, ds.worlds, TrainConfig(epochs=1, seed=4), words, answers)
        save_checkpoint(model, tmp_path / "ck.json")
        back = load_checkpoint(tmp_path / "ck.json")
        a = evaluate(model, ds.examples, ds.worlds)
        b = evaluate(back, ds.examples, ds.worlds)
        assert a[0] == b[0]
        for ra, rb in zip(a[1], b[1]):
            assert ra.answer == rb.answer and ra.layout == rb.layout
        for ex in ds.examples:
            pa = model.predict(ex, ds.worlds[ex.env_id])[1].dist.probs
            pb = back.predict(ex, ds.worlds[ex.env_id])[1].dist.probs
            assert pa.tobytes() == pb.tobytes()

    def test_layout_round_trip(self, data):
        ds = data[0]
        for ex in ds.examples:
            for z in generate_candidates(ex.parse):
                assert parse_layout_string(print_layout(z)) == z

    def test_data_files_round_trip(self, data, tmp_path):
        ds = data[0]
        save_worlds(ds.worlds, tmp_path / "w.json")
        save_questions(ds.examples, tmp_path / "q.jsonl")
        save_gold_layouts(ds.gold_layouts, tmp_path / "g.json")
        worlds = load_worlds(tmp_path / "w.json")
        for env, w in ds.worlds.items():
            assert worlds[env].entity_ids == w.entity_ids
            for k in w.views:
                assert worlds[env].views[k].tobytes() == w.views[k].tobytes()
        assert load_questions(tmp_path / "q.jsonl") == ds.examples
        assert load_gold_layouts(tmp_path / "g.json") == ds.gold_layouts


def _random_body(rng, names, depth=2):
    if depth == 0 or rng.random() < 0.3:
        if rng.random() < 0.5:
            return Layout("lookup", names[int(rng.integers(len(names)))])
        return Layout("find", f"c{int(rng.integers(3))}")
    if rng.random() < 0.5:
        return Layout("relate", f"r{int(rng.integers(2))}", (_random_body(rng, names, depth - 1),))
    kids = tuple(_random_body(rng, names, depth - 1) for _ in range(int(rng.integers(1, 4))))
    return Layout("and", None, kids)


@pytest.mark.criterion(9, "invariant suite")
class TestInvariants:
    N = 10_000

    def test_normalization_bounds(self, module_pool):
        rng = np.random.default_rng(0)
        for i in range(self.N):
            w = random_world(rng, n=int(rng.integers(1, 8)))
            m = module_pool[i % len(module_pool)]
            body = _random_body(rng, w.entity_ids)
            z = Layout("exists", None, (body,)) if rng.random() < 0.5 else Layout("describe", "how", (body,))
            ex = m.execute(z, w)
            probs = ex.dist.probs
            assert np.all(probs >= 0) and abs(probs.sum() - 1.0) < 1e-9
            for path, h in ex.attentions.items():
                assert np.all(h >= 0) and np.all(h <= 1 + 1e-12), path
                node = z
                for step in path:
                    node = node.children[step]
                if node.kind in ("lookup", "find", "relate"):
                    assert abs(h.sum() - 1.0) < 1e-9
                else:
                    assert h.sum() <= 1 + 1e-9

    def test_exists_permutation_invariance(self, module_pool):
        rng = np.random.default_rng(1)
        for i in range(self.N):
            m = module_pool[i % len(module_pool)]
            h = rng.uniform(size=int(rng.integers(1, 10)))
            a = value(lambda t: m.exists(t, t.const(h)))
            b = value(lambda t: m.exists(t, t.const(rng.permutation(h))))
            np.testing.assert_array_equal(a, b)

    def test_and_algebra(self, module_pool):
        rng = np.random.default_rng(2)
        m = module_pool[0]
        for _ in range(self.N):
            n = int(rng.integers(1, 10))
            hs = [rng.dirichlet(np.ones(n)) for _ in range(3)]
            t = Tape()
            a, b, c = (t.const(h) for h in hs)
            np.testing.assert_array_equal(t.value(m.and_(t, [a, b])), t.value(m.and_(t, [b, a])))
            left = t.value(m.and_(t, [m.and_(t, [a, b]), c]))
            right = t.value(m.and_(t, [a, m.and_(t, [b, c])]))
            np.testing.assert_allclose(left, right, rtol=1e-12, atol=1e-300)
            np.testing.assert_array_equal(t.value(m.and_(t, [a])), hs[0])
            prod = t.value(m.and_(t, [a, b, c]))
            assert np.all(prod <= np.minimum.reduce(hs) + 1e-15)
