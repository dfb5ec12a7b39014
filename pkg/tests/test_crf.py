import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from situcrf.crf import (OffSupportError, batch_marginal, batch_supervised, decode_given_verb,
                         decode_joint, decode_max_marginal, encode_partial, encode_supervised,
                         free_expectations, log1mexp, log_partition, log_prob,
                         loglik_score_gradient, marginal_log_prob, multi_annotation_loglik,
                         posterior_expectations)
from situcrf.oracle import (brute_best, brute_log_partition, brute_marginal,
                            brute_verb_marginals, random_scores, situation_score)
from situcrf.potentials import ScoreTable
from situcrf.schema import NULL, Lexicon, Situation, enumerate_situations
from conftest import random_lexica

LEXICA = random_lexica(8)


def table(lex, verb=None, triple=None):
    idx = lex.index
    return ScoreTable(np.zeros(idx.n_verbs) if verb is None else np.asarray(verb, float),
                      np.zeros(idx.n_triples) if triple is None else np.asarray(triple, float), idx)


def one_role_lexicon(n_verbs, n_cands):
    """Verbs A, B, ... each with one role ``r`` over nouns x0..x{n-1}.

    Callers give the null noun a score of -inf so it drops out of the support.
    """
    nouns = {f"x{i}": () for i in range(n_cands)}
    verbs = [chr(ord("A") + i) for i in range(n_verbs)]
    return Lexicon.build(verbs, nouns, {"f": ["r"]}, {v: "f" for v in verbs}, None,
                         {(v, "r"): list(nouns) for v in verbs})


def triple_scores(lex, values):
    """Triple scores from ``{(verb, noun): score}``; null gets -inf."""
    idx = lex.index
    out = np.full(idx.n_triples, -np.inf)
    for (v, n), x in values.items():
        out[idx.triple_pos[(v, "r", n)]] = x
    return out


class TestLogPartition:
    def test_uniform_count(self):
        lex = one_role_lexicon(2, 3)
        s = table(lex, triple=triple_scores(lex, {(v, f"x{i}"): 0.0 for v in "AB" for i in range(3)}))
        assert float(log_partition(s).log_partition) == pytest.approx(math.log(6), abs=1e-15)

    def test_single_role_logs(self):
        lex = one_role_lexicon(1, 3)
        s = table(lex, triple=triple_scores(lex, {("A", "x0"): 0.0, ("A", "x1"): math.log(2),
                                                  ("A", "x2"): math.log(3)}))
        assert float(log_partition(s).log_partition) == pytest.approx(math.log(6), abs=1e-15)

    @pytest.mark.parametrize("lex", LEXICA, ids=lambda _: "lex")
    def test_matches_enumeration(self, lex, rng):
        for _ in range(3):
            s = random_scores(lex, rng, scale=3.0)
            assert abs(float(log_partition(s).log_partition) - brute_log_partition(lex, s)) < 1e-10

    def test_verb_marginals_normalized(self, rng):
        for lex in LEXICA:
            st_ = log_partition(random_scores(lex, rng))
            assert abs(np.logaddexp.reduce(st_.verb_log_marginals)) < 1e-12

    def test_extreme_scores_stay_finite(self, tiny_lex, rng):
        s = random_scores(tiny_lex, rng, scale=500.0)
        st_ = log_partition(s)
        assert np.isfinite(st_.log_partition)
        assert abs(float(st_.log_partition) - brute_log_partition(tiny_lex, s)) < 1e-9 * abs(float(st_.log_partition))

    def test_empty_candidate_set(self, tiny_lex):
        from situcrf.schema import LexiconIndex
        idx = LexiconIndex(tiny_lex)
        idx.slot_size = idx.slot_size.copy()
        idx.slot_size[0] = 0
        with pytest.raises(ValueError, match="empty candidate set"):
            log_partition(ScoreTable(np.zeros(idx.n_verbs), np.zeros(idx.n_triples), idx))


class TestLogProb:
    @pytest.mark.parametrize("lex", LEXICA, ids=lambda _: "lex")
    def test_normalized(self, lex, rng):
        s = random_scores(lex, rng)
        st_ = log_partition(s)
        total = math.fsum(math.exp(log_prob(s, st_, x)) for x in enumerate_situations(lex))
        assert abs(total - 1.0) < 1e-10

    def test_uniform(self):
        lex = one_role_lexicon(2, 3)
        s = table(lex, triple=triple_scores(lex, {(v, f"x{i}"): 0.0 for v in "AB" for i in range(3)}))
        st_ = log_partition(s)
        assert log_prob(s, st_, Situation("B", {"r": "x1"})) == pytest.approx(-math.log(6), abs=1e-15)

    def test_shift_invariance(self, tiny_lex, rng):
        s = random_scores(tiny_lex, rng)
        shifted = ScoreTable(s.verb + 17.5, s.triple, s.index)
        for x in list(enumerate_situations(tiny_lex))[::17]:
            assert log_prob(s, log_partition(s), x) == pytest.approx(
                log_prob(shifted, log_partition(shifted), x), abs=1e-12)

    def test_off_support(self, tiny_lex):
        s = table(tiny_lex)
        with pytest.raises(OffSupportError):
            log_prob(s, log_partition(s), Situation("jumping", {"agent": "baby", "obstacle": "rock", "place": NULL}))


class TestMarginal:
    @pytest.mark.parametrize("lex", LEXICA, ids=lambda _: "lex")
    def test_matches_completion_enumeration(self, lex, rng):
        s = random_scores(lex, rng)
        st_ = log_partition(s)
        sits = list(enumerate_situations(lex))
        for _ in range(5):
            x = sits[int(rng.integers(len(sits)))]
            partial = {e: n for e, n in x.frame.items() if rng.random() < 0.5}
            assert abs(marginal_log_prob(s, st_, x.verb, partial)
                       - brute_marginal(lex, s, x.verb, partial)) < 1e-10

    def test_full_partial_is_log_prob(self, tiny_lex, rng):
        s = random_scores(tiny_lex, rng)
        st_ = log_partition(s)
        x = next(enumerate_situations(tiny_lex))
        assert marginal_log_prob(s, st_, x.verb, dict(x.frame)) == pytest.approx(log_prob(s, st_, x), abs=1e-13)

    def test_empty_partial_is_verb_marginal(self, tiny_lex, rng):
        s = random_scores(tiny_lex, rng)
        st_ = log_partition(s)
        vals = [marginal_log_prob(s, st_, v, {}) for v in tiny_lex.verbs]
        np.testing.assert_allclose(vals, st_.verb_log_marginals, atol=1e-13)
        assert abs(np.logaddexp.reduce(vals)) < 1e-12

    def test_role_outside_frame(self, tiny_lex):
        s = table(tiny_lex)
        with pytest.raises(OffSupportError):
            marginal_log_prob(s, log_partition(s), "jumping", {"item": "rock"})


def mp_noisy_or(lps):
    mpmath.mp.dps = 50
    prod = mpmath.mpf(1)
    for lp in lps:
        prod *= 1 - mpmath.exp(mpmath.mpf(lp))
    return float(mpmath.log(1 - prod))


class TestNoisyOr:
    def test_single_annotation_is_log_prob(self, tiny_lex, rng):
        s = random_scores(tiny_lex, rng)
        st_ = log_partition(s)
        x = list(enumerate_situations(tiny_lex))[42]
        assert multi_annotation_loglik(s, st_, [x]) == pytest.approx(log_prob(s, st_, x), abs=1e-12)

    def test_two_halves(self):
        lex = one_role_lexicon(1, 2)
        s = table(lex, triple=triple_scores(lex, {("A", "x0"): 0.0, ("A", "x1"): 0.0}))
        anns = [Situation("A", {"r": "x0"}), Situation("A", {"r": "x1"})]
        assert multi_annotation_loglik(s, log_partition(s), anns) == pytest.approx(math.log(0.75), abs=1e-15)

    def test_duplicates_removed(self, tiny_lex, rng):
        s = random_scores(tiny_lex, rng)
        st_ = log_partition(s)
        x, y = list(enumerate_situations(tiny_lex))[3:5]
        assert multi_annotation_loglik(s, st_, [x, y, x]) == multi_annotation_loglik(s, st_, [x, y])

    def test_all_off_support_is_minus_inf(self, tiny_lex):
        s = table(tiny_lex)
        bad = Situation("jumping", {"agent": "baby", "obstacle": "rock", "place": NULL})
        assert multi_annotation_loglik(s, log_partition(s), [bad]) == -math.inf

    @pytest.mark.parametrize("lex", LEXICA, ids=lambda _: "lex")
    def test_high_precision_oracle(self, lex, rng):
        sits = list(enumerate_situations(lex))
        for scale in (0.5, 3.0, 20.0):
            s = random_scores(lex, rng, scale)
            st_ = log_partition(s)
            picks = rng.choice(len(sits), size=min(3, len(sits)), replace=False)
            anns = [sits[i] for i in picks]
            ref = mp_noisy_or([log_prob(s, st_, a) for a in anns])
            assert abs(multi_annotation_loglik(s, st_, anns) - ref) < 1e-9

    def test_log1mexp_accuracy(self):
        mpmath.mp.dps = 50
        for x in (-1e-20, -1e-8, -0.3, -math.log(2), -1.0, -40.0, -800.0):
            ref = float(mpmath.log(1 - mpmath.exp(mpmath.mpf(x))))
            assert float(log1mexp(x)) == pytest.approx(ref, rel=1e-14, abs=1e-300)
        assert float(log1mexp(0.0)) == -math.inf


def fd_score_gradient(f, s, h=1e-6):
    gv = np.zeros_like(s.verb)
    gt = np.zeros_like(s.triple)
    for arr, out in ((s.verb, gv), (s.triple, gt)):
        for i in range(arr.size):
            old = arr[i]
            arr[i] = old + h
            fp = f(s)
            arr[i] = old - h
            fm = f(s)
            arr[i] = old
            out[i] = (fp - fm) / (2 * h)
    return gv, gt


class TestExpectations:
    def test_uniform_free_verb_weights(self, tiny_lex):
        s = table(tiny_lex)
        e = free_expectations(s, log_partition(s))
        # verbs differ in support size, so compare against counts
        per = {v: sum(1 for x in enumerate_situations(tiny_lex) if x.verb == v) for v in tiny_lex.verbs}
        np.testing.assert_allclose(e.verb, [per[v] / 180 for v in tiny_lex.verbs], rtol=1e-12)
        lex = one_role_lexicon(4, 2)
        s = table(lex)
        np.testing.assert_allclose(free_expectations(s, log_partition(s)).verb, 0.25, rtol=1e-12)

    def test_free_matches_brute(self, tiny_lex, rng):
        s = random_scores(tiny_lex, rng)
        st_ = log_partition(s)
        e = free_expectations(s, st_)
        ev = np.zeros_like(e.verb)
        et = np.zeros_like(e.triple)
        for x in enumerate_situations(tiny_lex):
            p = math.exp(log_prob(s, st_, x))
            v, ts = tiny_lex.index.encode(x)
            ev[v] += p
            et[ts] += p
        np.testing.assert_allclose(e.verb, ev, atol=1e-12)
        np.testing.assert_allclose(e.triple, et, atol=1e-12)
        # nouns of a slot carry their verb's weight
        idx = tiny_lex.index
        for sl, (v, _) in enumerate(idx.slots):
            assert e.triple[idx.triple_slot == sl].sum() == pytest.approx(e.verb[idx.verb_pos[v]], abs=1e-12)

    def test_free_is_grad_log_partition(self, tiny_lex, rng):
        s = random_scores(tiny_lex, rng)
        e = free_expectations(s, log_partition(s))
        gv, gt = fd_score_gradient(lambda t: float(log_partition(t).log_partition), s)
        np.testing.assert_allclose(e.verb, gv, atol=1e-7)
        np.testing.assert_allclose(e.triple, gt, atol=1e-7)

    def test_single_annotation_weight_is_one(self, tiny_lex, rng):
        s = random_scores(tiny_lex, rng)
        x = list(enumerate_situations(tiny_lex))[7]
        e = posterior_expectations(s, log_partition(s), [x])
        assert e.mass == pytest.approx(1.0, abs=1e-12)

    def test_clamped_weights(self, tiny_lex, rng):
        s = random_scores(tiny_lex, rng)
        e = posterior_expectations(s, log_partition(s), ("carrying", {"item": "rock"}))
        idx = tiny_lex.index
        assert e.verb.sum() == 1.0 and e.verb[idx.verb_pos["carrying"]] == 1.0
        assert e.triple[idx.triple_pos[("carrying", "item", "rock")]] == 1.0
        assert e.triple[idx.triple_pos[("carrying", "item", "box")]] == 0.0
        place = [idx.triple_pos[("carrying", "place", n)] for n in tiny_lex.candidates("carrying", "place")]
        assert e.triple[place].sum() == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("lex", LEXICA[:4], ids=lambda _: "lex")
    def test_noisy_or_gradient_vs_finite_differences(self, lex, rng):
        sits = list(enumerate_situations(lex))
        s = random_scores(lex, rng, 1.0)
        anns = [sits[i] for i in rng.choice(len(sits), size=min(3, len(sits)), replace=False)]
        g = loglik_score_gradient(s, log_partition(s), anns)
        gv, gt = fd_score_gradient(lambda t: multi_annotation_loglik(t, log_partition(t), anns), s)
        scale = max(np.abs(gv).max(), np.abs(gt).max())
        assert np.abs(g.verb - gv).max() / scale < 1e-4
        assert np.abs(g.triple - gt).max() / scale < 1e-4

    def test_noisy_or_weights_are_not_a_convex_combination(self):
        lex = one_role_lexicon(1, 2)
        s = table(lex, triple=triple_scores(lex, {("A", "x0"): 0.0, ("A", "x1"): 0.0}))
        anns = [Situation("A", {"r": "x0"}), Situation("A", {"r": "x1"})]
        # w = 0.5 * 0.5 / 0.75 each, so the weights sum to 2/3
        assert posterior_expectations(s, log_partition(s), anns).mass == pytest.approx(2 / 3, abs=1e-15)


class TestDecoding:
    def test_hand_two_verb_instance(self):
        lex = one_role_lexicon(2, 2)
        ln = math.log
        s = table(lex, triple=triple_scores(lex, {("A", "x0"): ln(1), ("A", "x1"): ln(3),
                                                  ("B", "x0"): ln(2), ("B", "x1"): ln(1.5)}))
        assert decode_joint(s, 1)[0][0].verb == "A"
        assert decode_max_marginal(s, log_partition(s), 1)[0][0].verb == "A"
        s = table(lex, triple=triple_scores(lex, {("A", "x0"): ln(1), ("A", "x1"): ln(3),
                                                  ("B", "x0"): ln(2), ("B", "x1"): ln(2.1)}))
        assert decode_joint(s, 1)[0][0] == Situation("A", {"r": "x1"})
        assert decode_max_marginal(s, log_partition(s), 1)[0][0] == Situation("B", {"r": "x1"})

    @pytest.mark.parametrize("lex", LEXICA, ids=lambda _: "lex")
    def test_joint_top1_matches_enumeration(self, lex, rng):
        for _ in range(5):
            s = random_scores(lex, rng)
            best, score = brute_best(lex, s)
            (top, val), = decode_joint(s, 1)
            assert top == best and abs(val - score) < 1e-10

    @pytest.mark.parametrize("lex", LEXICA, ids=lambda _: "lex")
    def test_topk_ranking(self, lex, rng):
        s = random_scores(lex, rng)
        st_ = log_partition(s)
        k = len(lex.verbs)
        joint = decode_joint(s, k)
        per_verb = {}
        for x in enumerate_situations(lex):
            per_verb[x.verb] = max(per_verb.get(x.verb, -math.inf), situation_score(s, x))
        assert [x.verb for x, _ in joint] == sorted(per_verb, key=lambda v: -per_verb[v])
        vm = brute_verb_marginals(lex, s)
        mm = decode_max_marginal(s, st_, k)
        assert [x.verb for x, _ in mm] == sorted(vm, key=lambda v: -vm[v])
        for (x, val) in mm:
            assert val == pytest.approx(vm[x.verb], abs=1e-10)

    def test_k_saturates(self, tiny_lex, rng):
        s = random_scores(tiny_lex, rng)
        assert len(decode_joint(s, 50)) == 3
        assert len(decode_max_marginal(s, log_partition(s), 50)) == 3
        with pytest.raises(ValueError):
            decode_joint(s, 0)

    def test_single_verb_decoders_agree(self, rng):
        lex = random_lexica(1, 100)[0]
        lex = Lexicon.build(lex.verbs[:1], lex.nouns, lex.frames, lex.verb_to_frame, {},
                            {k: c for k, c in lex.role_candidates.items() if k[0] == lex.verbs[0]})
        s = random_scores(lex, rng)
        assert decode_joint(s, 1)[0][0] == decode_max_marginal(s, log_partition(s), 1)[0][0]

    def test_ties_go_to_lowest_identifier(self):
        lex = one_role_lexicon(3, 3)
        s = table(lex, triple=triple_scores(lex, {(v, f"x{i}"): 0.0 for v in "ABC" for i in range(3)}))
        top = decode_joint(s, 3)
        assert [x.verb for x, _ in top] == ["A", "B", "C"]
        assert all(x.frame["r"] == "x0" for x, _ in top)
        assert [x.verb for x, _ in decode_max_marginal(s, log_partition(s), 3)] == ["A", "B", "C"]

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31), c=st.floats(-50, 50), d=st.floats(-50, 50))
    def test_invariant_to_constant_shifts(self, seed, c, d):
        rng = np.random.default_rng(seed)
        lex = LEXICA[seed % len(LEXICA)]
        idx = lex.index
        s = random_scores(lex, rng)
        slot = int(rng.integers(idx.n_slots))
        in_slot = idx.triple_slot == slot
        k = len(lex.verbs)

        def both(t):
            return ([x for x, _ in decode_joint(t, k)],
                    [x for x, _ in decode_max_marginal(t, log_partition(t), k)])

        # a global verb shift changes nothing
        assert both(s) == both(ScoreTable(s.verb + c, s.triple, idx))
        # a role shift moves its verb's total, so compensate on that verb
        verb = np.array(s.verb)
        verb[idx.slot_verb[slot]] -= d
        assert both(s) == both(ScoreTable(verb, s.triple + np.where(in_slot, d, 0.0), idx))
        # without compensation only the per-verb frames are guaranteed
        raw = ScoreTable(s.verb, s.triple + np.where(in_slot, d, 0.0), idx)
        assert {x.verb: x for x in both(s)[0]} == {x.verb: x for x in both(raw)[0]}

    def test_given_verb(self, tiny_lex, rng):
        s = random_scores(tiny_lex, rng)
        x = decode_given_verb(s, "jumping")
        best = max((y for y in enumerate_situations(tiny_lex) if y.verb == "jumping"),
                   key=lambda y: situation_score(s, y))
        assert x == best


class TestBatched:
    def test_supervised_matches_single(self, tiny_lex, rng):
        idx = tiny_lex.index
        sits = list(enumerate_situations(tiny_lex))
        sets = [[sits[i] for i in rng.choice(180, size=int(rng.integers(1, 4)), replace=False)]
                for _ in range(6)]
        sets[2] = sets[2] + [sets[2][0]]
        sets[4] = [Situation("jumping", {"agent": "baby", "obstacle": "rock", "place": NULL}), sits[0]]
        S = ScoreTable(rng.normal(size=(6, idx.n_verbs)), rng.normal(size=(6, idx.n_triples)), idx)
        ll, grad = batch_supervised(S, encode_supervised(idx, sets))
        for b in range(6):
            sb = S[b]
            st_ = log_partition(sb)
            assert ll[b] == pytest.approx(multi_annotation_loglik(sb, st_, sets[b]), abs=1e-12)
            ref = loglik_score_gradient(sb, st_, sets[b])
            np.testing.assert_allclose(grad.verb[b], ref.verb, atol=1e-12)
            np.testing.assert_allclose(grad.triple[b], ref.triple, atol=1e-12)

    def test_marginal_matches_single(self, tiny_lex, rng):
        idx = tiny_lex.index
        items = [("carrying", {"agent": "man"}), ("jumping", {}), ("throwing", {"item": "ball", "destination": NULL}),
                 ("carrying", {"agent": "woman", "item": "rock", "agentpart": "back", "place": "field"})]
        S = ScoreTable(rng.normal(size=(4, idx.n_verbs)), rng.normal(size=(4, idx.n_triples)), idx)
        ll, grad = batch_marginal(S, encode_partial(idx, items))
        for b, (v, part) in enumerate(items):
            sb = S[b]
            st_ = log_partition(sb)
            assert ll[b] == pytest.approx(marginal_log_prob(sb, st_, v, part), abs=1e-12)
            ref = loglik_score_gradient(sb, st_, (v, part))
            np.testing.assert_allclose(grad.verb[b], ref.verb, atol=1e-12)
            np.testing.assert_allclose(grad.triple[b], ref.triple, atol=1e-12)

    def test_marginal_off_support(self, tiny_lex):
        with pytest.raises(OffSupportError):
            encode_partial(tiny_lex.index, [("jumping", {"agent": "baby"})])
