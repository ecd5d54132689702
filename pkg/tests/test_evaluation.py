import json
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crfgen.corpus import BOS, generate_synthetic, random_synth_spec
from crfgen.crf import ChainCrfParams, init_crf_params, sample_batch
from crfgen.evaluation import (COLUMNS, GenStats, KneserNeyLm, fit_kn, format_table, gen_stats,
                               perplexity, report, write_report)

CORPUS = [["a", "b"], ["a", "c"]]


@pytest.fixture(scope="module")
def synth():
    spec = random_synth_spec(n_states=4, n_words=30, max_len=12, seed=2)
    return generate_synthetic(spec, 3000)


class TestKneserNey:
    def test_hand_computed_bigram(self):
        lm = fit_kn(CORPUS, 2, 0.75)
        D = 0.75
        # continuation counts: a<-BOS, b<-a, c<-a, EOS<-b, EOS<-c (5 bigram types, 4 words)
        p_cont_b = (1 - D) / 5 + D * 4 / 5 * (1 / len(lm.vocab))
        assert len(lm.vocab) == 5   # a b c <eos> <unk>
        assert lm.prob("b", ["a"]) == pytest.approx((1 - D) / 2 + D * 2 / 2 * p_cont_b, abs=1e-15)
        assert lm.prob("b", ["a"]) == pytest.approx(0.2525, abs=1e-15)

    def test_unigram_single_word(self):
        lm = fit_kn([["a", "a"]], 1)
        assert max(lm.vocab, key=lm.prob) == "a"

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_normalisation_and_support(self, synth, n):
        lm = fit_kn(synth, n)
        rng = random.Random(0)
        contexts = [tuple(["<bos>"] * 2 + s)[i:i + 2] for s in synth for i in range(len(s) + 1)]
        for ctx in rng.sample(contexts, 200) + [("a", "zzz"), ()]:
            probs = [lm.prob(w, ctx) for w in lm.vocab]
            assert abs(sum(probs) - 1.0) <= 1e-6
            assert min(probs) > 0

    def test_unknown_word_scored_as_unk(self):
        lm = fit_kn(CORPUS, 2)
        assert lm.prob("zebra", ["a"]) == lm.prob("<unk>", ["a"])

    def test_errors(self):
        with pytest.raises(ValueError):
            fit_kn(CORPUS, 4)
        with pytest.raises(ValueError):
            fit_kn(CORPUS, 2, discount=1.0)
        with pytest.raises(ValueError):
            fit_kn([], 2)

    def test_deterministic(self, synth):
        a, b = fit_kn(synth, 3), fit_kn(list(reversed(synth)), 3)
        assert a.counts == b.counts and a.vocab == b.vocab

    def test_counts_file_round_trip(self, synth, tmp_path):
        lm = fit_kn(synth, 3)
        lm.save(tmp_path / "kn3.counts")
        back = KneserNeyLm.load(tmp_path / "kn3.counts")
        assert back.order == 3 and back.discount == lm.discount and back.vocab == lm.vocab
        for s in synth[:50]:
            assert back.logprob_sentence(s) == lm.logprob_sentence(s)
        line = (tmp_path / "kn3.counts").read_text().splitlines()[3]
        toks, count = line.split("\t")
        assert len(toks.split(" ")) == 3 and int(count) >= 1


class TestPerplexity:
    def test_uniform_unigram(self):
        lm = fit_kn([["a", "b", "<unk>"]], 1)
        assert len(lm.vocab) == 4
        assert perplexity(lm, [["a"], ["q", "b", "b"]]) == pytest.approx(4.0, abs=1e-12)

    def test_training_text_beats_shuffled_text(self, synth):
        lm = fit_kn(synth, 2)
        words = [w for s in synth for w in s]
        random.Random(1).shuffle(words)
        shuffled, i = [], 0
        for s in synth:
            shuffled.append(words[i:i + len(s)])
            i += len(s)
        assert perplexity(lm, synth) < perplexity(lm, shuffled)

    def test_repetition_is_per_token_mean(self, synth):
        lm = fit_kn(synth, 3)
        s = synth[5]
        assert perplexity(lm, [s] * 10) == pytest.approx(perplexity(lm, [s]), rel=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.randoms(use_true_random=False))
    def test_order_invariance(self, rnd):
        lm = fit_kn(CORPUS + [["b", "c", "a"]], 3)
        sents = [["a", "b"], ["c"], [], ["b", "b", "q"]]
        shuffled = sents[:]
        rnd.shuffle(shuffled)
        assert perplexity(lm, shuffled) == pytest.approx(perplexity(lm, sents), rel=1e-12)

    def test_empty_sample(self):
        with pytest.raises(ValueError):
            perplexity(fit_kn(CORPUS, 2), [])


class TestGenStats:
    def test_repeat(self):
        g = gen_stats([["a", "a", "b"]])
        assert g.rho_rep == pytest.approx(100 / 3) and g.length == 3 and g.rho_uni == 100

    def test_unique(self):
        assert gen_stats([["a", "b"], ["a", "b"], ["c"]]).rho_uni == pytest.approx(200 / 3)

    def test_no_repeat(self):
        assert gen_stats([["a", "b", "c"]]).rho_rep == 0.0

    @given(st.lists(st.lists(st.sampled_from("abc"), max_size=6), min_size=1, max_size=20))
    def test_ranges(self, sents):
        g = gen_stats(sents)
        assert 0 <= g.rho_rep <= 100 and 0 < g.rho_uni <= 100 and g.length >= 0
        assert g.count == len(sents)

    def test_zero_self_transition_model_never_repeats(self):
        V, dl, L = 10, 2, 30.0
        rng = np.random.default_rng(0)
        flat = init_crf_params(V, V, dl, rng, hidden=8, scale=1.0)
        eye = np.eye(V)
        flat["crf.X"] = -L * (1 - eye)     # column i of exp(X) is close to e_i
        flat["crf.Y"] = -L * eye           # column j of exp(Y) is close to 1 - e_j
        params = ChainCrfParams.from_flat(flat)
        n, T = 100_000, 6
        hs = list(rng.normal(size=(T, n, dl)))
        draws = sample_batch(hs, params, rng)
        assert np.all(draws != BOS)
        assert gen_stats([tuple(r) for r in draws]).rho_rep < 0.1


class TestReport:
    def test_rows_and_columns(self, synth, tmp_path):
        lms = {2: fit_kn(synth[:2000], 2), 3: fit_kn(synth[:2000], 3)}
        rows = report([("A", synth[2000:2500]), ("B", synth[2000:2500])], lms)
        assert tuple(rows[0]) == COLUMNS
        assert {k: v for k, v in rows[0].items() if k != "label"} == \
            {k: v for k, v in rows[1].items() if k != "label"}
        write_report(rows, tmp_path)
        text = (tmp_path / "report.txt").read_text()
        assert text == format_table(rows) and text.splitlines()[0].split() == list(COLUMNS)
        recs = [json.loads(x) for x in (tmp_path / "report.jsonl").read_text().splitlines()]
        assert recs == rows

    def test_oracle_row_is_diverse(self):
        spec = random_synth_spec(n_states=6, n_words=200, max_len=15, seed=8, eos_prob=0.05)
        sents = [s for s in generate_synthetic(spec, 6500) if s][:6000]
        lms = {2: fit_kn(sents[:4000], 2)}
        (row,) = report([("ORACLE", sents[4000:])], lms)
        assert row["rho_uni"] > 95 and math.isfinite(row["PPL_2"])
