from __future__ import annotations

import json
import math

import pytest

from conftest import FixedModel, exact, peaked_model, uniform_model, vocab_of
from rankstego.lm import train_ngram
from rankstego.metrics import (
    SCHEMA,
    evaluate_message,
    payload_capacity,
    perplexity,
    ppl_window,
    sweep,
    sweep_jsonl,
)
from rankstego.stego import StegoConfig

MESSAGE = "a small dog followed the old man"


class TestPayload:
    def test_known_answers(self):
        assert payload_capacity("abcd", "x" * 20) == 20.0
        assert payload_capacity(b"hi", "abcdefgh") == 25.0

    def test_counts_characters_not_bytes(self):
        assert payload_capacity("é", "ab") == 50.0

    def test_scale_free(self):
        assert payload_capacity("ab cd" * 2, "xyz uvw q" * 2) == payload_capacity("ab cd", "xyz uvw q")

    def test_empty_stego(self):
        with pytest.raises(ZeroDivisionError):
            payload_capacity("a", "")


class TestPerplexity:
    def test_uniform_is_vocab_size(self):
        model = uniform_model(64)
        assert perplexity(model, [5, 9, 33, 1]) == 64

    def test_dyadic_two_tokens(self):
        model = FixedModel(vocab_of(4), lambda c, h: exact("1/4", "1/4", "1/4", "1/4"))
        assert perplexity(model, [1, 2]) == 4

    def test_certain_tokens(self):
        model = FixedModel(vocab_of(3), lambda c, h: exact(0, 1, 0))
        assert perplexity(model, [1, 1, 1]) == 1

    def test_zero_probability_is_inf(self):
        model = FixedModel(vocab_of(3), lambda c, h: exact(0, 1, 0))
        assert perplexity(model, [1, 2]) == math.inf

    def test_irrational_root_falls_back_to_float(self):
        model = FixedModel(vocab_of(3), lambda c, h: exact("1/2", "1/3", "1/6"))
        assert perplexity(model, [0, 1]) == pytest.approx(math.sqrt(6))

    def test_empty(self):
        with pytest.raises(ValueError):
            perplexity(uniform_model(4), [])

    def test_greedy_text_matches_direct_recomputation(self, ref_model):
        context = list(ref_model.vocab.encode("the old man")[0])
        tokens, probs = [], []
        for _ in range(12):
            d = ref_model.distribution(tokens, context)
            tok = int(d.order[0])
            tokens.append(tok)
            probs.append(float(d.prob(tok)))
        direct = math.prod(probs) ** (-1 / len(probs))
        assert perplexity(ref_model, tokens, context) == pytest.approx(direct, rel=1e-12)

    def test_window_hand_case(self):
        # ids </s>=0 <unk>=1 a=2 b=3, add-one bigram over "a b a b </s>"
        # P(b|a)=3/6, P(a|b)=2/6, P(</s>|a)=1/6 -> (1/36)^(-1/3)
        model = train_ngram("a b a b", 2, 1)
        assert ppl_window(model, [2], [3, 2, 0]) == pytest.approx(36 ** (1 / 3), rel=1e-12)

    def test_window_truncates_both_sides(self):
        model = uniform_model(16)
        calls = []

        def spy(context, history):
            calls.append((len(context), len(history)))
            return model.distribution(context, history)

        ppl_window(FixedModel(model.vocab, spy), list(range(1, 16)) * 2, [1] * 30)
        assert max(h for _, h in calls) == 10
        assert max(c for c, _ in calls) == 9
        assert len(calls) == 10


class TestEvaluate:
    def test_record(self, ref_model, base_config):
        rec = evaluate_message(ref_model, base_config, MESSAGE)
        assert rec["ok"] and rec["error"] is None
        assert rec["payload_pct"] > 0
        assert rec["ppl"] >= 1 and rec["ppl20"] >= 1
        assert rec["embed_seconds"] >= 0 and rec["extract_seconds"] >= 0

    def test_capacity_exhausted(self, key):
        cfg = StegoConfig(key=key, beta=2, max_tokens=30)
        rec = evaluate_message(peaked_model(16), cfg, "w2")
        assert not rec["ok"]
        assert rec["error"].startswith("capacity-exhausted")


class TestSweep:
    def test_single_cell(self, ref_model, base_config):
        (cell,) = sweep(ref_model, base_config, [0.6], [3], [MESSAGE])
        assert cell.report.status == "ok"
        assert cell.report.n_ok == 1
        assert cell.report.config["alpha"] == 0.6
        assert "key" not in json.dumps(cell.report.to_dict())

    def test_all_exhausted_cell(self, key):
        cfg = StegoConfig(key=key, max_tokens=20)
        (cell,) = sweep(peaked_model(16), cfg, [0.6], [2], ["w1", "w2"])
        assert cell.report.status == "capacity-exhausted"
        assert cell.report.payload_pct is None

    def test_larger_beta_carries_more(self, ref_model, base_config):
        corpus = [MESSAGE, "the river was cold and quiet", "children played near the river"]
        cells = sweep(ref_model, base_config, [0.6], [1, 4], corpus)
        assert cells[1].report.payload_pct > cells[0].report.payload_pct

    def test_seed_matched_across_cells(self, ref_model, base_config):
        cells = sweep(ref_model, base_config.replace(rng_seed=40), [0.6, 0.8], [2], [MESSAGE, MESSAGE])
        for cell in cells:
            assert [r["index"] for r in cell.records] == [0, 1]

    def test_workers_match_serial(self, ref_model, base_config):
        corpus = [MESSAGE, "the river was cold"]
        serial = sweep(ref_model, base_config, [0.6], [2, 3], corpus)
        parallel = sweep(ref_model, base_config, [0.6], [2, 3], corpus, workers=2)
        strip = lambda c: [(r["stego_tokens"], r["payload_pct"]) for r in c.records]
        assert [strip(c) for c in serial] == [strip(c) for c in parallel]

    def test_jsonl(self, ref_model, base_config):
        cells = sweep(ref_model, base_config, [0.6], [2, 3], [MESSAGE])
        lines = [json.loads(line) for line in sweep_jsonl(cells).splitlines()]
        assert all(line["schema"] == SCHEMA for line in lines)
        assert [line["kind"] for line in lines] == ["message", "cell", "message", "cell"]

    def test_jsonl_exhausted_cell(self, key):
        cells = sweep(peaked_model(16), StegoConfig(key=key, max_tokens=20), [0.6], [2], ["w1"])
        assert json.loads(sweep_jsonl(cells).splitlines()[-1])["status"] == "capacity-exhausted"

    def test_empty_grid(self, ref_model, base_config):
        with pytest.raises(ValueError):
            sweep(ref_model, base_config, [], [3], [MESSAGE])
