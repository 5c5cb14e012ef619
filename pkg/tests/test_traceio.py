import json
import math
import struct

import numpy as np
import pytest

from dagcd.attention import (
    ROLE_CONTEXT as C,
    ROLE_QUESTION as Q,
    ROLE_TEMPLATE as T,
    HeadId,
    PromptLayout,
)
from dagcd.decoder import DecoderConfig, decode
from dagcd.detector import TrainConfig, train
from dagcd.distributions import softmax
from dagcd.errors import (
    CorruptTrace,
    EmptyDataset,
    InvalidInput,
    ReplayDivergence,
    TraceExhausted,
    UnsupportedVersion,
)
from dagcd.toy import PlantedOracle, ToyOracle, new_seeded, plant_scenario, synth_attention_dataset
from dagcd.traceio import (
    QAExample,
    StepTrace,
    TraceFile,
    crc32c,
    em,
    f1,
    normalize_answer,
    read_qa_dataset,
    read_trace,
    record_trace,
    replay_greedy,
    replay_oracle,
    write_trace,
)

LAYOUT = PromptLayout((1, 1, 5, 6, 7, 8, 2, 2), (T, T, C, C, C, C, Q, Q))


@pytest.fixture(scope="module")
def toy_trace():
    model = new_seeded(seed=8)
    return record_trace(ToyOracle(model), LAYOUT, model.vocab_size, max_steps=6, top_m=10)


class TestCrc32c:
    def test_known_vector(self):
        # standard CRC-32C check value for "123456789"
        assert crc32c(b"123456789") == 0xE3069283

    def test_empty(self):
        assert crc32c(b"") == 0


class TestRoundTrip:
    def test_structural_equality(self, toy_trace, tmp_path):
        p = tmp_path / "a.trace"
        write_trace(toy_trace, p)
        back = read_trace(p)
        assert back.model_name == toy_trace.model_name
        assert back.layout == toy_trace.layout
        assert len(back.steps) == len(toy_trace.steps)
        for s1, s2 in zip(toy_trace.steps, back.steps):
            assert s1.recorded_token_id == s2.recorded_token_id
            assert s1.top_logits == s2.top_logits
            assert s1.remainder_log_mass == s2.remainder_log_mass
            for h in s1.rows:
                assert np.array_equal(s1.rows[h], s2.rows[h])

    def test_byte_exact_rewrite(self, toy_trace, tmp_path):
        p1, p2 = tmp_path / "a.trace", tmp_path / "b.trace"
        write_trace(toy_trace, p1)
        write_trace(read_trace(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_flipped_byte_is_corrupt(self, toy_trace, tmp_path):
        p = tmp_path / "a.trace"
        write_trace(toy_trace, p)
        data = bytearray(p.read_bytes())
        data[-20] ^= 0xFF  # inside the step payload
        p.write_bytes(bytes(data))
        with pytest.raises(CorruptTrace):
            read_trace(p)

    def test_unknown_version(self, toy_trace, tmp_path):
        p = tmp_path / "a.trace"
        write_trace(toy_trace, p)
        data = p.read_bytes()
        hlen = struct.unpack_from("<I", data, 8)[0]
        header = json.loads(data[12 : 12 + hlen].decode())
        header["format_version"] = 999
        hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        p.write_bytes(data[:8] + struct.pack("<I", len(hdr)) + hdr + data[12 + hlen :])
        with pytest.raises(UnsupportedVersion):
            read_trace(p)

    def test_full_logits_round_trip(self, tmp_path):
        model = new_seeded(seed=9)
        trace = record_trace(ToyOracle(model), LAYOUT, model.vocab_size, max_steps=3, top_m=None)
        p = tmp_path / "full.trace"
        write_trace(trace, p)
        back = read_trace(p)
        for s1, s2 in zip(trace.steps, back.steps):
            assert np.array_equal(s1.full_logits, s2.full_logits)


class TestStepTrace:
    def test_duplicate_top_ids_rejected(self):
        with pytest.raises(InvalidInput):
            StepTrace(0, 1, {}, top_logits=((3, 0.1), (3, 0.2)), remainder_log_mass=0.0)

    def test_reconstruction_sums_to_one(self, toy_trace):
        for st in toy_trace.steps:
            dist = softmax(st.reconstruct_logits(toy_trace.vocab_size))
            assert abs(dist.probs.sum() - 1.0) <= 1e-6

    def test_reconstruction_preserves_top_probabilities(self):
        model = new_seeded(seed=10)
        oracle = ToyOracle(model)
        logits, _ = oracle.step(LAYOUT.token_ids)
        trace = record_trace(ToyOracle(model), LAYOUT, model.vocab_size, max_steps=1, top_m=10)
        rec = softmax(trace.steps[0].reconstruct_logits(model.vocab_size)).probs
        exact = softmax(logits).probs
        for i, _ in trace.steps[0].top_logits:
            assert rec[i] == pytest.approx(exact[i], abs=1e-9)


class TestReplay:
    def test_greedy_replay_exact(self, toy_trace):
        assert replay_greedy(toy_trace) == [s.recorded_token_id for s in toy_trace.steps]

    def test_greedy_decode_full_replay(self, toy_trace):
        oracle = replay_oracle(toy_trace)
        res = decode(
            oracle, toy_trace.layout, None,
            DecoderConfig(max_new_tokens=len(toy_trace.steps)),
        )
        assert list(res.token_ids) == [s.recorded_token_id for s in toy_trace.steps]
        assert res.divergence_step is None

    def test_divergence_halts_with_partial(self):
        # guided decode flips the planted answer step, so replaying a
        # greedy-recorded trace diverges at the following call
        det = train(synth_attention_dataset(100, "A", seed=0), TrainConfig(seed=0))
        scenario, oracle = plant_scenario(30, det)
        trace = record_trace(
            PlantedOracle(scenario, *det.geometry), scenario.layout, 64,
            max_steps=3, top_m=None, stop_token_ids=frozenset({scenario.stop_token_id}),
        )
        res = decode(
            replay_oracle(trace), trace.layout, det,
            DecoderConfig(max_new_tokens=len(trace.steps),
                          stop_token_ids=frozenset({scenario.stop_token_id})),
        )
        assert res.outcome == "divergence"
        assert res.token_ids == (scenario.gold_token_id,)
        assert res.divergence_step == 1
        assert res.oracle_calls == len(res.token_ids)

    def test_exhausted(self, toy_trace):
        oracle = replay_oracle(toy_trace)
        prefix = list(toy_trace.layout.token_ids)
        for st in toy_trace.steps:
            oracle.step(tuple(prefix))
            prefix.append(st.recorded_token_id)
        with pytest.raises(TraceExhausted):
            oracle.step(tuple(prefix))

    def test_empty_trace_exhausted_at_zero(self, toy_trace):
        empty = TraceFile(
            model_name="toy", vocab_size=toy_trace.vocab_size,
            num_layers=toy_trace.num_layers, num_heads=toy_trace.num_heads,
            heads=toy_trace.heads, layout=toy_trace.layout, steps=(),
        )
        with pytest.raises(TraceExhausted):
            replay_oracle(empty).step(toy_trace.layout.token_ids)

    def test_divergence_error_direct(self, toy_trace):
        oracle = replay_oracle(toy_trace)
        bad = toy_trace.layout.token_ids + (toy_trace.steps[0].recorded_token_id + 1,)
        with pytest.raises(ReplayDivergence):
            oracle.step(bad)


class TestNormalizeAnswer:
    def test_article_and_punct(self):
        assert normalize_answer("The Eiffel Tower!") == "eiffel tower"

    def test_empty(self):
        assert normalize_answer("") == ""

    def test_articles_collapse(self):
        assert normalize_answer("  a  A  ") == ""


class TestEm:
    def test_normalized_match(self):
        assert em("The Eiffel Tower", ["eiffel tower"]) == 1

    def test_partial_no_match(self):
        assert em("Eiffel", ["eiffel tower"]) == 0

    def test_verbatim(self):
        assert em("exact words", ["exact words"]) == 1

    def test_empty_golds(self):
        with pytest.raises(InvalidInput):
            em("x", [])


class TestF1:
    def test_token_overlap(self):
        assert f1("New York City", ["York City"]) == pytest.approx(0.8)

    def test_exact(self):
        assert f1("a match", ["a match"]) == 1.0

    def test_disjoint(self):
        assert f1("alpha beta", ["gamma delta"]) == 0.0

    def test_em_implies_f1(self):
        preds = ["The Eiffel Tower", "New York City", "nothing here"]
        golds = [["eiffel tower"], ["York City"], ["something else"]]
        for p, g in zip(preds, golds):
            assert f1(p, g) >= em(p, g)

    def test_symmetric_single_gold(self):
        assert f1("alpha beta", ["beta gamma"]) == f1("beta gamma", ["alpha beta"])


class TestQaDataset:
    def write(self, tmp_path, lines):
        p = tmp_path / "data.jsonl"
        p.write_text("\n".join(lines) + "\n")
        return p

    def test_well_formed(self, tmp_path):
        p = self.write(tmp_path, [
            json.dumps({"id": str(i), "context": "c", "question": "q", "answers": ["a"]})
            for i in range(3)
        ])
        examples, rejected = read_qa_dataset(p)
        assert len(examples) == 3 and rejected == []

    def test_missing_answers_rejected(self, tmp_path):
        p = self.write(tmp_path, [
            json.dumps({"id": "0", "context": "c", "question": "q", "answers": ["a"]}),
            json.dumps({"id": "1", "context": "c", "question": "q"}),
        ])
        examples, rejected = read_qa_dataset(p)
        assert len(examples) == 1
        assert rejected[0][0] == 2

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        with pytest.raises(EmptyDataset):
            read_qa_dataset(p)
