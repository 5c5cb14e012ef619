import numpy as np
import pytest

from dagcd.attention import (
    ROLE_CONTEXT as C,
    ROLE_GENERATED as G,
    ROLE_QUESTION as Q,
    ROLE_TEMPLATE as T,
    AttentionSnapshot,
    ContextSpan,
    FeatureVector,
    HeadId,
    PromptLayout,
    attention_ratio,
    context_mask,
    full_feature_vector,
    project_features,
    topk_feature_vector,
)
from dagcd.errors import EmptyContext, InvalidInput


def snap_from_rows(rows):
    seq = len(next(iter(rows.values())))
    return AttentionSnapshot({HeadId(*k): np.array(v) for k, v in rows.items()}, seq_len=seq)


def span_all(n, base_token=10):
    return ContextSpan(tuple(range(n)), tuple(range(base_token, base_token + n)))


class TestSnapshotValidation:
    def test_row_must_sum_to_one(self):
        with pytest.raises(InvalidInput):
            snap_from_rows({(0, 0): [0.5, 0.4]})

    def test_row_length(self):
        with pytest.raises(InvalidInput):
            AttentionSnapshot({HeadId(0, 0): np.array([1.0])}, seq_len=2)

    def test_negative_weight(self):
        with pytest.raises(InvalidInput):
            snap_from_rows({(0, 0): [1.2, -0.2]})

    def test_head_ids_layer_major(self):
        s = snap_from_rows({(1, 0): [1.0], (0, 1): [1.0], (0, 0): [1.0]})
        assert s.head_ids == [HeadId(0, 0), HeadId(0, 1), HeadId(1, 0)]


class TestAttentionRatio:
    def test_already_normalized(self):
        s = snap_from_rows({(0, 0): [0.2, 0.3, 0.5]})
        assert attention_ratio(s, HeadId(0, 0), span_all(3), 2) == pytest.approx(0.5)

    def test_sink_excluded(self):
        s = snap_from_rows({(0, 0): [0.4, 0.1, 0.1, 0.2, 0.2]})
        span = ContextSpan((1, 2, 3, 4), (11, 12, 13, 14))
        assert attention_ratio(s, HeadId(0, 0), span, 3) == pytest.approx(1 / 3)

    def test_single_position_span(self):
        s = snap_from_rows({(0, 0): [0.4, 0.6]})
        span = ContextSpan((1,), (11,))
        assert attention_ratio(s, HeadId(0, 0), span, 1) == pytest.approx(1.0)

    def test_degenerate_head_is_zero(self):
        s = snap_from_rows({(0, 0): [1.0, 0.0, 0.0]})
        span = ContextSpan((1, 2), (11, 12))
        assert attention_ratio(s, HeadId(0, 0), span, 1) == 0.0

    def test_not_in_span(self):
        s = snap_from_rows({(0, 0): [0.5, 0.5]})
        with pytest.raises(InvalidInput):
            attention_ratio(s, HeadId(0, 0), ContextSpan((0,), (10,)), 1)

    def test_missing_head(self):
        s = snap_from_rows({(0, 0): [0.5, 0.5]})
        with pytest.raises(InvalidInput):
            attention_ratio(s, HeadId(3, 3), span_all(2), 0)

    def test_ratios_sum_to_one_over_span(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            row = rng.dirichlet(np.ones(6))
            s = snap_from_rows({(0, 0): row})
            span = ContextSpan((1, 3, 4), (11, 13, 14))
            total = sum(attention_ratio(s, HeadId(0, 0), span, j) for j in span.indices)
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_scale_invariance_of_context_weights(self):
        # rescaling the raw row by a positive constant (before re-softmaxing
        # the remainder elsewhere) leaves ratios unchanged
        rng = np.random.default_rng(1)
        base = rng.dirichlet(np.ones(5))
        span = ContextSpan((1, 2), (11, 12))
        s1 = snap_from_rows({(0, 0): base})
        r1 = attention_ratio(s1, HeadId(0, 0), span, 1)
        for scale in (0.5, 2.0, 7.3):
            scaled = base.copy()
            scaled[[1, 2]] *= scale
            scaled /= scaled.sum()
            s2 = snap_from_rows({(0, 0): scaled})
            assert attention_ratio(s2, HeadId(0, 0), span, 1) == pytest.approx(r1, abs=1e-12)


class TestFeatureVectors:
    def two_by_two(self):
        return snap_from_rows(
            {
                (0, 0): [0.1, 0.2, 0.3, 0.4],
                (0, 1): [0.25, 0.25, 0.25, 0.25],
                (1, 0): [0.7, 0.1, 0.1, 0.1],
                (1, 1): [0.0, 0.0, 0.5, 0.5],
            }
        )

    def test_single_head(self):
        s = snap_from_rows({(0, 0): [0.5, 0.5]})
        fv = full_feature_vector(s, span_all(2), 0)
        assert fv.values == (0.5,)
        assert fv.head_order == (HeadId(0, 0),)

    def test_two_by_two_matches_per_head_oracle(self):
        s = self.two_by_two()
        span = ContextSpan((1, 2), (11, 12))
        fv = full_feature_vector(s, span, 2)
        expected = tuple(attention_ratio(s, h, span, 2) for h in s.head_ids)
        assert fv.values == expected
        # hand computation for head (1,0): 0.1 / (0.1 + 0.1)
        assert fv.values[2] == pytest.approx(0.5)

    def test_degenerate_head_entry_zero(self):
        s = self.two_by_two()
        span = ContextSpan((0, 1), (10, 11))
        fv = full_feature_vector(s, span, 0)
        assert fv.values[3] == 0.0  # head (1,1) has no mass on positions 0-1

    def test_topk_identity_selection(self):
        s = self.two_by_two()
        span = span_all(4)
        full = full_feature_vector(s, span, 1)
        sel = topk_feature_vector(s, span, 1, s.head_ids)
        assert sel == full

    def test_topk_reversed(self):
        s = self.two_by_two()
        span = span_all(4)
        full = full_feature_vector(s, span, 1)
        rev = topk_feature_vector(s, span, 1, list(reversed(s.head_ids)))
        assert rev.values == tuple(reversed(full.values))

    def test_topk_subset(self):
        s = self.two_by_two()
        span = ContextSpan((2, 3), (12, 13))
        heads = [HeadId(1, 1), HeadId(0, 0)]
        fv = topk_feature_vector(s, span, 3, heads)
        assert fv.values[0] == pytest.approx(0.5)
        assert fv.values[1] == pytest.approx(0.4 / 0.7)

    def test_duplicate_heads_rejected(self):
        s = self.two_by_two()
        with pytest.raises(InvalidInput):
            topk_feature_vector(s, span_all(4), 1, [HeadId(0, 0), HeadId(0, 0)])

    def test_values_in_unit_interval(self):
        with pytest.raises(InvalidInput):
            FeatureVector((1.2,), (HeadId(0, 0),))

    def test_project_features(self):
        fv = FeatureVector((0.1, 0.9), (HeadId(0, 0), HeadId(0, 1)))
        p = project_features(fv, [HeadId(0, 1)])
        assert p.values == (0.9,)
        with pytest.raises(InvalidInput):
            project_features(fv, [HeadId(2, 2)])


class TestContextMask:
    def test_basic(self):
        layout = PromptLayout((1, 1, 5, 6, 7, 2, 2), (T, T, C, C, C, Q, Q))
        span = context_mask(layout)
        assert span.indices == (2, 3, 4)
        assert span.token_ids == (5, 6, 7)

    def test_all_context(self):
        layout = PromptLayout((5, 6), (C, C))
        assert context_mask(layout).indices == (0, 1)

    def test_interleaved_runs(self):
        roles = [T, C, C, Q, C, G]
        layout = PromptLayout(tuple(range(6)), tuple(roles))
        assert context_mask(layout).indices == (1, 2, 4)

    def test_empty_context(self):
        with pytest.raises(EmptyContext):
            context_mask(PromptLayout((1, 2), (T, Q)))

    def test_unknown_role(self):
        with pytest.raises(InvalidInput):
            PromptLayout((1,), ("weird",))
