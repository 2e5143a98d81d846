import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipsbr._validation import UsageError
from clipsbr.dataset import Session
from clipsbr.prompt import (VARIANTS, PromptShapes, SessionPromptIndex,
                            fuse_items, fuse_items_backward, init_prompts,
                            normalize_rows, normalize_rows_backward, sigmoid,
                            variant_uses)

from conftest import fd_gradients, max_rel_err


def make_shapes(variant: str, d: int = 5) -> PromptShapes:
    return PromptShapes(variant=variant, num_clusters=3, num_users=4,
                        num_session_slots=6, dim=d)


def fusion_context(variant: str):
    kwargs = {}
    if variant_uses(variant, "C"):
        kwargs["cluster_of"] = np.array([0, 2, 1, 0, 2, 1])
    if variant_uses(variant, "U"):
        kwargs["user_slot"] = 1
    if variant_uses(variant, "S"):
        kwargs["session_slot"] = 4
    return kwargs


class TestPrimitives:
    def test_sigmoid_matches_reference_and_is_stable(self):
        x = np.array([-800.0, -3.0, 0.0, 3.0, 800.0])
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            y = sigmoid(x)
        assert np.allclose(y[1:4], 1.0 / (1.0 + np.exp(-x[1:4])))
        assert y[0] == 0.0 and y[4] == 1.0
        assert y[2] == 0.5

    def test_normalize_rows(self):
        x = np.array([[3.0, 4.0], [0.0, 0.0], [1e-20, 0.0]])
        x_hat, r = normalize_rows(x)
        assert np.allclose(x_hat[0], [0.6, 0.8])
        assert r[0, 0] == 5.0
        # degenerate rows stay finite instead of dividing by zero
        assert np.all(np.isfinite(x_hat))

    def test_normalize_backward_matches_fd(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 6))
        w = rng.normal(size=(4, 6))
        x_hat, r = normalize_rows(x)
        analytic = normalize_rows_backward(x_hat, r, w)

        def loss():
            return float(np.sum(normalize_rows(x)[0] * w))

        numeric = fd_gradients(loss, {"x": x}, h=1e-6)
        assert max_rel_err({"x": analytic}, numeric) < 1e-7

    @given(st.sampled_from(VARIANTS))
    def test_variant_uses(self, variant):
        for tag in "CUS":
            assert variant_uses(variant, tag) == (tag in variant)
        with pytest.raises(UsageError):
            variant_uses("X", "C")


class TestInit:
    def test_tables_match_variant(self):
        rng = np.random.default_rng(1)
        for variant in VARIANTS:
            params = init_prompts(make_shapes(variant), rng)
            assert ("cluster_prompts" in params) == variant_uses(variant, "C")
            assert ("user_prompts" in params) == variant_uses(variant, "U")
            assert ("session_prompts" in params) == variant_uses(variant, "S")
            assert ("gate_w" in params) == (variant != "none")
        assert init_prompts(make_shapes("none"), rng) == {}

    def test_shapes_bounds_and_gate_start(self):
        params = init_prompts(make_shapes("CUS", d=8), np.random.default_rng(2))
        assert params["cluster_prompts"].shape == (3, 8)
        assert params["user_prompts"].shape == (4, 8)
        assert params["session_prompts"].shape == (6, 8)
        assert params["gate_w"].shape == (16,)
        a = np.sqrt(6.0 / (3 + 8))
        assert np.all(np.abs(params["cluster_prompts"]) <= a)
        assert not np.all(params["cluster_prompts"] == 0.0)
        assert np.all(params["gate_w"] == 0.0) and params["gate_b"][0] == 0.0
        assert params["cluster_prompts"].dtype == np.float32


class TestFusion:
    def test_none_is_passthrough(self):
        emb = np.random.default_rng(0).normal(size=(5, 4))
        table, cache = fuse_items(emb, {}, "none")
        assert table is emb
        assert fuse_items_backward(np.ones_like(emb), cache, {}) is not None

    def test_missing_context_rejected(self):
        emb = np.ones((2, 4))
        params = init_prompts(make_shapes("CUS", d=4), np.random.default_rng(0))
        with pytest.raises(UsageError):
            fuse_items(emb, params, "C")
        with pytest.raises(UsageError):
            fuse_items(emb, params, "U")
        with pytest.raises(UsageError):
            fuse_items(emb, params, "S", cluster_of=np.zeros(2, dtype=int))

    @pytest.mark.parametrize("variant", [v for v in VARIANTS if v != "none"])
    def test_gate_open_and_norm_bounded(self, variant):
        rng = np.random.default_rng(3)
        emb = rng.normal(size=(6, 5)) * 3.0
        params = init_prompts(make_shapes(variant), rng)
        params["gate_w"] += rng.normal(size=params["gate_w"].shape).astype(np.float32)
        table, cache = fuse_items(emb, params, variant, **fusion_context(variant))
        g = cache["g"]
        assert np.all(g > 0.0) and np.all(g < 1.0)
        # convex blend of two unit vectors can never exceed unit length
        norms = np.linalg.norm(table, axis=1)
        assert np.all(norms <= 1.0 + 1e-6)

    def test_zero_gate_weights_give_even_blend(self):
        rng = np.random.default_rng(4)
        emb = rng.normal(size=(4, 5))
        params = init_prompts(make_shapes("C"), rng)
        table, cache = fuse_items(emb, params, "C",
                                  cluster_of=np.array([0, 1, 2, 0]))
        assert np.all(cache["g"] == 0.5)
        expected = 0.5 * cache["v_hat"] + 0.5 * cache["p_hat"]
        assert np.allclose(table, expected)

    @pytest.mark.parametrize("variant", ["C", "U", "S", "CUS"])
    def test_backward_matches_fd(self, variant):
        rng = np.random.default_rng(5)
        emb = rng.normal(size=(6, 5)).astype(np.float64)
        params = {k: v.astype(np.float64) for k, v in
                  init_prompts(make_shapes(variant), rng).items()}
        params["gate_w"] += rng.normal(size=params["gate_w"].shape) * 0.3
        w = rng.normal(size=emb.shape)
        ctx = fusion_context(variant)

        def loss():
            return float(np.sum(fuse_items(emb, params, variant, **ctx)[0] * w))

        table, cache = fuse_items(emb, params, variant, **ctx)
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        d_emb = fuse_items_backward(w, cache, grads)

        numeric = fd_gradients(loss, {"emb": emb, **params}, h=1e-5)
        analytic = {"emb": d_emb, **grads}
        assert max_rel_err(analytic, numeric) < 1e-6

    def test_backward_accumulates(self):
        rng = np.random.default_rng(6)
        emb = rng.normal(size=(3, 4))
        params = init_prompts(make_shapes("C", d=4), rng)
        _, cache = fuse_items(emb, params, "C", cluster_of=np.array([0, 0, 1]))
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        fuse_items_backward(np.ones_like(emb), cache, grads)
        once = {k: v.copy() for k, v in grads.items()}
        fuse_items_backward(np.ones_like(emb), cache, grads)
        for k in grads:
            assert np.allclose(grads[k], 2.0 * once[k])

    def test_shared_rows_get_summed_gradients(self):
        # both items share cluster 0, so its prompt row must collect both
        rng = np.random.default_rng(7)
        emb = rng.normal(size=(2, 4))
        params = init_prompts(make_shapes("C", d=4), rng)
        _, cache = fuse_items(emb, params, "C", cluster_of=np.array([0, 0]))
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        fuse_items_backward(rng.normal(size=(2, 4)), cache, grads)
        assert np.any(grads["cluster_prompts"][0] != 0.0)
        assert np.all(grads["cluster_prompts"][1:] == 0.0)


class TestSessionPromptIndex:
    def sessions(self):
        return [Session(user=0, items=[1, 2], ordinal=0, times=[0, 1]),
                Session(user=0, items=[3, 4], ordinal=1, times=[2, 3]),
                Session(user=1, items=[5, 6], ordinal=0, times=[4, 5])]

    def test_slots_and_fallback(self):
        index = SessionPromptIndex(self.sessions())
        assert index.num_slots == 3
        assert index.slot(0, 0) == 0
        assert index.slot(0, 1) == 1
        assert index.slot(1, 0) == 2
        # an evaluation session beyond training history reuses the user's
        # latest training slot
        assert index.slot(0, 7) == 1
        assert index.slot(1, 3) == 2

    def test_unknown_user_rejected(self):
        index = SessionPromptIndex(self.sessions())
        with pytest.raises(KeyError):
            index.slot(9, 0)

    def test_order_independent(self):
        a = SessionPromptIndex(self.sessions())
        b = SessionPromptIndex(list(reversed(self.sessions())))
        for key in [(0, 0), (0, 1), (1, 0)]:
            assert a.slot(*key) == b.slot(*key)
