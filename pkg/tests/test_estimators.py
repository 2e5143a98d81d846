import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from clipsbr.estimators import LeidenCommunities, SessionPromptRecommender


def block_adjacency(blocks: int = 3, size: int = 5) -> np.ndarray:
    n = blocks * size
    A = np.zeros((n, n))
    for b in range(blocks):
        lo = b * size
        A[lo : lo + size, lo : lo + size] = 1.0
    np.fill_diagonal(A, 0.0)
    A[0, size] = A[size, 0] = 0.2
    return A


def block_sessions(num_items: int = 30, blocks: int = 3, per_user: int = 4,
                   users: int = 12, seed: int = 0):
    rng = np.random.default_rng(seed)
    size = num_items // blocks
    sessions = []
    for u in range(users):
        for _ in range(per_user):
            b = int(rng.integers(0, blocks))
            items = rng.choice(size, size=4, replace=False) + b * size
            sessions.append((f"u{u}", [f"i{int(x)}" for x in items]))
    return sessions


class TestLeidenCommunities:
    def test_fit_recovers_blocks(self):
        est = LeidenCommunities(seed=0)
        est.fit(block_adjacency())
        assert est.n_clusters_ == 3
        assert est.labels_.shape == (15,)
        for lo in (0, 5, 10):
            assert len(set(est.labels_[lo : lo + 5])) == 1
        assert est.quality_ > 0.5
        assert est.trace_ == sorted(est.trace_)

    def test_get_params_and_clone(self):
        est = LeidenCommunities(resolution=2.0, seed=3)
        params = est.get_params()
        assert params["resolution"] == 2.0 and params["seed"] == 3
        twin = clone(est)
        assert twin.get_params() == params
        est.set_params(resolution=0.5)
        assert est.get_params()["resolution"] == 0.5

    def test_adjacency_validation(self):
        est = LeidenCommunities()
        with pytest.raises(ValueError):
            est.fit(np.zeros((3, 4)))
        asym = np.array([[0.0, 1.0], [2.0, 0.0]])
        with pytest.raises(ValueError):
            est.fit(asym)
        neg = np.array([[0.0, -1.0], [-1.0, 0.0]])
        with pytest.raises(ValueError):
            est.fit(neg)

    def test_deterministic(self):
        a = LeidenCommunities(seed=1).fit(block_adjacency())
        b = LeidenCommunities(seed=1).fit(block_adjacency())
        assert np.array_equal(a.labels_, b.labels_)


@pytest.fixture(scope="module")
def fitted():
    est = SessionPromptRecommender(d=8, max_epochs=3, patience=3,
                                   batch_size=32, learning_rate=0.01,
                                   seed=0)
    return est.fit(block_sessions())


class TestSessionPromptRecommender:
    def test_fit_exposes_state(self, fitted):
        assert fitted.n_clusters_ >= 2
        assert fitted.labels_.shape == (fitted.dataset_.num_train_items,)
        assert 0.0 <= fitted.valid_mrr5_ <= 1.0
        assert fitted.best_epoch_ >= 1

    def test_predict_returns_original_ids(self, fitted):
        picks = fitted.predict([["i0", "i1"], ["i12", "i13"]])
        assert picks.shape == (2,)
        assert all(p in fitted._dense_of_item_ for p in picks)

    def test_predictions_respect_block_structure(self, fitted):
        size = 10
        hits = 0
        for b, lo in enumerate((0, 10, 20)):
            prefix = [f"i{lo}", f"i{lo + 1}", f"i{lo + 2}"]
            pick = int(str(fitted.predict([prefix])[0])[1:])
            hits += lo <= pick < lo + size
        assert hits >= 2

    def test_score_returns_mrr(self, fitted):
        value = fitted.score([["i0", "i1"], ["i10", "i11"]], ["i2", "i12"], k=5)
        assert 0.0 <= value <= 1.0

    def test_unknown_item_rejected(self, fitted):
        with pytest.raises(ValueError):
            fitted.predict([["i0", "never-seen"]])
        with pytest.raises(ValueError):
            fitted.predict([[]])

    def test_unfitted_raises(self):
        est = SessionPromptRecommender()
        with pytest.raises(NotFittedError):
            est.predict([["a", "b"]])

    def test_bare_item_lists_accepted(self):
        sessions = [s for _, s in block_sessions(users=6)]
        est = SessionPromptRecommender(d=4, max_epochs=1, patience=1,
                                       batch_size=32, seed=0)
        est.fit(sessions)
        assert est.dataset_.num_users == len(sessions)

    def test_short_session_rejected(self):
        est = SessionPromptRecommender()
        with pytest.raises(ValueError):
            est.fit([["only-one"]])
        with pytest.raises(ValueError):
            est.fit([])

    def test_clone_and_params_round_trip(self):
        est = SessionPromptRecommender(encoder="attn", prompt_variant="none",
                                       d=16, seed=9)
        twin = clone(est)
        assert twin.get_params() == est.get_params()
        assert twin.get_params()["encoder"] == "attn"

    def test_unsupported_predict_variant(self):
        est = SessionPromptRecommender(prompt_variant="CU", d=4, max_epochs=1,
                                       patience=1, batch_size=32)
        est.fit(block_sessions(users=6))
        from clipsbr._validation import UsageError
        with pytest.raises(UsageError):
            est.predict([["i0", "i1"]])

    def test_evaluate_split(self, fitted):
        report = fitted.evaluate_split("valid", ks=(5,))
        assert set(report["metrics"]) == {"5"}
        assert report["n_instances"] > 0
