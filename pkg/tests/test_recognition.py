import math

import numpy as np
import pytest

from facesynth import recognition, shape3d
from facesynth.datakit import DeskDatasetSpec, generate_desk_dataset
from facesynth.recognition import (
    Gallery,
    MetricsReport,
    PrecomputedEmbeddings,
    ProtocolConfig,
    UndefinedMetricError,
    WatchlistSplit,
    build_gallery,
    build_watchlist_splits,
    dump_embeddings_npz,
    match,
    mean_average_precision,
    pauc20,
    run_protocol,
    score_matrix,
    train_desk_embedding,
)


def brute_force_pauc(scores, labels, max_fpr=0.2):
    """Exhaustive-threshold ROC with trapezoidal integration up to max_fpr."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    points = [(0.0, 0.0)]
    for tau in sorted(set(scores), reverse=True):
        pred = scores >= tau
        tp = (pred & labels).sum()
        fp = (pred & ~labels).sum()
        points.append((fp / n_neg, tp / n_pos))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        if x0 >= max_fpr:
            break
        if x1 > max_fpr:
            y1 = y0 + (y1 - y0) * (max_fpr - x0) / (x1 - x0)
            x1 = max_fpr
        area += 0.5 * (y0 + y1) * (x1 - x0)
    return area / max_fpr


def brute_force_ap(scores_col, rel_col):
    order = sorted(range(len(scores_col)), key=lambda i: (-scores_col[i], i))
    hits = 0
    precisions = []
    for rank, idx in enumerate(order, start=1):
        if rel_col[idx]:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions)


class TestPauc:
    def test_perfect_separation(self):
        scores = np.array([0.9, 0.8, 0.2, 0.1])
        labels = np.array([True, True, False, False])
        assert pauc20(scores, labels) == pytest.approx(1.0, abs=1e-12)

    def test_perfect_inversion(self):
        scores = np.array([0.9, 0.8, 0.2, 0.1])
        labels = np.array([False, False, True, True])
        assert pauc20(scores, labels) == pytest.approx(0.0, abs=1e-12)

    def test_hand_case_matches_oracle(self):
        scores = np.array([0.9, 0.4, 0.6, 0.1])
        labels = np.array([True, True, False, False])
        assert pauc20(scores, labels) == pytest.approx(brute_force_pauc(scores, labels), abs=1e-12)

    def test_random_instances_match_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(60):
            n = int(rng.integers(4, 30))
            scores = np.round(rng.uniform(0, 1, n), 2)  # induce ties
            labels = rng.uniform(0, 1, n) > 0.5
            if labels.all() or (~labels).all():
                continue
            assert pauc20(scores, labels) == pytest.approx(
                brute_force_pauc(scores, labels), abs=1e-9
            ), f"trial {trial}"

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        scores = rng.uniform(0, 1, 30)
        labels = rng.uniform(0, 1, 30) > 0.4
        base = pauc20(scores, labels)
        assert pauc20(3.0 * scores + 2.0, labels) == pytest.approx(base, abs=1e-12)
        assert pauc20(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(UndefinedMetricError):
            pauc20(np.array([0.4, 0.6]), np.array([True, True]))


class TestMeanAveragePrecision:
    def test_relevant_always_first(self):
        scores = np.array([[0.9], [0.1], [0.2]])
        rel = np.array([[True], [False], [False]])
        assert mean_average_precision(scores, rel) == pytest.approx(1.0)

    def test_single_relevant_ranked_second(self):
        scores = np.array([[0.9], [0.5]])
        rel = np.array([[False], [True]])
        assert mean_average_precision(scores, rel) == pytest.approx(0.5)

    def test_two_identity_hand_case(self):
        # identity 0: relevant at ranks 1 and 3 -> AP = (1/1 + 2/3)/2
        # identity 1: relevant at rank 2 -> AP = 1/2
        scores = np.array(
            [
                [0.9, 0.95],
                [0.7, 0.90],
                [0.6, 0.10],
                [0.5, 0.20],
            ]
        )
        rel = np.array(
            [
                [True, False],
                [False, True],
                [True, False],
                [False, False],
            ]
        )
        expected = ((1.0 + 2.0 / 3.0) / 2.0 + 0.5) / 2.0
        assert mean_average_precision(scores, rel) == pytest.approx(expected, abs=1e-12)

    def test_random_instances_match_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(40):
            n, k = int(rng.integers(3, 12)), int(rng.integers(1, 4))
            scores = np.round(rng.uniform(0, 1, (n, k)), 2)
            rel = rng.uniform(0, 1, (n, k)) > 0.6
            rel[rng.integers(0, n), :] = True  # every column has a relevant probe
            expected = np.mean(
                [brute_force_ap(scores[:, j].tolist(), rel[:, j].tolist()) for j in range(k)]
            )
            assert mean_average_precision(scores, rel) == pytest.approx(expected, abs=1e-9)

    def test_empty_column_excluded_with_warning(self):
        scores = np.array([[0.9, 0.1], [0.5, 0.8]])
        rel = np.array([[True, False], [False, False]])
        with pytest.warns(UserWarning, match="no relevant"):
            assert mean_average_precision(scores, rel) == pytest.approx(1.0)

    def test_all_columns_empty_rejected(self):
        with pytest.raises(UndefinedMetricError):
            with pytest.warns(UserWarning):
                mean_average_precision(np.ones((2, 1)), np.zeros((2, 1), dtype=bool))


class _IdentityProvider(recognition.EmbeddingProvider):
    """Test stub: flattens and L2-normalizes tiny images."""

    def __init__(self, dim):
        self.dim = dim

    def embed(self, images):
        imgs = np.asarray(images, dtype=float)
        single = imgs.ndim == 2
        if single:
            imgs = imgs[None]
        flat = imgs.reshape(imgs.shape[0], -1)
        out = flat / (np.linalg.norm(flat, axis=1, keepdims=True) + 1e-12)
        return out[0] if single else out


class TestMatch:
    def _gallery(self):
        e0 = np.array([[1.0, 0.0], [0.8, 0.6]])
        e1 = np.array([[0.0, 1.0]])
        e2 = np.array([[-1.0, 0.0]])
        return Gallery(
            entries={0: e0, 1: e1, 2: e2},
            tags={0: ["original", "synthetic"], 1: ["original"], 2: ["original"]},
        )

    def test_exact_entry_wins_with_zero_distance(self):
        g = self._gallery()
        ids, scores = match(np.array([0.8, 0.6]), g)
        assert ids[int(np.argmax(scores))] == 0
        assert scores[0] == pytest.approx(0.0, abs=1e-12)

    def test_single_identity_always_predicted(self):
        g = Gallery(entries={7: np.array([[1.0, 0.0]])}, tags={7: ["original"]})
        for probe in (np.array([0.0, 1.0]), np.array([-1.0, 0.0])):
            ids, scores = match(probe, g)
            assert ids[int(np.argmax(scores))] == 7

    def test_hand_computed_distances(self):
        g = self._gallery()
        probe = np.array([0.6, 0.8])
        ids, scores = match(probe, g)
        d0 = min(np.linalg.norm(probe - np.array([1.0, 0.0])), np.linalg.norm(probe - np.array([0.8, 0.6])))
        assert scores[0] == pytest.approx(-d0, abs=1e-12)
        assert scores[1] == pytest.approx(-np.linalg.norm(probe - np.array([0.0, 1.0])), abs=1e-12)
        assert scores[2] == pytest.approx(-np.linalg.norm(probe - np.array([-1.0, 0.0])), abs=1e-12)

    def test_duplicate_entry_does_not_change_argmax(self):
        g = self._gallery()
        probe = np.array([0.5, 0.5])
        ids, scores = match(probe, g)
        pred = ids[int(np.argmax(scores))]
        dup = Gallery(
            entries={**g.entries, 1: np.vstack([g.entries[1], g.entries[1][:1]])},
            tags={**g.tags, 1: ["original", "synthetic"]},
        )
        ids2, scores2 = match(probe, dup)
        assert ids2[int(np.argmax(scores2))] == pred
        assert np.allclose(scores, scores2)

    def test_empty_gallery_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            match(np.array([1.0, 0.0]), Gallery(entries={}, tags={}))

    def test_image_probe_requires_provider(self):
        g = self._gallery()
        with pytest.raises(ValueError, match="provider"):
            match(np.zeros((4, 4)), g)

    def test_score_matrix_agrees_with_match(self):
        provider = _IdentityProvider(16)
        rng = np.random.default_rng(3)
        stills = {i: rng.uniform(0, 1, (4, 4)) for i in range(3)}
        g = build_gallery(stills, provider)
        probes = rng.uniform(0, 1, (5, 4, 4))
        mat, ids = score_matrix(probes, g, provider)
        for i in range(5):
            _, single = match(probes[i], g, provider)
            assert np.allclose(mat[i], single, atol=1e-12)


class TestSplits:
    def test_roles_disjoint_and_generic_fixed(self):
        splits = build_watchlist_splits(list(range(10, 30)), [1, 2, 3], 4, 5, repetitions=5)
        for s in splits:
            assert s.generic == (1, 2, 3)
            assert not (set(s.enrolled) & set(s.unseen))
        assert len({s.enrolled for s in splits}) > 1  # reselection across reps

    def test_overlap_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            WatchlistSplit(enrolled=(1, 2), generic=(2, 3), unseen=(4,), seed=0)

    def test_insufficient_pool(self):
        with pytest.raises(ValueError, match="at least"):
            build_watchlist_splits([1, 2, 3], [1], 2, 3, repetitions=1)


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    spec = DeskDatasetSpec(
        identity_count=10, sequences=1, frames=10, pose_count=5, resolution=32, seed=5
    )
    return generate_desk_dataset(spec, tmp_path_factory.mktemp("desk_recog"))


@pytest.fixture(scope="module")
def provider(desk):
    return train_desk_embedding(desk, train_ids=[0, 1, 2, 3], seed=3, steps=400)


class TestDeskEmbedding:
    def test_unit_norm_and_determinism(self, desk, provider):
        imgs = desk.frames(4, limit=3)
        e1 = provider.embed(imgs)
        assert np.abs(np.linalg.norm(e1, axis=1) - 1).max() < 1e-6
        again = train_desk_embedding(desk, train_ids=[0, 1, 2, 3], seed=3, steps=400)
        assert np.array_equal(e1, again.embed(imgs))

    def test_seed_changes_weights(self, desk, provider):
        other = train_desk_embedding(desk, train_ids=[0, 1, 2, 3], seed=4, steps=400)
        imgs = desk.frames(4, limit=2)
        assert not np.allclose(provider.embed(imgs), other.embed(imgs))

    def test_separates_held_out_identities(self, desk, provider):
        rng = np.random.default_rng(0)
        held_out = [4, 5, 6, 7, 8]
        frames = {i: desk.frames(i) for i in held_out}
        wins = 0
        trials = 60
        for _ in range(trials):
            a, b = rng.choice(held_out, size=2, replace=False)
            fa = frames[a][rng.integers(frames[a].shape[0])]
            fa2 = frames[a][rng.integers(frames[a].shape[0])]
            fb = frames[b][rng.integers(frames[b].shape[0])]
            ea, ea2, eb = provider.embed(np.stack([fa, fa2, fb]))
            same = np.linalg.norm(ea - ea2)
            diff = np.linalg.norm(ea - eb)
            wins += same < diff
        assert wins / trials >= 0.8

    def test_overlap_guard(self, desk):
        with pytest.raises(ValueError, match="overlap"):
            train_desk_embedding(desk, train_ids=[0, 1, 2], seed=0, excluded_ids=[2, 5])


class TestPrecomputedEmbeddings:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        imgs = rng.uniform(0, 1, (4, 8, 8))
        vecs = rng.normal(size=(4, 16))
        path = tmp_path / "emb.npz"
        dump_embeddings_npz(imgs, vecs, path)
        provider = PrecomputedEmbeddings(path)
        out = provider.embed(imgs)
        expected = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
        assert np.allclose(out, expected, atol=1e-9)

    def test_unknown_image_rejected(self, tmp_path):
        rng = np.random.default_rng(5)
        imgs = rng.uniform(0, 1, (2, 8, 8))
        dump_embeddings_npz(imgs, rng.normal(size=(2, 4)), tmp_path / "e.npz")
        provider = PrecomputedEmbeddings(tmp_path / "e.npz")
        with pytest.raises(KeyError):
            provider.embed(rng.uniform(0, 1, (8, 8)))


class TestProtocol:
    def _config(self):
        return ProtocolConfig(
            repetitions=2, enrolled=2, generic=2, unseen=2, probe_frames_per_id=4
        )

    def test_baseline_runs_and_is_deterministic(self, desk, provider):
        grid = shape3d.yaw_sweep(3, 20.0)
        r1 = run_protocol(desk, "none", provider, grid=grid, config=self._config())
        r2 = run_protocol(desk, "none", provider, grid=grid, config=self._config())
        assert r1.to_dict() == r2.to_dict()
        assert r1.n_synth == 0
        assert len(r1.repetitions) == 2

    def test_single_repetition_zero_std(self, desk, provider):
        cfg = ProtocolConfig(repetitions=1, enrolled=2, generic=2, unseen=2, probe_frames_per_id=4)
        r = run_protocol(desk, "none", provider, config=cfg)
        assert r.pauc20_std == 0.0
        assert r.map_std == 0.0

    def test_simulated_mode_counts_synthetics(self, desk, provider):
        grid = shape3d.yaw_sweep(3, 20.0)
        r = run_protocol(desk, "simulated", provider, grid=grid, config=self._config())
        assert r.n_synth == 3
        assert r.technique == "simulated"

    def test_refined_requires_bundle(self, desk, provider):
        with pytest.raises(ValueError, match="bundle"):
            run_protocol(desk, "refined", provider, config=self._config())

    def test_unknown_mode_rejected(self, desk, provider):
        with pytest.raises(ValueError, match="mode"):
            run_protocol(desk, "mystery", provider, config=self._config())

    def test_competitor_hook(self, desk, provider):
        def blur_hook(still, lms, model, grid):
            return np.stack([still * 0.5 for _ in grid])

        grid = shape3d.yaw_sweep(2, 15.0)
        r = run_protocol(desk, blur_hook, provider, grid=grid, config=self._config())
        assert r.technique == "blur_hook"
        assert r.n_synth == 2

    def test_insufficient_identities(self, desk, provider):
        cfg = ProtocolConfig(repetitions=1, enrolled=5, generic=2, unseen=5)
        with pytest.raises(ValueError, match="insufficient"):
            run_protocol(desk, "none", provider, config=cfg)

    def test_embedding_overlap_guard(self, desk, provider):
        cfg = self._config()
        with pytest.raises(ValueError, match="overlap"):
            run_protocol(desk, "none", provider, config=cfg, eval_pool_ids=[0, 4, 5, 6])
