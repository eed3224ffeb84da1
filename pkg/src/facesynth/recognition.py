"""Still-to-video recognition harness: recognition via generation.

A pluggable embedding maps face images to unit-norm vectors; galleries hold
one original-still embedding per enrolled identity plus optional synthetic
entries; matching is nearest-neighbor Euclidean over an identity's entries.
The watch-list protocol enrolls a few identities, probes with their videos
plus videos of unseen people, and scores the screening with pAUC(20%) and
mean average precision over seeded repetitions.
"""

from __future__ import annotations

import dataclasses
import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import shape3d, trainer
from .datakit import DatasetOnDisk
from .netarch import ParamBundle, extract_features


class UndefinedMetricError(ValueError):
    """Metric is undefined for the given inputs (e.g., single-class labels)."""


# -- embedding providers -------------------------------------------------------


class EmbeddingProvider:
    """Maps [0,1] grayscale images to unit-norm vectors, deterministically."""

    dim: int
    train_identities: frozenset = frozenset()

    def embed(self, images: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _l2_normalize(v: np.ndarray) -> np.ndarray:
    return v / (np.linalg.norm(v, axis=-1, keepdims=True) + 1e-12)


class _EmbedNet(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 16, 3, 2, 1)
        self.conv2 = nn.Conv2d(16, 32, 3, 2, 1)
        self.conv3 = nn.Conv2d(32, 64, 3, 2, 1)
        self.fc = nn.Linear(64, dim)
        self.act = nn.ELU()

    def forward(self, x):
        h = self.act(self.conv1(x))
        h = self.act(self.conv2(h))
        h = self.act(self.conv3(h))
        h = h.mean(dim=(2, 3))
        e = self.fc(h)
        return e / (e.norm(dim=1, keepdim=True) + 1e-12)


class TrainedEmbedding(EmbeddingProvider):
    """Small convolutional embedding trained with a contrastive pair loss."""

    def __init__(self, net: _EmbedNet, dim: int, train_identities: frozenset):
        self.net = net.eval()
        self.dim = dim
        self.train_identities = train_identities

    def embed(self, images: np.ndarray) -> np.ndarray:
        imgs = np.asarray(images, dtype=np.float32)
        single = imgs.ndim == 2
        if single:
            imgs = imgs[None]
        with torch.no_grad():
            out = self.net(torch.from_numpy(imgs)[:, None]).double().numpy()
        out = _l2_normalize(out)
        return out[0] if single else out


def _augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    dx, dy = rng.integers(-2, 3, size=2)
    out = np.roll(np.roll(img, dy, axis=0), dx, axis=1)
    out = out + rng.uniform(-0.05, 0.05)
    out = out + rng.normal(0, 0.02, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def train_desk_embedding(
    dataset: DatasetOnDisk,
    train_ids: list[int],
    seed: int = 0,
    dim: int = 64,
    steps: int = 500,
    pairs_per_step: int = 32,
    lr: float = 1e-3,
    frames_per_id: int = 10,
    margin: float = 1.0,
    excluded_ids: list[int] | None = None,
) -> TrainedEmbedding:
    """Train the desk-scale embedding on held-out identities' stills and frames.

    train_ids must be disjoint from every identity later used in evaluation;
    pass excluded_ids to assert that here.  Deterministic in seed.
    """
    if excluded_ids is not None:
        overlap = sorted(set(train_ids) & set(excluded_ids))
        if overlap:
            raise ValueError(f"embedding training identities overlap evaluation set: {overlap}")
    if len(train_ids) < 2:
        raise ValueError("need at least two training identities for contrastive pairs")

    rng = np.random.default_rng(seed)
    torch.use_deterministic_algorithms(True)
    gen = torch.Generator().manual_seed(seed)
    net = _EmbedNet(dim)
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            with torch.no_grad():
                m.weight.normal_(0.0, 1.0 / m.weight[0].numel() ** 0.5, generator=gen)
                m.bias.zero_()

    images_by_id = {}
    for ident in train_ids:
        pool = [dataset.still(ident)]
        frames = dataset.frames(ident)
        if frames.shape[0]:
            picks = rng.choice(frames.shape[0], size=min(frames_per_id, frames.shape[0]), replace=False)
            pool.extend(frames[i] for i in picks)
        images_by_id[ident] = pool

    opt = torch.optim.Adam(net.parameters(), lr=lr)
    ids = list(train_ids)
    net.train()
    for _ in range(steps):
        half = pairs_per_step // 2
        a_imgs, b_imgs, same = [], [], []
        for _ in range(half):  # positive pairs
            ident = ids[rng.integers(len(ids))]
            pool = images_by_id[ident]
            i, j = rng.integers(len(pool)), rng.integers(len(pool))
            a_imgs.append(_augment(pool[i], rng))
            b_imgs.append(_augment(pool[j], rng))
            same.append(1.0)
        for _ in range(pairs_per_step - half):  # negative pairs
            i1, i2 = rng.choice(len(ids), size=2, replace=False)
            p1, p2 = images_by_id[ids[i1]], images_by_id[ids[i2]]
            a_imgs.append(_augment(p1[rng.integers(len(p1))], rng))
            b_imgs.append(_augment(p2[rng.integers(len(p2))], rng))
            same.append(0.0)
        a = torch.from_numpy(np.stack(a_imgs).astype(np.float32))[:, None]
        b = torch.from_numpy(np.stack(b_imgs).astype(np.float32))[:, None]
        y = torch.tensor(same, dtype=torch.float32)
        d = (net(a) - net(b)).norm(dim=1)
        loss = (y * d.pow(2) + (1 - y) * (margin - d).clamp(min=0).pow(2)).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval()
    return TrainedEmbedding(net, dim, frozenset(train_ids))


def _image_key(image: np.ndarray) -> str:
    arr = np.round(np.clip(np.asarray(image, dtype=float), 0, 1) * 255).astype(np.uint8)
    return hashlib.sha1(arr.tobytes()).hexdigest()


class PrecomputedEmbeddings(EmbeddingProvider):
    """Embeddings read from an .npz file, keyed by image content hash.

    Lets externally computed features (a real pretrained model's outputs)
    plug into the same protocol; see dump_embeddings_npz for the writer.
    """

    def __init__(self, path):
        data = np.load(path)
        self.table = {k: _l2_normalize(np.asarray(data[k], dtype=float)) for k in data.files}
        if not self.table:
            raise ValueError(f"{path} holds no embeddings")
        self.dim = next(iter(self.table.values())).shape[-1]

    def embed(self, images: np.ndarray) -> np.ndarray:
        imgs = np.asarray(images, dtype=float)
        single = imgs.ndim == 2
        if single:
            imgs = imgs[None]
        out = []
        for img in imgs:
            key = _image_key(img)
            if key not in self.table:
                raise KeyError(f"no precomputed embedding for image {key[:12]}...")
            out.append(self.table[key])
        out = np.stack(out)
        return out[0] if single else out


def dump_embeddings_npz(images: np.ndarray, vectors: np.ndarray, path) -> None:
    keys = [_image_key(img) for img in np.asarray(images)]
    np.savez(path, **{k: v for k, v in zip(keys, np.asarray(vectors))})


# -- gallery and matching --------------------------------------------------------


@dataclass
class Gallery:
    """Per enrolled identity: embedded original still plus synthetic entries."""

    entries: dict[int, np.ndarray]
    tags: dict[int, list[str]]

    def __post_init__(self):
        for ident, arr in self.entries.items():
            if arr.ndim != 2 or arr.shape[0] < 1:
                raise ValueError(f"identity {ident} must have at least one gallery entry")
            if len(self.tags[ident]) != arr.shape[0]:
                raise ValueError(f"identity {ident}: tags do not align with entries")

    @property
    def identities(self) -> list[int]:
        return sorted(self.entries)

    def entries_per_identity(self) -> int:
        return max(arr.shape[0] for arr in self.entries.values())


def build_gallery(
    stills: dict[int, np.ndarray],
    provider: EmbeddingProvider,
    synthetic: dict[int, np.ndarray] | None = None,
) -> Gallery:
    """Embed original stills (and optional per-identity synthetic stacks)."""
    entries, tags = {}, {}
    for ident, still in stills.items():
        vecs = [provider.embed(still)[None]]
        t = ["original"]
        if synthetic and ident in synthetic and len(synthetic[ident]):
            vecs.append(provider.embed(synthetic[ident]))
            t.extend(["synthetic"] * len(synthetic[ident]))
        entries[ident] = np.concatenate(vecs, axis=0)
        tags[ident] = t
    return Gallery(entries=entries, tags=tags)


def match(probe, gallery: Gallery, provider: EmbeddingProvider | None = None):
    """Score a probe against every enrolled identity.

    probe is an image (embedded with provider) or an embedding vector.
    score(identity) = -min Euclidean distance over that identity's entries;
    returns (identities, scores); argmax of scores is the prediction.
    """
    if not gallery.entries:
        raise ValueError("empty gallery")
    probe = np.asarray(probe, dtype=float)
    if probe.ndim == 2:
        if provider is None:
            raise ValueError("matching an image probe requires an embedding provider")
        probe = provider.embed(probe)
    ids = gallery.identities
    scores = np.empty(len(ids))
    for i, ident in enumerate(ids):
        d = np.linalg.norm(gallery.entries[ident] - probe[None, :], axis=1)
        scores[i] = -float(d.min())
    return ids, scores


def score_matrix(
    probes: np.ndarray, gallery: Gallery, provider: EmbeddingProvider
) -> tuple[np.ndarray, list[int]]:
    """(n_probes, n_identities) score matrix for an image stack."""
    emb = provider.embed(probes)
    ids = gallery.identities
    out = np.empty((emb.shape[0], len(ids)))
    for i, ident in enumerate(ids):
        diff = emb[:, None, :] - gallery.entries[ident][None, :, :]
        out[:, i] = -np.linalg.norm(diff, axis=2).min(axis=1)
    return out, ids


# -- metrics ---------------------------------------------------------------------


def _roc_points(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ROC polyline with one point per unique threshold (ties merged)."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order].astype(float)
    tp = np.cumsum(y)
    fp = np.cumsum(1.0 - y)
    distinct = np.r_[s[1:] != s[:-1], True]  # last index of every tie block
    tp, fp = tp[distinct], fp[distinct]
    tpr = np.r_[0.0, tp / tp[-1]]
    fpr = np.r_[0.0, fp / fp[-1]]
    return fpr, tpr


def pauc20(scores, labels, max_fpr: float = 0.2) -> float:
    """Partial area under the ROC curve for FPR in (0, max_fpr], normalized.

    Trapezoidal integration over the tie-merged ROC polyline, linearly
    interpolated at the max_fpr cut; 1.0 is perfect separation.
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).astype(bool).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    if labels.all() or (~labels).all():
        raise UndefinedMetricError("pAUC needs both positive and negative samples")
    fpr, tpr = _roc_points(scores, labels)
    area = 0.0
    for i in range(1, len(fpr)):
        x0, x1 = fpr[i - 1], fpr[i]
        y0, y1 = tpr[i - 1], tpr[i]
        if x0 >= max_fpr:
            break
        if x1 > max_fpr:  # interpolate the segment crossing the cut
            y1 = y0 + (y1 - y0) * (max_fpr - x0) / (x1 - x0)
            x1 = max_fpr
        area += 0.5 * (y0 + y1) * (x1 - x0)
    return float(area / max_fpr)


def mean_average_precision(scores: np.ndarray, relevance: np.ndarray) -> float:
    """Mean over enrolled identities of average precision over probe rankings.

    Identities with no relevant probe are excluded with a warning.
    """
    scores = np.asarray(scores, dtype=float)
    relevance = np.asarray(relevance).astype(bool)
    if scores.shape != relevance.shape or scores.ndim != 2:
        raise ValueError("scores and relevance must be matching (probes, identities) matrices")
    aps = []
    for k in range(scores.shape[1]):
        rel = relevance[:, k]
        if not rel.any():
            warnings.warn(f"identity column {k} has no relevant probes; excluded from mAP")
            continue
        order = np.argsort(-scores[:, k], kind="stable")
        hits = rel[order]
        ranks = np.nonzero(hits)[0] + 1
        precisions = np.cumsum(hits)[hits.astype(bool)] / ranks
        aps.append(float(precisions.mean()))
    if not aps:
        raise UndefinedMetricError("no identity has a relevant probe")
    return float(np.mean(aps))


# -- watch-list protocol -----------------------------------------------------------


@dataclass(frozen=True)
class WatchlistSplit:
    """One repetition's identity roles; roles are pairwise disjoint."""

    enrolled: tuple[int, ...]
    generic: tuple[int, ...]
    unseen: tuple[int, ...]
    seed: int

    def __post_init__(self):
        roles = [set(self.enrolled), set(self.generic), set(self.unseen)]
        for i in range(3):
            for j in range(i + 1, 3):
                if roles[i] & roles[j]:
                    raise ValueError(f"split roles overlap: {sorted(roles[i] & roles[j])}")


def build_watchlist_splits(
    pool_ids: list[int],
    generic_ids: list[int],
    n_enrolled: int,
    n_unseen: int,
    repetitions: int,
    base_seed: int = 0,
) -> list[WatchlistSplit]:
    """Seeded watch-list selections; the generic set stays fixed across reps."""
    pool = sorted(set(pool_ids) - set(generic_ids))
    if len(pool) < n_enrolled + n_unseen:
        raise ValueError(
            f"need at least {n_enrolled + n_unseen} non-generic identities, have {len(pool)}"
        )
    splits = []
    for rep in range(repetitions):
        rng = np.random.default_rng((base_seed, rep))
        picks = rng.choice(len(pool), size=n_enrolled + n_unseen, replace=False)
        enrolled = tuple(pool[i] for i in picks[:n_enrolled])
        unseen = tuple(pool[i] for i in picks[n_enrolled:])
        splits.append(
            WatchlistSplit(enrolled=enrolled, generic=tuple(generic_ids), unseen=unseen, seed=rep)
        )
    return splits


@dataclass
class ProtocolConfig:
    repetitions: int = 5
    enrolled: int = 5
    generic: int = 10
    unseen: int = 10
    probe_frames_per_id: int = 24
    noise_seed: int = 100
    base_seed: int = 0
    ridge: float = 1e-6

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")


@dataclass
class MetricsReport:
    technique: str
    repetitions: list[dict]
    pauc20_mean: float
    pauc20_std: float
    map_mean: float
    map_std: float
    n_synth: int
    config: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "technique": self.technique,
            "pauc20": self.pauc20_mean,
            "pauc20_std": self.pauc20_std,
            "map": self.map_mean,
            "map_std": self.map_std,
            "n_synth": self.n_synth,
        }

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _synthesize_gallery(
    dataset: DatasetOnDisk,
    model: shape3d.ShapeModel,
    enrolled: tuple[int, ...],
    grid: list[shape3d.CameraPose],
    mode,
    bundle: ParamBundle | None,
    noise_seed: int,
    ridge: float,
) -> dict[int, np.ndarray]:
    synthetic: dict[int, np.ndarray] = {}
    for local, ident in enumerate(enrolled):
        still = dataset.still(ident)
        lms = dataset.landmarks(ident)
        if callable(mode):
            synthetic[ident] = np.asarray(mode(still, lms, model, grid))
            continue
        faces = shape3d.simulate(
            still, local, model, grid,
            landmarks2d=lms, identity_count=len(enrolled), ridge=ridge,
        )
        if mode == "refined":
            faces = trainer.refine_gallery(bundle, faces, noise_seed)
        synthetic[ident] = np.stack([f.image for f in faces])
    return synthetic


def run_protocol(
    dataset: DatasetOnDisk,
    mode,
    provider: EmbeddingProvider,
    grid: list[shape3d.CameraPose] | None = None,
    bundle: ParamBundle | None = None,
    config: ProtocolConfig | None = None,
    generic_ids: list[int] | None = None,
    eval_pool_ids: list[int] | None = None,
) -> MetricsReport:
    """Watch-list evaluation of one gallery-augmentation technique.

    mode is "none" (still-only baseline), "simulated", "refined" (requires a
    trained bundle), or a callable hook producing a synthetic image stack
    from (still, landmarks, model, grid) for competitor techniques.
    """
    config = config or ProtocolConfig()
    if mode == "refined" and bundle is None:
        raise ValueError("refined mode requires a trained parameter bundle")
    if mode not in ("none", "simulated", "refined") and not callable(mode):
        raise ValueError(f"unknown synthesizer mode {mode!r}")

    all_ids = dataset.identity_ids()
    excluded = set(provider.train_identities)
    candidates = [i for i in all_ids if i not in excluded]
    if generic_ids is None:
        generic_ids = candidates[: config.generic]
    pool = eval_pool_ids if eval_pool_ids is not None else [
        i for i in candidates if i not in set(generic_ids)
    ]
    overlap = excluded & (set(pool) | set(generic_ids))
    if overlap:
        raise ValueError(f"evaluation identities overlap embedding training set: {sorted(overlap)}")
    needed = config.enrolled + config.unseen
    if len(pool) < needed:
        raise ValueError(
            f"insufficient identities: need {needed} in the evaluation pool "
            f"(enrolled {config.enrolled} + unseen {config.unseen}), have {len(pool)}"
        )

    model = dataset.shape_model()
    if grid is None:
        grid = shape3d.pose_grid(5, 5, 60)
    splits = build_watchlist_splits(
        pool, list(generic_ids), config.enrolled, config.unseen,
        config.repetitions, config.base_seed,
    )

    reps = []
    for rep, split in enumerate(splits):
        stills = {ident: dataset.still(ident) for ident in split.enrolled}
        synthetic = None
        if mode != "none":
            synthetic = _synthesize_gallery(
                dataset, model, split.enrolled, grid, mode, bundle,
                config.noise_seed + rep, config.ridge,
            )
        gallery = build_gallery(stills, provider, synthetic)

        probe_rng = np.random.default_rng((config.base_seed, rep, 7))
        probe_imgs, probe_ids = [], []
        for ident in list(split.enrolled) + list(split.unseen):
            frames = dataset.frames(ident)
            n = min(config.probe_frames_per_id, frames.shape[0])
            picks = probe_rng.choice(frames.shape[0], size=n, replace=False)
            probe_imgs.append(frames[picks])
            probe_ids.extend([ident] * n)
        probes = np.concatenate(probe_imgs, axis=0)
        probe_ids = np.array(probe_ids)

        scores, ids = score_matrix(probes, gallery, provider)
        relevance = probe_ids[:, None] == np.array(ids)[None, :]
        reps.append(
            {
                "repetition": rep,
                "pauc20": pauc20(scores.reshape(-1), relevance.reshape(-1)),
                "map": mean_average_precision(scores, relevance),
                "enrolled": list(split.enrolled),
                "unseen": list(split.unseen),
            }
        )

    paucs = np.array([r["pauc20"] for r in reps])
    maps = np.array([r["map"] for r in reps])
    n_synth = 0 if mode == "none" else len(grid)
    technique = mode if isinstance(mode, str) else getattr(mode, "__name__", "competitor")
    return MetricsReport(
        technique=technique,
        repetitions=reps,
        pauc20_mean=float(paucs.mean()),
        pauc20_std=float(paucs.std()),
        map_mean=float(maps.mean()),
        map_std=float(maps.std()),
        n_synth=n_synth,
        config=dataclasses.asdict(config),
    )
