"""Distribution-level and diagnostic evaluation.

Frechet distance between Gaussian fits of feature distributions (with the
matrix square root taken in the symmetric form), a seeded random-convolution
feature map as the desk-scale stand-in for a pretrained FID embedder,
embedding export for external 2D projection tools, the module-removal
ablation runner, and the gallery-size matching-time bench.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn

from . import recognition, shape3d, trainer
from .datakit import DatasetOnDisk
from .netarch import ParamBundle, extract_features
from .recognition import EmbeddingProvider, Gallery, ProtocolConfig, match, run_protocol
from .trainer import TrainConfig


@dataclass(frozen=True)
class MomentPair:
    """Gaussian fit of a feature sample: mean, unbiased covariance, count."""

    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError(f"covariance shape {cov.shape} does not match mean dim {mean.shape[0]}")
        if np.abs(cov - cov.T).max() > 1e-9:
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def compute_moments(features: np.ndarray) -> MomentPair:
    """Sample mean and unbiased (n-1) covariance of an (n, d) feature matrix."""
    x = np.asarray(features, dtype=float)
    if x.ndim != 2:
        raise ValueError("features must be an (n, d) matrix")
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples for an unbiased covariance")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T)
    return MomentPair(mean=mean, covariance=cov, sample_count=n)


def _psd_sqrt(cov: np.ndarray, what: str) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    scale = max(1.0, float(np.abs(w).max()) if w.size else 1.0)
    if w.min() < -1e-8 * scale:
        raise ValueError(f"{what} is not positive semi-definite (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid(a: MomentPair, b: MomentPair) -> float:
    """Frechet distance between two Gaussian moment pairs.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), with the
    inner square root computed by eigendecomposition of the symmetrized
    product; tiny negative eigenvalues (numerical) are clamped to zero.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    a_half = _psd_sqrt(a.covariance, "first covariance")
    _psd_sqrt(b.covariance, "second covariance")  # PSD validation
    inner = a_half @ b.covariance @ a_half
    w = np.linalg.eigh(0.5 * (inner + inner.T))[0]
    scale = max(1.0, float(np.abs(w).max()) if w.size else 1.0)
    if w.min() < -1e-8 * scale:
        raise ValueError("covariance product is not positive semi-definite")
    trace_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    mean_term = float(((a.mean - b.mean) ** 2).sum())
    value = mean_term + float(np.trace(a.covariance) + np.trace(b.covariance)) - 2.0 * trace_sqrt
    return max(value, 0.0)


def fid_from_features(features_a: np.ndarray, features_b: np.ndarray) -> float:
    return fid(compute_moments(features_a), compute_moments(features_b))


# -- image embedders for FID -----------------------------------------------------


class RandomConvEmbedder:
    """Seeded, fixed random convolutional feature map.

    Three strided convolution layers; the feature vector concatenates each
    layer's per-channel spatial mean and standard deviation, which tracks
    both low-frequency content (means) and texture/noise statistics (stds).
    Valid for relative FID comparisons at desk scale.
    """

    def __init__(self, seed: int = 0, resolution: int = 32):
        gen = torch.Generator().manual_seed(seed)
        self.resolution = resolution
        self.convs = []
        cin = 1
        for cout in (8, 16, 24):
            conv = nn.Conv2d(cin, cout, 3, 2, 1)
            with torch.no_grad():
                conv.weight.normal_(0.0, 1.0 / conv.weight[0].numel() ** 0.5, generator=gen)
                conv.bias.zero_()
            conv.eval()
            self.convs.append(conv)
            cin = cout
        self.dim = 2 * (8 + 16 + 24)

    def embed(self, images: np.ndarray) -> np.ndarray:
        imgs = np.asarray(images, dtype=np.float32)
        if imgs.ndim == 2:
            imgs = imgs[None]
        if imgs.shape[-1] != self.resolution:
            raise ValueError(f"expected {self.resolution}px images, got {imgs.shape[-1]}px")
        feats = []
        with torch.no_grad():
            x = torch.from_numpy(imgs)[:, None]
            for conv in self.convs:
                x = torch.nn.functional.elu(conv(x))
                feats.append(x.mean(dim=(2, 3)))
                feats.append(x.std(dim=(2, 3), unbiased=False))
        return torch.cat(feats, dim=1).double().numpy()


class FeatureNetEmbedder:
    """FID features from a trained bundle's feature extractor."""

    def __init__(self, bundle: ParamBundle):
        self.bundle = bundle
        self.dim = bundle.spec.feature_dim

    def embed(self, images: np.ndarray) -> np.ndarray:
        out = extract_features(self.bundle.feature_net, images)
        return np.asarray(out, dtype=float).reshape(-1, self.dim)


def fid_between_image_sets(set_a: np.ndarray, set_b: np.ndarray, embedder) -> float:
    """Embed both image sets and return the Frechet distance of their fits."""
    a = np.asarray(set_a)
    b = np.asarray(set_b)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("both image sets need at least 2 images")
    return fid_from_features(embedder.embed(a), embedder.embed(b))


def fid_by_pose_bucket(
    images: np.ndarray,
    max_angles: np.ndarray,
    target_images: np.ndarray,
    embedder,
    bucket_edges: tuple[float, ...] = (5.0, 15.0, 45.0),
) -> dict[str, float]:
    """Per-pose-bucket FID against a target set.

    max_angles holds each image's largest absolute rotation angle; bucket i
    covers (edge_{i-1}, edge_i], with the first bucket including zero.
    Buckets with fewer than 2 images are reported as None.
    """
    angles = np.abs(np.asarray(max_angles, dtype=float))
    target_features = embedder.embed(np.asarray(target_images))
    out: dict[str, float] = {}
    lo = 0.0
    for edge in bucket_edges:
        mask = (angles <= edge) & (angles >= lo) if lo == 0.0 else (angles <= edge) & (angles > lo)
        key = str(int(edge))
        if mask.sum() < 2:
            out[key] = None
        else:
            out[key] = fid(
                compute_moments(embedder.embed(np.asarray(images)[mask])),
                compute_moments(target_features),
            )
        lo = edge
    return out


def pose_max_angle(pose: shape3d.CameraPose) -> float:
    return max(abs(pose.yaw), abs(pose.pitch), abs(pose.roll))


# -- embedding export --------------------------------------------------------------


def export_embeddings(images: np.ndarray, tags: list[str], embedder, path) -> None:
    """Write (tag, feature...) rows as tab-separated text with a header line.

    The 2D projection itself (t-SNE or similar) is left to external tooling.
    """
    imgs = np.asarray(images)
    if imgs.shape[0] == 0:
        raise ValueError("nothing to export")
    if len(tags) != imgs.shape[0]:
        raise ValueError("tags must align with images")
    feats = np.asarray(embedder.embed(imgs), dtype=float)
    dim = feats.shape[1]
    lines = ["tag\t" + "\t".join(f"f{i}" for i in range(dim))]
    for tag, row in zip(tags, feats):
        lines.append(str(tag) + "\t" + "\t".join(repr(float(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_embeddings(path) -> tuple[list[str], np.ndarray]:
    lines = [l for l in open(path).read().splitlines() if l]
    tags, rows = [], []
    for line in lines[1:]:
        parts = line.split("\t")
        tags.append(parts[0])
        rows.append([float(v) for v in parts[1:]])
    return tags, np.array(rows)


# -- ablation runner ----------------------------------------------------------------


@dataclass(frozen=True)
class AblationVariant:
    """One single-module removal applied to an inherited training config."""

    removed: str
    config: TrainConfig

    def __post_init__(self):
        if self.removed not in ("D_F", "D_R", "C"):
            raise ValueError("removed must be one of D_F, D_R, C")
        if self.config.ablate_module != self.removed:
            raise ValueError("config.ablate_module must match the removed module")


def make_variants(base: TrainConfig, removed=("D_F", "D_R", "C")) -> list[AblationVariant]:
    return [AblationVariant(r, replace(base, ablate_module=r)) for r in removed]


def run_ablation(
    base_config: TrainConfig,
    simulated,
    labels,
    generic,
    evaluate,
    removed=("D_F", "D_R", "C"),
    seeds: tuple[int, ...] = (0,),
) -> dict:
    """Train the full model and each single-removal variant, then evaluate.

    evaluate(bundle) must return {"pauc20": float, "map": float}; results are
    averaged over seeds and shaped like the published ablation grid.
    """
    grid: dict[str, dict[str, list[float]]] = {
        name: {"pauc20": [], "map": []} for name in ("full",) + tuple(removed)
    }
    for seed in seeds:
        for name in ("full",) + tuple(removed):
            cfg = replace(
                base_config, seed=seed, ablate_module=None if name == "full" else name
            )
            result = trainer.train(cfg, simulated, labels, generic)
            metrics = evaluate(result.bundle)
            grid[name]["pauc20"].append(float(metrics["pauc20"]))
            grid[name]["map"].append(float(metrics["map"]))
    values = {
        metric: {name: float(np.mean(grid[name][metric])) for name in grid}
        for metric in ("pauc20", "map")
    }
    return {
        "kind": "ablation",
        "metrics": ["pauc20", "map"],
        "removed": list(removed),
        "values": values,
        "per_seed": grid,
        "seeds": list(seeds),
    }


# -- matching-time bench --------------------------------------------------------------


def bench_matching(
    gallery_sizes: list[int],
    provider: EmbeddingProvider | None = None,
    probe_images: np.ndarray | None = None,
    n_identities: int = 5,
    n_probes: int = 120,
    dim: int = 128,
    seed: int = 0,
    repeats: int = 3,
) -> dict:
    """Median per-probe matching time at each per-identity gallery size.

    With a provider and probe images, embedding time is included in the
    measurement; otherwise random unit-norm vectors stand in for embeddings
    and the timing isolates the nearest-neighbor search.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for size in gallery_sizes:
        entries = {
            ident: recognition._l2_normalize(rng.normal(size=(size, dim)))
            for ident in range(n_identities)
        }
        gallery = Gallery(
            entries=entries,
            tags={i: ["original"] + ["synthetic"] * (size - 1) for i in entries},
        )
        if provider is not None and probe_images is not None:
            probes = probe_images[rng.integers(0, probe_images.shape[0], size=n_probes)]
        else:
            probes = recognition._l2_normalize(rng.normal(size=(n_probes, dim)))
        medians = []
        for _ in range(repeats):
            times = np.empty(n_probes)
            for i in range(n_probes):
                t0 = time.perf_counter()
                match(probes[i], gallery, provider)
                times[i] = time.perf_counter() - t0
            medians.append(float(np.median(times) * 1000.0))
        rows.append(
            {
                "gallery_per_identity": int(size),
                "median_ms": float(np.median(medians)),
                "std_ms": float(np.std(medians)),
                "n_probes": int(n_probes),
            }
        )
    return {"kind": "bench", "rows": rows}
