"""Procedural desk-scale dataset, directory ingestion, config, and reports.

The desk dataset stands in for a surveillance still-to-video corpus: one
clean frontal still per identity in the source domain, plus per-identity
"video" frame directories rendered along a smooth pose trajectory and pushed
through a fixed corruption chain (blur -> contrast -> brightness -> noise ->
clamp) that realizes a controlled, measurable source->target domain shift.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from . import shape3d
from .shape3d import CameraPose, ShapeCoefficients, build_synthetic_shape_model

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class DatasetError(ValueError):
    """Invalid dataset layout or manifest."""


class ReportError(ValueError):
    """Report payload does not match the requested table schema."""


# -- image I/O ---------------------------------------------------------------


def save_png(image: np.ndarray, path: Path | str) -> None:
    """Write a [0, 1] float image as 8-bit grayscale PNG."""
    arr = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path)


def load_png(path: Path | str, resolution: int | None = None) -> np.ndarray:
    """Read an image as [0, 1] grayscale, optionally resizing to a square."""
    img = Image.open(path).convert("L")
    if resolution is not None and img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.BILINEAR)
    return np.asarray(img, dtype=float) / 255.0


def quantize(image: np.ndarray) -> np.ndarray:
    """The exact [0,1] float the PNG round trip yields for this image."""
    arr = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    return np.round(arr * 255.0) / 255.0


# -- dataset spec ------------------------------------------------------------


@dataclass
class DeskDatasetSpec:
    """Parameters of the procedural still/video dataset."""

    identity_count: int = 8
    sequences: int = 2
    frames: int = 24
    pose_count: int = 9
    yaw_max: float = 40.0
    pitch_max: float = 8.0
    resolution: int = 32
    blur_sigma: float = 1.1
    contrast: float = 0.7
    brightness: float = -0.08
    noise_sigma: float = 0.04
    seed: int = 0
    vertex_count: int = 256
    basis_count: int = 8
    model_seed: int = 1

    def __post_init__(self):
        if self.identity_count < 4:
            raise ValueError("identity_count must be >= 4")
        if self.resolution not in shape3d.SUPPORTED_RESOLUTIONS:
            raise ValueError(f"resolution must be one of {shape3d.SUPPORTED_RESOLUTIONS}")
        for name in ("blur_sigma", "contrast", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.sequences < 1 or self.frames < 1:
            raise ValueError("sequences and frames must be >= 1")
        if self.pose_count < 1:
            raise ValueError("pose_count must be >= 1")


def corrupt(image: np.ndarray, spec: DeskDatasetSpec, rng: np.random.Generator) -> np.ndarray:
    """Fixed-order target-domain corruption chain.

    Stages at their identity values (blur 0, contrast 1, brightness 0,
    noise 0) are skipped, so a zero-shift spec reproduces the input bitwise.
    """
    out = image
    if spec.blur_sigma > 0:
        out = gaussian_filter(out, sigma=spec.blur_sigma)
    if spec.contrast != 1.0:
        out = 0.5 + spec.contrast * (out - 0.5)
    if spec.brightness != 0.0:
        out = out + spec.brightness
    if spec.noise_sigma > 0:
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    if out is not image:
        out = np.clip(out, 0.0, 1.0)
    return out


def _identity_texture(model: shape3d.ShapeModel, rng: np.random.Generator) -> np.ndarray:
    """Per-vertex intensity for one identity: skin tone, pattern, face features."""
    verts = model.mean_shape.reshape(-1, 3)
    x, y = verts[:, 0], verts[:, 1]
    tone = rng.uniform(0.40, 0.75)
    tex = np.full(model.vertex_count, tone)
    for _ in range(3):
        fx, fy = rng.uniform(0.8, 3.4, size=2)
        px, py = rng.uniform(0.0, 2 * math.pi, size=2)
        amp = rng.uniform(0.05, 0.16)
        tex += amp * np.sin(fx * x + px) * np.sin(fy * y + py)
    named = dict(zip(model.landmark_names, model.landmark_indices))
    for lm, radius, depth in (("eye_l", 0.13, 0.30), ("eye_r", 0.13, 0.30), ("mouth_c", 0.17, 0.22)):
        cx, cy = verts[named[lm], 0], verts[named[lm], 1]
        d2 = (x - cx) ** 2 + (y - cy) ** 2
        tex -= depth * np.exp(-d2 / radius**2)
    return np.clip(tex, 0.05, 0.95)


def _video_trajectory(spec: DeskDatasetSpec, seq: int, rng: np.random.Generator) -> list[CameraPose]:
    """Smooth pose sweep through pose_count yaw stops, small pitch/drift on top."""
    stops = np.linspace(-spec.yaw_max, spec.yaw_max, spec.pose_count)
    if seq % 2:
        stops = stops[::-1]
    t = np.linspace(0.0, 1.0, spec.frames)
    yaw = np.interp(t * (spec.pose_count - 1), np.arange(spec.pose_count), stops)
    phase = rng.uniform(0, 2 * math.pi)
    pitch = spec.pitch_max * np.sin(2 * math.pi * t + phase)
    drift = 0.03 * spec.resolution
    dx = drift * np.sin(2 * math.pi * t + rng.uniform(0, 2 * math.pi))
    dy = drift * np.sin(2 * math.pi * t + rng.uniform(0, 2 * math.pi))
    frame = shape3d.standard_frame(spec.resolution)
    return [
        CameraPose(yaw=float(yaw[i]), pitch=float(pitch[i]),
                   scale=frame.scale, tx=frame.tx + float(dx[i]), ty=frame.ty + float(dy[i]))
        for i in range(spec.frames)
    ]


@dataclass
class DatasetOnDisk:
    """A generated or ingested dataset rooted at a directory with a manifest."""

    root: Path
    manifest: dict

    @property
    def resolution(self) -> int:
        return int(self.manifest["resolution"])

    def identity_ids(self) -> list[int]:
        return [int(e["id"]) for e in self.manifest["identities"]]

    def _entry(self, identity: int) -> dict:
        for e in self.manifest["identities"]:
            if int(e["id"]) == identity:
                return e
        raise KeyError(f"identity {identity} not in manifest")

    def still(self, identity: int) -> np.ndarray:
        return load_png(self.root / self._entry(identity)["still"], self.resolution)

    def landmarks(self, identity: int) -> np.ndarray | None:
        rel = self._entry(identity).get("landmarks")
        if not rel:
            return None
        data = json.loads((self.root / rel).read_text())
        return np.asarray(data["points"], dtype=float)

    def frame_paths(self, identity: int, sequence: int | None = None) -> list[Path]:
        entry = self._entry(identity)
        seqs = entry["videos"] if sequence is None else [entry["videos"][sequence]]
        return [self.root / p for seq in seqs for p in seq]

    def frames(self, identity: int, sequence: int | None = None, limit: int | None = None) -> np.ndarray:
        paths = self.frame_paths(identity, sequence)
        if limit is not None:
            paths = paths[:limit]
        return np.stack([load_png(p, self.resolution) for p in paths])

    def shape_model(self) -> shape3d.ShapeModel:
        m = self.manifest["model"]
        return build_synthetic_shape_model(
            seed=int(m["seed"]),
            vertex_count=int(m["vertex_count"]),
            basis_count=int(m["basis_count"]),
        )

    def spec(self) -> DeskDatasetSpec | None:
        raw = self.manifest.get("spec")
        return DeskDatasetSpec(**raw) if raw else None


def _write_manifest(root: Path, manifest: dict) -> None:
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_dataset(root: Path | str) -> DatasetOnDisk:
    root = Path(root)
    mpath = root / MANIFEST_NAME
    if not mpath.exists():
        raise DatasetError(f"no {MANIFEST_NAME} under {root}; run dataset gen or ingest first")
    return DatasetOnDisk(root=root, manifest=json.loads(mpath.read_text()))


def _stream(spec: DeskDatasetSpec, *key) -> np.random.Generator:
    """Independent named RNG stream derived from the dataset seed."""
    return np.random.default_rng(np.random.SeedSequence((spec.seed,) + key))


def identity_appearance(
    spec: DeskDatasetSpec, model: shape3d.ShapeModel, identity: int
) -> tuple[ShapeCoefficients, np.ndarray]:
    """Deterministic shape coefficients and texture of one procedural identity."""
    rng = _stream(spec, identity, 0)
    coeffs = ShapeCoefficients(rng.uniform(0.2, 0.8, size=spec.basis_count))
    return coeffs, _identity_texture(model, rng)


def clean_sequence_renders(
    spec: DeskDatasetSpec, model: shape3d.ShapeModel, identity: int, sequence: int
) -> list[np.ndarray]:
    """Uncorrupted re-renders of one video sequence (the pre-shift frames)."""
    coeffs, texture = identity_appearance(spec, model, identity)
    traj = _video_trajectory(spec, sequence, _stream(spec, identity, 1, sequence))
    return [shape3d.render(model, coeffs, texture, pose, spec.resolution) for pose in traj]


def generate_desk_dataset(spec: DeskDatasetSpec, root: Path | str) -> DatasetOnDisk:
    """Render the procedural dataset under root; deterministic in spec.seed.

    Every random choice comes from a named stream keyed by (seed, identity,
    role), so per-identity work is order-free and could run in parallel.
    """
    root = Path(root)
    for sub in ("stills", "landmarks", "videos"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    model = build_synthetic_shape_model(spec.model_seed, spec.vertex_count, spec.basis_count)
    frame = shape3d.standard_frame(spec.resolution)
    identities = []
    for ident in range(spec.identity_count):
        coeffs, texture = identity_appearance(spec, model, ident)

        still = shape3d.render(model, coeffs, texture, frame, spec.resolution)
        still_rel = f"stills/{ident:03d}.png"
        save_png(still, root / still_rel)

        verts = shape3d.synthesize_shape(model, coeffs)
        lm_points = shape3d.project(verts, frame)[model.landmark_indices]
        lm_rel = f"landmarks/{ident:03d}.json"
        (root / lm_rel).write_text(
            json.dumps(
                {"names": list(model.landmark_names), "points": lm_points.tolist()},
                sort_keys=True,
            )
            + "\n"
        )

        videos = []
        for seq in range(spec.sequences):
            seq_dir = root / f"videos/{ident:03d}/{seq:02d}"
            seq_dir.mkdir(parents=True, exist_ok=True)
            noise_rng = _stream(spec, ident, 2, seq)
            rel_frames = []
            for fidx, clean in enumerate(clean_sequence_renders(spec, model, ident, seq)):
                frame_img = corrupt(clean, spec, noise_rng)
                rel = f"videos/{ident:03d}/{seq:02d}/{fidx:04d}.png"
                save_png(frame_img, root / rel)
                rel_frames.append(rel)
            videos.append(rel_frames)
        identities.append(
            {"id": ident, "still": still_rel, "landmarks": lm_rel, "videos": videos}
        )

    manifest = {
        "version": MANIFEST_VERSION,
        "kind": "desk",
        "resolution": spec.resolution,
        "seed": spec.seed,
        "spec": dataclasses.asdict(spec),
        "model": {
            "seed": spec.model_seed,
            "vertex_count": spec.vertex_count,
            "basis_count": spec.basis_count,
        },
        "identities": identities,
    }
    _write_manifest(root, manifest)
    return DatasetOnDisk(root=root, manifest=manifest)


def ingest(
    root: Path | str,
    resolution: int = 32,
    model_seed: int = 1,
    vertex_count: int = 256,
    basis_count: int = 8,
) -> DatasetOnDisk:
    """Validate a stills/videos directory tree and write its manifest.

    Expected layout: stills/<id>.png, videos/<id>/<seq>/<frame>.png, optional
    landmarks/<id>.json.  Images are converted to grayscale at the configured
    resolution when loaded.  Every identity that appears anywhere must have a
    still; gaps are enumerated in the error.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    stills_dir, videos_dir, lm_dir = root / "stills", root / "videos", root / "landmarks"
    if not stills_dir.is_dir():
        raise DatasetError(f"missing stills/ directory under {root}")

    still_ids = {}
    for p in sorted(stills_dir.glob("*.png")):
        try:
            ident = int(p.stem)
        except ValueError as exc:
            raise DatasetError(f"still filename {p.name} is not an integer identity") from exc
        still_ids[ident] = p

    video_ids = {}
    if videos_dir.is_dir():
        for d in sorted(videos_dir.iterdir()):
            if not d.is_dir():
                continue
            try:
                ident = int(d.name)
            except ValueError as exc:
                raise DatasetError(f"video directory {d.name} is not an integer identity") from exc
            seqs = []
            for sd in sorted(d.iterdir()):
                if sd.is_dir():
                    frames = sorted(sd.glob("*.png"))
                    if frames:
                        seqs.append(frames)
            video_ids[ident] = seqs

    missing = sorted(set(video_ids) - set(still_ids))
    if missing:
        raise DatasetError(f"identities without stills: {missing}")
    if not still_ids:
        raise DatasetError(f"no stills found under {stills_dir}")

    failures = []
    identities = []
    for ident in sorted(still_ids):
        try:
            load_png(still_ids[ident], resolution)
        except Exception as exc:  # unreadable image
            failures.append(f"{still_ids[ident]}: {exc}")
            continue
        lm_path = lm_dir / f"{ident:03d}.json"
        entry = {
            "id": ident,
            "still": still_ids[ident].relative_to(root).as_posix(),
            "landmarks": lm_path.relative_to(root).as_posix() if lm_path.exists() else None,
            "videos": [
                [f.relative_to(root).as_posix() for f in seq]
                for seq in video_ids.get(ident, [])
            ],
        }
        identities.append(entry)
    if failures:
        raise DatasetError("unreadable images:\n" + "\n".join(failures))

    manifest = {
        "version": MANIFEST_VERSION,
        "kind": "ingested",
        "resolution": resolution,
        "seed": None,
        "model": {"seed": model_seed, "vertex_count": vertex_count, "basis_count": basis_count},
        "identities": identities,
    }
    _write_manifest(root, manifest)
    return DatasetOnDisk(root=root, manifest=manifest)


# -- reports -----------------------------------------------------------------

_REPORT_SCHEMAS = {
    "fr": {"rows"},
    "fid": {"rows", "buckets"},
    "ablation": {"metrics", "removed", "values"},
    "bench": {"rows"},
}
_FR_COLUMNS = ("technique", "pauc20", "pauc20_std", "map", "map_std", "n_synth")
_BENCH_COLUMNS = ("gallery_per_identity", "median_ms", "std_ms", "n_probes")


def write_report(results: dict, path: Path | str, fmt: str = "json") -> None:
    """Write an evaluation table as JSON (full detail) or CSV (paper layout).

    The payload must carry kind plus the kind's required fields; anything
    missing refuses the write.
    """
    if fmt not in ("json", "csv"):
        raise ReportError(f"format must be json or csv, got {fmt}")
    kind = results.get("kind")
    if kind not in _REPORT_SCHEMAS:
        raise ReportError(f"unknown report kind {kind!r}; expected one of {sorted(_REPORT_SCHEMAS)}")
    missing = _REPORT_SCHEMAS[kind] - results.keys()
    if missing:
        raise ReportError(f"report kind {kind!r} missing fields: {sorted(missing)}")
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(results, sort_keys=True, indent=2) + "\n")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if kind == "fr":
            writer.writerow(_FR_COLUMNS)
            for row in results["rows"]:
                if set(_FR_COLUMNS) - row.keys():
                    raise ReportError(f"fr row missing fields: {sorted(set(_FR_COLUMNS) - row.keys())}")
                writer.writerow([row[c] for c in _FR_COLUMNS])
        elif kind == "fid":
            buckets = list(results["buckets"])
            writer.writerow(["technique"] + [f"fid_pm{int(b)}" for b in buckets])
            for row in results["rows"]:
                writer.writerow([row["technique"]] + [row["fid"][str(b)] for b in buckets])
        elif kind == "ablation":
            removed = list(results["removed"])
            writer.writerow(["metric", "full"] + [f"removed_{r}" for r in removed])
            for metric in results["metrics"]:
                vals = results["values"][metric]
                writer.writerow([metric, vals["full"]] + [vals[r] for r in removed])
        elif kind == "bench":
            writer.writerow(_BENCH_COLUMNS)
            for row in results["rows"]:
                if set(_BENCH_COLUMNS) - row.keys():
                    raise ReportError(
                        f"bench row missing fields: {sorted(set(_BENCH_COLUMNS) - row.keys())}"
                    )
                writer.writerow([row[c] for c in _BENCH_COLUMNS])


def read_report(path: Path | str) -> dict:
    return json.loads(Path(path).read_text())


# -- flat key=value config ---------------------------------------------------


class ConfigError(ValueError):
    """Unknown key or unparsable value in a config file or override."""


def _is_dataclass_instance(obj) -> bool:
    return dataclasses.is_dataclass(obj) and not isinstance(obj, type)


def flatten_sections(sections: dict[str, object]) -> dict[str, object]:
    """Dataclass instances -> {"section.field": value}; nested ones recurse."""
    flat = {}
    for name, obj in sections.items():
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            key = f"{name}.{f.name}"
            if _is_dataclass_instance(value):
                flat.update(flatten_sections({key: value}))
            else:
                flat[key] = value
    return flat


def _parse_value(text: str, like) -> object:
    if isinstance(like, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(type(like[0])(t) for t in text.split(","))
    return text


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat `key = value` lines; # starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def apply_config(sections: dict[str, object], raw: dict[str, str]) -> None:
    """Apply string key/value pairs onto dataclass sections, strictly typed.

    Keys address nested dataclasses with dots (train.loss.lambda_reg);
    unknown keys raise ConfigError listing every valid key.
    """
    flat = flatten_sections(sections)
    for key, value in raw.items():
        if key not in flat:
            valid = ", ".join(sorted(flat))
            raise ConfigError(f"unknown config key {key!r}; valid keys: {valid}")
        parts = key.split(".")
        target = sections[parts[0]]
        for mid in parts[1:-1]:
            target = getattr(target, mid)
        current = getattr(target, parts[-1])
        try:
            parsed = _parse_value(value, current)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc
        setattr(target, parts[-1], parsed)
