"""Command-line pipeline driver.

Subcommands: dataset gen, dataset ingest, simulate, train, refine, eval fr,
eval fid, eval ablate, bench, export-embeddings.  Every subcommand accepts
--config <file> (flat key = value lines), repeatable --set key=value
overrides (overrides win), and a single --seed governing all randomness.
Exit codes: 0 success, 1 validation/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datakit, evalsuite, netarch, recognition, shape3d, trainer
from .datakit import (
    ConfigError,
    DatasetError,
    DeskDatasetSpec,
    ReportError,
    apply_config,
    generate_desk_dataset,
    ingest,
    load_dataset,
    parse_config_text,
    save_png,
    write_report,
)
from .recognition import ProtocolConfig, run_protocol, train_desk_embedding
from .trainer import TrainConfig


class CliError(ValueError):
    """Usage or validation problem; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


@dataclass
class SimSettings:
    """Pose grid and synthesis options."""

    grid: str = "paper"  # paper: 3-axis sweep; yaw: frontal + yaw fan
    grid_step: float = 5.0
    grid_min: float = 5.0
    grid_max: float = 60.0
    pose_count: int = 9
    yaw_max: float = 40.0
    ridge: float = 1e-6
    noise_seed: int = 100

    def build_grid(self) -> list[shape3d.CameraPose]:
        if self.grid == "paper":
            return shape3d.pose_grid(self.grid_step, self.grid_min, self.grid_max)
        if self.grid == "yaw":
            return shape3d.yaw_sweep(self.pose_count, self.yaw_max)
        raise ConfigError(f"sim.grid must be paper or yaw, got {self.grid!r}")


@dataclass
class EmbedSettings:
    identities: int = 8
    dim: int = 64
    steps: int = 500
    pairs_per_step: int = 32
    frames_per_id: int = 10
    seed: int = 0


@dataclass
class FidSettings:
    embedder: str = "random"  # random conv features, or "feature" (trained F)
    seed: int = 0
    max_images: int = 400


@dataclass
class BenchSettings:
    sizes: tuple = (1, 74, 101)
    probes: int = 120
    identities: int = 5
    dim: int = 128
    repeats: int = 3
    seed: int = 0


@dataclass
class AblateSettings:
    seeds: int = 5
    repetitions: int = 2  # protocol repetitions scoring each variant


def default_sections() -> dict[str, object]:
    return {
        "dataset": DeskDatasetSpec(),
        "train": TrainConfig(),
        "sim": SimSettings(),
        "protocol": ProtocolConfig(),
        "embed": EmbedSettings(),
        "fid": FidSettings(),
        "bench": BenchSettings(),
        "ablate": AblateSettings(),
    }


def load_sections(args) -> dict[str, object]:
    sections = default_sections()
    raw: dict[str, str] = {}
    if args.config:
        raw.update(parse_config_text(Path(args.config).read_text()))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    apply_config(sections, raw)
    if args.seed is not None:
        seed = int(args.seed)
        sections["dataset"].seed = seed
        sections["train"].seed = seed
        sections["embed"].seed = seed
        sections["protocol"].base_seed = seed
        sections["protocol"].noise_seed = seed + 1000
        sections["sim"].noise_seed = seed + 1000
        sections["bench"].seed = seed
    return sections


def _echo_config(sections: dict[str, object]) -> dict:
    return {k: repr(v) for k, v in sorted(datakit.flatten_sections(sections).items())}


# -- simulated-set plumbing ------------------------------------------------------


def build_simulated_set(dataset, grid, ridge, identity_ids=None):
    """Simulate the grid for each identity; returns images, labels, max angles."""
    model = dataset.shape_model()
    ids = identity_ids if identity_ids is not None else dataset.identity_ids()
    images, id_labels, pose_labels = [], [], []
    for local, ident in enumerate(ids):
        faces = shape3d.simulate(
            dataset.still(ident), local, model, grid,
            landmarks2d=dataset.landmarks(ident),
            identity_count=len(ids), ridge=ridge,
        )
        for face in faces:
            images.append(face.image)
            id_labels.append(face.label.identity)
            pose_labels.append(face.label.pose)
    angles = np.array([evalsuite.pose_max_angle(p) for p in grid] * len(ids))
    return (
        np.stack(images),
        np.array(id_labels, dtype=np.int64),
        np.array(pose_labels, dtype=np.int64),
        angles,
    )


def save_simulated_dir(out: Path, images, id_labels, pose_labels, grid, identity_ids, refined=False):
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(images.shape[0]):
        ident_local = int(id_labels[i])
        rel = f"{identity_ids[ident_local]:03d}/{int(pose_labels[i]):03d}.png"
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        save_png(images[i], out / rel)
        entries.append({"path": rel, "identity": ident_local, "pose": int(pose_labels[i])})
    manifest = {
        "refined": refined,
        "identity_ids": list(map(int, identity_ids)),
        "identity_count": len(identity_ids),
        "pose_count": len(grid),
        "grid": [dataclasses.asdict(p) for p in grid],
        "faces": entries,
    }
    (out / "sim_manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_simulated_dir(path: Path):
    mpath = Path(path) / "sim_manifest.json"
    if not mpath.exists():
        raise DatasetError(f"no sim_manifest.json under {path}; run `simulate` first")
    manifest = json.loads(mpath.read_text())
    images, id_labels, pose_labels = [], [], []
    for entry in manifest["faces"]:
        images.append(datakit.load_png(Path(path) / entry["path"]))
        id_labels.append(entry["identity"])
        pose_labels.append(entry["pose"])
    grid = [shape3d.CameraPose(**p) for p in manifest["grid"]]
    return (
        np.stack(images),
        np.array(id_labels, dtype=np.int64),
        np.array(pose_labels, dtype=np.int64),
        grid,
        manifest,
    )


def _generic_frames(dataset, identity_ids) -> np.ndarray:
    frames = [dataset.frames(i) for i in identity_ids]
    return np.concatenate(frames, axis=0)


def _identity_roles(dataset, embed_settings, protocol):
    ids = dataset.identity_ids()
    n_embed = embed_settings.identities
    needed = n_embed + protocol.generic + protocol.enrolled + protocol.unseen
    if len(ids) < needed:
        raise CliError(
            f"dataset has {len(ids)} identities but the protocol needs {needed} "
            f"({n_embed} embedding + {protocol.generic} generic + "
            f"{protocol.enrolled} enrolled + {protocol.unseen} unseen)"
        )
    embed_ids = ids[:n_embed]
    generic_ids = ids[n_embed : n_embed + protocol.generic]
    pool = ids[n_embed + protocol.generic :]
    return embed_ids, generic_ids, pool


def _train_provider(dataset, embed_ids, settings: EmbedSettings):
    return train_desk_embedding(
        dataset,
        embed_ids,
        seed=settings.seed,
        dim=settings.dim,
        steps=settings.steps,
        pairs_per_step=settings.pairs_per_step,
        frames_per_id=settings.frames_per_id,
    )


# -- subcommands -----------------------------------------------------------------


def cmd_dataset_gen(args, sections):
    ds = generate_desk_dataset(sections["dataset"], args.out)
    n_frames = sum(len(s) for e in ds.manifest["identities"] for s in e["videos"])
    print(f"generated {len(ds.identity_ids())} identities, {n_frames} frames -> {args.out}")
    return 0


def cmd_dataset_ingest(args, sections):
    spec = sections["dataset"]
    ds = ingest(
        args.root,
        resolution=spec.resolution,
        model_seed=spec.model_seed,
        vertex_count=spec.vertex_count,
        basis_count=spec.basis_count,
    )
    print(f"ingested {len(ds.identity_ids())} identities -> {Path(args.root) / 'manifest.json'}")
    return 0


def cmd_simulate(args, sections):
    dataset = load_dataset(args.dataset)
    sim = sections["sim"]
    grid = sim.build_grid()
    images, id_labels, pose_labels, _ = build_simulated_set(dataset, grid, sim.ridge)
    save_simulated_dir(
        Path(args.out), images, id_labels, pose_labels, grid, dataset.identity_ids()
    )
    print(f"simulated {images.shape[0]} faces ({len(grid)} poses x "
          f"{len(dataset.identity_ids())} identities) -> {args.out}")
    return 0


def cmd_train(args, sections):
    dataset = load_dataset(args.dataset)
    sim_settings = sections["sim"]
    cfg: TrainConfig = sections["train"]
    if args.simulated:
        images, id_labels, pose_labels, grid, _ = load_simulated_dir(Path(args.simulated))
    else:
        grid = sim_settings.build_grid()
        images, id_labels, pose_labels, _ = build_simulated_set(dataset, grid, sim_settings.ridge)
    if args.generic_ids:
        generic_ids = [int(x) for x in args.generic_ids.split(",")]
    else:
        generic_ids = dataset.identity_ids()
    generic = _generic_frames(dataset, generic_ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = trainer.train(
        cfg, images, (id_labels, pose_labels), generic,
        checkpoint_dir=out, log_path=out / "train_log.jsonl",
    )
    last = result.log.records[-1]
    print(
        f"trained {cfg.steps} steps -> {result.checkpoints[-1]}\n"
        f"final losses: D {last.get('loss_image_disc', 'n/a')}, R {last.get('loss_refiner')}, "
        f"C {last.get('loss_classifier', 'n/a')}, F {last.get('loss_feature_adv', 'n/a')}, "
        f"D_F {last.get('loss_feature_disc', 'n/a')}"
    )
    return 0


def cmd_refine(args, sections):
    bundle, _ = netarch.load_checkpoint(args.checkpoint)
    images, id_labels, pose_labels, grid, manifest = load_simulated_dir(Path(args.simulated))
    refined = trainer.refine_images(bundle, images, sections["sim"].noise_seed)
    save_simulated_dir(
        Path(args.out), refined, id_labels, pose_labels, grid,
        manifest["identity_ids"], refined=True,
    )
    print(f"refined {refined.shape[0]} faces -> {args.out}")
    return 0


def _parse_modes(args, have_checkpoint: bool):
    if args.modes:
        modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    else:
        modes = ["none", "simulated"] + (["refined"] if have_checkpoint else [])
    for m in modes:
        if m not in ("none", "simulated", "refined"):
            raise CliError(f"unknown mode {m!r}; valid: none, simulated, refined")
    if "refined" in modes and not have_checkpoint:
        raise CliError(
            "refined mode requires a trained checkpoint: pass --checkpoint <file> "
            "(train one with `facesynth train`)"
        )
    return modes


def cmd_eval_fr(args, sections):
    dataset = load_dataset(args.dataset)
    protocol: ProtocolConfig = sections["protocol"]
    modes = _parse_modes(args, bool(args.checkpoint))
    bundle = netarch.load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    embed_ids, generic_ids, pool = _identity_roles(dataset, sections["embed"], protocol)
    provider = _train_provider(dataset, embed_ids, sections["embed"])
    grid = sections["sim"].build_grid()
    reports = []
    for mode in modes:
        reports.append(
            run_protocol(
                dataset, mode, provider, grid=grid, bundle=bundle,
                config=protocol, generic_ids=generic_ids, eval_pool_ids=pool,
            )
        )
        r = reports[-1]
        print(f"{r.technique}: pAUC20 {r.pauc20_mean:.4f} +- {r.pauc20_std:.4f}, "
              f"mAP {r.map_mean:.4f} +- {r.map_std:.4f} (n_synth {r.n_synth})")
    results = {
        "kind": "fr",
        "rows": [r.row() for r in reports],
        "repetitions": {r.technique: r.repetitions for r in reports},
        "config": _echo_config(sections),
    }
    write_report(results, args.out, "json")
    if args.csv:
        write_report(results, args.csv, "csv")
    print(f"report -> {args.out}")
    return 0


def _fid_embedder(sections, bundle):
    fid_settings = sections["fid"]
    if fid_settings.embedder == "random":
        return evalsuite.RandomConvEmbedder(
            seed=fid_settings.seed, resolution=sections["dataset"].resolution
        )
    if fid_settings.embedder == "feature":
        if bundle is None:
            raise CliError("fid.embedder=feature requires --checkpoint")
        return evalsuite.FeatureNetEmbedder(bundle)
    raise ConfigError(f"fid.embedder must be random or feature, got {fid_settings.embedder!r}")


def cmd_eval_fid(args, sections):
    dataset = load_dataset(args.dataset)
    sim_settings = sections["sim"]
    fid_settings = sections["fid"]
    bundle = netarch.load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    embedder = _fid_embedder(sections, bundle)
    grid = sim_settings.build_grid()
    images, id_labels, pose_labels, angles = build_simulated_set(dataset, grid, sim_settings.ridge)
    target = _generic_frames(dataset, dataset.identity_ids())
    rng = np.random.default_rng(fid_settings.seed)
    if target.shape[0] > fid_settings.max_images:
        target = target[rng.choice(target.shape[0], fid_settings.max_images, replace=False)]
    rows = [
        {
            "technique": "simulated",
            "fid": evalsuite.fid_by_pose_bucket(images, angles, target, embedder),
            "overall": evalsuite.fid_between_image_sets(images, target, embedder),
        }
    ]
    if bundle is not None:
        refined = trainer.refine_images(bundle, images, sim_settings.noise_seed)
        rows.append(
            {
                "technique": "refined",
                "fid": evalsuite.fid_by_pose_bucket(refined, angles, target, embedder),
                "overall": evalsuite.fid_between_image_sets(refined, target, embedder),
            }
        )
    for row in rows:
        print(f"{row['technique']}: overall FID {row['overall']:.3f}, buckets {row['fid']}")
    results = {
        "kind": "fid",
        "buckets": [5, 15, 45],
        "rows": rows,
        "config": _echo_config(sections),
    }
    write_report(results, args.out, "json")
    if args.csv:
        write_report(results, args.csv, "csv")
    print(f"report -> {args.out}")
    return 0


def cmd_eval_ablate(args, sections):
    dataset = load_dataset(args.dataset)
    protocol: ProtocolConfig = sections["protocol"]
    ablate = sections["ablate"]
    base_cfg: TrainConfig = sections["train"]
    embed_ids, generic_ids, pool = _identity_roles(dataset, sections["embed"], protocol)
    provider = _train_provider(dataset, embed_ids, sections["embed"])
    grid = sections["sim"].build_grid()
    images, id_labels, pose_labels, _ = build_simulated_set(
        dataset, grid, sections["sim"].ridge, identity_ids=pool
    )
    generic = _generic_frames(dataset, generic_ids)
    eval_protocol = dataclasses.replace(protocol, repetitions=ablate.repetitions)

    def evaluate(bundle):
        report = run_protocol(
            dataset, "refined", provider, grid=grid, bundle=bundle,
            config=eval_protocol, generic_ids=generic_ids, eval_pool_ids=pool,
        )
        return {"pauc20": report.pauc20_mean, "map": report.map_mean}

    table = evalsuite.run_ablation(
        base_cfg, images, (id_labels, pose_labels), generic, evaluate,
        seeds=tuple(range(ablate.seeds)),
    )
    table["config"] = _echo_config(sections)
    for metric in table["metrics"]:
        print(f"{metric}: " + ", ".join(f"{k}={v:.4f}" for k, v in table["values"][metric].items()))
    write_report(table, args.out, "json")
    if args.csv:
        write_report(table, args.csv, "csv")
    print(f"report -> {args.out}")
    return 0


def cmd_bench(args, sections):
    bench = sections["bench"]
    table = evalsuite.bench_matching(
        list(bench.sizes),
        n_identities=bench.identities,
        n_probes=bench.probes,
        dim=bench.dim,
        seed=bench.seed,
        repeats=bench.repeats,
    )
    table["config"] = _echo_config(sections)
    for row in table["rows"]:
        print(f"gallery {row['gallery_per_identity']:4d}/identity: "
              f"median {row['median_ms']:.4f} ms (+- {row['std_ms']:.4f})")
    write_report(table, args.out, "json")
    if args.csv:
        write_report(table, args.csv, "csv")
    print(f"report -> {args.out}")
    return 0


def cmd_export_embeddings(args, sections):
    dataset = load_dataset(args.dataset)
    sim_settings = sections["sim"]
    bundle = netarch.load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    embedder = _fid_embedder(sections, bundle)
    grid = sim_settings.build_grid()
    images, id_labels, _, _ = build_simulated_set(dataset, grid, sim_settings.ridge)
    frames = _generic_frames(dataset, dataset.identity_ids())
    rng = np.random.default_rng(sections["fid"].seed)
    max_n = sections["fid"].max_images
    if frames.shape[0] > max_n:
        frames = frames[rng.choice(frames.shape[0], max_n, replace=False)]
    stacks = [images, frames]
    tags = ["simulated"] * images.shape[0] + ["real"] * frames.shape[0]
    if bundle is not None:
        refined = trainer.refine_images(bundle, images, sim_settings.noise_seed)
        stacks.append(refined)
        tags += ["refined"] * refined.shape[0]
    evalsuite.export_embeddings(np.concatenate(stacks, axis=0), tags, embedder, args.out)
    print(f"exported {len(tags)} embeddings -> {args.out}")
    return 0


# -- parser ----------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="master seed governing all randomness")


def build_parser() -> _Parser:
    parser = _Parser(prog="facesynth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_dataset = sub.add_parser("dataset", help="generate or ingest datasets")
    dsub = p_dataset.add_subparsers(dest="subcommand", required=True)
    p_gen = dsub.add_parser("gen", help="generate the procedural desk dataset")
    p_gen.add_argument("--out", required=True)
    _add_common(p_gen)
    p_gen.set_defaults(func=cmd_dataset_gen)
    p_ing = dsub.add_parser("ingest", help="validate and manifest a stills/videos tree")
    p_ing.add_argument("--root", required=True)
    _add_common(p_ing)
    p_ing.set_defaults(func=cmd_dataset_ingest)

    p_sim = sub.add_parser("simulate", help="render per-identity posed faces")
    p_sim.add_argument("--dataset", required=True)
    p_sim.add_argument("--out", required=True)
    _add_common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_train = sub.add_parser("train", help="train the refinement game")
    p_train.add_argument("--dataset", required=True)
    p_train.add_argument("--out", required=True, help="checkpoint/log directory")
    p_train.add_argument("--simulated", help="simulate output dir (default: simulate inline)")
    p_train.add_argument("--generic-ids", help="comma-separated identities for the generic set")
    _add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_ref = sub.add_parser("refine", help="refine a simulated set with a checkpoint")
    p_ref.add_argument("--checkpoint", required=True)
    p_ref.add_argument("--simulated", required=True)
    p_ref.add_argument("--out", required=True)
    _add_common(p_ref)
    p_ref.set_defaults(func=cmd_refine)

    p_eval = sub.add_parser("eval", help="evaluation protocols")
    esub = p_eval.add_subparsers(dest="subcommand", required=True)
    p_fr = esub.add_parser("fr", help="watch-list recognition protocol")
    p_fr.add_argument("--dataset", required=True)
    p_fr.add_argument("--out", required=True)
    p_fr.add_argument("--csv")
    p_fr.add_argument("--checkpoint")
    p_fr.add_argument("--modes", help="comma list of none,simulated,refined")
    _add_common(p_fr)
    p_fr.set_defaults(func=cmd_eval_fr)
    p_fid = esub.add_parser("fid", help="FID tables by pose bucket")
    p_fid.add_argument("--dataset", required=True)
    p_fid.add_argument("--out", required=True)
    p_fid.add_argument("--csv")
    p_fid.add_argument("--checkpoint")
    _add_common(p_fid)
    p_fid.set_defaults(func=cmd_eval_fid)
    p_abl = esub.add_parser("ablate", help="single-module-removal ablation study")
    p_abl.add_argument("--dataset", required=True)
    p_abl.add_argument("--out", required=True)
    p_abl.add_argument("--csv")
    _add_common(p_abl)
    p_abl.set_defaults(func=cmd_eval_ablate)

    p_bench = sub.add_parser("bench", help="matching-time benchmark")
    p_bench.add_argument("--out", required=True)
    p_bench.add_argument("--csv")
    _add_common(p_bench)
    p_bench.set_defaults(func=cmd_bench)

    p_exp = sub.add_parser("export-embeddings", help="dump tagged feature vectors (TSV)")
    p_exp.add_argument("--dataset", required=True)
    p_exp.add_argument("--out", required=True)
    p_exp.add_argument("--checkpoint")
    _add_common(p_exp)
    p_exp.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        sections = load_sections(args)
        return args.func(args, sections)
    except (
        CliError, ConfigError, DatasetError, ReportError,
        netarch.CheckpointError, FileNotFoundError, ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
