"""Alternating optimization of the three-player refinement game.

Each training step runs, in order:
  (1) image discriminator on a fresh refined/generic pair (equilibrium-weighted),
  (2) refiner on realism + lambda * feature regularization,
  (3) classifier + feature extractor jointly on simulated-union-refined,
  (4) feature extractor on the feature-adversarial term,
  (5) feature discriminator on refined/generic features.

Frozen players run in eval mode with requires_grad off, so a sub-step can
change nothing outside its designated parameter set -- bit-exactly.  All
randomness (batch indices, noise) flows from one numpy generator whose state
is checkpointed, making interrupted and straight runs bitwise identical.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .netarch import (
    NetSpec,
    ParamBundle,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .shape3d import PoseIdentityLabel, SimulatedFace


class TrainingDiverged(RuntimeError):
    """A player produced a non-finite loss; message names player and step."""


@dataclass
class TrainConfig:
    steps: int = 100
    batch_size: int = 16
    resolution: int = 32
    channel_base: int = 8
    noise_dim: int = 16
    identity_count: int | None = None  # None: inferred from labels
    pose_count: int | None = None
    optimizer: str = "adam"
    lr_refiner: float = 2e-4
    lr_image_disc: float = 2e-4
    lr_feature: float = 2e-4
    lr_classifier: float = 2e-4
    lr_feature_disc: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    sgd_momentum: float = 0.9
    seed: int = 0
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    inner_image_disc: int = 1
    inner_refiner: int = 1
    inner_classifier: int = 1
    inner_feature_disc: int = 1
    checkpoint_interval: int = 0  # 0: final checkpoint only
    share_image_disc_encoder: bool = False
    joint_classifier: bool = False
    threads: int = 0  # 0: leave torch's default
    # ablation: remove one module and every loss computed through it
    ablate_module: str | None = None  # one of None, "D_R", "D_F", "C"

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        for name in ("lr_refiner", "lr_image_disc", "lr_feature", "lr_classifier", "lr_feature_disc"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")
        if self.ablate_module not in (None, "D_R", "D_F", "C"):
            raise ValueError("ablate_module must be one of None, D_R, D_F, C")
        if isinstance(self.loss, dict):
            self.loss = L.LossConfig(**self.loss)

    def netspec(self, identity_count: int, pose_count: int) -> NetSpec:
        return NetSpec(
            resolution=self.resolution,
            noise_dim=self.noise_dim,
            identity_count=identity_count,
            pose_count=pose_count,
            channel_base=self.channel_base,
            share_image_disc_encoder=self.share_image_disc_encoder,
            joint_classifier=self.joint_classifier,
        )


PLAYERS = ("image_disc", "refiner", "classifier", "feature_net", "feature_disc")

_PLAYER_MODULES = {
    "refiner": ("refiner_encoder", "refiner_decoder"),
    "image_disc": ("image_disc",),
    "feature_net": ("feature_net",),
    "classifier": ("classifier",),
    "feature_disc": ("feature_disc",),
}


@dataclass
class TrainLog:
    """Per-step records; wall_ms is the only nondeterministic field."""

    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def deterministic_records(self) -> list[dict]:
        return [{k: v for k, v in r.items() if k != "wall_ms"} for r in self.records]

    def to_jsonl(self, path: Path | str) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path: Path | str) -> "TrainLog":
        records = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
        return cls(records=records)

    def series(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records])


@dataclass
class TrainResult:
    bundle: ParamBundle
    log: TrainLog
    checkpoints: list[Path]
    k_t: float


def stack_faces(faces: list[SimulatedFace]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SimulatedFace list -> (images, identity labels, pose labels)."""
    images = np.stack([f.image for f in faces])
    ids = np.array([f.label.identity for f in faces], dtype=np.int64)
    poses = np.array([f.label.pose for f in faces], dtype=np.int64)
    return images, ids, poses


def _prepare_data(config, simulated, labels, generic):
    if isinstance(simulated, list) and simulated and isinstance(simulated[0], SimulatedFace):
        simulated, ids, poses = stack_faces(simulated)
    else:
        ids, poses = labels
    sim = np.asarray(simulated, dtype=np.float32)
    gen = np.asarray(generic, dtype=np.float32)
    ids = np.asarray(ids, dtype=np.int64)
    poses = np.asarray(poses, dtype=np.int64)
    if sim.ndim != 3 or gen.ndim != 3:
        raise ValueError("simulated and generic must be (n, H, W) image stacks")
    if sim.shape[0] == 0 or gen.shape[0] == 0:
        raise ValueError("simulated and generic sets must be non-empty")
    res = config.resolution
    if sim.shape[1:] != (res, res) or gen.shape[1:] != (res, res):
        raise ValueError(
            f"data resolution {sim.shape[1:]} / {gen.shape[1:]} does not match config {res}"
        )
    if ids.shape[0] != sim.shape[0] or poses.shape[0] != sim.shape[0]:
        raise ValueError("labels must align with the simulated set")
    k = config.identity_count or int(ids.max()) + 1
    p = config.pose_count or int(poses.max()) + 1
    if ids.min() < 0 or ids.max() >= k or poses.min() < 0 or poses.max() >= p:
        raise ValueError("labels out of range for the configured class counts")
    sim_t = torch.from_numpy(sim)[:, None]
    gen_t = torch.from_numpy(gen)[:, None]
    return sim_t, torch.from_numpy(ids), torch.from_numpy(poses), gen_t, k, p


def _make_optimizers(bundle: ParamBundle, config: TrainConfig) -> dict[str, torch.optim.Optimizer]:
    groups = {
        "refiner": (
            list(bundle.refiner_encoder.parameters()) + list(bundle.refiner_decoder.parameters()),
            config.lr_refiner,
        ),
        "image_disc": (list(bundle.image_disc.parameters()), config.lr_image_disc),
        "feature_net": (list(bundle.feature_net.parameters()), config.lr_feature),
        "classifier": (list(bundle.classifier.parameters()), config.lr_classifier),
        "feature_disc": (list(bundle.feature_disc.parameters()), config.lr_feature_disc),
    }
    opts = {}
    for name, (params, lr) in groups.items():
        if config.optimizer == "adam":
            opts[name] = torch.optim.Adam(params, lr=lr, betas=(config.adam_beta1, config.adam_beta2))
        else:
            opts[name] = torch.optim.SGD(params, lr=lr, momentum=config.sgd_momentum)
    return opts


def _set_active(bundle: ParamBundle, active: tuple[str, ...]) -> None:
    """Active players train with gradients; everyone else is eval + frozen."""
    for player, modules in _PLAYER_MODULES.items():
        on = player in active
        for mname in modules:
            mod = getattr(bundle, mname)
            mod.train(on)
            mod.requires_grad_(on)


def _grad_norm(bundle: ParamBundle, player: str) -> float:
    total = 0.0
    for mname in _PLAYER_MODULES[player]:
        for p in getattr(bundle, mname).parameters():
            if p.grad is not None:
                total += float(p.grad.double().pow(2).sum())
    return float(np.sqrt(total))


def _check_finite(value: torch.Tensor, player: str, step: int) -> None:
    if not bool(torch.isfinite(value)):
        raise TrainingDiverged(f"non-finite loss in player '{player}' at step {step}")


def _snapshot_all(bundle: ParamBundle) -> dict[str, dict[str, torch.Tensor]]:
    return {name: bundle.snapshot(name) for name in _PLAYER_MODULES["refiner"] + (
        "image_disc", "feature_net", "classifier", "feature_disc")}


def _assert_isolated(before, after, allowed: set[str], player: str, step: int) -> None:
    for mname, state in before.items():
        changed = any(not torch.equal(state[k], after[mname][k]) for k in state)
        if mname in allowed:
            continue
        if changed:
            raise AssertionError(
                f"player isolation violated: '{player}' update at step {step} changed {mname}"
            )


def _run_loop(
    bundle: ParamBundle,
    opts: dict[str, torch.optim.Optimizer],
    rng: np.random.Generator,
    k_t: float,
    config: TrainConfig,
    data,
    start_step: int,
    n_steps: int,
    checkpoint_dir: Path | None,
    log: TrainLog,
    check_isolation: bool = False,
) -> TrainResult:
    sim, ids, poses, gen, _, _ = data
    cfg = config.loss
    eps = cfg.prob_eps
    n_sim, n_gen = sim.shape[0], gen.shape[0]
    b = config.batch_size
    checkpoints: list[Path] = []

    def noise(n):
        return torch.from_numpy(rng.uniform(-1.0, 1.0, size=(n, config.noise_dim)).astype(np.float32))

    def sample_sim(n):
        return torch.from_numpy(rng.integers(0, n_sim, size=n))

    def sample_gen(n):
        return torch.from_numpy(rng.integers(0, n_gen, size=n))

    def refined_batch(idx, z):
        # sample from the train-mode generator function (batch-stat BN) so
        # the discriminators see the distribution the refiner actually emits
        # during its updates; no buffers move (the refiner is frozen here)
        with torch.no_grad(), L.frozen(
            bundle.refiner_encoder, bundle.refiner_decoder, batch_stats=True
        ):
            return bundle.refiner_decoder(
                torch.cat([bundle.refiner_encoder(sim[idx]), z], dim=1)
            )

    def save(step):
        path = checkpoint_dir / f"checkpoint_{step:07d}.ckpt"
        save_checkpoint(
            path,
            bundle,
            optimizer_states={name: opt.state_dict() for name, opt in opts.items()},
            rng_state={"numpy": rng.bit_generator.state},
            trainer_state={"k_t": k_t, "config": dataclasses.asdict(config)},
        )
        checkpoints.append(path)

    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    ablate = config.ablate_module

    for step in range(start_step + 1, start_step + n_steps + 1):
        t0 = time.perf_counter()
        record: dict = {"step": step}

        # (1) image discriminator (with equilibrium weighting)
        if ablate != "D_R":
            for _ in range(config.inner_image_disc):
                before = _snapshot_all(bundle) if check_isolation else None
                _set_active(bundle, ("image_disc",))
                z = noise(b)
                refined = refined_batch(sample_sim(b), z)
                ps_fake, ps_real = L.disc_image_terms(
                    bundle.image_disc, refined, gen[sample_gen(b)], eps
                )
                term_fake = ps_fake.mean()
                term_real = ps_real.mean()
                _check_finite(term_fake + term_real, "image_disc", step)
                if cfg.equilibrium_enabled:
                    k_t, _ = L.equilibrium_update(
                        k_t, float(term_real.detach()), float(term_fake.detach()), cfg
                    )
                    loss_d = term_real + k_t * term_fake
                else:
                    loss_d = term_real + term_fake
                opts["image_disc"].zero_grad()
                loss_d.backward()
                record["grad_norm_image_disc"] = _grad_norm(bundle, "image_disc")
                opts["image_disc"].step()
                if check_isolation:
                    _assert_isolated(
                        before, _snapshot_all(bundle), {"image_disc"}, "image_disc", step
                    )
            record.update(
                loss_image_disc=float(loss_d.detach()),
                term_refined=float(term_fake.detach()),
                term_generic=float(term_real.detach()),
                k_t=k_t,
            )

        # (2) refiner
        for _ in range(config.inner_refiner):
            before = _snapshot_all(bundle) if check_isolation else None
            _set_active(bundle, ("refiner",))
            idx = sample_sim(b)
            terms = L.refiner_terms(
                bundle, sim[idx], noise(b), cfg,
                include_realism=ablate != "D_R", opponent_batch_stats=True,
            )
            reg = terms["regularization"].mean()
            if ablate == "D_R":
                realism = torch.zeros(())
                loss_r = cfg.lambda_reg * reg
            else:
                realism = terms["realism"].mean()
                loss_r = realism + cfg.lambda_reg * reg
            _check_finite(loss_r, "refiner", step)
            opts["refiner"].zero_grad()
            loss_r.backward()
            record["grad_norm_refiner"] = _grad_norm(bundle, "refiner")
            opts["refiner"].step()
            if check_isolation:
                _assert_isolated(
                    before, _snapshot_all(bundle),
                    {"refiner_encoder", "refiner_decoder"}, "refiner", step,
                )
        record.update(
            loss_refiner=float(loss_r.detach()), loss_realism=float(realism.detach()), loss_regularization=float(reg.detach())
        )

        # shared refined batch (post-refiner-update) for players (3)-(5)
        _set_active(bundle, ())
        idx3 = sample_sim(b)
        z3 = noise(b)
        refined3 = refined_batch(idx3, z3)

        # (3) classifier + feature extractor
        if ablate != "C":
            for _ in range(config.inner_classifier):
                before = _snapshot_all(bundle) if check_isolation else None
                _set_active(bundle, ("classifier", "feature_net"))
                union = torch.cat([sim[idx3], refined3], dim=0)
                union_ids = torch.cat([ids[idx3], ids[idx3]])
                union_poses = torch.cat([poses[idx3], poses[idx3]])
                ps_c = L.classifier_terms(
                    bundle.classifier, bundle.feature_net, union, union_ids, union_poses
                )
                loss_c = ps_c.mean()
                _check_finite(loss_c, "classifier", step)
                opts["classifier"].zero_grad()
                opts["feature_net"].zero_grad()
                loss_c.backward()
                record["grad_norm_classifier"] = _grad_norm(bundle, "classifier")
                opts["classifier"].step()
                opts["feature_net"].step()
                if check_isolation:
                    _assert_isolated(
                        before, _snapshot_all(bundle),
                        {"classifier", "feature_net"}, "classifier+feature", step,
                    )
            record["loss_classifier"] = float(loss_c.detach())

        # (4) feature extractor vs. frozen feature discriminator
        if ablate != "D_F":
            for _ in range(config.inner_classifier):
                before = _snapshot_all(bundle) if check_isolation else None
                _set_active(bundle, ("feature_net",))
                ps_f = L.feature_adversarial_terms(
                    bundle.feature_net, bundle.feature_disc, refined3, cfg,
                    opponent_batch_stats=True,
                )
                loss_f = ps_f.mean()
                _check_finite(loss_f, "feature_net", step)
                opts["feature_net"].zero_grad()
                loss_f.backward()
                record["grad_norm_feature_net"] = _grad_norm(bundle, "feature_net")
                opts["feature_net"].step()
                if check_isolation:
                    _assert_isolated(
                        before, _snapshot_all(bundle), {"feature_net"}, "feature_net", step
                    )
            record["loss_feature_adv"] = float(loss_f.detach())

        # (5) feature discriminator
        if ablate != "D_F":
            for _ in range(config.inner_feature_disc):
                before = _snapshot_all(bundle) if check_isolation else None
                _set_active(bundle, ("feature_disc",))
                ps_fr, ps_fg = L.disc_feature_terms(
                    bundle.feature_disc, bundle.feature_net, refined3, gen[sample_gen(b)], eps,
                    opponent_batch_stats=True,
                )
                loss_df = ps_fr.mean() + ps_fg.mean()
                _check_finite(loss_df, "feature_disc", step)
                opts["feature_disc"].zero_grad()
                loss_df.backward()
                record["grad_norm_feature_disc"] = _grad_norm(bundle, "feature_disc")
                opts["feature_disc"].step()
                if check_isolation:
                    _assert_isolated(
                        before, _snapshot_all(bundle), {"feature_disc"}, "feature_disc", step
                    )
            record["loss_feature_disc"] = float(loss_df.detach())

        bundle.step = step
        record["wall_ms"] = (time.perf_counter() - t0) * 1000.0
        log.append(record)
        if checkpoint_dir is not None and config.checkpoint_interval > 0:
            if step % config.checkpoint_interval == 0 and step < start_step + n_steps:
                save(step)

    _set_active(bundle, ())
    bundle.eval_()
    if checkpoint_dir is not None:
        save(start_step + n_steps)
    return TrainResult(bundle=bundle, log=log, checkpoints=checkpoints, k_t=k_t)


def train(
    config: TrainConfig,
    simulated,
    labels=None,
    generic=None,
    checkpoint_dir: Path | str | None = None,
    log_path: Path | str | None = None,
    check_isolation: bool = False,
) -> TrainResult:
    """Train the game from scratch; deterministic in (config, data, seed).

    simulated may be an (M, H, W) array with labels=(identities, poses) or a
    list of SimulatedFace.  generic is an unlabeled (L, H, W) array of
    target-domain images.
    """
    torch.use_deterministic_algorithms(True)
    if config.threads > 0:
        torch.set_num_threads(config.threads)
    data = _prepare_data(config, simulated, labels, generic)
    k, p = data[4], data[5]
    bundle = init_params(config.netspec(k, p), config.seed)
    opts = _make_optimizers(bundle, config)
    rng = np.random.default_rng(config.seed)
    k_init = 0.0 if config.loss.equilibrium_enabled else 1.0
    result = _run_loop(
        bundle, opts, rng, k_init, config, data,
        start_step=0, n_steps=config.steps,
        checkpoint_dir=Path(checkpoint_dir) if checkpoint_dir else None,
        log=TrainLog(), check_isolation=check_isolation,
    )
    if log_path is not None:
        result.log.to_jsonl(log_path)
    return result


def resume(
    checkpoint_path: Path | str,
    simulated,
    labels=None,
    generic=None,
    steps: int | None = None,
    checkpoint_dir: Path | str | None = None,
    log_path: Path | str | None = None,
) -> TrainResult:
    """Continue training from a checkpoint, bitwise-identically to a straight run.

    steps is the number of additional steps (default: the configured total
    minus the checkpoint's step count).
    """
    torch.use_deterministic_algorithms(True)
    bundle, extras = load_checkpoint(checkpoint_path)
    trainer_state = extras.get("trainer") or {}
    if "config" not in trainer_state:
        raise ValueError(f"{checkpoint_path} carries no trainer state; cannot resume")
    config = TrainConfig(**trainer_state["config"])
    if config.threads > 0:
        torch.set_num_threads(config.threads)
    data = _prepare_data(config, simulated, labels, generic)
    opts = _make_optimizers(bundle, config)
    for name, opt in opts.items():
        saved = extras["optimizers"].get(name)
        if saved and saved["state"]:
            opt.load_state_dict({"state": saved["state"], "param_groups": saved["param_groups"]})
    rng = np.random.default_rng()
    rng.bit_generator.state = extras["numpy_rng"]
    n_steps = steps if steps is not None else max(config.steps - bundle.step, 0)
    result = _run_loop(
        bundle, opts, rng, float(trainer_state.get("k_t", 0.0)), config, data,
        start_step=bundle.step, n_steps=n_steps,
        checkpoint_dir=Path(checkpoint_dir) if checkpoint_dir else None,
        log=TrainLog(),
    )
    if log_path is not None:
        result.log.to_jsonl(log_path)
    return result


def refine_images(bundle: ParamBundle, images: np.ndarray, noise_seed: int) -> np.ndarray:
    """Refine an image stack with per-image noise drawn from noise_seed."""
    bundle.eval_()
    imgs = np.asarray(images, dtype=np.float32)
    rng = np.random.default_rng(noise_seed)
    out = []
    with torch.no_grad():
        for start in range(0, imgs.shape[0], 64):
            chunk = torch.from_numpy(imgs[start : start + 64])[:, None]
            z = torch.from_numpy(
                rng.uniform(-1, 1, size=(chunk.shape[0], bundle.spec.noise_dim)).astype(np.float32)
            )
            refined = bundle.refiner_decoder(
                torch.cat([bundle.refiner_encoder(chunk), z], dim=1)
            )
            out.append(refined.squeeze(1).numpy())
    return np.concatenate(out, axis=0)


def refine_gallery(
    bundle: ParamBundle, faces: list[SimulatedFace], noise_seed: int
) -> list[SimulatedFace]:
    """One refined face per simulated face, labels carried over unchanged."""
    if not faces:
        return []
    images, _, _ = stack_faces(faces)
    if images.shape[1] != bundle.spec.resolution:
        raise ValueError(
            f"faces are {images.shape[1]}px but the bundle expects {bundle.spec.resolution}px"
        )
    refined = refine_images(bundle, images, noise_seed)
    return [
        SimulatedFace(image=refined[i], label=f.label, source_id=f.source_id)
        for i, f in enumerate(faces)
    ]
