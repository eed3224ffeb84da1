"""Training objectives of the three-player game.

Sign convention: both discriminators output the probability that their input
is (or comes from) a refined image.  The printed adversarial generator terms
log(1 - D(.)) would, minimized, push D toward 1 -- the opposite of the stated
intent -- so the default implementation minimizes -log(1 - D(.)), which
drives the discriminators to classify refined inputs as generic.  The
verbatim printed form stays available behind LossConfig.strict_paper_signs
for comparison runs.

Every loss is the mean of per-sample terms; the paired discriminator losses
require equally sized refined/generic halves (the minibatch layout of the
discriminator updates), so their per-sample vector is the pairwise sum.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .netarch import (
    ConvEncoder,
    Decoder,
    FeatureClassifier,
    FeatureDiscriminator,
    ImageDiscriminator,
    ParamBundle,
    _to_image_batch,
    _to_vector_batch,
)


@dataclass
class LossConfig:
    """Weights and switches shared by the objectives."""

    lambda_reg: float = 0.5
    equilibrium_gain: float = 0.001
    equilibrium_balance: float = 0.7
    equilibrium_enabled: bool = True
    strict_paper_signs: bool = False
    prob_eps: float = 1e-7

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if not 0 < self.equilibrium_balance <= 1:
            raise ValueError("equilibrium_balance must be in (0, 1]")
        if not 0 < self.prob_eps < 0.5:
            raise ValueError("prob_eps must be in (0, 0.5)")


@dataclass
class LossValue:
    """A scalar objective with its per-sample decomposition."""

    value: float
    per_sample: np.ndarray

    def __post_init__(self):
        ps = np.asarray(self.per_sample, dtype=float).reshape(-1)
        object.__setattr__(self, "per_sample", ps)
        if ps.size and abs(self.value - ps.mean()) > 1e-9 * max(1.0, abs(self.value)):
            raise ValueError("value must equal mean(per_sample)")

    @classmethod
    def from_tensor(cls, per_sample: torch.Tensor) -> "LossValue":
        ps = per_sample.detach().double().numpy().reshape(-1)
        return cls(value=float(ps.mean()), per_sample=ps)


@contextlib.contextmanager
def frozen(*modules: nn.Module, batch_stats: bool = False):
    """Temporarily freeze parameters without touching any buffer.

    With batch_stats=False the module runs in eval mode (running statistics).
    With batch_stats=True batch-norm layers normalize with the current
    batch's statistics -- the same function the module computes during its
    own training -- while stat tracking is disabled, so not a single buffer
    changes.  Adversarial passes need batch_stats=True: a frozen opponent
    must be the function the opponent actually trains as, otherwise the
    generator optimizes against a stale normalization of the discriminator.
    """
    saved = []
    for m in modules:
        flags = [p.requires_grad for p in m.parameters()]
        bn_state = [
            (bn, bn.training, bn.track_running_stats)
            for bn in m.modules()
            if isinstance(bn, nn.modules.batchnorm._BatchNorm)
        ]
        saved.append((m, m.training, flags, bn_state))
        if batch_stats:
            m.train()
            for bn, _, _ in bn_state:
                bn.track_running_stats = False
        else:
            m.eval()
        m.requires_grad_(False)
    try:
        yield
    finally:
        for m, training, flags, bn_state in saved:
            m.train(training)
            for bn, bn_training, bn_track in bn_state:
                bn.training = bn_training
                bn.track_running_stats = bn_track
            for p, flag in zip(m.parameters(), flags):
                p.requires_grad_(flag)


def _clamped_log(p: torch.Tensor, eps: float) -> torch.Tensor:
    return torch.log(p.clamp(eps, 1.0 - eps))


def binary_disc_terms(
    p_refined: torch.Tensor, p_generic: torch.Tensor, eps: float = 1e-7
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample cross-entropy halves of a refined-vs-generic discriminator.

    The discriminator minimizes mean(-log p_refined) + mean(-log(1 - p_generic)).
    """
    return -_clamped_log(p_refined, eps), -_clamped_log(1.0 - p_generic, eps)


def _pairwise_loss_value(ps_a: torch.Tensor, ps_b: torch.Tensor) -> LossValue:
    if ps_a.shape[0] != ps_b.shape[0]:
        raise ValueError("refined and generic batches must be the same length")
    return LossValue.from_tensor(ps_a + ps_b)


def _check_nonempty(*batches: torch.Tensor) -> None:
    for b in batches:
        if b.shape[0] == 0:
            raise ValueError("empty batch")


# -- torch-level terms (differentiable, freeze-aware) --------------------------


def disc_image_terms(
    disc: ImageDiscriminator,
    refined: torch.Tensor,
    generic: torch.Tensor,
    eps: float = 1e-7,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Image-discriminator loss halves; callers detach the refined batch."""
    return binary_disc_terms(disc(refined), disc(generic), eps)


def refiner_terms(
    modules: ParamBundle | dict[str, nn.Module],
    simulated: torch.Tensor,
    noise: torch.Tensor,
    cfg: LossConfig,
    include_realism: bool = True,
    opponent_batch_stats: bool = False,
) -> dict[str, torch.Tensor]:
    """One refiner forward shared by the realism and regularization terms.

    Gradients reach only the refiner parameters: the image discriminator and
    the feature extractor are frozen for the duration.  Accepts a ParamBundle
    or a {refiner_encoder, refiner_decoder, image_disc, feature_net} dict.
    With include_realism off (image discriminator ablated) the realism half
    is skipped entirely and returned as zeros.
    """
    if isinstance(modules, ParamBundle):
        enc, dec = modules.refiner_encoder, modules.refiner_decoder
        disc, fnet = modules.image_disc, modules.feature_net
    else:
        enc, dec = modules["refiner_encoder"], modules["refiner_decoder"]
        disc, fnet = modules["image_disc"], modules["feature_net"]
    refined = dec(torch.cat([enc(simulated), noise], dim=1))
    with frozen(disc, fnet, batch_stats=opponent_batch_stats):
        if include_realism:
            p = disc(refined)
            if cfg.strict_paper_signs:
                realism = _clamped_log(1.0 - p, cfg.prob_eps)
            else:
                realism = -_clamped_log(1.0 - p, cfg.prob_eps)
        else:
            realism = torch.zeros(refined.shape[0], dtype=refined.dtype)
        f_refined = fnet(refined)
        with torch.no_grad():
            f_simulated = fnet(simulated)
        reg = (f_refined - f_simulated).norm(dim=1)
    return {"realism": realism, "regularization": reg, "refined": refined}


def classifier_terms(
    classifier: FeatureClassifier,
    feature_net: ConvEncoder,
    images: torch.Tensor,
    identities: torch.Tensor,
    poses: torch.Tensor,
) -> torch.Tensor:
    """Per-sample identity + pose cross-entropy through the feature extractor."""
    spec = classifier.spec
    if identities.min() < 0 or identities.max() >= spec.identity_count:
        raise ValueError(f"identity label outside [0, {spec.identity_count})")
    if poses.min() < 0 or poses.max() >= spec.pose_count:
        raise ValueError(f"pose label outside [0, {spec.pose_count})")
    feats = feature_net(images)
    li, lp = classifier.logits(feats)
    if spec.joint_classifier:
        joint = li.flatten(1)
        target = identities * spec.pose_count + poses
        return nn.functional.cross_entropy(joint, target, reduction="none")
    ce_i = nn.functional.cross_entropy(li, identities, reduction="none")
    ce_p = nn.functional.cross_entropy(lp, poses, reduction="none")
    return ce_i + ce_p


def disc_feature_terms(
    feature_disc: FeatureDiscriminator,
    feature_net: ConvEncoder,
    refined: torch.Tensor,
    generic: torch.Tensor,
    eps: float = 1e-7,
    opponent_batch_stats: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Feature-discriminator loss halves; the feature extractor is frozen."""
    with frozen(feature_net, batch_stats=opponent_batch_stats):
        f_r = feature_net(refined)
        f_g = feature_net(generic)
    return binary_disc_terms(feature_disc(f_r), feature_disc(f_g), eps)


def feature_adversarial_terms(
    feature_net: ConvEncoder,
    feature_disc: FeatureDiscriminator,
    refined: torch.Tensor,
    cfg: LossConfig,
    opponent_batch_stats: bool = False,
) -> torch.Tensor:
    """Adversarial term training the extractor toward domain invariance.

    The feature discriminator is frozen; minimizing -log(1 - D_F(F(refined)))
    pushes refined-image features into the generic region.
    """
    with frozen(feature_disc, batch_stats=opponent_batch_stats):
        p = feature_disc(feature_net(refined))
    if cfg.strict_paper_signs:
        return _clamped_log(1.0 - p, cfg.prob_eps)
    return -_clamped_log(1.0 - p, cfg.prob_eps)


# -- public numpy-facing losses -------------------------------------------------


def _module_dtype(module: nn.Module):
    p = next(module.parameters(), None)
    return p.dtype if p is not None else torch.float32


def _images(x, module) -> torch.Tensor:
    t, _ = _to_image_batch(x, module.spec, dtype=_module_dtype(module))
    return t


def _noises(z, module) -> torch.Tensor:
    t, _ = _to_vector_batch(z, module.spec.noise_dim, "noise", dtype=_module_dtype(module))
    return t


def loss_discriminator_image(
    disc: ImageDiscriminator, refined, generic, cfg: LossConfig | None = None
) -> LossValue:
    """Image-discriminator objective over paired refined/generic batches."""
    cfg = cfg or LossConfig()
    r, g = _images(refined, disc), _images(generic, disc)
    _check_nonempty(r, g)
    disc.eval()
    with torch.no_grad():
        ps_r, ps_g = disc_image_terms(disc, r, g, cfg.prob_eps)
    return _pairwise_loss_value(ps_r, ps_g)


def loss_realism(
    bundle: ParamBundle, simulated, noise, cfg: LossConfig | None = None
) -> LossValue:
    cfg = cfg or LossConfig()
    y = _images(simulated, bundle.refiner_encoder)
    z = _noises(noise, bundle.refiner_decoder)
    _check_nonempty(y)
    bundle.eval_()
    with torch.no_grad():
        terms = refiner_terms(bundle, y, z, cfg)
    return LossValue.from_tensor(terms["realism"])


def loss_regularization(
    bundle: ParamBundle, simulated, noise, cfg: LossConfig | None = None
) -> LossValue:
    cfg = cfg or LossConfig()
    y = _images(simulated, bundle.refiner_encoder)
    z = _noises(noise, bundle.refiner_decoder)
    _check_nonempty(y)
    bundle.eval_()
    with torch.no_grad():
        terms = refiner_terms(bundle, y, z, cfg)
    return LossValue.from_tensor(terms["regularization"])


def loss_refiner(
    bundle: ParamBundle, simulated, noise, cfg: LossConfig | None = None
) -> LossValue:
    """Realism plus lambda-weighted feature regularization (one forward)."""
    cfg = cfg or LossConfig()
    y = _images(simulated, bundle.refiner_encoder)
    z = _noises(noise, bundle.refiner_decoder)
    _check_nonempty(y)
    bundle.eval_()
    with torch.no_grad():
        terms = refiner_terms(bundle, y, z, cfg)
    return LossValue.from_tensor(terms["realism"] + cfg.lambda_reg * terms["regularization"])


def _label_tensors(identities, poses) -> tuple[torch.Tensor, torch.Tensor]:
    return (
        torch.as_tensor(np.asarray(identities), dtype=torch.long),
        torch.as_tensor(np.asarray(poses), dtype=torch.long),
    )


def loss_classifier(
    classifier: FeatureClassifier,
    feature_net: ConvEncoder,
    images,
    identities,
    poses,
) -> LossValue:
    """Identity/pose supervision on (simulated union refined) images."""
    x = _images(images, feature_net)
    _check_nonempty(x)
    ids, pps = _label_tensors(identities, poses)
    classifier.eval()
    feature_net.eval()
    with torch.no_grad():
        ps = classifier_terms(classifier, feature_net, x, ids, pps)
    return LossValue.from_tensor(ps)


def loss_discriminator_feature(
    feature_disc: FeatureDiscriminator,
    feature_net: ConvEncoder,
    refined,
    generic,
    cfg: LossConfig | None = None,
) -> LossValue:
    cfg = cfg or LossConfig()
    r, g = _images(refined, feature_net), _images(generic, feature_net)
    _check_nonempty(r, g)
    feature_disc.eval()
    feature_net.eval()
    with torch.no_grad():
        ps_r, ps_g = disc_feature_terms(feature_disc, feature_net, r, g, cfg.prob_eps)
    return _pairwise_loss_value(ps_r, ps_g)


def loss_feature_adversarial(
    feature_net: ConvEncoder,
    feature_disc: FeatureDiscriminator,
    refined,
    cfg: LossConfig | None = None,
) -> LossValue:
    cfg = cfg or LossConfig()
    r = _images(refined, feature_net)
    _check_nonempty(r)
    feature_net.eval()
    feature_disc.eval()
    with torch.no_grad():
        ps = feature_adversarial_terms(feature_net, feature_disc, r, cfg)
    return LossValue.from_tensor(ps)


def equilibrium_update(
    k_t: float, loss_real_term: float, loss_fake_term: float, cfg: LossConfig
) -> tuple[float, float]:
    """Proportional control balancing the discriminator's two loss halves.

    k_{t+1} = clamp(k_t + gain * (balance * real - fake), 0, 1); the
    discriminator then trains on real + k_{t+1} * fake.  With the gain at
    zero (or the controller disabled) the weighting is inert.
    """
    if not 0.0 <= k_t <= 1.0:
        raise ValueError("k_t must be in [0, 1]")
    real = float(loss_real_term)
    fake = float(loss_fake_term)
    k_next = k_t + cfg.equilibrium_gain * (cfg.equilibrium_balance * real - fake)
    k_next = min(max(k_next, 0.0), 1.0)
    return k_next, real + k_next * fake


# -- finite-difference gradient checking ----------------------------------------


def finite_difference_gradcheck(
    make_loss,
    modules: dict[str, nn.Module],
    check: list[str] | None = None,
    n_coords: int = 40,
    rel_step: float = 1e-5,
    seed: int = 0,
    rel_floor: float = 1e-2,
    fd_dtype: torch.dtype = torch.float64,
) -> np.ndarray:
    """Compare autograd gradients of a loss against central finite differences.

    make_loss(modules_dict) must rebuild the (deterministic) scalar loss from
    the given modules on every call; data closed over by the builder should be
    cast to the modules' dtype inside it.  Autograd runs on the given modules;
    the differences are evaluated on an fd_dtype deep copy, keeping the oracle
    noise floor far below single-precision gradient magnitudes.  Everything
    runs in eval mode so repeated forwards are side-effect free.

    check selects which entries' gradients are verified (default: all).
    Returns one error per sampled coordinate:
    |fd - autograd| / max(|fd|, |autograd|, rel_floor); the floor keeps
    near-zero-gradient coordinates from drowning the summary in float noise
    while a missing or wrongly-signed term still registers.
    """
    import copy as _copy

    check = list(modules) if check is None else check
    for m in modules.values():
        m.eval()
    params = []
    for name in check:
        for pname, p in modules[name].named_parameters():
            if p.requires_grad:
                params.append((name, pname, p))
    for _, _, p in params:
        p.grad = None
    loss = make_loss(modules)
    loss.backward()
    grads = {
        (name, pname): (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
        for name, pname, p in params
    }

    clone = {name: _copy.deepcopy(m).to(fd_dtype).eval() for name, m in modules.items()}
    clone_params = {
        (name, pname): p
        for name in check
        for pname, p in clone[name].named_parameters()
    }

    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for _, _, p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    errors = []
    with torch.no_grad():
        for pick in picks:
            pi = int(np.searchsorted(offsets, pick, side="right") - 1)
            name, pname, p = params[pi]
            idx = np.unravel_index(int(pick - offsets[pi]), p.shape)
            cp = clone_params[(name, pname)]
            orig = cp[idx].item()
            h = rel_step * max(1.0, abs(orig))
            cp[idx] = orig + h
            plus = float(make_loss(clone))
            cp[idx] = orig - h
            minus = float(make_loss(clone))
            cp[idx] = orig
            fd = (plus - minus) / (2 * h)
            an = float(grads[(name, pname)][idx])
            errors.append(abs(fd - an) / max(abs(fd), abs(an), rel_floor))
    return np.array(errors)
