"""Network definitions for the three-player refinement game.

Five parameter sets: the refiner encoder/decoder pair, an image
discriminator sharing the encoder topology plus a 1-unit logistic head, a
feature extractor with the encoder topology, a two-layer MLP feature
discriminator, and a two-layer MLP identity/pose classifier.

The channel plan is the published 14-conv encoder / 15-deconv decoder at
channel_base 32 (feature width 10 * base = 320); smaller bases keep the
structure and shrink every width proportionally for CPU-scale runs.  At
resolution 96 and base 32 the intermediate activation sizes reproduce the
reference table row for row (see tests).
"""

from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

SUPPORTED_RESOLUTIONS = (32, 96)

# (name, channel multiplier, stride) per encoder conv; channels = mult * base.
ENC_PLAN = (
    ("conv11", 1, 1),
    ("conv12", 2, 1),
    ("conv21", 2, 2),
    ("conv22", 2, 1),
    ("conv23", 4, 1),
    ("conv31", 4, 2),
    ("conv32", 3, 1),
    ("conv33", 6, 1),
    ("conv41", 6, 2),
    ("conv42", 4, 1),
    ("conv43", 8, 1),
    ("conv51", 8, 2),
    ("conv52", 5, 1),
    ("conv53", 10, 1),
)

# Decoder rows after the seed expansion; stride 2 rows are the fractionally
# strided upsampling steps.  The final row emits the 1-channel image.
DEC_PLAN = (
    ("fconv52", 5, 1),
    ("fconv51", 8, 1),
    ("fconv43", 8, 2),
    ("fconv42", 4, 1),
    ("fconv41", 6, 1),
    ("fconv33", 6, 2),
    ("fconv32", 3, 1),
    ("fconv31", 4, 1),
    ("fconv23", 4, 2),
    ("fconv22", 2, 1),
    ("fconv21", 2, 1),
    ("fconv13", 2, 2),
    ("fconv12", 1, 1),
)

FEATURE_MULT = 10  # feature width = FEATURE_MULT * channel_base
MLP_WIDTH = 1024


class CheckpointError(RuntimeError):
    """Unreadable or corrupt checkpoint file."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported container version."""


@dataclass
class NetSpec:
    """Shared hyperparameters of the five networks."""

    resolution: int = 96
    noise_dim: int = 50
    identity_count: int = 10
    pose_count: int = 73
    channel_base: int = 32
    share_image_disc_encoder: bool = False
    joint_classifier: bool = False

    def __post_init__(self):
        if self.resolution not in SUPPORTED_RESOLUTIONS:
            raise ValueError(f"resolution must be one of {SUPPORTED_RESOLUTIONS}")
        if self.noise_dim < 1:
            raise ValueError("noise_dim must be >= 1")
        if self.channel_base < 1:
            raise ValueError("channel_base must be >= 1")
        if self.identity_count < 1 or self.pose_count < 1:
            raise ValueError("identity_count and pose_count must be >= 1")

    @property
    def feature_dim(self) -> int:
        return FEATURE_MULT * self.channel_base

    @property
    def seed_spatial(self) -> int:
        # spatial size the decoder expands the (feature+noise) vector to;
        # equals the encoder's pre-pool spatial size
        return self.resolution // 16


class ConvEncoder(nn.Module):
    """The 14-conv trunk: BN + ELU after every conv, average-pooled output."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        cin = 1
        for name, mult, stride in ENC_PLAN:
            cout = mult * spec.channel_base
            self.add_module(name, nn.Conv2d(cin, cout, 3, stride, 1))
            self.add_module(f"{name}_bn", nn.BatchNorm2d(cout))
            cin = cout
        self.pool = nn.AvgPool2d(spec.seed_spatial)
        self.act = nn.ELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for name, _, _ in ENC_PLAN:
            x = self.act(getattr(self, f"{name}_bn")(getattr(self, name)(x)))
        return self.pool(x).flatten(1)


class Decoder(nn.Module):
    """Fractionally-strided stack from (feature + noise) to a [0,1] image."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        cin = spec.feature_dim + spec.noise_dim
        cout = FEATURE_MULT * spec.channel_base
        # seed expansion: 1x1 vector map -> (seed_spatial)^2 feature map
        self.fconv53 = nn.ConvTranspose2d(cin, cout, spec.seed_spatial, 1, 0)
        self.fconv53_bn = nn.BatchNorm2d(cout)
        cin = cout
        for name, mult, stride in DEC_PLAN:
            cout = mult * spec.channel_base
            if stride == 2:
                self.add_module(name, nn.ConvTranspose2d(cin, cout, 3, 2, 1, output_padding=1))
            else:
                self.add_module(name, nn.ConvTranspose2d(cin, cout, 3, 1, 1))
            self.add_module(f"{name}_bn", nn.BatchNorm2d(cout))
            cin = cout
        self.fconv11 = nn.ConvTranspose2d(cin, 1, 3, 1, 1)
        self.act = nn.ELU()

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        x = v[:, :, None, None]
        x = self.act(self.fconv53_bn(self.fconv53(x)))
        for name, _, _ in DEC_PLAN:
            x = self.act(getattr(self, f"{name}_bn")(getattr(self, name)(x)))
        return torch.sigmoid(self.fconv11(x))


class ImageDiscriminator(nn.Module):
    """Encoder trunk plus a 1-unit logistic head: P(input is a refined image)."""

    def __init__(self, spec: NetSpec, trunk: ConvEncoder | None = None):
        super().__init__()
        self.spec = spec
        self.trunk = trunk if trunk is not None else ConvEncoder(spec)
        self.fc = nn.Linear(spec.feature_dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc(self.trunk(x))).squeeze(-1)


class FeatureClassifier(nn.Module):
    """Two 1024-unit layers and softmax heads over identity and pose."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        self.fc1 = nn.Linear(spec.feature_dim, MLP_WIDTH)
        self.fc2 = nn.Linear(MLP_WIDTH, MLP_WIDTH)
        if spec.joint_classifier:
            self.head = nn.Linear(MLP_WIDTH, spec.identity_count * spec.pose_count)
        else:
            self.head_identity = nn.Linear(MLP_WIDTH, spec.identity_count)
            self.head_pose = nn.Linear(MLP_WIDTH, spec.pose_count)
        self.act = nn.ELU()

    def logits(self, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.act(self.fc2(self.act(self.fc1(f))))
        if self.spec.joint_classifier:
            joint = self.head(h).view(-1, self.spec.identity_count, self.spec.pose_count)
            return joint, joint
        return self.head_identity(h), self.head_pose(h)

    def forward(self, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        li, lp = self.logits(f)
        if self.spec.joint_classifier:
            joint = torch.softmax(li.flatten(1), dim=1).view_as(li)
            return joint.sum(dim=2), joint.sum(dim=1)
        return torch.softmax(li, dim=1), torch.softmax(lp, dim=1)


class FeatureDiscriminator(nn.Module):
    """Two 1024-unit layers and a 1-unit logistic head on feature vectors."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        self.fc1 = nn.Linear(spec.feature_dim, MLP_WIDTH)
        self.fc2 = nn.Linear(MLP_WIDTH, MLP_WIDTH)
        self.fc3 = nn.Linear(MLP_WIDTH, 1)
        self.act = nn.ELU()

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        h = self.act(self.fc2(self.act(self.fc1(f))))
        return torch.sigmoid(self.fc3(h)).squeeze(-1)


MODULE_NAMES = (
    "refiner_encoder",
    "refiner_decoder",
    "image_disc",
    "feature_net",
    "feature_disc",
    "classifier",
)


@dataclass
class ParamBundle:
    """The five players' parameters plus the training step counter.

    theta_R = (refiner_encoder, refiner_decoder); phi = image_disc;
    theta_F = feature_net; gamma = feature_disc; theta_C = classifier.
    """

    spec: NetSpec
    refiner_encoder: ConvEncoder
    refiner_decoder: Decoder
    image_disc: ImageDiscriminator
    feature_net: ConvEncoder
    feature_disc: FeatureDiscriminator
    classifier: FeatureClassifier
    step: int = 0

    def modules(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in MODULE_NAMES}

    def players(self) -> dict[str, list[nn.Module]]:
        """Trainable parameter sets keyed by player."""
        return {
            "refiner": [self.refiner_encoder, self.refiner_decoder],
            "image_disc": [self.image_disc],
            "feature_net": [self.feature_net],
            "feature_disc": [self.feature_disc],
            "classifier": [self.classifier],
        }

    def snapshot(self, name: str) -> dict[str, torch.Tensor]:
        """Bitwise copy of one module's parameters and buffers."""
        return {k: v.detach().clone() for k, v in getattr(self, name).state_dict().items()}

    def eval_(self) -> "ParamBundle":
        for m in self.modules().values():
            m.eval()
        return self

    def to_double(self) -> "ParamBundle":
        for m in self.modules().values():
            m.double()
        return self


def _init_module(module: nn.Module, gen: torch.Generator) -> None:
    # fan-scaled Gaussian on conv/linear weights, zero biases, unit BN scale
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            fan = m.weight[0].numel()
            with torch.no_grad():
                m.weight.normal_(0.0, 1.0 / fan**0.5, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def init_params(spec: NetSpec, seed: int) -> ParamBundle:
    """Build all six modules with weights drawn deterministically from seed."""
    gen = torch.Generator().manual_seed(int(seed))
    enc = ConvEncoder(spec)
    dec = Decoder(spec)
    disc = ImageDiscriminator(spec, trunk=enc if spec.share_image_disc_encoder else None)
    fnet = ConvEncoder(spec)
    fdisc = FeatureDiscriminator(spec)
    clf = FeatureClassifier(spec)
    for module in (enc, dec, disc, fnet, fdisc, clf):
        _init_module(module, gen)
    bundle = ParamBundle(
        spec=spec,
        refiner_encoder=enc,
        refiner_decoder=dec,
        image_disc=disc,
        feature_net=fnet,
        feature_disc=fdisc,
        classifier=clf,
    )
    return bundle.eval_()


# -- numpy-facing forward ops --------------------------------------------------


def _to_image_batch(images: np.ndarray | torch.Tensor, spec: NetSpec, dtype=None) -> tuple[torch.Tensor, bool]:
    if isinstance(images, torch.Tensor):
        t = images
    else:
        t = torch.as_tensor(np.asarray(images), dtype=dtype or torch.float32)
    single = t.dim() == 2
    if single:
        t = t[None]
    if t.dim() == 3:
        t = t[:, None]
    if t.shape[-2:] != (spec.resolution, spec.resolution):
        raise ValueError(
            f"image resolution {tuple(t.shape[-2:])} does not match spec {spec.resolution}"
        )
    if dtype is not None:
        t = t.to(dtype)
    return t, single


def _to_vector_batch(vec, dim: int, what: str, dtype=None) -> tuple[torch.Tensor, bool]:
    t = vec if isinstance(vec, torch.Tensor) else torch.as_tensor(np.asarray(vec), dtype=dtype or torch.float32)
    single = t.dim() == 1
    if single:
        t = t[None]
    if t.shape[1] != dim:
        raise ValueError(f"{what} length {t.shape[1]} != expected {dim}")
    return t, single


def _param_dtype(module: nn.Module):
    return next(module.parameters()).dtype


def encode(encoder: ConvEncoder, images) -> np.ndarray:
    """Forward a [0,1] grayscale image (or batch) to its feature vector."""
    t, single = _to_image_batch(images, encoder.spec, _param_dtype(encoder))
    encoder.eval()
    with torch.no_grad():
        out = encoder(t).numpy()
    return out[0] if single else out


def decode(decoder: Decoder, feature, noise) -> np.ndarray:
    """Synthesize an image from a feature vector concatenated with noise."""
    spec = decoder.spec
    dt = _param_dtype(decoder)
    f, single_f = _to_vector_batch(feature, spec.feature_dim, "feature", dt)
    z, single_z = _to_vector_batch(noise, spec.noise_dim, "noise", dt)
    if f.shape[0] != z.shape[0]:
        raise ValueError("feature and noise batch sizes differ")
    decoder.eval()
    with torch.no_grad():
        img = decoder(torch.cat([f, z], dim=1)).squeeze(1).numpy()
    return img[0] if (single_f and single_z) else img


def refine(bundle: ParamBundle, images, noise) -> np.ndarray:
    """decode(encode(image), noise): the full refiner forward."""
    spec = bundle.spec
    dt = _param_dtype(bundle.refiner_encoder)
    t, single_i = _to_image_batch(images, spec, dt)
    z, _ = _to_vector_batch(noise, spec.noise_dim, "noise", dt)
    if t.shape[0] != z.shape[0]:
        raise ValueError("image and noise batch sizes differ")
    bundle.refiner_encoder.eval()
    bundle.refiner_decoder.eval()
    with torch.no_grad():
        out = bundle.refiner_decoder(torch.cat([bundle.refiner_encoder(t), z], dim=1))
    out = out.squeeze(1).numpy()
    return out[0] if single_i else out


def discriminate_image(disc: ImageDiscriminator, images) -> float | np.ndarray:
    """P(image is a refined one), in (0, 1)."""
    t, single = _to_image_batch(images, disc.spec, _param_dtype(disc))
    disc.eval()
    with torch.no_grad():
        p = disc(t).numpy()
    return float(p[0]) if single else p


def extract_features(feature_net: ConvEncoder, images) -> np.ndarray:
    """Same contract as encode, on the independent feature-extractor weights."""
    return encode(feature_net, images)


def classify(classifier: FeatureClassifier, feature) -> tuple[np.ndarray, np.ndarray]:
    """Identity and pose distributions for a feature vector (or batch)."""
    spec = classifier.spec
    f, single = _to_vector_batch(feature, spec.feature_dim, "feature", _param_dtype(classifier))
    classifier.eval()
    with torch.no_grad():
        pi, pp = classifier(f)
    pi, pp = pi.numpy(), pp.numpy()
    return (pi[0], pp[0]) if single else (pi, pp)


def discriminate_feature(feature_disc: FeatureDiscriminator, feature) -> float | np.ndarray:
    """P(feature comes from a refined image), in (0, 1)."""
    spec = feature_disc.spec
    f, single = _to_vector_batch(feature, spec.feature_dim, "feature", _param_dtype(feature_disc))
    feature_disc.eval()
    with torch.no_grad():
        p = feature_disc(f).numpy()
    return float(p[0]) if single else p


def layer_output_sizes(bundle: ParamBundle) -> list[tuple[str, tuple[int, int, int]]]:
    """Measured (h, w, c) of every named conv output, pool, and heads.

    Encoder rows come first (conv11..conv53, avgpool, image-disc fc), then
    the decoder rows from the seed expansion down to the 1-channel output.
    """
    spec = bundle.spec
    sizes: list[tuple[str, tuple[int, int, int]]] = []
    hooks = []

    def record(name):
        def hook(_m, _inp, out):
            if out.dim() == 4:
                sizes.append((name, (out.shape[2], out.shape[3], out.shape[1])))
            else:
                sizes.append((name, (1, 1, out.shape[1])))
        return hook

    enc = bundle.refiner_encoder
    for name, _, _ in ENC_PLAN:
        hooks.append(getattr(enc, name).register_forward_hook(record(name)))
    hooks.append(enc.pool.register_forward_hook(record("avgpool")))
    dec = bundle.refiner_decoder
    hooks.append(dec.fconv53.register_forward_hook(record("fconv53")))
    for name, _, _ in DEC_PLAN:
        hooks.append(getattr(dec, name).register_forward_hook(record(name)))
    hooks.append(dec.fconv11.register_forward_hook(record("fconv11")))
    try:
        img = np.zeros((spec.resolution, spec.resolution), dtype=np.float32)
        feat = encode(enc, img)
        hooks.append(bundle.image_disc.fc.register_forward_hook(record("fc_disc")))
        discriminate_image(bundle.image_disc, img)
        decode(dec, feat, np.zeros(spec.noise_dim, dtype=np.float32))
    finally:
        for h in hooks:
            h.remove()
    return sizes


# -- checkpoint container ------------------------------------------------------

_MAGIC = b"FSYNCKPT"
CHECKPOINT_VERSION = 1


def _flatten_state(prefix: str, state: dict, arrays: dict[str, np.ndarray], scalars: dict) -> None:
    for key, val in state.items():
        name = f"{prefix}/{key}"
        if isinstance(val, torch.Tensor):
            arrays[name] = val.detach().cpu().numpy()
        elif isinstance(val, dict):
            _flatten_state(name, val, arrays, scalars)
        else:
            scalars[name] = val


def save_checkpoint(
    path: Path | str,
    bundle: ParamBundle,
    optimizer_states: dict[str, dict] | None = None,
    rng_state: dict | None = None,
    trainer_state: dict | None = None,
) -> None:
    """Write the whole training state as one self-describing binary file.

    Layout: magic, container version, a sorted-JSON header (spec, step,
    array directory, optimizer param groups, RNG state, trainer extras),
    then the raw little-endian array payloads back to back.  Writes are
    atomic (temp file + rename) and byte-deterministic for identical state.
    """
    arrays: dict[str, np.ndarray] = {}
    scalars: dict = {}
    for name, module in bundle.modules().items():
        if bundle.spec.share_image_disc_encoder and name == "image_disc":
            # trunk aliases refiner_encoder; persist only the head
            _flatten_state(f"module/{name}/fc", module.fc.state_dict(), arrays, scalars)
            continue
        _flatten_state(f"module/{name}", module.state_dict(), arrays, scalars)
    opt_groups = {}
    if optimizer_states:
        for name, state in optimizer_states.items():
            _flatten_state(f"optim/{name}/state", state.get("state", {}), arrays, scalars)
            opt_groups[name] = state.get("param_groups", [])
    if rng_state and "torch" in rng_state:
        arrays["rng/torch"] = np.frombuffer(bytes(rng_state["torch"]), dtype=np.uint8).copy()

    directory = []
    offset = 0
    for key in sorted(arrays):
        arr = np.ascontiguousarray(arrays[key])
        directory.append(
            {
                "key": key,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": arr.nbytes,
            }
        )
        offset += arr.nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "spec": dataclasses.asdict(bundle.spec),
        "step": bundle.step,
        "arrays": directory,
        "scalars": scalars,
        "optimizer_param_groups": opt_groups,
        "numpy_rng": rng_state.get("numpy") if rng_state else None,
        "trainer": trainer_state,
    }
    blob = io.BytesIO()
    head = json.dumps(header, sort_keys=True).encode()
    blob.write(_MAGIC)
    blob.write(len(head).to_bytes(8, "little"))
    blob.write(head)
    for entry in directory:
        blob.write(np.ascontiguousarray(arrays[entry["key"]]).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob.getvalue())
    tmp.replace(path)


def _unflatten(flat: dict[str, object], prefix: str) -> dict:
    out: dict = {}
    plen = len(prefix) + 1
    for key, val in flat.items():
        if not key.startswith(prefix + "/"):
            continue
        parts = key[plen:].split("/")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    return out


def load_checkpoint(path: Path | str) -> tuple[ParamBundle, dict]:
    """Rebuild a ParamBundle (and raw optimizer/RNG/trainer state) from a file.

    Parsing is all-or-nothing: any truncation or corruption raises before
    any state object is constructed.
    """
    data = Path(path).read_bytes()
    if len(data) < len(_MAGIC) + 8 or data[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    hlen = int.from_bytes(data[len(_MAGIC) : len(_MAGIC) + 8], "little")
    hstart = len(_MAGIC) + 8
    if hstart + hlen > len(data):
        raise CheckpointError(f"{path} is truncated (header)")
    try:
        header = json.loads(data[hstart : hstart + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path} has a corrupt header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {header.get('version')} unsupported (want {CHECKPOINT_VERSION})"
        )
    payload = data[hstart + hlen :]
    flat: dict[str, object] = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path} is truncated (arrays)")
        arr = np.frombuffer(payload[start : start + nbytes], dtype=np.dtype(entry["dtype"]))
        flat[entry["key"]] = arr.reshape(entry["shape"]).copy()
    flat.update(header.get("scalars", {}))

    spec = NetSpec(**header["spec"])
    bundle = init_params(spec, seed=0)
    bundle.step = int(header["step"])
    modstate = _unflatten(flat, "module")
    for name, module in bundle.modules().items():
        if spec.share_image_disc_encoder and name == "image_disc":
            head = modstate[name]["fc"]
            module.fc.load_state_dict({k: torch.as_tensor(v) for k, v in head.items()})
            continue
        raw = _collapse(modstate[name])
        module.load_state_dict({k: torch.as_tensor(v) for k, v in raw.items()})

    extras = {
        "optimizers": {
            name: {
                "state": {
                    int(idx): {k: torch.as_tensor(v) if isinstance(v, np.ndarray) else v
                               for k, v in slots.items()}
                    for idx, slots in _unflatten(flat, f"optim/{name}")
                    .get("state", {})
                    .items()
                },
                "param_groups": groups,
            }
            for name, groups in header.get("optimizer_param_groups", {}).items()
        },
        "numpy_rng": header.get("numpy_rng"),
        "torch_rng": flat.get("rng/torch"),
        "trainer": header.get("trainer"),
    }
    return bundle, extras


def _collapse(tree: dict, prefix: str = "") -> dict:
    """Nested {a: {b: v}} -> flat {"a.b": v} (torch state_dict key style)."""
    flat = {}
    for key, val in tree.items():
        name = f"{prefix}.{key}" if prefix else key
        if isinstance(val, dict):
            flat.update(_collapse(val, name))
        else:
            flat[name] = val
    return flat
