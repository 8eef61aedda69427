"""Training loop, reconstruction metrics and the end-to-end gradient check."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .hashgrid import GridConfig
from .model import (
    Autoencoder, ModelShape, build_model, decode_keys, encode, is_table_param,
    loss_and_grads, param_dict,
)
from .tinynn import AdamState, adam_step, l2_loss

log = logging.getLogger(__name__)

PSNR_MAX = 100.0  # reported when the reconstruction is exact


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int
    image_size: int = 32
    channels: int = 3
    code_size: int = 8
    feature_size: int = 16
    n_groups: int = 2
    key_len: int = 1
    n_resolutions: int = 4
    r_min: int = 4
    r_max: int = 16
    max_entries: int = 2 ** 10
    entry_dim: int = 8
    feature_channels: int = 32
    mlp_hidden: int = 64
    enc_width: int = 16
    dec_width: int = 32
    activation: str = "relu"
    key_init_gain: float = 16.0
    steps: int = 2000
    batch_size: int = 8
    n_images: int = 64
    noise: bool = True
    l2_weight: float = 20.0
    lr_tables: float = 2e-3
    lr_networks: float = 2e-3
    eps_tables: float = 1e-15
    eps_networks: float = 1e-15
    beta1: float = 0.0
    beta2: float = 0.99

    def __post_init__(self):
        if self.feature_channels % self.n_groups:
            raise ConfigError(f"feature_channels {self.feature_channels} not divisible by n_groups {self.n_groups}")
        if self.steps < 0 or self.batch_size < 1 or self.n_images < 1:
            raise ConfigError("steps must be >= 0, batch_size and n_images >= 1")
        try:
            self.model_shape()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def grid_config(self) -> GridConfig:
        return GridConfig(
            n_groups=self.n_groups, n_resolutions=self.n_resolutions, key_len=self.key_len,
            entry_dim=self.entry_dim, max_entries=self.max_entries, r_min=self.r_min,
            r_max=self.r_max, out_dim_per_group=self.feature_channels // self.n_groups,
            mlp_hidden=self.mlp_hidden,
        )

    def model_shape(self) -> ModelShape:
        return ModelShape(
            image_size=self.image_size, channels=self.channels, code_size=self.code_size,
            code_channels=self.n_groups * self.key_len, feature_size=self.feature_size,
            grid=self.grid_config(), enc_width=self.enc_width, dec_width=self.dec_width,
            activation=self.activation,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# -- key=value config files ---------------------------------------------------------

_FIELD_TYPES = {f.name: type(f.default) if f.default is not dataclasses.MISSING else int
                for f in dataclasses.fields(TrainConfig)}


def _parse_value(name: str, text: str):
    kind = _FIELD_TYPES[name]
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    try:
        if kind is int:
            return int(float(text)) if "e" in text.lower() else int(text, 0)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind.__name__}") from None


def parse_config(text: str, **overrides) -> TrainConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, val)
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "seed" not in values:
        raise ConfigError("config must set seed")
    return TrainConfig(**values)


def format_config(config: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        val = getattr(config, f.name)
        lines.append(f"{f.name} = {repr(val) if isinstance(val, float) else val}")
    return "\n".join(lines) + "\n"


# -- data ---------------------------------------------------------------------------

def synthetic_images(n: int, size: int = 32, channels: int = 3, seed: int = 0) -> np.ndarray:
    """Seeded toy images: a colour gradient, a disc, and sometimes a coarse checkerboard."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    out = np.empty((n, size, size, channels), dtype=np.float32)
    for k in range(n):
        angle = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(angle) * xx + np.sin(angle) * yy
        ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
        c0, c1 = rng.uniform(0, 1, channels), rng.uniform(0, 1, channels)
        img = ramp[..., None] * c1 + (1 - ramp[..., None]) * c0
        if rng.random() < 0.5:
            period = rng.choice([8, 16])
            board = ((np.arange(size)[:, None] // period + np.arange(size)[None, :] // period) % 2)
            img = 0.7 * img + 0.3 * board[..., None] * rng.uniform(0, 1, channels)
        cy, cx = rng.uniform(0.2, 0.8, 2)
        radius = rng.uniform(0.1, 0.3)
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 < radius ** 2
        img[disc] = rng.uniform(0, 1, channels)
        out[k] = np.clip(img, 0, 1)
    return out


# -- metrics ------------------------------------------------------------------------

def psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return PSNR_MAX
    return min(PSNR_MAX, 10.0 * math.log10(1.0 / mse))


def psnr(recon: np.ndarray, target: np.ndarray) -> float:
    diff = recon.astype(np.float64) - target.astype(np.float64)
    return psnr_from_mse(float(np.mean(diff * diff)))


def mean_image_psnr(images: np.ndarray) -> float:
    """PSNR of predicting the dataset mean image for every sample."""
    mean = images.mean(axis=0, keepdims=True)
    return psnr(np.broadcast_to(mean, images.shape), images)


# -- training -----------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    model: Autoencoder
    optimizers: dict[str, AdamState]
    step: int = 0


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float] = field(default_factory=list)
    psnrs: list[float] = field(default_factory=list)


def init_checkpoint(config: TrainConfig) -> Checkpoint:
    model = build_model(config.model_shape(), config.seed, key_init_gain=config.key_init_gain)
    optimizers = {
        "tables": AdamState(config.lr_tables, config.beta1, config.beta2, config.eps_tables),
        "networks": AdamState(config.lr_networks, config.beta1, config.beta2, config.eps_networks),
    }
    return Checkpoint(config, model, optimizers, 0)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]
        if n < batch_size:
            yield order


def train(config: TrainConfig, dataset: np.ndarray, checkpoint: Checkpoint | None = None,
          callback=None) -> TrainResult:
    """Jointly optimise encoder, hash tables and decoder under the weighted L2 loss."""
    sh = config.model_shape()
    if dataset.ndim != 4 or dataset.shape[1:] != (sh.image_size, sh.image_size, sh.channels):
        raise ConfigError(f"dataset shape {dataset.shape} does not match config image shape")
    if not np.all((dataset >= 0) & (dataset <= 1)):
        raise DataError("dataset values must be finite and lie in [0, 1]")
    ckpt = checkpoint or init_checkpoint(config)
    params = param_dict(ckpt.model)
    seq = np.random.SeedSequence([config.seed, 1])
    batch_rng, noise_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    batches = _batches(len(dataset), config.batch_size, batch_rng)
    result = TrainResult(ckpt)
    for _ in range(config.steps):
        images = dataset[next(batches)]
        try:
            loss, _, grads = loss_and_grads(ckpt.model, images, config.l2_weight,
                                            noise_rng if config.noise else None)
        except FloatingPointError as exc:
            raise NonFiniteLossError(f"non-finite values at step {ckpt.step}: {exc}") from exc
        if not math.isfinite(loss):
            bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
            raise NonFiniteLossError(f"non-finite loss {loss} at step {ckpt.step}; "
                                     f"non-finite gradients in {bad or 'none'}")
        tables = {k: g for k, g in grads.items() if is_table_param(k)}
        nets = {k: g for k, g in grads.items() if not is_table_param(k)}
        adam_step(params, tables, ckpt.optimizers["tables"])
        adam_step(params, nets, ckpt.optimizers["networks"])
        ckpt.step += 1
        result.losses.append(loss)
        result.psnrs.append(psnr_from_mse(loss / config.l2_weight))
        if callback is not None:
            callback(ckpt.step, loss)
        if ckpt.step % 200 == 0:
            log.info("step %d loss %.5f", ckpt.step, loss)
    return result


def encode_images(model: Autoencoder, images: np.ndarray) -> np.ndarray:
    batch = images if images.ndim == 4 else images[None]
    keys = encode(model, batch).astype(np.float32)
    return keys if images.ndim == 4 else keys[0]


def decode_images(model: Autoencoder, keys: np.ndarray) -> np.ndarray:
    batch = keys if keys.ndim == 4 else keys[None]
    out = decode_keys(model, batch.astype(model.dtype)).astype(np.float32)
    return out if keys.ndim == 4 else out[0]


def reconstruct(checkpoint: Checkpoint, image: np.ndarray) -> tuple[np.ndarray, float]:
    """Noise-free encode/decode of one image or a batch; returns ``(reconstruction, psnr)``."""
    sh = checkpoint.model.shape
    if image.shape[-3:] != (sh.image_size, sh.image_size, sh.channels):
        raise ValueError(f"image shape {image.shape} does not match the checkpoint's "
                         f"{(sh.image_size, sh.image_size, sh.channels)}")
    recon = decode_images(checkpoint.model, encode_images(checkpoint.model, image))
    return recon, psnr(recon, image)


def evaluate(checkpoint: Checkpoint, images: np.ndarray, batch_size: int = 64) -> float:
    """Mean weighted L2 loss of noise-free reconstructions."""
    total = 0.0
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        recon = decode_images(checkpoint.model, encode_images(checkpoint.model, chunk))
        total += l2_loss(recon, chunk, checkpoint.config.l2_weight)[0] * len(chunk)
    return total / len(images)


# -- gradient check -------------------------------------------------------------------

GRADCHECK_CONFIG = TrainConfig(
    seed=0, image_size=8, code_size=2, feature_size=4, n_groups=2, key_len=1,
    n_resolutions=2, r_min=4, r_max=8, max_entries=256, entry_dim=2, feature_channels=8,
    mlp_hidden=8, enc_width=4, dec_width=4, n_images=2, batch_size=2, steps=0,
)


@dataclass
class Probe:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    probes: list[Probe]
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    @property
    def failing(self) -> list[Probe]:
        return [p for p in self.probes if p.rel_error > self.tol]


def _block(name: str) -> str:
    if is_table_param(name):
        return "tables"
    if ".mlp." in name:
        return "mlp"
    return "encoder" if name.startswith("enc.") else "decoder"


def generic_fixture(model: Autoencoder, seed: int) -> Autoencoder:
    """Copy of ``model`` with O(1) table entries and random biases.

    Freshly initialised tables are ~1e-4 and biases are zero, which parks most
    ReLU inputs right at the kink where central differences are meaningless.
    """
    fixture = model.astype(np.float64)
    rng = np.random.default_rng(seed)
    for name, p in param_dict(fixture).items():
        if is_table_param(name):
            p[...] = rng.uniform(-0.5, 0.5, size=p.shape)
        elif name.endswith(".b"):
            p[...] = rng.normal(0.0, 0.1, size=p.shape)
    return fixture.astype(model.dtype)


def relative_error(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def end_to_end_gradient_check(config: TrainConfig = GRADCHECK_CONFIG, n_probes: int = 200,
                              h: float = 1e-5, tol: float = 1e-5, dtype=np.float64,
                              floor: float = 1e-6, seed: int | None = None,
                              model: Autoencoder | None = None,
                              images: np.ndarray | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences on random scalar parameters.

    The analytic side runs in ``dtype``; the finite-difference reference always
    runs in float64 on the same parameter values. Relative errors use
    ``max(|a|, |n|, floor)`` as denominator. Probes are spread evenly over the
    encoder, hash tables, projection MLPs and decoder; table probes are drawn
    from entries the forward pass actually touches. Without an explicit
    ``model`` the check runs on :func:`generic_fixture` of a fresh build.
    """
    seed = config.seed if seed is None else seed
    if model is None:
        model = generic_fixture(build_model(config.model_shape(), config.seed, config.key_init_gain), seed)
    if images is None:
        images = synthetic_images(config.batch_size, config.image_size, config.channels, seed=seed + 1)
    analytic_model = model.astype(dtype)
    ref_model = model.astype(dtype).astype(np.float64)
    _, _, grads = loss_and_grads(analytic_model, images.astype(dtype), config.l2_weight)
    ref_params = param_dict(ref_model)
    x64 = images.astype(np.float64)

    def loss_at() -> float:
        return loss_and_grads(ref_model, x64, config.l2_weight)[0]

    blocks: dict[str, list[str]] = {}
    for name in ref_params:
        blocks.setdefault(_block(name), []).append(name)
    rng = np.random.default_rng(seed)
    order = ["encoder", "tables", "mlp", "decoder"]
    probes = []
    for k in range(n_probes):
        names = blocks[order[k % len(order)]]
        sizes = np.array([ref_params[n].size for n in names], dtype=float)
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        p = ref_params[name]
        if is_table_param(name):
            touched = np.flatnonzero(np.any(grads[name] != 0, axis=1))
            row = int(rng.choice(touched)) if len(touched) else int(rng.integers(p.shape[0]))
            index = (row, int(rng.integers(p.shape[1])))
        else:
            index = tuple(int(rng.integers(d)) for d in p.shape)
        old = p[index]
        p[index] = old + h
        up = loss_at()
        p[index] = old - h
        down = loss_at()
        p[index] = old
        numeric = (up - down) / (2 * h)
        analytic = float(grads[name][index])
        probes.append(Probe(name, index, analytic, numeric, relative_error(analytic, numeric, floor)))
    worst = max((pr.rel_error for pr in probes), default=0.0)
    return GradCheckReport(probes, worst, tol)


# -- checkpoint files -----------------------------------------------------------------

def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    from .formats import Sections, snapshot_bytes

    sec = Sections()
    sec.text["config"] = format_config(ckpt.config)
    sec.ints["step"] = ckpt.step
    for name, arr in param_dict(ckpt.model).items():
        if name.startswith(("enc.", "dec.")):
            sec.tensors[name] = arr
    for group_name, st in ckpt.optimizers.items():
        pre = f"opt.{group_name}"
        sec.ints[f"{pre}.step"] = st.step
        for hp in ("lr", "beta1", "beta2", "eps"):
            sec.floats[f"{pre}.{hp}"] = float(getattr(st, hp))
        for name in st.m:
            sec.tensors[f"{pre}.m.{name}"] = st.m[name]
            sec.tensors[f"{pre}.v.{name}"] = st.v[name]
    return snapshot_bytes(ckpt.config.grid_config(), ckpt.model.groups, sec)


def parse_checkpoint(data: bytes) -> Checkpoint:
    from .formats import FormatError, parse_snapshot

    grid, groups, sec = parse_snapshot(data)
    if "config" not in sec.text:
        raise FormatError("snapshot has no training config section")
    try:
        config = parse_config(sec.text["config"])
    except ConfigError as exc:
        raise FormatError(f"bad config section: {exc}") from exc
    if config.grid_config() != grid:
        raise FormatError("config section disagrees with the snapshot grid header")
    model = build_model(config.model_shape(), config.seed)
    model.groups = groups
    params = param_dict(model)
    for name, arr in params.items():
        if name.startswith(("enc.", "dec.")):
            stored = sec.tensors.get(name)
            if stored is None or stored.shape != arr.shape:
                raise FormatError(f"missing or mis-shaped tensor {name!r}")
            arr[...] = stored
    optimizers = {}
    try:
        for group_name in ("tables", "networks"):
            pre = f"opt.{group_name}"
            st = AdamState(*(sec.floats[f"{pre}.{hp}"] for hp in ("lr", "beta1", "beta2", "eps")),
                           step=sec.ints[f"{pre}.step"])
            for key, arr in sec.tensors.items():
                if key.startswith(f"{pre}.m."):
                    name = key[len(pre) + 3:]
                    st.m[name] = arr.copy()
                    st.v[name] = sec.tensors[f"{pre}.v.{name}"].copy()
            optimizers[group_name] = st
        step = sec.ints["step"]
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing section {exc}") from None
    return Checkpoint(config, model, optimizers, step)


def save_checkpoint(path, ckpt: Checkpoint):
    from pathlib import Path

    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    from pathlib import Path

    return parse_checkpoint(Path(path).read_bytes())
