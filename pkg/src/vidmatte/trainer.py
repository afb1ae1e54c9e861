"""Optimization loop, augmentation, windowed inference and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import interpolation_matrix, no_grad
from .losses import LossConfig, total_loss
from .metrics import aggregate, evaluate_clip
from .model import MattingNetwork, ModelConfig
from .synthcomp import (
    CompositeSample,
    FormatError,
    VersionError,
    composite,
    load_sample,
    read_manifest,
)

logger = logging.getLogger(__name__)

PAPER_RESIZE_SIDES = (288, 320, 352, 392, 416, 448, 480, 512)
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LOG_FIELDS = ("step", "epoch", "lr", "focal", "dice", "temporal", "total")


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN or infinite loss."""


class ConfigError(ValueError):
    """Unknown key or unparsable value in a run configuration."""


@dataclass
class TrainConfig:
    epochs: int = 5
    lr_backbone: float = 2e-5
    lr_other: float = 2e-4
    weight_decay: float = 1e-4
    decay_epochs: tuple = (3, 4)
    decay_factor: float = 0.1
    window: int = 5
    augment: bool = True
    resize_sides: tuple = (48, 64, 80)
    flip_prob: float = 0.5
    grad_clip: float = 1.0
    seed: int = 0
    lam: float = 5.0
    sftm_enabled: bool = True
    lqtm_enabled: bool = True
    lqtm_per_channel: bool = False
    cross_attention: str = "deformable"
    n_enc: int = 1
    n_dec: int = 1
    dim: int = 32
    n_heads: int = 2
    n_points: int = 2
    backbone_channels: tuple = (16, 32, 64, 96)
    val_manifest: str = ""

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        self.resize_sides = tuple(int(s) for s in self.resize_sides)
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError(f"decay epochs must be strictly increasing, got {self.decay_epochs}")
        if self.decay_epochs and self.decay_epochs[-1] >= self.epochs:
            raise ConfigError(f"decay epochs {self.decay_epochs} must be < epochs ({self.epochs})")

    def model_config(self):
        return ModelConfig(backbone_channels=self.backbone_channels, dim=self.dim, n_heads=self.n_heads,
                           n_points=self.n_points, n_enc=self.n_enc, n_dec=self.n_dec,
                           n_queries=self.window, sftm_enabled=self.sftm_enabled,
                           lqtm_enabled=self.lqtm_enabled, lqtm_per_channel=self.lqtm_per_channel,
                           cross_attention=self.cross_attention)

    def loss_config(self):
        return LossConfig(lam=self.lam)

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def to_text(self):
        return config_text(self)

    def hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_pairs(cls, pairs, base=None):
        """Apply ``key=value`` strings on top of ``base`` (defaults when omitted)."""
        return apply_pairs(base or cls(), pairs)

    @classmethod
    def from_file(cls, path, base=None):
        return apply_pairs(base or cls(), read_pairs(path))


def config_text(cfg):
    """Flat ``key=value`` lines in field order; the inverse of :func:`apply_pairs`."""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def read_pairs(path):
    """Non-blank lines of a config file with ``#`` comments stripped."""
    pairs = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            pairs.append(line)
    return pairs


def apply_pairs(base, pairs):
    """Return a copy of dataclass ``base`` with ``key=value`` overrides parsed by field type."""
    kinds = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(base)}
    changes = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, raw = (s.strip() for s in pair.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _parse_value(key, raw, kinds[key])
    try:
        out = dataclasses.replace(base, **changes)
        if hasattr(out, "validate"):
            out.validate()
        return out
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _parse_value(key, raw, kind):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {key}={raw!r} as {kind.__name__}") from None


def lr_at_epoch(base, epoch, decay_epochs, factor):
    """Step schedule; each decay multiplies the previous rate by ``factor``."""
    lr = base
    for d in decay_epochs:
        if epoch >= d:
            lr = lr * factor
    return lr


class Adam:
    """Adam with decoupled weight decay and a per-parameter learning rate."""

    def __init__(self, betas=ADAM_BETAS, eps=ADAM_EPS):
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, named_params, lr_map, weight_decay=0.0):
        """``lr_map`` maps parameter name to learning rate."""
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in named_params:
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise ValueError(f"parameter {name} has no gradient")
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            lr = lr_map[name]
            if weight_decay:
                p.data -= lr * weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(named_params, optimizer, lr_map, weight_decay=0.0):
    optimizer.step(named_params, lr_map, weight_decay)


def clip_grad_norm(params, max_norm):
    total = np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def resize_planes(x, h, w):
    """Bilinear resize of a (T, H, W, C) numpy array."""
    rh = interpolation_matrix(x.shape[1], h)
    rw = interpolation_matrix(x.shape[2], w)
    return np.einsum("ah,thwc,bw->tabc", rh, x, rw, optimize=True)


def snap16(n):
    return max(16, int(round(n / 16.0)) * 16)


def augment(sample, rng, sides=(48, 64, 80), flip_prob=0.5, force_flip=None, side=None):
    """Random longest-side resize (snapped to multiples of 16) and horizontal flip.

    Foreground, background and alpha are resized; the composite is rebuilt
    from them so the sample keeps satisfying the compositing equation.
    """
    t_, h, w = sample.shape
    target = side if side is not None else int(rng.choice(sides))
    scale = target / max(h, w)
    nh, nw = snap16(h * scale), snap16(w * scale)
    if (nh, nw) != (h, w):
        fg = np.clip(resize_planes(sample.foreground, nh, nw), 0.0, 1.0)
        bg = np.clip(resize_planes(sample.background, nh, nw), 0.0, 1.0)
        alpha = np.clip(resize_planes(sample.alpha, nh, nw), 0.0, 1.0)
        comp = composite(fg, bg, alpha)
    else:
        fg, bg, alpha, comp = sample.foreground, sample.background, sample.alpha, sample.composite
    flip = rng.random() < flip_prob if force_flip is None else force_flip
    if flip:
        fg, bg, alpha, comp = (x[:, :, ::-1, :].copy() for x in (fg, bg, alpha, comp))
    residual = np.abs(composite(fg, bg, alpha) - comp).max()
    if residual > 1e-6:
        raise AssertionError(f"augmented sample violates compositing by {residual}")
    return CompositeSample(fg, bg, alpha, comp, seed=sample.seed)


def make_windows(sample, window, keep_partial=False):
    t_ = sample.shape[0]
    if t_ <= window:
        return [sample]
    out = []
    for start in range(0, t_, window):
        stop = min(start + window, t_)
        if stop - start < window and not keep_partial:
            break
        out.append(CompositeSample(sample.foreground[start:stop], sample.background[start:stop],
                                   sample.alpha[start:stop], sample.composite[start:stop], seed=sample.seed))
    return out


def window_bounds(n_frames, window):
    """Consecutive non-overlapping [start, stop) spans covering every frame once."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    return [(s, min(s + window, n_frames)) for s in range(0, n_frames, window)]


def infer(network, clip, window):
    """Run the network on consecutive windows of ``clip`` and concatenate the mattes."""
    clip = np.asarray(clip, dtype=np.float64)
    outs = []
    with no_grad():
        for start, stop in window_bounds(clip.shape[0], window):
            outs.append(network(clip[start:stop]).alpha.data)
    return np.concatenate(outs, axis=0)


@dataclass
class Checkpoint:
    params: dict
    m: dict
    v: dict
    step: int
    epoch: int
    config: dict
    config_hash: str
    seed: int

    def train_config(self):
        return TrainConfig(**self.config)

    def network(self):
        net = MattingNetwork(self.train_config().model_config(), seed=self.seed)
        net.load_state_dict(self.params)
        return net


CKPT_MAGIC = b"VMCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sII")


def save_checkpoint(ckpt, path):
    """VMCK container: magic, u32 version, u32 header length, JSON header, raw <f8 blobs."""
    table = []
    blobs = []
    offset = 0
    for group in ("params", "m", "v"):
        arrays = getattr(ckpt, group)
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            table.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = json.dumps({"step": ckpt.step, "epoch": ckpt.epoch, "config": ckpt.config,
                         "config_hash": ckpt.config_hash, "seed": ckpt.seed, "table": table},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if len(buf) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version, hlen = _CKPT_HEADER.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    start = _CKPT_HEADER.size + hlen
    try:
        header = json.loads(buf[_CKPT_HEADER.size:start])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    groups = {"params": {}, "m": {}, "v": {}}
    for entry in header["table"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        lo = start + entry["offset"]
        if lo + 8 * n > len(buf):
            raise FormatError(f"{path}: truncated data for {entry['name']}")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=lo).reshape(entry["shape"]).copy()
        groups[entry["group"]][entry["name"]] = arr
    return Checkpoint(groups["params"], groups["m"], groups["v"], header["step"], header["epoch"],
                      header["config"], header["config_hash"], header["seed"])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list = field(default_factory=list)
    epoch_metrics: list = field(default_factory=list)

    def log_csv(self):
        return format_log(self.log)


def format_log(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_FIELDS)
    for row in rows:
        writer.writerow([row[k] if isinstance(row[k], int) else repr(row[k]) for k in LOG_FIELDS])
    return buf.getvalue()


def load_corpus(manifest):
    paths = read_manifest(manifest)
    if not paths:
        raise ValueError(f"manifest {manifest} lists no samples")
    return [load_sample(p, seed=i) for i, p in enumerate(paths)]


def train_samples(samples, cfg, resume=None, val_samples=None, on_step=None, until_epoch=None):
    """Fit a fresh (or resumed) network on in-memory samples.

    Data order and augmentation draw from generators keyed on
    ``(seed, epoch[, step])``, so a resumed run replays exactly the steps an
    uninterrupted run would have taken. ``until_epoch`` stops early, leaving
    a checkpoint that a later call can resume under the same config.
    """
    if not samples:
        raise ValueError("no training samples")
    net = MattingNetwork(cfg.model_config(), seed=cfg.seed)
    opt = Adam()
    start_epoch, step = 0, 0
    if resume is not None:
        if resume.config_hash != cfg.hash():
            raise ConfigError(f"checkpoint config hash {resume.config_hash} does not match {cfg.hash()}")
        net.load_state_dict(resume.params)
        opt.m = {k: v.copy() for k, v in resume.m.items()}
        opt.v = {k: v.copy() for k, v in resume.v.items()}
        opt.step_count = resume.step
        start_epoch, step = resume.epoch, resume.step

    named = list(net.named_parameters())
    params = [p for _, p in named]
    loss_cfg = cfg.loss_config()
    windows = [w for s in samples for w in make_windows(s, cfg.window)]
    log, epoch_metrics = [], []

    stop = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
    if stop < start_epoch:
        raise ValueError(f"cannot stop at epoch {stop}: checkpoint is already at epoch {start_epoch}")
    for epoch in range(start_epoch, stop):
        lr_bb = lr_at_epoch(cfg.lr_backbone, epoch, cfg.decay_epochs, cfg.decay_factor)
        lr_ot = lr_at_epoch(cfg.lr_other, epoch, cfg.decay_epochs, cfg.decay_factor)
        lr_map = {n: (lr_bb if net.is_backbone(n) else lr_ot) for n, _ in named}
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(windows))
        for i, wi in enumerate(order):
            sample = windows[wi]
            if cfg.augment:
                sample = augment(sample, np.random.default_rng([cfg.seed, epoch, i]),
                                 cfg.resize_sides, cfg.flip_prob)
            net.zero_grad()
            pred = net(sample.composite)
            report = total_loss(pred.alpha, sample.alpha, loss_cfg)
            values = report.as_dict()
            if not all(np.isfinite(v) for v in values.values()):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {step}: {values}")
            report.total.backward()
            if cfg.grad_clip:
                clip_grad_norm(params, cfg.grad_clip)
            opt.step(named, lr_map, cfg.weight_decay)
            step += 1
            row = {"step": step, "epoch": epoch, "lr": lr_ot, **values}
            log.append(row)
            if on_step is not None:
                on_step(net, row)
        if val_samples:
            reports = [evaluate_clip(infer(net, s.composite, cfg.window), s.alpha, per_frame=False)
                       for s in val_samples]
            agg = aggregate(reports)
            epoch_metrics.append({"epoch": epoch, **{k: v for k, v in agg.to_dict().items() if k != "per_frame"}})
            logger.info("epoch %d val %s", epoch, epoch_metrics[-1])

    ckpt = Checkpoint(net.state_dict(), {k: v.copy() for k, v in opt.m.items()},
                      {k: v.copy() for k, v in opt.v.items()}, step, stop,
                      cfg.to_dict(), cfg.hash(), cfg.seed)
    return TrainResult(ckpt, log, epoch_metrics)


def train(manifest, cfg, resume=None, until_epoch=None):
    """Train from a manifest of VMFK samples; validation uses ``cfg.val_manifest`` if set."""
    samples = load_corpus(manifest)
    val = load_corpus(cfg.val_manifest) if cfg.val_manifest else None
    return train_samples(samples, cfg, resume=resume, val_samples=val, until_epoch=until_epoch)
