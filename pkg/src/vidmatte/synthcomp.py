"""Procedural foreground/alpha/background clips and the compositing equation.

All synthesized planes are quantized to multiples of 1/256. Products and
blends of such values are exact in both float32 and float64, so a sample
survives the float32 container bit-for-bit and its composite still equals
``alpha*F + (1-alpha)*B`` exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation import check_alpha, check_clip, check_same_geometry

MAGIC = b"VMFK"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
QUANT = 256.0
DEFAULT_SPLITS = {"train": 40, "val": 4, "test": 8}


class FormatError(ValueError):
    """A sample container is malformed or truncated."""


class VersionError(FormatError):
    """A sample container carries an unsupported version tag."""


@dataclass
class SynthConfig:
    frames: int = 5
    height: int = 64
    width: int = 64
    min_blobs: int = 1
    max_blobs: int = 4
    motion: float = 2.0
    min_feather: float = 2.0
    max_feather: float = 6.0
    min_gratings: int = 3
    max_gratings: int = 6
    drift: bool = True

    def validate(self):
        if self.frames < 1 or self.height < 1 or self.width < 1:
            raise ValueError(f"clip dimensions must be positive, got "
                             f"T={self.frames} H={self.height} W={self.width}")
        if not 1 <= self.min_blobs <= self.max_blobs:
            raise ValueError("need 1 <= min_blobs <= max_blobs")
        if not 0 < self.min_feather <= self.max_feather:
            raise ValueError("need 0 < min_feather <= max_feather")
        if not 1 <= self.min_gratings <= self.max_gratings:
            raise ValueError("need 1 <= min_gratings <= max_gratings")
        return self


@dataclass
class CompositeSample:
    foreground: np.ndarray
    background: np.ndarray
    alpha: np.ndarray
    composite: np.ndarray
    seed: int = 0
    fps: int = field(default=30, compare=False)

    @property
    def shape(self):
        return self.alpha.shape[:3]

    def equals(self, other):
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("foreground", "background", "alpha", "composite"))


def composite(fg, bg, alpha):
    """Blend ``alpha*fg + (1-alpha)*bg`` per pixel, clipped to [0, 1]."""
    fg = np.asarray(fg, dtype=np.float64)
    bg = np.asarray(bg, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if fg.shape != bg.shape:
        raise ValueError(f"foreground {fg.shape} and background {bg.shape} differ")
    if alpha.shape[:-1] != fg.shape[:-1] or alpha.shape[-1] != 1:
        raise ValueError(f"alpha {alpha.shape} does not match clip {fg.shape}")
    return np.clip(alpha * fg + (1.0 - alpha) * bg, 0.0, 1.0)


def _quantize(x):
    return np.round(np.clip(x, 0.0, 1.0) * QUANT) / QUANT


def _smoothstep(edge0, edge1, x):
    t = np.clip((x - edge0) / (edge1 - edge0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _background(rng, cfg, yy, xx):
    n = rng.integers(cfg.min_gratings, cfg.max_gratings + 1)
    t_ = cfg.frames
    out = np.zeros((t_, cfg.height, cfg.width, 3))
    scale = max(cfg.height, cfg.width)
    for _ in range(n):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.5, 3.0) * 2 * np.pi / scale
        phase = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(-0.3, 0.3) if cfg.drift else 0.0
        amp = rng.uniform(0.3, 1.0, size=3)
        proj = np.cos(theta) * xx + np.sin(theta) * yy
        for t in range(t_):
            wave = np.sin(freq * proj + phase + speed * t)
            out[t] += wave[..., None] * amp
    lo, hi = out.min(), out.max()
    out = (out - lo) / (hi - lo + 1e-12)
    tint = rng.uniform(0.2, 0.8, size=3)
    return 0.6 * out + 0.4 * tint


def synthesize_sample(cfg=None, seed=0):
    """Moving feathered ellipses over drifting sinusoidal gratings."""
    cfg = (cfg or SynthConfig()).validate()
    rng = np.random.default_rng(seed)
    t_, h, w = cfg.frames, cfg.height, cfg.width
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    small = min(h, w)

    n_blobs = rng.integers(cfg.min_blobs, cfg.max_blobs + 1)
    keep_out = np.ones((t_, h, w))
    fg_acc = np.zeros((t_, h, w, 3))
    w_acc = np.zeros((t_, h, w))
    for _ in range(n_blobs):
        ra = rng.uniform(0.12, 0.3) * small
        rb = rng.uniform(0.12, 0.3) * small
        angle = rng.uniform(0, np.pi)
        cy = rng.uniform(0.25, 0.75) * h
        cx = rng.uniform(0.25, 0.75) * w
        vy, vx = rng.uniform(-1, 1, size=2) * cfg.motion
        feather = rng.uniform(cfg.min_feather, cfg.max_feather)
        color = rng.uniform(0.0, 1.0, size=3)
        shade = rng.uniform(-0.25, 0.25, size=3)
        ca, sa = np.cos(angle), np.sin(angle)
        for t in range(t_):
            dy = yy - (cy + vy * t)
            dx = xx - (cx + vx * t)
            u = (ca * dx + sa * dy) / ra
            v = (-sa * dx + ca * dy) / rb
            # approximate signed distance to the ellipse boundary, in pixels
            dist = (np.sqrt(u * u + v * v) - 1.0) * min(ra, rb)
            a = 1.0 - _smoothstep(-feather / 2, feather / 2, dist)
            keep_out[t] *= 1.0 - a
            grad = (u * 0.5)[..., None] * shade
            fg_acc[t] += a[..., None] * (color + grad)
            w_acc[t] += a
    alpha = _quantize(1.0 - keep_out)[..., None]
    base = rng.uniform(0.0, 1.0, size=3)
    fg = np.where(w_acc[..., None] > 1e-9, fg_acc / np.maximum(w_acc, 1e-9)[..., None], base)
    fg = _quantize(fg)
    bg = _quantize(_background(rng, cfg, yy, xx))
    return CompositeSample(fg, bg, alpha, composite(fg, bg, alpha), seed=int(seed))


def save_sample(sample, path):
    t_, h, w = sample.shape
    check_same_geometry(sample.foreground, sample.alpha)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, t_, h, w))
        for plane in (sample.foreground, sample.background, sample.alpha, sample.composite):
            fh.write(np.ascontiguousarray(plane, dtype="<f4").tobytes())


def read_header(buf, magic, path):
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(buf)} bytes)")
    tag, version, t_, h, w = _HEADER.unpack_from(buf)
    if tag != magic:
        raise FormatError(f"{path}: bad magic {tag!r}, expected {magic!r}")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported version {version}, expected {VERSION}")
    if min(t_, h, w) < 1:
        raise FormatError(f"{path}: degenerate dimensions {t_}x{h}x{w}")
    return t_, h, w


def load_sample(path, seed=0):
    """Read a VMFK container. The seed is not stored, so it is supplied by the caller."""
    buf = Path(path).read_bytes()
    t_, h, w = read_header(buf, MAGIC, path)
    sizes = [t_ * h * w * c for c in (3, 3, 1, 3)]
    expected = _HEADER.size + 4 * sum(sizes)
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(buf)}")
    planes = []
    pos = _HEADER.size
    for n, c in zip(sizes, (3, 3, 1, 3)):
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float64)
        planes.append(arr.reshape(t_, h, w, c))
        pos += 4 * n
    fg, bg, alpha, comp = planes
    return CompositeSample(check_clip(fg), check_clip(bg), check_alpha(alpha), check_clip(comp), seed=seed)


def write_manifest(paths, path):
    Path(path).write_text("".join(f"{p}\n" for p in paths))


def read_manifest(path):
    """Sample paths listed one per line; relative entries resolve against the manifest's folder."""
    base = Path(path).parent
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            p = Path(line)
            out.append(p if p.is_absolute() else base / p)
    return out


def synthesize_corpus(out_dir, n, cfg=None, seed=0, name="train"):
    """Write ``n`` samples plus a ``<name>.txt`` manifest; sample i uses seed ``seed + i``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(n):
        fname = f"{name}_{i:04d}.vmfk"
        save_sample(synthesize_sample(cfg, seed + i), out_dir / fname)
        names.append(fname)
    manifest = out_dir / f"{name}.txt"
    write_manifest(names, manifest)
    return manifest
