"""Angular-delay channel math and the synthetic clustered-channel generator.

The spatial-frequency channel H (N_c subcarriers x N_t antennas, complex)
moves to the angular-delay domain through unitary DFTs, H' = F_c H F_t^H,
where multipath structure concentrates the energy in the first N_a delay
rows. The codec works on the truncated block H_a as a 2 x N_a x N_t real
image (real plane, then imaginary plane), min-max normalized into [0, 1]
with one shared offset/scale per dataset.

The generator replaces an external channel simulator: each sample is a sum
of clustered paths, every path a complex gain times a delay phase ramp
across subcarriers (outer product with a half-wavelength ULA steering
vector across antennas). Delays are confined so at least 99% of the
angular-delay energy lands in the first N_a rows, which is validated per
sample. Sample i depends only on (seed, i), so datasets are reproducible
and prefix-stable regardless of how generation is scheduled.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    CorruptHeaderError,
    GenerationError,
    TruncatedPayloadError,
    VersionMismatchError,
)

DATASET_MAGIC = "CSIDS"
DATASET_VERSION = 1
_LAYOUT = "real-plane-then-imag-plane, row-major"


def dft_transform(h):
    """Spatial-frequency -> angular-delay: H' = F_c H F_t^H (unitary DFTs)."""
    h = np.asarray(h)
    if h.ndim != 2:
        raise ValueError(f"expected a 2-D channel matrix, got shape {h.shape}")
    hp = np.fft.fft(h, axis=0, norm="ortho")
    return np.fft.ifft(hp, axis=1, norm="ortho")


def inverse_dft(hp, n_c):
    """Angular-delay -> spatial-frequency: F_c^H H' F_t.

    Requires the full-height matrix; zero_fill a truncated H_a first.
    """
    hp = np.asarray(hp)
    if hp.ndim != 2:
        raise ValueError(f"expected a 2-D channel matrix, got shape {hp.shape}")
    if hp.shape[0] != n_c:
        raise ValueError(
            f"inverse_dft needs the full {n_c}-row matrix, got {hp.shape[0]} rows (zero_fill first)"
        )
    h = np.fft.ifft(hp, axis=0, norm="ortho")
    return np.fft.fft(h, axis=1, norm="ortho")


def truncate(hp, n_a):
    """Keep the first n_a delay rows."""
    hp = np.asarray(hp)
    if n_a > hp.shape[0]:
        raise ValueError(f"cannot truncate to {n_a} rows, matrix has {hp.shape[0]}")
    return hp[:n_a].copy()


def zero_fill(h_a, n_c):
    """Restore full height by zero padding below the truncated block."""
    h_a = np.asarray(h_a)
    if n_c < h_a.shape[0]:
        raise ValueError(f"zero_fill target {n_c} is smaller than input {h_a.shape[0]}")
    out = np.zeros((n_c, h_a.shape[1]), dtype=h_a.dtype)
    out[: h_a.shape[0]] = h_a
    return out


class NormSpec(NamedTuple):
    """Shared min-max mapping: value -> (value - offset) / scale."""

    offset: float
    scale: float


def compute_norm(channels):
    """Min-max NormSpec over the real and imaginary parts of all samples."""
    ch = np.asarray(channels)
    lo = min(ch.real.min(), ch.imag.min())
    hi = max(ch.real.max(), ch.imag.max())
    scale = hi - lo
    if scale <= 0.0:
        raise ValueError("degenerate normalization: all values identical (scale 0)")
    return NormSpec(float(lo), float(scale))


def normalize_channels(channels, norm):
    """Complex (..., n_a, n_t) -> float32 images (..., 2, n_a, n_t) in [0, 1]."""
    if norm.scale <= 0.0:
        raise ValueError("normalization scale must be positive")
    ch = np.asarray(channels)
    planes = np.stack([ch.real, ch.imag], axis=-3)
    return ((planes - norm.offset) / norm.scale).astype(np.float32)


def denormalize_images(images, norm):
    """Invert normalize_channels: images (..., 2, n_a, n_t) -> complex."""
    img = np.asarray(images, dtype=np.float64) * norm.scale + norm.offset
    real = np.take(img, 0, axis=-3)
    imag = np.take(img, 1, axis=-3)
    return real + 1j * imag


class NmseResult(NamedTuple):
    linear: float
    db: float


def nmse(h_true, h_est):
    """Normalized MSE, mean over samples of |H - H_hat|^2 / |H|^2.

    Inputs of 2 or fewer dims are one sample; otherwise the first axis
    indexes samples. Returns linear value and 10*log10 dB (-inf at zero).
    """
    ht = np.asarray(h_true)
    he = np.asarray(h_est)
    if ht.shape != he.shape:
        raise ValueError(f"nmse: shape mismatch {ht.shape} vs {he.shape}")
    if ht.ndim <= 2:
        ht = ht.reshape(1, -1)
        he = he.reshape(1, -1)
    else:
        ht = ht.reshape(ht.shape[0], -1)
        he = he.reshape(he.shape[0], -1)
    power = np.einsum("ij,ij->i", ht.real, ht.real) + np.einsum("ij,ij->i", ht.imag, ht.imag)
    if np.any(power <= 0.0):
        raise ValueError("nmse: a truth sample has zero norm")
    diff = ht - he
    err = np.einsum("ij,ij->i", diff.real, diff.real) + np.einsum("ij,ij->i", diff.imag, diff.imag)
    linear = float(np.mean(err / power))
    db = 10.0 * np.log10(linear) if linear > 0.0 else float("-inf")
    return NmseResult(linear, db)


@dataclass(frozen=True)
class GeneratorParams:
    """Clustered multipath recipe for the synthetic channel generator.

    Delays are expressed in delay bins; angles as sin(theta) for a
    half-wavelength ULA. Bounds must keep every path inside the first
    n_a delay rows.
    """

    n_c: int = 1024
    n_t: int = 32
    n_a: int = 32
    min_clusters: int = 3
    max_clusters: int = 6
    paths_per_cluster: int = 8
    delay_min: float = 4.0
    delay_max: float = 24.0
    delay_spread: float = 0.25
    angle_min: float = -0.9
    angle_max: float = 0.9
    angle_spread: float = 0.05
    min_energy_fraction: float = 0.99

    def validate(self):
        if self.n_a > self.n_c:
            raise GenerationError(f"n_a={self.n_a} exceeds n_c={self.n_c}")
        if not 1 <= self.min_clusters <= self.max_clusters:
            raise GenerationError("cluster counts must satisfy 1 <= min <= max")
        if self.paths_per_cluster < 1:
            raise GenerationError("paths_per_cluster must be positive")
        if self.delay_spread < 0 or self.angle_spread < 0:
            raise GenerationError("spreads must be non-negative")
        if self.delay_min - self.delay_spread < 0 or self.delay_min > self.delay_max:
            raise GenerationError("delay range must satisfy 0 <= min - spread and min <= max")
        if self.delay_max + self.delay_spread > self.n_a - 1:
            raise GenerationError(
                f"delays up to {self.delay_max + self.delay_spread:.2f} bins leak past "
                f"row {self.n_a - 1}; the {self.min_energy_fraction:.0%} energy bound would fail"
            )
        if self.angle_min > self.angle_max:
            raise GenerationError("angle_min must not exceed angle_max")
        if abs(self.angle_min) + self.angle_spread > 1 or abs(self.angle_max) + self.angle_spread > 1:
            raise GenerationError("angles must stay within |sin(theta)| <= 1")
        if not 0.0 < self.min_energy_fraction <= 1.0:
            raise GenerationError("min_energy_fraction must lie in (0, 1]")


@dataclass
class ChannelDataset:
    """Stack of normalized angular images plus the shared norm and metadata."""

    images: np.ndarray  # (count, 2, n_a, n_t) float32 in [0, 1]
    norm: NormSpec
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 2:
            raise ValueError(f"images must be (count, 2, n_a, n_t), got {self.images.shape}")

    @property
    def count(self):
        return self.images.shape[0]

    @property
    def n_a(self):
        return self.images.shape[2]

    @property
    def n_t(self):
        return self.images.shape[3]

    def channels(self):
        """Denormalized complex H_a stack (count, n_a, n_t)."""
        return denormalize_images(self.images, self.norm)

    def slice(self, start, stop):
        sub = ChannelDataset(self.images[start:stop].copy(), self.norm, dict(self.meta))
        sub.meta["count"] = sub.count
        return sub


def _sample_channel(seed, index, p):
    """One H_a draw; deterministic in (seed, index)."""
    rng = np.random.default_rng([seed, index])
    k = np.arange(p.n_c)[:, None]
    ant = np.arange(p.n_t)[None, :]
    for _attempt in range(8):
        n_clusters = int(rng.integers(p.min_clusters, p.max_clusters + 1))
        taus, us, gains = [], [], []
        for _c in range(n_clusters):
            tau_c = rng.uniform(p.delay_min, p.delay_max)
            u_c = rng.uniform(p.angle_min, p.angle_max)
            power = rng.uniform(0.5, 1.0)
            npaths = p.paths_per_cluster
            taus.append(tau_c + rng.uniform(-p.delay_spread, p.delay_spread, size=npaths))
            us.append(u_c + rng.uniform(-p.angle_spread, p.angle_spread, size=npaths))
            g = rng.normal(size=npaths) + 1j * rng.normal(size=npaths)
            gains.append(g * np.sqrt(power / 2.0))
        taus = np.concatenate(taus)
        us = np.concatenate(us)
        gains = np.concatenate(gains) / np.sqrt(len(taus))
        ramps = np.exp(2j * np.pi * k * (taus[None, :] / p.n_c))  # (n_c, paths)
        steers = np.exp(-1j * np.pi * us[:, None] * ant)  # (paths, n_t)
        h = ramps @ (gains[:, None] * steers)
        hp = dft_transform(h)
        energy = np.sum(np.abs(hp) ** 2)
        kept = np.sum(np.abs(hp[: p.n_a]) ** 2)
        retention = kept / energy
        if retention >= p.min_energy_fraction:
            return hp[: p.n_a].copy(), float(retention)
    raise GenerationError(
        f"sample {index}: energy retention stayed below {p.min_energy_fraction:.0%} after 8 draws"
    )


def generate_channels(seed, count, params=None):
    """Deterministic synthetic ChannelDataset of ``count`` angular images."""
    if count <= 0:
        raise ValueError("count must be positive")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    p = params or GeneratorParams()
    p.validate()
    stack = np.empty((count, p.n_a, p.n_t), dtype=np.complex128)
    retentions = np.empty(count)
    for i in range(count):
        stack[i], retentions[i] = _sample_channel(seed, i, p)
    norm = compute_norm(stack)
    images = normalize_channels(stack, norm)
    meta = {
        "count": int(count),
        "n_a": p.n_a,
        "n_t": p.n_t,
        "seed": int(seed),
        "params": asdict(p),
        "energy_retention_min": float(retentions.min()),
        "energy_retention_mean": float(retentions.mean()),
    }
    return ChannelDataset(images, norm, meta)


def _header_path(path):
    return Path(str(path) + ".json")


def save_dataset(ds, path):
    """Write payload to ``path`` and the JSON header sidecar to ``path + .json``."""
    path = Path(path)
    gen = {k: ds.meta[k] for k in ("seed", "params") if k in ds.meta}
    header = {
        "magic": DATASET_MAGIC,
        "version": DATASET_VERSION,
        "count": int(ds.count),
        "na": int(ds.n_a),
        "nt": int(ds.n_t),
        "dtype": "f32",
        "layout": _LAYOUT,
        "norm": {"offset": ds.norm.offset, "scale": ds.norm.scale},
        "generator": gen,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    _header_path(path).write_text(json.dumps(header, indent=1) + "\n")
    return path


def load_dataset(path):
    """Read a dataset written by save_dataset; bit-exact round trip."""
    path = Path(path)
    hpath = _header_path(path)
    if not hpath.exists():
        raise CorruptHeaderError(f"missing header sidecar {hpath}")
    try:
        header = json.loads(hpath.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptHeaderError(f"unreadable header {hpath}: {e}") from e
    if not isinstance(header, dict) or header.get("magic") != DATASET_MAGIC:
        raise CorruptHeaderError(f"bad magic in {hpath}")
    if header.get("version") != DATASET_VERSION:
        raise VersionMismatchError(
            f"dataset version {header.get('version')!r}, this build reads {DATASET_VERSION}"
        )
    try:
        count, na, nt = int(header["count"]), int(header["na"]), int(header["nt"])
        norm = NormSpec(float(header["norm"]["offset"]), float(header["norm"]["scale"]))
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptHeaderError(f"header {hpath} lacks required fields: {e}") from e
    if header.get("dtype") != "f32":
        raise CorruptHeaderError(f"unsupported dtype {header.get('dtype')!r}")
    raw = path.read_bytes()
    expected = count * 2 * na * nt * 4
    if len(raw) != expected:
        raise TruncatedPayloadError(f"{path}: payload is {len(raw)} bytes, header promises {expected}")
    images = np.frombuffer(raw, dtype="<f4").reshape(count, 2, na, nt).copy()
    meta = {"count": count, "n_a": na, "n_t": nt}
    meta.update(header.get("generator", {}))
    return ChannelDataset(images, norm, meta)
