"""DDPM noise schedule, simplex noise and reconstruction from a noised input.

Schedule arrays are 0-indexed: ``alpha_bar[k]`` is the signal fraction after
``k + 1`` noising steps. The reverse chain works in the usual 1-based step
numbering ``s = t_start, ..., 1`` where step ``s`` sits at table index
``s - 1`` and the level below step 1 is the clean image (alpha_bar = 1).
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from typing import Protocol

import numpy as np

from . import kernels


@dataclass(frozen=True)
class SchedulerConfig:
    T: int = 1000
    beta_start: float = 0.001
    beta_end: float = 0.015
    kind: str = "scaled_linear"

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        if self.kind not in ("scaled_linear", "linear"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ScheduleTable:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T):
            raise IndexError(f"diffusion step {t} outside [0, {self.T})")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "beta", "alpha_bar"])
            for t in range(self.T):
                w.writerow([t, repr(float(self.beta[t])), repr(float(self.alpha_bar[t]))])


def build_schedule(cfg: SchedulerConfig = SchedulerConfig()) -> ScheduleTable:
    """Scaled-linear schedule: beta is linear in sqrt-space."""
    frac = np.arange(cfg.T, dtype=np.float64) / (cfg.T - 1)
    if cfg.kind == "scaled_linear":
        lo, hi = np.sqrt(cfg.beta_start), np.sqrt(cfg.beta_end)
        beta = (lo + frac * (hi - lo)) ** 2
    else:
        beta = cfg.beta_start + frac * (cfg.beta_end - cfg.beta_start)
    # endpoints exact rather than squared square roots
    beta[0], beta[-1] = cfg.beta_start, cfg.beta_end
    alpha = 1.0 - beta
    return ScheduleTable(beta, alpha, np.cumprod(alpha))


# ------------------------------------------------------------------ simplex noise


@dataclass(frozen=True)
class SimplexNoiseConfig:
    octaves: int = 6
    base_frequency: float = 1.0 / 64.0
    persistence: float = 0.8
    normalize_to_unit: bool = True

    def __post_init__(self):
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")
        if not 0.0 < self.persistence <= 1.0:
            raise ValueError("persistence must lie in (0, 1]")
        if self.base_frequency <= 0:
            raise ValueError("base_frequency must be positive")

    def to_dict(self):
        return asdict(self)


def sample_simplex_noise(dims2d, cfg: SimplexNoiseConfig = SimplexNoiseConfig(), seed=0, backend=None):
    """Multi-octave simplex field of shape ``dims2d = (h, w)``.

    Octave ``o`` samples at frequency ``base_frequency * 2**o`` (cycles per
    pixel) with amplitude ``persistence**o`` and its own random offset.
    """
    h, w = dims2d
    rng = np.random.default_rng(seed)
    perm = rng.permutation(256).astype(np.int64)
    perm = np.concatenate([perm, perm])
    offsets = rng.uniform(0.0, 256.0, size=(cfg.octaves, 2))
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    field = np.zeros((h, w))
    amp = 1.0
    freq = cfg.base_frequency
    for o in range(cfg.octaves):
        field += amp * kernels.simplex2d(xs * freq + offsets[o, 0], ys * freq + offsets[o, 1], perm, backend)
        amp *= cfg.persistence
        freq *= 2.0
    if cfg.normalize_to_unit:
        field -= field.mean()
        sd = field.std()
        if sd > 0:
            field /= sd
        field -= field.mean()
    return field


def noise_seed(seed, slice_id, tag, step) -> int:
    return int(np.random.SeedSequence([int(seed), int(slice_id), int(tag), int(step)]).generate_state(1)[0])


# ------------------------------------------------------------------ forward / inverse


def forward_noise(x0, t, noise, table: ScheduleTable):
    """Closed-form jump ``sqrt(ab[t]) x0 + sqrt(1 - ab[t]) noise``.

    ``t`` may be a scalar or one step per leading-axis sample.
    """
    table.check_t(t)
    ab = _per_sample(table.alpha_bar[t], x0)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise).astype(np.result_type(x0, noise), copy=False)


def estimate_x0(x_t, predicted_noise, t, table: ScheduleTable):
    table.check_t(t)
    ab = _per_sample(table.alpha_bar[t], x_t)
    return ((x_t - np.sqrt(1.0 - ab) * predicted_noise) / np.sqrt(ab)).astype(x_t.dtype, copy=False)


def _per_sample(vals, x):
    vals = np.asarray(vals, dtype=np.float64)
    if vals.ndim == 0:
        return vals
    return vals.reshape((-1,) + (1,) * (np.ndim(x) - 1))


# ------------------------------------------------------------------ reverse chain


class Denoiser(Protocol):
    def predict_noise(self, slices: np.ndarray, t) -> np.ndarray:
        """(N, H, W) noisy slices at table index t -> predicted noise, same shape."""


def _chain(x0, ids, t_start, denoiser, table, noise_cfg, seed):
    n, h, w = x0.shape
    k0 = t_start - 1
    eps0 = np.stack([sample_simplex_noise((h, w), noise_cfg, noise_seed(seed, i, 0, t_start)) for i in ids])
    x = forward_noise(x0.astype(np.float64), k0, eps0, table).astype(np.float32)
    for s in range(t_start, 0, -1):
        k = s - 1
        eps = np.asarray(denoiser.predict_noise(x, k), dtype=np.float64)
        ab = table.alpha_bar[k]
        ab_prev = table.alpha_bar[k - 1] if k > 0 else 1.0
        beta = table.beta[k]
        mean = (x - (beta / np.sqrt(1.0 - ab)) * eps) / np.sqrt(table.alpha[k])
        if s > 1:
            var = (1.0 - ab_prev) / (1.0 - ab) * beta
            z = np.stack([sample_simplex_noise((h, w), noise_cfg, noise_seed(seed, i, 1, s)) for i in ids])
            mean = mean + np.sqrt(var) * z
        x = mean.astype(np.float32)
    return x


def reconstruct(x0_slices, t_start, denoiser: Denoiser, table: ScheduleTable,
                noise_cfg: SimplexNoiseConfig = SimplexNoiseConfig(), seed=0,
                slice_ids=None, chunk=8, workers=1):
    """Noise slices to step ``t_start`` and run the reverse chain back to 0.

    Slices are processed in fixed chunks of ``chunk``; noise for slice ``i``
    is keyed by ``(seed, slice_ids[i], step)``, so results do not depend on
    ``workers``. Output is clipped to [0, 1].
    """
    x0 = np.asarray(x0_slices, dtype=np.float32)
    if x0.ndim != 3:
        raise ValueError("expected a (N, H, W) stack of slices")
    if not 0 < t_start < table.T:
        raise ValueError(f"t_start must lie in (0, {table.T})")
    ids = np.arange(len(x0)) if slice_ids is None else np.asarray(slice_ids)
    bounds = [(a, min(a + chunk, len(x0))) for a in range(0, len(x0), chunk)]

    def run(b):
        a, e = b
        return _chain(x0[a:e], ids[a:e], t_start, denoiser, table, noise_cfg, seed)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    out = np.concatenate(parts) if parts else x0.copy()
    return np.clip(out, 0.0, 1.0)
