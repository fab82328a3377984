"""Small time-conditional noise-prediction CNN with explicit backprop.

Four 3x3 convolutions (1 -> 16 -> 32 -> 16 -> 1 channels by default) with
zero padding and a SiLU between layers. The diffusion step enters through a
sinusoidal embedding mapped by one learned affine to per-channel biases
that are added after the first two convolutions.

Activations are kept channels-last, (B, H, W, C), so that every convolution
is one im2col gather followed by a single matrix product.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import kernels
from .diffusion import (
    ScheduleTable,
    SchedulerConfig,
    SimplexNoiseConfig,
    build_schedule,
    forward_noise,
    sample_simplex_noise,
)
from .errors import BadMagic, ConfigMismatch, FormatError, TruncatedPayload

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DENO0001"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    widths: tuple = (1, 16, 32, 16, 1)
    time_dim: int = 32
    time_layers: tuple = (0, 1)
    activation: str = "silu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "time_layers", tuple(int(i) for i in self.time_layers))
        if self.widths[0] != 1 or self.widths[-1] != 1:
            raise ValueError("denoiser maps one channel to one channel")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        if self.activation not in ("silu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        """Published settings: Adam, lr 2.5e-5, batch 4, 60 epochs."""
        return cls(learning_rate=2.5e-5, batch_size=4, epochs=60, **kw)


def _layout(arch: ArchConfig):
    spec = []
    for i in range(arch.n_layers):
        cin, cout = arch.widths[i], arch.widths[i + 1]
        spec.append((f"conv{i}.w", (9 * cin, cout), 9 * cin))
        spec.append((f"conv{i}.b", (cout,), 0))
    n_time = sum(arch.widths[i + 1] for i in arch.time_layers)
    spec.append(("time.w", (arch.time_dim, n_time), arch.time_dim))
    spec.append(("time.b", (n_time,), 0))
    offsets = {}
    pos = 0
    for name, shape, fan_in in spec:
        size = int(np.prod(shape))
        offsets[name] = (pos, shape, fan_in)
        pos += size
    return offsets, pos


def time_embedding(t, dim):
    """Sinusoidal embedding, (B,) steps -> (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class DenoiserModel:
    """Parameters live in one flat array; ``view(name)`` exposes each tensor."""

    def __init__(self, arch: ArchConfig = ArchConfig(), params=None, dtype=np.float32):
        self.arch = arch
        self.offsets, self.n_params = _layout(arch)
        if params is None:
            params = np.zeros(self.n_params, dtype=dtype)
        params = np.asarray(params, dtype=dtype)
        if params.shape != (self.n_params,):
            raise ConfigMismatch(f"expected {self.n_params} parameters, got {params.shape}")
        self.params = params

    @classmethod
    def initialized(cls, arch: ArchConfig = ArchConfig(), seed=0, dtype=np.float32):
        """Weights uniform in +-1/sqrt(fan_in), biases zero."""
        m = cls(arch, dtype=dtype)
        rng = np.random.default_rng(seed)
        for name, (_, shape, fan_in) in m.offsets.items():
            if fan_in:
                s = 1.0 / np.sqrt(fan_in)
                m.view(name)[...] = rng.uniform(-s, s, size=shape)
        return m

    def view(self, name, flat=None):
        flat = self.params if flat is None else flat
        off, shape, _ = self.offsets[name]
        return flat[off:off + int(np.prod(shape))].reshape(shape)

    def astype(self, dtype) -> "DenoiserModel":
        return DenoiserModel(self.arch, self.params.astype(dtype), dtype=dtype)

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.arch, self.params.copy(), dtype=self.params.dtype)

    # -------------------------------------------------------------- forward

    def _act(self, z):
        if self.arch.activation == "identity":
            return z
        return z * _sigmoid(z)

    def _act_grad(self, z):
        if self.arch.activation == "identity":
            return np.ones_like(z)
        s = _sigmoid(z)
        return s * (1.0 + z * (1.0 - s))

    def _time_biases(self, t, batch):
        dt = self.params.dtype
        t = np.broadcast_to(np.asarray(t), (batch,))
        emb = time_embedding(t, self.arch.time_dim).astype(dt)
        tb = emb @ self.view("time.w") + self.view("time.b")
        out, pos = {}, 0
        for i in self.arch.time_layers:
            c = self.arch.widths[i + 1]
            out[i] = tb[:, pos:pos + c]
            pos += c
        return emb, out

    def forward(self, x, t, keep=False):
        """x: (B, H, W) -> (B, H, W); ``keep`` retains the backward cache."""
        dt = self.params.dtype
        x = np.asarray(x, dtype=dt)
        if x.ndim != 3:
            raise ValueError(f"expected (B, H, W) input, got shape {x.shape}")
        B, H, W = x.shape
        emb, tbias = self._time_biases(t, B)
        h = x[..., None]
        cache = []
        L = self.arch.n_layers
        for i in range(L):
            cin, cout = self.arch.widths[i], self.arch.widths[i + 1]
            cols = kernels.im2col3x3(np.pad(h, ((0, 0), (1, 1), (1, 1), (0, 0))))
            z = (cols @ self.view(f"conv{i}.w") + self.view(f"conv{i}.b")).reshape(B, H, W, cout)
            if i in tbias:
                z += tbias[i][:, None, None, :]
            h = self._act(z) if i < L - 1 else z
            if keep:
                cache.append((cols, z))
        out = h[..., 0]
        if keep:
            return out, (emb, cache, (B, H, W))
        return out

    def predict_noise(self, slices, t):
        return self.forward(slices, t)

    # -------------------------------------------------------------- backward

    def backward(self, dout, state):
        """Gradient of a scalar loss w.r.t. the flat parameter vector."""
        emb, cache, (B, H, W) = state
        grad = np.zeros_like(self.params)
        L = self.arch.n_layers
        d = np.asarray(dout, dtype=self.params.dtype)[..., None]
        dtime = {}
        for i in range(L - 1, -1, -1):
            cols, z = cache[i]
            cin, cout = self.arch.widths[i], self.arch.widths[i + 1]
            dz = d if i == L - 1 else d * self._act_grad(z)
            if i in self.arch.time_layers:
                dtime[i] = dz.sum(axis=(1, 2))
            dz2 = dz.reshape(-1, cout)
            self.view(f"conv{i}.w", grad)[...] = cols.T @ dz2
            self.view(f"conv{i}.b", grad)[...] = dz2.sum(axis=0)
            if i > 0:
                dcols = dz2 @ self.view(f"conv{i}.w").T
                dpad = kernels.col2im3x3(dcols, (B, H, W, cin))
                d = dpad[:, 1:-1, 1:-1, :]
        dtb = np.concatenate([dtime[i] for i in self.arch.time_layers], axis=1)
        self.view("time.w", grad)[...] = emb.T @ dtb
        self.view("time.b", grad)[...] = dtb.sum(axis=0)
        return grad


def mse_loss_and_grad(model: DenoiserModel, x_t, t, target):
    pred, state = model.forward(x_t, t, keep=True)
    diff = pred - target.astype(pred.dtype)
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    dpred = (2.0 / diff.size) * diff
    return loss, model.backward(dpred, state)


# ------------------------------------------------------------------ optimiser


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n, dtype=np.float32):
        return cls(np.zeros(n, dtype), np.zeros(n, dtype), 0)


def adam_update(params, grad, state: AdamState, cfg: TrainConfig):
    state.step += 1
    dt = params.dtype
    b1, b2 = dt.type(cfg.beta1), dt.type(cfg.beta2)
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    mhat = state.m / dt.type(1.0 - cfg.beta1 ** state.step)
    vhat = state.v / dt.type(1.0 - cfg.beta2 ** state.step)
    params -= dt.type(cfg.learning_rate) * mhat / (np.sqrt(vhat) + dt.type(cfg.eps))


# ------------------------------------------------------------------ training


@dataclass
class Trainer:
    """Owns the model, optimiser moments and RNG for one training run."""

    model: DenoiserModel
    table: ScheduleTable
    noise_cfg: SimplexNoiseConfig = SimplexNoiseConfig()
    cfg: TrainConfig = field(default_factory=TrainConfig)
    sched_cfg: SchedulerConfig = SchedulerConfig()
    opt: AdamState = None
    rng: np.random.Generator = None
    epoch: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.opt is None:
            self.opt = AdamState.zeros(self.model.n_params, self.model.params.dtype)
        if self.rng is None:
            self.rng = np.random.default_rng(self.cfg.seed)

    def draw(self, batch):
        """Sample steps and simplex noise for one batch."""
        n, h, w = batch.shape
        t = self.rng.integers(1, self.table.T, size=n)
        seeds = self.rng.integers(0, 2**31 - 1, size=n)
        noise = np.stack([sample_simplex_noise((h, w), self.noise_cfg, int(s)) for s in seeds])
        return t, noise

    def step(self, batch) -> float:
        batch = np.asarray(batch, dtype=np.float32)
        if batch.ndim != 3 or len(batch) == 0:
            raise ValueError("train_step needs a non-empty (B, H, W) batch")
        t, noise = self.draw(batch)
        return self.step_with(batch, t, noise)

    def step_with(self, batch, t, noise) -> float:
        x_t = forward_noise(batch.astype(np.float64), t, noise, self.table).astype(np.float32)
        loss, grad = mse_loss_and_grad(self.model, x_t, t, noise.astype(np.float32))
        adam_update(self.model.params, grad, self.opt, self.cfg)
        return loss

    def run_epoch(self, slices) -> float:
        order = self.rng.permutation(len(slices))
        bs = self.cfg.batch_size
        losses = [self.step(slices[order[a:a + bs]]) for a in range(0, len(order), bs)]
        self.epoch += 1
        mean = float(np.mean(losses))
        self.history.append(mean)
        log.info("epoch %d loss %.4f", self.epoch, mean)
        return mean

    def fit(self, slices, epochs=None, callback=None):
        slices = np.asarray(slices, dtype=np.float32)
        for _ in range(self.cfg.epochs if epochs is None else epochs):
            self.run_epoch(slices)
            if callback is not None:
                callback(self)
        return self.history


def train_step(model, batch, table, noise_cfg, cfg, rng, opt=None) -> float:
    """One Adam step on the noise-prediction MSE; returns the loss."""
    tr = Trainer(model, table, noise_cfg, cfg, opt=opt, rng=rng)
    return tr.step(batch)


# ------------------------------------------------------------------ gradient check


def check_gradients(model: DenoiserModel, batch, t, n_params=200, h=1e-3, seed=0, target=None,
                    floor=1e-6):
    """Max relative error between backprop and central differences.

    Runs on a float64 copy of ``model``. ``target`` defaults to fixed
    standard-normal noise; the loss is the same MSE used for training.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    m64 = model.astype(np.float64)
    rng = np.random.default_rng(seed)
    x = np.asarray(batch, dtype=np.float64)
    if target is None:
        target = rng.standard_normal(x.shape)
    target = np.asarray(target, dtype=np.float64)
    _, grad = mse_loss_and_grad(m64, x, t, target)
    idx = rng.choice(m64.n_params, size=min(n_params, m64.n_params), replace=False)
    worst = 0.0
    for k in idx:
        orig = m64.params[k]
        m64.params[k] = orig + h
        lp = np.mean((m64.forward(x, t) - target) ** 2)
        m64.params[k] = orig - h
        lm = np.mean((m64.forward(x, t) - target) ** 2)
        m64.params[k] = orig
        num = (lp - lm) / (2 * h)
        err = abs(grad[k] - num) / max(abs(grad[k]), abs(num), floor)
        worst = max(worst, err)
    return worst


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(path, trainer: Trainer) -> None:
    """Write model, Adam moments, RNG state and configs (float32 LE payload)."""
    meta = {
        "arch": trainer.model.arch.to_dict(),
        "scheduler": trainer.sched_cfg.to_dict(),
        "noise": trainer.noise_cfg.to_dict(),
        "train": asdict(trainer.cfg),
        "epoch": trainer.epoch,
        "history": trainer.history,
        "adam_step": trainer.opt.step,
        "n_params": trainer.model.n_params,
        "rng": trainer.rng.bit_generator.state,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    payload = b"".join(np.asarray(a, "<f4").tobytes()
                       for a in (trainer.model.params, trainer.opt.m, trainer.opt.v))
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob + payload)


def load_checkpoint(path, expect_scheduler: SchedulerConfig = None) -> Trainer:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise BadMagic(f"{path}: not a denoiser checkpoint")
    if len(raw) < 16:
        raise TruncatedPayload(f"{path}: header truncated")
    version, n_blob = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise ConfigMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}")
    try:
        meta = json.loads(raw[16:16 + n_blob])
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata") from exc
    arch = ArchConfig(**meta["arch"])
    sched = SchedulerConfig(**meta["scheduler"])
    if expect_scheduler is not None and sched != expect_scheduler:
        raise ConfigMismatch(f"checkpoint scheduler {sched} differs from requested {expect_scheduler}")
    n = meta["n_params"]
    model = DenoiserModel(arch)
    if model.n_params != n:
        raise ConfigMismatch(f"architecture has {model.n_params} parameters, checkpoint {n}")
    body = raw[16 + n_blob:]
    if len(body) < 12 * n:
        raise TruncatedPayload(f"{path}: payload truncated")
    arrs = [np.frombuffer(body, "<f4", n, 4 * n * i).astype(np.float32) for i in range(3)]
    model.params = arrs[0]
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    tcfg = TrainConfig(**meta["train"])
    return Trainer(model, build_schedule(sched), SimplexNoiseConfig(**meta["noise"]), tcfg, sched,
                   AdamState(arrs[1], arrs[2], meta["adam_step"]), rng, meta["epoch"], list(meta["history"]))
