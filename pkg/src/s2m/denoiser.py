"""Noise-prediction network and its training loop.

A compact U-Net (two convolutions per level, additive sinusoidal timestep
embedding, skip connections) predicts the noise contained in ``x_t``. The
training objective is the plain mean squared error between drawn and
predicted noise with ``t`` uniform on ``1..T``.

Checkpoints are zip archives of ``.npy`` members written with fixed
timestamps, so identical parameters give byte-identical files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import NoiseSchedule

__all__ = [
    "CHECKPOINT_MAGIC",
    "CheckpointError",
    "Denoiser",
    "DenoiserConfig",
    "PatchSource",
    "TrainState",
    "UNet",
    "denoise",
    "init_denoiser",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "train_step",
]

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "S2M-CKPT-v1"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    input_rank: int = 2
    base_channels: int = 32
    depth: int = 3
    time_embed_dim: int = 128
    patch_shape: tuple = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "patch_shape", tuple(int(s) for s in self.patch_shape))
        if self.input_rank not in (2, 3):
            raise ValueError(f"input_rank must be 2 or 3, got {self.input_rank}")
        if len(self.patch_shape) != self.input_rank:
            raise ValueError(f"patch_shape {self.patch_shape} does not have rank {self.input_rank}")
        for name in ("base_channels", "depth", "time_embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        div = 2 ** self.depth
        bad = [s for s in self.patch_shape if s < 1 or s % div]
        if bad:
            raise ValueError(
                f"patch edges {self.patch_shape} must be divisible by 2**depth = {div}"
            )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch_shape"] = list(self.patch_shape)
        return d


@dataclass
class TrainState:
    step: int = 0
    loss_history: list = field(default_factory=list)
    checkpoint_path: str | None = None
    rng_seed: int = 0


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, conv):
        super().__init__()
        self.conv1 = conv(cin, cout, 3, padding=1)
        self.conv2 = conv(cout, cout, 3, padding=1)
        self.norm1 = _norm(cout)
        self.norm2 = _norm(cout)
        self.temb = nn.Linear(temb, cout)
        self.skip = conv(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.temb(emb)[(...,) + (None,) * (x.dim() - 2)]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class UNet(nn.Module):
    """Fully convolutional encoder-decoder; input and output are ``(B, 1, *spatial)``."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        conv = nn.Conv2d if config.input_rank == 2 else nn.Conv3d
        self._pool = F.avg_pool2d if config.input_rank == 2 else F.avg_pool3d
        temb = config.time_embed_dim
        chans = [config.base_channels * 2 ** i for i in range(config.depth + 1)]
        self.time_mlp = nn.Sequential(nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.inc = conv(1, chans[0], 3, padding=1)
        self.down = nn.ModuleList(ResBlock(chans[i], chans[i + 1], temb, conv) for i in range(config.depth))
        self.mid = ResBlock(chans[-1], chans[-1], temb, conv)
        self.up = nn.ModuleList(
            ResBlock(2 * chans[i + 1], chans[i], temb, conv) for i in reversed(range(config.depth))
        )
        self.out = conv(chans[0], 1, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(t, self.config.time_embed_dim).to(x.dtype)
        emb = self.time_mlp(emb)
        h = self.inc(x)
        skips = []
        for block in self.down:
            h = block(h, emb)
            skips.append(h)
            h = self._pool(h, 2)
        h = self.mid(h, emb)
        for block in self.up:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
        return self.out(h)


class Denoiser:
    """A noise-prediction network plus everything needed to resume training.

    ``net`` is any module mapping ``(x, t)`` tensors to a same-shape tensor;
    tests substitute parameter-free stubs. Calling the instance on numpy
    input runs :func:`denoise`.
    """

    def __init__(self, config: DenoiserConfig, net: nn.Module, seed: int = 0):
        self.config = config
        self.net = net
        self.seed = seed
        self.state = TrainState(rng_seed=seed)
        self.schedule: dict | None = None
        self.optimizer: torch.optim.Optimizer | None = None
        self.optimizer_params: dict = {}
        self.ema: dict[str, torch.Tensor] | None = None
        self.rng = np.random.default_rng(seed)

    @property
    def dtype(self) -> torch.dtype:
        p = next(self.net.parameters(), None)
        return p.dtype if p is not None else torch.float64

    @property
    def schedule_id(self) -> str | None:
        return NoiseSchedule.from_dict(self.schedule).id if self.schedule else None

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}

    @property
    def checkpoint_id(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.parameter_arrays().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()[:16]

    def ensure_optimizer(self, lr: float = 1e-4, betas=(0.9, 0.999), weight_decay: float = 0.0,
                         ema_decay: float = 0.0) -> None:
        if self.optimizer is not None:
            return
        params = [p for p in self.net.parameters() if p.requires_grad]
        self.optimizer_params = {"lr": lr, "betas": list(betas), "weight_decay": weight_decay,
                                 "ema_decay": ema_decay}
        if params:
            self.optimizer = torch.optim.Adam(params, lr=lr, betas=tuple(betas), weight_decay=weight_decay)
        if ema_decay > 0 and self.ema is None:
            self.ema = {k: v.detach().clone() for k, v in self.net.state_dict().items()}

    def __call__(self, x_t, t):
        return denoise(self, x_t, t)


def init_denoiser(config: DenoiserConfig, seed: int = 0) -> Denoiser:
    """Build a U-Net with parameters fully determined by ``seed``."""
    if not isinstance(config, DenoiserConfig):
        raise TypeError("config must be a DenoiserConfig")
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        net = UNet(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return Denoiser(config, net, seed)


def _to_batch(x: np.ndarray, rank: int) -> tuple[torch.Tensor, tuple]:
    """Reshape ``(*spatial)`` or ``(B, *spatial)`` to ``(B, 1, *spatial)``."""
    shape = x.shape
    if x.ndim == rank:
        x = x[None, None]
    elif x.ndim == rank + 1:
        x = x[:, None]
    else:
        raise ValueError(f"expected rank {rank} or {rank + 1} input, got shape {shape}")
    return torch.from_numpy(np.ascontiguousarray(x)), shape


def denoise(denoiser: Denoiser, x_t, t) -> np.ndarray:
    """Predict the noise in ``x_t`` at step ``t`` (scalar or one per batch item)."""
    x_t = np.asarray(x_t)
    rank = denoiser.config.input_rank
    div = 2 ** denoiser.config.depth
    if any(s % div for s in x_t.shape[-rank:]):
        raise ValueError(f"spatial shape {x_t.shape[-rank:]} not divisible by {div}")
    xb, shape = _to_batch(x_t, rank)
    xb = xb.to(denoiser.dtype)
    tb = torch.as_tensor(np.broadcast_to(np.asarray(t, dtype=np.int64), (xb.shape[0],)).copy())
    net = denoiser.net
    backup = None
    if denoiser.ema is not None:
        backup = {k: v.clone() for k, v in net.state_dict().items()}
        net.load_state_dict(denoiser.ema)
    try:
        net.eval()
        with torch.no_grad():
            out = net(xb, tb)
    finally:
        if backup is not None:
            net.load_state_dict(backup)
    return out.cpu().numpy().astype(x_t.dtype if x_t.dtype.kind == "f" else np.float64).reshape(shape)


def train_step(denoiser: Denoiser, batch_x0, schedule: NoiseSchedule, rng: np.random.Generator) -> float:
    """One optimizer step on the noise-prediction loss; returns the batch loss."""
    batch_x0 = np.asarray(batch_x0, dtype=np.float64)
    rank = denoiser.config.input_rank
    if batch_x0.ndim != rank + 1 or batch_x0.shape[1:] != denoiser.config.patch_shape:
        raise ValueError(
            f"batch shape {batch_x0.shape} does not match (B, *{denoiser.config.patch_shape})"
        )
    if not np.all(np.isfinite(batch_x0)) or batch_x0.min() < -1 - 1e-6 or batch_x0.max() > 1 + 1e-6:
        raise ValueError("batch values must be finite and within [-1, 1]")
    b = batch_x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=b)
    eps = rng.standard_normal(batch_x0.shape)
    ab = schedule.alpha_bars[t - 1].reshape(-1, *([1] * rank))
    x_t = np.sqrt(ab) * batch_x0 + np.sqrt(1.0 - ab) * eps

    dtype = denoiser.dtype
    xb = torch.from_numpy(x_t[:, None]).to(dtype)
    eb = torch.from_numpy(eps[:, None]).to(dtype)
    tb = torch.from_numpy(t)

    denoiser.net.train()
    pred = denoiser.net(xb, tb)
    loss = F.mse_loss(pred, eb)
    opt = denoiser.optimizer
    if opt is None and any(p.requires_grad for p in denoiser.net.parameters()):
        denoiser.ensure_optimizer()
        opt = denoiser.optimizer
    if opt is not None:
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        decay = denoiser.optimizer_params.get("ema_decay", 0.0)
        if denoiser.ema is not None and decay > 0:
            with torch.no_grad():
                for k, v in denoiser.net.state_dict().items():
                    if v.dtype.is_floating_point:
                        denoiser.ema[k].mul_(decay).add_(v, alpha=1 - decay)
                    else:
                        denoiser.ema[k].copy_(v)
    return float(loss.detach())


class PatchSource:
    """Uniform random crops from a collection of images.

    Each image is min-max normalized to [-1, 1] once, up front.
    """

    def __init__(self, images: Sequence[np.ndarray], patch_shape: tuple):
        self.patch_shape = tuple(patch_shape)
        self.images = []
        for img in images:
            img = np.asarray(img, dtype=np.float64)
            if img.ndim != len(self.patch_shape):
                raise ValueError(f"image rank {img.ndim} does not match patch rank {len(self.patch_shape)}")
            if any(s < p for s, p in zip(img.shape, self.patch_shape)):
                raise ValueError(f"image {img.shape} smaller than patch {self.patch_shape}")
            lo, hi = img.min(), img.max()
            scaled = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
            self.images.append(2.0 * scaled - 1.0)
        if not self.images:
            raise ValueError("no images")

    def __len__(self) -> int:
        return len(self.images)

    def sample(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        out = np.empty((batch_size, *self.patch_shape))
        idx = rng.integers(0, len(self.images), size=batch_size)
        for j, i in enumerate(idx):
            img = self.images[i]
            starts = [int(rng.integers(0, s - p + 1)) for s, p in zip(img.shape, self.patch_shape)]
            out[j] = img[tuple(slice(a, a + p) for a, p in zip(starts, self.patch_shape))]
        return out


def train(denoiser: Denoiser, dataset: PatchSource, steps: int, schedule: NoiseSchedule,
          optimizer_params: dict | None = None, checkpoint_every: int = 0,
          checkpoint_path: str | os.PathLike | None = None, batch_size: int = 8,
          log_every: int = 500) -> TrainState:
    """Run ``steps`` training steps, continuing from the denoiser's current state.

    Step numbers continue from ``denoiser.state.step`` so resumed runs append
    to the loss history. A non-finite loss raises ``FloatingPointError``.
    """
    if denoiser.schedule is not None and denoiser.schedule_id != schedule.id:
        raise CheckpointError(
            f"denoiser was trained with schedule {denoiser.schedule_id}, got {schedule.id}"
        )
    denoiser.schedule = schedule.to_dict()
    denoiser.ensure_optimizer(**(optimizer_params or {}))
    state = denoiser.state
    if checkpoint_path is not None:
        state.checkpoint_path = str(checkpoint_path)

    for _ in range(steps):
        batch = dataset.sample(denoiser.rng, batch_size)
        loss = train_step(denoiser, batch, schedule, denoiser.rng)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss} at step {state.step + 1}")
        state.step += 1
        state.loss_history.append((state.step, loss))
        if log_every and state.step % log_every == 0:
            recent = [v for _, v in state.loss_history[-log_every:]]
            log.info("step %d  loss %.5f", state.step, float(np.mean(recent)))
        if checkpoint_every and checkpoint_path and state.step % checkpoint_every == 0:
            save_checkpoint(denoiser, checkpoint_path)
    if checkpoint_path is not None:
        save_checkpoint(denoiser, checkpoint_path)
    return state


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(denoiser: Denoiser, path: str | os.PathLike) -> Path:
    """Write parameters, config, schedule, optimizer and RNG state atomically."""
    path = Path(path)
    members: dict[str, np.ndarray] = {}
    for k, v in denoiser.parameter_arrays().items():
        members[f"param/{k}"] = v
    if denoiser.ema is not None:
        for k, v in denoiser.ema.items():
            members[f"ema/{k}"] = v.detach().cpu().numpy()
    opt_groups = None
    if denoiser.optimizer is not None:
        sd = denoiser.optimizer.state_dict()
        opt_groups = sd["param_groups"]
        for idx, st in sd["state"].items():
            for key, val in st.items():
                members[f"opt/{idx}/{key}"] = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
    meta = {
        "magic": CHECKPOINT_MAGIC,
        "config": denoiser.config.to_dict(),
        "schedule": denoiser.schedule,
        "seed": denoiser.seed,
        "step": denoiser.state.step,
        "loss_history": [[int(s), float(v)] for s, v in denoiser.state.loss_history],
        "optimizer_params": denoiser.optimizer_params,
        "optimizer_param_groups": opt_groups,
        "rng_state": denoiser.rng.bit_generator.state,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr(zipfile.ZipInfo("MAGIC", _ZIP_DATE), CHECKPOINT_MAGIC.encode())
            zf.writestr(zipfile.ZipInfo("meta.json", _ZIP_DATE),
                        json.dumps(meta, sort_keys=True, default=_json_default).encode())
            for name in sorted(members):
                zf.writestr(zipfile.ZipInfo(name + ".npy", _ZIP_DATE), _npy_bytes(members[name]))
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return path


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, (tuple, np.ndarray)):
        return list(o)
    raise TypeError(type(o))


def load_checkpoint(path: str | os.PathLike) -> Denoiser:
    """Restore a :class:`Denoiser` written by :func:`save_checkpoint`."""
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint archive ({exc})") from exc
    with zf:
        names = set(zf.namelist())
        if "MAGIC" not in names or zf.read("MAGIC").decode() != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: missing or wrong magic, expected {CHECKPOINT_MAGIC}")
        meta = json.loads(zf.read("meta.json"))
        arrays = {
            n[: -len(".npy")]: np.lib.format.read_array(io.BytesIO(zf.read(n)), allow_pickle=False)
            for n in names if n.endswith(".npy")
        }
    config = DenoiserConfig(**meta["config"])
    den = init_denoiser(config, meta["seed"])
    params = {k[len("param/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
    den.net.load_state_dict(params)
    ema = {k[len("ema/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("ema/")}
    den.schedule = meta["schedule"]
    den.state = TrainState(
        step=meta["step"],
        loss_history=[(int(s), float(v)) for s, v in meta["loss_history"]],
        checkpoint_path=str(path),
        rng_seed=meta["seed"],
    )
    den.rng.bit_generator.state = meta["rng_state"]
    if meta["optimizer_param_groups"] is not None:
        op = meta["optimizer_params"]
        den.ensure_optimizer(**op)
        state = {}
        for k, v in arrays.items():
            if k.startswith("opt/"):
                _, idx, key = k.split("/", 2)
                state.setdefault(int(idx), {})[key] = torch.from_numpy(v)
        den.optimizer.load_state_dict({"state": state, "param_groups": meta["optimizer_param_groups"]})
    elif meta["optimizer_params"]:
        den.ensure_optimizer(**meta["optimizer_params"])
    if ema:
        den.ema = ema
    return den
