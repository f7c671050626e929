"""Training of the noise predictor.

Timesteps are drawn from p(t) ~ exp(-3t/T) on {1..T}.  The objective is a
Smooth-L1 loss on the noise residual, weighted per sample by an amplitude
term (large true noise) and an edge term (transitions in the clean trace).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import DiffusionSchedule, cosine_schedule
from .nnet import NetConfig, UNet1D, init_params

log = logging.getLogger(__name__)

EDGE_KERNEL = np.full(3, 1.0 / 3.0)
TIMESTEP_DECAY = 3.0


@dataclass(frozen=True)
class LossConfig:
    lambda_amp: float = 14.53
    lambda_edge: float = 8.95
    edge_mode: str = "magnitude"

    def __post_init__(self):
        if self.lambda_amp < 0 or self.lambda_edge < 0:
            raise ValueError("loss weights must be non-negative")
        if self.edge_mode not in ("magnitude", "literal"):
            raise ValueError(f"unknown edge_mode {self.edge_mode!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch: int = 16
    lr0: float = 7.61e-5
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not 0 <= self.lr_min <= self.lr0 and not (self.lr0 == 0 and self.lr_min == 0):
            raise ValueError("need 0 <= lr_min <= lr0")


# -- timestep sampling ------------------------------------------------------


def timestep_probs(T: int) -> np.ndarray:
    """p(t) for t = 1..T (index 0 holds t = 1)."""
    w = np.exp(-TIMESTEP_DECAY * np.arange(1, T + 1) / T)
    return w / w.sum()


def sample_timestep(T: int, rng: np.random.Generator, size=None):
    if T < 1:
        raise ValueError("T must be >= 1")
    cdf = np.cumsum(timestep_probs(T))
    u = rng.random(size)
    t = np.searchsorted(cdf, u * cdf[-1], side="right") + 1
    return np.minimum(t, T) if size is not None else int(min(t, T))


# -- loss -----------------------------------------------------------------


def smooth_l1(r):
    r = np.asarray(r, dtype=np.float64)
    a = np.abs(r)
    return np.where(a < 1, 0.5 * r * r, a - 0.5)


def amp_weight(eps, lambda_amp: float):
    return 1.0 + lambda_amp * np.abs(np.asarray(eps, dtype=np.float64))


def _edge_signal(x0: np.ndarray, mode: str) -> np.ndarray:
    d1 = np.zeros_like(x0)
    d1[..., :-1] = x0[..., 1:] - x0[..., :-1]
    d2 = np.zeros_like(x0)
    d2[..., 1:-1] = x0[..., 2:] - 2 * x0[..., 1:-1] + x0[..., :-2]
    if mode == "magnitude":
        return np.abs(d1) + 0.5 * np.abs(d2)
    return d1 + 0.5 * d2


def edge_weight(x0, lambda_edge: float, mode: str = "magnitude"):
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[-1] < 3:
        raise ValueError("edge weights need at least 3 samples")
    g = _edge_signal(x0, mode)
    gp = np.pad(g, [(0, 0)] * (g.ndim - 1) + [(1, 1)])
    smoothed = (gp[..., :-2] + gp[..., 1:-1] + gp[..., 2:]) / 3.0
    return 1.0 + lambda_edge * smoothed


def total_loss(eps, eps_hat, x0, cfg: LossConfig = LossConfig()) -> float:
    eps = np.asarray(eps, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if not eps.shape == eps_hat.shape == x0.shape:
        raise ValueError("eps, eps_hat and x0 must have equal shapes")
    w = amp_weight(eps, cfg.lambda_amp)
    if cfg.lambda_edge != 0:
        # the edge term is identically 1 otherwise, and needs >= 3 samples
        w = w * edge_weight(x0, cfg.lambda_edge, cfg.edge_mode)
    return float(np.mean(w * smooth_l1(eps - eps_hat)))


def edge_weight_torch(x0: torch.Tensor, lambda_edge: float, mode: str) -> torch.Tensor:
    d1 = F.pad(x0[:, 1:] - x0[:, :-1], (0, 1))
    d2 = F.pad(x0[:, 2:] - 2 * x0[:, 1:-1] + x0[:, :-2], (1, 1))
    g = d1.abs() + 0.5 * d2.abs() if mode == "magnitude" else d1 + 0.5 * d2
    k = torch.full((1, 1, 3), 1.0 / 3.0, dtype=x0.dtype)
    return 1.0 + lambda_edge * F.conv1d(g[:, None, :], k, padding=1)[:, 0, :]


def weighted_loss_torch(eps: torch.Tensor, eps_hat: torch.Tensor, x0: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Batch mean of the per-trace weighted Smooth-L1 objective; inputs are (B, N)."""
    w = (1.0 + cfg.lambda_amp * eps.abs()) * edge_weight_torch(x0, cfg.lambda_edge, cfg.edge_mode)
    base = F.smooth_l1_loss(eps_hat, eps, reduction="none", beta=1.0)
    return (w * base).mean()


# -- optimization ---------------------------------------------------------


def cosine_anneal_lr(epoch: float, cfg: TrainConfig) -> float:
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1 + math.cos(math.pi * epoch / cfg.epochs))


def make_optimizer(net: UNet1D, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(net.parameters(), lr=cfg.lr0, weight_decay=cfg.weight_decay)


def draw_batch(x0: np.ndarray, T: int, rng: np.random.Generator):
    """Sample (t, eps) for a batch of clean traces."""
    t = sample_timestep(T, rng, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    return t, eps


def batch_loss(net: UNet1D, x0, t, eps, sched: DiffusionSchedule, loss_cfg: LossConfig) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    x0_t = torch.as_tensor(np.asarray(x0), dtype=dtype)
    eps_t = torch.as_tensor(np.asarray(eps), dtype=dtype)
    ab = torch.as_tensor(sched.alpha_bars[np.asarray(t)], dtype=dtype)[:, None]
    x_t = ab.sqrt() * x0_t + (1 - ab).sqrt() * eps_t
    eps_hat = net(x_t, torch.as_tensor(np.asarray(t), dtype=torch.long))
    return weighted_loss_torch(eps_t, eps_hat, x0_t, loss_cfg)


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, batch: int, indices):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} (trace indices {list(indices)})")
        self.epoch, self.batch, self.indices = epoch, batch, list(indices)


@dataclass
class Checkpoint:
    cfg: NetConfig
    T: int
    s: float
    params: dict[str, torch.Tensor]
    optim: dict[str, torch.Tensor] = field(default_factory=dict)
    optim_step: int = 0
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def build_net(self) -> UNet1D:
        net = UNet1D(self.cfg)
        net.load_state_dict({k: v.to(torch.float32) for k, v in self.params.items()})
        return net.to(torch.float32)

    def schedule(self) -> DiffusionSchedule:
        return cosine_schedule(self.T, self.s)


def snapshot(net: UNet1D, opt: torch.optim.Optimizer | None, sched: DiffusionSchedule, epoch: int, history, **extra) -> Checkpoint:
    params = {k: v.detach().clone() for k, v in net.state_dict().items()}
    optim, step = {}, 0
    if opt is not None:
        names = {id(p): n for n, p in net.named_parameters()}
        for group in opt.param_groups:
            for p in group["params"]:
                st = opt.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                optim[f"optim.exp_avg/{n}"] = st["exp_avg"].detach().clone()
                optim[f"optim.exp_avg_sq/{n}"] = st["exp_avg_sq"].detach().clone()
                step = int(st["step"])
    return Checkpoint(net.cfg, sched.T, sched.s, params, optim, step, epoch, list(history), dict(extra))


def restore_optimizer(net: UNet1D, opt: torch.optim.Optimizer, ckpt: Checkpoint) -> None:
    if not ckpt.optim:
        return
    for n, p in net.named_parameters():
        opt.state[p] = {
            "step": torch.tensor(float(ckpt.optim_step)),
            "exp_avg": ckpt.optim[f"optim.exp_avg/{n}"].to(p.dtype).clone(),
            "exp_avg_sq": ckpt.optim[f"optim.exp_avg_sq/{n}"].to(p.dtype).clone(),
        }


# -- checkpoint container -------------------------------------------------

MAGIC = b"SSDM"
FORMAT_VERSION = 1


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    header = {
        "net": ckpt.cfg.to_dict(),
        "T": ckpt.T,
        "s": ckpt.s,
        "epoch": ckpt.epoch,
        "loss_history": ckpt.loss_history,
        "optim_step": ckpt.optim_step,
        **({"extra": ckpt.extra} if ckpt.extra else {}),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for name, tensor in list(ckpt.params.items()) + list(ckpt.optim.items()):
            nb = name.encode("utf-8")
            arr = tensor.detach().to(torch.float32).contiguous().numpy()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an SSDM checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    pos = 12 + hlen
    params, optim = {}, {}
    while pos < len(data):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
        pos += 4 * count
        (optim if name.startswith("optim.") else params)[name] = torch.from_numpy(arr)
    return Checkpoint(
        NetConfig.from_dict(header["net"]),
        header["T"],
        header["s"],
        params,
        optim,
        header.get("optim_step", 0),
        header["epoch"],
        header["loss_history"],
        header.get("extra", {}),
    )


def params_digest(net: UNet1D) -> str:
    h = hashlib.sha256()
    for k, v in net.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().to(torch.float32).numpy().tobytes())
    return h.hexdigest()


# -- training loop --------------------------------------------------------


def fit(
    data: np.ndarray,
    net: UNet1D | None = None,
    sched: DiffusionSchedule | None = None,
    train_cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    net_cfg: NetConfig | None = None,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    keep_all: bool = False,
) -> Checkpoint:
    """Train ``net`` on clean traces ``data`` (shape ``(n, N)``).

    Each epoch reshuffles with a generator derived from ``(seed, epoch)``, so a
    run resumed from a checkpoint follows the same sample stream as an
    uninterrupted one.  The latest checkpoint is written to
    ``out_dir/last.ssdm`` after every epoch (``keep_all`` also keeps one file
    per epoch).
    """
    data = np.asarray(data, dtype=np.float64)
    sched = sched or cosine_schedule()
    if resume is not None:
        net = resume.build_net()
        sched = resume.schedule()
    elif net is None:
        net = init_params(net_cfg or NetConfig(input_len=data.shape[1]), seed=train_cfg.seed)
    opt = make_optimizer(net, train_cfg)
    history: list[float] = []
    start = 0
    if resume is not None:
        restore_optimizer(net, opt, resume)
        history = list(resume.loss_history)
        start = resume.epoch
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    n = data.shape[0]
    ckpt = snapshot(net, opt, sched, start, history)
    for epoch in range(start, train_cfg.epochs):
        rng = np.random.default_rng([train_cfg.seed, epoch])
        lr = cosine_anneal_lr(epoch, train_cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        order = rng.permutation(n)
        net.train()
        total = 0.0
        nb = 0
        for b, i in enumerate(range(0, n, train_cfg.batch)):
            idx = order[i : i + train_cfg.batch]
            x0 = data[idx]
            t, eps = draw_batch(x0, sched.T, rng)
            loss = batch_loss(net, x0, t, eps, sched, loss_cfg)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(epoch, b, idx)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach())
            nb += 1
        history.append(total / max(nb, 1))
        log.info("epoch %d/%d lr=%.3g loss=%.5f", epoch + 1, train_cfg.epochs, lr, history[-1])
        ckpt = snapshot(net, opt, sched, epoch + 1, history)
        if out is not None:
            save_checkpoint(ckpt, out / "last.ssdm")
            if keep_all:
                save_checkpoint(ckpt, out / f"epoch{epoch + 1:04d}.ssdm")
    return ckpt
