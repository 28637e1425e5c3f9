"""Generator training: Adam on the generator only, EOT-sampled objective."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import generator as gen_mod
from .errors import ContractError, ImageFormatError, StateError, TrainingAborted
from .generator import DEFAULT_EPSILON, PerturbationGenerator
from .imagecore import ProtectionTarget, check_spatial, load_image
from .objectives import (
    EOTConfig,
    LossWeights,
    latent_adv_loss,
    pert_hinge_loss,
    sample_transform,
    total_objective,
)
from .surrogate import SurrogateEncoder, encode

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 42
    image_size: int = 512
    width_multiplier: float = 1.0
    epsilon: float = DEFAULT_EPSILON
    eot: EOTConfig = field(default_factory=EOTConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    weight_w: float = 1.0
    threshold_c: float = 0.0
    reduction: str = "sum"
    target: str = "builtin"
    surrogate: str = "builtin"
    checkpoint_every: int = 50

    def __post_init__(self):
        if isinstance(self.eot, dict):
            self.eot = EOTConfig(**self.eot)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.epsilon <= 1:
            raise ContractError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.reduction not in ("sum", "mean"):
            raise ContractError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")
        if self.checkpoint_every < 0:
            raise ContractError("checkpoint_every must be >= 0")
        check_spatial(self.image_size, self.image_size)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    l_adv: list[float] = field(default_factory=list)
    l_pert: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    update_norm: list[float] = field(default_factory=list)
    checkpoints: dict[str, str] = field(default_factory=dict)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "l_adv", "l_pert", "total", "seconds"])
            for i, row in enumerate(zip(self.l_adv, self.l_pert, self.total, self.seconds), start=1):
                writer.writerow([i, *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamMoments:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


@torch.no_grad()
def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    moments: AdamMoments,
    hyper: AdamHyper,
) -> tuple[dict[str, torch.Tensor], AdamMoments]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if set(grads) != set(params):
        raise ContractError("gradient names do not match parameter names")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ContractError(f"gradient for {name} has shape {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            raise TrainingAborted(f"non-finite gradient for {name} at optimizer step {moments.step + 1}")
    moments.step += 1
    t = moments.step
    bc1 = 1 - hyper.beta1**t
    bc2 = 1 - hyper.beta2**t
    for name, p in params.items():
        g = grads[name].to(p.dtype)
        m = moments.m.get(name)
        v = moments.v.get(name)
        if m is None:
            m = torch.zeros_like(p)
            v = torch.zeros_like(p)
        m = hyper.beta1 * m + (1 - hyper.beta1) * g
        v = hyper.beta2 * v + (1 - hyper.beta2) * g * g
        moments.m[name] = m
        moments.v[name] = v
        p -= hyper.lr * (m / bc1) / (torch.sqrt(v / bc2) + hyper.eps)
    return params, moments


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def load_dataset(items: Iterable, image_size: int) -> torch.Tensor:
    """Stack images from paths or tensors; unreadable files are skipped."""
    images = []
    for item in items:
        if isinstance(item, torch.Tensor):
            img = item
        else:
            try:
                img = load_image(item, resize_to=image_size)
            except (OSError, ImageFormatError) as exc:
                log.warning("skipping %s: %s", item, exc)
                continue
        if tuple(img.shape) != (3, image_size, image_size):
            raise ContractError(f"image shape {tuple(img.shape)} does not match size {image_size}")
        images.append(img.float())
    if not images:
        raise ContractError("dataset is empty")
    return torch.stack(images)


def resolve_target(cfg: TrainConfig) -> ProtectionTarget:
    if cfg.target == "builtin":
        return ProtectionTarget.builtin(cfg.image_size, cfg.weight_w, cfg.threshold_c)
    img = load_image(cfg.target, resize_to=cfg.image_size)
    return ProtectionTarget.from_image(img, cfg.weight_w, cfg.threshold_c)


def resolve_surrogate(cfg: TrainConfig) -> SurrogateEncoder:
    if cfg.surrogate == "builtin":
        return SurrogateEncoder(seed=42)
    from .surrogate import load_external

    return load_external(cfg.surrogate)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train_step(
    state: PerturbationGenerator,
    enc: SurrogateEncoder,
    x: torch.Tensor,
    target: ProtectionTarget,
    cfg: TrainConfig,
    eot_rng: np.random.Generator,
) -> tuple[float, float, float, dict[str, torch.Tensor]]:
    """Losses and parameter gradients for one batch (one EOT draw per image)."""
    x_adv, delta, tape = gen_mod.forward(state, x, target.target)
    if delta.abs().max().item() > state.epsilon:
        raise StateError("perturbation exceeded the budget")

    n = x.shape[0]
    adv_values = []
    adv_grads = []
    for i in range(n):
        t = sample_transform(cfg.eot, eot_rng)
        value, grad = latent_adv_loss(enc, x_adv[i], target.target, t, cfg.reduction)
        adv_values.append(float(value))
        adv_grads.append(grad)
    adv = (math.fsum(adv_values) / n, torch.stack(adv_grads) / n)
    pert_value, pert_grad = pert_hinge_loss(delta, target)
    total, g_x_adv, g_delta = total_objective(cfg.weights, adv, (float(pert_value), pert_grad))
    grads = gen_mod.backward(tape, g_delta, g_x_adv)
    return adv[0], float(pert_value), float(total), grads


def train(
    cfg: TrainConfig,
    dataset: Sequence,
    out_dir: str | Path | None = None,
    enc: SurrogateEncoder | None = None,
    target: ProtectionTarget | None = None,
) -> tuple[PerturbationGenerator, TrainReport]:
    """Train a generator; writes periodic and final checkpoints to ``out_dir``."""
    images = load_dataset(dataset, cfg.image_size)
    enc = enc if enc is not None else resolve_surrogate(cfg)
    target = target if target is not None else resolve_target(cfg)
    checksum = enc.checksum()

    state = PerturbationGenerator(epsilon=cfg.epsilon, width=cfg.width_multiplier, seed=cfg.seed)
    hyper = AdamHyper(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    moments = AdamMoments()
    order_rng = np.random.default_rng(cfg.seed)
    eot_rng = np.random.default_rng(cfg.eot.rng_seed)
    report = TrainReport()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    params = dict(state.named_parameters())
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        start = {k: v.detach().clone() for k, v in params.items()}
        order = order_rng.permutation(len(images))
        sums = [0.0, 0.0, 0.0]
        for lo in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[lo : lo + cfg.batch_size])
            batch = images[idx]
            step += 1
            l_adv, l_pert, total, grads = train_step(state, enc, batch, target, cfg, eot_rng)
            if not all(math.isfinite(v) for v in (l_adv, l_pert, total)):
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch}, step {step}: l_adv={l_adv}, l_pert={l_pert}"
                )
            adam_step(params, grads, moments, hyper)
            k = len(idx)
            sums[0] += l_adv * k
            sums[1] += l_pert * k
            sums[2] += total * k
        n = len(images)
        report.l_adv.append(sums[0] / n)
        report.l_pert.append(sums[1] / n)
        report.total.append(sums[2] / n)
        report.update_norm.append(
            math.sqrt(math.fsum(float(((params[k].detach() - start[k]).double() ** 2).sum()) for k in params))
        )
        report.seconds.append(time.perf_counter() - t0)
        log.info(
            "epoch %d/%d l_adv=%.5g l_pert=%.5g total=%.5g (%.2fs)",
            epoch, cfg.epochs, report.l_adv[-1], report.l_pert[-1], report.total[-1], report.seconds[-1],
        )
        _probe_budget(state, images[: cfg.batch_size], target)
        if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0 and epoch < cfg.epochs:
            path = out / f"epoch_{epoch:04d}.wgck"
            gen_mod.save_checkpoint(state, path)
            report.checkpoints[path.name] = str(path)

    if enc.checksum() != checksum:
        raise StateError("surrogate encoder parameters changed during training")
    if out is not None:
        path = out / "final.wgck"
        gen_mod.save_checkpoint(state, path)
        report.checkpoints[path.name] = str(path)
    return state, report


def _probe_budget(state: PerturbationGenerator, probe: torch.Tensor, target: ProtectionTarget) -> None:
    x_adv, delta = gen_mod.protect(state, probe, target.target)
    if delta.abs().max().item() > state.epsilon or x_adv.min() < 0 or x_adv.max() > 1:
        raise StateError("probe batch violated the perturbation budget")


# ---------------------------------------------------------------------------
# Optional surrogate pretraining
# ---------------------------------------------------------------------------


class _Decoder(nn.Module):
    def __init__(self, latent_channels: int):
        super().__init__()
        self.convs = nn.ModuleList(
            [nn.Conv2d(latent_channels, 64, 3, padding=1), nn.Conv2d(64, 32, 3, padding=1), nn.Conv2d(32, 3, 3, padding=1)]
        )

    def forward(self, z):
        h = z
        for i, conv in enumerate(self.convs):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.leaky_relu(h, 0.2)
        return torch.sigmoid(h)


def pretrain_surrogate(
    cfg: TrainConfig,
    dataset: Sequence,
    epochs: int | None = None,
    lr: float | None = None,
) -> tuple[SurrogateEncoder, list[float]]:
    """Fit the encoder as half of a small autoencoder, then freeze it.

    Returns the frozen encoder and the per-epoch reconstruction MSE.
    """
    images = load_dataset(dataset, cfg.image_size)
    torch.manual_seed(cfg.seed)
    enc = SurrogateEncoder(seed=cfg.seed)
    for p in enc.parameters():
        p.requires_grad_(True)
    enc.train()
    dec = _Decoder(enc.latent_channels)
    opt = torch.optim.Adam([*enc.parameters(), *dec.parameters()], lr=lr or cfg.learning_rate)
    order_rng = np.random.default_rng(cfg.seed)
    history = []
    for _ in range(epochs or cfg.epochs):
        order = order_rng.permutation(len(images))
        total = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = images[torch.as_tensor(order[lo : lo + cfg.batch_size])]
            loss = F.mse_loss(dec(encode(enc, batch)), batch)
            if not torch.isfinite(loss):
                raise TrainingAborted("non-finite reconstruction loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        history.append(total / len(images))
    return enc.freeze(), history
