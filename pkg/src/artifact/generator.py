"""Frequency-aware U-Net perturbation generator.

Layout (channels shown at width multiplier 1)::

    input   concat(x, m)                    6          H
    enc1    conv5 s1            + WP        6->32      H      keep HF1
    enc2    conv3 s2            + WP        32->64     H/2    keep HF2
    enc3    conv3 s2 (+LL1)     + WP2       64->128    H/4    keep HF3
    enc4    conv3 s2 (+LL2)     + WP2       128->128   H/8    keep HF4
    bottle  conv3 s2 (+LL3)                 128->128   H/16
    dec4    IDWT(., HF4) + skip(enc4) + ref 128->128   H/8
    dec3    IDWT(., HF3) + skip(enc3) + ref 128->128   H/4
    dec2    proj -> IDWT(., HF2) + ref      128->64    H/2
    dec1    proj -> IDWT(., HF1) + ref      64->32     H
    out     conv5 s1 + tanh                 32->3      H

``LLk`` is reduced by further LL steps until it matches the destination scale
and then mapped to the destination width with a learned 1x1 convolution.
The output is ``delta = eps * tanh(.)`` and ``x_adv = clip(x + delta, 0, 1)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import wavelet
from .errors import (
    CheckpointFormatError,
    ContractError,
    DimensionError,
    IncompatibilityError,
    StateError,
)
from .imagecore import SIZE_MULTIPLE, as_three_channel

DEFAULT_EPSILON = 8 / 255
LEAKY_SLOPE = 0.2
BASE_CHANNELS = (32, 64, 128)


@dataclass(frozen=True)
class StagePlan:
    name: str
    op: str
    kernel: int | None
    stride: int | None
    in_ch: int
    out_ch: int
    scale: int  # output downsampling factor
    wavelet: str


def scaled_channels(width: float) -> tuple[int, int, int]:
    chans = tuple(int(round(c * width)) for c in BASE_CHANNELS)
    if min(chans) < 1:
        raise ContractError(f"width multiplier {width} leaves an empty stage")
    return chans


def layer_plan(width: float = 1.0) -> list[StagePlan]:
    c1, c2, c3 = scaled_channels(width)
    return [
        StagePlan("enc1", "conv5+WP", 5, 1, 6, c1, 1, "keep HF1"),
        StagePlan("enc2", "conv3+WP", 3, 2, c1, c2, 2, "keep HF2"),
        StagePlan("enc3", "conv3+WP2", 3, 2, c2, c3, 4, "+LL1, keep HF3"),
        StagePlan("enc4", "conv3+WP2", 3, 2, c3, c3, 8, "+LL2, keep HF4"),
        StagePlan("bottleneck", "conv3", 3, 2, c3, c3, 16, "+LL3"),
        StagePlan("dec4", "WUP+skip+ref", 3, 1, c3, c3, 8, "inject HF4"),
        StagePlan("dec3", "WUP+skip+ref", 3, 1, c3, c3, 4, "inject HF3"),
        StagePlan("dec2", "WUP+proj+ref", 3, 1, c3, c2, 2, "inject HF2"),
        StagePlan("dec1", "WUP+proj+ref", 3, 1, c2, c1, 1, "inject HF1"),
        StagePlan("out", "conv5+tanh", 5, 1, c1, 3, 1, "delta_norm in [-1,1]"),
    ]


def parameter_census(width: float = 1.0) -> dict[str, tuple[int, ...]]:
    """Expected learnable tensors (name -> shape), derived from :func:`layer_plan`."""
    plan = {s.name: s for s in layer_plan(width)}
    c1, c2, c3 = scaled_channels(width)
    census: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, k):
        census[f"{name}.weight"] = (cout, cin, k, k)
        census[f"{name}.bias"] = (cout,)

    for name in ("enc1", "enc2", "enc3", "enc4", "bottleneck"):
        s = plan[name]
        conv(name, s.in_ch, s.out_ch, s.kernel)
    # LL residual projections: LL1 (c1) -> enc3, LL2 (c2) -> enc4, LL3 (c3) -> bottleneck
    conv("enc3_ll", c1, c3, 1)
    conv("enc4_ll", c2, c3, 1)
    conv("bottleneck_ll", c3, c3, 1)
    conv("dec4_ref", 2 * c3, c3, 3)
    conv("dec3_ref", 2 * c3, c3, 3)
    conv("dec2_proj", c3, c2, 1)
    conv("dec2_ref", c2, c2, 3)
    conv("dec1_proj", c2, c1, 1)
    conv("dec1_ref", c1, c1, 3)
    conv("out", c1, 3, plan["out"].kernel)
    return census


def _conv(cin, cout, k, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=(k - 1) // 2)


def budget_scalar(epsilon: float, dtype: torch.dtype) -> torch.Tensor:
    """``epsilon`` in ``dtype``, rounded toward zero so the bound stays exact."""
    v = torch.tensor(epsilon, dtype=dtype)
    if v.double().item() > epsilon:
        v = torch.nextafter(v, torch.zeros((), dtype=dtype))
    return v


class PerturbationGenerator(nn.Module):
    """The learnable perturbation generator plus its budget."""

    def __init__(
        self,
        epsilon: float = DEFAULT_EPSILON,
        width: float = 1.0,
        seed: int = 42,
        zero_out: bool = True,
    ):
        super().__init__()
        if not (0.0 < epsilon <= 1.0) or not math.isfinite(epsilon):
            raise ContractError(f"epsilon must lie in (0, 1], got {epsilon}")
        self.epsilon = float(epsilon)
        self.width = float(width)
        self.seed = int(seed)
        self.forward_passes = 0  # images pushed through forward()
        c1, c2, c3 = scaled_channels(width)
        self.channels = (c1, c2, c3)

        self.enc1 = _conv(6, c1, 5)
        self.enc2 = _conv(c1, c2, 3, 2)
        self.enc3 = _conv(c2, c3, 3, 2)
        self.enc4 = _conv(c3, c3, 3, 2)
        self.bottleneck = _conv(c3, c3, 3, 2)
        self.enc3_ll = _conv(c1, c3, 1)
        self.enc4_ll = _conv(c2, c3, 1)
        self.bottleneck_ll = _conv(c3, c3, 1)
        self.dec4_ref = _conv(2 * c3, c3, 3)
        self.dec3_ref = _conv(2 * c3, c3, 3)
        self.dec2_proj = _conv(c3, c2, 1)
        self.dec2_ref = _conv(c2, c2, 3)
        self.dec1_proj = _conv(c2, c1, 1)
        self.dec1_ref = _conv(c1, c1, 3)
        self.out = _conv(c1, 3, 5)
        self.reset_parameters(seed, zero_out)

    @torch.no_grad()
    def reset_parameters(self, seed: int, zero_out: bool = True) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        gain = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))
        for name, module in self.named_children():
            fan_in = module.weight[0].numel()
            bound = gain * math.sqrt(3.0 / fan_in)
            module.weight.copy_(torch.rand(module.weight.shape, generator=gen) * 2 * bound - bound)
            module.bias.zero_()
        if zero_out:
            self.out.weight.zero_()
            self.out.bias.zero_()

    def check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise StateError(f"parameter {name} contains non-finite values")

    def delta_norm(self, x: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        """Pre-budget output ``tanh(Dec(Enc([x; m])))`` for batched inputs."""
        act = lambda t: F.leaky_relu(t, LEAKY_SLOPE)  # noqa: E731
        h = torch.cat([x, target], dim=1)

        f1 = act(self.enc1(h))
        w1 = wavelet.dwt(f1)
        f2 = act(self.enc2(f1))
        w2 = wavelet.dwt(f2)
        f3 = act(self.enc3(f2)) + self.enc3_ll(wavelet.dwt(w1.ll).ll)
        w3 = wavelet.dwt(f3)
        f4 = act(self.enc4(f3)) + self.enc4_ll(wavelet.dwt(w2.ll).ll)
        w4 = wavelet.dwt(f4)
        b = act(self.bottleneck(f4)) + self.bottleneck_ll(wavelet.dwt(w3.ll).ll)

        d = wavelet.idwt((b, *w4.high))
        d = act(self.dec4_ref(torch.cat([d, f4], dim=1)))
        d = wavelet.idwt((d, *w3.high))
        d = act(self.dec3_ref(torch.cat([d, f3], dim=1)))
        d = wavelet.idwt((self.dec2_proj(d), *w2.high))
        d = act(self.dec2_ref(d))
        d = wavelet.idwt((self.dec1_proj(d), *w1.high))
        d = act(self.dec1_ref(d))
        return torch.tanh(self.out(d))

    def forward(self, x: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x, target, squeeze = _prepare_inputs(x, target)
        self.check_finite()
        self.forward_passes += x.shape[0]
        delta = budget_scalar(self.epsilon, x.dtype) * self.delta_norm(x, target)
        x_adv = torch.clamp(x + delta, 0.0, 1.0)
        if squeeze:
            return x_adv[0], delta[0]
        return x_adv, delta


GeneratorState = PerturbationGenerator


def _prepare_inputs(x: torch.Tensor, target: torch.Tensor):
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != 3:
        raise DimensionError(f"x must be (3, H, W) or (N, 3, H, W), got {tuple(x.shape)}")
    if target.dim() == 3:
        target = target.unsqueeze(0)
    target = as_three_channel(target)
    if target.shape[-2:] != x.shape[-2:]:
        raise DimensionError(f"target size {tuple(target.shape[-2:])} != input size {tuple(x.shape[-2:])}")
    if target.shape[0] == 1 and x.shape[0] > 1:
        target = target.expand(x.shape[0], -1, -1, -1)
    elif target.shape[0] != x.shape[0]:
        raise DimensionError("target batch does not match input batch")
    h, w = x.shape[-2:]
    if h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
        raise DimensionError(f"spatial size {h}x{w} must be divisible by {SIZE_MULTIPLE}")
    return x, target.to(x.dtype), squeeze


@dataclass
class Tape:
    """Autograd record of one forward call, consumed by :func:`backward`."""

    state: PerturbationGenerator
    x_adv: torch.Tensor
    delta: torch.Tensor
    versions: tuple[int, ...]


def forward(state: PerturbationGenerator, x: torch.Tensor, target: torch.Tensor):
    """Differentiable forward; returns ``(x_adv, delta, tape)``."""
    with torch.enable_grad():
        x_adv, delta = state(x, target)
    tape = Tape(state, x_adv, delta, tuple(p._version for p in state.parameters()))
    return x_adv.detach(), delta.detach(), tape


def backward(
    tape: Tape,
    grad_delta: torch.Tensor | None,
    grad_x_adv: torch.Tensor | None = None,
) -> dict[str, torch.Tensor]:
    """Parameter gradients for upstream gradients w.r.t. ``delta`` and/or ``x_adv``.

    The clip uses a straight-through subgradient inside ``[0, 1]`` and zero
    outside, which is what ``torch.clamp`` provides.
    """
    names, params = zip(*tape.state.named_parameters())
    if tuple(p._version for p in params) != tape.versions:
        raise ContractError("tape is stale: parameters changed since forward")
    outputs, grads = [], []
    for out, g in ((tape.delta, grad_delta), (tape.x_adv, grad_x_adv)):
        if g is None:
            continue
        if g.shape != out.shape:
            raise ContractError(f"gradient shape {tuple(g.shape)} does not match output {tuple(out.shape)}")
        outputs.append(out)
        grads.append(g.to(out.dtype))
    if not outputs:
        return {n: torch.zeros_like(p) for n, p in zip(names, params)}
    result = torch.autograd.grad(outputs, params, grads, retain_graph=True, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, result)}


@torch.inference_mode()
def protect(state: PerturbationGenerator, x: torch.Tensor, target: torch.Tensor):
    """Single forward pass without gradient bookkeeping."""
    return state(x, target)


# ---------------------------------------------------------------------------
# WGCK checkpoint format
# ---------------------------------------------------------------------------

MAGIC = b"WGCK"
FORMAT_VERSION = 1
SEED_TENSOR = "meta.seed"


def write_wgck(path: str | Path, tensors: dict[str, torch.Tensor], epsilon: float, width: float) -> None:
    """Serialize named tensors; payloads are float32 little-endian."""
    chunks = [MAGIC, struct.pack("<Idd", FORMAT_VERSION, float(epsilon), float(width)), struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_wgck(path: str | Path) -> tuple[float, float, dict[str, torch.Tensor]]:
    """Parse a WGCK file into ``(epsilon, width, tensors)``."""
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointFormatError(f"{path}: truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a WGCK checkpoint")
    version, epsilon, width = struct.unpack("<Idd", take(20))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(nlen)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{path}: tensor name is not UTF-8") from exc
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return epsilon, width, tensors


def save_checkpoint(state: PerturbationGenerator, path: str | Path) -> None:
    if not 0 <= state.seed < 2**24:
        raise ContractError("seed must be below 2**24 to be stored exactly")
    tensors = {n: p.detach().float() for n, p in state.named_parameters()}
    tensors[SEED_TENSOR] = torch.tensor(float(state.seed))
    write_wgck(path, tensors, state.epsilon, state.width)


def check_shape_table(tensors: dict[str, torch.Tensor], expected: dict[str, tuple[int, ...]], path) -> None:
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointFormatError(f"{path}: missing tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(shape):
            raise IncompatibilityError(
                f"{path}: tensor {name!r} has shape {tuple(tensors[name].shape)}, expected {tuple(shape)}"
            )


def load_checkpoint(path: str | Path, width: float | None = None) -> PerturbationGenerator:
    """Load a generator; ``width`` (if given) must match the stored shape table."""
    epsilon, stored_width, tensors = read_wgck(path)
    census = parameter_census(stored_width if width is None else width)
    check_shape_table(tensors, census, path)
    unknown = set(tensors) - set(census) - {SEED_TENSOR}
    if unknown:
        raise IncompatibilityError(f"{path}: unexpected tensors {sorted(unknown)}")
    seed = int(tensors[SEED_TENSOR].item()) if SEED_TENSOR in tensors else 0
    state = PerturbationGenerator(epsilon=epsilon, width=stored_width if width is None else width, seed=seed)
    with torch.no_grad():
        for name, p in state.named_parameters():
            p.copy_(tensors[name])
    return state
