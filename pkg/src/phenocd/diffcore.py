"""Numeric substrate: shape-checked tensor ops, momentum SGD, finite-difference
gradient checking and the flat checkpoint format.

Reverse-mode gradients come from torch autograd; everything here is what the
rest of the package needs on top of it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import IngestionError, NumericError, ShapeError

TRAIN_DTYPE = torch.float32
CHECK_DTYPE = torch.float64


def set_deterministic(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


# -- shape-checked ops --------------------------------------------------------

def _same(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def add(a, b):
    _same("add", a, b)
    return a + b


def sub(a, b):
    _same("sub", a, b)
    return a - b


def mul(a, b):
    _same("mul", a, b)
    return a * b


def absdiff(a, b):
    _same("absdiff", a, b)
    return (a - b).abs()


def concat(tensors: Sequence[torch.Tensor], dim: int = 1) -> torch.Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.dim() != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != dim % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {[tuple(x.shape) for x in tensors]}")
    return torch.cat(list(tensors), dim=dim)


def matmul(a, b):
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def upsample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def l2_normalize(x: torch.Tensor, dim: int = 1, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=dim, keepdim=True).clamp_min(eps)


def global_mean(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=(-2, -1), keepdim=True)


def global_max(x: torch.Tensor) -> torch.Tensor:
    return x.amax(dim=(-2, -1), keepdim=True)


def softmax_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if logits.dim() != target.dim() + 1 or logits.shape[:1] + logits.shape[2:] != target.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    return F.cross_entropy(logits, target.long())


def bce_with_logits(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same("bce_with_logits", logits, target)
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


def required_op_set() -> dict[str, Callable]:
    """Primitive ops the detector and constrainer are closed over.

    Each entry takes float tensors and is differentiable in all of them.
    """
    return {
        "conv3x3": lambda x, w: F.conv2d(x, w, padding=1),
        "conv3x3_s2": lambda x, w: F.conv2d(x, w, stride=2, padding=1),
        "conv1x1": lambda x, w: F.conv2d(x, w),
        "conv7x7": lambda x, w: F.conv2d(x, w, padding=3),
        "batchnorm_train": lambda x, g, b: F.batch_norm(x, None, None, g, b, training=True),
        "batchnorm_eval": lambda x, g, b: F.batch_norm(
            x, torch.zeros_like(g), torch.ones_like(g), g, b, training=False),
        "relu": torch.relu,
        "sigmoid": torch.sigmoid,
        "adaptive_avg_pool": lambda x: F.adaptive_avg_pool2d(x, 2),
        "bilinear_upsample": lambda x: upsample(x, (x.shape[-2] * 2, x.shape[-1] * 2)),
        "concat": lambda a, b: concat([a, b]),
        "add": add,
        "mul": mul,
        "sub": sub,
        "abs": torch.abs,
        "matmul": matmul,
        "l2_normalize": lambda x: l2_normalize(x, dim=1),
        "global_mean": global_mean,
        "global_max": global_max,
    }


# -- optimizer ----------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffers: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


@torch.no_grad()
def sgd_step(params: Iterable[tuple[str, nn.Parameter]], state: OptimizerState) -> None:
    """Classical momentum with weight decay folded into the gradient:
    g' = g + wd*w;  v <- mu*v + g';  w <- w - lr*v.  Gradients are zeroed."""
    params = [(name, p) for name, p in params if p.requires_grad]
    for name, p in params:
        if p.grad is None:
            raise NumericError(f"parameter '{name}' has no gradient")
    for name, p in params:
        g = p.grad + state.weight_decay * p
        v = state.buffers.get(name)
        if v is None:
            v = torch.zeros_like(p)
            state.buffers[name] = v
        v.mul_(state.momentum).add_(g)
        p.sub_(state.lr * v)
        p.grad = None


# -- gradient checking --------------------------------------------------------

def finite_diff_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                      eps: float = 1e-5, params: Sequence[torch.Tensor] = ()) -> float:
    """Max over elements of |a - n| / max(1e-8, |a| + |n|), comparing autograd
    against central differences of the scalar ``fn(*inputs)``.

    ``params`` are extra leaf tensors (e.g. module weights) also checked.
    """
    inputs = [x.detach().to(CHECK_DTYPE).clone().requires_grad_(True) for x in inputs]
    leaves = list(inputs) + [p for p in params]
    for p in params:
        if p.dtype != CHECK_DTYPE:
            raise NumericError("finite_diff_check needs 64-bit parameters")
    out = fn(*inputs)
    if out.numel() != 1:
        raise ShapeError(f"finite_diff_check: function must return a scalar, got {tuple(out.shape)}")
    if not torch.isfinite(out):
        raise NumericError("finite_diff_check: non-finite function value")
    grads = torch.autograd.grad(out, leaves, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for leaf, g in zip(leaves, grads):
            analytic = torch.zeros_like(leaf) if g is None else g
            flat = leaf.view(-1)
            numeric = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = fn(*inputs).item()
                flat[i] = orig - eps
                lo = fn(*inputs).item()
                flat[i] = orig
                numeric[i] = (hi - lo) / (2 * eps)
            if not (torch.isfinite(numeric).all() and torch.isfinite(analytic).all()):
                raise NumericError("finite_diff_check: non-finite gradient")
            a = analytic.reshape(-1)
            err = (a - numeric).abs() / torch.clamp(a.abs() + numeric.abs(), min=1e-8)
            worst = max(worst, float(err.max()))
    return worst


# -- checkpoints --------------------------------------------------------------

def _entries(module: nn.Module) -> list[tuple[str, torch.Tensor, str]]:
    out = [(name, p, "parameter") for name, p in module.named_parameters()]
    out += [(name, b, "buffer") for name, b in module.named_buffers()
            if b.is_floating_point()]
    return out


def save_checkpoint(module: nn.Module, directory: str | Path, **meta) -> dict:
    """Write ``manifest.json`` + ``weights.bin`` (little-endian float32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records, chunks, offset = [], [], 0
    for name, tensor, kind in _entries(module):
        data = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        raw = data.tobytes(order="C")
        records.append({"name": name, "kind": kind, "shape": list(data.shape),
                        "offset": offset, "nbytes": len(raw), "dtype": "float32-le"})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": 1, "parameters": records, **meta}
    (directory / "weights.bin").write_bytes(b"".join(chunks))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_checkpoint(module: nn.Module, directory: str | Path) -> dict:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        blob = (directory / "weights.bin").read_bytes()
    except FileNotFoundError as exc:
        raise IngestionError(f"checkpoint {directory}: missing {Path(exc.filename).name}") from None
    except json.JSONDecodeError as exc:
        raise IngestionError(f"checkpoint {directory}: malformed manifest: {exc}") from None
    targets = {name: tensor for name, tensor, _ in _entries(module)}
    seen = set()
    for rec in manifest["parameters"]:
        name = rec["name"]
        if name not in targets:
            raise IngestionError(f"checkpoint {directory}: unexpected entry '{name}'")
        tensor = targets[name]
        if list(tensor.shape) != rec["shape"]:
            raise IngestionError(
                f"checkpoint {directory}: '{name}' has shape {rec['shape']}, model expects {list(tensor.shape)}")
        raw = blob[rec["offset"]:rec["offset"] + rec["nbytes"]]
        if len(raw) != rec["nbytes"]:
            raise IngestionError(f"checkpoint {directory}: weights.bin truncated at '{name}'")
        values = np.frombuffer(raw, dtype="<f4").reshape(rec["shape"])
        with torch.no_grad():
            tensor.copy_(torch.from_numpy(values.copy()).to(tensor.dtype))
        seen.add(name)
    missing = set(targets) - seen
    if missing:
        raise IngestionError(f"checkpoint {directory}: missing entries {sorted(missing)}")
    return manifest
