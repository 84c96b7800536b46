"""Differentiable 1-D tensor ops, gradient checking and the TAPW checkpoint format.

Tensors follow the (batch, channels, length) layout throughout. The ops are
thin, shape-checked wrappers over torch so that autograd supplies exact
gradients; :func:`gradient_check` verifies them against central finite
differences in float64.
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FormatError, ShapeError

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1

CHECKPOINT_MAGIC = b"TAPW"
CHECKPOINT_VERSION = 1


def _check_3d(x: torch.Tensor, name: str = "x") -> None:
    if x.dim() != 3:
        raise ShapeError(f"{name} must be (batch, channels, length), got shape {tuple(x.shape)}")


def configure_determinism(threads: int | None = None, deterministic: bool = True) -> None:
    """Pin thread count and request deterministic kernels."""
    if threads is not None:
        torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(deterministic)


# ---------------------------------------------------------------------------
# ops


def conv1d(x, kernel, bias=None, stride: int = 1, padding: int = 0):
    """1-D cross-correlation; ``kernel`` is (out_channels, in_channels, size)."""
    _check_3d(x)
    if kernel.dim() != 3:
        raise ShapeError(f"kernel must be (out, in, size), got {tuple(kernel.shape)}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if conv_output_length(x.shape[2], kernel.shape[2], stride, padding) < 1:
        raise ShapeError("convolution output would be empty")
    return F.conv1d(x, kernel, bias, stride=stride, padding=padding)


def conv_output_length(length: int, size: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - size) // stride + 1


def batch_norm(
    x,
    scale,
    shift,
    running_mean=None,
    running_var=None,
    training: bool = True,
    momentum: float = BN_MOMENTUM,
    epsilon: float = BN_EPSILON,
):
    """Per-channel normalization.

    In training mode batch statistics are used (and differentiated through)
    and the running buffers, if given, are updated in place.
    """
    _check_3d(x)
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"scale/shift must have shape ({c},)")
    if not training and (running_mean is None or running_var is None):
        raise ShapeError("eval mode needs running statistics")
    if training and x.shape[0] * x.shape[2] == 1:
        # one value per channel: variance is exactly zero and epsilon alone
        # keeps the denominator positive
        mean = x.mean(dim=(0, 2))
        if running_mean is not None:
            with torch.no_grad():
                running_mean.mul_(1 - momentum).add_(momentum * mean.detach())
        return scale[None, :, None] * (x - mean[None, :, None]) / (epsilon ** 0.5) + shift[None, :, None]
    return F.batch_norm(x, running_mean, running_var, scale, shift, training, momentum, epsilon)


def relu(x):
    return torch.relu(x)


def max_pool1d(x, window: int, stride: int | None = None):
    _check_3d(x)
    stride = window if stride is None else stride
    if x.shape[2] < window:
        raise ShapeError(f"cannot pool length {x.shape[2]} with window {window}")
    return F.max_pool1d(x, window, stride)


def global_avg_pool(x):
    _check_3d(x)
    return x.mean(dim=2, keepdim=True)


def concat_channels(xs):
    xs = list(xs)
    for t in xs:
        _check_3d(t)
    if len({(t.shape[0], t.shape[2]) for t in xs}) > 1:
        raise ShapeError("concat_channels needs equal batch and length")
    return torch.cat(xs, dim=1)


def add(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"cannot add shapes {tuple(x.shape)} and {tuple(y.shape)}")
    return x + y


def zero_pad_channels(x, target_channels: int):
    """Append zero channels until ``x`` has ``target_channels`` channels."""
    _check_3d(x)
    extra = target_channels - x.shape[1]
    if extra < 0:
        raise ShapeError(f"cannot pad {x.shape[1]} channels down to {target_channels}")
    if extra == 0:
        return x
    return F.pad(x, (0, 0, 0, extra))


def subsample_length(x, target_length: int):
    """Strided subsampling along length (parameter-free shortcut resize)."""
    _check_3d(x)
    length = x.shape[2]
    if target_length == length:
        return x
    if target_length > length or target_length < 1:
        raise ShapeError(f"cannot subsample length {length} to {target_length}")
    stride = length // target_length
    return x[:, :, ::stride][:, :, :target_length]


def softmax(x, dim: int = 1):
    """Softmax over the channel axis (or ``dim``)."""
    return torch.softmax(x, dim=dim)


# ---------------------------------------------------------------------------
# weights


def learnable_parameters(model: torch.nn.Module) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict(model.named_parameters())


def parameter_count(model_or_weights) -> int:
    if isinstance(model_or_weights, torch.nn.Module):
        return sum(p.numel() for p in model_or_weights.parameters())
    return sum(int(np.prod(np.shape(v))) for v in model_or_weights.values())


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


RELATIVE_SCALE_FLOOR = 1e-3


def gradient_check(
    f: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    weights: Mapping[str, torch.Tensor],
    step: float = 1e-6,
    tolerance: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f`` with central differences.

    Error per parameter is ``max|analytic - numeric|`` scaled by the largest
    gradient magnitude seen for that parameter, so near-zero entries do not
    inflate it (floored at a small fraction of the largest gradient of any
    parameter). All evaluation happens in float64.

    ``max_entries`` limits the finite-difference probes to a random sample of
    entries per parameter (chosen with ``seed``), which keeps checks of full
    networks affordable.
    """
    rng = np.random.default_rng(seed)
    stats = {}
    base = OrderedDict((k, v.detach().to(torch.float64).clone()) for k, v in weights.items())
    leaves = OrderedDict((k, v.clone().requires_grad_(True)) for k, v in base.items())
    value = f(leaves)
    if not torch.isfinite(value).all():
        raise FloatingPointError("function value is not finite")
    grads = torch.autograd.grad(value, list(leaves.values()), allow_unused=True)
    with torch.no_grad():
        for (name, w), g in zip(base.items(), grads):
            analytic = torch.zeros_like(w) if g is None else g
            numeric = torch.zeros_like(w)
            flat = w.view(-1)
            probe = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                probe = np.sort(rng.choice(flat.numel(), max_entries, replace=False))
            mask = torch.zeros(flat.numel(), dtype=torch.bool)
            mask[torch.from_numpy(probe)] = True
            for i in probe.tolist():
                orig = flat[i].item()
                flat[i] = orig + step
                hi = f(base).item()
                flat[i] = orig - step
                lo = f(base).item()
                flat[i] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise FloatingPointError(f"non-finite value while perturbing {name}[{i}]")
                numeric.view(-1)[i] = (hi - lo) / (2 * step)
            a, n = analytic.reshape(-1)[mask], numeric.reshape(-1)[mask]
            scale = max(analytic.abs().max().item(), n.abs().max().item())
            diff = (a - n).abs().max().item()
            stats[name] = (diff, scale)
    # A parameter whose true gradient vanishes (e.g. a bias feeding straight
    # into batch norm) would otherwise divide rounding noise by ~0; floor its
    # scale at a small fraction of the largest gradient seen anywhere.
    floor = RELATIVE_SCALE_FLOOR * max((sc for _, sc in stats.values()), default=0.0)
    errors = {
        name: 0.0 if max(scale, floor) < 1e-12 else diff / max(scale, floor)
        for name, (diff, scale) in stats.items()
    }
    return GradCheckReport(errors, tolerance)


# ---------------------------------------------------------------------------
# TAPW checkpoint format
#
#   magic "TAPW" | version u32 | record count u64 |
#   records: name_len u32 | utf-8 name | rank u32 | extents u64 * rank |
#            float32 LE data
#
# All integers little-endian.


def _as_float32(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().to(torch.float32).numpy()
    return np.require(np.asarray(value, dtype="<f4"), requirements="C")


def encode_checkpoint(weights: Mapping[str, object]) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(weights)))
    for name, value in weights.items():
        arr = _as_float32(value)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated checkpoint: wanted {n} bytes", pos)
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, count = struct.unpack("<IQ", take(12))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    out = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        start = pos
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not valid UTF-8", start) from None
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(bytes(take(4 * n)), dtype="<f4").reshape(shape)
        out[name] = arr.astype(np.float32)
    if pos != len(view):
        raise FormatError("trailing bytes after last record", pos)
    return out


def save_checkpoint(path, weights: Mapping[str, object]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(weights))
    tmp.replace(path)


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    return decode_checkpoint(Path(path).read_bytes())


def model_state(model: torch.nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Parameters and buffers (running statistics) in a stable order."""
    return OrderedDict((k, v) for k, v in model.state_dict().items())


def load_model_state(model: torch.nn.Module, weights: Mapping[str, np.ndarray]) -> None:
    own = model.state_dict()
    missing = [k for k in own if k not in weights]
    if missing:
        raise FormatError(f"checkpoint lacks {len(missing)} tensor(s), e.g. {missing[0]!r}")
    for k, target in own.items():
        src = np.asarray(weights[k])
        if tuple(src.shape) != tuple(target.shape):
            raise ShapeError(f"{k}: checkpoint shape {src.shape} != model shape {tuple(target.shape)}")
        with torch.no_grad():
            target.copy_(torch.from_numpy(np.array(src)).to(target.dtype))
