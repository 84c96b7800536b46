"""Training objective: cross-entropy, L1 weight decay, multi-kernel MMD and
pseudo-label loss, combined as

    total = L_c + beta * L_da + alpha(t, T) * L_pll + lambda * L_1
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Mapping

import torch

from .errors import BatchSizeError, ShapeError

PROB_FLOOR = 1e-12
ALPHA_MODES = ("segmented", "off", "on")


@dataclass(frozen=True)
class KernelSpec:
    """Sum of Gaussians with bandwidths ``2**i * sigma`` for i in ``exponents``."""

    sigma: float = 1.0
    exponents: tuple[int, ...] = (-2, -1, 0, 1, 2)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        object.__setattr__(self, "exponents", tuple(int(i) for i in self.exponents))

    @property
    def bandwidths(self) -> tuple[float, ...]:
        return tuple(2.0**i * self.sigma for i in self.exponents)


@dataclass(frozen=True)
class LossWeights:
    beta: float = 1.0
    lam: float = 1e-4
    alpha_mode: str = "segmented"

    def __post_init__(self):
        if self.beta < 0 or self.lam < 0:
            raise ValueError("beta and lambda must be non-negative")
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f"alpha_mode must be one of {ALPHA_MODES}")

    def alpha(self, t: float, total: float) -> float:
        if self.alpha_mode == "off":
            return 0.0
        if self.alpha_mode == "on":
            return 1.0
        return alpha_schedule(t, total)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossReport:
    l_c: float
    l_da: float
    l_pll: float
    l_1: float
    total: float
    alpha: float = 0.0
    beta: float = 0.0
    lam: float = 0.0

    def identity_error(self) -> float:
        return abs(self.total - (self.l_c + self.beta * self.l_da + self.alpha * self.l_pll + self.lam * self.l_1))


def _check_probs(probs: torch.Tensor) -> None:
    if probs.dim() != 2:
        raise ShapeError(f"probabilities must be (N, C), got {tuple(probs.shape)}")


def cross_entropy(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the true class (probabilities floored at 1e-12)."""
    _check_probs(probs)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != (probs.shape[0],):
        raise ShapeError("one label per probability row required")
    if len(labels) and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ShapeError("label code out of range")
    picked = probs.gather(1, labels[:, None])[:, 0]
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def pseudo_label_loss(probs: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of each row against its own argmax.

    The argmax targets are constants; ties resolve to the lowest class code.
    """
    _check_probs(probs)
    with torch.no_grad():
        targets = probs.argmax(dim=1)
    return cross_entropy(probs, targets)


def l1_penalty(weights) -> torch.Tensor:
    """Sum of |theta| over learnable parameters.

    Accepts a module (running statistics are buffers and so excluded), a
    mapping of tensors, or an iterable of tensors. ``torch.abs`` has zero
    subgradient at 0.
    """
    if isinstance(weights, torch.nn.Module):
        tensors: Iterable[torch.Tensor] = weights.parameters()
    elif isinstance(weights, Mapping):
        tensors = weights.values()
    else:
        tensors = weights
    total = None
    for p in tensors:
        term = torch.as_tensor(p).abs().sum()
        total = term if total is None else total + term
    return torch.zeros(()) if total is None else total


def _sq_distances(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    diff = x[:, None, :] - y[None, :, :]
    return (diff * diff).sum(dim=2)


def multikernel_matrix(x: torch.Tensor, y: torch.Tensor, spec: KernelSpec = KernelSpec()) -> torch.Tensor:
    """Gram matrix of the multi-bandwidth Gaussian kernel between rows of x and y."""
    if x.dim() != 2 or y.dim() != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"feature batches must be (n, d) with equal d, got {tuple(x.shape)} and {tuple(y.shape)}")
    d2 = _sq_distances(x, y)
    out = torch.zeros_like(d2)
    for bw in spec.bandwidths:
        out = out + torch.exp(-d2 / (2.0 * bw * bw))
    return out


def gaussian_multikernel(xi, xj, spec: KernelSpec = KernelSpec()) -> torch.Tensor:
    xi = torch.as_tensor(xi)
    xj = torch.as_tensor(xj)
    if xi.shape != xj.shape or xi.dim() != 1:
        raise ShapeError("kernel arguments must be vectors of equal length")
    return multikernel_matrix(xi[None], xj[None], spec)[0, 0]


def mmd_squared(source: torch.Tensor, target: torch.Tensor, spec: KernelSpec = KernelSpec()) -> torch.Tensor:
    """Biased empirical MMD^2 between two feature batches, self-pairs included."""
    if source.dim() != 2 or target.dim() != 2:
        raise ShapeError("feature batches must be 2-D (n, d)")
    if source.shape[0] < 2 or target.shape[0] < 2:
        raise BatchSizeError(f"MMD needs >= 2 samples per side, got {source.shape[0]} and {target.shape[0]}")
    k_ss = multikernel_matrix(source, source, spec).mean()
    k_tt = multikernel_matrix(target, target, spec).mean()
    k_st = multikernel_matrix(source, target, spec).mean()
    return k_ss + k_tt - 2.0 * k_st


def alpha_schedule(t: float, total: float) -> float:
    """Pseudo-label weight: 0 until 10% of training, linear ramp to 1 at 20%."""
    if total <= 0:
        raise ValueError("total iterations must be positive")
    lo, hi = 0.1 * total, 0.2 * total
    if t <= lo:
        return 0.0
    if t <= hi:
        return (t - lo) / (0.1 * total)
    return 1.0


def combined_loss(
    class_probs: torch.Tensor,
    class_labels: torch.Tensor,
    source_features: torch.Tensor | None,
    target_features: torch.Tensor | None,
    target_probs: torch.Tensor | None,
    weights,
    lw: LossWeights,
    t: float,
    total_iterations: float,
    kernel: KernelSpec = KernelSpec(),
) -> tuple[torch.Tensor, LossReport]:
    """Differentiable total loss plus its decomposition.

    Terms whose coefficient is zero (or whose inputs are absent) are left
    out of the graph entirely, so a degenerate configuration reduces to the
    plain classification objective bit for bit.
    """
    alpha = lw.alpha(t, total_iterations)
    if len(class_labels):
        l_c = cross_entropy(class_probs, class_labels)
    else:
        l_c = class_probs.sum() * 0.0
    total = l_c
    l_da = 0.0
    if lw.beta > 0 and source_features is not None and target_features is not None:
        da = mmd_squared(source_features, target_features, kernel)
        total = total + lw.beta * da
        l_da = float(da.detach())
    l_pll = 0.0
    if alpha > 0 and target_probs is not None and len(target_probs):
        pll = pseudo_label_loss(target_probs)
        total = total + alpha * pll
        l_pll = float(pll.detach())
    l1 = l1_penalty(weights)
    if lw.lam > 0:
        total = total + lw.lam * l1
    lc = float(l_c.detach())
    l1f = float(l1.detach())
    report = LossReport(
        l_c=lc,
        l_da=l_da,
        l_pll=l_pll,
        l_1=l1f,
        total=lc + lw.beta * l_da + alpha * l_pll + lw.lam * l1f,
        alpha=alpha,
        beta=lw.beta,
        lam=lw.lam,
    )
    return total, report
