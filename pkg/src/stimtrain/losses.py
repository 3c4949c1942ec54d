"""Cross entropy, KL, magnitude-free KL and the stimulative objective.

All functions take logits or probabilities along the last axis and accept
tensors, arrays or nested lists; batched inputs are reduced by a mean over
rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from .errors import InputError, LabelError, ShapeError

PROB_EPS = 1e-12
MAGNITUDE_EPS = 1e-12
VARIANTS = ("kl", "kl_minus")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _check_finite(z: torch.Tensor, what: str) -> None:
    if not torch.isfinite(z).all():
        raise InputError(f"{what} contains non-finite values")


def softmax(z) -> torch.Tensor:
    z = _as_tensor(z)
    _check_finite(z, "logits")
    shifted = z - z.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def _rows(z: torch.Tensor) -> torch.Tensor:
    return z.unsqueeze(0) if z.dim() == 1 else z


def cross_entropy(z, y) -> torch.Tensor:
    """Mean over the batch of ``-log p_y``."""
    z = _rows(_as_tensor(z))
    _check_finite(z, "logits")
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    if y.numel() != z.shape[0]:
        raise ShapeError(f"{y.numel()} labels for {z.shape[0]} rows of logits")
    n = z.shape[-1]
    if y.numel() and (y.min() < 0 or y.max() >= n):
        raise LabelError(f"labels must lie in [0, {n}), got range [{int(y.min())}, {int(y.max())}]")
    shifted = z - z.max(dim=-1, keepdim=True).values.detach()
    log_p = shifted - torch.log(torch.exp(shifted).sum(dim=-1, keepdim=True))
    return -log_p.gather(1, y[:, None]).mean()


def kl_divergence(p_t, p_s) -> torch.Tensor:
    """``sum_i p_t log(p_t / p_s)``, batch-averaged; probabilities floored at 1e-12."""
    p_t, p_s = _as_tensor(p_t), _as_tensor(p_s)
    if p_t.shape != p_s.shape:
        raise ShapeError(f"shape mismatch {tuple(p_t.shape)} vs {tuple(p_s.shape)}")
    p_t, p_s = _rows(p_t), _rows(p_s)
    terms = p_t * (torch.log(p_t.clamp_min(PROB_EPS)) - torch.log(p_s.clamp_min(PROB_EPS)))
    return terms.sum(dim=-1).mean()


@dataclass
class LogitDecomposition:
    magnitude: torch.Tensor
    direction: torch.Tensor

    def reconstruct(self) -> torch.Tensor:
        return self.magnitude.unsqueeze(-1) * self.direction


def decompose_logits(z) -> LogitDecomposition:
    """Split logits into L2 magnitude and unit direction (row-wise)."""
    z = _as_tensor(z)
    _check_finite(z, "logits")
    mag = torch.sqrt((z * z).sum(dim=-1))
    return LogitDecomposition(mag, z / mag.clamp_min(MAGNITUDE_EPS).unsqueeze(-1))


class _DistillKL(torch.autograd.Function):
    """KL(p_t || softmax(u)) with the closed-form student gradient (p_s - p_t) / B.

    Autograd through the floored logs gives the same derivative up to
    round-off; the closed form is exactly zero when the student matches the
    target bit for bit, so a subnet identical to the main network leaves the
    update untouched.
    """

    @staticmethod
    def forward(ctx, p_t, u):
        p_s = softmax(u)
        ctx.save_for_backward(p_t, p_s)
        return kl_divergence(p_t, p_s)

    @staticmethod
    def backward(ctx, grad):
        p_t, p_s = ctx.saved_tensors
        rows = 1 if p_s.dim() == 1 else p_s.shape[0]
        return None, grad * (p_s - p_t) / rows


def _distill(u_t: torch.Tensor, u_s: torch.Tensor) -> torch.Tensor:
    if u_t.shape != u_s.shape:
        raise ShapeError(f"shape mismatch {tuple(u_t.shape)} vs {tuple(u_s.shape)}")
    return _DistillKL.apply(softmax(u_t.detach()), u_s)


def kl_logits(z_t, z_s) -> torch.Tensor:
    """KL between the softmaxes of target and student logits.

    The target acts as a constant: only ``z_s`` receives a gradient.
    """
    return _distill(_as_tensor(z_t), _as_tensor(z_s))


def kl_minus(z_t, z_s) -> torch.Tensor:
    """KL between softmaxes of the L2-normalized logit rows.

    Only the direction of each row matters, so the value is unchanged when any
    row of either argument is multiplied by a positive constant. As in
    ``kl_logits`` only ``z_s`` receives a gradient.
    """
    z_t, z_s = _as_tensor(z_t), _as_tensor(z_s)
    if z_t.shape != z_s.shape:
        raise ShapeError(f"shape mismatch {tuple(z_t.shape)} vs {tuple(z_s.shape)}")
    return _distill(decompose_logits(z_t).direction, decompose_logits(z_s).direction)


def distillation_term(variant: str, z_t, z_s) -> torch.Tensor:
    if variant == "kl":
        return kl_logits(z_t, z_s)
    if variant == "kl_minus":
        return kl_minus(z_t, z_s)
    raise InputError(f"unknown loss variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class LossReport:
    ce: float
    kl_terms: list[float]
    total: float
    lam: float
    total_tensor: torch.Tensor | None = field(default=None, repr=False)

    @property
    def mean_kl(self) -> float:
        return sum(self.kl_terms) / len(self.kl_terms) if self.kl_terms else 0.0


def stimulative_loss(
    z_m,
    y,
    z_subs: Sequence,
    lam: float = 1.0,
    variant: str = "kl_minus",
) -> LossReport:
    """Main-network CE plus ``lam`` times the mean distillation term over subnets.

    The main logits act as a fixed target inside the distillation term; only
    the subnetwork branch receives its gradient.
    """
    if lam < 0:
        raise InputError(f"lambda must be >= 0, got {lam}")
    z_m = _as_tensor(z_m)
    ce = cross_entropy(z_m, y)
    target = z_m.detach()
    kls = [distillation_term(variant, target, _as_tensor(z_s)) for z_s in z_subs]
    total = ce + lam * torch.stack(kls).mean() if kls else ce
    return LossReport(
        ce=float(ce.detach()),
        kl_terms=[float(k.detach()) for k in kls],
        total=float(total.detach()),
        lam=float(lam),
        total_tensor=total,
    )
