"""Central finite-difference checks of autograd gradients in float64."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .losses import cross_entropy, kl_logits, kl_minus
from .nncore import BasicBlock, BottleneckBlock, NetworkSpec, Norm, build_network

REL_TOL = 1e-4
# D(h) and D(h/2) agree to O(h^2) on smooth functions; a kink at distance d
# separates them by about d/h of its slope jump
SMOOTHNESS_TOL = 1e-5


@dataclass
class GradCheckResult:
    name: str
    probes: int
    max_rel_error: float
    skipped: int = 0  # probes redrawn because a ReLU kink lay within the step

    @property
    def passed(self) -> bool:
        return self.max_rel_error < REL_TOL

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name}: {self.probes} probes ({self.skipped} redrawn), "
            f"max rel err {self.max_rel_error:.2e}"
        )


def relative_error(a: float, b: float) -> float:
    denom = max(abs(a), abs(b))
    return 0.0 if denom < 1e-10 else abs(a - b) / denom


def _central(fn, view: torch.Tensor, flat: int, h: float) -> float:
    with torch.no_grad():
        orig = view[flat].item()
        view[flat] = orig + h
        up = fn().item()
        view[flat] = orig - h
        down = fn().item()
        view[flat] = orig
    return (up - down) / (2 * h)


def check_gradient(
    name: str,
    fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    probes: int = 20,
    h: float = 1e-5,
    seed: int = 0,
) -> GradCheckResult:
    """Compare autograd against central differences at random entries.

    The numeric estimate is Richardson-extrapolated from steps ``h`` and
    ``h/2``. When those two disagree by more than ``SMOOTHNESS_TOL`` the
    function is not smooth inside the step (a ReLU kink) and the probe is
    redrawn; at most ``10 * probes`` draws are made. ``fn`` must read
    ``tensors`` (float64 leaves) and return a scalar.
    """
    grads = torch.autograd.grad(fn(), list(tensors), allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    sizes = np.array([t.numel() for t in tensors], dtype=np.float64)
    rng = np.random.default_rng(seed)
    worst, done, skipped = 0.0, 0, 0
    while done < probes and done + skipped < 10 * probes:
        ti = int(rng.choice(len(tensors), p=sizes / sizes.sum()))
        t = tensors[ti]
        flat = int(rng.integers(t.numel()))
        d1 = _central(fn, t.view(-1), flat, h)
        d2 = _central(fn, t.view(-1), flat, h / 2)
        if relative_error(d1, d2) > SMOOTHNESS_TOL:
            skipped += 1
            continue
        numeric = (4 * d2 - d1) / 3
        worst = max(worst, relative_error(grads[ti].view(-1)[flat].item(), numeric))
        done += 1
    if done < probes:
        worst = float("inf")
    return GradCheckResult(name, done, worst, skipped)


def _leaf(shape, gen: torch.Generator, scale: float = 1.0) -> torch.Tensor:
    return (torch.randn(shape, generator=gen, dtype=torch.float64) * scale).requires_grad_(True)


def loss_suites(probes: int = 20, seed: int = 0) -> list[GradCheckResult]:
    gen = torch.Generator().manual_seed(seed)
    y = torch.randint(0, 7, (5,), generator=gen)
    z_t = torch.randn(5, 7, generator=gen, dtype=torch.float64) * 3
    z_s = _leaf((5, 7), gen, 3.0)
    # softmax derivatives all scale with the probability itself, so a wider
    # step keeps truncation error relative while avoiding round-off on tiny entries
    h = 1e-4
    return [
        check_gradient("cross_entropy", lambda: cross_entropy(z_s, y), [z_s], probes, h, seed),
        check_gradient("kl", lambda: kl_logits(z_t, z_s), [z_s], probes, h, seed),
        check_gradient("kl_minus", lambda: kl_minus(z_t, z_s), [z_s], probes, h, seed),
    ]


def _randomize_norms(module: torch.nn.Module, gen: torch.Generator) -> None:
    """Move normalization state off its init values.

    Fresh zero biases and zero running means put exact zeros on ReLU kinks,
    where central differences average two one-sided slopes.
    """
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, Norm):
                c = m.num_features
                m.weight.copy_(0.5 + torch.rand(c, generator=gen, dtype=m.weight.dtype))
                m.bias.copy_(torch.rand(c, generator=gen, dtype=m.bias.dtype) - 0.5)
                m.running_mean.copy_(torch.rand(c, generator=gen, dtype=m.running_mean.dtype) - 0.5)
                m.running_var.copy_(0.5 + torch.rand(c, generator=gen, dtype=m.running_var.dtype))


def _module_suite(name, module, x, probes, seed):
    module = module.double()
    params = [p for p in module.parameters()]
    proj = torch.randn(module(x).shape, generator=torch.Generator().manual_seed(seed + 1), dtype=torch.float64)

    def fn():
        return (module(x) * proj).sum()

    return check_gradient(name, fn, [x] + params, probes, seed=seed)


def layer_suites(probes: int = 20, seed: int = 0) -> list[GradCheckResult]:
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    results = []

    conv = torch.nn.Conv2d(3, 4, 3, padding=1)
    results.append(_module_suite("conv2d", conv, _leaf((2, 3, 6, 6), gen), probes, seed))

    lin = torch.nn.Linear(6, 4)
    results.append(_module_suite("linear", lin, _leaf((3, 6), gen), probes, seed))

    for mode in ("train", "eval"):
        bn = Norm(4).double()
        with torch.no_grad():
            bn.weight.uniform_(0.5, 1.5)
            bn.bias.uniform_(-0.5, 0.5)
            bn.running_mean.uniform_(-0.5, 0.5)
            bn.running_var.uniform_(0.5, 1.5)
        bn.train(mode == "train")
        for track in (True, False):
            if mode == "eval" and not track:
                continue
            tag = f"norm_{mode}" + ("" if track else "_untracked")
            m = _Wrap(bn, track)
            results.append(_module_suite(tag, m, _leaf((4, 4, 3, 3), gen), probes, seed))

    results.append(_module_suite("relu", _Fn(F.relu), _leaf((4, 9), gen), probes, seed))
    results.append(
        _module_suite("global_avg_pool", _Fn(lambda t: F.adaptive_avg_pool2d(t, 1)), _leaf((2, 3, 4, 4), gen), probes, seed)
    )

    for mode in ("train", "eval"):
        for name, block in (
            ("basic_block", BasicBlock(4, 4, 1)),
            ("basic_block_proj", BasicBlock(4, 8, 2)),
            ("bottleneck_block", BottleneckBlock(8, 2, 1)),
            ("bottleneck_block_proj", BottleneckBlock(4, 4, 2)),
        ):
            block = block.double()
            _randomize_norms(block, gen)
            block.train(mode == "train")
            cin = block.conv1.in_channels
            results.append(_module_suite(f"{name}_{mode}", block, _leaf((3, cin, 6, 6), gen), probes, seed))

    for kind, blocks, widths in (("basic", (2, 2), (4, 8)), ("bottleneck", (2, 2), (2, 4))):
        spec = NetworkSpec(blocks, widths, num_classes=5, block_kind=kind)
        net = build_network(spec, seed).double()
        _randomize_norms(net, gen)
        for mode in ("train", "eval"):
            net.train(mode == "train")
            for mask in ((2, 2), (1, 2), (1, 1)):
                m = _Masked(net, mask)
                results.append(
                    _module_suite(f"resnet_{kind}_{mode}_mask{mask[0]}{mask[1]}", m, _leaf((3, 3, 8, 8), gen), probes, seed)
                )
    return results


def run_all(probes: int = 20, seed: int = 0) -> list[GradCheckResult]:
    return loss_suites(probes, seed) + layer_suites(probes, seed)


class _Fn(torch.nn.Module):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, x):
        return self.fn(x)


class _Wrap(torch.nn.Module):
    def __init__(self, norm: Norm, track: bool):
        super().__init__()
        self.norm = norm
        self.track = track

    def forward(self, x):
        return self.norm(x, self.track)


class _Masked(torch.nn.Module):
    def __init__(self, net, mask):
        super().__init__()
        self.net = net
        self.mask = mask

    def forward(self, x):
        return self.net(x, self.mask, track=False)
