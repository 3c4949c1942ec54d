"""Network loafing, logit amplitude, effective receptive field, CE-gap bound."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import imgops
from .errors import InputError
from .imgops import ImageDataset
from .nncore import DepthMask, NetworkSpec, ResNet, build_network, load_checkpoint, load_model_arrays
from .sampler import SamplingRule, enumerate_space
from .trainer import EvalConfig, eval_logits, topk_accuracy

ERF_THRESHOLDS = (0.2, 0.3, 0.5, 0.99)


# ---------------------------------------------------------------------------
# CE-gap bound


def ce_gap_bound(eps1: float, eps2: float, num_classes: int) -> float:
    """``(eps2 + ln N) / e^{-eps1} + eps1``."""
    if eps1 < 0 or eps2 < 0:
        raise InputError(f"eps1 and eps2 must be >= 0, got {eps1}, {eps2}")
    if num_classes < 2:
        raise InputError(f"need N >= 2 classes, got {num_classes}")
    return (eps2 + math.log(num_classes)) / math.exp(-eps1) + eps1


@dataclass
class BoundCheck:
    trials: int
    counterexamples: int
    max_ratio: float  # largest observed gap / bound

    @property
    def ok(self) -> bool:
        return self.counterexamples == 0


def validate_bound(trials: int = 10_000, seed: int = 0, max_classes: int = 100) -> BoundCheck:
    """Brute-force search for (p_main, p_sub, y) violating the CE-gap bound.

    Each trial draws both distributions from Dirichlet priors whose
    concentration spans peaked to flat, sets eps1 = CE(p_main, y) and
    eps2 = KL(p_main || p_sub), and compares |CE(p_main) - CE(p_sub)|.
    """
    rng = np.random.default_rng(seed)
    bad, worst = 0, 0.0
    for _ in range(trials):
        n = int(rng.integers(2, max_classes + 1))
        p_m = rng.dirichlet(np.full(n, 10 ** rng.uniform(-2, 1)))
        p_s = rng.dirichlet(np.full(n, 10 ** rng.uniform(-2, 1)))
        p_m = np.maximum(p_m, 1e-300)
        p_s = np.maximum(p_s, 1e-300)
        p_m /= p_m.sum()
        p_s /= p_s.sum()
        y = int(np.argmax(p_m)) if rng.random() < 0.5 else int(rng.integers(n))
        ce_m = -math.log(p_m[y])
        ce_s = -math.log(p_s[y])
        kl = float(np.sum(p_m * (np.log(p_m) - np.log(p_s))))
        bound = ce_gap_bound(ce_m, max(kl, 0.0), n)
        gap = abs(ce_m - ce_s)
        worst = max(worst, gap / bound)
        if gap > bound:
            bad += 1
    return BoundCheck(trials, bad, worst)


# ---------------------------------------------------------------------------
# loafing


@dataclass
class LoafingRow:
    mask: DepthMask
    in_ensemble_top1: float
    standalone_top1: float | None = None

    @property
    def gap(self) -> float | None:
        if self.standalone_top1 is None:
            return None
        return self.standalone_top1 - self.in_ensemble_top1


@dataclass
class LoafingReport:
    rows: list[LoafingRow]

    def row(self, mask: DepthMask | Sequence[int]) -> LoafingRow:
        kept = mask.kept if isinstance(mask, DepthMask) else tuple(mask)
        for r in self.rows:
            if r.mask.kept == kept:
                return r
        raise KeyError(kept)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mask", "in_ensemble_top1", "standalone_top1", "gap"])
        for r in self.rows:
            w.writerow([str(r.mask), r.in_ensemble_top1, _blank(r.standalone_top1), _blank(r.gap)])
        return buf.getvalue()


def _blank(x):
    return "" if x is None else x


def load_network(path: str | Path) -> ResNet:
    arrays, meta = load_checkpoint(path)
    model = build_network(NetworkSpec.from_dict(meta["spec"]), 0)
    load_model_arrays(model, {k: v for k, v in arrays.items() if not k.startswith("optim.")})
    model.eval()
    return model


def measure_loafing(
    model: ResNet,
    rule: SamplingRule,
    eval_set: ImageDataset,
    standalone: Mapping[DepthMask, ResNet | str | Path] | None = None,
    eval_cfg: EvalConfig | None = None,
) -> LoafingReport:
    """Top-1 of every enumerated subnet inside the shared network.

    ``standalone`` maps masks to separately trained networks of that depth
    (or their checkpoint paths); masks without one get no gap.
    """
    standalone = dict(standalone or {})
    rows = []
    for mask in enumerate_space(model.spec, rule):
        in_ens = topk_accuracy(eval_logits(model, mask, eval_set, eval_cfg), eval_set.labels, 1)
        alone = None
        ref = standalone.get(mask)
        if ref is not None:
            net = ref if isinstance(ref, torch.nn.Module) else load_network(ref)
            alone = topk_accuracy(eval_logits(net, None, eval_set, eval_cfg), eval_set.labels, 1)
        rows.append(LoafingRow(mask, in_ens, alone))
    return LoafingReport(rows)


# ---------------------------------------------------------------------------
# logit amplitude


@dataclass
class AmplitudeReport:
    mean_magnitude: float
    top1: float


def accumulate_amplitude(
    model: ResNet, mask: DepthMask | None, dataset: ImageDataset, eval_cfg: EvalConfig | None = None
) -> AmplitudeReport:
    """Dataset mean of per-sample logit L2 norms, with top-1, in eval mode."""
    logits = eval_logits(model, mask, dataset, eval_cfg).double()
    mags = torch.sqrt((logits * logits).sum(dim=1))
    return AmplitudeReport(float(mags.mean()), topk_accuracy(logits, dataset.labels, 1))


def amplitude_csv(rows: Mapping[str, AmplitudeReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["network", "mean_magnitude", "top1"])
    for name, r in rows.items():
        w.writerow([name, r.mean_magnitude, r.top1])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# effective receptive field


@dataclass
class ERFMap:
    heat: np.ndarray  # H x W, nonnegative, sums to 1

    def area_ratio(self, t: float) -> float:
        """Smallest fraction of pixels whose combined mass reaches ``t``."""
        flat = np.sort(self.heat.ravel())[::-1]
        csum = np.cumsum(flat)
        count = int(np.searchsorted(csum, t * csum[-1] - 1e-12)) + 1
        return min(count, flat.size) / flat.size

    def area_ratios(self, thresholds: Sequence[float] = ERF_THRESHOLDS) -> dict[float, float]:
        return {t: self.area_ratio(t) for t in thresholds}

    def support(self, tol: float = 0.0) -> np.ndarray:
        return self.heat > tol

    def to_csv(self) -> str:
        buf = io.StringIO()
        np.savetxt(buf, self.heat, delimiter=",", fmt="%.9e")
        return buf.getvalue()

    def to_pgm(self) -> str:
        """ASCII (P2) 16-bit grayscale, brightest where the mass is largest."""
        h, w = self.heat.shape
        peak = self.heat.max()
        scaled = np.zeros_like(self.heat) if peak <= 0 else self.heat / peak
        pix = np.rint(scaled * 65535).astype(np.int64)
        lines = [f"P2\n{w} {h}\n65535"] + [" ".join(str(v) for v in row) for row in pix]
        return "\n".join(lines) + "\n"


def erf_from_features(
    feature_fn: Callable[[torch.Tensor], torch.Tensor], inputs: torch.Tensor, batch_size: int = 32
) -> ERFMap:
    """Mean absolute input-gradient of the channel sum at the output center.

    ``feature_fn`` maps B x C x H x W inputs to a B x C' x h x w feature map;
    samples must not interact (eval-mode normalization).
    """
    total = torch.zeros(inputs.shape[-2:], dtype=torch.float64)
    for start in range(0, inputs.shape[0], batch_size):
        x = inputs[start : start + batch_size].clone().requires_grad_(True)
        feats = feature_fn(x)
        h, w = feats.shape[-2:]
        target = feats[:, :, h // 2, w // 2].sum()
        (grad,) = torch.autograd.grad(target, x)
        total += grad.abs().sum(dim=(0, 1)).double()
    mass = total.sum()
    heat = (total / mass if mass > 0 else total).numpy()
    return ERFMap(heat)


def compute_erf(
    model: ResNet,
    mask: DepthMask | None,
    input_size: int,
    num_samples: int,
    rng: np.random.Generator,
    dataset: ImageDataset | None = None,
) -> ERFMap:
    """ERF of the masked network at ``input_size`` x ``input_size``.

    Inputs are dataset images (resized on the shorter side, center-cropped,
    normalized) when ``dataset`` is given, else standard normal noise.
    """
    if dataset is not None:
        idx = rng.choice(len(dataset), size=min(num_samples, len(dataset)), replace=False)
        imgs = imgops.center_crop(imgops.resize_shorter_side(dataset.images[torch.from_numpy(idx)], input_size), input_size)
        inputs = imgops.normalize(imgs, dataset.mean, dataset.std)
    else:
        shape = (num_samples, model.spec.input_channels, input_size, input_size)
        inputs = torch.from_numpy(rng.standard_normal(shape)).float()
    was_training = model.training
    model.eval()
    try:
        return erf_from_features(lambda x: model.features(x, mask), inputs)
    finally:
        model.train(was_training)
