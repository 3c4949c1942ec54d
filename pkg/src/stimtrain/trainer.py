"""Common, stimulative and ST++ training loops."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import imgops
from .errors import ConfigError, DivergenceError
from .imgops import ImageDataset, ResolutionRange
from .losses import VARIANTS, cross_entropy, distillation_term, kl_divergence, softmax
from .nncore import (
    DepthMask,
    NetworkSpec,
    Norm,
    ResNet,
    backward,
    build_network,
    load_checkpoint,
    load_model_arrays,
    model_arrays,
    save_checkpoint,
    zero_grad,
)
from .sampler import SamplingRule, enumerate_space, sample_subnet

log = logging.getLogger(__name__)

MODES = ("ct", "st", "st_pp")
SCHEDULES = ("cosine", "step")
DIVERGENCE_LIMIT = 1e4


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ModelConfig:
    stage_blocks: list[int] = field(default_factory=lambda: [3, 3, 3])
    # None = 16 * 2**i for stage i
    stage_widths: list[int] | None = None
    num_classes: int = 10
    block_kind: str = "basic"
    stem: list[int] = field(default_factory=lambda: [3, 1])
    input_channels: int = 3


@dataclass
class LossConfig:
    variant: str = "kl"
    lam: float = field(default=1.0, metadata={"key": "lambda"})


@dataclass
class SamplingConfig:
    # per-stage depth choices counted down from full depth; None = every prefix
    choices: list[int] | None = None


@dataclass
class InputConfig:
    # subnet shorter-side range for st_pp; None = [round(size / 3.5), size]
    l_min: int | None = None
    l_max: int | None = None


@dataclass
class OptimConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    decay_rate: float = 0.1
    decay_epochs: int = 30


@dataclass
class SynthConfig:
    seed: int = 0
    num_classes: int = 10
    samples_per_class: int = 100
    test_per_class: int = 20
    size: int = 16


@dataclass
class DataConfig:
    source: str = "cifar10"
    root: str | None = None
    augment: list[str] = field(default_factory=lambda: ["crop", "flip"])
    mean: list[float] | None = None
    std: list[float] | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class EvalConfig:
    val_resize: int | None = None
    val_crop: int | None = None
    every: int = 1
    subnets: str = "enumerate"
    batch_size: int = 500


@dataclass
class LogConfig:
    # wall-clock time breaks byte-identical metrics, so it is opt-in
    wall_time: bool = False


@dataclass
class TrainConfig:
    mode: str = "ct"
    epochs: int = 160
    batch_size: int = 128
    k_subnets: int = 0
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    input: InputConfig = field(default_factory=InputConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    log: LogConfig = field(default_factory=LogConfig)

    def network_spec(self) -> NetworkSpec:
        m = self.model
        widths = m.stage_widths if m.stage_widths is not None else [16 * 2**i for i in range(len(m.stage_blocks))]
        return NetworkSpec(
            tuple(m.stage_blocks),
            tuple(widths),
            num_classes=m.num_classes,
            stem=tuple(m.stem),
            block_kind=m.block_kind,
            input_channels=m.input_channels,
        )

    def sampling_rule(self) -> SamplingRule:
        if self.sampling.choices is None:
            return SamplingRule(tuple(self.model.stage_blocks))
        return SamplingRule(tuple(self.sampling.choices))

    def resolution_range(self, size: int) -> ResolutionRange:
        if self.input.l_min is None and self.input.l_max is None:
            return ResolutionRange.default_for(size)
        hi = self.input.l_max if self.input.l_max is not None else size
        lo = self.input.l_min if self.input.l_min is not None else ResolutionRange.default_for(hi).l_min
        return ResolutionRange(lo, hi)

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ConfigError("mode", f"{self.mode!r} not in {MODES}")
        if self.mode == "ct" and self.k_subnets != 0:
            raise ConfigError("k_subnets", f"mode=ct requires k_subnets == 0, got {self.k_subnets}")
        if self.mode in ("st", "st_pp") and self.k_subnets < 1:
            raise ConfigError("k_subnets", f"mode={self.mode} requires k_subnets >= 1, got {self.k_subnets}")
        for key in ("epochs", "batch_size"):
            if getattr(self, key) < 1:
                raise ConfigError(key, f"must be >= 1, got {getattr(self, key)}")
        try:
            spec = self.network_spec()
        except ConfigError as exc:
            raise ConfigError(f"model.{exc.key}", str(exc).split(": ", 1)[1]) from None
        if self.sampling.choices is not None and len(self.sampling.choices) != spec.num_stages:
            raise ConfigError(
                "sampling.choices",
                f"has {len(self.sampling.choices)} entries but model.stage_blocks has {spec.num_stages}",
            )
        for i, (s, n) in enumerate(zip(self.sampling_rule().choices, spec.stage_blocks)):
            if not 1 <= s <= n:
                raise ConfigError("sampling.choices", f"entry {i} is {s}, outside [1, model.stage_blocks[{i}]={n}]")
        if self.loss.variant not in VARIANTS:
            raise ConfigError("loss.variant", f"{self.loss.variant!r} not in {VARIANTS}")
        if self.loss.lam < 0:
            raise ConfigError("loss.lambda", f"must be >= 0, got {self.loss.lam}")
        if self.optim.schedule not in SCHEDULES:
            raise ConfigError("optim.schedule", f"{self.optim.schedule!r} not in {SCHEDULES}")
        if self.optim.lr < 0 or self.optim.momentum < 0 or self.optim.weight_decay < 0:
            raise ConfigError("optim", "lr, momentum and weight_decay must be >= 0")
        if self.optim.decay_epochs < 1:
            raise ConfigError("optim.decay_epochs", "must be >= 1")
        if self.data.source not in ("cifar10", "synth"):
            raise ConfigError("data.source", f"{self.data.source!r} not in ('cifar10', 'synth')")
        if self.data.source == "synth" and self.data.synth.size < 8:
            raise ConfigError("data.synth.size", "must be >= 8")
        if self.data.synth.num_classes != self.model.num_classes and self.data.source == "synth":
            raise ConfigError(
                "data.synth.num_classes",
                f"{self.data.synth.num_classes} differs from model.num_classes={self.model.num_classes}",
            )
        if self.input.l_min is not None or self.input.l_max is not None:
            lo, hi = self.input.l_min, self.input.l_max
            if (lo is not None and lo < 1) or (hi is not None and hi < 1) or (
                lo is not None and hi is not None and lo > hi
            ):
                raise ConfigError("input.l_min", f"need 1 <= input.l_min <= input.l_max, got [{lo}, {hi}]")
        e = self.eval
        if e.val_resize is not None and e.val_crop is not None and e.val_resize < e.val_crop:
            raise ConfigError("eval.val_resize", f"{e.val_resize} < eval.val_crop={e.val_crop}")
        if e.every < 1:
            raise ConfigError("eval.every", "must be >= 1")
        if e.subnets not in ("enumerate", "none"):
            raise ConfigError("eval.subnets", f"{e.subnets!r} not in ('enumerate', 'none')")
        return self


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    ce: float
    mean_kl: float
    total: float
    lr: float
    main_top1: float | None = None
    subnet_top1: dict[str, float] | None = None
    wall_time: float | None = None
    main_top5: float | None = None
    eval_ce_main: float | None = None
    eval_ce_sub: float | None = None
    eval_kl: float | None = None
    ce_gap: float | None = None
    ce_gap_bound: float | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=False)


# ---------------------------------------------------------------------------
# optimization


def no_decay_names(model: torch.nn.Module) -> set[str]:
    names = set()
    for mod_name, mod in model.named_modules():
        if isinstance(mod, Norm):
            names.update(f"{mod_name}.{p}" for p, _ in mod.named_parameters(recurse=False))
    return names


def sgd_update(
    model: torch.nn.Module,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    buffers: dict[str, torch.Tensor] | None = None,
    exempt: set[str] | None = None,
) -> None:
    """Classic momentum SGD: ``v = m * v + (g + wd * w)``, ``w -= lr * v``.

    The first step initializes ``v`` to the gradient. Normalization scale and
    shift are exempt from weight decay.
    """
    if exempt is None:
        exempt = no_decay_names(model)
    if buffers is None:
        buffers = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.grad is None:
                continue
            g = p.grad
            if weight_decay and name not in exempt:
                g = g + weight_decay * p
            if momentum:
                buf = buffers.get(name)
                if buf is None:
                    buf = g.clone()
                else:
                    buf.mul_(momentum).add_(g)
                buffers[name] = buf
                g = buf
            p.sub_(lr * g)


class SGD:
    def __init__(self, model: torch.nn.Module, momentum: float, weight_decay: float):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, torch.Tensor] = {}
        self.exempt = no_decay_names(model)
        self.updates = 0

    def step(self, lr: float) -> None:
        sgd_update(self.model, lr, self.momentum, self.weight_decay, self.buffers, self.exempt)
        self.updates += 1


def lr_at(
    schedule: str,
    step: int,
    total_steps: int,
    base_lr: float,
    steps_per_epoch: int = 1,
    decay_rate: float = 0.1,
    decay_epochs: int = 30,
) -> float:
    if schedule == "cosine":
        if total_steps <= 0:
            return base_lr
        return base_lr * 0.5 * (1 + math.cos(math.pi * step / total_steps))
    if schedule == "step":
        epoch = step // max(1, steps_per_epoch)
        return base_lr * decay_rate ** (epoch // decay_epochs)
    raise ConfigError("optim.schedule", f"{schedule!r} not in {SCHEDULES}")


# ---------------------------------------------------------------------------
# training step


def _top1(logits: torch.Tensor, labels: torch.Tensor) -> float:
    return float((logits.argmax(dim=1) == labels).double().mean())


def train_step(
    model: ResNet,
    batch: torch.Tensor,
    labels: torch.Tensor,
    cfg: TrainConfig,
    rng: np.random.Generator,
    opt: SGD,
    lr: float,
    mean: Sequence[float],
    std: Sequence[float],
    step: int = 0,
    epoch: int = 0,
    masks: Sequence[DepthMask] | None = None,
    resolutions: Sequence[int] | None = None,
) -> MetricsRecord:
    """One update of the main network.

    ``batch`` holds augmented images in [0, 1]. The main network sees it at
    native resolution; in ``st``/``st_pp`` mode ``cfg.k_subnets`` subnets are
    drawn (``masks``/``resolutions`` override the draws) and distilled towards
    the detached main logits. Gradients of all terms accumulate before the
    single SGD update.
    """
    t0 = time.perf_counter()
    spec = model.spec
    model.train()
    zero_grad(model)
    z_m = model(imgops.normalize(batch, mean, std))
    k = 0 if cfg.mode == "ct" else cfg.k_subnets
    if masks is not None:
        k = len(masks)

    ce = cross_entropy(z_m, labels)
    backward(model, ce)

    kl_terms = []
    if k:
        target = z_m.detach()
        rule = cfg.sampling_rule()
        size = min(batch.shape[-2:])
        res_range = cfg.resolution_range(size)
        for i in range(k):
            mask = masks[i] if masks is not None else sample_subnet(spec, rule, rng)
            if resolutions is not None:
                l_s = resolutions[i]
            elif cfg.mode == "st_pp":
                l_s = imgops.sample_resolution(res_range, rng)
            else:
                l_s = size
            x_s = imgops.normalize(imgops.resize_shorter_side(batch, l_s), mean, std)
            z_s = model(x_s, mask, track=False)
            kl = distillation_term(cfg.loss.variant, target, z_s)
            kl_terms.append(float(kl.detach()))
            backward(model, cfg.loss.lam * kl / k)

    mean_kl = sum(kl_terms) / len(kl_terms) if kl_terms else 0.0
    total = float(ce.detach()) + cfg.loss.lam * mean_kl
    record = MetricsRecord(
        step=step,
        epoch=epoch,
        ce=float(ce.detach()),
        mean_kl=mean_kl,
        total=total,
        lr=lr,
        main_top1=_top1(z_m.detach(), labels),
        wall_time=(time.perf_counter() - t0) if cfg.log.wall_time else None,
    )
    if not math.isfinite(total) or total > DIVERGENCE_LIMIT:
        raise DivergenceError(f"loss diverged at step {step}: total={total}", record)
    opt.step(lr)
    return record


# ---------------------------------------------------------------------------
# evaluation


def _preprocess_eval(images: torch.Tensor, cfg: EvalConfig) -> torch.Tensor:
    size = min(images.shape[-2:])
    resize = cfg.val_resize or size
    crop = cfg.val_crop or resize
    return imgops.center_crop(imgops.resize_shorter_side(images, resize), crop)


@torch.no_grad()
def eval_logits(
    model: ResNet, mask: DepthMask | None, dataset: ImageDataset, cfg: EvalConfig | None = None
) -> torch.Tensor:
    """Eval-mode logits over the whole split after resize + center crop."""
    cfg = cfg or EvalConfig()
    was_training = model.training
    model.eval()
    out = []
    for images, _ in dataset.batches(cfg.batch_size):
        x = imgops.normalize(_preprocess_eval(images, cfg), dataset.mean, dataset.std)
        out.append(model(x, mask))
    model.train(was_training)
    return torch.cat(out)


def topk_accuracy(logits: torch.Tensor, labels: torch.Tensor, k: int) -> float:
    k = min(k, logits.shape[1])
    hits = (logits.topk(k, dim=1).indices == labels[:, None]).any(dim=1)
    return float(hits.double().mean())


def evaluate(
    model: ResNet, mask: DepthMask | None, dataset: ImageDataset, cfg: EvalConfig | None = None
) -> tuple[float, float]:
    """Top-1 and top-5 accuracy of the masked network on ``dataset``."""
    logits = eval_logits(model, mask, dataset, cfg)
    return topk_accuracy(logits, dataset.labels, 1), topk_accuracy(logits, dataset.labels, 5)


def ce_gap_stats(
    main_logits: torch.Tensor, sub_logits: Sequence[torch.Tensor], labels: torch.Tensor
) -> dict[str, float]:
    """Measured CE gap between the main network and the subnet average.

    ``eps1`` is the main CE, ``eps2`` the mean KL(main || sub); the bound is
    ``(eps2 + ln N) e^{eps1} + eps1``.
    """
    from .diagnostics import ce_gap_bound

    ce_main = float(cross_entropy(main_logits, labels))
    p_m = softmax(main_logits.double())
    ce_subs = [float(cross_entropy(z, labels)) for z in sub_logits]
    kls = [float(kl_divergence(p_m, softmax(z.double()))) for z in sub_logits]
    ce_sub = sum(ce_subs) / len(ce_subs)
    kl = sum(kls) / len(kls)
    return {
        "eval_ce_main": ce_main,
        "eval_ce_sub": ce_sub,
        "eval_kl": kl,
        "ce_gap": abs(ce_main - ce_sub),
        "ce_gap_bound": ce_gap_bound(ce_main, kl, main_logits.shape[1]),
    }


# ---------------------------------------------------------------------------
# experiments


def data_root(cfg: TrainConfig) -> Path:
    root = cfg.data.root or os.environ.get("STIMTRAIN_DATA")
    if not root:
        raise ConfigError("data.root", "not set and STIMTRAIN_DATA is not defined")
    root = Path(root)
    sub = root / "cifar-10-batches-bin"
    return sub if sub.is_dir() else root


def load_datasets(cfg: TrainConfig) -> tuple[ImageDataset, ImageDataset]:
    d = cfg.data
    if d.source == "synth":
        s = d.synth
        full = imgops.synth_dataset(s.seed, s.num_classes, s.samples_per_class + s.test_per_class, s.size)
        train, test = imgops.split_per_class(full, s.test_per_class)
    else:
        root = data_root(cfg)
        train = imgops.load_cifar10_binary(root, "train")
        test = imgops.load_cifar10_binary(root, "test")
    if d.train_limit:
        train = train.subset(range(min(d.train_limit, len(train))))
    if d.test_limit:
        test = test.subset(range(min(d.test_limit, len(test))))
    if d.mean is not None or d.std is not None:
        mean = tuple(d.mean) if d.mean is not None else train.mean
        std = tuple(d.std) if d.std is not None else train.std
        train.mean, train.std, test.mean, test.std = mean, std, mean, std
    else:
        test.mean, test.std = train.mean, train.std
    return train, test


def _optim_arrays(opt: SGD) -> dict[str, np.ndarray]:
    return {f"optim.momentum.{k}": v.detach().cpu().numpy() for k, v in opt.buffers.items()}


def save_training_checkpoint(path: Path, model: ResNet, opt: SGD, epoch: int, step: int) -> None:
    arrays = {**model_arrays(model), **_optim_arrays(opt)}
    save_checkpoint(path, arrays, {"epoch": epoch, "step": step, "spec": model.spec.to_dict()})


def restore_training_checkpoint(path: Path, model: ResNet, opt: SGD) -> tuple[int, int]:
    arrays, meta = load_checkpoint(path)
    load_model_arrays(model, {k: v for k, v in arrays.items() if not k.startswith("optim.")})
    prefix = "optim.momentum."
    opt.buffers = {
        k[len(prefix) :]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)
    }
    return int(meta["epoch"]), int(meta["step"])


@dataclass
class ExperimentResult:
    records: list[MetricsRecord]
    model: ResNet
    out_dir: Path | None


def run_experiment(
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    datasets: tuple[ImageDataset, ImageDataset] | None = None,
    stop_after_epoch: int | None = None,
) -> ExperimentResult:
    """Train per ``cfg`` and log one MetricsRecord per eval epoch.

    Writes ``metrics.jsonl``, ``resolved_config.json``, ``ckpt_last.stpp``
    after every epoch and ``ckpt_final.stpp`` at the end when ``out_dir`` is
    given. ``resume`` continues from a checkpoint written by an earlier run
    with the same config; data order and subnet draws derive from
    ``(seed, epoch)`` so the continuation matches an uninterrupted run.
    """
    from .config import dump_config

    cfg.validate()
    train, test = datasets if datasets is not None else load_datasets(cfg)
    spec = cfg.network_spec()
    model = build_network(spec, cfg.seed)
    opt = SGD(model, cfg.optim.momentum, cfg.optim.weight_decay)
    augment = imgops.build_augment(cfg.data.augment)

    steps_per_epoch = len(train) // cfg.batch_size
    if steps_per_epoch < 1:
        raise ConfigError("batch_size", f"{cfg.batch_size} exceeds the training set size {len(train)}")
    total_steps = cfg.epochs * steps_per_epoch

    start_epoch, step = 0, 0
    records: list[MetricsRecord] = []
    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "resolved_config.json").write_text(dump_config(cfg))
        metrics_path = out_dir / "metrics.jsonl"
    if resume is not None:
        start_epoch, step = restore_training_checkpoint(Path(resume), model, opt)
        if metrics_path is not None and metrics_path.exists():
            kept = []
            for line in metrics_path.read_text().splitlines():
                rec = MetricsRecord(**json.loads(line))
                if rec.epoch < start_epoch:
                    kept.append(rec)
            records = kept
    if metrics_path is not None:
        metrics_path.write_text("".join(r.to_json() + "\n" for r in records))

    sub_masks = []
    if cfg.eval.subnets == "enumerate":
        sub_masks = enumerate_space(spec, cfg.sampling_rule())

    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    for epoch in range(start_epoch, last_epoch):
        t0 = time.perf_counter()
        data_rng = np.random.default_rng([cfg.seed, epoch, 0])
        sample_rng = np.random.default_rng([cfg.seed, epoch, 1])
        sums = np.zeros(3)
        n = 0
        lr = cfg.optim.lr
        for images, labels in train.batches(cfg.batch_size, data_rng, drop_last=True):
            images = augment(images, data_rng)
            lr = lr_at(
                cfg.optim.schedule,
                step,
                total_steps,
                cfg.optim.lr,
                steps_per_epoch,
                cfg.optim.decay_rate,
                cfg.optim.decay_epochs,
            )
            try:
                rec = train_step(
                    model, images, labels, cfg, sample_rng, opt, lr, train.mean, train.std, step, epoch
                )
            except DivergenceError as exc:
                if metrics_path is not None and exc.record is not None:
                    with open(metrics_path, "a") as f:
                        f.write(exc.record.to_json() + "\n")
                raise
            sums += (rec.ce, rec.mean_kl, rec.total)
            n += 1
            step += 1

        if out_dir is not None:
            save_training_checkpoint(out_dir / "ckpt_last.stpp", model, opt, epoch + 1, step)

        if (epoch + 1) % cfg.eval.every == 0 or epoch + 1 == cfg.epochs:
            ce, mean_kl, total = sums / max(n, 1)
            main = eval_logits(model, None, test, cfg.eval)
            record = MetricsRecord(
                step=step,
                epoch=epoch,
                ce=float(ce),
                mean_kl=float(mean_kl),
                total=float(total),
                lr=float(lr),
                main_top1=topk_accuracy(main, test.labels, 1),
                main_top5=topk_accuracy(main, test.labels, 5),
            )
            if sub_masks:
                subs = [eval_logits(model, m, test, cfg.eval) for m in sub_masks]
                record.subnet_top1 = {str(m): topk_accuracy(z, test.labels, 1) for m, z in zip(sub_masks, subs)}
                for key, value in ce_gap_stats(main, subs, test.labels).items():
                    setattr(record, key, value)
            if cfg.log.wall_time:
                record.wall_time = time.perf_counter() - t0
            records.append(record)
            log.info(
                "epoch %d step %d ce %.4f kl %.4f top1 %.4f", epoch, step, record.ce, record.mean_kl, record.main_top1
            )
            if metrics_path is not None:
                with open(metrics_path, "a") as f:
                    f.write(record.to_json() + "\n")

    if out_dir is not None and last_epoch == cfg.epochs:
        save_training_checkpoint(out_dir / "ckpt_final.stpp", model, opt, cfg.epochs, step)
    return ExperimentResult(records, model, out_dir)
