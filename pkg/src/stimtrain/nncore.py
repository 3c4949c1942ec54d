"""Residual classification networks with depth-masked forward passes.

A single ``ResNet`` module owns every weight. Subnetworks are selected at call
time by a ``DepthMask`` that keeps a prefix of blocks in each stage; skipped
blocks contribute only their identity shortcut, so the main network and every
subnetwork read the same parameter storage.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, FormatError, InputError, MaskError, StateError

BLOCK_KINDS = ("basic", "bottleneck")


@dataclass(frozen=True)
class NetworkSpec:
    stage_blocks: tuple[int, ...]
    stage_widths: tuple[int, ...]
    num_classes: int = 10
    stem: tuple[int, int] = (3, 1)  # (kernel size, stride)
    block_kind: str = "basic"
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "stem", tuple(int(s) for s in self.stem))
        self.validate()

    def validate(self) -> None:
        if len(self.stage_blocks) < 1:
            raise ConfigError("stage_blocks", "at least one stage is required")
        if len(self.stage_blocks) != len(self.stage_widths):
            raise ConfigError(
                "stage_widths",
                f"length {len(self.stage_widths)} does not match stage_blocks length {len(self.stage_blocks)}",
            )
        for i, b in enumerate(self.stage_blocks):
            if b < 1:
                raise ConfigError("stage_blocks", f"entry {i} is {b}; every stage needs >= 1 block")
        for i, w in enumerate(self.stage_widths):
            if w < 1:
                raise ConfigError("stage_widths", f"entry {i} is {w}; widths must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes", f"{self.num_classes} < 2")
        if len(self.stem) != 2 or self.stem[0] < 1 or self.stem[1] < 1:
            raise ConfigError("stem", f"expected (kernel >= 1, stride >= 1), got {self.stem}")
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError("block_kind", f"{self.block_kind!r} not in {BLOCK_KINDS}")
        if self.input_channels < 1:
            raise ConfigError("input_channels", f"{self.input_channels} < 1")

    @property
    def num_stages(self) -> int:
        return len(self.stage_blocks)

    @property
    def expansion(self) -> int:
        return 4 if self.block_kind == "bottleneck" else 1

    def full_mask(self) -> "DepthMask":
        return DepthMask(self.stage_blocks)

    def to_dict(self) -> dict:
        return {
            "stage_blocks": list(self.stage_blocks),
            "stage_widths": list(self.stage_widths),
            "num_classes": self.num_classes,
            "stem": list(self.stem),
            "block_kind": self.block_kind,
            "input_channels": self.input_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**{**d, "stem": tuple(d.get("stem", (3, 1)))})


@dataclass(frozen=True)
class DepthMask:
    """Kept-block count per stage; a mask always keeps a prefix of each stage."""

    kept: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "kept", tuple(int(k) for k in self.kept))

    def check(self, spec: NetworkSpec) -> None:
        if len(self.kept) != spec.num_stages:
            raise MaskError(f"mask has {len(self.kept)} stages, network has {spec.num_stages}")
        for i, (k, n) in enumerate(zip(self.kept, spec.stage_blocks)):
            if not 1 <= k <= n:
                raise MaskError(f"stage {i}: kept={k} outside [1, {n}]")

    def is_full(self, spec: NetworkSpec) -> bool:
        return self.kept == spec.stage_blocks

    def __str__(self) -> str:
        return ",".join(str(k) for k in self.kept)

    @classmethod
    def parse(cls, text: str) -> "DepthMask":
        return cls(tuple(int(t) for t in text.replace(" ", "").split(",") if t))


# ---------------------------------------------------------------------------
# layers


class Norm(nn.BatchNorm2d):
    """BatchNorm whose running statistics are written only when ``track`` is set.

    Subnetwork passes normalize with batch statistics in train mode but leave
    the shared running state untouched.
    """

    def forward(self, x: torch.Tensor, track: bool = True) -> torch.Tensor:
        if self.training and not track:
            return F.batch_norm(x, None, None, self.weight, self.bias, True, 0.0, self.eps)
        return super().forward(x)


def _conv(cin: int, cout: int, k: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin: int, width: int, stride: int):
        super().__init__()
        cout = width
        self.conv1 = _conv(cin, width, 3, stride)
        self.bn1 = Norm(width)
        self.conv2 = _conv(width, cout, 3)
        self.bn2 = Norm(cout)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = _conv(cin, cout, 1, stride)
            self.proj_bn = Norm(cout)

    def forward(self, x: torch.Tensor, track: bool = True) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x), track))
        out = self.bn2(self.conv2(out), track)
        short = x if self.proj is None else self.proj_bn(self.proj(x), track)
        return F.relu(out + short)


class BottleneckBlock(nn.Module):
    expansion = 4

    def __init__(self, cin: int, width: int, stride: int):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = _conv(cin, width, 1)
        self.bn1 = Norm(width)
        self.conv2 = _conv(width, width, 3, stride)
        self.bn2 = Norm(width)
        self.conv3 = _conv(width, cout, 1)
        self.bn3 = Norm(cout)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = _conv(cin, cout, 1, stride)
            self.proj_bn = Norm(cout)

    def forward(self, x: torch.Tensor, track: bool = True) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x), track))
        out = F.relu(self.bn2(self.conv2(out), track))
        out = self.bn3(self.conv3(out), track)
        short = x if self.proj is None else self.proj_bn(self.proj(x), track)
        return F.relu(out + short)


class ResNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        block_cls = BottleneckBlock if spec.block_kind == "bottleneck" else BasicBlock
        k, s = spec.stem
        stem_width = spec.stage_widths[0]
        self.stem_conv = _conv(spec.input_channels, stem_width, k, s)
        self.stem_bn = Norm(stem_width)
        self.stages = nn.ModuleList()
        cin = stem_width
        for i, (n, w) in enumerate(zip(spec.stage_blocks, spec.stage_widths)):
            blocks = nn.ModuleList()
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(block_cls(cin, w, stride))
                cin = w * block_cls.expansion
            self.stages.append(blocks)
        self.out_channels = cin
        self.fc = nn.Linear(cin, spec.num_classes)

    def _resolve(self, mask: DepthMask | Sequence[int] | None) -> tuple[int, ...]:
        if mask is None:
            return self.spec.stage_blocks
        if not isinstance(mask, DepthMask):
            mask = DepthMask(tuple(mask))
        mask.check(self.spec)
        return mask.kept

    def features(
        self,
        x: torch.Tensor,
        mask: DepthMask | Sequence[int] | None = None,
        track: bool | None = None,
    ) -> torch.Tensor:
        """Final feature map before global pooling."""
        kept = self._resolve(mask)
        if track is None:
            track = kept == self.spec.stage_blocks
        if x.dim() != 4 or x.shape[1] != self.spec.input_channels:
            raise InputError(f"expected B x {self.spec.input_channels} x H x W input, got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise InputError("input batch contains non-finite values")
        out = F.relu(self.stem_bn(self.stem_conv(x), track))
        for blocks, k in zip(self.stages, kept):
            for block in blocks[:k]:
                out = block(out, track)
        return out

    def forward(
        self,
        x: torch.Tensor,
        mask: DepthMask | Sequence[int] | None = None,
        track: bool | None = None,
    ) -> torch.Tensor:
        """Logits of the subnetwork selected by ``mask`` (``None`` = main network).

        ``track`` controls whether normalization running statistics are updated
        in train mode; by default only full-depth passes write them.
        """
        out = self.features(x, mask, track)
        out = torch.flatten(F.adaptive_avg_pool2d(out, 1), 1)
        return self.fc(out)


def build_network(spec: NetworkSpec, seed: int = 0) -> ResNet:
    spec.validate()
    model = ResNet(spec)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
            elif isinstance(m, nn.Linear):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (1.0 / m.in_features) ** 0.5)
                m.bias.zero_()
            elif isinstance(m, Norm):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def backward(model: nn.Module, loss: torch.Tensor) -> None:
    """Populate ``.grad`` of every trainable parameter from ``loss``.

    Parameters the loss does not reach (e.g. blocks skipped by a mask) get an
    explicit zero gradient rather than ``None``.
    """
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise StateError("backward called without a recorded forward for this loss")
    loss.backward()
    for p in model.parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)


def zero_grad(model: nn.Module) -> None:
    for p in model.parameters():
        p.grad = None


def flops(spec: NetworkSpec, mask: DepthMask | None, height: int, width: int) -> int:
    """Multiply-accumulate count of one forward pass for a single image."""
    kept = spec.stage_blocks if mask is None else mask.kept

    def conv_out(size: int, k: int, stride: int) -> int:
        return (size + 2 * (k // 2) - k) // stride + 1

    def conv(cin, cout, k, stride, h, w):
        ho, wo = conv_out(h, k, stride), conv_out(w, k, stride)
        return cin * cout * k * k * ho * wo, ho, wo

    k, s = spec.stem
    total, h, w = conv(spec.input_channels, spec.stage_widths[0], k, s, height, width)
    cin = spec.stage_widths[0]
    for i, (n, wd) in enumerate(zip(spec.stage_blocks, spec.stage_widths)):
        for j in range(n):
            stride = 2 if (i > 0 and j == 0) else 1
            cout = wd * spec.expansion
            if j < kept[i]:
                if spec.block_kind == "basic":
                    a, ho, wo = conv(cin, wd, 3, stride, h, w)
                    b, _, _ = conv(wd, cout, 3, 1, ho, wo)
                    macs = a + b
                else:
                    a, _, _ = conv(cin, wd, 1, 1, h, w)
                    b, ho, wo = conv(wd, wd, 3, stride, h, w)
                    c, _, _ = conv(wd, cout, 1, 1, ho, wo)
                    macs = a + b + c
                if stride != 1 or cin != cout:
                    macs += conv(cin, cout, 1, stride, h, w)[0]
                total += macs
                h, w = ho, wo
            cin = cout
    return total + cin * spec.num_classes


# ---------------------------------------------------------------------------
# checkpoint container

MAGIC = b"STPP"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


def model_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    """Parameters and buffers as 32-bit arrays, in ``state_dict`` order."""
    out = {}
    for name, t in model.state_dict().items():
        a = t.detach().cpu().numpy()
        out[name] = a.astype("<i4") if np.issubdtype(a.dtype, np.integer) else a.astype("<f4")
    return out


def load_model_arrays(model: nn.Module, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
    state = model.state_dict()
    missing = [k for k in state if k not in arrays]
    if strict and missing:
        raise FormatError(f"checkpoint is missing arrays: {missing[:5]}")
    new_state = {}
    for k, ref in state.items():
        if k in arrays:
            a = arrays[k]
            if tuple(a.shape) != tuple(ref.shape):
                raise FormatError(f"array {k!r} has shape {a.shape}, expected {tuple(ref.shape)}")
            new_state[k] = torch.from_numpy(np.array(a)).to(ref.dtype)
        else:
            new_state[k] = ref
    model.load_state_dict(new_state)


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``arrays`` to the STPP container.

    Layout: magic ``STPP``, u32 version, u32 manifest byte length, UTF-8 JSON
    manifest (name, dtype, shape, offset per array plus ``meta``), then raw
    little-endian 32-bit arrays in manifest order. Offsets are relative to the
    start of the array section.
    """
    entries, blobs, offset = [], [], 0
    for name, a in arrays.items():
        a = np.asarray(a)
        code = "i32" if np.issubdtype(a.dtype, np.integer) else "f32"
        raw = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(a.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(manifest)))
        f.write(manifest)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}", 0)
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header", len(data))
    version, mlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    try:
        manifest = json.loads(data[12 : 12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})", 12) from None
    base = 12 + mlen
    arrays = {}
    for e in manifest["arrays"]:
        dt = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        end = start + count * dt.itemsize
        if end > len(data):
            raise FormatError(f"{path}: array {e['name']!r} runs past end of file", start)
        arrays[e["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=start).reshape(e["shape"]).copy()
    return arrays, manifest.get("meta", {})


def model_digest(model: nn.Module) -> str:
    """SHA-256 over the checkpoint encoding of the model state."""
    h = hashlib.sha256()
    for name, a in model_arrays(model).items():
        h.update(name.encode())
        h.update(a.tobytes())
    return h.hexdigest()


def named_parameter_shapes(model: nn.Module) -> dict[str, tuple[int, ...]]:
    return {n: tuple(p.shape) for n, p in model.named_parameters()}


# reference architectures ----------------------------------------------------


def cifar_resnet(depth: int, num_classes: int = 10) -> NetworkSpec:
    """CIFAR-style ResNet-{8,14,20,32,56}: three stages of (depth-2)/6 basic blocks."""
    if (depth - 2) % 6 != 0 or depth < 8:
        raise ConfigError("depth", f"{depth} is not of the form 6n+2 with n >= 1")
    n = (depth - 2) // 6
    return NetworkSpec((n, n, n), (16, 32, 64), num_classes=num_classes)


def bottleneck_resnet(num_classes: int = 10) -> NetworkSpec:
    """[3,4,6,3] bottleneck network at quarter width."""
    return NetworkSpec((3, 4, 6, 3), (16, 32, 64, 128), num_classes=num_classes, block_kind="bottleneck")
