"""Shared U-Net encoder, cross-task mixer and the three task decoders.

Tensors inside the network are NCHW. The mixer itself works channels-last,
one d_enc vector per spatial location, mirroring how it is usually written.
"""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

TASKS = ("kp", "desc", "seg")
CHECKPOINT_FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Raised when tensor shapes violate a module contract."""


@dataclass
class ModelConfig:
    depth: int = 3
    base_channels: int = 32
    d_enc: int = 128
    d_task: int = 64
    d_attn: int = 64
    d_desc: int = 128
    num_classes: int = 6
    residual: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**n for n in range(self.depth)]


class EncoderFeatures(NamedTuple):
    skips: list[torch.Tensor]  # F^(1)..F^(N), F^(n) at H / 2^(n-1)
    bottleneck: torch.Tensor  # (B, d_enc, H / 2^N, W / 2^N)


class TaskMaps(NamedTuple):
    heatmap: torch.Tensor  # (B, H, W)
    descriptors: torch.Tensor  # (B, d_desc, H, W)
    segmentation: torch.Tensor  # (B, C, H, W)


@dataclass
class MultiTaskOutput:
    """Single-image network output in channels-last numpy layout."""

    heatmap: np.ndarray  # (H, W)
    descriptors: np.ndarray  # (H, W, d_desc)
    segmentation: np.ndarray  # (H, W, C)


# ---------------------------------------------------------------- mixer


def ctmm_fuse(
    z: torch.Tensor,
    task_embeddings: torch.Tensor,
    W_q: torch.Tensor,
    W_k: torch.Tensor,
    W_v: torch.Tensor,
    W_r: torch.Tensor | None = None,
    return_attention: bool = False,
):
    """Cross-task attention over the three task embeddings.

    z is channels-last (..., d_enc); task_embeddings is (3, d_task) with one row
    per task. Each location's query attends over the three projected task
    columns, and the output is the attention-weighted mix of the value
    columns, shape (..., d). W_r adds the optional residual projection of z.
    """
    d_enc = z.shape[-1]
    if task_embeddings.ndim != 2 or task_embeddings.shape[0] != 3:
        raise ShapeError(f"task embeddings must be (3, d_task), got {tuple(task_embeddings.shape)}")
    d_task = task_embeddings.shape[1]
    d = W_q.shape[0]
    if W_q.shape != (d, d_enc):
        raise ShapeError(f"W_q must be (d, d_enc)=({d}, {d_enc}), got {tuple(W_q.shape)}")
    for name, W in (("W_k", W_k), ("W_v", W_v)):
        if W.shape != (d, d_task):
            raise ShapeError(f"{name} must be (d, d_task)=({d}, {d_task}), got {tuple(W.shape)}")
    T_cols = task_embeddings.transpose(0, 1)  # (d_task, 3)
    K = W_k @ T_cols  # (d, 3)
    V = W_v @ T_cols  # (d, 3)
    q = z @ W_q.transpose(0, 1)  # (..., d)
    alpha = torch.softmax(q @ K / math.sqrt(d), dim=-1)  # (..., 3)
    fused = alpha @ V.transpose(0, 1)  # (..., d)
    if W_r is not None:
        if W_r.shape != (d, d_enc):
            raise ShapeError(f"W_r must be (d, d_enc)=({d}, {d_enc}), got {tuple(W_r.shape)}")
        fused = fused + z @ W_r.transpose(0, 1)
    return (fused, alpha) if return_attention else fused


class CrossTaskMixer(nn.Module):
    """Per-decoder projections; the task-embedding bank is shared and passed in."""

    def __init__(self, d_enc: int, d_task: int, d: int, residual: bool = False):
        super().__init__()
        self.W_q = nn.Parameter(torch.empty(d, d_enc))
        self.W_k = nn.Parameter(torch.empty(d, d_task))
        self.W_v = nn.Parameter(torch.empty(d, d_task))
        self.W_r = nn.Parameter(torch.empty(d, d_enc)) if residual else None
        for W in (self.W_q, self.W_k, self.W_v, self.W_r):
            if W is not None:
                nn.init.xavier_uniform_(W)

    def forward(self, z: torch.Tensor, task_embeddings: torch.Tensor, return_attention: bool = False):
        # NCHW in and out.
        out = ctmm_fuse(
            z.permute(0, 2, 3, 1), task_embeddings, self.W_q, self.W_k, self.W_v, self.W_r, return_attention
        )
        if return_attention:
            fused, alpha = out
            return fused.permute(0, 3, 1, 2), alpha
        return out.permute(0, 3, 1, 2)


# ---------------------------------------------------------------- building blocks


class ConvBlock(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, n_convs: int = 2):
        layers: list[nn.Module] = []
        for i in range(n_convs):
            layers += [nn.Conv2d(c_in if i == 0 else c_out, c_out, 3, padding=1), nn.ReLU(inplace=False)]
        super().__init__(*layers)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = cfg.channels
        self.blocks = nn.ModuleList(ConvBlock(3 if n == 0 else chans[n - 1], chans[n]) for n in range(cfg.depth))
        self.bottleneck = ConvBlock(chans[-1], cfg.d_enc)
        self.depth = cfg.depth

    def forward(self, x: torch.Tensor) -> EncoderFeatures:
        h, w = x.shape[-2:]
        k = 2**self.depth
        if h % k or w % k:
            raise ShapeError(f"image size {h}x{w} not divisible by 2^depth = {k}")
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        return EncoderFeatures(skips, self.bottleneck(x))


class UpBlock(nn.Module):
    def __init__(self, c_in: int, c_skip: int, c_out: int):
        super().__init__()
        self.conv = ConvBlock(c_in + c_skip, c_out)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        if x.shape[-2:] != skip.shape[-2:]:
            raise ShapeError(f"upsampled {tuple(x.shape[-2:])} does not match skip {tuple(skip.shape[-2:])}")
        return self.conv(torch.cat([x, skip], dim=1))


class TaskDecoder(nn.Module):
    """Stage-one conv, cross-task mixer, then the skip-fed upsampling path."""

    def __init__(self, cfg: ModelConfig, out_channels: int):
        super().__init__()
        chans = cfg.channels
        self.stage1 = ConvBlock(cfg.d_enc, cfg.d_enc, n_convs=1)
        self.mixer = CrossTaskMixer(cfg.d_enc, cfg.d_task, cfg.d_attn, cfg.residual)
        ups = []
        c_in = cfg.d_attn
        for n in reversed(range(cfg.depth)):
            ups.append(UpBlock(c_in, chans[n], chans[n]))
            c_in = chans[n]
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(chans[0], out_channels, 1)

    def fuse(self, z: torch.Tensor, task_embeddings: torch.Tensor, return_attention: bool = False):
        return self.mixer(self.stage1(z), task_embeddings, return_attention)

    def decode(self, fused: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        """Pre-activation logits at full resolution."""
        if len(skips) != len(self.ups):
            raise ShapeError(f"expected {len(self.ups)} skip maps, got {len(skips)}")
        x = fused
        for up, skip in zip(self.ups, reversed(skips)):
            x = up(x, skip)
        return self.head(x)


def normalize_descriptors(x: torch.Tensor, dim: int = 1, eps: float = 1e-12) -> torch.Tensor:
    """L2-normalize along dim; zero vectors map to the first basis vector."""
    norm = x.norm(dim=dim, keepdim=True)
    e1 = torch.zeros_like(x)
    e1.narrow(dim, 0, 1).fill_(1.0)
    safe = x / norm.clamp_min(eps)
    return torch.where(norm > eps, safe, e1)


class MultiTaskNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        c = self.cfg
        self.encoder = Encoder(c)
        self.task_embeddings = nn.Parameter(torch.randn(3, c.d_task) / math.sqrt(c.d_task))
        self.kp_decoder = TaskDecoder(c, 1)
        self.desc_decoder = TaskDecoder(c, c.d_desc)
        self.seg_decoder = TaskDecoder(c, c.num_classes)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    @property
    def decoders(self) -> dict[str, TaskDecoder]:
        return {"kp": self.kp_decoder, "desc": self.desc_decoder, "seg": self.seg_decoder}

    def encode(self, images: torch.Tensor) -> EncoderFeatures:
        return self.encoder(images)

    def decode_keypoints(self, fused, skips) -> torch.Tensor:
        return torch.sigmoid(self.kp_decoder.decode(fused, skips))[:, 0]

    def decode_descriptors(self, fused, skips) -> torch.Tensor:
        return normalize_descriptors(self.desc_decoder.decode(fused, skips), dim=1)

    def decode_segmentation(self, fused, skips) -> torch.Tensor:
        return torch.softmax(self.seg_decoder.decode(fused, skips), dim=1)

    def forward(self, images: torch.Tensor) -> TaskMaps:
        feats = self.encode(images)
        z, skips, T = feats.bottleneck, feats.skips, self.task_embeddings
        return TaskMaps(
            self.decode_keypoints(self.kp_decoder.fuse(z, T), skips),
            self.decode_descriptors(self.desc_decoder.fuse(z, T), skips),
            self.decode_segmentation(self.seg_decoder.fuse(z, T), skips),
        )

    def encoder_prefix_parameters(self, levels: int) -> list[str]:
        """Qualified names of parameters in the first `levels` encoder blocks."""
        names = []
        for n in range(min(levels, self.cfg.depth)):
            names += [f"encoder.blocks.{n}.{k}" for k, _ in self.encoder.blocks[n].named_parameters()]
        return names


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) or (B, H, W, 3) arrays in [0, 1] to an NCHW tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected (B, H, W, 3) images, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


@torch.no_grad()
def predict(net: MultiTaskNet, image: np.ndarray) -> MultiTaskOutput:
    dtype = next(net.parameters()).dtype
    out = net(images_to_tensor(image, dtype))
    return MultiTaskOutput(
        out.heatmap[0].cpu().numpy().astype(np.float64),
        out.descriptors[0].permute(1, 2, 0).cpu().numpy().astype(np.float64),
        out.segmentation[0].permute(1, 2, 0).cpu().numpy().astype(np.float64),
    )


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, net: MultiTaskNet, extra_arrays: dict | None = None, extra_manifest: dict | None = None):
    """One zip archive: named .npy arrays plus manifest.json."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    arrays.update(extra_arrays or {})
    manifest = {"format_version": CHECKPOINT_FORMAT_VERSION, "architecture": asdict(net.cfg)}
    manifest.update(extra_manifest or {})
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    with zipfile.ZipFile(tmp, "a") as zf:
        zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version {manifest.get('format_version')}")
    with np.load(path, allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    return manifest, arrays


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[MultiTaskNet, dict, dict]:
    manifest, arrays = read_checkpoint(path)
    cfg = ModelConfig(**manifest["architecture"])
    if expected is not None and asdict(expected) != asdict(cfg):
        diff = {k: (v, asdict(cfg)[k]) for k, v in asdict(expected).items() if asdict(cfg)[k] != v}
        raise ValueError(f"{path}: architecture mismatch (expected, found): {diff}")
    net = MultiTaskNet(cfg)
    state = {k[len("model/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model/")}
    net.load_state_dict(state)
    return net, manifest, arrays
