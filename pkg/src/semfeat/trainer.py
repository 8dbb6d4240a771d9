"""Training loop: decoupled-weight-decay Adam, warm-up freeze, checkpoints, metrics."""

from __future__ import annotations

import json
import logging
import math
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from sklearn.metrics import average_precision_score

from .losses import (
    LossConfig,
    descriptor_loss,
    hardest_negatives,
    keypoint_loss,
    mine_pairs,
    segmentation_loss,
    total_loss,
)
from .model import ModelConfig, MultiTaskNet, TaskMaps, images_to_tensor, read_checkpoint, save_checkpoint
from .synthgen import LabeledSample, load_corpus

log = logging.getLogger(__name__)

# Seed-sequence slot that keeps evaluation pair draws apart from any training epoch.
_EVAL_STREAM = 2**31


class NonFiniteLossError(RuntimeError):
    def __init__(self, msg: str, dump_path: Path):
        super().__init__(f"{msg} (batch dumped to {dump_path})")
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    epochs: int = 100
    batch_size: int = 16  # pairs per step; each pair contributes both views
    warmup_epochs: int = 20
    warmup: bool = True
    frozen_prefix_levels: int | None = None  # None -> ceil(depth / 2)
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.warmup and self.warmup_epochs > self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) > epochs ({self.epochs})")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")


class AdamW:
    """Adam with decoupled weight decay over a dict of named parameters."""

    def __init__(self, params: dict[str, torch.nn.Parameter], lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.state: dict[str, dict] = {}

    @torch.no_grad()
    def step(self, names: Sequence[str] | None = None):
        b1, b2 = self.betas
        for name in self.params if names is None else names:
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"step": 0, "m": torch.zeros_like(p), "v": torch.zeros_like(p)}
            st["step"] += 1
            t = st["step"]
            p.mul_(1 - self.lr * self.weight_decay)
            st["m"].mul_(b1).add_(g, alpha=1 - b1)
            st["v"].mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (st["v"].sqrt() / math.sqrt(1 - b2**t)).add_(self.eps)
            p.addcdiv_(st["m"], denom, value=-self.lr / (1 - b1**t))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> tuple[dict[str, np.ndarray], dict[str, int]]:
        arrays, steps = {}, {}
        for name, st in self.state.items():
            arrays[f"opt/m/{name}"] = st["m"].cpu().numpy()
            arrays[f"opt/v/{name}"] = st["v"].cpu().numpy()
            steps[name] = st["step"]
        return arrays, steps

    def load_state_arrays(self, arrays: dict[str, np.ndarray], steps: dict[str, int]):
        self.state = {}
        for name, t in steps.items():
            p = self.params[name]
            self.state[name] = {
                "step": int(t),
                "m": torch.from_numpy(arrays[f"opt/m/{name}"]).to(p.dtype),
                "v": torch.from_numpy(arrays[f"opt/v/{name}"]).to(p.dtype),
            }


@dataclass
class TrainState:
    epoch: int  # number of completed epochs
    net: MultiTaskNet
    optimizer: AdamW
    rng_state: dict
    history: list[dict] = field(default_factory=list)
    initial_frozen: dict[str, np.ndarray] = field(default_factory=dict)


def set_deterministic(enabled: bool = True):
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.manual_seed(0)


# ---------------------------------------------------------------- data


@dataclass
class _Tensors:
    img_a: torch.Tensor
    img_b: torch.Tensor
    kp_a: torch.Tensor
    kp_b: torch.Tensor
    lab_a: torch.Tensor
    lab_b: torch.Tensor
    valid: torch.Tensor
    H: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.img_a)


def _stack(samples: Sequence[LabeledSample], dtype=torch.float32) -> _Tensors:
    if not samples:
        raise ValueError("corpus is empty")
    return _Tensors(
        images_to_tensor(np.stack([s.image_a for s in samples]), dtype),
        images_to_tensor(np.stack([s.image_b for s in samples]), dtype),
        torch.from_numpy(np.stack([s.gt_a.keypoint_map for s in samples])).to(dtype),
        torch.from_numpy(np.stack([s.gt_b.keypoint_map for s in samples])).to(dtype),
        torch.from_numpy(np.stack([s.gt_a.labels for s in samples])).long(),
        torch.from_numpy(np.stack([s.gt_b.labels for s in samples])).long(),
        torch.from_numpy(np.stack([s.valid_mask for s in samples])).to(dtype),
        np.stack([s.homography for s in samples]),
        samples[0].gt_a.num_classes,
    )


def _as_samples(corpus) -> list[LabeledSample]:
    if isinstance(corpus, (str, Path)):
        return load_corpus(corpus)
    return list(corpus)


def batch_losses(out: TaskMaps, data: _Tensors, idx: np.ndarray, loss_cfg: LossConfig, pair_seed) -> dict:
    """Loss terms for a batch whose forward pass ran on cat([views a, views b])."""
    B = len(idx)
    kp_t = torch.cat([data.kp_a[idx], data.kp_b[idx]])
    lab_t = torch.cat([data.lab_a[idx], data.lab_b[idx]])
    mask = torch.cat([torch.ones_like(data.valid[idx]), data.valid[idx]])
    onehot = torch.nn.functional.one_hot(lab_t, data.num_classes).permute(0, 3, 1, 2).to(out.heatmap.dtype)
    red = loss_cfg.reduction
    l_kp = keypoint_loss(out.heatmap, kp_t, mask, red, loss_cfg.kp_pos_weight)
    l_seg = segmentation_loss(out.segmentation, onehot, mask, red, class_dim=1)
    h, w = out.heatmap.shape[-2:]
    l_desc = out.heatmap.new_zeros(())
    for k, i in enumerate(idx):
        pairs = mine_pairs(data.H[i], (h, w), loss_cfg, seed=[*pair_seed, int(i)])
        da = out.descriptors[k].permute(1, 2, 0)
        db = out.descriptors[B + k].permute(1, 2, 0)
        if loss_cfg.hard_negatives and len(pairs.neg_a):
            pairs.neg_b = hardest_negatives(da, db, pairs.neg_a, data.H[i], loss_cfg.eps_neg, seed=[*pair_seed, int(i), 1])
        l_desc = l_desc + descriptor_loss(da, db, pairs, loss_cfg.margin_pos, loss_cfg.margin_neg, red)
    if red == "mean":
        l_desc = l_desc / B
    return {"kp": l_kp, "desc": l_desc, "seg": l_seg, "total": total_loss(l_kp, l_desc, l_seg, loss_cfg)}


# ---------------------------------------------------------------- training


def _frozen_names(net: MultiTaskNet, cfg: TrainConfig) -> list[str]:
    levels = cfg.frozen_prefix_levels
    if levels is None:
        levels = math.ceil(net.cfg.depth / 2)
    return net.encoder_prefix_parameters(levels)


def _save_state(path: Path, state: TrainState, cfg: TrainConfig, model_cfg: ModelConfig, loss_cfg: LossConfig):
    arrays, steps = state.optimizer.state_arrays()
    arrays.update({f"init_frozen/{k}": v for k, v in state.initial_frozen.items()})
    save_checkpoint(
        path,
        state.net,
        arrays,
        {
            "train_state": {"epoch": state.epoch, "opt_steps": steps, "rng": state.rng_state, "history": state.history},
            "train_config": asdict(cfg),
            "loss_config": asdict(loss_cfg),
        },
    )


def load_train_state(path, cfg: TrainConfig) -> TrainState:
    manifest, arrays = read_checkpoint(path)
    net = MultiTaskNet(ModelConfig(**manifest["architecture"]))
    net.load_state_dict({k[6:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model/")})
    named = dict(net.named_parameters())
    opt = AdamW(named, cfg.learning_rate, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    ts = manifest["train_state"]
    opt.load_state_arrays(arrays, ts["opt_steps"])
    init_frozen = {k[len("init_frozen/"):]: v for k, v in arrays.items() if k.startswith("init_frozen/")}
    return TrainState(ts["epoch"], net, opt, ts["rng"], ts["history"], init_frozen)


def train(
    corpus,
    model_cfg: ModelConfig | None = None,
    loss_cfg: LossConfig | None = None,
    config: TrainConfig | None = None,
    out_dir=None,
    val_corpus=None,
    resume_from=None,
    net: MultiTaskNet | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Train on a corpus (directory or list of LabeledSample) and return the final state.

    With out_dir set, writes metrics.jsonl, last.ckpt, best.ckpt and
    epoch_XXXX.ckpt every `checkpoint_every` epochs.
    """
    cfg = config or TrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    set_deterministic(cfg.deterministic)
    data = _stack(_as_samples(corpus))
    val = _as_samples(val_corpus) if val_corpus is not None else None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state = load_train_state(resume_from, cfg)
        net = state.net
    else:
        if net is None:
            torch.manual_seed(cfg.seed)
            net = MultiTaskNet(model_cfg or ModelConfig(num_classes=data.num_classes))
        named = dict(net.named_parameters())
        opt = AdamW(named, cfg.learning_rate, cfg.betas, cfg.adam_eps, cfg.weight_decay)
        frozen0 = {k: named[k].detach().cpu().numpy().copy() for k in _frozen_names(net, cfg)}
        state = TrainState(0, net, opt, {"scheme": "per-epoch", "seed": cfg.seed, "next_epoch": 0}, [], frozen0)
        if out is not None and (out / "metrics.jsonl").exists():
            (out / "metrics.jsonl").unlink()
    if net.cfg.num_classes != data.num_classes:
        raise ValueError(f"model has {net.cfg.num_classes} classes, corpus has {data.num_classes}")
    named = dict(net.named_parameters())
    frozen = set(_frozen_names(net, cfg))
    best = min((r["val_total"] if "val_total" in r else r["total"] for r in state.history), default=math.inf)

    net.train()
    for epoch in range(state.epoch, cfg.epochs):
        in_warmup = cfg.warmup and epoch < cfg.warmup_epochs
        trainable = [n for n in named if not (in_warmup and n in frozen)]
        for n, p in named.items():
            p.requires_grad_(n in trainable)
        rng = np.random.default_rng([cfg.seed, epoch])
        perm = rng.permutation(len(data))
        sums = {"kp": 0.0, "desc": 0.0, "seg": 0.0, "total": 0.0}
        for step, start in enumerate(range(0, len(data), cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            x = torch.cat([data.img_a[idx], data.img_b[idx]])
            res = batch_losses(net(x), data, idx, loss_cfg, pair_seed=(cfg.seed, epoch, step))
            if not torch.isfinite(res["total"]):
                dump = (out or Path(tempfile.mkdtemp())) / f"nonfinite_epoch{epoch}_step{step}.npz"
                np.savez(dump, indices=idx, images=x.numpy(), **{k: float(v.detach()) for k, v in res.items()})
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {step}", dump)
            state.optimizer.zero_grad()
            res["total"].backward()
            state.optimizer.step(trainable)
            for k in sums:
                sums[k] += float(res[k].detach()) * len(idx)
        record = {"epoch": epoch + 1, **{k: v / len(data) for k, v in sums.items()}, "frozen": in_warmup}
        if val is not None:
            metrics = evaluate_epoch(net, val, loss_cfg, seed=cfg.seed)
            record.update({f"val_{k}": v for k, v in metrics.items()})
            net.train()
        state.history.append(record)
        state.epoch = epoch + 1
        state.rng_state = {"scheme": "per-epoch", "seed": cfg.seed, "next_epoch": epoch + 1}
        log.info("epoch %d: %s", epoch + 1, {k: round(v, 5) for k, v in record.items() if isinstance(v, float)})
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            mc = net.cfg
            _save_state(out / "last.ckpt", state, cfg, mc, loss_cfg)
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                _save_state(out / f"epoch_{state.epoch:04d}.ckpt", state, cfg, mc, loss_cfg)
            score = record.get("val_total", record["total"])
            if score < best:
                best = score
                _save_state(out / "best.ckpt", state, cfg, mc, loss_cfg)
        if on_epoch is not None:
            on_epoch(state)
    for p in named.values():
        p.requires_grad_(True)
    return state


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def evaluate_epoch(model, corpus, loss_cfg: LossConfig | None = None, batch_size: int = 16, seed: int = 0) -> dict:
    """Mean losses, segmentation pixel accuracy and keypoint PR-AUC on held-out pairs.

    `model` is a MultiTaskNet or any callable mapping an NCHW batch to TaskMaps.
    Both views are scored; view b only inside its valid mask.
    """
    loss_cfg = loss_cfg or LossConfig()
    samples = _as_samples(corpus)
    if not samples:
        raise ValueError("evaluation corpus is empty")
    if isinstance(model, torch.nn.Module):
        model.eval()
        dtype = next(model.parameters()).dtype
    else:
        dtype = torch.float32
    data = _stack(samples, dtype)
    sums = {"kp": 0.0, "desc": 0.0, "seg": 0.0, "total": 0.0}
    correct = counted = 0
    scores, targets = [], []
    for step, start in enumerate(range(0, len(data), batch_size)):
        idx = np.arange(start, min(start + batch_size, len(data)))
        out = model(torch.cat([data.img_a[idx], data.img_b[idx]]))
        res = batch_losses(out, data, idx, loss_cfg, pair_seed=(seed, _EVAL_STREAM, step))
        for k in sums:
            sums[k] += float(res[k]) * len(idx)
        mask = torch.cat([torch.ones_like(data.valid[idx]), data.valid[idx]]).bool()
        labels = torch.cat([data.lab_a[idx], data.lab_b[idx]])
        pred = out.segmentation.argmax(dim=1)
        correct += int(((pred == labels) & mask).sum())
        counted += int(mask.sum())
        kp_t = torch.cat([data.kp_a[idx], data.kp_b[idx]])
        scores.append(out.heatmap[mask].double().numpy())
        targets.append(kp_t[mask].numpy())
    y, s = np.concatenate(targets), np.concatenate(scores)
    pr_auc = float(average_precision_score(y, s)) if y.any() else None
    metrics = {f"loss_{k}": v / len(data) for k, v in sums.items()}
    metrics["total"] = metrics.pop("loss_total")
    metrics["pixel_accuracy"] = correct / max(counted, 1)
    metrics["kp_pr_auc"] = pr_auc
    return metrics
