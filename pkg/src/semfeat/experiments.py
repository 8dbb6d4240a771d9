"""Desk-scale experiment protocol: overfit, fine-tune, held-out matching, semantic-filter delta.

Shared by scripts/run_experiments.py and the acceptance tests so both measure the same thing.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import LossConfig
from .matcheval import MatchConfig
from .model import ModelConfig, MultiTaskNet
from .pipeline import REFERENCE_VALUES, evaluate_corpus, gap_report, semantic_off
from .synthgen import SceneConfig, SynthConfig, make_samples
from .trainer import TrainConfig, TrainState, train


def desk_model() -> ModelConfig:
    """Narrow variant sized for a single CPU core."""
    return ModelConfig(base_channels=16, d_enc=64, d_task=32, d_attn=32, d_desc=64)


@dataclass
class Protocol:
    model: ModelConfig = field(default_factory=desk_model)
    loss: LossConfig = field(default_factory=LossConfig)
    # Heat peaks of a briefly trained net sit well below 0.5.
    match: MatchConfig = field(default_factory=lambda: MatchConfig(threshold=0.1, ratio=0.9))
    learning_rate: float = 1e-3
    batch_size: int = 16
    overfit_pairs: int = 20
    overfit_epochs: int = 200
    warmup_epochs: int = 20
    finetune_pairs: int = 500
    finetune_epochs: int = 10
    heldout_pairs: int = 100
    dynamic_pairs: int = 100
    dynamic_prob: float = 0.5
    dynamic_displacement_px: float = 10.0
    # Disjoint master seeds per corpus. The matcher settings above were picked on
    # seeds 3 and 4, so the reported corpora use fresh ones.
    overfit_seed: int = 1
    finetune_seed: int = 2
    heldout_seed: int = 5
    dynamic_seed: int = 6


@dataclass
class OverfitResult:
    state: TrainState
    first_loss: float
    last_loss: float
    freeze_checked_epochs: int
    freeze_bit_exact: bool
    unfrozen_moved: bool
    seconds: float

    @property
    def reduction(self) -> float:
        return 1.0 - self.last_loss / self.first_loss


def run_overfit(p: Protocol, out_dir=None) -> OverfitResult:
    """Train from scratch on a small corpus, checking the warm-up freeze after every warm-up epoch."""
    cfg = TrainConfig(epochs=p.overfit_epochs, learning_rate=p.learning_rate, batch_size=p.batch_size,
                      warmup_epochs=p.warmup_epochs, checkpoint_every=0)
    checked, exact, moved = 0, True, True

    def check(state: TrainState):
        nonlocal checked, exact, moved
        params = dict(state.net.named_parameters())
        if state.epoch <= p.warmup_epochs:
            checked += 1
            exact &= all(np.array_equal(params[k].detach().numpy(), v) for k, v in state.initial_frozen.items())
        elif state.epoch == p.warmup_epochs + 1:
            moved = any(not np.array_equal(params[k].detach().numpy(), v) for k, v in state.initial_frozen.items())

    t0 = time.perf_counter()
    st = train(make_samples(p.overfit_pairs, p.overfit_seed), p.model, p.loss, cfg, out_dir=out_dir, on_epoch=check)
    return OverfitResult(st, st.history[0]["total"], st.history[-1]["total"], checked, exact, moved,
                         time.perf_counter() - t0)


def run_finetune(net: MultiTaskNet, p: Protocol, out_dir=None) -> TrainState:
    cfg = TrainConfig(epochs=p.finetune_epochs, learning_rate=p.learning_rate, batch_size=p.batch_size,
                      warmup=False, checkpoint_every=5)
    return train(make_samples(p.finetune_pairs, p.finetune_seed), p.model, p.loss, cfg, out_dir=out_dir, net=net)


def evaluate_heldout(net: MultiTaskNet, p: Protocol) -> dict:
    _, summary, _ = evaluate_corpus(net, make_samples(p.heldout_pairs, p.heldout_seed), p.match)
    return summary


def dynamic_corpus(p: Protocol):
    scene = SceneConfig(dynamic_prob=p.dynamic_prob, dynamic_displacement_px=p.dynamic_displacement_px)
    return make_samples(p.dynamic_pairs, p.dynamic_seed, SynthConfig(scene=scene))


def semantic_delta(net: MultiTaskNet, p: Protocol) -> dict:
    """Inlier ratio with and without semantic filtering on a corpus with moving dynamic objects."""
    samples = dynamic_corpus(p)
    _, on, _ = evaluate_corpus(net, samples, p.match)
    _, off, _ = evaluate_corpus(net, samples, semantic_off(p.match))
    delta = None if on["inlier_ratio"] is None or off["inlier_ratio"] is None else on["inlier_ratio"] - off["inlier_ratio"]
    return {"filtered": on, "unfiltered": off, "inlier_ratio_delta": delta}


def run_all(p: Protocol, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ov = run_overfit(p, out / "overfit")
    t0 = time.perf_counter()
    ft = run_finetune(ov.state.net, p, out / "finetune")
    ft_seconds = time.perf_counter() - t0
    held = evaluate_heldout(ft.net, p)
    sem = semantic_delta(ft.net, p)
    results = {
        "protocol": dataclasses.asdict(p),
        "overfit": {"first_loss": ov.first_loss, "last_loss": ov.last_loss, "reduction": ov.reduction,
                    "freeze_checked_epochs": ov.freeze_checked_epochs, "freeze_bit_exact": ov.freeze_bit_exact,
                    "unfrozen_after_warmup": ov.unfrozen_moved, "seconds": ov.seconds},
        "finetune": {"first_loss": ft.history[0]["total"], "last_loss": ft.history[-1]["total"], "seconds": ft_seconds},
        "heldout": held,
        "reference_gap": gap_report(held),
        "semantic": sem,
    }
    (out / "results.json").write_text(json.dumps(results, indent=2, default=float) + "\n")
    (out / "summary.md").write_text(render_report(results))
    return results


def _fmt(v, spec: str = ".1f") -> str:
    return "n/a" if v is None else format(v, spec)


def render_report(r: dict) -> str:
    ov, held, gap, sem = r["overfit"], r["heldout"], r["reference_gap"], r["semantic"]
    lines = [
        "# Desk-scale experiment summary",
        "",
        f"## Overfit ({r['protocol']['overfit_pairs']} pairs, {r['protocol']['overfit_epochs']} epochs)",
        f"- total loss {ov['first_loss']:.4f} -> {ov['last_loss']:.4f} ({100 * ov['reduction']:.1f}% reduction)",
        f"- warm-up freeze bit-exact over {ov['freeze_checked_epochs']} epochs: {ov['freeze_bit_exact']}",
        f"- wall time {ov['seconds']:.0f} s",
        "",
        f"## Held-out matching at eps = {r['protocol']['match']['eps_px']:g} px "
        f"(after {r['protocol']['finetune_epochs']} epochs on {r['protocol']['finetune_pairs']} pairs)",
        "",
        "| metric | ours (%) | reference (%) | gap (pts) |",
        "|---|---|---|---|",
    ]
    for k in ("keypoint_recall", "inlier_ratio"):
        g = gap[k]
        lines.append(f"| {k} | {_fmt(g['ours'])} | {g['reference']:.1f} | {_fmt(g['gap'], '+.1f')} |")
    lines += [
        "",
        f"RANSAC inlier ratio {_fmt(held.get('ransac_inlier_ratio'))}%, pairs {held['pairs']}.",
        f"Reference trajectory RMSE {REFERENCE_VALUES['trajectory_rmse_m']} m has no desk-scale counterpart.",
        "",
        f"Note: {gap['note']}.",
        "",
        "## Semantic filtering on moving dynamic objects",
        f"- inlier ratio filtered {_fmt(sem['filtered']['inlier_ratio'])}%, "
        f"unfiltered {_fmt(sem['unfiltered']['inlier_ratio'])}%, delta {_fmt(sem['inlier_ratio_delta'], '+.2f')} pts",
        "",
    ]
    return "\n".join(lines)
