"""Static metric plots rendered from a records file."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STAGE_ORDER = ("scratch", "latent_alignment", "perceptual_alignment", "decoder_refinement")


def _series(records, name):
    """``{stage_tag: (steps, values)}`` for records called ``name``, with steps offset per stage."""
    by_stage = defaultdict(list)
    for r in records:
        if r.name == name:
            by_stage[r.tags.get("stage", "")].append((r.step, r.value))
    out, offset = {}, 0
    for stage in sorted(by_stage, key=lambda s: STAGE_ORDER.index(s) if s in STAGE_ORDER else len(STAGE_ORDER)):
        pts = sorted(by_stage[stage])
        out[stage] = ([offset + s for s, _ in pts], [v for _, v in pts])
        offset += pts[-1][0]
    return out


def plot_alignment(records, path) -> bool:
    """Training losses across stages and held-out metrics after each stage. False if nothing to draw."""
    train = _series(records, "train/l1")
    evals = {n: [(r.tags.get("stage", ""), r.value) for r in records if r.name == f"eval/{n}"]
             for n in ("probe_acc", "rfid_proxy", "psnr")}
    if not train and not any(evals.values()):
        return False
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    for name, ax in zip(("train/l1", "train/sp"), axes[:2]):
        for stage, (x, y) in _series(records, name).items():
            ax.plot(x, y, label=stage)
        ax.set_title(name)
        ax.set_xlabel("step (cumulative)")
        ax.legend(fontsize=7)
    ax = axes[2]
    for name, marker in (("probe_acc", "o"), ("rfid_proxy", "s")):
        pts = evals[name]
        if pts:
            ax.plot(range(len(pts)), [v for _, v in pts], marker=marker, label=name)
            ax.set_xticks(range(len(pts)), [s for s, _ in pts], fontsize=7, rotation=15)
    ax.set_title("held-out metrics per stage")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return True


def plot_diffusion(records, path, series: dict = None) -> bool:
    """Flow-matching probe loss against step; ``series`` adds labelled ``(steps, values)`` curves."""
    pts = sorted((r.step, r.value) for r in records if r.name == "diffusion/fm_probe")
    curves = dict(series or {})
    if pts:
        curves.setdefault("fm probe loss", ([s for s, _ in pts], [v for _, v in pts]))
    if not curves:
        return False
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for label, (x, y) in curves.items():
        ax.plot(x, y, label=label)
    ax.set_xlabel("diffusion step")
    ax.set_ylabel("flow matching loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return True
