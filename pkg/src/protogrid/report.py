"""Rendering of explanation reports: one JSON file plus PNG figures."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

from .data.types import DatasetSplit
from .explain import ChannelWeightSummary, LocalExplanation, PrototypeFrequency

SCORE_FLOOR = 1e-6
SCHEMA_VERSION = 1

_CHANNEL_COLORS = ("tab:blue", "tab:orange", "tab:green", "tab:red", "tab:purple",
                   "tab:brown", "tab:pink", "tab:gray", "tab:olive", "tab:cyan")


@dataclass
class ExplanationBundle:
    """Everything one report covers; global parts are optional."""

    locals: list[LocalExplanation]
    weight_summary: ChannelWeightSummary | None = None
    frequency: PrototypeFrequency | None = None


def _fig(width: float, height: float) -> Figure:
    return Figure(figsize=(width, height), dpi=110)


def _save(fig: Figure, path: Path, written: list[Path]) -> None:
    fig.savefig(path, bbox_inches="tight")
    written.append(path)


def _render_channels(sample_pixels: np.ndarray, names: list[str], path: Path, written: list[Path]) -> None:
    c = sample_pixels.shape[2]
    fig = _fig(2.2 * c, 2.6)
    axes = fig.subplots(1, c, squeeze=False)[0]
    for j in range(c):
        axes[j].imshow(sample_pixels[..., j], cmap="gray")
        axes[j].set_title(names[j] if j < len(names) else f"channel {j + 1}", fontsize=8)
        axes[j].axis("off")
    _save(fig, path, written)


def _render_scores(exp: LocalExplanation, num_channels: int, path: Path, written: list[Path]) -> None:
    scores = np.maximum(np.asarray(exp.all_scores, dtype=float), SCORE_FLOOR)
    per_channel = scores.reshape(num_channels, -1)
    fig = _fig(6.4, 2.8)
    ax = fig.subplots()
    x = 0
    for j in range(num_channels):
        vals = np.sort(per_channel[j])
        ax.bar(
            np.arange(x, x + vals.size), vals,
            color=_CHANNEL_COLORS[j % len(_CHANNEL_COLORS)],
            width=1.0, label=f"channel {j + 1}",
        )
        x += vals.size
    ax.set_yscale("log")
    ax.set_ylim(bottom=SCORE_FLOOR)
    ax.set_ylabel(f"score for class {exp.target_class}")
    ax.set_xlabel("prototypes (sorted within channel)")
    ax.legend(fontsize=7)
    _save(fig, path, written)


def _render_prototype(exp_idx, rank, contribution, dataset, names, out_dir, written) -> None:
    panels = 1 + (contribution.source_sample_id is not None)
    fig = _fig(2.6 * (panels + 1), 2.8)
    axes = fig.subplots(1, panels + 1, squeeze=False)[0]
    col = 0
    if contribution.source_sample_id is not None and dataset is not None:
        source = dataset.train.sample_by_id(contribution.source_sample_id)
        channel = min(contribution.channel, source.pixels.shape[2] - 1)
        axes[col].imshow(source.pixels[..., channel], cmap="gray")
        box = contribution.receptive_box
        axes[col].add_patch(
            Rectangle(
                (box.col0 - 0.5, box.row0 - 0.5),
                box.col1 - box.col0 + 1, box.row1 - box.row0 + 1,
                fill=False, edgecolor="red", linewidth=1.5,
            )
        )
        axes[col].set_title(
            f"train {contribution.source_sample_id}, {names[channel] if channel < len(names) else channel}",
            fontsize=8,
        )
        axes[col].axis("off")
        col += 1
    heat = axes[col]
    scale = np.abs(contribution.scaling).max() or 1.0
    heat.imshow(contribution.scaling, cmap="RdGy", vmin=-scale, vmax=scale)
    heat.set_title("location scaling", fontsize=8)
    heat.axis("off")
    meta = axes[col + 1]
    meta.axis("off")
    meta.text(
        0.0, 0.5,
        f"prototype {contribution.prototype}\n"
        f"class {contribution.class_identity}, channel {contribution.channel + 1}\n"
        f"score {contribution.score:.4f}\n"
        f"max sim {contribution.max_similarity:.4f}\n"
        f"weight {contribution.head_weight:.4f}",
        fontsize=8, va="center",
    )
    _save(fig, out_dir / f"sample{exp_idx}_proto{rank}.png", written)


def _render_weights(summary: ChannelWeightSummary, names, out_dir, written) -> None:
    c = summary.psi_by_channel.shape[0]
    fig = _fig(7.0, 1.8 * c)
    axes = fig.subplots(c, 1, squeeze=False)[:, 0]
    scale = np.abs(summary.psi_by_channel).max() or 1.0
    for j in range(c):
        mat = summary.psi_by_channel[j].T  # (K, N)
        im = axes[j].imshow(mat, cmap="RdBu_r", vmin=-scale, vmax=scale, aspect="auto")
        axes[j].set_ylabel(names[j] if j < len(names) else f"ch {j + 1}", fontsize=8)
        axes[j].tick_params(labelsize=6)
    fig.colorbar(im, ax=list(axes), shrink=0.8)
    _save(fig, out_dir / "weights.png", written)


def _render_frequency(freq: PrototypeFrequency, names, out_dir, written) -> None:
    fig = _fig(6.0, 3.0)
    ax = fig.subplots()
    c = freq.channel_counts.shape[0]
    labels = [names[j] if j < len(names) else f"channel {j + 1}" for j in range(c)]
    ax.bar(labels, freq.channel_counts, color=[_CHANNEL_COLORS[j % len(_CHANNEL_COLORS)] for j in range(c)])
    ax.set_ylabel("top-scoring prototype count")
    title = "all classes" if not freq.class_filter else f"classes {freq.class_filter}"
    ax.set_title(f"Top-prototype frequency ({title})", fontsize=9)
    ax.tick_params(axis="x", labelsize=7, rotation=45)
    _save(fig, out_dir / "frequency.png", written)


def render_reports(
    bundle: ExplanationBundle,
    out_dir: str | Path,
    dataset: DatasetSplit | None = None,
    channel_names: list[str] | None = None,
) -> list[Path]:
    """Write report.json and figures into ``out_dir``; returns written paths.

    An empty bundle still yields a valid (empty) JSON report and no images.
    Source-patch and test-panel figures require ``dataset`` for pixel lookup.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create report directory {out_dir}: {err}") from err
    names = channel_names or (dataset.channel_names if dataset else [])
    written: list[Path] = []

    report = {
        "schema_version": SCHEMA_VERSION,
        "score_floor": SCORE_FLOOR,
        "locals": [exp.to_dict() for exp in bundle.locals],
    }
    if bundle.weight_summary is not None:
        report["channel_weights"] = bundle.weight_summary.to_dict()
    if bundle.frequency is not None:
        report["top_prototype_frequency"] = bundle.frequency.to_dict()
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report, indent=2))
    written.append(report_path)

    for exp in bundle.locals:
        sid = exp.sample_id
        if dataset is not None:
            for part_name in ("test", "validation", "train"):
                part = dataset.part(part_name)
                try:
                    sample = part.sample_by_id(sid)
                except KeyError:
                    continue
                _render_channels(sample.pixels, names, out_dir / f"sample{sid}_channels.png", written)
                break
        if exp.all_scores.size and exp.all_scores.size % exp.num_channels == 0:
            _render_scores(exp, exp.num_channels, out_dir / f"sample{sid}_scores.png", written)
        for rank, contribution in enumerate(exp.contributions, start=1):
            _render_prototype(sid, rank, contribution, dataset, names, out_dir, written)

    if bundle.weight_summary is not None:
        _render_weights(bundle.weight_summary, names, out_dir, written)
    if bundle.frequency is not None:
        _render_frequency(bundle.frequency, names, out_dir, written)
    return written
