"""Attention-weight capture, averaging and export.

Weights are averaged first over heads, then over samples.  Files are named
``decoder_layer{l}_{self|cross}.csv`` (layers counted from 1) with rows and
columns labelled by day number inside the window, the first encoder day
being day 1.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import WindowSample, stack_windows
from .model import ModelConfig, TsformerModel, forward_batch


@dataclass
class AttentionSummary:
    config: ModelConfig
    decoder_self: list[np.ndarray]
    decoder_cross: list[np.ndarray]
    sample_count: int
    head_count: int
    encoder_self: list[np.ndarray] = field(default_factory=list)
    # per-head means, [heads, rows, cols] per layer, keyed like the files
    per_head: dict[str, np.ndarray] = field(default_factory=dict)

    def decoder_days(self) -> list[int]:
        cfg = self.config
        first = cfg.encoder_input_length - cfg.overlap + 1
        return list(range(first, first + cfg.decoder_input_length))

    def encoder_days(self) -> list[int]:
        return list(range(1, self.config.encoder_input_length + 1))

    def matrices(self) -> dict[str, tuple[np.ndarray, list[int], list[int]]]:
        """Stem -> (matrix, row day labels, column day labels)."""
        dec, enc = self.decoder_days(), self.encoder_days()
        out = {}
        for layer, (s, c) in enumerate(zip(self.decoder_self, self.decoder_cross), start=1):
            out[f"decoder_layer{layer}_self"] = (s, dec, dec)
            out[f"decoder_layer{layer}_cross"] = (c, dec, enc)
        for layer, e in enumerate(self.encoder_self, start=1):
            out[f"encoder_layer{layer}_self"] = (e, enc, enc)
        return out


def capture_attention(
    model: TsformerModel,
    samples: Sequence[WindowSample],
    *,
    include_encoder: bool = False,
    per_head: bool = False,
    batch_size: int = 256,
) -> AttentionSummary:
    """Forward every sample with dropout off and average its attention."""
    if not samples:
        raise ValueError("capture_attention needs at least one sample")
    cfg = model.config
    sums: dict[str, list[np.ndarray]] = {}
    for start in range(0, len(samples), batch_size):
        enc, dec, _ = stack_windows(samples[start : start + batch_size])
        _, trace = forward_batch(enc, dec, model, training=False)
        groups = {"self": trace.decoder_self, "cross": trace.decoder_cross}
        if include_encoder:
            groups["enc"] = trace.encoder_self
        for key, layers in groups.items():
            batch_sums = [w.sum(axis=0) for w in layers]  # summed over samples: [heads, rows, cols]
            acc = sums.setdefault(key, [np.zeros_like(b) for b in batch_sums])
            for a, b in zip(acc, batch_sums):
                a += b
    n = len(samples)
    head_means = {k: [a / n for a in v] for k, v in sums.items()}
    summary = AttentionSummary(
        config=cfg,
        decoder_self=[h.mean(axis=0) for h in head_means["self"]],
        decoder_cross=[h.mean(axis=0) for h in head_means["cross"]],
        sample_count=n,
        head_count=cfg.heads,
        encoder_self=[h.mean(axis=0) for h in head_means.get("enc", [])],
    )
    if per_head:
        names = {"self": "decoder_layer{}_self", "cross": "decoder_layer{}_cross", "enc": "encoder_layer{}_self"}
        for key, layers in head_means.items():
            for layer, arr in enumerate(layers, start=1):
                summary.per_head[names[key].format(layer)] = arr
    return summary


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def write_matrix_csv(path, matrix: np.ndarray, row_days: Sequence[int], col_days: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["query_day", *[f"day_{d}" for d in col_days]])
        for day, row in zip(row_days, matrix):
            writer.writerow([f"day_{day}", *[repr(float(v)) for v in row]])


def read_matrix_csv(path) -> tuple[np.ndarray, list[int], list[int]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = [int(c.removeprefix("day_")) for c in rows[0][1:]]
    labels = [int(r[0].removeprefix("day_")) for r in rows[1:]]
    matrix = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    return matrix, labels, cols


def export_csv(summary: AttentionSummary, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for stem, (matrix, rows, cols) in summary.matrices().items():
        path = directory / f"{stem}.csv"
        write_matrix_csv(path, matrix, rows, cols)
        written.append(path)
    for stem, heads in summary.per_head.items():
        rows, cols = _labels_for(summary, stem)
        for k, matrix in enumerate(heads, start=1):
            path = directory / f"{stem}_head{k}.csv"
            write_matrix_csv(path, matrix, rows, cols)
            written.append(path)
    return written


def _labels_for(summary: AttentionSummary, stem: str):
    dec, enc = summary.decoder_days(), summary.encoder_days()
    if stem.startswith("encoder"):
        return enc, enc
    return (dec, dec) if stem.endswith("self") else (dec, enc)


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

MASKED_COLOR = "#bdbdbd"
CMAP = "Blues"


def cell_colors(matrix: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """RGBA per cell on a linear 0..max scale; masked cells get ``MASKED_COLOR``."""
    from matplotlib import colormaps, colors

    vmax = float(matrix[allowed].max()) if allowed.any() else 1.0
    norm = colors.Normalize(vmin=0.0, vmax=vmax if vmax > 0 else 1.0)
    rgba = colormaps[CMAP](norm(matrix))
    rgba[~allowed] = colors.to_rgba(MASKED_COLOR)
    return rgba


def _allowed(summary: AttentionSummary, stem: str, shape) -> np.ndarray:
    from .model import MaskSet

    masks = MaskSet.for_config(summary.config)
    if stem.startswith("encoder"):
        m = masks.encoder_source
    elif "_cross" in stem:
        m = masks.decoder_memory
    else:
        m = masks.decoder_target
    assert m.shape == tuple(shape)
    return m == 0


def render_heatmap(summary: AttentionSummary, directory) -> list[Path]:
    """One standalone SVG per matrix, every cell a vector rectangle.

    Masked cells are grey with a hatch.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib import cm, colors

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for stem, (matrix, rows, cols) in summary.matrices().items():
        allowed = _allowed(summary, stem, matrix.shape)
        rgba = cell_colors(matrix, allowed)
        n_rows, n_cols = matrix.shape
        fig, ax = plt.subplots(figsize=(max(3.0, 0.45 * n_cols + 1.8), max(2.5, 0.45 * n_rows + 1.2)))
        for i in range(n_rows):
            for j in range(n_cols):
                masked = not allowed[i, j]
                ax.add_patch(plt.Rectangle(
                    (j - 0.5, i - 0.5), 1, 1, facecolor=rgba[i, j], edgecolor="#7f7f7f" if masked else "none",
                    hatch="//" if masked else None, linewidth=0,
                ))
        ax.set_xlim(-0.5, n_cols - 0.5)
        ax.set_ylim(n_rows - 0.5, -0.5)
        ax.set_aspect("equal")
        ax.set_xticks(range(n_cols), [str(d) for d in cols])
        ax.set_yticks(range(n_rows), [str(d) for d in rows])
        ax.set_xlabel("attended day")
        ax.set_ylabel("query day")
        ax.set_title(stem.replace("_", " "))
        vmax = float(matrix[allowed].max()) if allowed.any() else 1.0
        cbar = fig.colorbar(cm.ScalarMappable(colors.Normalize(0.0, vmax or 1.0), CMAP), ax=ax, shrink=0.8)
        cbar.solids.set_rasterized(False)  # keep the file pure vector
        fig.tight_layout()
        path = directory / f"{stem}.svg"
        with matplotlib.rc_context({"svg.hashsalt": "tsformer", "svg.fonttype": "path"}):
            fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written
