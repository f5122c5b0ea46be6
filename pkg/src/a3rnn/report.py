"""Static report artifacts: attention-development grids, per-head similarity
curves and the ablation results table."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from matplotlib.patches import Circle  # noqa: E402

from .config import TABLE_HEADERS, TABLE_ORDER  # noqa: E402
from .reconstruction import peripheral_mask  # noqa: E402
from .train import AblationResult, load_checkpoint, read_metrics, rollout  # noqa: E402

DEFAULT_TIMESTEPS = (0, 30, 60, 90)
# no timestamps or version strings so reruns produce identical files
PNG_METADATA = {"Software": None}
HEAD_COLORS = ("tab:red", "tab:green", "tab:blue", "tab:orange", "tab:purple", "tab:cyan")


class ReportError(ValueError):
    pass


@dataclass
class GridCell:
    label: str
    timestep: int
    missing: str | None = None
    td_px: np.ndarray | None = None  # circle centers drawn on the frame, pixels
    bu_map: np.ndarray | None = None


@dataclass
class AttentionGrid:
    path: Path
    shape: tuple[int, int]  # (checkpoints, timesteps)
    cells: list[list[GridCell]] = field(default_factory=list)


def _checkpoint_traces(path, episode):
    model, epoch = load_checkpoint(path)
    r = rollout(model, mode="open_loop", episode=episode)
    grid = tuple(r.m_bu.shape[-2:])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        maps = peripheral_mask(torch.from_numpy(r.pt_bu_hat).double(), grid,
                               model.cfg.sharpness).numpy()
    return epoch, r.pt_td, maps


def render_attention_grid(checkpoints, episode, out_path, timesteps=DEFAULT_TIMESTEPS,
                          labels=None) -> AttentionGrid:
    """One column per checkpoint, one row per timestep. Each cell shows the
    input frame with TD points as circles next to the summed BU heatmap of
    the predicted BU points. Unreadable checkpoints get an annotated cell."""
    T = episode.frames.shape[0]
    bad = [t for t in timesteps if not 0 <= t < T]
    if bad:
        raise ReportError(f"timesteps {bad} outside [0, {T})")
    checkpoints = [Path(c) if c is not None else None for c in checkpoints]
    labels = labels or [c.stem if c is not None else "missing" for c in checkpoints]
    size = episode.frames.shape[-1]
    n_rows, n_cols = len(timesteps), len(checkpoints)
    fig, axes = plt.subplots(n_rows, 2 * n_cols, figsize=(2.4 * n_cols, 1.25 * n_rows), squeeze=False)
    grid = AttentionGrid(Path(out_path), (n_cols, n_rows))
    for col, (ckpt, label) in enumerate(zip(checkpoints, labels)):
        try:
            if ckpt is None or not ckpt.exists():
                raise FileNotFoundError(f"{ckpt} not found")
            epoch, pt_td, maps = _checkpoint_traces(ckpt, episode)
            label = f"epoch {epoch}"
            err = None
        except Exception as exc:  # annotate and keep going
            err = f"{type(exc).__name__}: {exc}"
        column = []
        for row, t in enumerate(timesteps):
            ax_img, ax_map = axes[row, 2 * col], axes[row, 2 * col + 1]
            for ax in (ax_img, ax_map):
                ax.set_xticks([])
                ax.set_yticks([])
            if row == 0:
                ax_img.set_title(label, fontsize=7, loc="left")
            if col == 0:
                ax_img.set_ylabel(f"t={t}", fontsize=7)
            cell = GridCell(label, t, missing=err)
            if err is None:
                ax_img.imshow(episode.frames[t].transpose(1, 2, 0), extent=(0, size, size, 0))
                cell.td_px = pt_td[t] * size
                for k, (x, y) in enumerate(cell.td_px):
                    ax_img.add_patch(Circle((x, y), 2.5, fill=False, lw=1.0,
                                            color=HEAD_COLORS[k % len(HEAD_COLORS)]))
                cell.bu_map = maps[t]
                ax_map.imshow(maps[t], cmap="gray", vmin=0.0, vmax=1.0)
            else:
                ax_img.text(0.5, 0.5, "missing", ha="center", va="center", fontsize=7,
                            transform=ax_img.transAxes)
                ax_map.axis("off")
            column.append(cell)
        grid.cells.append(column)
    fig.tight_layout(pad=0.3)
    grid.path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(grid.path, dpi=120, metadata=PNG_METADATA)
    plt.close(fig)
    return grid


def similarity_rows(records) -> list[list]:
    rows = [[r["epoch"], *r["similarity"]] for r in records if not r.get("diverged")]
    if not rows:
        raise ReportError("no similarity records to plot")
    return rows


def plot_similarity_curves(metrics_path, out_dir, stem: str = "similarity") -> tuple[Path, Path]:
    """Per-head similarity over epochs as a PNG plus the raw values as CSV."""
    rows = similarity_rows(read_metrics(metrics_path))
    n_heads = len(rows[0]) - 1
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch"] + [f"head_{k + 1}" for k in range(n_heads)])
        for row in rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    data = np.array(rows, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    for k in range(n_heads):
        ax.plot(data[:, 0], data[:, k + 1], label=f"Attention {k + 1}",
                color=HEAD_COLORS[k % len(HEAD_COLORS)], lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("similarity to BU queries")
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    png_path = out / f"{stem}.png"
    fig.savefig(png_path, dpi=120, metadata=PNG_METADATA)
    plt.close(fig)
    return png_path, csv_path


def _pct(ok: int, total: int) -> str:
    return f"{100.0 * ok / total:.1f}" if total else "--"


def emit_results_table(result: AblationResult, variants=TABLE_ORDER) -> tuple[str, str, bool]:
    """Render (text, csv, complete). Missing cells print as ``--``; the
    table is complete when every listed variant has every seed scored."""
    metrics = (("Attention success [%]", "attention_success"), ("Pick success [%]", "pick_success"))
    header = ["Metric"] + [TABLE_HEADERS.get(v, v) for v in variants]
    rows = []
    for title, key in metrics:
        rows.append([title] + [_pct(*result.rate(v, key)) for v in variants])
    trials = ["Trials"] + [str(result.rate(v)[1]) for v in variants]

    complete = True
    notes = []
    for v in variants:
        seeds = result.seeds.get(v, [])
        done = [s for s in seeds if str(s) in result.cells.get(v, {})]
        if not seeds or len(done) < len(seeds) or result.errors.get(v):
            complete = False
        notes.append(f"{TABLE_HEADERS.get(v, v)}: seeds {done or '-'}"
                     + (f", failed {sorted(result.errors[v])}" if result.errors.get(v) else ""))

    widths = [max(len(r[i]) for r in [header, *rows, trials]) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths))  # noqa: E731
    lines = [fmt(header), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in rows + [trials]]
    lines += ["", *notes]
    if not complete:
        lines.append("incomplete: some cells are missing")
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows + [trials])
    return text, buf.getvalue(), complete


def write_results_table(result: AblationResult, out_dir) -> tuple[Path, Path, bool]:
    text, table_csv, complete = emit_results_table(result)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results_table.txt").write_text(text)
    (out / "results_table.csv").write_text(table_csv)
    return out / "results_table.txt", out / "results_table.csv", complete
