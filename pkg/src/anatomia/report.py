"""Static report generation from a results tree: comparison tables, sweep
plots, and prediction/uncertainty overlays. Every figure is emitted as an
image + CSV pair, with the CSV holding exactly the plotted values (no
re-computation). Regeneration is deterministic.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .core import load_volume
from .errors import DataError

_FIGSIZE = (5.0, 3.4)
_DPI = 120


def _load_results(results_dir: Path) -> dict:
    path = results_dir / "results.json"
    if not path.is_file():
        raise DataError(f"no results.json under {results_dir}")
    return json.loads(path.read_text())


def _write_pair_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _save_fig(fig, path: Path) -> None:
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def _comparison_table(summary: list[dict], out_dir: Path) -> list[str]:
    rows = [
        {
            "variant": s["variant"],
            "strategy": s["strategy"],
            "dsc_mean": s.get("dsc_mean"),
            "dsc_std": s.get("dsc_std"),
            "hd95_mean": s.get("hd95_mean"),
            "hd95_std": s.get("hd95_std"),
            "wall_ms_mean": s.get("wall_ms_mean"),
        }
        for s in summary
    ]
    csv_path = out_dir / "comparison_table.csv"
    _write_pair_csv(
        csv_path,
        ["variant", "strategy", "dsc_mean", "dsc_std", "hd95_mean", "hd95_std", "wall_ms_mean"],
        rows,
    )
    fig, ax = plt.subplots(figsize=(6.4, 0.5 + 0.4 * len(rows)))
    ax.axis("off")
    cells = []
    for r in rows:
        dsc = (
            f"{r['dsc_mean'] * 100:.2f} ± {r['dsc_std'] * 100:.2f}"
            if r["dsc_mean"] is not None
            else "failed"
        )
        hd = (
            f"{r['hd95_mean']:.2f} ± {r['hd95_std']:.2f}"
            if r["hd95_mean"] is not None
            else "-"
        )
        wall = f"{r['wall_ms_mean']:.1f}" if r["wall_ms_mean"] is not None else "-"
        cells.append([r["variant"], dsc, hd, wall])
    table = ax.table(
        cellText=cells,
        colLabels=["variant", "DSC (%)", "HD95 (mm)", "ms/iter"],
        loc="center",
    )
    table.scale(1.0, 1.3)
    png_path = out_dir / "comparison_table.png"
    _save_fig(fig, png_path)
    return [str(csv_path), str(png_path)]


def _sweep_groups(cells: list[dict]) -> dict[str, list[dict]]:
    groups: dict[str, list[dict]] = {}
    for cell in cells:
        plot = cell.get("plot") or {}
        group = plot.get("group")
        if group:
            groups.setdefault(group, []).append(cell)
    return groups


def _sweep_plot(group: str, cells: list[dict], out_dir: Path) -> list[str]:
    by_x: dict[float | str, list[dict]] = {}
    kind = "line"
    for cell in cells:
        plot = cell.get("plot") or {}
        kind = plot.get("kind", kind)
        by_x.setdefault(plot.get("x"), []).append(cell)

    rows = []
    for x, group_cells in sorted(by_x.items(), key=lambda kv: str(kv[0])):
        ok = [c for c in group_cells if c.get("status") == "ok"]
        dscs = [c["metrics"]["mean_dsc"] for c in ok]
        hds = [c["metrics"]["mean_hd95"] for c in ok if c["metrics"]["mean_hd95"] is not None]
        rows.append(
            {
                "x": x,
                "dsc_mean": float(np.mean(dscs)) if dscs else None,
                "dsc_std": float(np.std(dscs, ddof=1)) if len(dscs) > 1 else 0.0,
                "hd95_mean": float(np.mean(hds)) if hds else None,
                "hd95_std": float(np.std(hds, ddof=1)) if len(hds) > 1 else 0.0,
                "n": len(ok),
            }
        )
    csv_path = out_dir / f"sweep_{group}.csv"
    _write_pair_csv(csv_path, ["x", "dsc_mean", "dsc_std", "hd95_mean", "hd95_std", "n"], rows)

    outputs = [str(csv_path)]
    for metric, label in (("dsc", "DSC"), ("hd95", "HD95 (mm)")):
        plotted = [r for r in rows if r[f"{metric}_mean"] is not None]
        if not plotted:
            continue
        fig, ax = plt.subplots(figsize=_FIGSIZE)
        xs = [str(r["x"]) for r in plotted]
        means = [r[f"{metric}_mean"] for r in plotted]
        stds = [r[f"{metric}_std"] for r in plotted]
        if kind == "bar":
            ax.bar(xs, means, yerr=stds, capsize=3, color="#4878d0")
        else:
            try:
                xnum = [float(r["x"]) for r in plotted]
                ax.errorbar(xnum, means, yerr=stds, marker="o", capsize=3)
            except (TypeError, ValueError):
                ax.errorbar(range(len(xs)), means, yerr=stds, marker="o", capsize=3)
                ax.set_xticks(range(len(xs)), xs)
        ax.set_xlabel(group)
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        png_path = out_dir / f"sweep_{group}_{metric}.png"
        _save_fig(fig, png_path)
        outputs.append(str(png_path))
    return outputs


def _overlays(infer_dir: Path, out_dir: Path, max_cases: int = 4) -> list[str]:
    outputs = []
    case_dirs = sorted(p for p in infer_dir.iterdir() if (p / "meta.json").is_file())
    for case_dir in case_dirs[:max_cases]:
        volume, pred = load_volume(case_dir)
        u_path = case_dir / "uncertainty.npy"
        panels = 2 + int(u_path.is_file())
        fig, axes = plt.subplots(1, panels, figsize=(3.0 * panels, 3.0))
        axes[0].imshow(volume.data, cmap="gray")
        axes[0].set_title("image")
        axes[1].imshow(volume.data, cmap="gray")
        if pred is not None:
            axes[1].contour(pred.data, levels=np.arange(0.5, pred.num_classes), colors="r")
        axes[1].set_title("prediction")
        if u_path.is_file():
            axes[2].imshow(volume.data, cmap="gray")
            heat = axes[2].imshow(np.load(u_path), cmap="inferno", alpha=0.6)
            fig.colorbar(heat, ax=axes[2], fraction=0.046)
            axes[2].set_title("uncertainty")
        for ax in axes:
            ax.axis("off")
        fig.tight_layout()
        png_path = out_dir / f"overlay_{case_dir.name}.png"
        _save_fig(fig, png_path)
        outputs.append(str(png_path))
    return outputs


def generate_report(
    results_dir: str | Path,
    out_dir: str | Path,
    infer_dir: str | Path | None = None,
) -> dict:
    """Emit the comparison table, per-group sweep plots, and any overlays."""
    results_dir = Path(results_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = _load_results(results_dir)
    cells = results.get("cells", [])
    summary = results.get("summary", [])
    if not any(c.get("status") == "ok" for c in cells):
        raise DataError("results tree holds no completed runs")

    outputs: dict[str, list[str]] = {"tables": [], "figures": []}
    outputs["tables"] = _comparison_table(summary, out_dir)
    for group, group_cells in sorted(_sweep_groups(cells).items()):
        outputs["figures"].extend(_sweep_plot(group, group_cells, out_dir))
    if infer_dir is not None and Path(infer_dir).is_dir():
        outputs["figures"].extend(_overlays(Path(infer_dir), out_dir))
    (out_dir / "report.json").write_text(json.dumps(outputs, indent=2))
    return outputs
