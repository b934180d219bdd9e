"""Plot-ready data files: two-column series, a manifest, a gnuplot script and PNG previews."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Series:
    name: str
    x: Sequence[float]
    y: Sequence[float]
    xlabel: str = "x"
    ylabel: str = "y"
    logscale: bool = False

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"series {self.name!r}: x and y lengths differ")
        if not self.name or "/" in self.name:
            raise ValueError(f"bad series name {self.name!r}")


def _gnuplot(series: list[Series]) -> str:
    lines = ["# generated: one panel per series", "set terminal pngcairo size 640,480", ""]
    for s in series:
        lines += [
            f"set output '{s.name}_gnuplot.png'",
            f"set xlabel '{s.xlabel}'",
            f"set ylabel '{s.ylabel}'",
            "set logscale xy" if s.logscale else "unset logscale",
            f"plot '{s.name}.dat' using 1:2 with linespoints title '{s.name}'",
            "",
        ]
    return "\n".join(lines)


def _render(s: Series, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.plot(s.x, s.y, "o-", lw=1.2, ms=4)
    if s.logscale:
        ax.set_xscale("log")
        ax.set_yscale("log")
    ax.set_xlabel(s.xlabel)
    ax.set_ylabel(s.ylabel)
    ax.set_title(s.name)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def emit_convergence_data(series: Sequence[Series], out_dir, render_png: bool = False) -> list[Path]:
    """Write ``<name>.dat`` per series (sorted by name), ``plots_manifest.json`` and ``plots.gp``.

    PNG previews (needs matplotlib) are written next to the data when ``render_png`` is set.
    """
    if not series:
        raise ValueError("need at least one series")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ordered = sorted(series, key=lambda s: s.name)
    if len({s.name for s in ordered}) != len(ordered):
        raise ValueError("series names must be unique")
    files, manifest = [], []
    for s in ordered:
        path = out / f"{s.name}.dat"
        rows = [f"{float(a):.12e} {float(b):.12e}" for a, b in zip(s.x, s.y)]
        path.write_text(f"# {s.xlabel} {s.ylabel}\n" + "\n".join(rows) + "\n")
        files.append(path)
        manifest.append({"name": s.name, "file": path.name, "rows": len(rows), "xlabel": s.xlabel, "ylabel": s.ylabel})
    gp = out / "plots.gp"
    gp.write_text(_gnuplot(ordered))
    man = out / "plots_manifest.json"
    man.write_text(json.dumps(manifest, indent=2))
    files += [gp, man]
    if render_png:
        files += [_render(s, out / f"{s.name}.png") for s in ordered]
    return files


def fitted_order(h: Sequence[float], err: Sequence[float]) -> float:
    """Least-squares slope of ``log err`` against ``log h``."""
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])
