"""Summary tables and learning-curve files rendered from a benchmark bundle.

Rendering is a pure function of ``manifest.json`` and ``arms/*.json``, so
re-running it on the same bundle reproduces every output byte for byte.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .bench import HEADLINE, aggregate
from .errors import DataError

METHOD_ORDER = ("bc", "fbc", "dt", "fdt")
LABELS = {"bc": "BC", "fbc": "FBC", "dt": "DT", "fdt": "FDT"}


def load_bundle(bundle):
    bundle = Path(bundle)
    try:
        manifest = json.loads((bundle / "manifest.json").read_text())
        arms = [json.loads(p.read_text()) for p in sorted((bundle / "arms").glob("*.json"))]
    except FileNotFoundError as e:
        raise DataError(f"{bundle} is not a benchmark bundle: missing {Path(e.filename).name}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt bundle file in {bundle}: {e}") from None
    for key in ("datasets", "methods", "seeds"):
        if key not in manifest:
            raise DataError(f"corrupt manifest in {bundle}: no {key!r} entry")
    return manifest, arms


def build_tables(manifest, cells, arms):
    """One table per reward regime: datasets as rows, methods as columns."""
    methods = [m for m in METHOD_ORDER if m in manifest["methods"]]
    failed = {}
    for a in arms:
        if a["status"] != "ok":
            failed.setdefault((a["dataset"], a["method"]), []).append(a["seed"])
    tables = []
    for regime in ("sparsified", "sparse"):
        names = [n for n, d in manifest["datasets"].items() if d["regime"] == regime]
        if not names:
            continue
        rows = []
        for name in names:
            row = {"dataset": name, "cells": {}}
            for m in methods:
                cell = cells.get(f"{name}/{m}")
                entry = {"failed_seeds": sorted(failed.get((name, m), []))}
                if cell and "headline" in cell:
                    entry.update(mean=cell["headline"]["mean"], std=cell["headline"]["std"],
                                 single_seed=cell["single_seed"], n_seeds=len(cell["seeds"]))
                row["cells"][m] = entry
            rows.append(row)
        if len(names) > 1:
            avg = {"dataset": "average", "cells": {}}
            for m in methods:
                vals = [r["cells"][m] for r in rows]
                if all("mean" in v for v in vals):
                    avg["cells"][m] = {"mean": sum(v["mean"] for v in vals) / len(vals),
                                       "std": sum(v["std"] for v in vals) / len(vals),
                                       "single_seed": any(v["single_seed"] for v in vals),
                                       "failed_seeds": []}
                else:
                    avg["cells"][m] = {"failed_seeds": []}
            rows.append(avg)
        for row in rows:
            shown = {m: round(c["mean"], 2) for m, c in row["cells"].items() if "mean" in c}
            top = max(shown.values(), default=None)
            for m, c in row["cells"].items():
                c["bold"] = top is not None and shown.get(m) == top
        tables.append({"regime": regime, "metric": HEADLINE[regime], "methods": methods, "rows": rows})
    return tables


def _cell_text(c):
    if "mean" not in c:
        return "failed"
    text = f"{c['mean']:.2f} ± {c['std']:.2f}"
    if c.get("bold"):
        text = f"**{text}**"
    if c.get("single_seed"):
        text += " (1 seed)"
    if c.get("failed_seeds"):
        text += f" ({len(c['failed_seeds'])} failed)"
    return text


def tables_text(tables) -> str:
    out = []
    for t in tables:
        title = ("normalized score, final evaluation" if t["regime"] == "sparsified"
                 else "success rate, best evaluation")
        out.append(f"{t['regime']} datasets ({title}; mean ± std over seeds; ** marks the best)")
        header = ["dataset"] + [LABELS[m] for m in t["methods"]]
        body = [[r["dataset"]] + [_cell_text(r["cells"][m]) for m in t["methods"]]
                for r in t["rows"]]
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        for row in [header] + body:
            out.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
        out.append("")
    return "\n".join(out)


def tables_csv(tables) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["regime", "metric", "dataset", "method", "mean", "std", "bold", "single_seed", "failed_seeds"])
    for t in tables:
        for r in t["rows"]:
            for m in t["methods"]:
                c = r["cells"][m]
                w.writerow([t["regime"], t["metric"], r["dataset"], m,
                            repr(c["mean"]) if "mean" in c else "", repr(c["std"]) if "mean" in c else "",
                            int(c.get("bold", False)), int(c.get("single_seed", False)),
                            " ".join(map(str, c.get("failed_seeds", [])))])
    return buf.getvalue()


def curve_csv(cell) -> str:
    lines = ["epoch,mean,std,best"]
    lines += [f"{p['epoch']},{p['mean']!r},{p['std']!r},{p['best']!r}" for p in cell["curve"]]
    return "\n".join(lines) + "\n"


def plot_curves(path, dataset, regime, cells):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "sparserl", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for m in METHOD_ORDER:
            cell = cells.get(f"{dataset}/{m}")
            if not cell or not cell["curve"]:
                continue
            x = [p["epoch"] for p in cell["curve"]]
            mean = [p["mean"] for p in cell["curve"]]
            std = [p["std"] for p in cell["curve"]]
            ax.plot(x, mean, marker="o", ms=3, label=LABELS[m])
            ax.fill_between(x, [a - b for a, b in zip(mean, std)], [a + b for a, b in zip(mean, std)], alpha=0.2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("success rate" if regime == "sparse" else "normalized score")
        ax.set_title(dataset)
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def write_report(bundle, out_dir=None, plots=True) -> dict:
    """Render tables, curve files and (optionally) plots; returns the summary payload."""
    bundle = Path(bundle)
    out_dir = Path(out_dir) if out_dir else bundle
    manifest, arms = load_bundle(bundle)
    regime_of = {n: d["regime"] for n, d in manifest["datasets"].items()}
    cells = aggregate(arms, regime_of)
    tables = build_tables(manifest, cells, arms)
    summary = {"name": manifest.get("name"), "tables": tables, "cells": cells,
               "failed_arms": [{"arm": a["arm"], "error": a["error"]} for a in arms if a["status"] != "ok"]}
    (out_dir / "curves").mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out_dir / "summary.csv").write_text(tables_csv(tables))
    (out_dir / "summary.txt").write_text(tables_text(tables))
    for cell in cells.values():
        (out_dir / "curves" / f"{cell['dataset']}__{cell['method']}.csv").write_text(curve_csv(cell))
    if plots:
        (out_dir / "plots").mkdir(exist_ok=True)
        for name in manifest["datasets"]:
            plot_curves(out_dir / "plots" / f"{name}.svg", name, regime_of[name], cells)
    return summary
