"""Renders harness CSVs into sweep, segment and ablation charts."""

import argparse
import sys
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

SCHEMAS = {
    "sweep_line": ["axis", "value", "method", "seed", "avg_error"],
    "segment_curve": ["method", "seed", "segment", "kind", "severity", "examples", "error_pct"],
    "ablation_bar": ["method", "seed", "avg_error", "config_hash", "stream_hash"],
}

METHOD_ORDER = ["source", "bn", "pl", "tent", "rotta", "rotta_no_rbn", "rotta_no_cstu", "rotta_no_rt"]

COLORS = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"]


class SchemaError(ValueError):
    pass


@dataclass
class Series:
    method: str
    x: list
    mean: list
    std: list


def load(paths, kind):
    if kind not in SCHEMAS:
        raise ValueError(f"unknown chart kind '{kind}' (expected one of {', '.join(SCHEMAS)})")
    required = SCHEMAS[kind]
    frames = []
    for path in paths:
        try:
            frame = pd.read_csv(path, dtype={"value": str, "method": str, "axis": str})
        except pd.errors.EmptyDataError:
            raise SchemaError(f"{path}: empty CSV; required columns: {', '.join(required)}") from None
        missing = [c for c in required if c not in frame.columns]
        if missing:
            raise SchemaError(f"{path}: missing columns: {', '.join(missing)}")
        frames.append(frame[required])
    return pd.concat(frames, ignore_index=True)


def method_key(method):
    return (METHOD_ORDER.index(method), "") if method in METHOD_ORDER else (len(METHOD_ORDER), method)


def series(frame, kind):
    """Per-method mean and sample stddev over seeds, methods in canonical order."""
    if kind == "sweep_line":
        x_col, y_col = "value", "avg_error"
    elif kind == "segment_curve":
        x_col, y_col = "segment", "error_pct"
    else:
        x_col, y_col = None, "avg_error"

    out = []
    for method in sorted(frame["method"].unique(), key=method_key):
        rows = frame[frame["method"] == method]
        if x_col is None:
            values = rows[y_col].astype(float)
            out.append(Series(method, [method], [float(values.mean())], [_std(values)]))
            continue
        xs = list(dict.fromkeys(rows[x_col].tolist()))
        if kind == "segment_curve":
            xs.sort()
        means, stds = [], []
        for x in xs:
            values = rows[rows[x_col] == x][y_col].astype(float)
            means.append(float(values.mean()))
            stds.append(_std(values))
        out.append(Series(method, xs, means, stds))
    if not out:
        raise SchemaError("CSV has no data rows")
    if kind != "ablation_bar" and any(len(s.x) < 2 for s in out):
        raise SchemaError("line charts need at least two x values per method")
    return out


def _std(values):
    return float(values.std(ddof=1)) if len(values) > 1 else 0.0


def draw(data, kind, xlabel=""):
    fig, ax = plt.subplots(figsize=(6, 4))
    if kind == "ablation_bar":
        for i, s in enumerate(data):
            ax.bar(i, s.mean[0], yerr=s.std[0], color=COLORS[i % len(COLORS)], label=s.method, capsize=3)
        ax.set_xticks(range(len(data)), [s.method for s in data], rotation=20)
    else:
        for i, s in enumerate(data):
            ax.errorbar(range(len(s.x)), s.mean, yerr=s.std, color=COLORS[i % len(COLORS)], marker="o",
                        capsize=3, label=s.method)
        ax.set_xticks(range(len(data[0].x)), [str(x) for x in data[0].x])
        ax.set_xlabel(xlabel)
    ax.set_ylabel("error (%)")
    ax.legend()
    fig.tight_layout()
    return fig


def render(paths, kind, out_path):
    """Writes the chart and returns the plotted series."""
    frame = load(paths, kind)
    data = series(frame, kind)
    xlabel = str(frame["axis"].iloc[0]) if kind == "sweep_line" else "segment"
    fig = draw(data, kind, xlabel)
    fig.savefig(out_path)
    plt.close(fig)
    return data


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("csv", nargs="+")
    parser.add_argument("--kind", required=True, choices=sorted(SCHEMAS))
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)
    try:
        render(args.csv, args.kind, args.out)
    except (SchemaError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
