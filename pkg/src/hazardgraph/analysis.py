"""Score-distribution statistics and negative controls.

Compares metrics on matched prompt-image pairs against deliberately
mismatched ones, and measures how informative each metric's score
distribution is via histogram Shannon entropy.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import EmptyInput, PoolEmpty, TooFewPairs, ValueOutOfRange

METRICS = ("clip_style", "blip_style", "vqa_graph")
CONDITIONS = ("matched", "shuffled_out_of_domain", "shuffled_in_domain")
METRIC_TITLES = {"clip_style": "CLIP Score", "blip_style": "BLIP Score", "vqa_graph": "VQA Graph Score"}
SHUFFLE_SOURCES = {
    "shuffled_out_of_domain": "out_of_domain",
    "shuffled_in_domain": "in_domain",
}
DEFAULT_BINS = 32
METRIC_RANGES = {"clip_style": (-1.0, 1.0), "blip_style": (0.0, 1.0), "vqa_graph": (0.0, 1.0)}


@dataclass(frozen=True)
class ScoredPair:
    prompt_ref: str
    image_ref: str
    metric: str
    value: float
    condition: str = "matched"
    model_tag: str = ""

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")
        if not math.isfinite(self.value):
            raise ValueError("score must be finite")
        if self.metric != "clip_style" and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"{self.metric} score {self.value} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def group(self) -> str:
        """Model tag for matched pairs, shuffle source otherwise."""
        if self.condition == "matched":
            return self.model_tag
        return SHUFFLE_SOURCES[self.condition]


@dataclass(frozen=True)
class Binning:
    bins: int = DEFAULT_BINS
    ranges: Mapping[str, tuple[float, float]] = field(default_factory=lambda: dict(METRIC_RANGES))

    def range_for(self, metric: str) -> tuple[float, float]:
        return tuple(self.ranges.get(metric, METRIC_RANGES[metric]))


@dataclass(frozen=True)
class EntropyReport:
    metric: str
    group: str
    condition: str
    bin_count: int
    bin_width: float
    lo: float
    hi: float
    n: int
    entropy_bits: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ComparisonRow:
    model_tag: str
    stats: dict  # metric -> (mean, std, n)

    def formatted(self, metric: str, digits: int = 2) -> str:
        if metric not in self.stats:
            return "-"
        mean, std, _ = self.stats[metric]
        return f"{mean:.{digits}f} ± {std:.{digits}f}"

    def to_dict(self) -> dict:
        return {
            "model": self.model_tag,
            **{
                METRIC_TITLES[m]: {"mean": s[0], "std": s[1], "n": s[2], "formatted": self.formatted(m)}
                for m, s in self.stats.items()
            },
        }


# ---------------------------------------------------------------------------
# entropy
# ---------------------------------------------------------------------------


def histogram(values, lo: float, hi: float, bins: int) -> np.ndarray:
    """Counts over ``bins`` equal-width bins on [lo, hi]; ``hi`` goes in the last bin."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    if not hi > lo:
        raise ValueError("hi must exceed lo")
    x = np.asarray(list(values), dtype=np.float64)
    if x.size == 0:
        raise EmptyInput("no values")
    if np.any(~np.isfinite(x)) or np.any(x < lo) or np.any(x > hi):
        bad = x[(~np.isfinite(x)) | (x < lo) | (x > hi)][0]
        raise ValueOutOfRange(f"value {bad} outside [{lo}, {hi}]")
    idx = np.floor((x - lo) / (hi - lo) * bins).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    return np.bincount(idx, minlength=bins)


def entropy_from_counts(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    p = counts[counts > 0] / total
    return float(max(0.0, -math.fsum(p * np.log2(p))))


def shannon_entropy(values, lo: float, hi: float, bins: int) -> float:
    """Entropy in bits of the equal-width histogram of ``values``."""
    return entropy_from_counts(histogram(values, lo, hi, bins))


# ---------------------------------------------------------------------------
# negative controls
# ---------------------------------------------------------------------------


def random_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform permutation of range(n) with no fixed points (rejection sampling)."""
    if n < 2:
        raise TooFewPairs("a derangement needs at least 2 items")
    ident = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == ident):
            return perm


def negative_control_shuffle(
    pairs: Sequence[tuple],
    mode: str,
    seed: int,
    pool: Optional[Sequence] = None,
) -> list[tuple]:
    """Deliberately mismatch prompts and images.

    ``in_domain`` reassigns the pair images by a seeded derangement, so no
    prompt keeps its own image. ``out_of_domain`` gives each prompt a
    seeded uniform draw from an external image ``pool``.
    """
    pairs = list(pairs)
    rng = np.random.default_rng(seed)
    if mode == "in_domain":
        if len(pairs) < 2:
            raise TooFewPairs("in-domain shuffle needs at least 2 pairs")
        perm = random_derangement(len(pairs), rng)
        return [(pairs[i][0], pairs[int(j)][1]) for i, j in enumerate(perm)]
    if mode == "out_of_domain":
        if not pool:
            raise PoolEmpty("out-of-domain shuffle needs a non-empty image pool")
        pool = list(pool)
        draws = rng.integers(0, len(pool), size=len(pairs))
        return [(p[0], pool[int(k)]) for p, k in zip(pairs, draws)]
    raise ValueError(f"unknown shuffle mode {mode!r}")


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


def summarize_scores(pairs: Iterable[ScoredPair]) -> list[ComparisonRow]:
    """Mean and sample standard deviation per (model, metric).

    Rows keep the order in which model tags first appear.
    """
    pairs = list(pairs)
    if not pairs:
        raise EmptyInput("no scored pairs")
    grouped: "OrderedDict[str, OrderedDict[str, list[float]]]" = OrderedDict()
    for p in pairs:
        grouped.setdefault(p.model_tag, OrderedDict()).setdefault(p.metric, []).append(p.value)
    rows = []
    for tag, by_metric in grouped.items():
        stats = {}
        for metric in METRICS:
            if metric in by_metric:
                x = np.asarray(by_metric[metric])
                std = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
                stats[metric] = (float(np.mean(x)), std, int(x.size))
        rows.append(ComparisonRow(tag, stats))
    return rows


def format_comparison_table(rows: Sequence[ComparisonRow], digits: int = 2) -> str:
    metrics = [m for m in METRICS if any(m in r.stats for r in rows)]
    header = ["Model"] + [METRIC_TITLES[m] for m in metrics]
    body = [[r.model_tag] + [r.formatted(m, digits) for m in metrics] for r in rows]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header] + body]
    return "\n".join(lines) + "\n"


def _groups(pairs: Iterable[ScoredPair]):
    grouped: "OrderedDict[tuple, list[float]]" = OrderedDict()
    for p in pairs:
        grouped.setdefault((p.metric, p.condition, p.group), []).append(p.value)
    return grouped


def entropy_table(pairs: Iterable[ScoredPair], binning: Binning = Binning()) -> list[EntropyReport]:
    """One report per (metric, model tag or shuffle source)."""
    out = []
    for (metric, condition, group), values in _groups(pairs).items():
        lo, hi = binning.range_for(metric)
        H = shannon_entropy(values, lo, hi, binning.bins)
        out.append(EntropyReport(metric, group, condition, binning.bins,
                                 (hi - lo) / binning.bins, lo, hi, len(values), H))
    return out


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", text).strip("-") or "group"


def histogram_csv(values, lo: float, hi: float, bins: int) -> str:
    counts = histogram(values, lo, hi, bins)
    total = counts.sum()
    width = (hi - lo) / bins
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin", "lo", "hi", "count", "probability"])
    for i, c in enumerate(counts):
        w.writerow([i, f"{lo + i * width:.6f}", f"{lo + (i + 1) * width:.6f}", int(c),
                    f"{c / total:.6f}"])
    return buf.getvalue()


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def distributions_svg(pairs: Sequence[ScoredPair], binning: Binning = Binning()) -> str:
    """Small multiples: rows are conditions, columns metrics, one step line per group."""
    grouped = _groups(pairs)
    conditions = [c for c in CONDITIONS if any(k[1] == c for k in grouped)]
    metrics = [m for m in METRICS if any(k[0] == m for k in grouped)]
    groups = list(OrderedDict.fromkeys(k[2] for k in grouped))
    color = {g: _PALETTE[i % len(_PALETTE)] for i, g in enumerate(groups)}
    pw, ph, pad, top = 220, 140, 40, 30
    width = pad + len(metrics) * (pw + pad)
    height = top + len(conditions) * (ph + pad) + 20 * (1 + len(groups))
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for r, cond in enumerate(conditions):
        for c, metric in enumerate(metrics):
            x0 = pad + c * (pw + pad)
            y0 = top + r * (ph + pad)
            out.append(f'<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>')
            out.append(f'<text x="{x0}" y="{y0 - 6}">{METRIC_TITLES[metric]} / {cond}</text>')
            lo, hi = binning.range_for(metric)
            out.append(f'<text x="{x0}" y="{y0 + ph + 12}">{lo:g}</text>')
            out.append(f'<text x="{x0 + pw - 10}" y="{y0 + ph + 12}">{hi:g}</text>')
            for g in groups:
                values = grouped.get((metric, cond, g))
                if not values:
                    continue
                counts = histogram(values, lo, hi, binning.bins)
                p = counts / counts.sum()
                peak = max(float(p.max()), 1e-12)
                bw = pw / binning.bins
                pts = []
                for i, pi in enumerate(p):
                    y = y0 + ph - (pi / peak) * (ph - 4)
                    pts.append(f"{x0 + i * bw:.2f},{y:.2f}")
                    pts.append(f"{x0 + (i + 1) * bw:.2f},{y:.2f}")
                out.append(f'<polyline fill="none" stroke="{color[g]}" stroke-width="1.5" '
                           f'points="{" ".join(pts)}"/>')
    ly = top + len(conditions) * (ph + pad)
    for i, g in enumerate(groups):
        out.append(f'<rect x="{pad}" y="{ly + 20 * i}" width="12" height="12" fill="{color[g]}"/>')
        out.append(f'<text x="{pad + 18}" y="{ly + 20 * i + 10}">{g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_distributions(
    pairs: Sequence[ScoredPair],
    out_dir,
    binning: Binning = Binning(),
) -> dict[str, Path]:
    """Write ``<out_dir>/<metric>__<condition>__<group>.csv`` and ``overview.svg``."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyInput("no scored pairs to export")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for (metric, cond, group), values in _groups(pairs).items():
        lo, hi = binning.range_for(metric)
        name = f"{metric}__{cond}__{_slug(group)}.csv"
        path = out_dir / name
        path.write_text(histogram_csv(values, lo, hi, binning.bins), encoding="utf-8")
        written[name] = path
    svg = out_dir / "overview.svg"
    svg.write_text(distributions_svg(pairs, binning), encoding="utf-8")
    written["overview.svg"] = svg
    return written


def scored_pairs_to_jsonl(pairs: Iterable[ScoredPair]) -> str:
    return "".join(json.dumps(p.to_dict(), sort_keys=True) + "\n" for p in pairs)


def scored_pairs_from_jsonl(text: str) -> list[ScoredPair]:
    return [ScoredPair(**json.loads(line)) for line in text.splitlines() if line.strip()]
