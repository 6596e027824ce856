"""Dice/F1 scoring, performance drops, and table/chart reporting.

Dice aggregates per case (all slices of a case pooled) and then averages
over cases; F1 pools pixels across the whole dataset. Both are reported in
percent. Drops are upper-bound minus adapted score, and the bidirectional
average is the mean of the forward and backward drops.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .data import DatasetBundle
from .errors import ConfigurationError, ReportError
from .train import Checkpoint, infer

FORWARD = "forward"
BACKWARD = "backward"
BOUND_SOURCE_DOMAIN = "M2M"   # supervised bound on domain 0
BOUND_TARGET_DOMAIN = "C2C"   # supervised bound on domain 1
DIRECTIONS = (FORWARD, BACKWARD, BOUND_SOURCE_DOMAIN, BOUND_TARGET_DOMAIN)

METRICS_HEADER = "method,direction,class,dice,f1"
DROPS_HEADER = "method,class,forward_drop,backward_drop,avg_drop,gap"


@dataclass
class MetricsRow:
    method: str
    direction: str
    class_name: str
    dice: Optional[float]
    f1: Optional[float]


def dice_score(
    pred_masks: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    case_ids: Sequence[int],
    class_index: int,
) -> Optional[float]:
    """Per-case Dice of one class, averaged over cases, in percent.

    Cases where the class is absent from both prediction and ground truth are
    skipped; returns None when every case is skipped.
    """
    per_case: dict[int, list[float]] = {}
    for pred, gt, cid in zip(pred_masks, gt_masks, case_ids, strict=True):
        stats = per_case.setdefault(cid, [0.0, 0.0, 0.0])
        p = pred == class_index
        g = gt == class_index
        stats[0] += float(np.logical_and(p, g).sum())
        stats[1] += float(p.sum())
        stats[2] += float(g.sum())
    values = []
    for cid in sorted(per_case):
        inter, p_area, g_area = per_case[cid]
        if p_area + g_area == 0:
            continue
        values.append(2.0 * inter / (p_area + g_area))
    if not values:
        return None
    return 100.0 * float(np.mean(values))


def f1_score(
    pred_masks: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    case_ids: Sequence[int],
    class_index: int,
) -> Optional[float]:
    """Dataset-pooled pixel F1 of one class, in percent."""
    tp = fp = fn = 0.0
    for pred, gt in zip(pred_masks, gt_masks, strict=True):
        p = pred == class_index
        g = gt == class_index
        tp += float(np.logical_and(p, g).sum())
        fp += float(np.logical_and(p, ~g).sum())
        fn += float(np.logical_and(~p, g).sum())
    if 2 * tp + fp + fn == 0:
        return None
    return 100.0 * 2.0 * tp / (2.0 * tp + fp + fn)


def perf_drop(uda_percent: float, upper_bound_percent: float) -> float:
    """Upper bound minus adapted score, in percent points (may be negative)."""
    return upper_bound_percent - uda_percent


def avg_perf_drop(forward_drop: float, backward_drop: float) -> float:
    return 0.5 * (forward_drop + backward_drop)


def evaluate(
    ckpt: Checkpoint,
    bundle: DatasetBundle,
    fold: int,
    domain: int,
) -> list[MetricsRow]:
    """Segment the held-out fold of one domain and score every foreground class."""
    if ckpt.network_config.num_classes != bundle.manifest.num_classes:
        raise ConfigurationError(
            f"checkpoint has {ckpt.network_config.num_classes} classes but dataset "
            f"has {bundle.manifest.num_classes}"
        )
    samples = bundle.select(domain=domain, fold=fold)
    if not samples:
        raise ConfigurationError(f"no samples in domain {domain} fold {fold}")
    if any(s.mask is None for s in samples):
        raise ConfigurationError("evaluation requires ground-truth masks")
    samples = sorted(samples, key=lambda s: (s.case_id, s.slice_id))
    images = np.stack([s.image for s in samples])
    preds = list(infer(ckpt, images))
    gts = [s.mask for s in samples]
    cids = [s.case_id for s in samples]
    rows = []
    for k, name in enumerate(bundle.manifest.classes):
        if k == 0:
            continue  # background is not reported
        rows.append(
            MetricsRow(
                method="",
                direction="",
                class_name=name,
                dice=dice_score(preds, gts, cids, k),
                f1=f1_score(preds, gts, cids, k),
            )
        )
    return rows


def mean_scores(rows: Sequence[MetricsRow]) -> tuple[Optional[float], Optional[float]]:
    """Mean Dice/F1 over classes with defined scores (background excluded upstream)."""
    dices = [r.dice for r in rows if r.dice is not None]
    f1s = [r.f1 for r in rows if r.f1 is not None]
    return (
        float(np.mean(dices)) if dices else None,
        float(np.mean(f1s)) if f1s else None,
    )


# -- reporting -------------------------------------------------------------------


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.2f}"


def write_metrics_csv(rows: Sequence[MetricsRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_HEADER + "\n")
        writer = csv.writer(fh)
        for r in rows:
            writer.writerow([r.method, r.direction, r.class_name, _fmt(r.dice), _fmt(r.f1)])


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(
                MetricsRow(
                    method=rec["method"],
                    direction=rec["direction"],
                    class_name=rec["class"],
                    dice=float(rec["dice"]) if rec["dice"] else None,
                    f1=float(rec["f1"]) if rec["f1"] else None,
                )
            )
    return rows


def _score_lookup(rows: Sequence[MetricsRow]):
    table: dict[tuple[str, str, str], MetricsRow] = {}
    for r in rows:
        table[(r.method, r.direction, r.class_name)] = r
    return table


@dataclass
class DropRow:
    method: str
    class_name: str
    forward_drop: Optional[float]
    backward_drop: Optional[float]

    @property
    def avg_drop(self) -> Optional[float]:
        if self.forward_drop is None or self.backward_drop is None:
            return None
        return avg_perf_drop(self.forward_drop, self.backward_drop)

    @property
    def gap(self) -> Optional[float]:
        if self.forward_drop is None or self.backward_drop is None:
            return None
        return abs(self.forward_drop - self.backward_drop)


def _ordered_unique(values) -> list:
    out = []
    for v in values:
        if v not in out:
            out.append(v)
    return out


def compute_drops(rows: Sequence[MetricsRow], metric: str = "dice") -> list[DropRow]:
    """Per-class and mean drops for every adapted method against its bounds.

    Forward runs target domain 1, so they are measured against the domain-1
    bound; backward runs against the domain-0 bound.
    """
    missing = [
        d
        for d in (BOUND_SOURCE_DOMAIN, BOUND_TARGET_DOMAIN)
        if not any(r.direction == d for r in rows)
    ]
    if missing:
        raise ReportError(f"missing upper-bound rows: {', '.join(missing)}")
    bounds = {
        (r.direction, r.class_name): r
        for r in rows
        if r.direction in (BOUND_SOURCE_DOMAIN, BOUND_TARGET_DOMAIN)
    }
    methods = _ordered_unique(r.method for r in rows if r.direction in (FORWARD, BACKWARD))
    class_names = _ordered_unique(r.class_name for r in rows)
    lookup = _score_lookup(rows)

    def drop_of(method: str, direction: str, cname: str) -> Optional[float]:
        bound_dir = BOUND_TARGET_DOMAIN if direction == FORWARD else BOUND_SOURCE_DOMAIN
        score = lookup.get((method, direction, cname))
        bound = bounds.get((bound_dir, cname))
        if score is None or bound is None:
            return None
        s = getattr(score, metric)
        b = getattr(bound, metric)
        if s is None or b is None:
            return None
        return perf_drop(s, b)

    out: list[DropRow] = []
    for method in methods:
        for direction in (FORWARD, BACKWARD):
            if not any(r.method == method and r.direction == direction for r in rows):
                raise ReportError(f"method {method!r} is missing {direction} rows")
        per_class = []
        for cname in class_names:
            f_drop = drop_of(method, FORWARD, cname)
            b_drop = drop_of(method, BACKWARD, cname)
            if f_drop is None and b_drop is None:
                continue
            per_class.append(DropRow(method, cname, f_drop, b_drop))
        fwd_drops = [r.forward_drop for r in per_class if r.forward_drop is not None]
        bwd_drops = [r.backward_drop for r in per_class if r.backward_drop is not None]
        out.extend(per_class)
        out.append(
            DropRow(
                method,
                "Mean",
                float(np.mean(fwd_drops)) if fwd_drops else None,
                float(np.mean(bwd_drops)) if bwd_drops else None,
            )
        )
    return out


def write_drops_csv(drops: Sequence[DropRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(DROPS_HEADER + "\n")
        writer = csv.writer(fh)
        for d in drops:
            writer.writerow(
                [
                    d.method,
                    d.class_name,
                    _fmt(d.forward_drop),
                    _fmt(d.backward_drop),
                    _fmt(d.avg_drop),
                    _fmt(d.gap),
                ]
            )


def write_table_csv(rows: Sequence[MetricsRow], drops: Sequence[DropRow], path: str | Path) -> None:
    """Wide comparison table: raw scores for the bounds, average drops for methods.

    Column layout per class is a (dice, f1) pair, ending with the class means.
    Bound rows carry raw scores; method rows carry average bidirectional drops.
    """
    class_names = [c for c in _ordered_unique(r.class_name for r in rows)]
    header = ["method"]
    for cname in class_names:
        header.extend([f"{cname}_dice", f"{cname}_f1"])
    header.extend(["mean_dice", "mean_f1"])

    lookup = _score_lookup(rows)
    dice_drops = {(d.method, d.class_name): d for d in drops}
    f1_drops = {(d.method, d.class_name): d for d in compute_drops(rows, metric="f1")}
    bound_rows = _ordered_unique(
        (r.method, r.direction)
        for r in rows
        if r.direction in (BOUND_SOURCE_DOMAIN, BOUND_TARGET_DOMAIN)
    )
    methods = _ordered_unique(d.method for d in drops)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for method, direction in bound_rows:
            cells = [direction]
            scores = [lookup.get((method, direction, c)) for c in class_names]
            for s in scores:
                cells.extend([_fmt(s.dice if s else None), _fmt(s.f1 if s else None)])
            dices = [s.dice for s in scores if s and s.dice is not None]
            f1s = [s.f1 for s in scores if s and s.f1 is not None]
            cells.append(_fmt(float(np.mean(dices)) if dices else None))
            cells.append(_fmt(float(np.mean(f1s)) if f1s else None))
            writer.writerow(cells)
        for method in methods:
            cells = [method]
            for cname in class_names + ["Mean"]:
                dd = dice_drops.get((method, cname))
                fd = f1_drops.get((method, cname))
                cells.append(_fmt(dd.avg_drop if dd else None))
                cells.append(_fmt(fd.avg_drop if fd else None))
            writer.writerow(cells)


def plot_drops(drops: Sequence[DropRow], path: str | Path) -> None:
    """Grouped bar chart of mean forward/backward drops per method (vector file)."""
    mean_rows = [d for d in drops if d.class_name == "Mean"]
    methods = [d.method for d in mean_rows]
    fwd = [d.forward_drop if d.forward_drop is not None else 0.0 for d in mean_rows]
    bwd = [d.backward_drop if d.backward_drop is not None else 0.0 for d in mean_rows]
    x = np.arange(len(methods))
    fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(methods), 3.6))
    ax.bar(x - 0.18, fwd, width=0.36, label="forward drop", color="#e0b25c")
    ax.bar(x + 0.18, bwd, width=0.36, label="backward drop", color="#c0504d")
    ax.set_xticks(x)
    ax.set_xticklabels(methods, rotation=20, ha="right")
    ax.set_ylabel("Dice drop (points)")
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def report(rows: Sequence[MetricsRow], out_dir: str | Path) -> dict[str, Path]:
    """Emit metrics.csv, drops.csv, table.csv, and drops.svg into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    drops = compute_drops(rows)
    paths = {
        "metrics": out / "metrics.csv",
        "drops": out / "drops.csv",
        "table": out / "table.csv",
        "chart": out / "drops.svg",
    }
    write_metrics_csv(rows, paths["metrics"])
    write_drops_csv(drops, paths["drops"])
    write_table_csv(rows, drops, paths["table"])
    plot_drops(drops, paths["chart"])
    return paths
