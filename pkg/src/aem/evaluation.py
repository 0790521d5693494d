"""Detection metrics, reports and the ablation harness."""

from __future__ import annotations

import csv
import io
import json
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCORE_NOTE = ("scores are (1 - cos(x_a, y_a)) / 2, a monotone map of the cosine distance onto "
              "[0, 1]; EDA is the mean segment accuracy over the threshold grid; precision "
              "uses the same grid and skips thresholds without predicted positives")
SCORE_HEADER = ["segment_id", "action", "label", "score"]


class MetricError(ValueError):
    pass


@dataclass
class ScoredSegment:
    segment_id: str
    T: int
    label: int
    score: float
    action: str = ""
    extra: dict = field(default_factory=dict)


def default_grid() -> np.ndarray:
    return np.arange(1, 50) / 50.0


def _arrays(segments):
    s = np.array([float(x.score) for x in segments])
    y = np.array([int(x.label) for x in segments])
    t = np.array([int(x.T) for x in segments])
    return s, y, t


def _twice_u(scores, labels, weights):
    """``(2U, P, N)`` as exact integers; ties count one half, so 2U is whole."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    w = np.ones(len(scores), dtype=np.int64) if weights is None else np.asarray(weights, np.int64)
    P = int(w[labels == 1].sum())
    N = int(w[labels == 0].sum())
    if P == 0 or N == 0:
        raise MetricError("AUC is undefined without both positive and negative frames")
    order = np.argsort(scores, kind="stable")
    s_sorted, w_sorted = scores[order], w[order]
    uniq, start = np.unique(s_sorted, return_index=True)
    counts = np.add.reduceat(w_sorted, start)
    before = np.concatenate([[0], np.cumsum(counts)[:-1]])
    twice_rank = 2 * before + counts + 1  # twice the 1-based average rank of each tie group
    group = np.searchsorted(uniq, scores)
    twice_rank_sum = sum(int(twice_rank[g]) * int(k) for g, k, y in zip(group, w, labels) if y == 1)
    return twice_rank_sum - P * (P + 1), P, N


def rank_auc(scores, labels, weights=None) -> float:
    """Mann-Whitney AUC in [0, 1] with average ranks for ties.

    ``weights`` are integer multiplicities (frame counts); an item of weight
    ``w`` behaves exactly like ``w`` tied copies.  The statistic is exact
    integer arithmetic, rounded once.
    """
    u2, P, N = _twice_u(scores, labels, weights)
    return float(Fraction(u2, 2 * P * N))


def frame_auc(segments) -> float:
    """Frame-level AUC in percent; each segment's score is repeated over its T frames."""
    s, y, t = _arrays(segments)
    u2, P, N = _twice_u(s, y, t)
    return float(Fraction(100 * u2, 2 * P * N))


def _check_grid(grid, open_interval=True):
    g = np.asarray(default_grid() if grid is None else grid, dtype=np.float64)
    if g.size == 0:
        raise MetricError("threshold grid is empty")
    if open_interval and (np.any(g <= 0) or np.any(g >= 1)):
        raise MetricError("EDA thresholds must lie in (0, 1)")
    return g


def accuracy_curve(segments, grid=None) -> tuple[np.ndarray, np.ndarray]:
    g = _check_grid(grid)
    s, y, _ = _arrays(segments)
    acc = np.array([np.mean((s > tau).astype(int) == y) for tau in g])
    return g, acc


def eda(segments, grid=None) -> float:
    """Mean segment accuracy of ``score > tau`` over the grid, in percent."""
    _, acc = accuracy_curve(segments, grid)
    return 100.0 * float(acc.mean())


def precision(segments, grid=None) -> float:
    g = _check_grid(grid, open_interval=False)
    s, y, _ = _arrays(segments)
    vals = []
    for tau in g:
        pred = s > tau
        if pred.any():
            vals.append(float(y[pred].mean()))
    if not vals:
        raise MetricError("precision undefined: no threshold yields a positive prediction")
    return 100.0 * float(np.mean(vals))


def random_baseline(segments, seed: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 31]))
    rand = [ScoredSegment(x.segment_id, x.T, x.label, float(rng.uniform()), x.action)
            for x in segments]
    return build_report(rand, variant="random", seed=seed, config_hash="")


# -- reports ---------------------------------------------------------------


def build_report(segments, *, variant: str, seed, config_hash: str, grid=None) -> dict:
    g, acc = accuracy_curve(segments, grid)
    try:
        prec = precision(segments, g)
    except MetricError:
        prec = None
    return {
        "variant": variant,
        "seed": seed,
        "config_hash": config_hash,
        "num_segments": len(segments),
        "num_frames": int(sum(x.T for x in segments)),
        "auc": frame_auc(segments),
        "eda": 100.0 * float(acc.mean()),
        "precision": prec,
        "curve": {"thresholds": [float(x) for x in g], "accuracy": [float(x) for x in acc]},
        "note": SCORE_NOTE,
    }


def write_report(report: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    flat = ["variant", "seed", "config_hash", "num_segments", "num_frames", "auc", "eda",
            "precision"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(flat)
    w.writerow([_fmt(report[k]) for k in flat])
    (out / "report.csv").write_text(buf.getvalue(), encoding="utf-8")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "accuracy"])
    for t, a in zip(report["curve"]["thresholds"], report["curve"]["accuracy"]):
        w.writerow([repr(t), repr(a)])
    (out / "curve.csv").write_text(buf.getvalue(), encoding="utf-8")


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_scores(segments, path, extra_columns=()) -> None:
    cols = SCORE_HEADER + list(extra_columns)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols + ["T"])
        for x in segments:
            row = [x.segment_id, x.action, int(x.label), repr(float(x.score))]
            row += [repr(float(x.extra[c])) for c in extra_columns]
            w.writerow(row + [int(x.T)])


def read_scores(path) -> list[ScoredSegment]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:4] != SCORE_HEADER:
        raise MetricError(f"{path}: expected header starting with {','.join(SCORE_HEADER)}")
    head = rows[0]
    out = []
    for r in rows[1:]:
        rec = dict(zip(head, r))
        extra = {k: float(v) for k, v in rec.items() if k not in SCORE_HEADER and k != "T"}
        score = float(rec["score"])
        if not 0.0 <= score <= 1.0:
            raise MetricError(f"{path}: score {score} outside [0, 1]")
        out.append(ScoredSegment(rec["segment_id"], int(rec.get("T", 1)), int(rec["label"]),
                                 score, rec["action"], extra))
    return out


def scored_segments(segments, scores, extra=None) -> list[ScoredSegment]:
    extra = extra or {}
    return [ScoredSegment(s.segment_id, s.T, int(s.mistake), float(sc), s.action,
                          {k: float(v[i]) for k, v in extra.items()})
            for i, (s, sc) in enumerate(zip(segments, scores))]


# -- ablations --------------------------------------------------------------

COMPARISONS = (
    ("full", "no_effect", "effect modelling"),
    ("full", "last_frame", "ranked effect-frame sampler"),
    ("full", "no_align", "cross-modal alignment"),
    ("full", "state_only", "relation supervision"),
    ("full", "relation_only", "state supervision"),
    ("full", "visual_only", "textual supervision"),
    ("full", "textual_only", "visual supervision"),
)


def run_ablation(dataset, variants, seeds, base_config=None, log=None) -> dict:
    """Train and score every (variant, seed) pair on the test split.

    Seeds vary the training run on a fixed dataset.  Returns per-run metrics,
    per-variant mean and std, and directional comparisons against ``full``.
    """
    from .model import TrainConfig, score_segments
    from .training import make_variant, train

    if len(seeds) < 2:
        raise MetricError("directional comparisons need at least two seeds")
    base = base_config or TrainConfig()
    test = dataset.splits["test"]
    runs = []
    for v in variants:
        for seed in seeds:
            cfg = make_variant(base, v)
            cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": int(seed)})
            model, _, _ = train(dataset, cfg)
            segs = scored_segments(test, score_segments(model, test))
            rep = build_report(segs, variant=v, seed=int(seed), config_hash=cfg.hash())
            runs.append({k: rep[k] for k in ("variant", "seed", "config_hash", "auc", "eda",
                                             "precision")})
            if log is not None:
                log(runs[-1])
    table = []
    for v in variants:
        auc = np.array([r["auc"] for r in runs if r["variant"] == v])
        ed = np.array([r["eda"] for r in runs if r["variant"] == v])
        table.append({"variant": v, "auc_mean": float(auc.mean()), "auc_std": float(auc.std()),
                      "eda_mean": float(ed.mean()), "eda_std": float(ed.std()),
                      "seeds": [int(s) for s in seeds]})
    by = {r["variant"]: r for r in table}
    comparisons = []
    for a, b, what in COMPARISONS:
        if a in by and b in by:
            diff = by[a]["auc_mean"] - by[b]["auc_mean"]
            comparisons.append({"better": a, "worse": b, "component": what,
                                "auc_diff": diff, "holds": bool(diff >= 0)})
    return {"runs": runs, "table": table, "comparisons": comparisons}


def format_table(result: dict) -> str:
    lines = [f"{'variant':<14} {'AUC':>14} {'EDA':>14}"]
    for r in result["table"]:
        lines.append(f"{r['variant']:<14} {r['auc_mean']:7.2f}±{r['auc_std']:<5.2f} "
                     f"{r['eda_mean']:7.2f}±{r['eda_std']:<5.2f}")
    for c in result["comparisons"]:
        mark = "holds" if c["holds"] else "FAILS"
        lines.append(f"{c['better']} vs {c['worse']} ({c['component']}): "
                     f"{c['auc_diff']:+.2f} AUC [{mark}]")
    return "\n".join(lines)
