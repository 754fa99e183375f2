"""Experiment runners, score summaries and report artifacts."""

from __future__ import annotations

import csv
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import config as config_mod
from .dataset import OfflineDataset, bin_select, load_csv, select_mediocre, split
from .model import METHOD_LABELS, RomoModel, TrainLog, parse_method, train
from .oracle import OracleHandle, evaluate_batch, generate_hartmann_dataset, hartmann3
from .particle import Protocol1, Protocol2, parse_fix_spec, run_protocol1, run_protocol2, write_trajectory_csv

log = logging.getLogger(__name__)

PERCENTILES = (100, 90, 80, 50)
PREDICTED_BANNER = "PREDICTED SCORES - no oracle was supplied; values are model predictions, not ground truth"


# -- file helpers --------------------------------------------------------------


@contextmanager
def partial_output(path: str | Path) -> Iterator[Path]:
    """Yield ``path.partial``; rename it to ``path`` only if the block succeeds."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    yield tmp
    os.replace(tmp, path)


def write_text(path: str | Path, text: str) -> None:
    with partial_output(path) as tmp:
        tmp.write_text(text, encoding="utf-8")


# -- metrics -------------------------------------------------------------------


def percentile_summary(scores) -> dict:
    """Mean and nearest-rank percentiles: ``p_q`` is the element at rank
    ``ceil(q n / 100) - 1`` of the ascending sort."""
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    n = s.size
    if n == 0:
        raise ValueError("cannot summarise an empty score list")
    out = {"mean": float(np.mean(s))}
    for q in PERCENTILES:
        rank = -(-q * n // 100)  # integer ceil, avoids 0.9 * 10 rounding surprises
        out[f"p{q}"] = float(s[rank - 1])
    out["n_candidates"] = int(n)
    return out


def normalized_score(y, ds: OfflineDataset):
    """Min-max score over the dataset, scaled to 100; extrapolates past 100."""
    lo, hi = float(ds.y.min()), float(ds.y.max())
    if not hi > lo:
        raise ValueError("dataset scores are constant; normalized score undefined")
    return 100.0 * (np.asarray(y, dtype=np.float64) - lo) / (hi - lo)


@dataclass
class EvalReport:
    task: str
    method: str
    seed: int
    mean: float
    p100: float
    p90: float
    p80: float
    p50: float
    n_candidates: int
    config_echo: dict = field(default_factory=dict)
    predicted: bool = False

    @classmethod
    def from_scores(cls, task: str, method: str, seed: int, scores, config_echo: dict, predicted: bool = False) -> "EvalReport":
        return cls(task=task, method=method, seed=int(seed), config_echo=config_echo, predicted=predicted, **percentile_summary(scores))

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        write_text(path, json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def write_candidates_csv(path: str | Path, X: np.ndarray, y_init: np.ndarray, predicted: np.ndarray, truth: np.ndarray | None) -> None:
    """Dataset-style rows ``x0..x{d-1}, y`` (score of the starting design) plus
    ``predicted_h`` and ``truth_y`` (blank when no oracle is available)."""
    X = np.atleast_2d(X)
    with partial_output(path) as tmp, tmp.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*[f"x{j}" for j in range(X.shape[1])], "y", "predicted_h", "truth_y"])
        for i in range(len(X)):
            t = "" if truth is None else repr(float(truth[i]))
            w.writerow([*[repr(float(v)) for v in X[i]], repr(float(y_init[i])), repr(float(predicted[i])), t])


def read_candidates_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """``(X, truth_y)`` back from a candidate file."""
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = header.index("y")
    X = np.array([[float(v) for v in r[:d]] for r in body]).reshape(len(body), d)
    t = header.index("truth_y")
    truth = np.array([float(r[t]) if r[t] else np.nan for r in body])
    return X, truth


# -- scatter plot --------------------------------------------------------------


def _colour(t: float) -> str:
    # blue (low) -> red (high)
    t = min(max(t, 0.0), 1.0)
    r, g, b = int(round(40 + 200 * t)), int(round(60 + 40 * (1 - abs(2 * t - 1)))), int(round(220 - 190 * t))
    return f"#{r:02x}{g:02x}{b:02x}"


def emit_scatter_svg(points, path: str | Path, size: int = 400, title: str = "") -> None:
    """Standalone SVG of ``(x, y, score)`` triples coloured by score.

    Output bytes depend only on the inputs."""
    pts = [(float(a), float(b), float(c)) for a, b, c in points]
    pad = 30
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white" stroke="black"/>',
    ]
    if title:
        esc = title.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
        lines.append(f'<text x="{pad}" y="{pad - 10}" font-size="12">{esc}</text>')
    if pts:
        xs, ys, ss = zip(*pts)

        def span(v):
            lo, hi = min(v), max(v)
            return (lo - 0.5, hi + 0.5) if hi == lo else (lo, hi)

        (x0, x1), (y0, y1), (s0, s1) = span(xs), span(ys), span(ss)
        inner = size - 2 * pad
        for x, y, s in pts:
            cx = pad + (x - x0) / (x1 - x0) * inner
            cy = size - pad - (y - y0) / (y1 - y0) * inner
            lines.append(f'<circle cx="{cx:.3f}" cy="{cy:.3f}" r="3" fill="{_colour((s - s0) / (s1 - s0))}"/>')
    lines.append("</svg>")
    write_text(path, "\n".join(lines) + "\n")


# -- experiments ---------------------------------------------------------------


@dataclass
class RunResult:
    report: EvalReport
    model: RomoModel
    train_log: TrainLog
    initial_X: np.ndarray
    candidates: np.ndarray
    truth: np.ndarray


def _optimize(model: RomoModel, X0: np.ndarray, fix: str, cfg: dict, record: bool):
    """Ascend from raw designs ``X0``; returns raw candidates (one or Q per particle)."""
    mask = parse_fix_spec(fix, X0.shape[1])
    if mask.n_free == 0:
        log.warning("no optimizable dimensions: every dimension is fixed, particles will not move")
    proto = config_mod.protocol(cfg)
    stride = int(cfg["optimize"]["trajectory_stride"])
    Xn = model.normalizer.normalize_x(X0)
    norm = model.normalizer
    if isinstance(proto, Protocol1):
        res = run_protocol1(model, Xn, mask, proto, record=record, stride=stride)
        cand = norm.denormalize_x(res.best_positions)
        pred = norm.denormalize_y(res.best_h)
    else:
        res = run_protocol2(model, Xn, mask, proto, record=record, stride=stride)
        n, q, d = res.positions.shape
        cand = norm.denormalize_x(res.positions.reshape(n * q, d)).reshape(n, q, d)
        pred = norm.denormalize_y(res.predicted)
    # the ascent never writes fixed columns, but normalize/denormalize can
    # perturb the last bit, so the raw starting values are copied back
    fixed = ~mask.optimizable
    if cand.ndim == 3:
        cand[:, :, fixed] = X0[:, None, fixed]
    else:
        cand[:, fixed] = X0[:, fixed]
    return cand, pred, res.state, mask


def _run_dir(out_dir: Path | None, method: str, seed: int) -> Path | None:
    if out_dir is None:
        return None
    d = Path(out_dir) / f"{method}_seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _echo(cfg: dict, method: str, seed: int) -> dict:
    return {**json.loads(json.dumps(cfg)), "run": {"method": method, "seed": int(seed)}}


def hartmann_initial_particles(ds: OfflineDataset, cfg: dict) -> np.ndarray:
    i = cfg["init"]
    return bin_select(ds, int(i["bin_dim"]), int(i["n_bins"]), int(i["per_bin"]))


def run_hartmann_experiment(cfg: dict, method: str, seed: int, out_dir: str | Path | None = None, ds: OfflineDataset | None = None) -> RunResult:
    """Generate -> split -> train -> bin-selected particles -> masked ascent -> oracle."""
    method = parse_method(method)
    if ds is None:
        ds = generate_hartmann_dataset(int(cfg["data"]["n_total"]), int(cfg["data"]["trim"]), seed)
    k = int(cfg["retrieval"]["k"])
    sp = split(ds, tuple(cfg["data"]["fractions"]), seed=seed, k=k)
    model, tlog = train(
        ds, sp, method, config_mod.train_config(cfg, seed), k=k,
        sim=config_mod.similarity_kind(cfg), agg=config_mod.aggregation_kind(cfg),
    )
    init_idx = hartmann_initial_particles(ds, cfg)
    X0 = ds.X[init_idx]
    run_dir = _run_dir(out_dir, method, seed)
    cand, pred, state, _ = _optimize(model, X0, cfg["bench"]["fix"], cfg, record=run_dir is not None)
    if cand.ndim == 3:
        # protocol p2 on Hartmann: best truth over the last Q positions
        n, q, d = cand.shape
        all_truth = hartmann3(cand.reshape(n * q, d)).reshape(n, q)
        best = np.argmax(all_truth, axis=1)
        cand, pred = cand[np.arange(n), best], pred[np.arange(n), best]
    truth = hartmann3(cand)
    report = EvalReport.from_scores("hartmann", method, seed, truth, _echo(cfg, method, seed))
    if run_dir is not None:
        report.save(run_dir / "report.json")
        write_candidates_csv(run_dir / "candidates.csv", cand, ds.y[init_idx], pred, truth)
        with partial_output(run_dir / "trajectory.csv") as tmp:
            write_trajectory_csv(state, tmp, to_raw=model.normalizer.denormalize_x, h_to_raw=model.normalizer.denormalize_y)
        with partial_output(run_dir / "train_log.csv") as tmp:
            tlog.to_csv(tmp)
        emit_scatter_svg(zip(cand[:, 0], cand[:, 1], truth), run_dir / "candidates.svg", title=f"{METHOD_LABELS[method]} seed {seed}: x0 vs x1")
    return RunResult(report, model, tlog, X0, cand, truth)


def initial_report(cfg: dict, seed: int, ds: OfflineDataset | None = None) -> EvalReport:
    """Scores of the starting particles themselves (the x~ baseline row)."""
    if ds is None:
        ds = generate_hartmann_dataset(int(cfg["data"]["n_total"]), int(cfg["data"]["trim"]), seed)
    idx = hartmann_initial_particles(ds, cfg)
    return EvalReport.from_scores("hartmann", "initial", seed, ds.y[idx], _echo(cfg, "initial", seed))


def run_csv_experiment(cfg: dict, method: str, seed: int, out_dir: str | Path | None = None) -> RunResult:
    """Bottom-k particles from a CSV dataset, ascended and scored by an
    external oracle, or by the model itself when no oracle is configured."""
    method = parse_method(method)
    b = cfg["bench"]
    if not b["data"]:
        raise ValueError("task=csv needs bench.data (a dataset CSV)")
    ds = load_csv(b["data"])
    k = int(cfg["retrieval"]["k"])
    sp = split(ds, tuple(cfg["data"]["fractions"]), seed=seed, k=k)
    model, tlog = train(
        ds, sp, method, config_mod.train_config(cfg, seed), k=k,
        sim=config_mod.similarity_kind(cfg), agg=config_mod.aggregation_kind(cfg),
    )
    n_init = min(int(cfg["init"]["bottom_k"]), len(ds))
    init_idx = select_mediocre(ds, bottom_k=n_init)
    X0 = ds.X[init_idx]
    run_dir = _run_dir(out_dir, method, seed)
    # the CSV task is always scored under the fixed-budget protocol
    p2_cfg = {**cfg, "optimize": {**cfg["optimize"], "protocol": "p2"}}
    cand, pred, state, _ = _optimize(model, X0, cfg["optimize"]["fix"], p2_cfg, record=run_dir is not None)
    n, q, d = cand.shape
    flat = cand.reshape(n * q, d)
    predicted_only = not b["oracle"]
    if predicted_only:
        log.warning(PREDICTED_BANNER)
        truth_flat = None
        per_particle = pred.max(axis=1)
    else:
        truth_flat = evaluate_batch(OracleHandle("external", b["oracle"]), flat)
        per_particle = truth_flat.reshape(n, q).max(axis=1)
    report = EvalReport.from_scores("csv", method, seed, per_particle, _echo(cfg, method, seed), predicted=predicted_only)
    if run_dir is not None:
        report.save(run_dir / "report.json")
        write_candidates_csv(run_dir / "candidates.csv", flat, np.repeat(ds.y[init_idx], q), pred.ravel(), truth_flat)
        with partial_output(run_dir / "trajectory.csv") as tmp:
            write_trajectory_csv(state, tmp, to_raw=model.normalizer.denormalize_x, h_to_raw=model.normalizer.denormalize_y)
        with partial_output(run_dir / "train_log.csv") as tmp:
            tlog.to_csv(tmp)
    return RunResult(report, model, tlog, X0, flat, per_particle if truth_flat is None else truth_flat)


# -- tables --------------------------------------------------------------------


def _pm(values) -> str:
    v = np.asarray(values, dtype=np.float64)
    sd = float(np.std(v)) if v.size > 1 else 0.0
    return f"{np.mean(v):.3f}±{sd:.3f}"


def markdown_tables(reports: list[EvalReport]) -> str:
    """Mean/Max/Median table plus the full percentile table, mean±std over seeds."""
    order = ["initial", "grad", "rem_p", "rem_n", "romo_p", "romo_n"]
    by: dict[str, list[EvalReport]] = {}
    for r in reports:
        by.setdefault(r.method, []).append(r)
    methods = [m for m in order if m in by] + sorted(m for m in by if m not in order)
    label = {**METHOD_LABELS, "initial": "x̃ (initial particles)"}
    out = []
    if any(r.predicted for r in reports):
        out += [f"**{PREDICTED_BANNER}**", ""]
    out += ["| Method | Mean | Max | Median |", "|---|---|---|---|"]
    for m in methods:
        rs = by[m]
        out.append(f"| {label.get(m, m)} | {_pm([r.mean for r in rs])} | {_pm([r.p100 for r in rs])} | {_pm([r.p50 for r in rs])} |")
    out += ["", "| Method | Mean | 100% | 90% | 80% | 50% |", "|---|---|---|---|---|---|"]
    for m in methods:
        rs = by[m]
        cells = [_pm([getattr(r, c) for r in rs]) for c in ("mean", "p100", "p90", "p80", "p50")]
        out.append(f"| {label.get(m, m)} | " + " | ".join(cells) + " |")
    seeds = sorted({r.seed for r in reports})
    out += ["", f"Seeds: {', '.join(map(str, seeds))}. Entries are mean±std over seeds (population std)."]
    return "\n".join(out) + "\n"


def run_bench(cfg: dict, out_dir: str | Path | None = None) -> list[EvalReport]:
    """Every configured (method, seed) run plus, for Hartmann, the initial-particle row."""
    b = cfg["bench"]
    reports: list[EvalReport] = []
    for seed in b["seeds"]:
        seed = int(seed)
        if b["task"] == "hartmann":
            ds = generate_hartmann_dataset(int(cfg["data"]["n_total"]), int(cfg["data"]["trim"]), seed)
            reports.append(initial_report(cfg, seed, ds))
            for m in b["methods"]:
                r = run_hartmann_experiment(cfg, m, seed, out_dir, ds).report
                log.info("%s seed %d: mean %.3f max %.3f median %.3f", m, seed, r.mean, r.p100, r.p50)
                reports.append(r)
        else:
            for m in b["methods"]:
                reports.append(run_csv_experiment(cfg, m, seed, out_dir).report)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_text(Path(out_dir) / "table.md", markdown_tables(reports))
        write_text(Path(out_dir) / "reports.json", json.dumps([r.to_json() for r in reports], indent=2) + "\n")
    return reports


def mean_over_seeds(reports: list[EvalReport], method: str, field_name: str = "mean") -> float:
    vals = [getattr(r, field_name) for r in reports if r.method == method]
    if not vals:
        raise KeyError(method)
    return float(np.mean(vals))


__all__ = [
    "EvalReport",
    "PREDICTED_BANNER",
    "emit_scatter_svg",
    "markdown_tables",
    "mean_over_seeds",
    "normalized_score",
    "percentile_summary",
    "run_bench",
    "run_csv_experiment",
    "run_hartmann_experiment",
]
