"""Object-level probes (C2B yes/no, B2C box-to-class), per-category statistics,
and an OLS fit with a confidence band for the mean response.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_consistent_length, check_is_fitted

from .datagen import B2C_TEMPLATE, C2B_TEMPLATE, COUNT_TEMPLATE, InstructionRecord, RecordKind, format_bbox, render
from .errors import ArgumentError, ArtifactError
from .panoptic import extract_objects
from .panoptic.vocab import THING_IDS, class_id, class_name
from .scenes import SceneSet
from .seeding import rng_for

UNPARSEABLE = "<unparseable>"


@dataclass(frozen=True)
class ProbeResult:
    image: str
    probe: str          # "c2b", "b2c" or "count"
    subject: str        # class the probe is about
    question: str
    answer: str         # raw model answer
    prediction: str     # parsed: yes / no / class name / count / UNPARSEABLE
    correct: bool

    @property
    def flagged(self) -> bool:
        return self.prediction == UNPARSEABLE


# ---------------------------------------------------------------------------
# answer sources
# ---------------------------------------------------------------------------

class Answerer(Protocol):
    def answer(self, records: Sequence[InstructionRecord], scenes: SceneSet) -> list[str]: ...


_C2B_RE = re.compile("^" + re.escape(C2B_TEMPLATE).replace(r"\{\}", "(.+)") + "$")
_B2C_RE = re.compile("^" + re.escape(B2C_TEMPLATE).replace(r"\{\}", "(.+)") + "$")
_COUNT_RE = re.compile("^" + re.escape(COUNT_TEMPLATE).replace(r"\{\}", "(.+)") + "$")


class OracleAnswerer:
    """Answers by reading the full-resolution ground-truth grid."""

    def answer(self, records, scenes):
        out = []
        for r in records:
            grid = scenes.grids[r.grid]
            if m := _C2B_RE.match(r.question):
                out.append("Yes" if class_id(m.group(1)) in grid.present_classes() else "No")
            elif m := _COUNT_RE.match(r.question):
                out.append(str(grid.instance_count(class_id(m.group(1)))))
            elif m := _B2C_RE.match(r.question):
                hit = [e for e in extract_objects(grid) if format_bbox(e.bbox) == m.group(1)]
                out.append(hit[0].class_name if hit else "")
            else:
                out.append("")
        return out


class ConstantAnswerer:
    def __init__(self, text: str = "Yes"):
        self.text = text

    def answer(self, records, scenes):
        return [self.text] * len(records)


class RandomYesNoAnswerer:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def answer(self, records, scenes):
        return ["Yes" if b else "No" for b in self.rng.random(len(records)) < 0.5]


class LMAnswerer:
    """Greedy answers from a :class:`MultimodalLM`, batched by prefix length."""

    def __init__(self, model, max_new_tokens: int = 3, batch_size: int = 32, crayon_on: bool | None = None):
        self.model = model
        self.max_new_tokens = max_new_tokens
        self.batch_size = batch_size
        self.crayon_on = crayon_on

    def answer(self, records, scenes):
        tok = self.model.tokenizer
        cfg = self.model.config
        prefixes = []
        for r in records:
            rr = render(InstructionRecord(r.kind, r.image, r.grid, r.question, "x"), tok)
            prefixes.append(list(rr.ids[:rr.prefix_len]))
        out = [""] * len(records)
        by_len: dict[int, list[int]] = {}
        for i, p in enumerate(prefixes):
            by_len.setdefault(len(p), []).append(i)
        for idx in by_len.values():
            for s in range(0, len(idx), self.batch_size):
                chunk = idx[s:s + self.batch_size]
                recs = [records[i] for i in chunk]
                imgs, cls, num = scenes.batch_arrays(recs, cfg.grid_h, cfg.grid_w)
                res = self.model.generate_batch([prefixes[i] for i in chunk], imgs, cls, num,
                                                self.max_new_tokens, self.crayon_on)
                for i, g in zip(chunk, res):
                    toks = [t for t in g.tokens if t != tok.stop_id]
                    out[i] = tok.decode(toks)
        return out


# ---------------------------------------------------------------------------
# probe construction and scoring
# ---------------------------------------------------------------------------

def _probe_record(image: str, question: str, answer: str, task: str, subject: str) -> InstructionRecord:
    return InstructionRecord(RecordKind.VL_CIT.value, image, image, question, answer, task, subject)


def c2b_probes(scenes: SceneSet, classes: Sequence[int] = THING_IDS, seed: int = 0) -> list[InstructionRecord]:
    """One positive per present listed class per image, and as many negatives
    drawn from the listed classes that are absent."""
    rng = rng_for(seed, "c2b-negatives")
    classes = list(classes)
    out = []
    for sid in sorted(scenes.grids):
        present = set(scenes.grids[sid].present_classes())
        pos = [c for c in classes if c in present]
        absent = [c for c in classes if c not in present]
        neg = sorted(rng.choice(absent, size=min(len(pos), len(absent)), replace=False).tolist()) if pos else []
        for c, ans in [(c, "Yes") for c in pos] + [(int(c), "No") for c in neg]:
            name = class_name(c)
            out.append(_probe_record(sid, C2B_TEMPLATE.format(name), ans, "existence", name))
    return out


def b2c_probes(scenes: SceneSet, classes: Sequence[int] = THING_IDS) -> list[InstructionRecord]:
    wanted = set(classes)
    out = []
    for sid in sorted(scenes.grids):
        for e in extract_objects(scenes.grids[sid]):
            if e.instance_number >= 1 and e.class_id in wanted:
                out.append(_probe_record(sid, B2C_TEMPLATE.format(format_bbox(e.bbox)),
                                         e.class_name, "box_class", e.class_name))
    return out


def count_probes(scenes: SceneSet, classes: Sequence[int] = THING_IDS) -> list[InstructionRecord]:
    wanted = set(classes)
    out = []
    for sid in sorted(scenes.grids):
        grid = scenes.grids[sid]
        for c in grid.present_classes():
            if c in wanted:
                out.append(_probe_record(sid, COUNT_TEMPLATE.format(class_name(c)),
                                         str(grid.instance_count(c)), "count", class_name(c)))
    return out


def normalize_answer(text: str) -> str:
    return " ".join(text.strip().lower().split())


def parse_yes_no(text: str) -> str:
    words = text.strip().split()
    first = words[0].strip(".,!?").lower() if words else ""
    return first if first in ("yes", "no") else UNPARSEABLE


def score_records(records: Sequence[InstructionRecord], answers: Sequence[str], probe: str) -> list[ProbeResult]:
    out = []
    for r, a in zip(records, answers, strict=True):
        if probe == "c2b":
            pred = parse_yes_no(a)
            ok = pred == r.answer.lower()
        else:
            pred = normalize_answer(a) or UNPARSEABLE
            ok = pred == normalize_answer(r.answer)
        out.append(ProbeResult(r.image, probe, r.subject, r.question, a, pred, ok))
    return out


def probe_c2b(model: Answerer, scenes: SceneSet, classes: Sequence[int] = THING_IDS, seed: int = 0):
    recs = c2b_probes(scenes, classes, seed)
    return score_records(recs, model.answer(recs, scenes), "c2b")


def probe_b2c(model: Answerer, scenes: SceneSet, classes: Sequence[int] = THING_IDS):
    recs = b2c_probes(scenes, classes)
    return score_records(recs, model.answer(recs, scenes), "b2c")


def probe_count(model: Answerer, scenes: SceneSet, classes: Sequence[int] = THING_IDS):
    recs = count_probes(scenes, classes)
    return score_records(recs, model.answer(recs, scenes), "count")


def accuracy(results: Sequence[ProbeResult]) -> float:
    if not results:
        raise ArgumentError("accuracy of an empty result set")
    return sum(r.correct for r in results) / len(results)


# ---------------------------------------------------------------------------
# category statistics
# ---------------------------------------------------------------------------

@dataclass
class CategoryStats:
    c2b: dict[str, float]
    b2c: dict[str, float]
    mean: dict[str, float]
    top_mean: float
    bottom_mean: float
    overall_mean: float
    k: int
    excluded: list[str] = field(default_factory=list)

    @property
    def classes(self) -> list[str]:
        return sorted(self.mean)


def _per_class(results, probe):
    hits: dict[str, list[bool]] = {}
    for r in results:
        if r.probe == probe:
            hits.setdefault(r.subject, []).append(r.correct)
    return {c: sum(v) / len(v) for c, v in hits.items()}


def category_stats(results: Sequence[ProbeResult], classes: Sequence[str] | None = None) -> CategoryStats:
    """Per-class C2B/B2C accuracy; a class's mean averages whichever probe kinds it has.

    Top/Bottom-k means use k = min(20, floor(n / 2)) over the ranked class means.
    """
    c2b = _per_class(results, "c2b")
    b2c = _per_class(results, "b2c")
    seen = set(c2b) | set(b2c)
    universe = set(classes) if classes is not None else seen
    mean = {}
    for c in sorted(universe & seen):
        vals = [d[c] for d in (c2b, b2c) if c in d]
        mean[c] = sum(vals) / len(vals)
    excluded = sorted(universe - seen)
    if not mean:
        raise ArgumentError("no class has any probe")
    ranked = sorted(mean.values(), reverse=True)
    k = min(20, len(ranked) // 2) or 1
    return CategoryStats(
        c2b={c: c2b[c] for c in mean if c in c2b},
        b2c={c: b2c[c] for c in mean if c in b2c},
        mean=mean,
        top_mean=float(np.mean(ranked[:k])),
        bottom_mean=float(np.mean(ranked[-k:])),
        overall_mean=float(np.mean(ranked)),
        k=k,
        excluded=excluded,
    )


def task_accuracy(results: Sequence[ProbeResult]) -> dict[str, float]:
    hits: dict[str, list[bool]] = {}
    for r in results:
        hits.setdefault(r.subject, []).append(r.correct)
    return {c: sum(v) / len(v) for c, v in sorted(hits.items())}


# ---------------------------------------------------------------------------
# regression with a mean-response band
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    r: float
    n: int
    xs: tuple[float, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]


class OLSConfidenceBand(RegressorMixin, BaseEstimator):
    """Simple linear regression with a t-based confidence band for the mean response."""

    def __init__(self, level: float = 0.95):
        self.level = level

    def fit(self, X, y):
        x, y = _check_xy(X, y)
        n = x.size
        xm, ym = x.mean(), y.mean()
        sxx = float(np.sum((x - xm) ** 2))
        if sxx <= 0 or not np.isfinite(sxx):
            raise ArgumentError("x values are all equal; the slope is undefined")
        sxy = float(np.sum((x - xm) * (y - ym)))
        syy = float(np.sum((y - ym) ** 2))
        self.slope_ = sxy / sxx
        self.intercept_ = ym - self.slope_ * xm
        self.r_ = sxy / math.sqrt(sxx * syy) if syy > 0 else 0.0
        resid = y - (self.intercept_ + self.slope_ * x)
        self.sigma_ = math.sqrt(float(np.sum(resid ** 2)) / (n - 2))
        self.x_mean_, self.sxx_, self.n_ = xm, sxx, n
        self.t_crit_ = float(stats.t.ppf(0.5 + self.level / 2, n - 2))
        return self

    def predict(self, X):
        check_is_fitted(self, "slope_")
        return self.intercept_ + self.slope_ * np.asarray(X, dtype=np.float64).reshape(-1)

    def band(self, X):
        check_is_fitted(self, "slope_")
        x = np.asarray(X, dtype=np.float64).reshape(-1)
        yhat = self.predict(x)
        half = self.t_crit_ * self.sigma_ * np.sqrt(1.0 / self.n_ + (x - self.x_mean_) ** 2 / self.sxx_)
        return yhat - half, yhat + half


def _check_xy(X, y):
    x = np.asarray(X, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    check_consistent_length(x, y)
    if x.size < 3:
        raise ArgumentError("regression needs at least 3 points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ArgumentError("regression inputs must be finite")
    return x, y


def regress_ci(x, y, xs=None, level: float = 0.95, n_grid: int = 21) -> RegressionResult:
    """OLS fit of y on x with the band evaluated at ``xs`` (default: a grid over the x range)."""
    est = OLSConfidenceBand(level).fit(x, y)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    grid = np.linspace(x.min(), x.max(), n_grid) if xs is None else np.asarray(xs, dtype=np.float64)
    lo, hi = est.band(grid)
    return RegressionResult(float(est.slope_), float(est.intercept_), float(est.r_), int(est.n_),
                            tuple(map(float, grid)), tuple(map(float, lo)), tuple(map(float, hi)))


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

CSV_HEADER = ("class", "c2b_acc", "b2c_acc", "mean_acc", "task_acc")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def report_csv(st: CategoryStats, task_acc: dict[str, float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for c in st.classes:
        w.writerow([c, _fmt(st.c2b.get(c)), _fmt(st.b2c.get(c)), _fmt(st.mean[c]), _fmt(task_acc.get(c))])
    return buf.getvalue()


def read_report_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != CSV_HEADER:
        raise ArtifactError("unexpected report columns")
    return rows


def summary_dict(st: CategoryStats, reg: RegressionResult | None, extra: dict | None = None) -> dict:
    out = {
        "classes": len(st.mean), "k": st.k, "top_mean": st.top_mean, "bottom_mean": st.bottom_mean,
        "overall_mean": st.overall_mean,
        "c2b_mean": float(np.mean(list(st.c2b.values()))) if st.c2b else None,
        "b2c_mean": float(np.mean(list(st.b2c.values()))) if st.b2c else None,
        "excluded": st.excluded,
    }
    if reg is not None:
        out.update(slope=reg.slope, intercept=reg.intercept, r=reg.r, n=reg.n)
    out.update(extra or {})
    return out


_W, _H, _PAD = 480.0, 360.0, 40.0


def _num(v: float) -> str:
    return repr(float(v))


def render_svg(x: Sequence[float], y: Sequence[float], reg: RegressionResult) -> str:
    """Scatter plus band. Shapes are drawn in data coordinates inside one
    transform so the band vertices can be read back exactly."""
    x0, x1 = min(min(x), reg.xs[0]), max(max(x), reg.xs[-1])
    ys = list(y) + list(reg.lower) + list(reg.upper)
    y0, y1 = min(ys), max(ys)
    sx = (_W - 2 * _PAD) / ((x1 - x0) or 1.0)
    sy = (_H - 2 * _PAD) / ((y1 - y0) or 1.0)
    tf = f"translate({_num(_PAD - x0 * sx)} {_num(_H - _PAD + y0 * sy)}) scale({_num(sx)} {_num(-sy)})"
    band = [(a, b) for a, b in zip(reg.xs, reg.upper)] + [(a, b) for a, b in zip(reversed(reg.xs), reversed(reg.lower))]
    pts = " ".join(f"{_num(a)},{_num(b)}" for a, b in band)
    fit = [reg.intercept + reg.slope * v for v in (reg.xs[0], reg.xs[-1])]
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{int(_W)}" height="{int(_H)}" viewBox="0 0 {int(_W)} {int(_H)}">',
        f'<rect x="0" y="0" width="{int(_W)}" height="{int(_H)}" fill="white"/>',
        f'<g id="data" transform="{tf}">',
        f'<polygon id="band" points="{pts}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>',
        f'<line id="fit" x1="{_num(reg.xs[0])}" y1="{_num(fit[0])}" x2="{_num(reg.xs[-1])}" y2="{_num(fit[1])}" '
        'stroke="#08519c" vector-effect="non-scaling-stroke"/>',
    ]
    r = 3.0 / sx, 3.0 / sy
    for a, b in zip(x, y):
        lines.append(f'<ellipse cx="{_num(a)}" cy="{_num(b)}" rx="{_num(r[0])}" ry="{_num(r[1])}" fill="#de2d26"/>')
    lines += ["</g>",
              f'<text x="{int(_PAD)}" y="20" font-size="12">slope={reg.slope:.4f} r={reg.r:.4f} n={reg.n}</text>',
              "</svg>"]
    return "\n".join(lines) + "\n"


def parse_svg_band(text: str) -> list[tuple[float, float]]:
    m = re.search(r'<polygon id="band" points="([^"]*)"', text)
    if not m:
        raise ArtifactError("no band polygon in plot")
    return [tuple(float(v) for v in p.split(",")) for p in m.group(1).split()]


def emit_report(st: CategoryStats, reg: RegressionResult | None, out_dir, task_acc: dict[str, float] | None = None,
                extra: dict | None = None) -> dict[str, Path]:
    """Write ``report.csv``, ``summary.json`` and (with a regression) ``correlation.svg``."""
    out_dir = Path(out_dir)
    task_acc = task_acc or {}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out_dir / "report.csv", "summary": out_dir / "summary.json"}
        paths["csv"].write_text(report_csv(st, task_acc), encoding="utf-8", newline="\n")
        paths["summary"].write_text(json.dumps(summary_dict(st, reg, extra), indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8", newline="\n")
        if reg is not None:
            common = [c for c in st.classes if c in task_acc]
            paths["svg"] = out_dir / "correlation.svg"
            paths["svg"].write_text(render_svg([st.mean[c] for c in common], [task_acc[c] for c in common], reg),
                                    encoding="utf-8", newline="\n")
    except OSError as exc:
        raise ArtifactError(f"cannot write report to {out_dir}: {exc}") from exc
    return paths


def correlate(st: CategoryStats, task_acc: dict[str, float], level: float = 0.95) -> RegressionResult:
    common = [c for c in st.classes if c in task_acc]
    return regress_ci([st.mean[c] for c in common], [task_acc[c] for c in common], level=level)
