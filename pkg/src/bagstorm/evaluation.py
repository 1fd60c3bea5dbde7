"""Clean / attacked / defended evaluation, sweeps and reports.

Every slide is attacked once per repeat and the perturbed slide is scored by
all task heads, so one label-free attack shows its cross-task damage.
Per-slide randomness comes from ``derive_seed(master_seed, slide_id, ...)``,
which makes results independent of the number of worker processes.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .attacks import AttackConfig, defend_noise, derive_seed, run_attack
from .data import TUMOR
from .errors import ConfigurationError, UndefinedMetricError, UsageError
from .model import ModelBundle, forward_slide, predict

logger = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "experiment_id",
    "model_tag",
    "task_id",
    "method",
    "strategy",
    "K",
    "epsilon_num",
    "repeats",
    "clean_acc",
    "adv_acc",
    "def_acc",
    "ad_points",
    "asr",
    "std_dev",
    "master_seed",
)
_INT_COLUMNS = {"K", "repeats", "master_seed"}
_FLOAT_COLUMNS = {"epsilon_num", "clean_acc", "adv_acc", "def_acc", "ad_points", "asr", "std_dev"}

CATEGORIES = ("TPTW", "NPTW", "NPNW")


@dataclass
class EvalRecord:
    slide_id: int
    task_id: str
    clean_prediction: int
    adv_prediction: int
    true_label: int
    defended_prediction: int | None = None
    clean_defended_prediction: int | None = None
    repeat: int = 0


@dataclass
class MetricsSummary:
    task_id: str
    clean_accuracy: float
    adv_accuracy: float
    accuracy_drop: float
    attack_success_rate: float
    n_slides: int
    n_originally_correct: int
    std_dev: float
    def_accuracy: float | None = None
    clean_def_accuracy: float | None = None
    adv_accuracy_per_repeat: list[float] = field(default_factory=list)


@dataclass
class VulnRecord:
    slide_id: int
    patch_index: int
    patch_semantic_tag: str
    slide_true_label: int
    attack_succeeded: bool
    category: str


# --- metrics -------------------------------------------------------------------

def accuracy(records: Sequence[EvalRecord], task_id: str | None = None, field: str = "adv_prediction") -> float:
    rows = [r for r in records if task_id is None or r.task_id == task_id]
    if not rows:
        raise UsageError("accuracy of an empty record set")
    return sum(getattr(r, field) == r.true_label for r in rows) / len(rows)


def accuracy_drop(clean_acc: float, adv_acc: float) -> float:
    """Signed drop in percentage points."""
    for v in (clean_acc, adv_acc):
        if not 0.0 <= v <= 1.0:
            raise UsageError(f"accuracy {v!r} outside [0, 1]")
    return (clean_acc - adv_acc) * 100


def attack_success_rate(records: Sequence[EvalRecord]) -> float:
    """Fraction of originally-correct records whose attacked prediction is wrong."""
    correct = [r for r in records if r.clean_prediction == r.true_label]
    if not correct:
        raise UndefinedMetricError("attack success rate is undefined: no originally-correct slides")
    return sum(r.adv_prediction != r.true_label for r in correct) / len(correct)


def vuln_category(tag: str, slide_label: int) -> str:
    if slide_label == 1:
        return "TPTW" if tag == TUMOR else "NPTW"
    return "NPNW"


# --- per-slide work units ------------------------------------------------------------

def _predict_all(bundle: ModelBundle, pixels, tasks) -> dict[str, int]:
    z = forward_slide(bundle, pixels).z
    return {t: predict(bundle.heads[t], z).label for t in tasks}


def _attack_slide(args) -> tuple[list[EvalRecord], list[dict]]:
    bundle, slide, cfg, tasks, repeats, master_seed, amplitude, clean_pred = args
    out = []
    exports = []
    for r in range(repeats):
        run_cfg = replace(cfg, seed=derive_seed(master_seed, slide.slide_id, r))
        outcome = run_attack(bundle, slide, run_cfg)
        exports.append(outcome.to_record())
        adv = _predict_all(bundle, outcome.adv_pixels, tasks)
        defended = clean_defended = None
        if amplitude is not None:
            noisy_adv = defend_noise(outcome.adv_pixels, amplitude, derive_seed(master_seed, slide.slide_id, r, 1))
            noisy_clean = defend_noise(slide.pixels, amplitude, derive_seed(master_seed, slide.slide_id, r, 2))
            defended = _predict_all(bundle, noisy_adv, tasks)
            clean_defended = _predict_all(bundle, noisy_clean, tasks)
        for t in tasks:
            out.append(
                EvalRecord(
                    slide.slide_id,
                    t,
                    clean_pred[t],
                    adv[t],
                    slide.labels[t],
                    None if defended is None else defended[t],
                    None if clean_defended is None else clean_defended[t],
                    r,
                )
            )
    return out, exports


def _fan_out(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def _check_leakage(slides, train_ids: Iterable[int] | None) -> None:
    if train_ids is None:
        return
    overlap = {s.slide_id for s in slides} & set(train_ids)
    if overlap:
        raise ConfigurationError(f"evaluation slides {sorted(overlap)[:5]} were used to train the heads")


def summarise(records: Sequence[EvalRecord], tasks: Sequence[str], repeats: int) -> dict[str, MetricsSummary]:
    out = {}
    for t in tasks:
        rows = sorted((r for r in records if r.task_id == t), key=lambda r: (r.repeat, r.slide_id))
        first = [r for r in rows if r.repeat == 0]
        clean = accuracy(first, field="clean_prediction")
        per_rep = [accuracy([r for r in rows if r.repeat == k]) for k in range(repeats)]
        adv = float(np.mean(per_rep))
        n_correct = sum(r.clean_prediction == r.true_label for r in first)
        if n_correct:
            asr = float(np.mean([attack_success_rate([r for r in rows if r.repeat == k]) for k in range(repeats)]))
        else:
            asr = float("nan")
        def_acc = clean_def = None
        if rows and rows[0].defended_prediction is not None:
            def_acc = float(np.mean([accuracy([r for r in rows if r.repeat == k], field="defended_prediction") for k in range(repeats)]))
            clean_def = float(np.mean([accuracy([r for r in rows if r.repeat == k], field="clean_defended_prediction") for k in range(repeats)]))
        out[t] = MetricsSummary(
            task_id=t,
            clean_accuracy=clean,
            adv_accuracy=adv,
            accuracy_drop=accuracy_drop(clean, adv),
            attack_success_rate=asr,
            n_slides=len(first),
            n_originally_correct=n_correct,
            std_dev=float(np.std(per_rep)),
            def_accuracy=def_acc,
            clean_def_accuracy=clean_def,
            adv_accuracy_per_repeat=per_rep,
        )
    return out


@dataclass
class ExperimentResult:
    summaries: dict[str, MetricsSummary]
    records: list[EvalRecord]
    attack_records: list[dict] = field(default_factory=list)


def run_experiment(
    bundle: ModelBundle,
    slides: Sequence,
    attack_cfg: AttackConfig,
    tasks: Sequence[str] = ("A", "B"),
    repeats: int = 4,
    master_seed: int = 0,
    workers: int = 1,
    defence_amplitude: float | None = None,
    train_ids: Iterable[int] | None = None,
) -> ExperimentResult:
    """Attack each slide ``repeats`` times and score every attack on all heads."""
    if repeats < 1:
        raise ConfigurationError(f"eval.repeats: {repeats!r} must satisfy repeats >= 1")
    slides = sorted(slides, key=lambda s: s.slide_id)
    if not slides:
        raise UsageError("run_experiment: no evaluation slides")
    _check_leakage(slides, train_ids)
    for t in tasks:
        if t not in bundle.heads:
            raise ConfigurationError(f"eval.tasks: no trained head for task {t!r}")
    attack_cfg.validate(min(len(s) for s in slides))
    jobs = [
        (bundle, s, attack_cfg, tuple(tasks), repeats, master_seed, defence_amplitude, _predict_all(bundle, s.pixels, tasks))
        for s in slides
    ]
    results = _fan_out(_attack_slide, jobs, workers)
    records = [r for chunk, _ in results for r in chunk]
    exports = [e for _, chunk in results for e in chunk]
    return ExperimentResult(summarise(records, tasks, repeats), records, exports)


@dataclass
class SweepRow:
    axis: str
    value: float
    strategy: str
    config: AttackConfig
    summaries: dict[str, MetricsSummary]


def sweep(
    bundle: ModelBundle,
    slides: Sequence,
    base_cfg: AttackConfig,
    axis: str,
    values: Sequence[float] | None = None,
    strategies: Sequence[str] = ("sequential", "parallel"),
    tasks: Sequence[str] = ("A", "B"),
    repeats: int = 4,
    master_seed: int = 0,
    workers: int = 1,
    alpha_from_epsilon: bool = True,
    train_ids: Iterable[int] | None = None,
) -> list[SweepRow]:
    """Budget sweep over K or epsilon for each strategy.

    On the epsilon axis the step size follows alpha = epsilon / 4 unless
    ``alpha_from_epsilon`` is false.
    """
    if axis == "K":
        values = list(values or (1, 2, 4, 8))
    elif axis == "epsilon":
        values = list(values or [v / 255 for v in (4, 8, 16, 32, 64)])
    else:
        raise ConfigurationError(f"sweep axis {axis!r} must be 'K' or 'epsilon'")
    if list(values) != sorted(values):
        raise ConfigurationError(f"sweep values {values} must be sorted ascending")
    rows = []
    for v in values:
        for strategy in strategies:
            if axis == "K":
                cfg = replace(base_cfg, K=int(v), strategy=strategy)
            else:
                cfg = replace(base_cfg, epsilon=float(v), strategy=strategy)
                if alpha_from_epsilon and v > 0:
                    cfg = replace(cfg, alpha=float(v) / 4)
            res = run_experiment(bundle, slides, cfg, tasks, repeats, master_seed, workers, train_ids=train_ids)
            rows.append(SweepRow(axis, v, strategy, cfg, res.summaries))
            logger.info("sweep %s=%s %s: %s", axis, v, strategy,
                        {t: round(s.adv_accuracy, 4) for t, s in res.summaries.items()})
    return rows


def _vuln_slide(args) -> list[VulnRecord]:
    bundle, slide, cfg, per_slide, master_seed = args
    rng = np.random.default_rng(derive_seed(master_seed, slide.slide_id))
    n = len(slide)
    picks = rng.choice(n, size=min(per_slide, n), replace=False)
    out = []
    truth = slide.labels["A"]
    for idx in sorted(int(i) for i in picks):
        run_cfg = replace(cfg, K=1, seed=derive_seed(master_seed, slide.slide_id, idx))
        outcome = run_attack(bundle, slide, run_cfg, selection=[idx])
        pred = _predict_all(bundle, outcome.adv_pixels, ("A",))["A"]
        tag = slide.tags[idx]
        out.append(VulnRecord(slide.slide_id, idx, tag, truth, pred != truth, vuln_category(tag, truth)))
    return out


@dataclass
class VulnResult:
    records: list[VulnRecord]
    category_rates: dict[str, float]
    normal_slide_rate: float
    tumor_slide_rate: float


def vuln_sweep(
    bundle: ModelBundle,
    slides: Sequence,
    cfg: AttackConfig,
    patches_per_slide: int = 16,
    master_seed: int = 0,
    workers: int = 1,
) -> VulnResult:
    """Single-patch attacks on sampled patches of correctly predicted slides (task A)."""
    slides = sorted(slides, key=lambda s: s.slide_id)
    keep = [s for s in slides if _predict_all(bundle, s.pixels, ("A",))["A"] == s.labels["A"]]
    jobs = [(bundle, s, cfg, patches_per_slide, master_seed) for s in keep]
    records = [r for chunk in _fan_out(_vuln_slide, jobs, workers) for r in chunk]

    def rate(rows):
        return sum(r.attack_succeeded for r in rows) / len(rows) if rows else float("nan")

    cats = {c: rate([r for r in records if r.category == c]) for c in CATEGORIES}
    return VulnResult(
        records,
        cats,
        rate([r for r in records if r.slide_true_label == 0]),
        rate([r for r in records if r.slide_true_label == 1]),
    )


@dataclass
class DefenceSummary:
    task_id: str
    no_attack: float
    attack: float
    attack_defence: float
    clean_defence: float


def defense_experiment(
    bundle: ModelBundle,
    slides: Sequence,
    attack_cfg: AttackConfig,
    noise_amplitude: float = 1 / 255,
    tasks: Sequence[str] = ("A", "B"),
    repeats: int = 4,
    master_seed: int = 0,
    workers: int = 1,
    train_ids: Iterable[int] | None = None,
) -> tuple[dict[str, DefenceSummary], ExperimentResult]:
    """No attack / attack / attack + noise defence, plus the defence's cost on clean slides."""
    res = run_experiment(bundle, slides, attack_cfg, tasks, repeats, master_seed, workers,
                         defence_amplitude=noise_amplitude, train_ids=train_ids)
    out = {
        t: DefenceSummary(t, s.clean_accuracy, s.adv_accuracy, s.def_accuracy, s.clean_def_accuracy)
        for t, s in res.summaries.items()
    }
    return out, res


# --- reports ---------------------------------------------------------------------

def epsilon_numerator(epsilon: float) -> float:
    return round(epsilon * 255, 9)


def report_rows(
    experiment_id: str,
    summaries: Mapping[str, MetricsSummary],
    cfg: AttackConfig,
    repeats: int,
    master_seed: int,
    model_tag: str = "toy-gated-attn",
) -> list[dict]:
    rows = []
    for t, s in summaries.items():
        rows.append(
            {
                "experiment_id": experiment_id,
                "model_tag": model_tag,
                "task_id": t,
                "method": cfg.method,
                "strategy": cfg.strategy,
                "K": cfg.K,
                "epsilon_num": epsilon_numerator(cfg.epsilon),
                "repeats": repeats,
                "clean_acc": s.clean_accuracy,
                "adv_acc": s.adv_accuracy,
                "def_acc": s.def_accuracy,
                "ad_points": s.accuracy_drop,
                "asr": s.attack_success_rate,
                "std_dev": s.std_dev,
                "master_seed": master_seed,
            }
        )
    return rows


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report(rows: Sequence[Mapping], path, format: str = "csv") -> None:
    """Write report rows sorted by (experiment_id, task_id)."""
    rows = sorted(rows, key=lambda r: (str(r["experiment_id"]), str(r["task_id"])))
    for r in rows:
        missing = set(REPORT_COLUMNS) - set(r)
        if missing:
            raise UsageError(f"report row lacks columns {sorted(missing)}")
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in rows:
            writer.writerow([_cell(r[c]) for c in REPORT_COLUMNS])
        text = buf.getvalue()
    elif format == "json":
        text = json.dumps([{c: r[c] for c in REPORT_COLUMNS} for r in rows], indent=2) + "\n"
    else:
        raise UsageError(f"report format {format!r} must be 'csv' or 'json'")
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc


def _parse_cell(column: str, text: str):
    if text == "":
        return None
    if column in _INT_COLUMNS:
        return int(text)
    if column in _FLOAT_COLUMNS:
        return float(text)
    return text


def read_report(path) -> list[dict]:
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [{c: _parse_cell(c, row[c]) for c in REPORT_COLUMNS} for row in reader]


def sweep_plot_rows(rows: Sequence[SweepRow]) -> list[dict]:
    out = []
    for row in rows:
        for t, s in row.summaries.items():
            out.append(
                {
                    "axis": row.axis,
                    "value": row.value if row.axis == "K" else epsilon_numerator(row.value),
                    "strategy": row.strategy,
                    "task_id": t,
                    "method": row.config.method,
                    "clean_acc": s.clean_accuracy,
                    "adv_acc": s.adv_accuracy,
                    "std_dev": s.std_dev,
                    "ad_points": s.accuracy_drop,
                    "asr": s.attack_success_rate,
                }
            )
    return out


def write_plot_csv(rows: Sequence[Mapping], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    cols = list(rows[0])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for r in rows:
        writer.writerow([_cell(r[c]) for c in cols])
    Path(path).write_text(buf.getvalue())
