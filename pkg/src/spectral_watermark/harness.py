"""Desk-scale watermark experiments: ranking students by extracted signal
strength, amplitude/frequency sweeps, and the periodogram bound checker.

Every random choice is drawn from a seed derived from ``(master_seed, role,
indices...)`` so an experiment is a pure function of its config.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import Dataset, make_blobs, sample_queries, split
from .errors import (BoundViolationError, ConfigurationError, InvalidInputError,
                     TrainingError, UndefinedMetricError)
from .nnet import (Ensemble, Model, TrainConfig, accuracy, distill, ensemble_predict,
                   predict, train_independent, train_teacher)
from .spectrum import (DEFAULT_GRID_SIZE, DEFAULT_WINDOW_BINS, FilterPolicy, PairedSeries,
                       chi_sq, chi_sq_const, extract_signal, filter_threshold)
from .wmcore import WatermarkConfig, WatermarkKey, project

log = logging.getLogger(__name__)

# Low-confidence variant of the filter: keep target-class outputs below half
# the median confidence on queries labelled with the target class.
DESK_FILTER = FilterPolicy("median", scale=0.5, keep="below")
ACCURACY_TOLERANCE = 0.01


def derive_seed(master: int, *path) -> int:
    """Stable 63-bit seed for a job identified by ``path``."""
    words = [int(master)]
    for part in path:
        words.extend(part.encode() if isinstance(part, str) else [int(part)])
    return int(np.random.SeedSequence(words).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)


# --------------------------------------------------------------------------
# metrics

def average_precision(scores, labels) -> float:
    """AP of a descending-score ranking.

    Ties keep the input order (stable sort), so among equal scores the item
    listed first is ranked higher.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise InvalidInputError("scores and labels must have the same length")
    if not labels.any():
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    rel = labels[order]
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    return float(np.sum(hits[rel] / ranks[rel]) / rel.sum())


def random_ap_expectation(positives: int, total: int) -> float:
    """Expected AP of a uniformly random ranking of ``total`` items with
    ``positives`` relevant ones."""
    if not 0 < positives <= total:
        raise InvalidInputError("need 0 < positives <= total")
    if total == 1:
        return 1.0
    h = sum(1.0 / r for r in range(1, total + 1))
    return h / total + (positives - 1) / (total - 1) * (1.0 - h / total)


# --------------------------------------------------------------------------
# bound checker

@dataclass
class BoundReport:
    frequency: float
    n_teachers: int
    samples: int
    chi0_D: float
    chif_D: float
    chif_hat: float
    chif_tilde: float
    tau1: float
    tau2: float
    l_se: float
    lower: float
    upper: float
    p_d: float
    lower_corrected: float
    upper_corrected: float
    slack: float = 1e-6

    @property
    def holds(self) -> bool:
        return self.lower - self.slack <= self.p_d <= self.upper + self.slack

    @property
    def holds_corrected(self) -> bool:
        return self.lower_corrected - self.slack <= self.p_d <= self.upper_corrected + self.slack

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(holds=self.holds, holds_corrected=self.holds_corrected)
        return d


def verify_bound(teacher: Model, others, student: Model, sample_x, f: float,
                 key: WatermarkKey | None = None, policy: FilterPolicy | None = None,
                 reference=None, check: str | None = "stated",
                 slack: float = 1e-6) -> BoundReport:
    """Evaluate the periodogram bounds for a student of ``[teacher] + others``.

    The four paired sets share the projected sample; the target-class
    outputs come from the watermarked teacher, the mean of ``others``, the
    full ensemble mean and the student. ``policy`` optionally filters the
    sample on the student's target-class output first.

    ``lower``/``upper`` are the bounds
    ``(chi0 - tau2 - L_se)/2 <= P <= (chi0 - tau1 + L_se)/2``.
    ``lower_corrected``/``upper_corrected`` replace the squared-error sums by
    norm triangle inequalities,
    ``(chi0 - (sqrt L_se + sqrt chi_hat / N + (N-1)/N sqrt chi_tilde)^2)/2 <= P
    <= (chi0 - max(0, sqrt tau1 - sqrt L_se)^2)/2``, which hold for any data.

    ``check`` selects which pair raises :class:`BoundViolationError`
    (``"stated"``, ``"corrected"`` or ``None``).
    """
    others = list(others)
    key = key or (teacher.watermark.key if teacher.watermark else None)
    if key is None:
        raise InvalidInputError("need a watermark key (teacher carries none)")
    members = [teacher] + others
    if len({(mod.n, mod.m) for mod in members + [student]}) != 1:
        raise InvalidInputError("teacher, others and student must share (n, m)")
    x = np.asarray(sample_x, dtype=np.float64)
    i = key.target_class
    q_s = predict(student, x)[:, i]
    if policy is not None:
        ref = q_s if reference is None else q_s[np.asarray(reference, dtype=bool)]
        thr = filter_threshold(ref, policy)
        keep = q_s > thr if policy.keep == "above" else q_s < thr
        x, q_s = x[keep], q_s[keep]
    if x.shape[0] < 3:
        raise InvalidInputError(f"only {x.shape[0]} samples after filtering (need 3)")
    N = len(members)
    p = project(x, key)
    q_hat = predict(teacher, x)[:, i]
    q_tilde = ensemble_predict(Ensemble(others), x)[:, i] if others else np.zeros_like(q_hat)
    q_bar = (q_hat + (N - 1) * q_tilde) / N
    D = PairedSeries(p, q_s)
    chi0 = chi_sq_const(D)
    chif = float(chi_sq(D, [f])[0])
    chi_bar = float(chi_sq(PairedSeries(p, q_bar), [f])[0])
    chi_hat = float(chi_sq(PairedSeries(p, q_hat), [f])[0])
    chi_tilde = float(chi_sq(PairedSeries(p, q_tilde), [f])[0]) if others else 0.0
    tau1 = chi_bar
    tau2 = chi_hat / N**2 + ((N - 1) / N) ** 2 * chi_tilde
    l_se = float(np.sum((q_bar - q_s) ** 2))
    p_d = 0.5 * (chi0 - chif)
    rl = math.sqrt(l_se)
    upper_c = 0.5 * (chi0 - max(0.0, math.sqrt(tau1) - rl) ** 2)
    lower_c = 0.5 * (chi0 - (rl + math.sqrt(chi_hat) / N
                             + (N - 1) / N * math.sqrt(chi_tilde)) ** 2)
    rep = BoundReport(float(f), N, int(x.shape[0]), chi0, chif, chi_hat, chi_tilde,
                      tau1, tau2, l_se, 0.5 * (chi0 - tau2 - l_se),
                      0.5 * (chi0 - tau1 + l_se), p_d, lower_c, upper_c, slack)
    if check == "stated" and not rep.holds:
        raise BoundViolationError(
            f"P_D(f={f:.6g}) = {p_d:.6g} outside stated bounds "
            f"[{rep.lower:.6g}, {rep.upper:.6g}] (N={N})")
    if check == "corrected" and not rep.holds_corrected:
        raise BoundViolationError(
            f"P_D(f={f:.6g}) = {p_d:.6g} outside corrected bounds "
            f"[{lower_c:.6g}, {upper_c:.6g}] (N={N})")
    return rep


# --------------------------------------------------------------------------
# experiment configuration

def _teacher_cfg():
    return TrainConfig(epochs=100, batch_size=32, learning_rate=1.0, momentum=0.9,
                       loss="ce", architecture="softmax")


def _student_cfg():
    return TrainConfig(loss="kl", architecture="mlp", hidden_size=256,
                       optimizer="lbfgs", max_iter=500)


@dataclass
class ExperimentParams:
    """Knobs shared by all experiments. Paper-scale counts are 10 watermarked
    teachers, 10 unwatermarked, 10 students per ensemble and 10 independents."""

    ensemble_sizes: list = field(default_factory=lambda: [1])
    epsilons: list = field(default_factory=lambda: [0.1])
    watermarked: int = 4
    unwatermarked: int = 8
    students_per: int = 4
    independents: int = 4
    m: int = 10
    n: int = 32
    per_class: int = 250
    spread: float = 0.12
    split_fractions: tuple = (0.45, 0.45, 0.1)
    target_class: int = 0
    periods: float = 6.0
    frequency: float | None = None
    queries: int = 1000
    grid_size: int = DEFAULT_GRID_SIZE
    window_bins: int = DEFAULT_WINDOW_BINS
    filter: FilterPolicy = DESK_FILTER
    teacher: TrainConfig = field(default_factory=_teacher_cfg)
    student: TrainConfig = field(default_factory=_student_cfg)
    seed: int = 0
    repeats: int = 1
    jobs: int = 1
    alpha: float = ACCURACY_TOLERANCE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filter"] = self.filter.to_dict()
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, rec: dict) -> "ExperimentParams":
        rec = dict(rec)
        known = set(cls.__dataclass_fields__)
        unknown = set(rec) - known
        if unknown:
            raise ConfigurationError(f"unknown experiment fields: {sorted(unknown)}")
        if "filter" in rec:
            rec["filter"] = FilterPolicy(**rec["filter"])
        for name, base in (("teacher", _teacher_cfg()), ("student", _student_cfg())):
            if name in rec:
                rec[name] = replace(base, **rec[name])
        if "split_fractions" in rec:
            rec["split_fractions"] = tuple(rec["split_fractions"])
        return cls(**rec)


@dataclass
class World:
    """Data, keys and query sample shared by all jobs of an experiment."""

    teacher_data: Dataset
    student_data: Dataset
    test_data: Dataset
    queries: Dataset
    frequency: float
    keys: list
    frequency_rule: str


def _rescaled_frequency(x, projections, periods):
    spans = []
    for v in projections:
        lo, hi = np.quantile(x @ v, [0.025, 0.975])
        spans.append(hi - lo)
    span = float(np.median(spans))
    return 2 * math.pi * periods / span, span


def build_world(params: ExperimentParams, n_keys: int | None = None) -> World:
    seed = params.seed
    ds = make_blobs(params.m, params.n, params.per_class, params.spread,
                    derive_seed(seed, "data"))
    te, st, test = split(ds, params.split_fractions, derive_seed(seed, "split"))
    n_keys = params.watermarked if n_keys is None else n_keys
    projections = []
    for j in range(n_keys):
        v = np.random.default_rng(derive_seed(seed, "key", j)).standard_normal(params.n)
        projections.append(v / np.linalg.norm(v))
    if params.frequency is None:
        f_w, span = _rescaled_frequency(ds.features, projections, params.periods)
        rule = (f"f_w = 2*pi*{params.periods:g} / {span:.6g} (median central-95% "
                f"projection range) = {f_w:.6g}")
    else:
        f_w = float(params.frequency)
        rule = f"f_w fixed at {f_w:.6g} by configuration"
    keys = [WatermarkKey(params.target_class, f_w, v) for v in projections]
    q = sample_queries(st, min(params.queries, len(st)), derive_seed(seed, "queries"))
    return World(te, st, test, q, f_w, keys, rule)


# --------------------------------------------------------------------------
# jobs

def _job_teacher(world: World, params: ExperimentParams, idx: int, key=None, eps=0.0):
    cfg = replace(params.teacher, seed=derive_seed(params.seed, "teacher",
                                                   "wm" if key else "plain", idx,
                                                   int(round(eps * 1e6))))
    wm = WatermarkConfig(key, eps) if key is not None else None
    try:
        return train_teacher(world.teacher_data, cfg, wm, m=params.m)
    except TrainingError as exc:
        raise TrainingError(f"teacher {'wm' if key else 'plain'}#{idx} eps={eps}: {exc}",
                            exc.epoch) from exc


def _distill_job(args):
    members, data, cfg, label = args
    try:
        return distill(Ensemble(members), data, cfg)
    except TrainingError as exc:
        raise TrainingError(f"student {label}: {exc}", exc.epoch) from exc


def _independent_job(args):
    data, cfg, label = args
    try:
        return train_independent(data, cfg)
    except TrainingError as exc:
        raise TrainingError(f"independent {label}: {exc}", exc.epoch) from exc


def _run_jobs(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# --------------------------------------------------------------------------
# experiments

@dataclass
class RankingTask:
    key_index: int
    student_ids: list
    positives: list
    scores: list
    ap: float

    def to_csv(self, path=None) -> str:
        lines = ["student_id,is_positive,p_snr"]
        for sid, pos, s in zip(self.student_ids, self.positives, self.scores):
            lines.append(f"{sid},{int(pos)},{repr(float(s))}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def score_model(model, queries: Dataset, key: WatermarkKey, policy: FilterPolicy = DESK_FILTER,
                grid_size: int = DEFAULT_GRID_SIZE,
                window_bins: int = DEFAULT_WINDOW_BINS):
    """Signal strength of ``key`` in ``model``'s outputs on ``queries``.

    The quantile threshold is taken over queries labelled with the target
    class when labels are present, otherwise over all queries.
    """
    out = predict(model, queries.features)
    ref = None if queries.labels is None else queries.labels == key.target_class
    return extract_signal(out, queries.features, key, policy, grid_size=grid_size,
                          window_bins=window_bins, reference=ref)


def _score(model, world: World, key: WatermarkKey, params: ExperimentParams):
    return score_model(model, world.queries, key, params.filter, params.grid_size,
                       params.window_bins)


def _safe_snr(report):
    return 1e300 if report.infinite else report.p_snr


def _mean(values):
    return float(np.mean(values)) if len(values) else None


def _summarize(tasks, pos_counts, total):
    aps = [t.ap for t in tasks]
    rand = [random_ap_expectation(p, total) for p in pos_counts]
    pos_snr = [s for t in tasks for s, pos in zip(t.scores, t.positives) if pos]
    neg_snr = [s for t in tasks for s, pos in zip(t.scores, t.positives) if not pos]
    return {"mAP": float(np.mean(aps)), "mAP_std": float(np.std(aps)),
            "AP": aps, "random_mAP": float(np.mean(rand)),
            "mean_positive_snr": _mean(pos_snr),
            "std_positive_snr": float(np.std(pos_snr)) if pos_snr else None,
            "mean_negative_snr": _mean(neg_snr)}


class Experiment:
    """Caches teachers and students so sweeps over (N, eps) reuse work."""

    def __init__(self, params: ExperimentParams, n_keys: int | None = None, keys=None):
        self.params = params
        self.world = build_world(params, n_keys if keys is None else len(keys))
        if keys is not None:
            if any(k.dim != params.n for k in keys):
                raise ConfigurationError(f"keys must have dimension {params.n}")
            self.world.keys = list(keys)
        self._plain = None
        self._wm = {}
        self._indep = None
        self.accuracy_gate = {}

    @property
    def plain_teachers(self):
        if self._plain is None:
            self._plain = [_job_teacher(self.world, self.params, i)
                           for i in range(self.params.unwatermarked)]
        return self._plain

    def watermarked_teachers(self, eps):
        if eps not in self._wm:
            self._wm[eps] = [_job_teacher(self.world, self.params, j, key, eps)
                             for j, key in enumerate(self.world.keys)]
            self._check_gate(eps)
        return self._wm[eps]

    def _check_gate(self, eps):
        test = self.world.test_data
        base = [accuracy(t, test) for t in self.plain_teachers]
        wm = [accuracy(t, test) for t in self._wm[eps]]
        h = float(np.mean(base))
        violations = [j for j, a in enumerate(wm) if h - a > self.params.alpha]
        if violations:
            log.warning("eps=%s: watermarked teachers %s exceed accuracy tolerance %s",
                        eps, violations, self.params.alpha)
        self.accuracy_gate[eps] = {
            "unwatermarked_mean": h, "unwatermarked": base, "watermarked": wm,
            "watermarked_mean": float(np.mean(wm)), "alpha": self.params.alpha,
            "violations": violations,
            "within_1pct_of_mean": [abs(h - a) <= 0.01 for a in wm]}

    @property
    def independents(self):
        if self._indep is None:
            p = self.params
            jobs = [(self.world.student_data,
                     replace(p.student, loss="ce", seed=derive_seed(p.seed, "indep", k)),
                     f"indep#{k}") for k in range(p.independents)]
            self._indep = _run_jobs(_independent_job, jobs, p.jobs)
        return self._indep

    def distill_students(self, ensembles, tag, loss):
        """``students_per`` students for each ensemble, seeded by ``tag``."""
        p = self.params
        data = self.world.student_data if loss == "kl+ce" else self.world.student_data.unlabeled()
        jobs = []
        for e, members in enumerate(ensembles):
            for s in range(p.students_per):
                cfg = replace(p.student, loss=loss,
                              seed=derive_seed(p.seed, "student", tag, e, s))
                jobs.append((members, data, cfg, f"{tag}/ens{e}/s{s}"))
        models = _run_jobs(_distill_job, jobs, p.jobs)
        return [models[e * p.students_per:(e + 1) * p.students_per]
                for e in range(len(ensembles))]

    def plain_members(self, N, j):
        """The N - 1 unwatermarked teachers joining watermarked teacher j."""
        pool = self.plain_teachers
        if N - 1 > len(pool):
            raise ConfigurationError(
                f"ensemble size {N} needs {N - 1} unwatermarked teachers, have {len(pool)}")
        rng = np.random.default_rng(derive_seed(self.params.seed, "ensemble", N, j))
        return [pool[i] for i in sorted(rng.choice(len(pool), N - 1, replace=False))]

    def single(self, N: int, eps: float, loss: str = "kl", out_dir=None) -> dict:
        """One watermarked member per ensemble; rank all students per key."""
        wms = self.watermarked_teachers(eps)
        ensembles = [[w] + self.plain_members(N, j) for j, w in enumerate(wms)]
        groups = self.distill_students(ensembles, f"single/N{N}/eps{eps}/{loss}", loss)
        students, owner = [], []
        for j, g in enumerate(groups):
            students.extend(g)
            owner.extend([{j}] * len(g))
        students.extend(self.independents)
        owner.extend([set()] * len(self.independents))
        return self._rank(students, owner, {"kind": "single", "N": N, "epsilon": eps,
                                            "loss": loss}, out_dir)

    def multi(self, N: int, eps: float, out_dir=None) -> dict:
        """Every member watermarked; ensembles assembled round-robin."""
        check_distinct_keys(self.world.keys)
        wms = self.watermarked_teachers(eps)
        K = len(wms)
        if N > K:
            raise ConfigurationError(f"ensemble size {N} exceeds {K} watermarked teachers")
        sets = [[(s + t) % K for t in range(N)] for s in range(K)]
        groups = self.distill_students([[wms[i] for i in st] for st in sets],
                                f"multi/N{N}/eps{eps}", "kl")
        students, owner = [], []
        for st, g in zip(sets, groups):
            students.extend(g)
            owner.extend([set(st)] * len(g))
        students.extend(self.independents)
        owner.extend([set()] * len(self.independents))
        return self._rank(students, owner, {"kind": "multi", "N": N, "epsilon": eps,
                                            "loss": "kl"}, out_dir)

    def _rank(self, students, owner, meta, out_dir):
        # owner[k] is the set of key indices whose teacher was in student k's ensemble
        p, w = self.params, self.world
        ids = [f"s{k:03d}" for k in range(len(students))]
        tasks, pos_counts, periodograms = [], [], {}
        for j, key in enumerate(w.keys):
            reports = [_score(mod, w, key, p) for mod in students]
            scores = [_safe_snr(r) for r in reports]
            pos = [j in o for o in owner]
            tasks.append(RankingTask(j, ids, pos, scores, average_precision(scores, pos)))
            pos_counts.append(sum(pos))
            periodograms[j] = reports
        summary = _summarize(tasks, pos_counts, len(students))
        eps = meta["epsilon"]
        summary.update(meta)
        summary.update(frequency=w.frequency, frequency_rule=w.frequency_rule,
                       students=len(students), positives=pos_counts,
                       accuracy_gate=self.accuracy_gate.get(eps),
                       own_vs_cross=_own_vs_cross(tasks, owner))
        if out_dir is not None:
            self._write(out_dir, tasks, periodograms, summary)
        return {"summary": summary, "tasks": tasks}

    def _write(self, out_dir, tasks, periodograms, summary):
        out = Path(out_dir)
        (out / "periodograms").mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(
            json.dumps(self.params.to_dict(), indent=2, sort_keys=True) + "\n")
        for t in tasks:
            t.to_csv(out / f"ranking_key{t.key_index}.csv")
            for sid, rep in zip(t.student_ids, periodograms[t.key_index]):
                rep.periodogram.to_csv(out / "periodograms" / f"key{t.key_index}_{sid}.csv")
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _own_vs_cross(tasks, owner):
    """Per key: mean P_snr of its own students against students distilled
    from ensembles without it (independents excluded)."""
    per_key = []
    for t in tasks:
        own = [s for s, o in zip(t.scores, owner) if t.key_index in o]
        cross = [s for s, o in zip(t.scores, owner) if o and t.key_index not in o]
        indep = [s for s, o in zip(t.scores, owner) if not o]
        mo, mc = _mean(own), _mean(cross)
        ratio = None if mo is None or mc is None else (mo / mc if mc > 0 else math.inf)
        per_key.append({"key": t.key_index, "own_mean": mo, "cross_mean": mc,
                        "independent_mean": _mean(indep), "ratio": ratio})
    return per_key


def _as_params(params) -> ExperimentParams:
    if isinstance(params, ExperimentParams):
        return params
    return ExperimentParams.from_dict(params or {})


def _out(out_dir, *parts):
    return None if out_dir is None else Path(out_dir, *parts)


def _report(kind, params, results):
    return {"kind": kind, "version": __version__, "params": params.to_dict(),
            "results": results}


def _repeated(params, experiment, run_one):
    """Run ``run_one(exp, N, eps, repeat)`` over the grid for each repeat and
    attach the across-run mAP spread to the first run's summaries."""
    if params.repeats < 1:
        raise ConfigurationError("repeats must be at least 1")
    runs = []
    for r in range(params.repeats):
        if r == 0:
            exp = experiment or Experiment(params)
        else:
            exp = Experiment(replace(params, seed=derive_seed(params.seed, "repeat", r)))
        runs.append([run_one(exp, N, eps, r) for eps in params.epsilons
                     for N in params.ensemble_sizes])
    results = runs[0]
    for k, res in enumerate(results):
        maps = [run[k]["mAP"] for run in runs]
        res["mAP_runs"] = maps
        res["mAP_std_runs"] = float(np.std(maps))
    return results


def _run_dir(out_dir, N, eps, r):
    tail = f"N{N}_eps{eps}" if r == 0 else f"repeat{r}/N{N}_eps{eps}"
    return _out(out_dir, tail)


def run_single_watermark_experiment(params=None, out_dir=None, experiment=None) -> dict:
    """Rank students of ensembles holding exactly one watermarked teacher.

    Returns a report whose ``results`` hold one summary per (epsilon, N): mAP
    and its spread across watermarks (``mAP_std``) and across repeated runs
    (``mAP_std_runs``), the Random baseline, teacher accuracies and signal
    strengths.
    """
    params = _as_params(params)
    results = _repeated(params, experiment, lambda exp, N, eps, r: exp.single(
        N, eps, out_dir=_run_dir(out_dir, N, eps, r))["summary"])
    rep = _report("single", params, results)
    _dump(out_dir, rep)
    return rep


def run_multi_watermark_experiment(params=None, out_dir=None, experiment=None) -> dict:
    """Every ensemble member watermarked with its own key; ensembles are
    consecutive runs of ``N`` keys taken round-robin."""
    params = _as_params(params)
    exp = experiment or Experiment(params)
    check_distinct_keys(exp.world.keys)
    results = _repeated(params, exp, lambda e, N, eps, r: e.multi(
        N, eps, out_dir=_run_dir(out_dir, N, eps, r))["summary"])
    rep = _report("multi", params, results)
    _dump(out_dir, rep)
    return rep


def check_distinct_keys(keys):
    seen = set()
    for k in keys:
        if k in seen:
            raise ConfigurationError("duplicate watermark key")
        seen.add(k)


def run_mixed_loss_experiment(params=None, out_dir=None, experiment=None) -> dict:
    """As the single-watermark experiment, with students trained on an equal
    mix of KL to the ensemble and ground-truth cross entropy."""
    params = _as_params(params)
    results = _repeated(params, experiment, lambda exp, N, eps, r: exp.single(
        N, eps, loss="kl+ce", out_dir=_run_dir(out_dir, N, eps, r))["summary"])
    rep = _report("mixed", params, results)
    _dump(out_dir, rep)
    return rep


def sweep_amplitude(epsilons, ensemble_sizes, base=None, out_dir=None) -> list:
    """Rows of (epsilon, N, teacher accuracy, mAP) over the grid."""
    params = replace(_as_params(base), epsilons=list(epsilons),
                     ensemble_sizes=list(ensemble_sizes))
    exp = Experiment(params)
    rows = []
    for eps in params.epsilons:
        for N in params.ensemble_sizes:
            s = exp.single(N, eps, out_dir=_out(out_dir, f"N{N}_eps{eps}"))["summary"]
            rows.append({"epsilon": eps, "N": N,
                         "teacher_accuracy": s["accuracy_gate"]["watermarked_mean"],
                         "mAP": s["mAP"], "mAP_std": s["mAP_std"],
                         "random_mAP": s["random_mAP"],
                         "mean_positive_snr": s["mean_positive_snr"]})
    _dump_table(out_dir, "amplitude_sweep.csv", rows)
    return rows


# the paper's frequency list, and the value its case study uses
PAPER_FREQUENCIES = (0.01, 1.0, 30.0, 100.0, 1e4, 1e6, 1e8)
PAPER_REFERENCE_FREQUENCY = 30.0


def sweep_frequency(frequencies=PAPER_FREQUENCIES, ensemble_sizes=(1, 2, 4), base=None,
                    out_dir=None, scale_to_data=True, epsilon=0.2) -> list:
    """Mean +- std P_snr of positive students per (f_w, N).

    With ``scale_to_data`` each frequency is multiplied by
    ``f_rescaled / 30`` so the reference value maps onto the rescaled
    desk-scale frequency.
    """
    base = _as_params(base)
    ref = build_world(base).frequency
    rows = []
    for f in frequencies:
        fw = f * ref / PAPER_REFERENCE_FREQUENCY if scale_to_data else f
        params = replace(base, frequency=fw, epsilons=[epsilon],
                         ensemble_sizes=list(ensemble_sizes), independents=0)
        exp = Experiment(params)
        for N in ensemble_sizes:
            wms = exp.watermarked_teachers(epsilon)
            ens = [[w] + exp.plain_members(N, j) for j, w in enumerate(wms)]
            groups = exp.distill_students(ens, f"freq/{f}/N{N}", "kl")
            snr = [_safe_snr(_score(mod, exp.world, exp.world.keys[j], params))
                   for j, g in enumerate(groups) for mod in g]
            rows.append({"frequency": f, "f_w": fw, "N": N,
                         "mean_snr": float(np.mean(snr)), "std_snr": float(np.std(snr))})
    _dump_table(out_dir, "frequency_sweep.csv", rows)
    return rows


def _dump(out_dir, rep):
    if out_dir is None:
        return
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    Path(out_dir, "report.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")


def _dump_table(out_dir, name, rows):
    if out_dir is None or not rows:
        return
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    cols = list(rows[0])
    lines = [",".join(cols)] + [",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c])
                                         for c in cols) for r in rows]
    Path(out_dir, name).write_text("\n".join(lines) + "\n")
