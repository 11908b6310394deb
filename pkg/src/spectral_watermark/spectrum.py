"""Least-squares sinusoid fits, the unnormalized Lomb-Scargle periodogram, and
signal-to-noise extraction of a watermark from model outputs.

The periodogram is computed from explicit residuals,
``P(f) = (chi2_const - chi2_f) / 2``, where ``chi2_f`` is the residual sum of
squares of the best fit ``alpha + beta cos(f p + gamma)`` (floating mean) and
``chi2_const`` that of the best constant.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError, InvalidInputError
from .wmcore import WatermarkKey, project

DEFAULT_GRID_SIZE = 512
DEFAULT_WINDOW_BINS = 5
_CHUNK = 64


@dataclass(frozen=True)
class PairedSeries:
    """Pairs ``(p_l, q_l)`` of projection value and target-class output."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64).ravel()
        q = np.asarray(self.q, dtype=np.float64).ravel()
        if p.shape != q.shape:
            raise InvalidInputError("p and q must have the same length")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    def __len__(self):
        return self.p.size

    @classmethod
    def from_outputs(cls, outputs, inputs, key: WatermarkKey) -> "PairedSeries":
        outputs = np.asarray(outputs, dtype=np.float64)
        return cls(project(inputs, key), outputs[:, key.target_class])


@dataclass(frozen=True)
class SinusoidFit:
    alpha: float
    beta: float
    gamma: float
    chi_sq: float
    frequency: float

    def __call__(self, p):
        return self.alpha + self.beta * np.cos(self.frequency * np.asarray(p) + self.gamma)


@dataclass
class Periodogram:
    frequencies: np.ndarray
    powers: np.ndarray
    chi0: float

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frequency", "power"])
        for f, pw in zip(self.frequencies, self.powers):
            w.writerow([repr(float(f)), repr(float(pw))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


@dataclass
class SnrReport:
    p_signal: float
    p_noise: float
    p_snr: float
    f_w: float
    delta: float
    max_frequency: float
    survivors: int
    threshold: float
    infinite: bool = False
    periodogram: Periodogram | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"p_signal": self.p_signal, "p_noise": self.p_noise,
                "p_snr": "inf" if self.infinite else self.p_snr,
                "f_w": self.f_w, "delta": self.delta, "F": self.max_frequency,
                "survivors": self.survivors, "q_threshold": self.threshold,
                "infinite": self.infinite}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


@dataclass(frozen=True)
class FilterPolicy:
    """How the confidence threshold on target-class outputs is chosen.

    ``kind`` is ``"first_quartile"``, ``"median"`` or ``"absolute"``. The
    quantile kinds are multiplied by ``scale``. With ``keep="above"`` pairs
    with ``q > threshold`` survive; ``keep="below"`` is the q_max variant and
    keeps ``q < threshold``.
    """

    kind: str = "first_quartile"
    value: float | None = None
    scale: float = 1.0
    keep: str = "above"

    def __post_init__(self):
        if self.kind not in ("first_quartile", "median", "absolute"):
            raise InvalidInputError(f"unknown filter kind {self.kind!r}")
        if self.kind == "absolute" and self.value is None:
            raise InvalidInputError("absolute filter needs a value")
        if self.keep not in ("above", "below"):
            raise InvalidInputError(f"keep must be 'above' or 'below', got {self.keep!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value, "scale": self.scale,
                "keep": self.keep}


SINGLE_TEACHER_FILTER = FilterPolicy("first_quartile")
ENSEMBLE_FILTER = FilterPolicy("median")


def filter_threshold(values, policy: FilterPolicy) -> float:
    values = np.asarray(values, dtype=np.float64).ravel()
    if policy.kind == "absolute":
        return float(policy.value)
    if values.size == 0:
        raise InvalidInputError("cannot compute a threshold from no values")
    qlevel = 0.25 if policy.kind == "first_quartile" else 0.5
    return float(policy.scale * np.quantile(values, qlevel, method="linear"))


def _design(p, freqs):
    arg = freqs[:, None] * p[None, :]
    ones = np.ones_like(arg)
    return np.stack([ones, np.cos(arg), np.sin(arg)], axis=-1)


def _solve(A, y):
    """Minimum-norm least squares for a stack of (L, 3) designs.

    Returns coefficients (F, 3) and residual sums of squares (F,).
    """
    u, s, vt = np.linalg.svd(A, full_matrices=False)
    tol = s[:, :1] * max(A.shape[-2:]) * np.finfo(np.float64).eps
    keep = s > tol
    uty = np.einsum("flk,l->fk", u, y)
    sinv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    coef = np.einsum("fkj,fk->fj", vt, sinv * uty)
    resid = y[None, :] - np.einsum("flj,fj->fl", A, coef)
    return coef, np.einsum("fl,fl->f", resid, resid)


def _check_series(series: PairedSeries):
    if len(series) < 3:
        raise InsufficientDataError(
            f"need at least 3 pairs for a sinusoid fit, got {len(series)}",
            survivors=len(series))


def fit_sinusoid(series: PairedSeries, f: float) -> SinusoidFit:
    """Best fit ``alpha + beta cos(f p + gamma)`` by linear least squares."""
    _check_series(series)
    if not f > 0:
        raise InvalidInputError("frequency must be positive")
    freqs = np.array([float(f)])
    coef, chi = _solve(_design(series.p, freqs), series.q)
    a, c, s = coef[0]
    # c cos + s sin = beta cos(theta + gamma) with beta cos(gamma) = c, beta sin(gamma) = -s
    beta = math.hypot(c, s)
    gamma = math.atan2(-s, c) % (2 * math.pi) if beta > 0 else 0.0
    return SinusoidFit(float(a), beta, gamma, max(float(chi[0]), 0.0), float(f))


def chi_sq_const(series: PairedSeries) -> float:
    q = series.q
    d = q - q.mean()
    return float(d @ d)


def chi_sq(series: PairedSeries, freqs) -> np.ndarray:
    """Sinusoid-fit residual sums of squares at each frequency."""
    _check_series(series)
    freqs = np.atleast_1d(np.asarray(freqs, dtype=np.float64))
    y = series.q - series.q.mean()
    out = np.empty(freqs.size)
    for start in range(0, freqs.size, _CHUNK):
        fr = freqs[start:start + _CHUNK]
        _, out[start:start + _CHUNK] = _solve(_design(series.p, fr), y)
    return np.maximum(out, 0.0)


def frequency_grid(max_frequency: float, size: int = DEFAULT_GRID_SIZE) -> np.ndarray:
    """``size`` evenly spaced frequencies over ``(0, max_frequency]``."""
    return max_frequency * np.arange(1, size + 1) / size


def periodogram(series: PairedSeries, grid) -> Periodogram:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise InvalidInputError("frequency grid must be a nonempty 1-d array")
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise InvalidInputError("frequency grid must be positive and strictly increasing")
    chi0 = chi_sq_const(series)
    chif = chi_sq(series, grid)
    powers = np.clip(0.5 * (chi0 - chif), 0.0, 0.5 * chi0)
    return Periodogram(grid.copy(), powers, chi0)


def window_mask(grid, f_w, delta):
    return np.abs(grid - f_w) <= 0.5 * delta * (1 + 1e-12)


def snr_from_periodogram(pg: Periodogram, f_w: float, delta: float):
    inside = window_mask(pg.frequencies, f_w, delta)
    if not inside.any() or inside.all():
        raise InvalidInputError("window must contain some but not all grid frequencies")
    p_signal = float(pg.powers[inside].mean())
    p_noise = float(pg.powers[~inside].mean())
    if p_noise > 0:
        return p_signal, p_noise, p_signal / p_noise, False
    return p_signal, p_noise, math.inf, True


def extract_signal(outputs, inputs, key: WatermarkKey,
                   policy: FilterPolicy = SINGLE_TEACHER_FILTER,
                   delta: float | None = None, max_frequency: float | None = None,
                   grid_size: int = DEFAULT_GRID_SIZE, reference=None,
                   window_bins: int = DEFAULT_WINDOW_BINS) -> SnrReport:
    """Score how strongly ``outputs`` carry the watermark of ``key``.

    Parameters
    ----------
    outputs : (L, m) array
        Probability outputs of the suspected model on ``inputs``.
    inputs : (L, n) array
        The query inputs.
    key : WatermarkKey
    policy : FilterPolicy
        Confidence filter on the target-class outputs.
    delta : float, optional
        Window width around ``key.frequency``; defaults to ``window_bins`` grid
        spacings.
    max_frequency : float, optional
        Upper end of the frequency grid; defaults to twice the key frequency.
    reference : boolean mask, optional
        Subset of rows whose target-class outputs set the quantile threshold
        (e.g. queries labelled with the target class). Defaults to all rows.
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    inputs = np.asarray(inputs, dtype=np.float64)
    if outputs.ndim != 2 or inputs.ndim != 2 or outputs.shape[0] != inputs.shape[0]:
        raise InvalidInputError("outputs and inputs must be aligned 2-d arrays")
    if grid_size < 16:
        raise InvalidInputError("grid_size must be at least 16")
    if key.target_class >= outputs.shape[1]:
        raise InvalidInputError("key target class exceeds the output width")
    series = PairedSeries.from_outputs(outputs, inputs, key)
    ref = series.q if reference is None else series.q[np.asarray(reference, dtype=bool)]
    thr = filter_threshold(ref, policy)
    keep = series.q > thr if policy.keep == "above" else series.q < thr
    kept = PairedSeries(series.p[keep], series.q[keep])
    if len(kept) < 3:
        raise InsufficientDataError(
            f"only {len(kept)} pairs survive the confidence filter (need 3)",
            survivors=len(kept))
    F = 2.0 * key.frequency if max_frequency is None else float(max_frequency)
    grid = frequency_grid(F, grid_size)
    if delta is None:
        delta = window_bins * F / grid_size
    pg = periodogram(kept, grid)
    ps, pn, snr, inf = snr_from_periodogram(pg, key.frequency, delta)
    return SnrReport(ps, pn, snr, key.frequency, float(delta), F, len(kept), thr,
                     inf, pg)
