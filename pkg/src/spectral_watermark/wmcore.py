"""Cosine watermark embedded in classifier probability outputs.

A watermark key ``(target_class, frequency, projection)`` defines a scalar
projection ``p(x) = v.x`` of each input and a periodic signal
``cos(f * p(x))`` that is added to the target-class probability while the
remaining classes absorb the opposite phase, so the perturbed output stays on
the probability simplex.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

EPSILON_CAP = 0.5
LOG_FLOOR = 1e-12


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


@dataclass(frozen=True)
class WatermarkKey:
    """Secret needed both to embed and to extract a watermark."""

    target_class: int
    frequency: float
    projection: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.projection, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise InvalidInputError("projection must be a nonempty 1-d vector")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("projection contains non-finite values")
        if abs(np.linalg.norm(v) - 1.0) > 1e-9:
            raise InvalidInputError(
                f"projection must have unit norm, got {np.linalg.norm(v):.12g}")
        if int(self.target_class) < 0:
            raise InvalidInputError("target_class must be nonnegative")
        if not math.isfinite(self.frequency) or self.frequency <= 0:
            raise InvalidInputError("frequency must be a positive finite number")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "projection", v)
        object.__setattr__(self, "target_class", int(self.target_class))
        object.__setattr__(self, "frequency", float(self.frequency))

    @property
    def dim(self) -> int:
        return self.projection.size

    @classmethod
    def random(cls, n: int, frequency: float, target_class: int = 0,
               rng: np.random.Generator | int | None = None) -> "WatermarkKey":
        """Draw a key whose projection is uniform on the unit sphere."""
        rng = np.random.default_rng(rng)
        v = rng.standard_normal(n)
        return cls(target_class, frequency, v / np.linalg.norm(v))

    def __eq__(self, other):
        if not isinstance(other, WatermarkKey):
            return NotImplemented
        return (self.target_class == other.target_class
                and self.frequency == other.frequency
                and np.array_equal(self.projection, other.projection))

    def __hash__(self):
        return hash((self.target_class, self.frequency, self.projection.tobytes()))

    def to_text(self) -> str:
        proj = ", ".join(_fmt(x) for x in self.projection)
        return ('{\n'
                f'  "target_class": {self.target_class},\n'
                f'  "frequency": {_fmt(self.frequency)},\n'
                f'  "projection": [{proj}]\n'
                '}\n')

    @classmethod
    def from_text(cls, text: str) -> "WatermarkKey":
        try:
            rec = json.loads(text)
            return cls(rec["target_class"], rec["frequency"],
                       np.array(rec["projection"], dtype=np.float64))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed watermark key record: {exc}") from exc

    def to_dict(self) -> dict:
        return {"target_class": self.target_class, "frequency": self.frequency,
                "projection": [float(x) for x in self.projection]}

    @classmethod
    def from_dict(cls, rec: dict) -> "WatermarkKey":
        return cls(rec["target_class"], rec["frequency"],
                   np.array(rec["projection"], dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "WatermarkKey":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class WatermarkConfig:
    key: WatermarkKey
    epsilon: float
    epsilon_cap: float = EPSILON_CAP

    def __post_init__(self):
        if not (0.0 <= self.epsilon <= self.epsilon_cap):
            raise InvalidInputError(
                f"epsilon must lie in [0, {self.epsilon_cap}], got {self.epsilon}")

    def to_dict(self) -> dict:
        return {"key": self.key.to_dict(), "epsilon": self.epsilon,
                "epsilon_cap": self.epsilon_cap}

    @classmethod
    def from_dict(cls, rec: dict) -> "WatermarkConfig":
        return cls(WatermarkKey.from_dict(rec["key"]), rec["epsilon"],
                   rec.get("epsilon_cap", EPSILON_CAP))


def softmax(logits):
    """Row-wise softmax with max subtraction. Accepts shape (m,) or (L, m)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise InvalidInputError("softmax needs at least two classes")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits must be finite")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def project(x, key: WatermarkKey):
    """Projection value ``v.x``; ``x`` may be one vector or a row matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != key.dim:
        raise InvalidInputError(
            f"input dimension {x.shape[-1]} does not match key dimension {key.dim}")
    return x @ key.projection


def signal(x, i: int, cfg: WatermarkConfig | WatermarkKey):
    """Periodic signal value for class ``i`` at input(s) ``x``.

    The non-target branch is the negation of the target branch, which is
    exactly ``cos(theta + pi)``.
    """
    key = cfg.key if isinstance(cfg, WatermarkConfig) else cfg
    c = np.cos(key.frequency * project(x, key))
    return c if i == key.target_class else -c


def modified_softmax(q, x, cfg: WatermarkConfig):
    """Perturb probability vector(s) ``q`` with the watermark signal.

    ``q`` has shape (m,) or (L, m); ``x`` the matching (n,) or (L, n).
    """
    q = np.asarray(q, dtype=np.float64)
    m = q.shape[-1]
    if m < 2:
        raise InvalidInputError("modified softmax needs at least two classes")
    key = cfg.key
    if key.target_class >= m:
        raise InvalidInputError(
            f"target class {key.target_class} out of range for {m} classes")
    if cfg.epsilon == 0.0:
        return q
    eps = cfg.epsilon
    a = np.cos(key.frequency * project(x, key))[..., None]
    bump = np.broadcast_to(eps * (1.0 - a) / (m - 1), q.shape).copy()
    bump[..., key.target_class] = eps * (1.0 + a[..., 0])
    return (q + bump) / (1.0 + 2.0 * eps)


def _check_onehot(y, m):
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != m:
        raise InvalidInputError("label width does not match class count")
    if np.any(y.sum(axis=-1) == 0):
        raise InvalidInputError("label vector is all zeros")
    return y


def watermarked_cross_entropy(q, x, y, cfg: WatermarkConfig):
    """Cross entropy of one-hot ``y`` against the watermarked output.

    Batched inputs return the per-row losses.
    """
    q = np.asarray(q, dtype=np.float64)
    y = _check_onehot(y, q.shape[-1])
    qh = modified_softmax(q, x, cfg)
    return -(y * np.log(np.maximum(qh, LOG_FLOOR))).sum(axis=-1)


def grad_watermarked_cross_entropy(logits, x, y, cfg: WatermarkConfig):
    """Gradient of :func:`watermarked_cross_entropy` w.r.t. the logits.

    ``qhat = (q + b(x)) / (1 + 2 eps)`` is affine in ``q``, so
    ``dL/dq = -y / ((1 + 2 eps) qhat)`` and the softmax Jacobian
    ``diag(q) - q q^T`` finishes the chain rule.
    """
    q = softmax(logits)
    y = _check_onehot(y, q.shape[-1])
    if cfg is None or cfg.epsilon == 0.0:
        return q - y
    qh = modified_softmax(q, x, cfg)
    g = -y / ((1.0 + 2.0 * cfg.epsilon) * np.maximum(qh, LOG_FLOOR))
    return q * (g - (g * q).sum(axis=-1, keepdims=True))
