"""Tiny numpy classifiers: softmax regression and a one-hidden-layer tanh MLP.

Training is mini-batch SGD with momentum or full-batch L-BFGS. Teachers
minimise cross entropy, optionally through the watermarked output; students
are distilled from the averaged output of an ensemble with a KL loss
(optionally mixed with ground-truth cross entropy).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import optimize

from .datagen import Dataset
from .errors import ConfigurationError, InvalidInputError, TrainingError
from .wmcore import (LOG_FLOOR, WatermarkConfig, grad_watermarked_cross_entropy,
                     modified_softmax, softmax, watermarked_cross_entropy)

FORMAT_VERSION = 1
ARCHITECTURES = ("softmax", "mlp")
LOSSES = ("ce", "kl", "kl+ce")
OPTIMIZERS = ("sgd", "lbfgs")


@dataclass
class Model:
    architecture: str
    n: int
    m: int
    params: dict
    hidden_size: int = 0
    watermark: WatermarkConfig | None = None

    @classmethod
    def init(cls, architecture: str, n: int, m: int, hidden_size: int = 64,
             rng=None, init_scale: float = 1.0) -> "Model":
        if architecture not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {architecture!r}")
        rng = np.random.default_rng(rng)
        if architecture == "softmax":
            params = {"W": 0.01 * rng.standard_normal((n, m)), "b": np.zeros(m)}
            hidden_size = 0
        else:
            lim1 = init_scale * math.sqrt(6.0 / (n + hidden_size))
            lim2 = math.sqrt(6.0 / (hidden_size + m))
            params = {"W1": rng.uniform(-lim1, lim1, (n, hidden_size)),
                      "b1": np.zeros(hidden_size),
                      "W2": rng.uniform(-lim2, lim2, (hidden_size, m)),
                      "b2": np.zeros(m)}
        return cls(architecture, n, m, params, hidden_size)

    def copy(self) -> "Model":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def logits(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n:
            raise InvalidInputError(
                f"input dimension {x.shape[-1]} does not match model dimension {self.n}")
        p = self.params
        if self.architecture == "softmax":
            return x @ p["W"] + p["b"]
        return np.tanh(x @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]

    def _forward(self, x):
        p = self.params
        if self.architecture == "softmax":
            return x @ p["W"] + p["b"], None
        h = np.tanh(x @ p["W1"] + p["b1"])
        return h @ p["W2"] + p["b2"], h

    def _backward(self, x, h, dz):
        p = self.params
        if self.architecture == "softmax":
            return {"W": x.T @ dz, "b": dz.sum(axis=0)}
        dh = (dz @ p["W2"].T) * (1.0 - h * h)
        return {"W1": x.T @ dh, "b1": dh.sum(axis=0),
                "W2": h.T @ dz, "b2": dz.sum(axis=0)}

    # checkpoint --------------------------------------------------------
    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "architecture": self.architecture,
                "n": self.n, "m": self.m, "hidden_size": self.hidden_size,
                "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                           for k, v in self.params.items()},
                "watermark": None if self.watermark is None else self.watermark.to_dict()}

    @classmethod
    def from_dict(cls, rec: dict) -> "Model":
        if rec.get("format_version") != FORMAT_VERSION:
            raise InvalidInputError(
                f"unsupported checkpoint format_version {rec.get('format_version')!r}")
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in rec["params"].items()}
        wm = rec.get("watermark")
        return cls(rec["architecture"], int(rec["n"]), int(rec["m"]), params,
                   int(rec.get("hidden_size", 0)),
                   None if wm is None else WatermarkConfig.from_dict(wm))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "Model":
        return cls.from_dict(json.loads(Path(path).read_text()))


_MODEL_WM = object()


def predict(model: Model, x, wm=_MODEL_WM):
    """Probability outputs. Uses the model's own watermark unless ``wm`` is
    given explicitly (``wm=None`` returns the plain softmax)."""
    x = np.asarray(x, dtype=np.float64)
    q = softmax(model.logits(x))
    cfg = model.watermark if wm is _MODEL_WM else wm
    return q if cfg is None else modified_softmax(q, x, cfg)


@dataclass
class Ensemble:
    members: list

    def __post_init__(self):
        if not self.members:
            raise InvalidInputError("ensemble needs at least one member")
        shapes = {(mod.n, mod.m) for mod in self.members}
        if len(shapes) != 1:
            raise InvalidInputError("ensemble members disagree on (n, m)")

    def __len__(self):
        return len(self.members)

    @property
    def n(self):
        return self.members[0].n

    @property
    def m(self):
        return self.members[0].m


def ensemble_predict(ens: Ensemble, x):
    out = predict(ens.members[0], x)
    for mod in ens.members[1:]:
        out = out + predict(mod, x)
    return out / len(ens)


def accuracy(model, data: Dataset, wm=_MODEL_WM) -> float:
    """Argmax match rate. ``np.argmax`` breaks ties toward the lowest index."""
    if len(data) == 0:
        raise InvalidInputError("accuracy of an empty dataset")
    if isinstance(model, Ensemble):
        q = ensemble_predict(model, data.features)
    else:
        q = predict(model, data.features, wm)
    return float(np.mean(q.argmax(axis=1) == data.labels))


def kl_divergence(target, q):
    """Row-wise KL(target || q) with the log floor applied to both sides."""
    t = np.asarray(target, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return (t * (np.log(np.maximum(t, LOG_FLOOR)) - np.log(np.maximum(q, LOG_FLOOR)))).sum(axis=-1)


def grad_kl_logits(logits, target):
    """Gradient of KL(target || softmax(logits)) w.r.t. the logits."""
    return softmax(logits) - np.asarray(target, dtype=np.float64)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    loss: str = "ce"
    architecture: str = "softmax"
    hidden_size: int = 64
    init_scale: float = 1.0
    holdout: float = 0.1
    optimizer: str = "sgd"
    max_iter: int = 500

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.max_iter < 1:
            raise ConfigurationError("max_iter must be >= 1")
        if not 0 <= self.holdout < 1:
            raise ConfigurationError("holdout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _onehot(labels, m):
    y = np.zeros((labels.size, m))
    y[np.arange(labels.size), labels] = 1.0
    return y


def _holdout_split(L, frac, rng):
    perm = rng.permutation(L)
    k = int(round(frac * L)) if frac > 0 else 0
    if k == 0 or k == L:
        return perm, None
    return perm[k:], perm[:k]


def _sgd(model: Model, x, objective, cfg: TrainConfig, rng, score_fn):
    """Mini-batch SGD with momentum. ``objective(idx, z, xb)`` returns the
    per-row losses and ``dL/dz``; ``score_fn(model)`` returns (score, loss)
    on held-out data, higher score better."""
    vel = {k: np.zeros_like(v) for k, v in model.params.items()}
    best, best_score = model.copy(), -math.inf
    L = x.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(L)
        for start in range(0, L, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = x[idx]
            z, h = model._forward(xb)
            if not np.all(np.isfinite(z)):
                raise TrainingError(f"training diverged at epoch {epoch} (non-finite logits)",
                                    epoch=epoch)
            _, dz = objective(idx, z, xb)
            grads = model._backward(xb, h, dz / idx.size)
            for k, g in grads.items():
                vel[k] = cfg.momentum * vel[k] - cfg.learning_rate * g
                model.params[k] += vel[k]
        if not all(np.all(np.isfinite(v)) for v in model.params.values()):
            raise TrainingError(f"training diverged at epoch {epoch} (non-finite parameters)",
                                epoch=epoch)
        try:
            score, loss = score_fn(model)
        except InvalidInputError as exc:
            raise TrainingError(f"training diverged at epoch {epoch} ({exc})",
                                epoch=epoch) from exc
        if not math.isfinite(loss):
            raise TrainingError(f"training diverged at epoch {epoch} (loss={loss})", epoch=epoch)
        if score > best_score:
            best, best_score = model.copy(), score
    return best


def _lbfgs(model: Model, x, objective, cfg: TrainConfig):
    """Full-batch L-BFGS on the mean loss; returns the final iterate."""
    keys = list(model.params)
    shapes = [model.params[k].shape for k in keys]
    sizes = [int(np.prod(sh)) for sh in shapes]
    idx = np.arange(x.shape[0])

    def unpack(theta):
        out, o = {}, 0
        for k, sh, n in zip(keys, shapes, sizes):
            out[k] = theta[o:o + n].reshape(sh)
            o += n
        return out

    def fun(theta):
        model.params = unpack(theta)
        z, h = model._forward(x)
        if not np.all(np.isfinite(z)):
            # lets the line search back off
            return math.inf, np.zeros_like(theta)
        loss, dz = objective(idx, z, x)
        grads = model._backward(x, h, dz / x.shape[0])
        return float(loss.mean()), np.concatenate([grads[k].ravel() for k in keys])

    theta0 = np.concatenate([model.params[k].ravel() for k in keys])
    res = optimize.minimize(fun, theta0, jac=True, method="L-BFGS-B",
                            options={"maxiter": cfg.max_iter, "maxcor": 20})
    if not (np.isfinite(res.fun) and np.all(np.isfinite(res.x))):
        raise TrainingError(f"L-BFGS diverged after {res.nit} iterations", epoch=res.nit)
    model.params = {k: v.copy() for k, v in unpack(res.x).items()}
    return model


def train_teacher(data: Dataset, cfg: TrainConfig, wm: WatermarkConfig | None = None,
                  m: int | None = None) -> Model:
    """Train a classifier on labelled ``data``.

    With ``wm`` the loss is cross entropy on the watermarked output, and the
    returned model carries ``wm`` so that inference is watermarked too. The
    parameters from the epoch with the best accuracy on a held-out slice
    (``cfg.holdout``) of ``data`` are returned.
    """
    if data.labels is None:
        raise ConfigurationError("teacher training needs labelled data")
    if cfg.loss != "ce":
        raise ConfigurationError("teachers are trained with the 'ce' loss")
    m = m or data.m
    if data.labels.min() < 0 or data.labels.max() >= m:
        raise InvalidInputError("labels must lie in {0..m-1}")
    rng = np.random.default_rng(cfg.seed)
    model = Model.init(cfg.architecture, data.n, m, cfg.hidden_size, rng, cfg.init_scale)
    tr, ho = _holdout_split(len(data), cfg.holdout, rng)
    x, labels = data.features[tr], data.labels[tr]
    y = _onehot(labels, m)
    eval_x, eval_lab = (data.features[ho], data.labels[ho]) if ho is not None else (x, data.labels[tr])
    use_wm = wm is not None and wm.epsilon > 0

    def objective(idx, z, xb):
        q = softmax(z)
        if use_wm:
            loss = watermarked_cross_entropy(q, xb, y[idx], wm)
            return loss, grad_watermarked_cross_entropy(z, xb, y[idx], wm)
        loss = -np.log(np.maximum(q[np.arange(idx.size), labels[idx]], LOG_FLOOR))
        return loss, q - y[idx]

    def score_fn(mod):
        q = predict(mod, eval_x, wm)
        ce = -np.log(np.maximum(q[np.arange(eval_lab.size), eval_lab], LOG_FLOOR)).mean()
        return float(np.mean(q.argmax(axis=1) == eval_lab)), float(ce)

    if cfg.optimizer == "lbfgs":
        best = _lbfgs(model, x, objective, cfg)
    else:
        best = _sgd(model, x, objective, cfg, rng, score_fn)
    best.watermark = wm
    return best


def _distill_objective(target):
    # 0.5 KL(t||s) + 0.5 CE(y, s) has gradient s - (0.5 t + 0.5 y): the mixed
    # loss is a KL against the folded target up to an additive constant
    def objective(idx, z, xb):
        s = softmax(z)
        return kl_divergence(target[idx], s), s - target[idx]
    return objective


def distill(ens: Ensemble | Model, data: Dataset, cfg: TrainConfig) -> Model:
    """Distil a student from the averaged ensemble output on ``data``.

    ``cfg.loss`` is ``"kl"`` (KL(ensemble || student), temperature 1) or
    ``"kl+ce"`` (equal-weight KL and ground-truth cross entropy). With SGD
    the parameters with the lowest held-out loss are returned; L-BFGS fits
    all of ``data`` and returns the final iterate.
    """
    if isinstance(ens, Model):
        ens = Ensemble([ens])
    if cfg.loss == "ce":
        raise ConfigurationError("distillation uses the 'kl' or 'kl+ce' loss")
    if cfg.loss == "kl+ce" and data.labels is None:
        raise ConfigurationError("the kl+ce loss needs labelled student data")
    if data.n != ens.n:
        raise InvalidInputError(
            f"student data dimension {data.n} does not match ensemble dimension {ens.n}")
    rng = np.random.default_rng(cfg.seed)
    student = Model.init(cfg.architecture, ens.n, ens.m, cfg.hidden_size, rng, cfg.init_scale)
    target_all = ensemble_predict(ens, data.features)
    if cfg.loss == "kl+ce":
        target_all = 0.5 * target_all + 0.5 * _onehot(data.labels, ens.m)
    if cfg.optimizer == "lbfgs":
        return _lbfgs(student, data.features, _distill_objective(target_all), cfg)

    tr, ho = _holdout_split(len(data), cfg.holdout, rng)
    x, target = data.features[tr], target_all[tr]
    eval_x, eval_t = (data.features[ho], target_all[ho]) if ho is not None else (x, target)

    def score_fn(mod):
        loss = float(kl_divergence(eval_t, predict(mod, eval_x)).mean())
        return -loss, loss

    return _sgd(student, x, _distill_objective(target), cfg, rng, score_fn)


def train_independent(data: Dataset, cfg: TrainConfig) -> Model:
    """Ground-truth trained model, used as a negative in ranking tasks."""
    return train_teacher(data, replace(cfg, loss="ce"))
