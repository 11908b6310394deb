"""``spectral-wm`` command line: config-driven runs of the whole pipeline.

Every subcommand reads an optional JSON config (``--config``), writes its
artifacts into an output directory together with ``manifest.json`` and exits
with 0 on success, 1 on invalid input or configuration and 2 on runtime
failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .datagen import Dataset, make_blobs, split
from .errors import BoundViolationError, ConfigurationError, InvalidInputError
from .harness import (DESK_FILTER, ExperimentParams, average_precision, run_mixed_loss_experiment,
                      run_multi_watermark_experiment, run_single_watermark_experiment,
                      sweep_amplitude, sweep_frequency, verify_bound)
from .nnet import Ensemble, Model, TrainConfig, accuracy, distill, predict, train_teacher
from .spectrum import DEFAULT_GRID_SIZE, DEFAULT_WINDOW_BINS, FilterPolicy, extract_signal
from .wmcore import WatermarkConfig, WatermarkKey

OUT_ENV = "SPECTRAL_WM_OUT"
log = logging.getLogger("spectral_watermark")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Config:
    """Dotted-path access into a JSON record with field-addressed errors."""

    _MISSING = object()

    def __init__(self, data: dict, prefix: str = ""):
        if not isinstance(data, dict):
            raise ConfigurationError(f"config{' field ' + repr(prefix) if prefix else ''}: "
                                     "expected an object")
        self.data = data
        self.prefix = prefix

    def _name(self, key):
        return f"{self.prefix}.{key}" if self.prefix else key

    def get(self, key, kind=None, default=_MISSING):
        if key not in self.data:
            if default is self._MISSING:
                raise ConfigurationError(f"config field {self._name(key)!r}: missing")
            return default
        value = self.data[key]
        if kind is not None and value is not None:
            ok = (isinstance(value, kind) and not (kind in (int, float) and isinstance(value, bool))
                  if kind is not float else isinstance(value, (int, float))
                  and not isinstance(value, bool))
            if not ok:
                raise ConfigurationError(
                    f"config field {self._name(key)!r}: expected {kind.__name__}, "
                    f"got {type(value).__name__}")
        return value

    def sub(self, key, default=_MISSING):
        value = self.get(key, dict, default)
        return None if value is None else _Config(value, self._name(key))


def load_config(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") \
            from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: line 1: top level must be an object")
    return data


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_manifest(out: Path, command: str, config: dict, seed) -> dict:
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": hashlib.sha256(_canonical(config).encode()).hexdigest(),
        "seed": seed,
        "versions": {"spectral_watermark": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _train_config(c: _Config | None, seed, base: TrainConfig | None = None) -> TrainConfig:
    rec = {} if c is None else dict(c.data)
    names = {f.name for f in fields(TrainConfig)}
    unknown = set(rec) - names
    if unknown:
        raise ConfigurationError(
            f"config field {c._name(sorted(unknown)[0])!r}: unknown training option")
    cfg = replace(base or TrainConfig(), **rec)
    return cfg if seed is None else replace(cfg, seed=seed)


def _filter(c: _Config | None) -> FilterPolicy:
    if c is None:
        return DESK_FILTER
    try:
        return FilterPolicy(**c.data)
    except TypeError as exc:
        raise ConfigurationError(f"config field {c.prefix!r}: {exc}") from None


def _reference(mode, queries: Dataset, outputs, key: WatermarkKey):
    if mode == "auto":
        mode = "label" if queries.labels is not None else "argmax"
    if mode == "all":
        return None
    if mode == "label":
        if queries.labels is None:
            raise ConfigurationError("config field 'reference': 'label' needs labelled queries")
        return queries.labels == key.target_class
    if mode == "argmax":
        return outputs.argmax(axis=1) == key.target_class
    raise ConfigurationError(f"config field 'reference': unknown mode {mode!r}")


def _check_dim(model: Model, data: Dataset, what: str):
    if data.n != model.n:
        raise InvalidInputError(
            f"{what} has dimension {data.n} but the model expects {model.n}")


# --------------------------------------------------------------------------
# commands; each returns the effective config and the seed it used

def cmd_make_data(cfg: _Config, args, out: Path):
    seed = args.seed if args.seed is not None else cfg.get("seed", int, 0)
    ds = make_blobs(cfg.get("m", int, 10), cfg.get("n", int, 32),
                    cfg.get("per_class", int, 1000), cfg.get("spread", float, 0.12), seed)
    parts = split(ds, tuple(cfg.get("fractions", list, [0.45, 0.45, 0.1])), seed)
    for part in parts:
        part.save(out / f"{part.split_tag}.csv")
    return seed


def cmd_keygen(cfg: _Config, args, out: Path):
    seed = args.seed if args.seed is not None else cfg.get("seed", int, 0)
    n = args.n if args.n is not None else cfg.get("n", int, 32)
    f = args.frequency if args.frequency is not None else cfg.get("frequency", float, 30.0)
    i = args.target_class if args.target_class is not None else cfg.get("target_class", int, 0)
    if n < 2:
        raise InvalidInputError("key dimension must be at least 2")
    key = WatermarkKey.random(n, f, i, np.random.default_rng(seed))
    key.save(out / "key.json")
    return seed


def cmd_train(cfg: _Config, args, out: Path):
    data = Dataset.load(cfg.get("data", str))
    tc = _train_config(cfg.sub("train", None), args.seed)
    wm = None
    wsec = cfg.sub("watermark", None)
    if wsec is not None:
        key = WatermarkKey.load(wsec.get("key", str))
        wm = WatermarkConfig(key, wsec.get("epsilon", float))
        if key.dim != data.n:
            raise InvalidInputError(f"key dimension {key.dim} does not match data dimension {data.n}")
    model = train_teacher(data, tc, wm, m=cfg.get("m", int, None))
    model.save(out / "model.json")
    report = {"train_accuracy": accuracy(model, data)}
    test = cfg.get("test", str, None)
    if test:
        report["test_accuracy"] = accuracy(model, Dataset.load(test))
        report["test_accuracy_unwatermarked"] = accuracy(model, Dataset.load(test), None)
    (out / "train_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return tc.seed


def cmd_distill(cfg: _Config, args, out: Path):
    teachers = [Model.load(p) for p in cfg.get("teachers", list)]
    data = Dataset.load(cfg.get("data", str))
    base = TrainConfig(loss="kl", architecture="mlp", hidden_size=256, optimizer="lbfgs")
    tc = _train_config(cfg.sub("train", None), args.seed, base)
    if tc.loss != "kl+ce":
        data = data.unlabeled()
    student = distill(Ensemble(teachers), data, tc)
    student.save(out / "model.json")
    return tc.seed


def _score_model(model, queries, key, cfg: _Config):
    _check_dim(model, queries, "query data")
    if key.dim != model.n:
        raise InvalidInputError(f"key dimension {key.dim} does not match model dimension {model.n}")
    outputs = predict(model, queries.features)
    ref = _reference(cfg.get("reference", str, "auto"), queries, outputs, key)
    return extract_signal(outputs, queries.features, key, _filter(cfg.sub("filter", None)),
                          delta=cfg.get("delta", float, None),
                          max_frequency=cfg.get("max_frequency", float, None),
                          grid_size=cfg.get("grid_size", int, DEFAULT_GRID_SIZE),
                          reference=ref,
                          window_bins=cfg.get("window_bins", int, DEFAULT_WINDOW_BINS))


def cmd_extract(cfg: _Config, args, out: Path):
    model = Model.load(cfg.get("model", str))
    queries = Dataset.load(cfg.get("queries", str))
    key = WatermarkKey.load(cfg.get("key", str))
    rep = _score_model(model, queries, key, cfg)
    rep.to_json(out / "snr.json")
    rep.periodogram.to_csv(out / "periodogram.csv")
    print(f"p_snr = {rep.to_dict()['p_snr']}")
    return None


def cmd_rank(cfg: _Config, args, out: Path):
    queries = Dataset.load(cfg.get("queries", str))
    key = WatermarkKey.load(cfg.get("key", str))
    entries = cfg.get("models", list)
    ids, pos, scores = [], [], []
    for k, entry in enumerate(entries):
        e = _Config(entry, f"models[{k}]")
        rep = _score_model(Model.load(e.get("path", str)), queries, key, cfg)
        ids.append(e.get("id", str, f"m{k:03d}"))
        pos.append(bool(e.get("positive", bool, False)))
        scores.append(1e300 if rep.infinite else rep.p_snr)
    lines = ["student_id,is_positive,p_snr"]
    lines += [f"{i},{int(p)},{repr(float(s))}" for i, p, s in zip(ids, pos, scores)]
    (out / "ranking.csv").write_text("\n".join(lines) + "\n")
    summary = {"ap": average_precision(scores, pos) if any(pos) else None,
               "positives": sum(pos), "total": len(pos)}
    (out / "rank.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if summary["ap"] is not None:
        print(f"AP = {summary['ap']:.6f}")
    return None


def cmd_verify_bound(cfg: _Config, args, out: Path):
    teacher = Model.load(cfg.get("teacher", str))
    others = [Model.load(p) for p in cfg.get("others", list, [])]
    student = Model.load(cfg.get("student", str))
    queries = Dataset.load(cfg.get("queries", str))
    _check_dim(student, queries, "query data")
    key = WatermarkKey.load(cfg["key"]) if "key" in cfg.data else None
    key = key or (teacher.watermark.key if teacher.watermark else None)
    if key is None:
        raise ConfigurationError("config field 'key': missing and the teacher carries no watermark")
    freqs = cfg.get("frequencies", list, None)
    if freqs is None:
        freqs = [key.frequency * r for r in cfg.get("multiples", list, [1.0, 0.5, 2.0])]
    fsec = cfg.sub("filter", None)
    policy = None if fsec is None else _filter(fsec)
    ref = None
    if policy is not None:
        ref = _reference(cfg.get("reference", str, "auto"), queries,
                         predict(student, queries.features), key)
    check = cfg.get("check", str, "stated")
    if check not in ("stated", "corrected", "none"):
        raise ConfigurationError("config field 'check': expected 'stated', 'corrected' or 'none'")
    reports = [verify_bound(teacher, others, student, queries.features, float(f), key,
                            policy, ref, check=None) for f in freqs]
    cols = ["frequency", "n_teachers", "samples", "chi0_D", "chif_D", "tau1", "tau2", "l_se",
            "lower", "upper", "p_d", "lower_corrected", "upper_corrected", "holds",
            "holds_corrected"]
    lines = [",".join(cols)]
    for r in reports:
        d = r.to_dict()
        lines.append(",".join(str(int(d[c])) if isinstance(d[c], bool) else repr(d[c])
                              for c in cols))
    (out / "bounds.csv").write_text("\n".join(lines) + "\n")
    bad = [r for r in reports if (check == "stated" and not r.holds)
           or (check == "corrected" and not r.holds_corrected)]
    if bad:
        raise BoundViolationError(
            f"{len(bad)} of {len(reports)} frequencies violate the {check} bounds "
            f"(first at f={bad[0].frequency:.6g}); see bounds.csv")
    return None


def cmd_sweep(cfg: _Config, args, out: Path):
    kind = cfg.get("kind", str, "single")
    rec = dict(cfg.get("params", dict, {}))
    if args.seed is not None:
        rec["seed"] = args.seed
    if args.jobs is not None:
        rec["jobs"] = args.jobs
    params = ExperimentParams.from_dict(rec)
    if kind == "single":
        run_single_watermark_experiment(params, out)
    elif kind == "multi":
        run_multi_watermark_experiment(params, out)
    elif kind == "mixed":
        run_mixed_loss_experiment(params, out)
    elif kind == "amplitude":
        sweep_amplitude(params.epsilons, params.ensemble_sizes, params, out)
    elif kind == "frequency":
        sweep_frequency(cfg.get("frequencies", list, [0.01, 1.0, 30.0, 100.0, 1e4, 1e6, 1e8]),
                        params.ensemble_sizes, params, out,
                        scale_to_data=cfg.get("scale_to_data", bool, True),
                        epsilon=params.epsilons[0])
    else:
        raise ConfigurationError(f"config field 'kind': unknown sweep kind {kind!r}")
    return params.seed


COMMANDS = {
    "make-data": (cmd_make_data, "generate blob data and write teacher/student/test CSVs"),
    "keygen": (cmd_keygen, "draw a random watermark key"),
    "train": (cmd_train, "train a (possibly watermarked) teacher"),
    "distill": (cmd_distill, "distil a student from an ensemble of checkpoints"),
    "extract": (cmd_extract, "score a model's outputs against a key"),
    "rank": (cmd_rank, "rank several models by signal strength"),
    "verify-bound": (cmd_verify_bound, "evaluate the periodogram bounds for a student"),
    "sweep": (cmd_sweep, "run a harness experiment or sweep"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectral-wm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/{name} or runs/{name})")
        p.add_argument("--jobs", type=int, help="worker processes for sweeps (default 1)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "keygen":
            p.add_argument("--n", type=int)
            p.add_argument("--frequency", type=float)
            p.add_argument("--target-class", type=int)
    return parser


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ENV)
    return Path(root or "runs") / args.command


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn = COMMANDS[args.command][0]
    try:
        if args.jobs is not None and args.jobs < 1:
            raise ConfigurationError("--jobs must be at least 1")
        raw = load_config(args.config)
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        seed = fn(_Config(raw), args, out)
        effective = dict(raw)
        if args.seed is not None:
            effective["seed"] = args.seed
        write_manifest(out, args.command, effective, seed if seed is not None else args.seed)
    except (ValueError, OSError, KeyError) as exc:
        # package validation errors subclass ValueError; OSError covers
        # missing inputs and unwritable outputs
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - training failures, bound violations
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
