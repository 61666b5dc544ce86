"""Experiment configuration: TOML files, built-in presets, validation.

A config is a nested table.  Every leaf has a default (from the preset when
one is named, otherwise from ``BASE``); a file or CLI override replaces it.
``ExperimentConfig.provenance`` records where each leaf came from.
"""

import copy
import sys
from dataclasses import dataclass, field

from .io_utils import stable_hash
from .problems import PROBLEMS, ProblemSpec, get_problem

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Raised with a list of ``(path, message)`` problems."""

    def __init__(self, problems):
        self.problems = list(problems)
        lines = [f"  {p}: {m}" for p, m in self.problems]
        super().__init__("invalid experiment config:\n" + "\n".join(lines))


BASE = {
    "preset": None,
    "seed": None,
    "out": "runs/default",
    "problem": {},
    "counts": {"N_int": 10000, "N_sb": 256, "N_tb": 512},
    "network": {"hidden": [128, 128]},
    "weighting": {"mode": "rae", "k_int": 50, "beta": 0.1, "stride": 1},
    "gammas": {"int": 1.0, "tb": 100.0, "sb": 1.0},
    "optimizer": {
        "adam_iters": 30000, "lbfgs_iters": 1000, "lr": 1e-3,
        "decay_rate": 1.0, "decay_every": 5000,
        "adam_beta1": 0.9, "adam_beta2": 0.999, "adam_eps": 1e-8,
        "lbfgs_memory": 10, "early_stop_tol": 1e-7, "early_stop_phase": "lbfgs",
    },
    "reference": {"n": 512, "dt": 1e-4, "snapshots": 101, "path": ""},
    "logging": {"log_every": 100, "checkpoint_every": 5000, "eval_stride": 2,
                "eval_time_stride": 1, "weight_dump_every": 0},
}

PRESETS = {
    "ac1d_i1": {},
    "ac1d_i2": {},
    "ac2d": {
        "counts": {"N_int": 25600, "N_sb": 512, "N_tb": 1024},
        "gammas": {"int": 1.0, "tb": 100.0, "sb": 1.0},
        "optimizer": {"adam_iters": 100000, "lbfgs_iters": 0, "decay_rate": 0.9, "decay_every": 5000},
        "reference": {"n": 128, "dt": 5e-4, "snapshots": 51},
        "logging": {"eval_stride": 4, "eval_time_stride": 1},
    },
    "ch1d": {
        "network": {"hidden": [256, 256]},
        "gammas": {"int": 1.0, "tb": 100.0, "sb": 1.0},
        "optimizer": {"adam_iters": 5000, "lbfgs_iters": 1000},
        "reference": {"n": 512, "dt": 1e-4, "snapshots": 101},
    },
    "ch2d": {
        "gammas": {"int": 1.0, "tb": 100.0, "sb": 100.0},
        "optimizer": {"adam_iters": 50000, "lbfgs_iters": 10000, "decay_rate": 0.95, "decay_every": 5000},
        "reference": {"n": 256, "dt": 2e-6, "snapshots": 101},
        "logging": {"eval_stride": 8},
    },
}

REQUIRED = ("preset or problem.name", "seed")
CHOICES = {
    ("weighting", "mode"): ("rae", "vanilla"),
    ("optimizer", "early_stop_phase"): ("lbfgs", "all", "none"),
}
PROBLEM_FIELDS = set(ProblemSpec.__dataclass_fields__)


def _merge(base, over, prov, source, path=()):
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict) and k != "problem":
            _merge(base[k], v, prov, source, path + (k,))
        else:
            base[k] = copy.deepcopy(v)
            _mark(prov, path + (k,), v, source)


def _mark(prov, path, v, source):
    if isinstance(v, dict):
        for k, vv in v.items():
            _mark(prov, path + (k,), vv, source)
    else:
        prov[".".join(path)] = source


def _unknown_keys(tree, schema, path=()):
    out = []
    for k, v in tree.items():
        p = path + (k,)
        if k not in schema:
            out.append((".".join(p), "unknown key"))
        elif isinstance(schema[k], dict) and k != "problem":
            if not isinstance(v, dict):
                out.append((".".join(p), "expected a table"))
            else:
                out.extend(_unknown_keys(v, schema[k], p))
    return out


@dataclass
class ExperimentConfig:
    tree: dict
    problem: ProblemSpec
    provenance: dict = field(default_factory=dict)

    def __getitem__(self, k):
        return self.tree[k]

    @property
    def seed(self):
        return self.tree["seed"]

    @property
    def out(self):
        return self.tree["out"]

    def to_dict(self):
        d = copy.deepcopy(self.tree)
        d["problem"] = self.problem.to_dict()
        return d

    @property
    def hash(self):
        """Hash of everything that affects results (output path excluded)."""
        d = self.to_dict()
        d.pop("out", None)
        d.get("reference", {}).pop("path", None)
        return stable_hash(d)


def build_config(tree, overrides=None):
    """Validate a parsed key-value tree (plus CLI overrides) into an ExperimentConfig."""
    tree = dict(tree or {})
    overrides = overrides or {}
    problems = _unknown_keys(tree, BASE) + _unknown_keys(overrides, BASE)
    if problems:
        raise ConfigError(problems)
    preset = overrides.get("preset", tree.get("preset"))
    pname = (tree.get("problem") or {}).get("name") if isinstance(tree.get("problem"), dict) else None
    missing = []
    if preset is None and pname is None:
        missing.append((REQUIRED[0], "missing required field"))
    if overrides.get("seed", tree.get("seed")) is None:
        missing.append((REQUIRED[1], "missing required field (seeds are never time-based)"))
    if missing:
        raise ConfigError(missing)
    if preset is not None and preset not in PRESETS:
        raise ConfigError([("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")])

    merged = copy.deepcopy(BASE)
    prov = {}
    _mark(prov, (), BASE, "default")
    if preset is not None:
        _merge(merged, PRESETS[preset], prov, "preset")
    _merge(merged, tree, prov, "file")
    _merge(merged, overrides, prov, "override")
    merged["preset"] = preset

    # problem: preset/name plus field overrides
    ptab = dict(merged.get("problem") or {})
    name = ptab.pop("name", None) or preset
    bad = [k for k in ptab if k not in PROBLEM_FIELDS]
    if bad:
        raise ConfigError([(f"problem.{k}", "unknown problem field") for k in bad])
    try:
        if name in PROBLEMS:
            base = get_problem(name).to_dict()
            base.update(ptab)
            spec = ProblemSpec.from_dict(base)
        else:
            spec = ProblemSpec.from_dict({"name": name, **ptab})
    except (TypeError, ValueError) as exc:
        raise ConfigError([("problem", str(exc))]) from None
    merged["problem"] = {"name": spec.name}
    errs = _validate(merged)
    if errs:
        raise ConfigError(errs)
    return ExperimentConfig(merged, spec, prov)


def _validate(c):
    errs = []

    def pos_int(path, v, allow_zero=False):
        if not isinstance(v, int) or isinstance(v, bool) or v < (0 if allow_zero else 1):
            errs.append((path, f"expected {'non-negative' if allow_zero else 'positive'} integer, got {v!r}"))

    def pos_real(path, v):
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
            errs.append((path, f"expected positive number, got {v!r}"))

    if not isinstance(c["seed"], int) or isinstance(c["seed"], bool) or c["seed"] < 0:
        errs.append(("seed", f"expected non-negative integer, got {c['seed']!r}"))
    for k in ("N_int", "N_sb", "N_tb"):
        pos_int(f"counts.{k}", c["counts"][k])
    h = c["network"]["hidden"]
    if not isinstance(h, list) or not h or any(not isinstance(w, int) or w < 1 for w in h):
        errs.append(("network.hidden", "expected a non-empty list of positive integers"))
    w = c["weighting"]
    pos_int("weighting.k_int", w["k_int"])
    pos_int("weighting.stride", w["stride"])
    if not isinstance(w["beta"], (int, float)) or not 0 < w["beta"] <= 1:
        errs.append(("weighting.beta", "must lie in (0, 1]"))
    if isinstance(w["k_int"], int) and isinstance(c["counts"]["N_int"], int) and w["k_int"] > c["counts"]["N_int"]:
        errs.append(("weighting.k_int", "larger than counts.N_int"))
    for k in ("int", "tb", "sb"):
        g = c["gammas"][k]
        if not isinstance(g, (int, float)) or g < 0:
            errs.append((f"gammas.{k}", "expected a non-negative number"))
    o = c["optimizer"]
    pos_int("optimizer.adam_iters", o["adam_iters"], allow_zero=True)
    pos_int("optimizer.lbfgs_iters", o["lbfgs_iters"], allow_zero=True)
    pos_int("optimizer.decay_every", o["decay_every"])
    pos_int("optimizer.lbfgs_memory", o["lbfgs_memory"])
    for k in ("lr", "decay_rate", "adam_eps"):
        pos_real(f"optimizer.{k}", o[k])
    if not isinstance(o["early_stop_tol"], (int, float)) or o["early_stop_tol"] < 0:
        errs.append(("optimizer.early_stop_tol", "expected a non-negative number"))
    r = c["reference"]
    if not isinstance(r["n"], int) or r["n"] < 4 or r["n"] & (r["n"] - 1):
        errs.append(("reference.n", "must be a power of two >= 4"))
    pos_real("reference.dt", r["dt"])
    pos_int("reference.snapshots", r["snapshots"])
    if isinstance(r["snapshots"], int) and r["snapshots"] < 2:
        errs.append(("reference.snapshots", "need at least 2 snapshots"))
    lg = c["logging"]
    for k in ("log_every", "checkpoint_every", "eval_stride", "eval_time_stride"):
        pos_int(f"logging.{k}", lg[k])
    pos_int("logging.weight_dump_every", lg["weight_dump_every"], allow_zero=True)
    for (sec, key), allowed in CHOICES.items():
        if c[sec][key] not in allowed:
            errs.append((f"{sec}.{key}", f"must be one of {allowed}"))
    return errs


def load_config(path=None, overrides=None):
    tree = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                tree = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError([(str(path), "config file not found")]) from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([(str(path), f"not valid TOML: {exc}")]) from None
    return build_config(tree, overrides)
