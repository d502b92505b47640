"""Experiment configuration: strict JSON in, dataclasses out.

Unknown keys are rejected, not ignored, and every complaint names the
offending field by its dotted path ("train.batch") so a typo in a config
file fails loudly instead of silently training with a default.
"""

import json
from dataclasses import dataclass, field

from .flows import build_flow
from .problems import PROBLEM_NAMES, builtin
from .residual import LossWeights
from .training import CountSchedule, TimeGridSpec, TrainConfig

_MISSING = object()


class ConfigError(ValueError):
    """Invalid configuration; `path` is the dotted field path."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class _Section:
    """One JSON object being consumed key by key."""

    def __init__(self, doc, path):
        if not isinstance(doc, dict):
            raise ConfigError(path or "<root>", "must be a JSON object")
        self.doc = doc
        self.path = path
        self.seen = set()

    def _at(self, key):
        return f"{self.path}.{key}" if self.path else key

    def get(self, key, kind, default=_MISSING):
        self.seen.add(key)
        if key not in self.doc:
            if default is _MISSING:
                raise ConfigError(self._at(key), "is required")
            return default
        return _coerce(self.doc[key], kind, self._at(key))

    def sub(self, key):
        """Child object, or None if absent."""
        self.seen.add(key)
        if key not in self.doc:
            return None
        return _Section(self.doc[key], self._at(key))

    def finish(self):
        unknown = sorted(set(self.doc) - self.seen)
        if unknown:
            raise ConfigError(self._at(unknown[0]), "is not a recognized field")


def _coerce(value, kind, path):
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"must be an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"must be a number, got {value!r}")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"must be true or false, got {value!r}")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"must be a string, got {value!r}")
        return value
    if kind == "floats":
        if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(path, f"must be a list of numbers, got {value!r}")
        return tuple(float(v) for v in value)
    raise AssertionError(kind)


@dataclass(frozen=True)
class FlowSpec:
    depth: int = 6
    hidden: int = 32
    scale_bound: float = 0.6
    tail_slope: float = 1e-6
    spline: bool = False
    spline_range: float = 5.0
    bins: int = 32

    def build(self, d, rng):
        return build_flow(
            d,
            self.depth,
            hidden=self.hidden,
            scale_bound=self.scale_bound,
            tail_slope=self.tail_slope,
            spline=self.spline,
            spline_range=self.spline_range,
            bins=self.bins,
            rng=rng,
        )


@dataclass(frozen=True)
class EvalSpec:
    grid_n: int = 201
    n_v: int = 100_000
    n_mc: int = 4096
    times: tuple = ()  # empty: use 0, horizon/2, horizon
    ref_dh: float = 0.05  # mesh for the finite-difference reference,
    ref_dt: float = 0.005  # used only when the problem has no closed form

    def resolved_times(self, horizon):
        if self.times:
            return tuple(self.times)
        return (0.0, horizon / 2.0, float(horizon))


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    dim: int | None = None
    seed: int = 0
    flow: FlowSpec = field(default_factory=FlowSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)

    def make_problem(self):
        return builtin(self.problem, dim=self.dim)

    def make_flow(self, d, rng):
        return self.flow.build(d, rng)


def _parse_time_grid(sec):
    if sec is None:
        return TimeGridSpec("uniform", n=20)
    kind = sec.get("kind", "str")
    if kind == "piecewise":
        raw = sec.doc.get("segments")
        sec.seen.add("segments")
        if not isinstance(raw, list) or not raw:
            raise ConfigError(sec._at("segments"), "must be a non-empty list")
        segments = []
        for i, seg in enumerate(raw):
            if (
                not isinstance(seg, list)
                or len(seg) != 3
                or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in seg)
            ):
                raise ConfigError(
                    sec._at("segments"), f"entry {i} must be [t_lo, t_hi, n_nodes]"
                )
            segments.append((float(seg[0]), float(seg[1]), int(seg[2])))
        sec.finish()
        return TimeGridSpec("piecewise", segments=tuple(segments))
    n = sec.get("n", "int")
    ratio = sec.get("ratio", "float", 0.0)
    sec.finish()
    try:
        return TimeGridSpec(kind, n=n, ratio=ratio)
    except ValueError as exc:
        raise ConfigError(sec.path, str(exc)) from exc


def _parse_counts(sec):
    if sec is None:
        return CountSchedule()
    kind = sec.get("kind", "str", "constant")
    base = sec.get("base", "int")
    period = sec.get("period", "int", 20)
    sec.finish()
    try:
        return CountSchedule(kind, base=base, period=period)
    except ValueError as exc:
        raise ConfigError(sec.path, str(exc)) from exc


def _parse_train(sec, seed):
    if sec is None:
        raise ConfigError("train", "is required")
    weights_sec = sec.sub("weights")
    if weights_sec is None:
        weights = LossWeights()
    else:
        weights = LossWeights(
            residual=weights_sec.get("residual", "float", 1.0),
            init_cond=weights_sec.get("init_cond", "float", 1.0),
        )
        weights_sec.finish()
    kw = dict(
        epochs=sec.get("epochs", "int"),
        epoch_growth=sec.get("epoch_growth", "float", 2.0),
        rounds=sec.get("rounds", "int"),
        batch=sec.get("batch", "int"),
        lr=sec.get("lr", "float", 1e-3),
        eps_loss=sec.get("eps_loss", "float", 1e-5),
        eps_delta=sec.get("eps_delta", "float", 1e-7),
        n_ic=sec.get("n_ic", "int", 1000),
        time_grid=_parse_time_grid(sec.sub("time_grid")),
        counts=_parse_counts(sec.sub("counts")),
        weights=weights,
        seed=seed,
    )
    sec.finish()
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        msg = str(exc)
        named = next(
            (f for f in ("epoch_growth", "epochs", "rounds", "batch", "eps_loss", "lr", "n_ic")
             if f in msg),
            None,
        )
        raise ConfigError(f"train.{named}" if named else "train", msg) from exc


def _parse_flow(sec):
    if sec is None:
        return FlowSpec()
    kw = dict(
        depth=sec.get("depth", "int", 6),
        hidden=sec.get("hidden", "int", 32),
        scale_bound=sec.get("scale_bound", "float", 0.6),
        tail_slope=sec.get("tail_slope", "float", 1e-6),
        spline=sec.get("spline", "bool", False),
        spline_range=sec.get("spline_range", "float", 5.0),
        bins=sec.get("bins", "int", 32),
    )
    sec.finish()
    if kw["depth"] < 1:
        raise ConfigError("flow.depth", "must be >= 1")
    if kw["hidden"] < 1:
        raise ConfigError("flow.hidden", "must be >= 1")
    return FlowSpec(**kw)


def _parse_eval(sec):
    if sec is None:
        return EvalSpec()
    kw = dict(
        grid_n=sec.get("grid_n", "int", 201),
        n_v=sec.get("n_v", "int", 100_000),
        n_mc=sec.get("n_mc", "int", 4096),
        times=sec.get("times", "floats", ()),
        ref_dh=sec.get("ref_dh", "float", 0.05),
        ref_dt=sec.get("ref_dt", "float", 0.005),
    )
    sec.finish()
    for name in ("grid_n", "n_v", "n_mc"):
        if kw[name] < 1:
            raise ConfigError(f"eval.{name}", "must be >= 1")
    for name in ("ref_dh", "ref_dt"):
        if not kw[name] > 0:
            raise ConfigError(f"eval.{name}", "must be positive")
    return EvalSpec(**kw)


def parse_config(doc):
    """Validate a parsed JSON document and build the experiment config."""
    root = _Section(doc, "")
    root.seen.add("desk_scale")  # handled by apply_desk_scale, legal to carry
    problem = root.get("problem", "str")
    if problem not in PROBLEM_NAMES:
        raise ConfigError("problem", f"unknown problem {problem!r}; choose from {sorted(PROBLEM_NAMES)}")
    dim = root.get("dim", "int", None)
    seed = root.get("seed", "int", 0)
    cfg = ExperimentConfig(
        problem=problem,
        dim=dim,
        seed=seed,
        flow=_parse_flow(root.sub("flow")),
        train=_parse_train(root.sub("train"), seed),
        eval=_parse_eval(root.sub("eval")),
    )
    root.finish()
    try:
        cfg.make_problem()
    except (ValueError, KeyError) as exc:
        raise ConfigError("problem", str(exc)) from exc
    return cfg


def apply_desk_scale(doc):
    """Merge the desk_scale override block into the document.

    Returns (merged copy, notes). Every overridden leaf is reported so a
    scaled-down run can never be mistaken for the full experiment.
    """
    overrides = doc.get("desk_scale")
    if overrides is None:
        return doc, []
    if not isinstance(overrides, dict):
        raise ConfigError("desk_scale", "must be a JSON object")
    merged = json.loads(json.dumps(doc))
    del merged["desk_scale"]
    notes = []

    def walk(dst, src, path):
        for key, val in src.items():
            at = f"{path}.{key}" if path else key
            if key == "desk_scale":
                raise ConfigError(f"desk_scale.{at}", "cannot nest desk_scale")
            if isinstance(val, dict):
                node = dst.setdefault(key, {})
                if not isinstance(node, dict):
                    raise ConfigError(f"desk_scale.{at}", "overrides a non-object field with an object")
                walk(node, val, at)
            else:
                old = dst.get(key, "(default)")
                dst[key] = val
                notes.append(f"desk_scale: {at} = {val!r} (was {old!r})")

    walk(merged, overrides, "")
    return merged, notes


def load_config(path, desk_scale=False):
    """Read a JSON config file. Returns (ExperimentConfig, adjustment notes)."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"not valid JSON: {exc}") from exc
    notes = []
    if desk_scale:
        doc, notes = apply_desk_scale(doc)
    return parse_config(doc), notes
