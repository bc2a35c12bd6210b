"""Experiment configuration: YAML files with line-anchored validation."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .gmm import GaussianMixture, ModelError
from .learn import TrainConfig
from .ode import Schedule

METHOD_NAMES = ("flowedit", "invert_edit", "direct_path_edit", "sdedit")
SWEEP_AXES = ("n_max", "n_min", "n_avg", "c", "guidance_scale")
_SQRT_HALF = 15.0 / math.sqrt(2.0)


class ConfigError(ValueError):
    def __init__(self, message, path=None, line=None, field_name=None):
        self.message = message
        self.path = path
        self.line = line
        self.field_name = field_name
        super().__init__(self.format())

    def format(self):
        where = str(self.path) if self.path else "<config>"
        if self.line is not None:
            where += f":{self.line}"
        return f"{where}: {self.message}"


def figure3_mixtures():
    """Source/target mixtures of the 2-D pairing experiment (equal weights, unit covariance)."""
    src = GaussianMixture.isotropic([[-_SQRT_HALF, -_SQRT_HALF], [_SQRT_HALF, _SQRT_HALF]])
    tar = GaussianMixture.isotropic([[-15.0, 0.0], [0.0, 15.0]])
    return src, tar


def _default_dict():
    src, tar = figure3_mixtures()
    return {
        "source": src.to_dict(),
        "target": tar.to_dict(),
        "schedule": {"T": 50, "n_max": 50, "n_min": 0, "n_avg": 16, "c": 1.0},
        "methods": ["flowedit", "invert_edit", "sdedit"],
        "samples": 1000,
        "seeds": list(range(20)),
        "backend": "analytic",
        "guidance": {"scale": 1.0, "unconditional": "mixture"},
        "calibration": {"resamples": 200, "quantile": 99.0, "seed": 12345},
        "mc_samples": 4096,
        "gap_points": 100,
        "trajectories": False,
        "sweep": {"axis": "n_max", "values": None},
        "train": TrainConfig().to_dict(),
        "weights": None,
        "jobs": 1,
    }


PRESETS = {
    "figure3": {},
    # large-model editing default: T=50, n_max=33, single noise draw
    "sd3": {"schedule": {"T": 50, "n_max": 33, "n_min": 0, "n_avg": 1, "c": 1.0}},
}


@dataclass
class ExperimentConfig:
    source: GaussianMixture
    target: GaussianMixture
    schedule: Schedule
    methods: list
    samples: int
    seeds: list
    backend: str = "analytic"
    guidance_scale: float = 1.0
    unconditional: str = "mixture"
    calibration_resamples: int = 200
    calibration_quantile: float = 99.0
    calibration_seed: int = 12345
    mc_samples: int = 4096
    gap_points: int = 100
    trajectories: bool = False
    sweep_axis: str = "n_max"
    sweep_values: list | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: str | None = None
    jobs: int = 1
    out: str | None = None
    raw: dict = field(default_factory=dict, repr=False)

    def canonical(self) -> dict:
        data = copy.deepcopy(self.raw)
        data.pop("out", None)
        return data

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _line_index(text: str) -> dict:
    """Map dotted key paths to 1-based line numbers of a YAML document."""
    index = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                path = f"{prefix}.{key.value}" if prefix else str(key.value)
                index[path] = key.start_mark.line + 1
                walk(value, path)
        elif isinstance(node, yaml.SequenceNode):
            for j, item in enumerate(node.value):
                path = f"{prefix}[{j}]"
                index[path] = item.start_mark.line + 1
                walk(item, path)

    root = yaml.compose(text, Loader=yaml.SafeLoader)
    if root is not None:
        walk(root, "")
    return index


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=None, preset="figure3") -> ExperimentConfig:
    """Read a YAML config (or the built-in preset) and apply flag overrides.

    A config file must name both mixtures; everything else falls back to the
    preset defaults.
    """
    lines = {}
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}", field_name="preset")
    data = _merge(_default_dict(), PRESETS[preset])
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
        try:
            lines = _line_index(text)
            user = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", path,
                              mark.line + 1 if mark else None) from None
        if not isinstance(user, dict):
            raise ConfigError("top level must be a mapping", path, 1)
        for required in ("source", "target"):
            if required not in user:
                raise ConfigError(f"missing required field '{required}'", path, 1, required)
        unknown = sorted(set(user) - set(data) - {"out"})
        if unknown:
            raise ConfigError(f"unknown field '{unknown[0]}'", path, lines.get(unknown[0]), unknown[0])
        data = _merge(data, user)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return validate(data, path, lines)


def validate(data: dict, path=None, lines=None) -> ExperimentConfig:
    lines = lines or {}

    def fail(field_name, message):
        raise ConfigError(f"{field_name}: {message}", path, lines.get(field_name), field_name)

    mixtures = {}
    for name in ("source", "target"):
        spec = data.get(name)
        if not isinstance(spec, dict):
            fail(name, "must be a mixture mapping with 'dim' and 'components'")
        for key in ("dim", "components"):
            if key not in spec:
                fail(f"{name}.{key}", "missing required field")
        try:
            mixtures[name] = GaussianMixture.from_dict(spec)
        except ModelError as exc:
            fail(name, str(exc))
    if mixtures["source"].dim != mixtures["target"].dim:
        fail("target", "source and target dimensions differ")

    sch = data.get("schedule") or {}
    try:
        schedule = Schedule(
            T=int(sch.get("T", 50)),
            n_max=None if sch.get("n_max") is None else int(sch["n_max"]),
            n_min=int(sch.get("n_min", 0)),
            n_avg=int(sch.get("n_avg", 1)),
            step_scale_c=float(sch.get("c", 1.0)),
            timesteps=sch.get("timesteps"),
        )
    except (TypeError, ValueError) as exc:
        fail("schedule", str(exc))

    methods = data.get("methods")
    if isinstance(methods, str):
        methods = [m.strip() for m in methods.split(",") if m.strip()]
    if not methods or not isinstance(methods, list):
        fail("methods", "must be a nonempty list")
    for m in methods:
        if m not in METHOD_NAMES:
            fail("methods", f"unknown method {m!r} (choose from {', '.join(METHOD_NAMES)})")

    def positive_int(key, minimum=1):
        value = data.get(key)
        if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
            fail(key, f"must be an integer >= {minimum}")
        return value

    samples = positive_int("samples", 2)
    seeds = data.get("seeds")
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        fail("seeds", "must be a nonempty list of non-negative integers")
    if data.get("backend") not in ("analytic", "learned"):
        fail("backend", "must be 'analytic' or 'learned'")

    guidance = data.get("guidance") or {}
    scale = guidance.get("scale", 1.0)
    if not isinstance(scale, (int, float)) or scale < 0:
        fail("guidance.scale", "must be a non-negative number")
    if guidance.get("unconditional", "mixture") != "mixture":
        fail("guidance.unconditional", "only 'mixture' (50/50 source/target) is supported")

    cal = data.get("calibration") or {}
    resamples = cal.get("resamples", 200)
    if not isinstance(resamples, int) or resamples < 2:
        fail("calibration.resamples", "must be an integer >= 2")
    quantile = float(cal.get("quantile", 99.0))
    if not 0 < quantile < 100:
        fail("calibration.quantile", "must lie strictly between 0 and 100")

    mc = positive_int("mc_samples", 256)
    gap_points = positive_int("gap_points", 1)
    sweep = data.get("sweep") or {}
    axis = sweep.get("axis", "n_max")
    if axis not in SWEEP_AXES:
        fail("sweep.axis", f"must be one of {', '.join(SWEEP_AXES)}")
    values = sweep.get("values")
    if values is not None and (not isinstance(values, list) or not values):
        fail("sweep.values", "must be a nonempty list")

    try:
        train_cfg = TrainConfig(**(data.get("train") or {}))
    except (TypeError, ValueError) as exc:
        fail("train", str(exc))
    jobs = positive_int("jobs", 1)

    return ExperimentConfig(
        source=mixtures["source"],
        target=mixtures["target"],
        schedule=schedule,
        methods=list(methods),
        samples=samples,
        seeds=[int(s) for s in seeds],
        backend=data["backend"],
        guidance_scale=float(scale),
        calibration_resamples=resamples,
        calibration_quantile=quantile,
        calibration_seed=int(cal.get("seed", 12345)),
        mc_samples=mc,
        gap_points=gap_points,
        trajectories=bool(data.get("trajectories", False)),
        sweep_axis=axis,
        sweep_values=values,
        train=train_cfg,
        weights=data.get("weights"),
        jobs=jobs,
        out=data.get("out"),
        raw=data,
    )
