"""``key = value`` experiment configuration with dotted namespaces.

Example::

    seed = 0
    targets = dark, pale
    target.dark.bias = -0.05, -0.05, -0.05
    target.pale.gain = 1.1, 1.1, 1.1
    adapt.rho = 0.15
    adapt.m = static

Anything not given falls back to the standard debias benchmark.  Unknown keys
are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .adapt import AdaptConfig, SourceConfig
from .synthbench import DomainSpec, SplitCounts


class ConfigError(ValueError):
    pass


def _floats(v):
    return tuple(float(x) for x in v.split(","))


def _ints(v):
    return tuple(int(x) for x in v.split(","))


def _bool(v):
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _period(v):
    return None if v.strip().lower() in ("static", "inf", "none") else int(v)


def _names(v):
    return tuple(x.strip() for x in v.split(",") if x.strip())


DOMAIN_KEYS = {
    "gain": _floats,
    "bias": _floats,
    "texture_freq": float,
    "blob_scale": float,
    "class_prior": _floats,
    "noise_sigma": float,
    "seed": int,
    "height": int,
    "width": int,
    "counts": _ints,
}
MODEL_KEYS = {"d": int, "n_f": int, "ksize": int, "smooth": int, "seed": int}
SOURCE_TRAIN_KEYS = {f.name: (int if f.type in ("int",) else float) for f in fields(SourceConfig)}
ADAPT_KEYS = {
    "lam_retain": float, "lam_forget": float, "lam_loc": float, "rho": float, "rho_loc": float,
    "m": _period, "lr": float, "epochs": int, "batch_size": int, "tau": float,
    "theta_fg": float, "theta_bg": float, "seed": int, "strict_grid": _bool,
}
TOP_KEYS = {"seed": int, "k": int, "out": str, "method": str, "targets": _names}

DEFAULT_SOURCE_COUNTS = (400, 100, 10, 200)
DEFAULT_TARGET_COUNTS = (300, 50, 10, 200)
DEFAULT_TARGET = "debias"


def parse_text(text, origin="<config>"):
    """Raw ``{key: string}`` from ``key = value`` lines."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        if key in raw:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def _convert(schema, key, name, value):
    if name not in schema:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return schema[name](value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None


@dataclass
class ExperimentConfig:
    seed: int = 0
    k: int = 2
    out: str = "runs/default"
    method: str = "dep"
    source: dict = field(default_factory=dict)
    targets: dict = field(default_factory=dict)  # name -> overrides
    model: dict = field(default_factory=dict)
    source_train: dict = field(default_factory=dict)
    adapt: dict = field(default_factory=dict)

    # -- resolution ---------------------------------------------------------

    def _domain(self, overrides, default_seed, default_counts, default_bias=None):
        kw = {k: v for k, v in overrides.items() if k != "counts"}
        kw.setdefault("seed", default_seed)
        if default_bias is not None and "bias" not in kw:
            kw["bias"] = default_bias
        if "class_prior" not in kw:
            kw["class_prior"] = tuple([1.0 / self.k] * self.k)
        counts = overrides.get("counts", default_counts)
        if len(counts) != 4:
            raise ConfigError("counts needs four values: train, val_cl, val_pxap, test")
        try:
            return DomainSpec(**kw), SplitCounts(*counts)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def source_domain(self):
        return self._domain(self.source, 1000 + self.seed, DEFAULT_SOURCE_COUNTS)

    def target_domains(self):
        """``{name: (DomainSpec, SplitCounts)}`` in declaration order."""
        targets = self.targets or {DEFAULT_TARGET: {}}
        out = {}
        for i, (name, ov) in enumerate(targets.items()):
            bias = (-0.05, -0.05, -0.05) if name == DEFAULT_TARGET else None
            out[name] = self._domain(ov, 2000 + self.seed + 100 * i, DEFAULT_TARGET_COUNTS, bias)
        return out

    def model_kwargs(self):
        kw = dict(seed=self.seed)
        kw.update(self.model)
        return kw

    def source_config(self):
        kw = dict(seed=self.seed)
        kw.update(self.source_train)
        try:
            return SourceConfig(**kw).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def adapt_config(self):
        kw = dict(seed=self.seed)
        kw.update({k: v for k, v in self.adapt.items() if k != "strict_grid"})
        try:
            return AdaptConfig(**kw).validate(strict_grid=self.strict_grid)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @property
    def strict_grid(self):
        return self.adapt.get("strict_grid", True)

    def validate(self):
        if self.k < 2:
            raise ConfigError("k must be at least 2")
        if self.method not in ("dep", "selftrain", "none"):
            raise ConfigError(f"unknown method {self.method!r}")
        self.source_domain()
        self.target_domains()
        self.source_config()
        self.adapt_config()
        return self

    def resolved_text(self) -> str:
        """Every effective setting as ``key = value`` lines."""

        def fmt(v):
            if isinstance(v, tuple):
                return ", ".join(fmt(x) for x in v)
            if v is None:
                return "static"
            return repr(v) if isinstance(v, float) else str(v)

        lines = [f"seed = {self.seed}", f"k = {self.k}", f"out = {self.out}", f"method = {self.method}"]
        spec, counts = self.source_domain()
        lines += _domain_lines("source", spec, counts, fmt)
        tds = self.target_domains()
        lines.append("targets = " + ", ".join(tds))
        for name, (spec, counts) in tds.items():
            lines += _domain_lines(f"target.{name}", spec, counts, fmt)
        for k, v in sorted(self.model_kwargs().items()):
            lines.append(f"model.{k} = {fmt(v)}")
        sc = self.source_config()
        for f in fields(sc):
            lines.append(f"source_train.{f.name} = {fmt(getattr(sc, f.name))}")
        ac = self.adapt_config()
        for f in fields(ac):
            lines.append(f"adapt.{f.name} = {fmt(getattr(ac, f.name))}")
        lines.append(f"adapt.strict_grid = {self.strict_grid}")
        return "\n".join(lines) + "\n"


def _domain_lines(prefix, spec, counts, fmt):
    lines = [f"{prefix}.{f.name} = {fmt(getattr(spec, f.name))}" for f in fields(spec)]
    lines.append(f"{prefix}.counts = " + ", ".join(str(c) for c in counts.as_dict().values()))
    return lines


def from_mapping(raw) -> ExperimentConfig:
    cfg = ExperimentConfig()
    target_names = None
    for key, value in raw.items():
        parts = key.split(".")
        if len(parts) == 1:
            v = _convert(TOP_KEYS, key, key, value)
            if key == "targets":
                target_names = v
            else:
                setattr(cfg, key, v)
        elif parts[0] == "source" and len(parts) == 2:
            cfg.source[parts[1]] = _convert(DOMAIN_KEYS, key, parts[1], value)
        elif parts[0] == "target" and len(parts) == 3:
            cfg.targets.setdefault(parts[1], {})[parts[2]] = _convert(DOMAIN_KEYS, key, parts[2], value)
        elif parts[0] == "model" and len(parts) == 2:
            cfg.model[parts[1]] = _convert(MODEL_KEYS, key, parts[1], value)
        elif parts[0] == "source_train" and len(parts) == 2:
            cfg.source_train[parts[1]] = _convert(SOURCE_TRAIN_KEYS, key, parts[1], value)
        elif parts[0] == "adapt" and len(parts) == 2:
            cfg.adapt[parts[1]] = _convert(ADAPT_KEYS, key, parts[1], value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if target_names is not None:
        undeclared = set(cfg.targets) - set(target_names)
        if undeclared:
            raise ConfigError(f"target settings for undeclared targets: {sorted(undeclared)}")
        cfg.targets = {name: cfg.targets.get(name, {}) for name in target_names}
    elif cfg.targets:
        raise ConfigError("target.* keys given without a 'targets' list")
    return cfg


def load(path=None, **overrides) -> ExperimentConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file {p} not found")
        raw = parse_text(p.read_text(encoding="utf-8"), str(p))
    cfg = from_mapping(raw)
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    return cfg.validate()
