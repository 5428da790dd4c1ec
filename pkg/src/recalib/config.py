"""Experiment configuration: one dataclass per INI section.

The text form is ``[section]`` headers with ``key = value`` lines. The
canonical form sorts sections and keys and normalizes values, so its hash
does not depend on how a file was written.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace

from .dcr import DcrConfig
from .errors import ValidationError
from .model import Stages, Widths
from .synthgen import GeneratorSpec


@dataclass(frozen=True)
class HfsConfig:
    mi_l0: float = 1.0
    mi_l1: float = 1.0
    mi_l2: float = 1.0
    mi_l3: float = 0.1
    mi_backend: str = "gaussian_closed_form"
    reversal_strength: float = 1.0
    orth_form: str = "cosine"

    @property
    def mi_weights(self):
        return (self.mi_l0, self.mi_l1, self.mi_l2, self.mi_l3)


@dataclass(frozen=True)
class AdConfig:
    beta: float = 0.5
    tau: float = 2.0


@dataclass(frozen=True)
class LossWeights:
    w_cls: float = 1.0
    w_orth: float = 0.1
    w_mi1: float = 0.1
    w_mi2: float = 0.1
    w_graph: float = 0.1
    w_flow: float = 0.1
    w_distill: float = 0.1
    w_adv: float = 0.1


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 40
    batch_size: int = 16
    patience: int = 20
    val_fraction: float = 0.2
    pretrain_epochs: int = 50
    pretrain_lr: float = 3e-3
    pretrain_target: float = 0.70


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_train: int = 400
    n_test: int = 100
    ea_tau: float = 0.2


SECTIONS = {
    "generator": GeneratorSpec,
    "widths": Widths,
    "hfs": HfsConfig,
    "dcr": DcrConfig,
    "ad": AdConfig,
    "loss": LossWeights,
    "optim": OptimConfig,
    "stages": Stages,
    "run": RunConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    widths: Widths = field(default_factory=Widths)
    hfs: HfsConfig = field(default_factory=HfsConfig)
    dcr: DcrConfig = field(default_factory=DcrConfig)
    ad: AdConfig = field(default_factory=AdConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    stages: Stages = field(default_factory=Stages)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self):
        for name in ("generator", "dcr"):
            try:
                getattr(self, name).validate()
            except ValidationError as exc:
                raise ValidationError(f"{name}.{exc.field}", exc.message) from None
        for f in fields(self.loss):
            if getattr(self.loss, f.name) < 0:
                raise ValidationError(f"loss.{f.name}", "must be >= 0")
        if self.loss.w_cls <= 0:
            raise ValidationError("loss.w_cls", "must be > 0")
        if not 0.0 <= self.ad.beta <= 1.0:
            raise ValidationError("ad.beta", f"must lie in [0, 1], got {self.ad.beta}")
        if self.ad.tau <= 0:
            raise ValidationError("ad.tau", "must be > 0")
        if self.hfs.orth_form not in ("literal", "cosine"):
            raise ValidationError("hfs.orth_form", f"must be 'literal' or 'cosine', got {self.hfs.orth_form!r}")
        if self.hfs.mi_backend not in ("gaussian_closed_form", "neural_dv"):
            raise ValidationError("hfs.mi_backend", f"unknown backend {self.hfs.mi_backend!r}")
        o = self.optim
        for name in ("epochs", "patience", "pretrain_epochs"):
            if getattr(o, name) < 0:
                raise ValidationError(f"optim.{name}", "must be >= 0")
        if o.batch_size < 1:
            raise ValidationError("optim.batch_size", "must be >= 1")
        if o.lr <= 0:
            raise ValidationError("optim.lr", "must be > 0")
        if not 0.0 < o.val_fraction < 1.0:
            raise ValidationError("optim.val_fraction", "must lie in (0, 1)")
        if self.run.n_train < 5 or self.run.n_test < 1:
            raise ValidationError("run.n_train", "need n_train >= 5 and n_test >= 1")
        if not 0.0 < self.run.ea_tau < 0.5:
            raise ValidationError("run.ea_tau", "must lie in (0, 0.5)")
        if self.generator.T < 2 * self.dcr.K:
            raise ValidationError("generator.T", f"must be >= 2K = {2 * self.dcr.K}")
        return self

    def with_seed(self, seed):
        """Same config with both the run seed and the data seed set to ``seed``."""
        return replace(self, run=replace(self.run, seed=int(seed)),
                       generator=replace(self.generator, seed=int(seed)))

    def with_stages(self, **toggles):
        return replace(self, stages=replace(self.stages, **toggles))

    def override(self, section, **values):
        return replace(self, **{section: replace(getattr(self, section), **values)})

    # --- text form --------------------------------------------------------

    def to_text(self):
        lines = []
        for name in sorted(SECTIONS):
            block = getattr(self, name)
            lines.append(f"[{name}]")
            for f in sorted(fields(block), key=lambda f: f.name):
                lines.append(f"{f.name} = {_format(getattr(block, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def hash(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    @classmethod
    def from_text(cls, text):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ValidationError("config", f"cannot parse: {exc}") from None
        base = cls()
        kwargs = {}
        for section in cp.sections():
            if section not in SECTIONS:
                raise ValidationError(section, "unknown config section")
            block = getattr(base, section)
            known = {f.name for f in fields(block)}
            values = {}
            for key, raw in cp.items(section):
                if key not in known:
                    raise ValidationError(f"{section}.{key}", "unknown key")
                values[key] = _parse(f"{section}.{key}", raw, getattr(block, key))
            kwargs[section] = replace(block, **values)
        return replace(base, **kwargs).validate()

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def _parse(name, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("true", "1", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(","))
        return raw
    except ValueError as exc:
        raise ValidationError(name, str(exc)) from None
