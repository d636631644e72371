"""Run configuration: defaults, JSON / key=value loading and validation.

A config file is either a JSON document mirroring :meth:`RunConfig.to_dict`
or plain ``section.key = value`` lines (``#`` starts a comment). Values in
key=value files are parsed as JSON when possible, otherwise kept as strings.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .curves import MAX_BITS, CurveKind
from .errors import InvalidConfig
from .field.losses import TrainConfig


@dataclass
class CurveSection:
    kind: str = "hilbert"
    grid_size: float = 0.01
    bits: int = MAX_BITS


@dataclass
class NeighborSection:
    k: int = 8
    window: int | None = None
    r_max: float | None = None


@dataclass
class PyramidSection:
    S: int = 4
    base_pool: float = 0.02
    feature_k: int = 16


@dataclass
class ExtractionSection:
    cell: float = 0.02
    pad: float | None = None
    mask_gate: bool = True
    batch: int = 65536


@dataclass
class DecoderSection:
    source: str = "imls"
    hidden: int = 32
    sdf_scale: float = 0.5


@dataclass
class RunConfig:
    curve: CurveSection = field(default_factory=CurveSection)
    neighbors: NeighborSection = field(default_factory=NeighborSection)
    pyramid: PyramidSection = field(default_factory=PyramidSection)
    extraction: ExtractionSection = field(default_factory=ExtractionSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    delta: float = 0.01
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        cfg = cls()
        for key, value in _flatten(doc):
            cfg = cfg.with_override(key, value)
        cfg.validate()
        return cfg

    def with_override(self, key, value):
        parts = key.split(".")
        if len(parts) == 1:
            if parts[0] not in {f.name for f in fields(self)} or parts[0] in _SECTIONS:
                raise InvalidConfig(f"unknown config key {key!r}")
            return replace(self, **{parts[0]: value})
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise InvalidConfig(f"unknown config key {key!r}")
        section = getattr(self, parts[0])
        if parts[1] not in {f.name for f in fields(section)}:
            raise InvalidConfig(f"unknown config key {key!r}")
        try:
            new_section = replace(section, **{parts[1]: value})
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(f"{key}: {exc}") from None
        return replace(self, **{parts[0]: new_section})

    def validate(self):
        try:
            CurveKind(self.curve.kind)
        except ValueError:
            raise InvalidConfig(f"curve.kind must be hilbert or morton, got {self.curve.kind!r}") from None
        checks = [
            (self.curve.grid_size > 0, "curve.grid_size must be > 0"),
            (1 <= self.curve.bits <= MAX_BITS, f"curve.bits must be in [1, {MAX_BITS}]"),
            (self.neighbors.k >= 1, "neighbors.k must be >= 1"),
            (self.neighbors.window is None or self.neighbors.window >= self.neighbors.k, "neighbors.window must be >= k"),
            (self.neighbors.r_max is None or self.neighbors.r_max > 0, "neighbors.r_max must be > 0"),
            (self.pyramid.S >= 1, "pyramid.S must be >= 1"),
            (self.pyramid.base_pool > 0, "pyramid.base_pool must be > 0"),
            (self.pyramid.feature_k >= 3, "pyramid.feature_k must be >= 3"),
            (self.extraction.cell > 0, "extraction.cell must be > 0"),
            (self.decoder.hidden >= 1, "decoder.hidden must be >= 1"),
            (self.delta > 0, "delta must be > 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise InvalidConfig(message)
        if self.decoder.source != "imls" and not Path(self.decoder.source).exists():
            raise InvalidConfig(f"decoder file {self.decoder.source!r} does not exist")
        return self


_SECTIONS = ("curve", "neighbors", "pyramid", "extraction", "decoder", "train")


def _flatten(doc, prefix=""):
    for key, value in doc.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _flatten(value, name + ".")
        else:
            yield name, value


def parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path):
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            return RunConfig.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: {exc}") from None
    doc = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        doc[key] = parse_value(value)
    cfg = RunConfig()
    for key, value in doc.items():
        cfg = cfg.with_override(key, value)
    return cfg.validate()
