"""``key = value`` configuration files with ``[section]`` headers.

Unknown sections and keys are errors. ``[regions]`` is the exception: each
key names a region and its value is ``top, left, height, width, scale``.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields

from .dataset import DEFAULT_REGIONS, SyntheticDatasetSpec
from .errors import ConfigError
from .nets import ARCHITECTURES
from .recognition import Region
from .training import TrainConfig


@dataclass
class NetSection:
    widths: tuple = (8, 16, 24, 32)
    feature_dim: int = 64
    dropout: float = 0.0  # rate unstated; any dropout hurt the 20-identity toy nets
    head_dim: int = 0  # 0: same as feature_dim
    verif_weight: float = 0.05
    margin: float = 0.0  # 0: median impostor distance at initialization


@dataclass
class EnsembleSection:
    nets: tuple = ("deepid3_net1:original", "deepid3_net2:mirrored")
    regions: tuple = ()  # empty: every region


@dataclass
class RecognitionSection:
    pca_dim: int = 32
    jb_iters: int = 20


@dataclass
class EvalSection:
    folds: int = 10
    verification_pairs: int = 600
    open_set_far: float = 0.1
    open_set_gallery: int = 5


@dataclass
class ComparisonSection:
    enabled: bool = True
    baseline: str = "deepid2plus"


@dataclass
class PipelineConfig:
    seed: int = 0
    data_dir: str | None = None
    dataset: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    net: NetSection = field(default_factory=NetSection)
    # heads' losses are summed, so the toy nets want a smaller step than 0.01
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.002, epochs=15))
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    recognition: RecognitionSection = field(default_factory=RecognitionSection)
    eval: EvalSection = field(default_factory=EvalSection)
    comparison: ComparisonSection = field(default_factory=ComparisonSection)

    def ensemble_plan(self):
        """``(region, arch, flip)`` per ensemble entry, region-major."""
        regions = self.dataset.regions
        if self.ensemble.regions:
            by_name = {r.name: r for r in regions}
            missing = [n for n in self.ensemble.regions if n not in by_name]
            if missing:
                raise ConfigError(f"[ensemble] regions names unknown regions {missing}")
            regions = [by_name[n] for n in self.ensemble.regions]
        plan = []
        for region in regions:
            for item in self.ensemble.nets:
                arch, _, view = item.partition(":")
                plan.append((region, arch, view == "mirrored"))
        return plan


_SECTIONS = {
    "dataset": SyntheticDatasetSpec,
    "net": NetSection,
    "train": TrainConfig,
    "ensemble": EnsembleSection,
    "recognition": RecognitionSection,
    "eval": EvalSection,
    "comparison": ComparisonSection,
}
_SKIP = {"dataset": {"regions", "seed"}, "train": {"seed", "margin"}}


def _parse_value(raw: str, default, where):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [v.strip() for v in raw.split(",") if v.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(v) for v in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def _parse_region(name, raw):
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) not in (4, 5):
        raise ConfigError(f"[regions] {name}: expected 'top, left, height, width[, scale]'")
    try:
        top, left, h, w = (int(p) for p in parts[:4])
        scale = float(eval_fraction(parts[4])) if len(parts) == 5 else 1.0
    except ValueError:
        raise ConfigError(f"[regions] {name}: cannot parse {raw!r}") from None
    return Region(name, top, left, h, w, scale)


def eval_fraction(text):
    """``"4/3"`` -> 1.333..., ``"2"`` -> 2.0."""
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def parse_config(text: str, base_dir: str = ".") -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                       strict=True, empty_lines_in_values=False)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None

    cfg = PipelineConfig()
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "run":
            for key, raw in items.items():
                if key != "seed":
                    raise ConfigError(f"[run] unknown key '{key}'")
                cfg.seed = _parse_value(raw, 0, "[run] seed")
        elif section == "data":
            for key, raw in items.items():
                if key != "dir":
                    raise ConfigError(f"[data] unknown key '{key}'")
                cfg.data_dir = os.path.normpath(os.path.join(base_dir, raw.strip()))
        elif section == "regions":
            cfg.dataset.regions = [_parse_region(k, v) for k, v in items.items()]
        elif section in _SECTIONS:
            target = getattr(cfg, section)
            known = {f.name: f for f in fields(target)} if section != "dataset" else \
                {f.name: f for f in fields(SyntheticDatasetSpec)}
            for key, raw in items.items():
                if key not in known or key in _SKIP.get(section, ()):
                    raise ConfigError(f"[{section}] unknown key '{key}'")
                setattr(target, key, _parse_value(raw, getattr(target, key), f"[{section}] {key}"))
        else:
            raise ConfigError(f"unknown section [{section}]")
    validate(cfg)
    return cfg


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        return parse_config(fh.read(), os.path.dirname(os.path.abspath(path)))


def validate(cfg: PipelineConfig):
    for item in cfg.ensemble.nets:
        arch, _, view = item.partition(":")
        if arch not in ARCHITECTURES:
            raise ConfigError(f"[ensemble] unknown architecture '{arch}'")
        if view not in ("", "original", "mirrored"):
            raise ConfigError(f"[ensemble] view must be 'original' or 'mirrored', got '{view}'")
    if cfg.comparison.baseline not in ARCHITECTURES:
        raise ConfigError(f"[comparison] unknown baseline '{cfg.comparison.baseline}'")
    if len(cfg.net.widths) != 4:
        raise ConfigError("[net] widths needs 4 values")
    if cfg.eval.folds < 2:
        raise ConfigError("[eval] folds must be >= 2")
    if not 0.0 < cfg.eval.open_set_far < 1.0:
        raise ConfigError("[eval] open_set_far must be in (0, 1)")
    try:
        TrainConfig(**{f.name: getattr(cfg.train, f.name) for f in fields(TrainConfig)})
        cfg.dataset.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg.ensemble_plan()


def format_config(cfg: PipelineConfig) -> str:
    """Render ``cfg`` back to the text format (used for the default config)."""
    lines = ["[run]", f"seed = {cfg.seed}", ""]
    if cfg.data_dir:
        lines += ["[data]", f"dir = {cfg.data_dir}", ""]
    for section, cls in _SECTIONS.items():
        target = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in fields(target):
            if f.name in _SKIP.get(section, ()):
                continue
            value = getattr(target, f.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        lines.append("")
    lines.append("[regions]")
    for r in cfg.dataset.regions:
        lines.append(f"{r.name} = {r.top}, {r.left}, {r.height}, {r.width}, {r.scale!r}")
    return "\n".join(lines) + "\n"


__all__ = ["PipelineConfig", "parse_config", "load_config", "format_config", "DEFAULT_REGIONS"]
