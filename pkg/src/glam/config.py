"""Run configuration files (INI-style ``key = value`` sections).

Example::

    [data]
    manifests = data/manifest.tsv
    num_classes = 6

    [species.mouse]
    magnification = 80
    capture_spacing_um = 0.125

    [network]
    base_channels = 32
    depth = 5

    [training]
    epochs = 200
    learning_rate = 1e-3
    selection = VH

    [experiment]
    scenarios = M2H_VM, M2H_VH

    [output]
    dir = runs/demo

Relative paths are resolved against the config file's directory. Every
manifest's image paths are relative to the directory holding the manifest.
"""

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import DEFAULT_PROFILES, DEFAULT_RATIOS, SPECIES, SpeciesProfile, SplitManifest, SyntheticSpec
from .exceptions import ConfigError, GlamError
from .network import NetworkConfig
from .training import TrainConfig


def _split_list(value):
    return [v.strip() for v in value.split(",") if v.strip()]


def _coerce(value, default):
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        items = _split_list(value)
        if default and isinstance(default[0], (int, float)):
            return tuple(type(default[0])(v) for v in items)
        return tuple(items)
    return value.strip()


def _dataclass_from_section(cls, section, overrides=None):
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    items = dict(section) if section is not None else {}
    items.update(overrides or {})
    for key, value in items.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        default = known[key].default
        try:
            kwargs[key] = _coerce(str(value), default)
        except ValueError as exc:
            raise ConfigError(f"bad value {value!r} for {key}: {exc}") from exc
    try:
        return cls(**kwargs)
    except GlamError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class RunConfig:
    path: Path = None
    text: str = ""
    manifests: list = field(default_factory=list)
    num_classes: int = 6
    profiles: dict = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    selection: str = "VH"
    scenarios: list = field(default_factory=list)
    method: str = "GLAM"
    threads: int = 1
    out_dir: Path = Path("runs")
    split_ratios: tuple = DEFAULT_RATIOS
    split_seed: int = 0
    dataset_root: Path = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    @property
    def config_hash(self):
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def load_manifests(self):
        """List of (manifest, root directory) pairs."""
        out = []
        for path in self.manifests:
            if not Path(path).exists():
                raise ConfigError(f"manifest {path} does not exist")
            out.append((SplitManifest.read(path), Path(path).parent))
        return out


def _resolve(base, value):
    p = Path(value).expanduser()
    return p if p.is_absolute() else (base / p)


def load_config(path=None, text=None, overrides=None):
    """Parse a run config. ``overrides`` maps "section.key" to a string value."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    text = text or ""
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.rpartition(".")
        if not section:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(value))

    base = path.parent if path is not None else Path.cwd()
    cfg = RunConfig(path=path, text=text)

    def get(section, key, fallback=None):
        return parser.get(section, key, fallback=fallback) if parser.has_section(section) else fallback

    manifests = get("data", "manifests")
    cfg.manifests = [_resolve(base, m) for m in _split_list(manifests)] if manifests else []
    if get("data", "root"):
        cfg.dataset_root = _resolve(base, get("data", "root"))
    cfg.num_classes = int(get("data", "num_classes", "6"))

    for species in SPECIES:
        section = f"species.{species}"
        if parser.has_section(section):
            default = DEFAULT_PROFILES[species]
            values = {
                "name": species,
                "magnification": float(parser.get(section, "magnification", fallback=default.magnification)),
                "capture_spacing_um": float(parser.get(section, "capture_spacing_um", fallback=default.capture_spacing_um)),
                "capture_size": int(parser.get(section, "capture_size", fallback=default.capture_size)),
                "working_size": int(parser.get(section, "working_size", fallback=default.working_size)),
            }
            try:
                cfg.profiles[species] = SpeciesProfile(**values)
            except GlamError as exc:
                raise ConfigError(f"[{section}] {exc}") from exc

    net = dict(parser["network"]) if parser.has_section("network") else {}
    net.setdefault("num_classes", str(cfg.num_classes))
    cfg.network = _dataclass_from_section(NetworkConfig, net)
    train = dict(parser["training"]) if parser.has_section("training") else {}
    cfg.selection = train.pop("selection", "VH").strip()
    cfg.training = _dataclass_from_section(TrainConfig, train)

    scenarios = get("experiment", "scenarios") or get("experiment", "scenario")
    cfg.scenarios = _split_list(scenarios) if scenarios else []
    cfg.method = get("experiment", "method", "GLAM")
    cfg.threads = int(get("experiment", "threads", "1"))
    cfg.out_dir = _resolve(base, get("output", "dir", "runs"))

    if parser.has_section("split"):
        cfg.split_ratios = tuple(float(r) for r in _split_list(parser.get("split", "ratios", fallback="0.7,0.1,0.2")))
        cfg.split_seed = int(parser.get("split", "seed", fallback="0"))
    if parser.has_section("synthetic"):
        syn = dict(parser["synthetic"])
        syn.setdefault("num_classes", str(cfg.num_classes))
        cfg.synthetic = _dataclass_from_section(SyntheticSpec, syn)
    return cfg
