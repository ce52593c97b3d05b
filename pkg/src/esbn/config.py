"""Experiment configuration: strict JSON loading, defaults and provenance."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError

TOOL_VERSION = "0.1.0"

TABLE_METHODS = ("ESBN Supervised", "ESBN Unsupervised", "MNE", "dSPM", "sLORETA", "eLORETA")
NUMERICAL_METHODS = ("MNE", "dSPM", "sLORETA", "eLORETA")


@dataclass(frozen=True)
class SourceSpaceConfig:
    radius_mm: float = 70.0
    spacing_mm: float = 10.0
    origin: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SensorConfig:
    count: int = 64
    radius_mm: float = 100.0
    conductivity: float = 0.33
    leadfield_path: str = None


@dataclass(frozen=True)
class SplitConfig:
    n_frames: int = 2000
    snr_db: float = 5.0
    loose: float = 0.1


@dataclass(frozen=True)
class SimulationConfig:
    sigma_s_mm: float = 10.0
    n_centers_range: tuple = (1, 5)
    snr_source_db: float = 20.0
    train: SplitConfig = SplitConfig(n_frames=20000)
    test: SplitConfig = SplitConfig(n_frames=2000)
    unlabeled: SplitConfig = SplitConfig(n_frames=2000)


@dataclass(frozen=True)
class SolverConfig:
    methods: tuple = NUMERICAL_METHODS
    lambda2: float = None
    snr_prior: float = 3.0
    depth_exponent: float = 0.0
    noise_shrinkage: float = 0.1
    eloreta_tol: float = 1e-6
    eloreta_max_iter: int = 200


@dataclass(frozen=True)
class EsbnConfig:
    enabled: bool = True
    hidden: int = 256
    features: int = 256
    n_basis: int = 256
    dropout: float = 0.2
    weight_decay: float = 1e-4
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 30
    lambda_s1: float = 1e-3
    lambda_s2: float = 1e-4
    lambda_sim: float = 1e-3
    optimizer: str = "adam"
    finetune: bool = True
    finetune_epochs: int = 5
    finetune_lr: float = 1e-4
    finetune_batch_size: int = 128


@dataclass(frozen=True)
class SweepConfig:
    snr_list: tuple = (0.0, 5.0, 10.0, 20.0)
    loose_list: tuple = (0.1, 0.5)
    depth_bins: int = 3
    n_frames: int = 2000


@dataclass(frozen=True)
class MetricsConfig:
    auc_radius_mm: float = 10.0
    nms_radius_mm: float = 10.0
    auc_kind: str = "roc"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "esbn_out"
    source_space: SourceSpaceConfig = SourceSpaceConfig()
    sensors: SensorConfig = SensorConfig()
    simulation: SimulationConfig = SimulationConfig()
    solvers: SolverConfig = SolverConfig()
    esbn: EsbnConfig = EsbnConfig()
    sweeps: SweepConfig = SweepConfig()
    metrics: MetricsConfig = MetricsConfig()

    def to_dict(self):
        return _to_plain(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def config_hash(self):
        """Hash of everything that affects results; the output directory is excluded."""
        data = self.to_dict()
        data.pop("output_dir")
        text = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def provenance(self):
        return {"config_hash": self.config_hash, "seed": int(self.seed), "tool_version": TOOL_VERSION}

    def derive_seed(self, label):
        """Stable 63-bit seed for a named stream (``"train"``, ``"sweep/snr"``, ...)."""
        digest = hashlib.sha256(f"{int(self.seed)}:{label}".encode()).digest()
        return int.from_bytes(digest[:8], "little") >> 1


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigurationError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigurationError(f"{sub}: expected a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _check(cond, field_name, message):
    if not cond:
        raise ConfigurationError(f"{field_name}: {message}")


def validate(cfg):
    sim = cfg.simulation
    _check(isinstance(cfg.seed, int) and 0 <= cfg.seed < 2 ** 64, "seed", "must be an unsigned 64-bit integer")
    _check(cfg.source_space.spacing_mm > 0, "source_space.spacing_mm", "must be positive")
    _check(cfg.source_space.radius_mm > cfg.source_space.spacing_mm, "source_space.radius_mm",
           "must exceed spacing_mm")
    _check(len(cfg.source_space.origin) == 3, "source_space.origin", "must have 3 coordinates")
    _check(cfg.sensors.count >= 2, "sensors.count", "need at least 2 sensors")
    _check(sim.sigma_s_mm > 0, "simulation.sigma_s_mm", "must be positive")
    lo_hi = sim.n_centers_range
    _check(len(lo_hi) == 2 and 1 <= lo_hi[0] <= lo_hi[1], "simulation.n_centers_range",
           "must be [lo, hi] with 1 <= lo <= hi")
    for split in ("train", "test", "unlabeled"):
        sc = getattr(sim, split)
        _check(0.0 <= sc.loose <= 1.0, f"simulation.{split}.loose", f"must lie in [0, 1], got {sc.loose}")
        _check(sc.n_frames >= 1, f"simulation.{split}.n_frames", "must be positive")
    unknown = set(cfg.solvers.methods) - set(NUMERICAL_METHODS)
    _check(not unknown, "solvers.methods", f"unknown methods {sorted(unknown)}")
    _check(0.0 <= cfg.solvers.noise_shrinkage <= 1.0, "solvers.noise_shrinkage", "must lie in [0, 1]")
    _check(cfg.solvers.lambda2 is None or cfg.solvers.lambda2 >= 0, "solvers.lambda2", "must be >= 0")
    e = cfg.esbn
    _check(0.0 <= e.dropout < 1.0, "esbn.dropout", "must lie in [0, 1)")
    _check(e.optimizer in ("sgd", "adam"), "esbn.optimizer", "must be 'sgd' or 'adam'")
    _check(e.epochs >= 0 and e.finetune_epochs >= 0, "esbn.epochs", "must be non-negative")
    _check(all(0.0 <= v <= 1.0 for v in cfg.sweeps.loose_list), "sweeps.loose_list", "values must lie in [0, 1]")
    _check(cfg.sweeps.depth_bins >= 2, "sweeps.depth_bins", "need at least 2 bins")
    _check(cfg.metrics.auc_kind in ("roc", "pr"), "metrics.auc_kind", "must be 'roc' or 'pr'")
    return cfg


def config_from_dict(data, base_dir=None):
    cfg = validate(_build(ExperimentConfig, data, ""))
    lf_path = cfg.sensors.leadfield_path
    if lf_path is not None:
        resolved = Path(base_dir or ".", lf_path).resolve()
        if not resolved.exists():
            raise ConfigurationError(f"sensors.leadfield_path: {resolved} does not exist")
        cfg = cfg.replace(sensors=dataclasses.replace(cfg.sensors, leadfield_path=str(resolved)))
    return cfg


def load_config(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data, base_dir=path.parent)


def smoke_config(output_dir="esbn_smoke", seed=0):
    """Small profile: 500 training frames, 2 epochs, reduced network."""
    return config_from_dict({
        "seed": seed,
        "output_dir": str(output_dir),
        "simulation": {
            "train": {"n_frames": 500},
            "test": {"n_frames": 100},
            "unlabeled": {"n_frames": 100},
        },
        "esbn": {"epochs": 2, "finetune_epochs": 1, "hidden": 128, "features": 128, "n_basis": 128},
        "sweeps": {"n_frames": 100},
    })
