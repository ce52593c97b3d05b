"""Gaussian-sparse source simulation and dataset persistence."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .errors import ConfigurationError, DimensionError, NumericError
from .source_space import apply_loose_orientation


@dataclass(frozen=True)
class GaussianSourceConfig:
    n_centers_range: tuple = (1, 5)
    sigma_s: float = 10.0
    loose: float = 0.1
    snr_channel_db: float = 5.0
    snr_source_db: float = 20.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.n_centers_range
        object.__setattr__(self, "n_centers_range", (int(lo), int(hi)))
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"n_centers_range must satisfy 1 <= lo <= hi, got {self.n_centers_range}")
        if not self.sigma_s > 0:
            raise ConfigurationError(f"sigma_s must be positive, got {self.sigma_s}")
        if not 0.0 <= self.loose <= 1.0:
            raise ConfigurationError(f"loose must lie in [0, 1], got {self.loose}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")

    def to_dict(self):
        out = asdict(self)
        out["n_centers_range"] = list(self.n_centers_range)
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "n_centers_range" in d:
            d["n_centers_range"] = tuple(d["n_centers_range"])
        return cls(**d)


@dataclass
class SampleBatch:
    """Paired sensor frames and ground-truth sources.

    ``centers`` is a list of integer arrays, one per frame.
    ``channel_noise`` keeps the injected measurement noise for covariance
    estimation; it is not written to disk.
    """

    phi: np.ndarray
    j_true: np.ndarray
    centers: list
    achieved_snr_db: np.ndarray
    config: GaussianSourceConfig = None
    channel_noise: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        self.j_true = np.asarray(self.j_true, dtype=float)
        self.achieved_snr_db = np.asarray(self.achieved_snr_db, dtype=float)
        self.centers = [np.asarray(c, dtype=np.int64) for c in self.centers]
        f = self.phi.shape[0]
        if self.j_true.shape[0] != f or len(self.centers) != f or self.achieved_snr_db.shape != (f,):
            raise DimensionError("phi, j_true, centers and achieved_snr_db disagree on frame count")
        if not (np.all(np.isfinite(self.phi)) and np.all(np.isfinite(self.j_true))):
            raise NumericError("batch contains non-finite values")

    @property
    def n_frames(self):
        return self.phi.shape[0]

    def subset(self, index):
        index = np.asarray(index)
        return SampleBatch(
            phi=self.phi[index],
            j_true=self.j_true[index],
            centers=[self.centers[i] for i in index],
            achieved_snr_db=self.achieved_snr_db[index],
            config=self.config,
            channel_noise=None if self.channel_noise is None else self.channel_noise[index],
        )


def gaussian_basis(center, sigma_s, space, omega=1.0):
    """Isotropic Gaussian blob centred on source ``center``."""
    sq = np.sum((space.positions - space.positions[center]) ** 2, axis=1)
    norm = (np.sqrt(2.0 * np.pi) * sigma_s) ** -3
    return omega * norm * np.exp(-0.5 * sq / sigma_s ** 2)


def sample_sparse_source(cfg, space, rng):
    lo, hi = cfg.n_centers_range
    n = space.n_sources
    if hi > n:
        raise ConfigurationError(f"cannot draw up to {hi} centers from {n} sources")
    k = int(rng.integers(lo, hi + 1))
    centers = rng.choice(n, size=k, replace=False)
    weights = rng.standard_normal(k)
    j = np.zeros(n)
    for c, w in zip(centers, weights):
        j += gaussian_basis(c, cfg.sigma_s, space, w)
    return weights, centers, j


def _rms2(x):
    return float(np.mean(np.square(x)))


def snr_db(signal, noise):
    return 10.0 * np.log10(_rms2(signal) / _rms2(noise))


def scale_noise_to_snr(signal, noise, target_db):
    """Rescale ``noise`` so that the signal-to-noise power ratio hits ``target_db``.

    An infinite target returns zeros.
    """
    signal = np.asarray(signal, dtype=float)
    noise = np.asarray(noise, dtype=float)
    p_signal = _rms2(signal)
    if p_signal == 0.0:
        raise NumericError("signal RMS is zero; SNR is undefined")
    if np.isposinf(target_db):
        return np.zeros_like(noise)
    p_noise = _rms2(noise)
    if p_noise == 0.0:
        raise NumericError("noise RMS is zero; cannot scale to a finite SNR")
    return noise * np.sqrt(p_signal / (p_noise * 10.0 ** (target_db / 10.0)))


def frame_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def project_sources(lf, j, loose=0.0, ori=None):
    """Sensor signal of source amplitudes ``j`` (frames x N or N).

    With ``loose > 0`` each source points along its loose-constrained
    direction (``ori`` holds the random unit orientations, same leading
    shape as ``j`` plus a trailing 3); otherwise the fixed gain is used.
    """
    j = np.asarray(j, dtype=float)
    if loose == 0.0:
        return j @ lf.gain_fixed.T
    moments = apply_loose_orientation(lf.orientations, ori, j, loose)
    return moments.reshape(*j.shape[:-1], -1) @ lf.gain_free.T


def _synth_frame(cfg, space, lf, seed, index):
    rng = frame_rng(seed, index)
    _, centers, j = sample_sparse_source(cfg, space, rng)
    ori = None
    if cfg.loose > 0:
        ori = rng.standard_normal((space.n_sources, 3))
        ori /= np.linalg.norm(ori, axis=1, keepdims=True)
    signal = project_sources(lf, j, cfg.loose, ori)
    src_noise = rng.standard_normal(space.n_sources)
    proj_noise = lf.gain_fixed @ src_noise
    clean = signal + scale_noise_to_snr(signal, proj_noise, cfg.snr_source_db)
    ch_noise = scale_noise_to_snr(clean, rng.standard_normal(clean.shape[0]), cfg.snr_channel_db)
    phi = clean + ch_noise
    achieved = np.inf if not np.any(ch_noise) else snr_db(clean, ch_noise)
    return phi, j, np.sort(centers), achieved, ch_noise


def synthesize_batch(cfg, space, lf, n_frames, seed=None, threads=1):
    """Draw ``n_frames`` frames; frame ``i`` uses its own stream seeded by ``(seed, i)``.

    ``seed`` defaults to ``cfg.seed``.  Parallel and serial runs give
    identical batches.
    """
    if lf.gain_fixed is None or lf.orientations is None:
        raise DimensionError("leadfield must be collapsed (gain_fixed and orientations)")
    if lf.n_sources != space.n_sources:
        raise DimensionError(f"leadfield has {lf.n_sources} sources, space has {space.n_sources}")
    seed = cfg.seed if seed is None else seed

    def one(i):
        return _synth_frame(cfg, space, lf, seed, i)

    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            frames = list(pool.map(one, range(n_frames)))
    else:
        frames = [one(i) for i in range(n_frames)]
    phi, j, centers, snr, noise = zip(*frames) if frames else ((), (), (), (), ())
    m, n = lf.n_sensors, space.n_sources
    return SampleBatch(
        phi=np.array(phi).reshape(n_frames, m),
        j_true=np.array(j).reshape(n_frames, n),
        centers=list(centers),
        achieved_snr_db=np.array(snr, dtype=float),
        config=cfg,
        channel_noise=np.array(noise).reshape(n_frames, m),
    )


def estimate_noise_covariance(noise_frames, shrinkage=0.0):
    """Shrunk sample covariance ``(1 - a) S + a (tr S / M) I``, exactly symmetric."""
    x = np.asarray(noise_frames, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DimensionError("need at least 2 noise frames (frames x channels)")
    if not 0.0 <= shrinkage <= 1.0:
        raise ConfigurationError(f"shrinkage must lie in [0, 1], got {shrinkage}")
    s = np.cov(x, rowvar=False)
    s = np.atleast_2d(s)
    m = s.shape[0]
    if shrinkage == 1.0:
        return np.eye(m) * (np.trace(s) / m)
    c = (1.0 - shrinkage) * s + shrinkage * (np.trace(s) / m) * np.eye(m)
    return 0.5 * (c + c.T)


def write_batch(batch, path, meta=None):
    f, m = batch.phi.shape
    n = batch.j_true.shape[1]
    parts = [container.pack_u32(f, m, n), container.pack_f64(batch.phi), container.pack_f64(batch.j_true)]
    for c in batch.centers:
        parts.append(container.pack_u32(len(c), *c))
    parts.append(container.pack_f64(batch.achieved_snr_db))
    side = {"n_frames": f, "n_sensors": m, "n_sources": n}
    if batch.config is not None:
        side["config"] = batch.config.to_dict()
    if meta:
        side.update(meta)
    container.write_container(path, container.KIND_BATCH, b"".join(parts), side)


def read_batch(path, n_sources=None, n_sensors=None):
    """Load a kind-4 container.

    Header dimensions are cross-checked against the sidecar (when present)
    and against ``n_sources`` / ``n_sensors`` when given.
    """
    _, body, meta = container.read_container(path, kinds=(container.KIND_BATCH,))
    reader = container.BodyReader(body, label=str(path))
    f, m, n = reader.u32(), reader.u32(), reader.u32()
    expected = {"n_frames": f, "n_sensors": m, "n_sources": n}
    checks = dict(meta or {})
    if n_sources is not None:
        checks["n_sources"] = n_sources
    if n_sensors is not None:
        checks["n_sensors"] = n_sensors
    for key, value in expected.items():
        if key in checks and int(checks[key]) != value:
            raise DimensionError(f"{path}: header declares {key}={value}, expected {checks[key]}")
    phi = reader.matrix(f, m)
    j = reader.matrix(f, n)
    centers = []
    for _ in range(f):
        k = reader.u32()
        idx = reader.u32(k)
        if np.any(idx >= n):
            raise DimensionError(f"{path}: center index out of range for N={n}")
        centers.append(idx)
    snr = reader.f64(f)
    reader.finish()
    cfg = None
    if meta and "config" in meta:
        cfg = GaussianSourceConfig.from_dict(meta["config"])
    return SampleBatch(phi=phi, j_true=j, centers=centers, achieved_snr_db=snr, config=cfg)
