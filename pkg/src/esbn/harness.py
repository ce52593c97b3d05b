"""Experiment orchestration behind the command-line tool.

Each ``cmd_*`` function takes an :class:`~esbn.config.ExperimentConfig`,
reads and writes only inside ``config.output_dir`` and returns a dict
describing what it produced.  Outputs are byte-reproducible for a fixed
configuration and seed.
"""

import csv
import dataclasses
import hashlib
import io
import json
import logging
from pathlib import Path

import numpy as np

from . import container
from .config import NUMERICAL_METHODS, TABLE_METHODS
from .edges import EdgeOperator
from .errors import ConfigurationError, DataError, DimensionError
from .inverse import (
    PriorModel,
    apply_inverse,
    build_operators,
    default_lambda2,
    whitener_from_cov,
)
from .metrics import EvalReport, evaluate_method
from .network import (
    EsbnHyper,
    esbn_forward,
    finetune_unsupervised,
    init_model,
    load_checkpoint,
    mahalanobis_residual,
    save_checkpoint,
    train_supervised,
)
from .plots import grouped_bar_svg
from .simulator import (
    GaussianSourceConfig,
    estimate_noise_covariance,
    read_batch,
    synthesize_batch,
    write_batch,
)
from .source_space import (
    LeadField,
    analytic_leadfield,
    build_grid_source_space,
    export_leadfield,
    head_model_from_gain,
    hemisphere_sensors,
    import_leadfield,
    source_depth_score,
)

log = logging.getLogger(__name__)


class Workspace:
    """Paths inside the output directory."""

    def __init__(self, cfg):
        self.root = Path(cfg.output_dir)

    def path(self, *parts):
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def existing(self, *parts):
        p = self.root.joinpath(*parts)
        if not p.exists():
            raise DataError(f"{p} not found; run the producing subcommand first")
        return p


def _write_text(path, text):
    Path(path).write_text(text)
    return str(path)


# ----------------------------------------------------------------------
# setup


@dataclasses.dataclass
class Setup:
    space: object
    lf: LeadField
    edge_op: EdgeOperator
    raw: LeadField = None  # unreferenced free-orientation gain


def build_setup(cfg):
    """Source space, collapsed leadfield and edge operator for ``cfg``."""
    ss = cfg.source_space
    space = build_grid_source_space(ss.radius_mm, ss.spacing_mm, ss.origin)
    if cfg.sensors.leadfield_path:
        raw = import_leadfield(cfg.sensors.leadfield_path)
        if raw.gain_free is None:
            raise ConfigurationError(
                "sensors.leadfield_path: a fixed-orientation leadfield has no orientation "
                "information for simulation; provide the free-orientation (kind 1) gain")
        if raw.n_sources != space.n_sources:
            raise DimensionError(
                f"imported leadfield has {raw.n_sources} sources, grid has {space.n_sources}")
    else:
        sensors = hemisphere_sensors(cfg.sensors.count, cfg.sensors.radius_mm)
        raw = analytic_leadfield(space, sensors, cfg.sensors.conductivity, reference=False)
    d, lf = head_model_from_gain(raw)
    space = space.with_orientations(d)
    return Setup(space=space, lf=lf, edge_op=EdgeOperator.from_space(space), raw=raw)


def source_config(cfg, split, seed_label=None):
    sim = cfg.simulation
    return GaussianSourceConfig(
        n_centers_range=tuple(sim.n_centers_range),
        sigma_s=sim.sigma_s_mm,
        loose=split.loose,
        snr_channel_db=split.snr_db,
        snr_source_db=sim.snr_source_db,
        seed=cfg.derive_seed(seed_label) if seed_label else cfg.seed,
    )


def esbn_hyper(cfg):
    e = cfg.esbn
    return EsbnHyper(
        hidden=e.hidden, features=e.features, n_basis=e.n_basis, dropout=e.dropout,
        weight_decay=e.weight_decay, lr=e.lr, batch_size=e.batch_size, epochs=e.epochs,
        lambda_s1=e.lambda_s1, lambda_s2=e.lambda_s2, lambda_sim=e.lambda_sim,
        finetune_epochs=e.finetune_epochs, finetune_lr=e.finetune_lr,
        finetune_batch_size=e.finetune_batch_size, optimizer=e.optimizer,
        sigma_s=cfg.simulation.sigma_s_mm, seed=cfg.derive_seed("esbn"),
    )


def _fingerprint(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


# ----------------------------------------------------------------------
# simulate

SPLITS = ("train", "test", "unlabeled")


def cmd_simulate(cfg, threads=1):
    ws = Workspace(cfg)
    setup = build_setup(cfg)
    prov = cfg.provenance()
    # the unreferenced free gain, from which orientations and the referenced model follow
    export_leadfield(setup.raw, ws.path("data", "leadfield.esiw"), meta={
        **prov, "referenced": False, "grid_spacing": cfg.source_space.spacing_mm, "radius": cfg.source_space.radius_mm,
        "sensor_count": setup.lf.n_sensors, "creation_seed": int(cfg.seed),
    })
    summary = {}
    for split in SPLITS:
        sc = getattr(cfg.simulation, split)
        gcfg = source_config(cfg, sc, f"simulate/{split}")
        batch = synthesize_batch(gcfg, setup.space, setup.lf, sc.n_frames, threads=threads)
        err = np.abs(batch.achieved_snr_db - gcfg.snr_channel_db)
        meta = {**prov, "split": split, "target_snr_db": gcfg.snr_channel_db,
                "achieved_snr_db_min": float(batch.achieved_snr_db.min()),
                "achieved_snr_db_max": float(batch.achieved_snr_db.max()),
                "max_snr_error_db": float(err.max())}
        write_batch(batch, ws.path("data", f"{split}.esiw"), meta=meta)
        container.write_matrix(ws.path("data", f"{split}_noise.esiw"), batch.channel_noise,
                               meta={**prov, "split": split, "content": "channel noise"})
        summary[split] = meta
    return summary


def load_split(cfg, split, setup):
    ws = Workspace(cfg)
    batch = read_batch(ws.existing("data", f"{split}.esiw"),
                       n_sources=setup.space.n_sources, n_sensors=setup.lf.n_sensors)
    _, noise, _ = container.read_matrix(ws.existing("data", f"{split}_noise.esiw"))
    batch.channel_noise = noise
    return batch


# ----------------------------------------------------------------------
# train


def _trace_csv(trace, prov, column):
    buf = io.StringIO()
    for key in sorted(prov):
        buf.write(f"# {key}={prov[key]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", column])
    for i, v in enumerate(trace):
        w.writerow([i + 1, repr(float(v))])
    return buf.getvalue()


def read_trace_csv(path):
    rows = [line for line in Path(path).read_text().splitlines() if line and not line.startswith("#")]
    return [float(r.split(",")[1]) for r in rows[1:]]


def noise_whitener(cfg, noise):
    c = estimate_noise_covariance(noise, cfg.solvers.noise_shrinkage)
    return c, whitener_from_cov(c)


def cmd_train(cfg, resume=False):
    ws = Workspace(cfg)
    setup = build_setup(cfg)
    train = load_split(cfg, "train", setup)
    hyper = esbn_hyper(cfg)
    prov = cfg.provenance()
    ckpt_path = ws.root / "model" / "esbn.esiw"
    previous = []
    if resume and ckpt_path.exists():
        model, meta = load_checkpoint(ckpt_path)
        previous = list(meta.get("loss_trace", []))
        if model.dims[0] != setup.lf.n_sensors or model.dims[4] != setup.space.n_sources:
            raise DimensionError("checkpoint dimensions do not match the configured setup")
    else:
        scale = float(np.sqrt(np.mean(train.phi ** 2)))
        model = init_model(setup.lf.n_sensors, setup.space, hyper, input_scale=scale)
    result = train_supervised(model, train, hyper, setup.edge_op)
    trace = previous + result.loss_trace
    meta = {**prov, "hyperparameters": dataclasses.asdict(hyper), "training_seed": hyper.seed,
            "dataset_fingerprint": _fingerprint(train.phi, train.j_true), "loss_trace": trace,
            "stage": "supervised"}
    save_checkpoint(result.model, ws.path("model", "esbn.esiw"), meta)
    _write_text(ws.path("model", "loss_trace.csv"), _trace_csv(trace, prov, "loss"))
    out = {"checkpoint": str(ckpt_path), "loss_trace": trace, "initial_loss": result.initial_loss}
    if cfg.esbn.finetune:
        out.update(_finetune(cfg, setup, result.model, hyper, ws, prov))
    return out


def _finetune(cfg, setup, model, hyper, ws, prov):
    unlabeled = load_split(cfg, "unlabeled", setup)
    _, whitener = noise_whitener(cfg, unlabeled.channel_noise)
    ft = finetune_unsupervised(model, unlabeled.phi, setup.lf, whitener, hyper, setup.edge_op)
    test = load_split(cfg, "test", setup)
    before = float(np.mean(mahalanobis_residual(model, test.phi, setup.lf, whitener)))
    after = float(np.mean(mahalanobis_residual(ft.model, test.phi, setup.lf, whitener)))
    meta = {**prov, "hyperparameters": dataclasses.asdict(hyper), "stage": "unsupervised",
            "dataset_fingerprint": _fingerprint(unlabeled.phi), "residual_trace": ft.loss_trace,
            "heldout_residual_before": before, "heldout_residual_after": after}
    save_checkpoint(ft.model, ws.path("model", "esbn_finetuned.esiw"), meta)
    _write_text(ws.path("model", "finetune_trace.csv"), _trace_csv(ft.loss_trace, prov, "residual"))
    return {"finetuned_checkpoint": str(ws.root / "model" / "esbn_finetuned.esiw"),
            "finetune_trace": ft.loss_trace, "heldout_residual_before": before,
            "heldout_residual_after": after}


# ----------------------------------------------------------------------
# eval


def localizers(cfg, setup, noise, methods, checkpoint=None):
    """Map method name -> callable(frames) -> estimates."""
    ws = Workspace(cfg)
    out = {}
    wanted_esbn = [m for m in methods if m.startswith("ESBN")]
    for name in wanted_esbn:
        if name == "ESBN Supervised":
            path = Path(checkpoint) if checkpoint else ws.root / "model" / "esbn.esiw"
        else:
            path = ws.root / "model" / "esbn_finetuned.esiw"
        if not path.exists():
            raise DataError(f"{name} requested but checkpoint {path} is missing; run train first")
        model, _ = load_checkpoint(path)
        out[name] = (lambda mdl: (lambda phi: esbn_forward(mdl, phi)))(model)
    numerical = [m for m in methods if m in NUMERICAL_METHODS]
    if numerical:
        c = estimate_noise_covariance(noise, cfg.solvers.noise_shrinkage)
        prior = PriorModel.depth_weighted(setup.lf, c, cfg.solvers.depth_exponent)
        lam = cfg.solvers.lambda2
        if lam is None:
            lam = default_lambda2(setup.lf, prior, cfg.solvers.snr_prior)
        ops = build_operators(setup.lf, prior, numerical, lam, cfg.solvers.eloreta_tol,
                              cfg.solvers.eloreta_max_iter)
        for name in numerical:
            out[name] = (lambda op: (lambda phi: apply_inverse(op, phi)))(ops[name])
    return {m: out[m] for m in methods if m in out}


def default_methods(cfg):
    methods = []
    if cfg.esbn.enabled:
        methods.append("ESBN Supervised")
        if cfg.esbn.finetune:
            methods.append("ESBN Unsupervised")
    return methods + [m for m in TABLE_METHODS if m in cfg.solvers.methods]


def evaluate_all(cfg, setup, batch, methods, checkpoint=None):
    locs = localizers(cfg, setup, batch.channel_noise, methods, checkpoint)
    mc = cfg.metrics
    return {name: evaluate_method(fn, batch, setup.space, name, mc.auc_radius_mm,
                                  mc.nms_radius_mm, mc.auc_kind)
            for name, fn in locs.items()}


def cmd_eval(cfg, checkpoint=None, methods=None):
    ws = Workspace(cfg)
    setup = build_setup(cfg)
    test = load_split(cfg, "test", setup)
    methods = default_methods(cfg) if methods is None else list(methods)
    results = evaluate_all(cfg, setup, test, methods, checkpoint)
    report = EvalReport(provenance=cfg.provenance())
    for r in results.values():
        report.add(r)
    csv_path = _write_text(ws.path("eval", "table1.csv"), report.to_csv())
    json_path = _write_text(ws.path("eval", "report.json"), report.to_json())
    return {"csv": csv_path, "json": json_path, "report": report, "results": results}


# ----------------------------------------------------------------------
# sweeps


def depth_bins(lf, batch, n_bins=3):
    """Partition frames by mean depth score of their true centers.

    Returns ``(labels, index arrays)``, deepest (smallest score) first.
    """
    scores = source_depth_score(lf)
    frame_score = np.array([scores[c].mean() for c in batch.centers])
    order = np.argsort(frame_score, kind="stable")
    parts = np.array_split(order, n_bins)
    if n_bins == 3:
        labels = ["deep (tercile 1)", "middle (tercile 2)", "shallow (tercile 3)"]
    else:
        labels = [f"depth bin {i + 1}/{n_bins}" for i in range(n_bins)]
    return labels, [np.sort(p) for p in parts]


def _sweep_tables(results_by_bin):
    """``{bin: {method: summary}}`` from ``{bin: {method: (MethodResult, mask)}}``."""
    return {b: {m: r.summary(mask) for m, (r, mask) in per.items()} for b, per in results_by_bin.items()}


def cmd_sweep(cfg, axis, methods=None, threads=1):
    if axis not in ("depth", "snr", "loose"):
        raise ConfigurationError(f"sweep axis must be depth, snr or loose, got {axis!r}")
    ws = Workspace(cfg)
    setup = build_setup(cfg)
    methods = default_methods(cfg) if methods is None else list(methods)
    bins = {}
    sizes = {}
    if axis == "depth":
        test = load_split(cfg, "test", setup)
        results = evaluate_all(cfg, setup, test, methods)
        labels, parts = depth_bins(setup.lf, test, cfg.sweeps.depth_bins)
        for label, idx in zip(labels, parts):
            mask = np.zeros(test.n_frames, dtype=bool)
            mask[idx] = True
            bins[label] = {m: (r, mask) for m, r in results.items()}
            sizes[label] = int(idx.size)
    else:
        values = cfg.sweeps.snr_list if axis == "snr" else cfg.sweeps.loose_list
        if not values:
            raise ConfigurationError(f"sweeps.{axis}_list is empty")
        base = cfg.simulation.test
        for v in values:
            split = dataclasses.replace(base, n_frames=cfg.sweeps.n_frames,
                                        **({"snr_db": float(v)} if axis == "snr" else {"loose": float(v)}))
            label = f"{axis}={v:g}"
            # one stream per axis: every point sees the same sources and noise draws
            gcfg = source_config(cfg, split, f"sweep/{axis}")
            batch = synthesize_batch(gcfg, setup.space, setup.lf, split.n_frames, threads=threads)
            results = evaluate_all(cfg, setup, batch, methods)
            bins[label] = {m: (r, None) for m, r in results.items()}
            sizes[label] = batch.n_frames
    tables = _sweep_tables(bins)
    report = EvalReport(sweeps={axis: tables}, provenance={**cfg.provenance(), "axis": axis,
                                                           "bin_sizes": sizes})
    if axis == "depth":
        report.provenance["binning"] = "terciles of mean depth score (sum |gain|) of true centers"
    else:
        report.provenance["pairing"] = "all points share one source and noise stream"
    paths = {"json": _write_text(ws.path("sweep", f"{axis}.json"), report.to_json())}
    paths["csv"] = _write_text(ws.path("sweep", f"{axis}.csv"), _sweep_csv(tables, cfg.provenance()))
    for metric in ("LE", "AUC"):
        svg = grouped_bar_svg(tables, metric, title=f"{metric} by {axis}",
                              ylabel="mm" if metric == "LE" else "AUC")
        paths[f"svg_{metric}"] = _write_text(ws.path("sweep", f"{axis}_{metric}.svg"), svg)
    return {"paths": paths, "tables": tables, "bin_sizes": sizes}


def _sweep_csv(tables, prov):
    buf = io.StringIO()
    for key in sorted(prov):
        buf.write(f"# {key}={prov[key]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin", "method", "n", "LE", "LE_std", "SD", "SD_std", "AUC", "AUC_std"])
    for b, per in tables.items():
        for m, s in per.items():
            w.writerow([b, m, s["n"]] + [f"{s[k]:.6g}" for k in
                                         ("LE", "LE_std", "SD", "SD_std", "AUC", "AUC_std")])
    return buf.getvalue()


# ----------------------------------------------------------------------
# localize


def _read_frames(path):
    kind, _, _ = container.read_container(path)
    if kind == container.KIND_BATCH:
        return read_batch(path).phi
    return container.read_matrix(path, kinds=(container.KIND_MATRIX,))[1]


def cmd_localize(cfg, leadfield_path, frames_path, method=None, checkpoint=None, noise_path=None,
                 out_name="estimates.esiw"):
    """Apply one inverse to imported frames; writes a frames x N matrix container."""
    if (method is None) == (checkpoint is None):
        raise ConfigurationError("give exactly one of a numerical method or an ESBN checkpoint")
    ws = Workspace(cfg)
    frames = _read_frames(frames_path)
    if checkpoint is not None:
        model, _ = load_checkpoint(checkpoint)
        if model.dims[0] != frames.shape[1]:
            raise DimensionError(
                f"checkpoint expects M={model.dims[0]} channels, frames have M={frames.shape[1]}")
        estimates = esbn_forward(model, frames)
        label = "ESBN"
    else:
        if method not in NUMERICAL_METHODS:
            raise ConfigurationError(f"unknown method {method!r}")
        lf = import_leadfield(leadfield_path)
        if lf.n_sensors != frames.shape[1]:
            raise DimensionError(
                f"leadfield has M={lf.n_sensors} channels, frames have M={frames.shape[1]}")
        if lf.gain_fixed is None:
            _, lf = head_model_from_gain(lf)
        if noise_path is not None:
            _, noise, _ = container.read_matrix(noise_path)
            c = estimate_noise_covariance(noise, cfg.solvers.noise_shrinkage)
        else:
            c = np.eye(lf.n_sensors)
        prior = PriorModel(np.ones(lf.n_sources), c)
        lam = cfg.solvers.lambda2
        ops = build_operators(lf, prior, [method], lam, cfg.solvers.eloreta_tol,
                              cfg.solvers.eloreta_max_iter)
        estimates = apply_inverse(ops[method], frames)
        label = method
    out = ws.path("localize", out_name)
    container.write_matrix(out, estimates, meta={**cfg.provenance(), "method": label,
                                                 "frames": str(frames_path)})
    return {"path": str(out), "shape": list(estimates.shape), "method": label}


def run_all(cfg, threads=1):
    """simulate -> train -> eval -> all three sweeps."""
    out = {"simulate": cmd_simulate(cfg, threads)}
    if cfg.esbn.enabled:
        out["train"] = cmd_train(cfg)
    out["eval"] = cmd_eval(cfg)
    for axis in ("depth", "snr", "loose"):
        out[f"sweep_{axis}"] = cmd_sweep(cfg, axis, threads=threads)
    return out


def dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=str)
