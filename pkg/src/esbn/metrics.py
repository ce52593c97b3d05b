"""Localization error, spatial dispersion and AUC, plus report aggregation."""

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DataError


class UndefinedMetricError(DataError):
    pass


def _center_positions(true_centers, space):
    idx = np.atleast_1d(np.asarray(true_centers))
    if idx.dtype.kind in "iu":
        return space.positions[idx]
    return np.atleast_2d(np.asarray(true_centers, dtype=float))


def top_k_peaks(j_hat, positions, k, nms_radius=10.0):
    """Indices of the ``k`` largest ``|j_hat|`` with non-maximum suppression.

    Candidates within ``nms_radius`` of an already chosen peak are skipped.
    Fewer than ``k`` peaks come back if the field runs out of candidates.
    """
    amp = np.abs(np.asarray(j_hat, dtype=float))
    order = np.argsort(-amp, kind="stable")
    chosen = []
    for i in order:
        if amp[i] == 0 and chosen:
            break
        if chosen:
            d = np.linalg.norm(positions[chosen] - positions[i], axis=1)
            if np.any(d <= nms_radius + 1e-9):
                continue
        chosen.append(int(i))
        if len(chosen) == k:
            break
    return np.array(chosen, dtype=np.int64)


def localization_error(true_centers, j_hat, space, nms_radius=10.0):
    """Mean over true centers of the distance to the nearest reconstructed peak (mm).

    ``k`` peaks are taken for ``k`` true centers; for one center this is the
    distance between the true source and the global maximum of ``|j_hat|``.
    ``true_centers`` may be source indices or an array of positions.
    """
    j_hat = np.asarray(j_hat, dtype=float)
    if not np.any(j_hat):
        raise UndefinedMetricError("estimate is identically zero; peak undefined")
    truth = _center_positions(true_centers, space)
    if truth.shape[0] < 1:
        raise UndefinedMetricError("no true centers")
    peaks = top_k_peaks(j_hat, space.positions, truth.shape[0], nms_radius)
    d = np.linalg.norm(truth[:, None, :] - space.positions[peaks][None, :, :], axis=-1)
    return float(d.min(axis=1).mean())


def spatial_dispersion(true_centers, j_hat, space):
    """Amplitude-weighted mean distance of the estimate to the nearest true center (mm)."""
    amp = np.abs(np.asarray(j_hat, dtype=float))
    total = amp.sum()
    if total == 0:
        raise UndefinedMetricError("estimate has zero total amplitude")
    truth = _center_positions(true_centers, space)
    d = np.linalg.norm(space.positions[:, None, :] - truth[None, :, :], axis=-1).min(axis=1)
    return float(d @ amp / total)


def activation_labels(true_centers, space, radius_mm=10.0):
    truth = _center_positions(true_centers, space)
    d = np.linalg.norm(space.positions[:, None, :] - truth[None, :, :], axis=-1).min(axis=1)
    return d <= radius_mm + 1e-9


def roc_auc(labels, scores):
    """Mann-Whitney rank statistic with average ranks for ties."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pr_auc(labels, scores):
    """Average precision (step-wise area under the precision-recall curve)."""
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        raise UndefinedMetricError("PR-AUC needs both positive and negative labels")
    scores = np.asarray(scores, dtype=float)
    thresholds = np.unique(scores)[::-1]
    n_pos = labels.sum()
    ap, prev_recall = 0.0, 0.0
    for t in thresholds:
        sel = scores >= t
        tp = np.sum(labels & sel)
        recall = tp / n_pos
        ap += (recall - prev_recall) * tp / sel.sum()
        prev_recall = recall
    return float(ap)


def auc_score(true_centers, j_hat, space, radius_mm=10.0, kind="roc"):
    """Detection AUC with sources within ``radius_mm`` of a true center as positives."""
    labels = activation_labels(true_centers, space, radius_mm)
    scores = np.abs(np.asarray(j_hat, dtype=float))
    if kind == "roc":
        return roc_auc(labels, scores)
    if kind == "pr":
        return pr_auc(labels, scores)
    raise ValueError(f"unknown AUC kind {kind!r}")


# ----------------------------------------------------------------------
# aggregation

METRICS = ("LE", "SD", "AUC")


@dataclass
class MethodResult:
    """Per-frame metrics of one method; NaN marks a frame whose metrics were undefined."""

    method: str
    le: np.ndarray
    sd: np.ndarray
    auc: np.ndarray
    n_failed: int = 0

    def values(self, metric):
        return {"LE": self.le, "SD": self.sd, "AUC": self.auc}[metric]

    def valid(self):
        return ~(np.isnan(self.le) | np.isnan(self.sd) | np.isnan(self.auc))

    def summary(self, mask=None):
        ok = self.valid() if mask is None else self.valid() & mask
        out = {"method": self.method, "n": int(ok.sum()), "n_failed": int(self.n_failed)}
        for metric in METRICS:
            out[metric], out[metric + "_std"] = mean_std(self.values(metric)[ok])
        return out


def mean_std(values):
    """Population mean and std, two-pass with exactly rounded sums (order independent)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return float("nan"), float("nan")
    mean = math.fsum(values) / values.size
    var = math.fsum((values - mean) ** 2) / values.size
    return mean, math.sqrt(var)


def evaluate_method(localizer, batch, space, method="method", radius_mm=10.0, nms_radius=10.0,
                    auc_kind="roc"):
    """Run ``localizer`` (frames x M -> frames x N) over ``batch`` and score every frame."""
    if batch.n_frames == 0:
        raise DataError("evaluation batch is empty")
    estimates = np.asarray(localizer(batch.phi), dtype=float)
    n_frames = batch.n_frames
    le = np.full(n_frames, np.nan)
    sd = np.full(n_frames, np.nan)
    auc = np.full(n_frames, np.nan)
    failed = 0
    for i in range(n_frames):
        centers = batch.centers[i]
        try:
            le[i] = localization_error(centers, estimates[i], space, nms_radius)
            sd[i] = spatial_dispersion(centers, estimates[i], space)
            auc[i] = auc_score(centers, estimates[i], space, radius_mm, auc_kind)
        except DataError:
            le[i] = sd[i] = auc[i] = np.nan
            failed += 1
    return MethodResult(method=method, le=le, sd=sd, auc=auc, n_failed=failed)


@dataclass
class EvalReport:
    """Method summaries plus optional binned sweep tables.

    ``sweeps`` maps an axis name to ``{bin label: {method: summary}}``.
    """

    rows: dict = field(default_factory=dict)
    sweeps: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def add(self, result, mask=None):
        self.rows[result.method] = result.summary(mask)

    def to_csv(self):
        buf = io.StringIO()
        for key in sorted(self.provenance):
            buf.write(f"# {key}={self.provenance[key]}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "LE", "SD", "AUC", "n"])
        for name, row in self.rows.items():
            w.writerow([
                name,
                f"{row['LE']:.2f}({row['LE_std']:.2f})",
                f"{row['SD']:.2f}({row['SD_std']:.2f})",
                f"{row['AUC']:.3f}({row['AUC_std']:.3f})",
                row["n"],
            ])
        return buf.getvalue()

    def to_dict(self):
        return {"provenance": self.provenance, "methods": self.rows, "sweeps": self.sweeps}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
