"""Edge sparse basis network: model, regularisers, losses, gradients and training.

The network maps a sensor frame to basis weights with a three-layer ReLU
MLP followed by a linear coefficient map, and reconstructs the source image
as a weighted sum of learnable basis rows::

    q = MLP(phi / input_scale)
    m = W_v q
    j_hat = output_scale * (m @ omega)

Losses are evaluated on the normalised image ``m @ omega`` (supervised) or
on the whitened sensor residual (unsupervised).  Gradients are computed by
hand-written backpropagation; everything works on frame batches (rows).
"""

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import container
from .errors import DimensionError, NumericError, TrainingDivergedError
from .simulator import gaussian_basis

log = logging.getLogger(__name__)

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3", "wv", "omega")
# parameters subject to weight decay; the basis is deliberately excluded
DECAYED = ("w1", "b1", "w2", "b2", "w3", "b3", "wv")


@dataclass(frozen=True)
class EsbnHyper:
    hidden: int = 256
    features: int = 256
    n_basis: int = 256
    dropout: float = 0.2
    weight_decay: float = 1e-4
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 10
    lambda_s1: float = 1e-3
    lambda_s2: float = 1e-4
    lambda_sim: float = 1e-3
    finetune_epochs: int = 5
    finetune_lr: float = 1e-4
    finetune_batch_size: int = 128
    optimizer: str = "adam"
    sigma_s: float = 10.0
    seed: int = 0


@dataclass
class EsbnModel:
    params: dict
    dropout: float = 0.0
    lambda_s1: float = 0.0
    lambda_s2: float = 0.0
    lambda_sim: float = 0.0
    input_scale: float = 1.0
    output_scale: float = 1.0
    epochs_done: int = 0
    opt_state: dict = None

    def __post_init__(self):
        missing = [k for k in PARAM_NAMES if k not in self.params]
        if missing:
            raise DimensionError(f"model is missing parameters {missing}")
        p = self.params
        h, m = p["w1"].shape
        f = p["w3"].shape[0]
        b, n = p["omega"].shape
        expected = {
            "w1": (h, m), "b1": (h,), "w2": (h, h), "b2": (h,), "w3": (f, h),
            "b3": (f,), "wv": (b, f), "omega": (b, n),
        }
        for name, shape in expected.items():
            if p[name].shape != shape:
                raise DimensionError(f"{name} has shape {p[name].shape}, expected {shape}")
        if not 0.0 <= self.dropout < 1.0:
            raise DimensionError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def dims(self):
        """``(M, H, F, B, N)``."""
        p = self.params
        return (p["w1"].shape[1], p["w1"].shape[0], p["w3"].shape[0], p["omega"].shape[0],
                p["omega"].shape[1])

    def copy(self):
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def with_params(self, params, **changes):
        return replace(self, params=params, **changes)


def init_model(n_sensors, space, hyper=EsbnHyper(), seed=None, input_scale=1.0, output_scale=None):
    """He-initialised MLP and a basis of Gaussian blobs at random sources.

    ``output_scale`` defaults to the peak value of a unit-weight Gaussian
    source of width ``hyper.sigma_s`` so normalised targets are O(1).
    """
    rng = np.random.default_rng([hyper.seed if seed is None else seed, 1])
    m, h, f, b, n = n_sensors, hyper.hidden, hyper.features, hyper.n_basis, space.n_sources
    peak = (np.sqrt(2 * np.pi) * hyper.sigma_s) ** -3
    params = {
        "w1": rng.normal(0, np.sqrt(2.0 / m), (h, m)),
        "b1": np.zeros(h),
        "w2": rng.normal(0, np.sqrt(2.0 / h), (h, h)),
        "b2": np.zeros(h),
        "w3": rng.normal(0, np.sqrt(1.0 / h), (f, h)),
        "b3": np.zeros(f),
        "wv": rng.normal(0, 1.0 / f, (b, f)),
    }
    centers = rng.choice(n, size=b, replace=b > n)
    omega = np.stack([gaussian_basis(c, hyper.sigma_s, space) / peak for c in centers])
    params["omega"] = omega + rng.normal(0, 1e-3, omega.shape)
    return EsbnModel(
        params=params,
        dropout=hyper.dropout,
        lambda_s1=hyper.lambda_s1,
        lambda_s2=hyper.lambda_s2,
        lambda_sim=hyper.lambda_sim,
        input_scale=float(input_scale),
        output_scale=float(peak if output_scale is None else output_scale),
    )


# ----------------------------------------------------------------------
# forward pass


def _as_frames(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _dropout_mask(shape, rate, rng):
    if rng is None or rate == 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _mlp(model, phi, rng):
    p = model.params
    x = phi / model.input_scale
    a1 = x @ p["w1"].T + p["b1"]
    h1 = np.maximum(a1, 0.0)
    mask1 = _dropout_mask(h1.shape, model.dropout, rng)
    h1d = h1 if mask1 is None else h1 * mask1
    a2 = h1d @ p["w2"].T + p["b2"]
    h2 = np.maximum(a2, 0.0)
    mask2 = _dropout_mask(h2.shape, model.dropout, rng)
    h2d = h2 if mask2 is None else h2 * mask2
    q = h2d @ p["w3"].T + p["b3"]
    cache = dict(x=x, a1=a1, h1d=h1d, mask1=mask1, a2=a2, h2d=h2d, mask2=mask2)
    return q, cache


def mlp_forward(model, phi, train_mode=False, rng=None):
    """Feature vector(s) ``Q``; dropout only when ``train_mode`` and an ``rng`` is given."""
    frames, single = _as_frames(phi)
    if frames.shape[1] != model.dims[0]:
        raise DimensionError(f"model expects {model.dims[0]} channels, got {frames.shape[1]}")
    q, _ = _mlp(model, frames, rng if train_mode else None)
    return q[0] if single else q


def infer_weights(model, q):
    wv = model.params["wv"]
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != wv.shape[1]:
        raise DimensionError(f"coefficient map expects {wv.shape[1]} features, got {q.shape[-1]}")
    return q @ wv.T


def esbn_forward(model, phi):
    """Source estimate(s) in physical units, evaluation mode."""
    q = mlp_forward(model, phi)
    return model.output_scale * (infer_weights(model, q) @ model.params["omega"])


# ----------------------------------------------------------------------
# regularisers


def penalty_s1(weights):
    return float(np.sum(np.abs(weights)))


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise NumericError("cosine similarity of a zero-norm vector is undefined")
    return float(a @ b / (na * nb))


def edge_l1(edge_op, omega):
    """``sum_b ||V omega_b||_1``."""
    return float(np.abs(edge_op.matrix @ np.atleast_2d(omega).T).sum())


def _row_units(omega):
    norms = np.linalg.norm(omega, axis=1)
    if np.any(norms < 1e-12):
        raise NumericError("basis row with zero norm; cosine similarity undefined")
    return omega / norms[:, None], norms


def pairwise_similarity(omega):
    """Sum of cosine similarities over unordered pairs of basis rows."""
    u, _ = _row_units(np.atleast_2d(omega))
    return float(np.triu(u @ u.T, 1).sum())


def penalty_s2(edge_op, omega):
    return edge_l1(edge_op, omega) + pairwise_similarity(omega)


def _regularisers(model, m, edge_op):
    """Weighted S1 (mean over frames), edge and similarity terms and their gradients."""
    omega = model.params["omega"]
    n_frames = m.shape[0]
    value = 0.0
    grad_m = np.zeros_like(m)
    grad_omega = np.zeros_like(omega)
    if model.lambda_s1:
        value += model.lambda_s1 * np.abs(m).sum() / n_frames
        grad_m += model.lambda_s1 * np.sign(m) / n_frames
    if model.lambda_s2:
        v = edge_op.matrix
        resp = v @ omega.T
        value += model.lambda_s2 * np.abs(resp).sum()
        grad_omega += model.lambda_s2 * (v.T @ np.sign(resp)).T
    if model.lambda_sim:
        u, norms = _row_units(omega)
        s = u.sum(axis=0)
        value += model.lambda_sim * np.triu(u @ u.T, 1).sum()
        proj = s[None, :] - u * (u @ s)[:, None]
        grad_omega += model.lambda_sim * proj / norms[:, None]
    return value, grad_m, grad_omega


# ----------------------------------------------------------------------
# losses and gradients


def _data_term(model, jn, kind, target, lf, c_inv_factor):
    """Data misfit (mean over frames) and its gradient w.r.t. the normalised image."""
    n_frames = jn.shape[0]
    if kind == "supervised":
        t = np.asarray(target, dtype=float) / model.output_scale
        diff = jn - t
        return float(np.sum(diff * diff) / n_frames), 2.0 * diff / n_frames
    if kind == "unsupervised":
        k = lf.gain_fixed
        wk = c_inv_factor @ k
        resid = target @ c_inv_factor.T - model.output_scale * (jn @ wk.T)
        grad = -2.0 * model.output_scale * (resid @ wk) / n_frames
        return float(np.sum(resid * resid) / n_frames), grad
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_and_gradients(model, phi, target, kind, edge_op, lf=None, c_inv_factor=None, rng=None):
    """Loss value, data term and gradient dict for one batch.

    ``kind`` is ``"supervised"`` (``target`` holds true sources, frames x N)
    or ``"unsupervised"`` (``target`` is ignored in favour of ``phi`` itself,
    with ``lf`` and ``c_inv_factor`` such that ``C^-1 = L^T L``).  Dropout
    is active when ``rng`` is given.
    """
    phi, _ = _as_frames(phi)
    p = model.params
    q, cache = _mlp(model, phi, rng)
    m = q @ p["wv"].T
    jn = m @ p["omega"]
    if kind == "supervised":
        tgt, _ = _as_frames(target)
    else:
        if lf is None or lf.gain_fixed is None or c_inv_factor is None:
            raise DimensionError("unsupervised loss needs a collapsed leadfield and a whitening factor")
        tgt = phi
    data, g_jn = _data_term(model, jn, kind, tgt, lf, c_inv_factor)
    reg, g_m, g_omega = _regularisers(model, m, edge_op)
    loss = data + reg
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss ({loss})")

    grads = {"omega": m.T @ g_jn + g_omega}
    g_m = g_m + g_jn @ p["omega"].T
    grads["wv"] = g_m.T @ q
    g_q = g_m @ p["wv"]
    grads["w3"] = g_q.T @ cache["h2d"]
    grads["b3"] = g_q.sum(axis=0)
    g_h2 = g_q @ p["w3"]
    if cache["mask2"] is not None:
        g_h2 = g_h2 * cache["mask2"]
    g_a2 = g_h2 * (cache["a2"] > 0)
    grads["w2"] = g_a2.T @ cache["h1d"]
    grads["b2"] = g_a2.sum(axis=0)
    g_h1 = g_a2 @ p["w2"]
    if cache["mask1"] is not None:
        g_h1 = g_h1 * cache["mask1"]
    g_a1 = g_h1 * (cache["a1"] > 0)
    grads["w1"] = g_a1.T @ cache["x"]
    grads["b1"] = g_a1.sum(axis=0)
    return loss, data, grads


def loss_supervised(model, phi, j_true, edge_op, rng=None):
    return loss_and_gradients(model, phi, j_true, "supervised", edge_op, rng=rng)[0]


def loss_unsupervised(model, phi, lf, c_inv_factor, edge_op, rng=None):
    return loss_and_gradients(model, phi, None, "unsupervised", edge_op, lf, c_inv_factor, rng)[0]


def gradients(model, kind, phi, target=None, edge_op=None, lf=None, c_inv_factor=None, rng=None):
    return loss_and_gradients(model, phi, target, kind, edge_op, lf, c_inv_factor, rng)[2]


def mahalanobis_residual(model, phi, lf, c_inv_factor):
    """Per-frame ``||phi - K j_hat||^2_{C^-1}`` in evaluation mode."""
    phi, _ = _as_frames(phi)
    j_hat = esbn_forward(model, phi)
    resid = (phi - j_hat @ lf.gain_fixed.T) @ c_inv_factor.T
    return np.sum(resid * resid, axis=1)


# ----------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: EsbnModel
    loss_trace: list = field(default_factory=list)
    initial_loss: float = float("nan")


def sgd_step(params, grads, lr, weight_decay):
    """Plain update ``p <- p - lr (g + wd p)``; weight decay skips the basis."""
    out = {}
    for name, value in params.items():
        g = grads[name]
        if weight_decay and name in DECAYED:
            g = g + weight_decay * value
        out[name] = value - lr * g
    return out


ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def adam_step(params, grads, state, lr, weight_decay):
    """Adam on the data gradient with decoupled weight decay (basis excluded).

    ``state`` holds ``t`` and first/second moments; a new state is returned.
    """
    b1, b2 = ADAM_BETAS
    t = state.get("t", 0) + 1
    new_state = {"t": t}
    out = {}
    for name, value in params.items():
        g = grads[name]
        mom = b1 * state.get("m_" + name, 0.0) + (1 - b1) * g
        vel = b2 * state.get("v_" + name, 0.0) + (1 - b2) * g * g
        new_state["m_" + name] = mom
        new_state["v_" + name] = vel
        step = lr * (mom / (1 - b1 ** t)) / (np.sqrt(vel / (1 - b2 ** t)) + ADAM_EPS)
        if weight_decay and name in DECAYED:
            value = value * (1.0 - lr * weight_decay)
        out[name] = value - step
    return out, new_state


def _run_epochs(model, phi, target, kind, edge_op, lf, c_inv_factor, lr, weight_decay, batch_size,
                epoch_range, seed, track, optimizer, state):
    params = {k: v.copy() for k, v in model.params.items()}
    state = dict(state or {})
    trace = []
    n_frames = phi.shape[0]
    for epoch in epoch_range:
        rng = np.random.default_rng([int(seed), int(epoch)])
        order = rng.permutation(n_frames)
        losses = []
        for start in range(0, n_frames, batch_size):
            idx = order[start:start + batch_size]
            current = model.with_params(params)
            tgt = None if target is None else target[idx]
            try:
                loss, data, grads = loss_and_gradients(
                    current, phi[idx], tgt, kind, edge_op, lf, c_inv_factor, rng)
            except NumericError as exc:
                raise TrainingDivergedError(f"epoch {epoch}, batch at {start}: {exc}") from exc
            if optimizer == "sgd":
                params = sgd_step(params, grads, lr, weight_decay)
            elif optimizer == "adam":
                params, state = adam_step(params, grads, state, lr, weight_decay)
            else:
                raise ValueError(f"unknown optimizer {optimizer!r}")
            losses.append((data if track == "data" else loss) * len(idx))
        trace.append(float(np.sum(losses) / n_frames))
        if not all(np.all(np.isfinite(v)) for v in params.values()):
            raise TrainingDivergedError(f"parameters became non-finite in epoch {epoch}")
        log.info("%s epoch %d: %.6g", kind, epoch, trace[-1])
    return params, trace, state


def train_supervised(model, batch, hyper, edge_op, start_epoch=None):
    """Minibatch SGD on the supervised loss.

    Epoch ``e`` shuffles and draws dropout masks from a stream seeded by
    ``(hyper.seed, e)``, so resuming from a checkpoint at epoch ``e``
    reproduces an uninterrupted run.  Returns a :class:`TrainResult` whose
    trace holds the mean training loss of every epoch run.
    """
    if batch.n_frames == 0:
        raise DimensionError("training set is empty")
    start = model.epochs_done if start_epoch is None else start_epoch
    initial = loss_supervised(model, batch.phi, batch.j_true, edge_op)
    params, trace, state = _run_epochs(
        model, batch.phi, batch.j_true, "supervised", edge_op, None, None,
        hyper.lr, hyper.weight_decay, hyper.batch_size, range(start, hyper.epochs),
        hyper.seed, "loss", hyper.optimizer, model.opt_state if start else None,
    )
    trained = model.with_params(params, epochs_done=max(start, hyper.epochs),
                                opt_state=state or None)
    return TrainResult(model=trained, loss_trace=trace, initial_loss=initial)


def finetune_unsupervised(model, phi, lf, c_inv_factor, hyper, edge_op):
    """Refine a trained model on unlabeled frames with the sensor-space loss.

    The returned trace is the mean Mahalanobis residual per epoch.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    if phi.shape[0] == 0:
        raise DimensionError("no frames to fine-tune on")
    initial = float(np.mean(mahalanobis_residual(model, phi, lf, c_inv_factor)))
    params, trace, _ = _run_epochs(
        model, phi, None, "unsupervised", edge_op, lf, c_inv_factor,
        hyper.finetune_lr, hyper.weight_decay, hyper.finetune_batch_size,
        range(hyper.finetune_epochs), int(hyper.seed) + 1, "data", hyper.optimizer, None,
    )
    return TrainResult(model=model.with_params(params, opt_state=None), loss_trace=trace,
                       initial_loss=initial)


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, meta=None):
    m, h, f, b, n = model.dims
    parts = [
        container.pack_u32(m, h, f, b, n),
        container.pack_f64([model.dropout, model.lambda_s1, model.lambda_s2, model.lambda_sim,
                            model.input_scale, model.output_scale]),
        container.pack_u32(model.epochs_done),
    ]
    parts += [container.pack_f64(model.params[k]) for k in PARAM_NAMES]
    # optional optimizer moments so that a resumed run continues exactly
    state = model.opt_state
    if state:
        parts.append(container.pack_u32(1, state["t"]))
        for prefix in ("m_", "v_"):
            parts += [container.pack_f64(state[prefix + k]) for k in PARAM_NAMES]
    else:
        parts.append(container.pack_u32(0))
    side = {"dims": {"M": m, "H": h, "F": f, "B": b, "N": n}, "parameter_order": list(PARAM_NAMES)}
    if meta:
        side.update(meta)
    container.write_container(path, container.KIND_CHECKPOINT, b"".join(parts), side)


def load_checkpoint(path):
    _, body, meta = container.read_container(path, kinds=(container.KIND_CHECKPOINT,))
    r = container.BodyReader(body, label=str(path))
    m, h, f, b, n = (int(v) for v in r.u32(5))
    dropout, ls1, ls2, lsim, in_scale, out_scale = r.f64(6)
    epochs_done = r.u32()
    shapes = {"w1": (h, m), "b1": (h,), "w2": (h, h), "b2": (h,), "w3": (f, h), "b3": (f,),
              "wv": (b, f), "omega": (b, n)}
    params = {k: r.f64(int(np.prod(shapes[k]))).reshape(shapes[k]) for k in PARAM_NAMES}
    state = None
    if r.u32():
        state = {"t": r.u32()}
        for prefix in ("m_", "v_"):
            for k in PARAM_NAMES:
                state[prefix + k] = r.f64(int(np.prod(shapes[k]))).reshape(shapes[k])
    r.finish()
    model = EsbnModel(params=params, dropout=dropout, lambda_s1=ls1, lambda_s2=ls2,
                      lambda_sim=lsim, input_scale=in_scale, output_scale=out_scale,
                      epochs_done=epochs_done, opt_state=state)
    return model, meta


def hyper_to_dict(hyper):
    return asdict(hyper)
