"""Euclidean-prototype baseline and collapse diagnostics.

The baseline scores each prototype by its best match -||f - p||^2 over the
grid and classifies with a linear layer on those scores. Trained on
low-variance data, its per-class prototypes drift toward one coordinate;
the Stiefel bases cannot.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import BackboneParams, embed, embed_backward
from .data import Dataset, SyntheticSpec, gen_synthetic
from .errors import BadShape, Degenerate, EmptyClass, ZeroMatrix
from .head import log_softmax
from .trainer import TrainingConfig, cosine_lr, fit, steps_per_epoch

log = logging.getLogger(__name__)


@dataclass
class EuclideanPrototypes:
    protos: np.ndarray  # (C, D, K)
    fc: np.ndarray  # (C, C*K) last layer over the similarity scores

    def copy(self) -> "EuclideanPrototypes":
        return EuclideanPrototypes(self.protos.copy(), self.fc.copy())


def default_last_layer(C: int, K: int) -> np.ndarray:
    """+1 from a class's own prototypes, -0.5 from every other class's."""
    own = np.repeat(np.eye(C), K, axis=1)
    return own - 0.5 * (1 - own)


def _sq_dist(F: np.ndarray, protos: np.ndarray) -> np.ndarray:
    """(B, C, K, L) squared distances between grid features (B, D, L) and prototypes."""
    f2 = (F * F).sum(axis=1)  # (B, L)
    p2 = (protos * protos).sum(axis=1)  # (C, K)
    cross = np.einsum("bdl,cdk->bckl", F, protos)
    return np.maximum(f2[:, None, None, :] - 2 * cross + p2[None, :, :, None], 0.0)


def baseline_scores(F, protos: EuclideanPrototypes, return_argmax: bool = False):
    """S_ck = max_hw -||F_hw - p_ck||^2 for a batch (B, D, H, W) -> (B, C*K)."""
    F = np.asarray(F, dtype=np.float64)
    P = protos.protos
    if F.ndim != 4 or F.shape[1] != P.shape[1]:
        raise BadShape(f"features {F.shape} vs prototypes {P.shape}")
    d = _sq_dist(F.reshape(F.shape[0], F.shape[1], -1), P)
    loc = d.argmin(axis=-1)
    S = -np.take_along_axis(d, loc[..., None], axis=-1)[..., 0]
    S = S.reshape(F.shape[0], -1)
    return (S, loc) if return_argmax else S


def baseline_forward(F, protos: EuclideanPrototypes):
    """Scores (C*K,) and logits (C,) for one feature tensor (D, H, W)."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 3:
        raise BadShape(f"expected (D, H, W), got {F.shape}")
    S = baseline_scores(F[None], protos)[0]
    return S, protos.fc @ S


def init_prototypes(features: np.ndarray, labels: np.ndarray, C: int, K: int, seed: int,
                    spread: float = 1.5) -> EuclideanPrototypes:
    """Prototypes scattered around each class's mean dominant patch.

    The dominant patch of a sample is its largest-norm grid feature. Each
    prototype starts at that class mean m plus a random offset orthogonal to m
    of norm ``spread * |m|``: the prototype matrix starts far from rank one,
    yet m stays nearer to every prototype than the origin is.
    """
    rng = np.random.default_rng([seed, 0xBA5E])
    B, D = features.shape[:2]
    flat = features.reshape(B, D, -1)
    dom = flat[np.arange(B), :, (flat * flat).sum(axis=1).argmax(axis=1)]
    protos = np.empty((C, D, K))
    for c in range(C):
        if not np.any(labels == c):
            raise EmptyClass(f"class {c} has no samples")
        m = dom[labels == c].mean(axis=0)
        nm = np.linalg.norm(m)
        u = m / nm
        xi = rng.standard_normal((D, K))
        xi -= np.outer(u, u @ xi)
        xi /= np.linalg.norm(xi, axis=0, keepdims=True)
        protos[c] = m[:, None] + spread * nm * xi
    return EuclideanPrototypes(protos, default_last_layer(C, K))


def project_prototypes(protos: EuclideanPrototypes, data: Dataset,
                       backbone: BackboneParams) -> EuclideanPrototypes:
    """Replace every prototype by the nearest grid feature of its own class."""
    out = protos.copy()
    C, D, K = protos.protos.shape
    for c in range(C):
        idx = np.flatnonzero(data.labels == c)
        if idx.size == 0:
            raise EmptyClass(f"class {c} has no training samples")
        patches = embed(data.raw[idx], backbone)
        patches = patches.reshape(idx.size, D, -1).transpose(0, 2, 1).reshape(-1, D)
        d = ((patches[:, None, :] - protos.protos[c].T[None]) ** 2).sum(axis=-1)  # (n, K)
        out.protos[c] = patches[d.argmin(axis=0)].T
    return out


def stable_rank(P) -> float:
    """||P||_F^2 / sigma_max(P)^2, in [1, rank(P)]."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2:
        raise BadShape(f"expected a matrix, got {P.shape}")
    smax = np.linalg.norm(P, 2)
    if smax == 0:
        raise ZeroMatrix("stable rank of the zero matrix is undefined")
    return float((P * P).sum() / smax**2)


def mean_pairwise_cosine(P) -> float:
    """Mean cosine similarity over distinct column pairs of P (1.0 for one column)."""
    P = np.asarray(P, dtype=np.float64)
    K = P.shape[1]
    if K < 2:
        return 1.0
    V = P / np.linalg.norm(P, axis=0, keepdims=True)
    G = V.T @ V
    return float((G.sum() - np.trace(G)) / (K * (K - 1)))


@dataclass
class NCMetrics:
    class_means: np.ndarray  # (C, D)
    within_trace: float  # tr(Sigma_W)
    etf_deviation: float
    mean_cosine: float  # mean pairwise cosine of centred class means


def pool_features(F) -> np.ndarray:
    """Global average pooling (B, D, H, W) -> (B, D)."""
    F = np.asarray(F, dtype=np.float64)
    return F.reshape(F.shape[0], F.shape[1], -1).mean(axis=-1)


def nc_metrics(features, labels) -> NCMetrics:
    """Class means, pooled within-class covariance trace and simplex-ETF deviation.

    ETF deviation is max over class pairs of |cos(mu_c - mu, mu_c' - mu) + 1/(C-1)|
    with mu the mean of the class means.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if classes.size < 2:
        raise Degenerate("need at least two classes")
    counts = np.array([(y == c).sum() for c in classes])
    if counts.min() < 2:
        raise Degenerate("every class needs at least two samples")
    mu = np.stack([X[y == c].mean(axis=0) for c in classes])
    pos = np.searchsorted(classes, y)
    within = float(((X - mu[pos]) ** 2).sum() / X.shape[0])
    Mc = mu - mu.mean(axis=0)
    V = Mc / np.maximum(np.linalg.norm(Mc, axis=1, keepdims=True), 1e-300)
    G = V @ V.T
    C = classes.size
    off = ~np.eye(C, dtype=bool)
    dev = float(np.abs(G[off] + 1.0 / (C - 1)).max())
    return NCMetrics(mu, within, dev, float(G[off].mean()))


@dataclass
class BaselineState:
    backbone: BackboneParams
    protos: EuclideanPrototypes
    step: int = 0


def init_baseline(data: Dataset, cfg: TrainingConfig) -> BaselineState:
    bb = BackboneParams.init(cfg.D, data.channels, cfg.seed)
    F = embed(data.raw, bb)
    return BaselineState(bb, init_prototypes(F, data.labels, data.num_classes, cfg.K, cfg.seed))


def baseline_batch(state: BaselineState, raw: np.ndarray, y: np.ndarray):
    """Mean CE of one batch and its gradients.

    Returns (ce_sum, n_correct, dW, db, dP, dfc); max pooling routes the
    gradient to each prototype's nearest patch.
    """
    B = y.size
    F = embed(raw, state.backbone)
    Ff = F.reshape(B, F.shape[1], -1)
    D = Ff.shape[1]
    S, loc = baseline_scores(F, state.protos, return_argmax=True)
    fc = state.protos.fc
    logits = S @ fc.T
    logp = log_softmax(logits)
    ce_sum = float(-logp[np.arange(B), y].sum())
    correct = int((logits.argmax(axis=1) == y).sum())
    dz = np.exp(logp)
    dz[np.arange(B), y] -= 1.0
    dz /= B
    dfc = dz.T @ S
    dS = (dz @ fc).reshape(loc.shape)  # (B, C, K)
    flat_loc = loc.reshape(B, 1, -1)  # (B, 1, C*K)
    Fl = np.take_along_axis(Ff, np.broadcast_to(flat_loc, (B, D, flat_loc.shape[-1])), axis=-1)
    Fl = Fl.reshape(B, D, *loc.shape[1:])  # winning patch per prototype
    diff = Fl - state.protos.protos.transpose(1, 0, 2)[None]  # (B, D, C, K)
    dP = np.einsum("bck,bdck->cdk", dS, 2.0 * diff)
    contrib = (-2.0 * diff * dS[:, None]).reshape(B, D, -1)
    dF = np.zeros_like(Ff)
    for b in range(B):
        np.add.at(dF[b].T, flat_loc[b, 0], contrib[b].T)
    dW, db, _ = embed_backward(dF.reshape(F.shape), raw, state.backbone)
    return ce_sum, correct, dW, db, dP, dfc


def baseline_epoch(state: BaselineState, data: Dataset, cfg: TrainingConfig, epoch: int,
                   total_steps: int) -> tuple[BaselineState, float, float]:
    """One SGD epoch on backbone, prototypes and last layer. Returns (state, ce, acc)."""
    s = BaselineState(state.backbone.copy(), state.protos.copy(), state.step)
    order = np.random.default_rng(cfg.seed ^ epoch).permutation(len(data))
    ce_sum = 0.0
    correct = 0
    for start in range(0, len(data), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        ce, ok, dW, db, dP, dfc = baseline_batch(s, data.raw[idx], data.labels[idx])
        ce_sum += ce
        correct += ok
        lr = cosine_lr(min(s.step, total_steps), max(total_steps, 1), cfg.lr_max, cfg.lr_min)
        s.backbone.weight -= lr * dW
        s.backbone.bias -= lr * db
        s.protos.protos -= lr * dP
        s.protos.fc -= lr * dfc
        s.step += 1
    return s, ce_sum / len(data), correct / len(data)


def baseline_accuracy(state: BaselineState, data: Dataset) -> float:
    F = embed(data.raw, state.backbone)
    logits = baseline_scores(F, state.protos) @ state.protos.fc.T
    return float((logits.argmax(axis=1) == data.labels).mean())


def prototype_stats(protos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-class stable rank and mean pairwise cosine of a (C, D, K) stack."""
    return (np.array([stable_rank(P) for P in protos]),
            np.array([mean_pairwise_cosine(P) for P in protos]))


BASELINE_LR_SCALE = 0.03


def baseline_config(cfg: TrainingConfig, lr_scale: float = BASELINE_LR_SCALE) -> TrainingConfig:
    """Distance scores grow with |f|^2, so the baseline runs at a smaller step."""
    return replace(cfg, lr_max=cfg.lr_max * lr_scale, lr_min=cfg.lr_min * lr_scale)


def train_baseline(data: Dataset, cfg: TrainingConfig, callback=None) -> BaselineState:
    """SGD for cfg.epochs, then the nearest-patch projection of every prototype.

    ``cfg`` is used as given; see ``baseline_config`` for the usual scaling.
    """
    state = init_baseline(data, cfg)
    T = cfg.epochs * steps_per_epoch(len(data), cfg.batch_size)
    for epoch in range(cfg.epochs):
        state, ce, acc = baseline_epoch(state, data, cfg, epoch, T)
        if callback is not None:
            callback(epoch + 1, state, ce, acc)
    state.protos = project_prototypes(state.protos, data, state.backbone)
    return state


@dataclass
class CollapseReport:
    rows: list[dict] = field(default_factory=list)  # per epoch
    final: dict = field(default_factory=dict)

    COLUMNS = ("epoch", "baseline_ce", "baseline_acc", "baseline_min_srank", "baseline_max_srank",
               "baseline_min_cos", "within_trace", "etf_deviation", "amp_residual",
               "amp_mean_rank", "amp_min_srank")


def collapse_demo(spec: SyntheticSpec, cfg: TrainingConfig) -> CollapseReport:
    """Train the baseline and the subspace model on identical data and seed."""
    data = gen_synthetic(spec)
    report = CollapseReport()

    def on_baseline(epoch, st, ce, acc):
        sr, cos = prototype_stats(st.protos.protos)
        nc = nc_metrics(pool_features(embed(data.raw, st.backbone)), data.labels)
        report.rows.append({"epoch": epoch, "baseline_ce": ce, "baseline_acc": acc,
                            "baseline_min_srank": sr.min(), "baseline_max_srank": sr.max(),
                            "baseline_min_cos": cos.min(), "within_trace": nc.within_trace,
                            "etf_deviation": nc.etf_deviation})

    base = train_baseline(data, baseline_config(cfg), on_baseline)
    amp_rows = []

    def on_amp(st, rep):
        amp_rows.append({"amp_residual": rep.residual, "amp_mean_rank": float(rep.ranks.mean()),
                         "amp_min_srank": min(stable_rank(U) for U in st.bases)})

    amp, _ = fit(data, cfg, callback=on_amp)
    for row, extra in zip(report.rows, amp_rows):
        row.update(extra)
    sr, cos = prototype_stats(base.protos.protos)
    report.final = {
        "baseline_min_srank": float(sr.min()), "baseline_max_srank": float(sr.max()),
        "baseline_mean_srank": float(sr.mean()), "baseline_min_cos": float(cos.min()),
        "baseline_acc": baseline_accuracy(base, data),
        "amp_residual": amp.residual(),
        "amp_min_srank": float(min(stable_rank(U) for U in amp.bases)),
        "amp_min_rank": int((amp.capacities > 0).sum(axis=1).min()),
        "K": cfg.K,
    }
    log.info("collapse demo final: %s", report.final)
    return report
