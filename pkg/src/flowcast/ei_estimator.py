"""Voter-transition estimation within a zone (revised Brown-Payne model).

Station ``s`` has origin counts ``n_s`` (first election) and destination
counts ``y_s`` (second election).  Every origin voter picks a destination
independently with the zone-wide row probabilities ``p_i``, so

    E[y_s]   = P' n_s
    Var(y_s) = phi * sum_i n_si (diag(p_i) - p_i p_i')

Rows of ``P`` are parameterised by logits against the last destination,
``theta_ij = log(p_ij / p_iJ)``, which keeps every probability inside (0, 1).
The last destination is dropped from ``y_s`` to make the covariance
non-singular.

``theta`` solves the quasi-score equations

    sum_s D_s' V_s^-1 (y_s - mu_s) = 0,      D_s = d mu_s / d theta,

by Fisher scoring.  Each step holds ``V_s`` at the current iterate and
maximises the Gaussian log-likelihood with that covariance (a generalised
least squares objective), with step halving on non-increase.  ``phi`` is the
Pearson statistic over its residual degrees of freedom, floored at 1, and
scales the inverse expected information to give ``cov_theta``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateOption,
    DimensionMismatch,
    InfeasibleMargins,
    NoConvergence,
    NonPSDCovariance,
    NotConverged,
    SingularInformation,
    ValidationError,
)

logger = logging.getLogger(__name__)

REGION = "REGION"
THETA_BOUND = 30.0
MAX_STEP = 10.0
BOUNDARY_P = 1e-6


@dataclass(frozen=True)
class EstimatorConfig:
    max_iter: int = 200
    tol_loglik: float = 1e-8
    tol_grad: float = 1e-6
    phi_floor: float = 1.0
    rake_tol: float = 1e-9
    rake_max_sweeps: int = 1000
    max_halvings: int = 40

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown estimator config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class TransitionEstimate:
    """Fitted transition model of one zone."""

    zone_id: str
    origin_labels: tuple
    destination_labels: tuple
    P: np.ndarray
    theta: np.ndarray
    cov_theta: np.ndarray
    phi: float
    se_P: np.ndarray
    fit: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "zone_id": self.zone_id,
            "origins": list(self.origin_labels),
            "destinations": list(self.destination_labels),
            "P": self.P.tolist(),
            "se_P": self.se_P.tolist(),
            "theta": self.theta.tolist(),
            "cov_theta": self.cov_theta.tolist(),
            "phi": self.phi,
            "fit": self.fit,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["zone_id"], tuple(d["origins"]), tuple(d["destinations"]),
                   np.array(d["P"]), np.array(d["theta"]), np.array(d["cov_theta"]),
                   float(d["phi"]), np.array(d["se_P"]), dict(d.get("fit", {})))


@dataclass(frozen=True, eq=False)
class FlowTable:
    """Expected origin x destination vote counts.

    ``se`` optionally holds count-scale standard errors (origin total times
    the standard error of the transition probability).
    """

    zone_id: str
    origin_labels: tuple
    destination_labels: tuple
    F: np.ndarray
    row_margins: np.ndarray
    col_margins: np.ndarray
    se: np.ndarray | None = None

    def __post_init__(self):
        F = np.asarray(self.F, dtype=float)
        if F.shape != (len(self.origin_labels), len(self.destination_labels)):
            raise DimensionMismatch(
                f"flow table {self.zone_id}: shape {F.shape} does not match labels"
            )
        if (F < 0).any():
            raise ValidationError(f"flow table {self.zone_id} has negative entries")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "row_margins", np.asarray(self.row_margins, dtype=float))
        object.__setattr__(self, "col_margins", np.asarray(self.col_margins, dtype=float))
        if self.se is not None:
            object.__setattr__(self, "se", np.asarray(self.se, dtype=float))

    @classmethod
    def from_counts(cls, zone_id, origins, destinations, F, se=None):
        F = np.asarray(F, dtype=float)
        return cls(zone_id, tuple(origins), tuple(destinations), F, F.sum(axis=1), F.sum(axis=0), se)

    def transpose(self):
        se = None if self.se is None else self.se.T
        return FlowTable(self.zone_id, self.destination_labels, self.origin_labels, self.F.T,
                         self.col_margins, self.row_margins, se)


# -- logit parameterisation ------------------------------------------------

def row_probabilities(theta):
    """Row-wise softmax of ``[theta, 0]``."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    full = np.concatenate([theta, np.zeros((theta.shape[0], 1))], axis=1)
    full -= full.max(axis=1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=1, keepdims=True)


def probability_jacobian(P):
    """d vec(P) / d vec(theta) as an (I*J, I*K) matrix, row-major vectorisation."""
    I, J = P.shape
    K = J - 1
    G = np.zeros((I * J, I * K))
    for i in range(I):
        p = P[i]
        # dp_ij / dtheta_il = p_ij (delta_jl - p_il)
        block = -np.outer(p, p[:K])
        block[np.arange(K), np.arange(K)] += p[:K]
        G[i * J:(i + 1) * J, i * K:(i + 1) * K] = block
    return G


class _ZoneData:
    """Arrays of one zone prepared for fitting."""

    def __init__(self, N, Y):
        N = np.asarray(N, dtype=float)
        Y = np.asarray(Y, dtype=float)
        if N.ndim != 2 or Y.ndim != 2 or N.shape[0] != Y.shape[0]:
            raise DimensionMismatch("origin and destination count matrices must share stations")
        t1 = N.sum(axis=1)
        t2 = Y.sum(axis=1)
        keep = (t1 > 0) & (t2 > 0)
        N, Y, t1, t2 = N[keep], Y[keep], t1[keep], t2[keep]
        # origin composition carried onto the destination total
        self.N = N * (t2 / t1)[:, None]
        self.Y = Y
        self.S, self.I = N.shape
        self.J = Y.shape[1]
        self.K = self.J - 1


def _moments(theta, data, ref=None):
    """Mean residuals, covariances and mean Jacobians on the reduced scale.

    ``theta`` holds each row's logits against its reference column ``ref[i]``
    (default: the last destination), the other columns in order.
    """
    I, K = data.I, data.K
    ref = np.full(I, K) if ref is None else np.asarray(ref)
    full = _full_logits(theta, ref)
    P = row_probabilities(full[:, :K] - full[:, K:])
    Pr = P[:, :K]
    cols = _nonref_columns(ref, K + 1)
    Pc = np.take_along_axis(P, cols, axis=1)
    # W_i[k, l] = d p_ik / d theta_il = p_ik (delta(k, col_il) - p_i,col_il)
    W = (Pr[:, :, None] * (np.arange(K)[None, :, None] == cols[:, None, :])
         - Pr[:, :, None] * Pc[:, None, :])
    mu = data.N @ P
    R = data.Y[:, :K] - mu[:, :K]
    V = np.einsum("si,ik,kl->skl", data.N, Pr, np.eye(K)) \
        - np.einsum("si,ik,il->skl", data.N, Pr, Pr)
    # D[s, k, (i, l)] = n_si W_i[k, l]
    D = np.einsum("si,ikl->skil", data.N, W).reshape(data.S, K, I * K)
    return P, R, V, D


def _nonref_columns(ref, J):
    """Per row, the destination columns other than ``ref[i]``, in order."""
    allc = np.broadcast_to(np.arange(J), (len(ref), J))
    return allc[allc != np.asarray(ref)[:, None]].reshape(len(ref), J - 1)


def _full_logits(theta, ref):
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    I, K = theta.shape
    full = np.zeros((I, K + 1))
    np.put_along_axis(full, _nonref_columns(ref, K + 1), theta, axis=1)
    return full


def _rereference(full, ref):
    """Logits of ``full`` rows against columns ``ref``."""
    shifted = full - np.take_along_axis(full, np.asarray(ref)[:, None], axis=1)
    return np.take_along_axis(shifted, _nonref_columns(ref, full.shape[1]), axis=1)


def _reference_map(ref, K):
    """Matrix taking vec(theta against ``ref``) to vec(theta against the last column)."""
    I = len(ref)
    cols = _nonref_columns(ref, K + 1)
    A = np.zeros((I * K, I * K))
    for i in range(I):
        pos = {c: i * K + l for l, c in enumerate(cols[i])}
        for k in range(K):
            # theta_ik = full_ik - full_iK, each entry either a parameter or 0
            if k in pos:
                A[i * K + k, pos[k]] += 1.0
            if K in pos:
                A[i * K + k, pos[K]] -= 1.0
    return A


def _gls_objective(theta, data, Vinv, ref=None):
    ref = np.full(data.I, data.K) if ref is None else np.asarray(ref)
    full = _full_logits(theta, ref)
    P = row_probabilities(full[:, :data.K] - full[:, data.K:])
    R = data.Y[:, :data.K] - data.N @ P[:, :data.K]
    return -0.5 * float(np.einsum("sk,skl,sl->", R, Vinv, R))


def _inv_batch(V):
    try:
        L = np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        raise SingularInformation("a station covariance is not positive definite") from None
    eye = np.broadcast_to(np.eye(V.shape[-1]), V.shape)
    Linv = np.linalg.solve(L, eye)
    return np.einsum("ski,skj->sij", Linv, Linv)


def asymptotic_loglik(theta, data, weights_theta=None):
    """Gaussian log-likelihood kernel with the covariance frozen at ``weights_theta``.

    ``theta`` is I x (J-1).  Without ``weights_theta`` the covariance is
    evaluated at ``theta`` itself.
    """
    theta = np.asarray(theta, dtype=float)
    wt = theta if weights_theta is None else np.asarray(weights_theta, dtype=float)
    _, _, V, _ = _moments(wt, data)
    return _gls_objective(theta, data, _inv_batch(V))


def quasi_score(theta, data):
    """Score and expected information at ``theta`` (covariance held at ``theta``).

    The score is the exact gradient of :func:`asymptotic_loglik` with the
    weights frozen at ``theta``.
    """
    _, R, V, D = _moments(np.asarray(theta, dtype=float), data)
    Vinv = _inv_batch(V)
    VD = np.einsum("skl,slq->skq", Vinv, D)
    U = np.einsum("skq,sk->q", VD, R)
    info = np.einsum("skq,skr->qr", D, VD)
    return U, info


def _scaled_solve(A, b, rcond=1e-13):
    """Solve ``A x = b`` for symmetric PSD ``A`` after Jacobi scaling.

    Directions whose scaled eigenvalue falls below ``rcond`` times the largest
    are left out (minimum-norm solution).
    """
    if A.size == 0:
        return np.zeros(0)
    s = np.sqrt(np.maximum(np.diag(A), 1e-300))
    As = A / np.outer(s, s)
    w, Q = np.linalg.eigh(As)
    keep = w > rcond * max(w.max(), 1e-300)
    x = Q[:, keep] @ ((Q[:, keep].T @ (b / s)) / w[keep])
    return x / s


def _active_step(theta, U, info, p_cell):
    """Fisher step with cells stuck at the boundary held fixed.

    A parameter is frozen when its cell probability ``p_cell`` is below
    ``BOUNDARY_P`` (or it sits at the logit bound) and the step would push it
    further out.  A parameter heading out faster than ``MAX_STEP`` with an
    outward score is moved by exactly ``-MAX_STEP`` and the others are solved
    with it held; clipping it inside the joint step would spoil the ascent
    direction.

    Returns the mask of moving parameters and the step.
    """
    flat = theta.ravel()
    free = ~(((flat <= -THETA_BOUND) & (U < 0)) | ((flat >= THETA_BOUND) & (U > 0)))
    push = np.zeros_like(free)
    step = np.zeros_like(U)
    for _ in range(U.size + 1):
        step[:] = 0.0
        step[free] = _scaled_solve(info[np.ix_(free, free)], U[free])
        outward = free & (p_cell < BOUNDARY_P) & (step < 0)
        far = free & ~outward & (step < -MAX_STEP) & (U < 0)
        if not (outward.any() or far.any()):
            break
        free &= ~(outward | far)
        push |= far
    step[push] = -MAX_STEP
    return free | push, step


def _initial_theta(origins, destinations, loyalty=None, bonus=1.0):
    I, J = len(origins), len(destinations)
    full = np.zeros((I, J))
    loyalty = dict(loyalty or {})
    for i, o in enumerate(origins):
        target = loyalty.get(o, o)
        if target in destinations:
            full[i, destinations.index(target)] += bonus
    return full[:, :-1] - full[:, -1:]


def _check_inputs(N, Y, origins, destinations):
    S, I = N.shape
    J = Y.shape[1]
    if I != len(origins) or J != len(destinations):
        raise DimensionMismatch("count matrices do not match the option labels")
    if S < 2:
        raise ValidationError(f"need at least 2 stations with votes, got {S}")
    if J < 2:
        raise ValidationError("need at least 2 destinations")
    dead_o = [origins[i] for i in np.flatnonzero(N.sum(axis=0) == 0)]
    dead_d = [destinations[j] for j in np.flatnonzero(Y.sum(axis=0) == 0)]
    if dead_o or dead_d:
        raise DegenerateOption(
            f"options with zero total in every station must be collapsed first: {dead_o + dead_d}"
        )
    if I > 1 and np.linalg.matrix_rank(N) < I:
        raise SingularInformation(
            "origin counts are collinear across stations; transition rows are not identified"
        )


def fit_counts(N, Y, origins, destinations, zone_id="", cfg=None, loyalty=None):
    """Fit the transition model to raw count matrices.

    Parameters
    ----------
    N : array, shape (S, I)
        Origin counts per station.
    Y : array, shape (S, J)
        Destination counts per station.
    origins, destinations : sequence of str
    cfg : EstimatorConfig, optional
    loyalty : dict, optional
        Origin label -> destination label used to seed the diagonal of the
        starting point; identical labels are matched by default.
    """
    cfg = cfg or EstimatorConfig()
    origins, destinations = tuple(origins), tuple(destinations)
    data = _ZoneData(N, Y)
    _check_inputs(data.N, data.Y, origins, destinations)
    I, K = data.I, data.K

    if I == 1:
        # closed form: aggregate shares
        shares = data.Y.sum(axis=0) / data.Y.sum()
        full = np.log(shares)[None, :]
    else:
        theta0 = _initial_theta(origins, destinations, loyalty)
        full = np.concatenate([theta0, np.zeros((I, 1))], axis=1)

    # Each row is parameterised against its currently largest cell, so a
    # vanishing cell never drags a whole row of logits off to infinity.
    converged = False
    rel_change = np.inf
    decrement = np.inf
    damp = 1.0
    prev_step = None
    it = 0
    for it in range(1, cfg.max_iter + 1):
        ref = np.argmax(full, axis=1)
        eta = _rereference(full, ref)
        P, R, V, D = _moments(eta, data, ref)
        Vinv = _inv_batch(V)
        VD = np.einsum("skl,slq->skq", Vinv, D)
        U = np.einsum("skq,sk->q", VD, R)
        info = np.einsum("skq,skr->qr", D, VD)
        p_cell = np.take_along_axis(P, _nonref_columns(ref, K + 1), axis=1).ravel()
        moving, step = _active_step(eta, U, info, p_cell)
        decrement = float(np.sqrt(max(U[moving] @ step[moving], 0.0)))
        if decrement < cfg.tol_grad and rel_change < cfg.tol_loglik:
            converged = True
            break
        step = np.clip(step, -MAX_STEP, MAX_STEP).reshape(I, K)
        # the weights move with the iterate, so full steps can bounce between
        # two points; damp while successive steps point against each other
        if prev_step is not None and np.sum(step * prev_step) < 0:
            damp = max(0.5 * damp, 2.0 ** -10)
        else:
            damp = min(1.0, 2.0 * damp)
        prev_step = step
        obj0 = -0.5 * float(np.einsum("sk,skl,sl->", R, Vinv, R))
        alpha = damp
        for _ in range(cfg.max_halvings):
            cand = np.clip(eta + alpha * step, -THETA_BOUND, THETA_BOUND)
            obj1 = _gls_objective(cand, data, Vinv, ref)
            if obj1 >= obj0:
                break
            alpha *= 0.5
        else:
            cand, obj1 = eta, obj0
        rel_change = abs(obj1 - obj0) / max(1.0, abs(obj0))
        full = _full_logits(cand, ref)
    if not converged:
        raise NotConverged(
            f"zone {zone_id}: no convergence after {cfg.max_iter} iterations "
            f"(scaled gradient {decrement:.3g})"
        )

    ref = np.argmax(full, axis=1)
    eta = _rereference(full, ref)
    P, R, V, D = _moments(eta, data, ref)
    Vinv = _inv_batch(V)
    VD = np.einsum("skl,slq->skq", Vinv, D)
    info = np.einsum("skq,skr->qr", D, VD)
    pearson = float(np.einsum("sk,skl,sl->", R, Vinv, R))
    df = data.S * K - I * K
    phi = max(cfg.phi_floor, pearson / df) if df > 0 else cfg.phi_floor
    cols = _nonref_columns(ref, K + 1)
    interior = (np.take_along_axis(P, cols, axis=1) > BOUNDARY_P).ravel()
    cov_eta = np.zeros_like(info)
    if interior.any():
        block = info[np.ix_(interior, interior)]
        scale = np.sqrt(np.diag(block))
        cond = np.linalg.cond(block / np.outer(scale, scale))
        if not np.isfinite(cond) or cond > 1e12:
            raise SingularInformation(
                f"zone {zone_id}: information matrix is singular (cond {cond:.3g})"
            )
        cov_eta[np.ix_(interior, interior)] = phi * np.linalg.inv(block)
    A = _reference_map(ref, K)
    cov = A @ cov_eta @ A.T
    cov = 0.5 * (cov + cov.T)
    theta = full[:, :K] - full[:, K:]
    se = _delta_se(P, cov)
    boundary = [(origins[q // K], destinations[cols[q // K, q % K]])
                for q in np.flatnonzero(~interior)]
    fit = {
        "iterations": it,
        "converged": True,
        "loglik": -0.5 * pearson,
        "pearson": pearson,
        "df": int(df),
        "scaled_gradient": decrement,
        "stations": int(data.S),
        "boundary_cells": [list(c) for c in boundary],
    }
    return TransitionEstimate(str(zone_id), origins, destinations, P, theta, cov, float(phi), se, fit)


def fit_zone(z, cfg=None, loyalty=None):
    """Fit the transition model for one :class:`~flowcast.data_model.ZoneTable`."""
    return fit_counts(z.origin_counts, z.destination_counts, z.options1, z.options2,
                      zone_id=z.zone_id, cfg=cfg, loyalty=loyalty)


def zone_data(z):
    return _ZoneData(z.origin_counts, z.destination_counts)


# -- derived quantities ------------------------------------------------------

def _delta_se(P, cov):
    G = probability_jacobian(P)
    var = np.einsum("aq,qr,ar->a", G, cov, G)
    return np.sqrt(np.clip(var, 0.0, None)).reshape(P.shape)


def standard_errors(est):
    """Delta-method standard errors of the transition probabilities."""
    cov = np.asarray(est.cov_theta, dtype=float)
    if not np.allclose(cov, cov.T, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise NonPSDCovariance("cov_theta is not symmetric")
    eig = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    if eig.size and eig.min() < -1e-10 * max(1.0, abs(eig.max())):
        raise NonPSDCovariance(f"cov_theta has negative eigenvalue {eig.min():.3g}")
    return _delta_se(est.P, cov)


def predict_station(est, s):
    """Expected destination counts of station ``s`` under the fitted rows."""
    n = np.asarray(s.counts1 if hasattr(s, "counts1") else s, dtype=float)
    if n.shape != (est.P.shape[0],):
        raise DimensionMismatch(f"station has {n.shape} origins, estimate has {est.P.shape[0]}")
    if hasattr(s, "options1") and tuple(s.options1) != est.origin_labels:
        raise DimensionMismatch("station origin labels differ from the estimate's")
    return n @ est.P


def goodness_of_fit(est, z):
    """Station-level fit of an estimate to the zone it came from.

    Returns a dict with Pearson residuals (stations x destinations), each
    station's chi-square on the reduced scale, its degrees of freedom share and
    the zone pseudo-R^2.
    """
    if hasattr(z, "origin_counts"):
        data = zone_data(z)
    else:
        data = _ZoneData(*z)
    P = est.P
    mu = data.N @ P
    resid = data.Y - mu
    var_full = est.phi * (data.N @ (P * (1.0 - P)))
    with np.errstate(divide="ignore", invalid="ignore"):
        pearson = np.where(var_full > 0, resid / np.sqrt(var_full), 0.0)
    _, R, V, _ = _moments(est.theta, data)
    Vinv = _inv_batch(V)
    chi2 = np.einsum("sk,skl,sl->s", R, Vinv, R) / est.phi
    ss_res = float((resid ** 2).sum())
    ss_tot = float(((data.Y - data.Y.mean(axis=0)) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    df_station = data.K * (1.0 - data.I / data.S)
    return {
        "pearson_residuals": pearson,
        "chi2": chi2,
        "df_per_station": df_station,
        "pseudo_r2": r2,
    }


def rake_to_margins(F, rows, cols, tol=1e-9, max_sweeps=1000, return_sweeps=False):
    """Iterative proportional fitting of ``F`` to row and column targets.

    Zero cells stay zero and cross-product ratios of ``F`` are preserved.
    """
    F = np.array(F, dtype=float)
    rows = np.asarray(rows, dtype=float)
    cols = np.asarray(cols, dtype=float)
    if F.shape != (rows.size, cols.size):
        raise DimensionMismatch(f"table {F.shape} vs margins ({rows.size}, {cols.size})")
    if (F < 0).any() or (rows < 0).any() or (cols < 0).any():
        raise InfeasibleMargins("raking needs non-negative tables and margins")
    total = rows.sum()
    if abs(total - cols.sum()) > 1e-9 * max(1.0, abs(total)):
        raise InfeasibleMargins(f"row total {total} differs from column total {cols.sum()}")
    rs, cs = F.sum(axis=1), F.sum(axis=0)
    if ((rs == 0) & (rows > 0)).any() or ((cs == 0) & (cols > 0)).any():
        raise InfeasibleMargins("an all-zero row or column has a positive target margin")

    def close(a, b):
        return np.all(np.abs(a - b) <= tol * np.maximum(np.abs(b), 1e-300) + 1e-12 * max(1.0, total))

    sweeps = 0
    while not (close(F.sum(axis=1), rows) and close(F.sum(axis=0), cols)):
        if sweeps >= max_sweeps:
            raise NoConvergence(f"raking did not converge in {max_sweeps} sweeps")
        rs = F.sum(axis=1)
        F *= np.divide(rows, rs, out=np.zeros_like(rows), where=rs > 0)[:, None]
        cs = F.sum(axis=0)
        F *= np.divide(cols, cs, out=np.zeros_like(cols), where=cs > 0)[None, :]
        sweeps += 1
    return (F, sweeps) if return_sweeps else F


def flow_counts(est, z, cfg=None):
    """Expected origin -> destination counts, raked to the zone's observed margins."""
    cfg = cfg or EstimatorConfig()
    data = zone_data(z) if hasattr(z, "origin_counts") else _ZoneData(*z)
    rows = data.N.sum(axis=0)
    cols = data.Y.sum(axis=0)
    F0 = rows[:, None] * est.P
    F = rake_to_margins(F0, rows, cols, tol=cfg.rake_tol, max_sweeps=cfg.rake_max_sweeps)
    se = rows[:, None] * est.se_P
    return FlowTable(est.zone_id, est.origin_labels, est.destination_labels, F, rows, cols, se)
