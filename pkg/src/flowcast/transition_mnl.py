"""Multinomial logit models of zone transition counts on zone covariates.

For a fixed anchor (an origin for outgoing transitions, a destination for
incoming ones) the counts ``n_zj`` of zone ``z`` are treated as multinomial
with total ``n_z`` and

    log(p_zj / p_zk) = b0_j + sum_v x_zv b_jv

where ``k`` is the reference option.  Covariates are centred on their zone
mean before fitting, so intercepts are logits at the average zone.  Counts
estimated by ecological inference are real-valued; they enter the
log-likelihood as weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from .covariate_lab import CovariateMatrix, add_zone_dummies  # noqa: F401  (re-export)
from .errors import (
    DimensionMismatch,
    MissingAnchor,
    NotConverged,
    RankDeficientDesign,
    Separation,
    ValidationError,
)

DEFAULT_SCHEDULE = (0.5, 1.0)
DEFAULT_SIGNIFICANCE = (0.01, 0.08)
DEFAULT_STEP = 1e-5
SEPARATION_LIMIT = 30.0
STEP_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class TransitionCountPanel:
    """Zone x option transition counts for one anchor option."""

    direction: str
    anchor: str
    zone_ids: tuple
    option_labels: tuple
    counts: np.ndarray
    totals: np.ndarray
    count_se: np.ndarray | None = None

    def __post_init__(self):
        if self.direction not in ("outgoing", "incoming"):
            raise ValidationError(f"direction must be outgoing or incoming, not {self.direction!r}")
        counts = np.asarray(self.counts, dtype=float)
        if counts.shape != (len(self.zone_ids), len(self.option_labels)):
            raise DimensionMismatch("panel counts do not match zones x options")
        if (counts < 0).any():
            raise ValidationError("panel counts must be non-negative")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "totals", np.asarray(self.totals, dtype=float))
        if self.count_se is not None:
            object.__setattr__(self, "count_se", np.asarray(self.count_se, dtype=float))

    def subset(self, zone_ids):
        idx = [self.zone_ids.index(z) for z in zone_ids]
        se = None if self.count_se is None else self.count_se[idx]
        return replace(self, zone_ids=tuple(zone_ids), counts=self.counts[idx],
                       totals=self.totals[idx], count_se=se)


def _merge_groups(labels, groups):
    """Column-merge matrix for ``groups`` (new label -> member labels)."""
    labels = tuple(labels)
    groups = dict(groups or {})
    owner = {}
    for new, members in groups.items():
        for m in members:
            if m not in labels:
                raise ValidationError(f"group {new!r} names unknown option {m!r}")
            if m in owner:
                raise ValidationError(f"option {m!r} appears in two groups")
            owner[m] = new
    out = []
    for lab in labels:
        tgt = owner.get(lab, lab)
        if tgt not in out:
            out.append(tgt)
    A = np.zeros((len(labels), len(out)))
    for i, lab in enumerate(labels):
        A[i, out.index(owner.get(lab, lab))] = 1.0
    return tuple(out), A


def build_panel(flows, anchor, direction="outgoing", groups=None):
    """Collect the anchor's row (outgoing) or column (incoming) from every zone.

    ``groups`` merges options into aggregated labels (member counts summed,
    standard errors combined in quadrature).
    """
    flows = list(flows)
    if not flows:
        raise ValidationError("no flow tables")
    rows, ses, zones = [], [], []
    labels = None
    for f in flows:
        if direction == "outgoing":
            keys, other, M, S = f.origin_labels, f.destination_labels, f.F, f.se
        elif direction == "incoming":
            keys, other, M, S = f.destination_labels, f.origin_labels, f.F.T, \
                (None if f.se is None else f.se.T)
        else:
            raise ValidationError(f"direction must be outgoing or incoming, not {direction!r}")
        if anchor not in keys:
            raise MissingAnchor(f"zone {f.zone_id}: no option {anchor!r}")
        if labels is None:
            labels = other
        elif other != labels:
            raise ValidationError(f"zone {f.zone_id}: option labels differ across zones")
        i = keys.index(anchor)
        rows.append(M[i])
        ses.append(None if S is None else S[i])
        zones.append(f.zone_id)
    counts = np.array(rows)
    count_se = None if any(s is None for s in ses) else np.array(ses)
    if groups:
        labels, A = _merge_groups(labels, groups)
        counts = counts @ A
        if count_se is not None:
            count_se = np.sqrt((count_se ** 2) @ A)
    return TransitionCountPanel(direction, anchor, tuple(zones), tuple(labels), counts,
                                counts.sum(axis=1), count_se)


@dataclass(frozen=True, eq=False)
class MnlModel:
    """Fitted multinomial logit.

    ``beta0`` and the rows of ``beta``, ``mask``, ``z_ratios`` and
    ``p_values`` follow ``nonref_labels``.  ``cov_beta`` is indexed by
    ``free_index``: ``(row, 0)`` is an intercept and ``(row, 1 + v)`` the
    coefficient of covariate ``v``.
    """

    option_labels: tuple
    reference_index: int
    covariate_names: tuple
    zone_ids: tuple
    beta0: np.ndarray
    beta: np.ndarray
    mask: np.ndarray
    cov_beta: np.ndarray
    free_index: tuple
    z_ratios: np.ndarray
    p_values: np.ndarray
    loglik: float
    deviance: float
    null_deviance: float
    pct_deviance_explained: float
    x_mean: np.ndarray
    design: np.ndarray
    counts: np.ndarray
    iterations: int
    info: dict = field(default_factory=dict)

    @property
    def nonref_index(self):
        return tuple(j for j in range(len(self.option_labels)) if j != self.reference_index)

    @property
    def nonref_labels(self):
        return tuple(self.option_labels[j] for j in self.nonref_index)

    @property
    def reference(self):
        return self.option_labels[self.reference_index]

    def _params(self):
        return np.column_stack([self.beta0, self.beta])

    def probabilities_at(self, xc):
        """Option probabilities at centred covariates ``xc`` (rows = points)."""
        xc = np.atleast_2d(np.asarray(xc, dtype=float))
        return _probs(self._params(), np.column_stack([np.ones(len(xc)), xc]),
                      self.reference_index)

    def fitted(self):
        """Zone x option fitted probabilities."""
        return self.probabilities_at(self.design - self.x_mean)


def _probs(B, Xd, ref):
    """Softmax with a zero logit for the reference option."""
    eta = Xd @ B.T
    J = B.shape[0] + 1
    full = np.zeros((Xd.shape[0], J))
    nonref = [j for j in range(J) if j != ref]
    full[:, nonref] = eta
    full -= full.max(axis=1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=1, keepdims=True)


def loglik_and_derivatives(params, counts, Xd, ref, free):
    """Weighted multinomial log-likelihood, gradient and Hessian in the free parameters.

    ``params`` is the vector of free parameters laid out by ``free`` (a
    boolean (J-1) x (V+1) array).
    """
    Jm1, A = free.shape
    B = np.zeros((Jm1, A))
    B[free] = params
    P = _probs(B, Xd, ref)
    nonref = [j for j in range(Jm1 + 1) if j != ref]
    tot = counts.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ll = float(np.sum(np.where(counts > 0, counts * np.log(P), 0.0)))
    Pn = P[:, nonref]
    resid = counts[:, nonref] - tot[:, None] * Pn
    G = resid.T @ Xd
    W = tot[:, None, None] * (np.einsum("zj,jk->zjk", Pn, np.eye(Jm1))
                              - np.einsum("zj,zk->zjk", Pn, Pn))
    H = -np.einsum("zjk,za,zb->jakb", W, Xd, Xd).reshape(Jm1 * A, Jm1 * A)
    f = free.ravel()
    return ll, G.ravel()[f], H[np.ix_(f, f)]


def _saturated_ll(counts):
    tot = counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.sum(np.where(counts > 0, counts * np.log(counts / tot), 0.0)))


def _null_ll(counts):
    shares = counts.sum(axis=0) / counts.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.sum(np.where(counts > 0, counts * np.log(shares), 0.0)))


def _as_mask(mask, Jm1, V):
    if mask is None:
        return np.ones((Jm1, V), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (Jm1, V):
        raise DimensionMismatch(f"mask shape {mask.shape} != ({Jm1}, {V})")
    return mask


def _aligned(panel, X, covariates):
    if isinstance(X, CovariateMatrix):
        Xm = X.reorder(panel.zone_ids)
        names = Xm.names if covariates is None else tuple(covariates)
        return names, Xm.matrix(names)
    arr = np.asarray(X, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != len(panel.zone_ids):
        raise DimensionMismatch("covariate array must have one row per zone")
    names = tuple(covariates) if covariates is not None else tuple(f"x{v}" for v in range(arr.shape[1]))
    return names, arr


def fit(panel, X, mask=None, reference=None, covariates=None, tol=1e-8, max_iter=100):
    """Maximum-likelihood fit by Newton iterations with step halving.

    Parameters
    ----------
    panel : TransitionCountPanel
    X : CovariateMatrix or array (zones x covariates)
    mask : bool array, shape (J-1, V), optional
        Inclusion of each covariate for each non-reference option, in
        option order with the reference skipped.  Default: everything.
    reference : str or int, optional
        Reference option (default: the last option).
    covariates : sequence of str, optional
        Columns of ``X`` to use, in order.

    Convergence requires the gradient of the per-unit log-likelihood
    (divided by the total count) to fall below ``tol`` and the Newton step
    to fall below ``STEP_TOL``.
    """
    names, Xraw = _aligned(panel, X, covariates)
    counts = panel.counts
    Z, J = counts.shape
    if J < 2:
        raise ValidationError("need at least two options")
    if reference is None:
        ref = J - 1
    elif isinstance(reference, str):
        if reference not in panel.option_labels:
            raise ValidationError(f"unknown reference option {reference!r}")
        ref = panel.option_labels.index(reference)
    else:
        ref = int(reference) % J
    if (counts.sum(axis=1) <= 0).any():
        raise ValidationError("every zone needs a positive total")
    V = Xraw.shape[1]
    mask = _as_mask(mask, J - 1, V)
    x_mean = Xraw.mean(axis=0) if V else np.zeros(0)
    Xd = np.column_stack([np.ones(Z), Xraw - x_mean])
    free = np.column_stack([np.ones(J - 1, dtype=bool), mask])
    for r in range(J - 1):
        cols = Xd[:, free[r]]
        if np.linalg.matrix_rank(cols) < cols.shape[1]:
            raise RankDeficientDesign(
                f"design for option {panel.option_labels[[j for j in range(J) if j != ref][r]]!r} "
                "is rank deficient"
            )

    nonref = [j for j in range(J) if j != ref]
    shares = np.maximum(counts.sum(axis=0), 1e-12)
    B0 = np.zeros((J - 1, V + 1))
    B0[:, 0] = np.log(shares[nonref]) - np.log(shares[ref])
    params = B0[free]
    total = counts.sum()

    ll, g, H = loglik_and_derivatives(params, counts, Xd, ref, free)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            raise RankDeficientDesign("singular Hessian") from None
        # a vanishing gradient alone is not enough: under separation the
        # gradient dies out while the Newton steps stay large
        if np.abs(g).max() / total < tol and np.abs(step).max() < STEP_TOL:
            converged = True
            break
        if np.abs(g).max() / total < tol:
            # quadratic region: likelihood changes are below rounding noise
            cand = params + step
        else:
            alpha = 1.0
            for _ in range(50):
                cand = params + alpha * step
                ll1 = loglik_and_derivatives(cand, counts, Xd, ref, free)[0]
                if ll1 >= ll:
                    break
                alpha *= 0.5
            else:
                break
        params = cand
        ll, g, H = loglik_and_derivatives(params, counts, Xd, ref, free)
        Bcur = np.zeros((J - 1, V + 1))
        Bcur[free] = params
        if V and np.abs(Bcur[:, 1:]).max() > SEPARATION_LIMIT:
            raise Separation(
                f"coefficient exceeded {SEPARATION_LIMIT:g}: a covariate separates the options"
            )
    if not converged:
        if np.abs(g).max() / total < 1e3 * tol:
            converged = True
        else:
            raise NotConverged(f"multinomial fit did not converge in {max_iter} iterations")

    B = np.zeros((J - 1, V + 1))
    B[free] = params
    try:
        L = np.linalg.cholesky(-H)
    except np.linalg.LinAlgError:
        raise RankDeficientDesign("information matrix is not positive definite") from None
    Linv = np.linalg.inv(L)
    cov = Linv.T @ Linv
    free_index = tuple(zip(*np.nonzero(free)))
    se = np.full((J - 1, V + 1), np.nan)
    se[free] = np.sqrt(np.diag(cov))
    z = np.full((J - 1, V), np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        z[mask] = (B[:, 1:] / se[:, 1:])[mask]
    pv = np.where(np.isnan(z), np.nan, 2.0 * ndtr(-np.abs(np.nan_to_num(z))))
    sat = _saturated_ll(counts)
    dev = max(0.0, 2.0 * (sat - ll))
    null_dev = max(0.0, 2.0 * (sat - _null_ll(counts)))
    pct = 100.0 * (1.0 - dev / null_dev) if null_dev > 1e-12 * max(1.0, total) else 0.0
    return MnlModel(
        option_labels=tuple(panel.option_labels), reference_index=ref,
        covariate_names=tuple(names), zone_ids=tuple(panel.zone_ids),
        beta0=B[:, 0].copy(), beta=B[:, 1:].copy(), mask=mask.copy(), cov_beta=cov,
        free_index=tuple((int(a), int(b)) for a, b in free_index), z_ratios=z, p_values=pv,
        loglik=ll, deviance=dev, null_deviance=null_dev, pct_deviance_explained=pct,
        x_mean=x_mean, design=Xraw.copy(), counts=counts.copy(), iterations=it,
        info={"anchor": panel.anchor, "direction": panel.direction},
    )


def deviance_explained(m):
    """Percentage of the intercept-only deviance removed by the model."""
    if m.null_deviance <= 0:
        return 0.0
    return 100.0 * (1.0 - m.deviance / m.null_deviance)


def stepwise_select(panel, X, schedule=DEFAULT_SCHEDULE, reference=None, covariates=None,
                    mask=None):
    """Backward elimination of (option, covariate) cells by rising |z| thresholds.

    Starting from ``mask`` (default: every covariate on every option), each
    threshold in turn refits the current model and drops the cells whose
    |z| is below it.  The model refitted on the final mask is returned; its
    ``info["steps"]`` records the cells dropped at each threshold.
    """
    schedule = [float(t) for t in schedule]
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValidationError(f"stepwise schedule must be strictly increasing: {schedule}")
    model = fit(panel, X, mask=mask, reference=reference, covariates=covariates)
    current = model.mask.copy()
    steps = []
    for th in schedule:
        drop = current & (np.abs(np.nan_to_num(model.z_ratios, nan=np.inf)) < th)
        dropped = [(model.nonref_labels[r], model.covariate_names[v])
                   for r, v in zip(*np.nonzero(drop))]
        steps.append({"threshold": th, "dropped": [list(d) for d in dropped]})
        if drop.any():
            current = current & ~drop
            model = fit(panel, X, mask=current, reference=reference, covariates=covariates)
    info = dict(model.info)
    info["steps"] = steps
    info["schedule"] = schedule
    return replace(model, info=info)


def marginal_effects(m, t=DEFAULT_STEP):
    """Finite-difference effect of each covariate on each option probability.

    Row ``j`` (all options, reference included) and column ``v`` hold
    ``(p_j(x_v = t) - p_j(0)) / t`` with every other covariate at its mean.
    """
    if t <= 0:
        raise ValidationError("marginal-effect step must be positive")
    V = len(m.covariate_names)
    base = m.probabilities_at(np.zeros((1, V)))[0]
    out = np.zeros((len(m.option_labels), V))
    for v in range(V):
        x = np.zeros((1, V))
        x[0, v] = t
        out[:, v] = (m.probabilities_at(x)[0] - base) / t
    return out


def significance_flags(m, thresholds=DEFAULT_SIGNIFICANCE):
    """'strong' / 'weak' / '' per (non-reference option, covariate) from two-sided p-values."""
    strong, weak = thresholds
    flags = np.full(m.z_ratios.shape, "", dtype=object)
    p = m.p_values
    ok = ~np.isnan(p)
    flags[ok & (p < weak)] = "weak"
    flags[ok & (p < strong)] = "strong"
    return flags


def reported_effects(m, t=DEFAULT_STEP, thresholds=DEFAULT_SIGNIFICANCE):
    """Marginal effects kept only where the option's coefficient is flagged.

    Returns an (options x covariates) matrix with zeros elsewhere, including
    the whole reference row.
    """
    me = marginal_effects(m, t)
    flags = significance_flags(m, thresholds)
    out = np.zeros_like(me)
    for r, j in enumerate(m.nonref_index):
        keep = flags[r] != ""
        out[j, keep] = me[j, keep]
    return out


def _prob_gradients(m):
    """d p_zj / d free-params, shape (Z, J, n_free)."""
    P = m.fitted()
    Z, J = P.shape
    Xd = np.column_stack([np.ones(Z), m.design - m.x_mean])
    nonref = m.nonref_index
    G = np.zeros((Z, J, len(m.free_index)))
    for q, (r, a) in enumerate(m.free_index):
        jr = nonref[r]
        # dp_zj / d eta_zjr = p_zj (delta_j,jr - p_zjr)
        d = -P * P[:, [jr]]
        d[:, jr] += P[:, jr]
        G[:, :, q] = d * Xd[:, [a]]
    return G


def residual_diagnostics(m, panel, threshold=2.0):
    """Standardised share residuals with the EI uncertainty added to the model's.

    ``residual = observed share - fitted share``.  Its variance is the
    delta-method variance of the fitted share plus ``(count_se / n_z)^2``.
    Cells beyond ``threshold`` in absolute value are reported as outliers.
    """
    if tuple(panel.zone_ids) != tuple(m.zone_ids):
        panel = panel.subset(m.zone_ids)
    obs = panel.counts / panel.totals[:, None]
    fitted = m.fitted()
    resid = obs - fitted
    G = _prob_gradients(m)
    var_model = np.einsum("zjq,qr,zjr->zj", G, m.cov_beta, G)
    var_ei = np.zeros_like(resid) if panel.count_se is None else \
        (panel.count_se / panel.totals[:, None]) ** 2
    var = np.clip(var_model, 0.0, None) + var_ei
    tiny = 1e-15
    with np.errstate(divide="ignore", invalid="ignore"):
        std = np.where(var > tiny, resid / np.sqrt(var),
                       np.where(np.abs(resid) < 1e-12, 0.0, np.sign(resid) * np.inf))
    outliers = [
        {"zone_id": m.zone_ids[z], "option": m.option_labels[j], "std_residual": float(std[z, j])}
        for z, j in zip(*np.nonzero(np.abs(std) > threshold))
    ]
    return {"residuals": resid, "variance": var, "std_residuals": std, "outliers": outliers}


def mask_with_dummies(m, dummy_cells):
    """Extend ``m.mask`` by one column per dummy, switched on for the given options.

    ``dummy_cells`` maps dummy column name -> list of option labels.
    """
    extra = np.zeros((len(m.nonref_labels), len(dummy_cells)), dtype=bool)
    for c, (name, options) in enumerate(dummy_cells.items()):
        for o in options:
            if o not in m.nonref_labels:
                raise ValidationError(f"dummy {name!r}: {o!r} is not a non-reference option")
            extra[m.nonref_labels.index(o), c] = True
    return np.column_stack([m.mask, extra]), tuple(m.covariate_names) + tuple(dummy_cells)
