"""B-spline basis for the log-baseline function and its exponential integrals.

The baseline odds function is ``alpha(t) = int_0^t exp{gamma' B(u)} du``.
All integrals are computed with Gauss-Legendre rules on panels (knot
intervals, subdivided when wide); a panel cut by the upper limit ``t`` gets
its own rescaled nodes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

__all__ = [
    "SplineBasis",
    "QuadratureRule",
    "place_knots",
    "eval_basis",
    "EndpointQuadrature",
    "alpha_integral",
]


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre rule with ``n_nodes`` points per panel.

    Each knot interval is split evenly into at least ``min_split`` panels, and
    into more when needed to keep panels no wider than ``max_panel * horizon``.
    A steep spline on a narrow interval, or a long last interval left by
    percentile knots, would otherwise cost accuracy.
    """

    n_nodes: int = 7
    min_split: int = 4
    max_panel: float = 0.05

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ValueError("n_nodes must be >= 1")
        if self.min_split < 1:
            raise ValueError("min_split must be >= 1")
        if not 0 < self.max_panel <= 1:
            raise ValueError("max_panel must lie in (0, 1]")

    def panels(self, basis: "SplineBasis") -> np.ndarray:
        """Panel boundaries: knot breakpoints with every interval subdivided."""
        bp = basis.breakpoints
        width = self.max_panel * basis.horizon
        pieces = [np.linspace(a, b, max(self.min_split, int(np.ceil((b - a) / width - 1e-9))) + 1)[:-1]
                  for a, b in zip(bp[:-1], bp[1:])]
        return np.concatenate(pieces + [bp[-1:]])

    @property
    def reference(self):
        return np.polynomial.legendre.leggauss(self.n_nodes)

    def on(self, a, b):
        """Nodes and weights mapped to ``[a, b]`` (broadcast over arrays)."""
        x, w = self.reference
        a = np.asarray(a, dtype=float)[..., None]
        b = np.asarray(b, dtype=float)[..., None]
        half = 0.5 * (b - a)
        return a + half * (x + 1.0), half * w


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """Order-``r`` B-spline basis on ``[0, horizon]`` with r-fold boundary knots."""

    order: int
    interior_knots: np.ndarray
    horizon: float
    scheme: str = "percentile"
    knots: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("spline order must be >= 1")
        interior = np.asarray(self.interior_knots, dtype=float).reshape(-1).copy()
        E = float(self.horizon)
        if not E > 0:
            raise ValueError("horizon must be positive")
        if interior.size and (interior[0] <= 0 or interior[-1] >= E or np.any(np.diff(interior) <= 0)):
            raise ValueError("interior knots must be strictly increasing inside (0, horizon)")
        interior.setflags(write=False)
        knots = np.concatenate([np.zeros(self.order), interior, np.full(self.order, E)])
        knots.setflags(write=False)
        object.__setattr__(self, "interior_knots", interior)
        object.__setattr__(self, "horizon", E)
        object.__setattr__(self, "knots", knots)

    @property
    def n_basis(self) -> int:
        return self.interior_knots.size + self.order

    @property
    def breakpoints(self) -> np.ndarray:
        return np.concatenate([[0.0], self.interior_knots, [self.horizon]])

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "interior_knots": self.interior_knots.tolist(),
            "horizon": self.horizon,
            "scheme": self.scheme,
            "knots": self.knots.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplineBasis":
        return cls(int(d["order"]), np.asarray(d["interior_knots"], float), float(d["horizon"]),
                   d.get("scheme", "percentile"))

    def __call__(self, t) -> np.ndarray:
        return eval_basis(self, t)


def place_knots(
    X,
    n_interior: int = 9,
    scheme: str = "percentile",
    horizon: float | None = None,
    order: int = 4,
) -> SplineBasis:
    """Build a basis with interior knots at quantiles of ``X`` or uniformly spaced.

    The percentile scheme puts knot ``a`` at the ``a / (n_interior + 1)``
    quantile of the observed times; ``n_interior = 9`` gives the decile rule.
    """
    X = np.asarray(X, dtype=float).reshape(-1)
    if n_interior < 0:
        raise ValueError("n_interior must be >= 0")
    if horizon is None:
        if X.size == 0:
            raise ValueError("horizon required when no observed times are given")
        horizon = float(X.max())
    if X.size and X.max() < 0.5 * horizon:
        warnings.warn(
            f"largest observed time {X.max():.4g} is far below the horizon {horizon:.4g}; "
            "the baseline beyond the data is weakly identified", RuntimeWarning, stacklevel=2
        )
    probs = np.arange(1, n_interior + 1) / (n_interior + 1)
    if scheme == "percentile":
        if X.size == 0:
            raise ValueError("percentile knots need observed times")
        knots = np.unique(np.quantile(X, probs))
        knots = knots[(knots > 0) & (knots < horizon)]
        if knots.size < n_interior:
            raise ValueError(
                f"only {knots.size} distinct interior knots available from the observed times; "
                f"use fewer than {n_interior} knots"
            )
    elif scheme == "uniform":
        knots = horizon * probs
    else:
        raise ValueError(f"unknown knot scheme {scheme!r}")
    return SplineBasis(order, knots, horizon, scheme)


def _clamp(basis: SplineBasis, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(np.isnan(t)):
        raise ValueError("NaN evaluation point")
    lo, hi = 0.0, basis.horizon
    if np.any(t < lo) or np.any(t > hi):
        warnings.warn(
            f"evaluation points outside [0, {hi}] clamped to the boundary", RuntimeWarning, stacklevel=3
        )
        t = np.clip(t, lo, hi)
    return t


def eval_basis(basis: SplineBasis, t) -> np.ndarray:
    """Evaluate all basis functions at ``t``.

    Returns an array of shape ``t.shape + (n_basis,)``.  Uses the triangular
    Cox-de Boor recurrence on the ``order`` functions supported at each point.
    """
    t = _clamp(basis, t)
    shape = t.shape
    x = t.reshape(-1)
    kn = basis.knots
    k = basis.order - 1
    P = basis.n_basis
    span = np.searchsorted(kn, x, side="right") - 1
    span = np.clip(span, k, P - 1)

    N = np.zeros((x.size, k + 1))
    N[:, 0] = 1.0
    left = np.empty((x.size, k + 1))
    right = np.empty((x.size, k + 1))
    for j in range(1, k + 1):
        left[:, j] = x - kn[span + 1 - j]
        right[:, j] = kn[span + j] - x
        saved = np.zeros(x.size)
        for s in range(j):
            denom = right[:, s + 1] + left[:, j - s]
            temp = N[:, s] / denom
            N[:, s] = saved + right[:, s + 1] * temp
            saved = left[:, j - s] * temp
        N[:, j] = saved

    out = np.zeros((x.size, P))
    cols = span[:, None] - k + np.arange(k + 1)[None, :]
    np.put_along_axis(out, cols, N, axis=1)
    return out.reshape(shape + (P,))


class EndpointQuadrature:
    """Quadrature design for ``int_0^{t_i} g(u) du`` at a fixed set of upper limits.

    The node set is every Gauss-Legendre node of every panel, followed by the
    rescaled nodes of the partial panel of each ``t_i``.  A sparse
    weight matrix ``W`` maps node values to the integrals, so for any node
    function ``g``, ``W @ g`` is the vector of integrals.
    """

    def __init__(self, basis: SplineBasis, ends, rule: QuadratureRule | None = None):
        rule = rule or QuadratureRule()
        ends = _clamp(basis, np.asarray(ends, dtype=float).reshape(-1))
        self.basis = basis
        self.ends = ends
        bp = rule.panels(basis)
        L = bp.size - 1
        Q = rule.n_nodes
        g_nodes, g_w = rule.on(bp[:-1], bp[1:])  # (L, Q)
        # interval index of each end: number of full intervals below it
        idx = np.clip(np.searchsorted(bp, ends, side="right") - 1, 0, L - 1)
        p_nodes, p_w = rule.on(bp[idx], ends)  # (n, Q)
        n = ends.size
        G = L * Q
        self.nodes = np.concatenate([g_nodes.reshape(-1), p_nodes.reshape(-1)])
        self.B = eval_basis(basis, self.nodes)

        # full-interval part: row i uses global nodes of intervals 0..idx_i-1
        flat_gw = g_w.reshape(-1)
        counts = idx * Q
        rows_full = np.repeat(np.arange(n), counts)
        cols_full = np.concatenate([np.arange(c) for c in counts]) if n else np.zeros(0, int)
        vals_full = flat_gw[cols_full] if n else np.zeros(0)
        rows_part = np.repeat(np.arange(n), Q)
        cols_part = G + np.arange(n * Q)
        vals_part = p_w.reshape(-1)
        self.W = sparse.csr_matrix(
            (np.concatenate([vals_full, vals_part]),
             (np.concatenate([rows_full, rows_part]), np.concatenate([cols_full, cols_part]))),
            shape=(n, G + n * Q),
        )
        self.WT = self.W.T.tocsr()

    def __len__(self):
        return self.ends.size

    def log_moments(self, gamma):
        """Shifted moments of ``exp(m)`` with ``m = B gamma``.

        Returns ``(log_alpha, a_norm, ew, alpha_shift)`` where ``a_norm[i] =
        int exp(m) B / int exp(m)`` for limit ``i``, ``ew`` are node values of
        ``exp(m - shift)`` and ``alpha_shift = W @ ew``.
        """
        gamma = np.asarray(gamma, dtype=float)
        if not np.all(np.isfinite(gamma)):
            raise ValueError("non-finite spline coefficients")
        m = self.B @ gamma
        shift = m.max() if m.size else 0.0
        ew = np.exp(m - shift)
        alpha_s = self.W @ ew
        with np.errstate(divide="ignore"):
            log_alpha = np.log(alpha_s) + shift
        A = self.W @ (ew[:, None] * self.B)
        with np.errstate(invalid="ignore", divide="ignore"):
            a_norm = A / alpha_s[:, None]
        a_norm[alpha_s == 0] = 0.0
        return log_alpha, a_norm, ew, alpha_s

    def weighted_second_moment(self, ew, weights):
        """``sum_i weights_i * int_0^{t_i} exp(m - shift) B B' du``."""
        node_w = (self.WT @ weights) * ew
        return (self.B * node_w[:, None]).T @ self.B

    def alpha(self, gamma) -> np.ndarray:
        log_alpha, *_ = self.log_moments(gamma)
        return np.exp(log_alpha)


def alpha_integral(basis: SplineBasis, gamma, t, derivatives: int = 0, rule: QuadratureRule | None = None):
    """``alpha(t) = int_0^t exp{gamma' B(u)} du`` with optional gamma-derivatives.

    Parameters
    ----------
    derivatives : {0, 1, 2}
        0 returns ``alpha``; 1 also returns the gradient
        ``int exp{.} B du``; 2 also returns ``int exp{.} B B' du``.

    Returns
    -------
    alpha, or a tuple ``(alpha, grad[, hess])``; scalar ``t`` gives scalar
    ``alpha``, ``(P,)`` gradient and ``(P, P)`` Hessian.
    """
    scalar = np.ndim(t) == 0
    quad = EndpointQuadrature(basis, np.atleast_1d(t), rule)
    gamma = np.asarray(gamma, dtype=float)
    if not np.all(np.isfinite(gamma)):
        raise ValueError("non-finite spline coefficients")
    m = quad.B @ gamma
    shift = m.max()
    ew = np.exp(m - shift)
    scale = np.exp(shift)
    alpha = (quad.W @ ew) * scale
    out = [alpha[0] if scalar else alpha]
    if derivatives >= 1:
        grad = (quad.W @ (ew[:, None] * quad.B)) * scale
        out.append(grad[0] if scalar else grad)
    if derivatives >= 2:
        WB = quad.W.toarray()
        hess = np.einsum("in,n,np,nq->ipq", WB, ew, quad.B, quad.B) * scale
        out.append(hess[0] if scalar else hess)
    return out[0] if derivatives == 0 else tuple(out)
