"""Observations, datasets, estimating functions and working-model descriptions.

A :class:`Dataset` keeps the fully observed covariates ``x`` as an ``(n, dim_x)``
array and the response only for rows where it was observed.  Missing
responses are never stored as sentinel numbers.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DataError

__all__ = [
    "Observation",
    "Dataset",
    "Diagnostic",
    "EstimatingFunction",
    "PropensityModel",
    "RegressionModel",
    "validate_dataset",
    "complete_cases",
    "read_csv",
    "fd_jacobian",
    "term_design",
    "mean_response_function",
]


@dataclass(frozen=True)
class Diagnostic:
    """A non-fatal finding attached to a dataset, fit or estimate."""

    code: str
    message: str
    rows: tuple = ()

    def __str__(self):
        return f"{self.code}: {self.message}"


@dataclass(frozen=True)
class Observation:
    x: np.ndarray
    y: Optional[np.ndarray]
    delta: int


def _frozen(a, dtype=float, ndim=2):
    a = np.array(a, dtype=dtype)
    if ndim == 2 and a.ndim == 1:
        a = a.reshape(-1, 1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Incomplete-data sample ``(x_i, y_i, delta_i)``.

    Parameters
    ----------
    x : (n, dim_x) array
        Always-observed covariates.
    delta : (n,) int array
        Response indicator, 1 when ``y`` was observed.
    y_obs : (n_present, dim_y) array
        Responses of the rows flagged in ``y_present``, in row order.
    y_present : (n,) bool array, optional
        Which rows carry a response.  Defaults to ``delta == 1``.  Kept
        separate from ``delta`` only so that inconsistent input can be
        represented and reported by :func:`validate_dataset`.
    """

    x: np.ndarray
    delta: np.ndarray
    y_obs: np.ndarray
    y_present: np.ndarray = None
    dim_y: int = None

    def __post_init__(self):
        x = _frozen(self.x)
        delta = _frozen(self.delta, dtype=np.int64, ndim=1)
        present = delta == 1 if self.y_present is None else np.asarray(self.y_present, dtype=bool)
        present = _frozen(present, dtype=bool, ndim=1)
        dim_y = self.dim_y
        y_obs = np.asarray(self.y_obs, dtype=float)
        if y_obs.ndim == 1:
            y_obs = y_obs.reshape(-1, 1) if dim_y in (None, 1) else y_obs.reshape(-1, dim_y)
        if dim_y is None:
            dim_y = y_obs.shape[1] if y_obs.size else 1
        y_obs = _frozen(y_obs.reshape(-1, dim_y))
        if x.shape[0] != delta.shape[0] or present.shape[0] != delta.shape[0]:
            raise DataError("x, delta and y_present must have the same number of rows")
        if y_obs.shape[0] != int(present.sum()):
            raise DataError(
                f"y_obs has {y_obs.shape[0]} rows but {int(present.sum())} rows are marked present"
            )
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "y_present", present)
        object.__setattr__(self, "y_obs", y_obs)
        object.__setattr__(self, "dim_y", int(dim_y))

    # -- shape helpers -------------------------------------------------------
    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim_x(self) -> int:
        return self.x.shape[1]

    @property
    def complete_idx(self) -> np.ndarray:
        return np.flatnonzero(self.delta == 1)

    @property
    def n_complete(self) -> int:
        return int((self.delta == 1).sum())

    @property
    def missing_rate(self) -> float:
        return 1.0 - self.n_complete / self.n

    @property
    def rows(self) -> tuple:
        ys = iter(self.y_obs)
        out = []
        for i in range(self.n):
            y = np.array(next(ys)) if self.y_present[i] else None
            out.append(Observation(np.array(self.x[i]), y, int(self.delta[i])))
        return tuple(out)

    def y_complete(self) -> np.ndarray:
        """Responses of the ``delta == 1`` rows (requires a consistent dataset)."""
        if not np.array_equal(self.y_present, self.delta == 1):
            raise DataError("dataset is inconsistent: y presence does not match delta")
        return self.y_obs

    def subset(self, idx) -> "Dataset":
        """Rows ``idx`` (in the given order, repeats allowed)."""
        idx = np.asarray(idx, dtype=np.int64)
        pos = np.cumsum(self.y_present) - 1
        keep = idx[self.y_present[idx]]
        return Dataset(
            self.x[idx], self.delta[idx], self.y_obs[pos[keep]], self.y_present[idx], self.dim_y
        )

    @classmethod
    def from_rows(cls, rows: Sequence[Observation], dim_y: int = None) -> "Dataset":
        if not rows:
            raise DataError("dataset needs at least one row")
        x = np.array([np.atleast_1d(r.x) for r in rows], dtype=float)
        present = np.array([r.y is not None for r in rows])
        ys = [np.atleast_1d(np.asarray(r.y, dtype=float)) for r in rows if r.y is not None]
        if dim_y is None:
            dim_y = len(ys[0]) if ys else 1
        y_obs = np.array(ys, dtype=float).reshape(-1, dim_y)
        delta = np.array([int(r.delta) for r in rows])
        return cls(x, delta, y_obs, present, dim_y)

    @classmethod
    def complete(cls, x, y) -> "Dataset":
        """Fully observed dataset."""
        x = np.asarray(x, dtype=float)
        n = x.shape[0] if x.ndim > 1 else len(x)
        return cls(x, np.ones(n, dtype=int), y)


def validate_dataset(ds: Dataset) -> list:
    """Check the dataset invariants; returns one :class:`Diagnostic` per violation."""
    out = []
    bad = np.flatnonzero((ds.delta == 1) != ds.y_present)
    if bad.size:
        out.append(Diagnostic("inconsistent-delta", f"y presence disagrees with delta at row(s) {bad.tolist()}", tuple(bad.tolist())))
    if not np.isin(ds.delta, (0, 1)).all():
        rows = np.flatnonzero(~np.isin(ds.delta, (0, 1)))
        out.append(Diagnostic("invalid-delta", "delta must be 0 or 1", tuple(rows.tolist())))
    if ds.n_complete == 0:
        out.append(Diagnostic("no-complete-cases", "no row has delta = 1"))
    rows_x = np.flatnonzero(~np.isfinite(ds.x).all(axis=1))
    if ds.y_obs.size and not np.isfinite(ds.y_obs).all():
        present_rows = np.flatnonzero(ds.y_present)
        rows_y = present_rows[~np.isfinite(ds.y_obs).all(axis=1)]
    else:
        rows_y = np.array([], dtype=int)
    nonfinite = np.union1d(rows_x, rows_y)
    if nonfinite.size:
        out.append(Diagnostic("non-finite", f"non-finite values at row(s) {nonfinite.tolist()}", tuple(nonfinite.tolist())))
    return out


def complete_cases(ds: Dataset) -> Dataset:
    idx = ds.complete_idx
    if idx.size == 0:
        raise DataError("complete_cases: no rows with delta = 1")
    return ds.subset(idx)


def read_csv(path, x_cols, y_cols, missing_token="NA", delta_col=None) -> Dataset:
    """Load a dataset from a CSV file with a header row.

    ``delta`` is derived from presence of every ``y_cols`` entry unless
    ``delta_col`` names an explicit indicator column.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in list(x_cols) + list(y_cols) + ([delta_col] if delta_col else []):
            if col not in header:
                raise DataError(f"column {col!r} not found in {path}")
        xs, ys, present, deltas = [], [], [], []
        for lineno, rec in enumerate(reader, start=2):
            try:
                xs.append([float(rec[c]) for c in x_cols])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric covariate ({exc})") from None
            raw = [rec[c].strip() for c in y_cols]
            miss = [v == missing_token or v == "" for v in raw]
            if any(miss) and not all(miss):
                raise DataError(f"{path}:{lineno}: partially missing response (non-monotone pattern)")
            if all(miss):
                present.append(False)
            else:
                present.append(True)
                try:
                    ys.append([float(v) for v in raw])
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: non-numeric response ({exc})") from None
            if delta_col:
                deltas.append(int(float(rec[delta_col])))
    present = np.array(present, dtype=bool)
    delta = np.array(deltas, dtype=int) if delta_col else present.astype(int)
    return Dataset(np.array(xs, dtype=float).reshape(len(present), len(x_cols)), delta,
                   np.array(ys, dtype=float).reshape(-1, len(y_cols)), present, len(y_cols))


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------
def fd_step(v):
    return np.maximum(1e-6, 1e-6 * np.abs(v))


def fd_jacobian(f: Callable, v, step=None) -> np.ndarray:
    """Central-difference Jacobian of a row-wise map.

    ``f(v)`` returns an array of shape ``(n, r)`` (or ``(r,)``); the result has
    shape ``(n, r, len(v))`` (or ``(r, len(v))``).
    """
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return np.zeros(np.shape(f(v)) + (0,))
    h = fd_step(v) if step is None else np.broadcast_to(np.asarray(step, dtype=float), v.shape)
    cols = []
    for j in range(v.size):
        e = np.zeros_like(v)
        e[j] = h[j]
        cols.append((np.asarray(f(v + e)) - np.asarray(f(v - e))) / (2.0 * h[j]))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# estimating function and working models
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class EstimatingFunction:
    """Moment functions ``s(z, beta)`` with ``E s(z, beta*) = 0``.

    ``eval(x, y, beta)`` is row-vectorised: ``x`` is ``(n, dim_x)``, ``y`` is
    ``(n, dim_y)`` and the result is ``(n, r)``.  ``jac_beta`` has the same
    calling convention and returns ``(n, r, p)``; when omitted a central
    finite-difference Jacobian is used.
    """

    r: int
    p: int
    eval: Callable
    jac_beta: Optional[Callable] = None
    name: str = "custom"
    mean_response: bool = False

    def __post_init__(self):
        if self.r < self.p:
            raise ValueError(f"need r >= p, got r={self.r}, p={self.p}")

    def __call__(self, x, y, beta):
        out = np.asarray(self.eval(x, y, np.asarray(beta, dtype=float)), dtype=float)
        return out.reshape(out.shape[0], self.r)

    def jacobian(self, x, y, beta):
        beta = np.asarray(beta, dtype=float)
        if self.jac_beta is not None:
            return np.asarray(self.jac_beta(x, y, beta), dtype=float).reshape(-1, self.r, self.p)
        return fd_jacobian(lambda b: self(x, y, b), beta)


def mean_response_function(dim_y: int = 1) -> EstimatingFunction:
    """``s(z, beta) = y - beta`` applied to every response column (scalar ``beta``)."""

    def ev(x, y, beta):
        return np.asarray(y, dtype=float).reshape(-1, dim_y) - beta[0]

    def jac(x, y, beta):
        return -np.ones((np.asarray(y).reshape(-1, dim_y).shape[0], dim_y, 1))

    return EstimatingFunction(dim_y, 1, ev, jac, name="mean", mean_response=True)


def _parse_term(term: str, k):
    term = term.strip().replace(" ", "")
    if term == "1":
        return lambda x: np.ones(x.shape[0])
    factors = []
    for fac in term.split("*"):
        base, _, power = fac.partition("^")
        if not base.startswith("x"):
            raise ValueError(f"bad design term {term!r}")
        col = int(base[1:]) - 1 if base[1:] else 0
        if power == "":
            pw = 1
        elif power == "k":
            if k is None:
                raise ValueError(f"term {term!r} needs the exponent k")
            pw = int(k)
        else:
            pw = int(power)
        factors.append((col, pw))

    def f(x, factors=tuple(factors)):
        out = np.ones(x.shape[0])
        for col, pw in factors:
            out = out * x[:, col] ** pw
        return out

    return f


def term_design(terms, k=None) -> Callable:
    """Feature map from a list of terms such as ``["1", "x1", "x1^k", "x1*x2"]``.

    ``x`` with no index means the first column; ``x2`` the second.
    """
    if isinstance(terms, str):
        terms = [t for t in terms.split(",") if t.strip()]
    fs = [_parse_term(t, k) for t in terms]

    def design(x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        return np.column_stack([f(x) for f in fs])

    design.terms = tuple(t.strip() for t in terms)
    design.width = len(fs)
    return design


@dataclass(frozen=True)
class PropensityModel:
    """Logistic working model ``pi(x, gamma) = logistic(gamma' design(x))``.

    ``design`` maps ``(n, dim_x)`` covariates to ``(n, q)`` features.  With
    ``intercept=True`` (the default) a leading column of ones is prepended
    unless the design already starts with one.  ``known`` replaces the model
    with fixed probabilities ``known(x)``; then ``q == 0`` and nothing is
    estimated.  Whether the design already has an intercept is decided from
    its declared terms (``term_design`` maps), never from the data, so ``q``
    cannot change between resamples.
    """

    design: Optional[Callable] = None
    intercept: bool = True
    gamma: Optional[np.ndarray] = None
    known: Optional[Callable] = None

    def features(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = x.shape[0]
        if self.known is not None:
            return np.zeros((n, 0))
        F = np.ones((n, 0)) if self.design is None else np.asarray(self.design(x), dtype=float).reshape(n, -1)
        if self.intercept and not self._has_intercept():
            F = np.column_stack([np.ones(n), F])
        return F

    def _has_intercept(self) -> bool:
        terms = getattr(self.design, "terms", ())
        return bool(terms) and terms[0].replace(" ", "") == "1"

    def q(self, dim_x: int = 1) -> int:
        return self.features(np.zeros((1, dim_x))).shape[1]

    @property
    def fitted(self) -> bool:
        return self.known is not None or self.gamma is not None

    def with_gamma(self, gamma) -> "PropensityModel":
        return replace(self, gamma=None if gamma is None else np.asarray(gamma, dtype=float))


@dataclass(frozen=True)
class RegressionModel:
    """Working model ``u(x, beta, alpha)`` for ``E{s(z, beta) | x}``.

    ``u_eval(x, beta, alpha)`` returns ``(n, r)``; ``a_eval`` returns the extra
    calibration functions ``(n, L)`` and defaults to the constant 1.  For
    ``fit_kind="least-squares"`` alpha stacks, per response column, the
    coefficients of ``features(x)`` in a complete-case least-squares fit, i.e.
    ``alpha.reshape(dim_y, width)``.  For ``fit_kind="conditional-mle"``
    ``log_density(x, y, alpha)`` gives row-wise ``log f(y | x, alpha)`` and
    optionally ``score(x, y, alpha)`` its alpha gradient ``(n, alpha_dim)``.
    """

    u_eval: Callable
    alpha_dim: int
    features: Optional[Callable] = None
    a_eval: Optional[Callable] = None
    fit_kind: str = "least-squares"
    log_density: Optional[Callable] = None
    score: Optional[Callable] = None
    alpha0: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    u_jac_beta: Optional[Callable] = None
    u_jac_alpha: Optional[Callable] = None

    def __post_init__(self):
        if self.fit_kind not in ("least-squares", "conditional-mle"):
            raise ValueError(f"unknown fit_kind {self.fit_kind!r}")
        if self.fit_kind == "least-squares" and self.features is None:
            raise ValueError("least-squares fit needs a features map")
        if self.fit_kind == "conditional-mle" and self.log_density is None:
            raise ValueError("conditional-mle fit needs log_density")

    def u(self, x, beta, alpha) -> np.ndarray:
        out = np.asarray(self.u_eval(x, np.asarray(beta, dtype=float), np.asarray(alpha, dtype=float)), dtype=float)
        return out.reshape(np.asarray(x).shape[0], -1)

    def a(self, x, beta, alpha) -> np.ndarray:
        n = np.asarray(x).shape[0]
        if self.a_eval is None:
            return np.ones((n, 1))
        return np.asarray(self.a_eval(x, np.asarray(beta, dtype=float), np.asarray(alpha, dtype=float)), dtype=float).reshape(n, -1)

    def xi(self, x, beta, alpha) -> np.ndarray:
        return np.column_stack([self.u(x, beta, alpha), self.a(x, beta, alpha)])

    def jac_u(self, x, beta, alpha):
        """``(d u / d beta, d u / d alpha)`` with shapes ``(n, r, p)`` and ``(n, r, A)``."""
        beta = np.asarray(beta, dtype=float)
        alpha = np.asarray(alpha, dtype=float)
        jb = self.u_jac_beta(x, beta, alpha) if self.u_jac_beta else fd_jacobian(lambda b: self.u(x, b, alpha), beta)
        ja = self.u_jac_alpha(x, beta, alpha) if self.u_jac_alpha else fd_jacobian(lambda a: self.u(x, beta, a), alpha)
        return np.asarray(jb, dtype=float), np.asarray(ja, dtype=float)

    def jac_a(self, x, beta, alpha):
        n = np.asarray(x).shape[0]
        beta = np.asarray(beta, dtype=float)
        alpha = np.asarray(alpha, dtype=float)
        if self.a_eval is None:
            return np.zeros((n, 1, beta.size)), np.zeros((n, 1, alpha.size))
        return (fd_jacobian(lambda b: self.a(x, b, alpha), beta),
                fd_jacobian(lambda a: self.a(x, beta, a), alpha))

    @property
    def fitted(self) -> bool:
        return self.alpha is not None

    def with_alpha(self, alpha) -> "RegressionModel":
        return replace(self, alpha=None if alpha is None else np.asarray(alpha, dtype=float))

    @classmethod
    def linear_mean(cls, features: Callable, dim_y: int = 1, **kw) -> "RegressionModel":
        """``u_j = features(x) alpha_j - beta`` for the mean-response function."""
        width = features(np.zeros((1, 8))).shape[1] if not hasattr(features, "width") else features.width

        def u(x, beta, alpha):
            F = features(x)
            return F @ alpha.reshape(dim_y, width).T - beta[0]

        def jb(x, beta, alpha):
            return -np.ones((np.asarray(x).shape[0], dim_y, 1))

        def ja(x, beta, alpha):
            F = features(x)
            out = np.zeros((F.shape[0], dim_y, dim_y * width))
            for j in range(dim_y):
                out[:, j, j * width:(j + 1) * width] = F
            return out

        return cls(u, dim_y * width, features=features, u_jac_beta=jb, u_jac_alpha=ja, **kw)

    def mean(self, x, alpha=None) -> np.ndarray:
        """Fitted regression mean ``features(x) alpha_j`` per response column."""
        alpha = self.alpha if alpha is None else np.asarray(alpha, dtype=float)
        F = self.features(x)
        return F @ alpha.reshape(-1, F.shape[1]).T
