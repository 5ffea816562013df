"""Bilevel oracles.

An oracle exposes stochastic first- and second-order information of the
upper objective ``f(x, y; xi)`` and the lower objective ``g(x, y; zeta)``.
Samples are opaque objects obtained from ``draw_upper``/``draw_lower``;
every derivative method also accepts ``sample=None`` meaning the
expectation over samples. Evaluating two points with the same sample
object replays the same randomness, which the variance-reduced estimator
depends on.

All devices of a federated run share one oracle instance (homogeneous
data); they differ only in the random streams they draw samples from.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .numerics import RandomStream


class UnsupportedCapability(RuntimeError):
    """Raised when an exact quantity is requested from an oracle that lacks it."""


@dataclass(frozen=True)
class SmoothnessConstants:
    mu: float
    L0: float
    L1: float
    L21: float = 0.0
    L22: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not self.L0 > 0:
            raise ValueError(f"L0 must be positive, got {self.L0}")
        if self.L1 < self.mu:
            raise ValueError(f"L1 ({self.L1}) must be >= mu ({self.mu})")
        if self.L21 < 0 or self.L22 < 0 or self.sigma < 0:
            raise ValueError("L21, L22 and sigma must be non-negative")


def _check_dim(v: np.ndarray, dim: int, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (dim,):
        raise ValueError(f"{name} has shape {v.shape}, expected ({dim},)")
    return v


class BilevelOracle:
    """Base class; subclasses implement the sample-level derivatives."""

    d_x: int
    d_y: int
    noise_std: float = 0.0
    has_exact_lower_solution = False
    has_exact_hypergradient = False
    # -1 is the correct sign of the implicit term; verification flips it to test itself
    implicit_sign = -1.0

    # -- sampling ---------------------------------------------------------
    def draw_upper(self, stream: RandomStream) -> tuple[Any, RandomStream]:
        raise NotImplementedError

    def draw_lower(self, stream: RandomStream) -> tuple[Any, RandomStream]:
        raise NotImplementedError

    # -- derivatives ------------------------------------------------------
    def f_value(self, x: np.ndarray, y: np.ndarray) -> float:
        raise NotImplementedError

    def grad_x_f(self, x, y, sample=None) -> np.ndarray:
        raise NotImplementedError

    def grad_y_f(self, x, y, sample=None) -> np.ndarray:
        raise NotImplementedError

    def grad_y_g(self, x, y, sample=None) -> np.ndarray:
        raise NotImplementedError

    def hvp_yy_g(self, x, y, v, sample=None) -> np.ndarray:
        raise NotImplementedError

    def jvp_xy_g(self, x, y, v, sample=None) -> np.ndarray:
        """Mixed partial ``d^2 g / dx dy`` (shape d_x by d_y) applied to ``v``."""
        raise NotImplementedError

    def hessian_yy(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def jacobian_xy(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def smoothness_constants(self) -> SmoothnessConstants:
        raise NotImplementedError

    # -- exact quantities -------------------------------------------------
    def exact_lower_solution(self, x: np.ndarray) -> np.ndarray:
        raise UnsupportedCapability(f"{type(self).__name__} has no exact lower-level solution")

    def phi(self, x: np.ndarray) -> float:
        """Upper objective along the lower-level solution, ``f(x, y*(x))``."""
        x = _check_dim(x, self.d_x, "x")
        return self.f_value(x, self.exact_lower_solution(x))

    def exact_hypergradient(self, x: np.ndarray) -> np.ndarray:
        """Implicit-function hypergradient with a direct linear solve at ``y*(x)``."""
        if not self.has_exact_hypergradient:
            raise UnsupportedCapability(f"{type(self).__name__} has no exact hypergradient")
        x = _check_dim(x, self.d_x, "x")
        y = self.exact_lower_solution(x)
        w = np.linalg.solve(self.hessian_yy(x, y), self.grad_y_f(x, y))
        return self.grad_x_f(x, y) + self.implicit_sign * (self.jacobian_xy(x, y) @ w)

    def with_fault(self) -> "BilevelOracle":
        """Copy whose exact hypergradient has the implicit term's sign flipped."""
        other = copy.copy(self)
        other.implicit_sign = -self.implicit_sign
        return other


class QuadQuad(BilevelOracle):
    """Quadratic upper and lower levels with closed-form solutions.

    ``g(x, y; zeta) = 1/2 y'Ay - y'(Bx + b + zeta)`` and
    ``f(x, y; xi) = 1/2 |y - y_c|^2 + lam/2 |x|^2 + xi'y``, with zeta and xi
    Gaussian. The Hessians are deterministic, so ``y*(x) = A^{-1}(Bx + b)``
    and ``Phi`` is an explicit quadratic in ``x``.

    ``noise_std`` is the per-coordinate standard deviation of zeta;
    ``upper_noise_std`` (defaults to ``noise_std``) is that of xi.
    """

    has_exact_lower_solution = True
    has_exact_hypergradient = True

    def __init__(
        self,
        A,
        B,
        b=None,
        lam: float = 1.0,
        y_c=None,
        noise_std: float = 0.0,
        upper_noise_std: float | None = None,
        radius: float = 10.0,
    ):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        d_y = A.shape[0]
        if A.shape != (d_y, d_y) or not np.allclose(A, A.T):
            raise ValueError("A must be a symmetric square matrix")
        if B.shape[0] != d_y:
            raise ValueError(f"B must have {d_y} rows, got shape {B.shape}")
        if noise_std < 0 or (upper_noise_std is not None and upper_noise_std < 0):
            raise ValueError("noise standard deviations must be non-negative")
        self.A = A
        self.B = B
        self.d_y = d_y
        self.d_x = B.shape[1]
        self.b = np.zeros(d_y) if b is None else _check_dim(np.atleast_1d(b), d_y, "b")
        self.y_c = np.zeros(d_y) if y_c is None else _check_dim(np.atleast_1d(y_c), d_y, "y_c")
        self.lam = float(lam)
        self.noise_std = float(noise_std)
        self.upper_noise_std = self.noise_std if upper_noise_std is None else float(upper_noise_std)
        self.radius = float(radius)
        self._eigs = np.linalg.eigvalsh(A)
        if self._eigs[0] <= 0:
            raise ValueError("A must be positive definite")
        self._A_inv_B = np.linalg.solve(A, B)
        self._A_inv_b = np.linalg.solve(A, self.b)

    @classmethod
    def random(
        cls,
        d_x: int,
        d_y: int,
        mu: float = 1.0,
        L1: float = 2.0,
        noise_std: float = 0.0,
        seed: int = 0,
        lam: float = 1.0,
        B_norm: float = 1.0,
        b_scale: float = 1.0,
        y_c_scale: float = 1.0,
        **kwargs,
    ) -> "QuadQuad":
        """Random instance with the spectrum of ``A`` spanning exactly ``[mu, L1]``."""
        if not 0 < mu <= L1:
            raise ValueError(f"need 0 < mu <= L1, got mu={mu}, L1={L1}")
        s = RandomStream(seed, stream_id=0).substream(0x9B0B)
        inner, s = s.uniform(mu, L1, max(d_y - 2, 0)) if d_y > 2 else (np.empty(0), s)
        eigs = np.concatenate([[mu], inner, [L1]])[:d_y] if d_y > 1 else np.array([mu])
        g, s = s.gaussian(d_y * d_y, 1.0)
        Q, _ = np.linalg.qr(g.reshape(d_y, d_y))
        A = (Q * eigs) @ Q.T
        A = 0.5 * (A + A.T)
        g, s = s.gaussian(d_y * d_x, 1.0)
        B = g.reshape(d_y, d_x)
        B *= B_norm / np.linalg.norm(B, 2)
        b, s = s.gaussian(d_y, b_scale / math.sqrt(d_y))
        y_c, s = s.gaussian(d_y, y_c_scale / math.sqrt(d_y))
        return cls(A, B, b=b, lam=lam, y_c=y_c, noise_std=noise_std, **kwargs)

    def with_noise(self, noise_std: float, upper_noise_std: float | None = None) -> "QuadQuad":
        other = copy.copy(self)
        other.noise_std = float(noise_std)
        other.upper_noise_std = float(noise_std if upper_noise_std is None else upper_noise_std)
        return other

    # samples are lazy stream snapshots; noise is materialised only where used
    def draw_upper(self, stream):
        return stream, stream.advance(self.d_y)

    def draw_lower(self, stream):
        return stream, stream.advance(self.d_y)

    def _noise(self, sample, std):
        if sample is None or std == 0:
            return 0.0
        return sample.gaussian(self.d_y, std)[0]

    def f_value(self, x, y):
        x = _check_dim(x, self.d_x, "x")
        y = _check_dim(y, self.d_y, "y")
        r = y - self.y_c
        return 0.5 * float(r @ r) + 0.5 * self.lam * float(x @ x)

    def g_value(self, x, y):
        x = _check_dim(x, self.d_x, "x")
        y = _check_dim(y, self.d_y, "y")
        return 0.5 * float(y @ self.A @ y) - float(y @ (self.B @ x + self.b))

    def grad_x_f(self, x, y, sample=None):
        _check_dim(y, self.d_y, "y")
        return self.lam * _check_dim(x, self.d_x, "x")

    def grad_y_f(self, x, y, sample=None):
        _check_dim(x, self.d_x, "x")
        return _check_dim(y, self.d_y, "y") - self.y_c + self._noise(sample, self.upper_noise_std)

    def grad_y_g(self, x, y, sample=None):
        x = _check_dim(x, self.d_x, "x")
        y = _check_dim(y, self.d_y, "y")
        return self.A @ y - self.B @ x - self.b - self._noise(sample, self.noise_std)

    def hvp_yy_g(self, x, y, v, sample=None):
        return self.A @ _check_dim(v, self.d_y, "v")

    def jvp_xy_g(self, x, y, v, sample=None):
        return -(self.B.T @ _check_dim(v, self.d_y, "v"))

    def hessian_yy(self, x, y):
        return self.A.copy()

    def jacobian_xy(self, x, y):
        return -self.B.T.copy()

    def exact_lower_solution(self, x):
        x = _check_dim(x, self.d_x, "x")
        return self._A_inv_B @ x + self._A_inv_b

    def closed_form_hypergradient(self, x):
        """Gradient of ``1/2|A^{-1}(Bx+b) - y_c|^2 + lam/2|x|^2`` differentiated directly."""
        x = _check_dim(x, self.d_x, "x")
        return self.lam * x + self._A_inv_B.T @ (self._A_inv_B @ x + self._A_inv_b - self.y_c)

    def phi_minimizer(self) -> np.ndarray:
        M = self._A_inv_B
        H = self.lam * np.eye(self.d_x) + M.T @ M
        return np.linalg.solve(H, -M.T @ (self._A_inv_b - self.y_c))

    def smoothness_constants(self) -> SmoothnessConstants:
        """Constants valid on ``|x| <= radius`` and the matching range of ``y``.

        ``L0`` bounds the upper gradient there with the xi noise taken at a
        three-sigma allowance; ``sigma`` is the total (not per-coordinate)
        standard deviation of the lower gradient noise.
        """
        d = self.d_x + self.d_y
        Hg = np.zeros((d, d))
        Hg[: self.d_x, self.d_x :] = -self.B.T
        Hg[self.d_x :, : self.d_x] = -self.B
        Hg[self.d_x :, self.d_x :] = self.A
        L1 = max(float(np.linalg.norm(Hg, 2)), self.lam, 1.0)
        R = self.radius
        R_y = max(R, np.linalg.norm(self._A_inv_B, 2) * R + np.linalg.norm(self._A_inv_b))
        xi_bound = self.upper_noise_std * (math.sqrt(self.d_y) + 3.0)
        L0 = math.hypot(self.lam * R, R_y + float(np.linalg.norm(self.y_c)) + xi_bound)
        return SmoothnessConstants(
            mu=float(self._eigs[0]),
            L0=L0,
            L1=L1,
            L21=0.0,
            L22=0.0,
            sigma=self.noise_std * math.sqrt(self.d_y),
        )


class RidgeHyper(BilevelOracle):
    """Per-feature ridge penalties tuned on a validation split.

    Lower level: ``1/(2n) sum_i (a_i'y - t_i)^2 + 1/2 sum_j exp(x_j) y_j^2`` over
    training rows; upper level: half the validation mean squared error.
    A sample is a uniformly drawn row index.
    """

    has_exact_lower_solution = True
    has_exact_hypergradient = True

    def __init__(self, X_train, t_train, X_val, t_val, radius: float = 3.0):
        self.X_train = np.asarray(X_train, dtype=float)
        self.t_train = np.asarray(t_train, dtype=float)
        self.X_val = np.asarray(X_val, dtype=float)
        self.t_val = np.asarray(t_val, dtype=float)
        n, d = self.X_train.shape
        if self.t_train.shape != (n,) or self.X_val.shape[1] != d or self.t_val.shape != (len(self.X_val),):
            raise ValueError("inconsistent train/validation shapes")
        if n == 0 or len(self.X_val) == 0:
            raise ValueError("train and validation splits must be non-empty")
        self.d_x = self.d_y = d
        self.radius = float(radius)
        self._gram = self.X_train.T @ self.X_train / n
        self._rhs = self.X_train.T @ self.t_train / n
        self.noise_std = self.smoothness_constants().sigma

    @classmethod
    def synthetic(cls, n_train=200, n_val=100, d=5, noise=0.5, seed=0, **kwargs) -> "RidgeHyper":
        s = RandomStream(seed, stream_id=0).substream(0x41D6E)
        X, s = s.gaussian((n_train + n_val) * d, 1.0)
        X = X.reshape(-1, d)
        w, s = s.gaussian(d, 1.0)
        eps, s = s.gaussian(n_train + n_val, noise) if noise > 0 else (np.zeros(n_train + n_val), s)
        t = X @ w + eps
        return cls(X[:n_train], t[:n_train], X[n_train:], t[n_train:], **kwargs)

    def draw_upper(self, stream):
        idx, nxt = stream.integers(len(self.X_val), 1)
        return int(idx[0]), nxt

    def draw_lower(self, stream):
        idx, nxt = stream.integers(len(self.X_train), 1)
        return int(idx[0]), nxt

    def f_value(self, x, y):
        y = _check_dim(y, self.d_y, "y")
        r = self.X_val @ y - self.t_val
        return 0.5 * float(r @ r) / len(r)

    def grad_x_f(self, x, y, sample=None):
        _check_dim(x, self.d_x, "x")
        return np.zeros(self.d_x)

    def grad_y_f(self, x, y, sample=None):
        y = _check_dim(y, self.d_y, "y")
        if sample is None:
            return self.X_val.T @ (self.X_val @ y - self.t_val) / len(self.t_val)
        c = self.X_val[sample]
        return c * (c @ y - self.t_val[sample])

    def grad_y_g(self, x, y, sample=None):
        x = _check_dim(x, self.d_x, "x")
        y = _check_dim(y, self.d_y, "y")
        reg = np.exp(x) * y
        if sample is None:
            return self._gram @ y - self._rhs + reg
        a = self.X_train[sample]
        return a * (a @ y - self.t_train[sample]) + reg

    def hvp_yy_g(self, x, y, v, sample=None):
        x = _check_dim(x, self.d_x, "x")
        v = _check_dim(v, self.d_y, "v")
        if sample is None:
            return self._gram @ v + np.exp(x) * v
        a = self.X_train[sample]
        return a * (a @ v) + np.exp(x) * v

    def jvp_xy_g(self, x, y, v, sample=None):
        x = _check_dim(x, self.d_x, "x")
        return np.exp(x) * _check_dim(y, self.d_y, "y") * _check_dim(v, self.d_y, "v")

    def hessian_yy(self, x, y):
        return self._gram + np.diag(np.exp(_check_dim(x, self.d_x, "x")))

    def jacobian_xy(self, x, y):
        return np.diag(np.exp(_check_dim(x, self.d_x, "x")) * _check_dim(y, self.d_y, "y"))

    def exact_lower_solution(self, x):
        return np.linalg.solve(self.hessian_yy(x, None), self._rhs)

    def smoothness_constants(self) -> SmoothnessConstants:
        """Rough constants on the box ``|x_j| <= radius``, ``|y| <= y_bound``."""
        R = self.radius
        lo, hi = math.exp(-R), math.exp(R)
        rows = np.concatenate([self.X_train, self.X_val])
        row_sq = float(np.max(np.sum(rows**2, axis=1)))
        y_bound = float(np.linalg.norm(self._rhs)) / lo
        targets = np.concatenate([self.t_train, self.t_val])
        resid = math.sqrt(row_sq) * y_bound + float(np.max(np.abs(targets)))
        return SmoothnessConstants(
            mu=lo,
            L0=math.sqrt(row_sq) * resid,
            L1=max(row_sq + hi, hi * y_bound),
            L21=hi * y_bound,
            L22=hi,
            sigma=math.sqrt(row_sq) * resid,
        )


def load_ridge_csv(path, val_ratio: float = 0.3, seed: int = 0, **kwargs) -> RidgeHyper:
    """Build a RidgeHyper instance from a CSV file.

    The file needs a header row with a ``target`` column; every other
    column is a numeric feature. Rows are shuffled with ``seed`` and the
    last ``val_ratio`` fraction becomes the validation split.
    """
    if not 0 < val_ratio < 1:
        raise ValueError(f"val_ratio must be in (0, 1), got {val_ratio}")
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty CSV") from None
        if "target" not in header:
            raise ValueError(f"{path}: no 'target' column in header {header}")
        ti = header.index("target")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value") from None
    data = np.array(rows, dtype=float)
    if len(data) < 2 or data.shape[1] < 2:
        raise ValueError(f"{path}: need at least 2 rows and one feature column")
    perm = RandomStream(seed, stream_id=0).substream(0xC5F)._generator().permutation(len(data))
    data = data[perm]
    n_val = min(max(1, int(round(val_ratio * len(data)))), len(data) - 1)
    feats = np.delete(data, ti, axis=1)
    target = data[:, ti]
    n_tr = len(data) - n_val
    return RidgeHyper(feats[:n_tr], target[:n_tr], feats[n_tr:], target[n_tr:], **kwargs)
