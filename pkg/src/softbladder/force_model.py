"""Polynomial force surface F(z, P) and its constrained least-squares fit.

The surface is cubic in compression and linear in pressure, built only from
monomials that vanish at the origin::

    F = c_z z + c_z2 z^2 + c_zP z P + c_z3 z^3 + c_z2P z^2 P

so F(0, 0) = 0 holds for every coefficient vector.
"""

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from .core import FitError

TERM_NAMES = ("c_z", "c_z2", "c_zP", "c_z3", "c_z2P")
DEFAULT_COEFFICIENTS = (21.52, -2.245, 3.028, 0.07648, -0.1165)


def design_matrix(z, P):
    z = np.asarray(z, dtype=float)
    P = np.asarray(P, dtype=float)
    return np.stack([z, z**2, z * P, z**3, z**2 * P], axis=-1)


@dataclass(frozen=True)
class ForceModel:
    """Immutable coefficient set of the force surface (N, mm, psi)."""

    c_z: float = DEFAULT_COEFFICIENTS[0]
    c_z2: float = DEFAULT_COEFFICIENTS[1]
    c_zP: float = DEFAULT_COEFFICIENTS[2]
    c_z3: float = DEFAULT_COEFFICIENTS[3]
    c_z2P: float = DEFAULT_COEFFICIENTS[4]

    @classmethod
    def from_array(cls, coefficients):
        c = [float(v) for v in coefficients]
        if len(c) != 5:
            raise ValueError("ForceModel needs exactly five coefficients")
        return cls(*c)

    @property
    def coefficients(self):
        return np.array([self.c_z, self.c_z2, self.c_zP, self.c_z3, self.c_z2P])

    def scaled(self, factor):
        return ForceModel.from_array(self.coefficients * factor)

    def force(self, z, P):
        return eval_force(self, z, P)

    def partials(self, z, P):
        return eval_partials(self, z, P)

    def to_dict(self):
        return dict(zip(TERM_NAMES, map(float, self.coefficients)))


def eval_force(model, z, P):
    """Force in N at compression ``z`` (mm) and gauge pressure ``P`` (psi)."""
    # Horner form in z; every term carries at least one factor of z.
    return z * (model.c_z + model.c_zP * P + z * (model.c_z2 + model.c_z2P * P + z * model.c_z3))


def eval_partials(model, z, P):
    """Analytic (dF/dz, dF/dP) in N/mm and N/psi."""
    dfdz = (
        model.c_z
        + 2.0 * model.c_z2 * z
        + model.c_zP * P
        + 3.0 * model.c_z3 * z * z
        + 2.0 * model.c_z2P * z * P
    )
    dfdP = model.c_zP * z + model.c_z2P * z * z
    return dfdz, dfdP


@lru_cache(maxsize=64)
def bounded_models(model, delta):
    """Upper and lower force models, all coefficients scaled by (1 +/- delta).

    Cached: the controller asks for the same pair on every sample.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"bound factor must lie in (0, 1), got {delta}")
    return model.scaled(1.0 + delta), model.scaled(1.0 - delta)


def workspace_envelope(model, params, n_samples=41, z=None):
    """Rows ``(z, F_min, F_max)`` of the open-loop haptic workspace.

    The floor is the deflated wall force F(z, 0) and the ceiling is the force
    at supply pressure. ``z`` overrides the uniform grid over the stroke.
    """
    if z is None:
        if n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        z = np.linspace(0.0, params.stroke, int(n_samples))
    else:
        z = np.asarray(z, dtype=float)
    f_min = eval_force(model, z, 0.0)
    f_max = eval_force(model, z, params.supply_pressure)
    return np.column_stack([z, f_min, f_max])


@dataclass
class CompressionDataset:
    """Quasi-static compression samples ``(z [mm], P [psi], F [N])``."""

    z: np.ndarray
    P: np.ndarray
    F: np.ndarray
    pressures: tuple = ()
    depth: float = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float).ravel()
        self.P = np.asarray(self.P, dtype=float).ravel()
        self.F = np.asarray(self.F, dtype=float).ravel()
        if not (self.z.shape == self.P.shape == self.F.shape):
            raise ValueError("z, P and F must have the same length")

    def __len__(self):
        return self.z.size

    @classmethod
    def empty(cls):
        return cls(np.empty(0), np.empty(0), np.empty(0))

    @classmethod
    def concatenate(cls, parts, pressures=(), depth=None):
        if not parts:
            return cls(np.empty(0), np.empty(0), np.empty(0), tuple(pressures), depth)
        return cls(
            np.concatenate([p.z for p in parts]),
            np.concatenate([p.P for p in parts]),
            np.concatenate([p.F for p in parts]),
            tuple(pressures),
            depth,
        )

    def validate(self, stroke=None, pressure_tolerance=0.25):
        """Check ranges and identifiability.

        Measured pressures may dip below zero by ``pressure_tolerance`` psi
        (sensor noise around a deflated bladder) before being rejected.
        """
        if np.any(self.P < -pressure_tolerance):
            raise ValueError("dataset contains negative pressures")
        if np.any(self.z < 0) or (stroke is not None and np.any(self.z > stroke)):
            raise ValueError("dataset compression outside [0, stroke]")
        distinct = np.unique(np.column_stack([self.z, self.P]), axis=0)
        if distinct.shape[0] < 6:
            raise FitError("need at least 6 distinct (z, P) pairs to fit 5 coefficients")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["z_mm", "P_psi", "F_N"])
            for row in zip(self.z, self.P, self.F):
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["z_mm", "P_psi", "F_N"]:
                raise ValueError(f"{path}: expected header z_mm,P_psi,F_N")
            rows = [(float(r["z_mm"]), float(r["P_psi"]), float(r["F_N"])) for r in reader]
        if not rows:
            return cls.empty()
        z, P, F = map(np.array, zip(*rows))
        return cls(z, P, F)


def r_squared(y, y_hat):
    y = np.asarray(y, dtype=float)
    ss_res = float(np.sum((y - y_hat) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


class ForceSurfaceRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn regressor for the origin-constrained force surface.

    ``X`` has two columns, compression [mm] and gauge pressure [psi]; ``y`` is
    force [N]. After fitting, ``model_`` holds the :class:`ForceModel` and
    ``r2_`` the in-sample coefficient of determination.
    """

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        if X.shape[1] != 2:
            raise ValueError("X must have exactly two columns (z, P)")
        A = design_matrix(X[:, 0], X[:, 1])
        if np.linalg.matrix_rank(A) < A.shape[1]:
            raise FitError("rank-deficient design: vary both compression and pressure")
        # Column scaling keeps the cubic terms from dominating the conditioning.
        scale = np.linalg.norm(A, axis=0)
        coef, *_ = np.linalg.lstsq(A / scale, y, rcond=None)
        coef = coef / scale
        self.coef_ = coef
        self.model_ = ForceModel.from_array(coef)
        self.r2_ = r_squared(y, A @ coef)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        return eval_force(self.model_, X[:, 0], X[:, 1])


def fit_force_model(data):
    """Fit the force surface to a :class:`CompressionDataset`.

    Returns ``(ForceModel, r_squared)``.
    """
    data.validate()
    reg = ForceSurfaceRegressor().fit(np.column_stack([data.z, data.P]), data.F)
    return reg.model_, reg.r2_
