"""Desired force-displacement curves (haptic terrain profiles).

C1 is a soft-sole stiffness from zero compression, C2 the same stiffness
after a 5 mm offset, C4 double that stiffness after 9 mm. C3 is a measured
shoe-in-sand curve in the original experiments; no values were published, so
the shipped ``data/C3.csv`` is a synthetic softening stand-in
``F = 0.9 z**1.8`` sampled every 0.5 mm.
"""

import csv
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .core import SoftBladderError

SHOE_SOLE_STIFFNESS = 28.1  # N/mm
CURVE_IDS = ("C1", "C2", "C3", "C4")


class CurveError(SoftBladderError):
    pass


@dataclass(frozen=True)
class HapticCurve:
    id: str
    z: tuple
    F: tuple
    provenance: str = "parametric"

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        F = np.asarray(self.F, dtype=float)
        if z.ndim != 1 or z.shape != F.shape or z.size < 2:
            raise CurveError("curve needs at least two matching (z, F) breakpoints")
        if np.any(np.diff(z) <= 0):
            raise CurveError("curve breakpoints must be strictly increasing in z")
        if np.any(F < 0):
            raise CurveError("curve forces must be nonnegative")
        object.__setattr__(self, "z", tuple(z))
        object.__setattr__(self, "F", tuple(F))
        object.__setattr__(self, "_z", z)
        object.__setattr__(self, "_F", F)

    @property
    def domain(self):
        return self._z[0], self._z[-1]

    def __call__(self, z):
        return np.interp(z, self._z, self._F)

    def desired(self, z):
        """``(F_des, slope, clamped)`` at compression ``z``.

        The slope comes from the active segment, right-continuous at
        breakpoints. Outside the domain the end value is held with zero slope.
        """
        z_lo, z_hi = self.domain
        if z < z_lo:
            return self._F[0], 0.0, True
        if z > z_hi:
            return self._F[-1], 0.0, True
        i = int(np.searchsorted(self._z, z, side="right")) - 1
        i = min(i, self._z.size - 2)
        slope = (self._F[i + 1] - self._F[i]) / (self._z[i + 1] - self._z[i])
        return self._F[i] + slope * (z - self._z[i]), slope, False


def desired_force(curve, z):
    """Desired force (N) and its slope (N/mm) at compression ``z``."""
    f, slope, _ = curve.desired(z)
    return f, slope


def make_linear_curve(stiffness, offset, domain_end, id="linear"):
    if stiffness <= 0:
        raise CurveError("stiffness must be positive")
    if not 0 <= offset < domain_end:
        raise CurveError("offset must lie in [0, domain_end)")
    if offset == 0:
        z, F = (0.0, domain_end), (0.0, stiffness * domain_end)
    else:
        z = (0.0, offset, domain_end)
        F = (0.0, 0.0, stiffness * (domain_end - offset))
    return HapticCurve(id, z, F, "parametric")


def load_curve_csv(path, id=None):
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["z_mm", "F_N"]:
                raise CurveError(f"{path}: expected header z_mm,F_N")
            rows = [(float(r["z_mm"]), float(r["F_N"])) for r in reader]
    except (ValueError, KeyError, TypeError) as exc:
        raise CurveError(f"{path}: malformed curve file ({exc})") from exc
    if len(rows) < 2:
        raise CurveError(f"{path}: need at least two rows")
    z, F = zip(*rows)
    return HapticCurve(id or str(path), z, F, "dataset")


def write_curve_csv(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["z_mm", "F_N"])
        for z, f in zip(curve.z, curve.F):
            w.writerow([repr(float(z)), repr(float(f))])


def sand_standin(spacing=0.5, domain_end=20.0):
    z = np.arange(0.0, domain_end + 1e-9, spacing)
    return HapticCurve("C3", z, 0.9 * z**1.8, "dataset")


def get_curve(curve_id, stroke=20.0):
    """Registry lookup for ``"C1"`` .. ``"C4"``."""
    if curve_id == "C1":
        return make_linear_curve(SHOE_SOLE_STIFFNESS, 0.0, stroke, "C1")
    if curve_id == "C2":
        return make_linear_curve(SHOE_SOLE_STIFFNESS, 5.0, stroke, "C2")
    if curve_id == "C3":
        with resources.as_file(resources.files("softbladder") / "data" / "C3.csv") as path:
            return load_curve_csv(path, "C3")
    if curve_id == "C4":
        return make_linear_curve(2.0 * SHOE_SOLE_STIFFNESS, 9.0, stroke, "C4")
    raise CurveError(f"unknown curve id {curve_id!r}; expected one of {CURVE_IDS}")


def workspace_membership(curve, envelope, z=None):
    """``(z, inside)`` rows: inside when F_min(z) <= F_curve(z) <= F_max(z).

    ``envelope`` is the ``(z, F_min, F_max)`` array from
    :func:`softbladder.force_model.workspace_envelope`; queries are
    interpolated on it. ``z`` defaults to the envelope's own samples.
    """
    env = np.asarray(envelope, dtype=float)
    z_env = env[:, 0]
    z_lo, z_hi = curve.domain
    if z is None:
        z = z_env[(z_env >= z_lo) & (z_env <= z_hi)]
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.size and (z.min() < z_env[0] - 1e-9 or z.max() > z_env[-1] + 1e-9):
        raise CurveError("envelope does not cover the queried compressions")
    if z_lo > z_env[0] + 1e-9 or z_hi < z_env[-1] - 1e-9:
        raise CurveError("curve domain does not cover the envelope")
    f = curve(z)
    f_min = np.interp(z, z_env, env[:, 1])
    f_max = np.interp(z, z_env, env[:, 2])
    tol = 1e-9 * np.maximum(1.0, np.abs(f))
    inside = (f >= f_min - tol) & (f <= f_max + tol)
    return np.column_stack([z, inside.astype(float)])

