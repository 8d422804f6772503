"""Empirical multiaxial fatigue criteria for tension-torsion thin-tube tests.

Supported criteria: Coffin-Manson on axial strain (``cm_axial``) and on the
maximum shear strain (``cm_shear``); Brown-Miller (``bm``) with a constant
normal-strain weight; Kandil-Brown-Miller (``kbm``) with the life-dependent
weight ``s0(2N_f)``; Fatemi-Socie (``fs``) with the life-dependent normal
stress sensitivity ``k(2N_f)``; ``whs`` with a calibrated scalar weight; and
its modified form ``mwhs``.

Load-derived damage drivers come from a critical-plane search over the
surface strain state::

    eps_x(t)  = eps_a sin(wt)         eps_y = eps_z = -nu_e eps_x
    gamma(t)  = gamma_a sin(wt - phi)
    sigma(t)  = sigma_a sin(wt)       tau(t) = tau_a sin(wt - phi)

All signals are zero-mean sinusoids of one frequency, so each plane quantity
is a phasor and its amplitude is exact.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CRITERIA = ("cm_axial", "cm_shear", "bm", "kbm", "fs", "whs", "mwhs")
REV_BOUNDS = (1.0, 2.0e9)
BUNDLED_MATERIALS = ("GH4169_25C", "TC4_25C", "GH4169_650C")


class NoRootInBracket(ValueError):
    pass


class InvalidDamage(ValueError):
    pass


class UnknownCriterion(ValueError):
    pass


@dataclass(frozen=True)
class MaterialProperties:
    """Monotonic, uniaxial and torsional fatigue properties.

    Moduli are in GPa, strengths in MPa; strain coefficients are fractions.
    ``b0``/``c0`` are the torsional exponents.
    """

    E: float
    G: float
    sigma_y: float
    nu_e: float
    sigma_f_prime: float
    b: float
    eps_f_prime: float
    c: float
    tau_f_prime: float | None = None
    b0: float | None = None
    gamma_f_prime: float | None = None
    c0: float | None = None
    nu_p: float = 0.5
    name: str = ""
    K1: float | None = None
    n1: float | None = None
    K_prime: float | None = None
    n_prime: float | None = None
    K1_prime: float | None = None
    n1_prime: float | None = None

    def __post_init__(self):
        # torsional estimates from uniaxial data when missing
        if self.tau_f_prime is None:
            object.__setattr__(self, "tau_f_prime", self.sigma_f_prime / math.sqrt(3))
        if self.gamma_f_prime is None:
            object.__setattr__(self, "gamma_f_prime", math.sqrt(3) * self.eps_f_prime)
        if self.b0 is None:
            object.__setattr__(self, "b0", self.b)
        if self.c0 is None:
            object.__setattr__(self, "c0", self.c)
        if self.E <= 0 or self.G <= 0:
            raise ValueError("E and G must be positive")
        if max(self.b, self.c, self.b0, self.c0) >= 0:
            raise ValueError("fatigue exponents b, c, b0, c0 must be negative")
        if min(self.sigma_f_prime, self.tau_f_prime, self.eps_f_prime, self.gamma_f_prime) <= 0:
            raise ValueError("fatigue coefficients must be positive")

    @property
    def E_mpa(self) -> float:
        return self.E * 1000.0

    @property
    def G_mpa(self) -> float:
        return self.G * 1000.0


def load_material(source: str | Path) -> MaterialProperties:
    """Read a material file (``[material]`` section of ``key = value`` lines).

    ``source`` is a path or one of the bundled names in ``BUNDLED_MATERIALS``.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str
    path = Path(source)
    if path.is_file():
        parser.read(path)
        default_name = path.stem
    elif str(source) in BUNDLED_MATERIALS:
        text = resources.files("fatigue_sr.data").joinpath(f"{source}.ini").read_text()
        parser.read_string(text)
        default_name = str(source)
    else:
        raise FileNotFoundError(f"no material file or bundled material named {str(source)!r}")
    if "material" not in parser:
        raise ValueError(f"material file {source} lacks a [material] section")
    sec = parser["material"]
    known = {f.name for f in fields(MaterialProperties)}
    unknown = set(sec) - known
    if unknown:
        raise ValueError(f"unknown material field(s): {', '.join(sorted(unknown))}")
    kwargs = {k: (v if k == "name" else float(v)) for k, v in sec.items()}
    kwargs.setdefault("name", default_name)
    try:
        return MaterialProperties(**kwargs)
    except TypeError as exc:
        raise ValueError(f"material {source}: {exc}") from exc


@dataclass(frozen=True)
class LoadState:
    """Amplitudes in fractions (strain) and MPa (stress); phase in degrees."""

    eps_a: float
    gamma_a: float
    sigma_a: float
    tau_a: float
    phase_deg: float = 0.0

    def scaled(self, factor: float) -> "LoadState":
        return LoadState(self.eps_a * factor, self.gamma_a * factor, self.sigma_a * factor,
                         self.tau_a * factor, self.phase_deg)


@dataclass(frozen=True)
class CriticalPlaneResult:
    max_shear_amp: float
    normal_strain_range: float
    max_normal_stress: float
    plane_angle_deg: float


def _phasors(load: LoadState):
    phi = math.radians(load.phase_deg)
    ex = np.array([load.eps_a, 0.0])
    gxy = load.gamma_a * np.array([math.cos(phi), -math.sin(phi)])
    sx = np.array([load.sigma_a, 0.0])
    txy = load.tau_a * np.array([math.cos(phi), -math.sin(phi)])
    return ex, gxy, sx, txy


def plane_quantities(load: LoadState, nu: float, theta_deg):
    """Shear strain amplitude, normal strain range and peak normal stress on planes ``theta``."""
    ex, gxy, sx, txy = _phasors(load)
    th = np.radians(np.atleast_1d(np.asarray(theta_deg, dtype=float)))[:, None]
    s2, c2 = np.sin(2 * th), np.cos(2 * th)
    shear = -(1 + nu) * ex * s2 + gxy * c2
    normal = 0.5 * (1 - nu) * ex + 0.5 * (1 + nu) * ex * c2 + 0.5 * gxy * s2
    stress = 0.5 * sx * (1 + c2) + txy * s2
    return (np.hypot(shear[:, 0], shear[:, 1]),
            2 * np.hypot(normal[:, 0], normal[:, 1]),
            np.hypot(stress[:, 0], stress[:, 1]))


def critical_plane(load: LoadState, mat: MaterialProperties, step_deg: float = 0.5) -> CriticalPlaneResult:
    """Plane of maximum shear strain amplitude.

    Ties go to the larger normal strain range, then the larger peak normal
    stress (proportional loading always has two such planes).
    """
    nu = mat.nu_e
    ex, gxy, _, _ = _phasors(load)
    # |shear|^2 = p + q cos(4 theta) + r sin(4 theta) with shear = u sin(2 theta) + w cos(2 theta)
    u, w = -(1 + nu) * ex, gxy
    p = 0.5 * (u @ u + w @ w)
    q, r = 0.5 * (w @ w - u @ u), u @ w
    if np.hypot(q, r) > 1e-12 * p:
        # exact maximisers, one per half-turn of the plane
        theta = float(np.degrees(np.arctan2(r, q)) / 4.0)
        # wrap into [0, 180); -tiny % 180 rounds to 180
        cands = [c if c < 180.0 else 0.0 for c in (theta % 180.0, (theta + 90.0) % 180.0)]
    else:
        # amplitude equal on every plane: sweep and let the tie-breaks decide
        cands = list(np.arange(0.0, 180.0, step_deg))
    a, de, sn = plane_quantities(load, nu, cands)
    tied = [j for j in range(len(cands)) if a[j] >= a.max() * (1 - 1e-9)]
    # remaining ties: larger normal strain range, then larger normal stress; the
    # range tolerance absorbs rounding in the two candidate angles
    tol = 1e-6 * a.max()
    tied = [j for j in tied if de[j] >= de[tied].max() - tol]
    j = max(tied, key=lambda j: (sn[j], -cands[j]))
    return CriticalPlaneResult(float(a[j]), float(de[j]), float(sn[j]), float(cands[j]))


def axial_curve(mat: MaterialProperties, rev) -> np.ndarray:
    return mat.sigma_f_prime / mat.E_mpa * rev ** mat.b + mat.eps_f_prime * rev ** mat.c


def shear_curve(mat: MaterialProperties, rev) -> np.ndarray:
    return mat.tau_f_prime / mat.G_mpa * rev ** mat.b0 + mat.gamma_f_prime * rev ** mat.c0


def kbm_s0(mat: MaterialProperties, rev):
    el = mat.sigma_f_prime / mat.E_mpa * rev ** mat.b
    pl = mat.eps_f_prime * rev ** mat.c
    num = shear_curve(mat, rev) - (1 + mat.nu_e) * el - (1 + mat.nu_p) * pl
    return num / ((1 - mat.nu_e) * el + (1 - mat.nu_p) * pl)


def fs_k(mat: MaterialProperties, rev):
    el = mat.sigma_f_prime / mat.E_mpa * rev ** mat.b
    pl = mat.eps_f_prime * rev ** mat.c
    ratio = shear_curve(mat, rev) / ((1 + mat.nu_e) * el + (1 + mat.nu_p) * pl)
    return (ratio - 1) * 2 * mat.sigma_y / (mat.sigma_f_prime * rev ** mat.b)


def _check(criterion: str) -> str:
    crit = criterion.lower()
    if crit not in CRITERIA:
        raise UnknownCriterion(f"unknown criterion {criterion!r}; valid: {', '.join(CRITERIA)}")
    return crit


def damage_sides(criterion: str, load: LoadState, cp: CriticalPlaneResult, mat: MaterialProperties,
                 rev, whs_k: float | None = None, bm_s0: float = 0.5):
    """``(LHS, RHS)`` of the criterion at reversals ``rev``."""
    crit = _check(criterion)
    dg, de, sn = cp.max_shear_amp, cp.normal_strain_range, cp.max_normal_stress
    if crit == "cm_axial":
        return load.eps_a, axial_curve(mat, rev)
    if crit == "cm_shear":
        return dg, shear_curve(mat, rev)
    if crit in ("bm", "kbm"):
        s = bm_s0 if crit == "bm" else kbm_s0(mat, rev)
        el = mat.sigma_f_prime / mat.E_mpa * rev ** mat.b
        pl = mat.eps_f_prime * rev ** mat.c
        rhs = (1 + mat.nu_e + s * (1 - mat.nu_e)) * el + (1 + mat.nu_p + s * (1 - mat.nu_p)) * pl
        return dg + s * de, rhs
    if crit == "fs":
        return dg * (1 + fs_k(mat, rev) * sn / mat.sigma_y), shear_curve(mat, rev)
    mix = math.sqrt(max(sn, 0.0) * de / mat.E_mpa)
    if crit == "whs":
        if whs_k is None:
            raise ValueError("whs needs a calibrated weight k")
        return dg + whs_k * mix, shear_curve(mat, rev)
    return dg + 0.5 * (1 + sn / mat.sigma_y) * mix, shear_curve(mat, rev)


def _primary_driver(crit: str, load: LoadState, cp: CriticalPlaneResult) -> float:
    return load.eps_a if crit == "cm_axial" else cp.max_shear_amp


def solve_life(criterion: str, load: LoadState, mat: MaterialProperties, tol: float = 1e-10,
               whs_k: float | None = None, bm_s0: float = 0.5, cp: CriticalPlaneResult | None = None,
               max_iter: int = 200) -> tuple[float, float]:
    """Cycles to failure ``N_f`` and the residual ``|LHS - RHS|`` at that life.

    Bisection on ``log10(2N_f)`` over ``REV_BOUNDS``. Life-dependent material
    weights (KBM ``s0``, FS ``k``) are re-evaluated at every iterate.
    """
    crit = _check(criterion)
    if cp is None:
        cp = critical_plane(load, mat)
    if _primary_driver(crit, load, cp) <= 0:
        raise InvalidDamage(f"{crit}: damage parameter must be positive")

    def g(x: float) -> float:
        lhs, rhs = damage_sides(crit, load, cp, mat, 10.0 ** x, whs_k, bm_s0)
        return float(lhs - rhs)

    lo, hi = math.log10(REV_BOUNDS[0]), math.log10(REV_BOUNDS[1])
    g_lo, g_hi = g(lo), g(hi)
    if g_lo > 0:
        raise NoRootInBracket(f"{crit}: damage exceeds the life curve at 2N_f = {REV_BOUNDS[0]:g}")
    if g_hi < 0:
        raise NoRootInBracket(f"{crit}: damage below the life curve at 2N_f = {REV_BOUNDS[1]:g}")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        g_mid = g(mid)
        if g_mid == 0:
            lo = hi = mid
            break
        if g_mid < 0:
            lo = mid
        else:
            hi = mid
    x = lo if abs(g(lo)) <= abs(g(hi)) else hi
    residual = abs(g(x))
    if residual >= tol:
        raise NoRootInBracket(f"{crit}: bisection stalled with residual {residual:.3g}")
    return 10.0 ** x / 2.0, residual


def load_state(record) -> LoadState:
    """The single percent-to-fraction conversion between datasets and criteria."""
    return LoadState(record.eps_a_pct / 100.0, record.gamma_a_pct / 100.0,
                     record.sigma_a_mpa, record.tau_a_mpa, record.phase_deg)


@dataclass
class BaselinePrediction:
    criterion: str
    predicted: np.ndarray
    flags: list[str]
    residuals: np.ndarray
    whs_k: float | None = None

    @property
    def n_flagged(self) -> int:
        return sum(bool(f) for f in self.flags)


def _predict_states(crit: str, states: Sequence[LoadState], mat: MaterialProperties,
                    whs_k: float | None, bm_s0: float, planes: Sequence[CriticalPlaneResult]):
    preds, flags, resid = [], [], []
    for st, cp in zip(states, planes):
        try:
            n, r = solve_life(crit, st, mat, whs_k=whs_k, bm_s0=bm_s0, cp=cp)
            preds.append(n)
            resid.append(r)
            flags.append("")
        except (NoRootInBracket, InvalidDamage) as exc:
            preds.append(np.nan)
            resid.append(np.nan)
            flags.append(type(exc).__name__)
    return np.array(preds), flags, np.array(resid)


def calibrate_whs_k(states: Sequence[LoadState], observed: Sequence[float], mat: MaterialProperties,
                    bounds: tuple[float, float] = (0.0, 10.0), tol: float = 1e-6,
                    planes: Sequence[CriticalPlaneResult] | None = None) -> float:
    """Golden-section search for the WHS weight minimising log-life RMSE."""
    if planes is None:
        planes = [critical_plane(s, mat) for s in states]
    obs = np.log(np.asarray(observed, dtype=float))

    def loss(k: float) -> float:
        pred, _, _ = _predict_states("whs", states, mat, k, 0.5, planes)
        ok = np.isfinite(pred)
        if not ok.any():
            return np.inf
        # unsolvable records count as a full decade of error
        err = np.where(ok, np.log(np.where(ok, pred, 1.0)) - obs, math.log(10.0))
        return float(np.sqrt(np.mean(err ** 2)))

    invphi = (math.sqrt(5) - 1) / 2
    a, b = bounds
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = loss(c), loss(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = loss(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = loss(d)
    return (a + b) / 2


def predict_dataset(criterion: str, records: Iterable, mat: MaterialProperties,
                    whs_k: float | None = None, bm_s0: float = 0.5) -> BaselinePrediction:
    """Per-record life predictions; records whose root cannot be bracketed are flagged (NaN)."""
    crit = _check(criterion)
    records = list(records)
    states = [load_state(r) for r in records]
    planes = [critical_plane(s, mat) for s in states]
    if crit == "whs" and whs_k is None:
        whs_k = calibrate_whs_k(states, [r.nf_cycles for r in records], mat, planes=planes)
    preds, flags, resid = _predict_states(crit, states, mat, whs_k, bm_s0, planes)
    return BaselinePrediction(crit, preds, flags, resid, whs_k if crit == "whs" else None)
