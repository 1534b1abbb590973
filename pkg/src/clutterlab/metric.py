"""Quality score of an affordance map.

The score mixes three terms: how closely the main high-affordance region
follows an isotropic Gaussian, how far the nearest competing peak sits from
the maximum, and the maximum itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .affordance import AffordanceMap

SIGMA_MODES = ("literal", "rms")


@dataclass(frozen=True)
class MetricParams:
    w_flat: float = 0.75
    w_interval: float = 0.15
    w_max: float = 0.10
    beta: float = 0.5
    # "rms" is the default: see README, section "Flatness normalisation"
    sigma_mode: str = "rms"
    peak_window: int = 11
    peak_floor: float = 0.3
    nms_radius: float = 11.0
    fit_max_iter: int = 200
    fit_tol: float = 1e-6

    def __post_init__(self):
        total = self.w_flat + self.w_interval + self.w_max
        if abs(total - 1.0) > 1e-9 or min(self.w_flat, self.w_interval, self.w_max) < 0:
            raise ValueError(f"metric weights must be non-negative and sum to 1, got {total}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must be in (0, 1), got {self.beta}")
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}")


@dataclass
class Region:
    """4-connected component around the maximum, stored inside its bounding box."""
    mask: np.ndarray  # (m, n) bool, bbox-local
    row0: int
    col0: int

    @property
    def m(self) -> int:
        return self.mask.shape[0]

    @property
    def n(self) -> int:
        return self.mask.shape[1]

    @property
    def w(self) -> int:
        return self.n

    @property
    def l(self) -> int:
        return self.m

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return (self.row0, self.col0, self.m, self.n)

    @property
    def size(self) -> int:
        return int(self.mask.sum())

    def center(self) -> tuple[float, float]:
        return (self.row0 + (self.m - 1) / 2.0, self.col0 + (self.n - 1) / 2.0)

    def full_mask(self, shape) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        out[self.row0:self.row0 + self.m, self.col0:self.col0 + self.n] = self.mask
        return out

    def pixels(self) -> tuple[np.ndarray, np.ndarray]:
        rr, cc = np.nonzero(self.mask)
        return rr + self.row0, cc + self.col0


@dataclass
class GaussianFit:
    amplitude: float
    cx: float
    cy: float
    spread: float
    offset: float
    predicted: np.ndarray  # over the region bbox
    residual_sse: float
    iterations: int = 0
    converged: bool = True
    degenerate: bool = False


@dataclass
class MetricReport:
    p_M: tuple[int, int] | None
    v_M: float
    sigma: float
    phi_f: float
    phi_d: float
    phi: float
    peaks: list[tuple[int, int]] = field(default_factory=list)
    peak_values: list[float] = field(default_factory=list)
    region: Region | None = None
    fit: GaussianFit | None = None
    degenerate: bool = False

    @property
    def k(self) -> int:
        return len(self.peaks)

    def to_dict(self) -> dict:
        d = {"p_M": None if self.p_M is None else list(self.p_M), "v_M": self.v_M,
             "sigma": self.sigma, "phi_f": self.phi_f, "phi_d": self.phi_d, "phi": self.phi,
             "k": self.k, "peaks": [list(p) for p in self.peaks],
             "peak_values": self.peak_values, "degenerate": self.degenerate,
             "region": None, "fit": None}
        if self.region is not None:
            r = self.region
            d["region"] = {"bbox": list(r.bbox), "w": r.w, "l": r.l, "size": r.size,
                           "center": list(r.center())}
        if self.fit is not None:
            f = self.fit
            d["fit"] = {"amplitude": f.amplitude, "cx": f.cx, "cy": f.cy, "spread": f.spread,
                        "offset": f.offset, "residual_sse": f.residual_sse,
                        "iterations": f.iterations, "converged": f.converged,
                        "degenerate": f.degenerate}
        return d


def max_point(aff) -> tuple[tuple[int, int], float] | None:
    """Global maximum, ties to the smallest (row, col); ``None`` for an all-zero map."""
    v = _values(aff)
    if v.size == 0:
        raise ValueError("empty affordance map")
    flat = int(np.argmax(v))
    vm = float(v.flat[flat])
    if vm <= 0.0:
        return None
    r, c = divmod(flat, v.shape[1])
    return (r, c), vm


def extract_main_region(aff, p_M, beta: float = 0.5) -> Region:
    v = _values(aff)
    vm = float(v[p_M])
    if vm <= 0.0:
        raise ValueError("affordance at p_M must be positive")
    labels, _ = ndi.label(v >= beta * vm)
    mask = labels == labels[p_M]
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    return Region(mask[r0:r1, c0:c1].copy(), int(r0), int(c0))


# ---------------------------------------------------------------------------
# Gaussian fit

def gaussian_surface(params, rows, cols) -> np.ndarray:
    A, cx, cy, sg, b = params
    return b + A * np.exp(-((cols - cx) ** 2 + (rows - cy) ** 2) / (2.0 * sg * sg))


def _terms(params, rows, cols):
    A, cx, cy, sg, b = params
    dx, dy = cols - cx, rows - cy
    r2 = dx * dx + dy * dy
    g = np.exp(-r2 / (2.0 * sg * sg))
    return b + A * g, g, dx, dy, r2


def _jacobian(params, g, dx, dy, r2) -> np.ndarray:
    A, _, _, sg, _ = params
    Ag = A * g / (sg * sg)
    return np.stack([g, Ag * dx, Ag * dy, Ag * r2 / sg, np.ones_like(g)], axis=1)


def moment_init(s, rows, cols, v_M: float) -> np.ndarray:
    b = float(s.min())
    w = s - b
    if w.sum() <= 0.0:
        w = np.ones_like(s)
    cy = float((s * rows).sum() / s.sum()) if s.sum() > 0 else float(rows.mean())
    cx = float((s * cols).sum() / s.sum()) if s.sum() > 0 else float(cols.mean())
    var = float((w * ((cols - cx) ** 2 + (rows - cy) ** 2)).sum() / w.sum()) / 2.0
    A = v_M - b
    if A <= 0.0:
        A = max(float(s.max() - b), 1e-3)
    return np.array([A, cx, cy, max(math.sqrt(var), 0.5), b])


def levenberg_marquardt(params0, rows, cols, s, max_iter: int = 200, tol: float = 1e-6,
                        max_spread: float = math.inf):
    """Minimise ``sum((gaussian_surface - s)**2)``.

    Marquardt-scaled damping; an iteration ends at the first accepted step.
    Plateau-like data has no finite optimum (A, spread -> inf, offset -> -inf),
    hence ``max_spread``: steps are projected onto it and a pinned spread is
    frozen while the gradient pushes past the cap. If ``stall_window`` iterations still improve the cost
    by a relative amount below ``tol`` the best iterate is returned flagged as
    not converged.
    Returns ``(params, sse, iterations, converged)``.
    """
    stall_window = 10
    history = []
    x = np.asarray(params0, dtype=float).copy()
    pred, *terms = _terms(x, rows, cols)
    r = pred - s
    cost = float(r @ r)
    lam = 1e-3
    for it in range(1, max_iter + 1):
        if cost == 0.0:
            return x, cost, it - 1, True
        history.append(cost)
        if len(history) > stall_window and history[-stall_window - 1] - cost <= tol * cost:
            return x, cost, it - 1, False
        J = _jacobian(x, *terms)
        if x[3] >= max_spread and float(J[:, 3] @ r) < 0.0:
            # spread pinned at its cap and the descent direction points past it
            J[:, 3] = 0.0
        H = J.T @ J
        g = J.T @ r
        diag = np.maximum(np.diag(H), 1e-12)
        while True:
            try:
                step = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                if lam > 1e16:
                    return x, cost, it, False
                continue
            rel = float(np.linalg.norm(step) / (np.linalg.norm(x) + 1e-12))
            cand = x + step
            cand[3] = min(cand[3], max_spread)
            if cand[0] > 0.0 and cand[3] > 1e-3:
                cpred, *cterms = _terms(cand, rows, cols)
                rc = cpred - s
                cc = float(rc @ rc)
                if cc <= cost:
                    x, r, cost, terms = cand, rc, cc, cterms
                    lam = max(lam / 10.0, 1e-12)
                    if rel < tol:
                        return x, cost, it, True
                    break
            if rel < tol:
                # every remaining descent step is below tolerance
                return x, cost, it, True
            lam *= 10.0
            if lam > 1e16:
                return x, cost, it, True
    return x, cost, max_iter, False


def fit_gaussian(aff, region: Region, max_iter: int = 200, tol: float = 1e-6) -> GaussianFit:
    """Least-squares isotropic Gaussian plus offset over the region's pixels.

    Three Levenberg-Marquardt runs (moment start plus two narrow starts on the
    maximum); the lowest residual wins.
    """
    v = _values(aff)
    rows, cols = region.pixels()
    s = v[rows, cols]
    box = _bbox_values(v, region)
    if region.size < 5:
        return GaussianFit(float(s.max()), float(cols.mean()), float(rows.mean()), 0.0, 0.0,
                           box, 0.0, 0, True, True)
    rf, cf = rows.astype(float), cols.astype(float)
    cap = 2.0 * max(region.m, region.n)
    # the moment start can settle on a broad local minimum when the region
    # holds several bumps; narrow starts on the maximum catch the main one
    x0 = moment_init(s, rf, cf, float(s.max()))
    x0[3] = min(x0[3], cap)
    k = int(np.argmax(s))
    starts = [x0] + [np.array([s[k] - s.min(), cf[k], rf[k], sg, s.min()]) for sg in (1.0, 2.0)]
    best = None
    for start in starts:
        if start[0] <= 0.0:
            continue
        res = levenberg_marquardt(start, rf, cf, s, max_iter, tol, cap)
        if best is None or res[1] < best[1]:
            best = res
    x, sse, iters, ok = best
    rr, cc = np.mgrid[region.row0:region.row0 + region.m, region.col0:region.col0 + region.n]
    pred = gaussian_surface(x, rr.astype(float), cc.astype(float))
    return GaussianFit(float(x[0]), float(x[1]), float(x[2]), float(abs(x[3])), float(x[4]),
                       pred, float(sse), iters, ok, False)


def _bbox_values(v, region: Region) -> np.ndarray:
    """Region values over its bbox, zero outside the mask."""
    box = v[region.row0:region.row0 + region.m, region.col0:region.col0 + region.n]
    return np.where(region.mask, box, 0.0)


def flatness_metric(aff, region: Region, fit: GaussianFit, v_M: float,
                    mode: str = "literal") -> tuple[float, float]:
    """Spread of the relative fit error over the bbox and its score exp(-sigma).

    ``literal`` divides the root of the summed squares by the bbox area,
    ``rms`` takes the root-mean-square.
    """
    if v_M <= 0.0:
        raise ValueError("v_M must be positive")
    s = _bbox_values(_values(aff), region)
    e = (fit.predicted - s) / v_M
    total = float(np.sum(e * e))
    area = region.m * region.n
    if mode == "literal":
        sigma = math.sqrt(total) / area
    elif mode == "rms":
        sigma = math.sqrt(total / area)
    else:
        raise ValueError(f"unknown sigma mode {mode!r}")
    return sigma, math.exp(-sigma)


def _punctured_max(v: np.ndarray, window: int) -> np.ndarray:
    """Max over the ``window``x``window`` neighbourhood excluding the centre pixel."""
    h = window // 2
    pad = np.pad(v, h, mode="constant", constant_values=-np.inf)
    rows = ndi.maximum_filter1d(pad, window, axis=1, mode="constant", cval=-np.inf)
    H, W = v.shape
    out = np.full(v.shape, -np.inf)
    for dr in range(1, h + 1):
        out = np.maximum(out, rows[h - dr:h - dr + H, h:h + W])
        out = np.maximum(out, rows[h + dr:h + dr + H, h:h + W])
    for dc in range(1, h + 1):
        out = np.maximum(out, pad[h:h + H, h - dc:h - dc + W])
        out = np.maximum(out, pad[h:h + H, h + dc:h + dc + W])
    return out


def detect_peaks(aff, region: Region, window: int = 11, floor: float = 0.3,
                 nms_radius: float = 11.0) -> list[tuple[tuple[int, int], float]]:
    """Strict local maxima outside the main region, strongest first."""
    v = _values(aff)
    cand = v >= floor
    if cand.any():
        cand &= v > _punctured_max(v, window)
        cand &= ~region.full_mask(v.shape)
    rr, cc = np.nonzero(cand)
    order = sorted(range(len(rr)), key=lambda i: (-v[rr[i], cc[i]], rr[i], cc[i]))
    kept: list[tuple[tuple[int, int], float]] = []
    for i in order:
        p = (int(rr[i]), int(cc[i]))
        if all(math.hypot(p[0] - q[0][0], p[1] - q[0][1]) > nms_radius for q in kept):
            kept.append((p, float(v[p])))
    return kept


def interval_metric(p_M, region: Region, peaks) -> float:
    if not peaks:
        return 1.0
    a = (region.w + region.l) / 2.0
    pts = [p[0] if isinstance(p[0], tuple) else p for p in peaks]
    nearest = min(math.hypot(p_M[0] - q[0], p_M[1] - q[1]) for q in pts)
    return min(nearest / a, 1.0)


def compute_metric(aff, params: MetricParams | None = None) -> MetricReport:
    p = params or MetricParams()
    mp = max_point(aff)
    if mp is None:
        return MetricReport(None, 0.0, 0.0, 0.0, 0.0, 0.0, degenerate=True)
    p_M, v_M = mp
    region = extract_main_region(aff, p_M, p.beta)
    fit = fit_gaussian(aff, region, p.fit_max_iter, p.fit_tol)
    sigma, phi_f = flatness_metric(aff, region, fit, v_M, p.sigma_mode)
    found = detect_peaks(aff, region, p.peak_window, p.peak_floor, p.nms_radius)
    phi_d = interval_metric(p_M, region, [q for q, _ in found])
    phi = p.w_flat * phi_f + p.w_interval * phi_d + p.w_max * v_M
    phi = min(max(phi, 0.0), 1.0)
    return MetricReport(p_M, v_M, sigma, phi_f, phi_d, phi, [q for q, _ in found],
                        [val for _, val in found], region, fit)


def reward(phi_prev: float, phi_curr: float, delta: float = 0.01) -> int:
    """+1 when the score rose by more than ``delta``, else -1."""
    return 1 if phi_curr - phi_prev > delta else -1


def _values(aff) -> np.ndarray:
    return aff.values if isinstance(aff, AffordanceMap) else np.asarray(aff, dtype=float)
