"""Stripe-gated coincidence histograms, accidental subtraction, mode counting.

For every same-shot (Stokes, anti-Stokes) pair whose transverse-axis sum
passes the stripe gate ``|theta_t^S + theta_t^AS| < delta_theta``, the
counts ``n2`` are incremented at the pair's longitudinal coordinates.
Accidentals are estimated from the product of the two singles
distributions (divided by the number of frames) summed over all
stripe-compatible transverse bin pairs, then subtracted.

The correlation peak is fitted as a 2D Gaussian in the rotated frame
u = (x_S + x_AS)/sqrt(2), v = (x_S - x_AS)/sqrt(2); the fitted widths
``sigma_sum`` (along u) and ``sigma_diff`` (along v) give the mode count
M = 2 (sigma_diff / sigma_sum)^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .errors import BinningMismatchError, FitError, ParameterError, ShotOrderError
from .eventio import EventTable, atomic_output, fmt

_SQRT2 = math.sqrt(2.0)


def make_edges(fov_mrad: float, bin_mrad: float) -> np.ndarray:
    """Symmetric bin edges covering [-fov, fov] with zero on an edge."""
    if fov_mrad <= 0 or bin_mrad <= 0:
        raise ParameterError("field of view and bin width must be positive")
    half = int(math.ceil(fov_mrad / bin_mrad))
    return (np.arange(2 * half + 1) - half) * bin_mrad


def centers(edges: np.ndarray) -> np.ndarray:
    return 0.5 * (edges[:-1] + edges[1:])


@dataclass
class CoincidenceHistogram:
    """Mergeable 2D coincidence counts plus the singles needed for accidentals."""

    x_edges: np.ndarray          # longitudinal-axis bin edges, both regions
    y_edges: np.ndarray          # transverse-axis bin edges for the singles maps
    n2: np.ndarray               # (nx, nx) gated pair counts (S axis, AS axis)
    marginal_s: np.ndarray       # (nx, ny) Stokes singles over (long, transverse)
    marginal_as: np.ndarray      # (nx, ny) anti-Stokes singles
    n_frames: int
    delta_theta_mrad: float
    axis: str = "x"              # which camera axis is longitudinal

    def same_binning(self, other: "CoincidenceHistogram") -> bool:
        return (
            np.array_equal(self.x_edges, other.x_edges)
            and np.array_equal(self.y_edges, other.y_edges)
            and self.delta_theta_mrad == other.delta_theta_mrad
            and self.axis == other.axis
        )

    def merge(self, other: "CoincidenceHistogram") -> "CoincidenceHistogram":
        if not self.same_binning(other):
            raise BinningMismatchError("cannot merge histograms with different binnings")
        return CoincidenceHistogram(
            self.x_edges, self.y_edges,
            self.n2 + other.n2,
            self.marginal_s + other.marginal_s,
            self.marginal_as + other.marginal_as,
            self.n_frames + other.n_frames,
            self.delta_theta_mrad, self.axis,
        )

    def __add__(self, other):
        return self.merge(other)


def empty_histogram(x_edges, y_edges, delta_theta_mrad, axis="x") -> CoincidenceHistogram:
    nx, ny = len(x_edges) - 1, len(y_edges) - 1
    return CoincidenceHistogram(
        np.asarray(x_edges, dtype=float), np.asarray(y_edges, dtype=float),
        np.zeros((nx, nx)), np.zeros((nx, ny)), np.zeros((nx, ny)),
        0, delta_theta_mrad, axis,
    )


def iter_shot_groups(table: EventTable):
    """Yield (shot_id, stokes xy, antistokes xy) arrays per shot.

    The stream must arrive grouped by shot: once a shot id changes it may
    not reappear. Shots with no events at all are still counted via
    ``table.n_shots``.
    """
    sid = table.shot_id
    if len(sid) == 0:
        return
    boundaries = np.flatnonzero(np.diff(sid)) + 1
    starts = np.concatenate(([0], boundaries))
    stops = np.concatenate((boundaries, [len(sid)]))
    seen = set()
    for a, b in zip(starts, stops):
        shot = int(sid[a])
        if shot in seen:
            raise ShotOrderError(
                f"shot {shot} appears in multiple groups; the event stream must be "
                "grouped by shot_id")
        seen.add(shot)
        reg = table.region[a:b]
        xs = np.column_stack((table.theta_x[a:b], table.theta_y[a:b]))
        yield shot, xs[reg == 0], xs[reg == 1]


def accumulate(
    table: EventTable,
    delta_theta_mrad: float,
    x_edges,
    y_edges=None,
    axis: str = "x",
) -> CoincidenceHistogram:
    """Build the stripe-gated coincidence histogram from an event stream.

    All same-shot cross-region pairs enter (no exclusive matching); events
    within one region never pair with each other. Every event also lands in
    its region's singles map, which is what the accidental estimate uses.
    """
    if delta_theta_mrad <= 0:
        raise ParameterError("delta_theta must be positive")
    if axis not in ("x", "y"):
        raise ParameterError(f"axis must be 'x' or 'y', got {axis!r}")
    x_edges = np.asarray(x_edges, dtype=float)
    y_edges = x_edges if y_edges is None else np.asarray(y_edges, dtype=float)
    hist = empty_histogram(x_edges, y_edges, delta_theta_mrad, axis)
    hist.n_frames = table.n_shots

    long_s: list[np.ndarray] = []
    long_as: list[np.ndarray] = []
    li, ti = (0, 1) if axis == "x" else (1, 0)
    for _, s_xy, as_xy in iter_shot_groups(table):
        if len(s_xy):
            hist.marginal_s += np.histogram2d(s_xy[:, li], s_xy[:, ti],
                                              bins=(x_edges, y_edges))[0]
        if len(as_xy):
            hist.marginal_as += np.histogram2d(as_xy[:, li], as_xy[:, ti],
                                               bins=(x_edges, y_edges))[0]
        if len(s_xy) == 0 or len(as_xy) == 0:
            continue
        # stripe gate on the transverse sum, all cross pairs
        tsum = s_xy[:, ti][:, None] + as_xy[None, :, ti]
        pass_gate = np.abs(tsum) < delta_theta_mrad
        if not pass_gate.any():
            continue
        i_s, i_as = np.nonzero(pass_gate)
        long_s.append(s_xy[i_s, li])
        long_as.append(as_xy[i_as, li])

    if long_s:
        hist.n2 += np.histogram2d(np.concatenate(long_s), np.concatenate(long_as),
                                  bins=(x_edges, x_edges))[0]
    return hist


def _triangle_cdf(t: np.ndarray, half_width: float) -> np.ndarray:
    """CDF of the sum of two uniform-in-bin offsets (triangular kernel)."""
    t = np.clip(t / half_width, -1.0, 1.0)
    return np.where(t < 0, 0.5 * (1.0 + t) ** 2, 1.0 - 0.5 * (1.0 - t) ** 2)


def stripe_weights(y_centers: np.ndarray, bin_width: float,
                   delta_theta: float) -> np.ndarray:
    """Fraction of each transverse bin pair that passes the stripe gate.

    For events uniform within their bins, the sum coordinate smears each
    center sum by a triangular kernel of half-width one bin; integrating
    that kernel over the gate window gives the exact acceptance of the bin
    pair. A plain center-inside-stripe indicator would undercount the
    stripe measure (by 25% at delta_theta = 2 bins) and bias every
    accidental estimate.
    """
    s = y_centers[:, None] + y_centers[None, :]
    return (_triangle_cdf(delta_theta - s, bin_width)
            - _triangle_cdf(-delta_theta - s, bin_width))


def accidental_histogram(hist: CoincidenceHistogram) -> np.ndarray:
    """Accidental coincidences estimated from the singles distributions.

    Discretizes the marginal-product integral on the histogram binning
    (piecewise-constant marginals, exact stripe overlap per bin pair),
    normalized by the number of frames.
    """
    if hist.n_frames <= 0:
        raise ParameterError("accidental estimate requires n_frames > 0")
    cy = centers(hist.y_edges)
    bin_w = float(hist.y_edges[1] - hist.y_edges[0])
    stripe = stripe_weights(cy, bin_w, hist.delta_theta_mrad)
    return hist.marginal_s @ stripe @ hist.marginal_as.T / hist.n_frames


def subtract(hist: CoincidenceHistogram, n_acc: np.ndarray | None = None) -> np.ndarray:
    """Correlated pair counts ``n2 - n_acc``.

    Small negative values from counting statistics are preserved so that
    downstream moments stay unbiased.
    """
    if n_acc is None:
        n_acc = accidental_histogram(hist)
    n_acc = np.asarray(n_acc, dtype=float)
    if n_acc.shape != hist.n2.shape:
        raise BinningMismatchError(
            f"accidental counts shape {n_acc.shape} does not match n2 {hist.n2.shape}")
    return hist.n2 - n_acc


@dataclass
class CorrelationFit:
    """2D Gaussian fit of the correlation peak in rotated coordinates.

    ``sigma_sum`` is the standard deviation along u = (x_S + x_AS)/sqrt(2)
    (the conditional pair spread), ``sigma_diff`` along
    v = (x_S - x_AS)/sqrt(2) (the retrieved angular span). For any physical
    dataset sigma_sum <= sigma_diff.
    """

    amplitude: float
    center_s: float
    center_as: float
    sigma_sum: float
    sigma_diff: float
    sigma_sum_err: float
    sigma_diff_err: float
    covariance: np.ndarray = field(repr=False)

    def widths_1e2(self) -> tuple[float, float]:
        """(2 w_corr, 2 w_avg): full 1/e^2 widths along the two axes."""
        return 4.0 * self.sigma_sum, 4.0 * self.sigma_diff


def _moment_guess(corrected, u, v):
    w = np.clip(corrected, 0.0, None)
    total = w.sum()
    if total <= 0:
        raise FitError("corrected histogram has no positive counts to fit",
                       initial_guess=None)
    u0 = float((w * u).sum() / total)
    v0 = float((w * v).sum() / total)
    su = math.sqrt(max(float((w * (u - u0) ** 2).sum() / total), 1e-12))
    sv = math.sqrt(max(float((w * (v - v0) ** 2).sum() / total), 1e-12))
    amp = float(w.max())
    return amp, u0, v0, su, sv


def fit_correlation(
    hist: CoincidenceHistogram,
    corrected: np.ndarray | None = None,
    max_nfev: int = 400,
) -> CorrelationFit:
    """Weighted least-squares Gaussian fit of the corrected coincidence map.

    Weights are Poisson, ``1 / max(n2, 1)`` per bin; the initial guess
    comes from the second moments of the corrected counts.
    """
    if corrected is None:
        corrected = subtract(hist)
    if corrected.shape != hist.n2.shape:
        raise BinningMismatchError("corrected counts do not match the histogram binning")
    cx = centers(hist.x_edges)
    xs_grid, xas_grid = np.meshgrid(cx, cx, indexing="ij")
    u = (xs_grid + xas_grid) / _SQRT2
    v = (xs_grid - xas_grid) / _SQRT2
    w = 1.0 / np.maximum(hist.n2, 1.0)
    sw = np.sqrt(w).ravel()
    data = corrected.ravel()
    uu, vv = u.ravel(), v.ravel()

    p0 = _moment_guess(corrected, u, v)
    amp0, u0, v0, su0, sv0 = p0
    lo = [0.0, u0 - 10 * su0, v0 - 10 * sv0, su0 * 1e-3, sv0 * 1e-3]
    hi = [np.inf, u0 + 10 * su0, v0 + 10 * sv0, su0 * 1e3, sv0 * 1e3]

    def residuals(p):
        amp, cu, cv, su, sv = p
        model = amp * np.exp(-((uu - cu) ** 2) / (2 * su**2)
                             - ((vv - cv) ** 2) / (2 * sv**2))
        return sw * (model - data)

    res = least_squares(residuals, p0, bounds=(lo, hi), max_nfev=max_nfev)
    if not res.success:
        raise FitError(
            f"correlation fit did not converge: {res.message}; "
            f"initial guess (amp, u0, v0, sigma_u, sigma_v) = {p0}",
            initial_guess=p0,
        )
    amp, cu, cv, su, sv = res.x
    # parameter covariance for known per-bin variances
    jtj = res.jac.T @ res.jac
    try:
        cov = np.linalg.inv(jtj)
    except np.linalg.LinAlgError:
        cov = np.full((5, 5), np.nan)
    su_err = math.sqrt(max(cov[3, 3], 0.0))
    sv_err = math.sqrt(max(cov[4, 4], 0.0))
    # rotate the peak center back to (x_S, x_AS)
    center_s = (cu + cv) / _SQRT2
    center_as = (cu - cv) / _SQRT2
    return CorrelationFit(float(amp), float(center_s), float(center_as),
                          float(su), float(sv), float(su_err), float(sv_err), cov)


def mode_count(fit: CorrelationFit) -> float:
    """Number of angular modes M = 2 (sigma_diff / sigma_sum)^2.

    The ratio of 1/e^2 widths equals the sigma ratio, so the width
    convention cancels; the factor 2 accounts for both transverse axes.
    """
    if fit.sigma_sum <= 0:
        raise ParameterError(f"sigma_sum must be positive, got {fit.sigma_sum}")
    return 2.0 * (fit.sigma_diff / fit.sigma_sum) ** 2


def mode_count_err(fit: CorrelationFit) -> float:
    """Standard error of :func:`mode_count`, from the fitted width errors."""
    m = mode_count(fit)
    if fit.sigma_diff <= 0:
        return float("nan")
    return m * math.sqrt((2 * fit.sigma_diff_err / fit.sigma_diff) ** 2
                         + (2 * fit.sigma_sum_err / fit.sigma_sum) ** 2)


def central_window_mask(hist: CoincidenceHistogram, window_mrad: float) -> np.ndarray:
    """Bins whose center satisfies |x_S + x_AS| <= window (the correlated band)."""
    cx = centers(hist.x_edges)
    s = cx[:, None] + cx[None, :]
    return np.abs(s) <= window_mrad


def accidental_fraction(hist: CoincidenceHistogram, window_mrad: float,
                        n_acc: np.ndarray | None = None) -> float:
    """Share of accidentals among all gated pairs inside the central band."""
    if n_acc is None:
        n_acc = accidental_histogram(hist)
    mask = central_window_mask(hist, window_mrad)
    total = hist.n2[mask].sum()
    if total <= 0:
        raise ParameterError("no counts in the central window")
    return float(n_acc[mask].sum() / total)


def coincidence_ratio(hist: CoincidenceHistogram, window_mrad: float,
                      n_acc: np.ndarray | None = None) -> float:
    """Correlated share sum(n2 - n_acc) / sum(n2) inside the central band."""
    return 1.0 - accidental_fraction(hist, window_mrad, n_acc)


# ---------------------------------------------------------------------------
# long-format CSV

def write_histogram_csv(path, hist: CoincidenceHistogram, n_acc=None):
    if n_acc is None:
        n_acc = accidental_histogram(hist)
    corr = hist.n2 - n_acc
    e = hist.x_edges
    with atomic_output(path) as fh:
        fh.write("# n_frames = %d\n" % hist.n_frames)
        fh.write("# delta_theta_mrad = %s\n" % fmt(hist.delta_theta_mrad))
        fh.write("# axis = %s\n" % hist.axis)
        fh.write("s_bin_lo,s_bin_hi,as_bin_lo,as_bin_hi,n2,n_acc,n_corr\n")
        nx = len(e) - 1
        for i in range(nx):
            for j in range(nx):
                fh.write(f"{fmt(e[i])},{fmt(e[i+1])},{fmt(e[j])},{fmt(e[j+1])},"
                         f"{fmt(hist.n2[i, j])},{fmt(n_acc[i, j])},{fmt(corr[i, j])}\n")


def read_histogram_csv(path):
    """Rehydrate (x_edges, n2, n_acc, n_frames, delta_theta, axis) from CSV."""
    import csv as _csv

    meta = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                k, _, v = line[1:].partition("=")
                meta[k.strip()] = v.strip()
                continue
            if line.startswith("s_bin_lo"):
                continue
            rows.append([float(p) for p in line.split(",")])
    arr = np.asarray(rows)
    if arr.size == 0:
        raise ParameterError(f"{path}: empty histogram CSV")
    los = np.unique(arr[:, 0])
    his = np.unique(arr[:, 1])
    edges = np.concatenate((los, his[-1:]))
    nx = len(edges) - 1
    if len(arr) != nx * nx:
        raise BinningMismatchError(f"{path}: expected {nx*nx} rows, got {len(arr)}")
    idx = lambda col: np.searchsorted(los, col)
    i = idx(arr[:, 0])
    j = idx(arr[:, 2])
    n2 = np.zeros((nx, nx))
    n_acc = np.zeros((nx, nx))
    n2[i, j] = arr[:, 4]
    n_acc[i, j] = arr[:, 5]
    return (edges, n2, n_acc, int(meta.get("n_frames", 0)),
            float(meta.get("delta_theta_mrad", 0.3)), meta.get("axis", "x"))
