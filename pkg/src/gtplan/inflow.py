"""Multivariate lag-1 autoregressive inflow model.

Conditioning of next-stage inflows on the current stage works on
standardized anomalies:

    (a[t+1] - mu[t+1]) / sd[t+1] = rho[t] * (a[t] - mu[t]) / sd[t]
                                   + sqrt(1 - rho[t]^2) * xi

with xi standard-normal noise correlated across hydros by the model's
spatial matrix.  Conditioned values are clamped at zero from below
(physical nonnegativity); clamp events are reported to the caller.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from gtplan.errors import DataError, DegenerateModelError
from gtplan.model import InflowModel

_EIG_FLOOR = 1e-10


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def conditioning_slope(model: InflowModel, t: int) -> np.ndarray:
    """d a[t+1] / d a[t] for each hydro (before clamping)."""
    sd_now = model.std[t]
    sd_next = model.std[t + 1]
    rho = model.serial_correlation[t]
    slope = np.zeros_like(sd_now)
    active = rho != 0.0
    if np.any(active & (sd_now == 0.0)):
        i = int(np.nonzero(active & (sd_now == 0.0))[0][0])
        raise DegenerateModelError(
            f"hydro {i}: zero inflow std at stage {t} with nonzero serial correlation")
    np.divide(rho * sd_next, sd_now, out=slope, where=active)
    return slope


def condition_next(model: InflowModel, t: int, current: np.ndarray,
                   noise: np.ndarray) -> np.ndarray:
    """Next-stage inflow vector conditioned on the current one (clamped at 0)."""
    values, _ = condition_next_detailed(model, t, current, noise)
    return values


def condition_next_detailed(model: InflowModel, t: int, current: np.ndarray,
                            noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """As condition_next, also returning the mask of clamped entries."""
    current = np.asarray(current, dtype=float)
    noise = np.asarray(noise, dtype=float)
    n = model.n_hydros
    if not 0 <= t < model.n_stages - 1:
        raise DataError(f"stage {t} has no successor in a {model.n_stages}-stage model")
    if current.shape != (n,) or noise.shape != (n,):
        raise DataError(f"expected vectors of length {n}")
    if not np.all(np.isfinite(current)):
        raise DataError("current inflows must be finite")

    rho = model.serial_correlation[t]
    sd_now = model.std[t]
    degenerate = (rho != 0.0) & (sd_now == 0.0)
    if np.any(degenerate):
        i = int(np.nonzero(degenerate)[0][0])
        raise DegenerateModelError(
            f"hydro {i}: zero inflow std at stage {t} with nonzero serial correlation")
    anomaly = np.zeros(n)
    np.divide(current - model.mean[t], sd_now, out=anomaly, where=sd_now > 0)
    raw = model.mean[t + 1] + model.std[t + 1] * (
        rho * anomaly + np.sqrt(np.maximum(0.0, 1.0 - rho ** 2)) * noise)
    clamped = raw < 0.0
    return np.where(clamped, 0.0, raw), clamped


def spatial_factor(model: InflowModel) -> np.ndarray:
    """Symmetric PSD square root of the spatial correlation matrix, with
    eigenvalues floored to keep the factorization defined near singularity."""
    sc = model.spatial_correlation
    if sc.size and not np.allclose(sc, sc.T, atol=1e-10):
        raise DataError("spatial correlation matrix is not symmetric")
    vals, vecs = np.linalg.eigh(sc) if sc.size else (np.zeros(0), np.zeros((0, 0)))
    if sc.size and vals.min() < -1e-8:
        raise DataError(f"spatial correlation is not PSD (min eigenvalue {vals.min():.3e})")
    vals = np.maximum(vals, _EIG_FLOOR)
    return (vecs * np.sqrt(vals)) @ vecs.T


def sample_noise(model: InflowModel, count: int, seed) -> np.ndarray:
    """``count`` standard-normal draws (rows) correlated across hydros.

    Fully reproducible: the same seed yields bit-identical draws.
    """
    if count < 1:
        raise DataError("count must be >= 1")
    rng = _as_rng(seed)
    factor = spatial_factor(model)
    z = rng.standard_normal((count, model.n_hydros))
    return z @ factor  # factor is symmetric


@dataclass(frozen=True)
class FitResult:
    model: InflowModel
    warnings: tuple[str, ...]


def fit_ar1(series: np.ndarray, period: int) -> FitResult:
    """Method-of-moments fit of the lag-1 model from an inflow history.

    ``series`` is (n_observations, n_hydros) in chronological order;
    observation k belongs to stage-of-year ``k % period``.  Needs at least
    two observations per stage-of-year.  A constant series gets std 0 and
    serial correlation 0 with a warning.
    """
    series = np.asarray(series, dtype=float)
    if series.ndim == 1:
        series = series[:, None]
    n_obs, n_hydro = series.shape
    if period < 1:
        raise DataError("period must be >= 1")
    if n_obs < 2 * period:
        raise DataError("need at least two observations per stage-of-year")

    mean = np.zeros((period, n_hydro))
    std = np.zeros((period, n_hydro))
    rho = np.zeros((period, n_hydro))
    warnings: list[str] = []
    degenerate: set[int] = set()

    groups = [series[t::period] for t in range(period)]
    for t in range(period):
        mean[t] = groups[t].mean(axis=0)
        std[t] = groups[t].std(axis=0, ddof=1)
        for i in range(n_hydro):
            if std[t, i] == 0.0:
                warnings.append(f"hydro {i}: constant inflow at stage-of-year {t}; "
                                "std set to 0 and serial correlation to 0")
                degenerate.add(i)

    # lag-1 correlation per stage-of-year: pair stage t with the preceding
    # observation (previous stage, previous year for t == 0)
    for t in range(period):
        now_idx = np.arange(t if t > 0 else period, n_obs, period)
        prev_idx = now_idx - 1
        now = series[now_idx]
        prev = series[prev_idx]
        t_prev = (t - 1) % period
        for i in range(n_hydro):
            if std[t, i] == 0.0 or std[t_prev, i] == 0.0 or len(now_idx) < 2:
                rho[t_prev, i] = 0.0
                continue
            c = np.corrcoef(prev[:, i], now[:, i])
            r = float(c[0, 1]) if np.isfinite(c[0, 1]) else 0.0
            rho[t_prev, i] = float(np.clip(r, -1.0, 1.0))

    # spatial correlation of standardized residuals, pooled over time
    resid_rows = []
    for k in range(1, n_obs):
        t = k % period
        t_prev = (t - 1) % period
        row = np.zeros(n_hydro)
        ok = True
        for i in range(n_hydro):
            if std[t, i] == 0.0:
                ok = False
                break
            z_now = (series[k, i] - mean[t, i]) / std[t, i]
            if std[t_prev, i] > 0:
                z_prev = (series[k - 1, i] - mean[t_prev, i]) / std[t_prev, i]
            else:
                z_prev = 0.0
            r = rho[t_prev, i]
            denom = np.sqrt(max(1.0 - r ** 2, 1e-12))
            row[i] = (z_now - r * z_prev) / denom
        if ok:
            resid_rows.append(row)
    if len(resid_rows) >= 2 and n_hydro > 1:
        resid = np.asarray(resid_rows)
        sd = resid.std(axis=0, ddof=1)
        corr = np.eye(n_hydro)
        for i in range(n_hydro):
            for j in range(i + 1, n_hydro):
                if sd[i] > 0 and sd[j] > 0:
                    cij = float(np.corrcoef(resid[:, i], resid[:, j])[0, 1])
                    corr[i, j] = corr[j, i] = float(np.clip(cij, -1.0, 1.0))
    else:
        corr = np.eye(n_hydro)

    model = InflowModel(mean=mean, std=std, serial_correlation=rho,
                        spatial_correlation=corr,
                        degenerate_hydros=tuple(sorted(degenerate)))
    return FitResult(model, tuple(warnings))


def load_history(text: str) -> np.ndarray:
    """Parse a tabular inflow history: one ``stage hydro_id value`` triple per
    line (whitespace or comma separated, '#' comments).  Returns an array
    shaped (n_stages, n_hydros) with hydros ordered by first appearance."""
    stages: dict[int, dict[str, float]] = {}
    order: list[str] = []
    for lineno, rawline in enumerate(io.StringIO(text), start=1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 3:
            raise DataError(f"history line {lineno}: expected 'stage hydro value', got {rawline!r}")
        try:
            stage = int(parts[0])
            value = float(parts[2])
        except ValueError as exc:
            raise DataError(f"history line {lineno}: {exc}") from exc
        hydro = parts[1]
        if hydro not in order:
            order.append(hydro)
        stages.setdefault(stage, {})[hydro] = value
    if not stages:
        raise DataError("empty inflow history")
    stage_ids = sorted(stages)
    out = np.zeros((len(stage_ids), len(order)))
    for si, stage in enumerate(stage_ids):
        for hi, hydro in enumerate(order):
            if hydro not in stages[stage]:
                raise DataError(f"stage {stage}: missing value for hydro {hydro!r}")
            out[si, hi] = stages[stage][hydro]
    return out
