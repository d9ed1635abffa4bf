"""Matting quality metrics and grouped reporting.

SAD, MSE, Grad, and Conn follow the standard matting benchmark
definitions: SAD/Grad/Conn carry the conventional 1/1000 scaling, MSE is
the plain per-pixel mean.  Grad uses first-order Gaussian-derivative
filters (sigma 1.4, truncated at 4 sigma, L2-normalized).  Conn sweeps
thresholds 0.1..0.9, tracks for each pixel the level below its first
disconnection from the largest jointly-foreground component
(4-connected), and penalizes distances >= 0.15.

Reports group samples by the transparent / non-transparent attribute and
also aggregate the whole set; the whole-set mean is exactly the
count-weighted combination of the group means.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = ["evaluate", "report", "MetricsReport",
           "GROUPS", "CONN_LEVELS", "CONN_THETA", "GRAD_SIGMA"]

GROUPS = ("transparent", "non-transparent", "whole")
GRAD_SIGMA = 1.4
GRAD_RADIUS = math.ceil(4 * GRAD_SIGMA)
CONN_LEVELS = tuple(np.round(np.arange(1, 10) * 0.1, 1))
CONN_THETA = 0.15


def _plane(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[-2:])


def _check_range(arr, what):
    if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
        raise ValueError(f"{what} values outside [0, 1]")


def _gauss_deriv_kernel(sigma=GRAD_SIGMA, radius=GRAD_RADIUS):
    """Horizontal-derivative kernel: Gaussian in y times d/dx Gaussian in x,
    L2-normalized.  Transpose for the vertical derivative."""
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax ** 2) / (2 * sigma * sigma)) / (sigma * np.sqrt(2 * np.pi))
    dg = -ax / (sigma * sigma) * g
    hx = g[:, None] * dg[None, :]
    return hx / np.sqrt(np.sum(hx * hx))


_HX = _gauss_deriv_kernel()


def _grad_amplitude(a: np.ndarray) -> np.ndarray:
    gx = ndimage.convolve(a, _HX, mode="nearest")
    gy = ndimage.convolve(a, _HX.T, mode="nearest")
    return np.sqrt(gx * gx + gy * gy)


def _grad_metric(p: np.ndarray, g: np.ndarray) -> float:
    diff = _grad_amplitude(p) - _grad_amplitude(g)
    return float(np.sum(diff * diff)) / 1000.0


def _largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 4-connected true region; ties go to the earliest label,
    which is the component whose first pixel comes first in raster order."""
    labels, n = ndimage.label(mask)  # default structure = 4-connectivity
    if n == 0:
        return np.zeros_like(mask)
    counts = np.bincount(labels.reshape(-1))[1:]
    best = int(np.argmax(counts)) + 1  # argmax takes the first (lowest) label
    return labels == best


def _conn_metric(p: np.ndarray, g: np.ndarray) -> float:
    l_map = np.full(p.shape, -1.0)
    prev_level = 0.0
    for level in CONN_LEVELS:
        omega = _largest_component((p >= level) & (g >= level))
        fresh = (l_map == -1.0) & ~omega
        l_map[fresh] = prev_level
        prev_level = level
    l_map[l_map == -1.0] = CONN_LEVELS[-1]  # never disconnected
    dp = p - l_map
    dg = g - l_map
    phi_p = 1.0 - dp * (dp >= CONN_THETA)
    phi_g = 1.0 - dg * (dg >= CONN_THETA)
    return float(np.sum(np.abs(phi_p - phi_g))) / 1000.0


def evaluate(pred, gt):
    """(SAD, MSE, Grad, Conn) for one predicted matte against ground truth."""
    p = _plane(pred)
    g = _plane(gt)
    if p.shape != g.shape:
        raise ValueError(f"pred {p.shape} vs gt {g.shape} shapes differ")
    _check_range(p, "pred")
    _check_range(g, "gt")
    p = np.clip(p, 0.0, 1.0)
    g = np.clip(g, 0.0, 1.0)
    d = p - g
    sad = float(np.sum(np.abs(d))) / 1000.0
    mse = float(np.mean(d * d))
    return sad, mse, _grad_metric(p, g), _conn_metric(p, g)


@dataclass
class MetricsReport:
    """Per-group metric means plus sample counts."""

    groups: dict  # group name -> {"count": int, "sad": float|None, ...}

    _COLS = ("sad", "mse", "grad", "conn")

    def to_json(self) -> str:
        return json.dumps(self.groups, indent=2)

    def to_text(self) -> str:
        header = f"{'group':<16} {'n':>4} " + " ".join(
            f"{c.upper():>10}" for c in self._COLS)
        lines = [header, "-" * len(header)]
        for name in GROUPS:
            g = self.groups[name]
            cells = " ".join(
                f"{g[c]:>10.4f}" if g[c] is not None else f"{'-':>10}"
                for c in self._COLS)
            lines.append(f"{name:<16} {g['count']:>4} {cells}")
        return "\n".join(lines)


def report(samples) -> MetricsReport:
    """Aggregate (pred, gt, attribute) triples into grouped metric means."""
    samples = list(samples)
    if not samples:
        raise ValueError("report needs at least one sample")
    per_sample = []
    for pred, gt, attribute in samples:
        if attribute not in GROUPS[:2]:
            raise ValueError(f"unknown attribute {attribute!r}")
        per_sample.append((attribute, evaluate(pred, gt)))

    def mean_over(rows):
        n = len(rows)
        if n == 0:
            return {"count": 0, "sad": None, "mse": None,
                    "grad": None, "conn": None}
        sums = [0.0, 0.0, 0.0, 0.0]
        for vals in rows:
            for i in range(4):
                sums[i] += vals[i]
        return {"count": n, "sad": sums[0] / n, "mse": sums[1] / n,
                "grad": sums[2] / n, "conn": sums[3] / n}

    groups = {}
    for name in GROUPS[:2]:
        groups[name] = mean_over([v for a, v in per_sample if a == name])
    groups["whole"] = mean_over([v for _, v in per_sample])
    return MetricsReport(groups=groups)
