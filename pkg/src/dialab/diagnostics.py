"""BN drift forensics and the closed-form single-layer BN gradient."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .numeric import Histogram, wasserstein1_normalized


@dataclass(frozen=True)
class LayerDrift:
    layer_index: int
    mean_drift: float
    var_drift: float


def bn_drift_report(benign, attacked) -> list:
    """Per BN layer, normalized W1 distance between channel histograms of the two snapshots.

    The benign snapshot is the normalization reference.
    """
    if len(benign) != len(attacked):
        raise DimensionError(f"snapshots cover {len(benign)} and {len(attacked)} BN layers")
    report = []
    for b, a in zip(benign, attacked):
        if np.shape(b.mu) != np.shape(a.mu):
            raise DimensionError(f"BN layer {b.layer_index}: channel counts differ")
        report.append(LayerDrift(
            b.layer_index,
            wasserstein1_normalized(Histogram(np.real(b.mu)), Histogram(np.real(a.mu))),
            wasserstein1_normalized(Histogram(np.real(b.var)), Histogram(np.real(a.var))),
        ))
    return report


def max_mean_drift(report) -> float:
    return max((r.mean_drift for r in report), default=0.0)


def drift_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer_index", "mean_drift", "var_drift"])
    for r in report:
        w.writerow([r.layer_index, repr(r.mean_drift), repr(r.var_drift)])
    return buf.getvalue()


def drift_summary(report, top: int = 3) -> str:
    ranked = sorted(report, key=lambda r: (-r.mean_drift, r.layer_index))[:top]
    lines = [f"top {len(ranked)} BN layers by mean drift:"]
    for r in ranked:
        lines.append(f"  layer {r.layer_index}: mean_drift={r.mean_drift:.6g} var_drift={r.var_drift:.6g}")
    return "\n".join(lines) + "\n"


def analytic_bn_input_gradient(x_tgt, batch, w, i, j, tau=0.0, mu_s=None, sigma2_s=None, eps=0.0) -> float:
    """d f(x_tgt) / d batch[i, j] for ``f(x) = sum_j w_j (x_j - mu_bar_j) / sqrt(var_bar_j + eps) + b``.

    ``mu_bar``/``var_bar`` mix the batch statistics (biased variance) with
    ``mu_s``/``sigma2_s`` at weight ``tau``.  ``x_tgt`` is held fixed, so
    row ``i`` must not be the target itself when the target sits in the batch.

        -(1 - tau) / (n s) * (1 + (t_j - mu_bar_j) (x_ij - mu_t_j) / s^2) * w_j,
        s = sqrt(var_bar_j + eps)
    """
    x_tgt = np.asarray(x_tgt, dtype=float)
    batch = np.asarray(batch, dtype=float)
    w = np.asarray(w, dtype=float)
    n = batch.shape[0]
    if n < 2:
        raise DomainError("batch statistics need n >= 2")
    col = batch[:, j]
    mu_t = col.mean()
    var_t = ((col - mu_t) ** 2).mean()
    if tau:
        if mu_s is None or sigma2_s is None:
            raise DomainError("tau > 0 needs source statistics")
        mu_src, var_src = np.asarray(mu_s, dtype=float)[j], np.asarray(sigma2_s, dtype=float)[j]
    else:
        mu_src = var_src = 0.0
    mu_bar = tau * mu_src + (1.0 - tau) * mu_t
    var_bar = tau * var_src + (1.0 - tau) * var_t + eps
    if var_bar <= 0:
        raise DomainError(f"smoothed variance of coordinate {j} is zero")
    s = np.sqrt(var_bar)
    return float(-(1.0 - tau) / (n * s) * (1.0 + (x_tgt[j] - mu_bar) * (col[i] - mu_t) / var_bar) * w[j])
