"""Evaluation metrics: MSE, ESR, NRMSE, spectral flux, multi-resolution STFT.

The two spectral metrics compare target y against prediction y_hat through
Hann-windowed magnitude STFTs.  Both normalize by the target, so neither is
symmetric in its arguments; that is deliberate.  Denominators and log
arguments are floored at 1e-7.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InputError, MetricUndefinedError
from .numerics import MAG_FLOOR, Spectrogram, frame_signal, stft_mag

SF_WINDOW = 2048
SF_HOP = 512
MULTIRES_WINDOWS = (256, 512, 1024)


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.ndim != 1 or y_hat.ndim != 1:
        raise InputError("metrics take 1-d signals")
    if y.shape != y_hat.shape:
        raise InputError(f"length mismatch: {y.shape[0]} vs {y_hat.shape[0]}")
    return y, y_hat


def mse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    if y.size == 0:
        raise InputError("mse on empty signals")
    return float(np.mean((y - y_hat) ** 2))


def esr(y, y_hat) -> float:
    """Error-to-signal ratio: sum((y - y_hat)^2) / sum(y^2)."""
    y, y_hat = _pair(y, y_hat)
    energy = float(y @ y)
    if energy == 0.0:
        raise MetricUndefinedError("ESR undefined for a zero-energy target")
    d = y - y_hat
    return float(d @ d) / energy


def nrmse(y, y_hat) -> float:
    """RMSE of the error normalized by the RMSE of the target (= sqrt(ESR))."""
    return float(np.sqrt(esr(y, y_hat)))


def spectral_flux_metric(y, y_hat, window_size: int = SF_WINDOW, hop: int = SF_HOP) -> float:
    """Compare target and predicted spectral flux, normalized by the target's.

    Flux is the elementwise magnitude change between consecutive STFT
    frames.  The metric is the L1 norm of the flux difference divided by
    the L1 norm of the target's flux (floored at 1e-7): a norm ratio, so
    near-silent cells cannot dominate, and transient mismatches that
    sample-domain averages wash out still register.
    """
    y, y_hat = _pair(y, y_hat)
    if y.shape[0] < 2 * window_size:
        raise InputError(f"signals must hold at least {2 * window_size} samples "
                         f"for two {window_size}-sample frames")
    my = stft_mag(y, window_size, hop).magnitudes
    mh = stft_mag(y_hat, window_size, hop).magnitudes
    flux_y = np.abs(np.diff(my, axis=0))
    flux_h = np.abs(np.diff(mh, axis=0))
    return float(np.abs(flux_y - flux_h).sum() / max(flux_y.sum(), MAG_FLOOR))


def multires_stft_metric(y, y_hat, windows=MULTIRES_WINDOWS) -> float:
    """Sum over resolutions of linear and log spectral L1 distances.

    For each window size m (hop m/4) the linear term is the norm ratio
    sum(| |Y| - |Yhat| |) / sum(|Y|) and the log term the per-cell mean of
    | log|Y| - log|Yhat| |, with magnitudes floored at 1e-7 inside logs and
    denominators.  Both normalize by the target, so the metric is
    deliberately asymmetric in its arguments.
    """
    y, y_hat = _pair(y, y_hat)
    n = y.shape[0]
    if n < max(windows):
        raise InputError(f"signals must hold at least {max(windows)} samples")
    total = 0.0
    for m in windows:
        hop = m // 4
        my = stft_mag(y, m, hop).magnitudes
        mh = stft_mag(y_hat, m, hop).magnitudes
        lin = np.abs(my - mh).sum() / max(my.sum(), MAG_FLOOR)
        log = np.abs(np.log(np.maximum(my, MAG_FLOOR)) - np.log(np.maximum(mh, MAG_FLOOR)))
        total += float(lin) + float(np.mean(log))
    return total


def rms_energy_track(y, window: int = 4096, overlap: float = 0.75) -> np.ndarray:
    """Per-frame RMS with the given window and fractional overlap."""
    y = np.asarray(y, dtype=np.float64)
    hop = max(1, int(round(window * (1.0 - overlap))))
    frames = frame_signal(y, window, hop)
    return np.sqrt(np.mean(frames ** 2, axis=1))


def spectrogram_report(y, window: int = 2048, overlap: float = 0.25) -> Spectrogram:
    """Hann magnitude spectrogram for visualization export."""
    hop = max(1, int(round(window * (1.0 - overlap))))
    return stft_mag(np.asarray(y, dtype=np.float64), window, hop)


@dataclass
class MetricReport:
    """All metric values for one model on one signal pair, plus provenance."""

    mse: float
    esr: float
    nrmse: float
    m_sf: float
    m_stft: float
    window: str = "hann"
    sf_window: int = SF_WINDOW
    sf_hop: int = SF_HOP
    resolutions: tuple = MULTIRES_WINDOWS
    model: str = ""
    dataset: str = ""
    split: str = ""

    CSV_FIELDS = ("model", "dataset", "split", "mse", "esr", "nrmse", "m_sf", "m_stft")

    def csv_row(self) -> list:
        return [self.model, self.dataset, self.split,
                f"{self.mse:.9e}", f"{self.esr:.9e}", f"{self.nrmse:.9e}",
                f"{self.m_sf:.9e}", f"{self.m_stft:.9e}"]


def compute_report(y, y_hat, model: str = "", dataset: str = "", split: str = "") -> MetricReport:
    """Evaluate every metric on one target/prediction pair."""
    return MetricReport(
        mse=mse(y, y_hat),
        esr=esr(y, y_hat),
        nrmse=nrmse(y, y_hat),
        m_sf=spectral_flux_metric(y, y_hat),
        m_stft=multires_stft_metric(y, y_hat),
        model=model, dataset=dataset, split=split,
    )


def write_report_csv(path, reports: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MetricReport.CSV_FIELDS)
        for r in reports:
            writer.writerow(r.csv_row())


def mean_report(reports: list, model: str = "", dataset: str = "") -> MetricReport:
    """Arithmetic mean of each metric across reports (the summary row)."""
    if not reports:
        raise InputError("mean_report needs at least one report")
    return MetricReport(
        mse=float(np.mean([r.mse for r in reports])),
        esr=float(np.mean([r.esr for r in reports])),
        nrmse=float(np.mean([r.nrmse for r in reports])),
        m_sf=float(np.mean([r.m_sf for r in reports])),
        m_stft=float(np.mean([r.m_stft for r in reports])),
        model=model or reports[0].model,
        dataset=dataset or reports[0].dataset,
        split="mean",
    )
