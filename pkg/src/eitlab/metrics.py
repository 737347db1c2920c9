"""Image-quality and signal metrics, computed over in-disk pixels only.

Corner pixels are structurally zero in every image, so including them
would reward padding; all statistics below are restricted to the disk
mask.  The ssim variant here is the global-statistics form with squared
variances in the denominator, kept exactly as the evaluation protocol
defines it rather than normalized to the windowed convention.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .fem import MeasurementFrame
from .phantoms import PixelImage

# dynamic range of the two-level truth images (|inclusion - background|)
DEFAULT_PSNR_MAX = 0.597

STABILIZER = 1e-12


def _masked_pair(recon: PixelImage, truth: PixelImage):
    if recon.values.shape != truth.values.shape:
        raise ContractError("image grids differ")
    mask = truth.mask & recon.mask
    return recon.values[mask], truth.values[mask]


def re(recon: PixelImage, truth: PixelImage) -> float:
    """L1 distance relative to the truth's L1 mass."""
    a, b = _masked_pair(recon, truth)
    denom = np.abs(b).sum()
    if denom == 0.0:
        raise ContractError("relative error is undefined for all-zero truth")
    return float(np.abs(a - b).sum() / denom)


def ssim(recon: PixelImage, truth: PixelImage) -> float:
    """Global-statistics structural similarity with squared variances."""
    a, b = _masked_pair(recon, truth)
    am, bm = a.mean(), b.mean()
    va, vb = a.var(), b.var()
    cov = ((a - am) * (b - bm)).mean()
    return float(
        (4.0 * am * bm * cov)
        / ((am * am + bm * bm + STABILIZER) * (va * va + vb * vb + STABILIZER))
    )


def mse(recon: PixelImage, truth: PixelImage) -> float:
    a, b = _masked_pair(recon, truth)
    return float(np.mean((a - b) ** 2))


def psnr(recon: PixelImage, truth: PixelImage,
         max_value: float = DEFAULT_PSNR_MAX) -> float:
    """Peak signal-to-noise in dB; identical images give +inf."""
    m = mse(recon, truth)
    if m == 0.0:
        return float("inf")
    return float(10.0 * np.log10(max_value * max_value / m))


def dr(recon: PixelImage, truth: PixelImage) -> float:
    """Dynamic-range ratio; 1 means the value span is reproduced."""
    a, b = _masked_pair(recon, truth)
    denom = b.max() - b.min()
    if denom == 0.0:
        raise ContractError("dynamic range is undefined for constant truth")
    return float((a.max() - a.min()) / denom)


def cc(recon: PixelImage, truth: PixelImage) -> float:
    """Pearson correlation of the two pixel populations."""
    a, b = _masked_pair(recon, truth)
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        raise ContractError("correlation is undefined for a constant image")
    return float((da * db).sum() / denom)


def measure_snr(clean: MeasurementFrame, noisy: MeasurementFrame) -> float:
    """Realized signal-to-noise of a corrupted frame, in dB."""
    if clean.values.shape != noisy.values.shape:
        raise ContractError("frame lengths differ")
    rms_signal = np.sqrt(np.mean(clean.values**2))
    rms_noise = np.sqrt(np.mean((noisy.values - clean.values) ** 2))
    if rms_noise == 0.0:
        return float("inf")
    return float(20.0 * np.log10(rms_signal / rms_noise))


METRIC_NAMES = ("re", "ssim", "psnr", "dr", "mse", "cc")


def compute_all(recon: PixelImage, truth: PixelImage,
                psnr_max: float = DEFAULT_PSNR_MAX) -> dict:
    return {
        "re": re(recon, truth),
        "ssim": ssim(recon, truth),
        "psnr": psnr(recon, truth, psnr_max),
        "dr": dr(recon, truth),
        "mse": mse(recon, truth),
        "cc": cc(recon, truth),
    }


@dataclass
class MetricReport:
    """Per-record metric rows plus their arithmetic means."""

    rows: list[dict] = field(default_factory=list)

    def add(self, record_id, metrics: dict, **meta):
        row = {"record": record_id}
        row.update(meta)
        row.update(metrics)
        self.rows.append(row)

    def aggregate(self) -> dict:
        out = {}
        for name in METRIC_NAMES:
            vals = [r[name] for r in self.rows if name in r]
            if vals:
                out[name] = float(sum(vals) / len(vals))
        out["n_records"] = len(self.rows)
        return out

    def write_csv(self, path):
        if not self.rows:
            raise ContractError("cannot write an empty report")
        fields = list(self.rows[0].keys())
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for row in self.rows:
                w.writerow(row)

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.aggregate(), fh, indent=2, sort_keys=True)
            fh.write("\n")
