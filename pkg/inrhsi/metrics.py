"""Reconstruction quality: PSNR, SSIM and spectral angle, plus difference maps.

PSNR and SSIM are computed per band and averaged over bands; SAM is the angle between the
true and reconstructed spectrum of each pixel, in degrees, averaged over pixels.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from inrhsi.dataio import HsiCube
from inrhsi.errors import BandIndexError, DimensionError

logger = logging.getLogger(__name__)

PSNR_PEAK = 1.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_WINDOW = 2 * int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5) + 1
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SAM_EPSILON = 1e-12
FIGURE_BANDS = (3, 7, 11, 15, 19, 23, 27)
DIFF_SCALES_NAME = "diff_scales.json"


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    sam: float
    per_band: dict = field(default_factory=dict)
    ssim_global_fallback: bool = False
    peak: str = "fixed"


def _arrays(Y, Yh):
    a = Y.data if isinstance(Y, HsiCube) else np.asarray(Y)
    b = Yh.data if isinstance(Yh, HsiCube) else np.asarray(Yh)
    if a.shape != b.shape:
        raise DimensionError(f"Cube shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise DimensionError(f"Metrics expect [L, H, W] cubes, got {a.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def psnr(Y, Yh, per_image_peak=False):
    """Per-band PSNR in dB and its band mean; a band with zero error scores +inf.

    With ``per_image_peak`` an all-zero reference band falls back to the fixed peak.
    """
    a, b = _arrays(Y, Yh)
    mse = ((a - b) ** 2).mean(axis=(1, 2))
    peak = np.full(mse.shape, PSNR_PEAK)
    if per_image_peak:
        band_max = a.max(axis=(1, 2))
        dark = band_max <= 0.0
        if dark.any():
            logger.warning(
                "Bands %s of the reference are all zero; using peak %.1f for them",
                np.flatnonzero(dark).tolist(), PSNR_PEAK,
            )
        peak = np.where(dark, PSNR_PEAK, band_max)
    per_band = np.array([
        math.inf if err == 0.0 else 10.0 * math.log10(top * top / err) for err, top in zip(mse, peak)
    ])
    return per_band, float(per_band.mean())


def _ssim_map(a, b):
    def blur(image):
        return gaussian_filter(image, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    numerator = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    denominator = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return numerator / denominator


def _global_ssim(a, b):
    mu_a, mu_b = a.mean(), b.mean()
    var_a, var_b = a.var(), b.var()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    return ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)) / (
        (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    )


def ssim(Y, Yh):
    """Per-band mean SSIM over 11x11 Gaussian windows, band mean, and the fallback flag.

    Only windows lying fully inside the image are averaged. Bands smaller than one window use
    whole-image statistics instead and set the flag.
    """
    a, b = _arrays(Y, Yh)
    height, width = a.shape[1:]
    border = SSIM_WINDOW // 2
    fallback = height < SSIM_WINDOW or width < SSIM_WINDOW
    per_band = []
    for band_a, band_b in zip(a, b):
        if fallback:
            per_band.append(float(_global_ssim(band_a, band_b)))
        else:
            values = _ssim_map(band_a, band_b)[border:height - border, border:width - border]
            per_band.append(float(values.mean()))
    per_band = np.array(per_band)
    return per_band, float(per_band.mean()), fallback


def sam(Y, Yh):
    """Per-pixel spectral angle [H, W] in degrees and its mean.

    The angle is evaluated as 2 * atan2(|u - v|, |u + v|) on unit spectra, equal to the clamped
    arccos of their inner product but accurate near 0 and 180 degrees.
    """
    a, b = _arrays(Y, Yh)
    u = a / np.maximum(np.linalg.norm(a, axis=0), SAM_EPSILON)
    v = b / np.maximum(np.linalg.norm(b, axis=0), SAM_EPSILON)
    angles = 2.0 * np.arctan2(np.linalg.norm(u - v, axis=0), np.linalg.norm(u + v, axis=0))
    degrees = np.degrees(angles)
    return degrees, float(degrees.mean())


def evaluate(Y, Yh, per_image_peak=False, per_band=True):
    band_psnr, mean_psnr = psnr(Y, Yh, per_image_peak)
    band_ssim, mean_ssim, fallback = ssim(Y, Yh)
    _, mean_sam = sam(Y, Yh)
    if fallback:
        logger.warning("Cube smaller than the %dx%d SSIM window; using global statistics", SSIM_WINDOW, SSIM_WINDOW)
    breakdown = {"psnr": band_psnr.tolist(), "ssim": band_ssim.tolist()} if per_band else {}
    return MetricReport(
        psnr=mean_psnr,
        ssim=mean_ssim,
        sam=mean_sam,
        per_band=breakdown,
        ssim_global_fallback=fallback,
        peak="per_image" if per_image_peak else "fixed",
    )


def block_seam_score(Yh, cell):
    """Mean jump across cell boundaries minus the mean jump between interior neighbours.

    Jumps are absolute differences between horizontally and vertically adjacent pixels,
    averaged over bands. Positive scores mean visible blocking.
    """
    data = Yh.data if isinstance(Yh, HsiCube) else np.asarray(Yh)
    data = data.astype(np.float64)
    if cell < 2:
        raise DimensionError(f"Seam score needs cells of at least 2 pixels, got {cell}")
    col_jumps = np.abs(np.diff(data, axis=2))
    row_jumps = np.abs(np.diff(data, axis=1))
    col_boundary = (np.arange(col_jumps.shape[2]) + 1) % cell == 0
    row_boundary = (np.arange(row_jumps.shape[1]) + 1) % cell == 0
    boundary = np.concatenate([col_jumps[:, :, col_boundary].ravel(), row_jumps[:, row_boundary, :].ravel()])
    interior = np.concatenate([col_jumps[:, :, ~col_boundary].ravel(), row_jumps[:, ~row_boundary, :].ravel()])
    if boundary.size == 0 or interior.size == 0:
        raise DimensionError(f"Image of shape {data.shape} has no cell boundaries for cell size {cell}")
    return float(boundary.mean() - interior.mean())


# difference maps


def diff_map(Y, Yh, bands):
    a, b = _arrays(Y, Yh)
    maps = {}
    for band in bands:
        if not 0 <= band < a.shape[0]:
            raise BandIndexError(f"Band index {band} outside [0, {a.shape[0]})")
        maps[int(band)] = np.abs(a[band] - b[band])
    return maps


def write_diff_maps(maps, out_dir, wavelengths=None, png=False):
    """Write each map as an 8-bit PGM scaled to its own maximum.

    The value that 255 stands for, and the band's wavelength, go to ``DIFF_SCALES_NAME``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    scales = {}
    for band, image in maps.items():
        top = float(image.max())
        pixels = np.zeros(image.shape, dtype=np.uint8) if top == 0.0 else np.round(image / top * 255.0).astype(np.uint8)
        path = out_dir / f"diff_band{band:02d}.pgm"
        Image.fromarray(pixels).save(path)
        written.append(path)
        entry = {"file": path.name, "scale": top}
        label = ""
        if wavelengths is not None:
            entry["wavelength_nm"] = float(wavelengths[band])
            label = f"wavelength={entry['wavelength_nm']:.1f}nm"
        scales[str(band)] = entry
        if png:
            written.append(_write_png(image, out_dir / f"diff_band{band:02d}.png", band, label))
    scales_path = out_dir / DIFF_SCALES_NAME
    with open(scales_path, "w", encoding="utf-8") as file_handle:
        json.dump(scales, file_handle, indent=2)
    written.append(scales_path)
    logger.info("Wrote %d difference maps to %s", len(maps), out_dir)
    return written


def _write_png(image, path, band, label):
    from matplotlib.figure import Figure

    fig = Figure(figsize=(4, 3.5))
    ax = fig.add_subplot(111)
    shown = ax.imshow(image, cmap="gray", vmin=0.0)
    ax.set_title(f"|Y - Yh| band {band} {label}".strip())
    ax.set_axis_off()
    fig.colorbar(shown, ax=ax)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    return path


# reports


def _number(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def report_to_dict(report):
    return {
        "psnr_db": _number(report.psnr),
        "ssim": report.ssim,
        "sam_deg": report.sam,
        "peak": report.peak,
        "ssim_global_fallback": report.ssim_global_fallback,
        "per_band": {key: [_number(value) for value in values] for key, values in report.per_band.items()},
    }


def format_report_text(report):
    psnr_text = "inf" if math.isinf(report.psnr) else f"{report.psnr:.6f}"
    lines = [
        f"psnr_db={psnr_text}",
        f"ssim={report.ssim:.6f}",
        f"sam_deg={report.sam:.6f}",
        f"peak={report.peak}",
        f"ssim_global_fallback={str(report.ssim_global_fallback).lower()}",
    ]
    for index, value in enumerate(report.per_band.get("psnr", [])):
        lines.append(f"band{index:02d}_psnr_db={'inf' if math.isinf(value) else f'{value:.6f}'}")
    for index, value in enumerate(report.per_band.get("ssim", [])):
        lines.append(f"band{index:02d}_ssim={value:.6f}")
    return "\n".join(lines)


def write_report(report, out_dir, stem="metrics"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text_path = out_dir / f"{stem}.txt"
    json_path = out_dir / f"{stem}.json"
    text_path.write_text(format_report_text(report) + "\n", encoding="utf-8")
    with open(json_path, "w", encoding="utf-8") as file_handle:
        json.dump(report_to_dict(report), file_handle, indent=2)
    return text_path, json_path
