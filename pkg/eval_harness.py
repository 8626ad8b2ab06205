"""Distortion metrics, evaluation reports and SNR sweeps of trained models.

Rates are delivered by the ideal capacity-achieving code of ``channel``:
bits arrive intact, so distortion depends on λ only and the SNR sets how
many channel symbols the bits cost. The fixed-CBR curve combines both by
picking, at every SNR, the best model whose rate fits the budget.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402
from torchmetrics.functional.image import multiscale_structural_similarity_index_measure  # noqa: E402

from channel import bpp_from_snr, effective_snr_db, snr_from_bpp  # noqa: E402
from dataset_ingest import ImageSet, derive_seed  # noqa: E402
from errors import ParameterError, ShapeError  # noqa: E402
from rate_accounting import (RateBreakdown, bits_per_pixel, cbr_breakdown, rate_A,  # noqa: E402
                             usage_entropy_bits, usage_payload_bits)
from seb_core import UsageMap  # noqa: E402
from seb_pipeline import SebTransmissionModel, group_by_size  # noqa: E402

logger = logging.getLogger(__name__)

PEAK = 1.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_SSIM_KERNEL = 11
DEFAULT_CBR = 1.0 / 30.0
CSV_COLUMNS = ["method", "snr_db", "lambda", "psnr_mean", "msssim_mean", "cbr_total", "cbr_S", "cbr_A",
               "cbr_Zm", "cbr_Zr", "bpp", "seb_share"]
PROPOSED = "seb"


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = PEAK) -> float:
    """10·log10(peak²/MSE) in dB; ``inf`` for identical images."""
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare images of shape {tuple(a.shape)} and {tuple(b.shape)}")
    mse = float(torch.mean((a.to(torch.float64) - b.to(torch.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def ms_ssim_scales(height: int, width: int, kernel_size: int = MS_SSIM_KERNEL) -> int:
    """Number of dyadic scales (at most five) an image of this size supports."""
    side = min(height, width)
    for scales in range(len(MS_SSIM_WEIGHTS), 0, -1):
        divisor = max(1, scales - 1) ** 2
        if side // divisor > kernel_size - 1 and side // 2 ** (scales - 1) >= kernel_size:
            return scales
    return 0


def ms_ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Multi-scale SSIM with the standard five-scale weights.

    Images too small for five scales are scored on fewer, with the leading
    weights renormalized to sum to one. Negative contrast-structure terms are
    clipped to zero, so the score stays in [0, 1].
    """
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare images of shape {tuple(a.shape)} and {tuple(b.shape)}")
    height, width = a.shape[-2:]
    scales = ms_ssim_scales(height, width)
    if scales == 0:
        raise ShapeError(f"{height}×{width} image is smaller than the {MS_SSIM_KERNEL}-tap SSIM window")
    weights = MS_SSIM_WEIGHTS[:scales]
    if scales < len(MS_SSIM_WEIGHTS):
        logger.warning("MS-SSIM on %d×%d image uses %d of %d scales", height, width, scales, len(MS_SSIM_WEIGHTS))
        total = sum(weights)
        weights = tuple(w / total for w in weights)
    preds = a.to(torch.float64).reshape((-1,) + tuple(a.shape[-3:]))
    target = b.to(torch.float64).reshape((-1,) + tuple(b.shape[-3:]))
    score = multiscale_structural_similarity_index_measure(
        preds, target, data_range=PEAK, kernel_size=MS_SSIM_KERNEL, betas=weights, normalize="relu")
    return float(score)


@dataclass
class EvalReport:
    """Per-image quality and the rate accounting of one model at one SNR."""
    snr_db: float
    lam: Optional[float]
    psnr: List[float]
    msssim: List[float]
    reference_psnr: List[float]
    rates: RateBreakdown
    cbr: Dict[str, float]
    bpp: float
    usage_bits: Dict[str, float] = field(default_factory=dict)
    method: str = PROPOSED
    gain: complex = 1.0

    @property
    def psnr_mean(self) -> float:
        return _mean(self.psnr)

    @property
    def msssim_mean(self) -> float:
        return _mean(self.msssim)

    @property
    def reference_psnr_mean(self) -> float:
        return _mean(self.reference_psnr)

    def at_snr(self, snr_db: float, image_dims) -> "EvalReport":
        """Same images and bits priced at another SNR over the same channel gain."""
        return EvalReport(snr_db, self.lam, self.psnr, self.msssim, self.reference_psnr, self.rates,
                          cbr_breakdown(self.rates, effective_snr_db(snr_db, self.gain), image_dims), self.bpp,
                          self.usage_bits, self.method, self.gain)

    def to_row(self) -> Dict[str, float]:
        row = {
            "method": self.method,
            "snr_db": self.snr_db,
            "lambda": self.lam if self.lam is not None else math.nan,
            "psnr_mean": self.psnr_mean,
            "msssim_mean": self.msssim_mean,
            "bpp": self.bpp,
            "seb_share": self.rates.shares()["S"],
        }
        row.update(self.cbr)
        return row


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values) if values else math.nan


def _dims(images: Iterable[torch.Tensor]) -> List[Tuple[int, int, int]]:
    return [tuple(image.shape) for image in images]


def usage_bits(usage: UsageMap) -> Dict[str, float]:
    """Usage-map cost three ways: ideal (log2 K per index), serialized and empirical entropy."""
    return {
        "ideal": rate_A(usage.n_images, usage.n_p, usage.K),
        "serialized": float(usage_payload_bits(usage.n_images, usage.n_p, usage.K)),
        "entropy": usage_entropy_bits(usage.indices),
    }


class ReportBuilder:
    """Collects scored groups of a corpus into one EvalReport.

    Groups may arrive in any order; per-image lists follow corpus order.
    With ``msssim`` False the MS-SSIM column is NaN and never computed.
    """

    def __init__(self, images: ImageSet, msssim: bool = True):
        self.images = images
        self.msssim = msssim
        self.psnrs: Dict[int, float] = {}
        self.msssims: Dict[int, float] = {}
        self.reference_psnrs: Dict[int, float] = {}
        self.rates: Optional[RateBreakdown] = None
        self.usage = {"ideal": 0.0, "serialized": 0.0, "entropy": 0.0}

    def add(self, indices: Sequence[int], reconstruction: torch.Tensor, reference: torch.Tensor,
            rates: RateBreakdown, usage: UsageMap) -> None:
        """Score one transmitted group; row r of the tensors is image ``indices[r]``."""
        self.rates = rates.detached() if self.rates is None else self.rates + rates.detached()
        for kind, bits in usage_bits(usage).items():
            self.usage[kind] += bits
        for row, index in enumerate(indices):
            original = self.images[index]
            self.psnrs[index] = psnr(original, reconstruction[row])
            self.msssims[index] = ms_ssim(original, reconstruction[row]) if self.msssim else math.nan
            self.reference_psnrs[index] = psnr(original, reference[row])

    def build(self, snr_db: float, lam: Optional[float] = None, gain: complex = 1.0) -> EvalReport:
        missing = sorted(set(range(len(self.images))) - set(self.psnrs))
        if missing:
            raise ParameterError(f"{len(missing)} image(s) were never scored, e.g. index {missing[0]}")
        order = range(len(self.images))
        dims = _dims(self.images)
        return EvalReport(
            snr_db=snr_db,
            lam=lam,
            psnr=[self.psnrs[i] for i in order],
            msssim=[self.msssims[i] for i in order],
            reference_psnr=[self.reference_psnrs[i] for i in order],
            rates=self.rates,
            cbr=cbr_breakdown(self.rates, effective_snr_db(snr_db, gain), dims),
            bpp=bits_per_pixel(self.rates.total, dims),
            usage_bits=dict(self.usage),
            gain=gain,
        )


def evaluate(model: SebTransmissionModel, images: ImageSet, snr_db: float, lam: Optional[float] = None,
             seed: int = 0, gain: complex = 1.0, msssim: bool = True) -> EvalReport:
    """Transmit every subset of ``images`` through ``model`` and score the result.

    Bits are priced with an ideal code at the post-equalization SNR for ``gain``.
    """
    if len(images) == 0:
        raise ParameterError("cannot evaluate an empty image set")
    model.eval()
    builder = ReportBuilder(images, msssim=msssim)
    for label, members in sorted(images.subsets().items()):
        for group in group_by_size([images[i] for i in members]):
            indices = [members[g] for g in group]
            batch = torch.stack([images[i] for i in indices])
            out = model.encode(batch, seed=derive_seed(seed, label, indices[0]))
            builder.add(indices, out.reconstruction, out.reference, out.rates, out.usage)
    return builder.build(snr_db, lam, gain)


class BaselineAdapter(Protocol):
    """A comparison codec that can be swept next to the Seb model."""
    name: str

    def encode_decode(self, images: List[torch.Tensor], bpp_target: float) -> Tuple[List[torch.Tensor], float]:
        """Return reconstructions and the bits spent on all of them."""


BASELINE_ADAPTERS: Dict[str, BaselineAdapter] = {}


def evaluate_baseline(adapter: BaselineAdapter, images: ImageSet, snr_db: float, cbr_value: float = DEFAULT_CBR,
                      gain: complex = 1.0, msssim: bool = True) -> EvalReport:
    dims = _dims(images)
    priced_db = effective_snr_db(snr_db, gain)
    budget = bpp_from_snr(priced_db, cbr_value)
    reconstructions, bits = adapter.encode_decode(list(images), budget)
    rates = RateBreakdown(bits_Zr=float(bits), image_count=len(images))
    return EvalReport(
        snr_db=snr_db,
        lam=None,
        psnr=[psnr(a, b) for a, b in zip(images, reconstructions)],
        msssim=[ms_ssim(a, b) if msssim else math.nan for a, b in zip(images, reconstructions)],
        reference_psnr=[],
        rates=rates,
        cbr=cbr_breakdown(rates, priced_db, dims),
        bpp=bits_per_pixel(bits, dims),
        method=adapter.name,
        gain=gain,
    )


def required_snr_db(report: EvalReport, cbr_value: float = DEFAULT_CBR) -> float:
    """Transmit SNR at which the report's rate fits into ``cbr_value`` over its channel gain."""
    gain_db = effective_snr_db(0.0, report.gain)
    return snr_from_bpp(report.bpp, cbr_value) - gain_db


def snr_distortion_at_cbr(reports: Mapping[float, EvalReport], snr_list: Sequence[float],
                          cbr_value: float = DEFAULT_CBR, gain: complex = 1.0) -> pd.DataFrame:
    """Best quality reachable at every SNR when the CBR is fixed.

    At each SNR the budget is what an ideal code carries at the
    post-equalization SNR; among the models whose measured bpp fits, the
    one with the highest PSNR is chosen. SNRs where nothing fits get NaN
    quality.
    """
    rows = []
    for snr_db in snr_list:
        budget = bpp_from_snr(effective_snr_db(snr_db, gain), cbr_value)
        fitting = [(lam, r) for lam, r in reports.items() if r.bpp <= budget]
        if not fitting:
            logger.warning("No model fits %.4f bpp at %.1f dB", budget, snr_db)
            rows.append({"snr_db": snr_db, "budget_bpp": budget, "lambda": math.nan, "psnr_mean": math.nan,
                         "msssim_mean": math.nan, "bpp": math.nan})
            continue
        lam, best = max(fitting, key=lambda item: item[1].psnr_mean)
        rows.append({"snr_db": snr_db, "budget_bpp": budget, "lambda": lam, "psnr_mean": best.psnr_mean,
                     "msssim_mean": best.msssim_mean, "bpp": best.bpp})
    return pd.DataFrame(rows, columns=["snr_db", "budget_bpp", "lambda", "psnr_mean", "msssim_mean", "bpp"])


def cbr_stack_data(table: pd.DataFrame) -> pd.DataFrame:
    """Component CBR bar heights, one bar per (λ, SNR) row of the sweep table."""
    rows = table[table["method"] == PROPOSED]
    labels = [f"λ={lam:g}\n{snr:g} dB" for lam, snr in zip(rows["lambda"], rows["snr_db"])]
    return pd.DataFrame(rows[["cbr_S", "cbr_A", "cbr_Zm", "cbr_Zr"]].to_numpy(),
                        index=labels, columns=["S", "A", "Zm", "Zr"])


def plot_sweep(table: pd.DataFrame, fixed_cbr: pd.DataFrame, out_dir: Path) -> List[Path]:
    """SNR→PSNR, SNR→MS-SSIM and stacked CBR plots as PNG files.

    A metric with no values at all (MS-SSIM switched off) gets no plot.
    """
    out_dir = Path(out_dir)
    paths = []
    for metric, ylabel, name in (("psnr_mean", "PSNR (dB)", "snr_psnr.png"),
                                 ("msssim_mean", "MS-SSIM", "snr_msssim.png")):
        if table[metric].isna().all():
            logger.info("No %s values; skipping %s", metric, name)
            continue
        fig, ax = plt.subplots()
        for (method, lam), rows in table.groupby(["method", "lambda"], dropna=False):
            label = f"{method} λ={lam:g}" if not math.isnan(lam) else method
            ax.plot(rows["snr_db"], rows[metric], marker="o", label=label)
        if len(fixed_cbr):
            ax.plot(fixed_cbr["snr_db"], fixed_cbr[metric], marker="s", linestyle="--", color="black",
                    label="fixed CBR")
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel(ylabel)
        ax.grid(True)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / name)
        plt.close(fig)
        paths.append(out_dir / name)

    stack = cbr_stack_data(table)
    fig, ax = plt.subplots(figsize=(max(6.0, 0.8 * len(stack)), 4.5))
    bottom = [0.0] * len(stack)
    for component in stack.columns:
        ax.bar(stack.index, stack[component], bottom=bottom, label=component)
        bottom = [b + v for b, v in zip(bottom, stack[component])]
    ax.set_ylabel("CBR")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "cbr_breakdown.png")
    plt.close(fig)
    paths.append(out_dir / "cbr_breakdown.png")
    return paths


def sweep(models: Mapping[float, Optional[SebTransmissionModel]], corpus: ImageSet, snr_list: Sequence[float],
          lam_list: Sequence[float], out_dir: Optional[Path] = None, seed: int = 0,
          adapters: Iterable[BaselineAdapter] = (), cbr_value: float = DEFAULT_CBR, gain: complex = 1.0,
          msssim: bool = True) -> pd.DataFrame:
    """Evaluate every (λ, SNR) pair and write ``sweep.csv``, ``fixed_cbr.csv`` and plots.

    A λ with no model is skipped with a warning. Each model is run once;
    its bits are then priced at every SNR over a channel of gain ``gain``.
    With ``msssim`` False the MS-SSIM column is NaN and its plot is skipped.
    """
    if not snr_list:
        raise ParameterError("sweep needs at least one SNR")
    dims = _dims(corpus)
    logger.info("=" * 70)
    logger.info("🚀 Sweeping %d λ value(s) × %d SNR value(s) over %d images", len(lam_list), len(snr_list), len(corpus))
    logger.info("=" * 70)

    reports: Dict[float, EvalReport] = {}
    rows = []
    for lam in lam_list:
        model = models.get(lam)
        if model is None:
            logger.warning("⚠️ No model for λ=%g; skipping its rows", lam)
            continue
        base = evaluate(model, corpus, snr_list[0], lam, seed, gain=gain, msssim=msssim)
        reports[lam] = base
        logger.info("📊 λ=%g: PSNR %.2f dB, MS-SSIM %.4f, %.4f bpp", lam, base.psnr_mean, base.msssim_mean, base.bpp)
        rows.extend(base.at_snr(snr_db, dims).to_row() for snr_db in snr_list)
    for adapter in adapters:
        for snr_db in snr_list:
            rows.append(evaluate_baseline(adapter, corpus, snr_db, cbr_value, gain, msssim).to_row())

    table = pd.DataFrame(rows, columns=CSV_COLUMNS)
    fixed = snr_distortion_at_cbr(reports, snr_list, cbr_value, gain)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / "sweep.csv", index=False)
        fixed.to_csv(out_dir / "fixed_cbr.csv", index=False)
        if len(table):
            plot_sweep(table, fixed, out_dir)
        logger.info("💾 Sweep written to %s", out_dir)
    logger.info("✅ Sweep finished with %d rows", len(table))
    return table
