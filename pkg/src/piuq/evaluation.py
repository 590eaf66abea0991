"""Image-quality metrics, input perturbations and the evaluation protocol.

Metrics are computed on the raw ``[0, 255]`` scale.
"""

from __future__ import annotations

import csv
import enum
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import signal

from .data import to_model_range, to_raw_range
from .losses import Mode

DATA_RANGE = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
PSNR_CAP = 100.0


class ScenarioKind(str, enum.Enum):
    GN = "GN"
    IP = "IP"


@dataclass(frozen=True)
class Scenario:
    """``GN``: Gaussian noise with std ``level * 255``; ``IP``: a ``level`` fraction of entries replaced."""

    kind: ScenarioKind
    level: float
    seed: int = 0

    @property
    def name(self) -> str:
        return f"{self.kind.value}{round(self.level * 100):d}"

    @classmethod
    def parse(cls, name: str, seed: int = 0) -> "Scenario":
        m = re.fullmatch(r"(GN|IP)(\d+)", name.strip().upper())
        if not m:
            raise ValueError(f"unknown scenario {name!r} (expected e.g. GN5 or IP2)")
        return cls(ScenarioKind(m.group(1)), int(m.group(2)) / 100.0, seed)


DEFAULT_SCENARIOS = ("GN0", "GN5", "GN10", "GN20", "IP2", "IP5", "IP10")


def default_scenarios(seed: int = 0) -> list[Scenario]:
    return [Scenario.parse(n, seed) for n in DEFAULT_SCENARIOS]


def perturb(raw: np.ndarray, scenario: Scenario, rng: np.random.Generator | None = None) -> np.ndarray:
    """Perturb a raw-range array; ``rng`` defaults to one seeded from the scenario."""
    if rng is None:
        rng = np.random.default_rng(scenario.seed)
    raw = np.asarray(raw, dtype=np.float64)
    kind = ScenarioKind(scenario.kind)
    if kind is ScenarioKind.GN:
        if scenario.level == 0:
            return raw.copy()
        noisy = raw + rng.normal(0.0, scenario.level * DATA_RANGE, size=raw.shape)
        return np.clip(noisy, 0.0, DATA_RANGE)
    out = raw.copy()
    flat = out.reshape(-1)
    k = int(math.floor(scenario.level * flat.size + 1e-9))
    idx = rng.choice(flat.size, size=k, replace=False)
    flat[idx] = rng.uniform(0.0, DATA_RANGE, size=k)
    return out


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_2d(a, b, window):
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    filt = lambda z: signal.correlate2d(z, window, mode="valid")
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(pred, gt) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5) averaged over valid window positions and channels."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[:, :, None], gt[:, :, None]
    window = gaussian_window()
    return float(np.mean([_ssim_2d(pred[:, :, c], gt[:, :, c], window) for c in range(pred.shape[2])]))


def psnr(pred, gt) -> float:
    """PSNR in dB; ``inf`` for identical images."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(DATA_RANGE ** 2 / mse)


def pearson(a, b) -> tuple[float, bool]:
    """Pearson correlation and a degeneracy flag (zero variance reports 0)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0 or not math.isfinite(denom):
        return 0.0, True
    return float(np.clip(float(da @ db) / denom, -1.0, 1.0)), False


@torch.no_grad()
def predict(generator, raw_inputs: np.ndarray, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Raw-range ``(n, d, d, c)`` inputs -> raw-range predictions and model-unit scale maps."""
    generator.eval()
    images, scales = [], []
    for start in range(0, len(raw_inputs), batch_size):
        chunk = to_model_range(raw_inputs[start:start + batch_size]).transpose(0, 3, 1, 2)
        out = generator(torch.as_tensor(chunk, dtype=torch.float32))
        images.append(out.image.double().numpy().transpose(0, 2, 3, 1))
        scales.append(out.scale.double().numpy().transpose(0, 2, 3, 1))
    return to_raw_range(np.concatenate(images)), np.concatenate(scales)


def _raw(img):
    return img.pixels if img.value_range.value == "raw_0_255" else to_raw_range(img.pixels)


@dataclass
class ScenarioRow:
    scenario: str
    ssim_mean: float
    ssim_std: float
    psnr_mean: float
    psnr_std: float
    ssim_values: list = field(default_factory=list, repr=False)
    psnr_values: list = field(default_factory=list, repr=False)
    mean_scales: list | None = field(default=None, repr=False)


@dataclass
class UncertaintyStats:
    image_ids: list
    mean_abs_residual: list
    mean_scale: list
    pcc: float
    degenerate: bool

    def write_scatter(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "mean_abs_residual", "mean_scale"])
            for row in zip(self.image_ids, self.mean_abs_residual, self.mean_scale):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


@dataclass
class EvalReport:
    rows: list[ScenarioRow]
    sample_count: int
    mode: Mode
    uncertainty: UncertaintyStats | None = None
    config: dict = field(default_factory=dict)

    def row(self, name: str) -> ScenarioRow:
        for r in self.rows:
            if r.scenario == name:
                return r
        raise KeyError(name)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario", "ssim_mean", "ssim_std", "psnr_mean", "psnr_std"])
            for r in self.rows:
                w.writerow([r.scenario, f"{r.ssim_mean:.6f}", f"{r.ssim_std:.6f}",
                            f"{r.psnr_mean:.6f}", f"{r.psnr_std:.6f}"])

    def to_text(self) -> str:
        lines = [f"mode: {Mode(self.mode).value}", f"samples: {self.sample_count}"]
        for k, v in sorted(self.config.items()):
            lines.append(f"config.{k}: {v}")
        lines.append(f"{'scenario':<10}{'SSIM':>20}{'PSNR [dB]':>22}")
        for r in self.rows:
            lines.append(f"{r.scenario:<10}{r.ssim_mean:>11.4f} +- {r.ssim_std:<6.4f}"
                         f"{r.psnr_mean:>13.3f} +- {r.psnr_std:<6.3f}")
        if self.uncertainty is not None:
            u = self.uncertainty
            flag = " (degenerate: zero variance)" if u.degenerate else ""
            lines.append(f"uncertainty PCC over {len(u.image_ids)} images: {u.pcc:.4f}{flag}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem="eval_report"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.txt").write_text(self.to_text())
        self.write_csv(out_dir / f"{stem}.csv")
        if self.uncertainty is not None:
            self.uncertainty.write_scatter(out_dir / "uncertainty_scatter.csv")


def evaluate(generator, pairs, scenarios=None, mode=Mode.UAPI, seed: int = 0, batch_size: int = 16,
             uncertainty_samples: int = 512) -> EvalReport:
    """SSIM/PSNR of the generator's image head against ground truth under each perturbation.

    Each scenario perturbs the inputs with its own stream derived from
    ``(seed, scenario index)``; aggregation runs in pair order.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluation needs at least one (input, ground truth) pair")
    if any(p.target is None for p in pairs):
        raise ValueError("missing ground truth in evaluation pairs")
    mode = Mode(mode)
    scenarios = default_scenarios(seed) if scenarios is None else list(scenarios)
    raw_in = np.stack([_raw(p.input) for p in pairs])
    raw_gt = np.stack([_raw(p.target) for p in pairs])
    rows = []
    for k, sc in enumerate(scenarios):
        rng = np.random.default_rng([seed, k, sc.seed])
        perturbed = np.stack([perturb(img, sc, rng) for img in raw_in])
        pred, scale = predict(generator, perturbed, batch_size)
        s = [ssim(a, b) for a, b in zip(pred, raw_gt)]
        q = [min(psnr(a, b), PSNR_CAP) for a, b in zip(pred, raw_gt)]
        rows.append(ScenarioRow(sc.name, float(np.mean(s)), float(np.std(s)), float(np.mean(q)),
                                float(np.std(q)), s, q,
                                scale.reshape(len(scale), -1).mean(axis=1).tolist() if mode is Mode.UAPI else None))
    stats = None
    if mode is Mode.UAPI:
        stats = uncertainty_correlation(generator, pairs, mode, uncertainty_samples, seed, batch_size)
    cfg = {"scenarios": ",".join(sc.name for sc in scenarios), "seed": seed}
    return EvalReport(rows, len(pairs), mode, stats, cfg)


def uncertainty_correlation(generator, pairs, mode=Mode.UAPI, sample_count: int = 512, seed: int = 0,
                            batch_size: int = 16) -> UncertaintyStats:
    """Per-image mean absolute residual (raw scale) versus mean predicted scale, and their PCC."""
    if Mode(mode) is not Mode.UAPI:
        raise ValueError("uncertainty correlation needs a UAPI model; PI models have no trained scale head")
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no evaluation pairs")
    n = min(sample_count, len(pairs))
    idx = np.sort(np.random.default_rng(seed).choice(len(pairs), size=n, replace=False))
    chosen = [pairs[i] for i in idx]
    pred, scale = predict(generator, np.stack([_raw(p.input) for p in chosen]), batch_size)
    gt = np.stack([_raw(p.target) for p in chosen])
    resid = np.abs(pred - gt).reshape(n, -1).mean(axis=1)
    mean_scale = scale.reshape(n, -1).mean(axis=1)
    pcc, degenerate = pearson(resid, mean_scale)
    return UncertaintyStats([p.input.source_id for p in chosen], resid.tolist(), mean_scale.tolist(),
                            pcc, degenerate)
