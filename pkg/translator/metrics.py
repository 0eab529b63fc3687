"""
Image metrics and per-direction evaluation.

Model outputs live in [-1, 1]; every metric compares images mapped linearly
to 0-255 without quantisation. PSNR of identical images is +inf; such pairs
are counted as exact matches and left out of the PSNR mean.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch
from skimage.metrics import structural_similarity
from tqdm import tqdm

from .exceptions import DatasetError, MetricError
from .registry import Direction, DirectionStatus, format_direction
from .sampling import translate

logger = logging.getLogger(__name__)

DATA_RANGE = 255.0
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11


def to_pixel_scale(image) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    return (np.asarray(image, dtype=np.float64) + 1.0) * 127.5


def _pair(a, b, what: str):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = DATA_RANGE) -> float:
    a, b = _pair(a, b, 'psnr')
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 20 * math.log10(data_range) - 10 * math.log10(mse)


def rmse(a, b) -> float:
    a, b = _pair(a, b, 'rmse')
    return float(np.sqrt(np.mean((a - b) ** 2)))


def ssim(a, b, data_range: float = DATA_RANGE) -> float:
    """Gaussian-windowed SSIM (11x11, sigma 1.5); (C, H, W) inputs are averaged over channels."""
    a, b = _pair(a, b, 'ssim')
    if a.ndim not in (2, 3):
        raise MetricError(f"ssim: expected (H, W) or (C, H, W), got shape {a.shape}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise MetricError(f"ssim: images of {a.shape[-2]}x{a.shape[-1]} are smaller than the {SSIM_WINDOW}px window")
    return float(structural_similarity(
        a, b,
        data_range=data_range,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
        channel_axis=0 if a.ndim == 3 else None,
    ))


@dataclass(frozen=True)
class MetricsReport:
    direction: str
    status: str
    n_pairs: int
    exact_matches: int
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    rmse_mean: float
    rmse_std: float
    label: str = 'model'

    def __post_init__(self):
        if self.n_pairs < 1:
            raise MetricError("A report needs at least one pair")

    def as_dict(self) -> Dict:
        return asdict(self)


def score_pairs(predictions: Sequence, targets: Sequence, direction: Direction,
                status: DirectionStatus = DirectionStatus.TRAINED, label: str = 'model') -> MetricsReport:
    """Aggregate metrics over aligned (prediction, target) images given in [-1, 1]."""
    if len(predictions) != len(targets):
        raise MetricError(f"{len(predictions)} predictions for {len(targets)} targets")
    if len(targets) == 0:
        raise DatasetError(f"No test pairs for {format_direction(direction)}")
    psnrs, ssims, rmses = [], [], []
    for prediction, target in zip(predictions, targets):
        a, b = to_pixel_scale(prediction), to_pixel_scale(target)
        psnrs.append(psnr(a, b))
        ssims.append(ssim(a, b))
        rmses.append(rmse(a, b))
    finite = [v for v in psnrs if math.isfinite(v)]
    return MetricsReport(
        direction=format_direction(direction),
        status=DirectionStatus(status).value,
        n_pairs=len(targets),
        exact_matches=len(psnrs) - len(finite),
        psnr_mean=float(np.mean(finite)) if finite else math.inf,
        psnr_std=float(np.std(finite)) if finite else 0.0,
        ssim_mean=float(np.mean(ssims)),
        ssim_std=float(np.std(ssims)),
        rmse_mean=float(np.mean(rmses)),
        rmse_std=float(np.std(rmses)),
        label=label,
    )


def evaluate_direction(model, dataset, direction: Direction, sample_config,
                       trained: Iterable[Direction] = (), limit: Optional[int] = None,
                       workers: int = 1, progress: bool = False) -> MetricsReport:
    """
    Translate every test source of ``direction`` and score it against its target.

    Pair ``i`` is sampled with seed ``sample_config.seed + i``, so results do
    not depend on ``workers``.
    """
    resolved = model.registry.resolve_direction(direction[0], direction[1], trained)
    pairs = list(dataset.iter_pairs(direction, limit=limit))
    if not pairs:
        raise DatasetError(f"{dataset.root}: no test pairs for {format_direction(direction)}")

    def run(index):
        source = torch.from_numpy(pairs[index][0])
        config = replace(sample_config, seed=sample_config.seed + index)
        return translate(source, direction, model, config).cpu().numpy()

    indices = range(len(pairs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            predictions = list(tqdm(pool.map(run, indices), total=len(pairs), desc=str(resolved), disable=not progress))
    else:
        predictions = [run(i) for i in tqdm(indices, desc=str(resolved), disable=not progress)]
    report = score_pairs(predictions, [target for _, target in pairs], direction, resolved.status)
    logger.info(f"{resolved}: PSNR {report.psnr_mean:.2f} SSIM {report.ssim_mean:.3f} RMSE {report.rmse_mean:.2f}")
    return report


def mean_image_baseline(train_targets: Sequence, test_targets: Sequence, direction: Direction,
                        status: DirectionStatus = DirectionStatus.TRAINED) -> MetricsReport:
    """Predict the per-pixel mean of the training targets for every test pair."""
    if not len(train_targets):
        raise DatasetError(f"No training targets for {format_direction(direction)}")
    mean = np.mean(np.stack([np.asarray(t, dtype=np.float64) for t in train_targets]), axis=0)
    return score_pairs([mean] * len(test_targets), list(test_targets), direction, status, label='baseline:mean')


def noise_baseline(test_targets: Sequence, direction: Direction, seed: int = 0,
                   status: DirectionStatus = DirectionStatus.TRAINED) -> MetricsReport:
    """Predict uniform noise on [-1, 1]."""
    rng = np.random.default_rng(seed)
    predictions = [rng.uniform(-1.0, 1.0, size=np.shape(t)) for t in test_targets]
    return score_pairs(predictions, list(test_targets), direction, status, label='baseline:noise')


def merge_reports(groups: Iterable[Iterable[MetricsReport]]) -> List[MetricsReport]:
    """Concatenate report lists; a later report replaces an earlier one with the same direction and label."""
    merged: Dict[tuple, MetricsReport] = {}
    for reports in groups:
        for report in reports:
            merged.pop((report.direction, report.label), None)
            merged[(report.direction, report.label)] = report
    return list(merged.values())


def _number(value: float, digits: int) -> str:
    return 'inf' if math.isinf(value) else f'{value:.{digits}f}'


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Aligned text table: one row per direction with PSNR, SSIM and RMSE columns."""
    header = ('Direction', 'Label', 'Status', 'N', 'PSNR', 'SSIM', 'RMSE')
    rows = [header]
    for r in reports:
        rows.append((
            r.direction, r.label, r.status, str(r.n_pairs),
            f'{_number(r.psnr_mean, 2)} ± {_number(r.psnr_std, 2)}',
            f'{r.ssim_mean:.4f} ± {r.ssim_std:.4f}',
            f'{r.rmse_mean:.2f} ± {r.rmse_std:.2f}',
        ))
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ['  '.join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, '  '.join('-' * width for width in widths))
    return '\n'.join(lines) + '\n'
