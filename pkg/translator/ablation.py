"""
Ablation protocol.

Seven training settings, all scored on SAR:RGB:

    1  SAR:RGB, adapter skipped at inference
    2  SAR:RGB
    3  SAR:RGB + RGB:SAR from scratch, 2S steps
    4  SAR:RGB + RGB:SAR continued from 2 for S steps
    5  SAR to every SAR partner, continued from 2
    6  every RGB partner to RGB, continued from 2
    7  every seen direction, continued from 2

Settings 1 and 2 share one training run. The calibration loss never reaches
the backbone, so training with and without the adapter term moves the
backbone identically and only the adapter differs.
"""

import copy
import logging
from dataclasses import dataclass, replace
from typing import List, Optional

from .checkpoint import Checkpoint
from .metrics import MetricsReport, evaluate_direction
from .registry import Direction, ModalityRegistry, protocol_directions, protocol_pairs
from .sampling import SampleConfig
from .synth import PairedDataset
from .training import StepReportWriter, TrainConfig, extend_directions, train_from_scratch

logger = logging.getLogger(__name__)

PROBE: Direction = ('SAR', 'RGB')


@dataclass(frozen=True)
class AblationRow:
    setting: int
    description: str
    n_directions: int
    steps: int
    report: MetricsReport


@dataclass(frozen=True)
class GateResult:
    name: str
    description: str
    hard: bool
    delta: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.delta >= self.threshold


@dataclass(frozen=True)
class AblationResult:
    rows: List[AblationRow]
    gates: List[GateResult]

    @property
    def passed(self) -> bool:
        return all(gate.passed for gate in self.gates if gate.hard)

    def psnr(self, setting: int) -> float:
        return next(row.report.psnr_mean for row in self.rows if row.setting == setting)


def partner_directions(registry: ModalityRegistry, protocol: str, src: Optional[str] = None,
                       tgt: Optional[str] = None) -> List[Direction]:
    """Seen directions out of ``src`` or into ``tgt`` under ``protocol``."""
    found = []
    for a, b in protocol_pairs(protocol, registry):
        for x, y in ((a, b), (b, a)):
            if (src is None or x == src) and (tgt is None or y == tgt):
                found.append((x, y))
    return found


def run_ablation(
    base: Checkpoint,
    train_set: PairedDataset,
    test_set: PairedDataset,
    config: TrainConfig,
    sample_config: SampleConfig,
    protocol: str = 'seven-pair',
    limit: Optional[int] = None,
    writer: Optional[StepReportWriter] = None,
    progress: bool = False,
) -> AblationResult:
    """``base`` must hold trained codecs and scale factors; it is never modified."""
    registry = base.registry
    steps = config.steps
    rows: List[AblationRow] = []

    def score(checkpoint: Checkpoint, setting: int, description: str, total_steps: int, use_adapter: bool = True):
        report = evaluate_direction(
            checkpoint.model, test_set, PROBE, replace(sample_config, use_adapter=use_adapter),
            trained=checkpoint.trained_directions, limit=limit, progress=progress,
        )
        row = AblationRow(setting, description, len(checkpoint.trained_directions), total_steps, report)
        rows.append(row)
        logger.info(f"Setting {setting} ({description}): PSNR {report.psnr_mean:.2f}")

    single = copy.deepcopy(base)
    train_from_scratch(single, [PROBE], train_set, config, writer).run(progress=progress)
    score(single, 1, 'SAR:RGB without adapter', steps, use_adapter=False)
    score(single, 2, 'SAR:RGB with adapter', steps)

    both = [PROBE, PROBE[::-1]]
    scratch = copy.deepcopy(base)
    train_from_scratch(scratch, both, train_set, config, writer).run(2 * steps, progress=progress)
    score(scratch, 3, 'SAR<->RGB from scratch', 2 * steps)

    growth = [
        (4, 'SAR<->RGB incremental', both),
        (5, 'SAR to all partners incremental', partner_directions(registry, protocol, src='SAR')),
        (6, 'all partners to RGB incremental', partner_directions(registry, protocol, tgt='RGB')),
        (7, 'all seen directions incremental', sorted(protocol_directions(protocol, registry))),
    ]
    for setting, description, directions in growth:
        checkpoint = copy.deepcopy(single)
        extend_directions(checkpoint, directions, train_set, config, writer).run(progress=progress)
        score(checkpoint, setting, description, 2 * steps)

    result = AblationResult(rows, [])
    growth_delta = min(result.psnr(s) for s in (5, 6, 7)) - result.psnr(2)
    gates = [
        GateResult('a', 'adapter vs no adapter', True, result.psnr(2) - result.psnr(1), -0.1),
        GateResult('b', 'incremental vs scratch', True, result.psnr(4) - result.psnr(3), -0.5),
        GateResult('c', 'more directions vs single', False, growth_delta, -1.0),
    ]
    return AblationResult(rows, gates)


def format_ablation(result: AblationResult) -> str:
    header = ('Setting', 'Description', '#TDs', 'Steps', 'PSNR', 'SSIM', 'RMSE')
    table = [header]
    for row in result.rows:
        r = row.report
        table.append((str(row.setting), row.description, str(row.n_directions), str(row.steps),
                      f'{r.psnr_mean:.2f}', f'{r.ssim_mean:.4f}', f'{r.rmse_mean:.2f}'))
    widths = [max(len(line[i]) for line in table) for i in range(len(header))]
    lines = ['  '.join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in table]
    lines.insert(1, '  '.join('-' * w for w in widths))
    for gate in result.gates:
        verdict = 'PASS' if gate.passed else 'FAIL'
        kind = 'hard' if gate.hard else 'soft'
        lines.append(f"gate ({gate.name}) {gate.description}: {gate.delta:+.2f} dB, "
                     f"needs >= {gate.threshold:+.1f} [{kind}] {verdict}")
    return '\n'.join(lines) + '\n'
