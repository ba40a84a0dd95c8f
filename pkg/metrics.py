"""
Image and depth metrics, held-out evaluation of checkpoints, and the
modality ablation (RGB / RGB+depth / RGB+depth+event).
"""

import math
import os
import time
import warnings
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from errors import (ConfigurationError, DimensionMismatchError, EmptySupervisionWarning, EmptyValidityError,
                    ResolutionMismatchError)

LPIPS_UNAVAILABLE = 'n/a (out of scope: pretrained network dependency)'
REPORT_COLUMNS = ['split', 'view', 'timestamp', 'psnr', 'exact', 'drms', 'lpips', 'render_seconds']


def psnr(gt, pred):
    """PSNR in dB for images in [0, 1]; identical images give math.inf ("exact")"""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise DimensionMismatchError(f"psnr: shapes differ {gt.shape} vs {pred.shape}")
    mse = float(np.mean((gt - pred) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def drms(gt, pred, valid):
    """Root mean square depth error over valid pixels, in world units"""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if gt.shape != pred.shape or valid.shape != gt.shape:
        raise DimensionMismatchError(f"drms: shapes differ {gt.shape} / {pred.shape} / {valid.shape}")
    n = int(valid.sum())
    if n == 0:
        raise EmptyValidityError("drms: no valid depth pixels")
    diff = (gt - pred)[valid]
    return float(np.sqrt(np.sum(diff * diff) / n))


@dataclass
class EvalReport:
    table: pd.DataFrame

    @property
    def mean_psnr(self):
        values = self.table['psnr'].to_numpy(dtype=np.float64)
        if len(values) == 0:
            return math.nan
        finite = values[np.isfinite(values)]
        return float(finite.mean()) if len(finite) else math.inf

    @property
    def mean_drms(self):
        values = self.table['drms'].dropna().to_numpy(dtype=np.float64)
        return float(values.mean()) if len(values) else math.nan

    def __len__(self):
        return len(self.table)

    def summary(self):
        if self.table.empty:
            return "No views evaluated (empty split)."
        exact = int(self.table['exact'].sum())
        lines = [
            f"Views evaluated: {len(self.table)}",
            f"Mean PSNR: {self.mean_psnr:.3f} dB" + (f" ({exact} exact)" if exact else ''),
            f"Mean DRMS: {self.mean_drms:.5f} world units",
            f"LPIPS: {LPIPS_UNAVAILABLE}",
            f"Mean render time: {self.table['render_seconds'].mean() * 1000:.1f} ms",
        ]
        return '\n'.join(lines)

    def save(self, out_dir, name='eval'):
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, f'{name}_report.csv')
        self.table.to_csv(csv_path, index=False)
        with open(os.path.join(out_dir, f'{name}_summary.txt'), 'w', encoding='utf-8') as f:
            f.write(self.summary() + '\n')
        return csv_path


def _as_state(checkpoint):
    if isinstance(checkpoint, (str, os.PathLike)):
        from dataset_io import load_checkpoint
        return load_checkpoint(checkpoint)
    return checkpoint


def evaluate(checkpoint, dataset, split='eval', out_dir=None, stride=1, progress_callback=None):
    """
    Render every (view, timestamp) of a split and score it.

    Args:
        checkpoint: checkpoint path or TrainState
        dataset: SensorDataset
        split: which frames to score ('eval' holds unseen views at unseen timestamps)
        out_dir: if given, write <split>_report.csv and <split>_summary.txt there
        stride: score every stride-th frame of the split

    Returns:
        EvalReport
    """
    from trainer import render_state

    state = _as_state(checkpoint)
    if state.resolution is not None and tuple(state.resolution) != tuple(dataset.resolution):
        raise ResolutionMismatchError(
            f"checkpoint was trained at {state.resolution[0]}x{state.resolution[1]}, "
            f"dataset is {dataset.resolution[0]}x{dataset.resolution[1]}")

    frames = dataset.split(split)[::max(int(stride), 1)]
    if not frames:
        warnings.warn(f"split '{split}' has no frames; report is empty", EmptySupervisionWarning)
        report = EvalReport(pd.DataFrame(columns=REPORT_COLUMNS))
        if out_dir:
            report.save(out_dir, split)
        return report

    if progress_callback:
        progress_callback(f"Evaluating {len(frames)} '{split}' views...")

    rows = []
    for frame in frames:
        start = time.perf_counter()
        out = render_state(state, frame.camera, frame.timestamp)
        elapsed = time.perf_counter() - start
        value = psnr(frame.image, out.color)
        depth_error = math.nan
        if frame.depth is not None and frame.depth_valid.any():
            depth_error = drms(frame.depth, out.depth, frame.depth_valid)
        rows.append({
            'split': split,
            'view': frame.view,
            'timestamp': frame.timestamp,
            'psnr': value,
            'exact': math.isinf(value),
            'drms': depth_error,
            'lpips': LPIPS_UNAVAILABLE,
            'render_seconds': elapsed,
        })

    report = EvalReport(pd.DataFrame(rows, columns=REPORT_COLUMNS))
    if out_dir:
        report.save(out_dir, split)
    return report


ABLATION_VARIANTS = ('rgb', 'rgb+depth', 'rgb+depth+event')


def variant_config(config, variant, seed):
    """Config for one modality subset; RGB-only also skips depth-based initialization"""
    if variant == 'rgb':
        return replace(config, lambda2=0.0, lambda4=0.0, init_from_depth=False, seed=seed)
    if variant == 'rgb+depth':
        return replace(config, lambda2=0.0, seed=seed)
    if variant == 'rgb+depth+event':
        return replace(config, seed=seed)
    raise ConfigurationError(f"unknown ablation variant '{variant}' (choose from {', '.join(ABLATION_VARIANTS)})")


def fusion_ablation(dataset, config, out_dir, seeds=(0, 1, 2), variants=ABLATION_VARIANTS,
                    progress_callback=None):
    """
    Train each modality subset for each seed and score the held-out split.

    Returns:
        (per-run DataFrame, per-variant mean DataFrame); both are also written
        to out_dir as ablation_runs.csv and ablation_summary.csv
    """
    from trainer import train

    print(f"\n{'='*60}")
    print(f"🧪 Fusion ablation: {', '.join(variants)} x {len(seeds)} seed(s)")
    print(f"{'='*60}\n")

    rows = []
    for variant in variants:
        for seed in seeds:
            if progress_callback:
                progress_callback(f"Training {variant} (seed {seed})...")
            run_dir = os.path.join(out_dir, variant.replace('+', '_'), f'seed_{seed}')
            checkpoint = train(dataset, variant_config(config, variant, seed), run_dir)
            report = evaluate(checkpoint, dataset, 'eval', out_dir=run_dir)
            rows.append({'variant': variant, 'seed': seed, 'psnr': report.mean_psnr, 'drms': report.mean_drms})
            print(f"📊 {variant} seed {seed}: PSNR {report.mean_psnr:.3f} dB, DRMS {report.mean_drms:.5f}")

    runs = pd.DataFrame(rows, columns=['variant', 'seed', 'psnr', 'drms'])
    summary = runs.groupby('variant', sort=False)[['psnr', 'drms']].mean().reset_index()
    os.makedirs(out_dir, exist_ok=True)
    runs.to_csv(os.path.join(out_dir, 'ablation_runs.csv'), index=False)
    summary.to_csv(os.path.join(out_dir, 'ablation_summary.csv'), index=False)

    print(f"\n✅ Ablation complete")
    print(summary.to_string(index=False))
    print(f"{'='*60}\n")
    return runs, summary
