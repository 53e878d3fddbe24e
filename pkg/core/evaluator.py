"""Metrics and comparison experiments.

All evaluation goes through the real bit path (emit, optional corruption,
decode) with pinned generators, so a zero bit-error rate reproduces the
clean result exactly.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from config.settings import get_config
from core.bitstream import BitMode, flip_bit_array
from core.channel_model import ChannelDataset, DatasetConfig, dataset_planes, generate_dataset, normalize_dataset
from core.exceptions import ConfigError, InvalidArgumentError
from core.feedback_models import (Encoder, FeedbackBatch, FeedbackModel, ModelConfig, Reconstruction, Variant,
                                  build_model, combine_complex)
from core.trainer import TrainConfig, fine_tune, train
from utils.file_parser import write_csv
from utils.rng import STREAM_CORRUPT, STREAM_EVAL_BITS, STREAM_INIT, keyed_rng
from utils.validators import sanitize_filename

logger = logging.getLogger(__name__)

NMSE_FLOOR_DB = -300.0
CSV_COLUMNS = ['experiment', 'model', 'bpd', 'nmse_db', 'phase_nmse_db', 'ber', 'params', 'seed', 'seconds']


@dataclass
class MetricsReport:
    experiment: str
    model: str
    bpd: float
    nmse_db: float
    phase_nmse_db: float = math.nan
    ber: float = math.nan
    params: int = 0
    seed: int = 0
    seconds: float = 0.0


@dataclass
class AttentionProfile:
    """Normalized per-input-neuron weight mass of an encoder's first FC layer"""
    values: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'index': np.arange(self.values.size), 'w_normalized': self.values})

    def save_csv(self, path: Path) -> Path:
        return write_csv(self.to_frame(), path)


@dataclass
class EvaluationResult:
    reconstruction: Reconstruction
    nmse_db: float
    phase_nmse_db: float = math.nan
    nmse_linear: float = math.nan


# Metrics
def to_db(linear: float) -> float:
    if not linear > 0:
        return NMSE_FLOOR_DB if linear == 0 else math.nan
    return max(10.0 * math.log10(linear), NMSE_FLOOR_DB)


def _per_sample(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return x.reshape(x.shape[0], -1) if x.ndim > 1 else x.reshape(1, -1)


def nmse_linear(H: np.ndarray, H_hat: np.ndarray) -> float:
    """Mean over samples (axis 0) of ||H_hat - H||^2 / ||H||^2; zero-norm samples are excluded"""
    H, H_hat = _per_sample(H), _per_sample(H_hat)
    if H.shape != H_hat.shape:
        raise InvalidArgumentError(f"nmse shape mismatch: {H.shape} vs {H_hat.shape}")
    power = np.sum(np.abs(H) ** 2, axis=1)
    error = np.sum(np.abs(H_hat - H) ** 2, axis=1)
    keep = power > 0
    excluded = int(np.count_nonzero(~keep))
    if excluded:
        logger.warning(f"nmse: {excluded} zero-norm samples excluded")
    if not keep.any():
        return math.nan
    return float(np.mean(error[keep] / power[keep]))


def nmse(H: np.ndarray, H_hat: np.ndarray) -> float:
    """NMSE in dB, floored at -300 dB"""
    return to_db(nmse_linear(H, H_hat))


def phase_nmse_linear(phase: np.ndarray, phase_hat: np.ndarray, magnitude: np.ndarray, H: np.ndarray) -> float:
    phase, phase_hat = _per_sample(phase), _per_sample(phase_hat)
    magnitude, H = _per_sample(magnitude), _per_sample(H)
    if not phase.shape == phase_hat.shape == magnitude.shape == H.shape:
        raise InvalidArgumentError("phase_nmse inputs must share one shape")
    power = np.sum(np.abs(H) ** 2, axis=1)
    error = np.sum(((phase - phase_hat) * magnitude) ** 2, axis=1)
    keep = power > 0
    if not keep.all():
        logger.warning(f"phase_nmse: {int(np.count_nonzero(~keep))} zero-norm samples excluded")
    if not keep.any():
        return math.nan
    return float(np.mean(error[keep] / power[keep]))


def phase_nmse(phase: np.ndarray, phase_hat: np.ndarray, magnitude: np.ndarray, H: np.ndarray) -> float:
    """Magnitude-weighted phase error over ||H||^2, in dB; ``magnitude`` is |H| unnormalized"""
    return to_db(phase_nmse_linear(phase, phase_hat, magnitude, H))


def param_count(model) -> int:
    """Trainable parameter elements; batch-norm running statistics are buffers and not counted"""
    return model.param_count()


def bpd_of(model: FeedbackModel) -> float:
    return model.feedback_bits / model.n_dims


def weight_attention(encoder: Encoder) -> AttentionProfile:
    """Sum of |w_ij| over the output axis of the first FC layer, scaled to max 1"""
    weight = np.abs(encoder.dense_layers()[0].weight.data.astype(np.float64))
    mass = weight.sum(axis=1)
    peak = mass.max()
    if peak <= 0:
        logger.warning("weight_attention: first layer is all zeros")
        return AttentionProfile(values=np.zeros_like(mass))
    return AttentionProfile(values=mass / peak)


def attention_distance(a: AttentionProfile, b: AttentionProfile) -> float:
    """L1 distance between the two profiles after normalizing each to unit sum"""
    x, y = a.values / a.values.sum(), b.values / b.values.sum()
    return float(np.abs(x - y).sum())


# Evaluation through the bit path
def _corruption_key(ber: float) -> int:
    return int(round(ber * 1e9))


def evaluate_batch(model: FeedbackModel, batch: FeedbackBatch, angular: np.ndarray, mag_scale: float,
                   ber: float = 0.0, corruption_seed: int = 0, eval_seed: int = 0) -> EvaluationResult:
    bits = model.emit_bits(batch, keyed_rng(eval_seed, STREAM_EVAL_BITS))
    if ber > 0:
        bits = flip_bit_array(bits, ber, keyed_rng(eval_seed, STREAM_CORRUPT, corruption_seed, _corruption_key(ber)))
    recon = model.decode_bits(bits)
    users = slice(0, model.n_users)
    if recon.phase is None:
        linear = nmse_linear(batch.magnitude[:, users], recon.magnitude)
        return EvaluationResult(recon, to_db(linear), nmse_linear=linear)

    magnitude = batch.magnitude[:, users]
    H = angular[:, users]
    phase_db = phase_nmse(batch.phase[:, users], recon.phase, magnitude * mag_scale, H)
    linear = nmse_linear(H, combine_complex(magnitude, recon.phase, mag_scale))
    return EvaluationResult(recon, to_db(linear), phase_db, linear)


def evaluate_model(model: FeedbackModel, dataset: ChannelDataset, split: str = "test",
                   ber: float = 0.0, corruption_seed: int = 0, eval_seed: int = 0) -> EvaluationResult:
    """Reconstruct a split from (optionally corrupted) feedback bits and score it"""
    magnitude, phase, angular = dataset_planes(dataset, split)
    if magnitude.shape[0] == 0:
        raise InvalidArgumentError(f"{split} split is empty")
    return evaluate_batch(model, FeedbackBatch(magnitude, phase), angular, dataset.mag_scale,
                          ber, corruption_seed, eval_seed)


def ber_sweep(model: FeedbackModel, dataset: ChannelDataset, ber_list: Sequence[float],
              n_seeds: int = 10, experiment: str = "ber", model_tag: str = "model",
              seed: int = 0, split: str = "test") -> List[MetricsReport]:
    """One report per BER: linear NMSE averaged over ``n_seeds`` corruption draws"""
    if n_seeds < 1:
        raise InvalidArgumentError(f"n_seeds must be >= 1, got {n_seeds}")
    magnitude, phase, angular = dataset_planes(dataset, split)
    batch = FeedbackBatch(magnitude, phase)
    reports = []
    for ber in ber_list:
        started = time.perf_counter()
        results = [evaluate_batch(model, batch, angular, dataset.mag_scale, ber, s, seed) for s in range(n_seeds)]
        mean_linear = float(np.mean([r.nmse_linear for r in results]))
        phase_values = [r.phase_nmse_db for r in results if not math.isnan(r.phase_nmse_db)]
        reports.append(MetricsReport(experiment=experiment, model=model_tag, bpd=bpd_of(model),
                                     nmse_db=to_db(mean_linear),
                                     phase_nmse_db=float(np.mean(phase_values)) if phase_values else math.nan,
                                     ber=float(ber), params=param_count(model), seed=seed,
                                     seconds=time.perf_counter() - started))
        logger.info(f"{model_tag} ber={ber:g}: NMSE {reports[-1].nmse_db:.2f} dB")
    return reports


# Bit allocation between magnitude and phase
ModelFamily = Callable[[int], FeedbackModel]


def default_splits(total_bits: int, bit_mode: BitMode, bits_per_value: int) -> List[Tuple[int, int]]:
    step = bits_per_value if bit_mode is BitMode.QUANTIZE else max(1, total_bits // 4)
    return [(m, total_bits - m) for m in range(0, total_bits + 1, step)]


def allocate_bits(total_bits: int, mag_model_family: ModelFamily, phase_model_family: ModelFamily,
                  dataset: ChannelDataset, splits: Sequence[Tuple[int, int]],
                  split: str = "test", eval_seed: int = 0) -> Tuple[Tuple[int, int], pd.DataFrame]:
    """Exhaustive search over (mag_bits, phase_bits) splits of ``total_bits``.

    Each family maps a bit count to a trained single-user model. Zero
    magnitude bits fall back to the mean training magnitude; zero phase
    bits reconstruct with phase 0.

    Returns:
        The split with minimum complex NMSE and the full table
    """
    if not splits:
        raise InvalidArgumentError("no candidate bit splits")
    for mag_bits, phase_bits in splits:
        if mag_bits + phase_bits != total_bits or mag_bits < 0 or phase_bits < 0:
            raise InvalidArgumentError(f"split {mag_bits}:{phase_bits} does not sum to {total_bits}")

    magnitude, phase, angular = dataset_planes(dataset, split)
    batch = FeedbackBatch(magnitude[:, :1], phase[:, :1])
    H = angular[:, 0]
    train_magnitude, _, _ = dataset_planes(dataset, "train")
    mean_magnitude = train_magnitude[:, 0].mean(axis=0)

    rows = []
    for mag_bits, phase_bits in splits:
        if mag_bits:
            mag_model = mag_model_family(mag_bits)
            mag_hat = mag_model.decode_bits(mag_model.emit_bits(batch, keyed_rng(eval_seed, STREAM_EVAL_BITS, 0)))
            mag_hat = mag_hat.magnitude[:, 0]
        else:
            mag_hat = np.broadcast_to(mean_magnitude, H.shape)
        if phase_bits:
            phase_model = phase_model_family(phase_bits)
            phase_hat = phase_model.decode_bits(
                phase_model.emit_bits(batch, keyed_rng(eval_seed, STREAM_EVAL_BITS, 1))).phase[:, 0]
        else:
            phase_hat = np.zeros(H.shape)
        score = nmse(H, combine_complex(mag_hat, phase_hat, dataset.mag_scale))
        rows.append({'mag_bits': mag_bits, 'phase_bits': phase_bits, 'nmse_db': score})
        logger.info(f"bit split {mag_bits}:{phase_bits}: NMSE {score:.2f} dB")

    table = pd.DataFrame(rows, columns=['mag_bits', 'phase_bits', 'nmse_db'])
    best = table.loc[table['nmse_db'].idxmin()]
    return (int(best['mag_bits']), int(best['phase_bits'])), table


def make_family(model_cfg: ModelConfig, dataset: ChannelDataset, train_cfg: TrainConfig,
                seed: int = 0) -> ModelFamily:
    """Family that trains ``model_cfg`` (single user) at any bit count"""
    def build(bits: int) -> FeedbackModel:
        cfg = replace(model_cfg, feedback_bits=bits, n_users=1)
        model = build_model(cfg, keyed_rng(seed, STREAM_INIT))
        model, _ = train(model, _first_user(dataset), replace(train_cfg, seed=seed))
        return model
    return build


def _first_user(dataset: ChannelDataset) -> ChannelDataset:
    groups = [replace(g, users=g.users[:1], perturbations=g.perturbations[:1], user_paths=g.user_paths[:1])
              for g in dataset.groups]
    return replace(dataset, groups=groups)


# Comparison suites
@dataclass
class Arm:
    name: str
    model_config: ModelConfig
    dataset: ChannelDataset
    seed: int


def reports_frame(reports: Sequence[MetricsReport], deterministic: bool = False) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(r) for r in reports], columns=CSV_COLUMNS)
    if deterministic:
        frame['seconds'] = 0.0
    return frame


def run_arm(arm: Arm, train_cfg: TrainConfig, experiment: str, split: str = "test") -> MetricsReport:
    started = time.perf_counter()
    model = build_model(arm.model_config, keyed_rng(arm.seed, STREAM_INIT))
    model, _ = train(model, arm.dataset, replace(train_cfg, seed=arm.seed))
    result = evaluate_model(model, arm.dataset, split, eval_seed=arm.seed)
    report = MetricsReport(experiment=experiment, model=arm.name, bpd=bpd_of(model), nmse_db=result.nmse_db,
                           phase_nmse_db=result.phase_nmse_db, params=param_count(model), seed=arm.seed,
                           seconds=time.perf_counter() - started)
    logger.info(f"{experiment}/{arm.name} bpd={report.bpd:.3f} seed={arm.seed}: NMSE {report.nmse_db:.2f} dB")
    return report


def run_arms(arms: Sequence[Arm], train_cfg: TrainConfig, experiment: str, split: str = "test",
             threads: Optional[int] = None) -> List[MetricsReport]:
    """Train and score independent arms in parallel; report order follows ``arms``"""
    settings = get_config()
    threads = max(1, threads or settings.THREADS)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(run_arm, arm, train_cfg, experiment, split) for arm in arms]
        return [f.result() for f in tqdm(futures, desc=experiment, disable=not settings.SHOW_PROGRESS,
                                         leave=False)]


class DatasetCache:
    """Datasets by config, generated once and shared read-only between arms"""

    def __init__(self, seeded: Optional[Dict[DatasetConfig, ChannelDataset]] = None):
        self._datasets: Dict[DatasetConfig, ChannelDataset] = dict(seeded or {})

    def get(self, cfg: DatasetConfig) -> ChannelDataset:
        if cfg not in self._datasets:
            self._datasets[cfg] = generate_dataset(cfg)
        return self._datasets[cfg]


def _suite_arms(suite: str, cfg, cache: DatasetCache) -> List[Arm]:
    base = cfg.dataset
    seeds = cfg.eval.seeds
    arms: List[Arm] = []

    def add(name: str, bpd: float, dataset_cfg: DatasetConfig = base, **overrides):
        for seed in seeds:
            model_cfg = cfg.model_config(bpd, **overrides)
            if dataset_cfg.users_per_group != base.users_per_group and 'n_users' not in overrides:
                model_cfg = replace(model_cfg, n_users=dataset_cfg.users_per_group)
            arms.append(Arm(name, model_cfg, cache.get(dataset_cfg), seed))

    for bpd in cfg.eval.bpd_list:
        if suite == 'coop_vs_alone':
            add('alone', bpd, variant=Variant.ALONE)
            add('cocsinet', bpd, variant=Variant.COCSINET)
        elif suite == 'benchmarks':
            add('cocsinet', bpd, variant=Variant.COCSINET)
            for which in (1, 2, 3):
                add(f'benchmark{which}', bpd, variant=Variant(f'benchmark{which}'))
        elif suite == 'users':
            add('alone', bpd, variant=Variant.ALONE)
            add('cocsinet-2ue', bpd, replace(base, users_per_group=2), variant=Variant.COCSINET, n_users=2)
            add('cocsinet-4ue', bpd, replace(base, users_per_group=4), variant=Variant.COCSINET, n_users=4)
        elif suite == 'quant_vs_binary':
            add('quantize-4bit', bpd, bit_mode=BitMode.QUANTIZE, bits_per_value=4)
            add('quantize-1bit', bpd, bit_mode=BitMode.QUANTIZE, bits_per_value=1)
            add('binarize', bpd, bit_mode=BitMode.BINARIZE)
        elif suite == 'mdpf':
            for variant in (Variant.NAIVE, Variant.MDPF1, Variant.MDPF2):
                add(variant.value, bpd, variant=variant, n_users=1)
        elif suite == 'lstm_vs_fc':
            if base.geometry.n_rx < 2:
                raise ConfigError("lstm_vs_fc needs dataset.n_rx >= 2", key='dataset.n_rx')
            for n_paths in cfg.eval.n_paths_list:
                dataset_cfg = replace(base, n_paths=n_paths)
                add(f'fc-nc{n_paths}', bpd, dataset_cfg, lstm_refine=False)
                add(f'lstm-nc{n_paths}', bpd, dataset_cfg, lstm_refine=True)
        else:
            raise InvalidArgumentError(f"unknown suite {suite!r}")
    return arms


def run_finetune_suite(cfg, cache: DatasetCache, split: str = "test") -> List[MetricsReport]:
    """Train on the original distribution, then fine-tune on a shifted one with each sample budget"""
    original = cache.get(cfg.dataset)
    shifted_cfg = replace(cfg.dataset, aod_range=(cfg.finetune.aod_min, cfg.finetune.aod_max),
                          seed=cfg.finetune.seed)
    shifted = normalize_dataset(cache.get(shifted_cfg), original.mag_scale)
    tune_cfg = replace(cfg.train, epochs=cfg.finetune.epochs)
    reports = []

    for seed in cfg.eval.seeds:
        model_cfg = cfg.model_config()
        model = build_model(model_cfg, keyed_rng(seed, STREAM_INIT))
        model, _ = train(model, original, replace(cfg.train, seed=seed))
        trained_state = model.state_dict()

        def report(name: str, scored: FeedbackModel, dataset: ChannelDataset, started: float) -> MetricsReport:
            result = evaluate_model(scored, dataset, split, eval_seed=seed)
            return MetricsReport('finetune', name, bpd_of(scored), result.nmse_db, result.phase_nmse_db,
                                 params=param_count(scored), seed=seed, seconds=time.perf_counter() - started)

        reports.append(report('original', model, original, time.perf_counter()))
        reports.append(report('mismatch', model, shifted, time.perf_counter()))
        for n_samples in cfg.finetune.n_samples_list:
            started = time.perf_counter()
            tuned = build_model(model_cfg, keyed_rng(seed, STREAM_INIT))
            tuned.load_state_dict(trained_state)
            tuned, _ = fine_tune(tuned, shifted, n_samples, replace(tune_cfg, seed=seed))
            reports.append(report(f'finetune-{n_samples}', tuned, shifted, started))
            reports.append(report(f'finetune-{n_samples}-original', tuned, original, started))
    return reports


def plot_script(suite: str, arm_files: Dict[str, str], phase: bool = False) -> str:
    """gnuplot script drawing BPD vs NMSE for every arm CSV"""
    column = CSV_COLUMNS.index('phase_nmse_db' if phase else 'nmse_db') + 1
    bpd_column = CSV_COLUMNS.index('bpd') + 1
    lines = [
        f"# {suite}: BPD vs NMSE",
        "set datafile separator ','",
        "set key autotitle columnhead",
        "set xlabel 'BPD'",
        f"set ylabel '{'phase NMSE' if phase else 'NMSE'} (dB)'",
        "set grid",
    ]
    plots = [f"'{path}' using {bpd_column}:{column} with linespoints title '{name}'"
             for name, path in arm_files.items()]
    lines.append("plot " + ", \\\n     ".join(plots) if plots else "# no arms")
    return '\n'.join(lines) + '\n'


def write_suite(suite: str, reports: Sequence[MetricsReport], out_dir: Path,
                deterministic: bool = False) -> List[Path]:
    """One CSV per arm, a merged CSV and a gnuplot script"""
    out_dir = Path(out_dir)
    frame = reports_frame(reports, deterministic)
    written = []
    arm_files: Dict[str, str] = {}
    for name in dict.fromkeys(frame['model']):
        filename = sanitize_filename(f"{suite}-{name}.csv")
        written.append(write_csv(frame[frame['model'] == name], out_dir / filename))
        arm_files[name] = filename
    written.append(write_csv(frame, out_dir / f"{suite}.csv"))
    script = out_dir / f"{suite}.gp"
    script.write_text(plot_script(suite, arm_files, phase=(suite == 'mdpf')), encoding='utf-8')
    written.append(script)
    return written


def run_comparison(suite: str, cfg, out_dir: Optional[Path] = None,
                   datasets: Optional[Dict[DatasetConfig, ChannelDataset]] = None,
                   threads: Optional[int] = None) -> List[MetricsReport]:
    """Train and evaluate every arm of ``suite`` with shared seeds and datasets.

    Args:
        suite: coop_vs_alone, lstm_vs_fc, quant_vs_binary, mdpf, benchmarks, users or finetune
        cfg: ExperimentConfig
        out_dir: when given, CSVs and the plot script are written there
        datasets: already generated datasets, keyed by their DatasetConfig

    Returns:
        MetricsReports in arm order
    """
    cache = DatasetCache(datasets)
    logger.info(f"Running comparison suite {suite}")
    if suite == 'finetune':
        reports = run_finetune_suite(cfg, cache, cfg.eval.split)
    else:
        arms = _suite_arms(suite, cfg, cache)
        reports = run_arms(arms, cfg.train, suite, cfg.eval.split, threads)
    if out_dir is not None:
        write_suite(suite, reports, out_dir, cfg.train.deterministic)
    return reports


def bpd_sweep(cfg, dataset: ChannelDataset, threads: Optional[int] = None) -> List[MetricsReport]:
    """The configured model trained and scored at every BPD of ``eval.bpd_list``"""
    cache = DatasetCache({cfg.dataset: dataset})
    arms = [Arm(cfg.model.variant.value, cfg.model_config(bpd), cache.get(cfg.dataset), seed)
            for bpd in cfg.eval.bpd_list for seed in cfg.eval.seeds]
    return run_arms(arms, cfg.train, 'bpd', cfg.eval.split, threads)
