"""Experiment configuration: flat ``key = value`` text with dotted sections.

Every key has a type and a default; unknown keys, unparsable values and
constraint violations raise ConfigError naming the key and source line
(line 0 for command-line overrides).
"""

import contextlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from core.bitstream import BitMode, bits_for_bpd
from core.channel_model import ArrayGeometry, DatasetConfig, PerturbSpec
from core.exceptions import ConfigError, InvalidArgumentError, MissingArtifactError
from core.feedback_models import ModelConfig, Variant
from core.trainer import TrainConfig
from utils.file_parser import FileParser

logger = logging.getLogger(__name__)

SUITES = ('coop_vs_alone', 'lstm_vs_fc', 'quant_vs_binary', 'mdpf', 'benchmarks', 'users', 'finetune')


def _float_list(value: str) -> List[float]:
    return FileParser.parse_list(value, float)


def _int_list(value: str) -> List[int]:
    return FileParser.parse_list(value, int)


def _splits(value: str) -> List[Tuple[int, int]]:
    """``"12:4, 8:8"`` -> [(12, 4), (8, 8)]"""
    result = []
    for item in FileParser.parse_list(value, str):
        mag, sep, phase = item.partition(':')
        if not sep:
            raise ValueError(f"split {item!r} must look like mag:phase")
        result.append((int(mag), int(phase)))
    return result


def _choice(*options: str) -> Callable[[str], str]:
    def parse(value: str) -> str:
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {value!r}")
        return value
    return parse


# key -> (parser, default text, type label)
SCHEMA: Dict[str, Tuple[Callable[[str], Any], str, str]] = {
    'dataset.n_tx': (int, '32', 'integer'),
    'dataset.n_rx': (int, '1', 'integer'),
    'dataset.spacing_ratio': (float, '0.5', 'number'),
    'dataset.n_paths': (int, '3', 'integer'),
    'dataset.n_groups': (int, '5000', 'integer'),
    'dataset.users_per_group': (int, '2', 'integer'),
    'dataset.angle_jitter_max': (float, '0.035', 'number'),
    'dataset.gain_jitter_std': (float, '0.1', 'number'),
    'dataset.seed': (int, '0', 'integer'),
    'dataset.aod_min': (float, repr(-math.pi / 2), 'number'),
    'dataset.aod_max': (float, repr(math.pi / 2), 'number'),
    'dataset.path': (str, '', 'path'),

    'model.variant': (_choice(*[v.value for v in Variant]), 'cocsinet', 'variant'),
    'model.bit_mode': (_choice('quantize', 'binarize'), 'binarize', 'bit mode'),
    'model.bits_per_value': (int, '4', 'integer'),
    'model.feedback_bits': (int, '0', 'integer'),
    'model.bpd': (float, '0.1', 'number'),
    'model.lstm_refine': (FileParser.parse_bool, 'false', 'boolean'),
    'model.leaky_alpha': (float, '0.2', 'number'),
    'model.tied': (FileParser.parse_bool, 'false', 'boolean'),

    'train.batch_size': (int, '200', 'integer'),
    'train.lr': (float, '0.001', 'number'),
    'train.epochs': (int, '200', 'integer'),
    'train.seed': (int, '0', 'integer'),
    'train.checkpoint_every': (int, '0', 'integer'),
    'train.early_report': (int, '1', 'integer'),
    'train.deterministic': (FileParser.parse_bool, 'false', 'boolean'),

    'eval.suite': (_choice(*SUITES), 'coop_vs_alone', 'suite'),
    'eval.ber_list': (_float_list, '0.1, 0.01, 0.001, 0.0001', 'number list'),
    'eval.bpd_list': (_float_list, '0.05, 0.1, 0.2, 0.3, 0.5', 'number list'),
    'eval.splits': (_splits, '', 'mag:phase list'),
    'eval.total_bits': (int, '0', 'integer'),
    'eval.ber_seeds': (int, '10', 'integer'),
    'eval.seeds': (_int_list, '0, 1, 2', 'integer list'),
    'eval.n_paths_list': (_int_list, '3, 6', 'integer list'),
    'eval.checkpoint': (_choice('best', 'last'), 'best', 'checkpoint tag'),
    'eval.split': (_choice('train', 'val', 'test'), 'test', 'split name'),

    'finetune.n_samples_list': (_int_list, '500, 1000, 1500', 'integer list'),
    'finetune.aod_min': (float, '0.5', 'number'),
    'finetune.aod_max': (float, repr(math.pi / 2), 'number'),
    'finetune.seed': (int, '1', 'integer'),
    'finetune.epochs': (int, '50', 'integer'),
}


@dataclass(frozen=True)
class ModelSection:
    variant: Variant = Variant.COCSINET
    bit_mode: BitMode = BitMode.BINARIZE
    bits_per_value: int = 4
    feedback_bits: int = 0
    bpd: float = 0.1
    lstm_refine: bool = False
    leaky_alpha: float = 0.2
    tied: bool = False


@dataclass(frozen=True)
class EvalSection:
    suite: str = 'coop_vs_alone'
    ber_list: Tuple[float, ...] = (0.1, 0.01, 0.001, 0.0001)
    bpd_list: Tuple[float, ...] = (0.05, 0.1, 0.2, 0.3, 0.5)
    splits: Tuple[Tuple[int, int], ...] = ()
    total_bits: int = 0
    ber_seeds: int = 10
    seeds: Tuple[int, ...] = (0, 1, 2)
    n_paths_list: Tuple[int, ...] = (3, 6)
    checkpoint: str = 'best'
    split: str = 'test'


@dataclass(frozen=True)
class FinetuneSection:
    n_samples_list: Tuple[int, ...] = (500, 1000, 1500)
    aod_min: float = 0.5
    aod_max: float = math.pi / 2
    seed: int = 1
    epochs: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    dataset_path: str = ''
    values: Dict[str, str] = field(default_factory=dict, compare=False)

    def feedback_bits(self, bpd: Optional[float] = None, bit_mode: Optional[BitMode] = None,
                      bits_per_value: Optional[int] = None, n_rx: Optional[int] = None) -> int:
        """Explicit ``model.feedback_bits`` or the budget implied by a BPD"""
        bit_mode = bit_mode or self.model.bit_mode
        bits_per_value = bits_per_value or self.model.bits_per_value
        if bpd is None and self.model.feedback_bits:
            return self.model.feedback_bits
        geom = self.dataset.geometry
        return bits_for_bpd(bpd if bpd is not None else self.model.bpd, n_rx or geom.n_rx, geom.n_tx,
                            bit_mode, bits_per_value)

    def model_config(self, bpd: Optional[float] = None, **overrides) -> ModelConfig:
        """ModelConfig for this experiment; keyword overrides replace fields"""
        m = self.model
        fields = dict(variant=m.variant, n_rx=self.dataset.geometry.n_rx, n_tx=self.dataset.geometry.n_tx,
                      bit_mode=m.bit_mode, bits_per_value=m.bits_per_value, lstm_refine=m.lstm_refine,
                      leaky_alpha=m.leaky_alpha, n_users=self.dataset.users_per_group, tied=m.tied)
        fields.update({k: v for k, v in overrides.items() if k != 'feedback_bits'})
        if fields['variant'].is_phase and 'n_users' not in overrides:
            # phase feedback is single-user
            fields['n_users'] = 1
        bits = overrides.get('feedback_bits') or self.feedback_bits(bpd, fields['bit_mode'],
                                                                    fields['bits_per_value'], fields['n_rx'])
        return ModelConfig(feedback_bits=bits, **fields)

    def to_text(self) -> str:
        """Resolved configuration, one ``key = value`` per line in key order"""
        return '\n'.join(f"{key} = {self.values[key]}" for key in sorted(self.values)) + '\n'


@contextlib.contextmanager
def _section(section: str, lines: Dict[str, int]):
    """Attach key and line information to validation errors raised while building a section"""
    try:
        yield
    except ConfigError as exc:
        if exc.line is not None or exc.key is None:
            raise
        raise ConfigError(exc.detail, key=exc.key, line=lines.get(exc.key)) from exc
    except InvalidArgumentError as exc:
        message = str(exc)
        name = message.split(' ', 1)[0]
        key = f"{section}.{name}"
        if key not in SCHEMA:
            key = section
        raise ConfigError(message, key=key, line=lines.get(key)) from exc


def _collect(entries: Sequence[Tuple[str, str, int]]) -> Tuple[Dict[str, Any], Dict[str, str], Dict[str, int]]:
    raw = {key: default for key, (_, default, _) in SCHEMA.items()}
    lines: Dict[str, int] = {}
    for key, value, line in entries:
        if key not in SCHEMA:
            raise ConfigError("unknown key", key=key, line=line)
        raw[key] = value
        lines[key] = line

    parsed: Dict[str, Any] = {}
    for key, (parser, _, label) in SCHEMA.items():
        try:
            parsed[key] = parser(raw[key])
        except ValueError as exc:
            raise ConfigError(f"expected {label}, got {raw[key]!r} ({exc})", key=key, line=lines.get(key))
    return parsed, raw, lines


def build_experiment(entries: Sequence[Tuple[str, str, int]]) -> ExperimentConfig:
    p, raw, lines = _collect(entries)

    with _section('dataset', lines):
        if not p['dataset.users_per_group'] >= 1:
            raise ConfigError(f"must be >= 1, got {p['dataset.users_per_group']}", key='dataset.users_per_group')
        geometry = ArrayGeometry(n_tx=p['dataset.n_tx'], n_rx=p['dataset.n_rx'],
                                 spacing_ratio=p['dataset.spacing_ratio'])
        jitter = PerturbSpec(angle_jitter_max=p['dataset.angle_jitter_max'],
                             gain_jitter_std=p['dataset.gain_jitter_std'])
        if p['dataset.aod_min'] > p['dataset.aod_max']:
            raise ConfigError("aod_min exceeds aod_max", key='dataset.aod_min')
        dataset = DatasetConfig(geometry=geometry, n_paths=p['dataset.n_paths'], n_groups=p['dataset.n_groups'],
                                users_per_group=p['dataset.users_per_group'], jitter=jitter,
                                seed=p['dataset.seed'], aod_range=(p['dataset.aod_min'], p['dataset.aod_max']))

    with _section('model', lines):
        if not 1 <= p['model.bits_per_value'] <= 16:
            raise ConfigError(f"must lie in [1, 16], got {p['model.bits_per_value']}", key='model.bits_per_value')
        if p['model.feedback_bits'] < 0:
            raise ConfigError("must be >= 0 (0 derives the budget from model.bpd)", key='model.feedback_bits')
        if not p['model.bpd'] > 0:
            raise ConfigError(f"must be > 0, got {p['model.bpd']}", key='model.bpd')
        if not 0 < p['model.leaky_alpha'] < 1:
            raise ConfigError(f"must lie in (0, 1), got {p['model.leaky_alpha']}", key='model.leaky_alpha')
        if p['model.lstm_refine'] and geometry.n_rx < 2:
            raise ConfigError("LSTM refinement needs dataset.n_rx >= 2", key='model.lstm_refine')
        model = ModelSection(variant=Variant(p['model.variant']), bit_mode=BitMode(p['model.bit_mode']),
                             bits_per_value=p['model.bits_per_value'], feedback_bits=p['model.feedback_bits'],
                             bpd=p['model.bpd'], lstm_refine=p['model.lstm_refine'],
                             leaky_alpha=p['model.leaky_alpha'], tied=p['model.tied'])
        if (model.bit_mode is BitMode.QUANTIZE and model.feedback_bits
                and model.feedback_bits % model.bits_per_value):
            raise ConfigError(f"{model.feedback_bits} is not divisible by model.bits_per_value",
                              key='model.feedback_bits')

    with _section('train', lines):
        train = TrainConfig(batch_size=p['train.batch_size'], lr=p['train.lr'], epochs=p['train.epochs'],
                            seed=p['train.seed'], checkpoint_every=p['train.checkpoint_every'],
                            early_report=p['train.early_report'], deterministic=p['train.deterministic'])

    with _section('eval', lines):
        for key in ('eval.ber_list',):
            if any(not 0 <= b <= 1 for b in p[key]):
                raise ConfigError("BER values must lie in [0, 1]", key=key)
        if any(b <= 0 for b in p['eval.bpd_list']) or not p['eval.bpd_list']:
            raise ConfigError("needs at least one BPD, all > 0", key='eval.bpd_list')
        if any(m < 0 or ph < 0 for m, ph in p['eval.splits']):
            raise ConfigError("bit splits must be non-negative", key='eval.splits')
        if p['eval.ber_seeds'] < 1:
            raise ConfigError("must be >= 1", key='eval.ber_seeds')
        if not p['eval.seeds']:
            raise ConfigError("needs at least one seed", key='eval.seeds')
        if any(n < 1 for n in p['eval.n_paths_list']):
            raise ConfigError("path counts must be >= 1", key='eval.n_paths_list')
        evaluation = EvalSection(suite=p['eval.suite'], ber_list=tuple(p['eval.ber_list']),
                                 bpd_list=tuple(p['eval.bpd_list']), splits=tuple(p['eval.splits']),
                                 total_bits=p['eval.total_bits'], ber_seeds=p['eval.ber_seeds'],
                                 seeds=tuple(p['eval.seeds']), n_paths_list=tuple(p['eval.n_paths_list']),
                                 checkpoint=p['eval.checkpoint'], split=p['eval.split'])

    with _section('finetune', lines):
        if any(n < 0 for n in p['finetune.n_samples_list']):
            raise ConfigError("sample counts must be >= 0", key='finetune.n_samples_list')
        if not -math.pi / 2 <= p['finetune.aod_min'] <= p['finetune.aod_max'] <= math.pi / 2:
            raise ConfigError("needs -pi/2 <= aod_min <= aod_max <= pi/2", key='finetune.aod_min')
        if p['finetune.epochs'] < 0:
            raise ConfigError("must be >= 0", key='finetune.epochs')
        if p['finetune.seed'] < 0:
            raise ConfigError(f"must be >= 0, got {p['finetune.seed']}", key='finetune.seed')
        finetune = FinetuneSection(n_samples_list=tuple(p['finetune.n_samples_list']),
                                   aod_min=p['finetune.aod_min'], aod_max=p['finetune.aod_max'],
                                   seed=p['finetune.seed'], epochs=p['finetune.epochs'])

    return ExperimentConfig(dataset=dataset, model=model, train=train, eval=evaluation, finetune=finetune,
                            dataset_path=p['dataset.path'], values=raw)


def parse_config(path: Optional[Path] = None, overrides: Sequence[str] = (),
                 seed: Optional[int] = None) -> ExperimentConfig:
    """Read a config file (optional), apply ``--set`` overrides and ``--seed``.

    Args:
        path: config file; None means all defaults
        overrides: ``key=value`` strings, applied after the file
        seed: when given, replaces dataset.seed and train.seed

    Returns:
        Typed, validated ExperimentConfig
    """
    entries: List[Tuple[str, str, int]] = []
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise MissingArtifactError("config", str(path))
        entries.extend(FileParser.parse_key_value(path.read_text(encoding='utf-8')))
    for text in overrides:
        key, value = FileParser.parse_override(text)
        entries.append((key, value, 0))
    if seed is not None:
        entries.append(('dataset.seed', str(seed), 0))
        entries.append(('train.seed', str(seed), 0))

    config = build_experiment(entries)
    logger.debug(f"Parsed experiment config ({len(entries)} explicit entries)")
    return config
