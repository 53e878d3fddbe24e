"""Command-line front end.

Every subcommand reads the experiment config, writes its artifacts under
``--out`` and finishes by writing ``manifest.txt``. Errors print one line
``error[<category>]: <message>`` on stderr.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from config.experiment import ExperimentConfig, parse_config
from config.settings import get_config
from core import autograd
from core.channel_model import (ChannelDataset, generate_dataset, load_dataset, normalize_dataset,
                                save_dataset)
from core.evaluator import (MetricsReport, allocate_bits, attention_distance, ber_sweep, bpd_of, bpd_sweep,
                            default_splits, evaluate_model, make_family, param_count, reports_frame,
                            run_comparison, weight_attention, write_suite)
from core.exceptions import CocsiError, MissingArtifactError
from core.feedback_models import Variant, build_model
from core.trainer import fine_tune, load_model_checkpoint, resume, save_model_checkpoint, train
from utils.file_parser import write_csv, write_manifest
from utils.rng import STREAM_INIT, keyed_rng
from utils.validators import format_file_size, validate_file_path

logger = logging.getLogger(__name__)

DATASET_FILE = "dataset.cocd"


class Run:
    """Parsed arguments plus the resolved experiment config and output directory"""

    def __init__(self, args: argparse.Namespace, cfg: ExperimentConfig):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out)
        self.artifacts: List[Path] = []
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def deterministic(self) -> bool:
        return self.cfg.train.deterministic

    def dataset_path(self) -> Path:
        return Path(self.cfg.dataset_path) if self.cfg.dataset_path else self.out / DATASET_FILE

    def load_dataset(self) -> ChannelDataset:
        path = self.dataset_path()
        if not validate_file_path(str(path)):
            raise MissingArtifactError("dataset", f"{path} (run gen-data first)")
        return load_dataset(path)

    def checkpoint_path(self, tag: Optional[str] = None) -> Path:
        return self.out / f"{tag or self.cfg.eval.checkpoint}.cocw"

    def record(self, *paths: Path) -> None:
        self.artifacts.extend(paths)

    def write_reports(self, name: str, reports: Sequence[MetricsReport]) -> Path:
        path = write_csv(reports_frame(reports, self.deterministic), self.out / f"{name}.csv")
        self.record(path)
        return path


# Subcommands
def cmd_gen_data(run: Run) -> None:
    dataset = generate_dataset(run.cfg.dataset)
    path = save_dataset(dataset, run.out / DATASET_FILE)
    logger.info(f"Wrote {len(dataset.groups)} groups to {path} ({format_file_size(path.stat().st_size)})")
    run.record(path)


def cmd_train(run: Run) -> None:
    cfg = run.cfg
    dataset = run.load_dataset()
    if run.args.resume:
        checkpoint = run.checkpoint_path('last')
        if not checkpoint.is_file():
            raise MissingArtifactError("checkpoint", f"{checkpoint} (nothing to resume)")
        model, log = resume(checkpoint, dataset, cfg.train, out_dir=run.out)
    else:
        model = build_model(cfg.model_config(), keyed_rng(cfg.train.seed, STREAM_INIT))
        logger.info(f"Training {cfg.model.variant.value}: {model.feedback_bits} bits/user "
                    f"(BPD {bpd_of(model):.3f}), {param_count(model)} parameters")
        model, log = train(model, dataset, cfg.train, out_dir=run.out)
    run.record(run.out / "best.cocw", run.out / "last.cocw",
               log.save_csv(run.out / "trainlog.csv", run.deterministic, append=run.args.resume))


def cmd_finetune(run: Run) -> None:
    cfg = run.cfg
    original = run.load_dataset()
    base_model, _ = load_model_checkpoint(run.checkpoint_path())
    shifted_cfg = replace(cfg.dataset, aod_range=(cfg.finetune.aod_min, cfg.finetune.aod_max),
                          seed=cfg.finetune.seed)
    shifted = normalize_dataset(generate_dataset(shifted_cfg), original.mag_scale)
    tune_cfg = replace(cfg.train, epochs=cfg.finetune.epochs)
    state = base_model.state_dict()

    reports = [_score('original', base_model, original, cfg), _score('mismatch', base_model, shifted, cfg)]
    for n_samples in cfg.finetune.n_samples_list:
        model = build_model(base_model.config, keyed_rng(cfg.train.seed, STREAM_INIT))
        model.load_state_dict(state)
        model, log = fine_tune(model, shifted, n_samples, tune_cfg)
        run.record(save_model_checkpoint(model, run.out / f"finetune-{n_samples}.cocw", "finetune",
                                         log.best_epoch))
        reports.append(_score(f'finetune-{n_samples}', model, shifted, cfg))
        reports.append(_score(f'finetune-{n_samples}-original', model, original, cfg))
    run.write_reports("finetune", reports)


def _score(name: str, model, dataset: ChannelDataset, cfg: ExperimentConfig, experiment: str = 'finetune',
           seconds: float = 0.0) -> MetricsReport:
    result = evaluate_model(model, dataset, cfg.eval.split, eval_seed=cfg.train.seed)
    return MetricsReport(experiment, name, bpd_of(model), result.nmse_db, result.phase_nmse_db,
                         params=param_count(model), seed=cfg.train.seed, seconds=seconds)


def cmd_eval(run: Run) -> None:
    cfg = run.cfg
    dataset = run.load_dataset()
    reports = []
    for tag in ('best', 'last'):
        path = run.checkpoint_path(tag)
        if not path.is_file():
            if tag == 'best':
                raise MissingArtifactError("checkpoint", f"{path} (run train first)")
            continue
        model, _ = load_model_checkpoint(path)
        reports.append(_score(f"{model.config.variant.value}-{tag}", model, dataset, cfg, experiment='eval'))
        logger.info(f"{tag}: NMSE {reports[-1].nmse_db:.2f} dB")
    run.write_reports("metrics", reports)


def cmd_sweep_bpd(run: Run) -> None:
    reports = bpd_sweep(run.cfg, run.load_dataset())
    run.record(*write_suite('bpd', reports, run.out, run.deterministic))


def cmd_sweep_ber(run: Run) -> None:
    cfg = run.cfg
    dataset = run.load_dataset()
    model, metadata = load_model_checkpoint(run.checkpoint_path())
    reports = ber_sweep(model, dataset, cfg.eval.ber_list, cfg.eval.ber_seeds,
                        experiment='ber', model_tag=f"{model.config.variant.value}-{metadata.get('tag', '')}",
                        seed=cfg.train.seed, split=cfg.eval.split)
    run.write_reports("ber", reports)


def cmd_alloc_bits(run: Run) -> None:
    cfg = run.cfg
    dataset = run.load_dataset()
    total = cfg.eval.total_bits or cfg.feedback_bits(n_rx=cfg.dataset.geometry.n_rx)
    splits = list(cfg.eval.splits) or default_splits(total, cfg.model.bit_mode, cfg.model.bits_per_value)
    phase_variant = cfg.model.variant if cfg.model.variant.is_phase else Variant.MDPF2
    mag_family = make_family(cfg.model_config(variant=Variant.ALONE, n_users=1, feedback_bits=total),
                             dataset, cfg.train, cfg.train.seed)
    phase_family = make_family(cfg.model_config(variant=phase_variant, n_users=1, feedback_bits=total),
                               dataset, cfg.train, cfg.train.seed)
    best, table = allocate_bits(total, mag_family, phase_family, dataset, splits, cfg.eval.split,
                                eval_seed=cfg.train.seed)
    logger.info(f"Best split of {total} bits: {best[0]} magnitude / {best[1]} phase")
    run.record(write_csv(table, run.out / "alloc.csv"))


def cmd_visualize_weights(run: Run) -> None:
    model, _ = load_model_checkpoint(run.checkpoint_path())
    profiles = []
    for k, encoder in enumerate(model.encoder_list):
        profile = weight_attention(encoder)
        profiles.append(profile)
        run.record(profile.save_csv(run.out / f"attention-ue{k}.csv"))
    for k in range(1, len(profiles)):
        logger.info(f"attention distance ue0-ue{k}: {attention_distance(profiles[0], profiles[k]):.4f}")


def cmd_compare(run: Run) -> None:
    cfg = run.cfg
    datasets = None
    if run.dataset_path().is_file():
        datasets = {cfg.dataset: load_dataset(run.dataset_path())}
    suite = cfg.eval.suite
    run_comparison(suite, cfg, out_dir=run.out, datasets=datasets)
    run.record(*sorted(run.out.glob(f"{suite}*.csv")), run.out / f"{suite}.gp")


COMMANDS: Dict[str, Callable[[Run], None]] = {
    'gen-data': cmd_gen_data,
    'train': cmd_train,
    'finetune': cmd_finetune,
    'eval': cmd_eval,
    'sweep-bpd': cmd_sweep_bpd,
    'sweep-ber': cmd_sweep_ber,
    'alloc-bits': cmd_alloc_bits,
    'visualize-weights': cmd_visualize_weights,
    'compare': cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    settings = get_config()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, default=None, help='experiment config file (key = value)')
    common.add_argument('--out', type=Path, default=Path(settings.OUT_DIR), help='output directory')
    common.add_argument('--seed', type=int, default=None, help='overrides dataset.seed and train.seed')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='override one config key (repeatable)')
    common.add_argument('--deterministic', action='store_true',
                        help='zero wall-clock columns so repeated runs are byte-identical')

    parser = argparse.ArgumentParser(prog='cocsi', description='Cooperative CSI feedback laboratory')
    subparsers = parser.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name, parents=[common])
        if name == 'train':
            sub.add_argument('--resume', action='store_true',
                             help='continue from last.cocw in --out up to train.epochs')
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
                        stream=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = get_config()
    configure_logging(settings.LOG_LEVEL)
    args = build_parser().parse_args(argv)

    try:
        settings.validate_config()
        autograd.set_default_dtype(settings.PRECISION)
        overrides = list(args.overrides)
        if args.deterministic:
            overrides.append('train.deterministic=true')
        cfg = parse_config(args.config, overrides, args.seed)
        run = Run(args, cfg)
        COMMANDS[args.command](run)
        manifest = write_manifest(run.out / "manifest.txt", cfg.to_text(),
                                  seeds={'dataset': cfg.dataset.seed, 'train': cfg.train.seed},
                                  artifacts=run.artifacts, extra={'command': args.command})
        logger.info(f"{args.command} finished; manifest at {manifest}")
        return 0
    except CocsiError as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.debug("unexpected failure", exc_info=True)
        print(f"error[internal]: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
