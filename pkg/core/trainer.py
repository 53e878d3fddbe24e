"""Mini-batch training with best-validation selection and fine-tuning"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from config.settings import get_config
from core import autograd as ag
from core.channel_model import ChannelDataset, dataset_planes
from core.checkpoint import load_checkpoint, save_checkpoint
from core.exceptions import ConfigError, ContractError, InvalidArgumentError
from core.feedback_models import FeedbackBatch, FeedbackModel, ModelConfig, build_model
from core.layers import Mode, ParamSet
from core.optim import Adam, AdamState
from utils.file_parser import write_csv
from utils.rng import STREAM_INIT, STREAM_SHUFFLE, STREAM_SUBSET, STREAM_TRAIN_BITS, STREAM_VALID_BITS, keyed_rng

logger = logging.getLogger(__name__)

TRAINLOG_COLUMNS = ['epoch', 'train_loss', 'val_loss', 'seconds']


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 200
    lr: float = 0.001
    epochs: int = 200
    seed: int = 0
    checkpoint_every: int = 0
    early_report: int = 1
    deterministic: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 because batch normalization needs batch statistics, "
                              f"got {self.batch_size}", key="train.batch_size")
        if not self.lr >= 0 or math.isinf(self.lr):
            raise ConfigError(f"lr must be a finite value >= 0, got {self.lr}", key="train.lr")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}", key="train.epochs")
        if self.checkpoint_every < 0:
            raise ConfigError(f"must be >= 0, got {self.checkpoint_every}", key="train.checkpoint_every")
        if self.early_report < 1:
            raise ConfigError(f"must be >= 1, got {self.early_report}", key="train.early_report")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"must lie in [0, 2**64), got {self.seed}", key="train.seed")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    best_tag: str = "best"
    best_state: Optional[Dict[str, np.ndarray]] = field(default=None, repr=False)
    last_state: Optional[Dict[str, np.ndarray]] = field(default=None, repr=False)

    def to_frame(self, deterministic: bool = False) -> pd.DataFrame:
        frame = pd.DataFrame([vars(r) for r in self.records], columns=TRAINLOG_COLUMNS)
        if deterministic:
            frame['seconds'] = 0.0
        return frame

    def save_csv(self, path: Path, deterministic: bool = False, append: bool = False) -> Path:
        """Write the epoch table; ``append`` keeps earlier epochs of an existing log"""
        frame = self.to_frame(deterministic)
        path = Path(path)
        if append and path.is_file():
            if not self.records:
                return path
            previous = pd.read_csv(path)
            previous = previous[previous['epoch'] < self.records[0].epoch]
            frame = pd.concat([previous, frame], ignore_index=True)
        return write_csv(frame, path)

    @property
    def final_train_loss(self) -> float:
        return self.records[-1].train_loss if self.records else math.nan

    @property
    def final_val_loss(self) -> float:
        return self.records[-1].val_loss if self.records else math.nan


def dataset_batch(dataset: ChannelDataset, split: str) -> FeedbackBatch:
    magnitude, phase, _ = dataset_planes(dataset, split)
    return FeedbackBatch(magnitude, phase)


def mean_loss(model: FeedbackModel, batch: FeedbackBatch, rng: np.random.Generator, chunk: int = 512) -> float:
    """Inference-mode loss averaged over samples"""
    total = 0.0
    for start in range(0, batch.size, chunk):
        rows = np.arange(start, min(start + chunk, batch.size))
        part = batch.take(rows)
        outputs = model(part, Mode.INFER, rng)
        total += model.loss(part, outputs).item() * part.size
    return total / max(batch.size, 1)


def model_checkpoint_tensors(model: FeedbackModel, state: Optional[Dict[str, np.ndarray]] = None,
                             optimizer: Optional[Adam] = None) -> Dict[str, np.ndarray]:
    tensors = dict(state if state is not None else model.state_dict())
    if optimizer is not None:
        tensors.update(optimizer.state.to_arrays())
    return tensors


def save_model_checkpoint(model: FeedbackModel, path: Path, tag: str, epoch: int,
                          state: Optional[Dict[str, np.ndarray]] = None,
                          optimizer: Optional[Adam] = None,
                          extra: Optional[Dict[str, str]] = None) -> Path:
    metadata = {
        'model_config': model.config.to_json(),
        'topology': model.topology(),
        'tag': tag,
        'epoch': str(epoch),
        **(extra or {}),
    }
    return save_checkpoint(path, model_checkpoint_tensors(model, state, optimizer), metadata)


def _restore(path: Path) -> Tuple[FeedbackModel, Dict[str, np.ndarray], Dict[str, str]]:
    tensors, metadata = load_checkpoint(path)
    if 'model_config' not in metadata:
        raise ContractError(f"checkpoint {path} has no model_config metadata")
    model = build_model(ModelConfig.from_json(metadata['model_config']), keyed_rng(0, STREAM_INIT))
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith('adam.')})
    return model, tensors, metadata


def load_model_checkpoint(path: Path) -> Tuple[FeedbackModel, Dict[str, str]]:
    """Rebuild a model from the config stored in its checkpoint and load its weights"""
    model, _, metadata = _restore(path)
    return model, metadata


def load_training_state(path: Path) -> Tuple[FeedbackModel, AdamState, Dict[str, str]]:
    """Model, Adam moments and step count from a checkpoint written with its optimizer"""
    model, tensors, metadata = _restore(path)
    if 'adam.t' not in tensors:
        raise ContractError(f"checkpoint {path} holds no optimizer state (only last.cocw does)")
    dtype = ag.get_default_dtype()
    arrays = {k: v.astype(dtype) for k, v in tensors.items() if k.startswith('adam.')}
    return model, AdamState.from_arrays(arrays), metadata


def _fit(model: FeedbackModel, train_batch: FeedbackBatch, val_batch: Optional[FeedbackBatch],
         cfg: TrainConfig, out_dir: Optional[Path] = None, label: str = "train", start_epoch: int = 1,
         adam_state: Optional[AdamState] = None, log: Optional[TrainLog] = None) -> TrainLog:
    n_train = train_batch.size
    if n_train == 0:
        raise InvalidArgumentError("training split is empty")
    batch_size = min(cfg.batch_size, n_train)
    if batch_size < 2:
        raise InvalidArgumentError("training split needs at least 2 samples for batch normalization")
    n_batches = n_train // batch_size
    if val_batch is None or val_batch.size == 0:
        logger.warning("Validation split is empty; using the training loss for checkpoint selection")
        val_batch = None

    dtype = ag.get_default_dtype()
    params = ParamSet.from_module(model)
    optimizer = Adam(params, lr=cfg.lr)
    if adam_state is not None:
        adam_state.lr = cfg.lr
        optimizer.state = adam_state.attach(params)
    log = log if log is not None else TrainLog()
    settings = get_config()

    epochs = tqdm(range(start_epoch, cfg.epochs + 1), desc=label, disable=not settings.SHOW_PROGRESS, leave=False)
    for epoch in epochs:
        started = time.perf_counter()
        order = keyed_rng(cfg.seed, STREAM_SHUFFLE, epoch).permutation(n_train)
        losses = []
        for b in range(n_batches):
            rows = order[b * batch_size:(b + 1) * batch_size]
            part = train_batch.take(rows)
            part = FeedbackBatch(part.magnitude.astype(dtype), part.phase.astype(dtype))
            outputs = model(part, Mode.TRAIN, keyed_rng(cfg.seed, STREAM_TRAIN_BITS, epoch, b))
            loss = model.loss(part, outputs)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        train_loss = float(np.mean(losses))

        validate = epoch % cfg.early_report == 0 or epoch == cfg.epochs
        if not validate:
            val_loss = math.nan
        elif val_batch is None:
            val_loss = train_loss
        else:
            val_loss = mean_loss(model, val_batch, keyed_rng(cfg.seed, STREAM_VALID_BITS, epoch))

        if validate and val_loss < log.best_val_loss:
            log.best_val_loss = val_loss
            log.best_epoch = epoch
            log.best_state = model.state_dict()

        seconds = time.perf_counter() - started
        log.records.append(EpochRecord(epoch, train_loss, val_loss, seconds))
        epochs.set_postfix(loss=f"{train_loss:.4g}", val=f"{val_loss:.4g}")
        logger.debug(f"{label} epoch {epoch}: train_loss={train_loss:.6g} val_loss={val_loss:.6g} ({seconds:.2f}s)")

        if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_model_checkpoint(model, Path(out_dir) / "last.cocw", "last", epoch, optimizer=optimizer,
                                  extra={'best_val_loss': repr(log.best_val_loss)})

    log.last_state = model.state_dict()
    if log.best_state is None:
        log.best_state = log.last_state
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_model_checkpoint(model, out_dir / "last.cocw", "last", cfg.epochs, optimizer=optimizer,
                              extra={'best_val_loss': repr(log.best_val_loss)})
        save_model_checkpoint(model, out_dir / "best.cocw", "best", log.best_epoch, state=log.best_state)
    model.load_state_dict(log.best_state)
    if log.records:
        logger.info(f"{label}: {len(log.records)} epochs, best val_loss={log.best_val_loss:.6g} "
                    f"at epoch {log.best_epoch}")
    return log


def train(model: FeedbackModel, dataset: ChannelDataset, cfg: TrainConfig,
          out_dir: Optional[Path] = None) -> Tuple[FeedbackModel, TrainLog]:
    """Train ``model`` on the dataset's training split.

    Args:
        model: freshly built or previously trained feedback model
        dataset: source of the train and validation splits (not modified)
        cfg: training hyperparameters
        out_dir: when given, best.cocw and last.cocw are written there

    Returns:
        The model holding the best-validation weights, and the TrainLog
    """
    train_batch = dataset_batch(dataset, "train")
    val_batch = dataset_batch(dataset, "val")
    log = _fit(model, train_batch, val_batch, cfg, out_dir)
    return model, log


def resume(checkpoint: Path, dataset: ChannelDataset, cfg: TrainConfig,
           out_dir: Optional[Path] = None) -> Tuple[FeedbackModel, TrainLog]:
    """Continue an interrupted run from its last.cocw up to ``cfg.epochs``.

    Weights, Adam moments and the step counter come from the checkpoint, and
    epochs keep their original numbering so shuffles and bit draws line up
    with an uninterrupted run. A best.cocw next to the checkpoint seeds the
    best-so-far selection.
    """
    checkpoint = Path(checkpoint)
    model, adam_state, metadata = load_training_state(checkpoint)
    start_epoch = int(metadata.get('epoch', '0')) + 1
    log = TrainLog()
    best_path = checkpoint.with_name("best.cocw")
    if 'best_val_loss' in metadata and best_path.is_file():
        best_tensors, best_metadata = load_checkpoint(best_path)
        log.best_val_loss = float(metadata['best_val_loss'])
        log.best_epoch = int(best_metadata.get('epoch', '0'))
        log.best_state = {k: v for k, v in best_tensors.items() if not k.startswith('adam.')}
    if start_epoch > cfg.epochs:
        logger.info(f"{checkpoint} already holds epoch {start_epoch - 1} of {cfg.epochs}; nothing to resume")
        return model, log

    logger.info(f"Resuming from {checkpoint} at epoch {start_epoch} (Adam step {adam_state.t})")
    log = _fit(model, dataset_batch(dataset, "train"), dataset_batch(dataset, "val"), cfg, out_dir,
               start_epoch=start_epoch, adam_state=adam_state, log=log)
    return model, log


def fine_tune(model: FeedbackModel, new_dataset: ChannelDataset, n_samples: int, cfg: TrainConfig,
              out_dir: Optional[Path] = None) -> Tuple[FeedbackModel, TrainLog]:
    """Continue training on ``n_samples`` groups drawn from the new training split"""
    if n_samples < 0:
        raise InvalidArgumentError(f"n_samples must be >= 0, got {n_samples}")
    if n_samples == 0:
        return model, TrainLog()
    train_batch = dataset_batch(new_dataset, "train")
    if n_samples > train_batch.size:
        raise InvalidArgumentError(f"n_samples={n_samples} exceeds the {train_batch.size} training groups "
                                   f"of the new dataset")
    subset = np.sort(keyed_rng(cfg.seed, STREAM_SUBSET).permutation(train_batch.size)[:n_samples])
    logger.info(f"Fine-tuning on {n_samples} of {train_batch.size} groups")
    log = _fit(model, train_batch.take(subset), dataset_batch(new_dataset, "val"), cfg, out_dir,
               label=f"finetune-{n_samples}")
    return model, log
