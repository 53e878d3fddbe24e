"""Synthetic multipath channels for groups of nearby users.

Spatial channels follow the ULA multipath model; the angular representation
is the unitary 2-D DFT of the spatial matrix. Each group shares one base
path set and the other users see small perturbations of it.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config.settings import get_config
from core.exceptions import FormatError, InvalidArgumentError, MissingArtifactError, UnsupportedVersionError
from utils.file_parser import BinaryReader, BinaryWriter
from utils.rng import STREAM_CHANNEL, STREAM_SPLIT, keyed_rng
from utils.validators import require_non_negative, require_positive, require_positive_int, require_seed

logger = logging.getLogger(__name__)

HALF_PI = math.pi / 2
# float32 rounding can push a clamped angle just past pi/2
ANGLE_TOLERANCE = 1e-6

DATASET_MAGIC = b"COCD"
DATASET_VERSION = 1
# v1 has no spacing field; files always describe half-wavelength arrays
DATASET_SPACING_RATIO = 0.5
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class ArrayGeometry:
    n_tx: int = 32
    n_rx: int = 1
    spacing_ratio: float = 0.5

    def __post_init__(self):
        require_positive_int("n_tx", self.n_tx)
        require_positive_int("n_rx", self.n_rx)
        require_positive("spacing_ratio", self.spacing_ratio)

    @property
    def n_dims(self) -> int:
        return self.n_rx * self.n_tx

    @property
    def shape(self) -> Tuple[int, int]:
        return self.n_rx, self.n_tx


@dataclass(frozen=True, eq=False)
class PathSet:
    """Per-path complex gains and departure/arrival angles (radians)"""
    gains: np.ndarray
    aod: np.ndarray
    aoa: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'gains', np.asarray(self.gains, dtype=np.complex128).reshape(-1))
        object.__setattr__(self, 'aod', np.asarray(self.aod, dtype=np.float64).reshape(-1))
        object.__setattr__(self, 'aoa', np.asarray(self.aoa, dtype=np.float64).reshape(-1))
        if not (self.gains.size == self.aod.size == self.aoa.size):
            raise InvalidArgumentError(f"path lists differ in length: gains={self.gains.size}, "
                                       f"aod={self.aod.size}, aoa={self.aoa.size}")

    @property
    def n_paths(self) -> int:
        return int(self.gains.size)

    def check_angles(self) -> None:
        for name, angles in (('aod', self.aod), ('aoa', self.aoa)):
            if angles.size and np.max(np.abs(angles)) > HALF_PI + ANGLE_TOLERANCE:
                raise InvalidArgumentError(f"{name} outside [-pi/2, pi/2]: max |angle| = {np.max(np.abs(angles))}")

    def __add__(self, delta: "PathSet") -> "PathSet":
        return PathSet(self.gains + delta.gains, self.aod + delta.aod, self.aoa + delta.aoa)

    def __sub__(self, other: "PathSet") -> "PathSet":
        return PathSet(self.gains - other.gains, self.aod - other.aod, self.aoa - other.aoa)

    def rounded(self) -> "PathSet":
        """Round every field to single precision (the on-disk precision)"""
        return PathSet(self.gains.astype(np.complex64), self.aod.astype(np.float32), self.aoa.astype(np.float32))

    def equals(self, other: "PathSet") -> bool:
        return (np.array_equal(self.gains, other.gains) and np.array_equal(self.aod, other.aod)
                and np.array_equal(self.aoa, other.aoa))


@dataclass(frozen=True)
class PerturbSpec:
    angle_jitter_max: float = 0.035
    gain_jitter_std: float = 0.1

    def __post_init__(self):
        require_non_negative("angle_jitter_max", self.angle_jitter_max)
        require_non_negative("gain_jitter_std", self.gain_jitter_std)


@dataclass(frozen=True, eq=False)
class AngularChannelSample:
    spatial: np.ndarray
    angular: np.ndarray
    magnitude: np.ndarray
    phase: np.ndarray
    mag_scale: float = 1.0

    def with_scale(self, mag_scale: float) -> "AngularChannelSample":
        """Same channel with magnitudes divided by ``mag_scale``"""
        require_positive("mag_scale", mag_scale)
        return replace(self, magnitude=np.abs(self.angular) / mag_scale, mag_scale=float(mag_scale))

    def equals(self, other: "AngularChannelSample") -> bool:
        return (np.array_equal(self.spatial, other.spatial) and np.array_equal(self.angular, other.angular)
                and np.array_equal(self.magnitude, other.magnitude) and np.array_equal(self.phase, other.phase)
                and self.mag_scale == other.mag_scale)


@dataclass(frozen=True, eq=False)
class UEGroup:
    users: List[AngularChannelSample]
    base_paths: PathSet
    perturbations: List[PathSet]
    user_paths: List[PathSet]

    @property
    def size(self) -> int:
        return len(self.users)

    def equals(self, other: "UEGroup") -> bool:
        return (self.size == other.size and self.base_paths.equals(other.base_paths)
                and all(a.equals(b) for a, b in zip(self.users, other.users))
                and all(a.equals(b) for a, b in zip(self.perturbations, other.perturbations))
                and all(a.equals(b) for a, b in zip(self.user_paths, other.user_paths)))


@dataclass(frozen=True)
class DatasetConfig:
    geometry: ArrayGeometry = field(default_factory=ArrayGeometry)
    n_paths: int = 3
    n_groups: int = 5000
    users_per_group: int = 2
    jitter: PerturbSpec = field(default_factory=PerturbSpec)
    seed: int = 0
    aod_range: Tuple[float, float] = (-HALF_PI, HALF_PI)
    split_fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        require_positive_int("n_paths", self.n_paths)
        require_positive_int("n_groups", self.n_groups)
        require_seed("seed", self.seed)
        low, high = self.aod_range
        if not -HALF_PI <= low <= high <= HALF_PI:
            raise InvalidArgumentError(f"aod_range must satisfy -pi/2 <= low <= high <= pi/2, got {self.aod_range}")


@dataclass(eq=False)
class ChannelDataset:
    """Immutable collection of user groups with a train/val/test split"""
    groups: List[UEGroup]
    geometry: ArrayGeometry
    n_paths: int
    split: Tuple[Tuple[int, ...], Tuple[int, ...], Tuple[int, ...]]
    seed: int
    mag_scale: float

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def users_per_group(self) -> int:
        return self.groups[0].size if self.groups else 0

    def split_indices(self, name: str) -> Tuple[int, ...]:
        if name not in SPLIT_NAMES:
            raise InvalidArgumentError(f"unknown split {name!r}; expected one of {', '.join(SPLIT_NAMES)}")
        return self.split[SPLIT_NAMES.index(name)]

    def equals(self, other: "ChannelDataset") -> bool:
        return (self.geometry == other.geometry and self.n_paths == other.n_paths
                and self.split == other.split and self.seed == other.seed
                and self.mag_scale == other.mag_scale and self.n_groups == other.n_groups
                and all(a.equals(b) for a, b in zip(self.groups, other.groups)))


# Channel synthesis
def steering_vector(angle: float, n: int, spacing_ratio: float = 0.5) -> np.ndarray:
    """ULA response with unit 2-norm: element m is exp(-j 2 pi d/lambda m sin(angle)) / sqrt(n)"""
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidArgumentError(f"antenna count must be >= 1, got {n!r}")
    m = np.arange(n)
    return np.exp(-2j * np.pi * spacing_ratio * m * np.sin(angle)) / np.sqrt(n)


def _steering_matrix(angles: np.ndarray, n: int, spacing_ratio: float) -> np.ndarray:
    m = np.arange(n)[:, None]
    return np.exp(-2j * np.pi * spacing_ratio * m * np.sin(angles)[None, :]) / np.sqrt(n)


def synth_channel(paths: PathSet, geom: ArrayGeometry) -> np.ndarray:
    """Spatial channel sqrt(N_r N_t / N_c) * sum_l g_l a_r(aoa_l) a_t(aod_l)^H"""
    if paths.n_paths == 0:
        raise InvalidArgumentError("path set is empty")
    paths.check_angles()
    receive = _steering_matrix(paths.aoa, geom.n_rx, geom.spacing_ratio)
    transmit = _steering_matrix(paths.aod, geom.n_tx, geom.spacing_ratio)
    scale = np.sqrt(geom.n_rx * geom.n_tx / paths.n_paths)
    return scale * (receive * paths.gains[None, :]) @ transmit.conj().T


def to_angular(spatial: np.ndarray, geom: ArrayGeometry) -> AngularChannelSample:
    """Unitary 2-D DFT of ``spatial``; magnitudes are left unnormalized (scale 1)"""
    spatial = np.asarray(spatial)
    if spatial.shape != geom.shape:
        raise InvalidArgumentError(f"spatial matrix has shape {spatial.shape}, geometry needs {geom.shape}")
    angular = np.fft.fft2(spatial.astype(np.complex128), norm="ortho")
    phase = np.angle(angular)
    phase = np.where(phase <= -np.pi, phase + 2 * np.pi, phase)
    return AngularChannelSample(spatial=spatial, angular=angular, magnitude=np.abs(angular),
                                phase=phase, mag_scale=1.0)


def perturb_paths(base: PathSet, jitter: PerturbSpec, rng: np.random.Generator) -> PathSet:
    """Jitter every angle uniformly (then clamp) and every gain by complex Gaussian noise"""
    n = base.n_paths
    limit = jitter.angle_jitter_max
    aod = np.clip(base.aod + rng.uniform(-limit, limit, n), -HALF_PI, HALF_PI)
    aoa = np.clip(base.aoa + rng.uniform(-limit, limit, n), -HALF_PI, HALF_PI)
    noise = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * (jitter.gain_jitter_std / np.sqrt(2.0))
    return PathSet(base.gains + noise, aod, aoa)


def sample_base_paths(n_paths: int, rng: np.random.Generator,
                      aod_range: Tuple[float, float] = (-HALF_PI, HALF_PI)) -> PathSet:
    gains = (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)) / np.sqrt(2.0)
    aoa = rng.uniform(-HALF_PI, HALF_PI, n_paths)
    aod = rng.uniform(aod_range[0], aod_range[1], n_paths)
    return PathSet(gains, aod, aoa)


def _make_sample(paths: PathSet, geom: ArrayGeometry) -> AngularChannelSample:
    spatial = synth_channel(paths, geom).astype(np.complex64)
    return to_angular(spatial, geom)


def _build_group(base: PathSet, user_paths: Sequence[PathSet], geom: ArrayGeometry) -> UEGroup:
    return UEGroup(users=[_make_sample(p, geom) for p in user_paths],
                   base_paths=base,
                   perturbations=[p - base for p in user_paths],
                   user_paths=list(user_paths))


def generate_group(cfg: DatasetConfig, index: int) -> UEGroup:
    """Group ``index`` of the dataset; depends only on (seed, index)"""
    rng = keyed_rng(cfg.seed, STREAM_CHANNEL, index)
    base = sample_base_paths(cfg.n_paths, rng, cfg.aod_range).rounded()
    user_paths = [base]
    for user in range(1, cfg.users_per_group):
        user_rng = keyed_rng(cfg.seed, STREAM_CHANNEL, index, user)
        user_paths.append(perturb_paths(base, cfg.jitter, user_rng).rounded())
    return _build_group(base, user_paths, cfg.geometry)


def split_groups(n_groups: int, seed: int,
                 fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2)) -> Tuple[Tuple[int, ...], ...]:
    """Keyed permutation cut into sorted train/val/test index lists"""
    order = keyed_rng(seed, STREAM_SPLIT).permutation(n_groups)
    n_train = max(1, int(round(fractions[0] * n_groups)))
    n_val = min(int(round(fractions[1] * n_groups)), n_groups - n_train)
    train = tuple(sorted(int(i) for i in order[:n_train]))
    val = tuple(sorted(int(i) for i in order[n_train:n_train + n_val]))
    test = tuple(sorted(int(i) for i in order[n_train + n_val:]))
    return train, val, test


def _training_scale(groups: Sequence[UEGroup], train: Sequence[int]) -> float:
    peak = max((float(np.max(np.abs(u.angular))) for i in train for u in groups[i].users), default=0.0)
    return peak if peak > 0 else 1.0


def normalize_dataset(ds: ChannelDataset, mag_scale: float) -> ChannelDataset:
    """Copy of ``ds`` with every magnitude plane divided by ``mag_scale``"""
    groups = [replace(g, users=[u.with_scale(mag_scale) for u in g.users]) for g in ds.groups]
    return replace(ds, groups=groups, mag_scale=float(mag_scale))


def generate_dataset(cfg: DatasetConfig, threads: Optional[int] = None) -> ChannelDataset:
    """Generate ``cfg.n_groups`` correlated user groups and split them 70/10/20.

    Output is independent of ``threads``: each group draws from its own keyed stream.
    """
    if cfg.users_per_group < 1:
        raise InvalidArgumentError(f"users_per_group must be >= 1, got {cfg.users_per_group}")
    threads = threads or get_config().THREADS
    logger.info(f"Generating {cfg.n_groups} groups of {cfg.users_per_group} users "
                f"(N_r={cfg.geometry.n_rx}, N_t={cfg.geometry.n_tx}, N_c={cfg.n_paths}, seed={cfg.seed})")

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        groups = list(pool.map(lambda g: generate_group(cfg, g), range(cfg.n_groups)))

    split = split_groups(cfg.n_groups, cfg.seed, cfg.split_fractions)
    mag_scale = _training_scale(groups, split[0])
    dataset = ChannelDataset(groups=groups, geometry=cfg.geometry, n_paths=cfg.n_paths,
                             split=split, seed=cfg.seed, mag_scale=1.0)
    dataset = normalize_dataset(dataset, mag_scale)
    logger.info(f"Dataset ready: train={len(split[0])}, val={len(split[1])}, test={len(split[2])}, "
                f"mag_scale={mag_scale:.6g}")
    return dataset


def dataset_planes(ds: ChannelDataset, split: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack (magnitude, phase, angular) of a split as (n, K, N_r, N_t) arrays"""
    indices = ds.split_indices(split)
    shape = (len(indices), ds.users_per_group) + ds.geometry.shape
    magnitude = np.zeros(shape, dtype=np.float64)
    phase = np.zeros(shape, dtype=np.float64)
    angular = np.zeros(shape, dtype=np.complex128)
    for row, index in enumerate(indices):
        for k, user in enumerate(ds.groups[index].users):
            magnitude[row, k] = user.magnitude
            phase[row, k] = user.phase
            angular[row, k] = user.angular
    return magnitude, phase, angular


def mean_user_similarity(ds: ChannelDataset, users: Tuple[int, int] = (0, 1)) -> float:
    """Mean cosine similarity between two users' magnitude planes over all groups"""
    a, b = users
    if ds.users_per_group <= max(a, b):
        raise InvalidArgumentError(f"dataset has {ds.users_per_group} users per group; need user {max(a, b)}")
    scores = []
    for group in ds.groups:
        x = group.users[a].magnitude.reshape(-1)
        y = group.users[b].magnitude.reshape(-1)
        denom = np.linalg.norm(x) * np.linalg.norm(y)
        scores.append(float(x @ y / denom) if denom > 0 else 1.0)
    return float(np.mean(scores))


# Persistence
def encode_dataset(ds: ChannelDataset) -> bytes:
    geom = ds.geometry
    if geom.spacing_ratio != DATASET_SPACING_RATIO:
        raise InvalidArgumentError(f"spacing_ratio {geom.spacing_ratio} cannot be stored; dataset files hold "
                                   f"{DATASET_SPACING_RATIO}-spaced arrays only")
    require_seed("seed", ds.seed)
    writer = BinaryWriter()
    writer.write_bytes(DATASET_MAGIC)
    writer.write('H', DATASET_VERSION)
    writer.write('5I', ds.n_groups, ds.users_per_group, geom.n_rx, geom.n_tx, ds.n_paths)
    writer.write('d', ds.mag_scale)
    writer.write('Q', int(ds.seed))
    for group in ds.groups:
        for user, paths in zip(group.users, group.user_paths):
            spatial = np.asarray(user.spatial, dtype=np.complex64)
            writer.write_array(spatial.view(np.float32).reshape(-1), '<f4')
            records = np.stack([paths.gains.real, paths.gains.imag, paths.aoa, paths.aod], axis=1)
            writer.write_array(records.reshape(-1), '<f4')
    for indices in ds.split:
        writer.write('I', len(indices))
        writer.write_array(np.asarray(indices, dtype=np.uint32), '<u4')
    return writer.getvalue()


def decode_dataset(data: bytes) -> ChannelDataset:
    reader = BinaryReader(data)
    magic = reader.read_bytes(4)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}", offset=0)
    version = reader.read_one('H')
    if version != DATASET_VERSION:
        raise UnsupportedVersionError(f"dataset version {version} (supported {DATASET_VERSION})", offset=4)
    n_groups, users, n_rx, n_tx, n_paths = reader.read('5I')
    if min(users, n_rx, n_tx, n_paths) < 1:
        raise FormatError("dataset header has a zero dimension", offset=6)
    mag_scale = reader.read_one('d')
    seed = reader.read_one('Q')

    raw_groups = []
    for _ in range(n_groups):
        spatials, path_sets = [], []
        for _ in range(users):
            flat = reader.read_array('<f4', 2 * n_rx * n_tx)
            spatials.append(flat.view(np.complex64).reshape(n_rx, n_tx))
            records = reader.read_array('<f4', 4 * n_paths).reshape(n_paths, 4).astype(np.float64)
            path_sets.append(PathSet(records[:, 0] + 1j * records[:, 1], records[:, 3], records[:, 2]))
        raw_groups.append((spatials, path_sets))

    split = []
    for name in SPLIT_NAMES:
        offset = reader.offset
        count = reader.read_one('I')
        indices = reader.read_array('<u4', count)
        if count and int(indices.max()) >= n_groups:
            raise FormatError(f"{name} split index out of range", offset=offset)
        split.append(tuple(int(i) for i in indices))
    if reader.remaining():
        raise FormatError(f"{reader.remaining()} trailing bytes", offset=reader.offset)

    geom = ArrayGeometry(n_tx=n_tx, n_rx=n_rx, spacing_ratio=DATASET_SPACING_RATIO)
    groups = []
    for spatials, path_sets in raw_groups:
        base = path_sets[0]
        groups.append(UEGroup(users=[to_angular(s, geom).with_scale(mag_scale) for s in spatials],
                              base_paths=base,
                              perturbations=[p - base for p in path_sets],
                              user_paths=path_sets))
    return ChannelDataset(groups=groups, geometry=geom, n_paths=n_paths,
                          split=tuple(split), seed=seed, mag_scale=mag_scale)


def save_dataset(ds: ChannelDataset, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_dataset(ds))
    logger.info(f"Saved dataset {path} ({ds.n_groups} groups)")
    return path


def load_dataset(path: Path) -> ChannelDataset:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError("dataset", str(path))
    return decode_dataset(path.read_bytes())
