#training.py
"""
Training for the DeepFuse network

Unsupervised mode minimises 1 - MEF-SSIM of the fused patch against its two
exposures; supervised mode (the baseline) fits user-supplied targets with
L1, L2 or SSIM losses. Both share one loop: forward, loss, backward, Adam.
"""

import logging
import os
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from utils.errors import CheckpointError, CheckpointWriteError, ConfigurationError, InputError, NumericError
from utils.fusion import luminance_of
from utils.gradcore import AdamState, adam_step
from utils.image_io import read_image
from utils.manifest import ManifestEntry
from utils.mefssim import MefSsimConfig, SsimConfig, mef_ssim_loss_grad, ssim_with_grad
from utils.network import ArchConfig, NetworkParams, backward, forward, init_network, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

STATE_CHECKPOINT = "state.dfck"
STATE_OPTIMIZER = "state.npz"
BEST_CHECKPOINT = "best.dfck"


class LossKind(str, Enum):
    MEFSSIM = "mefssim"
    L1 = "l1"
    L2 = "l2"
    SSIM = "ssim"


@dataclass
class TrainConfig:
    patch_size: int = 64
    patches: int = 2000
    epochs: int = 20
    lr: float = 1e-4
    batch_size: int = 8
    loss: LossKind = LossKind.MEFSSIM
    seed: int = 0
    checkpoint_every: int = 1
    mefssim: MefSsimConfig = field(default_factory=MefSsimConfig)
    luminance_anchor: bool = True
    max_resample: int = 20
    progress: bool = True

    def __post_init__(self):
        try:
            self.loss = LossKind(self.loss)
        except ValueError:
            raise ConfigurationError(f"Unknown loss '{self.loss}'; choose from {[k.value for k in LossKind]}")
        if self.patch_size < 2:
            raise ConfigurationError(f"Patch size must be >= 2, got {self.patch_size}")
        if self.patches < 0 or self.epochs < 0:
            raise ConfigurationError("Patch and epoch counts must be non-negative")
        if self.lr < 0:
            raise ConfigurationError(f"Learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigurationError("Batch size and checkpoint cadence must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """
        Laptop-scale preset: 2000 patches of 32x32, 20 epochs, lr 1e-3

        Pair it with ArchConfig.desk(); the default layer plan at this patch
        count takes hours on a CPU.
        """
        return cls(**{"patches": 2000, "epochs": 20, "patch_size": 32, "lr": 1e-3, **overrides})

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        """Full-scale preset: 30000 patches of 64x64, 100 epochs, lr 1e-4"""
        return cls(**{"patches": 30000, "epochs": 100, "patch_size": 64, "lr": 1e-4, **overrides})

    def metric_config(self) -> MefSsimConfig:
        cfg = self.mefssim
        return MefSsimConfig(**{**asdict(cfg), "luminance": cfg.luminance or self.luminance_anchor})


@dataclass
class TrainingPair:
    """Registered luminance planes of one exposure pair"""

    under: np.ndarray
    over: np.ndarray
    image_id: str
    target: Optional[np.ndarray] = None


@dataclass
class PatchPair:
    under: np.ndarray
    over: np.ndarray
    source_id: str
    origin: Tuple[int, int]
    target: Optional[np.ndarray] = None

    @property
    def patch_id(self) -> str:
        return f"{self.source_id}@{self.origin[0]},{self.origin[1]}"


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    wall_time: float


def load_exposure_pairs(entries: Iterable[ManifestEntry], with_targets: bool = False) -> List[TrainingPair]:
    """
    Read manifest images and keep their luminance planes

    Raises:
        InputError: Unreadable images or mismatched sizes
        ConfigurationError: with_targets is set and an entry has no target
    """
    pairs = []
    for entry in entries:
        under, over = read_image(entry.under), read_image(entry.over)
        if under.shape[:2] != over.shape[:2]:
            raise InputError(f"Pair '{entry.tag}': {entry.under} and {entry.over} differ in size")
        target = None
        if entry.target is not None:
            target_rgb = read_image(entry.target)
            if target_rgb.shape[:2] != under.shape[:2]:
                raise InputError(f"Pair '{entry.tag}': target {entry.target} differs in size")
            target = luminance_of(target_rgb)
        elif with_targets:
            raise ConfigurationError(f"Pair '{entry.tag}' has no target image; supervised losses need one")
        pairs.append(TrainingPair(luminance_of(under), luminance_of(over), entry.tag, target))
    logger.info(f"Loaded {len(pairs)} exposure pairs")
    return pairs


def _is_flat(patch: np.ndarray) -> bool:
    return float(np.ptp(patch)) <= 1e-6


def build_patch_dataset(pairs: List[TrainingPair], cfg: TrainConfig) -> List[PatchPair]:
    """
    Sample cfg.patches random crops of cfg.patch_size pixels

    Crops flat in both exposures are redrawn up to cfg.max_resample times.

    Args:
        pairs: Registered luminance pairs
        cfg: Patch size, count and seed

    Returns:
        List of PatchPair

    Raises:
        ConfigurationError: Patches requested but no pair is large enough
    """
    if cfg.patches == 0:
        return []

    size = cfg.patch_size
    usable = []
    for pair in pairs:
        if pair.under.shape != pair.over.shape:
            raise InputError(f"Pair '{pair.image_id}' has mismatched exposure sizes")
        if min(pair.under.shape) < size:
            logger.warning(f"Skipping '{pair.image_id}': {pair.under.shape} is smaller than the {size}px patch")
            continue
        usable.append(pair)
    if not usable:
        raise ConfigurationError(f"No exposure pair is at least {size}x{size}; the patch dataset would be empty")

    rng = np.random.default_rng(cfg.seed)
    patches, exhausted = [], 0
    while len(patches) < cfg.patches:
        pair = usable[int(rng.integers(len(usable)))]
        height, width = pair.under.shape
        for _ in range(cfg.max_resample + 1):
            oy = int(rng.integers(0, height - size + 1))
            ox = int(rng.integers(0, width - size + 1))
            window = (slice(oy, oy + size), slice(ox, ox + size))
            under, over = pair.under[window], pair.over[window]
            if not (_is_flat(under) and _is_flat(over)):
                break
        else:
            exhausted += 1
        target = None if pair.target is None else pair.target[window].copy()
        patches.append(PatchPair(under.copy(), over.copy(), pair.image_id, (oy, ox), target))

    if exhausted:
        logger.warning(f"{exhausted} patches stayed flat after {cfg.max_resample} redraws and were kept")
    logger.info(f"Built {len(patches)} patches of {size}x{size} from {len(usable)} pairs")
    return patches


def supervised_loss(output: np.ndarray, target: np.ndarray, kind: LossKind) -> Tuple[float, np.ndarray]:
    """Loss between the network output and its target, with dLoss/dOutput"""
    kind = LossKind(kind)
    output = np.asarray(output, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    diff = output - target
    if kind is LossKind.L1:
        return float(np.abs(diff).mean()), np.sign(diff) / diff.size
    if kind is LossKind.L2:
        return float((diff * diff).mean()), 2.0 * diff / diff.size
    if kind is LossKind.SSIM:
        value, grad = ssim_with_grad(output, target, SsimConfig())
        return 1.0 - value, -grad
    raise ConfigurationError("MEF-SSIM is not a supervised loss")


def save_training_state(
    directory: Union[str, Path], params: NetworkParams, adam: AdamState, epoch: int, log: List[EpochRecord]
) -> None:
    """Network checkpoint plus optimizer moments, step, next epoch and the log so far"""
    directory = Path(directory)
    save_checkpoint(params, directory / STATE_CHECKPOINT)

    arrays = {"step": np.array(adam.step), "epoch": np.array(epoch)}
    for name in adam.first_moment:
        arrays[f"m/{name}"] = adam.first_moment[name]
        arrays[f"v/{name}"] = adam.second_moment[name]
    arrays["log"] = np.array([[r.epoch, r.mean_loss, r.wall_time] for r in log], dtype=np.float64).reshape(-1, 3)

    path = directory / STATE_OPTIMIZER
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise CheckpointWriteError(f"Could not write optimizer state {path}: {e}") from e


def load_training_state(directory: Union[str, Path]) -> Tuple[NetworkParams, AdamState, int, List[EpochRecord]]:
    directory = Path(directory)
    params = load_checkpoint(directory / STATE_CHECKPOINT)
    try:
        with np.load(directory / STATE_OPTIMIZER) as data:
            names = list(params.arrays())
            adam = AdamState(
                first_moment={n: data[f"m/{n}"] for n in names},
                second_moment={n: data[f"v/{n}"] for n in names},
                step=int(data["step"]),
            )
            epoch = int(data["epoch"])
            log = [EpochRecord(int(row[0]), float(row[1]), float(row[2])) for row in data["log"]]
    except (OSError, KeyError, ValueError) as e:
        raise CheckpointError(f"Could not read optimizer state in {directory}: {e}") from e
    logger.info(f"Resuming from {directory} at epoch {epoch} (step {adam.step})")
    return params, adam, epoch, log


def write_training_log(log: List[EpochRecord], path: Union[str, Path]) -> Path:
    """One JSON record per epoch: epoch, mean_loss, wall_time"""
    path = Path(path)
    frame = pd.DataFrame([asdict(r) for r in log], columns=["epoch", "mean_loss", "wall_time"])
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_json(path, orient="records", lines=True)
    return path


def _patch_loss(
    output: np.ndarray, patch: PatchPair, kind: LossKind, metric_cfg: MefSsimConfig
) -> Tuple[float, np.ndarray]:
    if kind is LossKind.MEFSSIM:
        return mef_ssim_loss_grad([patch.under, patch.over], output, metric_cfg)
    return supervised_loss(output, patch.target, kind)


def _fit(
    cfg: TrainConfig,
    dataset: List[PatchPair],
    arch: ArchConfig,
    resume_from: Optional[Union[str, Path]],
    checkpoint_dir: Optional[Union[str, Path]],
) -> Tuple[NetworkParams, List[EpochRecord]]:
    if not dataset:
        raise ConfigurationError("Training dataset is empty")
    smallest = min(min(p.under.shape) for p in dataset)
    if smallest < arch.receptive_field:
        raise ConfigurationError(
            f"Patch size {smallest} is below the network receptive field {arch.receptive_field}"
        )

    if resume_from is not None:
        params, adam, start_epoch, log = load_training_state(resume_from)
    else:
        params = init_network(arch)
        adam = AdamState.zeros_like(params.arrays())
        start_epoch, log = 0, []

    metric_cfg = cfg.metric_config()
    best_loss = min((r.mean_loss for r in log), default=np.inf)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    for epoch in range(start_epoch, cfg.epochs):
        started = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        losses = []
        batches = range(0, len(order), cfg.batch_size)
        for start in tqdm(batches, desc=f"Epoch {epoch + 1}/{cfg.epochs}", disable=not cfg.progress, leave=False):
            batch = order[start:start + cfg.batch_size]
            total = None
            for index in batch:
                patch = dataset[int(index)]
                output, cache = forward(params, patch.under, patch.over)
                loss, grad_output = _patch_loss(output, patch, cfg.loss, metric_cfg)
                if not np.isfinite(loss):
                    raise NumericError(
                        f"Loss became {loss} at step {adam.step}, patch {patch.patch_id}",
                        {"step": adam.step, "epoch": epoch, "patch": patch.patch_id},
                    )
                grads = backward(params, cache, grad_output)
                if total is None:
                    total = grads
                else:
                    for name in total:
                        total[name] = total[name] + grads[name]
                losses.append(loss)
            mean_grads = {name: g / len(batch) for name, g in total.items()}
            try:
                arrays, adam = adam_step(params.arrays(), mean_grads, adam, cfg.lr)
            except NumericError as e:
                e.context.update({"step": adam.step, "epoch": epoch, "patches": [dataset[int(i)].patch_id for i in batch]})
                raise
            params = params.replace_arrays(arrays)

        record = EpochRecord(epoch=epoch, mean_loss=float(np.mean(losses)), wall_time=time.perf_counter() - started)
        log.append(record)
        logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: mean loss {record.mean_loss:.6f} ({record.wall_time:.1f}s)")

        if checkpoint_dir is not None:
            if record.mean_loss < best_loss:
                best_loss = record.mean_loss
                save_checkpoint(params, checkpoint_dir / BEST_CHECKPOINT)
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                save_training_state(checkpoint_dir, params, adam, epoch + 1, log)

    return params, log


def train(
    cfg: TrainConfig,
    dataset: List[PatchPair],
    arch: ArchConfig,
    resume_from: Optional[Union[str, Path]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> Tuple[NetworkParams, List[EpochRecord]]:
    """
    Unsupervised training against the MEF-SSIM loss

    Args:
        cfg: Training configuration (cfg.loss must be mefssim)
        dataset: Patch pairs; targets are ignored
        arch: Architecture for a fresh network
        resume_from: Directory holding a saved training state
        checkpoint_dir: Where state and the best-loss checkpoint are written

    Returns:
        Tuple of (final parameters, one EpochRecord per epoch)

    Raises:
        ConfigurationError: Empty dataset or a supervised loss
        NumericError: A loss or gradient became non-finite
        CheckpointWriteError: A checkpoint could not be written
    """
    if cfg.loss is not LossKind.MEFSSIM:
        raise ConfigurationError(f"Loss '{cfg.loss.value}' needs targets; use train_supervised")
    return _fit(cfg, dataset, arch, resume_from, checkpoint_dir)


def train_supervised(
    cfg: TrainConfig,
    dataset: List[PatchPair],
    arch: ArchConfig,
    resume_from: Optional[Union[str, Path]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> Tuple[NetworkParams, List[EpochRecord]]:
    """Baseline training of the network output against target patches"""
    if cfg.loss is LossKind.MEFSSIM:
        raise ConfigurationError("Supervised training needs an l1, l2 or ssim loss")
    missing = [p.patch_id for p in dataset if p.target is None]
    if missing:
        raise ConfigurationError(f"{len(missing)} patches have no target (first: {missing[0]})")
    return _fit(cfg, dataset, arch, resume_from, checkpoint_dir)
