"""
Toy datasets: the two-dimensional swiss roll and binary heartbeat sequences.

Generators take an explicit numpy Generator or an integer seed, so the same
seed always yields the same data. Datasets are stored as numeric text
matrices with a one-line '#' header.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Literal, Optional, Tuple, Union

import numpy as np

from src.errors import InvalidArgumentError
from src.utils.formatters import load_matrix, save_matrix

logger = logging.getLogger(__name__)

SeedLike = Union[np.random.Generator, int, None]

HEARTBEAT_LENGTH = 20
HEARTBEAT_PERIOD = 5


@dataclass(frozen=True)
class Dataset:
    """
    An n x d data matrix with its provenance.

    ``factor`` is the standardization scale (continuous data only) and
    ``latent`` the generating variable of each row when known.
    """

    kind: Literal["continuous", "binary"]
    values: np.ndarray
    factor: Optional[float] = None
    metadata: Dict[str, object] = field(default_factory=dict)
    latent: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise InvalidArgumentError(f"dataset values must be a matrix, got shape {values.shape}")
        if self.kind == "binary" and not np.isin(values, (0.0, 1.0)).all():
            raise InvalidArgumentError("binary datasets hold only 0 and 1")
        if self.kind not in ("continuous", "binary"):
            raise InvalidArgumentError(f"unknown dataset kind {self.kind!r}")
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    @property
    def diffusion_kind(self) -> str:
        return "gaussian" if self.kind == "continuous" else "binomial"


def _rng(seed: SeedLike) -> Tuple[np.random.Generator, Optional[int]]:
    if isinstance(seed, np.random.Generator):
        return seed, None
    return np.random.default_rng(seed), seed


def pooled_variance(data: np.ndarray) -> float:
    """Mean squared deviation from the column means, over all entries."""
    data = np.asarray(data, dtype=np.float64)
    return float(np.mean((data - data.mean(axis=0)) ** 2))


def standardize(data: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    Scale data by one constant so its pooled variance is 1.

    The mean is not subtracted.

    Args:
        data: continuous data [n, d]

    Returns:
        (data / s, s)
    """
    variance = pooled_variance(data)
    if not variance > 0.0:
        raise InvalidArgumentError("cannot standardize data with zero variance")
    factor = math.sqrt(variance)
    return np.asarray(data, dtype=np.float64) / factor, factor


def swiss_roll(n: int, rng: SeedLike = None, jitter: float = 0.01, turns: float = 1.5) -> Dataset:
    """
    Points on a planar spiral whose radius equals the angle.

    Args:
        n: number of points
        rng: generator or seed
        jitter: Gaussian noise scale in the units of the unscaled spiral
                (radius 1.5 pi to 4.5 pi for 1.5 turns)
        turns: angular extent of the spiral

    Returns:
        Standardized continuous Dataset; ``latent`` holds the angle
    """
    if n < 1:
        raise InvalidArgumentError(f"n must be positive, got {n}")
    generator, seed = _rng(rng)
    start = 1.5 * math.pi
    stop = start + 2.0 * math.pi * turns
    theta = start + (stop - start) * generator.random(n)
    raw = np.column_stack([theta * np.cos(theta), theta * np.sin(theta)])
    raw = raw + jitter * generator.standard_normal(raw.shape)
    values, factor = standardize(raw)
    metadata = {"generator": "swiss_roll", "seed": seed, "n": n, "jitter": jitter, "turns": turns}
    logger.debug("swiss roll: %d points, factor %.6f", n, factor)
    return Dataset(kind="continuous", values=values, factor=factor, metadata=metadata, latent=theta)


def heartbeat(n: int, rng: SeedLike = None) -> Dataset:
    """
    Binary sequences of length 20 with a 1 in every 5th bin.

    The phase of the first pulse is uniform over the first five bins, so the
    data has five equally likely sequences (log2(1/5) bits each).
    """
    if n < 1:
        raise InvalidArgumentError(f"n must be positive, got {n}")
    generator, seed = _rng(rng)
    phase = generator.integers(0, HEARTBEAT_PERIOD, size=n)
    values = np.zeros((n, HEARTBEAT_LENGTH))
    columns = phase[:, None] + HEARTBEAT_PERIOD * np.arange(HEARTBEAT_LENGTH // HEARTBEAT_PERIOD)
    np.put_along_axis(values, columns, 1.0, axis=1)
    metadata = {"generator": "heartbeat", "seed": seed, "n": n}
    return Dataset(kind="binary", values=values, metadata=metadata, latent=phase.astype(np.float64))


def is_heartbeat(values: np.ndarray) -> np.ndarray:
    """Per row: is it one of the five pulse-every-5 sequences."""
    values = np.asarray(values)
    if values.ndim == 1:
        values = values[None, :]
    if values.shape[1] != HEARTBEAT_LENGTH:
        return np.zeros(values.shape[0], dtype=bool)
    patterns = heartbeat_patterns()
    return (values[:, None, :] == patterns[None, :, :]).all(axis=2).any(axis=1)


def heartbeat_patterns() -> np.ndarray:
    """The five distinct heartbeat sequences, one per phase."""
    patterns = np.zeros((HEARTBEAT_PERIOD, HEARTBEAT_LENGTH))
    for phase in range(HEARTBEAT_PERIOD):
        patterns[phase, phase::HEARTBEAT_PERIOD] = 1.0
    return patterns


GENERATORS = {"swiss_roll": swiss_roll, "heartbeat": heartbeat}


def generate(name: str, n: int, seed: SeedLike = None) -> Dataset:
    """Run a generator by name."""
    try:
        generator = GENERATORS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown dataset {name!r}; choose from {', '.join(sorted(GENERATORS))}")
    return generator(n, seed)


def split(dataset: Dataset, holdout: int, rng: np.random.Generator) -> Tuple[Dataset, Dataset]:
    """Random (train, holdout) partition; the holdout has ``holdout`` rows."""
    if not 0 <= holdout < dataset.n:
        raise InvalidArgumentError(f"holdout size {holdout} must lie in [0, {dataset.n})")
    order = rng.permutation(dataset.n)
    parts = []
    for index in (order[holdout:], order[:holdout]):
        latent = None if dataset.latent is None else dataset.latent[index]
        parts.append(replace(dataset, values=dataset.values[index], latent=latent,
                             metadata={**dataset.metadata, "n": int(index.size)}))
    return parts[0], parts[1]


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def save_dataset(path: Path, dataset: Dataset) -> None:
    """Write values with a header line 'kind=... n=... d=... seed=... factor=...'."""
    header = {
        "kind": dataset.kind,
        "n": dataset.n,
        "d": dataset.dim,
        "seed": dataset.metadata.get("seed"),
        "factor": repr(float(dataset.factor)) if dataset.factor is not None else None,
        "generator": dataset.metadata.get("generator"),
    }
    save_matrix(path, dataset.values, header=" ".join(f"{k}={'none' if v is None else v}" for k, v in header.items()))


def load_dataset(path: Path) -> Dataset:
    """
    Read a dataset file.

    A plain matrix without a header is accepted: it is binary when every
    entry is 0 or 1 and continuous otherwise.
    """
    values, header = load_matrix(path)
    fields = dict(item.split("=", 1) for item in header.split() if "=" in item)
    kind = fields.get("kind") or ("binary" if np.isin(values, (0.0, 1.0)).all() else "continuous")
    if "n" in fields and int(fields["n"]) != values.shape[0]:
        raise InvalidArgumentError(f"{path}: header says n={fields['n']}, file holds {values.shape[0]} rows")
    factor = fields.get("factor", "none")
    seed = fields.get("seed", "none")
    metadata = {
        "generator": None if fields.get("generator", "none") == "none" else fields["generator"],
        "seed": None if seed == "none" else int(seed),
        "n": int(values.shape[0]),
        "source": str(path),
    }
    return Dataset(kind=kind, values=values, factor=None if factor == "none" else float(factor), metadata=metadata)
