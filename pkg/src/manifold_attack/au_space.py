"""Action-unit vector space: validation, expression presets, sampling, interpolation.

An AU vector encodes a facial expression as per-muscle-region intensities in
[0, 1]. The default layout follows the 17-unit FACS subset commonly used for
expression editing; components beyond an index listed below are free capacity
with no preset activation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyLabelPool, OutOfRange, UnknownExpression

DEFAULT_AU_DIM = 17

# Component roles for the default 17-unit layout (FACS action units).
AU_INNER_BROW_RAISER = 0    # AU1
AU_OUTER_BROW_RAISER = 1    # AU2
AU_BROW_LOWERER = 2         # AU4
AU_UPPER_LID_RAISER = 3     # AU5
AU_CHEEK_RAISER = 4         # AU6
AU_LID_TIGHTENER = 5        # AU7
AU_NOSE_WRINKLER = 6        # AU9
AU_UPPER_LIP_RAISER = 7     # AU10
AU_LIP_CORNER_PULLER = 8    # AU12
AU_DIMPLER = 9              # AU14
AU_LIP_CORNER_DEPRESSOR = 10  # AU15
AU_CHIN_RAISER = 11         # AU17
AU_LIP_STRETCHER = 12       # AU20
AU_LIP_TIGHTENER = 13       # AU23
AU_LIPS_PART = 14           # AU25
AU_JAW_DROP = 15            # AU26
AU_BLINK = 16               # AU45

# Sparse activation patterns per expression, authored jointly with the toy
# renderer so every preset has a ground-truth rendering. Components with index
# >= the configured dimension are dropped when the table is built.
_PRESET_ACTIVATIONS = {
    "neutral": {},
    "happy": {AU_CHEEK_RAISER: 0.75, AU_LIP_CORNER_PULLER: 0.9, AU_LIPS_PART: 0.45},
    "sad": {AU_INNER_BROW_RAISER: 0.7, AU_BROW_LOWERER: 0.5, AU_LIP_CORNER_DEPRESSOR: 0.8},
    "surprised": {
        AU_INNER_BROW_RAISER: 0.8,
        AU_OUTER_BROW_RAISER: 0.85,
        AU_UPPER_LID_RAISER: 0.9,
        AU_LIPS_PART: 0.6,
        AU_JAW_DROP: 0.75,
    },
    "angry": {
        AU_BROW_LOWERER: 0.9,
        AU_UPPER_LID_RAISER: 0.55,
        AU_LID_TIGHTENER: 0.5,
        AU_LIP_TIGHTENER: 0.7,
    },
    "disgusted": {
        AU_NOSE_WRINKLER: 0.9,
        AU_UPPER_LIP_RAISER: 0.65,
        AU_LIP_CORNER_DEPRESSOR: 0.45,
        AU_LIPS_PART: 0.3,
    },
    "fearful": {
        AU_INNER_BROW_RAISER: 0.65,
        AU_OUTER_BROW_RAISER: 0.55,
        AU_BROW_LOWERER: 0.4,
        AU_UPPER_LID_RAISER: 0.8,
        AU_LIP_STRETCHER: 0.6,
        AU_LIPS_PART: 0.45,
        AU_JAW_DROP: 0.35,
    },
    "contemptuous": {AU_LIP_CORNER_PULLER: 0.35, AU_DIMPLER: 0.8, AU_LIP_TIGHTENER: 0.4},
}

STATE_SET_EXPRESSIONS = (
    "angry", "contemptuous", "disgusted", "fearful", "happy", "sad", "surprised",
)
PRESET_NAMES = ("neutral",) + STATE_SET_EXPRESSIONS

SAMPLING_MODES = ("dataset-empirical", "uniform-box")


@dataclass(frozen=True)
class AUVector:
    """Validated expression code: length-N float array, every component in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dimension(self) -> int:
        return self.values.shape[0]

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, AUVector):
            return NotImplemented
        return np.array_equal(self.values, other.values)


def _build_preset_table(dimension: int) -> dict:
    table = {}
    for name in PRESET_NAMES:
        vec = np.zeros(dimension, dtype=np.float64)
        for idx, value in _PRESET_ACTIVATIONS[name].items():
            if idx < dimension:
                vec[idx] = value
        table[name] = AUVector(vec)
    return table


@dataclass
class AUSpaceConfig:
    """Configuration of the AU vector space for one run."""

    dimension: int = DEFAULT_AU_DIM
    preset_table: dict = field(default_factory=dict)
    sampling_mode: str = "dataset-empirical"
    sampling_noise_sigma: float = 0.05

    def __post_init__(self):
        if self.dimension < 1:
            raise OutOfRange(f"AU dimension must be >= 1, got {self.dimension}")
        if self.sampling_mode not in SAMPLING_MODES:
            raise OutOfRange(
                f"sampling_mode must be one of {SAMPLING_MODES}, got {self.sampling_mode!r}"
            )
        if not self.preset_table:
            self.preset_table = _build_preset_table(self.dimension)
        missing = [n for n in PRESET_NAMES if n not in self.preset_table]
        if missing:
            raise UnknownExpression(f"preset table missing required names: {missing}")
        for name, vec in self.preset_table.items():
            if not isinstance(vec, AUVector):
                self.preset_table[name] = vec = validate_au(vec, _DimOnly(self.dimension))
            if vec.dimension != self.dimension:
                raise DimensionMismatch(
                    f"preset {name!r} has dimension {vec.dimension}, expected {self.dimension}"
                )


class _DimOnly:
    """Minimal stand-in so validate_au can run before a config fully exists."""

    def __init__(self, dimension):
        self.dimension = dimension


def validate_au(raw, config) -> AUVector:
    """Check length and [0, 1] bounds of a raw sequence, returning an AUVector."""
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != config.dimension:
        raise DimensionMismatch(
            f"expected length-{config.dimension} vector, got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise OutOfRange("AU vector contains non-finite components")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise OutOfRange(f"AU components must lie in [0, 1], got min={arr.min()} max={arr.max()}")
    return AUVector(arr)


def preset(name: str, config: AUSpaceConfig) -> AUVector:
    """Look up a named expression in the preset table."""
    try:
        return config.preset_table[name]
    except KeyError:
        raise UnknownExpression(
            f"unknown expression {name!r}; known: {sorted(config.preset_table)}"
        ) from None


def sample_au(config: AUSpaceConfig, dataset_labels=None, rng=None) -> AUVector:
    """Draw a random AU vector.

    uniform-box mode draws independent uniforms per component. dataset-empirical
    mode picks one dataset label and perturbs it with Gaussian noise clipped to
    the box, which keeps samples near anatomically plausible codes.
    """
    rng = np.random.default_rng() if rng is None else rng
    if config.sampling_mode == "uniform-box":
        return AUVector(rng.uniform(0.0, 1.0, size=config.dimension))
    if not dataset_labels:
        raise EmptyLabelPool("dataset-empirical sampling requires a nonempty label pool")
    idx = int(rng.integers(len(dataset_labels)))
    base = dataset_labels[idx]
    base_arr = base.as_array() if isinstance(base, AUVector) else np.asarray(base, dtype=np.float64)
    noisy = base_arr + rng.normal(0.0, config.sampling_noise_sigma, size=config.dimension)
    return AUVector(np.clip(noisy, 0.0, 1.0))


def interpolate(a: AUVector, b: AUVector, t: float) -> AUVector:
    """Componentwise (1-t)*a + t*b on the AU box."""
    if a.dimension != b.dimension:
        raise DimensionMismatch(f"dimensions differ: {a.dimension} vs {b.dimension}")
    if not (0.0 <= t <= 1.0):
        raise OutOfRange(f"interpolation parameter must lie in [0, 1], got {t}")
    return AUVector((1.0 - t) * a.values + t * b.values)


def save_preset_table(config: AUSpaceConfig, path) -> None:
    """Write the preset table as CSV rows: name, au_1, ..., au_N."""
    with open(path, "w", encoding="utf-8") as fh:
        for name in sorted(config.preset_table):
            vec = config.preset_table[name]
            fh.write(",".join([name] + [f"{v:.6g}" for v in vec.values]) + "\n")


def load_preset_table(path, dimension: int) -> dict:
    """Read a preset table written by save_preset_table."""
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            name, rest = parts[0], parts[1:]
            if len(rest) != dimension:
                raise DimensionMismatch(
                    f"preset {name!r} row has {len(rest)} components, expected {dimension}"
                )
            table[name] = validate_au([float(v) for v in rest], _DimOnly(dimension))
    return table
