"""Redundancy analysis over logged block features.

All analyses are pure functions of a feature log: per-block distances
between adjacent steps, step-by-step cosine similarity of one block's
features, structural similarity of clean-data predictions, and principal
component projections for plot-ready output.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CompletenessError, ConfigError, DimensionError
from .diffusion import FullExecutor, NoiseSchedule, SamplerPlan, sample
from .model import BlockFeature, Model
from .rng import RngStream
from .tensor_io import tensor_bytes, tensor_from_bytes

_U64 = np.dtype("<u8")


@dataclass
class FeatureLog:
    """Tapped block features keyed by (step index, block index).

    On disk: unsigned 64-bit manifest length, JSON manifest with one entry
    per record ({step_index, train_timestep, block_index}), then the
    feature tensors as binary dumps in manifest order.
    """

    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._records: dict[tuple[int, int], np.ndarray] = {}
        self._timesteps: dict[int, int] = {}

    def add(self, step_index: int, train_timestep: int, feature: BlockFeature) -> None:
        self._records[(step_index, feature.block_index)] = np.asarray(
            feature.values, dtype=np.float64
        )
        self._timesteps[step_index] = int(train_timestep)

    def get(self, step_index: int, block_index: int) -> np.ndarray:
        key = (step_index, block_index)
        if key not in self._records:
            raise CompletenessError(f"no record for step {step_index}, block {block_index}")
        return self._records[key]

    def steps(self) -> list[int]:
        return sorted({s for s, _ in self._records})

    def blocks(self) -> list[int]:
        return sorted({b for _, b in self._records})

    def train_timestep(self, step_index: int) -> int:
        return self._timesteps[step_index]

    def __len__(self) -> int:
        return len(self._records)

    def to_bytes(self) -> bytes:
        keys = sorted(self._records)
        manifest = {
            "meta": self.meta,
            "records": [
                {"step_index": s, "train_timestep": self._timesteps[s], "block_index": b}
                for s, b in keys
            ],
        }
        mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
        head = np.array([len(mbytes)], dtype=_U64).tobytes()
        body = b"".join(tensor_bytes(self._records[k]) for k in keys)
        return head + mbytes + body

    def save(self, path) -> None:
        try:
            Path(path).write_bytes(self.to_bytes())
        except OSError as exc:
            raise IOError(f"cannot write feature log to {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "FeatureLog":
        buf = Path(path).read_bytes()
        mlen = int(np.frombuffer(buf, dtype=_U64, count=1)[0])
        manifest = json.loads(buf[8 : 8 + mlen].decode("utf-8"))
        log = cls(meta=manifest["meta"])
        offset = 8 + mlen
        for rec in manifest["records"]:
            values, offset = tensor_from_bytes(buf, offset)
            log.add(
                rec["step_index"],
                rec["train_timestep"],
                BlockFeature(block_index=rec["block_index"], step=rec["train_timestep"], values=values),
            )
        return log


def record_features(
    model: Model,
    plan: SamplerPlan,
    sched: NoiseSchedule,
    context: np.ndarray,
    rng: RngStream,
    taps,
    path=None,
) -> FeatureLog:
    """Run a full-computation sampling pass and log the tapped features."""
    taps = tuple(taps)
    if not taps:
        raise ConfigError("record_features needs at least one tap index")
    log = FeatureLog()

    def sink(step_index: int, t: int, tapped: list[BlockFeature]) -> None:
        for feature in tapped:
            log.add(step_index, t, feature)

    sample(model, plan, sched, context, FullExecutor(model, taps=taps), rng, feature_sink=sink)
    if path is not None:
        log.save(path)
    return log


@dataclass(frozen=True)
class SimilaritySurface:
    """L2 distance between each block's outputs at adjacent steps."""

    values: np.ndarray  # (steps - 1) x blocks

    def __post_init__(self):
        if (self.values < 0).any():
            raise ValueError("distances must be non-negative")


@dataclass(frozen=True)
class StepSimilarityMatrix:
    """Cosine similarity of one block's features across all step pairs."""

    values: np.ndarray  # steps x steps


def l2_surface(log: FeatureLog) -> SimilaritySurface:
    """Frobenius distance between consecutive steps for every logged block."""
    steps = log.steps()
    blocks = log.blocks()
    if len(steps) < 2:
        raise CompletenessError("need at least two steps for adjacent-step distances")
    values = np.empty((len(steps) - 1, len(blocks)))
    for i in range(len(steps) - 1):
        for j, b in enumerate(blocks):
            diff = log.get(steps[i], b) - log.get(steps[i + 1], b)
            values[i, j] = np.sqrt((diff * diff).sum())
    return SimilaritySurface(values=values)


def cosine_matrix(log: FeatureLog, cutoff_index: int) -> StepSimilarityMatrix:
    """Cosine similarity of the cutoff block's flattened features per step pair.

    A zero feature vector has similarity 0 against everything except
    itself on the diagonal, which stays 1.
    """
    steps = log.steps()
    flats = [log.get(s, cutoff_index).ravel() for s in steps]
    norms = np.array([np.sqrt((f * f).sum()) for f in flats])
    n = len(steps)
    values = np.eye(n)
    for a in range(n):
        for b in range(a + 1, n):
            if norms[a] == 0.0 or norms[b] == 0.0:
                sim = 0.0
            else:
                sim = float(flats[a] @ flats[b]) / (norms[a] * norms[b])
            values[a, b] = values[b, a] = sim
    return StepSimilarityMatrix(values=values)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with uniform windows at stride 1.

    Multichannel inputs (H x W x C) are scored per channel and averaged.
    The dynamic range is the observed max minus min over both inputs, so
    scores are comparable only within the pair; statistics use sample
    (N-1) normalization.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"images differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], window, k1, k2) for c in range(a.shape[2])]))
    if a.ndim != 2:
        raise DimensionError(f"images must be 2-D or 3-D, got shape {a.shape}")
    if window < 2 or a.shape[0] < window or a.shape[1] < window:
        raise ConfigError(f"image {a.shape} smaller than {window}x{window} window")

    data_range = max(a.max(), b.max()) - min(a.min(), b.min())
    if data_range == 0.0:
        return 1.0  # both images are the same constant
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    n = window * window
    cov_norm = n / (n - 1)

    wa = np.lib.stride_tricks.sliding_window_view(a, (window, window))
    wb = np.lib.stride_tricks.sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(2, 3))
    mu_b = wb.mean(axis=(2, 3))
    var_a = cov_norm * (wa * wa).mean(axis=(2, 3)) - cov_norm * mu_a * mu_a
    var_b = cov_norm * (wb * wb).mean(axis=(2, 3)) - cov_norm * mu_b * mu_b
    cov = cov_norm * (wa * wb).mean(axis=(2, 3)) - cov_norm * mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())


def pca_project(features: np.ndarray, k: int) -> np.ndarray:
    """Project token vectors onto the top-k principal axes.

    Components come from an eigendecomposition of the feature covariance,
    ordered by non-increasing eigenvalue, each sign-fixed so its
    largest-magnitude entry is positive. If the covariance has fewer than
    k usable directions the projection shrinks to the effective rank with
    a warning.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"features must be 2-D, got shape {x.shape}")
    t, d = x.shape
    if not 1 <= k <= min(t, d):
        raise ConfigError(f"k must lie in [1, {min(t, d)}], got {k}")
    centered = x - x.mean(axis=0, keepdims=True)
    cov = (centered.T @ centered) / max(t - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]

    tol = max(eigvals[0], 0.0) * d * np.finfo(np.float64).eps
    effective = int((eigvals > tol).sum())
    if effective < k:
        warnings.warn(
            f"covariance rank {effective} < k={k}; projecting onto {effective} components",
            RuntimeWarning,
            stacklevel=2,
        )
        k = max(effective, 1)
    basis = eigvecs[:, :k]
    signs = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(k)])
    signs[signs == 0] = 1.0
    return centered @ (basis * signs)


def write_matrix_csv(path, matrix: np.ndarray, header: list[str] | None = None) -> None:
    """CSV with 17-significant-digit floats (round-trip exact)."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    lines = []
    if header is not None:
        lines.append(",".join(header))
    for row in matrix:
        lines.append(",".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
