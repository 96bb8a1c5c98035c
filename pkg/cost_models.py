"""Linear alpha + n*beta performance models.

Time is in milliseconds. Communication sizes count elements (4-byte floats),
GEMM workloads count multiply-accumulate operations.
"""
import csv
import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from errors import ConfigError, FitError, InversionError
from models import COST_KINDS, BenchSample, ClusterProfile, LinearCostModel

logger = logging.getLogger(__name__)

BYTES_PER_ELEMENT = 4
COMM_SIZES = tuple(i * 2**18 for i in range(1, 25))
GEMM_SIZES = tuple(i * 2**30 for i in range(1, 13))


def predict(model: LinearCostModel, n):
    return model.alpha + n * model.beta


def chunk_time(model: LinearCostModel, n, r):
    """Per-chunk time when a task of size n is split into r chunks."""
    if np.any(np.asarray(r) < 1):
        raise ConfigError(f"pipeline degree must be >= 1, got {r}")
    return model.alpha + (n / r) * model.beta


def inverse(model: LinearCostModel, t: float) -> float:
    """Largest size that finishes within t; 0 when t is below the startup."""
    if model.beta <= 0:
        raise InversionError("cannot invert a cost model with beta = 0")
    return max(0.0, (t - model.alpha) / model.beta)


def fit(samples: Sequence[BenchSample], unit: str = "elements") -> LinearCostModel:
    """Ordinary least squares on (n, t)."""
    if len(samples) < 2:
        raise FitError(f"need at least 2 samples to fit, got {len(samples)}")
    n = np.array([s.n for s in samples], dtype=float)
    t = np.array([s.t for s in samples], dtype=float)
    n_mean, t_mean = n.mean(), t.mean()
    sxx = np.sum((n - n_mean) ** 2)
    if sxx == 0:
        raise FitError("all samples share one size; slope is undetermined")

    beta = float(np.sum((n - n_mean) * (t - t_mean)) / sxx)
    alpha = float(t_mean - beta * n_mean)
    if beta < 0:
        logger.warning(f"fitted beta {beta:.3e} < 0, clamped to 0")
        beta = 0.0
        alpha = float(t_mean)
    if alpha < 0:
        logger.warning(f"fitted alpha {alpha:.3e} < 0, clamped to 0")
        alpha = 0.0
    return LinearCostModel(alpha=alpha, beta=beta, unit=unit)


def goodness_of_fit(samples: Sequence[BenchSample], model: LinearCostModel) -> float:
    """Coefficient of determination, clipped to [0, 1]."""
    if len(samples) < 2:
        raise FitError("goodness of fit needs at least 2 samples")
    n = np.array([s.n for s in samples], dtype=float)
    t = np.array([s.t for s in samples], dtype=float)
    ss_res = float(np.sum((t - predict(model, n)) ** 2))
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else 0.0
    return float(min(1.0, max(0.0, 1.0 - ss_res / ss_tot)))


def synthesize_samples(
    model: LinearCostModel,
    sizes: Iterable[float],
    noise: float = 0.0,
    repeats: int = 5,
    seed: int = 0,
) -> list[BenchSample]:
    """Bench samples on the model line with uniform +-noise multiplicative error.

    Each sample averages ``repeats`` noisy runs, as the microbenchmarks do.
    """
    rng = np.random.default_rng(seed)
    samples = []
    for n in sizes:
        runs = predict(model, n) * (1.0 + rng.uniform(-noise, noise, size=repeats))
        samples.append(BenchSample(n=n, t=float(runs.mean())))
    return samples


def load_bench_csv(path) -> dict[str, list[BenchSample]]:
    """Parse a ``kind,n,t_ms`` file into samples grouped by kind."""
    grouped: dict[str, list[BenchSample]] = {kind: [] for kind in COST_KINDS}
    with open(path, newline="") as bench_file:
        reader = csv.reader(bench_file)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["kind", "n", "t_ms"]:
            raise ConfigError(f"{path}:1: expected header 'kind,n,t_ms', got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 3:
                raise ConfigError(f"{path}:{line_no}: expected 3 columns, got {len(row)}")
            kind = row[0].strip()
            if kind not in grouped:
                raise ConfigError(f"{path}:{line_no}: unknown kind '{kind}'")
            try:
                grouped[kind].append(BenchSample(n=float(row[1]), t=float(row[2])))
            except ValueError as e:
                raise ConfigError(f"{path}:{line_no}: bad sample {row[1:]}: {e}") from e
    return grouped


def write_bench_csv(path, samples_by_kind: dict[str, list[BenchSample]]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as bench_file:
        writer = csv.writer(bench_file)
        writer.writerow(["kind", "n", "t_ms"])
        for kind in COST_KINDS:
            for sample in samples_by_kind.get(kind, []):
                writer.writerow([kind, repr(float(sample.n)), repr(float(sample.t))])


def fit_profile(samples_by_kind: dict[str, list[BenchSample]], name: str = "fitted"):
    """Fit all five kinds; returns the profile and the r^2 of each fit."""
    models, r2 = {}, {}
    for kind in COST_KINDS:
        samples = samples_by_kind.get(kind, [])
        if not samples:
            raise FitError(f"no samples for kind '{kind}'")
        try:
            models[kind] = fit(samples, unit="mac-ops" if kind == "gemm" else "elements")
        except FitError as e:
            raise FitError(f"{kind}: {e}") from e
        r2[kind] = goodness_of_fit(samples, models[kind])
        logger.info(f"fitted {kind}: alpha={models[kind].alpha:.4e} beta={models[kind].beta:.4e} r2={r2[kind]:.6f}")
    return ClusterProfile(name=name, **models), r2


def synthesize_profile_bench(profile: ClusterProfile, noise: float = 0.01, seed: int = 0):
    """Synthetic bench for every kind on the standard size grids."""
    return {
        kind: synthesize_samples(
            profile.model(kind),
            GEMM_SIZES if kind == "gemm" else COMM_SIZES,
            noise=noise,
            seed=seed + i,
        )
        for i, kind in enumerate(COST_KINDS)
    }


def testbed_profile(name: str) -> ClusterProfile:
    from config import get_testbed

    testbed = get_testbed(name)
    if testbed is None:
        raise ConfigError(f"unknown testbed '{name}'")
    return testbed["profile"]


def load_profile(source: str) -> ClusterProfile:
    """A testbed preset name or a profile JSON path."""
    from config import TESTBEDS

    if source.lower() in TESTBEDS:
        return testbed_profile(source)
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"cluster profile '{source}' is neither a preset nor a file")
    try:
        return ClusterProfile.model_validate_json(path.read_text())
    except ValueError as e:
        raise ConfigError(f"{path}: invalid cluster profile: {e}") from e
