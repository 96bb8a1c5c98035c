import numpy as np

from errors import ConfigError, ShapeError
from models import GateOutput


def keep_top_k(v, k: int) -> np.ndarray:
    """Keep the k largest entries of ``v`` and set the rest to -inf.

    Ties go to the lower index.
    """
    v = np.asarray(v, dtype=float)
    if not 1 <= k <= v.shape[-1]:
        raise ConfigError(f"k={k} out of range for {v.shape[-1]} scores")
    masked = np.full_like(v, -np.inf)
    idx = top_k_indices(v, k)
    np.put_along_axis(masked, idx, np.take_along_axis(v, idx, axis=-1), axis=-1)
    return masked


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated scores keeps equal scores in index order
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def check_projection(tokens: np.ndarray, weight: np.ndarray, name: str) -> None:
    if tokens.ndim != 2 or weight.ndim != 2 or tokens.shape[1] != weight.shape[0]:
        raise ShapeError(f"{name}: cannot project tokens {tokens.shape} with {weight.shape}")


def token_choice_output(scores: np.ndarray, weights_of, k: int) -> GateOutput:
    """Per-token top-k routing; ``weights_of`` maps selected scores to combine weights."""
    num_experts = scores.shape[1]
    if not 1 <= k <= num_experts:
        raise ConfigError(f"k={k} out of range for {num_experts} experts")
    experts = top_k_indices(scores, k)
    selected = np.take_along_axis(scores, experts, axis=1)
    return GateOutput(
        num_experts=num_experts,
        experts=experts,
        weights=weights_of(selected),
        scores=selected,
        drop_mask=np.zeros(experts.shape, dtype=bool),
    )
