from functools import partial

import numpy as np
from scipy.special import softmax

from errors import ScoringError, ShapeError
from gates.common import check_projection, token_choice_output
from models import GateOutput


def cosine_scores(tokens, w_proj, w_gate) -> np.ndarray:
    """Cosine similarity between each projected token and each expert embedding."""
    tokens = np.asarray(tokens, dtype=float)
    w_proj = np.asarray(w_proj, dtype=float)
    w_gate = np.asarray(w_gate, dtype=float)
    check_projection(tokens, w_proj, "xmoe projection")
    if w_proj.shape[1] > w_proj.shape[0]:
        raise ShapeError(f"projection rank {w_proj.shape[1]} exceeds the embedding size {w_proj.shape[0]}")
    projected = tokens @ w_proj
    check_projection(projected, w_gate, "xmoe expert embeddings")

    token_norms = np.linalg.norm(projected, axis=1)
    expert_norms = np.linalg.norm(w_gate, axis=0)
    if np.any(token_norms == 0):
        raise ScoringError(f"projected token {int(np.argmin(token_norms))} has zero norm")
    if np.any(expert_norms == 0):
        raise ScoringError(f"expert embedding {int(np.argmin(expert_norms))} has zero norm")
    return (projected @ w_gate) / np.outer(token_norms, expert_norms)


def xmoe_gate(tokens, w_proj, w_gate, k: int = 2) -> GateOutput:
    """Low-rank cosine router; weights are a softmax over the surviving scores."""
    return token_choice_output(cosine_scores(tokens, w_proj, w_gate), partial(softmax, axis=1), k)
