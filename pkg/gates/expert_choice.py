import numpy as np
from scipy.special import softmax

from errors import ConfigError
from gates.common import check_projection, top_k_indices
from models import GateOutput


def ec_gate(tokens, w_gate, capacity_k: int) -> GateOutput:
    """Expert choice: every expert picks its top ``capacity_k`` tokens.

    A token can be picked by any number of experts, so slots are padded to E
    with expert -1. Selected experts of a token are listed in ascending order.
    """
    tokens = np.asarray(tokens, dtype=float)
    check_projection(tokens, np.asarray(w_gate), "expert-choice gate")
    logits = tokens @ w_gate
    num_tokens, num_experts = logits.shape
    if not 1 <= capacity_k <= num_tokens:
        raise ConfigError(f"capacity_k={capacity_k} out of range for {num_tokens} tokens")

    per_expert = logits.T
    chosen = top_k_indices(per_expert, capacity_k)
    chosen_logits = np.take_along_axis(per_expert, chosen, axis=1)
    chosen_weights = softmax(chosen_logits, axis=1)

    experts = np.full((num_tokens, num_experts), -1, dtype=int)
    weights = np.zeros((num_tokens, num_experts))
    scores = np.zeros((num_tokens, num_experts))
    for e in range(num_experts):
        experts[chosen[e], e] = e
        weights[chosen[e], e] = chosen_weights[e]
        scores[chosen[e], e] = chosen_logits[e]

    # compact each token's slots so used ones come first
    order = np.argsort(experts < 0, axis=1, kind="stable")
    return GateOutput(
        num_experts=num_experts,
        experts=np.take_along_axis(experts, order, axis=1),
        weights=np.take_along_axis(weights, order, axis=1),
        scores=np.take_along_axis(scores, order, axis=1),
        drop_mask=np.zeros((num_tokens, num_experts), dtype=bool),
    )
