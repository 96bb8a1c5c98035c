import numpy as np
from scipy.special import expit

from gates.common import check_projection, token_choice_output
from models import GateOutput


def sigmoid_gate(tokens, w_gate, k: int = 2) -> GateOutput:
    """Top-k by raw logit, each selected expert weighted by sigmoid(logit)."""
    tokens = np.asarray(tokens, dtype=float)
    check_projection(tokens, np.asarray(w_gate), "sigmoid gate")
    return token_choice_output(tokens @ w_gate, expit, k)
