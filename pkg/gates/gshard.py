from functools import partial
from typing import Optional

import numpy as np
from scipy.special import softmax

from errors import ShapeError
from gates.common import check_projection, token_choice_output
from models import GateOutput


def noisy_logits(tokens, w_gate, w_noise=None, noise_enabled: bool = False, rng_seed: Optional[int] = 0) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=float)
    w_gate = np.asarray(w_gate, dtype=float)
    check_projection(tokens, w_gate, "gshard gate")
    logits = tokens @ w_gate
    if noise_enabled:
        if w_noise is None or np.shape(w_noise) != w_gate.shape:
            raise ShapeError(f"noise weights must match the gate weights {w_gate.shape}")
        rng = np.random.default_rng(rng_seed)
        # softplus of the noise logits
        scale = np.logaddexp(0.0, tokens @ np.asarray(w_noise, dtype=float))
        logits = logits + rng.standard_normal(logits.shape) * scale
    return logits


def gshard_gate(tokens, w_gate, w_noise=None, k: int = 2, noise_enabled: bool = False, rng_seed: Optional[int] = 0) -> GateOutput:
    """Noisy top-k gate: softmax over the k surviving logits of each token."""
    logits = noisy_logits(tokens, w_gate, w_noise, noise_enabled, rng_seed)
    return token_choice_output(logits, partial(softmax, axis=1), k)
