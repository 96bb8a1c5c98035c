"""MoE layer geometry: gating, the ordering layout transform, and task volumes."""
import itertools
import logging
import math
from typing import Callable, Optional

import numpy as np

from errors import ConfigError, ShapeError
from gates.common import keep_top_k
from gates.expert_choice import ec_gate
from gates.gshard import gshard_gate
from gates.sigmoid import sigmoid_gate
from gates.xmoe import xmoe_gate
from models import GRID_KEYS, DropReport, GateOutput, LayerConfig, ParallelConfig, TaskVolumes

logger = logging.getLogger(__name__)

__all__ = [
    "capacity",
    "keep_top_k",
    "gshard_gate",
    "sigmoid_gate",
    "xmoe_gate",
    "ec_gate",
    "order",
    "i_order",
    "apply_experts",
    "derive_volumes",
    "layer_from_document",
    "build_grid",
    "default_grid",
]

ATTENTION_MATRICES = 4


def capacity(cfg: LayerConfig) -> int:
    """Tokens one expert accepts, ceil(k*f*B*L/E); k*B*L when f is unlimited."""
    if cfg.f is None:
        return cfg.k * cfg.B * cfg.L
    # rounding first keeps 1228.8000000000002 style float noise from bumping the ceiling
    return math.ceil(round(cfg.k * cfg.f * cfg.B * cfg.L / cfg.E, 9))


def _slot_positions(gate: GateOutput, active: np.ndarray) -> np.ndarray:
    """Arrival position of every active (token, slot) within its expert's row."""
    flat_experts = np.where(active, gate.experts, 0).ravel()
    one_hot = np.zeros((flat_experts.size, gate.num_experts), dtype=np.int64)
    one_hot[np.arange(flat_experts.size), flat_experts] = active.ravel()
    positions = np.cumsum(one_hot, axis=0)[np.arange(flat_experts.size), flat_experts] - 1
    return positions.reshape(gate.experts.shape)


def _check_gate(tokens_count: int, gate: GateOutput, cfg: LayerConfig) -> None:
    if gate.experts.shape[0] != tokens_count:
        raise ShapeError(f"gate routes {gate.experts.shape[0]} tokens, input has {tokens_count}")
    if gate.num_experts != cfg.E:
        raise ShapeError(f"gate has {gate.num_experts} experts, layer config has E={cfg.E}")


def order(tokens, gate: GateOutput, cfg: LayerConfig) -> tuple[np.ndarray, DropReport]:
    """Group tokens by destination expert into an (E, T, M) zero-padded layout.

    Tokens arrive in (token, slot) order; those past capacity T are dropped
    and marked in the returned gate's drop mask.
    """
    tokens = np.asarray(tokens, dtype=float)
    if tokens.ndim != 2:
        raise ShapeError(f"expected a (tokens, M) matrix, got shape {tokens.shape}")
    _check_gate(tokens.shape[0], gate, cfg)
    T = capacity(cfg)

    valid = (gate.experts >= 0) & ~gate.drop_mask
    positions = _slot_positions(gate, valid)
    kept = valid & (positions < T)

    layout = np.zeros((cfg.E, T, tokens.shape[1]))
    token_idx, slot_idx = np.nonzero(kept)
    layout[gate.experts[token_idx, slot_idx], positions[token_idx, slot_idx]] = tokens[token_idx]

    overflow = valid & ~kept
    dropped = [(int(t), int(s)) for t, s in zip(*np.nonzero(overflow))]
    if dropped:
        logger.debug(f"capacity {T} dropped {len(dropped)} routed slots")
    updated = gate.model_copy(update={"drop_mask": gate.drop_mask | overflow})
    return layout, DropReport(gate=updated, capacity=T, dropped=dropped, kept=int(kept.sum()))


def i_order(expert_out, gate: GateOutput, cfg: LayerConfig) -> np.ndarray:
    """Inverse of ``order``: weighted sum of each token's surviving expert outputs."""
    expert_out = np.asarray(expert_out, dtype=float)
    T = capacity(cfg)
    if expert_out.ndim != 3 or expert_out.shape[:2] != (cfg.E, T):
        raise ShapeError(f"expert output {expert_out.shape} does not match (E={cfg.E}, T={T}, M)")
    if gate.num_experts != cfg.E:
        raise ShapeError(f"gate has {gate.num_experts} experts, layer config has E={cfg.E}")

    valid = (gate.experts >= 0) & ~gate.drop_mask
    positions = _slot_positions(gate, valid)
    kept = valid & (positions < T)

    out = np.zeros((gate.experts.shape[0], expert_out.shape[2]))
    token_idx, slot_idx = np.nonzero(kept)
    contributions = (
        gate.weights[token_idx, slot_idx, None]
        * expert_out[gate.experts[token_idx, slot_idx], positions[token_idx, slot_idx]]
    )
    np.add.at(out, token_idx, contributions)
    return out


def apply_experts(layout: np.ndarray, fn: Callable[[int, np.ndarray], np.ndarray]) -> np.ndarray:
    """Run ``fn(expert_index, rows)`` over every expert row of an ordered layout."""
    return np.stack([fn(e, layout[e]) for e in range(layout.shape[0])])


def derive_volumes(cfg: LayerConfig, pcfg: ParallelConfig) -> TaskVolumes:
    """Per-device message sizes and workloads of one MoE layer."""
    if cfg.E % pcfg.n_ep:
        raise ConfigError(f"E={cfg.E} experts cannot be spread evenly over n_ep={pcfg.n_ep} ranks")
    T = capacity(cfg)
    local_experts = cfg.E // pcfg.n_ep
    gemm_count = 3 if cfg.ffn_type == "mixtral" else 2

    expert_params = local_experts * gemm_count * cfg.M * cfg.H / pcfg.n_esp
    attention_params = ATTENTION_MATRICES * cfg.M * cfg.M / pcfg.n_mp
    return TaskVolumes(
        n_a2a=cfg.E * T * cfg.M / pcfg.n_esp,
        n_ag=local_experts * T * cfg.M,
        n_rs=local_experts * T * cfg.M,
        n_exp=T * cfg.M * cfg.H,
        gemm_count=gemm_count,
        n_grad=expert_params + attention_params,
    )


def layer_from_document(doc: dict, pcfg: Optional[ParallelConfig] = None) -> LayerConfig:
    """A layer config document: table fields with ``hscale``, E defaulting to n_ep."""
    fields = dict(doc)
    if "E" not in fields:
        if pcfg is None:
            raise ConfigError("layer document has no E and no parallel config to default it from")
        fields["E"] = pcfg.n_ep
    try:
        if "hscale" in fields:
            return LayerConfig.from_table(**fields)
        return LayerConfig(**fields)
    except ValueError as e:
        raise ConfigError(f"invalid layer config {doc}: {e}") from e


def build_grid(pcfg: ParallelConfig, values: dict) -> list[LayerConfig]:
    """Every combination of the candidate values, E set to n_ep."""
    missing = [key for key in GRID_KEYS if key not in values]
    if missing:
        raise ConfigError(f"grid has no values for {missing}")
    try:
        return [
            LayerConfig.from_table(E=pcfg.n_ep, **dict(zip(GRID_KEYS, combo)))
            for combo in itertools.product(*(values[key] for key in GRID_KEYS))
        ]
    except ValueError as e:
        raise ConfigError(f"invalid grid values: {e}") from e


def default_grid(testbed: str = "testbed-a") -> list[LayerConfig]:
    """Every combination of the configuration table's candidate values."""
    from config import get_testbed, grid_values

    bed = get_testbed(testbed)
    if bed is None:
        raise ConfigError(f"unknown testbed '{testbed}'")
    return build_grid(bed["parallel"], {**grid_values, "L": bed["L"]})
