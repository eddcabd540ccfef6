"""Exact transducer negative log-likelihood over the alignment lattice, plus a
brute-force path-enumeration oracle for verification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tz
from .tensor import ContractError, NEG_CAP, Tensor


class OracleSizeError(ValueError):
    """Instance too large for exhaustive path enumeration."""


@dataclass
class LogitGrid:
    """Per-utterance joint log-probabilities [T, U+1, V] and the target tokens.

    Each (t, u) slice is a log-distribution over blank (id 0) plus tokens.
    """

    log_probs: Tensor
    target: list

    def __post_init__(self):
        if len(self.log_probs.shape) != 3:
            raise ContractError(f"LogitGrid: expected [T, U+1, V], got {self.log_probs.shape}")
        t_len, u1, _ = self.log_probs.shape
        if t_len < 1 or u1 != len(self.target) + 1:
            raise ContractError(
                f"LogitGrid: grid {self.log_probs.shape} inconsistent with target length {len(self.target)}")
        if any(t == 0 for t in self.target):
            raise ContractError("LogitGrid: target must not contain the blank id")


def transducer_nll(grid: LogitGrid) -> Tensor:
    """-log P(target | features), marginalized over all monotone alignments.

    Forward recursion over antidiagonals: alpha(t, u) combines advancing time
    with a blank from (t-1, u) and emitting token u from (t, u-1). Log-probs
    are clamped at NEG_CAP so impossible cells stay finite, and off-lattice
    lanes are masked to NEG_CAP each step. Differentiable through the tape.
    """
    t_len, u1, vocab = grid.log_probs.shape
    u_len = u1 - 1
    lp = tz.clamp_min(grid.log_probs, NEG_CAP)
    lp_flat = tz.reshape(lp, (t_len * u1 * vocab,))

    def flat_idx(t, u, v):
        return (t * u1 + u) * vocab + v

    ts = np.arange(t_len)
    # alpha lane t on diagonal d holds cell (t, d - t); start: alpha(0,0) = 0
    init = np.full(t_len, NEG_CAP)
    init[0] = 0.0
    alpha = Tensor(init)
    for d in range(1, t_len + u_len):
        u_of_t = d - ts
        valid = (u_of_t >= 0) & (u_of_t <= u_len)
        # blank move from (t-1, u): lane t-1 of the previous diagonal
        blank_valid = valid & (ts >= 1)
        blank_idx = np.where(blank_valid, flat_idx(ts - 1, np.clip(u_of_t, 0, u_len), 0), 0)
        # emit move from (t, u-1): same lane of the previous diagonal
        emit_valid = valid & (u_of_t >= 1)
        emit_tok = np.array([grid.target[u - 1] if 1 <= u <= u_len else 0 for u in u_of_t])
        emit_idx = np.where(emit_valid, flat_idx(ts, np.clip(u_of_t - 1, 0, u_len), emit_tok), 0)

        from_blank = tz.add(tz.shift1(alpha, NEG_CAP), tz.take_flat(lp_flat, blank_idx))
        from_emit = tz.add(alpha, tz.take_flat(lp_flat, emit_idx))
        alpha = tz.logaddexp(from_blank, from_emit)
        # push off-lattice lanes back to effective log-zero
        mask = np.where(valid, 0.0, NEG_CAP)
        alpha = tz.add(alpha, Tensor(mask))

    final_alpha = tz.take_flat(alpha, np.array([t_len - 1]))
    final_blank = tz.take_flat(lp_flat, np.array([flat_idx(t_len - 1, u_len, 0)]))
    total = tz.add(final_alpha, final_blank)
    return tz.neg(tz.reshape(total, ()))


def brute_force_transducer_nll(grid: LogitGrid, max_cells: int = 24) -> float:
    """Enumerate every monotone blank/emit path and sum their probabilities.

    Independent of the DP and of the tape: plain floats and numpy logaddexp.
    Refuses instances with more than ``max_cells`` interior lattice cells.
    Returns +inf when the target has zero total probability.
    """
    t_len, u1, _ = grid.log_probs.shape
    u_len = u1 - 1
    if t_len * max(u_len, 1) > max_cells:
        raise OracleSizeError(
            f"instance T={t_len}, U={u_len} exceeds {max_cells} lattice cells")
    lp = grid.log_probs.array
    target = grid.target
    path_sums = []

    def walk(t, u, acc):
        if t == t_len - 1 and u == u_len:
            path_sums.append(acc + lp[t, u, 0])
            return
        if t < t_len - 1:
            walk(t + 1, u, acc + lp[t, u, 0])
        if u < u_len:
            walk(t, u + 1, acc + lp[t, u, target[u]])

    walk(0, 0, 0.0)
    total = -np.inf
    for s in path_sums:
        total = np.logaddexp(total, s)
    if total == -np.inf:
        return float("inf")
    return float(-total)
