"""Turn attribution scores into a contiguous keep-window mask.

The window covers the non-CLS positions whose score sum is maximal;
everything outside it is masked.  CLS is never part of the search and
never masked.  Window sums are accumulated left-to-right in plain
Python floats so the selected index is bit-reproducible and directly
comparable with a brute-force search.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from maskfew.attribution import AttributionScores
from maskfew.encoder import MASK_ID, TokenSequence
from maskfew.errors import ContractError


@dataclass
class MaskSpec:
    keep_start: int  # position in the full sequence; >= 1 (0 is CLS)
    keep_len: int
    ratio: float
    source_scores: AttributionScores | None = None

    def __post_init__(self):
        if self.keep_start < 1 or self.keep_len < 1:
            raise ContractError("keep window must start after CLS and be nonempty")


def keep_length(ratio: float, n: int) -> int:
    """max(1, round(ratio * n)) with round-half-up."""
    return max(1, int(np.floor(ratio * n + 0.5)))


def mask_generator(seq: TokenSequence, scores: AttributionScores, ratio: float) -> MaskSpec:
    """Best contiguous keep-window of the ratio-determined length.

    Ties go to the smallest start position.
    """
    if not 0.0 < ratio <= 1.0:
        raise ContractError(f"ratio must lie in (0, 1], got {ratio}")
    if len(scores.scores) != len(seq.ids):
        raise ContractError("attribution scores are not aligned with the sequence")
    n = len(seq.ids) - 1
    if n < 1:
        raise ContractError("sequence has no non-CLS tokens to mask")
    klen = keep_length(ratio, n)

    vals = [float(v) for v in scores.scores[1:]]
    best_start, best_sum = 1, None
    for start in range(1, n - klen + 2):
        total = 0.0
        for j in range(start - 1, start - 1 + klen):
            total += vals[j]
        if best_sum is None or total > best_sum:
            best_start, best_sum = start, total
    return MaskSpec(keep_start=best_start, keep_len=klen, ratio=ratio,
                    source_scores=scores)


def apply_mask(seq: TokenSequence, spec: MaskSpec, mode: str = "attention") -> TokenSequence:
    """New sequence with everything outside the keep-window masked.

    "attention" deactivates the masked positions; "replace" swaps their
    ids for the MASK token and leaves the active flags untouched.  The
    input sequence is never modified.
    """
    if spec.keep_start + spec.keep_len > len(seq.ids):
        raise ContractError(f"keep window [{spec.keep_start}, {spec.keep_start + spec.keep_len})"
                            f" exceeds sequence length {len(seq.ids)}")
    lo, hi = spec.keep_start, spec.keep_start + spec.keep_len
    if mode == "attention":
        active = np.zeros(len(seq.ids), dtype=bool)
        active[0] = True
        active[lo:hi] = True
        return TokenSequence(seq.ids.copy(), active)
    if mode == "replace":
        ids = seq.ids.copy()
        keep = np.zeros(len(ids), dtype=bool)
        keep[0] = True
        keep[lo:hi] = True
        ids[~keep] = MASK_ID
        return TokenSequence(ids, seq.active.copy())
    raise ContractError(f"unknown mask mode {mode!r}")
