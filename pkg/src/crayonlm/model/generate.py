"""Greedy and beam decoding over any next-token log-probability function.

``next_logprobs`` takes a list of equal-length token sequences and returns an
array (n, V) of log-probabilities for the next token of each.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

NextLogprobs = Callable[[list[list[int]]], np.ndarray]


@dataclass(frozen=True)
class GenerationResult:
    tokens: tuple[int, ...]   # generated continuation, including <stop> if emitted
    logprob: float            # total log-probability of ``tokens``
    truncated: bool           # max length reached without <stop>


def greedy(next_logprobs: NextLogprobs, prefix: Sequence[int], stop_id: int,
           max_new_tokens: int) -> GenerationResult:
    seq = list(prefix)
    out: list[int] = []
    total = 0.0
    for _ in range(max_new_tokens):
        lp = np.asarray(next_logprobs([seq])[0], dtype=np.float64)
        tok = int(np.argmax(lp))
        total += float(lp[tok])
        seq.append(tok)
        out.append(tok)
        if tok == stop_id:
            return GenerationResult(tuple(out), total, False)
    return GenerationResult(tuple(out), total, True)


def greedy_batch(next_logprobs: NextLogprobs, prefixes: Sequence[Sequence[int]], stop_id: int,
                 max_new_tokens: int) -> list[GenerationResult]:
    """Greedy decoding of several equal-length prefixes in lockstep."""
    if len({len(p) for p in prefixes}) > 1:
        raise ValueError("greedy_batch needs equal-length prefixes")
    seqs = [list(p) for p in prefixes]
    outs: list[list[int]] = [[] for _ in prefixes]
    totals = [0.0] * len(prefixes)
    done = [False] * len(prefixes)
    for _ in range(max_new_tokens):
        if all(done):
            break
        lp = np.asarray(next_logprobs(seqs), dtype=np.float64)
        for i, row in enumerate(lp):
            tok = int(np.argmax(row)) if not done[i] else stop_id
            seqs[i].append(tok)  # finished rows are padded; their output is frozen
            if done[i]:
                continue
            outs[i].append(tok)
            totals[i] += float(row[tok])
            done[i] = tok == stop_id
    return [GenerationResult(tuple(o), t, not d) for o, t, d in zip(outs, totals, done)]


def beam_search(next_logprobs: NextLogprobs, prefix: Sequence[int], beam_size: int, stop_id: int,
                max_new_tokens: int) -> GenerationResult:
    """Beam search ranked by total log-probability, no length normalization.

    Hypotheses that emit <stop> leave the beam; search ends once the best
    finished score is at least every live score, since scores only decrease.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    live: list[tuple[float, list[int]]] = [(0.0, [])]
    finished: list[tuple[float, list[int]]] = []
    for _ in range(max_new_tokens):
        lp = np.asarray(next_logprobs([list(prefix) + toks for _, toks in live]), dtype=np.float64)
        cands = []
        for (score, toks), row in zip(live, lp):
            top = np.argsort(-row, kind="stable")[:beam_size]
            for tok in top:
                cands.append((score + float(row[tok]), toks + [int(tok)]))
        cands.sort(key=lambda c: -c[0])  # stable: earlier beams/lower ids win ties
        live = []
        for score, toks in cands[:beam_size]:
            (finished if toks[-1] == stop_id else live).append((score, toks))
        if not live:
            break
        if finished and max(f[0] for f in finished) >= live[0][0]:
            break
    pool = finished if finished else live
    best_finished = max(finished, key=lambda c: c[0]) if finished else None
    if best_finished is not None and (not live or best_finished[0] >= live[0][0]):
        return GenerationResult(tuple(best_finished[1]), best_finished[0], False)
    score, toks = max(pool + live, key=lambda c: c[0])
    return GenerationResult(tuple(toks), score, toks[-1] != stop_id)
