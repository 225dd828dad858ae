"""Note- and frame-level precision / recall / F1 (mir_eval conventions)."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

ONSET_TOLERANCE = 0.05
OFFSET_RATIO = 0.2
OFFSET_MIN_TOLERANCE = 0.05
N_DECIMALS = 4  # mir_eval rounds time differences before comparing


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int]] = field(default_factory=list)
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0


def _as_notes(notes) -> List[Tuple[int, float, float]]:
    out = []
    for n in notes:
        if hasattr(n, "pitch"):
            out.append((int(n.pitch), float(n.onset_s), float(n.offset_s)))
        else:
            p, a, b = n
            out.append((int(p), float(a), float(b)))
    return out


def hopcroft_karp(adjacency: Sequence[Sequence[int]], n_right: int) -> Dict[int, int]:
    """Maximum-cardinality bipartite matching; returns {left: right}."""
    n_left = len(adjacency)
    INF = float("inf")
    match_l = [-1] * n_left
    match_r = [-1] * n_right
    dist = [0.0] * n_left

    def bfs() -> bool:
        q = deque()
        for u in range(n_left):
            if match_l[u] == -1:
                dist[u] = 0
                q.append(u)
            else:
                dist[u] = INF
        found = False
        while q:
            u = q.popleft()
            for v in adjacency[u]:
                w = match_r[v]
                if w == -1:
                    found = True
                elif dist[w] == INF:
                    dist[w] = dist[u] + 1
                    q.append(w)
        return found

    def dfs(root: int) -> bool:
        # iterative DFS along the BFS layering
        stack = [(root, iter(adjacency[root]))]
        path = []
        while stack:
            u, it = stack[-1]
            advanced = False
            for v in it:
                w = match_r[v]
                if w == -1:
                    path.append((u, v))
                    for a, b in path:
                        match_l[a] = b
                        match_r[b] = a
                    return True
                if dist[w] == dist[u] + 1:
                    path.append((u, v))
                    stack.append((w, iter(adjacency[w])))
                    advanced = True
                    break
            if not advanced:
                dist[u] = INF
                stack.pop()
                if path:
                    path.pop()
        return False

    while bfs():
        for u in range(n_left):
            if match_l[u] == -1:
                dfs(u)
    return {u: v for u, v in enumerate(match_l) if v != -1}


def _prf(n_match: int, n_ref: int, n_est: int) -> Tuple[float, float, float]:
    p = n_match / n_est if n_est else 0.0
    r = n_match / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def admissible_pairs(ref, est, onset_tolerance: float = ONSET_TOLERANCE,
                     offset_ratio: Optional[float] = None,
                     offset_min_tolerance: float = OFFSET_MIN_TOLERANCE) -> List[List[int]]:
    ref, est = _as_notes(ref), _as_notes(est)
    adj: List[List[int]] = [[] for _ in ref]
    for i, (rp, ra, rb) in enumerate(ref):
        window = max(offset_min_tolerance, offset_ratio * (rb - ra)) if offset_ratio is not None else None
        for j, (ep, ea, eb) in enumerate(est):
            if rp != ep:
                continue
            if round(abs(ra - ea), N_DECIMALS) > onset_tolerance:
                continue
            if window is not None and round(abs(rb - eb), N_DECIMALS) > window:
                continue
            adj[i].append(j)
    return adj


def match_notes(ref, est, onset_tolerance: float = ONSET_TOLERANCE,
                offset_ratio: Optional[float] = None,
                offset_min_tolerance: float = OFFSET_MIN_TOLERANCE) -> MatchResult:
    adj = admissible_pairs(ref, est, onset_tolerance, offset_ratio, offset_min_tolerance)
    matching = hopcroft_karp(adj, len(est))
    p, r, f = _prf(len(matching), len(ref), len(est))
    return MatchResult(sorted(matching.items()), p, r, f)


def note_f1_onset(ref, est, tol_s: float = ONSET_TOLERANCE) -> MatchResult:
    return match_notes(ref, est, onset_tolerance=tol_s)


def note_f1_onset_offset(ref, est, tol_s: float = ONSET_TOLERANCE) -> MatchResult:
    return match_notes(ref, est, onset_tolerance=tol_s, offset_ratio=OFFSET_RATIO)


def notes_to_roll(notes, n_frames: Optional[int] = None, frame_period: float = 0.02) -> np.ndarray:
    notes = _as_notes(notes)
    if n_frames is None:
        n_frames = max([int(round(b / frame_period)) for _, _, b in notes] + [0])
    roll = np.zeros((n_frames, 128), dtype=bool)
    for p, a, b in notes:
        start = int(round(a / frame_period))
        stop = max(start + 1, int(round(b / frame_period)))
        roll[start:stop, p] = True
    return roll


def frame_f1(ref_roll, est_roll) -> MatchResult:
    ref_roll, est_roll = np.asarray(ref_roll, bool), np.asarray(est_roll, bool)
    if ref_roll.shape != est_roll.shape:
        raise ValueError(f"roll shapes differ: {ref_roll.shape} vs {est_roll.shape}")
    tp = int(np.logical_and(ref_roll, est_roll).sum())
    p, r, f = _prf(tp, int(ref_roll.sum()), int(est_roll.sum()))
    return MatchResult([], p, r, f)


def evaluate_clip(ref, est) -> Dict[str, float]:
    ref, est = _as_notes(ref), _as_notes(est)
    n = max([int(round(b / 0.02)) for _, _, b in ref + est] + [0])
    on = note_f1_onset(ref, est)
    onoff = note_f1_onset_offset(ref, est)
    fr = frame_f1(notes_to_roll(ref, n), notes_to_roll(est, n))
    return {"onset_precision": on.precision, "onset_recall": on.recall, "onset_f1": on.f1,
            "onset_offset_precision": onoff.precision, "onset_offset_recall": onoff.recall,
            "onset_offset_f1": onoff.f1, "frame_f1": fr.f1}


def aggregate(per_clip: Sequence[Dict[str, float]]) -> Dict[str, float]:
    """Macro average over clips."""
    if not per_clip:
        return {"onset_f1": 0.0, "onset_offset_f1": 0.0, "frame_f1": 0.0}
    keys = [k for k in per_clip[0] if isinstance(per_clip[0][k], (int, float))]
    return {k: float(np.mean([c[k] for c in per_clip])) for k in keys}
