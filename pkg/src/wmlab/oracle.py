"""Brute-force reference solvers for tiny vocabularies.

These certify the closed-form samplers: dense simplex grids and
projected-gradient ascent attack the same objectives numerically, and
rejection sampling produces feasible competitors under each constraint.
The oracles are statistical certificates, not certified global optima;
they are deliberately restricted to vocabularies small enough that the
grids stay dense.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .core import ProbDist
from .errors import InfeasibleBudgetError, InvalidParamsError
from .hashing import ScoreSpec, draw_scores
from .metrics import ConstraintKind

GRID_STEP = 0.005
PGA_STARTS = 32
PGA_ITERS = 400


def project_simplex_rows(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    u = np.sort(v, axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1) - 1.0
    idx = np.arange(1, v.shape[1] + 1)
    cond = u - css / idx > 0
    rho = np.count_nonzero(cond, axis=1)
    theta = css[np.arange(v.shape[0]), rho - 1] / rho
    return np.maximum(v - theta[:, None], 0.0)


@lru_cache(maxsize=8)
def _simplex_grid(vocab_size: int, cells: int) -> np.ndarray:
    """All points of the simplex lattice with ``cells`` steps per axis."""
    if vocab_size == 2:
        i = np.arange(cells + 1)
        grid = np.stack([i, cells - i], axis=1)
    elif vocab_size == 3:
        i, j = np.meshgrid(np.arange(cells + 1), np.arange(cells + 1), indexing="ij")
        mask = i + j <= cells
        grid = np.stack([i[mask], j[mask], cells - i[mask] - j[mask]], axis=1)
    elif vocab_size == 4:
        r = np.arange(cells + 1, dtype=np.int16)
        i, j, k = np.meshgrid(r, r, r, indexing="ij")
        mask = (i.astype(np.int32) + j + k) <= cells
        i, j, k = i[mask].astype(np.int32), j[mask].astype(np.int32), k[mask].astype(np.int32)
        grid = np.stack([i, j, k, cells - i - j - k], axis=1)
    else:
        raise InvalidParamsError("simplex grids support vocabularies up to 4")
    out = grid.astype(np.float64) / cells
    out.flags.writeable = False
    return out


def _rows_constraint(kind: ConstraintKind, q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Constraint values of many candidate rows against one reference p."""
    kind = ConstraintKind(kind)
    support = p > 0.0
    out = np.full(q.shape[0], np.inf)
    violates = np.any(q[:, ~support] > 0.0, axis=1) if (~support).any() else np.zeros(q.shape[0], bool)
    ok = ~violates
    qs, ps = q[ok][:, support], p[support]
    if kind in (ConstraintKind.HARD_KL, ConstraintKind.SOFT_KL):
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(qs > 0.0, qs * (np.log(qs) - np.log(ps)), 0.0)
        out[ok] = terms.sum(axis=1)
    elif kind is ConstraintKind.CHI2:
        out[ok] = np.sum((qs - ps) ** 2 / ps, axis=1)
    else:
        out[ok] = (ps - qs) @ np.log(ps)
    return out


def _penalty_rows(kind: ConstraintKind, q: np.ndarray, p: np.ndarray, delta: float) -> np.ndarray:
    """Penalty term of the penalized objective; chi2 carries the 1/(2 delta)
    coefficient so the oracle optimizes the same objective the closed form
    solves."""
    d = _rows_constraint(kind, q, p)
    if ConstraintKind(kind) is ConstraintKind.CHI2:
        return d / (2.0 * delta)
    return d / delta


def feasible_random(p: ProbDist, kind, epsilon: float, count: int, seed) -> list[ProbDist]:
    """Random simplex points satisfying ``D(q, p) <= epsilon``.

    Dirichlet proposals are shrunk toward ``p`` by a uniform factor before
    the rejection test, which keeps acceptance workable for small budgets;
    every returned point is re-checked against the constraint.
    """
    w = p.weights
    if w.size > 8:
        raise InvalidParamsError("feasible sampling is limited to vocabularies of size <= 8")
    if count < 1:
        raise InvalidParamsError("count must be >= 1")
    rng = np.random.default_rng(seed)
    accepted: list[np.ndarray] = []
    attempts = 0
    batch = 4096
    while len(accepted) < count:
        d = rng.dirichlet(np.ones(w.size), size=batch)
        t = rng.random(batch)[:, None]
        candidates = w + t * (d - w)
        values = _rows_constraint(kind, candidates, w)
        good = candidates[values <= epsilon]
        accepted.extend(good)
        attempts += batch
        if attempts >= 200_000 and len(accepted) < max(1, attempts * 1e-4):
            raise InfeasibleBudgetError(
                f"acceptance rate {len(accepted)}/{attempts} below 1e-4 for budget {epsilon:g}"
            )
    return [ProbDist(row / row.sum()) for row in accepted[:count]]


def _pga(p: np.ndarray, g: np.ndarray, delta: float, kind: ConstraintKind, seed) -> np.ndarray:
    """Projected-gradient ascent on the penalized objective, batched starts."""
    rng = np.random.default_rng(seed)
    starts = rng.dirichlet(np.ones(p.size), size=PGA_STARTS)
    q = np.vstack([starts, p[None, :]])
    support = p > 0.0
    floor = 1e-12
    for it in range(PGA_ITERS):
        step = 0.2 / (1.0 + 0.02 * it)
        qc = np.clip(q, floor, None)
        if kind in (ConstraintKind.HARD_KL, ConstraintKind.SOFT_KL):
            grad = g[None, :] - (np.log(qc / np.clip(p, floor, None)) + 1.0) / delta
        elif kind is ConstraintKind.CHI2:
            grad = g[None, :] - (qc - p[None, :]) / np.clip(p[None, :], floor, None) / delta
        else:
            grad = g[None, :] + np.log(np.clip(p, floor, None))[None, :] / delta
        grad = np.where(support[None, :], grad, -1e6)
        q = project_simplex_rows(q + step * grad)
    q[:, ~support] = 0.0
    sums = q.sum(axis=1, keepdims=True)
    return q / sums


def _polish(q: np.ndarray, score_fn) -> np.ndarray:
    """Derivative-free pairwise mass-transfer refinement of one point."""
    best = q.copy()
    best_val = score_fn(best[None, :])[0]
    step = GRID_STEP
    dims = q.size
    while step > 1e-9:
        improved = False
        for i in range(dims):
            for j in range(dims):
                if i == j or best[j] < step:
                    continue
                cand = best.copy()
                cand[j] -= step
                cand[i] += step
                val = score_fn(cand[None, :])[0]
                if val > best_val + 1e-15:
                    best, best_val = cand, val
                    improved = True
        if not improved:
            step /= 2.0
    return best


def grid_optimize_penalized(p: ProbDist, g, delta: float, kind) -> ProbDist:
    """Numerically maximize ``g.q - penalty`` over the simplex.

    Dense lattice scan plus projected-gradient ascent from random starts,
    then a pairwise-transfer polish of the winner.
    """
    kind = ConstraintKind(kind)
    w = p.weights
    gv = np.asarray(g, dtype=np.float64)
    if w.size > 4:
        raise InvalidParamsError("the penalized grid oracle is limited to vocabularies of size <= 4")
    if delta <= 0:
        raise InvalidParamsError("delta must be > 0")

    def objective(rows: np.ndarray) -> np.ndarray:
        return rows @ gv - _penalty_rows(kind, rows, w, delta)

    grid = _simplex_grid(w.size, int(round(1.0 / GRID_STEP)))
    candidates = [grid[int(np.argmax(objective(grid)))]]
    pga = _pga(w, gv, delta, kind, seed=0)
    candidates.append(pga[int(np.argmax(objective(pga)))])
    best = max(candidates, key=lambda row: objective(row[None, :])[0])
    best = _polish(best, objective)
    best = np.where(w > 0.0, best, 0.0)
    return ProbDist(best / best.sum())


def grid_max_constrained(p: ProbDist, g, epsilon: float, kind) -> float:
    """Best lattice objective ``g.q`` among grid points satisfying the constraint."""
    w = p.weights
    gv = np.asarray(g, dtype=np.float64)
    if w.size > 4:
        raise InvalidParamsError("the constrained grid oracle is limited to vocabularies of size <= 4")
    grid = _simplex_grid(w.size, int(round(1.0 / GRID_STEP)))
    feasible = _rows_constraint(kind, grid, w) <= epsilon
    if not feasible.any():
        raise InfeasibleBudgetError("no grid point satisfies the constraint")
    return float(np.max(grid[feasible] @ gv))


def lp_vertex_oracle(p: ProbDist, g, epsilon: float) -> ProbDist:
    """Enumerate singletons and token pairs for the hard-perplexity program.

    For each ordered pair the single tightness equation gives the extreme
    mixing weight; the best feasible point over all supports of size <= 2
    is the LP optimum.
    """
    if epsilon < 0:
        raise InvalidParamsError("epsilon must be >= 0")
    w = p.weights
    if w.size > 64:
        raise InvalidParamsError("the vertex oracle is limited to vocabularies of size <= 64")
    gv = np.asarray(g, dtype=np.float64)
    s = np.flatnonzero(w > 0.0)
    logw = np.log(w[s])
    c = float(w[s] @ logw) - epsilon

    best_q = None
    best_obj = -np.inf
    for a in range(s.size):
        if logw[a] >= c - 1e-12 and gv[s[a]] > best_obj:
            best_obj = float(gv[s[a]])
            q = np.zeros_like(w)
            q[s[a]] = 1.0
            best_q = q
    for a in range(s.size):
        for b in range(s.size):
            if a == b:
                continue
            la, lb = logw[a], logw[b]
            # mix (1-t) on a, t on b; need (1-t) la + t lb >= c with t in [0,1]
            if la < c - 1e-12:
                continue
            if lb >= c - 1e-12:
                t_max = 1.0
            else:
                t_max = (la - c) / (la - lb)
            t_max = min(max(t_max, 0.0), 1.0)
            obj = (1.0 - t_max) * gv[s[a]] + t_max * gv[s[b]]
            if obj > best_obj + 1e-15:
                best_obj = obj
                q = np.zeros_like(w)
                q[s[a]] = 1.0 - t_max
                q[s[b]] = t_max
                best_q = q
    if best_q is None:
        raise InvalidParamsError("no feasible vertex; epsilon < 0?")
    return ProbDist(best_q)


def check_distortion_free(sampler, p: ProbDist, spec: ScoreSpec, n: int, seed) -> float:
    """Max-norm gap between the Monte-Carlo mean of ``sampler`` and ``p``."""
    if n < 1:
        raise InvalidParamsError("n must be >= 1")
    rng = np.random.default_rng(seed)
    batch = draw_scores(rng, spec, len(p), size=n)
    total = np.zeros(len(p))
    for row in batch:
        total += sampler(p, row).weights
    return float(np.max(np.abs(total / n - p.weights)))
