"""Limited-memory BFGS with a strong-Wolfe line search, and constant refitting for skeletons."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NoDescentError
from .funcimg import FuncImage, MeshGrid
from .seeding import derive_seed
from .tree import CONST_RANGE, ConstVec, OperationTree, Ots, grad_consts, ots_to_tree
from .vocab import OperatorVocab

FG = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    iterations: int
    converged: bool
    message: str


def _finite(f, g) -> bool:
    return bool(np.isfinite(f) and np.all(np.isfinite(g)))


def _cubic_min(a, fa, da, b, fb, db) -> float | None:
    """Minimizer of the cubic interpolating (a, fa, da), (b, fb, db), if it exists."""
    if a == b:
        return None
    d1 = da + db - 3 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    return b - (b - a) * (db + d2 - d1) / (db - da + 2 * d2)


def strong_wolfe(
    fg: FG,
    x: np.ndarray,
    f0: float,
    g0: np.ndarray,
    p: np.ndarray,
    alpha: float = 1.0,
    c1: float = 1e-4,
    c2: float = 0.9,
    max_evals: int = 40,
    alpha_max: float = 1e6,
):
    """Return (alpha, f, g) satisfying the strong Wolfe conditions, or None.

    Trial points with non-finite objective or gradient are treated as overshoots
    and the step is pulled back toward the last good point.
    """
    d0 = float(g0 @ p)
    evals = 0

    def phi(a):
        nonlocal evals
        evals += 1
        f, g = fg(x + a * p)
        return f, g

    def zoom(lo, flo, dlo, glo, hi, fhi, dhi):
        while evals < max_evals:
            a = None
            if np.isfinite(fhi) and np.isfinite(dhi):
                a = _cubic_min(lo, flo, dlo, hi, fhi, dhi)
            lo_b, hi_b = min(lo, hi), max(lo, hi)
            margin = 0.1 * (hi_b - lo_b)
            if a is None or not np.isfinite(a) or not (lo_b + margin <= a <= hi_b - margin):
                a = 0.5 * (lo + hi)
            f, g = phi(a)
            if not _finite(f, g):
                hi, fhi, dhi = a, np.inf, np.nan
                continue
            d = float(g @ p)
            if f > f0 + c1 * a * d0 or f >= flo:
                hi, fhi, dhi = a, f, d
            else:
                if abs(d) <= -c2 * d0:
                    return a, f, g
                if d * (hi - lo) >= 0:
                    hi, fhi, dhi = lo, flo, dlo
                lo, flo, dlo, glo = a, f, d, g
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                break
        # fall back to the best sufficient-decrease point found, if any
        if lo > 0 and flo < f0:
            return lo, flo, glo
        return None

    a_prev, f_prev, d_prev, g_prev = 0.0, f0, d0, g0
    a = alpha
    first = True
    while evals < max_evals:
        f, g = phi(a)
        if not _finite(f, g):
            a = a_prev + 0.5 * (a - a_prev)
            continue
        d = float(g @ p)
        if f > f0 + c1 * a * d0 or (not first and f >= f_prev):
            return zoom(a_prev, f_prev, d_prev, g_prev, a, f, d)
        if abs(d) <= -c2 * d0:
            return a, f, g
        if d >= 0:
            return zoom(a, f, d, g, a_prev, f_prev, d_prev)
        a_prev, f_prev, d_prev, g_prev = a, f, d, g
        a = min(2.0 * a, alpha_max)
        first = False
    return None


def lbfgs(
    fg: FG,
    x0: np.ndarray,
    history: int = 10,
    max_iter: int = 200,
    gtol: float = 1e-10,
    ftol: float = 1e-15,
) -> LbfgsResult:
    with np.errstate(all="ignore"):
        return _lbfgs(fg, x0, history, max_iter, gtol, ftol)


def _lbfgs(fg: FG, x0, history, max_iter, gtol, ftol) -> LbfgsResult:
    x = np.array(x0, dtype=np.float64)
    f, g = fg(x)
    if not _finite(f, g):
        raise NoDescentError("objective is not finite at the starting point")
    mem: deque[tuple[np.ndarray, np.ndarray, float]] = deque(maxlen=history)
    for it in range(max_iter):
        if np.max(np.abs(g), initial=0.0) <= gtol:
            return LbfgsResult(x, f, it, True, "gradient below tolerance")
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(mem):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if mem:
            s, y, _ = mem[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(mem, reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        p = -q
        if g @ p >= 0:
            mem.clear()
            p = -g
        step0 = 1.0 if mem else min(1.0, 1.0 / max(np.sum(np.abs(g)), 1e-300))
        res = strong_wolfe(fg, x, f, g, p, alpha=step0)
        if res is None:
            if it == 0:
                raise NoDescentError("line search failed on the first iteration")
            return LbfgsResult(x, f, it, False, "line search failed")
        a, f_new, g_new = res
        s = a * p
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.sqrt((s @ s) * (y @ y))):
            mem.append((s, y, 1.0 / sy))
        done = abs(f - f_new) <= ftol * max(1.0, abs(f))
        x, f, g = x + s, f_new, g_new
        if done:
            return LbfgsResult(x, f, it + 1, True, "objective change below tolerance")
    return LbfgsResult(x, f, max_iter, False, "iteration limit")


@dataclass
class FitResult:
    consts: ConstVec
    mse: float
    iterations: int
    restarts_used: int


def mse_objective(tree: OperationTree, img: FuncImage, grid: MeshGrid) -> FG:
    """Mean squared error on the image's finite positions, with gradient.

    Residuals are taken in raw units and divided by each channel's stored
    standard deviation, so a channel with a huge range cannot swamp the others.
    """
    target = img.raw_values()
    inv = 1.0 / np.where(img.channel_std > 0, img.channel_std, 1.0)
    pts = [grid.points(s) for s in range(grid.n_channels)]
    rows = [np.flatnonzero(img.finite_mask[s]) for s in range(grid.n_channels)]
    m = sum(len(r) for r in rows)

    def fg(c: np.ndarray) -> tuple[float, np.ndarray]:
        c = np.asarray(c, dtype=np.float64)
        if not np.all(np.isfinite(c)):
            return np.inf, np.full_like(c, np.nan)
        consts = ConstVec.visible(c)
        total = 0.0
        grad = np.zeros_like(c)
        for s in range(grid.n_channels):
            cg = grad_consts(tree, consts, pts[s][rows[s]])
            if not cg.valid.all():
                return np.inf, np.full_like(c, np.nan)
            with np.errstate(all="ignore"):
                r = (cg.values - target[s, rows[s]]) * inv[s]
                total += float(r @ r)
                grad += 2.0 * inv[s] * (cg.jacobian.T @ r)
        if not _finite(total, grad):
            return np.inf, np.full_like(c, np.nan)
        return total / m, grad / m

    return fg


def fit_constants_lbfgs(
    skeleton: Ots,
    img: FuncImage,
    grid: MeshGrid,
    vocab: OperatorVocab,
    init: ConstVec | None = None,
    iters: int = 200,
    restarts: int = 4,
    seed: int = 0,
    history: int = 10,
) -> FitResult:
    """Refit the skeleton's constants to an image; the best of several starts is kept.

    Starts are ``init`` (when given) followed by uniform draws from [-2, 2].
    Draws whose objective is not finite (the skeleton is undefined somewhere the
    image is defined) do not count toward ``restarts``; at most
    ``16 * restarts`` draws are made.
    """
    tree = ots_to_tree(skeleton, None, vocab)
    n = tree.n_const
    fg = mse_objective(tree, img, grid)
    if n == 0:
        f, _ = fg(np.zeros(0))
        return FitResult(ConstVec.empty(), f, 0, 0)

    def candidates():
        if init is not None:
            yield np.asarray(init.values[:n], dtype=np.float64)
        for k in range(16 * max(restarts, 1)):
            rng = np.random.default_rng(derive_seed(seed, k))
            yield rng.uniform(*CONST_RANGE, size=n)

    best: LbfgsResult | None = None
    used = 0
    for x0 in candidates():
        if used >= max(restarts, 1):
            break
        try:
            res = lbfgs(fg, x0, history=history, max_iter=iters)
        except NoDescentError:
            continue
        used += 1
        if best is None or res.f < best.f:
            best = res
    if best is None:
        raise NoDescentError("no start produced a finite, descending objective")
    return FitResult(ConstVec.visible(best.x), float(best.f), best.iterations, used)
