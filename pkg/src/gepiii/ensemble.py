"""Weighted generalized-mean blending of member predictions (kWh space)."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .scoring import rmsle

logger = logging.getLogger(__name__)

P_GRID = (0.0, 0.5, 1.0, 1.5, 2.0)
P_LIMIT = 5.0
EXHAUSTIVE_MAX_MEMBERS = 3
RESTARTS = 10


class BlendError(ValueError):
    pass


def _check_weights(weights, n_members: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (n_members,):
        raise BlendError(f"expected {n_members} weights, got {w.shape}")
    if not np.isfinite(w).all() or (w < 0).any():
        raise BlendError("weights must be finite and non-negative")
    if w.sum() <= 0:
        raise BlendError("weights must not all be zero")
    return w


def _check_p(p: float) -> float:
    p = float(p)
    if not -P_LIMIT <= p <= P_LIMIT:
        raise BlendError(f"power p must be in [-{P_LIMIT}, {P_LIMIT}]")
    return p


@dataclass
class BlendSpec:
    """Member names, weights and power, plus optional per-meter overrides.

    ``meter_tables`` maps a meter code to ``{"weights": [...], "p": float}``;
    rows of other meters use the global weights.
    """

    members: list[str]
    weights: np.ndarray
    p: float = 1.0
    meter_tables: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = _check_weights(self.weights, len(self.members))
        self.p = _check_p(self.p)
        tables = {}
        for meter, t in self.meter_tables.items():
            tables[int(meter)] = {"weights": _check_weights(t["weights"], len(self.members)),
                                  "p": _check_p(t["p"])}
        self.meter_tables = tables

    def to_dict(self) -> dict:
        return {
            "members": list(self.members),
            "weights": [float(w) for w in self.weights],
            "p": self.p,
            "meter_tables": {int(m): {"weights": [float(w) for w in t["weights"]], "p": t["p"]}
                             for m, t in sorted(self.meter_tables.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BlendSpec":
        unknown = set(data) - {"members", "weights", "p", "meter_tables"}
        if unknown:
            raise BlendError(f"unknown blend fields {sorted(unknown)}")
        return cls(list(data["members"]), data["weights"], data.get("p", 1.0),
                   dict(data.get("meter_tables") or {}))


def generalized_mean(x: np.ndarray, weights, p: float) -> np.ndarray:
    """Row-wise ``(sum w x^p / sum w)^(1/p)`` over members (axis 0).

    ``p = 0`` is the weighted geometric mean. A single member with nonzero
    weight is returned unchanged. With ``p < 0`` a zero in any weighted
    member gives 0 for that row (the limit value). Output is clipped to the
    member range to guard against rounding.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise BlendError("member predictions must be 2-D (members, rows)")
    w = _check_weights(weights, x.shape[0])
    p = _check_p(p)
    if (x < 0).any() or not np.isfinite(x).all():
        raise BlendError("member predictions must be finite and >= 0")
    active = np.flatnonzero(w > 0)
    if active.size == 1:
        return x[active[0]].copy()
    xa = x[active]
    wa = w[active] / w[active].sum()
    lo, hi = xa.min(axis=0), xa.max(axis=0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if p == 0.0:
            out = np.prod(xa ** wa[:, None], axis=0)
        else:
            # scale so every term x^p is <= 1; x^p would under- or overflow for tiny or huge x
            scale = hi if p > 0 else lo
            safe = np.where(scale > 0, scale, 1.0)
            out = safe * (wa @ (xa / safe) ** p) ** (1.0 / p)
            out[scale == 0] = 0.0
    return np.clip(out, lo, hi)


def blend(spec: BlendSpec, predictions, meters=None) -> np.ndarray:
    """Blend ``predictions`` (members x rows, kWh) according to ``spec``."""
    x = np.asarray(predictions, dtype=float)
    if x.ndim != 2 or x.shape[0] != len(spec.members):
        raise BlendError(f"expected {len(spec.members)} member rows, got shape {x.shape}")
    out = generalized_mean(x, spec.weights, spec.p)
    if spec.meter_tables:
        if meters is None:
            raise BlendError("per-meter blend tables need the meter of every row")
        meters = np.asarray(meters)
        for meter, t in spec.meter_tables.items():
            sel = meters == meter
            if sel.any():
                out[sel] = generalized_mean(x[:, sel], t["weights"], t["p"])
    return out


# ---------------------------------------------------------------------------
# optimisation


def _simplex_grid(n_members: int, steps: int):
    """All non-negative integer vectors of length ``n_members`` summing to ``steps``."""
    for bars in itertools.combinations(range(steps + n_members - 1), n_members - 1):
        prev, parts = -1, []
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(steps + n_members - 2 - prev)
        yield tuple(parts)


class _Search:
    """Memoised RMSLE evaluation with the deterministic tie-break
    (score, weight vector, p)."""

    def __init__(self, x, log_actual, p_grid):
        self.x = x
        self.la = log_actual
        self.p_grid = p_grid
        self.cache = {}
        self.best = None

    def score(self, counts: tuple, p: float) -> float:
        key = (counts, p)
        if key not in self.cache:
            pred = generalized_mean(self.x, np.asarray(counts, dtype=float), p)
            d = np.log1p(pred) - self.la
            self.cache[key] = float(np.sqrt(np.mean(d * d)))
            cand = (self.cache[key], counts, p)
            if self.best is None or cand < self.best:
                self.best = cand
        return self.cache[key]

    def score_weights(self, counts: tuple) -> float:
        return min(self.score(counts, p) for p in self.p_grid)


def _descend(search: _Search, start: tuple) -> None:
    """Move one step of weight between pairs of members while it helps."""
    current = start
    cur = search.score_weights(current)
    m = len(current)
    improved = True
    while improved:
        improved = False
        for i, j in itertools.permutations(range(m), 2):
            if current[i] == 0:
                continue
            cand = list(current)
            cand[i] -= 1
            cand[j] += 1
            cand = tuple(cand)
            s = search.score_weights(cand)
            if s < cur:
                current, cur, improved = cand, s, True


def _optimize(x, actuals, p_grid, steps, seed) -> tuple[np.ndarray, float]:
    m = x.shape[0]
    search = _Search(x, np.log1p(actuals), tuple(sorted(float(p) for p in p_grid)))
    corners = [tuple(steps if k == i else 0 for k in range(m)) for i in range(m)]
    for c in corners:
        search.score_weights(c)
    if m <= EXHAUSTIVE_MAX_MEMBERS:
        for counts in _simplex_grid(m, steps):
            search.score_weights(counts)
    else:
        rng = np.random.default_rng(seed)
        best_corner = min(corners, key=lambda c: (search.score_weights(c), c))
        starts = [best_corner, tuple([steps // m] * (m - 1) + [steps - (steps // m) * (m - 1)])]
        while len(starts) < RESTARTS:
            starts.append(tuple(int(v) for v in rng.multinomial(steps, np.full(m, 1.0 / m))))
        for s in starts:
            _descend(search, s)
    _, counts, p = search.best
    weights = np.asarray(counts, dtype=float) / steps
    # the fast loss above may differ from the reported metric in the last
    # bit; never return something worse than a single member under it
    chosen = rmsle(generalized_mean(x, weights, p), actuals)
    for i in range(m):
        alone = rmsle(x[i], actuals)
        if alone < chosen:
            weights = np.eye(m)[i]
            chosen = alone
            p = search.p_grid[0]
    return weights, p


def optimize_weights(
    members: dict[str, np.ndarray] | list,
    actuals,
    p_grid=P_GRID,
    granularity: float = 0.05,
    meters=None,
    per_meter: bool = False,
    seed: int = 0,
) -> BlendSpec:
    """Weights and power minimising validation RMSLE.

    Weights live on the simplex grid with step ``granularity``. Up to three
    members the grid is searched exhaustively; with more, pairwise
    coordinate descent runs from the best single member, the uniform blend
    and random grid points. Every weight vector is tried with every ``p`` in
    ``p_grid``. Ties go to the lexicographically smallest weight vector,
    then the smallest p.
    """
    if isinstance(members, dict):
        names = list(members)
        x = np.vstack([np.asarray(members[k], dtype=float) for k in names])
    else:
        x = np.vstack([np.asarray(v, dtype=float) for v in members])
        names = [f"member_{i}" for i in range(len(x))]
    a = np.asarray(actuals, dtype=float)
    if a.size == 0 or x.shape[1] == 0:
        raise BlendError("empty validation set")
    if x.shape[1] != a.size:
        raise BlendError("members and actuals are not aligned")
    if not p_grid:
        raise BlendError("p_grid must not be empty")
    for p in p_grid:
        _check_p(p)
    steps = int(round(1.0 / granularity))
    if steps < 1 or abs(steps * granularity - 1.0) > 1e-9:
        raise BlendError("granularity must divide 1 evenly")

    weights, p = _optimize(x, a, p_grid, steps, seed)
    tables = {}
    if per_meter:
        if meters is None:
            raise BlendError("per-meter optimisation needs meters")
        meters = np.asarray(meters)
        for meter in np.unique(meters):
            sel = meters == meter
            w_m, p_m = _optimize(x[:, sel], a[sel], p_grid, steps, seed)
            tables[int(meter)] = {"weights": w_m, "p": p_m}
    return BlendSpec(names, weights, p, tables)
