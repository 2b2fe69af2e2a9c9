"""Search space, Gaussian-process surrogate and the seed-then-refine proposal rule."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from pcpipe.errors import SpaceExhausted
from pcpipe.pipeline.graph import FUSABLE, MAX_WORKERS, PipelineGraph

CAPACITIES = (1, 2, 4, 8, 16, 32, 64)
SEED_POINTS = 5
N_CANDIDATES = 512
NOISE = 1e-3
LENGTH_SCALES = (0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0)
_ENUMERATE_LIMIT = 4096


@dataclass(frozen=True)
class TuneConfig:
    """One point of the search space: op_id -> (workers, queue_capacity), plus fused map pairs."""

    ops: dict
    fused_pairs: tuple = ()
    objective: float | None = None

    def key(self) -> tuple:
        return tuple(sorted((k, tuple(v)) for k, v in self.ops.items())), tuple(sorted(map(tuple, self.fused_pairs)))

    def without_objective(self) -> "TuneConfig":
        return TuneConfig(dict(self.ops), tuple(self.fused_pairs))

    def with_objective(self, value: float) -> "TuneConfig":
        return TuneConfig(dict(self.ops), tuple(self.fused_pairs), value)


@dataclass(frozen=True)
class SearchSpace:
    """``workers[op] = (lo, hi)``; every op also picks a capacity from ``capacities``."""

    workers: dict
    capacities: tuple = CAPACITIES
    fuse_pairs: tuple = ()

    def __post_init__(self):
        if not self.workers or not self.capacities:
            raise ValueError("search space is empty")
        for op, (lo, hi) in self.workers.items():
            if not 1 <= lo <= hi <= MAX_WORKERS:
                raise ValueError(f"{op}: bad worker bounds ({lo}, {hi})")
        if any(not 1 <= c <= 64 for c in self.capacities):
            raise ValueError("capacities must lie in [1, 64]")

    @classmethod
    def for_graph(cls, graph: PipelineGraph, max_workers: int = 8, fuse: bool = False,
                  capacities=CAPACITIES) -> "SearchSpace":
        """Source and map ops get [1, max_workers]; the batch op (single poller) only tunes its sink capacity."""
        workers = {}
        for n in graph.nodes:
            if n.kind in ("source", "map"):
                workers[n.id] = (1, max_workers)
            elif n.kind == "batch":
                workers[n.id] = (1, 1)
        pairs = ()
        if fuse:
            nodes = graph.nodes
            pairs = tuple((a.id, b.id) for a, b in zip(nodes, nodes[1:])
                          if a.kind == b.kind == "map" and all(s.transform in FUSABLE for s in a.steps + b.steps))
        return cls(workers, tuple(capacities), pairs)

    @property
    def ops(self) -> list[str]:
        return list(self.workers)

    def size(self) -> int:
        n = 2 ** len(self.fuse_pairs)
        for lo, hi in self.workers.values():
            n *= (hi - lo + 1) * len(self.capacities)
        return n

    def contains(self, cfg: TuneConfig) -> bool:
        if set(cfg.ops) != set(self.workers):
            return False
        for op, (w, c) in cfg.ops.items():
            lo, hi = self.workers[op]
            if not lo <= w <= hi or c not in self.capacities:
                return False
        return set(map(tuple, cfg.fused_pairs)) <= set(self.fuse_pairs)

    def sample(self, rng: np.random.Generator) -> TuneConfig:
        ops = {op: (int(rng.integers(lo, hi + 1)), int(self.capacities[rng.integers(len(self.capacities))]))
               for op, (lo, hi) in self.workers.items()}
        fused = tuple(p for p in self.fuse_pairs if rng.random() < 0.5)
        return TuneConfig(ops, fused)

    def enumerate(self):
        per_op = [[(op, (w, c)) for w in range(lo, hi + 1) for c in self.capacities]
                  for op, (lo, hi) in self.workers.items()]
        fuse_sets = [tuple(p for p, on in zip(self.fuse_pairs, bits) if on)
                     for bits in itertools.product((0, 1), repeat=len(self.fuse_pairs))]
        for combo in itertools.product(*per_op):
            for fused in fuse_sets:
                yield TuneConfig(dict(combo), fused)

    def encode(self, cfg: TuneConfig) -> np.ndarray:
        """Min-max normalised vector; fixed dimensions are dropped."""
        x = []
        caps = list(self.capacities)
        for op, (lo, hi) in self.workers.items():
            w, c = cfg.ops[op]
            if hi > lo:
                x.append((w - lo) / (hi - lo))
            if len(caps) > 1:
                x.append(caps.index(c) / (len(caps) - 1))
        fused = set(map(tuple, cfg.fused_pairs))
        x.extend(1.0 if p in fused else 0.0 for p in self.fuse_pairs)
        return np.asarray(x, dtype=np.float64)


def default_config(graph: PipelineGraph) -> TuneConfig:
    return TuneConfig({n.id: (n.num_workers, n.queue_capacity) for n in graph.nodes if n.kind != "sink"})


@dataclass
class SurrogateState:
    """Observed (config, objective) pairs plus the surrogate's fitted length scale."""

    observed: list = field(default_factory=list)  # list[TuneConfig] with objective set
    length_scale: float = 0.5
    best_history: list = field(default_factory=list)

    def add(self, cfg: TuneConfig, value: float) -> TuneConfig:
        if cfg.key() in self.keys():
            raise ValueError("config already observed")
        rec = cfg.with_objective(float(value))
        self.observed.append(rec)
        prev = self.best_history[-1] if self.best_history else -math.inf
        self.best_history.append(max(prev, rec.objective))
        return rec

    def keys(self) -> set:
        return {c.key() for c in self.observed}

    @property
    def best(self) -> TuneConfig | None:
        if not self.observed:
            return None
        return max(self.observed, key=lambda c: c.objective)


# -- Gaussian process with an isotropic squared-exponential kernel

def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.maximum((a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T, 0.0)


class GaussianProcess:
    def __init__(self, length_scale: float | None = None, noise: float = NOISE):
        self.length_scale = length_scale
        self.noise = noise

    def _nll_fit(self, X, y, ell):
        K = np.exp(-_sqdist(X, X) / (2 * ell * ell)) + self.noise * np.eye(len(X))
        try:
            L = np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            return math.inf, None, None
        alpha = np.linalg.solve(L.T, np.linalg.solve(L, y))
        nll = 0.5 * y @ alpha + np.log(np.diag(L)).sum()
        return nll, L, alpha

    def fit(self, X: np.ndarray, y: np.ndarray) -> "GaussianProcess":
        self.X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.mean = y.mean()
        self.scale = y.std() or 1.0
        ys = (y - self.mean) / self.scale
        grid = [self.length_scale] if self.length_scale else LENGTH_SCALES
        best = None
        for ell in grid:  # marginal-likelihood grid search
            nll, L, alpha = self._nll_fit(self.X, ys, ell)
            if L is not None and (best is None or nll < best[0]):
                best = (nll, ell, L, alpha)
        if best is None:
            raise np.linalg.LinAlgError("kernel matrix not positive definite")
        _, self.ell, self.L, self.alpha = best
        return self

    def predict(self, Xs: np.ndarray):
        Ks = np.exp(-_sqdist(np.asarray(Xs, dtype=np.float64), self.X) / (2 * self.ell * self.ell))
        mu = Ks @ self.alpha
        v = np.linalg.solve(self.L, Ks.T)
        var = np.maximum(1.0 + self.noise - (v * v).sum(0), 1e-12)
        return mu * self.scale + self.mean, np.sqrt(var) * self.scale


_erf = np.vectorize(math.erf)


def expected_improvement(mu: np.ndarray, sigma: np.ndarray, best: float, xi: float = 0.01) -> np.ndarray:
    """EI for maximisation."""
    imp = mu - best - xi * max(abs(best), 1e-9)
    z = imp / sigma
    cdf = 0.5 * (1.0 + _erf(z / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    return imp * cdf + sigma * pdf


def _unobserved(space: SearchSpace, seen: set, rng, n: int, allowed) -> list[TuneConfig]:
    if space.size() <= _ENUMERATE_LIMIT:
        pool = [c for c in space.enumerate() if c.key() not in seen and allowed(c)]
        if len(pool) > n:
            pick = rng.choice(len(pool), size=n, replace=False)
            pool = [pool[i] for i in sorted(pick)]
        return pool
    out, keys = [], set(seen)
    for _ in range(50 * n):
        c = space.sample(rng)
        if c.key() not in keys and allowed(c):
            keys.add(c.key())
            out.append(c)
            if len(out) == n:
                break
    return out


def propose_config(state: SurrogateState, space: SearchSpace, phase: str | None = None, rng=None,
                   allowed=None) -> TuneConfig:
    """Seed phase: a uniform unobserved point. Refine phase: argmax EI over random candidates.

    ``allowed(cfg)`` is an optional constraint (e.g. the memory cap); rejected
    configs are never proposed.
    """
    rng = rng if rng is not None else np.random.default_rng()
    allowed = allowed or (lambda c: True)
    if phase is None:
        phase = "seed" if len(state.observed) < SEED_POINTS else "refine"
    seen = state.keys()
    if phase == "seed":
        pool = _unobserved(space, seen, rng, 1, allowed)
        if not pool:
            raise SpaceExhausted("every config in the search space has been observed")
        return pool[0]
    cands = _unobserved(space, seen, rng, N_CANDIDATES, allowed)
    if not cands:
        raise SpaceExhausted("every config in the search space has been observed")
    X = np.stack([space.encode(c) for c in state.observed])
    y = np.array([c.objective for c in state.observed])
    if X.shape[1] == 0:
        return cands[0]
    gp = GaussianProcess().fit(X, y)
    state.length_scale = gp.ell
    mu, sigma = gp.predict(np.stack([space.encode(c) for c in cands]))
    ei = expected_improvement(mu, sigma, y.max())
    return cands[int(np.argmax(ei))]


def optimize(objective, space: SearchSpace, n_iter: int = 10, rng=None, state: SurrogateState | None = None,
             allowed=None, on_step=None) -> SurrogateState:
    """Maximise ``objective(cfg)`` with ``n_iter`` proposals (seed phase, then EI refinement)."""
    rng = rng if rng is not None else np.random.default_rng()
    state = state or SurrogateState()
    for i in range(n_iter):
        try:
            cfg = propose_config(state, space, rng=rng, allowed=allowed)
        except SpaceExhausted:
            break
        rec = state.add(cfg, objective(cfg))
        if on_step is not None:
            on_step(i, rec, state)
    return state


__all__ = ["CAPACITIES", "GaussianProcess", "N_CANDIDATES", "SEED_POINTS", "SearchSpace", "SurrogateState",
           "TuneConfig", "default_config", "expected_improvement", "optimize", "propose_config"]
