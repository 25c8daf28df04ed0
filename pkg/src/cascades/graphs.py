"""Per-node cascade models over a directed graph.

Each node gets its own small model: a baseline for spontaneous events
plus kernel components whose parents are restricted to the node itself
and to its incoming neighbors. Because every node has little data, the
categorical type transitions are shrunk toward directions pooled across
all nodes, with the shrinkage strength picked on a validation window,
and per-neighbor rates can be blended with their pooled average.
"""

from __future__ import annotations

import json
import warnings
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from multiprocessing import get_context

import numpy as np

from . import delays as delay_mod
from .delays import DelaySpec, ExponentialDelay
from .engine import (CascadeModel, HomogeneousBaseline, KernelComponent,
                     e_step, expected_transition_counts, fit, m_step,
                     windowed_log_likelihood)
from .errors import ConfigError, DataError
from .events import CompositeMark, CompositeSchema, Dataset, Event
from .fertility import ConstantFertility
from .simulate import CausalForest, _poisson_count, substream
from .transitions import CategoricalMatrix, LabelMarginal

VARIANTS = ("no_neighbors", "shared_transition", "separate_transitions",
            "per_neighbor")
STRENGTH_GRID = (0.1, 1.0, 10.0, 100.0)
POOL_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
CONTEXTS = ("self", "neighbor", "shared")


class Graph:
    """Directed graph over string node ids; edges point influence flow
    (an edge u -> v lets events at u trigger events at v)."""

    def __init__(self, nodes, out_edges: dict):
        self.nodes = tuple(sorted(nodes))
        if len(set(self.nodes)) != len(self.nodes):
            raise DataError("duplicate node ids in graph")
        known = set(self.nodes)
        self.out = {}
        for v in self.nodes:
            targets = tuple(sorted(out_edges.get(v, ())))
            for u in targets:
                if u not in known:
                    raise DataError(f"edge {v!r} -> {u!r} points at an unknown node")
                if u == v:
                    raise DataError(f"self-loop on {v!r}; self-excitation is "
                                    "modeled separately, drop the edge")
            if len(set(targets)) != len(targets):
                raise DataError(f"duplicate edges out of {v!r}")
            self.out[v] = targets
        incoming: dict[str, list[str]] = {v: [] for v in self.nodes}
        for v in self.nodes:
            for u in self.out[v]:
                incoming[u].append(v)
        self.incoming = {v: tuple(sorted(us)) for v, us in incoming.items()}

    def __len__(self) -> int:
        return len(self.nodes)


def load_graph(path: str) -> Graph:
    """Read a graph from JSONL rows {"node": id, "out": [ids...]}."""
    nodes: list[str] = []
    out: dict[str, list[str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or "node" not in obj:
                raise DataError(f"{path}:{lineno}: expected an object with a 'node' key")
            unknown = set(obj) - {"node", "out"}
            if unknown:
                raise DataError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
            v = obj["node"]
            if not isinstance(v, str):
                raise DataError(f"{path}:{lineno}: node ids must be strings")
            if v in out:
                raise DataError(f"{path}:{lineno}: node {v!r} appears twice")
            targets = obj.get("out", [])
            if not isinstance(targets, list) or not all(isinstance(u, str) for u in targets):
                raise DataError(f"{path}:{lineno}: 'out' must be a list of node ids")
            nodes.append(v)
            out[v] = targets
    return Graph(nodes, out)


def write_graph(graph: Graph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in graph.nodes:
            fh.write(json.dumps({"node": v, "out": list(graph.out[v])}) + "\n")


@dataclass(frozen=True)
class Hyperparams:
    """Shared shrinkage state: per-context Dirichlet directions (row
    distributions over child types) and one strength used for them all."""

    directions: dict
    strength: float

    @staticmethod
    def uniform(n_types: int, strength: float = 1.0) -> "Hyperparams":
        row = tuple(1.0 / n_types for _ in range(n_types))
        mat = tuple(row for _ in range(n_types))
        return Hyperparams({ctx: mat for ctx in CONTEXTS}, strength)


def regularized_rates(triggered, revisions, pool_weight: float) -> np.ndarray:
    """Blend per-neighbor rates with their pooled value.

    rate_i = w * (sum n / sum m) + (1 - w) * n_i / m_i, with n_i the
    expected count triggered by neighbor i and m_i its raw revision
    count. Entries with m_i = 0 fall back to the pooled part alone, and
    the blend preserves sum(rate_i * m_i) = sum(n_i) exactly for any w.
    """
    n = np.asarray(triggered, dtype=np.float64)
    m = np.asarray(revisions, dtype=np.float64)
    if n.shape != m.shape:
        raise DataError("triggered and revision counts must align")
    if not 0.0 <= pool_weight <= 1.0:
        raise ConfigError("pool weight must lie in [0, 1]")
    if np.any(n < 0) or np.any(m < 0):
        raise DataError("counts must be nonnegative")
    total_m = m.sum()
    pooled = n.sum() / total_m if total_m > 0 else 0.0
    own = np.divide(n, m, out=np.zeros_like(n), where=m > 0)
    return pool_weight * pooled + (1.0 - pool_weight) * own


def _smoothed_marginal(d: Dataset) -> LabelMarginal:
    """Global type frequencies with half-count smoothing, so every type
    keeps positive baseline mass even if it never occurs."""
    L = d.n_label_values
    counts = (np.bincount(d.label_index, minlength=L).astype(np.float64)
              if len(d) else np.zeros(L))
    probs = (counts + 0.5) / (counts.sum() + 0.5 * L)
    return LabelMarginal(tuple(probs.tolist()))


def node_model(graph: Graph, d: Dataset, v: str, variant: str,
               hyper: Hyperparams, strength: float, delay_init: DelaySpec,
               window: tuple[float, float]) -> tuple[CascadeModel, tuple[str, ...]]:
    """Initial model for one node, with the per-component shrinkage
    context names it pools statistics under."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if v not in graph.out:
        raise ConfigError(f"node {v!r} is not in the graph")
    a, b = window
    duration = b - a
    if duration <= 0:
        raise DataError("node fits need a window of positive length")
    L = d.n_label_values
    marginal = _smoothed_marginal(d)
    mask_v = d.node_ids == v
    n_v = int(np.sum(mask_v & (d.times > a) & (d.times <= b)))
    baseline = HomogeneousBaseline(max(n_v, 0.5) / duration, marginal)

    uniform_dir = tuple(tuple(1.0 / L for _ in range(L)) for _ in range(L))

    def trans(ctx: str) -> CategoricalMatrix:
        rows = tuple(marginal.probs for _ in range(L))
        direction = hyper.directions.get(ctx, uniform_dir) if strength > 0 else None
        return CategoricalMatrix(rows, prior_direction=direction,
                                 prior_strength=strength if strength > 0 else 0.0)

    neighbors = graph.incoming[v]
    comps: list[KernelComponent] = []
    contexts: list[str] = []
    if variant == "no_neighbors":
        comps.append(KernelComponent("self", ConstantFertility(0.3), trans("self"),
                                     delay_init, sources=(v,)))
        contexts.append("self")
    elif variant == "shared_transition":
        shared = trans("shared")
        comps.append(KernelComponent("self", ConstantFertility(0.3), shared,
                                     delay_init, sources=(v,),
                                     transition_group="shared"))
        contexts.append("shared")
        if neighbors:
            comps.append(KernelComponent("nbrs", ConstantFertility(0.3), shared,
                                         delay_init, sources=neighbors,
                                         transition_group="shared"))
            contexts.append("shared")
    elif variant == "separate_transitions":
        comps.append(KernelComponent("self", ConstantFertility(0.3), trans("self"),
                                     delay_init, sources=(v,)))
        contexts.append("self")
        if neighbors:
            comps.append(KernelComponent("nbrs", ConstantFertility(0.3),
                                         trans("neighbor"), delay_init,
                                         sources=neighbors))
            contexts.append("neighbor")
    else:  # per_neighbor
        comps.append(KernelComponent("self", ConstantFertility(0.3), trans("self"),
                                     delay_init, sources=(v,)))
        contexts.append("self")
        shared = trans("neighbor")
        for u in neighbors:
            comps.append(KernelComponent(f"nbr:{u}",
                                         ConstantFertility(0.3 / len(neighbors)),
                                         shared, delay_init, sources=(u,),
                                         transition_group="nbr", delay_group="nbr"))
            contexts.append("neighbor")
    model = CascadeModel(baseline, tuple(comps), normalization=False)
    return model, tuple(contexts)


@dataclass
class NodeFit:
    node: str
    model: CascadeModel
    train_ll: float
    counts: dict


def _fit_per_neighbor(model: CascadeModel, d: Dataset, mask: np.ndarray,
                      window: tuple[float, float], neighbors: tuple[str, ...],
                      pool_weight: float, max_iters: int, tol: float) -> tuple[CascadeModel, float]:
    """EM with the neighbor rates replaced by their shrunken blend after
    every M-step. Not exact EM, so no monotonicity is enforced."""
    a, b = window
    nbr_idx = [ci for ci, comp in enumerate(model.components)
               if comp.name.startswith("nbr:")]
    m_counts = np.array([np.sum((d.node_ids == u) & (d.times < b)) for u in neighbors],
                        dtype=np.float64)
    ll_prev = None
    ll = windowed_log_likelihood(model, d, mask, window)
    for _ in range(max_iters):
        resp = e_step(model, d, mask, window)
        model = m_step(model, d, resp, mask, window, update_baseline_mark=False)
        n = np.array([resp.comp_z[ci].sum() for ci in nbr_idx])
        rates = regularized_rates(n, m_counts, pool_weight)
        comps = list(model.components)
        for k, ci in enumerate(nbr_idx):
            comps[ci] = replace(comps[ci], fertility=ConstantFertility(float(rates[k])))
        model = replace(model, components=tuple(comps))
        ll_prev, ll = ll, windowed_log_likelihood(model, d, mask, window)
        if abs(ll - ll_prev) < tol * max(abs(ll), 1e-12):
            break
    return model, ll


def fit_node(graph: Graph, d: Dataset, v: str, variant: str, hyper: Hyperparams,
             strength: float, *, pool_weight: float = 0.5,
             delay_init: DelaySpec = ExponentialDelay(1.0),
             window: tuple[float, float] | None = None,
             max_iters: int = 25, tol: float = 1e-5) -> NodeFit:
    """Fit one node's model on the given window and collect its pooled
    transition statistics keyed by shrinkage context."""
    if window is None:
        window = (d.start, d.horizon)
    model, contexts = node_model(graph, d, v, variant, hyper, strength,
                                 delay_init, window)
    mask = d.node_ids == v
    if variant == "per_neighbor" and graph.incoming[v]:
        model, ll = _fit_per_neighbor(model, d, mask, window, graph.incoming[v],
                                      pool_weight, max_iters, tol)
    else:
        report = fit(model, d, max_iters, tol, children=mask, window=window,
                     update_baseline_mark=False, on_decrease="warn",
                     engine="direct")
        model, ll = report.model, report.ll_trace[-1]
    resp = e_step(model, d, mask, window)
    per_comp = expected_transition_counts(model, d, resp)
    counts: dict[str, np.ndarray] = {}
    for ctx, mat in zip(contexts, per_comp):
        if mat is not None:
            counts[ctx] = counts.get(ctx, 0) + mat
    return NodeFit(v, model, ll, counts)


def _node_task(payload):
    """Evaluate every (strength, pool weight) candidate for one node:
    validation score from a fit on the head of the window, plus a final
    fit on the whole window. Runs in worker processes."""
    (graph, d, v, variant, hyper, candidates, cut, delay_init,
     max_iters, tol) = payload
    a, b = d.start, d.horizon
    mask = d.node_ids == v
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for cand in candidates:
            strength, pool_weight = cand
            head = fit_node(graph, d, v, variant, hyper, strength,
                            pool_weight=pool_weight if pool_weight is not None else 0.5,
                            delay_init=delay_init, window=(a, cut),
                            max_iters=max_iters, tol=tol)
            val_ll = windowed_log_likelihood(head.model, d, mask, (cut, b))
            full = fit_node(graph, d, v, variant, hyper, strength,
                            pool_weight=pool_weight if pool_weight is not None else 0.5,
                            delay_init=delay_init, window=(a, b),
                            max_iters=max_iters, tol=tol)
            out[cand] = (float(val_ll), full)
    return v, out


def update_hyperparams(counts_by_context: dict, val_by_strength: dict,
                       grid=STRENGTH_GRID) -> Hyperparams:
    """Next round's shared shrinkage state.

    Directions are the row-normalized pooled transition counts per
    context (zero rows fall back to uniform); the strength is the grid
    value with the best total validation score, smallest value on ties,
    with a warning when the winner sits on the grid boundary.
    """
    grid = tuple(grid)
    best = min(grid, key=lambda c: (-val_by_strength[c], c))
    if len(grid) > 1 and best in (min(grid), max(grid)):
        warnings.warn(f"selected shrinkage strength {best} lies on the grid "
                      "boundary; consider widening the grid")
    directions = {}
    for ctx, counts in counts_by_context.items():
        counts = np.asarray(counts, dtype=np.float64)
        L = counts.shape[0]
        rows = np.empty_like(counts)
        for r in range(L):
            total = counts[r].sum()
            rows[r] = counts[r] / total if total > 0 else 1.0 / L
        directions[ctx] = tuple(map(tuple, rows))
    return Hyperparams(directions, float(best))


@dataclass
class RoundResult:
    fits: dict
    hyper: Hyperparams
    strength: float
    pool_weight: float | None
    val_total: float
    val_table: list


def fit_round(graph: Graph, d: Dataset, variant: str, hyper: Hyperparams, *,
              strength_grid=STRENGTH_GRID, pool_grid=POOL_GRID,
              val_fraction: float = 0.25,
              delay_init: DelaySpec = ExponentialDelay(1.0),
              max_iters: int = 25, tol: float = 1e-5,
              workers: int = 1) -> RoundResult:
    """One alternation: fit every node at every candidate shrinkage
    setting, pick the candidate with the best summed validation score,
    then refresh the pooled directions from the winning fits.

    Work is farmed over nodes with forked workers; results are reduced
    in sorted node order, so the outcome does not depend on the worker
    count.
    """
    if not isinstance(d.schema, CompositeSchema):
        raise DataError("graph fitting needs composite-marked events")
    unknown = set(np.unique(d.node_ids).tolist()) - set(graph.nodes)
    if unknown:
        raise DataError(f"events mention nodes missing from the graph: {sorted(unknown)}")
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val_fraction must lie strictly between 0 and 1")
    a, b = d.start, d.horizon
    cut = a + (1.0 - val_fraction) * (b - a)
    if variant == "per_neighbor":
        candidates = [(float(c), float(w)) for c in strength_grid for w in pool_grid]
    else:
        candidates = [(float(c), None) for c in strength_grid]
    payloads = [(graph, d, v, variant, hyper, candidates, cut, delay_init,
                 max_iters, tol) for v in graph.nodes]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers,
                                 mp_context=get_context("fork")) as pool:
            results = list(pool.map(_node_task, payloads))
    else:
        results = [_node_task(p) for p in payloads]

    totals = {cand: 0.0 for cand in candidates}
    for _, per_cand in results:
        for cand in candidates:
            totals[cand] += per_cand[cand][0]
    # best summed validation score; ties prefer stronger pooling, then
    # smaller strength
    def sort_key(cand):
        strength, w = cand
        return (-totals[cand], -(w if w is not None else 0.0), strength)

    best = min(candidates, key=sort_key)
    val_by_strength = {}
    for cand in candidates:
        c = cand[0]
        val_by_strength[c] = max(val_by_strength.get(c, -np.inf), totals[cand])

    fits = {v: per_cand[best][1] for v, per_cand in results}
    pooled: dict[str, np.ndarray] = {}
    for v in graph.nodes:
        for ctx, mat in fits[v].counts.items():
            pooled[ctx] = pooled.get(ctx, 0) + mat
    hyper_next = update_hyperparams(pooled, val_by_strength, tuple(strength_grid))
    table = [(cand[0], cand[1], totals[cand]) for cand in candidates]
    return RoundResult(fits=fits, hyper=hyper_next, strength=best[0],
                       pool_weight=best[1], val_total=totals[best],
                       val_table=table)


@dataclass
class GraphFitResult:
    models: dict
    hyper: Hyperparams
    rounds: list


def fit_graph(graph: Graph, d: Dataset, variant: str, *, rounds: int = 2,
              strength_grid=STRENGTH_GRID, pool_grid=POOL_GRID,
              val_fraction: float = 0.25,
              delay_init: DelaySpec = ExponentialDelay(1.0),
              max_iters: int = 25, tol: float = 1e-5, workers: int = 1,
              hyper: Hyperparams | None = None) -> GraphFitResult:
    """Alternate node fits and hyperparameter refreshes for a fixed
    number of rounds; later rounds shrink toward directions learned
    from the whole graph in earlier ones."""
    if rounds < 1:
        raise ConfigError("at least one round is required")
    if hyper is None:
        hyper = Hyperparams.uniform(d.n_label_values)
    history = []
    result = None
    for _ in range(rounds):
        result = fit_round(graph, d, variant, hyper, strength_grid=strength_grid,
                           pool_grid=pool_grid, val_fraction=val_fraction,
                           delay_init=delay_init, max_iters=max_iters, tol=tol,
                           workers=workers)
        hyper = result.hyper
        history.append(result)
    models = {v: nf.model for v, nf in result.fits.items()}
    return GraphFitResult(models=models, hyper=hyper, rounds=history)


def graph_log_likelihood(models: dict, d: Dataset, graph: Graph,
                         window: tuple[float, float] | None = None) -> float:
    """Sum of each node's windowed log likelihood under its own model."""
    total = 0.0
    for v in graph.nodes:
        mask = d.node_ids == v
        total += windowed_log_likelihood(models[v], d, mask, window)
    return float(total)


def simulate_graph(graph: Graph, horizon: float, seed: int, *,
                   type_marginal, base_rate, self_rate: float,
                   neighbor_rate: float, transition: CategoricalMatrix,
                   delay: DelaySpec,
                   max_events: int = 1_000_000) -> tuple[Dataset, CausalForest]:
    """Draw coupled node processes on (0, horizon].

    Every node emits baseline events with its own rate and iid types
    from the marginal; each event then triggers offspring at its own
    node (rate self_rate) and at each outgoing neighbor (rate
    neighbor_rate), with types drawn from the transition row of the
    parent type. base_rate is a scalar or a per-node dict.
    """
    if horizon <= 0 or not np.isfinite(horizon):
        raise ConfigError(f"horizon must be positive and finite, got {horizon}")
    marginal = np.asarray(type_marginal, dtype=np.float64)
    L = marginal.size
    theta = transition.as_array
    if theta.shape != (L, L):
        raise ConfigError("transition size does not match the type marginal")
    rng = substream(seed, "graph")
    schema = CompositeSchema(L, frozenset(graph.nodes))

    def draw_type(probs) -> int:
        cum = np.cumsum(probs)
        return int(np.clip(np.searchsorted(cum, rng.random() * cum[-1],
                                           side="right"), 0, L - 1)) + 1

    times: list[float] = []
    marks: list[CompositeMark] = []
    parents: list[int] = []
    gens: list[int] = []
    queue: deque[int] = deque()
    for v in graph.nodes:
        rate = base_rate[v] if isinstance(base_rate, dict) else float(base_rate)
        count = _poisson_count(rng, rate * horizon)
        node_times = np.sort(rng.random(count) * horizon)
        for t in node_times:
            times.append(float(t))
            marks.append(CompositeMark(draw_type(marginal), v))
            parents.append(-1)
            gens.append(0)
            queue.append(len(times) - 1)

    while queue:
        i = queue.popleft()
        t_i, mark_i = times[i], marks[i]
        row = theta[mark_i.type - 1]
        targets = (mark_i.node,) + graph.out[mark_i.node]
        for k, target in enumerate(targets):
            rate = self_rate if k == 0 else neighbor_rate
            count = _poisson_count(rng, rate)
            if count == 0:
                continue
            deltas = np.atleast_1d(delay_mod.sample(delay, rng, count))
            for dt in deltas:
                t_child = t_i + float(dt)
                if t_child > horizon:
                    continue
                times.append(t_child)
                marks.append(CompositeMark(draw_type(row), target))
                parents.append(i)
                gens.append(gens[i] + 1)
                queue.append(len(times) - 1)
                if len(times) > max_events:
                    raise DataError(f"graph simulation exceeded max_events={max_events}")

    order = np.argsort(np.asarray(times), kind="stable")
    inverse = np.empty(len(order), dtype=np.int64)
    inverse[order] = np.arange(len(order), dtype=np.int64)
    events = [Event(times[j], marks[j]) for j in order]
    d = Dataset(events, horizon, schema, _sorted=True)
    parent_arr = np.array([-1 if parents[j] < 0 else int(inverse[parents[j]])
                           for j in order], dtype=np.int64)
    comp_arr = np.where(parent_arr >= 0, 0, -1).astype(np.int64)
    gen_arr = np.array([gens[j] for j in order], dtype=np.int64)
    return d, CausalForest(parent_arr, comp_arr, gen_arr)
