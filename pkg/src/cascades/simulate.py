"""Forward simulation of cascade models.

Events are generated by the branching construction: baseline events are
drawn over the window first, then each event independently spawns
offspring under every kernel component. The true cause of every event
is recorded in a causal forest so inference output can be scored
against it.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import stats as sp_stats

from . import delays as delay_mod
from . import fertility as fert_mod
from . import transitions as trans_mod
from .engine import (CascadeModel, HomogeneousBaseline, PeriodicBaseline,
                     Responsibilities, baseline_integral, validate_model)
from .errors import ConfigError, DataError, NumericalError
from .events import (BinarySchema, CompositeSchema, Dataset, Event,
                     LabelSchema, MarkSchema)
from .transitions import FeaturePrior, LabelMarginal


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator derived from one user seed and a role name.

    The name is hashed with sha256 so the mapping is stable across runs
    and platforms, unlike the builtin hash.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


@dataclass
class CausalForest:
    """True generation structure of a simulated dataset.

    Arrays are aligned with the dataset's sorted event ids. Roots have
    parent -1 and component -1; triggered events point at the parent's
    event id and the component index that produced them.
    """

    parents: np.ndarray
    components: np.ndarray
    generations: np.ndarray

    def __len__(self) -> int:
        return len(self.parents)

    @property
    def n_roots(self) -> int:
        return int(np.sum(self.parents < 0))


def _poisson_count(rng: np.random.Generator, mu: float) -> int:
    """Poisson draw by inverting one uniform, so each count consumes
    exactly one stream value regardless of its magnitude."""
    if mu < 0 or not np.isfinite(mu):
        raise NumericalError(f"offspring mean must be finite and nonnegative, got {mu}")
    if mu == 0.0:
        rng.random()
        return 0
    return int(sp_stats.poisson.ppf(rng.random(), mu))


def _default_schema(model: CascadeModel) -> MarkSchema:
    mark = model.baseline.mark
    if isinstance(mark, FeaturePrior):
        return BinarySchema(tuple(f"f{i + 1}" for i in range(len(mark.probs))))
    return LabelSchema(len(mark.probs))


def _baseline_times(baseline, horizon: float, rng: np.random.Generator) -> np.ndarray:
    total = baseline_integral(baseline, 0.0, horizon)
    n = _poisson_count(rng, total)
    if n == 0:
        return np.zeros(0)
    if isinstance(baseline, HomogeneousBaseline):
        return np.sort(rng.random(n) * horizon)
    # piecewise-constant rate: invert the cumulative integral segment-wise
    k = len(baseline.rates)
    width = baseline.period / k
    n_seg = int(np.ceil(horizon / width + 1e-9))
    left = np.arange(n_seg) * width
    right = np.minimum(left + width, horizon)
    seg_rates = np.asarray(baseline.rates)[np.arange(n_seg) % k]
    mass = seg_rates * np.maximum(right - left, 0.0)
    cum = np.concatenate([[0.0], np.cumsum(mass)])
    u = rng.random(n) * cum[-1]
    idx = np.clip(np.searchsorted(cum, u, side="right") - 1, 0, n_seg - 1)
    times = left[idx] + (u - cum[idx]) / seg_rates[idx]
    return np.sort(np.minimum(times, horizon))


def simulate(model: CascadeModel, horizon: float, seed: int,
             schema: MarkSchema | None = None,
             max_events: int = 10_000_000) -> tuple[Dataset, CausalForest]:
    """Draw one realization on (0, horizon] with its causal forest.

    Baseline events are generated first (times, then marks, in time
    order), then the offspring queue is processed first-in first-out:
    for each event and each component, an offspring count, then all
    delays, then marks for the children that land inside the horizon.
    Children past the horizon are discarded after their delay is drawn,
    which keeps the stream layout independent of the horizon clipping.
    Raises when more than max_events accumulate, which usually means
    the model is supercritical.
    """
    if schema is None:
        schema = _default_schema(model)
    if isinstance(schema, CompositeSchema):
        raise ConfigError("composite marks are simulated per graph, "
                          "use simulate_graph instead")
    validate_model(model, schema)
    if horizon <= 0 or not np.isfinite(horizon):
        raise ConfigError(f"horizon must be positive and finite, got {horizon}")
    rng = substream(seed, "cascade")

    root_times = _baseline_times(model.baseline, horizon, rng)
    times: list[float] = []
    marks: list = []
    parents: list[int] = []
    comp_of: list[int] = []
    gens: list[int] = []
    queue: deque[int] = deque()
    for t in root_times:
        times.append(float(t))
        marks.append(trans_mod.sample_mark(model.baseline.mark, rng))
        parents.append(-1)
        comp_of.append(-1)
        gens.append(0)
        queue.append(len(times) - 1)

    processed = 0
    while queue:
        i = queue.popleft()
        processed += 1
        t_i, mark_i = times[i], marks[i]
        for c, comp in enumerate(model.components):
            mu = fert_mod.evaluate(comp.fertility, mark_i)
            count = _poisson_count(rng, mu)
            if count == 0:
                continue
            deltas = np.atleast_1d(delay_mod.sample(comp.delay, rng, count))
            for dt in deltas:
                t_child = t_i + float(dt)
                if t_child > horizon:
                    continue
                child_mark = trans_mod.sample_child_mark(comp.transition, mark_i, rng)
                times.append(t_child)
                marks.append(child_mark)
                parents.append(i)
                comp_of.append(c)
                gens.append(gens[i] + 1)
                queue.append(len(times) - 1)
                if len(times) > max_events:
                    grown = len(times) - len(root_times)
                    ratio = grown / max(processed, 1)
                    raise NumericalError(
                        f"simulation exceeded max_events={max_events}; mean "
                        f"offspring so far is about {ratio:.2f}, the model "
                        "may be supercritical")

    order = np.argsort(np.asarray(times), kind="stable")
    inverse = np.empty(len(order), dtype=np.int64)
    inverse[order] = np.arange(len(order), dtype=np.int64)
    events = [Event(times[j], marks[j]) for j in order]
    d = Dataset(events, horizon, schema, _sorted=True)
    parent_arr = np.array([-1 if parents[j] < 0 else int(inverse[parents[j]])
                           for j in order], dtype=np.int64)
    comp_arr = np.array([comp_of[j] for j in order], dtype=np.int64)
    gen_arr = np.array([gens[j] for j in order], dtype=np.int64)
    return d, CausalForest(parent_arr, comp_arr, gen_arr)


def parent_recovery_score(forest: CausalForest, resp: Responsibilities,
                          triggered_only: bool = True) -> float:
    """Fraction of events whose most responsible cause has the true parent.

    Component identity is ignored; picking the right parent under a
    different component still counts. With triggered_only, root events
    are left out of the denominator; otherwise a root is correct when
    the baseline wins the argmax.
    """
    if len(forest) != resp.n:
        raise DataError("forest and responsibilities describe different datasets")
    correct = 0
    total = 0
    for i in range(resp.n):
        true_parent = int(forest.parents[i])
        if triggered_only and true_parent < 0:
            continue
        total += 1
        cause = resp.argmax_cause(i)
        if cause is None:
            correct += true_parent < 0
        else:
            correct += cause[0] == true_parent
    if total == 0:
        raise DataError("no events to score")
    return correct / total


def write_forest(forest: CausalForest, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(forest)):
            fh.write(json.dumps({"id": i, "parent": int(forest.parents[i]),
                                 "component": int(forest.components[i]),
                                 "gen": int(forest.generations[i])}) + "\n")


def load_forest(path: str) -> CausalForest:
    parents: list[int] = []
    comps: list[int] = []
    gens: list[int] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if obj.get("id") != len(parents):
                raise DataError(f"{path}:{lineno}: forest ids must be 0,1,2,...")
            parents.append(int(obj["parent"]))
            comps.append(int(obj["component"]))
            gens.append(int(obj["gen"]))
    return CausalForest(np.asarray(parents, dtype=np.int64),
                        np.asarray(comps, dtype=np.int64),
                        np.asarray(gens, dtype=np.int64))
