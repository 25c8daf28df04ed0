"""Mark priors and parent-to-child mark transition kernels.

Transitions are conditional mark distributions g(child mark | parent
mark). Four kinds are supported: identity (child copies the parent),
prior (child drawn independently of the parent), a per-feature
copy-or-resample mixture for binary marks, and a row-stochastic
categorical matrix for label marks with optional Dirichlet shrinkage.
For composite (type, node) marks transitions act on the type coordinate.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Union

import numpy as np

from .errors import DataError, NumericalError
from .events import (BinaryMark, BinarySchema, CompositeMark, CompositeSchema,
                     Dataset, LabelMark, LabelSchema, Mark)


@dataclass(frozen=True)
class FeaturePrior:
    """Independent Bernoulli marginals, one per binary feature."""

    probs: tuple[float, ...]

    def __post_init__(self):
        if any(not 0.0 <= p <= 1.0 for p in self.probs):
            raise DataError("feature prior probabilities must lie in [0, 1]")

    @cached_property
    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=np.float64)


@dataclass(frozen=True)
class LabelMarginal:
    """Categorical marginal over labels 1..L."""

    probs: tuple[float, ...]

    def __post_init__(self):
        if any(p < 0 for p in self.probs):
            raise DataError("label marginal probabilities must be nonnegative")
        if abs(sum(self.probs) - 1.0) > 1e-9:
            raise DataError("label marginal probabilities must sum to one")

    @cached_property
    def as_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=np.float64)


MarkDistribution = Union[FeaturePrior, LabelMarginal]


def _mark_label_index(mark: Mark) -> int:
    if isinstance(mark, LabelMark):
        return mark.label - 1
    if isinstance(mark, CompositeMark):
        return mark.type - 1
    raise DataError("expected a label or composite mark")


def prior_prob(prior: FeaturePrior, mark: BinaryMark) -> float:
    """Probability of a binary mark under independent feature marginals."""
    p = prior.as_array
    if len(mark.bits) != p.size:
        raise DataError("mark width does not match the prior")
    x = np.asarray(mark.bits, dtype=np.float64)
    return float(np.prod(np.where(x == 1, p, 1.0 - p)))


def mark_prob(dist: MarkDistribution, mark: Mark) -> float:
    if isinstance(dist, FeaturePrior):
        if not isinstance(mark, BinaryMark):
            raise DataError("feature prior expects binary marks")
        return prior_prob(dist, mark)
    idx = _mark_label_index(mark)
    if not 0 <= idx < len(dist.probs):
        raise DataError(f"label {idx + 1} outside the marginal's range")
    return float(dist.probs[idx])


def fit_prior(d: Dataset) -> FeaturePrior:
    """Empirical per-feature frequencies of a binary dataset."""
    if not isinstance(d.schema, BinarySchema):
        raise DataError("fit_prior requires a binary schema")
    if len(d) == 0:
        raise DataError("fit_prior needs at least one event")
    return FeaturePrior(tuple((d.feature_matrix.mean(axis=0)).tolist()))


def fit_prior_weighted(feature_matrix: np.ndarray, weights: np.ndarray) -> FeaturePrior:
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise DataError("weighted prior fit needs positive total weight")
    p = (feature_matrix.T.astype(np.float64) @ w) / total
    return FeaturePrior(tuple(np.clip(p, 0.0, 1.0).tolist()))


def fit_marginal(d: Dataset) -> LabelMarginal:
    """Empirical label frequencies of a label or composite dataset."""
    counts = np.bincount(d.label_index, minlength=d.n_label_values).astype(np.float64)
    if counts.sum() <= 0:
        raise DataError("fit_marginal needs at least one event")
    return LabelMarginal(tuple((counts / counts.sum()).tolist()))


def fit_marginal_weighted(label_index: np.ndarray, weights: np.ndarray,
                          n_labels: int) -> LabelMarginal:
    sums = np.bincount(label_index, weights=weights, minlength=n_labels)
    total = sums.sum()
    if total <= 0:
        raise DataError("weighted marginal fit needs positive total weight")
    return LabelMarginal(tuple((sums / total).tolist()))


def sample_mark(dist: MarkDistribution, rng: np.random.Generator) -> Mark:
    if isinstance(dist, FeaturePrior):
        bits = tuple(int(u < p) for u, p in zip(rng.random(len(dist.probs)), dist.probs))
        return BinaryMark(bits)
    cum = np.cumsum(dist.probs)
    idx = int(np.clip(np.searchsorted(cum, rng.random(), side="right"),
                      0, len(dist.probs) - 1))
    return LabelMark(idx + 1)


# ---------------------------------------------------------------------------
# transition kernels


@dataclass(frozen=True)
class IdentityTransition:
    """Child mark equals the parent mark (type equality for composites)."""


@dataclass(frozen=True)
class PriorTransition:
    """Child mark drawn from a fixed marginal, independent of the parent."""

    dist: MarkDistribution


@dataclass(frozen=True)
class FeatureMixture:
    """Per-feature copy-or-resample kernel for binary marks.

    Each child feature independently copies the parent's value with
    probability 1 - resample_prob and otherwise redraws from the prior
    marginal for that feature. resample_prob = 0 is the identity and
    resample_prob = 1 is the fully independent prior.
    """

    resample_prob: float
    prior: FeaturePrior

    def __post_init__(self):
        if not 0.0 <= self.resample_prob <= 1.0:
            raise DataError("resample_prob must lie in [0, 1]")


@dataclass(frozen=True)
class CategoricalMatrix:
    """Row-stochastic transition matrix over labels 1..L.

    ``prior_direction`` and ``prior_strength`` describe optional
    Dirichlet shrinkage applied when rows are refit from expected
    counts. The direction may be a single simplex applied to every row
    or one simplex per row.
    """

    matrix: tuple[tuple[float, ...], ...]
    prior_direction: tuple | None = None
    prior_strength: float = 0.0

    def __post_init__(self):
        rows = np.asarray(self.matrix, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] != rows.shape[1]:
            raise DataError("transition matrix must be square")
        if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-9):
            raise DataError("transition matrix rows must be distributions")
        if self.prior_strength < 0:
            raise DataError("Dirichlet strength must be nonnegative")

    @cached_property
    def as_array(self) -> np.ndarray:
        return np.asarray(self.matrix, dtype=np.float64)


TransitionSpec = Union[IdentityTransition, PriorTransition, FeatureMixture,
                       CategoricalMatrix]


def _marks_equal(a: Mark, b: Mark) -> bool:
    if isinstance(a, CompositeMark) and isinstance(b, CompositeMark):
        return a.type == b.type
    return a == b


def trans_prob(spec: TransitionSpec, parent: Mark, child: Mark) -> float:
    """Conditional probability g(child | parent)."""
    if isinstance(spec, IdentityTransition):
        return 1.0 if _marks_equal(parent, child) else 0.0
    if isinstance(spec, PriorTransition):
        return mark_prob(spec.dist, child)
    if isinstance(spec, FeatureMixture):
        if not isinstance(parent, BinaryMark) or not isinstance(child, BinaryMark):
            raise DataError("feature mixture transitions need binary marks")
        gamma = spec.resample_prob
        p = spec.prior.as_array
        xp = np.asarray(parent.bits, dtype=np.float64)
        xc = np.asarray(child.bits, dtype=np.float64)
        q = np.where(xc == 1, p, 1.0 - p)
        factors = (1.0 - gamma) * (xp == xc) + gamma * q
        if np.any(factors == 0.0):
            return 0.0
        # accumulate in log space so long products cannot underflow
        return float(np.exp(np.log(factors).sum()))
    if isinstance(spec, CategoricalMatrix):
        return float(spec.as_array[_mark_label_index(parent), _mark_label_index(child)])
    raise DataError(f"unknown transition spec {type(spec).__name__}")


def sample_child_mark(spec: TransitionSpec, parent: Mark,
                      rng: np.random.Generator) -> Mark:
    """Draw a child mark given the parent's; composite node handling is
    the caller's job (only the type coordinate is produced here)."""
    if isinstance(spec, IdentityTransition):
        return parent
    if isinstance(spec, PriorTransition):
        return sample_mark(spec.dist, rng)
    if isinstance(spec, FeatureMixture):
        width = len(spec.prior.probs)
        resample = rng.random(width) < spec.resample_prob
        draws = rng.random(width) < spec.prior.as_array
        bits = tuple(int(draws[i]) if resample[i] else parent.bits[i]
                     for i in range(width))
        return BinaryMark(bits)
    if isinstance(spec, CategoricalMatrix):
        row = spec.as_array[_mark_label_index(parent)]
        cum = np.cumsum(row)
        idx = int(np.clip(np.searchsorted(cum, rng.random(), side="right"),
                          0, row.size - 1))
        return LabelMark(idx + 1)
    raise DataError(f"unknown transition spec {type(spec).__name__}")


def enumerate_marks(schema) -> list[Mark]:
    """All marks of a small finite schema, in a fixed order (tests, checks)."""
    if isinstance(schema, BinarySchema):
        if schema.width > 12:
            raise DataError("mark enumeration supports at most 12 features")
        marks = []
        for code in range(1 << schema.width):
            bits = tuple((code >> i) & 1 for i in range(schema.width))
            marks.append(BinaryMark(bits))
        return marks
    if isinstance(schema, LabelSchema):
        return [LabelMark(i + 1) for i in range(schema.n_labels)]
    if isinstance(schema, CompositeSchema):
        raise DataError("composite marks cannot be enumerated without a node set")
    raise DataError(f"unsupported schema {type(schema).__name__}")


# ---------------------------------------------------------------------------
# fitting


def mixture_stats(pairs: Sequence[tuple[BinaryMark, BinaryMark, float]],
                  prior: FeaturePrior) -> np.ndarray:
    """Aggregate weighted (parent, child) pairs into an (F, 2, 2) table.

    Entry [f, b, m] is the total weight of pair-features with child bit
    b and match indicator m. Together with the prior this is sufficient
    for fitting the resample probability.
    """
    width = len(prior.probs)
    table = np.zeros((width, 2, 2), dtype=np.float64)
    for parent, child, w in pairs:
        if w < 0:
            raise DataError("pair weights must be nonnegative")
        for f in range(width):
            b = child.bits[f]
            m = int(parent.bits[f] == child.bits[f])
            table[f, b, m] += w
    return table


def fit_mixture_from_stats(table: np.ndarray, prior: FeaturePrior,
                           tol: float = 1e-8) -> float:
    """Maximize the weighted log likelihood of a FeatureMixture in its
    resample probability; the prior is held fixed.

    Each pair-feature contributes log((1-g) * match + g * q) with q the
    prior mass of the observed child bit, so the objective is concave
    and a guarded Newton iteration on [0, 1] suffices.
    """
    p = prior.as_array
    width = p.size
    # flatten groups: weight, match flag, prior mass of the child bit
    weights, matches, masses = [], [], []
    for f in range(width):
        for b in (0, 1):
            q = p[f] if b == 1 else 1.0 - p[f]
            for m in (0, 1):
                w = table[f, b, m]
                # a mismatch whose child bit has zero prior mass makes the
                # factor identically zero; it says nothing about the mixture
                if w > 0 and not (m == 0 and q == 0.0):
                    weights.append(w)
                    matches.append(float(m))
                    masses.append(q)
    if not weights:
        return 0.0
    w = np.asarray(weights)
    m = np.asarray(matches)
    q = np.asarray(masses)

    def deriv(g: float) -> float:
        return float(np.sum(w * (q - m) / (m + g * (q - m))))

    has_mismatch = bool(np.any((m == 0) & (q > 0)))
    if not has_mismatch:
        return 0.0  # every factor is maximized by pure copying
    with np.errstate(divide="ignore"):
        d1 = deriv(1.0)
    if d1 >= 0:
        return 1.0
    lo, hi = 0.0, 1.0  # derivative is +inf at 0+ and negative at 1
    g = 0.5
    for _ in range(200):
        d = deriv(g)
        if abs(d) < 1e-14 or hi - lo < tol:
            break
        if d > 0:
            lo = g
        else:
            hi = g
        curv = float(np.sum(w * (q - m) ** 2 / (m + g * (q - m)) ** 2))
        step = g + d / curv  # objective is concave: second derivative is -curv
        g = step if lo < step < hi else 0.5 * (lo + hi)
    return float(min(max(g, 0.0), 1.0))


def fit_mixture(pairs: Sequence[tuple[BinaryMark, BinaryMark, float]],
                prior: FeaturePrior, tol: float = 1e-8) -> float:
    return fit_mixture_from_stats(mixture_stats(pairs, prior), prior, tol=tol)


def fit_categorical(counts, prior_direction=None, prior_strength: float = 0.0,
                    ) -> CategoricalMatrix:
    """Row-wise shrinkage estimate from (expected) transition counts.

    Row r becomes (counts[r] + c * direction_r) / (sum + c). With no
    prior, zero rows fall back to uniform with a warning; the result
    carries the prior so later refits keep shrinking the same way.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise DataError("transition counts must form a square matrix")
    if np.any(counts < 0):
        raise DataError("transition counts must be nonnegative")
    n = counts.shape[0]
    if prior_direction is not None:
        direction = np.asarray(prior_direction, dtype=np.float64)
        if direction.ndim == 1:
            direction = np.broadcast_to(direction, (n, n))
        if direction.shape != (n, n):
            raise DataError("prior direction must be a length-L simplex or an LxL matrix")
        if np.any(direction < 0) or np.any(np.abs(direction.sum(axis=1) - 1.0) > 1e-9):
            raise DataError("prior direction rows must be distributions")
        if prior_strength < 0:
            raise DataError("Dirichlet strength must be nonnegative")
    else:
        direction = None
        prior_strength = 0.0

    rows = np.empty_like(counts)
    for r in range(n):
        total = counts[r].sum()
        if direction is not None and prior_strength > 0:
            rows[r] = (counts[r] + prior_strength * direction[r]) / (total + prior_strength)
        elif total > 0:
            rows[r] = counts[r] / total
        else:
            warnings.warn(f"transition row {r + 1} has no counts and no prior; using uniform")
            rows[r] = 1.0 / n
    keep_dir = None
    if prior_direction is not None:
        arr = np.asarray(prior_direction, dtype=np.float64)
        keep_dir = tuple(map(tuple, arr)) if arr.ndim == 2 else tuple(arr.tolist())
    return CategoricalMatrix(tuple(map(tuple, rows)), prior_direction=keep_dir,
                             prior_strength=float(prior_strength))


def write_matrix_csv(matrix: np.ndarray, labels: Sequence[str], path: str,
                     marginal: np.ndarray | None = None,
                     logratio_path: str | None = None) -> None:
    """Dump a transition matrix as CSV with row and column labels.

    When a marginal over child labels is given, a companion table of
    log(matrix / marginal) is written too, showing how each source
    reshapes the child distribution relative to chance.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    labels = list(labels)

    def _write(p: str, rows: np.ndarray) -> None:
        with open(p, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["source"] + labels)
            for name, row in zip(labels, rows):
                writer.writerow([name] + [repr(float(v)) for v in row])

    _write(path, matrix)
    if marginal is not None:
        if logratio_path is None:
            stem, dot, ext = path.rpartition(".")
            logratio_path = (stem if dot else path) + "_logratio" + (dot + ext if dot else "")
        marginal = np.asarray(marginal, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.log(matrix / marginal[None, :])
        _write(logratio_path, ratio)
