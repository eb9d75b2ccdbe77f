"""
Compositional algebra for count data.

Sequential binary partitions (SBP), the orthonormal contrast basis derived
from them, closure with zero replacement and the forward/inverse isometric
log-ratio (ilr) transform.

Arrays follow one convention throughout: parts are columns. A composition is
either a single row of length J+1 or an n x (J+1) matrix with one sample per
row; ilr coordinates are likewise J or n x J. Logarithms are natural.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-12
SIMPLEX_TOL = 1e-12


class CompositionError(ValueError):
    """Invalid compositional input"""


class SbpValidationError(CompositionError):
    """An SBP matrix breaks one of the partition rules.

    ``rule`` is one of NonBinaryEntry, EmptySide, NotATree, IncompleteTree,
    DimensionMismatch. ``column`` is the 0-based offending column, or None
    when the problem concerns the whole matrix.
    """

    def __init__(self, rule, column=None, message=""):
        self.rule = rule
        self.column = column
        where = f" (column {column + 1})" if column is not None else ""
        super().__init__(f"{rule}{where}: {message}" if message else f"{rule}{where}")


@dataclass(frozen=True)
class SbpMatrix:
    """Validated (J+1) x J sign matrix. Build it with validate_sbp or pivotal_sbp."""

    entries: np.ndarray
    part_labels: tuple
    balance_labels: tuple

    @property
    def num_parts(self):
        return self.entries.shape[0]

    @property
    def num_balances(self):
        return self.entries.shape[1]

    def same_partition(self, other):
        return (
            self.entries.shape == other.entries.shape
            and bool(np.array_equal(self.entries, other.entries))
        )


@dataclass(frozen=True)
class ContrastBasis:
    """Orthonormal contrast matrix V with zero column sums."""

    v: np.ndarray
    source: SbpMatrix = field(repr=False)

    @property
    def num_parts(self):
        return self.v.shape[0]

    @property
    def num_balances(self):
        return self.v.shape[1]


@dataclass(frozen=True)
class Composition:
    proportions: np.ndarray


@dataclass(frozen=True)
class IlrVector:
    coords: np.ndarray


def _default_labels(prefix, count):
    return tuple(f"{prefix}{i + 1}" for i in range(count))


def validate_sbp(m, labels=None, balance_labels=None):
    """
    Check that ``m`` encodes a complete sequential binary partition.

    Column 1 must split all parts; every later column must split exactly one
    group produced by an earlier column (a group of two or more parts that
    has not been split yet). Raises SbpValidationError naming the first
    violated rule.
    """
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] < 2:
        raise SbpValidationError("DimensionMismatch", message=f"expected a (J+1) x J matrix, got shape {m.shape}")

    rows, cols = m.shape
    if cols != rows - 1:
        raise SbpValidationError(
            "DimensionMismatch",
            message=f"{rows} parts need {rows - 1} balances, got {cols}",
        )

    open_groups = [frozenset(range(rows))]
    for k in range(cols):
        column = m[:, k]
        if not np.all(np.isin(column, (-1, 0, 1))):
            raise SbpValidationError("NonBinaryEntry", k, "entries must be -1, 0 or +1")

        plus = frozenset(np.flatnonzero(column == 1).tolist())
        minus = frozenset(np.flatnonzero(column == -1).tolist())
        if not plus or not minus:
            raise SbpValidationError("EmptySide", k, "each balance needs at least one +1 and one -1")

        support = plus | minus
        if support not in open_groups:
            if k == 0:
                raise SbpValidationError("NotATree", k, "the first balance must partition every part")
            raise SbpValidationError("NotATree", k, "nonzero rows do not form an unsplit earlier group")

        open_groups.remove(support)
        open_groups.extend(g for g in (plus, minus) if len(g) >= 2)

    if open_groups:
        raise SbpValidationError(
            "IncompleteTree",
            message=f"{len(open_groups)} group(s) still hold more than one part",
        )

    labels = tuple(str(x) for x in labels) if labels is not None else _default_labels("part", rows)
    if len(labels) != rows:
        raise SbpValidationError("DimensionMismatch", message=f"{len(labels)} labels for {rows} parts")
    balance_labels = (
        tuple(str(x) for x in balance_labels) if balance_labels is not None else _default_labels("M", cols)
    )
    if len(balance_labels) != cols:
        raise SbpValidationError("DimensionMismatch", message=f"{len(balance_labels)} labels for {cols} balances")

    entries = m.astype(np.int8)
    entries.setflags(write=False)
    return SbpMatrix(entries=entries, part_labels=labels, balance_labels=balance_labels)


def pivotal_sbp(num_parts, order=None, labels=None):
    """Pivot SBP: balance k contrasts ordered part k against ordered parts k+1..J+1."""
    if num_parts < 2:
        raise CompositionError(f"a pivotal SBP needs at least 2 parts, got {num_parts}")

    order = list(range(num_parts)) if order is None else [int(i) for i in order]
    if sorted(order) != list(range(num_parts)):
        raise CompositionError(f"order must be a permutation of 0..{num_parts - 1}")

    m = np.zeros((num_parts, num_parts - 1), dtype=np.int8)
    for k in range(num_parts - 1):
        m[order[k], k] = 1
        for j in order[k + 1:]:
            m[j, k] = -1
    return validate_sbp(m, labels=labels)


def random_sbp(num_parts, rng, labels=None):
    """Random SBP built by recursively splitting groups; always valid."""
    m = np.zeros((num_parts, num_parts - 1), dtype=np.int8)
    pending = [list(range(num_parts))]
    k = 0
    while pending:
        group = pending.pop(int(rng.integers(len(pending))))
        shuffled = rng.permutation(group)
        cut = int(rng.integers(1, len(group)))
        plus, minus = shuffled[:cut], shuffled[cut:]
        m[plus, k] = 1
        m[minus, k] = -1
        k += 1
        pending.extend(g.tolist() for g in (plus, minus) if len(g) >= 2)
    return validate_sbp(m, labels=labels)


def basis_from_sbp(sbp):
    """
    Contrast matrix V of an SBP.

    v_jk = sqrt(n+ n- / (n+ + n-)) / n+ on the +1 side and
    -sqrt(n+ n- / (n+ + n-)) / n- on the -1 side.
    """
    entries = sbp.entries
    n_plus = (entries == 1).sum(axis=0)
    n_minus = (entries == -1).sum(axis=0)
    scale = np.sqrt(n_plus * n_minus / (n_plus + n_minus))

    v = np.where(entries == 1, scale / n_plus, 0.0)
    v = np.where(entries == -1, -scale / n_minus, v)

    gram = v.T @ v
    if not np.allclose(gram, np.eye(v.shape[1]), rtol=0, atol=ORTHONORMAL_TOL * 10):
        raise CompositionError("contrast basis is not orthonormal")
    v.setflags(write=False)
    return ContrastBasis(v=v, source=sbp)


def closure(x):
    """Scale positive rows to unit sum."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise CompositionError("cannot close negative values")
    totals = x.sum(axis=-1, keepdims=True)
    if np.any(totals <= 0):
        raise CompositionError("cannot close a zero vector")
    return x / totals


def close_counts(counts, zero_replacement=0.5):
    """Replace zero counts by ``zero_replacement`` then close each row."""
    counts = np.asarray(counts)
    if zero_replacement <= 0:
        raise CompositionError(f"zero_replacement must be positive, got {zero_replacement}")
    if np.any(counts < 0):
        raise CompositionError("NegativeCount: counts must be nonnegative")
    if np.any(counts.sum(axis=-1) <= 0):
        raise CompositionError("AllZero: a sample has no positive count")

    replaced = np.where(counts == 0, zero_replacement, counts).astype(float)
    return Composition(proportions=closure(replaced))


def _check_parts(width, basis):
    if width != basis.num_parts:
        raise CompositionError(f"composition has {width} parts, basis expects {basis.num_parts}")


def ilr_forward(p, basis):
    """ilr(p) = V^T log(p), row-wise."""
    proportions = p.proportions if isinstance(p, Composition) else np.asarray(p, dtype=float)
    _check_parts(proportions.shape[-1], basis)
    if np.any(proportions <= 0):
        raise CompositionError("ilr needs strictly positive parts; replace zeros first")

    coords = np.log(proportions) @ basis.v
    return IlrVector(coords=coords)


def ilr_inverse(m, basis):
    coords = m.coords if isinstance(m, IlrVector) else np.asarray(m, dtype=float)
    if coords.shape[-1] != basis.num_balances:
        raise CompositionError(f"got {coords.shape[-1]} coordinates, basis has {basis.num_balances}")

    logs = coords @ basis.v.T
    # shift by the row max so exp cannot overflow; closure removes it again
    logs = logs - logs.max(axis=-1, keepdims=True)
    return Composition(proportions=closure(np.exp(logs)))


def perturb(p, q):
    """Aitchison perturbation: closure of the componentwise product."""
    a = p.proportions if isinstance(p, Composition) else np.asarray(p, dtype=float)
    b = q.proportions if isinstance(q, Composition) else np.asarray(q, dtype=float)
    return Composition(proportions=closure(a * b))


def basis_rotation(b1, b2):
    """Orthogonal P = V2^T V1 mapping ilr coordinates under b1 to those under b2."""
    if b1.num_parts != b2.num_parts:
        raise CompositionError(f"bases cover {b1.num_parts} and {b2.num_parts} parts")
    return b2.v.T @ b1.v


def filter_prevalence(counts, labels, min_prevalence=0.10):
    """
    Drop parts observed (count > 0) in fewer than ``min_prevalence`` of samples.

    Returns the filtered n x k count matrix and the kept labels.
    """
    counts = np.asarray(counts)
    prevalence = (counts > 0).mean(axis=0)
    keep = prevalence >= min_prevalence
    dropped = [label for label, k in zip(labels, keep) if not k]
    if dropped:
        logger.info("prevalence filter dropped %d part(s): %s", len(dropped), ", ".join(map(str, dropped)))
    return counts[:, keep], [label for label, k in zip(labels, keep) if k]
