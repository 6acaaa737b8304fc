"""Basis expansion phi(Z): raw columns, natural cubic splines, interactions.

Natural splines are built the usual way: a cubic B-spline basis on the
boundary and interior knots, with the first column dropped and the rest
projected onto the null space of the second-derivative constraints at the two
boundary knots. Outside the boundary knots the basis continues linearly.
"""

import dataclasses
import logging
import re
from typing import Optional, Sequence, Union

import numpy as np
from scipy import interpolate, linalg

from balweights.errors import BasisSpecError, DegenerateInputError

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class Raw:
    var: str

    @property
    def width(self):
        return 1

    @property
    def variables(self):
        return (self.var,)

    def label(self):
        return self.var


@dataclasses.dataclass(frozen=True)
class Spline:
    var: str
    df: int

    def __post_init__(self):
        if int(self.df) != self.df or self.df < 1:
            raise BasisSpecError(f'spline df must be a positive integer, got {self.df!r}')
        object.__setattr__(self, 'df', int(self.df))

    @property
    def width(self):
        return self.df

    @property
    def variables(self):
        return (self.var,)

    def label(self):
        return f'spline({self.var}, {self.df})'


@dataclasses.dataclass(frozen=True)
class Interaction:
    """Product of two raw columns, stored with ``a < b``."""

    a: str
    b: str

    def __post_init__(self):
        if self.a == self.b:
            raise BasisSpecError(f'interaction of {self.a!r} with itself')
        if self.b < self.a:
            a, b = self.b, self.a
            object.__setattr__(self, 'a', a)
            object.__setattr__(self, 'b', b)

    @property
    def width(self):
        return 1

    @property
    def variables(self):
        return (self.a, self.b)

    def label(self):
        return f'{self.a}:{self.b}'


Term = Union[Raw, Spline, Interaction]

_SPLINE_RE = re.compile(r'^spline\(\s*([^,()\s]+)\s*,\s*(\d+)\s*\)$')


def parse_term(text: str) -> Term:
    """Parse ``x``, ``spline(x, 8)`` or ``a:b``."""
    s = text.strip()
    m = _SPLINE_RE.match(s)
    if m:
        return Spline(m.group(1), int(m.group(2)))
    if s.startswith('spline'):
        raise BasisSpecError(f'malformed spline term {text!r}; use spline(var, df)')
    if ':' in s:
        parts = [p.strip() for p in s.split(':')]
        if len(parts) != 2 or not all(parts):
            raise BasisSpecError(f'malformed interaction term {text!r}; use a:b')
        return Interaction(*parts)
    if not s or any(c in s for c in '(), '):
        raise BasisSpecError(f'malformed term {text!r}')
    return Raw(s)


@dataclasses.dataclass(frozen=True)
class BasisSpec:
    """Ordered list of basis terms."""

    terms: tuple

    def __post_init__(self):
        terms = tuple(parse_term(t) if isinstance(t, str) else t for t in self.terms)
        seen = set()
        for t in terms:
            if not isinstance(t, (Raw, Spline, Interaction)):
                raise BasisSpecError(f'unsupported term {t!r}')
            if t in seen:
                raise BasisSpecError(f'duplicate term {t.label()!r}')
            seen.add(t)
        object.__setattr__(self, 'terms', terms)

    @classmethod
    def parse(cls, texts: Sequence[str]):
        return cls(tuple(parse_term(t) for t in texts))

    @classmethod
    def raw(cls, names):
        return cls(tuple(Raw(n) for n in names))

    @property
    def width(self):
        return sum(t.width for t in self.terms)

    @property
    def variables(self):
        out = []
        for t in self.terms:
            for v in t.variables:
                if v not in out:
                    out.append(v)
        return tuple(out)

    def labels(self):
        return [t.label() for t in self.terms]

    def extend(self, terms):
        new = [t for t in terms if t not in self.terms]
        return BasisSpec(self.terms + tuple(new))

    def validate(self, dataset):
        missing = [v for v in self.variables if v not in dataset.covariate_names]
        if missing:
            raise BasisSpecError('basis references unknown covariate(s): '
                                 + ', '.join(missing))


@dataclasses.dataclass(frozen=True)
class SplineKnots:
    boundary: tuple
    interior: np.ndarray

    @property
    def df(self):
        return len(self.interior) + 1

    def knot_vector(self):
        a, b = self.boundary
        return np.concatenate([[a] * 4, self.interior, [b] * 4])


def _bspline_columns(x, t, deriv=0):
    """All cubic B-spline basis functions (or a derivative) at ``x``."""
    k = 3
    nb = len(t) - k - 1
    out = np.empty((len(x), nb))
    eye = np.eye(nb)
    for j in range(nb):
        spl = interpolate.BSpline(t, eye[j], k, extrapolate=False)
        if deriv:
            spl = spl.derivative(deriv)
        out[:, j] = spl(x)
    return np.nan_to_num(out, nan=0.0)


def _natural_projection(knots: SplineKnots):
    t = knots.knot_vector()
    a, b = knots.boundary
    const = _bspline_columns(np.array([a, b]), t, deriv=2)[:, 1:]
    q, _ = linalg.qr(const.T, mode='full')
    return q[:, 2:]


def evaluate_natural_spline(x, knots: SplineKnots):
    """Evaluate a natural spline basis with fixed knots at new points."""
    x = np.asarray(x, dtype=float)
    t = knots.knot_vector()
    a, b = knots.boundary
    proj = _natural_projection(knots)
    inside = (x >= a) & (x <= b)
    out = np.empty((len(x), proj.shape[1]))
    if inside.any():
        out[inside] = _bspline_columns(x[inside], t)[:, 1:] @ proj
    for edge, mask in ((a, x < a), (b, x > b)):
        if mask.any():
            e = np.array([edge])
            val = _bspline_columns(e, t)[:, 1:] @ proj
            slope = _bspline_columns(e, t, deriv=1)[:, 1:] @ proj
            out[mask] = val + (x[mask] - edge)[:, None] * slope
    return out


def spline_knots(x, df) -> SplineKnots:
    """Boundary knots at the range of ``x``; ``df - 1`` interior quantile knots."""
    x = np.asarray(x, dtype=float)
    if int(df) != df or df < 1:
        raise DegenerateInputError(f'spline df must be a positive integer, got {df!r}')
    distinct = np.unique(x)
    if distinct.size < df + 1:
        raise DegenerateInputError(
            f'spline with df={df} needs at least {df + 1} distinct values, '
            f'found {distinct.size}; use a Raw term instead')
    probs = np.arange(1, df) / df
    interior = np.quantile(x, probs)
    return SplineKnots(boundary=(float(x.min()), float(x.max())),
                       interior=np.asarray(interior, dtype=float))


def natural_spline_basis(x, df):
    """Natural cubic spline basis with ``df`` columns.

    Returns
    -------
    (matrix, knots)
        ``matrix`` has shape (n, df); ``knots`` can be passed to
        :func:`evaluate_natural_spline` for out-of-sample rows.
    """
    knots = spline_knots(x, df)
    return evaluate_natural_spline(x, knots), knots


@dataclasses.dataclass(frozen=True, eq=False)
class ExpandedDesign:
    """Realized basis matrix with column names and the fitted spline knots."""

    matrix: np.ndarray
    column_names: tuple
    spline_knots: dict
    dropped: tuple = ()
    spec: Optional[BasisSpec] = None

    @property
    def p(self):
        return self.matrix.shape[1]

    def rows(self, mask_or_index):
        return self.matrix[mask_or_index]


def _term_columns(term, dataset, knots_cache):
    if isinstance(term, Raw):
        return dataset.column(term.var)[:, None], [term.var]
    if isinstance(term, Interaction):
        col = dataset.column(term.a) * dataset.column(term.b)
        return col[:, None], [term.label()]
    knots = knots_cache.get(term.label())
    x = dataset.column(term.var)
    if knots is None:
        knots = spline_knots(x, term.df)
        knots_cache[term.label()] = knots
    mat = evaluate_natural_spline(x, knots)
    return mat, [f'{term.label()}[{k + 1}]' for k in range(term.df)]


def expand(dataset, spec: BasisSpec, knots=None, drop_constant=True) -> ExpandedDesign:
    """Evaluate ``spec`` on every row of ``dataset``.

    Spline knots are fitted on ``dataset`` unless ``knots`` (a mapping from
    spline label to :class:`SplineKnots`) is given. Columns that are constant
    over all rows are dropped and recorded in ``dropped``.
    """
    spec.validate(dataset)
    cache = dict(knots or {})
    blocks, names = [], []
    for term in spec.terms:
        mat, cols = _term_columns(term, dataset, cache)
        blocks.append(mat)
        names.extend(cols)
    matrix = np.hstack(blocks) if blocks else np.zeros((dataset.n, 0))
    dropped = []
    if drop_constant and dataset.n:
        span = matrix.max(axis=0) - matrix.min(axis=0)
        scale = np.maximum(1.0, np.abs(matrix).max(axis=0))
        const = span <= 1e-12 * scale
        for j in np.flatnonzero(const):
            dropped.append((names[j], 'constant across all rows'))
            logger.warning('dropping constant basis column %s', names[j])
        matrix = matrix[:, ~const]
        names = [nm for nm, c in zip(names, const) if not c]
    matrix = np.ascontiguousarray(matrix)
    matrix.setflags(write=False)
    return ExpandedDesign(matrix=matrix, column_names=tuple(names),
                          spline_knots=cache, dropped=tuple(dropped), spec=spec)
