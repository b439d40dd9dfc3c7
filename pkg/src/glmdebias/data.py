"""The observational sample: covariates, binary treatment, binary outcome."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    """Raised when input data violate the sample contract."""


@dataclass(frozen=True)
class Dataset:
    """An observational sample of n units.

    x is the n-by-p covariate matrix (finite reals), d the treatment
    indicator and y the observed outcome, both coded {0, 1}.  Both groups
    must be nonempty and the control group must contain at least two units
    so it can be split.  Arrays are frozen after validation.
    """

    x: np.ndarray
    d: np.ndarray
    y: np.ndarray
    column_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        x = np.ascontiguousarray(np.asarray(self.x, dtype=float))
        d = np.asarray(self.d)
        y = np.asarray(self.y)
        if x.ndim != 2:
            raise DataError(f"covariates must be a 2-d matrix, got shape {x.shape}")
        n, p = x.shape
        if d.shape != (n,) or y.shape != (n,):
            raise DataError(
                f"treatment/outcome must be length-{n} vectors, got {d.shape} and {y.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise DataError("covariates contain non-finite values")
        if not np.isin(d, (0, 1)).all():
            raise DataError("treatment indicator contains values outside {0, 1}")
        if not np.isin(y, (0, 1)).all():
            raise DataError("outcome contains values outside {0, 1}")
        d = d.astype(np.int64)
        y = y.astype(np.int64)
        n_t = int(d.sum())
        if n_t < 1:
            raise DataError("no treated units")
        if n - n_t < 2:
            raise DataError("need at least two control units")
        names = tuple(self.column_names) or tuple(f"x{j+1}" for j in range(p))
        if len(names) != p:
            raise DataError(f"{len(names)} column names for {p} columns")
        for arr in (x, d, y):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.d.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated

    @property
    def treated_idx(self) -> np.ndarray:
        return np.flatnonzero(self.d == 1)

    @property
    def control_idx(self) -> np.ndarray:
        return np.flatnonzero(self.d == 0)
