"""Weighted empirical measures with quantile / expected-shortfall / moment
and 2-Wasserstein queries.

The quantile convention is right-continuous, F^{-1}(p) = inf{x : F(x) > p},
so quantile curves of discrete laws are step functions jumping *after* each
atom's cumulative weight.  Expected shortfall integrates that step function
exactly (fractional last atom), and the one-dimensional W2 distance uses
the exact quantile coupling on the merged atom grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyMeasure, FloorHit, ValidationError

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Probability law represented by weighted samples.

    Weights must be positive and sum to one within 1e-12; uniform weights
    are the default.  The sorted order is cached at construction, so all
    queries are pure and cheap.
    """

    samples: np.ndarray
    weights: np.ndarray
    _sorted_samples: np.ndarray = field(repr=False)
    _sorted_weights: np.ndarray = field(repr=False)
    _cumweights: np.ndarray = field(repr=False)

    @staticmethod
    def from_samples(samples, weights=None) -> "EmpiricalMeasure":
        x = np.asarray(samples, dtype=float).ravel()
        if x.size == 0:
            raise EmptyMeasure("empirical measure needs at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValidationError("samples must be finite")
        if weights is None:
            w = np.full(x.size, 1.0 / x.size)
        else:
            w = np.asarray(weights, dtype=float).ravel()
            if w.shape != x.shape:
                raise ValidationError("weights must match samples in length")
            if np.any(w <= 0.0):
                raise ValidationError("weights must be positive")
            total = w.sum()
            if abs(total - 1.0) > _WEIGHT_TOL:
                raise ValidationError(
                    f"weights must sum to 1 within {_WEIGHT_TOL}, got {total!r}"
                )
        order = np.argsort(x, kind="stable")
        xs = x[order]
        ws = w[order]
        cw = np.cumsum(ws)
        cw[-1] = min(cw[-1], 1.0)
        for arr in (x, w, xs, ws, cw):
            arr.setflags(write=False)
        return EmpiricalMeasure(x, w, xs, ws, cw)

    @property
    def n(self) -> int:
        return int(self.samples.size)

    def quantile(self, p) -> float | np.ndarray:
        """F^{-1}(p) = inf{x : F(x) > p}; right-continuous, p in [0, 1)."""
        parr = np.asarray(p, dtype=float)
        if np.any(parr < 0.0) or np.any(parr >= 1.0):
            raise ValidationError("quantile requires p in [0, 1)")
        # first atom whose cumulative weight strictly exceeds p
        idx = np.searchsorted(self._cumweights, parr, side="right")
        idx = np.minimum(idx, self.n - 1)
        out = self._sorted_samples[idx]
        return float(out) if parr.ndim == 0 else out

    def expected_shortfall(self, alpha0: float) -> float:
        """ES_{a0} = -(1/a0) * int_0^{a0} F^{-1}(p) dp, exact for the step
        quantile function."""
        if not 0.0 < alpha0 < 1.0:
            raise ValidationError("expected_shortfall requires alpha0 in (0, 1)")
        cw = self._cumweights
        k = int(np.searchsorted(cw, alpha0, side="left"))
        # atoms 0..k-1 contribute their full weight, atom k the remainder
        full = self._sorted_weights[:k] @ self._sorted_samples[:k]
        prev = cw[k - 1] if k > 0 else 0.0
        partial = (alpha0 - prev) * self._sorted_samples[min(k, self.n - 1)]
        return -(full + partial) / alpha0

    def mean(self) -> float:
        return float(self.weights @ self.samples)

    def second_moment(self) -> float:
        return float(self.weights @ np.square(self.samples))

    def inverse_square_moment(self, floor: float) -> float:
        """E |xi - floor|^{-2}, certifying membership of the mean-ES measure
        class; raises FloorHit if any sample equals the floor exactly."""
        d = self.samples - floor
        if np.any(d == 0.0):
            raise FloorHit("a sample equals the floor exactly")
        return float(self.weights @ (1.0 / np.square(d)))

    def shifted(self, c: float) -> "EmpiricalMeasure":
        return EmpiricalMeasure.from_samples(self.samples + c, self.weights)

    def scaled(self, c: float) -> "EmpiricalMeasure":
        if c <= 0.0:
            raise ValidationError("scale factor must be positive")
        return EmpiricalMeasure.from_samples(self.samples * c, self.weights)

    # -- CSV interface: one value per line, optional second weight column --

    def to_csv(self, path: str | Path) -> None:
        uniform = np.allclose(self.weights, 1.0 / self.n, rtol=0.0, atol=0.0)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for i in range(self.n):
                if uniform:
                    writer.writerow([f"{self.samples[i]:.17g}"])
                else:
                    writer.writerow(
                        [f"{self.samples[i]:.17g}", f"{self.weights[i]:.17g}"]
                    )

    @staticmethod
    def from_csv(path: str | Path) -> "EmpiricalMeasure":
        samples: list[float] = []
        weights: list[float] = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row:
                    continue
                samples.append(float(row[0]))
                if len(row) > 1:
                    weights.append(float(row[1]))
        if weights and len(weights) != len(samples):
            raise ValidationError("weight column must be present on every line")
        return EmpiricalMeasure.from_samples(samples, weights or None)


def wasserstein2_1d(m1: EmpiricalMeasure, m2: EmpiricalMeasure) -> float:
    """W2 distance between one-dimensional laws via the quantile coupling,

        W2^2 = int_0^1 (F1^{-1}(p) - F2^{-1}(p))^2 dp,

    computed exactly on the merged cumulative-weight grid.
    """
    cw = np.union1d(m1._cumweights, m2._cumweights)
    cw = cw[cw <= 1.0]
    if cw[-1] < 1.0:
        cw = np.append(cw, 1.0)
    edges = np.concatenate(([0.0], cw))
    seg = np.diff(edges)
    mid = edges[:-1]  # quantiles are constant on (edges[i], edges[i+1]]
    q1 = m1._sorted_samples[
        np.minimum(np.searchsorted(m1._cumweights, mid, side="right"), m1.n - 1)
    ]
    q2 = m2._sorted_samples[
        np.minimum(np.searchsorted(m2._cumweights, mid, side="right"), m2.n - 1)
    ]
    return float(np.sqrt(np.sum(seg * np.square(q1 - q2))))
