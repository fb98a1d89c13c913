"""Shared domain types: datasets, queueing instances, topologies, flows, policies."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

DENOMINATOR_CAP = 10**6

ROW_BALANCE_TOL = 1e-6
ROW_SUM_TOL = 1e-9


def rationalize(x, cap: int = DENOMINATOR_CAP) -> Fraction:
    """Convert a rate to an exact rational, capping the denominator.

    Accepts ints, floats, strings like "1/3", Fractions, or (num, den) pairs.
    """
    if isinstance(x, Fraction):
        return x
    if isinstance(x, tuple):
        return Fraction(x[0], x[1])
    if isinstance(x, str):
        return Fraction(x)
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    return Fraction(float(x)).limit_denominator(cap)


@dataclass(frozen=True)
class Record:
    """One observational record: features, score, group labels, treatment, outcome."""

    id: str
    features: np.ndarray
    score: float
    groups: dict
    treatment: str
    outcome: int
    arrival_time: float
    potential_outcomes: dict | None = None


class Dataset:
    """Column-oriented store of observational records.

    The first entry of ``resource_set`` is the designated baseline resource.
    """

    def __init__(self, features, score, groups, treatment, outcome, arrival_time,
                 resource_set, feature_names, ids=None, potential_outcomes=None):
        self.features = np.asarray(features, dtype=float)
        self.score = np.asarray(score, dtype=float)
        self.groups = {k: np.asarray(v) for k, v in groups.items()}
        self.treatment = np.asarray(treatment)
        self.outcome = np.asarray(outcome, dtype=int)
        self.arrival_time = np.asarray(arrival_time, dtype=float)
        self.resource_set = list(resource_set)
        self.feature_names = list(feature_names)
        self.ids = (np.asarray(ids) if ids is not None
                    else np.array([str(i) for i in range(len(self.score))]))
        self.potential_outcomes = None
        if potential_outcomes is not None:
            self.potential_outcomes = {r: np.asarray(v, dtype=int)
                                       for r, v in potential_outcomes.items()}
        self._validate()

    def _validate(self):
        n = len(self.score)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError("feature matrix must be N x n_features")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        unknown = set(np.unique(self.treatment)) - set(self.resource_set)
        if unknown:
            raise ValueError(f"treatments outside resource set: {unknown}")
        if not np.isin(self.outcome, (0, 1)).all():
            raise ValueError("outcome must be binary")
        if np.any(self.arrival_time < 0):
            raise ValueError("arrival times must be nonnegative")

    @property
    def baseline(self) -> str:
        return self.resource_set[0]

    @property
    def group_dimensions(self):
        return list(self.groups.keys())

    def __len__(self):
        return len(self.score)

    def record(self, i: int) -> Record:
        po = None
        if self.potential_outcomes is not None:
            po = {r: int(v[i]) for r, v in self.potential_outcomes.items()}
        return Record(str(self.ids[i]), self.features[i], float(self.score[i]),
                      {k: v[i] for k, v in self.groups.items()},
                      str(self.treatment[i]), int(self.outcome[i]),
                      float(self.arrival_time[i]), po)

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        po = None
        if self.potential_outcomes is not None:
            po = {r: v[mask] for r, v in self.potential_outcomes.items()}
        return Dataset(self.features[mask], self.score[mask],
                       {k: v[mask] for k, v in self.groups.items()},
                       self.treatment[mask], self.outcome[mask],
                       self.arrival_time[mask], self.resource_set,
                       self.feature_names, ids=self.ids[mask],
                       potential_outcomes=po)

    def to_csv(self, path):
        group_dims = self.group_dimensions
        po_resources = (list(self.potential_outcomes.keys())
                        if self.potential_outcomes is not None else [])
        header = (["id"] + self.feature_names + ["score"] + group_dims
                  + ["treatment", "outcome", "arrival_time"]
                  + [f"po_{r}" for r in po_resources])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(len(self)):
                row = ([str(self.ids[i])] + [repr(v) for v in self.features[i]]
                       + [repr(float(self.score[i]))]
                       + [str(self.groups[g][i]) for g in group_dims]
                       + [str(self.treatment[i]), int(self.outcome[i]),
                          repr(float(self.arrival_time[i]))]
                       + [int(self.potential_outcomes[r][i]) for r in po_resources])
                w.writerow(row)

    @classmethod
    def from_csv(cls, path, resource_set, feature_names, group_dimensions=()):
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                rows.append(row)
        if not rows:
            raise ValueError(f"empty dataset file: {path}")
        required = ["id"] + list(feature_names) + ["score", "treatment",
                                                  "outcome", "arrival_time"]
        for col in required + list(group_dimensions):
            if col not in rows[0]:
                raise ValueError(f"missing column: {col}")
        po_cols = [c for c in rows[0] if c.startswith("po_")]
        for row in rows:
            for col in required:
                if row[col] is None or row[col] == "":
                    raise ValueError(f"missing value in column {col}")
        features = [[float(r[c]) for c in feature_names] for r in rows]
        po = None
        if po_cols:
            po = {c[3:]: [int(r[c]) for r in rows] for c in po_cols}
        return cls(features, [float(r["score"]) for r in rows],
                   {g: [r[g] for r in rows] for g in group_dimensions},
                   [r["treatment"] for r in rows],
                   [int(r["outcome"]) for r in rows],
                   [float(r["arrival_time"]) for r in rows],
                   resource_set, feature_names, ids=[r["id"] for r in rows],
                   potential_outcomes=po)


@dataclass(frozen=True)
class MCMSInstance:
    """Multi-class multi-server instance: queues, resources, and rational rates."""

    queues: tuple
    resources: tuple
    lam: tuple          # per-queue arrival rates, Fractions
    mu: tuple           # per-resource arrival rates, Fractions
    rho: float = 1.0

    @staticmethod
    def build(queues, resources, lam, mu, rho=1.0) -> "MCMSInstance":
        return MCMSInstance(tuple(queues), tuple(resources),
                            tuple(rationalize(x) for x in lam),
                            tuple(rationalize(x) for x in mu), float(rho))

    @property
    def n_queues(self):
        return len(self.queues)

    @property
    def n_resources(self):
        return len(self.resources)

    @property
    def lam_f(self) -> np.ndarray:
        return np.array([float(x) for x in self.lam])

    @property
    def mu_f(self) -> np.ndarray:
        return np.array([float(x) for x in self.mu])

    @property
    def lam_total(self) -> Fraction:
        return sum(self.lam, Fraction(0))

    @property
    def mu_total(self) -> Fraction:
        return sum(self.mu, Fraction(0))

    def balanced_mu(self) -> tuple:
        """Resource rates scaled so totals match the individual arrival rate.

        Flow balance (row sums = lambda, column sums = mu) is only consistent
        when the two totals agree; flow and optimization computations use
        these scaled rates, admissibility and simulation use the raw ones.
        """
        scale = self.lam_total / self.mu_total
        return tuple(m * scale for m in self.mu)

    def balanced_mu_f(self) -> np.ndarray:
        return np.array([float(x) for x in self.balanced_mu()])


@dataclass(frozen=True)
class MatchingTopology:
    """Binary queue-by-resource eligibility matrix."""

    m: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.m)
        if raw.ndim != 2 or not np.isin(raw, (0, 1)).all():
            raise ValueError("topology must be a binary matrix")
        object.__setattr__(self, "m", raw.astype(int))

    @staticmethod
    def fully_connected(n_queues, n_resources) -> "MatchingTopology":
        return MatchingTopology(np.ones((n_queues, n_resources), dtype=int))

    def check_shape(self, instance: MCMSInstance):
        if self.m.shape != (instance.n_queues, instance.n_resources):
            raise ValueError(f"topology shape {self.m.shape} does not match "
                             f"instance ({instance.n_queues}, {instance.n_resources})")


@dataclass(frozen=True)
class FlowMatrix:
    """Nonnegative steady-state flow rates per (queue, resource) edge."""

    f: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.f, dtype=float)
        if f.ndim != 2 or np.any(f < -1e-12):
            raise ValueError("flows must form a nonnegative matrix")
        object.__setattr__(self, "f", f)


@dataclass(frozen=True)
class Policy:
    """Row-stochastic assignment probabilities pi(resource | queue)."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if np.any(p < -1e-12) or np.any(p > 1 + 1e-9):
            raise ValueError("policy entries must lie in [0, 1]")
        if np.max(np.abs(p.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
            raise ValueError("policy rows must sum to 1")
        object.__setattr__(self, "probs", p)


@dataclass(frozen=True)
class CATEMatrix:
    """Per-(queue, resource) treatment effects relative to the baseline resource.

    ``baseline_mean`` is the expected outcome under the baseline; the baseline
    column (index 0) is identically zero.
    """

    tau: np.ndarray
    baseline_mean: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.tau, dtype=float)
        if t.ndim != 2:
            raise ValueError("tau must be a queue x resource matrix")
        if np.any(t[:, 0] != 0.0):
            raise ValueError("baseline column of tau must be zero")
        object.__setattr__(self, "tau", t)


def policy_from_flows(flows: FlowMatrix, instance: MCMSInstance) -> Policy:
    """Normalize flow rows by the queue arrival rates to get pi(r | q)."""
    f = flows.f
    if f.shape != (instance.n_queues, instance.n_resources):
        raise ValueError("flow matrix shape does not match instance")
    lam = instance.lam_f
    row = f.sum(axis=1)
    if np.max(np.abs(row - lam)) > ROW_BALANCE_TOL * max(1.0, lam.max()):
        raise ValueError("flow rows do not balance the queue arrival rates")
    return Policy(f / lam[:, None])


def policy_value(flows: FlowMatrix, tau: CATEMatrix, instance: MCMSInstance) -> float:
    """Value of the induced policy: (sum of flow-weighted effects) / total rate + C."""
    f = flows.f
    if f.shape != tau.tau.shape or f.shape[0] != instance.n_queues:
        raise ValueError("dimension mismatch between flows, effects, and instance")
    lam_total = float(instance.lam_total)
    if lam_total == 0:
        raise ZeroDivisionError("total arrival rate is zero")
    return float(np.sum(f * tau.tau)) / lam_total + tau.baseline_mean


def validate_instance(instance: MCMSInstance) -> dict:
    """Report-only diagnostics: rate positivity, rho consistency, denominators."""
    lam_ok = all(x > 0 for x in instance.lam)
    mu_ok = all(x > 0 for x in instance.mu)
    lam_total = instance.lam_total
    mu_total = instance.mu_total
    rho_frac = rationalize(instance.rho)
    rho_consistent = (lam_total == rho_frac * mu_total)
    rho_gap = float(lam_total - rho_frac * mu_total)
    denominators = {
        "lam": [x.denominator for x in instance.lam],
        "mu": [x.denominator for x in instance.mu],
    }
    max_den = max(denominators["lam"] + denominators["mu"])
    return {
        "lam_positive": lam_ok,
        "mu_positive": mu_ok,
        "zero_rate_queues": [q for q, x in zip(instance.queues, instance.lam) if x <= 0],
        "zero_rate_resources": [r for r, x in zip(instance.resources, instance.mu) if x <= 0],
        "rho_consistent": rho_consistent,
        "rho_gap": rho_gap,
        "denominators": denominators,
        "max_denominator": max_den,
        "denominator_cap": DENOMINATOR_CAP,
    }
