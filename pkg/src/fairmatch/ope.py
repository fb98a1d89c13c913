"""Off-policy value estimators and calibration diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sstats

from .core import Dataset, MCMSInstance, Policy


@dataclass(frozen=True)
class ValueEstimate:
    estimator: str
    value: float
    per_group_values: dict = field(default_factory=dict)
    n_effective: float = 0.0


def _policy_rows(dataset: Dataset, policy: Policy, partition, instance: MCMSInstance):
    """Per-record policy rows pi(. | queue of record)."""
    queue_index = {q: i for i, q in enumerate(instance.queues)}
    assignments = partition.assign_dataset(dataset)
    try:
        rows = np.array([queue_index[q] for q in assignments])
    except KeyError as exc:
        raise ValueError(f"record mapped to queue absent from instance: {exc}")
    return policy.probs[rows]


def _resource_index(dataset: Dataset):
    index = {r: i for i, r in enumerate(dataset.resource_set)}
    return np.array([index[t] for t in dataset.treatment])


def evaluate_dm(dataset: Dataset, policy: Policy, partition, out,
                instance: MCMSInstance) -> ValueEstimate:
    """Direct method: model-predicted outcomes averaged under the policy."""
    pi = _policy_rows(dataset, policy, partition, instance)
    yhat = np.column_stack([out.predict(dataset.features, r)
                            for r in dataset.resource_set])
    return ValueEstimate("DM", float(np.mean(np.sum(pi * yhat, axis=1))),
                         n_effective=float(len(dataset)))


def evaluate_ipw(dataset: Dataset, policy: Policy, partition, prop,
                 instance: MCMSInstance) -> ValueEstimate:
    """Inverse propensity weighting of the observed outcomes."""
    pi = _policy_rows(dataset, policy, partition, instance)
    t_idx = _resource_index(dataset)
    pi_obs = pi[np.arange(len(t_idx)), t_idx]
    pbar = prop.prob_of(dataset.features, dataset.treatment)
    if np.any(pbar <= 0):
        raise ValueError("zero propensity encountered; screen the dataset first")
    weights = pi_obs / pbar
    return ValueEstimate("IPW", float(np.mean(weights * dataset.outcome)),
                         n_effective=float(weights.sum()))


def evaluate_dr(dataset: Dataset, policy: Policy, partition, out, prop,
                instance: MCMSInstance) -> ValueEstimate:
    """Doubly robust: direct method plus an importance-weighted residual correction."""
    dm = evaluate_dm(dataset, policy, partition, out, instance)
    pi = _policy_rows(dataset, policy, partition, instance)
    t_idx = _resource_index(dataset)
    pi_obs = pi[np.arange(len(t_idx)), t_idx]
    pbar = prop.prob_of(dataset.features, dataset.treatment)
    if np.any(pbar <= 0):
        raise ValueError("zero propensity encountered; screen the dataset first")
    yhat_obs = out.predict_observed(dataset.features, dataset.treatment)
    correction = np.mean((dataset.outcome - yhat_obs) * pi_obs / pbar)
    return ValueEstimate("DR", dm.value + float(correction),
                         n_effective=float(len(dataset)))


def evaluate_gt(dataset: Dataset, policy: Policy, partition,
                instance: MCMSInstance) -> ValueEstimate:
    """Ground truth from stored potential outcomes."""
    if dataset.potential_outcomes is None:
        raise ValueError("dataset has no potential outcomes")
    missing = set(dataset.resource_set) - set(dataset.potential_outcomes)
    if missing:
        raise ValueError(f"potential outcomes missing for {missing}")
    pi = _policy_rows(dataset, policy, partition, instance)
    po = np.column_stack([dataset.potential_outcomes[r]
                          for r in dataset.resource_set])
    return ValueEstimate("GT", float(np.mean(np.sum(pi * po, axis=1))),
                         n_effective=float(len(dataset)))


def evaluate_ct(result, tau, instance: MCMSInstance) -> ValueEstimate:
    """Optimization-side value: flow-weighted effects over total rate, plus C."""
    value = result.objective / float(instance.lam_total) + tau.baseline_mean
    return ValueEstimate("CT", float(value))


_ESTIMATORS = {
    "DM": (evaluate_dm, ("out",)),
    "IPW": (evaluate_ipw, ("prop",)),
    "DR": (evaluate_dr, ("out", "prop")),
    "GT": (evaluate_gt, ()),
}


def per_group_values(dataset: Dataset, policy: Policy, partition,
                     instance: MCMSInstance, estimator: str, group_dimension: str,
                     out=None, prop=None) -> dict:
    """Estimator restricted to each group's records."""
    if group_dimension not in dataset.groups:
        raise ValueError(f"unknown group dimension: {group_dimension}")
    fn, needs = _ESTIMATORS[estimator]
    models = {"out": out, "prop": prop}
    labels = dataset.groups[group_dimension]
    values = {}
    for g in sorted(set(labels.tolist())):
        sub = dataset.subset(labels == g)
        if len(sub) == 0:
            raise ValueError(f"empty group: {g}")
        args = [sub, policy, partition] + [models[k] for k in needs] + [instance]
        values[str(g)] = fn(*args).value
    return values


def reliability_bins(predicted, observed, n_bins: int = 10):
    """Equal-width calibration bins on [0, 1]; empty bins are omitted."""
    predicted = np.asarray(predicted, dtype=float)
    observed = np.asarray(observed, dtype=float)
    if len(predicted) != len(observed):
        raise ValueError("predicted and observed must have equal length")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    which = np.clip(np.digitize(predicted, edges[1:-1]), 0, n_bins - 1)
    rows = []
    for b in range(n_bins):
        mask = which == b
        if not mask.any():
            continue
        rows.append((0.5 * (edges[b] + edges[b + 1]),
                     float(predicted[mask].mean()),
                     float(observed[mask].mean()),
                     int(mask.sum())))
    return rows


def within_group_calibration(predicted, observed, group_labels):
    """OLS of observed on [intercept, predicted, group dummies] with normal p-values.

    A calibrated, group-fair model yields a prediction coefficient near 1 and
    insignificant group coefficients.
    """
    predicted = np.asarray(predicted, dtype=float)
    observed = np.asarray(observed, dtype=float)
    labels = np.asarray(group_labels)
    groups = sorted(set(labels.tolist()))
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    cols = [np.ones(len(predicted)), predicted]
    names = ["intercept", "predicted"]
    for g in groups[1:]:
        cols.append((labels == g).astype(float))
        names.append(f"group={g}")
    design = np.column_stack(cols)
    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        raise ValueError("rank-deficient design matrix")
    beta, *_ = np.linalg.lstsq(design, observed, rcond=None)
    resid = observed - design @ beta
    dof = max(len(observed) - design.shape[1], 1)
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(design.T @ design)
    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, np.inf)
    p = 2 * sstats.norm.sf(np.abs(z))
    return [{"name": n, "coefficient": float(b), "stderr": float(s),
             "p_value": float(pv)} for n, b, s, pv in zip(names, beta, se, p)]


def write_estimates_csv(path, estimates, scope: str = "overall"):
    """Emit estimates as rows of (estimator, scope, group, value, n)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["estimator", "scope", "group", "value", "n"])
        for est in estimates:
            w.writerow([est.estimator, scope, "", repr(est.value), est.n_effective])
            for g, v in est.per_group_values.items():
                w.writerow([est.estimator, "group", g, repr(v), ""])
