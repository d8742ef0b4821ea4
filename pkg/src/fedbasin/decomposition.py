"""Empirical loss decomposition of the averaged model, plus diagnostics.

The expected squared-error loss of the weighted model average is split into
five factors measured over an empirical joint distribution of client models:

  * training bias     -- residual of a client's mean prediction on samples
                         inside its own dataset
  * heterogeneous bias-- the same residual on global samples the client never
                         saw (a catastrophic-forgetting proxy)
  * variance          -- per-client prediction variance, weighted by p_k^2
  * covariance        -- cross-client prediction covariance under the joint
                         distribution
  * locality          -- max L2 distance between client models and their
                         average, which controls how well averaging model
                         parameters approximates averaging model outputs

Expectations over client-model distributions are empirical means over the S
joint draws of a ``JointEnsemble``; variances and covariances use population
(1/S) normalization so that

  bias + variance + covariance == expected ensemble loss

holds exactly (up to float roundoff), which the tests verify against a
brute-force evaluation.

Everything is MSE/one-hot only: the decomposition algebra is specific to
squared error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .datasets import Dataset
from .nn import ModelSpec, ParamVector, forward


@dataclass
class JointEnsemble:
    """S joint draws of K client models plus weights and data ownership.

    ``samples[s][k]`` is client k's model in joint draw s. ``weights`` are
    the aggregation weights p_k (summing to 1) and ``client_indices`` maps
    each client to the global-dataset rows it owns, which drives the
    train/heterogeneous bias indicators.
    """

    samples: list[list[ParamVector]]
    weights: np.ndarray
    client_indices: list[np.ndarray]

    def __post_init__(self) -> None:
        if not self.samples:
            raise ValueError("ensemble needs at least one joint sample")
        k = len(self.samples[0])
        if any(len(joint) != k for joint in self.samples):
            raise ValueError("every joint sample must have one model per client")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (k,):
            raise ValueError("one weight per client required")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        fps = {m.spec_fingerprint for joint in self.samples for m in joint}
        if len(fps) != 1:
            raise ValueError("all ensemble models must share one fingerprint")
        if len(self.client_indices) != k:
            raise ValueError("one index set per client required")
        self.client_indices = [np.asarray(ix, dtype=np.int64) for ix in self.client_indices]

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def n_clients(self) -> int:
        return len(self.samples[0])


@dataclass
class DecompositionReport:
    bias_term: float
    train_bias_mean_sq: float
    heter_bias_mean_sq: float
    variance_term: float
    covariance_term: float
    direct_expected_loss: float
    wens_expected_loss: float
    fma_loss: float
    locality_delta: float
    approx_gap: float


@dataclass
class EqualWeightReport(DecompositionReport):
    mean_variance: float
    mean_covariance: float


class MmdResult(NamedTuple):
    value: float   # clamped at zero
    raw: float     # the estimator itself, may dip below zero when unbiased


def wens_output(models: Sequence[ParamVector], weights: np.ndarray,
                spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Weighted average of the models' outputs for the same inputs."""
    weights = np.asarray(weights, dtype=np.float64)
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must sum to 1")
    acc = None
    for w, model in zip(weights, models):
        out = w * forward(model, spec, x)
        acc = out if acc is None else acc + out
    return acc


def average_params(models: Sequence[ParamVector], weights: np.ndarray) -> ParamVector:
    weights = np.asarray(weights, dtype=np.float64)
    acc = np.zeros_like(models[0].values)
    for w, model in zip(weights, models):
        if model.spec_fingerprint != models[0].spec_fingerprint:
            raise ValueError("fingerprint mismatch")
        acc += w * model.values
    return ParamVector(acc, models[0].spec_fingerprint)


def fma_wens_gap(models: Sequence[ParamVector], weights: np.ndarray,
                 spec: ModelSpec, eval_inputs: np.ndarray) -> tuple[float, float]:
    """(gap, delta): mean L2 distance between the averaged model's outputs
    and the output average, and the max weight-space distance of any model
    from the average. The gap scales as delta**2 for smooth models."""
    eval_inputs = np.asarray(eval_inputs, dtype=np.float64)
    if eval_inputs.shape[0] == 0:
        raise ValueError("eval_inputs must be non-empty")
    averaged = average_params(models, weights)
    out_avg_model = forward(averaged, spec, eval_inputs)
    out_wens = wens_output(models, weights, spec, eval_inputs)
    gap = float(np.mean(np.linalg.norm(out_avg_model - out_wens, axis=1)))
    delta = max(float(np.linalg.norm(m.values - averaged.values)) for m in models)
    return gap, delta


def _ensemble_outputs(ensemble: JointEnsemble, spec: ModelSpec,
                      features: np.ndarray) -> np.ndarray:
    """(S, K, n, c) array of model outputs on the global features."""
    S, K = ensemble.n_samples, ensemble.n_clients
    n = features.shape[0]
    out = np.empty((S, K, n, spec.output_dim))
    for s, joint in enumerate(ensemble.samples):
        for k, model in enumerate(joint):
            out[s, k] = forward(model, spec, features)
    return out


def decompose(ensemble: JointEnsemble, dataset: Dataset,
              spec: ModelSpec) -> DecompositionReport:
    """Five-factor decomposition of the averaged model's expected MSE."""
    if spec.loss_kind != "mse":
        raise ValueError("decomposition requires MSE loss mode")
    X = dataset.features
    Y = dataset.one_hot_targets
    n = dataset.n
    p = ensemble.weights
    S, K = ensemble.n_samples, ensemble.n_clients

    outputs = _ensemble_outputs(ensemble, spec, X)          # (S, K, n, c)
    mean_out = outputs.mean(axis=0)                         # (K, n, c)
    resid = Y[None, :, :] - mean_out                        # (K, n, c)

    member = np.zeros((K, n))
    for k, idx in enumerate(ensemble.client_indices):
        member[k, idx] = 1.0

    train_vec = np.einsum("k,kn,knc->nc", p, member, resid)
    heter_vec = np.einsum("k,kn,knc->nc", p, 1.0 - member, resid)
    bias_vec = train_vec + heter_vec
    bias_term = float(np.mean(np.sum(bias_vec**2, axis=1)))
    train_bias_mean_sq = float(np.mean(np.sum(train_vec**2, axis=1)))
    heter_bias_mean_sq = float(np.mean(np.sum(heter_vec**2, axis=1)))

    centered = outputs - mean_out[None]                     # (S, K, n, c)
    per_client_var = np.einsum("sknc,sknc->kn", centered, centered) / S
    variance_term = float(np.mean(np.einsum("k,kn->n", p**2, per_client_var)))

    # cross-client covariance under the joint empirical distribution,
    # summed explicitly over distinct pairs (kept separate from the variance
    # path so the decomposition identity is a real check, not a tautology)
    cov_accum = np.zeros(n)
    for k in range(K):
        for k2 in range(K):
            if k2 == k:
                continue
            pair = np.einsum("snc,snc->n", centered[:, k], centered[:, k2]) / S
            cov_accum += p[k] * p[k2] * pair
    covariance_term = float(np.mean(cov_accum))

    wens_per_sample = np.einsum("k,sknc->snc", p, outputs)  # (S, n, c)
    per_draw_loss = np.mean(np.sum((Y[None] - wens_per_sample)**2, axis=2), axis=1)
    direct_expected_loss = float(np.mean(per_draw_loss))

    last = ensemble.samples[-1]
    averaged = average_params(last, p)
    fma_out = forward(averaged, spec, X)
    fma_loss = float(np.mean(np.sum((Y - fma_out)**2, axis=1)))
    approx_gap, locality_delta = fma_wens_gap(last, p, spec, X)

    return DecompositionReport(
        bias_term=bias_term,
        train_bias_mean_sq=train_bias_mean_sq,
        heter_bias_mean_sq=heter_bias_mean_sq,
        variance_term=variance_term,
        covariance_term=covariance_term,
        direct_expected_loss=direct_expected_loss,
        wens_expected_loss=direct_expected_loss,
        fma_loss=fma_loss,
        locality_delta=locality_delta,
        approx_gap=approx_gap,
    )


def decompose_equal_weights(ensemble: JointEnsemble, dataset: Dataset,
                            spec: ModelSpec) -> EqualWeightReport:
    """Equal-weight decomposition exposing the mean-variance / mean-covariance
    regrouping: variance + covariance == meanVar/K + (K-1)/K * meanCov."""
    K = ensemble.n_clients
    if np.max(np.abs(ensemble.weights - 1.0 / K)) > 1e-12:
        raise ValueError("equal-weight decomposition requires p_k == 1/K")
    base = decompose(ensemble, dataset, spec)

    X = dataset.features
    S = ensemble.n_samples
    outputs = _ensemble_outputs(ensemble, spec, X)
    centered = outputs - outputs.mean(axis=0, keepdims=True)
    per_client_var = np.einsum("sknc,sknc->kn", centered, centered) / S
    mean_variance = float(np.mean(per_client_var.mean(axis=0)))

    if K > 1:
        pair_sum = np.zeros(X.shape[0])
        for k in range(K):
            for k2 in range(K):
                if k2 == k:
                    continue
                pair_sum += np.einsum("snc,snc->n", centered[:, k], centered[:, k2]) / S
        mean_covariance = float(np.mean(pair_sum / (K * (K - 1))))
    else:
        mean_covariance = 0.0

    return EqualWeightReport(
        **base.__dict__,
        mean_variance=mean_variance,
        mean_covariance=mean_covariance,
    )


def covariance_lower_bound_check(ensemble: JointEnsemble, dataset: Dataset,
                                 spec: ModelSpec) -> tuple[float, float]:
    """The full covariance double sum (including k == k') against its lower
    bound (K-1)/K times the per-sample minimum pair covariance. Returns
    (lhs, rhs); lhs >= rhs always."""
    K = ensemble.n_clients
    if np.max(np.abs(ensemble.weights - 1.0 / K)) > 1e-12:
        raise ValueError("covariance bound requires equal weights")
    X = dataset.features
    S = ensemble.n_samples
    outputs = _ensemble_outputs(ensemble, spec, X)
    centered = outputs - outputs.mean(axis=0, keepdims=True)

    n = X.shape[0]
    cov = np.empty((K, K, n))
    for k in range(K):
        for k2 in range(K):
            cov[k, k2] = np.einsum("snc,snc->n", centered[:, k], centered[:, k2]) / S
    lhs = float(np.mean(cov.sum(axis=(0, 1)) / K**2))

    if K > 1:
        mask = ~np.eye(K, dtype=bool)
        min_pair = cov[mask].reshape(K * (K - 1), n).min(axis=0)
    else:
        min_pair = cov[0, 0]
    rhs = float(np.mean((K - 1) / K * min_pair))
    return lhs, rhs


def cka_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Linear centered kernel alignment between two output matrices.

    Columns are centered first; the score is ||A^T B||_F^2 divided by
    ||A^T A||_F * ||B^T B||_F and lies in [0, 1]. Invariant to orthogonal
    transforms and positive rescaling of either argument.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    denom_a = np.linalg.norm(a.T @ a)
    denom_b = np.linalg.norm(b.T @ b)
    if denom_a == 0.0 or denom_b == 0.0:
        raise ValueError("zero-variance input")
    return float(np.linalg.norm(a.T @ b) ** 2 / (denom_a * denom_b))


def mean_pairwise_cka(output_matrices: Sequence[np.ndarray]) -> float:
    """Mean CKA over all distinct pairs; the client-similarity diagnostic."""
    k = len(output_matrices)
    if k < 2:
        raise ValueError("need at least two matrices")
    scores = [cka_similarity(output_matrices[i], output_matrices[j])
              for i in range(k) for j in range(i + 1, k)]
    return float(np.mean(scores))


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xx = (x * x).sum(axis=1, keepdims=True)
    yy = (y * y).sum(axis=1, keepdims=True)
    d2 = xx + yy.T - 2.0 * x @ y.T
    return np.maximum(d2, 0.0)


def median_heuristic_bandwidth(xa: np.ndarray, xb: np.ndarray) -> float:
    """Median pairwise distance over the pooled samples (zeros excluded)."""
    z = np.concatenate([xa, xb], axis=0)
    d = np.sqrt(_sq_dists(z, z))
    nonzero = d[d > 0]
    if nonzero.size == 0:
        return 1.0
    return float(np.median(nonzero))


def mmd_rbf(xa: np.ndarray, xb: np.ndarray, bandwidth: float | None = None,
            unbiased: bool = True) -> MmdResult:
    """Squared maximum mean discrepancy with kernel exp(-d^2 / (2 sigma^2)).

    The unbiased estimator drops the diagonal terms and may dip slightly
    below zero for close distributions; the reported value is clamped at
    zero, the raw estimate is kept alongside.
    """
    xa = np.atleast_2d(np.asarray(xa, dtype=np.float64))
    xb = np.atleast_2d(np.asarray(xb, dtype=np.float64))
    m, n = xa.shape[0], xb.shape[0]
    if m < 2 or n < 2:
        raise ValueError("need at least 2 rows per sample set")
    sigma = bandwidth if bandwidth is not None else median_heuristic_bandwidth(xa, xb)
    if sigma <= 0:
        raise ValueError("bandwidth must be > 0")
    s2 = 2.0 * sigma * sigma
    kaa = np.exp(-_sq_dists(xa, xa) / s2)
    kbb = np.exp(-_sq_dists(xb, xb) / s2)
    kab = np.exp(-_sq_dists(xa, xb) / s2)
    if unbiased:
        np.fill_diagonal(kaa, 0.0)
        np.fill_diagonal(kbb, 0.0)
        raw = (kaa.sum() / (m * (m - 1)) + kbb.sum() / (n * (n - 1))
               - 2.0 * kab.mean())
    else:
        raw = kaa.mean() + kbb.mean() - 2.0 * kab.mean()
    raw = float(raw)
    return MmdResult(value=max(raw, 0.0), raw=raw)
