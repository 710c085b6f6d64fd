"""Target evaluation, multi-step rollout and the bound diagnostics.

The divergence term is a proxy: with unit shared covariance the KL between
two Gaussians reduces to half the squared distance between their means, so

    delta_i = mean_k 1/2 ||c_{i+1}^k - mu_{i+1}^k||^2

where ``c`` are centroids forecast from domain ``i`` and ``mu`` the empirical
class means of domain ``i+1``. The spread of these values (``lambda_hat``) uses
the learned operator rather than the optimal one, so it over-estimates.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .tknet import TKNetParams, centroids_from_support, embed, predict


def evaluate_target(params: TKNetParams, support, target, power=1) -> float:
    """Accuracy on ``target`` with centroids forecast ``power`` steps from ``support``."""
    c = centroids_from_support(params, support.x, support.y, power=power)
    return float(np.mean(predict(params, c, target.x) == target.y))


def rollout_multistep(params: TKNetParams, support, targets) -> list[float]:
    """Horizon ``j`` uses ``K^j`` applied to the support embeddings."""
    if not targets:
        raise ValueError("need at least one target domain")
    return [evaluate_target(params, support, t, power=j) for j, t in enumerate(targets, start=1)]


def forecast_accuracy(params: TKNetParams, seq) -> float:
    """Prototype accuracy on the last source domain, forecast from the one before it."""
    return evaluate_target(params, seq[len(seq) - 2], seq[len(seq) - 1])


def forecast_risk(params: TKNetParams, seq) -> float:
    return 1.0 - forecast_accuracy(params, seq)


def kl_proxy(params: TKNetParams, seq) -> np.ndarray:
    """One divergence proxy per consecutive pair of ``seq``."""
    if len(seq) < 2:
        raise ValueError("need at least two domains")
    out = []
    for a in range(len(seq) - 1):
        src, nxt = seq[a], seq[a + 1]
        c = centroids_from_support(params, src.x, src.y).vectors
        z = embed(params, nxt.x)
        gaps = []
        for k in range(seq.n_classes):
            members = nxt.y == k
            if not members.any():
                raise ValueError(f"class {k} absent from domain {a + 1}")
            gaps.append(0.5 * np.sum((c[k] - z[members].mean(axis=0)) ** 2))
        out.append(float(np.mean(gaps)))
    return np.array(out)


def estimate_lambda(deltas) -> float:
    """Largest pairwise gap between divergence values."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.size < 2:
        raise ValueError("need at least two divergence values")
    return float(deltas.max() - deltas.min())


def estimate_bound(risk: float, deltas, lam: float, loss_range: float = 1.0) -> float:
    """Forecast risk plus the divergence and consistency terms of the temporal bound."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.size < 1:
        raise ValueError("need at least one divergence value")
    if not loss_range > 0:
        raise ValueError("loss range must be positive")
    if np.any(deltas < 0) or lam < 0:
        raise ValueError("divergences and lambda must be non-negative")
    n = deltas.size
    return float(risk + loss_range / math.sqrt(2 * n) * (math.sqrt(deltas.sum()) + math.sqrt(n * lam)))


def fit_koopman(params: TKNetParams, seq, ridge=0.0) -> np.ndarray:
    """Least-squares operator mapping class means of ``G(phi(S_i))`` onto those of ``S_{i+1}``.

    Solves ``min_K sum ||K mu_i^k - mu_{i+1}^k||^2 (+ ridge ||K||^2)`` over all
    consecutive pairs and classes.
    """
    means = []
    for d in seq.domains:
        z = embed(params, d.x)
        means.append(np.stack([z[d.y == k].mean(axis=0) for k in range(seq.n_classes)]))
    src = np.concatenate(means[:-1])
    dst = np.concatenate(means[1:])
    gram = src.T @ src + ridge * np.eye(src.shape[1])
    return np.linalg.solve(gram, src.T @ dst).T


@dataclass
class EvalReport:
    target_accuracy: float
    step_accuracies: list
    kl_proxy: list = field(default_factory=list)
    lambda_hat: float | None = None
    bound: float | None = None
    forecast_risk: float | None = None
    loss_range: float = 1.0
    notes: str = "lambda_hat uses the learned operator and over-estimates the optimal-operator value"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def diagnostics(params: TKNetParams, sources, loss_range=1.0) -> dict:
    deltas = kl_proxy(params, sources)
    lam = estimate_lambda(deltas) if deltas.size >= 2 else 0.0
    risk = forecast_risk(params, sources)
    return dict(kl_proxy=deltas.tolist(), lambda_hat=lam, forecast_risk=risk,
                bound=estimate_bound(risk, deltas, lam, loss_range), loss_range=loss_range)


def evaluate(params: TKNetParams, sources, targets, with_diagnostics=True) -> EvalReport:
    accs = rollout_multistep(params, sources[len(sources) - 1], list(targets.domains))
    report = EvalReport(accs[0], accs)
    if with_diagnostics:
        for k, v in diagnostics(params, sources).items():
            setattr(report, k, v)
    return report
