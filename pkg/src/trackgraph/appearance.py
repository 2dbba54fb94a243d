"""Per-track Gaussian appearance model with a learnable conjugate-prior update.

Each track keeps a diagonal-covariance Gaussian over the appearance
descriptor space.  Edges of the association graph are seeded with the
log-likelihood of a detection's descriptor under the track's Gaussian, and
after each matched frame the Gaussian is blended toward the new observation
with predicted rates, following the normal-inverse-chi-square posterior
update

    mu+    = kappa x + (1 - kappa) mu
    sigma+ = nu s + (1 - nu) sigma + kappa (1 - nu) / (kappa + nu) * (x - mu)^2

where s stands in for the sample variance (zero for the single-observation
updates performed here).  All quantities are Tensors so the update chain is
differentiable end to end, including the rate-prediction head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import NumericError, ParamStore, Tensor

VAR_FLOOR = 1e-6

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GaussianAppearance:
    """Diagonal Gaussian: mean and per-dimension variance, both (A,)."""

    mu: Tensor
    sigma: Tensor

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass
class UpdateRates:
    """Mean and covariance blending rates, each a scalar Tensor in (0, 1)."""

    kappa: Tensor
    nu: Tensor


def init_model(x, sigma0: float) -> GaussianAppearance:
    """New model centered on the initializing descriptor with isotropic
    variance sigma0 (> 0)."""
    if sigma0 <= 0:
        raise NumericError(f"sigma0 must be positive, got {sigma0}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    sigma = Tensor(np.full(x.shape, float(sigma0)))
    return GaussianAppearance(mu=x, sigma=sigma)


def log_likelihood(model: GaussianAppearance, x) -> Tensor:
    """Scalar log density of x under the model:
    sum_i [ -1/2 ln(2 pi sigma_i) - (x_i - mu_i)^2 / (2 sigma_i) ]."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape != model.mu.shape:
        raise NumericError(
            f"descriptor shape {x.shape} does not match model dim {model.mu.shape}"
        )
    diff = x - model.mu
    quad = diff * diff / (model.sigma * 2.0)
    logdet = (nc.log(model.sigma) + LOG_2PI) * 0.5
    return nc.reshape(nc.tsum(-logdet - quad), ())


def update(model: GaussianAppearance, x, rates: UpdateRates,
           sigma_tilde=None, *, freeze_sigma: bool = False) -> GaussianAppearance:
    """Posterior blend of the Gaussian toward observation x.

    sigma_tilde is the sample-variance term (defaults to zero, the degenerate
    value for one observation).  With freeze_sigma the covariance stays put
    (constant-covariance ablation) and only the mean moves.  The result's
    variance is floored at VAR_FLOOR.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    kappa, nu = rates.kappa, rates.nu
    if float(kappa.data) + float(nu.data) == 0.0:
        raise nc.NumericOverflowError(
            "kappa + nu must be nonzero in the appearance update")
    mu_new = kappa * x + (1.0 - kappa) * model.mu
    if freeze_sigma:
        return GaussianAppearance(mu=mu_new, sigma=model.sigma)
    if sigma_tilde is None:
        sigma_tilde = Tensor(np.zeros(model.mu.shape))
    elif not isinstance(sigma_tilde, Tensor):
        sigma_tilde = Tensor(sigma_tilde)
    diff = x - model.mu
    spread = kappa * (1.0 - nu) / (kappa + nu) * (diff * diff)
    sigma_new = nu * sigma_tilde + (1.0 - nu) * model.sigma + spread
    sigma_new = nc.clip(sigma_new, VAR_FLOOR, np.inf)
    return GaussianAppearance(mu=mu_new, sigma=sigma_new)


def init_rate_params(params: ParamStore, embed_dim: int, rng: np.random.Generator):
    params.add("rate_head/w", nc.uniform_init(rng, (2, embed_dim), embed_dim))
    params.add("rate_head/b", np.zeros(2))


def predict_rates(track_embedding: Tensor, params: ParamStore) -> UpdateRates:
    """(kappa, nu) = sigmoid of a 2-output linear head on the track embedding,
    so both rates live strictly inside (0, 1)."""
    head = nc.linear(params["rate_head/w"], params["rate_head/b"], track_embedding)
    rates = nc.sigmoid(head)
    kappa = nc.reshape(nc.gather(rates, [0]), ())
    nu = nc.reshape(nc.gather(rates, [1]), ())
    return UpdateRates(kappa=kappa, nu=nu)
