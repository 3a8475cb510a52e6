"""Spatio-temporal GP surrogates over latent codes.

``SVGPState`` is a whitened sparse variational GP with a deep-kernel feature
map on the latent code and an optional SE factor on normalized time.  The exact
GP below is kept small and serves as a reference for the sparse model.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from sklearn.cluster import kmeans_plusplus
from torch import nn

from .kernels import CholeskyError, ProductSpaceTimeKernelParams, SEKernelParams, jittered_cholesky, product_kernel

logger = logging.getLogger(__name__)

DTYPE = torch.float64


class NonFiniteSurrogateError(FloatingPointError):
    pass


@dataclass
class SurrogateDataset:
    """Aligned latent codes ``[n, d]``, normalized times ``[n]`` and values ``[n]``."""

    z: np.ndarray
    t: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        self.z = np.atleast_2d(np.asarray(self.z, dtype=float))
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if not (len(self.z) == len(self.t) == len(self.y)):
            raise ValueError("z, t and y must have the same number of records")
        if not (np.isfinite(self.z).all() and np.isfinite(self.t).all() and np.isfinite(self.y).all()):
            raise ValueError("surrogate records must be finite")

    def __len__(self) -> int:
        return len(self.y)

    def tensors(self):
        return (torch.as_tensor(self.z, dtype=DTYPE), torch.as_tensor(self.t, dtype=DTYPE), torch.as_tensor(self.y, dtype=DTYPE))


class PredictiveGaussian(NamedTuple):
    mean: torch.Tensor
    covariance: torch.Tensor

    @property
    def variance(self) -> torch.Tensor:
        return self.covariance.diagonal()


class FeatureMap(nn.Module):
    """Feed-forward deep-kernel map ``z -> R^h`` with tanh activations."""

    def __init__(self, latent_dim: int, hidden: tuple[int, ...] = (64, 64), output_dim: int = 16):
        super().__init__()
        dims = (latent_dim, *hidden, output_dim)
        layers: list[nn.Module] = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.Tanh()]
        self.net = nn.Sequential(*layers[:-1])
        self.to(DTYPE)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


def _softplus_inv(x: float) -> float:
    return x + math.log(-math.expm1(-x))


def _positive(raw: torch.Tensor) -> torch.Tensor:
    return nn.functional.softplus(raw) + 1e-6


class SVGPState(nn.Module):
    """Whitened SVGP: ``u = L_uu v`` with ``q(v) = N(m, S S^T)``.

    ``use_time=False`` drops the temporal kernel factor entirely; inducing
    inputs then live in feature space only.
    """

    def __init__(
        self,
        latent_dim: int,
        num_inducing: int = 64,
        use_time: bool = True,
        feature_map: nn.Module | None = None,
        feature_dim: int = 16,
        spatial_lengthscale: float = 1.0,
        spatial_variance: float = 1.0,
        temporal_lengthscale: float = 0.1,
        noise_variance: float = 1e-2,
        generator: torch.Generator | None = None,
        inducing_jitter: float = 0.0,
    ):
        super().__init__()
        self.use_time = use_time
        self.inducing_jitter = float(inducing_jitter)
        if feature_map is None:
            if generator is not None:
                state = torch.random.get_rng_state()
                torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=generator)))
            try:
                feature_map = FeatureMap(latent_dim, output_dim=feature_dim)
            finally:
                if generator is not None:
                    torch.random.set_rng_state(state)
        self.feature_map = feature_map
        with torch.no_grad():
            fdim = self.feature_map(torch.zeros(1, latent_dim, dtype=DTYPE)).shape[-1]
        width = fdim + int(use_time)
        self.max_inducing = num_inducing
        self.inducing_inputs = nn.Parameter(torch.zeros(num_inducing, width, dtype=DTYPE))
        self.variational_mean = nn.Parameter(torch.zeros(num_inducing, dtype=DTYPE))
        self.raw_chol_offdiag = nn.Parameter(torch.zeros(num_inducing, num_inducing, dtype=DTYPE))
        self.raw_chol_logdiag = nn.Parameter(torch.zeros(num_inducing, dtype=DTYPE))
        self.raw_spatial_lengthscale = nn.Parameter(torch.tensor(_softplus_inv(spatial_lengthscale), dtype=DTYPE))
        self.raw_spatial_variance = nn.Parameter(torch.tensor(_softplus_inv(spatial_variance), dtype=DTYPE))
        self.raw_temporal_lengthscale = nn.Parameter(torch.tensor(_softplus_inv(temporal_lengthscale), dtype=DTYPE), requires_grad=use_time)
        self.raw_noise = nn.Parameter(torch.tensor(_softplus_inv(noise_variance), dtype=DTYPE))

    # -- hyperparameters -------------------------------------------------
    @property
    def num_inducing(self) -> int:
        return self.inducing_inputs.shape[0]

    @property
    def spatial_lengthscale(self) -> torch.Tensor:
        return _positive(self.raw_spatial_lengthscale)

    @property
    def spatial_variance(self) -> torch.Tensor:
        return _positive(self.raw_spatial_variance)

    @property
    def temporal_lengthscale(self) -> torch.Tensor | None:
        return _positive(self.raw_temporal_lengthscale) if self.use_time else None

    @property
    def noise_variance(self) -> torch.Tensor:
        return _positive(self.raw_noise)

    @property
    def variational_chol(self) -> torch.Tensor:
        return torch.tril(self.raw_chol_offdiag, -1) + torch.diag(torch.exp(self.raw_chol_logdiag))

    @torch.no_grad()
    def kernel_params(self) -> ProductSpaceTimeKernelParams:
        temporal = SEKernelParams(1.0, float(self.temporal_lengthscale)) if self.use_time else SEKernelParams(1.0, float("inf"))
        return ProductSpaceTimeKernelParams(SEKernelParams(float(self.spatial_variance), float(self.spatial_lengthscale)), temporal)

    # -- kernel plumbing -------------------------------------------------
    def joint_inputs(self, z: torch.Tensor, t: torch.Tensor | None) -> torch.Tensor:
        f = self.feature_map(z)
        if self.use_time:
            f = torch.cat([f, t.reshape(-1, 1)], dim=-1)
        return f

    def kernel(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if self.use_time:
            return product_kernel(a[:, :-1], a[:, -1], b[:, :-1], b[:, -1], self.spatial_variance, self.spatial_lengthscale, self.temporal_lengthscale)
        return product_kernel(a, None, b, None, self.spatial_variance, self.spatial_lengthscale)

    def inducing_covariance(self) -> torch.Tensor:
        """``K_uu`` plus the relative nugget ``inducing_jitter * sigma_s^2``."""
        U = self.inducing_inputs
        K = self.kernel(U, U)
        if self.inducing_jitter > 0:
            K = K + self.inducing_jitter * self.spatial_variance * torch.eye(len(U), dtype=DTYPE)
        return K

    def _projection(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``A = L_uu^{-1} K_uf`` and the prior diagonal at ``x``."""
        U = self.inducing_inputs
        L = jittered_cholesky(self.inducing_covariance())
        A = torch.linalg.solve_triangular(L, self.kernel(U, x), upper=False)
        return A, L

    def marginals(self, z: torch.Tensor, t: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor]:
        """Posterior mean and marginal variance of ``g`` at ``(z, t)``."""
        A, _ = self._projection(self.joint_inputs(z, t))
        SA = self.variational_chol.T @ A
        return A.T @ self.variational_mean, self.spatial_variance - (A**2).sum(0) + (SA**2).sum(0)

    def predict(self, z, t=None) -> PredictiveGaussian:
        """Joint posterior ``q(g)`` at the query points."""
        z = torch.as_tensor(z, dtype=DTYPE)
        t = None if t is None or not self.use_time else torch.as_tensor(t, dtype=DTYPE).reshape(-1).expand(z.shape[0])
        x = self.joint_inputs(z, t)
        A, _ = self._projection(x)
        SA = self.variational_chol.T @ A
        cov = self.kernel(x, x) - A.T @ A + SA.T @ SA
        return PredictiveGaussian(A.T @ self.variational_mean, cov)

    def kl_divergence(self) -> torch.Tensor:
        """``KL(q(v) || N(0, I))``, equal to ``KL(q(u) || p(u))`` under whitening."""
        S = self.variational_chol
        m = self.variational_mean
        M = m.numel()
        return 0.5 * ((S**2).sum() + (m**2).sum() - M - 2.0 * torch.log(S.diagonal().abs()).sum())

    def set_variational(self, mean_u: torch.Tensor, cov_u: torch.Tensor) -> None:
        """Set ``q(u) = N(mean_u, cov_u)`` expressed in the whitened coordinates."""
        with torch.no_grad():
            U = self.inducing_inputs
            L = jittered_cholesky(self.inducing_covariance())
            m_v = torch.linalg.solve_triangular(L, mean_u[:, None], upper=False)[:, 0]
            tmp = torch.linalg.solve_triangular(L, cov_u, upper=False)
            S_v = torch.linalg.solve_triangular(L, tmp.T, upper=False)
            Sc = jittered_cholesky(0.5 * (S_v + S_v.T))
            self.variational_mean.copy_(m_v)
            self.raw_chol_logdiag.copy_(torch.log(Sc.diagonal()))
            self.raw_chol_offdiag.copy_(torch.tril(Sc, -1))

    def reset_inducing(self, inputs: torch.Tensor) -> None:
        """Replace the inducing inputs (count may change) and reset ``q(v)`` to the prior."""
        m = inputs.shape[0]
        if not 1 <= m <= self.max_inducing:
            raise ValueError(f"need between 1 and {self.max_inducing} inducing inputs")
        self.inducing_inputs = nn.Parameter(inputs.detach().clone().to(DTYPE))
        self.variational_mean = nn.Parameter(torch.zeros(m, dtype=DTYPE))
        self.raw_chol_offdiag = nn.Parameter(torch.zeros(m, m, dtype=DTYPE))
        self.raw_chol_logdiag = nn.Parameter(torch.zeros(m, dtype=DTYPE))

    def set_optimal_variational(self, data: SurrogateDataset) -> None:
        """Closed-form optimal ``q(u)`` for the Gaussian likelihood at the current hyperparameters."""
        with torch.no_grad():
            z, t, y = data.tensors()
            x = self.joint_inputs(z, t if self.use_time else None)
            U = self.inducing_inputs
            Kuu = self.inducing_covariance()
            Kuf = self.kernel(U, x)
            noise = self.noise_variance
            L = jittered_cholesky(Kuu)
            # Sigma = (Kuu + Kuf Kfu / noise)^{-1}; work in the L-whitened frame
            A = torch.linalg.solve_triangular(L, Kuf, upper=False)
            B = torch.eye(self.num_inducing, dtype=DTYPE) + A @ A.T / noise
            LB = jittered_cholesky(B)
            c = torch.cholesky_solve((A @ y / noise)[:, None], LB)[:, 0]
            LBinv = torch.linalg.solve_triangular(LB, torch.eye(self.num_inducing, dtype=DTYPE), upper=False)
            self.variational_mean.copy_(c)
            Sc = jittered_cholesky(LBinv.T @ LBinv)
            self.raw_chol_logdiag.copy_(torch.log(Sc.diagonal()))
            self.raw_chol_offdiag.copy_(torch.tril(Sc, -1))


def init_inducing_points(state: SVGPState, data: SurrogateDataset, rng: np.random.Generator) -> None:
    """k-means++ seeding over the (feature, time) pairs of the data."""
    z, t, _ = data.tensors()
    with torch.no_grad():
        x = state.joint_inputs(z, t if state.use_time else None).numpy()
    x = np.unique(x, axis=0)
    if len(x) <= state.max_inducing:
        centers = x
    else:
        centers, _ = kmeans_plusplus(x, state.max_inducing, random_state=int(rng.integers(0, 2**31 - 1)))
    state.reset_inducing(torch.as_tensor(centers, dtype=DTYPE))


def svgp_elbo(data: SurrogateDataset, state: SVGPState, minibatch=None) -> torch.Tensor:
    """Closed-form Gaussian expected log-likelihood, rescaled to the full data, minus KL."""
    z, t, y = data.tensors()
    n = len(y)
    if minibatch is not None:
        idx = torch.as_tensor(np.asarray(minibatch), dtype=torch.long)
        if idx.numel() == 0:
            raise ValueError("minibatch must be non-empty")
        z, t, y = z[idx], t[idx], y[idx]
    return _elbo(state, z, t, y, n)


def _elbo(state: SVGPState, z: torch.Tensor, t: torch.Tensor, y: torch.Tensor, num_data: int) -> torch.Tensor:
    mean, var = state.marginals(z, t if state.use_time else None)
    noise = state.noise_variance
    ell = -0.5 * math.log(2 * math.pi) - 0.5 * torch.log(noise) - 0.5 * ((y - mean) ** 2 + var) / noise
    return ell.sum() * (num_data / len(y)) - state.kl_divergence()


def fit_surrogate(
    data: SurrogateDataset,
    state: SVGPState,
    steps: int = 50,
    learning_rate: float = 0.01,
    batch_size: int | None = None,
    train_feature_map: bool = True,
    generator: torch.Generator | None = None,
    collapsed: bool = False,
    feature_lr_scale: float = 0.1,
) -> SVGPState:
    """Adam on the SVGP ELBO; updates ``state`` in place and returns it.

    With ``collapsed=True`` the variational parameters are held at their
    closed-form optimum, refreshed before every step, and Adam only moves the
    kernel, noise, inducing inputs and feature map.  At the optimum the partial
    gradient equals the gradient of the collapsed bound, so this is much more
    stable when the noise is small.  Feature-map weights use a learning rate
    scaled by ``feature_lr_scale``.

    Non-finite objectives roll back to the last finite parameters and raise.
    If the full-data ELBO ends more than 5% below its starting value the
    starting parameters are restored.
    """
    if len(data) == 0:
        raise ValueError("cannot fit a surrogate to an empty dataset")
    if steps <= 0:
        return state
    z, t, y = data.tensors()
    n = len(y)
    variational = ("variational_mean", "raw_chol_offdiag", "raw_chol_logdiag")
    groups: dict[bool, list] = {True: [], False: []}
    for name, p in state.named_parameters():
        if not p.requires_grad or (collapsed and name in variational):
            continue
        is_fm = name.startswith("feature_map.")
        if is_fm and not train_feature_map:
            continue
        groups[is_fm].append(p)
    opt = torch.optim.Adam(
        [{"params": groups[False]}, {"params": groups[True], "lr": learning_rate * feature_lr_scale}],
        lr=learning_rate,
    )
    if collapsed:
        state.set_optimal_variational(data)
    start = copy.deepcopy(state.state_dict())
    with torch.no_grad():
        elbo0 = float(_elbo(state, z, t, y, n))
    last_good = start
    for _ in range(steps):
        if collapsed:
            try:
                state.set_optimal_variational(data)
            except CholeskyError:
                state.load_state_dict(last_good)
                raise NonFiniteSurrogateError("kernel matrix lost definiteness; parameters rolled back")
        if batch_size is not None and batch_size < n:
            idx = torch.randperm(n, generator=generator)[:batch_size]
            loss = -_elbo(state, z[idx], t[idx], y[idx], n)
        else:
            loss = -_elbo(state, z, t, y, n)
        if not torch.isfinite(loss):
            state.load_state_dict(last_good)
            raise NonFiniteSurrogateError("SVGP ELBO became non-finite; parameters rolled back")
        last_good = copy.deepcopy(state.state_dict())
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        try:
            if collapsed:
                state.set_optimal_variational(data)
            elbo1 = float(_elbo(state, z, t, y, n))
        except CholeskyError:
            elbo1 = float("nan")
    if not math.isfinite(elbo1):
        state.load_state_dict(last_good)
        raise NonFiniteSurrogateError("SVGP ELBO became non-finite; parameters rolled back")
    if elbo1 < elbo0 - 0.05 * abs(elbo0):
        logger.warning("surrogate ELBO fell from %.4g to %.4g; restoring the starting state", elbo0, elbo1)
        state.load_state_dict(start)
    return state


def exact_gp_posterior(
    data: SurrogateDataset,
    query_z,
    query_t,
    kernel: ProductSpaceTimeKernelParams,
    noise: float,
    feature_map: nn.Module | None = None,
    use_time: bool = True,
) -> PredictiveGaussian:
    """Exact GP regression with the product kernel on ``(feature(z), t)``."""
    if len(data) > 2000:
        raise ValueError("exact GP is an oracle for at most 2000 records")
    fmap = feature_map if feature_map is not None else (lambda v: v)
    qz = torch.as_tensor(np.asarray(query_z, dtype=float), dtype=DTYPE)
    qt = torch.as_tensor(np.asarray(query_t, dtype=float), dtype=DTYPE).reshape(-1).expand(qz.shape[0])
    sv, sl = kernel.spatial.variance, kernel.spatial.lengthscale
    tl = kernel.temporal.lengthscale if use_time and math.isfinite(kernel.temporal.lengthscale) else None
    tv = kernel.temporal.variance

    def k(z1, t1, z2, t2):
        return product_kernel(fmap(z1), t1 if tl else None, fmap(z2), t2, sv, sl, tl, tv)

    with torch.no_grad():
        Kss = k(qz, qt, qz, qt)
        if len(data) == 0:
            return PredictiveGaussian(torch.zeros(qz.shape[0], dtype=DTYPE), Kss)
        z, t, y = data.tensors()
        Kxx = k(z, t, z, t) + noise * torch.eye(len(y), dtype=DTYPE)
        Kxs = k(z, t, qz, qt)
        L = jittered_cholesky(Kxx)
        alpha = torch.cholesky_solve(y[:, None], L)[:, 0]
        V = torch.linalg.solve_triangular(L, Kxs, upper=False)
        return PredictiveGaussian(Kxs.T @ alpha, Kss - V.T @ V)


def thompson_draws(
    state: SVGPState,
    candidates,
    t_now: float | None,
    num_draws: int,
    generator: torch.Generator | None = None,
) -> np.ndarray:
    """``num_draws`` joint posterior samples over the candidates, shape ``[n, num_draws]``."""
    # duplicate rows share one draw so jitter cannot split them
    uniq, inverse = np.unique(np.asarray(candidates, dtype=float), axis=0, return_inverse=True)
    cand = torch.as_tensor(uniq, dtype=DTYPE)
    with torch.no_grad():
        pred = state.predict(cand, t_now)
        cov = 0.5 * (pred.covariance + pred.covariance.T)
        L = jittered_cholesky(cov)
        eps = torch.randn(cand.shape[0], num_draws, dtype=DTYPE, generator=generator)
        return (pred.mean[:, None] + L @ eps).numpy()[inverse.reshape(-1)]


def thompson_sample_batch(
    state: SVGPState,
    candidates,
    t_now: float | None,
    batch_size: int,
    generator: torch.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Argmax of ``batch_size`` independent joint posterior draws over the candidates.

    Returns the selected candidate rows and their indices; repeats are allowed.
    """
    cand = np.asarray(candidates, dtype=float)
    if cand.shape[0] < batch_size:
        raise ValueError("need at least batch_size candidates")
    idx = thompson_draws(state, cand, t_now, batch_size, generator).argmax(0)
    return cand[idx], idx
