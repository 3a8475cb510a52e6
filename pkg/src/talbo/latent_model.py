"""GP-prior decoder-only generative model over token sequences.

A design's latent code is an additive sum of univariate basis-function GP
effects of its covariates (synthetic descriptors plus, optionally, time).  The
global coefficient matrices carry a diagonal Gaussian posterior, the per-covariate
SE amplitudes and lengthscales carry log-normal posteriors, and an autoregressive
GRU decoder turns codes into categorical token distributions.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .kernels import SQRT_2PI, HilbertBasisConfig, hilbert_basis, hilbert_eigenvalues, rescale_to_domain

DTYPE = torch.float64
ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789"
CHECKPOINT_MAGIC = "TALBO-DGBFGP"
CHECKPOINT_VERSION = 1


class NonFiniteELBOError(FloatingPointError):
    pass


@dataclass(frozen=True)
class DesignSequence:
    """A discrete design: a tuple of token indices."""

    tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        tokens = tuple(int(t) for t in self.tokens)
        if any(t < 0 for t in tokens):
            raise ValueError("token indices must be non-negative")
        object.__setattr__(self, "tokens", tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def validate(self, num_tokens: int, max_length: int) -> None:
        if not 1 <= len(self.tokens) <= max_length:
            raise ValueError(f"length {len(self.tokens)} outside [1, {max_length}]")
        if any(t >= num_tokens for t in self.tokens):
            raise ValueError(f"token outside alphabet of size {num_tokens}")

    def to_string(self) -> str:
        return "".join(ALPHABET[t] for t in self.tokens)

    @classmethod
    def from_string(cls, text: str) -> "DesignSequence":
        return cls(tuple(ALPHABET.index(ch) for ch in text))


@dataclass(frozen=True)
class CovariateVector:
    values: np.ndarray
    includes_time: bool = False
    time_index: int | None = None


@dataclass(frozen=True)
class LatentModelConfig:
    vocab_size: int = 5
    max_length: int = 8
    latent_dim: int = 16
    num_features: int = 16
    domain_half_width: float = 2.55
    include_time: bool = True
    hidden_size: int = 64
    embedding_size: int = 16
    use_eos: bool = True
    init_rel_std: float = 0.1

    @property
    def eos_token(self) -> int | None:
        return self.vocab_size - 1 if self.use_eos else None

    @property
    def num_design_tokens(self) -> int:
        return self.vocab_size - 1 if self.use_eos else self.vocab_size

    @property
    def hilbert(self) -> HilbertBasisConfig:
        return HilbertBasisConfig(self.num_features, self.domain_half_width)


@dataclass(frozen=True)
class CovariateEncoder:
    """Synthetic descriptors of a token sequence, rescaled to ``[-1, 1]``.

    One covariate per position holds ``(token + 1) / num_tokens`` (0 past the
    end of the sequence), followed by the relative length; the normalized time
    stamp is appended last when enabled.
    """

    num_tokens: int
    max_length: int
    include_time: bool = True
    half_width: float = 2.55
    low: tuple[float, ...] = field(default=())
    high: tuple[float, ...] = field(default=())

    def __post_init__(self) -> None:
        r = self.num_covariates
        if not self.low:
            object.__setattr__(self, "low", (0.0,) * r)
        if not self.high:
            object.__setattr__(self, "high", (1.0,) * r)
        if len(self.low) != r or len(self.high) != r:
            raise ValueError("rescaling constants must have one entry per covariate")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f"position_{j}" for j in range(self.max_length)) + ("length",)

    @property
    def num_covariates(self) -> int:
        return len(self.names) + int(self.include_time)

    @property
    def time_index(self) -> int | None:
        return len(self.names) if self.include_time else None

    def raw(self, x: DesignSequence, t: float | None = None) -> np.ndarray:
        if len(x) == 0:
            raise ValueError("cannot compute covariates of an empty design")
        if len(x) > self.max_length:
            raise ValueError(f"design longer than {self.max_length}")
        vals = np.zeros(self.num_covariates)
        vals[: len(x)] = (np.asarray(x.tokens, dtype=float) + 1.0) / self.num_tokens
        vals[self.max_length] = len(x) / self.max_length
        if self.include_time:
            if t is None:
                raise ValueError("time stamp required by a time-aware covariate encoder")
            vals[-1] = float(t)
        return vals

    def encode(self, x: DesignSequence, t: float | None = None) -> CovariateVector:
        vals = rescale_to_domain(self.raw(x, t), self.low, self.high, self.half_width)
        return CovariateVector(vals, self.include_time, self.time_index)

    def encode_many(self, designs: Sequence[DesignSequence], times=None) -> np.ndarray:
        if times is None:
            times = [None] * len(designs)
        raw = np.stack([self.raw(x, t) for x, t in zip(designs, times)])
        return rescale_to_domain(raw, self.low, self.high, self.half_width)


class BasisExpansion(nn.Module):
    """Variational parameters of the coefficient matrices and kernel hyperparameters.

    ``q(A)`` is a diagonal Gaussian.  Its means and standard deviations are stored
    relative to the prior standard deviations at ``sigma = ell = 1`` so that Adam
    steps are commensurate across basis frequencies; the KL is evaluated in
    log-space against the prior at the sampled hyperparameters.
    """

    def __init__(self, num_covariates: int, latent_dim: int, hilbert: HilbertBasisConfig, init_rel_std: float = 0.1, generator: torch.Generator | None = None, init_lengthscale: float = 2.0):
        super().__init__()
        self.hilbert = hilbert
        R, d, M = num_covariates, latent_dim, hilbert.num_features
        eig = torch.as_tensor(hilbert_eigenvalues(hilbert), dtype=DTYPE)
        self.register_buffer("eigenvalues", eig)
        self.register_buffer("log_ref_variance", math.log(SQRT_2PI) - 0.5 * eig)
        # initialize q(A) around a prior draw at a long lengthscale: high frequencies
        # start near zero, so sampled lengthscales below it cannot make the KL explode
        log_init = math.log(init_lengthscale * SQRT_2PI) - 0.5 * init_lengthscale**2 * eig
        rel = 0.5 * (log_init - self.log_ref_variance)
        self.raw_mean = nn.Parameter(torch.randn(R, d, M, dtype=DTYPE, generator=generator) * torch.exp(rel))
        self.raw_log_std = nn.Parameter((math.log(init_rel_std) + rel).expand(R, d, M).clone())
        # log-normal posteriors over amplitude and lengthscale: (loc, log scale) of the log
        self.sigma_loc = nn.Parameter(torch.zeros(R, dtype=DTYPE))
        self.sigma_log_scale = nn.Parameter(torch.full((R,), math.log(0.1), dtype=DTYPE))
        # start at ell = 0.5 so sampled lengthscales rarely exceed the reference of 1
        self.ell_loc = nn.Parameter(torch.full((R,), math.log(0.5), dtype=DTYPE))
        self.ell_log_scale = nn.Parameter(torch.full((R,), math.log(0.1), dtype=DTYPE))

    @property
    def num_covariates(self) -> int:
        return self.raw_mean.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.raw_mean.shape[1]

    @property
    def coef_mean(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_ref_variance) * self.raw_mean

    @property
    def coef_log_std(self) -> torch.Tensor:
        return self.raw_log_std + 0.5 * self.log_ref_variance

    def set_coefficients(self, mean: torch.Tensor, log_std: torch.Tensor) -> None:
        with torch.no_grad():
            self.raw_mean.copy_(mean * torch.exp(-0.5 * self.log_ref_variance))
            self.raw_log_std.copy_(log_std - 0.5 * self.log_ref_variance)

    def features(self, covariates) -> torch.Tensor:
        c = torch.as_tensor(covariates, dtype=DTYPE)
        if c.shape[-1] != self.num_covariates:
            raise ValueError(f"expected {self.num_covariates} covariates, got {c.shape[-1]}")
        return hilbert_basis(c, self.hilbert)

    def sample_coefficients(self, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(self.raw_mean.shape, dtype=DTYPE, generator=generator)
        return torch.exp(0.5 * self.log_ref_variance) * (self.raw_mean + torch.exp(self.raw_log_std) * eps)

    def sample_hyperparameters(self, generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        eps = torch.randn(2, self.num_covariates, dtype=DTYPE, generator=generator)
        sigma = torch.exp(self.sigma_loc + torch.exp(self.sigma_log_scale) * eps[0])
        ell = torch.exp(self.ell_loc + torch.exp(self.ell_log_scale) * eps[1])
        return sigma, ell

    def hyperparameter_medians(self) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.exp(self.sigma_loc), torch.exp(self.ell_loc)

    def log_prior_variances(self, sigma: torch.Tensor, ell: torch.Tensor) -> torch.Tensor:
        """``log S^(r)`` stacked as ``[R, M]`` (log of the SE spectral density at sqrt(lambda_m))."""
        sigma = torch.as_tensor(sigma, dtype=DTYPE)
        ell = torch.as_tensor(ell, dtype=DTYPE)
        return (2.0 * torch.log(sigma) + torch.log(ell) + math.log(SQRT_2PI))[:, None] - 0.5 * ell[:, None] ** 2 * self.eigenvalues

    def prior_variances(self, sigma: torch.Tensor, ell: torch.Tensor) -> torch.Tensor:
        return torch.exp(self.log_prior_variances(sigma, ell))

    def kl_coefficients(self, sigma: torch.Tensor, ell: torch.Tensor) -> torch.Tensor:
        """Closed-form ``KL(q(A) || p(A | sigma, ell))`` for diagonal Gaussians."""
        log_prior = self.log_prior_variances(sigma, ell)[:, None, :]
        # ratio of reference to prior variance; capped to keep exp finite
        log_ratio = (self.log_ref_variance - log_prior).clamp(max=700.0)
        rel = torch.exp(2.0 * self.raw_log_std) + self.raw_mean**2
        log_var = 2.0 * self.raw_log_std + self.log_ref_variance
        return 0.5 * (rel * torch.exp(log_ratio) - 1.0 - log_var + log_prior).sum()

    def kl_hyperparameters(self) -> tuple[torch.Tensor, torch.Tensor]:
        """KL of each log-normal posterior to the Lognormal(0, 1) prior."""

        def kl(loc, log_scale):
            return 0.5 * (torch.exp(2.0 * log_scale) + loc**2 - 1.0 - 2.0 * log_scale).sum()

        return kl(self.sigma_loc, self.sigma_log_scale), kl(self.ell_loc, self.ell_log_scale)

    def set_to_prior(self, sigma: float = 1.0, ell: float = 1.0) -> None:
        """Make ``q(A) = p(A | sigma, ell)`` and the hyperposteriors equal their priors."""
        with torch.no_grad():
            R = self.num_covariates
            log_prior = self.log_prior_variances(torch.full((R,), float(sigma)), torch.full((R,), float(ell)))
            self.raw_mean.zero_()
            self.raw_log_std.copy_((0.5 * (log_prior - self.log_ref_variance))[:, None, :].expand_as(self.raw_log_std))
            for p in (self.sigma_loc, self.ell_loc, self.sigma_log_scale, self.ell_log_scale):
                p.zero_()


def latent_code(features: torch.Tensor, coefficients: torch.Tensor) -> torch.Tensor:
    """``z = sum_r A^(r) phi^(r)(c^(r))`` for features ``[..., R, M]`` and ``A`` of shape ``[R, d, M]``."""
    if features.shape[-2:] != (coefficients.shape[0], coefficients.shape[2]):
        raise ValueError(f"feature shape {tuple(features.shape)} does not match coefficients {tuple(coefficients.shape)}")
    return torch.einsum("...rm,rdm->...d", features, coefficients)


class GRUDecoder(nn.Module):
    """Single-layer GRU decoder conditioned on the latent code at every step."""

    def __init__(self, vocab_size: int, latent_dim: int, max_length: int, eos_token: int | None = None, hidden_size: int = 64, embedding_size: int = 16):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_length = max_length
        self.eos_token = eos_token
        self.start_token = vocab_size
        self.embedding = nn.Embedding(vocab_size + 1, embedding_size)
        self.latent_to_input = nn.Linear(latent_dim, embedding_size)
        self.latent_to_hidden = nn.Linear(latent_dim, hidden_size)
        self.gru = nn.GRU(embedding_size, hidden_size, batch_first=True)
        self.output = nn.Linear(hidden_size, vocab_size)
        self.to(DTYPE)

    def logits(self, inputs: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits ``[N, L, V]`` for input token ids ``[N, L]``."""
        h0 = torch.tanh(self.latent_to_hidden(z))[None]
        x = self.embedding(inputs) + self.latent_to_input(z)[:, None, :]
        out, _ = self.gru(x, h0.contiguous())
        return self.output(out)

    def targets(self, designs: Sequence[DesignSequence]) -> tuple[torch.Tensor, torch.Tensor]:
        """Padded target ids (with EOS where the design is short) and their mask."""
        L = self.max_length
        tgt = np.zeros((len(designs), L), dtype=np.int64)
        mask = np.zeros((len(designs), L), dtype=bool)
        for i, x in enumerate(designs):
            n = len(x)
            if n > L:
                raise ValueError(f"design longer than max_length={L}")
            tgt[i, :n] = x.tokens
            mask[i, :n] = True
            if self.eos_token is not None and n < L:
                tgt[i, n] = self.eos_token
                mask[i, n] = True
        return torch.as_tensor(tgt), torch.as_tensor(mask)

    def log_likelihood_from_targets(self, targets: torch.Tensor, mask: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        inputs = torch.cat([torch.full_like(targets[:, :1], self.start_token), targets[:, :-1]], dim=1)
        logp = torch.log_softmax(self.logits(inputs, z), dim=-1)
        tok = logp.gather(-1, targets[..., None])[..., 0]
        tok = torch.where(mask, tok, torch.zeros_like(tok))
        return tok.sum(-1) / mask.sum(-1).clamp_min(1)

    def log_likelihood(self, designs: Sequence[DesignSequence], z: torch.Tensor) -> torch.Tensor:
        targets, mask = self.targets(designs)
        return self.log_likelihood_from_targets(targets, mask, z)

    @torch.no_grad()
    def decode(self, z: torch.Tensor) -> list[DesignSequence]:
        """Greedy argmax decoding; ties resolve to the lowest token index."""
        z = torch.as_tensor(z, dtype=DTYPE)
        if z.dim() == 1:
            z = z[None]
        n = z.shape[0]
        h = torch.tanh(self.latent_to_hidden(z))[None].contiguous()
        cond = self.latent_to_input(z)[:, None, :]
        prev = torch.full((n, 1), self.start_token, dtype=torch.long)
        out = torch.empty((n, self.max_length), dtype=torch.long)
        for step in range(self.max_length):
            o, h = self.gru(self.embedding(prev) + cond, h)
            prev = self.output(o).argmax(-1)
            out[:, step] = prev[:, 0]
        seqs = []
        for row in out.tolist():
            if self.eos_token is not None and self.eos_token in row:
                row = row[: row.index(self.eos_token)]
            seqs.append(DesignSequence(tuple(row)))
        return seqs


def decoder_log_likelihood(x: DesignSequence, z, theta: GRUDecoder) -> float:
    """Length-normalized log-likelihood of one design given one code."""
    if len(x) == 0:
        raise ValueError("design must be non-empty")
    z = torch.as_tensor(z, dtype=DTYPE).reshape(1, -1)
    with torch.no_grad():
        return float(theta.log_likelihood([x], z)[0])


def decode_argmax(z, theta: GRUDecoder) -> DesignSequence:
    return theta.decode(torch.as_tensor(z, dtype=DTYPE).reshape(1, -1))[0]


class ElboTerms(NamedTuple):
    reconstruction: torch.Tensor
    kl_coefficients: torch.Tensor
    kl_sigma: torch.Tensor
    kl_lengthscale: torch.Tensor
    kl_scale: float = 1.0

    @property
    def elbo(self) -> torch.Tensor:
        return self.reconstruction - self.kl_scale * self.kl_coefficients - self.kl_sigma - self.kl_lengthscale


def elbo_terms(
    targets: torch.Tensor,
    mask: torch.Tensor,
    features: torch.Tensor,
    basis: BasisExpansion,
    decoder: GRUDecoder,
    num_data: int | None = None,
    mc_samples: int = 1,
    kl_scale: float = 1.0,
    generator: torch.Generator | None = None,
    hyperparameters: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> ElboTerms:
    """ELBO pieces for one mini-batch.

    The KL of ``q(A)`` is evaluated at the posterior medians of ``sigma`` and
    ``ell`` unless ``hyperparameters`` pins the evaluation point.  Averaging it
    over log-normal draws has unbounded variance: the prior variance of
    frequency ``m`` falls like ``exp(-ell^2 lambda_m / 2)``.
    """
    n = targets.shape[0]
    num_data = n if num_data is None else num_data
    recon = targets.new_zeros((), dtype=DTYPE)
    for _ in range(mc_samples):
        z = latent_code(features, basis.sample_coefficients(generator))
        recon = recon + decoder.log_likelihood_from_targets(targets, mask, z).sum()
    recon = recon * (num_data / (n * mc_samples))
    sigma, ell = basis.hyperparameter_medians() if hyperparameters is None else hyperparameters
    kl_a = basis.kl_coefficients(sigma, ell)
    kl_s, kl_l = basis.kl_hyperparameters()
    terms = ElboTerms(recon, kl_a, kl_s, kl_l, kl_scale)
    for name, value in zip(terms._fields[:4], terms[:4]):
        if not torch.isfinite(value):
            raise NonFiniteELBOError(f"ELBO term {name!r} is not finite ({float(value.detach())})")
    return terms


def dgbfgp_elbo(
    designs: Sequence[DesignSequence],
    covariates,
    basis: BasisExpansion,
    decoder: GRUDecoder,
    mc_samples: int = 1,
    num_data: int | None = None,
    kl_scale: float = 1.0,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Reparameterized Monte-Carlo ELBO of a mini-batch; differentiate with autograd."""
    if len(designs) == 0:
        raise ValueError("batch must be non-empty")
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    targets, mask = decoder.targets(designs)
    feats = basis.features(np.asarray(covariates, dtype=float).reshape(len(designs), -1))
    return elbo_terms(targets, mask, feats, basis, decoder, num_data, mc_samples, kl_scale, generator).elbo


@dataclass
class LatentModel:
    """Covariate encoder, basis expansion and decoder travelling together."""

    config: LatentModelConfig
    encoder: CovariateEncoder
    basis: BasisExpansion
    decoder: GRUDecoder

    @classmethod
    def create(cls, config: LatentModelConfig, seed: int = 0) -> "LatentModel":
        gen = torch.Generator().manual_seed(seed)
        encoder = CovariateEncoder(config.num_design_tokens, config.max_length, config.include_time, config.domain_half_width)
        basis = BasisExpansion(encoder.num_covariates, config.latent_dim, config.hilbert, config.init_rel_std, gen)
        torch_state = torch.random.get_rng_state()
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
        try:
            decoder = GRUDecoder(config.vocab_size, config.latent_dim, config.max_length, config.eos_token, config.hidden_size, config.embedding_size)
        finally:
            torch.random.set_rng_state(torch_state)
        return cls(config, encoder, basis, decoder)

    def covariates(self, designs: Sequence[DesignSequence], times=None) -> np.ndarray:
        if not self.config.include_time:
            times = None
        return self.encoder.encode_many(designs, times)

    def features(self, designs: Sequence[DesignSequence], times=None) -> torch.Tensor:
        return self.basis.features(self.covariates(designs, times))

    def mean_embedding(self, features: torch.Tensor) -> torch.Tensor:
        return latent_code(features, self.basis.coef_mean)

    def embed(self, designs: Sequence[DesignSequence], times=None) -> np.ndarray:
        with torch.no_grad():
            return self.mean_embedding(self.features(designs, times)).numpy()

    def decode(self, z) -> list[DesignSequence]:
        return self.decoder.decode(torch.as_tensor(np.asarray(z), dtype=DTYPE))

    def parameters(self):
        return list(self.basis.parameters()) + list(self.decoder.parameters())

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.state_dict().items()}

    def state_dict(self) -> dict[str, torch.Tensor]:
        out = {f"basis.{k}": v for k, v in self.basis.state_dict().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        self.basis.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("basis.")})
        self.decoder.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("decoder.")})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        meta = {
            "config": asdict(self.config),
            "encoder": {"low": list(self.encoder.low), "high": list(self.encoder.high), "names": list(self.encoder.names)},
            "hilbert": asdict(self.config.hilbert),
            "alphabet": ALPHABET[: self.config.vocab_size],
        }
        arrays = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        with open(path, "wb") as fh:
            np.savez(fh, magic=np.array(CHECKPOINT_MAGIC), version=np.array(CHECKPOINT_VERSION), meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "LatentModel":
        with np.load(path, allow_pickle=False) as data:
            if "magic" not in data or str(data["magic"]) != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a latent-model checkpoint")
            version = int(data["version"])
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {version}")
            meta = json.loads(str(data["meta"]))
            state = {k: torch.as_tensor(data[k]) for k in data.files if k.startswith(("basis.", "decoder."))}
        model = cls.create(LatentModelConfig(**meta["config"]))
        model.encoder = CovariateEncoder(
            model.encoder.num_tokens, model.encoder.max_length, model.encoder.include_time, model.encoder.half_width,
            tuple(meta["encoder"]["low"]), tuple(meta["encoder"]["high"]),
        )
        model.load_state_dict(state)
        return model


def posterior_mean_embedding(x: DesignSequence, t: float | None, model: LatentModel) -> np.ndarray:
    """Expected latent code under ``q(A)``; by linearity it uses the posterior means."""
    return model.embed([x], [t])[0]


def train_latent_model(
    model: LatentModel,
    designs: Sequence[DesignSequence],
    times=None,
    steps: int = 2000,
    learning_rate: float = 1e-3,
    batch_size: int = 64,
    kl_scale: float = 1e-3,
    mc_samples: int = 1,
    generator: torch.Generator | None = None,
    extra_loss: Callable[[np.ndarray, torch.Tensor], torch.Tensor] | None = None,
) -> list[float]:
    """Maximize the mini-batch ELBO with Adam; returns the per-step loss trace.

    ``extra_loss(batch_indices, features)`` is added to the negative ELBO, which is
    how the alignment regularizers join during representation updates.
    """
    targets, mask = model.decoder.targets(designs)
    feats = model.features(designs, times)
    n = len(designs)
    bs = min(batch_size, n)
    gen = generator if generator is not None else torch.Generator().manual_seed(0)
    opt = torch.optim.Adam(model.parameters(), lr=learning_rate)
    trace = []
    for _ in range(steps):
        idx = torch.randperm(n, generator=gen)[:bs]
        terms = elbo_terms(targets[idx], mask[idx], feats[idx], model.basis, model.decoder, n, mc_samples, kl_scale, gen)
        loss = -terms.elbo / n
        if extra_loss is not None:
            loss = loss + extra_loss(idx.numpy(), feats[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
    return trace
