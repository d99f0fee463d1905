"""The forward corruption process q and its exact posteriors.

The forward marginal interpolates between clean data and a prior pi:
q(z_t | x) = Cat(alpha_t x + (1 - alpha_t) pi). The reverse-time posterior
q(z_s | z_t, x) follows from Bayes over one interpolating transition.

The general-pi posterior is implemented once; the uniform and absorbing
closed forms are kept as separate fast paths and validated against it,
since the specializations are where sign and normalization bugs creep in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Categorical, NoiseSchedule, Vocabulary


@dataclass(frozen=True)
class PriorSpec:
    """Noise prior: uniform 1/N, absorbing mask one-hot, or a general vector."""

    kind: str
    pi: Categorical
    mask_index: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "absorbing", "general"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind == "uniform":
            expected = np.full(self.pi.size, 1.0 / self.pi.size)
            if not np.allclose(self.pi.probs, expected, atol=1e-12):
                raise ValueError("uniform prior must have pi = 1/N everywhere")
        if self.kind == "absorbing":
            if self.mask_index is None:
                raise ValueError("absorbing prior requires a mask_index")
            expected = np.zeros(self.pi.size)
            expected[self.mask_index] = 1.0
            if not np.array_equal(self.pi.probs, expected):
                raise ValueError("absorbing prior must be one-hot at mask_index")

    @classmethod
    def uniform(cls, n: int) -> "PriorSpec":
        return cls("uniform", Categorical.uniform(n))

    @classmethod
    def absorbing(cls, vocab: Vocabulary) -> "PriorSpec":
        if vocab.mask_index is None:
            raise ValueError("absorbing prior needs a vocabulary with a mask token")
        return cls(
            "absorbing",
            Categorical.one_hot(vocab.mask_index, vocab.size),
            mask_index=vocab.mask_index,
        )

    @classmethod
    def general(cls, pi: Categorical) -> "PriorSpec":
        return cls("general", pi)

    @property
    def size(self) -> int:
        return self.pi.size

    @classmethod
    def for_vocab(cls, vocab: Vocabulary) -> "PriorSpec":
        if vocab.is_absorbing:
            return cls.absorbing(vocab)
        return cls.uniform(vocab.size)


def marginal(
    x: int, t: float, prior: PriorSpec, schedule: NoiseSchedule
) -> Categorical:
    """q(z_t | x) = Cat(alpha_t onehot(x) + (1 - alpha_t) pi)."""
    a_t = schedule.alpha(t)
    vec = (1.0 - a_t) * prior.pi.probs.copy()
    vec[x] += a_t
    return Categorical(vec)


def sample_latent(
    x: int, t: float, prior: PriorSpec, schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> int:
    """Draw z_t ~ q(z_t | x) via the mixture form of the marginal."""
    a_t = schedule.alpha(t)
    if rng.random() < a_t:
        return int(x)
    return prior.pi.sample(rng)


def sample_latent_seq(
    x_seq: np.ndarray, t: float, prior: PriorSpec, schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """Corrupt a whole sequence at time t, positions independent."""
    x_seq = np.asarray(x_seq, dtype=np.int64)
    a_t = schedule.alpha(t)
    keep = rng.random(x_seq.shape) < a_t
    noise = rng.choice(prior.size, size=x_seq.shape, p=prior.pi.probs)
    return np.where(keep, x_seq, noise)


def posterior_probs(
    z_t: int,
    x_row: np.ndarray,
    t: float,
    s: float,
    prior: PriorSpec,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """General-pi posterior q(z_s | z_t, x) as a raw probability vector.

    ``x_row`` may be a one-hot vector (true posterior) or any probability
    vector over clean tokens (the x-substituted reverse distribution used
    by the sampler). Derived once from Bayes over the forward marginals:

        num[j] = (a_ts 1[j=i] + (1-a_ts) pi[i]) * (a_s x_row[j] + (1-a_s) pi[j])
        den    = a_t x_row[i] + (1-a_t) pi[i]
    """
    pi = prior.pi.probs
    n = pi.shape[0]
    x_row = np.asarray(x_row, dtype=np.float64)
    if x_row.shape != (n,):
        raise ValueError(f"x_row shape {x_row.shape} does not match N={n}")
    a_s = schedule.alpha(s)
    a_t = schedule.alpha(t)
    a_ts = schedule.alpha_ratio(t, s)
    den = a_t * x_row[z_t] + (1.0 - a_t) * pi[z_t]
    if den <= 0:
        raise ValueError(
            f"latent z_t={z_t} has probability zero under the forward process"
        )
    trans = np.full(n, (1.0 - a_ts) * pi[z_t])
    trans[z_t] += a_ts
    num = trans * (a_s * x_row + (1.0 - a_s) * pi)
    return num / den


def posterior(
    z_t: int, x: int, t: float, s: float, prior: PriorSpec,
    schedule: NoiseSchedule,
) -> Categorical:
    """Exact posterior q(z_s | z_t, x) for any prior, s <= t."""
    vec = posterior_probs(z_t, _one_hot(x, prior.size), t, s, prior, schedule)
    return Categorical(vec)


def posterior_uniform(
    z_t: int, x: int, t: float, s: float, n: int, schedule: NoiseSchedule
) -> Categorical:
    """Closed-form uniform-prior posterior (fast path).

    probs[j] = [N a_t 1[j=i=x] + (a_ts - a_t) 1[j=i] + (a_s - a_t) 1[j=x]
                + (1-a_ts)(1-a_s)/N] / (N a_t 1[i=x] + 1 - a_t)
    """
    a_s = schedule.alpha(s)
    a_t = schedule.alpha(t)
    a_ts = schedule.alpha_ratio(t, s)
    vec = np.full(n, (1.0 - a_ts) * (1.0 - a_s) / n)
    vec[z_t] += a_ts - a_t
    vec[x] += a_s - a_t
    if z_t == x:
        vec[x] += n * a_t
    den = n * a_t * (1.0 if z_t == x else 0.0) + 1.0 - a_t
    return Categorical(vec / den)


def posterior_absorbing(
    z_t: int, x: int, t: float, s: float, vocab: Vocabulary,
    schedule: NoiseSchedule,
) -> Categorical:
    """Absorbing-prior posterior: carry-over for unmasked z_t, otherwise
    unmask to x with probability (a_s - a_t) / (1 - a_t)."""
    mask = vocab.mask_index
    if mask is None:
        raise ValueError("absorbing posterior needs a mask token")
    if z_t != mask:
        # Unmasked latents are fixed points of the reverse process.
        return Categorical.one_hot(z_t, vocab.size)
    a_s = schedule.alpha(s)
    a_t = schedule.alpha(t)
    vec = np.zeros(vocab.size)
    vec[x] = (a_s - a_t) / (1.0 - a_t)
    vec[mask] += (1.0 - a_s) / (1.0 - a_t)
    return Categorical(vec)


def posterior_matrix(
    z_seq: np.ndarray,
    x_rows: np.ndarray,
    t: float,
    s: float,
    prior: PriorSpec,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Vectorized posterior over a sequence: (L,) latents x (L, N) clean
    rows -> (L, N) posterior rows. Same arithmetic as posterior_probs."""
    pi = prior.pi.probs
    z_seq = np.asarray(z_seq, dtype=np.int64)
    x_rows = np.asarray(x_rows, dtype=np.float64)
    ell = z_seq.shape[0]
    a_s = schedule.alpha(s)
    a_t = schedule.alpha(t)
    a_ts = schedule.alpha_ratio(t, s)
    den = a_t * x_rows[np.arange(ell), z_seq] + (1.0 - a_t) * pi[z_seq]
    if np.any(den <= 0):
        bad = int(np.argmax(den <= 0))
        raise ValueError(
            f"position {bad}: latent {z_seq[bad]} has probability zero"
        )
    trans = np.repeat(((1.0 - a_ts) * pi[z_seq])[:, None], pi.shape[0], axis=1)
    trans[np.arange(ell), z_seq] += a_ts
    num = trans * (a_s * x_rows + (1.0 - a_s) * pi[None, :])
    return num / den[:, None]


def _one_hot(index: int, size: int) -> np.ndarray:
    vec = np.zeros(size)
    vec[index] = 1.0
    return vec
