"""Training and evaluation objectives.

Scalar evaluation paths (plain numpy, denoiser given as an object with a
``.rows(z_seq, t, condition)`` method or a bare ``f(z_seq, t)`` callable)
live alongside batched graph builders used by model.train.

Conventions, resolved once here:

* Discrete-time grid: t_i = i/T for i = 0..T. The reconstruction term
  sits at t = 0 where the forward marginal is a point mass on the clean
  data and the predictor copies its input, so it is identically zero;
  the prior term sits at t = 1 where alpha = 0, so it is zero for both
  supported priors. Both are still computed generically.
* The continuous-time integrand carries the prefactor alpha'/(N alpha),
  which is negative; the bracketed term is negative as well, making the
  integrand nonnegative. The verification suite pins this sign against
  an independent KL/(t - s) limit oracle.
* Monte Carlo losses draw t uniformly from the clamped schedule range
  and scale by the interval width, keeping the estimator unbiased.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import NoiseSchedule
from .forward import PriorSpec

_SUPPORT_EPS = 1e-300  # posterior entries below this count as off-support

OBJECTIVES = ("nelbo_discrete", "udlm_continuous", "mdlm_continuous", "sedd_form")


@dataclass(frozen=True)
class LossSpec:
    objective: str
    T: int | None = None
    mc_samples_per_example: int = 1
    exact_expectation: bool = False

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.objective == "nelbo_discrete" and (self.T is None or self.T < 1):
            raise ValueError("nelbo_discrete needs T >= 1")
        if self.mc_samples_per_example < 1:
            raise ValueError("mc_samples_per_example must be positive")


def _rows(denoiser, z_seq, t, condition=None) -> np.ndarray:
    if hasattr(denoiser, "rows"):
        return np.asarray(denoiser.rows(z_seq, t, condition), dtype=np.float64)
    return np.asarray(denoiser(z_seq, t), dtype=np.float64)


# ------------------------------------------------------------ KL building

def diffusion_kl(
    x: int, z_t: int, t: float, s: float, x_theta_row: np.ndarray,
    prior: PriorSpec, schedule: NoiseSchedule,
) -> float:
    """KL[q(z_s | z_t, x) || q(z_s | z_t, x = x_theta)], one position."""
    from .forward import posterior_probs, _one_hot

    q = posterior_probs(z_t, _one_hot(x, prior.size), t, s, prior, schedule)
    p = posterior_probs(z_t, x_theta_row, t, s, prior, schedule)
    return _kl(q, p)


def _kl(q: np.ndarray, p: np.ndarray) -> float:
    support = q > _SUPPORT_EPS
    if np.any(support & (p <= 0)):
        return np.inf
    qs, ps = q[support], p[support]
    return float(np.sum(qs * (np.log(qs) - np.log(ps))))


# ---------------------------------------------------------- discrete-time

def nelbo_discrete(
    x_seq, denoiser, T: int, prior: PriorSpec, schedule: NoiseSchedule,
    mode: str = "exact", rng: np.random.Generator | None = None,
    mc_samples: int = 1, condition=None,
) -> float:
    """Discrete-time NELBO in nats per sequence over the grid t_i = i/T.

    exact mode enumerates every latent sequence z_t at every grid time,
    weighting by the forward marginal (affordable only for small N^L);
    mc mode samples (grid index, z_t) pairs.
    """
    x_seq = np.asarray(x_seq, dtype=np.int64)
    if mode not in ("exact", "mc"):
        raise ValueError(f"unknown mode {mode!r}")
    total = _prior_kl(x_seq, prior, schedule) + _reconstruction(x_seq, schedule)
    if mode == "exact":
        for i in range(1, T + 1):
            total += _exact_kl_term(x_seq, denoiser, i / T, (i - 1) / T,
                                    prior, schedule, condition)
        return total
    if rng is None:
        raise ValueError("mc mode needs an rng")
    acc = 0.0
    for _ in range(mc_samples):
        i = int(rng.integers(1, T + 1))
        t, s = i / T, (i - 1) / T
        z = _corrupt(x_seq, t, prior, schedule, rng)
        rows = _rows(denoiser, z, t, condition)
        acc += T * float(
            _kl_rows(z[None, :], x_seq, rows[None, :, :], t, s, prior, schedule)[0]
        )
    return total + acc / mc_samples


def _exact_kl_term(x_seq, denoiser, t, s, prior, schedule, condition) -> float:
    """E_{q(z_t | x)} sum_l KL_l, by exhaustive enumeration of z_t."""
    length = x_seq.shape[0]
    n = prior.size
    if n ** length > 10 ** 5:
        raise ValueError(f"exact expectation over {n}^{length} latents refused")
    marg = _marginal_rows(x_seq, t, prior, schedule)  # (L, N)
    latents = np.array(
        list(itertools.product(range(n), repeat=length)), dtype=np.int64
    ).reshape(n ** length, length)
    weights = np.prod(marg[np.arange(length)[None, :], latents], axis=1)
    live = weights > 0
    rows_all = np.stack([
        _rows(denoiser, z, t, condition) for z in latents[live]
    ])
    kls = _kl_rows(latents[live], x_seq, rows_all, t, s, prior, schedule)
    return float(weights[live] @ kls)


def _kl_rows(
    z: np.ndarray, x_seq: np.ndarray, rows: np.ndarray, t: float, s: float,
    prior: PriorSpec, schedule: NoiseSchedule,
) -> np.ndarray:
    """Per-sequence KL[q(z_s|z_t,x) || p_theta(z_s|z_t)] summed over
    positions, vectorized over a stack of latents: z (S, L), rows
    (S, L, N) predicted clean distributions -> (S,)."""
    pi = prior.pi.probs
    n = pi.shape[0]
    a_t, a_s = schedule.alpha(t), schedule.alpha(s)
    a_ts = schedule.alpha_ratio(t, s)
    z_oh = _onehot(z, n)
    x_oh = np.zeros((x_seq.shape[0], n))
    x_oh[np.arange(x_seq.shape[0]), x_seq] = 1.0
    trans = a_ts * z_oh + (1.0 - a_ts) * pi[z][..., None]
    q_num = trans * (a_s * x_oh[None] + (1.0 - a_s) * pi)
    q_den = a_t * (z == x_seq[None, :]) + (1.0 - a_t) * pi[z]
    if np.any(q_den <= 0):
        raise ValueError("latent with zero forward probability")
    q = q_num / q_den[..., None]
    rows_at_z = np.take_along_axis(rows, z[..., None], axis=-1)[..., 0]
    p_den = a_t * rows_at_z + (1.0 - a_t) * pi[z]
    if np.any(p_den <= 0):
        raise ValueError("predicted distribution gives the latent zero mass")
    p = trans * (a_s * rows + (1.0 - a_s) * pi) / p_den[..., None]
    support = q > _SUPPORT_EPS
    out = np.sum(
        np.where(support, q * (np.log(np.where(support, q, 1.0))
                               - np.log(np.where(support & (p > 0), p, 1.0))),
                 0.0),
        axis=(1, 2),
    )
    bad = np.any(support & (p <= 0), axis=(1, 2))
    out[bad] = np.inf
    return out


def _marginal_rows(x_seq, t, prior, schedule) -> np.ndarray:
    a_t = schedule.alpha(t)
    rows = np.tile((1.0 - a_t) * prior.pi.probs, (x_seq.shape[0], 1))
    rows[np.arange(x_seq.shape[0]), x_seq] += a_t
    return rows


def _corrupt(x_seq, t, prior, schedule, rng) -> np.ndarray:
    keep = rng.random(x_seq.shape) < schedule.alpha(t)
    noise = rng.choice(prior.size, size=x_seq.shape, p=prior.pi.probs)
    return np.where(keep, x_seq, noise)


def _prior_kl(x_seq, prior, schedule) -> float:
    """KL[q(z_1 | x) || pi] per position, summed; zero when alpha(1) = 0."""
    total = 0.0
    for x in x_seq:
        q = _marginal_rows(np.array([x]), 1.0, prior, schedule)[0]
        total += _kl(q, prior.pi.probs)
    return total


def _reconstruction(x_seq, schedule) -> float:
    # alpha(0) = 1 makes z_0 = x almost surely and the decode is a copy,
    # so -log p(x | z_0) = 0 identically.
    return 0.0


# -------------------------------------------------------- continuous-time

def _mixtures(x_onehot_or_row: np.ndarray, t: float, n: int,
              schedule: NoiseSchedule) -> np.ndarray:
    """N alpha_t v + (1 - alpha_t) 1, the unnormalized time-t marginal."""
    a = schedule.alpha(t)
    return n * a * x_onehot_or_row + (1.0 - a)


def udlm_integrand(
    x: int, z_t: int, t: float, x_theta_row: np.ndarray,
    schedule: NoiseSchedule,
) -> float:
    """Per-token continuous-time loss rate at latent z_t, uniform prior.

    (alpha'/(N alpha)) [N/xb_i - N/xbt_i
        - sum_{j != i} (xb_j/xb_i) log(xbt_i xb_j / (xbt_j xb_i))]
    with xb the clean-data mixture, xbt the predicted mixture, i = z_t.
    """
    x_theta_row = np.asarray(x_theta_row, dtype=np.float64)
    n = x_theta_row.shape[0]
    # Evaluable on all of (0, 1); the t_min/t_max clamp protects *training
    # draws* from the endpoint cancellation, not point evaluation.
    if not 0.0 < t < 1.0:
        raise ValueError(f"t={t} outside (0, 1)")
    x_vec = np.zeros(n)
    x_vec[x] = 1.0
    xb = _mixtures(x_vec, t, n, schedule)
    xbt = _mixtures(x_theta_row, t, n, schedule)
    i = z_t
    log_ratio = (np.log(xbt[i]) - np.log(xbt)) + (np.log(xb) - np.log(xb[i]))
    weights = xb / xb[i]
    cross = float(np.sum(np.delete(weights * log_ratio, i)))
    bracket = n / xb[i] - n / xbt[i] - cross
    prefactor = schedule.alpha_prime(t) / (n * schedule.alpha(t))
    return float(prefactor * bracket)


def udlm_loss(
    x_seq, denoiser, rng: np.random.Generator, mc_samples: int,
    schedule: NoiseSchedule, condition=None,
) -> float:
    """Monte Carlo estimate of the sequence-level continuous-time loss,
    t ~ Uniform(t_min, t_max), z_t ~ forward marginal."""
    x_seq = np.asarray(x_seq, dtype=np.int64)
    n = _infer_n(denoiser, x_seq, schedule)
    prior = PriorSpec.uniform(n)
    width = schedule.t_max - schedule.t_min
    acc = 0.0
    for _ in range(mc_samples):
        t = float(schedule.draw_t(rng))
        z = _corrupt(x_seq, t, prior, schedule, rng)
        rows = _rows(denoiser, z, t, condition)
        val = sum(
            udlm_integrand(int(x_seq[l]), int(z[l]), t, rows[l], schedule)
            for l in range(x_seq.shape[0])
        )
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite integrand at t={t}, z={z}")
        acc += width * val
    return acc / mc_samples


def mdlm_loss(
    x_seq, denoiser, rng: np.random.Generator, mc_samples: int,
    schedule: NoiseSchedule, mask_index: int, condition=None,
) -> float:
    """Continuous-time absorbing-state loss (adopted, and validated against
    nelbo_discrete at large T): only masked positions contribute
    -alpha'/(1 - alpha) * -log<x, x_theta>."""
    x_seq = np.asarray(x_seq, dtype=np.int64)
    width = schedule.t_max - schedule.t_min
    acc = 0.0
    for _ in range(mc_samples):
        t = float(schedule.draw_t(rng))
        a = schedule.alpha(t)
        keep = rng.random(x_seq.shape) < a
        z = np.where(keep, x_seq, mask_index)
        masked = z == mask_index
        if not masked.any():
            continue
        rows = _rows(denoiser, z, t, condition)
        logp = np.log(rows[np.arange(x_seq.shape[0]), x_seq])
        rate = -schedule.alpha_prime(t) / (1.0 - a)
        val = rate * float(np.sum(-logp[masked]))
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite integrand at t={t}, z={z}")
        acc += width * val
    return acc / mc_samples


def sedd_form_nelbo(
    x: int, z_t: int, t: float, x_theta_row: np.ndarray,
    schedule: NoiseSchedule,
) -> float:
    """Score-parameterized form of the same per-token loss rate.

    sum_{z' != z} R(z, z') [s(z') - ratio(z') log s(z') + K(ratio(z'))]
    with s the predicted mixture ratio, ratio the true one, and
    K(a) = a (log a - 1).
    """
    x_theta_row = np.asarray(x_theta_row, dtype=np.float64)
    n = x_theta_row.shape[0]
    a = schedule.alpha(t)
    rate = -schedule.alpha_prime(t) / (n * a)  # off-diagonal uniform rate
    x_vec = np.zeros(n)
    x_vec[x] = 1.0
    xb = _mixtures(x_vec, t, n, schedule)
    xbt = _mixtures(x_theta_row, t, n, schedule)
    i = z_t
    if xb[i] <= 0 or xbt[i] <= 0:
        raise ValueError("zero mixture ratio; t outside the valid range")
    total = 0.0
    for j in range(n):
        if j == i:
            continue
        score = xbt[j] / xbt[i]
        ratio = xb[j] / xb[i]
        total += score - ratio * np.log(score) + ratio * (np.log(ratio) - 1.0)
    return float(rate * total)


def _infer_n(denoiser, x_seq, schedule) -> int:
    rows = _rows(denoiser, x_seq, schedule.t_min + 0.1)
    return rows.shape[1]


# ----------------------------------------------------------------- scores

def bpc(nelbo_nats: float, length: int) -> float:
    return nelbo_nats / (length * np.log(2.0))


def ppl(nelbo_nats: float, length: int) -> float:
    return float(np.exp(nelbo_nats / length))


# ------------------------------------------- batched graph builders (train)

def training_loss_node(
    spec: LossSpec, field_nodes: list, params, x: np.ndarray,
    cond_idx: np.ndarray, rng: np.random.Generator,
) -> ad.Node:
    """One minibatch loss as a scalar Node; draws (t, z_t) internally."""
    from .model import denoiser_logprob_rows

    schedule = params.schedule
    n = params.vocab.size
    batch = x.shape[0]
    parts = []
    for _ in range(spec.mc_samples_per_example):
        if spec.objective == "nelbo_discrete":
            i = rng.integers(1, spec.T + 1, size=batch)
            t, s = i / spec.T, (i - 1) / spec.T
        else:
            t = schedule.draw_t(rng, size=batch)
            s = None
        prior_probs = _prior_vec(params)
        keep = rng.random(x.shape) < schedule.alpha(t)[:, None]
        noise = rng.choice(n, size=x.shape, p=prior_probs)
        z = np.where(keep, x, noise)
        rows = denoiser_logprob_rows(field_nodes, params, z, t, cond_idx)
        if spec.objective == "udlm_continuous":
            parts.append(_udlm_batch_node(rows, x, z, t, n, schedule))
        elif spec.objective == "sedd_form":
            parts.append(_sedd_batch_node(rows, x, z, t, n, schedule))
        elif spec.objective == "mdlm_continuous":
            parts.append(_mdlm_batch_node(rows, x, z, t, schedule,
                                          params.vocab.mask_index))
        else:
            parts.append(_nelbo_mc_batch_node(rows, x, z, t, s, spec.T,
                                              prior_probs, schedule))
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total * (1.0 / len(parts))


def _prior_vec(params) -> np.ndarray:
    if params.kind == "absorbing":
        vec = np.zeros(params.vocab.size)
        vec[params.vocab.mask_index] = 1.0
        return vec
    return np.full(params.vocab.size, 1.0 / params.vocab.size)


def _onehot(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(idx.shape + (n,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def _udlm_batch_node(rows, x, z, t, n, schedule) -> ad.Node:
    """Mean over the batch of width * sum_l integrand, as a Node."""
    width = schedule.t_max - schedule.t_min
    a = schedule.alpha(t)[:, None, None]
    ap = schedule.alpha_prime(t)[:, None]
    xb = n * a * _onehot(x, n) + (1.0 - a)            # (B, L, N) constant
    bl = np.arange(x.shape[0])[:, None], np.arange(x.shape[1])[None, :]
    xb_i = xb[bl[0], bl[1], z]                        # (B, L)
    xtheta = ad.exp(rows)
    xbt = n * ad.mul(ad.constant(a), xtheta) + (1.0 - a)
    log_xbt = ad.log(xbt)
    xbt_i = ad.gather_last(xbt, z)
    log_xbt_i = ad.gather_last(log_xbt, z)
    # sum_{j != i} (xb_j / xb_i) [log xbt_i - log xbt_j + log xb_j - log xb_i]
    w = xb / xb_i[..., None] * (1.0 - _onehot(z, n))
    const_part = np.log(xb) - np.log(xb_i)[..., None]
    diff = ad.reshape(log_xbt_i, log_xbt_i.shape + (1,)) - log_xbt + const_part
    cross = ad.nsum(ad.mul(ad.constant(w), diff), axis=-1)          # (B, L)
    bracket = (n / xb_i) - (n / xbt_i) - cross
    integrand = ad.mul(ad.constant(ap / (n * schedule.alpha(t)[:, None])),
                       bracket)
    return width * ad.nmean(ad.nsum(integrand, axis=1))


def _sedd_batch_node(rows, x, z, t, n, schedule) -> ad.Node:
    width = schedule.t_max - schedule.t_min
    a = schedule.alpha(t)[:, None, None]
    rate = (-schedule.alpha_prime(t) / (n * schedule.alpha(t)))[:, None]
    xb = n * a * _onehot(x, n) + (1.0 - a)
    bl = np.arange(x.shape[0])[:, None], np.arange(x.shape[1])[None, :]
    xb_i = xb[bl[0], bl[1], z]
    off = 1.0 - _onehot(z, n)
    ratio = xb / xb_i[..., None]
    k_of_ratio = ratio * (np.log(ratio) - 1.0)
    xtheta = ad.exp(rows)
    xbt = n * ad.mul(ad.constant(a), xtheta) + (1.0 - a)
    log_xbt = ad.log(xbt)
    log_xbt_i = ad.gather_last(log_xbt, z)
    log_score = log_xbt - ad.reshape(log_xbt_i, log_xbt_i.shape + (1,))
    score = ad.exp(log_score)
    inner = score - ad.mul(ad.constant(ratio), log_score) + k_of_ratio
    per_pos = ad.nsum(ad.mul(ad.constant(off), inner), axis=-1)
    integrand = ad.mul(ad.constant(rate), per_pos)
    return width * ad.nmean(ad.nsum(integrand, axis=1))


def _mdlm_batch_node(rows, x, z, t, schedule, mask_index) -> ad.Node:
    width = schedule.t_max - schedule.t_min
    a = schedule.alpha(t)[:, None]
    rate = -schedule.alpha_prime(t)[:, None] / (1.0 - a)
    weight = rate * (z == mask_index)
    logp_x = ad.gather_last(rows, x)
    per_ex = ad.nsum(ad.mul(ad.constant(weight), -logp_x), axis=1)
    return width * ad.nmean(per_ex)


def _nelbo_mc_batch_node(rows, x, z, t, s, T, prior_probs, schedule) -> ad.Node:
    """T * KL[q(z_s|z_t,x) || p_theta(z_s|z_t)], one sampled grid rung."""
    n = prior_probs.shape[0]
    a_t = schedule.alpha(t)[:, None, None]
    a_s = schedule.alpha(s)[:, None, None]
    a_ts = np.where(schedule.alpha(s) > 0,
                    schedule.alpha(t) / np.maximum(schedule.alpha(s), 1e-300),
                    0.0)[:, None, None]
    pi_z = prior_probs[z][..., None]                   # (B, L, 1)
    trans = a_ts * _onehot(z, n) + (1.0 - a_ts) * pi_z
    # true posterior (constant)
    x_oh = _onehot(x, n)
    q_num = trans * (a_s * x_oh + (1.0 - a_s) * prior_probs)
    bl = np.arange(x.shape[0])[:, None], np.arange(x.shape[1])[None, :]
    q_den = (a_t[..., 0] * x_oh[bl[0], bl[1], z]
             + (1.0 - a_t[..., 0]) * prior_probs[z])
    q = q_num / q_den[..., None]
    # model posterior (Node), x replaced by the predicted distribution
    xtheta = ad.exp(rows)
    p_num = ad.mul(ad.constant(trans),
                   ad.mul(ad.constant(a_s), xtheta) + (1.0 - a_s) * prior_probs)
    p_den = (ad.mul(ad.constant(a_t[..., 0]), ad.gather_last(xtheta, z))
             + (1.0 - a_t[..., 0]) * prior_probs[z])
    p = ad.div(p_num, ad.reshape(p_den, p_den.shape + (1,)))
    support = (q > _SUPPORT_EPS).astype(np.float64)
    q_masked = q * support
    entropy = np.sum(q_masked * np.log(np.where(support > 0, q, 1.0)),
                     axis=(1, 2))
    # off-support p entries are padded to 1 so the log stays finite; their
    # weight is zero so neither value nor gradient leaks through
    log_p = ad.log(p + (1.0 - support))
    cross = ad.nsum(ad.nsum(ad.mul(ad.constant(q_masked), log_p), axis=-1),
                    axis=-1)
    return float(T) * ad.nmean(ad.constant(entropy) - cross)
