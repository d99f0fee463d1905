"""Ancestral reverse-process generation for uniform and absorbing models.

A run draws z at t = 1 from the prior, walks the uniform grid
t = T/T, (T-1)/T, ..., 1/T with guided reverse steps, and decodes the
final latent with one more posterior step to time zero. Classifier-free
guidance blends the clean-token rows before they enter the posterior;
classifier-based guidance tempers the posterior rows themselves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import NoiseSchedule, Vocabulary, sample_rows
from .forward import PriorSpec, posterior_matrix
from .guidance import GuidanceConfig, cbg_exact, cbg_taylor, cfg_combine

DECODES = ("sample", "argmax")


@dataclass(frozen=True)
class SampleRequest:
    num_sequences: int
    length: int
    T: int
    guidance: GuidanceConfig = GuidanceConfig()
    seed: int = 0
    final_decode: str = "sample"

    def __post_init__(self) -> None:
        if self.num_sequences < 1 or self.length < 1 or self.T < 1:
            raise ValueError("num_sequences, length, and T must be >= 1")
        if self.final_decode not in DECODES:
            raise ValueError(f"final_decode must be one of {DECODES}")


def model_prior(denoiser) -> PriorSpec:
    """The forward prior a denoiser was trained against, inferred from
    whichever attributes the object exposes."""
    if hasattr(denoiser, "prior"):
        return denoiser.prior
    if getattr(denoiser, "kind", "uniform") == "absorbing":
        if hasattr(denoiser, "vocab"):
            return PriorSpec.absorbing(denoiser.vocab)
        return PriorSpec.absorbing(
            Vocabulary(denoiser.n, mask_index=denoiser.mask_index)
        )
    n = denoiser.vocab.size if hasattr(denoiser, "vocab") else denoiser.n
    return PriorSpec.uniform(n)


def model_schedule(denoiser) -> NoiseSchedule:
    sched = getattr(denoiser, "schedule", None)
    return sched if sched is not None else NoiseSchedule()


def prior_draw(prior: PriorSpec, length: int, rng: np.random.Generator):
    """t = 1 draw: i.i.d. prior tokens (all-mask for absorbing)."""
    return _prior_batch(prior, 1, length, rng)[0]


def _prior_batch(prior: PriorSpec, num: int, length: int,
                 rng: np.random.Generator) -> np.ndarray:
    if prior.kind == "absorbing":
        return np.full((num, length), prior.mask_index, dtype=np.int64)
    rows = np.tile(prior.pi.probs, (num * length, 1))
    return sample_rows(rows, rng).reshape(num, length)


def _x_rows(denoiser, z: np.ndarray, t: float, condition) -> np.ndarray:
    """(B, L) latents -> (B, L, N) predicted clean-token rows."""
    if hasattr(denoiser, "rows_batch"):
        return np.asarray(denoiser.rows_batch(z, t, condition),
                          dtype=np.float64)
    if hasattr(denoiser, "rows"):
        return np.stack([
            np.asarray(denoiser.rows(zb, t, condition), dtype=np.float64)
            for zb in z
        ])
    return np.stack([np.asarray(denoiser(zb, t), dtype=np.float64) for zb in z])


def _guided_x_rows(denoiser, z, t, config: GuidanceConfig) -> np.ndarray:
    if config.mode == "cfg":
        cond = _x_rows(denoiser, z, t, config.target_class)
        uncond = _x_rows(denoiser, z, t, None)
        return cfg_combine(cond, uncond, config.gamma)
    condition = config.target_class if config.mode == "none" else None
    return _x_rows(denoiser, z, t, condition)


def _apply_cbg(rows_batch, z, t_clf, config, classifier) -> np.ndarray:
    transform = cbg_exact if config.mode == "cbg_exact" else cbg_taylor
    out = np.empty_like(rows_batch)
    for b in range(z.shape[0]):
        out[b] = transform(classifier, z[b], t_clf, rows_batch[b],
                           config.target_class, config.gamma)
    return out


def _step_batch(z, t, s, denoiser, config, rng, classifier, prior,
                schedule) -> np.ndarray:
    num, length = z.shape
    n = prior.size
    x_rows = _guided_x_rows(denoiser, z, t, config)
    post = posterior_matrix(
        z.reshape(-1), x_rows.reshape(-1, n), t, s, prior, schedule
    ).reshape(num, length, n)
    if config.needs_classifier:
        t_clf = s if config.classifier_time == "s" else t
        post = _apply_cbg(post, z, t_clf, config, classifier)
    return sample_rows(post.reshape(-1, n), rng).reshape(num, length)


def reverse_step(z_t_seq, t: float, s: float, denoiser,
                 guidance: GuidanceConfig, rng: np.random.Generator,
                 classifier=None, prior: PriorSpec | None = None,
                 schedule: NoiseSchedule | None = None) -> np.ndarray:
    """One guided ancestral step z_t -> z_s, every position sampled
    independently from its substituted posterior."""
    if not s < t:
        raise ValueError(f"need s < t, got s={s}, t={t}")
    if guidance.needs_classifier and classifier is None:
        raise ValueError(f"guidance mode {guidance.mode!r} needs a classifier")
    z = np.asarray(z_t_seq, dtype=np.int64)
    prior = model_prior(denoiser) if prior is None else prior
    schedule = model_schedule(denoiser) if schedule is None else schedule
    return _step_batch(z[None, :], float(t), float(s), denoiser, guidance,
                       rng, classifier, prior, schedule)[0]


def _decode_batch(z, t, denoiser, config, rng, classifier, prior, schedule,
                  final_decode) -> np.ndarray:
    """Final posterior step t -> 0. The time-zero posterior reduces to the
    bridge times the guided x-row, so absorbing models keep every unmasked
    token and fill residual masks from x, while uniform models copy z with
    probability -> 1 as T grows."""
    num, length = z.shape
    n = prior.size
    x_rows = _guided_x_rows(denoiser, z, t, config)
    post = posterior_matrix(
        z.reshape(-1), x_rows.reshape(-1, n), t, 0.0, prior, schedule
    ).reshape(num, length, n)
    if config.needs_classifier:
        t_clf = 0.0 if config.classifier_time == "s" else t
        post = _apply_cbg(post, z, t_clf, config, classifier)
    if final_decode == "argmax":
        return np.argmax(post, axis=-1)
    return sample_rows(post.reshape(-1, n), rng).reshape(z.shape)


def _count_edits(old, new, prior) -> np.ndarray:
    changed = new != old
    if prior.kind == "absorbing":
        changed &= old != prior.mask_index  # unmasking is not an edit
    return changed.sum(axis=1)


def generate(request: SampleRequest, model, classifier=None):
    """Sample request.num_sequences sequences; returns (tokens array of
    shape (num, L), per-sequence diagnostics). Deterministic per seed."""
    config = request.guidance
    if config.needs_classifier and classifier is None:
        raise ValueError(f"guidance mode {config.mode!r} needs a classifier")
    if hasattr(model, "length") and model.length != request.length:
        raise ValueError(f"model length {model.length} != requested "
                         f"{request.length}")
    prior = model_prior(model)
    schedule = model_schedule(model)
    rng = np.random.default_rng(request.seed)
    z = _prior_batch(prior, request.num_sequences, request.length, rng)
    edits = np.zeros(request.num_sequences, dtype=np.int64)
    for i in range(request.T, 1, -1):
        stepped = _step_batch(z, i / request.T, (i - 1) / request.T, model,
                              config, rng, classifier, prior, schedule)
        edits += _count_edits(z, stepped, prior)
        z = stepped
    decoded = _decode_batch(z, 1.0 / request.T, model, config, rng,
                            classifier, prior, schedule, request.final_decode)
    edits += _count_edits(z, decoded, prior)
    diagnostics = [
        {"steps": request.T, "edits": int(e)} for e in edits
    ]
    return decoded, diagnostics


def write_samples(path, sequences, vocab: Vocabulary,
                  request: SampleRequest | None = None) -> None:
    """One detokenized sequence per line; when the request is given, a
    sidecar JSON records how to reproduce the batch."""
    from .data import detokenize

    with open(path, "w", encoding="utf-8") as fh:
        for row in np.asarray(sequences, dtype=np.int64):
            fh.write(detokenize(row, vocab) + "\n")
    if request is not None:
        meta = {
            "seed": request.seed,
            "T": request.T,
            "gamma": request.guidance.gamma,
            "mode": request.guidance.mode,
            "target_class": request.guidance.target_class,
            "num_sequences": request.num_sequences,
            "final_decode": request.final_decode,
        }
        with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2)
            fh.write("\n")
