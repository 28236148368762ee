"""Student path: latent feature alignment and distillation losses.

The student maps full-token encoder latents straight into the AU head's
feature space; no mask information enters anywhere. Teacher outputs are
treated as constants, so no gradient can reach teacher parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .mae import TokenSequence
from .params import Affine, affine, make_affine
from .tensor import Tensor

PROB_EPS = 1e-6


@dataclass(frozen=True)
class KDConfig:
    temperature: float = 2.0  # edge-logit softening
    alpha: float = 1.0  # overall distillation weight
    beta: float = 0.1  # edge-vs-node distillation weight
    prob_eps: float = PROB_EPS
    direction: str = "as_printed"  # student-first KL; "reversed" swaps arguments

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("distillation weights must be nonnegative")
        if self.direction not in ("as_printed", "reversed"):
            raise ValueError(f"unknown KL direction {self.direction!r}")


@dataclass
class AlignmentParams:
    """Downsample-then-project head from encoder tokens to the AU feature grid."""

    pool: int  # spatial average-pool factor on the token grid
    fc1: Affine  # enc_dim -> hidden, rectified
    fc2: Affine  # hidden -> C


def init_alignment(enc_dim: int, c_out: int, token_grid: int, target_grid: int, seed: int, dtype=np.float64) -> AlignmentParams:
    if token_grid % target_grid != 0:
        raise ValueError(f"token grid {token_grid} cannot pool down to {target_grid}")
    rng = np.random.Generator(np.random.PCG64(seed))
    hidden = 2 * c_out
    return AlignmentParams(
        pool=token_grid // target_grid,
        fc1=make_affine(rng, enc_dim, hidden, dtype),
        fc2=make_affine(rng, hidden, c_out, dtype),
    )


def align_features(latent: TokenSequence | Tensor, params: AlignmentParams):
    """Project full-token latents onto the AU head's (B, H, W, C) feature grid."""
    tokens = latent.tokens if isinstance(latent, TokenSequence) else latent
    single = tokens.ndim == 2
    if single:
        tokens = tokens.reshape((1,) + tokens.shape)
    b, p, d = tokens.shape
    grid = int(round(np.sqrt(p)))
    if grid * grid != p:
        raise ValueError(f"token count {p} is not a square grid")
    f = params.pool
    x = tokens.reshape((b, grid // f, f, grid // f, f, d))
    x = x.mean(axis=(2, 4))  # (B, H, W, D)
    x = affine(T.relu(affine(x, params.fc1)), params.fc2)
    return x.reshape(x.shape[1:]) if single else x


def _bernoulli_kl(p, q):
    """Sum over AUs of KL(Bernoulli(p) || Bernoulli(q)), both pre-clamped."""
    return p * T.log(p / q) + (1.0 - p) * T.log((1.0 - p) / (1.0 - q))


def kd_au_loss(p_student, p_teacher, eps: float = PROB_EPS, direction: str = "as_printed"):
    """Mean per-AU Bernoulli KL between student and teacher activations.

    Arguments follow the student-first order by default; the teacher side
    is detached so it contributes no gradient. Both sides are clamped to
    [eps, 1 - eps].
    """
    p_t = p_teacher.detach() if isinstance(p_teacher, Tensor) else Tensor(np.asarray(p_teacher))
    if np.any(p_t.data < 0) or np.any(p_t.data > 1) or np.any(p_student.data < 0) or np.any(p_student.data > 1):
        raise ValueError("activation probabilities must lie in [0, 1]")
    ps = T.clip(p_student, eps, 1.0 - eps)
    pt = T.clip(p_t, eps, 1.0 - eps)
    kl = _bernoulli_kl(ps, pt) if direction == "as_printed" else _bernoulli_kl(pt, ps)
    return kl.mean()


def kd_edge_loss(z_student, z_teacher, temperature: float, eps: float = PROB_EPS, direction: str = "as_printed"):
    """Temperature-softened KL between edge-head logits, scaled by T^2.

    Mean over the N^2 ordered pairs (and any batch axis); teacher logits
    are detached.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z_t = z_teacher.detach() if isinstance(z_teacher, Tensor) else Tensor(np.asarray(z_teacher))
    ps = T.clip(T.softmax(z_student, axis=-1, temperature=temperature), eps, 1.0)
    pt = T.clip(T.softmax(z_t, axis=-1, temperature=temperature), eps, 1.0)
    if direction == "reversed":
        ps, pt = pt, ps
    kl = (ps * T.log(ps / pt)).sum(axis=-1)
    return (temperature**2) * kl.mean()


def kd_loss(l_au_kd, l_edge_kd, beta: float):
    """Combined distillation objective: node term plus beta * edge term."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    return l_au_kd + beta * l_edge_kd


def student_loss(l_au, l_edge, l_kd, lam: float, alpha: float):
    """Full student objective: supervised terms plus alpha * distillation."""
    if lam < 0 or alpha < 0:
        raise ValueError("loss weights must be nonnegative")
    return l_au + lam * l_edge + alpha * l_kd
