"""Forward/reverse denoising processes, the noise schedule, a linear
latent codec, and the ancestral sampling loop with a guided composition
window.

The reverse model predicts the injected noise (epsilon parameterization)
and the per-step variance is fixed at beta_t. The sampler optionally
blends the running latent with a noised guide latent during the first
``window`` reverse steps.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attention import ExtendedAttentionWeights, identity_self_attention, self_attention
from .errors import ConfigError, ShapeError, StepError
from .numerics import RngStream, gaussian, tensor

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "forward_step",
    "forward_marginal",
    "reverse_step",
    "sample",
    "LatentCodec",
    "make_codec",
    "encode",
    "decode",
    "DenoiserModel",
]

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise variances beta_t plus derived alpha_t and their
    running products alpha_bar_t. Arrays are 0-indexed; step t uses
    index t-1."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray


def build_schedule(
    T: int, beta_start: float = DEFAULT_BETA_START, beta_end: float = DEFAULT_BETA_END
) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` over T steps."""
    if T < 1:
        raise ConfigError(f"schedule needs T >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_step(t: int, sched: NoiseSchedule):
    if not 1 <= t <= sched.T:
        raise StepError(f"step {t} outside 1..{sched.T}")


def forward_step(
    x_prev: np.ndarray, t: int, sched: NoiseSchedule, rng: RngStream
) -> np.ndarray:
    """One Markov noising step: sqrt(1-beta_t) x + sqrt(beta_t) eps."""
    _check_step(t, sched)
    x_prev = tensor(x_prev)
    b = sched.beta[t - 1]
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * gaussian(rng, x_prev.shape)


def forward_marginal(
    x0: np.ndarray, t: int, sched: NoiseSchedule, rng: RngStream
) -> np.ndarray:
    """Closed form of t iterated noising steps:
    sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    _check_step(t, sched)
    x0 = tensor(x0)
    ab = sched.alpha_bar[t - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * gaussian(rng, x0.shape)


@dataclass(frozen=True)
class DenoiserModel:
    """Toy noise predictor: token reshape + one attention block + affine head.

    A latent of ``n_tokens * token_dim`` entries is reshaped to a token
    matrix, shifted by the projected conditioning vector, passed through
    (identity-augmented) self-attention, and mapped back per token. The
    optional ``identity`` embedding is fixed per subject; ``None`` selects
    the plain base-attention path.
    """

    n_tokens: int
    token_dim: int
    attention: ExtendedAttentionWeights
    head_w: np.ndarray  # (head_dim, token_dim)
    head_b: np.ndarray  # (token_dim,)
    cond_w: np.ndarray  # (cond_dim, token_dim)
    cond_b: np.ndarray  # (token_dim,)
    identity: np.ndarray | None = None

    @property
    def latent_size(self) -> int:
        return self.n_tokens * self.token_dim

    @property
    def cond_dim(self) -> int:
        return self.cond_w.shape[0]

    def with_identity(self, identity: np.ndarray | None) -> "DenoiserModel":
        return replace(self, identity=identity)

    def with_attention(self, attention: ExtendedAttentionWeights) -> "DenoiserModel":
        return replace(self, attention=attention)

    def predict_noise(self, latent: np.ndarray, cond: np.ndarray) -> np.ndarray:
        latent = tensor(latent)
        if latent.size != self.latent_size:
            raise ShapeError(
                f"latent size {latent.size} != model size {self.latent_size}"
            )
        cond = tensor(cond).reshape(-1)
        if cond.shape[0] != self.cond_dim:
            raise ShapeError(f"cond dim {cond.shape[0]} != model cond dim {self.cond_dim}")
        tokens = latent.reshape(self.n_tokens, self.token_dim)
        tokens = tokens + (cond @ self.cond_w + self.cond_b)
        if self.identity is None:
            attended = self_attention(tokens, self.attention.base)
        else:
            attended = identity_self_attention(tokens, self.identity, self.attention)
        out = attended @ self.head_w + self.head_b
        return out.reshape(latent.shape)


def _predict_guided(
    model: DenoiserModel, x: np.ndarray, cond: np.ndarray, guidance_scale: float
) -> np.ndarray:
    eps_c = model.predict_noise(x, cond)
    if guidance_scale == 1.0:
        return eps_c
    eps_u = model.predict_noise(x, np.zeros(model.cond_dim))
    return eps_u + guidance_scale * (eps_c - eps_u)


def reverse_step(
    x_t: np.ndarray,
    t: int,
    cond: np.ndarray,
    model: DenoiserModel,
    sched: NoiseSchedule,
    rng: RngStream,
    guidance_scale: float = 1.0,
) -> np.ndarray:
    """One ancestral denoising step from the model's noise prediction.

    mu = (x_t - beta_t / sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t), plus
    sqrt(beta_t) * z for t > 1; the final step is deterministic.
    """
    _check_step(t, sched)
    x_t = tensor(x_t)
    b = sched.beta[t - 1]
    a = sched.alpha[t - 1]
    ab = sched.alpha_bar[t - 1]
    eps_hat = _predict_guided(model, x_t, cond, guidance_scale)
    mu = (x_t - b / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    if t > 1:
        mu = mu + np.sqrt(b) * gaussian(rng, x_t.shape)
    return mu


def sample(
    model: DenoiserModel,
    cond: np.ndarray,
    sched: NoiseSchedule,
    init: np.ndarray | None = None,
    window: int = 0,
    guide: np.ndarray | None = None,
    rng: RngStream | None = None,
    subject_guidance: float = 0.95,
    guidance_scale: float = 1.0,
) -> np.ndarray:
    """Run reverse steps from t=T down to 1.

    During the first ``window`` steps the running latent is blended with
    the noised guide: x <- (1-lambda) x + lambda * forward_marginal(guide, t).
    With window=0 the guide is never touched.
    """
    if rng is None:
        raise ConfigError("sample requires an RngStream")
    if window > sched.T:
        raise ConfigError(f"composition window {window} > steps {sched.T}")
    if window < 0:
        raise ConfigError(f"composition window must be >= 0, got {window}")
    if window > 0 and guide is None:
        raise ConfigError("composition window > 0 requires a guide latent")
    if init is not None:
        x = tensor(init).copy()
    else:
        x = gaussian(rng, (model.latent_size,))
    for t in range(sched.T, 0, -1):
        if window > 0 and t > sched.T - window:
            guide_t = forward_marginal(guide, t, sched, rng)
            x = (1.0 - subject_guidance) * x + subject_guidance * guide_t
        x = reverse_step(x, t, cond, model, sched, rng, guidance_scale)
    return x


@dataclass(frozen=True)
class LatentCodec:
    """Linear encoder/decoder pair; enc has orthonormal rows and dec is
    its transpose, so decode(encode(x)) is the orthogonal projection of x
    onto the row space."""

    enc: np.ndarray  # (z, n)
    dec: np.ndarray  # (n, z)
    image_shape: tuple[int, ...]

    @property
    def z_dim(self) -> int:
        return self.enc.shape[0]

    @property
    def n_dim(self) -> int:
        return self.enc.shape[1]


def make_codec(image_shape, z_dim: int, rng: RngStream) -> LatentCodec:
    image_shape = tuple(int(s) for s in image_shape)
    n = int(np.prod(image_shape))
    if not 1 <= z_dim <= n:
        raise ConfigError(f"latent dim {z_dim} must be in 1..{n}")
    q, _ = np.linalg.qr(gaussian(rng, (n, z_dim)))
    return LatentCodec(enc=q.T.copy(), dec=q.copy(), image_shape=image_shape)


def encode(img: np.ndarray, codec: LatentCodec) -> np.ndarray:
    flat = tensor(img).reshape(-1)
    if flat.size != codec.n_dim:
        raise ShapeError(f"image size {flat.size} != codec input dim {codec.n_dim}")
    return codec.enc @ flat


def decode(z: np.ndarray, codec: LatentCodec) -> np.ndarray:
    z = tensor(z).reshape(-1)
    if z.size != codec.z_dim:
        raise ShapeError(f"latent size {z.size} != codec latent dim {codec.z_dim}")
    return (codec.dec @ z).reshape(codec.image_shape)


def make_denoiser(
    n_tokens: int,
    token_dim: int,
    cond_dim: int,
    id_dim: int,
    rng: RngStream,
    weight_scale: float = 0.3,
) -> DenoiserModel:
    """Seeded random toy denoiser. ``weight_scale=0`` gives the zero model."""
    from .attention import AttentionWeights  # local to keep module top minimal

    def w(shape):
        return weight_scale * gaussian(rng, shape)

    base = AttentionWeights(
        w_q=w((token_dim, token_dim)),
        w_k=w((token_dim, token_dim)),
        w_v=w((token_dim, token_dim)),
    )
    ext = ExtendedAttentionWeights(
        base=base, u_q=w((id_dim, token_dim)), u_k=w((id_dim, token_dim))
    )
    return DenoiserModel(
        n_tokens=n_tokens,
        token_dim=token_dim,
        attention=ext,
        head_w=w((token_dim, token_dim)),
        head_b=np.zeros(token_dim),
        cond_w=w((cond_dim, token_dim)),
        cond_b=np.zeros(token_dim),
    )
