"""End-to-end orchestration: the style-first flow, its reversed ablation,
attention-arm comparison, toy denoiser training, and CSV reporting.

Everything here is a pure function of (inputs, config, seed): all random
streams derive from ``PipelineConfig.seed``, sweep cells own split
streams, and report rows are sorted by a deterministic key so the output
does not depend on worker count or completion order.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .diffusion import (
    DenoiserModel,
    LatentCodec,
    NoiseSchedule,
    build_schedule,
    decode,
    encode,
    make_codec,
    make_denoiser,
    sample,
)
from .attention import ExtendedAttentionWeights, attention_map
from .errors import CompositionOrderError, ConfigError, TrainingError
from .facegen import FaceParams, StyleOp, embed_prompt, graffiti_stylize, render_face
from .identity import (
    Projector,
    attr_loss,
    attribute_embedding,
    extract_attributes,
    ffc,
)
from .lora import LoRATrainConfig, train_lora
from .numerics import RngStream

__all__ = [
    "PipelineConfig",
    "FULL_SCALE_CONFIG",
    "ReportRow",
    "ExperimentReport",
    "REPORT_COLUMNS",
    "run_style_first",
    "run_identity_first",
    "ablate_order",
    "ablate_attention",
    "train_toy_denoiser",
]

# Full-scale adapter settings, kept for reference; the desk defaults below
# are what the test grid actually runs.
FULL_SCALE_CONFIG = {"lora_rank": 64, "lora_alpha": 128.0}

DEFAULT_PROMPT = "graffiti portrait guitarist pose"


@dataclass(frozen=True)
class PipelineConfig:
    guidance_scale: float = 7.5
    subject_guidance: float = 0.95
    style_intensity: float = 0.7
    steps: int = 100
    composition_window: int = 25
    lora_rank: int = 4
    lora_alpha: float = 8.0
    seed: int = 0
    image_size: int = 64
    latent_tokens: int = 16
    token_dim: int = 4
    cond_dim: int = 8
    use_diffusion: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not 0 <= self.composition_window <= self.steps:
            raise ConfigError(
                f"composition window {self.composition_window} outside 0..steps={self.steps}"
            )
        if self.guidance_scale <= 0:
            raise ConfigError(f"guidance_scale must be > 0, got {self.guidance_scale}")
        if not 0.0 <= self.subject_guidance <= 1.0:
            raise ConfigError(f"subject_guidance {self.subject_guidance} outside [0, 1]")
        if not 0.0 <= self.style_intensity <= 1.0:
            raise ConfigError(f"style_intensity {self.style_intensity} outside [0, 1]")
        if self.lora_rank < 1:
            raise ConfigError(f"lora_rank must be >= 1, got {self.lora_rank}")
        if self.lora_alpha <= 0:
            raise ConfigError(f"lora_alpha must be > 0, got {self.lora_alpha}")
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        if self.latent_tokens < 1 or self.token_dim < 1 or self.cond_dim < 1:
            raise ConfigError("latent_tokens, token_dim, cond_dim must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


REPORT_COLUMNS = ("face_id", "order", "intensity", "attr_loss", "ffc", "seed", "ms")


@dataclass(frozen=True)
class ReportRow:
    face_id: int
    order: str
    intensity: float
    attr_loss: float
    ffc: float
    seed: int
    ms: float


@dataclass
class ExperimentReport:
    rows: list[ReportRow] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def sorted_rows(self) -> list[ReportRow]:
        return sorted(self.rows, key=lambda r: (r.face_id, r.intensity, r.seed, r.order))

    def mean_loss(self, order: str) -> float:
        vals = [r.attr_loss for r in self.rows if r.order == order]
        return float(np.mean(vals)) if vals else float("nan")

    def mean_ffc(self, order: str) -> float:
        vals = [r.ffc for r in self.rows if r.order == order]
        return float(np.mean(vals)) if vals else float("nan")

    def win_rate(self, first: str = "PS", second: str = "SP") -> float:
        """Fraction of (face, intensity, seed) cells where the first
        order's loss is <= the second's."""
        by_cell: dict[tuple, dict[str, float]] = {}
        for r in self.rows:
            by_cell.setdefault((r.face_id, r.intensity, r.seed), {})[r.order] = r.attr_loss
        pairs = [c for c in by_cell.values() if first in c and second in c]
        if not pairs:
            return float("nan")
        wins = sum(1 for c in pairs if c[first] <= c[second])
        return wins / len(pairs)

    def to_csv(self, path, include_timing: bool = False) -> None:
        """Write the report. Wall times are volatile, so the ms column is
        zeroed unless timing output is explicitly requested; reports are
        otherwise byte-identical for identical (config, seed)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.sorted_rows():
                ms = int(round(r.ms)) if include_timing else 0
                w.writerow(
                    [r.face_id, r.order, repr(r.intensity), repr(r.attr_loss), repr(r.ffc), r.seed, ms]
                )


@dataclass(frozen=True)
class _Runtime:
    sched: NoiseSchedule
    codec: LatentCodec
    model: DenoiserModel


def _make_runtime(cfg: PipelineConfig) -> _Runtime:
    rng = RngStream(seed=cfg.seed)
    latent_size = cfg.latent_tokens * cfg.token_dim
    codec = make_codec((2, cfg.image_size, cfg.image_size), latent_size, rng.split("codec"))
    model = make_denoiser(
        cfg.latent_tokens, cfg.token_dim, cfg.cond_dim, 6, rng.split("denoiser")
    )
    return _Runtime(sched=build_schedule(cfg.steps), codec=codec, model=model)


def _diffuse(
    styled: np.ndarray,
    cond: np.ndarray,
    cfg: PipelineConfig,
    runtime: _Runtime,
    model: DenoiserModel,
    rng: RngStream,
) -> np.ndarray:
    guide = encode(styled, runtime.codec) if cfg.composition_window > 0 else None
    z = sample(
        model,
        cond,
        runtime.sched,
        window=cfg.composition_window,
        guide=guide,
        rng=rng,
        subject_guidance=cfg.subject_guidance,
        guidance_scale=cfg.guidance_scale,
    )
    return np.clip(decode(z, runtime.codec), 0.0, 1.0)


def run_style_first(
    i_img: np.ndarray,
    prompt: str,
    cfg: PipelineConfig,
    face_id: int = 0,
    model: DenoiserModel | None = None,
    runtime: _Runtime | None = None,
    projector: Projector | None = None,
) -> tuple[np.ndarray, ReportRow]:
    """Stylize, optionally run the guided denoiser pass, then restore the
    reference attributes. The projection runs last, so the output carries
    the input's attributes whatever the middle stages did."""
    t0 = time.perf_counter()
    ref = extract_attributes(i_img)
    styled = graffiti_stylize(i_img, StyleOp(intensity=cfg.style_intensity))
    if cfg.use_diffusion:
        runtime = runtime or _make_runtime(cfg)
        m = (model or runtime.model).with_identity(attribute_embedding(ref))
        rng = RngStream(seed=cfg.seed).split("style-first").split(face_id)
        styled = _diffuse(styled, embed_prompt(prompt, cfg.cond_dim), cfg, runtime, m, rng)
    projector = projector or Projector(reference_attrs=ref)
    out = projector.apply(styled)
    row = ReportRow(
        face_id=face_id,
        order="PS",
        intensity=cfg.style_intensity,
        attr_loss=attr_loss(out, i_img),
        ffc=ffc(extract_attributes(out), ref),
        seed=cfg.seed,
        ms=(time.perf_counter() - t0) * 1e3,
    )
    return out, row


def run_identity_first(
    i_img: np.ndarray,
    prompt: str,
    cfg: PipelineConfig,
    face_id: int = 0,
    projector: Projector | None = None,
) -> tuple[np.ndarray, ReportRow]:
    """Reversed order: restore attributes first (a no-op on a clean
    render), then stylize. Whatever drift the stylizer causes stays in the
    output."""
    t0 = time.perf_counter()
    ref = extract_attributes(i_img)
    projector = projector or Projector(reference_attrs=ref)
    out = graffiti_stylize(projector.apply(i_img), StyleOp(intensity=cfg.style_intensity))
    row = ReportRow(
        face_id=face_id,
        order="SP",
        intensity=cfg.style_intensity,
        attr_loss=attr_loss(out, i_img),
        ffc=ffc(extract_attributes(out), ref),
        seed=cfg.seed,
        ms=(time.perf_counter() - t0) * 1e3,
    )
    return out, row


def _order_cell(args) -> list[ReportRow]:
    face_id, params, cfg, intensities, seeds = args
    img = render_face(params, cfg.image_size)
    rows = []
    for intensity in intensities:
        for seed in seeds:
            cell_cfg = replace(cfg, style_intensity=float(intensity), seed=int(seed))
            _, ps = run_style_first(img, DEFAULT_PROMPT, cell_cfg, face_id=face_id)
            _, sp = run_identity_first(img, DEFAULT_PROMPT, cell_cfg, face_id=face_id)
            if ps.attr_loss > sp.attr_loss:
                raise CompositionOrderError(
                    "style-then-project lost to the reversed order: "
                    f"face_id={face_id} intensity={intensity} seed={seed} "
                    f"loss_ps={ps.attr_loss!r} loss_sp={sp.attr_loss!r} params={params}"
                )
            rows.extend([ps, sp])
    return rows


def ablate_order(
    faces: list[FaceParams],
    cfg: PipelineConfig,
    sweeps=None,
    seeds=None,
    jobs: int = 1,
) -> ExperimentReport:
    """Run both composition orders for every (face, intensity, seed) cell.

    Any cell where the style-first order has the larger attribute loss is
    a hard failure (CompositionOrderError carrying the offending case).
    """
    if not faces:
        raise ConfigError("ablate_order needs a nonempty face grid")
    intensities = tuple(float(i) for i in (sweeps if sweeps is not None else np.arange(1, 11) / 10.0))
    seeds = tuple(int(s) for s in (seeds if seeds is not None else (cfg.seed,)))
    tasks = [(fid, p, cfg, intensities, seeds) for fid, p in enumerate(faces)]
    report = ExperimentReport()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for rows in ex.map(_order_cell, tasks):
                report.rows.extend(rows)
    else:
        for task in tasks:
            report.rows.extend(_order_cell(task))
    report.rows = report.sorted_rows()
    report.extras = {
        "mean_loss_ps": report.mean_loss("PS"),
        "mean_loss_sp": report.mean_loss("SP"),
        "win_rate": report.win_rate(),
    }
    return report


def _pack_model(m: DenoiserModel) -> np.ndarray:
    a = m.attention
    return np.concatenate(
        [
            a.base.w_q.ravel(), a.base.w_k.ravel(), a.base.w_v.ravel(),
            a.u_q.ravel(), a.u_k.ravel(),
            m.head_w.ravel(), m.head_b.ravel(),
            m.cond_w.ravel(), m.cond_b.ravel(),
        ]
    )


def _unpack_model(vec: np.ndarray, template: DenoiserModel) -> DenoiserModel:
    from .attention import AttentionWeights, ExtendedAttentionWeights

    a = template.attention
    parts = []
    pos = 0
    for ref in (a.base.w_q, a.base.w_k, a.base.w_v, a.u_q, a.u_k,
                template.head_w, template.head_b, template.cond_w, template.cond_b):
        parts.append(vec[pos : pos + ref.size].reshape(ref.shape))
        pos += ref.size
    ext = ExtendedAttentionWeights(
        base=AttentionWeights(w_q=parts[0], w_k=parts[1], w_v=parts[2]),
        u_q=parts[3],
        u_k=parts[4],
    )
    return replace(
        template, attention=ext, head_w=parts[5], head_b=parts[6], cond_w=parts[7], cond_b=parts[8]
    )


def _denoise_loss(model: DenoiserModel, batch) -> float:
    total = 0.0
    for x_t, cond, eps, ident in batch:
        err = model.with_identity(ident).predict_noise(x_t, cond) - eps
        total += float(np.mean(err * err))
    return total / len(batch)


def _denoise_loss_and_grad(model: DenoiserModel, batch) -> tuple[float, np.ndarray]:
    """Mean squared noise-prediction error and its gradient over the packed
    weight vector, by hand-rolled backprop through the attention block.
    Verified against the finite-difference oracle in the test suite."""
    a = model.attention
    w_q, w_k, w_v = a.base.w_q, a.base.w_k, a.base.w_v
    d = float(w_q.shape[1])
    scale = 1.0 / np.sqrt(d)
    g_wq = np.zeros_like(w_q)
    g_wk = np.zeros_like(w_k)
    g_wv = np.zeros_like(w_v)
    g_uq = np.zeros_like(a.u_q)
    g_uk = np.zeros_like(a.u_k)
    g_hw = np.zeros_like(model.head_w)
    g_hb = np.zeros_like(model.head_b)
    g_cw = np.zeros_like(model.cond_w)
    g_cb = np.zeros_like(model.cond_b)
    total = 0.0

    for x_t, cond, eps, ident in batch:
        toks = x_t.reshape(model.n_tokens, model.token_dim)
        t_in = toks + (cond @ model.cond_w + model.cond_b)
        q = t_in @ w_q
        k = t_in @ w_k
        if ident is not None:
            q = q + ident @ a.u_q
            k = k + ident @ a.u_k
        v = t_in @ w_v
        s = (q @ k.T) * scale
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        att = e / e.sum(axis=1, keepdims=True)
        o = att @ v
        y = o @ model.head_w + model.head_b
        err = y - eps.reshape(y.shape)
        total += float(np.mean(err * err))

        dy = (2.0 / err.size) * err
        g_hw += o.T @ dy
        g_hb += dy.sum(axis=0)
        do = dy @ model.head_w.T
        datt = do @ v.T
        dv = att.T @ do
        rowdot = (att * datt).sum(axis=1, keepdims=True)
        ds = att * (datt - rowdot)
        dq = (ds @ k) * scale
        dk = (ds.T @ q) * scale
        g_wq += t_in.T @ dq
        g_wk += t_in.T @ dk
        g_wv += t_in.T @ dv
        if ident is not None:
            g_uq += np.outer(ident, dq.sum(axis=0))
            g_uk += np.outer(ident, dk.sum(axis=0))
        dt = dq @ w_q.T + dk @ w_k.T + dv @ w_v.T
        g_cw += np.outer(cond, dt.sum(axis=0))
        g_cb += dt.sum(axis=0)

    n = len(batch)
    grad = np.concatenate(
        [
            g_wq.ravel(), g_wk.ravel(), g_wv.ravel(), g_uq.ravel(), g_uk.ravel(),
            g_hw.ravel(), g_hb.ravel(), g_cw.ravel(), g_cb.ravel(),
        ]
    ) / n
    return total / n, grad


def _training_batch(faces, cfg: PipelineConfig, runtime: _Runtime, rng: RngStream,
                    with_identity: bool, noised_per_face: int = 2):
    """Fixed batch of (noised latent, cond, noise, identity) tuples."""
    cond = embed_prompt(DEFAULT_PROMPT, cfg.cond_dim)
    batch = []
    for params in faces:
        x0 = encode(render_face(params, cfg.image_size), runtime.codec)
        ident = attribute_embedding(params.attributes()) if with_identity else None
        for _ in range(noised_per_face):
            t = int(rng.integers(1, cfg.steps + 1))
            eps = rng.normal(x0.shape)
            ab = runtime.sched.alpha_bar[t - 1]
            x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
            batch.append((x_t, cond, eps, ident))
    return batch


def _identity_block_mask(model: DenoiserModel) -> np.ndarray:
    """1.0 on the packed coordinates of U_q/U_k, 0.0 elsewhere."""
    a = model.attention
    mask = np.zeros(_pack_model(model).size)
    start = a.base.w_q.size + a.base.w_k.size + a.base.w_v.size
    mask[start : start + a.u_q.size + a.u_k.size] = 1.0
    return mask


def _sgd_train(
    model: DenoiserModel,
    faces,
    cfg: PipelineConfig,
    runtime: _Runtime,
    rng: RngStream,
    steps: int,
    lr: float,
    with_identity: bool,
    batch_size: int = 16,
    mask: np.ndarray | None = None,
) -> DenoiserModel:
    """Noise-prediction SGD with a fresh (face, t, eps) batch every step
    and a linear decay to 10% of the initial rate. ``mask`` restricts the
    update to a weight subset (used for identity-blocks-only training)."""
    cond = embed_prompt(DEFAULT_PROMPT, cfg.cond_dim)
    latents = [encode(render_face(p, cfg.image_size), runtime.codec) for p in faces]
    idents = [attribute_embedding(p.attributes()) if with_identity else None for p in faces]
    vec = _pack_model(model)
    for i in range(steps):
        fidx = rng.integers(0, len(faces), (batch_size,))
        ts = rng.integers(1, cfg.steps + 1, (batch_size,))
        batch = []
        for f, t in zip(fidx, ts):
            eps = rng.normal(latents[f].shape)
            ab = runtime.sched.alpha_bar[t - 1]
            batch.append((np.sqrt(ab) * latents[f] + np.sqrt(1.0 - ab) * eps, cond, eps, idents[f]))
        loss, grad = _denoise_loss_and_grad(_unpack_model(vec, model), batch)
        if not np.isfinite(loss):
            raise TrainingError("toy denoiser training: loss became non-finite")
        if mask is not None:
            grad = grad * mask
        vec = vec - lr * (1.0 - 0.9 * i / steps) * grad
        if not np.all(np.isfinite(vec)):
            raise TrainingError("toy denoiser training: parameters became non-finite")
    return _unpack_model(vec, model)


def train_toy_denoiser(
    faces: list[FaceParams],
    cfg: PipelineConfig,
    rng: RngStream,
    steps: int = 500,
    lr: float = 0.25,
    with_identity: bool = False,
    lora: bool = False,
    runtime: _Runtime | None = None,
    batch_size: int = 16,
):
    """Fit the toy denoiser to predict injected noise on face latents.

    Full mode runs SGD on all weights with analytic gradients; LoRA mode
    freezes the base model and trains rank-limited adapters on the
    attention matrices instead. Returns (model, adapters or None).
    """
    if not faces:
        raise ConfigError("train_toy_denoiser needs a nonempty face grid")
    runtime = runtime or _make_runtime(cfg)
    model = runtime.model

    if lora:
        batch = _training_batch(faces, cfg, runtime, rng.split("batch"), with_identity=False)
        data = [(x_t, cond, eps) for x_t, cond, eps, _ in batch]
        lcfg = LoRATrainConfig(rank=cfg.lora_rank, alpha=cfg.lora_alpha, lr=lr, steps=steps)
        adapters = train_lora(model, data, lcfg, rng.split("lora"))
        return model, adapters
    if steps == 0:
        return model, None
    trained = _sgd_train(
        model, faces, cfg, runtime, rng.split("sgd"), steps, lr, with_identity, batch_size
    )
    return trained, None


def _face_tokens(guide: np.ndarray, n_tokens: int, token_dim: int, k: int | None = None) -> np.ndarray:
    """Token indices carrying the most guide-latent energy; the toy stand-in
    for 'tokens covering the face'."""
    norms = np.linalg.norm(guide.reshape(n_tokens, token_dim), axis=1)
    k = k or max(1, n_tokens // 4)
    return np.sort(np.argsort(-norms)[:k])


def _attention_mass(model: DenoiserModel, latent: np.ndarray, tokens_of_interest: np.ndarray) -> float:
    tokens = latent.reshape(model.n_tokens, model.token_dim)
    amap = attention_map(tokens, model.identity, model.attention)
    return float(amap[:, tokens_of_interest].sum(axis=1).mean())


def ablate_attention(
    faces: list[FaceParams],
    cfg: PipelineConfig,
    seeds=None,
    train_steps: int = 2000,
    base_steps: int = 1200,
    zero_identity: bool = False,
) -> ExperimentReport:
    """Compare identity-augmented attention against the plain baseline.

    One base model is trained without identity information; the identity
    arm then keeps those weights frozen and trains only the zero-started
    identity blocks U_q/U_k with per-face embeddings, so the arms differ
    purely by the learned identity extension. Sampling noise streams are
    seed-matched across arms. With ``zero_identity=True`` both arms share
    one untrained model and the identity arm feeds a zero embedding, which
    must reproduce the baseline exactly.
    """
    if not faces:
        raise ConfigError("ablate_attention needs a nonempty face grid")
    seeds = tuple(int(s) for s in (seeds if seeds is not None else range(20)))
    runtime = _make_runtime(cfg)
    a0 = runtime.model.attention
    start = runtime.model.with_attention(
        ExtendedAttentionWeights(base=a0.base, u_q=np.zeros_like(a0.u_q), u_k=np.zeros_like(a0.u_k))
    )
    trng = RngStream(seed=cfg.seed).split("attn-ablation")
    if zero_identity:
        base_model = start
        id_model = start
    else:
        base_model = _sgd_train(
            start, faces, cfg, runtime, trng.split("base"), base_steps, 0.25, with_identity=False
        )
        id_model = _sgd_train(
            base_model, faces, cfg, runtime, trng.split("identity-blocks"), train_steps, 0.15,
            with_identity=True, mask=_identity_block_mask(base_model),
        )

    cond = embed_prompt(DEFAULT_PROMPT, cfg.cond_dim)
    report = ExperimentReport()
    masses = {"ID": [], "BASE": []}
    for fid, params in enumerate(faces):
        img = render_face(params, cfg.image_size)
        ref = extract_attributes(img)
        guide = encode(img, runtime.codec)
        interest = _face_tokens(guide, cfg.latent_tokens, cfg.token_dim)
        ident = np.zeros(6) if zero_identity else attribute_embedding(ref)
        arms = (("BASE", base_model.with_identity(None)), ("ID", id_model.with_identity(ident)))
        for seed in seeds:
            for order, model in arms:
                t0 = time.perf_counter()
                rng = RngStream(seed=seed).split("attn-sample").split(fid)
                z = sample(
                    model, cond, runtime.sched,
                    window=cfg.composition_window, guide=guide, rng=rng,
                    subject_guidance=cfg.subject_guidance,
                    guidance_scale=cfg.guidance_scale,
                )
                out = np.clip(decode(z, runtime.codec), 0.0, 1.0)
                attrs = extract_attributes(out)
                masses[order].append(_attention_mass(model, z, interest))
                report.rows.append(
                    ReportRow(
                        face_id=fid, order=order, intensity=cfg.style_intensity,
                        attr_loss=float(np.sum((attrs - ref) ** 2)),
                        ffc=ffc(attrs, ref), seed=seed,
                        ms=(time.perf_counter() - t0) * 1e3,
                    )
                )
    report.rows = report.sorted_rows()
    report.extras = {
        "mean_ffc_id": report.mean_ffc("ID"),
        "mean_ffc_base": report.mean_ffc("BASE"),
        "mean_mass_id": float(np.mean(masses["ID"])),
        "mean_mass_base": float(np.mean(masses["BASE"])),
    }
    return report
