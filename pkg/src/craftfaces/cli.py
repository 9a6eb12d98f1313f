"""Command-line front end.

Commands
    render           draw a synthetic face, write PPM + attribute CSV
    stylize          apply the graffiti operator, report attribute drift
    diffuse          run the guided sampling loop, write the decoded PPM
    train            fit the toy denoiser (optionally LoRA-only), save adapters
    ablate-order     sweep both composition orders, write the report CSV
    ablate-attention compare identity-augmented vs baseline attention arms
    ffc              cosine similarity of two embedding CSV files
    attn-map         export a post-softmax attention matrix as CSV

Common flags: ``--seed`` (fallback: env CRAFT_SEED, then 0), ``--out-dir``,
``--config`` (JSON file with PipelineConfig keys; explicit flags override
file values). All files are written atomically (temp file + rename), so
failures never leave partial outputs.

Config file schema (JSON object; all keys optional):
    guidance_scale, subject_guidance, style_intensity, steps,
    composition_window, lora_rank, lora_alpha, seed, image_size,
    latent_tokens, token_dim, cond_dim, use_diffusion

Adapter CSV schema (written by ``train --lora``, readable by
``craftfaces.lora.load_adapters``): header
``target,factor,row,col,value,alpha,rank``; one row per factor entry,
factor A is (d x r), factor B is (r x k).

Exit codes: 0 success, 2 usage or I/O failure, 3 hard assertion failure
(a sweep cell violating the composition-order inequality).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from dataclasses import dataclass, replace

import numpy as np

from .diffusion import decode, encode, sample
from .errors import CompositionOrderError, CraftError
from .facegen import (
    StyleOp,
    embed_prompt,
    face_grid,
    graffiti_stylize,
    render_face,
    write_ppm,
)
from .attention import attention_map
from .identity import attr_loss, attribute_embedding, extract_attributes, ffc
from .lora import save_adapters
from .numerics import RngStream
from .pipeline import (
    PipelineConfig,
    ablate_attention,
    ablate_order,
    train_toy_denoiser,
    _make_runtime,
)

USAGE_EXIT = 2
IO_EXIT = 2
ASSERTION_EXIT = 3

_CONFIG_FLAGS = {
    "guidance_scale": float,
    "subject_guidance": float,
    "style_intensity": float,
    "steps": int,
    "composition_window": int,
    "lora_rank": int,
    "lora_alpha": float,
    "image_size": int,
    "latent_tokens": int,
    "token_dim": int,
    "cond_dim": int,
}


@dataclass
class Command:
    name: str
    args: argparse.Namespace
    config: PipelineConfig


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="craftfaces", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="master seed (env CRAFT_SEED fallback)")
        p.add_argument("--out-dir", default=".", help="output directory")
        p.add_argument("--config", default=None, help="JSON config file")
        for key, typ in _CONFIG_FLAGS.items():
            flag = "--window" if key == "composition_window" else "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, type=typ, default=None)
        return p

    p = common(sub.add_parser("render", help="render a synthetic face"))
    p.add_argument("--face-id", type=int, default=0)

    p = common(sub.add_parser("stylize", help="stylize a rendered face"))
    p.add_argument("--face-id", type=int, default=0)
    p.add_argument("--intensity", type=float, default=None)

    p = common(sub.add_parser("diffuse", help="run the guided sampling loop"))
    p.add_argument("--face-id", type=int, default=0)
    p.add_argument("--prompt", default="graffiti portrait guitarist pose")

    p = common(sub.add_parser("train", help="train the toy denoiser"))
    p.add_argument("--faces", type=int, default=4)
    p.add_argument("--train-steps", type=int, default=200)
    p.add_argument("--lora", action="store_true", help="train LoRA adapters over a frozen base")

    p = common(sub.add_parser("ablate-order", help="sweep both composition orders"))
    p.add_argument("--faces", type=int, default=100)
    p.add_argument("--intensities", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.add_argument("--sweep-seeds", type=int, default=1, help="seeds per cell")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--timing", action="store_true", help="write measured ms into the report")

    p = common(sub.add_parser("ablate-attention", help="identity vs baseline attention arms"))
    p.add_argument("--faces", type=int, default=8)
    p.add_argument("--arm-seeds", type=int, default=25, help="sampling seeds per face")
    p.add_argument("--train-steps", type=int, default=2000)
    p.add_argument("--timing", action="store_true")

    p = common(sub.add_parser("ffc", help="cosine similarity of two embedding CSVs"))
    p.add_argument("emb1")
    p.add_argument("emb2")

    p = common(sub.add_parser("attn-map", help="export an attention matrix CSV"))
    p.add_argument("--face-id", type=int, default=0)
    p.add_argument("--with-identity", action="store_true")

    return parser


def parse(argv) -> Command:
    """Resolve argv into a validated Command; flag values override config
    file values, which override defaults."""
    args = _build_parser().parse_args(argv)
    file_values = {}
    if args.config:
        try:
            with open(args.config) as fh:
                file_values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CraftError(f"unreadable config file {args.config}: {exc}") from exc
        if not isinstance(file_values, dict):
            raise CraftError(f"config file {args.config} must hold a JSON object")
    cfg = PipelineConfig.from_dict(dict(file_values))
    overrides = {k: getattr(args, k) for k in _CONFIG_FLAGS if getattr(args, k, None) is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    elif "seed" not in file_values:
        overrides["seed"] = int(os.environ.get("CRAFT_SEED", "0"))
    if getattr(args, "intensity", None) is not None:
        overrides["style_intensity"] = args.intensity
    if overrides:
        cfg = replace(cfg, **overrides)
    return Command(name=args.command, args=args, config=cfg)


def _atomic_write(path, write_fn) -> None:
    """Write via temp file + rename so failures leave no partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-craftfaces-")
    os.close(fd)
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_attrs_csv(path, names, values) -> None:
    def write(tmp):
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["attribute", "value"])
            for n, v in zip(names, values):
                w.writerow([n, repr(float(v))])

    _atomic_write(path, write)


def _write_matrix_csv(path, matrix) -> None:
    def write(tmp):
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            for row in np.atleast_2d(matrix):
                w.writerow([repr(float(v)) for v in row])

    _atomic_write(path, write)


def _read_vector_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        cells = [float(c) for row in csv.reader(fh) for c in row if c.strip()]
    return np.array(cells, dtype=np.float64)


def _print_header(cmd: Command) -> None:
    print(f"# config {json.dumps(cmd.config.to_dict(), sort_keys=True)}")


def execute(cmd: Command) -> int:
    """Dispatch a parsed command; returns the process exit code."""
    cfg = cmd.config
    out_dir = cmd.args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    _print_header(cmd)

    if cmd.name == "render":
        faces = face_grid(cmd.args.face_id + 1, seed=cfg.seed)
        img = render_face(faces[cmd.args.face_id], cfg.image_size)
        ppm = os.path.join(out_dir, f"face_{cmd.args.face_id}.ppm")
        _atomic_write(ppm, lambda tmp: write_ppm(tmp, img))
        from .facegen import ATTRIBUTE_NAMES

        _write_attrs_csv(
            os.path.join(out_dir, f"face_{cmd.args.face_id}_attrs.csv"),
            ATTRIBUTE_NAMES,
            extract_attributes(img),
        )
        print(f"render: face {cmd.args.face_id} -> {ppm}")
        return 0

    if cmd.name == "stylize":
        faces = face_grid(cmd.args.face_id + 1, seed=cfg.seed)
        img = render_face(faces[cmd.args.face_id], cfg.image_size)
        styled = graffiti_stylize(img, StyleOp(intensity=cfg.style_intensity))
        ppm = os.path.join(out_dir, f"face_{cmd.args.face_id}_styled.ppm")
        _atomic_write(ppm, lambda tmp: write_ppm(tmp, styled))
        drift = attr_loss(styled, img)
        print(f"stylize: intensity={cfg.style_intensity} attr_drift={drift!r} -> {ppm}")
        return 0

    if cmd.name == "diffuse":
        faces = face_grid(cmd.args.face_id + 1, seed=cfg.seed)
        img = render_face(faces[cmd.args.face_id], cfg.image_size)
        runtime = _make_runtime(cfg)
        styled = graffiti_stylize(img, StyleOp(intensity=cfg.style_intensity))
        guide = encode(styled, runtime.codec) if cfg.composition_window > 0 else None
        model = runtime.model.with_identity(attribute_embedding(extract_attributes(img)))
        rng = RngStream(seed=cfg.seed).split("diffuse").split(cmd.args.face_id)
        z = sample(
            model, embed_prompt(cmd.args.prompt, cfg.cond_dim), runtime.sched,
            window=cfg.composition_window, guide=guide, rng=rng,
            subject_guidance=cfg.subject_guidance, guidance_scale=cfg.guidance_scale,
        )
        out = np.clip(decode(z, runtime.codec), 0.0, 1.0)
        ppm = os.path.join(out_dir, f"face_{cmd.args.face_id}_diffused.ppm")
        _atomic_write(ppm, lambda tmp: write_ppm(tmp, out))
        print(f"diffuse: steps={cfg.steps} window={cfg.composition_window} -> {ppm}")
        return 0

    if cmd.name == "train":
        faces = face_grid(cmd.args.faces, seed=cfg.seed)
        rng = RngStream(seed=cfg.seed).split("train")
        model, adapters = train_toy_denoiser(
            faces, cfg, rng, steps=cmd.args.train_steps, lora=cmd.args.lora
        )
        msg = f"train: steps={cmd.args.train_steps} lora={cmd.args.lora}"
        if adapters is not None:
            path = os.path.join(out_dir, "adapters.csv")
            _atomic_write(path, lambda tmp: save_adapters(tmp, adapters))
            msg += f" -> {path}"
        print(msg)
        return 0

    if cmd.name == "ablate-order":
        faces = face_grid(cmd.args.faces, seed=cfg.seed)
        intensities = tuple(float(v) for v in cmd.args.intensities.split(","))
        seeds = tuple(cfg.seed + i for i in range(cmd.args.sweep_seeds))
        report = ablate_order(faces, cfg, sweeps=intensities, seeds=seeds, jobs=cmd.args.jobs)
        path = os.path.join(out_dir, "order_report.csv")
        _atomic_write(path, lambda tmp: report.to_csv(tmp, include_timing=cmd.args.timing))
        e = report.extras
        print(
            f"ablate-order: cells={len(report.rows) // 2} win_rate={e['win_rate']!r} "
            f"mean_loss_ps={e['mean_loss_ps']!r} mean_loss_sp={e['mean_loss_sp']!r} -> {path}"
        )
        return 0

    if cmd.name == "ablate-attention":
        faces = face_grid(cmd.args.faces, seed=cfg.seed)
        report = ablate_attention(
            faces, cfg, seeds=range(cmd.args.arm_seeds), train_steps=cmd.args.train_steps
        )
        path = os.path.join(out_dir, "attention_report.csv")
        _atomic_write(path, lambda tmp: report.to_csv(tmp, include_timing=cmd.args.timing))
        e = report.extras
        print(
            f"ablate-attention: mean_ffc_id={e['mean_ffc_id']!r} "
            f"mean_ffc_base={e['mean_ffc_base']!r} mean_mass_id={e['mean_mass_id']!r} "
            f"mean_mass_base={e['mean_mass_base']!r} -> {path}"
        )
        return 0

    if cmd.name == "ffc":
        value = ffc(_read_vector_csv(cmd.args.emb1), _read_vector_csv(cmd.args.emb2))
        print(f"{value!r}")
        return 0

    if cmd.name == "attn-map":
        faces = face_grid(cmd.args.face_id + 1, seed=cfg.seed)
        img = render_face(faces[cmd.args.face_id], cfg.image_size)
        runtime = _make_runtime(cfg)
        tokens = encode(img, runtime.codec).reshape(cfg.latent_tokens, cfg.token_dim)
        ident = (
            attribute_embedding(extract_attributes(img)) if cmd.args.with_identity else None
        )
        amap = attention_map(tokens, ident, runtime.model.attention)
        path = os.path.join(out_dir, f"attn_map_{cmd.args.face_id}.csv")
        _write_matrix_csv(path, amap)
        print(f"attn-map: identity={cmd.args.with_identity} -> {path}")
        return 0

    raise CraftError(f"unknown command {cmd.name}")  # unreachable after argparse


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cmd = parse(argv)
    except SystemExit as exc:  # argparse exits on usage errors
        return exc.code if isinstance(exc.code, int) else USAGE_EXIT
    except CraftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    try:
        return execute(cmd)
    except CompositionOrderError as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return ASSERTION_EXIT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return IO_EXIT
    except CraftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT


if __name__ == "__main__":
    sys.exit(main())
