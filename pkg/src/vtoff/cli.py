"""Command-line entry points: gen-data | train | sample | eval | probe.

Every command extends a RunManifest next to its outputs. Config or digest
violations exit nonzero with a one-line JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio, manifest
from .config import RunConfig
from .conditioning import Image
from .diffusion import LatentCodec, SamplerConfig, sample as ddim_sample
from .dual_unet import CheckpointError, build, load_checkpoint, read_checkpoint_header
from .ioutils import atomic_write_text, load_png, save_png
from .metrics import RandomConvEmbedder, evaluate
from .pipeline import apply_mask_kind, build_bundle, build_inputs
from .probe import default_suite, garment_support_mask, probe_table_csv, run_probe
from .synthetic import SyntheticSpec, generate_synthetic
from .training import TrainState, run_curriculum


class CliError(RuntimeError):
    pass


def _parse_resolution(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
        return h, w
    except ValueError as e:
        raise CliError(f"bad resolution {text!r}, expected HxW") from e


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.from_yaml(args.config)
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "curriculum", None) is not None:
        cfg.curriculum = args.curriculum
    if getattr(args, "resolution", None) is not None:
        cfg.resolution = _parse_resolution(args.resolution)
    return cfg


def _prepared_samples(data_dir, cfg: RunConfig):
    records = dataio.load_dataset(data_dir)
    return records, [
        apply_mask_kind(r.sample, cfg.model, dilation_radius=cfg.dilation_radius) for r in records
    ]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    h, w = cfg.resolution
    spec = SyntheticSpec(
        count=args.count, height=h, width=w, seed=cfg.seed,
        garment_family=args.family, texture_family=args.texture,
        deform_amplitude=args.deform, codec_factor=cfg.model.codec_factor,
    )
    out = Path(args.out)
    ids = generate_synthetic(spec, out)
    manifest.update_manifest(
        out / manifest.MANIFEST_NAME, "dataset",
        {"count": len(ids), "spec": spec.__dict__ | {}, **manifest.dataset_entry(out)},
    )
    print(f"wrote {len(ids)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, samples = _prepared_samples(args.data, cfg)

    model = build(cfg.model, rng_seed=cfg.seed)
    state = TrainState.create(
        model,
        settings=cfg.make_settings(log_path=out / "train_log.jsonl"),
        schedule=cfg.make_schedule(),
        leffa_cfg=cfg.make_leffa(model),
        adapter_seed=cfg.seed,
    )
    start_stage = 0
    if args.resume:
        header = load_checkpoint(args.resume, state.model, adapter=state.adapter)
        start_stage = int(header["stage"])
        state.global_step = int(header["step"])

    curriculum = cfg.curriculum_obj()
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    state, paths = run_curriculum(state, curriculum, samples, seed=cfg.seed,
                                  out_dir=ckpt_dir, start_stage=start_stage)

    cfg.save_yaml(out / "config.yaml")
    manifest.update_manifest(
        out / manifest.MANIFEST_NAME, "train",
        {
            "config_digest": cfg.digest(),
            "model_digest": cfg.model.digest(),
            "dataset": manifest.dataset_entry(args.data),
            "curriculum": curriculum.id,
            "stages": len(curriculum.stages),
            "checkpoints": [manifest.file_entry(p) for p in paths],
            "seed": cfg.seed,
        },
    )
    print(f"trained {len(curriculum.stages)} stages; checkpoints in {ckpt_dir}")
    return 0


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model = build(cfg.model, rng_seed=cfg.seed)
    header = load_checkpoint(args.checkpoint, model)
    model.eval()
    codec = LatentCodec(cfg.model.codec_factor)
    sched = cfg.make_schedule()
    sampler = SamplerConfig(
        steps=args.steps if args.steps is not None else cfg.sampler.steps,
        cfg_scale=args.cfg_scale if args.cfg_scale is not None else cfg.sampler.cfg_scale,
        seed=args.sample_seed if args.sample_seed is not None else cfg.sampler.seed,
    )

    records, samples = _prepared_samples(args.data, cfg)
    written = []
    for rec, s in zip(records, samples):
        inputs = build_inputs([s], cfg.model, codec)
        bundle = build_bundle(model, inputs)
        img = ddim_sample(model, bundle, sampler, sched, codec)
        path = out / f"{rec.sample_id}.png"
        save_png(path, img.pixels)
        written.append(path)
    manifest.update_manifest(
        out / manifest.MANIFEST_NAME, "sample",
        {
            "checkpoint": manifest.file_entry(args.checkpoint),
            "checkpoint_stage": header["stage"],
            "sampler": {"steps": sampler.steps, "cfg_scale": sampler.cfg_scale, "seed": sampler.seed},
            "dataset": manifest.dataset_entry(args.data),
            "images": [manifest.file_entry(p) for p in written],
        },
    )
    print(f"sampled {len(written)} images to {out}")
    return 0


def _paired_images(gen_dir, ref_dir):
    gen_dir, ref_dir = Path(gen_dir), Path(ref_dir)
    pairs = []
    for gp in sorted(gen_dir.glob("*.png")):
        rp = ref_dir / gp.name
        if not rp.is_file():
            raise CliError(f"no reference image for {gp.name}")
        pairs.append((load_png(gp), load_png(rp)))
    if not pairs:
        raise CliError(f"no PNG pairs found under {gen_dir}")
    return pairs


def cmd_eval(args) -> int:
    emb = RandomConvEmbedder(seed=args.embedder_seed)
    resize = _parse_resolution(args.resize) if args.resize else None
    pairs = _paired_images(args.generated, args.reference)
    report = evaluate(pairs, emb, kid_seed=args.seed or 0, resize_to=resize)
    out = Path(args.out)
    atomic_write_text(out, json.dumps(report.to_dict(), indent=2) + "\n")
    if args.csv:
        from .metrics import CSV_HEADER

        atomic_write_text(args.csv, CSV_HEADER + "\n" + report.csv_row() + "\n")
    manifest.update_manifest(
        out.parent / manifest.MANIFEST_NAME, "eval",
        {
            "generated": manifest.dataset_entry(args.generated),
            "reference": manifest.dataset_entry(args.reference),
            "report": manifest.file_entry(out),
            "embedder": emb.name,
        },
    )
    print(json.dumps(report.to_dict()))
    return 0


def cmd_probe(args) -> int:
    root = Path(args.data)
    cloth_dir = root / "cloth"
    if not cloth_dir.is_dir():
        raise CliError(f"missing cloth directory under {root}")
    items = []
    for p in sorted(cloth_dir.glob("*.png")):
        img = Image(load_png(p))
        items.append((img, garment_support_mask(img)))
    if not items:
        raise CliError(f"no garments found under {cloth_dir}")
    emb = RandomConvEmbedder(seed=args.embedder_seed)
    if args.dump:
        Path(args.dump).mkdir(parents=True, exist_ok=True)
    rows = run_probe(items, default_suite(seed=args.seed or 0), emb,
                     kid_seed=args.seed or 0, dump_dir=args.dump)
    out = Path(args.out)
    atomic_write_text(out, probe_table_csv(rows))
    manifest.update_manifest(
        out.parent / manifest.MANIFEST_NAME, "probe",
        {"dataset": manifest.dataset_entry(root), "table": manifest.file_entry(out), "embedder": emb.name},
    )
    print(probe_table_csv(rows), end="")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vtoff", description="Desk-scale virtual try-off experiments")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=16)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--resolution", help="HxW, default 64x48")
    g.add_argument("--family", choices=("tee", "hoodie", "tank"))
    g.add_argument("--texture", choices=("solid", "stripes", "blocks", "logo_patch"))
    g.add_argument("--deform", type=float, default=1.5)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run a training curriculum")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--curriculum", type=int, choices=range(1, 7))
    t.add_argument("--resume", help="stage checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="render try-off outputs for a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--cfg-scale", type=float, dest="cfg_scale")
    s.add_argument("--sample-seed", type=int, dest="sample_seed")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score generated images against references")
    e.add_argument("--generated", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--csv")
    e.add_argument("--seed", type=int)
    e.add_argument("--embedder-seed", type=int, default=0, dest="embedder_seed")
    e.add_argument("--resize", help="HxW, e.g. 341x256 for the legacy resized protocol")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("probe", help="metric-sensitivity table under garment distortions")
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--dump")
    pr.add_argument("--seed", type=int)
    pr.add_argument("--embedder-seed", type=int, default=0, dest="embedder_seed")
    pr.set_defaults(func=cmd_probe)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, CheckpointError, FileNotFoundError, KeyError, ValueError) as e:
        record = {"error": type(e).__name__, "message": str(e)}
        print(json.dumps(record), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
