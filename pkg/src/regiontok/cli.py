"""Command-line surface.

Exit codes: 0 success, 1 usage error, 2 data error (missing/invalid inputs),
3 numerics error. Every subcommand takes --seed and --out.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .aggregation import (aggregate, masks_from_groups, read_group_members,
                          token_count_curve, write_aggregation_report)
from .errors import EngineError, NumericsError, ValidationError
from .evalbench import (bench_forward, fit_r2, probe_benchmark,
                        retrieval_benchmark)
from .extension import extend, random_pooling_head
from .formats import (read_checkpoint, read_feature_map, read_scene,
                      read_token_set, write_checkpoint, write_feature_map,
                      write_masks, write_scene, write_token_set)
from .losses import LossWeights
from .model import RenConfig, forward, init_params
from .prompting import (grid_prompts, read_superpixels, slic_prompts,
                        slic_segment, write_superpixels)
from .synth import SceneConfig, generate_scene, render_scene
from .training import (DataConfig, TrainConfig, config_from_json, gradcheck_report,
                    make_dataset, train)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_prompt_spec(spec: str):
    parts = spec.split(":")
    try:
        if parts[0] == "grid" and len(parts) == 2:
            return ("grid", int(parts[1]), None)
        if parts[0] == "slic" and len(parts) in (2, 3):
            compactness = float(parts[2]) if len(parts) == 3 else 256.0
            return ("slic", int(parts[1]), compactness)
    except ValueError:
        pass
    raise UsageError(f"bad prompt spec {spec!r}; use grid:<G> or slic:<S>[:compactness]")


def _parse_mu_grid(spec: str) -> list[float]:
    parts = spec.split(":")
    if len(parts) != 3:
        raise UsageError(f"bad mu grid {spec!r}; use start:stop:step")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"bad mu grid {spec!r}: {exc}") from exc
    if step <= 0 or stop < start:
        raise UsageError("mu grid needs step > 0 and stop >= start")
    return [float(v) for v in np.arange(start, stop + step / 2, step)]


def _apply_overrides(doc: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"override path {key!r} crosses a non-object")
        node[parts[-1]] = value
    return doc


def _load_params(args):
    if getattr(args, "ckpt", None):
        return read_checkpoint(args.ckpt)
    config = RenConfig(d_model=args.dim, encoder_dim=args.dim)
    return init_params(args.seed, config)


def _require_out(args):
    if not args.out:
        raise UsageError("--out is required for this command")
    return Path(args.out)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    data = DataConfig(n_scenes=args.n_scenes, canvas=args.canvas, dim=args.dim,
                      h_patches=args.h_patches, w_patches=args.w_patches,
                      n_regions_min=args.n_regions_min,
                      n_regions_max=args.n_regions_max,
                      n_classes=args.n_classes, noise_sigma=args.noise,
                      dataset_seed=args.seed)
    scenes = make_dataset(data)
    names = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:04d}"
        write_scene(out / f"{name}.json", scene)
        names.append(f"{name}.json")
        if args.render:
            rendered = render_scene(scene, data.h_patches, data.w_patches,
                                    noise_sigma=data.noise_sigma)
            write_feature_map(out / f"{name}.rft", rendered.feature_map)
            write_masks(out / f"{name}.masks.json", rendered.masks)
            np.save(out / f"{name}.rgb.npy", rendered.rgb)
    manifest = {"scenes": names, "canvas": data.canvas, "dim": data.dim,
                "h_patches": data.h_patches, "w_patches": data.w_patches,
                "noise_sigma": data.noise_sigma, "seed": args.seed}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2),
                                       encoding="utf-8")
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    out = _require_out(args)
    if args.config:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    else:
        doc = {}
    _apply_overrides(doc, args.set or [])
    train_cfg, data_cfg, weights = config_from_json(json.dumps(doc))
    if args.seed is not None:
        train_cfg = TrainConfig(**{**train_cfg.__dict__, "seed": args.seed})
    scenes = None
    if args.scenes:
        manifest = json.loads((Path(args.scenes) / "manifest.json")
                              .read_text(encoding="utf-8"))
        scenes = [read_scene(Path(args.scenes) / name)
                  for name in manifest["scenes"]]
    result = train(train_cfg, data_cfg, weights=weights, scenes=scenes,
                   out_dir=out)
    last = next((m for m in reversed(result.metrics) if not m.get("skipped")), None)
    if last:
        print(f"finished {train_cfg.total_steps} steps: "
              f"l_cont={last['l_cont']:.5f} l_feat={last['l_feat']:.5f}")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck_report(eps=args.eps, seed=args.seed,
                              with_attention=args.attention)
    worst = max(report.items(), key=lambda kv: kv[1]["max_rel"])
    for name in sorted(report):
        print(f"{name:24s} max_rel={report[name]['max_rel']:.3e} "
              f"max_abs={report[name]['max_abs']:.3e}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(f"worst tensor: {worst[0]} ({worst[1]['max_rel']:.3e})")
    if worst[1]["max_rel"] > args.tol:
        raise NumericsError(
            f"gradient check failed: {worst[0]} rel error {worst[1]['max_rel']:.3e}"
            f" > {args.tol}")
    return 0


def cmd_tokenize(args) -> int:
    out = _require_out(args)
    kind, count, compactness = _parse_prompt_spec(args.prompts)
    fmap, _ = read_feature_map(args.rft)
    params = _load_params_for_map(args, fmap)
    if kind == "grid":
        prompts = grid_prompts(count)
    else:
        if not args.image:
            raise UsageError("slic prompts need --image (an .npy RGB render)")
        rgb = np.load(args.image)
        superpixels = slic_segment(rgb, count, compactness=compactness)
        prompts = slic_prompts(superpixels)
        if args.superpixels_out:
            write_superpixels(args.superpixels_out, superpixels)
    tokens = forward(fmap, prompts, params, source_id=str(args.rft))
    write_token_set(out, tokens)
    print(f"wrote {len(tokens)} tokens to {out}")
    return 0


def _load_params_for_map(args, fmap):
    if args.ckpt:
        params = read_checkpoint(args.ckpt)
        return params
    config = RenConfig(d_model=fmap.dim, encoder_dim=fmap.dim)
    return init_params(args.seed, config)


def cmd_aggregate(args) -> int:
    out = _require_out(args)
    tokens = read_token_set(args.rtok)
    min_group = "auto" if args.min_group == "auto" else int(args.min_group)
    result = aggregate(tokens, mu=args.mu, min_group=min_group)
    mask_refs = None
    if args.superpixels:
        superpixels = read_superpixels(args.superpixels)
        masks = masks_from_groups(superpixels, result.groups)
        masks_path = Path(str(out) + ".masks.json")
        write_masks(masks_path, masks)
        mask_refs = [f"{masks_path.name}#{i}" for i in range(len(masks))]
    write_aggregation_report(out, result, n_prompts=len(tokens),
                             mask_refs=mask_refs)
    print(f"{len(tokens)} tokens -> {result.n_groups} groups "
          f"({len(result.discarded)} discarded) at mu={args.mu}")
    return 0


def cmd_export_regions(args) -> int:
    out = _require_out(args)
    tokens = read_token_set(args.rtok)
    superpixels = read_superpixels(args.superpixels)
    min_group = "auto" if args.min_group == "auto" else int(args.min_group)
    result = aggregate(tokens, mu=args.mu, min_group=min_group)
    masks = masks_from_groups(superpixels, result.groups)
    write_masks(out, masks)
    print(f"wrote {len(masks)} region masks to {out}")
    return 0


def cmd_extend(args) -> int:
    out = _require_out(args)
    fmap, head = read_feature_map(args.rft)
    if head is None:
        if args.random_head_seed is None:
            raise ValidationError(
                f"{args.rft} carries no pooling head; pass --random-head-seed "
                f"to synthesize one")
        head = random_pooling_head(args.random_head_seed, fmap.dim)
    superpixels = read_superpixels(args.superpixels)
    tokens = read_token_set(args.rtok)
    min_group = "auto" if args.min_group == "auto" else int(args.min_group)
    result = aggregate(tokens, mu=args.mu, min_group=min_group)
    extended, masks = extend(fmap, head, superpixels, result)
    write_token_set(out, extended)
    if args.masks_out:
        write_masks(args.masks_out, masks)
    print(f"wrote {len(extended)} target-space region tokens to {out}")
    return 0


def cmd_probe(args) -> int:
    out = _require_out(args)
    params = read_checkpoint(args.ckpt)
    data = DataConfig(dim=params.config.encoder_dim,
                      n_scenes=args.train_scenes + args.test_scenes,
                      dataset_seed=args.seed)
    scenes = make_dataset(data)
    report = probe_benchmark(params, scenes[:args.train_scenes],
                             scenes[args.train_scenes:], data, seed=args.seed)
    Path(out).write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(f"ren mIoU {report['ren_miou']:.4f} vs baseline "
          f"{report['baseline_miou']:.4f}")
    return 0


def cmd_retrieve(args) -> int:
    out = _require_out(args)
    params = read_checkpoint(args.ckpt)
    data = DataConfig(dim=params.config.encoder_dim,
                      n_scenes=args.db_scenes + args.query_scenes,
                      dataset_seed=args.seed)
    scenes = make_dataset(data)
    report = retrieval_benchmark(params, scenes[:args.db_scenes],
                                 scenes[args.db_scenes:], data,
                                 n_queries=args.queries, seed=args.seed)
    Path(out).write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(f"ren mAP {report['ren_map']:.4f} vs baseline "
          f"{report['baseline_map']:.4f}")
    return 0


def cmd_bench(args) -> int:
    params = _load_params(args)
    counts = [int(c) for c in args.counts.split(",")]
    reports = bench_forward(params, counts, runs=args.runs, warmup=args.warmup,
                            seed=args.seed)
    doc = {"reports": [r.__dict__ for r in reports]}
    doc["r2_linear"] = fit_r2([r.prompts for r in reports],
                              [r.mean_s for r in reports])
    if args.check_16384:
        big = bench_forward(params, [16384], runs=1, warmup=0,
                            with_aggregation=False, seed=args.seed)[0]
        doc["pass_16384"] = {"mean_s": big.mean_s,
                             "peak_bytes_analytic": big.peak_bytes_analytic}
    for r in reports:
        agg = f" agg={r.agg_mean_s:.4f}s" if r.agg_mean_s is not None else ""
        print(f"{r.prompts:6d} prompts: {r.mean_s:.4f}s "
              f"({r.tokens_per_s:,.0f} tok/s){agg}")
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return 0


def cmd_sweep_mu(args) -> int:
    out = _require_out(args)
    tokens = read_token_set(args.rtok)
    grid = _parse_mu_grid(args.grid)
    curve = token_count_curve(tokens, grid)
    lines = ["mu,groups"] + [f"{mu:.6g},{count}" for mu, count in curve]
    Path(out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    for mu, count in curve:
        print(f"mu={mu:.4f} groups={count}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regiontok",
                     description="Region tokenization engine for patch feature maps")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=str, default=None,
                       help="output file or directory")
        return p

    p = add("synth", cmd_synth, "generate a synthetic scene dataset")
    p.add_argument("--n-scenes", type=int, default=16)
    p.add_argument("--canvas", type=int, default=96)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--h-patches", type=int, default=12)
    p.add_argument("--w-patches", type=int, default=12)
    p.add_argument("--n-regions-min", type=int, default=3)
    p.add_argument("--n-regions-max", type=int, default=6)
    p.add_argument("--n-classes", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--render", action="store_true",
                   help="also write RFT/masks/RGB per scene")

    p = add("train", cmd_train, "train the region encoder on synthetic scenes")
    p.add_argument("--config", type=str, default=None,
                   help="JSON with train/data/loss sections")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted-key config overrides")
    p.add_argument("--scenes", type=str, default=None,
                   help="scene directory from `synth`")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient check")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--attention", action="store_true",
                   help="include the attention supervision loss")

    p = add("tokenize", cmd_tokenize, "RFT + prompts -> RTOK tokens")
    p.add_argument("--rft", type=str, required=True)
    p.add_argument("--prompts", type=str, required=True,
                   help="grid:<G> or slic:<S>[:compactness]")
    p.add_argument("--ckpt", type=str, default=None)
    p.add_argument("--image", type=str, default=None,
                   help=".npy RGB render, required for slic prompts")
    p.add_argument("--superpixels-out", type=str, default=None)

    p = add("aggregate", cmd_aggregate, "merge tokens into region groups")
    p.add_argument("--rtok", type=str, required=True)
    p.add_argument("--mu", type=float, default=0.975)
    p.add_argument("--min-group", type=str, default="auto")
    p.add_argument("--superpixels", type=str, default=None,
                   help="also derive region masks from these superpixels")

    p = add("export-regions", cmd_export_regions,
            "aggregated groups -> region masks JSON")
    p.add_argument("--rtok", type=str, required=True)
    p.add_argument("--superpixels", type=str, required=True)
    p.add_argument("--mu", type=float, default=0.975)
    p.add_argument("--min-group", type=str, default="auto")

    p = add("extend", cmd_extend, "pool a target encoder's features per region")
    p.add_argument("--rft", type=str, required=True,
                   help="target features, ideally with an embedded pooling head")
    p.add_argument("--rtok", type=str, required=True,
                   help="tokens that define the grouping")
    p.add_argument("--superpixels", type=str, required=True)
    p.add_argument("--mu", type=float, default=0.8)
    p.add_argument("--min-group", type=str, default="auto")
    p.add_argument("--random-head-seed", type=int, default=None)
    p.add_argument("--masks-out", type=str, default=None)

    p = add("probe", cmd_probe, "linear-probe segmentation benchmark")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--train-scenes", type=int, default=24)
    p.add_argument("--test-scenes", type=int, default=8)

    p = add("retrieve", cmd_retrieve, "object retrieval benchmark")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--db-scenes", type=int, default=64)
    p.add_argument("--query-scenes", type=int, default=8)
    p.add_argument("--queries", type=int, default=8)

    p = add("bench", cmd_bench, "forward/aggregation throughput benchmark")
    p.add_argument("--ckpt", type=str, default=None)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--counts", type=str, default="256,1024,4096")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--check-16384", action="store_true")

    p = add("sweep-mu", cmd_sweep_mu, "group count across a mu grid")
    p.add_argument("--rtok", type=str, required=True)
    p.add_argument("--grid", type=str, default="0.875:0.975:0.025")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:      # --help
        return 0 if exc.code in (0, None) else 1
    try:
        return int(args.func(args) or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericsError as exc:
        print(f"numerics error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"data error: missing file {exc.filename}", file=sys.stderr)
        return 2
    except EngineError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
