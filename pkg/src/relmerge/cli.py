"""Command-line pipeline: data, scoring, selection, training, sampling, evaluation.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or data error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import ConfigError, DataError, FormatError, NumericError, ShapeError, VocabularyError

log = logging.getLogger("relmerge")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _embedder(rc: RunConfig):
    from .scenekit.embed import ServiceEmbedder, StubEmbedder
    if rc.embedder == "stub":
        return StubEmbedder()
    if rc.embedder == "service":
        if not rc.embedder_url:
            raise ConfigError("embedder=service needs embedder_url")
        return ServiceEmbedder(rc.embedder_url, rc.embedder_timeout, rc.embedder_retries)
    raise ConfigError(f"embedder must be stub or service, got {rc.embedder!r}")


def _model_config(rc: RunConfig):
    from .diffusion.model import DenoiserConfig
    try:
        return DenoiserConfig(h=rc.h, w=rc.w, d_model=rc.d_model, d_text=rc.d_text, d_img=rc.d_img,
                              img_tokens=rc.img_tokens, n_layers=rc.n_layers, mlp_mult=rc.mlp_mult,
                              max_refs=rc.max_refs, merge_mode=rc.merge_mode or "weighted",
                              null_image=rc.null_image,
                              T=rc.T)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _load_model(path):
    from .diffusion.checkpoint import read_checkpoint
    from .diffusion.model import DenoiserConfig
    params, meta = read_checkpoint(path)
    if meta is None or "model" not in meta:
        raise DataError(f"checkpoint {path} carries no model configuration")
    return params, DenoiserConfig.from_dict(meta["model"])


def _require(*paths):
    """Missing inputs are usage errors (exit 2), unlike unreadable ones."""
    for p in paths:
        if p is not None and not Path(p).exists():
            raise ConfigError(f"input {p} does not exist")


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _manifest(path):
    from .scenekit.dataset import Manifest
    return Manifest.load(path)


def _gen_settings(rc: RunConfig, t_start: int, merge_mode=None):
    from .evalkit.bench import GenSettings
    return GenSettings(steps=rc.sample_steps, guidance=rc.guidance, t_start=t_start,
                       clip_x0=rc.clip_x0 or None, merge_mode=merge_mode)


def _bench_from_manifest(manifest):
    from .evalkit.bench import BenchItem
    return [BenchItem(rec.get("id", i), manifest.spec(i),
                      [manifest.embedding(o["image_embedding"]) for o in rec["objects"]], rec.get("seed", 0))
            for i, rec in enumerate(manifest.records)]


def _bench(rc: RunConfig, path, n: int):
    from .evalkit.bench import make_bench
    if path:
        return _bench_from_manifest(_manifest(path))
    if n < 1:
        raise ConfigError("bench size must be positive")
    return make_bench(n, rc.bench_seed)


# ---------------------------------------------------------------- commands

def cmd_gen_data(rc: RunConfig, args):
    from .scenekit.dataset import build_dataset
    if rc.n_images < 1:
        raise ConfigError(f"--n must be positive, got {rc.n_images}")
    if not 1 <= rc.max_objects <= 4:
        raise ConfigError("--max-objects must be between 1 and 4")
    if not 0 <= rc.duplicate_fraction <= 1:
        raise ConfigError("duplicate_fraction must be in [0, 1]")
    out = _out_dir(args.out)
    m = build_dataset(rc.n_images, rc.seed, out, max_objects=rc.max_objects, mixture=rc.mixture_dict(),
                      duplicate_fraction=rc.duplicate_fraction, threads=rc.threads)
    rc.echo(out, "gen-data")
    print(f"wrote {len(m)} records to {out}")


def cmd_score(rc: RunConfig, args):
    from .curation import score_manifest
    from .scenekit.scenes import crop
    m = _manifest(args.manifest)
    if rc.embedder != "stub":
        emb = _embedder(rc)
        rows, records = [], []
        for i, rec in enumerate(m.records):
            image = m.image(i)
            objs = []
            for o in rec["objects"]:
                rows += [emb.embed_text(o["text"]), emb.embed_image(crop(image, o["bbox"]))]
                objs.append({**o, "text_embedding": len(rows) - 2, "image_embedding": len(rows) - 1})
            records.append({**rec, "objects": objs})
        m = m.with_records(records, np.asarray(rows))
    scored = score_manifest(m, threads=rc.threads)
    out = _out_dir(args.out)
    scored.save(out)
    rc.echo(out, "score")
    totals = [r["scores"]["total"] for r in scored.records]
    print(f"scored {len(totals)} records; mean total {np.mean(totals):.4f}")


def cmd_select(rc: RunConfig, args):
    from .curation import SCORE_ALIASES, select_top_k
    m = _manifest(args.manifest)
    if rc.by not in SCORE_ALIASES:
        raise ConfigError(f"--by must be total, pair or single; got {rc.by!r}")
    k = len(m) if rc.k == 0 else rc.k
    if not 1 <= k <= len(m):
        raise ConfigError(f"--k {k} outside [1, {len(m)}]")
    picked = select_top_k(m, k, rc.by)
    out = _out_dir(args.out)
    picked.save(out)
    rc.echo(out, "select")
    print(f"kept {k} of {len(m)} records by {SCORE_ALIASES[rc.by]}")


def cmd_train(rc: RunConfig, args):
    from .diffusion.checkpoint import save_checkpoint
    from .diffusion.data import load_training_data
    from .diffusion.model import init_params, param_shapes, trainable_names
    from .diffusion.schedule import make_schedule
    from .diffusion.train import TrainSettings, train

    if rc.steps < 0:
        raise ConfigError("--steps must be non-negative")
    if rc.mode not in ("pretrain", "finetune"):
        raise ConfigError(f"--mode must be pretrain or finetune, got {rc.mode!r}")
    cfg = _model_config(rc)
    if args.init:
        params, init_cfg = _load_model(args.init)
        if param_shapes(init_cfg) != param_shapes(cfg):
            raise ConfigError(f"--init checkpoint {args.init} does not match the configured model")
    elif rc.mode == "finetune":
        raise ConfigError("finetune mode needs --init")
    else:
        params = init_params(cfg, rc.init_seed)
    sched = make_schedule(cfg.T)
    data = load_training_data(_manifest(args.data), cfg)
    if len(data) == 0:
        raise DataError(f"{args.data}: no usable records")
    ckpt = Path(args.ckpt_out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    meta = {"model": cfg.to_dict(), "run": json.loads(json.dumps(rc.__dict__))}
    save_checkpoint(params, ckpt, {**meta, "step": 0})
    losses = []

    def on_step(step, p, loss):
        losses.append(float(loss))
        if rc.checkpoint_every and step % rc.checkpoint_every == 0:
            save_checkpoint(p, ckpt, {**meta, "step": step})
        if step % max(1, rc.steps // 20) == 0:
            log.info("step %d loss %.5f (last-200 mean %.5f)", step, loss, np.mean(losses[-200:]))

    settings = TrainSettings(steps=rc.steps, batch_size=rc.batch_size, lr=rc.lr, weight_decay=rc.weight_decay,
                             p_drop_text=rc.p_drop_text, p_drop_image=rc.p_drop_image,
                             p_drop_both=rc.p_drop_both, seed=rc.seed, mode=rc.mode)
    try:
        params, _ = train(params, cfg, sched, data, settings, trainable_names(cfg, rc.mode), on_step)
    finally:
        _write_losses(ckpt.with_name(ckpt.name + ".loss.csv"), losses)
        rc.echo(ckpt.parent, "train")
    save_checkpoint(params, ckpt, {**meta, "step": rc.steps})
    tail = np.mean(losses[-200:]) if losses else float("nan")
    print(f"trained {rc.steps} steps ({rc.mode}, merge={cfg.merge_mode}); final 200-step mean loss {tail:.5f}")


def _write_losses(path, losses):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("step", "loss"))
        for i, v in enumerate(losses, 1):
            w.writerow((i, repr(v)))


def cmd_sample(rc: RunConfig, args):
    from PIL import Image

    from .diffusion.latent import decode, encode, to_uint8
    from .diffusion.model import make_conditions
    from .diffusion.sampling import Denoiser, ddim_sample, sample_seeds
    from .diffusion.schedule import make_schedule
    from .evalkit.report import mean_pair_overlap
    from .scenekit.scenes import parse_prompt, tokenize

    params, cfg = _load_model(args.ckpt)
    if not 1 <= rc.n_samples <= 64:
        raise ConfigError("n_samples must be in [1, 64]")
    objects = parse_prompt(args.prompt)
    if len(args.refs) > cfg.max_refs:
        raise ConfigError(f"{len(args.refs)} references exceed the model's max_refs={cfg.max_refs}")
    refs = []
    emb = _embedder(rc)
    for path in args.refs:
        try:
            with Image.open(path) as im:
                refs.append(emb.embed_image(np.asarray(im.convert("RGB"))))
        except OSError as e:
            raise DataError(f"cannot read reference {path}: {e}") from e
    if refs and len(refs) != len(objects):
        raise ConfigError(f"prompt names {len(objects)} objects but {len(refs)} references were given")
    n = rc.n_samples
    cond = make_conditions([tokenize(args.prompt)] * n, [[tokenize(o) for o in objects]] * n,
                           [refs] * n if refs else None, cfg)
    x_init = None
    t_start = rc.t_start or None
    if args.init_image:
        try:
            with Image.open(args.init_image) as im:
                x_init = np.stack([encode(np.asarray(im.convert("RGB")), cfg.h, cfg.w)] * n)
        except OSError as e:
            raise DataError(f"cannot read init image {args.init_image}: {e}") from e
    model = Denoiser(params, cfg, rc.merge_mode or None, record=True)
    sched = make_schedule(cfg.T)
    x = ddim_sample(model, sched, cond, rc.sample_steps, rc.guidance, sample_seeds(rc.seed, n),
                    shape=(cfg.n_pos, cfg.channels), x_init=x_init, t_start=t_start,
                    clip_x0=rc.clip_x0 or None)
    out = _out_dir(args.out)
    np.save(out / "latents.npy", x.astype("<f8"))
    imgs = to_uint8(decode(x, cfg.h, cfg.w))
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.full((rows * 64, cols * 64, 3), 255, np.uint8)
    for i, im in enumerate(imgs):
        r, c = divmod(i, cols)
        grid[r * 64:(r + 1) * 64, c * 64:(c + 1) * 64] = im
    Image.fromarray(grid).save(out / "grid.png", format="PNG")
    stats = {"prompt": args.prompt, "objects": objects, "n_samples": n,
             "merge_mode": model.merge_mode or cfg.merge_mode}
    if len(objects) >= 2:
        maps = np.stack([np.stack(layers) for layers in model.relevance_log])  # (S, L, B, M, N)
        stats["attention_overlap"] = [mean_pair_overlap(maps[:, :, b], len(objects)) for b in range(n)]
        stats["mean_attention_overlap"] = float(np.mean(stats["attention_overlap"]))
    (out / "sample.json").write_text(json.dumps(stats, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    rc.echo(out, "sample")
    print(f"wrote {n} samples to {out}")


def cmd_verify_relevance(rc: RunConfig, args):
    from .diffusion.schedule import make_schedule
    from .evalkit.harness import RelevanceExperimentConfig, compare_strategies, relevance_score_harness

    _require(args.ckpt)
    params, cfg = _load_model(args.ckpt)
    if rc.strategy not in ("uniform", "weighted", "both"):
        raise ConfigError(f"--strategy must be uniform, weighted or both; got {rc.strategy!r}")
    if not rc.noise_scale > 0:
        raise ConfigError("--noise-scale must be positive")
    items = _bench(rc, None, rc.n_prompts)
    conf = RelevanceExperimentConfig(items, noise_scale=rc.noise_scale, seed=rc.seed,
                                     layers=rc.layers(cfg.n_layers), target=rc.target,
                                     single_step=None if rc.single_step < 0 else rc.single_step,
                                     gen=_gen_settings(rc, rc.eval_t_start, rc.merge_mode or None),
                                     min_prompts=min(50, rc.n_prompts) if args.allow_few else 50)
    try:
        conf.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    sched = make_schedule(cfg.T)
    out = _out_dir(args.out)
    summary = {}
    if rc.strategy == "both":
        cmp = compare_strategies(params, cfg, sched, conf)
        results = {"uniform": cmp.uniform, "weighted": cmp.weighted}
        summary["weighted_minus_uniform"] = {"mean": cmp.diff_mean, "ci95": [cmp.ci_low, cmp.ci_high],
                                             "pairs": cmp.n_pairs}
    else:
        conf.noise_strategy = rc.strategy
        results = {rc.strategy: relevance_score_harness(params, cfg, sched, conf)}
    for name, r in results.items():
        summary[name] = {"S_object_relevance": r.score, "skipped": r.skipped, "skip_rate": r.skip_rate}
    with open(out / "relevance.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["prompt_id", "prompt"] + list(results))
        for i, it in enumerate(items):
            w.writerow([it.index, it.prompt] + ["" if r.ratios[i] is None else repr(r.ratios[i])
                                                 for r in results.values()])
    (out / "relevance.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    rc.echo(out, "verify-relevance")
    for name, r in results.items():
        print(f"S_object_relevance[{name}] = {r.score:.4f} (skipped {r.skipped}/{len(r.ratios)})")


def cmd_eval(rc: RunConfig, args):
    from .diffusion.schedule import make_schedule
    from .evalkit.bench import Generated, generate, object_crops, sample_seed
    from .evalkit.report import EvalReport, column_means, bench_metrics, run_merge_ablation

    _require(args.ckpt, args.bench)
    items = _bench(rc, args.bench, rc.bench_size)
    emb = _embedder(rc)
    out = _out_dir(args.out)
    if args.ablation:
        ckpts = {}
        for spec in args.ablation:
            key, _, path = spec.partition("=")
            if not path:
                raise ConfigError(f"--ablation expects key=path, got {spec!r}")
            ckpts[key] = path
        from .evalkit.report import ABLATION_VARIANTS
        variants = [v for v, (key, _, _) in ABLATION_VARIANTS.items() if key in ckpts]
        if not variants:
            raise ConfigError("no ablation variant matches the given checkpoints")
        cfg0 = _load_model(next(iter(ckpts.values())))[1]
        report = run_merge_ablation(ckpts, items, out / "ablation.csv", cfg_loader=_load_model,
                                    sched=make_schedule(cfg0.T), embedder=emb, n_samples=rc.n_samples,
                                    seed=rc.seed, settings=_gen_settings(rc, rc.eval_t_start),
                                    variants=variants)
        name = "ablation.csv"
    else:
        if not args.ckpt:
            raise ConfigError("eval needs --ckpt or --ablation")
        params, cfg = _load_model(args.ckpt)
        if any(len(it.spec.objects) > cfg.max_refs for it in items):
            raise ConfigError(f"bench has scenes with more than max_refs={cfg.max_refs} objects")
        jobs = [it for it in items for _ in range(rc.n_samples)]
        seeds = [sample_seed(rc.seed, it.index, k) for it in items for k in range(rc.n_samples)]
        gen = generate(params, cfg, make_schedule(cfg.T), jobs, seeds,
                       _gen_settings(rc, rc.eval_t_start, rc.merge_mode or None), record=True)
        if rc.self_reference:
            from dataclasses import replace
            crops = object_crops(gen.images(cfg), jobs)
            jobs = [replace(it, refs=[emb.embed_image(c) for c in cr]) for it, cr in zip(jobs, crops)]
        m = bench_metrics(gen, jobs, cfg, emb)
        report = EvalReport(columns=tuple(m))
        for i, it in enumerate(items):
            sl = slice(i * rc.n_samples, (i + 1) * rc.n_samples)
            report.add(f"prompt{it.index}", **column_means(m, sl))
        name = "eval.csv"
        report.to_csv(out / name)
    rc.echo(out, "eval")
    agg = report.aggregate()
    print(f"wrote {out / name}: " + ", ".join(f"{k}={v:.4f}" for k, v in agg.items() if v is not None))


def cmd_report(rc: RunConfig, args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evalkit.report import EvalReport

    _require(*args.inputs)
    out = _out_dir(args.out)
    plt.rcParams["svg.hashsalt"] = "relmerge"
    lines = []
    for path in args.inputs:
        rep = EvalReport.from_csv(path)
        stem = Path(path).stem
        lines.append(f"## {stem}\n")
        lines.append("| name | " + " | ".join(rep.columns) + " |")
        lines.append("|" + "---|" * (len(rep.columns) + 1))
        agg = rep.aggregate()
        for r in rep.rows + [{"name": "mean", **agg}]:
            cells = ["" if r.get(c) is None else f"{r[c]:.4f}" for c in rep.columns]
            lines.append(f"| {r['name']} | " + " | ".join(cells) + " |")
        lines.append("")
        for c in rep.columns:
            vals = [(r["name"], r[c]) for r in rep.rows if r.get(c) is not None]
            if not vals:
                continue
            fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(vals) + 2), 3))
            ax.bar(range(len(vals)), [v for _, v in vals], color="#4a7ab5")
            ax.set_xticks(range(len(vals)))
            ax.set_xticklabels([n for n, _ in vals], rotation=30, ha="right", fontsize=7)
            ax.set_ylabel(c)
            fig.tight_layout()
            fig.savefig(out / f"{stem}_{c}.svg", format="svg", metadata={"Date": None})
            plt.close(fig)
        print(f"{path}: {len(rep.rows)} rows")
    (out / "report.md").write_text("\n".join(lines), encoding="utf-8")
    rc.echo(out, "report")


# ---------------------------------------------------------------- parser

COMMANDS = {
    "gen-data": cmd_gen_data, "score": cmd_score, "select": cmd_select, "train": cmd_train,
    "sample": cmd_sample, "verify-relevance": cmd_verify_relevance, "eval": cmd_eval, "report": cmd_report,
}

# flag dest -> config key
FLAG_KEYS = {"n": "n_images", "max_objects": "max_objects", "duplicate_fraction": "duplicate_fraction",
             "embedder": "embedder", "k": "k", "by": "by", "steps": "steps", "merge": "merge_mode",
             "mode": "mode", "lr": "lr", "batch_size": "batch_size", "sample_steps": "sample_steps",
             "guidance": "guidance", "t_start": "t_start", "n_samples": "n_samples",
             "n_prompts": "n_prompts", "strategy": "strategy", "noise_scale": "noise_scale",
             "seed": "seed", "threads": "threads", "bench_size": "bench_size",
             "self_reference": "self_reference"}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="relmerge", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        return p

    p = common(sub.add_parser("gen-data", help="render a synthetic corpus"))
    p.add_argument("--n", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--max-objects", type=int)
    p.add_argument("--duplicate-fraction", type=float)

    p = common(sub.add_parser("score", help="object-quality scores for a manifest"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--embedder", choices=("stub", "service"))
    p.add_argument("--out", required=True)

    p = common(sub.add_parser("select", help="keep the top-k scored records"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=_k_arg)
    p.add_argument("--by", choices=("total", "pair", "single"))
    p.add_argument("--out", required=True)

    p = common(sub.add_parser("train", help="train or finetune the denoiser"))
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--merge", choices=("uniform", "weighted", "trained", "text"))
    p.add_argument("--mode", choices=("pretrain", "finetune"))
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--ckpt-out", required=True)

    p = common(sub.add_parser("sample", help="DDIM samples for one prompt"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--refs", nargs="*", default=[])
    p.add_argument("--merge", choices=("uniform", "weighted", "trained", "text"))
    p.add_argument("--steps", dest="sample_steps", type=int)
    p.add_argument("--guidance", type=float)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--t-start", type=int)
    p.add_argument("--init-image")
    p.add_argument("--out", required=True)

    p = common(sub.add_parser("verify-relevance", help="object-relevance noise-injection harness"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n-prompts", type=int)
    p.add_argument("--strategy", choices=("uniform", "weighted", "both"))
    p.add_argument("--noise-scale", type=float)
    p.add_argument("--allow-few", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--out", required=True)

    p = common(sub.add_parser("eval", help="text/image match and attention overlap on a bench"))
    p.add_argument("--ckpt")
    p.add_argument("--ablation", nargs="*", metavar="KEY=PATH",
                   help="checkpoints per merge variant: uniform, weighted, text, trained")
    p.add_argument("--bench", help="manifest used as bench; default generates one")
    p.add_argument("--bench-size", type=int)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--self-reference", action="store_true", default=None)
    p.add_argument("--out", required=True)

    p = common(sub.add_parser("report", help="render report CSVs as tables and SVG charts"))
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    return ap


def _k_arg(s: str) -> int:
    if s == "all":
        return 0
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("k must be positive or 'all'")
    return v


def _overrides(args) -> dict:
    out = {}
    for dest, key in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            out[key] = v
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    return out


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = load_config(args.config, _overrides(args))
        COMMANDS[args.command](rc, args)
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, VocabularyError, ValueError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
