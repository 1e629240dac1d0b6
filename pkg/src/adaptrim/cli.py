"""Command-line entry points.

Subcommands: train, eval, flops, redundancy, ablate, masks. Every command
is reproducible (identical config and seed give bit-identical outputs);
all emitted files start with `# adaptrim <version>` and
`# config_hash <sha256 prefix>` header lines. See README for file formats.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .analysis import (baseline_head_prune, format_ablation, format_redundancy,
                       grad_head_importance, make_token_policy, redundancy_profile)
from .backbone import head_trim_sites
from .checkpoint import config_diff, load_model, save_checkpoint
from .config import TOOL_VERSION, RunConfig, load_config
from .data import GridDataset
from .efficiency import (flops_histogram, format_flops_records, format_histogram,
                         format_pareto_points, model_flops)
from .rng import RngStream
from .runtime import format_mask_trace, retention_stats
from .training import StepRecord, single_thread_blas, train

TOKEN_METHODS = ("token_random", "token_attn", "token_local")
HEAD_METHODS = ("head_random", "head_grad_local", "head_grad_all")


def _headers(run_cfg: RunConfig, *extra: str) -> list[str]:
    lines = [f"# adaptrim {TOOL_VERSION}", f"# config_hash {run_cfg.hash()}"]
    lines.extend(f"# {e}" for e in extra)
    return lines


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    print(f"wrote {path}")


def _load_for_eval(args) -> tuple:
    model, run_cfg = load_model(args.checkpoint)
    if getattr(args, "config", None):
        given = load_config(args.config)
        diff = config_diff(run_cfg, given)
        model_keys = {f.name for f in __import__("dataclasses").fields(run_cfg.model)}
        bad = [d for d in diff if d.split(":")[0] in model_keys]
        if bad:
            raise SystemExit("checkpoint incompatible with --config:\n  " + "\n  ".join(bad))
    dataset = GridDataset(run_cfg.data, run_cfg.model)
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    return model, run_cfg, dataset, out_dir


def _iter_split(dataset: GridDataset, split: str, limit: int | None):
    for i, inst in enumerate(dataset.split(split)):
        if limit is not None and i >= limit:
            return
        yield inst


# -- train ------------------------------------------------------------------------


def cmd_train(args) -> None:
    run_cfg = load_config(args.config)
    if args.out_dir:
        run_cfg = run_cfg.replace(out_dir=args.out_dir)
    out_dir = Path(run_cfg.out_dir)

    def progress(rec: StepRecord):
        print(f"step {rec.step + 1}/{run_cfg.train.steps} "
              f"task={rec.loss_task:.4f} sd={rec.loss_sd:.4f} cost={rec.loss_cost:.5f} "
              f"beta_t={rec.beta_t:.3f} beta_h={rec.beta_h:.3f} "
              f"gamma=({rec.gamma_t:.2f},{rec.gamma_h:.2f}) acc={rec.accuracy:.2f}",
              flush=True)

    result = train(run_cfg, progress=progress)
    lines = _headers(run_cfg)
    lines.append(StepRecord.header())
    lines.extend(rec.row() for rec in result.records)
    _write(out_dir / "train_log.tsv", "\n".join(lines) + "\n")
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint.bin", result.model.params(), run_cfg)
    print(f"wrote {out_dir / 'checkpoint.bin'}")


# -- eval -------------------------------------------------------------------------


def _eval_records(model, run_cfg, dataset, split, mask_mode, limit,
                  token_policy=None, head_override=None):
    rows = []
    rng_root = RngStream(run_cfg.train.seed).child("eval", split)
    with single_thread_blas():
        for inst in _iter_split(dataset, split, limit):
            rng = rng_root.child(inst.index) if (mask_mode == "bernoulli" or token_policy) else None
            out = model.forward_infer(inst.text_ids, inst.patches, mode=mask_mode,
                                      rng=rng, token_policy=token_policy,
                                      head_override=head_override)
            bd = model_flops(run_cfg.model, out.mask_set)
            st = retention_stats(out.mask_set, run_cfg.model)
            rows.append({
                "instance": inst.index, "difficulty": inst.difficulty,
                "label": inst.label, "prediction": out.prediction,
                "correct": int(out.prediction == inst.label),
                "flops": bd.total, "baseline": bd.baseline_total,
                "speedup": bd.speedup, "beta_t": st.beta_t, "beta_h": st.beta_h,
            })
    return rows


def _summary(rows) -> dict:
    acc = float(np.mean([r["correct"] for r in rows]))
    speedup = float(np.mean([r["speedup"] for r in rows]))
    flops_ratio = float(np.mean([r["flops"] / r["baseline"] for r in rows]))
    return {"accuracy": acc, "mean_speedup": speedup, "mean_flops_ratio": flops_ratio}


def cmd_eval(args) -> None:
    model, run_cfg, dataset, out_dir = _load_for_eval(args)
    rows = _eval_records(model, run_cfg, dataset, args.split, args.mask_mode, args.limit)
    s = _summary(rows)
    lines = _headers(run_cfg, f"split {args.split}", f"mask_mode {args.mask_mode}",
                     f"accuracy {s['accuracy']!r}", f"mean_speedup {s['mean_speedup']!r}",
                     f"mean_flops_ratio {s['mean_flops_ratio']!r}")
    lines.append("instance\tdifficulty\tlabel\tprediction\tcorrect\tflops\tbaseline\tspeedup")
    for r in rows:
        lines.append("\t".join(str(r[k]) for k in
                               ("instance", "difficulty", "label", "prediction", "correct",
                                "flops", "baseline")) + f"\t{r['speedup']!r}")
    _write(out_dir / f"eval_{args.split}.tsv", "\n".join(lines) + "\n")
    print(f"accuracy {s['accuracy']:.4f}  mean_speedup {s['mean_speedup']:.3f}x  "
          f"mean_flops_ratio {s['mean_flops_ratio']:.3f}")


# -- flops ------------------------------------------------------------------------


def cmd_flops(args) -> None:
    model, run_cfg, dataset, out_dir = _load_for_eval(args)
    rows = _eval_records(model, run_cfg, dataset, args.split, args.mask_mode, args.limit)
    headers = _headers(run_cfg, f"split {args.split}")
    _write(out_dir / f"flops_{args.split}.tsv", format_flops_records(rows, headers))

    bins = flops_histogram([r["flops"] for r in rows], n_bins=args.bins)
    _write(out_dir / f"flops_hist_{args.split}.tsv", format_histogram(bins, headers))

    lines = list(headers)
    lines.append("difficulty\tcount\tmean_flops\tmean_speedup")
    for d in sorted({r["difficulty"] for r in rows}):
        sub = [r for r in rows if r["difficulty"] == d]
        lines.append(f"{d}\t{len(sub)}\t{np.mean([r['flops'] for r in sub])!r}"
                     f"\t{np.mean([r['speedup'] for r in sub])!r}")
    _write(out_dir / f"flops_strata_{args.split}.tsv", "\n".join(lines) + "\n")
    s = _summary(rows)
    print(f"mean_flops_ratio {s['mean_flops_ratio']:.3f}  mean_speedup {s['mean_speedup']:.3f}x")


# -- redundancy ---------------------------------------------------------------------


def cmd_redundancy(args) -> None:
    model, run_cfg, dataset, out_dir = _load_for_eval(args)
    instances = list(_iter_split(dataset, args.split, args.limit))
    rows = redundancy_profile(model, instances)
    text = format_redundancy(rows, _headers(run_cfg, f"split {args.split}", f"n {len(instances)}"))
    _write(out_dir / f"redundancy_{args.split}.tsv", text)


# -- ablate -----------------------------------------------------------------------


def cmd_ablate(args) -> None:
    model, run_cfg, dataset, out_dir = _load_for_eval(args)
    ratios = [float(r) for r in args.ratios.split(",")] if args.ratios else [0.5]
    methods = args.method.split(",")

    importance = None
    if any(m.startswith("head_grad") for m in methods):
        calib = list(_iter_split(dataset, "val", args.calibration))
        with single_thread_blas():
            importance = grad_head_importance(model, calib)

    results = []
    for method in methods:
        if method == "adaptive":
            rows = _eval_records(model, run_cfg, dataset, args.split, "deterministic", args.limit)
            s = _summary(rows)
            ratio = float(np.mean([r["beta_t"] for r in rows]))
            results.append({"method": method, "ratio": ratio, "accuracy": s["accuracy"],
                            "flops_ratio": s["mean_flops_ratio"], "speedup": s["mean_speedup"]})
            continue
        for ratio in ratios:
            if method in TOKEN_METHODS:
                policy = make_token_policy(method.removeprefix("token_"), ratio)
                rows = _eval_records(model, run_cfg, dataset, args.split,
                                     "deterministic", args.limit, token_policy=policy)
            elif method in HEAD_METHODS:
                kind = method.removeprefix("head_")
                if kind == "random":
                    imp = {m: np.zeros(run_cfg.model.n_heads)
                           for m in head_trim_sites(run_cfg.model)}
                    masks = baseline_head_prune("random", imp, ratio,
                                                rng=RngStream(run_cfg.train.seed).child("ablate", ratio))
                else:
                    masks = baseline_head_prune(kind, importance, ratio)
                rows = _eval_records(model, run_cfg, dataset, args.split,
                                     "deterministic", args.limit, head_override=masks)
            else:
                raise SystemExit(f"unknown method {method!r}")
            s = _summary(rows)
            results.append({"method": method, "ratio": ratio, "accuracy": s["accuracy"],
                            "flops_ratio": s["mean_flops_ratio"], "speedup": s["mean_speedup"]})
            print(f"{method} ratio={ratio}: acc={s['accuracy']:.4f} "
                  f"flops_ratio={s['mean_flops_ratio']:.3f}")

    headers = _headers(run_cfg, f"split {args.split}")
    _write(out_dir / f"ablation_{args.split}.tsv", format_ablation(results, headers))
    points = [{"label": f"{r['method']}@{r['ratio']:.2f}",
               "flops_ratio": r["flops_ratio"], "accuracy": r["accuracy"]} for r in results]
    _write(out_dir / f"pareto_{args.split}.tsv", format_pareto_points(points, headers))


# -- masks ------------------------------------------------------------------------


def cmd_masks(args) -> None:
    model, run_cfg, dataset, out_dir = _load_for_eval(args)
    inst = dataset.instance(args.instance_id)
    with single_thread_blas():
        out = model.forward_infer(inst.text_ids, inst.patches, mode=args.mask_mode)
    g = run_cfg.data.grid_size
    extra = [f"instance {inst.index}", f"difficulty {inst.difficulty}",
             f"label {inst.label}", f"prediction {out.prediction}"]
    text = format_mask_trace(run_cfg.model, out.mask_set, _headers(run_cfg, *extra))
    grid_lines = []
    for site, m in out.mask_set.token_masks.items():
        if not site.endswith("vis") and not site.startswith("vis"):
            continue
        grid = np.asarray(m)[1:].reshape(g, g).astype(int)
        grid_lines.append(f"# grid {site} retained {int(np.asarray(m).sum())}/{len(m)}")
        grid_lines.extend("# " + " ".join(str(v) for v in row) for row in grid)
    _write(out_dir / f"masks_{inst.index}.txt", text + "\n".join(grid_lines) + "\n")


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptrim",
                                description="Input-adaptive token/head pruning, desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", default=None)
    t.set_defaults(fn=cmd_train)

    def eval_like(name, help_):
        q = sub.add_parser(name, help=help_)
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--config", default=None,
                       help="optional config to validate against the checkpoint")
        q.add_argument("--split", default="test", choices=("train", "val", "test"))
        q.add_argument("--mask-mode", default="deterministic",
                       choices=("deterministic", "bernoulli"))
        q.add_argument("--limit", type=int, default=None)
        q.add_argument("--out-dir", default=None)
        return q

    e = eval_like("eval", "accuracy and speedup on a split")
    e.set_defaults(fn=cmd_eval)

    f = eval_like("flops", "per-instance FLOPs records, histogram, difficulty strata")
    f.add_argument("--bins", type=int, default=10)
    f.set_defaults(fn=cmd_flops)

    r = eval_like("redundancy", "token/head similarity profile (unpruned forward)")
    r.set_defaults(fn=cmd_redundancy)

    a = eval_like("ablate", "baseline pruning comparison table")
    a.add_argument("--method", default="adaptive,token_random",
                   help=f"comma list from: adaptive,{','.join(TOKEN_METHODS + HEAD_METHODS)}")
    a.add_argument("--ratios", default="0.5")
    a.add_argument("--calibration", type=int, default=16,
                   help="val instances for gradient head importance")
    a.set_defaults(fn=cmd_ablate)

    m = sub.add_parser("masks", help="per-block retained-token trace for one instance")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--config", default=None)
    m.add_argument("--instance-id", type=int, required=True)
    m.add_argument("--mask-mode", default="deterministic",
                   choices=("deterministic", "bernoulli"))
    m.add_argument("--out-dir", default=None)
    m.set_defaults(fn=cmd_masks)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
