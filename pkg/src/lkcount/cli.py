"""`lkcount` command line: dataset generation, training, evaluation,
re-parameterization, and the verification/diagnostic subcommands.

Report-producing subcommands write the delimited artifact named on the
command line and render a matplotlib figure next to it.  Errors exit
nonzero with a single `error: ...` line on stderr.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import erf as erf_mod
from . import figures, gradcheck, images, model as model_mod, reparam, rsy as rsy_mod
from . import train as train_mod
from .rng import Rng


def _load_model_config(spec: str) -> model_mod.ModelConfig:
    if spec == "desk":
        return model_mod.desk_model_config()
    if spec == "paper":
        return model_mod.paper_model_config()
    return model_mod.ModelConfig.from_json(Path(spec).read_text())


def _load_train_config(spec: str) -> train_mod.TrainConfig:
    if spec == "desk":
        return train_mod.desk_train_config()
    if spec == "paper":
        return train_mod.paper_train_config()
    return train_mod.TrainConfig.from_json(Path(spec).read_text())


def _load_data_config(spec: str) -> data_mod.DatasetConfig:
    if spec == "desk":
        return data_mod.DatasetConfig()
    return data_mod.DatasetConfig.from_json(Path(spec).read_text())


def _sibling(path, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _load_data_config(args.config)
    if args.seed is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, seed=args.seed)
    dataset = data_mod.gen_dataset(cfg)
    data_mod.save_dataset(dataset, cfg, args.out)
    sizes = {k: len(v) for k, v in dataset.items()}
    print(f"gen out={args.out} sizes={json.dumps(sizes)} seed={cfg.seed}")
    return 0


def _load_dataset_dir(path) -> dict:
    return {s: data_mod.load_split(path, s) for s in data_mod.SPLITS}


def cmd_train(args) -> int:
    import dataclasses

    mcfg = _load_model_config(args.model_config)
    tcfg = _load_train_config(args.train_config)
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    tcfg = dataclasses.replace(tcfg, ckpt_path=args.out, log_path=args.log, **overrides)
    dataset = _load_dataset_dir(args.data)
    best, records = train_mod.train(tcfg, mcfg, dataset, quiet=False)
    if args.log:
        figures.save_training_curves(records, _sibling(args.log, "_curves.png"))
    final = records[-1]
    print(f"train ckpt={args.out} best_val_mae={min(r['val_mae'] for r in records):.6g} "
          f"final_loss={final['loss']:.6g}")
    return 0


def cmd_eval(args) -> int:
    mp = model_mod.load_model(args.ckpt)
    samples = data_mod.load_split(args.data, args.split)
    tcfg = _load_train_config(args.train_config)
    report = train_mod.evaluate(mp, samples, tcfg)
    Path(args.report).write_text(report.to_csv())
    figures.save_eval_scatter(report, _sibling(args.report, "_scatter.png"))
    print(f"eval split={args.split} n={report.n} mae={report.mae:.6f} mse={report.mse:.6f}")
    return 0


def cmd_fuse(args) -> int:
    mp = model_mod.load_model(args.ckpt_in)
    fused = model_mod.fuse_model(mp)
    model_mod.save_model(fused, args.ckpt_out)
    print(f"fuse in={args.ckpt_in} out={args.ckpt_out} params={fused.param_count()}")
    return 0


def cmd_equiv(args) -> int:
    dtype = np.float64 if args.f64 else np.float32
    tol = 1e-9 if args.f64 else 1e-4
    rng = Rng(args.seed)
    block = reparam.random_block((args.k1, args.k2), args.channels, args.groups, rng, dtype)
    fused = reparam.reparam_pipeline(block)
    diff = reparam.verify_equivalence(block, fused, n_trials=args.trials, rng=rng)
    status = "ok" if diff <= tol else "FAIL"
    print(f"equiv k1={args.k1} k2={args.k2} channels={args.channels} groups={args.groups} "
          f"trials={args.trials} max_abs_diff={diff:.3e} tol={tol:.0e} status={status}")
    return 0 if diff <= tol else 1


def cmd_gradcheck(args) -> int:
    # finite differences are only meaningful in f64; the flag makes it explicit
    results = gradcheck.run_all(seed=args.seed)
    bad = 0
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"gradcheck op={r.name} rel_err={r.rel_err:.3e} tol={gradcheck.TOLERANCE:.0e} "
              f"status={status}")
        bad += 0 if r.ok else 1
    return 0 if bad == 0 else 1


def cmd_rsy(args) -> int:
    img = images.read_image(args.image)
    try:
        nh, nw = (int(v) for v in args.grid.lower().split("x"))
    except ValueError:
        raise ValueError(f"--grid must look like 3x3, got {args.grid!r}") from None
    cfg = rsy_mod.RsyConfig(n_h=nh, n_w=nw, mode=args.mode, probability=1.0)
    sample = data_mod.Sample(image=img, count=0, centers=np.zeros((0, 2)))
    out, record = rsy_mod.rsy_apply(sample, cfg, Rng(args.seed))
    images.write_image(np.clip(out.image, 0.0, 1.0), args.out)
    Path(args.record).write_text(rsy_mod.record_to_text(record))
    print(f"rsy image={args.image} out={args.out} record={args.record} "
          f"grid={nh}x{nw} mode={args.mode} seed={args.seed}")
    return 0


def cmd_erf(args) -> int:
    mp = model_mod.load_model(args.ckpt)
    report = erf_mod.measure_erf(mp, args.size, probe=args.probe, seed=args.seed)
    hm = report.heatmap
    scale = hm.max() if hm.max() > 0 else 1.0
    images.write_image((hm / scale)[None], args.out_heatmap)
    prof = erf_mod.radial_profile(report)
    lines = ["radius,cumulative_mass"]
    lines += [f"{r},{m:.6f}" for r, m in prof]
    Path(args.out_profile).write_text("\n".join(lines) + "\n")
    figures.save_erf_figure(report, _sibling(args.out_profile, "_erf.png"))
    extra = ""
    if args.compare:
        _, _, rows = erf_mod.stack_vs_single_comparison()
        txt = "variant,depth,nominal_radius,r95\n" + "".join(
            f"{v},{d},{nr:.3f},{r:.3f}\n" for v, d, nr, r in rows)
        Path(args.compare).write_text(txt)
        extra = f" compare={args.compare}"
    print(f"erf probe={report.probe} r95={report.r95:.3f} "
          f"nominal_radius={report.nominal_radius:.3f} outside_mass={report.outside_mass:.3e}"
          + extra)
    return 0


def cmd_ablate(args) -> int:
    import dataclasses

    dataset = _load_dataset_dir(args.data)
    data_cfg = data_mod.load_config(args.data)
    mcfg = _load_model_config(args.model_config)
    tcfg = _load_train_config(args.train_config)
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    tcfg = dataclasses.replace(tcfg, **overrides)
    rows = train_mod.ablation_run(dataset, data_cfg, mcfg, tcfg, quiet=False)
    Path(args.out).write_text(train_mod.ablation_csv(rows))
    figures.save_ablation_figure(rows, _sibling(args.out, "_ablation.png"))
    print(f"ablate out={args.out} variants={len(rows) - 1}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="lkcount",
        description="Large-kernel count regression: data, training, fusion, diagnostics.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", default="desk", help="DatasetConfig JSON path or 'desk'")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train the counter")
    p.add_argument("--data", required=True)
    p.add_argument("--model-config", default="desk", help="ModelConfig JSON path, 'desk' or 'paper'")
    p.add_argument("--train-config", default="desk", help="TrainConfig JSON path, 'desk' or 'paper'")
    p.add_argument("--out", required=True, help="checkpoint path (LKC1)")
    p.add_argument("--log", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=data_mod.SPLITS, default="val")
    p.add_argument("--report", required=True, help="per-sample CSV output")
    p.add_argument("--train-config", default="desk")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("fuse", help="re-parameterize a checkpoint model-wide")
    p.add_argument("--ckpt-in", required=True)
    p.add_argument("--ckpt-out", required=True)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("equiv", help="parallel vs fused forward equivalence check")
    p.add_argument("--k1", type=int, required=True)
    p.add_argument("--k2", type=int, required=True)
    p.add_argument("--channels", type=int, required=True)
    p.add_argument("--groups", type=int, required=True)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--f64", action="store_true")
    p.set_defaults(fn=cmd_equiv)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--f64", action="store_true",
                   help="run in float64 (always on: differencing needs f64)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("rsy", help="apply the patch-shuffle augmentation to one image")
    p.add_argument("--image", required=True, help="input PGM/PPM")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--grid", default="3x3")
    p.add_argument("--mode", choices=("uniform", "random_scale"), default="uniform")
    p.add_argument("--out", required=True)
    p.add_argument("--record", required=True, help="replay record text file")
    p.set_defaults(fn=cmd_rsy)

    p = sub.add_parser("erf", help="effective receptive field report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--probe", choices=("feature", "output"), default="feature")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-heatmap", required=True, help="PGM output")
    p.add_argument("--out-profile", required=True, help="radial CSV output")
    p.add_argument("--compare", default=None,
                   help="also write the stacked-3x3 vs single-kernel r95 CSV here")
    p.set_defaults(fn=cmd_erf)

    p = sub.add_parser("ablate", help="run the five framework variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="comparison CSV")
    p.add_argument("--model-config", default="desk")
    p.add_argument("--train-config", default="desk")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_ablate)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # single machine-readable line, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
