"""Single entry point: train, sweep, analyze, serve, simulate, plus data
export, kernel benchmarking, and trial regeneration.

Exit codes: 0 ok, 1 user error (arguments, files, config), 2 internal error.
Every run writes a manifest capturing its configuration and input hashes.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from fovgen import __version__, fileio
from fovgen.errors import FovgenError

DESK_PRESET = {
    "steps": 1200,
    "batch": 16,
    "lr": 2e-4,
    "n_images": 5000,
    "log_every": 25,
}


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(message)


def _write_manifest(out_dir: Path, command: str, params: dict, outputs: list, extra=None):
    manifest = {
        "tool": "fovgen",
        "version": __version__,
        "command": command,
        "params": params,
        "outputs": outputs,
        "created_unix": time.time(),
    }
    if extra:
        manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _apply_config_file(args):
    """Values from --config override flag values (flags act as defaults)."""
    if getattr(args, "config", None):
        cfg = json.loads(Path(args.config).read_text())
        for k, v in cfg.items():
            key = k.replace("-", "_")
            if not hasattr(args, key):
                raise UserError(f"unknown config key {k!r}")
            setattr(args, key, v)
    return args


def _load_model(path):
    from fovgen.diffusion import GenerativeModel

    p = Path(path)
    if not p.exists():
        raise UserError(f"checkpoint not found: {p}")
    model, meta = GenerativeModel.load(p)
    return model, meta, fileio.file_sha256(p)


# ---------------------------------------------------------------------------
# train


def _trainer_state_arrays(trainer):
    arrays = {}
    for i, m in enumerate(trainer.opt.m):
        arrays[f"opt/m/{i}"] = m
    for i, v in enumerate(trainer.opt.v):
        arrays[f"opt/v/{i}"] = v
    return arrays


def cmd_train(args):
    from fovgen.data import SceneDataset
    from fovgen.diffusion import GenerativeModel, ModelConfig, TrainConfig, Trainer
    from fovgen.unet import DenoiserConfig

    if args.preset == "desk":
        for k, v in DESK_PRESET.items():
            if getattr(args, k) is None:
                setattr(args, k, v)
    defaults = {"steps": 200, "batch": 8, "lr": 1e-4, "n_images": 256, "log_every": 25}
    for k, v in defaults.items():
        if getattr(args, k) is None:
            setattr(args, k, v)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.npz"
    loss_csv = out / "loss.csv"

    tc = TrainConfig(
        steps=args.steps,
        batch_size=args.batch,
        lr=args.lr,
        weight_decay=args.wd,
        seed=args.seed,
        log_every=args.log_every,
    )
    if args.resume:
        model, meta, _ = _load_model(args.resume)
        trainer_meta = meta.get("trainer", {})
        trainer = Trainer(model, tc, emergency_path=out / "emergency.npz")
        arrays, _ = fileio.load_checkpoint(args.resume)
        ms = [arrays[f"opt/m/{i}"] for i in range(len(trainer.opt.m)) if f"opt/m/{i}" in arrays]
        vs = [arrays[f"opt/v/{i}"] for i in range(len(trainer.opt.v)) if f"opt/v/{i}" in arrays]
        if ms:
            trainer.opt.load_state_dict({"t": trainer_meta.get("opt_t", 0), "m": ms, "v": vs})
        trainer.step_count = trainer_meta.get("step", 0)
        if "rng_state" in trainer_meta:
            trainer.rng.bit_generator.state = json.loads(trainer_meta["rng_state"])
        dataset = SceneDataset(**meta["dataset"])
        start_step = trainer.step_count
        mode = "a"
    else:
        model = GenerativeModel(ModelConfig(denoiser=DenoiserConfig(side=args.side)), init_seed=args.seed)
        trainer = Trainer(model, tc, emergency_path=out / "emergency.npz")
        dataset = SceneDataset(n=args.n_images, side=args.side, seed=args.data_seed)
        start_step = 0
        mode = "w"

    n_params = model.n_params()
    print(f"training {n_params} parameters on {dataset.n} synthetic scenes "
          f"({args.steps} steps, batch {tc.batch_size})")

    with open(loss_csv, mode, newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if mode == "w":
            w.writerow(["step", "loss", "ms"])
        for step in range(start_step, args.steps):
            idx = trainer.rng.choice(dataset.n, size=tc.batch_size, replace=dataset.n < tc.batch_size)
            imgs = dataset.batch(idx)
            t0 = time.perf_counter()
            loss = trainer.training_step(imgs)
            ms = (time.perf_counter() - t0) * 1e3
            w.writerow([step, f"{loss:.6f}", f"{ms:.1f}"])
            if (step + 1) % tc.log_every == 0 or step + 1 == args.steps:
                f.flush()
                print(f"step {step + 1}/{args.steps} loss {loss:.4f} ({ms:.0f} ms)")

    extra_meta = {
        "dataset": dataclasses.asdict(dataset),
        "train_config": dataclasses.asdict(tc),
        "trainer": {
            "step": trainer.step_count,
            "opt_t": trainer.opt.t,
            "rng_state": json.dumps(trainer.rng.bit_generator.state),
        },
    }
    arrays = _trainer_state_arrays(trainer)
    model.save(ckpt_path, extra_meta)
    # append optimizer state to the same file
    ck_arrays, ck_meta = fileio.load_checkpoint(ckpt_path)
    ck_arrays.update(arrays)
    fileio.save_checkpoint(ckpt_path, ck_arrays, {k: v for k, v in ck_meta.items() if k not in ("format", "version")})
    _write_manifest(
        out,
        "train",
        {k: getattr(args, k) for k in ("steps", "batch", "lr", "wd", "seed", "side", "n_images", "data_seed", "preset")},
        [str(ckpt_path), str(loss_csv)],
        {"checkpoint_sha": fileio.file_sha256(ckpt_path), "n_params": n_params},
    )
    print(f"checkpoint: {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(args):
    from fovgen.data import SceneDataset
    from fovgen.diffusion import SamplerConfig
    from fovgen.experiments import SWEEP_AXES, sweep_axis, write_sweep_csv

    model, meta, sha = _load_model(args.checkpoint)
    ds_meta = meta.get("dataset", {"n": 6000, "side": model.cfg.denoiser.side, "seed": 1234})
    dataset = SceneDataset(n=max(ds_meta["n"], args.eval_offset + args.n_images + args.reference_size),
                           side=ds_meta["side"], seed=ds_meta["seed"])
    axes = SWEEP_AXES if args.axis == "all" else (args.axis,)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = SamplerConfig(steps=args.steps, seed=args.seed)
    outputs = []
    for axis in axes:
        rows = sweep_axis(
            model,
            dataset,
            axis,
            n_images=args.n_images,
            eval_offset=args.eval_offset,
            reference_size=args.reference_size,
            sc=sc,
            seed=args.seed,
            batch=args.batch,
        )
        path = out / f"sweep_{axis}.csv"
        write_sweep_csv(path, rows)
        outputs.append(str(path))
        desc = ", ".join(f"{r.value:g}:{r.fid:.3f}" for r in rows)
        print(f"{axis}: FID by value -> {desc}")
    _write_manifest(
        out,
        "sweep",
        {k: getattr(args, k) for k in ("checkpoint", "axis", "n_images", "steps", "seed", "batch",
                                        "eval_offset", "reference_size")},
        outputs,
        {"checkpoint_sha": sha},
    )
    return 0


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args):
    from fovgen.data import SceneDataset
    from fovgen.diffusion import SamplerConfig
    from fovgen.experiments import ObserverConfig, simulate_study
    from fovgen.metrics import write_report_csv

    model, meta, sha = _load_model(args.checkpoint)
    ds_meta = meta.get("dataset", {"n": 6000, "side": model.cfg.denoiser.side, "seed": 1234})
    dataset = SceneDataset(n=max(ds_meta["n"], args.eval_offset + args.n_stimuli),
                           side=ds_meta["side"], seed=ds_meta["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    observer = ObserverConfig(
        tau=args.tau, tau_quantile=args.tau_quantile, noise_sigma=args.sigma
    )
    table, reports, sim_meta = simulate_study(
        model,
        dataset,
        trials_per_condition=args.trials,
        observer=observer,
        sc=SamplerConfig(steps=args.steps),
        seed=args.seed,
        eval_offset=args.eval_offset,
        n_stimuli=args.n_stimuli,
        batch=args.batch,
        build_feature_reports=not args.no_reports,
    )
    judgments = out / "judgments.jsonl"
    table.to_jsonl(judgments)
    outputs = [str(judgments)]
    if reports:
        reports_csv = out / "reports.csv"
        write_report_csv(reports_csv, reports)
        outputs.append(str(reports_csv))
    (out / "observer.json").write_text(json.dumps({"tau": sim_meta["tau"],
                                                   "sigma": observer.noise_sigma}, indent=2))
    rates = {c: sum(r.response == "same" for r in table.rows if r.condition == c)
             / max(sum(1 for r in table.rows if r.condition == c), 1)
             for c in table.conditions()}
    print("metamer rates:", json.dumps(rates, sort_keys=True))
    _write_manifest(
        out,
        "simulate",
        {k: getattr(args, k) for k in ("checkpoint", "trials", "tau", "tau_quantile", "sigma",
                                        "steps", "seed", "n_stimuli", "eval_offset", "batch")},
        outputs,
        {"checkpoint_sha": sha, "tau_used": sim_meta["tau"]},
    )
    return 0


# ---------------------------------------------------------------------------
# analyze


def cmd_analyze(args):
    from fovgen.analysis import (
        ABLATION_CONDITIONS,
        JudgmentTable,
        ablation_report,
        bin_proportions,
        metamer_rate,
        stepwise_regression,
    )
    from fovgen.metrics import CSV_COLUMNS, read_report_csv

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = JudgmentTable.from_jsonl(args.judgments)
    reports = read_report_csv(args.reports)
    by_id = {r.pair_id: r for r in reports}
    rows = [r for r in table.rows if r.pair_id in by_id]
    if not rows:
        raise UserError("no judgment rows join to feature-report pair ids")

    rates = {c: metamer_rate(table, c) for c in table.conditions()}
    (out / "rates.json").write_text(json.dumps(rates, indent=2, sort_keys=True))
    outputs = [str(out / "rates.json")]

    feature_names = [c for c in CSV_COLUMNS if c != "pair_id"]
    x = np.array([[getattr(by_id[r.pair_id], c) for c in feature_names] for r in rows])
    y = [r.response for r in rows]

    bins_path = out / "bin_curves.csv"
    with open(bins_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["feature", "bin_center", "proportion_same", "count", "ci_low", "ci_high", "low_n"])
        for j, name in enumerate(feature_names):
            try:
                for b in bin_proportions(x[:, j], y, n_bins=args.bins):
                    w.writerow([name, b.center, b.proportion_same, b.count, b.ci_low, b.ci_high, b.low_n])
            except FovgenError:
                continue
    outputs.append(str(bins_path))

    reg = stepwise_regression(x, y, entry_p=args.entry_p, names=feature_names)
    reg_json = {
        "selected": reg.names,
        "r_squared": reg.r_squared,
        "delta_r2": reg.delta_r2,
        "coefficients": list(map(float, reg.coefficients)),
    }
    (out / "regression.json").write_text(json.dumps(reg_json, indent=2, sort_keys=True))
    outputs.append(str(out / "regression.json"))
    with open(out / "delta_r2.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["variable", "delta_r2"])
        for name in reg.names:
            w.writerow([name, reg.delta_r2[name]])
    outputs.append(str(out / "delta_r2.csv"))

    if all(any(r.condition == c for r in table.rows) for c in ABLATION_CONDITIONS):
        abl = ablation_report(table)
        (out / "ablation.json").write_text(json.dumps(abl, indent=2, sort_keys=True))
        outputs.append(str(out / "ablation.json"))
        print("ablation rates:", json.dumps(abl["rates"], sort_keys=True))

    print(f"stepwise selected {reg.names} (R^2 = {reg.r_squared:.4f})")
    _write_manifest(out, "analyze",
                    {k: getattr(args, k) for k in ("reports", "judgments", "bins", "entry_p")},
                    outputs)
    return 0


# ---------------------------------------------------------------------------
# serve / misc


def cmd_serve(args):
    import uvicorn

    from fovgen.data import SceneDataset
    from fovgen.service import ExperimentService, SessionConfig, create_app

    conditions = tuple(args.conditions.split(",")) if args.conditions else ("original", "own-fixation", "random")
    needs_model = any(c != "original" for c in conditions)
    model, sha = None, "none"
    if args.checkpoint:
        model, _, sha = _load_model(args.checkpoint)
    elif needs_model:
        raise UserError("generated-image conditions require --checkpoint")
    side = model.cfg.denoiser.side if model else args.side
    dataset = SceneDataset(n=args.n_stimuli_pool, side=side, seed=args.data_seed)
    cfg = SessionConfig(
        n_stimuli=args.n_stimuli,
        conditions=conditions,
        sampler_steps=args.steps,
        seed=args.seed,
        generation_budget_ms=args.budget_ms,
    )
    service = ExperimentService(model, dataset, args.out, cfg, checkpoint_id=sha,
                                gen_workers=args.gen_workers)
    app = create_app(service, frontend_dir=args.frontend)
    print(f"serving on {args.host}:{args.port} (checkpoint {sha})")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_make_data(args):
    from fovgen.data import SceneDataset

    ds = SceneDataset(n=args.n, side=args.side, seed=args.seed)
    paths = ds.export_pngs(args.out)
    _write_manifest(Path(args.out), "make-data",
                    {"n": args.n, "side": args.side, "seed": args.seed},
                    paths[:5] + ([f"... {len(paths)} total"] if len(paths) > 5 else []))
    print(f"wrote {len(paths)} scenes to {args.out}")
    return 0


def cmd_bench_kernels(args):
    from fovgen import bench

    bench.main(out_csv=args.out, reps=args.reps)
    return 0


def cmd_regen(args):
    from fovgen.data import SceneDataset
    from fovgen.fileio import load_png, read_jsonl, save_png
    from fovgen.service import regenerate_record

    model, meta, sha = _load_model(args.checkpoint)
    ds_meta = meta.get("dataset", {"n": 6000, "side": model.cfg.denoiser.side, "seed": 1234})
    dataset = SceneDataset(**ds_meta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = [r for r in read_jsonl(args.records) if r.get("event") in ("generated", "response")]
    n_match = n_total = 0
    for rec in records:
        if rec["condition"] == "original" or not rec.get("image_ref") or rec["image_ref"] == "original":
            continue
        pixels = regenerate_record(model, rec, dataset)
        path = out / f"regen-{rec['trial_index']:03d}.png"
        save_png(path, pixels)
        n_total += 1
        orig = Path(rec["image_ref"])
        if orig.exists():
            n_match += int(path.read_bytes() == orig.read_bytes())
    print(f"regenerated {n_total} trials; byte-identical: {n_match}/{n_total}")
    return 0 if n_match == n_total else 2


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="fovgen", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the toy model on synthetic scenes")
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file whose values override flags")
    t.add_argument("--preset", choices=["desk", "none"], default="none")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--wd", type=float, default=0.01)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--side", type=int, default=64)
    t.add_argument("--n-images", type=int, dest="n_images")
    t.add_argument("--data-seed", type=int, dest="data_seed", default=1234)
    t.add_argument("--log-every", type=int, dest="log_every")
    t.add_argument("--resume")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sweep", help="generation-quality curves along a conditioning axis")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", help="JSON file whose values override flags")
    s.add_argument("--axis", choices=["peripheral-scale", "blur-level", "foveal-tokens", "all"],
                   default="all")
    s.add_argument("--out", required=True)
    s.add_argument("--n-images", type=int, dest="n_images", default=96)
    s.add_argument("--reference-size", type=int, dest="reference_size", default=256)
    s.add_argument("--eval-offset", type=int, dest="eval_offset", default=5000)
    s.add_argument("--steps", type=int, default=15)
    s.add_argument("--batch", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_sweep)

    m = sub.add_parser("simulate", help="simulated same/different study")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--config", help="JSON file whose values override flags")
    m.add_argument("--out", required=True)
    m.add_argument("--trials", type=int, default=520, help="trials per condition")
    m.add_argument("--tau", type=float, default=None)
    m.add_argument("--tau-quantile", type=float, dest="tau_quantile", default=0.6)
    m.add_argument("--sigma", type=float, default=0.05)
    m.add_argument("--steps", type=int, default=10)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--n-stimuli", type=int, dest="n_stimuli", default=64)
    m.add_argument("--eval-offset", type=int, dest="eval_offset", default=5000)
    m.add_argument("--batch", type=int, default=32)
    m.add_argument("--no-reports", action="store_true", dest="no_reports")
    m.set_defaults(fn=cmd_simulate)

    a = sub.add_parser("analyze", help="rates, binned curves, stepwise regression")
    a.add_argument("--reports", required=True)
    a.add_argument("--judgments", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--bins", type=int, default=6)
    a.add_argument("--entry-p", type=float, dest="entry_p", default=0.05)
    a.set_defaults(fn=cmd_analyze)

    v = sub.add_parser("serve", help="run the behavioral experiment service")
    v.add_argument("--checkpoint")
    v.add_argument("--out", default="runs/service")
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8000)
    v.add_argument("--conditions", help="comma-separated trial conditions")
    v.add_argument("--n-stimuli", type=int, dest="n_stimuli", default=10)
    v.add_argument("--n-stimuli-pool", type=int, dest="n_stimuli_pool", default=512)
    v.add_argument("--data-seed", type=int, dest="data_seed", default=1234)
    v.add_argument("--steps", type=int, default=10)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--side", type=int, default=64)
    v.add_argument("--budget-ms", type=int, dest="budget_ms", default=5000)
    v.add_argument("--gen-workers", type=int, dest="gen_workers", default=1)
    v.add_argument("--frontend", help="directory of built UI assets to serve")
    v.set_defaults(fn=cmd_serve)

    d = sub.add_parser("make-data", help="export synthetic scene PNGs")
    d.add_argument("--out", required=True)
    d.add_argument("--n", type=int, default=300)
    d.add_argument("--side", type=int, default=64)
    d.add_argument("--seed", type=int, default=1234)
    d.set_defaults(fn=cmd_make_data)

    b = sub.add_parser("bench-kernels", help="compare compiled kernels vs numpy fallback")
    b.add_argument("--out")
    b.add_argument("--reps", type=int, default=5)
    b.set_defaults(fn=cmd_bench_kernels)

    r = sub.add_parser("regen", help="regenerate trials from a persisted log and compare bytes")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--records", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_regen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config_file(args)
        return args.fn(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FovgenError as e:
        print(f"error ({e.code}): {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # internal failure
        import traceback

        traceback.print_exc()
        print(f"internal error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
