"""Command-line harness: mesh/dataset/training/reconstruction/evaluation.

Only the standard library is imported at module scope so that --threads
can pin the BLAS thread pools before numpy first loads; every subcommand
pulls in the heavy modules inside its own function.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _pin_threads(n: int) -> None:
    for var in THREAD_ENV_VARS:
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eitlab",
        description="Impedance tomography laboratory: simulation, "
        "diffusion-based reconstruction, and evaluation.",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="global seed override")
    parser.add_argument("--out", help="output directory override")
    parser.add_argument("--threads", type=int,
                        help="pin BLAS/OpenMP thread count")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key, e.g. --set sample.vc_interval=5",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("mesh", help="build and save the disk mesh")
    p = sub.add_parser("dataset", help="generate a synthetic dataset")
    p.add_argument("--per-setting", type=int)
    p.add_argument("--grid", type=int)
    for name in ("train-score", "train-fvcn"):
        p = sub.add_parser(name, help=f"train the {name.split('-')[1]} network")
        p.add_argument("--dataset")
        p.add_argument("--steps", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--lr", type=float)
    p = sub.add_parser("reconstruct", help="sample reconstructions")
    p.add_argument("--dataset")
    p.add_argument("--score-ckpt")
    p.add_argument("--fvcn-ckpt")
    p.add_argument("--records", type=int)
    p = sub.add_parser("evaluate", help="metric tables, optional noise sweep")
    p.add_argument("--dataset")
    p.add_argument("--recon")
    p.add_argument("--records", type=int)
    p.add_argument("--noise-sweep", action="store_true")
    p = sub.add_parser("bench", help="wall-time per pipeline stage")
    p.add_argument("--repeats", type=int)
    return parser


def _apply_flag(cfg: dict, dotted: str, value) -> None:
    if value is None:
        return
    from .config import override

    override(cfg, dotted, value)


def _parse_set_overrides(raw: dict, items: list[str]) -> None:
    from .errors import ConfigError

    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        dotted, _, text = item.partition("=")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {dotted!r} crosses a non-section")
        node[parts[-1]] = value


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        _pin_threads(args.threads)

    from .errors import ConfigError, ContractError, GenerationError, NumericalError

    try:
        from .config import load_config, validate_config

        if args.config:
            p = Path(args.config)
            if not p.exists():
                raise ConfigError(f"config file not found: {args.config}")
            try:
                raw = json.loads(p.read_text())
            except json.JSONDecodeError as err:
                raise ConfigError(f"config is not valid JSON: {err}") from err
        else:
            raw = {}
        _parse_set_overrides(raw, args.set)
        cfg = validate_config(raw)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["out"] = args.out
        if args.threads is None and cfg.get("threads"):
            _pin_threads(cfg["threads"])

        handler = {
            "mesh": cmd_mesh,
            "dataset": cmd_dataset,
            "train-score": cmd_train_score,
            "train-fvcn": cmd_train_fvcn,
            "reconstruct": cmd_reconstruct,
            "evaluate": cmd_evaluate,
            "bench": cmd_bench,
        }[args.command]
        handler(cfg, args)
        return 0
    except (ConfigError, ContractError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (NumericalError, GenerationError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3


def _out_dir(cfg: dict, *parts: str) -> Path:
    out = Path(cfg["out"]).joinpath(*parts)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_mesh(cfg: dict, args) -> None:
    from .mesh import build_disk_mesh, save_mesh

    m = cfg["mesh"]
    mesh = build_disk_mesh(
        radius=m["radius"],
        refinement=m["refinement"],
        n_electrodes=m["n_electrodes"],
        electrode_coverage=m["electrode_coverage"],
    )
    out = _out_dir(cfg, "mesh")
    save_mesh(mesh, out)
    print(
        f"mesh: {mesh.n_nodes} nodes, {mesh.n_elements} elements, "
        f"{mesh.n_electrodes} electrodes -> {out}"
    )


def _dataset_path(cfg: dict, flag=None) -> Path:
    if flag:
        return Path(flag)
    if cfg["dataset"]["path"]:
        return Path(cfg["dataset"]["path"])
    return Path(cfg["out"]) / "dataset"


def cmd_dataset(cfg: dict, args) -> None:
    from .phantoms import DatasetConfig, generate_dataset

    d = dict(cfg["dataset"])
    if args.per_setting is not None:
        d["per_setting"] = args.per_setting
    if args.grid is not None:
        d["grid"] = args.grid
    dcfg = DatasetConfig(
        settings=tuple(d["settings"]) if d["settings"] is not None else None,
        per_setting=d["per_setting"],
        grid=d["grid"],
        base_seed=cfg["seed"],
        fine_refinement=d["fine_refinement"],
        coarse_refinement=d["coarse_refinement"],
        n_electrodes=cfg["mesh"]["n_electrodes"],
        drive_current=d["drive_current"],
        contact_impedance=d["contact_impedance"],
        background_sigma=d["background_sigma"],
        inclusion_sigma=d["inclusion_sigma"],
        tv_lambda=d["tv_lambda"],
        pdipm_max_outer=d["pdipm_max_outer"],
    )
    out = _dataset_path(cfg)
    t0 = time.perf_counter()
    manifest = generate_dataset(dcfg, out)
    print(
        f"dataset: {manifest['n_records']} records at {manifest['grid']}x"
        f"{manifest['grid']} in {time.perf_counter() - t0:.1f}s -> {out}"
    )


def _train_opts(section: dict, cfg: dict, args):
    from .models import TrainOpts

    opts = TrainOpts(
        steps=section["steps"],
        epochs=section["epochs"],
        batch=section["batch"],
        lr=section["lr"],
        seed=section["seed"] if section["seed"] is not None else cfg["seed"],
    )
    if getattr(args, "steps", None) is not None:
        opts.steps = args.steps
        opts.epochs = None
    if getattr(args, "batch", None) is not None:
        opts.batch = args.batch
    if getattr(args, "lr", None) is not None:
        opts.lr = args.lr
    return opts


def _write_loss_csv(path: Path, losses: list[float]) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v!r}\n")


def cmd_train_score(cfg: dict, args) -> None:
    from .checkpoint import save_checkpoint
    from .models import train_score
    from .phantoms import load_dataset
    from .sampler import cosine_schedule

    dataset = load_dataset(_dataset_path(cfg, args.dataset))
    schedule = cosine_schedule(cfg["sample"]["T"])
    opts = _train_opts(cfg["score"], cfg, args)
    arch = dict(cfg["score"]["arch"])
    t0 = time.perf_counter()
    result = train_score(dataset, schedule, opts, arch=arch)
    out = _out_dir(cfg, "score_ckpt")
    save_checkpoint(out, result.model, result.norm,
                    extra={"steps": len(result.losses)})
    _write_loss_csv(Path(cfg["out"]) / "score_losses.csv", result.losses)
    print(
        f"score training: loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f} "
        f"({len(result.losses)} steps, {time.perf_counter() - t0:.1f}s) -> {out}"
    )


def cmd_train_fvcn(cfg: dict, args) -> None:
    from .checkpoint import save_checkpoint
    from .models import train_fvcn
    from .phantoms import load_dataset

    dataset = load_dataset(_dataset_path(cfg, args.dataset))
    opts = _train_opts(cfg["fvcn"], cfg, args)
    opts.val_fraction = cfg["fvcn"]["val_fraction"]
    opts.eval_every = cfg["fvcn"]["eval_every"]
    opts.patience = cfg["fvcn"]["patience"]
    arch = dict(cfg["fvcn"]["arch"])
    t0 = time.perf_counter()
    result = train_fvcn(dataset, opts, arch=arch)
    out = _out_dir(cfg, "fvcn_ckpt")
    save_checkpoint(out, result.model, result.norm,
                    extra={"steps": len(result.losses),
                           "train_mse": result.train_mse,
                           "val_mse": result.val_mse})
    _write_loss_csv(Path(cfg["out"]) / "fvcn_losses.csv", result.losses)
    print(
        f"fvcn training: loss {result.losses[0]:.4f} -> {result.losses[-1]:.6f}, "
        f"fit mse {result.train_mse:.6f}, val mse {result.val_mse:.6f} "
        f"({time.perf_counter() - t0:.1f}s) -> {out}"
    )


def _load_nets(cfg: dict, score_flag, fvcn_flag):
    from .checkpoint import load_checkpoint

    score_dir = score_flag or cfg["reconstruct"]["score_ckpt"] or str(
        Path(cfg["out"]) / "score_ckpt"
    )
    fvcn_dir = fvcn_flag or cfg["reconstruct"]["fvcn_ckpt"] or str(
        Path(cfg["out"]) / "fvcn_ckpt"
    )
    scorenet, norm = load_checkpoint(score_dir)
    fvcn, fvcn_norm = load_checkpoint(fvcn_dir)
    return scorenet, fvcn, norm, fvcn_norm


def _sampler_opts(cfg: dict, mode: str):
    from .sampler import SamplerOpts

    s = cfg["sample"]
    return SamplerOpts(
        ddim_steps=s["ddim_steps"],
        eta_mode=s["eta_mode"],
        vc_mode=mode,
        vc_interval=s["vc_interval"],
        vc_iters=s["vc_iters"],
        vc_lr=s["vc_lr"],
        vc_assign=s["vc_assign"],
        x0_clip=s["x0_clip"],
        seed=cfg["seed"],
    )


def cmd_reconstruct(cfg: dict, args) -> None:
    import numpy as np

    from .errors import ConfigError
    from .fem import KIND_DIFFERENCE, MeasurementFrame
    from .phantoms import PixelImage, disk_mask, load_dataset, record_seed
    from .sampler import cosine_schedule, sample
    from .viz import save_image_grid

    dataset = load_dataset(
        _dataset_path(cfg, args.dataset or cfg["reconstruct"]["dataset"])
    )
    scorenet, fvcn, norm, _ = _load_nets(cfg, args.score_ckpt, args.fvcn_ckpt)
    schedule = cosine_schedule(cfg["sample"]["T"])
    modes = cfg["reconstruct"]["modes"]
    for m in modes:
        if m not in ("off", "during", "after"):
            raise ConfigError(f"unknown reconstruction mode {m!r}")
    limit = args.records or cfg["reconstruct"]["records"] or len(dataset)
    n = min(limit, len(dataset))
    g = dataset.manifest["grid"]
    mask = disk_mask(g)

    out = _out_dir(cfg, "recon")
    rows = []
    for idx in range(n):
        truth = PixelImage(dataset.sigma_true[idx].astype(np.float64), mask)
        initial = PixelImage(dataset.initial[idx].astype(np.float64), mask)
        frame = MeasurementFrame(
            dataset.voltage[idx].astype(np.float64), kind=KIND_DIFFERENCE
        )
        row = [truth, initial]
        for mode in modes:
            rng = np.random.default_rng(record_seed(cfg["seed"], idx))
            res = sample(
                initial, frame, scorenet,
                fvcn if mode != "off" else None,
                schedule, _sampler_opts(cfg, mode), norm, rng,
            )
            stem = f"record{idx:05d}_{mode}"
            res.image.values.astype("<f4").tofile(out / f"{stem}.f32")
            res.write_csv(out / f"{stem}_steps.csv")
            row.append(res.image)
        rows.append(row)
        print(f"reconstructed record {idx} ({', '.join(modes)})")

    meta = {
        "records": n,
        "modes": modes,
        "grid": g,
        "seed": cfg["seed"],
        "sample": cfg["sample"],
    }
    (out / "manifest.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )
    if cfg["reconstruct"]["png"]:
        save_image_grid(
            out / "grid.png", rows, ["truth", "initial"] + list(modes)
        )
    print(f"reconstructions -> {out}")


def cmd_evaluate(cfg: dict, args) -> None:
    import numpy as np

    from .errors import ConfigError
    from .metrics import MetricReport, compute_all
    from .phantoms import PixelImage, disk_mask, load_dataset

    dataset = load_dataset(
        _dataset_path(cfg, args.dataset or cfg["evaluate"]["dataset"])
    )
    g = dataset.manifest["grid"]
    mask = disk_mask(g)
    out = _out_dir(cfg, "eval")
    psnr_max = cfg["evaluate"]["psnr_max"]

    if args.noise_sweep or cfg["evaluate"]["noise_sweep"]:
        _evaluate_noise_sweep(cfg, args, dataset, mask, out, psnr_max)
        return

    recon_dir = Path(args.recon or cfg["evaluate"]["recon"] or
                     Path(cfg["out"]) / "recon")
    if not (recon_dir / "manifest.json").exists():
        raise ConfigError(f"no reconstruction manifest under {recon_dir}")
    meta = json.loads((recon_dir / "manifest.json").read_text())
    limit = args.records or cfg["evaluate"]["records"] or meta["records"]
    n = min(limit, meta["records"])
    for mode in meta["modes"]:
        report = MetricReport()
        for idx in range(n):
            vals = np.fromfile(
                recon_dir / f"record{idx:05d}_{mode}.f32", dtype="<f4"
            ).reshape(g, g).astype(np.float64)
            recon = PixelImage(vals, mask)
            truth = PixelImage(dataset.sigma_true[idx].astype(np.float64), mask)
            report.add(idx, compute_all(recon, truth, psnr_max), mode=mode)
        report.write_csv(out / f"metrics_{mode}.csv")
        report.write_json(out / f"metrics_{mode}.json")
        agg = report.aggregate()
        print(
            f"{mode}: re={agg['re']:.4f} ssim={agg['ssim']:.4f} "
            f"psnr={agg['psnr']:.2f} over {agg['n_records']} records"
        )
    print(f"evaluation -> {out}")


def _evaluate_noise_sweep(cfg, args, dataset, mask, out: Path, psnr_max) -> None:
    import numpy as np

    from .fem import KIND_DIFFERENCE, MeasurementFrame, StimulationProtocol
    from .mesh import build_disk_mesh
    from .metrics import MetricReport, compute_all, measure_snr
    from .phantoms import PixelImage, add_noise_snr
    from .preimage import PreimageSolver
    from .sampler import cosine_schedule, sample

    man = dataset.manifest
    scorenet, fvcn, norm, _ = _load_nets(
        cfg, cfg["evaluate"]["score_ckpt"], cfg["evaluate"]["fvcn_ckpt"]
    )
    schedule = cosine_schedule(cfg["sample"]["T"])
    protocol = StimulationProtocol(
        n_electrodes=man["n_electrodes"], drive_current=man["drive_current"]
    )
    coarse = build_disk_mesh(
        refinement=man["coarse_refinement"], n_electrodes=man["n_electrodes"]
    )
    pre = PreimageSolver(
        coarse,
        protocol=protocol,
        contact_impedance=man["contact_impedance"],
        background_sigma=man["background_sigma"],
        grid=man["grid"],
        tv_lambda=man.get("tv_lambda"),
    )
    limit = args.records or cfg["evaluate"]["records"] or len(dataset)
    n = min(limit, len(dataset))
    mode = cfg["sample"]["vc_mode"]
    summary = {}
    for li, level in enumerate(cfg["evaluate"]["snr_levels"]):
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg["seed"], 1000 + li])
        )
        report = MetricReport()
        realized = []
        for idx in range(n):
            clean = MeasurementFrame(
                dataset.voltage[idx].astype(np.float64), kind=KIND_DIFFERENCE
            )
            noisy = add_noise_snr(clean, float(level), rng)
            realized.append(measure_snr(clean, noisy))
            initial = pre.reconstruct(noisy)
            res = sample(
                initial, noisy, scorenet, fvcn, schedule,
                _sampler_opts(cfg, mode), norm, rng,
            )
            truth = PixelImage(dataset.sigma_true[idx].astype(np.float64), mask)
            report.add(
                idx, compute_all(res.image, truth, psnr_max),
                snr_db=level, mode=mode,
            )
        report.write_csv(out / f"metrics_snr{level}db.csv")
        report.write_json(out / f"metrics_snr{level}db.json")
        agg = report.aggregate()
        summary[str(level)] = {
            "realized_snr_db": float(np.mean(realized)),
            "re": agg["re"],
        }
        print(
            f"snr {level} dB (realized {np.mean(realized):.2f}): "
            f"re={agg['re']:.4f} over {n} records"
        )
    (out / "noise_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )


def cmd_bench(cfg: dict, args) -> None:
    import numpy as np

    from .fem import KIND_DIFFERENCE, MeasurementFrame, StimulationProtocol
    from .mesh import build_disk_mesh
    from .phantoms import load_dataset
    from .preimage import PreimageSolver
    from .sampler import cosine_schedule, sample

    dataset = load_dataset(_dataset_path(cfg, cfg["bench"]["dataset"]))
    man = dataset.manifest
    scorenet, fvcn, norm, _ = _load_nets(
        cfg, cfg["bench"]["score_ckpt"], cfg["bench"]["fvcn_ckpt"]
    )
    schedule = cosine_schedule(cfg["sample"]["T"])
    protocol = StimulationProtocol(
        n_electrodes=man["n_electrodes"], drive_current=man["drive_current"]
    )
    coarse = build_disk_mesh(
        refinement=man["coarse_refinement"], n_electrodes=man["n_electrodes"]
    )
    pre = PreimageSolver(
        coarse,
        protocol=protocol,
        contact_impedance=man["contact_impedance"],
        background_sigma=man["background_sigma"],
        grid=man["grid"],
        tv_lambda=man.get("tv_lambda"),
    )
    frame = MeasurementFrame(
        dataset.voltage[0].astype(np.float64), kind=KIND_DIFFERENCE
    )
    repeats = args.repeats or cfg["bench"]["repeats"]

    def timed(fn):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return times

    initial = pre.reconstruct(frame)
    stages = {
        "preimage": timed(lambda: pre.reconstruct(frame)),
        "sample_plain": timed(
            lambda: sample(
                initial, frame, scorenet, None, schedule,
                _sampler_opts(cfg, "off"), norm,
                np.random.default_rng(cfg["seed"]),
            )
        ),
        "sample_vc_during": timed(
            lambda: sample(
                initial, frame, scorenet, fvcn, schedule,
                _sampler_opts(cfg, "during"), norm,
                np.random.default_rng(cfg["seed"]),
            )
        ),
    }
    out = _out_dir(cfg, "bench")
    with open(out / "bench.csv", "w") as fh:
        fh.write("stage,mean_s,std_s,repeats\n")
        for stage, times in stages.items():
            fh.write(
                f"{stage},{np.mean(times):.6f},{np.std(times):.6f},{repeats}\n"
            )
            print(f"{stage}: {np.mean(times):.3f}s +/- {np.std(times):.3f}s")
    print(f"bench -> {out / 'bench.csv'}")


if __name__ == "__main__":
    sys.exit(main())
