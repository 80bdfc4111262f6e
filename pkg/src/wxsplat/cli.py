"""Command-line entry point.

Subcommands: ``synth`` (dataset synthesis), ``train``, ``render``, ``eval``,
``dump`` (per-view decomposition maps), and ``ablate`` (geometry-init
schedule sweep). Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical abort. ``NIMBUS_THREADS`` caps worker threads.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import weathergen
from .gaussians import Camera, quat_normalize, quat_to_rot
from .imaging import psnr, ssim, write_png, write_raw
from .losses import append_log
from .trainer import (
    TrainConfig,
    Trainer,
    apply_overrides,
    config_from_text,
    config_to_text,
    model_from_checkpoint,
    model_view_components,
)
from .validation import DataError, NumericalAbort, worker_count

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> _Parser:
    p = _Parser(prog="wxsplat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="synthesize a degraded multi-view dataset")
    sp.add_argument("--preset", required=True, choices=weathergen.PRESETS + ("clean",))
    sp.add_argument("--scene-seed", type=int, default=0)
    sp.add_argument("--weather-seed", type=int, default=0)
    sp.add_argument("--scene-variant", default="default", choices=("default", "spread"))
    sp.add_argument("--resolution", type=int, default=64)
    sp.add_argument("--views", type=int, default=8)
    sp.add_argument("--out", required=True)
    sp.add_argument("--overwrite", action="store_true")

    tp = sub.add_parser("train", help="run the two-stage optimization on a dataset")
    tp.add_argument("--data", required=True)
    tp.add_argument("--config", default=None, help="flat key=value config file")
    tp.add_argument("--out", required=True)
    tp.add_argument("--disable", action="append", default=[], choices=("ggs", "csm", "plm"))
    tp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    rp = sub.add_parser("render", help="render the clean scene from a camera line")
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--camera", required=True, help="12 whitespace-separated camera fields")
    rp.add_argument("--out", required=True)

    ep = sub.add_parser("eval", help="score a checkpoint against a dataset")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--report", required=True, help="CSV report path; panels go alongside")

    dp = sub.add_parser("dump", help="dump one view's decomposition maps as raw floats")
    dp.add_argument("--checkpoint", required=True)
    dp.add_argument("--data", required=True)
    dp.add_argument("--view", type=int, required=True)
    dp.add_argument("--out", required=True)

    ap = sub.add_parser("ablate", help="geometry-initialization schedule sweep")
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--sweep", default="25,50,100,400", help="comma-separated m_init values")
    ap.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    return p


def _parse_overrides(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override must be KEY=VALUE, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _build_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        cfg = config_from_text(path.read_text(), cfg)
    for name in getattr(args, "disable", []):
        apply_overrides(cfg, {f"{name}.enabled": "false"})
    overrides = _parse_overrides(getattr(args, "override", []))
    apply_overrides(cfg, overrides)
    return cfg


def cmd_synth(args) -> int:
    spec = weathergen.SceneSpec(
        seed=args.scene_seed,
        cam_count=args.views,
        resolution=args.resolution,
        variant=args.scene_variant,
    )
    scene = weathergen.build_scene(spec)
    kinds = "" if args.preset == "clean" else args.preset
    weather = weathergen.WeatherSpec(kinds=kinds, seed=args.weather_seed)
    weathergen.compose_dataset(scene, weather, args.out, overwrite=args.overwrite)
    print(f"wrote dataset: {args.out} ({spec.cam_count} views, preset {args.preset})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _build_config(args)
    data = weathergen.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "INCOMPLETE"
    marker.write_text("training in progress\n")
    (out / "config.txt").write_text(config_to_text(cfg))
    log_path = out / "training_log.csv"
    if log_path.exists():
        log_path.unlink()
    trainer = Trainer(data.views, cfg, out_dir=out)
    try:
        while trainer.iteration < cfg.total_iterations():
            it = trainer.iteration
            report = trainer.step()
            append_log(log_path, it, 1 if it < cfg.m_init else 2, report)
    except NumericalAbort:
        raise
    if cfg.plm_enabled and not trainer.layers:
        trainer._make_layers()
    trainer.save_checkpoint(out / "model.nimc")
    summary = trainer.summary
    (out / "summary.txt").write_text(
        "".join(f"{k} = {v}\n" for k, v in sorted(summary.items()))
        + f"n_gaussians = {len(trainer.cloud)}\n"
        + f"final_loss = {trainer.log_rows[-1][2].total!r}\n"
    )
    marker.unlink()
    print(f"trained {cfg.total_iterations()} iterations -> {out / 'model.nimc'}")
    return EXIT_OK


def cmd_render(args) -> int:
    model = model_from_checkpoint(args.checkpoint)
    parts = args.camera.split()
    if len(parts) != 12:
        raise ValueError(f"camera line needs 12 fields, got {len(parts)}")
    vals = [float(x) for x in parts]
    q = quat_normalize(np.array(vals[3:7])[None, :])[0]
    cam = Camera(
        np.array(vals[0:3]), quat_to_rot(q[None, :])[0], vals[7], vals[8], vals[9],
        int(vals[10]), int(vals[11]),
    )
    img = model.render_clean(cam)
    write_png(args.out, np.clip(img, 0.0, 1.0))
    print(f"wrote render: {args.out}")
    return EXIT_OK


def _gray3(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.repeat(x[:, :, None], 3, axis=2)


def cmd_eval(args) -> int:
    model = model_from_checkpoint(args.checkpoint)
    data = weathergen.load_dataset(args.data)
    for v in data.views:
        probe = model.layers.get(v.view_id)
        if probe is not None and probe.residual.shape != v.image.shape:
            raise DataError(
                f"checkpoint/view resolution mismatch on view {v.view_id}: "
                f"{probe.residual.shape} vs {v.image.shape}"
            )
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in data.views:
        buf = model_view_components(model, v)
        clean_render = np.clip(buf.i_hat, 0.0, 1.0)
        ref = data.clean[v.view_id]
        rows.append((v.view_id, psnr(clean_render, ref), ssim(clean_render, ref)))
        layer = model.layers.get(v.view_id)
        residual = layer.residual if layer is not None else np.zeros_like(v.image)
        panel = np.concatenate(
            [
                v.image,
                clean_render,
                ref,
                _gray3(buf.t_map),
                np.clip(buf.p_map, 0.0, 1.0),
                np.clip(residual, 0.0, 1.0),
            ],
            axis=1,
        )
        write_png(report_path.parent / f"panel_{v.view_id}.png", panel)
    with open(report_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["view", "psnr", "ssim"])
        for vid, p_, s_ in rows:
            w.writerow([vid, repr(p_), repr(s_)])
        mean_p = float(np.mean([r[1] for r in rows]))
        mean_s = float(np.mean([r[2] for r in rows]))
        w.writerow(["mean", repr(mean_p), repr(mean_s)])
    print(f"eval: mean PSNR {mean_p:.2f} dB, mean SSIM {mean_s:.4f} over {len(rows)} views")
    return EXIT_OK


def cmd_dump(args) -> int:
    model = model_from_checkpoint(args.checkpoint)
    data = weathergen.load_dataset(args.data)
    if not 0 <= args.view < len(data.views):
        raise DataError(f"view index {args.view} out of range (0..{len(data.views) - 1})")
    view = data.views[args.view]
    buf = model_view_components(model, view)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    layer = model.layers.get(view.view_id)
    residual = layer.residual if layer is not None else np.zeros_like(view.image)
    write_raw(out / "i_hat.nimf", buf.i_hat)
    write_raw(out / "t.nimf", buf.t_map[:, :, None])
    write_raw(out / "p.nimf", buf.p_map)
    write_raw(out / "r.nimf", residual)
    write_raw(out / "i_con.nimf", buf.i_con)
    write_raw(out / "i_deg.nimf", buf.i_deg)
    print(f"wrote decomposition maps for view {args.view} -> {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    data = weathergen.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sweep = [int(x) for x in args.sweep.split(",") if x.strip()]
    if not sweep:
        raise ValueError("empty m_init sweep")
    overrides = _parse_overrides(args.override)
    rows = []
    for m_init in sweep:
        cfg = TrainConfig()
        apply_overrides(cfg, overrides)
        cfg.m_init = m_init
        cfg.__post_init__()
        trainer = Trainer(data.views, cfg)
        model = trainer.run()
        scores = []
        for v in data.views:
            img = np.clip(model.render_clean(v.cam), 0.0, 1.0)
            scores.append((psnr(img, data.clean[v.view_id]), ssim(img, data.clean[v.view_id])))
        mean_p = float(np.mean([s[0] for s in scores]))
        mean_s = float(np.mean([s[1] for s in scores]))
        rows.append((m_init, mean_p, mean_s, trainer.log_rows[-1][2].total))
        print(f"m_init {m_init}: PSNR {mean_p:.2f} dB, SSIM {mean_s:.4f}")
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["m_init", "psnr", "ssim", "final_loss"])
        for r in rows:
            w.writerow([r[0], repr(r[1]), repr(r[2]), repr(r[3])])
    print(f"wrote {out / 'ablation.csv'}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "dump": cmd_dump,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    worker_count()  # validate NIMBUS_THREADS up front
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except NumericalAbort as exc:
        print(f"wxsplat: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as exc:
        print(f"wxsplat: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"wxsplat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
