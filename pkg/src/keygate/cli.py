"""Command-line front end.

Subcommands cover the full pipeline: synthesize data, train the reference
autoencoder, train the key-gated decoder, generate images, run the attack
suite, evaluate the watermark, estimate crack time, and summarize a run as
CSV.  Exit codes: 0 success, 1 configuration/usage error, 2 runtime error.

Summary artifacts (summary JSON, reports.jsonl, report.csv) carry no wall
times, so a rerun of the same config is byte-identical; timing lives in
timings.json and trace files only.  The key is read from --key or the
KEYGATE_KEY environment variable and is never logged or written.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import fileio, metrics, watermark as wm
from .data import DatasetSpec, generate_dataset, split
from .errors import ConfigurationError, KeygateError, KeyFormatError
from .fileio import RunConfig, load_run_config
from .keys import FuserKey, crack_time
from .model import ArchConfig, StructureConfig
from .training import TrainHParams, train_gated, train_reference

KEY_ENV_VAR = "KEYGATE_KEY"


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the CLI contract."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="keygate", description="Key-gated generative decoding pipeline.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p: _Parser, key: bool = False) -> None:
        p.add_argument("--config", help="run config file (key = value lines)")
        p.add_argument("--out", help="run directory (overrides config out_dir)")
        p.add_argument("--seed", type=int, help="override config seed")
        if key:
            p.add_argument("--key", help=f"32-hex fuser key (or set {KEY_ENV_VAR})")

    p = sub.add_parser("gen-data", help="synthesize the image dataset")
    common(p)
    p.add_argument("--count", type=int, help="override dataset_count")

    p = sub.add_parser("train-ref", help="train the frozen reference autoencoder")
    common(p)
    p.add_argument("--steps", type=int, help="override ref_steps")

    p = sub.add_parser("train-pcdiff", help="train the key-gated decoder on a frozen reference")
    common(p, key=True)
    p.add_argument("--steps", type=int, help="override gate_steps")

    p = sub.add_parser("generate", help="decode latents to PPM images with a key")
    common(p, key=True)
    p.add_argument("--count", type=int, default=8, help="number of images")
    p.add_argument("--no-fusers", action="store_true", help="bypass fusers (degraded output)")

    p = sub.add_parser("attack", help="evaluate wrong-key / no-fuser / removal / restoration attacks")
    common(p, key=True)
    p.add_argument("--budget", type=int, help="brute-force trials (default: exhaustive)")

    p = sub.add_parser("watermark-eval", help="watermark bit accuracy through both decode paths")
    common(p, key=True)
    p.add_argument("--payloads", type=int, default=100, help="number of random payloads")

    p = sub.add_parser("crack-time", help="crack-space size and exhaustive search time")
    p.add_argument("--m", type=int, required=True, help="added mid blocks")
    p.add_argument("--n", type=int, required=True, help="added up/down pairs")
    p.add_argument("--t-test", type=float, required=True, help="seconds per hypothesis test")

    p = sub.add_parser("report", help="summarize a completed run as CSV")
    p.add_argument("--in", dest="run_dir", required=True, help="run directory")
    return parser


# ------------------------------------------------------------------ helpers
def _config(args) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.dataset_seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_key(args) -> FuserKey:
    raw = getattr(args, "key", None)
    source = "--key"
    if raw is None:
        raw = os.environ.get(KEY_ENV_VAR)
        source = f"environment variable {KEY_ENV_VAR}"
    if raw is None:
        raise ConfigurationError(f"no key given: pass --key or set {KEY_ENV_VAR}")
    try:
        return FuserKey.from_hex(raw)
    except KeyFormatError as exc:
        raise ConfigurationError(f"bad value for {source}: {exc}") from None


def _load_dataset(out: Path) -> np.ndarray:
    path = out / "dataset.npz"
    if not path.exists():
        raise ConfigurationError(f"dataset not found at {path}; run gen-data first")
    with np.load(path) as bundle:
        return bundle["images"]


def _load_reference(out: Path):
    path = out / "reference.ckpt"
    if not path.exists():
        raise ConfigurationError(f"reference checkpoint not found at {path}; run train-ref first")
    return fileio.reference_from_checkpoint(fileio.load_checkpoint(path))


def _load_gated(out: Path):
    path = out / "gated.ckpt"
    if not path.exists():
        raise ConfigurationError(f"gated checkpoint not found at {path}; run train-pcdiff first")
    return fileio.gated_from_checkpoint(fileio.load_checkpoint(path))


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_steps_jsonl(path: Path, report) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for record in report.steps:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")


def _deterministic_summary(report) -> dict:
    d = report.deterministic_dict()
    steps = d.pop("steps")
    d["num_steps"] = len(steps)
    d["final_total_loss"] = steps[-1]["total"] if steps else None
    return d


def _eval_latents(cfg: RunConfig, out: Path, reference) -> np.ndarray:
    """Evaluation latents: encoded held-out images, topped up with Gaussians."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 31)))
    want = cfg.eval_latents
    parts = []
    dataset_path = out / "dataset.npz"
    if dataset_path.exists():
        with np.load(dataset_path) as bundle:
            images = bundle["images"]
        _, held = split(images, cfg.train_fraction, cfg.seed)
        if len(held):
            parts.append(reference.encode_np(held[: want // 2]))
    have = sum(len(p) for p in parts)
    if have < want:
        shape = (want - have,) + reference.arch.latent_shape
        parts.append(rng.standard_normal(shape).astype(np.float32))
    return np.concatenate(parts, axis=0)[:want]


# -------------------------------------------------------------- subcommands
def _cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.count is not None:
        cfg.dataset_count = args.count
    cfg.validate()
    out = _out_dir(cfg)
    spec = DatasetSpec(count=cfg.dataset_count, seed=cfg.dataset_seed, height=cfg.image_size, width=cfg.image_size)
    images = generate_dataset(spec)
    np.savez_compressed(out / "dataset.npz", images=images)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    print(f"wrote {len(images)} images to {out / 'dataset.npz'}")
    return 0


def _cmd_train_ref(args) -> int:
    cfg = _config(args)
    if args.steps is not None:
        cfg.ref_steps = args.steps
    cfg.validate()
    out = _out_dir(cfg)
    images = _load_dataset(out)
    train, held = split(images, cfg.train_fraction, cfg.seed)
    hp = TrainHParams(
        learning_rate=cfg.ref_learning_rate,
        steps=cfg.ref_steps,
        batch_size=min(cfg.ref_batch_size, len(train)),
        seed=cfg.seed,
        cycle_weight=cfg.ref_cycle_weight,
        moment_weight=cfg.ref_moment_weight,
    )
    t0 = time.perf_counter()
    arch = ArchConfig(image_size=cfg.image_size)
    model, report = train_reference(train, hp, eval_images=held, arch=arch)
    ckpt = fileio.checkpoint_from_reference(model, {"seed": cfg.seed})
    fileio.save_checkpoint(out / "reference.ckpt", ckpt)
    _write_steps_jsonl(out / "ref_steps.jsonl", report)
    _write_json(out / "ref_summary.json", _deterministic_summary(report))
    _write_json(out / "timings.json", {"train_ref_s": round(time.perf_counter() - t0, 3)})
    print(f"reference trained: held-out PSNR {report.final_psnr:.2f} dB, SSIM {report.final_ssim:.4f}")
    return 0


def _cmd_train_pcdiff(args) -> int:
    cfg = _config(args)
    if args.steps is not None:
        cfg.gate_steps = args.steps
    cfg.validate()
    out = _out_dir(cfg)
    key = _read_key(args)
    reference = _load_reference(out)
    images = _load_dataset(out)
    train, _ = split(images, cfg.train_fraction, cfg.seed)
    config = StructureConfig(m=cfg.structure_m, n=cfg.structure_n, fuser_positions=cfg.fuser_position_tuple())
    hp = TrainHParams(
        learning_rate=cfg.gate_learning_rate,
        steps=cfg.gate_steps,
        batch_size=min(cfg.gate_batch_size, len(train)),
        lambda_mae=cfg.gate_lambda_mae,
        lambda_perceptual=cfg.gate_lambda_perceptual,
        lambda_repulsion=cfg.gate_lambda_repulsion,
        margin_wrong=cfg.gate_margin_wrong,
        band_wrong=cfg.gate_band_wrong,
        margin_absent=cfg.gate_margin_absent,
        gaussian_fraction=cfg.gate_gaussian_fraction,
        seed=cfg.seed,
    )
    t0 = time.perf_counter()
    model, report = train_gated(reference, config, key, train, hp)
    fileio.save_checkpoint(out / "gated.ckpt", fileio.checkpoint_from_gated(model, {"seed": cfg.seed}))
    _write_steps_jsonl(out / "gate_steps.jsonl", report)
    _write_json(out / "gate_summary.json", _deterministic_summary(report))
    timings = json.loads((out / "timings.json").read_text()) if (out / "timings.json").exists() else {}
    timings["train_pcdiff_s"] = round(time.perf_counter() - t0, 3)
    _write_json(out / "timings.json", timings)
    print(f"gated decoder trained ({config.structure_label()}): keyed PSNR vs reference {report.final_psnr:.2f} dB")
    return 0


def _cmd_generate(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    gated = _load_gated(out)
    key = None if args.no_fusers else _read_key(args)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 41)))
    latents = rng.standard_normal((args.count,) + gated.reference.arch.latent_shape).astype(np.float32)
    result = gated.decode_np(latents, key=key, use_fusers=not args.no_fusers)
    img_dir = out / "generated"
    img_dir.mkdir(exist_ok=True)
    for i, image in enumerate(result.images):
        fileio.save_image(img_dir / f"sample_{i:03d}.ppm", image)
    np.save(img_dir / "latents.npy", latents)
    print(f"wrote {len(result.images)} images to {img_dir} (authorized={result.authorized})")
    return 0


def _cmd_attack(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    key = _read_key(args)
    gated = _load_gated(out)
    if not gated.verify_key(key):
        raise ConfigurationError("key does not match the fingerprint in the gated checkpoint")
    latents = _eval_latents(cfg, out, gated.reference)
    reference_images = gated.reference.decode_np(latents)

    reports = [
        atk.authorized_eval(gated, latents, key),
        atk.wrong_key_attack(gated, latents, key, trials=3, seed=cfg.attack_seed),
        atk.remove_fuser_attack(gated, latents),
    ]

    total = crack_time(gated.config.m, gated.config.n, 1.0).combinations
    budget = args.budget if args.budget is not None else total
    best, trace = atk.brute_force_search(
        gated, latents, budget=budget, seed=cfg.attack_seed, key=key, reference_images=reference_images
    )
    with (out / "trace.jsonl").open("w", encoding="utf-8") as fh:
        for rec in trace:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    valid = [r for r in trace if r.valid]
    strict = [r for r in valid if r.hypothesis.removes_anything(gated.config.m, gated.config.n)]
    if strict:
        best_strict = max(strict, key=lambda r: r.psnr)
        reports.append(
            metrics.MetricsReport(
                condition="removal",
                psnr=best_strict.psnr,
                ssim=best_strict.ssim,
                feature_distance=0.0,
                sample_count=len(latents),
            )
        )

    wrong = gated.decode_np(latents, key=atk.sample_wrong_key(np.random.default_rng(cfg.attack_seed), key)).images
    nofuser = gated.decode_np(latents, key=None, use_fusers=False).images
    reports.append(atk.restoration_eval(wrong, reference_images, condition="restored_wrong_key"))
    reports.append(atk.restoration_eval(nofuser, reference_images, condition="restored_no_fuser"))

    metrics.write_reports_jsonl(reports, out / "reports.jsonl")
    mean_trial = float(np.mean([r.seconds for r in valid])) if valid else 0.0
    timings = json.loads((out / "timings.json").read_text()) if (out / "timings.json").exists() else {}
    timings["attack_mean_trial_s"] = round(mean_trial, 6)
    timings["attack_trials"] = len(trace)
    _write_json(out / "timings.json", timings)
    for report in reports:
        print(f"{report.condition:>20}: PSNR {report.psnr:6.2f} dB  SSIM {report.ssim:.4f}")
    if best is not None:
        print(f"best removal hypothesis: {best.label()}")
    return 0


def _cmd_watermark_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    key = _read_key(args)
    gated = _load_gated(out)
    if args.payloads < 1:
        raise ConfigurationError(f"--payloads must be >= 1, got {args.payloads}")
    payloads = [
        wm.WatermarkPayload.random(cfg.watermark_seed * 1_000_000 + i, cfg.watermark_bits, cfg.watermark_replication)
        for i in range(args.payloads)
    ]
    suite = atk.default_attack_suite(cfg.attack_seed)
    shape = gated.reference.arch.latent_shape
    reference_table = wm.robustness_eval(
        payloads, gated.reference.decode_np, gated.reference.encode_np, suite, "reference", latent_shape=shape
    )
    keyed_table = wm.robustness_eval(
        payloads, lambda z: gated.decode_np(z, key=key).images, gated.reference.encode_np, suite, "keyed", latent_shape=shape
    )
    columns = ["none"] + [s.kind for s in suite]
    lines = [",".join(["path"] + columns)]
    for table in (reference_table, keyed_table):
        lines.append(",".join(str(v) for v in table.to_row(columns)))
    text = "\n".join(lines) + "\n"
    (out / "watermark.csv").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def _cmd_crack_time(args) -> int:
    estimate = crack_time(args.m, args.n, args.t_test)
    print(json.dumps(estimate.to_json_dict(), separators=(",", ":")))
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    source = run_dir / "reports.jsonl"
    if not source.exists():
        raise ConfigurationError(f"no reports.jsonl under {run_dir}; run the attack subcommand first")
    reports = []
    for line in source.read_text(encoding="utf-8").splitlines():
        if line.strip():
            d = json.loads(line)
            reports.append(
                metrics.MetricsReport(
                    condition=d["condition"],
                    psnr=d["psnr_db"],
                    ssim=d["ssim"],
                    feature_distance=d["fd_proxy"],
                    sample_count=d["sample_count"],
                )
            )
    out_csv = run_dir / "report.csv"
    metrics.write_reports_csv(reports, out_csv)
    print(out_csv.read_text(encoding="utf-8"), end="")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-ref": _cmd_train_ref,
    "train-pcdiff": _cmd_train_pcdiff,
    "generate": _cmd_generate,
    "attack": _cmd_attack,
    "watermark-eval": _cmd_watermark_eval,
    "crack-time": _cmd_crack_time,
    "report": _cmd_report,
}


def run(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"keygate {args.command}: {exc}", file=sys.stderr)
        return 1
    except KeygateError as exc:
        print(f"keygate {args.command}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"keygate {args.command}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
