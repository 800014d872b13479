"""Command-line front end.

Each subcommand runs one pipeline stage and writes into ``--out``; ``pipeline``
chains all of them. Exit status is 0 on success, 2 for usage, configuration
or file problems, and 3 for runtime failures such as non-finite values.
"""

from __future__ import annotations

import argparse
import csv
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .data import CLASS_NAMES, DefectClass, build_dataset, read_dataset, write_dataset
from .denoiser import denoiser_fn
from .diffusion import DdpmState, SamplerConfig, sample, train_ddpm
from .errors import ConfigError, DdpmMocoError, FormatError, ParameterError
from .evaluation import (
    FeatureGaussian,
    LinearProbe,
    evaluate_probe,
    extract_features,
    fit_probe,
    frechet_distance,
    inception_style_score,
)
from .io import load_dft, load_sections, save_dft, save_pgm, save_sections
from .moco import MocoState, train_moco

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    """Bad invocation or missing input; maps to exit status 2."""


def _fmt(x: float) -> str:
    return repr(float(x))


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.out
    if out is None:
        raise UsageError("no output directory: pass --out or set out= in the config")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dataset(args, cfg: RunConfig):
    root = getattr(args, "data", None) or cfg.data
    if root is None:
        raise UsageError("no dataset: pass --data or set data= in the config")
    root = Path(root)
    if not (root / "dataset.dft").exists() and not (root / "labels.csv").exists():
        raise UsageError(f"no dataset found at {root}")
    return read_dataset(root, cfg.train_frac)


def _load(path: str | Path, kind: str) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{kind} checkpoint {path} does not exist")
    return load_sections(path)


class _Log:
    """``step,loss,lr`` rows to stdout and to a CSV file."""

    def __init__(self, path: Path, append: bool = False, header: Sequence[str] = ()):
        fresh = not (append and path.exists())
        self.fh = open(path, "a" if not fresh else "w")
        if fresh:
            for line in header:
                self.fh.write(f"# {line}\n")
            self.fh.write("step,loss,lr\n")
            print("step,loss,lr")

    def __call__(self, step: int, loss: float, lr: float, *_) -> None:
        row = f"{step},{_fmt(loss)},{_fmt(lr)}"
        self.fh.write(row + "\n")
        print(row)

    def close(self) -> None:
        self.fh.close()


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    ds = build_dataset(cfg.counts, cfg.H, cfg.seed, cfg.train_frac)
    write_dataset(ds, out)
    for c in DefectClass:
        n_train = int(np.sum(ds.labels[ds.train_idx] == c))
        n_test = int(np.sum(ds.labels[ds.test_idx] == c))
        print(f"class={c.label} total={n_train + n_test} train={n_train} test={n_test}")
    return EXIT_OK


def cmd_train_ddpm(args, cfg: RunConfig) -> int:
    cls = DefectClass.parse(args.cls)
    ds = _dataset(args, cfg)
    out = _out_dir(args, cfg)
    images, _ = ds.subset("train", cls)
    steps = cfg.ddpm_steps
    if args.epochs is not None:
        steps = args.epochs * max(1, len(images) // min(cfg.ddpm_batch, len(images)))
    if args.steps is not None:
        steps = args.steps
    dcfg = cfg.replace(ddpm_steps=steps).validate().ddpm()
    state = DdpmState.from_sections(_load(args.resume, "diffusion")) if args.resume else None
    ckpt = out / f"ddpm_{cls.label}.dft"
    log = _Log(out / f"ddpm_{cls.label}_log.csv", append=state is not None, header=[f"class={cls.label}"])
    try:
        state = train_ddpm(images, dcfg, cfg.seed, state, on_step=log, until=args.until)
    finally:
        log.close()
    meta = {"kind": "ddpm", "class": cls.label, "seed": cfg.seed, **cfg.dump()}
    save_sections(ckpt, state.sections(), meta)
    print(f"checkpoint={ckpt} step={state.step}")
    return EXIT_OK


def _sample_summary(mode: str, raw: np.ndarray) -> str:
    return (
        f"mode={mode} raw_min={_fmt(raw.min())} raw_max={_fmt(raw.max())} "
        f"clipped_frac={_fmt(np.mean(np.abs(raw) > 1.0))} mean={_fmt(np.clip(raw, -1, 1).mean())}"
    )


def _write_samples(out: Path, images: np.ndarray) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        save_pgm(out / f"sample_{i}.pgm", img[0])
    save_dft(out / "samples.dft", images)


def cmd_sample(args, cfg: RunConfig) -> int:
    s = _load(args.checkpoint, "diffusion")
    state = DdpmState.from_sections(s)
    out = _out_dir(args, cfg)
    n = cfg.n_samples if args.n is None else args.n
    if n < 0:
        raise UsageError("--n must be non-negative")
    modes = ["standard", "literal_eq3"] if args.sampler == "both" else [args.sampler or cfg.sampler_mode]
    eps_fn = denoiser_fn(state.params, state.sched.T)
    dtype = next(iter(state.params.values())).dtype
    raws = {}
    for mode in modes:
        sc = SamplerConfig(mode, cfg.sigma_mode)
        images, raw = sample(eps_fn, state.sched, sc, n, np.random.default_rng([cfg.seed, 4]), cfg.H, dtype, return_raw=True)
        _write_samples(out / mode if len(modes) > 1 else out, images)
        raws[mode] = raw
        print(_sample_summary(mode, raw))
    if len(modes) > 1 and n:
        a, b = (np.clip(raws[m], -1, 1) for m in modes)
        print(f"divergence_mean_abs={_fmt(np.abs(a - b).mean())} divergence_max_abs={_fmt(np.abs(a - b).max())}")
    return EXIT_OK


def cmd_train_moco(args, cfg: RunConfig) -> int:
    if args.loss:
        cfg = cfg.replace(loss_mode=args.loss).validate()
    ds = _dataset(args, cfg)
    out = _out_dir(args, cfg)
    images, _ = ds.subset("train")
    extra = [load_dft(p) for p in args.extra or []]
    if extra:
        images = np.concatenate([images, *[e.astype(images.dtype) for e in extra]])
    ccfg = cfg.contrast()
    ckpt = out / f"moco_{ccfg.loss_mode}.dft"
    state = MocoState.from_sections(_load(args.resume, "contrastive"), ccfg) if args.resume else None
    warmup = ccfg.K // ccfg.n
    log = _Log(out / f"moco_{ccfg.loss_mode}_log.csv", append=state is not None, header=[f"loss_mode={ccfg.loss_mode}", f"warmup_steps={warmup}"])
    try:
        state = train_moco(images, ccfg, cfg.seed, state, on_step=log, until=args.until)
    finally:
        log.close()
    save_sections(ckpt, state.sections(), {"kind": "moco", **cfg.dump()})
    print(f"checkpoint={ckpt} step={state.step} images={len(images)}")
    return EXIT_OK


def _encoder(path) -> dict[str, np.ndarray]:
    s = _load(path, "contrastive")
    enc = {k[len("theta_q/") :]: v for k, v in s.items() if k.startswith("theta_q/")}
    if not enc:
        raise UsageError(f"{path} holds no encoder parameters")
    return enc


def _write_metrics(path: Path, report) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "ap"])
        for name, p, r, ap in zip(CLASS_NAMES, report.precision, report.recall, report.aps):
            w.writerow([name, _fmt(p), _fmt(r), _fmt(ap)])


def cmd_probe(args, cfg: RunConfig) -> int:
    ds = _dataset(args, cfg)
    out = _out_dir(args, cfg)
    enc = _encoder(args.checkpoint)
    xtr, ytr = ds.subset("train")
    xte, yte = ds.subset("test")
    probe = fit_probe(extract_features(enc, xtr), ytr, cfg.probe_epochs, cfg.probe_lr, cfg.seed)
    save_sections(out / "probe.dft", probe.sections(), {"kind": "probe", **cfg.dump()})
    report = evaluate_probe(probe, extract_features(enc, xte), yte)
    _write_metrics(out / "probe_metrics.csv", report)
    for name, ap in zip(CLASS_NAMES, report.aps):
        print(f"class={name} ap={_fmt(ap)}")
    print(f"map={_fmt(report.map)} accuracy={_fmt(report.accuracy)}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    ds = _dataset(args, cfg)
    out = _out_dir(args, cfg)
    enc = _encoder(args.checkpoint)
    probe = LinearProbe.from_sections(_load(args.probe, "probe"))
    xtr, _ = ds.subset("train")
    xte, yte = ds.subset("test")
    f_test = extract_features(enc, xte)
    report = evaluate_probe(probe, f_test, yte)
    _write_metrics(out / "metrics.csv", report)
    for name, curve in zip(CLASS_NAMES, report.curves):
        with open(out / f"pr_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "precision", "recall"])
            w.writerows([_fmt(t), _fmt(p), _fmt(r)] for t, p, r in zip(curve.thresholds, curve.precision, curve.recall))
    f_real = extract_features(enc, xtr)
    if args.samples:
        generated = np.concatenate([load_dft(p) for p in args.samples])
        f_gen, reference = extract_features(enc, generated), "samples"
    else:
        f_gen, reference = f_test, "real_test"
    fid = frechet_distance(FeatureGaussian.fit(f_gen), FeatureGaussian.fit(f_real))
    score = inception_style_score(probe.predict_proba(f_gen))
    summary = {"map": report.map, "fid": fid, "is": score, "accuracy": report.accuracy}
    lines = [f"{k}={_fmt(v)}" for k, v in summary.items()] + [f"fid_source={reference}"]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_pipeline(args, cfg: RunConfig) -> int:
    """gen-data -> train-ddpm (per class) -> sample -> train-moco -> probe -> eval."""
    root = _out_dir(args, cfg)
    common = ["--seed", str(cfg.seed)] + (["--config", args.config] if args.config else [])

    def run(*argv: str) -> None:
        code = main([*argv, *common])
        if code != EXIT_OK:
            raise _StageFailed(code)

    data = root / "data"
    run("gen-data", "--out", str(data))
    samples = []
    for name in CLASS_NAMES:
        run("train-ddpm", "--data", str(data), "--class", name, "--out", str(root / "ddpm"))
        run("sample", "--checkpoint", str(root / "ddpm" / f"ddpm_{name}.dft"), "--out", str(root / "samples" / name))
        samples.append(str(root / "samples" / name / "samples.dft"))
    loss = args.loss or cfg.loss_mode
    run("train-moco", "--data", str(data), "--out", str(root / "moco"), "--loss", loss, *[a for s in samples for a in ("--extra", s)])
    ckpt = str(root / "moco" / f"moco_{loss}.dft")
    run("probe", "--data", str(data), "--checkpoint", ckpt, "--out", str(root / "probe"))
    run("eval", "--data", str(data), "--checkpoint", ckpt, "--probe", str(root / "probe" / "probe.dft"), "--out", str(root / "eval"), *[a for s in samples for a in ("--samples", s)])
    return EXIT_OK


class _StageFailed(Exception):
    def __init__(self, code: int):
        self.code = code


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddpm-moco", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="overrides seed= from the config")
    common.add_argument("--out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic defect dataset")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-ddpm", parents=[common], help="train one denoiser on one class")
    p.add_argument("--data")
    p.add_argument("--class", dest="cls", required=True, help="class name or code")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--steps", type=int, help="total optimizer steps (overrides ddpm_steps)")
    p.add_argument("--epochs", type=int, help="total epochs over the class's training images")
    p.add_argument("--until", type=int, help="stop after this many steps; the checkpoint can be resumed")
    p.set_defaults(func=cmd_train_ddpm)

    p = sub.add_parser("sample", parents=[common], help="draw images from a trained denoiser")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--sampler", choices=["standard", "literal_eq3", "both"])
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train-moco", parents=[common], help="momentum-contrast pretraining")
    p.add_argument("--data")
    p.add_argument("--loss", choices=["original", "improved"])
    p.add_argument("--extra", action="append", help="additional unlabeled images (DFT1 batch); repeatable")
    p.add_argument("--resume")
    p.add_argument("--until", type=int, help="stop after this many steps; the checkpoint can be resumed")
    p.set_defaults(func=cmd_train_moco)

    p = sub.add_parser("probe", parents=[common], help="train a linear probe on a frozen encoder")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", parents=[common], help="PR curves, AP, mAP, FID and IS")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--samples", action="append", help="generated images (DFT1 batch); repeatable")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", parents=[common], help="run every stage end to end")
    p.add_argument("--loss", choices=["original", "improved"])
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        return args.func(args, cfg)
    except _StageFailed as exc:
        return exc.code
    except (UsageError, ConfigError, ParameterError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DdpmMocoError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
