"""Experiment runner: single attacks, parameter sweeps and FL simulations.

    ldprecon attack [--config PATH] [--set key=value ...] [--seed N] [--out DIR]
    ldprecon sweep  [...] [--jobs N]     (needs sweep_axis and sweep_values)
    ldprecon flsim  [...]

Exit status: 0 on success, 1 for configuration errors, 2 for runtime errors.
"""

import argparse
import csv
import io
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ldprecon import flsim
from ldprecon.attack import quantize, random_guess, run_attack
from ldprecon.config import SWEEP_AXES, load_config, require
from ldprecon.core import SeededRng
from ldprecon.data import SubjectSpec, extract_subject, gen_synthetic_batch, make_mask_provider, save_ppm
from ldprecon.exceptions import ConfigError, LdpReconError
from ldprecon.ldp import protect
from ldprecon.metrics import DIFF_BIN_LABELS, psnr, separation_ratio
from ldprecon.model import TargetModel, forward_backward, init_params

SWEEP_COLUMNS = ("axis", "value", "seed", "mse", "psnr", "psnr_mean_mse", "ssim",
                 "separation_ratio", "grad_norm", "wall_time_s")
ACCURACY_COLUMNS = ("seed", "round", "accuracy_attack", "accuracy_no_attack", "delta")
DIFF_COLUMNS = ("seed", "users", "mode") + DIFF_BIN_LABELS


@dataclass
class Trial:
    """One victim batch pushed through the model, LDP and the attack."""

    result: object
    batch: object
    masked: object
    grad_norm: float
    random_psnr: float


def run_trial(cfg, seed, structure=None, sigma=None):
    """Generate a victim batch from ``seed`` and attack its protected upload.

    ``sigma`` overrides the noise scale derived from the privacy settings.
    """
    rng = SeededRng(seed)
    st = cfg.structure() if structure is None else structure
    target = TargetModel(st.n_pixels, cfg.hidden)
    params = init_params(st, target, rng)
    batch = gen_synthetic_batch(rng, cfg.batch, *cfg.image_shape)
    provider = (make_mask_provider("oracle") if cfg.mask == "oracle" else
                make_mask_provider(cfg.mask, threshold=cfg.mask_threshold))
    masked = extract_subject(batch, provider)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        _, bundle = forward_backward(st, target, params, batch.images, batch.labels, masked.masks)
    protected = protect(bundle, cfg.ldp(), rng, sigma=sigma)
    result = run_attack(protected, st, cfg.attack(), reference=masked.images)
    guess = random_guess(rng, masked.images.shape)
    rand = float(np.mean([psnr(g, r) for g, r in zip(guess, masked.images)]))
    return Trial(result, batch, masked, bundle.norm(), rand)


# --- attack -------------------------------------------------------------------


def cmd_attack(cfg, out):
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    trial = run_trial(cfg, cfg.seed)
    elapsed = time.perf_counter() - t0
    res = trial.result
    stages = {
        "ground_truth": trial.batch.images,
        "masked": trial.masked.images,
        "raw": quantize(res.aligned_images),
        "optimized": quantize(res.optimized_images),
        "final": res.final_images,
    }
    for name, images in stages.items():
        for i, img in enumerate(images):
            save_ppm(out / f"{name}_{i:03d}.ppm", img)
    (out / "quality.csv").write_text(res.to_csv())
    q = res.quality
    lines = ["# run manifest", cfg.to_text().rstrip("\n"),
             "# results",
             f"sigma_hat={res.sigma_hat!r}",
             f"sigma_hat_variance_estimate={res.sigma_hat_var!r}",
             f"reverse_units={','.join(str(int(u)) for u in res.reverse_hat)}",
             f"separation_ratio={separation_ratio(res)!r}",
             f"mean_psnr={q.mean_psnr!r}",
             f"psnr_of_mean_mse={q.psnr_of_mean_mse!r}",
             f"mean_ssim={q.mean_ssim!r}",
             f"random_guess_psnr={trial.random_psnr!r}"]
    lines += [f"error={e}" for e in res.errors]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    timings = dict(res.timings, total=elapsed)
    (out / "timings.txt").write_text("".join(f"{k}={v:.6f}\n" for k, v in timings.items()))
    print(f"mean PSNR {q.mean_psnr:.2f} dB (random guess {trial.random_psnr:.2f} dB), "
          f"sigma_hat {res.sigma_hat:.6g}; outputs in {out}")
    return 0


# --- sweep --------------------------------------------------------------------

_AXIS_KEYS = {"epsilon": "epsilon", "clip_bound": "clip_bound", "batch": "batch",
              "units": "units", "rounds": "rounds"}


def _axis_value(axis, v):
    return int(v) if axis in ("batch", "units", "rounds") else float(v)


def sweep_point(cfg, axis, value, seed):
    """One sweep row (as a tuple in SWEEP_COLUMNS order)."""
    point_cfg = cfg.with_values(**{_AXIS_KEYS[axis]: _axis_value(axis, value)})
    t0 = time.perf_counter()
    trial = run_trial(point_cfg, seed)
    wall = time.perf_counter() - t0
    q = trial.result.quality
    return (axis, _axis_value(axis, value), seed, q.mean_mse, q.mean_psnr, q.psnr_of_mean_mse,
            q.mean_ssim, separation_ratio(trial.result), trial.grad_norm, wall)


def _sweep_point_star(args):
    return sweep_point(*args)


def run_sweep(cfg, jobs=1):
    require(cfg, "sweep_axis", "sweep_values")
    axis = cfg.sweep_axis
    points = [(cfg, axis, v, cfg.seed + j) for v in cfg.sweep_values for j in range(cfg.sweep_seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_point_star, points))
    return [sweep_point(*p) for p in points]


def sweep_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([r[0], _fmt(r[1]), r[2], *(f"{v:.10g}" for v in r[3:9]), f"{r[9]:.3f}"])
    return buf.getvalue()


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def cmd_sweep(cfg, out, jobs=1):
    rows = run_sweep(cfg, jobs)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep_{cfg.sweep_axis}.csv"
    path.write_text(sweep_csv(rows))
    for v in cfg.sweep_values:
        sel = [r for r in rows if r[1] == _axis_value(cfg.sweep_axis, v)]
        print(f"{cfg.sweep_axis}={_fmt(_axis_value(cfg.sweep_axis, v))}: "
              f"mean PSNR {np.mean([r[4] for r in sel]):.2f} dB, "
              f"separation {np.mean([r[7] for r in sel]):.3f}")
    print(f"wrote {path}")
    return 0


# --- flsim --------------------------------------------------------------------


@dataclass
class FlSetup:
    fed: object
    params: dict
    users: list


def fl_setup(cfg, seed, n_users):
    shape = (cfg.channels, cfg.fl_height, cfg.fl_width)
    st = cfg.structure(image_shape=shape, K=cfg.fl_units, D_b=cfg.fl_bias_copies)
    target = TargetModel(st.n_pixels, cfg.fl_hidden)
    rng = SeededRng(seed)
    params = init_params(st, target, rng)
    spec = SubjectSpec(size_range=(cfg.fl_subject_min, cfg.fl_subject_max))
    test = gen_synthetic_batch(rng, cfg.fl_test, *shape, spec)
    users = flsim.make_users(rng, n_users, cfg.fl_pool, shape, cfg.batch, cfg.ldp(), spec)
    return FlSetup(flsim.Federation(st, target, test), params, users)


def run_flsim(cfg):
    """Paired accuracy traces (attack on/off) and difference histograms."""
    acc_rows, diff_rows = [], []
    n_max = max(cfg.fl_users)
    for s in range(cfg.fl_seeds):
        seed = cfg.seed + s
        setup = fl_setup(cfg, seed, n_max)
        runs = {}
        for attack in (True, False):
            runs[attack] = flsim.train(setup.users, cfg.fl_rounds, cfg.fl_lr, setup.fed,
                                       setup.params, SeededRng(seed + 10_000), attack=attack,
                                       tau_small=cfg.tau_small)
        for r in range(cfg.fl_rounds):
            a, b = runs[True].accuracy[r], runs[False].accuracy[r]
            acc_rows.append((seed, r, a, b, a - b))
        for n in cfg.fl_users:
            for mode, relative in (("relative", True), ("absolute", False)):
                props = flsim.gradient_difference(setup.users[:n], setup.fed, setup.params,
                                                  seed + 20_000, relative=relative,
                                                  tau_small=cfg.tau_small)
                diff_rows.append((seed, n, mode, *props))
    return acc_rows, diff_rows


def cmd_flsim(cfg, out):
    acc_rows, diff_rows = run_flsim(cfg)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ACCURACY_COLUMNS)
    for seed, r, a, b, d in acc_rows:
        w.writerow([seed, r, f"{a:.6f}", f"{b:.6f}", f"{d:.6f}"])
    (out / "flsim_accuracy.csv").write_text(buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DIFF_COLUMNS)
    for row in diff_rows:
        w.writerow([*row[:3], *(f"{p:.6f}" for p in row[3:])])
    (out / "flsim_diff.csv").write_text(buf.getvalue())
    if acc_rows:
        last = [row for row in acc_rows if row[1] == cfg.fl_rounds - 1]
        print(f"final accuracy: attack {np.mean([r[2] for r in last]):.4f}, "
              f"no attack {np.mean([r[3] for r in last]):.4f}")
    print(f"wrote {out / 'flsim_accuracy.csv'} and {out / 'flsim_diff.csv'}")
    return 0


# --- entry point -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="ldprecon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (("attack", "reconstruct one protected batch"),
                        ("sweep", "vary one parameter over several seeds"),
                        ("flsim", "federated training impact")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="flat key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", type=Path, help="output directory (overrides the config)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.out is not None:
            overrides.append(f"out={args.out}")
        cfg = load_config(args.config, overrides)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command == "sweep":
            require(cfg, "sweep_axis", "sweep_values")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = Path(cfg.out)
    try:
        if args.command == "attack":
            return cmd_attack(cfg, out)
        if args.command == "sweep":
            return cmd_sweep(cfg, out, args.jobs)
        return cmd_flsim(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (LdpReconError, ValueError, OSError, FloatingPointError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
