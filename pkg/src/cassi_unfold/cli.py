"""Command-line entry point tying the pipeline together.

Subcommands: simulate | reconstruct | train | verify | metrics.
Exit codes: 0 success, 1 validation or verification failure, 2 usage
error.  Every input path is checked before any computation starts, and
all file outputs are written atomically by the underlying helpers.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .autodiff import AutodiffError
from .cassi import (CassiError, HsiCube, Mask, SensingOperator,
                    add_shot_noise, forward_phi, load_hsc, save_hsc,
                    shift_cube)
from .denoiser import DenoiserError
from .metrics import MetricsError, psnr, ssim
from .training import TrainConfig, TrainError, synth_dataset, train
from .unfolding import Model, UnfoldError
from .verify import format_report, run_suite, suite_passed

__all__ = ["RunConfig", "main"]


@dataclasses.dataclass
class RunConfig:
    """Parsed invocation: the chosen subcommand plus its options."""
    subcommand: str
    options: dict

    @classmethod
    def from_namespace(cls, ns: argparse.Namespace) -> "RunConfig":
        opts = vars(ns).copy()
        sub = opts.pop("command")
        return cls(subcommand=sub, options=opts)


class CliError(ValueError):
    pass


def _require_file(path: str, what: str) -> None:
    if not os.path.isfile(path):
        raise CliError(f"{what} file not found: {path}")


def _require_out_dir(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise CliError(f"output directory does not exist: {parent}")


def _load_cube(path: str, what: str) -> np.ndarray:
    _require_file(path, what)
    data = load_hsc(path)
    if data.ndim == 2:
        data = data[:, :, None]
    return data


def _load_plane(path: str, what: str) -> np.ndarray:
    _require_file(path, what)
    data = load_hsc(path)
    if data.ndim != 2:
        raise CliError(f"{what} file must hold a single channel, "
                       f"got shape {data.shape}")
    return data


# ---------------------------------------------------------- subcommands

def cmd_simulate(opts: dict) -> int:
    cube = _load_cube(opts["cube"], "cube")
    mask = _load_plane(opts["mask"], "mask")
    _require_out_dir(opts["out"])
    if mask.shape != cube.shape[:2]:
        raise CliError(f"mask {mask.shape} does not match cube spatial "
                       f"dims {cube.shape[:2]}")
    op = SensingOperator(Mask(mask), cube.shape[2], opts["shift"])
    y = forward_phi(op, shift_cube(HsiCube(cube), opts["shift"]))
    if opts["noise_bits"] is not None:
        y = add_shot_noise(y, opts["noise_bits"], opts["seed"])
    save_hsc(opts["out"], y)
    print(f"n = {y.shape[0] * y.shape[1]}")
    print(f"wrote {opts['out']} ({y.shape[0]} x {y.shape[1]})")
    return 0


def cmd_reconstruct(opts: dict) -> int:
    _require_file(opts["checkpoint"], "checkpoint")
    _require_file(opts["checkpoint"] + ".json", "checkpoint sidecar")
    y = _load_plane(opts["measurement"], "measurement")
    mask = _load_plane(opts["mask"], "mask")
    _require_out_dir(opts["out"])
    model = Model.load(opts["checkpoint"])
    op = SensingOperator(Mask(mask), model.bands, model.shift_step)
    collect = {}
    cube = model.reconstruct(y, op, collect)
    save_hsc(opts["out"], cube.data)
    if opts["json"]:
        print(json.dumps({
            "out": opts["out"],
            "shape": list(cube.data.shape),
            "alpha": collect["alpha"],
            "beta": collect["beta"],
        }))
    else:
        for k, (a, b) in enumerate(zip(collect["alpha"], collect["beta"])):
            print(f"stage {k + 1}: alpha={a:.6g} beta={b:.6g}")
        print(f"wrote {opts['out']} {cube.data.shape}")
    return 0


_CONFIG_DATA_KEYS = ("scenes", "val_scenes", "bands", "noise_bits",
                     "share_denoiser")


def _merge_train_options(opts: dict) -> dict:
    """defaults < config file < explicit flags."""
    merged = {f.name: f.default
              for f in dataclasses.fields(TrainConfig)}
    merged.update({"scenes": 12, "val_scenes": 4, "bands": 8,
                   "noise_bits": None, "share_denoiser": False})
    if opts["config"] is not None:
        _require_file(opts["config"], "config")
        with open(opts["config"]) as fh:
            overrides = json.load(fh)
        unknown = set(overrides) - set(merged)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        merged.update(overrides)
    flag_map = {
        "lr": "lr", "epochs": "epochs", "batch": "batch_size",
        "patch": "patch_size", "seed": "seed", "shift": "shift_step",
        "stages": "stages", "channels": "channels", "window": "window",
        "precision": "precision", "scenes": "scenes",
        "val_scenes": "val_scenes", "bands": "bands",
        "noise_bits": "noise_bits",
    }
    for flag, key in flag_map.items():
        if opts.get(flag) is not None:
            merged[key] = opts[flag]
    return merged


def cmd_train(opts: dict) -> int:
    merged = _merge_train_options(opts)
    _require_out_dir(opts["out"])
    data_opts = {k: merged.pop(k) for k in _CONFIG_DATA_KEYS}
    cfg = TrainConfig(**merged)
    log_path = opts["log"] or opts["out"] + ".log.jsonl"
    _require_out_dir(log_path)
    scenes = synth_dataset(data_opts["scenes"], cfg.patch_size,
                           cfg.patch_size, data_opts["bands"],
                           seed=cfg.seed + 1)
    val = synth_dataset(data_opts["val_scenes"], cfg.patch_size,
                        cfg.patch_size, data_opts["bands"],
                        seed=cfg.seed + 2)
    model, history = train(cfg, scenes, val,
                           noise_bits=data_opts["noise_bits"],
                           checkpoint_path=opts["out"], log_path=log_path,
                           share_denoiser=data_opts["share_denoiser"])
    last = history[-1]
    print(f"trained {cfg.epochs} epochs on {len(scenes)} scenes "
          f"({model.weights.n_scalars()} weights)")
    print(f"epoch-0 loss {history[0]['loss']:.6g}, "
          f"final loss {last['loss']:.6g}")
    if last["val_psnr"] is not None:
        print(f"validation: psnr {last['val_psnr']:.2f} dB, "
              f"ssim {last['val_ssim']:.4f}")
    print(f"checkpoint: {opts['out']}")
    print(f"log: {log_path}")
    return 0


def cmd_verify(opts: dict) -> int:
    results = run_suite(seed=opts["seed"],
                        fault_inject=opts["fault_inject"],
                        instances=opts["instances"])
    if opts["json"]:
        print(json.dumps({
            "seed": opts["seed"],
            "passed": suite_passed(results),
            "groups": [dataclasses.asdict(r) for r in results],
        }))
    else:
        print(format_report(results, opts["seed"]))
    return 0 if suite_passed(results) else 1


def cmd_metrics(opts: dict) -> int:
    pred = _load_cube(opts["pred"], "prediction")
    truth = _load_cube(opts["truth"], "truth")
    p = psnr(pred, truth)
    s = ssim(pred, truth)
    if opts["json"]:
        print(json.dumps({
            "psnr_db": p,
            "ssim": s,
            "per_band_psnr": [psnr(pred[:, :, i], truth[:, :, i])
                              for i in range(pred.shape[2])],
            "per_band_ssim": [ssim(pred[:, :, i], truth[:, :, i])
                              for i in range(pred.shape[2])],
        }))
    else:
        print(f"PSNR: {p:.4f} dB")
        print(f"SSIM: {s:.4f}")
    return 0


# --------------------------------------------------------------- parser

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cassi-unfold",
        description="Snapshot spectral imaging: simulate measurements, "
                    "train and run unfolding reconstructions.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate",
                       help="apply the sensing operator to a cube file")
    p.add_argument("--cube", required=True, help="input cube (HSC1)")
    p.add_argument("--mask", required=True, help="mask plane (HSC1)")
    p.add_argument("--shift", type=int, default=2,
                   help="dispersion step in pixels per band")
    p.add_argument("--noise-bits", type=int, default=None,
                   help="simulate shot noise at this bit depth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="measurement output path")

    p = sub.add_parser("reconstruct",
                       help="reconstruct a cube from a measurement")
    p.add_argument("--measurement", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("train",
                       help="train on synthetic scenes, write a checkpoint")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None,
                   help="metrics log path (default: <out>.log.jsonl)")
    p.add_argument("--config", default=None,
                   help="JSON file with option overrides; explicit flags "
                        "take precedence over it")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--shift", type=int, default=None)
    p.add_argument("--stages", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--precision", choices=("double", "single"),
                   default=None)
    p.add_argument("--bands", type=int, default=None)
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--val-scenes", type=int, default=None)
    p.add_argument("--noise-bits", type=int, default=None)

    p = sub.add_parser("verify",
                       help="run the property suite and report per group")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=None,
                   help="cap the instance count per group")
    p.add_argument("--fault-inject", action="store_true",
                   help="flip the projection residual sign; the suite "
                        "must then fail")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("metrics",
                       help="compare two cube files")
    p.add_argument("pred", help="reconstruction (HSC1)")
    p.add_argument("truth", help="reference (HSC1)")
    p.add_argument("--json", action="store_true")
    return parser


_DISPATCH = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "train": cmd_train,
    "verify": cmd_verify,
    "metrics": cmd_metrics,
}

_FAILURES = (CliError, CassiError, UnfoldError, DenoiserError, TrainError,
             MetricsError, AutodiffError, OSError, json.JSONDecodeError)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    run = RunConfig.from_namespace(args)
    try:
        return _DISPATCH[run.subcommand](run.options)
    except _FAILURES as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
