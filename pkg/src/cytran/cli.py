"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 malformed input file, 3 validation
failure (bad values, missing files, failed self-check), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import (
    PHASES, FormatError, PhantomSpec, Volume, generate_phantom_triple, load_volume, save_volume,
)
from .tensor import NumericError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3, 4
_PATIENT = re.compile(r"^patient_(\d+)_(native|venous|arterial)\.cytv$")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_config(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"config line {n}: expected 'key = value', got {line!r}")
        out[key.strip()] = value.strip()
    return out


def _patient_seeds(seed: int, count: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def phantom_files(directory: str | Path, phase: str) -> list[Path]:
    files = []
    for p in Path(directory).iterdir():
        m = _PATIENT.match(p.name)
        if m and m.group(2) == phase:
            files.append((int(m.group(1)), p))
    return [p for _, p in sorted(files)]


# ---------------------------------------------------------------- commands

def cmd_phantom_gen(args) -> int:
    from .registration import save_field

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = PhantomSpec(
        image_size=args.size, depth=args.depth, noise_sigma=args.noise, misalignment=args.misalign
    )
    for i, seed in enumerate(_patient_seeds(args.seed, args.count)):
        triple = generate_phantom_triple(spec, seed)
        for phase in PHASES:
            save_volume(triple[phase], out / f"patient_{i:03d}_{phase}.cytv")
        for phase, field in triple.fields.items():
            save_field(field, out / f"patient_{i:03d}_field_{phase}.cyck")
    print(f"wrote {args.count} phantom triples to {out}")
    return EXIT_OK


def _stack(directory, phase) -> np.ndarray:
    files = phantom_files(directory, phase)
    if not files:
        raise ValueError(f"no {phase} volumes (patient_*_{phase}.cytv) in {directory}")
    return np.concatenate([load_volume(f).voxels for f in files]).astype(np.float32)


def cmd_train(args) -> int:
    from .training import CyTranState, TrainConfig, checkpoint_load, fit

    x_phase, _, y_phase = args.pair.partition(":")
    if y_phase not in PHASES or x_phase not in PHASES or x_phase == y_phase:
        raise ValueError(f"--pair must look like native:venous, got {args.pair!r}")
    X, Y = _stack(args.data, x_phase), _stack(args.data, y_phase)
    out = Path(args.out)
    if args.resume and out.exists():
        state = checkpoint_load(out)
        if state.phases != (x_phase, y_phase):
            raise ValueError(f"checkpoint was trained on {':'.join(state.phases)}, not {args.pair}")
    else:
        values: dict = parse_config(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
        values.setdefault("image_size", X.shape[-1])
        for key in ("seed", "epochs", "batch_size", "learning_rate", "lambda_cycle"):
            if getattr(args, key) is not None:
                values[key] = getattr(args, key)
        config = TrainConfig.from_mapping(values)
        if config.image_size != X.shape[-1]:
            raise ValueError(f"config image_size {config.image_size} does not match data {X.shape[-1]}")
        state = CyTranState(config, (x_phase, y_phase))
        log = Path(args.log or str(out) + ".log")
        if log.exists():
            log.unlink()
    history = fit(state, X, Y, out, args.log or str(out) + ".log")
    for i, means in enumerate(history, state.epoch - len(history) + 1):
        print(f"epoch {i}: " + ", ".join(f"{k} {v:.6f}" for k, v in means.items()))
    return EXIT_OK


def _translator(ckpt: str | Path, direction: str):
    from .training import checkpoint_load

    state = checkpoint_load(ckpt)
    if direction == "x2y":
        return state.G, state.phases[1], state.phases[0]
    return state.F, state.phases[0], state.phases[1]


def cmd_translate(args) -> int:
    net, out_phase, in_phase = _translator(args.ckpt, args.direction)
    vol = load_volume(args.inp)
    if vol.phase != in_phase:
        raise ValueError(f"{args.direction} translates {in_phase} scans, input is {vol.phase}")
    out = net.translate(vol.voxels.astype(net.stem.weight.dtype))
    save_volume(Volume(out, vol.intercept, vol.slice_thickness_mm, out_phase), args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_translation

    src, tgt = load_volume(args.src), load_volume(args.tgt)
    model = None
    if args.ckpt:
        net, _, in_phase = _translator(args.ckpt, args.direction)
        if src.phase != in_phase:
            raise ValueError(f"{args.direction} translates {in_phase} scans, source is {src.phase}")
        model = lambda v: net.translate(v.astype(net.stem.weight.dtype))
    report = evaluate_translation(model, src, tgt, args.dynamic_range)
    report.write(args.report)
    print(f"mae {report.mae:.6f} rmse {report.rmse:.6f} ssim {report.ssim:.6f}")
    return EXIT_OK


def cmd_train_registration(args) -> int:
    from .registration import RegistrationNet, RegistrationTrainConfig, train_registration

    vols = [load_volume(f).voxels for f in phantom_files(args.data, "native")]
    if not vols:
        raise ValueError(f"no native volumes in {args.data}")
    net = RegistrationNet(args.width, args.seed)
    cfg = RegistrationTrainConfig(steps=args.steps, misalignment=args.misalign, seed=args.seed)
    trace = train_registration(net, vols, cfg)
    net.save(args.out)
    print(f"registration loss {np.mean(trace[:10]):.6f} -> {np.mean(trace[-10:]):.6f}")
    return EXIT_OK


def cmd_register(args) -> int:
    from .registration import RegistrationNet, cascade_register, save_field, warp

    moving, fixed = load_volume(args.moving), load_volume(args.fixed)
    model = RegistrationNet.load(args.model)
    source = moving.voxels
    if args.translate_ckpt:
        from .training import checkpoint_load

        state = checkpoint_load(args.translate_ckpt)
        if (moving.phase, fixed.phase) == state.phases[::-1]:
            net = state.F
        elif (moving.phase, fixed.phase) == state.phases:
            net = state.G
        else:
            raise ValueError(
                f"translator maps {' <-> '.join(state.phases)}, cannot take {moving.phase} to {fixed.phase}"
            )
        source = net.translate(moving.voxels.astype(net.stem.weight.dtype))
    result = cascade_register(model, source, fixed, args.cascades)
    aligned = warp(moving.voxels, result.net_field)
    save_volume(Volume(aligned.astype(np.float32), moving.intercept, moving.slice_thickness_mm, moving.phase), args.out)
    if args.field_out:
        save_field(result.net_field, args.field_out)
    return EXIT_OK


def self_check() -> list[tuple[str, bool, str]]:
    """(name, passed, detail) for the gradient, shape and parameter-count suites."""
    from .discriminator import Discriminator
    from .generator import EXPECTED_PARAMETERS, Generator, GeneratorConfig
    from .gradcheck import grad_check

    results = []
    count = Generator(GeneratorConfig()).num_parameters()
    results.append(("parameter-count", count == EXPECTED_PARAMETERS, f"{count} (expected {EXPECTED_PARAMETERS})"))

    rng = np.random.default_rng(0)
    for size in (16, 64, 128):
        g = Generator(GeneratorConfig(image_size=size, n_blocks=1)).eval()
        with T.no_grad():
            out = g(T.Tensor(rng.standard_normal((1, 1, size, size)).astype(np.float32)))
        results.append((f"shape-{size}", out.shape == (1, 1, size, size), str(out.shape)))

    with T.precision(np.float64):
        g = Generator(GeneratorConfig().scaled(8, image_size=16, n_blocks=1), seed=4)
        x = T.Tensor(rng.standard_normal((2, 1, 16, 16)))
        w = T.Tensor(rng.standard_normal((2, 1, 16, 16)))
        d = Discriminator(1, 8, seed=1)
        xd = T.Tensor(rng.standard_normal((1, 1, 70, 70)))
    rep = grad_check(lambda: T.sum(T.mul(g(x), w)), [x] + g.parameters()[::11], step=1e-6, samples=2)
    results.append(("gradient-generator", rep.passed, str(rep)))
    rep = grad_check(lambda: T.sum(d(xd)), [xd] + d.parameters(), step=1e-6, samples=3)
    results.append(("gradient-discriminator", rep.passed, str(rep)))
    return results


def cmd_self_check(args) -> int:
    ok = True
    for name, passed, detail in self_check():
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        ok &= passed
    return EXIT_OK if ok else EXIT_INVALID


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cytran", description="Contrast-phase CT translation and registration.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom-gen", help="write synthetic native/venous/arterial triples")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--depth", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--misalign", type=float, default=0.0)
    s.add_argument("--noise", type=float, default=0.0)
    s.set_defaults(fn=cmd_phantom_gen)

    s = sub.add_parser("train", help="cycle-consistent training between two phases")
    s.add_argument("--data", required=True)
    s.add_argument("--pair", required=True, help="X:Y, e.g. native:venous")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--learning-rate", dest="learning_rate", type=float)
    s.add_argument("--lambda-cycle", dest="lambda_cycle", type=float)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("translate", help="translate a volume with a trained generator")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--direction", choices=("x2y", "y2x"), required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_translate)

    s = sub.add_parser("evaluate", help="slice-wise MAE/RMSE/SSIM report")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--ckpt")
    g.add_argument("--identity", action="store_true")
    s.add_argument("--direction", choices=("x2y", "y2x"), default="x2y")
    s.add_argument("--src", required=True)
    s.add_argument("--tgt", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--dynamic-range", dest="dynamic_range", type=float, default=1.0)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("train-registration", help="train the reference displacement network")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=300)
    s.add_argument("--width", type=int, default=16)
    s.add_argument("--misalign", type=float, default=3.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_train_registration)

    s = sub.add_parser("register", help="cascade registration, optionally after translation")
    s.add_argument("--moving", required=True)
    s.add_argument("--fixed", required=True)
    s.add_argument("--model", required=True, help="registration network checkpoint")
    s.add_argument("--cascades", type=int, default=1)
    s.add_argument("--translate-ckpt", dest="translate_ckpt")
    s.add_argument("--out", required=True)
    s.add_argument("--field-out", dest="field_out")
    s.set_defaults(fn=cmd_register)

    s = sub.add_parser("self-check", help="gradient, shape and parameter-count checks")
    s.set_defaults(fn=cmd_self_check)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, ShapeError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
