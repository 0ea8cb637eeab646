"""Command-line entry point: ``rdmm {gen,register,eval,check-grad}``.

Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as rio
from .config import RegistrationConfig, canonical_mode, default_config
from .dynamics import GeodesicState, current_weights, energy, integrate_geodesic
from .exceptions import (
    FormatError,
    GenerationError,
    IntegrationBlowupError,
    InvalidParameterError,
    NumericalError,
    ShapeMismatchError,
)
from .fields import jacobian_determinant
from .kernels import local_std_map
from .metrics import dice_per_label, fold_measure, warp_labels
from .optimizer import gradient_check, optimize
from .synthdata import generate_pair, region_preweights

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3
GRAD_TOL = 1e-4

log = logging.getLogger("rdmm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rdmm", description="Region-specific diffeomorphic registration.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen", help="generate a synthetic source/target scene")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--size", type=int, default=200)
    gen.add_argument("--out", type=Path, required=True)

    reg = sub.add_parser("register", help="register a source image to a target image")
    reg.add_argument("--mode", choices=("lddmm", "rdmm-fixed", "rdmm-joint"))
    reg.add_argument("--source", type=Path)
    reg.add_argument("--target", type=Path)
    reg.add_argument("--preweights", type=Path, help="TensorFile of initial pre-weights")
    reg.add_argument("--fg-mask", type=Path, help="foreground mask for region pre-weights")
    reg.add_argument("--fg-h2", type=_float_list, help="squared pre-weights inside the mask")
    reg.add_argument("--bg-h2", type=_float_list, help="squared pre-weights outside the mask")
    reg.add_argument("--labels-source", type=Path)
    reg.add_argument("--labels-target", type=Path)
    reg.add_argument("--config", type=Path, help="JSON config (partial configs are allowed)")
    reg.add_argument("--manifest", type=Path, help="re-run the registration recorded here")
    reg.add_argument("--out", type=Path, required=True)

    ev = sub.add_parser("eval", help="score a registration result")
    ev.add_argument("--result", type=Path, required=True)
    ev.add_argument("--labels-source", type=Path, required=True)
    ev.add_argument("--labels-target", type=Path, required=True)
    ev.add_argument("--out", type=Path, help="CSV path (default: RESULT/eval.csv)")

    cg = sub.add_parser("check-grad", help="compare adjoint and finite-difference gradients")
    cg.add_argument("--size", type=int, default=16)
    cg.add_argument("--seed", type=int, default=1)
    cg.add_argument("--n-steps", type=int, default=5)
    return parser


# ----------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    scene = generate_pair(args.seed, (args.size, args.size))
    out = args.out
    files = {
        "source": "source.tensor",
        "target": "target.tensor",
        "labels_source": "labels_source.tensor",
        "labels_target": "labels_target.tensor",
        "fg_mask_source": "fg_mask_source.tensor",
        "source_render": "source.pgm",
        "target_render": "target.pgm",
    }
    rio.write_tensor(out / files["source"], scene.source_image)
    rio.write_tensor(out / files["target"], scene.target_image)
    rio.write_tensor(out / files["labels_source"], scene.source_labels)
    rio.write_tensor(out / files["labels_target"], scene.target_labels)
    rio.write_tensor(out / files["fg_mask_source"], scene.foreground_mask_source)
    rio.render_figure(scene.source_image, "gray", out / files["source_render"])
    rio.render_figure(scene.target_image, "gray", out / files["target_render"])
    rio.write_json(out / "manifest.json", {
        "command": "gen",
        "seed": args.seed,
        "size": args.size,
        "outputs": files,
        "shapes": [
            {"role": role, **{k: getattr(s, k) for k in
                              ("kind", "center", "size", "rotation", "intensity", "label")}}
            for role, shapes in (("source", scene.source_shapes), ("target", scene.target_shapes))
            for s in shapes
        ],
    })
    print(f"wrote scene for seed {args.seed} to {out}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# register


def _resolve(path):
    return None if path is None else Path(path).resolve().as_posix()


def _registration_request(args) -> dict:
    """Collect everything that determines a registration run."""
    if args.manifest is not None:
        manifest = rio.read_json(args.manifest)
        if manifest.get("command") != "register":
            raise InvalidParameterError(f"{args.manifest} is not a registration manifest")
        request = dict(manifest["request"])
        request["config"] = RegistrationConfig.from_dict(manifest["config"])
        return request
    missing = [f"--{n}" for n in ("mode", "source", "target") if getattr(args, n) is None]
    if missing:
        raise UsageError(f"register: missing {', '.join(missing)} (or pass --manifest)")
    mode = canonical_mode(args.mode)
    cfg = default_config(mode)
    if args.config is not None:
        cfg = RegistrationConfig.from_dict({**rio.read_json(args.config), "mode": mode}, base=cfg)
    region = args.fg_mask is not None or args.fg_h2 is not None or args.bg_h2 is not None
    if region and (args.fg_mask is None or args.fg_h2 is None or args.bg_h2 is None):
        raise UsageError("register: --fg-mask, --fg-h2 and --bg-h2 go together")
    if region and args.preweights is not None:
        raise UsageError("register: use either --preweights or --fg-mask, not both")
    if mode == "rdmm_fixed" and not (region or args.preweights):
        raise UsageError("register: rdmm-fixed needs --preweights or --fg-mask/--fg-h2/--bg-h2")
    if mode == "lddmm" and (region or args.preweights):
        raise UsageError("register: lddmm mode takes no pre-weights")
    if (args.labels_source is None) != (args.labels_target is None):
        raise UsageError("register: pass both --labels-source and --labels-target")
    return {
        "source": _resolve(args.source),
        "target": _resolve(args.target),
        "preweights": _resolve(args.preweights),
        "fg_mask": _resolve(args.fg_mask),
        "fg_h2": args.fg_h2,
        "bg_h2": args.bg_h2,
        "labels_source": _resolve(args.labels_source),
        "labels_target": _resolve(args.labels_target),
        "config": cfg,
    }


def _load_labels(path):
    labels = rio.read_tensor(path) if rio._is_tensor(path) else rio.read_pgm(path)
    return np.asarray(labels).astype(np.int32)


def cmd_register(args) -> int:
    req = _registration_request(args)
    cfg: RegistrationConfig = req["config"]
    I0 = rio.read_image(req["source"])
    I1 = rio.read_image(req["target"])
    h0 = None
    if req["preweights"]:
        h0 = rio.read_tensor(req["preweights"])
    elif req["fg_mask"]:
        mask = rio.read_image(req["fg_mask"], normalize=False)
        h0 = region_preweights(mask, req["fg_h2"], req["bg_h2"], cfg.kernel)
    labels = None
    if req["labels_source"]:
        labels = (_load_labels(req["labels_source"]), _load_labels(req["labels_target"]))
    result = optimize(I0, I1, cfg, h0=h0, labels=labels)

    out = args.out
    files = {
        "phi_inv": "phi_inv.tensor",
        "warped": "warped.tensor",
        "m0": "m0.tensor",
        "h0": "h0.tensor",
        "metrics_csv": "metrics.csv",
        "metrics": "metrics.json",
        "render_warped": "warped.pgm",
        "render_detjac": "detjac.pgm",
        "render_std_map_t0": "std_map_t0.pgm",
        "render_std_map_t1": "std_map_t1.pgm",
        "render_momentum_x": "m0_x.pgm",
    }
    rio.write_tensor(out / files["phi_inv"], result.phi_inv_final)
    rio.write_tensor(out / files["warped"], result.warped)
    rio.write_tensor(out / files["m0"], result.m0)
    rio.write_tensor(out / files["h0"], result.h0)
    rio.write_metrics_csv(out / files["metrics_csv"], result.per_iteration)
    rio.write_json(out / files["metrics"], result.metrics)
    rio.render_figure(result.warped, "gray", out / files["render_warped"])
    rio.render_figure(jacobian_determinant(result.phi_inv_final), "detjac",
                      out / files["render_detjac"])
    sig = (cfg.kernel.sigmas[0], cfg.kernel.sigmas[-1])
    state0 = GeodesicState.initial(result.m0, result.h0)
    traj = integrate_geodesic(state0, cfg.kernel, cfg.integrator)
    for key, state in (("render_std_map_t0", traj[0]), ("render_std_map_t1", traj[-1])):
        w = current_weights(state, cfg.kernel).w
        rio.render_figure(local_std_map(w, cfg.kernel), "std_map", out / files[key], sig)
    rio.render_figure(result.m0[0], "signed", out / files["render_momentum_x"])
    request = {k: v for k, v in req.items() if k != "config"}
    rio.write_json(out / "manifest.json", {
        "command": "register",
        "seed": None,
        "config": cfg.to_dict(),
        "request": request,
        "outputs": files,
        "status": result.status,
        "per_iteration": result.per_iteration,
        "metrics": result.metrics,
    })
    line = f"{cfg.mode}: {result.status}, final objective {result.metrics['objective']['total']:.6g}"
    if "dice" in result.metrics:
        line += f", mean Dice {np.mean(list(result.metrics['dice'].values())):.4f}"
    print(line)
    return EXIT_OK


# ----------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    result_dir = args.result
    manifest = rio.read_json(result_dir / "manifest.json")
    cfg = RegistrationConfig.from_dict(manifest["config"])
    outputs = manifest["outputs"]
    phi = rio.read_tensor(result_dir / outputs["phi_inv"])
    m0 = rio.read_tensor(result_dir / outputs["m0"])
    h0 = rio.read_tensor(result_dir / outputs["h0"])
    src = _load_labels(args.labels_source)
    tgt = _load_labels(args.labels_target)
    if src.shape != phi.shape[1:] or tgt.shape != phi.shape[1:]:
        raise ShapeMismatchError("label maps must live on the result's grid")
    dice = dice_per_label(warp_labels(src, phi), tgt)
    count, mass = fold_measure(phi)
    traj = integrate_geodesic(GeodesicState.initial(m0, h0), cfg.kernel, cfg.integrator)
    e0, e1 = energy(traj[0], cfg.kernel), energy(traj[-1], cfg.kernel)
    drift = abs(e1 - e0) / e0 if e0 > 0 else 0.0
    rows = [("dice", str(lab), val) for lab, val in sorted(dice.items())]
    rows += [
        ("dice_mean", "", float(np.mean(list(dice.values()))) if dice else 1.0),
        ("fold_count", "", count),
        ("fold_mass", "", mass),
        ("energy_drift", "", drift),
    ]
    path = args.out or result_dir / "eval.csv"
    rio.write_table_csv(path, ("metric", "label", "value"), rows)
    for name, lab, val in rows:
        print(f"{name}{'[' + lab + ']' if lab else ''} = {val}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# check-grad


def cmd_check_grad(args) -> int:
    if args.size < 4 or args.n_steps < 1:
        raise UsageError("check-grad: --size must be >= 4 and --n-steps >= 1")
    errors = gradient_check(size=args.size, seed=args.seed, n_steps=args.n_steps)
    for mode, err in errors.items():
        if mode != "max":
            print(f"{mode}: max relative error {err:.3e}")
    ok = errors["max"] < GRAD_TOL
    print(f"max relative error {errors['max']:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRAD_TOL:g})")
    return EXIT_OK if ok else EXIT_NUMERICAL


COMMANDS = {"gen": cmd_gen, "register": cmd_register, "eval": cmd_eval, "check-grad": cmd_check_grad}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"rdmm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrationBlowupError, NumericalError) as exc:
        print(f"rdmm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, OSError) as exc:
        print(f"rdmm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidParameterError, ShapeMismatchError, GenerationError, KeyError) as exc:
        print(f"rdmm: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
