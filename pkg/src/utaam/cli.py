"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.
"""
import argparse
import sys
from pathlib import Path

import numpy as np

from .exceptions import DataFormatError, InvalidArgumentError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def read_config(path):
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError("expected 'key = value'", path, n)
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _ints(text):
    return [int(v) for v in str(text).replace(",", " ").split()]


def _ranks(text):
    """Rank list; ``-`` or ``full`` entries keep full rank."""
    if text is None:
        return None
    out = []
    for v in str(text).replace(",", " ").split():
        out.append(None if v in ("-", "full") else int(v))
    return out


def _add_common(p):
    p.add_argument("--config", help="key = value file supplying defaults for any flag")
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")


def build_parser():
    parser = _Parser(prog="utaam", description="Unified tensor-based AAM toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--extents", default="60 7 5 3",
                   help="identity pose illumination expression counts (default '60 7 5 3')")
    p.add_argument("--points", type=int, default=24, help="landmarks per face (default 24)")
    p.add_argument("--size", type=int, default=128, help="image side in pixels (default 128)")
    p.add_argument("--yaw-range", type=float, default=75.0, help="largest |yaw| in degrees")
    p.add_argument("--missing", type=float, default=0.0,
                   help="fraction of samples to leave out of the manifest (default 0)")

    p = sub.add_parser("build", help="build a model file from a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--mask", help="UTT1 sample mask over the grid; zero cells are treated as missing")
    p.add_argument("--shape-ranks", help="five retained shape ranks ('-' keeps a mode full)")
    p.add_argument("--texture-ranks", help="five retained texture ranks")
    p.add_argument("--completion", choices=["tucker", "cp", "init"], default="tucker")
    p.add_argument("--init", choices=["variation_aware", "random"], default="variation_aware")
    p.add_argument("--completion-ranks", help="four sample-mode ranks for completion")
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--mesh-height", type=int, default=64, help="reference mesh height in pixels")
    p.add_argument("--no-texture", action="store_true", help="build a shape-only model")
    p.add_argument("--hog", default="32 8 9 1e-6", help="patch cell bins eps (default '32 8 9 1e-6')")

    p = sub.add_parser("complete", help="complete a tensor with missing samples")
    _add_common(p)
    p.add_argument("--tensor", required=True, help="UTT1 data tensor")
    p.add_argument("--mask", required=True,
                   help="UTT1 mask, same shape as the tensor or without its last axis")
    p.add_argument("--out", required=True, help="completed UTT1 tensor")
    p.add_argument("--trace", help="text file receiving the objective trace")
    p.add_argument("--solver", choices=["tucker", "cp"], default="tucker")
    p.add_argument("--init", choices=["variation_aware", "random"], default="variation_aware")
    p.add_argument("--ranks", help="Tucker ranks per mode ('-' keeps a mode full)")
    p.add_argument("--rank", type=int, default=1, help="CP rank (default 1)")
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-6)

    p = sub.add_parser("train", help="train a regression cascade into a model file")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="model file to write (default: overwrite --model)")
    p.add_argument("--stages", type=int, default=5)
    p.add_argument("--alpha", type=float, help="ridge weight (default scale-free rule)")
    p.add_argument("--perturbations", type=int, default=10)

    p = sub.add_parser("fit", help="fit images with a trained model")
    _add_common(p)
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="fit every image of a manifest (errors reported when pts exist)")
    src.add_argument("--images", nargs="+", help="PGM images to fit")
    p.add_argument("--out-dir", required=True, help="directory for fitted pts files")
    p.add_argument("--report", help="error report path (manifest input only)")
    p.add_argument("--bbox", nargs=4, type=float, metavar=("X", "Y", "W", "H"),
                   help="face box used to place the initial mean shape")

    p = sub.add_parser("synth", help="render a face from model coefficients")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output PGM")
    p.add_argument("--identity", type=int, default=0, help="identity row (default 0)")
    p.add_argument("--pose", type=int, default=0, help="pose row (default 0)")
    p.add_argument("--illumination", type=int, default=0, help="illumination row (default 0)")
    p.add_argument("--expression", type=int, default=0, help="expression row (default 0)")
    p.add_argument("--coeffs", help="key = value file of row weights per mode "
                                    "(identity, pose, illumination, expression)")
    p.add_argument("--interpolate", nargs=3, metavar=("A", "B", "T"),
                   help="pose rows A and B and weight T in [0, 1]")
    p.add_argument("--size", type=int, default=128, help="image side (default 128)")
    p.add_argument("--pts", help="also write the synthesised landmarks here")

    p = sub.add_parser("eval", help="score predicted pts files against a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True, help="ground-truth manifest")
    p.add_argument("--pred-dir", required=True, help="directory of predicted pts files")
    p.add_argument("--report", required=True)
    return parser


def _config_path(argv):
    for k, a in enumerate(argv):
        if a == "--config" and k + 1 < len(argv):
            return argv[k + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _convert(action, value):
    if isinstance(action, argparse._StoreTrueAction):
        return value.lower() in ("1", "true", "yes", "on")
    conv = action.type or str
    if action.nargs in ("+", "*") or isinstance(action.nargs, int):
        return [conv(x) for x in value.split()]
    if action.choices is not None and value not in action.choices:
        raise argparse.ArgumentError(action, f"invalid choice {value!r}")
    return conv(value)


def _parse(argv):
    """Parse ``argv``; values from ``--config`` sit between flags and defaults."""
    parser = build_parser()
    path = _config_path(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = parser._subparsers._group_actions[0].choices
    if path is not None and command in subparsers:
        sub = subparsers[command]
        cfg = read_config(path)
        actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
        unknown = sorted(set(cfg) - set(actions))
        if unknown:
            sub.error(f"unknown config keys: {', '.join(unknown)}")
        defaults = {}
        for key, value in cfg.items():
            try:
                defaults[key] = _convert(actions[key], value)
            except (ValueError, argparse.ArgumentError) as exc:
                sub.error(f"config key {key}: {exc}")
            actions[key].required = False
        for group in sub._mutually_exclusive_groups:
            if any(a.dest in cfg for a in group._group_actions):
                group.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    except (DataFormatError, OSError) as exc:
        print(f"utaam: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"utaam {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"utaam {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataFormatError, InvalidArgumentError, OSError) as exc:
        print(f"utaam {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# -- subcommands ---------------------------------------------------------------

def cmd_gen(args):
    from .dataio import SyntheticSpec, generate_synthetic, make_missing_mask, write_dataset, write_manifest
    extents = _ints(args.extents)
    if len(extents) != 4:
        raise UsageError("--extents needs four integers")
    spec = SyntheticSpec(extents=tuple(extents), n_points=args.points, image_size=args.size,
                         seed=args.seed, yaw_range=args.yaw_range)
    data = generate_synthetic(spec)
    manifest = write_dataset(data, args.out)
    if args.missing > 0:
        mask = make_missing_mask(spec.extents, args.missing, args.seed)
        manifest.rows = [r for r in manifest.rows if mask[r.cell]]
        write_manifest(Path(args.out) / "manifest.txt", manifest)


def _load_samples(manifest):
    shapes = manifest.load_shapes()
    if len(shapes) == 0:
        raise InvalidArgumentError("manifest has no samples")
    return shapes


def _orientation(manifest, n_points):
    if len(manifest.outline) >= 2:
        return (manifest.outline[0], manifest.outline[-1])
    return (0, n_points - 1)


def cmd_build(args):
    from .dataio import load_manifest
    from .io import read_tensor
    from .model import save_model
    from .pipeline import build_from_samples

    manifest = load_manifest(args.manifest)
    rows = manifest.rows
    if args.mask:
        mask = read_tensor(args.mask)
        if mask.shape != manifest.extents:
            raise InvalidArgumentError(f"mask shape {mask.shape} does not match extents {manifest.extents}")
        rows = [r for r in rows if mask[r.cell] != 0]
    manifest.rows = rows
    shapes = _load_samples(manifest)
    images = None if args.no_texture else manifest.load_images()
    hog = _hog(args.hog)
    result = build_from_samples(
        manifest.extents, manifest.frontal, [r.cell for r in rows], shapes, images,
        shape_ranks=_ranks(args.shape_ranks), texture_ranks=_ranks(args.texture_ranks),
        completion=args.completion, init=args.init,
        completion_ranks=_ranks(args.completion_ranks), mesh_height=args.mesh_height,
        orientation=_orientation(manifest, shapes.shape[1]), hog=hog, max_iter=args.max_iter,
        tol=args.tol, random_state=args.seed, texture=not args.no_texture)
    save_model(args.out, result.model)


def _hog(text):
    from .features import HogSpec
    v = str(text).replace(",", " ").split()
    if len(v) != 4:
        raise UsageError("--hog needs patch cell bins eps")
    return HogSpec(int(v[0]), int(v[1]), int(v[2]), float(v[3]))


def cmd_complete(args):
    from .completion import (MaskedTensor, complete_cp_weighted, complete_tucker_power,
                             initialize_missing)
    from .io import read_tensor, write_tensor

    x = read_tensor(args.tensor)
    mask = read_tensor(args.mask)
    if mask.shape == x.shape[:-1]:
        mask = np.broadcast_to(mask[..., None], x.shape)
    if mask.shape != x.shape:
        raise DataFormatError(f"mask shape {mask.shape} does not match tensor shape {x.shape}",
                              args.mask)
    mt = MaskedTensor(np.where(mask != 0, x, 0.0), np.asarray(mask, dtype=np.float64))
    init, _ = initialize_missing(mt, args.init, args.seed)
    if args.solver == "tucker":
        out, trace = complete_tucker_power(mt, init, _ranks(args.ranks), args.max_iter, args.tol)
    else:
        out, trace = complete_cp_weighted(mt, init, args.rank, args.max_iter, args.tol,
                                          random_state=args.seed)
    write_tensor(args.out, out)
    if args.trace:
        Path(args.trace).write_text("".join(f"{v:.17g}\n" for v in trace))


def _load(path, need_cascade=False):
    from .model import load_model
    model, cascade = load_model(path)
    if need_cascade and cascade is None:
        raise DataFormatError("model file lacks the CASC chunk (run 'train' first)", path)
    return model, cascade


def cmd_train(args):
    from .dataio import load_manifest
    from .fitting import train_cascade
    from .model import save_model

    model, _ = _load(args.model)
    manifest = load_manifest(args.manifest)
    shapes = _load_samples(manifest)
    images = manifest.load_images()
    # seed ground-truth projection with the training rows when the grid matches
    n_i, n_p, n_e = (m.shape[0] for m in model.shape_modes_)
    cells = [r.cell for r in manifest.rows]
    init_cells = cells if all(c[0] < n_i and c[1] < n_p and c[3] < n_e for c in cells) else None
    cascade = train_cascade(model, images, shapes, n_stages=args.stages, alpha=args.alpha,
                            n_perturbations=args.perturbations, random_state=args.seed,
                            cells=init_cells)
    save_model(args.out or args.model, model, cascade)


def _initial_params(model, cascade, image_shape, bbox):
    """Mean-shape start; with ``bbox`` the mean shape is fitted into the box."""
    if bbox is None:
        return cascade.init_spec_.default_params(model, image_shape).to_vector()
    x, y, w, h = bbox
    if w <= 0 or h <= 0:
        raise InvalidArgumentError("--bbox width and height must be positive")
    mp = model.mean_shape_params()
    local = model.model_shape(mp.identity, mp.pose, mp.expression)
    extent = np.maximum(np.ptp(local, axis=0), 1e-12)
    scale = min(w / extent[0], h / extent[1])
    g = _centered_affine(local, scale, cascade.init_spec_.theta, (x + w / 2, y + h / 2))
    return model.mean_shape_params(g).to_vector()


def cmd_fit(args):
    from .dataio import load_manifest
    from .fitting import normalized_error, pt_pt_error, run_stages
    from .io import read_pgm, read_pts, write_pts

    model, cascade = _load(args.model, need_cascade=True)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = None
    if args.manifest:
        manifest = load_manifest(args.manifest)
        names = [r.image for r in manifest.rows]
        paths = [manifest.resolve(r.image) for r in manifest.rows]
        truth = [manifest.resolve(r.pts) for r in manifest.rows]
    else:
        names = list(args.images)
        paths = [Path(p) for p in args.images]
        truth = [None] * len(paths)
    lines = []
    for name, path, tpath in zip(names, paths, truth):
        img = read_pgm(path)
        init = _initial_params(model, cascade, img.shape, args.bbox)
        p = run_stages(model, cascade.stages_, img[None], init[None], args.threads)[0]
        shape = model.synthesize_shape(p)
        out = out_dir / (path.stem + ".pts")
        write_pts(out, shape)
        if tpath is not None and tpath.exists():
            # score the written file so the report agrees with ``eval``
            shape, t = read_pts(out), read_pts(tpath)
            norm = (normalized_error(shape, t, manifest.left_eye, manifest.right_eye)
                    if manifest.left_eye and manifest.right_eye else float("nan"))
            lines.append(f"{name} {pt_pt_error(shape, t):.6f} {norm:.6f}")
    if args.report and lines:
        _write_report(args.report, lines)


def _write_report(path, lines):
    vals = np.array([[float(v) for v in ln.split()[1:]] for ln in lines])
    header = (f"# images {len(lines)} mean_pt_pt {vals[:, 0].mean():.6f} "
              f"mean_normalized {np.nanmean(vals[:, 1]) if np.isfinite(vals[:, 1]).any() else float('nan'):.6f}")
    Path(path).write_text("\n".join([header, *lines]) + "\n")


def _row_weights(n, row, weights):
    if weights is not None:
        w = np.array(weights, dtype=np.float64)
        if w.shape != (n,):
            raise InvalidArgumentError(f"expected {n} row weights, got {w.size}")
        return w
    if not 0 <= row < n:
        raise InvalidArgumentError(f"row {row} outside [0, {n})")
    w = np.zeros(n)
    w[row] = 1.0
    return w


def cmd_synth(args):
    from .geometry import render_texture
    from .io import write_pgm, write_pts
    from .model import ShapeParams, TextureParams

    model, cascade = _load(args.model)
    if not model.has_texture or model.mesh_ is None:
        raise InvalidArgumentError("model has no texture model to render")
    weights = {}
    if args.coeffs:
        for k, v in read_config(args.coeffs).items():
            if k not in ("identity", "pose", "illumination", "expression"):
                raise InvalidArgumentError(f"unknown coefficient key {k!r}")
            weights[k] = [float(x) for x in v.replace(",", " ").split()]
    s_i, s_p, s_e = model.shape_modes_
    t_i, t_p, t_l, t_e = model.texture_modes_
    rows = {"identity": args.identity, "pose": args.pose, "illumination": args.illumination,
            "expression": args.expression}
    w = {k: _row_weights(n, rows[k], weights.get(k))
         for k, n in (("identity", s_i.shape[0]), ("pose", s_p.shape[0]),
                      ("illumination", t_l.shape[0]), ("expression", s_e.shape[0]))}
    if args.interpolate:
        a, b, t = int(args.interpolate[0]), int(args.interpolate[1]), float(args.interpolate[2])
        shape_pose = model.interpolate_pose(a, b, t)
        tex_pose = (1.0 - t) * t_p[a] + t * t_p[b]
    else:
        shape_pose = w["pose"] @ s_p
        tex_pose = w["pose"] @ t_p
    identity, expression = w["identity"] @ s_i, w["expression"] @ s_e
    local = model.model_shape(identity, shape_pose, expression)
    if cascade is not None:
        scale, theta = cascade.init_spec_.scale, cascade.init_spec_.theta
    else:
        scale, theta = 0.6 * args.size / max(np.ptp(local[:, 1]), 1e-12), 0.0
    g = _centered_affine(local, scale, theta, (args.size / 2, args.size / 2))
    shape = model.synthesize_shape(ShapeParams(g, identity, shape_pose, expression))
    q = TextureParams(w["identity"] @ t_i, tex_pose, w["illumination"] @ t_l, w["expression"] @ t_e)
    texture = np.clip(model.synthesize_texture(q), 0.0, 1.0)
    img = render_texture(texture, shape, model.mesh_, (args.size, args.size))
    write_pgm(args.out, img)
    if args.pts:
        write_pts(args.pts, shape)


def _centered_affine(local, scale, theta, center):
    """Similarity placing the centroid of ``local`` at ``center``."""
    from .geometry import AffineParams
    z = complex(*local.mean(axis=0)) * scale * np.exp(1j * theta)
    return AffineParams(scale, theta, center[0] - z.real, center[1] - z.imag)


def cmd_eval(args):
    from .dataio import load_manifest
    from .fitting import normalized_error, pt_pt_error
    from .io import read_pts

    manifest = load_manifest(args.manifest)
    pred_dir = Path(args.pred_dir)
    lines = []
    for r in manifest.rows:
        pred_path = pred_dir / (Path(r.image).stem + ".pts")
        if not pred_path.exists():
            raise DataFormatError("missing prediction", pred_path)
        pred, truth = read_pts(pred_path), read_pts(manifest.resolve(r.pts))
        norm = (normalized_error(pred, truth, manifest.left_eye, manifest.right_eye)
                if manifest.left_eye and manifest.right_eye else float("nan"))
        lines.append(f"{r.image} {pt_pt_error(pred, truth):.6f} {norm:.6f}")
    if not lines:
        raise InvalidArgumentError("manifest has no samples to evaluate")
    _write_report(args.report, lines)


COMMANDS = {"gen": cmd_gen, "build": cmd_build, "complete": cmd_complete, "train": cmd_train,
            "fit": cmd_fit, "synth": cmd_synth, "eval": cmd_eval}


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
