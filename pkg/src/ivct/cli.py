"""Command-line interface: ``ivct {simulate,train,reconstruct,eval,sweep}``.

Exit codes: 0 ok, 2 bad flags, 3 I/O error, 4 non-finite loss,
5 checkpoint/geometry mismatch. ``IVCT_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import os
import sys

_THREADS = os.environ.get("IVCT_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

EXIT_USAGE, EXIT_IO, EXIT_NONFINITE, EXIT_MISMATCH = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def usage(message: str) -> CliError:
    return CliError(message, EXIT_USAGE)


# -- shared helpers -----------------------------------------------------------------------
def parse_kv(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise usage(f"config line without '=': {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv_file(path) -> dict:
    try:
        return parse_kv(Path(path).read_text())
    except OSError as err:
        raise CliError(f"cannot read {path}: {err}", EXIT_IO) from err


GEOMETRY_KEYS = (
    "n_full_views",
    "n_detectors",
    "dist_source_center",
    "dist_detector_center",
    "detector_pitch",
    "image_size",
    "pixel_spacing",
    "angular_span",
    "mu_max",
)


def build_geometry(spec: str | None, overrides: dict | None = None):
    """``desk``, ``full`` or a key/value file; ``overrides`` may refine any field."""
    from .physics import GeometryError, desk_geometry, make_geometry

    values = {}
    spec = spec or "desk"
    if spec == "desk":
        base = desk_geometry()
        values = {k: getattr(base, k) for k in GEOMETRY_KEYS if k != "detector_pitch"}
    elif spec != "full":
        values = {k: v for k, v in read_kv_file(spec).items() if k in GEOMETRY_KEYS}
    for k, v in (overrides or {}).items():
        if k in GEOMETRY_KEYS:
            values[k] = v
    try:
        kwargs = {k: (int(float(v)) if k in ("n_full_views", "n_detectors", "image_size") else float(v)) for k, v in values.items()}
        return make_geometry(**kwargs)
    except (GeometryError, ValueError, TypeError) as err:
        raise usage(f"invalid geometry: {err}") from err


def build_vector(scenario: str, setting: str, n_full: int, span: float):
    """Sampling vector for ``--scenario``/``--setting``.

    Hybrid settings read ``mode:A,B`` with A and B in setting syntax, e.g.
    ``union:lact:0-150,svct:18``.
    """
    from .sampling import SamplingError, SettingSpec, hybrid_vector

    try:
        if scenario in ("svct", "lact"):
            spec = SettingSpec.parse(f"{scenario}:{setting}")
            return spec.vector(n_full, span), spec
        if scenario == "hybrid":
            mode, _, rest = setting.partition(":")
            a_text, _, b_text = rest.partition(",")
            a = SettingSpec.parse(a_text).vector(n_full, span)
            b = SettingSpec.parse(b_text).vector(n_full, span)
            return hybrid_vector(a, b, mode), None
    except (SamplingError, ValueError) as err:
        raise usage(f"invalid setting {setting!r} for {scenario}: {err}") from err
    raise usage(f"unknown scenario {scenario!r}")


def parse_settings(text: str):
    from .sampling import SamplingError, SettingSpec

    items = [s for s in (text or "").split(",") if s.strip()]
    if not items:
        raise usage("empty settings list")
    try:
        return [SettingSpec.parse(s) for s in items]
    except (SamplingError, ValueError) as err:
        raise usage(str(err)) from err


def parse_range(scenario: str, text: str):
    """``start:stop:step`` inclusive of stop, e.g. ``18:144:18``."""
    from .sampling import LACT, SVCT, SettingSpec

    try:
        start, stop, step = (float(x) for x in text.split(":"))
    except ValueError as err:
        raise usage(f"range must be start:stop:step, got {text!r}") from err
    if step <= 0 or stop < start:
        raise usage(f"empty range {text!r}")
    values = np.arange(start, stop + step / 2, step)
    if scenario == "svct":
        return [SettingSpec(SVCT, int(v)) for v in values]
    if scenario == "lact":
        return [SettingSpec(LACT, float(v)) for v in values]
    raise usage(f"sweeps support svct or lact, got {scenario!r}")


def load_images(spec: str, size: int, seed: int):
    """A directory of images or ``ellipses:N`` for N seeded random phantoms."""
    from .autograd import RngState
    from .evaluate import load_dataset_dir
    from .physics import random_ellipses

    if spec.startswith("ellipses:"):
        n = int(spec.split(":", 1)[1])
        return [random_ellipses(size, RngState(seed).child(i)) for i in range(n)], [f"ellipse{i:04d}" for i in range(n)]
    try:
        return load_dataset_dir(spec, size)
    except FileNotFoundError as err:
        raise CliError(str(err), EXIT_IO) from err
    except ValueError as err:
        raise CliError(str(err), EXIT_IO) from err


def noise_from(flag: str, values: dict | None = None):
    from .physics import NoiseModel

    values = values or {}
    return NoiseModel(
        float(values.get("photon_intensity", 1e6)),
        float(values.get("gaussian_std", 0.01)),
        flag in ("on", "1", "true", "yes"),
    )


def load_model(path):
    from .io import FormatError
    from .training import checkpoint_load

    try:
        return checkpoint_load(path)
    except OSError as err:
        raise CliError(f"cannot read checkpoint {path}: {err}", EXIT_IO) from err
    except (FormatError, KeyError, ValueError) as err:
        raise CliError(f"checkpoint {path}: {err}", EXIT_MISMATCH) from err


# -- commands -------------------------------------------------------------------------------
def cmd_simulate(args) -> int:
    from .autograd import RngState
    from .io import save_image, save_sinogram, write_png
    from .physics import add_noise, fbp, forward_project, make_phantom
    from .sampling import reduce_sinogram

    geom = build_geometry(args.geometry)
    v, _ = build_vector(args.scenario, args.setting, geom.n_full_views, geom.angular_span)
    noise = noise_from(args.noise)
    if args.input:
        images, names = load_images(args.input, geom.image_size, args.seed)
    else:
        try:
            images = [make_phantom(args.phantom, geom.image_size, RngState(args.seed)).data]
        except ValueError as err:
            raise usage(str(err)) from err
        names = [args.phantom]
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "sampling.txt").write_text(v.to_text() + "\n")
        for i, (img, name) in enumerate(zip(images, names)):
            stem = Path(name).stem
            full = add_noise(forward_project(img, geom), noise, RngState(args.seed).child(i))
            measured = reduce_sinogram(full, v)
            x, y = fbp(measured).data, fbp(full).data
            save_sinogram(out / f"{stem}_sino.ivct", measured, v)
            save_image(out / f"{stem}_input.ivct", x, geom, v, role="incomplete")
            save_image(out / f"{stem}_target.ivct", y, geom, v, role="full")
            meta = {"geometry": geom.summary(), "sampling": v.to_text()}
            write_png(out / f"{stem}_input.png", x, meta=meta)
            write_png(out / f"{stem}_target.png", y, meta=meta)
    except OSError as err:
        raise CliError(f"cannot write to {out}: {err}", EXIT_IO) from err
    print(f"simulated {len(images)} image(s), {v.popcount} of {len(v)} views -> {out}")
    return 0


TRAIN_DEFAULTS = {"geometry": "desk", "model": "desk", "dataset": "ellipses:200", "phantom": "shepp_logan", "noise": "on"}


def cmd_train(args) -> int:
    from .autograd import NonFiniteError
    from .model import desk_config, init_model, full_config
    from .physics import make_phantom
    from .training import PhantomDataset, TrainPlan, checkpoint_load, train

    cfg = {**TRAIN_DEFAULTS, **read_kv_file(args.config)}
    geom = build_geometry(cfg["geometry"], cfg)
    plan_keys = set(TrainPlan.__dataclass_fields__)
    unknown = set(cfg) - plan_keys - set(GEOMETRY_KEYS) - set(TRAIN_DEFAULTS) - {"photon_intensity", "gaussian_std"}
    if unknown:
        raise usage(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        plan = TrainPlan.from_dict({k: v for k, v in cfg.items() if k in plan_keys})
    except (ValueError, TypeError) as err:
        raise usage(f"invalid training plan: {err}") from err
    images, _ = load_images(cfg["dataset"], geom.image_size, plan.seed)
    phantom = make_phantom(cfg["phantom"], geom.image_size).data
    dataset = PhantomDataset(images, geom, noise_from(cfg["noise"], cfg), phantom, plan.seed)

    start, opt = 0, None
    if args.resume:
        state = load_model(args.resume)
        model, opt, start = state.model, state.opt, state.step
    else:
        mcfg = {"desk": desk_config, "full": full_config}.get(cfg["model"])
        if mcfg is None:
            raise usage(f"unknown model preset {cfg['model']!r}")
        model = init_model(mcfg(geom.n_full_views) if cfg["model"] == "desk" else mcfg(), plan.seed)
    if model.config.n_full_views != geom.n_full_views:
        raise CliError("checkpoint view count does not match the geometry", EXIT_MISMATCH)

    out = Path(args.out)
    losses = []
    try:
        train(model, dataset, plan, out, opt=opt, start_step=start, log=lambda r: losses.append(float(r["loss"])))
    except NonFiniteError as err:
        out.mkdir(parents=True, exist_ok=True)
        (out / "diagnostic.txt").write_text(f"{err}\n")
        print(f"non-finite value: {err}", file=sys.stderr)
        return EXIT_NONFINITE
    except OSError as err:
        raise CliError(f"cannot write to {out}: {err}", EXIT_IO) from err
    tail = losses[-min(len(losses), 50) :] if losses else [float("nan")]
    summary = f"steps={start + len(losses)}\nfinal_loss_mean50={np.mean(tail):.6f}\n"
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    return 0


def _context_pair(args, geom, v, seed):
    from .autograd import RngState
    from .io import load_image
    from .physics import NoiseModel, make_phantom
    from .training import incomplete_fbp, simulate_full

    if "," in args.context:
        paths = args.context.split(",")
        try:
            pair = [load_image(p)[0] for p in paths]
        except OSError as err:
            raise CliError(f"cannot read context: {err}", EXIT_IO) from err
        return np.stack(pair)
    try:
        phantom = make_phantom(args.context, geom.image_size).data
    except ValueError as err:
        raise usage(str(err)) from err
    rows, full = simulate_full(phantom, geom, NoiseModel(), RngState(seed).child("phantom"))
    return np.stack([incomplete_fbp(rows, v, geom), full])


def cmd_reconstruct(args) -> int:
    from .io import FormatError, geometry_from_dict, load_image, load_sinogram, read_array, write_png, save_image
    from .metrics import psnr
    from .physics import fbp
    from .sampling import SamplingError, SamplingVector

    state = load_model(args.ckpt)
    model = state.model
    try:
        _, header = read_array(args.input)
    except OSError as err:
        raise CliError(f"cannot read {args.input}: {err}", EXIT_IO) from err
    except FormatError as err:
        raise CliError(str(err), EXIT_IO) from err
    sino = None
    v = None
    if header.get("kind") == "sinogram":
        sino, v = load_sinogram(args.input)
        geom = sino.geometry
        x = fbp(sino).data
    else:
        x, header = load_image(args.input)
        geom = geometry_from_dict(header["geometry"]) if "geometry" in header else build_geometry(args.geometry)
        if "sampling" in header:
            v = SamplingVector.from_text(header["sampling"])
    if args.sampling:
        try:
            v = SamplingVector.from_text(Path(args.sampling).read_text())
        except OSError as err:
            raise CliError(f"cannot read {args.sampling}: {err}", EXIT_IO) from err
        except (SamplingError, ValueError) as err:
            raise usage(f"bad sampling vector file: {err}") from err
    if v is None:
        raise usage("no sampling vector: pass --sampling or an input carrying one")
    if len(v) != model.config.n_full_views or len(v) != geom.n_full_views:
        raise CliError(
            f"sampling vector has {len(v)} views; checkpoint expects {model.config.n_full_views}, geometry {geom.n_full_views}",
            EXIT_MISMATCH,
        )
    if sino is not None and not np.array_equal(sino.view_indices, v.indices):
        raise CliError("sinogram rows do not match the sampling vector", EXIT_MISMATCH)
    context = _context_pair(args, geom, v, args.seed)
    if context.shape[1:] != x.shape:
        raise CliError(f"context {context.shape[1:]} does not match input {x.shape}", EXIT_MISMATCH)

    from .autograd import no_grad

    with no_grad():
        y = model(x[None, None].astype(np.float32), context[None].astype(np.float32), v).data[0, 0].astype(np.float64)
    outputs = {"proct": y}
    if args.dual == "on":
        if not args.dual_ckpt or sino is None:
            raise usage("--dual on needs --dual-ckpt and a sinogram input")
        from .dual import dual_forward, dual_load

        try:
            net, meta = dual_load(args.dual_ckpt)
        except OSError as err:
            raise CliError(f"cannot read {args.dual_ckpt}: {err}", EXIT_IO) from err
        except (FormatError, KeyError) as err:
            raise CliError(str(err), EXIT_MISMATCH) from err
        if meta.get("parent") and meta["parent"] != state.checksum:
            raise CliError("dual checkpoint was trained on a different ProCT checkpoint", EXIT_MISMATCH)
        with no_grad():
            _, _, fused, _ = dual_forward(
                x[None, None].astype(np.float32), sino.data[None], v, context[None].astype(np.float32), model, net, geom
            )
        outputs["proct-dual"] = fused.data[0, 0].astype(np.float64)

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, img in outputs.items():
            save_image(out / f"{name}.ivct", img, geom, v, checkpoint=state.checksum)
            write_png(out / f"{name}.png", img, meta={"geometry": geom.summary(), "sampling": v.to_text()})
    except OSError as err:
        raise CliError(f"cannot write to {out}: {err}", EXIT_IO) from err
    change = float(np.linalg.norm(y - x) / max(np.linalg.norm(x), 1e-12))
    print(f"relative change from input: {change:.4f}")
    if args.target:
        try:
            target, _ = load_image(args.target)
        except OSError as err:
            raise CliError(f"cannot read {args.target}: {err}", EXIT_IO) from err
        print(f"psnr input {psnr(x, target):.2f} dB")
        for name, img in outputs.items():
            print(f"psnr {name} {psnr(img, target):.2f} dB")
    return 0


def _run_eval(args, settings) -> int:
    from .evaluate import evaluate, plot_profile
    from .physics import make_phantom

    from .sampling import SamplingError

    geom = build_geometry(args.geometry)
    for t in settings:
        try:
            t.vector(geom.n_full_views, geom.angular_span)
        except (SamplingError, ValueError) as err:
            raise usage(f"setting {t.to_text()}: {err}") from err
    model, checksum, dual = None, "", None
    if args.ckpt:
        state = load_model(args.ckpt)
        model, checksum = state.model, state.checksum
        if model.config.n_full_views != geom.n_full_views:
            raise CliError("checkpoint view count does not match the geometry", EXIT_MISMATCH)
        if args.dual_ckpt:
            from .dual import dual_load

            dual, _ = dual_load(args.dual_ckpt)
    images, names = load_images(args.dataset, geom.image_size, args.seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        report = evaluate(
            model,
            images,
            settings,
            geom,
            out / "report.csv",
            phantom=make_phantom("shepp_logan", geom.image_size).data,
            noise=noise_from(args.noise),
            seed=args.seed,
            names=names,
            dual=dual,
            panels_dir=out / "panels" if args.panels else None,
            checksum=checksum,
        )
        plot_profile(report, out / "profile.png")
    except OSError as err:
        raise CliError(f"cannot write to {out}: {err}", EXIT_IO) from err
    for r in report.rows:
        print(f"{r['setting']:>14} {r['method']:>10}  PSNR {r['psnr_mean']:6.2f}  SSIM {r['ssim_mean']:.4f}  n={r['count']}")
    return 0


def cmd_eval(args) -> int:
    return _run_eval(args, parse_settings(args.settings))


def cmd_sweep(args) -> int:
    settings = parse_settings(args.settings) if args.settings else parse_range(args.scenario, args.range or "")
    return _run_eval(args, settings)


# -- parser ----------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ivct", description="Incomplete-view CT simulation, training and evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="project phantoms or images and write incomplete/full reconstructions")
    s.add_argument("--geometry", default="desk", help="desk, full or a key=value geometry file")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--input", help="directory of grayscale images")
    src.add_argument("--phantom", default="shepp_logan", choices=["shepp_logan", "random_ellipses"])
    s.add_argument("--scenario", required=True, choices=["svct", "lact", "hybrid"])
    s.add_argument("--setting", required=True, help="N_view (svct), end or start-end angle (lact), mode:A,B (hybrid)")
    s.add_argument("--noise", default="on", choices=["on", "off"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train a model from a key=value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="restore one image with a trained checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--input", required=True, help=".ivct image or sinogram")
    r.add_argument("--sampling", help="sampling-vector text file")
    r.add_argument("--context", default="shepp_logan", help="phantom kind or 'incomplete.ivct,full.ivct'")
    r.add_argument("--dual", default="off", choices=["on", "off"])
    r.add_argument("--dual-ckpt")
    r.add_argument("--target", help=".ivct ground truth for PSNR")
    r.add_argument("--geometry", default="desk")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    for name, fn, helptext in (("eval", cmd_eval, "evaluate over a list of settings"), ("sweep", cmd_sweep, "performance profile over a range")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--ckpt")
        e.add_argument("--dual-ckpt")
        e.add_argument("--dataset", required=True, help="image directory or ellipses:N")
        e.add_argument("--settings", required=(name == "eval"), help="comma list, e.g. svct:18,svct:36,lact:90")
        if name == "sweep":
            e.add_argument("--scenario", default="svct", choices=["svct", "lact"])
            e.add_argument("--range", help="start:stop:step")
        e.add_argument("--geometry", default="desk")
        e.add_argument("--noise", default="on", choices=["on", "off"])
        e.add_argument("--panels", action="store_true")
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--out", required=True)
        e.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(f"ivct {args.command}: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
