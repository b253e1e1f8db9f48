"""Command-line entry point: ``decun <command> ...``.

Commands: deblur, simulate, train, eval, gen-kernels, gen-scenes. Every run
writes one JSON manifest (command, configuration, seeds, input hashes,
output paths, wall-clock time). Exit codes: 0 success, 2 bad arguments,
3 file or format problems, 4 numerical failures. ``DECUN_THREADS`` sets the
FFT worker count.
"""

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

from . import __version__
from .convergence import reference_instance, simulate
from .errors import (ConvergenceError, DegenerateReferenceError, DimensionError,
                     DivergenceError, IllPosedError, ImageFormatError, ModelFileError,
                     ModelValidityError, NumericalInstabilityError, ParameterError)
from .hqs import HqsConfig, hqs_run
from .imaging import (load_image, load_kernel, psnr, save_kernel, ssim, store_image,
                      synthetic_scene)
from .network import ScheduleSpec, decun_forward, load_model, save_model
from .training import (TrainConfig, evaluate_hqs, evaluate_model, initial_model,
                       random_kernels, synthesize_dataset, train, write_history)

EXIT_ARGS = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

IMAGE_SUFFIXES = (".pgm", ".png")


class UsageError(Exception):
    pass


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest_path(output):
    return Path(str(output) + ".manifest.json")


def write_manifest(path, command, config, seeds, inputs, outputs, started, results=None):
    data = {
        "command": command,
        "version": __version__,
        "argv": sys.argv[1:],
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "duration_s": round(time.perf_counter() - started, 3),
    }
    if results is not None:
        data["results"] = results
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def parse_params(text):
    """``"xi=0.5,gamma=0.5"`` -> ``{"xi": 0.5, "gamma": 0.5}``."""
    out = {}
    if not text:
        return out
    for item in text.split(","):
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"bad --params entry {item!r}; expected key=value")
        try:
            out[key.strip()] = float(value)
        except ValueError as exc:
            raise UsageError(f"bad number in --params entry {item!r}") from exc
    return out


def schedule_from_args(kind, params):
    try:
        if kind == "exp":
            xi = params.get("xi", 0.5)
            return ScheduleSpec.exponential(xi, params.get("gamma", xi))
        if kind == "pseries":
            return ScheduleSpec.p_series(params.get("p", 1.0))
        if kind == "random":
            return ScheduleSpec.gaussian_random(int(params.get("seed", 0)),
                                                params.get("sigma_slope", 1.0 / 60.0))
        return ScheduleSpec.zero()
    except ParameterError as exc:
        raise UsageError(str(exc)) from exc


def list_images(directory):
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no .pgm/.png images in {directory}")
    return files


def load_dataset(data_dir, noise_sigma, seed):
    """Pairs from ``data_dir/sharp`` images and ``data_dir/kernels`` files.

    Image ``i`` (sorted by name) is blurred by kernel ``i mod K``.
    """
    data_dir = Path(data_dir)
    images = list_images(data_dir / "sharp")
    kdir = data_dir / "kernels"
    kernel_files = sorted(kdir.glob("*.txt")) if kdir.is_dir() else []
    if not kernel_files:
        raise FileNotFoundError(f"no kernel files in {kdir}")
    pairs = synthesize_dataset([load_image(p) for p in images], 0, noise_sigma, seed,
                               pairing="cycle", kernels=[load_kernel(p) for p in kernel_files])
    return pairs, images + kernel_files


def cmd_deblur(args, started):
    y = load_image(args.image)
    kernel = load_kernel(args.kernel)
    inputs = [args.image, args.kernel]
    if args.model:
        model = load_model(args.model)
        inputs.append(args.model)
        u, _ = decun_forward(model, y, kernel)
        config = {"solver": "decun", "model": str(args.model)}
    else:
        hqs = HqsConfig(mu=args.mu, beta=args.beta, iterations=args.iters)
        u, _ = hqs_run(y, kernel, hqs)
        config = {"solver": "hqs", "mu": args.mu, "beta": args.beta, "iters": args.iters}
    store_image(u, args.out)
    results = None
    if args.reference:
        ref = load_image(args.reference)
        inputs.append(args.reference)
        # metrics on the stored (quantised) output, as a viewer would see it
        restored = load_image(args.out)
        results = {"psnr": psnr(ref, restored), "ssim": ssim(ref, restored)}
        print(f"PSNR {results['psnr']:.4f} dB  SSIM {results['ssim']:.6f}")
    write_manifest(args.manifest or manifest_path(args.out), "deblur", config, {},
                   inputs, [args.out], started, results)


def cmd_simulate(args, started):
    schedule = schedule_from_args(args.schedule, parse_params(args.params))
    if args.layers < 1 or args.fixed_point_iters < 1:
        raise UsageError("--layers and --fixed-point-iters must be >= 1")
    instance = reference_instance(size=args.size, layers=args.layers, seed=args.seed)
    result = simulate(instance, schedule, layers=args.layers,
                      fixed_point_iters=args.fixed_point_iters)
    result.trace.write_csv(args.trace)
    final = float(result.trace.error[-1])
    print(f"{schedule.kind}: error at l={args.layers} is {final:.6e}"
          f"{'  (divergent)' if result.divergent else ''}")
    config = {"schedule": schedule.to_dict(), "layers": args.layers,
              "fixed_point_iters": args.fixed_point_iters, "size": args.size}
    results = {"final_error": final, "lambda_max": result.lambda_max,
               "divergent": result.divergent,
               "fixed_point_residual": result.fixed_point.residual}
    write_manifest(args.manifest or manifest_path(args.trace), "simulate", config,
                   {"instance": args.seed}, [], [args.trace], started, results)


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ImageFormatError(f"{path}: malformed JSON ({exc})") from exc


def cmd_train(args, started):
    raw = read_json(args.config)
    if not isinstance(raw, dict):
        raise UsageError("training config must be a JSON object")
    model_opts = raw.pop("model", {})
    data_opts = raw.pop("data", {})
    try:
        config = TrainConfig.from_dict(raw)
    except (ParameterError, TypeError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc
    noise = float(data_opts.get("noise_sigma", 0.01))
    data_seed = int(data_opts.get("seed", config.seed))
    pairs, data_files = load_dataset(args.data_dir, noise, data_seed)
    inputs = [args.config] + data_files
    if args.init_model:
        model = load_model(args.init_model)
        inputs.append(args.init_model)
    else:
        opts = dict(model_opts)
        if "schedule" in opts:
            opts["schedule"] = ScheduleSpec.from_dict(opts["schedule"])
        model = initial_model(e_norm_bound=config.e_norm_bound, **opts)
    trained, history = train(model, pairs, config)
    out = Path(args.out_model)
    save_model(trained, out)
    history_path = out.with_name(out.name + ".history.csv")
    write_history(history, history_path)
    psnr_val, ssim_val = evaluate_model(trained, pairs)
    results = {"final_loss": history[-1] if history else None,
               "train_psnr": psnr_val, "train_ssim": ssim_val,
               "beta_bar": trained.beta_bar, "parameters": trained.parameter_count}
    print(f"trained {trained.parameter_count} parameters for {config.steps} steps; "
          f"train PSNR {psnr_val:.3f} dB")
    write_manifest(args.manifest or manifest_path(out), "train",
                   {"train": config.to_dict(), "model": model_opts, "data": data_opts},
                   {"train": config.seed, "data": data_seed}, inputs,
                   [out, history_path], started, results)


def cmd_eval(args, started):
    pairs, inputs = load_dataset(args.data_dir, args.noise_sigma, args.seed)
    if args.model:
        model = load_model(args.model)
        inputs.append(args.model)
        label = Path(args.model).name
        mean_psnr, mean_ssim = evaluate_model(model, pairs)
        config = {"solver": "decun", "model": str(args.model)}
    else:
        hqs = HqsConfig(mu=args.mu, beta=args.beta, iterations=args.iters)
        label = f"hqs(beta={args.beta:g},iters={args.iters})"
        mean_psnr, mean_ssim = evaluate_hqs(hqs, pairs)
        config = {"solver": "hqs", "mu": args.mu, "beta": args.beta, "iters": args.iters}
    print(f"{'model':<32} {'pairs':>5} {'PSNR':>9} {'SSIM':>8}")
    print(f"{label:<32} {len(pairs):>5} {mean_psnr:>9.4f} {mean_ssim:>8.5f}")
    config.update(noise_sigma=args.noise_sigma)
    default = Path(args.model or args.data_dir)
    path = args.manifest or default.with_name(default.name + ".eval.manifest.json")
    write_manifest(path, "eval", config, {"noise": args.seed}, inputs, [], started,
                   {"pairs": len(pairs), "mean_psnr": mean_psnr, "mean_ssim": mean_ssim})


def cmd_gen_kernels(args, started):
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, k in enumerate(random_kernels(args.count, args.seed, args.max_length)):
        path = out / f"kernel_{i:04d}.txt"
        save_kernel(k, path)
        paths.append(path)
    write_manifest(args.manifest or out / "kernels.manifest.json", "gen-kernels",
                   {"count": args.count, "max_length": args.max_length},
                   {"kernels": args.seed}, [], paths, started)


def cmd_gen_scenes(args, started):
    if args.count < 1 or args.size < 11:
        raise UsageError("--count must be >= 1 and --size >= 11")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(args.count):
        path = out / f"scene_{i:04d}.pgm"
        store_image(synthetic_scene(args.size, args.seed + i), path)
        paths.append(path)
    write_manifest(args.manifest or out / "scenes.manifest.json", "gen-scenes",
                   {"count": args.count, "size": args.size}, {"scenes": args.seed},
                   [], paths, started)


def build_parser():
    parser = argparse.ArgumentParser(prog="decun", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"decun {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def manifest_opt(p):
        p.add_argument("--manifest", help="manifest path (default: next to the output)")

    p = sub.add_parser("deblur", help="restore one image with HQS or a DECUN model")
    p.add_argument("--image", required=True)
    p.add_argument("--kernel", required=True)
    solver = p.add_mutually_exclusive_group(required=True)
    solver.add_argument("--model")
    solver.add_argument("--hqs", action="store_true")
    p.add_argument("--mu", type=float, default=5e4)
    p.add_argument("--beta", type=float, default=256.0)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--out", required=True)
    p.add_argument("--reference")
    manifest_opt(p)

    p = sub.add_parser("simulate", help="convergence trace on the reference instance")
    p.add_argument("--schedule", required=True, choices=["exp", "pseries", "random", "zero"])
    p.add_argument("--params", default="",
                   help="e.g. xi=0.5,gamma=0.5 | p=2 | seed=3,sigma_slope=0.0167")
    p.add_argument("--layers", type=int, default=30)
    p.add_argument("--fixed-point-iters", type=int, default=500)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", required=True)
    manifest_opt(p)

    p = sub.add_parser("train", help="train a DECUN model")
    p.add_argument("--config", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-model", required=True)
    p.add_argument("--init-model")
    manifest_opt(p)

    p = sub.add_parser("eval", help="mean PSNR/SSIM over a data directory")
    solver = p.add_mutually_exclusive_group(required=True)
    solver.add_argument("--model")
    solver.add_argument("--hqs", action="store_true")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--mu", type=float, default=5e4)
    p.add_argument("--beta", type=float, default=256.0)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    manifest_opt(p)

    p = sub.add_parser("gen-kernels", help="random linear motion kernels")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-length", type=float, default=20.0)
    manifest_opt(p)

    p = sub.add_parser("gen-scenes", help="synthetic sharp test images")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    manifest_opt(p)
    return parser


COMMANDS = {
    "deblur": cmd_deblur,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gen-kernels": cmd_gen_kernels,
    "gen-scenes": cmd_gen_scenes,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage and 0 for --help/--version
        return exc.code
    started = time.perf_counter()
    try:
        COMMANDS[args.command](args, started)
    except (UsageError, ParameterError, DimensionError, ModelValidityError) as exc:
        print(f"decun: error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (OSError, ImageFormatError, ModelFileError) as exc:
        print(f"decun: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (IllPosedError, ConvergenceError, DivergenceError, NumericalInstabilityError,
            DegenerateReferenceError, FloatingPointError) as exc:
        print(f"decun: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
