"""``sdflow`` command line: synth-data, train, sr, downscale, verify, eval.

Exit codes: 0 ok, 1 verification failure, 2 usage, 3 I/O, 4 divergence,
5 checkpoint/config mismatch.
"""
import argparse
import json
import os
import sys

import numpy as np
import torch

from . import config as cfgmod
from .errors import CheckpointError, ConfigError, ParameterError, ShapeError, TrainingDivergenceError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5


def _set_threads(cfg):
    n = cfg.get("threads", 0) or int(os.environ.get("SDFLOW_THREADS", "0") or 0)
    if n > 0:
        torch.set_num_threads(n)


def _config(args, **flags):
    cfg = cfgmod.load(args.config, args.set or ())
    for k, v in flags.items():
        if v is not None:
            cfg.set(k, v)
    _set_threads(cfg)
    return cfg


def _images(path):
    if os.path.isdir(path):
        names = sorted(f for f in os.listdir(path) if f.lower().endswith(".png"))
        return [os.path.join(path, n) for n in names]
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return [path]


# -- commands --------------------------------------------------------------------

def cmd_synth_data(args):
    from .data import synth_corpus, write_corpus
    cfg = _config(args, n_images=args.n, size=args.size, scale=args.scale, data_seed=args.seed)
    corpus = synth_corpus(cfg["n_images"], cfg["size"], cfg["scale"], cfg["data_seed"])
    write_corpus(corpus, args.out)
    blur = [p.blur_sigma for p in corpus.theta]
    noise = [p.noise_sigma for p in corpus.theta]
    print(f"wrote {len(corpus)} HR ({cfg['size']}px) + LR ({cfg['size'] // cfg['scale']}px) images to {args.out}")
    print(f"blur sigma [{min(blur):.3f}, {max(blur):.3f}]  noise sigma [{min(noise):.4f}, {max(noise):.4f}]")
    print("splits " + " ".join(f"{k}={len(v)}" for k, v in corpus.splits.items()))
    return EXIT_OK


def cmd_train(args):
    from .data import load_corpus
    from .trainer import PHASES, load_checkpoint, train
    cfg = _config(args, seed=args.seed, dtype=args.dtype)
    if args.iters is not None:
        if args.phase == "all":
            raise ConfigError("--iters needs --phase pretrain, forward or finetune")
        cfg.set(f"iters_{args.phase}", args.iters)
    tc = cfg.train_config()
    if not os.path.isdir(os.path.join(args.data, "hr")):
        raise FileNotFoundError(f"no corpus at {args.data}")
    corpus = load_corpus(args.data, tc.model.scale)
    os.makedirs(args.out, exist_ok=True)
    ck = os.path.join(args.out, "model.ckpt")
    state = load_checkpoint(args.resume, tc) if args.resume else None
    if args.phase != "all" and state is None and args.phase != PHASES[0]:
        print(f"note: starting phase {args.phase} from a fresh model", file=sys.stderr)
    with open(os.path.join(args.out, "run.cfg"), "w") as f:
        f.write(cfg.to_text())

    def progress(row):
        if args.verbose and row["iter"] % args.verbose == 0:
            print(f"iter {row['iter']} phase {row['phase']} total {row['total']:.5f}", flush=True)

    state, rows = train(tc, corpus, state, args.phase, os.path.join(args.out, "loss.csv"), ck,
                        args.checkpoint_every, progress)
    print(f"trained to iteration {state.iteration}; checkpoint {ck}")
    return EXIT_OK


def _load_model(args):
    """Checkpoint with its stored configuration, optionally overridden by --config/--set."""
    from . import checkpoint as ckpt
    from .trainer import load_checkpoint
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(args.checkpoint)
    entries = ckpt.read_entries(args.checkpoint)
    if "meta.config" not in entries:
        raise CheckpointError(f"{args.checkpoint}: no meta.config entry")
    cfg = cfgmod.RunConfig.from_text(ckpt.entry_text(entries["meta.config"]))
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            cfg = cfgmod.RunConfig.from_text(f.read(), cfg)
    for item in args.set or ():
        k, _, v = item.partition("=")
        cfg.set(k.strip(), v)
    state = load_checkpoint(args.checkpoint, cfg.train_config())
    state.model.eval()
    return state


def _generate(args, direction):
    from .data import read_png, to_tensor, to_uint8, write_png
    from .evaluate import ds_samples, image_generator, sr_samples
    from .metrics import diversity
    from .numerics import precision
    _set_threads(cfgmod.load(args.config, args.set or ()))
    state = _load_model(args)
    model = state.model
    os.makedirs(args.out, exist_ok=True)
    divs = []
    with precision(state.dtype), torch.no_grad():
        for k, path in enumerate(_images(args.input)):
            img = to_tensor(read_png(path))
            gen = image_generator(args.seed, k)
            if direction == "sr":
                outs = sr_samples(model, img, args.tau, args.n_samples, gen)
            else:
                outs = ds_samples(model, img, args.tau, args.n_samples, gen)
            name = os.path.splitext(os.path.basename(path))[0]
            for j, o in enumerate(outs):
                write_png(os.path.join(args.out, f"{name}_s{j}.png"), to_uint8(o))
            if len(outs) > 1:
                divs.append(diversity(outs))
            print(f"{name}: {tuple(img.shape[-2:])} -> {tuple(outs[0].shape[-2:])}, {len(outs)} samples")
    if divs:
        print(f"diversity {float(np.mean(divs)):.4f}")
    return EXIT_OK


def cmd_sr(args):
    return _generate(args, "sr")


def cmd_downscale(args):
    return _generate(args, "ds")


def cmd_verify(args):
    from . import verify
    checks, timings = verify.run_all(args.suites, args.seed)
    report = {"checks": [c.as_dict() for c in checks], "seconds": timings,
              "passed": all(c.passed for c in checks)}
    print("suite,check,value,tolerance,passed,detail")
    for c in checks:
        print(f"{c.suite},{c.name},{c.value:.6g},{c.tol:g},{'PASS' if c.passed else 'FAIL'},\"{c.detail}\"")
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report, f, indent=2)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_eval(args):
    from . import evaluate as ev
    from .data import load_corpus
    from .numerics import precision
    from .trainer import read_log
    cfg = _config(args, n_samples=args.n_samples)
    state = _load_model(args)
    if not os.path.isdir(os.path.join(args.data, "hr")):
        raise FileNotFoundError(f"no corpus at {args.data}")
    corpus = load_corpus(args.data, state.model.scale)
    ids = corpus.splits[args.split]
    os.makedirs(args.out, exist_ok=True)
    taus = tuple(float(t) for t in args.taus.split(",")) if args.taus else (0.0, 0.8)
    with precision(state.dtype):
        rows, summary = ev.evaluate(state.model, corpus, ids, taus, cfg["n_samples"], args.seed)
        ev.write_rows(os.path.join(args.out, "metrics.csv"), rows)
        ev.write_summary(os.path.join(args.out, "summary.json"), summary)
        for k in sorted(summary):
            print(f"{k},{summary[k]:.6g}")
        if args.sweep:
            from .plotting import plot_tau_sweep
            sweep = ev.tau_sweep(state.model, corpus, ids, cfg["taus"], cfg["n_samples"], args.seed)
            ev.write_sweep(os.path.join(args.out, "tau_sweep.csv"), sweep)
            plot_tau_sweep(sweep, os.path.join(args.out, "tau_sweep.png"))
            print("tau,sr_psnr_y,sr_diversity,ds_psnr_y,ds_diversity")
            for r in sweep:
                print(f"{r['tau']:g},{r['sr_psnr_y']:.4f},{r['sr_diversity']:.4f},"
                      f"{r['ds_psnr_y']:.4f},{r['ds_diversity']:.4f}")
    if args.log:
        from .plotting import plot_losses
        plot_losses(read_log(args.log), os.path.join(args.out, "losses.png"))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="sdflow", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Bidirectional flow for unpaired super-resolution and downscaling.",
        epilog="config keys (flat key = value file, '#' comments; --set KEY=VALUE overrides):\n"
               + cfgmod.help_text() + "\n\nSDFLOW_THREADS caps torch worker threads.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("synth-data", help="write a synthetic HR/LR corpus")
    common(sp)
    sp.add_argument("--out", default="corpus")
    sp.add_argument("--n", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--scale", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("train", help="train (or resume) a model")
    common(sp)
    sp.add_argument("--data", default="corpus")
    sp.add_argument("--out", default="run")
    sp.add_argument("--phase", choices=["pretrain", "forward", "finetune", "all"], default="all")
    sp.add_argument("--iters", type=int, help="length of the selected phase")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--dtype", choices=["float32", "float64"])
    sp.add_argument("--checkpoint-every", type=int, default=250)
    sp.add_argument("--verbose", type=int, default=0, metavar="N", help="print every N iterations")
    sp.set_defaults(func=cmd_train)

    for name, func, what in (("sr", cmd_sr, "super-resolve LR images"),
                             ("downscale", cmd_downscale, "downscale HR images")):
        sp = sub.add_parser(name, help=what)
        common(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--input", required=True, help="PNG file or directory")
        sp.add_argument("--out", default="out")
        sp.add_argument("--tau", type=float, default=0.0)
        sp.add_argument("--n-samples", type=int, default=1)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=func)

    sp = sub.add_parser("verify", help="run the invertibility, logdet and gradient suites")
    sp.add_argument("--suites", nargs="+", default=["invertibility", "logdet", "gradient"],
                    choices=["invertibility", "logdet", "gradient"])
    sp.add_argument("--report", help="write the JSON report here")
    sp.add_argument("--seed", type=int, default=0, help="base seed of the random cases")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("eval", help="metrics on a held-out split, optional temperature sweep")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", default="corpus")
    sp.add_argument("--split", choices=["train", "val", "test"], default="test")
    sp.add_argument("--out", default="eval")
    sp.add_argument("--taus", help="comma-separated temperatures (default 0,0.8)")
    sp.add_argument("--n-samples", type=int)
    sp.add_argument("--sweep", action="store_true", help="also run the temperature sweep")
    sp.add_argument("--log", help="loss.csv to plot")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError, ParameterError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
