"""Command-line interface: ``lrrfuse <command> ...``.

Exit codes: 0 when every requested artifact was written, 1 for runtime
failures (divergence, non-finite gradients, failed gradient check), 2 for
bad input (missing files, shape or format errors, invalid flags).  Outputs
written before a failure are removed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import llrr, lista, lrrw
from . import network as net
from .errors import ContractError, DivergenceError, FormatError, GradientError, LrrError, PairingError, ShapeError
from .imageio import read_gray, write_gray
from .loss import LossConfig
from .trainer import TrainConfig

log = logging.getLogger("lrrfuse")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


def resolve_threads(flag):
    if flag is not None:
        value, source = flag, "--threads"
    elif os.environ.get("LRRFUSE_THREADS"):
        value, source = os.environ["LRRFUSE_THREADS"], "LRRFUSE_THREADS"
    else:
        return os.cpu_count() or 1
    try:
        n = int(value)
    except ValueError:
        raise CliError(f"{source} must be a positive integer, got {value!r}")
    if n < 1:
        raise CliError(f"{source} must be a positive integer, got {n}")
    return n


@contextmanager
def outputs():
    """Collect written paths; remove them all if the block fails."""
    written = []
    try:
        yield written
    except BaseException:
        for p in written:
            try:
                Path(p).unlink()
            except FileNotFoundError:
                pass
        raise


def _require(path, what="model"):
    if not Path(path).is_file():
        raise CliError(f"{what} not found: {path}")


def _write_json(path, obj, written):
    lrrw.atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())
    written.append(path)


def _write_image(path, img, written):
    write_gray(path, img)
    written.append(path)


# -- commands --------------------------------------------------------------


def cmd_init(args):
    if args.kind == "dictionary":
        d = lista.dct_dictionary(args.patch_size, args.n_low)
        with outputs() as written:
            lista.save_dictionary(args.out, d, args.patch_size)
            written.append(args.out)
        print(f"wrote {args.patch_size}x{args.patch_size} DCT dictionary ({d.m1} base + {d.m2} salient atoms) to {args.out}")
    else:
        p = net.init_params(args.seed or 0, args.N, args.k, args.T)
        with outputs() as written:
            net.save_params(p, args.out)
            written.append(args.out)
        print(f"wrote LRRNet parameters (N={args.N}, k={args.k}, T={args.T}, {net.param_count(p)} scalars) to {args.out}")
    return EXIT_OK


def cmd_decompose(args):
    _require(args.input, "input image")
    _require(args.model)
    img = read_gray(args.input)
    base_path = f"{args.out_base}.base.{args.format}"
    sal_path = f"{args.out_base}.salient.{args.format}"
    side_path = f"{args.out_base}.json"

    if args.mode == "matrix":
        d, patch = lista.load_dictionary(args.model)
        from .estimators import LLRRDecomposer

        est = LLRRDecomposer(patch, dictionary=d, lam1=args.lam1, lam2=args.lam2, lam3=args.lam3, mu=args.mu, n_iter=args.iterations).fit()
        history = []
        P_l, P_s = est.decompose_image(img, history)
        diag = {"mode": "matrix", "patch_size": patch, "mu": est.mu_, "lam1": args.lam1, "lam2": args.lam2, "lam3": args.lam3, "iterations": history}
    else:
        p = net.load_params(args.model)
        branch, C_l, C_s = (p.branch_vi, p.C11, p.C12) if args.branch == "vi" else (p.branch_ir, p.C21, p.C22)
        its = []
        Z = llrr.stack_forward(img[None], branch, iterates=its)
        P_l, P_s = (t.data[0] for t in llrr.split_project(Z, C_l, C_s))
        N = branch.N
        diag = {
            "mode": "conv",
            "branch": args.branch,
            "iterations": [
                {"iteration": t, "nonzeros_low": int(np.count_nonzero(z.data[:N])), "nonzeros_sparse": int(np.count_nonzero(z.data[N:]))}
                for t, z in enumerate(its)
            ],
        }
    diag.update({"input": str(args.input), "model": str(args.model), "shape": list(img.shape), "version": __version__})
    with outputs() as written:
        _write_image(base_path, P_l, written)
        _write_image(sal_path, P_s, written)
        _write_json(side_path, diag, written)
    print(f"wrote {base_path}, {sal_path}, {side_path}")
    return EXIT_OK


def cmd_fuse(args):
    for path, what in ((args.ir, "infrared image"), (args.vi, "visible image")):
        _require(path, what)
    _require(args.model)
    p = net.load_params(args.model)
    ir, vi = read_gray(args.ir), read_gray(args.vi)
    if ir.shape != vi.shape:
        raise ShapeError(f"image sizes differ: infrared {ir.shape[1]}x{ir.shape[0]}, visible {vi.shape[1]}x{vi.shape[0]}")
    fused = net.fuse_image(ir, vi, p)
    if not np.isfinite(fused).all():
        raise CliError("fused output is not finite", EXIT_RUNTIME)
    with outputs() as written:
        _write_image(args.out, fused, written)
    print(f"wrote {args.out}")
    return EXIT_OK


TRAIN_FLAG_TYPES = {
    "learning_rate": float, "epochs": int, "batch_size": int, "image_size": int,
    "optimizer": ("adam", "sgd"), "adam_beta1": float, "adam_beta2": float, "adam_eps": float,
    "max_iterations": int, "checkpoint_every": int, "dtype": ("float64", "float32"),
    "N": int, "k": int, "T": int,
}
LOSS_FLAG_TYPES = {f.name: float for f in fields(LossConfig)}
LOSS_FLAG_TYPES.update(backbone=("tiny-test", "vgg16-file"), backbone_path=str)


def _train_config(args):
    values = {}
    if args.config:
        _require(args.config, "config file")
        try:
            values = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"config file is not valid JSON: {exc}")
        if not isinstance(values, dict) or any(isinstance(v, (dict, list)) for v in values.values()):
            raise CliError("config file must be a flat JSON object")
    for name in list(TRAIN_FLAG_TYPES) + list(LOSS_FLAG_TYPES):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if args.seed is not None:
        values["seed"] = args.seed
    return TrainConfig.from_flat(values)


def cmd_train(args):
    from . import trainer as tr

    cfg = _train_config(args)  # validated before touching any file
    threads = resolve_threads(args.threads)
    if args.synthetic:
        data = tr.synthetic_dataset(args.synthetic, cfg.image_size, cfg.seed)
    else:
        if not (args.ir_dir and args.vi_dir):
            raise CliError("train needs --ir-dir and --vi-dir, or --synthetic N")
        data = tr.load_dataset(args.ir_dir, args.vi_dir, cfg.image_size)
        if len(data) == 0:
            raise CliError("training directories hold no image pairs")
    if args.init:
        _require(args.init)
        init = net.load_params(args.init)
    else:
        init = net.init_params(cfg.seed, cfg.N, cfg.k, cfg.T)
    trace_path = args.trace or str(Path(args.out).with_suffix(".csv"))
    ckpt_dir = args.checkpoint_dir or str(Path(args.out).parent)

    def progress(row):
        log.info("iter %d total %.6g (pixel %.4g shallow %.4g middle %.4g deep %.4g)", row["iter"], row["total"], row["pixel"], row["shallow"], row["middle"], row["deep"])

    with outputs() as written:
        if cfg.checkpoint_every:
            Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
        try:
            params, trace = tr.train(cfg, data, init, checkpoint_dir=ckpt_dir, threads=threads, on_iteration=progress)
        finally:
            if cfg.checkpoint_every:
                written.extend(sorted(Path(ckpt_dir).glob("checkpoint_*.lrrw")))
        params.metadata.update({"train_config": json.dumps(cfg.to_dict(), sort_keys=True), "iterations": len(trace)})
        net.save_params(params, args.out)
        written.append(args.out)
        tr.write_trace(trace_path, trace)
        written.append(trace_path)
    last = trace[-1]["total"] if trace else float("nan")
    print(f"trained {len(trace)} iterations, final total loss {last:.6g}; wrote {args.out} and {trace_path}")
    return EXIT_OK


def cmd_eval(args):
    from .metrics import evaluate_report, write_report

    report = evaluate_report(args.fused_dir, args.ir_dir, args.vi_dir, threads=resolve_threads(args.threads))
    with outputs() as written:
        write_report(report, args.out, args.text)
        written.append(args.out)
        if args.text:
            written.append(args.text)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_check_grad(args):
    from . import gradcheck

    results = gradcheck.run_suite(args.seed or 0, inject_fault=args.inject_fault)
    worst = gradcheck.summarize(results)
    width = max(len(k) for k in worst)
    for fam, r in sorted(worst.items()):
        print(f"{fam.ljust(width)}  max rel err {r.error:.3e}  kink margin {r.margin:.2e}  worst at {r.op}  {'ok' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed (tolerance {gradcheck.TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


# -- parser ----------------------------------------------------------------


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random draw (default 0)")
    common.add_argument("--threads", default=None, help="worker threads (default: $LRRFUSE_THREADS, else all cores)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="lrrfuse", description="Low-rank/sparse decomposition and LRRNet image fusion.")
    parser.add_argument("--version", action="version", version=f"lrrfuse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[common], help="write fresh LRRNet parameters or a DCT dictionary")
    p.add_argument("--kind", choices=("lrrnet", "dictionary"), default="lrrnet")
    p.add_argument("--out", required=True)
    p.add_argument("--N", type=int, default=net.DEFAULT_CHANNELS)
    p.add_argument("--k", type=int, default=net.DEFAULT_KERNEL)
    p.add_argument("--T", type=int, default=net.DEFAULT_BLOCKS)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--n-low", type=int, default=None)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("decompose", parents=[common], help="split an image into base and salient parts")
    p.add_argument("--input", required=True)
    p.add_argument("--mode", choices=("matrix", "conv"), required=True)
    p.add_argument("--model", required=True, help="dictionary container (matrix) or LRRNet parameters (conv)")
    p.add_argument("--out-base", required=True)
    p.add_argument("--format", choices=("png", "pgm"), default="png")
    p.add_argument("--branch", choices=("vi", "ir"), default="vi", help="conv mode: which LRRNet branch to run")
    p.add_argument("--lam1", type=float, default=0.1)
    p.add_argument("--lam2", type=float, default=0.1)
    p.add_argument("--lam3", type=float, default=0.1)
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--iterations", type=int, default=10)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("fuse", parents=[common], help="fuse an infrared/visible pair")
    p.add_argument("--ir", required=True)
    p.add_argument("--vi", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train", parents=[common], help="train LRRNet on paired directories")
    p.add_argument("--ir-dir")
    p.add_argument("--vi-dir")
    p.add_argument("--synthetic", type=int, default=0, metavar="N", help="train on N generated pairs instead of directories")
    p.add_argument("--config", help="flat JSON file of TrainConfig/LossConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="loss trace CSV (default: model path with .csv)")
    p.add_argument("--init", help="start from these parameters instead of a fresh draw")
    p.add_argument("--checkpoint-dir")
    for name, typ in {**TRAIN_FLAG_TYPES, **LOSS_FLAG_TYPES}.items():
        if isinstance(typ, tuple):
            p.add_argument(_flag(name), dest=name, choices=typ)
        else:
            p.add_argument(_flag(name), dest=name, type=typ)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="quality metrics over fused/ir/vi triples")
    p.add_argument("--fused-dir", required=True)
    p.add_argument("--ir-dir", required=True)
    p.add_argument("--vi-dir", required=True)
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--text", help="also write the aligned text table here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check-grad", parents=[common], help="finite-difference audit of every gradient")
    p.add_argument("--inject-fault", action="store_true", help="scale tape gradients by 1.001 (negative control)")
    p.set_defaults(func=cmd_check_grad)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        if args.command != "train" and args.threads is not None:
            resolve_threads(args.threads)
        return args.func(args)
    except CliError as exc:
        print(f"lrrfuse {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"lrrfuse {args.command}: not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DivergenceError, GradientError) as exc:
        print(f"lrrfuse {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ShapeError, FormatError, PairingError, ContractError, LrrError) as exc:
        print(f"lrrfuse {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
