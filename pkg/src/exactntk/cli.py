"""Command-line drivers.

Exit codes: 0 success, 1 a verification check failed, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cntk import Arch, CntkConfig, cntk_cross, cntk_matrix
from .data_io import (LabeledDataset, downsample, read_cifar10_bin, read_kernel,
                      synthetic_sphere_dataset, unit_normalize, write_kernel)
from .finite_net import (CnnArch, MlpArch, TrainState, empirical_gram, empirical_kernel, forward,
                         init_net, random_feature_kernel, squared_loss, train_full_batch)
from .kernel_regression import (KernelMatrix, accuracy, classify, encode_labels, fit,
                                per_class_accuracy, predict)
from .ntk_fc import ntk_cross, ntk_matrix, ntk_pair
from .parallel import default_threads
from .tensor_core import PatchGeometry

log = logging.getLogger("exactntk")

KERNELS = ("fc-ntk", "cntk-vanilla", "cntk-gap")


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _shape(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.lower().replace("x", ",").split(",") if t.strip())


def _add_dataset_args(p):
    g = p.add_argument_group("dataset")
    g.add_argument("--cifar", nargs="+", metavar="PATH",
                   help="CIFAR-10 binary batch file(s)")
    g.add_argument("--classes", type=_int_list, default=None,
                   help="keep only these CIFAR classes, e.g. 0,1")
    g.add_argument("--synthetic", type=int, metavar="N",
                   help="use N synthetic unit-norm samples instead of CIFAR")
    g.add_argument("--shape", type=_shape, default=(8, 8, 3),
                   help="synthetic sample shape: D or PxQxC (default 8x8x3)")
    g.add_argument("--num-classes", type=int, default=2, help="classes for synthetic data")
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--limit", type=int, default=None, help="max records to read")
    g.add_argument("--downsample", type=int, default=1, help="average-pool factor")
    g.add_argument("--normalize", action="store_true", help="scale each input to unit norm")


def _add_kernel_args(p, default_depth=2):
    p.add_argument("--kernel", choices=KERNELS, default="cntk-gap")
    p.add_argument("--depth", type=int, default=default_depth)
    p.add_argument("--filter-size", type=int, default=None,
                   help="odd filter size for conv kernels (default 3)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: available CPUs)")


def resolve_kernel_args(args) -> None:
    if args.kernel == "fc-ntk":
        if args.filter_size is not None:
            raise UsageError("--filter-size only applies to convolutional kernels")
    elif args.filter_size is None:
        args.filter_size = 3
    if args.threads is None:
        args.threads = default_threads()


def load_dataset(args) -> LabeledDataset:
    if args.cifar and args.synthetic:
        raise UsageError("choose one of --cifar and --synthetic")
    if args.cifar:
        for path in args.cifar:
            if not Path(path).is_file():
                raise UsageError(f"dataset file not found: {path}")
        ds = read_cifar10_bin(args.cifar, classes=args.classes)
    elif args.synthetic:
        ds = synthetic_sphere_dataset(args.synthetic, args.shape, args.num_classes, args.data_seed)
    else:
        raise UsageError("a dataset is required: --cifar PATH or --synthetic N")
    if args.limit is not None:
        ds = ds.subset(slice(0, args.limit))
    if args.downsample != 1:
        if ds.images.ndim != 4:
            raise UsageError("--downsample needs image data")
        ds = downsample(ds, args.downsample)
    if args.normalize:
        ds = unit_normalize(ds)
    return ds


def _cntk_config(args) -> CntkConfig:
    arch = Arch.GAP if args.kernel == "cntk-gap" else Arch.VANILLA
    return CntkConfig(args.depth, PatchGeometry(args.filter_size), arch)


def gram(ds_images: np.ndarray, args) -> KernelMatrix:
    if args.kernel == "fc-ntk":
        return ntk_matrix(ds_images.reshape(len(ds_images), -1), args.depth)
    if ds_images.ndim != 4:
        raise UsageError(f"{args.kernel} needs image data (got shape {ds_images.shape[1:]})")
    return cntk_matrix(list(ds_images), _cntk_config(args), threads=args.threads)


def cross(test_images, train_images, args) -> np.ndarray:
    if args.kernel == "fc-ntk":
        return ntk_cross(test_images.reshape(len(test_images), -1),
                         train_images.reshape(len(train_images), -1), args.depth)
    return cntk_cross(list(test_images), list(train_images), _cntk_config(args), threads=args.threads)


def manifest(args, **extra) -> dict:
    resolved = {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in vars(args).items() if k != "func"}
    doc = {"exactntk_version": __version__, "python": platform.python_version(),
           "numpy": np.__version__, "config": resolved}
    doc.update(extra)
    return doc


def _emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True, default=_jsonable)
    if out:
        Path(out).write_text(text + "\n")
        print(f"results written to {out}")
    else:
        print(text)


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# ---------------------------------------------------------------- commands

def cmd_kernel(args) -> int:
    ds = load_dataset(args)
    t0 = time.perf_counter()
    K = gram(ds.images, args)
    elapsed = time.perf_counter() - t0
    pairs = len(ds) * (len(ds) + 1) // 2
    K.metadata.update({
        "dataset_sha256": ds.checksum(),
        "provenance": ds.provenance,
        "filter_size": args.filter_size if args.kernel != "fc-ntk" else None,
        "downsample": args.downsample,
        "normalize": args.normalize,
        "pixel_scale": "bytes/255" if args.cifar else None,
    })
    write_kernel(args.out, K)
    doc = manifest(args, n=K.n, seconds=elapsed, pairs_per_second=pairs / max(elapsed, 1e-9),
                   lambda_min=K.lambda0 if K.n else None, output=str(args.out))
    Path(str(args.out) + ".json").write_text(json.dumps(doc, indent=2, sort_keys=True,
                                                        default=_jsonable) + "\n")
    print(_table(["n", "kernel", "depth", "seconds", "pairs/s"],
                 [[K.n, K.kind, K.depth, elapsed, pairs / max(elapsed, 1e-9)]]))
    print(f"kernel written to {args.out}")
    return 0


def cmd_fit_predict(args) -> int:
    ds = load_dataset(args)
    n_train = args.n_train if args.n_train is not None else len(ds)
    if n_train > len(ds):
        raise UsageError(f"--n-train {n_train} exceeds dataset size {len(ds)}")
    train = ds.subset(slice(0, n_train))
    if args.test_on_train:
        test = train
    else:
        n_test = args.n_test if args.n_test is not None else len(ds) - n_train
        test = ds.subset(slice(n_train, n_train + n_test))
    if len(test) == 0:
        raise UsageError("empty test set")
    if args.train_kernel:
        H = read_kernel(args.train_kernel)
        if H.n != len(train):
            raise UsageError(f"kernel file has n={H.n}, training set has {len(train)}")
    else:
        H = gram(train.images, args)
    rows = H.entries if args.test_on_train else cross(test.images, train.images, args)
    Y = encode_labels(train.labels, ds.k)
    pred = fit(H, Y, args.ridge)
    guesses = classify(predict(pred, rows))
    acc = accuracy(guesses, test.labels)
    per_class = per_class_accuracy(guesses, test.labels, ds.k)
    # one-sided 95% Wilson lower bound on accuracy
    z, m = 1.6448536269514722, len(test)
    centre = (acc + z * z / (2 * m)) / (1 + z * z / m)
    half = z * math.sqrt(acc * (1 - acc) / m + z * z / (4 * m * m)) / (1 + z * z / m)
    print(_table(["class", "accuracy"],
                 [[c, "-" if a is None else a] for c, a in enumerate(per_class)] + [["all", acc]]))
    _emit(manifest(args, n_train=len(train), n_test=len(test), accuracy=acc,
                   accuracy_lower95=centre - half, per_class_accuracy=per_class,
                   lambda_min=H.lambda0), args.out)
    return 0


def _unit_pair(dim: int, cos: float):
    x = np.zeros(dim)
    y = np.zeros(dim)
    x[0] = 1.0
    y[0], y[1] = cos, math.sqrt(max(1.0 - cos * cos, 0.0))
    return x, y


def cmd_verify_ntk(args) -> int:
    x, y = _unit_pair(args.input_dim, args.cosine)
    exact = ntk_pair(x, y, args.depth).theta
    rows, medians = [], []
    for m in args.widths:
        arch = MlpArch((args.input_dim,) + (m,) * args.depth)
        devs = [abs(empirical_kernel(init_net(arch, args.seed + s), x, y) - exact)
                for s in range(args.seeds)]
        medians.append(float(np.median(devs)))
        rows.append([m, medians[-1], float(np.max(devs))])
    monotone = all(b <= a for a, b in zip(medians, medians[1:]))
    print(f"analytic NTK Theta^({args.depth}) = {exact:.6f}")
    print(_table(["width", "median |emp - exact|", "max |emp - exact|"], rows))
    print("monotone non-increase:", "yes" if monotone else "NO")
    _emit(manifest(args, analytic=exact, widths=args.widths, medians=medians, monotone=monotone),
          args.out)
    if not monotone:
        raise CheckFailed("median deviation increased with width")
    return 0


def equivalence_trial(seed: int, n_train: int, n_test: int, dim: int, depth: int, width: int,
                      kappa: float, max_steps: int, loss_ratio: float = 1e-6) -> dict:
    """Train one wide MLP and compare its held-out outputs with NTK regression."""
    ds = synthetic_sphere_dataset(n_train + n_test, dim, 2, seed=10_000 + seed)
    X, Xte = ds.images[:n_train], ds.images[n_train:]
    y = np.where(ds.labels[:n_train] == 1, 1.0, -1.0)
    H = ntk_matrix(X, depth)
    kte = ntk_cross(Xte, X, depth)
    f_ntk = predict(fit(H, y), kte)
    params = init_net(MlpArch((dim,) + (width,) * depth), seed)
    f0_train, f0_test = forward(params, X), forward(params, Xte)
    loss0, _ = squared_loss(params, X, y, kappa)
    eta = 1.0 / (kappa ** 2 * float(np.linalg.eigvalsh(empirical_gram(params, X))[-1]))
    state = train_full_batch(TrainState(params, kappa, eta), X, y, max_steps,
                             target_loss=loss_ratio * loss0)
    f_nn = kappa * forward(params, Xte)
    # part of the gap explained by the nonzero initial output
    init_bias = kappa * (f0_test - kte @ fit(H, f0_train).alpha)
    gap = np.abs(f_nn - f_ntk)
    return {"seed": seed, "steps": state.steps, "step_size": eta,
            "loss_ratio": state.loss / loss0, "max_gap": float(gap.max()),
            "mean_gap": float(gap.mean()), "max_abs_y": float(np.max(np.abs(y))),
            "max_init_bias": float(np.max(np.abs(init_bias))),
            "max_gap_minus_bias": float(np.max(np.abs(f_nn - f_ntk - init_bias))),
            "converged": state.loss <= loss_ratio * loss0}


def cmd_verify_equivalence(args) -> int:
    trials = [equivalence_trial(args.seed + s, args.n_train, args.n_test, args.input_dim,
                                args.depth, args.width, args.kappa, args.max_steps)
              for s in range(args.seeds)]
    ok = [t["converged"] and t["max_gap"] <= args.tolerance * t["max_abs_y"] for t in trials]
    rows = [[t["seed"], t["steps"], t["loss_ratio"], t["max_gap"], t["mean_gap"],
             t["max_init_bias"], "pass" if o else "FAIL"] for t, o in zip(trials, ok)]
    print(_table(["seed", "steps", "loss/loss0", "max gap", "mean gap", "init bias", ""], rows))
    print(f"{sum(ok)}/{len(ok)} seeds within {args.tolerance} * max|y|")
    passed = sum(ok) >= args.min_pass
    _emit(manifest(args, trials=trials, passed=sum(ok), required=args.min_pass), args.out)
    if not passed:
        raise CheckFailed(f"only {sum(ok)} of {len(ok)} seeds within tolerance")
    return 0


def rf_compare(train: LabeledDataset, test: LabeledDataset, kernel: str, depth: int, q: int,
               channels, seeds: int, base_seed: int = 0, ridge: float = 0.0,
               deviation_subset: int | None = None, threads: int | None = None,
               accuracy_channels=None, accuracy_seeds: int | None = None) -> dict:
    """Exact-kernel vs random-feature-kernel accuracy, plus kernel deviation per channel count.

    Deviations use ``seeds`` initialisations; accuracies use the first
    ``accuracy_seeds`` of them (all by default) at ``accuracy_channels``.
    """
    arch_kind = Arch.GAP if kernel == "cntk-gap" else Arch.VANILLA
    cfg = CntkConfig(depth, PatchGeometry(q), arch_kind)
    H = cntk_matrix(list(train.images), cfg, threads=threads)
    rows = cntk_cross(list(test.images), list(train.images), cfg, threads=threads)
    Y = encode_labels(train.labels, train.k)
    exact_acc = accuracy(classify(predict(fit(H, Y, ridge), rows)), test.labels)
    m = deviation_subset or len(train)
    sub = train.images[:m]
    H_sub = H.entries[:m, :m]
    scale = float(np.mean(np.abs(H_sub)))
    P, Q, C0 = train.images.shape[1:]
    head = "gap" if arch_kind is Arch.GAP else "dense"
    accuracy_channels = set(channels if accuracy_channels is None else accuracy_channels)
    accuracy_seeds = seeds if accuracy_seeds is None else accuracy_seeds
    table = []
    for C in channels:
        arch = CnnArch((C0,) + (C,) * depth, (P, Q), q, head)
        devs, accs = [], []
        for s in range(seeds):
            params = init_net(arch, base_seed + s)
            K_sub = random_feature_kernel(params, sub).entries
            devs.append(float(np.mean(np.abs(K_sub - H_sub))) / scale)
            if C in accuracy_channels and s < accuracy_seeds:
                Hr = random_feature_kernel(params, train.images)
                Rr = random_feature_kernel(params, test.images, train.images)
                accs.append(accuracy(classify(predict(fit(Hr, Y, ridge), Rr)), test.labels))
        table.append({"channels": C, "rel_deviation": float(np.median(devs)),
                      "rf_accuracy": float(np.median(accs)) if accs else None})
    return {"exact_accuracy": exact_acc, "rows": table, "deviation_subset": m}


def cmd_rf_compare(args) -> int:
    ds = load_dataset(args)
    if ds.images.ndim != 4:
        raise UsageError("rf-compare needs image data")
    if args.kernel == "fc-ntk":
        raise UsageError("rf-compare supports cntk-vanilla and cntk-gap")
    n_train = args.n_train
    train = ds.subset(slice(0, n_train))
    test = ds.subset(slice(n_train, n_train + (args.n_test or len(ds) - n_train)))
    if len(test) == 0:
        raise UsageError("empty test set")
    res = rf_compare(train, test, args.kernel, args.depth, args.filter_size, args.channels,
                     args.seeds, args.seed, args.ridge, args.deviation_subset, args.threads,
                     accuracy_seeds=args.accuracy_seeds)
    print(f"exact {args.kernel} accuracy: {res['exact_accuracy']:.4f}")
    print(_table(["channels", "rel. kernel deviation", "RF accuracy"],
                 [[r["channels"], r["rel_deviation"], r["rf_accuracy"]] for r in res["rows"]]))
    _emit(manifest(args, **res), args.out)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exactntk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("kernel", help="compute and store a Gram matrix")
    _add_dataset_args(p)
    _add_kernel_args(p)
    p.add_argument("--out", required=True, help="kernel file to write")
    p.set_defaults(func=cmd_kernel)

    p = sub.add_parser("fit-predict", help="kernel regression classification")
    _add_dataset_args(p)
    _add_kernel_args(p)
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--test-on-train", action="store_true")
    p.add_argument("--train-kernel", default=None, help="precomputed training kernel file")
    p.add_argument("--ridge", type=float, default=0.0)
    p.add_argument("--out", default=None, help="results JSON (default: stdout)")
    p.set_defaults(func=cmd_fit_predict)

    p = sub.add_parser("verify-ntk", help="finite-width NTK convergence at initialisation")
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--widths", type=_int_list, default=[64, 256, 1024, 4096])
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input-dim", type=int, default=8)
    p.add_argument("--cosine", type=float, default=0.0, help="cosine between the two unit inputs")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify_ntk)

    p = sub.add_parser("verify-equivalence", help="trained wide net vs NTK regression")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--width", type=int, default=2048)
    p.add_argument("--kappa", type=float, default=0.05)
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-test", type=int, default=8)
    p.add_argument("--input-dim", type=int, default=8)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=20000)
    p.add_argument("--tolerance", type=float, default=0.05, help="allowed gap relative to max|y|")
    p.add_argument("--min-pass", type=int, default=18)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify_equivalence)

    p = sub.add_parser("rf-compare", help="random-feature kernels vs exact CNTK")
    _add_dataset_args(p)
    _add_kernel_args(p, default_depth=4)
    p.add_argument("--channels", type=_int_list, default=[1024],
                   help="comma-separated channel counts of the finite CNNs (default 1024)")
    p.add_argument("--seeds", type=int, default=3, help="initialisations per channel count")
    p.add_argument("--accuracy-seeds", type=int, default=None,
                   help="initialisations used for accuracy (default: --seeds)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--deviation-subset", type=int, default=None,
                   help="compare kernels on only the first N training inputs")
    p.add_argument("--ridge", type=float, default=0.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_rf_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if hasattr(args, "kernel"):
            resolve_kernel_args(args)
        return args.func(args)
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1
    except (UsageError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
