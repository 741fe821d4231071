"""Command-line interface.

Every command writes its primary output atomically plus a sidecar
``<output>.manifest.json`` recording the argv, parameters, tool version and
sha256 digests.  ``maxmargin replay MANIFEST`` re-runs and compares digests.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import __version__
from ._io import atomic_write_text, file_digest
from .errors import ConstructionError, MaxMarginError

OUT_ENV = "MAXMARGIN_OUT"

EXIT_OK, EXIT_USAGE, EXIT_CONSTRUCTION, EXIT_BELOW_TARGET = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out_dir(args) -> Path:
    return Path(args.out_dir or os.environ.get(OUT_ENV) or ".")


def _out_path(args, default_name: str) -> Path:
    return Path(args.out) if getattr(args, "out", None) else _out_dir(args) / default_name


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write_manifest(args, argv, outputs, inputs=(), seeds=()):
    primary = Path(outputs[0])
    params = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "params": params,
        "seeds": list(seeds),
        "version": __version__,
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": {str(p): file_digest(p) for p in outputs},
    }
    path = primary.with_name(primary.name + ".manifest.json")
    atomic_write_text(path, _dump(manifest))
    return path


def _matrix(args):
    from .relevance import snk

    return snk(args.n, args.k)


# ----------------------------------------------------------------------------
# Commands


def cmd_construct(args, argv):
    from . import constructions as C
    from .embedding import certify, save_embedding

    A = _matrix(args)
    extra = {}
    if args.method == "simplex":
        E = C.simplex_baseline(A)
    elif args.method == "vandermonde":
        E = C.vandermonde(A)
    else:
        if args.d is None:
            raise UsageError(f"--d is required for {args.method}")
        build = C.khatri_rao if args.method == "khatri-rao" else C.gaussian_rip
        E, params = build(A, args.d, seed=args.seed, max_retries=args.retries)
        extra = params.to_dict()
    out = _out_path(args, f"{args.method}_n{args.n}_k{args.k}.json")
    save_embedding(E, out)
    cert = certify(E)
    print(_dump({"file": str(out), "d": E.d, "certificate": cert.to_dict(), "params": extra}), end="")
    _write_manifest(args, argv, [out], seeds=[args.seed])
    return EXIT_OK


def _parse_mode(mode):
    if mode is None or mode == ["exact"]:
        return None
    if len(mode) == 2 and mode[0] == "sample":
        try:
            return int(mode[1])
        except ValueError:
            pass
    raise UsageError("--mode takes 'exact' or 'sample N'")


def cmd_certify(args, argv):
    from .embedding import certify, load_embedding

    sample = _parse_mode(args.mode)
    E = load_embedding(args.input)
    cert = certify(E, sample=sample, seed=args.seed)
    text = _dump({"file": str(args.input), "d": E.d, "n": E.n, "N": E.N, "certificate": cert.to_dict()})
    out = _out_path(args, Path(args.input).stem + ".cert.json")
    atomic_write_text(out, text)
    print(text, end="")
    _write_manifest(args, argv, [out], inputs=[args.input], seeds=[args.seed])
    return EXIT_OK


def cmd_reduce(args, argv):
    from .embedding import load_embedding, save_embedding
    from .reduce import ReduceParams, reduce_embedding

    E = load_embedding(args.input)
    params = ReduceParams(eps=args.eps, d_out=args.dout, seed=args.seed, max_retries=args.retries)
    R, report = reduce_embedding(E, params)
    out = _out_path(args, Path(args.input).stem + f".reduced{report.d_out}.json")
    save_embedding(R, out)
    rep_path = out.with_name(out.stem + ".report.json")
    atomic_write_text(rep_path, _dump(report.to_dict()))
    print(_dump(report.to_dict()), end="")
    _write_manifest(args, argv, [out, rep_path], inputs=[args.input], seeds=[a["seed"] for a in report.attempts])
    return EXIT_BELOW_TARGET if report.below_target else EXIT_OK


def _need(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"--which {args.which} requires {', '.join(missing)}")


def cmd_bounds(args, argv):
    from . import bounds as B
    from .relevance import explicit, snk

    w = args.which
    inputs = []
    if w == "weller":
        _need(args, "n", "k", "m")
        out_obj = B.weller_dim_bound(args.n, args.k, args.m).to_dict()
    elif w == "packing":
        _need(args, "n", "k", "m", "C")
        out_obj = B.packing_dim_bound(args.n, args.k, args.m, args.C).to_dict()
    elif w == "spectral-snk":
        _need(args, "n", "k")
        out_obj = B.spectral_bound(snk(args.n, args.k)).to_dict()
    elif w == "spectral-identity":
        _need(args, "n")
        out_obj = B.spectral_bound(explicit(args.n, [(i,) for i in range(args.n)])).to_dict()
    elif w == "beta-tail":
        _need(args, "s", "r", "delta")
        value = B.beta_tail_bound(args.s, args.r, args.delta)
        out_obj = {"name": "beta-tail", "inputs": {"s": args.s, "r": args.r, "delta": args.delta}, "value": value}
        if args.trials:
            est, se = B.beta_tail_montecarlo(args.s, args.r, args.delta, args.trials, args.seed)
            out_obj["montecarlo"] = {"estimate": est, "stderr": se, "trials": args.trials, "seed": args.seed}
    elif w == "gamma-ratio":
        _need(args, "x", "y")
        out_obj = {"name": "gamma-ratio", "inputs": {"x": args.x, "y": args.y}, "value": B.gamma_ratio(args.x, args.y)}
    else:  # packing-audit
        from .embedding import load_embedding

        _need(args, "input")
        inputs = [args.input]
        out_obj = B.packing_audit(load_embedding(args.input), s=args.s, seed=args.seed).to_dict()
    text = json.dumps(out_obj, sort_keys=True, allow_nan=False) + "\n"
    out = _out_path(args, f"bounds-{w}.jsonl")
    atomic_write_text(out, text)
    print(text, end="")
    _write_manifest(args, argv, [out], inputs=inputs, seeds=[args.seed])
    return 1 if w == "packing-audit" and out_obj["violations"] else EXIT_OK


def cmd_train(args, argv):
    from .embedding import save_embedding
    from .train import TrainConfig, train

    cfg = TrainConfig(
        _matrix(args),
        d=args.d,
        loss=args.loss,
        steps=args.steps,
        base_lr=args.lr,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        t0=args.t0,
    )
    tr = train(cfg)
    trace = Path(args.trace) if args.trace else _out_dir(args) / f"train_{args.loss}_n{args.n}_k{args.k}_d{args.d}_s{args.seed}.csv"
    tr.write_csv(trace)
    outputs = [trace]
    if args.out:
        save_embedding(tr.final, args.out)
        outputs.append(Path(args.out))
    print(
        _dump(
            {
                "trace": str(trace),
                "final_loss": tr.final_loss,
                "inv_temp": tr.final_t,
                "max_margin": tr.max_margin,
                "margin_kind": tr.margin_key,
            }
        ),
        end="",
    )
    _write_manifest(args, argv, outputs, seeds=[args.seed])
    return EXIT_OK


def cmd_sweep(args, argv):
    from .train import SWEEP_FIELDS, sweep_min_dim

    seeds = list(range(args.seeds))
    rows, summary = [], []
    for n in args.n:
        for loss in args.loss:
            res = sweep_min_dim(
                n, args.k, loss, range(args.d_min, args.d_max + 1), steps=args.steps, seeds=seeds, jobs=args.jobs
            )
            rows.extend(res.rows)
            summary.append({"n": n, "k": args.k, "loss": loss, "min_dim": res.min_dim})
    out = _out_path(args, f"sweep_k{args.k}.csv")
    lines = [",".join(SWEEP_FIELDS)]
    lines += [",".join(repr(r[f]) if f == "max_margin" else str(r[f]) for f in SWEEP_FIELDS) for r in rows]
    atomic_write_text(out, "\n".join(lines) + "\n")
    print(_dump({"csv": str(out), "summary": summary}), end="")
    _write_manifest(args, argv, [out], seeds=seeds)
    return EXIT_OK


def cmd_analyze(args, argv):
    from . import analysis as An
    from .embedding import load_embedding, save_embedding

    E = load_embedding(args.input)
    outputs = []
    check = args.check
    if check in ("compositional", "downward"):
        if not args.T:
            raise UsageError(f"--check {check} requires --T")
        fn = An.compositional_witness if check == "compositional" else An.downward_witness
        obj = fn(E, args.T).to_dict()
        status = EXIT_OK if obj["valid"] else 1
    elif check == "robustness":
        if args.perturbation is None:
            raise UsageError("--check robustness requires --perturbation")
        rep = An.robustness_check(
            E, args.perturbation, trials=args.trials, seed=args.seed, expect_violation=args.expect_violation
        )
        obj = rep.to_dict()
        status = EXIT_OK if rep.clean or args.expect_violation else 1
    else:
        Q, rep = An.quantize_check(E, step=args.step)
        obj = rep.to_dict()
        if args.quantized_out:
            save_embedding(Q, args.quantized_out)
            outputs.append(Path(args.quantized_out))
        status = EXIT_OK if rep.errors_ok and rep.margin_ok else 1
    out = _out_path(args, Path(args.input).stem + f".{check}.json")
    atomic_write_text(out, _dump(obj))
    print(_dump(obj), end="")
    _write_manifest(args, argv, [out] + outputs, inputs=[args.input], seeds=[args.seed])
    return status


PLOT_SCRIPT = """\
# Optional: render the series written by `maxmargin plot-data`.
import csv
import sys

import matplotlib.pyplot as plt

rows = list(csv.DictReader(open(sys.argv[1])))
for (loss, n) in sorted({(r["loss"], r["n"]) for r in rows}):
    pts = sorted((int(r["d"]), float(r["best_margin"])) for r in rows if r["loss"] == loss and r["n"] == n)
    plt.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{loss}, n={n}")
plt.axhline(0.0, color="gray", lw=0.5)
plt.xlabel("dimension d")
plt.ylabel("max margin over seeds")
plt.legend()
plt.savefig(sys.argv[2] if len(sys.argv) > 2 else "margins.png")
"""


def plot_series(rows):
    """Best margin over seeds for each (loss, n, d); one series per (loss, n)."""
    best = {}
    for r in rows:
        key = (r["loss"], int(r["n"]), int(r["k"]), int(r["d"]))
        best[key] = max(best.get(key, float("-inf")), float(r["max_margin"]))
    return [
        {"loss": loss, "n": n, "k": k, "d": d, "best_margin": m, "positive": int(m > 0)}
        for (loss, n, k, d), m in sorted(best.items())
    ]


def cmd_plot_data(args, argv):
    rows = []
    for path in args.inputs:
        with open(path, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    series = plot_series(rows)
    out = _out_path(args, "plot_data.csv")
    fields = ["loss", "n", "k", "d", "best_margin", "positive"]
    lines = [",".join(fields)] + [",".join(repr(s[f]) if f == "best_margin" else str(s[f]) for f in fields) for s in series]
    atomic_write_text(out, "\n".join(lines) + "\n")
    outputs = [out]
    if args.script:
        atomic_write_text(args.script, PLOT_SCRIPT)
        outputs.append(Path(args.script))
    print(_dump({"csv": str(out), "series": sorted({f"{s['loss']}/n={s['n']}" for s in series})}), end="")
    _write_manifest(args, argv, outputs, inputs=args.inputs)
    return EXIT_OK


def cmd_replay(args, argv):
    manifest = json.loads(Path(args.manifest).read_text())
    for p, digest in manifest["inputs"].items():
        if file_digest(p) != digest:
            print(f"input {p} changed since the manifest was written", file=sys.stderr)
            return 1
    with open(os.devnull, "w") as sink:
        code = main(manifest["argv"], _stdout=sink)
    mismatched = [p for p, digest in manifest["outputs"].items() if file_digest(p) != digest]
    print(_dump({"replayed": manifest["command"], "exit": code, "mismatched": mismatched}), end="")
    return 1 if mismatched else EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="maxmargin", description="Certified max-margin embeddings for top-k retrieval.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    p.add_argument("--out-dir", help=f"default output directory (else ${OUT_ENV}, else .)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("construct", help="build an embedding of S_{n,k}")
    c.add_argument("--method", required=True, choices=["simplex", "vandermonde", "khatri-rao", "gaussian-rip"])
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--k", type=int, required=True)
    c.add_argument("--d", type=int)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--retries", type=int, default=20)
    c.add_argument("--out")
    c.set_defaults(func=cmd_construct)

    c = sub.add_parser("certify", help="exact or sampled margin certificate of an embedding file")
    c.add_argument("input")
    c.add_argument("--mode", nargs="+", default=["exact"], metavar="exact|sample N")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_certify)

    c = sub.add_parser("reduce", help="JL-project documents and re-solve queries")
    c.add_argument("input")
    c.add_argument("--eps", type=float, default=0.5)
    c.add_argument("--dout", type=int)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--retries", type=int, default=5)
    c.add_argument("--out")
    c.set_defaults(func=cmd_reduce)

    c = sub.add_parser("bounds", help="evaluate a bound; emits one JSON line")
    c.add_argument(
        "--which",
        required=True,
        choices=["weller", "packing", "spectral-snk", "spectral-identity", "beta-tail", "gamma-ratio", "packing-audit"],
    )
    for name, typ in [("n", int), ("k", int), ("m", float), ("C", float), ("s", int), ("r", int), ("delta", float), ("x", float), ("y", float)]:
        c.add_argument(f"--{name}", type=typ)
    c.add_argument("--trials", type=int, default=0, help="Monte Carlo trials for beta-tail")
    c.add_argument("--input", help="embedding file for packing-audit")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_bounds)

    c = sub.add_parser("train", help="train a free embedding of S_{n,k}")
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--k", type=int, required=True)
    c.add_argument("--d", type=int, required=True)
    c.add_argument("--loss", choices=["sigmoid", "infonce"], default="sigmoid")
    c.add_argument("--steps", type=int, default=20_000)
    c.add_argument("--lr", type=float, default=0.03)
    c.add_argument("--t0", type=float, default=10.0)
    c.add_argument("--checkpoint-every", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--trace")
    c.add_argument("--out", help="also save the final embedding")
    c.set_defaults(func=cmd_train)

    c = sub.add_parser("sweep", help="minimal positive-margin dimension per loss")
    c.add_argument("--n", type=int, nargs="+", required=True)
    c.add_argument("--k", type=int, required=True)
    c.add_argument("--loss", nargs="+", choices=["sigmoid", "infonce"], default=["sigmoid", "infonce"])
    c.add_argument("--d-min", type=int, required=True)
    c.add_argument("--d-max", type=int, required=True)
    c.add_argument("--seeds", type=int, default=3, help="number of seeds, 0..N-1")
    c.add_argument("--steps", type=int, default=20_000)
    c.add_argument("--out")
    c.set_defaults(func=cmd_sweep)

    c = sub.add_parser("analyze", help="margin consequence checks")
    c.add_argument("input")
    c.add_argument("--check", required=True, choices=["compositional", "downward", "robustness", "quantize"])
    c.add_argument("--T", type=int, nargs="+", help="target document set")
    c.add_argument("--perturbation", type=float)
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--expect-violation", action="store_true")
    c.add_argument("--step", type=float, help="quantization step (default m/(8 sqrt d))")
    c.add_argument("--quantized-out")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_analyze)

    c = sub.add_parser("plot-data", help="turn sweep CSVs into per-loss series")
    c.add_argument("inputs", nargs="+")
    c.add_argument("--script", help="also write an optional matplotlib script")
    c.add_argument("--out")
    c.set_defaults(func=cmd_plot_data)

    c = sub.add_parser("replay", help="re-run a manifest and compare output digests")
    c.add_argument("manifest")
    c.set_defaults(func=cmd_replay)
    return p


def main(argv=None, _stdout=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    old = sys.stdout
    if _stdout is not None:
        sys.stdout = _stdout
    try:
        return args.func(args, argv)
    except UsageError as e:
        print(f"maxmargin {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConstructionError as e:
        print(f"maxmargin {args.command}: construction failed: {e}", file=sys.stderr)
        return EXIT_CONSTRUCTION
    except (MaxMarginError, ValueError, OSError) as e:
        print(f"maxmargin {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        sys.stdout = old


if __name__ == "__main__":
    sys.exit(main())
