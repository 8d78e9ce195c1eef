"""Command-line front end.

One subcommand per pipeline stage plus generation, ablation, gradient
checking, and mesh export.  Every RunConfig field is exposed as a ``--flag``
(underscores become dashes); values merge as profile defaults < config file
< TRICODEC_OUT < explicit flags.

Exit codes: 0 success, 1 usage error, 2 missing artifact, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import backend, checks, pipeline
from .config import RunConfig, emit_config, load_config, make_config
from .errors import MissingArtifactError, NumericalError, ShapeError, UsageError

OUT_ENV = "TRICODEC_OUT"

_COMMANDS = ("synth", "train-ae", "train-prior", "train-tri",
             "generate", "ablate", "gradcheck", "export")


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of calling sys.exit(2)."""

    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("run configuration")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "profile":
            continue  # handled globally
        if f.type in ("bool", bool):
            group.add_argument(flag, default=None,
                               action=argparse.BooleanOptionalAction)
        elif f.type in ("int", int):
            group.add_argument(flag, type=int, default=None)
        elif f.type in ("float", float):
            group.add_argument(flag, type=float, default=None)
        else:
            group.add_argument(flag, type=str, default=None)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tricodec",
                description="Triplane point-cloud autoencoder with a "
                            "two-stage latent diffusion generator.")
    p.add_argument("--backend", choices=("auto", "numba", "numpy"), default=None,
                   help="kernel backend (also via TRICODEC_BACKEND)")
    p.add_argument("-v", "--verbose", action="store_true",
                   help="print per-step training progress")
    sub = p.add_subparsers(dest="command", metavar="command")

    def cmd(name, help_text):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--profile", choices=("desk", "paper"), default=None)
        c.add_argument("--config", metavar="FILE", default=None,
                       help="key=value config file (see `tricodec synth "
                            "--emit-config`)")
        _add_config_flags(c)
        return c

    c = cmd("synth", "generate the procedural shape dataset")
    c.add_argument("--count", type=int, default=None,
                   help="number of shapes (alias for --num-shapes)")
    c.add_argument("--emit-config", action="store_true",
                   help="print the effective configuration and exit")

    cmd("train-ae", "stage 1: train the triplane autoencoder")
    cmd("train-prior", "stage 2: train the shape-embedding prior")
    cmd("train-tri", "stage 3: train the triplane latent denoiser")

    c = cmd("generate", "sample a colored mesh from an image embedding")
    c.add_argument("--shape", type=int, default=None,
                   help="dataset shape index supplying the image embedding")
    c.add_argument("--view", type=int, default=0,
                   help="dataset view index (default 0)")
    c.add_argument("--embedding", metavar="FILE", default=None,
                   help="read the image embedding from a text file of floats")
    c.add_argument("--no-prior", action="store_true",
                   help="skip the prior; condition on the learned null token")
    c.add_argument("--tag", default=None, help="basename for exported files")
    c.add_argument("--turntable", type=int, default=4,
                   help="number of turntable renders (default 4)")

    c = cmd("ablate", "paired desk-scale comparison along one axis")
    c.add_argument("--axis", required=True,
                   choices=pipeline.ABLATION_AXES)

    c = cmd("gradcheck", "finite-difference checks on every gradient path")
    c.add_argument("--tol", type=float, default=checks.REL_TOL,
                   help=f"relative tolerance (default {checks.REL_TOL})")

    c = cmd("export", "re-export a shape's autoencoder reconstruction")
    c.add_argument("--shape", type=int, default=0)
    c.add_argument("--tag", default=None)
    c.add_argument("--turntable", type=int, default=4)
    return p


def _effective_config(args) -> RunConfig:
    if args.config is not None and args.profile is not None:
        raise UsageError("pass either --profile or --config, not both")
    if args.config is not None:
        cfg = load_config(args.config)
        file_keys = {line.partition("=")[0].strip()
                     for line in Path(args.config).read_text().splitlines()
                     if "=" in line and not line.lstrip().startswith("#")}
    else:
        cfg = make_config(args.profile or "desk")
        file_keys = set()

    env_out = os.environ.get(OUT_ENV)
    if env_out and "out_dir" not in file_keys:
        cfg = replace(cfg, out_dir=env_out)

    overrides = {}
    for f in fields(RunConfig):
        if f.name == "profile":
            continue
        v = getattr(args, f.name, None)
        if v is not None:
            overrides[f.name] = v
    if getattr(args, "count", None) is not None:
        overrides["num_shapes"] = args.count
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


def _dispatch(args) -> int:
    log = print if args.verbose else None

    if args.command == "synth":
        cfg = _effective_config(args)
        if args.emit_config:
            sys.stdout.write(emit_config(cfg))
            return 0
        root = pipeline.synth_dataset(cfg)
        print(f"dataset: {root} ({cfg.num_shapes} shapes)")
        return 0

    if args.command in ("train-ae", "train-prior", "train-tri"):
        cfg = _effective_config(args)
        fn = {"train-ae": pipeline.train_autoencoder,
              "train-prior": pipeline.train_prior,
              "train-tri": pipeline.train_triplane}[args.command]
        s = fn(cfg, log=log)
        drop = f" drop={s['drop']:.1%}" if "drop" in s else ""
        print(f"{args.command}: {s['steps']} steps, loss "
              f"{s['first10']:.4f} -> {s['last10']:.4f}{drop}")
        print(f"checkpoint: {s['checkpoint']}")
        return 0

    if args.command == "generate":
        cfg = _effective_config(args)
        embedding = None
        if args.embedding is not None:
            path = Path(args.embedding)
            if not path.exists():
                raise UsageError(f"embedding file not found: {path}")
            embedding = np.loadtxt(path, dtype=np.float64).reshape(-1)
        res = pipeline.generate(cfg, shape_index=args.shape,
                                view_index=args.view, embedding=embedding,
                                use_prior=not args.no_prior, tag=args.tag,
                                turntable=args.turntable, log=log)
        mesh = res["mesh"]
        print(f"{res['tag']}: {mesh.num_vertices} vertices, "
              f"{mesh.num_faces} faces")
        for key in ("obj", "ply"):
            print(f"  {res['paths'][key]}")
        return 0

    if args.command == "ablate":
        cfg = _effective_config(args)
        res = pipeline.ablate(cfg, args.axis, log=log)
        sys.stdout.write(res["table"])
        print(f"report: {res['csv']}")
        return 0

    if args.command == "gradcheck":
        rows = checks.gradcheck_suite(tol=args.tol)
        ok = True
        for r in rows:
            status = "PASS" if r["passed"] else "FAIL"
            ok = ok and r["passed"]
            print(f"{status}  {r['name']:<16} max_rel_err={r['max_rel_err']:.3e}"
                  f"  ({r['seconds']:.1f}s)")
        return 0 if ok else 3

    if args.command == "export":
        cfg = _effective_config(args)
        res = pipeline.export_reconstruction(cfg, shape_index=args.shape,
                                             turntable=args.turntable,
                                             tag=args.tag, log=log)
        mesh = res["mesh"]
        print(f"{res['tag']}: {mesh.num_vertices} vertices, "
              f"{mesh.num_faces} faces")
        for key in ("obj", "ply"):
            print(f"  {res['paths'][key]}")
        return 0

    raise UsageError("missing command; expected one of " + ", ".join(_COMMANDS))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.backend is not None:
            backend.set_backend(args.backend)
        return _dispatch(args)
    except (UsageError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except MissingArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
