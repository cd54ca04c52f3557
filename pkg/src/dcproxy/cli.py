"""Command-line entry point: ``dcproxy <subcommand> ...``.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DCPError

log = logging.getLogger("dcproxy")


def version_string():
    """Package version, plus ``git describe`` output when run from a checkout."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _seed(args):
    env = os.environ.get("DCP_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"DCP_SEED must be an integer, got {env!r}")
    return args.seed


def _load_config_file(args):
    if not getattr(args, "config", None):
        return {}
    with open(args.config) as fh:
        return json.load(fh)


def _completion_config(args, file_cfg):
    from .completion import CompletionConfig

    d = dict(file_cfg.get("completion", {}))
    if getattr(args, "flow", None):
        d["flow_choice"] = args.flow
    if getattr(args, "omega", None):
        d["omega_repr"] = args.omega
    return CompletionConfig(**d)


def _out_dir(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path, payload, args, config):
    payload = {"version": version_string(), "command": args.command, "config": config, **payload}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
    print(f"wrote {path}")


def _instances(args, case):
    from .formulation import InstanceLoads
    from .training import read_jsonl

    if getattr(args, "instances", None):
        return read_jsonl(args.instances)
    loads = InstanceLoads.nominal(case)
    return InstanceLoads(loads.pd[None, :], loads.qd[None, :])


def _read_refs(path):
    with open(path) as fh:
        d = json.load(fh)
    if isinstance(d, dict) and "instances" in d:
        return [r.get("primal_objective") for r in d["instances"]]
    if isinstance(d, dict) and "refs" in d:
        return d["refs"]
    return d


# --------------------------------------------------------------------------
# subcommands

def cmd_inspect(args):
    from .grid import case_stats, load_case

    case = load_case(args.case_path or args.case)
    stats = case_stats(case)
    for k, v in stats.items():
        print(f"{k:>20s}: {v}")
    if args.out:
        out = _out_dir(args)
        with open(out / "case.json", "w") as fh:
            fh.write(case.dumps())
        print(f"wrote {out / 'case.json'}")
    return 0


def cmd_sample(args):
    from .grid import load_case
    from .training import SamplerConfig, write_jsonl, sample_instances

    file_cfg = _load_config_file(args)
    case = load_case(args.case)
    d = dict(file_cfg.get("sampler", {}))
    for k in ("n_instances", "alpha_low", "alpha_high", "sigma"):
        if getattr(args, k) is not None:
            d[k] = getattr(args, k)
    d["seed"] = _seed(args)
    cfg = SamplerConfig(**d)
    loads = sample_instances(case, cfg)
    out = _out_dir(args)
    write_jsonl(out / "dataset.jsonl", loads)
    tot = loads.pd.sum(axis=1)
    print(f"sampled {len(loads)} instances, total active load in [{tot.min():.4f}, {tot.max():.4f}]")
    _write(out / "sample.json", {"n": len(loads)}, args, {"sampler": cfg.to_json_dict(), "case": case.name})
    return 0


def cmd_train(args):
    from .grid import load_case
    from .proxy import ArchConfig, init_proxy
    from .training import TrainConfig, read_jsonl, split_dataset, train, write_jsonl

    file_cfg = _load_config_file(args)
    case = load_case(args.case)
    ccfg = _completion_config(args, file_cfg)
    seed = _seed(args)
    arch = ArchConfig(**{**file_cfg.get("arch", {}), "seed": seed})
    td = dict(file_cfg.get("train", {}))
    if args.epochs is not None:
        td["epochs"] = args.epochs
    if args.batch is not None:
        td["batch_size"] = args.batch
    if args.lr is not None:
        td["lr"] = args.lr
    td.setdefault("seed", seed)
    tcfg = TrainConfig(**td)
    data = read_jsonl(args.instances)
    params = init_proxy(case, arch, ccfg)
    best, hist = train(params, case, data, tcfg)
    out = _out_dir(args)
    best.save(out / "model.json")
    print(f"wrote {out / 'model.json'}")
    _, _, test = split_dataset(data, tcfg.fractions, tcfg.seed)
    if len(test):
        write_jsonl(out / "test.jsonl", test)
    config = {"case": case.name, "completion": ccfg.to_json_dict(), "arch": arch.to_json_dict(),
              "train": tcfg.to_json_dict()}
    _write(out / "history.json", hist.to_json_dict(), args, config)
    print(f"best epoch {hist.best_epoch}, validation mean bound {hist.best_val_bound:.6f}")
    if hist.aborted:
        print(f"training aborted: {hist.abort_reason}", file=sys.stderr)
    return 0


def cmd_eval(args):
    from .grid import load_case
    from .proxy import ProxyParams
    from .training import evaluate

    case = load_case(args.case)
    params = ProxyParams.load(args.model)
    params.check_case(case)
    loads = _instances(args, case)
    refs = _read_refs(args.refs) if args.refs else None
    rep = evaluate(params, case, loads, refs, batch_size=args.batch or 512)
    print(rep.table_row(case.name))
    out = _out_dir(args)
    _write(out / "eval.json", rep.to_json_dict(), args, rep.config)
    return 0


def cmd_predict(args):
    from .grid import load_case
    from .proxy import ProxyParams, proxy_bound

    case = load_case(args.case)
    params = ProxyParams.load(args.model)
    params.check_case(case)
    loads = _instances(args, case)
    y, z = proxy_bound(params, case, loads)
    out = _out_dir(args)
    dual = y.to_json_dict() if len(loads) > 1 else y[0].to_json_dict()
    _write(out / "dual.json", {"bounds": np.atleast_1d(z).tolist(), "dual": dual}, args,
           {"case": case.name, "completion": params.config.to_json_dict()})
    for k, b in enumerate(np.atleast_1d(z)):
        print(f"instance {k}: bound {b:.6f}")
    return 0


def cmd_ascent(args):
    from .grid import load_case
    from .training import dual_ascent

    file_cfg = _load_config_file(args)
    case = load_case(args.case)
    ccfg = _completion_config(args, file_cfg)
    loads = _instances(args, case)[args.index]
    res = dual_ascent(case, loads, steps=args.steps, config=ccfg, step_rule=args.rule,
                      step=args.step if args.step is not None else (0.3 if args.rule == "adam" else 1.0))
    print(f"bound after {args.steps} steps: {res.bound:.6f} (start {res.trajectory[0]:.6f})")
    out = _out_dir(args)
    _write(out / "ascent.json", res.to_json_dict(), args,
           {"case": case.name, "completion": ccfg.to_json_dict(), "rule": args.rule, "steps": args.steps})
    return 0


def cmd_certify(args):
    from .certify import certify, file_sha256, load_dual
    from .grid import load_case

    file_cfg = _load_config_file(args)
    case = load_case(args.case)
    ccfg = _completion_config(args, file_cfg)
    y = load_dual(args.dual)
    loads = _instances(args, case)
    if y.lam_p.ndim == 1:
        loads = loads[0]
    prov = {"dual_file": str(args.dual), "dual_sha256": file_sha256(args.dual)}
    res = certify(case, loads, y, ccfg, provenance=prov)
    print(f"certified bound {np.round(res.bound, 6)}; residual {res.pre.max_violation:.3e} -> "
          f"{res.post.max_violation:.3e}")
    out = _out_dir(args)
    payload = res.to_json_dict()
    if np.ndim(payload["bound"]):
        payload["bound"] = np.asarray(payload["bound"]).tolist()
    _write(out / "certified.json", payload, args, {"case": case.name, "completion": ccfg.to_json_dict()})
    return 0


def cmd_gradcheck(args):
    from . import autodiff as ad
    from .completion import complete_graph, dual_objective_graph, random_independent
    from .formulation import InstanceLoads
    from .grid import load_case
    from .proxy import ArchConfig, init_proxy, param_function

    file_cfg = _load_config_file(args)
    case = load_case(args.case)
    ccfg = _completion_config(args, file_cfg)
    seed = _seed(args)
    loads = InstanceLoads.nominal(case)
    if args.function == "completion":
        xi = random_independent(case, ccfg, np.random.default_rng(seed), 1)
        names = xi.block_names()
        ends = np.cumsum([0] + [getattr(xi, k).shape[-1] for k in names])

        def fn(v):
            parts = {k: ad.slice_(v, a, b) for k, a, b in zip(names, ends[:-1], ends[1:])}
            y = complete_graph(case, parts, ccfg)
            return ad.sum_(dual_objective_graph(case, loads.pd, loads.qd, y))
        point = xi.to_vector()[0]
    else:
        params = init_proxy(case, ArchConfig(seed=seed), ccfg)
        fn, point = param_function(params, case, loads), params.flat()
    rep = ad.gradcheck(fn, point, h=args.h, n_coords=args.coords, seed=seed)
    print(f"{args.function}: max rel err {rep.max_rel_err:.3e} over {rep.coords.size} coords, "
          f"{int(rep.kink.sum())} kinks")
    out = _out_dir(args)
    _write(out / "gradreport.json", rep.to_json_dict(), args,
           {"case": case.name, "function": args.function, "completion": ccfg.to_json_dict(), "seed": seed})
    return 0 if rep.max_rel_err <= args.tol else 1


def cmd_selftest(args):
    from .checks import run_selftest

    res = run_selftest()
    if args.out:
        _write(_out_dir(args) / "selftest.json", {"results": res}, args, {})
    return 0 if all(r["passed"] for r in res.values()) else 1


# --------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="dcproxy", description="Dual conic proxies: certified lower bounds for SOC-OPF.")
    p.add_argument("--version", action="version", version=f"dcproxy {version_string()}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, case_required=True, instances=False, completion=False, out=True):
        sp.add_argument("--case", required=case_required, help="MATPOWER file or bundled/PGLib case name")
        if instances:
            sp.add_argument("--instances", help="dataset.jsonl (default: the nominal instance)")
        if completion:
            sp.add_argument("--flow", choices=["lambda", "nu"], help="flow multipliers to predict")
            sp.add_argument("--omega", choices=["rect", "polar"], help="omega parameterization")
            sp.add_argument("--config", help="JSON file with completion/arch/train/sampler sections")
        sp.add_argument("--seed", type=int, default=0, help="random seed (DCP_SEED overrides)")
        if out:
            sp.add_argument("--out", help="output directory (default: current)")

    sp = sub.add_parser("inspect", help="parse a case and print its statistics")
    sp.add_argument("case_path", nargs="?", help="case file or name")
    common(sp, case_required=False)
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("sample", help="generate perturbed load instances")
    common(sp)
    sp.add_argument("--config", help="JSON file with a sampler section")
    sp.add_argument("-n", "--n-instances", dest="n_instances", type=int)
    sp.add_argument("--alpha-low", type=float)
    sp.add_argument("--alpha-high", type=float)
    sp.add_argument("--sigma", type=float)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("train", help="train a proxy on a dataset")
    common(sp, completion=True)
    sp.add_argument("--instances", required=True, help="dataset.jsonl")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr", type=float)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a trained proxy")
    common(sp, instances=True)
    sp.add_argument("--model", required=True, help="model.json")
    sp.add_argument("--refs", help="reference objectives (JSON list or refs file)")
    sp.add_argument("--batch", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="bounds and completed duals from a trained proxy")
    common(sp, instances=True)
    sp.add_argument("--model", required=True, help="model.json")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("ascent", help="instance-wise dual ascent baseline")
    common(sp, instances=True, completion=True)
    sp.add_argument("--index", type=int, default=0, help="instance index in --instances")
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--rule", choices=["adam", "halving"], default="adam")
    sp.add_argument("--step", type=float)
    sp.set_defaults(func=cmd_ascent)

    sp = sub.add_parser("certify", help="repair an external dual solution into a valid bound")
    common(sp, instances=True, completion=True)
    sp.add_argument("--dual", required=True, help="dual.json")
    sp.set_defaults(func=cmd_certify)

    sp = sub.add_parser("gradcheck", help="compare tape gradients with finite differences")
    common(sp, case_required=False, completion=True)
    sp.set_defaults(case="case14")
    sp.add_argument("--function", choices=["completion", "proxy"], default="proxy")
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--coords", type=int, default=64)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("selftest", help="run the invariant suite on the bundled case14")
    sp.add_argument("--out", help="write selftest.json here")
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect" and not (args.case_path or args.case):
            raise UsageError("inspect: a case path or --case is required")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (DCPError, FileNotFoundError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
