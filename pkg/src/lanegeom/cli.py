"""``lanegeom`` command line: synth, rasterize, fit, eval, check-grads, demo.

Every option can come from a flag, a ``key=value`` file passed with
``--config``, or the built-in default, in that order of precedence. Each run
writes ``resolved_config.txt`` to its output directory; feeding that file
back through ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .bev import GridSpec, load_bev, load_point_cloud, rasterize, save_bev, save_point_cloud
from .config import read_kv, write_kv
from .curve import CurveParams
from .engine import FitConfig, check_gradients
from .errors import LaneGeomError
from .evaluate import DEFAULT_SPACING, DEFAULT_THRESHOLDS, EvalReport, evaluate
from .pipeline import demo_scene, fit_scene, gradient_case
from .seeding import SeedConfig
from .synth import CloudConfig, SceneConfig, generate_scene, load_scene, synthesize_cloud

log = logging.getLogger("lanegeom")

CONFIG_NAME = "resolved_config.txt"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- option tables
# name -> (parser, default, help). Dataclass fields are pulled in wholesale;
# keys that would clash across groups get a prefix.

def _parse_bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_floats(s):
    if isinstance(s, (tuple, list)):
        return tuple(float(v) for v in s)
    return tuple(float(v) for v in str(s).split(",") if v.strip())


def _parse_opt_float(s):
    if s is None or str(s).strip().lower() in ("", "none"):
        return None
    return float(s)


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _dataclass_options(cls, prefix="", skip=("seed",)):
    opts = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        default = f.default
        if default is None:
            parse = _parse_opt_float
        elif isinstance(default, bool):
            parse = _parse_bool
        else:
            parse = type(default)
        opts[prefix + f.name] = (parse, default, f"{cls.__name__}.{f.name}")
    return opts


COMMON = {
    "seed": (int, 0, "base seed"),
    "jobs": (int, 1, "worker processes"),
}
SCENE = _dataclass_options(SceneConfig, "scene_")
CLOUD = _dataclass_options(CloudConfig, "cloud_")
SEED = _dataclass_options(SeedConfig, "seeds_")
FIT = _dataclass_options(FitConfig)
EVAL = {
    "thresholds": (_parse_floats, DEFAULT_THRESHOLDS, "comma-separated distance thresholds (m)"),
    "eval_spacing": (float, DEFAULT_SPACING, "densification spacing (m)"),
}

COMMANDS = {
    "synth": dict(COMMON, count=(int, 1, "number of scenes"),
                  cloud_format=(str, "binary", "binary or csv"), **SCENE, **CLOUD),
    "rasterize": dict(COMMON, scene=(str, "", "scene JSON (grid and cloud taken from it)"),
                      cloud=(str, "", "point-cloud file, used with the grid flags"),
                      origin_x=(float, 0.0, "grid origin x"), origin_y=(float, 0.0, "grid origin y"),
                      width_px=(int, 800, "grid width"), height_px=(int, 800, "grid height"),
                      resolution=(float, 0.03125, "metres per pixel"),
                      density_norm=(float, 0.0, "divide the density channel by this (0 keeps raw counts)")),
    "fit": dict(COMMON, scene=(str, "", "scene JSON providing supervision lanes and cloud"),
                bev=(str, "", "optional BEV file (rasterized from the scene cloud otherwise)"),
                init=(str, "seeds", "seeds or perturbed"), **FIT, **SEED, **EVAL),
    "eval": dict(COMMON, pred=(str, "", "predicted lanes JSON"), gt=(str, "", "ground-truth lanes JSON"),
                 **EVAL),
    "check-grads": dict(COMMON, count=(int, 10, "random states"), step=(float, 1e-6, "FD step"),
                        floor=(float, 1e-2, "relative-error denominator floor"),
                        cells_per_lane=(int, 5, "anchor cells per lane"),
                        n_slots=(int, 5, "lane slots"), **SCENE),
    "demo": dict(COMMON, count=(int, 1, "number of scenes"), **SCENE, **CLOUD, **SEED, **FIT, **EVAL),
}


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser():
    p = argparse.ArgumentParser(prog="lanegeom", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for cmd, opts in COMMANDS.items():
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", help="key=value file (flags override it)")
        sp.add_argument("--out", default=None, help="output directory (default: current)")
        for name, (_, default, help_) in opts.items():
            sp.add_argument(_flag(name), dest=name, default=argparse.SUPPRESS,
                            help=f"{help_} [default: {_fmt(default) if default is not None else 'auto'}]")
    return p


def resolve(command, flags, config_path=None):
    """Merge defaults, config file and flags; convert every value."""
    opts = COMMANDS[command]
    raw = {k: d for k, (_, d, _) in opts.items()}
    if config_path:
        file_vals = read_kv(config_path, allowed=set(opts) | {"command"})
        file_cmd = file_vals.pop("command", command)
        if file_cmd != command:
            raise UsageError(f"config {config_path} was written for {file_cmd!r}, not {command!r}")
        raw.update(file_vals)
    raw.update(flags)
    out = {}
    for k, v in raw.items():
        parse = opts[k][0]
        try:
            out[k] = parse(v) if v is not None else None
        except (TypeError, ValueError) as e:
            raise UsageError(f"bad value for {k}: {v!r} ({e})") from None
    if out["jobs"] < 1:
        raise UsageError("jobs must be at least 1")
    return out


def _section(cfg, cls, prefix=""):
    names = {f.name for f in fields(cls)}
    kw = {n[len(prefix):]: v for n, v in cfg.items() if n.startswith(prefix) and n[len(prefix):] in names}
    if "seed" in names:
        kw["seed"] = cfg["seed"]
    return cls(**kw)


def scene_config(cfg, seed=None):
    sc = _section(cfg, SceneConfig, "scene_")
    return sc if seed is None else replace(sc, seed=seed)


def cloud_config(cfg, seed=None):
    cc = _section(cfg, CloudConfig, "cloud_")
    return cc if seed is None else replace(cc, seed=seed)


def fit_config(cfg):
    kw = {f.name: cfg[f.name] for f in fields(FitConfig) if f.name in cfg}
    return FitConfig(**kw)  # "seed" is shared with the run


def seed_config(cfg):
    return _section(cfg, SeedConfig, "seeds_")


# ---------------------------------------------------------------- file helpers


def _atomic_write(path, data):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data if isinstance(data, bytes) else data.encode())
    os.replace(tmp, path)


def _write_json(path, obj):
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(path, what):
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(2, "no such file", str(p))
    return p


def load_lanes(path):
    """Lanes from a scene or fitted-lanes JSON: curves where given, else polylines."""
    d = json.loads(Path(path).read_text())
    lanes = []
    for entry in d.get("lanes", []):
        if "theta" in entry:
            lanes.append(CurveParams.from_dict(entry["theta"]))
        else:
            lanes.append(np.array(entry["points"], dtype=float))
    return lanes


def lanes_json(curves, probs=None):
    out = []
    for k, c in enumerate(curves):
        e = {"theta": c.to_dict()}
        if probs is not None:
            e["prob"] = float(probs[k])
        out.append(e)
    return {"lanes": out}


# ---------------------------------------------------------------- commands


def _write_scene(out, seed, cfg):
    scene = generate_scene(scene_config(cfg, seed))
    scene.cloud = synthesize_cloud(scene, cloud_config(cfg, seed))
    ext = "lgpc" if cfg["cloud_format"] == "binary" else "csv"
    cloud_name = f"scene_{seed:06d}.{ext}"
    with tempfile.TemporaryDirectory(dir=out) as tmp:
        save_point_cloud(Path(tmp) / cloud_name, scene.cloud, cfg["cloud_format"])
        os.replace(Path(tmp) / cloud_name, out / cloud_name)
    _write_json(out / f"scene_{seed:06d}.json", scene.to_dict(cloud_ref=cloud_name))
    return {"seed": seed, "lanes": len(scene.lanes), "points": len(scene.cloud)}


def cmd_synth(cfg, out):
    if cfg["cloud_format"] not in ("binary", "csv"):
        raise UsageError("cloud_format must be binary or csv")
    seeds = [cfg["seed"] + k for k in range(cfg["count"])]
    rows = _pool_map(_write_scene, [(out, s, cfg) for s in seeds], cfg["jobs"])
    _write_json(out / "synth_summary.json", {"scenes": rows})
    return rows


def cmd_rasterize(cfg, out):
    if cfg["scene"]:
        scene = load_scene(_require(cfg["scene"], "scene"))
        cloud, spec = scene.cloud, scene.region
    else:
        cloud = load_point_cloud(_require(cfg["cloud"], "cloud"))
        spec = GridSpec((cfg["origin_x"], cfg["origin_y"]), cfg["width_px"], cfg["height_px"],
                        cfg["resolution"])
    bev = rasterize(cloud, spec)
    if cfg["density_norm"] < 0:
        raise UsageError("density_norm must be non-negative")
    if cfg["density_norm"] > 0:
        bev.channels[1] /= cfg["density_norm"]
    path = out / "bev.lgbv"
    with tempfile.TemporaryDirectory(dir=out) as tmp:
        save_bev(Path(tmp) / path.name, bev)
        os.replace(Path(tmp) / path.name, path)
    return {"bev": str(path), "points": len(cloud), "nonempty_cells": int((bev.density > 0).sum())}


def cmd_fit(cfg, out):
    scene = load_scene(_require(cfg["scene"], "scene"))
    bev = load_bev(_require(cfg["bev"], "bev")) if cfg["bev"] else None
    fcfg = fit_config(cfg)
    res = fit_scene(scene, bev, fcfg, seed_config(cfg), cfg["seed"], cfg["init"],
                    cfg["thresholds"], cfg["eval_spacing"])
    state = res.trace.state
    probs = state.probs()
    keep = probs >= fcfg.prob_threshold
    kept = [c for c, k in zip(state.curves(), keep) if k]
    _write_json(out / "fitted.json", lanes_json(kept, probs[keep]))
    _write_json(out / "slots.json", lanes_json(state.curves(), probs))
    res.trace.write_trace(out / "trace.csv")
    _write_json(out / "report.json", res.report.to_dict())
    _atomic_write(out / "report.txt", res.report.to_table())
    return res.summary()


def cmd_eval(cfg, out):
    pred = load_lanes(_require(cfg["pred"], "pred"))
    gt = load_lanes(_require(cfg["gt"], "gt"))
    report = evaluate(pred, gt, cfg["thresholds"], cfg["eval_spacing"])
    _write_json(out / "report.json", report.to_dict())
    _atomic_write(out / "report.txt", report.to_table())
    sys.stdout.write(report.to_table())
    return report.to_dict()


def _grad_case(seed, cfg):
    state, problem, fcfg = gradient_case(seed, cfg["n_slots"], cfg["cells_per_lane"], scene_config(cfg))
    gc = check_gradients(state, problem, None, fcfg, step=cfg["step"], floor=cfg["floor"])
    return {"seed": seed, "max_rel_error": gc.max_rel_error, "index": gc.index, "where": gc.name}


def cmd_check_grads(cfg, out):
    seeds = [cfg["seed"] + k for k in range(cfg["count"])]
    rows = _pool_map(_grad_case, [(s, cfg) for s in seeds], cfg["jobs"])
    summary = {"cases": rows, "max_rel_error": max((r["max_rel_error"] for r in rows), default=0.0)}
    _write_json(out / "grad_report.json", summary)
    return {"max_rel_error": summary["max_rel_error"], "cases": len(rows)}


def _demo_case(seed, cfg, out):
    res = demo_scene(seed, fit_config(cfg), scene_config(cfg), cloud_config(cfg), seed_config(cfg),
                     cfg["thresholds"], cfg["eval_spacing"])
    row = res.summary()
    row["report"] = res.report.to_dict()
    _write_json(out / f"demo_{seed:06d}.json", row)
    return row


def cmd_demo(cfg, out):
    seeds = [cfg["seed"] + k for k in range(cfg["count"])]
    rows = _pool_map(_demo_case, [(s, cfg, out) for s in seeds], cfg["jobs"])
    tau = cfg["thresholds"][0]
    f1 = [r["report"]["thresholds"][0]["f1"] for r in rows]
    summary = {"scenes": len(rows), "threshold": tau, "mean_f1": float(np.mean(f1)) if f1 else None,
               "min_f1": min(f1, default=None), "per_scene": [{k: r[k] for k in r if k != "report"} for r in rows]}
    _write_json(out / "demo_summary.json", summary)
    if len(rows) == 1:
        report = EvalReport.from_dict(rows[0]["report"])
        _write_json(out / "report.json", report.to_dict())
        _atomic_write(out / "report.txt", report.to_table())
        sys.stdout.write(report.to_table())
    return {k: summary[k] for k in ("scenes", "threshold", "mean_f1", "min_f1")}


HANDLERS = {"synth": cmd_synth, "rasterize": cmd_rasterize, "fit": cmd_fit, "eval": cmd_eval,
            "check-grads": cmd_check_grads, "demo": cmd_demo}


def _star(args):
    fn, a = args
    return fn(*a)


def _pool_map(fn, arglist, jobs):
    """Ordered map; results do not depend on the worker count."""
    if jobs <= 1 or len(arglist) <= 1:
        return [fn(*a) for a in arglist]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_star, [(fn, a) for a in arglist]))


# ---------------------------------------------------------------- entry point


def _error(kind, message, code, **extra):
    payload = {"error": kind, "message": message}
    payload.update(extra)
    sys.stderr.write(json.dumps(payload) + "\n")
    return code


def main(argv=None):
    level = os.environ.get("LANEGEOM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage
        return int(e.code or 0)
    ns = vars(args)
    command = ns.pop("command")
    config_path = ns.pop("config")
    out = Path(ns.pop("out") or ".")
    try:
        if config_path:
            _require(config_path, "config")
        cfg = resolve(command, ns, config_path)
        out.mkdir(parents=True, exist_ok=True)
        write_kv(out / CONFIG_NAME, {"command": command, **{k: _fmt(v) for k, v in cfg.items()}})
        result = HANDLERS[command](cfg, out)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        return _error("usage", str(e), 2)
    except FileNotFoundError as e:
        return _error("missing_file", f"file not found: {e.filename}", 3, path=str(e.filename))
    except LaneGeomError as e:
        return _error(type(e).__name__, str(e), 4)
    except (OSError, ValueError) as e:
        return _error(type(e).__name__, str(e), 5)
    log.info("%s finished", command)
    sys.stdout.write(json.dumps(result, sort_keys=True, default=float) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
