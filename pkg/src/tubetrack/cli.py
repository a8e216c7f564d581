"""Command line front end.

Subcommands: ``track`` (extract a centerline tree from a volume),
``phantom`` (render a synthetic test volume plus ground truth),
``eval`` (compare two centerline files) and ``sweep`` (grid search
over tracker parameters against a known truth).

Configuration layers, later wins: built-in defaults or ``--preset``,
then an INI ``--config`` file, then individual flags.  Exit codes:
0 success, 1 tracking failed, 2 bad input.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import itertools
import json
import sys
import time

import numpy as np

from . import phantom as phantom_mod
from .metrics import tree_distance, tree_overlap
from .tracker import (AuditLog, BifurcationConfig, CenterlineTree,
                      PRESET_NAMES, TrackerConfig, preset, track_tree)
from .volume import read_volume, write_metaimage

_CONFIG_FIELDS = {f.name: f.type for f in
                  dataclasses.fields(TrackerConfig)
                  if f.name not in ("bifurcation", "fit")}


def _parse_vec(text, name):
    try:
        parts = [float(p) for p in text.split(",")]
    except ValueError:
        raise SystemExit2(f"bad {name}: {text!r}")
    if len(parts) != 3:
        raise SystemExit2(f"{name} needs three comma-separated values")
    return np.array(parts)


class SystemExit2(Exception):
    """Bad input; maps to exit code 2."""


def _coerce(name, raw):
    if name in ("search_depth", "num_angles", "max_steps",
                "frontier_cap", "max_branches",
                "self_intersection_grace"):
        return int(raw)
    if name in ("mode", "score_variant", "rank_pool"):
        return str(raw)
    if name == "local_threshold":
        if str(raw).lower() in ("", "none"):
            return None
        return float(raw)
    return float(raw)


def _config_from_file(path, base):
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise SystemExit2(f"config not found: {path}")
    kw = {}
    if parser.has_section("tracker"):
        for key, raw in parser.items("tracker"):
            if key not in _CONFIG_FIELDS:
                raise SystemExit2(f"unknown tracker option {key!r}")
            kw[key] = _coerce(key, raw)
    bif = base.bifurcation
    if parser.has_section("bifurcation"):
        bkw = {}
        for key, raw in parser.items("bifurcation"):
            if key == "enabled":
                bkw[key] = parser.getboolean("bifurcation", key)
            elif key == "min_cluster_size":
                bkw[key] = int(raw)
            elif key == "separation_factor":
                bkw[key] = float(raw)
            else:
                raise SystemExit2(f"unknown bifurcation option {key!r}")
        bif = dataclasses.replace(bif, **bkw)
    return dataclasses.replace(base, bifurcation=bif, **kw)


_FLAG_MAP = [
    ("r_min", "--r-min", float),
    ("r_max", "--r-max", float),
    ("step_length_factor", "--step-factor", float),
    ("weight_window_factor", "--window-factor", float),
    ("search_depth", "--depth", int),
    ("search_angle", "--angle", float),
    ("num_angles", "--num-angles", int),
    ("local_threshold", "--local-threshold", float),
    ("global_threshold", "--global-threshold", float),
    ("mode", "--mode", str),
    ("score_variant", "--score-variant", str),
    ("rank_pool", "--rank-pool", str),
    ("max_steps", "--max-steps", int),
    ("max_branches", "--max-branches", int),
]


def _add_tracker_flags(p):
    p.add_argument("--preset", choices=sorted(PRESET_NAMES))
    p.add_argument("--config")
    for name, flag, typ in _FLAG_MAP:
        p.add_argument(flag, dest=f"cfg_{name}", type=typ, default=None)
    p.add_argument("--no-bifurcation", action="store_true")


def _build_config(args):
    cfg = preset(args.preset) if args.preset else TrackerConfig()
    if args.config:
        cfg = _config_from_file(args.config, cfg)
    kw = {}
    for name, _, _ in _FLAG_MAP:
        val = getattr(args, f"cfg_{name}")
        if val is not None:
            kw[name] = val
    if kw:
        cfg = dataclasses.replace(cfg, **kw)
    if args.no_bifurcation:
        cfg = dataclasses.replace(
            cfg, bifurcation=dataclasses.replace(cfg.bifurcation,
                                                 enabled=False))
    cfg.validate()
    return cfg


def _load_volume(path):
    try:
        return read_volume(path)
    except FileNotFoundError:
        raise SystemExit2(f"volume not found: {path}")
    except ValueError as exc:
        raise SystemExit2(f"bad volume {path}: {exc}")


def _load_tree(path):
    try:
        return CenterlineTree.load(path)
    except FileNotFoundError:
        raise SystemExit2(f"centerline not found: {path}")
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise SystemExit2(f"bad centerline {path}: {exc}")


def _cmd_track(args):
    vol = _load_volume(args.volume)
    seed = _parse_vec(args.seed, "seed")
    direction = None
    if args.seed_direction:
        direction = _parse_vec(args.seed_direction, "seed direction")
    cfg = _build_config(args)
    audit = AuditLog() if args.audit else None
    t0 = time.perf_counter()
    try:
        tree = track_tree(vol, seed, cfg, seed_direction=direction,
                          audit=audit)
    except ValueError as exc:
        print(f"tracking failed: {exc}", file=sys.stderr)
        return 1
    elapsed = time.perf_counter() - t0
    tree.save(args.out)
    if audit is not None:
        audit.write(args.audit)
    print(f"branches: {len(tree.branches)}")
    print(f"points: {tree.n_points()}")
    print(f"length_mm: {tree.total_length():.3f}")
    print(f"seconds: {elapsed:.2f}")
    return 0


def _cmd_phantom(args):
    if bool(args.name) == bool(args.spec):
        raise SystemExit2("give exactly one of --name or --spec")
    if args.name:
        kw = {}
        if args.noise_sigma is not None:
            kw["noise_sigma"] = args.noise_sigma
        if args.rng_seed is not None:
            kw["rng_seed"] = args.rng_seed
        try:
            case = phantom_mod.build(args.name, **kw)
        except ValueError as exc:
            raise SystemExit2(str(exc))
        spec, vol, truth = case.spec, case.volume, case.truth
        seed = case.seed
    else:
        try:
            with open(args.spec) as fh:
                spec = phantom_mod.PhantomSpec.from_dict(json.load(fh))
        except FileNotFoundError:
            raise SystemExit2(f"spec not found: {args.spec}")
        vol, truth = phantom_mod.render(spec)
        seed = np.asarray(spec.branches[0].start, dtype=float)
    write_metaimage(args.out_volume, vol)
    truth.save(args.out_truth)
    print(f"volume: {args.out_volume}")
    print(f"truth: {args.out_truth}")
    print(f"seed: {seed[0]:g},{seed[1]:g},{seed[2]:g}")
    return 0


def _cmd_eval(args):
    test = _load_tree(args.test)
    ref = _load_tree(args.ref)
    out = {"d_err": tree_distance(test, ref, weight=args.weight,
                                  spacing=args.spacing)}
    out.update(tree_overlap(test, ref, spacing=args.spacing))
    text = json.dumps(out, sort_keys=True, indent=2)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return 0


def _parse_grid(entries):
    axes = []
    for entry in entries:
        if "=" not in entry:
            raise SystemExit2(f"bad grid entry {entry!r}")
        name, _, vals = entry.partition("=")
        name = name.strip()
        if name not in _CONFIG_FIELDS:
            raise SystemExit2(f"unknown tracker option {name!r}")
        values = [_coerce(name, v.strip()) for v in vals.split(",") if
                  v.strip()]
        if not values:
            raise SystemExit2(f"empty grid for {name!r}")
        axes.append((name, values))
    if not axes:
        raise SystemExit2("sweep needs at least one --grid")
    return axes


def _cmd_sweep(args):
    vol = _load_volume(args.volume)
    truth = _load_tree(args.truth)
    seed = _parse_vec(args.seed, "seed")
    base = _build_config(args)
    axes = _parse_grid(args.grid)
    names = [n for n, _ in axes]
    combos = list(itertools.product(*[v for _, v in axes]))

    done = set()
    header = ["index"] + names + ["d_err", "ov", "branches", "status"]
    try:
        with open(args.out) as fh:
            for row in csv.DictReader(fh):
                done.add(int(row["index"]))
        mode = "a"
    except FileNotFoundError:
        mode = "w"

    with open(args.out, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(header)
        for idx, combo in enumerate(combos):
            if idx in done:
                continue
            cfg = dataclasses.replace(base,
                                      **dict(zip(names, combo)))
            try:
                cfg.validate()
                tree = track_tree(vol, seed, cfg)
                d = tree_distance(tree, truth, spacing=args.spacing)
                ov = tree_overlap(tree, truth,
                                  spacing=args.spacing)["ov"]
                row = [idx, *combo, f"{d:.6f}", f"{ov:.6f}",
                       len(tree.branches), "ok"]
            except ValueError as exc:
                row = [idx, *combo, "", "", 0, f"failed: {exc}"]
            writer.writerow(row)
            fh.flush()
            print(f"[{idx + 1}/{len(combos)}] "
                  + " ".join(f"{n}={v}" for n, v in zip(names, combo))
                  + f" -> {row[-1]}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(
        prog="tubetrack",
        description="Tubular centerline extraction by ranked "
                    "multi-hypothesis template tracking.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("track", help="extract a centerline tree")
    p.add_argument("--volume", required=True)
    p.add_argument("--seed", required=True,
                   help="seed point, mm: x,y,z")
    p.add_argument("--seed-direction",
                   help="optional initial direction: x,y,z")
    p.add_argument("--out", required=True)
    p.add_argument("--audit", help="write a JSON-lines audit log")
    _add_tracker_flags(p)
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("phantom", help="render a synthetic volume")
    p.add_argument("--name", help="suite phantom name")
    p.add_argument("--spec", help="phantom spec JSON file")
    p.add_argument("--out-volume", required=True)
    p.add_argument("--out-truth", required=True)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--rng-seed", type=int, default=None)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("eval", help="compare two centerline files")
    p.add_argument("--test", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--weight", type=float, default=0.5)
    p.add_argument("--spacing", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="parameter grid search")
    p.add_argument("--volume", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--seed", required=True)
    p.add_argument("--grid", action="append", default=[],
                   help="axis as name=v1,v2,... (repeatable)")
    p.add_argument("--spacing", type=float, default=0.5)
    p.add_argument("--out", required=True)
    _add_tracker_flags(p)
    p.set_defaults(func=_cmd_sweep)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit2 as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
