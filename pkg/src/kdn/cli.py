"""Operator command line: server, store client, blender, codec bench,
and cost-model reports.

Exit codes: 0 success, 1 operational error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import blender, codec, costmodel, delivery, fixtures, model, store

DEFAULT_SEED = 20240901


class CliError(Exception):
    """Operational failure reported as a one-line diagnostic (exit 1)."""


class UsageError(CliError):
    """Bad flags or request values (exit 2)."""


def _load_model_config(spec: str) -> model.ModelConfig:
    text = spec
    if os.path.exists(spec):
        text = Path(spec).read_text()
    try:
        return model.ModelConfig.from_dict(json.loads(text))
    except (json.JSONDecodeError, KeyError, model.ModelError) as e:
        raise CliError(f"bad model config {spec!r}: {e}") from e


def _load_tokens(path: str) -> list[int]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliError(f"cannot read token file: {e}") from e
    try:
        return [int(tok) for tok in text.split()]
    except ValueError as e:
        raise CliError(f"token file must hold whitespace-separated integers: {e}") from e


def _resolve_profile(name: str) -> codec.CodecProfile:
    if name in codec.PROFILES:
        return codec.PROFILES[name]
    try:
        return codec.CodecProfile.from_dict(json.loads(name))
    except (json.JSONDecodeError, TypeError, codec.CodecError) as e:
        known = ", ".join(sorted(codec.PROFILES))
        raise CliError(f"unknown codec profile {name!r} (known: {known}): {e}") from e


def _store_root(args) -> Path:
    root = args.root or os.environ.get("KDN_ROOT")
    if not root:
        raise CliError("no store root: pass --root or set KDN_ROOT")
    return Path(root)


def _open_store(args) -> store.Store:
    root = _store_root(args)
    if not root.exists() and getattr(args, "must_exist", False):
        raise CliError(f"store root {root} does not exist")
    return store.open_store(store.StoreConfig(root=root, capacity=args.capacity))


def _emit_table(headers: list[str], rows: list[list], fmt: str) -> None:
    if fmt == "json":
        print(json.dumps([dict(zip(headers, row)) for row in rows], indent=2, default=str))
    elif fmt == "csv":
        w = csv.writer(sys.stdout)
        w.writerow(headers)
        w.writerows(rows)
    else:
        widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
                  for i, h in enumerate(headers)]
        print("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
        for row in rows:
            print("  ".join(str(c).ljust(w) for c, w in zip(row, widths)))


# -- subcommands ---------------------------------------------------------------


def cmd_serve(args) -> int:
    root = _store_root(args)
    if not root.exists():
        raise CliError(f"store root {root} does not exist")
    st = store.open_store(store.StoreConfig(root=root, capacity=args.capacity))
    try:
        server = delivery.serve(st, host=args.host, port=args.port)
    except OSError as e:
        raise CliError(f"cannot bind {args.host}:{args.port}: {e}") from e
    host, port = server.server_address
    print(f"kdn serve: {len(st.entries)} chunks at {root}, listening on {host}:{port}")
    if args.bw:
        print(f"link model: {args.bw:.3e} B/s, latency {args.latency}s (simulation only)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return 0


def cmd_put(args) -> int:
    cfg = _load_model_config(args.model)
    tokens = _load_tokens(args.tokens)
    mdl = model.build_model(cfg)
    st = _open_store(args)
    before = set(st.entries)
    keys = st.store_text(mdl, tokens, mode=args.mode, profile=_resolve_profile(args.profile))
    fresh = sum(1 for k in keys if k.digest not in before)
    if fresh == 0:
        print("already stored")
    rows = [[i, k.mode, k.hex] for i, k in enumerate(keys)]
    _emit_table(["chunk", "mode", "key"], rows, args.output)
    return 0


def cmd_get(args) -> int:
    cfg = _load_model_config(args.model)
    tokens = _load_tokens(args.tokens)
    if args.host:
        client = delivery.Client(args.host, args.port)
        caches, miss = client.fetch(cfg.model_id, args.mode, tokens)
        rows = [[i, c.n_tokens, c.start_pos] for i, c in enumerate(caches)]
        _emit_table(["chunk", "tokens", "start_pos"], rows, args.output)
    else:
        st = _open_store(args)
        hits, miss = st.retrieve_text(cfg.model_id, tokens, mode=args.mode)
        rows = [[i, key.hex, chunk.n_tokens] for i, (key, chunk) in enumerate(hits)]
        _emit_table(["chunk", "key", "tokens"], rows, args.output)
    print(f"miss_suffix: {len(miss)} tokens" + (f" -> {' '.join(map(str, miss))}" if miss else ""))
    return 0


def cmd_blend(args) -> int:
    try:
        req = json.loads(Path(args.request).read_text())
        cfg = model.ModelConfig.from_dict(req["model"])
        segment_tokens = req["segments"]
        ratio = float(req["ratio"])
    except (OSError, json.JSONDecodeError, KeyError, ValueError, model.ModelError) as e:
        raise CliError(f"bad blend request: {e}") from e
    if not 0.0 <= ratio <= 1.0:
        raise UsageError(f"ratio {ratio} out of [0, 1]")
    mdl = model.build_model(cfg)
    segments = [blender.Segment.from_tokens(mdl, [int(t) for t in toks]) for toks in segment_tokens]
    blended, states, report = blender.selective_blend(mdl, segments, ratio)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_path = out_dir / "blended.kdnf"
    report_path = out_dir / "blend_report.json"
    model.save_fixture(cache_path, cfg, blended, states)
    report_path.write_text(
        json.dumps(
            {
                "recompute_ratio": report.recompute_ratio,
                "selected": report.selected,
                "scores": [float(s) for s in report.scores],
                "final_state_error": report.final_state_error,
                "kv_error": report.kv_error,
            },
            indent=2,
        )
    )
    print(f"blended cache -> {cache_path}")
    print(f"report -> {report_path} (kv_error={report.kv_error:.3e}, "
          f"final_state_error={report.final_state_error:.3e})")
    return 0


def cmd_bench_codec(args) -> int:
    profile = _resolve_profile(args.profile)
    cases = {
        "smooth": fixtures.smooth_cache(),
        "random": fixtures.random_cache(seed=args.seed),
    }
    rows = []
    for name, cache in cases.items():
        chunk = codec.compress_cache(cache, profile)
        restored = codec.decompress_cache(chunk)
        ratio = chunk.uncompressed_len / len(chunk.to_bytes())
        err = max(
            float(np.abs(restored.k_pre - cache.k_pre).max()),
            float(np.abs(restored.v - cache.v).max()),
        )
        rows.append([name, f"{ratio:.2f}", f"{err:.3e}", chunk.uncompressed_len, len(chunk.to_bytes())])
    _emit_table(["fixture", "ratio", "max_err", "raw_bytes", "compressed_bytes"], rows, args.output)
    return 0


def _load_params(path: str) -> tuple[costmodel.CostParams, dict]:
    try:
        doc = json.loads(Path(path).read_text())
        return costmodel.CostParams.from_dict(doc), doc
    except (OSError, json.JSONDecodeError, KeyError, costmodel.CostModelError) as e:
        raise CliError(f"bad params file: {e}") from e


def _conventions(args) -> costmodel.Conventions:
    return costmodel.Conventions(include_tq=not args.no_tq, paper_delay_kv=args.paper_delay)


def cmd_cost_report(args) -> int:
    measured = costmodel.PUBLISHED_MEASUREMENTS
    if args.params:
        _, doc = _load_params(args.params)
        if "measured" in doc:
            measured = {
                name: costmodel.SystemMeasurement(
                    inject_time=float(m["inject_time"]), cost=float(m["cost"]), delay=float(m["delay"])
                )
                for name, m in doc["measured"].items()
            }
    report = costmodel.comparison_report(measured)
    rows = [
        [name, m.inject_time, m.cost, m.delay]
        for name, m in report.rows.items()
    ]
    _emit_table(["system", "inject_hours", "cost_per_query", "delay_per_query"], rows, args.output)
    inject = "inf" if math.isinf(report.inject_ratio) else f"{report.inject_ratio:.2f}"
    print(f"inject ratio (FT/KDN): {inject}x")
    print(f"cost ratio   (IC/KDN): {report.cost_ratio:.2f}x")
    print(f"delay ratio  (IC/KDN): {report.delay_ratio:.2f}x")
    return 0


def _parse_sweep(spec: str) -> tuple[str, np.ndarray]:
    try:
        name, grid = spec.split("=", 1)
        lo, hi, step = (float(x) for x in grid.split(":"))
    except ValueError as e:
        raise CliError(f"bad sweep spec {spec!r}, expected name=lo:hi:step") from e
    if name != "r1":
        raise CliError(f"only r1 sweeps are supported, got {name!r}")
    if step <= 0:
        raise CliError("sweep step must be positive")
    return name, np.arange(lo, hi + step / 2, step)


def cmd_cost_sweep(args) -> int:
    params, doc = _load_params(args.params)
    conventions = _conventions(args)
    objective = costmodel.Objective(args.objective)
    r2 = float(doc.get("r2", 0.0))
    _, grid = _parse_sweep(args.sweep)
    threshold = costmodel.threshold_r1(params, objective, r2=r2, conventions=conventions)
    rows = []
    for r1 in grid:
        r1 = float(r1)
        mix = costmodel.WorkloadMix(r1, min(r2, 1.0 - r1))
        vals = {
            s: costmodel.per_query(s, params, mix, conventions) for s in costmodel.System
        }
        winner, _ = costmodel.best_system(params, mix, objective, conventions)
        marker = ""
        half_step = (grid[1] - grid[0]) / 2 if len(grid) > 1 else 0.0
        if threshold.r1 is not None and abs(r1 - threshold.r1) <= half_step:
            marker = "<-- threshold"
        rows.append(
            [f"{r1:.3f}"]
            + [f"{getattr(vals[s], 'money' if objective is costmodel.Objective.MONEY else 'delay_seconds'):.6g}"
               for s in costmodel.System]
            + [winner.name, marker]
        )
    _emit_table(["r1", "FT", "IC", "KV", "best", ""], rows, args.output)
    if threshold.kind == "crossing":
        print(f"threshold r1* = {threshold.r1:.6f}")
    else:
        print(f"threshold: {threshold.kind}")
    return 0


def cmd_cost_simulate(args) -> int:
    params, _ = _load_params(args.params)
    conventions = _conventions(args)
    try:
        raw = json.loads(Path(args.trace).read_text())
        trace = [(float(t), str(c)) for t, c in raw]
    except (OSError, json.JSONDecodeError, ValueError, TypeError) as e:
        raise CliError(f"bad trace file: {e}") from e
    mix = costmodel.empirical_mix(trace, params.refresh_period)
    rows = []
    for system in costmodel.System:
        sim = costmodel.simulate_trace(params, trace, system, conventions)
        closed = costmodel.per_query(system, params, mix, conventions)
        diff = max(
            abs(sim.gpu_seconds - closed.gpu_seconds),
            abs(sim.storage_bytes - closed.storage_bytes),
            abs(sim.network_bytes - closed.network_bytes),
            abs(sim.delay_seconds - closed.delay_seconds),
        )
        rows.append([system.name, f"{sim.money:.6g}", f"{closed.money:.6g}", f"{diff:.3e}"])
    print(f"empirical mix: r1={mix.r1:.4f} r2={mix.r2:.4f} over {len(trace)} queries")
    _emit_table(["system", "sim_money", "closed_money", "max_abs_diff"], rows, args.output)
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdn", description=__doc__)
    parser.add_argument("--output", choices=["text", "csv", "json"], default="text")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the delivery server over a store")
    p.add_argument("--root", help="store root (or KDN_ROOT)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7311)
    p.add_argument("--bw", type=float, default=0.0, help="link bandwidth B/s for reporting")
    p.add_argument("--latency", type=float, default=0.0)
    p.add_argument("--capacity", type=int, default=1 << 30)
    p.set_defaults(func=cmd_serve)

    for name, fn in (("put", cmd_put), ("get", cmd_get)):
        p = sub.add_parser(name, help=f"{name} token text {'into' if name == 'put' else 'from'} a store")
        p.add_argument("--root", help="store root (or KDN_ROOT)")
        p.add_argument("--model", required=True, help="model config JSON (file or inline)")
        p.add_argument("--tokens", required=True, help="whitespace-separated token id file")
        p.add_argument("--mode", choices=[store.MODE_CHAIN, store.MODE_STANDALONE], default=store.MODE_CHAIN)
        p.add_argument("--capacity", type=int, default=1 << 30)
        if name == "put":
            p.add_argument("--profile", default="8bit-deflate")
        else:
            p.add_argument("--host", help="fetch from a server instead of a local store")
            p.add_argument("--port", type=int, default=7311)
        p.set_defaults(func=fn)

    p = sub.add_parser("blend", help="run a selective blend request")
    p.add_argument("--request", required=True, help="JSON blend request")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_blend)

    p = sub.add_parser("bench", help="benchmarks")
    bench_sub = p.add_subparsers(dest="bench_target", required=True)
    pb = bench_sub.add_parser("codec", help="ratio/error table over fixture caches")
    pb.add_argument("--profile", required=True)
    pb.add_argument("--seed", type=int, default=DEFAULT_SEED)
    pb.set_defaults(func=cmd_bench_codec)

    p = sub.add_parser("cost", help="cost-model reports")
    cost_sub = p.add_subparsers(dest="cost_target", required=True)
    for name, fn in (
        ("report", cmd_cost_report),
        ("sweep", cmd_cost_sweep),
        ("simulate", cmd_cost_simulate),
    ):
        pc = cost_sub.add_parser(name)
        pc.add_argument("--params", required=(name != "report"))
        pc.add_argument("--no-tq", action="store_true", help="drop T_Q from gpu and delay")
        pc.add_argument("--paper-delay", action="store_true", help="use the published KV delay row")
        if name == "sweep":
            pc.add_argument("--sweep", default="r1=0:1:0.01")
            pc.add_argument("--objective", choices=["money", "delay"], default="money")
        if name == "simulate":
            pc.add_argument("--trace", required=True, help="JSON [[time, context], ...]")
        pc.set_defaults(func=fn)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"kdn: {e}", file=sys.stderr)
        return 2
    except CliError as e:
        print(f"kdn: {e}", file=sys.stderr)
        return 1
    except (
        model.ModelError,
        codec.CodecError,
        store.StoreError,
        blender.BlendError,
        delivery.ProtocolError,
        costmodel.CostModelError,
        OSError,
    ) as e:
        print(f"kdn: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
