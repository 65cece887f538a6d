"""Command line entry points.

    ncrd preprocess  MIDI directory -> packed .ncrd streams
    ncrd train       fit a model on packed streams
    ncrd generate    sample a performance to a MIDI file
    ncrd eval        NLL tables on held-out data
    ncrd serve       OSC + WebSocket server around a checkpoint
    ncrd bench       feed/query latency percentiles
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

import numpy as np


def _add_seed(p):
    p.add_argument("--seed", type=int, default=0, help="RNG seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncrd")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="convert MIDI files to packed streams")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--augment", type=int, default=0, metavar="N",
                   help="augmented copies per file (default 0)")
    _add_seed(p)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="directory of .ncrd files")
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--steps", type=int, default=100, help="steps per epoch")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--window", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--embed-dim", type=int, default=256)
    p.add_argument("--hidden-dim", type=int, default=512)
    p.add_argument("--mlp-hidden", type=int, default=256)
    p.add_argument("--mlp-layers", type=int, default=2)
    p.add_argument("--mixture-k", type=int, default=16)
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_seed(p)

    p = sub.add_parser("generate", help="sample a performance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--max-events", type=int, default=256)
    p.add_argument("--out", help="write a .mid file here")
    p.add_argument("--ncrd-out", help="write a packed .ncrd stream here")
    p.add_argument("--roll", help="write a piano-roll .png here (needs matplotlib)")
    p.add_argument("--instruments", help="comma-separated instrument ids")
    p.add_argument("--stop-on-eos", action="store_true")
    _add_seed(p)

    p = sub.add_parser("eval", help="NLL tables")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subsets", action="store_true",
                   help="per-modality NLL under all conditioning subsets")
    p.add_argument("--permutations", action="store_true",
                   help="NLL under all 24 factorization orders")
    _add_seed(p)

    p = sub.add_parser("serve", help="run the OSC/WebSocket server")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--osc-port", type=int, default=9999)
    p.add_argument("--ws-port", type=int, default=8765)
    p.add_argument("--static", help="serve this directory over HTTP")
    p.add_argument("--http-port", type=int, default=8000)
    p.add_argument("--mode", default="raw",
                   choices=["raw", "autopitch", "harmonize", "improvise",
                            "generate", "surprise"],
                   help="initial app mode for WebSocket clients")
    _add_seed(p)

    p = sub.add_parser("bench", help="latency percentiles")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--events", type=int, default=1000)
    _add_seed(p)
    return parser


def cmd_preprocess(args) -> int:
    from .pipeline import preprocess
    stats = preprocess(args.input, args.output, seed=args.seed,
                       augment_copies=args.augment)
    print(f"wrote {stats['files']} streams ({stats['events']} events), "
          f"skipped {stats['skipped']}")
    return 0


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint
    from .model import ModelConfig, ModelParameters
    from .pipeline import load_dataset
    from .training import TrainConfig, tokens_from_stream, train

    streams = load_dataset(args.data)
    if not streams:
        print("no .ncrd files found", file=sys.stderr)
        return 1
    seqs = [tokens_from_stream(s) for s in streams if len(s.events) > 0]
    if args.resume:
        params, _, _ = load_checkpoint(args.resume)
    else:
        cfg = ModelConfig(embed_dim=args.embed_dim, hidden_dim=args.hidden_dim,
                          mlp_hidden=args.mlp_hidden, mlp_layers=args.mlp_layers,
                          mixture_k=args.mixture_k)
        params = ModelParameters.init(cfg, np.random.default_rng(args.seed))
    tcfg = TrainConfig(lr=args.lr, batch_size=args.batch,
                       window_length=args.window, epochs=args.epochs,
                       steps_per_epoch=args.steps, seed=args.seed)
    history = train(params, seqs, tcfg, out_dir=args.out)
    last = history[-1]
    print(f"done: train {last['total']:.4f} val {last['val']:.4f} "
          f"nats/event over {last['step']} steps")
    return 0


def _parse_ids(text):
    return frozenset(int(t) for t in text.split(",") if t) if text else None


def cmd_generate(args) -> int:
    from .engine import Engine
    from .apps import generate
    from .pipeline import render_midi, write_ncrd

    engine = Engine.from_checkpoint(args.ckpt, seed=args.seed)
    stream = generate(engine, args.max_events,
                      instruments=_parse_ids(args.instruments),
                      stop_on_eos=args.stop_on_eos)
    total = sum(e.time_delta for e in stream.events)
    print(f"{len(stream.events)} events spanning {total:.1f}s")
    if args.out:
        with open(args.out, "wb") as f:
            f.write(render_midi(stream))
        print(f"wrote {args.out}")
    if args.ncrd_out:
        with open(args.ncrd_out, "wb") as f:
            f.write(write_ncrd(stream))
        print(f"wrote {args.ncrd_out}")
    if args.roll:
        _write_roll(stream, args.roll)
    return 0


def _write_roll(stream, path) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("piano roll skipped: matplotlib not installed", file=sys.stderr)
        return
    fig, ax = plt.subplots(figsize=(12, 6))
    open_notes = {}
    t = 0.0
    lanes = {}
    for e in stream.events:
        t += e.time_delta
        key = (e.instrument, e.pitch)
        if e.velocity > 0:
            open_notes[key] = (t, e.velocity)
        elif key in open_notes:
            start, vel = open_notes.pop(key)
            lane = lanes.setdefault(e.instrument, len(lanes))
            color = plt.cm.tab20(lane % 20)
            ax.barh(e.pitch, max(t - start, 0.01), left=start, height=0.8,
                    color=color, alpha=0.4 + 0.6 * vel / 127.0)
    ax.set_xlabel("seconds")
    ax.set_ylabel("pitch")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    print(f"wrote {path}")


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .pipeline import load_dataset
    from .training import (permutation_table, subset_table,
                           tokens_from_stream, validation_nll)

    params, _, _ = load_checkpoint(args.ckpt)
    seqs = [tokens_from_stream(s) for s in load_dataset(args.data)
            if len(s.events) > 0]
    if not seqs:
        print("no usable sequences", file=sys.stderr)
        return 1
    base = validation_nll(params, params.config, seqs)
    print(f"unconditioned NLL: {base:.4f} nats/event over {len(seqs)} sequences")
    if args.subsets:
        table = subset_table(params, seqs)
        for (target, cond), nll in sorted(table.items()):
            given = ",".join(cond) if cond else "-"
            print(f"  {target:<10} | {given:<28} {nll:8.4f}")
    if args.permutations:
        table = permutation_table(params, seqs, seed=args.seed)
        for order, (mean, lo, hi) in sorted(table.items(), key=lambda t: t[1][0]):
            name = ">".join(m[:4] for m in order)
            print(f"  {name:<22} {mean:8.4f}  [{lo:.4f}, {hi:.4f}]")
    return 0


def cmd_serve(args) -> int:
    from .engine import Engine
    from .events import Event
    from .service.server import Session, serve_osc
    from .service.ws import start_static_server, start_ws_thread

    engine = Engine.from_checkpoint(args.ckpt, seed=args.seed)
    session = Session(engine)
    osc_server, _ = serve_osc(session, args.host, args.osc_port)
    _, stop_ws, ws_port = start_ws_thread(session, args.host, args.ws_port,
                                          initial_mode=args.mode)
    print(f"OSC on {args.host}:{osc_server.address[1]}, "
          f"WebSocket on {args.host}:{ws_port}")
    if args.static:
        _, http_port = start_static_server(args.static, args.host,
                                           args.http_port)
        print(f"frontend on http://{args.host}:{http_port}")
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        pass
    finally:
        def flush(eng):
            offs = [Event(i, p, 0.0, 0.0) for i, p in sorted(eng.held_notes)]
            for e in offs:
                eng.feed_event(e)
            return offs
        for e in session.call(flush):
            print(f"flushed note-off {e.instrument} {e.pitch}")
        stop_ws()
        osc_server.close()
        session.close()
    return 0


def cmd_bench(args) -> int:
    from .engine import Engine, QuerySpec

    engine = Engine.from_checkpoint(args.ckpt, seed=args.seed)
    spec = QuerySpec()
    # warmup
    for _ in range(20):
        pred = engine.query(spec)
        engine.feed_event(pred.to_event())
    feed_ns, query_ns = [], []
    for _ in range(args.events):
        t0 = time.perf_counter_ns()
        pred = engine.query(spec)
        t1 = time.perf_counter_ns()
        engine.feed_event(pred.to_event())
        t2 = time.perf_counter_ns()
        query_ns.append(t1 - t0)
        feed_ns.append(t2 - t1)
    for name, xs in (("query", query_ns), ("feed", feed_ns)):
        xs = np.array(xs, dtype=np.float64) / 1e6
        p50, p95, p99 = np.percentile(xs, [50, 95, 99])
        print(f"{name:>6}: p50 {p50:.2f}ms p95 {p95:.2f}ms "
              f"p99 {p99:.2f}ms max {xs.max():.2f}ms")
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "serve": cmd_serve,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
