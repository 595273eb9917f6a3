"""Command-line driver.

Subcommands mirror the compilation flow — ``graph``, ``select``,
``pipeline``, ``balance``, ``simulate``, ``report``, ``sweep`` — plus
``check-queue`` for the ring-protocol checker and transfer-cost curve.

Exit codes: 0 success, 1 user error, 2 internal invariant violation.
The KITSUNE_MACHINE environment variable supplies the default machine
(preset name or JSON config path) wherever ``--machine`` is accepted.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

from kitsune.balance import solve_allocation
from kitsune.errors import KitsuneError
from kitsune.graph import (
    BUILTIN_GRAPHS,
    OperatorGraph,
    builtin_graph,
    load_graph,
    serialize_graph,
)
from kitsune.machine import MachineConfig, load_machine
from kitsune.metrics import quadrants, sensitivity_sweep, speedup_report, traffic_report
from kitsune.patterns import select
from kitsune.pipeline import PipelineConfig, build_pipelines
from kitsune.queue_model import check_matrix, queue_cost
from kitsune.sim import MODES, run

_CURVE_PAYLOADS = (1024, 4096, 16384, 65536, 131072, 262144, 524288)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; those are user errors here
    def error(self, message: str):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_graph_source(p: argparse.ArgumentParser) -> None:
    p.add_argument("--builtin", action="append", metavar="NAME", help="built-in graph name (repeatable)")
    p.add_argument("--param", action="append", metavar="KEY=INT", help="override a builtin parameter")
    p.add_argument("--input", metavar="FILE", help="operator graph JSON file")


def _add_machine(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--machine",
        default=os.environ.get("KITSUNE_MACHINE") or None,
        metavar="NAME|FILE",
        help="machine preset or JSON config (default: $KITSUNE_MACHINE, else a100)",
    )


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--output", metavar="FILE", help="write here instead of stdout")


def _params(args) -> dict[str, int]:
    params: dict[str, int] = {}
    for kv in args.param or []:
        key, sep, value = kv.partition("=")
        if not sep or not key:
            raise KitsuneError(f"--param expects KEY=INT, got '{kv}'")
        try:
            params[key] = int(value)
        except ValueError:
            raise KitsuneError(f"--param '{key}' needs an integer value, got '{value}'")
    return params


def _load_graphs(args) -> list[OperatorGraph]:
    graphs: list[OperatorGraph] = []
    for name in args.builtin or []:
        graphs.append(builtin_graph(name, **_params(args)))
    if args.input:
        if args.param:
            raise KitsuneError("--param only applies to --builtin graphs")
        graphs.append(load_graph(args.input))
    if not graphs:
        raise KitsuneError("provide --builtin NAME or --input FILE")
    return graphs


def _load_one_graph(args) -> OperatorGraph:
    graphs = _load_graphs(args)
    if len(graphs) != 1:
        raise KitsuneError("this command takes exactly one graph")
    return graphs[0]


def _pipeline_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "payload_budget", None):
        cfg.payload_budget = args.payload_budget
    if getattr(args, "queue_depth", None):
        cfg.queue_depth = args.queue_depth
    return cfg


def _emit(args, text: str) -> None:
    if not text.endswith("\n"):
        text += "\n"
    if getattr(args, "output", None):
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _dumps(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_graph(args) -> int:
    if args.list:
        _emit(args, "\n".join(sorted(BUILTIN_GRAPHS)))
        return 0
    g = _load_one_graph(args)
    _emit(args, serialize_graph(g))
    return 0


def _cmd_select(args) -> int:
    g = _load_one_graph(args)
    _emit(args, _dumps(select(g).to_dict()))
    return 0


def _cmd_pipeline(args) -> int:
    g = _load_one_graph(args)
    pipes = build_pipelines(g, select(g), _pipeline_config(args))
    _emit(args, _dumps([p.to_dict() for p in pipes]))
    return 0


def _cmd_balance(args) -> int:
    g = _load_one_graph(args)
    machine = load_machine(args.machine)
    pipes = build_pipelines(g, select(g), _pipeline_config(args))
    allocs = [solve_allocation(p, machine).to_dict() for p in pipes]
    _emit(args, _dumps({"graph": g.name, "machine": machine.name, "pipelines": allocs}))
    return 0


def _cmd_simulate(args) -> int:
    g = _load_one_graph(args)
    machine = load_machine(args.machine)
    trace = run(g, args.mode, machine, config=_pipeline_config(args))
    doc = trace.to_dict()
    if not args.events:
        doc["events"] = []
        doc["samples"] = []
    _emit(args, _dumps(doc))
    return 0


def _report_graphs(args) -> list[OperatorGraph]:
    if args.builtin or args.input:
        return _load_graphs(args)
    return [builtin_graph(name) for name in sorted(BUILTIN_GRAPHS)]


def _cmd_report(args) -> int:
    machine = load_machine(args.machine)
    traces = {}
    for g in _report_graphs(args):
        traces[g.name] = {mode: run(g, mode, machine) for mode in MODES}
    if args.table == "speedup":
        rep = speedup_report(traces)
    elif args.table == "traffic":
        rep = traffic_report(traces)
    else:  # util
        doc = {
            graph: {mode: quadrants(traces[graph][mode]).to_dict() for mode in sorted(traces[graph])}
            for graph in sorted(traces)
        }
        _emit(args, _dumps(doc))
        return 0
    _emit(args, rep.to_json() if args.format == "json" else rep.to_csv())
    return 0


def _cmd_sweep(args) -> int:
    base = load_machine(args.machine)
    variants = [load_machine(v) for v in args.variant]
    rep = sensitivity_sweep(_report_graphs(args), base, variants)
    _emit(args, rep.to_json() if args.format == "json" else rep.to_csv())
    return 0


def _cmd_check_queue(args) -> int:
    if args.curve:
        machine = load_machine(args.machine)
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["payload_bytes", "queue_gbps", "aggregate_gbps", "latency_us", "spilled"])
        for payload in _CURVE_PAYLOADS:
            c = queue_cost(payload, args.queues, machine, depth=args.depth[0] if args.depth else 2)
            w.writerow(
                [
                    payload,
                    f"{c.queue_gbps:.6f}",
                    f"{c.aggregate_gbps:.6f}",
                    f"{c.latency_s * 1e6:.6f}",
                    int(c.spilled),
                ]
            )
        _emit(args, out.getvalue())
        return 0

    results = check_matrix(
        depths=tuple(args.depth or (2, 3)),
        consumer_counts=tuple(args.consumers or (1, 2)),
        items=args.items,
    )
    lines = []
    bad = 0
    for r in results:
        status = "ok" if r.ok else f"VIOLATION: {r.violation}"
        lines.append(
            f"depth={r.depth} consumers={r.consumers} items={r.items} "
            f"states={r.states} {status}"
        )
        bad += 0 if r.ok else 1
    _emit(args, "\n".join(lines))
    return 2 if bad else 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kitsune", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0, help="seed for randomized harnesses")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("graph", help="validate and canonically print an operator graph")
    _add_graph_source(p)
    _add_output(p)
    p.add_argument("--list", action="store_true", help="list built-in graph names")
    p.set_defaults(fn=_cmd_graph)

    p = sub.add_parser("select", help="pick pipeline subgraphs by pattern matching")
    _add_graph_source(p)
    _add_output(p)
    p.set_defaults(fn=_cmd_select)

    for name, fn, with_machine in (
        ("pipeline", _cmd_pipeline, False),
        ("balance", _cmd_balance, True),
    ):
        p = sub.add_parser(name, help=f"lower selected subgraphs ({name})")
        _add_graph_source(p)
        _add_output(p)
        if with_machine:
            _add_machine(p)
        p.add_argument("--payload-budget", type=int, metavar="BYTES")
        p.add_argument("--queue-depth", type=int, metavar="N")
        p.set_defaults(fn=fn)

    p = sub.add_parser("simulate", help="run one execution mode and print the trace")
    _add_graph_source(p)
    _add_output(p)
    _add_machine(p)
    p.add_argument("--mode", choices=MODES, required=True)
    p.add_argument("--events", action="store_true", help="include per-event timeline and samples")
    p.add_argument("--payload-budget", type=int, metavar="BYTES")
    p.add_argument("--queue-depth", type=int, metavar="N")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("report", help="compare modes across graphs")
    _add_graph_source(p)
    _add_output(p)
    _add_machine(p)
    p.add_argument("--table", choices=("speedup", "traffic", "util"), default="speedup")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("sweep", help="machine sensitivity sweep")
    _add_graph_source(p)
    _add_output(p)
    _add_machine(p)
    p.add_argument("--variant", action="append", required=True, metavar="NAME|FILE")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("check-queue", help="queue protocol checker / transfer-cost curve")
    _add_output(p)
    _add_machine(p)
    p.add_argument("--depth", action="append", type=int, metavar="N")
    p.add_argument("--consumers", action="append", type=int, metavar="N")
    p.add_argument("--items", type=int, default=6)
    p.add_argument("--curve", action="store_true", help="print the transfer-cost curve instead")
    p.add_argument("--queues", type=int, default=54, help="active queues for --curve")
    p.set_defaults(fn=_cmd_check_queue)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except SystemExit as e:  # raised by _Parser.error with code 1
        return e.code if isinstance(e.code, int) else 1
    except KitsuneError as e:
        print(f"kitsune: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # pragma: no cover - defensive
        print(f"kitsune: internal error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
