"""Command-line interface: optimize, derive, verify, lower, fingerprint."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import Optional

import click

from .cost import CostParams, estimate, explain, rank
from .errors import DerivError, VerificationFailed
from .fingerprint import fingerprint
from .frontend import graph_to_dict, is_nonlinear, load_program, save_program, to_expression
from .matcher import emit_tvm, lower as lower_scope
from .pipeline import PipelineConfig, optimize as run_optimize, summarize, verify_graphs
from .rules import read_trace, write_trace
from .search import Candidate, SearchConfig, derive as run_derive, replay, to_graph
from .text import format_expr

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_VERIFY = 2
EXIT_BUDGET = 3


def _emit(ctx, payload: dict, text: str):
    if ctx.obj["json"]:
        click.echo(json.dumps(payload, indent=2, sort_keys=True))
    else:
        click.echo(text)


def _load(path):
    try:
        return load_program(path)
    except DerivError as exc:
        raise click.ClickException(f"{path}: {type(exc).__name__}: {exc}")


def search_options(fn):
    opts = [
        click.option("--max-depth", default=7, show_default=True, help="Explorative depth bound."),
        click.option("--targets", default=None, help="Comma-separated operator kinds for guided search."),
        click.option("--state-cap", default=50_000, show_default=True),
        click.option("--time-cap-s", default=120.0, show_default=True),
        click.option("--no-prune", is_flag=True, help="Disable fingerprint deduplication."),
        click.option("--no-guided", is_flag=True, help="Explorative derivation only."),
        click.option("--cost-params", type=click.Path(exists=True, dir_okay=False), default=None,
                     help="JSON with flops_per_s, bytes_per_s, launch_s."),
        click.option("--explain-cost", is_flag=True, help="Print the per-node cost breakdown."),
    ]
    for o in reversed(opts):
        fn = o(fn)
    return fn


def _search_cfg(ctx, max_depth, targets, state_cap, time_cap_s, no_prune, no_guided) -> SearchConfig:
    return SearchConfig(max_depth=max_depth, targets=tuple(targets.split(",")) if targets else None,
                        state_cap=state_cap, time_cap_s=time_cap_s, prune=not no_prune, guided=not no_guided,
                        seed=ctx.obj["seed"], workers=ctx.obj["workers"])


def _cost(path) -> CostParams:
    return CostParams.load(path) if path else CostParams()


@click.group()
@click.option("--seed", default=0, show_default=True, help="Seed for random bindings.")
@click.option("--workers", default=1, show_default=True, help="Parallel subprogram workers.")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, seed, workers, as_json, verbose):
    """Expression-level optimizer for small tensor programs."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"seed": seed, "workers": workers, "json": as_json}


@main.command()
@click.argument("program", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None, help="Write the optimized graph.")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None,
              help="Write the JSON report.")
@click.option("--no-postprocess", is_flag=True, help="Skip fusion, identity removal and weight folding.")
@click.option("--trials", default=20, show_default=True)
@search_options
@click.pass_context
def optimize(ctx, program, output, report_path, no_postprocess, trials, max_depth, targets, state_cap, time_cap_s,
             no_prune, no_guided, cost_params, explain_cost):
    """Optimize every linear subprogram of PROGRAM and verify the result."""
    g = _load(program)
    cfg = PipelineConfig(_search_cfg(ctx, max_depth, targets, state_cap, time_cap_s, no_prune, no_guided),
                         _cost(cost_params), postprocess=not no_postprocess, verify_trials=trials,
                         seed=ctx.obj["seed"])
    try:
        final, report = run_optimize(g, cfg)
    except VerificationFailed as exc:
        click.echo(f"verification failed: {exc}", err=True)
        sys.exit(EXIT_VERIFY)
    if output:
        save_program(final, output)
    if report_path:
        Path(report_path).write_text(report.to_json() + "\n")
    text = report.text()
    if explain_cost:
        text += "\n" + explain(final, cfg.cost)
    payload = report.to_dict()
    if not output:
        payload["graph"] = graph_to_dict(final)
    _emit(ctx, payload, text)
    if report.exhausted_without_candidate:
        sys.exit(EXIT_BUDGET)


def _pick_node(g, name: Optional[str]):
    nodes = [n for n in g.nodes if not is_nonlinear(n)]
    if name:
        nodes = [n for n in g.nodes if n.output == name]
        if not nodes:
            raise click.ClickException(f"no node produces {name}")
    if not nodes:
        raise click.ClickException("program has no linear node to derive")
    return nodes[0]


@main.command()
@click.argument("program", type=click.Path(exists=True, dir_okay=False))
@click.option("--node", default=None, help="Output tensor of the node to derive (default: first linear node).")
@click.option("--trace", "trace_out", type=click.Path(dir_okay=False), default=None,
              help="Write the best candidate's rule applications as JSON lines.")
@click.option("--replay", "replay_in", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Replay a recorded trace instead of searching.")
@click.option("--top", default=5, show_default=True, help="Candidates to list.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), default=None,
              help="Write the best candidate graph.")
@search_options
@click.pass_context
def derive(ctx, program, node, trace_out, replay_in, top, output, max_depth, targets, state_cap, time_cap_s,
           no_prune, no_guided, cost_params, explain_cost):
    """Derive candidate graphs for one node of PROGRAM."""
    g = _load(program)
    n = _pick_node(g, node)
    e0 = to_expression(n, g)
    params = _cost(cost_params)
    if replay_in:
        apps = read_trace(replay_in)
        try:
            states = replay(e0, apps, check=True)
        except DerivError as exc:
            raise click.ClickException(f"replay failed: {exc}")
        lines = [f"E1: {format_expr(e0)}"]
        for k, (a, st) in enumerate(zip(apps, states[1:]), start=2):
            shown = format_expr(st.expr) if hasattr(st.expr, "traversal") else st.expr.name
            lines.append(f"E{k} [{a.rule}]: {shown}")
        best = Candidate(to_graph(states[-1], n.output), list(apps), source="replay", depth=len(apps))
        best.cost = estimate(best.graph, params)
        payload = {"steps": lines, "candidate": summarize(best)}
        text = "\n".join(lines + [f"graph: {' '.join(x.label() for x in best.graph.nodes)}"])
        if explain_cost:
            text += "\n" + explain(best.graph, params)
        if output:
            save_program(best.graph, output)
        _emit(ctx, payload, text)
        return
    cfg = _search_cfg(ctx, max_depth, targets, state_cap, time_cap_s, no_prune, no_guided)
    cands, stats = run_derive(e0, cfg, output_name=n.output)
    payload = {"node": n.output, "kind": n.kind, "stats": stats.to_dict(), "candidates": []}
    lines = [f"{n.kind}->{n.output}: " + ", ".join(f"{k} {v}" for k, v in stats.to_dict().items())]
    if not cands:
        _emit(ctx, payload, "\n".join(lines + ["no candidate found"]))
        sys.exit(EXIT_BUDGET if stats.budget_exhausted else EXIT_OK)
    ranked = rank(cands, params)
    payload["candidates"] = [summarize(c) for c in ranked]
    for c in ranked[:top]:
        lines.append(f"  {c.cost.total:.3e} s  depth {c.depth:<2} {c.source:<11} "
                     f"{' '.join(x.label() for x in c.graph.nodes)}")
    best = ranked[0]
    if explain_cost:
        lines.append(explain(best.graph, params))
    if trace_out:
        write_trace(best.trace, trace_out)
    if output:
        save_program(best.graph, output)
    _emit(ctx, payload, "\n".join(lines))


@main.command()
@click.option("--program", "program", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--candidate", "candidate", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--trials", default=20, show_default=True)
@click.pass_context
def verify(ctx, program, candidate, trials):
    """Compare two graphs on random integer bindings; exit 1 on any difference."""
    ref, cand = _load(program), _load(candidate)
    failures = verify_graphs(ref, cand, trials, ctx.obj["seed"])
    lines = [f"trial {f['trial']}: output {f['output']} differs at {f['mismatches']} points" for f in failures]
    lines.append(f"{trials} trials, {len(failures)} mismatching outputs")
    _emit(ctx, {"trials": trials, "failures": failures, "equal": not failures}, "\n".join(lines))
    sys.exit(EXIT_MISMATCH if failures else EXIT_OK)


@main.command()
@click.argument("program", type=click.Path(exists=True, dir_okay=False))
@click.option("--node", default=None, help="Only this node (by output tensor).")
@click.option("--emit", type=click.Choice(["loops", "tvm"]), default="loops", show_default=True)
@click.pass_context
def lower(ctx, program, node, emit):
    """Print the loop nest of each node's defining expression."""
    g = _load(program)
    nodes = [n for n in g.nodes if node is None or n.output == node]
    out = {}
    for n in nodes:
        e = to_expression(n, g)
        out[n.output] = emit_tvm(e, n.output) if emit == "tvm" else lower_scope(e, n.output).text()
    _emit(ctx, out, "\n\n".join(f"# {k}\n{v}" for k, v in out.items()))


@main.command("fingerprint")
@click.argument("program", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def fingerprint_cmd(ctx, program):
    """Print the fingerprint of each node's defining expression."""
    g = _load(program)
    out = {n.output: fingerprint(to_expression(n, g)) for n in g.nodes}
    _emit(ctx, out, "\n".join(f"{v}  {k}" for k, v in out.items()))


if __name__ == "__main__":
    main()
