"""Text export of solve results: one CSV row per augmented grid point plus a
JSON summary. Values are written with 17 significant digits, so reloading the
CSV reproduces V* bit-for-bit and the policy can be re-extracted from it."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .errors import ParseError
from .mdp import AmbiguitySpec, Mdp, fmt_float
from .solver import SolveResult, YGrid, extract_policy

CSV_HEADER = ("state", "row", "col", "y", "value", "action")


def result_csv(result: SolveResult) -> str:
    grid = result.mdp.grid
    buf = io.StringIO()
    buf.write(",".join(CSV_HEADER) + "\n")
    nodes = result.ygrid.nodes
    for x in range(result.mdp.n_states):
        cell = grid.cell_of(x) if grid is not None else None
        r, c = ("", "") if cell is None else cell
        for i, y in enumerate(nodes):
            buf.write(
                f"{x},{r},{c},{fmt_float(y)},{fmt_float(result.v_star[x, i])},{int(result.greedy_action[x, i])}\n"
            )
    return buf.getvalue()


def write_result_csv(result: SolveResult, path):
    Path(path).write_text(result_csv(result), encoding="utf-8")


def read_result_csv(path, n_states: int, ygrid: YGrid):
    """Load the value table (S, N) from a result CSV."""
    v = np.full((n_states, ygrid.n), np.nan)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ParseError(f"bad result header {header!r}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            try:
                x = int(row[0])
                y = float(row[3])
                value = float(row[4])
            except (ValueError, IndexError):
                raise ParseError("malformed result row", path, lineno) from None
            i = ygrid.index_of(y)
            if i is None or not 0 <= x < n_states:
                raise ParseError(f"row refers to unknown point (state {x}, y {y})", path, lineno)
            v[x, i] = value
    if np.isnan(v).any():
        raise ParseError("result file does not cover every (state, node) pair", path)
    return v


def load_result(path, mdp: Mdp, amb: AmbiguitySpec, ygrid: YGrid, summary=None) -> SolveResult:
    """Rebuild a :class:`SolveResult` (policy and maximisers) from a CSV."""
    v = read_result_csv(path, mdp.n_states, ygrid)
    act, xi, table = extract_policy(v, mdp, amb, ygrid)
    summary = summary or {}
    return SolveResult(
        v_star=v,
        greedy_action=act,
        xi_star=xi,
        iterations=int(summary.get("iterations", 0)),
        final_residual=float(summary.get("residual", float("nan"))),
        converged=bool(summary.get("converged", True)),
        mdp=mdp,
        amb=amb,
        ygrid=ygrid,
        _table=table,
    )


def summary_dict(result: SolveResult, alpha=None, config=None) -> dict:
    d = {
        "iterations": result.iterations,
        "residual": result.final_residual,
        "converged": result.converged,
        "n_states": result.mdp.n_states,
        "ygrid": [float(y) for y in result.ygrid.nodes],
        "start_state": result.mdp.start_state,
    }
    if alpha is not None:
        d["alpha"] = float(alpha)
        d["value_at_start"] = result.value_at(result.mdp.start_state, alpha)
    if config is not None:
        d["config"] = config
    return d


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
