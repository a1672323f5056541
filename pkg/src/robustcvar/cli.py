"""Command-line entry point: ``robustcvar <command> [--config FILE] ...``.

Exit codes: 0 success, 2 validation/domain error, 3 solver did not converge,
64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import riskcore
from .errors import DomainError, NumericError, ValidationError
from .mdp import (
    AmbiguitySpec,
    GridSpec,
    build_gridworld,
    load_mdp,
    random_budget_field,
    save_mdp,
)
from .render import obstacle_image, render, write_pgm
from .results import dump_json, load_result, summary_dict, write_result_csv
from .rollout import adversarial_kernel, rollout, sample_kernel, truncation_bound
from .solver import make_ygrid, value_iteration

log = logging.getLogger("robustcvar")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NOT_CONVERGED = 3
EXIT_USAGE = 64

SECTIONS = ("grid", "ambiguity", "alpha", "ygrid", "solver", "rollout", "output_dir", "mdp_file")


@dataclass
class ExperimentConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    ambiguity: dict = field(default_factory=lambda: {"kind": "none"})
    alpha: float = 0.48
    ygrid: dict = field(default_factory=lambda: {"n": 21, "y_min": 1e-4})
    solver: dict = field(default_factory=lambda: {"epsilon": 1e-6, "max_sweeps": 2000})
    rollout: dict = field(default_factory=lambda: {"episodes": 10000, "horizon": 400, "seed": 0, "kernels": 20})
    output_dir: str = "out"
    mdp_file: str | None = None

    @classmethod
    def from_dict(cls, d) -> ExperimentConfig:
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        if "grid" in d:
            cfg.grid = GridSpec.from_dict(d["grid"])
        for key in ("ambiguity", "ygrid", "solver", "rollout"):
            if key in d:
                merged = dict(getattr(cfg, key))
                merged.update(d[key])
                setattr(cfg, key, merged)
        if "alpha" in d:
            cfg.alpha = float(d["alpha"])
        if "output_dir" in d:
            cfg.output_dir = str(d["output_dir"])
        cfg.mdp_file = d.get("mdp_file")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path}: {exc.msg} at line {exc.lineno} column {exc.colno}") from None
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = {
            "grid": self.grid.to_dict(),
            "ambiguity": dict(self.ambiguity),
            "alpha": self.alpha,
            "ygrid": dict(self.ygrid),
            "solver": dict(self.solver),
            "rollout": dict(self.rollout),
            "output_dir": self.output_dir,
        }
        if self.mdp_file is not None:
            d["mdp_file"] = self.mdp_file
        return d

    def validate(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.mdp_file is None:
            self.grid.validate()
        if int(self.rollout.get("episodes", 1)) < 1:
            raise ValidationError("rollout.episodes must be at least 1")

    def apply_seed(self, seed: int):
        """``--seed`` drives obstacles, the budget field and the rollouts."""
        if self.grid.obstacles is None:
            self.grid = GridSpec.from_dict({**self.grid.to_dict(), "seed": seed})
        self.ambiguity["budget_seed"] = seed
        self.rollout["seed"] = seed

    # -- builders

    def build_mdp(self):
        if self.mdp_file is not None:
            return load_mdp(self.mdp_file)
        return build_gridworld(self.grid)

    def build_ambiguity(self, mdp) -> AmbiguitySpec:
        a = dict(self.ambiguity)
        kind = a.get("kind", "none")
        if kind == "rn_decision_dependent":
            k_max = float(a.get("K_max", 2.0))
            if "budget_field" in a:
                field_ = np.asarray(a["budget_field"], dtype=float)
            else:
                field_ = random_budget_field(mdp, k_max, int(a.get("budget_seed", 0)), float(a.get("K_min", 1.0)))
            return AmbiguitySpec(kind, budget_field=field_, K_max=k_max)
        # K_max only describes decision-dependent fields; a stray value must
        # not stretch the y-grid of a fixed-budget problem
        return AmbiguitySpec(kind, K=float(a.get("K", 1.0)))

    def build_ygrid(self, amb: AmbiguitySpec):
        y_max = self.ygrid.get("y_max")
        y_max = amb.y_max() if y_max is None else float(y_max)
        return make_ygrid(int(self.ygrid.get("n", 21)), float(self.ygrid.get("y_min", 1e-4)), y_max)


# --------------------------------------------------------------------------
# commands


def cmd_build_env(cfg: ExperimentConfig, out: Path, threads=1):
    mdp = cfg.build_mdp()
    out.mkdir(parents=True, exist_ok=True)
    save_mdp(mdp, out / "mdp.json")
    if mdp.grid is not None:
        write_pgm(out / "obstacles.pgm", obstacle_image(mdp.grid))
    print(f"wrote {out / 'mdp.json'} ({mdp.n_states} states, {mdp.n_actions} actions)")
    return EXIT_OK


def cmd_reduce(alpha, budget, kind):
    if kind == "rn":
        a2 = riskcore.rn_reduction(alpha, budget)
        print(f"alpha' = {a2:.12g}")
        print("solver: CVaR at alpha' -- run NCVaR value iteration with a constant budget (kind rn_fixed)")
    else:
        a2 = riskcore.kl_reduction(alpha, budget)
        print(f"alpha' = {a2:.12g}")
        print("solver: EVaR at alpha' -- not provided here; use an external EVaR value-iteration solver")
        print(
            "warning: alpha' = alpha / kappa**(1/alpha); a value of 0.03 quoted elsewhere for "
            "alpha=0.48, kappa=2 does not follow from this formula",
            file=sys.stderr,
        )
    return EXIT_OK


def _solve(cfg: ExperimentConfig, threads=1):
    mdp = cfg.build_mdp()
    amb = cfg.build_ambiguity(mdp)
    if not amb.solvable:
        raise ValidationError("kl_fixed is an EVaR problem; use 'reduce --kind kl' for its confidence level")
    ygrid = cfg.build_ygrid(amb)
    result = value_iteration(
        mdp,
        amb,
        ygrid,
        epsilon=float(cfg.solver.get("epsilon", 1e-6)),
        max_sweeps=int(cfg.solver.get("max_sweeps", 2000)),
        threads=threads,
    )
    return result


def cmd_solve(cfg: ExperimentConfig, out: Path, threads=1):
    t0 = time.perf_counter()
    result = _solve(cfg, threads)
    wall = time.perf_counter() - t0
    out.mkdir(parents=True, exist_ok=True)
    write_result_csv(result, out / "result.csv")
    echoed = cfg.to_dict()
    echoed.pop("output_dir")  # where files go is not part of the result
    summary = summary_dict(result, cfg.alpha, echoed)
    (out / "summary.json").write_text(dump_json(summary), encoding="utf-8")
    (out / "timing.json").write_text(dump_json({"wall_time_s": wall}), encoding="utf-8")
    print(f"iterations {result.iterations}  residual {result.final_residual:.3e}  converged {result.converged}")
    print(f"V*(x0, {cfg.alpha}) = {summary['value_at_start']:.10g}")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def _load_solved(cfg: ExperimentConfig, out: Path):
    mdp = cfg.build_mdp()
    amb = cfg.build_ambiguity(mdp)
    ygrid = cfg.build_ygrid(amb)
    summary_path = out / "summary.json"
    summary = json.loads(summary_path.read_text(encoding="utf-8")) if summary_path.exists() else None
    csv_path = out / "result.csv"
    if not csv_path.exists():
        raise ValidationError(f"{csv_path} not found; run 'solve' first")
    return load_result(csv_path, mdp, amb, ygrid, summary)


def cmd_render(cfg: ExperimentConfig, out: Path, alpha=None, threads=1):
    result = _load_solved(cfg, out)
    alpha = cfg.alpha if alpha is None else alpha
    path = render(result, alpha, out)
    print(f"wrote value.pgm, path.ppm, path.txt ({len(path)} cells, ends at {path[-1]})")
    return EXIT_OK


def kernel_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence((seed, k)).generate_state(1)[0])


def cmd_evaluate(cfg: ExperimentConfig, out: Path, threads=1):
    r = cfg.rollout
    episodes = int(r.get("episodes", 10000))
    horizon = int(r.get("horizon", 400))
    seed = int(r.get("seed", 0))
    n_kernels = int(r.get("kernels", 20))
    if episodes < 1:
        raise ValidationError("rollout.episodes must be at least 1")
    result = _load_solved(cfg, out)
    mdp, amb = result.mdp, result.amb
    alpha = cfg.alpha
    v0 = result.value_at(mdp.start_state, alpha)
    common = dict(mdp=mdp, policy=result, alpha_start=alpha, horizon=horizon, n_episodes=episodes, seed=seed)
    nominal = rollout(np.array(mdp.prob), descriptor="nominal", **common)
    sampled = []
    for k in range(n_kernels):
        ks = kernel_seed(seed, k)
        sampled.append(rollout(sample_kernel(mdp, amb, ks), descriptor=f"sampled({ks})", **common))
    adversarial = rollout(adversarial_kernel(result), descriptor="adversarial", **common)

    bound_rows = []
    for rep in sampled:
        limit = v0 + 3.0 * rep.cvar_standard_error
        bound_rows.append(
            {"kernel": rep.kernel_descriptor, "empirical_cvar": rep.empirical_cvar_alpha, "limit": limit,
             "ok": bool(rep.empirical_cvar_alpha <= limit)}
        )
    margin = 3.0 * math.hypot(adversarial.cvar_standard_error, nominal.cvar_standard_error)
    dominance_ok = adversarial.empirical_cvar_alpha >= nominal.empirical_cvar_alpha - margin
    doc = {
        "alpha": alpha,
        "value_at_start": v0,
        "truncation_bound": truncation_bound(mdp, horizon),
        "nominal": nominal.to_dict(),
        "sampled": [rep.to_dict() for rep in sampled],
        "adversarial": adversarial.to_dict(),
        "upper_bound": {"ok": all(row["ok"] for row in bound_rows), "kernels": bound_rows},
        "adversary_dominance": {"ok": bool(dominance_ok), "margin": margin},
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "rollout.json").write_text(dump_json(doc), encoding="utf-8")
    nominal.write_samples(out / "samples_nominal.txt")
    adversarial.write_samples(out / "samples_adversarial.txt")
    print(f"V*(x0, {alpha}) = {v0:.6f}")
    print(f"nominal      mean {nominal.empirical_mean:.6f}  CVaR {nominal.empirical_cvar_alpha:.6f}")
    print(f"adversarial  mean {adversarial.empirical_mean:.6f}  CVaR {adversarial.empirical_cvar_alpha:.6f}")
    worst = max(bound_rows, key=lambda row: row["empirical_cvar"] - row["limit"]) if bound_rows else None
    if worst is not None:
        print(f"upper bound over {len(bound_rows)} sampled kernels: {'PASS' if doc['upper_bound']['ok'] else 'FAIL'}"
              f" (worst CVaR {worst['empirical_cvar']:.6f} vs limit {worst['limit']:.6f})")
    print(f"adversary dominance: {'PASS' if dominance_ok else 'FAIL'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--output-dir", type=Path, help="override output_dir from the config")
    common.add_argument("--seed", type=int, help="master seed: obstacles, budget field, rollouts")
    common.add_argument("--threads", type=int, default=1, help="worker threads for solver sweeps")

    parser = _Parser(prog="robustcvar", description="Robust CVaR / NCVaR value iteration on gridworlds")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("build-env", parents=[common], help="build the gridworld MDP and write it as JSON")
    p = sub.add_parser("reduce", parents=[common], help="confidence level of the equivalent risk problem")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--budget", type=float, required=True, help="K for rn, kappa (K = ln kappa) for kl")
    p.add_argument("--kind", choices=("rn", "kl"), default="rn")
    sub.add_parser("solve", parents=[common], help="run NCVaR value iteration")
    p = sub.add_parser("render", parents=[common], help="value heatmap (PGM) and greedy path (PPM, text)")
    p.add_argument("--alpha", type=float, default=None, help="level of the heatmap (default: config alpha)")
    sub.add_parser("evaluate", parents=[common], help="Monte-Carlo rollouts of the solved policy")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.apply_seed(args.seed)
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "reduce":
            return cmd_reduce(args.alpha, args.budget, args.kind)
        cfg = _config(args)
        out = Path(args.output_dir) if args.output_dir else Path(cfg.output_dir)
        if args.command == "build-env":
            return cmd_build_env(cfg, out, args.threads)
        if args.command == "solve":
            return cmd_solve(cfg, out, args.threads)
        if args.command == "render":
            return cmd_render(cfg, out, args.alpha, args.threads)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out, args.threads)
    except (ValidationError, DomainError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    parser.error(f"unknown command {args.command}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
