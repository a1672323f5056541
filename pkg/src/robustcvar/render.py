"""Netpbm output for gridworld results (plain-text P2 / P3)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ValidationError
from .solver import Policy, SolveResult

RED = (255, 0, 0)


def normalise(values) -> np.ndarray:
    """Map to 0..255 by round(255 * (v - min) / (max - min)); flat input -> 0."""
    v = np.asarray(values, dtype=float)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros(v.shape, dtype=np.int64)
    return np.rint(255.0 * (v - lo) / (hi - lo)).astype(np.int64)


def write_pgm(path, pixels):
    """Plain PGM (P2), maxval 255; ``pixels`` is (rows, cols) of 0..255 ints."""
    px = np.asarray(pixels, dtype=np.int64)
    h, w = px.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(str(int(p)) for p in row) for row in px]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def write_ppm(path, rgb):
    """Plain PPM (P3), maxval 255; ``rgb`` is (rows, cols, 3)."""
    px = np.asarray(rgb, dtype=np.int64)
    h, w, _ = px.shape
    lines = ["P3", f"{w} {h}", "255"]
    lines += [" ".join(f"{r} {g} {b}" for r, g, b in row) for row in px]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_pnm(path):
    """Parse a plain P2/P3 file back into ``(magic, array)``; used by tests."""
    tokens = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        tokens += line.split("#", 1)[0].split()
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if magic == "P2":
        return magic, data.reshape(h, w), maxval
    if magic == "P3":
        return magic, data.reshape(h, w, 3), maxval
    raise ValidationError(f"unsupported netpbm type {magic}")


def _require_grid(result: SolveResult):
    grid = result.mdp.grid
    if grid is None:
        raise ValidationError("rendering needs a gridworld MDP")
    return grid


def value_image(result: SolveResult, alpha: float) -> np.ndarray:
    """V*(cell, alpha) on the (rows, cols) layout."""
    grid = _require_grid(result)
    n = grid.rows * grid.cols
    v = np.array([result.value_at(s, alpha) for s in range(n)])
    return v.reshape(grid.rows, grid.cols)


def obstacle_image(grid) -> np.ndarray:
    """Preview: free cells white, obstacles black, start and goal mid-grey."""
    img = np.full((grid.rows, grid.cols), 255, dtype=np.int64)
    for r, c in grid.obstacles:
        img[r, c] = 0
    img[grid.start] = 128
    img[grid.goal] = 128
    return img


def greedy_path(result: SolveResult, alpha: float, max_steps=None) -> list:
    """Cells visited by the policy from the start, always following the most
    likely successor (lowest slot on ties), with the level updated as the
    policy would."""
    mdp = result.mdp
    grid = _require_grid(result)
    pol = Policy(result)
    x, y = mdp.start_state, float(alpha)
    path = [grid.cell_of(x)]
    limit = max_steps or grid.rows * grid.cols
    for _ in range(limit):
        if x == mdp.goal_state:
            break
        a, xi = pol.act(np.array([x]), np.array([y]))
        a = int(a[0])
        slot = int(np.argmax(mdp.prob[x, a]))
        y = float(pol.next_level(np.array([y]), xi, np.array([slot]))[0])
        x = int(mdp.succ[x, a, slot])
        cell = grid.cell_of(x)
        if cell is None:
            break
        path.append(cell)
    return path


def render(result: SolveResult, alpha: float, out_dir):
    """Write value.pgm, path.ppm and path.txt; returns the path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gray = normalise(value_image(result, alpha))
    write_pgm(out / "value.pgm", gray)
    path = greedy_path(result, alpha)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    for r, c in path:
        rgb[r, c] = RED
    write_ppm(out / "path.ppm", rgb)
    (out / "path.txt").write_text("".join(f"{r} {c}\n" for r, c in path), encoding="ascii")
    return path
