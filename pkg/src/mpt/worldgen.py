"""2-D occupancy worlds: random forests, perfect mazes, collision queries, PGM I/O.

Coordinates are metric with the origin at the top-left corner of pixel (0, 0);
x grows with the column index and y with the row index. Pixel (r, c) covers
``[c*res, (c+1)*res) x [r*res, (r+1)*res)``.
"""
import json
import math
import re
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

DEFAULT_RESOLUTION = 0.05

CIRCLE_RADIUS_M = (0.2, 0.5)
SQUARE_SIDE_M = (0.4, 1.0)


class GenerationError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


class MapFormatError(ValueError):
    pass


@dataclass
class Costmap:
    occupancy: np.ndarray  # (H, W) bool, True = obstacle
    resolution: float = DEFAULT_RESOLUTION
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.occupancy = np.ascontiguousarray(self.occupancy, dtype=bool)
        if self.occupancy.ndim != 2 or 0 in self.occupancy.shape:
            raise ValueError(f"bad occupancy shape {self.occupancy.shape}")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")

    @property
    def height(self) -> int:
        return self.occupancy.shape[0]

    @property
    def width(self) -> int:
        return self.occupancy.shape[1]

    @property
    def extent_m(self) -> Tuple[float, float]:
        return self.width * self.resolution, self.height * self.resolution

    @property
    def free_fraction(self) -> float:
        return 1.0 - float(self.occupancy.mean())

    def free_area_m2(self) -> float:
        return float((~self.occupancy).sum()) * self.resolution ** 2

    def to_pixel(self, pos) -> Tuple[int, int]:
        """(row, col) of the pixel containing a metric position."""
        return int(math.floor(pos[1] / self.resolution)), int(math.floor(pos[0] / self.resolution))

    def in_bounds(self, pos) -> bool:
        r, c = self.to_pixel(pos)
        return 0 <= r < self.height and 0 <= c < self.width

    def values(self) -> np.ndarray:
        """Network channel-0 encoding: free = 1.0, obstacle = 0.0."""
        return (~self.occupancy).astype(np.float32)

    def metadata(self) -> dict:
        return {"kind": self.provenance.get("kind", "external"),
                "seed": self.provenance.get("seed"),
                "spec": self.provenance.get("spec", {}),
                "resolution": self.resolution,
                "width_px": self.width, "height_px": self.height}


@dataclass
class ObstacleSpec:
    kind: str  # "circle" | "square"
    center: Tuple[float, float]
    size: float  # radius for circles, side for squares
    orientation: float = 0.0

    def __post_init__(self):
        if self.kind not in ("circle", "square"):
            raise ValueError(f"unknown obstacle kind {self.kind!r}")
        if self.size <= 0:
            raise ValueError("obstacle size must be positive")


@dataclass
class MazeSpec:
    rows: int
    cols: int
    cell_size_px: int = 40
    wall_px: int = 10

    def __post_init__(self):
        if self.rows * self.cols < 2 or self.rows < 1 or self.cols < 1:
            raise ValueError("maze needs at least two cells")
        if self.wall_px < 1 or self.cell_size_px <= self.wall_px:
            raise ValueError("cell size must exceed wall thickness")

    @property
    def extent_px(self) -> Tuple[int, int]:
        return self.rows * self.cell_size_px + self.wall_px, self.cols * self.cell_size_px + self.wall_px


# --- collision ------------------------------------------------------------

def is_state_free(cmap: Costmap, pos) -> bool:
    x, y = float(pos[0]), float(pos[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        return False
    r, c = cmap.to_pixel((x, y))
    if r < 0 or c < 0 or r >= cmap.height or c >= cmap.width:
        return False
    return not cmap.occupancy[r, c]


def points_free(cmap: Costmap, pts: np.ndarray) -> np.ndarray:
    """Vectorized is_state_free over an (n, 2) array of positions."""
    cols = np.floor(pts[:, 0] / cmap.resolution).astype(np.int64)
    rows = np.floor(pts[:, 1] / cmap.resolution).astype(np.int64)
    inside = (rows >= 0) & (cols >= 0) & (rows < cmap.height) & (cols < cmap.width)
    ok = inside.copy()
    ok[inside] = ~cmap.occupancy[rows[inside], cols[inside]]
    return ok


def is_motion_free(cmap: Costmap, a, b, step_px: float = 1.0) -> bool:
    """Sample the segment a-b at spacing <= step_px pixels, endpoints included."""
    ax, ay, bx, by = float(a[0]), float(a[1]), float(b[0]), float(b[1])
    dist_px = math.hypot(bx - ax, by - ay) / cmap.resolution
    n = int(math.ceil(dist_px / step_px)) + 1
    if n == 1:
        return is_state_free(cmap, (ax, ay))
    t = np.linspace(0.0, 1.0, n)
    pts = np.empty((n, 2))
    pts[:, 0] = ax + t * (bx - ax)
    pts[:, 1] = ay + t * (by - ay)
    return bool(points_free(cmap, pts).all())


# --- generators -----------------------------------------------------------

def _pixel_centers(h: int, w: int, res: float):
    ys = (np.arange(h) + 0.5) * res
    xs = (np.arange(w) + 0.5) * res
    return np.meshgrid(xs, ys)


def rasterize(occ: np.ndarray, obs: ObstacleSpec, res: float) -> None:
    """Mark pixels whose centre lies inside the obstacle (in place)."""
    h, w = occ.shape
    cx, cy = obs.center
    reach = obs.size if obs.kind == "circle" else obs.size * math.sqrt(0.5)
    r0 = max(0, int(math.floor((cy - reach) / res)))
    r1 = min(h, int(math.ceil((cy + reach) / res)) + 1)
    c0 = max(0, int(math.floor((cx - reach) / res)))
    c1 = min(w, int(math.ceil((cx + reach) / res)) + 1)
    if r0 >= r1 or c0 >= c1:
        return
    ys = ((np.arange(r0, r1) + 0.5) * res)[:, None] - cy
    xs = ((np.arange(c0, c1) + 0.5) * res)[None, :] - cx
    if obs.kind == "circle":
        inside = xs * xs + ys * ys <= obs.size ** 2
    else:
        ct, st = math.cos(obs.orientation), math.sin(obs.orientation)
        u = xs * ct + ys * st
        v = -xs * st + ys * ct
        half = obs.size / 2
        inside = (np.abs(u) <= half) & (np.abs(v) <= half)
    occ[r0:r1, c0:c1] |= inside


def sample_obstacles(width_px: int, height_px: int, n: int, rng: np.random.Generator,
                     res: float = DEFAULT_RESOLUTION) -> List[ObstacleSpec]:
    wm, hm = width_px * res, height_px * res
    out = []
    for _ in range(n):
        center = (float(rng.uniform(0, wm)), float(rng.uniform(0, hm)))
        if rng.random() < 0.5:
            out.append(ObstacleSpec("circle", center, float(rng.uniform(*CIRCLE_RADIUS_M))))
        else:
            out.append(ObstacleSpec("square", center, float(rng.uniform(*SQUARE_SIDE_M)),
                                    float(rng.uniform(0, math.pi / 2))))
    return out


def gen_forest(width_px: int, height_px: int, n_obstacles: int, seed: int,
               resolution: float = DEFAULT_RESOLUTION) -> Costmap:
    """Random Forest world: circles and rotated squares, fair coin per obstacle."""
    if n_obstacles < 0:
        raise ValueError("n_obstacles must be >= 0")
    if width_px <= 0 or height_px <= 0:
        raise GenerationError("map extents must be positive")
    if n_obstacles and min(width_px, height_px) * resolution < SQUARE_SIDE_M[1]:
        raise GenerationError("map too small to place obstacles")
    rng = np.random.default_rng(seed)
    obstacles = sample_obstacles(width_px, height_px, n_obstacles, rng, resolution)
    occ = np.zeros((height_px, width_px), dtype=bool)
    for ob in obstacles:
        rasterize(occ, ob, resolution)
    if occ.all():
        raise GenerationError("forest left no free space")
    spec = {"width_px": width_px, "height_px": height_px, "n_obstacles": n_obstacles,
            "obstacles": [[o.kind, o.center[0], o.center[1], o.size, o.orientation] for o in obstacles]}
    return Costmap(occ, resolution, {"kind": "forest", "seed": seed, "spec": spec})


def carve_passages(rows: int, cols: int, rng: np.random.Generator) -> List[Tuple[Tuple[int, int], Tuple[int, int]]]:
    """Randomized depth-first search; returns the spanning-tree edges in carve order."""
    visited = np.zeros((rows, cols), dtype=bool)
    start = (int(rng.integers(rows)), int(rng.integers(cols)))
    visited[start] = True
    stack = [start]
    edges = []
    while stack:
        r, c = stack[-1]
        nbrs = [(r + dr, c + dc) for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
                if 0 <= r + dr < rows and 0 <= c + dc < cols and not visited[r + dr, c + dc]]
        if not nbrs:
            stack.pop()
            continue
        nxt = nbrs[int(rng.integers(len(nbrs)))]
        visited[nxt] = True
        edges.append(((r, c), nxt))
        stack.append(nxt)
    return edges


def gen_maze(rows: int, cols: int, cell_size_px: int = 40, wall_px: int = 10, seed: int = 0,
             height_px: Optional[int] = None, width_px: Optional[int] = None,
             resolution: float = DEFAULT_RESOLUTION) -> Costmap:
    """Perfect maze on a rows x cols cell grid.

    Wall lines sit at multiples of ``cell_size_px``; any map area beyond the
    maze extent (when ``height_px``/``width_px`` are larger) is obstacle.
    """
    if rows < 2 or cols < 2:
        raise GenerationError("maze needs rows, cols >= 2")
    spec = MazeSpec(rows, cols, cell_size_px, wall_px)
    mh, mw = spec.extent_px
    height_px = mh if height_px is None else height_px
    width_px = mw if width_px is None else width_px
    if mh > height_px or mw > width_px:
        raise GenerationError(f"maze extent {mh}x{mw} does not fit {height_px}x{width_px}")
    rng = np.random.default_rng(seed)
    occ = np.ones((height_px, width_px), dtype=bool)
    cs, wp = cell_size_px, wall_px
    for r in range(rows):
        for c in range(cols):
            occ[r * cs + wp:(r + 1) * cs, c * cs + wp:(c + 1) * cs] = False
    edges = carve_passages(rows, cols, rng)
    for (r0, c0), (r1, c1) in edges:
        r, c = min(r0, r1), min(c0, c1)
        if r0 == r1:  # horizontal neighbours: open the vertical wall between them
            occ[r * cs + wp:(r + 1) * cs, (c + 1) * cs:(c + 1) * cs + wp] = False
        else:
            occ[(r + 1) * cs:(r + 1) * cs + wp, c * cs + wp:(c + 1) * cs] = False
    meta = {"rows": rows, "cols": cols, "cell_size_px": cs, "wall_px": wp,
            "height_px": height_px, "width_px": width_px,
            "passages": [[list(a), list(b)] for a, b in edges]}
    return Costmap(occ, resolution, {"kind": "maze", "seed": seed, "spec": meta})


def maze_layout(width_px: int, height_px: int, pitch_px: int = 40, wall_px: int = 10) -> dict:
    """Cell grid for a map size, pitch kept close to ``pitch_px``."""
    cols = max(2, round((width_px - wall_px) / pitch_px))
    rows = max(2, round((height_px - wall_px) / pitch_px))
    cell = min((width_px - wall_px) // cols, (height_px - wall_px) // rows)
    return {"rows": rows, "cols": cols, "cell_size_px": cell, "wall_px": wall_px}


def gen_maze_for_size(width_px: int, height_px: int, seed: int, **kw) -> Costmap:
    lay = maze_layout(width_px, height_px, **kw)
    return gen_maze(lay["rows"], lay["cols"], lay["cell_size_px"], lay["wall_px"], seed,
                    height_px=height_px, width_px=width_px)


def sample_problem(cmap: Costmap, rng: np.random.Generator, min_separation_frac: float = 0.2,
                   max_attempts: int = 10000):
    """Uniform random free start/goal pair at least a fraction of the diagonal apart."""
    wm, hm = cmap.extent_m
    min_sep = min_separation_frac * math.hypot(wm, hm)
    for _ in range(max_attempts):
        s = (float(rng.uniform(0, wm)), float(rng.uniform(0, hm)))
        g = (float(rng.uniform(0, wm)), float(rng.uniform(0, hm)))
        if math.hypot(g[0] - s[0], g[1] - s[1]) < min_sep:
            continue
        if is_state_free(cmap, s) and is_state_free(cmap, g):
            return s, g
    raise SamplingError(f"no valid start/goal pair after {max_attempts} attempts")


# --- PGM I/O --------------------------------------------------------------

_RES_RE = re.compile(rb"#\s*resolution\s+([0-9.eE+-]+)")


def save_pgm(cmap: Costmap, path) -> None:
    img = np.where(cmap.occupancy, 0, 255).astype(np.uint8)
    header = f"P5\n# resolution {cmap.resolution!r}\n{cmap.width} {cmap.height}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(img.tobytes())


def write_pgm_bytes(path, img: np.ndarray) -> None:
    """Write an 8-bit grayscale array as binary PGM."""
    img = np.asarray(img, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm_bytes(path) -> Tuple[np.ndarray, List[bytes]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != b"P5":
        raise MapFormatError(f"{path}: not a binary PGM (magic {raw[:2]!r})")
    pos = 2
    tokens: List[bytes] = []
    comments: List[bytes] = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise MapFormatError(f"{path}: truncated header")
        if raw[pos:pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            end = len(raw) if end < 0 else end
            comments.append(raw[pos:end])
            pos = end
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise MapFormatError(f"{path}: malformed header {tokens!r}") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise MapFormatError(f"{path}: unsupported header w={w} h={h} maxval={maxval}")
    payload = raw[pos:pos + w * h]
    if len(payload) < w * h:
        raise MapFormatError(f"{path}: truncated payload ({len(payload)} of {w * h} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w), comments


def load_pgm(path) -> Costmap:
    """P5/255 map; < 128 is obstacle. Resolution from a ``# resolution`` comment."""
    img, comments = read_pgm_bytes(path)
    res, notes = None, {}
    for c in comments:
        m = _RES_RE.match(c)
        if m:
            res = float(m.group(1))
    if res is None:
        res = DEFAULT_RESOLUTION
        notes["resolution_note"] = "no resolution comment; default 0.05 m/px assumed"
    prov = {"kind": "external", "source": str(path), **notes}
    return Costmap(img < 128, res, prov)


def save_metadata(cmap: Costmap, path) -> None:
    with open(path, "w") as fh:
        json.dump(cmap.metadata(), fh, indent=1, sort_keys=True)
