"""Synthetic multi-agent traffic scenes with occupancy / flow ground truth.

Coordinates: metres in the ego frame at t=0 (ego at the origin, heading 0).
Grid cell (row i, col j) has its centre at
``x = (j + 0.5 - W/2) * res``, ``y = (i + 0.5 - H/2) * res``.
Flow vectors are in grid-cell units ordered (dx, dy) = (col, row).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from enum import IntEnum
from typing import Sequence

import numpy as np


class InvalidConfigError(ValueError):
    pass


class AgentType(IntEnum):
    VEHICLE = 0
    PEDESTRIAN = 1
    CYCLIST = 2


# length, width (m), max speed (m/s)
_TYPE_GEOMETRY = {
    AgentType.VEHICLE: (4.5, 2.0, 6.0),
    AgentType.PEDESTRIAN: (0.8, 0.8, 1.5),
    AgentType.CYCLIST: (1.8, 0.8, 4.0),
}

STATE_DIM = 7
_PLACEMENT_MARGIN = 2.5  # m, agent centres at t=0 keep this far from the grid edge  # x, y, vx, vy, heading, length, width


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@dataclass
class AgentState:
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0
    heading: float = 0.0
    length: float = 4.5
    width: float = 2.0
    agent_type: AgentType = AgentType.VEHICLE
    valid: bool = True

    def __post_init__(self):
        self.heading = float(wrap_angle(self.heading))
        if self.valid and (self.length <= 0 or self.width <= 0):
            raise ValueError("valid agent needs positive length and width")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.vx, self.vy, self.heading, self.length, self.width])

    @classmethod
    def from_array(cls, row, agent_type=AgentType.VEHICLE, valid=True) -> "AgentState":
        x, y, vx, vy, h, length, width = (float(v) for v in row)
        return cls(x, y, vx, vy, h, length, width, AgentType(int(agent_type)), bool(valid))


@dataclass(frozen=True)
class GridConfig:
    size: int = 64
    resolution: float = 0.5

    def __post_init__(self):
        if self.resolution <= 0:
            raise InvalidConfigError("grid resolution must be positive")

    @property
    def extent(self) -> float:
        return self.size * self.resolution

    def to_cells(self, xy):
        """Metric ego-frame coordinates -> continuous (col, row) cell coordinates."""
        xy = np.asarray(xy, dtype=np.float64)
        return xy / self.resolution + self.size / 2 - 0.5


@dataclass(frozen=True)
class SceneConfig:
    num_agents: int = 12
    min_agents: int = 6
    grid_size: int = 64
    resolution: float = 0.5
    history: int = 5
    horizon: int = 4
    dt: float = 0.5
    map_segments: int = 16
    segment_points: int = 8

    @property
    def grid(self) -> GridConfig:
        return GridConfig(self.grid_size, self.resolution)

    def validate(self):
        if not 2 <= self.num_agents <= 32:
            raise InvalidConfigError(f"num_agents must lie in [2, 32], got {self.num_agents}")
        if not 1 <= self.min_agents <= self.num_agents:
            raise InvalidConfigError("min_agents must lie in [1, num_agents]")
        if self.grid_size not in (32, 64, 128):
            raise InvalidConfigError(f"grid_size must be one of 32, 64, 128, got {self.grid_size}")
        if self.history < 2 or self.horizon < 1:
            raise InvalidConfigError("need history >= 2 and horizon >= 1")
        if self.resolution <= 0 or self.dt <= 0:
            raise InvalidConfigError("resolution and dt must be positive")
        # Footprints (with clearance) of a worst-case all-vehicle scene must fit.
        length, width, _ = _TYPE_GEOMETRY[AgentType.VEHICLE]
        inner = (self.grid.extent - 2 * _PLACEMENT_MARGIN) ** 2
        if self.grid.extent <= 2 * _PLACEMENT_MARGIN or self.num_agents * (length + 1) * (width + 1) > 0.6 * inner:
            raise InvalidConfigError(
                f"{self.num_agents} agents cannot fit on a {self.grid.extent:.1f} m grid"
            )


@dataclass
class SceneSample:
    agent_states: np.ndarray        # [N_A, T_h+1, 7] float32
    agent_types: np.ndarray         # [N_A] uint8
    agent_valid: np.ndarray         # [N_A, T_h+1] uint8
    map_polylines: np.ndarray       # [N_M, P, 2] float32
    map_mask: np.ndarray            # [N_M] uint8
    hist_occupancy: np.ndarray      # [T_h+1, H, W] float32
    hist_backward_flow: np.ndarray  # [T_h, H, W, 2] float32
    map_raster: np.ndarray          # [H, W, 3] float32
    gt_observed: np.ndarray         # [T, H, W] uint8
    gt_occluded: np.ndarray         # [T, H, W] uint8
    gt_flow: np.ndarray             # [T, H, W, 2] float32
    ego_index: np.ndarray = field(default_factory=lambda: np.array(0, dtype=np.uint8))

    @property
    def grid_size(self) -> int:
        return self.hist_occupancy.shape[-1]

    @property
    def history(self) -> int:
        return self.hist_occupancy.shape[0] - 1

    @property
    def horizon(self) -> int:
        return self.gt_observed.shape[0]

    def agents_at(self, step: int) -> list[AgentState]:
        return [
            AgentState.from_array(self.agent_states[i, step], self.agent_types[i], self.agent_valid[i, step])
            for i in range(self.agent_states.shape[0])
        ]

    def equals(self, other: "SceneSample") -> bool:
        return all(
            getattr(self, f.name).dtype == getattr(other, f.name).dtype
            and np.array_equal(getattr(self, f.name), getattr(other, f.name))
            for f in fields(self)
        )


FIELD_NAMES = tuple(f.name for f in fields(SceneSample))


# ---------------------------------------------------------------------------
# rasterisation


def _corners(state) -> np.ndarray:
    x, y, _, _, h, length, width = state[:7]
    c, s = math.cos(h), math.sin(h)
    half = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]]) * [length / 2, width / 2]
    rot = np.array([[c, -s], [s, c]])
    return half @ rot.T + [x, y]


def _clip(poly, a, b, c):
    """Clip convex polygons [N, V, 2] to the half-plane a*x + b*y <= c.

    Output has 2V vertices; slots without a vertex repeat the previous one,
    which leaves the shoelace area unchanged.
    """
    c = np.asarray(c, dtype=np.float64).reshape(-1, 1)
    nxt = np.roll(poly, -1, axis=1)
    d0 = a * poly[..., 0] + b * poly[..., 1] - c
    d1 = a * nxt[..., 0] + b * nxt[..., 1] - c
    in0, in1 = d0 <= 0, d1 <= 0
    denom = np.where(d0 == d1, 1.0, d0 - d1)
    cross = poly + (d0 / denom)[..., None] * (nxt - poly)
    first = np.where(in0[..., None], poly, cross)
    ok_first = in0 | in1
    ok_second = in0 & ~in1
    pts = np.stack([first, cross], axis=2).reshape(poly.shape[0], -1, 2)
    ok = np.stack([ok_first, ok_second], axis=2).reshape(poly.shape[0], -1)
    # forward-fill empty slots (cyclically) from the nearest preceding vertex
    idx = np.where(ok, np.arange(ok.shape[1]), -1)
    idx = np.maximum.accumulate(idx, axis=1)
    last = idx[:, -1:]
    idx = np.where(idx < 0, last, idx)
    out = np.take_along_axis(pts, np.maximum(idx, 0)[..., None], axis=1)
    out[~ok.any(axis=1)] = 0.0
    return out


def _shoelace(poly):
    x, y = poly[..., 0], poly[..., 1]
    return 0.5 * np.abs(np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1))


def _agent_coverage(state, grid: GridConfig):
    """Exact covered fraction of each cell in the box's bounding window.

    Returns (row0, col0, block) with block[i, j] the covered fraction of cell
    (row0 + i, col0 + j), or None when the box misses the grid.
    """
    n = grid.size
    corners = grid.to_cells(_corners(state))  # continuous (col, row), cell centres at integers
    lo = np.floor(corners.min(axis=0) + 0.5).astype(int)
    hi = np.ceil(corners.max(axis=0) + 0.5).astype(int)
    lo, hi = np.clip(lo, 0, n), np.clip(hi, 0, n)
    if np.any(hi <= lo):
        return None
    c0, r0 = lo
    c1, r1 = hi
    rows, cols = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
    cx, cy = cols.ravel().astype(float), rows.ravel().astype(float)
    poly = np.broadcast_to(corners, (cx.size, 4, 2)).copy()
    poly = _clip(poly, 1.0, 0.0, cx + 0.5)
    poly = _clip(poly, -1.0, 0.0, -(cx - 0.5))
    poly = _clip(poly, 0.0, 1.0, cy + 0.5)
    poly = _clip(poly, 0.0, -1.0, -(cy - 0.5))
    block = np.clip(_shoelace(poly), 0.0, 1.0).reshape(rows.shape)
    return r0, c0, block


def _coverage_stack(states: np.ndarray, grid: GridConfig) -> np.ndarray:
    """Per-agent coverage [N, H, W] for state rows [N, 7]."""
    out = np.zeros((len(states), grid.size, grid.size))
    for i, st in enumerate(states):
        hit = _agent_coverage(st, grid)
        if hit is not None:
            r0, c0, block = hit
            out[i, r0:r0 + block.shape[0], c0:c0 + block.shape[1]] = block
    return out


def _union_coverage(states: np.ndarray, grid: GridConfig) -> np.ndarray:
    """Summed per-agent coverage clipped to [0, 1]."""
    return np.clip(_coverage_stack(states, grid).sum(axis=0), 0.0, 1.0)


def rasterize_occupancy(agents: Sequence[AgentState], grid: GridConfig) -> np.ndarray:
    states = np.array([a.as_array() for a in agents if a.valid]).reshape(-1, STATE_DIM)
    return _union_coverage(states, grid)


# ---------------------------------------------------------------------------
# occlusion


def _segment_hits_box(p0, p1, state) -> bool:
    # Liang-Barsky clip of the segment in the box frame.
    x, y, _, _, h, length, width = state[:7]
    c, s = math.cos(h), math.sin(h)

    def local(p):
        dx, dy = p[0] - x, p[1] - y
        return np.array([dx * c + dy * s, -dx * s + dy * c])

    a, b = local(p0), local(p1)
    d = b - a
    t0, t1 = 0.0, 1.0
    for axis, half in ((0, length / 2), (1, width / 2)):
        for p, q in ((-d[axis], a[axis] + half), (d[axis], half - a[axis])):
            if p == 0:
                if q < 0:
                    return False
                continue
            r = q / p
            if p < 0:
                t0 = max(t0, r)
            else:
                t1 = min(t1, r)
            if t0 > t1:
                return False
    return True


def compute_occlusion(agents: Sequence[AgentState], ego_index: int) -> np.ndarray:
    states = [a.as_array() for a in agents]
    return _occlusion_from_states(np.array(states).reshape(-1, STATE_DIM),
                                  np.array([a.valid for a in agents], dtype=bool), ego_index)


def _occlusion_from_states(states, valid, ego_index) -> np.ndarray:
    n = len(states)
    if n < 1:
        raise ValueError("need at least one agent")
    occluded = np.zeros(n, dtype=bool)
    ego = states[ego_index, :2]
    for i in range(n):
        if i == ego_index or not valid[i]:
            continue
        for j in range(n):
            if j in (i, ego_index) or not valid[j]:
                continue
            if _segment_hits_box(ego, states[i, :2], states[j]):
                occluded[i] = True
                break
    return occluded


# ---------------------------------------------------------------------------
# flow


def _backward_flow(cur: np.ndarray, prev: np.ndarray, valid: np.ndarray, grid: GridConfig, cov=None):
    """Per-cell backward flow at time t plus the coverage it was computed from.

    Each cell takes the rigid motion of the agent covering most of it; the cell
    centre is mapped through that agent's pose change t -> t-1.
    """
    cov = _coverage_stack(cur, grid) if cov is None else cov.copy()
    cov[~valid] = 0.0
    n = grid.size
    flow = np.zeros((n, n, 2))
    if not valid.any():
        return flow, cov
    owner = cov.argmax(axis=0)
    occupied = cov.max(axis=0) > 0
    centres = (np.arange(n) + 0.5 - n / 2) * grid.resolution
    px, py = np.meshgrid(centres, centres)
    for a in np.unique(owner[occupied]):
        m = occupied & (owner == a)
        dh = prev[a, 4] - cur[a, 4]
        c, s = math.cos(dh), math.sin(dh)
        rx, ry = px[m] - cur[a, 0], py[m] - cur[a, 1]
        qx = prev[a, 0] + c * rx - s * ry
        qy = prev[a, 1] + s * rx + c * ry
        flow[m, 0] = (qx - px[m]) / grid.resolution
        flow[m, 1] = (qy - py[m]) / grid.resolution
    return flow, cov


# ---------------------------------------------------------------------------
# map


def _road_lanes(rng, extent):
    """Lane centrelines (list of [P, 2] arrays) and road boundary lines."""
    half = extent / 2
    lanes, bounds = [], []
    roads = [(0.0, 0.0)]  # (angle, lateral offset) of the ego road
    roads.append((rng.uniform(np.pi / 4, 3 * np.pi / 4), rng.uniform(-half / 2, half / 2)))
    length = extent * 1.5
    s = np.arange(-length / 2, length / 2 + 1e-9, 2.0)
    for ang, off in roads:
        d = np.array([math.cos(ang), math.sin(ang)])
        nrm = np.array([-d[1], d[0]])
        centre = s[:, None] * d + off * nrm
        for side in (-1.0, 1.0):
            lane = centre + side * 1.75 * nrm
            lanes.append(lane if side > 0 else lane[::-1])
            bounds.append(centre + side * 3.5 * nrm)
    return lanes, bounds, roads


def _draw_lines(raster, lines, grid: GridConfig, value=1.0):
    n = grid.size
    for line in lines:
        for a, b in zip(line[:-1], line[1:]):
            steps = max(2, int(np.linalg.norm(b - a) / (grid.resolution / 2)) + 1)
            pts = a + np.linspace(0, 1, steps)[:, None] * (b - a)
            uv = np.rint(grid.to_cells(pts)).astype(int)
            ok = (uv >= 0).all(axis=1) & (uv < n).all(axis=1)
            raster[uv[ok, 1], uv[ok, 0]] = value


def _map_raster(lanes, bounds, signal, grid: GridConfig):
    n = grid.size
    raster = np.zeros((n, n, 3))
    _draw_lines(raster[..., 0], lanes, grid)
    _draw_lines(raster[..., 1], bounds, grid)
    if signal is not None:
        (sx, sy), strength = signal
        centres = (np.arange(n) + 0.5 - n / 2) * grid.resolution
        px, py = np.meshgrid(centres, centres)
        raster[..., 2] = strength * np.exp(-((px - sx) ** 2 + (py - sy) ** 2) / (2 * 1.0 ** 2))
    return np.clip(raster, 0.0, 1.0)


def _segments(lanes, cfg: SceneConfig):
    p = cfg.segment_points
    segs = []
    for lane in lanes:
        for i in range(0, len(lane) - p + 1, p - 1):
            segs.append(lane[i:i + p])
    segs = segs[: cfg.map_segments]
    out = np.zeros((cfg.map_segments, p, 2), dtype=np.float32)
    mask = np.zeros(cfg.map_segments, dtype=np.uint8)
    for i, seg in enumerate(segs):
        out[i] = seg
        mask[i] = 1
    return out, mask


# ---------------------------------------------------------------------------
# scenes


def build_scene(
    states: np.ndarray,
    types: np.ndarray,
    valid: np.ndarray,
    cfg: SceneConfig,
    polylines: np.ndarray | None = None,
    polyline_mask: np.ndarray | None = None,
    map_raster: np.ndarray | None = None,
    ego_index: int = 0,
) -> SceneSample:
    """Render a SceneSample from explicit trajectories.

    ``states`` is [N, T_h+1+T, 7] covering steps -T_h..T; ``valid`` is [N, T_h+1+T].
    """
    grid = cfg.grid
    th, tf = cfg.history, cfg.horizon
    states = np.asarray(states, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if states.shape[1] != th + 1 + tf:
        raise InvalidConfigError(f"expected {th + 1 + tf} timesteps, got {states.shape[1]}")
    states = states.copy()
    states[..., 4] = wrap_angle(states[..., 4])
    n = grid.size

    hist_occ = np.zeros((th + 1, n, n))
    hist_flow = np.zeros((th, n, n, 2))
    for k in range(th + 1):
        cov = _coverage_stack(states[:, k], grid)
        hist_occ[k] = np.clip(cov[valid[:, k]].sum(axis=0), 0.0, 1.0)
        if k > 0:
            vk = valid[:, k] & valid[:, k - 1]
            hist_flow[k - 1], _ = _backward_flow(states[:, k], states[:, k - 1], vk, grid, cov)

    gt_obs = np.zeros((tf, n, n), dtype=np.uint8)
    gt_occ = np.zeros((tf, n, n), dtype=np.uint8)
    gt_flow = np.zeros((tf, n, n, 2))
    for t in range(1, tf + 1):
        k = th + t
        vk = valid[:, k]
        occl = _occlusion_from_states(states[:, k], vk, ego_index)
        cov = _coverage_stack(states[:, k], grid)
        observed = cov[vk & ~occl].sum(axis=0) >= 0.5
        gt_obs[t - 1] = observed
        gt_occ[t - 1] = (cov[vk & occl].sum(axis=0) >= 0.5) & ~observed
        gt_flow[t - 1], _ = _backward_flow(states[:, k], states[:, k - 1], vk & valid[:, k - 1], grid, cov)

    if polylines is None:
        polylines = np.zeros((cfg.map_segments, cfg.segment_points, 2), dtype=np.float32)
        polyline_mask = np.zeros(cfg.map_segments, dtype=np.uint8)
    if map_raster is None:
        map_raster = np.zeros((n, n, 3))

    return SceneSample(
        agent_states=states[:, : th + 1].astype(np.float32),
        agent_types=np.asarray(types, dtype=np.uint8),
        agent_valid=valid[:, : th + 1].astype(np.uint8),
        map_polylines=np.asarray(polylines, dtype=np.float32),
        map_mask=np.asarray(polyline_mask, dtype=np.uint8),
        hist_occupancy=hist_occ.astype(np.float32),
        hist_backward_flow=hist_flow.astype(np.float32),
        map_raster=map_raster.astype(np.float32),
        gt_observed=gt_obs,
        gt_occluded=gt_occ,
        gt_flow=gt_flow.astype(np.float32),
        ego_index=np.array(ego_index, dtype=np.uint8),
    )


def _rollout(rng, x, y, h, v, w, vmax, cfg: SceneConfig, accel_std, yaw_std):
    """CTRV rollout with bounded random perturbations, anchored at t=0."""
    th, tf, dt = cfg.history, cfg.horizon, cfg.dt
    traj = np.zeros((th + 1 + tf, 5))  # x, y, heading, speed, yaw rate
    traj[th] = (x, y, h, v, w)

    def perturb(v, w):
        v = float(np.clip(v + rng.normal(0, accel_std * dt), 0.0, vmax))
        w = float(np.clip(w + rng.normal(0, yaw_std), -0.5, 0.5))
        return v, w

    for k in range(th + 1, th + 1 + tf):
        px, py, ph, pv, pw = traj[k - 1]
        nv, nw = perturb(pv, pw)
        traj[k] = (px + pv * math.cos(ph) * dt, py + pv * math.sin(ph) * dt, ph + pw * dt, nv, nw)
    for k in range(th - 1, -1, -1):
        nx, ny, nh, nv, nw = traj[k + 1]
        pv, pw = perturb(nv, nw)
        ph = nh - pw * dt
        traj[k] = (nx - pv * math.cos(ph) * dt, ny - pv * math.sin(ph) * dt, ph, pv, pw)
    return traj


def simulate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> SceneSample:
    cfg.validate()
    rng = np.random.default_rng(seed)
    grid = cfg.grid
    half = grid.extent / 2
    lanes, bounds, roads = _road_lanes(rng, grid.extent)

    n_agents = int(rng.integers(cfg.min_agents, cfg.num_agents + 1))
    placed = []  # (x, y, heading, speed, yaw, type)
    ego_len, ego_wid, ego_vmax = _TYPE_GEOMETRY[AgentType.VEHICLE]
    placed.append((0.0, 0.0, 0.0, rng.uniform(1.0, ego_vmax), 0.0, AgentType.VEHICLE))

    def clear(x, y, r):
        return all(math.hypot(x - p[0], y - p[1]) > r + _radius(p[5]) + 0.5 for p in placed)

    attempts = 0
    while len(placed) < n_agents:
        attempts += 1
        if attempts > 200 * cfg.num_agents:
            raise InvalidConfigError(f"could not place {n_agents} agents without overlap")
        atype = AgentType(rng.choice(3, p=[0.6, 0.2, 0.2]))
        _, _, vmax = _TYPE_GEOMETRY[atype]
        if atype == AgentType.PEDESTRIAN:
            x, y = rng.uniform(-half + 1, half - 1, size=2)
            h = rng.uniform(-np.pi, np.pi)
            yaw = rng.normal(0, 0.2)
        else:
            lane = lanes[rng.integers(len(lanes))]
            i = rng.integers(len(lane) - 1)
            d = lane[i + 1] - lane[i]
            x, y = lane[i] + rng.uniform(0, 1) * d
            h = math.atan2(d[1], d[0]) + rng.normal(0, 0.05)
            yaw = rng.normal(0, 0.05)
        if max(abs(x), abs(y)) > half - _PLACEMENT_MARGIN or not clear(x, y, _radius(atype)):
            continue
        placed.append((x, y, h, rng.uniform(0, vmax), yaw, atype))

    horizon_len = cfg.history + 1 + cfg.horizon
    n = cfg.num_agents
    states = np.zeros((n, horizon_len, STATE_DIM))
    valid = np.zeros((n, horizon_len), dtype=bool)
    types = np.zeros(n, dtype=np.uint8)
    for i, (x, y, h, v, w, atype) in enumerate(placed):
        length, width, vmax = _TYPE_GEOMETRY[atype]
        ped = atype == AgentType.PEDESTRIAN
        traj = _rollout(rng, x, y, h, v, w, vmax, cfg, accel_std=0.5 if ped else 1.0,
                        yaw_std=0.1 if ped else 0.03)
        states[i, :, 0:2] = traj[:, 0:2]
        states[i, :, 2] = traj[:, 3] * np.cos(traj[:, 2])
        states[i, :, 3] = traj[:, 3] * np.sin(traj[:, 2])
        states[i, :, 4] = traj[:, 2]
        states[i, :, 5] = length
        states[i, :, 6] = width
        valid[i] = True
        types[i] = atype

    polylines, mask = _segments(lanes, cfg)
    ang, off = roads[1]
    # signal blob sits at the intersection of the two roads
    d, nrm = np.array([math.cos(ang), math.sin(ang)]), np.array([-math.sin(ang), math.cos(ang)])
    s = -off * nrm[1] / d[1] if abs(d[1]) > 1e-6 else 0.0
    sig_xy = s * d + off * nrm
    signal = (sig_xy, rng.uniform(0.3, 1.0))
    raster = _map_raster(lanes, bounds, signal, grid)
    return build_scene(states, types, valid, cfg, polylines, mask, raster, ego_index=0)


def _radius(atype) -> float:
    length, width, _ = _TYPE_GEOMETRY[AgentType(atype)]
    return 0.5 * math.hypot(length, width)


def warp_occupancy(occ_prev: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Gather occ_prev at x + flow[x] with bilinear weights (zero outside)."""
    n_r, n_c = occ_prev.shape
    rows, cols = np.meshgrid(np.arange(n_r), np.arange(n_c), indexing="ij")
    px = cols + flow[..., 0]
    py = rows + flow[..., 1]
    x0, y0 = np.floor(px).astype(int), np.floor(py).astype(int)
    out = np.zeros_like(occ_prev, dtype=np.float64)
    for dx in (0, 1):
        for dy in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            wgt = np.maximum(0, 1 - np.abs(px - xi)) * np.maximum(0, 1 - np.abs(py - yi))
            ok = (xi >= 0) & (xi < n_c) & (yi >= 0) & (yi < n_r)
            out[ok] += wgt[ok] * occ_prev[yi[ok], xi[ok]]
    return out
