"""Synthetic 3D service-area geometry: axis-aligned buildings, transmitters,
users, analytic LOS tests, and first-order specular reflection paths.

All operations here are pure functions of their inputs; they are safe to call
concurrently from any number of workers.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .errors import GenerationError, InputError, ParseError

SPEED_OF_LIGHT = 299_792_458.0  # m/s

# Grazing contact closer than this to a box face counts as no intersection.
BOUNDARY_TOL = 1e-9  # m

_FACE_NAMES = ("x-", "x+", "y-", "y+")


def _as_vec3(v, what: str) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (3,):
        raise InputError(f"{what} must be a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InputError(f"{what} has non-finite coordinates: {a}")
    return a


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box; stands in for an urban obstruction."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min_corner", _as_vec3(self.min_corner, "min_corner"))
        object.__setattr__(self, "max_corner", _as_vec3(self.max_corner, "max_corner"))
        if not np.all(self.min_corner < self.max_corner):
            raise InputError(
                f"degenerate box: min {self.min_corner} not strictly below max {self.max_corner}"
            )

    def contains(self, p, strict: bool = True) -> bool:
        p = np.asarray(p, dtype=float)
        if strict:
            return bool(np.all(p > self.min_corner) and np.all(p < self.max_corner))
        return bool(np.all(p >= self.min_corner) and np.all(p <= self.max_corner))


class TxKind(str, Enum):
    SATELLITE = "satellite"
    UAV = "uav"
    GROUND = "ground"


# Altitude bands a transmitter of each kind must respect, in meters.
_ALT_BANDS = {
    TxKind.SATELLITE: (100e3, math.inf),
    TxKind.UAV: (20.0, 20e3),
    TxKind.GROUND: (-math.inf, 100.0),
}


@dataclass(frozen=True)
class Transmitter:
    id: str
    kind: TxKind
    position: np.ndarray
    tx_power_dbm: float
    carrier_hz: float

    def __post_init__(self):
        object.__setattr__(self, "kind", TxKind(self.kind))
        object.__setattr__(self, "position", _as_vec3(self.position, f"transmitter {self.id} position"))
        lo, hi = _ALT_BANDS[self.kind]
        z = self.position[2]
        if not (lo <= z <= hi):
            raise InputError(
                f"transmitter {self.id}: altitude {z} m outside {self.kind.value} band [{lo}, {hi}]"
            )
        if not (-30.0 <= self.tx_power_dbm <= 60.0):
            raise InputError(f"transmitter {self.id}: tx_power_dbm {self.tx_power_dbm} outside [-30, 60]")
        if not (self.carrier_hz > 0 and math.isfinite(self.carrier_hz)):
            raise InputError(f"transmitter {self.id}: carrier_hz must be positive")


@dataclass(frozen=True)
class Scene:
    """Service area: ground rectangle, buildings, transmitters, users."""

    bounds: np.ndarray  # ((xmin, ymin), (xmax, ymax))
    buildings: tuple
    transmitters: tuple
    users: tuple

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=float)
        if b.shape != (2, 2) or not np.all(np.isfinite(b)) or not np.all(b[0] < b[1]):
            raise InputError(f"bounds must be ((xmin,ymin),(xmax,ymax)) with min < max, got {b}")
        object.__setattr__(self, "bounds", b)
        object.__setattr__(self, "buildings", tuple(self.buildings))
        object.__setattr__(self, "transmitters", tuple(self.transmitters))
        object.__setattr__(self, "users", tuple(_as_vec3(u, f"user {i}") for i, u in enumerate(self.users)))

        ids = [t.id for t in self.transmitters]
        if len(set(ids)) != len(ids):
            raise InputError(f"duplicate transmitter ids: {ids}")
        for i, box in enumerate(self.buildings):
            if (np.any(box.min_corner[:2] < b[0]) or np.any(box.max_corner[:2] > b[1])):
                raise InputError(f"building {i} footprint outside bounds")
        for i, u in enumerate(self.users):
            if np.any(u[:2] < b[0]) or np.any(u[:2] > b[1]):
                raise InputError(f"user {i} at {u} outside bounds")
            for j, box in enumerate(self.buildings):
                if box.contains(u, strict=True):
                    raise InputError(f"user {i} strictly inside building {j}")

    def in_bounds(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p[:2] >= self.bounds[0]) and np.all(p[:2] <= self.bounds[1]))

    def transmitter(self, tx_id: str) -> Transmitter:
        for t in self.transmitters:
            if t.id == tx_id:
                return t
        raise InputError(f"no transmitter with id {tx_id!r}")


class PathKind(str, Enum):
    DIRECT = "direct"
    REFLECTED = "reflected"


@dataclass(frozen=True)
class PropPath:
    kind: PathKind
    length_m: float
    reflect_face: Optional[str] = None

    def __post_init__(self):
        if not (self.length_m > 0 and math.isfinite(self.length_m)):
            raise InputError(f"path length must be positive, got {self.length_m}")


def segment_intersects_aabb(p0, p1, box: Aabb) -> bool:
    """True iff the open segment (p0, p1) passes through the open interior
    of `box`. Grazing contact within BOUNDARY_TOL of a face is not an
    intersection, so a ray reflecting off a wall does not count as blocked
    by the wall's own building.
    """
    p0 = _as_vec3(p0, "p0")
    p1 = _as_vec3(p1, "p1")
    if np.array_equal(p0, p1):
        raise InputError("p0 and p1 must differ")
    lo = box.min_corner + BOUNDARY_TOL
    hi = box.max_corner - BOUNDARY_TOL
    d = p1 - p0
    t_enter, t_exit = 0.0, 1.0
    for ax in range(3):
        if d[ax] == 0.0:
            if p0[ax] <= lo[ax] or p0[ax] >= hi[ax]:
                return False
            continue
        t0 = (lo[ax] - p0[ax]) / d[ax]
        t1 = (hi[ax] - p0[ax]) / d[ax]
        if t0 > t1:
            t0, t1 = t1, t0
        t_enter = max(t_enter, t0)
        t_exit = min(t_exit, t1)
        if t_enter >= t_exit:
            return False
    return True


def _blocked(buildings, p0, p1) -> bool:
    return any(segment_intersects_aabb(p0, p1, b) for b in buildings)


def los_test(scene: Scene, tx_pos, rx_pos) -> bool:
    """True iff no building in the scene blocks the tx-rx segment."""
    tx_pos = _as_vec3(tx_pos, "tx_pos")
    rx_pos = _as_vec3(rx_pos, "rx_pos")
    if not scene.in_bounds(rx_pos):
        raise InputError(f"rx {rx_pos} outside scene bounds")
    return not _blocked(scene.buildings, tx_pos, rx_pos)


def _vertical_faces(box: Aabb):
    """Yield (face_name, axis, plane_coord, outward_sign) for the four walls."""
    yield "x-", 0, box.min_corner[0], -1.0
    yield "x+", 0, box.max_corner[0], 1.0
    yield "y-", 1, box.min_corner[1], -1.0
    yield "y+", 1, box.max_corner[1], 1.0


def reflected_paths(scene: Scene, tx_pos, rx_pos):
    """First-order specular paths off vertical building walls (image method).

    For each wall, the transmitter is mirrored across the wall plane and the
    mirror-to-rx segment locates the specular point. A path is kept iff that
    point lies on the wall rectangle and both legs are unobstructed; the
    reflecting wall itself never blocks its own path because the legs only
    touch its boundary. Paths come back sorted by ascending length.
    """
    tx_pos = _as_vec3(tx_pos, "tx_pos")
    rx_pos = _as_vec3(rx_pos, "rx_pos")
    paths = []
    for bi, box in enumerate(scene.buildings):
        for face, ax, plane, sign in _vertical_faces(box):
            side_tx = sign * (tx_pos[ax] - plane)
            side_rx = sign * (rx_pos[ax] - plane)
            # Both endpoints must sit strictly on the wall's outward side.
            if side_tx <= BOUNDARY_TOL or side_rx <= BOUNDARY_TOL:
                continue
            mirror = tx_pos.copy()
            mirror[ax] = 2.0 * plane - tx_pos[ax]
            t = (plane - mirror[ax]) / (rx_pos[ax] - mirror[ax])
            if not (0.0 < t < 1.0):
                continue
            hit = mirror + t * (rx_pos - mirror)
            oax = 1 - ax  # the other horizontal axis
            if not (box.min_corner[oax] <= hit[oax] <= box.max_corner[oax]):
                continue
            if not (box.min_corner[2] <= hit[2] <= box.max_corner[2]):
                continue
            if _blocked(scene.buildings, tx_pos, hit) or _blocked(scene.buildings, hit, rx_pos):
                continue
            length = float(np.linalg.norm(rx_pos - mirror))
            paths.append(PropPath(PathKind.REFLECTED, length, f"{bi}:{face}"))
    paths.sort(key=lambda p: (p.length_m, p.reflect_face))
    return paths


def excess_delay_ns(direct_m: float, path_m: float) -> float:
    """Excess arrival delay of a path over the direct distance, in ns."""
    if not (direct_m > 0 and math.isfinite(direct_m) and math.isfinite(path_m)):
        raise InputError(f"need finite path lengths with direct > 0, got {direct_m}, {path_m}")
    if path_m < direct_m:
        raise InputError(f"path {path_m} m shorter than direct {direct_m} m violates the triangle inequality")
    return (path_m - direct_m) / SPEED_OF_LIGHT * 1e9


# ---------------------------------------------------------------------------
# Scene file I/O. JSON document with keys bounds, buildings, transmitters,
# users; lengths in meters, powers in dBm, frequencies in Hz:
#
# {
#   "bounds": [[xmin, ymin], [xmax, ymax]],
#   "buildings": [{"min": [x,y,z], "max": [x,y,z]}, ...],
#   "transmitters": [{"id": "...", "kind": "satellite|uav|ground",
#                     "position": [x,y,z], "tx_power_dbm": 30.0,
#                     "carrier_hz": 1.5e9}, ...],
#   "users": [[x,y,z], ...]
# }
# ---------------------------------------------------------------------------


def _want(obj, key, typ, where):
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: expected an object, got {type(obj).__name__}")
    if key not in obj:
        raise ParseError(f"{where}.{key}: missing required key")
    v = obj[key]
    if typ is float and isinstance(v, int):
        v = float(v)
    if not isinstance(v, typ):
        raise ParseError(f"{where}.{key}: expected {typ.__name__}, got {type(v).__name__}")
    return v


def _want_vec(obj, key, n, where):
    v = _want(obj, key, list, where)
    if len(v) != n or not all(isinstance(x, (int, float)) for x in v):
        raise ParseError(f"{where}.{key}: expected a list of {n} numbers")
    return [float(x) for x in v]


def scene_from_dict(doc: dict) -> Scene:
    bounds = _want(doc, "bounds", list, "$")
    if len(bounds) != 2:
        raise ParseError("$.bounds: expected [[xmin,ymin],[xmax,ymax]]")
    blds = []
    for i, b in enumerate(_want(doc, "buildings", list, "$")):
        where = f"$.buildings[{i}]"
        blds.append(Aabb(_want_vec(b, "min", 3, where), _want_vec(b, "max", 3, where)))
    txs = []
    for i, t in enumerate(_want(doc, "transmitters", list, "$")):
        where = f"$.transmitters[{i}]"
        kind = _want(t, "kind", str, where)
        try:
            kind = TxKind(kind)
        except ValueError:
            raise ParseError(f"{where}.kind: unknown kind {kind!r}") from None
        txs.append(
            Transmitter(
                id=_want(t, "id", str, where),
                kind=kind,
                position=_want_vec(t, "position", 3, where),
                tx_power_dbm=_want(t, "tx_power_dbm", float, where),
                carrier_hz=_want(t, "carrier_hz", float, where),
            )
        )
    users = []
    for i, u in enumerate(_want(doc, "users", list, "$")):
        if not isinstance(u, list) or len(u) != 3:
            raise ParseError(f"$.users[{i}]: expected [x,y,z]")
        users.append([float(x) for x in u])
    try:
        return Scene(bounds=bounds, buildings=blds, transmitters=txs, users=users)
    except InputError as e:
        raise ParseError(f"$: {e}") from e


def scene_to_dict(scene: Scene) -> dict:
    return {
        "bounds": scene.bounds.tolist(),
        "buildings": [{"min": b.min_corner.tolist(), "max": b.max_corner.tolist()} for b in scene.buildings],
        "transmitters": [
            {
                "id": t.id,
                "kind": t.kind.value,
                "position": t.position.tolist(),
                "tx_power_dbm": t.tx_power_dbm,
                "carrier_hz": t.carrier_hz,
            }
            for t in scene.transmitters
        ],
        "users": [u.tolist() for u in scene.users],
    }


def load_scene(path) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    return scene_from_dict(doc)


def save_scene(scene: Scene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Random scene generation (one satellite, one UAV, one ground AP, four users).
# ---------------------------------------------------------------------------


@dataclass
class SceneGenParams:
    side_m: float = 400.0
    building_count: int = 14
    footprint_m: tuple = (20.0, 60.0)
    height_m: tuple = (10.0, 50.0)
    user_count: int = 4
    user_height_m: float = 1.5
    sat_altitude_m: float = 550e3
    sat_elevation_deg: float = 45.0
    uav_altitude_m: float = 150.0
    ground_ap_height_m: float = 15.0
    carrier_hz: float = 1.57542e9
    tx_power_dbm: float = 30.0
    max_tries: int = 200


def generate_scene(params: SceneGenParams, seed: int) -> Scene:
    """Build a random urban scene with the default three-transmitter topology."""
    from . import rngstream

    rng = rngstream.stream(seed, rngstream.SCENE)
    s = params.side_m
    bounds = [[0.0, 0.0], [s, s]]

    blds = []
    for _ in range(params.building_count):
        w = rng.uniform(*params.footprint_m)
        dfoot = rng.uniform(*params.footprint_m)
        h = rng.uniform(*params.height_m)
        x0 = rng.uniform(0.0, s - w)
        y0 = rng.uniform(0.0, s - dfoot)
        blds.append(Aabb([x0, y0, 0.0], [x0 + w, y0 + dfoot, h]))

    center = np.array([s / 2, s / 2, 0.0])
    az = rng.uniform(0.0, 2 * math.pi)
    horiz = params.sat_altitude_m / math.tan(math.radians(params.sat_elevation_deg))
    sat_pos = center + np.array([horiz * math.sin(az), horiz * math.cos(az), params.sat_altitude_m])
    uav_pos = np.array([rng.uniform(0.3 * s, 0.7 * s), rng.uniform(0.3 * s, 0.7 * s), params.uav_altitude_m])
    ap_pos = np.array([rng.uniform(0.1 * s, 0.9 * s), rng.uniform(0.1 * s, 0.9 * s), params.ground_ap_height_m])
    txs = [
        Transmitter("sat1", TxKind.SATELLITE, sat_pos, params.tx_power_dbm, params.carrier_hz),
        Transmitter("uav1", TxKind.UAV, uav_pos, params.tx_power_dbm, params.carrier_hz),
        Transmitter("gnd1", TxKind.GROUND, ap_pos, params.tx_power_dbm, params.carrier_hz),
    ]

    users = []
    for _ in range(params.user_count):
        for attempt in range(params.max_tries):
            p = np.array([rng.uniform(0.05 * s, 0.95 * s), rng.uniform(0.05 * s, 0.95 * s), params.user_height_m])
            if not any(b.contains(p) for b in blds):
                users.append(p)
                break
        else:
            raise GenerationError(
                f"could not place a user outside buildings after {params.max_tries} tries; "
                "reduce building density or change the seed"
            )
    return Scene(bounds=bounds, buildings=blds, transmitters=txs, users=users)
