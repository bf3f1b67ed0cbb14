"""Deterministic synthetic multi-CAV scenes with 2.5D LiDAR ray casting.

Stands in for CARLA-scale datasets at desk scale: seeded actor
placement with an explicit occlusion motif (an actor hidden from the
ego but visible to a flanking CAV), BEV ray casting against actor
rectangles with nearest-hit occlusion, and a JSON-lines frame format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Box7, LidarPose, invert_transform, pose_to_matrix, transform_points, wrap_angle


class PlacementError(RuntimeError):
    """Raised when rejection sampling cannot place the requested actors."""


class FrameFormatError(ValueError):
    """Raised on malformed frame files."""


VEHICLE_DIMS = (1.8, 4.2, 1.5)  # (w, l, h); distinct from the anchor prior
PEDESTRIAN_DIMS = (0.6, 0.6, 1.7)  # thin box matching the anchor prior
LIDAR_HEIGHT = 1.9


@dataclass(frozen=True)
class Actor:
    box: Box7
    velocity: tuple[float, float] = (0.0, 0.0)


@dataclass
class Scene:
    actors: list[Actor]
    cav_poses: list[LidarPose]  # first pose is the ego
    cav_actor_idx: list[int]  # actor index of each CAV's own vehicle body
    bounds: float


@dataclass(frozen=True)
class SensorModel:
    azimuth_resolution: float = np.deg2rad(0.2)
    rings: int = 16
    max_range: float = 100.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.azimuth_resolution <= 0 or self.max_range <= 0 or self.rings < 1:
            raise ValueError("invalid sensor model")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class SceneConfig:
    bounds: float = 16.0
    n_cavs: int = 3
    n_vehicles: tuple[int, int] = (4, 8)  # background vehicles, CAVs excluded
    n_pedestrians: tuple[int, int] = (2, 4)
    occluded_vehicles: int = 1
    occluded_pedestrians: int = 1
    # 0 = free vehicle headings; k > 0 snaps vehicle headings (ego included)
    # to k evenly spaced lane directions plus gaussian jitter
    lane_headings: int = 0
    heading_jitter: float = 0.15
    # minimum BEV clearance between actors; at coarse grid resolutions a
    # larger margin keeps neighboring vehicles separable
    placement_margin: float = 0.8
    # occlusion motif geometry: ego-to-occluder distance range and the
    # additional occluder-to-hidden-actor gap range
    occluder_dist: tuple[float, float] = (4.5, 7.5)
    hidden_gap: tuple[float, float] = (3.0, 5.0)
    max_attempts: int = 2000


def _inflated_corners(box: Box7, margin: float) -> np.ndarray:
    grown = replace(box, w=box.w + margin, l=box.l + margin)
    return grown.bev_corners()


def _overlaps(box: Box7, others: list[Actor], margin: float = 0.8) -> bool:
    """True when the margin-inflated BEV rectangles intersect."""
    from .metrics import intersection_area

    mine = _inflated_corners(box, margin)
    r_self = np.hypot(box.w + margin, box.l + margin) / 2
    for other in others:
        b = other.box
        d = np.hypot(box.x - b.x, box.y - b.y)
        if d > r_self + np.hypot(b.w + margin, b.l + margin) / 2:
            continue  # circles disjoint, rectangles cannot touch
        if intersection_area(mine, _inflated_corners(b, margin)) > 0.0:
            return True
    return False


def _vehicle_box(x: float, y: float, theta: float) -> Box7:
    w, l, h = VEHICLE_DIMS
    return Box7(x=x, y=y, z=h / 2, w=w, l=l, h=h, theta=theta, cls="vehicle")


def _pedestrian_box(x: float, y: float, theta: float) -> Box7:
    w, l, h = PEDESTRIAN_DIMS
    return Box7(x=x, y=y, z=h / 2, w=w, l=l, h=h, theta=theta, cls="pedestrian")


def _segments_of(box: Box7) -> np.ndarray:
    """(4, 2, 2) BEV edge segments of an actor rectangle."""
    c = box.bev_corners()
    return np.stack([np.stack([c[i], c[(i + 1) % 4]]) for i in range(4)])


def _ray_hits(origin: np.ndarray, direction: np.ndarray, segments: np.ndarray) -> float:
    """Distance to the nearest intersection of one ray with edge segments."""
    p, q = segments[:, 0], segments[:, 1]
    e = q - p
    denom = direction[0] * e[:, 1] - direction[1] * e[:, 0]
    rel = p - origin
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rel[:, 0] * e[:, 1] - rel[:, 1] * e[:, 0]) / denom
        u = (rel[:, 0] * direction[1] - rel[:, 1] * direction[0]) / denom
    ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= 0.0) & (u <= 1.0)
    return float(t[ok].min()) if ok.any() else np.inf


def first_hit(scene: Scene, origin_xy: np.ndarray, direction: np.ndarray, skip_actor: int = -1) -> tuple[int, float]:
    """(actor index, distance) of the nearest BEV hit, or (-1, inf)."""
    best, dist = -1, np.inf
    for idx, actor in enumerate(scene.actors):
        if idx == skip_actor:
            continue
        d = _ray_hits(origin_xy, direction, _segments_of(actor.box))
        if d < dist:
            best, dist = idx, d
    return best, dist


def actor_visible(scene: Scene, cav_idx: int, actor_idx: int) -> bool:
    """True when the ray from the CAV to the actor's center hits that actor first."""
    pose = scene.cav_poses[cav_idx]
    target = scene.actors[actor_idx].box
    origin = np.array([pose.x, pose.y])
    direction = np.array([target.x, target.y]) - origin
    n = np.linalg.norm(direction)
    if n < 1e-9:
        return False
    hit, _ = first_hit(scene, origin, direction / n, skip_actor=scene.cav_actor_idx[cav_idx])
    return hit == actor_idx


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Seeded scene with CAVs, background actors and occlusion motifs.

    Each occlusion motif places an occluder vehicle between the ego and
    a hidden actor, then verifies by ray casting that the hidden actor
    is invisible to the ego but visible to at least one other CAV.
    """
    rng = np.random.default_rng(seed)
    b = cfg.bounds

    for _ in range(cfg.max_attempts):
        actors: list[Actor] = []
        cav_poses: list[LidarPose] = []
        cav_actor_idx: list[int] = []

        # ego near the center, flanking CAVs offset to the sides
        ego_xy = rng.uniform(-2.0, 2.0, size=2)
        ego_yaw = _vehicle_heading(rng, cfg)
        slots = [(0.0, 0.0)] + [
            (rng.uniform(-b * 0.5, b * 0.5), s * rng.uniform(b * 0.45, b * 0.7)) for s in (-1.0, 1.0)
        ]
        ok = True
        for i in range(cfg.n_cavs):
            if i == 0:
                x, y, yaw = ego_xy[0], ego_xy[1], ego_yaw
            else:
                dx, dy = slots[i] if i < len(slots) else rng.uniform(-b * 0.7, b * 0.7, size=2)
                x, y, yaw = ego_xy[0] + dx, ego_xy[1] + dy, _vehicle_heading(rng, cfg)
                x, y = np.clip(x, -b + 3, b - 3), np.clip(y, -b + 3, b - 3)
            box = _vehicle_box(x, y, yaw)
            if _overlaps(box, actors, cfg.placement_margin):
                ok = False
                break
            cav_actor_idx.append(len(actors))
            actors.append(Actor(box=box, velocity=_rand_velocity(rng, yaw)))
            cav_poses.append(LidarPose(x=x, y=y, z=LIDAR_HEIGHT, roll=0.0, yaw=yaw, pitch=0.0))
        if not ok:
            continue

        scene = Scene(actors=actors, cav_poses=cav_poses, cav_actor_idx=cav_actor_idx, bounds=b)
        if not _place_motifs(scene, cfg, rng):
            continue
        if not _place_background(scene, cfg, rng):
            continue
        return scene

    raise PlacementError(f"could not place a valid scene in {cfg.max_attempts} attempts")


def _vehicle_heading(rng: np.random.Generator, cfg: SceneConfig) -> float:
    """Free heading, or one of the configured lane directions plus jitter."""
    if cfg.lane_headings <= 0:
        return float(rng.uniform(-np.pi, np.pi))
    lane = int(rng.integers(cfg.lane_headings))
    base = 2.0 * np.pi * lane / cfg.lane_headings
    return float(wrap_angle(base + cfg.heading_jitter * rng.normal()))


def _rand_velocity(rng: np.random.Generator, yaw: float) -> tuple[float, float]:
    speed = rng.uniform(0.0, 10.0)
    return (float(speed * np.cos(yaw)), float(speed * np.sin(yaw)))


def _place_motifs(scene: Scene, cfg: SceneConfig, rng: np.random.Generator) -> bool:
    """Occluder + hidden actor pairs along rays from the ego."""
    ego = scene.cav_poses[0]
    motifs = [("vehicle", cfg.occluded_vehicles), ("pedestrian", cfg.occluded_pedestrians)]
    for cls, count in motifs:
        for _ in range(count):
            placed = False
            for _ in range(60):
                az = rng.uniform(-np.pi, np.pi)
                d1 = rng.uniform(*cfg.occluder_dist)
                d2 = d1 + rng.uniform(*cfg.hidden_gap)
                direction = np.array([np.cos(az), np.sin(az)])
                ox, oy = np.array([ego.x, ego.y]) + d1 * direction
                hx, hy = np.array([ego.x, ego.y]) + d2 * direction
                if max(abs(ox), abs(oy), abs(hx), abs(hy)) > scene.bounds - 1.5:
                    continue
                # occluder broadside to the ray so its silhouette is wide
                occluder = _vehicle_box(ox, oy, az + np.pi / 2)
                hidden = _vehicle_box(hx, hy, _vehicle_heading(rng, cfg)) if cls == "vehicle" else _pedestrian_box(
                    hx, hy, 0.0
                )
                if _overlaps(occluder, scene.actors, cfg.placement_margin) or _overlaps(
                    hidden, scene.actors + [Actor(occluder)], cfg.placement_margin
                ):
                    continue
                occ_idx = len(scene.actors)
                scene.actors.append(Actor(box=occluder, velocity=_rand_velocity(rng, occluder.theta)))
                hid_idx = len(scene.actors)
                scene.actors.append(Actor(box=hidden, velocity=(0.0, 0.0)))
                ego_blocked = not actor_visible(scene, 0, hid_idx)
                flank_sees = any(actor_visible(scene, c, hid_idx) for c in range(1, len(scene.cav_poses)))
                if ego_blocked and flank_sees:
                    placed = True
                    break
                del scene.actors[occ_idx:]
            if not placed:
                return False
    return True


def _place_background(scene: Scene, cfg: SceneConfig, rng: np.random.Generator) -> bool:
    n_veh = int(rng.integers(cfg.n_vehicles[0], cfg.n_vehicles[1] + 1))
    n_ped = int(rng.integers(cfg.n_pedestrians[0], cfg.n_pedestrians[1] + 1))
    for cls, count in (("vehicle", n_veh), ("pedestrian", n_ped)):
        for _ in range(count):
            for attempt in range(80):
                x, y = rng.uniform(-scene.bounds + 1.5, scene.bounds - 1.5, size=2)
                yaw = _vehicle_heading(rng, cfg) if cls == "vehicle" else float(rng.uniform(-np.pi, np.pi))
                box = _vehicle_box(x, y, yaw) if cls == "vehicle" else _pedestrian_box(x, y, yaw)
                if not _overlaps(box, scene.actors, cfg.placement_margin):
                    scene.actors.append(Actor(box=box, velocity=_rand_velocity(rng, yaw) if cls == "vehicle" else (0.0, 0.0)))
                    break
            else:
                return False
    return True


def simulate_lidar(scene: Scene, cav_idx: int, sensor: SensorModel, seed: int) -> np.ndarray:
    """2.5D scan from one CAV: (n, 4) points in the CAV's local frame.

    BEV rays at the azimuth resolution, nearest actor hit wins; each hit
    is expanded to ``rings`` vertical samples over the actor's height.
    The CAV's own vehicle body never reflects its own beams.
    """
    pose = scene.cav_poses[cav_idx]
    origin = np.array([pose.x, pose.y])
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(cav_idx,)))

    n_rays = int(round(2.0 * np.pi / sensor.azimuth_resolution))
    azimuths = -np.pi + np.arange(n_rays) * (2.0 * np.pi / n_rays)
    dirs = np.column_stack([np.cos(azimuths), np.sin(azimuths)])  # (R, 2)
    self_idx = scene.cav_actor_idx[cav_idx]
    others = [i for i in range(len(scene.actors)) if i != self_idx]
    if not others:
        return np.zeros((0, 4))

    segs = np.concatenate([_segments_of(scene.actors[i].box) for i in others])  # (S, 2, 2)
    seg_actor = np.repeat(others, 4)
    p, q = segs[:, 0], segs[:, 1]
    e = q - p  # (S, 2)
    rel = p - origin
    num_t = rel[:, 0] * e[:, 1] - rel[:, 1] * e[:, 0]  # (S,)
    denom = dirs[:, 0, None] * e[None, :, 1] - dirs[:, 1, None] * e[None, :, 0]  # (R, S)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num_t[None, :] / denom
        u = (rel[None, :, 0] * dirs[:, 1, None] - rel[None, :, 1] * dirs[:, 0, None]) / denom
    valid = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= 0.0) & (u <= 1.0)
    t = np.where(valid, t, np.inf)
    best_seg = t.argmin(axis=1)
    dist = t[np.arange(n_rays), best_seg]
    hit_mask = np.isfinite(dist) & (dist <= sensor.max_range)
    if not hit_mask.any():
        return np.zeros((0, 4))

    hit_xy = origin + dist[hit_mask, None] * dirs[hit_mask]
    hit_actor = seg_actor[best_seg[hit_mask]]
    boxes = scene.actors
    z_lo = np.array([boxes[i].box.z - boxes[i].box.h / 2 for i in hit_actor])
    z_hi = np.array([boxes[i].box.z + boxes[i].box.h / 2 for i in hit_actor])
    frac = np.linspace(0.0, 1.0, sensor.rings)
    zs = z_lo[:, None] + (z_hi - z_lo)[:, None] * frac[None, :]  # (hits, rings)
    n_hits = hit_xy.shape[0]
    pts = np.column_stack(
        [
            np.repeat(hit_xy[:, 0], sensor.rings),
            np.repeat(hit_xy[:, 1], sensor.rings),
            zs.reshape(n_hits * sensor.rings),
        ]
    )
    intensity = rng.uniform(0.0, 1.0, size=len(pts))
    if sensor.dropout > 0.0:
        keep = rng.uniform(size=len(pts)) >= sensor.dropout
        pts, intensity = pts[keep], intensity[keep]
    cloud = np.column_stack([pts, intensity])
    return transform_points(cloud, invert_transform(pose_to_matrix(pose)))


@dataclass
class FrameBundle:
    """One timestep: per-CAV clouds and poses plus world-frame ground truth."""

    frame_id: int
    seed: int
    poses: list[LidarPose]
    clouds: list[np.ndarray]  # local-frame (n, 4) per CAV, aligned with poses
    gts: list[Box7]  # world frame
    cav_actor_idx: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.poses) != len(self.clouds):
            raise ValueError("pose list must align with cloud list")


def make_frame(cfg: SceneConfig, sensor: SensorModel, seed: int, frame_id: int) -> FrameBundle:
    """Deterministic frame: (config, seed, frame_id) fixes every byte."""
    scene_seed = int(np.random.SeedSequence(entropy=seed, spawn_key=(frame_id,)).generate_state(1)[0])
    scene = generate_scene(cfg, scene_seed)
    clouds = [simulate_lidar(scene, i, sensor, seed=scene_seed) for i in range(len(scene.cav_poses))]
    return FrameBundle(
        frame_id=frame_id,
        seed=seed,
        poses=list(scene.cav_poses),
        clouds=clouds,
        gts=[a.box for a in scene.actors],
        cav_actor_idx=list(scene.cav_actor_idx),
    )


def generate_frames(cfg: SceneConfig, sensor: SensorModel, seed: int, n_frames: int) -> list[FrameBundle]:
    return [make_frame(cfg, sensor, seed, i) for i in range(n_frames)]


# -- frame file format ---------------------------------------------------
# JSON lines, one frame per line:
# {"frame_id", "seed", "cavs": [{"pose": [X,Y,Z,roll,yaw,pitch], "points": [[x,y,z,i],...]}],
#  "gts": [{"class", "box": [x,y,z,w,l,h,theta]}], "cav_actor_idx": [...]}
# Floats are serialized with repr (17 significant digits), so the round
# trip is lossless.

FRAME_FORMAT_VERSION = 1


def write_frames(bundles: list[FrameBundle], path: str) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": "coopfuse-frames", "version": FRAME_FORMAT_VERSION}) + "\n")
        for fb in bundles:
            record = {
                "frame_id": fb.frame_id,
                "seed": fb.seed,
                "cavs": [
                    {"pose": pose.as_list(), "points": cloud.tolist()}
                    for pose, cloud in zip(fb.poses, fb.clouds)
                ],
                "gts": [{"class": g.cls, "box": g.as_list()} for g in fb.gts],
                "cav_actor_idx": fb.cav_actor_idx,
            }
            fh.write(json.dumps(record) + "\n")


def read_frames(path: str) -> list[FrameBundle]:
    bundles: list[FrameBundle] = []
    with open(path) as fh:
        header_line = fh.readline()
        offset = len(header_line)
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as err:
            raise FrameFormatError(f"malformed header at byte {err.pos}: {err.msg}") from err
        if header.get("format") != "coopfuse-frames":
            raise FrameFormatError("not a coopfuse frame file")
        if header.get("version") != FRAME_FORMAT_VERSION:
            raise FrameFormatError(f"unsupported frame file version {header.get('version')}")
        for lineno, line in enumerate(fh, start=2):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise FrameFormatError(
                    f"malformed frame at line {lineno}, byte {offset + err.pos}: {err.msg}"
                ) from err
            offset += len(line)
            try:
                bundles.append(
                    FrameBundle(
                        frame_id=rec["frame_id"],
                        seed=rec["seed"],
                        poses=[LidarPose(*cav["pose"]) for cav in rec["cavs"]],
                        clouds=[np.array(cav["points"], dtype=np.float64).reshape(-1, 4) for cav in rec["cavs"]],
                        gts=[Box7(*g["box"], cls=g["class"]) for g in rec["gts"]],
                        cav_actor_idx=list(rec.get("cav_actor_idx", [])),
                    )
                )
            except (KeyError, TypeError) as err:
                raise FrameFormatError(f"invalid frame record at line {lineno}: {err}") from err
    return bundles
