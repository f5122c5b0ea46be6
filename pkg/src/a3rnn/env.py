"""Scripted pick task: a planar 3-link arm seen from the side, a wooden box at
one of three table slots, and the on-disk dataset format.

Pixel coordinates are continuous with pixel ``(row, col)`` covering
``[col, col+1) x [row, row+1)``; normalized coordinates divide by the image
width/height so pixel centers map to ``(col + 0.5) / W``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

T_STEPS = 120
N_JOINTS = 4  # three arm joints + gripper opening

# phase boundaries (first step of each phase)
REACH_START = 10
DESCEND_START = 60
GRASP_STEP = 80
LIFT_START = 90

WALL = (200, 205, 210)
TABLE = (150, 130, 110)
PEDESTAL = (90, 90, 95)
WOOD = (190, 120, 50)
WOOD_GRAIN = (120, 65, 20)
ARM = (40, 60, 140)
PALM = (230, 230, 40)


class ConfigError(ValueError):
    pass


class CorruptDatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    image_size: int = 64
    base: tuple[float, float] = (10.0, 34.0)
    links: tuple[float, float, float] = (22.0, 20.0, 8.0)
    table_y: int = 52
    box_size: int = 8
    slot_x: tuple[int, ...] = (26, 38, 50)
    hover_height: float = 14.0
    start_tip: tuple[float, float] = (22.0, 22.0)
    start_jitter: float = 2.0
    joint_limits: tuple[tuple[float, float], ...] = (
        (-np.pi, np.pi),
        (0.0, np.pi),
        (-np.pi, np.pi),
        (0.0, 1.0),
    )

    @property
    def box_center_y(self) -> float:
        return self.table_y - self.box_size / 2

    def box_center(self, slot: int) -> np.ndarray:
        if slot not in range(len(self.slot_x)):
            raise ConfigError(f"slot {slot} outside 0..{len(self.slot_x) - 1}")
        return np.array([self.slot_x[slot], self.box_center_y], dtype=np.float64)

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Episode:
    frames: np.ndarray  # (T, 3, H, W) float32 in [0, 1], multiples of 1/255
    joints: np.ndarray  # (T, 4) float32 normalized to [0, 1]
    box_slot: int
    box_center_px: np.ndarray  # resting box center, (x, y) pixels
    box_track: np.ndarray = field(default=None)  # (T, 2) box center per frame
    seed: int = 0

    @property
    def T(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------- kinematics


def forward_kinematics(q: np.ndarray, cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    """Return (4, 2) pixel positions of base, elbow, wrist and tip for raw
    joint angles ``q[:3]`` (radians, relative, image y pointing down)."""
    l1, l2, l3 = cfg.links
    a1 = q[0]
    a2 = a1 + q[1]
    a3 = a2 + q[2]
    base = np.asarray(cfg.base, dtype=np.float64)
    elbow = base + l1 * np.array([np.cos(a1), np.sin(a1)])
    wrist = elbow + l2 * np.array([np.cos(a2), np.sin(a2)])
    tip = wrist + l3 * np.array([np.cos(a3), np.sin(a3)])
    return np.stack([base, elbow, wrist, tip])


def inverse_kinematics(tip: np.ndarray, cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    """Elbow-up IK with the last link pointing straight down."""
    l1, l2, l3 = cfg.links
    wrist = np.asarray(tip, dtype=np.float64) - np.array([0.0, l3])
    d = wrist - np.asarray(cfg.base)
    r2 = float(d @ d)
    c2 = (r2 - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    if not -1.0 <= c2 <= 1.0:
        raise ConfigError(f"tip {tuple(tip)} unreachable by arm {cfg.links}")
    q2 = np.arccos(c2)
    q1 = np.arctan2(d[1], d[0]) - np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2))
    q3 = np.pi / 2 - q1 - q2
    return np.array([q1, q2, q3])


def normalize_joints(q: np.ndarray, cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    lo = np.array([lim[0] for lim in cfg.joint_limits])
    hi = np.array([lim[1] for lim in cfg.joint_limits])
    return (q - lo) / (hi - lo)


def denormalize_joints(u: np.ndarray, cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    lo = np.array([lim[0] for lim in cfg.joint_limits])
    hi = np.array([lim[1] for lim in cfg.joint_limits])
    return lo + np.asarray(u, dtype=np.float64) * (hi - lo)


def tip_position(joint: np.ndarray, cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    """Gripper tip in pixels for a normalized joint vector."""
    return forward_kinematics(denormalize_joints(joint, cfg), cfg)[3]


# ---------------------------------------------------------------- rendering


def _pixel_centers(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c)  # xs, ys


def _segment_mask(xs, ys, p0, p1, radius: float) -> np.ndarray:
    d = p1 - p0
    L2 = float(d @ d)
    if L2 == 0:
        t = np.zeros_like(xs)
    else:
        t = np.clip(((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / L2, 0.0, 1.0)
    px = p0[0] + t * d[0] - xs
    py = p0[1] + t * d[1] - ys
    return px * px + py * py <= radius * radius


def render_background(cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    s = cfg.image_size
    img = np.empty((s, s, 3), dtype=np.uint8)
    img[:] = WALL
    img[cfg.table_y:] = TABLE
    bx, by = int(cfg.base[0]), int(cfg.base[1])
    img[by:cfg.table_y, bx - 3:bx + 3] = PEDESTAL
    return img


def draw_box(img: np.ndarray, center: np.ndarray, cfg: EnvConfig = EnvConfig()) -> None:
    half = cfg.box_size // 2
    x0 = int(np.rint(center[0])) - half
    y0 = int(np.rint(center[1])) - half
    for r in range(cfg.box_size):
        y = y0 + r
        if not 0 <= y < img.shape[0]:
            continue
        color = WOOD_GRAIN if r % 3 == 1 else WOOD
        xa, xb = max(x0, 0), min(x0 + cfg.box_size, img.shape[1])
        if xa < xb:
            img[y, xa:xb] = color


def draw_arm(img: np.ndarray, joint: np.ndarray, cfg: EnvConfig = EnvConfig()) -> None:
    q = denormalize_joints(joint, cfg)
    pts = forward_kinematics(q, cfg)
    xs, ys = _pixel_centers(cfg.image_size)
    mask = np.zeros(xs.shape, dtype=bool)
    for a, b in zip(pts[:-1], pts[1:]):
        mask |= _segment_mask(xs, ys, a, b, 1.0)
    tip = pts[3]
    spread = 1.5 + 2.0 * float(np.clip(joint[3], 0.0, 1.0))
    for side in (-1.0, 1.0):
        f0 = tip + np.array([side * spread, -1.0])
        f1 = tip + np.array([side * spread, 3.0])
        mask |= _segment_mask(xs, ys, f0, f1, 0.5)
    img[mask] = ARM
    cx, cy = int(np.floor(tip[0])), int(np.floor(tip[1]))
    s = cfg.image_size
    img[max(cy - 1, 0):min(cy + 2, s), max(cx - 1, 0):min(cx + 2, s)] = PALM


def render_frame(joint: np.ndarray, box_center_px: np.ndarray, cfg: EnvConfig = EnvConfig(),
                 draw_arm_layer: bool = True) -> np.ndarray:
    """Render one (3, H, W) float32 frame in [0, 1]. No anti-aliasing."""
    img = render_background(cfg)
    draw_box(img, np.asarray(box_center_px), cfg)
    if draw_arm_layer:
        draw_arm(img, np.asarray(joint, dtype=np.float64), cfg)
    return (img.transpose(2, 0, 1).astype(np.float32) / 255.0)


# ---------------------------------------------------------------- episodes


def _smoothstep(s: np.ndarray) -> np.ndarray:
    return s * s * (3 - 2 * s)


def scripted_tip_path(slot: int, start_tip: np.ndarray, cfg: EnvConfig = EnvConfig()):
    """Tip positions, gripper opening and carried-box centers for T steps."""
    box = cfg.box_center(slot)
    hover = box - np.array([0.0, cfg.hover_height])
    tips = np.empty((T_STEPS, 2))
    grip = np.ones(T_STEPS)
    boxes = np.tile(box, (T_STEPS, 1))
    for t in range(T_STEPS):
        if t < REACH_START:
            tips[t] = start_tip
        elif t < DESCEND_START:
            s = _smoothstep(np.array((t - REACH_START + 1) / (DESCEND_START - REACH_START)))
            tips[t] = start_tip + s * (hover - start_tip)
        elif t < GRASP_STEP:
            s = _smoothstep(np.array((t - DESCEND_START + 1) / (GRASP_STEP - DESCEND_START)))
            tips[t] = hover + s * (box - hover)
        elif t < LIFT_START:
            tips[t] = box
            grip[t] = 1.0 - (t - GRASP_STEP + 1) / (LIFT_START - GRASP_STEP)
        else:
            s = _smoothstep(np.array((t - LIFT_START + 1) / (T_STEPS - LIFT_START)))
            tips[t] = box + s * (hover - box)
            grip[t] = 0.0
            boxes[t] = tips[t]
    return tips, grip, boxes


class PickEnv:
    """Executes normalized joint vectors and renders the result.

    The box attaches to the gripper when the gripper closes within 3 px of
    the box center and detaches when it reopens.
    """

    def __init__(self, slot: int, seed: int = 0, cfg: EnvConfig = EnvConfig()):
        self.cfg = cfg
        self.slot = slot
        self.seed = seed
        self.box_rest = cfg.box_center(slot)
        self.box = self.box_rest.copy()
        self.held = False
        self.offset = np.zeros(2)

    def start_tip(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        jitter = rng.uniform(-self.cfg.start_jitter, self.cfg.start_jitter, size=2)
        return np.asarray(self.cfg.start_tip) + jitter

    def reset(self) -> tuple[np.ndarray, np.ndarray]:
        self.box = self.box_rest.copy()
        self.held = False
        q = inverse_kinematics(self.start_tip(), self.cfg)
        joint = normalize_joints(np.append(q, 1.0), self.cfg).astype(np.float32)
        return render_frame(joint, self.box, self.cfg), joint

    def step(self, joint: np.ndarray) -> np.ndarray:
        tip = tip_position(joint, self.cfg)
        closed = joint[3] < 0.5
        if not self.held and closed and np.linalg.norm(tip - self.box) <= 3.0:
            self.held = True
            self.offset = self.box - tip
        elif self.held and not closed:
            self.held = False
        if self.held:
            self.box = tip + self.offset
        return render_frame(joint, self.box, self.cfg)


def generate_episode(slot: int, seed: int, cfg: EnvConfig = EnvConfig()) -> Episode:
    """Reach, descend, grasp and lift toward ``slot``; deterministic in (slot, seed)."""
    world = PickEnv(slot, seed, cfg)
    tips, grip, _ = scripted_tip_path(slot, world.start_tip(), cfg)
    joints = np.empty((T_STEPS, N_JOINTS))
    for t in range(T_STEPS):
        joints[t, :3] = inverse_kinematics(tips[t], cfg)
        joints[t, 3] = grip[t]
    joints = normalize_joints(joints, cfg).astype(np.float32)
    if joints.min() < 0 or joints.max() > 1:
        raise ConfigError("scripted trajectory leaves the joint limits")
    first, _ = world.reset()
    frames = [first]
    boxes = [world.box.copy()]
    for t in range(1, T_STEPS):
        frames.append(world.step(joints[t]))
        boxes.append(world.box.copy())
    return Episode(frames=np.stack(frames), joints=joints, box_slot=slot,
                   box_center_px=cfg.box_center(slot), box_track=np.asarray(boxes, dtype=np.float32),
                   seed=seed)


def episode_seeds(seed: int, n_slots: int, per_slot: int) -> list[tuple[int, int]]:
    """(slot, episode seed) pairs derived from one dataset seed."""
    children = np.random.SeedSequence(seed).spawn(n_slots * per_slot)
    out = []
    for i, child in enumerate(children):
        out.append((i // per_slot, int(child.generate_state(1)[0])))
    return out


def generate_dataset(n_slots: int = 3, per_slot: int = 5, seed: int = 0,
                     cfg: EnvConfig = EnvConfig()) -> list[Episode]:
    return [generate_episode(slot, s, cfg) for slot, s in episode_seeds(seed, n_slots, per_slot)]


# ---------------------------------------------------------------- success


def attention_radius(cfg: EnvConfig = EnvConfig()) -> int:
    """Half-diagonal of the box sprite, rounded up (6 px for the 8 px box)."""
    return int(np.ceil(cfg.box_size / 2 * np.sqrt(2)))


def success_metric(joints: np.ndarray, box_center_px: np.ndarray, pt_td_seq: np.ndarray,
                   cfg: EnvConfig = EnvConfig(), radius: float | None = None) -> dict:
    """Score a rollout.

    ``pt_td_seq`` is (T, N_TD, 2) in normalized coordinates. Attention succeeds
    if some TD point stays within ``radius`` px of the resting box center for
    the whole second half of the pre-grasp phase. The pick succeeds if the tip
    is within 2 px of the box center at the grasp step, the gripper closes and
    the tip rises by at least half the hover height afterwards.
    """
    radius = attention_radius(cfg) if radius is None else radius
    box = np.asarray(box_center_px, dtype=np.float64)
    pts = np.asarray(pt_td_seq, dtype=np.float64) * cfg.image_size
    window = pts[GRASP_STEP // 2:GRASP_STEP]
    dist = np.linalg.norm(window - box, axis=-1)  # (steps, N_TD)
    attention_ok = bool(np.any(np.all(dist <= radius, axis=0)))

    joints = np.asarray(joints, dtype=np.float64)
    tip_grasp = tip_position(joints[GRASP_STEP], cfg)
    reached = np.linalg.norm(tip_grasp - box) <= 2.0
    closed = joints[LIFT_START - 1:, 3].max() < 0.5
    tip_end = tip_position(joints[-1], cfg)
    lifted = tip_grasp[1] - tip_end[1] >= cfg.hover_height / 2
    return {"attention_success": attention_ok,
            "pick_success": bool(reached and closed and lifted)}


# ---------------------------------------------------------------- storage

MAGIC = b"A3EP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIIIIiff2s2s")


def episode_to_bytes(ep: Episode) -> bytes:
    T, C, H, W = ep.frames.shape
    frames = np.rint(ep.frames * 255.0).astype(np.uint8)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, T, C, H, W, ep.joints.shape[1], ep.box_slot,
                          float(ep.box_center_px[0]), float(ep.box_center_px[1]), b"u1", b"f4")
    seed = struct.pack("<Q", ep.seed)
    return (header + seed + frames.tobytes(order="C")
            + ep.joints.astype("<f4").tobytes(order="C")
            + ep.box_track.astype("<f4").tobytes(order="C"))


def episode_from_bytes(blob: bytes) -> Episode:
    (magic, version, T, C, H, W, dj, slot, bx, by, ftag, jtag) = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC or version != FORMAT_VERSION or ftag != b"u1" or jtag != b"f4":
        raise CorruptDatasetError("bad episode header")
    off = _HEADER.size
    (seed,) = struct.unpack_from("<Q", blob, off)
    off += 8
    n_frames = T * C * H * W
    frames = np.frombuffer(blob, dtype=np.uint8, count=n_frames, offset=off).reshape(T, C, H, W)
    off += n_frames
    joints = np.frombuffer(blob, dtype="<f4", count=T * dj, offset=off).reshape(T, dj)
    off += 4 * T * dj
    track = np.frombuffer(blob, dtype="<f4", count=T * 2, offset=off).reshape(T, 2)
    return Episode(frames=frames.astype(np.float32) / 255.0, joints=joints.astype(np.float32),
                   box_slot=slot, box_center_px=np.array([bx, by], dtype=np.float64),
                   box_track=track.astype(np.float32), seed=seed)


def save_dataset(episodes: list[Episode], path, seed: int = 0,
                 cfg: EnvConfig = EnvConfig()) -> dict:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    slots: dict[str, int] = {}
    for i, ep in enumerate(episodes):
        name = f"episode_{i:03d}.a3ep"
        blob = episode_to_bytes(ep)
        (out / name).write_bytes(blob)
        entries.append({"file": name, "slot": ep.box_slot, "seed": ep.seed,
                        "sha256": hashlib.sha256(blob).hexdigest()})
        slots[str(ep.box_slot)] = slots.get(str(ep.box_slot), 0) + 1
    manifest = {"format_version": FORMAT_VERSION, "seed": seed, "episodes": entries,
                "slots": slots, "config_hash": cfg.config_hash(), "env_config": asdict(cfg)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_dataset(path, cfg: EnvConfig = EnvConfig()) -> tuple[dict, list[Episode]]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("config_hash") != cfg.config_hash():
        raise CorruptDatasetError("render config hash does not match this environment")
    episodes = []
    for entry in manifest["episodes"]:
        blob = (root / entry["file"]).read_bytes()
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise CorruptDatasetError(f"checksum mismatch in {entry['file']}")
        episodes.append(episode_from_bytes(blob))
    return manifest, episodes
