"""Trajectory data model: aligned EEF actions, anchor chunks, normalization,
line-delimited persistence, and the weighted heterogeneous mixture sampler.

Aligned action layout (one arm block is 10 numbers, arms concatenated):

    [x, y, z, r6d_0 .. r6d_5, gripper]

Continuous dims are the first 9 of each block; the gripper is a strictly
binary label and is excluded from normalization.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import ConfigError, DataError, InputError

ARM_DIM = 10
CONT_PER_ARM = 9
GRIPPER_THRESHOLD = 0.5
STD_FLOOR = 1e-6
SCHEMA_VERSION = "v1"

# raw-action layouts accepted by align_episode: per-arm field widths
CONVENTIONS = {
    "xyz_heading_gripper": 5,  # x y z heading g
    "xyz_euler_gripper": 7,    # x y z roll pitch yaw g
}


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class HardwareConfig:
    """Static description of one data-source domain."""

    domain_id: str
    embodiment_name: str
    num_arms: int
    proprio_dim: int
    control_freq_hz: float
    views: tuple[str, ...]  # first entry is the main view
    description_text: str = ""

    def __post_init__(self):
        if self.num_arms not in (1, 2):
            raise InputError(f"num_arms must be 1 or 2, got {self.num_arms}")
        if not self.views:
            raise InputError("views must be non-empty")
        if self.control_freq_hz <= 0:
            raise InputError("control_freq_hz must be positive")

    @property
    def main_view(self):
        return self.views[0]

    @property
    def aux_views(self):
        return self.views[1:]

    def to_dict(self):
        return {
            "domain_id": self.domain_id,
            "embodiment_name": self.embodiment_name,
            "num_arms": self.num_arms,
            "proprio_dim": self.proprio_dim,
            "control_freq_hz": self.control_freq_hz,
            "views": list(self.views),
            "description_text": self.description_text,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["views"] = tuple(d["views"])
        return cls(**d)


@dataclass
class Step:
    obs: dict[str, np.ndarray]
    proprio: np.ndarray
    task_id: int
    raw_action: np.ndarray
    aligned: np.ndarray | None = None


@dataclass
class Episode:
    domain_id: str
    freq_hz: float
    steps: list[Step]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.steps) < 2:
            raise InputError("episode needs at least 2 steps")

    def aligned_matrix(self):
        if any(s.aligned is None for s in self.steps):
            raise InputError("episode is not aligned; call align_episode first")
        return np.stack([s.aligned for s in self.steps])


@dataclass
class ActionChunk:
    """K anchor actions, rows in the aligned layout above."""

    anchors: np.ndarray
    arms: int

    @property
    def k(self):
        return self.anchors.shape[0]

    def xyz(self, arm=0):
        return self.anchors[:, arm * ARM_DIM : arm * ARM_DIM + 3]

    def rot6d(self, arm=0):
        return self.anchors[:, arm * ARM_DIM + 3 : arm * ARM_DIM + 9]

    def gripper(self, arm=0):
        return self.anchors[:, arm * ARM_DIM + 9]

    def validate(self):
        if self.anchors.ndim != 2 or self.anchors.shape[0] < 1:
            raise InputError("chunk must have at least one anchor")
        if self.anchors.shape[1] != self.arms * ARM_DIM:
            raise InputError("chunk width does not match arm count")
        for arm in range(self.arms):
            g = self.gripper(arm)
            if not np.all((g == 0.0) | (g == 1.0)):
                raise InputError("gripper labels must be strictly binary")
            geometry.rot6d_decode(self.rot6d(arm))
        return self


def make_aligned(per_arm):
    """Build one aligned row from [(xyz, rot6d, gripper), ...]."""
    parts = []
    for xyz, r6, g in per_arm:
        parts.append(np.concatenate([np.asarray(xyz, float), np.asarray(r6, float), [float(g)]]))
    return np.concatenate(parts)


def continuous_mask(arms, k=1):
    """Mask of shape (k, arms*ARM_DIM): 1 on continuous dims, 0 on grippers."""
    row = np.ones(arms * ARM_DIM)
    for arm in range(arms):
        row[arm * ARM_DIM + CONT_PER_ARM] = 0.0
    return np.tile(row, (k, 1))


def split_chunk_array(anchors, arms):
    """(K, arms*10) -> continuous (K, arms*9) and gripper (K, arms)."""
    cont = np.concatenate(
        [anchors[:, a * ARM_DIM : a * ARM_DIM + CONT_PER_ARM] for a in range(arms)], axis=1
    )
    grip = np.stack([anchors[:, a * ARM_DIM + CONT_PER_ARM] for a in range(arms)], axis=1)
    return cont, grip


def merge_chunk_array(cont, grip, arms):
    k = cont.shape[0]
    out = np.zeros((k, arms * ARM_DIM), dtype=cont.dtype)
    for a in range(arms):
        out[:, a * ARM_DIM : a * ARM_DIM + CONT_PER_ARM] = cont[:, a * CONT_PER_ARM : (a + 1) * CONT_PER_ARM]
        out[:, a * ARM_DIM + CONT_PER_ARM] = grip[:, a]
    return out


# ---------------------------------------------------------------------------
# action alignment


def _rot_from_euler_zyx(roll, pitch, yaw):
    rz = geometry.rot_from_axis_angle([0, 0, 1], yaw)
    ry = geometry.rot_from_axis_angle([0, 1, 0], pitch)
    rx = geometry.rot_from_axis_angle([1, 0, 0], roll)
    return rz @ ry @ rx


def align_raw_action(raw, arms, convention):
    """Convert one raw action vector into the aligned per-arm layout."""
    if convention not in CONVENTIONS:
        raise DataError(f"unknown raw-action convention {convention!r}")
    width = CONVENTIONS[convention]
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (arms * width,):
        raise DataError(
            f"raw action has shape {raw.shape}, expected ({arms * width},) for "
            f"{arms} arm(s) under {convention!r}"
        )
    blocks = []
    for a in range(arms):
        chunk = raw[a * width : (a + 1) * width]
        xyz = chunk[:3]
        if convention == "xyz_heading_gripper":
            rot = geometry.rot_about_z(chunk[3])
            g_raw = chunk[4]
        else:
            rot = _rot_from_euler_zyx(chunk[3], chunk[4], chunk[5])
            g_raw = chunk[6]
        grip = 1.0 if g_raw > GRIPPER_THRESHOLD else 0.0
        blocks.append((xyz, geometry.rot6d_encode(rot), grip))
    return make_aligned(blocks)


def align_episode(ep: Episode, arms: int, convention="xyz_heading_gripper") -> Episode:
    """Return a copy of `ep` with every step's aligned action filled in."""
    steps = [
        Step(
            obs=s.obs,
            proprio=s.proprio,
            task_id=s.task_id,
            raw_action=s.raw_action,
            aligned=align_raw_action(s.raw_action, arms, convention),
        )
        for s in ep.steps
    ]
    return Episode(ep.domain_id, ep.freq_hz, steps, dict(ep.metadata))


# ---------------------------------------------------------------------------
# anchor chunks


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def chunk_offsets(horizon_s, k, freq_hz):
    """Anchor offsets (in steps) relative to the query step, j = 1..K."""
    return np.array([_round_half_up(j * horizon_s * freq_hz / k) for j in range(1, k + 1)])


def extract_chunk(ep: Episode, n: int, horizon_s: float, k: int) -> ActionChunk:
    """Anchor chunk starting after step n; indices past the end repeat the
    final action (terminal padding)."""
    t = len(ep.steps)
    if not 0 <= n < t:
        raise InputError(f"start index {n} outside episode of length {t}")
    mat = ep.aligned_matrix()
    idx = np.clip(n + chunk_offsets(horizon_s, k, ep.freq_hz), 0, t - 1)
    arms = mat.shape[1] // ARM_DIM
    return ActionChunk(anchors=mat[idx], arms=arms)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormStats:
    """Per-domain mean/std over continuous action dims; grippers pass through."""

    arms: int
    mean: np.ndarray  # (arms*ARM_DIM,), zero at gripper slots
    std: np.ndarray   # (arms*ARM_DIM,), one at gripper slots

    def to_dict(self):
        return {"arms": self.arms, "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["arms"]), np.asarray(d["mean"], float), np.asarray(d["std"], float))


def compute_norm_stats(episodes_by_domain: dict[str, list[Episode]]) -> dict[str, NormStats]:
    stats = {}
    for domain, eps in episodes_by_domain.items():
        if not eps:
            raise DataError(f"domain {domain!r} has no episodes for stats")
        mats = np.concatenate([ep.aligned_matrix() for ep in eps], axis=0)
        if mats.shape[0] < 2:
            raise DataError(f"domain {domain!r} needs at least 2 samples for stats")
        arms = mats.shape[1] // ARM_DIM
        mean = mats.mean(axis=0)
        std = np.maximum(mats.std(axis=0), STD_FLOOR)
        mask = continuous_mask(arms)[0]
        mean = mean * mask
        std = std * mask + (1.0 - mask)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise DataError(f"non-finite stats for domain {domain!r}")
        stats[domain] = NormStats(arms=arms, mean=mean, std=std)
    return stats


def apply_norm(actions, stats: NormStats):
    """Standardize continuous dims; gripper dims are returned unchanged."""
    return (np.asarray(actions, float) - stats.mean) / stats.std


def invert_norm(actions, stats: NormStats):
    return np.asarray(actions, float) * stats.std + stats.mean


def export_stats_csv(stats: dict[str, NormStats], path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["domain", "dim", "mean", "std"])
        for domain in sorted(stats):
            s = stats[domain]
            for i in range(s.mean.shape[0]):
                w.writerow([domain, i, repr(float(s.mean[i])), repr(float(s.std[i]))])


# ---------------------------------------------------------------------------
# persistence (line-delimited JSON, schema v1)


def _vec(a):
    return [float(x) for x in np.asarray(a).reshape(-1)]


def save_episodes(path, episodes: list[Episode]):
    with open(path, "w") as f:
        f.write(json.dumps({"record": "file", "schema": SCHEMA_VERSION}) + "\n")
        for ep in episodes:
            dims = {
                "proprio": int(ep.steps[0].proprio.shape[0]),
                "raw_action": int(ep.steps[0].raw_action.shape[0]),
                "aligned": None if ep.steps[0].aligned is None else int(ep.steps[0].aligned.shape[0]),
                "obs": {v: int(x.shape[0]) for v, x in ep.steps[0].obs.items()},
            }
            header = {
                "record": "episode",
                "domain_id": ep.domain_id,
                "freq_hz": float(ep.freq_hz),
                "dims": dims,
                "views": list(ep.steps[0].obs.keys()),
                "n_steps": len(ep.steps),
                "metadata": ep.metadata,
            }
            f.write(json.dumps(header) + "\n")
            for s in ep.steps:
                rec = {
                    "record": "step",
                    "obs": {v: _vec(x) for v, x in s.obs.items()},
                    "proprio": _vec(s.proprio),
                    "task_id": int(s.task_id),
                    "raw_action": _vec(s.raw_action),
                    "aligned": None if s.aligned is None else _vec(s.aligned),
                }
                f.write(json.dumps(rec) + "\n")


def load_episodes(path) -> list[Episode]:
    episodes: list[Episode] = []
    with open(path) as f:
        lines = f.readlines()
    if not lines:
        raise DataError(f"{path}: empty file, missing schema header")

    def parse(i):
        try:
            return json.loads(lines[i])
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: line {i + 1}: malformed record ({e.msg})") from e

    head = parse(0)
    if head.get("record") != "file" or head.get("schema") != SCHEMA_VERSION:
        raise DataError(
            f"{path}: line 1: schema mismatch, expected {SCHEMA_VERSION!r}, got {head.get('schema')!r}"
        )
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        header = parse(i)
        if header.get("record") != "episode":
            raise DataError(f"{path}: line {i + 1}: expected episode header")
        n_steps = int(header["n_steps"])
        if i + n_steps > len(lines) - 1:
            raise DataError(
                f"{path}: line {len(lines)}: truncated episode, expected "
                f"{n_steps} steps after line {i + 1}"
            )
        steps = []
        for j in range(n_steps):
            rec = parse(i + 1 + j)
            if rec.get("record") != "step":
                raise DataError(f"{path}: line {i + 2 + j}: expected step record")
            steps.append(
                Step(
                    obs={v: np.asarray(x, float) for v, x in rec["obs"].items()},
                    proprio=np.asarray(rec["proprio"], float),
                    task_id=int(rec["task_id"]),
                    raw_action=np.asarray(rec["raw_action"], float),
                    aligned=None if rec["aligned"] is None else np.asarray(rec["aligned"], float),
                )
            )
        episodes.append(
            Episode(header["domain_id"], float(header["freq_hz"]), steps, header.get("metadata", {}))
        )
        i += 1 + n_steps
    return episodes


# ---------------------------------------------------------------------------
# mixture sampling


@dataclass(frozen=True)
class MixtureSpec:
    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        ids = [d for d, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigError("mixture domain_ids must be distinct")
        for d, w in self.entries:
            if not 0.0 < w <= 1.0:
                raise ConfigError(f"mixture weight for {d!r} must be in (0, 1], got {w}")
        total = sum(w for _, w in self.entries)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights must sum to 1 within 1e-9, got {total!r}")

    @property
    def domain_ids(self):
        return [d for d, _ in self.entries]

    @property
    def weights(self):
        return np.array([w for _, w in self.entries])

    @classmethod
    def from_dict(cls, d: dict[str, float]):
        return cls(tuple(sorted(d.items())))


@dataclass
class Sample:
    domain_id: str
    obs: dict[str, np.ndarray]
    proprio: np.ndarray
    task_id: int
    chunk: ActionChunk


class MixtureSampler:
    """i.i.d. weighted domain draws, then uniform episode and start index.

    Deterministic given the generator's seed; state save/restore supports
    training resume.  Holds a private rng: use one sampler per loop.
    """

    def __init__(self, mix: MixtureSpec, datasets: dict[str, list[Episode]], rng,
                 horizon_s=4.0, k=30):
        for domain in mix.domain_ids:
            if domain not in datasets or not datasets[domain]:
                raise ConfigError(f"mixture entry {domain!r} has no dataset")
        self.mix = mix
        self.rng = rng
        self.horizon_s = horizon_s
        self.k = k
        self._cum = np.cumsum(mix.weights)
        self._domains = mix.domain_ids
        self._episodes = {d: list(datasets[d]) for d in self._domains}
        self._mats = {d: [ep.aligned_matrix() for ep in datasets[d]] for d in self._domains}
        self._offsets = {
            d: chunk_offsets(horizon_s, k, datasets[d][0].freq_hz) for d in self._domains
        }

    def draw(self) -> Sample:
        di = int(np.searchsorted(self._cum, self.rng.random(), side="right"))
        di = min(di, len(self._domains) - 1)
        domain = self._domains[di]
        eps = self._episodes[domain]
        ei = int(self.rng.integers(len(eps)))
        ep = eps[ei]
        n = int(self.rng.integers(len(ep.steps)))
        mat = self._mats[domain][ei]
        idx = np.clip(n + self._offsets[domain], 0, mat.shape[0] - 1)
        chunk = ActionChunk(anchors=mat[idx], arms=mat.shape[1] // ARM_DIM)
        step = ep.steps[n]
        return Sample(domain, step.obs, step.proprio, step.task_id, chunk)

    def __iter__(self):
        while True:
            yield self.draw()

    def state(self):
        return json.loads(json.dumps(self.rng.bit_generator.state))

    def set_state(self, state):
        self.rng.bit_generator.state = state


def mixture_sampler(mix: MixtureSpec, datasets, rng, horizon_s=4.0, k=30):
    """Stream of samples; see MixtureSampler."""
    return iter(MixtureSampler(mix, datasets, rng, horizon_s=horizon_s, k=k))
