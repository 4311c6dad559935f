"""Synthetic heterogeneous-embodiment suite: planar kinematic chains with
differing DoF, camera transforms, control rates, and arm counts, plus
scripted experts and closed-loop rollout evaluation.

The world is planar; actions are lifted to 3D (z = 0, rotation about z) so
the full 6D rotation codec is exercised end to end.  Control is in EEF
space via damped resolved-rate steps, which keeps the aligned action space
directly executable on every kinematics in the suite.

Observations are noisy camera-projected keypoints (joints, EEF, goals)
plus binary task flags; views differ per domain by a 2D similarity
transform and noise level.  Proprioception is the cos/sin of each joint
angle, so its width varies with DoF and arm count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dataset, geometry
from .dataset import ARM_DIM, Episode, HardwareConfig, Step
from .errors import DataError, InputError

G_MAX = 3            # goal slots per arm in every observation
V_MAX = 1.0          # workspace units / s
OMEGA_MAX = 2.5      # rad / s heading rate for redundant arms
EPS_GOAL = 0.05
DLS_DAMPING = 0.05
EXPERT_SPEED = 0.75  # nominal fraction of V_MAX
HOLD_SECONDS = 0.3
MAX_EPISODE_SECONDS = 10.0


def wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class CameraModel:
    """2D similarity transform plus isotropic observation noise."""

    theta: float
    tx: float
    ty: float
    scale: float
    sigma_obs: float

    def __post_init__(self):
        if self.sigma_obs < 0:
            raise InputError("sigma_obs must be >= 0")

    def project(self, points):
        c, s = math.cos(self.theta), math.sin(self.theta)
        r = np.array([[c, -s], [s, c]])
        return self.scale * (np.asarray(points) @ r.T) + np.array([self.tx, self.ty])

    def to_dict(self):
        return {"theta": self.theta, "tx": self.tx, "ty": self.ty,
                "scale": self.scale, "sigma_obs": self.sigma_obs}


@dataclass(frozen=True)
class EmbodimentSpec:
    name: str
    arms: int
    links_per_arm: int
    link_lengths: tuple[float, ...]
    joint_limits: tuple[float, ...]  # symmetric bounds; inf = unbounded base
    control_freq_hz: float
    base_offsets: tuple[tuple[float, float], ...]
    cameras: dict[str, CameraModel]
    v_max: float = V_MAX
    eps_goal: float = EPS_GOAL

    def __post_init__(self):
        if self.links_per_arm < 1:
            raise InputError("need at least 1 link per arm")
        if any(l <= 0 for l in self.link_lengths):
            raise InputError("link lengths must be positive")

    @property
    def reach(self):
        return float(sum(self.link_lengths))

    @property
    def views(self):
        return tuple(self.cameras.keys())


@dataclass(frozen=True)
class Task:
    """Per-arm goal waypoints; each goal is (xy, required gripper state)."""

    goals: tuple[tuple[tuple[float, float, int], ...], ...]  # [arm][goal] = (x, y, grip)
    eps_goal: float = EPS_GOAL

    @property
    def n_goals(self):
        return len(self.goals[0])


@dataclass
class WorldState:
    joints: np.ndarray        # (arms, links)
    gripper: np.ndarray       # (arms,) of {0, 1}
    task: Task
    goals_done: np.ndarray    # (arms, n_goals) bool: held/placed flags

    def copy(self):
        return WorldState(self.joints.copy(), self.gripper.copy(), self.task,
                          self.goals_done.copy())


# ---------------------------------------------------------------------------
# kinematics


def fk_points(spec: EmbodimentSpec, joints, arm):
    """Keypoints of one arm: base, every joint, EEF ((links+1, 2))."""
    th = np.asarray(joints)[arm]
    angles = np.cumsum(th)
    pts = np.zeros((spec.links_per_arm + 1, 2))
    pts[0] = spec.base_offsets[arm]
    steps = np.stack([np.cos(angles), np.sin(angles)], axis=1) * np.asarray(spec.link_lengths)[:, None]
    pts[1:] = pts[0] + np.cumsum(steps, axis=0)
    return pts


def fk(spec: EmbodimentSpec, joints):
    """EEF pose per arm: list of ((x, y), heading); heading = sum of joints."""
    joints = np.asarray(joints, dtype=np.float64)
    limits = np.asarray(spec.joint_limits)
    if np.any(np.abs(joints) > limits + 1e-12):
        raise InputError("joints outside limits")
    out = []
    for arm in range(spec.arms):
        pts = fk_points(spec, joints, arm)
        out.append((pts[-1], float(np.sum(joints[arm]))))
    return out


def jacobian(spec: EmbodimentSpec, joints, arm):
    """Analytic planar position Jacobian (2 x links) for one arm."""
    th = np.asarray(joints)[arm]
    angles = np.cumsum(th)
    lengths = np.asarray(spec.link_lengths)
    dx = -lengths * np.sin(angles)
    dy = lengths * np.cos(angles)
    # ∂p/∂θ_j sums contributions of links j..end
    jx = np.cumsum(dx[::-1])[::-1]
    jy = np.cumsum(dy[::-1])[::-1]
    return np.stack([jx, jy])


# ---------------------------------------------------------------------------
# suite construction


_FAMILIES = {
    "planar2": dict(arms=1, links=2, lengths=(1.0, 0.8)),
    "planar3": dict(arms=1, links=3, lengths=(0.9, 0.7, 0.5)),
    "planar4": dict(arms=1, links=4, lengths=(0.7, 0.6, 0.5, 0.45)),
    "dual2": dict(arms=2, links=2, lengths=(0.8, 0.65)),
    "planar3v2": dict(arms=1, links=3, lengths=(0.85, 0.75, 0.55)),
}

# (domain_id, family, freq, [(view, theta, tx, ty, scale, sigma)])
_SUITE_TABLE = [
    ("p2-top30", "planar2", 30.0, [("top", 0.0, 0.0, 0.0, 1.0, 0.02)]),
    ("p3-left30", "planar3", 30.0, [("left", 0.9, 0.25, 0.1, 1.0, 0.03)]),
    ("p3-right30", "planar3", 30.0, [("right", -0.9, -0.25, -0.1, 1.0, 0.03)]),
    ("p4-top15", "planar4", 15.0, [("top", 0.15, 0.1, -0.2, 1.05, 0.05)]),
    ("dual-front30", "dual2", 30.0, [("front", math.pi, 0.0, 0.3, 0.95, 0.03)]),
    ("p3-oblique10", "planar3", 10.0, [("oblique", 2.2, 0.3, 0.3, 1.1, 0.06)]),
    ("p4-wrist30", "planar4", 30.0,
     [("wrist", 1.3, -0.2, 0.2, 1.25, 0.04), ("top", 0.0, 0.0, 0.0, 1.0, 0.04)]),
]

_HOLDOUT_ROW = ("p3-side20", "planar3v2", 20.0, [("side", -1.7, 0.15, -0.25, 1.05, 0.01)])

# default sampling weights over the 7 suite domains, by position
DEFAULT_WEIGHTS = (0.4, 0.15, 0.15, 0.1, 0.03, 0.1, 0.07)


def _build_domain(row, family_lengths):
    domain_id, family, freq, views = row
    fam = _FAMILIES[family]
    links, arms = fam["links"], fam["arms"]
    lengths = family_lengths[family]
    if arms == 2:
        bases = ((-0.55, 0.0), (0.55, 0.0))
    else:
        bases = ((0.0, 0.0),)
    limits = tuple([np.inf] + [2.8] * (links - 1))
    cameras = {v: CameraModel(th, tx, ty, s, sg) for v, th, tx, ty, s, sg in views}
    spec = EmbodimentSpec(
        name=family, arms=arms, links_per_arm=links, link_lengths=lengths,
        joint_limits=limits, control_freq_hz=freq, base_offsets=bases, cameras=cameras,
    )
    hw = HardwareConfig(
        domain_id=domain_id,
        embodiment_name=family,
        num_arms=arms,
        proprio_dim=2 * links * arms,
        control_freq_hz=freq,
        views=spec.views,
        description_text=(
            f"embodiment {family} with {arms} arm(s) of {links} links; "
            f"main view {views[0][0]}; control rate {freq:g} hz"
        ),
    )
    return spec, hw


def _family_lengths(seed):
    rng = np.random.default_rng(seed)
    out = {}
    for fam, d in _FAMILIES.items():
        jitter = 1.0 + 0.05 * rng.uniform(-1.0, 1.0, size=len(d["lengths"]))
        out[fam] = tuple(float(l * j) for l, j in zip(d["lengths"], jitter))
    return out


def make_suite(seed):
    """Seven training domains; deterministic given seed.  Domains 2 and 3
    share kinematics and differ only in camera transforms."""
    lengths = _family_lengths(seed)
    return [_build_domain(row, lengths) for row in _SUITE_TABLE]


def make_holdout_domain(seed):
    """Eighth embodiment used for adaptation experiments (unseen in pretraining)."""
    return _build_domain(_HOLDOUT_ROW, _family_lengths(seed))


def default_mixture(suite):
    return dataset.MixtureSpec(tuple((hw.domain_id, w) for (_, hw), w in zip(suite, DEFAULT_WEIGHTS)))


# ---------------------------------------------------------------------------
# tasks / state


def sample_task(spec: EmbodimentSpec, rng, n_goals=None) -> Task:
    """Goal waypoints in the reachable annulus.  The first goal's bearing is
    uniform on the circle and later goals are placed relative to it, so the
    task distribution is rotation invariant while goal-to-goal arcs stay
    short enough for 2-6 s episodes."""
    if n_goals is None:
        n_goals = int(rng.integers(1, G_MAX + 1))
    goals = []
    for arm in range(spec.arms):
        base = np.asarray(spec.base_offsets[arm])
        arm_goals = []
        grip = 1
        angle = rng.uniform(-np.pi, np.pi)
        for gi in range(n_goals):
            if gi > 0:
                angle = angle + rng.uniform(-0.9, 0.9)
            r = rng.uniform(0.35, 0.85) * spec.reach
            xy = base + r * np.array([np.cos(angle), np.sin(angle)])
            arm_goals.append((float(xy[0]), float(xy[1]), grip))
            grip = 1 - grip
        goals.append(tuple(arm_goals))
    return Task(goals=tuple(goals), eps_goal=spec.eps_goal)


def reset_state(spec: EmbodimentSpec, task: Task, rng) -> WorldState:
    """Random home configuration with a rotation-symmetric EEF distribution."""
    joints = np.zeros((spec.arms, spec.links_per_arm))
    for arm in range(spec.arms):
        for _ in range(64):
            th = np.concatenate(
                [rng.uniform(-np.pi, np.pi, size=1),
                 rng.uniform(-1.2, 1.2, size=spec.links_per_arm - 1)]
            )
            joints[arm] = th
            eef = fk_points(spec, joints, arm)[-1]
            if np.linalg.norm(eef - spec.base_offsets[arm]) >= 0.4 * spec.reach:
                break
    return WorldState(
        joints=joints,
        gripper=np.zeros(spec.arms, dtype=int),
        task=task,
        goals_done=np.zeros((spec.arms, task.n_goals), dtype=bool),
    )


def task_success(state: WorldState) -> bool:
    return bool(state.goals_done.all())


def _pending_goal(state: WorldState, arm):
    for gi in range(state.task.n_goals):
        if not state.goals_done[arm, gi]:
            return gi
    return None


# ---------------------------------------------------------------------------
# observation


def obs_dim(spec: EmbodimentSpec):
    per_arm_pts = spec.links_per_arm + 1 + G_MAX
    return spec.arms * per_arm_pts * 2 + spec.arms * (1 + 2 * G_MAX)


def observe(spec: EmbodimentSpec, state: WorldState, view: str, rng) -> np.ndarray:
    """Camera-projected keypoints (noisy) plus raw binary task flags."""
    if view not in spec.cameras:
        raise InputError(f"unknown view {view!r} for embodiment {spec.name}")
    cam = spec.cameras[view]
    points = []
    flags = []
    for arm in range(spec.arms):
        points.append(fk_points(spec, state.joints, arm))
        goals = state.task.goals[arm]
        slot_goals = [goals[min(i, len(goals) - 1)] for i in range(G_MAX)]
        points.append(np.array([[g[0], g[1]] for g in slot_goals]))
        flags.append([float(state.gripper[arm])])
        for i in range(G_MAX):
            if i < len(goals):
                required = float(goals[i][2])
                done = float(state.goals_done[arm, i])
            else:
                required, done = 0.0, 1.0
            flags.append([required, done])
    coords = cam.project(np.concatenate(points, axis=0))
    coords = coords + rng.normal(0.0, cam.sigma_obs, size=coords.shape)
    return np.concatenate([coords.reshape(-1), np.concatenate(flags)])


def observe_all(spec: EmbodimentSpec, state: WorldState, rng):
    return {v: observe(spec, state, v, rng) for v in spec.views}


def proprio_vector(spec: EmbodimentSpec, state: WorldState):
    th = state.joints.reshape(-1)
    return np.concatenate([np.cos(th), np.sin(th)])


# ---------------------------------------------------------------------------
# dynamics


def _dls_step(j, err, damping=DLS_DAMPING):
    jjt = j @ j.T + (damping ** 2) * np.eye(j.shape[0])
    return j.T @ np.linalg.solve(jjt, err)


HEADING_GAIN = 0.5
CENTERING_GAIN = 0.12


def _priority_step(jpos, e_pos, dphi, damping, joints):
    """Position-priority resolved rate: heading tracking and distal-joint
    centering act only inside the position nullspace, so they can neither
    stall position convergence nor curl the arm into its limits."""
    n = jpos.shape[1]
    jjt = jpos @ jpos.T + (damping ** 2) * np.eye(2)
    jpinv = jpos.T @ np.linalg.inv(jjt)
    dth = jpinv @ e_pos
    z = np.zeros(n)
    if dphi is not None:
        z += HEADING_GAIN * dphi / n
    z[1:] -= CENTERING_GAIN * joints[1:]
    if np.any(z):
        nproj = np.eye(n) - jpinv @ jpos
        dth = dth + nproj @ z
    return dth


def step(spec: EmbodimentSpec, state: WorldState, action_row) -> WorldState:
    """Advance one control step toward a commanded aligned action row.

    Resolved-rate (damped pseudo-inverse) EEF control; per-step EEF
    displacement is clamped to v_max/freq per arm.  Arms with more than two
    links also track the commanded heading, rate-limited by OMEGA_MAX.
    """
    action_row = np.asarray(action_row, dtype=np.float64)
    if not np.all(np.isfinite(action_row)):
        raise InputError("non-finite action")
    if action_row.shape != (spec.arms * ARM_DIM,):
        raise InputError(f"action row must have shape ({spec.arms * ARM_DIM},)")
    dt = 1.0 / spec.control_freq_hz
    disp_limit = spec.v_max * dt
    new = state.copy()
    limits = np.asarray(spec.joint_limits)
    for arm in range(spec.arms):
        row = action_row[arm * ARM_DIM : (arm + 1) * ARM_DIM]
        cmd_xy = row[:2]
        cmd_heading = geometry.heading_from_rot(geometry.rot6d_decode(row[3:9]))
        cmd_grip = int(row[9] > 0.5)

        th = new.joints[arm].copy()
        cur_xy = fk_points(spec, new.joints, arm)[-1]
        err = cmd_xy - cur_xy
        dist = np.linalg.norm(err)
        if dist > disp_limit:
            err = err * (disp_limit / dist)
        target_xy = cur_xy + err
        dphi = wrap_angle(cmd_heading - float(np.sum(th)))
        dphi = float(np.clip(dphi, -OMEGA_MAX * dt, OMEGA_MAX * dt))
        target_heading = float(np.sum(th)) + dphi

        # converge onto the clamped target with damped Gauss-Newton steps so
        # the commanded displacement is realized exactly when reachable;
        # damping shrinks with the residual to crawl out of fold singularities
        th_new = th.copy()
        prev_phi_err = None
        for _ in range(40):
            new.joints[arm] = th_new
            eef = fk_points(spec, new.joints, arm)[-1]
            delta_xy = target_xy - eef
            lam = max(1e-4, min(DLS_DAMPING, 2.0 * np.linalg.norm(delta_xy)))
            delta_phi = None
            phi_err = 0.0
            if spec.links_per_arm >= 3:
                delta_phi = wrap_angle(target_heading - float(np.sum(th_new)))
                phi_err = abs(delta_phi)
            if np.linalg.norm(delta_xy) < 1e-10 and (
                phi_err < 1e-9 or (prev_phi_err is not None and prev_phi_err - phi_err < 1e-6)
            ):
                break
            prev_phi_err = phi_err
            dth = _priority_step(jacobian(spec, new.joints, arm), delta_xy, delta_phi, lam, th_new)
            th_new = np.clip(th_new + dth, -limits, limits)

        # strict displacement guard (clipping or stalls can only undershoot,
        # but keep the invariant airtight)
        for _ in range(16):
            new.joints[arm] = th_new
            disp = np.linalg.norm(fk_points(spec, new.joints, arm)[-1] - cur_xy)
            if disp <= disp_limit + 1e-12:
                break
            scale = 0.9 * disp_limit / disp
            th_new = np.clip(th + (th_new - th) * scale, -limits, limits)
        else:
            new.joints[arm] = th
        new.gripper[arm] = cmd_grip

        gi = _pending_goal(new, arm)
        if gi is not None:
            gx, gy, grequired = new.task.goals[arm][gi]
            eef = fk_points(spec, new.joints, arm)[-1]
            if np.linalg.norm(eef - np.array([gx, gy])) <= new.task.eps_goal and cmd_grip == grequired:
                new.goals_done[arm, gi] = True
    return new


# ---------------------------------------------------------------------------
# scripted expert


class _PolarPath:
    """Piecewise path interpolated in polar coordinates around an arm base,
    so it stays inside the reachable annulus."""

    SAMPLES = 48

    def __init__(self, base, waypoints):
        self.base = np.asarray(base)
        pts = [np.asarray(w) for w in waypoints]
        samples = [pts[0]]
        for a, b in zip(pts[:-1], pts[1:]):
            ra, aa = self._polar(a)
            rb, ab = self._polar(b)
            da = wrap_angle(ab - aa)
            for i in range(1, self.SAMPLES + 1):
                s = i / self.SAMPLES
                r = ra + s * (rb - ra)
                ang = aa + s * da
                samples.append(self.base + r * np.array([np.cos(ang), np.sin(ang)]))
        self.samples = np.array(samples)
        deltas = np.linalg.norm(np.diff(self.samples, axis=0), axis=1)
        self.cum = np.concatenate([[0.0], np.cumsum(deltas)])
        self.total = float(self.cum[-1])

    def _polar(self, p):
        d = p - self.base
        return float(np.linalg.norm(d)), float(math.atan2(d[1], d[0]))

    def at(self, arclen):
        s = np.clip(arclen, 0.0, self.total)
        i = int(np.searchsorted(self.cum, s, side="right")) - 1
        i = min(i, len(self.samples) - 2)
        seg = self.cum[i + 1] - self.cum[i]
        frac = 0.0 if seg <= 0 else (s - self.cum[i]) / seg
        return self.samples[i] + frac * (self.samples[i + 1] - self.samples[i])

    def tangent(self, arclen):
        p0 = self.at(max(0.0, arclen - 1e-3))
        p1 = self.at(min(self.total, arclen + 1e-3))
        d = p1 - p0
        if np.linalg.norm(d) < 1e-12:
            return 0.0
        return math.atan2(d[1], d[0])


class _ArmPlanner:
    """Tracks goals for one arm: polar path segments with jittered via points,
    slow-down near goals, and gripper toggles at arrival."""

    APPROACH = 0.25
    SLOW_FACTOR = 0.5

    def __init__(self, spec, arm, rng, jitter=0.05, speed_jitter=0.1):
        self.spec = spec
        self.arm = arm
        self.rng = rng
        self.jitter = jitter
        self.speed = EXPERT_SPEED * spec.v_max * (1.0 + speed_jitter * rng.uniform(-1, 1))
        self.path = None
        self.progress = 0.0
        self.goal_index = None

    def _plan(self, state):
        gi = _pending_goal(state, self.arm)
        self.goal_index = gi
        if gi is None:
            self.path = None
            return
        start = fk_points(self.spec, state.joints, self.arm)[-1]
        gx, gy, _ = state.task.goals[self.arm][gi]
        goal = np.array([gx, gy])
        mid = 0.5 * (start + goal) + self.rng.normal(0.0, self.jitter, size=2)
        self.path = _PolarPath(self.spec.base_offsets[self.arm], [start, mid, goal])
        self.progress = 0.0

    def command(self, state):
        """(xy, heading, grip) command for the next control step."""
        gi = _pending_goal(state, self.arm)
        if gi is None:
            eef = fk_points(self.spec, state.joints, self.arm)[-1]
            heading = float(np.sum(state.joints[self.arm]))
            return eef, heading, int(state.gripper[self.arm])
        if gi != self.goal_index or self.path is None:
            self._plan(state)
        gx, gy, grequired = state.task.goals[self.arm][gi]
        goal = np.array([gx, gy])
        eef = fk_points(self.spec, state.joints, self.arm)[-1]
        dist_goal = np.linalg.norm(eef - goal)
        dt = 1.0 / self.spec.control_freq_hz
        if dist_goal <= self.APPROACH:
            cmd_xy = goal
            heading = self.path.tangent(self.path.total) if self.path else 0.0
        else:
            speed = self.speed * (self.SLOW_FACTOR if dist_goal < 1.5 * self.APPROACH else 1.0)
            self.progress = min(self.path.total, self.progress + speed * dt)
            cmd_xy = self.path.at(self.progress)
            heading = self.path.tangent(self.progress)
        grip = grequired if dist_goal <= 0.8 * state.task.eps_goal else int(state.gripper[self.arm])
        return cmd_xy, heading, grip


def _command_row(spec, commands):
    row = np.zeros(spec.arms * ARM_DIM)
    for arm, (xy, heading, grip) in enumerate(commands):
        block = row[arm * ARM_DIM : (arm + 1) * ARM_DIM]
        block[0:2] = xy
        block[3:9] = geometry.rot6d_encode(geometry.rot_about_z(heading))
        block[9] = float(grip)
    return row


def _achieved_row(spec, state):
    row = np.zeros(spec.arms * 5)
    for arm in range(spec.arms):
        eef, heading = fk(spec, state.joints)[arm]
        row[arm * 5 : arm * 5 + 5] = [eef[0], eef[1], 0.0, heading, float(state.gripper[arm])]
    return row


def scripted_expert(spec: EmbodimentSpec, hw: HardwareConfig, task: Task, rng) -> Episode:
    """Generate one successful demonstration; raises DataError if the task
    cannot be completed (unreachable or timed out)."""
    for arm in range(spec.arms):
        base = np.asarray(spec.base_offsets[arm])
        for gx, gy, _ in task.goals[arm]:
            r = np.linalg.norm(np.array([gx, gy]) - base)
            if not 0.05 * spec.reach <= r <= 0.95 * spec.reach:
                raise DataError("task goal outside reachable annulus")
    state = reset_state(spec, task, rng)
    planners = [_ArmPlanner(spec, arm, rng) for arm in range(spec.arms)]
    steps: list[Step] = []
    max_steps = int(MAX_EPISODE_SECONDS * spec.control_freq_hz)
    hold = max(2, round(HOLD_SECONDS * spec.control_freq_hz))
    held = 0
    for _ in range(max_steps):
        obs = observe_all(spec, state, rng)
        prop = proprio_vector(spec, state)
        cmds = [p.command(state) for p in planners]
        state = step(spec, state, _command_row(spec, cmds))
        steps.append(
            Step(obs=obs, proprio=prop, task_id=task.n_goals - 1,
                 raw_action=_achieved_row(spec, state))
        )
        if task_success(state):
            held += 1
            if held >= hold:
                break
    if not task_success(state):
        raise DataError(f"expert failed to complete task on {hw.domain_id}")
    ep = Episode(hw.domain_id, spec.control_freq_hz, steps,
                 metadata={"n_goals": task.n_goals, "task": [list(map(list, g)) for g in task.goals]})
    return dataset.align_episode(ep, arms=spec.arms, convention="xyz_heading_gripper")


def generate_dataset(spec, hw, n_episodes, rng):
    """n successful expert episodes with freshly sampled tasks."""
    out = []
    while len(out) < n_episodes:
        task = sample_task(spec, rng)
        out.append(scripted_expert(spec, hw, task, rng))
    return out


# ---------------------------------------------------------------------------
# closed-loop evaluation


@dataclass
class RolloutResult:
    success: bool
    steps: int
    failure: str | None = None
    eef_trace: list = field(default_factory=list)


def expert_chunk_policy(spec: EmbodimentSpec, task: Task, rng, k=30, horizon_s=4.0):
    """Oracle policy closure: emits the scripted expert's intended anchors."""
    planners = [_ArmPlanner(spec, arm, rng, jitter=0.0, speed_jitter=0.0) for arm in range(spec.arms)]

    def policy(state: WorldState):
        anchors = np.zeros((k, spec.arms * ARM_DIM))
        for arm, planner in enumerate(planners):
            gi = _pending_goal(state, arm)
            eef = fk_points(spec, state.joints, arm)[-1]
            if gi is None:
                heading = float(np.sum(state.joints[arm]))
                for j in range(k):
                    block = anchors[j, arm * ARM_DIM : (arm + 1) * ARM_DIM]
                    block[0:2] = eef
                    block[3:9] = geometry.rot6d_encode(geometry.rot_about_z(heading))
                    block[9] = float(state.gripper[arm])
                continue
            pts = [eef] + [np.array(g[:2]) for g in state.task.goals[arm][gi:]]
            grips = [int(g[2]) for g in state.task.goals[arm][gi:]]
            path = _PolarPath(spec.base_offsets[arm], pts)
            # arc length at which each remaining goal is reached
            goal_arcs = []
            acc = 0.0
            for seg in range(len(pts) - 1):
                acc = (seg + 1) / (len(pts) - 1) * path.total
                goal_arcs.append(acc)
            speed = planners[arm].speed
            cur_grip = int(state.gripper[arm])
            for j in range(k):
                t = (j + 1) * horizon_s / k
                s = min(path.total, speed * t)
                xy = path.at(s)
                heading = path.tangent(s)
                g = cur_grip
                for arc, want in zip(goal_arcs, grips):
                    if s >= arc - 1e-9:
                        g = want
                block = anchors[j, arm * ARM_DIM : (arm + 1) * ARM_DIM]
                block[0:2] = xy
                block[3:9] = geometry.rot6d_encode(geometry.rot_about_z(heading))
                block[9] = float(g)
        return dataset.ActionChunk(anchors=anchors, arms=spec.arms)

    return policy


def rollout(policy, spec: EmbodimentSpec, task: Task, rng, max_steps=300,
            replan_every=6, k=30, horizon_s=4.0) -> RolloutResult:
    """Execute the first `replan_every` anchors of each predicted chunk, then
    re-query the policy.  Non-finite policy output records a failure."""
    if max_steps < 1:
        raise InputError("max_steps must be >= 1")
    state = reset_state(spec, task, rng)
    dt = 1.0 / spec.control_freq_hz
    anchor_dt = horizon_s / k
    result = RolloutResult(success=False, steps=0)
    chunk = None
    tau = 0.0
    for n in range(max_steps):
        if chunk is None or tau + dt > replan_every * anchor_dt - 1e-12:
            arr = policy(state.copy())
            anchors = arr.anchors if isinstance(arr, dataset.ActionChunk) else np.asarray(arr)
            if not np.all(np.isfinite(anchors)):
                result.failure = "non_finite_action"
                result.steps = n
                return result
            chunk = anchors
            tau = 0.0
        tau += dt
        j = min(int(math.ceil(tau / anchor_dt - 1e-12)), k)
        try:
            state = step(spec, state, chunk[j - 1])
        except InputError:
            result.failure = "invalid_action"
            result.steps = n
            return result
        result.eef_trace.append([fk_points(spec, state.joints, a)[-1].copy() for a in range(spec.arms)])
        result.steps = n + 1
        if task_success(state):
            result.success = True
            return result
    return result
