import numpy as np
import pytest

from flowprompt import dataset


def make_planar_episode(domain_id="dom", freq=30.0, t=40, arms=1, seed=0, task_id=0):
    """Small synthetic episode: smooth EEF ramp with a mid-episode gripper toggle."""
    rng = np.random.default_rng(seed)
    steps = []
    for n in range(t):
        frac = n / (t - 1)
        raws = []
        for a in range(arms):
            x = 0.5 + frac + 0.1 * a
            y = 0.2 * np.sin(frac * np.pi) - 0.1 * a
            heading = -np.pi + 1e-6 + frac * 1.5 + 0.3 * a
            grip = 0.9 if frac > 0.5 else 0.1
            raws.append([x, y, 0.0, heading, grip])
        raw = np.concatenate(raws)
        obs = {
            "top": rng.normal(size=6),
            "wrist": rng.normal(size=4),
        }
        proprio = rng.normal(size=2 * arms)
        steps.append(dataset.Step(obs=obs, proprio=proprio, task_id=task_id, raw_action=raw))
    ep = dataset.Episode(domain_id, freq, steps, metadata={"seed": seed})
    return dataset.align_episode(ep, arms=arms, convention="xyz_heading_gripper")


@pytest.fixture
def planar_episode():
    return make_planar_episode()
