"""Flow-matching targets and the Euler-integration action generator.

Training regresses the constant velocity of the straight interpolation
path between Gaussian noise and the target chunk; generation integrates
the learned field from t=0 to 1.  Flow runs over continuous action dims
only; the gripper is read as logits from the same control tokens and
supervised with BCE at the sampled flow time.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import dataset, synthenv
from .dataset import ActionChunk, Sample, merge_chunk_array
from .errors import InputError, NumericError

LAMBDA_BCE = 0.1
EULER_STEPS = 10


def sample_noise(rng, k, cont_dim):
    """i.i.d. standard normal noise chunk (K, cont_dim)."""
    return rng.standard_normal((k, cont_dim))


def interpolate(a0, a, t):
    """A_t = (1 - t) A0 + t A, broadcasting t over trailing dims."""
    a0 = np.asarray(a0)
    a = np.asarray(a)
    t = np.asarray(t)
    while t.ndim < a.ndim:
        t = t[..., None]
    return (1.0 - t) * a0 + t * a


def target_velocity(a0, a):
    return np.asarray(a) - np.asarray(a0)


def fm_loss(pred_v, target_v, grip_logits, grip_labels, lambda_bce=LAMBDA_BCE,
            cont_mask=None, grip_mask=None):
    """Masked MSE over continuous dims plus lambda_bce * masked BCE on grippers.

    pred_v / grip_logits may be autodiff Tensors; returns (loss, mse, bce)
    with mse/bce reported separately.
    """
    target_v = np.asarray(target_v)
    if cont_mask is None:
        cont_mask = np.ones(target_v.shape)
    cont_mask = np.broadcast_to(cont_mask, target_v.shape)
    mse = ad.masked_mse(pred_v, target_v, cont_mask)
    if grip_logits is not None:
        labels = np.asarray(grip_labels)
        if not np.all((labels == 0.0) | (labels == 1.0)):
            raise InputError("gripper labels must be binary")
        if grip_mask is None:
            grip_mask = np.ones(labels.shape)
        grip_mask = np.broadcast_to(grip_mask, labels.shape)
        bce = ad.masked_bce_with_logits(grip_logits, labels, grip_mask)
        loss = ad.add(mse, ad.scale(bce, lambda_bce))
    else:
        bce = ad.Tensor(np.zeros((), dtype=mse.dtype))
        loss = mse
    return loss, mse, bce


def make_flow_batch(rng, batch):
    """Draw (A0, t) for a training batch dict from model.make_batch."""
    b, k, cont_dim = batch["cont"].shape
    t = rng.uniform(0.0, 1.0, size=b)
    a0 = rng.standard_normal((b, k, cont_dim)) * batch["cont_mask"][:, None, :]
    a_t = interpolate(a0, batch["cont"], t[:, None, None])
    v = target_velocity(a0, batch["cont"])
    return a0, t, a_t, v


def generate_batch(model, samples, a0, s_steps=EULER_STEPS):
    """Euler-integrate the velocity field for a batch of samples.

    a0: (B, K, cont_dim) starting noise (masked dims zero).
    Returns (cont (B, K, cont_dim) in normalized space, grip (B, K, grip_dim)
    binary) as numpy arrays.
    """
    if s_steps < 1:
        raise InputError("need at least one integration step")
    c = model.config
    batch = model.make_batch(samples)
    mask = batch["cont_mask"][:, None, :]
    a = np.asarray(a0, dtype=c.np_dtype) * mask
    logits = None
    with ad.no_grad():
        for s in range(s_steps):
            t = np.full(batch["n"], s / s_steps)
            vel, logits, _ = model.forward_batch(batch, a, t, check_finite=False)
            if not np.all(np.isfinite(vel.data)):
                raise NumericError("non-finite velocity during generation")
            a = a + (vel.data * mask) / s_steps
    grip = (1.0 / (1.0 + np.exp(-logits.data)) > 0.5).astype(np.float64)
    return np.asarray(a, dtype=np.float64), grip


def generate(model, domain_id, obs, proprio, task_id, rng, s_steps=EULER_STEPS) -> ActionChunk:
    """Sample one de-normalized action chunk for a registered domain."""
    c = model.config
    info = model.domains[domain_id]
    a0 = sample_noise(rng, c.k, c.cont_dim)
    sample = Sample(domain_id, obs, np.asarray(proprio), int(task_id), None)
    cont, grip = generate_batch(model, [sample], a0[None], s_steps)
    cont = cont[0, :, : info.cont_dims]
    grip = grip[0, :, : info.grip_dims]
    anchors = merge_chunk_array(cont, grip, info.arms)
    if info.norm_stats is not None:
        anchors = dataset.invert_norm(anchors, info.norm_stats)
        # invert_norm touches continuous dims only; keep grippers binary
        anchors = merge_chunk_array(
            dataset.split_chunk_array(anchors, info.arms)[0], grip, info.arms
        )
    return ActionChunk(anchors=anchors, arms=info.arms)


def make_policy(model, domain_id, spec, obs_rng, noise_rng, s_steps=EULER_STEPS):
    """Closed-loop policy closure for synthenv.rollout."""
    def policy(state):
        obs = synthenv.observe_all(spec, state, obs_rng)
        proprio = synthenv.proprio_vector(spec, state)
        task_id = state.task.n_goals - 1
        return generate(model, domain_id, obs, proprio, task_id, noise_rng, s_steps)

    return policy
