"""Pose representation, forward kinematics, pose correction, per-identity
skinning-weight grids, and the inverse linear-blend-skinning transform.

The skinning weights live on a learnable per-identity voxel grid over the
canonical (rest-pose) volume: K bone channels plus one background channel,
softmaxed across channels and sampled trilinearly. A point x in a posed
frame is pulled back to the canonical frame as a convex blend of per-bone
rigid transforms, with blend weights read from the grid at each bone's
own back-transformed location and renormalized over bones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

# Sample points whose summed bone weight falls below this get zero density
# downstream (out of body support).
FG_THRESHOLD = 1e-4

_SKEW_BASIS = np.array(
    [
        [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
        [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    ]
)


@dataclass(frozen=True)
class SkeletonTopology:
    """Joint tree with rest offsets (parent-relative, canonical T-pose)."""

    parents: tuple  # parent index per joint; -1 for the root (joint 0)
    rest_offsets: np.ndarray  # [K,3], root entry is its canonical position

    def __post_init__(self):
        object.__setattr__(self, "rest_offsets", np.asarray(self.rest_offsets, dtype=np.float64))
        k = len(self.parents)
        if k < 1 or self.rest_offsets.shape != (k, 3):
            raise ValueError(f"need K>=1 joints with [K,3] offsets, got K={k}, "
                             f"offsets {self.rest_offsets.shape}")
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise ValueError(f"joint {j} has parent {p}; parents must precede children")

    @property
    def num_joints(self):
        return len(self.parents)

    def rest_positions(self):
        """Canonical joint positions: offsets accumulated down the tree."""
        pos = np.zeros_like(self.rest_offsets)
        pos[0] = self.rest_offsets[0]
        for j in range(1, self.num_joints):
            pos[j] = pos[self.parents[j]] + self.rest_offsets[j]
        return pos


@dataclass
class PoseFrame:
    """One frame of body pose: joint positions, axis-angle orientations,
    and the camera observing it."""

    joints: np.ndarray  # [K,3] world positions
    orientations: np.ndarray  # [K,3] axis-angle, radians
    camera: object = None

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.orientations = np.asarray(self.orientations, dtype=np.float64)
        if self.joints.shape != self.orientations.shape or self.joints.shape[1:] != (3,):
            raise ValueError("joints and orientations must both be [K,3]")
        if not (np.all(np.isfinite(self.joints)) and np.all(np.isfinite(self.orientations))):
            raise ValueError("pose contains non-finite values")
        if np.any(np.linalg.norm(self.orientations, axis=1) >= 2 * np.pi):
            raise ValueError("axis-angle magnitudes must stay below 2*pi")


def rodrigues(aa):
    """Axis-angle 3-vector to a 3x3 rotation, differentiable.

    Uses the exact exponential-map formula, switching to its quadratic
    series below 1e-8 where sin(t)/t would lose precision (and so that
    aa = 0 yields the identity bitwise).
    """
    if not isinstance(aa, Tensor):
        aa = Tensor(aa)
    dtype = aa.dtype
    eye = Tensor(np.eye(3, dtype=dtype))
    basis = [Tensor(_SKEW_BASIS[i].astype(dtype)) for i in range(3)]
    s = aa[0] * basis[0] + aa[1] * basis[1] + aa[2] * basis[2]
    s2 = dc.matmul(s, s)
    theta_sq = (aa * aa).sum()
    if float(theta_sq.data) < 1e-16:  # theta < 1e-8
        return eye + s + 0.5 * s2
    theta = dc.sqrt(theta_sq)
    a = dc.sin(theta) / theta
    b = (1.0 - dc.cos(theta)) / theta_sq
    return eye + a * s + b * s2


class PoseCorrector:
    """Small shared MLP that refines the input joint orientations.

    Maps the flattened axis-angles to per-joint corrective axis-angles;
    the corrected local rotation is R(omega_k) @ R(delta_k). The output
    layer is zero-initialized so the correction is exactly off at the
    start of training.
    """

    def __init__(self, num_joints, hidden=32, rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        k3 = 3 * num_joints
        scale = np.sqrt(2.0 / k3)
        self.w0 = Tensor(rng.normal(0.0, scale, size=(k3, hidden)).astype(dtype), requires_grad=True)
        self.b0 = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w1 = Tensor(np.zeros((hidden, k3), dtype=dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(k3, dtype=dtype), requires_grad=True)
        self.num_joints = num_joints

    def named_parameters(self, prefix="skeleton.pose_mlp"):
        return {f"{prefix}.w0": self.w0, f"{prefix}.b0": self.b0,
                f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1}

    def delta(self, orientations):
        """Corrective axis-angles, one [K,3] tensor."""
        k = self.num_joints
        flat = Tensor(np.asarray(orientations, dtype=self.w0.dtype).reshape(1, 3 * k))
        h = dc.relu(dc.matmul(flat, self.w0) + self.b0)
        out = dc.matmul(h, self.w1) + self.b1
        return dc.reshape(out, (k, 3))


def pose_correct(orientations, corrector=None):
    """Corrected per-joint local rotations, as a list of K 3x3 tensors.

    With no corrector (or a zero-initialized one) this is exactly
    rodrigues of each input orientation: multiplying by the exact
    identity from rodrigues(0) is bitwise lossless, which keeps the
    no-correction path byte-identical to the uncorrected one.
    """
    orientations = np.asarray(orientations, dtype=np.float64)
    base = [rodrigues(orientations[k]) for k in range(orientations.shape[0])]
    if corrector is None:
        return base
    delta = corrector.delta(orientations)
    return [dc.matmul(base[k], rodrigues(delta[k])) for k in range(len(base))]


@dataclass
class BoneTransforms:
    """Per-bone rigid maps from observation space back to canonical space,
    plus the posed joint positions they were derived from."""

    rot: list  # K tensors [3,3]; canonical = rot @ x + trans
    trans: list  # K tensors [3]
    joint_positions: Tensor  # [K,3] posed world positions
    rest_positions: np.ndarray  # [K,3] canonical joint positions

    def apply_bone(self, points, k):
        """Back-transform a [B,3] batch through bone k."""
        return dc.matmul(points, self.rot[k].T) + self.trans[k]

    def forward_rigid(self, k):
        """Canonical -> observation rotation/translation for bone k, as
        plain arrays (used for ray bounds, not differentiated)."""
        r_inv = self.rot[k].data
        t_inv = self.trans[k].data
        return r_inv.T, -r_inv.T @ t_inv


def forward_kinematics(topology, pose=None, local_rotations=None, root_position=None):
    """Compose local joint rotations down the tree and return per-bone
    observation->canonical rigid transforms.

    Accepts either a PoseFrame (orientations run through rodrigues, root
    position taken from its first joint) or explicit per-joint rotation
    tensors, e.g. from pose_correct.
    """
    k = topology.num_joints
    if local_rotations is None:
        if pose is None:
            raise ValueError("need a pose or explicit local rotations")
        local_rotations = [rodrigues(pose.orientations[j]) for j in range(k)]
        root_position = pose.joints[0]
    if len(local_rotations) != k:
        raise ValueError(f"got {len(local_rotations)} rotations for {k} joints")
    if root_position is None:
        root_position = topology.rest_offsets[0]

    dtype = local_rotations[0].dtype
    rest = topology.rest_positions()
    world_rot = [None] * k
    world_pos = [None] * k
    world_rot[0] = local_rotations[0]
    world_pos[0] = Tensor(np.asarray(root_position, dtype=dtype))
    for j in range(1, k):
        p = topology.parents[j]
        offset = Tensor(topology.rest_offsets[j].astype(dtype).reshape(3, 1))
        world_rot[j] = dc.matmul(world_rot[p], local_rotations[j])
        world_pos[j] = dc.reshape(dc.matmul(world_rot[p], offset), (3,)) + world_pos[p]

    rot_inv = []
    trans_inv = []
    for j in range(k):
        r_t = world_rot[j].T
        rot_inv.append(r_t)
        shift = dc.reshape(dc.matmul(r_t, dc.reshape(world_pos[j], (3, 1))), (3,))
        trans_inv.append(Tensor(rest[j].astype(dtype)) - shift)
    joints = dc.stack(world_pos, axis=0)
    return BoneTransforms(rot=rot_inv, trans=trans_inv, joint_positions=joints,
                          rest_positions=rest)


class SkinningField:
    """Per-identity learnable voxel grid of skinning-weight logits.

    Channels are K bones plus one background channel; softmax across
    channels turns logits into weights that sum to 1 at every vertex.
    The background starts dominant (logit +2 vs. near-zero bone noise)
    so early density concentrates only where training pulls it.
    """

    def __init__(self, num_bones, resolution, bbox, rng=None, dtype=np.float64,
                 background_logit=2.0, bone_noise=0.01):
        rng = rng or np.random.default_rng(0)
        logits = rng.normal(0.0, bone_noise, size=(num_bones + 1, resolution, resolution, resolution))
        logits[num_bones] = background_logit
        self.logits = Tensor(logits.astype(dtype), requires_grad=True)
        self.num_bones = num_bones
        self.resolution = resolution
        self.bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)

    def named_parameters(self, prefix):
        return {f"{prefix}.logits": self.logits}

    def channel_weights(self):
        """Softmaxed [K+1, G^3] channel weights (bones + background)."""
        g3 = self.resolution**3
        flat = dc.reshape(self.logits, (self.num_bones + 1, g3))
        return dc.softmax(flat, axis=0)


def trilinear_sample(flat_grid, points, bbox, resolution):
    """Trilinear interpolation of a flat [G^3] grid at [B,3] points.

    Vertices sit at bbox corners inclusive; points outside the box give
    exactly zero (and propagate zero gradient). Differentiable in both
    the grid values and the point coordinates.
    """
    g = resolution
    bmin, bmax = bbox[0], bbox[1]
    dtype = flat_grid.dtype
    p = points.data
    inside = np.all((p >= bmin) & (p <= bmax), axis=1)

    cell = (bmax - bmin) / (g - 1)
    u = (points - Tensor(bmin.astype(dtype))) * Tensor((1.0 / cell).astype(dtype))
    i0 = np.clip(np.floor(u.data), 0, g - 2).astype(np.int64)
    f = u - Tensor(i0.astype(dtype))

    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    one = Tensor(np.ones((), dtype=dtype))
    wx = (one - fx, fx)
    wy = (one - fy, fy)
    wz = (one - fz, fz)

    out = None
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                idx = ((i0[:, 0] + dx) * g + (i0[:, 1] + dy)) * g + (i0[:, 2] + dz)
                corner = dc.gather(flat_grid, idx) * (wx[dx] * wy[dy] * wz[dz])
                out = corner if out is None else out + corner
    return out * Tensor(inside.astype(dtype))


def sample_bone_weights(points, transforms, fld, bone_points=None):
    """Canonical skinning weight of every bone at its own back-transformed
    location: a [B,K] stack of trilinear grid reads."""
    channels = fld.channel_weights()
    cols = []
    for k in range(fld.num_bones):
        y = bone_points[k] if bone_points is not None else transforms.apply_bone(points, k)
        cols.append(trilinear_sample(channels[k], y, fld.bbox, fld.resolution))
    return dc.stack(cols, axis=1)


def normalize_bone_weights(raw, threshold=FG_THRESHOLD):
    """Blend weights from unnormalized per-bone weights.

    Returns ([B,K] weights summing to 1 where supported, [B] foreground
    mass). Points whose mass falls below the threshold get all-zero
    weights instead of a division blow-up; the rescaling built into the
    normalization makes the result invariant to positive scaling of the
    raw weights.
    """
    fg = raw.sum(axis=1)
    masked_out = (fg.data < threshold).astype(raw.dtype)
    safe = fg + Tensor(masked_out)  # +1 only where the row is culled
    keep = Tensor((1.0 - masked_out).reshape(-1, 1))
    weights = raw / dc.reshape(safe, (-1, 1)) * keep
    return weights, fg


def observation_weights(points, transforms, fld, threshold=FG_THRESHOLD, bone_points=None):
    """Normalized per-bone blend weights plus foreground mass for a
    [B,3] batch of observation-space points."""
    raw = sample_bone_weights(points, transforms, fld, bone_points=bone_points)
    return normalize_bone_weights(raw, threshold=threshold)


def inverse_lbs(points, transforms, weights, bone_points=None):
    """Pull observation points back to canonical space: the weighted sum
    of per-bone rigid back-transforms."""
    out = None
    for k in range(len(transforms.rot)):
        y = bone_points[k] if bone_points is not None else transforms.apply_bone(points, k)
        term = y * weights[:, k : k + 1]
        out = term if out is None else out + term
    return out
