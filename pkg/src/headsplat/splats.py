"""Gaussian cloud data model and binary PLY persistence.

A cloud is an (N, 14) float64 array of *pre-activation* parameters laid out as

    [0:3]   color logits        -> sigmoid -> RGB in (0, 1)
    [3:6]   log scales          -> exp     -> per-axis standard deviations
    [6:9]   position            (world units, identity activation)
    [9:13]  rotation quaternion (w, x, y, z) -> normalised
    [13]    opacity logit       -> sigmoid -> opacity in (0, 1)

Keeping the parameters unconstrained lets the optimiser step freely; the
renderer applies the activations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

N_CHANNELS = 14
COLOR = slice(0, 3)
SCALE = slice(3, 6)
POSITION = slice(6, 9)
ROTATION = slice(9, 13)
OPACITY = 13

CHANNEL_NAMES = (
    "color_r", "color_g", "color_b",
    "log_scale_x", "log_scale_y", "log_scale_z",
    "x", "y", "z",
    "rot_w", "rot_x", "rot_y", "rot_z",
    "opacity_logit",
)

# zeroth-order spherical-harmonic constant used by splat viewers for f_dc
SH_C0 = 0.28209479177387814
QUAT_UNIT_TOL = 1e-12


class PlyError(ValueError):
    pass


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p, eps: float = 1e-6):
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_matrix(q) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order."""
    q = normalize_quaternions(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def quaternion_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def quaternion_aligning_z(normals: np.ndarray) -> np.ndarray:
    """Quaternions rotating +z onto each unit normal (shortest arc)."""
    n = np.asarray(normals, dtype=np.float64)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    w = 1.0 + n[..., 2]
    q = np.stack([w, -n[..., 1], n[..., 0], np.zeros_like(w)], axis=-1)
    flip = w < 1e-9
    q[flip] = [0.0, 1.0, 0.0, 0.0]
    return normalize_quaternions(q)


@dataclass
class Gaussian:
    """One splat in activated form."""

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray


def covariance(g: Gaussian) -> np.ndarray:
    """R diag(s^2) R^T for one activated Gaussian."""
    R = quaternion_to_matrix(g.rotation)
    s = np.asarray(g.scale, dtype=np.float64)
    return (R * s**2) @ R.T


@dataclass
class GaussianCloud:
    params: np.ndarray
    layout_hint: Optional[tuple] = field(default=None)

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.ndim != 2 or self.params.shape[1] != N_CHANNELS:
            raise ValueError(f"cloud params must be (N, 14), got {self.params.shape}")
        if len(self.params) < 1:
            raise ValueError("cloud must hold at least one Gaussian")
        if self.layout_hint is not None:
            self.layout_hint = tuple(int(v) for v in self.layout_hint)
            if int(np.prod(self.layout_hint)) != len(self.params):
                raise ValueError(
                    f"layout hint {self.layout_hint} does not match {len(self.params)} Gaussians")

    @classmethod
    def from_activated(cls, positions, scales, rotations, opacities, colors,
                       layout_hint=None) -> "GaussianCloud":
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        n = len(positions)
        p = np.empty((n, N_CHANNELS))
        p[:, COLOR] = logit(np.broadcast_to(colors, (n, 3)))
        p[:, SCALE] = np.log(np.broadcast_to(scales, (n, 3)))
        p[:, POSITION] = positions
        p[:, ROTATION] = normalize_quaternions(np.broadcast_to(rotations, (n, 4)))
        p[:, OPACITY] = logit(np.broadcast_to(opacities, (n,)))
        return cls(p, layout_hint)

    def __len__(self):
        return len(self.params)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.params.copy(), self.layout_hint)

    @property
    def positions(self) -> np.ndarray:
        return self.params[:, POSITION]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.params[:, SCALE])

    @property
    def rotations(self) -> np.ndarray:
        return normalize_quaternions(self.params[:, ROTATION])

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.params[:, OPACITY])

    @property
    def colors(self) -> np.ndarray:
        return sigmoid(self.params[:, COLOR])

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i].copy(), self.scales[i], self.rotations[i],
                        float(self.opacities[i]), self.colors[i])

    def covariances(self) -> np.ndarray:
        R = quaternion_to_matrix(self.params[:, ROTATION])
        s2 = self.scales**2
        return np.einsum("nij,nj,nkj->nik", R, s2, R)

    def renormalize(self) -> None:
        # rows already unit to rounding are left alone so a converged cloud stays bit-exact
        q = self.params[:, ROTATION]
        off = np.abs(np.sum(q * q, axis=1) - 1.0) > QUAT_UNIT_TOL
        if off.any():
            q[off] = normalize_quaternions(q[off])

    @staticmethod
    def concatenate(clouds) -> "GaussianCloud":
        return GaussianCloud(np.concatenate([c.params for c in clouds]))


# ---------------------------------------------------------------------- PLY
#
# binary_little_endian 1.0, one float32 per property, vertex element only:
#   x y z nx ny nz f_dc_0 f_dc_1 f_dc_2 opacity scale_0 scale_1 scale_2
#   rot_0 rot_1 rot_2 rot_3 color_logit_0 color_logit_1 color_logit_2
# opacity is the logit, scale_* are log scales, rot_* is (w, x, y, z) and
# f_dc_* = (rgb - 0.5) / SH_C0 so standard splat viewers show the right
# colours.  color_logit_* carries the exact colour parameters; files without
# it fall back to inverting f_dc.

PLY_PROPERTIES = (
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
    "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
    "color_logit_0", "color_logit_1", "color_logit_2",
)
REQUIRED_PROPERTIES = PLY_PROPERTIES[:3] + PLY_PROPERTIES[6:17]

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
}


def export_ply(cloud: GaussianCloud, path) -> None:
    from .io import write_bytes_atomic

    p = cloud.params
    n = len(p)
    rows = np.zeros((n, len(PLY_PROPERTIES)), dtype="<f4")
    rows[:, 0:3] = p[:, POSITION]
    rows[:, 6:9] = (sigmoid(p[:, COLOR]) - 0.5) / SH_C0
    rows[:, 9] = p[:, OPACITY]
    rows[:, 10:13] = p[:, SCALE]
    rows[:, 13:17] = p[:, ROTATION]
    rows[:, 17:20] = p[:, COLOR]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    data = ("\n".join(header) + "\n").encode("ascii") + rows.tobytes()
    try:
        write_bytes_atomic(path, data)
    except OSError as exc:
        raise OSError(f"cannot write PLY {path}: {exc}") from exc


def _parse_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise PlyError(f"{path}: not a PLY file (missing magic)")
    fmt = None
    count = None
    props = []
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise PlyError(f"{path}: header ended without end_header")
        tok = line.decode("ascii", errors="replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
            elif count is None:
                raise PlyError(f"{path}: element {tok[1]!r} before vertex is unsupported")
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise PlyError(f"{path}: list property {tok[-1]!r} unsupported")
            if tok[1] not in _PLY_TYPES:
                raise PlyError(f"{path}: property {tok[2]!r} has unknown type {tok[1]!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt != "binary_little_endian":
        raise PlyError(f"{path}: format {fmt!r} unsupported, need binary_little_endian")
    if count is None:
        raise PlyError(f"{path}: no vertex element")
    return count, props


def import_ply(path) -> GaussianCloud:
    path = Path(path)
    with open(path, "rb") as fh:
        count, props = _parse_header(fh, path)
        names = [name for name, _ in props]
        for name in REQUIRED_PROPERTIES:
            if name not in names:
                raise PlyError(f"{path}: missing required property {name!r}")
        dtype = np.dtype(props)
        payload = fh.read()
    if len(payload) < count * dtype.itemsize:
        have = len(payload) // dtype.itemsize
        rem = len(payload) - have * dtype.itemsize
        cut = next(n for n in names if dtype.fields[n][1] + dtype[n].itemsize > rem)
        raise PlyError(
            f"{path}: truncated payload, vertex {have} of {count} ends inside property {cut!r}")
    v = np.frombuffer(payload, dtype=dtype, count=count)
    p = np.empty((count, N_CHANNELS))
    p[:, POSITION] = np.stack([v["x"], v["y"], v["z"]], axis=1)
    if all(f"color_logit_{i}" in names for i in range(3)):
        p[:, COLOR] = np.stack([v[f"color_logit_{i}"] for i in range(3)], axis=1)
    else:
        rgb = 0.5 + SH_C0 * np.stack([v[f"f_dc_{i}"] for i in range(3)], axis=1)
        p[:, COLOR] = logit(rgb)
    p[:, OPACITY] = v["opacity"]
    p[:, SCALE] = np.stack([v[f"scale_{i}"] for i in range(3)], axis=1)
    p[:, ROTATION] = np.stack([v[f"rot_{i}"] for i in range(4)], axis=1)
    return GaussianCloud(p)
