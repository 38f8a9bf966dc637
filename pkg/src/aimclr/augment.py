"""The eight skeleton augmentations and the normal / extreme pipelines.

Every transform takes and returns a ``[C, T, V, P]`` array and is a pure
function of its explicit parameters. All randomness lives in
:func:`sample_params`.
"""

from dataclasses import dataclass

import numpy as np

SHEAR_AMPLITUDE = 0.5
PAD_RATIO = 6
MAIN_ANGLE_MAX = np.pi / 6
MINOR_ANGLE_MAX = np.pi / 180
NOISE_STD = 0.1  # variance 0.01
BLUR_WINDOW = 15
BLUR_SIGMA_RANGE = (0.1, 2.0)
AXES = ("X", "Y", "Z")

NORMAL = ("shear", "crop")
EXTREME = (
    "shear",
    "rotate",
    "spatial_flip",
    "axis_mask",
    "crop",
    "temporal_flip",
    "gaussian_noise",
    "gaussian_blur",
)


@dataclass(frozen=True)
class Pipeline:
    kinds: tuple
    seed: int = 0


def normal_pipeline(seed=0):
    return Pipeline(NORMAL, seed)


def extreme_pipeline(seed=0):
    return Pipeline(EXTREME, seed)


@dataclass
class AugmentParams:
    shear_factors: tuple = (0.0,) * 6
    crop_start: int | None = None  # None -> centered (identity)
    flip_spatial: bool = False
    flip_temporal: bool = False
    rotate_axis: str = "X"
    rotate_angles: tuple = (0.0, 0.0, 0.0)
    mask_axis: str | None = None
    noise_seed: int | None = None
    blur_sigma: float = 0.1
    blur_apply: bool = False


def identity_params():
    return AugmentParams()


def _check3(x):
    if x.shape[0] != 3:
        raise ValueError(f"expected 3 coordinate channels, got {x.shape[0]}")


def _apply_matrix(x, mat):
    return np.einsum("ij,jtvp->itvp", mat, x)


def shear_matrix(factors):
    a12, a13, a21, a23, a31, a32 = factors
    return np.array([[1.0, a12, a13], [a21, 1.0, a23], [a31, a32, 1.0]])


def shear(x, factors):
    _check3(x)
    if len(factors) != 6:
        raise ValueError("shear takes six off-diagonal factors")
    return _apply_matrix(x, shear_matrix(factors)).astype(x.dtype, copy=False)


def crop_padding(T):
    return T // PAD_RATIO


def crop(x, start):
    """Edge-pad ``T // 6`` frames on each side, then take ``T`` frames from ``start``."""
    T = x.shape[1]
    pad = crop_padding(T)
    if not 0 <= start <= 2 * pad:
        raise ValueError(f"crop start {start} outside [0, {2 * pad}] for T={T}")
    if pad == 0:
        return x.copy()
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0), (0, 0)), mode="edge")
    return xp[:, start:start + T].copy()


def spatial_flip(x, graph, apply=True):
    if not apply:
        return x.copy()
    out = x.copy()
    V = x.shape[2]
    for left, right in graph.left_right_pairs:
        if not (0 <= left < V and 0 <= right < V):
            raise IndexError(f"pair ({left}, {right}) out of range for {V} joints")
        out[:, :, [left, right]] = x[:, :, [right, left]]
    return out


def temporal_flip(x, apply=True):
    return x[:, ::-1].copy() if apply else x.copy()


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def rotation_matrix(angles):
    ax, ay, az = angles
    return _rx(ax) @ _ry(ay) @ _rz(az)


def rotate(x, main_axis, angles):
    _check3(x)
    if main_axis not in AXES:
        raise ValueError(f"rotation axis must be one of {AXES}, got {main_axis!r}")
    tol = 1e-12
    for axis, a in zip(AXES, angles):
        hi = MAIN_ANGLE_MAX if axis == main_axis else MINOR_ANGLE_MAX
        if not -tol <= a <= hi + tol:
            raise ValueError(f"{axis} angle {a} outside [0, {hi}]")
    return _apply_matrix(x, rotation_matrix(angles)).astype(x.dtype, copy=False)


def axis_mask(x, axis=None):
    out = x.copy()
    if axis is not None:
        out[AXES.index(axis)] = 0
    return out


def gaussian_noise(x, seed):
    if seed is None:
        return x.copy()
    rng = np.random.default_rng(seed)
    return (x + rng.normal(0.0, NOISE_STD, size=x.shape)).astype(x.dtype, copy=False)


def blur_kernel(sigma, normalize=True):
    half = BLUR_WINDOW // 2
    t = np.arange(-half, half + 1)
    k = np.exp(-(t ** 2) / (2 * sigma ** 2))
    return k / k.sum() if normalize else k


def gaussian_blur(x, sigma):
    lo, hi = BLUR_SIGMA_RANGE
    if not lo <= sigma <= hi:
        raise ValueError(f"blur sigma {sigma} outside [{lo}, {hi}]")
    k = blur_kernel(sigma)
    half = len(k) // 2
    T = x.shape[1]
    xp = np.pad(x, ((0, 0), (half, half), (0, 0), (0, 0)), mode="edge")
    out = np.zeros_like(x, dtype=np.result_type(x.dtype, np.float64))
    for j, w in enumerate(k):
        out += w * xp[:, j:j + T]
    return out.astype(x.dtype, copy=False)


def sample_params(pipeline, rng, T):
    """Draw every stochastic quantity the pipeline needs from ``rng``.

    Kinds absent from the pipeline keep their identity values.
    """
    p = AugmentParams()
    kinds = set(pipeline.kinds)
    if "shear" in kinds:
        p.shear_factors = tuple(float(f) for f in rng.uniform(-SHEAR_AMPLITUDE, SHEAR_AMPLITUDE, size=6))
    if "crop" in kinds:
        p.crop_start = int(rng.integers(0, 2 * crop_padding(T) + 1))
    if "spatial_flip" in kinds:
        p.flip_spatial = bool(rng.random() < 0.5)
    if "temporal_flip" in kinds:
        p.flip_temporal = bool(rng.random() < 0.5)
    if "rotate" in kinds:
        main = AXES[int(rng.integers(3))]
        p.rotate_axis = main
        p.rotate_angles = tuple(
            float(rng.uniform(0, MAIN_ANGLE_MAX if a == main else MINOR_ANGLE_MAX)) for a in AXES
        )
    if "axis_mask" in kinds:
        axis = AXES[int(rng.integers(3))]
        p.mask_axis = axis if rng.random() < 0.5 else None
    if "gaussian_noise" in kinds:
        p.noise_seed = int(rng.integers(2 ** 63 - 1))
    if "gaussian_blur" in kinds:
        p.blur_sigma = float(rng.uniform(*BLUR_SIGMA_RANGE))
        p.blur_apply = bool(rng.random() < 0.5)
    return p


def apply_pipeline(x, pipeline, params, graph=None):
    T = x.shape[1]
    for kind in pipeline.kinds:
        if kind == "shear":
            x = shear(x, params.shear_factors)
        elif kind == "crop":
            start = crop_padding(T) if params.crop_start is None else params.crop_start
            x = crop(x, start)
        elif kind == "spatial_flip":
            if params.flip_spatial and graph is None:
                raise ValueError("spatial_flip needs a skeleton graph")
            x = spatial_flip(x, graph, params.flip_spatial) if params.flip_spatial else x
        elif kind == "temporal_flip":
            x = temporal_flip(x, params.flip_temporal)
        elif kind == "rotate":
            x = rotate(x, params.rotate_axis, params.rotate_angles)
        elif kind == "axis_mask":
            x = axis_mask(x, params.mask_axis)
        elif kind == "gaussian_noise":
            x = gaussian_noise(x, params.noise_seed)
        elif kind == "gaussian_blur":
            x = gaussian_blur(x, params.blur_sigma) if params.blur_apply else x
        else:
            raise ValueError(f"unknown augmentation {kind!r}")
    return x


def augment(x, pipeline, rng, graph=None):
    """Sample parameters and apply; convenience for the training loop."""
    return apply_pipeline(x, pipeline, sample_params(pipeline, rng, x.shape[1]), graph)


__all__ = [
    "AugmentParams",
    "Pipeline",
    "normal_pipeline",
    "extreme_pipeline",
    "identity_params",
    "shear",
    "crop",
    "spatial_flip",
    "temporal_flip",
    "rotate",
    "axis_mask",
    "gaussian_noise",
    "gaussian_blur",
    "blur_kernel",
    "sample_params",
    "apply_pipeline",
    "augment",
]
