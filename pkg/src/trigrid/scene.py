"""Tri-grid feature volume, tiny MLP decoder, and per-scene background raster.

Axis conventions
----------------
Each of the three stacks has shape ``(D, H, W, C)``. A stack is named after the
two world axes its planes span; the third axis is the depth direction along
which the ``D`` planes are stacked::

    planes_xy:  W <- x,  H <- y,  D <- z
    planes_yz:  W <- y,  H <- z,  D <- x
    planes_xz:  W <- x,  H <- z,  D <- y

In-plane nodes sit at cell centres of a uniform ``H x W`` grid over the bounds
face.  Depth stations are uniformly spaced over the bounds interval, endpoints
included.  With ``D == 1`` the single plane is used as-is (no depth weights),
which is exactly the EG3D tri-plane.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import InvalidInputError, InvalidStateError

STACKS = ("xy", "yz", "xz")
# (u axis -> W, v axis -> H, depth axis -> D) for each stack
STACK_AXES = {"xy": (0, 1, 2), "yz": (1, 2, 0), "xz": (0, 2, 1)}

ACTIVATIONS = ("relu", "softplus", "tanh")


@dataclass
class TriGrid:
    planes_xy: np.ndarray
    planes_yz: np.ndarray
    planes_xz: np.ndarray
    bounds: tuple = (-1.0, 1.0)

    def __post_init__(self):
        shapes = {p.shape for p in self.stacks()}
        if len(shapes) != 1:
            raise InvalidInputError(f"all three stacks must share (D, H, W, C); got {sorted(shapes)}")
        shape = self.planes_xy.shape
        if len(shape) != 4:
            raise InvalidInputError(f"stack must be 4-D (D, H, W, C); got shape {shape}")
        D, H, W, C = shape
        if D < 1 or H < 2 or W < 2 or C < 1:
            raise InvalidInputError(f"need D >= 1, H, W >= 2, C >= 1; got {shape}")
        lo, hi = self.bounds
        if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
            raise InvalidInputError(f"bounds must be finite with hi > lo; got {self.bounds}")
        self.bounds = (float(lo), float(hi))

    @property
    def shape(self):
        return self.planes_xy.shape

    @property
    def depth(self):
        return self.planes_xy.shape[0]

    @property
    def channels(self):
        return self.planes_xy.shape[3]

    def stacks(self):
        return [self.planes_xy, self.planes_yz, self.planes_xz]

    def node_table(self):
        """All plane nodes as one ``(3*D*H*W, C)`` table in stack order xy, yz, xz."""
        C = self.channels
        return np.concatenate([p.reshape(-1, C) for p in self.stacks()], axis=0)

    def check_finite(self):
        for name, p in zip(STACKS, self.stacks()):
            if not np.all(np.isfinite(p)):
                raise InvalidStateError(f"non-finite values in planes_{name}")


def _validate_points(points):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise InvalidInputError(f"points must have shape (N, 3); got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise InvalidInputError("points contain non-finite coordinates")
    return points


def _axis_coords(x, lo, hi, n, cell_centred):
    """Continuous grid index along one axis, clamped, plus d(index)/dx."""
    ext = hi - lo
    if cell_centred:
        raw = (x - lo) / ext * n - 0.5
        scale = n / ext
    else:
        raw = (x - lo) / ext * (n - 1)
        scale = (n - 1) / ext
    idx = np.clip(raw, 0.0, n - 1)
    # clamped coordinates do not move with the point
    dscale = np.where((raw > 0.0) & (raw < n - 1), scale, 0.0)
    i0 = np.minimum(np.floor(idx).astype(np.int64), n - 2)
    frac = idx - i0
    return i0, frac, dscale


class Interpolator:
    """Sparse trilinear interpolation operator for one trigrid and one point set.

    Builds ``A`` with ``features = A @ node_table`` and, on request, the three
    matrices ``dA/dx, dA/dy, dA/dz`` used for point gradients.  The forward and
    backward passes of a render share one instance.
    """

    def __init__(self, trigrid: TriGrid, points, point_grads=False, dtype=np.float64):
        points = _validate_points(points)
        self.trigrid = trigrid
        self.dtype = dtype
        self.n_points = N = len(points)
        D, H, W, C = trigrid.shape
        lo, hi = trigrid.bounds
        stack_size = D * H * W
        pair = np.array([0, 1])
        sign = np.array([-1.0, 1.0])
        cols, vals = [], []
        dvals = [[], [], []]

        for s, name in enumerate(STACKS):
            ua, va, da = STACK_AXES[name]
            iu, fu, su = _axis_coords(points[:, ua], lo, hi, W, True)
            iv, fv, sv = _axis_coords(points[:, va], lo, hi, H, True)
            au = np.stack([1.0 - fu, fu], axis=1)
            av = np.stack([1.0 - fv, fv], axis=1)
            cu = iu[:, None] + pair
            cv = iv[:, None] + pair
            if D > 1:
                idp, fd, sd = _axis_coords(points[:, da], lo, hi, D, False)
                ad = np.stack([1.0 - fd, fd], axis=1)
                cd = idp[:, None] + pair
                # corner order: depth-major, then v, then u
                c = (cd[:, :, None, None] * H + cv[:, None, :, None]) * W + cu[:, None, None, :]
                w = ad[:, :, None, None] * av[:, None, :, None] * au[:, None, None, :]
                if point_grads:
                    gu = (sign * su[:, None])[:, None, None, :]
                    gv = (sign * sv[:, None])[:, None, :, None]
                    gd = (sign * sd[:, None])[:, :, None, None]
                    dw = {ua: ad[:, :, None, None] * av[:, None, :, None] * gu,
                          va: ad[:, :, None, None] * gv * au[:, None, None, :],
                          da: gd * av[:, None, :, None] * au[:, None, None, :]}
            else:
                c = cv[:, :, None] * W + cu[:, None, :]
                w = av[:, :, None] * au[:, None, :]
                if point_grads:
                    dw = {ua: av[:, :, None] * (sign * su[:, None])[:, None, :],
                          va: (sign * sv[:, None])[:, :, None] * au[:, None, :],
                          da: np.zeros_like(w)}
            cols.append(c.reshape(N, -1) + s * stack_size)
            vals.append(w.reshape(N, -1))
            if point_grads:
                for a in range(3):
                    dvals[a].append(dw[a].reshape(N, -1))

        cols = np.concatenate(cols, axis=1)
        K = cols.shape[1]
        indptr = np.arange(0, N * K + 1, K, dtype=np.int64)
        shape = (N, 3 * stack_size)
        flat_cols = cols.ravel()
        data = np.concatenate(vals, axis=1).ravel().astype(dtype, copy=False)
        self.matrix = sp.csr_matrix((data, flat_cols, indptr), shape=shape)
        self.dmatrices = None
        if point_grads:
            self.dmatrices = [
                sp.csr_matrix((np.concatenate(dvals[a], axis=1).ravel().astype(dtype, copy=False), flat_cols,
                               indptr), shape=shape)
                for a in range(3)
            ]

    def _table(self):
        return self.trigrid.node_table().astype(self.dtype, copy=False)

    def forward(self):
        return self.matrix @ self._table()

    def backward(self, upstream, point_grads=True):
        """Return ``({'xy','yz','xz'} plane grads, point grads or None)``."""
        D, H, W, C = self.trigrid.shape
        upstream = np.asarray(upstream, dtype=self.dtype)
        if upstream.shape != (self.n_points, C):
            raise InvalidInputError(f"upstream gradient must have shape {(self.n_points, C)}; got {upstream.shape}")
        node_grads = self.matrix.T @ upstream
        stack_size = D * H * W
        plane_grads = {
            name: node_grads[s * stack_size:(s + 1) * stack_size].reshape(D, H, W, C)
            for s, name in enumerate(STACKS)
        }
        gpts = None
        if point_grads:
            if self.dmatrices is None:
                raise InvalidInputError("Interpolator was built without point_grads=True")
            table = self._table()
            gpts = np.stack([np.einsum("nc,nc->n", m @ table, upstream) for m in self.dmatrices], axis=1)
        return plane_grads, gpts


def sample_features(trigrid: TriGrid, points):
    """Sum of the three trilinearly interpolated stack features at each point.

    Points outside the bounds cube are clamped onto it.  Returns ``(N, C)``.
    """
    return Interpolator(trigrid, points).forward()


def sample_features_backward(trigrid: TriGrid, points, upstream_grads):
    """Gradients of ``sum(upstream * sample_features(points))``.

    Returns ``(plane_grads, point_grads)`` where ``plane_grads`` maps ``'xy'``,
    ``'yz'``, ``'xz'`` to arrays shaped like the stacks and ``point_grads`` is
    ``(N, 3)``.  Point gradients are zero along clamped axes.
    """
    interp = Interpolator(trigrid, points, point_grads=True)
    return interp.backward(upstream_grads, point_grads=True)


# ---------------------------------------------------------------- decoder


def softplus(x):
    return np.logaddexp(0.0, x)


def _act(name, x):
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "softplus":
        return softplus(x)
    if name == "tanh":
        return np.tanh(x)
    raise InvalidInputError(f"unknown activation {name!r}")


def _act_grad(name, x, y):
    if name == "relu":
        return (x > 0.0).astype(np.float64)
    if name == "softplus":
        return expit(x)
    if name == "tanh":
        return 1.0 - y * y
    raise InvalidInputError(f"unknown activation {name!r}")


@dataclass
class Decoder:
    """MLP mapping C features to (density logit, k radiance logits).

    Weights are stored ``(fan_in, fan_out)`` so a layer is ``x @ W + b``.
    """

    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidInputError("decoder needs matching, non-empty weight and bias lists")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"activation must be one of {ACTIVATIONS}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InvalidInputError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise InvalidInputError(f"layer {i} input width {w.shape[0]} does not chain")
        if self.weights[-1].shape[1] < 2:
            raise InvalidInputError("decoder output must hold a density logit and >= 1 radiance channel")

    @property
    def in_width(self):
        return self.weights[0].shape[0]

    @property
    def out_channels(self):
        """Number of radiance channels k."""
        return self.weights[-1].shape[1] - 1

    @property
    def hidden(self):
        return tuple(w.shape[1] for w in self.weights[:-1])

    def check_finite(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidStateError(f"decoder layer {i} has non-finite parameters")


def _decode_forward(decoder, features, dtype=np.float64):
    features = np.asarray(features, dtype=dtype)
    if features.ndim != 2 or features.shape[1] != decoder.in_width:
        raise InvalidInputError(
            f"features must have shape (N, {decoder.in_width}); got {features.shape}")
    decoder.check_finite()
    weights = [w.astype(dtype, copy=False) for w in decoder.weights]
    pre, post = [], [features]
    x = features
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, decoder.biases)):
        z = x @ w + b.astype(dtype, copy=False)
        pre.append(z)
        x = z if i == last else _act(decoder.activation, z)
        post.append(x)
    out = post[-1]
    sigma = softplus(out[:, 0])
    radiance = expit(out[:, 1:])
    return sigma, radiance, (pre, post, radiance, weights)


def decode(decoder: Decoder, features):
    """Density (softplus) and radiance (sigmoid) for each feature row."""
    sigma, radiance, _ = _decode_forward(decoder, features)
    return sigma, radiance


def _decode_backward_cached(decoder, cache, g_sigma, g_radiance):
    pre, post, radiance, weights = cache
    out_logits = pre[-1]
    g_out = np.empty_like(out_logits)
    g_out[:, 0] = g_sigma * expit(out_logits[:, 0])
    g_out[:, 1:] = g_radiance * radiance * (1.0 - radiance)
    grads = [None] * len(decoder.weights)
    g = g_out
    for i in range(len(decoder.weights) - 1, -1, -1):
        x_in = post[i]
        grads[i] = (x_in.T @ g, g.sum(axis=0))
        g = g @ weights[i].T
        if i > 0:
            g = g * _act_grad(decoder.activation, pre[i - 1], post[i])
    return grads, g


def decode_backward(decoder: Decoder, features, upstream):
    """Reverse-mode pass through :func:`decode`.

    ``upstream`` is ``(g_sigma (N,), g_radiance (N, k))``.  Returns
    ``(param_grads, feature_grads)`` with ``param_grads`` a list of
    ``(dW, db)`` per layer.
    """
    g_sigma, g_radiance = upstream
    _, _, cache = _decode_forward(decoder, features)
    n = len(cache[1][0])
    g_sigma = np.asarray(g_sigma, dtype=np.float64)
    g_radiance = np.asarray(g_radiance, dtype=np.float64)
    if g_sigma.shape != (n,) or g_radiance.shape != (n, decoder.out_channels):
        raise InvalidInputError("upstream gradient shapes do not match decoder outputs")
    return _decode_backward_cached(decoder, cache, g_sigma, g_radiance)


# ---------------------------------------------------------------- background + scene


@dataclass
class Background:
    """Learnable 2-D background at raw render resolution; values = sigmoid(params)."""

    params: np.ndarray

    def __post_init__(self):
        if self.params.ndim != 3:
            raise InvalidInputError(f"background params must be (H, W, k); got {self.params.shape}")

    @property
    def image(self):
        return expit(self.params)

    @property
    def shape(self):
        return self.params.shape


@dataclass
class Scene:
    trigrid: TriGrid
    decoder: Decoder
    background: Background
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.decoder.in_width != self.trigrid.channels:
            raise InvalidInputError(
                f"decoder input width {self.decoder.in_width} != trigrid channels {self.trigrid.channels}")
        if self.background.shape[2] != self.decoder.out_channels:
            raise InvalidInputError("background channel count must equal decoder radiance channels")

    @property
    def image_size(self):
        return self.background.shape[:2]

    def parameters(self):
        """Named views of every optimizable array (same keys as gradient dicts)."""
        params = {
            "planes_xy": self.trigrid.planes_xy,
            "planes_yz": self.trigrid.planes_yz,
            "planes_xz": self.trigrid.planes_xz,
        }
        for i, (w, b) in enumerate(zip(self.decoder.weights, self.decoder.biases)):
            params[f"decoder.w{i}"] = w
            params[f"decoder.b{i}"] = b
        params["background"] = self.background.params
        return params

    def n_params(self, group=None):
        counts = {"trigrid": 0, "decoder": 0, "background": 0}
        for name, p in self.parameters().items():
            key = "trigrid" if name.startswith("planes") else name.split(".")[0]
            counts[key] += p.size
        return counts[group] if group else sum(counts.values())

    def copy(self):
        return copy.deepcopy(self)

    def check_finite(self):
        self.trigrid.check_finite()
        self.decoder.check_finite()
        if not np.all(np.isfinite(self.background.params)):
            raise InvalidStateError("background has non-finite parameters")


def zero_grads(scene):
    return {name: np.zeros_like(p) for name, p in scene.parameters().items()}


def init_scene(depth=3, resolution=16, channels=16, hidden=(64,), k=3, image_size=(64, 64),
               bounds=(-1.0, 1.0), activation="relu", seed=0, feature_std=0.1):
    """Randomly initialised scene.

    Features ~ N(0, feature_std^2); decoder weights ~ N(0, 1/fan_in) with zero
    biases; background parameters zero (mid-grey after the sigmoid).
    """
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    H, W = resolution
    rng = np.random.default_rng(seed)
    planes = [rng.normal(0.0, feature_std, size=(depth, H, W, channels)) for _ in STACKS]
    trigrid = TriGrid(*planes, bounds=bounds)
    widths = [channels, *hidden, 1 + k]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    decoder = Decoder(weights, biases, activation=activation)
    background = Background(np.zeros((*image_size, k)))
    return Scene(trigrid, decoder, background)


def equal_budget_resolution(resolution, depth, target_depth=1):
    """In-plane resolution giving a ``target_depth`` trigrid about the same node count."""
    return int(round(resolution * np.sqrt(depth / target_depth)))
