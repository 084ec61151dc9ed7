"""Learnable joint bilateral feature upsampler and its training-time partners.

One parameterized JBU stage doubles resolution; larger factors repeat the
same stage with shared parameters.  A lightweight reconstruction head
(two convs + Tanh) and a normalized-blur strided downsampler exist only to
shape the training losses and are dropped at inference.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Var, as_var
from . import rng
from .tensorio import load_checkpoint, save_checkpoint

DEFAULT_RADIUS = 5   # 11x11 window
GUIDE_DIM = 16
CRN_HIDDEN = 32


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


@dataclass
class JbuParams:
    """Guidance MLP, the two temperature scalars (stored as logs), and radius."""
    mlp_w1: object
    mlp_b1: object
    mlp_w2: object
    mlp_b2: object
    log_tau_spatial: object
    log_tau_range: object
    radius: int = DEFAULT_RADIUS

    @classmethod
    def init(cls, seed: int = 0, guide_dim: int = GUIDE_DIM, radius: int = DEFAULT_RADIUS):
        b1 = 1.0 / np.sqrt(3.0)
        b2 = 1.0 / np.sqrt(guide_dim)
        return cls(
            mlp_w1=rng.uniform(rng.derive_seed(seed, "jbu.mlp_w1"), (3, guide_dim), -b1, b1),
            mlp_b1=np.zeros(guide_dim, np.float32),
            mlp_w2=rng.uniform(rng.derive_seed(seed, "jbu.mlp_w2"), (guide_dim, guide_dim), -b2, b2),
            mlp_b2=np.zeros(guide_dim, np.float32),
            log_tau_spatial=np.float32(np.log(2.0)),
            log_tau_range=np.float32(0.0),
            radius=radius)

    def tensors(self, prefix="jbu"):
        return {f"{prefix}.mlp_w1": _val(self.mlp_w1), f"{prefix}.mlp_b1": _val(self.mlp_b1),
                f"{prefix}.mlp_w2": _val(self.mlp_w2), f"{prefix}.mlp_b2": _val(self.mlp_b2),
                f"{prefix}.log_tau_spatial": np.atleast_1d(_val(self.log_tau_spatial)),
                f"{prefix}.log_tau_range": np.atleast_1d(_val(self.log_tau_range)),
                f"{prefix}.radius": np.atleast_1d(np.float32(self.radius))}

    @classmethod
    def from_tensors(cls, t, prefix="jbu"):
        return cls(t[f"{prefix}.mlp_w1"], t[f"{prefix}.mlp_b1"],
                   t[f"{prefix}.mlp_w2"], t[f"{prefix}.mlp_b2"],
                   np.float32(t[f"{prefix}.log_tau_spatial"][0]),
                   np.float32(t[f"{prefix}.log_tau_range"][0]),
                   int(t[f"{prefix}.radius"][0]))

    def as_parameters(self):
        """A copy whose learnable fields are named autodiff Parameters."""
        return replace(
            self,
            mlp_w1=Parameter(_val(self.mlp_w1), "jbu.mlp_w1"),
            mlp_b1=Parameter(_val(self.mlp_b1), "jbu.mlp_b1"),
            mlp_w2=Parameter(_val(self.mlp_w2), "jbu.mlp_w2"),
            mlp_b2=Parameter(_val(self.mlp_b2), "jbu.mlp_b2"),
            log_tau_spatial=Parameter(np.atleast_1d(_val(self.log_tau_spatial)), "jbu.log_tau_spatial"),
            log_tau_range=Parameter(np.atleast_1d(_val(self.log_tau_range)), "jbu.log_tau_range"))

    def param_count(self) -> int:
        return sum(_val(v).size for v in (self.mlp_w1, self.mlp_b1, self.mlp_w2,
                                          self.mlp_b2, self.log_tau_spatial, self.log_tau_range))


@dataclass
class CrnParams:
    """Two 3x3 convolutions with an activation between and a final Tanh."""
    conv1_w: object
    conv1_b: object
    conv2_w: object
    conv2_b: object

    @classmethod
    def init(cls, channels: int, seed: int = 0, hidden: int = CRN_HIDDEN):
        b1 = 1.0 / np.sqrt(9 * channels)
        b2 = 1.0 / np.sqrt(9 * hidden)
        return cls(
            conv1_w=rng.uniform(rng.derive_seed(seed, "crn.conv1_w"), (3, 3, channels, hidden), -b1, b1),
            conv1_b=np.zeros(hidden, np.float32),
            conv2_w=rng.uniform(rng.derive_seed(seed, "crn.conv2_w"), (3, 3, hidden, 3), -b2, b2),
            conv2_b=np.zeros(3, np.float32))

    def tensors(self, prefix="crn"):
        return {f"{prefix}.conv1_w": _val(self.conv1_w), f"{prefix}.conv1_b": _val(self.conv1_b),
                f"{prefix}.conv2_w": _val(self.conv2_w), f"{prefix}.conv2_b": _val(self.conv2_b)}

    @classmethod
    def from_tensors(cls, t, prefix="crn"):
        return cls(t[f"{prefix}.conv1_w"], t[f"{prefix}.conv1_b"],
                   t[f"{prefix}.conv2_w"], t[f"{prefix}.conv2_b"])

    def as_parameters(self):
        return replace(self,
                       conv1_w=Parameter(_val(self.conv1_w), "crn.conv1_w"),
                       conv1_b=Parameter(_val(self.conv1_b), "crn.conv1_b"),
                       conv2_w=Parameter(_val(self.conv2_w), "crn.conv2_w"),
                       conv2_b=Parameter(_val(self.conv2_b), "crn.conv2_b"))


@dataclass
class DownsamplerParams:
    """Blur kernel as free logits; softmax keeps it nonnegative, sum 1."""
    logits: object

    @classmethod
    def init(cls, size: int, seed: int = 0):
        del seed  # uniform blur start; kept for signature symmetry
        return cls(logits=np.zeros((size, size), np.float32))

    def kernel(self):
        flat = ad.reshape(as_var(self.logits), (-1,))
        return ad.softmax(flat, axis=0)

    def tensors(self, prefix="downsampler"):
        return {f"{prefix}.logits": _val(self.logits)}

    @classmethod
    def from_tensors(cls, t, prefix="downsampler"):
        return cls(logits=t[f"{prefix}.logits"])

    def as_parameters(self):
        return replace(self, logits=Parameter(_val(self.logits), "downsampler.logits"))


# ---------------------------------------------------------------------------
# kernels


def spatial_kernel(radius: int, tau_spatial) -> Var:
    """Unnormalized Gaussian-of-distance window; center entry is 1."""
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    k = 2 * radius + 1
    offs = np.arange(k) - radius
    d2 = (offs[:, None] ** 2 + offs[None, :] ** 2).astype(np.float32)
    tau = as_var(tau_spatial)
    if float(_val(tau).reshape(-1)[0]) <= 0:
        raise ValueError("tau_spatial must be positive")
    return ad.exp(ad.mul(d2, ad.div(-0.5, ad.mul(tau, tau))))


def range_kernel(window, center, tau_range) -> Var:
    """Softmax over window positions of center-neighbor similarity."""
    window = as_var(window)
    center = as_var(center)
    if float(_val(as_var(tau_range)).reshape(-1)[0]) <= 0:
        raise ValueError("tau_range must be positive")
    n, g = window.shape
    sims = ad.matmul(window, ad.reshape(center, (g, 1)))
    tau = as_var(tau_range)
    logits = ad.div(ad.reshape(sims, (n,)), ad.mul(tau, tau))
    return ad.softmax(logits, axis=0)


# ---------------------------------------------------------------------------
# the upsampling stage


def _guidance_features(guide, p: JbuParams) -> Var:
    guide = as_var(guide)
    h, w, _ = guide.shape
    flat = ad.reshape(guide, (h * w, 3))
    hid = ad.relu(ad.add(ad.matmul(flat, as_var(p.mlp_w1)), as_var(p.mlp_b1)))
    out = ad.add(ad.matmul(hid, as_var(p.mlp_w2)), as_var(p.mlp_b2))
    g = _val(p.mlp_w2).shape[1]
    return ad.reshape(out, (h, w, g))


def _half_coord_samples(lr, radius: int) -> Var:
    """LR bilinearly sampled at every half-integer HR window coordinate.

    Output is (2h + 2r, 2w + 2r, c): entry (t, s) holds the LR value at
    coordinate ((t - r) / 2, (s - r) / 2), clamped at the borders, so window
    extraction on it realizes replicate padding.
    """
    lr = as_var(lr)
    h, w, _ = lr.shape

    def axis_samples(n, edge):
        coords = np.clip((np.arange(-radius, 2 * n + radius)) / 2.0, 0.0, edge - 1.0)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, edge - 1)
        frac = (coords - lo).astype(np.float32)
        return lo, hi, frac

    y0, y1, fy = axis_samples(h, h)
    x0, x1, fx = axis_samples(w, w)
    ny, nx = y0.size, x0.size
    gy0 = np.broadcast_to(y0[:, None], (ny, nx))
    gy1 = np.broadcast_to(y1[:, None], (ny, nx))
    gx0 = np.broadcast_to(x0[None, :], (ny, nx))
    gx1 = np.broadcast_to(x1[None, :], (ny, nx))
    wy = fy[:, None, None]
    wx = fx[None, :, None]
    t00 = ad.mul(ad.gather2d(lr, gy0, gx0), (1 - wy) * (1 - wx))
    t01 = ad.mul(ad.gather2d(lr, gy0, gx1), (1 - wy) * wx)
    t10 = ad.mul(ad.gather2d(lr, gy1, gx0), wy * (1 - wx))
    t11 = ad.mul(ad.gather2d(lr, gy1, gx1), wy * wx)
    return ad.add(ad.add(t00, t01), ad.add(t10, t11))


def jbu_apply(lr, guide, p: JbuParams) -> Var:
    """One 2x joint bilateral upsampling step.

    Combined weights are the elementwise product of the spatial and range
    kernels, renormalized per pixel to sum 1, so constant inputs survive
    exactly and outputs stay inside the local LR value range.
    """
    lr_v = _val(lr)
    guide_v = _val(guide)
    if lr_v.ndim != 3 or guide_v.ndim != 3 or guide_v.shape[2] != 3:
        raise ShapeError(f"jbu_apply: bad ranks lr={lr_v.shape} guide={guide_v.shape}")
    h, w, _ = lr_v.shape
    if guide_v.shape[:2] != (2 * h, 2 * w):
        raise ShapeError(
            f"jbu_apply: guidance {guide_v.shape[:2]} must be exactly 2x the LR grid ({h}, {w})")

    r = p.radius
    k = 2 * r + 1
    gf = _guidance_features(guide, p)
    sims = ad.window_correlation(gf, r)                       # (H, W, k*k)
    tau_r = ad.exp(as_var(p.log_tau_range))
    logits = ad.div(sims, ad.reshape(ad.mul(tau_r, tau_r), (1,)))
    stable = ad.sub(logits, ad.vmax_const(logits, axis=2, keepdims=True))
    tau_s = ad.exp(as_var(p.log_tau_spatial))
    spatial = ad.reshape(spatial_kernel(r, tau_s), (1, 1, k * k))
    unnorm = ad.mul(ad.exp(stable), spatial)
    weights = ad.div(unnorm, ad.vsum(unnorm, axis=2, keepdims=True))
    samples = _half_coord_samples(lr, r)
    return ad.window_weighted_sum(weights, samples, r)


def simfeatup_upsample(lr, image, p: JbuParams, factor: int) -> Var:
    """Repeat the single shared JBU stage log2(factor) times.

    Per-stage guidance is the full image bilinearly resized to that stage's
    output resolution.
    """
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"upsample factor must be a power of 2, got {factor}")
    lr = as_var(lr)
    image_v = _val(image)
    h, w, _ = lr.shape
    if image_v.shape[0] != h * factor or image_v.shape[1] != w * factor:
        raise ShapeError(
            f"simfeatup_upsample: image {image_v.shape[:2]} != LR ({h}, {w}) x factor {factor}")
    cur = lr
    while factor > 1:
        th, tw = cur.shape[0] * 2, cur.shape[1] * 2
        guide = ad.bilinear_resize(as_var(image), th, tw) \
            if (th, tw) != image_v.shape[:2] else as_var(image)
        cur = jbu_apply(cur, guide, p)
        factor //= 2
    return cur


def crn_reconstruct(hr, p: CrnParams) -> Var:
    """HR features back to an RGB image in [-1, 1]."""
    hr = as_var(hr)
    if hr.shape[2] != _val(p.conv1_w).shape[2]:
        raise ShapeError(f"crn_reconstruct: {hr.shape[2]} channels, params expect "
                         f"{_val(p.conv1_w).shape[2]}")
    hid = ad.relu(ad.conv2d(hr, as_var(p.conv1_w), as_var(p.conv1_b)))
    out = ad.conv2d(hid, as_var(p.conv2_w), as_var(p.conv2_b))
    return ad.tanh(out)


def downsample(hr, p: DownsamplerParams, factor: int) -> Var:
    """Strided per-channel convolution with the normalized blur kernel."""
    hr = as_var(hr)
    H, W, c = hr.shape
    if H % factor or W % factor:
        raise ShapeError(f"downsample: dims ({H}, {W}) not divisible by factor {factor}")
    s = _val(p.logits).shape[0]
    oh, ow = H // factor, W // factor
    if s == factor:
        # The windows tile the input exactly; reshape instead of gathering
        # so the backward pass is a cheap reshape too.
        windows = ad.reshape(ad.transpose(ad.reshape(hr, (oh, factor, ow, factor, c)),
                                          (0, 2, 1, 3, 4)), (oh, ow, s * s, c))
    else:
        offs = np.arange(s) + (factor - s) // 2
        wy = np.clip(np.arange(oh)[:, None] * factor + offs[None, :], 0, H - 1)
        wx = np.clip(np.arange(ow)[:, None] * factor + offs[None, :], 0, W - 1)
        iy = np.broadcast_to(wy[:, None, :, None], (oh, ow, s, s)).reshape(oh, ow, s * s)
        ix = np.broadcast_to(wx[None, :, None, :], (oh, ow, s, s)).reshape(oh, ow, s * s)
        windows = ad.gather2d(hr, iy, ix)                     # (oh, ow, s*s, c)
    kernel = ad.reshape(p.kernel(), (1, 1, s * s, 1))
    return ad.vsum(ad.mul(windows, kernel), axis=2)


# ---------------------------------------------------------------------------
# checkpointing


def save_upsampler_checkpoint(directory, jbu: JbuParams, crn: CrnParams | None = None,
                              down: DownsamplerParams | None = None) -> None:
    tensors = jbu.tensors()
    roles = {"jbu": "inference"}
    if crn is not None:
        tensors.update(crn.tensors())
        roles["crn"] = "training_only"
    if down is not None:
        tensors.update(down.tensors())
        roles["downsampler"] = "training_only"
    save_checkpoint(directory, tensors, roles)


def load_upsampler_checkpoint(directory, inference_only: bool = False):
    """Returns (jbu, crn, down); crn/down are None when skipped or absent."""
    tensors, _ = load_checkpoint(directory, skip_training_only=inference_only)
    jbu = JbuParams.from_tensors(tensors)
    crn = CrnParams.from_tensors(tensors) if "crn.conv1_w" in tensors else None
    down = DownsamplerParams.from_tensors(tensors) if "downsampler.logits" in tensors else None
    return jbu, crn, down
