"""Upsampler training against the combined reconstruction losses.

The backbone stays frozen; only the JBU stage, the reconstruction head and
the downsampler learn.  Loss = feature round-trip MSE + gamma * image
reconstruction MSE, optionally averaged over augmented views.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import LastBlockParams, tap_early_features
from .autodiff import ShapeError, backward, grad_or_zero, zero_grads
from .encoder import EncoderConfig, toy_encode
from .images import read_ppm
from .upsampler import (CrnParams, DownsamplerParams, JbuParams, crn_reconstruct,
                        downsample, save_upsampler_checkpoint, simfeatup_upsample)


@dataclass
class TrainConfig:
    gamma: float = 0.1
    lr: float = 1e-3
    steps: int = 200
    batch: int = 1
    crop: int = 64
    factor: int = 8
    seed: int = 0
    augment: tuple = ()       # subset of ("flip", "translate", "zoom")

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        bad = set(self.augment) - {"flip", "translate", "zoom"}
        if bad:
            raise ValueError(f"unknown augmentation flags: {sorted(bad)}")


@dataclass
class TrainReport:
    loss_total: list = field(default_factory=list)
    loss_rec: list = field(default_factory=list)
    loss_img: list = field(default_factory=list)
    checkpoint: str = ""

    def write_jsonl(self, path):
        with open(path, "w") as f:
            for n, (t, r, i) in enumerate(zip(self.loss_total, self.loss_rec, self.loss_img)):
                f.write(json.dumps({"step": n, "loss_total": t, "loss_rec": r, "loss_img": i}) + "\n")


def loss_rec(lr_feat, jbu: JbuParams, down: DownsamplerParams, image, factor: int):
    hr = simfeatup_upsample(lr_feat, image, jbu, factor)
    return ad.mse(lr_feat, downsample(hr, down, factor))


def loss_img(hr_feat, crn: CrnParams, image):
    image_v = np.asarray(image if not isinstance(image, ad.Var) else image.value)
    hr_v = hr_feat.value if isinstance(hr_feat, ad.Var) else np.asarray(hr_feat)
    if image_v.shape[:2] != hr_v.shape[:2]:
        raise ShapeError(f"loss_img: image {image_v.shape[:2]} vs features {hr_v.shape[:2]}")
    return ad.mse(ad.as_var(image), crn_reconstruct(hr_feat, crn))


def total_loss(lr_feat, image, jbu, crn, down, gamma: float, factor: int):
    """Returns (total, rec, img) scalar Vars; total = rec + gamma * img."""
    hr = simfeatup_upsample(lr_feat, image, jbu, factor)
    rec = ad.mse(lr_feat, downsample(hr, down, factor))
    img = ad.mse(ad.as_var(image), crn_reconstruct(hr, crn))
    return ad.add(rec, ad.mul(img, gamma)), rec, img


# ---------------------------------------------------------------------------
# augmentation


def flip_image(img):
    return np.ascontiguousarray(img[:, ::-1])


def translate_image(img, dy, dx):
    """Shift with replicate fill at the vacated border."""
    h, w = img.shape[:2]
    iy = np.clip(np.arange(h) - dy, 0, h - 1)
    ix = np.clip(np.arange(w) - dx, 0, w - 1)
    return np.ascontiguousarray(img[iy[:, None], ix[None, :]])


def zoom_image(img, scale):
    """Rescale then center-crop (or replicate-pad) back to the input size."""
    h, w = img.shape[:2]
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    resized = ad.bilinear_resize(np.ascontiguousarray(img), nh, nw).value
    if nh >= h:
        y0, x0 = (nh - h) // 2, (nw - w) // 2
        return np.ascontiguousarray(resized[y0:y0 + h, x0:x0 + w])
    py, px = (h - nh) // 2, (w - nw) // 2
    iy = np.clip(np.arange(h) - py, 0, nh - 1)
    ix = np.clip(np.arange(w) - px, 0, nw - 1)
    return np.ascontiguousarray(resized[iy[:, None], ix[None, :]])


def augment_views(image, feat_fn, flags, seed: int):
    """(image, feature) pairs: the identity view plus one augmented view.

    Features are recomputed on the augmented image so the pair stays aligned.
    """
    views = [(np.asarray(image, dtype=np.float32), feat_fn(image))]
    flags = tuple(flags)
    if not flags:
        return views
    rand = np.random.default_rng(seed)
    aug = np.asarray(image, dtype=np.float32)
    patch = max(1, image.shape[0] // 8)
    if "flip" in flags and rand.random() < 0.5:
        aug = flip_image(aug)
    if "translate" in flags:
        dy, dx = rand.integers(-patch, patch + 1, size=2)
        aug = translate_image(aug, int(dy), int(dx))
    if "zoom" in flags:
        aug = zoom_image(aug, float(rand.uniform(0.75, 1.25)))
    views.append((aug, feat_fn(aug)))
    return views


# ---------------------------------------------------------------------------
# optimizer & loop


class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value, dtype=np.float64) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value, dtype=np.float64) for k, p in params.items()}

    def step(self):
        self.t += 1
        for k, p in self.params.items():
            g = grad_or_zero(p).astype(np.float64)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            p.value = (p.value.astype(np.float64)
                       - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(np.float32)


def load_corpus(corpus_dir, min_size: int):
    corpus_dir = Path(corpus_dir)
    paths = sorted(corpus_dir.glob("*.ppm"))
    if not paths:
        raise FileNotFoundError(f"no .ppm images in {corpus_dir}")
    images = []
    for path in paths:
        img = read_ppm(path)
        if img.shape[0] < min_size or img.shape[1] < min_size:
            raise ValueError(f"{path}: image {img.shape[:2]} smaller than crop {min_size}")
        images.append(img)
    return images


def train_upsampler(corpus_dir, cfg: TrainConfig, enc_cfg: EncoderConfig,
                    block: LastBlockParams | None = None,
                    checkpoint_dir=None, report_path=None,
                    progress=None):
    """Train JBU + CRN + downsampler on unlabeled crops; returns TrainReport.

    The encoder and last-block parameters are read-only throughout.
    """
    from .attention import random_last_block_params

    if cfg.crop % enc_cfg.patch_size:
        raise ValueError(f"crop {cfg.crop} not divisible by patch size {enc_cfg.patch_size}")
    images = load_corpus(corpus_dir, cfg.crop)
    if block is None:
        block = random_last_block_params(enc_cfg)

    jbu = JbuParams.init(seed=cfg.seed).as_parameters()
    crn = CrnParams.init(enc_cfg.proj_dim, seed=cfg.seed).as_parameters()
    down = DownsamplerParams.init(cfg.factor, seed=cfg.seed).as_parameters()
    params = {p.name: p for p in
              [jbu.mlp_w1, jbu.mlp_b1, jbu.mlp_w2, jbu.mlp_b2,
               jbu.log_tau_spatial, jbu.log_tau_range,
               crn.conv1_w, crn.conv1_b, crn.conv2_w, crn.conv2_b, down.logits]}
    opt = Adam(params, cfg.lr)
    rand = np.random.default_rng(cfg.seed)
    report = TrainReport()

    def feat_fn(img):
        return tap_early_features(toy_encode(img, enc_cfg), block)

    for step in range(cfg.steps):
        zero_grads(params.values())
        totals, recs, imgs = [], [], []
        loss_nodes = []
        for _ in range(cfg.batch):
            img = images[rand.integers(len(images))]
            y0 = int(rand.integers(img.shape[0] - cfg.crop + 1))
            x0 = int(rand.integers(img.shape[1] - cfg.crop + 1))
            crop = np.ascontiguousarray(img[y0:y0 + cfg.crop, x0:x0 + cfg.crop])
            views = augment_views(crop, feat_fn, cfg.augment,
                                  seed=cfg.seed * 100003 + step * 1009)
            for view_img, view_feat in views:
                total, rec, imgl = total_loss(view_feat, view_img, jbu, crn, down,
                                              cfg.gamma, cfg.factor)
                loss_nodes.append(ad.mul(total, 1.0 / (cfg.batch * len(views))))
                totals.append(float(total.value))
                recs.append(float(rec.value))
                imgs.append(float(imgl.value))
        step_loss = loss_nodes[0]
        for node in loss_nodes[1:]:
            step_loss = ad.add(step_loss, node)
        backward(step_loss)
        opt.step()
        report.loss_total.append(float(np.mean(totals)))
        report.loss_rec.append(float(np.mean(recs)))
        report.loss_img.append(float(np.mean(imgs)))
        if progress is not None:
            progress(step, report)

    if checkpoint_dir is not None:
        save_upsampler_checkpoint(
            checkpoint_dir,
            JbuParams.from_tensors(jbu.tensors()),
            CrnParams.from_tensors(crn.tensors()),
            DownsamplerParams.from_tensors(down.tensors()))
        report.checkpoint = str(checkpoint_dir)
    if report_path is not None:
        report.write_jsonl(report_path)
    return report
