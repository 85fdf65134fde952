"""Sparse-coding super-resolution with a learned shrinkage encoder.

The model encodes mean-centered low-resolution luminance patches with a
small unrolled iterative-shrinkage network (learned projection W,
recurrent matrix S and per-atom positive thresholds), then decodes the
sparse code to a high-resolution patch. Overlapping patches (stride 1)
are averaged; chroma is upscaled with bicubic interpolation.

Mean-centering makes flat patches encode to the zero vector, so constant
images are reproduced exactly at any training state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ContractError, DimensionError, ValidationError
from .image import RasterImage, bicubic_resize, resize_image, rgb_to_ycbcr, ycbcr_to_rgb


def soft_threshold(a: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Elementwise sign(a) * max(|a| - theta, 0) with per-element thresholds."""
    a = np.asarray(a, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if a.shape[-1] != theta.shape[-1] or theta.ndim != 1:
        raise DimensionError(f"threshold shape {theta.shape} does not match {a.shape}")
    if np.any(theta <= 0):
        raise ContractError("thresholds must be strictly positive")
    return np.sign(a) * np.maximum(np.abs(a) - theta, 0.0)


@dataclass
class ScnParams:
    """Parameters of the patch super-resolution network."""

    patch_size: int
    dict_atoms: int
    w_encode: np.ndarray      # (atoms, patch_size^2)
    s_recurrent: np.ndarray   # (atoms, atoms)
    thresholds: np.ndarray    # (atoms,), all > 0
    d_decode: np.ndarray      # ((patch_size*factor)^2, atoms)
    lista_iterations: int
    loss_trace: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        p2 = self.patch_size ** 2
        if self.w_encode.shape != (self.dict_atoms, p2):
            raise ValidationError(f"w_encode shape {self.w_encode.shape} != ({self.dict_atoms}, {p2})")
        if self.s_recurrent.shape != (self.dict_atoms, self.dict_atoms):
            raise ValidationError(f"s_recurrent shape {self.s_recurrent.shape} is not square over atoms")
        if self.thresholds.shape != (self.dict_atoms,):
            raise ValidationError(f"thresholds shape {self.thresholds.shape} != ({self.dict_atoms},)")
        if np.any(self.thresholds <= 0):
            raise ValidationError("thresholds must be strictly positive")
        if self.lista_iterations < 0:
            raise ValidationError("lista_iterations must be >= 0")
        side = np.sqrt(self.d_decode.shape[0])
        if self.d_decode.shape[1] != self.dict_atoms or side != int(side) or int(side) % self.patch_size:
            raise ValidationError(f"d_decode shape {self.d_decode.shape} incompatible with patch size {self.patch_size}")

    @property
    def factor(self) -> int:
        return int(np.sqrt(self.d_decode.shape[0])) // self.patch_size


def lista_encode(patch_vec: np.ndarray, params: ScnParams) -> np.ndarray:
    """Sparse code of one flattened patch (or a row batch of them)."""
    x = np.asarray(patch_vec, dtype=np.float64)
    if x.shape[-1] != params.patch_size ** 2:
        raise DimensionError(f"patch length {x.shape[-1]} != patch_size^2 = {params.patch_size ** 2}")
    wx = x @ params.w_encode.T
    z = soft_threshold(wx, params.thresholds)
    for _ in range(params.lista_iterations):
        z = soft_threshold(wx + z @ params.s_recurrent.T, params.thresholds)
    return z


def upscale_factor(width: int, height: int, target: int = 256) -> int:
    """Smallest integer f >= 1 with f * min(width, height) >= target."""
    if width < 1 or height < 1:
        raise ContractError(f"image dims must be positive, got {width}x{height}")
    m = min(width, height)
    return max(1, -(-target // m))


def _decode(params: ScnParams, codes: np.ndarray) -> np.ndarray:
    return codes @ params.d_decode.T


def super_resolve(image: RasterImage, factor: int, params: ScnParams) -> RasterImage:
    """Upscale by an integer factor: learned luma patches, bicubic chroma."""
    if factor < 2:
        raise ContractError(f"factor must be >= 2, got {factor}")
    if params.factor != factor:
        raise ContractError(f"params were trained for factor {params.factor}, not {factor}")
    p = params.patch_size
    h, w = image.height, image.width
    if min(h, w) < p:
        raise ContractError(f"image {w}x{h} smaller than patch size {p}")

    if image.channels == 3:
        ycc = rgb_to_ycbcr(image.pixels)
        luma = ycc[:, :, 0]
    else:
        luma = image.pixels[:, :, 0].astype(np.float64)

    y = luma / 255.0
    pf = p * factor
    win = np.lib.stride_tricks.sliding_window_view(y, (p, p))
    nh, nw = win.shape[0], win.shape[1]
    flat = win.reshape(nh * nw, p * p)
    means = flat.mean(axis=1, keepdims=True)
    codes = lista_encode(flat - means, params)
    hr = (_decode(params, codes) + means).reshape(nh, nw, pf, pf)

    out = np.zeros((h * factor, w * factor))
    weight = np.zeros_like(out)
    for di in range(pf):
        for dj in range(pf):
            out[di:di + factor * nh:factor, dj:dj + factor * nw:factor] += hr[:, :, di, dj]
            weight[di:di + factor * nh:factor, dj:dj + factor * nw:factor] += 1.0
    out /= weight
    luma_hr = np.clip(out * 255.0, 0.0, 255.0)

    if image.channels == 1:
        pixels = np.clip(np.rint(luma_hr), 0, 255).astype(np.uint8)[:, :, None]
        return RasterImage.from_array(pixels)

    chroma_hr = bicubic_resize(ycc[:, :, 1:], h * factor, w * factor)
    rgb = ycbcr_to_rgb(np.dstack([luma_hr, chroma_hr]))
    return RasterImage.from_array(np.clip(np.rint(rgb), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# training

def _init_params(patch_size, dict_atoms, factor, lista_iterations, rng):
    p2 = patch_size ** 2
    out = (patch_size * factor) ** 2
    w = ag.scaled_uniform((dict_atoms, p2), p2, rng, name="sr.w_encode")
    # damped recurrence so unrolled iterations do not amplify at init,
    # zero decoder so the initial prediction is the patch mean
    s = ag.scaled_uniform((dict_atoms, dict_atoms), dict_atoms, rng, name="sr.s_recurrent")
    s.data *= 0.25
    d = ag.Tensor(np.zeros((out, dict_atoms), dtype=np.float32),
                  requires_grad=True, name="sr.d_decode")
    log_theta = ag.Tensor(np.full(dict_atoms, np.log(0.01), dtype=np.float32),
                          requires_grad=True, name="sr.log_theta")
    return w, s, d, log_theta


def _forward_batch(x, w, s, d, log_theta, iterations):
    theta = ag.exp(log_theta)
    wx = ag.affine_rows(x, w)
    z = ag.shrink(wx, theta)
    for _ in range(iterations):
        z = ag.shrink(ag.add(wx, ag.affine_rows(z, s)), theta)
    return ag.affine_rows(z, d)


def _to_params(patch_size, dict_atoms, iterations, w, s, d, log_theta, trace):
    return ScnParams(
        patch_size=patch_size,
        dict_atoms=dict_atoms,
        w_encode=w.data.astype(np.float64),
        s_recurrent=s.data.astype(np.float64),
        thresholds=np.exp(log_theta.data).astype(np.float64),
        d_decode=d.data.astype(np.float64),
        lista_iterations=iterations,
        loss_trace=list(trace),
    )


def train_scn(pairs, factor: int, epochs: int, patch_size: int = 8,
              dict_atoms: int = 64, lista_iterations: int = 3,
              learning_rate: float = 0.1, batch_size: int = 32,
              seed: int = 0) -> ScnParams:
    """Fit the patch network to (LR patch, HR patch) pairs by SGD on MSE.

    Patches are flat vectors in [0, 1]. Both patches of a pair are
    centered by the LR patch mean before fitting, matching how
    super_resolve reconstructs. After each epoch the full training loss
    is evaluated; an epoch that increased it is rolled back and the step
    size halved, so the recorded loss trace is non-increasing.
    """
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], np.ndarray):
        x, y = pairs
    else:
        pairs = list(pairs)
        if not pairs:
            raise ContractError("no training pairs given")
        x = np.stack([np.asarray(a, dtype=np.float64).reshape(-1) for a, _ in pairs])
        y = np.stack([np.asarray(b, dtype=np.float64).reshape(-1) for _, b in pairs])
    if x.shape[0] == 0:
        raise ContractError("no training pairs given")
    if x.shape[1] != patch_size ** 2:
        raise DimensionError(f"LR patches length {x.shape[1]} != {patch_size ** 2}")
    if y.shape[1] != (patch_size * factor) ** 2:
        raise DimensionError(f"HR patches length {y.shape[1]} != {(patch_size * factor) ** 2}")

    means = x.mean(axis=1, keepdims=True)
    xc = (x - means).astype(np.float32)
    yc = (y - means).astype(np.float32)

    rng = np.random.default_rng(seed)
    w, s, d, log_theta = _init_params(patch_size, dict_atoms, factor, lista_iterations, rng)
    params = [w, s, d, log_theta]

    def full_loss():
        pred = _forward_batch(ag.Tensor(xc), w, s, d, log_theta, lista_iterations)
        return float(np.mean((pred.data - yc) ** 2))

    trace = [full_loss()]
    if epochs == 0:
        return _to_params(patch_size, dict_atoms, lista_iterations, w, s, d, log_theta, trace[1:])

    n = xc.shape[0]
    out_dim = yc.shape[1]
    lr = learning_rate
    velocity: dict = {}
    snapshot = [p.data.copy() for p in params]
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            with ag.Graph() as g:
                pred = _forward_batch(ag.Tensor(xc[idx]), w, s, d, log_theta, lista_iterations)
                diff = ag.sub(pred, ag.Tensor(yc[idx]))
                # mean over the batch of per-patch squared error; same optimum
                # as the per-element MSE reported in the trace, larger steps
                loss = ag.scale(ag.mean_all(ag.mul(diff, diff)), float(out_dim))
            ag.backward(g, loss)
            ag.sgd_step(params, lr, 0.9, velocity)
        cur = full_loss()
        if not np.isfinite(cur) or cur > trace[-1] + 1e-9:
            for p, snap in zip(params, snapshot):
                p.data[...] = snap
            lr *= 0.5
            velocity.clear()
            trace.append(trace[-1])
        else:
            snapshot = [p.data.copy() for p in params]
            trace.append(cur)

    return _to_params(patch_size, dict_atoms, lista_iterations, w, s, d, log_theta, trace)


def sample_patch_pairs(images, count: int, factor: int, patch_size: int = 8,
                       rng: np.random.Generator | None = None):
    """Random (LR, HR) patch pairs from images, as ([N,p^2], [N,(p*f)^2]) in [0,1]."""
    if rng is None:
        rng = np.random.default_rng(0)
    pf = patch_size * factor
    xs, ys = [], []
    usable = [im for im in images if im.height >= pf and im.width >= pf]
    if not usable:
        raise ContractError(f"no image large enough for {pf}x{pf} patches")
    for _ in range(count):
        im = usable[rng.integers(len(usable))]
        from .image import luminance
        luma = luminance(im) / 255.0
        i = int(rng.integers(im.height - pf + 1))
        j = int(rng.integers(im.width - pf + 1))
        hr = luma[i:i + pf, j:j + pf]
        lr = bicubic_resize(hr, patch_size, patch_size)
        xs.append(lr.reshape(-1))
        ys.append(hr.reshape(-1))
    return np.stack(xs), np.stack(ys)


def save_scn(path, params: ScnParams) -> None:
    """Persist in the shared checkpoint format, with a meta tensor for shape."""
    meta = np.array([params.patch_size, params.dict_atoms,
                     params.lista_iterations, params.factor], dtype=np.float32)
    ag.save_checkpoint(path, [
        ("meta", ag.Tensor(meta)),
        ("w_encode", ag.Tensor(params.w_encode.astype(np.float32))),
        ("s_recurrent", ag.Tensor(params.s_recurrent.astype(np.float32))),
        ("thresholds", ag.Tensor(params.thresholds.astype(np.float32))),
        ("d_decode", ag.Tensor(params.d_decode.astype(np.float32))),
    ])


def load_scn(path) -> ScnParams:
    state = ag.load_checkpoint(path)
    for key in ("meta", "w_encode", "s_recurrent", "thresholds", "d_decode"):
        if key not in state:
            raise ValidationError(f"{path}: missing {key}")
    meta = state["meta"].data
    return ScnParams(
        patch_size=int(meta[0]), dict_atoms=int(meta[1]),
        w_encode=state["w_encode"].data.astype(np.float64),
        s_recurrent=state["s_recurrent"].data.astype(np.float64),
        thresholds=state["thresholds"].data.astype(np.float64),
        d_decode=state["d_decode"].data.astype(np.float64),
        lista_iterations=int(meta[2]),
    )


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB."""
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


# ---------------------------------------------------------------------------
# QA comparisons

def histogram(image: RasterImage) -> np.ndarray:
    """(channels, 256) counts of 8-bit sample values."""
    px = image.pixels
    return np.stack([np.bincount(px[:, :, c].reshape(-1), minlength=256)
                     for c in range(image.channels)])


def histogram_distance(h1: np.ndarray, h2: np.ndarray) -> float:
    """Mean over channels of the L1 distance between count-normalized histograms."""
    h1 = np.atleast_2d(np.asarray(h1, dtype=np.float64))
    h2 = np.atleast_2d(np.asarray(h2, dtype=np.float64))
    if h1.shape != h2.shape:
        raise ContractError(f"histogram shapes differ: {h1.shape} vs {h2.shape}")
    n1 = h1.sum(axis=1, keepdims=True)
    n2 = h2.sum(axis=1, keepdims=True)
    if np.any(n1 == 0) or np.any(n2 == 0):
        raise ContractError("histograms must have positive total count")
    return float(np.abs(h1 / n1 - h2 / n2).sum(axis=1).mean())


def simulate_sr_roundtrip(image: RasterImage, shrink: float, params: ScnParams,
                          target: int = 256) -> tuple[RasterImage, RasterImage]:
    """Side-by-side pair: plain resize to target vs shrink -> SR -> resize.

    Mirrors the QA procedure of shrinking a high-resolution image, lifting
    it back with the learned model and comparing against a plain resize.
    """
    if not 0.0 < shrink < 1.0:
        raise ContractError(f"shrink must be in (0, 1), got {shrink}")
    plain = resize_image(image, target, target)
    w2 = max(1, int(round(image.width * shrink)))
    h2 = max(1, int(round(image.height * shrink)))
    small = resize_image(image, w2, h2)
    f = upscale_factor(w2, h2, target)
    lifted = super_resolve(small, f, params) if f >= 2 else small
    return plain, resize_image(lifted, target, target)
