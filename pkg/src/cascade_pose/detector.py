"""Template-matching object detector over one feature-pyramid level.

Every support view contributes a square template around the projection of the
object centre.  Templates are rendered at a geometric grid of scales and
matched against the target with dense multi-channel NCC; the heatmap keeps the
best score per position over all templates and scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .camera import Intrinsics, project, sample_bilinear
from .dataset import SupportSet
from .errors import NoTemplate
from .features import N_COLOR, FeatureConfig, FeaturePyramid, build_pyramid, unlift

NCC_EPS = 1e-9
MIN_TEMPLATE_TEXELS = 3


@dataclass(frozen=True)
class DetectorConfig:
    level: int = 8
    scales: tuple = tuple(float(x) for x in 2.0 ** np.linspace(-1.0, 1.0, 7))
    margin: float = 1.4  # template side / projected object diameter
    refine: bool = True  # sub-texel centre and sub-bin scale from parabola fits
    # gradient energy is unaffected by in-plane rotation, which the templates do not model
    features: str = "energy"  # energy | lifted | raw | color_energy
    # window refinement: the target is resampled at fine_steps scales either side
    # of the detection (ratio fine_ratio apart) and compared with the winning
    # support crop on a fixed fine_size grid at pyramid level fine_level
    fine_level: int = 4
    fine_steps: int = 6
    fine_ratio: float = 2 ** (1 / 24)
    fine_size: int = 128
    fine_search: int = 1  # texels of slack for the centre


@dataclass(eq=False)
class DetectionResult:
    center: np.ndarray  # (u, v) full-resolution pixels
    scale: float  # member of the configured scale grid
    score: float
    heatmap: np.ndarray  # (H_l, W_l) best NCC per texel
    peak: tuple  # (row, col) texel of the heatmap maximum
    template_index: int
    window: float  # side of the detected object window in target pixels
    scale_refined: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "center": [float(x) for x in self.center],
            "scale": self.scale,
            "scale_refined": self.scale_refined,
            "score": self.score,
            "peak": [int(x) for x in self.peak],
            "template_index": self.template_index,
            "window": self.window,
        }


def object_window(supports: SupportSet, i: int, margin: float = 1.4):
    """Projected object centre ``(u, v)`` and template side (pixels) in support view ``i``."""
    view = supports.views[i]
    c = view.pose.transform_points(supports.center[None])[0]
    uv = project(view.K, c)
    if uv is None:
        raise NoTemplate(f"support view {view.id!r} has the object behind the camera")
    dist = float(np.linalg.norm(c))
    side = margin * view.K.fx * supports.diameter * view.pose.s / dist
    return uv, side


def crop_resize(img, center, scale: float, out_size: int, template_size: float, antialias: bool = False):
    """Square window of side ``template_size * scale`` around ``center`` resampled to ``out_size``.

    Bilinear; pixels outside the source image read as 0.
    """
    if out_size < 16:
        raise ValueError("out_size must be at least 16")
    img = np.asarray(img, dtype=np.float64)
    side = float(template_size) * float(scale)
    step = side / out_size
    if antialias and step > 1.0:
        sigma = 0.5 * step
        img = ndimage.gaussian_filter(img, (sigma, sigma) + (0,) * (img.ndim - 2))
    cu, cv = float(center[0]), float(center[1])
    g = (np.arange(out_size) + 0.5) * step - 0.5 * side
    u = cu + g[None, :] + np.zeros((out_size, 1))
    v = cv + g[:, None] + np.zeros((1, out_size))
    coords = np.stack([v, u])
    chans = img[..., None] if img.ndim == 2 else img
    # pad with one ring of zeros so bilinear reads fade to 0 outside the image
    padded = np.pad(chans, ((1, 1), (1, 1), (0, 0)))
    out = np.stack(
        [ndimage.map_coordinates(padded[..., c], coords + 1.0, order=1, mode="constant", cval=0.0)
         for c in range(padded.shape[2])],
        axis=-1,
    )
    return out[..., 0] if img.ndim == 2 else out


def detector_channels(level: np.ndarray, mode: str, feature_cfg: FeatureConfig, div: int) -> np.ndarray:
    """Channels the detector correlates: the lifted level or a view of its raw channels."""
    if mode == "lifted":
        return np.asarray(level, dtype=np.float64)
    raw = unlift(level, feature_cfg, div)
    if mode == "raw":
        return raw
    energy = raw[..., N_COLOR:].sum(axis=-1, keepdims=True)
    if mode == "energy":
        return energy
    if mode == "color_energy":
        return np.concatenate([raw[..., :N_COLOR], energy], axis=-1)
    raise ValueError(f"unknown detector feature mode {mode!r}")


@dataclass(frozen=True, eq=False)
class _Template:
    view: int
    scale: float
    feat: np.ndarray  # (h, w, C) zero-mean per channel
    norm: float
    side: float  # template side at scale 1 (support pixels)


def _templates(supports: SupportSet, cfg: DetectorConfig, feature_cfg: FeatureConfig) -> list:
    key = ("detector", cfg, feature_cfg)
    if key in supports.cache:
        return supports.cache[key]
    out = []
    for i, view in enumerate(supports.views):
        uv, side = object_window(supports, i, cfg.margin)
        for s in cfg.scales:
            # the template resized to the target scale, in whole texels
            texels = int(round(side * s / cfg.level))
            if texels < MIN_TEMPLATE_TEXELS or texels * cfg.level < 32:
                continue
            crop = crop_resize(view.image, uv, 1.0, texels * cfg.level, side, antialias=True)
            lvl = build_pyramid(crop, feature_cfg).level(cfg.level)
            f = detector_channels(lvl, cfg.features, feature_cfg, cfg.level)
            f = f - f.mean(axis=(0, 1))
            n = float(np.sqrt((f * f).sum()))
            if n < NCC_EPS:
                continue
            out.append(_Template(i, float(s), f, n, side))
    supports.cache[key] = out
    return out


class _Correlator:
    """Dense NCC of many templates against one feature map via cached FFTs."""

    def __init__(self, F: np.ndarray, hmax: int, wmax: int):
        self.H, self.W, self.C = F.shape
        self.A, self.B = (hmax - 1) // 2, (wmax - 1) // 2
        P = np.pad(F, ((self.A, hmax), (self.B, wmax), (0, 0)), mode="edge").astype(np.float64)
        self.shape = P.shape[:2]
        self.FP = np.fft.rfft2(P, axes=(0, 1))
        # integral images of the channel sums and squared sums
        self.I1 = _integral(P)
        self.I2 = _integral(P * P)

    def ncc(self, T: np.ndarray, t_norm: float) -> np.ndarray:
        h, w = T.shape[:2]
        a, b = (h - 1) // 2, (w - 1) // 2
        FT = np.fft.rfft2(T, s=self.shape, axes=(0, 1))
        r = np.fft.irfft2((self.FP * np.conj(FT)).sum(axis=2), s=self.shape)
        y0, x0 = self.A - a, self.B - b
        num = r[y0 : y0 + self.H, x0 : x0 + self.W]
        s1 = _window_sums(self.I1, y0, x0, h, w, self.H, self.W)
        s2 = _window_sums(self.I2, y0, x0, h, w, self.H, self.W)
        var = np.maximum((s2 - s1 * s1 / (h * w)).sum(axis=2), 0.0)
        den = t_norm * np.sqrt(var)
        ok = den > NCC_EPS * max(t_norm, 1.0)
        out = np.zeros((self.H, self.W))
        out[ok] = num[ok] / den[ok]
        return np.clip(out, -1.0, 1.0)


def _integral(P: np.ndarray) -> np.ndarray:
    I = np.zeros((P.shape[0] + 1, P.shape[1] + 1, P.shape[2]))
    I[1:, 1:] = P.cumsum(axis=0).cumsum(axis=1)
    return I


def _window_sums(I, y0, x0, h, w, H, W):
    ys = slice(y0, y0 + H)
    xs = slice(x0, x0 + W)
    ye = slice(y0 + h, y0 + h + H)
    xe = slice(x0 + w, x0 + w + W)
    return I[ye, xe] - I[ys, xe] - I[ye, xs] + I[ys, xs]


def ncc_map(F: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Dense multi-channel NCC of template ``T`` (h, w, C) over ``F`` (H, W, C).

    Output ``[y, x]`` scores the window whose top-left texel is
    ``(y - (h - 1) // 2, x - (w - 1) // 2)``; ``F`` is edge-padded so the map
    has the shape of ``F``.  Constant windows score 0.
    """
    T = np.asarray(T, dtype=np.float64)
    T = T - T.mean(axis=(0, 1))
    n = float(np.sqrt((T * T).sum()))
    H, W = F.shape[:2]
    if n < NCC_EPS:
        return np.zeros((H, W))
    return _Correlator(np.asarray(F, dtype=np.float64), T.shape[0], T.shape[1]).ncc(T, n)


def _parabola(a: float, b: float, c: float) -> float:
    """Vertex offset in [-0.5, 0.5] of the parabola through (-1, a), (0, b), (1, c)."""
    den = a - 2.0 * b + c
    if not den < 0:
        return 0.0
    return float(np.clip(0.5 * (a - c) / den, -0.5, 0.5))


def detect(
    target: FeaturePyramid,
    supports: SupportSet,
    cfg: DetectorConfig = DetectorConfig(),
    feature_cfg: FeatureConfig = FeatureConfig(),
) -> DetectionResult:
    """Best (centre, scale) of the object in ``target`` over all templates and scales.

    Ties go to the lower scale, then to the first texel in row-major order.
    """
    temps = _templates(supports, cfg, feature_cfg)
    if not temps:
        raise NoTemplate("no support view yields a usable template")
    F = detector_channels(target.level(cfg.level), cfg.features, feature_cfg, cfg.level)
    H, W = F.shape[:2]
    corr = _Correlator(F, max(t.feat.shape[0] for t in temps), max(t.feat.shape[1] for t in temps))
    heat = np.full((H, W), -np.inf)
    maps = {}
    best = None  # (score, scale, flat index, template)
    for ti in sorted(range(len(temps)), key=lambda j: (temps[j].scale, j)):
        t = temps[ti]
        m = corr.ncc(t.feat, t.norm)
        maps[ti] = m
        np.maximum(heat, m, out=heat)
        flat = int(np.argmax(m))
        sc = float(m.flat[flat])
        # scales are visited in increasing order, so only a strictly better score
        # or an earlier texel at the same scale may replace the incumbent
        if best is None or sc > best[0] or (sc == best[0] and t.scale == best[1] and flat < best[2]):
            best = (sc, t.scale, flat, ti)
    score, scale, flat, ti = best
    py, px = divmod(flat, W)
    t = temps[ti]
    h, w = t.feat.shape[:2]
    # texel coordinates of the winning window's centre
    cy = py + (h - 1) / 2.0 - (h - 1) // 2
    cx = px + (w - 1) / 2.0 - (w - 1) // 2
    scale_ref = scale
    if cfg.refine and score > 0:
        m = maps[ti]
        if 0 < px < W - 1:
            cx += _parabola(m[py, px - 1], m[py, px], m[py, px + 1])
        if 0 < py < H - 1:
            cy += _parabola(m[py - 1, px], m[py, px], m[py + 1, px])
        scale_ref = _refine_scale(temps, maps, ti, cy, cx, cfg.scales)
    div = cfg.level
    center = np.array([(cx + 0.5) * div - 0.5, (cy + 0.5) * div - 0.5])
    return DetectionResult(
        center=center,
        scale=float(scale),
        score=float(score),
        heatmap=heat,
        peak=(int(py), int(px)),
        template_index=int(ti),
        window=float(t.side * scale_ref),
        scale_refined=float(scale_ref),
    )


def _refine_scale(temps, maps, ti, cy, cx, scales) -> float:
    """Parabola fit in log scale over the neighbouring scales of the winning view.

    Each neighbour map is read bilinearly at the texel whose window shares the
    winner's centre ``(cy, cx)``; templates of different parity are offset by
    half a texel.
    """
    t = temps[ti]
    scales = list(scales)
    k = scales.index(t.scale)
    if k == 0 or k == len(scales) - 1:
        return t.scale
    vals = []
    for s in (scales[k - 1], t.scale, scales[k + 1]):
        same = [j for j, u in enumerate(temps) if u.view == t.view and u.scale == s]
        if not same:
            return t.scale
        u = temps[same[0]]
        h, w = u.feat.shape[:2]
        y = cy - ((h - 1) / 2.0 - (h - 1) // 2)
        x = cx - ((w - 1) / 2.0 - (w - 1) // 2)
        v = sample_bilinear(maps[same[0]], (x, y))
        if v is None:
            return t.scale
        vals.append(float(v))
    step = math.log(scales[k + 1] / t.scale)
    return float(t.scale * math.exp(_parabola(*vals) * step))


def refine_window(
    image,
    det: DetectionResult,
    supports: SupportSet,
    cfg: DetectorConfig = DetectorConfig(),
    feature_cfg: FeatureConfig = FeatureConfig(),
) -> DetectionResult:
    """Continuous scale refinement of a detection against its winning support view.

    Template sizes are whole texels at the detection level, which quantizes the
    scale by a few percent.  Here the target window is resampled to a fixed grid
    at each trial scale instead, so the trial scales can be arbitrarily close.
    """
    temps = _templates(supports, cfg, feature_cfg)
    view = temps[det.template_index].view
    uv, side = object_window(supports, view, cfg.margin)
    lvl = cfg.fine_level

    def feats(crop):
        return detector_channels(build_pyramid(crop, feature_cfg).level(lvl), cfg.features, feature_cfg, lvl)

    key = ("fine_template", view, cfg, feature_cfg)
    if key not in supports.cache:
        T = feats(crop_resize(supports.views[view].image, uv, 1.0, cfg.fine_size, side, antialias=True))
        m = cfg.fine_search
        T = T[m : T.shape[0] - m, m : T.shape[1] - m]
        T = T - T.mean(axis=(0, 1))
        supports.cache[key] = (T, float(np.sqrt((T * T).sum())))
    T, tn = supports.cache[key]
    if tn < NCC_EPS:
        return det
    n = T.shape[0]
    base = det.scale_refined if math.isfinite(det.scale_refined) else det.scale
    trial = [base * cfg.fine_ratio ** j for j in range(-cfg.fine_steps, cfg.fine_steps + 1)]
    vals = []
    for s in trial:
        F = feats(crop_resize(image, det.center, 1.0, cfg.fine_size, side * s, antialias=True))
        best = -1.0
        for dy in range(2 * cfg.fine_search + 1):
            for dx in range(2 * cfg.fine_search + 1):
                w = F[dy : dy + n, dx : dx + n]
                w = w - w.mean(axis=(0, 1))
                wn = float(np.sqrt((w * w).sum()))
                if wn > NCC_EPS:
                    best = max(best, float((w * T).sum()) / (wn * tn))
        vals.append(best)
    k = int(np.argmax(vals))
    off = _parabola(vals[k - 1], vals[k], vals[k + 1]) if 0 < k < len(vals) - 1 else 0.0
    s = trial[k] * cfg.fine_ratio ** off
    return replace(det, window=float(side * s), scale_refined=float(s))


def self_detection_oracle(supports: SupportSet, K: Intrinsics, pose) -> np.ndarray:
    """Ground-truth pixel position of the object centre under ``pose``."""
    return project(K, pose.transform_points(supports.center[None])[0])
