"""Per-image-pair perceptual measurements (low / mid / high level), the
distribution-level Frechet distance, and detection-set comparison.

Every function here is pure: identical inputs give identical outputs across
runs and thread counts.  External-network features (depth maps, semantic
embeddings, detections) arrive through files; nothing here runs a network.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.signal import fftconvolve

from fovgen.errors import ConfigError, DomainError, GeometryError, NumericError

GABOR_ORIENTATIONS = (0.0, 45.0, 90.0, 135.0)

# Single-scale even-phase bank; the shape parameters are one documented
# configuration (only the four orientations are externally fixed).
GABOR_WAVELENGTH = 8.0
GABOR_SIGMA = 4.0
GABOR_ASPECT = 0.5
GABOR_RADIUS = 8

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_MAX = 4.0 * math.sqrt(2.0)  # max gradient magnitude for [0,1] images


def to_gray(pixels: np.ndarray) -> np.ndarray:
    if pixels.ndim == 3:
        return pixels.mean(axis=2)
    return pixels


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise GeometryError(f"image shapes differ: {a.shape} vs {b.shape}")


def gabor_kernel(orientation_deg: float) -> np.ndarray:
    """Even-phase, zero-mean kernel; ``orientation`` is the direction the
    preferred bars run (0 deg = horizontal bars, carrier along y)."""
    th = math.radians(orientation_deg)
    r = GABOR_RADIUS
    y, x = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
    u = x * math.cos(th) + y * math.sin(th)       # along the bars
    v = -x * math.sin(th) + y * math.cos(th)      # across the bars
    g = np.exp(-(v**2 + (GABOR_ASPECT * u) ** 2) / (2 * GABOR_SIGMA**2))
    g *= np.cos(2 * math.pi * v / GABOR_WAVELENGTH)
    return g - g.mean()


def gabor_response(pixels: np.ndarray, orientation_deg: float) -> float:
    """Mean rectified filter response, normalized by mean intensity."""
    gray = to_gray(pixels)
    denom = float(gray.mean())
    if denom < 1e-8:
        return 0.0
    resp = fftconvolve(gray, gabor_kernel(orientation_deg), mode="valid")
    return float(np.abs(resp).mean() / denom)


def gabor_diff(orig: np.ndarray, gen: np.ndarray, orientation_deg: float) -> float:
    """Positive when the generated image carries stronger oriented texture."""
    if orientation_deg not in GABOR_ORIENTATIONS:
        raise ConfigError(f"orientation must be one of {GABOR_ORIENTATIONS}")
    _check_same_shape(to_gray(orig), to_gray(gen))
    return gabor_response(gen, orientation_deg) - gabor_response(orig, orientation_deg)


def sobel_density(pixels: np.ndarray) -> float:
    gray = to_gray(pixels)
    gx = fftconvolve(gray, _SOBEL_X, mode="valid")
    gy = fftconvolve(gray, _SOBEL_X.T, mode="valid")
    return float(np.sqrt(gx**2 + gy**2).mean())


def sobel_edge_diff(orig: np.ndarray, gen: np.ndarray) -> float:
    _check_same_shape(to_gray(orig), to_gray(gen))
    return (sobel_density(gen) - sobel_density(orig)) / _SOBEL_MAX


def psnr(orig: np.ndarray, gen: np.ndarray) -> float:
    """10 log10(1/MSE) for [0,1] images, capped at 99 dB."""
    _check_same_shape(np.asarray(orig), np.asarray(gen))
    mse = float(np.mean((np.asarray(orig, dtype=np.float64) - np.asarray(gen, dtype=np.float64)) ** 2))
    return min(99.0, 10.0 * math.log10(1.0 / max(mse, 1e-10)))


def layer_cosine(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    a = np.asarray(feats_a, dtype=np.float64).ravel()
    b = np.asarray(feats_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise GeometryError(f"feature shapes differ: {feats_a.shape} vs {feats_b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine similarity undefined for zero features")
    return float(np.dot(a, b) / (na * nb))


# ---------------------------------------------------------------------------
# depth


def _check_depth(d: np.ndarray):
    d = np.asarray(d, dtype=np.float64)
    if (d <= 0).any():
        raise DomainError("depth maps must be strictly positive")
    return d


def silog(d_pred: np.ndarray, d_ref: np.ndarray, lambda_variance: float = 0.85, scale: float = 10.0) -> float:
    """Scale-invariant log error: scale * sqrt(mean(g^2) - lam * mean(g)^2)."""
    p, r = _check_depth(d_pred), _check_depth(d_ref)
    _check_same_shape(p, r)
    g = np.log(p) - np.log(r)
    val = float(np.mean(g**2) - lambda_variance * np.mean(g) ** 2)
    return scale * math.sqrt(max(val, 0.0))


def depth_rmse(d_pred: np.ndarray, d_ref: np.ndarray) -> float:
    p, r = _check_depth(d_pred), _check_depth(d_ref)
    _check_same_shape(p, r)
    return float(np.sqrt(np.mean((p - r) ** 2)))


def depth_threshold_accuracy(d_pred: np.ndarray, d_ref: np.ndarray, k: float) -> float:
    """Fraction of pixels with max(pred/ref, ref/pred) < 1.25**k."""
    p, r = _check_depth(d_pred), _check_depth(d_ref)
    _check_same_shape(p, r)
    ratio = np.maximum(p / r, r / p)
    return float(np.mean(ratio < 1.25**k))


# ---------------------------------------------------------------------------
# proto-object segmentation overlap


def _kmeans(points: np.ndarray, k: int, seed: int = 0, restarts: int = 10, iters: int = 50):
    """Deterministic seeded Lloyd's with restarts; returns labels."""
    n = points.shape[0]
    k = min(k, n)
    rng = np.random.default_rng(seed)
    best_labels, best_inertia = None, np.inf
    for _ in range(restarts):
        centers = points[rng.choice(n, size=k, replace=False)]
        labels = np.zeros(n, dtype=int)
        for _ in range(iters):
            d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = d2.argmin(axis=1)
            if (new_labels == labels).all():
                labels = new_labels
                break
            labels = new_labels
            for j in range(k):
                sel = labels == j
                if sel.any():
                    centers[j] = points[sel].mean(axis=0)
        inertia = float(((points - centers[labels]) ** 2).sum())
        if inertia < best_inertia - 1e-12:
            best_inertia, best_labels = inertia, labels
    return best_labels


def segmentation_iou_matrix(labels_a: np.ndarray, labels_b: np.ndarray) -> np.ndarray:
    la, lb = np.unique(labels_a), np.unique(labels_b)
    iou = np.zeros((la.size, lb.size))
    for i, a in enumerate(la):
        ma = labels_a == a
        for j, b in enumerate(lb):
            mb = labels_b == b
            inter = np.logical_and(ma, mb).sum()
            union = np.logical_or(ma, mb).sum()
            iou[i, j] = inter / union if union else 0.0
    return iou


def matched_miou(labels_a: np.ndarray, labels_b: np.ndarray) -> float:
    """Maximum-weight bipartite matching on the class IoU matrix."""
    iou = segmentation_iou_matrix(labels_a, labels_b)
    rows, cols = linear_sum_assignment(-iou)
    return float(iou[rows, cols].mean())


def proto_object_miou(feats_a: np.ndarray, feats_b: np.ndarray, clusters: int = 5, seed: int = 0) -> float:
    """Cluster both feature maps into proto-object segmentations, optimally
    match labels, and average the matched IoUs."""
    a, b = np.asarray(feats_a, dtype=np.float64), np.asarray(feats_b, dtype=np.float64)
    if a.shape != b.shape:
        raise GeometryError(f"feature maps differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    pa = a.reshape(-1, a.shape[-1])
    pb = b.reshape(-1, b.shape[-1])
    la = _kmeans(pa, clusters, seed=seed)
    lb = _kmeans(pb, clusters, seed=seed)
    return matched_miou(la, lb)


# ---------------------------------------------------------------------------
# embeddings


def embed_similarity(e_a: np.ndarray, e_b: np.ndarray) -> float:
    a, b = np.asarray(e_a).ravel(), np.asarray(e_b).ravel()
    if a.shape != b.shape:
        raise GeometryError(f"embedding dims differ: {a.size} vs {b.size}")
    return layer_cosine(a, b)


def embed_distance(e_a: np.ndarray, e_b: np.ndarray) -> float:
    """1 - cosine; lower means closer (semantic-distance convention)."""
    return 1.0 - embed_similarity(e_a, e_b)


# ---------------------------------------------------------------------------
# Frechet distance between Gaussian feature fits


def fid(features_a: np.ndarray, features_b: np.ndarray, eps: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)); the trace of the
    matrix square root comes from the eigendecomposition of the symmetrized
    product Sa^(1/2) Sb Sa^(1/2)."""
    a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise GeometryError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    d = a.shape[1]
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + eps * np.eye(d)
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + eps * np.eye(d)
    if not (np.isfinite(cov_a).all() and np.isfinite(cov_b).all()):
        raise NumericError("non-finite covariance")
    wa, va = np.linalg.eigh(cov_a)
    root_a = (va * np.sqrt(np.clip(wa, 0.0, None))) @ va.T
    prod = root_a @ cov_b @ root_a
    wp = np.linalg.eigh((prod + prod.T) / 2.0)[0]
    tr_sqrt = np.sqrt(np.clip(wp, 0.0, None)).sum()
    val = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    if not math.isfinite(val):
        raise NumericError("non-finite Frechet distance")
    return val


# ---------------------------------------------------------------------------
# detection-set comparison


@dataclass
class Detection:
    class_id: int
    box: tuple  # (x0, y0, x1, y1)
    confidence: float


@dataclass
class DetectionSet:
    detections: list
    image_size: tuple = (448, 448)  # (width, height)

    def __post_init__(self):
        w, h = self.image_size
        for det in self.detections:
            x0, y0, x1, y1 = det.box
            if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                raise DomainError(f"box {det.box} outside {self.image_size} bounds")
            if not (0.0 <= det.confidence <= 1.0):
                raise DomainError(f"confidence {det.confidence} outside [0, 1]")

    def by_class(self) -> dict:
        out: dict[int, list] = {}
        for det in self.detections:
            out.setdefault(det.class_id, []).append(det)
        return out


def load_detections(path) -> DetectionSet:
    data = json.loads(open(path, encoding="utf-8").read())
    dets = [Detection(int(d["class_id"]), tuple(d["box"]), float(d["confidence"])) for d in data["detections"]]
    return DetectionSet(dets, tuple(data.get("image_size", (448, 448))))


def box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def _greedy_match(refs, preds, tau):
    """Confidence-ordered greedy matching; returns per-pred TP flags."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    taken = [False] * len(refs)
    tp = [False] * len(preds)
    for i in order:
        best, best_iou = -1, tau  # candidate must reach the threshold
        for j, r in enumerate(refs):
            if taken[j]:
                continue
            v = box_iou(preds[i].box, r.box)
            if v >= best_iou:
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
            tp[i] = True
    return order, tp


def _average_precision(refs, preds, tau) -> float:
    if not refs:
        return 1.0 if not preds else 0.0
    if not preds:
        return 0.0
    order, tp = _greedy_match(refs, preds, tau)
    flags = [tp[i] for i in order]  # confidence-descending TP flags
    tps = np.cumsum(flags)
    fps = np.cumsum([not f for f in flags])
    recall = tps / len(refs)
    precision = tps / np.maximum(tps + fps, 1)
    # all-point interpolation
    ap, prev_r = 0.0, 0.0
    for i in range(len(flags)):
        if flags[i]:
            p_interp = precision[i:].max()
            ap += (recall[i] - prev_r) * p_interp
            prev_r = recall[i]
    return float(ap)


def detection_compare(det_ref: DetectionSet, det_gen: DetectionSet, iou_thresholds=(0.5, 0.75)) -> dict:
    """Inventory comparison of generated vs reference detections.

    precision/recall/f1 are micro-averaged at the lowest threshold; AP is
    averaged over the union of classes, per threshold and overall.
    """
    iou_thresholds = tuple(sorted(iou_thresholds))
    ref_cls, gen_cls = det_ref.by_class(), det_gen.by_class()
    classes = sorted(set(ref_cls) | set(gen_cls))
    out = {}
    maps = []
    for tau in iou_thresholds:
        tp = fp = fn = 0
        aps = []
        for c in classes:
            refs = ref_cls.get(c, [])
            preds = gen_cls.get(c, [])
            _, flags = _greedy_match(refs, preds, tau)
            ctp = sum(flags)
            tp += ctp
            fp += len(preds) - ctp
            fn += len(refs) - ctp
            aps.append(_average_precision(refs, preds, tau))
        map_tau = float(np.mean(aps)) if aps else 1.0
        maps.append(map_tau)
        out[f"map@{tau:.2f}"] = map_tau
        if tau == iou_thresholds[0]:
            if tp + fp == 0:
                prec = 1.0 if fn == 0 else 0.0
            else:
                prec = tp / (tp + fp)
            rec = 1.0 if tp + fn == 0 else tp / (tp + fn)
            f1 = 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
            out.update(precision=float(prec), recall=float(rec), f1=float(f1))
    out["map"] = float(np.mean(maps))
    return out


# ---------------------------------------------------------------------------
# per-pair feature report


@dataclass
class FeatureReport:
    pair_id: str
    gabor_diff_0: float
    gabor_diff_45: float
    gabor_diff_90: float
    gabor_diff_135: float
    sobel_diff: float
    psnr_db: float
    layer_cosine_early: float
    layer_cosine_mid: float
    layer_cosine_late: float
    silog: float
    depth_rmse: float
    depth_delta_0_25: float
    depth_delta_1: float
    depth_delta_2: float
    depth_delta_3: float
    proto_miou: float
    embed_cosine: float
    embed_distance: float

    def __post_init__(self):
        for name in ("layer_cosine_early", "layer_cosine_mid", "layer_cosine_late", "embed_cosine"):
            v = getattr(self, name)
            if not -1.0 - 1e-9 <= v <= 1.0 + 1e-9:
                raise DomainError(f"{name}={v} outside [-1, 1]")
        for name in ("proto_miou", "depth_delta_0_25", "depth_delta_1", "depth_delta_2", "depth_delta_3"):
            v = getattr(self, name)
            if not -1e-9 <= v <= 1.0 + 1e-9:
                raise DomainError(f"{name}={v} outside [0, 1]")
        vals = [getattr(self, f.name) for f in fields(self) if f.name != "pair_id"]
        if not np.isfinite(vals).all():
            raise DomainError("feature report contains non-finite values")


CSV_COLUMNS = [f.name for f in fields(FeatureReport)]


def write_report_csv(path, reports: list):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in sorted(reports, key=lambda r: r.pair_id):
            w.writerow([getattr(r, c) for c in CSV_COLUMNS])


def read_report_csv(path) -> list:
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for row in reader:
            kwargs = {"pair_id": row["pair_id"]}
            kwargs.update({c: float(row[c]) for c in CSV_COLUMNS if c != "pair_id"})
            out.append(FeatureReport(**kwargs))
    return out


def toy_depth_proxy(pixels: np.ndarray) -> np.ndarray:
    """Stand-in relative depth when no external depth maps are supplied:
    smoothed inverse luminance plus a floor keeping it strictly positive."""
    from fovgen.foveation import resize_image

    gray = to_gray(pixels)
    h, w = gray.shape
    small = resize_image((1.2 - gray)[:, :, None], max(h // 4, 1), max(w // 4, 1))
    smooth = resize_image(small, h, w)[:, :, 0]
    return np.clip(smooth, 0.05, None)


class PairFeatureExtractor:
    """Computes a FeatureReport for an (original, generated) pair.

    Layer features come from denoiser activation taps when a model is given,
    otherwise from the patch-token grid at three pooling levels.  Depth uses
    PFM files when provided, else the toy proxy.  Embeddings are the pooled
    patch tokens unless explicit vectors are passed.
    """

    def __init__(self, encoder, model=None, clusters: int = 5, seed: int = 0):
        self.encoder = encoder
        self.model = model
        self.clusters = clusters
        self.seed = seed

    def _layer_feats(self, pixels):
        """Early/mid/late maps in (H, W, C) layout."""
        if self.model is not None:
            taps = self.model.denoiser_features(pixels[None])
            return {k: np.moveaxis(v[0], 0, -1) for k, v in taps.items()}
        grid = self.encoder.encode_batch(pixels[None])[0]
        g = grid.shape[0]
        mid = grid.reshape(g // 2, 2, g // 2, 2, -1).mean(axis=(1, 3))
        return {"early": grid, "mid": mid, "late": grid.mean(axis=(0, 1))}

    def extract(
        self,
        pair_id: str,
        orig: np.ndarray,
        gen: np.ndarray,
        depth_orig: np.ndarray | None = None,
        depth_gen: np.ndarray | None = None,
        embed_orig: np.ndarray | None = None,
        embed_gen: np.ndarray | None = None,
    ) -> FeatureReport:
        d_ref = toy_depth_proxy(orig) if depth_orig is None else depth_orig
        d_gen = toy_depth_proxy(gen) if depth_gen is None else depth_gen
        e_ref = self.encoder.pooled_batch(orig[None])[0] if embed_orig is None else embed_orig
        e_gen = self.encoder.pooled_batch(gen[None])[0] if embed_gen is None else embed_gen
        fo = self._layer_feats(orig)
        fg = self._layer_feats(gen)
        gd = {o: gabor_diff(orig, gen, o) for o in GABOR_ORIENTATIONS}
        return FeatureReport(
            pair_id=pair_id,
            gabor_diff_0=gd[0.0],
            gabor_diff_45=gd[45.0],
            gabor_diff_90=gd[90.0],
            gabor_diff_135=gd[135.0],
            sobel_diff=sobel_edge_diff(orig, gen),
            psnr_db=psnr(orig, gen),
            layer_cosine_early=layer_cosine(fo["early"], fg["early"]),
            layer_cosine_mid=layer_cosine(fo["mid"], fg["mid"]),
            layer_cosine_late=layer_cosine(fo["late"], fg["late"]),
            silog=silog(d_gen, d_ref),
            depth_rmse=depth_rmse(d_gen, d_ref),
            depth_delta_0_25=depth_threshold_accuracy(d_gen, d_ref, 0.25),
            depth_delta_1=depth_threshold_accuracy(d_gen, d_ref, 1.0),
            depth_delta_2=depth_threshold_accuracy(d_gen, d_ref, 2.0),
            depth_delta_3=depth_threshold_accuracy(d_gen, d_ref, 3.0),
            proto_miou=proto_object_miou(fo["mid"], fg["mid"], self.clusters, self.seed),
            embed_cosine=embed_similarity(e_ref, e_gen),
            embed_distance=embed_distance(e_ref, e_gen),
        )


def build_reports(jobs, extractor: PairFeatureExtractor, workers: int = 2) -> list:
    """jobs: iterable of dicts accepted by extractor.extract; fan out across a
    thread pool and return reports sorted by pair id."""
    jobs = list(jobs)
    if workers <= 1:
        reports = [extractor.extract(**j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            reports = list(ex.map(lambda j: extractor.extract(**j), jobs))
    return sorted(reports, key=lambda r: r.pair_id)
