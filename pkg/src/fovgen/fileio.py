"""On-disk formats: PTGR token grids, VEC1 vectors, PFM depth maps, PNG,
JSONL trial logs, and model checkpoints."""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from fovgen.errors import IngestionError

PTGR_MAGIC = b"PTGR"
VEC1_MAGIC = b"VEC1"


# ---------------------------------------------------------------------------
# PTGR: G x G x D float32 patch-token grids


def save_ptgr(path, tokens: np.ndarray, provenance: str = "toy-encoder", extra: dict | None = None):
    tokens = np.asarray(tokens, dtype=np.float32)
    if tokens.ndim != 3 or tokens.shape[0] != tokens.shape[1]:
        raise IngestionError(f"PTGR expects (G, G, D) tokens, got {tokens.shape}")
    g, _, d = tokens.shape
    path = Path(path)
    with open(path, "wb") as f:
        f.write(PTGR_MAGIC)
        f.write(struct.pack("<II", g, d))
        f.write(tokens.astype("<f4").tobytes())
    sidecar = {"provenance": provenance, "grid_size": g, "dim": d}
    if extra:
        sidecar.update(extra)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def load_ptgr(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != PTGR_MAGIC:
        raise IngestionError(f"{path}: not a PTGR file")
    g, d = struct.unpack("<II", raw[4:12])
    expected = 12 + g * g * d * 4
    if len(raw) != expected:
        raise IngestionError(f"{path}: truncated PTGR payload ({len(raw)} vs {expected} bytes)")
    tokens = np.frombuffer(raw[12:], dtype="<f4").reshape(g, g, d).copy()
    if not np.isfinite(tokens).all():
        raise IngestionError(f"{path}: non-finite token values")
    meta = {}
    sidecar = path.with_suffix(path.suffix + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    return tokens, meta


# ---------------------------------------------------------------------------
# VEC1: flat float32 embedding vectors


def save_vec1(path, vec: np.ndarray):
    vec = np.asarray(vec, dtype=np.float32).ravel()
    with open(path, "wb") as f:
        f.write(VEC1_MAGIC)
        f.write(struct.pack("<I", vec.size))
        f.write(vec.astype("<f4").tobytes())


def load_vec1(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != VEC1_MAGIC:
        raise IngestionError(f"{path}: not a VEC1 file")
    (n,) = struct.unpack("<I", raw[4:8])
    if len(raw) != 8 + 4 * n:
        raise IngestionError(f"{path}: truncated VEC1 payload")
    vec = np.frombuffer(raw[8:], dtype="<f4").copy()
    if not np.isfinite(vec).all():
        raise IngestionError(f"{path}: non-finite values")
    return vec


# ---------------------------------------------------------------------------
# PFM depth maps (grayscale "Pf" variant, rows bottom-to-top per the format)


def save_pfm(path, values: np.ndarray):
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise IngestionError("PFM writer expects a 2-D map")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale = little-endian
        f.write(values[::-1].astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() != b"Pf":
        raise IngestionError(f"{path}: not a grayscale PFM file")
    try:
        w, h = (int(v) for v in parts[1].split())
        scale = float(parts[2])
    except ValueError as e:
        raise IngestionError(f"{path}: malformed PFM header") from e
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(parts[3][: w * h * 4], dtype=dtype)
    if data.size != w * h:
        raise IngestionError(f"{path}: truncated PFM payload")
    vals = data.reshape(h, w)[::-1].astype(np.float32)
    if not np.isfinite(vals).all():
        raise IngestionError(f"{path}: non-finite depth values")
    return vals


# ---------------------------------------------------------------------------
# PNG


def save_png(path, pixels: np.ndarray):
    """pixels (H, W, 3) in [0, 1] -> 8-bit PNG with deterministic encoding."""
    arr = np.clip(np.asarray(pixels), 0.0, 1.0)
    img = Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB")
    img.save(path, format="PNG", compress_level=6)


def png_bytes(pixels: np.ndarray) -> bytes:
    arr = np.clip(np.asarray(pixels), 0.0, 1.0)
    img = Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def load_png(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


# ---------------------------------------------------------------------------
# JSONL


def append_jsonl(path, record: dict):
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


# ---------------------------------------------------------------------------
# checkpoints

CKPT_FORMAT = "fovgen-checkpoint"
CKPT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict):
    header = {"format": CKPT_FORMAT, "version": CKPT_VERSION, **meta}
    payload = {"__meta__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for k, v in arrays.items():
        payload[k] = v
    with open(path, "wb") as f:
        np.savez(f, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z:
            raise IngestionError(f"{path}: missing checkpoint header")
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CKPT_FORMAT:
            raise IngestionError(f"{path}: not a {CKPT_FORMAT} file")
        if meta.get("version") != CKPT_VERSION:
            raise IngestionError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    return arrays, meta


def file_sha256(path, short: int = 16) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:short]
