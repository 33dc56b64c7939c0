"""Binary and JSON interchange formats.

RFT (feature maps):
    magic "RFT1"
    7 little-endian u32: h_patches, w_patches, dim, image_h, image_w,
        patch_size, flags
    float32 payload of length h_patches * w_patches * dim (row-major)
    if flags bit 0 is set, a pooling-head block follows:
        u32 d_t (must equal dim), u32 n_heads, then float32 payloads for
        query (d_t), w_q, w_k, w_v, w_o (each d_t * d_t)

RTOK (token sets):
    magic "RTOK"; u32 n, d_model, D; float32 ren block (n * d_model);
    float32 aligned block (n * D); optional trailing float32 prompt block
    (n * 2). Files without the prompt block load with zeroed prompts.

RENC (checkpoints):
    magic "RENC"; u32 d_model, n_blocks, n_heads, encoder_dim, ffn_mult,
    n_tensors; then per tensor: u32 name length, UTF-8 name, float32 payload
    whose shape is implied by (name, config). Unknown names are rejected.

Scenes and masks are UTF-8 JSON documents; see scene_to_dict/mask_to_dict
for the key names.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dataplane import PatchFeatureMap, RegionMask, TokenSet
from .errors import FormatError, ValidationError
from .extension import PoolingHead
from .model import RenConfig, RenParams, expected_shapes, params_from_dict
from .synth import SceneRegion, SyntheticScene

_U32 = np.dtype("<u4")
_F32 = np.dtype("<f4")


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise FormatError(f"{self.path}: truncated (needed {count} bytes "
                              f"at offset {self.pos})")
        out = self.data[self.pos:self.pos + count]
        self.pos += count
        return out

    def u32(self, count: int = 1) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype=_U32)

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype=_F32)

    def expect_magic(self, magic: bytes):
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(f"{self.path}: bad magic {got!r}, expected {magic!r}")

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def done(self):
        if self.remaining():
            raise FormatError(f"{self.path}: {self.remaining()} unexpected trailing bytes")


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype=_F32).tobytes()


def _u32_bytes(*values: int) -> bytes:
    return np.array(values, dtype=_U32).tobytes()


# ---------------------------------------------------------------------------
# RFT

def write_feature_map(path, fmap: PatchFeatureMap,
                      pooling_head: PoolingHead | None = None) -> None:
    flags = 1 if pooling_head is not None else 0
    chunks = [b"RFT1",
              _u32_bytes(fmap.h_patches, fmap.w_patches, fmap.dim,
                         fmap.image_h, fmap.image_w, fmap.patch_size, flags),
              _f32_bytes(fmap.data)]
    if pooling_head is not None:
        if pooling_head.dim != fmap.dim:
            raise ValidationError("pooling head dim differs from feature dim")
        chunks.append(_u32_bytes(pooling_head.dim, pooling_head.n_heads))
        for arr in (pooling_head.query, pooling_head.w_q, pooling_head.w_k,
                    pooling_head.w_v, pooling_head.w_o):
            chunks.append(_f32_bytes(arr))
    Path(path).write_bytes(b"".join(chunks))


def read_feature_map(path) -> tuple[PatchFeatureMap, PoolingHead | None]:
    reader = _Reader(Path(path).read_bytes(), str(path))
    reader.expect_magic(b"RFT1")
    h, w, dim, image_h, image_w, patch, flags = (int(v) for v in reader.u32(7))
    payload = reader.f32(h * w * dim)
    if np.isnan(payload).any():
        raise ValidationError(f"{path}: NaN in feature payload")
    try:
        fmap = PatchFeatureMap(h_patches=h, w_patches=w, dim=dim, image_h=image_h,
                               image_w=image_w, patch_size=patch,
                               data=payload.astype(np.float32))
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    head = None
    if flags & 1:
        d_t, n_heads = (int(v) for v in reader.u32(2))
        if d_t != dim:
            raise FormatError(f"{path}: pooling head dim {d_t} != feature dim {dim}")
        query = reader.f32(d_t).astype(np.float32)
        mats = [reader.f32(d_t * d_t).astype(np.float32).reshape(d_t, d_t)
                for _ in range(4)]
        head = PoolingHead(query=query, w_q=mats[0], w_k=mats[1],
                           w_v=mats[2], w_o=mats[3], n_heads=n_heads)
    reader.done()
    return fmap, head


# ---------------------------------------------------------------------------
# RTOK

def write_token_set(path, tokens: TokenSet) -> None:
    n = len(tokens)
    chunks = [b"RTOK", _u32_bytes(n, tokens.d_model, tokens.encoder_dim),
              _f32_bytes(tokens.ren), _f32_bytes(tokens.aligned),
              _f32_bytes(tokens.prompts)]
    Path(path).write_bytes(b"".join(chunks))


def read_token_set(path) -> TokenSet:
    reader = _Reader(Path(path).read_bytes(), str(path))
    reader.expect_magic(b"RTOK")
    n, d_model, dim = (int(v) for v in reader.u32(3))
    ren = reader.f32(n * d_model).astype(np.float32).reshape(n, d_model)
    aligned = reader.f32(n * dim).astype(np.float32).reshape(n, dim)
    if reader.remaining() == 0:
        prompts = np.zeros((n, 2), dtype=np.float32)
    else:
        prompts = reader.f32(n * 2).astype(np.float32).reshape(n, 2)
        reader.done()
    if np.isnan(ren).any() or np.isnan(aligned).any():
        raise ValidationError(f"{path}: NaN in token payload")
    return TokenSet(prompts=prompts, ren=ren, aligned=aligned, source_id=str(path))


# ---------------------------------------------------------------------------
# RENC

def write_checkpoint(path, params: RenParams) -> None:
    cfg = params.config
    tensors = list(params.named_tensors())
    chunks = [b"RENC",
              _u32_bytes(cfg.d_model, cfg.n_blocks, cfg.n_heads,
                         cfg.encoder_dim, cfg.ffn_mult, len(tensors))]
    for name, arr in tensors:
        encoded = name.encode("utf-8")
        chunks.append(_u32_bytes(len(encoded)))
        chunks.append(encoded)
        chunks.append(_f32_bytes(arr))
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> RenParams:
    reader = _Reader(Path(path).read_bytes(), str(path))
    reader.expect_magic(b"RENC")
    d_model, n_blocks, n_heads, encoder_dim, ffn_mult, n_tensors = (
        int(v) for v in reader.u32(6))
    config = RenConfig(d_model=d_model, n_blocks=n_blocks, n_heads=n_heads,
                       encoder_dim=encoder_dim, ffn_mult=ffn_mult)
    shapes = expected_shapes(config)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name_len = int(reader.u32(1)[0])
        name = reader.take(name_len).decode("utf-8")
        if name not in shapes:
            raise FormatError(f"{path}: unknown parameter name {name!r}")
        if name in tensors:
            raise FormatError(f"{path}: duplicate parameter name {name!r}")
        shape = shapes[name]
        flat = reader.f32(int(np.prod(shape)))
        if np.isnan(flat).any():
            raise ValidationError(f"{path}: NaN in parameter {name!r}")
        tensors[name] = flat.astype(np.float32).reshape(shape)
    reader.done()
    missing = set(shapes) - set(tensors)
    if missing:
        raise FormatError(f"{path}: missing parameters {sorted(missing)}")
    return params_from_dict(config, tensors)


# ---------------------------------------------------------------------------
# JSON documents

def mask_to_dict(mask: RegionMask) -> dict:
    return {"width": mask.width, "height": mask.height, "runs": list(mask.runs)}


def mask_from_dict(doc: dict) -> RegionMask:
    try:
        return RegionMask(width=int(doc["width"]), height=int(doc["height"]),
                          runs=[int(r) for r in doc["runs"]])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad mask document: {exc}") from exc


def write_masks(path, masks: list[RegionMask]) -> None:
    if not masks:
        raise ValidationError("no masks to write")
    doc = {"width": masks[0].width, "height": masks[0].height,
           "masks": [{"runs": list(m.runs)} for m in masks]}
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def read_masks(path) -> list[RegionMask]:
    doc = _load_json(path)
    try:
        return [RegionMask(width=int(doc["width"]), height=int(doc["height"]),
                           runs=[int(r) for r in entry["runs"]])
                for entry in doc["masks"]]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad masks document: {exc}") from exc


def scene_to_dict(scene: SyntheticScene) -> dict:
    return {
        "seed": scene.seed,
        "canvas": scene.canvas,
        "dim": scene.dim,
        "background": {
            "latent": [float(v) for v in scene.background_latent],
            "color": [float(v) for v in scene.background_color],
            "class_id": scene.background_class,
        },
        "regions": [
            {
                "kind": r.kind,
                "transform": [[float(v) for v in row] for row in r.transform],
                "z": r.z,
                "latent": [float(v) for v in r.latent],
                "color": [float(v) for v in r.color],
                "class_id": r.class_id,
            }
            for r in scene.regions
        ],
    }


def scene_from_dict(doc: dict) -> SyntheticScene:
    try:
        regions = [
            SceneRegion(
                kind=str(entry["kind"]),
                transform=np.array(entry["transform"], dtype=np.float64),
                z=int(entry["z"]),
                latent=np.array(entry["latent"], dtype=np.float32),
                color=np.array(entry["color"], dtype=np.float32),
                class_id=None if entry["class_id"] is None else int(entry["class_id"]),
            )
            for entry in doc["regions"]
        ]
        return SyntheticScene(
            seed=int(doc["seed"]), canvas=int(doc["canvas"]), dim=int(doc["dim"]),
            background_latent=np.array(doc["background"]["latent"], dtype=np.float32),
            background_color=np.array(doc["background"]["color"], dtype=np.float32),
            regions=regions, background_class=int(doc["background"]["class_id"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad scene document: {exc}") from exc


def write_scene(path, scene: SyntheticScene) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene)), encoding="utf-8")


def read_scene(path) -> SyntheticScene:
    return scene_from_dict(_load_json(path))


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
