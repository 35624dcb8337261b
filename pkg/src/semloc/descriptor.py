"""Instance extraction and scene descriptors for images and submaps.

Both branches encode a set of instances into per-instance features, mix them
with self-attention and pool them into one unit-length scene descriptor.
The image branch sees class, mean color, relative size and mask centroid of
each segmented instance. The map branch sees the primitive point set (through
a shared per-point MLP and a max-pool), mean color, primitive count and the
instance centroid in the submap's reference camera frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .renderer import SENTINEL, Frame
from .scene import Scene, Submap

D_MODEL = 64
D_ENC = 32
D_CLASS = 32
D_POINT_HIDDEN = 64


class EmptyViewError(ValueError):
    """Raised when a frame contains no instance large enough to describe."""


@dataclass
class InstanceObservation2D:
    instance_id: int
    class_id: int
    color: np.ndarray
    size: float
    centroid: np.ndarray


@dataclass
class InstanceObservation3D:
    instance_id: int
    class_id: int
    points: np.ndarray
    color: np.ndarray
    count: int
    centroid: np.ndarray


@dataclass
class SceneDescriptor:
    vector: np.ndarray
    source: str
    source_id: int


def extract_instances_2d(frame: Frame, instance_classes, min_pixels: int = 20):
    """One observation per instance id covering at least ``min_pixels`` pixels."""
    ids = frame.id_map
    h, w = ids.shape
    valid = ids != SENTINEL
    flat = ids[valid]
    if flat.size == 0:
        raise EmptyViewError("empty view: no instance pixels")
    n = int(flat.max()) + 1
    counts = np.bincount(flat, minlength=n)
    rows, cols = np.nonzero(valid)
    rgb = frame.rgb[valid].astype(np.float64)
    sums = np.stack([np.bincount(flat, weights=rgb[:, c], minlength=n) for c in range(3)], 1)
    u_sum = np.bincount(flat, weights=cols / w, minlength=n)
    v_sum = np.bincount(flat, weights=rows / h, minlength=n)
    out = []
    for i in np.flatnonzero(counts >= min_pixels):
        c = counts[i]
        out.append(InstanceObservation2D(int(i), int(instance_classes[i]), sums[i] / c,
                                         float(c / (h * w)), np.array([u_sum[i] / c, v_sum[i] / c])))
    if not out:
        raise EmptyViewError(f"empty view: no instance reaches {min_pixels} pixels")
    return out


def extract_instances_3d(submap: Submap, scene: Scene):
    """Group submap members by instance; centroids in the reference camera frame."""
    members = np.asarray(submap.members)
    inst = scene.splats.instance_ids[members]
    out = []
    for i in np.unique(inst):
        idx = members[inst == i]
        pts = scene.splats.means[idx]
        centroid_world = pts.mean(axis=0)
        out.append(InstanceObservation3D(int(i), int(scene.class_ids[idx[0]]), pts,
                                         scene.splats.colors[idx].mean(axis=0), len(idx),
                                         submap.reference_pose.apply(centroid_world)))
    return out


# ---------------------------------------------------------------- model

def build_model(n_classes: int, seed: int = 0, d: int = D_MODEL, d_e: int = D_ENC,
                d_c: int = D_CLASS) -> nn.ParamStore:
    store = nn.ParamStore(seed)
    store.add("img.embed", (n_classes, d_c), "embed")
    nn.add_mlp(store, "img.sem", [d_c, d_e, d_e, d_e], final_relu=True)
    nn.add_mlp(store, "img.color", [3, d_e, d_e], final_relu=True)
    nn.add_mlp(store, "img.size", [1, d_e, d_e], final_relu=True)
    nn.add_mlp(store, "img.pos", [2, d_e, d_e], final_relu=True)
    nn.add_mlp(store, "img.fuse", [4 * d_e, d, d, d])
    nn.add_mha(store, "img.attn", d)
    nn.add_mlp(store, "img.pool", [d, d, d, 1])

    nn.add_mlp(store, "map.point", [3, D_POINT_HIDDEN, d_e], final_relu=True)
    nn.add_mlp(store, "map.pn", [d_e, d_e, d_e, d_e], final_relu=True)
    nn.add_mlp(store, "map.color", [3, d_e, d_e], final_relu=True)
    nn.add_mlp(store, "map.count", [1, d_e, d_e], final_relu=True)
    nn.add_mlp(store, "map.pos", [3, d_e, d_e], final_relu=True)
    nn.add_mlp(store, "map.fuse", [4 * d_e, d, d, d])
    nn.add_mha(store, "map.attn", d)
    nn.add_mlp(store, "map.pool", [d, d, d, 1])
    return store


@dataclass
class ImageInputs:
    class_ids: np.ndarray
    color: np.ndarray
    size: np.ndarray
    uv: np.ndarray

    @classmethod
    def from_observations(cls, obs):
        return cls(np.array([o.class_id for o in obs], dtype=np.int64),
                   np.array([o.color for o in obs], dtype=np.float64),
                   np.array([o.size for o in obs], dtype=np.float64),
                   np.array([o.centroid for o in obs], dtype=np.float64))

    def permuted(self, perm):
        return ImageInputs(self.class_ids[perm], self.color[perm], self.size[perm], self.uv[perm])


@dataclass
class MapInputs:
    class_ids: np.ndarray
    color: np.ndarray
    count: np.ndarray
    position: np.ndarray
    points: np.ndarray          # all instances' points, centered per instance, concatenated
    offsets: np.ndarray         # start of each instance's points

    @classmethod
    def from_observations(cls, obs):
        # Bounding-box midpoint, unlike the mean, ignores duplicated points.
        pts = [o.points - 0.5 * (o.points.min(axis=0) + o.points.max(axis=0)) for o in obs]
        offsets = np.concatenate([[0], np.cumsum([len(p) for p in pts])[:-1]]).astype(np.int64)
        return cls(np.array([o.class_id for o in obs], dtype=np.int64),
                   np.array([o.color for o in obs], dtype=np.float64),
                   np.array([o.count for o in obs], dtype=np.float64),
                   np.array([o.centroid for o in obs], dtype=np.float64),
                   np.concatenate(pts), offsets)

    def permuted(self, perm):
        perm = np.asarray(perm)
        ends = np.append(self.offsets[1:], len(self.points))
        chunks = [self.points[self.offsets[i]:ends[i]] for i in perm]
        offsets = np.concatenate([[0], np.cumsum([len(c) for c in chunks])[:-1]]).astype(np.int64)
        return MapInputs(self.class_ids[perm], self.color[perm], self.count[perm],
                         self.position[perm], np.concatenate(chunks), offsets)


def _concat_forward(store, parts):
    outs, caches = [], []
    for prefix, x, final_relu in parts:
        y, c = nn.mlp_forward(store, prefix, x, final_relu)
        outs.append(y)
        caches.append(c)
    return np.concatenate(outs, axis=1), caches


def _concat_backward(store, caches, dcat, grads):
    width = dcat.shape[1] // len(caches)
    douts = []
    for j, c in enumerate(caches):
        douts.append(nn.mlp_backward(store, c, dcat[:, j * width:(j + 1) * width], grads))
    return douts


def encode_image_instances(store: nn.ParamStore, x: ImageInputs):
    """Per-instance features f_I, shape (N, d)."""
    emb = store["img.embed"]
    if np.any(x.class_ids < 0) or np.any(x.class_ids >= emb.shape[0]):
        raise ValueError(f"class id out of range [0, {emb.shape[0]})")
    e = emb[x.class_ids]
    cat, caches = _concat_forward(store, [
        ("img.sem", e, True),
        ("img.color", x.color - 0.5, True),
        ("img.size", np.log1p(x.size)[:, None], True),
        ("img.pos", x.uv - 0.5, True),
    ])
    f, fcache = nn.mlp_forward(store, "img.fuse", cat)
    return f, (x, caches, fcache)


def encode_image_instances_backward(store, cache, df, grads):
    x, caches, fcache = cache
    dcat = nn.mlp_backward(store, fcache, df, grads)
    d_emb = _concat_backward(store, caches, dcat, grads)[0]
    np.add.at(grads["img.embed"], x.class_ids, d_emb)


def _segment_max(values, offsets):
    """Column-wise max per segment and the row index that attains it (first wins)."""
    n_seg = len(offsets)
    ends = np.append(offsets[1:], len(values))
    out = np.empty((n_seg, values.shape[1]))
    arg = np.empty((n_seg, values.shape[1]), dtype=np.int64)
    for s in range(n_seg):
        block = values[offsets[s]:ends[s]]
        a = np.argmax(block, axis=0)
        arg[s] = a + offsets[s]
        out[s] = block[a, np.arange(values.shape[1])]
    return out, arg


def encode_map_instances(store: nn.ParamStore, x: MapInputs):
    """Per-instance features f_G, shape (N, d)."""
    h, pcache = nn.mlp_forward(store, "map.point", x.points, final_relu=True)
    pooled, arg = _segment_max(h, x.offsets)
    cat, caches = _concat_forward(store, [
        ("map.pn", pooled, True),
        ("map.color", x.color - 0.5, True),
        ("map.count", np.log1p(x.count)[:, None], True),
        ("map.pos", x.position, True),
    ])
    f, fcache = nn.mlp_forward(store, "map.fuse", cat)
    return f, (x, pcache, h.shape, arg, caches, fcache)


def encode_map_instances_backward(store, cache, df, grads):
    x, pcache, hshape, arg, caches, fcache = cache
    dcat = nn.mlp_backward(store, fcache, df, grads)
    dpooled = _concat_backward(store, caches, dcat, grads)[0]
    dh = np.zeros(hshape)
    cols = np.broadcast_to(np.arange(hshape[1]), arg.shape)
    np.add.at(dh, (arg, cols), dpooled)
    nn.mlp_backward(store, pcache, dh, grads)


def aggregate_forward(store: nn.ParamStore, branch: str, feats):
    Z, acache = nn.mha_forward(store, f"{branch}.attn", feats)
    desc, w, pcache = nn.softmax_pool_forward(store, f"{branch}.pool", Z)
    return desc, w, (branch, acache, pcache)


def aggregate(store: nn.ParamStore, branch: str, feats):
    """Attention mixing then softmax pooling; returns the unit descriptor."""
    return aggregate_forward(store, branch, feats)[0]


def aggregate_backward(store, cache, ddesc, grads):
    branch, acache, pcache = cache
    dZ = nn.softmax_pool_backward(store, pcache, ddesc, grads)
    return nn.mha_backward(store, acache, dZ, grads)


def describe_image(store: nn.ParamStore, x: ImageInputs) -> np.ndarray:
    f, _ = encode_image_instances(store, x)
    return aggregate(store, "img", f)


def describe_map(store: nn.ParamStore, x: MapInputs) -> np.ndarray:
    f, _ = encode_map_instances(store, x)
    return aggregate(store, "map", f)


def encode_instance_2d(store, obs: InstanceObservation2D) -> np.ndarray:
    return encode_image_instances(store, ImageInputs.from_observations([obs]))[0][0]


def encode_instance_3d(store, obs: InstanceObservation3D) -> np.ndarray:
    return encode_map_instances(store, MapInputs.from_observations([obs]))[0][0]


def batch_loss_and_grad(store: nn.ParamStore, images, maps, tau: float, with_grad: bool = True):
    """Contrastive loss over a batch of (image, submap) input pairs and its parameter gradient."""
    img_desc, map_desc, caches = [], [], []
    for xi, xm in zip(images, maps):
        fi, ci = encode_image_instances(store, xi)
        di, _, ai = aggregate_forward(store, "img", fi)
        fm, cm = encode_map_instances(store, xm)
        dm, _, am = aggregate_forward(store, "map", fm)
        img_desc.append(di)
        map_desc.append(dm)
        caches.append((ci, ai, cm, am))
    F_img, F_map = np.array(img_desc), np.array(map_desc)
    if not with_grad:
        return nn.contrastive_loss(F_img, F_map, tau), None
    loss, dI, dM = nn.contrastive_loss(F_img, F_map, tau, with_grad=True)
    grads = store.zeros_like()
    for b, (ci, ai, cm, am) in enumerate(caches):
        encode_image_instances_backward(store, ci, aggregate_backward(store, ai, dI[b], grads), grads)
        encode_map_instances_backward(store, cm, aggregate_backward(store, am, dM[b], grads), grads)
    return loss, grads
