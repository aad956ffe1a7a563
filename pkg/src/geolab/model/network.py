"""Two-expert transformer with shared attention and per-frame geometry heads.

Token layout inside a trunk block (T rows)::

    [geo frame 0 .. geo frame N-1 | sem frame 0 .. sem frame N-1 | text queries]

Each expert owns its norms, QKV/output projections and feed-forward; the
attention itself runs once over all T tokens.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass

import numpy as np

from .. import tensor as tc
from ..geometry import PointMap, Pose
from ..losses import GeometryOutput
from ..tensor import Tensor
from .config import AttentionMode, ModelConfig

EXPERTS = ("geo", "sem")
HEADS = ("point", "global", "camera")
BLOCK_PARAMS = ("ln1.g", "ln1.b", "qkv.w", "qkv.b", "out.w", "out.b",
                "ln2.g", "ln2.b", "ffn1.w", "ffn1.b", "ffn2.w", "ffn2.b")


# ---------------------------------------------------------------- parameters


def _block_shapes(d: int, hidden: int) -> dict:
    return {"ln1.g": (d,), "ln1.b": (d,), "qkv.w": (d, 3 * d), "qkv.b": (3 * d,),
            "out.w": (d, d), "out.b": (d,), "ln2.g": (d,), "ln2.b": (d,),
            "ffn1.w": (d, hidden), "ffn1.b": (hidden,), "ffn2.w": (hidden, d), "ffn2.b": (d,)}


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every parameter; a pure function of the config."""
    d, hid, p = cfg.dim, cfg.dim * cfg.mlp_ratio, cfg.tokens_per_frame
    shapes = {}
    for e in EXPERTS:
        shapes[f"{e}.embed.w"] = (cfg.patch_dim, d)
        shapes[f"{e}.embed.b"] = (d,)
        shapes[f"{e}.pos"] = (p, d)
        for layer in range(cfg.layers):
            for k, s in _block_shapes(d, hid).items():
                shapes[f"{e}.layer{layer}.{k}"] = s
    shapes["sem.text"] = (cfg.caption_len, d)
    shapes.update({"sem.token_head.ln.g": (d,), "sem.token_head.ln.b": (d,),
                   "sem.token_head.w": (d, cfg.vocab), "sem.token_head.b": (cfg.vocab,)})
    for h in HEADS:
        for blk in range(cfg.head_layers):
            for k, s in _block_shapes(d, hid).items():
                shapes[f"heads.{h}.block{blk}.{k}"] = s
        shapes[f"heads.{h}.out.ln.g"] = (d,)
        shapes[f"heads.{h}.out.ln.b"] = (d,)
    for h in ("point", "global"):
        shapes.update({f"heads.{h}.out.fc1.w": (d, d), f"heads.{h}.out.fc1.b": (d,),
                       f"heads.{h}.out.fc2.w": (d, cfg.patch_dim), f"heads.{h}.out.fc2.b": (cfg.patch_dim,)})
    for k in ("pre1", "pre2", "post1"):
        shapes[f"heads.camera.out.{k}.w"] = (d, d)
        shapes[f"heads.camera.out.{k}.b"] = (d,)
    shapes["heads.camera.out.post2.w"] = (d, 12)
    shapes["heads.camera.out.post2.b"] = (12,)
    return shapes


def _init_value(name: str, shape: tuple, cfg: ModelConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, zlib.crc32(name.encode())])
    if name.endswith(".g"):
        return np.ones(shape)
    if name.endswith(".pos") or name == "sem.text":
        return rng.normal(scale=0.1, size=shape)
    if name.endswith(".b"):
        if name in ("heads.point.out.fc2.b", "heads.global.out.fc2.b"):
            b = np.zeros(shape)
            b[2::3] = 1.0  # start every pixel at unit depth
            return b
        if name == "heads.camera.out.post2.b":
            return np.concatenate([np.eye(3).ravel(), np.zeros(3)])
        return np.zeros(shape)
    scale = 1.0 / np.sqrt(shape[0])
    if name.endswith("fc2.w"):
        scale *= 0.1
    if name == "heads.camera.out.post2.w":
        scale *= 0.01
    return rng.normal(scale=scale, size=shape)


def group_of(name: str) -> str:
    """``geo`` for the geometric expert and its heads, ``sem`` for the semantic expert."""
    return "sem" if name.startswith("sem.") else "geo"


@dataclass
class ModelState:
    config: ModelConfig
    params: dict  # name -> Tensor(requires_grad=True)

    @classmethod
    def init(cls, cfg: ModelConfig) -> "ModelState":
        params = {n: Tensor(_init_value(n, s, cfg), requires_grad=True) for n, s in parameter_shapes(cfg).items()}
        return cls(cfg, params)

    def names(self, group: str | None = None) -> list[str]:
        return [n for n in self.params if group is None or group_of(n) == group]

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def digest(self, group: str | None = None) -> str:
        """SHA-256 over parameter names and raw float64 bytes."""
        h = hashlib.sha256()
        for n in sorted(self.names(group)):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n].data, dtype="<f8").tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def copy(self) -> "ModelState":
        return ModelState(self.config, {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.params.items()})


# ---------------------------------------------------------------- layers


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = x @ w
    return y + tc.expand(b, y.shape)


def _norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return tc.layernorm(x) * tc.expand(g, x.shape) + tc.expand(b, x.shape)


def attention(qkv: Tensor, heads: int, mask=None, exact: bool = False) -> Tensor:
    """Multi-head attention over the second-to-last axis of ``qkv`` (..., T, 3d).

    ``mask`` is a boolean (T, T) array of allowed query->key pairs. With
    ``exact`` the score and value reductions are order-independent, so
    permuting tokens permutes the output bit-for-bit.
    """
    *lead, t, d3 = qkv.shape
    d = d3 // 3
    dh = d // heads
    lead = tuple(lead)

    def split(k):
        part = qkv[..., k * d:(k + 1) * d]
        part = part.reshape(*lead, t, heads, dh)
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return tc.transpose(part, axes)  # (..., H, T, dh)

    q, k, v = split(0), split(1), split(2)
    full = lead + (heads, t, t, dh)
    if exact:
        qe = tc.expand(q.reshape(*lead, heads, t, 1, dh), full)
        ke = tc.expand(k.reshape(*lead, heads, 1, t, dh), full)
        scores = tc.sum_(qe * ke, axis=-1)
    else:
        scores = q @ tc.swapaxes(k, -1, -2)
    scores = scores * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + np.broadcast_to(np.where(mask, 0.0, -np.inf), scores.shape).copy()
    a = tc.softmax(scores, axis=-1, canonical=exact)
    if exact:
        ae = tc.expand(a.reshape(*lead, heads, t, t, 1), full)
        ve = tc.expand(v.reshape(*lead, heads, 1, t, dh), full)
        out = tc.canonical_sum(ae * ve, axis=-2)
    else:
        out = a @ v
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return tc.transpose(out, axes).reshape(*lead, t, d)


def _block(p: dict, prefix: str, x: Tensor, heads: int, exact: bool) -> Tensor:
    """Single-expert pre-norm transformer block; attention over axis -2."""
    h = _linear(_norm(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"]), p[prefix + "qkv.w"], p[prefix + "qkv.b"])
    x = x + _linear(attention(h, heads, exact=exact), p[prefix + "out.w"], p[prefix + "out.b"])
    return x + _ffn(p, prefix, x)


def _ffn(p: dict, prefix: str, x: Tensor) -> Tensor:
    h = _norm(x, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    return _linear(tc.gelu(_linear(h, p[prefix + "ffn1.w"], p[prefix + "ffn1.b"])), p[prefix + "ffn2.w"], p[prefix + "ffn2.b"])


# ---------------------------------------------------------------- trunk


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(N, H, W, 3) -> (N, P, patch*patch*3), row-major patches."""
    n, h, w, c = images.shape
    x = images.reshape(n, h // patch, patch, w // patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, (h // patch) * (w // patch), patch * patch * c)


def embed(state: ModelState, images, which: str) -> Tensor:
    """Per-frame patch tokens (N, P, d) with within-frame positional encoding only."""
    cfg, p = state.config, state.params
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise ValueError(f"embed: expected (N, {cfg.image_size}, {cfg.image_size}, 3) images, got {images.shape}")
    if which not in EXPERTS:
        raise ValueError(f"embed: expert must be one of {EXPERTS}, got {which!r}")
    x = Tensor(patchify(images - 0.5, cfg.patch_size))
    tok = _linear(x, p[f"{which}.embed.w"], p[f"{which}.embed.b"])
    return tok + tc.expand(p[f"{which}.pos"], tok.shape)


def attention_mask(n: int, p: int, n_text: int, kind: str) -> np.ndarray | None:
    """Boolean (T, T) allowed-pairs mask for the joint sequence, or None for global."""
    if kind == "global":
        return None
    if kind != "frame":
        raise ValueError(f"attention_mask: kind must be frame or global, got {kind!r}")
    t = 2 * n * p + n_text
    mask = np.ones((t, t), dtype=bool)
    frame = np.repeat(np.arange(n), p)
    mask[: n * p, :] = False
    mask[: n * p, : n * p] = frame[:, None] == frame[None, :]
    return mask


def mot_forward(state: ModelState, geo: Tensor, sem: Tensor, mode: str, exact: bool = False):
    """Run the shared-attention trunk.

    ``geo`` is (N, P, d); ``sem`` is (N*P + L, d) (frame tokens then text
    queries). Returns the updated pair in the same shapes.
    """
    cfg, prm = state.config, state.params
    n, p, d = geo.shape
    g = geo.reshape(n * p, d)
    s = sem
    ng = n * p
    mask = attention_mask(n, p, s.shape[0] - ng, mode)
    for layer in range(cfg.layers):
        pg, ps = f"geo.layer{layer}.", f"sem.layer{layer}."
        hg = _linear(_norm(g, prm[pg + "ln1.g"], prm[pg + "ln1.b"]), prm[pg + "qkv.w"], prm[pg + "qkv.b"])
        hs = _linear(_norm(s, prm[ps + "ln1.g"], prm[ps + "ln1.b"]), prm[ps + "qkv.w"], prm[ps + "qkv.b"])
        att = attention(tc.concat([hg, hs], axis=0), cfg.heads, mask=mask, exact=exact)
        g = g + _linear(att[:ng], prm[pg + "out.w"], prm[pg + "out.b"])
        s = s + _linear(att[ng:], prm[ps + "out.w"], prm[ps + "out.b"])
        g = g + _ffn(prm, pg, g)
        s = s + _ffn(prm, ps, s)
    return g.reshape(n, p, d), s


# ---------------------------------------------------------------- heads


def _head_trunk(state: ModelState, name: str, h: Tensor, exact: bool) -> Tensor:
    prm, cfg = state.params, state.config
    x = h
    for blk in range(cfg.head_layers):
        x = _block(prm, f"heads.{name}.block{blk}.", x, cfg.heads, exact)
    return _norm(x, prm[f"heads.{name}.out.ln.g"], prm[f"heads.{name}.out.ln.b"])


def pixel_shuffle(x: Tensor, grid: int, patch: int) -> Tensor:
    """(N, grid*grid, patch*patch*3) -> (N, grid*patch, grid*patch, 3)."""
    n = x.shape[0]
    x = x.reshape(n, grid, grid, patch, patch, 3)
    x = tc.transpose(x, (0, 1, 3, 2, 4, 5))
    return x.reshape(n, grid * patch, grid * patch, 3)


def point_head(state: ModelState, h: Tensor, name: str = "point", exact: bool = False) -> Tensor:
    prm, cfg = state.params, state.config
    x = _head_trunk(state, name, h, exact)
    x = tc.gelu(_linear(x, prm[f"heads.{name}.out.fc1.w"], prm[f"heads.{name}.out.fc1.b"]))
    x = _linear(x, prm[f"heads.{name}.out.fc2.w"], prm[f"heads.{name}.out.fc2.b"])
    return pixel_shuffle(x, cfg.grid, cfg.patch_size)


def camera_head(state: ModelState, h: Tensor, exact: bool = False) -> tuple[Tensor, Tensor]:
    """MLP, average pool over the frame's tokens, MLP -> (rotations (N,3,3), translations (N,3))."""
    prm = state.params
    c = "heads.camera.out."
    x = _head_trunk(state, "camera", h, exact)
    x = _linear(tc.gelu(_linear(x, prm[c + "pre1.w"], prm[c + "pre1.b"])), prm[c + "pre2.w"], prm[c + "pre2.b"])
    x = tc.mean(x, axis=1)
    x = _linear(tc.gelu(_linear(x, prm[c + "post1.w"], prm[c + "post1.b"])), prm[c + "post2.w"], prm[c + "post2.b"])
    return tc.svd_orthogonalize(x[:, :9]), x[:, 9:]


def geometry_heads(state: ModelState, h: Tensor, train: bool = True, exact: bool = False) -> GeometryOutput:
    rot, trans = camera_head(state, h, exact)
    pts = point_head(state, h, "point", exact)
    glob = point_head(state, h, "global", exact) if train else None
    return GeometryOutput(rotations=rot, translations=trans, points=pts, global_points=glob)


def token_logits(state: ModelState, sem: Tensor) -> Tensor:
    """Toy caption logits (L, vocab) from the text-query tokens."""
    prm, cfg = state.params, state.config
    q = sem[sem.shape[0] - cfg.caption_len:]
    q = _norm(q, prm["sem.token_head.ln.g"], prm["sem.token_head.ln.b"])
    return _linear(q, prm["sem.token_head.w"], prm["sem.token_head.b"])


def cross_entropy(logits: Tensor, targets) -> Tensor:
    targets = np.asarray(targets, dtype=np.int64)
    m = logits.data.max(axis=-1, keepdims=True)
    shifted = logits - np.broadcast_to(m, logits.shape).copy()
    lse = tc.log(tc.sum_(tc.exp(shifted), axis=-1))
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(targets)), targets] = 1.0
    picked = tc.sum_(shifted * onehot, axis=-1)
    return tc.mean(lse - picked)


@dataclass
class ForwardOutput:
    geometry: GeometryOutput
    logits: Tensor
    geo_hidden: Tensor
    sem_hidden: Tensor


def forward(state: ModelState, images, mode: str, train: bool = True, exact: bool = False) -> ForwardOutput:
    """Full network for one scene; ``mode`` is a concrete mask kind (frame | global)."""
    cfg, prm = state.config, state.params
    geo = embed(state, images, "geo")
    sem = embed(state, images, "sem")
    n, p, d = sem.shape
    sem = tc.concat([sem.reshape(n * p, d), prm["sem.text"]], axis=0)
    g, s = mot_forward(state, geo, sem, mode, exact)
    return ForwardOutput(geometry_heads(state, g, train, exact), token_logits(state, s), g, s)


def predict(state: ModelState, images, mode: AttentionMode | str = "global") -> tuple[list[Pose], list[PointMap]]:
    """Inference: no global head, mixed resolved to global, order-independent reductions."""
    kind = (AttentionMode.parse(mode) if isinstance(mode, str) else mode).resolve(None)
    with tc.no_grad():
        out = forward(state, images, kind, train=False, exact=True).geometry
    rots, trans, pts = out.rotations.data, out.translations.data, out.points.data
    poses = [Pose(rots[i].copy(), trans[i].copy()) for i in range(len(rots))]
    maps = [PointMap(pts[i].copy(), np.isfinite(pts[i]).all(axis=-1)) for i in range(len(pts))]
    return poses, maps
