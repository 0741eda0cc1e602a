"""Transformer encoder over visible patches, reconstruction decoder, and the
instance/cluster projection heads.

Everything runs in float64 on CPU. Weight initialization is driven by a numpy
generator so that a seed fully determines the parameters, independent of any
global torch RNG state.
"""

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from .masking import MaskPlan, PatchSequence

CHECKPOINT_MAGIC = b"PICI"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    embed_dim: int
    n_layers: int
    n_heads: int
    decoder_dim: int
    decoder_layers: int
    decoder_heads: int
    patch_size: int
    image_size: int
    instance_dim: int
    n_clusters: int

    def validate(self) -> "NetworkConfig":
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.decoder_dim % self.decoder_heads != 0:
            raise ConfigError(
                f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}")
        if self.n_clusters < 2:
            raise ConfigError(f"n_clusters must be >= 2, got {self.n_clusters}")
        if self.instance_dim < 1:
            raise ConfigError(f"instance_dim must be >= 1, got {self.instance_dim}")
        if self.patch_size < 1 or self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        for name in ("embed_dim", "n_layers", "n_heads", "decoder_dim",
                     "decoder_layers", "decoder_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        return self

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


# Encoder presets; decoder 512/8/16 throughout, 224x224 input, 16px patches.
_PRESETS = {
    "vit_tiny": dict(embed_dim=192, n_layers=4, n_heads=12),
    "vit_small": dict(embed_dim=384, n_layers=6, n_heads=12),
    "vit_base": dict(embed_dim=768, n_layers=12, n_heads=12),
}


def preset(name: str, n_clusters: int) -> NetworkConfig:
    """Named encoder preset. 'tiny_test' is the small configuration used by
    the test and acceptance suites."""
    if name == "tiny_test":
        return NetworkConfig(embed_dim=32, n_layers=2, n_heads=4,
                             decoder_dim=32, decoder_layers=2, decoder_heads=4,
                             patch_size=8, image_size=32, instance_dim=16,
                             n_clusters=n_clusters).validate()
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from "
                          f"{sorted(_PRESETS) + ['tiny_test']}")
    enc = _PRESETS[name]
    return NetworkConfig(**enc, decoder_dim=512, decoder_layers=8,
                         decoder_heads=16, patch_size=16, image_size=224,
                         instance_dim=128, n_clusters=n_clusters).validate()


class Attention(nn.Module):
    """Multi-head self-attention with an explicit softmax, so the attention
    probabilities are inspectable."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, return_attn: bool = False):
        B, T, C = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.n_heads, self.head_dim)
        qkv = qkv.permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, T, C)
        out = self.proj(out)
        if return_attn:
            return out, attn
        return out


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden_mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * hidden_mult)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(dim * hidden_mult, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class ProjectionHead(nn.Module):
    """Two affine layers with one smooth nonlinearity between."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(dim, out_dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Network(nn.Module):
    """Encoder over visible patches with a class token, full-grid decoder,
    and the two projection heads."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        n = config.n_patches
        d = config.embed_dim
        dd = config.decoder_dim

        self.patch_embed = nn.Linear(config.patch_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, n + 1, d))
        self.blocks = nn.ModuleList(Block(d, config.n_heads) for _ in range(config.n_layers))
        self.norm = nn.LayerNorm(d)

        self.decoder_embed = nn.Linear(d, dd)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dd))
        self.decoder_pos_embed = nn.Parameter(torch.zeros(1, n + 1, dd))
        self.decoder_blocks = nn.ModuleList(
            Block(dd, config.decoder_heads) for _ in range(config.decoder_layers))
        self.decoder_norm = nn.LayerNorm(dd)
        self.decoder_pred = nn.Linear(dd, config.patch_dim)

        self.instance_head = ProjectionHead(d, config.instance_dim)
        self.cluster_head = ProjectionHead(d, config.n_clusters)

        self.double()
        self._init_params(seed)

    # ----- initialization -----

    def _init_params(self, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x1217)))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith(".bias"):
                    p.zero_()
                elif "norm" in name.lower():
                    # LayerNorm scale
                    p.fill_(1.0)
                else:
                    p.copy_(torch.from_numpy(_trunc_normal(rng, tuple(p.shape))))

    # ----- parameter groups (stage update sets) -----

    def encoder_parameters(self):
        mods = [self.patch_embed, self.blocks, self.norm]
        params = [self.cls_token, self.pos_embed]
        for m in mods:
            params.extend(m.parameters())
        return params

    def decoder_parameters(self):
        mods = [self.decoder_embed, self.decoder_blocks, self.decoder_norm, self.decoder_pred]
        params = [self.mask_token, self.decoder_pos_embed]
        for m in mods:
            params.extend(m.parameters())
        return params

    def instance_parameters(self):
        return list(self.instance_head.parameters())

    def cluster_parameters(self):
        return list(self.cluster_head.parameters())

    # ----- batched forward passes -----

    def encode_batch(self, patches: torch.Tensor, visible_idx: torch.Tensor):
        """patches: (B, n_patches, patch_dim); visible_idx: (B, n_visible) int64.

        Returns (class_tokens (B, embed_dim), visible_tokens (B, n_visible, embed_dim)).
        """
        B, n, _ = patches.shape
        if n != self.config.n_patches:
            raise ConfigError(f"expected {self.config.n_patches} patches, got {n}")
        x = self.patch_embed(patches) + self.pos_embed[:, 1:, :]
        idx = visible_idx[:, :, None].expand(-1, -1, x.shape[-1])
        x = torch.gather(x, 1, idx)
        cls = (self.cls_token + self.pos_embed[:, :1, :]).expand(B, -1, -1)
        x = torch.cat([cls, x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return x[:, 0], x[:, 1:]

    def decode_batch(self, class_tokens: torch.Tensor, visible_tokens: torch.Tensor,
                     visible_idx: torch.Tensor) -> torch.Tensor:
        """Fill masked positions with the mask token, add position embeddings
        over the full grid, run the decoder, and predict every patch's pixels.

        Returns (B, n_patches, patch_dim).
        """
        B = class_tokens.shape[0]
        n = self.config.n_patches
        y_vis = self.decoder_embed(visible_tokens)
        base = self.mask_token.expand(B, n, -1)
        idx = visible_idx[:, :, None].expand(-1, -1, y_vis.shape[-1])
        y = base.scatter(1, idx, y_vis)
        y = y + self.decoder_pos_embed[:, 1:, :]
        y_cls = self.decoder_embed(class_tokens)[:, None, :] + self.decoder_pos_embed[:, :1, :]
        y = torch.cat([y_cls, y], dim=1)
        for blk in self.decoder_blocks:
            y = blk(y)
        y = self.decoder_norm(y)
        return self.decoder_pred(y)[:, 1:, :]

    def project_instance(self, h: torch.Tensor) -> torch.Tensor:
        """Instance embeddings, rows L2-normalized to unit norm. Zero-norm
        rows are nudged by 1e-12 before normalizing."""
        z = self.instance_head(h)
        norms = z.norm(dim=-1, keepdim=True)
        z = torch.where(norms == 0, z + 1e-12, z)
        return z / z.norm(dim=-1, keepdim=True)

    def project_cluster(self, h: torch.Tensor) -> torch.Tensor:
        """Cluster assignment probabilities; rows on the simplex."""
        return torch.softmax(self.cluster_head(h), dim=-1)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02):
    """Normal(0, std) redrawn outside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


# ----- single-image wrappers -----

def encode(seq: PatchSequence, plan: MaskPlan, net: Network):
    """Encode one image's visible patches. Returns (class_token (embed_dim,),
    visible_tokens (n_visible, embed_dim)) as numpy arrays."""
    _check_plan(seq, plan, net)
    patches = torch.from_numpy(np.ascontiguousarray(seq.patches, dtype=np.float64))[None]
    visible = torch.from_numpy(plan.visible_idx.astype(np.int64))[None]
    with torch.no_grad():
        h, toks = net.encode_batch(patches, visible)
    return h[0].numpy(), toks[0].numpy()


def decode(visible_tokens, class_token, plan: MaskPlan, net: Network) -> PatchSequence:
    """Decode one image back to a full-grid patch prediction."""
    if plan.n_patches != net.config.n_patches:
        raise ConfigError(f"plan covers {plan.n_patches} patches, network expects "
                          f"{net.config.n_patches}")
    toks = torch.as_tensor(visible_tokens, dtype=torch.float64)[None]
    h = torch.as_tensor(class_token, dtype=torch.float64)[None]
    if toks.shape[1] != len(plan.visible_idx):
        raise ConfigError(f"{toks.shape[1]} visible tokens inconsistent with plan "
                          f"({len(plan.visible_idx)} visible)")
    visible = torch.from_numpy(plan.visible_idx.astype(np.int64))[None]
    with torch.no_grad():
        pred = net.decode_batch(h, toks, visible)
    side = net.config.grid_side
    return PatchSequence(patches=pred[0].numpy(), patch_size=net.config.patch_size,
                         grid=(side, side))


def _check_plan(seq: PatchSequence, plan: MaskPlan, net: Network):
    if seq.n_patches != net.config.n_patches or seq.patch_dim != net.config.patch_dim:
        raise ConfigError(
            f"patch sequence {seq.n_patches}x{seq.patch_dim} does not match network "
            f"({net.config.n_patches}x{net.config.patch_dim})")
    if plan.n_patches != seq.n_patches:
        raise ConfigError(f"mask plan covers {plan.n_patches} patches, sequence has "
                          f"{seq.n_patches}")


# ----- checkpoint container -----

def network_arrays(net: Network) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy().copy() for name, p in net.named_parameters()}


def save_checkpoint(path, net_or_arrays, meta: dict) -> None:
    """Binary container: magic, version, JSON meta block, then named float64
    little-endian arrays. All integers little-endian."""
    if isinstance(net_or_arrays, Network):
        arrays = network_arrays(net_or_arrays)
        meta = dict(meta)
        meta.setdefault("network_config", asdict(net_or_arrays.config))
    else:
        arrays = net_or_arrays
    payload = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes(order="C"))


def load_checkpoint(path):
    """Returns (meta: dict, arrays: dict[str, np.ndarray])."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"not a checkpoint file: bad magic {magic!r}")
        version, = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        meta_len, = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        n_arrays, = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(n_arrays):
            name_len, = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            ndim, = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
            arrays[name] = data.astype(np.float64)
    return meta, arrays


def load_into_network(net: Network, arrays: dict[str, np.ndarray]) -> None:
    own = dict(net.named_parameters())
    if set(own) != set(arrays):
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        raise ConfigError(f"checkpoint/network parameter mismatch "
                          f"(missing {missing[:3]}, extra {extra[:3]})")
    with torch.no_grad():
        for name, p in own.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ConfigError(f"shape mismatch for {name}: checkpoint "
                                  f"{arr.shape} vs network {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.ascontiguousarray(arr)))
