"""Executable network built from an :class:`ArchSpec`."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import nn_ops as F
from .architect import ArchSpec
from .blocks import BN, _Allocator, block_forward, grid_to_tokens, init_block, tokens_to_grid
from .engine import Parameter, Tensor, load_checkpoint, save_checkpoint
from .errors import FormatError, ShapeError
from .nn_ops import ConvSpec, PoolSpec

STEM_POOL = PoolSpec("max", 3, 2, 1)


def patchify(x: Tensor, patch: int) -> Tensor:
    """(N, C, H, W) image to (N, T, C*p*p) non-overlapping patch rows."""
    n, c, h, w = x.shape
    hp, wp = h // patch, w // patch
    x = x.reshape(n, c, hp, patch, wp, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, hp * wp, c * patch * patch)


class Network:
    """Parameters plus forward pass for one architecture.

    Every tensor is seeded from ``(seed, crc32(name))`` so a layer's initial
    value does not depend on what else the network contains.
    """

    def __init__(self, spec: ArchSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        self.modules: OrderedDict[str, dict] = OrderedDict()
        st = spec.stem
        a = _Allocator("stem.", seed)
        stem: dict = {}
        if st.kind == "resnet_stem":
            stem.update(a.conv("conv", ConvSpec(st.in_channels, st.out_channels, 7, 2)))
            stem.update(a.bn("bn", st.out_channels))
        elif st.kind == "cifar_stem":
            stem.update(a.conv("conv", ConvSpec(st.in_channels, st.out_channels, 3, 1)))
            stem.update(a.bn("bn", st.out_channels))
        else:
            _, h, w = spec.input_shape
            t = (h // st.patch) * (w // st.patch)
            stem.update(a.linear("proj", st.in_channels * st.patch ** 2, st.out_channels))
            stem["pos_embed"] = a.param("pos_embed", (1, t, st.out_channels), ("uniform", -0.02, 0.02))
        self.modules["stem"] = stem

        for si, stage in enumerate(spec.stages):
            if stage.token_pool:
                d = stage.blocks[0].in_channels
                pa = _Allocator(f"s{si + 1}.pool.", seed)
                self.modules[f"s{si + 1}.pool"] = pa.conv("conv", self._pool_conv(d), bias=True)
            for bi, block in enumerate(stage.blocks):
                name = f"s{si + 1}.b{bi + 1}"
                self.modules[name] = init_block(block, seed, prefix=f"{name}.")

        hd = spec.head
        ha = _Allocator("head.", seed)
        head: dict = {}
        if spec.is_token:
            head.update(ha.layer_norm("norm", hd.in_features))
        head.update(ha.linear("fc", hd.in_features, hd.num_classes))
        self.modules["head"] = head

    @staticmethod
    def _pool_conv(d):
        return ConvSpec(d, d, 3, 2, groups=d)

    # -- parameter access ------------------------------------------------

    def named_parameters(self):
        for mod, params in self.modules.items():
            for key, value in params.items():
                if isinstance(value, Parameter):
                    yield f"{mod}.{key}", value
                elif isinstance(value, BN):
                    yield f"{mod}.{key}.gamma", value.gamma
                    yield f"{mod}.{key}.beta", value.beta

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_bn(self):
        for mod, params in self.modules.items():
            for key, value in params.items():
                if isinstance(value, BN):
                    yield f"{mod}.{key}", value

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data
        for name, bn in self.named_bn():
            out[f"{name}.running_mean"] = bn.state.running_mean
            out[f"{name}.running_var"] = bn.state.running_var
        return out

    def load_state_dict(self, state) -> None:
        expected = self.state_dict()
        missing = set(expected) - set(state)
        extra = set(state) - set(expected)
        if missing or extra:
            raise FormatError(f"checkpoint mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        params = dict(self.named_parameters())
        bns = dict(self.named_bn())
        for name, ref in expected.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.size != ref.size:
                raise FormatError(f"{name}: checkpoint holds {arr.size} values, network needs {ref.size}")
            arr = arr.reshape(ref.shape)
            if name in params:
                params[name].data[...] = arr
            else:
                base, _, stat = name.rpartition(".")
                setattr(bns[base].state, stat, arr.copy())

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(load_checkpoint(path))

    # -- forward -----------------------------------------------------------

    def forward(self, x, train: bool = False) -> Tensor:
        spec = self.spec
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1:] != spec.input_shape:
            raise ShapeError(f"{spec.name} expects (N, {', '.join(map(str, spec.input_shape))}) input, got {x.shape}")
        st, p = spec.stem, self.modules["stem"]
        if st.kind == "patch_embed":
            grid = (x.shape[2] // st.patch, x.shape[3] // st.patch)
            h = F.linear(patchify(x, st.patch), p["proj.weight"], p["proj.bias"]) + p["pos_embed"]
        else:
            k = 7 if st.kind == "resnet_stem" else 3
            r = 2 if st.kind == "resnet_stem" else 1
            h = F.conv2d(x, p["conv.weight"], ConvSpec(st.in_channels, st.out_channels, k, r))
            h = F.relu(p["bn"](h, train))
            if st.kind == "resnet_stem":
                h = F.max_pool2d(h, STEM_POOL, return_indices=False)
            grid = None

        for si, stage in enumerate(spec.stages):
            if stage.token_pool:
                pp = self.modules[f"s{si + 1}.pool"]
                d = stage.blocks[0].in_channels
                g = F.conv2d(tokens_to_grid(h, grid), pp["conv.weight"], self._pool_conv(d), bias=pp["conv.bias"])
                grid = g.shape[2:]
                h = grid_to_tokens(g)
            for bi, block in enumerate(stage.blocks):
                h = block_forward(h, self.modules[f"s{si + 1}.b{bi + 1}"], block, train, grid)

        hp = self.modules["head"]
        if spec.is_token:
            h = F.layer_norm(h, hp["norm.gamma"], hp["norm.beta"]).mean(axis=1)
        else:
            h = F.global_avg_pool(h).reshape(h.shape[0], h.shape[1])
        return F.linear(h, hp["fc.weight"], hp["fc.bias"])

    __call__ = forward
