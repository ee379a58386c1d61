"""The four split components and the monolithic local reference model.

Parameter naming (shared by the split and local forms)::

    image.<i>.<name>        host image bottom (mini-ResNet)
    tabular.<i>.<name>      guest tabular bottom (MLP)
    interactive.w_host      [interactive_dim x embed_dim]
    interactive.w_guest     [interactive_dim x embed_dim]
    interactive.bias        [interactive_dim]
    top.<i>.<name>          guest top model

The local model replaces the three ``interactive.*`` tensors with
``fusion.0.weight = [w_host | w_guest]`` and ``fusion.0.bias``; everything else
is shared verbatim.  :func:`to_local` and :func:`to_split` are exact inverses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from splitvfl.errors import CacheError, ConfigError, ShapeError
from splitvfl.nn import (
    Conv2d,
    Dense,
    GlobalAvgPool,
    MaxPool2d,
    OptimizerConfig,
    ParameterStore,
    ReLU,
    ResidualBlock,
    Stack,
    sgd_step,
    softmax_cross_entropy,
)
from splitvfl.nn.layers import glorot_bound

ACTIVATIONS = ("identity", "relu")

# Sub-stream of the init seed used for each component.
_IMAGE, _TABULAR, _INTERACTIVE, _TOP = range(4)


@dataclass(frozen=True)
class SplitModelConfig:
    tabular_in: int = 12
    tabular_hidden: int = 20
    embed_dim: int = 10
    image_shape: tuple[int, int, int] = (1, 32, 32)
    image_blocks: int = 2
    image_width: int = 8
    interactive_dim: int = 10
    interactive_activation: str = "identity"
    num_classes: int = 3

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        for name in ("tabular_in", "tabular_hidden", "embed_dim", "image_width", "interactive_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.image_blocks < 0:
            raise ConfigError(f"image_blocks must be >= 0, got {self.image_blocks}")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigError(f"image_shape must be (channels, height, width), got {self.image_shape}")
        if self.interactive_activation not in ACTIVATIONS:
            raise ConfigError(f"interactive_activation must be one of {ACTIVATIONS}")
        try:
            image_bottom(self)
        except ShapeError as exc:
            raise ConfigError(f"image bottom does not fit image_shape {self.image_shape}: {exc}") from None


def image_bottom(cfg: SplitModelConfig) -> Stack:
    """Stem conv, 2x2 max-pool, residual blocks, global average pool, dense to embed_dim.

    Odd-numbered blocks downsample (stride 2, channels doubled), so
    ``image_blocks=8`` gives a ResNet-18-style depth.
    """
    width = cfg.image_width
    layers = [Conv2d(cfg.image_shape[0], width), ReLU(), MaxPool2d()]
    for i in range(cfg.image_blocks):
        block = ResidualBlock(width, downsample=(i % 2 == 1))
        layers.append(block)
        width = block.out_channels
    layers += [GlobalAvgPool(), Dense(width, cfg.embed_dim)]
    return Stack(layers, cfg.image_shape, prefix="image.")


def tabular_bottom(cfg: SplitModelConfig) -> Stack:
    layers = [Dense(cfg.tabular_in, cfg.tabular_hidden), ReLU(), Dense(cfg.tabular_hidden, cfg.embed_dim)]
    return Stack(layers, (cfg.tabular_in,), prefix="tabular.")


def top_model(cfg: SplitModelConfig) -> Stack:
    return Stack([Dense(cfg.interactive_dim, cfg.num_classes)], (cfg.interactive_dim,), prefix="top.")


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(z, 0) if activation == "relu" else z


def _activate_grad(z: np.ndarray, grad: np.ndarray, activation: str) -> np.ndarray:
    return np.where(z > 0, grad, 0).astype(grad.dtype) if activation == "relu" else grad


# --------------------------------------------------------- interactive ---

@dataclass
class InteractiveCache:
    e_host: np.ndarray
    e_guest: np.ndarray
    pre: np.ndarray
    used: bool = False


def interactive_forward(p: ParameterStore, e_host: np.ndarray, e_guest: np.ndarray,
                        activation: str = "identity") -> tuple[np.ndarray, InteractiveCache]:
    """``z = g(e_host @ W_host.T + e_guest @ W_guest.T + b)``."""
    if e_host.ndim != 2 or e_guest.ndim != 2 or e_host.shape[0] != e_guest.shape[0]:
        raise ShapeError(f"batch mismatch: e_host {e_host.shape} vs e_guest {e_guest.shape}")
    w_host = p["interactive.w_host"].value
    w_guest = p["interactive.w_guest"].value
    if e_host.shape[1] != w_host.shape[1] or e_guest.shape[1] != w_guest.shape[1]:
        raise ShapeError(
            f"embedding widths {e_host.shape[1]}/{e_guest.shape[1]} do not match "
            f"interactive inputs {w_host.shape[1]}/{w_guest.shape[1]}"
        )
    pre = e_host @ w_host.T + e_guest @ w_guest.T + p["interactive.bias"].value
    return _activate(pre, activation), InteractiveCache(e_host, e_guest, pre)


def interactive_backward(p: ParameterStore, cache: InteractiveCache, grad_z: np.ndarray,
                         activation: str = "identity") -> tuple[np.ndarray, np.ndarray]:
    """Accumulate W/b gradients; return ``(grad_e_host, grad_e_guest)``."""
    if cache.used:
        raise CacheError("stale interactive cache: backward already ran")
    if grad_z.shape != cache.pre.shape:
        raise ShapeError(f"grad_z shape {grad_z.shape}, expected {cache.pre.shape}")
    g = _activate_grad(cache.pre, grad_z, activation)
    w_host = p["interactive.w_host"]
    w_guest = p["interactive.w_guest"]
    w_host.grad += g.T @ cache.e_host
    w_guest.grad += g.T @ cache.e_guest
    p["interactive.bias"].grad += g.sum(axis=0)
    cache.used = True
    return g @ w_host.value, g @ w_guest.value


# -------------------------------------------------------------- models ---

@dataclass
class SplitModel:
    cfg: SplitModelConfig
    image: ParameterStore
    tabular: ParameterStore
    interactive: ParameterStore
    top: ParameterStore

    def host(self) -> "HostModel":
        return HostModel(self.cfg, self.image)

    def guest(self) -> "GuestModel":
        return GuestModel(self.cfg, self.tabular, self.interactive, self.top)

    def stores(self) -> list[ParameterStore]:
        return [self.image, self.tabular, self.interactive, self.top]

    def logits(self, images: np.ndarray, tabular: np.ndarray) -> np.ndarray:
        e_host = self.host().embed(images)
        return self.guest().logits(tabular, e_host)


def _component_rng(seed: int, component: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), component])


def init_image(cfg: SplitModelConfig, seed: int) -> ParameterStore:
    return image_bottom(cfg).init(_component_rng(seed, _IMAGE))


def init_guest(cfg: SplitModelConfig, seed: int) -> tuple[ParameterStore, ParameterStore, ParameterStore]:
    tabular = tabular_bottom(cfg).init(_component_rng(seed, _TABULAR))
    rng = _component_rng(seed, _INTERACTIVE)
    e, i = cfg.embed_dim, cfg.interactive_dim
    # Drawn as one [I x 2E] matrix so the local linear layer sees a plain Glorot init.
    b = glorot_bound(2 * e, i)
    full = rng.uniform(-b, b, size=(i, 2 * e)).astype(np.float32)
    interactive = ParameterStore()
    interactive.add("interactive.w_host", np.ascontiguousarray(full[:, :e]))
    interactive.add("interactive.w_guest", np.ascontiguousarray(full[:, e:]))
    interactive.add("interactive.bias", np.zeros(i, dtype=np.float32))
    top = top_model(cfg).init(_component_rng(seed, _TOP))
    return tabular, interactive, top


def build_split_model(cfg: SplitModelConfig, seed: int) -> SplitModel:
    """Host image bottom, guest tabular bottom, interactive layer, top model.

    Each component draws from its own seeded stream, so a party can build
    just its share (:func:`init_image` / :func:`init_guest`) and get the same
    bytes as a full build.
    """
    return SplitModel(cfg, init_image(cfg, seed), *init_guest(cfg, seed))


class HostModel:
    """Image bottom model held by the host party."""

    def __init__(self, cfg: SplitModelConfig, params: ParameterStore):
        self.cfg = cfg
        self.stack = image_bottom(cfg)
        self.params = params
        self._caches = None

    def embed(self, images: np.ndarray, training: bool = False) -> np.ndarray:
        e, caches = self.stack.forward(self.params, images, training)
        self._caches = caches if training else None
        return e

    def backward(self, grad_e_host: np.ndarray) -> None:
        if self._caches is None:
            raise CacheError("host backward without a training forward pass")
        self.stack.backward(self.params, self._caches, grad_e_host)
        self._caches = None

    def step(self, opt: OptimizerConfig) -> None:
        sgd_step(self.params, opt)


class GuestModel:
    """Tabular bottom, interactive layer, and top model held by the label owner."""

    def __init__(self, cfg: SplitModelConfig, tabular: ParameterStore, interactive: ParameterStore,
                 top: ParameterStore):
        self.cfg = cfg
        self.bottom = tabular_bottom(cfg)
        self.head = top_model(cfg)
        self.tabular = tabular
        self.interactive = interactive
        self.top = top

    def stores(self) -> list[ParameterStore]:
        return [self.tabular, self.interactive, self.top]

    def _forward(self, x_tab, e_host):
        e_guest, bc = self.bottom.forward(self.tabular, x_tab)
        z, ic = interactive_forward(self.interactive, e_host, e_guest, self.cfg.interactive_activation)
        logits, tc = self.head.forward(self.top, z)
        return logits, (bc, ic, tc)

    def logits(self, x_tab: np.ndarray, e_host: np.ndarray) -> np.ndarray:
        return self._forward(x_tab, e_host)[0]

    def forward_backward(self, x_tab: np.ndarray, e_host: np.ndarray, labels) -> tuple[float, np.ndarray]:
        """Loss on one batch and the gradient owed to the host's embedding."""
        logits, (bc, ic, tc) = self._forward(x_tab, e_host)
        loss, g = softmax_cross_entropy(logits, labels)
        gz = self.head.backward(self.top, tc, g)
        g_host, g_guest = interactive_backward(self.interactive, ic, gz, self.cfg.interactive_activation)
        self.bottom.backward(self.tabular, bc, g_guest)
        return loss, g_host

    def evaluate(self, x_tab: np.ndarray, e_host: np.ndarray, labels) -> tuple[float, np.ndarray]:
        logits = self.logits(x_tab, e_host)
        return softmax_cross_entropy(logits, labels)[0], logits

    def step(self, opt: OptimizerConfig) -> None:
        for store in self.stores():
            sgd_step(store, opt)


@dataclass
class LocalReferenceModel:
    """Single-process model: the interactive layer is one linear map over ``[e_host ; e_guest]``."""

    cfg: SplitModelConfig
    image: ParameterStore
    tabular: ParameterStore
    fusion: ParameterStore
    top: ParameterStore
    _stacks: tuple = field(init=False, repr=False)

    def __post_init__(self):
        e, i = self.cfg.embed_dim, self.cfg.interactive_dim
        fusion = [Dense(2 * e, i)] + ([ReLU()] if self.cfg.interactive_activation == "relu" else [])
        self._stacks = (image_bottom(self.cfg), tabular_bottom(self.cfg),
                        Stack(fusion, (2 * e,), prefix="fusion."), top_model(self.cfg))

    def stores(self) -> list[ParameterStore]:
        return [self.image, self.tabular, self.fusion, self.top]

    def _forward(self, images, x_tab):
        img, tab, fus, top = self._stacks
        e_host, c_img = img.forward(self.image, images)
        e_guest, c_tab = tab.forward(self.tabular, x_tab)
        if e_host.shape[0] != e_guest.shape[0]:
            raise ShapeError(f"unaligned batch: {e_host.shape[0]} images vs {e_guest.shape[0]} rows")
        z, c_fus = fus.forward(self.fusion, np.concatenate([e_host, e_guest], axis=1))
        logits, c_top = top.forward(self.top, z)
        return logits, (c_img, c_tab, c_fus, c_top)

    def logits(self, images: np.ndarray, x_tab: np.ndarray) -> np.ndarray:
        return self._forward(images, x_tab)[0]

    def evaluate(self, images, x_tab, labels) -> tuple[float, np.ndarray]:
        logits = self.logits(images, x_tab)
        return softmax_cross_entropy(logits, labels)[0], logits

    def train_step(self, images, x_tab, labels, opt: OptimizerConfig) -> float:
        """One forward/backward/update with in-process gradient flow."""
        img, tab, fus, top = self._stacks
        logits, (c_img, c_tab, c_fus, c_top) = self._forward(images, x_tab)
        loss, g = softmax_cross_entropy(logits, labels)
        gz = top.backward(self.top, c_top, g)
        gcat = fus.backward(self.fusion, c_fus, gz)
        e = self.cfg.embed_dim
        tab.backward(self.tabular, c_tab, np.ascontiguousarray(gcat[:, e:]))
        img.backward(self.image, c_img, np.ascontiguousarray(gcat[:, :e]))
        for store in self.stores():
            sgd_step(store, opt)
        return loss


def local_reference_step(model: LocalReferenceModel, images, x_tab, labels, opt: OptimizerConfig):
    loss = model.train_step(images, x_tab, labels, opt)
    return loss, model


def _copy(store: ParameterStore) -> ParameterStore:
    return store.copy()


def to_local(split: SplitModel) -> LocalReferenceModel:
    """Flatten a split model into the local form (copies; velocities carried over)."""
    it = split.interactive
    fusion = ParameterStore()
    w = fusion.add("fusion.0.weight", np.concatenate([it["interactive.w_host"].value,
                                                       it["interactive.w_guest"].value], axis=1))
    b = fusion.add("fusion.0.bias", it["interactive.bias"].value.copy())
    if it["interactive.w_host"].velocity is not None:
        w.velocity = np.concatenate([it["interactive.w_host"].velocity, it["interactive.w_guest"].velocity], axis=1)
        b.velocity = it["interactive.bias"].velocity.copy()
    return LocalReferenceModel(split.cfg, _copy(split.image), _copy(split.tabular), fusion, _copy(split.top))


def to_split(local: LocalReferenceModel) -> SplitModel:
    e = local.cfg.embed_dim
    w = local.fusion["fusion.0.weight"]
    b = local.fusion["fusion.0.bias"]
    it = ParameterStore()
    wh = it.add("interactive.w_host", np.ascontiguousarray(w.value[:, :e]))
    wg = it.add("interactive.w_guest", np.ascontiguousarray(w.value[:, e:]))
    bb = it.add("interactive.bias", b.value.copy())
    if w.velocity is not None:
        wh.velocity = np.ascontiguousarray(w.velocity[:, :e])
        wg.velocity = np.ascontiguousarray(w.velocity[:, e:])
        bb.velocity = b.velocity.copy()
    return SplitModel(local.cfg, _copy(local.image), _copy(local.tabular), it, _copy(local.top))


def predict_from_logits(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(logits, axis=1)


def predict(model: SplitModel | LocalReferenceModel, images: np.ndarray, x_tab: np.ndarray) -> np.ndarray:
    return predict_from_logits(model.logits(images, x_tab))


class TabularOnlyModel:
    """Ablation without the image party: tabular bottom, guest half of the fusion, top."""

    def __init__(self, cfg: SplitModelConfig, seed: int):
        self.cfg = cfg
        tabular, interactive, top = init_guest(cfg, seed)
        layers = list(tabular_bottom(cfg).layers) + [Dense(cfg.embed_dim, cfg.interactive_dim)]
        if cfg.interactive_activation == "relu":
            layers.append(ReLU())
        layers += top_model(cfg).layers
        self.stack = Stack(layers, (cfg.tabular_in,))
        self.params = ParameterStore()
        names = self._source_names(tabular, interactive, top)
        for i, layer in enumerate(self.stack.layers):
            for local, *_ in layer.param_specs():
                self.params.add(f"{i}.{local}", names[(i, local)].copy())

    def _source_names(self, tabular, interactive, top):
        n_tab = len(tabular_bottom(self.cfg).layers)
        fuse_idx = n_tab
        top_idx = n_tab + (2 if self.cfg.interactive_activation == "relu" else 1)
        out = {}
        for i, layer in enumerate(tabular_bottom(self.cfg).layers):
            for local, *_ in layer.param_specs():
                out[(i, local)] = tabular[f"tabular.{i}.{local}"].value
        out[(fuse_idx, "weight")] = interactive["interactive.w_guest"].value
        out[(fuse_idx, "bias")] = interactive["interactive.bias"].value
        for local, *_ in Dense(1, 1).param_specs():
            out[(top_idx, local)] = top[f"top.0.{local}"].value
        return out

    def logits(self, x_tab: np.ndarray) -> np.ndarray:
        return self.stack.forward(self.params, x_tab)[0]

    def evaluate(self, x_tab, labels) -> tuple[float, np.ndarray]:
        logits = self.logits(x_tab)
        return softmax_cross_entropy(logits, labels)[0], logits

    def train_step(self, x_tab, labels, opt: OptimizerConfig) -> float:
        logits, caches = self.stack.forward(self.params, x_tab)
        loss, g = softmax_cross_entropy(logits, labels)
        self.stack.backward(self.params, caches, g)
        sgd_step(self.params, opt)
        return loss
