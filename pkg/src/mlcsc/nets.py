"""Image classifiers built from unrolled pursuit.

A net is a layered sparse model whose solver pass is unrolled into the
gradient engine, plus a linear head on the deepest code.  The plain-numpy
solver path (:func:`forward_classify`) and the engine path
(:func:`classifier_graph`) share the low-level convolution kernels, so
their forwards agree exactly; training differentiates through the engine
path with SGD + momentum and a milestone learning-rate schedule.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dictionary import ConvDictionary, DimensionError, estimate_spectral_bound, output_extent
from .pursuit import AnchorPolicy, LayerParams, MLCSCModel, run_pursuit, wsebp_forward

BETA_FLOOR = 1e-4


@dataclass
class NetConfig:
    """Geometry and solver selection for a pursuit classifier.

    All layers share ``kernel``/``stride``/``padding`` with a zero boundary;
    ``channels`` lists the code channels per layer.  Step scales start at
    each layer's spectral bound; ``beta_mode`` decides whether SGD may move
    them ("learned") or they stay frozen ("fixed").
    """

    channels: tuple[int, ...]
    in_channels: int = 3
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    input_hw: tuple[int, int] = (32, 32)
    num_classes: int = 10
    algorithm: str = "wsebp"
    iters: int = 0
    anchor: AnchorPolicy = AnchorPolicy.ANALYSIS
    threshold: str = "relu"
    beta_mode: str = "learned"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels or min(self.channels) < 1:
            raise ValueError(f"channels must be positive, got {self.channels}")
        self.input_hw = (int(self.input_hw[0]), int(self.input_hw[1]))
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.beta_mode not in ("learned", "fixed"):
            raise ValueError(f"unknown beta_mode {self.beta_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.anchor = AnchorPolicy(self.anchor)
        self.hw_chain()  # geometry must stay positive through every layer

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def hw_chain(self) -> list[tuple[int, int]]:
        """Spatial extents of the signal and every code plane."""
        chain = [self.input_hw]
        for _ in self.channels:
            h, w = chain[-1]
            chain.append(
                (
                    output_extent(h, self.kernel, self.stride, self.padding),
                    output_extent(w, self.kernel, self.stride, self.padding),
                )
            )
        return chain

    @property
    def feature_dim(self) -> int:
        h, w = self.hw_chain()[-1]
        return self.channels[-1] * h * w


@dataclass
class ClassifierHead:
    """Linear read-out on the flattened deepest code."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        self.bias = np.asarray(self.bias)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise DimensionError("head expects weight [classes, features], bias [classes]")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise DimensionError(
                f"head weight rows {self.weight.shape[0]} != bias length {self.bias.shape[0]}"
            )


@dataclass
class ClassifierNet:
    model: MLCSCModel
    head: ClassifierHead
    config: NetConfig


def build_mlcsc_net(config: NetConfig) -> ClassifierNet:
    """Construct a classifier with seeded Gaussian filters and zero thresholds.

    Filters are scaled by sqrt(2 / fan_in); the head by sqrt(1 / features).
    Every layer's step scale starts at its spectral bound (smaller scales
    make the correction terms expansive and training diverges);
    ``beta_mode="fixed"`` keeps it there while ``"learned"`` lets SGD move
    it, clamped above :data:`BETA_FLOOR`.
    """
    rng = np.random.default_rng(config.seed)
    dtype = config.np_dtype()
    chain = config.hw_chain()
    layers = []
    cin = config.in_channels
    for i, m in enumerate(config.channels):
        w = rng.standard_normal((m, cin, config.kernel, config.kernel))
        w *= np.sqrt(2.0 / (cin * config.kernel * config.kernel))
        d = ConvDictionary(w.astype(dtype), stride=config.stride, padding=config.padding)
        h, w_ = chain[i]
        beta = estimate_spectral_bound(d, (cin, h, w_)).bound
        layers.append((d, LayerParams(np.zeros(m, dtype=dtype), beta=beta)))
        cin = m
    model = MLCSCModel(
        layers,
        algorithm=config.algorithm,
        iters=config.iters,
        anchor=config.anchor,
        threshold=config.threshold,
    )
    feat = config.feature_dim
    head = ClassifierHead(
        (rng.standard_normal((config.num_classes, feat)) * np.sqrt(1.0 / feat)).astype(dtype),
        np.zeros(config.num_classes, dtype=dtype),
    )
    return ClassifierNet(model, head, config)


def count_params_from_config(config: NetConfig) -> int:
    """Parameter total from geometry alone, without building the net.

    Counts filters + per-channel thresholds + one step scale per layer,
    plus the linear head on the flattened deepest code; always agrees with
    :func:`param_count` of the built net.
    """
    total = 0
    cin = config.in_channels
    for m in config.channels:
        total += m * cin * config.kernel * config.kernel + m + 1
        cin = m
    return total + config.num_classes * (config.feature_dim + 1)


def param_count(net) -> int:
    """Total parameters: filters + thresholds + one step scale per layer + head."""
    if isinstance(net, VggNet):
        total = 0
        for block in net.blocks:
            for d, p in block.layers:
                total += d.weights.size + p.xi.size + 1
        return total + net.head.weight.size + net.head.bias.size
    total = 0
    for d, p in net.model.layers:
        total += d.weights.size + p.xi.size + 1
    return total + net.head.weight.size + net.head.bias.size


def get_params(net: ClassifierNet) -> dict[str, np.ndarray]:
    """Copy the trainable tensors out as a flat name -> array dict."""
    params: dict[str, np.ndarray] = {}
    dtype = net.config.np_dtype()
    for i, (d, p) in enumerate(net.model.layers):
        params[f"layer{i:02d}.weights"] = d.weights.copy()
        params[f"layer{i:02d}.xi"] = p.xi.copy()
        params[f"layer{i:02d}.beta"] = np.asarray(p.beta, dtype=dtype)
    params["head.weight"] = net.head.weight.copy()
    params["head.bias"] = net.head.bias.copy()
    return params


def set_params(net: ClassifierNet, params: dict[str, np.ndarray]) -> None:
    """Push a flat param dict back into the live model and head."""
    for i, (d, p) in enumerate(net.model.layers):
        d.weights = np.asarray(params[f"layer{i:02d}.weights"])
        p.xi = np.asarray(params[f"layer{i:02d}.xi"])
        p.beta = float(params[f"layer{i:02d}.beta"])
    net.head.weight = np.asarray(params["head.weight"])
    net.head.bias = np.asarray(params["head.bias"])


def forward_classify(net: ClassifierNet, images) -> np.ndarray:
    """Plain-numpy forward: solver pass, flatten deepest code, linear head."""
    images = np.asarray(images)
    squeeze = images.ndim == 3
    if squeeze:
        images = images[None]
    result = run_pursuit(net.model, images)
    feat = result.deepest.reshape(images.shape[0], -1)
    logits = feat @ net.head.weight.T + net.head.bias
    return logits[0] if squeeze else logits


def _bias_var(params: dict[str, ad.Var], name: str, m: int) -> ad.Var:
    return ad.reshape(params[name], (1, m, 1, 1))


def _prox_var(step: ad.Var, params, name: str, m: int, mode: str) -> ad.Var:
    if mode == "relu":
        return ad.relu(ad.add(step, _bias_var(params, name, m)))
    return ad.soft_threshold(step, _bias_var(params, name, m))


def classifier_graph(config: NetConfig, params: dict[str, ad.Var], images: np.ndarray) -> ad.Var:
    """Engine forward mirroring :func:`forward_classify` op for op.

    Every arithmetic step reuses the solver path's kernels and evaluation
    order, so for identical parameters the logits agree bit-for-bit.
    """
    s, p, mode = config.stride, config.padding, config.threshold
    chain = config.hw_chain()
    depth = len(config.channels)
    x = ad.Var(images, name="images")
    dtype = images.dtype

    def w(i):
        return params[f"layer{i:02d}.weights"]

    def xi_name(i):
        return f"layer{i:02d}.xi"

    def beta(i):
        return params[f"layer{i:02d}.beta"]

    def analyze_(i, v):
        return ad.conv_analyze(v, w(i), s, p, "zero")

    def synthesize_(i, v, hw):
        return ad.conv_synthesize(v, w(i), s, p, "zero", hw)

    def lta_pass():
        codes = []
        prev = x
        for i, m in enumerate(config.channels):
            pre = ad.add(analyze_(i, prev), _bias_var(params, xi_name(i), m))
            prev = ad.relu(pre)
            codes.append(prev)
        return codes

    algorithm = config.algorithm
    if algorithm == "lbp" and config.iters == 0:
        algorithm = "lta"

    if algorithm == "lta":
        deepest = lta_pass()[-1]
    elif algorithm == "wsebp":
        prev = x
        for i, m in enumerate(config.channels):
            oh, ow = chain[i + 1]
            if config.anchor is AnchorPolicy.ZERO:
                corr = ad.inv_scale(analyze_(i, prev), beta(i))
                prev = ad.relu(ad.add(corr, _bias_var(params, xi_name(i), m)))
                continue
            if config.anchor is AnchorPolicy.ANALYSIS:
                z = analyze_(i, prev)
            else:
                if prev.value.shape[1] != m or tuple(chain[i]) != (oh, ow):
                    raise DimensionError(
                        f"literal anchor needs matching input/code spaces at layer {i}"
                    )
                z = prev
            resid = ad.sub(prev, synthesize_(i, z, chain[i]))
            corr = ad.inv_scale(analyze_(i, resid), beta(i))
            pre = ad.add(ad.add(z, corr), _bias_var(params, xi_name(i), m))
            prev = ad.relu(pre)
        deepest = prev
    elif algorithm == "lbp":
        prev = x
        for i, m in enumerate(config.channels):
            gamma = _prox_var(
                ad.inv_scale(analyze_(i, prev), beta(i)), params, xi_name(i), m, mode
            )
            for _ in range(config.iters - 1):
                resid = ad.sub(synthesize_(i, gamma, chain[i]), prev)
                step = ad.sub(gamma, ad.inv_scale(analyze_(i, resid), beta(i)))
                gamma = _prox_var(step, params, xi_name(i), m, mode)
            prev = gamma
        deepest = prev
    elif algorithm == "mlista":
        codes = lta_pass()
        for _ in range(config.iters):
            hats = []
            for i in range(depth):
                hat = codes[-1]
                for j in range(depth, i + 1, -1):
                    hat = synthesize_(j - 1, hat, chain[j - 1])
                hats.append(hat)
            prev = x
            for i, m in enumerate(config.channels):
                hat = hats[i]
                resid = ad.sub(synthesize_(i, hat, chain[i]), prev)
                step = ad.sub(hat, ad.inv_scale(analyze_(i, resid), beta(i)))
                gamma = _prox_var(step, params, xi_name(i), m, mode)
                codes[i] = gamma
                prev = gamma
        deepest = codes[-1]
    else:
        raise ValueError(f"unknown algorithm {config.algorithm!r}")

    return ad.affine(ad.flatten(deepest), params["head.weight"], params["head.bias"])


@dataclass
class TrainConfig:
    """SGD + momentum schedule: lr decays by ``lr_decay`` at each milestone."""

    lr: float
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 1
    milestones: tuple[int, ...] = ()
    lr_decay: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        ms = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must increase strictly, got {ms}")
        self.milestones = ms
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")


def schedule_lr(cfg: TrainConfig, epoch: int) -> float:
    """lr * lr_decay^(number of milestones at or before ``epoch``, 0-based)."""
    hits = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr * cfg.lr_decay**hits


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray]
    epoch: int = 0


def init_train_state(net: ClassifierNet) -> TrainState:
    params = get_params(net)
    return TrainState(params, {k: np.zeros_like(v) for k, v in params.items()})


def train_epoch(net: ClassifierNet, state: TrainState, data, cfg: TrainConfig) -> dict:
    """One shuffled pass of SGD + momentum; mutates ``state`` and ``net``.

    Returns mean loss, training accuracy, and the learning rate used.  The
    shuffle is seeded by (cfg.seed, epoch) so runs are reproducible.
    Raises on a non-finite loss, naming the batch and the gradient scale.
    """
    images = np.asarray(data.images)
    labels = np.asarray(data.labels)
    n = images.shape[0]
    lr = schedule_lr(cfg, state.epoch)
    order = np.random.default_rng((cfg.seed, state.epoch)).permutation(n)
    total_loss = 0.0
    correct = 0
    for bi, start in enumerate(range(0, n, cfg.batch_size)):
        idx = order[start : start + cfg.batch_size]
        xb, yb = images[idx], labels[idx]
        leaves = {k: ad.Var(v, name=k) for k, v in state.params.items()}
        logits = classifier_graph(net.config, leaves, xb)
        loss = ad.softmax_cross_entropy(logits, yb)
        ad.backward(loss)
        grads = {k: leaves[k].grad for k in state.params}
        gmax = max(
            (float(np.abs(g).max()) for g in grads.values() if g is not None), default=0.0
        )
        if not np.isfinite(loss.value):
            raise RuntimeError(
                f"non-finite loss at epoch {state.epoch} batch {bi} (max |grad| {gmax:.3e})"
            )
        frozen_beta = net.config.beta_mode == "fixed"
        for name in sorted(state.params):
            g = grads[name]
            if g is None or (frozen_beta and name.endswith(".beta")):
                continue
            v = state.velocities[name]
            v *= cfg.momentum
            v += g
            state.params[name] -= lr * v
            if name.endswith(".beta"):
                np.maximum(state.params[name], BETA_FLOOR, out=state.params[name])
        total_loss += float(loss.value) * len(idx)
        correct += int((np.argmax(logits.value, axis=1) == yb).sum())
    state.epoch += 1
    set_params(net, state.params)
    return {"loss": total_loss / n, "accuracy": correct / n, "lr": lr}


@dataclass
class EvalResult:
    accuracy: float
    per_class_correct: np.ndarray
    per_class_total: np.ndarray


def evaluate(net: ClassifierNet, data, batch_size: int = 256) -> EvalResult:
    """Accuracy and per-class counts; argmax ties go to the lowest class."""
    images = np.asarray(data.images)
    labels = np.asarray(data.labels)
    classes = net.config.num_classes
    correct = np.zeros(classes, dtype=np.int64)
    total = np.zeros(classes, dtype=np.int64)
    for start in range(0, images.shape[0], batch_size):
        xb = images[start : start + batch_size]
        yb = labels[start : start + batch_size]
        pred = np.argmax(forward_classify(net, xb), axis=1)
        for cls in range(classes):
            mask = yb == cls
            total[cls] += int(mask.sum())
            correct[cls] += int((pred[mask] == cls).sum())
    acc = float(correct.sum()) / max(int(total.sum()), 1)
    return EvalResult(acc, correct, total)


def build_tl_wsebp_block(
    in_channels: int, out_channels: int, kernel: int = 3, seed: int = 0, dtype=np.float32
) -> MLCSCModel:
    """Two stacked stride-1 layers solved by the single-pass corrector.

    Drop-in stand-in for a pair of same-width conv layers: spatial extent is
    preserved (padding (k-1)/2) while channels go in -> out -> out.
    """
    if kernel % 2 != 1:
        raise ValueError("block kernel must be odd to preserve spatial extent")
    rng = np.random.default_rng(seed)
    pad = (kernel - 1) // 2
    layers = []
    cin = in_channels
    for m in (out_channels, out_channels):
        w = rng.standard_normal((m, cin, kernel, kernel)) * np.sqrt(
            2.0 / (cin * kernel * kernel)
        )
        d = ConvDictionary(w.astype(dtype), stride=1, padding=pad)
        layers.append((d, LayerParams(np.zeros(m, dtype=dtype))))
        cin = m
    return MLCSCModel(layers, algorithm="wsebp", anchor=AnchorPolicy.ANALYSIS)


def max_pool2(x: np.ndarray) -> np.ndarray:
    """2x2/2 max pooling; spatial extents must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2 needs even extents, got {(h, w)}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


@dataclass
class VggNet:
    """Five pooled two-layer blocks and a linear head."""

    blocks: list[MLCSCModel]
    head: ClassifierHead
    input_hw: tuple[int, int]


VGG13_PLAN = (64, 128, 256, 512, 512)


def build_wsebp_vgg13(
    num_classes: int = 10,
    in_channels: int = 3,
    input_hw: tuple[int, int] = (32, 32),
    seed: int = 0,
    dtype=np.float32,
) -> VggNet:
    """VGG13-shaped stack where each conv pair is a TL-WSEBP block."""
    h, w = input_hw
    if h % 32 or w % 32:
        raise DimensionError("input extents must be divisible by 32 for five pools")
    blocks = []
    cin = in_channels
    for i, width in enumerate(VGG13_PLAN):
        blocks.append(build_tl_wsebp_block(cin, width, seed=seed + i, dtype=dtype))
        cin = width
    feat = VGG13_PLAN[-1] * (h // 32) * (w // 32)
    rng = np.random.default_rng(seed + len(VGG13_PLAN))
    head = ClassifierHead(
        (rng.standard_normal((num_classes, feat)) * np.sqrt(1.0 / feat)).astype(dtype),
        np.zeros(num_classes, dtype=dtype),
    )
    return VggNet(blocks, head, (h, w))


def vgg13_forward(net: VggNet, images) -> np.ndarray:
    """Blocks with 2x2 pooling between them, then the linear head."""
    x = np.asarray(images)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    for block in net.blocks:
        x = max_pool2(wsebp_forward(block, x).deepest)
    logits = x.reshape(x.shape[0], -1) @ net.head.weight.T + net.head.bias
    return logits[0] if squeeze else logits


def save_checkpoint(directory, net: ClassifierNet, extra: dict | None = None) -> None:
    """Write net geometry to a manifest and every parameter to a tensor file."""
    from .data import write_manifest, write_tensor_file

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = net.config
    manifest = {
        "format": "mlcsc-checkpoint-v1",
        "channels": ",".join(str(c) for c in cfg.channels),
        "in_channels": cfg.in_channels,
        "kernel": cfg.kernel,
        "stride": cfg.stride,
        "padding": cfg.padding,
        "input_h": cfg.input_hw[0],
        "input_w": cfg.input_hw[1],
        "num_classes": cfg.num_classes,
        "algorithm": cfg.algorithm,
        "iters": cfg.iters,
        "anchor": cfg.anchor.value,
        "threshold": cfg.threshold,
        "beta_mode": cfg.beta_mode,
        "seed": cfg.seed,
        "dtype": cfg.dtype,
    }
    for key, value in (extra or {}).items():
        manifest[f"extra.{key}"] = value
    write_manifest(directory / "manifest.txt", manifest)
    for name, arr in get_params(net).items():
        write_tensor_file(directory / f"{name}.mlct", np.atleast_1d(arr))


def load_checkpoint(directory) -> tuple[ClassifierNet, dict[str, str]]:
    """Rebuild a net from :func:`save_checkpoint` output."""
    from .data import FormatError, read_manifest, read_tensor_file

    directory = Path(directory)
    manifest = read_manifest(directory / "manifest.txt")
    if manifest.get("format") != "mlcsc-checkpoint-v1":
        raise FormatError(f"{directory}: not a checkpoint (format={manifest.get('format')!r})")
    config = NetConfig(
        channels=tuple(int(c) for c in manifest["channels"].split(",")),
        in_channels=int(manifest["in_channels"]),
        kernel=int(manifest["kernel"]),
        stride=int(manifest["stride"]),
        padding=int(manifest["padding"]),
        input_hw=(int(manifest["input_h"]), int(manifest["input_w"])),
        num_classes=int(manifest["num_classes"]),
        algorithm=manifest["algorithm"],
        iters=int(manifest["iters"]),
        anchor=AnchorPolicy(manifest["anchor"]),
        threshold=manifest["threshold"],
        beta_mode=manifest["beta_mode"],
        seed=int(manifest["seed"]),
        dtype=manifest["dtype"],
    )
    net = build_mlcsc_net(config)
    dtype = config.np_dtype()
    params = get_params(net)
    loaded = {}
    for name, expect in params.items():
        arr = read_tensor_file(directory / f"{name}.mlct").astype(dtype)
        if arr.size != expect.size:
            raise FormatError(
                f"{name}: checkpoint holds {arr.size} values, net expects {expect.size}"
            )
        loaded[name] = arr.reshape(expect.shape)
    set_params(net, loaded)
    extra = {k[len("extra.") :]: v for k, v in manifest.items() if k.startswith("extra.")}
    return net, extra


def make_gradcheck_problem(seed: int = 0):
    """Small float64 single-pass net + fixed batch for gradient audits.

    Returns (loss_fn, params, resample): ``loss_fn`` maps Var params to the
    batch cross-entropy, ``resample`` redraws the parameter point when the
    evaluation lands too close to a ReLU kink.
    """
    config = NetConfig(
        channels=(8, 16),
        in_channels=1,
        kernel=3,
        stride=1,
        padding=1,
        input_hw=(8, 8),
        num_classes=3,
        algorithm="wsebp",
        anchor=AnchorPolicy.ANALYSIS,
        dtype="float64",
    )
    data_rng = np.random.default_rng(1234)
    images = data_rng.standard_normal((2, 1, 8, 8))
    labels = np.array([0, 2])

    def draw(seed_: int) -> dict[str, np.ndarray]:
        net = build_mlcsc_net(dataclasses.replace(config, seed=seed_))
        params = get_params(net)
        rng = np.random.default_rng(seed_ + 99)
        for i in range(len(config.channels)):
            params[f"layer{i:02d}.xi"] = rng.standard_normal(config.channels[i]) * 0.05
            params[f"layer{i:02d}.beta"] = np.asarray(1.0 + 0.4 * rng.random())
        return params

    def loss_fn(pvars: dict[str, ad.Var]) -> ad.Var:
        return ad.softmax_cross_entropy(classifier_graph(config, pvars, images), labels)

    return loss_fn, draw(seed), lambda attempt: draw(seed + 1000 * attempt)
