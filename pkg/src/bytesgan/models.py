"""Network architectures: GAN generator, class-logit discriminator, CNN baseline.

Parameters are immutable-by-convention dataclasses of numpy arrays; every
forward pass is a pure function of (params, input) and has an explicit
backward companion returning parameter gradients of the same dataclass
shape. Architecture hyperparameters live in frozen config dataclasses whose
canonical JSON is hashed into a fingerprint that travels with checkpoints,
so a checkpoint can never be silently loaded into a different shape.
"""

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ContractError, FormatError
from .seeding import derive_rng

CHECKPOINT_MAGIC = b"BSGM"
CHECKPOINT_VERSION = 1

WEIGHT_INIT_STDDEV = 0.02


# ---------------------------------------------------------------------------
# architecture configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorConfig:
    """Noise -> dense -> deconv -> conv -> tanh image of base*stride size."""

    noise_dim: int = 100
    base_h: int = 10
    base_w: int = 37
    base_channels: int = 64
    deconv_channels: int = 32
    deconv_kernel: int = 4
    stride: int = 2
    out_kernel: int = 7
    out_channels: int = 1
    leaky_slope: float = 0.2
    dtype: str = "float32"

    @property
    def out_h(self):
        return self.base_h * self.stride

    @property
    def out_w(self):
        return self.base_w * self.stride


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Stride-2 conv tower ending in a hidden affine stage and K class logits."""

    n_classes: int
    in_h: int = 20
    in_w: int = 74
    in_channels: int = 1
    channels: tuple = (32, 64, 128)
    kernel: int = 3
    stride: int = 2
    hidden: int = 512
    leaky_slope: float = 0.2
    dtype: str = "float32"

    def conv_out_shape(self):
        h, w = self.in_h, self.in_w
        for _ in self.channels:
            h = ops.same_out_size(h, self.stride)
            w = ops.same_out_size(w, self.stride)
        return h, w

    @property
    def flat_dim(self):
        h, w = self.conv_out_shape()
        return h * w * self.channels[-1]


@dataclass(frozen=True)
class CnnConfig:
    """1-D conv/pool baseline over the flat byte vector."""

    n_classes: int
    input_len: int = 1480
    channels: tuple = (128, 128, 128)
    kernel: int = 5
    pools: tuple = (5, 5, 35)
    hidden: int = 256
    dtype: str = "float32"

    def stage_lengths(self):
        """Length after each conv and pool stage, valid coverage throughout."""
        lengths = []
        n = self.input_len
        for pool in self.pools:
            n = n - self.kernel + 1
            lengths.append(n)
            n = n - pool + 1
            lengths.append(n)
        return lengths

    @property
    def flat_dim(self):
        return self.stage_lengths()[-1] * self.channels[-1]


def config_fingerprint(config) -> str:
    """sha256 over the canonical JSON of an architecture config."""
    doc = {"kind": type(config).__name__, **dataclasses.asdict(config)}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_CONFIG_TYPES = {
    "GeneratorConfig": GeneratorConfig,
    "DiscriminatorConfig": DiscriminatorConfig,
    "CnnConfig": CnnConfig,
}

_TUPLE_FIELDS = {"channels", "pools"}


def _config_from_dict(doc):
    kind = doc.pop("kind")
    cls = _CONFIG_TYPES[kind]
    for key in _TUPLE_FIELDS & doc.keys():
        doc[key] = tuple(doc[key])
    return cls(**doc)


# ---------------------------------------------------------------------------
# parameter bundles
# ---------------------------------------------------------------------------

@dataclass
class GeneratorParams:
    config: GeneratorConfig
    dense_w: np.ndarray
    dense_b: np.ndarray
    deconv_w: np.ndarray
    deconv_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray


@dataclass
class DiscriminatorParams:
    config: DiscriminatorConfig
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    conv3_w: np.ndarray
    conv3_b: np.ndarray
    hidden_w: np.ndarray
    hidden_b: np.ndarray
    logit_w: np.ndarray
    logit_b: np.ndarray


@dataclass
class CnnParams:
    config: CnnConfig
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    conv3_w: np.ndarray
    conv3_b: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray


ARCH_TAGS = {
    GeneratorParams: "generator",
    DiscriminatorParams: "discriminator",
    CnnParams: "cnn",
}
_PARAM_TYPES = {tag: cls for cls, tag in ARCH_TAGS.items()}


def array_fields(params):
    """(name, array) pairs in declared field order, skipping the config."""
    return [(f.name, getattr(params, f.name))
            for f in dataclasses.fields(params) if f.name != "config"]


def tree_map(fn, params, *rest):
    """Apply fn over corresponding array fields, returning a new bundle."""
    kwargs = {"config": params.config}
    for f in dataclasses.fields(params):
        if f.name == "config":
            continue
        others = [getattr(r, f.name) for r in rest]
        kwargs[f.name] = fn(getattr(params, f.name), *others)
    return type(params)(**kwargs)


def params_digest(params) -> str:
    """sha256 over the raw little-endian bytes of all arrays, for tests."""
    h = hashlib.sha256()
    for _, arr in array_fields(params):
        h.update(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# initialization: N(0, 0.02) weights, zero biases, deterministic in seed
# ---------------------------------------------------------------------------

def _generator_shapes(c: GeneratorConfig):
    dense_out = c.base_h * c.base_w * c.base_channels
    return {
        "dense_w": (c.noise_dim, dense_out),
        "dense_b": (dense_out,),
        "deconv_w": (c.deconv_kernel, c.deconv_kernel, c.base_channels, c.deconv_channels),
        "deconv_b": (c.deconv_channels,),
        "out_w": (c.out_kernel, c.out_kernel, c.deconv_channels, c.out_channels),
        "out_b": (c.out_channels,),
    }


def _discriminator_shapes(c: DiscriminatorConfig):
    chain = (c.in_channels,) + tuple(c.channels)
    shapes = {}
    for i in range(3):
        shapes[f"conv{i + 1}_w"] = (c.kernel, c.kernel, chain[i], chain[i + 1])
        shapes[f"conv{i + 1}_b"] = (chain[i + 1],)
    shapes["hidden_w"] = (c.flat_dim, c.hidden)
    shapes["hidden_b"] = (c.hidden,)
    shapes["logit_w"] = (c.hidden, c.n_classes)
    shapes["logit_b"] = (c.n_classes,)
    return shapes


def _cnn_shapes(c: CnnConfig):
    chain = (1,) + tuple(c.channels)
    shapes = {}
    for i in range(3):
        shapes[f"conv{i + 1}_w"] = (c.kernel, chain[i + 1], chain[i])
        shapes[f"conv{i + 1}_b"] = (chain[i + 1],)
    shapes["fc1_w"] = (c.flat_dim, c.hidden)
    shapes["fc1_b"] = (c.hidden,)
    shapes["fc2_w"] = (c.hidden, c.n_classes)
    shapes["fc2_b"] = (c.n_classes,)
    return shapes


_SHAPE_FNS = {
    "generator": _generator_shapes,
    "discriminator": _discriminator_shapes,
    "cnn": _cnn_shapes,
}


def _init_fields(shapes, seed, label, dtype):
    rng = derive_rng(seed, label)
    out = {}
    for name, shape in shapes.items():
        if name.endswith("_b"):
            out[name] = np.zeros(shape, dtype=dtype)
        else:
            out[name] = rng.normal(0.0, WEIGHT_INIT_STDDEV, shape).astype(dtype)
    return out


def init_generator(config: GeneratorConfig, seed: int) -> GeneratorParams:
    fields = _init_fields(_generator_shapes(config), seed, "init-generator",
                          np.dtype(config.dtype))
    return GeneratorParams(config=config, **fields)


def init_discriminator(config: DiscriminatorConfig, seed: int) -> DiscriminatorParams:
    fields = _init_fields(_discriminator_shapes(config), seed, "init-discriminator",
                          np.dtype(config.dtype))
    return DiscriminatorParams(config=config, **fields)


def init_cnn(config: CnnConfig, seed: int) -> CnnParams:
    fields = _init_fields(_cnn_shapes(config), seed, "init-cnn",
                          np.dtype(config.dtype))
    return CnnParams(config=config, **fields)


def init_params(architecture: str, schema, seed: int, config=None):
    """Initialize any of the three architectures against a class schema."""
    if architecture == "generator":
        return init_generator(config or GeneratorConfig(), seed)
    if architecture == "discriminator":
        return init_discriminator(config or DiscriminatorConfig(n_classes=schema.n), seed)
    if architecture == "cnn":
        return init_cnn(config or CnnConfig(n_classes=schema.n), seed)
    raise ContractError(f"unknown architecture {architecture!r}")


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

def sample_noise(rng, batch, dim=100, prior="uniform", dtype=np.float32):
    """Noise batch from uniform [-1,1] (default) or a standard Gaussian."""
    if prior == "uniform":
        z = rng.uniform(-1.0, 1.0, size=(batch, dim))
    elif prior == "gaussian":
        z = rng.standard_normal(size=(batch, dim))
    else:
        raise ContractError(f"unknown noise prior {prior!r}")
    return z.astype(dtype)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def generator_apply(params: GeneratorParams, z):
    """Forward pass with cache; z (B, noise_dim) -> y (B, out_h, out_w, 1)."""
    c = params.config
    z = np.asarray(z, dtype=params.dense_w.dtype)
    if z.ndim != 2 or z.shape[1] != c.noise_dim:
        raise ContractError(f"noise must be (B, {c.noise_dim}), got {z.shape}")
    h0 = ops.dense(z, params.dense_w, params.dense_b)
    x0 = h0.reshape(-1, c.base_h, c.base_w, c.base_channels)
    a0 = ops.leaky_relu(x0, c.leaky_slope)
    h1, c1 = ops.conv_transpose2d(a0, params.deconv_w, params.deconv_b, c.stride)
    a1 = ops.leaky_relu(h1, c.leaky_slope)
    h2, c2 = ops.conv2d(a1, params.out_w, params.out_b, 1)
    y = np.tanh(h2)
    cache = (z, x0, c1, h1, c2, y)
    return y, cache


def generator_forward(params: GeneratorParams, z):
    """Generated sample tensor (B, out_h, out_w, out_channels) in (-1, 1)."""
    y, _ = generator_apply(params, z)
    return y


def generator_backward(params: GeneratorParams, cache, dy):
    c = params.config
    z, x0, c1, h1, c2, y = cache
    dh2 = ops.tanh_backward(y, dy)
    da1, d_out_w, d_out_b = ops.conv2d_backward(params.out_w, c2, dh2)
    dh1 = ops.leaky_relu_backward(h1, da1, c.leaky_slope)
    da0, d_deconv_w, d_deconv_b = ops.conv_transpose2d_backward(params.deconv_w, c1, dh1)
    dh0 = ops.leaky_relu_backward(x0, da0, c.leaky_slope).reshape(z.shape[0], -1)
    dz, d_dense_w, d_dense_b = ops.dense_backward(z, params.dense_w, dh0)
    grads = GeneratorParams(
        config=c, dense_w=d_dense_w, dense_b=d_dense_b,
        deconv_w=d_deconv_w, deconv_b=d_deconv_b,
        out_w=d_out_w, out_b=d_out_b)
    return grads, dz


def flatten_samples(y):
    """Row-major flatten of (B, H, W, 1) sample tensors to (B, H*W)."""
    return y.reshape(y.shape[0], -1)


def reshape_vectors(vectors, config: DiscriminatorConfig):
    """Row-major reshape of (B, H*W) byte vectors to the (B, H, W, 1) input."""
    b = vectors.shape[0]
    return vectors.reshape(b, config.in_h, config.in_w, config.in_channels)


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

@dataclass
class DiscriminatorOutput:
    """Per-sample class logits plus the derived heads.

    supervised_probs is softmax over the K class logits; realness is the
    shared-weight unsupervised head Z/(Z+1) with Z the sum of exponentiated
    logits; features is the hidden affine output used for feature matching.
    """

    logits: np.ndarray            # (B, K)
    supervised_probs: np.ndarray  # (B, K)
    realness: np.ndarray          # (B,)
    features: np.ndarray          # (B, hidden)


def _heads_from_logits(logits):
    probs = ops.softmax(logits.astype(np.float64)).astype(logits.dtype)
    log_z = ops.logsumexp(logits.astype(np.float64), axis=-1)
    realness = ops.sigmoid(log_z).astype(logits.dtype)
    return probs, realness


def discriminator_apply(params: DiscriminatorParams, x):
    """Forward pass with cache; x (B, in_h, in_w, 1) -> DiscriminatorOutput."""
    c = params.config
    x = np.asarray(x, dtype=params.conv1_w.dtype)
    expect = (c.in_h, c.in_w, c.in_channels)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise ContractError(f"input must be (B, {expect[0]}, {expect[1]}, {expect[2]}), got {x.shape}")
    if not np.isfinite(x).all():
        raise ContractError("non-finite discriminator input")
    h1, c1 = ops.conv2d(x, params.conv1_w, params.conv1_b, c.stride)
    a1 = ops.leaky_relu(h1, c.leaky_slope)
    h2, c2 = ops.conv2d(a1, params.conv2_w, params.conv2_b, c.stride)
    a2 = ops.leaky_relu(h2, c.leaky_slope)
    h3, c3 = ops.conv2d(a2, params.conv3_w, params.conv3_b, c.stride)
    a3 = ops.leaky_relu(h3, c.leaky_slope)
    flat = a3.reshape(x.shape[0], -1)
    feats = ops.dense(flat, params.hidden_w, params.hidden_b)
    ah = ops.leaky_relu(feats, c.leaky_slope)
    logits = ops.dense(ah, params.logit_w, params.logit_b)
    probs, realness = _heads_from_logits(logits)
    out = DiscriminatorOutput(logits=logits, supervised_probs=probs,
                              realness=realness, features=feats)
    cache = (c1, h1, c2, h2, c3, h3, flat, feats, ah)
    return out, cache


def discriminator_forward(params: DiscriminatorParams, x) -> DiscriminatorOutput:
    out, _ = discriminator_apply(params, x)
    return out


def discriminator_backward(params: DiscriminatorParams, cache, dlogits, dfeatures=None):
    """Backprop from logit (and optionally feature) gradients to params and input."""
    c = params.config
    c1, h1, c2, h2, c3, h3, flat, feats, ah = cache
    dah = dlogits @ params.logit_w.T
    d_logit_w = ah.T @ dlogits
    d_logit_b = dlogits.sum(axis=0)
    dfeats = ops.leaky_relu_backward(feats, dah, c.leaky_slope)
    if dfeatures is not None:
        dfeats = dfeats + dfeatures
    dflat, d_hidden_w, d_hidden_b = ops.dense_backward(flat, params.hidden_w, dfeats)
    out_h, out_w = c.conv_out_shape()
    da3 = dflat.reshape(-1, out_h, out_w, c.channels[-1])
    dh3 = ops.leaky_relu_backward(h3, da3, c.leaky_slope)
    da2, d_conv3_w, d_conv3_b = ops.conv2d_backward(params.conv3_w, c3, dh3)
    dh2 = ops.leaky_relu_backward(h2, da2, c.leaky_slope)
    da1, d_conv2_w, d_conv2_b = ops.conv2d_backward(params.conv2_w, c2, dh2)
    dh1 = ops.leaky_relu_backward(h1, da1, c.leaky_slope)
    dx, d_conv1_w, d_conv1_b = ops.conv2d_backward(params.conv1_w, c1, dh1)
    grads = DiscriminatorParams(
        config=c,
        conv1_w=d_conv1_w, conv1_b=d_conv1_b,
        conv2_w=d_conv2_w, conv2_b=d_conv2_b,
        conv3_w=d_conv3_w, conv3_b=d_conv3_b,
        hidden_w=d_hidden_w, hidden_b=d_hidden_b,
        logit_w=d_logit_w, logit_b=d_logit_b)
    return grads, dx


# ---------------------------------------------------------------------------
# CNN baseline
# ---------------------------------------------------------------------------

def cnn_apply(params: CnnParams, x):
    """Forward with cache; x (B, input_len) -> (probs, logits, cache).

    Internally the conv/pool pipeline runs channel-major (C, B, L); the
    flatten order for the affine stages is (channel, position) per sample.
    """
    c = params.config
    x = np.asarray(x, dtype=params.conv1_w.dtype)
    if x.ndim != 2 or x.shape[1] != c.input_len:
        raise ContractError(f"input must be (B, {c.input_len}), got {x.shape}")
    cur = x.reshape(1, x.shape[0], c.input_len)
    cache = {}
    for i in (1, 2, 3):
        w = getattr(params, f"conv{i}_w")
        b = getattr(params, f"conv{i}_b")
        h, cc = ops.conv1d(cur, w, b)
        # max is monotone, so pooling before the ReLU is exactly equivalent
        # to the conv/ReLU/pool order and keeps the clamp on the small side
        pooled_raw, arg = ops.maxpool1d(h, c.pools[i - 1])
        cache[f"conv{i}"] = (cc, pooled_raw, h.shape[2], arg)
        cur = ops.relu(pooled_raw)
    flat = np.ascontiguousarray(cur.transpose(1, 0, 2)).reshape(x.shape[0], -1)
    hidden = ops.dense(flat, params.fc1_w, params.fc1_b)
    ha = ops.relu(hidden)
    logits = ops.dense(ha, params.fc2_w, params.fc2_b)
    probs = ops.softmax(logits.astype(np.float64)).astype(logits.dtype)
    cache.update(flat=flat, hidden=hidden, ha=ha, pooled_shape=cur.shape)
    return probs, logits, cache


def cnn_forward(params: CnnParams, x):
    """Class probabilities (B, N), rows summing to 1."""
    probs, _, _ = cnn_apply(params, x)
    return probs


def cnn_backward(params: CnnParams, cache, dlogits):
    c = params.config
    dha = dlogits @ params.fc2_w.T
    d_fc2_w = cache["ha"].T @ dlogits
    d_fc2_b = dlogits.sum(axis=0)
    dhidden = ops.relu_backward(cache["hidden"], dha)
    dflat, d_fc1_w, d_fc1_b = ops.dense_backward(cache["flat"], params.fc1_w, dhidden)
    ch, bsz, plen = cache["pooled_shape"]
    dcur = np.ascontiguousarray(dflat.reshape(bsz, ch, plen).transpose(1, 0, 2))
    grads = {"fc1_w": d_fc1_w, "fc1_b": d_fc1_b, "fc2_w": d_fc2_w, "fc2_b": d_fc2_b}
    for i in (3, 2, 1):
        conv_cache, pooled_raw, h_len, arg = cache[f"conv{i}"]
        dpool = ops.relu_backward(pooled_raw, dcur)
        dh = ops.maxpool1d_backward(arg, h_len, dpool)
        w = getattr(params, f"conv{i}_w")
        dcur, dw, db = ops.conv1d_backward(w, conv_cache, dh, need_dx=(i > 1))
        grads[f"conv{i}_w"] = dw
        grads[f"conv{i}_b"] = db
    return CnnParams(config=c, **grads)


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, arch tag, fingerprint, schema, config,
# then flat little-endian arrays in declared field order
# ---------------------------------------------------------------------------

def _write_str(fh, s):
    raw = s.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_exact(fh, n, what):
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return raw


def _read_str(fh, what):
    (n,) = struct.unpack("<H", _read_exact(fh, 2, what))
    return _read_exact(fh, n, what).decode("utf-8")


def save_checkpoint(path, params, schema_names=()):
    """Write a versioned BSGM checkpoint for any of the three param bundles."""
    arch = ARCH_TAGS[type(params)]
    config_doc = {"kind": type(params.config).__name__,
                  **dataclasses.asdict(params.config)}
    config_blob = json.dumps(config_doc, sort_keys=True, separators=(",", ":"))
    fingerprint = hashlib.sha256(config_blob.encode("utf-8")).hexdigest()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        _write_str(fh, arch)
        _write_str(fh, fingerprint)
        fh.write(struct.pack("<H", len(schema_names)))
        for name in schema_names:
            _write_str(fh, name)
        raw = config_blob.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for _, arr in array_fields(params):
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    return fingerprint


@dataclass
class Checkpoint:
    arch: str
    params: object
    schema_names: tuple
    fingerprint: str


def checkpoint_fingerprint(params) -> str:
    return config_fingerprint(params.config)


def load_checkpoint(path, expect_arch=None, expect_fingerprint=None) -> Checkpoint:
    """Load and validate a BSGM checkpoint; rejects fingerprint mismatches."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        arch = _read_str(fh, "architecture tag")
        fingerprint = _read_str(fh, "fingerprint")
        (n_names,) = struct.unpack("<H", _read_exact(fh, 2, "schema size"))
        schema_names = tuple(_read_str(fh, "schema name") for _ in range(n_names))
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config_blob = _read_exact(fh, blob_len, "config").decode("utf-8")
        if hashlib.sha256(config_blob.encode("utf-8")).hexdigest() != fingerprint:
            raise FormatError(f"{path}: config fingerprint mismatch (corrupt or tampered)")
        if expect_arch is not None and arch != expect_arch:
            raise FormatError(f"{path}: expected a {expect_arch} checkpoint, found {arch}")
        if expect_fingerprint is not None and fingerprint != expect_fingerprint:
            raise FormatError(f"{path}: architecture fingerprint mismatch")
        if arch not in _PARAM_TYPES:
            raise FormatError(f"{path}: unknown architecture tag {arch!r}")
        config = _config_from_dict(json.loads(config_blob))
        dtype = np.dtype(config.dtype).newbyteorder("<")
        arrays = {}
        for name, shape in _SHAPE_FNS[arch](config).items():
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, count * dtype.itemsize, f"array {name}")
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(config.dtype)
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"{path}: trailing bytes after parameter arrays")
    params = _PARAM_TYPES[arch](config=config, **arrays)
    return Checkpoint(arch=arch, params=params, schema_names=schema_names,
                      fingerprint=fingerprint)
