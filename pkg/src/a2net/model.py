"""Attribute-aware hashing network and its checkpoint format.

Data flow for a batch of images ``I`` (N, C, H, W)::

    T   = backbone(I)                         stride-2 conv + relu stack
    A   = spatial_softmax(conv1x1(T))         k maps, each sums to 1
    T^c = A^c * T                             broadcast over channels
    x   = [gap(phi_local(T^c)) for c] ++ gap(phi_global(T))
    v   = W x,  v' = tanh(v),  u = sgn(v')    attribute space / hash code
    x'  = W^T v'                              feature decoder
    g   = W' x,  g' = W' x'                   compressor (plus_plus only)
    I^g = deconv(g),  I^g' = deconv(g')       image decoder (plus_plus only)

Batch-major layout throughout: X is (N, d), V is (N, k).
"""

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .kernels import conv_out_size, deconv_out_size

CHECKPOINT_MAGIC = b"A2CK"
CHECKPOINT_VERSION = 1

VARIANTS = ("basic", "plus_plus")


class ConfigError(ValueError):
    pass


def _kernel_hw(kernel):
    if isinstance(kernel, (list, tuple)):
        return int(kernel[0]), int(kernel[1])
    return int(kernel), int(kernel)


def default_deconv_spec(d_prime, image_shape):
    """Decoder rows reaching ``image_shape`` from a d'x1x1 seed.

    The first row is stride 1, pad 0 with kernel (H/2^(L-1), W/2^(L-1));
    every later row doubles the resolution with a 4x4 kernel, stride 2,
    pad 1. Three rows for 16x16 inputs, channel widths halving.
    """
    c, h, w = image_shape
    layers = 3
    while layers < 8 and (h % 2 ** (layers - 1) or w % 2 ** (layers - 1) or min(h, w) // 2 ** (layers - 1) > 4):
        layers += 1
    h0, w0 = h // 2 ** (layers - 1), w // 2 ** (layers - 1)
    if h0 < 1 or w0 < 1 or h0 * 2 ** (layers - 1) != h or w0 * 2 ** (layers - 1) != w:
        raise ConfigError(f"no default decoder for image shape {image_shape}; pass deconv_spec")
    widths = [max(4, 2 * d_prime >> i) for i in range(layers - 1)]
    rows, cin = [], d_prime
    for i in range(layers):
        cout = c if i == layers - 1 else widths[i]
        kern = [h0, w0] if i == 0 else 4
        rows.append([cin, kern, cout])
        cin = cout
    return rows


@dataclass
class ModelConfig:
    k: int = 12
    image_shape: tuple = (3, 16, 16)
    backbone_channels: list = field(default_factory=lambda: [16, 32])
    local_dim: int = 8
    global_dim: int = 16
    d: int = 0  # 0 -> derived as k*local_dim + global_dim
    d_prime: int = 8
    transform_depth: int = 2
    deconv_spec: list = None  # rows [d_in, kernel or [kh, kw], d_out]
    deconv_strides: list = None
    deconv_pads: list = None
    variant: str = "plus_plus"
    seed: int = 0

    def __post_init__(self):
        self.image_shape = tuple(int(s) for s in self.image_shape)
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigError(f"bad image_shape {self.image_shape}; expected (C, H, W)")
        self.backbone_channels = [int(c) for c in self.backbone_channels]
        if self.d == 0:
            self.d = self.k * self.local_dim + self.global_dim
        if self.variant == "plus_plus" and self.deconv_spec is None:
            self.deconv_spec = default_deconv_spec(self.d_prime, self.image_shape)
        if self.deconv_spec is not None:
            self.deconv_spec = [[int(r[0]), list(_kernel_hw(r[1])), int(r[2])] for r in self.deconv_spec]
            n = len(self.deconv_spec)
            if self.deconv_strides is None:
                self.deconv_strides = [1] + [2] * (n - 1)
            if self.deconv_pads is None:
                self.deconv_pads = [0] + [1] * (n - 1)
        self.validate()

    def validate(self):
        if self.k < 1:
            raise ConfigError("k must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigError(f"bad image_shape {self.image_shape}")
        if self.d != self.k * self.local_dim + self.global_dim:
            raise ConfigError(f"d={self.d} != k*local_dim + global_dim = {self.k * self.local_dim + self.global_dim}")
        if not self.backbone_channels:
            raise ConfigError("backbone needs at least one layer")
        h, w = self.feature_hw()
        if h < 1 or w < 1:
            raise ConfigError(f"backbone collapses {self.image_shape} to {h}x{w}")
        if self.variant == "plus_plus":
            if not 1 <= self.d_prime <= self.d:
                raise ConfigError(f"need 1 <= d_prime <= d, got d_prime={self.d_prime}, d={self.d}")
            self._validate_decoder()

    def _validate_decoder(self):
        spec = self.deconv_spec
        if not spec:
            raise ConfigError("plus_plus variant needs a deconv_spec")
        if len(self.deconv_strides) != len(spec) or len(self.deconv_pads) != len(spec):
            raise ConfigError("deconv strides/pads must have one entry per deconv row")
        if spec[0][0] != self.d_prime:
            raise ConfigError(f"first deconv row takes {spec[0][0]} channels, d_prime is {self.d_prime}")
        for a, b in zip(spec, spec[1:]):
            if a[2] != b[0]:
                raise ConfigError(f"deconv rows do not chain: {a} -> {b}")
        if spec[-1][2] != self.image_shape[0]:
            raise ConfigError(f"last deconv row emits {spec[-1][2]} channels, image has {self.image_shape[0]}")
        h = w = 1
        for (_, (kh, kw), _), s, p in zip(spec, self.deconv_strides, self.deconv_pads):
            h, w = deconv_out_size(h, kh, s, p), deconv_out_size(w, kw, s, p)
        if (h, w) != self.image_shape[1:]:
            raise ConfigError(f"deconv_spec yields {h}x{w}, image is {self.image_shape[1]}x{self.image_shape[2]}")

    def feature_hw(self):
        h, w = self.image_shape[1:]
        for _ in self.backbone_channels:
            h, w = conv_out_size(h, 3, 2, 1), conv_out_size(w, 3, 2, 1)
        return h, w

    def to_json(self):
        doc = asdict(self)
        doc["image_shape"] = list(self.image_shape)
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def _param(rng, shape, fan_in, name):
    bound = 1.0 / np.sqrt(fan_in)
    return ad.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _zeros(shape, name):
    return ad.Tensor(np.zeros(shape), requires_grad=True, name=name)


def init_params(config):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, fixed seed."""
    rng = np.random.default_rng(config.seed)
    p = {}
    cin = config.image_shape[0]
    for i, cout in enumerate(config.backbone_channels):
        p[f"backbone.{i}.w"] = _param(rng, (cout, cin, 3, 3), cin * 9, f"backbone.{i}.w")
        p[f"backbone.{i}.b"] = _zeros((cout,), f"backbone.{i}.b")
        cin = cout
    p["attention.w"] = _param(rng, (config.k, cin, 1, 1), cin, "attention.w")
    p["attention.b"] = _zeros((config.k,), "attention.b")
    for branch, width in (("local", config.local_dim), ("global", config.global_dim)):
        c = cin
        for j in range(config.transform_depth):
            p[f"{branch}.{j}.w"] = _param(rng, (width, c, 3, 3), c * 9, f"{branch}.{j}.w")
            p[f"{branch}.{j}.b"] = _zeros((width,), f"{branch}.{j}.b")
            c = width
    p["W"] = _param(rng, (config.k, config.d), config.d, "W")
    if config.variant == "plus_plus":
        p["W_prime"] = _param(rng, (config.d_prime, config.d), config.d, "W_prime")
        for i, (din, (kh, kw), dout) in enumerate(config.deconv_spec):
            p[f"deconv.{i}.w"] = _param(rng, (din, dout, kh, kw), din * kh * kw, f"deconv.{i}.w")
            p[f"deconv.{i}.b"] = _zeros((dout,), f"deconv.{i}.b")
    return p


@dataclass
class Forward:
    T: ad.Tensor
    A: ad.Tensor
    X: ad.Tensor
    V: ad.Tensor
    Vp: ad.Tensor
    Xp: ad.Tensor = None
    G: ad.Tensor = None
    Gp: ad.Tensor = None
    I_g: ad.Tensor = None
    I_gp: ad.Tensor = None


def binarize(v):
    """sgn(tanh(v)) with the tie sgn(0) = +1; tanh preserves sign so test v directly."""
    v = v.data if isinstance(v, ad.Tensor) else np.asarray(v)
    return np.where(v < 0, -1, 1).astype(np.int8)


class A2Net:
    def __init__(self, config, params=None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        expected = list(init_params(config)) if params is not None else None
        if expected is not None and list(self.params) != expected:
            raise ConfigError(f"parameter names {list(self.params)} do not match config {expected}")

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # ----- stages

    def _batch(self, images):
        x = images if isinstance(images, ad.Tensor) else ad.Tensor(images, name="images")
        if x.data.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        if tuple(x.shape[1:]) != tuple(self.config.image_shape):
            raise ad.ShapeError(f"image shape {tuple(x.shape[1:])} != configured {tuple(self.config.image_shape)}")
        return x

    def backbone_forward(self, images):
        t = self._batch(images)
        p = self.params
        for i in range(len(self.config.backbone_channels)):
            t = ad.relu(ad.conv2d(t, p[f"backbone.{i}.w"], p[f"backbone.{i}.b"], stride=2, pad=1))
        return t

    def attention_maps(self, T):
        logits = ad.conv2d(T, self.params["attention.w"], self.params["attention.b"])
        return ad.spatial_softmax(logits)

    @staticmethod
    def attend(T, A):
        """All k attended tensors at once: (N, C, H, W) x (N, k, H, W) -> (N, k, C, H, W)."""
        n, c, h, w = T.shape
        if tuple(A.shape[-2:]) != (h, w) or A.shape[0] != n:
            raise ad.ShapeError(f"attention maps {A.shape} do not match activations {T.shape}")
        k = A.shape[1]
        return ad.hadamard(ad.reshape(T, (n, 1, c, h, w)), ad.reshape(A, (n, k, 1, h, w)))

    def _transform(self, t, branch):
        """3x3 conv stack, relu between layers; the last conv stays linear."""
        last = self.config.transform_depth - 1
        for j in range(self.config.transform_depth):
            t = ad.conv2d(t, self.params[f"{branch}.{j}.w"], self.params[f"{branch}.{j}.b"], pad=1)
            if j < last:
                t = ad.relu(t)
        return t

    def holistic_feature(self, T, A):
        n, c, h, w = T.shape
        k = A.shape[1]
        tc = ad.reshape(self.attend(T, A), (n * k, c, h, w))
        local = ad.global_avg_pool(self._transform(tc, "local"))  # (n*k, local_dim)
        local = ad.reshape(local, (n, k * self.config.local_dim))
        glob = ad.global_avg_pool(self._transform(T, "global"))
        return ad.concat([local, glob], axis=1)

    def encode_attribute(self, X):
        V = ad.matmul(X, self.params["W"], trans_b=True)
        return V, ad.tanh(V)

    def decode_feature(self, Vp):
        return ad.matmul(Vp, self.params["W"])

    def compress_feature(self, X):
        return ad.matmul(X, self.params["W_prime"], trans_b=True)

    def image_decode(self, G):
        cfg = self.config
        t = ad.reshape(G, (G.shape[0], G.shape[1], 1, 1))
        last = len(cfg.deconv_spec) - 1
        for i, (s, pd) in enumerate(zip(cfg.deconv_strides, cfg.deconv_pads)):
            t = ad.transposed_conv2d(t, self.params[f"deconv.{i}.w"], self.params[f"deconv.{i}.b"], stride=s, pad=pd)
            if i < last:
                t = ad.relu(t)
        return t

    # ----- data-dependent initialisation

    def _standardise(self, name, out, axes):
        """Rescale layer ``name`` so ``out`` (its current output) has zero mean, unit std per channel."""
        mean = out.mean(axis=axes)
        std = out.std(axis=axes)
        std = np.where(std > 1e-12, std, 1.0)
        w, b = self.params[f"{name}.w"], self.params[f"{name}.b"]
        w.data = w.data / std.reshape((-1,) + (1,) * (w.data.ndim - 1))
        b.data = (b.data - mean) / std

    def data_init(self, images):
        """Layer-by-layer rescaling of the encoder convs on a sample batch.

        Every backbone and transform conv gets zero-mean, unit-variance
        output channels; for the last transform conv the statistics are
        taken after pooling, so the holistic feature x starts centred with
        unit spread. Attention logits are scaled to unit spread. Without
        this, x has a tiny spread around a large common offset and the
        hash codes of all images coincide.
        """
        p = self.params
        cfg = self.config
        t = self._batch(images)
        for i in range(len(cfg.backbone_channels)):
            name = f"backbone.{i}"
            conv = lambda: ad.conv2d(t, p[f"{name}.w"], p[f"{name}.b"], stride=2, pad=1)
            self._standardise(name, conv().data, (0, 2, 3))
            t = ad.relu(conv())
        T = t
        z = ad.conv2d(T, p["attention.w"], p["attention.b"]).data
        std = z.std(axis=(0, 2, 3))
        p["attention.w"].data = p["attention.w"].data / np.where(std > 1e-12, std, 1.0).reshape(-1, 1, 1, 1)
        A = self.attention_maps(T)
        n, c, h, w = T.shape
        inputs = {"local": ad.reshape(self.attend(T, A), (n * cfg.k, c, h, w)), "global": T}
        last = cfg.transform_depth - 1
        for branch, t in inputs.items():
            for j in range(cfg.transform_depth):
                name = f"{branch}.{j}"
                conv = lambda: ad.conv2d(t, p[f"{name}.w"], p[f"{name}.b"], pad=1)
                if j < last:
                    self._standardise(name, conv().data, (0, 2, 3))
                    t = ad.relu(conv())
                else:
                    self._standardise(name, conv().data.mean(axis=(2, 3)), (0,))
        return self

    # ----- end to end

    def forward(self, images, decode=True):
        T = self.backbone_forward(images)
        A = self.attention_maps(T)
        X = self.holistic_feature(T, A)
        V, Vp = self.encode_attribute(X)
        out = Forward(T=T, A=A, X=X, V=V, Vp=Vp)
        if decode:
            out.Xp = self.decode_feature(Vp)
            if self.config.variant == "plus_plus":
                out.G = self.compress_feature(X)
                out.Gp = self.compress_feature(out.Xp)
                out.I_g = self.image_decode(out.G)
                out.I_gp = self.image_decode(out.Gp)
        return out

    def latent(self, images, batch_size=64):
        """Real-valued v = W F(I) for a stack of images, computed in batches."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        chunks = [self.forward(images[i:i + batch_size], decode=False).V.data
                  for i in range(0, len(images), batch_size)]
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.config.k))

    def encode(self, images, batch_size=64):
        """Binary codes in {-1, +1} for unseen images, shape (N, k)."""
        return binarize(self.latent(images, batch_size))

    # ----- persistence

    def state_bytes(self):
        cfg = self.config.to_json().encode("utf-8")
        parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(cfg)), cfg]
        for name, t in self.params.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)) + raw)
            parts.append(struct.pack("<I", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return b"".join(parts)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.state_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def from_bytes(cls, raw):
        def take(n):
            nonlocal off
            if off + n > len(raw):
                raise CheckpointError("truncated checkpoint")
            chunk = raw[off:off + n]
            off += n
            return chunk

        off = 0
        if take(4) != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        (version,) = struct.unpack("<I", take(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (ln,) = struct.unpack("<I", take(4))
        config = ModelConfig.from_json(take(ln).decode("utf-8"))
        template = init_params(config)
        params = {}
        for want, ref in template.items():
            (ln,) = struct.unpack("<I", take(4))
            name = take(ln).decode("utf-8")
            if name != want:
                raise CheckpointError(f"expected tensor {want!r}, found {name!r}")
            (rank,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{rank}I", take(4 * rank))
            if tuple(shape) != ref.shape:
                raise CheckpointError(f"tensor {name}: shape {shape} != {ref.shape}")
            count = int(np.prod(shape))
            data = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
            params[name] = ad.Tensor(data, requires_grad=True, name=name)
        if off != len(raw):
            raise CheckpointError(f"{len(raw) - off} trailing bytes in checkpoint")
        return cls(config, params)

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


class CheckpointError(ValueError):
    pass
