"""Golden-noise network: spectral branch, residual branch, conditioning.

The network maps (head noise, class) to a predicted target noise as the
sum of three terms,

    prediction = alpha * e + x_tilde + beta * x_hat

where x_tilde rebuilds the input from its singular factors with edited
singular values, x_hat is a learned residual from a small patch
transformer, e is the class-conditioned group-normalized embedding term,
and alpha, beta are trainable scalars.

Identity at initialization is exact by construction: the singular-value
head and the residual output head are zero-initialized and alpha = beta
= 0, and the spectral edit is parameterized as a *delta*

    x_tilde = x + U diag(softplus(raw + c) - softplus(c)) V^T,
    c = softplus^-1(Sigma)

which is exactly 0.0 when the head output `raw` is zero, so an untrained
network returns its input bit-for-bit.  Gradients never flow through the
decomposition itself: U, Sigma, V enter the graph as constants and only
the edited singular values carry parameter gradients.

The conditioning text encoder is a learned class-embedding table, frozen
by default (train_embeddings unfreezes it).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NumericError
from .npd import NoisePairRecord
from .rng import RngStream, derive_stream, gaussian, uniform
from .svd import SvdFactors, svd
from . import tensor as T
from .tensor import Tensor

__all__ = [
    "NpnetConfig",
    "NpnetParams",
    "TrainConfig",
    "ForwardTrace",
    "init_params",
    "condition",
    "singular_branch",
    "residual_branch",
    "forward",
    "golden",
    "train",
    "TrainingDiverged",
    "save_checkpoint",
    "load_checkpoint",
]

CKPT_MAGIC = b"NPCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class NpnetConfig:
    d_side: int = 8
    n_classes: int = 2
    svd_width: int = 16
    svd_heads: int = 4
    res_width: int = 16
    res_heads: int = 4
    res_blocks: int = 2
    patch: int = 2
    embed_dim: int = 16
    groups: int = 4
    train_embeddings: bool = False

    def __post_init__(self) -> None:
        if self.svd_width % self.svd_heads != 0:
            raise ValueError("svd_heads must divide svd_width")
        if self.res_width % self.res_heads != 0:
            raise ValueError("res_heads must divide res_width")
        if self.d_side % self.patch != 0:
            raise ValueError("patch must divide d_side")
        if self.d_side % self.groups != 0:
            raise ValueError("groups must divide d_side")
        if min(self.d_side, self.n_classes, self.embed_dim, self.res_blocks) < 1:
            raise ValueError("config dimensions must be positive")


@dataclass
class NpnetParams:
    """All weights, keyed by name in a fixed order, plus the config."""

    config: NpnetConfig
    arrays: dict[str, Tensor]

    def __post_init__(self) -> None:
        for name, t in self.arrays.items():
            if not np.all(np.isfinite(t.data)):
                raise ValueError(f"parameter {name} is non-finite")
        for scalar in ("alpha", "beta"):
            if self.arrays[scalar].data.shape != ():
                raise ValueError(f"{scalar} must be a scalar")

    def trainable(self) -> list[tuple[str, Tensor]]:
        frozen = () if self.config.train_embeddings else ("embed_table",)
        return [(n, t) for n, t in self.arrays.items() if n not in frozen]

    @property
    def alpha(self) -> Tensor:
        return self.arrays["alpha"]

    @property
    def beta(self) -> Tensor:
        return self.arrays["beta"]

    def copy(self) -> "NpnetParams":
        return NpnetParams(
            config=self.config,
            arrays={n: Tensor(t.data.copy()) for n, t in self.arrays.items()},
        )


@dataclass(frozen=True)
class ForwardTrace:
    """Branch outputs of one forward pass, as plain arrays."""

    x_tilde: np.ndarray
    x_hat: np.ndarray
    e: np.ndarray
    prediction: np.ndarray


def _linear_init(stream: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    return gaussian(stream, (fan_in, fan_out)) / np.sqrt(fan_in)


def init_params(config: NpnetConfig, seed: int = 0) -> NpnetParams:
    """Deterministic initialization; heads and scalars start at zero."""
    stream = derive_stream(seed, "npnet-init")
    d = config.d_side
    w = config.svd_width
    r = config.res_width
    p2 = config.patch * config.patch
    arrays: dict[str, Tensor] = {}

    def param(name: str, value: np.ndarray) -> None:
        arrays[name] = Tensor(value, name=name)

    for branch, fan_in in (("u", d), ("s", 1), ("v", d)):
        param(f"svd_{branch}_w1", _linear_init(stream, fan_in, w))
        param(f"svd_{branch}_b1", np.zeros(w))
        param(f"svd_{branch}_w2", _linear_init(stream, w, w))
        param(f"svd_{branch}_b2", np.zeros(w))
    for mat in ("q", "k", "v", "o"):
        param(f"svd_attn_w{mat}", _linear_init(stream, w, w))
        param(f"svd_attn_b{mat}", np.zeros(w))
    param("svd_head_w", np.zeros((w, 1)))
    param("svd_head_b", np.zeros(1))

    param("res_embed_w", _linear_init(stream, p2, r))
    param("res_embed_b", np.zeros(r))
    for b in range(config.res_blocks):
        param(f"res{b}_ln1_g", np.ones(r))
        param(f"res{b}_ln1_b", np.zeros(r))
        for mat in ("q", "k", "v", "o"):
            param(f"res{b}_attn_w{mat}", _linear_init(stream, r, r))
            param(f"res{b}_attn_b{mat}", np.zeros(r))
        param(f"res{b}_ln2_g", np.ones(r))
        param(f"res{b}_ln2_b", np.zeros(r))
        param(f"res{b}_mlp_w1", _linear_init(stream, r, 2 * r))
        param(f"res{b}_mlp_b1", np.zeros(2 * r))
        param(f"res{b}_mlp_w2", _linear_init(stream, 2 * r, r))
        param(f"res{b}_mlp_b2", np.zeros(r))
    param("res_out_w", np.zeros((r, p2)))
    param("res_out_b", np.zeros(p2))

    param("embed_table", gaussian(stream, (config.n_classes, config.embed_dim)))
    # conditioning generators start nonzero so distinct classes give
    # distinct e even before training (alpha = 0 keeps them out of the
    # prediction at init)
    param("ada_scale_w", 0.5 * _linear_init(stream, config.embed_dim, config.groups))
    param("ada_scale_b", np.zeros(config.groups))
    param("ada_shift_w", 0.5 * _linear_init(stream, config.embed_dim, config.groups))
    param("ada_shift_b", np.zeros(config.groups))

    param("alpha", np.zeros(()))
    # beta starts nonzero: with the residual head at zero AND beta at
    # zero, each would zero the other's gradient forever (the branch
    # output is exactly 0 and every branch weight gradient carries a
    # factor beta).  x_hat = 0 at init keeps identity exact regardless.
    param("beta", np.full((), 0.5))
    return NpnetParams(config=config, arrays=arrays)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def _attention(h: Tensor, params: NpnetParams, prefix: str, heads: int) -> Tensor:
    """Multi-head self-attention over (batch, tokens, width)."""
    a = params.arrays
    batch, n_tok, width = h.shape
    dh = width // heads

    def split(x: Tensor) -> Tensor:
        x = T.reshape(x, (batch, n_tok, heads, dh))
        return T.transpose(x, (0, 2, 1, 3))

    q = split(_linear(h, a[f"{prefix}_wq"], a[f"{prefix}_bq"]))
    k = split(_linear(h, a[f"{prefix}_wk"], a[f"{prefix}_bk"]))
    v = split(_linear(h, a[f"{prefix}_wv"], a[f"{prefix}_bv"]))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), T.constant(1.0 / np.sqrt(dh)))
    mixed = T.matmul(T.softmax(scores), v)
    mixed = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (batch, n_tok, width))
    return _linear(mixed, a[f"{prefix}_wo"], a[f"{prefix}_bo"])


def _class_embeddings(class_ids: Sequence[int], params: NpnetParams) -> Tensor:
    n_classes = params.config.n_classes
    ids = np.asarray(class_ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("class_ids must be a 1-d sequence")
    if np.any(ids < 0) or np.any(ids >= n_classes):
        raise ValueError("class index outside the embedding table")
    onehot = np.zeros((ids.size, n_classes))
    onehot[np.arange(ids.size), ids] = 1.0
    return T.matmul(T.constant(onehot), params.arrays["embed_table"])


def condition(x_batch: np.ndarray, class_ids: Sequence[int], params: NpnetParams) -> Tensor:
    """Group-normalize the state and modulate it from the class embedding.

    Groups are blocks of consecutive rows.  Each group is normalized to
    zero mean / unit variance, then scaled by (1 + s_g) and shifted by
    t_g, with s, t generated linearly from the class embedding.
    """
    cfg = params.config
    d, g = cfg.d_side, cfg.groups
    x = np.asarray(x_batch, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (d, d):
        raise ValueError(f"expected (batch, {d}, {d}) states, got {x.shape}")
    batch = x.shape[0]
    grouped = T.reshape(T.constant(x), (batch, g, (d // g) * d))
    normed = T.normalize_last(grouped, eps=1e-12)
    emb = _class_embeddings(class_ids, params)
    a = params.arrays
    scale = _linear(emb, a["ada_scale_w"], a["ada_scale_b"])
    shift = _linear(emb, a["ada_shift_w"], a["ada_shift_b"])
    one_plus = T.add(scale, T.constant(1.0))
    e = T.add(
        T.mul(normed, T.reshape(one_plus, (batch, g, 1))),
        T.reshape(shift, (batch, g, 1)),
    )
    return T.reshape(e, (batch, d, d))


def _factor_constants(
    factors: Sequence[SvdFactors],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    u = np.stack([f.u for f in factors])
    s = np.stack([f.s for f in factors])
    v = np.stack([f.v for f in factors])
    return u, s, v


def singular_branch(
    x_batch: np.ndarray,
    params: NpnetParams,
    factors: Sequence[SvdFactors] | None = None,
) -> Tensor:
    """Rebuild each state from its singular factors with edited values.

    Tokens are the d factor columns: token i sums the projections of
    U[:, i], Sigma_i and V[:, i] into a common width, runs through
    self-attention and a zero-initialized head, and the resulting raw
    adjustment edits Sigma through the softplus delta described in the
    module docstring.
    """
    x = np.asarray(x_batch, dtype=np.float64)
    d = params.config.d_side
    if x.ndim != 3 or x.shape[1:] != (d, d):
        raise ValueError(f"expected (batch, {d}, {d}) states, got {x.shape}")
    batch = x.shape[0]
    if factors is None:
        factors = [svd(x[i]) for i in range(batch)]
    u_np, s_np, v_np = _factor_constants(factors)

    a = params.arrays
    # tokens: (batch, d, fan_in) with token i holding the i-th column
    u_tok = T.constant(np.swapaxes(u_np, 1, 2))
    s_tok = T.constant(s_np[:, :, None])
    v_tok = T.constant(np.swapaxes(v_np, 1, 2))

    def project(tok: Tensor, branch: str) -> Tensor:
        h = T.relu(_linear(tok, a[f"svd_{branch}_w1"], a[f"svd_{branch}_b1"]))
        return _linear(h, a[f"svd_{branch}_w2"], a[f"svd_{branch}_b2"])

    h = T.add(T.add(project(u_tok, "u"), project(s_tok, "s")), project(v_tok, "v"))
    h = T.add(h, _attention(h, params, "svd_attn", params.config.svd_heads))
    raw = T.reshape(_linear(h, a["svd_head_w"], a["svd_head_b"]), (batch, d))

    # delta = softplus(raw + c) - softplus(c), c = softplus^-1(Sigma):
    # exactly zero at raw = 0, softplus-positive implied Sigma otherwise
    c_np = T.softplus_inverse(s_np)
    sp_c = np.logaddexp(0.0, c_np)
    delta = T.sub(T.softplus(T.add(raw, T.constant(c_np))), T.constant(sp_c))

    edit = T.matmul(
        T.mul(T.constant(u_np), T.reshape(delta, (batch, 1, d))),
        T.constant(np.swapaxes(v_np, 1, 2)),
    )
    return T.add(T.constant(x), edit)


def _patchify(x: Tensor, d: int, patch: int) -> Tensor:
    side = d // patch
    batch = x.shape[0]
    x = T.reshape(x, (batch, side, patch, side, patch))
    x = T.transpose(x, (0, 1, 3, 2, 4))
    return T.reshape(x, (batch, side * side, patch * patch))


def _unpatchify(x: Tensor, d: int, patch: int) -> Tensor:
    side = d // patch
    batch = x.shape[0]
    x = T.reshape(x, (batch, side, side, patch, patch))
    x = T.transpose(x, (0, 1, 3, 2, 4))
    return T.reshape(x, (batch, d, d))


def _layer_norm(h: Tensor, params: NpnetParams, name: str) -> Tensor:
    a = params.arrays
    return T.add(T.mul(T.normalize_last(h), a[f"{name}_g"]), a[f"{name}_b"])


def residual_branch(x_batch: np.ndarray, e: Tensor, params: NpnetParams) -> Tensor:
    """Patch-embed x + e, run the small attention stack, project back.

    The output head is zero-initialized, so the branch contributes
    exactly zero until trained.
    """
    cfg = params.config
    d, patch = cfg.d_side, cfg.patch
    x = np.asarray(x_batch, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (d, d):
        raise ValueError(f"expected (batch, {d}, {d}) states, got {x.shape}")
    if tuple(e.shape) != x.shape:
        raise ValueError("conditioning term must match the state shape")
    a = params.arrays
    inp = _patchify(T.add(T.constant(x), e), d, patch)
    h = _linear(inp, a["res_embed_w"], a["res_embed_b"])
    for b in range(cfg.res_blocks):
        h = T.add(h, _attention(_layer_norm(h, params, f"res{b}_ln1"), params, f"res{b}_attn", cfg.res_heads))
        m = _layer_norm(h, params, f"res{b}_ln2")
        m = _linear(T.gelu(_linear(m, a[f"res{b}_mlp_w1"], a[f"res{b}_mlp_b1"])), a[f"res{b}_mlp_w2"], a[f"res{b}_mlp_b2"])
        h = T.add(h, m)
    out = _linear(h, a["res_out_w"], a["res_out_b"])
    return _unpatchify(out, d, patch)


def forward(
    x_batch: np.ndarray,
    class_ids: Sequence[int],
    params: NpnetParams,
    factors: Sequence[SvdFactors] | None = None,
) -> tuple[Tensor, ForwardTrace]:
    """Full forward pass; returns the prediction tensor and its trace."""
    e = condition(x_batch, class_ids, params)
    x_tilde = singular_branch(x_batch, params, factors=factors)
    x_hat = residual_branch(x_batch, e, params)
    pred = T.add(
        T.add(x_tilde, T.mul(params.alpha, e)), T.mul(params.beta, x_hat)
    )
    trace = ForwardTrace(
        x_tilde=x_tilde.data,
        x_hat=x_hat.data,
        e=e.data,
        prediction=pred.data,
    )
    return pred, trace


def golden(x_head: np.ndarray, c: int, params: NpnetParams) -> np.ndarray:
    """Transform one head noise into its predicted golden noise."""
    if c is None:
        raise ValueError("golden needs a concrete class")
    x = np.asarray(x_head, dtype=np.float64)
    pred, _ = forward(x[None, :, :], [int(c)], params)
    return pred.data[0].copy()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    one_prompt_per_batch: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs, batch_size must be >= 1 and lr > 0")


class TrainingDiverged(NumericError):
    """Loss went non-finite; carries the last finite parameter state."""

    def __init__(self, message: str, last_params: NpnetParams):
        super().__init__(message)
        self.last_params = last_params


def train(
    records: Sequence[NoisePairRecord],
    params: NpnetParams,
    hyper: TrainConfig,
) -> tuple[NpnetParams, list[float]]:
    """Minimize mean squared error of predicted vs stored target noise.

    Deterministic given (records, params, hyper): shuffling and the
    one-prompt-per-batch draws come from streams derived from the
    training seed.  Returns the trained parameters (the same object,
    updated in place) and the per-epoch loss curve.  A non-finite loss
    aborts with :class:`TrainingDiverged` carrying the last finite
    parameter snapshot.
    """
    if not records:
        raise ValueError("training needs a nonempty dataset")
    if hyper.batch_size > len(records):
        raise ValueError("batch_size exceeds dataset size")
    cfg = params.config
    for rec in records:
        if rec.class_id >= cfg.n_classes:
            raise ValueError("record class outside the configured class count")

    x_all = np.stack([r.x_head for r in records])
    y_all = np.stack([r.x_head_prime for r in records])
    cls_all = np.array([r.class_id for r in records], dtype=np.int64)
    factors_all = [svd(r.x_head) for r in records]

    shuffle_gen = np.random.Generator(
        np.random.Philox(key=np.array([derive_stream(hyper.seed, "train-shuffle").seed, 0], dtype=np.uint64))
    )
    prompt_stream = derive_stream(hyper.seed, "train-prompt")

    trainable = params.trainable()
    moments1 = {n: np.zeros_like(t.data) for n, t in trainable}
    moments2 = {n: np.zeros_like(t.data) for n, t in trainable}
    b1, b2, eps_adam = 0.9, 0.999, 1e-8
    step = 0
    n = len(records)
    curve: list[float] = []
    last_good = params.copy()

    for _ in range(hyper.epochs):
        order = shuffle_gen.permutation(n)
        epoch_losses: list[float] = []
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            cls = cls_all[idx]
            if hyper.one_prompt_per_batch:
                shared = int(uniform(prompt_stream) * cfg.n_classes) % cfg.n_classes
                cls = np.full(idx.size, shared, dtype=np.int64)
            for _, t in trainable:
                t.zero_grad()
            pred, _ = forward(
                x_all[idx], cls, params, factors=[factors_all[i] for i in idx]
            )
            loss = T.mse(pred, T.constant(y_all[idx]))
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(
                    f"loss went non-finite at step {step}", last_good
                )
            loss.backward()
            step += 1
            for name, t in trainable:
                g = t.grad if t.grad is not None else np.zeros_like(t.data)
                moments1[name] = b1 * moments1[name] + (1 - b1) * g
                moments2[name] = b2 * moments2[name] + (1 - b2) * g * g
                mhat = moments1[name] / (1 - b1**step)
                vhat = moments2[name] / (1 - b2**step)
                t.data -= hyper.lr * mhat / (np.sqrt(vhat) + eps_adam)
            epoch_losses.append(loss_val)
        curve.append(float(np.mean(epoch_losses)))
        last_good = params.copy()
    return params, curve


def save_checkpoint(
    params: NpnetParams, path: str | Path, extra: dict | None = None
) -> None:
    """Structured-text manifest plus a raw fp64 blob with per-array offsets."""
    manifest: dict = {
        "format": "npnet-checkpoint",
        "version": CKPT_VERSION,
        "config": asdict(params.config),
        "arrays": {},
        "extra": extra or {},
    }
    blobs: list[bytes] = []
    offset = 0
    for name, t in params.arrays.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        manifest["arrays"][name] = {"offset": offset, "shape": list(t.data.shape)}
        blobs.append(raw)
        offset += len(raw)
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(b"".join(blobs))


def load_checkpoint(path: str | Path) -> tuple[NpnetParams, dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError("not a network checkpoint (bad magic)")
    (text_len,) = struct.unpack_from("<I", blob, 4)
    manifest = json.loads(blob[8 : 8 + text_len].decode("utf-8"))
    if manifest.get("version") != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    config = NpnetConfig(**manifest["config"])
    base = 8 + text_len
    arrays: dict[str, Tensor] = {}
    reference = init_params(config)  # fixes the canonical array order
    for name, t in reference.arrays.items():
        info = manifest["arrays"][name]
        shape = tuple(info["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + info["offset"]
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        arrays[name] = Tensor(data.reshape(shape).copy(), name=name)
    return NpnetParams(config=config, arrays=arrays), manifest["extra"]
