"""Decoder-only Transformer prior over postfix templates.

Pre-norm blocks, learned positional embeddings, ReLU feed-forward layers and a
softmax head. Trained by minimizing mean per-token cross-entropy of
BOS/EOS-wrapped corpus sequences.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .expr import PostfixTemplate, Vocab
from .utils import atomic_write_bytes

log = logging.getLogger(__name__)

MAGIC = b"SYMPRIOR"
FORMAT_VERSION = 1


class PriorError(RuntimeError):
    pass


class SequenceTooLong(PriorError):
    pass


class VocabMismatch(PriorError):
    pass


class EmptyCorpus(PriorError):
    pass


class NonFiniteLoss(PriorError):
    pass


class VersionMismatch(PriorError):
    pass


class CorruptCheckpoint(PriorError):
    pass


@dataclass(frozen=True)
class PriorConfig:
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    max_seq_len: int = 66
    dropout: float = 0.0
    learning_rate: float = 3e-4
    warmup_steps: int = 100
    grad_clip: float = 1.0
    batch_size: int = 32
    epochs: int = 30
    init_scale: float = 0.02
    heldout_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if self.max_seq_len < 3:
            raise ValueError("max_seq_len must leave room for BOS, one token and EOS")


def _param_shapes(cfg: PriorConfig, V: int) -> dict[str, tuple[int, ...]]:
    D, F = cfg.d_model, cfg.ffn_dim
    shapes = {"tok_emb": (V, D), "pos_emb": (cfg.max_seq_len, D)}
    for i in range(cfg.num_layers):
        p = f"l{i}."
        shapes.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "wq": (D, D), p + "bq": (D,),
            p + "wk": (D, D), p + "bk": (D,),
            p + "wv": (D, D), p + "bv": (D,),
            p + "wo": (D, D), p + "bo": (D,),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "w1": (D, F), p + "b1": (F,),
            p + "w2": (F, D), p + "b2": (D,),
        })
    shapes.update({"lnf.g": (D,), "lnf.b": (D,), "head.w": (D, V), "head.b": (V,)})
    return shapes


@dataclass
class EpochLog:
    epoch: int
    train_ce: float
    heldout_ce: float


@dataclass
class PriorModel:
    config: PriorConfig
    vocab: Vocab
    params: dict[str, np.ndarray]
    history: list[EpochLog] = field(default_factory=list)
    init_heldout_ce: float = math.nan

    @classmethod
    def initialize(cls, config: PriorConfig, vocab: Vocab, rng: np.random.Generator | None = None) -> "PriorModel":
        rng = np.random.default_rng(config.seed) if rng is None else rng
        params = {}
        for name, shape in _param_shapes(config, len(vocab)).items():
            last = name.rsplit(".", 1)[-1]
            if last == "g":
                params[name] = np.ones(shape)
            elif len(shape) == 1:
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.normal(0.0, config.init_scale, size=shape)
        return cls(config, vocab, params)

    @property
    def fingerprint(self) -> str:
        return self.vocab.fingerprint()

    def check_vocab(self, vocab: Vocab | None) -> None:
        if vocab is not None and vocab.fingerprint() != self.fingerprint:
            raise VocabMismatch(f"model vocab {self.fingerprint} != {vocab.fingerprint()}")

    # ------------------------------------------------------------ network

    def _graph(self, ids: np.ndarray, tensors: dict[str, ad.Tensor], rng=None) -> ad.Tensor:
        cfg = self.config
        B, T = ids.shape
        if T > cfg.max_seq_len:
            raise SequenceTooLong(f"length {T} exceeds max_seq_len {cfg.max_seq_len}")
        P = tensors
        x = ad.embedding(P["tok_emb"], ids)
        pos = ad.embedding(P["pos_emb"], np.arange(T))
        x = ad.add(x, pos)
        for i in range(cfg.num_layers):
            p = f"l{i}."
            h = ad.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            q = ad.split_heads(ad.add(ad.matmul(h, P[p + "wq"]), P[p + "bq"]), cfg.num_heads)
            k = ad.split_heads(ad.add(ad.matmul(h, P[p + "wk"]), P[p + "bk"]), cfg.num_heads)
            v = ad.split_heads(ad.add(ad.matmul(h, P[p + "wv"]), P[p + "bv"]), cfg.num_heads)
            a = ad.merge_heads(ad.causal_attention(q, k, v))
            a = ad.add(ad.matmul(a, P[p + "wo"]), P[p + "bo"])
            x = ad.add(x, ad.dropout(a, cfg.dropout, rng))
            h = ad.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            h = ad.relu(ad.add(ad.matmul(h, P[p + "w1"]), P[p + "b1"]))
            h = ad.add(ad.matmul(h, P[p + "w2"]), P[p + "b2"])
            x = ad.add(x, ad.dropout(h, cfg.dropout, rng))
        x = ad.layer_norm(x, P["lnf.g"], P["lnf.b"])
        return ad.add(ad.matmul(x, P["head.w"]), P["head.b"])

    def logits(self, ids) -> np.ndarray:
        """Next-token logits at every position, shape (B, T, V)."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        tensors = {k: ad.Tensor(v) for k, v in self.params.items()}
        return self._graph(ids, tensors).data

    def next_logits(self, ids) -> np.ndarray:
        """Logits for the token following each row of ``ids``, shape (B, V)."""
        return self.logits(ids)[:, -1, :]

    def encode_prefix(self, prefix: Sequence) -> list[int]:
        if len(prefix) and isinstance(prefix[0], str):
            return self.vocab.encode(prefix)
        return [int(i) for i in prefix]


def forward(model: PriorModel, prefix: Sequence, vocab: Vocab | None = None) -> np.ndarray:
    """Distribution over the next token given a BOS-initial prefix."""
    model.check_vocab(vocab)
    ids = model.encode_prefix(prefix)
    if not ids or ids[0] != model.vocab.bos_id:
        raise ValueError("prefix must start with BOS")
    if len(ids) >= model.config.max_seq_len:
        raise SequenceTooLong(f"prefix length {len(ids)} must be < {model.config.max_seq_len}")
    z = model.next_logits(np.array([ids]))[0]
    return np.exp(ad.log_softmax(z))


def wrap(template: PostfixTemplate | Sequence[str], vocab: Vocab) -> list[int]:
    toks = template.tokens if isinstance(template, PostfixTemplate) else tuple(template)
    return [vocab.bos_id] + vocab.encode(toks) + [vocab.eos_id]


def log_prob(model: PriorModel, template, vocab: Vocab | None = None) -> float:
    """Sum of next-token log-probabilities over the BOS/EOS-wrapped sequence."""
    model.check_vocab(vocab)
    seq = wrap(template, model.vocab)
    if len(seq) > model.config.max_seq_len:
        raise SequenceTooLong(f"wrapped length {len(seq)} exceeds {model.config.max_seq_len}")
    lp = ad.log_softmax(model.logits(np.array([seq[:-1]]))[0])
    return float(lp[np.arange(len(seq) - 1), seq[1:]].sum())


# ---------------------------------------------------------------- training


def _batch(seqs: list[list[int]], pad: int):
    T = max(len(s) for s in seqs) - 1
    ids = np.full((len(seqs), T), pad, dtype=np.int64)
    tgt = np.full((len(seqs), T), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s) - 1
        ids[i, :n] = s[:-1]
        tgt[i, :n] = s[1:]
        mask[i, :n] = True
    return ids, tgt, mask


def is_heldout(tokens: Sequence[str], fraction: float = 0.1) -> bool:
    """Stable hash split on the token string."""
    h = hashlib.sha256(" ".join(tokens).encode()).digest()
    return int.from_bytes(h[:8], "little") / 2.0**64 < fraction


def loss_and_grads(model: PriorModel, seqs: list[list[int]], rng=None) -> tuple[float, dict[str, np.ndarray], int]:
    """Mean token cross-entropy of ``seqs`` and parameter gradients."""
    ids, tgt, mask = _batch(seqs, model.vocab.pad_id)
    tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in model.params.items()}
    logits = model._graph(ids, tensors, rng)
    loss = ad.cross_entropy(logits, tgt, mask)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    return float(loss.data), grads, int(mask.sum())


def mean_ce(model: PriorModel, seqs: list[list[int]], batch_size: int = 256) -> float:
    """Token-weighted mean cross-entropy (no gradients)."""
    if not seqs:
        return math.nan
    total, count = 0.0, 0
    for i in range(0, len(seqs), batch_size):
        ids, tgt, mask = _batch(seqs[i:i + batch_size], model.vocab.pad_id)
        lp = ad.log_softmax(model.logits(ids))
        picked = np.take_along_axis(lp, tgt[..., None], axis=-1)[..., 0]
        total -= float((picked * mask).sum())
        count += int(mask.sum())
    return total / count


class _Adam:
    def __init__(self, params, lr, warmup, b1=0.9, b2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.lr, self.warmup, self.b1, self.b2, self.eps = lr, warmup, b1, b2, eps
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        lr = self.lr * min(1.0, self.t / self.warmup) if self.warmup > 0 else self.lr
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def split_corpus(templates, vocab: Vocab, fraction: float):
    train, held = [], []
    for t in templates:
        toks = t.tokens if isinstance(t, PostfixTemplate) else tuple(t)
        (held if is_heldout(toks, fraction) else train).append(wrap(toks, vocab))
    if not train:
        train, held = held, []
    return train, held


def train(config: PriorConfig, corpus, vocab: Vocab, log_every: int = 0) -> PriorModel:
    """Fit the prior by mini-batch Adam with warmup and gradient clipping.

    ``corpus`` is a sequence of templates (or corpus entries carrying one).
    The returned model carries per-epoch train / held-out cross-entropy.
    """
    templates = [getattr(e, "template", e) for e in corpus]
    if not templates:
        raise EmptyCorpus("cannot train on an empty corpus")
    longest = max(len(t) for t in templates) + 2
    if longest > config.max_seq_len:
        raise SequenceTooLong(f"longest wrapped sequence {longest} exceeds max_seq_len {config.max_seq_len}")
    rng = np.random.default_rng(config.seed)
    model = PriorModel.initialize(config, vocab, rng)
    train_seqs, held_seqs = split_corpus(templates, vocab, config.heldout_fraction)
    model.init_heldout_ce = mean_ce(model, held_seqs)
    opt = _Adam(model.params, config.learning_rate, config.warmup_steps)
    drop_rng = rng if config.dropout > 0 else None
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_seqs))
        tot, cnt = 0.0, 0
        for b in range(0, len(order), config.batch_size):
            batch = [train_seqs[i] for i in order[b:b + config.batch_size]]
            loss, grads, ntok = loss_and_grads(model, batch, drop_rng)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}, batch {b // config.batch_size}: loss {loss}")
            clip_grads(grads, config.grad_clip)
            opt.step(model.params, grads)
            tot += loss * ntok
            cnt += ntok
        entry = EpochLog(epoch, tot / cnt, mean_ce(model, held_seqs))
        model.history.append(entry)
        if log_every and epoch % log_every == 0:
            log.info("epoch %d train_ce %.4f heldout_ce %.4f", epoch, entry.train_ce, entry.heldout_ce)
    return model


def history_csv(model: PriorModel) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_ce", "heldout_ce"])
    for e in model.history:
        w.writerow([e.epoch, repr(e.train_ce), repr(e.heldout_ce)])
    return buf.getvalue()


# ---------------------------------------------------------------- checkpoints


def to_bytes(model: PriorModel) -> bytes:
    blobs = []
    entries = []
    offset = 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw),
                        "sha256": hashlib.sha256(raw).hexdigest()})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": asdict(model.config),
        "max_vars": model.vocab.max_vars,
        "vocab_fingerprint": model.fingerprint,
        "history": [asdict(e) for e in model.history],
        "init_heldout_ce": model.init_heldout_ce,
        "params": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<HI", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def from_bytes(data: bytes, vocab: Vocab | None = None) -> PriorModel:
    if len(data) < len(MAGIC) + 6 + 32 or data[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint("bad magic or truncated header")
    version, hlen = struct.unpack_from("<HI", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint("checksum mismatch")
    start = len(MAGIC) + 6
    try:
        header = json.loads(body[start:start + hlen])
    except ValueError as e:
        raise CorruptCheckpoint(f"unreadable header: {e}") from None
    blob = body[start + hlen:]
    model_vocab = Vocab(header["max_vars"])
    if model_vocab.fingerprint() != header["vocab_fingerprint"]:
        raise CorruptCheckpoint("stored vocab fingerprint inconsistent with max_vars")
    if vocab is not None and vocab.fingerprint() != header["vocab_fingerprint"]:
        raise VocabMismatch(f"checkpoint vocab {header['vocab_fingerprint']} != {vocab.fingerprint()}")
    params = {}
    for e in header["params"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"] or hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise CorruptCheckpoint(f"blob {e['name']} damaged")
        params[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    cfg = header["config"]
    model = PriorModel(PriorConfig(**cfg), model_vocab, params,
                       [EpochLog(**h) for h in header["history"]], header["init_heldout_ce"])
    expected = _param_shapes(model.config, len(model_vocab))
    if set(expected) != set(params) or any(tuple(expected[k]) != params[k].shape for k in expected):
        raise CorruptCheckpoint("parameter set does not match config")
    return model


def save(model: PriorModel, path) -> None:
    atomic_write_bytes(path, to_bytes(model))


def load(path, vocab: Vocab | None = None) -> PriorModel:
    with open(path, "rb") as f:
        return from_bytes(f.read(), vocab)
