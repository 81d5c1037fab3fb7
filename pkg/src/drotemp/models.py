"""Desk-scale models that consume the robust losses.

Two model families live here: a character-level causal language model (token
embeddings, one or two single-head attention blocks, untied output
projection) and a two-tower encoder pair for contrastive retrieval over
synthetic clustered feature pairs. Both are built on the tape engine so the
robust losses and their baselines are differentiable end to end.

Loss conventions:
  - Language model: per position, the positive logit is the realized next
    token and the contrast set is the full vocabulary (positive included),
    matching the softmax form of the robust loss. Batch losses are means over
    all target positions.
  - Contrastive: per pair and per direction, the positive is the matched
    cross-modal similarity and the contrast set is the other n - 1 in-batch
    items, so the global loss is exact at this scale rather than estimated.
  - Temperatures come from a temperature network applied to detached model
    outputs: the model's own gradients see tau as a per-instance constant.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np

from . import diff_engine as de
from . import tempnet as tn
from .diff_engine import Tensor
from .dro_core import DroConfig
from .errors import DegenerateBatchError, DomainError

_NEG_MASK = -1e9  # additive score mask; exp underflows to exactly zero


# ---------------------------------------------------------------------------
# language model


@dataclass(frozen=True)
class LmConfig:
    """Shape of the toy causal LM."""

    vocab_size: int
    d_model: int = 32
    d_ff: int = 64
    n_blocks: int = 1
    context_len: int = 32

    def __post_init__(self):
        if self.vocab_size < 2:
            raise DomainError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if not (1 <= self.d_model <= 128):
            raise DomainError(f"d_model must be in [1, 128], got {self.d_model}")
        if not (1 <= self.d_ff <= 512):
            raise DomainError(f"d_ff must be in [1, 512], got {self.d_ff}")
        if self.n_blocks not in (1, 2):
            raise DomainError(f"n_blocks must be 1 or 2, got {self.n_blocks}")
        if not (2 <= self.context_len <= 64):
            raise DomainError(f"context_len must be in [2, 64], got {self.context_len}")


@dataclass
class BlockParams:
    """One single-head attention + feedforward block."""

    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    Wf1: Tensor
    bf1: Tensor
    Wf2: Tensor
    bf2: Tensor


@dataclass
class LmParams:
    cfg: LmConfig
    emb: Tensor
    pos: Tensor
    blocks: Tuple[BlockParams, ...]
    out_proj: Tensor

    def __post_init__(self):
        c = self.cfg
        if self.emb.shape != (c.vocab_size, c.d_model):
            raise DomainError(f"emb must be {c.vocab_size} x {c.d_model}, got {self.emb.shape}")
        if self.pos.shape != (c.context_len, c.d_model):
            raise DomainError(f"pos must be {c.context_len} x {c.d_model}, got {self.pos.shape}")
        if len(self.blocks) != c.n_blocks:
            raise DomainError(f"expected {c.n_blocks} blocks, got {len(self.blocks)}")
        if self.out_proj.shape != (c.vocab_size, c.d_model):
            raise DomainError(f"out_proj must be {c.vocab_size} x {c.d_model}")

    def tensors(self) -> Tuple[Tuple[str, Tensor], ...]:
        out = [("emb", self.emb), ("pos", self.pos)]
        for i, blk in enumerate(self.blocks):
            for name in ("Wq", "Wk", "Wv", "Wo", "Wf1", "bf1", "Wf2", "bf2"):
                out.append((f"blocks.{i}.{name}", getattr(blk, name)))
        out.append(("out_proj", self.out_proj))
        return tuple(out)


@dataclass(frozen=True)
class TokenBatch:
    """Token id sequences; targets are the next token at every position."""

    sequences: Tuple[np.ndarray, ...]

    def __init__(self, sequences):
        seqs = []
        for seq in sequences:
            arr = np.asarray(seq)
            if arr.ndim != 1 or arr.size < 2:
                raise DomainError("every sequence needs at least 2 tokens")
            if not np.issubdtype(arr.dtype, np.integer):
                raise DomainError("token ids must be integers")
            if arr.min() < 0:
                raise DomainError("token ids must be nonnegative")
            seqs.append(arr.astype(np.int64, copy=True))
        if not seqs:
            raise DomainError("batch must contain at least one sequence")
        for arr in seqs:
            arr.setflags(write=False)
        object.__setattr__(self, "sequences", tuple(seqs))

    @property
    def n_targets(self) -> int:
        return sum(len(s) - 1 for s in self.sequences)


def _param(name: str, data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)


def init_lm(cfg: LmConfig, seed: int) -> LmParams:
    """Uniform Kaiming weights, small normal embeddings, zero output projection.

    The zero output projection makes the step-0 model exactly uniform, which
    keeps early robust-loss temperatures well defined and equal across seeds.
    """
    rng = np.random.default_rng(seed)
    d, ff = cfg.d_model, cfg.d_ff

    def kaiming(shape, fan_in):
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    blocks = []
    for i in range(cfg.n_blocks):
        blocks.append(
            BlockParams(
                Wq=_param(f"blocks.{i}.Wq", kaiming((d, d), d)),
                Wk=_param(f"blocks.{i}.Wk", kaiming((d, d), d)),
                Wv=_param(f"blocks.{i}.Wv", kaiming((d, d), d)),
                Wo=_param(f"blocks.{i}.Wo", kaiming((d, d), d)),
                Wf1=_param(f"blocks.{i}.Wf1", kaiming((ff, d), d)),
                bf1=_param(f"blocks.{i}.bf1", np.zeros(ff)),
                Wf2=_param(f"blocks.{i}.Wf2", kaiming((d, ff), ff)),
                bf2=_param(f"blocks.{i}.bf2", np.zeros(d)),
            )
        )
    return LmParams(
        cfg=cfg,
        emb=_param("emb", rng.normal(size=(cfg.vocab_size, d)) * 0.05),
        pos=_param("pos", rng.normal(size=(cfg.context_len, d)) * 0.05),
        blocks=tuple(blocks),
        out_proj=_param("out_proj", np.zeros((cfg.vocab_size, d))),
    )


def _rmsnorm(x: Tensor, d: int) -> Tensor:
    return de.mul(de.l2_normalize(x, axis=-1), math.sqrt(d))


def _causal_mask(m: int) -> Tensor:
    return Tensor(np.triu(np.full((m, m), _NEG_MASK), k=1))


def _sequence_logits(params: LmParams, ids: np.ndarray) -> Tensor:
    """Logit rows for one sequence: row j predicts the token at j + 1."""
    cfg = params.cfg
    m = len(ids)
    x = de.add(de.embedding_lookup(params.emb, ids), de.slice_rows(params.pos, 0, m))
    mask = _causal_mask(m)
    for blk in params.blocks:
        xn = _rmsnorm(x, cfg.d_model)
        q = de.matmul(xn, de.transpose(blk.Wq))
        k = de.matmul(xn, de.transpose(blk.Wk))
        v = de.matmul(xn, de.transpose(blk.Wv))
        scores = de.add(de.mul(de.matmul(q, de.transpose(k)), 1.0 / math.sqrt(cfg.d_model)), mask)
        ctx = de.matmul(de.softmax(scores, axis=-1), v)
        x = de.add(x, de.matmul(ctx, de.transpose(blk.Wo)))
        h = de.relu(de.affine(_rmsnorm(x, cfg.d_model), blk.Wf1, blk.bf1))
        x = de.add(x, de.affine(h, blk.Wf2, blk.bf2))
    return de.matmul(_rmsnorm(x, cfg.d_model), de.transpose(params.out_proj))


def _check_batch(params: LmParams, batch: TokenBatch):
    cfg = params.cfg
    for seq in batch.sequences:
        if seq.max() >= cfg.vocab_size:
            raise DomainError(f"token id {int(seq.max())} out of range for vocab {cfg.vocab_size}")
        if len(seq) > cfg.context_len:
            raise DomainError(f"sequence length {len(seq)} exceeds context {cfg.context_len}")


def lm_logits(params: LmParams, batch: TokenBatch) -> List[np.ndarray]:
    """Per-sequence logit matrices (length m_i x K), causal by construction."""
    _check_batch(params, batch)
    return [_sequence_logits(params, seq).data for seq in batch.sequences]


def _lm_robust_terms(params, tnet, batch, cfg) -> Tuple[List[Tensor], List[np.ndarray]]:
    if tnet.cfg.variant is not tn.Variant.LLM_LOGITS:
        raise DomainError("LM loss needs a logit-variant temperature network")
    if tnet.cfg.d0 != params.cfg.vocab_size:
        raise DomainError(
            f"temperature net width {tnet.cfg.d0} != vocab size {params.cfg.vocab_size}"
        )
    _check_batch(params, batch)
    log_k = math.log(params.cfg.vocab_size)
    terms, tau_values = [], []
    for seq in batch.sequences:
        full = _sequence_logits(params, seq)
        logits = de.slice_rows(full, 0, len(seq) - 1)
        taus = tn.llm_tau_batch(tnet, de.stop_gradient(logits), zero_rows="keep")
        scaled = de.scale_rows(logits, de.reciprocal(taus))
        lse = de.logsumexp(scaled, axis=1)
        positive = de.gather_rows(logits, seq[1:])
        terms.append(de.sub(de.mul(taus, de.add(lse, cfg.rho - log_k)), positive))
        tau_values.append(taus.data.copy())
    return terms, tau_values


def lm_robust_loss_and_taus(
    params: LmParams, tnet: tn.TempNetParams, batch: TokenBatch, cfg: DroConfig
) -> Tuple[Tensor, np.ndarray]:
    """Robust loss plus the temperatures it used, for training metrics."""
    terms, tau_values = _lm_robust_terms(params, tnet, batch, cfg)
    return de.mean(de.concat(terms)), np.concatenate(tau_values)


def robust_softmax_loss(
    params: LmParams, tnet: tn.TempNetParams, batch: TokenBatch, cfg: DroConfig
) -> Tensor:
    """Mean over target positions of the robust loss at predicted temperatures.

    Per position: tau * (logsumexp(L / tau) - log K + rho) - L_target, with
    tau from the temperature network on the detached logit row. Returns a
    scalar node; call .item() for the value.
    """
    return lm_robust_loss_and_taus(params, tnet, batch, cfg)[0]


def lm_robust_loss_fixed_taus(
    params: LmParams, batch: TokenBatch, cfg: DroConfig, taus: List[np.ndarray]
) -> Tensor:
    """Robust LM loss at externally supplied per-position temperatures.

    The model's gradients here coincide with robust_softmax_loss at identical
    temperature values: the loss treats tau as a per-instance constant either
    way. Useful for probing with solved temperatures.
    """
    _check_batch(params, batch)
    if len(taus) != len(batch.sequences):
        raise DomainError(f"expected {len(batch.sequences)} tau vectors, got {len(taus)}")
    log_k = math.log(params.cfg.vocab_size)
    terms = []
    for seq, tau_row in zip(batch.sequences, taus):
        tau_row = np.asarray(tau_row, dtype=np.float64)
        if tau_row.shape != (len(seq) - 1,) or (tau_row <= 0.0).any():
            raise DomainError("each tau vector must hold one positive value per target")
        full = _sequence_logits(params, seq)
        logits = de.slice_rows(full, 0, len(seq) - 1)
        taus_t = Tensor(tau_row)
        scaled = de.scale_rows(logits, de.reciprocal(taus_t))
        lse = de.logsumexp(scaled, axis=1)
        positive = de.gather_rows(logits, seq[1:])
        terms.append(de.sub(de.mul(taus_t, de.add(lse, cfg.rho - log_k)), positive))
    return de.mean(de.concat(terms))


def baseline_ce_loss(params: LmParams, batch: TokenBatch) -> Tensor:
    """Mean per-token negative log-likelihood at temperature 1."""
    _check_batch(params, batch)
    terms = []
    for seq in batch.sequences:
        full = _sequence_logits(params, seq)
        logits = de.slice_rows(full, 0, len(seq) - 1)
        lse = de.logsumexp(logits, axis=1)
        terms.append(de.sub(lse, de.gather_rows(logits, seq[1:])))
    return de.mean(de.concat(terms))


def perplexity(
    params: LmParams,
    temperature_source: Union[float, tn.TempNetParams],
    corpus: Union[TokenBatch, Iterable[TokenBatch]],
) -> float:
    """exp of mean NLL under temperature-scaled probabilities.

    temperature_source is either a fixed positive tau applied everywhere or a
    logit-variant temperature network evaluated per position.
    """
    batches = [corpus] if isinstance(corpus, TokenBatch) else list(corpus)
    if not batches:
        raise DomainError("perplexity needs a nonempty corpus")
    fixed: Optional[float] = None
    if isinstance(temperature_source, tn.TempNetParams):
        if temperature_source.cfg.variant is not tn.Variant.LLM_LOGITS:
            raise DomainError("perplexity needs a logit-variant temperature network")
    else:
        fixed = float(temperature_source)
        if fixed <= 0.0 or not np.isfinite(fixed):
            raise DomainError(f"fixed temperature must be positive, got {fixed}")

    total, count = 0.0, 0
    for batch in batches:
        _check_batch(params, batch)
        for seq in batch.sequences:
            rows = _sequence_logits(params, seq).data[: len(seq) - 1]
            if fixed is None:
                taus = tn.llm_tau_batch(temperature_source, Tensor(rows), zero_rows="keep").data
            else:
                taus = np.full(rows.shape[0], fixed)
            scaled = rows / taus[:, None]
            shift = scaled.max(axis=1)
            lse = shift + np.log(np.exp(scaled - shift[:, None]).sum(axis=1))
            total += float((lse - scaled[np.arange(rows.shape[0]), seq[1:]]).sum())
            count += rows.shape[0]
    return float(np.exp(total / count))


# ---------------------------------------------------------------------------
# two-tower contrastive model


@dataclass(frozen=True)
class TwoTowerConfig:
    """Shape of the paired encoders; both emit unit-norm out_dim vectors."""

    img_dim: int
    txt_dim: int
    hidden: int = 32
    out_dim: int = 16

    def __post_init__(self):
        for name in ("img_dim", "txt_dim", "hidden", "out_dim"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{name} must be positive")


@dataclass
class TowerParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor


@dataclass
class TwoTowerParams:
    cfg: TwoTowerConfig
    image: TowerParams
    text: TowerParams

    def tensors(self) -> Tuple[Tuple[str, Tensor], ...]:
        out = []
        for side, tower in (("image", self.image), ("text", self.text)):
            for name in ("W1", "b1", "W2", "b2"):
                out.append((f"{side}.{name}", getattr(tower, name)))
        return tuple(out)


@dataclass(frozen=True)
class PairBatch:
    """n matched feature pairs; every non-matching item is a negative."""

    x: np.ndarray
    t: np.ndarray

    def __init__(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if x.ndim != 2 or t.ndim != 2 or x.shape[0] != t.shape[0]:
            raise DomainError(f"paired features must be n x d each, got {x.shape} and {t.shape}")
        if x.shape[0] < 2:
            raise DegenerateBatchError(
                f"contrastive batch needs n >= 2 pairs for nonempty negatives, got {x.shape[0]}"
            )
        if not (np.isfinite(x).all() and np.isfinite(t).all()):
            raise DomainError("pair features must be finite")
        x.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "t", t)

    @property
    def n(self) -> int:
        return self.x.shape[0]


def init_two_tower(cfg: TwoTowerConfig, seed: int) -> TwoTowerParams:
    rng = np.random.default_rng(seed)

    def tower(prefix: str, in_dim: int) -> TowerParams:
        def kaiming(shape, fan_in):
            bound = math.sqrt(6.0 / fan_in)
            return rng.uniform(-bound, bound, size=shape)

        return TowerParams(
            W1=_param(f"{prefix}.W1", kaiming((cfg.hidden, in_dim), in_dim)),
            b1=_param(f"{prefix}.b1", np.zeros(cfg.hidden)),
            W2=_param(f"{prefix}.W2", kaiming((cfg.out_dim, cfg.hidden), cfg.hidden)),
            # nonzero output bias: an input that silences every hidden unit
            # still lands away from the origin, where normalization is defined
            b2=_param(f"{prefix}.b2", np.full(cfg.out_dim, 0.01)),
        )

    return TwoTowerParams(cfg=cfg, image=tower("image", cfg.img_dim), text=tower("text", cfg.txt_dim))


def _encode(tower: TowerParams, feats: Tensor) -> Tensor:
    hidden = de.relu(de.affine(feats, tower.W1, tower.b1))
    return de.l2_normalize(de.affine(hidden, tower.W2, tower.b2), axis=-1)


def encode_image(params: TwoTowerParams, feats: Tensor) -> Tensor:
    """Unit-norm image embeddings for feature rows (n x img_dim)."""
    if feats.data.ndim != 2 or feats.shape[1] != params.cfg.img_dim:
        raise DomainError(f"expected n x {params.cfg.img_dim} image features, got {feats.shape}")
    return _encode(params.image, feats)


def encode_text(params: TwoTowerParams, feats: Tensor) -> Tensor:
    """Unit-norm text embeddings for feature rows (n x txt_dim)."""
    if feats.data.ndim != 2 or feats.shape[1] != params.cfg.txt_dim:
        raise DomainError(f"expected n x {params.cfg.txt_dim} text features, got {feats.shape}")
    return _encode(params.text, feats)


def _direction_terms(sims: Tensor, diag: Tensor, taus: Tensor, rho: float, n: int) -> Tensor:
    """Per-anchor robust terms for one retrieval direction.

    sims rows already carry the additive diagonal mask, so the anchor's own
    positive drops out of the contrast set exactly.
    """
    margins = de.add_colvec(sims, de.neg(diag))
    lse = de.logsumexp(de.scale_rows(margins, de.reciprocal(taus)), axis=1)
    return de.mul(taus, de.add(lse, rho - math.log(n - 1)))


def gcl_robust_loss_and_taus(
    towers: TwoTowerParams,
    tnet_img: tn.TempNetParams,
    tnet_txt: tn.TempNetParams,
    batch: PairBatch,
    cfg: DroConfig,
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Two-way robust contrastive loss plus per-side temperatures."""
    for net, side in ((tnet_img, "image"), (tnet_txt, "text")):
        if net.cfg.variant is not tn.Variant.CL_EMBEDDING:
            raise DomainError(f"{side} temperature net must be the embedding variant")
        if net.cfg.d0 != towers.cfg.out_dim:
            raise DomainError(
                f"{side} temperature net width {net.cfg.d0} != embedding width {towers.cfg.out_dim}"
            )
    n = batch.n
    e_img = encode_image(towers, Tensor(batch.x))
    e_txt = encode_text(towers, Tensor(batch.t))
    taus1 = tn.cl_tau_batch(tnet_img, de.stop_gradient(e_img))
    taus2 = tn.cl_tau_batch(tnet_txt, de.stop_gradient(e_txt))

    sims = de.matmul(e_img, de.transpose(e_txt))
    masked = de.add(sims, Tensor(np.diag(np.full(n, _NEG_MASK))))
    diag = de.gather_rows(sims, np.arange(n))
    img_terms = _direction_terms(masked, diag, taus1, cfg.rho, n)
    txt_terms = _direction_terms(de.transpose(masked), diag, taus2, cfg.rho, n)
    loss = de.mean(de.add(img_terms, txt_terms))
    return loss, taus1.data.copy(), taus2.data.copy()


def robust_gcl_loss(
    towers: TwoTowerParams,
    tnet_img: tn.TempNetParams,
    tnet_txt: tn.TempNetParams,
    batch: PairBatch,
    cfg: DroConfig,
) -> Tensor:
    """Mean over pairs of the two directional robust terms.

    Per anchor: tau * (logsumexp(margins / tau) - log(n - 1) + rho) with
    margins against the n - 1 in-batch negatives and tau predicted from the
    anchor's detached embedding (image and text sides use separate networks).
    """
    return gcl_robust_loss_and_taus(towers, tnet_img, tnet_txt, batch, cfg)[0]


def gcl_robust_loss_fixed_taus(
    towers: TwoTowerParams, batch: PairBatch, cfg: DroConfig, taus1, taus2
) -> Tensor:
    """Robust contrastive loss at externally supplied per-pair temperatures."""
    taus1 = np.asarray(taus1, dtype=np.float64)
    taus2 = np.asarray(taus2, dtype=np.float64)
    n = batch.n
    if taus1.shape != (n,) or taus2.shape != (n,):
        raise DomainError(f"need one temperature per pair per side, got {taus1.shape} {taus2.shape}")
    if (taus1 <= 0.0).any() or (taus2 <= 0.0).any():
        raise DomainError("temperatures must be positive")
    e_img = encode_image(towers, Tensor(batch.x))
    e_txt = encode_text(towers, Tensor(batch.t))
    sims = de.matmul(e_img, de.transpose(e_txt))
    masked = de.add(sims, Tensor(np.diag(np.full(n, _NEG_MASK))))
    diag = de.gather_rows(sims, np.arange(n))
    img_terms = _direction_terms(masked, diag, Tensor(taus1), cfg.rho, n)
    txt_terms = _direction_terms(de.transpose(masked), diag, Tensor(taus2), cfg.rho, n)
    return de.mean(de.add(img_terms, txt_terms))


def baseline_gcl_loss(
    towers: TwoTowerParams, tau1: float, tau2: float, batch: PairBatch
) -> Tensor:
    """Fixed-temperature two-way contrastive loss with negative-only denominators."""
    if tau1 <= 0.0 or tau2 <= 0.0:
        raise DomainError(f"temperatures must be positive, got {tau1} and {tau2}")
    n = batch.n
    e_img = encode_image(towers, Tensor(batch.x))
    e_txt = encode_text(towers, Tensor(batch.t))
    sims = de.matmul(e_img, de.transpose(e_txt))
    masked = de.add(sims, Tensor(np.diag(np.full(n, _NEG_MASK))))
    diag = de.gather_rows(sims, np.arange(n))

    def direction(rows: Tensor, tau: float) -> Tensor:
        lse = de.logsumexp(de.mul(rows, 1.0 / tau), axis=1)
        return de.sub(de.mul(lse, tau), diag)

    return de.mean(de.add(direction(masked, tau1), direction(de.transpose(masked), tau2)))


def recall_at_k(towers: TwoTowerParams, eval_pairs: PairBatch, k: int) -> Tuple[float, float]:
    """(image_retrieval, text_retrieval) recall@k over the evaluation pairs.

    image_retrieval ranks images for each text query; text_retrieval ranks
    texts for each image query. Ties break toward the lower index.
    """
    n = eval_pairs.n
    if not (1 <= k <= n):
        raise DomainError(f"k must be in [1, {n}], got {k}")
    sims = encode_image(towers, Tensor(eval_pairs.x)).data @ encode_text(
        towers, Tensor(eval_pairs.t)
    ).data.T

    def recall(score_rows: np.ndarray) -> float:
        hits = 0
        for i in range(n):
            order = np.argsort(-score_rows[i], kind="stable")
            hits += int(i in order[:k])
        return hits / n

    return recall(sims.T), recall(sims)


# ---------------------------------------------------------------------------
# data plumbing: character corpus and synthetic pairs


@dataclass(frozen=True)
class Vocab:
    """Sorted character vocabulary with a dense id per character."""

    chars: str

    @property
    def size(self) -> int:
        return len(self.chars)

    def encode(self, text: str) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.chars)}
        try:
            return np.array([index[c] for c in text], dtype=np.int64)
        except KeyError as exc:
            raise DomainError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.size):
            raise DomainError(f"id out of range for vocabulary of {self.size}")
        return "".join(self.chars[i] for i in ids)


def build_vocab(text: str) -> Vocab:
    if not text:
        raise DomainError("cannot build a vocabulary from empty text")
    return Vocab("".join(sorted(set(text))))


def load_corpus(path) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if not text:
        raise DomainError(f"corpus file {path} is empty")
    return text


def sample_windows(
    ids: np.ndarray, context_len: int, batch_size: int, rng: np.random.Generator
) -> TokenBatch:
    """batch_size random contiguous windows of exactly context_len tokens."""
    if len(ids) < context_len:
        raise DomainError(f"corpus of {len(ids)} tokens shorter than context {context_len}")
    starts = rng.integers(0, len(ids) - context_len + 1, size=batch_size)
    return TokenBatch([ids[s : s + context_len] for s in starts])


def eval_windows(ids: np.ndarray, context_len: int) -> TokenBatch:
    """Non-overlapping full-coverage windows (trailing runt kept if >= 2)."""
    seqs = [ids[s : s + context_len] for s in range(0, len(ids), context_len)]
    seqs = [s for s in seqs if len(s) >= 2]
    if not seqs:
        raise DomainError("eval split too short for even one window")
    return TokenBatch(seqs)


def split_ids(ids: np.ndarray, val_fraction: float) -> Tuple[np.ndarray, np.ndarray]:
    """Leading train slice and trailing validation slice."""
    if not (0.0 < val_fraction < 1.0):
        raise DomainError(f"val_fraction must be in (0, 1), got {val_fraction}")
    cut = int(round(len(ids) * (1.0 - val_fraction)))
    return ids[:cut], ids[cut:]


def gen_clustered_pairs(
    n_pairs: int, dim: int, n_clusters: int, noise: float, seed: int
) -> PairBatch:
    """Matched pairs drawn around shared cluster centers with per-side noise."""
    if n_pairs < 2 or n_clusters < 1 or dim < 1:
        raise DomainError("need n_pairs >= 2, n_clusters >= 1, dim >= 1")
    if noise < 0.0:
        raise DomainError(f"noise must be nonnegative, got {noise}")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_clusters, dim))
    assign = rng.integers(n_clusters, size=n_pairs)
    x = centers[assign] + noise * rng.normal(size=(n_pairs, dim))
    t = centers[assign] + noise * rng.normal(size=(n_pairs, dim))
    return PairBatch(x, t)


def save_pairs_csv(path, batch: PairBatch):
    """One row per pair: x0..x{d-1}, t0..t{d-1} with a labeling header."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [f"x{i}" for i in range(batch.x.shape[1])] + [f"t{i}" for i in range(batch.t.shape[1])]
        )
        for xi, ti in zip(batch.x, batch.t):
            writer.writerow([f"{v:.17g}" for v in xi] + [f"{v:.17g}" for v in ti])


def load_pairs_csv(path) -> PairBatch:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DomainError(f"pair file {path} is empty") from None
        d_x = len([h for h in header if h.startswith("x")])
        d_t = len([h for h in header if h.startswith("t")])
        if d_x < 1 or d_t < 1 or d_x + d_t != len(header):
            raise DomainError(f"pair file {path} has a malformed header: {header!r}")
        xs, ts = [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != d_x + d_t:
                raise DomainError(f"{path}:{line_no}: expected {d_x + d_t} fields, got {len(row)}")
            try:
                values = [float(v) for v in row]
            except ValueError:
                raise DomainError(f"{path}:{line_no}: non-numeric field") from None
            xs.append(values[:d_x])
            ts.append(values[d_x:])
    return PairBatch(np.array(xs), np.array(ts))
