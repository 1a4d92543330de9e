"""Canvas encoder and the factorized action distribution over it.

One action has three parts — where to write (which blank), what to write
(which word), and what remains missing around it — and its probability
factorizes the same way:

    p(action | canvas) = p(blank | canvas)
                       * p(word | canvas, blank)
                       * p(shape | canvas, blank, word)

A transformer encoder maps the canvas (tokens and blank markers are all
vocabulary items) to one vector per item.  Blank choice is a softmax of a
learned query vector against the blank positions' vectors; word choice is a
linear projection of the chosen blank's vector over the predictable part of
the vocabulary; the shape factor is a small MLP on the blank vector
concatenated with the chosen word's embedding.  In word mode the shape is
one of four left/right continuation flags; in char mode it is the number of
still-missing characters left of the word, bounded by the blank's exact
length annotation.

Everything that scores full actions funnels through :meth:`BlankModel.score_actions`,
which batches, pads, and de-duplicates canvases; training and the exact /
Monte-Carlo evaluation oracles all share that path.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .canvas import Action, Blank, Canvas, Token, blank_locations
from .corpus import CorpusError, Vocabulary, atomic_write_bytes

CHECKPOINT_MAGIC = b"BFILLCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is missing, corrupt, or from a different format."""


@dataclass
class ModelConfig:
    mode: str = "word"  # "word" | "char"
    d_model: int = 256
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    mlp_hidden: int | None = None  # defaults to 2 * d_model
    dropout: float = 0.1
    t_max: int = 16
    tie_word_proj: bool = False

    def __post_init__(self) -> None:
        if self.mode not in ("word", "char"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.d_model <= 0 or self.d_model % self.n_heads or self.d_model % 2:
            raise ValueError("d_model must be positive, even and divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max}")
        if self.mlp_hidden is None:
            self.mlp_hidden = 2 * self.d_model


def flags_class(a: Action) -> int:
    """Class index of the left/right continuation flags: 2*left + right."""
    return 2 * int(a.left) + int(a.right)


def _sinusoid(length: int, d: int, dtype: torch.dtype, device) -> torch.Tensor:
    pos = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
    idx = torch.arange(0, d, 2, dtype=dtype, device=device)
    angles = pos / torch.pow(torch.tensor(10000.0, dtype=dtype, device=device), idx / d)
    pe = torch.zeros(length, d, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(angles)
    pe[:, 1::2] = torch.cos(angles)
    return pe


class _EncoderLayer(nn.Module):
    """Post-norm transformer layer with hand-rolled multi-head attention."""

    def __init__(self, d: int, n_heads: int, d_ff: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.o_proj = nn.Linear(d, d)
        self.ff1 = nn.Linear(d, d_ff)
        self.ff2 = nn.Linear(d_ff, d)
        self.ln1 = nn.LayerNorm(d)
        self.ln2 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        B, M, d = x.shape
        H, dh = self.n_heads, self.d_head

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.view(B, M, H, dh).transpose(1, 2)  # (B,H,M,dh)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(dh)  # (B,H,M,M)
        scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(B, M, d)
        x = self.ln1(x + self.dropout(self.o_proj(out)))
        x = self.ln2(x + self.dropout(self.ff2(torch.relu(self.ff1(x)))))
        return x


class BlankModel(nn.Module):
    """Encoder plus the blank / word / shape heads, bound to a vocabulary."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        super().__init__()
        if config.mode != vocab.mode:
            raise ValueError(
                f"model mode {config.mode!r} != vocabulary mode {vocab.mode!r}"
            )
        if config.mode == "char" and config.t_max != vocab.t_max:
            raise ValueError("model and vocabulary disagree on t_max")
        self.config = config
        self.vocab = vocab
        d = config.d_model

        self.emb = nn.Embedding(vocab.size, d, padding_idx=vocab.pad_id)
        nn.init.normal_(self.emb.weight, mean=0.0, std=d**-0.5)
        with torch.no_grad():
            self.emb.weight[vocab.pad_id].zero_()
        self.layers = nn.ModuleList(
            _EncoderLayer(d, config.n_heads, config.d_ff, config.dropout)
            for _ in range(config.n_layers)
        )
        self.input_dropout = nn.Dropout(config.dropout)
        self.blank_query = nn.Parameter(torch.empty(d))
        nn.init.normal_(self.blank_query, mean=0.0, std=d**-0.5)
        self.word_proj = nn.Linear(d, vocab.size, bias=False)
        if config.tie_word_proj:
            self.word_proj.weight = self.emb.weight
        h = config.mlp_hidden
        if config.mode == "word":
            self.flag_mlp = nn.Sequential(nn.Linear(2 * d, h), nn.ReLU(), nn.Linear(h, 4))
        else:
            self.length_mlp = nn.Sequential(
                nn.Linear(2 * d, h), nn.ReLU(), nn.Linear(h, config.t_max)
            )

        # Ids the word head must never produce: padding, the blank marker,
        # and the exact-length markers.  The unknown token stays predictable.
        self._masked_word_ids = [vocab.pad_id, vocab.blank_id] + (
            list(range(3, 3 + vocab.t_max)) if vocab.mode == "char" else []
        )
        self.encode_calls = 0  # forward-pass counter, used by efficiency tests

    # -- canvas -> tensors ------------------------------------------------

    def item_ids(self, c: Canvas) -> list[int]:
        """Vocabulary ids of the canvas items, blanks included."""
        out = []
        for it in c.items:
            if isinstance(it, Token):
                if not 0 <= it.id < self.vocab.size:
                    raise CorpusError(f"token id {it.id} outside vocabulary")
                out.append(it.id)
            elif it.length is None:
                if self.config.mode != "word":
                    raise CorpusError("unbounded blank in a char-mode model")
                out.append(self.vocab.blank_id)
            else:
                if self.config.mode != "char":
                    raise CorpusError("length-annotated blank in a word-mode model")
                out.append(self.vocab.length_id(it.length))
        return out

    def encode_canvases(
        self, canvases: Sequence[Canvas]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """One padded forward pass; returns (B, M, d) vectors and the pad mask."""
        if not canvases:
            raise ValueError("empty canvas batch")
        ids = [self.item_ids(c) for c in canvases]
        M = max(len(r) for r in ids)
        if M == 0:
            raise ValueError("cannot encode an empty canvas")
        pad = self.vocab.pad_id
        batch = torch.tensor(
            [r + [pad] * (M - len(r)) for r in ids], dtype=torch.long
        )
        pad_mask = batch == pad
        # A real <pad> item would alias padding; the vocabulary never emits it.
        dtype = self.emb.weight.dtype
        x = self.emb(batch) * math.sqrt(self.config.d_model)
        x = x + _sinusoid(M, self.config.d_model, dtype, batch.device)
        x = self.input_dropout(x)
        for layer in self.layers:
            x = layer(x, pad_mask)
        self.encode_calls += 1
        return x, pad_mask

    # -- heads -------------------------------------------------------------

    def blank_logprobs(self, z: torch.Tensor, positions: Sequence[int]) -> torch.Tensor:
        """Log-distribution over the canvas's blanks.  ``z`` is (M, d)."""
        if not positions:
            raise ValueError("canvas has no blanks")
        logits = z[list(positions)] @ self.blank_query
        return torch.log_softmax(logits, dim=-1)

    def word_logprobs(self, zb: torch.Tensor) -> torch.Tensor:
        """Log-distribution over predictable words.  ``zb`` is (N, d) -> (N, V)."""
        logits = self.word_proj(zb)
        logits[..., self._masked_word_ids] = float("-inf")
        return torch.log_softmax(logits, dim=-1)

    def flag_logprobs(self, zb: torch.Tensor, word_ids: torch.Tensor) -> torch.Tensor:
        """Log-distribution over the 4 left/right flag classes: (N, 4)."""
        v = self.emb(word_ids)
        logits = self.flag_mlp(torch.cat([zb, v], dim=-1))
        return torch.log_softmax(logits, dim=-1)

    def length_logprobs(
        self, zb: torch.Tensor, word_ids: torch.Tensor, blank_lengths: torch.Tensor
    ) -> torch.Tensor:
        """Log-distribution over left lengths, masked to ``[0, t-1]`` per row.

        Row ``i`` gives probabilities for left_len = 0 .. t_max-1 with
        entries at or beyond ``blank_lengths[i]`` impossible (-inf), and the
        rest renormalized.
        """
        v = self.emb(word_ids)
        logits = self.length_mlp(torch.cat([zb, v], dim=-1))
        cols = torch.arange(self.config.t_max, device=logits.device)
        logits = logits.masked_fill(cols[None, :] >= blank_lengths[:, None], float("-inf"))
        return torch.log_softmax(logits, dim=-1)

    # -- full-action scoring ------------------------------------------------

    def score_actions(
        self, pairs: Sequence[tuple[Canvas, Action]], canvas_chunk: int = 128
    ) -> torch.Tensor:
        """Log-probability of each (canvas, action) pair, shape (N,).

        Batches canvases with padding, de-duplicates repeated canvases, and
        runs exactly one encoder forward per chunk.  Differentiable; wrap in
        ``torch.no_grad()`` for evaluation.
        """
        uniq: dict[tuple, int] = {}
        canvases: list[Canvas] = []
        rows: list[tuple[int, Action]] = []
        for c, a in pairs:
            key = tuple(
                (it.id, None) if isinstance(it, Token) else ("B", it.length)
                for it in c.items
            )
            u = uniq.setdefault(key, len(canvases))
            if u == len(canvases):
                canvases.append(c)
            rows.append((u, a))

        out = torch.empty(len(rows), dtype=self.emb.weight.dtype)
        for lo in range(0, len(canvases), canvas_chunk):
            chunk = canvases[lo : lo + canvas_chunk]
            z, _ = self.encode_canvases(chunk)
            positions = [[p - 1 for p in blank_locations(c)] for c in chunk]
            max_k = max(len(p) for p in positions)
            blank_logits = torch.full(
                (len(chunk), max_k), float("-inf"), dtype=z.dtype
            )
            for i, pos in enumerate(positions):
                if not pos:
                    raise ValueError("action scored against a complete canvas")
                blank_logits[i, : len(pos)] = z[i, pos] @ self.blank_query
            blank_lp = torch.log_softmax(blank_logits, dim=-1)

            idx = [
                (j, u - lo, a) for j, (u, a) in enumerate(rows) if lo <= u < lo + canvas_chunk
            ]
            if not idx:
                continue
            ci = torch.tensor([i for _, i, _ in idx])
            bi, pi, wi = [], [], []
            for _, i, a in idx:
                if not 1 <= a.blank <= len(positions[i]):
                    raise ValueError(
                        f"action names blank {a.blank} but canvas has {len(positions[i])}"
                    )
                bi.append(a.blank - 1)
                pi.append(positions[i][a.blank - 1])
                wi.append(a.word.id)
            bi_t, wi_t = torch.tensor(bi), torch.tensor(wi)
            zb = z[ci, torch.tensor(pi)]

            lp = blank_lp[ci, bi_t]
            lp = lp + self.word_logprobs(zb).gather(1, wi_t[:, None]).squeeze(1)
            if self.config.mode == "word":
                cls = torch.tensor([flags_class(a) for _, _, a in idx])
                lp = lp + self.flag_logprobs(zb, wi_t).gather(1, cls[:, None]).squeeze(1)
            else:
                lens, lefts = [], []
                for _, i, a in idx:
                    blank_item = chunk[i].items[positions[i][a.blank - 1]]
                    assert isinstance(blank_item, Blank)
                    if blank_item.length is None or a.left_len is None:
                        raise ValueError("char-mode scoring needs annotated blanks")
                    lens.append(blank_item.length)
                    lefts.append(a.left_len)
                lp = lp + self.length_logprobs(
                    zb, wi_t, torch.tensor(lens)
                ).gather(1, torch.tensor(lefts)[:, None]).squeeze(1)

            out[torch.tensor([j for j, _, _ in idx])] = lp
        return out

    def action_logprob(self, c: Canvas, a: Action) -> torch.Tensor:
        """Scalar log p(action | canvas)."""
        return self.score_actions([(c, a)])[0]


def build_model(config: ModelConfig, vocab: Vocabulary, seed: int = 0) -> BlankModel:
    """Construct with deterministic parameter initialization."""
    torch.manual_seed(seed)
    return BlankModel(config, vocab)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header
# (format version, model hyperparameters, vocabulary, tensor manifest of
# (name, shape) sorted by name), raw tensor payload as little-endian float32
# in manifest order, and a trailing SHA-256 of everything before it.
# Round-trips are bit-exact.


def save_checkpoint(model: BlankModel, path: str) -> None:
    state = model.state_dict()
    names = sorted(state)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "vocab": {
            "mode": model.vocab.mode,
            "surfaces": list(model.vocab.surfaces),
            "min_count": model.vocab.min_count,
            "t_max": model.vocab.t_max,
        },
        "tensors": [[n, list(state[n].shape)] for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(
        state[n].detach().cpu().to(torch.float32).contiguous().numpy()
        .astype("<f4", copy=False).tobytes()
        for n in names
    )
    body = CHECKPOINT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload
    atomic_write_bytes(path, body + hashlib.sha256(body).digest())


def load_checkpoint(path: str) -> BlankModel:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < len(CHECKPOINT_MAGIC) + 4 + 32 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum failure")
    (hlen,) = struct.unpack_from("<I", body, len(CHECKPOINT_MAGIC))
    hstart = len(CHECKPOINT_MAGIC) + 4
    header = json.loads(body[hstart : hstart + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: version mismatch "
            f"(file {header.get('format_version')}, supported {CHECKPOINT_VERSION})"
        )

    vocab = Vocabulary(
        mode=header["vocab"]["mode"],
        surfaces=tuple(header["vocab"]["surfaces"]),
        min_count=header["vocab"]["min_count"],
        t_max=header["vocab"]["t_max"],
    )
    model = build_model(ModelConfig(**header["config"]), vocab, seed=0)
    state = model.state_dict()
    manifest = header["tensors"]
    if [n for n, _ in manifest] != sorted(state):
        raise CheckpointError(f"{path}: tensor names do not match this model")

    offset = hstart + hlen
    new_state = {}
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        raw = body[offset : offset + 4 * count]
        if len(raw) != 4 * count:
            raise CheckpointError(f"{path}: truncated tensor payload at {name}")
        offset += 4 * count
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if list(state[name].shape) != list(shape):
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        new_state[name] = torch.from_numpy(arr)
    if offset != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor payload")
    model.load_state_dict(new_state)
    model.eval()
    return model
