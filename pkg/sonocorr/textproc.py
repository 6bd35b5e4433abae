"""Tokenisation, word embeddings and the selective information gate (SIG)."""

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from sonocorr.errors import ConfigError, CorpusFormatError, ShapeError, TokenLookupError

logger = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
POOL_EPS = 1e-8


class SIGVariant(Enum):
    NONE = "none"  # unit weights on every real token
    FILTER_OUTLIERS = "filter_outliers"  # coarse: drop <unk>
    KEYWORD_SPOTTING = "keyword_spotting"  # fine: keep dictionary words only

    @staticmethod
    def from_str(s: str) -> "SIGVariant":
        try:
            return SIGVariant(s.lower())
        except ValueError:
            raise ConfigError(f"unknown SIG variant: {s!r}") from None


@dataclass
class Vocabulary:
    tokens: list[str]
    embedding_dim: int = 128
    token_to_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            self.tokens = [PAD_TOKEN, UNK_TOKEN] + [t for t in self.tokens if t not in (PAD_TOKEN, UNK_TOKEN)]
        self.token_to_index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")

    @property
    def pad_index(self) -> int:
        return 0

    @property
    def unk_index(self) -> int:
        return 1

    def __len__(self) -> int:
        return len(self.tokens)

    def index(self, word: str) -> int:
        return self.token_to_index.get(word.lower(), self.unk_index)

    @classmethod
    def build(
        cls,
        words: Iterable[str],
        min_count: int = 2,
        embedding_dim: int = 128,
        reserved: Iterable[str] = (),
    ) -> "Vocabulary":
        """Words seen at least `min_count` times, plus every `reserved` word whatever its count."""
        counts = Counter(w.lower() for w in words)
        reserved = {w.lower() for w in reserved} - {PAD_TOKEN, UNK_TOKEN}
        candidates = set(counts) | reserved
        kept = sorted((w for w in candidates if counts[w] >= min_count or w in reserved), key=lambda w: (-counts[w], w))
        logger.info(
            f"vocabulary: {len(kept)} words kept from {len(counts)} distinct (min_count={min_count}, {len(reserved)} reserved)"
        )
        return cls([PAD_TOKEN, UNK_TOKEN] + kept, embedding_dim)


@dataclass(frozen=True)
class KeywordsDictionary:
    keywords: frozenset[str]

    def __post_init__(self):
        if not self.keywords:
            raise ValueError("keywords dictionary must not be empty")
        object.__setattr__(self, "keywords", frozenset(k.lower() for k in self.keywords))

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.keywords

    def __len__(self) -> int:
        return len(self.keywords)


@dataclass
class GatedTextEmbedding:
    token_embeddings: torch.Tensor  # (L, d)
    gate_weights: torch.Tensor  # (L,)
    pooled: torch.Tensor  # (d,)


# --- files -------------------------------------------------------------------


def parse_dictionary(text: str, source: str | Path = "<string>") -> KeywordsDictionary:
    words = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if len(line.split()) != 1:
            raise CorpusFormatError(source, line_no, f"one keyword per line expected, got {line!r}")
        words.append(line)
    return KeywordsDictionary(frozenset(words))


def read_dictionary(path: str | Path) -> KeywordsDictionary:
    return parse_dictionary(Path(path).read_text(encoding="utf-8"), path)


def default_dictionary() -> KeywordsDictionary:
    text = resources.files("sonocorr").joinpath("data/keywords.txt").read_text(encoding="utf-8")
    return parse_dictionary(text, "sonocorr/data/keywords.txt")


def read_embedding_table(path: str | Path) -> tuple[Vocabulary, np.ndarray]:
    """Header `|V| d`, then one `token f1 ... fd` line per token."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    try:
        n, d = (int(v) for v in lines[0].split())
    except (IndexError, ValueError) as e:
        raise CorpusFormatError(path, 1, f"bad header: {e}") from e
    tokens, rows = [], []
    for line_no, line in enumerate(lines[1 : n + 1], start=2):
        parts = line.split()
        if len(parts) != d + 1:
            raise CorpusFormatError(path, line_no, f"expected token + {d} floats, got {len(parts)} fields")
        tokens.append(parts[0])
        rows.append([float(v) for v in parts[1:]])
    if len(tokens) != n:
        raise CorpusFormatError(path, len(lines), f"header promises {n} rows, found {len(tokens)}")

    table = dict(zip(tokens, rows))
    vocab = Vocabulary(tokens, embedding_dim=d)
    matrix = np.array([table.get(t, [0.0] * d) for t in vocab.tokens], dtype=np.float32)
    return vocab, matrix


def write_embedding_table(path: str | Path, vocab: Vocabulary, table: np.ndarray) -> Path:
    path = Path(path)
    if table.shape[0] != len(vocab):
        raise ShapeError(f"table has {table.shape[0]} rows for {len(vocab)} tokens")
    with path.open("w", encoding="utf-8") as f:
        f.write(f"{table.shape[0]} {table.shape[1]}\n")
        for token, row in zip(vocab.tokens, table):
            f.write(token + " " + " ".join(repr(float(v)) for v in row) + "\n")
    return path


# --- tokens and embeddings ---------------------------------------------------


def tokenize(text_tokens: Sequence[str], vocab: Vocabulary) -> list[int]:
    return [vocab.index(w) for w in text_tokens]


def pad_indices(sequences: Sequence[Sequence[int]], pad_index: int = 0) -> torch.Tensor:
    length = max([1] + [len(s) for s in sequences])
    out = torch.full((len(sequences), length), pad_index, dtype=torch.long)
    for i, s in enumerate(sequences):
        if s:
            out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


class TextEmbedder(nn.Module):
    """Word table followed by two fully-connected projection layers."""

    def __init__(self, vocab_size: int, word_dim: int = 128, dim: int = 128, table: np.ndarray | None = None, freeze_table: bool = False):
        super().__init__()
        self.table = nn.Embedding(vocab_size, word_dim)
        if table is not None:
            if table.shape != (vocab_size, word_dim):
                raise ShapeError(f"pretrained table {table.shape} != ({vocab_size}, {word_dim})")
            self.table.weight.data.copy_(torch.as_tensor(table))
        else:
            nn.init.normal_(self.table.weight, mean=0.0, std=1.0)
        self.table.weight.requires_grad_(not freeze_table)
        self.project = nn.Sequential(nn.Linear(word_dim, dim), nn.ReLU(), nn.Linear(dim, dim))

    def forward(self, indices: torch.Tensor) -> torch.Tensor:
        if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= self.table.num_embeddings):
            raise TokenLookupError(f"token index outside [0, {self.table.num_embeddings})")
        return self.project(self.table(indices))


def embed(indices: Sequence[int] | torch.Tensor, embedder: TextEmbedder) -> torch.Tensor:
    """(L,) indices -> (L, d) projected embeddings; L may be 0."""
    indices = torch.as_tensor(indices, dtype=torch.long).reshape(-1)
    return embedder(indices)


class SIGate(nn.Module):
    """1x1 convolution over the token axis, then a fully-connected layer to one
    sigmoid weight per token."""

    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim
        self.conv = nn.Conv1d(dim, hidden, kernel_size=1)
        self.fc = nn.Linear(hidden, 1)

    def forward(self, embeddings: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.conv(embeddings.transpose(1, 2))).transpose(1, 2)
        g = torch.sigmoid(self.fc(h)).squeeze(-1)
        # hard mask after the learned gate; masked tokens are exactly 0
        return g * mask.to(g.dtype)


def pool(embeddings: torch.Tensor, gates: torch.Tensor) -> torch.Tensor:
    weighted = (gates.unsqueeze(-1) * embeddings).sum(dim=-2)
    return weighted / gates.sum(dim=-1, keepdim=True).clamp_min(POOL_EPS)


def keyword_table(vocab: Vocabulary, dictionary: KeywordsDictionary) -> torch.Tensor:
    flags = [i > vocab.unk_index and tok in dictionary for i, tok in enumerate(vocab.tokens)]
    return torch.tensor(flags, dtype=torch.bool)


def token_mask(
    indices: torch.Tensor,
    variant: SIGVariant,
    vocab: Vocabulary,
    dictionary: KeywordsDictionary | None = None,
    keywords: torch.Tensor | None = None,
) -> torch.Tensor:
    if variant is SIGVariant.KEYWORD_SPOTTING:
        if keywords is None:
            if dictionary is None:
                raise ConfigError("keyword spotting needs a keywords dictionary")
            keywords = keyword_table(vocab, dictionary)
        return keywords[indices]
    mask = indices != vocab.pad_index
    if variant is SIGVariant.FILTER_OUTLIERS:
        mask &= indices != vocab.unk_index
    return mask


def sig_gate(
    embeddings: torch.Tensor,
    indices: Sequence[int] | torch.Tensor,
    variant: SIGVariant,
    dictionary: KeywordsDictionary,
    vocab: Vocabulary,
    gate: SIGate,
) -> GatedTextEmbedding:
    indices = torch.as_tensor(indices, dtype=torch.long).reshape(-1)
    if embeddings.dim() != 2 or embeddings.shape[0] != indices.shape[0]:
        raise ShapeError(f"{tuple(embeddings.shape)} embeddings for {indices.shape[0]} tokens")
    mask = token_mask(indices, variant, vocab, dictionary)
    if variant is SIGVariant.NONE:
        gates = mask.to(embeddings.dtype)
    else:
        gates = gate(embeddings.unsqueeze(0), mask.unsqueeze(0))[0]
    return GatedTextEmbedding(embeddings, gates, pool(embeddings, gates))


class TextPathway(nn.Module):
    """Batched tokens -> gated, pooled text vectors."""

    def __init__(
        self,
        vocab: Vocabulary,
        dim: int,
        variant: SIGVariant = SIGVariant.KEYWORD_SPOTTING,
        dictionary: KeywordsDictionary | None = None,
        table: np.ndarray | None = None,
        freeze_table: bool = False,
    ):
        super().__init__()
        self.vocab = vocab
        self.variant = variant
        self.dictionary = dictionary or default_dictionary()
        self.embedder = TextEmbedder(len(vocab), vocab.embedding_dim, dim, table, freeze_table)
        self.gate = SIGate(dim)
        self.register_buffer("keywords", keyword_table(vocab, self.dictionary), persistent=False)

    def forward(self, indices: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        embeddings = self.embedder(indices)
        mask = token_mask(indices, self.variant, self.vocab, keywords=self.keywords)
        if self.variant is SIGVariant.NONE:
            gates = mask.to(embeddings.dtype)
        else:
            gates = self.gate(embeddings, mask)
        return embeddings, gates, pool(embeddings, gates)
