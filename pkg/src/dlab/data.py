"""Synthetic topic-model corpora with gold pair scores, text/TSV loaders, and batching."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import MAX_SEQ_LEN, SentenceBatch
from .errors import GenerationError, InputError, ParameterError, ParseError
from .rng import stream

SPLITS = ("train", "dev", "test")


@dataclass
class Corpus:
    sentences: list[tuple[int, ...]]
    vocab: int
    split: str = "train"
    max_seq_len: int = MAX_SEQ_LEN

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InputError(f"unknown split tag {self.split!r}")
        for i, s in enumerate(self.sentences):
            if not 1 <= len(s) <= self.max_seq_len:
                raise InputError(f"sentence {i} has length {len(s)}, outside [1, {self.max_seq_len}]")
            if min(s) < 0 or max(s) >= self.vocab:
                raise InputError(f"sentence {i} has a token id outside [0, {self.vocab})")

    def __len__(self):
        return len(self.sentences)


@dataclass(frozen=True)
class ScoredPair:
    a: tuple[int, ...]
    b: tuple[int, ...]
    gold: float

    def __post_init__(self):
        if not 0.0 <= self.gold <= 5.0:
            raise InputError(f"gold score {self.gold} outside [0, 5]")


@dataclass(frozen=True)
class GeneratorConfig:
    topics: int = 16
    vocab: int = 2000
    train_sentences: int = 10_000
    test_sentences: int = 2_000
    dev_pairs: int = 1_000
    test_pairs: int = 1_000
    min_len: int = 16
    max_len: int = 32
    topic_concentration: float = 0.1
    word_concentration: float = 0.01
    background_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.topics < 2 or self.vocab < self.topics:
            raise ParameterError(f"need topics >= 2 and vocab >= topics, got {self.topics}, {self.vocab}")
        if not 1 <= self.min_len <= self.max_len <= MAX_SEQ_LEN:
            raise ParameterError(f"sentence lengths must satisfy 1 <= {self.min_len} <= {self.max_len} <= {MAX_SEQ_LEN}")
        if self.topic_concentration <= 0 or self.word_concentration <= 0:
            raise ParameterError("concentrations must be positive")
        if not 0 <= self.background_rate < 1:
            raise ParameterError("background_rate must lie in [0, 1)")


@dataclass
class SyntheticData:
    train: Corpus
    test: Corpus
    dev_pairs: list[ScoredPair]
    test_pairs: list[ScoredPair]
    # latent topic mixtures behind each pair, (n, 2, K); kept for checks
    dev_mixtures: np.ndarray = field(repr=False, default=None)
    test_mixtures: np.ndarray = field(repr=False, default=None)


def gold_score(theta_a: np.ndarray, theta_b: np.ndarray) -> float:
    """5 x cosine of two latent topic mixtures, clipped to [0, 5]."""
    cos = float(theta_a @ theta_b / (np.linalg.norm(theta_a) * np.linalg.norm(theta_b)))
    return min(5.0, max(0.0, 5.0 * cos))


class _TopicModel:
    def __init__(self, cfg: GeneratorConfig):
        self.cfg = cfg
        rng = stream(cfg.seed, "topics")
        self.topic_words = rng.dirichlet(np.full(cfg.vocab, cfg.word_concentration), size=cfg.topics)
        ranks = np.arange(1, cfg.vocab + 1, dtype=np.float64)
        background = 1.0 / ranks
        self.background = background[rng.permutation(cfg.vocab)] / background.sum()
        self.topic_cdf = np.cumsum(self.topic_words, axis=1)
        self.background_cdf = np.cumsum(self.background)

    def mixture(self, rng) -> np.ndarray:
        return rng.dirichlet(np.full(self.cfg.topics, self.cfg.topic_concentration))

    def sentence(self, theta: np.ndarray, rng) -> tuple[int, ...]:
        cfg = self.cfg
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        background = rng.random(length) < cfg.background_rate
        topics = np.minimum(np.searchsorted(np.cumsum(theta), rng.random(length), side="right"), cfg.topics - 1)
        u = rng.random(length)
        words = []
        for k in range(length):
            cdf = self.background_cdf if background[k] else self.topic_cdf[topics[k]]
            words.append(min(int(np.searchsorted(cdf, u[k], side="right")), cfg.vocab - 1))
        return tuple(words)


def _fresh_sentence(model: _TopicModel, theta, rng, seen: set) -> tuple[int, ...]:
    for _ in range(1000):
        s = model.sentence(theta, rng)
        if s not in seen:
            seen.add(s)
            return s
    raise GenerationError("could not draw a sentence distinct from earlier splits; increase vocab or length")


def _pairs(model: _TopicModel, count: int, rng, seen: set) -> tuple[list[ScoredPair], np.ndarray]:
    """Pairs stratified so every unit-width gold bucket gets an equal share."""
    buckets = 5
    quota = [count // buckets + (1 if b < count % buckets else 0) for b in range(buckets)]
    chosen: list[list[tuple]] = [[] for _ in range(buckets)]
    attempts = 0
    limit = 200 * max(count, 1)
    while any(len(chosen[b]) < quota[b] for b in range(buckets)):
        attempts += 1
        if attempts > limit:
            raise GenerationError(
                f"could not fill gold-score buckets {[len(c) for c in chosen]} of {quota}; "
                "increase topic_concentration or the pair count"
            )
        theta_a = model.mixture(rng)
        w = rng.random()
        theta_b = w * theta_a + (1.0 - w) * model.mixture(rng)
        theta_b /= theta_b.sum()
        gold = gold_score(theta_a, theta_b)
        b = min(int(gold), buckets - 1)
        if len(chosen[b]) < quota[b]:
            chosen[b].append((theta_a, theta_b, gold))
    flat = [item for bucket in chosen for item in bucket]
    order = rng.permutation(len(flat))
    pairs, mixtures = [], []
    for k in order:
        theta_a, theta_b, gold = flat[k]
        pairs.append(ScoredPair(_fresh_sentence(model, theta_a, rng, seen), _fresh_sentence(model, theta_b, rng, seen), gold))
        mixtures.append((theta_a, theta_b))
    return pairs, np.array(mixtures).reshape(len(pairs), 2, -1)


def generate_corpus(cfg: GeneratorConfig = GeneratorConfig()) -> SyntheticData:
    model = _TopicModel(cfg)
    seen: set = set()
    splits = {}
    for name, count in (("train", cfg.train_sentences), ("test", cfg.test_sentences)):
        rng = stream(cfg.seed, "corpus", name)
        sentences = [_fresh_sentence(model, model.mixture(rng), rng, seen) for _ in range(count)]
        splits[name] = Corpus(sentences, cfg.vocab, name)
    dev, dev_mix = _pairs(model, cfg.dev_pairs, stream(cfg.seed, "pairs", "dev"), seen)
    test, test_mix = _pairs(model, cfg.test_pairs, stream(cfg.seed, "pairs", "test"), seen)
    return SyntheticData(splits["train"], splits["test"], dev, test, dev_mix, test_mix)


def token_id(word: str, vocab: int) -> int:
    return zlib.crc32(word.encode("utf-8")) % vocab


def surface_vocabulary(vocab: int) -> list[str]:
    """One printable word per id, chosen so that ``token_id(word) == id``; files round-trip exactly."""
    words: list[str | None] = [None] * vocab
    missing = vocab
    k = 0
    while missing:
        word = "w" + np.base_repr(k, 36).lower()
        tid = token_id(word, vocab)
        if words[tid] is None:
            words[tid] = word
            missing -= 1
        k += 1
    return words  # type: ignore[return-value]


def load_corpus(path, vocab: int, split: str = "train", max_seq_len: int = MAX_SEQ_LEN) -> Corpus:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    sentences = []
    for line in text.splitlines():
        words = line.split()
        if words:
            sentences.append(tuple(token_id(w, vocab) for w in words[:max_seq_len]))
    if not sentences:
        raise InputError(f"{path} contains no sentences")
    return Corpus(sentences, vocab, split, max_seq_len)


def _tokenize(text: str, vocab: int, max_seq_len: int) -> tuple[int, ...]:
    return tuple(token_id(w, vocab) for w in text.split()[:max_seq_len])


def load_sts(path, vocab: int, max_seq_len: int = MAX_SEQ_LEN) -> list[ScoredPair]:
    """Read ``score<TAB>sentence1<TAB>sentence2`` rows."""
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(f"expected 3 tab-separated fields, got {len(fields)}", lineno)
            try:
                score = float(fields[0])
            except ValueError:
                raise ParseError(f"score {fields[0]!r} is not a number", lineno) from None
            if not 0.0 <= score <= 5.0:
                raise ParseError(f"score {score} outside [0, 5]", lineno)
            a, b = _tokenize(fields[1], vocab, max_seq_len), _tokenize(fields[2], vocab, max_seq_len)
            if not a or not b:
                raise ParseError("empty sentence", lineno)
            pairs.append(ScoredPair(a, b, score))
    return pairs


def write_corpus(path, corpus: Corpus, words: list[str]) -> None:
    Path(path).write_text("".join(" ".join(words[t] for t in s) + "\n" for s in corpus.sentences), encoding="utf-8")


def write_sts(path, pairs: list[ScoredPair], words: list[str]) -> None:
    rows = (f"{float(p.gold)!r}\t{' '.join(words[t] for t in p.a)}\t{' '.join(words[t] for t in p.b)}\n" for p in pairs)
    Path(path).write_text("".join(rows), encoding="utf-8")


def write_dataset(out_dir, data: SyntheticData, cfg: GeneratorConfig) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    words = surface_vocabulary(cfg.vocab)
    paths = {
        "train": out / "train.txt",
        "test": out / "test.txt",
        "dev_pairs": out / "dev.tsv",
        "test_pairs": out / "test.tsv",
    }
    write_corpus(paths["train"], data.train, words)
    write_corpus(paths["test"], data.test, words)
    write_sts(paths["dev_pairs"], data.dev_pairs, words)
    write_sts(paths["test_pairs"], data.test_pairs, words)
    manifest = "".join(f"{k}={v}\n" for k, v in asdict(cfg).items())
    (out / "data-manifest.txt").write_text(manifest, encoding="utf-8")
    return paths


def batch_iter(corpus: Corpus, n: int, seed: int, epoch: int) -> list[SentenceBatch]:
    """One epoch of drop-last batches in a seeded order."""
    if n < 2:
        raise InputError(f"batch size must be >= 2, got {n}")
    if n > len(corpus):
        raise InputError(f"batch size {n} exceeds corpus size {len(corpus)}")
    order = stream(seed, "batch", epoch).permutation(len(corpus))
    return [SentenceBatch.of(corpus.sentences[k] for k in order[b * n:(b + 1) * n]) for b in range(len(corpus) // n)]


def batches_per_epoch(corpus: Corpus, n: int) -> int:
    return len(corpus) // n


def pair_batches(pairs: list[ScoredPair]) -> tuple[SentenceBatch, SentenceBatch]:
    return SentenceBatch.of(p.a for p in pairs), SentenceBatch.of(p.b for p in pairs)


@dataclass(frozen=True)
class PairSet:
    """Scored pairs with their sentence batches built once, for repeated evaluation."""

    first: SentenceBatch
    second: SentenceBatch
    gold: np.ndarray

    @classmethod
    def of(cls, pairs) -> "PairSet":
        if isinstance(pairs, PairSet):
            return pairs
        pairs = list(pairs)
        a, b = pair_batches(pairs)
        return cls(a, b, np.array([p.gold for p in pairs], dtype=np.float64))

    def __len__(self):
        return len(self.gold)
