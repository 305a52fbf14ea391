"""Desk-scale token source: an order-k Markov model over bytes or words.

The model stands in for an LLM: ``next_dist`` provides the next-token
distribution (additively smoothed, with recursive backoff from the full
order down to the unigram and finally the uniform distribution), and
``generate`` runs the autoregressive loop with optional watermarking
applied after temperature and top-k shaping.

Counts are stored per order as sorted ``uint64`` codes of
(context, next-token) grams with parallel count arrays, which keeps a
megabyte-scale corpus at order 3 in a few MB instead of hundreds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import ProbDist, Vocabulary
from .errors import (
    EmptyCorpusError,
    EmptySequenceError,
    InvalidParamsError,
    TokenOutOfRangeError,
)
from .hashing import HashConfig, ScoreSpec, context_seed, context_window, sample_scores
from .samplers import (
    WatermarkConfig,
    sample_token,
    scheme_sampler,
    solve_lambda,
)

MODEL_FORMAT = "wmlab-model-v1"

_CORPUS_ALPHABET = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
_CORPUS_SEPARATORS = (" ", " ", " ", " ", ", ", ". ", "; ", ": ", "! ", "? ", "\n")


def synthetic_corpus(n_bytes: int, seed: int = 0, lexicon_size: int = 25_000) -> str:
    """Deterministic high-diversity text for desk-scale experiments.

    Random-word salad over a large mixed-case lexicon.  Natural-language
    and source-code corpora concentrate on a handful of byte 4-grams, which
    drives the deterministic (argmax) watermarks into short cycles within a
    couple hundred tokens; a wide lexicon keeps context windows diverse so
    deduplicated detection retains almost every position.
    """
    if n_bytes < 1 or lexicon_size < 2:
        raise InvalidParamsError("n_bytes and lexicon_size must be positive")
    rng = np.random.default_rng(seed)
    alphabet = np.array(list(_CORPUS_ALPHABET))
    words = np.array(
        ["".join(rng.choice(alphabet, size=rng.integers(4, 11))) for _ in range(lexicon_size)]
    )
    separators = np.array(_CORPUS_SEPARATORS, dtype=object)
    parts: list[str] = []
    total = 0
    while total < n_bytes:
        idx = rng.integers(0, lexicon_size, size=2000)
        seps = rng.choice(separators, size=2000)
        chunk = "".join(w + s for w, s in zip(words[idx], seps))
        parts.append(chunk)
        total += len(chunk)
    return "".join(parts)


@dataclass(frozen=True)
class SamplingConfig:
    """Decoding knobs applied to the raw model distribution."""

    temperature: float = 0.7
    top_k: int = 50
    max_tokens: int = 200

    def __post_init__(self):
        if self.temperature <= 0:
            raise InvalidParamsError("temperature must be > 0")
        if self.top_k < 1 or self.max_tokens < 1:
            raise InvalidParamsError("top_k and max_tokens must be >= 1")


@dataclass
class MarkovModel:
    """Additively smoothed order-k Markov model with backoff."""

    order: int
    smoothing: float
    vocab: Vocabulary
    level: str
    symbols: tuple
    ngram_codes: dict[int, np.ndarray] = field(repr=False)
    ngram_counts: dict[int, np.ndarray] = field(repr=False)
    unigram: np.ndarray = field(repr=False)

    # -- text mapping ----------------------------------------------------
    def encode(self, text: str | bytes) -> tuple[int, ...]:
        """Map surface text onto token ids; unknown symbols are an error."""
        if self.level == "byte":
            data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
            ids = self._byte_lookup[np.frombuffer(data, dtype=np.uint8)]
            if np.any(ids < 0):
                bad = int(data[int(np.argmax(ids < 0))])
                raise TokenOutOfRangeError(f"byte {bad} not in the training vocabulary")
            return tuple(int(i) for i in ids)
        table = self._word_lookup
        out = []
        for word in (text.split() if isinstance(text, str) else text):
            if word not in table:
                raise TokenOutOfRangeError(f"word {word!r} not in the training vocabulary")
            out.append(table[word])
        return tuple(out)

    def decode(self, ids) -> str:
        if self.level == "byte":
            return bytes(self.symbols[i] for i in ids).decode("utf-8", errors="replace")
        return " ".join(self.symbols[i] for i in ids)

    @property
    def _byte_lookup(self) -> np.ndarray:
        table = np.full(256, -1, dtype=np.int64)
        for idx, sym in enumerate(self.symbols):
            table[sym] = idx
        return table

    @property
    def _word_lookup(self) -> dict:
        return {sym: idx for idx, sym in enumerate(self.symbols)}


def _gram_codes(ids: np.ndarray, span: int, vocab_size: int) -> np.ndarray:
    """uint64 codes of all length-``span`` windows of ``ids``."""
    n = ids.size - span + 1
    codes = ids[:n].astype(np.uint64)
    for offset in range(1, span):
        codes = codes * np.uint64(vocab_size) + ids[offset : offset + n].astype(np.uint64)
    return codes


def train(corpus: str | bytes, order: int = 3, smoothing: float = 0.1, level: str = "byte") -> MarkovModel:
    """Count all (k-gram, next-token) transitions of a text corpus.

    The vocabulary is exactly the set of observed symbols; a corpus with
    fewer than two distinct symbols cannot seed a model.
    """
    if order < 1:
        raise InvalidParamsError("order must be >= 1")
    if smoothing <= 0:
        raise InvalidParamsError("smoothing must be > 0")
    if level == "byte":
        data = corpus.encode("utf-8") if isinstance(corpus, str) else bytes(corpus)
        if len(data) == 0:
            raise EmptyCorpusError("corpus is empty")
        symbols = tuple(sorted(set(data)))
        lookup = np.full(256, -1, dtype=np.int64)
        for idx, sym in enumerate(symbols):
            lookup[sym] = idx
        ids = lookup[np.frombuffer(data, dtype=np.uint8)]
    elif level == "word":
        words = corpus.split() if isinstance(corpus, str) else bytes(corpus).decode("utf-8").split()
        if not words:
            raise EmptyCorpusError("corpus is empty")
        symbols = tuple(sorted(set(words)))
        table = {sym: idx for idx, sym in enumerate(symbols)}
        ids = np.asarray([table[w] for w in words], dtype=np.int64)
    else:
        raise InvalidParamsError(f"unknown vocabulary level {level!r}")

    vocab_size = len(symbols)
    if vocab_size < 2:
        raise EmptyCorpusError(f"corpus yields a vocabulary of size {vocab_size}; need >= 2")
    if (order + 1) * np.log2(vocab_size) > 63:
        raise InvalidParamsError(f"order {order} x vocab {vocab_size} overflows the 64-bit gram code")

    ngram_codes: dict[int, np.ndarray] = {}
    ngram_counts: dict[int, np.ndarray] = {}
    for j in range(1, order + 1):
        if ids.size >= j + 1:
            codes, counts = np.unique(_gram_codes(ids, j + 1, vocab_size), return_counts=True)
        else:
            codes, counts = np.empty(0, dtype=np.uint64), np.empty(0, dtype=np.int64)
        ngram_codes[j] = codes
        ngram_counts[j] = counts.astype(np.int64)
    unigram = np.bincount(ids, minlength=vocab_size).astype(np.float64)

    return MarkovModel(
        order=order,
        smoothing=float(smoothing),
        vocab=Vocabulary(vocab_size),
        level=level,
        symbols=symbols,
        ngram_codes=ngram_codes,
        ngram_counts=ngram_counts,
        unigram=unigram,
    )


def next_dist(model: MarkovModel, context) -> ProbDist:
    """Smoothed next-token distribution after the longest seen context suffix.

    Unseen contexts back off one order at a time down to the unigram; if
    no counts exist at all the result is uniform (pure smoothing).
    """
    vocab_size = model.vocab.size
    ctx = [int(t) for t in context]
    for tok in ctx:
        if not 0 <= tok < vocab_size:
            raise TokenOutOfRangeError(f"context token {tok} outside vocabulary")
    alpha = model.smoothing
    for j in range(min(model.order, len(ctx)), 0, -1):
        suffix = np.asarray(ctx[-j:], dtype=np.int64)
        base = _gram_codes(suffix, j, vocab_size)[0] * np.uint64(vocab_size)
        codes = model.ngram_codes[j]
        lo = int(np.searchsorted(codes, base, side="left"))
        hi = int(np.searchsorted(codes, base + np.uint64(vocab_size), side="left"))
        if hi > lo:
            counts = np.zeros(vocab_size)
            counts[(codes[lo:hi] - base).astype(np.int64)] = model.ngram_counts[j][lo:hi]
            return ProbDist((counts + alpha) / (counts.sum() + alpha * vocab_size))
    counts = model.unigram
    return ProbDist((counts + alpha) / (counts.sum() + alpha * vocab_size))


def shape_dist(p: ProbDist, cfg: SamplingConfig) -> ProbDist:
    """Temperature-sharpen then keep only the top-k tokens, renormalizing.

    Ranking ties at the k-th weight break toward the lower token id; the
    surviving tokens keep their relative order.
    """
    w = p.weights ** (1.0 / cfg.temperature)
    w = w / w.sum()
    k = min(cfg.top_k, w.size)
    if k < w.size:
        order = np.argsort(-w, kind="stable")
        keep = order[:k]
        shaped = np.zeros_like(w)
        shaped[keep] = w[keep]
        w = shaped / shaped.sum()
    return ProbDist(w)


@dataclass(frozen=True)
class StepTrace:
    """Everything recorded about one generation step."""

    context: tuple[int, ...]
    seed: int | None
    p: ProbDist
    q: ProbDist
    token: int


@dataclass
class GenerationRecord:
    """A prompt, its continuation, and per-step traces for metrics."""

    prompt: tuple[int, ...]
    tokens: tuple[int, ...]
    steps: list[StepTrace]
    wm_cfg: WatermarkConfig | None
    lam: float | None
    seed: object


def generate(
    model: MarkovModel,
    prompt,
    wm_cfg: WatermarkConfig | None,
    hash_cfg: HashConfig | None,
    sampling_cfg: SamplingConfig,
    seed,
    resolve_lambda_per_step: bool = False,
) -> GenerationRecord:
    """Autoregressive sampling with optional watermarking.

    Watermarking applies after temperature and top-k shaping.  For the
    soft-perplexity scheme the multiplier is calibrated once per run from
    the first step's shaped distribution (per-step recalibration behind
    ``resolve_lambda_per_step``).  The token-sampling stream and the
    lambda-calibration stream are split from ``seed``, so runs are
    reproducible bit-for-bit.
    """
    vocab_size = model.vocab.size
    prompt = tuple(int(t) for t in prompt)
    for tok in prompt:
        if not 0 <= tok < vocab_size:
            raise TokenOutOfRangeError(f"prompt token {tok} outside vocabulary")
    if wm_cfg is not None and hash_cfg is None:
        raise InvalidParamsError("watermarked generation needs a hash config")

    seed_seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    token_stream_seq, lambda_seq = seed_seq.spawn(2)
    rng = np.random.default_rng(token_stream_seq)

    seq = list(prompt)
    steps: list[StepTrace] = []
    lam: float | None = None
    sampler = None

    for _ in range(sampling_cfg.max_tokens):
        p = shape_dist(next_dist(model, seq[-model.order :]), sampling_cfg)
        if wm_cfg is None:
            q = p
            seed_t = None
        else:
            window = context_window(seq, hash_cfg.context_width, hash_cfg.padding_token(vocab_size))
            if wm_cfg.scheme == "synthid":
                layers = np.stack(
                    [
                        sample_scores(context_seed(hash_cfg, window, layer), wm_cfg.score_spec, vocab_size)
                        for layer in range(wm_cfg.layers)
                    ]
                )
                seed_t = context_seed(hash_cfg, window, 0)
                scores = layers
            else:
                seed_t = context_seed(hash_cfg, window, 0)
                scores = sample_scores(seed_t, wm_cfg.score_spec, vocab_size)
            if wm_cfg.scheme == "ppl_soft" and (lam is None or resolve_lambda_per_step):
                lam = solve_lambda(p, wm_cfg.epsilon, wm_cfg.score_spec, wm_cfg.mc_samples, seed=lambda_seq)
                sampler = None
            if sampler is None:
                sampler = scheme_sampler(wm_cfg, lam)
            q = sampler(p, scores)
        token = sample_token(q, rng)
        steps.append(StepTrace(tuple(window) if wm_cfg is not None else tuple(seq[-model.order :]), seed_t, p, q, token))
        seq.append(token)

    return GenerationRecord(
        prompt=prompt,
        tokens=tuple(seq[len(prompt) :]),
        steps=steps,
        wm_cfg=wm_cfg,
        lam=lam,
        seed=seed,
    )


def perplexity(model: MarkovModel, tokens, prefix=()) -> float:
    """Exponential of the mean negative log-probability under ``next_dist``.

    The raw (unshaped) model distribution does the judging; ``prefix``
    supplies context without being scored itself.
    """
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise EmptySequenceError("nothing to score")
    seq = [int(t) for t in prefix] + tokens
    start = len(seq) - len(tokens)
    nll = 0.0
    for t in range(start, len(seq)):
        p = next_dist(model, seq[max(0, t - model.order) : t])
        nll -= np.log(p.weights[seq[t]])
    return float(np.exp(nll / len(tokens)))


def save_model(model: MarkovModel, path) -> None:
    """Persist counts to a versioned ``.npz`` archive (no pickling)."""
    meta = {
        "format": MODEL_FORMAT,
        "order": model.order,
        "smoothing": model.smoothing,
        "level": model.level,
        "vocab_size": model.vocab.size,
    }
    arrays = {
        "meta": np.asarray(json.dumps(meta)),
        "unigram": model.unigram,
        "symbols": np.asarray(model.symbols),
    }
    for j in range(1, model.order + 1):
        arrays[f"codes_{j}"] = model.ngram_codes[j]
        arrays[f"counts_{j}"] = model.ngram_counts[j]
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)


def load_model(path) -> MarkovModel:
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        if meta.get("format") != MODEL_FORMAT:
            raise InvalidParamsError(f"unsupported model dump format {meta.get('format')!r}")
        order = int(meta["order"])
        symbols_arr = archive["symbols"]
        if meta["level"] == "byte":
            symbols = tuple(int(s) for s in symbols_arr)
        else:
            symbols = tuple(str(s) for s in symbols_arr)
        return MarkovModel(
            order=order,
            smoothing=float(meta["smoothing"]),
            vocab=Vocabulary(int(meta["vocab_size"])),
            level=meta["level"],
            symbols=symbols,
            ngram_codes={j: archive[f"codes_{j}"] for j in range(1, order + 1)},
            ngram_counts={j: archive[f"counts_{j}"] for j in range(1, order + 1)},
            unigram=archive["unigram"],
        )
