"""Shared fixtures: the desk-scale corpus, trained model, and record caches.

Everything is session-scoped and seeded, so the suite is deterministic and
the expensive artifacts (1.25 MB corpus, 1000-sequence null batch) are
built once.
"""

import numpy as np
import pytest

from wmlab import harness, lm

CORPUS_BYTES = 1_250_000
CORPUS_SEED = 11
MODEL_ORDER = 3
SMOOTHING = 0.1
HASH_KEY = 424242
MASTER_SEED = 7


@pytest.fixture(scope="session")
def corpus_text():
    return lm.synthetic_corpus(CORPUS_BYTES, CORPUS_SEED)


@pytest.fixture(scope="session")
def corpus_file(corpus_text, tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    path.write_text(corpus_text, encoding="utf-8")
    return str(path)


@pytest.fixture(scope="session")
def model(corpus_text):
    return lm.train(corpus_text, order=MODEL_ORDER, smoothing=SMOOTHING)


@pytest.fixture(scope="session")
def base_cfg(corpus_file):
    return harness.load_config(
        None,
        {
            "corpus": corpus_file,
            "order": MODEL_ORDER,
            "smoothing": SMOOTHING,
            "key": HASH_KEY,
            "master_seed": MASTER_SEED,
        },
    )


@pytest.fixture(scope="session")
def prompts_200(model, corpus_text):
    ids = np.asarray(model.encode(corpus_text), dtype=np.int64)
    rng = np.random.default_rng(5)
    starts = rng.integers(0, ids.size - 16, size=200)
    return [tuple(int(t) for t in ids[s : s + 16]) for s in starts]


def generate_batch(model, prompts, wm_cfg, hash_cfg, sampling_cfg, seed_tag):
    return [
        lm.generate(model, prompt, wm_cfg, hash_cfg, sampling_cfg, seed=(seed_tag, i))
        for i, prompt in enumerate(prompts)
    ]


@pytest.fixture(scope="session")
def null_records_1000(model, corpus_text):
    """1000 unwatermarked 200-token generations (criterion 5 workload)."""
    ids = np.asarray(model.encode(corpus_text), dtype=np.int64)
    rng = np.random.default_rng(5)
    starts = rng.integers(0, ids.size - 16, size=1000)
    prompts = [tuple(int(t) for t in ids[s : s + 16]) for s in starts]
    sampling = lm.SamplingConfig(0.7, 50, 200)
    return generate_batch(model, prompts, None, None, sampling, 99)
