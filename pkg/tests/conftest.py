import numpy as np
import pytest

from itftlab import textprep as tp
from itftlab.corpus import ParallelCorpus


@pytest.fixture(scope="session")
def tiny_spm():
    pool = [
        "the quick brown fox jumps over the lazy dog",
        "pack my box with five dozen liquor jugs",
        "how vexingly quick daft zebras jump",
    ] * 3
    return tp.train_subword(pool, vocab_size=80)


@pytest.fixture()
def small_corpus():
    pairs = tuple((f"src sentence {i} ka mi", f"tgt sentence {i} pa qi") for i in range(20))
    return ParallelCorpus(
        id="small",
        source_lang="xx",
        target_lang="yy",
        domain="unit",
        pairs=pairs,
    )


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240)
