import pytest

from arca.corpus import generate_corpus
from arca.embed import OfflineHashingEmbedder
from arca.logproc import RuleBasedExtractor
from arca.pipeline import build_knowledge_base


@pytest.fixture(scope="session")
def extractor():
    return RuleBasedExtractor()


@pytest.fixture(scope="session")
def embedder():
    return OfflineHashingEmbedder(3072, seed=0)


@pytest.fixture(scope="session")
def small_corpus():
    """8 configurations per category: 64 tickets, enough for split and
    retrieval behavior without slowing the suite down."""
    return generate_corpus(configs_per_category=8, seed=3, duration_s=120)


@pytest.fixture(scope="session")
def small_kb(small_corpus, extractor, embedder):
    return build_knowledge_base(
        small_corpus[:48], extractor=extractor, embedder=embedder, seed=0
    )
