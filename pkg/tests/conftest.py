import json
from pathlib import Path

import numpy as np
import pytest

from explainrank.corpus import load_splits, load_tablestore
from explainrank.features import EMBED_DIM, EmbeddingResource, triple_key

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def store():
    return load_tablestore(FIXTURES / "tables")


@pytest.fixture(scope="session")
def splits(store):
    return load_splits(FIXTURES / "train.tsv", FIXTURES / "dev.tsv", FIXTURES / "test.tsv", store)


def make_embeddings(store, splits, seed=7, skip=("a06",)):
    """Noise vectors whose first coordinate flags gold facts; ``skip`` facts are left out."""
    rng = np.random.default_rng(seed)
    res = EmbeddingResource()
    for _, items in splits.items():
        for qa in items:
            gold = set(qa.gold.fact_ids) if qa.gold else set()
            for fact in store:
                vec = rng.normal(scale=0.05, size=EMBED_DIM).astype(np.float32)
                if fact.fact_id in skip:
                    continue
                vec[0] = 1.0 if fact.fact_id in gold else 0.0
                res.add(triple_key(qa.qa_id, fact.fact_id), vec)
    return res


@pytest.fixture(scope="session")
def embeddings_file(tmp_path_factory, store, splits):
    path = tmp_path_factory.mktemp("emb") / "embeddings.bin"
    make_embeddings(store, splits).save_binary(path)
    return path


def write_config(path: Path, out: Path, embeddings=None, **sections) -> Path:
    cfg = {
        "seed": 13,
        "paths": {
            "tablestore": str(FIXTURES / "tables"),
            "train": str(FIXTURES / "train.tsv"),
            "dev": str(FIXTURES / "dev.tsv"),
            "test": str(FIXTURES / "test.tsv"),
            "concepts": str(FIXTURES / "concepts.tsv"),
            "triples": str(FIXTURES / "triples.tsv"),
            "embeddings": str(embeddings) if embeddings else None,
            "out": str(out),
        },
        "svr": {"C": 0.05, "n_neg": 20, "max_epochs": 300},
        "ltr": {"C": 0.8, "n_neg": 20, "max_epochs": 300},
        "tune": {"C": [0.05, 1.0], "n_neg": [10, 20]},
        "ablation": {"base": ["lex"], "addons": ["tfr", "oie"], "learners": ["svr", "ltr"]},
    }
    for key, value in sections.items():
        cfg[key] = value
    path.write_text(json.dumps(cfg, indent=2), encoding="utf-8")
    return path


@pytest.fixture
def config_file(tmp_path, embeddings_file):
    return write_config(tmp_path / "config.json", tmp_path / "out", embeddings_file)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
