from collections import Counter

import numpy as np
import pytest

from explainrank.features import (
    EMBED_DIM,
    GROUPS,
    Assembler,
    ConceptResource,
    EmbeddingResource,
    FeatureConfig,
    FeatureSpace,
    FrozenSpaceError,
    Providers,
    RelationTriple,
    TripleResource,
    build_space,
    build_space_and_matrix,
    extract_concept,
    extract_embedding,
    extract_lexical,
    extract_multihop,
    extract_openie,
    extract_tfidf_rank,
    sentence_key,
    triple_key,
)
from explainrank.textproc import process


def test_lexical_shared_and_tabletype():
    names = extract_lexical(process("granite hard"), process("stone"), process("granite rock"), "KINDOF")
    assert "lex:shared_qf=granite" in names
    assert [n for n in names if n.startswith("lex:tabletype=")] == ["lex:tabletype=KINDOF"]
    assert {"lex:q=granite", "lex:f=rock", "lex:ca=stone", "lex:q_pre3=gra", "lex:shared_qf_pre5=grani"} <= names


def test_lexical_three_way_and_affix_sharing():
    names = extract_lexical(process("rocks melt"), process("melting rock"), process("rock melts"))
    assert "lex:shared_qcaf=rock" in names and "lex:shared_qcaf=melt" in names
    assert "lex:shared_caf_suf4=rock" in names


def test_synonymy_tabletype(store, splits):
    prov = Providers(FeatureConfig(groups=("lex",)))
    names = prov.names(splits.train[0], store["s05"])
    assert "lex:tabletype=SYNONYMY" in names


CONCEPTS = ConceptResource(
    {
        "rabbit": (("animal", "herbivore", "mammal"), ()),
        "tea": (("beverage",), ("IsA_beverage", "HasA_caffeine")),
    }
)


def test_concept_rabbit_herbivore():
    names = extract_concept(process("what eats grass"), process("rabbit"), process("a rabbit is a kind of herbivore"), CONCEPTS)
    assert "cn:shared_caf=herbivore" in names
    # a literal lemma match on both sides is lexical, not concept-mediated
    assert "cn:shared_caf=rabbit" not in names


def test_concept_relations():
    names = extract_concept(process("why drink tea"), process("energy"), process("x"), CONCEPTS)
    assert {"cn:q_rel=IsA_beverage", "cn:q_rel=HasA_caffeine"} <= names


def test_concept_empty_resource_and_coverage():
    cov = Counter()
    names = extract_concept(process("rabbit tea"), process("rabbit"), process("a rabbit"), ConceptResource(), coverage=cov)
    assert names == set()
    assert cov["concept_miss"] == 4


def test_concept_top_k_truncates_at_extraction():
    names = extract_concept(process("rabbit"), process("x"), process("y"), CONCEPTS, top_k=1)
    assert "cn:q=animal" in names and "cn:q=herbivore" not in names


TRIPLES = TripleResource(
    {
        "f:p01": [RelationTriple(("hardness",), "be property of", ("material",))],
        "q:1": [RelationTriple(("hardness",), "make", ("granite", "useful"))],
    }
)


def test_openie_roles_and_shared_subject():
    cov = Counter()
    names = extract_openie("q:1", "ca:1", "f:p01", TRIPLES, coverage=cov)
    assert {"oie:subj_f=hardness", "oie:obj_f=material", "oie:pred_f=be_property_of"} <= names
    assert "oie:shared_subj_qf=hardness" in names
    assert not any(n.startswith("oie:subj_ca") or n.startswith("oie:obj_ca") for n in names)
    assert cov["openie_miss"] == 1


def test_openie_no_q_triples():
    names = extract_openie("q:none", "ca:none", "f:p01", TRIPLES)
    assert not any("_q=" in n for n in names)


def test_multihop_desert_example():
    names = extract_multihop(
        process("Which environment has very low rainfall?"), process("low rainfall"),
        process("a desert environment has low rainfall"),
    )
    assert "mh:ca_all_in_f=yes" in names and "mh:ca_last_in_f=yes" in names


def test_multihop_last_q_first_in_f():
    names = extract_multihop(process("Sonar is used to find an object"), process("sound"), process("object reflect sound"))
    assert "mh:last_q_first_in_f=yes" in names


def test_multihop_long_answer_skips_ca_features():
    names = extract_multihop(process("what is it"), process("very low annual rainfall"), process("low rainfall"))
    assert not any(n.startswith("mh:ca_") for n in names)


def test_multihop_verb_positions_and_zone():
    names = extract_multihop(process("plants use sunlight"), process("x"), process("green plants use sunlight to grow"))
    assert "mh:verbpos_q=1" in names
    # "use" at index 2 of a 6-token fact; middle window is {2, 3}
    assert "mh:shared_verb_zone=middle" in names


@pytest.mark.parametrize(
    "rank,expected",
    [
        (1, {"tfr:rank=1", "tfr:bin50=1", "tfr:bin100=1", "tfr:top100=yes", "tfr:top500=yes", "tfr:top1000=yes"}),
        (101, {"tfr:rank=101", "tfr:bin50=3", "tfr:bin100=2", "tfr:top100=no", "tfr:top500=yes", "tfr:top1000=yes"}),
        (1500, {"tfr:rank=1000+", "tfr:bin50=30", "tfr:bin100=15", "tfr:top100=no", "tfr:top500=no", "tfr:top1000=no"}),
    ],
)
def test_tfidf_rank_features(rank, expected):
    assert extract_tfidf_rank(rank) == expected


def test_tfidf_rank_rejects_zero():
    with pytest.raises(ValueError):
        extract_tfidf_rank(0)


def test_embedding_lookup_and_miss():
    vec = np.arange(EMBED_DIM, dtype=np.float32)
    res = EmbeddingResource({triple_key("q1", "f1"): vec})
    cov = Counter()
    got = extract_embedding("q1", "f1", res, cov)
    assert got.shape == (EMBED_DIM,) and np.array_equal(got, vec)
    assert np.array_equal(extract_embedding("q1", "f1", res, cov), got)
    assert not extract_embedding("q1", "f2", res, cov).any()
    assert cov["embedding_miss"] == 1


def test_embedding_wrong_length_rejected(tmp_path):
    with pytest.raises(ValueError):
        EmbeddingResource({"k": np.zeros(10)})
    path = tmp_path / "e.tsv"
    path.write_text("k\t" + "\t".join(["0.5"] * 767) + "\n")
    with pytest.raises(ValueError, match="768"):
        EmbeddingResource.load_tsv(path)


def test_resource_round_trips(tmp_path, fixtures_dir, store, splits):
    from conftest import make_embeddings

    cr = ConceptResource.load(fixtures_dir / "concepts.tsv")
    cr.save(tmp_path / "c.tsv")
    assert ConceptResource.load(tmp_path / "c.tsv") == cr
    assert cr.concepts("rabbit") == ("animal", "herbivore", "mammal")

    tr = TripleResource.load(fixtures_dir / "triples.tsv")
    tr.save(tmp_path / "t.tsv")
    assert TripleResource.load(tmp_path / "t.tsv") == tr

    emb = make_embeddings(store, splits)
    emb.save_binary(tmp_path / "e.bin")
    assert EmbeddingResource.load(tmp_path / "e.bin") == emb
    small = EmbeddingResource({k: emb.vectors[k] for k in list(emb.vectors)[:3]})
    small.save_tsv(tmp_path / "e.tsv")
    assert EmbeddingResource.load(tmp_path / "e.tsv") == small


def test_embedding_binary_truncation(tmp_path):
    res = EmbeddingResource({"a|b": np.ones(EMBED_DIM)})
    res.save_binary(tmp_path / "e.bin")
    data = (tmp_path / "e.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(data[:-4])
    with pytest.raises(ValueError, match="truncated"):
        EmbeddingResource.load_binary(tmp_path / "cut.bin")


def test_space_dense_and_frozen():
    space = FeatureSpace()
    assert space.add("lex:q=a") == 0
    assert space.add("cn:q=b") == 1
    assert space.add("lex:q=a") == 0
    space.freeze()
    with pytest.raises(FrozenSpaceError):
        space.add("lex:q=new")
    assert FeatureSpace.from_json(space.to_json()).names == space.names
    with pytest.raises(ValueError):
        FeatureSpace().add("bogus:x")


class _FixedProviders(Providers):
    def __init__(self, table):
        super().__init__(FeatureConfig(groups=("lex",)))
        self.table = table

    def names(self, qa, fact):
        return self.table[(qa.qa_id, fact.fact_id)]


def test_build_space_counts_distinct_names(splits, store):
    qa = splits.train[0]
    table = {
        (qa.qa_id, "k01"): {"lex:a", "lex:b", "lex:c"},
        (qa.qa_id, "k02"): {"lex:c", "lex:d", "lex:e"},
    }
    space = build_space([(qa, store["k01"]), (qa, store["k02"])], _FixedProviders(table))
    assert len(space) == 5 and space.frozen


def _providers(fixtures_dir, store, splits, groups=GROUPS):
    from conftest import make_embeddings
    from explainrank.pipeline import Experiment, Resources

    res = Resources(
        ConceptResource.load(fixtures_dir / "concepts.tsv"),
        TripleResource.load(fixtures_dir / "triples.tsv"),
        make_embeddings(store, splits),
    )
    return Experiment(store, splits, FeatureConfig(groups=tuple(groups)), res).providers()


@pytest.fixture(scope="module")
def full_space(fixtures_dir, store, splits):
    prov = _providers(fixtures_dir, store, splits)
    triples = [(qa, f) for qa in splits.train for f in store]
    space, X = build_space_and_matrix(triples, prov)
    return prov, space, X, triples


def test_groups_partition_into_blocks(full_space):
    _, space, _, _ = full_space
    gids = space.group_ids()
    assert np.all(np.diff(gids) >= 0)
    counts = space.group_counts()
    assert all(counts[g] > 0 for g in GROUPS)
    assert counts["emb"] == EMBED_DIM
    assert sum(counts.values()) == len(space)


def test_single_pass_matrix_equals_assemble(full_space):
    prov, space, X, triples = full_space
    asm = Assembler(prov, space)
    for row, (qa, fact) in list(enumerate(triples))[::37]:
        vec = asm.assemble(qa, fact)
        got = X.getrow(row)
        assert np.array_equal(vec.indices, got.indices) and np.array_equal(vec.values, got.data)
    assert build_space([t for t in triples], prov).names == space.names


def test_assemble_pure_and_sorted(full_space, splits, store):
    prov, space, _, _ = full_space
    qa, fact = splits.dev[0], store["p02"]
    a = Assembler(prov, space).assemble(qa, fact)
    b = Assembler(prov, space).assemble(qa, fact)
    assert a == b
    assert np.all(np.diff(a.indices) > 0) and a.indices[-1] < len(space)
    emb = space.group_indices("emb")
    one_hot = ~np.isin(a.indices, emb)
    assert np.all(a.values[one_hot] == 1.0)


def test_unseen_names_dropped(full_space, splits, store):
    prov, space, _, _ = full_space
    vec = Assembler(prov, space).assemble(splits.dev[4], store["c01"])
    assert "lex:q=bat" not in space  # only in a dev question
    assert all(i < len(space) for i in vec.indices)


def test_disabling_group_zeroes_only_its_block(fixtures_dir, store, splits, full_space):
    prov, space, _, _ = full_space
    qa, fact = splits.dev[2], store["p03"]
    full = Assembler(prov, space).assemble(qa, fact)
    gids = space.group_ids()
    for drop in GROUPS:
        kept = tuple(g for g in GROUPS if g != drop)
        part = Assembler(_providers(fixtures_dir, store, splits, kept), space).assemble(qa, fact)
        mask = gids[full.indices] != GROUPS.index(drop)
        assert np.array_equal(part.indices, full.indices[mask])
        assert np.array_equal(part.values, full.values[mask])


def test_all_groups_disabled_gives_empty_vector(full_space, splits, store):
    _, space, _, _ = full_space
    prov = Providers(FeatureConfig(groups=()))
    assert len(Assembler(prov, space).assemble(splits.dev[0], store["k01"])) == 0


def test_lex_plus_tfidf_support_is_union(fixtures_dir, store, splits, full_space):
    _, space, _, _ = full_space
    qa, fact = splits.dev[1], store["a01"]
    both = Assembler(_providers(fixtures_dir, store, splits, ("lex", "tfr")), space).assemble(qa, fact)
    lex = Assembler(_providers(fixtures_dir, store, splits, ("lex",)), space).assemble(qa, fact)
    tfr = Assembler(_providers(fixtures_dir, store, splits, ("tfr",)), space).assemble(qa, fact)
    assert set(both.indices) == set(lex.indices) | set(tfr.indices)
    assert len(tfr) > 0


def test_segment_embedding_mode_width(store, splits):
    res = EmbeddingResource({sentence_key("q", splits.dev[0].qa_id): np.ones(EMBED_DIM)})
    prov = Providers(FeatureConfig(groups=("emb",), embed_mode="segments"), embeddings=res)
    vec = prov.dense(splits.dev[0], store["k01"])
    assert vec.shape == (3 * EMBED_DIM,) and vec[:EMBED_DIM].all() and not vec[EMBED_DIM:].any()
