import itertools

import numpy as np
import pytest

from difftraverse import prompting as pr


def test_table_deterministic():
    a, b = pr.make_table(9), pr.make_table(9)
    np.testing.assert_array_equal(a.base_vector, b.base_vector)
    for k in a.token_vectors:
        np.testing.assert_array_equal(a.token_vectors[k], b.token_vectors[k])


@pytest.mark.parametrize("seed", range(10))
def test_table_separation_and_norms(seed):
    t = pr.make_table(seed)
    vecs = list(t.token_vectors.values())
    assert len(vecs) == 4
    for v in vecs:
        assert abs(np.linalg.norm(v) - 1) < 1e-12
    for u, v in itertools.combinations(vecs, 2):
        assert abs(u @ v) <= 0.5


def test_embed_properties(table):
    np.testing.assert_array_equal(pr.embed(frozenset(), table), table.base_vector)
    np.testing.assert_array_equal(pr.embed({"device", "effusion"}, table),
                                  pr.embed({"effusion", "device"}, table))
    diff = pr.embed({"device", "marker"}, table) - pr.embed({"device"}, table)
    np.testing.assert_allclose(diff, table.token_vectors["marker"], atol=1e-15)
    with pytest.raises(pr.PromptError, match="lasers"):
        pr.embed({"lasers"}, table)


def test_all_specs_distinct_embeddings(table):
    specs = pr.all_specs()
    assert len(specs) == 16
    embs = {tuple(pr.embed(s, table)) for s in specs}
    assert len(embs) == 16


def test_parse_grammar():
    assert pr.parse_prompt("neutral phantom") == frozenset()
    assert pr.parse_prompt("phantom with device and effusion") == {"device", "effusion"}
    assert pr.parse_prompt("Phantom WITH grid") == {"grid"}


@pytest.mark.parametrize("text,pos,token", [
    ("phantom with lasers", 13, "lasers"),
    ("phantom with device or grid", 20, "or"),
    ("phantom with device and device", 24, "device"),
    ("phantom wit device", 8, "wit"),
    ("phantom with device and", 20, "and"),
])
def test_parse_errors_carry_position(text, pos, token):
    with pytest.raises(pr.PromptError) as info:
        pr.parse_prompt(text)
    assert info.value.position == pos
    assert info.value.token == token


def test_format_round_trip():
    for spec in pr.all_specs():
        assert pr.parse_prompt(pr.format_prompt(spec)) == spec
