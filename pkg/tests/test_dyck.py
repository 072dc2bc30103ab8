import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtslstm.dyck import (
    DyckGrammarParams,
    DyckSequence,
    GenerationError,
    build_dyck_dataset,
    distance_histogram,
    dyck_targets,
    encode,
    generate_dyck,
    is_balanced,
    load_jsonl,
    pair_distances,
    power_law_fit,
    save_jsonl,
    sequence_rng,
)


class StubRng:
    def __init__(self, draws):
        self.draws = list(draws)

    def random(self):
        return self.draws.pop(0)


def reduce_pairs(s):
    """Cancel adjacent matched pairs until none remain (independent of any stack code)."""
    prev = None
    while prev != s:
        prev = s
        s = s.replace("()", "").replace("[]", "")
    return s


def is_valid_prefix(s):
    return set(reduce_pairs(s)) <= set("([")


def oracle_targets(s):
    # a closer is allowed next iff appending it keeps the prefix completable
    return np.array([[is_valid_prefix(s[:t + 1] + ")"), is_valid_prefix(s[:t + 1] + "]")] for t in range(len(s))],
                    dtype=float).reshape(len(s), 2)


def test_stub_draws_force_rules():
    assert generate_dyck(rng=StubRng([0.10, 0.90])).symbols == "()"
    assert generate_dyck(rng=StubRng([0.30, 0.90])).symbols == "[]"
    # SS then two single pairs
    assert generate_dyck(rng=StubRng([0.60, 0.10, 0.90, 0.30, 0.90])).symbols == "()[]"


def test_empty_root_is_rejected():
    # first attempt derives epsilon, second gives "()"
    assert generate_dyck(rng=StubRng([0.9, 0.1, 0.9])).symbols == "()"


def test_targets_examples():
    np.testing.assert_array_equal(dyck_targets("("), [[1, 0]])
    np.testing.assert_array_equal(dyck_targets("(["), [[1, 0], [0, 1]])
    np.testing.assert_array_equal(dyck_targets("()"), [[1, 0], [0, 0]])
    with pytest.raises(ValueError):
        dyck_targets("(]")
    with pytest.raises(ValueError):
        dyck_targets("x")


def test_distances_examples():
    assert pair_distances("()") == [1]
    assert pair_distances("(())") == [3, 1]
    assert pair_distances("()[]") == [1, 1]
    with pytest.raises(ValueError):
        pair_distances("(()")
    assert not is_balanced("([)]")


def test_generated_sequences_balanced_and_match_oracle():
    params = DyckGrammarParams()
    for k in range(300):
        s = generate_dyck(params, sequence_rng(11, 0, k))
        assert is_balanced(s.symbols) and reduce_pairs(s.symbols) == ""
        assert 2 <= len(s) <= 200
        np.testing.assert_array_equal(s.targets, oracle_targets(s.symbols))
        assert len(s.distances) == len(s) // 2
        assert all(d % 2 == 1 for d in s.distances)


def test_balance_over_many_seeded_samples():
    params = DyckGrammarParams()
    rng = np.random.default_rng(0)
    for _ in range(100_000):
        s = generate_dyck(params, rng)
        assert reduce_pairs(s.symbols) == "" and len(s) <= 200


@settings(max_examples=100)
@given(st.text(alphabet="()[]", max_size=16))
def test_targets_agree_with_oracle_on_valid_prefixes(s):
    if is_valid_prefix(s):
        np.testing.assert_array_equal(dyck_targets(s), oracle_targets(s))
        assert is_balanced(s) == (reduce_pairs(s) == "")
    else:
        with pytest.raises(ValueError):
            dyck_targets(s)


def test_params_validation():
    for bad in [dict(p1=0.0), dict(p1=0.5, p2=0.3, q=0.3), dict(max_len=1)]:
        with pytest.raises(ValueError):
            DyckGrammarParams(**bad)


def test_generation_gives_up():
    tiny = DyckGrammarParams(p1=0.01, p2=0.01, q=0.97, max_len=2)
    with pytest.raises(GenerationError):
        generate_dyck(tiny, np.random.default_rng(0), max_attempts=5)


def test_dataset_is_seeded_and_split_streams_differ():
    a = build_dyck_dataset(n_train=30, n_valid=5, n_test=5, seed=7)
    b = build_dyck_dataset(n_train=30, n_valid=5, n_test=5, seed=7)
    assert [s.symbols for s in a["train"]] == [s.symbols for s in b["train"]]
    assert [s.symbols for s in a["valid"]] != [s.symbols for s in a["train"][:5]]
    with pytest.raises(ValueError):
        build_dyck_dataset(n_train=0)


def test_one_hot_and_sequence_fields():
    s = DyckSequence("([])")
    np.testing.assert_array_equal(encode("()[]"), np.eye(4))
    assert s.one_hot().shape == (4, 4)
    assert s.max_distance == 3


def test_jsonl_round_trip(tmp_path):
    seqs = [DyckSequence("()"), DyckSequence("[()]")]
    save_jsonl(seqs, tmp_path / "d.jsonl")
    rows = [json.loads(l) for l in (tmp_path / "d.jsonl").read_text().splitlines()]
    assert rows[1] == {"symbols": "[()]", "max_distance": 3}
    assert [s.symbols for s in load_jsonl(tmp_path / "d.jsonl")] == ["()", "[()]"]
    (tmp_path / "bad.jsonl").write_text('{"symbols": "(("}\n')
    with pytest.raises(ValueError):
        load_jsonl(tmp_path / "bad.jsonl")


def test_power_law_fit_recovers_exponent():
    hist = {d: int(1e6 * d ** -1.5) for d in range(1, 200, 2)}
    slope, _, r2 = power_law_fit(hist)
    assert slope == pytest.approx(-1.5, abs=0.01) and r2 > 0.999
    with pytest.raises(ValueError):
        power_law_fit({3: 1})


def test_distance_histogram_counts_every_pair():
    seqs = [DyckSequence("(())"), DyckSequence("()")]
    assert distance_histogram(seqs) == {1: 2, 3: 1}
