import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force
from splitvfl.alignment import (
    AlignmentError,
    digest_ids,
    intersect_hashed,
    intersect_plain,
    order_cohort,
)

SALT = bytes(range(16))


def test_identical_sets():
    ids = ["a", "b", "c"]
    assert sorted(intersect_plain(ids, list(reversed(ids))).ids) == ids


def test_disjoint_sets():
    assert intersect_plain(["a"], ["b"]).ids == ()


def test_duplicate_named():
    with pytest.raises(AlignmentError, match="'x'"):
        intersect_plain(["x", "y", "x"], ["x"])


def test_random_200_vs_150_matches_brute_force():
    rng = np.random.default_rng(0)
    pool = [f"S{i:03d}" for i in range(300)]
    a = list(rng.choice(pool, 200, replace=False))
    b = list(rng.choice(pool, 150, replace=False))
    cohort = intersect_plain(a, b, order_seed=5)
    assert sorted(cohort.ids) == brute_force(a, b)


def test_order_is_seeded_shuffle_of_sorted():
    cohort = order_cohort(["c", "a", "b", "d"], 3)
    perm = np.random.default_rng(3).permutation(4)
    assert cohort.ids == tuple(["a", "b", "c", "d"][i] for i in perm)
    assert order_cohort(["d", "c", "b", "a"], 3) == cohort


def test_hashed_equals_plain_on_same_inputs():
    a = [f"P{i}" for i in range(0, 40, 2)]
    b = [f"P{i}" for i in range(0, 40, 3)]
    plain = intersect_plain(a, b, 9)
    hashed = intersect_hashed(a, digest_ids(b, SALT), SALT, 9)
    assert hashed.to_bytes() == plain.to_bytes()


def test_hashed_empty_local():
    assert intersect_hashed([], digest_ids(["a"], SALT), SALT).ids == ()
    assert digest_ids([], SALT) == []


def test_digest_length_mismatch():
    with pytest.raises(AlignmentError, match="length"):
        intersect_hashed(["a"], [b"\x00" * 31], SALT)


def test_bad_salt():
    with pytest.raises(AlignmentError):
        digest_ids(["a"], b"short")


def test_no_collisions_at_10k_ids():
    ids = [f"ID{i:06d}" for i in range(10_000)]
    assert len(set(digest_ids(ids, SALT))) == len(ids)


def test_digests_do_not_contain_raw_ids():
    for sid, d in zip(["P0001", "P0002"], digest_ids(["P0001", "P0002"], SALT)):
        assert sid.encode() not in d


ids_strategy = st.lists(st.text(alphabet="abcdefg0123456789_", min_size=1, max_size=6), unique=True, max_size=30)


@settings(max_examples=200, deadline=None)
@given(ids_strategy, ids_strategy, st.integers(0, 2 ** 64 - 1))
def test_hashed_plain_agree_property(a, b, seed):
    plain = intersect_plain(a, b, seed)
    assert sorted(plain.ids) == brute_force(a, b)
    guest_view = intersect_hashed(a, digest_ids(b, SALT), SALT, seed)
    host_view = intersect_hashed(b, digest_ids(a, SALT), SALT, seed)
    assert guest_view.to_bytes() == plain.to_bytes() == host_view.to_bytes()
