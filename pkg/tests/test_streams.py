import numpy as np

from kickflow.streams import TAG_COUPLE, TAG_KICK, substream


def test_same_key_reproduces():
    a = substream(7, TAG_KICK, 3, 1).random(8)
    b = substream(7, TAG_KICK, 3, 1).random(8)
    assert np.array_equal(a, b)


def test_distinct_keys_decorrelate():
    a = substream(7, TAG_KICK, 3, 1).random(8)
    for other in [substream(7, TAG_KICK, 3, 2), substream(7, TAG_KICK, 4, 1),
                  substream(7, TAG_COUPLE, 3, 1), substream(8, TAG_KICK, 3, 1)]:
        assert not np.array_equal(a, other.random(8))


def test_streams_are_independent_of_call_order():
    r1 = substream(1, TAG_KICK, 1)
    r2 = substream(1, TAG_KICK, 2)
    x2_first = substream(1, TAG_KICK, 2).random(4)
    r1.random(4)
    assert np.array_equal(r2.random(4), x2_first)
