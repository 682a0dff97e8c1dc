import numpy as np
import pytest

from gistlm.mask import (
    MaskError,
    blocks_cover,
    build_mask,
    mask_density,
    render_mask,
    sentence_block_table,
)
from gistlm.segment import annotate_causal, segment
from gistlm.vocab import build_vocab


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(["seed."], "byte", n_g=8)


def predicate_mask(a):
    """Independent brute-force evaluation of the attention predicate."""
    n = len(a)
    out = np.zeros((n, n), dtype=bool)
    for q in range(n):
        for k in range(n):
            out[q, k] = k <= q and (
                a.sent_idx[k] == a.sent_idx[q] or a.roles[k] > 0
            )
    return out


def random_annotated(rng, vocab, max_len=64):
    n = int(rng.integers(0, max_len))
    letters = "abcdefg .!?"
    text = "".join(rng.choice(list(letters), size=n))
    n_g = int(rng.choice([1, 2, 4, 8]))
    return segment(vocab.encode(text), vocab, n_g)


def test_figure_layout_two_sentences(vocab):
    # "ab. cd." with one gist per boundary:
    # positions a b . g c d . g  (space is a regular token)
    a = segment(vocab.encode("ab.cd."), vocab, 1)
    m = build_mask(a)
    assert m.n == 8
    g1, g2 = 3, 7
    # regular tokens of sentence 1 attend their own causal prefix plus g1
    for q in (4, 5, 6):
        for k in range(8):
            expect = (4 <= k <= q) or k == g1
            assert m.allowed[q, k] == expect
    # each gist sees its whole sentence plus earlier gists
    assert list(np.flatnonzero(m.allowed[g1])) == [0, 1, 2, 3]
    assert list(np.flatnonzero(m.allowed[g2])) == [3, 4, 5, 6, 7]
    # cross-sentence regular keys are invisible
    assert not m.allowed[4:, 0:3].any()


def test_single_sentence_is_full_causal(vocab):
    a = segment(vocab.encode("ab."), vocab, 2)
    m = build_mask(a)
    n = m.n
    assert np.array_equal(m.allowed, np.tril(np.ones((n, n), dtype=bool)))
    assert mask_density(m) == 1.0


def test_random_masks_match_brute_force(vocab):
    rng = np.random.default_rng(7)
    for _ in range(60):
        a = random_annotated(rng, vocab)
        if not len(a):
            continue
        m = build_mask(a)
        assert np.array_equal(m.allowed, predicate_mask(a))


def test_blocks_cover_exactly_and_disjoint(vocab):
    rng = np.random.default_rng(8)
    for _ in range(30):
        a = random_annotated(rng, vocab)
        m = build_mask(a)
        assert np.array_equal(blocks_cover(m), m.allowed)
        # disjointness: total block area equals number of allowed pairs
        area = sum((q1 - q0) * (k1 - k0) for (q0, q1), (k0, k1) in m.blocks)
        assert area == int(m.allowed.sum())


def test_density_many_sentences(vocab):
    # 100 sentences of 20 tokens (19 letters + "."), n_g=1
    text = "".join("abcdefghijabcdefghi." for _ in range(100))
    a = segment(vocab.encode(text), vocab, 1)
    m = build_mask(a)
    # independent count: per sentence a 21-token causal triangle plus
    # earlier-gist visibility for each of its 21 positions
    n = m.n
    assert n == 2100
    expected = 0
    for s in range(100):
        block = 21
        expected += block * (block + 1) // 2  # within-sentence causal
        expected += block * s  # each position sees s earlier gists
    assert int(m.allowed.sum()) == expected
    assert mask_density(m) == expected / (n * (n + 1) // 2)
    assert mask_density(m) < 0.1


def test_density_nonincreasing_in_sentence_count(vocab):
    # fixed total raw length, growing number of sentences
    densities = []
    for pieces in (1, 2, 4, 8):
        seg_len = 32 // pieces
        text = "".join("a" * (seg_len - 1) + "." for _ in range(pieces))
        a = segment(vocab.encode(text), vocab, 1)
        densities.append(mask_density(build_mask(a)))
    assert all(x >= y for x, y in zip(densities, densities[1:]))


def test_density_empty_errors(vocab):
    m = build_mask(segment([], vocab, 1))
    with pytest.raises(MaskError):
        mask_density(m)


def test_render_ascii_two_by_two():
    a = annotate_causal([1, 2])
    assert render_mask(build_mask(a), "ascii") == b"#.\n##"


def test_render_pgm_parses_under_p5_grammar(vocab):
    a = segment(vocab.encode("ab.cd."), vocab, 1)
    m = build_mask(a)
    data = render_mask(m, "pgm")
    header, rest = data.split(b"\n", 1)
    assert header == b"P5"
    dims, rest = rest.split(b"\n", 1)
    w, h = map(int, dims.split())
    maxval, pixels = rest.split(b"\n", 1)
    assert (w, h, int(maxval)) == (m.n, m.n, 255)
    img = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
    assert np.array_equal(img == 255, m.allowed)


def test_render_oversize_errors():
    a = annotate_causal(list(range(2)))
    m = build_mask(a)
    big = type(m)(n=5000, allowed=np.zeros((1, 1), dtype=bool), blocks=())
    with pytest.raises(MaskError, match="render limit"):
        render_mask(big, "ascii")


def test_gist_visibility_and_regular_invisibility(vocab):
    rng = np.random.default_rng(9)
    for _ in range(20):
        a = random_annotated(rng, vocab)
        if not len(a):
            continue
        m = build_mask(a)
        n = m.n
        tri = np.tril(np.ones((n, n), dtype=bool))
        assert not (m.allowed & ~tri).any()  # subset of causal
        assert m.allowed.diagonal().all()
        q = np.arange(n)[:, None]
        k = np.arange(n)[None, :]
        gist_k = (a.roles > 0)[None, :]
        assert m.allowed[(k <= q) & gist_k].all()  # gists visible once past
        cross_regular = (
            (a.sent_idx[None, :] < a.sent_idx[:, None]) & ~gist_k
        )
        assert not m.allowed[cross_regular].any()


def test_sentence_block_table(vocab):
    a = segment(vocab.encode("ab.cd."), vocab, 1)
    rows = sentence_block_table(a, build_mask(a))
    assert [r["sentence"] for r in rows] == [0, 1]
    assert rows[0] == {"sentence": 0, "start": 0, "stop": 4, "regular": 3, "gist": 1}
    assert rows[1]["regular"] == 3 and rows[1]["gist"] == 1
