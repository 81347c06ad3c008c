import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backbone_fusion import objectives as O
from backbone_fusion import tensor as T
from backbone_fusion.tensor import ContractError, ShapeError, Tensor
from backbone_fusion.vocab import BOS_ID, EOS_ID, MASK_ID, PAD_ID, SPECIAL_IDS, VOCAB_SIZE

from conftest import leaf

EXACT = 1e-9


def sim_of(values, log_inv_temp=0.0):
    return O.SimilarityMatrix(Tensor(np.asarray(values, dtype=np.float64)), Tensor(np.asarray(log_inv_temp)))


# -- ITC ---------------------------------------------------------------------


@pytest.mark.parametrize("n", [2, 3, 8])
def test_itc_uniform_is_log_n(n):
    assert abs(O.itc_loss(sim_of(np.full((n, n), 0.3))).item() - math.log(n)) < EXACT


def test_itc_closed_forms():
    assert O.itc_loss(sim_of(np.where(np.eye(3), 20.0, -20.0))).item() < 1e-8
    # each row: -log(e / (e + 1)) = log(1 + e^-1)
    assert abs(O.itc_loss(sim_of([[1.0, 0.0], [0.0, 1.0]])).item() - math.log(1 + math.exp(-1))) < EXACT


def test_itc_temperature_scales_logits():
    s = np.array([[0.5, 0.1], [0.2, 0.4]])
    a = O.itc_loss(sim_of(s, math.log(3.0))).item()
    b = O.itc_loss(sim_of(3.0 * s)).item()
    assert abs(a - b) < EXACT


def test_itc_contract():
    with pytest.raises(ContractError):
        O.itc_loss(sim_of([[1.0]]))
    with pytest.raises(ContractError):
        O.itc_loss(sim_of(np.zeros((2, 3))))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.floats(-5, 5), st.integers(0, 10_000))
def test_itc_shift_invariance_and_diagonal_monotonicity(n, c, seed):
    s = np.random.default_rng(seed).standard_normal((n, n))
    base = O.itc_loss(sim_of(s)).item()
    assert abs(O.itc_loss(sim_of(s + c)).item() - base) < 1e-9
    up = s.copy()
    up[0, 0] += 0.5
    assert O.itc_loss(sim_of(up)).item() < base


def test_itc_gradients(rng):
    for _ in range(5):
        v = leaf(rng, 4, 4)
        t = Tensor(np.asarray(0.7), requires_grad=True)
        assert T.finite_diff_check(lambda x: O.itc_loss(O.SimilarityMatrix(x, t)), v) < 1e-3
        assert T.finite_diff_check(lambda x: O.itc_loss(O.SimilarityMatrix(v, x)), t) < 1e-3


# -- MLM ---------------------------------------------------------------------


def words(rng, shape):
    return rng.integers(len(SPECIAL_IDS), VOCAB_SIZE, size=shape)


def test_mask_rate_statistics():
    rng = np.random.default_rng(123)
    ids = words(rng, (1000, 1000))
    b = O.mask_tokens(ids, rng)
    assert 0.149 <= b.masked.mean() <= 0.151
    m = b.masked
    # split among masked positions: binomial bounds at about 4 sigma
    mask_share = (b.input_ids[m] == MASK_ID).mean()
    kept = (b.input_ids[m] == ids[m]).mean()
    assert abs(mask_share - 0.8) < 4 * math.sqrt(0.16 / m.sum())
    assert abs(kept - 0.1) < 4 * math.sqrt(0.09 / m.sum()) + 1.0 / VOCAB_SIZE
    assert np.array_equal(b.input_ids[~m], ids[~m])
    assert np.array_equal(b.labels, ids)


def test_mask_skips_special_tokens():
    ids = np.array([[BOS_ID, 9, 10, EOS_ID, PAD_ID, PAD_ID]] * 200)
    b = O.mask_tokens(ids, np.random.default_rng(0), rate=0.9)
    assert not b.masked[:, [0, 3, 4, 5]].any()
    assert b.masked[:, 1:3].mean() > 0.8
    assert not np.isin(b.input_ids[b.masked], [PAD_ID, BOS_ID, EOS_ID]).any()


def test_mask_rate_zero_and_determinism():
    ids = words(np.random.default_rng(0), (4, 9))
    z = O.mask_tokens(ids, np.random.default_rng(1), rate=0.0)
    assert z.num_masked == 0
    assert O.mlm_loss(Tensor(np.zeros((4, 9, VOCAB_SIZE))), z).item() == 0.0
    a = O.mask_tokens(ids, np.random.default_rng(5))
    b = O.mask_tokens(ids, np.random.default_rng(5))
    assert np.array_equal(a.input_ids, b.input_ids) and np.array_equal(a.masked, b.masked)


def test_mlm_closed_forms():
    labels = np.array([[4, 7, 9]])
    batch = O.MlmBatch(labels.copy(), labels, np.array([[True, False, True]]))
    assert abs(O.mlm_loss(Tensor(np.zeros((1, 3, VOCAB_SIZE))), batch).item() - math.log(VOCAB_SIZE)) < EXACT
    logits = np.zeros((1, 3, VOCAB_SIZE))
    logits[0, np.arange(3), labels[0]] = 20.0 + 20 * math.log(VOCAB_SIZE)
    assert O.mlm_loss(Tensor(logits), batch).item() < 1e-8
    two = O.MlmBatch(np.array([[0]]), np.array([[1]]), np.array([[True]]))
    assert abs(O.mlm_loss(Tensor([[[0.0, math.log(3.0)]]]), two).item() + math.log(0.75)) < EXACT
    with pytest.raises(ShapeError):
        O.mlm_loss(Tensor(np.zeros((1, 2, 5))), batch)


def test_cross_entropy_gradients(rng):
    for _ in range(5):
        x = leaf(rng, 3, 4, 6)
        t = rng.integers(0, 6, (3, 4))
        w = rng.random((3, 4))
        assert T.finite_diff_check(lambda a: O.cross_entropy(a, t, w), x) < 1e-3


# -- hard negatives / ITM ----------------------------------------------------


def test_two_items_force_the_other():
    rng = np.random.default_rng(0)
    for _ in range(20):
        neg_t, neg_i = O.sample_hard_negatives(sim_of(rng.standard_normal((2, 2))), rng)
        assert neg_t.tolist() == [1, 0] and neg_i.tolist() == [1, 0]


def test_negative_frequencies_follow_softmax():
    rng = np.random.default_rng(1)
    counts = np.zeros(3)
    for _ in range(10_000):
        counts[O.sample_hard_negatives(sim_of(np.zeros((3, 3))), rng)[0][0]] += 1
    assert counts[0] == 0
    assert abs(counts[1] / 1e4 - 0.5) < 0.02

    boosted = np.zeros((3, 3))
    boosted[0, 2] = 5.0
    hits = sum(O.sample_hard_negatives(sim_of(boosted), rng)[0][0] == 2 for _ in range(2000))
    # softmax odds e^5 : 1 give 0.9933
    assert hits / 2000 > 0.98


def test_negatives_respect_exclusions():
    rng = np.random.default_rng(2)
    ex = np.zeros((4, 4), bool)
    ex[0, 1] = ex[1, 0] = True
    for _ in range(300):
        nt, ni = O.sample_hard_negatives(sim_of(np.zeros((4, 4))), rng, ex)
        assert nt[0] != 1 and nt[1] != 0 and ni[0] != 1
        assert np.all(nt != np.arange(4)) and np.all(ni != np.arange(4))
    # a row with everything excluded still returns an off-diagonal index
    full = ~np.eye(3, dtype=bool)
    nt, _ = O.sample_hard_negatives(sim_of(np.zeros((3, 3))), rng, full)
    assert np.all(nt != np.arange(3))


def test_random_negatives_off_diagonal():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, b = O.random_negatives(5, rng)
        assert np.all(a != np.arange(5)) and np.all(b != np.arange(5))


def test_itm_closed_forms(rng):
    assert abs(O.itm_loss(Tensor([0.0, 0.0]), 1).item() - math.log(2)) < EXACT
    assert O.itm_loss(Tensor([[-10.0, 10.0], [10.0, -10.0]]), [1, 0]).item() < 1e-8
    x = leaf(rng, 4, 2)
    assert T.finite_diff_check(lambda a: O.itm_loss(a, [1, 0, 0, 1]), x) < 1e-3


# -- boxes -------------------------------------------------------------------


def test_giou_hand_geometry():
    assert abs(O.giou((0, 0, 1, 1), (1, 1, 2, 2)) - (-0.5)) < EXACT
    assert abs(O.giou((0, 0, 2, 2), (0, 0, 1, 1)) - 0.25) < EXACT
    assert abs(O.giou((0, 0, 3, 2), (0, 0, 3, 2)) - 1.0) < EXACT
    assert abs(O.giou_loss((0, 0, 1, 1), (1, 1, 2, 2)) - 1.5) < EXACT
    with pytest.raises(ContractError):
        O.giou((0, 0, 0, 1), (0, 0, 1, 1))


box_st = st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(0.5, 30), st.floats(0.5, 30)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3])
)


@settings(max_examples=200, deadline=None)
@given(box_st, box_st)
def test_giou_bounds_and_symmetry(a, b):
    g, i = O.giou(a, b), O.iou(a, b)
    assert -1 - 1e-12 <= g <= i + 1e-12 <= 1 + 2e-12
    assert abs(g - O.giou(b, a)) < 1e-12
    assert abs(O.iou_matrix(np.array([a]), np.array([b]))[0, 0] - i) < 1e-12


def test_giou_ltrb_matches_box_form_and_gradients(rng):
    loc = np.array([10.0, 10.0])
    pred = np.abs(rng.standard_normal((6, 4))) * 3 + 0.5
    tgt = np.abs(rng.standard_normal((6, 4))) * 3 + 0.5
    to_box = lambda d: (loc[0] - d[0], loc[1] - d[1], loc[0] + d[2], loc[1] + d[3])
    want = np.mean([O.giou_loss(to_box(p), to_box(t)) for p, t in zip(pred, tgt)])
    assert abs(O.giou_loss_ltrb(Tensor(pred), tgt).item() - want) < EXACT
    for _ in range(5):
        p = Tensor(np.abs(rng.standard_normal((5, 4))) + 0.5, requires_grad=True)
        t = np.abs(rng.standard_normal((5, 4))) + 0.5
        # avoid min/max ties, where the loss has a kink
        t = np.where(np.abs(p.data - t) < 0.05, t + 0.2, t)
        assert T.finite_diff_check(lambda a: O.giou_loss_ltrb(a, t), p) < 1e-3


def test_centerness_cases():
    assert abs(O.centerness((2, 2), (1, 1, 3, 3)) - 1.0) < EXACT
    # l=1, r=3, t=1, b=3
    assert abs(O.centerness((1, 1), (0, 0, 4, 4)) - 1 / 3) < EXACT
    assert O.centerness((0, 2), (0, 0, 4, 4)) == 0.0
    with pytest.raises(ContractError):
        O.centerness((5, 1), (0, 0, 4, 4))
    np.testing.assert_allclose(O.centerness_targets(np.array([[1.0, 1.0, 3.0, 3.0], [2, 2, 2, 2]])), [1 / 3, 1.0], atol=EXACT)


def test_centerness_bce_gradient(rng):
    t = rng.random((4, 3))
    for _ in range(5):
        x = leaf(rng, 4, 3)
        assert T.finite_diff_check(lambda a: O.binary_cross_entropy_logits(a, t), x) < 1e-3


# -- assignment --------------------------------------------------------------


def test_assignment_cases():
    levels = [(O.level_locations(8, 8), 8)]
    # box centered on the cell at (20, 20)
    a = O.assign_targets(levels, np.array([[16.0, 16.0, 24.0, 24.0]]), size_ranges=((0, 64),))
    cell = 2 * 8 + 2
    assert a.target[cell] == 0
    assert a.target[0] == -1 and a.target[-1] == -1
    # nested boxes over one location: the smaller wins
    nested = np.array([[0.0, 0.0, 40.0, 40.0], [16.0, 16.0, 24.0, 24.0]])
    b = O.assign_targets(levels, nested, size_ranges=((0, 64),))
    assert b.target[cell] == 1


def test_assignment_respects_radius_and_size_ranges():
    levels = [(O.level_locations(8, 8), 8), (O.level_locations(4, 16), 16)]
    big = np.array([[0.0, 0.0, 60.0, 60.0]])
    a = O.assign_targets(levels, big, radius=1.5, size_ranges=((0, 30), (30, 64)))
    assert not a.positive[:64].any() and a.positive[64:].any()
    loc = a.locations[a.positive]
    assert np.all(np.abs(loc - 30.0) <= 1.5 * 16)
    ltrb = a.ltrb(big)
    assert np.all(ltrb > 0)


# -- grounding focal loss -------------------------------------------------------


def test_focal_closed_forms():
    assert O.grounding_loss(Tensor([[20.0]]), np.array([[1.0]])).item() < 1e-8
    s = np.array([[1.0, -2.0], [0.5, 3.0]])
    pos = np.array([[1.0, 0.0], [0.0, 0.0]])
    want = O.focal_reference(1.0, True) + O.focal_reference(-2.0, False) + O.focal_reference(0.5, False) + O.focal_reference(3.0, False)
    assert abs(O.grounding_loss(Tensor(s), pos).item() - want) < EXACT
    # hand evaluation of the first term: p = sigmoid(1)
    p = 1 / (1 + math.exp(-1))
    assert abs(O.focal_reference(1.0, True) - 0.25 * (1 - p) ** 2 * -math.log(p)) < EXACT
    none = O.grounding_loss(Tensor(s), np.zeros((2, 2))).item()
    assert none > 0
    with pytest.raises(ShapeError):
        O.grounding_loss(Tensor(s), np.zeros((2, 3)))


def test_focal_gradients_and_token_mask(rng):
    pos = (rng.random((2, 5, 4)) < 0.3).astype(float)
    valid = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], bool)
    for _ in range(5):
        x = leaf(rng, 2, 5, 4)
        assert T.finite_diff_check(lambda a: O.grounding_loss(a, pos, valid), x) < 1e-3
    x = leaf(rng, 2, 5, 4)
    y = Tensor(x.data.copy())
    y.data[0, :, 3] += 7.0  # invalid tokens do not matter
    assert abs(O.grounding_loss(x, pos, valid).item() - O.grounding_loss(y, pos, valid).item()) < EXACT


def test_positive_token_map():
    m = O.positive_token_map(np.array([-1, 0, 1, 0]), [(1, 3), (4, 5)], 6)
    assert m.tolist() == [
        [0, 0, 0, 0, 0, 0],
        [0, 1, 1, 0, 0, 0],
        [0, 0, 0, 0, 1, 0],
        [0, 1, 1, 0, 0, 0],
    ]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_nonnegative_and_finite(seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((3, 3)) * 30
    vals = [
        O.itc_loss(sim_of(s)).item(),
        O.itm_loss(Tensor(rng.standard_normal((3, 2)) * 30), [1, 0, 1]).item(),
        O.grounding_loss(Tensor(s), (rng.random((3, 3)) < 0.5).astype(float)).item(),
        O.binary_cross_entropy_logits(Tensor(s), rng.random((3, 3))).item(),
    ]
    assert all(np.isfinite(v) and v >= -1e-12 for v in vals)
