import numpy as np
import pytest

from promptcl import autodiff as ad
from promptcl import gmm
from promptcl import losses as ls
from promptcl.rng import Rng


def test_ce_stage1_two_equidistant_classes():
    # both keys at the same angle from z: uniform posterior, loss = ln 2
    keys = ad.constant(np.array([[1.0, 0.0], [0.0, 1.0]], np.float32))
    z = np.array([[1.0, 1.0]], np.float32) / np.sqrt(2)
    loss = ls.ce_stage1(keys, z, [0], tau=1.0)
    assert abs(loss.item() - np.log(2)) < 1e-6


def test_ce_stage1_hand_softmax_oracle():
    # z equals the true key, the other key orthogonal, tau=1:
    # loss = -ln(e / (e + 1)) ~= 0.3133
    keys = ad.constant(np.eye(2, dtype=np.float32))
    z = np.array([[1.0, 0.0]], np.float32)
    loss = ls.ce_stage1(keys, z, [0], tau=1.0)
    assert abs(loss.item() - (-np.log(np.e / (np.e + 1)))) < 1e-6


def test_ce_stage1_small_tau_limit():
    keys = ad.constant(np.eye(2, dtype=np.float32))
    z = np.array([[1.0, 0.0]], np.float32)
    loss = ls.ce_stage1(keys, z, [0], tau=1e-3)
    assert loss.item() < 1e-6


def test_ce_stage1_posteriors_sum_to_one():
    rng = Rng(1)
    keys = ad.constant(rng.normal((5, 8)))
    z = rng.normal((6, 8))
    logits = (z @ keys.data.T) / 0.05
    post = ad.softmax(ad.constant(logits))
    np.testing.assert_allclose(post.data.sum(axis=1), np.ones(6), atol=1e-6)


def test_ce_stage1_label_outside_denominator():
    keys = ad.constant(np.eye(2, dtype=np.float32))
    with pytest.raises(ls.LossError):
        ls.ce_stage1(keys, np.ones((1, 2), np.float32), [4], tau=1.0)


def test_ce_stage2_fresh_head_is_ln_n():
    heads = ls.ClassifierHeads(d_prime=6)
    heads.add_task(0, [0, 1, 2, 3, 4])
    w, b = heads.heads[0]
    feats = Rng(2).normal((7, 6))
    loss = ls.ce_stage2(ad.constant(w), ad.constant(b), feats, [0, 1, 2, 3, 4, 0, 1])
    assert abs(loss.item() - np.log(5)) < 1e-6


def test_ce_stage2_dominant_logit():
    w = np.zeros((4, 3), np.float32)
    w[0, 1] = 20.0
    b = np.zeros(3, np.float32)
    feats = np.zeros((2, 4), np.float32)
    feats[:, 0] = 1.0
    loss = ls.ce_stage2(ad.constant(w), ad.constant(b), feats, [1, 1])
    assert loss.item() < 0.01


def test_ce_stage2_duplicate_task_head_rejected():
    heads = ls.ClassifierHeads(d_prime=4)
    heads.add_task(0, [0, 1])
    with pytest.raises(ls.LossError):
        heads.add_task(0, [2, 3])


def test_ortho_first_cases():
    assert ls.ortho_first([ad.Tensor([1.0, 0.0])], []).item() == 0.0
    cur = [ad.Tensor([0.0, 1.0], requires_grad=True)]
    past = [np.array([1.0, 0.0], np.float32)]
    assert abs(ls.ortho_first(cur, past).item()) < 1e-6
    cur = [ad.Tensor([0.6, 0.8], requires_grad=True)]
    loss = ls.ortho_first(cur, past)
    assert abs(loss.item() - 0.6) < 1e-6
    loss.backward()
    assert cur[0].grad is not None


def test_ortho_first_raw_mode_signed():
    cur = [ad.Tensor([-0.6, 0.8])]
    past = [np.array([1.0, 0.0], np.float32)]
    assert abs(ls.ortho_first(cur, past, raw=True).item() + 0.6) < 1e-6


def test_ortho_second_cases():
    L, dp = 2, 4
    zero_q = [ad.Tensor(np.zeros((L, dp), np.float32), requires_grad=True)]
    past = [Rng(3).normal((L, dp))]
    assert abs(ls.ortho_second(zero_q, past).item()) < 1e-6
    assert ls.ortho_second([ad.Tensor(np.ones((L, dp)))], []).item() == 0.0

    # per-layer hand values 0.6 and 0.2 -> average 0.4
    cur_q = np.zeros((2, 2), np.float32)
    cur_q[0] = [0.6, 0.8]
    cur_q[1] = [0.2, np.sqrt(1 - 0.04)]
    past_q = np.zeros((2, 2), np.float32)
    past_q[0] = [1.0, 0.0]
    past_q[1] = [1.0, 0.0]
    loss = ls.ortho_second([ad.Tensor(cur_q)], [past_q])
    assert abs(loss.item() - 0.4) < 1e-5


def point_mass_bank(means):
    bank = {}
    for cid, mu in means.items():
        mu = np.asarray(mu, np.float64)[None, :]
        bank[cid] = gmm.MoG(weights=np.array([1.0]), means=mu,
                            covs=np.full((1, mu.shape[1]), 1e-12))
    return bank


def test_gr_loss_first_single_class_is_zero():
    bank = point_mass_bank({0: [1.0, 0.0]})
    keys = ad.constant(np.array([[1.0, 0.0]], np.float32))
    loss = ls.gr_loss_first(keys, bank, [0], n=16, tau=1.0, rng=Rng(4))
    assert abs(loss.item()) < 1e-6


def test_gr_loss_first_two_orthogonal_point_masses():
    bank = point_mass_bank({0: [1.0, 0.0], 1: [0.0, 1.0]})
    keys = ad.constant(np.eye(2, dtype=np.float32))
    loss = ls.gr_loss_first(keys, bank, [0, 1], n=64, tau=1.0, rng=Rng(5))
    assert abs(loss.item() - 0.3133) < 1e-3


def test_gr_loss_first_missing_mog():
    keys = ad.constant(np.eye(2, dtype=np.float32))
    with pytest.raises(ls.LossError):
        ls.gr_loss_first(keys, {}, [0], n=4, tau=1.0, rng=Rng(6))


def test_gr_loss_second_single_task_zero_head():
    bank = point_mass_bank({0: [1, 0, 0, 0.0], 1: [0, 1, 0, 0.0], 2: [0, 0, 1, 0.0]})
    w = ad.constant(np.zeros((4, 3), np.float32))
    b = ad.constant(np.zeros(3, np.float32))
    loss = ls.gr_loss_second([(w, b)], [3], bank, [0, 1, 2], n=8, rng=Rng(7))
    assert abs(loss.item() - np.log(3)) < 1e-6


def test_gr_loss_second_confident_heads():
    bank = point_mass_bank({0: [1.0, 0.0], 1: [0.0, 1.0]})
    w = np.zeros((2, 2), np.float32)
    w[0, 0] = 10.0
    w[1, 1] = 10.0
    loss = ls.gr_loss_second([(ad.constant(w), ad.constant(np.zeros(2, np.float32)))],
                             [2], bank, [0, 1], n=8, rng=Rng(8))
    assert loss.item() < 1e-3


def test_gr_loss_second_trains_all_heads_and_logit_width():
    # three tasks of 2 classes each: logits are 6 wide, theta_1 still gets grads
    bank = point_mass_bank({c: np.eye(4)[c % 4] for c in range(6)})
    params = []
    for t in range(3):
        w = ad.Tensor(np.zeros((4, 2), np.float32), requires_grad=True)
        b = ad.Tensor(np.zeros(2, np.float32), requires_grad=True)
        params.append((w, b))
    loss = ls.gr_loss_second(params, [2, 2, 2], bank, list(range(6)), n=4, rng=Rng(9))
    loss.backward()
    assert params[0][0].grad is not None  # earliest head updated during replay
    assert all(w.grad is not None for w, _ in params)


def test_losses_nonnegative_and_finite():
    rng = Rng(10)
    keys = ad.constant(rng.normal((4, 8)))
    z = rng.normal((5, 8))
    labels = [int(i) for i in rng.integers(0, 4, size=5)]
    for tau in (1.0, 0.05):
        v = ls.ce_stage1(keys, z, labels, tau).item()
        assert np.isfinite(v) and v >= 0.0


def test_heads_checkpoint_round_trip(tmp_path):
    heads = ls.ClassifierHeads(d_prime=4)
    heads.add_task(0, [0, 1])
    heads.add_task(1, [2, 3, 4])
    heads.heads[1][0][:] = Rng(11).normal((4, 3))
    path = tmp_path / "heads.bin"
    ls.save_heads(path, heads)
    back = ls.load_heads(path)
    assert back.task_ids() == [0, 1]
    assert back.all_classes() == [0, 1, 2, 3, 4]
    np.testing.assert_array_equal(back.heads[1][0], heads.heads[1][0])
