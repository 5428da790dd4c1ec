import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from recalib import ad
from recalib import numkit as nk
from recalib.errors import ParameterError, ShapeError
from recalib.numkit import Adam, Linear, Tape, Tensor, grad_check, make_rng


def sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


# --- attention ------------------------------------------------------------

def test_single_step_weight_is_one(rng):
    attn = ad.AfrAttention(make_rng(0), 3, 4, 2, 5, 5)
    w = ad.afr_weights(rng.normal(size=(1, 3)), rng.normal(size=(1, 4)), attn).value
    assert w.tolist() == [1.0]


class ConstantScores:
    def scores(self, F_dep, F_d):
        return Tensor(np.full(F_dep.shape[:-1], 0.37))


def test_equal_scores_uniform(rng):
    w = ad.afr_weights(rng.normal(size=(6, 3)), rng.normal(size=(6, 4)), ConstantScores()).value
    assert np.allclose(w, 1 / 6, atol=1e-15)


def test_weights_hand_oracle():
    rng = make_rng(1, "hand")
    attn = ad.AfrAttention(make_rng(1), 2, 3, 2, 2, 2)
    F_dep, F_d = rng.normal(size=(3, 2)), rng.normal(size=(3, 3))

    def mlp(m, x):
        h = np.maximum(x @ m.fc1.weight.value + m.fc1.bias.value, 0)
        return h @ m.fc2.weight.value + m.fc2.bias.value

    scores = []
    for t in range(3):
        a, b = mlp(attn.mlp1, F_dep[t]), mlp(attn.mlp2, F_d[t])
        diff = F_dep[t] - F_d[t] @ attn.d_to_dep.weight.value
        gate = sigmoid(diff @ attn.gate.weight.value[:, 0] + attn.gate.bias.value[0])
        scores.append(float(a @ b) / np.sqrt(2) * gate)
    e = np.exp(np.array(scores) - max(scores))
    got = ad.afr_weights(F_dep, F_d, attn).value
    assert np.max(np.abs(got - e / e.sum())) < 1e-10


def test_weights_sum_to_one_and_shift_invariant(rng):
    attn = ad.AfrAttention(make_rng(2), 3, 4, 2, 5, 5)
    F_dep, F_d = rng.normal(size=(4, 9, 3)), rng.normal(size=(4, 9, 4))
    w = ad.afr_weights(F_dep, F_d, attn).value
    assert np.max(np.abs(w.sum(-1) - 1)) < 1e-9
    s = attn.scores(F_dep, F_d).value
    assert np.allclose(nk.softmax(s + 11.0, axis=-1).value, w, atol=1e-15)


def test_weights_guards(rng):
    attn = ad.AfrAttention(make_rng(3), 3, 4, 2, 5, 5)
    with pytest.raises(ParameterError):
        ad.afr_weights(np.zeros((0, 3)), np.zeros((0, 4)), attn)
    with pytest.raises(ShapeError):
        ad.afr_weights(np.zeros((5, 3)), np.zeros((4, 4)), attn)


def test_attention_blocks_gradient_into_depression_stream(rng):
    attn = ad.AfrAttention(make_rng(4), 3, 4, 2, 5, 5)
    F_dep = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    F_d = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    with Tape() as tape:
        loss = nk.reduce_sum(nk.square(ad.refine(F_dep, ad.afr_weights(F_dep, F_d, attn))))
    g_dep, g_d = tape.gradient(loss, [F_dep, F_d])
    assert not np.any(g_d) and np.any(g_dep)


def test_refine_examples(rng):
    F = rng.normal(size=(4, 3))
    assert np.allclose(ad.refine(F, np.full(4, 0.25)).value, F / 4, atol=1e-16)
    out = ad.refine(F, np.eye(4)[2]).value
    assert np.array_equal(out[2], F[2]) and not np.any(np.delete(out, 2, axis=0))
    w = rng.uniform(size=4)
    loop = np.array([[F[t, j] * w[t] for j in range(3)] for t in range(4)])
    assert np.array_equal(ad.refine(F, w).value, loop)
    with pytest.raises(ShapeError):
        ad.refine(F, np.ones(3))


# --- GRU ----------------------------------------------------------------------

def test_zero_gru_stays_at_zero(rng):
    layer = ad.GruLayer(make_rng(0), 3, 4, zero=True)
    assert not np.any(ad.gru_forward(rng.normal(size=(5, 3)), layer).value)


def test_one_unit_hand_recurrence():
    layer = ad.GruLayer(make_rng(0), 1, 1, zero=True)
    layer.W_z.value[:] = 0.5
    layer.b_z.value[:] = 0.1
    layer.W_r.value[:] = -0.3
    layer.W_h.value[:] = 2.0
    layer.b_h.value[:] = -0.2
    x = 0.8
    z, c = sigmoid(0.5 * x + 0.1), np.tanh(2.0 * x - 0.2)
    assert ad.gru_forward(np.array([[x]]), layer).value[0, 0] == pytest.approx(z * c, abs=1e-15)


def test_fused_matches_reference(rng):
    layer = ad.GruLayer(make_rng(5), 3, 4)
    x = rng.normal(size=(2, 6, 3))
    assert np.max(np.abs(ad.gru_forward(x, layer).value - ad.gru_reference(x, layer).value)) < 1e-13
    assert np.max(np.abs(ad.gru_forward(x[0], layer).value - ad.gru_reference(x[0], layer).value)) < 1e-13


def test_gru_gradients():
    rng = make_rng(6, "gru")
    layer = ad.GruLayer(make_rng(6), 2, 2)
    for p in layer.weights():
        p.value[:] = rng.normal(size=p.shape)
    x = Tensor(rng.normal(size=(2, 3, 2)), requires_grad=True)
    w = rng.normal(size=(2, 3, 2))
    assert grad_check(lambda: nk.reduce_sum(nk.mul(ad.gru_forward(x, layer), w)), [x] + layer.weights()) < 1e-4


def test_gru_width_check():
    with pytest.raises(ShapeError):
        ad.gru_forward(np.ones((3, 5)), ad.GruLayer(make_rng(0), 3, 2))


# --- distillation -------------------------------------------------------------

def test_distill_identical_is_zero(rng):
    t = rng.normal(size=(5, 4))
    assert all(v.value == 0.0 for v in ad.distill_losses(t, t.copy()))


def test_distill_kl_toy():
    p = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    q = p[::-1]
    want = float(np.sum(p * np.log(p / q)))
    L_dist, L_mse, L_total = ad.distill_losses(np.array([[2.0, 0.0]]), np.array([[0.0, 2.0]]), tau=2.0)
    assert L_dist.value == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(0.46212, abs=1e-5)
    assert L_mse.value == 8.0 and L_total.value == pytest.approx(want + 4.0, abs=1e-12)


def test_distill_vanishes_with_temperature(rng):
    t, s = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    vals = [ad.distill_losses(t, s, tau=tau)[0].value for tau in (2, 8, 32, 128)]
    assert all(a > b for a, b in zip(vals, vals[1:])) and vals[-1] < 1e-3


def test_distill_projects_student(rng):
    proj = Linear(make_rng(0), 2, 4)
    t, s = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 2))
    L_dist, L_mse, L_total = ad.distill_losses(t, s, proj)
    assert L_total.value == L_dist.value + 0.5 * L_mse.value
    resid = proj(s).value - t
    assert L_mse.value == pytest.approx(np.mean((resid ** 2).sum(axis=(1, 2))), rel=1e-12)
    with pytest.raises(ShapeError):
        ad.distill_losses(t, s)


def test_distill_gradients():
    rng = make_rng(7, "dist")
    t = rng.normal(size=(3, 4))
    s = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    proj = Linear(make_rng(7), 2, 4)
    assert grad_check(lambda: ad.distill_losses(t, s, proj)[2], [s] + proj.parameters()) < 1e-4


def test_teacher_is_frozen_and_detached(rng):
    stack = ad.GruStack(make_rng(8), 3, 5, 2, 4, 2)
    for p in stack.teacher_parameters():
        p.requires_grad = False
    x = Tensor(rng.normal(size=(2, 6, 3)), requires_grad=True)
    before = [p.value.copy() for p in stack.teacher_parameters()]
    student_params = stack.student.parameters() + stack.student_to_teacher.parameters()
    opt = Adam(stack.parameters(), lr=0.1)
    with Tape() as tape:
        loss = ad.distill_losses(stack.teach(x), stack.learn(x), stack.student_to_teacher)[2]
    grads = tape.gradient(loss, stack.parameters() + [x])
    opt.step(grads[:-1])
    target = stack.teach(x)
    assert not target.requires_grad
    assert all(np.array_equal(a, p.value) for a, p in zip(before, stack.teacher_parameters()))
    assert any(np.any(g) for g in tape.gradient(loss, student_params))
    # the input gradient comes from the student alone
    with Tape() as tape2:
        only_teacher = nk.reduce_sum(stack.teach(x))
    assert not np.any(tape2.gradient(only_teacher, [x])[0])


# --- fusion and classification ----------------------------------------------

def test_fuse_examples():
    assert np.array_equal(ad.fuse([[1.0, 1.0]], [[9.0, 9.0]], None, 0.0).value, [[1.0, 1.0]])
    assert np.array_equal(ad.fuse([[1.0, 1.0]], [[2.0, 0.0]], None, 0.5).value, [[2.0, 1.0]])
    F = np.array([[0.3, -2.0]])
    assert not np.any(ad.fuse(F, -F, None, 1.0).value)
    with pytest.raises(ShapeError):
        ad.fuse(np.ones((2, 3)), np.ones((2, 2)), None)


def test_classify_examples(rng):
    head = Linear(make_rng(0), 3, 1, zero=True)
    assert np.all(ad.classify(rng.normal(size=(2, 4, 3)), head).value == 0.5)
    head.bias.value[:] = 50.0
    assert np.all(ad.classify(rng.normal(size=(2, 4, 3)), head).value > 1 - 1e-12)


def test_classify_pools_over_time(rng):
    head = Linear(make_rng(1), 3, 1)
    F = rng.normal(size=(1, 5, 3))
    want = F[0].mean(axis=0) @ head.weight.value[:, 0] + head.bias.value[0]
    assert ad.classify_logit(F, head).value[0] == pytest.approx(want, abs=1e-14)


def test_bce_gradients():
    rng = make_rng(9, "bce")
    head = Linear(make_rng(9), 3, 1)
    F = Tensor(rng.normal(size=(4, 5, 3)), requires_grad=True)
    y = np.array([1.0, 0.0, 0.0, 1.0])
    assert grad_check(lambda: ad.bce_with_logits(ad.classify_logit(F, head), y), [F] + head.parameters()) < 1e-4


@given(st.floats(-500, 500), st.integers(0, 1))
def test_bce_stable(logit, y):
    v = ad.bce_with_logits(Tensor(np.array([logit])), [y]).value
    assert np.isfinite(v) and v >= 0
    # -log sigmoid(+-logit) written as a softplus
    assert v == pytest.approx(np.logaddexp(0.0, logit if y == 0 else -logit), rel=1e-12, abs=1e-300)
