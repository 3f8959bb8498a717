import pytest
import torch

from oracles import check_gradients

from gcean.salm import (
    SALM,
    SALM_TERMS,
    FeatureConverter,
    SalmWeights,
    global_alignment_loss,
    gaze_prediction_loss,
    grad_reverse,
    margin_ranking_loss,
    salm_total,
)


def test_converter_identity_at_init():
    torch.manual_seed(0)
    conv = FeatureConverter(8)
    x = torch.zeros(5, 8)
    assert torch.equal(conv(x), x)
    y = torch.randn(64, 8)
    assert torch.equal(conv(y), y)  # zero-initialised output layer


def test_converter_shape_and_mismatch():
    conv = FeatureConverter(32)
    assert conv(torch.randn(64, 32)).shape == (64, 32)
    with pytest.raises(ValueError):
        conv(torch.randn(64, 16))


def test_converter_jvp_finite_difference():
    torch.manual_seed(1)
    conv = FeatureConverter(8).double()
    torch.nn.init.normal_(conv.fc2.weight, std=0.3)
    x = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    w = torch.randn(4, 8, dtype=torch.float64)
    params = [x] + list(conv.parameters())
    assert check_gradients(lambda: (conv(x) * w).sum(), params) < 1e-4


def test_grl_forward_identity_bitwise():
    x = torch.randn(6, 8)
    assert torch.equal(grad_reverse(x), x)


def test_grl_gradient_contract():
    torch.manual_seed(2)
    salm = SALM(8)
    torch.nn.init.normal_(salm.converter["frame"].fc2.weight, std=0.2)
    x = torch.randn(4, 8)

    def run(reverse):
        salm.zero_grad()
        h = salm.convert(x, "frame")
        h.retain_grad()
        out = salm.score(h, "frame", reverse=reverse)
        (out * torch.arange(1.0, 5.0)).sum().backward()
        conv = {n: p.grad.clone() for n, p in salm.converter["frame"].named_parameters()}
        disc = {n: p.grad.clone() for n, p in salm.scorer["frame"].named_parameters()}
        return out.detach(), h.grad.clone(), conv, disc

    o1, h1, c1, d1 = run(True)
    o0, h0, c0, d0 = run(False)
    assert torch.equal(o1, o0)
    assert torch.equal(h1, -h0)
    for n in c0:
        assert torch.equal(c1[n], -c0[n])
    for n in d0:
        assert torch.equal(d1[n], d0[n])


def test_margin_examples():
    s = torch.tensor([0.3, 0.6, 0.9])
    assert float(margin_ranking_loss(s, s, 0.75)) == pytest.approx(0.75)
    assert float(margin_ranking_loss(torch.tensor([1.0, 0.9]), torch.tensor([0.0, 0.1]), 0.75)) == 0.0
    val = margin_ranking_loss(torch.tensor([0.9, 0.2], dtype=torch.float64), torch.tensor([0.1, 0.8], dtype=torch.float64), 0.75)
    assert float(val) == pytest.approx(0.675, abs=1e-12)
    with pytest.raises(ValueError):
        margin_ranking_loss(torch.zeros(3), torch.zeros(4))


def test_margin_bounds():
    torch.manual_seed(3)
    for _ in range(50):
        a, b = torch.rand(10), torch.rand(10)
        v = float(margin_ranking_loss(a, b, 0.75))
        assert 0.0 <= v <= 1.75


def test_global_alignment_examples():
    a = torch.ones(5, 2)
    b = torch.zeros(7, 2)[:5]
    assert float(global_alignment_loss(a, b)) == pytest.approx(1.0)
    x = torch.randn(9, 4)
    assert float(global_alignment_loss(x, x)) == 0.0
    y = torch.randn(9, 4)
    perm = torch.randperm(9)
    assert float(global_alignment_loss(x[perm], y)) == pytest.approx(float(global_alignment_loss(x, y)), abs=1e-6)
    assert float(global_alignment_loss(x, y)) == pytest.approx(float(global_alignment_loss(y, x)), abs=1e-7)


def test_gaze_prediction_examples():
    t = torch.randn(6, 4)
    assert float(gaze_prediction_loss(t, t)) == 0.0
    assert float(gaze_prediction_loss(t + 1, t)) == pytest.approx(1.0, abs=1e-6)


def test_gaze_predictor_gradient():
    torch.manual_seed(4)
    salm = SALM(8).double()
    x = torch.randn(4, 8, dtype=torch.float64)
    g = torch.randn(4, 8, dtype=torch.float64)
    params = list(salm.gaze_predictor.parameters())
    assert check_gradients(lambda: gaze_prediction_loss(salm.predict_gaze(x), g), params) < 1e-4


def test_salm_losses_finite_difference_16x8():
    torch.manual_seed(5)
    a = torch.randn(16, 8, dtype=torch.float64, requires_grad=True)
    b = torch.randn(16, 8, dtype=torch.float64, requires_grad=True)
    assert check_gradients(lambda: global_alignment_loss(a, b), [a, b]) < 1e-3
    s = torch.rand(16, dtype=torch.float64, requires_grad=True)
    t = torch.rand(16, dtype=torch.float64, requires_grad=True)
    assert check_gradients(lambda: margin_ranking_loss(s, t, 0.75), [s, t]) < 1e-3


def _unit_terms(**over):
    terms = {k: torch.tensor(1.0) for k in SALM_TERMS}
    terms.update({k: torch.tensor(v) for k, v in over.items()})
    return terms


def test_salm_total_default_weights():
    obj, rep, bd = salm_total(_unit_terms(), SalmWeights())
    assert float(rep) == pytest.approx(5 - 0.25 + 5 - 0.25 + 1 + 1)
    assert float(obj) == pytest.approx(5 + 0.25 + 5 + 0.25 + 1 + 1)
    assert bd["L_SALM"] == pytest.approx(11.5)
    for k in SALM_TERMS:
        assert bd[k] == 1.0


def test_salm_total_zero_and_linearity():
    _, rep, _ = salm_total({k: torch.tensor(0.0) for k in SALM_TERMS}, SalmWeights())
    assert float(rep) == 0.0
    terms = _unit_terms(L_G=0.7)
    _, r1, b1 = salm_total(terms, SalmWeights())
    _, r2, b2 = salm_total(terms, SalmWeights(lambda_G=10.0))
    assert float(r2) - float(r1) == pytest.approx(b1["L_G_weighted"], abs=1e-6)
    for k in SALM_TERMS:
        if k != "L_G":
            assert b1[f"{k}_weighted"] == b2[f"{k}_weighted"]


def test_salm_total_missing_term():
    terms = _unit_terms()
    del terms["L_PG_T"]
    with pytest.raises(KeyError):
        salm_total(terms, SalmWeights())


def _batch():
    torch.manual_seed(6)
    salm = SALM(8)
    torch.nn.init.normal_(salm.converter["frame"].fc2.weight, std=0.2)
    return salm, torch.randn(12, 8), torch.randn(12, 8) + 0.5


def test_discriminator_step_lowers_ranking_loss():
    salm, xs, xt = _batch()
    opt = torch.optim.SGD(salm.scorer["frame"].parameters(), lr=1e-2)

    def loss():
        return margin_ranking_loss(salm.score(salm.convert(xs, "frame"), "frame"),
                                   salm.score(salm.convert(xt, "frame"), "frame"))

    before = loss()
    opt.zero_grad()
    before.backward()
    opt.step()
    assert float(loss().detach()) <= float(before.detach())


def test_converter_step_shrinks_score_gap():
    salm, xs, xt = _batch()
    opt = torch.optim.SGD(salm.converter["frame"].parameters(), lr=1e-2)

    def gap_and_loss():
        cs = salm.score(salm.convert(xs, "frame"), "frame")
        ct = salm.score(salm.convert(xt, "frame"), "frame")
        return float((cs.mean() - ct.mean()).detach()), margin_ranking_loss(cs, ct)

    gap0, loss = gap_and_loss()
    opt.zero_grad()
    loss.backward()
    opt.step()
    gap1, _ = gap_and_loss()
    assert gap1 <= gap0
