import math

import pytest
import torch

from platediff.errors import DegenerateInput, EmptyBatch
from platediff.losses import LossWeights, info_nce, l1_regression, total_loss


def test_l1_examples():
    assert float(l1_regression(torch.tensor([1.0, 2.0]), torch.tensor([1.0, 2.0]))) == 0.0
    assert float(l1_regression(torch.tensor([0.0, 0.0]), torch.tensor([2.0, -4.0]))) == 3.0
    assert float(l1_regression(torch.tensor([-5.0]), torch.tensor([5.0]))) == 10.0


def test_l1_subgradient_at_zero_is_zero():
    p = torch.tensor([1.0, 3.0, 0.0], requires_grad=True)
    l1_regression(p, torch.tensor([1.0, 2.0, 4.0])).backward()
    assert p.grad.tolist() == pytest.approx([0.0, 1 / 3, -1 / 3])


def test_l1_empty_batch():
    with pytest.raises(EmptyBatch):
        l1_regression(torch.zeros(0), torch.zeros(0))


def test_info_nce_single_pair_is_zero():
    assert float(info_nce(torch.randn(1, 5), torch.randn(1, 5))) == 0.0


def test_info_nce_separated_pairs_vanish():
    e = torch.eye(4, dtype=torch.float64)
    assert float(info_nce(e, e, temperature=1e-3)) < 1e-12


def test_info_nce_uniform_similarity_is_ln2():
    z = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    assert float(info_nce(z, z.clone())) == pytest.approx(math.log(2), abs=1e-12)


def test_info_nce_matches_brute_force():
    g = torch.Generator().manual_seed(0)
    z, t = torch.randn(5, 3, generator=g, dtype=torch.float64), torch.randn(5, 3, generator=g, dtype=torch.float64)
    tau = 0.3
    zn = [r / r.norm() for r in z]
    tn = [r / r.norm() for r in t]
    s = [[float(zn[i] @ tn[j]) / tau for j in range(5)] for i in range(5)]
    row = sum(-s[i][i] + math.log(sum(math.exp(x) for x in s[i])) for i in range(5)) / 5
    col = sum(-s[j][j] + math.log(sum(math.exp(s[i][j]) for i in range(5))) for j in range(5)) / 5
    assert float(info_nce(z, t, tau)) == pytest.approx((row + col) / 2, abs=1e-12)


def test_info_nce_zero_norm():
    with pytest.raises(DegenerateInput):
        info_nce(torch.zeros(2, 3), torch.ones(2, 3))


def test_total_loss_weighting():
    w = LossWeights()
    assert (w.lambda_reg, w.lambda_cont) == (1.0, 0.2)
    assert float(total_loss(3.0, 5.0, w).total) == pytest.approx(4.0)
    assert float(total_loss(3.0, 5.0, LossWeights(lambda_cont=0.0)).total) == 3.0
    assert float(total_loss(0.0, 0.0, w).total) == 0.0
    assert total_loss(torch.tensor(3.0), torch.tensor(5.0), w).as_floats() == pytest.approx(
        {"reg": 3.0, "cont": 5.0, "total": 4.0}
    )


@pytest.mark.parametrize("kw", [dict(lambda_reg=-1), dict(lambda_reg=0, lambda_cont=0), dict(temperature=0)])
def test_loss_weight_validation(kw):
    with pytest.raises(ValueError):
        LossWeights(**kw)
