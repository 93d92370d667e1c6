import numpy as np
import pytest

from ftn import functional as F
from ftn.decoder import (FeaturePyramidTransformer, FPTConfig, fuse_branches, micro_decoder,
                         predict_labels, top_down_merge)
from ftn.encoder import FeaturePyramid
from ftn.errors import ConfigError, LayoutError, ParameterError
from ftn.model import loss
from ftn.nn import Linear
from ftn.tensor import Tensor


def pyramid(rng, dims=(8, 16, 32, 64), size=32, batch=1):
    return FeaturePyramid([Tensor(rng.normal(size=(batch, size // s, size // s, c)))
                           for s, c in zip((4, 8, 16, 32), dims)])


def test_default_config():
    cfg = FPTConfig()
    assert cfg.embed_dim == 512 and cfg.fusion == "sum"
    assert cfg.depths == {32: 1, 16: 1, 8: 1} and cfg.sr_ratios == {32: 2, 16: 2, 8: 2}
    assert FPTConfig.from_dict(cfg.to_dict()) == cfg


def test_branch_plan():
    cfg = FPTConfig(depths={32: 1, 16: 2, 8: 1})
    assert cfg.branch_plan(0) == []
    assert cfg.branch_plan(1) == [("block", 8), ("up", 8)]
    assert cfg.branch_plan(3) == [("block", 32), ("up", 32), ("block", 16), ("block", 16), ("up", 16),
                                  ("block", 8), ("up", 8)]


def test_config_validation():
    with pytest.raises(ConfigError):
        FPTConfig(fusion="max")
    with pytest.raises(ConfigError):
        FPTConfig(depths={32: 1, 16: 1})
    with pytest.raises(ConfigError):
        FPTConfig(embed_dim=100)


def test_top_down_merge_oracle(rng):
    coarse, fine = rng.normal(size=(1, 2, 2, 3)), rng.normal(size=(1, 4, 4, 3))
    out = top_down_merge(Tensor(coarse), Tensor(fine)).data
    np.testing.assert_allclose(out, F.bilinear_upsample(Tensor(coarse), 2).data + fine)
    with pytest.raises(LayoutError):
        top_down_merge(Tensor(fine), Tensor(coarse))


def test_merge_wiring(rng):
    dec = FeaturePyramidTransformer(micro_decoder(), np.random.default_rng(0)).to_dtype(np.float64)
    pyr = pyramid(rng)
    merged = dec.merge(pyr)
    lats = [lat(f).data for lat, f in zip(dec.laterals, pyr.features)]
    np.testing.assert_allclose(merged[3].data, lats[3])
    expect = lats[3]
    for i in (2, 1, 0):
        expect = F.bilinear_upsample(Tensor(expect), 2).data + lats[i]
        np.testing.assert_allclose(merged[i].data, expect, atol=1e-12)


def test_sum_and_concat_fusion(rng):
    branches = [Tensor(rng.normal(size=(1, 2, 2, 3))) for _ in range(4)]
    np.testing.assert_allclose(fuse_branches(branches).data, sum(b.data for b in branches))
    proj = Linear(12, 3, np.random.default_rng(0)).to_dtype(np.float64)
    cat = np.concatenate([b.data for b in branches], -1)
    np.testing.assert_allclose(fuse_branches(branches, "concat", proj).data,
                               cat @ proj.weight.data + proj.bias.data, atol=1e-12)
    with pytest.raises(ParameterError):
        fuse_branches(branches, "concat")
    with pytest.raises(LayoutError):
        fuse_branches(branches + [Tensor(np.zeros((1, 4, 4, 3)))])


@pytest.mark.parametrize("fusion", ["sum", "concat"])
def test_decoder_output_shapes(fusion, rng):
    dec = FeaturePyramidTransformer(micro_decoder(fusion=fusion, num_classes=3), np.random.default_rng(0))
    out = dec(pyramid(rng, batch=2), with_aux=True)
    assert out.logits.shape == (2, 32, 32, 3)
    assert [b.shape for b in out.branches] == [(2, 8, 8, 8)] * 4
    assert [a.shape for a in out.aux_logits] == [(2, 32, 32, 3)] * 4
    assert dec(pyramid(rng, batch=2)).aux_logits is None


def test_inference_parameters_exclude_aux():
    dec = FeaturePyramidTransformer(micro_decoder(), np.random.default_rng(0))
    names = [n for n, _ in dec.inference_parameters()]
    assert names and not any(n.startswith("aux_heads") for n in names)
    assert len(names) < len(list(dec.named_parameters()))


def test_decoder_checks_geometry(rng):
    dec = FeaturePyramidTransformer(micro_decoder(sr_ratios={32: 2, 16: 2, 8: 2}), np.random.default_rng(0))
    with pytest.raises(LayoutError, match="stride 32"):
        dec(pyramid(rng))


def test_argmax_ties_go_to_lowest_index():
    logits = np.array([[[[1.0, 1.0, 0.0], [0.0, 2.0, 2.0], [3.0, 3.0, 3.0]]]])
    np.testing.assert_array_equal(predict_labels(logits), [[[0, 1, 0]]])


def test_aux_loss_arithmetic(rng):
    labels = rng.integers(0, 3, size=(1, 4, 4))
    main = Tensor(rng.normal(size=(1, 4, 4, 3)))
    aux = [Tensor(rng.normal(size=(1, 4, 4, 3))) for _ in range(4)]
    total = loss(main, labels, aux).item()
    expect = F.cross_entropy(main, labels).item() + 0.1 * sum(F.cross_entropy(a, labels).item() for a in aux)
    assert abs(total - expect) < 1e-12
    assert abs(loss(main, labels).item() - F.cross_entropy(main, labels).item()) < 1e-15
