import pytest
import torch

from kaldex.backbone import BackboneConfig, UNetPlusPlus, count_parameters, default_sites, nested_nodes


def test_nested_node_count():
    for depth in range(1, 6):
        assert len(nested_nodes(depth)) == depth * (depth + 1) // 2


def test_default_sites_skip_full_resolution():
    sites = default_sites(4)
    assert all(i >= 1 for i, _ in sites)
    assert set(sites) == {(i, j) for i, j in nested_nodes(4) if i >= 1}


def test_forward_shape_and_range():
    model = UNetPlusPlus(BackboneConfig(depth=2, base_width=3, patch_size=16))
    out = model(torch.randn(3, 1, 16, 16))
    assert out.shape == (3, 1, 16, 16)
    assert ((out > 0) & (out < 1)).all()


def test_head_bias_encodes_prior():
    model = UNetPlusPlus(BackboneConfig(depth=2, base_width=3, patch_size=16, head_prior=0.05))
    assert abs(torch.sigmoid(model.head.bias).item() - 0.05) < 1e-7


def test_baseline_shares_parameters_under_same_seed():
    torch.manual_seed(3)
    full = UNetPlusPlus(BackboneConfig(depth=2, base_width=3, patch_size=16))
    torch.manual_seed(3)
    base = UNetPlusPlus(BackboneConfig(depth=2, base_width=3, patch_size=16, ldca_sites=()))
    assert len(base.ldca) == 0 and len(full.ldca) > 0
    full_state = full.state_dict()
    for name, value in base.state_dict().items():
        assert torch.equal(value, full_state[name]), name
    assert count_parameters(full) > count_parameters(base)


def test_ldca_changes_output():
    torch.manual_seed(0)
    full = UNetPlusPlus(BackboneConfig(depth=2, base_width=3, patch_size=16))
    torch.manual_seed(0)
    base = UNetPlusPlus(BackboneConfig(depth=2, base_width=3, patch_size=16, ldca_sites=()))
    x = torch.randn(1, 1, 16, 16)
    assert not torch.allclose(full(x), base(x))


def test_config_errors():
    with pytest.raises(ValueError):
        BackboneConfig(depth=4, patch_size=40)
    with pytest.raises(ValueError):
        BackboneConfig(depth=2, patch_size=16, ldca_sites=((0, 0),))
    with pytest.raises(ValueError):
        BackboneConfig(head_prior=1.0)
    model = UNetPlusPlus(BackboneConfig(depth=2, base_width=3, patch_size=16))
    with pytest.raises(ValueError):
        model(torch.randn(1, 1, 18, 16))
    with pytest.raises(ValueError):
        model(torch.randn(1, 2, 16, 16))


def test_config_dict_round_trip():
    cfg = BackboneConfig(depth=3, base_width=9, patch_size=24, ldca_sites=((1, 1), (0, 2)))
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg


def test_all_sites_including_level_zero():
    sites = tuple(nested_nodes(2))
    model = UNetPlusPlus(BackboneConfig(depth=2, base_width=3, patch_size=16, ldca_sites=sites))
    assert len(model.ldca) == 3
    assert model(torch.randn(1, 1, 16, 16)).shape == (1, 1, 16, 16)
