import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from kaldex.ld import LDBlock, LDConfig, LinearDeformableConv, OffsetPredictor, ld_forward, rigid_conv


def _double(module):
    return module.double()


@pytest.mark.parametrize("orientation", ["horizontal", "vertical"])
def test_zero_offsets_equal_rigid_conv_bitwise(orientation):
    torch.manual_seed(0)
    branch = _double(LinearDeformableConv(3, 4, orientation))
    x = torch.randn(2, 3, 12, 12, dtype=torch.float64)
    with torch.no_grad():
        out, field = branch(x, return_offsets=True)
        ref = rigid_conv(x, branch.conv.weight, branch.conv.bias, orientation)
    assert torch.count_nonzero(field.smoothed) == 0
    assert torch.equal(out, ref)


@pytest.mark.parametrize("orientation", ["horizontal", "vertical"])
def test_rigid_reference_matches_library_conv(orientation):
    torch.manual_seed(1)
    conv = LinearDeformableConv(3, 4, orientation).double().conv
    x = torch.randn(2, 3, 12, 12, dtype=torch.float64)
    pad = (4, 4, 0, 0) if orientation == "horizontal" else (0, 0, 4, 4)
    lib = torch.nn.functional.conv2d(torch.nn.functional.pad(x, pad, mode="replicate"),
                                     conv.weight, conv.bias)
    np.testing.assert_allclose(rigid_conv(x, conv.weight, conv.bias, orientation).detach().numpy(),
                               lib.detach().numpy(), atol=1e-13)


def test_offsets_bounded_by_extent():
    pred = _double(OffsetPredictor(2, 9, 0.01, offset_extent=2.0))
    torch.nn.init.normal_(pred.conv.weight, std=50.0)
    field = pred(torch.randn(1, 2, 6, 6, dtype=torch.float64))
    assert field.raw.abs().max() <= 2.0
    # smoothed arm coordinate is a gain-weighted sum of bounded raw offsets
    bound = 2.0 * sum(1 / (i + 0.01) for i in range(1, 5))
    assert field.smoothed.abs().max() <= bound + 1e-12


@settings(max_examples=15, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), c_in=st.integers(1, 4), mult=st.integers(1, 3))
def test_shape_preserved(h, w, c_in, mult):
    assume(h * w > 1)  # instance norm needs more than one pixel
    block = LDBlock(LDConfig(c_in, 3 * mult))
    out = ld_forward(block, torch.randn(2, c_in, h, w))
    assert out.shape == (2, 3 * mult, h, w)


def test_config_and_input_errors():
    with pytest.raises(ValueError):
        LDConfig(2, 6, kernel_length=8)
    with pytest.raises(ValueError):
        LDConfig(2, 4)
    with pytest.raises(ValueError):
        LDConfig(2, 6, r=0)
    block = LDBlock(LDConfig(2, 6))
    with pytest.raises(ValueError):
        ld_forward(block, torch.randn(1, 3, 5, 5))
    with pytest.raises(ValueError):
        ld_forward(block, torch.randn(2, 5, 5))
    with pytest.raises(ValueError):
        LinearDeformableConv(2, 2, "diagonal")


def _perturbed_block(seed=0):
    torch.manual_seed(seed)
    block = _double(LDBlock(LDConfig(2, 3, kernel_length=5)))
    for branch in (block.horizontal, block.vertical):
        torch.nn.init.normal_(branch.offsets.conv.weight, std=0.3)
        torch.nn.init.normal_(branch.offsets.conv.bias, std=0.3)
    return block


def test_ld_forward_gradient_wrt_input(fd_error):
    block = _perturbed_block()
    x = torch.randn(2, 2, 12, 12, dtype=torch.float64, requires_grad=True)
    assert fd_error(lambda t: ld_forward(block, t), [x]) <= 1e-4


def test_ld_forward_gradient_wrt_offset_weights(fd_error):
    block = _perturbed_block(1)
    x = torch.randn(1, 2, 8, 8, dtype=torch.float64)
    w = block.horizontal.offsets.conv.weight
    wv = block.vertical.offsets.conv.weight
    assert fd_error(lambda a, b: ld_forward(block, x), [w, wv]) <= 1e-4


def test_deformation_changes_output():
    block = _perturbed_block()
    x = torch.randn(1, 2, 10, 10, dtype=torch.float64)
    deformed = ld_forward(block, x)
    for branch in (block.horizontal, block.vertical):
        torch.nn.init.zeros_(branch.offsets.conv.weight)
        torch.nn.init.zeros_(branch.offsets.conv.bias)
    assert not torch.allclose(deformed, ld_forward(block, x))
