import numpy as np
import pytest
import torch

from av2tsam.adapter_injection import AdapterStack, inject, make_prompt_tensor
from av2tsam.encoders import descriptor_from_config, make_suite
from av2tsam.errors import DimensionError
from av2tsam.fusion import ProjectionParams, build_prompt
from helpers import make_audio, make_frame


@pytest.fixture(scope="module")
def setup(base_cfg):
    suite = make_suite(base_cfg)
    d = suite.descriptor
    gen = torch.Generator().manual_seed(1)
    params = ProjectionParams(
        d_a=d.d_a, d_v=d.d_v, d_s=8, d_text=d.d_text, generator=gen
    )
    return suite, d, params


def _prompt(suite, params, seed=0, index=1):
    a = suite.encode_audio(make_audio(sample_rate=1600, freq=200.0 + seed, index=index))
    v = suite.encode_image(make_frame(size=16, seed=seed, index=index))
    return build_prompt(a, v, params)


def test_adapters_initialize_to_exact_zero(setup):
    suite, d, _ = setup
    stack = AdapterStack(d, d_in=8)
    for j in stack.layer_selection:
        linear = stack.maps[str(j)]
        assert torch.equal(linear.weight, torch.zeros_like(linear.weight))
        assert torch.equal(linear.bias, torch.zeros_like(linear.bias))


def test_selection_validation(setup):
    _, d, _ = setup
    with pytest.raises(ValueError):
        AdapterStack(d, d_in=8, layer_selection=[0, d.num_layers])
    with pytest.raises(ValueError):
        AdapterStack(d, d_in=8, layer_selection=[1, 1])
    with pytest.raises(ValueError):
        AdapterStack(d, d_in=8, tap="middle")
    partial = AdapterStack(d, d_in=8, layer_selection=[2, 0])
    assert partial.layer_selection == (0, 2)


def test_prompt_tensor_shape_and_spatial_constancy(setup):
    suite, d, params = setup
    stack = AdapterStack(d, d_in=8)
    with torch.no_grad():  # move off zero so the output is nontrivial
        for m in stack.maps.values():
            m.weight.normal_(0, 0.3, generator=torch.Generator().manual_seed(2))
    prompt = _prompt(suite, params)
    p = make_prompt_tensor(prompt, layer=1, spatial=(3, d.num_positions), stack=stack)
    assert p.shape == (3, d.num_positions, d.channels[1])
    # constant along the spatial axis, exactly
    assert bool((p == p[:, :1, :]).all())
    assert torch.equal(p.var(dim=1, unbiased=False), torch.zeros_like(p.var(dim=1, unbiased=False)))


def test_per_frame_prompts_vary_over_frames(setup):
    suite, d, params = setup
    stack = AdapterStack(d, d_in=8)
    with torch.no_grad():
        for m in stack.maps.values():
            m.weight.normal_(0, 0.3, generator=torch.Generator().manual_seed(3))
    prompts = [_prompt(suite, params, seed=s, index=s + 1) for s in range(2)]
    p = make_prompt_tensor(prompts, layer=0, spatial=(2, d.num_positions), stack=stack)
    assert p.shape == (2, d.num_positions, d.channels[0])
    assert not torch.equal(p[0], p[1])
    assert bool((p == p[:, :1, :]).all())
    with pytest.raises(DimensionError):
        make_prompt_tensor(prompts, layer=0, spatial=(3, d.num_positions), stack=stack)


def test_unselected_layer_rejected(setup):
    suite, d, params = setup
    stack = AdapterStack(d, d_in=8, layer_selection=[0, 1])
    prompt = _prompt(suite, params)
    with pytest.raises(DimensionError, match="no adapter"):
        make_prompt_tensor(prompt, layer=3, spatial=(1, d.num_positions), stack=stack)


def test_tap_selects_the_prompt_vector(setup):
    suite, d, params = setup
    prompt = _prompt(suite, params)
    fused_stack = AdapterStack(d, d_in=8, tap="fused")
    text_stack = AdapterStack(d, d_in=d.d_text, tap="text_space")
    assert torch.equal(fused_stack.tap_vector(prompt), prompt.fused)
    assert torch.equal(text_stack.tap_vector(prompt), prompt.text_space)
    wrong = AdapterStack(d, d_in=5, tap="fused")
    with pytest.raises(DimensionError):
        wrong.tap_vector(prompt)


def test_zero_initialized_injection_is_identity(setup):
    suite, d, params = setup
    stack = AdapterStack(d, d_in=8)
    frames = [make_frame(size=16, index=i, seed=i) for i in (1, 2)]
    prompts = [_prompt(suite, params, seed=s, index=s + 1) for s in range(2)]
    base = suite.encode_backbone(frames)
    injected = inject(frames, prompts, stack, suite)
    for x, y in zip(base.layer_outputs, injected.layer_outputs):
        assert torch.equal(x, y)


def test_trained_adapters_change_the_backbone_output(setup):
    suite, d, params = setup
    stack = AdapterStack(d, d_in=8)
    with torch.no_grad():
        stack.maps["0"].bias.fill_(0.05)
    frames = [make_frame(size=16, index=1, seed=1)]
    prompt = _prompt(suite, params)
    base = suite.encode_backbone(frames)
    moved = inject(frames, prompt, stack, suite)
    assert not torch.equal(moved.layer_outputs[0], base.layer_outputs[0])
    # downstream layers shift too: injection feeds forward
    assert not torch.equal(moved.last, base.last)


def test_partial_selection_skips_other_layers(setup):
    suite, d, params = setup
    stack = AdapterStack(d, d_in=8, layer_selection=[2])
    with torch.no_grad():
        stack.maps["2"].bias.fill_(0.1)
    frames = [make_frame(size=16, index=1, seed=5)]
    prompt = _prompt(suite, params)
    base = suite.encode_backbone(frames)
    moved = inject(frames, prompt, stack, suite)
    for j in (0, 1):
        assert torch.equal(moved.layer_outputs[j], base.layer_outputs[j])
    assert not torch.equal(moved.layer_outputs[2], base.layer_outputs[2])


def test_gradients_reach_adapter_parameters(setup):
    suite, d, params = setup
    stack = AdapterStack(d, d_in=8)
    frames = [make_frame(size=16, index=1, seed=4)]
    prompt = _prompt(suite, params)
    feats = inject(frames, prompt, stack, suite)
    feats.last.sum().backward()
    for j in stack.layer_selection:
        linear = stack.maps[str(j)]
        assert linear.weight.grad is not None
        assert float(linear.weight.grad.abs().sum()) > 0
        assert float(linear.bias.grad.abs().sum()) > 0
