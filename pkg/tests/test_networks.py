import json

import numpy as np
import pytest

from moerl import tensor as T
from moerl.harness import parse_spec, shipped_specs
from moerl.networks import (Baseline, EncoderConfig, ExpertVariant, NetworkConfig, SoftMoE,
                            Top1MoE, build_network, load_checkpoint, param_count, q_forward,
                            save_checkpoint)


def all_variants():
    ps = {"tokenization": "PerSamp"}
    return {
        "baseline": NetworkConfig(),
        "baseline-x4": NetworkConfig(variant=Baseline(4)),
        "softmoe-4": NetworkConfig(variant=SoftMoE(4)),
        "softmoe-2-p2-l2": NetworkConfig(variant=SoftMoE(2, slots_per_expert=2, l2_normalize=True)),
        "softmoe-8-div": NetworkConfig(variant=SoftMoE(8, divide_expert_dim=True)),
        "softmoe-4-perfeat": NetworkConfig(variant=SoftMoE(4, tokenization="PerFeat")),
        "softmoe-4-randphi": NetworkConfig(variant=SoftMoE(4, frozen_random_phi=True)),
        "top1-4": NetworkConfig(variant=Top1MoE(4)),
        "top1-2-persamp": NetworkConfig(variant=Top1MoE(2, tokenization="PerSamp")),
        "big-2": NetworkConfig(variant=SoftMoE(2, **ps), expert_variant=ExpertVariant("Big")),
        "all-2-norm": NetworkConfig(variant=SoftMoE(2, **ps), expert_variant=ExpertVariant("All", True)),
    }


def naive_baseline_q(net, obs):
    p = net.params
    x = obs
    for i, (_, k, s) in enumerate(net.config.encoder.layers):
        w, b = p[f"enc.{i}.w"], p[f"enc.{i}.b"]
        B, h, wd, c = x.shape
        oh, ow = (h - k) // s + 1, (wd - k) // s + 1
        out = np.zeros((B, oh, ow, w.shape[3]))
        for bi in range(B):
            for r in range(oh):
                for q in range(ow):
                    patch = x[bi, r * s:r * s + k, q * s:q * s + k, :]
                    out[bi, r, q] = np.tensordot(patch, w, axes=3)
        x = np.maximum(out + b, 0)
    pen = np.maximum(x.reshape(len(x), -1) @ p["pen.w"] + p["pen.b"], 0)
    return pen @ p["head.w"] + p["head.b"]


def test_baseline_matches_layerwise_reference():
    net = build_network(NetworkConfig(), 0)
    obs = np.random.default_rng(0).uniform(size=(32, 10, 10, 1))
    q, _ = q_forward(net, obs)
    np.testing.assert_allclose(q.data, naive_baseline_q(net, obs), atol=1e-12)


def test_softmoe_network_head_input_is_flattened_tokens():
    net = build_network(NetworkConfig(variant=SoftMoE(4)), 1)
    _, taps = q_forward(net, np.zeros((3, 10, 10, 1)))
    assert taps.features.shape == (3, 36 * 16)
    assert net.params["head.w"].shape == (576, 3)
    assert taps.penultimate.shape == (3, 4 * 64)


def test_expert_hidden_rules():
    assert NetworkConfig(variant=Baseline(2)).expert_hidden() == 128
    assert NetworkConfig(variant=SoftMoE(8)).expert_hidden() == 64
    assert NetworkConfig(variant=SoftMoE(8, divide_expert_dim=True)).expert_hidden() == 8
    assert NetworkConfig(variant=Top1MoE(4, divide_expert_dim=True)).expert_hidden() == 16


@pytest.mark.parametrize("name,cfg", list(all_variants().items()))
def test_param_count_matches_tree_and_backward(name, cfg):
    net = build_network(cfg, 0)
    tree = sum(v.size for k, v in net.params.items() if k not in net.frozen)
    leaves = net.leaves()
    q, _ = q_forward(net, np.random.default_rng(1).uniform(size=(2, *cfg.obs_shape)), leaves)
    visited = T.trainable_leaves(T.sum_(q))
    assert param_count(cfg) == tree == sum(t.size for t in visited)


def test_param_count_known_values():
    assert param_count(NetworkConfig()) == 38371
    assert param_count(NetworkConfig(variant=SoftMoE(4))) == 11555
    assert param_count(NetworkConfig(variant=Top1MoE(4))) == 11555


@pytest.mark.parametrize("name,cfg", list(all_variants().items()))
def test_zero_observation_zero_bias_is_finite(name, cfg):
    net = build_network(cfg, 2)
    net.params["head.b" if "head.b" in net.params else "big.0.head.b"][:] = 0
    q, _ = q_forward(net, np.zeros((2, *cfg.obs_shape)))
    assert q.shape == (2, 3) and np.all(np.isfinite(q.data))


def test_build_is_deterministic_and_seed_sensitive():
    cfg = NetworkConfig(variant=SoftMoE(2))
    a, b, c = build_network(cfg, 5), build_network(cfg, 5), build_network(cfg, 6)
    assert list(a.params) == list(b.params)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["moe.phi"], c.params["moe.phi"])


def test_frozen_phi_marked():
    net = build_network(NetworkConfig(variant=SoftMoE(4, frozen_random_phi=True)), 0)
    assert net.frozen == {"moe.phi"}
    assert "moe.phi" not in net.trainable_names()
    assert not net.leaves()["moe.phi"].requires_grad


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        NetworkConfig(variant=SoftMoE(2), expert_variant=ExpertVariant("Big"))
    with pytest.raises(ValueError):
        NetworkConfig(variant=Top1MoE(2, tokenization="PerSamp"), expert_variant=ExpertVariant("All"))
    with pytest.raises(ValueError):
        NetworkConfig(encoder=EncoderConfig(((8, 11, 1),)))
    with pytest.raises(ValueError):
        Baseline(0)


def test_observation_shape_checked():
    with pytest.raises(ValueError):
        q_forward(build_network(NetworkConfig(), 0), np.zeros((1, 9, 10, 1)))


def test_config_dict_roundtrip_and_hash():
    for cfg in all_variants().values():
        again = NetworkConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg and again.config_hash() == cfg.config_hash()
    hashes = {cfg.config_hash() for cfg in all_variants().values()}
    assert len(hashes) == len(all_variants())


@pytest.mark.parametrize("name", ["baseline", "softmoe-4-randphi", "top1-4", "big-2"])
def test_checkpoint_roundtrip(tmp_path, name):
    cfg = all_variants()[name]
    net = build_network(cfg, 3)
    save_checkpoint(net, tmp_path / "n.ckpt")
    back = load_checkpoint(tmp_path / "n.ckpt")
    assert back.config == cfg and back.frozen == net.frozen and back.seed == 3
    assert list(back.params) == list(net.params)
    for k in net.params:
        np.testing.assert_array_equal(back.params[k], net.params[k])
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"nope" * 10)
    with pytest.raises(ValueError):
        load_checkpoint(p)
    net = build_network(NetworkConfig(), 0)
    save_checkpoint(net, p)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_single_observation_batched_implicitly():
    net = build_network(NetworkConfig(), 0)
    q, _ = q_forward(net, np.zeros((10, 10, 1)))
    assert q.shape == (1, 3)


def test_top1_penultimate_silences_unrouted_experts():
    net = build_network(NetworkConfig(variant=Top1MoE(4)), 0)
    _, taps = q_forward(net, np.random.default_rng(0).uniform(size=(2, 10, 10, 1)))
    acts = taps.penultimate.reshape(2 * 36, 4, 64)
    assign = taps.routing.assignment.reshape(-1)
    for t, e in enumerate(assign):
        others = [i for i in range(4) if i != e]
        assert np.all(acts[t, others] == 0)


def test_shipped_grid_configs_all_build():
    for path in shipped_specs().values():
        for cell in parse_spec(path).cells:
            assert param_count(cell.network) > 0
