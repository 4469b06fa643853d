import os

import numpy as np
import pytest

from neokd import network
from neokd import tensor as T
from neokd.errors import ConfigError, DimensionError, FormatError
from neokd.network import FlopsProfile, NetworkSpec, count_flops


def small_spec(seed=0):
    return NetworkSpec(6, ((5,), (4, 4), (3,)), 3, seed=seed)


def zero_net(spec):
    net = network.init(spec)
    for p in net.parameters():
        p.data[...] = 0
    return net


def test_spec_validation():
    with pytest.raises(ConfigError):
        NetworkSpec(0, ((4,),), 3)
    with pytest.raises(ConfigError):
        NetworkSpec(4, (), 3)
    with pytest.raises(ConfigError):
        NetworkSpec(4, ((4,),), 1)
    with pytest.raises(ConfigError):
        NetworkSpec(4, ((),), 3)


def test_forward_shapes_and_upto():
    net = network.init(small_spec())
    x = np.random.default_rng(0).uniform(0, 1, (7, 6)).astype(np.float32)
    out = net.forward(x)
    assert [z.shape for z in out] == [(7, 3)] * 3
    assert len(net.forward(x, upto=2)) == 2
    with pytest.raises(DimensionError):
        net.forward(np.zeros((2, 5), np.float32))


def test_zero_weight_net_uniform():
    net = zero_net(small_spec())
    for z in net.forward(np.random.default_rng(0).uniform(0, 1, (4, 6))):
        np.testing.assert_array_equal(z.data, 0)
        np.testing.assert_allclose(T.softmax(z).data, 1 / 3)


def test_single_exit_net():
    net = network.init(NetworkSpec(4, ((8,),), 2))
    assert len(net.forward(np.zeros((1, 4), np.float32))) == 1


def test_classifier_perturbation_changes_only_its_exit():
    net = network.init(small_spec())
    x = np.random.default_rng(1).uniform(0, 1, (5, 6)).astype(np.float32)
    before = [z.data.copy() for z in net.forward(x)]
    net.params["exit3.weight"].data[...] += 1.0
    net.params["exit3.bias"].data[0] += 1.0
    after = [z.data for z in net.forward(x)]
    np.testing.assert_array_equal(before[0], after[0])
    np.testing.assert_array_equal(before[1], after[1])
    assert np.any(before[2] != after[2])


@pytest.mark.parametrize("exit_number", [1, 2, 3])
def test_exit_locality_of_gradients(exit_number):
    net = network.init(small_spec())
    x = np.random.default_rng(2).uniform(0, 1, (5, 6)).astype(np.float32)
    z = net.forward(x)[exit_number - 1]
    T.backward(T.cross_entropy(z, [0, 1, 2, 0, 1]))
    for name, p in net.named_parameters():
        block = int(name[5]) if name.startswith("block") else None
        allowed = (block is not None and block <= exit_number) or name.startswith(f"exit{exit_number}.")
        if not allowed:
            np.testing.assert_array_equal(p.grad, 0, err_msg=name)


def test_init_deterministic():
    a, b = network.init(small_spec(3)), network.init(small_spec(3))
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n
    c = network.init(small_spec(4))
    assert a.params["block1.layer1.weight"].data.tobytes() != c.params["block1.layer1.weight"].data.tobytes()


def test_init_weight_mean_near_zero():
    net = network.init(NetworkSpec(100, ((100,),), 2, seed=0))
    w = net.params["block1.layer1.weight"].data.astype(np.float64)
    limit = np.sqrt(6 / 200)
    sigma = limit / np.sqrt(3)  # std of U(-a, a)
    assert abs(w.mean()) < 3 * sigma / np.sqrt(w.size)
    assert np.all(net.params["block1.layer1.bias"].data == 0)


def test_flops_single_block_one_exit():
    # every block holds at least one layer, so the smallest net is block 4->2 plus classifier 2->2
    assert count_flops(NetworkSpec(4, ((2,),), 2))[1] == 2 * 4 * 2 + 2 * 2 * 2


def test_flops_two_identical_blocks():
    spec = NetworkSpec(8, ((8,), (8,)), 3)
    f = count_flops(spec)
    block, clf = 2 * 8 * 8, 2 * 8 * 3
    assert f[1] == block + clf
    assert f[2] == 2 * block + clf


def test_flops_hand_count():
    spec = small_spec()
    f = count_flops(spec)
    b1, b2, b3 = 2 * 6 * 5, 2 * 5 * 4 + 2 * 4 * 4, 2 * 4 * 3
    c1, c2, c3 = 2 * 5 * 3, 2 * 4 * 3, 2 * 3 * 3
    assert f.cumulative == (b1 + c1, b1 + b2 + c2, b1 + b2 + b3 + c3)


def test_flops_profile_must_increase():
    with pytest.raises(ConfigError):
        FlopsProfile((10, 10))


def test_save_load_roundtrip_and_size(tmp_path):
    net = network.init(small_spec(5))
    path = tmp_path / "m.mxnn"
    network.save(net, path)
    back = network.load(path)
    assert back.spec == net.spec
    for (n, p), (m, q) in zip(net.named_parameters(), back.named_parameters()):
        assert n == m and p.data.tobytes() == q.data.tobytes()
    spec_json = net.spec.to_json().encode()
    expected = 4 + 2 + 4 + len(spec_json)
    for name, p in net.named_parameters():
        expected += 4 + len(name.encode()) + 1 + 4 * p.data.ndim + 4 * p.data.size
    assert os.path.getsize(path) == expected
    assert open(path, "rb").read() == network.to_bytes(back)


def test_load_rejects_corruption(tmp_path):
    net = network.init(small_spec())
    raw = network.to_bytes(net)
    cases = {
        "magic": b"XXNN" + raw[4:],
        "version": raw[:4] + b"\x02\x00" + raw[6:],
        "truncated": raw[:-3],
        "trailing": raw + b"\x00",
    }
    for label, payload in cases.items():
        p = tmp_path / f"{label}.mxnn"
        p.write_bytes(payload)
        with pytest.raises(FormatError) as info:
            network.load(p)
        assert "offset" in str(info.value), label


def test_frozen_view_shares_storage_without_grad():
    net = network.init(small_spec())
    fz = net.frozen()
    net.params["exit1.bias"].data[0] = 5.0
    assert fz.params["exit1.bias"].data[0] == 5.0
    out = fz.forward(np.zeros((1, 6), np.float32))
    assert all(z._node is None for z in out)
