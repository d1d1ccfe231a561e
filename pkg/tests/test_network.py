import json
import struct

import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error
from micronets import MembraneMicroNet, random_trsg_net
from snn_forge.autodiff import Tape
from snn_forge.checkpoint import MAGIC, load_checkpoint, read_manifest, save_checkpoint
from snn_forge.errors import CheckpointError, ShapeError
from snn_forge.network import LIF, ConversionError, Linear, Network, convert_for_inference, mlp_net, small_net
from snn_forge.surrogate import SurrogateConfig
from snn_forge.training import SGD, cosine_lr, loss_classification, loss_sparsity


@pytest.mark.parametrize("reset_mode", ["soft", "hard"])
def test_micro_net_gradients_match_finite_differences(reset_mode):
    net = MembraneMicroNet(reset_mode)
    assert net.n_params() <= 500
    tape, loss = net.loss()
    assert net.spikes > 0
    tape.backward(loss)
    for p in net.parameters():
        num = numeric_grad(lambda: float(net.loss()[1].value), p)
        assert rel_error(p.grad, num) <= 1e-5


class TestStructure:
    def test_small_net_output_shape(self):
        net = small_net(timesteps=3)
        fp = net.forward_window(np.zeros((2, 1, 8, 8)))
        assert fp.logits.shape == (3, 2, 10)
        assert len(fp.records) == 3

    def test_lif_has_two_params_and_one_buffer(self):
        net = mlp_net([4, 5, 2])
        lif = net.lif_layers[0]
        assert len(lif.parameters()) == 2
        assert list(lif.buffers()) == ["mu"]
        assert "1.lif.mu" in net.named_buffers()

    def test_running_mean_is_not_a_parameter(self):
        net = mlp_net([4, 5, 2])
        fp = net.forward_window(np.ones((3, 4)))
        fp.tape.backward(loss_classification(fp.logits, [0, 1, 0]))
        assert all(not name.endswith("mu") for name in net.named_parameters())

    def test_wrong_timesteps_rejected(self):
        net = mlp_net([4, 5, 2], timesteps=4)
        with pytest.raises(ShapeError):
            net.forward_window(np.zeros((3, 2, 4)), static=False)

    def test_same_seed_same_logits(self):
        x = np.random.default_rng(0).normal(size=(4, 1, 8, 8))
        a, b = small_net(seed=3).predict(x), small_net(seed=3).predict(x)
        np.testing.assert_array_equal(a, b)

    def test_mp_init_updates_only_in_training(self):
        net = mlp_net([4, 8, 2], weight_scale=4.0)
        x = np.random.default_rng(1).normal(size=(16, 4))
        net.eval().predict(x)
        assert net.lif_layers[0].mp.mu == 0.0
        net.train().forward_window(x).tape.release()
        assert net.lif_layers[0].mp.mu != 0.0

    def test_monitored_pairs(self):
        pairs = small_net().monitored_layers()
        assert [w.kind for w, _ in pairs] == ["conv2d", "conv2d", "linear"]


class TestConversion:
    @pytest.mark.parametrize("seed", range(20))
    def test_logits_preserved_and_spikes_binary(self, seed):
        net, x = random_trsg_net(seed)
        net.eval()
        want = net.predict(x)
        conv = convert_for_inference(net)
        np.testing.assert_allclose(conv.predict(x), want, rtol=0, atol=1e-10)
        fp = conv.forward_window(x, record=True, requires_grad=False)
        for rec in fp.records:
            assert set(np.unique(np.stack(rec.S))) <= {0.0, 1.0}
        assert all(not lif.scale_output and lif.mp.frozen for lif in conv.lif_layers)

    def test_original_untouched(self):
        net, x = random_trsg_net(1)
        before = {k: p.data.copy() for k, p in net.named_parameters().items()}
        convert_for_inference(net)
        for k, p in net.named_parameters().items():
            np.testing.assert_array_equal(p.data, before[k])

    def test_spiking_output_layer_rejected(self):
        net = Network([Linear(3, 2), LIF()])
        with pytest.raises(ConversionError):
            convert_for_inference(net)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net, x = random_trsg_net(3)
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path, config={"seed": 3})
        loaded, manifest = load_checkpoint(path)
        assert manifest["config"] == {"seed": 3}
        for name, p in net.named_parameters().items():
            got = loaded.named_parameters()[name].data
            assert got.shape == p.data.shape and got.dtype == p.data.dtype
            np.testing.assert_array_equal(got, p.data)
        for a, b in zip(net.lif_layers, loaded.lif_layers):
            assert a.mp.mu == b.mp.mu
        np.testing.assert_array_equal(loaded.eval().predict(x), net.eval().predict(x))

    def test_header(self, tmp_path):
        path = tmp_path / "net.ckpt"
        save_checkpoint(mlp_net([3, 4, 2]), path)
        raw = path.read_bytes()
        assert raw[:8] == MAGIC
        manifest, _ = read_manifest(raw)
        assert manifest["format_version"] == 1

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\0" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_unknown_version(self, tmp_path):
        path = tmp_path / "net.ckpt"
        save_checkpoint(mlp_net([3, 4, 2]), path)
        manifest, start = read_manifest(path.read_bytes())
        manifest["format_version"] = 99
        blob = json.dumps(manifest).encode()
        patched = MAGIC + struct.pack("<I", len(blob)) + blob + path.read_bytes()[start:]
        with pytest.raises(CheckpointError, match="99"):
            read_manifest(patched)

    def test_truncated(self, tmp_path):
        path = tmp_path / "net.ckpt"
        save_checkpoint(mlp_net([3, 4, 2]), path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestOptimisation:
    def test_weight_decay_shrinks_with_zero_gradient(self):
        net = mlp_net([3, 4, 2])
        lin = net.layers[0]
        before = lin.weight.data.copy()
        net.zero_grad()
        SGD([lin.weight], lr=0.1, momentum=0.0, weight_decay=0.01).step()
        np.testing.assert_allclose(lin.weight.data, before * (1 - 0.1 * 0.01), rtol=1e-15)

    def test_momentum_accumulates(self):
        net = mlp_net([3, 4, 2])
        p = net.layers[0].weight
        start = p.data.copy()
        opt = SGD([p], lr=1.0, momentum=0.5)
        for _ in range(2):
            p.grad = np.ones_like(p.data)
            opt.step()
        np.testing.assert_allclose(p.data, start - 1.0 - 1.5)

    def test_frozen_params_skipped(self):
        lif = LIF()
        assert SGD(lif.parameters(), lr=0.1).params == []

    def test_cosine_schedule(self):
        assert cosine_lr(0, 10, 0.1) == pytest.approx(0.1)
        assert cosine_lr(5, 10, 0.1) == pytest.approx(0.05)
        assert cosine_lr(10, 10, 0.1) == pytest.approx(0.0)

    def test_sparsity_loss(self):
        assert loss_sparsity([0.3, 0.1], 0.1, 2.0) == pytest.approx(2.0 * 0.04)
        assert loss_sparsity([0.3], 0.1, 0.0) == 0.0

    def test_cross_entropy_uniform_logits(self):
        tape = Tape()
        loss = loss_classification(tape.constant(np.zeros((4, 3, 5))), [0, 1, 4])
        assert float(loss.value) == pytest.approx(np.log(5))

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            loss_classification(Tape().constant(np.zeros((2, 3, 5))), [0, 5, 1])

    def test_as_mode_training_emits_binary_output(self):
        net = mlp_net([4, 6, 2], sg=SurrogateConfig(scale_mode="AS"), vthr=0.5, weight_scale=4.0)
        x = np.random.default_rng(2).normal(size=(6, 4))
        net.forward_window(x, record=True)
        assert set(np.unique(np.stack(net.lif_layers[0].last.S))) <= {0.0, 1.0}
