import numpy as np
import pytest

from gsasv.checks import SMALL, model_error
from gsasv.errors import ConfigError, FormatError, ShapeError
from gsasv.model import GROUPS, VARIANTS, ModelConfig, build_model, load_checkpoint, save_checkpoint


def small(variant="BASE", **kw):
    return build_model(ModelConfig(variant=variant, **{**SMALL, **kw}))


def full(variant="BASE", **kw):
    if variant != "BASE":
        kw.setdefault("reg_target_dim", 160)
    if variant.endswith("ATTR"):
        kw.setdefault("attr_classes", 7)
    return build_model(ModelConfig(variant=variant, **kw))


def base_count(i=512, h=256, c=3):
    return (i * h + h) + 2 * h + (h * h + h) + 2 * h + (h * c + c)


class TestBuild:
    def test_base_parameter_count(self):
        assert base_count() == 198915
        assert full().num_parameters() == 198915

    def test_srelu_adds_one_scale_per_hidden_unit(self):
        assert full(use_srelu=True).num_parameters() == 198915 + 512

    def test_missing_reg_dim(self):
        with pytest.raises(ConfigError):
            build_model(ModelConfig(variant="SPS"))

    def test_missing_attr_classes(self):
        with pytest.raises(ConfigError):
            build_model(ModelConfig(variant="SPS-ATTR", reg_target_dim=160))

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            ModelConfig(variant="XPS")

    def test_same_seed_same_weights(self):
        a, b = full(seed=5), full(seed=5)
        for (n, x), (_, y) in zip(a.parameters().items(), b.parameters().items()):
            np.testing.assert_array_equal(x, y, err_msg=n)

    def test_hps_main_input_widened(self):
        m = full("HPS")
        assert m.main_layers[0].fc.W.shape == (256, 512 + 256)
        m = full("HPS", hps_feature="projection")
        assert m.main_layers[0].fc.W.shape == (256, 512 + 160)

    def test_sps_shares_hidden_stack(self):
        m = full("SPS")
        assert not m.reg_layers
        assert m.reg_head.W.shape == (160, 256)

    def test_reg_branch_depth_mirrors_main(self):
        assert len(full("HPS").reg_layers) == 2


class TestGroups:
    @pytest.mark.parametrize("variant", VARIANTS)
    @pytest.mark.parametrize("use_srelu", [False, True])
    def test_partition(self, variant, use_srelu):
        m = small(variant, use_srelu=use_srelu)
        groups = m.groups()
        names = [n for g in groups.values() for n in g]
        assert len(names) == len(set(names))
        assert set(names) == set(m.parameters())
        assert set(groups) <= set(GROUPS)
        sizes = sum(m.parameters()[n].size for n in names)
        assert sizes == m.num_parameters()

    def test_bn_selection_count(self):
        sel = full().select_params({"BN"})
        assert sum(a.size for a in sel.values()) == 1024

    def test_missing_srelu_group(self):
        with pytest.raises(ConfigError):
            full().select_params({"SRELU"})

    def test_unknown_group(self):
        with pytest.raises(ConfigError):
            full().select_params({"CONV"})

    def test_network_alias(self):
        m = small(use_srelu=True)
        assert m.select_params({"NETWORK"}).keys() == m.select_params({"FC", "BN"}).keys()

    def test_selection_shares_storage(self):
        m = small()
        sel = m.select_params({"FC"})
        sel["main.head.b"] += 1.0
        np.testing.assert_array_equal(m.head.b, sel["main.head.b"])


class TestForward:
    def test_zero_input_eval(self):
        out = full().forward(np.zeros((1, 512)), "eval")
        assert out.log_posteriors.shape == (1, 3)
        assert np.all(np.isfinite(out.log_posteriors))
        assert abs(np.exp(out.log_posteriors).sum() - 1) < 1e-9

    @pytest.mark.parametrize("variant", VARIANTS)
    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_posteriors_normalised(self, variant, mode, rng):
        out = small(variant).forward(rng.standard_normal((7, 6)) * 10, mode)
        np.testing.assert_allclose(np.exp(out.log_posteriors).sum(axis=1), 1.0, atol=1e-9)
        if variant != "BASE":
            assert out.reg_prediction.shape == (7, 3)
        if variant.endswith("ATTR"):
            assert out.attr_log_probs.shape == (7, 4)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_eval_is_pure(self, variant, rng):
        m = small(variant)
        before = {k: v.copy() for k, v in m.buffers().items()}
        x = rng.standard_normal((5, 6))
        a = m.forward(x, "eval").log_posteriors
        b = m.forward(x, "eval").log_posteriors
        np.testing.assert_array_equal(a, b)
        for k, v in m.buffers().items():
            np.testing.assert_array_equal(v, before[k])

    def test_train_mode_updates_running_stats(self, rng):
        m = small()
        m.forward(rng.standard_normal((5, 6)), "train")
        assert np.any(m.main_layers[0].bn.running_mean != 0)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            small().forward(np.zeros((2, 5)))

    def test_hps_inference_needs_only_asv_input(self, rng):
        # the only external input of an HPS model is the concatenated ASV pair
        m = small("HPS-ATTR")
        out = m.forward(rng.standard_normal((3, SMALL["input_dim"])), "eval")
        assert out.log_posteriors.shape == (3, 3)


class TestSrelu:
    def test_insert_is_identity(self, rng):
        m = small()
        x = rng.standard_normal((6, 6))
        before = m.forward(x).log_posteriors
        m.insert_srelu()
        assert "SRELU" in m.groups()
        np.testing.assert_array_equal(m.forward(x).log_posteriors, before)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("use_srelu", [False, True])
@pytest.mark.parametrize("bn", ["train", "frozen"])
def test_full_model_gradients(variant, use_srelu, bn):
    assert model_error(variant, use_srelu, seed=11, bn=bn) < 1e-4


def test_full_model_gradients_mse():
    assert model_error("SPS-ATTR", False, seed=3, reg_loss="mse") < 1e-4


class TestCheckpoint:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_round_trip_bit_exact(self, tmp_path, variant, rng):
        m = small(variant, use_srelu=True)
        m.forward(rng.standard_normal((4, 6)), "train")
        x = rng.standard_normal((3, 6))
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        m2 = load_checkpoint(path)
        assert m2.cfg == m.cfg
        a, b = m.forward(x), m2.forward(x)
        np.testing.assert_array_equal(a.log_posteriors, b.log_posteriors)
        if variant != "BASE":
            np.testing.assert_array_equal(a.reg_prediction, b.reg_prediction)

    def test_save_is_deterministic(self, tmp_path):
        save_checkpoint(small("SPS"), tmp_path / "a")
        save_checkpoint(small("SPS"), tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    @pytest.mark.parametrize("cut", [3, 20, 100, -1])
    def test_truncated(self, tmp_path, cut):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small(), path)
        data = path.read_bytes()
        path.write_bytes(data[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small(), path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bit_flip(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small(), path)
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0x10
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_variant_guard(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small(), path)
        with pytest.raises(ConfigError):
            load_checkpoint(path, expect_variant="SPS")
