import numpy as np
import pytest

from mlembed.errors import ConfigError, ContractError, DataFormatError, DegenerateInputError
from mlembed.losses import LossConfig, ml2_loss, pretrain_loss
from mlembed.model import EmbeddingModel, EncoderConfig
from mlembed.numeric import ParamStore, check_gradient


SMALL = EncoderConfig(input_dim=4, hidden_sizes=(5,), embedding_dim=3, seed=0)


def small_model(**overrides):
    cfg = EncoderConfig(
        input_dim=overrides.get("input_dim", 4),
        hidden_sizes=overrides.get("hidden_sizes", (5,)),
        embedding_dim=overrides.get("embedding_dim", 3),
        label_count=overrides.get("label_count"),
        seed=overrides.get("seed", 0),
    )
    return EmbeddingModel(cfg)


class TestForwardEmbed:
    def test_unit_norm_outputs(self):
        model = small_model()
        rng = np.random.default_rng(1)
        E, _ = model.embed(rng.standard_normal((50, 4)))
        assert np.all(np.abs(np.linalg.norm(E, axis=1) - 1.0) <= 1e-6)

    def test_constant_map_with_zero_trunk(self):
        model = small_model()
        for name in ("W0", "proj_W"):
            model.params.value(name)[...] = 0.0
        model.params.value("proj_b")[...] = np.array([1.0, 0.0, 0.0])
        rng = np.random.default_rng(2)
        E, _ = model.embed(rng.standard_normal((10, 4)))
        assert np.allclose(E, np.tile([1.0, 0.0, 0.0], (10, 1)))

    def test_projection_scale_invariance(self):
        model = small_model()
        rng = np.random.default_rng(3)
        X = rng.standard_normal((6, 4))
        base, _ = model.embed(X)
        model.params.value("proj_W")[...] *= 3.7
        model.params.value("proj_b")[...] *= 3.7
        scaled, _ = model.embed(X)
        assert np.allclose(base, scaled, atol=1e-12)

    def test_deterministic_init(self):
        a, b = small_model(seed=9), small_model(seed=9)
        for name in a.params.names():
            assert np.array_equal(a.params.value(name), b.params.value(name))

    def test_degenerate_activation_rejected(self):
        model = small_model()
        for name in model.params.names():
            model.params.value(name)[...] = 0.0
        with pytest.raises(DegenerateInputError, match="norm"):
            model.embed(np.ones((1, 4)))

    def test_wrong_input_dim_rejected(self):
        with pytest.raises(ContractError):
            small_model().embed(np.ones((2, 7)))

    def test_embed_one(self):
        model = small_model()
        x = np.arange(4.0)
        E, _ = model.embed(x[None, :])
        assert np.array_equal(model.embed_one(x), E[0])


class TestForwardClassify:
    def test_zero_logits_give_half_half(self):
        model = small_model(label_count=3)
        for k in range(3):
            model.params.value(f"head{k}_W")[...] = 0.0
            model.params.value(f"head{k}_b")[...] = 0.0
        lp, _ = model.classify(np.ones((2, 4)))
        assert np.allclose(lp, np.log(0.5))

    def test_pairs_exponentiate_to_one(self):
        model = small_model(label_count=4)
        rng = np.random.default_rng(5)
        lp, _ = model.classify(rng.standard_normal((8, 4)))
        assert np.all(np.abs(np.exp(lp).sum(axis=2) - 1.0) <= 1e-9)

    def test_softmax_monotone_in_gap(self):
        model = small_model(label_count=1)
        h_dim = model.config.hidden_out
        probs = []
        for gap in (0.0, 1.0, 2.0):
            model.params.value("head0_W")[...] = 0.0
            model.params.value("head0_b")[...] = np.array([gap, 0.0])
            lp, _ = model.classify(np.zeros((1, 4)))
            probs.append(float(np.exp(lp[0, 0, 0])))
        assert probs[0] < probs[1] < probs[2]

    def test_heads_absent_raises(self):
        with pytest.raises(ConfigError, match="heads"):
            small_model().classify(np.ones((1, 4)))


def model_param_store_fn(model, X, loss_fn):
    """Adapter: evaluate loss(embed(X)) and push grads into the model store."""

    def f(_store):
        E, cache = model.embed(X)
        value, G = loss_fn(E)
        model.backward_embed(cache, G)
        return value

    return f


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        model = small_model()
        rng = np.random.default_rng(7)
        X = rng.standard_normal((3, 4))
        E, cache = model.embed(X)
        model.params.zero_grads()
        model.backward_embed(cache, np.zeros_like(E))
        for name in model.params.names():
            assert not model.params.grad(name).any()

    def test_upstream_along_output_direction_is_null(self):
        # (I - f f^T) kills the radial component: feeding f itself as the
        # upstream gradient must produce zero parameter gradients.
        model = small_model()
        rng = np.random.default_rng(8)
        X = rng.standard_normal((5, 4))
        E, cache = model.embed(X)
        model.params.zero_grads()
        model.backward_embed(cache, E.copy())
        for name in model.params.names():
            assert np.abs(model.params.grad(name)).max() <= 1e-12

    def test_end_to_end_gradient_check(self):
        rng = np.random.default_rng(9)
        X = rng.standard_normal((4, 4))
        taus = np.array([0.4])
        cfg = LossConfig(margin=0.2)

        def loss_fn(E):
            out = ml2_loss(E[0], E[1:2], E[2:4], taus, cfg)
            G = np.zeros_like(E)
            G[0] = out.anchor_grad
            G[1:2] = out.positive_grads
            G[2:4] = out.negative_grads
            return out.value, G

        model = small_model(seed=3)
        f = model_param_store_fn(model, X, loss_fn)
        assert check_gradient(f, model.params) <= 1e-4

    def test_classify_gradient_check(self):
        rng = np.random.default_rng(10)
        X = rng.standard_normal((3, 4))
        model = small_model(label_count=2, seed=4)
        label_sets = [{0}, {1}, {0, 1}]

        def f(_store):
            lp, cache = model.classify(X)
            G = np.zeros_like(lp)
            total = 0.0
            for row, labels in enumerate(label_sets):
                out = pretrain_loss(lp[row], labels, 2)
                total += out.value
                G[row] = out.logit_grads
            model.backward_classify(cache, G)
            return total

        assert check_gradient(f, model.params) <= 1e-4

    def test_shape_mismatch_rejected(self):
        model = small_model()
        E, cache = model.embed(np.ones((2, 4)))
        with pytest.raises(ContractError):
            model.backward_embed(cache, np.zeros((3, 3)))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = small_model(label_count=3, seed=11)
        # make values non-trivial
        rng = np.random.default_rng(12)
        for name in model.params.names():
            model.params.value(name)[...] += rng.standard_normal(
                model.params.value(name).shape
            )
        path = tmp_path / "model.ckpt"
        model.save(path)
        loaded = EmbeddingModel.load(path)
        assert loaded.config == model.config
        for name in model.params.names():
            assert np.array_equal(loaded.params.value(name), model.params.value(name))

    def test_save_load_save_identical_bytes(self, tmp_path):
        model = small_model(seed=13)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        model.save(p1)
        EmbeddingModel.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(DataFormatError):
            EmbeddingModel.load(path)

    def test_truncated_file_rejected(self, tmp_path):
        model = small_model(seed=14)
        path = tmp_path / "model.ckpt"
        model.save(path)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(DataFormatError, match="truncated"):
            EmbeddingModel.load(path)


class TestReinitProjection:
    def test_only_projection_changes(self):
        model = small_model(seed=15)
        before = model.params.snapshot()
        model.params.momentum("proj_W")[...] = 1.0
        model.reinit_projection(seed=99)
        assert not np.array_equal(model.params.value("proj_W"), before["proj_W"])
        assert not np.array_equal(model.params.value("proj_b"), before["proj_b"])
        assert np.array_equal(model.params.value("W0"), before["W0"])
        assert not model.params.momentum("proj_W").any()


class TestEncoderConfig:
    def test_invalid_embedding_dim(self):
        with pytest.raises(ConfigError):
            EncoderConfig(input_dim=4, hidden_sizes=(5,), embedding_dim=1)

    def test_invalid_hidden_sizes(self):
        with pytest.raises(ConfigError):
            EncoderConfig(input_dim=4, hidden_sizes=(), embedding_dim=3)
