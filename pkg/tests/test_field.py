import numpy as np
import pytest

from srfields import autodiff as ad
from srfields.autodiff import Tensor
from srfields.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from srfields.field import FieldConfig, FieldParams, encode, encoding_dim

TINY = FieldConfig(depth=2, width=8, skip_at=1, l_pos=2, l_dir=1)


class TestEncode:
    def test_zero_input(self):
        out = encode(np.zeros((1, 3)), levels=2)
        assert out.shape == (1, 15)
        np.testing.assert_array_equal(out[0, :3], 0.0)       # raw coords
        np.testing.assert_array_equal(out[0, 3:9], 0.0)      # all sin terms
        np.testing.assert_array_equal(out[0, 9:], 1.0)       # all cos terms

    def test_output_length_l10(self):
        assert encoding_dim(3, 10) == 63
        assert encode(np.zeros((5, 3)), 10).shape == (5, 63)

    def test_closed_form_at_fixture(self):
        v = np.array([[0.3, -0.7, 0.1]])
        levels = 4
        out = encode(v, levels)
        # independent direct evaluation, term by term
        expected = [0.3, -0.7, 0.1]
        for k in range(levels):
            for fn in (np.sin,):
                expected.extend(fn((2.0 ** k) * np.pi * v[0]))
        for k in range(levels):
            expected.extend(np.cos((2.0 ** k) * np.pi * v[0]))
        np.testing.assert_allclose(out[0], expected, atol=1e-15)

    def test_level_zero_is_identity(self):
        v = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(encode(v, 0), v)


class TestQuery:
    def setup_method(self):
        self.params = FieldParams(TINY, seed=5)
        self.rng = np.random.default_rng(0)

    def unit_dirs(self, n):
        d = self.rng.normal(size=(n, 3))
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def test_sigma_nonnegative(self):
        x = self.rng.uniform(-2, 2, (64, 3))
        _, sigma = self.params.query("coarse", x, self.unit_dirs(64))
        assert np.all(sigma.data >= 0.0)

    def test_rgb_in_unit_interval(self):
        x = self.rng.uniform(-2, 2, (64, 3))
        rgb, _ = self.params.query("fine", x, self.unit_dirs(64))
        assert np.all(rgb.data >= 0.0) and np.all(rgb.data <= 1.0)

    def test_sigma_independent_of_direction_bitexact(self):
        x = self.rng.uniform(-1, 1, (16, 3))
        d1, d2 = self.unit_dirs(16), self.unit_dirs(16)
        _, s1 = self.params.query("coarse", x, d1)
        _, s2 = self.params.query("coarse", x, d2)
        np.testing.assert_array_equal(s1.data, s2.data)

    def test_nonfinite_input_rejected(self):
        with pytest.raises(ValueError):
            self.params.query("coarse", np.array([[np.nan, 0, 0]]),
                              np.array([[0, 0, -1.0]]))

    def test_unknown_network_rejected(self):
        with pytest.raises(ValueError):
            self.params.query("medium", np.zeros((1, 3)), np.array([[0, 0, -1.0]]))

    def test_query_gradients_pass_grad_check(self):
        x = self.rng.uniform(-1, 1, (4, 3))
        d = self.unit_dirs(4)
        mlp = self.params.coarse
        for name in ("trunk0.w", "sigma.w", "rgb.b", "color0.w"):

            def f(t, name=name):
                saved = mlp.params[name]
                mlp.params[name] = t
                try:
                    rgb, sigma = mlp.query(x, d)
                    return ad.tsum(rgb) + ad.tsum(sigma)
                finally:
                    mlp.params[name] = saved

            err = ad.grad_check(f, mlp.params[name], eps=1e-5)
            assert err < 1e-4, f"{name}: {err}"


class TestInitStatistics:
    def test_mean_sigma_regression(self):
        # frozen after the first verified run of the default architecture
        params = FieldParams(FieldConfig(), seed=0)
        rng = np.random.default_rng(42)
        x = rng.uniform(-1.5, 1.5, (1000, 3))
        d = rng.normal(size=(1000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        with ad.no_grad():
            _, sigma = params.query("coarse", x, d)
        mean = sigma.data.mean()
        assert mean == pytest.approx(0.6960639774400357, abs=1e-9)
        assert 0.0 < mean < 5.0

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_mean_sigma_band_other_seeds(self, seed):
        params = FieldParams(FieldConfig(), seed=seed)
        rng = np.random.default_rng(42)
        x = rng.uniform(-1.5, 1.5, (1000, 3))
        d = rng.normal(size=(1000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        with ad.no_grad():
            _, sigma = params.query("coarse", x, d)
        assert 0.0 < sigma.data.mean() < 5.0


class TestCheckpoint:
    def test_roundtrip_exact(self, tmp_path):
        params = FieldParams(TINY, seed=9)
        path = tmp_path / "field.npz"
        params.save(path)
        loaded = FieldParams.load(path)
        assert loaded.config == TINY
        assert loaded.seed == 9
        for name, t in params.named_params().items():
            np.testing.assert_array_equal(loaded.named_params()[name].data, t.data)

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "other.npz"
        save_checkpoint(path, "refiner", {}, {"w": np.zeros(3)}, seed=0)
        with pytest.raises(CheckpointError):
            FieldParams.load(path)

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "bogus.npz"
        np.savez(path, w=np.zeros(3))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "junk.npz"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_coarse_and_fine_differ_at_init(self):
        params = FieldParams(TINY, seed=3)
        w_c = params.coarse.params["trunk0.w"].data
        w_f = params.fine.params["trunk0.w"].data
        assert not np.array_equal(w_c, w_f)
        assert w_c.shape == w_f.shape  # same architecture
