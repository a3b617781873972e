import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mtvnet.estimator import (TrilinearUpscaler, VolumeSuperResolver,
                              check_volume_array)
from mtvnet.volumes import Volume, make_synthetic_corpus, trilinear_upsample


def hr_volume(edge=48, seed=0):
    return make_synthetic_corpus("trabecular", 1, edge, seed=seed)[0]


class TestValidation:
    def test_three_dim_gains_channel(self):
        arr = check_volume_array(np.zeros((4, 4, 4)))
        assert arr.shape == (1, 4, 4, 4)
        assert arr.dtype == np.float32

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError, match="normalize"):
            check_volume_array(np.full((4, 4, 4), 3.0))

    def test_rejects_bad_rank(self):
        with pytest.raises(ValueError, match="array"):
            check_volume_array(np.zeros((4, 4)))

    def test_rejects_non_finite(self):
        arr = np.zeros((4, 4, 4))
        arr[0, 0, 0] = np.inf
        with pytest.raises(ValueError, match="finite"):
            check_volume_array(arr)


class TestTrilinearUpscaler:
    def test_sklearn_params_round_trip(self):
        est = TrilinearUpscaler(scale=4, tile_edge=8)
        assert est.get_params() == {"scale": 4, "tile_edge": 8}
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_predict_matches_whole_volume_upsampling(self):
        vol = hr_volume(edge=32)
        est = TrilinearUpscaler(scale=2, tile_edge=16).fit()
        out = est.predict(vol.data)
        whole = np.clip(trilinear_upsample(vol.data, 2), 0, 1)
        assert out.shape == (1, 64, 64, 64)
        assert np.sqrt(np.mean((out - whole) ** 2)) < 1e-5

    def test_list_in_list_out(self):
        vol = hr_volume(edge=32)
        est = TrilinearUpscaler(scale=2, tile_edge=16)
        outs = est.predict([vol.data, vol.data])
        assert isinstance(outs, list) and len(outs) == 2


class TestVolumeSuperResolver:
    def make_estimator(self, **kw):
        args = dict(preset="desk", steps=3, batch_size=1, seed=0)
        args.update(kw)
        return VolumeSuperResolver(**args)

    def test_params_round_trip_and_clone(self):
        est = self.make_estimator(lr=5e-4)
        params = est.get_params()
        assert params["preset"] == "desk"
        assert params["lr"] == 5e-4
        est2 = clone(est).set_params(steps=7)
        assert est2.steps == 7
        assert est2.lr == 5e-4

    def test_not_fitted_error(self):
        est = self.make_estimator()
        with pytest.raises(NotFittedError):
            est.predict(np.zeros((1, 24, 24, 24), dtype=np.float32))

    def test_fit_predict_score(self):
        hr = hr_volume(edge=48)
        est = self.make_estimator().fit([hr])
        assert est.model_ is not None
        assert len(est.loss_trace_) == 3

        lr_arr = np.zeros((1, 24, 24, 24), dtype=np.float32)
        sr = est.predict(lr_arr)
        assert sr.shape == (1, 48, 48, 48)
        assert 0.0 <= sr.min() and sr.max() <= 1.0

        score = est.score([lr_arr + 0.1], [np.clip(trilinear_upsample(lr_arr + 0.1, 2), 0, 1)])
        assert np.isfinite(score)

    def test_fit_accepts_single_volume(self):
        est = self.make_estimator().fit(hr_volume(edge=48))
        sr = est.predict(Volume(np.full((1, 24, 24, 24), 0.5, dtype=np.float32)))
        assert sr.shape == (1, 48, 48, 48)

    def test_score_length_mismatch(self):
        est = self.make_estimator().fit(hr_volume(edge=48))
        with pytest.raises(ValueError, match="lengths differ"):
            est.score([np.zeros((1, 24, 24, 24), dtype=np.float32)], [])
