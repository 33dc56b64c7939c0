import numpy as np
import pytest

from regiontok.backward import zero_grads
from regiontok.errors import ValidationError
from regiontok.model import RenConfig, init_params
from regiontok.optim import AdamW, clip_global_norm, learning_rate


class TestSchedule:
    def test_warmup_endpoint_exact(self):
        assert learning_rate(100, 0.001, 100, 5000) == 0.001

    def test_warmup_is_linear(self):
        assert learning_rate(50, 0.001, 100, 5000) == pytest.approx(0.0005)
        assert learning_rate(1, 0.001, 100, 5000) == pytest.approx(1e-5)

    def test_final_step_zero(self):
        assert learning_rate(1000, 0.001, 100, 1000) == 0.0

    def test_midpoint_half(self):
        assert learning_rate(550, 0.001, 100, 1000) == pytest.approx(0.0005)

    def test_step_zero_rejected(self):
        with pytest.raises(ValidationError):
            learning_rate(0, 0.001, 100, 1000)


class TestClip:
    def test_norm_above_limit_scaled(self):
        grads = {"a": np.array([6.0, 8.0], dtype=np.float32)}
        norm = clip_global_norm(grads, 5.0)
        assert norm == pytest.approx(10.0)
        np.testing.assert_allclose(np.linalg.norm(grads["a"]), 5.0, rtol=1e-6)

    def test_norm_below_limit_untouched(self):
        original = np.array([0.3, 0.4], dtype=np.float32)
        grads = {"a": original.copy()}
        norm = clip_global_norm(grads, 5.0)
        assert norm == pytest.approx(0.5)
        np.testing.assert_array_equal(grads["a"], original)


def _tiny_params():
    return init_params(0, RenConfig(d_model=8, n_blocks=1, n_heads=2,
                                    encoder_dim=8))


class TestAdamW:
    def test_first_step_closed_form(self):
        params = _tiny_params()
        opt = AdamW(lr=0.001, warmup_steps=100, total_steps=1000,
                    weight_decay=0.0)
        g = 0.37
        grads = zero_grads(params)
        grads["w_align"][0, 0] = g
        before = float(params.w_align[0, 0])
        info = opt.step(params, grads)
        lr = 0.001 / 100
        expected = before - lr * g / (abs(g) + 1e-8)
        assert float(params.w_align[0, 0]) == pytest.approx(expected, rel=1e-5)
        assert info["lr"] == pytest.approx(lr)

    def test_zero_grads_only_weight_decay(self):
        params = _tiny_params()
        reference = params.copy()
        opt = AdamW(lr=0.001, warmup_steps=1, total_steps=10, weight_decay=0.01)
        info = opt.step(params, zero_grads(params))
        lr = info["lr"]
        for name, arr in params.named_tensors():
            ref = dict(reference.named_tensors())[name]
            if ".ln1." in name or ".ln2." in name:
                np.testing.assert_array_equal(arr, ref)
            else:
                np.testing.assert_allclose(arr, ref * (1 - lr * 0.01), rtol=1e-6)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            params = _tiny_params()
            opt = AdamW(lr=0.01, warmup_steps=2, total_steps=10)
            rng = np.random.default_rng(0)
            for _step in range(5):
                grads = {name: rng.normal(size=arr.shape).astype(np.float32)
                         for name, arr in params.named_tensors()}
                opt.step(params, grads)
            runs.append(params.tensor_dict())
        for name in runs[0]:
            np.testing.assert_array_equal(runs[0][name], runs[1][name])

    def test_clip_applied_before_moments(self):
        params = _tiny_params()
        opt = AdamW(lr=0.001, warmup_steps=1, total_steps=10,
                    grad_clip_norm=5.0, weight_decay=0.0)
        grads = zero_grads(params)
        grads["w_prompt"][:] = 100.0
        info = opt.step(params, grads)
        assert info["grad_norm"] > 5.0
        # after clipping, the stored first moment reflects the clipped value
        clipped = 100.0 * 5.0 / info["grad_norm"]
        assert opt.m["w_prompt"][0, 0] == pytest.approx(0.1 * clipped, rel=1e-4)
