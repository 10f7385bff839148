import numpy as np
import pytest

from nipfan import autodiff as ad
from nipfan import training as tr
from nipfan.autodiff import ContractError, InputError, ShapeError
from nipfan.fan import constraint_violation, fan_init
from nipfan.nip import TrainingError, inet_init
from nipfan.params import ParamSet
from nipfan.raw import BayerStack, Sample


def _scalar_param(v):
    return ParamSet({"x": ad.tensor(np.array([v], dtype=np.float32))})


class TestAdam:
    def test_zero_gradient(self):
        p = _scalar_param(1.0)
        tr.adam_step(tr.AdamState(lr=0.1), p, {"x": np.zeros(1)})
        assert p["x"].data[0] == 1.0

    def test_unit_first_step(self):
        p = _scalar_param(1.0)
        tr.adam_step(tr.AdamState(lr=1e-3), p, {"x": np.array([0.37])})
        assert 1.0 - p["x"].data[0] == pytest.approx(1e-3, rel=1e-4)

    def test_quadratic_decreases(self):
        p = _scalar_param(1.0)
        state = tr.AdamState(lr=0.1)
        xs = [1.0]
        for _ in range(10):
            tr.adam_step(state, p, {"x": 2 * p["x"].data})
            xs.append(abs(float(p["x"].data[0])))
        assert all(b < a for a, b in zip(xs, xs[1:]))

    def test_matches_scalar_simulation(self):
        p = _scalar_param(1.0)
        state = tr.AdamState(lr=0.05)
        x, m, v = 1.0, 0.0, 0.0
        for t in range(1, 6):
            g = 2 * x
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            tr.adam_step(state, p, {"x": 2 * p["x"].data.astype(np.float64)})
        assert p["x"].data[0] == pytest.approx(x, rel=1e-5)
        assert state.step == 5

    def test_group_lr(self):
        p = ParamSet({"fan/a": ad.tensor(np.ones(1, np.float32)), "nip/b": ad.tensor(np.ones(1, np.float32))})
        tr.adam_step(tr.AdamState(lr=1e-3), p, {"fan/a": np.ones(1), "nip/b": np.ones(1)}, {"nip/": 1e-5})
        assert 1.0 - p["fan/a"].data[0] == pytest.approx(1e-3, rel=1e-4)
        assert 1.0 - p["nip/b"].data[0] == pytest.approx(1e-5, rel=1e-2)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            tr.adam_step(tr.AdamState(), _scalar_param(1.0), {"x": np.zeros(2)})


class TestSchedule:
    @pytest.mark.parametrize("epoch, expected", [(0, 1e-4), (49, 1e-4), (50, 0.85e-4), (100, 0.7225e-4)])
    def test_values(self, epoch, expected):
        assert tr.lr_schedule(1e-4, epoch) == pytest.approx(expected)

    def test_period_configurable(self):
        assert tr.lr_schedule(1e-4, 99, period=100) == 1e-4

    def test_negative_epoch(self):
        with pytest.raises(InputError):
            tr.lr_schedule(1e-4, -1)


class TestLoss:
    def test_identical(self, rng):
        a = rng.random((4, 4, 3))
        assert float(tr.l2_fidelity(a, a).data) == 0.0

    def test_one_level(self, f64, rng):
        a = rng.random((4, 4, 3))
        assert float(tr.l2_fidelity(a + 1 / 255, a).data) == pytest.approx(1.0)

    def test_scalar_loop_oracle(self, f64, rng):
        a, b = rng.random((3, 5, 2)), rng.random((3, 5, 2))
        total = 0.0
        for i in np.ndindex(a.shape):
            total += ((a[i] - b[i]) * 255) ** 2
        assert float(tr.l2_fidelity(a, b).data) == pytest.approx(total / a.size, rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tr.l2_fidelity(np.zeros((2, 2)), np.zeros((2, 3)))


def _flat_sample(value=0.3, size=64):
    stack = np.full((size // 2, size // 2, 4), value, dtype=np.float32)
    return Sample(frame=None, stack=BayerStack(stack), target=np.full((size, size, 3), value, np.float32))


class TestSampling:
    def test_flat_dataset_fails(self, rng):
        with pytest.raises(tr.SamplingError):
            tr.sample_patches([_flat_sample()], 4, 32, rng, max_attempts=200)

    def test_textured_always_accepted(self, rng):
        accepted = sum(tr.accept_patch(0.05, rng) for _ in range(1000))
        assert accepted == 1000

    def test_half_acceptance_band(self, rng):
        rate = np.mean([tr.accept_patch(0.015, rng) for _ in range(10_000)])
        assert abs(rate - 0.5) <= 0.05

    def test_geometry_and_alignment(self, tiny_dataset, rng):
        from nipfan.raw import reference_develop
        stacks, targets = tr.sample_patches(tiny_dataset, 3, 32, rng)
        assert stacks.shape == (3, 16, 16, 4) and targets.shape == (3, 32, 32, 3)
        np.testing.assert_allclose(targets[0], reference_develop(stacks[0]), atol=1e-6)

    def test_patch_too_large(self, tiny_dataset, rng):
        with pytest.raises(InputError):
            tr.sample_patches(tiny_dataset, 1, 256, rng)


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(InputError, match="bogus"):
            tr.TrainConfig.from_dict({"bogus": 1})

    def test_bad_mode(self):
        with pytest.raises(InputError):
            tr.TrainConfig(mode="x").validate()


def _nip_config(**kw):
    base = dict(mode="nip", epochs=2, iterations_per_epoch=3, batch_size=2, patch=32, lr=1e-3,
                val_fidelity_patches=2)
    base.update(kw)
    return tr.TrainConfig(**base)


def _joint_config(mode, **kw):
    base = dict(mode=mode, epochs=2, iterations_per_epoch=2, batch_size=2, patch=64, lr=1e-3,
                val_patches=2, val_fidelity_patches=2)
    base.update(kw)
    return tr.TrainConfig(**base)


class TestTrainNip:
    def test_zero_lr_leaves_params(self, tiny_dataset):
        p = inet_init()
        before = p.digest()
        tr.train_nip(_nip_config(lr=0.0), tiny_dataset, p)
        assert p.digest() == before

    def test_deterministic(self, tiny_dataset):
        a = tr.train_nip(_nip_config(), tiny_dataset, inet_init())
        b = tr.train_nip(_nip_config(), tiny_dataset, inet_init())
        assert tr.history_csv(a.history) == tr.history_csv(b.history)
        assert a.nip.digest() == b.nip.digest()

    def test_divergence_reports_checkpoint(self, tiny_dataset):
        p = inet_init()
        p["gamma_out_b"].data[:] = np.nan
        with pytest.raises(TrainingError) as info:
            tr.train_nip(_nip_config(), tiny_dataset, p)
        assert "nip" in info.value.checkpoint

    def test_early_stop_rule(self):
        hist = [tr.LossReport(epoch=i, lr=1e-4, val_l2=1.0) for i in range(10)]
        assert tr._relative_change_small(hist, 5, 1e-4)
        hist[-1].val_l2 = 2.0
        assert not tr._relative_change_small(hist, 5, 1e-4)

    def test_wrong_mode(self, tiny_dataset):
        with pytest.raises(InputError):
            tr.train_nip(_nip_config(mode="f"), tiny_dataset, inet_init())


class TestTrainJoint:
    def test_mode_f_freezes_nip(self, tiny_dataset):
        nip = inet_init()
        before = nip.digest()
        state = tr.train_joint(_joint_config("f"), tiny_dataset, nip, fan_init(0.25))
        assert state.nip.digest() == before
        assert constraint_violation(state.fan) <= 1e-6
        assert 0.0 <= state.history[-1].accuracy <= 1.0

    def test_mode_fn_updates_both(self, tiny_dataset):
        nip, fan = inet_init(), fan_init(0.25)
        nip_before, fan_before = nip.digest(), fan.digest()
        state = tr.train_joint(_joint_config("f+n"), tiny_dataset, nip, fan)
        assert state.nip.digest() != nip_before and state.fan.digest() != fan_before
        assert state.opt_fidelity.step == state.opt_main.step == 4
        assert constraint_violation(state.fan) <= 1e-6

    def test_deterministic(self, tiny_dataset):
        a = tr.train_joint(_joint_config("f+n"), tiny_dataset, inet_init(), fan_init(0.25))
        b = tr.train_joint(_joint_config("f+n"), tiny_dataset, inet_init(), fan_init(0.25))
        assert tr.history_csv(a.history) == tr.history_csv(b.history)

    def test_step_order_matters(self, tiny_dataset):
        a = tr.train_joint(_joint_config("f+n"), tiny_dataset, inet_init(), fan_init(0.25))
        b = tr.train_joint(_joint_config("f+n", fidelity_first=True), tiny_dataset, inet_init(), fan_init(0.25))
        assert tr.history_csv(a.history) != tr.history_csv(b.history)

    def test_history_fields(self, tiny_dataset):
        state = tr.train_joint(_joint_config("f", epochs=1), tiny_dataset, inet_init(), fan_init(0.25))
        csv_text = tr.history_csv(state.history)
        assert csv_text.splitlines()[0] == "epoch,lr,ce_loss,l2_loss,psnr,ssim,accuracy"
        assert len(csv_text.splitlines()) == 2

    def test_wrong_mode(self, tiny_dataset):
        with pytest.raises(InputError):
            tr.train_joint(_joint_config("nip"), tiny_dataset, inet_init(), fan_init(0.25))
