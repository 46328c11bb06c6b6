import numpy as np
import pytest

from dcmlab.denoiser import Denoiser, DenoiserConfig, Model, base_names, init_params
from dcmlab.diffusion import NoiseSchedule, TrajectoryGrid
from dcmlab.distill import (CDPair, DiscriminatorHead, DistillConfig, StageMismatchError, cd_pair,
                            distill_stage, extract_features, gan_prepare, loss_consistency, loss_fm,
                            loss_gan, loss_temporal_coherence, stage_range)
from dcmlab.synth_data import DataConfig, generate_dataset
from dcmlab.tensor_core import Tensor, backward

import gradcases
from oracles import SingleDatumOracle

SCHED = NoiseSchedule()
GRID = TrajectoryGrid(SCHED)
SMALL_GRID = TrajectoryGrid(SCHED, 10, 7)
TINY = DenoiserConfig(frames=2, height=8, width=8, width_d=16, blocks=2, heads=2, temb_dim=16, mlp_ratio=2)
TINY_DATA = DataConfig(frames=2, height=8, width=8, count=24, speed_range=(0.05, 0.1))


class ConstHead:
    def __init__(self, value):
        self.value = value

    def __call__(self, feats, frozen=False):
        return Tensor(np.full((feats[0].shape[0], 1), self.value))


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# ------------------------------------------------------------------ cd_pair


@pytest.mark.parametrize("n,n_end", [(50, 0), (45, 37), (38, 37), (1, 0), (20, 0)])
def test_cd_pair_agrees_under_single_datum_oracle(n, n_end):
    x0 = np.random.default_rng(n).normal(size=(1, 4, 16, 16))
    oracle = SingleDatumOracle(x0, SCHED)
    pair = cd_pair(oracle, oracle, oracle, x0, 0, n, n_end, GRID, np.random.default_rng(0))
    np.testing.assert_allclose(pair.student.data, pair.target.data, rtol=0, atol=1e-5)
    assert float(loss_consistency(pair).data) < 1e-10


def test_cd_pair_target_branch_is_constant():
    x0 = np.random.default_rng(1).normal(size=(2, 2, 8, 8))
    params = init_params(TINY)
    b = params.bind()
    student = Denoiser(b, TINY)
    ema_binding = params.copy().bind(track=True)
    pair = cd_pair(Denoiser(params, TINY), student, Denoiser(ema_binding, TINY), x0, [0, 1], 5, 0,
                   SMALL_GRID, np.random.default_rng(2))
    assert pair.student.requires_grad and not pair.target.requires_grad
    backward(loss_consistency(pair), b.tracked())
    assert all(t.grad is None for _, t in ema_binding.tracked())


def test_cd_pair_rejects_bad_indices():
    x0 = np.zeros((1, 2, 8, 8))
    o = SingleDatumOracle(x0, SCHED)
    with pytest.raises(ValueError):
        cd_pair(o, o, o, x0, 0, 37, 37, GRID, np.random.default_rng(0))
    with pytest.raises(ValueError):
        cd_pair(o, o, o, x0, 0, 51, 0, GRID, np.random.default_rng(0))


def test_stage_ranges():
    assert stage_range("vcm", GRID) == (1, 50, 0)
    assert stage_range("semantic", GRID) == (38, 50, 37)
    assert stage_range("detail", GRID) == (1, 37, 0)
    with pytest.raises(ValueError):
        stage_range("teacher", GRID)


# ------------------------------------------------------------------- losses


def test_temporal_coherence_hand_example():
    x = _t(np.array([0.0, 1.0, 2.0]).reshape(1, 3, 1, 1))
    xh = _t(np.array([0.0, 2.0, 4.0]).reshape(1, 3, 1, 1))
    assert float(loss_temporal_coherence(x, xh, 1).data) == pytest.approx(1.0)


def test_temporal_coherence_static_clips_vanish():
    rng = np.random.default_rng(0)
    a = np.repeat(rng.normal(size=(2, 1, 4, 4)), 4, axis=1)
    b = np.repeat(rng.normal(size=(2, 1, 4, 4)), 4, axis=1)
    assert float(loss_temporal_coherence(_t(a), _t(b), 2).data) == 0.0


def test_temporal_coherence_shift_bounds():
    x = _t(np.zeros((1, 3, 2, 2)))
    for bad in (0, 3):
        with pytest.raises(ValueError):
            loss_temporal_coherence(x, x, bad)


def test_fm_hand_values():
    assert float(loss_fm([_t([[1.0, 2.0]])], [_t([[0.0, 0.0]])]).data) == pytest.approx(2.5)
    two = loss_fm([_t([[1.0, 2.0]]), _t([[3.0]])], [_t([[0.0, 0.0]]), _t([[1.0]])])
    assert float(two.data) == pytest.approx(6.5)
    same = [_t(np.ones((2, 3, 4)))]
    assert float(loss_fm(same, same).data) == 0.0
    with pytest.raises(ValueError):
        loss_fm(same, same * 2)


@pytest.mark.parametrize("value,g,d", [(1.0, 0.0, 1.0), (0.0, 1.0, 1.0), (0.5, 0.5, 1.0)])
def test_gan_losses_by_substitution(value, g, d):
    feats = [_t(np.zeros((3, 2, 4)))]
    lg, ld = loss_gan(ConstHead(value), feats, feats)
    assert float(lg.data) == pytest.approx(g) and float(ld.data) == pytest.approx(d)


def test_gan_rejects_unbounded_head():
    feats = [_t(np.zeros((1, 2, 4)))]
    with pytest.raises(ValueError):
        loss_gan(ConstHead(1.5), feats, feats)


def test_discriminator_head_range_and_gradient_routing():
    rng = np.random.default_rng(3)
    store = DiscriminatorHead.init(2, 8, 16, seed=0)
    head = DiscriminatorHead(store, track=True)
    fake = [Tensor(rng.normal(size=(4, 5, 8)) * 10, requires_grad=True) for _ in range(2)]
    real = [Tensor(rng.normal(size=(4, 5, 8))) for _ in range(2)]
    out = head(fake).data
    assert out.shape == (4, 1) and out.min() >= 0 and out.max() <= 1
    lg, ld = loss_gan(head, fake, real)
    grads = backward(lg, head.binding.tracked())
    assert all(np.abs(g).sum() == 0 for g in grads.values())
    assert all(f.grad is not None and np.abs(f.grad).sum() > 0 for f in fake)
    grads = backward(ld, head.binding.tracked())
    assert any(np.abs(g).sum() > 0 for g in grads.values())


def test_gan_prepare_shares_noise_and_range():
    rng = np.random.default_rng(4)
    x_end = rng.normal(size=(2, 2, 4, 4))
    target = rng.normal(size=(2, 2, 4, 4))
    steps = set()
    for _ in range(200):
        gb = gan_prepare(_t(x_end), target, GRID, rng)
        steps.add(gb.t_gan)
        a = SCHED.alpha_bar[gb.t_gan]
        np.testing.assert_allclose(gb.x_fake.data - gb.x_real.data, np.sqrt(a) * (x_end - target), atol=1e-12)
        assert not gb.x_real.requires_grad
    assert min(steps) >= 0 and max(steps) <= GRID.step(GRID.kappa)


def test_feature_backbone_must_be_frozen():
    params = init_params(TINY)
    x = np.zeros((1, 2, 8, 8), np.float32)
    assert len(extract_features(Denoiser(params, TINY), x, 3, 0, 1)) == 2
    with pytest.raises(ValueError):
        extract_features(Denoiser(params.bind(), TINY), x, 3, 0, 1)


# --------------------------------------------------------- gradient checks

@pytest.fixture(scope="module")
def tiny64():
    return gradcases.tiny64()


@pytest.mark.parametrize("name", sorted(gradcases.CASES))
def test_gradcheck_losses(tiny64, name):
    report = gradcases.CASES[name](*tiny64)
    assert report.max_error <= gradcases.TOL, str(report)


@pytest.mark.parametrize("name", gradcases.ADAPTER_CASES)
def test_gradcheck_losses_through_adapters(tiny64, name):
    teacher, student = tiny64
    report = gradcases.CASES[name](teacher, gradcases.adapted(student))
    assert report.max_error <= gradcases.TOL, str(report)



# ------------------------------------------------------------------- stages


@pytest.fixture(scope="module")
def tiny_setup():
    data = generate_dataset(TINY_DATA)
    teacher = Model(init_params(TINY), TINY, "teacher", 1)
    return data, teacher


def _run(stage, init, data, teacher, iterations=6, seed=0):
    cfg = DistillConfig(stage=stage, iterations=iterations, batch_size=2, seed=seed, lr=1e-3, disc_hidden=8)
    return distill_stage(cfg, teacher, init, data, SMALL_GRID)


def test_stage_sampling_ranges(tiny_setup):
    data, teacher = tiny_setup
    sem = _run("semantic", teacher, data, teacher, 25)
    assert all(SMALL_GRID.kappa < r.t_n <= SMALL_GRID.N for r in sem.records)
    det = _run("detail", sem.model, data, teacher, 25)
    assert all(1 <= r.t_n <= SMALL_GRID.kappa for r in det.records)
    assert all(r.loss_tc > 0 for r in sem.records)
    assert all(r.loss_fm >= 0 and r.loss_d > 0 for r in det.records)


def test_detail_stage_leaves_base_bit_identical(tiny_setup):
    data, teacher = tiny_setup
    sem = _run("semantic", teacher, data, teacher, 3)
    det = _run("detail", sem.model, data, teacher, 5)
    for n in base_names(det.model.params):
        assert det.model.params[n].tobytes() == sem.model.params[n].tobytes()
    changed = [n for n in det.model.params.trainable_names()
               if n.endswith("lora_B") and np.abs(det.model.params[n]).sum() > 0]
    assert changed
    assert det.discriminator is not None


def test_stage_is_deterministic(tiny_setup):
    data, teacher = tiny_setup
    a = _run("vcm", teacher, data, teacher, 4, seed=3)
    b = _run("vcm", teacher, data, teacher, 4, seed=3)
    assert [r.to_dict() for r in a.records] == [r.to_dict() for r in b.records]
    assert all(a.model.params[n].tobytes() == b.model.params[n].tobytes() for n in a.model.params)


def test_zero_iterations_keep_initialization(tiny_setup):
    data, teacher = tiny_setup
    res = _run("semantic", teacher, data, teacher, 0)
    assert res.records == [] and all(
        res.model.params[n].tobytes() == teacher.params[n].tobytes() for n in teacher.params)


def test_stage_preconditions(tiny_setup):
    data, teacher = tiny_setup
    with pytest.raises(StageMismatchError):
        _run("detail", teacher, data, teacher, 1)
    with pytest.raises(StageMismatchError):
        _run("semantic", teacher, data, Model(teacher.params, TINY, "teacher", 0), 1)
    with pytest.raises(ValueError):
        distill_stage(DistillConfig(stage="semantic", tc_shift=2), teacher, teacher, data, SMALL_GRID)
    with pytest.raises(ValueError):
        DistillConfig(stage="bogus").validate()


def test_cd_pair_type():
    assert CDPair.__dataclass_fields__.keys() >= {"student", "target"}
