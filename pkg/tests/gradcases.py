"""Finite-difference cases for every training loss on L=2, 8x8 float64 instances."""
import numpy as np

from dcmlab.denoiser import Denoiser, DenoiserConfig, init_params, inject_adapters, trainable_subset
from dcmlab.diffusion import NoiseSchedule, TrajectoryGrid, add_noise
from dcmlab.distill import (DiscriminatorHead, cd_pair, extract_features, gan_prepare, loss_consistency, loss_fm,
                            loss_gan, loss_temporal_coherence)
from dcmlab.tensor_core import Tensor, grad_check

SCHED = NoiseSchedule()
SMALL_GRID = TrajectoryGrid(SCHED, 10, 7)
TINY = DenoiserConfig(frames=2, height=8, width=8, width_d=16, blocks=2, heads=2, temb_dim=16, mlp_ratio=2)
X0 = np.random.default_rng(10).normal(size=(2, 2, 8, 8)) * 0.5
EPS = np.random.default_rng(11).normal(size=(2, 2, 8, 8))
LABELS = np.array([0, 3])
TOL = 1e-4


def tiny64():
    teacher = init_params(TINY).astype(np.float64)
    student = init_params(DenoiserConfig(**{**TINY.__dict__, "seed": 5})).astype(np.float64)
    return teacher, student


def adapted(student):
    """Detail-stage layout: adapters with nonzero B so gradients reach every adapter tensor."""
    p = inject_adapters(student, 2, 0)
    rng = np.random.default_rng(0)
    p = p.replace({n: rng.normal(0, 0.1, p[n].shape) for n in p.names() if n.endswith("lora_B")})
    return p.with_trainable(trainable_subset(p, "detail"))


def _pair(binding, teacher, ema, n=8, n_end=0):
    return cd_pair(Denoiser(teacher, TINY), Denoiser(binding, TINY), Denoiser(ema, TINY), X0, LABELS, n, n_end,
                   SMALL_GRID, eps=EPS)


def _gan_feats(b, teacher):
    p = _pair(b, teacher, teacher, 6, 0)
    gb = gan_prepare(p.student, p.target, SMALL_GRID, np.random.default_rng(7))
    net = Denoiser(teacher, TINY)
    return extract_features(net, gb.x_fake, gb.t_gan, LABELS), extract_features(net, gb.x_real, gb.t_gan, LABELS)


def _head():
    return DiscriminatorHead.init(2, TINY.width_d, 8, seed=1).astype(np.float64)


def check_teacher(teacher, student):
    t = np.array([30, 700])
    xt = add_noise(X0, EPS, t, SCHED)

    def closure(b):
        d = Denoiser(b, TINY)(xt, t, LABELS) - Tensor(EPS)
        return (d * d).mean()
    return grad_check(closure, student, max_elements=12)


def check_consistency(teacher, student):
    return grad_check(lambda b: loss_consistency(_pair(b, teacher, teacher)), student, max_elements=12)


def check_temporal_coherence(teacher, student):
    def closure(b):
        p = _pair(b, teacher, teacher, 9, 7)
        return loss_temporal_coherence(p.student, p.target, 1)
    return grad_check(closure, student, max_elements=12)


def check_feature_matching(teacher, student):
    return grad_check(lambda b: loss_fm(*_gan_feats(b, teacher)), student, max_elements=12)


def check_generator(teacher, student):
    head = DiscriminatorHead(_head())
    return grad_check(lambda b: loss_gan(head, *_gan_feats(b, teacher))[0], student, max_elements=12)


def check_discriminator(teacher, student):
    ff, fr = _gan_feats(student.bind(track=False), teacher)

    def closure(b):
        head = DiscriminatorHead(b.store)
        head.binding = b
        return loss_gan(head, ff, fr)[1]
    return grad_check(closure, _head())


CASES = {
    "teacher": check_teacher,
    "consistency": check_consistency,
    "temporal_coherence": check_temporal_coherence,
    "feature_matching": check_feature_matching,
    "generator": check_generator,
    "discriminator": check_discriminator,
}
ADAPTER_CASES = ("teacher", "consistency", "feature_matching", "generator")
