"""Tests for Adam, augmentation, the training loop and instance optimization."""

import numpy as np
import pytest

from gradicon.autodiff import NonFiniteError, Tensor
from gradicon.geometry import FieldMap, Identity
from gradicon.losses import RegularizerConfig, SimilarityConfig
from gradicon.models import DirectField, IdentityPredictor, UNetSpec
from gradicon.synthdata import gen_shapes
from gradicon.training import (
    Adam,
    AdamState,
    AugmentConfig,
    CURVE_COLUMNS,
    ImageCorpus,
    PairList,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    affine_augment,
    augment_pair,
    default_lambda,
    desk_config,
    instance_optimize,
    make_stage1,
    predict_pair,
    split_pair,
    train,
)

TINY = UNetSpec(levels=2, base_channels=2)


def tiny_config(**kw):
    base = dict(lr=1e-3, iters_per_stage=4, batch=1, unet=TINY, log_every=1, fold_every=2)
    base.update(kw)
    return TrainConfig(**base)


def shapes(n=6, size=16, seed=0):
    return np.stack([img for img, _, _ in gen_shapes(n, size, seed)])[:, None]


class TestAdam:
    """The bias-corrected Adam update."""

    def test_first_step_is_lr_sign(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        state = AdamState.for_params([x])
        adam_step(state, [x], [np.array([0.3, -5.0, 1e-3])], lr=0.01)
        assert np.allclose(x.data - np.array([1.0, -2.0, 3.0]), [-0.01, 0.01, -0.01], atol=1e-7)

    def test_zero_grad_no_change(self):
        x = Tensor(np.array([0.5, 1.5]), requires_grad=True)
        adam_step(AdamState.for_params([x]), [x], [np.zeros(2)], lr=0.1)
        assert np.array_equal(x.data, [0.5, 1.5])

    def test_quadratic_descent(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([x], lr=0.1)
        for _ in range(100):
            opt.zero_grad()
            x.grad = 2 * x.data
            opt.step()
        assert abs(x.item()) < 0.05

    def test_nonfinite_grad_aborts(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(NonFiniteError):
            adam_step(AdamState.for_params([x]), [x], [np.array([np.nan])], lr=0.1)
        assert x.item() == 1.0

    def test_invalid_arguments(self):
        x = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(ValueError):
            adam_step(AdamState.for_params([x]), [x], [np.zeros(2)], lr=0.0)
        with pytest.raises(ValueError):
            adam_step(AdamState.for_params([x]), [x], [np.zeros(3)], lr=0.1)


class TestAugment:
    """Flips plus Gaussian affine perturbation."""

    def img(self):
        return np.random.default_rng(0).random((1, 1, 12, 12))

    def test_identity(self):
        out = affine_augment(self.img(), np.random.default_rng(0), AugmentConfig(gamma=0.0), flips=[1, 1])
        assert np.abs(out.data - self.img()).max() < 1e-12

    def test_flip(self):
        out = affine_augment(self.img(), np.random.default_rng(0), AugmentConfig(gamma=0.0), flips=[-1, 1])
        assert np.abs(out.data - self.img()[:, :, ::-1, :]).max() < 1e-12

    def test_deterministic_and_in_range(self):
        a, b = self.img(), self.img()[:, :, ::-1]
        x1 = augment_pair(a, b, np.random.default_rng(5), AugmentConfig())
        x2 = augment_pair(a, b, np.random.default_rng(5), AugmentConfig())
        assert x1[0].tobytes() == x2[0].tobytes() and x1[1].tobytes() == x2[1].tobytes()
        assert x1[0].min() >= 0.0 and x1[0].max() <= 1.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AugmentConfig(gamma=-0.1)


class TestConfig:
    """TrainConfig defaults and validation."""

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.iters_per_stage, cfg.lam) == (5e-5, 50000, 1.5)
        assert TrainConfig(sim=SimilarityConfig("mse")).lam == 0.2
        assert default_lambda("lncc") == 1.5

    def test_lam_overrides_regularizer(self):
        assert TrainConfig(lam=3.0, reg=RegularizerConfig("icon", lam=9.0)).reg.lam == 3.0

    def test_desk_config(self):
        cfg = desk_config(seed=4)
        assert cfg.lr == 5e-4 and cfg.iters_per_stage == 2000 and cfg.seed == 4

    @pytest.mark.parametrize("kw", [dict(lr=0.0), dict(iters_per_stage=0), dict(batch=0), dict(stages=3), dict(log_every=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestDatasets:
    """Pair sampling."""

    def test_corpus_draws_distinct_images(self):
        corpus = ImageCorpus(np.arange(5)[:, None, None, None] * np.ones((5, 1, 4, 4)))
        a, b = corpus.sample(np.random.default_rng(0), 200)
        assert np.all(a[:, 0, 0, 0] != b[:, 0, 0, 0])
        assert corpus.shape == (4, 4) and len(corpus) == 5

    def test_corpus_errors(self):
        with pytest.raises(ValueError):
            ImageCorpus(np.zeros((1, 4, 4)))

    def test_pair_list(self):
        pairs = PairList(np.zeros((3, 4, 4)), np.ones((3, 4, 4)))
        a, b = pairs.sample(np.random.default_rng(0), 2)
        assert a.shape == (2, 1, 4, 4) and np.all(b == 1)
        with pytest.raises(ValueError):
            PairList(np.zeros((3, 4, 4)), np.zeros((2, 4, 4)))


class TestTrain:
    """The two-stage loop."""

    def test_identical_pair_zero_loss(self):
        img = shapes(1)
        model = make_stage1(TINY, 0)
        before = [p.data.copy() for p in model.parameters()]
        result = train(model, PairList(img, img), tiny_config(iters_per_stage=1, stages=1, sim=SimilarityConfig("mse")))
        row = result.rows[0]
        assert float(row[4]) < 1e-20
        assert all(np.array_equal(p.data, q) for p, q in zip(model.parameters(), before))

    def test_curve_schema_and_determinism(self):
        data = ImageCorpus(shapes())
        r1 = train(make_stage1(TINY, 1), data, tiny_config(seed=3))
        r2 = train(make_stage1(TINY, 1), data, tiny_config(seed=3))
        assert r1.curve_csv() == r2.curve_csv()
        lines = r1.curve_csv().splitlines()
        assert lines[0] == ",".join(CURVE_COLUMNS) and len(lines) == 9
        assert [int(l.split(",")[0]) for l in lines[1:]] == list(range(8))
        assert r1.stage1 is not None and len(r1.model.parameters()) > len(r1.stage1.parameters())

    def test_fold_cadence(self):
        r = train(make_stage1(TINY, 1), ImageCorpus(shapes()), tiny_config(stages=1, iters_per_stage=5))
        folds = [row[5] for row in r.rows]
        assert folds[0] != "" and folds[1] == "" and folds[4] != ""

    def test_lambda_zero_matches_across_regularizers(self):
        data = ImageCorpus(shapes())
        curves = []
        for kind in ("icon", "gradicon", "bending", "diffusion"):
            r = train(make_stage1(TINY, 2), data, tiny_config(lam=0.0, reg=RegularizerConfig(kind), stages=1))
            curves.append([row[:3] for row in r.rows])
        assert all(c == curves[0] for c in curves)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self):
        huge = tiny_config(lr=1e300, stages=1, iters_per_stage=6)
        with pytest.raises(TrainingDiverged) as info:
            train(make_stage1(TINY, 0), ImageCorpus(shapes()), huge)
        assert info.value.snapshot and info.value.iteration >= 1

    def test_short_run_improves(self):
        imgs = shapes(12, 32, seed=5)
        cfg = tiny_config(stages=1, iters_per_stage=80, batch=2, log_every=79, fold_every=79, unet=UNetSpec(2, 4))
        r = train(make_stage1(cfg.unet, 0), ImageCorpus(imgs), cfg)
        sim = r.column("sim_ab") + r.column("sim_ba")
        assert sim[-1] < sim[0]


class TestInstance:
    """Guarded test-time refinement."""

    def pair(self, seed=0):
        imgs = shapes(2, 16, seed)
        return imgs[:1], imgs[1:]

    def test_optimal_pair_unchanged(self):
        a, _ = self.pair()
        res = instance_optimize((Identity(), Identity()), a, a, SimilarityConfig("mse"), iters=5)
        assert res.report.total < 1e-20
        for phi in (res.phi_ab, res.phi_ba):
            pts = np.random.default_rng(0).random((1, 2, 20))
            assert np.array_equal(phi(pts).data, pts)

    def test_zero_iters_identity(self):
        a, b = self.pair()
        res = instance_optimize(IdentityPredictor(), a, b, iters=0)
        assert not res.accepted and res.final == res.initial
        assert isinstance(res.phi_ab, Identity)

    def test_refinement_decreases(self):
        a, b = self.pair(1)
        res = instance_optimize(IdentityPredictor(), a, b, iters=20, lr=5e-3)
        assert res.accepted and res.final.total < res.initial.total

    def test_guard(self):
        a, b = self.pair(2)
        res = instance_optimize(IdentityPredictor(), a, b, iters=3, lr=10.0)
        assert res.report.total <= res.initial.total


class TestSplitPair:
    """Splitting a stacked map into its two directions."""

    def test_field_halves(self):
        disp = np.random.default_rng(0).normal(0, 0.01, (4, 2, 8, 8))
        ab, ba = split_pair(FieldMap(disp), 2)
        assert np.array_equal(ab.displacement.data, disp[:2]) and np.array_equal(ba.displacement.data, disp[2:])

    def test_model_output(self):
        a, b = shapes(2, 16)[:1], shapes(2, 16)[1:]
        field = DirectField(np.random.default_rng(1).normal(0, 0.01, (2, 2, 16, 16)))
        ab, ba = split_pair(predict_pair(field, a, b), 1)
        pts = np.random.default_rng(2).random((1, 2, 10))
        ref = field.displacement.data
        assert ab(pts).shape == (1, 2, 10)
        assert not np.allclose(ab(pts).data, ba(pts).data) and ref.shape[0] == 2
