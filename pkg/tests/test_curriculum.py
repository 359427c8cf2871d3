import numpy as np
import pytest
import torch

from conftest import tiny_config
from defogseg import curriculum
from defogseg.curriculum import (CurriculumState, generate_pseudo_pairs, interpolate_weights,
                                 pretrain_basic, pretrain_depth, pretrain_fdm)
from defogseg.errors import ConfigError, ContractError, SpliceError
from defogseg.evalkit.metrics import evaluate, psnr
from defogseg.nets import ArchConfig, build_dfnet, build_segnet, dfnet_forward, load_checkpoint, save_checkpoint


@pytest.fixture(scope="module")
def cfg():
    return tiny_config()


@pytest.fixture(scope="module")
def train(tiny_runner):
    return tiny_runner.split("train")


@pytest.fixture(scope="module")
def fsnetc(tiny_runner):
    return tiny_runner.fsnetc()


@pytest.fixture(scope="module")
def basic(tiny_runner):
    return tiny_runner.basic()


def _bytes(params):
    return {k: v.numpy().tobytes() for k, v in params.items()}


class TestState:
    def test_gamma_range(self):
        with pytest.raises(ConfigError):
            CurriculumState("fdm", 0, 1.5, None, 0)

    def test_phase(self):
        with pytest.raises(ConfigError):
            CurriculumState("warmup", 0, 0.1, None, 0)


class TestCleanBaseline:
    def test_frozen_flag(self, fsnetc):
        assert fsnetc.meta["frozen"] is True
        assert fsnetc.meta["phase"] == "clean_baseline"

    def test_improves_over_untrained(self, tiny_runner, fsnetc, cfg):
        test = tiny_runner.split("test", evaluation=True)
        before = evaluate(build_segnet(cfg.arch(), cfg.seed), test, use_clean=True)["miou"]
        after = evaluate(fsnetc, test, use_clean=True)["miou"]
        assert after > before

    def test_deterministic(self, train, cfg):
        small = cfg.replace(clean_steps=3)
        a = curriculum.train_clean_baseline(train, small)
        b = curriculum.train_clean_baseline(train, small)
        assert a.equal(b)

    def test_needs_labels(self, tiny_runner, cfg):
        with pytest.raises(ConfigError):
            curriculum.train_clean_baseline(tiny_runner.split("real"), cfg)


class TestPretrainBasic:
    def test_teacher_untouched(self, fsnetc, train, cfg):
        before = _bytes(fsnetc)
        pretrain_basic(None, fsnetc, train, cfg.replace(pretrain_steps=3))
        assert _bytes(fsnetc) == before

    def test_rejects_unfrozen_teacher(self, fsnetc, train, cfg):
        with pytest.raises(ContractError):
            pretrain_basic(None, fsnetc.copy(frozen=False), train, cfg)

    def test_tag(self, basic):
        assert basic.meta["tag"] == "basic" and basic.meta["id"]

    def test_unknown_mode(self, fsnetc, train, cfg):
        with pytest.raises(ConfigError):
            pretrain_basic(None, fsnetc, train, cfg, mode="l2")

    @pytest.mark.parametrize("mode", ["dct", "sed", "l1"])
    def test_modes_log_their_terms(self, fsnetc, train, cfg, mode):
        log = []
        pretrain_basic(None, fsnetc, train, cfg.replace(pretrain_steps=2), mode=mode, log=log)
        key = {"dct": "dct", "sed": "sed", "l1": "l1_pix"}[mode]
        assert len(log) == 2 and all(r[key] > 0 for r in log)

    def test_joint_variant(self, fsnetc, train, cfg):
        log = []
        out = pretrain_basic(None, fsnetc, train, cfg.replace(pretrain_steps=2), joint=True, log=log)
        assert out.kind == "joint" and log[0]["fog_ce"] > 0

    def test_loss_decreases(self, fsnetc, train, cfg):
        # a loose budget at lr 1e-3 so a short run shows the trend
        log = []
        pretrain_basic(None, fsnetc, train, cfg.replace(pretrain_steps=40, pretrain_lr=1e-3,
                                                        pretrain_lr_end=1e-4), log=log)
        first = np.mean([r["total"] for r in log[:5]])
        last = np.mean([r["total"] for r in log[-5:]])
        assert last < first

    def test_checkpoint_round_trip(self, basic, tmp_path):
        save_checkpoint(basic, tmp_path / "b.ckpt")
        back = load_checkpoint(tmp_path / "b.ckpt")
        assert back.equal(basic) and back.meta["tag"] == "basic"


class TestPseudoPairs:
    def test_count_range_provenance(self, basic, tiny_runner):
        real = tiny_runner.split("real")
        pairs = generate_pseudo_pairs(basic, real, batch=4)
        assert len(pairs) == len(real)
        assert all(p.provenance == basic.meta["id"] for p in pairs)
        d = torch.stack([p.defogged for p in pairs])
        assert d.min() >= 0 and d.max() <= 1
        assert (d - real.fog).abs().mean() > 0

    def test_deterministic(self, basic, tiny_runner):
        real = tiny_runner.split("real")
        a, b = generate_pseudo_pairs(basic, real), generate_pseudo_pairs(basic, real)
        assert all(torch.equal(x.defogged, y.defogged) for x, y in zip(a, b))

    def test_needs_basic_tag(self, basic, tiny_runner):
        with pytest.raises(ContractError):
            generate_pseudo_pairs(basic.copy(tag="final"), tiny_runner.split("real"))


class TestInterpolate:
    def test_endpoints(self):
        cur, base = build_dfnet(ArchConfig(), 1), build_dfnet(ArchConfig(), 2)
        assert interpolate_weights(cur, base, 0.0).equal(cur)
        assert interpolate_weights(cur, base, 1.0).equal(base)

    def test_scalar_probe(self):
        cur = build_dfnet(ArchConfig(), 1)
        ones = cur.copy()
        zeros = cur.copy()
        for k in cur:
            ones[k] = torch.ones_like(cur[k])
            zeros[k] = torch.zeros_like(cur[k])
        out = interpolate_weights(ones, zeros, 0.01)
        for v in out.values():
            assert torch.all((v - 0.99).abs() <= 1e-7)

    def test_converges_to_base(self):
        cur, base = build_dfnet(ArchConfig(), 1), build_dfnet(ArchConfig(), 2)
        x = cur
        for _ in range(2000):
            x = interpolate_weights(x, base, 0.01)
        gap = max(float((x[k] - base[k]).abs().max()) for k in base)
        start = max(float((cur[k] - base[k]).abs().max()) for k in base)
        # 0.99**2000 is ~2e-9; float32 rounding leaves a floor near 1e-6
        assert gap < 1e-5 and gap < 1e-4 * start

    def test_mismatch(self):
        a, b = build_dfnet(ArchConfig(), 1), build_segnet(ArchConfig(), 1)
        with pytest.raises(SpliceError):
            interpolate_weights(a, b, 0.5)

    def test_gamma_range(self):
        a = build_dfnet(ArchConfig(), 1)
        with pytest.raises(ConfigError):
            interpolate_weights(a, a, -0.1)


@pytest.fixture(scope="module")
def pseudo(basic, tiny_runner):
    return generate_pseudo_pairs(basic, tiny_runner.split("real"))


class TestFDM:
    def test_gamma_one_is_fixed_point(self, basic, fsnetc, train, pseudo, cfg):
        out = pretrain_fdm(basic, fsnetc, train, pseudo, 1.0, cfg)
        assert out.equal(basic)

    def test_tags_and_teacher(self, basic, fsnetc, train, pseudo, cfg):
        before = _bytes(fsnetc)
        log = []
        out = pretrain_fdm(basic, fsnetc, train, pseudo, 0.01, cfg, log=log)
        assert out.meta["phase"] == "fdm" and out.meta["tag"] == "final"
        assert out.meta["pseudo_from"] == basic.meta["id"]
        assert len(log) == cfg.fdm_steps and not out.equal(basic)
        assert _bytes(fsnetc) == before

    def test_empty_pseudo(self, basic, fsnetc, train, cfg):
        with pytest.raises(ConfigError):
            pretrain_fdm(basic, fsnetc, train, [], 0.01, cfg)

    def test_needs_basic(self, basic, fsnetc, train, pseudo, cfg):
        with pytest.raises(ContractError):
            pretrain_fdm(basic.copy(tag="final"), fsnetc, train, pseudo, 0.01, cfg)

    def test_rounds(self, basic, fsnetc, train, tiny_runner, cfg):
        out = curriculum.run_fdm(basic, fsnetc, train, tiny_runner.split("real"), cfg.replace(fdm_rounds=2))
        assert out.meta["tag"] == "final"


class TestDepth:
    def test_shape(self, fsnetc, train, cfg):
        out = pretrain_depth(cfg.replace(pretrain_steps=2), fsnetc, train, use_dct=True, use_sed=True)
        pred, _ = dfnet_forward(out, train.fog[:2])
        assert pred.shape == (2, 1, 32, 32)

    def test_needs_a_loss(self, fsnetc, train, cfg):
        with pytest.raises(ConfigError):
            pretrain_depth(cfg, fsnetc, train, use_dct=False, use_sed=False)

    def test_error_decreases(self, fsnetc, train, cfg):
        log = []
        pretrain_depth(cfg.replace(pretrain_steps=40, pretrain_lr=1e-3, pretrain_lr_end=1e-4),
                       fsnetc, train, log=log)
        first = np.mean([r["depth_l1"] for r in log[:5]])
        last = np.mean([r["depth_l1"] for r in log[-5:]])
        assert last < first

    def test_normalize_range(self):
        d = curriculum.normalize_depth(torch.tensor([1.0, 2.0, 80.0, 500.0]))
        assert torch.allclose(d, torch.tensor([0.0, 0.0, 1.0, 1.0]))


def test_psnr_gain_is_measurable(basic, tiny_runner):
    # smoke check of the evaluation used by the defogging-efficacy criterion
    test = tiny_runner.split("test", evaluation=True)
    out, _ = dfnet_forward(basic, test.fog)
    assert np.isfinite(psnr(out, test.clean)) and np.isfinite(psnr(test.fog, test.clean))
