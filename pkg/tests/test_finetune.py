import math

import pytest
import torch

from conftest import tiny_config
from defogseg.errors import ConfigError, ContractError, DomainError
from defogseg.finetune import finetune, init_from_pretrain, lr_schedule, make_optimizer
from defogseg.nets import ENCODER_PREFIX, ArchConfig, build_dfnet, build_segnet, make_module


class TestSchedule:
    def test_endpoints(self):
        assert lr_schedule(0, 100, 0.01) == 0.01
        assert lr_schedule(100, 100, 0.01) == 0.0

    def test_midpoint(self):
        assert abs(lr_schedule(50, 100, 0.01) - 0.01 * math.sqrt(0.5)) <= 1e-12
        assert abs(lr_schedule(50, 100, 0.01) - 0.0070711) <= 1e-7

    @pytest.mark.parametrize("args", [(101, 100, 0.01), (-1, 100, 0.01), (0, 0, 0.01), (0, 10, 0.0)])
    def test_domain(self, args):
        with pytest.raises(DomainError):
            lr_schedule(*args)

    def test_monotone(self):
        vals = [lr_schedule(s, 30, 1e-2) for s in range(31)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestInit:
    def test_splice(self):
        arch = ArchConfig()
        df, seg = build_dfnet(arch, 1), build_segnet(arch, 2)
        out = init_from_pretrain(df, seg)
        for k in out:
            src = df if k.startswith(ENCODER_PREFIX) else seg
            assert torch.equal(out[k], src[k])

    def test_scratch(self):
        seg = build_segnet(ArchConfig(), 2)
        out = init_from_pretrain(None, seg)
        assert out.equal(seg) and out.meta["init"] == "scratch"


def test_group_lrs_at_step_zero():
    cfg = tiny_config()
    opt = make_optimizer(make_module(build_segnet(cfg.arch(), 0)), cfg)
    lrs = {g["name"]: g["lr"] for g in opt.param_groups}
    assert lrs == {"encoder": 1e-3, "decoder": 1e-2}
    assert all(g["momentum"] == 0.9 for g in opt.param_groups)


@pytest.fixture(scope="module")
def train(tiny_runner):
    return tiny_runner.split("train")


class TestFinetune:
    def test_logs_every_step(self, train):
        cfg = tiny_config(finetune_steps=4)
        log = []
        out = finetune(build_segnet(cfg.arch(), 0), train, cfg, log=log)
        assert [r["iteration"] for r in log] == [0, 1, 2, 3]
        assert all(r["phase"] == "finetune" for r in log)
        assert out.meta["loss_flags"] == [True, True, True] and out.meta["lambda_con"] == 1e-4

    def test_first_logged_lrs(self, train):
        cfg = tiny_config(finetune_steps=2)
        log = []
        finetune(build_segnet(cfg.arch(), 0), train, cfg, log=log)
        assert log[0]["lr"] == 1e-3

    def test_fog_only_terms(self, train):
        cfg = tiny_config(finetune_steps=2)
        log = []
        finetune(build_segnet(cfg.arch(), 0), train, cfg, use_cl=False, use_con=False, log=log)
        assert log[0]["fog_ce"] > 0 and "clean_ce" not in log[0] and "kl_con" not in log[0]

    def test_all_flags_off(self, train):
        cfg = tiny_config()
        with pytest.raises(ConfigError):
            finetune(build_segnet(cfg.arch(), 0), train, cfg, use_fog=False, use_cl=False, use_con=False)

    def test_refuses_hidden_labels(self, tiny_runner):
        cfg = tiny_config()
        with pytest.raises(ContractError):
            finetune(build_segnet(cfg.arch(), 0), tiny_runner.split("real"), cfg)

    def test_defogged_input_needs_dfnet(self, train):
        cfg = tiny_config(finetune_input="defogged")
        with pytest.raises(ConfigError):
            finetune(build_segnet(cfg.arch(), 0), train, cfg)

    def test_defogged_input(self, train):
        cfg = tiny_config(finetune_input="defogged", finetune_steps=2)
        finetune(build_segnet(cfg.arch(), 0), train, cfg, dfnet=build_dfnet(cfg.arch(), 0))

    def test_deterministic(self, train):
        cfg = tiny_config(finetune_steps=3)
        a = finetune(build_segnet(cfg.arch(), 0), train, cfg)
        b = finetune(build_segnet(cfg.arch(), 0), train, cfg)
        assert a.equal(b)

    def test_loss_decreases(self, train):
        cfg = tiny_config(finetune_steps=60)
        log = []
        finetune(build_segnet(cfg.arch(), 0), train, cfg, log=log)
        assert sum(r["total"] for r in log[-10:]) < sum(r["total"] for r in log[:10])

