"""Segmentation fine-tuning on paired foggy/clean data."""

from __future__ import annotations

import logging

import torch

from . import losses
from .data import BatchSampler
from .errors import ConfigError, ContractError, DomainError
from .nets import ENCODER_PREFIX, dfnet_forward, make_module, params_of, splice_encoder

logger = logging.getLogger(__name__)


def lr_schedule(step, total_steps, lr0, power=0.5):
    """Polynomial decay ``lr0 * (1 - step/total) ** power``."""
    if total_steps <= 0:
        raise DomainError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise DomainError(f"step {step} outside [0, {total_steps}]")
    if lr0 <= 0:
        raise DomainError("lr0 must be positive")
    return lr0 * (1.0 - step / total_steps) ** power


def init_from_pretrain(dfnet, segnet):
    """``segnet`` with its encoder taken from ``dfnet``; pass ``dfnet=None`` for the no-pretrain baseline."""
    if dfnet is None:
        return segnet.copy(init="scratch")
    out = splice_encoder(dfnet, segnet)
    out.meta["init"] = "pretrained"
    return out


def param_groups(module, lr_encoder, lr_decoder):
    enc, dec = [], []
    for name, p in module.named_parameters():
        (enc if name.startswith(ENCODER_PREFIX) else dec).append(p)
    return [{"params": enc, "lr": lr_encoder, "lr0": lr_encoder, "name": "encoder"},
            {"params": dec, "lr": lr_decoder, "lr0": lr_decoder, "name": "decoder"}]


def make_optimizer(module, cfg):
    return torch.optim.SGD(param_groups(module, cfg.lr_encoder, cfg.lr_decoder), momentum=cfg.momentum)


def _set_lr(opt, step, total, power):
    for g in opt.param_groups:
        g["lr"] = lr_schedule(step, total, g["lr0"], power)


def finetune(seg, data, cfg, lambda_con=None, use_fog=None, use_cl=None, use_con=None,
             dfnet=None, log=None, seed=None):
    """Optimise fog CE + clean CE + lambda_con * KL on paired batches; returns the tuned ParamSet.

    Loss flags default to the config's. ``data`` must expose labels (a visible split).
    With ``cfg.finetune_input == 'defogged'`` the foggy branch sees ``dfnet``'s output.
    """
    lambda_con = cfg.lambda_con if lambda_con is None else lambda_con
    use_fog = cfg.use_fog if use_fog is None else use_fog
    use_cl = cfg.use_cl if use_cl is None else use_cl
    use_con = cfg.use_con if use_con is None else use_con
    if not (use_fog or use_cl or use_con):
        raise ConfigError("at least one of use_fog/use_cl/use_con must be set")
    if not data.has_labels or data.clean is None:
        raise ContractError(f"split {data.split!r} does not expose labels; refusing to fine-tune on it")
    if cfg.finetune_input == "defogged" and dfnet is None:
        raise ConfigError("finetune_input=defogged needs a DFnet checkpoint")
    seed = cfg.seed if seed is None else seed

    model = make_module(seg)
    model.train()
    opt = make_optimizer(model, cfg)
    sampler = BatchSampler(len(data), cfg.finetune_batch, seed + 401)
    total = cfg.finetune_steps
    rows = log if log is not None else []
    for step in range(total):
        _set_lr(opt, step, total, cfg.poly_power)
        idx = sampler.next()
        fog, clean, y = data.fog[idx], data.clean[idx], data.label[idx]
        if cfg.finetune_input == "defogged":
            with torch.no_grad():
                fog = dfnet_forward(dfnet, fog)[0]
        # one pass over the stacked pair keeps fog/clean rows aligned
        logits = model(torch.cat([fog, clean])).logits
        s_def, s_cl = logits[: len(idx)], logits[len(idx):]
        terms = {}
        total_loss = 0.0
        if use_fog:
            terms["fog_ce"] = losses.cross_entropy(s_def, y)
            total_loss = total_loss + terms["fog_ce"]
        if use_cl:
            terms["clean_ce"] = losses.cross_entropy(s_cl, y)
            total_loss = total_loss + terms["clean_ce"]
        if use_con:
            terms["kl_con"] = losses.kl_consistency(s_def, s_cl, cfg.kl_direction)
            total_loss = total_loss + lambda_con * terms["kl_con"]
        opt.zero_grad(set_to_none=True)
        total_loss.backward()
        opt.step()
        rows.append(losses.LossReport.of(total=total_loss, **terms).row(
            step, "finetune", opt.param_groups[0]["lr"]))
        if step % 500 == 0:
            logger.info("finetune step %d loss %.4f", step, total_loss.item())
    return params_of(model, **{**seg.meta, "phase": "finetune", "iteration": total,
                               "loss_flags": [use_fog, use_cl, use_con], "lambda_con": lambda_con})
