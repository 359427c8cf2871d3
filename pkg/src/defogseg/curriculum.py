"""Pre-training curriculum.

Phases run in this order:

1. ``train_clean_baseline`` trains a segmenter on clean scenes; the result is
   frozen and serves as the feature teacher (FSnet-C).
2. ``pretrain_basic`` trains the defogging network on synthetic fog/clean
   pairs with encoder alignment (DCT) plus segmentation-enhanced defogging (SED).
3. ``generate_pseudo_pairs`` defogs the unlabeled real-fog split with the
   basic weights; ``pretrain_fdm`` keeps training on synthetic + pseudo pairs
   while pulling the weights back toward the basic checkpoint by ``gamma``
   after every step.

``pretrain_depth`` is the depth-estimation pretext variant.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import torch

from . import losses
from .data import BatchSampler, TensorSet
from .errors import ConfigError, ContractError, SpliceError
from .finetune import lr_schedule, make_optimizer
from .nets import (ParamSet, build_dfnet, build_jointnet, build_segnet,
                   decoder_to_segnet, dfnet_forward, make_module, params_of, splice_encoder)

logger = logging.getLogger(__name__)

PHASES = ("clean_baseline", "pretrain_basic", "fdm", "pretrain_depth")


@dataclass
class CurriculumState:
    phase: str
    iteration: int
    gamma: float
    base_params: Optional[ParamSet]
    rng_seed: int

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")


@dataclass
class PseudoPair:
    id: str
    fog: torch.Tensor  # 3 x H x W
    defogged: torch.Tensor  # 3 x H x W, stands in for the clean image
    provenance: str  # id of the checkpoint that produced ``defogged``


def _decayed(step, total, lr0, lr_end):
    """Linear decay from lr0 to lr_end over ``total`` steps."""
    if total <= 1:
        return lr0
    return lr0 + (lr_end - lr0) * step / (total - 1)


def _frozen_teacher(fsnetc):
    if not fsnetc.meta.get("frozen"):
        raise ContractError("FSnet-C must be a frozen clean-baseline checkpoint")
    teacher = make_module(fsnetc)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def _adam(params, cfg, lr):
    return torch.optim.Adam(params, lr=lr, betas=(cfg.adam_beta1, cfg.adam_beta2))


# --------------------------------------------------------------------------
# phase 0: clean-weather segmenter
# --------------------------------------------------------------------------

def train_clean_baseline(data: TensorSet, cfg, seed=None, log=None) -> ParamSet:
    """Cross-entropy training on clean images only; returns a frozen ParamSet."""
    if not data.has_labels or data.clean is None:
        raise ConfigError(f"clean baseline needs a labelled split, {data.split!r} has none")
    seed = cfg.seed if seed is None else seed
    model = make_module(build_segnet(cfg.arch(), seed))
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=cfg.clean_lr, momentum=cfg.momentum)
    sampler = BatchSampler(len(data), cfg.clean_batch, seed + 101)
    rows = log if log is not None else []
    for step in range(cfg.clean_steps):
        lr = lr_schedule(step, cfg.clean_steps, cfg.clean_lr, cfg.poly_power)
        for g in opt.param_groups:
            g["lr"] = lr
        idx = sampler.next()
        loss = losses.cross_entropy(model(data.clean[idx]).logits, data.label[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rows.append(losses.LossReport.of(clean_ce=loss, total=loss).row(step, "clean_baseline", lr))
    return params_of(model, kind="segnet", arch=cfg.arch().to_dict(), seed=int(seed),
                     phase="clean_baseline", iteration=cfg.clean_steps, frozen=True)


# --------------------------------------------------------------------------
# defog pre-training
# --------------------------------------------------------------------------

def _init_dfnet(cfg, fsnetc, seed, arch=None):
    dfnet = build_dfnet(arch or cfg.arch(), seed)
    if cfg.dfnet_init == "fsnetc":
        dfnet = splice_encoder(fsnetc, dfnet)
    return dfnet


def _pretrain_terms(mode, teacher, defogged, enc_def, clean, ref_enc=None, ref_out=None):
    """Loss terms for one pre-training batch.

    ``ref_enc``/``ref_out`` are the teacher's outputs on ``clean`` (computed once per batch).
    """
    terms = {}
    if mode == "l1":
        terms["l1_pix"] = losses.l1_pixel_loss(defogged, clean)
        return terms
    if ref_out is None:
        with torch.no_grad():
            ref_out = teacher(clean)
    if "dct" in mode.split("+"):
        terms["dct"] = losses.dct_loss(enc_def, ref_out.encoder_feats)
    if "sed" in mode.split("+"):
        out_def = teacher(defogged)
        terms["sed"] = losses.sed_loss(out_def.decoder_feats, ref_out.decoder_feats,
                                       out_def.logits, ref_out.logits)
    return terms


def _defog_loop(model, teacher, pairs_fog, pairs_clean, cfg, steps, lr0, lr_end, seed, phase,
                mode, rows, anchor=None, gamma=0.0, labels=None):
    """Shared optimisation loop for the basic and FDM phases."""
    opt = _adam(model.parameters(), cfg, lr0)
    sampler = BatchSampler(len(pairs_fog), cfg.pretrain_batch, seed)
    model.train()
    anchor_tensors = None
    if anchor is not None:
        anchor_tensors = {k: v for k, v in anchor.items()}
    for step in range(steps):
        lr = _decayed(step, steps, lr0, lr_end)
        for g in opt.param_groups:
            g["lr"] = lr
        idx = sampler.next()
        fog, clean = pairs_fog[idx], pairs_clean[idx]
        if labels is not None:
            defogged, seg_out = model(fog)
            enc = seg_out.encoder_feats
        else:
            defogged, enc = model(fog)
        terms = _pretrain_terms(mode, teacher, defogged, enc, clean)
        if labels is not None:
            terms["fog_ce"] = losses.cross_entropy(seg_out.logits, labels[idx])
        loss = sum(terms.values())
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if anchor_tensors is not None:
            with torch.no_grad():
                for name, t in model.state_dict(keep_vars=True).items():
                    t.mul_(1.0 - gamma).add_(anchor_tensors[name], alpha=gamma)
        rows.append(losses.LossReport.of(total=loss, **terms).row(step, phase, lr))
        if step % 500 == 0:
            logger.info("%s step %d loss %.4f", phase, step, loss.item())


def pretrain_basic(dfnet: Optional[ParamSet], fsnetc: ParamSet, pairs: TensorSet, cfg,
                   joint=False, mode=None, seed=None, log=None) -> ParamSet:
    """Synthetic-pair defog pre-training; returns DFnet params tagged ``basic``.

    ``mode`` selects the objective (``dct+sed`` by default, or ``dct``, ``sed``,
    ``l1`` for the plain pixel baseline). With ``joint=True`` a segmentation
    decoder shares the encoder and its cross-entropy on the foggy image is
    added to the same objective; the returned ParamSet is then a ``joint`` kind.
    """
    teacher = _frozen_teacher(fsnetc)
    mode = mode or cfg.pretrain_loss
    if mode not in ("dct+sed", "dct", "sed", "l1"):
        raise ConfigError(f"unknown pre-training loss {mode!r}")
    if pairs.clean is None:
        raise ContractError("pre-training pairs need clean rasters")
    seed = cfg.seed if seed is None else seed
    if dfnet is None:
        dfnet = _init_dfnet(cfg, fsnetc, seed + 7)
    labels = None
    if joint:
        if not pairs.has_labels:
            raise ContractError("joint training needs labelled pairs")
        base = build_jointnet(dfnet.arch, seed + 11)
        for k in dfnet:
            base[k] = dfnet[k].clone()
        dfnet, labels = base, pairs.label
    model = make_module(dfnet)
    rows = log if log is not None else []
    _defog_loop(model, teacher, pairs.fog, pairs.clean, cfg, cfg.pretrain_steps, cfg.pretrain_lr,
                cfg.pretrain_lr_end, seed + 203, "pretrain_basic", mode, rows, labels=labels)
    out = params_of(model, **{**dfnet.meta, "phase": "pretrain_basic", "tag": "basic",
                              "iteration": cfg.pretrain_steps, "loss": mode, "joint": bool(joint),
                              "teacher": fsnetc.digest()[:16]})
    out.meta["id"] = out.digest()[:16]
    return out


@torch.no_grad()
def generate_pseudo_pairs(dfnet_basic: ParamSet, real_fog: TensorSet, batch=25) -> List[PseudoPair]:
    """Defog every real-fog image with the basic weights."""
    if dfnet_basic.meta.get("tag") != "basic":
        raise ContractError("pseudo pairs must come from a checkpoint tagged 'basic'")
    ckpt = dfnet_basic.meta.get("id") or dfnet_basic.digest()[:16]
    pairs = []
    for i in range(0, len(real_fog), batch):
        fog = real_fog.fog[i:i + batch]
        out, _ = dfnet_forward(dfnet_basic, fog)
        for j in range(len(fog)):
            pairs.append(PseudoPair(real_fog.ids[i + j], fog[j].clone(), out[j].clone(), ckpt))
    return pairs


def pseudo_pairs_as_set(pairs: List[PseudoPair]) -> TensorSet:
    fog = torch.stack([p.fog for p in pairs])
    return TensorSet([p.id for p in pairs], fog, torch.stack([p.defogged for p in pairs]), None,
                     torch.zeros(fog.shape[0], *fog.shape[2:]), "pseudo")


def interpolate_weights(current: ParamSet, base: ParamSet, gamma: float) -> ParamSet:
    """Per parameter: ``gamma * base + (1 - gamma) * current``. Exact at gamma in {0, 1}."""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma={gamma} outside [0, 1]")
    if list(current) != list(base):
        missing = sorted(set(current) ^ set(base))
        raise SpliceError(f"parameter names differ: {missing[:5]}")
    out = current.copy()
    for k in current:
        if current[k].shape != base[k].shape:
            raise SpliceError(f"shape mismatch for {k}")
        if gamma == 0.0:
            out[k] = current[k].clone()
        elif gamma == 1.0:
            out[k] = base[k].clone()
        else:
            out[k] = gamma * base[k] + (1.0 - gamma) * current[k]
    return out


def pretrain_fdm(dfnet_basic: ParamSet, fsnetc: ParamSet, synthetic: TensorSet,
                 pseudo: List[PseudoPair], gamma: float, cfg, seed=None, log=None) -> ParamSet:
    """Re-pretrain on synthetic + pseudo pairs, anchoring to the basic weights after every step.

    Optimizer moments restart from zero. Returns DFnet params tagged ``final``.
    """
    if not pseudo:
        raise ConfigError("FDM needs at least one pseudo pair")
    if dfnet_basic.meta.get("tag") != "basic":
        raise ContractError("FDM starts from a checkpoint tagged 'basic'")
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError("gamma must lie in [0, 1]")
    teacher = _frozen_teacher(fsnetc)
    seed = cfg.seed if seed is None else seed
    mixed = TensorSet.concat([TensorSet(synthetic.ids, synthetic.fog, synthetic.clean, None,
                                        synthetic.depth), pseudo_pairs_as_set(pseudo)])
    mode = dfnet_basic.meta.get("loss", cfg.pretrain_loss)
    rows = log if log is not None else []
    if gamma == 1.0:
        out = dfnet_basic.copy()
    else:
        model = make_module(dfnet_basic)
        _defog_loop(model, teacher, mixed.fog, mixed.clean, cfg, cfg.fdm_steps, cfg.fdm_lr,
                    cfg.fdm_lr_end, seed + 307, "fdm", mode, rows, anchor=dfnet_basic, gamma=gamma)
        out = params_of(model, **dfnet_basic.meta)
    out.meta.update(phase="fdm", tag="final", iteration=cfg.fdm_steps, gamma=gamma,
                    pseudo_from=pseudo[0].provenance)
    out.meta["id"] = out.digest()[:16]
    return out


def run_fdm(dfnet_basic, fsnetc, synthetic, real_fog, cfg, gamma=None, seed=None, log=None):
    """``fdm_rounds`` rounds of pseudo-pair generation + re-pretraining."""
    gamma = cfg.gamma if gamma is None else gamma
    current, anchor = dfnet_basic, dfnet_basic
    for r in range(max(cfg.fdm_rounds, 1)):
        source = current if r == 0 else current.copy(tag="basic")
        pseudo = generate_pseudo_pairs(source, real_fog)
        current = pretrain_fdm(anchor if r == 0 else source, fsnetc, synthetic, pseudo, gamma, cfg,
                               seed=None if seed is None else seed + r, log=log)
    return current


# --------------------------------------------------------------------------
# depth-estimation pretext
# --------------------------------------------------------------------------

def normalize_depth(depth, near=2.0, far=80.0):
    """Log-depth mapped to [0, 1]."""
    d = torch.as_tensor(depth).clamp(near, far)
    return (torch.log(d) - math.log(near)) / (math.log(far) - math.log(near))


def pretrain_depth(cfg, fsnetc: ParamSet, data: TensorSet, use_dct=False, use_sed=True,
                   seed=None, log=None) -> ParamSet:
    """Depth-prediction pre-training of a 1-channel DFnet from foggy input.

    The task loss is L1 to normalised log-depth. ``use_dct`` adds encoder
    alignment with the teacher on the paired clean image; ``use_sed`` feeds the
    depth network's encoder features through the frozen teacher decoder and
    matches decoder features and logits against the teacher's clean-image pass.
    """
    if not (use_dct or use_sed):
        raise ConfigError("depth pretext needs use_dct and/or use_sed")
    if data.clean is None:
        raise ContractError("depth pretext needs the paired clean images")
    teacher = _frozen_teacher(fsnetc)
    seed = cfg.seed if seed is None else seed
    arch = cfg.arch(out_channels=1, residual_output=False)
    dfnet = _init_dfnet(cfg, fsnetc, seed + 7, arch)
    model = make_module(dfnet)
    model.train()
    opt = _adam(model.parameters(), cfg, cfg.pretrain_lr)
    sampler = BatchSampler(len(data), cfg.pretrain_batch, seed + 509)
    target = normalize_depth(data.depth).unsqueeze(1)
    rows = log if log is not None else []
    steps = cfg.pretrain_steps
    for step in range(steps):
        lr = _decayed(step, steps, cfg.pretrain_lr, cfg.pretrain_lr_end)
        for g in opt.param_groups:
            g["lr"] = lr
        idx = sampler.next()
        fog, clean = data.fog[idx], data.clean[idx]
        pred, enc = model(fog)
        terms = {"depth_l1": losses.l1_similarity(pred, target[idx])}
        with torch.no_grad():
            ref = teacher(clean)
        if use_dct:
            terms["dct"] = losses.dct_loss(enc, ref.encoder_feats)
        if use_sed:
            logits, dec = teacher.decoder(enc, fog.shape[-2:])
            terms["sed"] = losses.sed_loss(dec, ref.decoder_feats, logits, ref.logits)
        loss = sum(terms.values())
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rows.append(losses.LossReport.of(total=loss, **terms).row(step, "pretrain_depth", lr))
    out = params_of(model, **{**dfnet.meta, "phase": "pretrain_depth", "tag": "depth",
                              "iteration": steps, "use_dct": use_dct, "use_sed": use_sed})
    out.meta["id"] = out.digest()[:16]
    return out


@torch.no_grad()
def depth_mae(dfnet_depth: ParamSet, data: TensorSet):
    pred, _ = dfnet_forward(dfnet_depth, data.fog)
    return float((pred[:, 0] - normalize_depth(data.depth)).abs().mean())


# --------------------------------------------------------------------------
# single-stage joint training (the coupled baseline)
# --------------------------------------------------------------------------

def train_joint(fsnetc: ParamSet, data: TensorSet, cfg, flags=(True, True, True), seed=None,
                log=None) -> ParamSet:
    """Defogging and segmentation optimised together on one shared encoder.

    No separate pre-training: from a fresh joint net, every step sums the
    fine-tuning terms (fog CE, clean CE, lambda_con * KL, per ``flags``) with
    the defogging terms (DCT + SED against the frozen teacher). Uses the
    fine-tuning optimiser and budget. Returns the segmentation branch as a
    segnet ParamSet.
    """
    from .finetune import _set_lr
    use_fog, use_cl, use_con = flags
    if not (use_fog or use_cl or use_con):
        raise ConfigError("at least one of use_fog/use_cl/use_con must be set")
    if not data.has_labels or data.clean is None:
        raise ContractError(f"split {data.split!r} does not expose labels")
    teacher = _frozen_teacher(fsnetc)
    seed = cfg.seed if seed is None else seed
    model = make_module(build_jointnet(cfg.arch(), seed + 11))
    model.train()
    opt = make_optimizer(model, cfg)
    sampler = BatchSampler(len(data), cfg.finetune_batch, seed + 401)
    total = cfg.finetune_steps
    rows = log if log is not None else []
    for step in range(total):
        _set_lr(opt, step, total, cfg.poly_power)
        idx = sampler.next()
        fog, clean, y = data.fog[idx], data.clean[idx], data.label[idx]
        n = len(idx)
        defogged, seg_out = model(torch.cat([fog, clean]))
        s_def, s_cl = seg_out.logits[:n], seg_out.logits[n:]
        enc_fog = [f[:n] for f in seg_out.encoder_feats]
        terms = _pretrain_terms(cfg.pretrain_loss, teacher, defogged[:n], enc_fog, clean)
        if use_fog:
            terms["fog_ce"] = losses.cross_entropy(s_def, y)
        if use_cl:
            terms["clean_ce"] = losses.cross_entropy(s_cl, y)
        if use_con:
            terms["kl_con"] = losses.kl_consistency(s_def, s_cl, cfg.kl_direction)
        loss = sum(cfg.lambda_con * v if k == "kl_con" else v for k, v in terms.items())
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rows.append(losses.LossReport.of(total=loss, **terms).row(step, "joint", opt.param_groups[0]["lr"]))
        if step % 500 == 0:
            logger.info("joint step %d loss %.4f", step, loss.item())
    joint = params_of(model, kind="joint", arch=cfg.arch().to_dict(), seed=int(seed), phase="joint",
                      iteration=total, loss_flags=list(flags), teacher=fsnetc.digest()[:16])
    return decoder_to_segnet(joint)
