"""Training objectives.

Pyramid terms reduce each stage by its element mean and then sum over stages,
so stages with very different element counts stay commensurate. Logits are
N x K x H x W tensors (torch layout); labels are N x H x W with 255 = ignore.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, NumericError

IGNORE = 255
PROB_FLOOR = 1e-12
LAMBDA_CON = 1e-4

REPORT_KEYS = ("dct", "sed", "l1_pix", "fog_ce", "clean_ce", "kl_con", "depth_l1", "total")


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_similarity(a, b):
    """Mean absolute difference over all elements."""
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    _check_same(a, b, "l1_similarity")
    return (a - b).abs().mean()


def _pyramid_l1(p, q, what):
    if len(p) != len(q):
        raise DimensionError(f"{what}: pyramid lengths differ ({len(p)} vs {len(q)})")
    if not len(p):
        raise DimensionError(f"{what}: empty pyramid")
    return sum(l1_similarity(x, y) for x, y in zip(p, q))


def dct_loss(e_def: Sequence[torch.Tensor], e_cl: Sequence[torch.Tensor]):
    """Encoder alignment: defogging encoder on fog vs frozen clean encoder on the paired clean image.

    The clean-side features are detached; only ``e_def`` receives gradient.
    """
    return _pyramid_l1(e_def, [e.detach() for e in e_cl], "dct_loss")


def sed_loss(d_def, d_cl, s_def, s_cl):
    """Decoder-feature and raw-logit agreement of the frozen segmenter on defogged vs clean input.

    Clean-side tensors are detached, so gradient reaches only the producer of
    the defogged image.
    """
    _check_same(s_def, s_cl, "sed_loss logits")
    return _pyramid_l1(d_def, [d.detach() for d in d_cl], "sed_loss") + l1_similarity(s_def, s_cl.detach())


def cross_entropy(logits, labels, ignore_index=IGNORE):
    """Pixel-wise CE averaged over non-ignored pixels."""
    if logits.shape[:1] + logits.shape[2:] != labels.shape:
        raise DimensionError(f"logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}")
    labels = labels.long()
    valid = labels != ignore_index
    if not bool(valid.any()):
        raise NumericError("every pixel is ignored; cross-entropy is undefined")
    if bool((labels[valid] >= logits.shape[1]).any()) or bool((labels[valid] < 0).any()):
        raise DimensionError("label value outside [0, K)")
    return F.cross_entropy(logits, labels, ignore_index=ignore_index, reduction="mean")


def _log_probs(logits):
    # floor probabilities so that log stays finite when a class gets zero mass
    return torch.log(torch.softmax(logits, dim=1).clamp_min(PROB_FLOOR))


def kl_consistency(s_def, s_cl, direction="clean_ref"):
    """Pixel-mean KL divergence between the two branches' class posteriors.

    ``direction='clean_ref'`` computes KL(p_cl || p_def) (clean branch as the
    reference); ``'def_ref'`` flips it. Gradient flows into both inputs.
    """
    _check_same(s_def, s_cl, "kl_consistency")
    if direction == "clean_ref":
        ref, other = s_cl, s_def
    elif direction == "def_ref":
        ref, other = s_def, s_cl
    else:
        raise ConfigError(f"unknown kl direction {direction!r}")
    p_ref = torch.softmax(ref, dim=1)
    kl = (p_ref * (_log_probs(ref) - _log_probs(other))).sum(dim=1)
    return kl.mean()


def finetune_total(fog_ce, clean_ce, kl, lambda_con=LAMBDA_CON):
    if lambda_con < 0:
        raise ConfigError("lambda_con must be >= 0")
    return fog_ce + clean_ce + lambda_con * kl


def l1_pixel_loss(defogged, clean):
    """Plain pixel L1 between a defogged raster and its clean counterpart."""
    return l1_similarity(defogged, clean)


@dataclass
class LossReport:
    values: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def of(cls, **terms):
        vals = {}
        for k, v in terms.items():
            if v is None:
                continue
            if k not in REPORT_KEYS:
                raise KeyError(k)
            v = float(v.detach()) if torch.is_tensor(v) else float(v)
            if not math.isfinite(v):
                raise NumericError(f"loss term {k} is not finite")
            vals[k] = v
        return cls(vals)

    def __getitem__(self, k):
        return self.values[k]

    def row(self, iteration, phase, lr=None):
        r = {"iteration": iteration, "phase": phase}
        if lr is not None:
            r["lr"] = lr
        r.update({k: self.values[k] for k in REPORT_KEYS if k in self.values})
        return r


def write_loss_csv(rows, path):
    """One CSV row per step: iteration, phase, lr, then the named loss columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    present = {k for r in rows for k in r}
    cols = [c for c in ("iteration", "phase", "lr") + REPORT_KEYS if c in present]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})
