"""Stage orchestration with an on-disk cache.

Every stage result is keyed by the config fields it depends on plus its
variant arguments, so ablation rows that share upstream stages (dataset,
frozen teacher, basic pre-training) compute them once. Cached checkpoints use
the ``nets`` format; per-step loss logs are written as CSV next to them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import torch

from . import curriculum, finetune as ft
from .data import TensorSet, load_split
from .errors import ConfigError
from .evalkit.metrics import evaluate
from .fogsim import MANIFEST_NAME, build_dataset
from .losses import write_loss_csv
from .nets import build_segnet, load_checkpoint, save_checkpoint, splice_encoder

logger = logging.getLogger(__name__)

DATA_KEYS = ("seed", "height", "width", "num_classes", "n_train", "n_test", "n_real", "n_real_test",
             "synthetic_beta", "real_beta", "airlight", "real_airlight_amplitude")
ARCH_KEYS = ("n_stages", "stage_channels", "stem_channels", "num_classes")
CLEAN_KEYS = DATA_KEYS + ARCH_KEYS + ("clean_steps", "clean_batch", "clean_lr", "momentum", "poly_power")
PRETRAIN_KEYS = CLEAN_KEYS + ("pretrain_steps", "pretrain_batch", "pretrain_lr", "pretrain_lr_end",
                              "adam_beta1", "adam_beta2", "dfnet_init")
FDM_KEYS = PRETRAIN_KEYS + ("pretrain_loss", "decoder_depth", "fdm_steps", "fdm_lr", "fdm_lr_end", "fdm_rounds")
FINETUNE_KEYS = FDM_KEYS + ("finetune_steps", "finetune_batch", "lr_encoder", "lr_decoder",
                            "lambda_con", "kl_direction", "finetune_input", "gamma")

EVAL_SPLITS = {
    # name -> (dataset split, score clean rasters)
    "fog_test": ("real_test", False),
    "synth_test": ("test", False),
    "clean_test": ("test", True),
}


def output_root(default="runs"):
    return Path(os.environ.get("DEFOGSEG_OUT", default))


class Runner:
    """Computes (or loads) pipeline stages for one RunConfig."""

    def __init__(self, cfg, root=None, use_cache=True):
        self.cfg = cfg
        self.root = Path(root) if root is not None else output_root()
        self.use_cache = use_cache
        self._mem = {}

    # ---- keys & cache -------------------------------------------------
    def _key(self, stage, keys, **variant):
        d = {k: self.cfg.to_dict()[k] for k in keys}
        d["_stage"] = stage
        d.update({f"_{k}": v for k, v in variant.items()})
        return f"{stage}-{hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]}"

    def _cached(self, key, compute):
        if key in self._mem:
            return self._mem[key]
        path = self.root / "cache" / f"{key}.ckpt"
        if self.use_cache and path.exists():
            params = load_checkpoint(path)
        else:
            log = []
            params = compute(log)
            if self.use_cache:
                save_checkpoint(params, path, run_config=self.cfg.to_dict())
                if log:
                    write_loss_csv(log, path.with_suffix(".csv"))
            self._mem[key + ".log"] = log
        self._mem[key] = params
        return params

    def loss_log(self, key):
        if key + ".log" in self._mem and self._mem[key + ".log"]:
            return self._mem[key + ".log"]
        import csv
        path = self.root / "cache" / f"{key}.csv"
        if not path.exists():
            return []
        with open(path) as f:
            return [{k: (float(v) if k not in ("phase",) else v) for k, v in r.items()}
                    for r in csv.DictReader(f)]

    # ---- data ---------------------------------------------------------
    @property
    def data_dir(self):
        return self.root / "data" / self._key("data", DATA_KEYS)

    def dataset(self):
        d = self.data_dir
        if not (d / MANIFEST_NAME).exists():
            build_dataset(self.cfg.dataset(), d)
        return d

    def split(self, name, evaluation=False) -> TensorSet:
        key = ("split", name, evaluation)
        if key not in self._mem:
            self._mem[key] = load_split(self.dataset(), name, evaluation=evaluation)
        return self._mem[key]

    # ---- stages -------------------------------------------------------
    def fsnetc(self):
        key = self._key("fsnetc", CLEAN_KEYS)
        return self._cached(key, lambda log: curriculum.train_clean_baseline(
            self.split("train"), self.cfg, log=log))

    def basic_key(self, mode=None, joint=False, decoder_depth=None, data="synthetic", teacher="clean"):
        mode = mode or self.cfg.pretrain_loss
        decoder_depth = decoder_depth or self.cfg.decoder_depth
        return self._key("basic", PRETRAIN_KEYS, mode=mode, joint=joint, decoder_depth=decoder_depth,
                         data=data, teacher=teacher)

    def teacher(self, which="clean"):
        if which == "clean":
            return self.fsnetc()
        if which == "fog_finetuned":
            # fog segmentation weights of the decoupled pipeline used as the frozen teacher
            seg = self.finetuned("basic")
            return seg.copy(frozen=True, phase="clean_baseline", teacher_variant="fog_finetuned")
        raise ConfigError(f"unknown teacher {which!r}")

    def basic(self, mode=None, joint=False, decoder_depth=None, data="synthetic", teacher="clean"):
        """Basic pre-training on ``data`` in {synthetic, pseudo, union}; loss and depth default to the config's."""
        mode = mode or self.cfg.pretrain_loss
        decoder_depth = decoder_depth or self.cfg.decoder_depth
        key = self.basic_key(mode, joint, decoder_depth, data, teacher)

        def compute(log):
            fsnetc = self.teacher(teacher)
            cfg = self.cfg.replace(decoder_depth=decoder_depth)
            if data == "synthetic":
                pairs = self.split("train")
            else:
                pseudo = curriculum.pseudo_pairs_as_set(self.pseudo_pairs())
                pairs = pseudo if data == "pseudo" else TensorSet.concat(
                    [self._unlabelled(self.split("train")), pseudo])
            return curriculum.pretrain_basic(None, fsnetc, pairs, cfg, joint=joint, mode=mode, log=log)
        return self._cached(key, compute)

    @staticmethod
    def _unlabelled(ts):
        return TensorSet(ts.ids, ts.fog, ts.clean, None, ts.depth, ts.split)

    def pseudo_pairs(self):
        return curriculum.generate_pseudo_pairs(self.basic(), self.split("real"))

    def fdm(self, gamma=None):
        gamma = self.cfg.gamma if gamma is None else gamma
        key = self._key("fdm", FDM_KEYS, gamma=gamma)
        return self._cached(key, lambda log: curriculum.run_fdm(
            self.basic(), self.fsnetc(), self.split("train"), self.split("real"), self.cfg,
            gamma=gamma, log=log))

    def depth(self, use_dct, use_sed):
        key = self._key("depth", PRETRAIN_KEYS + ("decoder_depth",), use_dct=use_dct, use_sed=use_sed)
        return self._cached(key, lambda log: curriculum.pretrain_depth(
            self.cfg, self.fsnetc(), self.split("train"), use_dct=use_dct, use_sed=use_sed, log=log))

    def pretrained(self, init):
        """Resolve a pre-training variant name to its ParamSet (None for no pre-training)."""
        if init == "scratch":
            return None
        if init == "basic":
            return self.basic()
        if init == "fdm":
            return self.fdm()
        if init == "joint":
            raise ConfigError("single-stage joint training has no separate pre-training; use joint:staged")
        if init == "joint:staged":
            return self.basic(joint=True)
        if init.startswith("basic:"):
            # basic:<mode>[:<decoder_depth>[:<data>[:<teacher>]]]
            parts = init.split(":")[1:]
            names = ("mode", "decoder_depth", "data", "teacher")
            return self.basic(**dict(zip(names, parts)))
        if init.startswith("depth:"):
            flags = init.split(":")[1]
            return self.depth(use_dct="dct" in flags, use_sed="sed" in flags)
        raise ConfigError(f"unknown pre-training variant {init!r}")

    def finetune_key(self, init, flags):
        return self._key("finetune", FINETUNE_KEYS, init=init, flags=list(flags))

    def finetuned(self, init, flags=None):
        flags = tuple(flags) if flags is not None else (self.cfg.use_fog, self.cfg.use_cl, self.cfg.use_con)
        key = self.finetune_key(init, flags)

        def compute(log):
            if init == "joint":
                return curriculum.train_joint(self.fsnetc(), self.split("train"), self.cfg, flags, log=log)
            pre = self.pretrained(init)
            seg = ft.init_from_pretrain(pre, build_segnet(self.cfg.arch(), self.cfg.seed + 13))
            dfnet = pre if self.cfg.finetune_input == "defogged" else None
            return ft.finetune(seg, self.split("train"), self.cfg, use_fog=flags[0], use_cl=flags[1],
                               use_con=flags[2], dfnet=dfnet, log=log)
        return self._cached(key, compute)

    def spliced(self, encoder_from):
        """FSnet-C decoder with an encoder from another stage, no fine-tuning."""
        fsnetc = self.fsnetc()
        if encoder_from == "fsnetc":
            return fsnetc
        return splice_encoder(self.pretrained(encoder_from), fsnetc)

    # ---- evaluation ---------------------------------------------------
    def evaluate(self, seg, splits=("fog_test", "synth_test", "clean_test")):
        out = {}
        for name in splits:
            split, clean = EVAL_SPLITS[name]
            out[name] = evaluate(seg, self.split(split, evaluation=True), use_clean=clean,
                                 batch=self.cfg.eval_batch)
        return out

    def pipeline(self):
        """Full method in order: teacher, basic pre-training, FDM, fine-tuning. Returns metrics."""
        torch.manual_seed(self.cfg.seed)
        seg = self.finetuned("fdm")
        return seg, self.evaluate(seg)
