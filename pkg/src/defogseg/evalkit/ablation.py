"""Ablation presets (one row per compared variant), run across seeds."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from ..errors import ConfigError

logger = logging.getLogger(__name__)

ALL_FLAGS = (True, True, True)


@dataclass(frozen=True)
class Row:
    label: str
    kind: str  # finetune | splice
    init: str
    flags: tuple = ALL_FLAGS


def _ft(label, init, flags=ALL_FLAGS):
    return Row(label, "finetune", init, tuple(flags))


PRESETS: Dict[str, List[Row]] = {
    "table2": [
        _ft("(i) no pre-training", "scratch"),
        _ft("(ii) joint", "joint"),
        _ft("(iii) decoupled", "basic"),
        _ft("D2SL (decoupled + FDM)", "fdm"),
    ],
    "fig1c": [
        _ft("joint", "joint"),
        _ft("decoupled", "basic"),
    ],
    "table3": [
        _ft("(i) no pre-training", "scratch"),
        _ft("(ii) DCT only", "basic:dct"),
        _ft("(iii) SED only", "basic:sed"),
        _ft("(iv) plain L1", "basic:l1"),
        _ft("D2SL w/o FDM (DCT+SED)", "basic"),
    ],
    "table4": [
        _ft("(i) fog", "basic", (True, False, False)),
        _ft("(ii) fog + clean", "basic", (True, True, False)),
        _ft("D2SL w/o FDM (fog + clean + con)", "basic", ALL_FLAGS),
    ],
    "table5": [
        _ft("(i) real fog only", "basic:dct+sed:light:pseudo"),
        _ft("(ii) synthetic only", "basic"),
        _ft("(iii) synthetic + real, no FDM", "basic:dct+sed:light:union"),
        _ft("D2SL (FDM)", "fdm"),
    ],
    "table6": [
        Row("(i) D2SL encoder", "splice", "fdm"),
        Row("(ii) plain-L1 encoder", "splice", "basic:l1"),
        Row("(iii) FSnet-C encoder", "splice", "fsnetc"),
    ],
    "table7": [
        _ft("(i) no pre-training", "scratch"),
        _ft("(ii) heavy decoder", "basic:dct+sed:heavy"),
        _ft("D2SL w/o FDM (light decoder)", "basic"),
    ],
    "table8": [
        _ft("(i) no pre-training", "scratch"),
        _ft("(ii) depth pretext, SED", "depth:sed"),
        _ft("(iii) depth pretext, DCT+SED", "depth:dct+sed"),
        _ft("D2SL w/o FDM", "basic"),
    ],
    "fsnetc_weights": [
        _ft("(i) no pre-training", "scratch"),
        _ft("(ii) fog-tuned teacher", "basic:dct+sed:light:synthetic:fog_finetuned"),
        _ft("D2SL w/o FDM (clean teacher)", "basic"),
    ],
    "fig8": [
        _ft("joint", "joint"),
        _ft("pre-training with L1", "basic:l1"),
        _ft("D2SL", "fdm"),
    ],
}

METRIC_SPLITS = ("fog_test", "synth_test", "clean_test")


@dataclass
class AblationSpec:
    preset: str
    seeds: List[int] = field(default_factory=lambda: [1, 2, 3])
    overrides: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")


@dataclass
class AblationResult:
    preset: str
    seeds: List[int]
    rows: List[dict]  # label, init, flags, n_seeds, <split>_mean, <split>_std
    per_seed: List[dict]  # label, seed, <split> mIoU
    curves: Dict[str, Dict[int, list]] = field(default_factory=dict)  # label -> seed -> loss rows
    config: Dict = field(default_factory=dict)

    def row(self, label_prefix):
        for r in self.rows:
            if r["label"].startswith(label_prefix):
                return r
        raise KeyError(label_prefix)

    def mean(self, label_prefix, split="fog_test"):
        return self.row(label_prefix)[f"{split}_mean"]


def _mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return float(v.mean()), std


def run_ablation(spec: AblationSpec, base_cfg, root, runner_factory=None) -> AblationResult:
    """Run every row of ``spec.preset`` for each seed and aggregate mIoU (in %)."""
    from ..pipeline import Runner
    runner_factory = runner_factory or (lambda cfg: Runner(cfg, root=root))
    rows = PRESETS[spec.preset]
    per_seed, curves = [], {}
    for seed in spec.seeds:
        cfg = base_cfg.replace(**{**spec.overrides, "seed": int(seed)})
        runner = runner_factory(cfg)
        for row in rows:
            if row.kind == "finetune":
                seg = runner.finetuned(row.init, row.flags)
                curves.setdefault(row.label, {})[seed] = runner.loss_log(runner.finetune_key(row.init, row.flags))
            else:
                seg = runner.spliced(row.init)
            metrics = runner.evaluate(seg, METRIC_SPLITS)
            rec = {"label": row.label, "seed": int(seed)}
            rec.update({s: 100.0 * metrics[s]["miou"] for s in METRIC_SPLITS})
            per_seed.append(rec)
            logger.info("%s seed %s %s: %s", spec.preset, seed, row.label,
                        {s: round(rec[s], 2) for s in METRIC_SPLITS})
    table = []
    for row in rows:
        recs = [r for r in per_seed if r["label"] == row.label]
        out = {"label": row.label, "init": row.init, "flags": "".join("1" if f else "0" for f in row.flags),
               "n_seeds": len(recs)}
        for s in METRIC_SPLITS:
            out[f"{s}_mean"], out[f"{s}_std"] = _mean_std([r[s] for r in recs])
        table.append(out)
    return AblationResult(spec.preset, list(spec.seeds), table, per_seed, curves,
                          base_cfg.replace(**spec.overrides).to_dict())
