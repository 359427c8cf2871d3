"""Command-line entry point.

Every command works on an output root (``--out``, else ``$DEFOGSEG_OUT``,
else ``./runs``). Stage results are cached there, so each command resumes
from whatever upstream stages already exist.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Errors are reported as a single JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import torch

from .config import load_config
from .errors import ConfigError, DefogSegError
from .evalkit.ablation import PRESETS, AblationResult, AblationSpec, run_ablation
from .evalkit.report import emit_report, write_overlay
from .nets import dfnet_forward, load_checkpoint, save_checkpoint
from .pipeline import EVAL_SPLITS, Runner, output_root

logger = logging.getLogger("defogseg")

FLAG_NAMES = ("fog", "cl", "con")


def _parse_sets(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _parse_flags(text):
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = set(names) - set(FLAG_NAMES)
    if bad:
        raise ConfigError(f"unknown loss flags {sorted(bad)}; use {','.join(FLAG_NAMES)}")
    return tuple(n in names for n in FLAG_NAMES)


def _parse_seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --seeds value {text!r}") from e
    if not seeds:
        raise ConfigError("--seeds must list at least one seed")
    return seeds


def _config(args):
    overrides = _parse_sets(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _root(args):
    return Path(args.out) if args.out else output_root()


def _export(params, path, cfg, **meta):
    save_checkpoint(params, path, run_config=cfg.to_dict(), **meta)
    print(path)


def _metrics_csv(cfg, metrics):
    buf = io.StringIO()
    buf.write(f"# run_config: {json.dumps(cfg.to_dict(), sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "miou", "pixel_accuracy"] + [f"iou_{i}" for i in range(cfg.num_classes)])
    for split, m in metrics.items():
        w.writerow([split, f"{m['miou']:.6f}", f"{m['pixel_accuracy']:.6f}"]
                   + ["" if v is None else f"{v:.6f}" for v in m["per_class_iou"]])
    return buf.getvalue()


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args, cfg, root):
    runner = Runner(cfg, root)
    print(runner.dataset())


def cmd_train_clean(args, cfg, root):
    runner = Runner(cfg, root)
    _export(runner.fsnetc(), root / "checkpoints" / "fsnetc.ckpt", cfg)


def cmd_pretrain_basic(args, cfg, root):
    runner = Runner(cfg, root)
    params = runner.basic(mode=args.loss or cfg.pretrain_loss, joint=args.joint)
    _export(params, root / "checkpoints" / ("joint_basic.ckpt" if args.joint else "dfnet_basic.ckpt"), cfg)


def cmd_fdm(args, cfg, root):
    runner = Runner(cfg, root)
    _export(runner.fdm(), root / "checkpoints" / "dfnet_final.ckpt", cfg)


def cmd_finetune(args, cfg, root):
    runner = Runner(cfg, root)
    flags = _parse_flags(args.flags) if args.flags else None
    if args.lambda_con is not None:
        cfg = cfg.replace(lambda_con=args.lambda_con)
        runner = Runner(cfg, root)
    if args.pretrain:
        from .finetune import finetune, init_from_pretrain
        from .nets import build_segnet
        pre = load_checkpoint(args.pretrain)
        seg = init_from_pretrain(pre, build_segnet(cfg.arch(), cfg.seed + 13))
        flags = flags or (cfg.use_fog, cfg.use_cl, cfg.use_con)
        log = []
        params = finetune(seg, runner.split("train"), cfg, use_fog=flags[0], use_cl=flags[1],
                          use_con=flags[2], dfnet=pre if cfg.finetune_input == "defogged" else None, log=log)
        from .losses import write_loss_csv
        write_loss_csv(log, root / "logs" / "finetune.csv")
    else:
        params = runner.finetuned(args.init, flags)
    _export(params, root / "checkpoints" / "fsnet.ckpt", cfg)


def cmd_eval(args, cfg, root):
    runner = Runner(cfg, root)
    ckpt = Path(args.checkpoint) if args.checkpoint else root / "checkpoints" / "fsnet.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    seg = load_checkpoint(ckpt)
    if seg.kind != "segnet":
        raise ConfigError(f"{ckpt} holds a {seg.kind} checkpoint, not a segmentation network")
    splits = [s.strip() for s in args.split.split(",")]
    for s in splits:
        if s not in EVAL_SPLITS:
            raise ConfigError(f"unknown split {s!r}; choose from {sorted(EVAL_SPLITS)}")
    metrics = runner.evaluate(seg, splits)
    out = root / "metrics" / f"{ckpt.stem}_{'_'.join(splits)}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = {"checkpoint": str(ckpt), "run_config": cfg.to_dict(),
               "metrics": {s: {"mIoU": m["miou"], "per_class_iou": m["per_class_iou"],
                               "pixel_accuracy": m["pixel_accuracy"]} for s, m in metrics.items()}}
    out.write_text(json.dumps(payload, indent=1, sort_keys=True))
    for s, m in metrics.items():
        print(f"{s}: mIoU={100 * m['miou']:.2f}")
    print(out)


def _ablation_path(root, preset):
    return root / "ablations" / f"{preset}.json"


def cmd_ablate(args, cfg, root):
    spec = AblationSpec(args.preset, _parse_seeds(args.seeds), _parse_sets(args.set))
    result = run_ablation(spec, cfg, root)
    path = _ablation_path(root, args.preset)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result.__dict__, sort_keys=True, default=str))
    for f in emit_report(result, root / "report"):
        print(f)
    _print_table(result)


def _print_table(result):
    print(f"{'row':42s} {'n':>2s} " + " ".join(f"{s:>16s}" for s in ("fog_test", "synth_test", "clean_test")))
    for r in result.rows:
        cells = " ".join(f"{r[s + '_mean']:8.2f} ±{r[s + '_std']:5.2f}" for s in ("fog_test", "synth_test", "clean_test"))
        print(f"{r['label']:42s} {r['n_seeds']:2d} {cells}")


def cmd_report(args, cfg, root):
    path = _ablation_path(root, args.preset)
    if not path.exists():
        raise ConfigError(f"no ablation results for {args.preset!r}; run `ablate --preset {args.preset}` first")
    d = json.loads(path.read_text())
    d["curves"] = {k: {int(s): v for s, v in by.items()} for k, by in d.get("curves", {}).items()}
    result = AblationResult(**d)
    for f in emit_report(result, root / "report"):
        print(f)
    if args.overlays:
        _overlays(cfg, root, args.overlays)


def _overlays(cfg, root, n):
    runner = Runner(cfg, root)
    seg = runner.finetuned("fdm")
    dfnet = runner.fdm()
    data = runner.split("real_test", evaluation=True)
    from .nets import seg_forward
    with torch.no_grad():
        pred = seg_forward(seg, data.fog[:n]).logits.argmax(1).numpy()
        defog = dfnet_forward(dfnet, data.fog[:n])[0]
    for i in range(min(n, len(data))):
        chw = lambda t: t[i].permute(1, 2, 0).numpy()  # noqa: E731
        path = root / "report" / "overlays" / f"{data.ids[i]}.png"
        write_overlay(path, chw(data.fog), chw(defog), chw(data.clean), pred[i], data.label[i].numpy())
        print(path)


def cmd_pipeline(args, cfg, root):
    runner = Runner(cfg, root)
    seg, metrics = runner.pipeline()
    _export(runner.fsnetc(), root / "checkpoints" / "fsnetc.ckpt", cfg)
    _export(runner.basic(), root / "checkpoints" / "dfnet_basic.ckpt", cfg)
    _export(runner.fdm(), root / "checkpoints" / "dfnet_final.ckpt", cfg)
    _export(seg, root / "checkpoints" / "fsnet.ckpt", cfg)
    out = root / "metrics" / "final_metrics.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(_metrics_csv(cfg, metrics))
    for s, m in metrics.items():
        print(f"{s}: mIoU={100 * m['miou']:.2f}")
    print(out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-clean": cmd_train_clean,
    "pretrain-basic": cmd_pretrain_basic,
    "fdm": cmd_fdm,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--out", help="output root (default $DEFOGSEG_OUT or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="defogseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "pretrain-basic":
            sp.add_argument("--loss", choices=["dct+sed", "dct", "sed", "l1"])
            sp.add_argument("--joint", action="store_true")
        elif name == "finetune":
            sp.add_argument("--init", default="fdm", help="scratch | basic | fdm | joint | joint:staged | basic:<loss>...")
            sp.add_argument("--pretrain", help="pre-trained DFnet checkpoint path (overrides --init)")
            sp.add_argument("--flags", help="comma list of fog,cl,con")
            sp.add_argument("--lambda-con", type=float)
        elif name == "eval":
            sp.add_argument("--split", default="fog_test", help="fog_test, synth_test, clean_test (comma list)")
            sp.add_argument("--checkpoint")
        elif name in ("ablate", "report"):
            sp.add_argument("--preset", required=True, choices=sorted(PRESETS))
            if name == "ablate":
                sp.add_argument("--seeds", default="1,2,3")
            else:
                sp.add_argument("--overlays", type=int, default=0, help="also write N overlay strips")
    return p


def _fail(exc_type, message, code):
    print(json.dumps({"error": exc_type, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    root = None
    marker = None
    try:
        cfg = _config(args)
        root = _root(args)
        root.mkdir(parents=True, exist_ok=True)
        marker = root / f"INCOMPLETE.{args.command}"
        marker.write_text("command started; remove this file only after a clean finish\n")
        COMMANDS[args.command](args, cfg, root)
    except DefogSegError as e:
        return _fail(type(e).__name__, str(e), e.exit_code)
    except OSError as e:
        return _fail("OSError", str(e), 3)
    if marker is not None:
        marker.unlink(missing_ok=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
