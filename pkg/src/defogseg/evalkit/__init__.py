from .ablation import PRESETS, AblationResult, AblationSpec, run_ablation
from .metrics import confusion, evaluate, miou, per_class_iou, pixel_accuracy, psnr
from .report import emit_report

__all__ = ["PRESETS", "AblationResult", "AblationSpec", "run_ablation", "confusion", "evaluate",
           "miou", "per_class_iou", "pixel_accuracy", "psnr", "emit_report"]
