"""Tooling around a manufacturing-aware anomaly detection LMM.

Expert anomaly-map metrics, expert-guided region tokenization (EG-RoI),
confidence voting, InstructIAD / CoT-M dataset organization and a
multiple-choice evaluation harness.
"""

from .cvm import ModelOpinion, Verdict, vote
from .egroi import (
    EGRoI,
    EgroiConfig,
    RoiBox,
    RoiManifest,
    crop_patches,
    extract_components,
    merge_and_cap,
    propose_boxes,
    run_egroi,
    run_egroi_training,
    token_layout,
)
from .evalharness import EvalItem, RunReport, extract_answer, render_prompt, score_paired, score_run
from .instructiad import (
    AnnotatedSample,
    InstructionRecord,
    build_ad_record,
    build_analysis_record,
    build_caption_record,
    dataset_stats,
    sft_nll,
)
from .map_io import AnomalyMap, BinaryMask, ImageMeta, load_anomaly_map, load_mask, write_manifest
from .metrics import (
    ExpertImageClassifier,
    MapBinarizer,
    MapNormalizer,
    PixelRates,
    binarize,
    defect_size_class,
    image_decision,
    normalize_map,
    pixel_auroc,
    pixel_rates,
)

__version__ = "0.1.0"
