from sepsis_fusion.experts.base import ExpertKind, ExpertModel, OptimizerSettings, class_prior
from sepsis_fusion.experts.dispatch import (
    PARAM_TYPES, expert_predict, fit_expert, load_expert, modality_present, params_from_dict,
    predict_records, save_expert,
)
from sepsis_fusion.experts.gradcheck import check_gradients
from sepsis_fusion.experts.historian import fit_historian
from sepsis_fusion.experts.monitor import TemporalExpertParams, fit_temporal
from sepsis_fusion.experts.reader import TextExpertParams, fit_text
from sepsis_fusion.experts.visionary import VisionExpertParams, fit_vision

__all__ = [
    "ExpertKind", "ExpertModel", "OptimizerSettings", "class_prior", "PARAM_TYPES",
    "expert_predict", "fit_expert", "load_expert", "modality_present", "params_from_dict",
    "predict_records", "save_expert", "check_gradients", "fit_historian",
    "TemporalExpertParams", "fit_temporal", "TextExpertParams", "fit_text",
    "VisionExpertParams", "fit_vision",
]
