"""YAML run configuration with strict schema checking.

Unknown keys are rejected with their dotted path so typos fail loudly
instead of silently falling back to defaults.
"""

import yaml

from .errors import UsageError
from .io import DataSpec
from .model import BCMFConfig, CleverConfig, ForestConfig
from .simulate import FixedGroup, StudySpec, desk_scale_bcmf_config

_FOREST_KEYS = {"m", "alpha", "beta", "k"}
_CLEVER_KEYS = _FOREST_KEYS | {"burn_in", "n_samples"}
_MODEL_KEYS = {
    "prognostic", "treat_effect", "mediator_slope", "mediator_baseline",
    "mediator_effect", "clever", "burn_in", "n_samples", "n_chains", "seed",
    "outcome_kind", "mediator_kind", "noise_nu", "keep_forests",
}
_DATA_KEYS = {"path", "delimiter", "outcome", "treatment", "mediator",
              "covariates", "kinds"}
_STUDY_KEYS = {
    "truth_kind", "homogeneous", "null_effects", "zero_frac", "methods", "n_train",
    "n_test", "replications", "seed", "bcmf", "bootstrap_b", "fixed_groups",
    "dynamic_group_depth", "workers",
}
_GROUP_KEYS = {"name", "conditions"}
_TOP_KEYS = {"data", "model", "study"}


def _check_keys(section, allowed, path):
    if not isinstance(section, dict):
        raise UsageError(f"config section {path!r} must be a mapping")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise UsageError(f"unknown config key {path}.{unknown[0]!r}")


def load_config(path):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise UsageError(f"invalid YAML in {path}: {exc}") from None
    _check_keys(raw, _TOP_KEYS, "config")
    for name, keys in (("data", _DATA_KEYS), ("model", _MODEL_KEYS),
                       ("study", _STUDY_KEYS)):
        if name in raw:
            _check_keys(raw[name], keys, name)
    if "model" in raw:
        for forest in ("prognostic", "treat_effect", "mediator_slope",
                       "mediator_baseline", "mediator_effect"):
            if forest in raw["model"]:
                _check_keys(raw["model"][forest], _FOREST_KEYS,
                            f"model.{forest}")
        if "clever" in raw["model"]:
            _check_keys(raw["model"]["clever"], _CLEVER_KEYS, "model.clever")
    if "study" in raw and "bcmf" in raw["study"]:
        _check_keys(raw["study"]["bcmf"], _MODEL_KEYS, "study.bcmf")
    return raw


def build_data_spec(section, path_override=None):
    if section is None:
        raise UsageError("config is missing the 'data' section")
    section = dict(section)
    if path_override is not None:
        section["path"] = path_override
    try:
        return DataSpec(
            path=section["path"],
            outcome=section["outcome"],
            treatment=section["treatment"],
            mediator=section["mediator"],
            covariates=list(section["covariates"]),
            kinds=section.get("kinds"),
            delimiter=section.get("delimiter", ","),
        )
    except KeyError as exc:
        raise UsageError(f"data section is missing {exc.args[0]!r}") from None


def build_bcmf_config(section, seed=None, chains=None, base=None):
    cfg = base if base is not None else BCMFConfig()
    section = dict(section or {})
    kwargs = {}
    for forest in ("prognostic", "treat_effect", "mediator_slope",
                   "mediator_baseline", "mediator_effect"):
        if forest in section:
            kwargs[forest] = ForestConfig(**section.pop(forest))
        else:
            kwargs[forest] = getattr(cfg, forest)
    if "clever" in section:
        kwargs["clever"] = CleverConfig(**section.pop("clever"))
    else:
        kwargs["clever"] = cfg.clever
    for key in ("burn_in", "n_samples", "n_chains", "seed", "outcome_kind",
                "mediator_kind", "noise_nu", "keep_forests"):
        kwargs[key] = section.pop(key, getattr(cfg, key))
    if seed is not None:
        kwargs["seed"] = seed
    if chains is not None:
        kwargs["n_chains"] = chains
    try:
        return BCMFConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model configuration: {exc}") from None


def build_study_spec(section, seed=None):
    if section is None:
        raise UsageError("config is missing the 'study' section")
    section = dict(section)
    kwargs = {}
    if "bcmf" in section:
        kwargs["bcmf"] = build_bcmf_config(section.pop("bcmf"),
                                           base=desk_scale_bcmf_config())
    if "fixed_groups" in section:
        groups = []
        for g in section.pop("fixed_groups"):
            _check_keys(g, _GROUP_KEYS, "study.fixed_groups[]")
            conds = tuple((int(c[0]), str(c[1]), float(c[2]))
                          for c in g["conditions"])
            groups.append(FixedGroup(g["name"], conds))
        kwargs["fixed_groups"] = tuple(groups)
    if "methods" in section:
        kwargs["methods"] = tuple(section.pop("methods"))
    for key in ("truth_kind", "homogeneous", "null_effects", "zero_frac", "n_train",
                "n_test", "replications", "seed", "bootstrap_b",
                "dynamic_group_depth", "workers"):
        if key in section:
            kwargs[key] = section.pop(key)
    if seed is not None:
        kwargs["seed"] = seed
    try:
        return StudySpec(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid study configuration: {exc}") from None
