"""
Run-config validation.

A run config is a JSON object whose sections are validated by the forms
below. Missing keys take settings.SPECMATCH_DEFAULTS; unknown sections and
keys are rejected before any work starts.
"""
import json
import logging
from copy import deepcopy
from pathlib import Path

from django import forms
from django.conf import settings

from .exceptions import ConfigError

logger = logging.getLogger(__name__)


class SectionForm(forms.Form):
    """Base for one config section; `build` turns cleaned data into the app's config object."""

    def build(self):
        return dict(self.cleaned_data)


class SpectralSection(SectionForm):
    k = forms.IntegerField(min_value=2)
    n_hks = forms.IntegerField(min_value=1)
    hks_scaling = forms.ChoiceField(choices=[(name, name) for name in ('standardize', 'l2', 'none')])
    eig_seed = forms.IntegerField(min_value=0)

    def build(self):
        from spectral.operators import SpectralConfig
        return SpectralConfig(**self.cleaned_data)


class NetSection(SectionForm):
    in_dim = forms.IntegerField(min_value=1)
    width = forms.IntegerField(min_value=1)
    n_blocks = forms.IntegerField(min_value=1)
    t_min = forms.FloatField(min_value=0.0)
    t_max = forms.FloatField(min_value=0.0)

    def build(self):
        from features.network import NetConfig
        return NetConfig(**self.cleaned_data)


class LossSection(SectionForm):
    p_c = forms.IntegerField(min_value=1)
    p_s = forms.IntegerField(min_value=1)
    tau_c = forms.FloatField()
    tau_s = forms.FloatField()
    theta_cross = forms.FloatField(min_value=0.0)
    theta_self = forms.FloatField(min_value=0.0)
    theta_align = forms.FloatField(min_value=0.0)
    alpha = forms.FloatField()
    negative_sampling = forms.ChoiceField(choices=[('none', 'none'), ('uniform', 'uniform')])
    n_negatives = forms.IntegerField(required=False, min_value=1)
    tie_p = forms.BooleanField(required=False)

    def clean(self):
        cleaned = super().clean()
        for name in ('tau_c', 'tau_s', 'alpha'):
            if cleaned.get(name) is not None and cleaned[name] <= 0:
                self.add_error(name, 'must be > 0')
        return cleaned

    def build(self):
        from contrastive.losses import LossConfig
        return LossConfig(**self.cleaned_data)


class BaselineSection(SectionForm):
    lambda_reg = forms.FloatField(min_value=0.0)
    theta_bi = forms.FloatField(min_value=0.0)
    theta_or = forms.FloatField(min_value=0.0)

    def build(self):
        from fmaps.baseline import BaselineConfig
        return BaselineConfig(**self.cleaned_data)


class TrainSection(SectionForm):
    learning_rate = forms.FloatField()
    beta1 = forms.FloatField(min_value=0.0, max_value=1.0)
    beta2 = forms.FloatField(min_value=0.0, max_value=1.0)
    eps = forms.FloatField()
    epochs = forms.IntegerField(min_value=1, error_messages={'required': 'train.epochs is required'})
    pair_policy = forms.ChoiceField(choices=[('all', 'all'), ('random', 'random')])
    pairs_per_epoch = forms.IntegerField(required=False, min_value=1)
    max_iterations = forms.IntegerField(required=False, min_value=1)
    seed = forms.IntegerField(min_value=0)
    disable_cross = forms.BooleanField(required=False)
    disable_self = forms.BooleanField(required=False)
    baseline_losses_mode = forms.BooleanField(required=False)
    checkpoint_every = forms.IntegerField(min_value=0)
    grad_clip = forms.FloatField(required=False, min_value=0.0)
    parallel_pairs = forms.IntegerField(min_value=1)

    def build(self):
        from training.trainer import TrainConfig
        return TrainConfig(**self.cleaned_data)


class PathsSection(SectionForm):
    manifest = forms.CharField(required=False)
    cache_dir = forms.CharField(required=False)
    out_dir = forms.CharField(required=False)

    def build(self):
        return {name: (Path(value) if value else None) for name, value in self.cleaned_data.items()}


class SweepSection(SectionForm):
    p_values = forms.JSONField()

    def clean_p_values(self):
        values = self.cleaned_data['p_values']
        if not isinstance(values, list) or not values:
            raise forms.ValidationError('must be a non-empty list of integers')
        if any(isinstance(v, bool) or not isinstance(v, int) or v < 1 for v in values):
            raise forms.ValidationError('every p must be an integer >= 1')
        return values

    def build(self):
        return list(self.cleaned_data['p_values'])


SECTION_FORMS = {
    'spectral': SpectralSection,
    'net': NetSection,
    'loss': LossSection,
    'baseline': BaselineSection,
    'train': TrainSection,
    'paths': PathsSection,
    'sweep': SweepSection,
}


def _errors(form):
    return '; '.join(
        f'{field}: {" ".join(messages)}' if field != '__all__' else ' '.join(messages)
        for field, messages in form.errors.items()
    )


class RunConfig:
    """Validated sections of one run config, plus the raw resolved values for run.json."""

    def __init__(self, forms_by_section):
        self._forms = forms_by_section
        self._built = {}

    def has(self, section):
        return section in self._forms

    def get(self, section):
        if section not in self._forms:
            raise ConfigError(f'config section {section!r} was not loaded')
        if section not in self._built:
            self._built[section] = self._forms[section].build()
        return self._built[section]

    def resolved(self):
        return {name: dict(form.cleaned_data) for name, form in self._forms.items()}


def read_config_file(path):
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f'No config file at {path}')
    try:
        document = json.loads(path.read_text(encoding='utf-8'))
    except ValueError as e:
        raise ConfigError(f'{path}: not valid JSON: {e}') from e
    if not isinstance(document, dict):
        raise ConfigError(f'{path}: a run config must be a JSON object')
    return document


def load_run_config(path=None, sections=None, overrides=None, document=None):
    """
    Validate `sections` (default: all) of the config at `path` (or an
    already-parsed `document`). `overrides` maps section -> {key: value}
    and wins over the file, e.g. the --seed flag.
    """
    document = read_config_file(path) if document is None else document
    unknown = set(document) - set(SECTION_FORMS)
    if unknown:
        raise ConfigError(f'unknown config sections: {", ".join(sorted(unknown))}')

    sections = list(sections or SECTION_FORMS)
    validated = {}
    for name in sections:
        defaults = settings.SPECMATCH_DEFAULTS[name]
        given = document.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError(f'config section {name!r} must be an object')
        extra = set(given) - set(defaults)
        if extra:
            raise ConfigError(f'unknown keys in section {name!r}: {", ".join(sorted(extra))}')
        data = deepcopy(defaults)
        data.update(given)
        data.update((overrides or {}).get(name, {}))
        data = {key: value for key, value in data.items() if value is not None}

        form = SECTION_FORMS[name](data=data)
        if not form.is_valid():
            raise ConfigError(f'config section {name!r}: {_errors(form)}')
        validated[name] = form

    config = RunConfig(validated)
    for name in sections:
        config.get(name)
    logger.debug('Loaded run config sections %s from %s', sections, path or 'defaults')
    return config
