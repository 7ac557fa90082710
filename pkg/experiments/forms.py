"""
📝 RUN CONFIGURATION
WHAT: Validates a run-config JSON document (sections model / episodes / train /
      loss) into the frozen config records, and gives it a canonical form and
      a SHA-256 digest.
HOW:  One Django form per section handles coercion and bounds; unknown
      sections and keys are rejected. Missing keys take the record defaults.
WHEN: train / run_experiment read --config; eval / predict re-parse the config
      embedded in a checkpoint.
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from django import forms

from episodes.sampler import EpisodeConfig
from segmentation.config import LossConfig, ModelConfig, TrainConfig
from utils.exceptions import ConfigurationError


class SizeField(forms.Field):
    """[height, width] as a JSON list of two positive integers."""

    def to_python(self, value):
        if value is None:
            return None
        if (
            not isinstance(value, (list, tuple))
            or len(value) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in value)
        ):
            raise forms.ValidationError("must be a list of two positive integers")
        return tuple(value)


class SectionForm(forms.Form):
    """Base for one config section. Only keys present in the input reach the record."""

    config_class = None

    def clean(self):
        cleaned_data = super().clean()
        unknown = sorted(set(self.data) - set(self.fields))
        if unknown:
            raise forms.ValidationError(f"unknown keys: {', '.join(unknown)}")
        for name in self.fields:
            if name in self.data and self.data[name] is None:
                self.add_error(name, "may not be null")
        return cleaned_data

    def to_config(self):
        values = {name: value for name, value in self.cleaned_data.items() if name in self.data}
        return self.config_class(**values)


class ModelSectionForm(SectionForm):
    config_class = ModelConfig

    levels = forms.IntegerField(min_value=2, max_value=8, required=False)
    base_channels = forms.IntegerField(min_value=2, required=False)
    proto_dim = forms.IntegerField(min_value=1, required=False)
    input_size = SizeField(required=False)
    full_scale = forms.BooleanField(required=False)


class EpisodesSectionForm(SectionForm):
    config_class = EpisodeConfig

    shots_full = forms.IntegerField(min_value=0, required=False)
    shots_weak = forms.IntegerField(min_value=0, required=False)
    query_size = forms.IntegerField(min_value=1, required=False)
    fg_slice_prob = forms.FloatField(min_value=0.0, max_value=1.0, required=False)
    seed = forms.IntegerField(min_value=0, required=False)


class TrainSectionForm(SectionForm):
    config_class = TrainConfig

    episodes = forms.IntegerField(min_value=0, required=False)
    lr = forms.FloatField(min_value=0.0, required=False)
    optimizer = forms.ChoiceField(choices=[("adam", "Adam"), ("sgd", "SGD with momentum")], required=False)
    momentum = forms.FloatField(min_value=0.0, max_value=1.0, required=False)
    beta1 = forms.FloatField(min_value=0.0, max_value=1.0, required=False)
    beta2 = forms.FloatField(min_value=0.0, max_value=1.0, required=False)
    adam_eps = forms.FloatField(min_value=0.0, required=False)
    seed = forms.IntegerField(min_value=0, required=False)
    checkpoint_every = forms.IntegerField(min_value=0, required=False)
    weak_support = forms.BooleanField(required=False)
    clip_norm = forms.FloatField(min_value=0.0, required=False)


class LossSectionForm(SectionForm):
    config_class = LossConfig

    beta_mode = forms.ChoiceField(
        choices=[("inverse_frequency", "Inverse foreground frequency"), ("fixed", "Fixed beta")],
        required=False,
    )
    beta = forms.FloatField(min_value=0.0, required=False)
    beta_min = forms.FloatField(min_value=0.0, required=False)
    beta_max = forms.FloatField(min_value=0.0, required=False)
    temperature = forms.FloatField(required=False)
    eps = forms.FloatField(required=False)
    registry_momentum = forms.FloatField(min_value=0.0, max_value=1.0, required=False)


SECTION_FORMS = {
    "model": ModelSectionForm,
    "episodes": EpisodesSectionForm,
    "train": TrainSectionForm,
    "loss": LossSectionForm,
}


# ==============================================================================
# RUN CONFIG
# ==============================================================================

@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    episodes: EpisodeConfig = field(default_factory=EpisodeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def as_dict(self):
        return {
            "model": self.model.as_dict(),
            "episodes": asdict(self.episodes),
            "train": self.train.as_dict(),
            "loss": self.loss.as_dict(),
        }

    def canonical_json(self):
        """Every key filled in, sorted, no whitespace."""
        return json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def digest(self):
        return config_digest(self.canonical_json())

    def with_arm(self, weak_support):
        return replace(self, train=replace(self.train, weak_support=bool(weak_support)))


def config_digest(canonical_text):
    return hashlib.sha256(canonical_text.encode("utf-8")).hexdigest()


def _format_errors(errors):
    parts = []
    for section, field_errors in errors.items():
        for name, messages in field_errors.items():
            where = section if name == "__all__" else f"{section}.{name}"
            parts.append(f"{where}: {' '.join(messages)}")
    return "; ".join(parts)


def parse_run_config(document):
    """Validate a decoded run-config document. Raises ConfigurationError listing every problem."""
    if document is None:
        document = {}
    if not isinstance(document, dict):
        raise ConfigurationError(f"run config must be a JSON object, got {type(document).__name__}")
    unknown = sorted(set(document) - set(SECTION_FORMS))
    if unknown:
        raise ConfigurationError(f"unknown run config sections: {', '.join(unknown)}")

    errors = {}
    sections = {}
    for section, form_class in SECTION_FORMS.items():
        values = document.get(section) or {}
        if not isinstance(values, dict):
            errors[section] = {"__all__": ["must be a JSON object"]}
            continue
        form = form_class(data=values)
        if not form.is_valid():
            errors[section] = {name: list(messages) for name, messages in form.errors.items()}
            continue
        sections[section] = form.to_config()
    if errors:
        raise ConfigurationError(f"invalid run config: {_format_errors(errors)}")
    return RunConfig(**sections)


def parse_run_config_text(text):
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"run config is not valid JSON: {exc}") from exc
    return parse_run_config(document)


def load_run_config(path=None):
    """Read --config; no path means every default."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read run config {path}: {exc}") from exc
    return parse_run_config_text(text)
