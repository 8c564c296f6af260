"""Flat key=value run configuration shared by every CLI command.

One namespace covers feature extraction, model architecture, training,
synthetic-data generation and scoring, so a single file reproduces a
whole run.  Files hold ``key=value`` lines ('#' starts a comment);
unknown keys are rejected rather than ignored.  Command-line ``--set
key=value`` options override file values.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import InvalidConfigError
from .losses import LossWeights
from .networks import ArchConfig
from .training import TrainConfig


def _int_tuple(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError as err:
        raise InvalidConfigError(f"expected comma-separated integers, got {text!r}") from err


def _choice(*options):
    def convert(text: str) -> str:
        if text not in options:
            raise InvalidConfigError(f"expected one of {options}, got {text!r}")
        return text
    return convert


# key -> (converter, default, help); the single source of truth for
# defaults, file parsing, --set overrides, and --help text.
FIELDS: dict = {
    # feature extraction
    "sample_rate_hz": (int, 16000, "expected WAV sample rate; mismatching files are skipped"),
    "window_len": (int, 1024, "STFT window length in samples (power of two)"),
    "hop_len": (int, 512, "STFT hop in samples"),
    "mel_bands": (int, 64, "number of triangular mel filters"),
    "log_floor": (float, 1e-10, "positive floor applied before the log"),
    "patch_frames": (int, 64, "frames per spectrogram patch"),
    "patch_hop": (int, 32, "frame hop between consecutive patches"),
    # model architecture
    "latent_dim": (int, 8, "bottleneck width"),
    "n_components": (int, 4, "mixture components K"),
    "encoder_widths": (_int_tuple, (512, 128), "hidden widths of encoder and auxiliary encoder"),
    "discriminator_widths": (_int_tuple, (256, 64), "hidden widths of the discriminator"),
    "estimator_widths": (_int_tuple, (16,), "hidden widths of the membership estimator"),
    "leaky_slope": (float, 0.2, "negative-side slope of hidden activations"),
    "output_scale": (float, 4.0, "decoder tanh output scale, in normalized units"),
    # training
    "epochs": (int, 4, "passes over the training set"),
    "batch_size": (int, 64, "samples per step (>= 2)"),
    "seed": (int, 0, "seed for init, shuffling, and synthetic data"),
    "lr_generator": (float, 1e-3, "Adam learning rate for the generator side"),
    "lr_discriminator": (float, 1e-4, "Adam learning rate for the discriminator"),
    "adam_beta1": (float, 0.5, "Adam first-moment decay"),
    "adam_beta2": (float, 0.999, "Adam second-moment decay"),
    "adam_eps": (float, 1e-8, "Adam denominator epsilon"),
    "w_image": (float, 1.0, "weight of the image reconstruction loss"),
    "w_adversarial": (float, 5.0, "weight of the adversarial loss (0 disables the discriminator)"),
    "w_latent": (float, 1.0, "weight of the latent reconstruction loss"),
    "w_estimation": (float, 0.05, "weight of the mixture estimation loss"),
    "lambda1": (float, 0.1, "energy term factor inside the estimation loss"),
    "lambda2": (float, 0.005, "covariance-diagonal penalty factor"),
    "cov_eps": (float, 1e-6, "diagonal floor added to every estimated covariance"),
    "grad_clip": (float, 5.0, "global gradient-norm clip per parameter group (0 disables)"),
    "checkpoint_every": (int, 100, "steps between checkpoint writes"),
    # synthetic data
    "synth_bands": (int, 64, "synthetic patch height"),
    "synth_frames": (int, 64, "synthetic patch width"),
    "synth_shift": (float, 4.0, "embedded-space displacement of the anomalous population"),
    "synth_noise": (float, 0.05, "isotropic noise added to synthetic patches"),
    # scoring
    "score_mode": (_choice("latent", "energy"), "latent", "anomaly score: latent distance or mixture energy"),
    "aggregator": (_choice("max", "mean"), "max", "patch-score aggregation within a clip"),
    "group_by": (_choice("clip", "patch"), "clip", "score per source clip or per patch"),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError as err:
            raise AttributeError(key) from err

    def arch(self, input_dim: int) -> ArchConfig:
        return ArchConfig(
            input_dim=input_dim,
            latent_dim=self.latent_dim,
            n_components=self.n_components,
            encoder_widths=self.encoder_widths,
            discriminator_widths=self.discriminator_widths,
            estimator_widths=self.estimator_widths,
            leaky_slope=self.leaky_slope,
            output_scale=self.output_scale,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            lr_generator=self.lr_generator,
            lr_discriminator=self.lr_discriminator,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            weights=LossWeights(self.w_image, self.w_adversarial, self.w_latent, self.w_estimation),
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            cov_eps=self.cov_eps,
            grad_clip=self.grad_clip,
            checkpoint_every=self.checkpoint_every,
        )


def _convert(key: str, raw: str):
    if key not in FIELDS:
        known = ", ".join(sorted(FIELDS))
        raise InvalidConfigError(f"unknown config key {key!r} (known keys: {known})")
    converter = FIELDS[key][0]
    try:
        return converter(raw.strip())
    except InvalidConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise InvalidConfigError(f"bad value for {key}: {raw!r} ({err})") from err


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        out[key.strip()] = _convert(key.strip(), value)
    return out


def load_run_config(config_path=None, overrides=()) -> RunConfig:
    """Defaults, then the optional config file, then --set overrides."""
    values = {key: default for key, (_, default, _) in FIELDS.items()}
    if config_path is not None:
        try:
            text = open(config_path).read()
        except OSError as err:
            raise InvalidConfigError(f"cannot read config file {config_path}: {err}") from err
        values.update(parse_config_text(text, source=str(config_path)))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidConfigError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = _convert(key.strip(), value)
    return RunConfig(values=values)


def default_config_text() -> str:
    """A fully commented config file with every key at its default."""
    lines = ["# every key with its default value"]
    for key, (_, default, help_text) in FIELDS.items():
        rendered = ",".join(str(x) for x in default) if isinstance(default, tuple) else str(default)
        lines.append(f"{key}={rendered}  # {help_text}")
    return "\n".join(lines) + "\n"
