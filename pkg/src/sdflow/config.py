"""Flat ``key = value`` run configuration with ``#`` comments.

Every hyperparameter of the model, the losses, training, data synthesis and
evaluation has one key.  Unknown keys are rejected.
"""
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .model import ModelConfig
from .objectives import LossWeights


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    iters_pretrain: int = 1000
    iters_forward: int = 4000
    iters_finetune: int = 1000
    lr_model: float = 1e-4
    lr_disc: float = 1e-5
    milestones: tuple = (0.5, 0.75, 0.9, 0.95)
    accum: int = 1
    batch: int = 8
    patch: int = 64
    grad_clip: float = 50.0
    seed: int = 0
    dtype: str = "float32"
    proxy_seed: int = 1234

    def __post_init__(self):
        if self.lr_model <= 0 or self.lr_disc <= 0:
            raise ConfigError("learning rates must be positive")
        if self.accum < 1 or self.batch < 1:
            raise ConfigError("accum and batch must be >= 1")
        if min(self.iters_pretrain, self.iters_forward, self.iters_finetune) < 0:
            raise ConfigError("phase lengths must be nonnegative")
        if any(not 0 < m < 1 for m in self.milestones) or list(self.milestones) != sorted(self.milestones):
            raise ConfigError("milestones must be increasing fractions in (0, 1)")
        if self.patch % self.model.scale:
            raise ConfigError(f"patch {self.patch} is not divisible by scale {self.model.scale}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def total_iters(self):
        return self.iters_pretrain + self.iters_forward + self.iters_finetune

    def phase_bounds(self):
        a = self.iters_pretrain
        b = a + self.iters_forward
        return {"pretrain": (0, a), "forward": (a, b), "finetune": (b, b + self.iters_finetune)}


# keys outside the dataclasses: data synthesis and evaluation
EXTRA_DEFAULTS = {
    "n_images": 256,
    "size": 64,
    "data_seed": 7,
    "n_samples": 10,
    "taus": (0.0, 0.4, 0.8, 1.2),
    "threads": 0,
}

DOCS = {
    "scale": "upscaling factor s (2, 4 or 8)",
    "flow_steps": "K, flow steps per level in the HR and LR INNs",
    "cond_flow_steps": "P, conditional flow steps in the HF and Deg flows",
    "hf_blocks": "RRDB blocks in the HF conditioning extractor",
    "deg_blocks": "RRDB blocks in the Deg conditioning extractor",
    "width": "hidden channels of coupling nets and extractors",
    "estimator_layers": "conv layers of the degradation estimator",
    "dm_blocks": "degradation-modulated residual blocks in the content extractor",
    "n_components": "mixture components of the degradation prior",
    "disc_width": "base width of the patch discriminators",
    "alpha": "feature-term weight of the content loss",
    "beta1": "content-latent magnitude regulariser",
    "beta2": "LR latent vs content regulariser",
    "lambda1": "DS pixel weight", "lambda2": "DS perceptual weight", "lambda3": "DS GAN weight",
    "lambda4": "SR pixel weight", "lambda5": "SR perceptual weight", "lambda6": "SR GAN weight",
    "tau_pixel": "sampling temperature for the backward pixel terms",
    "tau_perceptual": "sampling temperature for the backward perceptual and GAN terms",
    "iters_pretrain": "phase 1 iterations (NLL + content)",
    "iters_forward": "phase 2 iterations (full forward loss)",
    "iters_finetune": "phase 3 iterations (forward + backward loss)",
    "lr_model": "initial learning rate of the flows",
    "lr_disc": "initial learning rate of the discriminators",
    "milestones": "fractions of total iterations where both learning rates halve",
    "accum": "micro-batches accumulated per update",
    "batch": "images per micro-batch",
    "patch": "HR patch size (LR patch = patch / scale)",
    "grad_clip": "gradient-norm clip on flow parameters",
    "seed": "training seed",
    "dtype": "float32 or float64",
    "proxy_seed": "seed of the frozen feature network",
    "n_images": "synthetic corpus size",
    "size": "synthetic HR image size",
    "data_seed": "synthetic corpus seed",
    "n_samples": "samples per image for diversity",
    "taus": "temperatures of the sweep",
    "threads": "torch threads (0 = SDFLOW_THREADS or library default)",
}


def _train_scalar_fields():
    return [f for f in fields(TrainConfig) if f.name not in ("model", "weights")]


def defaults():
    out = {}
    out.update(ModelConfig().as_dict())
    out.update(LossWeights().as_dict())
    t = TrainConfig()
    out.update({f.name: getattr(t, f.name) for f in _train_scalar_fields()})
    out.update(EXTRA_DEFAULTS)
    return out


def _parse(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def format_value(v):
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig(dict):
    """All keys with their values; construct with :func:`load` or :meth:`from_text`."""

    @classmethod
    def from_text(cls, text, base=None):
        cfg = cls(base if base is not None else defaults())
        ref = defaults()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value, ref)
        return cfg

    def set(self, key, value, ref=None):
        ref = ref or defaults()
        if key not in ref:
            raise ConfigError(f"unknown config key: {key}")
        self[key] = _parse(key, value, ref[key]) if isinstance(value, str) else value

    def to_text(self):
        return "".join(f"{k} = {format_value(self[k])}\n" for k in sorted(self))

    def model_config(self):
        return ModelConfig(**{f.name: self[f.name] for f in fields(ModelConfig)})

    def loss_weights(self):
        return LossWeights(**{f.name: self[f.name] for f in fields(LossWeights)})

    def train_config(self):
        kw = {f.name: self[f.name] for f in _train_scalar_fields()}
        try:
            return TrainConfig(model=self.model_config(), weights=self.loss_weights(), **kw)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_train_config(cls, tc, **extra):
        cfg = cls(defaults())
        cfg.update(tc.model.as_dict())
        cfg.update(tc.weights.as_dict())
        cfg.update({f.name: getattr(tc, f.name) for f in _train_scalar_fields()})
        cfg.update(extra)
        return cfg


def load(path=None, overrides=()):
    """Defaults, then the file at ``path``, then ``KEY=VALUE`` overrides."""
    cfg = RunConfig(defaults())
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                cfg = RunConfig.from_text(f.read(), cfg)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    return cfg


def help_text():
    d = defaults()
    return "\n".join(f"  {k} = {format_value(d[k])}    # {DOCS.get(k, '')}" for k in sorted(d))
