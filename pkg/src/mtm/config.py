"""Run configuration: INI-style key = value files with strict validation.

Unknown sections or keys are rejected, and every parse/validation error
carries the line number of the offending entry.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

from .alignment import LossWeights, MaskSpec
from .detector import ModelConfig
from .errors import ConfigError

ALIGN_MODES = ("off", "masked", "nonmasked")


@dataclass
class RunConfig:
    seed: int = 1
    out_dir: str = "runs/out"
    dump_pseudo_labels: bool = False

    model: ModelConfig = field(default_factory=ModelConfig)

    theta_mask: float = 0.40
    eta: float = 0.50
    lambda_mtwfa: float = 1.0
    lambda_mdqfa: float = 0.1

    epochs_pretrain: int = 40
    epochs_selftrain: int = 10
    lr_pretrain: float = 2e-4
    lr_selftrain: float = 2e-6
    pseudo_threshold: float = 0.50
    ema_momentum: float = 0.999

    n_source: int = 400
    n_target: int = 400
    n_target_val: int = 200

    use_target_like: bool = True
    mdqfa: str = "masked"
    mtwfa: str = "masked"
    use_mean_teacher: bool = True
    use_oqkt: bool = True

    def __post_init__(self):
        if not 0.0 <= self.theta_mask <= 1.0:
            raise ConfigError(f"theta_mask must be in [0,1], got {self.theta_mask}")
        if not 0.0 < self.eta <= 1.0:
            raise ConfigError(f"eta must be in (0,1], got {self.eta}")
        if self.mdqfa not in ALIGN_MODES or self.mtwfa not in ALIGN_MODES:
            raise ConfigError(f"alignment modes must be one of {ALIGN_MODES}")
        if not 0.0 <= self.pseudo_threshold < 1.0:
            raise ConfigError("pseudo_threshold must be in [0,1)")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError("ema_momentum must be in [0,1]")
        for name in ("epochs_pretrain", "epochs_selftrain", "n_source", "n_target",
                     "n_target_val"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if min(self.lambda_mtwfa, self.lambda_mdqfa) < 0:
            raise ConfigError("loss weights must be nonnegative")

    def mask_spec(self, seed_offset: int = 0) -> MaskSpec:
        return MaskSpec(self.theta_mask, self.eta, seed=(self.seed, 900, seed_offset))

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_mdqfa=self.lambda_mdqfa, lambda_mtwfa=self.lambda_mtwfa)

    def alignment_enabled(self) -> bool:
        return self.mdqfa != "off" or self.mtwfa != "off"


_SCHEMA = {
    "run": {"seed": int, "out_dir": str, "dump_pseudo_labels": bool},
    "model": {"c": int, "n_dec": int, "l_enc": int, "l_dec": int, "heads": int,
              "num_classes": int, "patch_size": int, "image_size": int},
    "mask": {"theta_mask": float, "eta": float},
    "loss": {"lambda_mtwfa": float, "lambda_mdqfa": float},
    "train": {"epochs_pretrain": int, "epochs_selftrain": int, "lr_pretrain": float,
              "lr_selftrain": float, "pseudo_threshold": float, "ema_momentum": float},
    "data": {"n_source": int, "n_target": int, "n_target_val": int},
    "ablation": {"use_target_like": bool, "mdqfa": str, "mtwfa": str,
                 "use_mean_teacher": bool, "use_oqkt": bool},
}

_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False,
                "yes": True, "no": False}


def _line_of(text: str, section: str, key: str | None = None) -> int:
    """Best-effort line number of a section header or key within it."""
    in_section = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            if key is None and stripped == f"[{section}]":
                return lineno
            in_section = stripped == f"[{section}]"
        elif key is not None and in_section:
            head = stripped.split("=", 1)[0].strip()
            if head == key:
                return lineno
    return 0


def load_config(path) -> RunConfig:
    with open(path, "r") as fh:
        text = fh.read()
    return parse_config(text, source=str(path))


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", 0) or 0
        raise ConfigError(f"{source}:{lineno}: {exc.message.splitlines()[0]}") from exc

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(
                f"{source}:{_line_of(text, section)}: unknown section [{section}]"
            )
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"{source}:{_line_of(text, section, key)}: "
                    f"unknown key {key!r} in [{section}]"
                )
            kind = _SCHEMA[section][key]
            try:
                if kind is bool:
                    value = _BOOL_VALUES[raw.strip().lower()]
                else:
                    value = kind(raw.strip())
            except (KeyError, ValueError):
                raise ConfigError(
                    f"{source}:{_line_of(text, section, key)}: "
                    f"cannot parse {key} = {raw!r} as {kind.__name__}"
                ) from None
            values.setdefault(section, {})[key] = value

    kwargs = {}
    kwargs.update(values.get("run", {}))
    kwargs.update(values.get("mask", {}))
    kwargs.update(values.get("loss", {}))
    kwargs.update(values.get("train", {}))
    kwargs.update(values.get("data", {}))
    kwargs.update(values.get("ablation", {}))
    try:
        model = ModelConfig(**values.get("model", {}))
        return RunConfig(model=model, **kwargs)
    except (ConfigError, ValueError) as exc:
        raise ConfigError(f"{source}:0: {exc}") from exc


def write_config(cfg: RunConfig, path):
    """Serialize a RunConfig back to the INI layout (used to make runs
    self-describing next to their checkpoints)."""
    m = cfg.model
    lines = [
        "[run]",
        f"seed = {cfg.seed}",
        f"out_dir = {cfg.out_dir}",
        f"dump_pseudo_labels = {str(cfg.dump_pseudo_labels).lower()}",
        "",
        "[model]",
        f"c = {m.c}", f"n_dec = {m.n_dec}", f"l_enc = {m.l_enc}", f"l_dec = {m.l_dec}",
        f"heads = {m.heads}", f"num_classes = {m.num_classes}",
        f"patch_size = {m.patch_size}", f"image_size = {m.image_size}",
        "",
        "[mask]",
        f"theta_mask = {cfg.theta_mask!r}", f"eta = {cfg.eta!r}",
        "",
        "[loss]",
        f"lambda_mtwfa = {cfg.lambda_mtwfa!r}", f"lambda_mdqfa = {cfg.lambda_mdqfa!r}",
        "",
        "[train]",
        f"epochs_pretrain = {cfg.epochs_pretrain}",
        f"epochs_selftrain = {cfg.epochs_selftrain}",
        f"lr_pretrain = {cfg.lr_pretrain!r}", f"lr_selftrain = {cfg.lr_selftrain!r}",
        f"pseudo_threshold = {cfg.pseudo_threshold!r}",
        f"ema_momentum = {cfg.ema_momentum!r}",
        "",
        "[data]",
        f"n_source = {cfg.n_source}", f"n_target = {cfg.n_target}",
        f"n_target_val = {cfg.n_target_val}",
        "",
        "[ablation]",
        f"use_target_like = {str(cfg.use_target_like).lower()}",
        f"mdqfa = {cfg.mdqfa}", f"mtwfa = {cfg.mtwfa}",
        f"use_mean_teacher = {str(cfg.use_mean_teacher).lower()}",
        f"use_oqkt = {str(cfg.use_oqkt).lower()}",
        "",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
