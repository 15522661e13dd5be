"""Flat key=value run configuration.

One `key=value` pair per line, UTF-8, `#` starts a comment.  Every key has a
documented default, so an empty config is valid; unknown keys are hard
errors.  Command-line flags override file values.
"""

from __future__ import annotations


class UsageError(ValueError):
    """Bad command line or configuration input (CLI exit code 1)."""


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_kv(pairs: dict[str, str]) -> str:
    return "".join(f"{k}={pairs[k]}\n" for k in sorted(pairs))


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _bool(s):
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _ints(s):
    return tuple(int(p) for p in s.split(",") if p.strip() != "")


def _floats(s):
    return tuple(float(p) for p in s.split(",") if p.strip() != "")


def _strs(s):
    return tuple(p.strip() for p in s.split(",") if p.strip() != "")


def _choice(*allowed):
    def parse(s):
        if s not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}, got {s!r}")
        return s
    return parse


def _alpha(s):
    if s == "auto":
        return "auto"
    v = float(s)
    if v < 0:
        raise ValueError(f"alpha must be non-negative or 'auto', got {s}")
    return v


# key -> (default string, parser, help)
KEY_DEFS: dict[str, tuple[str, object, str]] = {
    "scene.size": ("64", _int, "square image size, power of two"),
    "scene.shapes_min": ("1", _int, "min salient shapes per image"),
    "scene.shapes_max": ("3", _int, "max salient shapes per image"),
    "scene.kinds": ("circle,rectangle,triangle", _strs, "shape kinds to draw"),
    "scene.color_contrast": ("0.6", _float, "RGB separability of object vs background, 0..1"),
    "scene.depth_contrast": ("0.6", _float, "depth separability of object vs background, 0..1"),
    "scene.noise_std": ("0.02", _float, "gaussian noise stddev on rgb and depth"),
    "scene.background": ("flat", _choice("flat", "gradient", "checker"), "background style"),
    "data.n": ("600", _int, "number of samples to generate"),
    "data.seed": ("0", _int, "dataset generation seed"),
    "master.input_channels": ("3", _int, "3 for RGB, 4 for the RGB-D single-stream baseline"),
    "master.stage_channels": ("16,32,64,128", _ints, "encoder channels per block"),
    "master.convs_per_block": ("2,2,3,3", _ints, "convs per encoder block (2,2,4,4 for the deeper pattern)"),
    "master.input_size": ("64", _int, "training resolution, power of two"),
    "master.side_outputs": ("true", _bool, "emit per-stage side outputs into the final head"),
    "subnet.input_channels": ("1", _int, "depth input channels"),
    "subnet.stage_channels": ("16,32,64,128", _ints, "depth encoder channels per block"),
    "subnet.convs_per_block": ("2,2,3,3", _ints, "convs per depth encoder block"),
    "subnet.fusion_stage": ("-1", _int, "master stage fused with depth features; -1 = deepest"),
    "fusion.mode": ("gate", _choice("gate", "add", "concat"), "how depth features enter the master"),
    "fusion.alpha": ("1.0", _alpha, "combination weight factor, or 'auto' for the channel ratio"),
    "model.dtype": ("f32", _choice("f32", "f64"), "compute precision"),
    "train.epochs": ("20", _int, "training epochs"),
    "train.batch_size": ("8", _int, "minibatch size"),
    "train.lr_start": ("0.001", _float, "learning rate at the first epoch"),
    "train.lr_end": ("0.0001", _float, "learning rate at the last epoch (linear decay)"),
    "train.seed": ("0", _int, "training seed (init, shuffling)"),
    "train.side_weight": ("0.5", _float, "side-output supervision weight; 0 = final-only"),
    "train.shuffle": ("true", _bool, "reshuffle training samples each epoch"),
    "pretrain.epochs": ("15", _int, "epochs for RGB-only pretraining of the master"),
    "metrics.beta2": ("0.3", _float, "beta^2 of the F-measure"),
    "metrics.f_mode": ("adaptive", _choice("adaptive", "max-curve"), "F-measure thresholding rule"),
    "metrics.threshold_scale": ("2.0", _float, "adaptive threshold = scale * mean(S), clamped to 1"),
    "ablate.seeds": ("0", _ints, "seeds for ablation replicates"),
    "ablate.alphas_lt": ("0.3,0.5,0.7,0.9", _floats, "alpha<1 sweep, averaged into one row"),
    "ablate.alphas_gt": ("1.3,1.5,1.7,1.9", _floats, "alpha>1 sweep, averaged into one row"),
    "ablate.jobs": ("1", _int, "parallel training runs"),
    "ablate.alpha_zero_smoke": ("false", _bool, "add an alpha=0 row (must reproduce the prior-only variant)"),
}


class RunConfig:
    """Typed view over the key catalog with file/flag overrides applied."""

    def __init__(self):
        self._raw = {k: d for k, (d, _, _) in KEY_DEFS.items()}

    def apply_pairs(self, pairs: dict[str, str], source: str = "<override>"):
        for key, value in pairs.items():
            if key not in KEY_DEFS:
                raise UsageError(f"{source}: unknown configuration key {key!r}")
            _, parser, _ = KEY_DEFS[key]
            try:
                parser(value)
            except ValueError as e:
                raise UsageError(f"{source}: bad value for {key}: {e}") from e
            self._raw[key] = value
        return self

    def apply_file(self, path):
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
        return self.apply_pairs(parse_kv_text(text, source=str(path)), source=str(path))

    def __getitem__(self, key: str):
        _, parser, _ = KEY_DEFS[key]
        return parser(self._raw[key])

    def raw(self, key: str) -> str:
        return self._raw[key]

    # dataclass builders -------------------------------------------------

    def scene_config(self):
        from .data import SceneConfig
        return SceneConfig(
            size=self["scene.size"],
            shapes_min=self["scene.shapes_min"],
            shapes_max=self["scene.shapes_max"],
            kinds=self["scene.kinds"],
            color_contrast=self["scene.color_contrast"],
            depth_contrast=self["scene.depth_contrast"],
            noise_std=self["scene.noise_std"],
            background=self["scene.background"],
        )

    def master_config(self, input_channels: int | None = None):
        from .model import MasterConfig
        return MasterConfig(
            input_channels=input_channels if input_channels is not None
            else self["master.input_channels"],
            stage_channels=self["master.stage_channels"],
            convs_per_block=self["master.convs_per_block"],
            input_size=self["master.input_size"],
            side_outputs=self["master.side_outputs"],
        )

    def subnet_config(self):
        from .model import SubNetConfig
        stage = self["subnet.fusion_stage"]
        if stage < 0:
            stage = len(self["master.stage_channels"]) - 1
        return SubNetConfig(
            input_channels=self["subnet.input_channels"],
            stage_channels=self["subnet.stage_channels"],
            convs_per_block=self["subnet.convs_per_block"],
            fusion_stage=stage,
        )

    def fusion_spec(self, alpha=None):
        from .model import FusionSpec, compute_alpha
        a = self["fusion.alpha"] if alpha is None else alpha
        if a == "auto":
            stage = self.subnet_config().fusion_stage
            a = compute_alpha(self["subnet.stage_channels"][stage],
                              self["master.stage_channels"][stage])
        return FusionSpec(mode=self["fusion.mode"], alpha=float(a))

    def train_config(self, epochs: int | None = None):
        from .train import TrainConfig
        return TrainConfig(
            epochs=self["train.epochs"] if epochs is None else epochs,
            batch_size=self["train.batch_size"],
            lr_start=self["train.lr_start"],
            lr_end=self["train.lr_end"],
            seed=self["train.seed"],
            side_weight=self["train.side_weight"],
            shuffle=self["train.shuffle"],
        )

    def dtype(self):
        import numpy as np
        return np.float64 if self["model.dtype"] == "f64" else np.float32


def key_catalog() -> str:
    """Full key catalog with defaults, for --help."""
    lines = []
    for key in sorted(KEY_DEFS):
        default, _, help_text = KEY_DEFS[key]
        lines.append(f"  {key:<26} {help_text} (default: {default})")
    return "\n".join(lines)
