"""Architecture files: a plain text format for the block/repeat scheme.

    d_model = 256
    heads = 4
    decoder_layers = 6
    ffn_dim = 2048
    vocab_size = 8000
    feature_dim = 80
    encoder_layers = 12

    block 6 : local(64) conv(5,2) conv(5,2) conv(5,2)
    block 6 : local(64) local(64) conv(5,2) conv(5,2)

Each block line contributes `repeat` identical encoder layers listing one
head spec per head.  The declared encoder_layers total must match the sum
of repeats.  Named presets ship with the package and resolve anywhere a
file path is accepted.
"""

from __future__ import annotations

import os
import re
from importlib import resources

from .mhma import HeadSpec
from .model import ModelConfig

PRESET_NAMES = ("baseline", "local_attention", "conv_attention",
                "multiformer_lc", "multiformer_v1", "multiformer_v2")

_REQUIRED = ("d_model", "heads", "decoder_layers", "ffn_dim", "vocab_size",
             "feature_dim", "encoder_layers")
_OPTIONAL_INT = ("max_source_len", "max_target_len")
_KNOWN_KEYS = frozenset(_REQUIRED) | frozenset(_OPTIONAL_INT) | {"dropout"}

_SPEC_RE = re.compile(r"^(full|local\((\d+)\)|conv\((\d+),(\d+)\))$")


class ArchitectureError(ValueError):
    """Parse or validation failure, with file/line context."""


def _fail(source: str, lineno: int, message: str):
    raise ArchitectureError(f"{source}:{lineno}: {message}")


def parse_head_spec(token: str, source: str = "<spec>", lineno: int = 0) -> HeadSpec:
    m = _SPEC_RE.match(token)
    if not m:
        _fail(source, lineno,
              f"unknown head spec {token!r} (expected full, local(w), or conv(k,s))")
    try:
        if token == "full":
            return HeadSpec("full")
        if m.group(2) is not None:
            return HeadSpec("local", window=int(m.group(2)))
        return HeadSpec("conv", kernel=int(m.group(3)), stride=int(m.group(4)))
    except ValueError as e:
        _fail(source, lineno, str(e))


def parse_architecture_text(text: str, source: str = "<text>") -> ModelConfig:
    scalars: dict[str, float] = {}
    blocks: list[tuple[int, list[HeadSpec], int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("block"):
            head, _, specs_part = line.partition(":")
            fields = head.split()
            if len(fields) != 2 or not specs_part.strip():
                _fail(source, lineno, f"malformed block line {raw.strip()!r}")
            try:
                repeat = int(fields[1])
            except ValueError:
                _fail(source, lineno, f"block repeat must be an integer, got {fields[1]!r}")
            if repeat < 1:
                _fail(source, lineno, f"block repeat must be >= 1, got {repeat}")
            specs = [parse_head_spec(tok, source, lineno)
                     for tok in specs_part.split()]
            blocks.append((repeat, specs, lineno))
        elif "=" in line:
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in _KNOWN_KEYS:
                _fail(source, lineno, f"unknown key {key!r}")
            if key in scalars:
                _fail(source, lineno, f"duplicate key {key!r}")
            try:
                scalars[key] = float(value) if key == "dropout" else int(value)
            except ValueError:
                _fail(source, lineno, f"bad value for {key}: {value!r}")
        else:
            _fail(source, lineno, f"unrecognized line {raw.strip()!r}")

    for key in _REQUIRED:
        if key not in scalars:
            _fail(source, 0, f"missing required key {key!r}")
    if not blocks:
        _fail(source, 0, "no block lines")

    heads = int(scalars["heads"])
    declared = int(scalars["encoder_layers"])
    layers: list[list[HeadSpec]] = []
    for repeat, specs, lineno in blocks:
        if len(specs) != heads:
            _fail(source, lineno,
                  f"block lists {len(specs)} head specs, architecture has {heads} heads")
        layers.extend([list(specs) for _ in range(repeat)])
    if len(layers) != declared:
        _fail(source, blocks[-1][2],
              f"blocks sum to {len(layers)} layers, encoder_layers declares {declared}")

    kwargs = dict(
        d_model=int(scalars["d_model"]), heads=heads, encoder_layers=layers,
        decoder_layers=int(scalars["decoder_layers"]),
        ffn_dim=int(scalars["ffn_dim"]), vocab_size=int(scalars["vocab_size"]),
        input_feature_dim=int(scalars["feature_dim"]),
        dropout=float(scalars.get("dropout", 0.0)))
    for key in _OPTIONAL_INT:
        if key in scalars:
            kwargs[key] = int(scalars[key])
    try:
        return ModelConfig(**kwargs)
    except ValueError as e:
        _fail(source, 0, str(e))


def preset_path(name: str):
    return resources.files("multiformer").joinpath("presets", f"{name}.arch")


def parse_architecture(path_or_preset) -> ModelConfig:
    """Parse an architecture file; a bare preset name resolves to the
    bundled copy."""
    name = str(path_or_preset)
    if os.path.exists(name):
        with open(name) as fh:
            return parse_architecture_text(fh.read(), source=name)
    if name in PRESET_NAMES:
        text = preset_path(name).read_text()
        return parse_architecture_text(text, source=f"preset:{name}")
    raise ArchitectureError(
        f"{name!r} is neither a file nor a preset (presets: {', '.join(PRESET_NAMES)})")


def format_architecture(config: ModelConfig) -> str:
    """Serialize a config back to the text format (blocks merged by
    consecutive identical layers)."""
    lines = [
        f"d_model = {config.d_model}",
        f"heads = {config.heads}",
        f"decoder_layers = {config.decoder_layers}",
        f"ffn_dim = {config.ffn_dim}",
        f"vocab_size = {config.vocab_size}",
        f"feature_dim = {config.input_feature_dim}",
        f"encoder_layers = {len(config.encoder_layers)}",
    ]
    if config.dropout:
        lines.append(f"dropout = {config.dropout}")
    lines.append(f"max_source_len = {config.max_source_len}")
    lines.append(f"max_target_len = {config.max_target_len}")
    lines.append("")
    runs: list[tuple[list[str], int]] = []
    for layer in config.encoder_layers:
        labels = [s.label() for s in layer]
        if runs and runs[-1][0] == labels:
            runs[-1] = (labels, runs[-1][1] + 1)
        else:
            runs.append((labels, 1))
    for labels, repeat in runs:
        lines.append(f"block {repeat} : {' '.join(labels)}")
    return "\n".join(lines) + "\n"


_TASK_KEYS = {"symbol_count": int, "target_len_min": int, "target_len_max": int,
              "redundancy": int, "feature_dim": int, "noise": float,
              "codebook_seed": int}


def parse_task_text(text: str, source: str = "<text>"):
    """Task files are `key = value` lines for SyntheticTaskSpec fields;
    omitted keys keep their defaults."""
    from .training import SyntheticTaskSpec
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in _TASK_KEYS:
            _fail(source, lineno, f"unknown task line {raw.strip()!r} "
                  f"(keys: {', '.join(sorted(_TASK_KEYS))})")
        if key in kwargs:
            _fail(source, lineno, f"duplicate key {key!r}")
        try:
            kwargs[key] = _TASK_KEYS[key](value)
        except ValueError:
            _fail(source, lineno, f"bad value for {key}: {value!r}")
    try:
        return SyntheticTaskSpec(**kwargs)
    except ValueError as e:
        _fail(source, 0, str(e))


def parse_task(path):
    with open(path) as fh:
        return parse_task_text(fh.read(), source=str(path))


def format_task(spec) -> str:
    lines = [f"{key} = {getattr(spec, key)}" for key in sorted(_TASK_KEYS)]
    return "\n".join(lines) + "\n"


# -- toy-scale variants of the shipped presets --------------------------------

TOY_WINDOW = 8
TOY_KERNEL = 1
_TOY_BLOCKS = {
    "baseline": [(4, "F F F F")],
    "local_attention": [(4, "L L L L")],
    "conv_attention": [(4, "C C C C")],
    "multiformer_lc": [(4, "L L C C")],
    "multiformer_v1": [(2, "L C C C"), (2, "L L C C")],
    "multiformer_v2": [(1, "L C C C"), (2, "L L L C"), (1, "L L C C")],
}


def toy_model_config(preset: str, vocab_size: int, feature_dim: int,
                     window: int = TOY_WINDOW,
                     kernel: int = TOY_KERNEL) -> ModelConfig:
    """Desk-scale variant of a preset: d=64, 4 heads, 4 encoder / 2
    decoder layers, keeping the preset's mechanism-mix pattern.

    Resolution hyperparameters shrink with the dimensions: the local
    window comes down to 8 and the compression kernel to 1.  The stride
    stays 2; it sets the compression factor that defines conv heads.
    At desk-scale sequence lengths a wide compression kernel blends
    most of the sequence into every key, which stalls training when a
    layer has no uncompressed head to anchor it.
    """
    if preset not in _TOY_BLOCKS:
        raise ArchitectureError(f"unknown toy preset {preset!r}")
    expand = {"F": HeadSpec("full"),
              "L": HeadSpec("local", window=window),
              "C": HeadSpec("conv", kernel=kernel, stride=2)}
    layers = []
    for repeat, pattern in _TOY_BLOCKS[preset]:
        specs = [expand[c] for c in pattern.split()]
        layers.extend([list(specs) for _ in range(repeat)])
    return ModelConfig(d_model=64, heads=4, encoder_layers=layers,
                       decoder_layers=2, ffn_dim=128, vocab_size=vocab_size,
                       input_feature_dim=feature_dim, max_source_len=512,
                       max_target_len=128)
