"""Network construction and forward passes.

A model is a declarative ``ModelSpec`` (conv encoder, upsampling decoder,
dense classifier head, optional dense domain head) plus a flat name->Var
parameter table. Two presets cover the documented window lengths — "clas"
(9 conv layers over length-256 windows) and "apnea" (12 conv layers over
length-1024 windows) — and ``auto_spec`` builds a small custom stack for
any input length that is latent_dim times a power of two.

Layer hyperparameters the presets fix: kernel size 3 and padding 1
throughout, stride 2 on alternating encoder layers so the length trace
lands exactly on the latent width, channels ramping 8 -> 16 -> 32 and
tapering back to a single channel at the bottleneck.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .autodiff import (
    ShapeMismatchError,
    Var,
    conv1d,
    conv1d_output_length,
    dense,
    make_rng,
    relu,
    sigmoid,
    softmax,
    upsample_nearest,
)

CHECKPOINT_FORMAT = "sirl-checkpoint"
CHECKPOINT_VERSION = 1

PRESETS = ("clas", "apnea")


@dataclass(frozen=True)
class ConvSpec:
    """One encoder stage: cross-correlation conv, then ReLU (except last)."""

    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if self.out_channels < 1 or self.kernel_size < 1 or self.stride < 1:
            raise ValueError(f"conv stage fields must be positive: {self}")
        if self.padding < 0:
            raise ValueError(f"conv padding must be nonnegative: {self}")


@dataclass(frozen=True)
class UpSpec:
    """One decoder stage: nearest-neighbour upsample, then stride-1 conv."""

    factor: int
    out_channels: int
    kernel_size: int = 3
    padding: int = 1

    def __post_init__(self):
        if self.factor < 1 or self.out_channels < 1 or self.kernel_size < 1:
            raise ValueError(f"up stage fields must be positive: {self}")
        if self.padding < 0:
            raise ValueError(f"up padding must be nonnegative: {self}")


class SpecValidationError(ValueError):
    """The layer stack does not compose onto the promised shapes."""


@dataclass(frozen=True)
class ModelSpec:
    input_length: int
    encoder_layers: tuple[ConvSpec, ...]
    decoder_layers: tuple[UpSpec, ...]
    latent_dim: int = 8
    in_channels: int = 1
    classifier: tuple[int, ...] = (16, 1)
    domain_head: tuple[int, ...] = ()
    preset: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "encoder_layers", tuple(self.encoder_layers))
        object.__setattr__(self, "decoder_layers", tuple(self.decoder_layers))
        object.__setattr__(self, "classifier", tuple(self.classifier))
        object.__setattr__(self, "domain_head", tuple(self.domain_head))

    # -- shape composition ----------------------------------------------

    def encoder_trace(self) -> list[tuple[int, int]]:
        """(channels, length) after the input and after each encoder stage."""
        trace = [(self.in_channels, self.input_length)]
        for layer in self.encoder_layers:
            _, length = trace[-1]
            out_len = conv1d_output_length(
                length, layer.kernel_size, layer.stride, layer.padding
            )
            trace.append((layer.out_channels, out_len))
        return trace

    def decoder_trace(self) -> list[tuple[int, int]]:
        c, length = self.latent_shape()
        trace = [(c, length)]
        for layer in self.decoder_layers:
            _, length = trace[-1]
            up = length * layer.factor
            out_len = conv1d_output_length(up, layer.kernel_size, 1, layer.padding)
            trace.append((layer.out_channels, out_len))
        return trace

    def latent_shape(self) -> tuple[int, int]:
        c, length = self.encoder_trace()[-1]
        return c, length

    def validate(self) -> None:
        """Raise SpecValidationError (with the length trace) on any shape break."""
        if self.input_length < 1:
            raise SpecValidationError(f"input_length must be positive, got {self.input_length}")
        if self.latent_dim < 1:
            raise SpecValidationError(f"latent_dim must be positive, got {self.latent_dim}")
        if not self.encoder_layers or not self.decoder_layers:
            raise SpecValidationError("encoder and decoder each need at least one stage")
        if self.preset in PRESETS:
            expect_enc, expect_dec = (9, 8) if self.preset == "clas" else (12, 11)
            if len(self.encoder_layers) != expect_enc or len(self.decoder_layers) != expect_dec:
                raise SpecValidationError(
                    f"preset {self.preset!r} requires {expect_enc} encoder / "
                    f"{expect_dec} decoder stages, got "
                    f"{len(self.encoder_layers)} / {len(self.decoder_layers)}"
                )
            if len(self.classifier) != 2:
                raise SpecValidationError(
                    f"preset {self.preset!r} uses a 2-layer classifier, got {self.classifier}"
                )

        trace = self.encoder_trace()
        if any(length < 1 for _, length in trace):
            raise SpecValidationError(
                "encoder collapses the signal to nothing: " + _format_trace(trace)
            )
        c, length = trace[-1]
        if c * length != self.latent_dim:
            raise SpecValidationError(
                f"encoder ends at {c} x {length} = {c * length} features, "
                f"not latent_dim {self.latent_dim}: " + _format_trace(trace)
            )

        dec = self.decoder_trace()
        dc, dlen = dec[-1]
        if (dc, dlen) != (self.in_channels, self.input_length):
            raise SpecValidationError(
                f"decoder ends at {dc} x {dlen}, not the input shape "
                f"{self.in_channels} x {self.input_length}: " + _format_trace(dec)
            )

        if not self.classifier or self.classifier[-1] != 1:
            raise SpecValidationError(
                f"classifier widths must end in 1, got {self.classifier}"
            )
        if any(w < 1 for w in self.classifier) or any(w < 1 for w in self.domain_head):
            raise SpecValidationError("dense widths must be positive")


def _format_trace(trace: list[tuple[int, int]]) -> str:
    return " -> ".join(f"{c}x{l}" for c, l in trace)


def expected_param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Name -> shape table implied by the spec, in build order."""
    shapes: dict[str, tuple[int, ...]] = {}
    in_c = spec.in_channels
    for i, layer in enumerate(spec.encoder_layers):
        shapes[f"enc{i}.kernels"] = (layer.out_channels, in_c, layer.kernel_size)
        shapes[f"enc{i}.bias"] = (layer.out_channels,)
        in_c = layer.out_channels
    in_c = spec.latent_shape()[0]
    for i, layer in enumerate(spec.decoder_layers):
        shapes[f"dec{i}.kernels"] = (layer.out_channels, in_c, layer.kernel_size)
        shapes[f"dec{i}.bias"] = (layer.out_channels,)
        in_c = layer.out_channels
    for prefix, widths in (("cls", spec.classifier), ("dom", spec.domain_head)):
        in_w = spec.latent_dim
        for i, out_w in enumerate(widths):
            shapes[f"{prefix}{i}.weights"] = (out_w, in_w)
            shapes[f"{prefix}{i}.bias"] = (out_w,)
            in_w = out_w
    return shapes


def preset_spec(
    name: str,
    n_subjects: int = 0,
    latent_dim: int = 8,
) -> ModelSpec:
    """The two documented stacks, parameterized only by the domain-head width."""
    domain = (16, n_subjects) if n_subjects else ()
    if name == "clas":
        channels = [8, 16, 32, 32, 16, 8, 4, 2, 1]
        strides = [2, 1, 2, 1, 2, 1, 2, 1, 2]
        up_factors = [2, 2, 2, 2, 2, 1, 1, 1]
        up_channels = [2, 4, 8, 16, 32, 16, 8, 1]
        input_length = latent_dim * 32
    elif name == "apnea":
        channels = [8, 16, 32, 32, 32, 16, 16, 8, 8, 4, 2, 1]
        strides = [2, 1, 2, 1, 2, 1, 2, 1, 2, 1, 2, 2]
        up_factors = [2, 2, 2, 2, 2, 2, 2, 1, 1, 1, 1]
        up_channels = [2, 4, 8, 16, 32, 32, 16, 8, 4, 2, 1]
        input_length = latent_dim * 128
    else:
        raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")
    spec = ModelSpec(
        input_length=input_length,
        encoder_layers=tuple(ConvSpec(c, stride=s) for c, s in zip(channels, strides)),
        decoder_layers=tuple(UpSpec(f, c) for f, c in zip(up_factors, up_channels)),
        latent_dim=latent_dim,
        classifier=(16, 1),
        domain_head=domain,
        preset=name,
    )
    spec.validate()
    return spec


def auto_spec(
    input_length: int,
    latent_dim: int = 8,
    n_subjects: int = 0,
    base_channels: int = 8,
    max_channels: int = 32,
) -> ModelSpec:
    """A compact custom stack for input_length == latent_dim * 2**k.

    Builds k stride-2 conv stages plus a channel-collapsing head, mirrored
    by k doubling decoder stages — handy for short synthetic windows where
    the full presets would be overkill.
    """
    if input_length < latent_dim or input_length % latent_dim:
        raise SpecValidationError(
            f"input_length {input_length} is not latent_dim {latent_dim} * 2**k"
        )
    ratio = input_length // latent_dim
    k = ratio.bit_length() - 1
    if 2**k != ratio:
        raise SpecValidationError(
            f"input_length {input_length} is not latent_dim {latent_dim} * 2**k"
        )
    enc_channels = [min(base_channels * 2**i, max_channels) for i in range(k)]
    encoder = [ConvSpec(c, stride=2) for c in enc_channels] + [ConvSpec(1, stride=1)]
    decoder = [UpSpec(2, c) for c in reversed(enc_channels)] + [UpSpec(1, 1)]
    spec = ModelSpec(
        input_length=input_length,
        encoder_layers=tuple(encoder),
        decoder_layers=tuple(decoder),
        latent_dim=latent_dim,
        classifier=(16, 1),
        domain_head=(16, n_subjects) if n_subjects else (),
        preset="custom",
    )
    spec.validate()
    return spec


def _glorot(rng, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Model:
    """A spec plus its parameter table; all forward passes live here.

    Parameters are ``Var`` leaves in a name -> Var dict with stable insertion
    order (encoder, decoder, classifier, domain head). Forward methods accept
    a single sample or a batch and return matching arity.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, Var], init_seed: int):
        spec.validate()
        expected = expected_param_shapes(spec)
        got = {name: var.shape for name, var in params.items()}
        if got != expected:
            missing = expected.keys() - got.keys()
            extra = got.keys() - expected.keys()
            wrong = {
                n: (got[n], expected[n])
                for n in expected.keys() & got.keys()
                if got[n] != expected[n]
            }
            raise ShapeMismatchError(
                f"parameter table does not match spec: missing={sorted(missing)} "
                f"extra={sorted(extra)} wrong_shapes={wrong}"
            )
        self.spec = spec
        self.params = params
        self.init_seed = init_seed

    # -- parameter access -------------------------------------------------

    def parameters(self) -> list[Var]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> Var:
        return self.params[name]

    # -- forward passes ----------------------------------------------------

    def encode(self, x) -> Var:
        """Signal(s) of the configured length -> latent vector(s)."""
        x, single = self._as_batch(x)
        h = x
        last = len(self.spec.encoder_layers) - 1
        for i in range(last + 1):
            h = conv1d(
                h,
                self.params[f"enc{i}.kernels"],
                self.params[f"enc{i}.bias"],
                stride=self.spec.encoder_layers[i].stride,
                padding=self.spec.encoder_layers[i].padding,
            )
            if i < last:
                h = relu(h)
        z = h.reshape((h.shape[0], self.spec.latent_dim))
        return z.reshape((self.spec.latent_dim,)) if single else z

    def decode(self, z) -> Var:
        """Latent vector(s) -> reconstructed signal(s) of the input length."""
        z = z if isinstance(z, Var) else Var(np.asarray(z, dtype=np.float64))
        single = z.value.ndim == 1
        if (single and z.shape != (self.spec.latent_dim,)) or (
            not single and z.shape[1:] != (self.spec.latent_dim,)
        ):
            raise ShapeMismatchError(
                f"latent width {z.shape} does not match latent_dim {self.spec.latent_dim}"
            )
        c0, l0 = self.spec.latent_shape()
        batch = 1 if single else z.shape[0]
        h = z.reshape((batch, c0, l0))
        last = len(self.spec.decoder_layers) - 1
        for i, layer in enumerate(self.spec.decoder_layers):
            h = upsample_nearest(h, layer.factor)
            h = conv1d(
                h,
                self.params[f"dec{i}.kernels"],
                self.params[f"dec{i}.bias"],
                stride=1,
                padding=layer.padding,
            )
            if i < last:
                h = relu(h)
        out = h.reshape((batch, self.spec.input_length))
        return out.reshape((self.spec.input_length,)) if single else out

    def classify(self, z) -> Var:
        """Latent(s) -> probability of the positive class, in (0, 1)."""
        h = self._dense_chain(z, "cls", len(self.spec.classifier))
        if h.value.ndim == 2:
            return sigmoid(h.reshape((h.shape[0],)))
        return sigmoid(h.reshape(()))

    def classify_domain(self, z) -> Var:
        """Latent(s) -> softmax vector over subjects (rows sum to 1)."""
        if not self.spec.domain_head:
            raise ValueError("this model was built without a domain head")
        h = self._dense_chain(z, "dom", len(self.spec.domain_head))
        return softmax(h)

    def _dense_chain(self, z, prefix: str, n_layers: int) -> Var:
        h = z if isinstance(z, Var) else Var(np.asarray(z, dtype=np.float64))
        width = h.shape[-1] if h.value.ndim else 0
        if width != self.spec.latent_dim:
            raise ShapeMismatchError(
                f"head input width {h.shape} does not match latent_dim "
                f"{self.spec.latent_dim}"
            )
        for i in range(n_layers):
            h = dense(h, self.params[f"{prefix}{i}.weights"], self.params[f"{prefix}{i}.bias"])
            if i < n_layers - 1:
                h = relu(h)
        return h

    def _as_batch(self, x) -> tuple[Var, bool]:
        x = x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))
        c, length = self.spec.in_channels, self.spec.input_length
        if x.value.ndim == 1 and x.shape == (length,) and c == 1:
            return x.reshape((1, 1, length)), True
        if x.value.ndim == 2 and x.shape == (c, length):
            return x.reshape((1, c, length)), True
        if x.value.ndim == 2 and c == 1 and x.shape[1:] == (length,):
            return x.reshape((x.shape[0], 1, length)), False
        if x.value.ndim == 3 and x.shape[1:] == (c, length):
            return x, False
        raise ShapeMismatchError(
            f"expected signals of length {length} ({c} channel(s)), got shape {x.shape}"
        )


def build(spec: ModelSpec, seed: int = 0) -> Model:
    """Glorot-uniform initialization of every layer, deterministic in seed."""
    spec.validate()
    rng = make_rng(seed, "model-init")
    params: dict[str, Var] = {}

    in_c = spec.in_channels
    for i, layer in enumerate(spec.encoder_layers):
        shape = (layer.out_channels, in_c, layer.kernel_size)
        fan_in, fan_out = in_c * layer.kernel_size, layer.out_channels * layer.kernel_size
        params[f"enc{i}.kernels"] = Var(_glorot(rng, shape, fan_in, fan_out))
        params[f"enc{i}.bias"] = Var(np.zeros(layer.out_channels))
        in_c = layer.out_channels

    in_c = spec.latent_shape()[0]
    for i, layer in enumerate(spec.decoder_layers):
        shape = (layer.out_channels, in_c, layer.kernel_size)
        fan_in, fan_out = in_c * layer.kernel_size, layer.out_channels * layer.kernel_size
        params[f"dec{i}.kernels"] = Var(_glorot(rng, shape, fan_in, fan_out))
        params[f"dec{i}.bias"] = Var(np.zeros(layer.out_channels))
        in_c = layer.out_channels

    for prefix, widths in (("cls", spec.classifier), ("dom", spec.domain_head)):
        in_w = spec.latent_dim
        for i, out_w in enumerate(widths):
            params[f"{prefix}{i}.weights"] = Var(_glorot(rng, (out_w, in_w), in_w, out_w))
            params[f"{prefix}{i}.bias"] = Var(np.zeros(out_w))
            in_w = out_w

    return Model(spec, params, init_seed=seed)


# -- checkpoints ------------------------------------------------------------


def _spec_to_dict(spec: ModelSpec) -> dict:
    d = asdict(spec)
    d["encoder_layers"] = [asdict(l) for l in spec.encoder_layers]
    d["decoder_layers"] = [asdict(l) for l in spec.decoder_layers]
    d["classifier"] = list(spec.classifier)
    d["domain_head"] = list(spec.domain_head)
    return d


def _spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(
        input_length=d["input_length"],
        encoder_layers=tuple(ConvSpec(**l) for l in d["encoder_layers"]),
        decoder_layers=tuple(UpSpec(**l) for l in d["decoder_layers"]),
        latent_dim=d["latent_dim"],
        in_channels=d["in_channels"],
        classifier=tuple(d["classifier"]),
        domain_head=tuple(d["domain_head"]),
        preset=d["preset"],
    )


def save_checkpoint(model: Model, path) -> None:
    """Write spec + parameters as JSON; float64 bytes travel base64-encoded."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "init_seed": model.init_seed,
        "spec": _spec_to_dict(model.spec),
        "params": [
            {
                "name": name,
                "shape": list(var.shape),
                "data": base64.b64encode(np.ascontiguousarray(var.value).tobytes()).decode(),
            }
            for name, var in model.params.items()
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_checkpoint(path) -> Model:
    """Bit-exact inverse of save_checkpoint."""
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {payload.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    spec = _spec_from_dict(payload["spec"])
    params: dict[str, Var] = {}
    for entry in payload["params"]:
        arr = np.frombuffer(base64.b64decode(entry["data"]), dtype=np.float64)
        params[entry["name"]] = Var(arr.reshape(entry["shape"]).copy())
    model = Model(spec, params, init_seed=payload["init_seed"])
    for name, var in model.params.items():
        if not np.all(np.isfinite(var.value)):
            raise ValueError(f"checkpoint parameter {name} holds non-finite values")
    return model
