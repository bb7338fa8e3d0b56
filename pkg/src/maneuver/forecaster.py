"""Outside-motion model: stacked peephole ConvLSTM encoder + 1x1 decoder.

The encoder consumes five color-coded optical-flow frames (spaced a fixed
interval apart) and compresses their motion into its final hidden state;
a point-wise convolution decodes that state into the flow frame one
interval ahead. The final hidden state doubles as the outside feature for
maneuver classification. All gate convolutions are bias-free.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .metrics import image_quality
from .nn import ConvSpec, Module, conv2d, uniform_fan_in
from .optim import Sgd, SgdConfig
from .tensor import Tensor, hadamard, sigmoid, tanh

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    """Stacked-encoder geometry. The default is the full-size model
    (channels 128/64/64/32 on 112x176 inputs); tests and desk-scale runs
    shrink channels and spatial size."""

    channels: tuple[int, ...] = (128, 64, 64, 32)
    kernel: tuple[int, int] = (3, 3)
    input_channels: int = 3
    input_len: int = 5
    spatial: tuple[int, int] = (112, 176)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or min(self.channels) < 1:
            raise ConfigError(f"bad channel plan {self.channels}")
        if any(k % 2 == 0 or k < 1 for k in self.kernel):
            raise ConfigError(f"kernel must be odd to preserve spatial size: {self.kernel}")
        if self.input_len < 1 or self.input_channels < 1:
            raise ConfigError("input_len and input_channels must be positive")


@dataclass(frozen=True)
class ClipSpec:
    """How training/eval clips are cut from a flow-image sequence:
    ``input_len`` inputs spaced ``interval`` frames apart, target
    ``interval`` frames after the last input."""

    interval: int = 5
    input_len: int = 5

    def __post_init__(self):
        if self.interval < 1:
            raise ConfigError(f"interval must be >= 1, got {self.interval}")
        if self.input_len < 1:
            raise ConfigError(f"input_len must be >= 1, got {self.input_len}")

    @property
    def span(self) -> int:
        """Frames consumed: last input sits span-interval after the start."""
        return self.input_len * self.interval

    def sample(self, seq_len: int, rng: np.random.Generator) -> tuple[list[int], int]:
        latest = seq_len - 1 - self.span
        if latest < 0:
            raise DataError(f"sequence of {seq_len} frames too short for {self}")
        start = int(rng.integers(0, latest + 1))
        inputs = [start + k * self.interval for k in range(self.input_len)]
        return inputs, start + self.span

    def last_clip(self, seq_len: int) -> tuple[list[int], int]:
        """Deterministic eval clip ending at the sequence tail (target
        clamps to the final frame)."""
        start = seq_len - self.span
        if start < 0:
            raise DataError(f"sequence of {seq_len} frames too short for {self}")
        inputs = [start + k * self.interval for k in range(self.input_len)]
        return inputs, min(start + self.span, seq_len - 1)


class ConvLstmLayerParams(Module):
    """Weights of one bias-free peephole ConvLSTM layer.

    Eight gate convolutions (input and hidden paths for i, f, g, o) plus
    three elementwise peephole maps shaped like the cell state. None of
    the convolutions carries a bias.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: tuple[int, int],
                 spatial: tuple[int, int], rng: np.random.Generator):
        h, w = spatial
        self.spec_x = ConvSpec(in_channels, out_channels, kernel,
                               padding=((kernel[0] - 1) // 2, (kernel[1] - 1) // 2))
        self.spec_h = ConvSpec(out_channels, out_channels, kernel,
                               padding=self.spec_x.padding)
        fan_x = in_channels * kernel[0] * kernel[1]
        fan_h = out_channels * kernel[0] * kernel[1]

        def kx():
            return uniform_fan_in(rng, (out_channels, in_channels, *kernel), fan_x)

        def kh():
            return uniform_fan_in(rng, (out_channels, out_channels, *kernel), fan_h)

        self.w_xi, self.w_hi = kx(), kh()
        self.w_xf, self.w_hf = kx(), kh()
        self.w_xc, self.w_hc = kx(), kh()
        self.w_xo, self.w_ho = kx(), kh()
        zeros = lambda: Tensor(np.zeros((out_channels, h, w)), requires_grad=True)
        self.w_ci, self.w_cf, self.w_co = zeros(), zeros(), zeros()
        self.out_channels = out_channels
        self.spatial = (h, w)


def cell_step(x: Tensor, h_prev: Tensor, c_prev: Tensor,
              params: ConvLstmLayerParams) -> tuple[Tensor, Tensor]:
    """One recurrence step.

    i = sig(Wxi*x + Whi*h + Wci.c_prev); f likewise with Wcf; g =
    tanh(Wxc*x + Whc*h); c = f.c_prev + i.g; o = sig(Wxo*x + Who*h +
    Wco.c) reads the freshly updated cell state; h = o.tanh(c).
    """
    expect = (params.out_channels, *params.spatial)
    if h_prev.shape != expect or c_prev.shape != expect:
        raise DimensionError(
            f"state shape {h_prev.shape}/{c_prev.shape} does not match layer {expect}")
    cx = lambda w: conv2d(x, params.spec_x, w)
    ch = lambda w: conv2d(h_prev, params.spec_h, w)
    i = sigmoid(cx(params.w_xi) + ch(params.w_hi) + hadamard(params.w_ci, c_prev))
    f = sigmoid(cx(params.w_xf) + ch(params.w_hf) + hadamard(params.w_cf, c_prev))
    g = tanh(cx(params.w_xc) + ch(params.w_hc))
    c = hadamard(f, c_prev) + hadamard(i, g)
    o = sigmoid(cx(params.w_xo) + ch(params.w_ho) + hadamard(params.w_co, c))
    h = hadamard(o, tanh(c))
    return h, c


class ConvLstmEncoder(Module):
    """Stack of ConvLSTM layers; layer j consumes layer j-1's output at
    the same time step. States start at zero."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.layers = []
        in_ch = config.input_channels
        for out_ch in config.channels:
            self.layers.append(ConvLstmLayerParams(
                in_ch, out_ch, config.kernel, config.spatial, rng))
            in_ch = out_ch

    def initial_states(self) -> list[tuple[Tensor, Tensor]]:
        return [(Tensor(np.zeros((lay.out_channels, *lay.spatial))),
                 Tensor(np.zeros((lay.out_channels, *lay.spatial))))
                for lay in self.layers]

    def run(self, frames: list[Tensor]) -> list[list[tuple[Tensor, Tensor]]]:
        """Recurrence over any number of frames; returns per-step states
        (outer index = time, inner = layer)."""
        states = self.initial_states()
        history = []
        for x in frames:
            new_states = []
            inp = x
            for layer, (h_prev, c_prev) in zip(self.layers, states):
                h, c = cell_step(inp, h_prev, c_prev, layer)
                new_states.append((h, c))
                inp = h
            states = new_states
            history.append(states)
        return history

    def encode(self, clip) -> tuple[Tensor, list[tuple[Tensor, Tensor]]]:
        """Exactly ``input_len`` frames -> (final top-layer hidden state, final states)."""
        frames = [f if isinstance(f, Tensor) else Tensor(f) for f in clip]
        if len(frames) != self.config.input_len:
            raise DimensionError(
                f"encoder expects {self.config.input_len} frames, got {len(frames)}")
        expect = (self.config.input_channels, *self.config.spatial)
        for f in frames:
            if f.shape != expect:
                raise DimensionError(f"frame shape {f.shape}, expected {expect}")
        history = self.run(frames)
        final = history[-1]
        return final[-1][0], final


class PointwiseDecoder(Module):
    """1x1 convolution from the encoder's top channels to a flow image."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.weight = uniform_fan_in(rng, (out_channels, in_channels, 1, 1), in_channels)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self.spec = ConvSpec(in_channels, out_channels, (1, 1))

    def __call__(self, feature: Tensor) -> Tensor:
        return conv2d(feature, self.spec, self.weight, self.bias)


class ForecastModel(Module):
    """Encoder + decoder pair predicting one future flow frame."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator,
                 frame_channels: int | None = None):
        out_ch = frame_channels if frame_channels is not None else config.input_channels
        self.encoder = ConvLstmEncoder(config, rng)
        self.decoder = PointwiseDecoder(config.channels[-1], out_ch, rng)
        self.config = config

    def predict(self, clip) -> Tensor:
        feature, _ = self.encoder.encode(clip)
        return self.decoder(feature)

    def outside_feature(self, clip) -> np.ndarray:
        feature, _ = self.encoder.encode(clip)
        return feature.data


def decode(model: ForecastModel, feature: Tensor) -> Tensor:
    return model.decoder(feature if isinstance(feature, Tensor) else Tensor(feature))


def _clip_from(seq: np.ndarray, indices: list[int]) -> list[Tensor]:
    return [Tensor(seq[i]) for i in indices]


def evaluate_mse(model: ForecastModel, sequences: list[np.ndarray],
                 clip_spec: ClipSpec) -> float:
    """Mean prediction MSE over each sequence's deterministic tail clip."""
    losses = []
    for seq in sequences:
        try:
            inputs, target = clip_spec.last_clip(len(seq))
        except DataError:
            continue
        pred = model.predict(_clip_from(seq, inputs))
        losses.append(float(np.mean((pred.data - seq[target]) ** 2)))
    if not losses:
        raise DataError("no sequence long enough to evaluate")
    return float(np.mean(losses))


def train_forecaster(sequences: list[np.ndarray], clip_spec: ClipSpec,
                     sgd: SgdConfig, epochs: int, seed: int,
                     config: EncoderConfig | None = None,
                     batch_size: int = 4,
                     model: ForecastModel | None = None
                     ) -> tuple[ForecastModel, list[float]]:
    """Train on randomly cut clips; returns the model and per-epoch mean MSE.

    ``sequences`` are flow-image arrays [T, C, h, w] in [0,1]. Sequences
    too short for the clip layout are skipped with a warning; if none
    remain that is an error. Identical seed and config reproduce the run
    bit for bit.
    """
    rng = np.random.default_rng(seed)
    if model is None:
        if config is None:
            raise ConfigError("train_forecaster needs a config or a prebuilt model")
        model = ForecastModel(config, rng)
    usable = []
    for idx, seq in enumerate(sequences):
        if len(seq) >= clip_spec.span + 1:
            usable.append(np.asarray(seq, dtype=np.float64))
        else:
            log.warning("sequence %d has %d frames, needs %d; skipped",
                        idx, len(seq), clip_spec.span + 1)
    if not usable:
        raise DataError("all sequences too short for the clip layout")

    optimizer = Sgd(model.named_parameters(), sgd)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(usable))
        losses = []
        pending = 0
        optimizer.zero_grad()
        for seq_idx in order:
            seq = usable[int(seq_idx)]
            inputs, target = clip_spec.sample(len(seq), rng)
            pred = model.predict(_clip_from(seq, inputs))
            loss = (pred - Tensor(seq[target])).square().mean()
            loss.backward()
            losses.append(loss.item())
            pending += 1
            if pending == batch_size:
                _scale_grads(model, 1.0 / pending)
                optimizer.step(epoch)
                optimizer.zero_grad()
                pending = 0
        if pending:
            _scale_grads(model, 1.0 / pending)
            optimizer.step(epoch)
            optimizer.zero_grad()
        curve.append(float(np.mean(losses)))
    return model, curve


def _scale_grads(model: Module, factor: float) -> None:
    for _, p in model.named_parameters():
        if p.grad is not None:
            p.grad *= factor


def predict_future(model: ForecastModel, clip, target: np.ndarray
                   ) -> tuple[np.ndarray, dict[str, float]]:
    """Predicted frame plus MSE/SSIM/PSNR against the target.

    The prediction is clipped to [0,1] for scoring so the image metrics
    stay within their dynamic range.
    """
    pred = model.predict(clip).data
    scored = np.clip(pred, 0.0, 1.0)
    scores = image_quality(scored, np.asarray(target, dtype=np.float64),
                           max_value=1.0, channel_axis=0)
    return pred, scores


def interval_sweep(train_sequences: list[np.ndarray], eval_sequences: list[np.ndarray],
                   intervals, sgd: SgdConfig, epochs: int, seed: int,
                   config: EncoderConfig, batch_size: int = 4
                   ) -> list[tuple[int, float]]:
    """Train one model per interval and report its held-out tail-clip MSE."""
    results = []
    for interval in intervals:
        spec = ClipSpec(interval=int(interval))
        model, _ = train_forecaster(train_sequences, spec, sgd, epochs, seed,
                                    config=config, batch_size=batch_size)
        results.append((int(interval), evaluate_mse(model, eval_sequences, spec)))
    return results
