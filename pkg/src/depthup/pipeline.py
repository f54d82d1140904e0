"""Run configuration, leave-one-sequence-out training, evaluation tables,
streaming inference (sequential or two-stage pipelined) and benchmarking."""
from __future__ import annotations

import dataclasses
import json
import os
import platform
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import calib, flow, metrics, model, synth
from .errors import ConfigError, TrainingError
from .kernels import BACKEND
from .model import NetworkConfig, Sample


# --------------------------------------------------------------------------
# configuration

def _from_dict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class TrainingConfig:
    lr: float = 1e-3
    # optional linear decay to lr * lr_final_fraction; the default keeps lr constant
    lr_final_fraction: float = 1.0
    batch_size: int = 4
    epochs: int = 4
    seed: int = 0
    # cap on samples drawn per epoch (None: every training sample once)
    samples_per_epoch: int | None = None
    # held-out frames scored per epoch use every eval_stride-th sample
    eval_stride: int = 1
    # "final" keeps the last weights; "heldout" keeps the epoch with the lowest held-out RMSE
    selection: str = "heldout"

    def validate(self):
        if not self.lr > 0:
            raise ConfigError(f"training.lr must be positive, got {self.lr}")
        if not 0 < self.lr_final_fraction <= 1:
            raise ConfigError("training.lr_final_fraction must be in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError(f"training.batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"training.epochs must be >= 0, got {self.epochs}")
        if self.samples_per_epoch is not None and self.samples_per_epoch < 1:
            raise ConfigError("training.samples_per_epoch must be >= 1")
        if self.eval_stride < 1:
            raise ConfigError("training.eval_stride must be >= 1")
        if self.selection not in ("final", "heldout"):
            raise ConfigError(f"training.selection must be 'final' or 'heldout', got {self.selection!r}")
        return self


@dataclass
class DataConfig:
    dataset_dir: str = "data"
    held_out: str | None = None
    delta_frames: int = 1
    weights_out: str = "weights.bin"

    def validate(self):
        if self.delta_frames < 1:
            raise ConfigError(f"data.delta_frames must be >= 1, got {self.delta_frames}")
        return self


@dataclass
class RuntimeConfig:
    inference_resolution: str = "full"
    pipelined: bool = False
    threads: int = 2
    # optional center crop applied before the network (1 = none)
    crop_factor: int = 1

    def validate(self):
        if self.inference_resolution not in ("full", "half"):
            raise ConfigError(f"runtime.inference_resolution must be 'full' or 'half', "
                              f"got {self.inference_resolution!r}")
        if self.threads < 1:
            raise ConfigError("runtime.threads must be >= 1")
        if self.crop_factor < 1:
            raise ConfigError("runtime.crop_factor must be >= 1")
        return self


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    def validate(self) -> "RunConfig":
        self.network.validate()
        self.training.validate()
        self.data.validate()
        self.runtime.validate()
        return self

    def to_dict(self) -> dict:
        return {"network": self.network.to_dict(), "training": dataclasses.asdict(self.training),
                "data": dataclasses.asdict(self.data), "runtime": dataclasses.asdict(self.runtime)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = sorted(set(d) - {"network", "training", "data", "runtime"})
        if unknown:
            raise ConfigError(f"unknown top-level keys {unknown}")
        try:
            net = NetworkConfig.from_dict(d.get("network", {}))
        except TypeError as exc:
            raise ConfigError(f"network: {exc}") from exc
        return cls(net,
                   _from_dict(TrainingConfig, d.get("training", {}), "training"),
                   _from_dict(DataConfig, d.get("data", {}), "data"),
                   _from_dict(RuntimeConfig, d.get("runtime", {}), "runtime")).validate()


def read_json(path) -> dict:
    """Parse a JSON file; syntax errors become ConfigErrors naming line and column."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno - 1 < len(text.splitlines()) else ""
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}") from exc


def load_run_config(path) -> RunConfig:
    cfg = RunConfig.from_dict(read_json(path))
    # relative data paths resolve against the config file's directory
    base = Path(path).resolve().parent
    for name in ("dataset_dir", "weights_out"):
        p = Path(getattr(cfg.data, name))
        if not p.is_absolute():
            setattr(cfg.data, name, str(base / p))
    return cfg


@dataclass
class GenSpec:
    """Parameters of a generated dataset (the ``gen --spec`` file)."""
    n_sequences: int = 6
    duration_s: float = 10.0
    width: int = 192
    height: int = 108
    rgb_fps: int = 240
    depth_fps: int = 30
    n_shapes: tuple = (2, 4)
    speed: tuple = (60.0, 200.0)
    static: bool = False
    edge_band_px: int = 2
    dropout_rate: float | None = None
    target_fraction: float = synth.TARGET_INVALID_FRACTION

    def validate(self) -> "GenSpec":
        if self.n_sequences < 1:
            raise ConfigError("n_sequences must be >= 1")
        if not self.duration_s > 0:
            raise ConfigError(f"duration must be > 0, got {self.duration_s}")
        return self

    @classmethod
    def from_dict(cls, d) -> "GenSpec":
        spec = _from_dict(cls, d, "gen spec")
        spec.n_shapes, spec.speed = tuple(spec.n_shapes), tuple(spec.speed)
        return spec.validate()

    def scene(self, seed: int) -> synth.SceneSpec:
        inv = synth.InvalidModel(self.edge_band_px, self.dropout_rate, self.target_fraction)
        s = synth.random_scene(seed, self.width, self.height, self.n_shapes, self.speed,
                               self.duration_s, self.static, inv)
        s.rgb_fps, s.depth_fps = self.rgb_fps, self.depth_fps
        return s.validate()


def generate_dataset(spec: GenSpec, seed: int = 0) -> list[synth.Sequence]:
    spec.validate()
    return [synth.generate_sequence(spec.scene(seed * 1000 + i), seed * 1000 + i, spec.duration_s,
                                    f"seq{i}") for i in range(spec.n_sequences)]


# --------------------------------------------------------------------------
# training

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    heldout_rmse: float | None
    seconds: float


@dataclass
class TrainResult:
    net: model.Network
    history: list[EpochLog]
    best_epoch: int | None


def _lr_at(cfg: TrainingConfig, step: int, total: int) -> float:
    if total <= 1:
        return cfg.lr
    frac = step / (total - 1)
    return cfg.lr * (1 - frac * (1 - cfg.lr_final_fraction))


def network_rmse(net: model.Network, samples, stride: int = 1) -> float:
    """Mean per-frame masked RMSE of clamped predictions over gt-valid pixels."""
    errs = []
    for i in range(0, len(samples), stride):
        s = samples[i]
        pred = np.clip(net.forward(s), 0.0, 1.0)[..., 0]
        errs.append(metrics.masked_rmse(pred, s.gt[..., 0], s.gt_mask))
    return float(np.mean(errs))


def train(net_cfg: NetworkConfig, cfg: TrainingConfig, train_samples, heldout=None,
          log: Callable[[EpochLog], None] | None = None, net: model.Network | None = None) -> TrainResult:
    """Adam on the batch masked RMSE; deterministic in ``cfg.seed``.

    ``train_samples`` is an indexable collection of samples; ``heldout``
    (optional) is scored after each epoch.
    """
    cfg.validate()
    net = net if net is not None else model.build(net_cfg, seed=cfg.seed)
    n = len(train_samples)
    if n == 0 and cfg.epochs > 0:
        raise TrainingError("no training samples")
    rng = np.random.default_rng([cfg.seed, 0x7EA1])
    per_epoch = n if cfg.samples_per_epoch is None else min(cfg.samples_per_epoch, n)
    steps_per_epoch = -(-per_epoch // cfg.batch_size) if per_epoch else 0
    total = steps_per_epoch * cfg.epochs
    history, best, best_state, step = [], None, None, 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)[:per_epoch]
        losses = []
        for b in range(0, per_epoch, cfg.batch_size):
            batch = [train_samples[int(j)] for j in order[b:b + cfg.batch_size]]
            losses.append(model.train_step(net, batch, _lr_at(cfg, step, total)))
            step += 1
        held = network_rmse(net, heldout, cfg.eval_stride) if heldout is not None and len(heldout) else None
        entry = EpochLog(epoch + 1, float(np.mean(losses)), held, time.perf_counter() - t0)
        history.append(entry)
        if log:
            log(entry)
        if cfg.selection == "heldout" and held is not None and (best is None or held < history[best].heldout_rmse):
            best = len(history) - 1
            best_state = [p.value.copy() for p in net.params]
    if best_state is not None and best != len(history) - 1:
        for p, v in zip(net.params, best_state):
            p.value[...] = v
    return TrainResult(net, history, None if best is None else best + 1)


def loso_samples(sequences, held_out: str, delta_frames: int = 1):
    """(training samples, held-out samples) for one leave-one-sequence-out fold."""
    tr, te = synth.loso_split(sequences, held_out)
    train_samples = _Concat([synth.make_samples(s, delta_frames=delta_frames) for s in tr])
    return train_samples, synth.make_samples(te[0], delta_frames=delta_frames)


class _Concat:
    """Indexable view over several sample sets."""

    def __init__(self, parts):
        self.parts = list(parts)
        self.offsets = np.cumsum([0] + [len(p) for p in self.parts])

    def __len__(self):
        return int(self.offsets[-1])

    def __getitem__(self, i):
        if not 0 <= i < len(self):
            raise IndexError(i)
        k = int(np.searchsorted(self.offsets, i, side="right")) - 1
        return self.parts[k][i - int(self.offsets[k])]


# --------------------------------------------------------------------------
# evaluation

def network_method(net: model.Network, half: bool = False):
    """Evaluation callable: clamped prediction, scored on every gt-valid pixel."""
    small = net.resized(net.config.input_h // 2, net.config.input_w // 2) if half else None

    def fn(s: Sample):
        if small is None:
            return np.clip(net.forward(s), 0.0, 1.0)[..., 0], None
        pred = _half_predict(small, s.c_t, s.d_t, s.c_next, (net.config.input_h, net.config.input_w))
        return pred, s.input_mask
    return fn


def evaluate_all(net: model.Network, sequences: dict, deltas=(1,), flow_config=None,
                 stride: int = 1) -> metrics.EvalReport:
    """naive / flow / network at delta 1 plus naive and network rows for each further delta.

    ``sequences`` maps names to ``synth.Sequence`` objects.
    """
    report = metrics.EvalReport()
    net_fn = network_method(net)
    for d in sorted(set(deltas) | {1}):
        subsets = {}
        for name, seq in sequences.items():
            ss = synth.make_samples(seq, delta_frames=d)
            subsets[name] = [ss[i] for i in range(0, len(ss), stride)]
        methods = {"naive": flow.naive_predict}
        if d == 1:
            methods["flow"] = lambda s: flow.flow_predict(s, flow_config)
        methods["network"] = net_fn
        if d in deltas or d == 1:
            metrics.evaluate(subsets, methods, delta=d, report=report)
    report.notes.append("naive and flow are scored where both gt and their prediction are valid; "
                        "the network on every gt-valid pixel after clamping to [0, 1]")
    if any(d != 1 for d in deltas):
        report.notes.append("one delta-1-trained model is evaluated at every delta")
    return report


# --------------------------------------------------------------------------
# streaming inference

def _half_predict(small, c_t, d_t, c_next, full_hw):
    h2, w2 = small.config.input_h, small.config.input_w
    s = Sample(calib.resize_nearest(c_t, (h2, w2)), calib.resize_nearest(d_t, (h2, w2)),
               calib.resize_nearest(c_next, (h2, w2)), np.zeros((h2, w2, 1), np.float32),
               np.zeros((h2, w2), bool))
    pred = np.clip(small.forward(s), 0.0, 1.0)[..., 0]
    up = calib.resize_nearest(pred, full_hw)
    # the input's invalid pixels stay invalid
    return np.where(d_t[..., 0] != 0, up, 0.0).astype(pred.dtype)


@dataclass
class _Prepared:
    index: int
    c_t: np.ndarray
    d_t: np.ndarray
    c_next: np.ndarray
    seconds: float
    # full-resolution input validity, reapplied after upscaling in half mode
    full_mask: np.ndarray | None = None


class StreamRunner:
    """Predicts one depth frame per color frame that follows the first depth frame.

    Color frame k is paired with the latest depth frame at or before it and
    with that depth frame's synchronized color frame.
    """

    def __init__(self, net: model.Network, seq: synth.Sequence, runtime: RuntimeConfig | None = None):
        self.runtime = (runtime or RuntimeConfig()).validate()
        self.seq = seq
        self.sync = synth.synchronize(seq.rgb_ts, seq.depth_ts)
        f = self.runtime.crop_factor
        self.full_hw = (seq.height // f, seq.width // f)
        self.half = self.runtime.inference_resolution == "half"
        self.model_hw = (self.full_hw[0] // 2, self.full_hw[1] // 2) if self.half else self.full_hw
        if (net.config.input_h, net.config.input_w) != self.model_hw:
            net = net.resized(*self.model_hw)
        self.net = net
        first = int(np.searchsorted(seq.rgb_ts, seq.depth_ts[0], side="left"))
        self.frames = list(range(first, len(seq.rgb_ts)))
        self.depth_for = np.searchsorted(seq.depth_ts, seq.rgb_ts, side="right") - 1
        self.scale = np.float32(1.0 / seq.max_depth_mm)

    def _crop(self, img):
        f = self.runtime.crop_factor
        return img if f == 1 else calib.center_crop(img, f)

    def prepare(self, k: int) -> _Prepared:
        """Stage A: crop, normalize and (half mode) downscale the inputs of frame k."""
        t0 = time.perf_counter()
        s = self.seq
        j = int(self.depth_for[k])
        c_t = self._crop(s.rgb[self.sync.rgb_for(j)]).astype(np.float32) / 255
        c_next = self._crop(s.rgb[k]).astype(np.float32) / 255
        d_t = (self._crop(s.depth[j]).astype(np.float32) * self.scale)[..., None]
        if self.half:
            c_t, c_next = calib.resize_nearest(c_t, self.model_hw), calib.resize_nearest(c_next, self.model_hw)
            return _Prepared(k, c_t, calib.resize_nearest(d_t, self.model_hw), c_next,
                             time.perf_counter() - t0, d_t[..., 0] != 0)
        return _Prepared(k, c_t, d_t, c_next, time.perf_counter() - t0)

    def infer(self, p: _Prepared, profile=None) -> tuple[np.ndarray, float, float]:
        """Stage B: network forward and output conversion. Returns (frame mm, model s, post s)."""
        t0 = time.perf_counter()
        out = self.net.forward_batch(p.c_t[None], p.d_t[None], p.c_next[None], profile=profile)[0, ..., 0]
        t1 = time.perf_counter()
        pred = np.clip(out, 0.0, 1.0)
        if self.half:
            pred = calib.resize_nearest(pred, self.full_hw)
            pred = np.where(p.full_mask, pred, 0.0)
        mm = np.round(pred.astype(np.float64) * self.seq.max_depth_mm).astype(np.uint16)
        return mm, t1 - t0, time.perf_counter() - t1

    def run(self, pipelined: bool | None = None, limit: int | None = None, sink=None):
        """Outputs in color-frame order. ``sink(index, frame)`` receives each frame."""
        pipelined = self.runtime.pipelined if pipelined is None else pipelined
        frames = self.frames if limit is None else self.frames[:limit]
        outputs = []

        def emit(p, result):
            outputs.append(result[0])
            if sink is not None:
                sink(p.index, result[0])

        if not pipelined:
            for k in frames:
                p = self.prepare(k)
                emit(p, self.infer(p))
            return outputs
        hand_off: queue.Queue = queue.Queue(maxsize=1)
        failure = []

        def producer():
            try:
                for k in frames:
                    hand_off.put(self.prepare(k))
            except BaseException as exc:  # surfaced by the consumer
                failure.append(exc)
            finally:
                hand_off.put(None)

        worker = threading.Thread(target=producer, name="depthup-prepare", daemon=True)
        worker.start()
        while True:
            p = hand_off.get()
            if p is None:
                break
            emit(p, self.infer(p))
        worker.join()
        if failure:
            raise failure[0]
        return outputs


def stream_infer(net: model.Network, seq: synth.Sequence, runtime: RuntimeConfig | None = None,
                 limit: int | None = None, sink=None) -> list[np.ndarray]:
    """Predicted depth (uint16 mm) for every color frame from the first depth frame on."""
    return StreamRunner(net, seq, runtime).run(limit=limit, sink=sink)


def frames_checksum(frames) -> str:
    import hashlib
    h = hashlib.sha256()
    for f in frames:
        h.update(np.ascontiguousarray(f).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# benchmarking

@dataclass
class ModeTiming:
    model_ms_mean: float
    model_ms_std: float
    total_ms_mean: float
    total_ms_std: float


@dataclass
class BenchReport:
    frames: int
    modes: dict                  # "full" / "half" -> ModeTiming
    layer_shares: dict           # layer kind -> fraction of full-mode model time
    dense_model_ms: float
    separable_model_ms: float
    sequential_fps: float
    pipelined_fps: float
    pipelined_identical: bool
    hardware: str
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["modes"] = {k: dataclasses.asdict(v) for k, v in self.modes.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = [f"# {self.hardware}",
                 "# total = preprocess + model forward + output conversion, per frame",
                 f"frames timed: {self.frames}",
                 f"{'mode':<8}{'model ms':>16}{'total ms':>16}"]
        for k, m in self.modes.items():
            lines.append(f"{k:<8}{m.model_ms_mean:>9.2f} ± {m.model_ms_std:<5.2f}"
                         f"{m.total_ms_mean:>9.2f} ± {m.total_ms_std:<5.2f}")
        lines.append(f"dense model ms {self.dense_model_ms:.2f}, separable model ms {self.separable_model_ms:.2f}")
        lines.append("layer shares of model time: " +
                     ", ".join(f"{k} {v:.1%}" for k, v in sorted(self.layer_shares.items(), key=lambda kv: -kv[1])))
        lines.append(f"throughput: sequential {self.sequential_fps:.1f} fps, pipelined {self.pipelined_fps:.1f} fps "
                     f"(outputs identical: {self.pipelined_identical})")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines) + "\n"


def hardware_note() -> str:
    return (f"{platform.machine()} {platform.processor() or ''} cpus={os.cpu_count()} "
            f"backend={BACKEND} numpy={np.__version__}").replace("  ", " ")


def _time_mode(runner: StreamRunner, frames, warmup, profile=None):
    for k in frames[:warmup]:
        runner.infer(runner.prepare(k))
    model_ms, total_ms = [], []
    for k in frames[warmup:]:
        p = runner.prepare(k)
        _, m, post = runner.infer(p, profile=profile)
        model_ms.append(m * 1e3)
        total_ms.append((p.seconds + m + post) * 1e3)
    timing = ModeTiming(float(np.mean(model_ms)), float(np.std(model_ms)),
                        float(np.mean(total_ms)), float(np.std(total_ms)))
    return timing, float(np.sum(model_ms)) / 1e3


def bench(net: model.Network, seq: synth.Sequence, frames: int = 100, warmup: int = 10,
          crop_factor: int = 1) -> BenchReport:
    """Per-frame model and total times for full and half resolution, dense vs
    separable model time, per-layer shares and pipelined throughput."""
    if frames < 1 or warmup < 0:
        raise ConfigError("frames must be >= 1 and warmup >= 0")
    full = StreamRunner(net, seq, RuntimeConfig("full", crop_factor=crop_factor))
    ks = full.frames[:warmup + frames]
    if len(ks) < warmup + frames:
        raise ConfigError(f"sequence has {len(full.frames)} streamable frames; need {warmup + frames}")
    profile: dict = {}
    full_timing, model_seconds = _time_mode(full, ks, warmup, profile)
    modes = {"full": full_timing}
    half = StreamRunner(net, seq, RuntimeConfig("half", crop_factor=crop_factor))
    modes["half"] = _time_mode(half, ks, warmup)[0]
    # shares of the measured model time; the remainder is wiring overhead
    shares = {k: v / model_seconds for k, v in profile.items()} if model_seconds > 0 else {}

    # the other convolution flavor, same topology; timing does not depend on the weights
    other_cfg = dataclasses.replace(net.config, separable=not net.config.separable)
    other = StreamRunner(model.build(other_cfg, seed=0, dtype=net.dtype), seq,
                         RuntimeConfig("full", crop_factor=crop_factor))
    other_ms = _time_mode(other, ks, warmup)[0].model_ms_mean
    dense_ms, sep_ms = ((modes["full"].model_ms_mean, other_ms) if not net.config.separable
                        else (other_ms, modes["full"].model_ms_mean))

    n = len(ks) - warmup
    t0 = time.perf_counter()
    seq_out = full.run(pipelined=False, limit=n)
    seq_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    pipe_out = full.run(pipelined=True, limit=n)
    pipe_s = time.perf_counter() - t0
    identical = frames_checksum(seq_out) == frames_checksum(pipe_out)
    notes = []
    if (os.cpu_count() or 1) < 2:
        notes.append("single CPU: the two pipeline stages cannot overlap, so no throughput gain is expected")
    return BenchReport(n, modes, shares, dense_ms, sep_ms, n / seq_s, n / pipe_s, identical,
                       hardware_note(), notes)


# --------------------------------------------------------------------------
# ablations

@dataclass
class AblationRow:
    name: str
    cascades: int
    params: int
    rmse: float


def ablation_variants(base: NetworkConfig, cascades=(2, 3, 4), skips=model.SKIP_IDS):
    out = [(f"cascades={c}", dataclasses.replace(base, cascades=c)) for c in cascades]
    out += [(f"no {s}", model.ablate(base, s)) for s in skips]
    return out


def run_ablation(variants, train_cfg: TrainingConfig, train_samples, heldout,
                 log: Callable[[str], None] | None = None) -> list[AblationRow]:
    rows = []
    for name, cfg in variants:
        res = train(cfg, train_cfg, train_samples, None)
        rmse = network_rmse(res.net, heldout, train_cfg.eval_stride)
        rows.append(AblationRow(name, cfg.cascades, model.param_count(res.net), rmse))
        if log:
            log(f"{name}: params {rows[-1].params}, held-out RMSE {rmse:.4f}")
    return rows


def ablation_table(rows: list[AblationRow]) -> str:
    lines = [f"{'variant':<28}{'params':>10}{'rmse':>10}", "-" * 48]
    lines += [f"{r.name:<28}{r.params:>10}{r.rmse:>10.4f}" for r in rows]
    return "\n".join(lines) + "\n"
