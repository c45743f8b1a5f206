"""Command-line front end: train, eval, convert, query, dump.

Exit codes are stable API: 0 success, 1 query found unsupported
functions, 2 configuration or parse error, 3 data error, 4 training
diverged, 5 model not normalizable.

Configuration is a flat key=value file; command-line flags override it,
and NANONNL_SEED is the seed fallback when neither gives one. Identical
config and seed reproduce byte-identical monitor logs and model files.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import functions as F
from .communicator import DataParallelTrainer
from .data import DataError, DataSourceConfig, make_data
from .errors import NnlError, Unnormalizable
from .graph import ExecutionContext, Mode, TypeConfig, Variable, context_scope
from .networks import lenet, mlp
from .nnp import (
    DatasetRef,
    MonitorDef,
    OptimizerDef,
    TrainingConfig,
    build_executor,
    load_nnp,
    model_from_graph,
    normalize,
    query_unsupported,
    read_supported_set,
    save_nnp,
    validate,
)
from .parameters import registry_scope
from .solver import DynamicLossScaler
from .tensor import RngState

__all__ = ["main", "entry"]

EXIT_OK = 0
EXIT_QUERY_FOUND = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_UNNORMALIZABLE = 5

MONITOR_HEADER = "epoch,iteration,train_loss,train_error,val_error,loss_scale"
_SHUFFLE_STREAM = 0x73687566


class ConfigError(NnlError):
    pass


@dataclass
class LossScaling:
    mode: str = "none"  # none | static | dynamic
    value: float = 8.0
    factor: float = 2.0
    interval: int = 2000

    @classmethod
    def parse(cls, text: str) -> "LossScaling":
        if text == "none":
            return cls()
        if text.startswith("static:"):
            return cls(mode="static", value=float(text.split(":", 1)[1]))
        if text.startswith("dynamic:"):
            parts = text.split(":", 1)[1].split(",")
            if len(parts) != 3:
                raise ConfigError(f"loss_scale dynamic needs init,factor,interval: {text!r}")
            return cls(mode="dynamic", value=float(parts[0]), factor=float(parts[1]),
                       interval=int(parts[2]))
        raise ConfigError(f"bad loss_scale {text!r} (none | static:V | dynamic:I,F,N)")


@dataclass
class TrainSettings:
    network: str = "mlp"
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.1
    precision: str = "f32"  # f32 | mixed
    loss_scale: LossScaling = field(default_factory=LossScaling)
    workers: int = 1
    seed: int = 0
    hidden: tuple[int, ...] = (32,)
    data: DataSourceConfig = field(default_factory=DataSourceConfig)
    out_model: str = "model.nnp"
    out_monitor: str = "monitor.csv"


_CONFIG_KEYS = {
    "network", "epochs", "batch_size", "lr", "precision", "loss_scale", "workers",
    "seed", "hidden", "data", "classes", "dim", "samples", "val_samples", "csv",
    "shape", "out_model", "out_monitor",
}


def parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for no, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{no}: expected key=value, got {line!r}")
                key, _, value = line.partition("=")
                key = key.strip()
                if key not in _CONFIG_KEYS:
                    raise ConfigError(f"{path}:{no}: unknown key {key!r}")
                values[key] = value.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return values


def build_settings(args) -> TrainSettings:
    s = TrainSettings()
    values = parse_config_file(args.config) if args.config else {}
    try:
        if "network" in values:
            s.network = values["network"]
        if "epochs" in values:
            s.epochs = int(values["epochs"])
        if "batch_size" in values:
            s.batch_size = int(values["batch_size"])
        if "lr" in values:
            s.lr = float(values["lr"])
        if "precision" in values:
            s.precision = values["precision"]
        if "loss_scale" in values:
            s.loss_scale = LossScaling.parse(values["loss_scale"])
        if "workers" in values:
            s.workers = int(values["workers"])
        if "hidden" in values:
            s.hidden = tuple(int(v) for v in values["hidden"].split(",") if v)
        if "data" in values:
            s.data.kind = values["data"]
        if "classes" in values:
            s.data.classes = int(values["classes"])
        if "dim" in values:
            s.data.dim = int(values["dim"])
        if "samples" in values:
            s.data.samples = int(values["samples"])
        if "val_samples" in values:
            s.data.val_samples = int(values["val_samples"])
        if "csv" in values:
            s.data.csv_path = values["csv"]
        if "shape" in values:
            s.data.shape = tuple(int(d) for d in values["shape"].split("x"))
        if "out_model" in values:
            s.out_model = values["out_model"]
        if "out_monitor" in values:
            s.out_monitor = values["out_monitor"]

        if getattr(args, "workers", None) is not None:
            s.workers = args.workers
        if getattr(args, "precision", None) is not None:
            s.precision = args.precision
        if getattr(args, "loss_scale", None) is not None:
            s.loss_scale = LossScaling.parse(args.loss_scale)
        if getattr(args, "out", None) is not None:
            s.out_model = args.out
        if getattr(args, "monitor", None) is not None:
            s.out_monitor = args.monitor

        if getattr(args, "seed", None) is not None:
            s.seed = args.seed
        elif "seed" in values:
            s.seed = int(values["seed"])
        elif os.environ.get("NANONNL_SEED"):
            s.seed = int(os.environ["NANONNL_SEED"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    if s.network not in ("mlp", "lenet"):
        raise ConfigError(f"network must be mlp or lenet, got {s.network!r}")
    if s.precision not in ("f32", "mixed"):
        raise ConfigError(f"precision must be f32 or mixed, got {s.precision!r}")
    if s.epochs < 1 or s.batch_size < 1 or s.workers < 1:
        raise ConfigError("epochs, batch_size and workers must all be >= 1")
    if s.lr <= 0:
        raise ConfigError("lr must be positive")
    if s.batch_size % s.workers != 0:
        raise ConfigError(f"batch_size {s.batch_size} must divide evenly over "
                          f"{s.workers} workers")
    if s.network == "lenet":
        if "data" not in values:
            s.data.kind = "synthetic-images"
        if s.data.kind == "synthetic-gaussians":
            raise ConfigError("lenet needs image-shaped data (synthetic-images or csv)")
        if s.data.kind == "synthetic-images" and "classes" not in values:
            s.data.classes = 3
        if len(s.data.sample_shape) != 3:
            raise ConfigError(f"lenet needs rank-3 samples, got shape {s.data.sample_shape}")
    return s


def _context_for(settings: TrainSettings) -> ExecutionContext:
    half = settings.precision == "mixed"
    return ExecutionContext(type_config=TypeConfig.HALF if half else TypeConfig.FLOAT)


def _make_build_fn(settings: TrainSettings):
    shape = settings.data.sample_shape
    classes = settings.data.classes

    def build(batch: int):
        x = Variable((batch,) + shape, name="x")
        label = Variable((batch,), name="label")
        if settings.network == "lenet":
            logits = lenet(x, n_classes=classes)
        else:
            logits = mlp(x, classes, hidden=settings.hidden)
        loss = F.softmax_cross_entropy(logits, label)
        return {"x": x, "label": label, "loss": loss, "logits": logits}

    return build


def _log_shape_chain(logits: Variable) -> None:
    from .graph import _ancestors

    nodes = _ancestors(logits)
    chain = [nodes[0].inputs[0].shape] if nodes else []
    chain += [node.outputs[0].shape for node in nodes
              if node.kind in ("Convolution", "MaxPooling", "Affine")]
    print("shape chain: " + " -> ".join(str(s) for s in chain))


def evaluate_classifier(x_var: Variable, logits_var: Variable,
                        xs: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Classification error and mean cross-entropy over a dataset.

    Runs in fixed-size chunks of the graph's batch extent, padding the
    tail by wrapping and counting only real rows; deterministic, and
    shared by the training monitor and the eval command so both report
    identical numbers.
    """
    batch = x_var.shape[0]
    n = xs.shape[0]
    wrong = 0
    loss_sum = 0.0
    for start in range(0, n, batch):
        idx = np.arange(start, start + batch) % n
        real = min(batch, n - start)
        x_var.d = xs[idx]
        logits_var.forward()
        logits = logits_var.d
        want = labels[idx][:real].astype(np.int64)
        got = np.argmax(logits[:real], axis=1)
        wrong += int((got != want).sum())
        z = logits[:real] - logits[:real].max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss_sum += float(-logp[np.arange(real), want].sum())
    return wrong / n, loss_sum / n


def run_training(settings: TrainSettings) -> int:
    try:
        split = make_data(settings.data, settings.seed)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA

    scaling = None
    if settings.loss_scale.mode == "static":
        scaling = settings.loss_scale.value
    elif settings.loss_scale.mode == "dynamic":
        scaling = DynamicLossScaler(loss_scale=settings.loss_scale.value,
                                    scaling_factor=settings.loss_scale.factor,
                                    interval=settings.loss_scale.interval)

    ctx = _context_for(settings)
    with context_scope(ctx):
        trainer = DataParallelTrainer(
            settings.workers, settings.batch_size, _make_build_fn(settings),
            lr=settings.lr, seed=settings.seed, loss_scaling=scaling)
        with registry_scope(trainer.rank0.registry):
            eval_handles = _make_build_fn(settings)(settings.batch_size)
    if settings.network == "lenet":
        _log_shape_chain(eval_handles["logits"])

    n = split.train_x.shape[0]
    batches = n // settings.batch_size
    if batches == 0:
        print("data error: fewer training samples than one batch", file=sys.stderr)
        return EXIT_DATA
    shuffle_rng = RngState(seed=settings.seed).derived(_SHUFFLE_STREAM)

    iteration = 0
    nan_epochs = 0
    rows: list[str] = []
    with open(settings.out_monitor, "w", encoding="utf-8") as monitor:
        monitor.write(MONITOR_HEADER + "\n")
        for epoch in range(1, settings.epochs + 1):
            order = shuffle_rng.permutation(n)
            epoch_loss = 0.0
            for b in range(batches):
                take = order[b * settings.batch_size:(b + 1) * settings.batch_size]
                epoch_loss += trainer.step(split.train_x[take], split.train_label[take])
                iteration += 1
            epoch_loss /= batches

            train_error, _ = evaluate_classifier(
                eval_handles["x"], eval_handles["logits"], split.train_x, split.train_label)
            val_error, _ = evaluate_classifier(
                eval_handles["x"], eval_handles["logits"], split.val_x, split.val_label)

            if settings.precision == "mixed":
                if trainer.rank0.scaler is not None:
                    scale_cell = repr(float(trainer.rank0.scaler.loss_scale))
                elif settings.loss_scale.mode == "static":
                    scale_cell = repr(float(settings.loss_scale.value))
                else:
                    scale_cell = repr(1.0)
            else:
                scale_cell = ""
            row = (f"{epoch},{iteration},{repr(float(epoch_loss))},"
                   f"{repr(float(train_error))},{repr(float(val_error))},{scale_cell}")
            rows.append(row)
            monitor.write(row + "\n")
            monitor.flush()
            print(f"epoch {epoch}: loss={epoch_loss:.6f} train_error={train_error:.4f} "
                  f"val_error={val_error:.4f}")

            if settings.precision == "f32" and np.isnan(epoch_loss):
                nan_epochs += 1
                if nan_epochs >= 3:
                    print("training diverged: loss was NaN for 3 consecutive epochs",
                          file=sys.stderr)
                    return EXIT_DIVERGED
            else:
                nan_epochs = 0

    with context_scope(ctx):
        model = model_from_graph({"x": eval_handles["x"]}, {"y": eval_handles["logits"]},
                                 trainer.rank0.registry)
    model.training_config = TrainingConfig(max_epoch=settings.epochs,
                                           batch_size=settings.batch_size,
                                           iter_per_epoch=batches)
    attrs = {"classes": str(settings.data.classes),
             "samples": str(settings.data.samples),
             "val_samples": str(settings.data.val_samples)}
    if settings.data.kind == "synthetic-gaussians":
        attrs["dim"] = str(settings.data.dim)
    if settings.data.kind == "csv":
        attrs["csv"] = settings.data.csv_path
    model.datasets = [DatasetRef("train", kind=settings.data.kind, attrs=attrs)]
    model.optimizers = [OptimizerDef(
        "sgd", network="main", lr=settings.lr,
        loss_scale_mode=settings.loss_scale.mode,
        loss_scale=settings.loss_scale.value,
        scaling_factor=settings.loss_scale.factor,
        interval=settings.loss_scale.interval)]
    model.monitors = [MonitorDef(metric, network="main", metric=metric)
                      for metric in ("train_loss", "train_error", "val_error")]
    save_nnp(model, settings.out_model)
    print(f"wrote {settings.out_model} and {settings.out_monitor}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        settings = build_settings(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run_training(settings)


def cmd_eval(args) -> int:
    try:
        model = load_nnp(args.model)
        diags = validate(model)
        if diags:
            print("bad model:\n" + "\n".join(str(d) for d in diags), file=sys.stderr)
            return EXIT_CONFIG
        if not model.executors:
            print("bad model: no executor", file=sys.stderr)
            return EXIT_CONFIG
    except NnlError as exc:
        print(f"bad model: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        settings = build_settings(args)
        split = make_data(settings.data, settings.seed)
    except (ConfigError, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA if isinstance(exc, DataError) else EXIT_CONFIG

    # reconstruction is define-then-run by nature; only the precision
    # policy is taken from the stored context
    ctx = ExecutionContext(mode=Mode.STATIC,
                           type_config=TypeConfig(model.global_config.type_config))
    try:
        with context_scope(ctx):
            binding = build_executor(model)
    except NnlError as exc:
        print(f"bad model: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    (x_var,) = binding.inputs.values()
    (y_var,) = binding.outputs.values()
    if tuple(x_var.shape[1:]) != tuple(split.val_x.shape[1:]):
        print(f"data error: executor input {x_var.shape} does not accept samples of "
              f"shape {split.val_x.shape[1:]}", file=sys.stderr)
        return EXIT_DATA
    error, loss = evaluate_classifier(x_var, y_var, split.val_x, split.val_label)
    print(f"val_error={repr(float(error))}")
    print(f"val_loss={repr(float(loss))}")
    return EXIT_OK


def cmd_convert(args) -> int:
    try:
        model = load_nnp(args.input)
    except NnlError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    had_executor = bool(model.executors)
    try:
        fixed = normalize(model)
    except Unnormalizable as exc:
        print(f"cannot normalize: {exc}", file=sys.stderr)
        return EXIT_UNNORMALIZABLE
    if not had_executor and fixed.executors:
        print(f"note: synthesized executor {fixed.executors[0].name!r}", file=sys.stderr)
    try:
        save_nnp(fixed, args.output)
    except NnlError as exc:
        print(f"cannot write: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def cmd_query(args) -> int:
    try:
        model = load_nnp(args.input)
        supported = read_supported_set(args.supported) if args.supported else None
    except (NnlError, OSError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    names = query_unsupported(model, supported)
    for name in names:
        print(name)
    return EXIT_QUERY_FOUND if names else EXIT_OK


def cmd_dump(args) -> int:
    from .nnp import propagate_shapes

    try:
        model = load_nnp(args.input)
    except NnlError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    total_params = sum(r.values.size for r in model.parameters)
    total_madds = 0
    for net in model.networks:
        print(f"network {net.name}")
        shapes, _ = propagate_shapes(net)
        for f in net.functions:
            outs = ", ".join(f"{n}:{shapes.get(n, '?')}" for n in f.outputs)
            print(f"  {f.name or f.kind} [{f.kind}] -> {outs}")
            total_madds += _multiply_adds(f, shapes)
    print(f"parameters: {total_params}")
    print(f"multiply-adds: {total_madds}")
    return EXIT_OK


def _multiply_adds(f, shapes: dict) -> int:
    try:
        if f.kind == "Convolution":
            x = shapes[f.inputs[0]]
            w = shapes[f.inputs[1]]
            y = shapes[f.outputs[0]]
            # B * O * C * kh * kw * H' * W'
            return int(np.prod(y, dtype=np.int64)) * w[1] * w[2] * w[3]
        if f.kind == "Affine":
            x = shapes[f.inputs[0]]
            w = shapes[f.inputs[1]]
            return x[0] * w[0] * w[1]
    except (KeyError, IndexError):
        return 0
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="nanonnl",
        description="Train, evaluate, convert, query and inspect nanonnl models.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a network and write model + monitor files")
    train.add_argument("--config", help="key=value config file")
    train.add_argument("--workers", type=int, help="data-parallel worker count")
    train.add_argument("--precision", choices=("f32", "mixed"))
    train.add_argument("--loss-scale", dest="loss_scale",
                       help="none | static:V | dynamic:INIT,FACTOR,INTERVAL")
    train.add_argument("--seed", type=int)
    train.add_argument("--out", help="output model path (.nnp)")
    train.add_argument("--monitor", help="output monitor CSV path")
    train.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a model on the configured data")
    ev.add_argument("model", help="model file (.nnp)")
    ev.add_argument("--config", help="key=value config file describing the data")
    ev.add_argument("--seed", type=int)
    ev.set_defaults(fn=cmd_eval)

    conv = sub.add_parser("convert", help="rewrite a model archive in normalized form")
    conv.add_argument("input")
    conv.add_argument("output")
    conv.add_argument("--normalize", action="store_true",
                      help="accepted for compatibility; conversion always normalizes")
    conv.set_defaults(fn=cmd_convert)

    query = sub.add_parser("query", help="list function instances this build cannot run")
    query.add_argument("input")
    query.add_argument("--supported", help="text file with one supported kind per line")
    query.set_defaults(fn=cmd_query)

    dump = sub.add_parser("dump", help="print networks, shapes and cost counters")
    dump.add_argument("input")
    dump.set_defaults(fn=cmd_dump)

    args = parser.parse_args(argv)
    return args.fn(args)


def entry() -> None:
    sys.exit(main())
