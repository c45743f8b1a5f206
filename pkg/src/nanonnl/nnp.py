"""The NNP model container: an in-memory model of networks, parameters and
run configuration, plus a bit-exact file format.

An archive is a store-only ZIP with exactly three members, in order:

* ``nnp_version.txt`` — ASCII ``0.1\\n``.
* ``network.nntxt`` — line-oriented UTF-8 description of configs,
  datasets, networks (variables + functions), executors, optimizers and
  monitors. Unknown ``key=value`` lines inside a block and unknown
  ``arg.*`` keys on function lines survive load/save verbatim.
* ``parameter.bin`` — little-endian binary: magic ``0x4E4E5042``, u32
  record count, then per record: u32 name length, UTF-8 name, u8 dtype
  (0=F32, 1=F16), u8 need_grad, u32 ndim, ndim x u32 dims, payload
  (4-byte floats, or genuine 2-byte binary16 words for F16).

Saving normalizes first (after validation), so identical models produce
byte-identical archives and load(save(m)) equals normalize(m).
"""

from __future__ import annotations

import struct
import zipfile
from dataclasses import dataclass, field, replace

import numpy as np

from . import functions as _functions
from .errors import (
    BadMagic,
    ChecksumMismatch,
    IoError,
    ParseError,
    UnknownFunction,
    Unnormalizable,
    UnsupportedVersion,
    ValidationFailed,
)
from .graph import Variable, apply, get_default_context
from .parameters import ParameterRegistry
from .tensor import Dtype

__all__ = [
    "NNP_VERSION",
    "Diagnostic",
    "GlobalConfig",
    "TrainingConfig",
    "VariableDef",
    "FunctionDef",
    "NetworkDef",
    "ParameterRecord",
    "DatasetRef",
    "OptimizerDef",
    "MonitorDef",
    "ExecutorDef",
    "NnpModel",
    "save_nnp",
    "load_nnp",
    "validate",
    "normalize",
    "query_unsupported",
    "model_from_graph",
    "graph_from_network",
    "build_executor",
    "propagate_shapes",
    "read_supported_set",
]

NNP_VERSION = "0.1"
_PARAM_MAGIC = 0x4E4E5042


# --- model types -------------------------------------------------------------

@dataclass
class GlobalConfig:
    mode: str = "Static"
    type_config: str = "Float"
    device: str = "Host"
    extras: list[str] = field(default_factory=list)


@dataclass
class TrainingConfig:
    max_epoch: int = 0
    batch_size: int = 0
    iter_per_epoch: int = 0
    extras: list[str] = field(default_factory=list)


@dataclass
class VariableDef:
    name: str
    kind: str  # "Buffer" or "Parameter"
    shape: tuple


@dataclass
class FunctionDef:
    name: str  # "" until normalize assigns one
    kind: str
    inputs: list[str]
    outputs: list[str]
    args: dict[str, str] = field(default_factory=dict)  # canonical string encoding


@dataclass
class NetworkDef:
    name: str
    variables: list[VariableDef] = field(default_factory=list)
    functions: list[FunctionDef] = field(default_factory=list)
    extras: list[str] = field(default_factory=list)


class ParameterRecord:
    """A named tensor payload; compares bit-exactly."""

    def __init__(self, name: str, shape: tuple, dtype: Dtype, values: np.ndarray,
                 need_grad: bool = True):
        self.name = name
        self.shape = tuple(int(d) for d in shape)
        self.dtype = dtype
        self.values = np.ascontiguousarray(values, dtype=np.float32).reshape(self.shape)
        self.need_grad = bool(need_grad)

    def payload_bytes(self) -> bytes:
        if self.dtype is Dtype.F16:
            return self.values.astype("<f2").tobytes()
        return self.values.astype("<f4").tobytes()

    def __eq__(self, other):
        return (isinstance(other, ParameterRecord)
                and self.name == other.name
                and self.shape == other.shape
                and self.dtype == other.dtype
                and self.need_grad == other.need_grad
                and self.payload_bytes() == other.payload_bytes())

    def __repr__(self):
        return f"ParameterRecord({self.name!r}, {self.shape}, {self.dtype.value})"


@dataclass
class DatasetRef:
    name: str
    kind: str = ""
    attrs: dict[str, str] = field(default_factory=dict)
    extras: list[str] = field(default_factory=list)


@dataclass
class OptimizerDef:
    name: str
    network: str = ""
    lr: float = 0.0
    loss_scale_mode: str = "none"  # none | static | dynamic
    loss_scale: float = 1.0
    scaling_factor: float = 2.0
    interval: int = 2000
    extras: list[str] = field(default_factory=list)


@dataclass
class MonitorDef:
    name: str
    network: str = ""
    metric: str = ""
    extras: list[str] = field(default_factory=list)


@dataclass
class ExecutorDef:
    name: str
    network: str = ""
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    extras: list[str] = field(default_factory=list)


@dataclass
class NnpModel:
    global_config: GlobalConfig = field(default_factory=GlobalConfig)
    training_config: TrainingConfig = field(default_factory=TrainingConfig)
    networks: list[NetworkDef] = field(default_factory=list)
    parameters: list[ParameterRecord] = field(default_factory=list)
    datasets: list[DatasetRef] = field(default_factory=list)
    optimizers: list[OptimizerDef] = field(default_factory=list)
    monitors: list[MonitorDef] = field(default_factory=list)
    executors: list[ExecutorDef] = field(default_factory=list)

    def network(self, name: str) -> NetworkDef | None:
        for net in self.networks:
            if net.name == name:
                return net
        return None


@dataclass
class Diagnostic:
    code: str
    where: str
    message: str

    def __str__(self):
        return f"[{self.code}] {self.where}: {self.message}"


# --- argument string encoding --------------------------------------------

def _encode_arg(value, typ: str) -> str:
    if typ == "int":
        return str(int(value))
    if typ == "float":
        return repr(float(value))
    if typ == "bool":
        return "true" if value else "false"
    if typ == "pair":
        a, b = value
        return f"{int(a)},{int(b)}"
    raise ValueError(f"unknown arg type {typ}")


def _decode_arg(text: str, typ: str):
    if typ == "int":
        return int(text)
    if typ == "float":
        return float(text)
    if typ == "bool":
        if text not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text == "true"
    if typ == "pair":
        a, b = text.split(",")
        return (int(a), int(b))
    raise ValueError(f"unknown arg type {typ}")


def encode_args(kind: str, typed: dict) -> dict[str, str]:
    schema = _functions.REGISTRY[kind].ARGS
    return {name: _encode_arg(typed[name], typ) for name, typ in schema.items()}


def decode_args(kind: str, raw: dict[str, str]) -> dict:
    """Known arg keys decoded per the kind's schema; unknown keys dropped
    (they are preserved at the model level, not executed)."""
    schema = _functions.REGISTRY[kind].ARGS
    return {name: _decode_arg(raw[name], typ)
            for name, typ in schema.items() if name in raw}


# --- text member -------------------------------------------------------------

def _shape_token(shape: tuple) -> str:
    if len(shape) == 0:
        return "scalar"
    return "x".join(str(int(d)) for d in shape)


def _parse_shape_token(token: str, line_no: int) -> tuple:
    if token == "scalar":
        return ()
    try:
        return tuple(int(d) for d in token.split("x"))
    except ValueError:
        raise ParseError(line_no, f"bad shape token {token!r}") from None


def emit_nntxt(model: NnpModel) -> str:
    lines: list[str] = []
    g = model.global_config
    lines.append("config global")
    lines.append(f"  mode={g.mode}")
    lines.append(f"  type_config={g.type_config}")
    lines.append(f"  device={g.device}")
    lines.extend(f"  {raw}" for raw in g.extras)
    t = model.training_config
    lines.append("config training")
    lines.append(f"  max_epoch={t.max_epoch}")
    lines.append(f"  batch_size={t.batch_size}")
    lines.append(f"  iter_per_epoch={t.iter_per_epoch}")
    lines.extend(f"  {raw}" for raw in t.extras)
    for ds in model.datasets:
        lines.append(f"dataset {ds.name}")
        lines.append(f"  kind={ds.kind}")
        lines.extend(f"  {k}={v}" for k, v in ds.attrs.items())
        lines.extend(f"  {raw}" for raw in ds.extras)
    for net in model.networks:
        lines.append(f"network {net.name}")
        for v in net.variables:
            lines.append(f"  variable {v.name} {v.kind} {_shape_token(v.shape)}")
        for f in net.functions:
            parts = [f"  function {f.name} {f.kind}",
                     "inputs=" + ",".join(f.inputs),
                     "outputs=" + ",".join(f.outputs)]
            parts.extend(f"arg.{k}={v}" for k, v in f.args.items())
            lines.append(" ".join(parts))
        lines.extend(f"  {raw}" for raw in net.extras)
    for ex in model.executors:
        lines.append(f"executor {ex.name}")
        lines.append(f"  network={ex.network}")
        lines.extend(f"  input={n}" for n in ex.inputs)
        lines.extend(f"  output={n}" for n in ex.outputs)
        lines.extend(f"  {raw}" for raw in ex.extras)
    for opt in model.optimizers:
        lines.append(f"optimizer {opt.name}")
        lines.append(f"  network={opt.network}")
        lines.append(f"  lr={repr(opt.lr)}")
        lines.append(f"  loss_scale_mode={opt.loss_scale_mode}")
        lines.append(f"  loss_scale={repr(opt.loss_scale)}")
        lines.append(f"  scaling_factor={repr(opt.scaling_factor)}")
        lines.append(f"  interval={opt.interval}")
        lines.extend(f"  {raw}" for raw in opt.extras)
    for mon in model.monitors:
        lines.append(f"monitor {mon.name}")
        lines.append(f"  network={mon.network}")
        lines.append(f"  metric={mon.metric}")
        lines.extend(f"  {raw}" for raw in mon.extras)
    return "\n".join(lines) + "\n"


_SECTION_KEYWORDS = ("config", "dataset", "network", "executor", "optimizer", "monitor")


def parse_nntxt(text: str) -> NnpModel:
    model = NnpModel()
    section = None  # the object currently collecting lines
    section_kind = None

    def fail(no, msg):
        raise ParseError(no, msg)

    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]

        if head in _SECTION_KEYWORDS:
            if len(tokens) != 2:
                fail(no, f"{head} line needs exactly one name")
            name = tokens[1]
            if head == "config":
                if name == "global":
                    section = model.global_config
                elif name == "training":
                    section = model.training_config
                else:
                    fail(no, f"unknown config block {name!r}")
            elif head == "dataset":
                section = DatasetRef(name=name)
                model.datasets.append(section)
            elif head == "network":
                section = NetworkDef(name=name)
                model.networks.append(section)
            elif head == "executor":
                section = ExecutorDef(name=name)
                model.executors.append(section)
            elif head == "optimizer":
                section = OptimizerDef(name=name)
                model.optimizers.append(section)
            else:
                section = MonitorDef(name=name)
                model.monitors.append(section)
            section_kind = head
            continue

        if section is None:
            fail(no, f"content line outside any block: {line!r}")

        if section_kind == "network" and head == "variable":
            if len(tokens) != 4:
                fail(no, "variable line must be: variable <name> <kind> <shape>")
            _, vname, vkind, vshape = tokens
            if vkind not in ("Buffer", "Parameter"):
                fail(no, f"unknown variable kind {vkind!r}")
            section.variables.append(
                VariableDef(vname, vkind, _parse_shape_token(vshape, no)))
            continue

        if section_kind == "network" and head == "function":
            if len(tokens) < 4:
                fail(no, "function line must be: function <name> <kind> inputs=... outputs=...")
            _, fname, fkind = tokens[:3]
            inputs: list[str] | None = None
            outputs: list[str] | None = None
            args: dict[str, str] = {}
            for part in tokens[3:]:
                if "=" not in part:
                    fail(no, f"expected key=value, got {part!r}")
                key, _, value = part.partition("=")
                if key == "inputs":
                    inputs = [v for v in value.split(",") if v]
                elif key == "outputs":
                    outputs = [v for v in value.split(",") if v]
                elif key.startswith("arg."):
                    args[key[4:]] = value
                else:
                    fail(no, f"unknown function field {key!r}")
            if inputs is None or outputs is None:
                fail(no, "function line missing inputs= or outputs=")
            section.functions.append(FunctionDef(fname, fkind, inputs, outputs, args))
            continue

        if "=" not in line:
            fail(no, f"expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        try:
            _apply_block_key(section, section_kind, key, value)
        except (ValueError, TypeError):
            fail(no, f"bad value for {key!r}: {value!r}")
    return model


def _apply_block_key(section, section_kind: str, key: str, value: str) -> None:
    if isinstance(section, GlobalConfig):
        if key in ("mode", "type_config", "device"):
            setattr(section, key, value)
        else:
            section.extras.append(f"{key}={value}")
    elif isinstance(section, TrainingConfig):
        if key in ("max_epoch", "batch_size", "iter_per_epoch"):
            setattr(section, key, int(value))
        else:
            section.extras.append(f"{key}={value}")
    elif isinstance(section, DatasetRef):
        if key == "kind":
            section.kind = value
        else:
            section.attrs[key] = value
    elif isinstance(section, ExecutorDef):
        if key == "network":
            section.network = value
        elif key == "input":
            section.inputs.append(value)
        elif key == "output":
            section.outputs.append(value)
        else:
            section.extras.append(f"{key}={value}")
    elif isinstance(section, OptimizerDef):
        if key == "network":
            section.network = value
        elif key == "lr":
            section.lr = float(value)
        elif key == "loss_scale_mode":
            section.loss_scale_mode = value
        elif key == "loss_scale":
            section.loss_scale = float(value)
        elif key == "scaling_factor":
            section.scaling_factor = float(value)
        elif key == "interval":
            section.interval = int(value)
        else:
            section.extras.append(f"{key}={value}")
    elif isinstance(section, MonitorDef):
        if key == "network":
            section.network = value
        elif key == "metric":
            section.metric = value
        else:
            section.extras.append(f"{key}={value}")
    else:  # NetworkDef free-form key
        section.extras.append(f"{key}={value}")


# --- binary member -----------------------------------------------------------

def emit_parameter_bin(records: list[ParameterRecord]) -> bytes:
    out = bytearray()
    out += struct.pack("<I", _PARAM_MAGIC)
    out += struct.pack("<I", len(records))
    for rec in records:
        name = rec.name.encode("utf-8")
        out += struct.pack("<I", len(name))
        out += name
        out += struct.pack("<BB", 1 if rec.dtype is Dtype.F16 else 0, 1 if rec.need_grad else 0)
        out += struct.pack("<I", len(rec.shape))
        for d in rec.shape:
            out += struct.pack("<I", d)
        out += rec.payload_bytes()
    return bytes(out)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(self.pos, f"parameter.bin truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def parse_parameter_bin(data: bytes) -> list[ParameterRecord]:
    cur = _Cursor(data)
    magic = cur.u32("magic")
    if magic != _PARAM_MAGIC:
        raise BadMagic(f"parameter.bin magic {magic:#x} != {_PARAM_MAGIC:#x}")
    count = cur.u32("record count")
    records = []
    for i in range(count):
        name_len = cur.u32(f"record {i} name length")
        try:
            name = cur.take(name_len, f"record {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(cur.pos, f"record {i} name is not UTF-8") from None
        dtype_byte = cur.u8(f"record {i} dtype")
        if dtype_byte not in (0, 1):
            raise ParseError(cur.pos, f"record {i} has unknown dtype {dtype_byte}")
        need_grad = cur.u8(f"record {i} need_grad")
        if need_grad not in (0, 1):
            raise ParseError(cur.pos, f"record {i} has bad need_grad {need_grad}")
        ndim = cur.u32(f"record {i} ndim")
        shape = tuple(cur.u32(f"record {i} dim {d}") for d in range(ndim))
        n = 1
        for d in shape:
            n *= d
        dtype = Dtype.F16 if dtype_byte else Dtype.F32
        width = 2 if dtype is Dtype.F16 else 4
        payload = cur.take(n * width, f"record {i} payload")
        values = np.frombuffer(payload, dtype="<f2" if dtype is Dtype.F16 else "<f4")
        records.append(ParameterRecord(name, shape, dtype,
                                       values.astype(np.float32), bool(need_grad)))
    if cur.pos != len(data):
        raise ParseError(cur.pos, "trailing bytes after last record")
    return records


# --- archive -----------------------------------------------------------------

_MEMBERS = ("nnp_version.txt", "network.nntxt", "parameter.bin")


def save_nnp(model: NnpModel, path) -> None:
    """Validate, normalize and write the archive; identical models give
    byte-identical files."""
    diags = validate(model)
    if diags:
        raise ValidationFailed(diags)
    normalized = normalize(model)
    payloads = {
        "nnp_version.txt": (NNP_VERSION + "\n").encode("ascii"),
        "network.nntxt": emit_nntxt(normalized).encode("utf-8"),
        "parameter.bin": emit_parameter_bin(normalized.parameters),
    }
    try:
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as archive:
            for member in _MEMBERS:
                info = zipfile.ZipInfo(member, date_time=(1980, 1, 1, 0, 0, 0))
                info.compress_type = zipfile.ZIP_STORED
                info.create_system = 3
                info.external_attr = 0o644 << 16
                archive.writestr(info, payloads[member])
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_nnp(path) -> NnpModel:
    try:
        archive = zipfile.ZipFile(path, "r")
    except zipfile.BadZipFile as exc:
        raise BadMagic(f"not an NNP archive: {exc}") from exc
    except OSError as exc:
        raise IoError(str(exc)) from exc
    with archive:
        names = archive.namelist()
        for member in _MEMBERS:
            if member not in names:
                raise ParseError(0, f"archive is missing {member}")

        def read(member: str) -> bytes:
            try:
                return archive.read(member)
            except zipfile.BadZipFile as exc:
                if "CRC" in str(exc):
                    raise ChecksumMismatch(f"{member}: {exc}") from exc
                raise BadMagic(str(exc)) from exc

        version = read("nnp_version.txt").decode("ascii", errors="replace").strip()
        if version != NNP_VERSION:
            raise UnsupportedVersion(f"container version {version!r}, expected {NNP_VERSION!r}")
        model = parse_nntxt(read("network.nntxt").decode("utf-8"))
        model.parameters = parse_parameter_bin(read("parameter.bin"))
    return model


# --- validation --------------------------------------------------------------

def _has_bad_token(name: str) -> bool:
    return (not name) or any(c.isspace() for c in name) or "=" in name or "," in name


def propagate_shapes(network: NetworkDef) -> tuple[dict[str, tuple], list[Diagnostic]]:
    """Infer every variable's shape by walking the function list in order.

    Declared shapes seed the walk; inferred output shapes are checked
    against declarations. Functions of unknown kind are skipped (their
    outputs keep declared shapes)."""
    shapes = {v.name: v.shape for v in network.variables}
    diags: list[Diagnostic] = []
    for f in network.functions:
        impl_cls = _functions.REGISTRY.get(f.kind)
        if impl_cls is None:
            continue
        where = f"network {network.name} function {f.name or f.kind}"
        try:
            impl = impl_cls(**decode_args(f.kind, f.args))
        except Exception as exc:
            diags.append(Diagnostic("BadArgs", where, str(exc)))
            continue
        if any(n not in shapes for n in f.inputs):
            continue  # unresolved names are reported separately
        try:
            inferred = impl.infer_shapes([shapes[n] for n in f.inputs])
        except Exception as exc:
            diags.append(Diagnostic("ShapeConflict", where, str(exc)))
            continue
        for out_name, out_shape in zip(f.outputs, inferred):
            declared = shapes.get(out_name)
            if declared is not None and tuple(declared) != tuple(out_shape):
                diags.append(Diagnostic(
                    "ShapeConflict", where,
                    f"output {out_name}: declared {declared}, inferred {out_shape}"))
            shapes[out_name] = tuple(out_shape)
    return shapes, diags


def validate(model: NnpModel) -> list[Diagnostic]:
    """Structural and shape diagnostics; empty list means the model is sound."""
    diags: list[Diagnostic] = []
    if not model.networks:
        diags.append(Diagnostic("EmptyNetwork", "model", "model declares no networks"))

    records = {r.name: r for r in model.parameters}
    net_names = set()
    for net in model.networks:
        where = f"network {net.name}"
        if net.name in net_names:
            diags.append(Diagnostic("DuplicateName", where, "duplicate network name"))
        net_names.add(net.name)
        if not net.functions:
            diags.append(Diagnostic("EmptyNetwork", where, "network has no functions"))

        declared: dict[str, VariableDef] = {}
        for v in net.variables:
            if _has_bad_token(v.name):
                diags.append(Diagnostic("BadName", where, f"bad variable name {v.name!r}"))
            if v.name in declared:
                diags.append(Diagnostic("DuplicateName", where,
                                        f"variable {v.name} declared twice"))
            declared[v.name] = v

        sources = _buffer_sources(net)
        produced: dict[str, str] = {}
        seen_outputs: set[str] = set()
        fnames: set[str] = set()
        for f in net.functions:
            fwhere = f"{where} function {f.name or f.kind}"
            if f.name:
                if f.name in fnames:
                    diags.append(Diagnostic("DuplicateName", fwhere, "duplicate function name"))
                fnames.add(f.name)
            for n in f.inputs:
                if n not in declared:
                    diags.append(Diagnostic("UnresolvedName", fwhere,
                                            f"input {n} is not a declared variable"))
                elif (declared[n].kind == "Buffer" and n not in sources
                      and n not in seen_outputs):
                    diags.append(Diagnostic("FunctionOrder", fwhere,
                                            f"input {n} is used before it is produced"))
            for n in f.outputs:
                if n not in declared:
                    diags.append(Diagnostic("UnresolvedName", fwhere,
                                            f"output {n} is not a declared variable"))
                if n in produced:
                    diags.append(Diagnostic("MultipleProducers", fwhere,
                                            f"{n} already produced by {produced[n]}"))
                produced[n] = f.name or f.kind
                seen_outputs.add(n)

        for v in net.variables:
            if v.kind != "Parameter":
                continue
            rec = records.get(v.name)
            if rec is None:
                diags.append(Diagnostic("MissingParameter", where,
                                        f"no stored values for parameter {v.name}"))
            elif rec.shape != tuple(v.shape):
                diags.append(Diagnostic("ShapeConflict", where,
                                        f"parameter {v.name}: declared {v.shape}, "
                                        f"stored {rec.shape}"))
        _, shape_diags = propagate_shapes(net)
        diags.extend(shape_diags)

    for rec in model.parameters:
        n = 1
        for d in rec.shape:
            n *= d
        if rec.values.size != n:
            diags.append(Diagnostic("ShapeConflict", f"parameter {rec.name}",
                                    f"value count {rec.values.size} != product(shape) {n}"))

    for ex in model.executors:
        where = f"executor {ex.name}"
        net = model.network(ex.network)
        if net is None:
            diags.append(Diagnostic("UnresolvedName", where,
                                    f"unknown network {ex.network!r}"))
            continue
        names = {v.name for v in net.variables}
        for n in ex.inputs + ex.outputs:
            if n not in names:
                diags.append(Diagnostic("UnresolvedName", where,
                                        f"variable {n} not in network {net.name}"))
    for opt in model.optimizers:
        if model.network(opt.network) is None:
            diags.append(Diagnostic("UnresolvedName", f"optimizer {opt.name}",
                                    f"unknown network {opt.network!r}"))
    for mon in model.monitors:
        if model.network(mon.network) is None:
            diags.append(Diagnostic("UnresolvedName", f"monitor {mon.name}",
                                    f"unknown network {mon.network!r}"))
    return diags


def _buffer_sources(net: NetworkDef) -> set[str]:
    produced = {n for f in net.functions for n in f.outputs}
    return {v.name for v in net.variables if v.kind == "Buffer" and v.name not in produced}


def query_unsupported(model: NnpModel, supported: set[str] | None = None) -> list[str]:
    """Names of function instances whose kind is not in the supported set
    (default: the kinds this build implements)."""
    if supported is None:
        supported = _functions.supported_kinds()
    names = []
    for net in model.networks:
        counters: dict[str, int] = {}
        for f in net.functions:
            index = counters.get(f.kind, 0)
            counters[f.kind] = index + 1
            if f.kind not in supported:
                names.append(f.name or f"{f.kind.lower()}_{index}")
    return names


def read_supported_set(path) -> set[str]:
    """One function kind per line; blank lines ignored."""
    with open(path, "r", encoding="utf-8") as fh:
        return {line.strip() for line in fh if line.strip()}


# --- normalization -----------------------------------------------------------

def _toposort(net: NetworkDef) -> list[FunctionDef]:
    import heapq

    producer: dict[str, int] = {}
    for i, f in enumerate(net.functions):
        for n in f.outputs:
            producer.setdefault(n, i)
    deps: list[set[int]] = []
    fanout: list[list[int]] = [[] for _ in net.functions]
    for i, f in enumerate(net.functions):
        d = {producer[n] for n in f.inputs if n in producer and producer[n] != i}
        deps.append(d)
        for j in d:
            fanout[j].append(i)
    indegree = [len(d) for d in deps]
    ready = [i for i, deg in enumerate(indegree) if deg == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for j in fanout[i]:
            indegree[j] -= 1
            if indegree[j] == 0:
                heapq.heappush(ready, j)
    if len(order) != len(net.functions):
        raise Unnormalizable(f"network {net.name}: cycle in function graph")
    return [net.functions[i] for i in order]


def normalize(model: NnpModel) -> NnpModel:
    """Fill defaults, name unnamed functions, order functions topologically
    and re-validate. Idempotent; raises Unnormalizable when the model has a
    cycle or a reference no default can repair."""
    networks = []
    for net in model.networks:
        ordered = _toposort(net)
        counters: dict[str, int] = {}
        taken = {f.name for f in ordered if f.name}
        named = []
        for f in ordered:
            name = f.name
            if not name:
                index = counters.get(f.kind, 0)
                name = f"{f.kind.lower()}_{index}"
                while name in taken:
                    index += 1
                    name = f"{f.kind.lower()}_{index}"
                counters[f.kind] = index + 1
                taken.add(name)
            else:
                counters[f.kind] = counters.get(f.kind, 0) + 1
            named.append(FunctionDef(name, f.kind, list(f.inputs), list(f.outputs),
                                     dict(f.args)))
        networks.append(NetworkDef(net.name, list(net.variables), named, list(net.extras)))

    executors = [replace(ex, inputs=list(ex.inputs), outputs=list(ex.outputs),
                         extras=list(ex.extras)) for ex in model.executors]
    if not executors and len(networks) == 1:
        net = networks[0]
        sources = _buffer_sources(net)
        inputs = [v.name for v in net.variables if v.name in sources]
        consumed = {n for f in net.functions for n in f.inputs}
        produced = {n for f in net.functions for n in f.outputs}
        outputs = [v.name for v in net.variables
                   if v.name in produced and v.name not in consumed]
        executors.append(ExecutorDef(name=f"{net.name}_exec", network=net.name,
                                     inputs=inputs, outputs=outputs))

    result = NnpModel(
        global_config=replace(model.global_config, extras=list(model.global_config.extras)),
        training_config=replace(model.training_config,
                                extras=list(model.training_config.extras)),
        networks=networks,
        parameters=list(model.parameters),
        datasets=[replace(d, attrs=dict(d.attrs), extras=list(d.extras))
                  for d in model.datasets],
        optimizers=[replace(o, extras=list(o.extras)) for o in model.optimizers],
        monitors=[replace(m, extras=list(m.extras)) for m in model.monitors],
        executors=executors,
    )
    diags = validate(result)
    if diags:
        raise Unnormalizable("; ".join(str(d) for d in diags))
    return result


# --- graph bridges -----------------------------------------------------------

def model_from_graph(inputs: dict[str, Variable], outputs: dict[str, Variable],
                     registry: ParameterRegistry, network_name: str = "main") -> NnpModel:
    """Snapshot a live graph (plus its registry) as a model with one network.

    inputs/outputs give wire names to the graph's entry and exit
    variables; interior buffers are named h0, h1, ... in creation order
    and parameters keep their registry names.
    """
    from .graph import _ancestors

    nodes = []
    seen = set()
    for out in outputs.values():
        for node in _ancestors(out):
            if id(node) not in seen:
                seen.add(id(node))
                nodes.append(node)
    nodes.sort(key=lambda n: n.seq)

    param_names = {id(v): name for name, v in registry.get_parameters(grad_only=False).items()}
    names: dict[int, str] = {}
    for wire, v in list(inputs.items()) + list(outputs.items()):
        names[id(v)] = wire
    names.update(param_names)

    variables: list[VariableDef] = []
    declared: set[str] = set()
    interior = 0
    unnamed_leaf = 0

    def declare(v: Variable) -> str:
        nonlocal interior, unnamed_leaf
        name = names.get(id(v))
        if name is None:
            if v.parent is None:
                name = f"in{unnamed_leaf}"
                unnamed_leaf += 1
            else:
                name = f"h{interior}"
                interior += 1
            names[id(v)] = name
        if name not in declared:
            declared.add(name)
            kind = "Parameter" if id(v) in param_names else "Buffer"
            variables.append(VariableDef(name, kind, v.shape))
        return name

    counters: dict[str, int] = {}
    fdefs: list[FunctionDef] = []
    for node in nodes:
        in_names = [declare(v) for v in node.inputs]
        out_names = [declare(v) for v in node.outputs]
        index = counters.get(node.kind, 0)
        counters[node.kind] = index + 1
        fdefs.append(FunctionDef(
            name=f"{node.kind.lower()}_{index}",
            kind=node.kind,
            inputs=in_names,
            outputs=out_names,
            args=encode_args(node.kind, node.impl.args_dict()),
        ))
    for wire, v in outputs.items():  # even if an output is also an input
        declare(v)

    records = [
        ParameterRecord(name, v.shape, v.dtype, v.d.copy(), v.need_grad)
        for name, v in registry.get_parameters(grad_only=False).items()
    ]
    ctx = get_default_context()
    return NnpModel(
        global_config=GlobalConfig(mode=ctx.mode.value, type_config=ctx.type_config.value,
                                   device=ctx.device),
        networks=[NetworkDef(network_name, variables, fdefs)],
        parameters=records,
    )


def graph_from_network(network: NetworkDef, parameters: list[ParameterRecord]) -> dict[str, Variable]:
    """Rebuild an executable graph: returns name -> Variable for every
    declared variable. Raises UnknownFunction for kinds this build cannot
    execute (query first)."""
    records = {r.name: r for r in parameters}
    variables: dict[str, Variable] = {}
    sources = _buffer_sources(network)
    for v in network.variables:
        if v.kind == "Parameter":
            rec = records.get(v.name)
            if rec is None:
                raise ValidationFailed([Diagnostic(
                    "MissingParameter", f"network {network.name}",
                    f"no stored values for parameter {v.name}")])
            var = Variable(v.shape, need_grad=rec.need_grad, dtype=rec.dtype, name=v.name)
            var.d = rec.values
            var.persistent = True
            variables[v.name] = var
        elif v.name in sources:
            variables[v.name] = Variable(v.shape, name=v.name)
    for f in network.functions:
        if f.kind not in _functions.REGISTRY:
            raise UnknownFunction(f"cannot execute function kind {f.kind!r}")
        ins = [variables[n] for n in f.inputs]
        outs = apply(f.kind, ins, decode_args(f.kind, f.args))
        for name, var in zip(f.outputs, outs):
            var.name = name
            variables[name] = var
    return variables


@dataclass
class ExecutorBinding:
    executor: ExecutorDef
    network: NetworkDef
    variables: dict[str, Variable]

    @property
    def inputs(self) -> dict[str, Variable]:
        return {n: self.variables[n] for n in self.executor.inputs}

    @property
    def outputs(self) -> dict[str, Variable]:
        return {n: self.variables[n] for n in self.executor.outputs}


def build_executor(model: NnpModel, name: str | None = None) -> ExecutorBinding:
    """Instantiate the named executor (or the sole one) as a live graph."""
    def missing(message: str):
        return ValidationFailed([Diagnostic("UnresolvedName", "executor", message)])

    if not model.executors:
        raise missing("model has no executors")
    if name is None:
        executor = model.executors[0]
    else:
        matches = [e for e in model.executors if e.name == name]
        if not matches:
            raise missing(f"no executor named {name!r}")
        executor = matches[0]
    network = model.network(executor.network)
    if network is None:
        raise missing(f"executor references unknown network {executor.network!r}")
    variables = graph_from_network(network, model.parameters)
    return ExecutorBinding(executor, network, variables)
