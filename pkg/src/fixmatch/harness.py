"""Experiment configuration, the run driver, checkpoints, and metric/plot output."""

import hashlib
import io
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .augment import CtaState, WeakAugConfig
from .core import rng_for
from .data import BatchSampler, SplitSpec, load_idx, make_split, read_metadata, synth_glyphs
from .network import images_to_tensor, model_from_bytes, model_to_bytes, predict_dist, reference_classifier
from .optim import EMA, SGD, Adam, Schedule
from .ssl import DaState, FixMatchConfig
from .train import ALGORITHMS, NonFiniteLossError, TrainState, train_step

log = logging.getLogger(__name__)

# -- configuration -----------------------------------------------------------------------

# key -> default; the default's type decides how strings are parsed
DEFAULTS = {
    "seed": 0,
    "algorithm": "fixmatch",
    "steps": 8192,
    "eval_every": 256,
    "output_dir": "runs/default",
    "dataset.kind": "glyphs",
    "dataset.n_train": 5000,
    "dataset.n_test": 2000,
    "dataset.num_classes": 10,
    "dataset.size": 24,
    "dataset.seed": 2024,
    "dataset.train_images": "",
    "dataset.train_labels": "",
    "dataset.test_images": "",
    "dataset.test_labels": "",
    "dataset.metadata": "",
    "split.labels_per_class": 4,
    "split.fold_seed": 0,
    "split.include_labeled_in_unlabeled": True,
    "ssl.tau": 0.95,
    "ssl.lambda_u": 1.0,
    "ssl.mu": 7,
    "ssl.batch_size": 64,
    "ssl.temperature": 0.0,
    "ssl.anchors": 1,
    "ssl.da_enabled": False,
    "ssl.strong_policy": "ctaugment",
    "ssl.mixup_alpha": 9.0,
    "augment.flip_enabled": "auto",
    "augment.max_translate_frac": 0.125,
    "augment.cta_decay": 0.99,
    "augment.cta_threshold": 0.85,
    "optim.name": "sgd",
    "optim.lr": 0.03,
    "optim.momentum": 0.9,
    "optim.nesterov": True,
    "optim.weight_decay": 0.0005,
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    "optim.eps": 1e-8,
    "schedule.kind": "cosine",
    "schedule.end_frac": 1.0 / 3.0,
    "ema.decay": 0.999,
    "da.decay": 0.999,
    "model.widths": "16,32",
}


class ConfigError(ValueError):
    pass


def resolve_key(key):
    """Full dotted key for ``key``, which may be a unique final component (``tau``)."""
    if key in DEFAULTS:
        return key
    hits = [k for k in DEFAULTS if k.rsplit(".", 1)[-1] == key]
    if len(hits) == 1:
        return hits[0]
    if hits:
        raise ConfigError(f"ambiguous config key {key!r}: {', '.join(hits)}")
    raise ConfigError(f"unknown config key {key!r}")


def parse_value(key, text):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def parse_config_text(text, base=None):
    values = dict(DEFAULTS if base is None else base)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = resolve_key(key.strip())
        values[key] = parse_value(key, value)
    return values


def load_config(path):
    with open(path) as f:
        return parse_config_text(f.read())


def apply_overrides(values, overrides):
    values = dict(values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = resolve_key(key.strip())
        values[key] = parse_value(key, value)
    return values


def format_config(values):
    return "".join(f"{k} = {_fmt_cfg(values[k])}\n" for k in DEFAULTS)


def _fmt_cfg(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class ExperimentConfig:
    values: dict
    split: SplitSpec
    ssl: FixMatchConfig
    schedule: Schedule
    algorithm: str
    steps: int
    eval_every: int
    seed: int
    output_dir: str
    ema_decay: float
    optim: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, values):
        v = dict(DEFAULTS)
        v.update(values)
        if v["algorithm"] not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
        if v["steps"] < 1 or v["eval_every"] < 1:
            raise ConfigError("steps and eval_every must be >= 1")
        if v["optim.name"] not in ("sgd", "adam"):
            raise ConfigError("optim.name must be sgd or adam")
        try:
            ssl = FixMatchConfig(
                tau=v["ssl.tau"],
                lambda_u=v["ssl.lambda_u"],
                mu=v["ssl.mu"],
                batch_size=v["ssl.batch_size"],
                temperature=v["ssl.temperature"],
                anchors=v["ssl.anchors"],
                da_enabled=v["ssl.da_enabled"],
                strong_policy=v["ssl.strong_policy"],
                mixup_alpha=v["ssl.mixup_alpha"],
            )
            split = SplitSpec(v["split.labels_per_class"], v["split.fold_seed"], v["split.include_labeled_in_unlabeled"])
            schedule = Schedule(v["schedule.kind"], v["optim.lr"], v["steps"], v["schedule.end_frac"])
        except ValueError as e:
            raise ConfigError(str(e)) from None
        optim = {k.split(".", 1)[1]: v[k] for k in DEFAULTS if k.startswith("optim.")}
        return cls(
            v, split, ssl, schedule, v["algorithm"], v["steps"], v["eval_every"], v["seed"],
            v["output_dir"], v["ema.decay"], optim,
        )


def default_config(**overrides):
    values = dict(DEFAULTS)
    for k, val in overrides.items():
        values[resolve_key(k.replace("__", "."))] = val
    return ExperimentConfig.from_values(values)


# -- datasets ---------------------------------------------------------------------------


def load_datasets(values):
    """(train, test) datasets described by the ``dataset.*`` keys."""
    kind = values["dataset.kind"]
    if kind == "glyphs":
        n_train, n_test, L = values["dataset.n_train"], values["dataset.n_test"], values["dataset.num_classes"]
        per_class = math.ceil((n_train + n_test) / L)
        full = synth_glyphs(per_class, L, values["dataset.size"], values["dataset.seed"])
        return full.subset(np.arange(n_train), "glyphs/train"), full.subset(np.arange(n_train, n_train + n_test), "glyphs/test")
    if kind == "idx":
        meta = read_metadata(values["dataset.metadata"]) if values["dataset.metadata"] else {}
        opts = dict(num_classes=meta.get("num_classes"), name=meta.get("name", "idx"), flip_enabled=meta.get("flip_enabled", True))
        train = load_idx(values["dataset.train_images"], values["dataset.train_labels"], **opts)
        opts["num_classes"] = train.num_classes
        test = load_idx(values["dataset.test_images"], values["dataset.test_labels"], **opts)
        return train, test
    raise ConfigError(f"unknown dataset kind {kind!r}")


def parse_dataset_spec(spec):
    """``glyphs[:key=value,...]`` or ``idx:images,labels[,metadata]`` to config values."""
    kind, _, rest = spec.partition(":")
    values = dict(DEFAULTS)
    values["dataset.kind"] = kind
    if kind == "glyphs":
        for item in filter(None, rest.split(",")):
            key, _, val = item.partition("=")
            full = "dataset." + key.strip()
            if full not in DEFAULTS:
                raise ConfigError(f"unknown glyph dataset option {key!r}")
            values[full] = parse_value(full, val)
    elif kind == "idx":
        parts = rest.split(",")
        if len(parts) not in (2, 3):
            raise ConfigError("idx dataset spec needs images,labels[,metadata]")
        values["dataset.test_images"], values["dataset.test_labels"] = parts[:2]
        values["dataset.train_images"], values["dataset.train_labels"] = parts[:2]
        if len(parts) == 3:
            values["dataset.metadata"] = parts[2]
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    return values


def weak_config(values, ds):
    flip = str(values["augment.flip_enabled"]).lower()
    if flip not in ("auto", "true", "false"):
        raise ConfigError("augment.flip_enabled must be auto, true or false")
    flip = ds.flip_enabled if flip == "auto" else flip == "true"
    return WeakAugConfig(flip_enabled=flip, max_translate_frac=values["augment.max_translate_frac"])


def evaluate(model, ds, params=None, chunk=500):
    """Classification error of ``model`` (optionally with other params) on ``ds``."""
    if params is not None:
        model = model.with_params(params)
    wrong = 0
    for i in range(0, len(ds), chunk):
        p = predict_dist(model, images_to_tensor(ds.images[i:i + chunk]))
        wrong += int((p.argmax(axis=1) != ds.labels[i:i + chunk]).sum())
    return wrong / len(ds)


# -- run records -------------------------------------------------------------------------

CSV_COLUMNS = ("step", "lr", "loss_s", "loss_u", "mask_rate", "impurity", "err", "err_ema", "secs")


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)

    def append(self, row):
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("run record steps must increase")
        self.rows.append(dict(row))

    def column(self, name):
        return [r[name] for r in self.rows]

    def __len__(self):
        return len(self.rows)


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.10g}"


def metrics_csv_text(record, with_time=True):
    cols = CSV_COLUMNS if with_time else CSV_COLUMNS[:-1]
    lines = [",".join(cols)]
    for r in record.rows:
        lines.append(",".join(_fmt(r.get(c)) for c in cols))
    return "\n".join(lines) + "\n"


def emit_metrics_csv(record, path):
    """Write ``record`` as CSV with columns step,lr,loss_s,loss_u,mask_rate,impurity,err,err_ema,secs."""
    if not len(record):
        raise ValueError("refusing to write an empty run record")
    with open(path, "w") as f:
        f.write(metrics_csv_text(record))


def read_metrics_csv(path):
    with open(path) as f:
        return parse_metrics_csv(f.read())


def parse_metrics_csv(text):
    lines = text.strip().splitlines()
    header = lines[0].split(",")
    rec = RunRecord()
    for line in lines[1:]:
        row = {}
        for name, cell in zip(header, line.split(",")):
            row[name] = None if cell == "" else (int(cell) if name == "step" else float(cell))
        rec.append(row)
    return rec


@dataclass
class Sweep:
    knob: str
    values: list
    records: list

    def final(self, column):
        return [r.rows[-1][column] for r in self.records]


def emit_plot_svg(obj, path, title=None):
    """Line chart: error against step for a RunRecord, final error against the knob for a Sweep."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if isinstance(obj, Sweep):
        if not obj.records:
            raise ValueError("cannot plot an empty sweep")
    elif not len(obj):
        raise ValueError("cannot plot an empty run record")

    with matplotlib.rc_context({"svg.hashsalt": "fixmatch", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        if isinstance(obj, Sweep):
            xs = list(range(len(obj.values)))
            for col, label in (("err_ema", "EMA error"), ("err", "raw error")):
                ax.plot(xs, obj.final(col), marker="o", label=label)
            ax.set_xticks(xs)
            ax.set_xticklabels([str(v) for v in obj.values])
            ax.set_xlabel(obj.knob)
        else:
            steps = obj.column("step")
            ax.plot(steps, obj.column("err_ema"), label="EMA error")
            ax.plot(steps, obj.column("err"), label="raw error")
            mask = [np.nan if m is None else m for m in obj.column("mask_rate")]
            if not all(np.isnan(mask)):
                ax.plot(steps, mask, linestyle="--", label="mask rate")
            ax.set_xlabel("step")
        ax.set_ylabel("test error")
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


# -- checkpoints --------------------------------------------------------------------------

CKPT_MAGIC = b"FXCKPT\x00\x01"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _bytes_array(b):
    return np.frombuffer(b, dtype=np.uint8)


def checkpoint_bytes(st, cfg, record, acc):
    arrays = {
        "model": _bytes_array(model_to_bytes(st.model)),
        "config": _bytes_array(format_config(cfg.values).encode()),
        "record": _bytes_array(metrics_csv_text(record).encode()) if len(record) else np.zeros(0, np.uint8),
        "step": np.array([st.step], dtype=np.int64),
        "opt_steps": np.array([st.opt.steps], dtype=np.int64),
        "sampler": np.array(st.sampler.state(), dtype=np.int64),
        "da_marginal": st.da.labeled_marginal,
        "da_running": st.da.running,
        "cta": st.cta.to_array() if st.cta is not None else np.zeros(0),
        "acc": acc.to_array(),
    }
    for i, s in enumerate(st.ema.shadow):
        arrays[f"ema_{i}"] = s
    for i, s in enumerate(st.opt.state_arrays()):
        arrays[f"opt_{i}"] = s
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    header = CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + hashlib.sha256(payload).digest()
    return header + payload


def read_checkpoint_bytes(blob):
    """Return a dict of named arrays after verifying magic, version and checksum."""
    head = len(CKPT_MAGIC) + 4 + 32
    if len(blob) < head or blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("not a training checkpoint")
    (version,) = struct.unpack("<I", blob[len(CKPT_MAGIC) : len(CKPT_MAGIC) + 4])
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    digest, payload = blob[len(CKPT_MAGIC) + 4 : head], blob[head:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    with np.load(io.BytesIO(payload), allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def checkpoint_save(path, st, cfg, record, acc=None):
    blob = checkpoint_bytes(st, cfg, record, acc or _Accumulator())
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def checkpoint_load(path):
    with open(path, "rb") as f:
        return read_checkpoint_bytes(f.read())


def checkpoint_config(arrays):
    return parse_config_text(arrays["config"].tobytes().decode())


def checkpoint_model(arrays, use_ema=True):
    model = model_from_bytes(arrays["model"].tobytes())
    if use_ema:
        n = len(model.params)
        model = model.with_params([arrays[f"ema_{i}"] for i in range(n)])
    return model


def _restore(st, arrays, acc):
    st.model = model_from_bytes(arrays["model"].tobytes())
    n = len(st.model.params)
    st.ema.shadow = [np.array(arrays[f"ema_{i}"]) for i in range(n)]
    opt_keys = sorted((k for k in arrays if k.startswith("opt_") and k != "opt_steps"), key=lambda k: int(k[4:]))
    st.opt.load_state_arrays([arrays[k] for k in opt_keys], int(arrays["opt_steps"][0]))
    st.sampler.load_state(arrays["sampler"])
    st.da.labeled_marginal = np.array(arrays["da_marginal"])
    st.da.running = np.array(arrays["da_running"])
    if st.cta is not None:
        st.cta.load_array(arrays["cta"])
    st.step = int(arrays["step"][0])
    acc.load_array(arrays["acc"])
    text = arrays["record"].tobytes().decode()
    return parse_metrics_csv(text) if text else RunRecord()


# -- the run driver ------------------------------------------------------------------------


class _Accumulator:
    """Running sums of per-step metrics between evaluations."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.n = 0
        self.loss_s = self.loss_u = 0.0
        self.mask_sum, self.mask_n = 0.0, 0
        self.imp_sum, self.imp_n = 0.0, 0
        self.secs = 0.0

    def add(self, row):
        self.n += 1
        self.loss_s += row.loss_s
        self.loss_u += row.loss_u
        if row.mask_rate is not None:
            self.mask_sum += row.mask_rate
            self.mask_n += 1
        if row.impurity is not None and row.kept:
            # pooled over the interval: wrong kept labels / all kept labels
            self.imp_sum += round(row.impurity * row.kept)
            self.imp_n += row.kept

    def to_array(self):
        return np.array([self.n, self.loss_s, self.loss_u, self.mask_sum, self.mask_n, self.imp_sum, self.imp_n, self.secs])

    def load_array(self, a):
        self.n, self.mask_n, self.imp_n = int(a[0]), int(a[4]), int(a[6])
        self.loss_s, self.loss_u, self.mask_sum, self.imp_sum, self.secs = (float(a[i]) for i in (1, 2, 3, 5, 7))

    def summary(self):
        return {
            "loss_s": self.loss_s / self.n,
            "loss_u": self.loss_u / self.n,
            "mask_rate": self.mask_sum / self.mask_n if self.mask_n else None,
            "impurity": self.imp_sum / self.imp_n if self.imp_n else None,
        }


def build_state(cfg, split, train_ds):
    """Fresh TrainState for ``cfg`` on ``split``."""
    widths = tuple(int(w) for w in str(cfg.values["model.widths"]).split(","))
    model = reference_classifier(train_ds.image_shape, train_ds.num_classes, widths)
    model.init(rng_for(cfg.seed, "init"))
    o = cfg.optim
    if o["name"] == "sgd":
        opt = SGD(model.params, o["momentum"], o["nesterov"])
    else:
        opt = Adam(model.params, o["beta1"], o["beta2"], o["eps"])
    sampler = BatchSampler(len(split.labeled), len(split.unlabeled), cfg.ssl.batch_size, cfg.ssl.mu, cfg.seed)
    da = DaState.from_labels(split.labeled.labels, train_ds.num_classes, cfg.values["da.decay"])
    cta = CtaState(cfg.values["augment.cta_decay"], cfg.values["augment.cta_threshold"])
    return TrainState(model, EMA(model.params, cfg.ema_decay), opt, sampler, da, cta)


def run_experiment(cfg, resume_from=None, stop_at=None, datasets=None, write=True, progress=None):
    """Train for ``cfg.steps`` steps, evaluating every ``cfg.eval_every`` steps.

    Writes ``metrics.csv``, ``metrics.svg``, ``config.cfg`` and
    ``checkpoint.ckpt`` to ``cfg.output_dir`` (when ``write``). The checkpoint
    is refreshed at every evaluation, so an aborted run keeps its last good
    state. ``stop_at`` ends the run early at that step (for resume tests).
    Returns ``(record, state)``.
    """
    train_ds, test_ds = datasets if datasets is not None else load_datasets(cfg.values)
    split = make_split(train_ds, cfg.split)
    weak = weak_config(cfg.values, train_ds)
    st = build_state(cfg, split, train_ds)
    acc = _Accumulator()
    record = RunRecord()
    if resume_from is not None:
        record = _restore(st, checkpoint_load(resume_from), acc)
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    out = cfg.output_dir
    if write:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.cfg"), "w") as f:
            f.write(format_config(cfg.values))
    ckpt_path = os.path.join(out, "checkpoint.ckpt")

    t0 = time.perf_counter() - acc.secs
    while st.step < end:
        try:
            row = train_step(st, split, cfg.ssl, weak, cfg.schedule, cfg.algorithm, cfg.optim["weight_decay"], cfg.seed)
        except (NonFiniteLossError, FloatingPointError) as e:
            log.error("aborting at step %d: %s (last good checkpoint: %s)", st.step, e, ckpt_path if write else "none")
            if write and len(record):
                emit_metrics_csv(record, os.path.join(out, "metrics.csv"))
            raise
        acc.add(row)
        if st.step % cfg.eval_every == 0 or st.step == cfg.steps:
            entry = {"step": st.step, "lr": row.lr}
            entry.update(acc.summary())
            entry["err"] = evaluate(st.model, test_ds)
            entry["err_ema"] = evaluate(st.model, test_ds, st.ema.shadow)
            entry["secs"] = time.perf_counter() - t0
            record.append(entry)
            acc.reset()
            if progress:
                progress(entry)
            if write:
                checkpoint_save(ckpt_path, st, cfg, record, acc)
        acc.secs = time.perf_counter() - t0
    if write:
        if st.step != cfg.steps or st.step % cfg.eval_every:
            checkpoint_save(ckpt_path, st, cfg, record, acc)
        if len(record):
            emit_metrics_csv(record, os.path.join(out, "metrics.csv"))
            emit_plot_svg(record, os.path.join(out, "metrics.svg"))
    return record, st


def run_sweep(cfg, knob, values, progress=None):
    """Run ``cfg`` once per knob value into ``output_dir/<knob>=<value>``."""
    if not values:
        raise ValueError("sweep needs at least one value")
    key = resolve_key(knob)
    records = []
    for val in values:
        v = dict(cfg.values)
        v[key] = parse_value(key, str(val))
        v["output_dir"] = os.path.join(cfg.output_dir, f"{key}={val}")
        rec, _ = run_experiment(ExperimentConfig.from_values(v), progress=progress)
        records.append(rec)
    sweep = Sweep(key, list(values), records)
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "sweep.csv"), "w") as f:
        f.write(f"{key},err,err_ema,mask_rate,impurity\n")
        for val, rec in zip(values, records):
            last = rec.rows[-1]
            f.write(",".join([str(val)] + [_fmt(last[c]) for c in ("err", "err_ema", "mask_rate", "impurity")]) + "\n")
    emit_plot_svg(sweep, os.path.join(cfg.output_dir, "sweep.svg"), title=f"final error vs {key}")
    return sweep
