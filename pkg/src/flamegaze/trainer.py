"""Training loop, evaluation protocol, ablation and resolution harnesses."""
from __future__ import annotations

import contextlib
import dataclasses
import logging
import math
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import EYES, Record, make_sample
from .geometry import (
    DegenerateVectorError,
    angles_to_vector,
    angular_error,
    angular_loss_grad_angles,
    vector_loss_grad_angles,
)
from .model import (
    Checkpoint,
    ConfigError,
    GazeNet,
    ModelSpec,
    NonFiniteError,
    save_checkpoint,
)

log = logging.getLogger(__name__)

# Mean / std angular error in degrees, cross-subject.
PAPER_ABLATION = {
    "F_B": {"columbiagaze": (5.93, 3.20), "eyediap": (5.32, 3.08)},
    "F_AF": {"columbiagaze": (5.88, 3.06), "eyediap": (5.30, 3.03)},
    "F_AO": {"columbiagaze": (5.06, 3.13), "eyediap": (4.80, 3.02)},
    "FLAME": {"columbiagaze": (4.64, 2.86), "eyediap": (4.62, 2.93)},
    "DENSE_FUSION": {"columbiagaze": (4.83, None), "eyediap": (4.74, None)},
}
PAPER_RESOLUTION = {
    120: {"columbiagaze": (4.64, 2.86), "eyediap": (4.62, 2.93)},
    60: {"columbiagaze": (4.79, 3.23), "eyediap": (4.81, 2.99)},
    30: {"columbiagaze": (5.5, 3.50), "eyediap": (4.77, 3.15)},
}
HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "val_mean_deg", "val_std_deg", "wall_seconds")
EVAL_POLICIES = ("both", "left", "right", "random")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    initial_lr: float = 1e-4
    lr_milestones: tuple = (85, 120, 175)
    lr_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    variant: str = "FLAME"
    resolution: int = 120
    preset: str = "paper"
    eval_eye: str = "both"
    precision: str = "float32"
    loss: str = "vector"
    heatmap_scale: float = 1.0
    deterministic: bool = True
    cache_samples: int = 4096

    def validated(self) -> "TrainConfig":
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        if any(b <= a for a, b in zip(self.lr_milestones, self.lr_milestones[1:])):
            raise ConfigError("lr_milestones must be strictly increasing")
        if not 0.0 < self.lr_factor < 1.0:
            raise ConfigError("lr_factor must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 0 and batch_size >= 2")
        if self.eval_eye not in EVAL_POLICIES:
            raise ConfigError(f"eval_eye must be one of {EVAL_POLICIES}")
        if self.loss not in ("vector", "angular"):
            raise ConfigError("loss must be vector or angular")
        return self

    def model_spec(self, **overrides) -> ModelSpec:
        kw = dict(
            variant=self.variant,
            input_resolution=self.resolution,
            precision=self.precision,
            seed=self.seed,
            heatmap_scale=self.heatmap_scale,
        )
        kw.update(overrides)
        return ModelSpec.from_preset(self.preset, **kw)


@dataclass
class Splits:
    train: list
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for 0-based ``epoch``; each cut takes effect after its milestone."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    k = sum(1 for m in cfg.lr_milestones if epoch > m)
    return cfg.initial_lr * cfg.lr_factor**k


class Adam:
    def __init__(self, model: GazeNet, beta1=0.9, beta2=0.999, eps=1e-8):
        self.model = model
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.params = dict(model.named_parameters())
        self.m = {k: np.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in self.model.named_grads():
            p, m, v = self.params[k], self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def config(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam:m:{k}": v.copy() for k, v in self.m.items()}
        out.update({f"adam:v:{k}": v.copy() for k, v in self.v.items()})
        return out

    def load(self, arrays: dict, config: dict) -> None:
        for k in self.m:
            self.m[k][...] = arrays[f"adam:m:{k}"]
            self.v[k][...] = arrays[f"adam:v:{k}"]
        self.t = int(config.get("t", 0))


class SampleSource:
    """Builds model-ready batches, caching patches per (record, eye)."""

    def __init__(self, resolution: int, heatmap_scale: float = 1.0, capacity: int = 4096):
        self.resolution = resolution
        self.heatmap_scale = heatmap_scale
        self.capacity = capacity
        self._cache: dict = {}

    def sample(self, record: Record, eye: str):
        key = (record.image_id, eye)
        s = self._cache.get(key)
        if s is None:
            s = make_sample(record, eye, self.resolution, heatmap_scale=self.heatmap_scale)
            if len(self._cache) < self.capacity:
                self._cache[key] = s
        return s

    def batch(self, records, eyes):
        ss = [self.sample(r, e) for r, e in zip(records, eyes)]
        return {
            "rgb": np.stack([s.rgb for s in ss]),
            "heatmap": np.stack([s.heatmap for s in ss]),
            "pose": np.stack([s.head_pose for s in ss]),
            "landmarks": np.stack([s.landmarks for s in ss]),
            "gaze": np.stack([s.gaze for s in ss]),
        }


def eye_choice(seed: int, epoch: int, record: Record) -> str:
    h = zlib.crc32(record.image_id.encode())
    return EYES[int(np.random.default_rng([seed, epoch, h]).integers(2))]


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches; a trailing singleton joins the previous batch."""
    order = np.random.default_rng([seed, 0x5EED, epoch]).permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


@contextlib.contextmanager
def _thread_limits(deterministic: bool):
    if not deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _forward(model: GazeNet, b, train):
    return model.forward(b["rgb"], b["heatmap"], b["pose"], b["landmarks"], train=train)


@dataclass
class EvalReport:
    variant: str
    errors: np.ndarray
    image_ids: list
    subject_ids: list
    predictions: np.ndarray
    truths: np.ndarray
    policy: str = "both"
    flagged: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors)) if len(self.errors) else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.errors)) if len(self.errors) else math.nan

    @property
    def per_subject(self) -> dict[str, float]:
        out: dict[str, list] = {}
        for s, e in zip(self.subject_ids, self.errors):
            out.setdefault(s, []).append(e)
        return {s: float(np.mean(v)) for s, v in sorted(out.items())}

    def write_tsv(self, path) -> None:
        """Per-record predictions; the plot command reads this format."""
        with open(path, "w") as fh:
            fh.write("# variant=%s policy=%s\n" % (self.variant, self.policy))
            fh.write("image_id\tsubject_id\ttrue_pitch_deg\ttrue_yaw_deg\tpred_pitch_deg\tpred_yaw_deg\terror_deg\n")
            for i in range(len(self.errors)):
                t = np.degrees(self.truths[i])
                p = np.degrees(self.predictions[i])
                fh.write(
                    f"{self.image_ids[i]}\t{self.subject_ids[i]}\t{t[0]:.6f}\t{t[1]:.6f}\t"
                    f"{p[0]:.6f}\t{p[1]:.6f}\t{self.errors[i]:.6f}\n"
                )


def evaluate(
    model: GazeNet,
    records,
    policy: str = "both",
    seed: int = 0,
    source: SampleSource | None = None,
    batch_size: int = 32,
) -> EvalReport:
    """Angular error per record in eval mode.

    With ``policy="both"`` a record's error is the mean over its two eyes and
    its reported prediction is the mean of the two predicted angle pairs.
    """
    if policy not in EVAL_POLICIES:
        raise ConfigError(f"eval policy must be one of {EVAL_POLICIES}")
    records = list(records)
    source = source or SampleSource(model.spec.input_resolution, model.spec.heatmap_scale)
    preds, errs = [], []
    truths = np.array([r.gaze for r in records], dtype=np.float64).reshape(-1, 2)
    flagged = []
    if policy == "both":
        eye_lists = [["left"] * len(records), ["right"] * len(records)]
    elif policy == "random":
        eye_lists = [[eye_choice(seed, 0xE7A1, r) for r in records]]
    else:
        eye_lists = [[policy] * len(records)]
    for eyes in eye_lists:
        out = np.empty((len(records), 2))
        for s in range(0, len(records), batch_size):
            b = source.batch(records[s : s + batch_size], eyes[s : s + batch_size])
            out[s : s + batch_size] = _forward(model, b, train=False)
        e = np.full(len(records), np.nan)
        gt = angles_to_vector(truths, check=False)
        gp = angles_to_vector(out, check=False)
        for i in range(len(records)):
            try:
                if not np.all(np.isfinite(gp[i])):
                    raise DegenerateVectorError("non-finite prediction")
                e[i] = angular_error(gp[i], gt[i])
            except DegenerateVectorError:
                if records[i].image_id not in flagged:
                    flagged.append(records[i].image_id)
        preds.append(out)
        errs.append(e)
    errors = np.mean(errs, axis=0)
    keep = np.isfinite(errors)
    return EvalReport(
        variant=model.spec.variant,
        errors=errors[keep],
        image_ids=[r.image_id for r, k in zip(records, keep) if k],
        subject_ids=[r.subject_id for r, k in zip(records, keep) if k],
        predictions=np.mean(preds, axis=0)[keep],
        truths=truths[keep],
        policy=policy,
        flagged=flagged,
    )


@dataclass
class TrainResult:
    model: GazeNet
    history: list
    final: Checkpoint
    best: Checkpoint


def read_predictions(path):
    """Parse a predictions file; returns (truth_deg, pred_deg, error_deg) arrays."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if len(lines) < 2 or not lines[0].startswith("# variant="):
        raise ValueError(f"{path}:1: not a predictions file")
    truth, pred, err = [], [], []
    for lineno, line in enumerate(lines[2:], start=3):
        cells = line.split("\t")
        if len(cells) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(cells)}")
        try:
            v = [float(c) for c in cells[2:]]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        truth.append(v[0:2])
        pred.append(v[2:4])
        err.append(v[4])
    return np.array(truth).reshape(-1, 2), np.array(pred).reshape(-1, 2), np.array(err)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "nan" if not math.isfinite(v) else f"{v:.10g}"


def write_history(history, path) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(HISTORY_COLUMNS) + "\n")
        for row in history:
            fh.write("\t".join(_fmt(row[c]) for c in HISTORY_COLUMNS) + "\n")


def read_history(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split("\t") != list(HISTORY_COLUMNS):
        raise ValueError(f"{path}:1: not a history file (expected header {HISTORY_COLUMNS})")
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        if len(cells) != len(HISTORY_COLUMNS):
            raise ValueError(f"{path}:{lineno}: expected {len(HISTORY_COLUMNS)} fields")
        try:
            rows.append({c: float(v) for c, v in zip(HISTORY_COLUMNS, cells)})
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return rows


def train(
    cfg: TrainConfig,
    dataset,
    out_dir=None,
    model: GazeNet | None = None,
    callback=None,
) -> TrainResult:
    """Fit a model with Adam on the vector loss (or angular loss if configured).

    ``dataset`` is a :class:`Splits` or a plain list of training records.
    Per-epoch history rows carry the learning rate, mean train loss and the
    validation angular error; the best-on-validation and final states are
    returned as checkpoints and, with ``out_dir``, written to disk.

    ``callback(row, model)`` runs after every epoch; a true return value
    stops training early.
    """
    cfg.validated()
    splits = dataset if isinstance(dataset, Splits) else Splits(list(dataset))
    if not splits.train:
        raise TrainingError("training split is empty")
    if len(splits.train) < 2:
        raise TrainingError("batch norm needs at least two training records")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model = model or GazeNet(cfg.model_spec())
    spec = model.spec
    model.reseed(cfg.seed)
    opt = Adam(model, cfg.beta1, cfg.beta2, cfg.adam_eps)
    source = SampleSource(spec.input_resolution, spec.heatmap_scale, cfg.cache_samples)
    loss_fn = vector_loss_grad_angles if cfg.loss == "vector" else angular_loss_grad_angles
    history = []
    best_val, best = math.inf, None
    t0 = time.perf_counter()
    pool = None if cfg.deterministic else ThreadPoolExecutor(max_workers=1)
    try:
        with _thread_limits(cfg.deterministic):
            for epoch in range(cfg.epochs):
                lr = lr_at_epoch(cfg, epoch)
                recs = splits.train
                batches = epoch_batches(len(recs), cfg.batch_size, cfg.seed, epoch)

                def prepare(idx):
                    rs = [recs[i] for i in idx]
                    return source.batch(rs, [eye_choice(cfg.seed, epoch, r) for r in rs])

                pending = pool.submit(prepare, batches[0]) if pool else None
                total, count = 0.0, 0
                for bi, idx in enumerate(batches):
                    if pool:
                        b = pending.result()
                        if bi + 1 < len(batches):
                            pending = pool.submit(prepare, batches[bi + 1])
                    else:
                        b = prepare(idx)
                    model.zero_grad()
                    try:
                        pred = _forward(model, b, train=True)
                    except NonFiniteError as exc:
                        raise TrainingError(f"epoch {epoch} batch {bi}: {exc}") from None
                    loss, grad = loss_fn(pred, b["gaze"])
                    if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                        raise TrainingError(
                            f"non-finite loss at epoch {epoch} batch {bi} (loss={loss}); "
                            "angular loss gradients diverge as the error approaches zero"
                        )
                    model.backward(grad)
                    opt.step(lr)
                    total += loss * len(idx)
                    count += len(idx)
                if splits.val:
                    rep = evaluate(model, splits.val, cfg.eval_eye, cfg.seed, source)
                    vm, vs = rep.mean, rep.std
                else:
                    vm = vs = math.nan
                row = {
                    "epoch": epoch,
                    "lr": lr,
                    "train_loss": total / count,
                    "val_mean_deg": vm,
                    "val_std_deg": vs,
                    "wall_seconds": time.perf_counter() - t0,
                }
                history.append(row)
                log.info("epoch %d lr %.3g loss %.6f val %.3f", epoch, lr, row["train_loss"], vm)
                if math.isfinite(vm) and vm < best_val:
                    best_val = vm
                    best = Checkpoint.from_model(model, opt, epoch + 1, cfg.seed, {"val_mean_deg": vm})
                if callback is not None and callback(row, model):
                    break
    finally:
        if pool:
            pool.shutdown()
    final = Checkpoint.from_model(model, opt, len(history), cfg.seed, {"config": _config_dict(cfg)})
    best = best or final
    if out is not None:
        write_history(history, out / "history.tsv")
        save_checkpoint(final, out / "checkpoint_final.ckpt")
        save_checkpoint(best, out / "checkpoint_best.ckpt")
    return TrainResult(model, history, final, best)


def _config_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["lr_milestones"] = list(cfg.lr_milestones)
    return d


# ---------------------------------------------------------------------------
# experiment harnesses
# ---------------------------------------------------------------------------


def _paper_cells(ref: dict | None) -> list[str]:
    cells = []
    for ds in ("columbiagaze", "eyediap"):
        mean, std = (ref or {}).get(ds, (None, None))
        cells += ["-" if mean is None else f"{mean:.2f}", "-" if std is None else f"{std:.2f}"]
    return cells


REPORT_COLUMNS = (
    "variant",
    "resolution",
    "status",
    "n_test",
    "mean_deg",
    "std_deg",
    "paper_columbiagaze_mean",
    "paper_columbiagaze_std",
    "paper_eyediap_mean",
    "paper_eyediap_std",
)


@dataclass
class ReportRow:
    variant: str
    resolution: int
    status: str
    report: EvalReport | None
    paper: dict | None

    def cells(self) -> list[str]:
        r = self.report
        n = str(len(r.errors)) if r else "0"
        mean = f"{r.mean:.4f}" if r else "nan"
        std = f"{r.std:.4f}" if r else "nan"
        return [self.variant, str(self.resolution), self.status, n, mean, std] + _paper_cells(self.paper)


def write_report(rows, path) -> None:
    """Tab-separated results table; the reference columns are annotations, not results."""
    with open(path, "w") as fh:
        fh.write("\t".join(REPORT_COLUMNS) + "\n")
        for row in rows:
            fh.write("\t".join(row.cells()) + "\n")


def read_report(path) -> list[dict]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split("\t") != list(REPORT_COLUMNS):
        raise ValueError(f"{path}:1: not a report file")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        if len(cells) != len(REPORT_COLUMNS):
            raise ValueError(f"{path}:{lineno}: expected {len(REPORT_COLUMNS)} fields")
        rows.append(dict(zip(REPORT_COLUMNS, cells)))
    return rows


def _eval_split(splits: Splits):
    return splits.test or splits.val or splits.train


def _run_one(cfg: TrainConfig, splits: Splits, out: Path | None, tag: str):
    sub = out / tag if out is not None else None
    result = train(cfg, splits, sub)
    model = result.best.build() if splits.val else result.model
    rep = evaluate(model, _eval_split(splits), cfg.eval_eye, cfg.seed)
    if sub is not None:
        rep.write_tsv(sub / "predictions.tsv")
    return rep


def ablate(
    cfg: TrainConfig,
    dataset: Splits,
    variants=("F_B", "F_AF", "F_AO", "FLAME"),
    out_dir=None,
) -> list[ReportRow]:
    """Train and test each variant with identical seeds and splits."""
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for v in variants:
        vcfg = dataclasses.replace(cfg, variant=v)
        try:
            rep = _run_one(vcfg, dataset, out, v)
            rows.append(ReportRow(v, cfg.resolution, "ok", rep, PAPER_ABLATION.get(v)))
        except Exception as exc:  # one failed variant must not sink the table
            log.exception("variant %s failed", v)
            rows.append(ReportRow(v, cfg.resolution, f"error:{type(exc).__name__}", None, PAPER_ABLATION.get(v)))
    if out is not None:
        write_report(rows, out / "ablation.tsv")
    return rows


def resolution_sweep(cfg: TrainConfig, dataset: Splits, resolutions=(120, 60, 30), out_dir=None) -> list[ReportRow]:
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for res in resolutions:
        rcfg = dataclasses.replace(cfg, resolution=res)
        try:
            rep = _run_one(rcfg, dataset, out, f"res{res}")
            rows.append(ReportRow(cfg.variant, res, "ok", rep, PAPER_RESOLUTION.get(res)))
        except Exception as exc:
            log.exception("resolution %d failed", res)
            rows.append(ReportRow(cfg.variant, res, f"error:{type(exc).__name__}", None, PAPER_RESOLUTION.get(res)))
    if out is not None:
        write_report(rows, out / "resolution.tsv")
    return rows
