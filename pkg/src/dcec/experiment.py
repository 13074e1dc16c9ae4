"""End-to-end pipelines, sweeps, ablations and the synthetic corpus."""

from __future__ import annotations

import colorsys
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .autoencoder import AdamaxState, CaeArchitecture, CaeModel, build_model, encode, pretrain
from .checkpoint import load_checkpoint, save_checkpoint
from .clustering import ClusterHead, cae_kmeans, dec_train, hard_assign, joint_train, soft_assign
from .config import TrainConfig
from .dataset import Dataset, ManifestEntry, load_dataset, write_manifest
from .metrics import calinski_harabasz, silhouette, unsupervised_accuracy

log = logging.getLogger(__name__)

METHODS = ("dcec", "dec", "cae-kmeans")

METRICS_SCHEMA = {
    "type": "object",
    "required": [
        "method", "k", "lambda", "n", "silhouette", "calinski_harabasz",
        "acc", "iterations", "converged", "centroid_shift",
    ],
    "additionalProperties": False,
    "properties": {
        "method": {"enum": list(METHODS)},
        "k": {"type": "integer", "minimum": 2},
        "lambda": {"type": "number", "minimum": 0, "maximum": 1},
        "n": {"type": "integer", "minimum": 1},
        "silhouette": {"type": ["number", "null"], "minimum": -1, "maximum": 1},
        "calinski_harabasz": {"type": ["number", "null"], "minimum": 0},
        "acc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "iterations": {"type": "integer", "minimum": 0},
        "converged": {"type": "boolean"},
        "centroid_shift": {"type": "number", "minimum": 0},
    },
}


@dataclass
class ExperimentSpec:
    manifest: Path
    out: Path
    method: str = "dcec"
    k_values: tuple[int, ...] = (9,)
    image_size: int = 128
    config: TrainConfig = field(default_factory=TrainConfig)
    checkpoint: Path | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")


@dataclass
class RunRecord:
    method: str
    k: int
    lambda_rec: float
    silhouette: float | None = None
    calinski_harabasz: float | None = None
    chi_normalized: float | None = None
    acc: float | None = None
    iterations: int = 0
    converged: bool = False
    centroid_shift: float = 0.0
    wall_time: float = 0.0
    error: str = ""

    def metrics_dict(self, n: int) -> dict:
        return {
            "method": self.method,
            "k": self.k,
            "lambda": self.lambda_rec,
            "n": n,
            "silhouette": self.silhouette,
            "calinski_harabasz": self.calinski_harabasz,
            "acc": self.acc,
            "iterations": self.iterations,
            "converged": self.converged,
            "centroid_shift": self.centroid_shift,
        }


@dataclass
class MethodOutput:
    record: RunRecord
    model: CaeModel
    head: ClusterHead
    labels: np.ndarray
    q: np.ndarray
    embeddings: np.ndarray
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# running one method
# ---------------------------------------------------------------------------

def _score(record: RunRecord, z: np.ndarray, labels: np.ndarray, true_labels) -> None:
    if len(np.unique(labels)) >= 2:
        record.silhouette = silhouette(z, labels)
        try:
            record.calinski_harabasz = calinski_harabasz(z, labels)
        except ValueError as exc:
            record.error = str(exc)
    else:
        record.error = "all samples fell into one cluster"
    if true_labels is not None:
        record.acc = unsupervised_accuracy(true_labels, labels)


def run_method(model: CaeModel, dataset: Dataset, method: str, k: int, config: TrainConfig) -> MethodOutput:
    """Cluster ``dataset`` with a pretrained ``model`` and score the result."""
    start = time.perf_counter()
    lam = config.lambda_rec if method == "dcec" else (0.0 if method == "dec" else 1.0)
    record = RunRecord(method=method, k=k, lambda_rec=lam)
    if method == "cae-kmeans":
        head, labels = cae_kmeans(model, dataset, k, config.kmeans_restarts, config.seed)
        z = encode(model, dataset.tensors)
        q = soft_assign(z, head)
        out = MethodOutput(record, model, head, labels, q, z)
        record.converged = True
    elif method in ("dcec", "dec"):
        train = joint_train if method == "dcec" else dec_train
        run = train(model, dataset, k, config)
        record.iterations = run.iterations
        record.converged = run.converged
        record.centroid_shift = float(np.max(np.abs(run.head.centroids - run.initial_head.centroids)))
        out = MethodOutput(record, run.model, run.head, run.labels, run.q, run.embeddings, run.history)
    else:
        raise ValueError(f"unknown method {method!r}")
    _score(record, out.embeddings, out.labels, dataset.labels)
    record.wall_time = time.perf_counter() - start
    return out


# ---------------------------------------------------------------------------
# file writers
# ---------------------------------------------------------------------------

def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_metrics_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


RUN_COLUMNS = (
    "method", "k", "lambda_rec", "silhouette", "calinski_harabasz", "chi_normalized",
    "acc", "iterations", "converged", "centroid_shift", "error",
)


def write_run_records(path: Path, records: list[RunRecord]) -> None:
    """Deterministic columns only; wall times go to a separate timings file."""
    _write_csv(path, RUN_COLUMNS, [[_fmt(getattr(r, c)) for c in RUN_COLUMNS] for r in records])
    _write_csv(
        path.with_name(path.stem + "_timings.csv"),
        ("method", "k", "lambda_rec", "wall_time"),
        [[r.method, r.k, _fmt(r.lambda_rec), f"{r.wall_time:.3f}"] for r in records],
    )


def read_run_records(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def normalize_chi(records: list[RunRecord]) -> None:
    values = [r.calinski_harabasz for r in records if r.calinski_harabasz is not None]
    top = max(values, default=None)
    for r in records:
        if r.calinski_harabasz is not None and top:
            r.chi_normalized = r.calinski_harabasz / top


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load(spec: ExperimentSpec) -> Dataset:
    return load_dataset(spec.manifest, spec.image_size)


def _check_k(spec: ExperimentSpec, n: int) -> None:
    bad = [k for k in spec.k_values if not 2 <= k <= n - 1]
    if not spec.k_values or bad:
        raise ValueError(f"k must lie in [2, {n - 1}] for {n} images, got {list(spec.k_values)}")


def _load_model(spec: ExperimentSpec):
    path = spec.checkpoint or spec.out / "pretrained.ckpt"
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    if ckpt.model.architecture.input_size != spec.image_size:
        raise ValueError(
            f"checkpoint expects {ckpt.model.architecture.input_size}px images, "
            f"--image-size is {spec.image_size}"
        )
    return ckpt


def cmd_pretrain(spec: ExperimentSpec, dataset: Dataset | None = None) -> tuple[CaeModel, list[float]]:
    dataset = dataset or _load(spec)
    spec.out.mkdir(parents=True, exist_ok=True)
    model = build_model(CaeArchitecture(input_size=spec.image_size), spec.config.seed)
    opt = AdamaxState.from_config(spec.config)
    model, losses = pretrain(model, dataset, spec.config, optimizer=opt)
    save_checkpoint(spec.out / "pretrained.ckpt", model, optimizer=opt)
    _write_csv(spec.out / "pretrain_loss.csv", ("epoch", "loss"), [[i, repr(v)] for i, v in enumerate(losses)])
    return model, losses


def _model_for(spec: ExperimentSpec, dataset: Dataset) -> CaeModel:
    """Use the given or default checkpoint if present, else pretrain first."""
    path = spec.checkpoint or spec.out / "pretrained.ckpt"
    if Path(path).is_file():
        return _load_model(spec).model
    if spec.checkpoint is not None:
        raise FileNotFoundError(f"checkpoint not found: {path}")
    log.info("no checkpoint at %s; pretraining for %d epochs", path, spec.config.pretrain_epochs)
    return cmd_pretrain(spec, dataset)[0]


def cmd_cluster(spec: ExperimentSpec, dataset: Dataset | None = None) -> MethodOutput:
    dataset = dataset or _load(spec)
    _check_k(spec, len(dataset))
    model = _load_model(spec).model
    spec.out.mkdir(parents=True, exist_ok=True)
    k = spec.k_values[0]
    out = run_method(model, dataset, spec.method, k, spec.config)
    _write_csv(
        spec.out / "assignments.csv",
        ("path", "cluster", "q_max"),
        [[e.image_path, int(c), repr(float(q))] for e, c, q in zip(dataset.entries, out.labels, out.q.max(axis=1))],
    )
    write_metrics_json(spec.out / "metrics.json", out.record.metrics_dict(len(dataset)))
    _write_csv(
        spec.out / "history.csv",
        ("iteration", "loss", "rec_loss", "clu_loss", "label_change"),
        [[h.iteration, repr(h.loss), repr(h.rec_loss), repr(h.clu_loss), repr(h.label_change)] for h in out.history],
    )
    save_checkpoint(spec.out / "clustered.ckpt", out.model, out.head)
    return out


def cmd_sweep_k(spec: ExperimentSpec, methods=METHODS, dataset: Dataset | None = None) -> list[RunRecord]:
    dataset = dataset or _load(spec)
    _check_k(spec, len(dataset))
    spec.out.mkdir(parents=True, exist_ok=True)
    model = _model_for(spec, dataset)
    records = []
    for method in methods:
        for k in spec.k_values:
            records.append(_safe_run(model, dataset, method, k, spec.config))
    normalize_chi(records)
    write_run_records(spec.out / "sweep_k.csv", records)
    return records


def _safe_run(model, dataset, method, k, config) -> RunRecord:
    try:
        return run_method(model, dataset, method, k, config).record
    except (ArithmeticError, ValueError) as exc:
        log.warning("%s k=%d failed: %s", method, k, exc)
        lam = config.lambda_rec if method == "dcec" else (0.0 if method == "dec" else 1.0)
        return RunRecord(method=method, k=k, lambda_rec=lam, error=str(exc))


ABLATION_COLUMNS = (
    "lambda_rec", "runs", "failed", "silhouette", "calinski_harabasz",
    "chi_normalized", "iterations", "centroid_shift",
)


@dataclass
class AblationRow:
    lambda_rec: float
    runs: int
    failed: int
    silhouette: float | None
    calinski_harabasz: float | None
    chi_normalized: float | None
    iterations: float
    centroid_shift: float


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def cmd_ablate_lambda(spec: ExperimentSpec, lambdas, dataset: Dataset | None = None) -> list[AblationRow]:
    """DCEC over every (lambda, k) cell, averaged over k per lambda.

    All cells share one pretrained checkpoint.
    """
    lambdas = [float(v) for v in lambdas]
    if any(not 0.0 <= v <= 1.0 for v in lambdas):
        raise ValueError("every lambda must lie in [0, 1]")
    dataset = dataset or _load(spec)
    _check_k(spec, len(dataset))
    spec.out.mkdir(parents=True, exist_ok=True)
    model = _model_for(spec, dataset)
    cells = []
    for lam in lambdas:
        config = spec.config.with_overrides(lambda_rec=lam)
        for k in spec.k_values:
            cells.append(_safe_run(model, dataset, "dcec", k, config))
    normalize_chi(cells)
    write_run_records(spec.out / "ablation_cells.csv", cells)
    rows = []
    for lam in lambdas:
        group = [c for c in cells if c.lambda_rec == lam]
        ok = [c for c in group if not c.error]
        rows.append(
            AblationRow(
                lambda_rec=lam,
                runs=len(group),
                failed=len(group) - len(ok),
                silhouette=_mean(c.silhouette for c in group),
                calinski_harabasz=_mean(c.calinski_harabasz for c in group),
                chi_normalized=_mean(c.chi_normalized for c in group),
                iterations=float(np.mean([c.iterations for c in group])),
                centroid_shift=float(np.mean([c.centroid_shift for c in group])),
            )
        )
    _write_csv(
        spec.out / "ablation.csv",
        ABLATION_COLUMNS,
        [[_fmt(getattr(r, c)) for c in ABLATION_COLUMNS] for r in rows],
    )
    return rows


def cmd_export_embeddings(spec: ExperimentSpec, dataset: Dataset | None = None) -> Path:
    """One row per image: path, cluster, embedding values.

    Clusters come from the checkpoint's centroids, or from k-means at the
    first requested k when the checkpoint has none.
    """
    dataset = dataset or _load(spec)
    ckpt = _load_model(spec)
    z = encode(ckpt.model, dataset.tensors)
    head = ckpt.head
    if head is None:
        _check_k(spec, len(dataset))
        head, _ = cae_kmeans(ckpt.model, dataset, spec.k_values[0], spec.config.kmeans_restarts, spec.config.seed)
    labels = hard_assign(soft_assign(z, head))
    spec.out.mkdir(parents=True, exist_ok=True)
    path = spec.out / "embeddings.csv"
    header = ["path", "cluster"] + [f"z{i}" for i in range(z.shape[1])]
    _write_csv(
        path,
        header,
        [[e.image_path, int(c)] + [repr(float(v)) for v in row] for e, c, row in zip(dataset.entries, labels, z)],
    )
    return path


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def _motif_mask(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = size / 2 + rng.uniform(-size / 32, size / 32, 2)
    r = size * rng.uniform(0.24, 0.28)
    if kind == 0:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 1:
        period = max(size / 4, 2.0)
        return ((yy + rng.uniform(0, period / 8)) % period) < period / 2
    return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)


def make_synthetic_corpus(out_dir, classes: int = 3, per_class: int = 100, image_size: int = 32, seed: int = 0) -> Path:
    """Write a labelled toy corpus and return its manifest path.

    Each class has its own dominant hue and shape motif (disc, stripes or
    square, cycling), with per-image jitter in colour, placement and noise.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 1 or image_size < 4:
        raise ValueError("per_class must be >= 1 and image_size >= 4")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for c in range(classes):
        hue = c / classes
        for i in range(per_class):
            h = (hue + rng.uniform(-0.03, 0.03)) % 1.0
            bg = np.array(colorsys.hsv_to_rgb(h, rng.uniform(0.55, 0.75), rng.uniform(0.65, 0.85)))
            fg = np.array(colorsys.hsv_to_rgb((h + 0.5) % 1.0, rng.uniform(0.3, 0.5), rng.uniform(0.85, 1.0)))
            mask = _motif_mask(c % 3, image_size, rng)[:, :, None]
            img = np.where(mask, fg, bg) * 255.0
            img += rng.normal(0.0, 8.0, img.shape)
            pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
            name = f"images/c{c}_{i:04d}.png"
            Image.fromarray(pixels, "RGB").save(out_dir / name, format="PNG")
            entries.append(ManifestEntry(name, c, f"class{c}"))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, entries)
    return manifest


def record_dicts(records) -> list[dict]:
    return [asdict(r) for r in records]
