"""Experiment orchestration: train, fine-tune with grid selection, fit
detectors, and evaluate (model, detector) pairs against outlier test sets.

Configs are JSON files naming dataset containers by role, the network
architecture, phase hyperparameters, the regularizer grid, and detector
settings. The tuning protocol is explicit: "zero-shot" tunes detectors on
synthetic validation outliers only, "oracle" tunes on a held-out half of
each outlier test set and evaluates on the other half. Every command writes
its artifacts under the output directory and appends a manifest record
linking inputs by content hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gram, mahalanobis, nn, synthgen
from .data import Dataset, SplitPlan, check_disjoint, load_dataset, save_dataset, split
from .errors import ConfigError, DisjointnessError
from .losses import softmax
from .metrics import ScoreSample, evaluate_sample
from .synthgen import GenSpec, generate

PROTOCOLS = ("oracle", "zero-shot")

METRIC_KEYS = ("tnr95", "auroc", "dacc")

DEFAULT_LAM_GRID = (0.0, 0.01, 0.03, 0.05, 0.07, 0.1)

DEFAULT_EPS_GRID = (0.0, 0.001, 0.005, 0.01)

_LIST_ROLES = ("d_out_val", "d_out_test")


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class PhaseConfig:
    epochs: int
    batch_in: int
    momentum: float
    lr: nn.LrSchedule
    batch_oe: int = 0

    def train_config(self, seed: int) -> nn.TrainConfig:
        return nn.TrainConfig(epochs=self.epochs, batch_in=self.batch_in,
                              momentum=self.momentum, lr_schedule=self.lr,
                              seed=seed, batch_oe=self.batch_oe)


@dataclass(frozen=True)
class DetectorConfig:
    methods: tuple[str, ...] = ("msp", "md", "fcgm")
    eps_grid: tuple[float, ...] = DEFAULT_EPS_GRID
    orders: tuple[int, ...] = gram.DEFAULT_ORDERS
    val_partition_fraction: float = 0.2


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    out_dir: str
    tuning_protocol: str
    dataset_paths: dict
    input_shape: tuple[int, ...]
    num_classes: int
    layers: tuple[nn.LayerSpec, ...]
    train: PhaseConfig
    finetune: PhaseConfig
    lam1_grid: tuple[float, ...] = DEFAULT_LAM_GRID
    lam2_grid: tuple[float, ...] = DEFAULT_LAM_GRID
    detectors: DetectorConfig = DetectorConfig()
    metrics: tuple[str, ...] = METRIC_KEYS
    synthetic_kinds: tuple[str, ...] = synthgen.KINDS
    synthetic_count: int = 256


def small_conv_layers(in_channels: int, side: int, num_classes: int,
                      width: int = 8) -> list[nn.LayerSpec]:
    """A compact conv net for small square images: two conv/pool stages and
    one hidden dense layer."""
    reduced = side // 4
    return [
        nn.conv2d(in_channels, width, kernel=3, padding=1),
        nn.relu(),
        nn.avgpool(2),
        nn.conv2d(width, 2 * width, kernel=3, padding=1),
        nn.relu(),
        nn.avgpool(2),
        nn.flatten(),
        nn.dense(2 * width * reduced * reduced, 4 * width),
        nn.relu(),
        nn.dense(4 * width, num_classes),
    ]


def _parse_schedule(obj) -> nn.LrSchedule:
    try:
        return nn.LrSchedule(
            kind=obj["kind"], initial=float(obj["initial"]),
            drop_factor=float(obj.get("drop_factor", 0.1)),
            milestones=tuple(float(m) for m in obj.get("milestones", (0.5, 0.75))))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad lr schedule {obj!r}: {exc}")


def _parse_phase(obj, name: str) -> PhaseConfig:
    try:
        return PhaseConfig(
            epochs=int(obj["epochs"]), batch_in=int(obj["batch_in"]),
            momentum=float(obj.get("momentum", 0.9)),
            lr=_parse_schedule(obj["lr"]), batch_oe=int(obj.get("batch_oe", 0)))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad {name} phase config: {exc}")


def _parse_layers(specs, input_shape) -> tuple[nn.LayerSpec, ...]:
    """Build layer specs from JSON entries, inferring input dims from the
    running activation shape."""
    shape = tuple(int(e) for e in input_shape)
    out = []
    for i, obj in enumerate(specs):
        kind = obj.get("kind")
        if kind == "dense":
            if len(shape) != 1:
                raise ConfigError(f"layer {i}: dense after shape {shape}; "
                                  f"flatten first")
            out.append(nn.dense(shape[0], int(obj["out_dim"])))
            shape = (int(obj["out_dim"]),)
        elif kind == "conv2d":
            if len(shape) != 3:
                raise ConfigError(f"layer {i}: conv2d after shape {shape}")
            k = int(obj["kernel"])
            s = int(obj.get("stride", 1))
            p = int(obj.get("padding", 0))
            out.append(nn.conv2d(shape[0], int(obj["out_channels"]), k, s, p))
            h = (shape[1] + 2 * p - k) // s + 1
            w = (shape[2] + 2 * p - k) // s + 1
            shape = (int(obj["out_channels"]), h, w)
        elif kind == "relu":
            out.append(nn.relu())
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
            out.append(nn.flatten())
        elif kind == "avgpool":
            pool = int(obj["pool"])
            if len(shape) != 3 or shape[1] % pool or shape[2] % pool:
                raise ConfigError(f"layer {i}: avgpool {pool} after {shape}")
            out.append(nn.avgpool(pool))
            shape = (shape[0], shape[1] // pool, shape[2] // pool)
        else:
            raise ConfigError(f"layer {i}: unknown kind {kind!r}")
    return tuple(out)


def config_from_dict(obj: dict, base_dir: Path | None = None,
                     seed: int | None = None,
                     out_dir: str | None = None) -> ExperimentConfig:
    base_dir = Path(base_dir or ".")
    protocol = obj.get("tuning_protocol")
    if protocol not in PROTOCOLS:
        raise ConfigError(f"tuning_protocol must be one of {PROTOCOLS}, "
                          f"got {protocol!r}")
    raw_paths = obj.get("datasets", {})
    paths: dict = {}
    for role, value in raw_paths.items():
        if role in _LIST_ROLES:
            entries = [value] if isinstance(value, str) else list(value)
            paths[role] = [str((base_dir / p)) for p in entries]
        else:
            paths[role] = str(base_dir / value)
    for role, value in paths.items():
        for p in value if isinstance(value, list) else [value]:
            if not Path(p).exists():
                raise ConfigError(f"dataset role {role}: path {p} does not exist")
    net = obj.get("network")
    if not net:
        raise ConfigError("config needs a network section")
    try:
        input_shape = tuple(int(e) for e in net["input_shape"])
        num_classes = int(net["num_classes"])
        layer_objs = net["layers"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad network section: {exc}")
    layers = _parse_layers(layer_objs, input_shape)
    grid = obj.get("grid", {})
    lam1 = tuple(float(v) for v in grid.get("lam1", DEFAULT_LAM_GRID))
    lam2 = tuple(float(v) for v in grid.get("lam2", DEFAULT_LAM_GRID))
    if not lam1 or not lam2:
        raise ConfigError("regularizer grids must be non-empty")
    det = obj.get("detectors", {})
    det_cfg = DetectorConfig(
        methods=tuple(det.get("methods", ("msp", "md", "fcgm"))),
        eps_grid=tuple(float(e) for e in det.get("eps_grid", DEFAULT_EPS_GRID)),
        orders=tuple(int(p) for p in det.get("orders", gram.DEFAULT_ORDERS)),
        val_partition_fraction=float(det.get("val_partition_fraction", 0.2)))
    if not det_cfg.methods or not det_cfg.eps_grid or not det_cfg.orders:
        raise ConfigError("detector grids must be non-empty")
    for m in det_cfg.methods:
        if m not in ("msp", "md", "fcgm"):
            raise ConfigError(f"unknown detector method {m!r}")
    if not 0.0 < det_cfg.val_partition_fraction < 1.0:
        raise ConfigError("val_partition_fraction must lie in (0, 1)")
    metrics = tuple(obj.get("metrics", METRIC_KEYS))
    for m in metrics:
        if m not in METRIC_KEYS:
            raise ConfigError(f"unknown metric {m!r}")
    synth = obj.get("synthetic", {})
    kinds = tuple(synth.get("kinds", synthgen.KINDS))
    for k in kinds:
        if k not in synthgen.KINDS:
            raise ConfigError(f"unknown generator kind {k!r}")
    return ExperimentConfig(
        seed=int(obj.get("seed", 0)) if seed is None else int(seed),
        out_dir=str(base_dir / obj.get("out_dir", "out")) if out_dir is None
        else str(out_dir),
        tuning_protocol=protocol,
        dataset_paths=paths,
        input_shape=input_shape,
        num_classes=num_classes,
        layers=layers,
        train=_parse_phase(obj.get("train"), "train") if obj.get("train")
        else None,
        finetune=_parse_phase(obj.get("finetune"), "finetune")
        if obj.get("finetune") else None,
        lam1_grid=lam1, lam2_grid=lam2, detectors=det_cfg, metrics=metrics,
        synthetic_kinds=kinds, synthetic_count=int(synth.get("count", 256)))


def load_config(path, seed: int | None = None,
                out_dir: str | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    return config_from_dict(obj, base_dir=path.parent, seed=seed, out_dir=out_dir)


def _require_roles(cfg: ExperimentConfig, roles) -> None:
    for role in roles:
        if role not in cfg.dataset_paths or not cfg.dataset_paths[role]:
            raise ConfigError(f"dataset role {role} is missing from the config")


def load_role(cfg: ExperimentConfig, role: str):
    value = cfg.dataset_paths[role]
    if isinstance(value, list):
        return [load_dataset(p) for p in value]
    return load_dataset(value)


# ---------------------------------------------------------------------------
# Pipeline pieces (in-memory; commands wrap these with I/O)


def enforce_disjointness(oe: Dataset | None, vals: list[Dataset],
                         tests: list[Dataset]) -> None:
    """Refuse any overlap between held-out test outliers and the sets that
    tuning or fine-tuning is allowed to see."""
    for test_ds in tests:
        if oe is not None:
            ok, pair = check_disjoint(oe, test_ds)
            if not ok:
                raise DisjointnessError(f"d_out_oe/{oe.name}",
                                        f"d_out_test/{test_ds.name}", *pair)
        for val_ds in vals:
            ok, pair = check_disjoint(val_ds, test_ds)
            if not ok:
                raise DisjointnessError(f"d_out_val/{val_ds.name}",
                                        f"d_out_test/{test_ds.name}", *pair)


def partition_in_test(cfg: ExperimentConfig, d_in_test: Dataset):
    """Split the in-distribution test set into a tuning partition and the
    evaluation partition, deterministically in the master seed."""
    frac = cfg.detectors.val_partition_fraction
    plan = SplitPlan(seed=cfg.seed, fractions=(frac, 1.0 - frac))
    calib, eval_part = split(d_in_test, plan)
    return calib, eval_part


def partition_oracle(cfg: ExperimentConfig, d_out_test: Dataset):
    """Held-out half for detector tuning, the other half for evaluation."""
    plan = SplitPlan(seed=cfg.seed, fractions=(0.5, 0.5))
    tune, eval_part = split(d_out_test, plan)
    return tune, eval_part


def build_network(cfg: ExperimentConfig) -> nn.Network:
    return nn.build_network(cfg.layers, cfg.input_shape, cfg.num_classes,
                            cfg.seed)


def train_phase(cfg: ExperimentConfig, d_in_train: Dataset):
    if cfg.train is None:
        raise ConfigError("config has no train phase section")
    net = build_network(cfg)
    return nn.train(net, d_in_train.images, d_in_train.labels,
                    cfg.train.train_config(cfg.seed))


def msp_scores(net: nn.Network, images: np.ndarray) -> np.ndarray:
    return softmax(nn.predict_logits(net, images)).max(axis=1)


def msp_val_aurocs(net: nn.Network, val_in_images: np.ndarray,
                   val_sets: list[Dataset]) -> list[float]:
    in_scores = msp_scores(net, val_in_images)
    out = []
    for ds in val_sets:
        sample = ScoreSample(in_scores=in_scores,
                             out_scores=msp_scores(net, ds.images))
        out.append(evaluate_sample(sample).auroc)
    return out


def _finetune_unit(net: nn.Network, d_in_train: Dataset, oe_images: np.ndarray,
                   cfg: ExperimentConfig, a_tr: float, unit: int,
                   lam1: float, lam2: float,
                   val_in_images: np.ndarray, val_sets: list[Dataset]):
    """One regularizer grid point: fine-tune and measure selection scores."""
    unit_cfg = cfg.finetune.train_config(cfg.seed + 1 + unit)
    tuned = nn.finetune_oecc(net, d_in_train.images, d_in_train.labels,
                             oe_images, unit_cfg, lam1, lam2, a_tr)
    aurocs = msp_val_aurocs(tuned, val_in_images, val_sets)
    record = {"unit": unit, "lam1": lam1, "lam2": lam2,
              "seed": unit_cfg.seed, "val_auroc": aurocs,
              "mean_val_auroc": float(np.mean(aurocs))}
    return tuned, record


def finetune_grid(cfg: ExperimentConfig, net: nn.Network, a_tr: float,
                  d_in_train: Dataset, d_out_oe: Dataset,
                  val_in_images: np.ndarray, val_sets: list[Dataset],
                  jobs: int = 1, keep_all: bool = False):
    """Fine-tune every (lam1, lam2) grid point and select the best by mean
    max-softmax AUROC over the validation outlier sets.

    Returns (best net, best record, all records, all nets or None). Grid
    points are seeded by master seed + unit index, so parallel and serial
    runs agree bit for bit. Ties keep the earliest grid point.
    """
    if cfg.finetune is None:
        raise ConfigError("config has no finetune phase section")
    points = [(u, l1, l2)
              for u, (l1, l2) in enumerate(
                  (l1, l2) for l1 in cfg.lam1_grid for l2 in cfg.lam2_grid)]
    results: dict[int, tuple] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(_finetune_unit, net, d_in_train, d_out_oe.images,
                            cfg, a_tr, u, l1, l2, val_in_images, val_sets): u
                for u, l1, l2 in points}
            for fut, u in futures.items():
                results[u] = fut.result()
    else:
        for u, l1, l2 in points:
            results[u] = _finetune_unit(net, d_in_train, d_out_oe.images, cfg,
                                        a_tr, u, l1, l2, val_in_images, val_sets)
    records = [results[u][1] for u, _, _ in points]
    best_unit = max(range(len(points)),
                    key=lambda u: (records[u]["mean_val_auroc"], -u))
    nets = [results[u][0] for u, _, _ in points] if keep_all else None
    return results[best_unit][0], records[best_unit], records, nets


def fit_md_detector(cfg: ExperimentConfig, net: nn.Network,
                    d_in_train: Dataset, val_in_images: np.ndarray,
                    val_out_images: np.ndarray):
    """Fit the Mahalanobis detector and pick the input-shift magnitude from
    the configured grid by combined-score AUROC on the validation sets.
    Ties keep the earliest grid entry."""
    base = mahalanobis.fit(net, d_in_train.images, d_in_train.labels)
    best = None
    records = []
    for eps in cfg.detectors.eps_grid:
        state = dataclasses.replace(base, preproc_eps=eps)
        state = mahalanobis.fit_combiner(state, net, val_in_images, val_out_images)
        sample = ScoreSample(
            in_scores=mahalanobis.score_batch(state, net, val_in_images),
            out_scores=mahalanobis.score_batch(state, net, val_out_images))
        auroc = evaluate_sample(sample).auroc
        records.append({"eps": eps, "val_auroc": auroc})
        if best is None or auroc > best[0]:
            best = (auroc, state)
    return best[1], records


def fit_fcgm_detector(cfg: ExperimentConfig, net: nn.Network,
                      d_in_train: Dataset, calib_images: np.ndarray):
    bounds = gram.fit_bounds(net, d_in_train.images, cfg.detectors.orders)
    return gram.calibrate_normalizer(bounds, net, calib_images)


@dataclass
class TableRow:
    d_in: str
    d_out: str
    method: str
    result: dict | None
    error: str | None = None


@dataclass
class ResultTable:
    protocol: str
    metrics: tuple[str, ...]
    rows: list[TableRow]

    @property
    def failed_rows(self) -> list[TableRow]:
        return [r for r in self.rows if r.error is not None]


def method_label(model_name: str, detector: str) -> str:
    return detector if model_name == "ce" else f"{model_name}+{detector}"


def evaluate_models(cfg: ExperimentConfig, models: dict[str, nn.Network],
                    d_in_train: Dataset, d_in_test: Dataset,
                    d_out_vals: list[Dataset], d_out_tests: list[Dataset],
                    score_sink=None) -> ResultTable:
    """Fill the (model, detector, outlier set) result grid.

    Cell failures are recorded and the run continues. score_sink, when
    given, receives (d_in, d_out, method, in_scores, out_scores) for every
    successful cell so raw scores can be persisted.
    """
    calib, eval_in = partition_in_test(cfg, d_in_test)
    oracle_parts = None
    if cfg.tuning_protocol == "oracle":
        oracle_parts = [partition_oracle(cfg, ds) for ds in d_out_tests]
        tune_out_images = np.concatenate([t.images for t, _ in oracle_parts])
    else:
        tune_out_images = np.concatenate([ds.images for ds in d_out_vals])
    rows: list[TableRow] = []
    for model_name, net in models.items():
        detectors: dict[str, object] = {}
        det_errors: dict[str, str] = {}
        for method in cfg.detectors.methods:
            try:
                if method == "md":
                    detectors[method], _ = fit_md_detector(
                        cfg, net, d_in_train, calib.images, tune_out_images)
                elif method == "fcgm":
                    detectors[method] = fit_fcgm_detector(
                        cfg, net, d_in_train, calib.images)
                else:
                    detectors[method] = None
            except Exception as exc:
                det_errors[method] = f"{type(exc).__name__}: {exc}"
        for ti, test_ds in enumerate(d_out_tests):
            out_images = (oracle_parts[ti][1].images if oracle_parts is not None
                          else test_ds.images)
            for method in cfg.detectors.methods:
                label = method_label(model_name, method)
                if method in det_errors:
                    rows.append(TableRow(d_in_test.name, test_ds.name, label,
                                         None, det_errors[method]))
                    continue
                try:
                    if method == "msp":
                        in_s = msp_scores(net, eval_in.images)
                        out_s = msp_scores(net, out_images)
                    elif method == "md":
                        state = detectors[method]
                        in_s = mahalanobis.score_batch(state, net, eval_in.images)
                        out_s = mahalanobis.score_batch(state, net, out_images)
                    else:
                        bounds = detectors[method]
                        in_s = gram.score_batch(bounds, net, eval_in.images)
                        out_s = gram.score_batch(bounds, net, out_images)
                    sample = ScoreSample(in_scores=in_s, out_scores=out_s)
                    result = evaluate_sample(sample).as_dict()
                    if score_sink is not None:
                        score_sink(d_in_test.name, test_ds.name, label, in_s, out_s)
                    rows.append(TableRow(d_in_test.name, test_ds.name, label,
                                         {k: result[k] for k in cfg.metrics}))
                except Exception as exc:
                    rows.append(TableRow(d_in_test.name, test_ds.name, label,
                                         None, f"{type(exc).__name__}: {exc}"))
    return ResultTable(protocol=cfg.tuning_protocol, metrics=cfg.metrics,
                       rows=rows)


def render_table(table: ResultTable) -> str:
    """Plain-text table: percentages with one decimal, the best method per
    (d_in, d_out, metric) marked with *."""
    headers = ["d_in", "d_out", "method"] + [m.upper() for m in table.metrics]
    best: dict[tuple, float] = {}
    for row in table.rows:
        if row.result is None:
            continue
        for m in table.metrics:
            key = (row.d_in, row.d_out, m)
            best[key] = max(best.get(key, -math.inf), row.result[m])
    lines = [f"tuning protocol: {table.protocol}"]
    cells = [headers]
    for row in table.rows:
        entry = [row.d_in, row.d_out, row.method]
        if row.result is None:
            entry += [f"FAILED: {row.error}"] + [""] * (len(table.metrics) - 1)
        else:
            for m in table.metrics:
                mark = "*" if row.result[m] == best[(row.d_in, row.d_out, m)] else ""
                entry.append(f"{mark}{100.0 * row.result[m]:.1f}")
        cells.append(entry)
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    for r in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines)


def table_to_json(table: ResultTable) -> dict:
    return {
        "tuning_protocol": table.protocol,
        "metrics": list(table.metrics),
        "rows": [
            {"d_in": r.d_in, "d_out": r.d_out, "method": r.method,
             "result": r.result, "error": r.error}
            for r in table.rows
        ],
    }


# ---------------------------------------------------------------------------
# Commands (disk level)


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _hash_path(path) -> str:
    path = Path(path)
    if path.is_file():
        return _sha256_bytes(path.read_bytes())
    digest = hashlib.sha256()
    for child in sorted(p for p in path.rglob("*") if p.is_file()):
        digest.update(child.name.encode())
        digest.update(child.read_bytes())
    return digest.hexdigest()


def _record_manifest(cfg: ExperimentConfig, command: str, inputs: dict,
                     outputs: list) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "run_manifest.json"
    records = []
    if manifest_path.exists():
        records = json.loads(manifest_path.read_text())
    records.append({
        "command": command,
        "seed": cfg.seed,
        "tuning_protocol": cfg.tuning_protocol,
        "inputs": {label: _hash_path(p) for label, p in inputs.items()},
        "outputs": [str(p) for p in outputs],
    })
    manifest_path.write_text(json.dumps(records, indent=2, sort_keys=True))


def cmd_train(cfg: ExperimentConfig) -> Path:
    _require_roles(cfg, ["d_in_train"])
    d_in_train = load_role(cfg, "d_in_train")
    net, a_tr = train_phase(cfg, d_in_train)
    ckpt = Path(cfg.out_dir) / "ce_net"
    nn.save_network(net, ckpt, extra={"model_name": "ce", "a_tr": a_tr})
    _record_manifest(cfg, "train",
                     {"d_in_train": cfg.dataset_paths["d_in_train"]}, [ckpt])
    print(f"trained ce model: a_tr={a_tr:.4f} -> {ckpt}")
    return ckpt


def cmd_finetune(cfg: ExperimentConfig, checkpoint, jobs: int = 1) -> Path:
    _require_roles(cfg, ["d_in_train", "d_in_test", "d_out_oe", "d_out_val",
                         "d_out_test"])
    net, extra = nn.load_network(checkpoint)
    if "a_tr" not in extra:
        raise ConfigError(f"checkpoint {checkpoint} has no recorded training "
                          f"accuracy; run train first")
    a_tr = float(extra["a_tr"])
    d_in_train = load_role(cfg, "d_in_train")
    d_in_test = load_role(cfg, "d_in_test")
    d_out_oe = load_role(cfg, "d_out_oe")
    d_out_vals = load_role(cfg, "d_out_val")
    d_out_tests = load_role(cfg, "d_out_test")
    enforce_disjointness(d_out_oe, d_out_vals, d_out_tests)
    calib, _ = partition_in_test(cfg, d_in_test)
    best_net, best_record, records, _ = finetune_grid(
        cfg, net, a_tr, d_in_train, d_out_oe, calib.images, d_out_vals,
        jobs=jobs)
    out = Path(cfg.out_dir)
    grid_dir = out / "oecc_grid"
    grid_dir.mkdir(parents=True, exist_ok=True)
    (grid_dir / "grid_scores.json").write_text(
        json.dumps({"selected": best_record, "grid": records},
                   indent=2, sort_keys=True))
    ckpt = out / "oecc_net"
    nn.save_network(best_net, ckpt, extra={
        "model_name": "oecc", "a_tr": a_tr,
        "lam1": best_record["lam1"], "lam2": best_record["lam2"],
        "mean_val_auroc": best_record["mean_val_auroc"]})
    inputs = {"checkpoint": checkpoint,
              "d_in_train": cfg.dataset_paths["d_in_train"],
              "d_out_oe": cfg.dataset_paths["d_out_oe"]}
    _record_manifest(cfg, "finetune", inputs,
                     [ckpt, grid_dir / "grid_scores.json"])
    print(f"selected lam1={best_record['lam1']} lam2={best_record['lam2']} "
          f"(mean val auroc {best_record['mean_val_auroc']:.4f}) -> {ckpt}")
    return ckpt


def cmd_fit_detector(cfg: ExperimentConfig, checkpoint, detector: str) -> Path:
    if detector not in ("md", "fcgm"):
        raise ConfigError(f"unknown detector {detector!r}")
    net, extra = nn.load_network(checkpoint)
    model_name = extra.get("model_name", "model")
    _require_roles(cfg, ["d_in_train", "d_in_test"])
    d_in_train = load_role(cfg, "d_in_train")
    d_in_test = load_role(cfg, "d_in_test")
    calib, _ = partition_in_test(cfg, d_in_test)
    out = Path(cfg.out_dir) / "detectors" / f"{detector}_{model_name}"
    inputs = {"checkpoint": checkpoint,
              "d_in_train": cfg.dataset_paths["d_in_train"]}
    if detector == "md":
        _require_roles(cfg, ["d_out_test"] if cfg.tuning_protocol == "oracle"
                       else ["d_out_val"])
        if cfg.tuning_protocol == "oracle":
            d_out_tests = load_role(cfg, "d_out_test")
            tune_out = np.concatenate(
                [partition_oracle(cfg, ds)[0].images for ds in d_out_tests])
        else:
            d_out_vals = load_role(cfg, "d_out_val")
            enforce_disjointness(None, d_out_vals,
                                 load_role(cfg, "d_out_test")
                                 if "d_out_test" in cfg.dataset_paths else [])
            tune_out = np.concatenate([ds.images for ds in d_out_vals])
        state, records = fit_md_detector(cfg, net, d_in_train, calib.images,
                                         tune_out)
        mahalanobis.save_detector(state, out)
        (out / "eps_grid.json").write_text(json.dumps(records, indent=2))
    else:
        bounds = fit_fcgm_detector(cfg, net, d_in_train, calib.images)
        gram.save_detector(bounds, out)
    _record_manifest(cfg, f"fit-detector:{detector}", inputs, [out])
    print(f"fitted {detector} detector for {model_name} -> {out}")
    return out


def _score_path(out_dir, d_in: str, d_out: str, method: str) -> Path:
    safe = "".join(c if c.isalnum() or c in "+-_" else "-"
                   for c in f"{d_in}__{d_out}__{method}")
    return Path(out_dir) / "scores" / f"{safe}.json"


def cmd_evaluate(cfg: ExperimentConfig, checkpoints: dict[str, str]) -> ResultTable:
    _require_roles(cfg, ["d_in_train", "d_in_test", "d_out_test"])
    if cfg.tuning_protocol == "zero-shot" and "md" in cfg.detectors.methods:
        _require_roles(cfg, ["d_out_val"])
    models = {}
    for name, path in checkpoints.items():
        net, _ = nn.load_network(path)
        models[name] = net
    d_in_train = load_role(cfg, "d_in_train")
    d_in_test = load_role(cfg, "d_in_test")
    d_out_vals = (load_role(cfg, "d_out_val")
                  if "d_out_val" in cfg.dataset_paths else [])
    d_out_tests = load_role(cfg, "d_out_test")
    d_out_oe = (load_role(cfg, "d_out_oe")
                if "d_out_oe" in cfg.dataset_paths else None)
    enforce_disjointness(d_out_oe, d_out_vals, d_out_tests)
    out = Path(cfg.out_dir)
    (out / "scores").mkdir(parents=True, exist_ok=True)

    def sink(d_in, d_out, method, in_scores, out_scores):
        payload = {"d_in": d_in, "d_out": d_out, "method": method,
                   "in_scores": [float(v) for v in in_scores],
                   "out_scores": [float(v) for v in out_scores]}
        _score_path(out, d_in, d_out, method).write_text(json.dumps(payload))

    table = evaluate_models(cfg, models, d_in_train, d_in_test, d_out_vals,
                            d_out_tests, score_sink=sink)
    (out / "results.json").write_text(
        json.dumps(table_to_json(table), indent=2, sort_keys=True))
    text = render_table(table)
    (out / "results.txt").write_text(text + "\n")
    inputs = {f"checkpoint:{k}": v for k, v in checkpoints.items()}
    for role in ("d_in_train", "d_in_test"):
        inputs[role] = cfg.dataset_paths[role]
    _record_manifest(cfg, "evaluate", inputs,
                     [out / "results.json", out / "results.txt"])
    print(text)
    return table


def cmd_gen_synthetic(cfg: ExperimentConfig) -> dict[str, str]:
    """Write one validation outlier container per requested generator kind.

    Kinds whose preconditions fail (channel contract) are reported as
    refused; the rest are still produced.
    """
    source = None
    if any(synthgen.requires_source(k) for k in cfg.synthetic_kinds):
        _require_roles(cfg, ["d_in_train"])
        source = load_role(cfg, "d_in_train")
    out = Path(cfg.out_dir) / "synthetic"
    statuses: dict[str, str] = {}
    outputs = []
    for kind in cfg.synthetic_kinds:
        spec = GenSpec(kind=kind, seed=cfg.seed + 10 * synthgen.KINDS.index(kind),
                       count=cfg.synthetic_count,
                       shape=source.images.shape[1:] if source is not None
                       else tuple(cfg.input_shape))
        try:
            images = generate(spec, None if source is None else source.images)
        except Exception as exc:
            statuses[kind] = f"refused: {type(exc).__name__}: {exc}"
            print(f"{kind}: {statuses[kind]}")
            continue
        ds = Dataset(images=images, role="d_out_val", name=f"synth-{kind}",
                     provenance={"generator": kind, "seed": spec.seed,
                                 "count": spec.count, "sigma": spec.sigma})
        save_dataset(ds, out / kind)
        statuses[kind] = str(out / kind)
        outputs.append(out / kind)
        print(f"{kind}: wrote {out / kind}")
    inputs = ({"d_in_train": cfg.dataset_paths["d_in_train"]}
              if source is not None else {})
    _record_manifest(cfg, "gen-synthetic", inputs, outputs)
    return statuses


def cmd_report(out_dir) -> ResultTable:
    """Rebuild the result table from persisted raw scores and print it."""
    out = Path(out_dir)
    results_path = out / "results.json"
    if not results_path.exists():
        raise ConfigError(f"{results_path} does not exist; run evaluate first")
    stored = json.loads(results_path.read_text())
    rows = []
    for row in stored["rows"]:
        if row["error"] is not None:
            rows.append(TableRow(row["d_in"], row["d_out"], row["method"],
                                 None, row["error"]))
            continue
        path = _score_path(out, row["d_in"], row["d_out"], row["method"])
        payload = json.loads(path.read_text())
        sample = ScoreSample(
            in_scores=np.asarray(payload["in_scores"]),
            out_scores=np.asarray(payload["out_scores"]))
        result = evaluate_sample(sample).as_dict()
        rows.append(TableRow(row["d_in"], row["d_out"], row["method"],
                             {k: result[k] for k in stored["metrics"]}))
    table = ResultTable(protocol=stored["tuning_protocol"],
                        metrics=tuple(stored["metrics"]), rows=rows)
    print(render_table(table))
    return table
